//! Checkpoint file: a one-line JSON manifest followed by the raw
//! little-endian f64 tensor payload. Offsets are relative to the payload
//! start; tensor order is the parameter declaration order.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{DomainDataset, NumericStats, TabularSchema};
use crate::numcore::{Matrix, ParamSet};

use super::{param_shapes, ForwardOutput, ModelConfig, ModelError, ModelParams};

pub const FORMAT_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Everything needed to reproduce the input encoding at inference time:
/// the standardization statistics the network was trained with, and the
/// training marginals of each categorical feature (used by the local
/// explainer's perturbation sampler).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderInfo {
    pub stats: Vec<NumericStats>,
    /// One frequency vector per categorical feature, in schema order.
    pub marginals: Vec<Vec<f64>>,
}

impl EncoderInfo {
    pub fn from_dataset(train: &DomainDataset) -> Self {
        let schema = train.schema();
        let marginals = schema
            .categorical_indices()
            .iter()
            .map(|&f| {
                let counts = train.category_counts(f);
                let total: usize = counts.iter().sum();
                counts
                    .iter()
                    .map(|&c| c as f64 / total.max(1) as f64)
                    .collect()
            })
            .collect();
        EncoderInfo {
            stats: train.stats_in_use(),
            marginals,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub seed: u64,
    pub config_digest: String,
}

impl Provenance {
    pub fn new(seed: u64, config_digest: impl Into<String>) -> Self {
        Provenance {
            tool_version: TOOL_VERSION.to_string(),
            seed,
            config_digest: config_digest.into(),
        }
    }
}

/// A trained model bundled with its schema, encoder statistics, and
/// provenance.
#[derive(Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub schema: Arc<TabularSchema>,
    pub params: ModelParams,
    pub encoder: EncoderInfo,
    pub provenance: Provenance,
}

impl Checkpoint {
    /// Forward pass over an encoded batch.
    pub fn infer(&self, x: &Matrix) -> Result<ForwardOutput, ModelError> {
        super::forward::infer(&self.params, &self.config, &self.schema, x)
    }

    /// Encodes a raw dataset with the checkpoint's standardization stats,
    /// then runs inference in batches of `batch_size`.
    pub fn infer_dataset(
        &self,
        dataset: &DomainDataset,
        batch_size: usize,
    ) -> Result<Vec<ForwardOutput>, ModelError> {
        if dataset.schema().as_ref() != self.schema.as_ref() {
            return Err(ModelError::BadCheckpoint {
                reason: "dataset schema differs from checkpoint schema".into(),
            });
        }
        let mut ds = dataset.clone();
        ds.encode_with_stats(self.encoder.stats.clone())?;
        let x = ds.encoded_matrix()?;
        let mut outputs = Vec::new();
        let mut start = 0;
        while start < x.rows() {
            let end = (start + batch_size).min(x.rows());
            let mut chunk = Matrix::zeros(end - start, x.cols());
            for r in start..end {
                chunk.row_mut(r - start).copy_from_slice(x.row(r));
            }
            outputs.push(self.infer(&chunk)?);
            start = end;
        }
        Ok(outputs)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    dtype: String,
    byte_offset: usize,
    byte_len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    tool_version: String,
    seed: u64,
    config_digest: String,
    model_config: ModelConfig,
    schema_digest: String,
    schema: TabularSchema,
    encoder: EncoderInfo,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let io_err = |e: std::io::Error| ModelError::Io {
        path: path.as_ref().display().to_string(),
        reason: e.to_string(),
    };

    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    for (name, m) in ckpt.params.set().iter() {
        let byte_offset = payload.len();
        for &v in m.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: [m.rows(), m.cols()],
            dtype: "f64".to_string(),
            byte_offset,
            byte_len: payload.len() - byte_offset,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        tool_version: ckpt.provenance.tool_version.clone(),
        seed: ckpt.provenance.seed,
        config_digest: ckpt.provenance.config_digest.clone(),
        model_config: ckpt.config.clone(),
        schema_digest: ckpt.schema.digest(),
        schema: (*ckpt.schema).clone(),
        encoder: ckpt.encoder.clone(),
        tensors,
    };
    let mut bytes = serde_json::to_vec(&manifest).map_err(|e| ModelError::BadCheckpoint {
        reason: e.to_string(),
    })?;
    bytes.push(b'\n');
    bytes.extend_from_slice(&payload);
    std::fs::write(path.as_ref(), bytes).map_err(io_err)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, ModelError> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| ModelError::Io {
        path: path.as_ref().display().to_string(),
        reason: e.to_string(),
    })?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| ModelError::BadCheckpoint {
            reason: "missing manifest delimiter".into(),
        })?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[..newline]).map_err(|e| ModelError::BadCheckpoint {
            reason: format!("bad manifest: {e}"),
        })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(ModelError::BadCheckpoint {
            reason: format!("unsupported format version {}", manifest.format_version),
        });
    }
    let schema = Arc::new(manifest.schema);
    if schema.digest() != manifest.schema_digest {
        return Err(ModelError::BadCheckpoint {
            reason: "schema digest mismatch".into(),
        });
    }
    let payload = &bytes[newline + 1..];

    let expected = param_shapes(&manifest.model_config, &schema)?;
    if expected.len() != manifest.tensors.len() {
        return Err(ModelError::BadCheckpoint {
            reason: format!(
                "expected {} tensors, found {}",
                expected.len(),
                manifest.tensors.len()
            ),
        });
    }
    let mut set = ParamSet::new();
    for ((name, shape), entry) in expected.iter().zip(&manifest.tensors) {
        if name != &entry.name || [shape.0, shape.1] != entry.shape || entry.dtype != "f64" {
            return Err(ModelError::BadCheckpoint {
                reason: format!("tensor '{}' does not match the expected layout", entry.name),
            });
        }
        let end = entry.byte_offset + entry.byte_len;
        if end > payload.len() || entry.byte_len != shape.0 * shape.1 * 8 {
            return Err(ModelError::BadCheckpoint {
                reason: format!("tensor '{}' payload out of bounds", entry.name),
            });
        }
        let data: Vec<f64> = payload[entry.byte_offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        set.insert(name.clone(), Matrix::from_vec(shape.0, shape.1, data)?);
    }

    Ok(Checkpoint {
        config: manifest.model_config,
        schema,
        params: ModelParams::from_set(set),
        encoder: manifest.encoder,
        provenance: Provenance {
            tool_version: manifest.tool_version,
            seed: manifest.seed,
            config_digest: manifest.config_digest,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Cell, FeatureSpec};
    use crate::model::init_params;

    fn toy() -> Checkpoint {
        let schema = Arc::new(
            TabularSchema::new(
                vec![
                    FeatureSpec::categorical("a", &["x", "y"]),
                    FeatureSpec::numeric("b"),
                ],
                None,
                None,
            )
            .unwrap(),
        );
        let config = ModelConfig {
            token_count: 2,
            d_model: 4,
            heads: 2,
            ffn_hidden: 6,
            trunk_widths: vec![5, 4],
            ..ModelConfig::default()
        };
        let params = init_params(&config, &schema, 11).unwrap();
        Checkpoint {
            config,
            schema,
            params,
            encoder: EncoderInfo {
                stats: vec![NumericStats { mean: 1.5, std: 0.25 }],
                marginals: vec![vec![0.7, 0.3]],
            },
            provenance: Provenance::new(11, "deadbeef"),
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let ckpt = toy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();

        for ((n1, m1), (n2, m2)) in ckpt.params.set().iter().zip(back.params.set().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(m1, m2, "tensor {n1} changed");
        }
        assert_eq!(back.encoder, ckpt.encoder);
        assert_eq!(back.provenance.seed, 11);

        // And identical forward outputs on the same batch.
        let rows = vec![
            vec![Cell::Category(0), Cell::Number(2.0)],
            vec![Cell::Category(1), Cell::Number(1.0)],
        ];
        let ds = DomainDataset::from_rows(ckpt.schema.clone(), rows, None, Vec::new()).unwrap();
        let a = ckpt.infer_dataset(&ds, 8).unwrap();
        let b = back.infer_dataset(&ds, 8).unwrap();
        assert_eq!(a[0].probabilities, b[0].probabilities);
        assert_eq!(a[0].deep_features, b[0].deep_features);
    }

    #[test]
    fn save_twice_is_byte_identical() {
        let ckpt = toy();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&ckpt, &p1).unwrap();
        save_checkpoint(&ckpt, &p2).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn manifest_is_readable_first_line() {
        let ckpt = toy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&ckpt, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let newline = bytes.iter().position(|&b| b == b'\n').unwrap();
        let v: serde_json::Value = serde_json::from_slice(&bytes[..newline]).unwrap();
        assert_eq!(v["format_version"], 1);
        assert_eq!(v["tensors"][0]["dtype"], "f64");
        assert_eq!(v["schema_digest"], ckpt.schema.digest());
    }

    #[test]
    fn corrupted_manifest_is_rejected() {
        let ckpt = toy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&ckpt, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[1] = b'!';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(ModelError::BadCheckpoint { .. })
        ));
    }
}
