//! Aggregated feature×feature attention maps and class-difference maps.

use serde::{Deserialize, Serialize};

use crate::data::DomainDataset;
use crate::model::Checkpoint;

use super::ExplainError;

const BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionFilter {
    All,
    Defaulting,
    NonDefaulting,
}

impl AttentionFilter {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "all" => Some(AttentionFilter::All),
            "defaulting" => Some(AttentionFilter::Defaulting),
            "non_defaulting" => Some(AttentionFilter::NonDefaulting),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregation {
    pub heads: String,
    pub blocks: String,
    pub filter: AttentionFilter,
    pub instances: usize,
}

/// Mean feature×feature attention over the filtered instances, with
/// per-feature importance summarized as column sums (a column collects
/// how much every query token attends to that feature).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionMap {
    pub features: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
    pub aggregation: Aggregation,
    pub feature_importance: Vec<f64>,
    pub importance_basis: String,
}

impl AttentionMap {
    pub fn size(&self) -> usize {
        self.features.len()
    }

    /// Indices of the most important features by column sum, descending.
    pub fn top_features(&self, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.feature_importance.len()).collect();
        idx.sort_by(|&a, &b| {
            self.feature_importance[b]
                .partial_cmp(&self.feature_importance[a])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        idx.truncate(k);
        idx
    }
}

/// Per-instance head-averaged attention, then averaged over the
/// instances selected by `filter`.
pub fn attention_map(
    checkpoint: &Checkpoint,
    dataset: &DomainDataset,
    filter: AttentionFilter,
) -> Result<AttentionMap, ExplainError> {
    if dataset.n_rows() == 0 {
        return Err(ExplainError::EmptyFilterSelection);
    }
    let labels = dataset.labels();
    if filter != AttentionFilter::All && labels.is_none() {
        return Err(ExplainError::UnlabeledDataset);
    }
    let keep = |row: usize| -> bool {
        match filter {
            AttentionFilter::All => true,
            AttentionFilter::Defaulting => labels.unwrap()[row] == 1,
            AttentionFilter::NonDefaulting => labels.unwrap()[row] == 0,
        }
    };

    let t = checkpoint.config.token_count;
    let mut acc = vec![vec![0.0f64; t]; t];
    let mut count = 0usize;
    let outputs = checkpoint.infer_dataset(dataset, BATCH)?;
    let mut row = 0usize;
    for out in &outputs {
        for i in 0..out.batch_size() {
            if keep(row) {
                let a = out.instance_mean_attention(i);
                for r in 0..t {
                    for c in 0..t {
                        acc[r][c] += a.get(r, c);
                    }
                }
                count += 1;
            }
            row += 1;
        }
    }
    if count == 0 {
        return Err(ExplainError::EmptyFilterSelection);
    }
    for r in acc.iter_mut() {
        for v in r.iter_mut() {
            *v /= count as f64;
        }
    }
    let importance: Vec<f64> = (0..t).map(|c| (0..t).map(|r| acc[r][c]).sum()).collect();
    Ok(AttentionMap {
        features: checkpoint.schema.feature_names(),
        matrix: acc,
        aggregation: Aggregation {
            heads: "mean".to_string(),
            blocks: "mean".to_string(),
            filter,
            instances: count,
        },
        feature_importance: importance,
        importance_basis: "column_sums".to_string(),
    })
}

/// Elementwise difference map; positive entries are defaulting-associated.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionDiff {
    pub features: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
}

pub fn attention_diff(
    defaulting: &AttentionMap,
    non_defaulting: &AttentionMap,
) -> Result<AttentionDiff, ExplainError> {
    if defaulting.size() != non_defaulting.size()
        || defaulting.features != non_defaulting.features
    {
        return Err(ExplainError::ShapeMismatch);
    }
    let t = defaulting.size();
    let matrix = (0..t)
        .map(|r| {
            (0..t)
                .map(|c| defaulting.matrix[r][c] - non_defaulting.matrix[r][c])
                .collect()
        })
        .collect();
    Ok(AttentionDiff {
        features: defaulting.features.clone(),
        matrix,
    })
}

impl AttentionDiff {
    /// Cells ordered by |difference| descending.
    pub fn ranked_cells(&self) -> Vec<(usize, usize, f64)> {
        let t = self.features.len();
        let mut cells: Vec<(usize, usize, f64)> = (0..t)
            .flat_map(|r| (0..t).map(move |c| (r, c)))
            .map(|(r, c)| (r, c, self.matrix[r][c]))
            .collect();
        cells.sort_by(|a, b| {
            b.2.abs()
                .partial_cmp(&a.2.abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        cells
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Cell, FeatureSpec, TabularSchema};
    use crate::model::{init_params, EncoderInfo, ModelConfig, Provenance};
    use std::sync::Arc;

    fn toy_checkpoint() -> Checkpoint {
        let schema = Arc::new(
            TabularSchema::new(
                vec![
                    FeatureSpec::categorical("a", &["x", "y"]),
                    FeatureSpec::numeric("b"),
                    FeatureSpec::categorical("c", &["p", "q", "r"]),
                ],
                Some("label".into()),
                None,
            )
            .unwrap(),
        );
        let config = ModelConfig {
            token_count: 3,
            d_model: 4,
            heads: 2,
            ffn_hidden: 6,
            trunk_widths: vec![6, 5, 4],
            ..ModelConfig::default()
        };
        let params = init_params(&config, &schema, 77).unwrap();
        Checkpoint {
            config,
            schema,
            params,
            encoder: EncoderInfo {
                stats: vec![crate::data::NumericStats { mean: 0.0, std: 1.0 }],
                marginals: vec![vec![0.5, 0.5], vec![0.4, 0.3, 0.3]],
            },
            provenance: Provenance::new(77, "t"),
        }
    }

    fn toy_dataset(ckpt: &Checkpoint, n: usize, labels: Option<Vec<u8>>) -> DomainDataset {
        let rows: Vec<Vec<Cell>> = (0..n)
            .map(|i| {
                vec![
                    Cell::Category((i % 2) as u32),
                    Cell::Number(i as f64 * 0.3 - 1.0),
                    Cell::Category((i % 3) as u32),
                ]
            })
            .collect();
        DomainDataset::from_rows(ckpt.schema.clone(), rows, labels, Vec::new()).unwrap()
    }

    #[test]
    fn map_is_row_stochastic_and_mean_of_instances() {
        let ckpt = toy_checkpoint();
        let ds = toy_dataset(&ckpt, 7, None);
        let map = attention_map(&ckpt, &ds, AttentionFilter::All).unwrap();
        for row in &map.matrix {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "row sum {sum}");
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        assert_eq!(map.aggregation.instances, 7);

        // Single-instance map equals that instance's head-averaged matrix.
        let one = toy_dataset(&ckpt, 1, None);
        let map1 = attention_map(&ckpt, &one, AttentionFilter::All).unwrap();
        let out = ckpt.infer_dataset(&one, 8).unwrap();
        let expect = out[0].instance_mean_attention(0);
        for r in 0..3 {
            for c in 0..3 {
                assert!((map1.matrix[r][c] - expect.get(r, c)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn class_maps_combine_to_the_all_map() {
        let ckpt = toy_checkpoint();
        let labels: Vec<u8> = (0..10).map(|i| (i < 4) as u8).collect();
        let ds = toy_dataset(&ckpt, 10, Some(labels));
        let all = attention_map(&ckpt, &ds, AttentionFilter::All).unwrap();
        let pos = attention_map(&ckpt, &ds, AttentionFilter::Defaulting).unwrap();
        let neg = attention_map(&ckpt, &ds, AttentionFilter::NonDefaulting).unwrap();
        let (np, nn) = (4.0, 6.0);
        for r in 0..3 {
            for c in 0..3 {
                let mixed = (np * pos.matrix[r][c] + nn * neg.matrix[r][c]) / (np + nn);
                assert!((all.matrix[r][c] - mixed).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn filter_on_unlabeled_dataset_errors() {
        let ckpt = toy_checkpoint();
        let ds = toy_dataset(&ckpt, 5, None);
        assert!(matches!(
            attention_map(&ckpt, &ds, AttentionFilter::Defaulting),
            Err(ExplainError::UnlabeledDataset)
        ));
    }

    #[test]
    fn empty_filter_selection_errors() {
        let ckpt = toy_checkpoint();
        let ds = toy_dataset(&ckpt, 5, Some(vec![0; 5]));
        assert!(matches!(
            attention_map(&ckpt, &ds, AttentionFilter::Defaulting),
            Err(ExplainError::EmptyFilterSelection)
        ));
    }

    #[test]
    fn diff_is_antisymmetric_and_zero_on_identical() {
        let ckpt = toy_checkpoint();
        let labels: Vec<u8> = (0..10).map(|i| (i % 2) as u8).collect();
        let ds = toy_dataset(&ckpt, 10, Some(labels));
        let pos = attention_map(&ckpt, &ds, AttentionFilter::Defaulting).unwrap();
        let neg = attention_map(&ckpt, &ds, AttentionFilter::NonDefaulting).unwrap();

        let zero = attention_diff(&pos, &pos).unwrap();
        assert!(zero.matrix.iter().flatten().all(|&v| v == 0.0));

        let d1 = attention_diff(&pos, &neg).unwrap();
        let d2 = attention_diff(&neg, &pos).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(d1.matrix[r][c], -d2.matrix[r][c]);
            }
        }
    }
}
