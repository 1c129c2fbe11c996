//! Synthetic enlargement of the target training set.
//!
//! Continuous columns are represented by mode-specific normalization: a
//! k-component Gaussian mixture fitted per column, each value encoded as
//! (mode one-hot, α = (c − η)/(4φ) clipped to [−1, 1]). The default
//! generation strategy resamples rows conditionally on a (column,
//! category) pick, preserving pairwise structure with the conditioned
//! column; a bootstrap strategy is available as a baseline. Generated
//! batches never carry labels.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::data::{Cell, DataError, DomainDataset, Row, TabularSchema};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum OversampleError {
    #[error("numeric column is empty")]
    EmptyColumn,
    #[error("schema has no categorical columns")]
    NoCategoricalColumns,
    #[error("target dataset is empty")]
    EmptyTarget,
    #[error("count must be at least 1")]
    ZeroCount,
    #[error(transparent)]
    Data(#[from] DataError),
}

/// One fitted Gaussian mode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mode {
    pub weight: f64,
    pub mean: f64,
    pub std: f64,
}

/// Mode-specific normalization of one continuous column.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeNormalizer {
    pub modes: Vec<Mode>,
}

/// Encoded continuous value: dominant mode plus the within-mode scalar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeEncoded {
    pub mode: usize,
    pub alpha: f64,
}

const STD_FLOOR: f64 = 1e-6;

impl ModeNormalizer {
    pub fn mode_count(&self) -> usize {
        self.modes.len()
    }

    /// Posterior responsibilities p(mode | value).
    pub fn responsibilities(&self, value: f64) -> Vec<f64> {
        let logs: Vec<f64> = self
            .modes
            .iter()
            .map(|m| {
                let z = (value - m.mean) / m.std;
                m.weight.max(1e-300).ln() - m.std.ln() - 0.5 * z * z
            })
            .collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut resp: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
        let total: f64 = resp.iter().sum();
        for r in resp.iter_mut() {
            *r /= total;
        }
        resp
    }

    /// Encodes a value against its highest-responsibility mode:
    /// α = (c − η)/(4φ), clipped to [−1, 1].
    pub fn encode(&self, value: f64) -> ModeEncoded {
        let resp = self.responsibilities(value);
        let mode = resp
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let m = &self.modes[mode];
        let alpha = ((value - m.mean) / (4.0 * m.std)).clamp(-1.0, 1.0);
        ModeEncoded { mode, alpha }
    }

    /// Inverse of [`encode`](Self::encode): c = α·4φ + η.
    pub fn decode(&self, enc: ModeEncoded) -> f64 {
        let m = &self.modes[enc.mode];
        enc.alpha * 4.0 * m.std + m.mean
    }
}

/// Fits a k-mode Gaussian mixture to one numeric column by EM: at most
/// 100 iterations, stopping when the log-likelihood moves by < 1e-6.
/// k is reduced to the number of distinct values when smaller.
pub fn fit_mode_normalizer(
    values: &[f64],
    k: usize,
    seed: u64,
) -> Result<ModeNormalizer, OversampleError> {
    if values.is_empty() {
        return Err(OversampleError::EmptyColumn);
    }
    let mut distinct: Vec<f64> = values.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    distinct.dedup();
    let k = k.max(1).min(distinct.len());

    let n = values.len() as f64;
    let grand_mean = values.iter().sum::<f64>() / n;
    let grand_var = values
        .iter()
        .map(|v| (v - grand_mean) * (v - grand_mean))
        .sum::<f64>()
        / n;
    let grand_std = grand_var.sqrt().max(STD_FLOOR);

    if k == 1 {
        return Ok(ModeNormalizer {
            modes: vec![Mode {
                weight: 1.0,
                mean: grand_mean,
                std: grand_std,
            }],
        });
    }

    // Quantile init with a tiny seeded jitter to separate coincident means.
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..k)
        .map(|i| {
            let q = (i as f64 + 0.5) / k as f64;
            let idx = ((q * sorted.len() as f64) as usize).min(sorted.len() - 1);
            sorted[idx] + 1e-3 * grand_std * (rng.random::<f64>() - 0.5)
        })
        .collect();
    let mut stds = vec![grand_std; k];
    let mut weights = vec![1.0 / k as f64; k];

    let mut prev_ll = f64::NEG_INFINITY;
    let mut resp = vec![0.0; values.len() * k];
    for _ in 0..100 {
        // E-step in log space.
        let mut ll = 0.0;
        for (i, &v) in values.iter().enumerate() {
            let mut logs = vec![0.0; k];
            for m in 0..k {
                let z = (v - means[m]) / stds[m];
                logs[m] = weights[m].max(1e-300).ln()
                    - stds[m].ln()
                    - 0.5 * z * z
                    - 0.5 * (2.0 * std::f64::consts::PI).ln();
            }
            let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = logs.iter().map(|&l| (l - max).exp()).sum();
            ll += max + sum_exp.ln();
            for m in 0..k {
                resp[i * k + m] = (logs[m] - max).exp() / sum_exp;
            }
        }
        // M-step.
        for m in 0..k {
            let nm: f64 = (0..values.len()).map(|i| resp[i * k + m]).sum();
            if nm < 1e-12 {
                weights[m] = 0.0;
                continue;
            }
            weights[m] = nm / n;
            let mean = (0..values.len())
                .map(|i| resp[i * k + m] * values[i])
                .sum::<f64>()
                / nm;
            let var = (0..values.len())
                .map(|i| resp[i * k + m] * (values[i] - mean) * (values[i] - mean))
                .sum::<f64>()
                / nm;
            means[m] = mean;
            stds[m] = var.sqrt().max(STD_FLOOR);
        }
        if (ll - prev_ll).abs() < 1e-6 {
            break;
        }
        prev_ll = ll;
    }

    // Renormalize weights in case any mode collapsed.
    let wsum: f64 = weights.iter().sum();
    let modes = (0..k)
        .map(|m| Mode {
            weight: weights[m] / wsum,
            mean: means[m],
            std: stds[m],
        })
        .collect();
    Ok(ModeNormalizer { modes })
}

/// One-hot indicator of a chosen (categorical column, category) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionalVector {
    /// Feature index in the schema (must be categorical).
    pub feature: usize,
    pub category: u32,
}

impl ConditionalVector {
    /// Dense form: concatenated zero blocks per categorical column with a
    /// single 1 at the selected position.
    pub fn dense(&self, schema: &TabularSchema) -> Vec<f64> {
        let mut out = Vec::new();
        for &f in &schema.categorical_indices() {
            let n_cats = schema.features[f].categories().unwrap().len();
            let block_start = out.len();
            out.extend(std::iter::repeat(0.0).take(n_cats));
            if f == self.feature {
                out[block_start + self.category as usize] = 1.0;
            }
        }
        out
    }
}

/// Draws a conditional vector: uniform over categorical columns, then a
/// category within the column with probability ∝ log(1 + frequency), so
/// rare categories are explored far above their raw rate.
pub fn sample_conditional_vector(
    schema: &TabularSchema,
    target: &DomainDataset,
    rng: &mut ChaCha8Rng,
) -> Result<ConditionalVector, OversampleError> {
    let cat_cols = schema.categorical_indices();
    if cat_cols.is_empty() {
        return Err(OversampleError::NoCategoricalColumns);
    }
    let feature = cat_cols[rng.random_range(0..cat_cols.len())];
    let counts = target.category_counts(feature);
    let weights: Vec<f64> = counts.iter().map(|&c| (1.0 + c as f64).ln()).collect();
    let total: f64 = weights.iter().sum();
    let category = if total <= 0.0 {
        rng.random_range(0..counts.len()) as u32
    } else {
        let mut draw = rng.random::<f64>() * total;
        let mut picked = counts.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            if draw < *w {
                picked = i;
                break;
            }
            draw -= w;
        }
        picked as u32
    };
    Ok(ConditionalVector { feature, category })
}

/// Generation strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Conditional resampling over the fitted mode-specific representation.
    #[default]
    ConditionalMixture,
    /// Verbatim bootstrap of target rows.
    PassthroughBootstrap,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::ConditionalMixture => "conditional-mixture",
            Strategy::PassthroughBootstrap => "passthrough-bootstrap",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticProvenance {
    pub strategy: String,
    pub seed: u64,
    pub count: usize,
    pub source_digest: String,
}

/// Generated rows in raw (decoded) form. Carries no labels by
/// construction; converting to a dataset yields an unlabeled one.
#[derive(Debug, Clone)]
pub struct SyntheticBatch {
    rows: Vec<Row>,
    schema: Arc<TabularSchema>,
    provenance: SyntheticProvenance,
}

impl SyntheticBatch {
    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn provenance(&self) -> &SyntheticProvenance {
        &self.provenance
    }

    /// Unlabeled dataset view of the batch.
    pub fn into_dataset(self) -> Result<DomainDataset, DataError> {
        DomainDataset::from_rows(self.schema, self.rows, None, Vec::new())
    }

    pub fn to_dataset(&self) -> Result<DomainDataset, DataError> {
        self.clone().into_dataset()
    }
}

/// Default oversampler mode count.
pub const DEFAULT_MODE_COUNT: usize = 5;

/// Generates `count` synthetic rows from the (unlabeled view of the)
/// target dataset. Deterministic per (target content, strategy, seed).
pub fn generate_synthetic(
    target: &DomainDataset,
    count: usize,
    strategy: Strategy,
    mode_count: usize,
    seed: u64,
) -> Result<SyntheticBatch, OversampleError> {
    if target.n_rows() == 0 {
        return Err(OversampleError::EmptyTarget);
    }
    if count == 0 {
        return Err(OversampleError::ZeroCount);
    }
    let schema = Arc::clone(target.schema());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = match strategy {
        Strategy::PassthroughBootstrap => (0..count)
            .map(|_| target.row(rng.random_range(0..target.n_rows())).clone())
            .collect(),
        Strategy::ConditionalMixture => {
            generate_conditional(target, &schema, count, mode_count, &mut rng)?
        }
    };
    Ok(SyntheticBatch {
        rows,
        schema,
        provenance: SyntheticProvenance {
            strategy: strategy.name().to_string(),
            seed,
            count,
            source_digest: target.content_digest(),
        },
    })
}

fn generate_conditional(
    target: &DomainDataset,
    schema: &TabularSchema,
    count: usize,
    mode_count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Row>, OversampleError> {
    let cat_cols = schema.categorical_indices();
    let num_cols = schema.numeric_indices();

    // Fit one normalizer per continuous column, plus per-row
    // responsibilities for restricted mode sampling.
    let mut normalizers = Vec::with_capacity(num_cols.len());
    let mut row_resp: Vec<Vec<Vec<f64>>> = Vec::with_capacity(num_cols.len());
    for (j, &f) in num_cols.iter().enumerate() {
        let values = target.numeric_column(f);
        let norm = fit_mode_normalizer(&values, mode_count, 0x6f5a_1000 + j as u64)?;
        row_resp.push(values.iter().map(|&v| norm.responsibilities(v)).collect());
        normalizers.push(norm);
    }

    let alpha_prior = Normal::new(0.0, 0.25).expect("valid normal");
    let all_rows: Vec<usize> = (0..target.n_rows()).collect();
    let mut out = Vec::with_capacity(count);

    for _ in 0..count {
        let mut row: Row = vec![Cell::Number(0.0); schema.feature_count()];
        let restricted: Vec<usize>;
        let cond: Option<ConditionalVector>;
        if cat_cols.is_empty() {
            restricted = all_rows.clone();
            cond = None;
        } else {
            let cv = sample_conditional_vector(schema, target, rng)?;
            let matching: Vec<usize> = (0..target.n_rows())
                .filter(|&i| target.row(i)[cv.feature] == Cell::Category(cv.category))
                .collect();
            // Rare categories may match nothing; fall back to the whole
            // target so every draw still yields a row.
            restricted = if matching.is_empty() { all_rows.clone() } else { matching };
            cond = Some(cv);
        }

        for &f in &cat_cols {
            if let Some(cv) = cond {
                if cv.feature == f {
                    row[f] = Cell::Category(cv.category);
                    continue;
                }
            }
            let n_cats = schema.features[f].categories().unwrap().len();
            let mut counts = vec![0usize; n_cats];
            for &i in &restricted {
                if let Cell::Category(c) = target.row(i)[f] {
                    counts[c as usize] += 1;
                }
            }
            let total: usize = counts.iter().sum();
            let mut draw = rng.random_range(0..total.max(1));
            let mut picked = n_cats - 1;
            for (c, &cnt) in counts.iter().enumerate() {
                if draw < cnt {
                    picked = c;
                    break;
                }
                draw -= cnt;
            }
            row[f] = Cell::Category(picked as u32);
        }

        for (j, &f) in num_cols.iter().enumerate() {
            let norm = &normalizers[j];
            let k = norm.mode_count();
            let mut mode_weights = vec![0.0; k];
            for &i in &restricted {
                for (m, w) in mode_weights.iter_mut().enumerate() {
                    *w += row_resp[j][i][m];
                }
            }
            let total: f64 = mode_weights.iter().sum();
            let mut draw = rng.random::<f64>() * total;
            let mut mode = k - 1;
            for (m, w) in mode_weights.iter().enumerate() {
                if draw < *w {
                    mode = m;
                    break;
                }
                draw -= w;
            }
            let alpha: f64 = alpha_prior.sample(rng);
            let alpha = alpha.clamp(-1.0, 1.0);
            row[f] = Cell::Number(norm.decode(ModeEncoded { mode, alpha }));
        }

        out.push(row);
    }
    Ok(out)
}
