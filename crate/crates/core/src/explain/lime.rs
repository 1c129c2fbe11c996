//! Local surrogate explanations: proximity-weighted ridge regression on
//! perturbed neighbors of one instance.
//!
//! Continuous features are perturbed by standard-normal draws in
//! standardized space; categorical features are resampled from the
//! training marginals with a configurable probability. The surrogate's
//! interpretable inputs are the standardized continuous values and 0/1
//! same-category indicators, so a weight reads as "effect of this
//! feature near the instance".

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Cell, Row, TabularSchema};
use crate::model::{Checkpoint, EncoderInfo};

use super::ExplainError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LimeConfig {
    pub n_perturbations: usize,
    /// Proximity kernel width σ; `None` uses 0.75·√d_enc.
    pub kernel_width: Option<f64>,
    /// Per-feature probability of resampling a categorical value.
    pub categorical_flip_prob: f64,
    pub ridge_penalty: f64,
    /// K: how many features the explanation keeps.
    pub retained_features: usize,
}

impl Default for LimeConfig {
    fn default() -> Self {
        LimeConfig {
            n_perturbations: 5000,
            kernel_width: None,
            categorical_flip_prob: 0.5,
            ridge_penalty: 1.0,
            retained_features: 10,
        }
    }
}

impl LimeConfig {
    pub fn validate(&self, feature_count: usize) -> Result<(), ExplainError> {
        if self.n_perturbations < 100 {
            return Err(ExplainError::InvalidConfig {
                reason: format!("n_perturbations {} below 100", self.n_perturbations),
            });
        }
        if let Some(w) = self.kernel_width {
            if w <= 0.0 {
                return Err(ExplainError::InvalidConfig {
                    reason: "kernel width must be positive".into(),
                });
            }
        }
        if !(0.0..=1.0).contains(&self.categorical_flip_prob) {
            return Err(ExplainError::InvalidConfig {
                reason: "categorical_flip_prob must lie in [0,1]".into(),
            });
        }
        if self.ridge_penalty < 0.0 {
            return Err(ExplainError::InvalidConfig {
                reason: "ridge_penalty must be non-negative".into(),
            });
        }
        if self.retained_features == 0 || self.retained_features > feature_count {
            return Err(ExplainError::InvalidConfig {
                reason: format!(
                    "retained_features {} outside 1..={feature_count}",
                    self.retained_features
                ),
            });
        }
        Ok(())
    }

    pub fn effective_kernel_width(&self, encoded_width: usize) -> f64 {
        self.kernel_width
            .unwrap_or_else(|| 0.75 * (encoded_width as f64).sqrt())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureWeight {
    pub feature: String,
    pub weight: f64,
}

/// Signed local surrogate weights for one instance, with fit diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Explanation {
    pub instance_id: usize,
    pub probability: f64,
    /// Sorted by |weight| descending; positive supports defaulting.
    pub weights: Vec<FeatureWeight>,
    pub intercept: f64,
    pub r2: f64,
    pub kernel_width: f64,
}

/// Batch scorer of raw rows; positive-class probability per row.
pub type ScoreFn<'a> = dyn Fn(&[Row]) -> Result<Vec<f64>, ExplainError> + 'a;

/// Explains one instance of a checkpointed model.
pub fn lime_explain(
    checkpoint: &Checkpoint,
    instance: &Row,
    instance_id: usize,
    cfg: &LimeConfig,
    seed: u64,
) -> Result<Explanation, ExplainError> {
    let schema = checkpoint.schema.clone();
    let score = |rows: &[Row]| -> Result<Vec<f64>, ExplainError> {
        let ds = crate::data::DomainDataset::from_rows(
            schema.clone(),
            rows.to_vec(),
            None,
            Vec::new(),
        )?;
        let outs = checkpoint.infer_dataset(&ds, 256)?;
        Ok(outs.into_iter().flat_map(|o| o.probabilities).collect())
    };
    lime_explain_fn(
        &score,
        &checkpoint.schema,
        &checkpoint.encoder,
        instance,
        instance_id,
        cfg,
        seed,
    )
}

/// Explains one instance of an arbitrary black box.
pub fn lime_explain_fn(
    black_box: &ScoreFn,
    schema: &TabularSchema,
    encoder: &EncoderInfo,
    instance: &Row,
    instance_id: usize,
    cfg: &LimeConfig,
    seed: u64,
) -> Result<Explanation, ExplainError> {
    cfg.validate(schema.feature_count())?;
    let sigma = cfg.effective_kernel_width(schema.encoded_width());
    let n = cfg.n_perturbations;
    let t = schema.feature_count();
    let numeric = schema.numeric_indices();
    let categorical = schema.categorical_indices();
    if encoder.stats.len() != numeric.len() || encoder.marginals.len() != categorical.len() {
        return Err(ExplainError::InvalidConfig {
            reason: "encoder stats do not match the schema".into(),
        });
    }

    // Standardized coordinates of the instance's numeric features.
    let z0: Vec<f64> = numeric
        .iter()
        .enumerate()
        .map(|(j, &f)| {
            let v = match instance[f] {
                Cell::Number(v) => v,
                Cell::Category(_) => f64::NAN,
            };
            let s = &encoder.stats[j];
            if s.std > 0.0 {
                (v - s.mean) / s.std
            } else {
                0.0
            }
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Row> = Vec::with_capacity(n);
    // Interpretable design: standardized numerics + same-category flags.
    let mut design: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut dist_sq: Vec<f64> = Vec::with_capacity(n);

    for _ in 0..n {
        let mut row = instance.clone();
        let mut x = vec![0.0f64; t];
        let mut d2 = 0.0;
        for (j, &f) in numeric.iter().enumerate() {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let z = z0[j] + noise;
            let s = &encoder.stats[j];
            let raw = if s.std > 0.0 { z * s.std + s.mean } else { s.mean };
            row[f] = Cell::Number(raw);
            let z_eff = if s.std > 0.0 { z } else { z0[j] };
            x[f] = z_eff;
            d2 += (z_eff - z0[j]) * (z_eff - z0[j]);
        }
        for (j, &f) in categorical.iter().enumerate() {
            let original = match instance[f] {
                Cell::Category(c) => c,
                Cell::Number(_) => 0,
            };
            let mut value = original;
            if rng.random::<f64>() < cfg.categorical_flip_prob {
                value = sample_marginal(&encoder.marginals[j], &mut rng);
            }
            row[f] = Cell::Category(value);
            let same = value == original;
            x[f] = if same { 1.0 } else { 0.0 };
            if !same {
                d2 += 1.0;
            }
        }
        rows.push(row);
        design.push(x);
        dist_sq.push(d2);
    }

    // All-identical neighborhoods carry no local signal to fit.
    let degenerate = (0..t).all(|c| {
        let first = design[0][c];
        design.iter().all(|r| r[c] == first)
    });
    if degenerate {
        return Err(ExplainError::DegeneratePerturbations);
    }

    let targets = black_box(&rows)?;
    if targets.len() != n {
        return Err(ExplainError::InvalidConfig {
            reason: "black box returned wrong number of scores".into(),
        });
    }
    let instance_probability = black_box(std::slice::from_ref(instance))?
        .first()
        .copied()
        .unwrap_or(f64::NAN);

    let proximity: Vec<f64> = dist_sq.iter().map(|&d| (-d / (sigma * sigma)).exp()).collect();

    // Full ridge fit, then hard selection of the K largest |weight|
    // features and a refit on the survivors.
    let full = ridge_fit(&design, &targets, &proximity, cfg.ridge_penalty, None)?;
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|&a, &b| {
        full.coefficients[b]
            .abs()
            .partial_cmp(&full.coefficients[a].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let selected: Vec<usize> = order.into_iter().take(cfg.retained_features).collect();
    let fit = ridge_fit(
        &design,
        &targets,
        &proximity,
        cfg.ridge_penalty,
        Some(&selected),
    )?;

    let mut weights: Vec<FeatureWeight> = selected
        .iter()
        .enumerate()
        .map(|(k, &f)| FeatureWeight {
            feature: schema.features[f].name.clone(),
            weight: fit.coefficients_selected[k],
        })
        .collect();
    weights.sort_by(|a, b| {
        b.weight
            .abs()
            .partial_cmp(&a.weight.abs())
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    Ok(Explanation {
        instance_id,
        probability: instance_probability,
        weights,
        intercept: fit.intercept,
        r2: fit.r2,
        kernel_width: sigma,
    })
}

fn sample_marginal(marginal: &[f64], rng: &mut ChaCha8Rng) -> u32 {
    let total: f64 = marginal.iter().sum();
    if total <= 0.0 {
        return 0;
    }
    let mut draw = rng.random::<f64>() * total;
    for (i, &p) in marginal.iter().enumerate() {
        if draw < p {
            return i as u32;
        }
        draw -= p;
    }
    (marginal.len() - 1) as u32
}

struct RidgeFit {
    /// Coefficients over all columns (zeros for unselected ones).
    coefficients: Vec<f64>,
    /// Coefficients in selection order (full column set when None).
    coefficients_selected: Vec<f64>,
    intercept: f64,
    r2: f64,
}

/// Proximity-weighted ridge regression with an unpenalized intercept,
/// solved by Gaussian elimination on the (tiny) normal equations.
fn ridge_fit(
    design: &[Vec<f64>],
    targets: &[f64],
    weights: &[f64],
    penalty: f64,
    selection: Option<&[usize]>,
) -> Result<RidgeFit, ExplainError> {
    let n = design.len();
    let all: Vec<usize> = (0..design[0].len()).collect();
    let cols: &[usize] = selection.unwrap_or(&all);
    let d = cols.len();
    let dim = d + 1; // + intercept

    let mut ata = vec![vec![0.0f64; dim]; dim];
    let mut atb = vec![0.0f64; dim];
    for i in 0..n {
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        let mut xi = Vec::with_capacity(dim);
        for &c in cols {
            xi.push(design[i][c]);
        }
        xi.push(1.0);
        for a in 0..dim {
            let wxa = w * xi[a];
            for b in a..dim {
                ata[a][b] += wxa * xi[b];
            }
            atb[a] += wxa * targets[i];
        }
    }
    for a in 0..dim {
        for b in 0..a {
            ata[a][b] = ata[b][a];
        }
    }
    for (a, row) in ata.iter_mut().enumerate().take(d) {
        row[a] += penalty;
    }

    let solution = solve_dense(&mut ata, &mut atb)?;
    let intercept = solution[d];
    let mut coefficients = vec![0.0; design[0].len()];
    for (k, &c) in cols.iter().enumerate() {
        coefficients[c] = solution[k];
    }

    // Weighted R² against the weighted mean.
    let wsum: f64 = weights.iter().sum();
    let ybar: f64 = targets
        .iter()
        .zip(weights)
        .map(|(&y, &w)| w * y)
        .sum::<f64>()
        / wsum;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for i in 0..n {
        let mut pred = intercept;
        for (k, &c) in cols.iter().enumerate() {
            pred += solution[k] * design[i][c];
        }
        ss_res += weights[i] * (targets[i] - pred) * (targets[i] - pred);
        ss_tot += weights[i] * (targets[i] - ybar) * (targets[i] - ybar);
    }
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { f64::NEG_INFINITY };

    Ok(RidgeFit {
        coefficients,
        coefficients_selected: solution[..d].to_vec(),
        intercept,
        r2,
    })
}

/// In-place Gaussian elimination with partial pivoting.
fn solve_dense(a: &mut [Vec<f64>], b: &mut [f64]) -> Result<Vec<f64>, ExplainError> {
    let n = b.len();
    for col in 0..n {
        let mut pivot = col;
        for r in col + 1..n {
            if a[r][col].abs() > a[pivot][col].abs() {
                pivot = r;
            }
        }
        if a[pivot][col].abs() < 1e-12 {
            return Err(ExplainError::DegeneratePerturbations);
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for r in col + 1..n {
            let factor = a[r][col] / a[col][col];
            if factor == 0.0 {
                continue;
            }
            for c in col..n {
                a[r][c] -= factor * a[col][c];
            }
            b[r] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut acc = b[col];
        for c in col + 1..n {
            acc -= a[col][c] * x[c];
        }
        x[col] = acc / a[col][col];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FeatureSpec, NumericStats};

    fn two_numeric_schema() -> TabularSchema {
        TabularSchema::new(
            vec![FeatureSpec::numeric("x1"), FeatureSpec::numeric("x2")],
            None,
            None,
        )
        .unwrap()
    }

    fn unit_encoder(n_numeric: usize) -> EncoderInfo {
        EncoderInfo {
            stats: vec![NumericStats { mean: 0.0, std: 1.0 }; n_numeric],
            marginals: Vec::new(),
        }
    }

    fn sigmoid(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    #[test]
    fn linear_black_box_oracle() {
        // f = σ(2x₁ − 3x₂): signs (+, −) and |w₂| > |w₁| in ≥ 9/10 seeds.
        let schema = two_numeric_schema();
        let encoder = unit_encoder(2);
        let black_box = |rows: &[Row]| -> Result<Vec<f64>, ExplainError> {
            Ok(rows
                .iter()
                .map(|r| {
                    let x1 = match r[0] { Cell::Number(v) => v, _ => 0.0 };
                    let x2 = match r[1] { Cell::Number(v) => v, _ => 0.0 };
                    sigmoid(2.0 * x1 - 3.0 * x2)
                })
                .collect())
        };
        let cfg = LimeConfig {
            n_perturbations: 800,
            retained_features: 2,
            ..LimeConfig::default()
        };
        let instance = vec![Cell::Number(0.2), Cell::Number(-0.1)];
        let mut wins = 0;
        for seed in 0..10u64 {
            let e = lime_explain_fn(&black_box, &schema, &encoder, &instance, 0, &cfg, seed)
                .unwrap();
            let w1 = e.weights.iter().find(|w| w.feature == "x1").unwrap().weight;
            let w2 = e.weights.iter().find(|w| w.feature == "x2").unwrap().weight;
            if w1 > 0.0 && w2 < 0.0 && w2.abs() > w1.abs() {
                wins += 1;
            }
        }
        assert!(wins >= 9, "oracle satisfied in only {wins}/10 seeds");
    }

    #[test]
    fn constant_black_box_has_no_structure() {
        let schema = two_numeric_schema();
        let encoder = unit_encoder(2);
        let black_box = |rows: &[Row]| -> Result<Vec<f64>, ExplainError> {
            Ok(vec![0.5; rows.len()])
        };
        let cfg = LimeConfig {
            n_perturbations: 500,
            retained_features: 2,
            ..LimeConfig::default()
        };
        let instance = vec![Cell::Number(0.0), Cell::Number(0.0)];
        let e = lime_explain_fn(&black_box, &schema, &encoder, &instance, 0, &cfg, 5).unwrap();
        for w in &e.weights {
            assert!(w.weight.abs() < 1e-3, "{}: {}", w.feature, w.weight);
        }
        assert!((e.intercept - 0.5).abs() < 1e-9);
    }

    #[test]
    fn huge_kernel_approaches_the_unweighted_fit() {
        // Mildly nonlinear target: the population linear projection is
        // (0.3, −0.15) with intercept 0.2 under standard-normal inputs.
        let schema = two_numeric_schema();
        let encoder = unit_encoder(2);
        let black_box = |rows: &[Row]| -> Result<Vec<f64>, ExplainError> {
            Ok(rows
                .iter()
                .map(|r| {
                    let x1 = match r[0] { Cell::Number(v) => v, _ => 0.0 };
                    let x2 = match r[1] { Cell::Number(v) => v, _ => 0.0 };
                    0.2 + 0.3 * x1 - 0.15 * x2 + 0.05 * x1 * x2
                })
                .collect())
        };
        let cfg = LimeConfig {
            n_perturbations: 6000,
            kernel_width: Some(1e6),
            retained_features: 2,
            ..LimeConfig::default()
        };
        let instance = vec![Cell::Number(0.0), Cell::Number(0.0)];
        let e = lime_explain_fn(&black_box, &schema, &encoder, &instance, 0, &cfg, 9).unwrap();
        let w1 = e.weights.iter().find(|w| w.feature == "x1").unwrap().weight;
        let w2 = e.weights.iter().find(|w| w.feature == "x2").unwrap().weight;
        assert!((w1 - 0.3).abs() < 0.03, "w1 {w1}");
        assert!((w2 + 0.15).abs() < 0.03, "w2 {w2}");
        assert!((e.intercept - 0.2).abs() < 0.03);
    }

    #[test]
    fn deterministic_per_seed() {
        let schema = two_numeric_schema();
        let encoder = unit_encoder(2);
        let black_box = |rows: &[Row]| -> Result<Vec<f64>, ExplainError> {
            Ok(rows
                .iter()
                .map(|r| {
                    let x1 = match r[0] { Cell::Number(v) => v, _ => 0.0 };
                    sigmoid(x1)
                })
                .collect())
        };
        let cfg = LimeConfig {
            n_perturbations: 300,
            retained_features: 2,
            ..LimeConfig::default()
        };
        let instance = vec![Cell::Number(0.4), Cell::Number(0.6)];
        let a = lime_explain_fn(&black_box, &schema, &encoder, &instance, 3, &cfg, 11).unwrap();
        let b = lime_explain_fn(&black_box, &schema, &encoder, &instance, 3, &cfg, 11).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let c = lime_explain_fn(&black_box, &schema, &encoder, &instance, 3, &cfg, 12).unwrap();
        assert_ne!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&c).unwrap()
        );
    }

    #[test]
    fn degenerate_perturbations_error() {
        // All-categorical schema with flip probability 0: every neighbor
        // is the instance itself.
        let schema = TabularSchema::new(
            vec![
                FeatureSpec::categorical("a", &["x", "y"]),
                FeatureSpec::categorical("b", &["p", "q"]),
            ],
            None,
            None,
        )
        .unwrap();
        let encoder = EncoderInfo {
            stats: Vec::new(),
            marginals: vec![vec![0.5, 0.5], vec![0.5, 0.5]],
        };
        let black_box =
            |rows: &[Row]| -> Result<Vec<f64>, ExplainError> { Ok(vec![0.5; rows.len()]) };
        let cfg = LimeConfig {
            n_perturbations: 200,
            categorical_flip_prob: 0.0,
            retained_features: 2,
            ..LimeConfig::default()
        };
        let instance = vec![Cell::Category(0), Cell::Category(1)];
        assert!(matches!(
            lime_explain_fn(&black_box, &schema, &encoder, &instance, 0, &cfg, 1),
            Err(ExplainError::DegeneratePerturbations)
        ));
    }

    #[test]
    fn weights_are_sorted_by_magnitude() {
        let schema = TabularSchema::new(
            vec![
                FeatureSpec::numeric("x1"),
                FeatureSpec::numeric("x2"),
                FeatureSpec::numeric("x3"),
            ],
            None,
            None,
        )
        .unwrap();
        let encoder = unit_encoder(3);
        let black_box = |rows: &[Row]| -> Result<Vec<f64>, ExplainError> {
            Ok(rows
                .iter()
                .map(|r| {
                    let get = |i: usize| match r[i] { Cell::Number(v) => v, _ => 0.0 };
                    sigmoid(0.5 * get(0) + 2.0 * get(1) - 1.0 * get(2))
                })
                .collect())
        };
        let cfg = LimeConfig {
            n_perturbations: 2000,
            retained_features: 2,
            ..LimeConfig::default()
        };
        let instance = vec![Cell::Number(0.0); 3];
        let e = lime_explain_fn(&black_box, &schema, &encoder, &instance, 0, &cfg, 2).unwrap();
        assert_eq!(e.weights.len(), 2);
        assert!(e.weights[0].weight.abs() >= e.weights[1].weight.abs());
        // K=2 keeps the two strongest effects.
        let kept: Vec<&str> = e.weights.iter().map(|w| w.feature.as_str()).collect();
        assert!(kept.contains(&"x2"));
        assert!(kept.contains(&"x3"));
    }
}
