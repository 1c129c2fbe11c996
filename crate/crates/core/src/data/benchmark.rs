//! Synthetic two-domain benchmark generator.
//!
//! Per-circle Gaussian latent factors drive numeric features and
//! categorical propensities through feature maps shared by both domains;
//! target circles receive mean and covariance perturbations scaled by
//! the shift intensity. Labels come from one fixed logistic rule on the
//! latents, thresholded per domain to hit the requested minority rate.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::{Cell, DomainDataset, Row};
use super::schema::{demo_schema, FeatureSpec, TabularSchema};
use super::DataError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub numeric_features: usize,
    pub categorical_features: usize,
    /// Categories per generated categorical feature (ignored when the
    /// feature counts match the demo schema, whose lists are used as-is).
    pub categories_per_feature: usize,
    pub source_circles: usize,
    pub target_circles: usize,
    pub samples_per_circle_source: usize,
    pub samples_per_circle_target: usize,
    pub source_minority_rate: f64,
    pub target_minority_rate: f64,
    pub shift_intensity: f64,
    /// Coefficients of the logistic label rule; length fixes the latent
    /// dimension.
    pub label_coefficients: Vec<f64>,
    pub label_noise: f64,
    pub seed: Option<u64>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            numeric_features: 5,
            categorical_features: 16,
            categories_per_feature: 3,
            source_circles: 40,
            target_circles: 80,
            samples_per_circle_source: 100,
            samples_per_circle_target: 40,
            source_minority_rate: 0.13,
            target_minority_rate: 0.11,
            shift_intensity: 1.0,
            label_coefficients: vec![1.5, -2.0, 1.0, 0.5],
            label_noise: 0.25,
            seed: None,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let ok_rate = |r: f64| r > 0.0 && r < 1.0;
        if !ok_rate(self.source_minority_rate) || !ok_rate(self.target_minority_rate) {
            return Err(DataError::InvalidConfig {
                reason: "minority rates must lie in (0, 1)".into(),
            });
        }
        if self.shift_intensity < 0.0 {
            return Err(DataError::InvalidConfig {
                reason: "shift intensity must be non-negative".into(),
            });
        }
        if self.label_coefficients.is_empty() {
            return Err(DataError::InvalidConfig {
                reason: "label_coefficients must be non-empty".into(),
            });
        }
        if self.numeric_features + self.categorical_features < 2 {
            return Err(DataError::InvalidConfig {
                reason: "need at least 2 features".into(),
            });
        }
        if self.source_circles == 0 || self.target_circles == 0 {
            return Err(DataError::InvalidConfig {
                reason: "circle counts must be positive".into(),
            });
        }
        Ok(())
    }

    fn schema(&self) -> TabularSchema {
        let demo = demo_schema();
        if self.categorical_features == 16 && self.numeric_features == 5 {
            return demo;
        }
        let mut features = Vec::new();
        for i in 0..self.categorical_features {
            let cats: Vec<String> = (0..self.categories_per_feature.max(2))
                .map(|c| format!("v{c}"))
                .collect();
            let refs: Vec<&str> = cats.iter().map(String::as_str).collect();
            features.push(FeatureSpec::categorical(&format!("cat_{i:02}"), &refs));
        }
        for i in 0..self.numeric_features {
            features.push(FeatureSpec::numeric(&format!("num_{i:02}")));
        }
        TabularSchema::new(
            features,
            Some("label".to_string()),
            Some("circle_id".to_string()),
        )
        .expect("generated schema is valid")
    }
}

/// Feature maps shared by both domains: fixed projections from latent
/// space to numeric values and categorical propensity logits.
struct FeatureMaps {
    numeric_loadings: Vec<Vec<f64>>,
    numeric_noise: f64,
    cat_loadings: Vec<Vec<Vec<f64>>>,
    cat_bias: Vec<Vec<f64>>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn draw_maps(rng: &mut ChaCha8Rng, schema: &TabularSchema, latent_dim: usize) -> FeatureMaps {
    let numeric_loadings = schema
        .numeric_indices()
        .iter()
        .map(|_| (0..latent_dim).map(|_| normal(rng)).collect())
        .collect();
    let mut cat_loadings = Vec::new();
    let mut cat_bias = Vec::new();
    for &f in &schema.categorical_indices() {
        let n_cats = schema.features[f].categories().unwrap().len();
        cat_loadings.push(
            (0..n_cats)
                .map(|_| (0..latent_dim).map(|_| 1.2 * normal(rng)).collect())
                .collect(),
        );
        cat_bias.push((0..n_cats).map(|_| 0.5 * normal(rng)).collect());
    }
    FeatureMaps {
        numeric_loadings,
        numeric_noise: 0.3,
        cat_loadings,
        cat_bias,
    }
}

struct Circle {
    mean: Vec<f64>,
    /// Latent mixing matrix (row-major latent_dim × latent_dim); the
    /// circle covariance is `mix · mixᵀ`.
    mix: Vec<f64>,
}

fn draw_circle(rng: &mut ChaCha8Rng, latent_dim: usize, shift_intensity: f64) -> Circle {
    let mut mean: Vec<f64> = (0..latent_dim).map(|_| 0.6 * normal(rng)).collect();
    let mut mix = vec![0.0; latent_dim * latent_dim];
    for i in 0..latent_dim {
        for j in 0..latent_dim {
            mix[i * latent_dim + j] =
                if i == j { 1.0 } else { 0.0 } + 0.25 * normal(rng);
        }
    }
    if shift_intensity > 0.0 {
        for m in mean.iter_mut() {
            *m += shift_intensity * 0.8 * normal(rng);
        }
        for v in mix.iter_mut() {
            *v += shift_intensity * 0.3 * normal(rng);
        }
    }
    Circle { mean, mix }
}

fn sample_latent(rng: &mut ChaCha8Rng, circle: &Circle) -> Vec<f64> {
    let d = circle.mean.len();
    let eps: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
    (0..d)
        .map(|i| {
            let mut v = circle.mean[i];
            for j in 0..d {
                v += circle.mix[i * d + j] * eps[j];
            }
            v
        })
        .collect()
}

fn sample_category(rng: &mut ChaCha8Rng, logits: &[f64]) -> u32 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut draw = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if draw < *w {
            return i as u32;
        }
        draw -= w;
    }
    (weights.len() - 1) as u32
}

fn generate_domain(
    rng: &mut ChaCha8Rng,
    schema: &Arc<TabularSchema>,
    maps: &FeatureMaps,
    cfg: &BenchmarkConfig,
    n_circles: usize,
    samples_per_circle: usize,
    minority_rate: f64,
    shift_intensity: f64,
    id_prefix: &str,
) -> Result<DomainDataset, DataError> {
    let latent_dim = cfg.label_coefficients.len();
    let cat_features = schema.categorical_indices();
    let num_features = schema.numeric_indices();

    let mut rows: Vec<Row> = Vec::with_capacity(n_circles * samples_per_circle);
    let mut circle_ids = Vec::with_capacity(rows.capacity());
    let mut scores = Vec::with_capacity(rows.capacity());

    for c in 0..n_circles {
        let circle = draw_circle(rng, latent_dim, shift_intensity);
        for _ in 0..samples_per_circle {
            let z = sample_latent(rng, &circle);
            let mut row: Row = vec![Cell::Number(0.0); schema.feature_count()];
            for (k, &f) in cat_features.iter().enumerate() {
                let logits: Vec<f64> = maps.cat_loadings[k]
                    .iter()
                    .zip(&maps.cat_bias[k])
                    .map(|(load, b)| {
                        load.iter().zip(&z).map(|(l, zv)| l * zv).sum::<f64>() + b
                    })
                    .collect();
                row[f] = Cell::Category(sample_category(rng, &logits));
            }
            for (k, &f) in num_features.iter().enumerate() {
                let v: f64 = maps.numeric_loadings[k]
                    .iter()
                    .zip(&z)
                    .map(|(l, zv)| l * zv)
                    .sum::<f64>()
                    + maps.numeric_noise * normal(rng);
                row[f] = Cell::Number(v);
            }
            let score: f64 = cfg
                .label_coefficients
                .iter()
                .zip(&z)
                .map(|(b, zv)| b * zv)
                .sum::<f64>()
                + cfg.label_noise * normal(rng);
            rows.push(row);
            circle_ids.push(format!("{id_prefix}{c:03}"));
            scores.push(score);
        }
    }

    let n = rows.len();
    let n_pos = (minority_rate * n as f64).round() as usize;
    if n_pos == 0 || n_pos >= n {
        return Err(DataError::InfeasibleMinorityRate {
            rate: minority_rate,
            rows: n,
        });
    }
    // Label the n_pos highest-scoring rows as defaulting.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.cmp(&b))
    });
    let mut labels = vec![0u8; n];
    for &i in order.iter().take(n_pos) {
        labels[i] = 1;
    }

    DomainDataset::from_rows(Arc::clone(schema), rows, Some(labels), circle_ids)
}

/// Generates a (source, target) dataset pair. Deterministic per seed.
pub fn gen_benchmark(cfg: &BenchmarkConfig) -> Result<(DomainDataset, DomainDataset), DataError> {
    cfg.validate()?;
    let seed = cfg.seed.ok_or_else(|| DataError::InvalidConfig {
        reason: "benchmark seed is required".into(),
    })?;
    let schema = Arc::new(cfg.schema());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let maps = draw_maps(&mut rng, &schema, cfg.label_coefficients.len());

    let source = generate_domain(
        &mut rng,
        &schema,
        &maps,
        cfg,
        cfg.source_circles,
        cfg.samples_per_circle_source,
        cfg.source_minority_rate,
        0.0,
        "s",
    )?;
    let target = generate_domain(
        &mut rng,
        &schema,
        &maps,
        cfg,
        cfg.target_circles,
        cfg.samples_per_circle_target,
        cfg.target_minority_rate,
        cfg.shift_intensity,
        "t",
    )?;
    Ok((source, target))
}
