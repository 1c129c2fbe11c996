//! Named parameter arrays and their seeded initialization.
//!
//! Every learnable array has a stable name; the name → shape mapping is
//! the checkpoint contract and also addresses gradients during checks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::TabularSchema;
use crate::numcore::{Matrix, ParamSet};

use super::{ModelConfig, ModelError};

/// All learnable arrays of the network, keyed by name in a fixed order.
#[derive(Clone)]
pub struct ModelParams {
    set: ParamSet,
}

impl ModelParams {
    pub fn from_set(set: ParamSet) -> Self {
        ModelParams { set }
    }

    pub fn set(&self) -> &ParamSet {
        &self.set
    }

    pub fn set_mut(&mut self) -> &mut ParamSet {
        &mut self.set
    }

    pub fn get(&self, name: &str) -> &Matrix {
        self.set
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }
}

enum Init {
    /// Uniform in ±√(6/(fan_in+fan_out)).
    Glorot { fan_in: usize, fan_out: usize },
    Zero,
    One,
}

/// The full name → (rows, cols, init) listing for a config and schema,
/// in checkpoint order.
fn param_plan(
    config: &ModelConfig,
    schema: &TabularSchema,
) -> Vec<(String, usize, usize, Init)> {
    let d = config.d_model;
    let dk = config.d_k();
    let mut plan = Vec::new();

    for (i, f) in schema.features.iter().enumerate() {
        match f.categories() {
            Some(cats) => {
                plan.push((
                    format!("embed.f{i}.table"),
                    cats.len(),
                    d,
                    Init::Glorot {
                        fan_in: cats.len(),
                        fan_out: d,
                    },
                ));
            }
            None => {
                plan.push((
                    format!("embed.f{i}.scale"),
                    1,
                    d,
                    Init::Glorot { fan_in: 1, fan_out: d },
                ));
                plan.push((format!("embed.f{i}.bias"), 1, d, Init::Zero));
            }
        }
    }

    for b in 0..config.encoder_blocks {
        for j in 0..config.heads {
            for w in ["wq", "wk", "wv"] {
                plan.push((
                    format!("block{b}.attn.head{j}.{w}"),
                    d,
                    dk,
                    Init::Glorot { fan_in: d, fan_out: dk },
                ));
            }
        }
        plan.push((
            format!("block{b}.attn.wo"),
            config.heads * dk,
            d,
            Init::Glorot {
                fan_in: config.heads * dk,
                fan_out: d,
            },
        ));
        plan.push((format!("block{b}.ln1.gain"), 1, d, Init::One));
        plan.push((format!("block{b}.ln1.bias"), 1, d, Init::Zero));
        plan.push((
            format!("block{b}.ffn.w1"),
            d,
            config.ffn_hidden,
            Init::Glorot {
                fan_in: d,
                fan_out: config.ffn_hidden,
            },
        ));
        plan.push((format!("block{b}.ffn.b1"), 1, config.ffn_hidden, Init::Zero));
        plan.push((
            format!("block{b}.ffn.w2"),
            config.ffn_hidden,
            d,
            Init::Glorot {
                fan_in: config.ffn_hidden,
                fan_out: d,
            },
        ));
        plan.push((format!("block{b}.ffn.b2"), 1, d, Init::Zero));
        plan.push((format!("block{b}.ln2.gain"), 1, d, Init::One));
        plan.push((format!("block{b}.ln2.bias"), 1, d, Init::Zero));
    }

    let mut in_width = config.token_count * d;
    for (i, &w) in config.trunk_widths.iter().enumerate() {
        plan.push((
            format!("trunk.l{i}.weight"),
            in_width,
            w,
            Init::Glorot {
                fan_in: in_width,
                fan_out: w,
            },
        ));
        plan.push((format!("trunk.l{i}.bias"), 1, w, Init::Zero));
        in_width = w;
    }

    plan.push((
        "classifier.weight".to_string(),
        in_width,
        1,
        Init::Glorot {
            fan_in: in_width,
            fan_out: 1,
        },
    ));
    plan.push(("classifier.bias".to_string(), 1, 1, Init::Zero));
    plan
}

/// Name → shape mapping for a config/schema pair (the checkpoint contract).
pub fn param_shapes(
    config: &ModelConfig,
    schema: &TabularSchema,
) -> Result<Vec<(String, (usize, usize))>, ModelError> {
    check_compat(config, schema)?;
    Ok(param_plan(config, schema)
        .into_iter()
        .map(|(name, r, c, _)| (name, (r, c)))
        .collect())
}

fn check_compat(config: &ModelConfig, schema: &TabularSchema) -> Result<(), ModelError> {
    config.validate()?;
    if config.token_count != schema.feature_count() {
        return Err(ModelError::SchemaMismatch {
            expected: schema.feature_count(),
            got: config.token_count,
        });
    }
    Ok(())
}

/// Seeded initialization: weight matrices uniform in
/// ±√(6/(fan_in+fan_out)), biases zero, layer-norm gains one.
pub fn init_params(
    config: &ModelConfig,
    schema: &TabularSchema,
    seed: u64,
) -> Result<ModelParams, ModelError> {
    check_compat(config, schema)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParamSet::new();
    for (name, rows, cols, init) in param_plan(config, schema) {
        let m = match init {
            Init::Glorot { fan_in, fan_out } => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data: Vec<f64> = (0..rows * cols)
                    .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
                    .collect();
                Matrix::from_vec(rows, cols, data).expect("finite init")
            }
            Init::Zero => Matrix::zeros(rows, cols),
            Init::One => Matrix::filled(rows, cols, 1.0),
        };
        set.insert(name, m);
    }
    Ok(ModelParams { set })
}
