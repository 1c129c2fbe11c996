//! Forward pass on the gradient tape.
//!
//! One encoded batch (n × encoded_width) becomes n·T token rows of width
//! d_model (instance-major), flows through the encoder block(s) and the
//! trunk, and ends in a single sigmoid logit per instance. Attention is
//! computed between the T feature tokens of each instance, so a head's
//! scores form an n-stack of T×T row-stochastic matrices and inference
//! never depends on batch composition.

use std::collections::HashMap;

use crate::data::TabularSchema;
use crate::numcore::{GradTape, Matrix, ValueId};

use super::{ModelConfig, ModelError, ModelParams};

/// Tape handles of every parameter, plus gradient lookup by name.
pub struct BoundParams {
    ids: HashMap<String, ValueId>,
    order: Vec<String>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> ValueId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter '{name}'"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, ValueId)> {
        self.order.iter().map(move |n| (n, self.ids[n]))
    }
}

/// Loads every parameter onto the tape as a leaf. Both streams reuse the
/// same handles, which is what makes the weights shared.
pub fn bind_params(tape: &mut GradTape, params: &ModelParams) -> BoundParams {
    let mut ids = HashMap::new();
    let mut order = Vec::new();
    for (name, value) in params.set().iter() {
        ids.insert(name.clone(), tape.leaf(value.clone()));
        order.push(name.clone());
    }
    BoundParams { ids, order }
}

/// Tape handles produced by one stream's forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    pub logits: ValueId,
    pub probabilities: ValueId,
    pub deep_features: ValueId,
    /// attention[block][head]: (n·T)×T stack of per-instance matrices.
    pub attention: Vec<Vec<ValueId>>,
    pub batch_size: usize,
}

/// Embeds an encoded batch into (n·T)×d_model token rows: categorical
/// features index their table through the one-hot block, numeric features
/// map v to v·scale + bias.
pub fn embed(
    tape: &mut GradTape,
    bound: &BoundParams,
    config: &ModelConfig,
    schema: &TabularSchema,
    x: &Matrix,
) -> Result<ValueId, ModelError> {
    if x.cols() != schema.encoded_width() {
        return Err(ModelError::EncodingMismatch {
            expected: schema.encoded_width(),
            got: x.cols(),
        });
    }
    if config.token_count != schema.feature_count() {
        return Err(ModelError::SchemaMismatch {
            expected: schema.feature_count(),
            got: config.token_count,
        });
    }
    let n = x.rows();
    let mut tokens = Vec::with_capacity(schema.feature_count());
    for span in schema.spans() {
        // Column slice of the (constant) input batch.
        let mut slice = Matrix::zeros(n, span.width);
        for r in 0..n {
            slice
                .row_mut(r)
                .copy_from_slice(&x.row(r)[span.start..span.start + span.width]);
        }
        let slice_id = tape.leaf(slice);
        let f = span.feature;
        let token = if schema.features[f].is_categorical() {
            let table = bound.id(&format!("embed.f{f}.table"));
            tape.matmul(slice_id, table)?
        } else {
            let scale = bound.id(&format!("embed.f{f}.scale"));
            let bias = bound.id(&format!("embed.f{f}.bias"));
            let scaled = tape.matmul(slice_id, scale)?;
            tape.add_row_broadcast(scaled, bias)?
        };
        tokens.push(token);
    }
    Ok(tape.row_interleave(&tokens)?)
}

/// Multi-head self-attention over the T tokens of each instance:
/// A_j = softmax(Q_j·K_jᵀ/√d_k), H_j = A_j·V_j, output =
/// concat(H_1..H_h)·W^O. Returns the output and each head's attention
/// stack.
pub fn multi_head_attention(
    tape: &mut GradTape,
    bound: &BoundParams,
    config: &ModelConfig,
    block: usize,
    tokens: ValueId,
) -> Result<(ValueId, Vec<ValueId>), ModelError> {
    let t = config.token_count;
    let scale = 1.0 / (config.d_k() as f64).sqrt();
    let mut heads = Vec::with_capacity(config.heads);
    let mut attentions = Vec::with_capacity(config.heads);
    for j in 0..config.heads {
        let wq = bound.id(&format!("block{block}.attn.head{j}.wq"));
        let wk = bound.id(&format!("block{block}.attn.head{j}.wk"));
        let wv = bound.id(&format!("block{block}.attn.head{j}.wv"));
        let q = tape.matmul(tokens, wq)?;
        let k = tape.matmul(tokens, wk)?;
        let v = tape.matmul(tokens, wv)?;
        let scores = tape.block_matmul_nt(q, k, t)?;
        let scaled = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scaled);
        let mixed = tape.block_matmul_nn(attn, v, t)?;
        attentions.push(attn);
        heads.push(mixed);
    }
    let concat = tape.concat_cols(&heads)?;
    let wo = bound.id(&format!("block{block}.attn.wo"));
    let out = tape.matmul(concat, wo)?;
    Ok((out, attentions))
}

/// One encoder block: attention and feed-forward sublayers, each wrapped
/// in a residual connection followed by layer normalization.
pub fn encoder_block(
    tape: &mut GradTape,
    bound: &BoundParams,
    config: &ModelConfig,
    block: usize,
    tokens: ValueId,
) -> Result<(ValueId, Vec<ValueId>), ModelError> {
    let (attn_out, attentions) = multi_head_attention(tape, bound, config, block, tokens)?;
    let sum1 = tape.add(tokens, attn_out)?;
    let x1 = tape.layer_norm_rows(
        sum1,
        bound.id(&format!("block{block}.ln1.gain")),
        bound.id(&format!("block{block}.ln1.bias")),
        config.layer_norm_eps,
    )?;

    let w1 = bound.id(&format!("block{block}.ffn.w1"));
    let b1 = bound.id(&format!("block{block}.ffn.b1"));
    let w2 = bound.id(&format!("block{block}.ffn.w2"));
    let b2 = bound.id(&format!("block{block}.ffn.b2"));
    let h = tape.matmul(x1, w1)?;
    let h = tape.add_row_broadcast(h, b1)?;
    let h = tape.relu(h);
    let h = tape.matmul(h, w2)?;
    let h = tape.add_row_broadcast(h, b2)?;

    let sum2 = tape.add(x1, h)?;
    let out = tape.layer_norm_rows(
        sum2,
        bound.id(&format!("block{block}.ln2.gain")),
        bound.id(&format!("block{block}.ln2.bias")),
        config.layer_norm_eps,
    )?;
    Ok((out, attentions))
}

/// Flattens each instance's tokens and applies the five affine+ReLU
/// trunk layers, returning the deep feature handle.
pub fn trunk_forward(
    tape: &mut GradTape,
    bound: &BoundParams,
    config: &ModelConfig,
    tokens: ValueId,
    batch: usize,
) -> Result<ValueId, ModelError> {
    let mut h = tape.reshape(tokens, batch, config.token_count * config.d_model)?;
    for i in 0..config.trunk_widths.len() {
        let w = bound.id(&format!("trunk.l{i}.weight"));
        let b = bound.id(&format!("trunk.l{i}.bias"));
        let a = tape.matmul(h, w)?;
        let a = tape.add_row_broadcast(a, b)?;
        h = tape.relu(a);
    }
    Ok(h)
}

/// Full single-stream forward pass over one encoded batch.
pub fn forward(
    tape: &mut GradTape,
    bound: &BoundParams,
    config: &ModelConfig,
    schema: &TabularSchema,
    x: &Matrix,
) -> Result<ForwardPass, ModelError> {
    let batch = x.rows();
    let mut tokens = embed(tape, bound, config, schema, x)?;
    let mut attention = Vec::with_capacity(config.encoder_blocks);
    for b in 0..config.encoder_blocks {
        let (out, attns) = encoder_block(tape, bound, config, b, tokens)?;
        tokens = out;
        attention.push(attns);
    }
    let deep = trunk_forward(tape, bound, config, tokens, batch)?;
    let w = bound.id("classifier.weight");
    let b = bound.id("classifier.bias");
    let logits_raw = tape.matmul(deep, w)?;
    let logits = tape.add_row_broadcast(logits_raw, b)?;
    let probabilities = tape.sigmoid(logits);
    Ok(ForwardPass {
        logits,
        probabilities,
        deep_features: deep,
        attention,
        batch_size: batch,
    })
}

/// Shared-weight two-stream pass for training: identical parameters
/// applied to the source batch and the synthetic target batch. Batch
/// sizes must match (the alignment loss pairs rows).
pub fn forward_two_stream(
    tape: &mut GradTape,
    bound: &BoundParams,
    config: &ModelConfig,
    schema: &TabularSchema,
    x_source: &Matrix,
    x_target: &Matrix,
) -> Result<(ForwardPass, ForwardPass), ModelError> {
    if x_source.rows() != x_target.rows() {
        return Err(ModelError::BatchSizeMismatch {
            source_rows: x_source.rows(),
            target_rows: x_target.rows(),
        });
    }
    let source = forward(tape, bound, config, schema, x_source)?;
    let target = forward(tape, bound, config, schema, x_target)?;
    Ok((source, target))
}

/// Materialized outputs of a forward pass, detached from the tape.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    /// batch × trunk feature width.
    pub deep_features: Matrix,
    /// attention[block][head]: (batch·T)×T stacks.
    pub attention: Vec<Vec<Matrix>>,
    pub token_count: usize,
}

impl ForwardOutput {
    pub fn from_pass(tape: &GradTape, pass: &ForwardPass, token_count: usize) -> Self {
        let column = |id: ValueId| -> Vec<f64> { tape.value(id).data().to_vec() };
        ForwardOutput {
            logits: column(pass.logits),
            probabilities: column(pass.probabilities),
            deep_features: tape.value(pass.deep_features).clone(),
            attention: pass
                .attention
                .iter()
                .map(|heads| heads.iter().map(|&id| tape.value(id).clone()).collect())
                .collect(),
            token_count,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.probabilities.len()
    }

    /// T×T attention matrix of one instance for a given block and head.
    pub fn attention_for_instance(&self, block: usize, head: usize, i: usize) -> Matrix {
        let t = self.token_count;
        let stack = &self.attention[block][head];
        let mut out = Matrix::zeros(t, t);
        for r in 0..t {
            out.row_mut(r).copy_from_slice(stack.row(i * t + r));
        }
        out
    }

    /// Instance attention averaged over heads (and blocks when > 1).
    pub fn instance_mean_attention(&self, i: usize) -> Matrix {
        let t = self.token_count;
        let mut acc = Matrix::zeros(t, t);
        let mut count = 0.0;
        for block in 0..self.attention.len() {
            for head in 0..self.attention[block].len() {
                let a = self.attention_for_instance(block, head, i);
                for (dst, &src) in acc.data_mut().iter_mut().zip(a.data()) {
                    *dst += src;
                }
                count += 1.0;
            }
        }
        acc.scale(1.0 / count)
    }

    /// Batch-mean attention of one head.
    pub fn mean_attention(&self, block: usize, head: usize) -> Matrix {
        let t = self.token_count;
        let n = self.batch_size();
        let mut acc = Matrix::zeros(t, t);
        for i in 0..n {
            let a = self.attention_for_instance(block, head, i);
            for (dst, &src) in acc.data_mut().iter_mut().zip(a.data()) {
                *dst += src;
            }
        }
        acc.scale(1.0 / n as f64)
    }
}

/// Convenience inference entry: records a throwaway tape.
pub fn infer(
    params: &ModelParams,
    config: &ModelConfig,
    schema: &TabularSchema,
    x: &Matrix,
) -> Result<ForwardOutput, ModelError> {
    let mut tape = GradTape::new();
    let bound = bind_params(&mut tape, params);
    let pass = forward(&mut tape, &bound, config, schema, x)?;
    Ok(ForwardOutput::from_pass(&tape, &pass, config.token_count))
}
