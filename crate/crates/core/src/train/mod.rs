//! Training loop: paired-batch SGD over the two streams with exponential
//! learning-rate decay and early stopping on validation loss, plus the
//! λ sweep used to study the regularization weight.

mod metrics;

pub use metrics::{
    confusion, decreasing_rate, decreasing_rates, evaluate, evaluate_groups,
    predict_probabilities, ConfusionCounts, GroupMetrics, MetricReport, Rates, DEFAULT_THRESHOLD,
    EVAL_BATCH,
};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{DataError, DomainDataset};
use crate::losses::{total_loss_on_tape, weighted_bce, LossConfig, LossError};
use crate::model::{
    bind_params, forward_two_stream, init_params, Checkpoint, EncoderInfo, ModelConfig,
    ModelError, Provenance,
};
use crate::numcore::{GradTape, Matrix, NumError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {reason}")]
    InvalidConfig { reason: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset has no labels")]
    UnlabeledDataset,
    #[error("synthetic target stream must be unlabeled")]
    SyntheticHasLabels,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("group references circle '{circle}' absent from the dataset")]
    CircleMismatch { circle: String },
    #[error("testing metric is zero; decreasing rate undefined")]
    ZeroTestingMetric,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Num(#[from] NumError),
}

/// Training hyperparameters. Defaults: 250 epochs max, batch 256, SGD at
/// lr 0.1 with per-epoch decay 0.96, early stopping patience 15.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub lr_decay_gamma: f64,
    pub early_stop_patience: usize,
    /// SGD momentum; 0 is plain SGD.
    pub momentum: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 250,
            batch_size: 256,
            initial_lr: 0.1,
            lr_decay_gamma: 0.96,
            early_stop_patience: 15,
            momentum: 0.0,
            seed: 0,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |reason: String| Err(TrainError::InvalidConfig { reason });
        if self.max_epochs == 0 {
            return fail("max_epochs must be at least 1".into());
        }
        if self.batch_size < 2 {
            return fail("batch_size must be at least 2 (covariance needs M ≥ 2)".into());
        }
        if self.initial_lr <= 0.0 {
            return fail("initial_lr must be positive".into());
        }
        if !(self.lr_decay_gamma > 0.0 && self.lr_decay_gamma <= 1.0) {
            return fail("lr_decay_gamma must lie in (0, 1]".into());
        }
        if self.early_stop_patience == 0 {
            return fail("early_stop_patience must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must lie in [0, 1)".into());
        }
        self.loss.validate()?;
        self.model.validate()?;
        Ok(())
    }

    /// SHA-256 hex digest of the canonical (compact JSON) config form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialization cannot fail");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoppingReason {
    MaxEpochs,
    EarlyStop,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lambda: f64,
    pub train_weighted: f64,
    pub train_coral: f64,
    pub train_total: f64,
    pub val_loss: f64,
    pub val_recall: f64,
    pub val_f1: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub stopping_reason: StoppingReason,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best_val_loss(&self) -> f64 {
        self.epochs[self.best_epoch].val_loss
    }

    /// JSON-lines form: a provenance header line, one record per epoch,
    /// then a summary line.
    pub fn to_jsonl(&self, provenance: &Provenance) -> String {
        let mut out = String::new();
        out.push_str(&serde_json::to_string(provenance).unwrap());
        out.push('\n');
        for rec in &self.epochs {
            out.push_str(&serde_json::to_string(rec).unwrap());
            out.push('\n');
        }
        out.push_str(
            &serde_json::json!({
                "stopping_reason": self.stopping_reason,
                "best_epoch": self.best_epoch,
            })
            .to_string(),
        );
        out.push('\n');
        out
    }
}

fn subseed(seed: u64, tag: u64) -> u64 {
    // splitmix64 over seed ^ tag; decorrelates the init/shuffle streams.
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn gather_rows(matrix: &Matrix, indices: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(indices.len(), matrix.cols());
    for (r, &i) in indices.iter().enumerate() {
        out.row_mut(r).copy_from_slice(matrix.row(i));
    }
    out
}

/// Trains on the labeled source stream paired with the unlabeled
/// synthetic target stream, and returns the best-validation-epoch
/// checkpoint plus the per-epoch history. Deterministic per config seed.
pub fn train(
    source_train: &DomainDataset,
    source_val: &DomainDataset,
    synthetic_target: &DomainDataset,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainHistory), TrainError> {
    cfg.validate()?;
    if source_train.n_rows() == 0 || source_val.n_rows() == 0 || synthetic_target.n_rows() == 0 {
        return Err(TrainError::EmptyDataset);
    }
    if source_train.labels().is_none() || source_val.labels().is_none() {
        return Err(TrainError::UnlabeledDataset);
    }
    if synthetic_target.labels().is_some() {
        return Err(TrainError::SyntheticHasLabels);
    }
    let schema = source_train.schema().clone();
    if cfg.model.token_count != schema.feature_count() {
        return Err(ModelError::SchemaMismatch {
            expected: schema.feature_count(),
            got: cfg.model.token_count,
        }
        .into());
    }

    // Every stream shares the source-train input space.
    let mut train_ds = source_train.clone();
    train_ds.encode(None)?;
    let mut val_ds = source_val.clone();
    val_ds.encode(Some(&train_ds))?;
    let mut synth_ds = synthetic_target.clone();
    synth_ds.encode(Some(&train_ds))?;

    let x_train = train_ds.encoded_matrix()?.clone();
    let y_train = train_ds.labels().unwrap().to_vec();
    let x_synth = synth_ds.encoded_matrix()?.clone();
    let val_labels = val_ds.labels().unwrap().to_vec();

    let mut params = init_params(&cfg.model, &schema, cfg.seed)?;
    let mut velocity: Option<IndexMap<String, Matrix>> = if cfg.momentum > 0.0 {
        Some(
            params
                .set()
                .iter()
                .map(|(n, m)| (n.clone(), Matrix::zeros(m.rows(), m.cols())))
                .collect(),
        )
    } else {
        None
    };

    let mut rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, 0x51u64));
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut best_epoch = 0usize;
    let mut best_val = f64::INFINITY;
    let mut best_params = params.clone();
    let mut since_improve = 0usize;
    let mut stopping_reason = StoppingReason::MaxEpochs;

    let n = x_train.rows();
    let m_synth = x_synth.rows();

    for epoch in 0..cfg.max_epochs {
        let lambda = cfg.loss.lambda(epoch, cfg.max_epochs)?;
        let lr = cfg.initial_lr * cfg.lr_decay_gamma.powi(epoch as i32);

        let mut src_idx: Vec<usize> = (0..n).collect();
        src_idx.shuffle(&mut rng);
        let mut tgt_idx: Vec<usize> = (0..m_synth).collect();
        tgt_idx.shuffle(&mut rng);

        let mut sum_w = 0.0;
        let mut sum_c = 0.0;
        let mut sum_t = 0.0;
        let mut rows_used = 0usize;
        let mut tgt_cursor = 0usize;

        let mut batch_no = 0usize;
        let mut start = 0usize;
        while start < n {
            let end = (start + cfg.batch_size).min(n);
            if end - start < 2 {
                break; // a 1-row tail cannot form a covariance
            }
            let batch_src: Vec<usize> = src_idx[start..end].to_vec();
            // Cycle the shuffled synthetic indices so every source batch
            // gets a same-size partner even when counts drift.
            let batch_tgt: Vec<usize> = (0..batch_src.len())
                .map(|k| tgt_idx[(tgt_cursor + k) % m_synth])
                .collect();
            tgt_cursor = (tgt_cursor + batch_src.len()) % m_synth;

            let xs = gather_rows(&x_train, &batch_src);
            let ys: Vec<u8> = batch_src.iter().map(|&i| y_train[i]).collect();
            let xt = gather_rows(&x_synth, &batch_tgt);

            let mut tape = GradTape::new();
            let bound = bind_params(&mut tape, &params);
            let (src_pass, tgt_pass) =
                forward_two_stream(&mut tape, &bound, &cfg.model, &schema, &xs, &xt)?;
            let loss = total_loss_on_tape(
                &mut tape,
                src_pass.probabilities,
                &ys,
                src_pass.deep_features,
                tgt_pass.deep_features,
                lambda,
                &cfg.loss,
            )?;
            if !loss.breakdown.total.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                });
            }

            let grads = tape.backward(loss.total)?;
            for (name, id) in bound.iter() {
                let g = grads.wrt(id);
                let p = params.set_mut().get_mut(name).expect("bound param");
                match &mut velocity {
                    Some(vel) => {
                        let v = vel.get_mut(name).expect("velocity buffer");
                        for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
                            *vi = cfg.momentum * *vi + gi;
                        }
                        for (pi, &vi) in p.data_mut().iter_mut().zip(v.data()) {
                            *pi -= lr * vi;
                        }
                    }
                    None => {
                        for (pi, &gi) in p.data_mut().iter_mut().zip(g.data()) {
                            *pi -= lr * gi;
                        }
                    }
                }
            }

            let b = (end - start) as f64;
            sum_w += loss.breakdown.weighted * b;
            sum_c += loss.breakdown.coral * b;
            sum_t += loss.breakdown.total * b;
            rows_used += end - start;
            batch_no += 1;
            start = end;
        }

        // Validation: source-only weighted BCE (no target pairing exists),
        // plus minority metrics at the default threshold.
        let val_probs = validation_probabilities(&params, cfg, &val_ds)?;
        let val_loss = weighted_bce(&val_probs, &val_labels, cfg.loss.minority_weight)?;
        if !val_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch, batch: 0 });
        }
        let val_counts = confusion(&val_probs, &val_labels, DEFAULT_THRESHOLD);

        let denom = rows_used.max(1) as f64;
        history.push(EpochRecord {
            epoch,
            lambda,
            train_weighted: sum_w / denom,
            train_coral: sum_c / denom,
            train_total: sum_t / denom,
            val_loss,
            val_recall: val_counts.recall(),
            val_f1: val_counts.f1(),
            lr,
        });

        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_params = params.clone();
            since_improve = 0;
        } else {
            since_improve += 1;
            if since_improve >= cfg.early_stop_patience {
                stopping_reason = StoppingReason::EarlyStop;
                break;
            }
        }
    }

    let checkpoint = Checkpoint {
        config: cfg.model.clone(),
        schema,
        params: best_params,
        encoder: EncoderInfo::from_dataset(&train_ds),
        provenance: Provenance::new(cfg.seed, cfg.digest()),
    };
    let history = TrainHistory {
        epochs: history,
        stopping_reason,
        best_epoch,
    };
    Ok((checkpoint, history))
}

fn validation_probabilities(
    params: &crate::model::ModelParams,
    cfg: &TrainConfig,
    val_ds: &DomainDataset,
) -> Result<Vec<f64>, TrainError> {
    let x = val_ds.encoded_matrix()?;
    let mut probs = Vec::with_capacity(x.rows());
    let mut start = 0;
    while start < x.rows() {
        let end = (start + EVAL_BATCH).min(x.rows());
        let idx: Vec<usize> = (start..end).collect();
        let chunk = gather_rows(x, &idx);
        let out = crate::model::infer(params, &cfg.model, val_ds.schema(), &chunk)?;
        probs.extend(out.probabilities);
        start = end;
    }
    Ok(probs)
}

/// One grid point of the λ sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepPoint {
    Fixed(f64),
    EpochVarying,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub point: SweepPoint,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub stopping_reason: StoppingReason,
}

/// The 19-value grid {0.1, 0.15, …, 1.0} plus the epoch-varying entry.
pub fn default_sweep_grid() -> Vec<SweepPoint> {
    let mut grid: Vec<SweepPoint> = (0..19)
        .map(|i| SweepPoint::Fixed(0.1 + 0.05 * i as f64))
        .collect();
    grid.push(SweepPoint::EpochVarying);
    grid
}

/// Trains once per grid point (shared seed) and tabulates the best
/// validation loss of each run.
pub fn lambda_sweep(
    source_train: &DomainDataset,
    source_val: &DomainDataset,
    synthetic_target: &DomainDataset,
    cfg: &TrainConfig,
    grid: &[SweepPoint],
) -> Result<Vec<SweepRow>, TrainError> {
    if grid.is_empty() {
        return Err(TrainError::InvalidConfig {
            reason: "sweep grid is empty".into(),
        });
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &point in grid {
        let mut run_cfg = cfg.clone();
        run_cfg.loss = match point {
            SweepPoint::Fixed(v) => LossConfig {
                lambda_mode: crate::losses::LambdaMode::Fixed,
                lambda_value: v,
                ..cfg.loss
            },
            SweepPoint::EpochVarying => LossConfig {
                lambda_mode: crate::losses::LambdaMode::EpochVarying,
                ..cfg.loss
            },
        };
        let (_, history) = train(source_train, source_val, synthetic_target, &run_cfg)?;
        rows.push(SweepRow {
            point,
            best_val_loss: history.best_val_loss(),
            best_epoch: history.best_epoch,
            stopping_reason: history.stopping_reason,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_benchmark, BenchmarkConfig};
    use crate::losses::LambdaMode;
    use crate::model::ModelConfig;
    use crate::oversample::{generate_synthetic, Strategy};

    fn tiny_benchmark(seed: u64) -> (DomainDataset, DomainDataset) {
        gen_benchmark(&BenchmarkConfig {
            numeric_features: 2,
            categorical_features: 2,
            categories_per_feature: 2,
            source_circles: 4,
            target_circles: 4,
            samples_per_circle_source: 30,
            samples_per_circle_target: 20,
            source_minority_rate: 0.2,
            target_minority_rate: 0.2,
            shift_intensity: 0.8,
            seed: Some(seed),
            ..BenchmarkConfig::default()
        })
        .unwrap()
    }

    fn tiny_config(seed: u64) -> TrainConfig {
        TrainConfig {
            max_epochs: 4,
            batch_size: 16,
            initial_lr: 0.05,
            lr_decay_gamma: 0.9,
            early_stop_patience: 3,
            seed,
            model: ModelConfig {
                token_count: 4,
                d_model: 4,
                heads: 2,
                ffn_hidden: 8,
                trunk_widths: vec![8, 6, 4],
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn tiny_setup(seed: u64) -> (DomainDataset, DomainDataset, DomainDataset, TrainConfig) {
        let (source, target) = tiny_benchmark(seed);
        let (train_ds, val_ds) = source.split_source(0.8, seed).unwrap();
        let synth = generate_synthetic(&target, 96, Strategy::PassthroughBootstrap, 3, seed)
            .unwrap()
            .into_dataset()
            .unwrap();
        (train_ds, val_ds, synth, tiny_config(seed))
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let (train_ds, val_ds, synth, cfg) = tiny_setup(5);
        let (ck1, h1) = train(&train_ds, &val_ds, &synth, &cfg).unwrap();
        let (ck2, h2) = train(&train_ds, &val_ds, &synth, &cfg).unwrap();
        for ((n1, m1), (n2, m2)) in ck1.params.set().iter().zip(ck2.params.set().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(m1, m2, "parameter {n1} differs between runs");
        }
        assert_eq!(
            serde_json::to_string(&h1).unwrap(),
            serde_json::to_string(&h2).unwrap()
        );

        let mut other_cfg = cfg.clone();
        other_cfg.seed = 6;
        let (ck3, _) = train(&train_ds, &val_ds, &synth, &other_cfg).unwrap();
        assert_ne!(
            ck1.params.get("classifier.weight"),
            ck3.params.get("classifier.weight")
        );
    }

    #[test]
    fn single_epoch_stops_on_max_epochs() {
        let (train_ds, val_ds, synth, mut cfg) = tiny_setup(7);
        cfg.max_epochs = 1;
        let (_, history) = train(&train_ds, &val_ds, &synth, &cfg).unwrap();
        assert_eq!(history.epochs.len(), 1);
        assert_eq!(history.stopping_reason, StoppingReason::MaxEpochs);
        assert_eq!(history.best_epoch, 0);
    }

    #[test]
    fn diverging_run_stops_early_and_keeps_best_epoch() {
        let (train_ds, val_ds, synth, mut cfg) = tiny_setup(8);
        cfg.max_epochs = 40;
        cfg.initial_lr = 3.0; // deliberately unstable
        cfg.lr_decay_gamma = 1.0;
        cfg.early_stop_patience = 2;
        let (_, history) = train(&train_ds, &val_ds, &synth, &cfg).unwrap();
        assert_eq!(history.stopping_reason, StoppingReason::EarlyStop);
        assert!(history.epochs.len() < 40);
        let best = history.best_val_loss();
        for rec in &history.epochs[history.best_epoch..] {
            assert!(best <= rec.val_loss + 1e-15);
        }
    }

    #[test]
    fn lr_follows_exact_exponential_decay() {
        let (train_ds, val_ds, synth, mut cfg) = tiny_setup(9);
        cfg.max_epochs = 5;
        cfg.early_stop_patience = 10;
        let (_, history) = train(&train_ds, &val_ds, &synth, &cfg).unwrap();
        for rec in &history.epochs {
            assert_eq!(rec.lr, cfg.initial_lr * cfg.lr_decay_gamma.powi(rec.epoch as i32));
        }
    }

    #[test]
    fn one_small_step_decreases_batch_loss() {
        use crate::losses::total_loss_on_tape;
        use crate::model::{bind_params, forward_two_stream, init_params};

        let (train_ds, _, synth, cfg) = tiny_setup(10);
        let mut tr = train_ds.clone();
        tr.encode(None).unwrap();
        let mut sy = synth.clone();
        sy.encode(Some(&tr)).unwrap();
        let n = 16.min(tr.n_rows());
        let idx: Vec<usize> = (0..n).collect();
        let xs = gather_rows(tr.encoded_matrix().unwrap(), &idx);
        let xt = gather_rows(sy.encoded_matrix().unwrap(), &idx);
        let ys: Vec<u8> = idx.iter().map(|&i| tr.labels().unwrap()[i]).collect();
        let schema = tr.schema().clone();

        let batch_loss = |params: &crate::model::ModelParams| -> (f64, crate::numcore::Gradients, crate::model::BoundParams) {
            let mut tape = GradTape::new();
            let bound = bind_params(&mut tape, params);
            let (s, t) =
                forward_two_stream(&mut tape, &bound, &cfg.model, &schema, &xs, &xt).unwrap();
            let loss = total_loss_on_tape(
                &mut tape,
                s.probabilities,
                &ys,
                s.deep_features,
                t.deep_features,
                0.5,
                &cfg.loss,
            )
            .unwrap();
            let grads = tape.backward(loss.total).unwrap();
            (loss.breakdown.total, grads, bound)
        };

        let lr = 1e-4;
        for seed in 0..20u64 {
            let mut params = init_params(&cfg.model, &schema, seed).unwrap();
            let (before, grads, bound) = batch_loss(&params);
            for (name, id) in bound.iter() {
                let g = grads.wrt(id);
                let p = params.set_mut().get_mut(name).unwrap();
                for (pi, &gi) in p.data_mut().iter_mut().zip(g.data()) {
                    *pi -= lr * gi;
                }
            }
            let (after, _, _) = batch_loss(&params);
            assert!(after < before, "seed {seed}: {after} !< {before}");
        }
    }

    #[test]
    fn synthetic_stream_with_labels_is_rejected() {
        let (train_ds, val_ds, _, cfg) = tiny_setup(11);
        let (_, labeled_target) = tiny_benchmark(11);
        assert!(matches!(
            train(&train_ds, &val_ds, &labeled_target, &cfg),
            Err(TrainError::SyntheticHasLabels)
        ));
    }

    #[test]
    fn unlabeled_source_is_rejected() {
        let (train_ds, val_ds, synth, cfg) = tiny_setup(12);
        assert!(matches!(
            train(&synth, &val_ds, &synth, &cfg),
            Err(TrainError::UnlabeledDataset)
        ));
        assert!(matches!(
            train(&train_ds, &synth, &synth, &cfg),
            Err(TrainError::UnlabeledDataset)
        ));
    }

    #[test]
    fn whole_target_group_matches_plain_evaluation() {
        use crate::data::build_shift_groups;
        let (train_ds, val_ds, synth, cfg) = tiny_setup(13);
        let (source, target) = tiny_benchmark(13);
        let _ = source;
        let (ckpt, _) = train(&train_ds, &val_ds, &synth, &cfg).unwrap();

        let groups = build_shift_groups(&train_ds, &target, &[4]).unwrap();
        let grouped = evaluate_groups(&ckpt, &target, &groups, 0.5).unwrap();
        let (_, plain) = evaluate(&ckpt, &target, 0.5).unwrap();
        let g = &grouped.groups.as_ref().unwrap()[0];
        assert_eq!(g.recall, plain.recall);
        assert_eq!(g.f1, plain.f1);
        assert_eq!(grouped.recall, plain.recall);
    }

    #[test]
    fn sweep_rows_are_reproducible() {
        let (train_ds, val_ds, synth, mut cfg) = tiny_setup(14);
        cfg.max_epochs = 2;
        let grid = [SweepPoint::Fixed(0.0)];
        let a = lambda_sweep(&train_ds, &val_ds, &synth, &cfg, &grid).unwrap();
        assert_eq!(a.len(), 1);
        let b = lambda_sweep(&train_ds, &val_ds, &synth, &cfg, &grid).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert!(matches!(
            lambda_sweep(&train_ds, &val_ds, &synth, &cfg, &[]),
            Err(TrainError::InvalidConfig { .. })
        ));
    }

    #[test]
    fn default_grid_has_nineteen_points_plus_sentinel() {
        let grid = default_sweep_grid();
        assert_eq!(grid.len(), 20);
        assert_eq!(grid[0], SweepPoint::Fixed(0.1));
        assert!(matches!(grid[18], SweepPoint::Fixed(v) if (v - 1.0).abs() < 1e-12));
        assert_eq!(grid[19], SweepPoint::EpochVarying);
    }

    #[test]
    fn history_jsonl_layout() {
        let (train_ds, val_ds, synth, mut cfg) = tiny_setup(15);
        cfg.max_epochs = 2;
        let (ckpt, history) = train(&train_ds, &val_ds, &synth, &cfg).unwrap();
        let text = history.to_jsonl(&ckpt.provenance);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2 + history.epochs.len());
        let head: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert!(head["tool_version"].is_string());
        assert_eq!(head["seed"], cfg.seed);
        let rec: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(rec["epoch"], 0);
        let tail: serde_json::Value = serde_json::from_str(lines.last().unwrap()).unwrap();
        assert_eq!(tail["best_epoch"], history.best_epoch as u64);
    }

    #[test]
    fn momentum_changes_the_trajectory_deterministically() {
        let (train_ds, val_ds, synth, mut cfg) = tiny_setup(16);
        cfg.max_epochs = 2;
        let (plain, _) = train(&train_ds, &val_ds, &synth, &cfg).unwrap();
        cfg.momentum = 0.9;
        let (with_mom, _) = train(&train_ds, &val_ds, &synth, &cfg).unwrap();
        let (with_mom2, _) = train(&train_ds, &val_ds, &synth, &cfg).unwrap();
        assert_ne!(
            plain.params.get("classifier.weight"),
            with_mom.params.get("classifier.weight")
        );
        assert_eq!(
            with_mom.params.get("classifier.weight"),
            with_mom2.params.get("classifier.weight")
        );
    }

    #[test]
    fn lambda_zero_ignores_the_target_stream_direction() {
        // With λ = 0 the CORAL term is still reported but cannot move the
        // weights: swapping the synthetic stream leaves training unchanged.
        let (train_ds, val_ds, synth, mut cfg) = tiny_setup(17);
        cfg.max_epochs = 2;
        cfg.loss = crate::losses::LossConfig {
            lambda_mode: LambdaMode::Fixed,
            lambda_value: 0.0,
            ..cfg.loss
        };
        let (a, _) = train(&train_ds, &val_ds, &synth, &cfg).unwrap();
        let other = generate_synthetic(&synth, synth.n_rows(), Strategy::PassthroughBootstrap, 3, 99)
            .unwrap()
            .into_dataset()
            .unwrap();
        let (b, _) = train(&train_ds, &val_ds, &other, &cfg).unwrap();
        for ((n1, m1), (_, m2)) in a.params.set().iter().zip(b.params.set().iter()) {
            assert_eq!(m1, m2, "{n1} moved despite λ=0");
        }
    }
}
