//! `tcnet`: batch pipeline driver. Subcommands cover benchmark
//! generation, target oversampling, shift grouping, training, grouped
//! evaluation, the λ sweep, and explanation export.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error. Diagnostics
//! go to stderr; data goes to files or stdout.

mod config;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use config::RunConfig;
use tcnet_core::data::{
    build_shift_groups_with, gen_benchmark, DomainDataset, ShiftGroups, TabularSchema,
};
use tcnet_core::explain::{attention_diff, attention_map, lime_explain, AttentionFilter};
use tcnet_core::model::{load_checkpoint, save_checkpoint};
use tcnet_core::oversample::generate_synthetic;
use tcnet_core::train::{
    self, decreasing_rates, evaluate, evaluate_groups, lambda_sweep, MetricReport, SweepPoint,
};

const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(name = "tcnet", version, about = "Two-stream transformer credit-scoring pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-domain benchmark (source.csv, target.csv, schema.json).
    GenBenchmark {
        /// Run configuration file (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate synthetic target-domain training rows.
    Oversample {
        #[arg(long)]
        config: PathBuf,
        /// Schema file (JSON).
        #[arg(long)]
        schema: PathBuf,
        /// Target-domain CSV to enlarge.
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Rows to generate (overrides config and --match-source).
        #[arg(long)]
        count: Option<usize>,
        /// CSV whose row count sets the generation count.
        #[arg(long)]
        match_source: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Rank target circles by KL divergence and build nested shift groups.
    Group {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        /// Source-domain CSV.
        #[arg(long)]
        source: PathBuf,
        /// Target-domain CSV (with circle ids).
        #[arg(long)]
        target: PathBuf,
        /// Output groups JSON file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on labeled source plus unlabeled synthetic target rows.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        /// Labeled source-domain CSV (split into train/validation).
        #[arg(long)]
        source: PathBuf,
        /// Unlabeled synthetic target CSV.
        #[arg(long)]
        target_synth: PathBuf,
        /// Output directory (checkpoint.tcnet, history.jsonl, run.json).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a labeled dataset, optionally per group.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Labeled CSV to evaluate.
        #[arg(long)]
        data: PathBuf,
        /// Groups JSON from `tcnet group`.
        #[arg(long)]
        groups: Option<PathBuf>,
        /// Training metrics JSON; enables decreasing-rate reporting.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Decision threshold on the defaulting probability.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Output file (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train once per λ grid point and tabulate best validation losses.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target_synth: PathBuf,
        /// Output table JSON file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Export a local surrogate explanation for one instance.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV holding the instance.
        #[arg(long)]
        data: PathBuf,
        /// Row index of the instance to explain.
        #[arg(long)]
        row: usize,
        /// Optional run config (lime section + seed).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export an aggregated feature×feature attention map.
    Attention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// all | defaulting | non_defaulting.
        #[arg(long, default_value = "all")]
        filter: String,
        /// Emit the defaulting − non_defaulting difference instead.
        #[arg(long, default_value_t = false)]
        diff: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli.command) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

/// Exclusive output-directory lock; removed on drop.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<DirLock> {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("cannot create output directory {}", dir.display()))?;
        let path = dir.join(".tcnet.lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(anyhow!(
                "output directory {} is locked by another run (remove {} if stale)",
                dir.display(),
                path.display()
            )),
            Err(e) => Err(e).with_context(|| format!("cannot lock {}", dir.display())),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn provenance(seed: u64, config_digest: &str) -> serde_json::Value {
    serde_json::json!({
        "tool_version": TOOL_VERSION,
        "seed": seed,
        "config_digest": config_digest,
    })
}

fn load_schema(path: &Path) -> Result<Arc<TabularSchema>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read schema {}", path.display()))?;
    Ok(Arc::new(TabularSchema::from_json(&text)?))
}

fn load_config(path: &Path, seed_override: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = seed_override {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit_json(value: &serde_json::Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => std::fs::write(path, text + "\n")
            .with_context(|| format!("cannot write {}", path.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenBenchmark { config, out, seed } => cmd_gen_benchmark(&config, &out, seed),
        Command::Oversample {
            config,
            schema,
            target,
            out,
            count,
            match_source,
            seed,
        } => cmd_oversample(&config, &schema, &target, &out, count, match_source, seed),
        Command::Group {
            config,
            schema,
            source,
            target,
            out,
        } => cmd_group(&config, &schema, &source, &target, &out),
        Command::Train {
            config,
            schema,
            source,
            target_synth,
            out,
            seed,
        } => cmd_train(&config, &schema, &source, &target_synth, &out, seed),
        Command::Eval {
            checkpoint,
            data,
            groups,
            reference,
            threshold,
            out,
        } => cmd_eval(&checkpoint, &data, groups, reference, threshold, out),
        Command::Sweep {
            config,
            schema,
            source,
            target_synth,
            out,
            seed,
        } => cmd_sweep(&config, &schema, &source, &target_synth, &out, seed),
        Command::Explain {
            checkpoint,
            data,
            row,
            config,
            seed,
            out,
        } => cmd_explain(&checkpoint, &data, row, config, seed, out),
        Command::Attention {
            checkpoint,
            data,
            filter,
            diff,
            out,
        } => cmd_attention(&checkpoint, &data, &filter, diff, out),
    }
}

fn cmd_gen_benchmark(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let _lock = DirLock::acquire(out)?;
    let bench_cfg = cfg.benchmark_config();
    let (source, target) = gen_benchmark(&bench_cfg)?;

    let comment = provenance(cfg.seed, &cfg.digest()).to_string();
    source.write_csv(out.join("source.csv"), Some(&comment), true)?;
    target.write_csv(out.join("target.csv"), Some(&comment), true)?;

    let mut schema_json: serde_json::Value =
        serde_json::from_str(&source.schema().to_canonical_json())?;
    schema_json["provenance"] = provenance(cfg.seed, &cfg.digest());
    emit_json(&schema_json, Some(&out.join("schema.json")))?;

    let run = serde_json::json!({
        "provenance": provenance(cfg.seed, &cfg.digest()),
        "config": cfg.echo(),
        "source_rows": source.n_rows(),
        "target_rows": target.n_rows(),
    });
    emit_json(&run, Some(&out.join("run.json")))?;
    eprintln!(
        "wrote {} source rows and {} target rows to {}",
        source.n_rows(),
        target.n_rows(),
        out.display()
    );
    Ok(())
}

fn cmd_oversample(
    config: &Path,
    schema: &Path,
    target: &Path,
    out: &Path,
    count: Option<usize>,
    match_source: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let schema = load_schema(schema)?;
    let target_ds = DomainDataset::load_csv(target, schema.clone())?;

    let count = match (count, match_source, cfg.oversample.count) {
        (Some(n), _, _) => n,
        (None, Some(path), _) => DomainDataset::load_csv(&path, schema.clone())?.n_rows(),
        (None, None, Some(n)) => n,
        (None, None, None) => bail!(
            "generation count unset: pass --count, --match-source, or oversample.count in the config"
        ),
    };

    let _lock = DirLock::acquire(out)?;
    let batch = generate_synthetic(
        &target_ds,
        count,
        cfg.oversample.strategy,
        cfg.oversample.mode_count,
        cfg.seed,
    )?;
    let prov = batch.provenance().clone();
    let ds = batch.into_dataset()?;
    let comment = provenance(cfg.seed, &cfg.digest()).to_string();
    ds.write_csv(out.join("synthetic.csv"), Some(&comment), false)?;

    let sidecar = serde_json::json!({
        "strategy": prov.strategy,
        "seed": prov.seed,
        "count": prov.count,
        "source_digest": prov.source_digest,
        "provenance": provenance(cfg.seed, &cfg.digest()),
        "config": cfg.echo(),
    });
    emit_json(&sidecar, Some(&out.join("synthetic.provenance.json")))?;
    eprintln!("wrote {count} synthetic rows to {}", out.display());
    Ok(())
}

fn cmd_group(config: &Path, schema: &Path, source: &Path, target: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config, None)?;
    let schema = load_schema(schema)?;
    let source_ds = DomainDataset::load_csv(source, schema.clone())?;
    let target_ds = DomainDataset::load_csv(target, schema)?;
    let groups = build_shift_groups_with(&source_ds, &target_ds, &cfg.data.group_sizes, cfg.data.kl)?;

    let mut doc = serde_json::to_value(&groups)?;
    doc["provenance"] = provenance(cfg.seed, &cfg.digest());
    doc["config"] = cfg.echo();
    emit_json(&doc, Some(out))?;
    eprintln!(
        "ranked {} circles into {} groups",
        groups.circles.len(),
        groups.groups.len()
    );
    Ok(())
}

fn cmd_train(
    config: &Path,
    schema: &Path,
    source: &Path,
    target_synth: &Path,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let schema = load_schema(schema)?;
    let source_ds = DomainDataset::load_csv(source, schema.clone())?;
    let synth_ds = DomainDataset::load_csv(target_synth, schema.clone())?;

    let (train_ds, val_ds) = source_ds.split_source(cfg.data.train_fraction, cfg.seed)?;
    let tcfg = cfg.train_config(&schema);
    let _lock = DirLock::acquire(out)?;
    let started = std::time::Instant::now();
    let (checkpoint, history) = train::train(&train_ds, &val_ds, &synth_ds, &tcfg)?;
    let elapsed = started.elapsed();

    save_checkpoint(&checkpoint, out.join("checkpoint.tcnet"))?;
    std::fs::write(
        out.join("history.jsonl"),
        history.to_jsonl(&checkpoint.provenance),
    )?;
    let run = serde_json::json!({
        "provenance": provenance(cfg.seed, &cfg.digest()),
        "config": cfg.echo(),
        "stopping_reason": history.stopping_reason,
        "best_epoch": history.best_epoch,
        "best_val_loss": history.best_val_loss(),
        "epochs_run": history.epochs.len(),
        "train_seconds": elapsed.as_secs_f64(),
    });
    emit_json(&run, Some(&out.join("run.json")))?;
    eprintln!(
        "trained {} epochs in {:.1}s (best epoch {}, val loss {:.6})",
        history.epochs.len(),
        elapsed.as_secs_f64(),
        history.best_epoch,
        history.best_val_loss()
    );
    Ok(())
}

fn load_groups(path: &Path) -> Result<ShiftGroups> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read groups {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    groups: Option<PathBuf>,
    reference: Option<PathBuf>,
    threshold: f64,
    out: Option<PathBuf>,
) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let ds = DomainDataset::load_csv(data, ckpt.schema.clone())?;

    let mut report = match groups {
        Some(path) => {
            let groups = load_groups(&path)?;
            evaluate_groups(&ckpt, &ds, &groups, threshold)?
        }
        None => evaluate(&ckpt, &ds, threshold)?.1,
    };
    if let Some(path) = reference {
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("cannot read reference {}", path.display()))?;
        let training: MetricReport = serde_json::from_str(&text)?;
        report.rates = Some(decreasing_rates(&training, &report)?);
    }

    let mut doc = serde_json::to_value(&report)?;
    doc["provenance"] = provenance(ckpt.provenance.seed, &ckpt.provenance.config_digest);
    doc["threshold"] = serde_json::json!(threshold);
    emit_json(&doc, out.as_deref())?;
    Ok(())
}

fn cmd_sweep(
    config: &Path,
    schema: &Path,
    source: &Path,
    target_synth: &Path,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let schema = load_schema(schema)?;
    let source_ds = DomainDataset::load_csv(source, schema.clone())?;
    let synth_ds = DomainDataset::load_csv(target_synth, schema.clone())?;
    let (train_ds, val_ds) = source_ds.split_source(cfg.data.train_fraction, cfg.seed)?;

    let mut grid: Vec<SweepPoint> = cfg.sweep.grid.iter().map(|&v| SweepPoint::Fixed(v)).collect();
    if cfg.sweep.include_epoch_varying {
        grid.push(SweepPoint::EpochVarying);
    }
    let tcfg = cfg.train_config(&schema);
    let rows = lambda_sweep(&train_ds, &val_ds, &synth_ds, &tcfg, &grid)?;

    let table: Vec<serde_json::Value> = rows
        .iter()
        .map(|r| {
            let lambda = match r.point {
                SweepPoint::Fixed(v) => serde_json::json!(v),
                SweepPoint::EpochVarying => serde_json::json!("epoch_varying"),
            };
            serde_json::json!({
                "lambda": lambda,
                "best_val_loss": r.best_val_loss,
                "best_epoch": r.best_epoch,
                "stopping_reason": r.stopping_reason,
            })
        })
        .collect();
    let doc = serde_json::json!({
        "rows": table,
        "provenance": provenance(cfg.seed, &cfg.digest()),
        "config": cfg.echo(),
    });
    emit_json(&doc, Some(out))?;
    eprintln!("swept {} grid points", rows.len());
    Ok(())
}

fn cmd_explain(
    checkpoint: &Path,
    data: &Path,
    row: usize,
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let ds = DomainDataset::load_csv(data, ckpt.schema.clone())?;
    if row >= ds.n_rows() {
        bail!("row {row} out of range ({} rows)", ds.n_rows());
    }
    let (lime_cfg, cfg_seed, digest) = match config {
        Some(path) => {
            let cfg = load_config(&path, None)?;
            (cfg.lime, Some(cfg.seed), cfg.digest())
        }
        None => (
            tcnet_core::explain::LimeConfig::default(),
            None,
            ckpt.provenance.config_digest.clone(),
        ),
    };
    let seed = seed
        .or(cfg_seed)
        .ok_or_else(|| anyhow!("seed unset: pass --seed or a config file with one"))?;

    let explanation = lime_explain(&ckpt, ds.row(row), row, &lime_cfg, seed)?;
    let mut doc = serde_json::to_value(&explanation)?;
    doc["config_echo"] = serde_json::to_value(lime_cfg)?;
    doc["provenance"] = provenance(seed, &digest);
    emit_json(&doc, out.as_deref())?;
    Ok(())
}

fn cmd_attention(
    checkpoint: &Path,
    data: &Path,
    filter: &str,
    diff: bool,
    out: Option<PathBuf>,
) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let ds = DomainDataset::load_csv(data, ckpt.schema.clone())?;
    let prov = provenance(ckpt.provenance.seed, &ckpt.provenance.config_digest);

    let doc = if diff {
        let pos = attention_map(&ckpt, &ds, AttentionFilter::Defaulting)?;
        let neg = attention_map(&ckpt, &ds, AttentionFilter::NonDefaulting)?;
        let d = attention_diff(&pos, &neg)?;
        let mut doc = serde_json::json!({
            "defaulting": pos,
            "non_defaulting": neg,
            "difference": d,
        });
        doc["provenance"] = prov;
        doc
    } else {
        let filter = AttentionFilter::parse(filter)
            .ok_or_else(|| anyhow!("unknown filter '{filter}' (use all | defaulting | non_defaulting)"))?;
        let map = attention_map(&ckpt, &ds, filter)?;
        let mut doc = serde_json::to_value(&map)?;
        doc["provenance"] = prov;
        doc
    };
    emit_json(&doc, out.as_deref())?;
    Ok(())
}
