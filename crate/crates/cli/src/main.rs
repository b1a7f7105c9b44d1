use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use statetrace::eval::score_sequences;
use statetrace::nn::{train, Variant};
use statetrace::pipeline::{
    grid_search, make_splits, run_cpd, run_experiment, run_ml, transfer_experiment, write_cpd, write_grid, write_ml,
    write_model_scores, write_timeline, write_transfer, ExperimentConfig, GridSearchConfig, TransferConfig,
    VariantScore,
};
use statetrace::simgen::{generate_dataset, GenConfig};
use statetrace::trace::{load_dataset, save_dataset, Dataset, NormStats};
use statetrace::Checkpoint32;

#[derive(Parser)]
#[command(name = "statetrace", version, about = "Infer controller states from input/output traces")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON configuration; its type depends on the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic flight dataset (config: simulator settings).
    Simgen {
        #[arg(long)]
        count: Option<usize>,
        /// Aircraft variant, `a` or `b`.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Train one model variant on the configured split.
    Train {
        #[arg(long, default_value = "hybrid")]
        variant: Variant,
    },
    /// Label every flight of a dataset with a checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
    },
    /// Score a checkpoint; defaults to the configured test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Change-point baselines on the test split.
    CpdBaseline,
    /// Sliding-window ridge and tree baselines on the test split.
    MlBaseline,
    /// Hyper-parameter search (config: grid search settings).
    GridSearch {
        /// Run grids larger than the configured cap.
        #[arg(long)]
        allow_over_cap: bool,
    },
    /// Fine-tuning versus training from scratch on a second aircraft
    /// (config: transfer settings).
    Transfer {
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Full comparison run with per-stage resume.
    Report,
}

fn read_config<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<C> {
    match path {
        None => Ok(C::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn experiment(g: &Global) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = read_config(g.config.as_deref())?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn write_predictions(path: &Path, ds: &Dataset, preds: &[statetrace::trace::LabelSequence]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["flight", "t", "state"])?;
    for (f, p) in ds.flights().iter().zip(preds) {
        for (t, &s) in p.valid_labels().iter().enumerate() {
            w.write_record([f.id.as_str(), &t.to_string(), ds.catalog().name(s).unwrap_or("?")])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Simgen { count, variant } => {
            let mut cfg: GenConfig = read_config(g.config.as_deref())?;
            match variant.as_deref() {
                None => {}
                Some("a" | "A") => cfg.variant = statetrace::simgen::Variant::A,
                Some("b" | "B") => {
                    cfg.variant = statetrace::simgen::Variant::B;
                    if g.config.is_none() {
                        cfg.id_prefix = GenConfig::variant_b().id_prefix;
                    }
                }
                Some(v) => bail!("unknown aircraft variant `{v}`"),
            }
            if let Some(n) = count {
                cfg.count = n;
            }
            if let Some(s) = g.seed {
                cfg.seed = s;
            }
            let dir = g.out.clone().unwrap_or_else(|| PathBuf::from("data"));
            let ds = generate_dataset(&cfg)?;
            let manifest = save_dataset(&ds, &dir, cfg.length_bounds)?;
            println!("{} flights written to {}", ds.z(), manifest.display());
        }
        Command::Train { variant } => {
            let cfg = experiment(g)?;
            let splits = make_splits(&cfg)?;
            let ck = train::<f32>(&cfg.model_for(variant), &splits.train, Some(&splits.val))?;
            let path = cfg.out_dir.join("checkpoints").join(format!("{}.ckpt", variant.name()));
            ck.save(&path)?;
            ck.history.write_csv(&path.with_extension("history.csv"))?;
            println!(
                "{}: {} parameters, best epoch {}, written to {}",
                variant.name(),
                ck.model.param_count(),
                ck.history.best_epoch,
                path.display()
            );
        }
        Command::Predict { checkpoint, data } => {
            let ck = Checkpoint32::load(&checkpoint)?;
            let ds = load_dataset(&data)?;
            let preds = ck.predict_dataset(&ds)?;
            let dir = g.out.clone().unwrap_or_else(|| PathBuf::from("predictions"));
            fs::create_dir_all(&dir)?;
            write_predictions(&dir.join("predictions.csv"), &ds, &preds)?;
            write_timeline(&dir, &ds, &[(ck.model.config().variant, preds)])?;
            println!("labels for {} flights written to {}", ds.z(), dir.display());
        }
        Command::Eval { checkpoint, data } => {
            let cfg = experiment(g)?;
            let ck = Checkpoint32::load(&checkpoint)?;
            let ds = match data {
                Some(p) => load_dataset(&p)?,
                None => make_splits(&cfg)?.test,
            };
            let truth: Vec<_> = ds.flights().iter().map(|f| f.labels()).collect();
            let preds = ck.predict_dataset(&ds)?;
            let scores = score_sequences(&truth, &preds, ck.model.n_states(), ds.sample_period(), &cfg.taus_s)?;
            fs::create_dir_all(&cfg.out_dir)?;
            let row = VariantScore {
                variant: ck.model.config().variant,
                params: ck.model.param_count(),
                best_epoch: ck.history.best_epoch,
                scores,
            };
            write_model_scores(&cfg.out_dir, std::slice::from_ref(&row))?;
            for (name, v) in row.scores.metric_names().iter().zip(row.scores.metrics()) {
                println!("{name:>24} {v:.4}");
            }
        }
        Command::CpdBaseline => {
            let cfg = experiment(g)?;
            let splits = make_splits(&cfg)?;
            let norm = NormStats::fit(&splits.train)?;
            let r = run_cpd(&cfg, &norm, &splits.test)?;
            fs::create_dir_all(&cfg.out_dir)?;
            write_cpd(&cfg.out_dir, &cfg.taus_s, &r)?;
            for row in &r.rows {
                let f1: Vec<String> = row.scores.iter().map(|(t, s)| format!("F1@{t}s {:.4}", s.f1)).collect();
                println!("{:<32} {}", row.label(), f1.join("  "));
            }
        }
        Command::MlBaseline => {
            let cfg = experiment(g)?;
            let splits = make_splits(&cfg)?;
            let rows = run_ml(&cfg, &splits.train, &splits.test)?;
            fs::create_dir_all(&cfg.out_dir)?;
            write_ml(&cfg.out_dir, &rows)?;
            for r in &rows {
                println!("{:<40} class F1 {:.4}", r.spec.to_string(), r.scores.classification.f1);
            }
        }
        Command::GridSearch { allow_over_cap } => {
            let mut cfg: GridSearchConfig = read_config(g.config.as_deref())?;
            cfg.allow_over_cap |= allow_over_cap;
            if let Some(s) = g.seed {
                cfg.experiment.seed = s;
            }
            let dir = g.out.clone().unwrap_or_else(|| cfg.experiment.out_dir.clone());
            let rows = grid_search(&cfg)?;
            write_grid(&dir, &rows)?;
            for r in rows.iter().take(5) {
                println!("{:>3} {:<48} class F1 {:.4}", r.rank, r.label, r.scores.classification.f1);
            }
        }
        Command::Transfer { source, folds } => {
            let mut cfg: TransferConfig = read_config(g.config.as_deref())?;
            if let Some(s) = source {
                cfg.source = s;
            }
            if let Some(k) = folds {
                cfg.folds = k;
            }
            if let Some(s) = g.seed {
                cfg.seed = s;
            }
            if let Some(o) = &g.out {
                cfg.out_dir = o.clone();
            }
            let r = transfer_experiment(&cfg)?;
            write_transfer(&cfg.out_dir, &r)?;
            let (tl, scratch) = r.mean_class_f1();
            println!("mean class F1 over {} folds: fine-tuned {tl:.4}, scratch {scratch:.4}", r.folds.len());
        }
        Command::Report => {
            let cfg = experiment(g)?;
            let out = run_experiment(&cfg)?;
            println!("stages run: {:?}, reused: {:?}", out.ran, out.skipped);
            for c in &out.summary.comparisons {
                let imp = c.improvement.map_or("n/a".into(), |v| format!("{:+.1}%", 100.0 * v));
                println!("{:<18} model {:.4}  best baseline {:.4} ({})  {imp}", c.metric, c.model, c.best_baseline, c.baseline);
            }
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    run(cli)
}
