//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::eval::{self, PairSpec};
use crate::experiments::{self, ExperimentMatrix, Grid};
use crate::gradcheck::{self, CheckSize, CheckTarget};
use crate::pairing::Protocol;
use crate::report;
use crate::trainer::{self, Encoder};

#[derive(Debug, Parser)]
#[command(name = "coreface", version, about = "Contrastive-regularized embedding training and open-set evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON training configuration; defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic train/eval identity splits.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an encoder and write checkpoint and logs.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory holding train.crds and eval.crds; generated from the
        /// config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on held-out identities.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file, or a directory holding eval.crds.
        #[arg(long)]
        data: PathBuf,
        /// `balanced`, `exhaustive`, or `pos=K,neg=M,folds=F,seed=S`.
        #[arg(long, default_value = "balanced")]
        pairs: String,
        #[arg(long, default_value_t = 90)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        /// Loss name, `pipeline`, or `all`.
        #[arg(long, default_value = "all")]
        loss: String,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 8)]
        d: usize,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Key-negative (SRS) analysis of a trained encoder.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "d_2n")]
        protocol: String,
        #[arg(long, default_value_t = 32)]
        images: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Loss and margin curves from a training log directory.
    Report {
        #[arg(long)]
        logdir: PathBuf,
        /// Defaults to the log directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        window: usize,
        #[arg(long)]
        force: bool,
    },
    /// Run a named ablation grid over several seeds.
    Matrix {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        grid: String,
        /// Seed count or comma-separated seed list.
        #[arg(long, default_value = "3")]
        seeds: String,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Create `dir` and refuse to replace any of `files` unless forced.
fn prepare_out(dir: &Path, files: &[&str], force: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    if !force {
        if let Some(f) = files.iter().find(|f| dir.join(f).exists()) {
            return Err(Error::validation(
                "out",
                format!("{} already exists (use --force to overwrite)", dir.join(f).display()),
            ));
        }
    }
    Ok(())
}

fn load_dataset(path: &Path, name: &str) -> Result<Dataset> {
    if path.is_dir() {
        data::load_checked(path.join(name))
    } else {
        data::load_checked(path)
    }
}

fn datasets(cfg: &TrainConfig, dir: Option<&Path>) -> Result<(Dataset, Dataset)> {
    match dir {
        Some(d) => data::load_splits(d),
        None => data::generate(&cfg.data),
    }
}

fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::GenData { common, out: dir } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.data.seed = s;
            }
            prepare_out(&dir, &["train.crds", "eval.crds"], common.force)?;
            let (train, eval) = data::generate(&cfg.data)?;
            train.save(dir.join("train.crds"))?;
            eval.save(dir.join("eval.crds"))?;
            writeln!(
                out,
                "train: {} samples, {} identities; eval: {} samples, {} identities",
                train.len(),
                train.num_identities(),
                eval.len(),
                eval.num_identities()
            )?;
        }
        Command::Train { common, data, out: dir } => {
            let cfg = load_config(&common)?;
            cfg.validate()?;
            prepare_out(
                &dir,
                &["model.crfc", "trainlog.csv", "margin.csv", "epochs.csv", "config.json"],
                common.force,
            )?;
            let (train, eval) = datasets(&cfg, data.as_deref())?;
            let eval_ref = (!eval.is_empty()).then_some(&eval);
            let outcome = trainer::train(&cfg, &train, eval_ref)?;
            trainer::write_outputs(&dir, &cfg, &outcome)?;
            let last = outcome.log.epochs.last();
            writeln!(
                out,
                "trained {} steps; train accuracy {:.4}; m_C {:.4}",
                outcome.log.steps.len(),
                last.map_or(0.0, |e| e.train_accuracy),
                outcome.margin.m_c
            )?;
        }
        Command::Eval {
            checkpoint,
            data,
            pairs,
            bins,
            out: dir,
            force,
        } => {
            let spec: PairSpec = pairs.parse()?;
            prepare_out(
                &dir,
                &["metrics.json", "angles_pos.csv", "angles_neg.csv", "angles.svg"],
                force,
            )?;
            let encoder = Encoder::from_checkpoint(&Checkpoint::load(&checkpoint)?)?;
            let ds = load_dataset(&data, "eval.crds")?;
            let batch = eval::embed_eval(&encoder, &ds)?;
            let pl = eval::build_pairs(&ds.labels, &spec)?;
            let m = eval::evaluate_batch(&batch, &pl, &eval::DEFAULT_FARS, bins)?;
            fs::write(
                dir.join("metrics.json"),
                serde_json::to_string_pretty(&m).expect("metrics serialize"),
            )?;
            report::write_histogram_csv(dir.join("angles_pos.csv"), &m.angle_hist_pos)?;
            report::write_histogram_csv(dir.join("angles_neg.csv"), &m.angle_hist_neg)?;
            fs::write(
                dir.join("angles.svg"),
                report::angle_histogram_chart("pair angle distribution", &m.angle_hist_pos, &m.angle_hist_neg),
            )?;
            writeln!(
                out,
                "accuracy {:.4}; rank-1 {:.4}; gap {:.4}; {} positive / {} negative pairs",
                m.accuracy, m.rank1, m.gap, m.positives, m.negatives
            )?;
            for (far, tar) in &m.tar_at_far {
                writeln!(out, "TAR@FAR={far}: {tar:.4}")?;
            }
        }
        Command::Gradcheck {
            loss,
            n,
            d,
            classes,
            trials,
            seed,
        } => {
            let targets: Vec<CheckTarget> = if loss == "all" {
                CheckTarget::ALL.to_vec()
            } else {
                vec![loss.parse()?]
            };
            if n < 2 || d == 0 || classes < 2 {
                return Err(Error::validation("n", "need n >= 2, d >= 1 and classes >= 2"));
            }
            let size = CheckSize { n, d, classes };
            let mut failed = Vec::new();
            for t in targets {
                let r = gradcheck::run(t, size, trials, seed)?;
                writeln!(
                    out,
                    "{:<9} trials {:>3}  coords {:>6}  max rel error {:.3e}  (tol {:.0e})  {}",
                    t.name(),
                    r.trials,
                    r.coordinates,
                    r.max_rel_error,
                    r.tolerance,
                    if r.passed() { "ok" } else { "FAIL" }
                )?;
                if !r.passed() {
                    failed.push(t.name());
                }
            }
            if !failed.is_empty() {
                return Err(Error::validation(
                    "gradcheck",
                    format!("tolerance exceeded for {}", failed.join(", ")),
                ));
            }
        }
        Command::Diagnose {
            common,
            checkpoint,
            data,
            protocol,
            images,
            out: dir,
        } => {
            let cfg = load_config(&common)?;
            let protocol: Protocol = protocol.parse().map_err(|e: String| Error::validation("protocol", e))?;
            prepare_out(&dir, &["srs_scatter.csv", "srs.svg"], common.force)?;
            let encoder = Encoder::from_checkpoint(&Checkpoint::load(&checkpoint)?)?;
            let ds = load_dataset(&data, "eval.crds")?;
            let r = experiments::diagnose(&encoder, &ds, protocol, &cfg.augment, images, cfg.seed)?;
            report::write_srs_csv(dir.join("srs_scatter.csv"), &r)?;
            fs::write(
                dir.join("srs.svg"),
                report::srs_chart(&format!("key negatives, {protocol}"), &r),
            )?;
            writeln!(
                out,
                "{protocol}: {} anchors, {} mirrored selections, duplication factor {}",
                r.selections.len(),
                r.mirrored_count,
                r.duplication_factor
            )?;
        }
        Command::Report {
            logdir,
            out: dir,
            window,
            force,
        } => {
            let dir = dir.unwrap_or_else(|| logdir.clone());
            prepare_out(&dir, &["curves.csv", "curves.svg", "margin.svg"], force)?;
            let rows = report::write_curves(&logdir, &dir, window)?;
            let mc: Vec<f64> = rows.iter().map(|r| r.m_c).collect();
            let blocks = report::block_means(&mc, window);
            writeln!(
                out,
                "{} steps; final m_C {:.4}; nondecreasing fraction of window means {:.3}",
                rows.len(),
                mc.last().copied().unwrap_or(0.0),
                report::nondecreasing_fraction(&blocks)
            )?;
        }
        Command::Matrix {
            common,
            grid,
            seeds,
            data,
            out: dir,
        } => {
            let base = load_config(&common)?;
            let grid: Grid = grid.parse()?;
            let seeds = experiments::parse_seeds(&seeds)?;
            let matrix = ExperimentMatrix::from_grid(grid, &base, seeds)?;
            prepare_out(&dir, &["matrix.csv", "matrix_runs.csv"], common.force)?;
            let (train, eval) = datasets(&base, data.as_deref())?;
            let results = experiments::run_matrix(&matrix, &train, &eval)?;
            let summary = experiments::summarize(&results);
            write_rows(&dir.join("matrix_runs.csv"), &results)?;
            write_rows(&dir.join("matrix.csv"), &summary)?;
            for s in &summary {
                writeln!(
                    out,
                    "{:<28} acc {:.4} ± {:.4}  gap {:.4} ± {:.4}  rank-1 {:.4}",
                    s.variant, s.accuracy_mean, s.accuracy_std, s.gap_mean, s.gap_std, s.rank1_mean
                )?;
            }
        }
    }
    Ok(())
}

fn write_rows<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(trainer::csv_err)?;
    for r in rows {
        w.serialize(r).map_err(trainer::csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn configure_threads() {
    if let Some(n) = std::env::var("COREFACE_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // a pool built earlier in the process keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

/// Run the CLI on `args`, writing results to `out` and diagnostics to
/// `err`; returns the process exit status.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    0
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    1
                }
            };
        }
    };
    configure_threads();
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error[{}]: {e}", e.code());
            e.exit_code()
        }
    }
}
