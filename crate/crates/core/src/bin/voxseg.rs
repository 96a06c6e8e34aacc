//! `voxseg`: command-line wiring of the segmentation pipeline.
//!
//! Every subcommand resolves a flat `key=value` configuration (defaults,
//! then `--config`, then `--set`, then `--seed`/`--workers`) and writes it as
//! `run_config.txt` next to its outputs. Failures print one line,
//! `error kind=<kind> message="<text>"`, and exit with status 1.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use voxseg::config::RunConfig;
use voxseg::data::{
    load_manifest, normalize_case, read_labels, save_case, synth_cohort, write_labels, write_manifest, Case,
    LabelVolume,
};
use voxseg::infer::{ensemble, predict_tta, predict_volume, Prediction};
use voxseg::metrics::evaluate_cohort;
use voxseg::nn::UNet;
use voxseg::regions::{apply_et_rule, optimize_threshold, PostprocessRule};
use voxseg::train::{cotrain_observed, save_log, train_observed, Checkpoint, EpochRecord, TrainOutcome};
use voxseg::{Error, Result};

const RUN_CONFIG: &str = "run_config.txt";
const MANIFEST: &str = "manifest.tsv";
const PREDICTIONS: &str = "predictions.tsv";

#[derive(Parser, Debug)]
#[command(name = "voxseg", about = "Brain-tumor segmentation with a 3D U-Net")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Seed for every random stream (overrides the `seed` key).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Data-pipeline producer threads (overrides the `workers` key).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Single override, `key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic labelled cohort.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        cases: usize,
        /// Dataset tag (head index) stored in the manifest.
        #[arg(long, default_value_t = 0)]
        dataset_tag: usize,
    },
    /// Z-score every modality inside the brain mask.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a single-head network.
    Train {
        #[arg(long)]
        train: PathBuf,
        /// Validation manifest; defaults to the training manifest.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a two-head network on two datasets at once.
    Cotrain {
        #[arg(long)]
        train_a: PathBuf,
        #[arg(long)]
        train_b: PathBuf,
        #[arg(long)]
        val_a: Option<PathBuf>,
        #[arg(long)]
        val_b: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict probabilities and labels for every case of a manifest.
    Predict {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, required_unless_present = "ensemble")]
        checkpoint: Option<PathBuf>,
        /// Average over several checkpoints instead of `--checkpoint`.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        ensemble: Vec<PathBuf>,
        /// Average over all eight mirror variants.
        #[arg(long)]
        tta: bool,
        /// Head to use; defaults to each case's dataset tag.
        #[arg(long)]
        head: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn saved region probabilities into label volumes.
    DecodeRegions {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit or apply the small-ET removal rule.
    Postprocess {
        #[arg(long)]
        predictions: PathBuf,
        /// Reference manifest, needed with `--optimize-threshold`.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, conflicts_with = "rule", requires = "reference")]
        optimize_threshold: bool,
        #[arg(long, required_unless_present = "optimize_threshold")]
        rule: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against references.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Report file (tab-separated).
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &g.overrides {
        cfg.apply(o)?;
    }
    if let Some(s) = g.seed {
        cfg.set("seed", &s.to_string())?;
    }
    if let Some(w) = g.workers {
        cfg.set("workers", &w.to_string())?;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

/// One row of a predictions list: case id, label file and optional
/// probability prefix, both relative to the list's directory.
struct PredictionRow {
    id: String,
    labels: PathBuf,
    probs: Option<PathBuf>,
}

fn write_predictions(dir: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut text = String::from("# id\tlabels\tprobs\n");
    for r in rows {
        let probs = r.probs.as_ref().map_or("-".to_string(), |p| p.display().to_string());
        text.push_str(&format!("{}\t{}\t{probs}\n", r.id, r.labels.display()));
    }
    let path = dir.join(PREDICTIONS);
    fs::write(&path, text).map_err(|e| Error::Io { path, source: e })
}

/// Reads a predictions list, resolving paths against its directory.
fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let base = path.parent().unwrap_or(Path::new(""));
    let file = path.display().to_string();
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::Parse {
                file,
                field: format!("line {}", n + 1),
                message: format!("expected 3 tab-separated columns, found {}", cols.len()),
            });
        }
        rows.push(PredictionRow {
            id: cols[0].to_string(),
            labels: base.join(cols[1]),
            probs: (cols[2] != "-").then(|| base.join(cols[2])),
        });
    }
    Ok(rows)
}

fn load_prediction_labels(rows: &[PredictionRow]) -> Result<Vec<LabelVolume>> {
    rows.iter().map(|r| read_labels(&r.labels)).collect()
}

/// References aligned with `rows` by case id.
fn aligned_references(rows: &[PredictionRow], manifest: &Path) -> Result<Vec<LabelVolume>> {
    let cases = load_manifest(manifest)?;
    rows.iter()
        .map(|r| {
            let case = cases
                .iter()
                .find(|c| c.id == r.id)
                .ok_or_else(|| Error::Contract(format!("case `{}` is missing from {}", r.id, manifest.display())))?;
            case.label.clone().ok_or_else(|| Error::Consistency {
                case: r.id.clone(),
                message: "reference manifest has no label for this case".into(),
            })
        })
        .collect()
}

fn finish_training(out: &Path, cfg: &RunConfig, outcome: &TrainOutcome) -> Result<()> {
    outcome.best.save(out.join("best.ckpt"))?;
    outcome.last.save(out.join("last.ckpt"))?;
    save_log(out.join("train_log.tsv"), cfg.values().entries(), &outcome.log)?;
    eprintln!(
        "trained {} epochs ({} steps); best checkpoint from epoch {}",
        outcome.log.len(),
        outcome.steps,
        outcome.best.epoch
    );
    Ok(())
}

/// Logs each epoch to stderr and keeps the on-disk log current.
fn epoch_observer<'a>(out: &'a Path, cfg: &'a RunConfig) -> impl FnMut(&EpochRecord) + 'a {
    let mut rows = Vec::new();
    move |r: &EpochRecord| {
        eprintln!(
            "epoch {} train_loss={:.5} val_loss={:.5} ema={:.5} lr={:e}",
            r.epoch, r.train_loss, r.val_loss, r.ema, r.lr
        );
        rows.push(*r);
        if let Err(e) = save_log(out.join("train_log.tsv"), cfg.values().entries(), &rows) {
            eprintln!("warning: cannot update the training log: {e}");
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve_config(&cli.global)?;
    match cli.command {
        Command::SynthData { out, cases, dataset_tag } => {
            create_dir(&out)?;
            cfg.save(out.join(RUN_CONFIG))?;
            let synth = voxseg::data::SynthConfig {
                dataset_tag,
                ..cfg.synth()?
            };
            let cohort = synth_cohort(cases, &synth, cfg.seed()?)?;
            let rows = cohort.iter().map(|c| save_case(c, &out)).collect::<Result<Vec<_>>>()?;
            write_manifest(out.join(MANIFEST), &rows)?;
        }
        Command::Preprocess { manifest, out } => {
            create_dir(&out)?;
            cfg.save(out.join(RUN_CONFIG))?;
            let cases = load_manifest(&manifest)?;
            let rows = cases
                .iter()
                .map(|c| save_case(&normalize_case(c)?, &out))
                .collect::<Result<Vec<_>>>()?;
            write_manifest(out.join(MANIFEST), &rows)?;
        }
        Command::Train { train, val, out } => {
            create_dir(&out)?;
            cfg.save(out.join(RUN_CONFIG))?;
            let train_cases = load_manifest(&train)?;
            let val_cases = match &val {
                Some(v) => load_manifest(v)?,
                None => train_cases.clone(),
            };
            let mut net = UNet::<f32>::new(cfg.model()?)?;
            let outcome = train_observed(&mut net, &train_cases, &val_cases, &cfg.train()?, &mut epoch_observer(&out, &cfg))?;
            finish_training(&out, &cfg, &outcome)?;
        }
        Command::Cotrain { train_a, train_b, val_a, val_b, out } => {
            create_dir(&out)?;
            cfg.set("model.num_heads", "2")?;
            cfg.save(out.join(RUN_CONFIG))?;
            let a = load_manifest(&train_a)?;
            let b = load_manifest(&train_b)?;
            let va = match &val_a {
                Some(p) => load_manifest(p)?,
                None => a.clone(),
            };
            let vb = match &val_b {
                Some(p) => load_manifest(p)?,
                None => b.clone(),
            };
            let mut net = UNet::<f32>::new(cfg.model()?)?;
            let outcome = cotrain_observed(&mut net, &a, &b, &va, &vb, &cfg.train()?, &mut epoch_observer(&out, &cfg))?;
            finish_training(&out, &cfg, &outcome)?;
        }
        Command::Predict { manifest, checkpoint, ensemble: members, tta, head, out } => {
            create_dir(&out)?;
            cfg.save(out.join(RUN_CONFIG))?;
            let paths: Vec<PathBuf> = if members.is_empty() {
                checkpoint.into_iter().collect()
            } else {
                members
            };
            let nets = paths
                .iter()
                .map(|p| Checkpoint::load(p)?.to_model::<f32>())
                .collect::<Result<Vec<_>>>()?;
            let budget = Some(cfg.memory_budget_bytes()?);
            let threshold = cfg.threshold()?;
            let mut rows = Vec::new();
            for case in load_manifest(&manifest)? {
                let pred = predict_case(&nets, &case, head, tta, budget)?;
                let probs = PathBuf::from(format!("{}_probs", case.id));
                let labels = PathBuf::from(format!("{}_pred.vseg", case.id));
                pred.save(out.join(&probs))?;
                write_labels(&pred.to_labels(threshold)?, out.join(&labels))?;
                rows.push(PredictionRow {
                    id: case.id,
                    labels,
                    probs: Some(probs),
                });
            }
            write_predictions(&out, &rows)?;
        }
        Command::DecodeRegions { predictions, out } => {
            create_dir(&out)?;
            cfg.save(out.join(RUN_CONFIG))?;
            let threshold = cfg.threshold()?;
            let mut rows = Vec::new();
            for r in read_predictions(&predictions)? {
                let prefix = r.probs.ok_or_else(|| Error::Contract(format!("case `{}` has no saved probabilities", r.id)))?;
                let labels = PathBuf::from(format!("{}_pred.vseg", r.id));
                write_labels(&Prediction::load(&prefix)?.to_labels(threshold)?, out.join(&labels))?;
                rows.push(PredictionRow {
                    id: r.id,
                    labels,
                    probs: None,
                });
            }
            write_predictions(&out, &rows)?;
        }
        Command::Postprocess { predictions, reference, optimize_threshold: optimize, rule, out } => {
            create_dir(&out)?;
            cfg.save(out.join(RUN_CONFIG))?;
            let rows = read_predictions(&predictions)?;
            let preds = load_prediction_labels(&rows)?;
            let rule = if optimize {
                let reference = reference.expect("clap enforces --reference");
                let refs = aligned_references(&rows, &reference)?;
                let (rule, score) = optimize_threshold(&preds, &refs)?;
                rule.save(out.join("postprocess_rule.txt"))?;
                eprintln!("{rule} mean_et_dice={score:.6}");
                rule
            } else {
                PostprocessRule::load(rule.expect("clap enforces --rule"))?
            };
            let mut out_rows = Vec::new();
            for (r, p) in rows.iter().zip(&preds) {
                let labels = PathBuf::from(format!("{}_pred.vseg", r.id));
                write_labels(&apply_et_rule(p, rule), out.join(&labels))?;
                out_rows.push(PredictionRow {
                    id: r.id.clone(),
                    labels,
                    probs: None,
                });
            }
            write_predictions(&out, &out_rows)?;
        }
        Command::Evaluate { predictions, reference, out } => {
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
                cfg.save(dir.join(RUN_CONFIG))?;
            } else {
                cfg.save(RUN_CONFIG)?;
            }
            let rows = read_predictions(&predictions)?;
            let preds = load_prediction_labels(&rows)?;
            let refs = aligned_references(&rows, &reference)?;
            let ids: Vec<String> = rows.iter().map(|r| r.id.clone()).collect();
            let report = evaluate_cohort(&ids, &preds, &refs, &cfg.metric_conventions()?)?;
            report.save(&out)?;
            print!("{}", report.to_tsv());
        }
    }
    Ok(())
}

fn predict_case(nets: &[UNet<f32>], case: &Case, head: Option<usize>, tta: bool, budget: Option<usize>) -> Result<Prediction> {
    let head = head.unwrap_or(case.dataset_tag);
    let preds = nets
        .iter()
        .enumerate()
        .map(|(i, net)| {
            let id = format!("model{i}");
            if tta {
                predict_tta(net, case, head, &id, budget)
            } else {
                predict_volume(net, case, head, &id, budget)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    ensemble(&preds)
}

fn main() -> ExitCode {
    let conventions = RunConfig::default()
        .metric_conventions()
        .map(|c| c.describe())
        .unwrap_or_default();
    let long_version: &'static str = Box::leak(format!("{}\n{conventions}", env!("CARGO_PKG_VERSION")).into_boxed_str());
    let matches = Cli::command()
        .version(env!("CARGO_PKG_VERSION"))
        .long_version(long_version)
        .get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error kind={} message={:?}", e.kind(), e.to_string());
            ExitCode::FAILURE
        }
    }
}
