//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 for usage and validation errors, 2 for
//! runtime failures (I/O, corrupt artifacts, numerical errors).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::eval::{linear_probe_fit, metrics_compute, split_dataset, MetricsReport, Split};
use crate::experiment::{fcn_bank, run_ablation, AblationRow, PromptRow};
use crate::io::{
    load_checkpoint, load_cohort, load_config, load_embeddings, read_history, read_json, save_checkpoint,
    save_cohort, save_embeddings, write_history, write_json, Checkpoint, CohortManifest, Config, EmbeddingSet,
};
use crate::model::{network_encode_batch, visual_encode_batch, ModelCfg, ModelParams};
use crate::objectives::{pretrain_until, LossReport, TrainedModel};
use crate::prompting::prompt_evaluate;
use crate::rng::indexed_seed;
use crate::synth::{gen_paired_cohort_with, Fcn, PairedSample, Volume3D};
use crate::tensor::Tensor;

pub const CHECKPOINT_FILE: &str = "checkpoint.cinp";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const ABLATION_FILE: &str = "ablation.json";

#[derive(Debug, Parser)]
#[command(name = "cinp", version, about = "Contrastive image-network pretraining on synthetic cohorts")]
pub struct Cli {
    /// JSON config; missing keys take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config's top-level seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a paired synthetic cohort.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain on the training split of a cohort.
    Pretrain {
        #[arg(long)]
        cohort: PathBuf,
        /// Output directory for the checkpoint, loss history and resolved config.
        #[arg(long)]
        out: PathBuf,
        /// Resume from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Stop after this many completed epochs of the configured schedule.
        #[arg(long)]
        stop_after_epoch: Option<usize>,
    },
    /// Embed every subject of a cohort with a trained encoder.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Modality::Image)]
        modality: Modality,
    },
    /// Fit a linear probe on training-split image embeddings and score the test split.
    Probe {
        #[command(flatten)]
        source: ProbeSource,
        #[arg(long)]
        cohort: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify test volumes by similarity to group-level network references.
    Prompt {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        /// Output directory; writes `prompt_r<r>.json` and `references_r<r>.json` per group size.
        #[arg(long)]
        out: PathBuf,
        /// Group size; defaults to every value in the config.
        #[arg(long)]
        r: Option<usize>,
        #[arg(long)]
        fcn_fraction: Option<f64>,
    },
    /// Train and evaluate the four loss combinations.
    Ablate {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render loss histories and metrics as text.
    Report {
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        ablation: Option<PathBuf>,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct ProbeSource {
    #[arg(long, requires = "cohort")]
    pub checkpoint: Option<PathBuf>,
    /// Image embeddings written by `embed`.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Modality {
    Image,
    Network,
}

impl Modality {
    fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Network => "network",
        }
    }
}

/// Parses `args` (including the program name), runs the command, and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(path) => load_config(path).map_err(|e| match e {
            Error::Io(io) => Error::invalid("--config", format!("{}: {io}", path.display())),
            other => other,
        })?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg.with_derived_seeds())
}

pub fn execute(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    match cli.command {
        Command::GenData { out } => gen_data(&cfg, &out),
        Command::Pretrain { cohort, out, checkpoint, stop_after_epoch } => {
            pretrain_cmd(&cfg, &cohort, &out, checkpoint.as_deref(), stop_after_epoch)
        }
        Command::Embed { checkpoint, cohort, out, modality } => embed_cmd(&checkpoint, &cohort, &out, modality),
        Command::Probe { source, cohort, out } => probe_cmd(&cfg, &source, cohort.as_deref(), &out),
        Command::Prompt { checkpoint, cohort, out, r, fcn_fraction } => {
            prompt_cmd(&cfg, &checkpoint, &cohort, &out, r, fcn_fraction)
        }
        Command::Ablate { cohort, out } => ablate_cmd(&cfg, &cohort, &out),
        Command::Report { history, metrics, ablation, out } => {
            let text = report(history.as_deref(), &metrics, ablation.as_deref())?;
            match out {
                Some(path) => crate::io::write_atomic(&path, text.as_bytes()),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
    }
}

fn gen_data(cfg: &Config, out: &Path) -> Result<()> {
    let samples = gen_paired_cohort_with(&cfg.cohort, &cfg.recipe)?;
    save_cohort(out, &cfg.cohort, &cfg.recipe, &samples)?;
    log::info!("wrote {} subjects to {}", samples.len(), out.display());
    Ok(())
}

fn check_compatible(model: &ModelCfg, manifest: &CohortManifest) -> Result<()> {
    if model.visual.input_dims != manifest.spec.dims {
        return Err(Error::invalid(
            "model.visual.input_dims",
            format!("cohort volumes are {:?}, model expects {:?}", manifest.spec.dims, model.visual.input_dims),
        ));
    }
    if model.network.n_rois != manifest.spec.n_rois {
        return Err(Error::invalid(
            "model.network.n_rois",
            format!("cohort has {} ROIs, model expects {}", manifest.spec.n_rois, model.network.n_rois),
        ));
    }
    Ok(())
}

fn labels_of(samples: &[PairedSample]) -> Vec<usize> {
    samples.iter().map(|s| s.label).collect()
}

fn n_classes(labels: &[usize]) -> usize {
    labels.iter().copied().max().map_or(0, |m| m + 1)
}

fn pretrain_cmd(
    cfg: &Config,
    cohort_dir: &Path,
    out: &Path,
    resume: Option<&Path>,
    stop_after: Option<usize>,
) -> Result<()> {
    let (manifest, samples) = load_cohort(cohort_dir)?;
    check_compatible(&cfg.model, &manifest)?;
    let split = split_dataset(&labels_of(&samples), &cfg.eval.split)?;
    let train: Vec<PairedSample> = split.train.iter().map(|&i| samples[i].clone()).collect();
    let state = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.config.model != cfg.model {
                return Err(Error::invalid("model", "differs from the model stored in the checkpoint"));
            }
            ckpt.into_model()
        }
        None => TrainedModel::fresh(&cfg.model, &cfg.hyper, cfg.seed)?,
    };
    let until = stop_after.unwrap_or(cfg.hyper.epochs);
    let (model, history) = pretrain_until(state, &train, &cfg.model, &cfg.hyper, cfg.seed, until)?;
    save_checkpoint(&out.join(CHECKPOINT_FILE), &Checkpoint::new(cfg.clone(), model))?;
    write_history(&out.join(HISTORY_FILE), &history)?;
    write_json(&out.join(CONFIG_FILE), cfg)?;
    if let Some(last) = history.last() {
        log::info!("finished at step {}: total {:.4}", last.step + 1, last.total);
    }
    Ok(())
}

fn embed_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn embed_samples(params: &ModelParams, model: &ModelCfg, samples: &[PairedSample], modality: Modality) -> Result<Tensor> {
    match modality {
        Modality::Image => {
            let vols: Vec<&Volume3D> = samples.iter().map(|s| &s.volume).collect();
            visual_encode_batch(&vols, params, &model.visual)
        }
        Modality::Network => {
            let fcns: Vec<&Fcn> = samples.iter().map(|s| &s.fcn).collect();
            network_encode_batch(&fcns, params, &model.network)
        }
    }
}

fn load_pair(checkpoint: &Path, cohort_dir: &Path) -> Result<(Checkpoint, Vec<PairedSample>)> {
    let ckpt = load_checkpoint(checkpoint)?;
    let (manifest, samples) = load_cohort(cohort_dir)?;
    check_compatible(&ckpt.config.model, &manifest)?;
    Ok((ckpt, samples))
}

fn embed_cmd(checkpoint: &Path, cohort_dir: &Path, out: &Path, modality: Modality) -> Result<()> {
    let (ckpt, samples) = load_pair(checkpoint, cohort_dir)?;
    let vectors = embed_samples(&ckpt.params, &ckpt.config.model, &samples, modality)?;
    let set = EmbeddingSet {
        modality: modality.name().to_string(),
        subject_ids: samples.iter().map(|s| s.subject_id.clone()).collect(),
        labels: labels_of(&samples),
        vectors,
    };
    save_embeddings(out, &set)
}

/// Probe metrics on `split.test` for row-aligned features.
pub fn probe_split(features: &[Vec<f64>], labels: &[usize], split: &Split, cfg: &Config) -> Result<MetricsReport> {
    let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<usize>) {
        (idx.iter().map(|&i| features[i].clone()).collect(), idx.iter().map(|&i| labels[i]).collect())
    };
    let (train_x, train_y) = pick(&split.train);
    let (test_x, test_y) = pick(&split.test);
    let probe = linear_probe_fit(&train_x, &train_y, &cfg.eval.probe)?;
    let (preds, scores) = probe.predict_all(&test_x)?;
    metrics_compute(&preds, &test_y, scores.as_deref(), n_classes(labels))
}

fn probe_cmd(cfg: &Config, source: &ProbeSource, cohort_dir: Option<&Path>, out: &Path) -> Result<()> {
    let (features, labels) = match (&source.embeddings, &source.checkpoint, cohort_dir) {
        (Some(path), _, _) => {
            let set = load_embeddings(path)?;
            if set.modality != Modality::Image.name() {
                return Err(Error::invalid("--embeddings", format!("expected image embeddings, got {}", set.modality)));
            }
            (embed_rows(&set.vectors), set.labels)
        }
        (None, Some(ckpt), Some(dir)) => {
            let (ckpt, samples) = load_pair(ckpt, dir)?;
            let t = embed_samples(&ckpt.params, &ckpt.config.model, &samples, Modality::Image)?;
            (embed_rows(&t), labels_of(&samples))
        }
        _ => return Err(Error::invalid("--checkpoint", "probe needs --embeddings or --checkpoint with --cohort")),
    };
    let split = split_dataset(&labels, &cfg.eval.split)?;
    let report = probe_split(&features, &labels, &split, cfg)?;
    log::info!("probe ACC {:.4} MCC {:.4}", report.acc, report.mcc);
    write_json(out, &report)
}

fn prompt_cmd(
    cfg: &Config,
    checkpoint: &Path,
    cohort_dir: &Path,
    out: &Path,
    r: Option<usize>,
    fcn_fraction: Option<f64>,
) -> Result<()> {
    let mut eval = cfg.eval.clone();
    if let Some(f) = fcn_fraction {
        eval.fcn_fraction = f;
    }
    if let Some(r) = r {
        eval.prompt_r = vec![r];
    }
    eval.validate().map_err(|e| match e {
        Error::Validation { path, message } if path == "fcn_fraction" => Error::invalid("--fcn-fraction", message),
        Error::Validation { path, message } if path == "prompt_r" => Error::invalid("--r", message),
        other => other,
    })?;
    let (ckpt, samples) = load_pair(checkpoint, cohort_dir)?;
    let labels = labels_of(&samples);
    let split = split_dataset(&labels, &eval.split)?;
    let bank_idx = fcn_bank(&split.train, &labels, n_classes(&labels), eval.fcn_fraction, cfg.seed);
    let bank: Vec<Vec<(String, &Fcn)>> = bank_idx
        .iter()
        .map(|c| c.iter().map(|&i| (samples[i].subject_id.clone(), &samples[i].fcn)).collect())
        .collect();
    let test: Vec<(&Volume3D, usize)> = split.test.iter().map(|&i| (&samples[i].volume, labels[i])).collect();
    for &r in &eval.prompt_r {
        let seed = indexed_seed(cfg.seed, "prompt", r as u64);
        let eval = prompt_evaluate(&ckpt.params, &ckpt.config.model, &test, &bank, r, seed)?;
        log::info!("prompt r={r} ACC {:.4}", eval.metrics.acc);
        write_json(&out.join(format!("references_r{r}.json")), &eval.references)?;
        write_json(&out.join(format!("prompt_r{r}.json")), &PromptRow { r, metrics: eval.metrics })?;
    }
    Ok(())
}

fn ablate_cmd(cfg: &Config, cohort_dir: &Path, out: &Path) -> Result<()> {
    let (manifest, samples) = load_cohort(cohort_dir)?;
    check_compatible(&cfg.model, &manifest)?;
    let rows = run_ablation(&samples, &cfg.model, &cfg.hyper, &cfg.eval, cfg.seed)?;
    write_json(&out.join(ABLATION_FILE), &rows)?;
    crate::io::write_atomic(&out.join("ablation.txt"), ablation_table(&rows).as_bytes())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    let rs: Vec<usize> = rows.first().map(|r| r.evaluation.prompting.iter().map(|p| p.r).collect()).unwrap_or_default();
    let _ = write!(s, "{:<14}{:>8}{:>8}{:>10}{:>10}", "objective", "alpha", "beta", "top1", "probe");
    for r in &rs {
        let _ = write!(s, "{:>10}", format!("r={r}"));
    }
    s.push('\n');
    for row in rows {
        let e = &row.evaluation;
        let _ = write!(
            s,
            "{:<14}{:>8}{:>8}{:>10}{:>10.4}",
            row.name,
            row.alpha,
            row.beta,
            format!("{}/{}", e.retrieval_top1, e.n_test),
            e.probe.acc
        );
        for p in &e.prompting {
            let _ = write!(s, "{:>10.4}", p.metrics.acc);
        }
        s.push('\n');
    }
    s
}

fn metrics_block(title: &str, m: &MetricsReport) -> String {
    let mut s = format!("{title}: n={} ACC {:.4} AUC {} MCC {:.4}\n", m.n, m.acc, fmt_opt(m.auc), m.mcc);
    for (t, row) in m.confusion.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|c| format!("{c:>5}")).collect();
        let _ = writeln!(s, "  true {t}: {}", cells.join(""));
    }
    s
}

fn history_block(history: &[LossReport]) -> String {
    let mut s = String::from("epoch      lr        inc       mim       inm     total       tau\n");
    let mut last_per_epoch: Vec<&LossReport> = Vec::new();
    for h in history {
        match last_per_epoch.last_mut() {
            Some(prev) if prev.epoch == h.epoch => *prev = h,
            _ => last_per_epoch.push(h),
        }
    }
    for h in last_per_epoch {
        let _ = writeln!(
            s,
            "{:>5} {:>9.2e} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            h.epoch, h.lr, h.inc, h.mim, h.inm, h.total, h.tau
        );
    }
    s
}

/// Text summary of any combination of a loss history, metrics files and an ablation.
pub fn report(history: Option<&Path>, metrics: &[PathBuf], ablation: Option<&Path>) -> Result<String> {
    if history.is_none() && metrics.is_empty() && ablation.is_none() {
        return Err(Error::invalid("report", "give at least one of --history, --metrics, --ablation"));
    }
    let mut s = String::new();
    if let Some(path) = history {
        let h = read_history(path)?;
        let _ = writeln!(s, "loss history ({} steps)", h.len());
        s.push_str(&history_block(&h));
    }
    for path in metrics {
        let title = path.display().to_string();
        let text = std::fs::read_to_string(path)?;
        if let Ok(row) = serde_json::from_str::<PromptRow>(&text) {
            s.push_str(&metrics_block(&format!("{title} (r = {})", row.r), &row.metrics));
        } else {
            let m: MetricsReport = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{title}: {e}")))?;
            s.push_str(&metrics_block(&title, &m));
        }
    }
    if let Some(path) = ablation {
        let rows: Vec<AblationRow> = read_json(path)?;
        s.push_str(&ablation_table(&rows));
    }
    Ok(s)
}
