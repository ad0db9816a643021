//! Subcommands of the `laspa` binary. Each is a thin composition of library
//! operations; results go to stdout, progress to stderr, artifacts to files.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::encoders::{Embedding, EmbeddingKind};
use crate::error::{Error, Result};
use crate::eval::{self, ablation::AblationSettings, EmbeddingCache, ScoreSet};
use crate::features::{mel_spectrogram, read_mel, read_wav, resample, write_mel};
use crate::synthcorpus::{self, generate_corpus, make_trials, read_manifest, read_trials, write_corpus, write_trials};
use crate::tensor::ParamSet;
use crate::training::{self, gradcheck, load_checkpoint, Model, TrainOutputs};

pub const LOCK_FILE: &str = ".laspa.lock";
pub const THREADS_ENV: &str = "LASPA_THREADS";

#[derive(Debug, Parser)]
#[command(name = "laspa", version, about = "Language-agnostic speaker embeddings: corpus, training, evaluation")]
pub struct Cli {
    /// TOML run configuration (`section.key = value`); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set optimizer.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the training corpus, the held-out evaluation corpus and its trial list.
    GenCorpus(GenCorpusArgs),
    /// Train on the generated corpus; writes checkpoints and a metrics CSV.
    Train(TrainArgs),
    /// Score a trial list with a checkpoint; prints EER and minDCF.
    Evaluate(EvaluateArgs),
    /// Train Full, No-Prefix and Speaker-only variants and tabulate their metrics.
    Ablate,
    /// Check every gradient against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Cosine score of two embedding files.
    Score(ScoreArgs),
    /// Speaker embedding of one mel file.
    Embed(EmbedArgs),
    /// Log-mel spectrogram of a mono WAV file.
    Mel(MelArgs),
    /// Print the resolved configuration.
    Config,
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    /// Output directory (default: `paths.corpus_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Continue from this checkpoint; metrics are appended.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Trial list (default: `<paths.corpus_dir>/trials.txt`).
    #[arg(long)]
    pub trials: Option<PathBuf>,
    /// Score file to write (default: `<paths.output_dir>/scores.txt`).
    #[arg(long)]
    pub scores: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Check the built-in tiny configuration instead of `--config`.
    #[arg(long)]
    pub tiny: bool,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    pub a: PathBuf,
    pub b: PathBuf,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub mel: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MelArgs {
    #[arg(long)]
    pub wav: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Exclusive claim on an output directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Input(format!(
                "{} is locked by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Caps rayon's pool at `LASPA_THREADS` when set.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn print_run_header(cfg: &RunConfig) -> Result<()> {
    let model = Model::<f32>::init(&cfg.model())?;
    let total = model.param_count();
    let prefix = model.prefix_param_count();
    println!("config_digest: {}", cfg.digest());
    println!("parameters: {total}");
    println!("prefix_parameters: {prefix}");
    println!("prefix_fraction: {:.6} ({:.3}%)", prefix as f64 / total as f64, 100.0 * prefix as f64 / total as f64);
    Ok(())
}

fn load_corpus(dir: &Path) -> Result<Vec<synthcorpus::Utterance>> {
    let manifest = dir.join(synthcorpus::MANIFEST_FILE);
    if !manifest.exists() {
        return Err(Error::Input(format!("no corpus manifest at {}; run `laspa gen-corpus` first", manifest.display())));
    }
    read_manifest(&manifest)
}

pub fn cmd_gen_corpus(cfg: &RunConfig, args: &GenCorpusArgs) -> Result<()> {
    let mut paths = cfg.paths.clone();
    if let Some(out) = &args.out {
        paths.corpus_dir = out.clone();
    }
    let _lock = DirLock::acquire(&paths.corpus_dir)?;
    let train = generate_corpus(&cfg.corpus)?;
    let held_out = generate_corpus(&cfg.eval_corpus_spec())?;
    let trials = make_trials(&held_out, cfg.eval.trial_kind, cfg.eval.n_target, cfg.eval.n_nontarget, cfg.eval.trial_seed)?;
    let m1 = write_corpus(&paths.train_dir(), &train)?;
    let m2 = write_corpus(&paths.eval_dir(), &held_out)?;
    write_trials(&paths.trials_path(), &trials)?;
    eprintln!("wrote {} training utterances ({}), {} held-out ({})", train.len(), m1.display(), held_out.len(), m2.display());
    println!("train_manifest: {}", m1.display());
    println!("eval_manifest: {}", m2.display());
    println!("trials: {} ({} target)", paths.trials_path().display(), trials.n_targets());
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, args: &TrainArgs) -> Result<()> {
    let out = &cfg.paths.output_dir;
    let _lock = DirLock::acquire(out)?;
    let corpus = load_corpus(&cfg.paths.train_dir())?;
    let model_cfg = cfg.model();
    let state = match &args.resume {
        Some(p) => Some(load_checkpoint(p, &model_cfg)?),
        None => None,
    };
    let resolved = out.join("config.resolved.toml");
    std::fs::write(&resolved, cfg.resolved_dump()).map_err(|e| Error::io(&resolved, e))?;
    let outputs = TrainOutputs { checkpoint_dir: Some(out.clone()), metrics_path: Some(cfg.paths.metrics_path()) };
    let (state, rows) = training::train(&model_cfg, &corpus, state, &outputs)?;
    if let Some(last) = rows.last() {
        println!("final_step: {}", last.step);
        println!("final_total_loss: {}", last.report.total);
    }
    println!("epochs_done: {}", state.epochs_done);
    println!("checkpoint: {}", out.join(training::FINAL_CHECKPOINT).display());
    println!("metrics: {}", cfg.paths.metrics_path().display());
    Ok(())
}

pub fn cmd_evaluate(cfg: &RunConfig, args: &EvaluateArgs) -> Result<()> {
    let state = load_checkpoint(&args.checkpoint, &cfg.model())?;
    let trials = read_trials(&args.trials.clone().unwrap_or_else(|| cfg.paths.trials_path()))?;
    let mut corpus = load_corpus(&cfg.paths.eval_dir())?;
    if cfg.paths.train_dir().join(synthcorpus::MANIFEST_FILE).exists() {
        corpus.extend(load_corpus(&cfg.paths.train_dir())?);
    }
    let mut cache = EmbeddingCache::new(&state, &corpus);
    let scores = eval::trial_scores(&mut cache, &trials)?;
    let set = ScoreSet::from_trials(&trials, &scores)?;
    let out = args.scores.clone().unwrap_or_else(|| cfg.paths.output_dir.join("scores.txt"));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    eval::write_scores(&out, &trials, &scores)?;
    println!("trials: {} ({} target)", trials.len(), trials.n_targets());
    println!("eer_percent: {:.4}", eval::eer(&set)?);
    println!("min_dcf: {:.5}", eval::min_dcf(&set, &cfg.dcf)?);
    println!("scores: {}", out.display());
    Ok(())
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    let out = &cfg.paths.output_dir;
    let _lock = DirLock::acquire(out)?;
    let train = generate_corpus(&cfg.corpus)?;
    let held_out = generate_corpus(&cfg.eval_corpus_spec())?;
    let trials = make_trials(&held_out, cfg.eval.trial_kind, cfg.eval.n_target, cfg.eval.n_nontarget, cfg.eval.trial_seed)?;
    let settings = AblationSettings { dcf: cfg.dcf.clone(), probe: cfg.probe.clone(), probe_seed: cfg.eval.probe_seed };
    let table = eval::run_ablation(&cfg.model(), &train, &held_out, &trials, &settings)?;
    for (name, body) in [("ablation.csv", table.to_csv()), ("ablation.txt", table.to_text())] {
        let p = out.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    print!("{}", table.to_text());
    Ok(())
}

/// Returns whether every tensor passed.
pub fn cmd_gradcheck(cfg: &RunConfig, args: &GradcheckArgs) -> Result<bool> {
    let model_cfg = if args.tiny { gradcheck::tiny_config() } else { cfg.model() };
    let report = training::grad_check(&model_cfg)?;
    for t in &report.tensors {
        println!("{:<44} {:>6} {:.3e} {}", t.name, t.len, t.max_rel_err, if t.passed { "ok" } else { "FAIL" });
    }
    let failed = report.failures().count();
    println!("gradcheck: {} ({} tensors, {} failed, tolerance {:e})", if failed == 0 { "pass" } else { "fail" }, report.tensors.len(), failed, gradcheck::TOLERANCE);
    Ok(failed == 0)
}

pub fn read_embedding(path: &Path) -> Result<Embedding> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let values = text
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::Format { path: path.to_path_buf(), msg: format!("`{t}` is not a number") })
        })
        .collect::<Result<Vec<f64>>>()?;
    if values.is_empty() {
        return Err(Error::Format { path: path.to_path_buf(), msg: "empty embedding".into() });
    }
    Embedding::new(values, EmbeddingKind::Speaker)
}

pub fn write_embedding(path: &Path, e: &Embedding) -> Result<()> {
    let body: String = e.values.iter().map(|v| format!("{v}\n")).collect();
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn cmd_score(args: &ScoreArgs) -> Result<()> {
    let s = eval::cosine_score(&read_embedding(&args.a)?, &read_embedding(&args.b)?)?;
    println!("score: {s}");
    Ok(())
}

pub fn cmd_embed(cfg: &RunConfig, args: &EmbedArgs) -> Result<()> {
    let state = load_checkpoint(&args.checkpoint, &cfg.model())?;
    let e = training::infer_speaker_embedding(&state, &read_mel(&args.mel)?)?;
    write_embedding(&args.out, &e)?;
    println!("embedding: {} ({} dims)", args.out.display(), e.len());
    Ok(())
}

pub fn cmd_mel(cfg: &RunConfig, args: &MelArgs) -> Result<()> {
    let mut wave = read_wav(&args.wav)?;
    if wave.sample_rate != cfg.features.sample_rate_hz {
        wave = resample(&wave, cfg.features.sample_rate_hz)?;
    }
    let mel = mel_spectrogram(&wave, &cfg.features)?;
    write_mel(&args.out, &mel)?;
    println!("mel: {} ({} frames x {} bands)", args.out.display(), mel.n_frames(), mel.n_mels());
    Ok(())
}

/// Runs a parsed command line; `Ok(false)` signals a failed check.
pub fn run(cli: &Cli) -> Result<bool> {
    init_threads()?;
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    print_run_header(&cfg)?;
    match &cli.command {
        Command::GenCorpus(a) => cmd_gen_corpus(&cfg, a)?,
        Command::Train(a) => cmd_train(&cfg, a)?,
        Command::Evaluate(a) => cmd_evaluate(&cfg, a)?,
        Command::Ablate => cmd_ablate(&cfg)?,
        Command::Gradcheck(a) => return cmd_gradcheck(&cfg, a),
        Command::Score(a) => cmd_score(a)?,
        Command::Embed(a) => cmd_embed(&cfg, a)?,
        Command::Mel(a) => cmd_mel(&cfg, a)?,
        Command::Config => print!("{}", cfg.resolved_dump()),
    }
    Ok(true)
}
