//! Run configuration: one TOML file of `section.key = value` entries,
//! optional `--set section.key=value` overrides, strict key checking and a
//! flat resolved dump whose SHA-256 identifies the run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::decoder::DecoderConfig;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::{DcfConfig, ProbeConfig};
use crate::features::FeatureConfig;
use crate::fusion::AttentionConfig;
use crate::losses::LossConfig;
use crate::synthcorpus::{CorpusSpec, TrialKind};
use crate::training::{ModelConfig, OptimizerConfig};

/// Held-out evaluation set: new speakers drawn from the same generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_speakers: usize,
    pub utts_per_speaker_per_language: usize,
    pub corpus_seed: u64,
    pub trial_kind: TrialKind,
    pub n_target: usize,
    pub n_nontarget: usize,
    pub trial_seed: u64,
    pub probe_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_speakers: 20,
            utts_per_speaker_per_language: 4,
            corpus_seed: 1007,
            trial_kind: TrialKind::CrossLingual,
            n_target: 600,
            n_nontarget: 2400,
            trial_seed: 5,
            probe_seed: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub corpus_dir: PathBuf,
    pub output_dir: PathBuf,
    /// Relative paths resolve against `output_dir`.
    pub metrics: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            corpus_dir: "run/corpus".into(),
            output_dir: "run/train".into(),
            metrics: "metrics.csv".into(),
        }
    }
}

impl PathsConfig {
    pub fn metrics_path(&self) -> PathBuf {
        self.output_dir.join(&self.metrics)
    }

    pub fn train_dir(&self) -> PathBuf {
        self.corpus_dir.join("train")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.corpus_dir.join("eval")
    }

    pub fn trials_path(&self) -> PathBuf {
        self.corpus_dir.join("trials.txt")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Model initialization and batch shuffling.
    pub seed: u64,
    pub features: FeatureConfig,
    pub corpus: CorpusSpec,
    pub encoder: EncoderConfig,
    pub attention: AttentionConfig,
    pub decoder: DecoderConfig,
    pub losses: LossConfig,
    pub optimizer: OptimizerConfig,
    pub dcf: DcfConfig,
    pub probe: ProbeConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            features: FeatureConfig::default(),
            corpus: CorpusSpec::default(),
            encoder: EncoderConfig::default(),
            attention: AttentionConfig::default(),
            decoder: DecoderConfig::default(),
            losses: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            dcf: DcfConfig::default(),
            probe: ProbeConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

fn defaults_table() -> Table {
    Table::try_from(RunConfig::default()).expect("default config serializes")
}

/// Rejects any key absent from the default layout, naming its full path.
fn check_keys(given: &Table, reference: &Table, prefix: &str) -> Result<()> {
    for (k, v) in given {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (reference.get(k), v) {
            (None, _) => return Err(Error::Config(format!("unknown config key `{path}`"))),
            (Some(Value::Table(r)), Value::Table(g)) => check_keys(g, r, &path)?,
            (Some(Value::Table(_)), _) => return Err(Error::Config(format!("config key `{path}` is a section, not a value"))),
            (Some(_), Value::Table(_)) => return Err(Error::Config(format!("config key `{path}` is a value, not a section"))),
            _ => {}
        }
    }
    Ok(())
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty override key `{key}`")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(Error::Config(format!("config key `{key}`: `{p}` is a value, not a section"))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn type_error(e: toml::de::Error) -> Error {
    Error::Config(e.message().trim().to_string())
}

impl RunConfig {
    /// Parses config text and applies `key=value` overrides in order.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string().trim().to_string()))?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not of the form key=value")))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        check_keys(&table, &defaults_table(), "")?;
        let cfg: RunConfig = Value::Table(table).try_into().map_err(type_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.corpus.validate()?;
        self.dcf.validate()?;
        if self.encoder.n_mels != self.corpus.n_mels {
            return Err(Error::Config(format!(
                "encoder.n_mels ({}) must equal corpus.n_mels ({})",
                self.encoder.n_mels, self.corpus.n_mels
            )));
        }
        if self.eval.n_speakers < 2 {
            return Err(Error::Config("eval.n_speakers must be at least 2".into()));
        }
        self.model().validate()
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            seed: self.seed,
            n_speakers: self.corpus.n_speakers,
            n_languages: self.corpus.n_languages,
            speaker_only: false,
            encoder: self.encoder.clone(),
            attention: self.attention.clone(),
            decoder: self.decoder.clone(),
            losses: self.losses.clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    /// Held-out speakers numbered after the training speakers.
    pub fn eval_corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            n_speakers: self.eval.n_speakers,
            utts_per_speaker_per_language: self.eval.utts_per_speaker_per_language,
            seed: self.eval.corpus_seed,
            speaker_offset: self.corpus.speaker_offset + self.corpus.n_speakers,
            ..self.corpus.clone()
        }
    }

    /// Every key with its resolved value, one `key = value` line each.
    pub fn resolved_dump(&self) -> String {
        fn walk(t: &Table, prefix: &str, out: &mut String) {
            for (k, v) in t {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match v {
                    Value::Table(inner) => walk(inner, &path, out),
                    other => {
                        out.push_str(&format!("{path} = {other}\n"));
                    }
                }
            }
        }
        let table = Table::try_from(self).expect("config serializes");
        let mut out = String::new();
        walk(&table, "", &mut out);
        out
    }

    pub fn digest(&self) -> String {
        Sha256::digest(self.resolved_dump().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::from_toml_str("", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn dotted_keys_and_overrides() {
        let cfg = RunConfig::from_toml_str(
            "optimizer.learning_rate = 0.01\ncorpus.noise_std = 0.1\n",
            &["optimizer.epochs=3".into(), "decoder.cell=gru".into(), "paths.output_dir = out/x".into()],
        )
        .unwrap();
        assert_eq!(cfg.optimizer.learning_rate, 0.01);
        assert_eq!(cfg.corpus.noise_std, 0.1);
        assert_eq!(cfg.optimizer.epochs, 3);
        assert_eq!(cfg.decoder.cell, crate::decoder::CellKind::Gru);
        assert_eq!(cfg.paths.output_dir, PathBuf::from("out/x"));
    }

    #[test]
    fn unknown_keys_are_named() {
        let e = RunConfig::from_toml_str("optimizer.learning_rat = 0.1", &[]).unwrap_err();
        assert!(e.to_string().contains("optimizer.learning_rat"), "{e}");
        let e = RunConfig::from_toml_str("", &["encoder.depth=3".into()]).unwrap_err();
        assert!(e.to_string().contains("encoder.depth"), "{e}");
        let e = RunConfig::from_toml_str("bogus = 1", &[]).unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
        assert!(RunConfig::from_toml_str("optimizer = 3", &[]).is_err());
        assert!(RunConfig::from_toml_str("optimizer.epochs = \"many\"", &[]).is_err());
    }

    #[test]
    fn cross_section_consistency() {
        assert!(RunConfig::from_toml_str("encoder.n_mels = 20", &[]).is_err());
        assert!(RunConfig::from_toml_str("encoder.embed_dim = 32", &[]).is_err());
        assert!(RunConfig::from_toml_str("encoder.embed_dim = 32\nattention.d_model = 32", &[]).is_ok());
    }

    #[test]
    fn dump_round_trips_and_digest_tracks_values() {
        let cfg = RunConfig::from_toml_str("", &["optimizer.epochs=4".into()]).unwrap();
        let dump = cfg.resolved_dump();
        assert!(dump.contains("optimizer.epochs = 4\n"));
        assert!(dump.contains("losses.aam_margin = 0.2\n"));
        assert_eq!(RunConfig::from_toml_str(&dump, &[]).unwrap(), cfg);
        assert_ne!(cfg.digest(), RunConfig::default().digest());
        assert_eq!(cfg.digest(), RunConfig::from_toml_str(&dump, &[]).unwrap().digest());
    }
}
