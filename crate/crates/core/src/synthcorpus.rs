//! Synthetic multi-speaker, multi-language mel corpora with independently
//! planted speaker and language factors.
//!
//! Frame model: `x_t = A_s ⊙ g_l(t) + b_s + ε_t`. `A_s` (diagonal gains in
//! [0.5, 1.5]) and `b_s` are fixed per speaker. `g_l(t)` walks cyclically
//! through the language's bank of five prototype frames, holding each for a
//! language-specific number of frames (3, 5, 7, ...). `ε_t` is i.i.d.
//! Gaussian noise.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{Trial, TrialList};
use crate::features::{read_mel, write_mel, MelSpectrogram};
use crate::rng::stream;

pub const PROTOTYPES_PER_LANGUAGE: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub n_speakers: usize,
    pub n_languages: usize,
    pub utts_per_speaker_per_language: usize,
    pub frames_per_utt: usize,
    pub n_mels: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// Global index of the first speaker. Corpora with disjoint offsets share
    /// language banks but contain different people.
    pub speaker_offset: usize,
    /// Standard deviation of the per-speaker spectral offset `b_s`.
    pub speaker_bias_std: f64,
    /// Standard deviation of language prototype entries.
    pub prototype_std: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_speakers: 20,
            n_languages: 3,
            utts_per_speaker_per_language: 10,
            frames_per_utt: 100,
            n_mels: 40,
            noise_std: 0.05,
            seed: 7,
            speaker_offset: 0,
            speaker_bias_std: 0.5,
            prototype_std: 1.0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("corpus: {m}")));
        if self.n_speakers < 2 {
            return bad("n_speakers must be at least 2");
        }
        if self.n_languages < 2 {
            return bad("n_languages must be at least 2");
        }
        if self.utts_per_speaker_per_language == 0 || self.frames_per_utt == 0 || self.n_mels == 0 {
            return bad("counts must be positive");
        }
        if !(self.noise_std >= 0.0) || !(self.speaker_bias_std >= 0.0) || !(self.prototype_std >= 0.0) {
            return bad("standard deviations must be non-negative");
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n_speakers * self.n_languages * self.utts_per_speaker_per_language
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cycle length (frames per prototype) of language `l`.
    pub fn hold_frames(language: usize) -> usize {
        3 + 2 * language
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub mel: MelSpectrogram,
    pub speaker_id: usize,
    pub language_id: usize,
}

struct SpeakerFactors {
    gain: Vec<f64>,
    bias: Vec<f64>,
}

fn speaker_factors(spec: &CorpusSpec, global: usize) -> SpeakerFactors {
    let mut rng = stream(spec.seed, "speaker", global as u64);
    let gain = (0..spec.n_mels).map(|_| rng.gen_range(0.5..=1.5)).collect();
    let normal = Normal::new(0.0, spec.speaker_bias_std).expect("validated std");
    let bias = (0..spec.n_mels).map(|_| normal.sample(&mut rng)).collect();
    SpeakerFactors { gain, bias }
}

fn language_bank(spec: &CorpusSpec, language: usize) -> Vec<Vec<f64>> {
    let mut rng = stream(spec.seed, "language", language as u64);
    let normal = Normal::new(0.0, spec.prototype_std).expect("validated std");
    (0..PROTOTYPES_PER_LANGUAGE)
        .map(|_| (0..spec.n_mels).map(|_| normal.sample(&mut rng)).collect())
        .collect()
}

pub fn utterance_id(global_speaker: usize, language: usize, index: usize) -> String {
    format!("s{global_speaker:03}_l{language}_u{index:03}")
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<Utterance>> {
    spec.validate()?;
    let speakers: Vec<SpeakerFactors> = (0..spec.n_speakers)
        .map(|s| speaker_factors(spec, spec.speaker_offset + s))
        .collect();
    let banks: Vec<Vec<Vec<f64>>> = (0..spec.n_languages).map(|l| language_bank(spec, l)).collect();
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("validated std");

    let cells: Vec<(usize, usize, usize)> = (0..spec.n_speakers)
        .flat_map(|s| {
            (0..spec.n_languages)
                .flat_map(move |l| (0..spec.utts_per_speaker_per_language).map(move |u| (s, l, u)))
        })
        .collect();

    cells
        .par_iter()
        .map(|&(s, l, u)| {
            let global = spec.speaker_offset + s;
            let mut rng = stream(spec.seed, &format!("utterance/{global}/{l}"), u as u64);
            let (m, t_len) = (spec.n_mels, spec.frames_per_utt);
            let hold = CorpusSpec::hold_frames(l);
            let f = &speakers[s];
            let mut frames = Vec::with_capacity(t_len * m);
            for t in 0..t_len {
                let proto = &banks[l][(t / hold) % PROTOTYPES_PER_LANGUAGE];
                for k in 0..m {
                    let eps = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    frames.push((f.gain[k] * proto[k] + f.bias[k] + eps) as f32);
                }
            }
            Ok(Utterance {
                id: utterance_id(global, l, u),
                mel: MelSpectrogram::from_frames(t_len, m, frames)?,
                speaker_id: s,
                language_id: l,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialKind {
    /// Both sides of every trial share a language.
    Monolingual,
    /// Targets span two languages; non-targets may mix freely.
    CrossLingual,
}

impl TrialKind {
    fn admits(self, a: &Utterance, b: &Utterance, target: bool) -> bool {
        match (self, target) {
            (TrialKind::Monolingual, _) => a.language_id == b.language_id,
            (TrialKind::CrossLingual, true) => a.language_id != b.language_id,
            (TrialKind::CrossLingual, false) => true,
        }
    }
}

/// Samples target and non-target pairs without replacement.
pub fn make_trials(
    corpus: &[Utterance],
    kind: TrialKind,
    n_target: usize,
    n_nontarget: usize,
    seed: u64,
) -> Result<TrialList> {
    let n_spk = corpus
        .iter()
        .map(|u| u.speaker_id)
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    if n_spk < 2 {
        return Err(Error::Input("trial generation needs at least two speakers".into()));
    }
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for i in 0..corpus.len() {
        for j in i + 1..corpus.len() {
            let (a, b) = (&corpus[i], &corpus[j]);
            let same = a.speaker_id == b.speaker_id;
            if kind.admits(a, b, same) {
                if same {
                    targets.push((i, j));
                } else {
                    nontargets.push((i, j));
                }
            }
        }
    }
    let label = match kind {
        TrialKind::Monolingual => "monolingual",
        TrialKind::CrossLingual => "cross-lingual",
    };
    let pick = |mut pool: Vec<(usize, usize)>, n: usize, purpose: &str, what: &'static str| {
        if n > pool.len() {
            return Err(Error::TrialCount {
                kind: what,
                requested: n,
                available: pool.len(),
            });
        }
        pool.shuffle(&mut stream(seed, purpose, 0));
        pool.truncate(n);
        Ok(pool)
    };
    let (tgt_name, non_name) = match kind {
        TrialKind::Monolingual => ("monolingual target", "monolingual non-target"),
        TrialKind::CrossLingual => ("cross-lingual target", "cross-lingual non-target"),
    };
    let targets = pick(targets, n_target, &format!("trials/{label}/target"), tgt_name)?;
    let nontargets = pick(nontargets, n_nontarget, &format!("trials/{label}/nontarget"), non_name)?;
    let trials = targets
        .into_iter()
        .map(|p| (true, p))
        .chain(nontargets.into_iter().map(|p| (false, p)))
        .map(|(is_target, (i, j))| Trial {
            is_target,
            utt_a: corpus[i].id.clone(),
            utt_b: corpus[j].id.clone(),
        })
        .collect();
    Ok(TrialList { trials })
}

pub const MANIFEST_FILE: &str = "manifest.txt";

/// Writes `<dir>/mels/<id>.lspa` per utterance plus `<dir>/manifest.txt`.
pub fn write_corpus(dir: &Path, corpus: &[Utterance]) -> Result<PathBuf> {
    let mel_dir = dir.join("mels");
    std::fs::create_dir_all(&mel_dir).map_err(|e| Error::io(&mel_dir, e))?;
    let mut manifest = String::new();
    for u in corpus {
        let rel = format!("mels/{}.lspa", u.id);
        write_mel(&dir.join(&rel), &u.mel)?;
        writeln!(manifest, "{} {} {} {}", u.id, u.speaker_id, u.language_id, rel).unwrap();
    }
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads a manifest; mel paths are resolved relative to the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<Utterance>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let fmt_err = |line: usize, msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: format!("line {}: {msg}", line + 1),
    };
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(fmt_err(n, "expected `<utt_id> <speaker_id> <language_id> <path>`"));
        }
        let speaker_id = fields[1].parse().map_err(|_| fmt_err(n, "bad speaker_id"))?;
        let language_id = fields[2].parse().map_err(|_| fmt_err(n, "bad language_id"))?;
        let mel_path = Path::new(fields[3]);
        let mel_path = if mel_path.is_absolute() {
            mel_path.to_path_buf()
        } else {
            base.join(mel_path)
        };
        out.push(Utterance {
            id: fields[0].to_string(),
            mel: read_mel(&mel_path)?,
            speaker_id,
            language_id,
        });
    }
    Ok(out)
}

pub fn write_trials(path: &Path, trials: &TrialList) -> Result<()> {
    let mut s = String::new();
    for t in &trials.trials {
        writeln!(s, "{} {} {}", u8::from(t.is_target), t.utt_a, t.utt_b).unwrap();
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_trials(path: &Path) -> Result<TrialList> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut trials = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let is_target = match (f.len(), f.first()) {
            (3, Some(&"1")) => true,
            (3, Some(&"0")) => false,
            _ => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    msg: format!("line {}: expected `<0|1> <utt_a> <utt_b>`", n + 1),
                })
            }
        };
        trials.push(Trial {
            is_target,
            utt_a: f[1].to_string(),
            utt_b: f[2].to_string(),
        });
    }
    Ok(TrialList { trials })
}

/// Index from utterance id to position in `corpus`.
pub fn index_by_id(corpus: &[Utterance]) -> HashMap<&str, usize> {
    corpus.iter().enumerate().map(|(i, u)| (u.id.as_str(), i)).collect()
}
