//! Verification scoring and metrics: cosine scoring, EER, minDCF, DET
//! points, the language probe, and the ablation runner.

pub mod ablation;
pub mod probe;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use serde::{Deserialize, Serialize};

use crate::encoders::Embedding;
use crate::error::{Error, Result};
use crate::synthcorpus::Utterance;
use crate::training::{infer_speaker_embedding, ModelState};

pub use ablation::{run_ablation, AblationRow, AblationSettings, AblationTable};
pub use probe::{slr_probe, ProbeConfig};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Trial {
    pub is_target: bool,
    pub utt_a: String,
    pub utt_b: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn n_targets(&self) -> usize {
        self.trials.iter().filter(|t| t.is_target).count()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSet {
    pub target_scores: Vec<f64>,
    pub nontarget_scores: Vec<f64>,
}

impl ScoreSet {
    pub fn new(target_scores: Vec<f64>, nontarget_scores: Vec<f64>) -> Self {
        ScoreSet { target_scores, nontarget_scores }
    }

    /// Partition per-trial scores by the trial labels.
    pub fn from_trials(trials: &TrialList, scores: &[f64]) -> Result<Self> {
        if trials.len() != scores.len() {
            return Err(Error::shape("score count", trials.len(), scores.len()));
        }
        let mut set = ScoreSet::default();
        for (t, &s) in trials.trials.iter().zip(scores) {
            if t.is_target {
                set.target_scores.push(s);
            } else {
                set.nontarget_scores.push(s);
            }
        }
        Ok(set)
    }

    fn validate(&self) -> Result<()> {
        if self.target_scores.is_empty() {
            return Err(Error::Input("score set has no target scores".into()));
        }
        if self.nontarget_scores.is_empty() {
            return Err(Error::Input("score set has no non-target scores".into()));
        }
        if !self.target_scores.iter().chain(&self.nontarget_scores).all(|s| s.is_finite()) {
            return Err(Error::NonFinite("trial score".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DcfConfig {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfConfig {
    fn default() -> Self {
        DcfConfig { p_target: 0.05, c_miss: 1.0, c_fa: 1.0 }
    }
}

impl DcfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(Error::Config(format!("dcf.p_target must lie in (0, 1), got {}", self.p_target)));
        }
        if !(self.c_miss > 0.0 && self.c_fa > 0.0) {
            return Err(Error::Config("dcf costs must be positive".into()));
        }
        Ok(())
    }
}

pub fn cosine_slice(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine operands", a.len(), b.len()));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return Err(Error::Input("cosine of a near-zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub fn cosine_score(e1: &Embedding, e2: &Embedding) -> Result<f64> {
    cosine_slice(&e1.values, &e2.values)
}

/// Speaker embeddings computed on demand, each utterance at most once.
pub struct EmbeddingCache<'a> {
    state: &'a ModelState,
    corpus: &'a [Utterance],
    index: HashMap<&'a str, usize>,
    cache: HashMap<String, Embedding>,
}

impl<'a> EmbeddingCache<'a> {
    pub fn new(state: &'a ModelState, corpus: &'a [Utterance]) -> Self {
        let index = corpus.iter().enumerate().map(|(i, u)| (u.id.as_str(), i)).collect();
        EmbeddingCache { state, corpus, index, cache: HashMap::new() }
    }

    /// Embeds every not-yet-cached id in `ids`.
    pub fn ensure<'b>(&mut self, ids: impl IntoIterator<Item = &'b str>) -> Result<()> {
        let mut missing: Vec<usize> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for id in ids {
            if self.cache.contains_key(id) || !seen.insert(id.to_string()) {
                continue;
            }
            let &i = self.index.get(id).ok_or_else(|| Error::UnknownUtterance(id.to_string()))?;
            missing.push(i);
        }
        let state = self.state;
        let corpus = self.corpus;
        let embedded: Vec<Embedding> = missing
            .par_iter()
            .map(|&i| infer_speaker_embedding(state, &corpus[i].mel))
            .collect::<Result<_>>()?;
        for (i, e) in missing.into_iter().zip(embedded) {
            self.cache.insert(corpus[i].id.clone(), e);
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&Embedding> {
        self.cache.get(id).ok_or_else(|| Error::UnknownUtterance(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.cache.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cache.is_empty()
    }
}

/// Cosine score of every trial, in trial order.
pub fn trial_scores(cache: &mut EmbeddingCache, trials: &TrialList) -> Result<Vec<f64>> {
    cache.ensure(trials.trials.iter().flat_map(|t| [t.utt_a.as_str(), t.utt_b.as_str()]))?;
    trials
        .trials
        .iter()
        .map(|t| cosine_score(cache.get(&t.utt_a)?, cache.get(&t.utt_b)?))
        .collect()
}

/// Embeds each distinct utterance once and partitions the cosine scores.
pub fn score_trials(state: &ModelState, corpus: &[Utterance], trials: &TrialList) -> Result<ScoreSet> {
    let mut cache = EmbeddingCache::new(state, corpus);
    ScoreSet::from_trials(trials, &trial_scores(&mut cache, trials)?)
}

/// Reference scorer that re-embeds both sides of every trial.
pub fn score_trials_uncached(state: &ModelState, corpus: &[Utterance], trials: &TrialList) -> Result<ScoreSet> {
    let index: HashMap<&str, &Utterance> = corpus.iter().map(|u| (u.id.as_str(), u)).collect();
    let lookup = |id: &str| index.get(id).copied().ok_or_else(|| Error::UnknownUtterance(id.to_string()));
    let scores: Vec<f64> = trials
        .trials
        .iter()
        .map(|t| {
            let a = infer_speaker_embedding(state, &lookup(&t.utt_a)?.mel)?;
            let b = infer_speaker_embedding(state, &lookup(&t.utt_b)?.mel)?;
            cosine_score(&a, &b)
        })
        .collect::<Result<_>>()?;
    ScoreSet::from_trials(trials, &scores)
}

/// One operating point of the threshold sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// FAR/FRR at every distinct score and at +∞ (reject everything), in
/// increasing threshold order.
pub fn det_points(scores: &ScoreSet) -> Result<Vec<DetPoint>> {
    scores.validate()?;
    let mut tar = scores.target_scores.clone();
    let mut non = scores.nontarget_scores.clone();
    tar.sort_by(f64::total_cmp);
    non.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = tar.iter().chain(&non).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    let (nt, nn) = (tar.len() as f64, non.len() as f64);
    Ok(thresholds
        .into_iter()
        .map(|t| {
            let rejected_tar = tar.partition_point(|&s| s < t);
            let rejected_non = non.partition_point(|&s| s < t);
            DetPoint {
                threshold: t,
                far: (non.len() - rejected_non) as f64 / nn,
                frr: rejected_tar as f64 / nt,
            }
        })
        .collect())
}

/// Equal error rate in percent, interpolated at the FAR/FRR crossing.
pub fn eer(scores: &ScoreSet) -> Result<f64> {
    let pts = det_points(scores)?;
    let k = pts
        .iter()
        .position(|p| p.far - p.frr <= 0.0)
        .expect("the +inf threshold always has FAR - FRR = -1");
    let p = pts[k];
    let d = p.far - p.frr;
    if d == 0.0 || k == 0 {
        return Ok(100.0 * p.far);
    }
    let q = pts[k - 1];
    let dq = q.far - q.frr;
    let alpha = dq / (dq - d);
    Ok(100.0 * (q.far + alpha * (p.far - q.far)))
}

/// Normalized minimum detection cost.
pub fn min_dcf(scores: &ScoreSet, cfg: &DcfConfig) -> Result<f64> {
    cfg.validate()?;
    let pts = det_points(scores)?;
    let norm = (cfg.c_miss * cfg.p_target).min(cfg.c_fa * (1.0 - cfg.p_target));
    let best = pts
        .iter()
        .map(|p| cfg.c_miss * cfg.p_target * p.frr + cfg.c_fa * (1.0 - cfg.p_target) * p.far)
        .fold(f64::INFINITY, f64::min);
    Ok(best / norm)
}

pub fn write_scores(path: &Path, trials: &TrialList, scores: &[f64]) -> Result<()> {
    if trials.len() != scores.len() {
        return Err(Error::shape("score count", trials.len(), scores.len()));
    }
    let mut out = String::new();
    for (t, s) in trials.trials.iter().zip(scores) {
        writeln!(out, "{} {} {:.9} {}", t.utt_a, t.utt_b, s, t.is_target as u8).expect("string write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<(TrialList, Vec<f64>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut trials = TrialList::default();
    let mut scores = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |msg: &str| Error::Format { path: path.to_path_buf(), msg: format!("line {}: {msg}", n + 1) };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(bad("expected `<utt_a> <utt_b> <score> <0|1>`"));
        }
        let score: f64 = f[2].parse().map_err(|_| bad("bad score"))?;
        let is_target = match f[3] {
            "0" => false,
            "1" => true,
            _ => return Err(bad("target flag must be 0 or 1")),
        };
        trials.trials.push(Trial { is_target, utt_a: f[0].into(), utt_b: f[1].into() });
        scores.push(score);
    }
    Ok((trials, scores))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(t: &[f64], n: &[f64]) -> ScoreSet {
        ScoreSet::new(t.to_vec(), n.to_vec())
    }

    #[test]
    fn worked_eer_examples() {
        assert_eq!(eer(&set(&[0.9, 0.8], &[0.2, 0.1])).unwrap(), 0.0);
        let e = eer(&set(&[0.9, 0.8, 0.4], &[0.5, 0.3, 0.2])).unwrap();
        assert!((e - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(eer(&set(&[0.1], &[0.9])).unwrap(), 100.0);
    }

    #[test]
    fn interpolated_crossing() {
        // thresholds 0.1, 0.2, 0.3, 0.4, inf; FAR-FRR: 1, 0.5, 0, ...
        let e = eer(&set(&[0.2, 0.4], &[0.1, 0.3])).unwrap();
        assert!((e - 50.0).abs() < 1e-12);
        // crossing strictly between thresholds
        let e = eer(&set(&[0.5, 0.6, 0.9], &[0.1, 0.55])).unwrap();
        assert!(e > 0.0 && e < 50.0);
    }

    #[test]
    fn dcf_reference_cases() {
        let cfg = DcfConfig::default();
        assert_eq!(min_dcf(&set(&[0.9, 0.8], &[0.2, 0.1]), &cfg).unwrap(), 0.0);
        assert!((min_dcf(&set(&[0.5], &[0.5]), &cfg).unwrap() - 1.0).abs() < 1e-12);
        assert!(min_dcf(&set(&[], &[0.5]), &cfg).is_err());
        assert!(min_dcf(&set(&[0.5], &[f64::NAN]), &cfg).is_err());
        let bad = DcfConfig { p_target: 1.0, ..cfg };
        assert!(min_dcf(&set(&[0.5], &[0.2]), &bad).is_err());
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine_slice(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_slice(&[1.0, 2.0], &[-1.0, -2.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine_slice(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(cosine_slice(&[0.0, 0.0], &[0.0, 1.0]).is_err());
        assert!(cosine_slice(&[1.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn partition_and_score_file_round_trip() {
        let trials = TrialList {
            trials: vec![
                Trial { is_target: true, utt_a: "a".into(), utt_b: "b".into() },
                Trial { is_target: false, utt_a: "a".into(), utt_b: "c".into() },
                Trial { is_target: true, utt_a: "a".into(), utt_b: "b".into() },
            ],
        };
        let scores = [0.5, -0.25, 0.5];
        let s = ScoreSet::from_trials(&trials, &scores).unwrap();
        assert_eq!(s.target_scores, vec![0.5, 0.5]);
        assert_eq!(s.nontarget_scores, vec![-0.25]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scores.txt");
        write_scores(&p, &trials, &scores).unwrap();
        let (t2, s2) = read_scores(&p).unwrap();
        assert_eq!(t2, trials);
        assert_eq!(s2, scores);
    }
}
