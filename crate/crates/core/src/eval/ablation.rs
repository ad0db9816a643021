//! Three-variant ablation: Full, No-Prefix and Speaker-only models trained
//! from the same seed and scored on the same trials.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{eer, min_dcf, probe::slr_probe, trial_scores, DcfConfig, EmbeddingCache, ProbeConfig, ScoreSet, TrialList};
use crate::error::Result;
use crate::synthcorpus::Utterance;
use crate::training::{train, ModelConfig, ModelState, TrainOutputs, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    /// Percent.
    pub eer: f64,
    pub min_dcf: f64,
    /// Held-out language-probe accuracy on speaker embeddings, percent.
    pub slr: f64,
    /// Mean cosine over same-speaker cross-lingual pairs.
    pub target_cosine: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<14} {:>8} {:>8} {:>8} {:>8}\n", "variant", "EER%", "minDCF", "SLR%", "cos_tgt");
        for r in &self.rows {
            writeln!(
                s,
                "{:<14} {:>8.3} {:>8.4} {:>8.2} {:>8.4}",
                r.variant.label(),
                r.eer,
                r.min_dcf,
                r.slr,
                r.target_cosine
            )
            .expect("string write");
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,eer,min_dcf,slr,target_cosine\n");
        for r in &self.rows {
            writeln!(s, "{},{},{},{},{}", r.variant.label(), r.eer, r.min_dcf, r.slr, r.target_cosine).expect("string write");
        }
        s
    }
}

#[derive(Clone, Debug, Default)]
pub struct AblationSettings {
    pub dcf: DcfConfig,
    pub probe: ProbeConfig,
    pub probe_seed: u64,
}

/// Scores one trained (or initialized) model.
pub fn evaluate_variant(
    variant: Variant,
    state: &ModelState,
    eval_corpus: &[Utterance],
    trials: &TrialList,
    settings: &AblationSettings,
) -> Result<AblationRow> {
    let mut cache = EmbeddingCache::new(state, eval_corpus);
    let scores = ScoreSet::from_trials(trials, &trial_scores(&mut cache, trials)?)?;
    let targets = &scores.target_scores;
    cache.ensure(eval_corpus.iter().map(|u| u.id.as_str()))?;
    let embeddings: Vec<Vec<f64>> = eval_corpus
        .iter()
        .map(|u| cache.get(&u.id).map(|e| e.values.clone()))
        .collect::<Result<_>>()?;
    let languages: Vec<usize> = eval_corpus.iter().map(|u| u.language_id).collect();
    let n_languages = languages.iter().max().map_or(0, |m| m + 1);
    Ok(AblationRow {
        variant,
        eer: eer(&scores)?,
        min_dcf: min_dcf(&scores, &settings.dcf)?,
        slr: slr_probe(&embeddings, &languages, n_languages, settings.probe_seed, &settings.probe)?,
        target_cosine: targets.iter().sum::<f64>() / targets.len() as f64,
    })
}

/// Trains each variant on `train_corpus` and evaluates it on `trials` drawn
/// from `eval_corpus`. Variants run sequentially.
pub fn run_ablation(
    base: &ModelConfig,
    train_corpus: &[Utterance],
    eval_corpus: &[Utterance],
    trials: &TrialList,
    settings: &AblationSettings,
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(3);
    for v in Variant::ALL {
        let cfg = v.apply(base);
        let (state, _) = train(&cfg, train_corpus, None, &TrainOutputs::default())?;
        rows.push(evaluate_variant(v, &state, eval_corpus, trials, settings)?);
    }
    Ok(AblationTable { rows })
}
