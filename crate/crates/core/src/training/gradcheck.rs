//! Finite-difference verification of every trainable tensor's gradient.

use rand::Rng;

use super::{loss_and_grad, Batch, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::synthcorpus::{generate_corpus, CorpusSpec, Utterance};
use crate::tensor::ParamSet;

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const MAX_EMBED_DIM: usize = 16;
pub const MAX_MELS: usize = 8;
pub const FRAMES: usize = 8;
const BATCH: usize = 6;
/// Large enough that attention-logit gradients stand well above
/// finite-difference roundoff, small enough that no ReLU input sits within
/// `FD_STEP` of its kink.
const FIXTURE_GAIN: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub len: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &TensorCheck> {
        self.tensors.iter().filter(|t| !t.passed)
    }
}

/// Element error relative to the larger of the two values, floored at a
/// thousandth of the tensor's largest numerical gradient.
fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-8);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn check_tiny(cfg: &ModelConfig) -> Result<()> {
    if cfg.encoder.embed_dim > MAX_EMBED_DIM {
        return Err(Error::Config(format!(
            "grad_check needs encoder.embed_dim <= {MAX_EMBED_DIM}, got {}",
            cfg.encoder.embed_dim
        )));
    }
    if cfg.encoder.n_mels > MAX_MELS {
        return Err(Error::Config(format!("grad_check needs encoder.n_mels <= {MAX_MELS}, got {}", cfg.encoder.n_mels)));
    }
    Ok(())
}

/// The fixed batch and randomized fp64 model used by the check.
pub fn fixture(cfg: &ModelConfig) -> Result<(Model<f64>, Batch<f64>)> {
    cfg.validate()?;
    check_tiny(cfg)?;
    let corpus = generate_corpus(&CorpusSpec {
        n_speakers: cfg.n_speakers,
        n_languages: cfg.n_languages,
        utts_per_speaker_per_language: 1,
        frames_per_utt: FRAMES,
        n_mels: cfg.encoder.n_mels,
        seed: cfg.seed,
        ..CorpusSpec::default()
    })?;
    // spread the batch over speakers and languages
    let step = (corpus.len() / BATCH).max(1);
    let utts: Vec<&Utterance> = corpus.iter().step_by(step).chain(corpus.iter()).take(BATCH).collect();
    let batch = Batch::<f32>::from_utterances(&utts, cfg)?.cast::<f64>();

    // every tensor random, including those initialised to zero
    let mut model = Model::<f64>::init(cfg)?;
    let mut rng = stream(cfg.seed, "gradcheck", 0);
    for (_, t) in model.named_mut() {
        let fan_in = if t.shape().len() >= 2 { t.shape()[1..].iter().product() } else { 4 };
        let bound = FIXTURE_GAIN / (fan_in as f64).sqrt();
        t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
    }
    Ok((model, batch))
}

fn total(model: &Model<f64>, cfg: &ModelConfig, batch: &Batch<f64>) -> Result<f64> {
    let (c, _) = loss_and_grad(model, cfg, batch, None, false)?;
    let w = &cfg.losses;
    Ok(w.w_mse * c.mse + w.w_aam * c.aam + w.w_mapc * c.mapc + w.w_nll * c.nll)
}

/// Compares `analytic` gradients with central differences for every tensor.
pub fn grad_check_with<G>(cfg: &ModelConfig, analytic: G) -> Result<GradCheckReport>
where
    G: Fn(&Model<f64>, &ModelConfig, &Batch<f64>) -> Result<Model<f64>>,
{
    let (model, batch) = fixture(cfg)?;
    let grads = analytic(&model, cfg, &batch)?;
    let analytic_by_tensor: Vec<Vec<f64>> = grads.named().into_iter().map(|(_, t)| t.data().to_vec()).collect();
    let names: Vec<(String, usize)> = model.named().into_iter().map(|(n, t)| (n, t.len())).collect();
    let mut tensors = Vec::with_capacity(names.len());
    let mut probe = model.clone();
    for (ti, (name, len)) in names.into_iter().enumerate() {
        let mut numeric = vec![0.0; len];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = model.named()[ti].1.data()[i];
            probe.named_mut()[ti].1.data_mut()[i] = orig + FD_STEP;
            let up = total(&probe, cfg, &batch)?;
            probe.named_mut()[ti].1.data_mut()[i] = orig - FD_STEP;
            let down = total(&probe, cfg, &batch)?;
            probe.named_mut()[ti].1.data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        let err = max_relative_error(&analytic_by_tensor[ti], &numeric);
        tensors.push(TensorCheck { name, len, max_rel_err: err, passed: err < TOLERANCE });
    }
    Ok(GradCheckReport { tensors })
}

/// Checks the model's own backward pass.
pub fn grad_check(cfg: &ModelConfig) -> Result<GradCheckReport> {
    grad_check_with(cfg, |m, c, b| {
        let (_, g) = loss_and_grad(m, c, b, None, true)?;
        Ok(g.expect("gradients requested"))
    })
}

/// Configuration small enough for an exhaustive check.
pub fn tiny_config() -> ModelConfig {
    use crate::decoder::DecoderConfig;
    use crate::encoders::EncoderConfig;
    use crate::fusion::AttentionConfig;
    ModelConfig {
        seed: 11,
        n_speakers: 3,
        n_languages: 2,
        encoder: EncoderConfig { n_mels: 8, embed_dim: 8, channels: vec![3, 4], ..EncoderConfig::default() },
        attention: AttentionConfig { d_model: 8, n_heads: 2, prefix_len: 2 },
        decoder: DecoderConfig { hidden: 6, ..DecoderConfig::default() },
        ..ModelConfig::default()
    }
}
