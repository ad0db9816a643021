//! Joint optimization of both encoders, the fusion tuners, the decoder and the
//! two classifier heads; checkpointing and gradient verification.

pub mod checkpoint;
pub mod gradcheck;

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::{self, DecoderConfig, DecoderParams};
use crate::encoders::{self, Embedding, EmbeddingKind, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::features::MelSpectrogram;
use crate::fusion::{self, AttentionConfig, FusionParams};
use crate::losses::{self, ClassifierHead, LossConfig, LossReport};
use crate::real::Real;
use crate::rng::stream;
use crate::synthcorpus::Utterance;
use crate::tensor::{join, ParamSet, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{grad_check, grad_check_with, GradCheckReport, TensorCheck};

pub const METRICS_HEADER: &str = "step,epoch,l_mse,l_aam,l_mapc,l_nll,total";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Write a checkpoint after every `checkpoint_every` epochs (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-3,
            weight_decay: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 64,
            epochs: 30,
            checkpoint_every: 10,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "optimizer.learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("optimizer.weight_decay must be non-negative".into()));
        }
        for (k, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("optimizer.{k} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("optimizer.epsilon must be positive".into()));
        }
        if self.batch_size < 4 {
            return Err(Error::Config(format!("optimizer.batch_size must be at least 4, got {}", self.batch_size)));
        }
        Ok(())
    }
}

/// Everything that shapes the model and its optimization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub seed: u64,
    pub n_speakers: usize,
    pub n_languages: usize,
    /// Speaker encoder and AAM head only.
    pub speaker_only: bool,
    pub encoder: EncoderConfig,
    pub attention: AttentionConfig,
    pub decoder: DecoderConfig,
    pub losses: LossConfig,
    pub optimizer: OptimizerConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            seed: 7,
            n_speakers: 20,
            n_languages: 3,
            speaker_only: false,
            encoder: EncoderConfig::default(),
            attention: AttentionConfig::default(),
            decoder: DecoderConfig::default(),
            losses: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.attention.validate()?;
        self.losses.validate()?;
        self.optimizer.validate()?;
        if self.attention.d_model != self.encoder.embed_dim {
            return Err(Error::Config(format!(
                "attention.d_model ({}) must equal encoder.embed_dim ({})",
                self.attention.d_model, self.encoder.embed_dim
            )));
        }
        if self.n_speakers < 2 || self.n_languages < 2 {
            return Err(Error::Config("need at least 2 speakers and 2 languages".into()));
        }
        if self.decoder.hidden == 0 {
            return Err(Error::Config("decoder.hidden must be positive".into()));
        }
        Ok(())
    }
}

/// Ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoPrefix,
    SpeakerOnly,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoPrefix, Variant::SpeakerOnly];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "Full",
            Variant::NoPrefix => "No-Prefix",
            Variant::SpeakerOnly => "Speaker-only",
        }
    }

    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoPrefix => c.attention.prefix_len = 0,
            Variant::SpeakerOnly => c.speaker_only = true,
        }
        c
    }
}

/// All trainable tensors. Components absent from a variant are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<F> {
    pub spk_encoder: EncoderParams<F>,
    pub lng_encoder: Option<EncoderParams<F>>,
    pub fusion: Option<FusionParams<F>>,
    pub decoder: Option<DecoderParams<F>>,
    pub spk_head: ClassifierHead<F>,
    pub lng_head: Option<ClassifierHead<F>>,
}

impl<F: Real> ParamSet<F> for Model<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<F>)>) {
        self.spk_encoder.collect(&join(prefix, "spk_encoder"), out);
        if let Some(e) = &self.lng_encoder {
            e.collect(&join(prefix, "lng_encoder"), out);
        }
        if let Some(f) = &self.fusion {
            f.collect(&join(prefix, "fusion"), out);
        }
        if let Some(d) = &self.decoder {
            d.collect(&join(prefix, "decoder"), out);
        }
        self.spk_head.collect(&join(prefix, "spk_head"), out);
        if let Some(h) = &self.lng_head {
            h.collect(&join(prefix, "lng_head"), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<F>)>) {
        self.spk_encoder.collect_mut(&join(prefix, "spk_encoder"), out);
        if let Some(e) = &mut self.lng_encoder {
            e.collect_mut(&join(prefix, "lng_encoder"), out);
        }
        if let Some(f) = &mut self.fusion {
            f.collect_mut(&join(prefix, "fusion"), out);
        }
        if let Some(d) = &mut self.decoder {
            d.collect_mut(&join(prefix, "decoder"), out);
        }
        self.spk_head.collect_mut(&join(prefix, "spk_head"), out);
        if let Some(h) = &mut self.lng_head {
            h.collect_mut(&join(prefix, "lng_head"), out);
        }
    }
}

impl<F: Real> Model<F> {
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let j = cfg.encoder.embed_dim;
        let s = cfg.seed;
        let spk_encoder = EncoderParams::init(&cfg.encoder, &mut stream(s, "init/spk_encoder", 0))?;
        let spk_head = ClassifierHead::init(cfg.n_speakers, j, false, &mut stream(s, "init/spk_head", 0))?;
        if cfg.speaker_only {
            return Ok(Model {
                spk_encoder,
                lng_encoder: None,
                fusion: None,
                decoder: None,
                spk_head,
                lng_head: None,
            });
        }
        Ok(Model {
            spk_encoder,
            lng_encoder: Some(EncoderParams::init(&cfg.encoder, &mut stream(s, "init/lng_encoder", 0))?),
            fusion: Some(FusionParams::init(&cfg.attention, &mut stream(s, "init/fusion", 0))?),
            decoder: Some(DecoderParams::init(
                &cfg.decoder,
                j,
                cfg.encoder.n_mels,
                &mut stream(s, "init/decoder", 0),
            )?),
            spk_head,
            lng_head: Some(ClassifierHead::init(cfg.n_languages, j, true, &mut stream(s, "init/lng_head", 0))?),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero_grad();
        z
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            spk_encoder: self.spk_encoder.cast(),
            lng_encoder: self.lng_encoder.as_ref().map(|e| e.cast()),
            fusion: self.fusion.as_ref().map(|f| f.cast()),
            decoder: self.decoder.as_ref().map(|d| d.cast()),
            spk_head: self.spk_head.cast(),
            lng_head: self.lng_head.as_ref().map(|h| h.cast()),
        }
    }

    pub fn prefix_param_count(&self) -> usize {
        self.fusion.as_ref().map_or(0, |f| f.prefix_param_count())
    }
}

/// Per-component forward-call counts (one per utterance embedded or decoded).
#[derive(Debug, Default)]
pub struct CallCounters {
    pub spk_encoder: AtomicU64,
    pub lng_encoder: AtomicU64,
    pub fusion: AtomicU64,
    pub decoder: AtomicU64,
}

impl CallCounters {
    fn bump(c: &AtomicU64, n: usize) {
        c.fetch_add(n as u64, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> [u64; 4] {
        [
            self.spk_encoder.load(Ordering::Relaxed),
            self.lng_encoder.load(Ordering::Relaxed),
            self.fusion.load(Ordering::Relaxed),
            self.decoder.load(Ordering::Relaxed),
        ]
    }
}

impl Clone for CallCounters {
    fn clone(&self) -> Self {
        let [a, b, c, d] = self.snapshot();
        CallCounters {
            spk_encoder: AtomicU64::new(a),
            lng_encoder: AtomicU64::new(b),
            fusion: AtomicU64::new(c),
            decoder: AtomicU64::new(d),
        }
    }
}

/// Model, optimizer moments and loop position.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub config: ModelConfig,
    pub model: Model<f32>,
    pub adam_m: Model<f32>,
    pub adam_v: Model<f32>,
    /// Accepted optimizer updates.
    pub step: u64,
    /// Completed epochs; the shuffle for epoch `e` is derived from the seed and `e`.
    pub epochs_done: u64,
    pub counters: CallCounters,
}

impl ModelState {
    pub fn init(config: &ModelConfig) -> Result<Self> {
        let model = Model::init(config)?;
        let zeros = model.zeros_like();
        Ok(ModelState {
            config: config.clone(),
            adam_m: zeros.clone(),
            adam_v: zeros,
            model,
            step: 0,
            epochs_done: 0,
            counters: CallCounters::default(),
        })
    }

    pub fn param_count(&self) -> usize {
        self.model.param_count()
    }

    /// Prefix parameters as a fraction of all trainable parameters.
    pub fn prefix_fraction(&self) -> f64 {
        self.model.prefix_param_count() as f64 / self.param_count() as f64
    }
}

/// A uniform-length batch converted to the working precision.
pub struct Batch<F> {
    pub inputs: Vec<Vec<F>>,
    pub n_frames: usize,
    pub n_mels: usize,
    pub speakers: Vec<usize>,
    pub languages: Vec<usize>,
}

impl<F: Real> Batch<F> {
    pub fn from_utterances(utts: &[&Utterance], cfg: &ModelConfig) -> Result<Self> {
        let first = utts.first().ok_or_else(|| Error::Input("empty batch".into()))?;
        let n_frames = first.mel.n_frames();
        let n_mels = cfg.encoder.n_mels;
        let mut batch = Batch {
            inputs: Vec::with_capacity(utts.len()),
            n_frames,
            n_mels,
            speakers: Vec::with_capacity(utts.len()),
            languages: Vec::with_capacity(utts.len()),
        };
        for u in utts {
            if u.mel.n_frames() != n_frames {
                return Err(Error::shape("batch frame count", n_frames, u.mel.n_frames()));
            }
            if u.mel.n_mels() != n_mels {
                return Err(Error::shape("batch n_mels", n_mels, u.mel.n_mels()));
            }
            if u.speaker_id >= cfg.n_speakers {
                return Err(Error::Input(format!("speaker label {} out of range for {} speakers", u.speaker_id, cfg.n_speakers)));
            }
            if u.language_id >= cfg.n_languages {
                return Err(Error::Input(format!(
                    "language label {} out of range for {} languages",
                    u.language_id, cfg.n_languages
                )));
            }
            batch.inputs.push(encoders::mel_to_real(&u.mel));
            batch.speakers.push(u.speaker_id);
            batch.languages.push(u.language_id);
        }
        if batch.len() < 4 {
            return Err(Error::Input(format!("batch needs at least 4 utterances, got {}", batch.len())));
        }
        if n_frames < encoders::MIN_FRAMES {
            return Err(Error::Input(format!("utterances need at least {} frames", encoders::MIN_FRAMES)));
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn cast<G: Real>(&self) -> Batch<G> {
        Batch {
            inputs: self.inputs.iter().map(|x| x.iter().map(|v| G::lit(v.as_f64())).collect()).collect(),
            n_frames: self.n_frames,
            n_mels: self.n_mels,
            speakers: self.speakers.clone(),
            languages: self.languages.clone(),
        }
    }
}

/// Raw loss components before weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Components {
    pub mse: f64,
    pub aam: f64,
    pub mapc: f64,
    pub nll: f64,
}

impl Components {
    pub fn report(&self, w: &LossConfig) -> Result<LossReport> {
        losses::weighted_total(self.mse, self.aam, self.mapc, self.nll, w)
    }

    fn unchecked_report(&self, w: &LossConfig) -> LossReport {
        LossReport {
            l_mse: self.mse,
            l_aam: self.aam,
            l_mapc: self.mapc,
            l_nll: self.nll,
            total: w.w_mse * self.mse + w.w_aam * self.aam + w.w_mapc * self.mapc + w.w_nll * self.nll,
        }
    }
}

fn encode_batch<F: Real>(p: &EncoderParams<F>, batch: &Batch<F>) -> (Vec<F>, Vec<encoders::EncoderCache<F>>) {
    let outs: Vec<_> = batch.inputs.par_iter().map(|x| encoders::forward(p, x, batch.n_frames)).collect();
    let mut flat = Vec::with_capacity(batch.len() * p.config.embed_dim);
    let mut caches = Vec::with_capacity(batch.len());
    for (e, c) in outs {
        flat.extend_from_slice(&e);
        caches.push(c);
    }
    (flat, caches)
}

/// Per-utterance encoder gradients summed in index order, so the result does
/// not depend on thread scheduling.
fn encoder_backward_batch<F: Real>(
    p: &EncoderParams<F>,
    caches: &[encoders::EncoderCache<F>],
    d_emb: &[F],
    grads: &mut EncoderParams<F>,
) {
    let j = p.config.embed_dim;
    let parts: Vec<EncoderParams<F>> = caches
        .par_iter()
        .enumerate()
        .map(|(b, c)| {
            let mut g = p.zeros_like();
            encoders::backward(p, c, &d_emb[b * j..(b + 1) * j], &mut g);
            g
        })
        .collect();
    for g in &parts {
        grads.accumulate(g);
    }
}

fn scaled<F: Real>(v: &mut [F], w: f64) {
    let w = F::lit(w);
    v.iter_mut().for_each(|x| *x *= w);
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s);
}

/// Forward pass over a batch and, if requested, gradients of the weighted
/// total loss w.r.t. every tensor in `model`.
pub fn loss_and_grad<F: Real>(
    model: &Model<F>,
    cfg: &ModelConfig,
    batch: &Batch<F>,
    counters: Option<&CallCounters>,
    with_grad: bool,
) -> Result<(Components, Option<Model<F>>)> {
    let n = batch.len();
    let j = cfg.encoder.embed_dim;
    let w = &cfg.losses;
    let (e_spk, spk_caches) = encode_batch(&model.spk_encoder, batch);
    if let Some(c) = counters {
        CallCounters::bump(&c.spk_encoder, n);
    }
    let (aam, d_spk_aam, d_head) =
        losses::aam_softmax_grad(&model.spk_head, &e_spk, &batch.speakers, w.aam_scale, w.aam_margin)?;
    let mut comps = Components { aam: aam.as_f64(), ..Components::default() };
    let mut grads = with_grad.then(|| model.zeros_like());
    let mut d_spk = d_spk_aam;
    scaled(&mut d_spk, w.w_aam);

    let (Some(lng_enc), Some(fus), Some(dec), Some(lng_head)) =
        (&model.lng_encoder, &model.fusion, &model.decoder, &model.lng_head)
    else {
        if let Some(g) = grads.as_mut() {
            g.spk_head.weight = d_head;
            scaled(g.spk_head.weight.data_mut(), w.w_aam);
            encoder_backward_batch(&model.spk_encoder, &spk_caches, &d_spk, &mut g.spk_encoder);
        }
        return Ok((comps, grads));
    };

    let (e_lng, lng_caches) = encode_batch(lng_enc, batch);
    let (f_sl, c_sl) = fusion::tuner_forward(&fus.config, &fus.spk, &e_spk, &e_lng, n);
    let (f_ls, c_ls) = fusion::tuner_forward(&fus.config, &fus.lang, &e_lng, &e_spk, n);
    let mut z = Vec::with_capacity(n * 2 * j);
    for b in 0..n {
        z.extend_from_slice(&f_sl[b * j..(b + 1) * j]);
        z.extend_from_slice(&f_ls[b * j..(b + 1) * j]);
    }
    let (y, dec_cache) = decoder::forward(dec, &z, n, batch.n_frames);
    if let Some(c) = counters {
        CallCounters::bump(&c.lng_encoder, n);
        CallCounters::bump(&c.fusion, n);
        CallCounters::bump(&c.decoder, n);
    }
    let target: Vec<F> = batch.inputs.concat();
    let (mse, mut dy) = losses::mse_grad(&y, &target)?;
    let (nll, mut d_lng, d_lhead_w, d_lhead_b) = losses::nll_grad(lng_head, &e_lng, &batch.languages)?;
    let (mapc, mut d_spk_mapc, mut d_lng_mapc) = losses::mapc_grad(&e_spk, &e_lng, n, j, j)?;
    comps.mse = mse.as_f64();
    comps.nll = nll.as_f64();
    comps.mapc = mapc.as_f64();

    let Some(g) = grads.as_mut() else {
        return Ok((comps, None));
    };
    g.spk_head.weight = d_head;
    scaled(g.spk_head.weight.data_mut(), w.w_aam);
    let lh = g.lng_head.as_mut().expect("language head present");
    lh.weight = d_lhead_w;
    scaled(lh.weight.data_mut(), w.w_nll);
    if let (Some(dst), Some(mut src)) = (lh.bias.as_mut(), d_lhead_b) {
        scaled(src.data_mut(), w.w_nll);
        *dst = src;
    }
    scaled(&mut d_lng, w.w_nll);
    scaled(&mut d_spk_mapc, w.w_mapc);
    scaled(&mut d_lng_mapc, w.w_mapc);
    add_into(&mut d_spk, &d_spk_mapc);
    add_into(&mut d_lng, &d_lng_mapc);

    scaled(&mut dy, w.w_mse);
    let dz = decoder::backward(dec, &dec_cache, &dy, g.decoder.as_mut().expect("decoder present"));
    let mut d_fsl = Vec::with_capacity(n * j);
    let mut d_fls = Vec::with_capacity(n * j);
    for b in 0..n {
        d_fsl.extend_from_slice(&dz[b * 2 * j..b * 2 * j + j]);
        d_fls.extend_from_slice(&dz[b * 2 * j + j..(b + 1) * 2 * j]);
    }
    let gf = g.fusion.as_mut().expect("fusion present");
    let (dq, dkv) = fusion::tuner_backward(&fus.config, &fus.spk, &c_sl, &d_fsl, &mut gf.spk);
    add_into(&mut d_spk, &dq);
    add_into(&mut d_lng, &dkv);
    let (dq, dkv) = fusion::tuner_backward(&fus.config, &fus.lang, &c_ls, &d_fls, &mut gf.lang);
    add_into(&mut d_lng, &dq);
    add_into(&mut d_spk, &dkv);

    encoder_backward_batch(&model.spk_encoder, &spk_caches, &d_spk, &mut g.spk_encoder);
    encoder_backward_batch(lng_enc, &lng_caches, &d_lng, g.lng_encoder.as_mut().expect("language encoder present"));
    Ok((comps, grads))
}

/// Decoupled-weight-decay Adam update:
/// `p ← p·(1 − lr·wd) − lr·m̂/(√v̂ + ε)`.
pub fn apply_update(state: &mut ModelState, grads: &Model<f32>) {
    let o = &state.config.optimizer;
    let t = (state.step + 1) as i32;
    let b1 = o.beta1 as f32;
    let b2 = o.beta2 as f32;
    let lr = o.learning_rate as f32;
    let eps = o.epsilon as f32;
    let decay = 1.0 - lr * o.weight_decay as f32;
    let c1 = 1.0 - (o.beta1 as f32).powi(t);
    let c2 = 1.0 - (o.beta2 as f32).powi(t);
    let g = grads.named();
    let params = state.model.named_mut();
    let ms = state.adam_m.named_mut();
    let vs = state.adam_v.named_mut();
    for (((_, p), (_, m)), ((_, v), (_, g))) in params.into_iter().zip(ms).zip(vs.into_iter().zip(g)) {
        let it = p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut().iter_mut().zip(g.data()));
        for ((p, m), (v, &g)) in it {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p = *p * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    state.step += 1;
}

/// Outcome of one optimizer step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub report: LossReport,
    /// Why the step was rejected (state left untouched), if it was.
    pub rejected: Option<String>,
}

/// One joint optimization step on `batch`. Non-finite losses or gradients
/// reject the step and leave `state` unchanged.
pub fn train_step(state: &mut ModelState, batch: &Batch<f32>) -> Result<StepOutcome> {
    let cfg = state.config.clone();
    let (comps, grads) = match loss_and_grad(&state.model, &cfg, batch, Some(&state.counters), true) {
        Ok(v) => v,
        Err(Error::NonFinite(what)) => {
            return Ok(StepOutcome { report: Components::default().unchecked_report(&cfg.losses), rejected: Some(what) })
        }
        Err(e) => return Err(e),
    };
    let report = match comps.report(&cfg.losses) {
        Ok(r) => r,
        Err(e) => return Ok(StepOutcome { report: comps.unchecked_report(&cfg.losses), rejected: Some(e.to_string()) }),
    };
    let grads = grads.expect("gradients requested");
    if let Some((name, _)) = grads.named().into_iter().find(|(_, t)| !t.is_finite()) {
        return Ok(StepOutcome { report, rejected: Some(format!("non-finite gradient in {name}")) });
    }
    let before = state.clone();
    apply_update(state, &grads);
    if !state.model.all_finite() {
        let name = state.model.named().into_iter().find(|(_, t)| !t.is_finite()).map(|(n, _)| n).unwrap_or_default();
        *state = before;
        return Ok(StepOutcome { report, rejected: Some(format!("non-finite parameter in {name}")) });
    }
    Ok(StepOutcome { report, rejected: None })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: u64,
    pub report: LossReport,
}

impl MetricsRow {
    pub fn csv(&self) -> String {
        let r = &self.report;
        format!("{},{},{},{},{},{},{}", self.step, self.epoch, r.l_mse, r.l_aam, r.l_mapc, r.l_nll, r.total)
    }
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if n == 0 {
            if line != METRICS_HEADER {
                return Err(Error::Input(format!("unexpected metrics header `{line}`")));
            }
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Input(format!("malformed metrics line {}", n + 1));
        if f.len() != 7 {
            return Err(bad());
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        rows.push(MetricsRow {
            step: f[0].parse().map_err(|_| bad())?,
            epoch: f[1].parse().map_err(|_| bad())?,
            report: LossReport { l_mse: num(2)?, l_aam: num(3)?, l_mapc: num(4)?, l_nll: num(5)?, total: num(6)? },
        });
    }
    Ok(rows)
}

/// Where `train` writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub checkpoint_dir: Option<PathBuf>,
    /// Created fresh for a new run, appended to when resuming.
    pub metrics_path: Option<PathBuf>,
}

pub fn checkpoint_path(dir: &Path, epoch: u64) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}.lspc"))
}

pub const FINAL_CHECKPOINT: &str = "final.lspc";

pub fn steps_per_epoch(n_utterances: usize, batch_size: usize) -> usize {
    n_utterances / batch_size
}

/// Epoch loop with seeded shuffling; incomplete trailing batches are dropped.
/// Passing a resumed `state` continues from its `epochs_done`.
pub fn train(
    config: &ModelConfig,
    corpus: &[Utterance],
    state: Option<ModelState>,
    outputs: &TrainOutputs,
) -> Result<(ModelState, Vec<MetricsRow>)> {
    config.validate()?;
    let mut state = match state {
        Some(s) => {
            if checkpoint::config_digest(&s.config) != checkpoint::config_digest(config) {
                return Err(Error::Checkpoint("resumed state was trained under a different configuration".into()));
            }
            let mut s = s;
            s.config = config.clone();
            s
        }
        None => ModelState::init(config)?,
    };
    let bs = config.optimizer.batch_size;
    let per_epoch = steps_per_epoch(corpus.len(), bs);
    if per_epoch == 0 && config.optimizer.epochs > 0 {
        return Err(Error::Input(format!("corpus of {} utterances is smaller than one batch of {bs}", corpus.len())));
    }
    if let Some(d) = &outputs.checkpoint_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut metrics = match &outputs.metrics_path {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            let file = if state.epochs_done == 0 {
                let mut f = File::create(p).map_err(|e| Error::io(p, e))?;
                writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(p, e))?;
                f
            } else {
                OpenOptions::new().append(true).open(p).map_err(|e| Error::io(p, e))?
            };
            Some((p.clone(), BufWriter::new(file)))
        }
        None => None,
    };
    let mut rows = Vec::new();
    for epoch in state.epochs_done..config.optimizer.epochs as u64 {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut stream(config.seed, "shuffle", epoch));
        for (i, chunk) in order.chunks_exact(bs).enumerate() {
            let utts: Vec<&Utterance> = chunk.iter().map(|&k| &corpus[k]).collect();
            let batch = Batch::from_utterances(&utts, config)?;
            let outcome = train_step(&mut state, &batch)?;
            let row = MetricsRow { step: epoch * per_epoch as u64 + i as u64 + 1, epoch: epoch + 1, report: outcome.report };
            if let Some(why) = &outcome.rejected {
                eprintln!("step {} rejected: {why}", row.step);
            }
            if let Some((p, w)) = metrics.as_mut() {
                writeln!(w, "{}", row.csv()).map_err(|e| Error::io(p.as_path(), e))?;
            }
            rows.push(row);
        }
        state.epochs_done = epoch + 1;
        if let Some((p, w)) = metrics.as_mut() {
            w.flush().map_err(|e| Error::io(p.as_path(), e))?;
        }
        let k = config.optimizer.checkpoint_every as u64;
        if let Some(d) = &outputs.checkpoint_dir {
            if k > 0 && state.epochs_done % k == 0 {
                save_checkpoint(&checkpoint_path(d, state.epochs_done), &state)?;
            }
        }
    }
    if let Some(d) = &outputs.checkpoint_dir {
        save_checkpoint(&d.join(FINAL_CHECKPOINT), &state)?;
    }
    Ok((state, rows))
}

/// Speaker embedding at inference time: the speaker encoder alone.
pub fn infer_speaker_embedding(state: &ModelState, mel: &MelSpectrogram) -> Result<Embedding> {
    let e = encoders::encode(&state.model.spk_encoder, mel, EmbeddingKind::Speaker)?;
    CallCounters::bump(&state.counters.spk_encoder, 1);
    Ok(e)
}

/// Language embedding, for analysis; fails on speaker-only models.
pub fn infer_language_embedding(state: &ModelState, mel: &MelSpectrogram) -> Result<Embedding> {
    let enc = state
        .model
        .lng_encoder
        .as_ref()
        .ok_or_else(|| Error::Input("model has no language encoder".into()))?;
    let e = encoders::encode(enc, mel, EmbeddingKind::Language)?;
    CallCounters::bump(&state.counters.lng_encoder, 1);
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthcorpus::{generate_corpus, CorpusSpec};

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            seed: 3,
            n_speakers: 4,
            n_languages: 2,
            encoder: EncoderConfig { n_mels: 8, embed_dim: 8, channels: vec![4], ..EncoderConfig::default() },
            attention: AttentionConfig { d_model: 8, n_heads: 2, prefix_len: 2 },
            decoder: DecoderConfig { hidden: 8, ..DecoderConfig::default() },
            optimizer: OptimizerConfig { batch_size: 8, epochs: 2, ..OptimizerConfig::default() },
            ..ModelConfig::default()
        }
    }

    fn tiny_corpus() -> Vec<Utterance> {
        generate_corpus(&CorpusSpec {
            n_speakers: 4,
            n_languages: 2,
            utts_per_speaker_per_language: 2,
            frames_per_utt: 12,
            n_mels: 8,
            ..CorpusSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bitwise_unchanged() {
        let mut cfg = tiny_config();
        cfg.optimizer.learning_rate = 0.0;
        let corpus = tiny_corpus();
        let utts: Vec<&Utterance> = corpus.iter().take(8).collect();
        let batch = Batch::from_utterances(&utts, &cfg).unwrap();
        let mut state = ModelState::init(&cfg).unwrap();
        let before = state.model.clone();
        let out = train_step(&mut state, &batch).unwrap();
        assert!(out.rejected.is_none());
        assert!(out.report.total > 0.0);
        assert_eq!(state.model, before);
    }

    #[test]
    fn decay_alone_shrinks_by_the_decay_factor() {
        let mut cfg = tiny_config();
        cfg.optimizer.learning_rate = 0.01;
        cfg.optimizer.weight_decay = 0.5;
        let mut state = ModelState::init(&cfg).unwrap();
        let before = state.model.clone();
        let zeros = state.model.zeros_like();
        apply_update(&mut state, &zeros);
        let factor = 1.0f32 - 0.01f32 * 0.5f32;
        for ((name, a), (_, b)) in state.model.named().into_iter().zip(before.named()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x, *y * factor, "{name}");
            }
        }
    }

    #[test]
    fn batch_validation() {
        let cfg = tiny_config();
        let corpus = tiny_corpus();
        let three: Vec<&Utterance> = corpus.iter().take(3).collect();
        assert!(Batch::<f32>::from_utterances(&three, &cfg).is_err());
        let mut odd = corpus.clone();
        odd[1].mel = MelSpectrogram::from_frames(10, 8, vec![0.0; 80]).unwrap();
        let refs: Vec<&Utterance> = odd.iter().take(4).collect();
        assert!(Batch::<f32>::from_utterances(&refs, &cfg).is_err());
    }

    #[test]
    fn speaker_only_model_has_no_auxiliary_components() {
        let cfg = Variant::SpeakerOnly.apply(&tiny_config());
        let m = Model::<f32>::init(&cfg).unwrap();
        assert!(m.lng_encoder.is_none() && m.fusion.is_none() && m.decoder.is_none() && m.lng_head.is_none());
        assert!(m.named().iter().all(|(n, _)| n.starts_with("spk_")));
        let no_prefix = Model::<f32>::init(&Variant::NoPrefix.apply(&tiny_config())).unwrap();
        assert_eq!(no_prefix.prefix_param_count(), 0);
    }

    #[test]
    fn epochs_zero_and_row_count() {
        let corpus = tiny_corpus();
        let mut cfg = tiny_config();
        cfg.optimizer.epochs = 0;
        let (state, rows) = train(&cfg, &corpus, None, &TrainOutputs::default()).unwrap();
        assert!(rows.is_empty());
        assert_eq!(state.model, Model::init(&cfg).unwrap());
        cfg.optimizer.epochs = 3;
        let (state, rows) = train(&cfg, &corpus, None, &TrainOutputs::default()).unwrap();
        assert_eq!(rows.len(), 3 * steps_per_epoch(corpus.len(), 8));
        assert_eq!(state.step, rows.len() as u64);
    }

    #[test]
    fn inference_touches_only_the_speaker_encoder() {
        let state = ModelState::init(&tiny_config()).unwrap();
        let corpus = tiny_corpus();
        let a = infer_speaker_embedding(&state, &corpus[0].mel).unwrap();
        let b = infer_speaker_embedding(&state, &corpus[0].mel).unwrap();
        assert_eq!(a, b);
        let direct = encoders::encode(&state.model.spk_encoder, &corpus[0].mel, EmbeddingKind::Speaker).unwrap();
        assert_eq!(a, direct);
        assert_eq!(state.counters.snapshot(), [2, 0, 0, 0]);
    }
}
