//! Residual convolutional encoders with mean+std statistics pooling.
//!
//! The mel-spectrogram is treated as a one-channel `T×M` image. Each stage
//! opens with a stride-2 3×3 convolution into its channel count, followed by
//! `blocks_per_stage` residual blocks (`relu(x + conv(relu(conv(x))))`).
//! The final feature map is pooled over time into per-(channel, band) mean
//! and standard deviation, then mapped to `J` dimensions by one affine layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::MelSpectrogram;
use crate::nn::{self, conv_out_len, Dims};
use crate::real::Real;
use crate::rng::{stream, StreamRng};
use crate::tensor::{join, ParamSet, Tensor};

/// Variance floor inside the pooled standard deviation.
pub const POOL_EPS: f64 = 1e-5;
pub const MIN_FRAMES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    MeanStd,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub n_mels: usize,
    pub embed_dim: usize,
    pub channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub pooling: Pooling,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_mels: 40,
            embed_dim: 64,
            channels: vec![16, 32],
            blocks_per_stage: 1,
            pooling: Pooling::MeanStd,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 8 {
            return Err(Error::Config("encoder: embed_dim must be at least 8".into()));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("encoder: channels must be a non-empty list of positive sizes".into()));
        }
        if self.n_mels == 0 {
            return Err(Error::Config("encoder: n_mels must be positive".into()));
        }
        Ok(())
    }

    /// Width of the mel axis after all stride-2 stages.
    pub fn pooled_width(&self) -> usize {
        self.channels.iter().fold(self.n_mels, |w, _| conv_out_len(w, 2))
    }

    pub fn pooled_features(&self) -> usize {
        2 * self.channels.last().copied().unwrap_or(0) * self.pooled_width()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Speaker,
    Language,
    FusedSpk,
    FusedLng,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub values: Vec<f64>,
    pub kind: EmbeddingKind,
}

impl Embedding {
    pub fn new(values: Vec<f64>, kind: EmbeddingKind) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{kind:?} embedding entry {i}")));
        }
        Ok(Embedding { values, kind })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub(crate) fn to_real<F: Real>(&self) -> Vec<F> {
        self.values.iter().map(|&v| F::lit(v)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<F> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

impl<F: Real> ConvLayer<F> {
    fn init(cin: usize, cout: usize, rng: &mut StreamRng) -> Self {
        ConvLayer {
            weight: nn::kaiming_uniform(&[cout, cin, 3, 3], cin * 9, rng),
            bias: Tensor::zeros(&[cout]),
        }
    }
}

impl<F: Real> ParamSet<F> for ConvLayer<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<F>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<F>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock<F> {
    pub conv1: ConvLayer<F>,
    pub conv2: ConvLayer<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage<F> {
    pub down: ConvLayer<F>,
    pub blocks: Vec<ResBlock<F>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<F> {
    pub config: EncoderConfig,
    pub stages: Vec<Stage<F>>,
    pub fc_weight: Tensor<F>,
    pub fc_bias: Tensor<F>,
}

impl<F: Real> ParamSet<F> for EncoderParams<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<F>)>) {
        for (s, stage) in self.stages.iter().enumerate() {
            let sp = join(prefix, &format!("stage{s}"));
            stage.down.collect(&join(&sp, "down"), out);
            for (b, block) in stage.blocks.iter().enumerate() {
                let bp = join(&sp, &format!("block{b}"));
                block.conv1.collect(&join(&bp, "conv1"), out);
                block.conv2.collect(&join(&bp, "conv2"), out);
            }
        }
        out.push((join(prefix, "fc.weight"), &self.fc_weight));
        out.push((join(prefix, "fc.bias"), &self.fc_bias));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<F>)>) {
        for (s, stage) in self.stages.iter_mut().enumerate() {
            let sp = join(prefix, &format!("stage{s}"));
            stage.down.collect_mut(&join(&sp, "down"), out);
            for (b, block) in stage.blocks.iter_mut().enumerate() {
                let bp = join(&sp, &format!("block{b}"));
                block.conv1.collect_mut(&join(&bp, "conv1"), out);
                block.conv2.collect_mut(&join(&bp, "conv2"), out);
            }
        }
        out.push((join(prefix, "fc.weight"), &mut self.fc_weight));
        out.push((join(prefix, "fc.bias"), &mut self.fc_bias));
    }
}

impl<F: Real> EncoderParams<F> {
    pub fn init(config: &EncoderConfig, rng: &mut StreamRng) -> Result<Self> {
        config.validate()?;
        let mut cin = 1;
        let mut stages = Vec::with_capacity(config.channels.len());
        for &c in &config.channels {
            let down = ConvLayer::init(cin, c, rng);
            let blocks = (0..config.blocks_per_stage)
                .map(|_| ResBlock {
                    conv1: ConvLayer::init(c, c, rng),
                    conv2: ConvLayer::init(c, c, rng),
                })
                .collect();
            stages.push(Stage { down, blocks });
            cin = c;
        }
        let feat = config.pooled_features();
        Ok(EncoderParams {
            config: config.clone(),
            stages,
            fc_weight: nn::kaiming_uniform(&[config.embed_dim, feat], feat, rng),
            fc_bias: Tensor::zeros(&[config.embed_dim]),
        })
    }

    /// Same layout, all zeros; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero_grad();
        z
    }

    pub fn cast<G: Real>(&self) -> EncoderParams<G> {
        let conv = |c: &ConvLayer<F>| ConvLayer {
            weight: c.weight.cast(),
            bias: c.bias.cast(),
        };
        EncoderParams {
            config: self.config.clone(),
            stages: self
                .stages
                .iter()
                .map(|s| Stage {
                    down: conv(&s.down),
                    blocks: s
                        .blocks
                        .iter()
                        .map(|b| ResBlock {
                            conv1: conv(&b.conv1),
                            conv2: conv(&b.conv2),
                        })
                        .collect(),
                })
                .collect(),
            fc_weight: self.fc_weight.cast(),
            fc_bias: self.fc_bias.cast(),
        }
    }
}

pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<EncoderParams<f32>> {
    EncoderParams::init(config, &mut stream(seed, "encoder", 0))
}

struct BlockCache<F> {
    x: Vec<F>,
    a1: Vec<F>,
    out: Vec<F>,
}

struct StageCache<F> {
    input: Vec<F>,
    in_dims: Dims,
    down_out: Vec<F>,
    dims: Dims,
    blocks: Vec<BlockCache<F>>,
}

/// Activations retained by [`forward`] for [`backward`].
pub struct EncoderCache<F> {
    stages: Vec<StageCache<F>>,
    pooled_dims: Dims,
    mean: Vec<F>,
    std: Vec<F>,
    features: Vec<F>,
}

pub(crate) fn check_mel(config: &EncoderConfig, mel: &MelSpectrogram) -> Result<()> {
    if mel.n_mels() != config.n_mels {
        return Err(Error::shape("encoder input n_mels", config.n_mels, mel.n_mels()));
    }
    if mel.n_frames() < MIN_FRAMES {
        return Err(Error::Input(format!(
            "encoder input has {} frames; at least {MIN_FRAMES} required",
            mel.n_frames()
        )));
    }
    Ok(())
}

pub fn mel_to_real<F: Real>(mel: &MelSpectrogram) -> Vec<F> {
    mel.frames().iter().map(|&v| F::lit(v as f64)).collect()
}

/// Forward pass on a `T×M` input. Returns the `J`-vector and its cache.
pub fn forward<F: Real>(params: &EncoderParams<F>, input: &[F], n_frames: usize) -> (Vec<F>, EncoderCache<F>) {
    let mut x = input.to_vec();
    let mut d = Dims {
        c: 1,
        h: n_frames,
        w: params.config.n_mels,
    };
    let mut stages = Vec::with_capacity(params.stages.len());
    for stage in &params.stages {
        let in_dims = d;
        let (mut y, yd) = nn::conv3x3(&x, d, &stage.down.weight, &stage.down.bias, 2);
        nn::relu_inplace(&mut y);
        let input = std::mem::replace(&mut x, y);
        d = yd;
        let down_out = x.clone();
        let mut blocks = Vec::with_capacity(stage.blocks.len());
        for block in &stage.blocks {
            let (mut a1, _) = nn::conv3x3(&x, d, &block.conv1.weight, &block.conv1.bias, 1);
            nn::relu_inplace(&mut a1);
            let (mut out, _) = nn::conv3x3(&a1, d, &block.conv2.weight, &block.conv2.bias, 1);
            for (o, xi) in out.iter_mut().zip(&x) {
                *o += *xi;
            }
            nn::relu_inplace(&mut out);
            let bx = std::mem::replace(&mut x, out.clone());
            blocks.push(BlockCache { x: bx, a1, out });
        }
        stages.push(StageCache {
            input,
            in_dims,
            down_out,
            dims: d,
            blocks,
        });
    }

    // statistics pooling over the time axis (h)
    let cw = d.c * d.w;
    let hn = F::lit(d.h as f64);
    let eps = F::lit(POOL_EPS);
    let mut mean = vec![F::zero(); cw];
    let mut std = vec![F::zero(); cw];
    for c in 0..d.c {
        for w in 0..d.w {
            let at = |h: usize| x[(c * d.h + h) * d.w + w];
            let mu = (0..d.h).map(at).sum::<F>() / hn;
            let var = (0..d.h).map(|h| (at(h) - mu) * (at(h) - mu)).sum::<F>() / hn;
            mean[c * d.w + w] = mu;
            std[c * d.w + w] = (var + eps).sqrt();
        }
    }
    let features: Vec<F> = mean.iter().chain(&std).copied().collect();
    let emb = nn::linear(&features, 1, &params.fc_weight, Some(&params.fc_bias));
    let cache = EncoderCache {
        stages,
        pooled_dims: d,
        mean,
        std,
        features,
    };
    (emb, cache)
}

/// Accumulates parameter gradients of `d_emb · emb` into `grads`.
pub fn backward<F: Real>(params: &EncoderParams<F>, cache: &EncoderCache<F>, d_emb: &[F], grads: &mut EncoderParams<F>) {
    let d = cache.pooled_dims;
    let dfeat = nn::linear_backward(
        &cache.features,
        1,
        &params.fc_weight,
        d_emb,
        &mut grads.fc_weight,
        Some(&mut grads.fc_bias),
        true,
    )
    .expect("dx requested");
    let cw = d.c * d.w;
    let (dmean, dstd) = dfeat.split_at(cw);
    let last = cache.stages.last().expect("at least one stage");
    let act = last.blocks.last().map(|b| &b.out).unwrap_or(&last.down_out);
    let hn = F::lit(d.h as f64);
    let mut dx = vec![F::zero(); d.len()];
    for c in 0..d.c {
        for w in 0..d.w {
            let i = c * d.w + w;
            let (mu, sd) = (cache.mean[i], cache.std[i]);
            for h in 0..d.h {
                let j = (c * d.h + h) * d.w + w;
                dx[j] = dmean[i] / hn + dstd[i] * (act[j] - mu) / (hn * sd);
            }
        }
    }

    for (s, stage) in params.stages.iter().enumerate().rev() {
        let sc = &cache.stages[s];
        let gs = &mut grads.stages[s];
        for (b, block) in stage.blocks.iter().enumerate().rev() {
            let bc = &sc.blocks[b];
            let gb = &mut gs.blocks[b];
            nn::relu_backward_inplace(&bc.out, &mut dx);
            // dx now flows both into the skip path and through conv2
            let mut da1 = nn::conv3x3_backward(
                &bc.a1,
                sc.dims,
                &block.conv2.weight,
                1,
                &dx,
                &mut gb.conv2.weight,
                &mut gb.conv2.bias,
                true,
            )
            .expect("dx requested");
            nn::relu_backward_inplace(&bc.a1, &mut da1);
            let dskip = nn::conv3x3_backward(
                &bc.x,
                sc.dims,
                &block.conv1.weight,
                1,
                &da1,
                &mut gb.conv1.weight,
                &mut gb.conv1.bias,
                true,
            )
            .expect("dx requested");
            for (a, b) in dx.iter_mut().zip(&dskip) {
                *a += *b;
            }
        }
        nn::relu_backward_inplace(&sc.down_out, &mut dx);
        let need_dx = s > 0;
        let prev = nn::conv3x3_backward(
            &sc.input,
            sc.in_dims,
            &stage.down.weight,
            2,
            &dx,
            &mut gs.down.weight,
            &mut gs.down.bias,
            need_dx,
        );
        if let Some(p) = prev {
            dx = p;
        }
    }
}

/// Embeds one utterance.
pub fn encode<F: Real>(params: &EncoderParams<F>, mel: &MelSpectrogram, kind: EmbeddingKind) -> Result<Embedding> {
    check_mel(&params.config, mel)?;
    let (e, _) = forward(params, &mel_to_real(mel), mel.n_frames());
    Embedding::new(e.iter().map(|v| v.as_f64()).collect(), kind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            n_mels: 8,
            embed_dim: 8,
            channels: vec![4],
            blocks_per_stage: 1,
            pooling: Pooling::MeanStd,
        }
    }

    fn random_mel(t: usize, m: usize, seed: u64) -> MelSpectrogram {
        let mut rng = stream(seed, "mel", 0);
        MelSpectrogram::from_frames(t, m, (0..t * m).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_input_and_zero_head_give_zero_embedding() {
        let mut p = init_params(&EncoderConfig::default(), 3).unwrap();
        p.fc_weight.fill(0.0);
        let mel = MelSpectrogram::from_frames(20, 40, vec![0.0; 800]).unwrap();
        let e = encode(&p, &mel, EmbeddingKind::Speaker).unwrap();
        assert!(e.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_and_shaped() {
        let p = init_params(&EncoderConfig::default(), 4).unwrap();
        let mel = random_mel(30, 40, 1);
        let first = encode(&p, &mel, EmbeddingKind::Speaker).unwrap();
        assert_eq!(first.len(), 64);
        assert!(first.values.iter().all(|v| v.is_finite()));
        for _ in 0..100 {
            assert_eq!(encode(&p, &mel, EmbeddingKind::Speaker).unwrap(), first);
        }
    }

    #[test]
    fn any_length_from_four_frames() {
        let p = init_params(&EncoderConfig::default(), 5).unwrap();
        for t in [4, 5, 17, 101] {
            assert_eq!(encode(&p, &random_mel(t, 40, t as u64), EmbeddingKind::Language).unwrap().len(), 64);
        }
        assert!(encode(&p, &random_mel(3, 40, 0), EmbeddingKind::Speaker).is_err());
        let err = encode(&p, &random_mel(10, 30, 0), EmbeddingKind::Speaker).unwrap_err();
        assert!(err.to_string().contains("n_mels"));
    }

    #[test]
    fn init_is_seeded() {
        let cfg = EncoderConfig::default();
        assert_eq!(init_params(&cfg, 1).unwrap(), init_params(&cfg, 1).unwrap());
        assert_ne!(init_params(&cfg, 1).unwrap(), init_params(&cfg, 2).unwrap());
        let p = init_params(&cfg, 1).unwrap();
        assert!(p.fc_bias.data().iter().all(|&b| b == 0.0));
        assert!(p.stages[0].down.bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn parameter_count_closed_form() {
        // J=64, M=40, channels [16, 32], one block per stage
        let conv = |cin: usize, cout: usize| cout * cin * 9 + cout;
        let pooled_w = 10; // 40 -> 20 -> 10
        let expected = conv(1, 16) + 2 * conv(16, 16) + conv(16, 32) + 2 * conv(32, 32) + (2 * 32 * pooled_w) * 64 + 64;
        let p = init_params(&EncoderConfig::default(), 0).unwrap();
        assert_eq!(p.param_count(), expected);
        assert_eq!(expected, 68_960);
    }

    #[test]
    fn config_rejects_small_embeddings() {
        assert!(EncoderConfig { embed_dim: 4, ..EncoderConfig::default() }.validate().is_err());
        assert!(EncoderConfig { channels: vec![], ..EncoderConfig::default() }.validate().is_err());
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = stream(11, "test", 0);
        let mut p: EncoderParams<f64> = EncoderParams::init(&tiny(), &mut rng).unwrap();
        // non-zero biases so every path carries signal
        for (_, t) in p.named_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.05..0.05);
            }
        }
        let mel = random_mel(7, 8, 2);
        let x = mel_to_real::<f64>(&mel);
        let probe: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |p: &EncoderParams<f64>| -> f64 {
            let (e, _) = forward(p, &x, 7);
            e.iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>() + e.iter().map(|v| v * v).sum::<f64>()
        };
        let (e, cache) = forward(&p, &x, 7);
        let d_emb: Vec<f64> = e.iter().zip(&probe).map(|(a, b)| b + 2.0 * a).collect();
        let mut g = p.zeros_like();
        backward(&p, &cache, &d_emb, &mut g);
        let h = 1e-5;
        let grads: Vec<(String, Vec<f64>)> = g.named().into_iter().map(|(n, t)| (n, t.data().to_vec())).collect();
        for (ti, (name, analytic)) in grads.iter().enumerate() {
            let mut num = vec![0.0; analytic.len()];
            for i in 0..analytic.len() {
                let mut pp = p.clone();
                pp.named_mut()[ti].1.data_mut()[i] += h;
                let mut pm = p.clone();
                pm.named_mut()[ti].1.data_mut()[i] -= h;
                num[i] = (loss(&pp) - loss(&pm)) / (2.0 * h);
            }
            let diff: f64 = analytic.iter().zip(&num).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = num.iter().map(|n| n * n).sum::<f64>().sqrt().max(1e-8);
            assert!(diff / scale < 1e-4, "{name}: rel err {}", diff / scale);
        }
    }
}
