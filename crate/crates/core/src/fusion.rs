//! Prefix-tuned cross-attention between speaker and language embeddings.
//!
//! Each embedding is a single token. The query comes from one stream; the
//! other stream contributes one key/value token, and `prefix_len` learned
//! prefix tokens are prepended to the key and value lists. Per head:
//!
//! ```text
//! F_att = softmax(q · K_pᵀ / √d_head) · V_p
//! ```
//!
//! Heads are concatenated, projected by `W_o` and added back onto the query
//! embedding. `W_o` starts at zero, so an untrained tuner is the identity.

use serde::{Deserialize, Serialize};

use crate::encoders::{Embedding, EmbeddingKind};
use crate::error::{Error, Result};
use crate::nn;
use crate::real::Real;
use crate::rng::StreamRng;
use crate::tensor::{join, ParamSet, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub prefix_len: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            d_model: 64,
            n_heads: 4,
            prefix_len: 4,
        }
    }
}

impl AttentionConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "attention: d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Learned prefix key/value tokens, `prefix_len × d_model` each.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixParams<F> {
    pub keys: Tensor<F>,
    pub values: Tensor<F>,
}

impl<F: Real> PrefixParams<F> {
    pub fn len(&self) -> usize {
        self.keys.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TunerParams<F> {
    pub w_q: Tensor<F>,
    pub w_k: Tensor<F>,
    pub w_v: Tensor<F>,
    pub w_o: Tensor<F>,
    pub prefix: PrefixParams<F>,
}

/// `PT_spk` (query from the speaker embedding) and `PT_lang` (query from
/// the language embedding). The two tuners share nothing.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams<F> {
    pub config: AttentionConfig,
    pub spk: TunerParams<F>,
    pub lang: TunerParams<F>,
}

impl<F: Real> ParamSet<F> for TunerParams<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<F>)>) {
        out.push((join(prefix, "w_q"), &self.w_q));
        out.push((join(prefix, "w_k"), &self.w_k));
        out.push((join(prefix, "w_v"), &self.w_v));
        out.push((join(prefix, "w_o"), &self.w_o));
        out.push((join(prefix, "prefix_k"), &self.prefix.keys));
        out.push((join(prefix, "prefix_v"), &self.prefix.values));
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<F>)>) {
        out.push((join(prefix, "w_q"), &mut self.w_q));
        out.push((join(prefix, "w_k"), &mut self.w_k));
        out.push((join(prefix, "w_v"), &mut self.w_v));
        out.push((join(prefix, "w_o"), &mut self.w_o));
        out.push((join(prefix, "prefix_k"), &mut self.prefix.keys));
        out.push((join(prefix, "prefix_v"), &mut self.prefix.values));
    }
}

impl<F: Real> ParamSet<F> for FusionParams<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<F>)>) {
        self.spk.collect(&join(prefix, "pt_spk"), out);
        self.lang.collect(&join(prefix, "pt_lang"), out);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<F>)>) {
        self.spk.collect_mut(&join(prefix, "pt_spk"), out);
        self.lang.collect_mut(&join(prefix, "pt_lang"), out);
    }
}

impl<F: Real> TunerParams<F> {
    fn init(cfg: &AttentionConfig, rng: &mut StreamRng) -> Self {
        let d = cfg.d_model;
        TunerParams {
            w_q: nn::kaiming_uniform(&[d, d], d, rng),
            w_k: nn::kaiming_uniform(&[d, d], d, rng),
            w_v: nn::kaiming_uniform(&[d, d], d, rng),
            w_o: Tensor::zeros(&[d, d]),
            prefix: PrefixParams {
                keys: nn::kaiming_uniform(&[cfg.prefix_len, d], d, rng),
                values: nn::kaiming_uniform(&[cfg.prefix_len, d], d, rng),
            },
        }
    }

    /// All-zero tuner of the given geometry.
    pub fn zeros(cfg: &AttentionConfig) -> Self {
        let d = cfg.d_model;
        TunerParams {
            w_q: Tensor::zeros(&[d, d]),
            w_k: Tensor::zeros(&[d, d]),
            w_v: Tensor::zeros(&[d, d]),
            w_o: Tensor::zeros(&[d, d]),
            prefix: PrefixParams {
                keys: Tensor::zeros(&[cfg.prefix_len, d]),
                values: Tensor::zeros(&[cfg.prefix_len, d]),
            },
        }
    }

    pub fn prefix_param_count(&self) -> usize {
        self.prefix.keys.len() + self.prefix.values.len()
    }

    fn cast<G: Real>(&self) -> TunerParams<G> {
        TunerParams {
            w_q: self.w_q.cast(),
            w_k: self.w_k.cast(),
            w_v: self.w_v.cast(),
            w_o: self.w_o.cast(),
            prefix: PrefixParams {
                keys: self.prefix.keys.cast(),
                values: self.prefix.values.cast(),
            },
        }
    }
}

impl<F: Real> FusionParams<F> {
    pub fn init(cfg: &AttentionConfig, rng: &mut StreamRng) -> Result<Self> {
        cfg.validate()?;
        Ok(FusionParams {
            config: cfg.clone(),
            spk: TunerParams::init(cfg, rng),
            lang: TunerParams::init(cfg, rng),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero_grad();
        z
    }

    pub fn prefix_param_count(&self) -> usize {
        self.spk.prefix_param_count() + self.lang.prefix_param_count()
    }

    pub fn cast<G: Real>(&self) -> FusionParams<G> {
        FusionParams {
            config: self.config.clone(),
            spk: self.spk.cast(),
            lang: self.lang.cast(),
        }
    }
}

/// Forward state of one tuner over a batch.
pub struct TunerCache<F> {
    batch: usize,
    xq: Vec<F>,
    xkv: Vec<F>,
    q: Vec<F>,
    k0: Vec<F>,
    v0: Vec<F>,
    /// `batch × heads × (prefix_len + 1)`; the last slot is the base token.
    weights: Vec<F>,
    o: Vec<F>,
}

impl<F: Real> TunerCache<F> {
    pub fn weights(&self) -> &[F] {
        &self.weights
    }
}

/// Batched tuner forward: `xq`, `xkv` are `batch × d_model`.
pub fn tuner_forward<F: Real>(
    cfg: &AttentionConfig,
    p: &TunerParams<F>,
    xq: &[F],
    xkv: &[F],
    batch: usize,
) -> (Vec<F>, TunerCache<F>) {
    let d = cfg.d_model;
    let dh = cfg.d_head();
    let lp = p.prefix.len();
    let slots = lp + 1;
    let scale = F::one() / F::lit(dh as f64).sqrt();
    let q = nn::linear(xq, batch, &p.w_q, None);
    let k0 = nn::linear(xkv, batch, &p.w_k, None);
    let v0 = nn::linear(xkv, batch, &p.w_v, None);
    let pk = p.prefix.keys.data();
    let pv = p.prefix.values.data();

    let mut weights = vec![F::zero(); batch * cfg.n_heads * slots];
    let mut o = vec![F::zero(); batch * d];
    for b in 0..batch {
        for h in 0..cfg.n_heads {
            let s = h * dh..(h + 1) * dh;
            let qh = &q[b * d..][s.clone()];
            let w = &mut weights[(b * cfg.n_heads + h) * slots..][..slots];
            for r in 0..slots {
                let key = if r < lp { &pk[r * d..][s.clone()] } else { &k0[b * d..][s.clone()] };
                w[r] = qh.iter().zip(key).map(|(a, k)| *a * *k).sum::<F>() * scale;
            }
            nn::softmax_inplace(w);
            let oh = &mut o[b * d..][s.clone()];
            for r in 0..slots {
                let val = if r < lp { &pv[r * d..][s.clone()] } else { &v0[b * d..][s.clone()] };
                for (acc, v) in oh.iter_mut().zip(val) {
                    *acc += w[r] * *v;
                }
            }
        }
    }
    let mut out = nn::linear(&o, batch, &p.w_o, None);
    for (y, x) in out.iter_mut().zip(xq) {
        *y += *x;
    }
    let cache = TunerCache {
        batch,
        xq: xq.to_vec(),
        xkv: xkv.to_vec(),
        q,
        k0,
        v0,
        weights,
        o,
    };
    (out, cache)
}

/// Backward of [`tuner_forward`]. Returns `(d_xq, d_xkv)`.
pub fn tuner_backward<F: Real>(
    cfg: &AttentionConfig,
    p: &TunerParams<F>,
    cache: &TunerCache<F>,
    d_out: &[F],
    g: &mut TunerParams<F>,
) -> (Vec<F>, Vec<F>) {
    let d = cfg.d_model;
    let dh = cfg.d_head();
    let lp = p.prefix.len();
    let slots = lp + 1;
    let batch = cache.batch;
    let scale = F::one() / F::lit(dh as f64).sqrt();
    let pk = p.prefix.keys.data();
    let pv = p.prefix.values.data();

    let d_o = nn::linear_backward(&cache.o, batch, &p.w_o, d_out, &mut g.w_o, None, true).expect("dx requested");
    let mut dq = vec![F::zero(); batch * d];
    let mut dk0 = vec![F::zero(); batch * d];
    let mut dv0 = vec![F::zero(); batch * d];
    let mut da = vec![F::zero(); slots];
    for b in 0..batch {
        for h in 0..cfg.n_heads {
            let s = h * dh..(h + 1) * dh;
            let w = &cache.weights[(b * cfg.n_heads + h) * slots..][..slots];
            let doh = &d_o[b * d..][s.clone()];
            for r in 0..slots {
                let val = if r < lp { &pv[r * d..][s.clone()] } else { &cache.v0[b * d..][s.clone()] };
                da[r] = doh.iter().zip(val).map(|(a, v)| *a * *v).sum();
                let dval = if r < lp {
                    &mut g.prefix.values.data_mut()[r * d..][s.clone()]
                } else {
                    &mut dv0[b * d..][s.clone()]
                };
                for (dv, go) in dval.iter_mut().zip(doh) {
                    *dv += w[r] * *go;
                }
            }
            let dot: F = w.iter().zip(&da).map(|(a, b)| *a * *b).sum();
            let qh = &cache.q[b * d..][s.clone()];
            for r in 0..slots {
                let dlogit = w[r] * (da[r] - dot) * scale;
                let key = if r < lp { &pk[r * d..][s.clone()] } else { &cache.k0[b * d..][s.clone()] };
                for (dqi, k) in dq[b * d..][s.clone()].iter_mut().zip(key) {
                    *dqi += dlogit * *k;
                }
                let dkey = if r < lp {
                    &mut g.prefix.keys.data_mut()[r * d..][s.clone()]
                } else {
                    &mut dk0[b * d..][s.clone()]
                };
                for (dk, qv) in dkey.iter_mut().zip(qh) {
                    *dk += dlogit * *qv;
                }
            }
        }
    }
    let mut dxq = nn::linear_backward(&cache.xq, batch, &p.w_q, &dq, &mut g.w_q, None, true).expect("dx");
    for (a, b) in dxq.iter_mut().zip(d_out) {
        *a += *b;
    }
    let mut dxkv = nn::linear_backward(&cache.xkv, batch, &p.w_k, &dk0, &mut g.w_k, None, true).expect("dx");
    let dxv = nn::linear_backward(&cache.xkv, batch, &p.w_v, &dv0, &mut g.w_v, None, true).expect("dx");
    for (a, b) in dxkv.iter_mut().zip(&dxv) {
        *a += *b;
    }
    (dxq, dxkv)
}

fn check_embedding(e: &Embedding, d: usize, what: &str) -> Result<()> {
    if e.len() != d {
        return Err(Error::shape(format!("{what} embedding length"), d, e.len()));
    }
    if e.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what} embedding")));
    }
    Ok(())
}

fn fused_kind(query: EmbeddingKind) -> EmbeddingKind {
    match query {
        EmbeddingKind::Speaker | EmbeddingKind::FusedSpk => EmbeddingKind::FusedSpk,
        EmbeddingKind::Language | EmbeddingKind::FusedLng => EmbeddingKind::FusedLng,
    }
}

/// One tuner applied to a single query/key-value embedding pair.
pub fn prefix_cross_attention<F: Real>(
    cfg: &AttentionConfig,
    tuner: &TunerParams<F>,
    query: &Embedding,
    kv: &Embedding,
) -> Result<Embedding> {
    Ok(prefix_cross_attention_with_weights(cfg, tuner, query, kv)?.0)
}

/// As [`prefix_cross_attention`], also returning per-head attention weights
/// (`n_heads` rows of `prefix_len + 1`, base token last).
pub fn prefix_cross_attention_with_weights<F: Real>(
    cfg: &AttentionConfig,
    tuner: &TunerParams<F>,
    query: &Embedding,
    kv: &Embedding,
) -> Result<(Embedding, Vec<Vec<f64>>)> {
    cfg.validate()?;
    check_embedding(query, cfg.d_model, "query")?;
    check_embedding(kv, cfg.d_model, "key/value")?;
    let (out, cache) = tuner_forward(cfg, tuner, &query.to_real::<F>(), &kv.to_real::<F>(), 1);
    let slots = tuner.prefix.len() + 1;
    let weights = cache
        .weights
        .chunks_exact(slots)
        .map(|w| w.iter().map(|v| v.as_f64()).collect())
        .collect();
    let emb = Embedding::new(out.iter().map(|v| v.as_f64()).collect(), fused_kind(query.kind))?;
    Ok((emb, weights))
}

/// Returns `(E_spk-lng, E_lng-spk)`.
pub fn fuse<F: Real>(params: &FusionParams<F>, e_spk: &Embedding, e_lng: &Embedding) -> Result<(Embedding, Embedding)> {
    if e_spk.kind != EmbeddingKind::Speaker || e_lng.kind != EmbeddingKind::Language {
        return Err(Error::Input(format!(
            "fuse expects (speaker, language) embeddings, got ({:?}, {:?})",
            e_spk.kind, e_lng.kind
        )));
    }
    let a = prefix_cross_attention(&params.config, &params.spk, e_spk, e_lng)?;
    let b = prefix_cross_attention(&params.config, &params.lang, e_lng, e_spk)?;
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn emb(d: usize, kind: EmbeddingKind, seed: u64) -> Embedding {
        let mut rng = stream(seed, "emb", 0);
        Embedding::new((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(), kind).unwrap()
    }

    fn random_tuner(cfg: &AttentionConfig, seed: u64) -> TunerParams<f64> {
        let mut rng = stream(seed, "tuner", 0);
        let mut t = TunerParams::init(cfg, &mut rng);
        t.w_o = nn::uniform(&[cfg.d_model, cfg.d_model], 0.3, &mut rng);
        t
    }

    fn matvec(w: &Tensor<f64>, x: &[f64]) -> Vec<f64> {
        let n = w.shape()[1];
        w.data().chunks_exact(n).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }

    #[test]
    fn no_prefix_reduces_to_projected_value() {
        let cfg = AttentionConfig {
            d_model: 8,
            n_heads: 2,
            prefix_len: 0,
        };
        let t = random_tuner(&cfg, 1);
        let q = emb(8, EmbeddingKind::Speaker, 2);
        let kv = emb(8, EmbeddingKind::Language, 3);
        let (out, w) = prefix_cross_attention_with_weights(&cfg, &t, &q, &kv).unwrap();
        assert!(w.iter().all(|h| h == &vec![1.0]));
        let expect: Vec<f64> = matvec(&t.w_o, &matvec(&t.w_v, &kv.values))
            .iter()
            .zip(&q.values)
            .map(|(a, b)| a + b)
            .collect();
        for (a, b) in out.values.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(out.kind, EmbeddingKind::FusedSpk);
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let cfg = AttentionConfig {
            d_model: 8,
            n_heads: 2,
            prefix_len: 3,
        };
        let mut t = random_tuner(&cfg, 4);
        let q = emb(8, EmbeddingKind::Speaker, 5);
        let kv = emb(8, EmbeddingKind::Language, 6);
        let k0 = matvec(&t.w_k, &kv.values);
        for r in 0..3 {
            t.prefix.keys.data_mut()[r * 8..(r + 1) * 8].copy_from_slice(&k0);
        }
        let (out, w) = prefix_cross_attention_with_weights(&cfg, &t, &q, &kv).unwrap();
        for head in &w {
            for &x in head {
                assert!((x - 0.25).abs() < 1e-12);
            }
        }
        let v0 = matvec(&t.w_v, &kv.values);
        let mean_v: Vec<f64> = (0..8)
            .map(|j| ((0..3).map(|r| t.prefix.values.data()[r * 8 + j]).sum::<f64>() + v0[j]) / 4.0)
            .collect();
        let expect: Vec<f64> = matvec(&t.w_o, &mean_v).iter().zip(&q.values).map(|(a, b)| a + b).collect();
        for (a, b) in out.values.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_tuners_pass_inputs_through() {
        let cfg = AttentionConfig::default();
        let p = FusionParams {
            config: cfg.clone(),
            spk: TunerParams::<f64>::zeros(&cfg),
            lang: TunerParams::zeros(&cfg),
        };
        let s = emb(64, EmbeddingKind::Speaker, 7);
        let l = emb(64, EmbeddingKind::Language, 8);
        let (a, b) = fuse(&p, &s, &l).unwrap();
        assert_eq!(a.values, s.values);
        assert_eq!(b.values, l.values);
        assert_eq!((a.kind, b.kind), (EmbeddingKind::FusedSpk, EmbeddingKind::FusedLng));
        assert!(fuse(&p, &l, &s).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = AttentionConfig::default();
        let t = random_tuner(&cfg, 9);
        let short = emb(32, EmbeddingKind::Speaker, 1);
        let ok = emb(64, EmbeddingKind::Language, 2);
        assert!(prefix_cross_attention(&cfg, &t, &short, &ok).is_err());
        let mut nan = emb(64, EmbeddingKind::Speaker, 3);
        nan.values[0] = f64::NAN;
        assert!(matches!(prefix_cross_attention(&cfg, &t, &nan, &ok), Err(Error::NonFinite(_))));
        assert!(AttentionConfig {
            d_model: 64,
            n_heads: 5,
            prefix_len: 1
        }
        .validate()
        .is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cfg = AttentionConfig {
            d_model: 8,
            n_heads: 2,
            prefix_len: 3,
        };
        let t = random_tuner(&cfg, 10);
        let mut rng = stream(12, "x", 0);
        let batch = 2;
        let xq: Vec<f64> = (0..batch * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xkv: Vec<f64> = (0..batch * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let probe: Vec<f64> = (0..batch * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |t: &TunerParams<f64>, xq: &[f64], xkv: &[f64]| -> f64 {
            let (y, _) = tuner_forward(&cfg, t, xq, xkv, batch);
            y.iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = tuner_forward(&cfg, &t, &xq, &xkv, batch);
        let mut g = TunerParams::zeros(&cfg);
        let (dxq, dxkv) = tuner_backward(&cfg, &t, &cache, &probe, &mut g);
        let h = 1e-6;
        let grads: Vec<Vec<f64>> = g.named().into_iter().map(|(_, t)| t.data().to_vec()).collect();
        for (ti, analytic) in grads.iter().enumerate() {
            for i in 0..analytic.len() {
                let mut tp = t.clone();
                tp.named_mut()[ti].1.data_mut()[i] += h;
                let mut tm = t.clone();
                tm.named_mut()[ti].1.data_mut()[i] -= h;
                let fd = (loss(&tp, &xq, &xkv) - loss(&tm, &xq, &xkv)) / (2.0 * h);
                assert!((fd - analytic[i]).abs() < 1e-7 * (1.0 + fd.abs()), "tensor {ti} elem {i}");
            }
        }
        for i in 0..xq.len() {
            let (mut p, mut m) = (xq.clone(), xq.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (loss(&t, &p, &xkv) - loss(&t, &m, &xkv)) / (2.0 * h);
            assert!((fd - dxq[i]).abs() < 1e-7 * (1.0 + fd.abs()));
            let (mut p, mut m) = (xkv.clone(), xkv.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (loss(&t, &xq, &p) - loss(&t, &xq, &m)) / (2.0 * h);
            assert!((fd - dxkv[i]).abs() < 1e-7 * (1.0 + fd.abs()));
        }
    }
}
