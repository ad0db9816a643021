//! Joint objective terms: AAM-softmax on speaker embeddings, NLL on
//! language embeddings, mean absolute Pearson correlation (MAPC) between the
//! two raw embedding batches, and reconstruction MSE.
//!
//! Each `*_grad` function returns the loss together with the gradients the
//! trainer needs. Batches are flat row-major `batch × dim` slices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::MelSpectrogram;
use crate::nn;
use crate::real::Real;
use crate::rng::StreamRng;
use crate::tensor::{join, ParamSet, Tensor};

pub const NORM_EPS: f64 = 1e-12;
pub const MAPC_VAR_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub aam_scale: f64,
    pub aam_margin: f64,
    pub w_mse: f64,
    pub w_aam: f64,
    pub w_mapc: f64,
    pub w_nll: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            aam_scale: 30.0,
            aam_margin: 0.2,
            w_mse: 1.0,
            w_aam: 1.0,
            w_mapc: 1.0,
            w_nll: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        check_aam_constants(self.aam_scale, self.aam_margin)
    }
}

fn check_aam_constants(scale: f64, margin: f64) -> Result<()> {
    if !(scale > 0.0) {
        return Err(Error::Config(format!("AAM scale must be positive, got {scale}")));
    }
    if !(0.0..std::f64::consts::FRAC_PI_2).contains(&margin) {
        return Err(Error::Config(format!("AAM margin must lie in [0, π/2), got {margin}")));
    }
    Ok(())
}

/// `C × J` class weights; `bias` is present for the plain logits head.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead<F> {
    pub weight: Tensor<F>,
    pub bias: Option<Tensor<F>>,
}

impl<F: Real> ParamSet<F> for ClassifierHead<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<F>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<F>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        if let Some(b) = &mut self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }
}

impl<F: Real> ClassifierHead<F> {
    pub fn init(classes: usize, dim: usize, with_bias: bool, rng: &mut StreamRng) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("classifier needs at least 2 classes, got {classes}")));
        }
        Ok(ClassifierHead {
            weight: nn::kaiming_uniform(&[classes, dim], dim, rng),
            bias: with_bias.then(|| Tensor::zeros(&[classes])),
        })
    }

    pub fn classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero_grad();
        z
    }

    pub fn cast<G: Real>(&self) -> ClassifierHead<G> {
        ClassifierHead {
            weight: self.weight.cast(),
            bias: self.bias.as_ref().map(|b| b.cast()),
        }
    }
}

fn check_batch<F: Real>(emb: &[F], dim: usize, labels: &[usize], classes: usize) -> Result<usize> {
    if dim == 0 || !emb.len().is_multiple_of(dim) {
        return Err(Error::shape("embedding batch", dim, emb.len()));
    }
    let batch = emb.len() / dim;
    if batch == 0 || batch != labels.len() {
        return Err(Error::shape("label count", batch, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Input(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(batch)
}

fn normalize<F: Real>(v: &[F], what: &str) -> Result<(Vec<F>, F)> {
    let n = v.iter().map(|x| *x * *x).sum::<F>().sqrt();
    if !(n.as_f64() >= NORM_EPS) {
        return Err(Error::Input(format!("{what} has near-zero norm")));
    }
    Ok((v.iter().map(|x| *x / n).collect(), n))
}

/// Gradient of `g·x̂` w.r.t. `x` given `x̂ = x/‖x‖`.
fn normalize_backward<F: Real>(unit: &[F], norm: F, g: &[F]) -> Vec<F> {
    let dot: F = unit.iter().zip(g).map(|(a, b)| *a * *b).sum();
    unit.iter().zip(g).map(|(u, gi)| (*gi - *u * dot) / norm).collect()
}

/// Additive angular margin softmax. Returns `(loss, d_emb, d_weight)`.
pub fn aam_softmax_grad<F: Real>(
    head: &ClassifierHead<F>,
    emb: &[F],
    labels: &[usize],
    scale: f64,
    margin: f64,
) -> Result<(F, Vec<F>, Tensor<F>)> {
    check_aam_constants(scale, margin)?;
    let (c, j) = (head.classes(), head.dim());
    let batch = check_batch(emb, j, labels, c)?;
    let s = F::lit(scale);
    let m = F::lit(margin);
    let pi = F::lit(std::f64::consts::PI);
    let bn = F::lit(batch as f64);

    let mut rows = Vec::with_capacity(c);
    for k in 0..c {
        rows.push(normalize(&head.weight.data()[k * j..(k + 1) * j], &format!("class row {k}"))?);
    }
    let mut loss = F::zero();
    let mut d_emb = vec![F::zero(); emb.len()];
    let mut d_unit_rows = vec![vec![F::zero(); j]; c];
    let mut logits = vec![F::zero(); c];
    for b in 0..batch {
        let (e_hat, e_norm) = normalize(&emb[b * j..(b + 1) * j], &format!("embedding {b}"))?;
        let y = labels[b];
        let cos: Vec<F> = rows
            .iter()
            .map(|(w, _)| w.iter().zip(&e_hat).map(|(a, x)| *a * *x).sum())
            .collect();
        let cy = cos[y].max(-F::one()).min(F::one());
        let theta = cy.acos();
        let clamped = theta > pi - m;
        let theta_c = if clamped { pi - m } else { theta };
        let target = (theta_c + m).cos();
        for k in 0..c {
            logits[k] = s * if k == y { target } else { cos[k] };
        }
        loss += nn::log_sum_exp(&logits) - logits[y];
        nn::softmax_inplace(&mut logits);
        // logits now holds probabilities
        let mut d_cos: Vec<F> = (0..c).map(|k| s * logits[k] / bn).collect();
        d_cos[y] = s * (logits[y] - F::one()) / bn;
        let dtarget = if clamped {
            F::zero()
        } else {
            (theta + m).sin() / theta.sin().max(F::lit(1e-6))
        };
        d_cos[y] *= dtarget;

        let mut d_ehat = vec![F::zero(); j];
        for k in 0..c {
            let (w, _) = &rows[k];
            for q in 0..j {
                d_ehat[q] += d_cos[k] * w[q];
                d_unit_rows[k][q] += d_cos[k] * e_hat[q];
            }
        }
        let de = normalize_backward(&e_hat, e_norm, &d_ehat);
        d_emb[b * j..(b + 1) * j].copy_from_slice(&de);
    }
    let mut d_weight = Tensor::zeros(&[c, j]);
    for k in 0..c {
        let (w, n) = &rows[k];
        let dw = normalize_backward(w, *n, &d_unit_rows[k]);
        d_weight.data_mut()[k * j..(k + 1) * j].copy_from_slice(&dw);
    }
    Ok((loss / bn, d_emb, d_weight))
}

pub fn aam_softmax_loss(
    head: &ClassifierHead<f64>,
    emb: &[f64],
    labels: &[usize],
    scale: f64,
    margin: f64,
) -> Result<f64> {
    Ok(aam_softmax_grad(head, emb, labels, scale, margin)?.0)
}

/// Mean cross-entropy of an affine logits head.
/// Returns `(loss, d_emb, d_weight, d_bias)`.
pub fn nll_grad<F: Real>(
    head: &ClassifierHead<F>,
    emb: &[F],
    labels: &[usize],
) -> Result<(F, Vec<F>, Tensor<F>, Option<Tensor<F>>)> {
    let (c, j) = (head.classes(), head.dim());
    let batch = check_batch(emb, j, labels, c)?;
    let bn = F::lit(batch as f64);
    let logits = nn::linear(emb, batch, &head.weight, head.bias.as_ref());
    let mut loss = F::zero();
    let mut dl = vec![F::zero(); batch * c];
    for b in 0..batch {
        let row = &logits[b * c..(b + 1) * c];
        loss += nn::log_sum_exp(row) - row[labels[b]];
        let d = &mut dl[b * c..(b + 1) * c];
        d.copy_from_slice(row);
        nn::softmax_inplace(d);
        d[labels[b]] -= F::one();
        d.iter_mut().for_each(|v| *v /= bn);
    }
    let mut dw = Tensor::zeros(&[c, j]);
    let mut db = head.bias.as_ref().map(|_| Tensor::zeros(&[c]));
    let de = nn::linear_backward(emb, batch, &head.weight, &dl, &mut dw, db.as_mut(), true).expect("dx");
    Ok((loss / bn, de, dw, db))
}

pub fn nll_language_loss(head: &ClassifierHead<f64>, emb: &[f64], labels: &[usize]) -> Result<f64> {
    Ok(nll_grad(head, emb, labels)?.0)
}

struct Standardized<F> {
    /// column-major: `dim × batch`, unit-norm centred columns
    cols: Vec<F>,
    norms: Vec<F>,
    live: Vec<bool>,
}

fn standardize<F: Real>(x: &[F], batch: usize, dim: usize) -> Standardized<F> {
    let bn = F::lit(batch as f64);
    let mut cols = vec![F::zero(); dim * batch];
    let mut norms = vec![F::zero(); dim];
    let mut live = vec![false; dim];
    for i in 0..dim {
        let mean = (0..batch).map(|b| x[b * dim + i]).sum::<F>() / bn;
        let col = &mut cols[i * batch..(i + 1) * batch];
        for b in 0..batch {
            col[b] = x[b * dim + i] - mean;
        }
        let ss: F = col.iter().map(|v| *v * *v).sum();
        if (ss / bn).as_f64() >= MAPC_VAR_EPS {
            let n = ss.sqrt();
            col.iter_mut().for_each(|v| *v /= n);
            norms[i] = n;
            live[i] = true;
        } else {
            col.iter_mut().for_each(|v| *v = F::zero());
        }
    }
    Standardized { cols, norms, live }
}

fn sign<F: Real>(x: F) -> F {
    if x > F::zero() {
        F::one()
    } else if x < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

/// Sum in ascending order so the result does not depend on layout.
fn ordered_sum<F: Real>(mut v: Vec<F>) -> F {
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite correlations"));
    v.into_iter().fold(F::zero(), |acc, x| acc + x)
}

/// Mean |Pearson correlation| over all `dim_a × dim_b` column pairs.
/// Returns `(mapc, d_a, d_b)`.
pub fn mapc_grad<F: Real>(a: &[F], b: &[F], batch: usize, dim_a: usize, dim_b: usize) -> Result<(F, Vec<F>, Vec<F>)> {
    if batch < 3 {
        return Err(Error::Input(format!("MAPC needs a batch of at least 3, got {batch}")));
    }
    if a.len() != batch * dim_a {
        return Err(Error::shape("MAPC first batch", batch * dim_a, a.len()));
    }
    if b.len() != batch * dim_b {
        return Err(Error::shape("MAPC second batch", batch * dim_b, b.len()));
    }
    let sa = standardize(a, batch, dim_a);
    let sb = standardize(b, batch, dim_b);
    let denom = F::lit((dim_a * dim_b) as f64);
    let mut rho = vec![F::zero(); dim_a * dim_b];
    for i in 0..dim_a {
        let ca = &sa.cols[i * batch..(i + 1) * batch];
        for j in 0..dim_b {
            if sa.live[i] && sb.live[j] {
                let cb = &sb.cols[j * batch..(j + 1) * batch];
                rho[i * dim_b + j] = ca.iter().zip(cb).map(|(x, y)| *x * *y).sum();
            }
        }
    }
    let value = ordered_sum(rho.iter().map(|r| r.abs()).collect()) / denom;

    // gradients w.r.t. the standardized columns
    let mut dca = vec![F::zero(); dim_a * batch];
    let mut dcb = vec![F::zero(); dim_b * batch];
    for i in 0..dim_a {
        for j in 0..dim_b {
            let g = sign(rho[i * dim_b + j]) / denom;
            if g == F::zero() {
                continue;
            }
            for k in 0..batch {
                dca[i * batch + k] += g * sb.cols[j * batch + k];
                dcb[j * batch + k] += g * sa.cols[i * batch + k];
            }
        }
    }
    let back = |s: &Standardized<F>, dcols: &[F], dim: usize| -> Vec<F> {
        let mut dx = vec![F::zero(); batch * dim];
        let bn = F::lit(batch as f64);
        for i in 0..dim {
            if !s.live[i] {
                continue;
            }
            let col = &s.cols[i * batch..(i + 1) * batch];
            let du = normalize_backward(col, s.norms[i], &dcols[i * batch..(i + 1) * batch]);
            let mean = du.iter().copied().sum::<F>() / bn;
            for k in 0..batch {
                dx[k * dim + i] = du[k] - mean;
            }
        }
        dx
    };
    let da = back(&sa, &dca, dim_a);
    let db = back(&sb, &dcb, dim_b);
    Ok((value, da, db))
}

/// MAPC between two equally-shaped embedding batches (`batch × dim`, row-major).
pub fn mapc(e_spk: &[f64], e_lng: &[f64], dim: usize) -> Result<f64> {
    if dim == 0 || !e_spk.len().is_multiple_of(dim) {
        return Err(Error::shape("MAPC batch", dim, e_spk.len()));
    }
    let batch = e_spk.len() / dim;
    Ok(mapc_grad(e_spk, e_lng, batch, dim, dim)?.0)
}

/// Mean squared error and its gradient w.r.t. `pred`.
pub fn mse_grad<F: Real>(pred: &[F], target: &[F]) -> Result<(F, Vec<F>)> {
    if pred.len() != target.len() {
        return Err(Error::shape("MSE operands", target.len(), pred.len()));
    }
    if pred.is_empty() {
        return Err(Error::Input("MSE of empty operands".into()));
    }
    let n = F::lit(pred.len() as f64);
    let two = F::lit(2.0);
    let mut loss = F::zero();
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = *p - *t;
            loss += d * d;
            two * d / n
        })
        .collect();
    Ok((loss / n, grad))
}

pub fn mse_loss(x: &MelSpectrogram, x_hat: &MelSpectrogram) -> Result<f64> {
    if x.n_frames() != x_hat.n_frames() {
        return Err(Error::shape("reconstruction frames", x.n_frames(), x_hat.n_frames()));
    }
    if x.n_mels() != x_hat.n_mels() {
        return Err(Error::shape("reconstruction n_mels", x.n_mels(), x_hat.n_mels()));
    }
    let a: Vec<f64> = x_hat.frames().iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = x.frames().iter().map(|&v| v as f64).collect();
    Ok(mse_grad(&a, &b)?.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_mse: f64,
    pub l_aam: f64,
    pub l_mapc: f64,
    pub l_nll: f64,
    pub total: f64,
}

/// Unit-weight sum of the four terms.
pub fn total_loss(l_mse: f64, l_aam: f64, l_mapc: f64, l_nll: f64) -> Result<LossReport> {
    weighted_total(l_mse, l_aam, l_mapc, l_nll, &LossConfig::default())
}

pub fn weighted_total(l_mse: f64, l_aam: f64, l_mapc: f64, l_nll: f64, w: &LossConfig) -> Result<LossReport> {
    for (name, v) in [("l_mse", l_mse), ("l_aam", l_aam), ("l_mapc", l_mapc), ("l_nll", l_nll)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    Ok(LossReport {
        l_mse,
        l_aam,
        l_mapc,
        l_nll,
        total: w.w_mse * l_mse + w.w_aam * l_aam + w.w_mapc * l_mapc + w.w_nll * l_nll,
    })
}
