//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use laspa_core::eval::{DcfConfig, ScoreSet};
use laspa_core::fusion::{AttentionConfig, TunerParams};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// FAR/FRR by direct counting at every candidate threshold.
fn sweep(s: &ScoreSet) -> Vec<(f64, f64)> {
    let mut ts: Vec<f64> = s.target_scores.iter().chain(&s.nontarget_scores).copied().collect();
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ts.dedup();
    ts.push(f64::INFINITY);
    ts.iter()
        .map(|&t| {
            let fa = s.nontarget_scores.iter().filter(|&&x| x >= t).count();
            let fr = s.target_scores.iter().filter(|&&x| x < t).count();
            (fa as f64 / s.nontarget_scores.len() as f64, fr as f64 / s.target_scores.len() as f64)
        })
        .collect()
}

pub fn oracle_eer(s: &ScoreSet) -> f64 {
    let pts = sweep(s);
    let mut k = 0;
    while pts[k].0 - pts[k].1 > 0.0 {
        k += 1;
    }
    let (far, frr) = pts[k];
    if far == frr || k == 0 {
        return 100.0 * far;
    }
    let (qfar, qfrr) = pts[k - 1];
    let (dq, d) = (qfar - qfrr, far - frr);
    100.0 * (qfar + dq / (dq - d) * (far - qfar))
}

pub fn oracle_dcf(s: &ScoreSet, c: &DcfConfig) -> f64 {
    let norm = (c.c_miss * c.p_target).min(c.c_fa * (1.0 - c.p_target));
    sweep(s)
        .into_iter()
        .map(|(far, frr)| c.c_miss * c.p_target * frr + c.c_fa * (1.0 - c.p_target) * far)
        .fold(f64::INFINITY, f64::min)
        / norm
}

pub fn random_set(rng: &mut ChaCha8Rng) -> ScoreSet {
    let n = rng.gen_range(2..=1000);
    let nt = rng.gen_range(1..n);
    // a coarse grid some of the time, to exercise ties
    let coarse = rng.gen_bool(0.3);
    let shift = rng.gen_range(0.0..2.0);
    let mut draw = |mu: f64| {
        let v: f64 = mu + rng.gen_range(-1.0..1.0);
        if coarse { (v * 8.0).round() / 8.0 } else { v }
    };
    let t = (0..nt).map(|_| draw(shift)).collect();
    let nn = (0..n - nt).map(|_| draw(0.0)).collect();
    ScoreSet::new(t, nn)
}

/// Softmax of `W_q q · [P_k; W_k kv]` recomputed with compensated summation.
pub fn oracle_weights(cfg: &AttentionConfig, p: &TunerParams<f64>, q: &[f64], kv: &[f64]) -> Vec<Vec<f64>> {
    let d = cfg.d_model;
    let dh = cfg.d_head();
    let mat = |w: &[f64], x: &[f64]| (0..d).map(|r| (0..d).map(|c| w[r * d + c] * x[c]).sum::<f64>()).collect::<Vec<_>>();
    let qq = mat(p.w_q.data(), q);
    let k0 = mat(p.w_k.data(), kv);
    let lp = p.prefix.len();
    (0..cfg.n_heads)
        .map(|h| {
            let s = h * dh..(h + 1) * dh;
            let logits: Vec<f64> = (0..=lp)
                .map(|r| {
                    let key = if r < lp { &p.prefix.keys.data()[r * d..][s.clone()] } else { &k0[s.clone()] };
                    qq[s.clone()].iter().zip(key).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let (mut sum, mut comp) = (0.0f64, 0.0f64);
            for v in &ex {
                let y = v - comp;
                let t = sum + y;
                comp = (t - sum) - y;
                sum = t;
            }
            ex.iter().map(|v| v / sum).collect()
        })
        .collect()
}


/// Single-token attention: the softmax weight is 1, so the output is
/// `q + W_o W_v kv`.
pub fn no_prefix_closed_form(p: &TunerParams<f64>, q: &[f64], kv: &[f64]) -> Vec<f64> {
    let d = q.len();
    let v: Vec<f64> = (0..d).map(|r| (0..d).map(|c| p.w_v.data()[r * d + c] * kv[c]).sum()).collect();
    (0..d).map(|r| q[r] + (0..d).map(|c| p.w_o.data()[r * d + c] * v[c]).sum::<f64>()).collect()
}

/// Random per-column affine map with non-zero scales.
pub fn affine_columns(m: &[f64], dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    let coef: Vec<(f64, f64)> = (0..dim)
        .map(|_| {
            let s = rng.gen_range(0.2..5.0) * if rng.gen_bool(0.5) { -1.0 } else { 1.0 };
            (s, rng.gen_range(-10.0..10.0))
        })
        .collect();
    m.iter().enumerate().map(|(i, v)| coef[i % dim].0 * v + coef[i % dim].1).collect()
}
