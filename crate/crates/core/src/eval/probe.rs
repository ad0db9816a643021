//! Linear language probe on frozen embeddings.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub test_fraction: f64,
    pub l2: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub max_split_attempts: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            test_fraction: 0.2,
            l2: 1e-4,
            max_iters: 10_000,
            grad_tol: 1e-6,
            max_split_attempts: 10,
        }
    }
}

/// Per-class shuffled split; `None` when some class misses a side.
fn stratified_split(labels: &[usize], n_classes: usize, frac: f64, seed: u64, attempt: u64) -> Option<(Vec<usize>, Vec<usize>)> {
    let mut rng = stream(seed.wrapping_add(attempt), "slr_split", 0);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..n_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng);
        let n_test = (idx.len() as f64 * frac).round() as usize;
        if n_test == 0 || n_test >= idx.len() {
            return None;
        }
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Some((train, test))
}

/// Multinomial logistic regression fitted by full-batch gradient descent.
pub struct LogisticProbe {
    dim: usize,
    n_classes: usize,
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `n_classes × (dim + 1)`, bias last
    weights: Vec<f64>,
    pub iterations: usize,
}

impl LogisticProbe {
    fn features(&self, x: &[f64]) -> Vec<f64> {
        let mut f: Vec<f64> = (0..self.dim).map(|i| (x[i] - self.mean[i]) / self.scale[i]).collect();
        f.push(1.0);
        f
    }

    fn probs(&self, f: &[f64]) -> Vec<f64> {
        let d = self.dim + 1;
        let mut z: Vec<f64> = (0..self.n_classes)
            .map(|c| self.weights[c * d..(c + 1) * d].iter().zip(f).map(|(w, x)| w * x).sum())
            .collect();
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in z.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        z.iter_mut().for_each(|v| *v /= sum);
        z
    }

    pub fn fit(rows: &[&[f64]], labels: &[usize], n_classes: usize, cfg: &ProbeConfig) -> Self {
        let dim = rows[0].len();
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..dim).map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..dim)
            .map(|i| {
                let var = rows.iter().map(|r| (r[i] - mean[i]).powi(2)).sum::<f64>() / n;
                if var > 1e-24 { var.sqrt() } else { 1.0 }
            })
            .collect();
        let d = dim + 1;
        let mut probe = LogisticProbe { dim, n_classes, mean, scale, weights: vec![0.0; n_classes * d], iterations: 0 };
        let feats: Vec<Vec<f64>> = rows.iter().map(|r| probe.features(r)).collect();
        // 1/L step, L bounding the Hessian of the mean cross-entropy
        let lipschitz = 0.5 * feats.iter().map(|f| f.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / n + cfg.l2;
        let lr = 1.0 / lipschitz;
        let mut grad = vec![0.0; n_classes * d];
        for it in 0..cfg.max_iters {
            grad.iter_mut().zip(&probe.weights).for_each(|(g, w)| *g = cfg.l2 * w);
            for (f, &y) in feats.iter().zip(labels) {
                let p = probe.probs(f);
                for c in 0..n_classes {
                    let r = (p[c] - (c == y) as u8 as f64) / n;
                    for k in 0..d {
                        grad[c * d + k] += r * f[k];
                    }
                }
            }
            probe.iterations = it + 1;
            if grad.iter().map(|g| g * g).sum::<f64>().sqrt() < cfg.grad_tol {
                break;
            }
            probe.weights.iter_mut().zip(&grad).for_each(|(w, g)| *w -= lr * g);
        }
        probe
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let p = self.probs(&self.features(x));
        (0..self.n_classes).fold(0, |best, c| if p[c] > p[best] { c } else { best })
    }
}

/// Held-out language accuracy (percent) of a linear probe on `embeddings`.
pub fn slr_probe(embeddings: &[Vec<f64>], labels: &[usize], n_classes: usize, split_seed: u64, cfg: &ProbeConfig) -> Result<f64> {
    if embeddings.len() != labels.len() {
        return Err(Error::shape("probe labels", embeddings.len(), labels.len()));
    }
    if n_classes < 2 {
        return Err(Error::Input("probe needs at least 2 classes".into()));
    }
    if embeddings.len() < 10 * n_classes {
        return Err(Error::Input(format!(
            "probe needs at least {} embeddings, got {}",
            10 * n_classes,
            embeddings.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::Input(format!("probe label {bad} out of range")));
    }
    let dim = embeddings[0].len();
    if dim == 0 || embeddings.iter().any(|e| e.len() != dim) {
        return Err(Error::Input("probe embeddings must share a non-zero dimension".into()));
    }
    let (train, test) = (0..cfg.max_split_attempts)
        .find_map(|a| stratified_split(labels, n_classes, cfg.test_fraction, split_seed, a))
        .ok_or_else(|| {
            Error::Input(format!("no split with every class on both sides after {} attempts", cfg.max_split_attempts))
        })?;
    let rows: Vec<&[f64]> = train.iter().map(|&i| embeddings[i].as_slice()).collect();
    let ys: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let probe = LogisticProbe::fit(&rows, &ys, n_classes, cfg);
    let correct = test.iter().filter(|&&i| probe.predict(&embeddings[i]) == labels[i]).count();
    Ok(100.0 * correct as f64 / test.len() as f64)
}
