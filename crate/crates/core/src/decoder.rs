//! Recurrent mel reconstruction from the two fused embeddings.
//!
//! `z = [E_spk-lng; E_lng-spk]` is projected once and fed as the input at
//! every step (constant-input conditioning); the hidden state starts at zero
//! and each step's hidden state maps affinely to one mel frame.

use serde::{Deserialize, Serialize};

use crate::encoders::Embedding;
use crate::error::{Error, Result};
use crate::features::MelSpectrogram;
use crate::nn::{self, sigmoid};
use crate::real::{matmul, Op, Real};
use crate::rng::StreamRng;
use crate::tensor::{join, ParamSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Lstm,
    Gru,
}

impl CellKind {
    pub fn gates(self) -> usize {
        match self {
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub hidden: usize,
    pub cell: CellKind,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            hidden: 128,
            cell: CellKind::Lstm,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams<F> {
    pub cell: CellKind,
    pub embed_dim: usize,
    pub hidden: usize,
    pub n_mels: usize,
    /// `hidden × 2J`
    pub in_w: Tensor<F>,
    pub in_b: Tensor<F>,
    /// `gates·hidden × hidden`, input side
    pub w_x: Tensor<F>,
    /// `gates·hidden × hidden`, recurrent side
    pub w_h: Tensor<F>,
    pub b_x: Tensor<F>,
    /// GRU only: recurrent-side bias (the candidate gate needs its own)
    pub b_h: Option<Tensor<F>>,
    /// `n_mels × hidden`
    pub out_w: Tensor<F>,
    pub out_b: Tensor<F>,
}

impl<F: Real> ParamSet<F> for DecoderParams<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<F>)>) {
        out.push((join(prefix, "in.weight"), &self.in_w));
        out.push((join(prefix, "in.bias"), &self.in_b));
        out.push((join(prefix, "cell.w_x"), &self.w_x));
        out.push((join(prefix, "cell.w_h"), &self.w_h));
        out.push((join(prefix, "cell.b_x"), &self.b_x));
        if let Some(b) = &self.b_h {
            out.push((join(prefix, "cell.b_h"), b));
        }
        out.push((join(prefix, "out.weight"), &self.out_w));
        out.push((join(prefix, "out.bias"), &self.out_b));
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<F>)>) {
        out.push((join(prefix, "in.weight"), &mut self.in_w));
        out.push((join(prefix, "in.bias"), &mut self.in_b));
        out.push((join(prefix, "cell.w_x"), &mut self.w_x));
        out.push((join(prefix, "cell.w_h"), &mut self.w_h));
        out.push((join(prefix, "cell.b_x"), &mut self.b_x));
        if let Some(b) = &mut self.b_h {
            out.push((join(prefix, "cell.b_h"), b));
        }
        out.push((join(prefix, "out.weight"), &mut self.out_w));
        out.push((join(prefix, "out.bias"), &mut self.out_b));
    }
}

impl<F: Real> DecoderParams<F> {
    pub fn init(cfg: &DecoderConfig, embed_dim: usize, n_mels: usize, rng: &mut StreamRng) -> Result<Self> {
        if cfg.hidden == 0 {
            return Err(Error::Config("decoder: hidden must be positive".into()));
        }
        let (h, g) = (cfg.hidden, cfg.cell.gates());
        let rec = 1.0 / (h as f64).sqrt();
        Ok(DecoderParams {
            cell: cfg.cell,
            embed_dim,
            hidden: h,
            n_mels,
            in_w: nn::kaiming_uniform(&[h, 2 * embed_dim], 2 * embed_dim, rng),
            in_b: Tensor::zeros(&[h]),
            w_x: nn::uniform(&[g * h, h], rec, rng),
            w_h: nn::uniform(&[g * h, h], rec, rng),
            b_x: Tensor::zeros(&[g * h]),
            b_h: (cfg.cell == CellKind::Gru).then(|| Tensor::zeros(&[g * h])),
            out_w: nn::kaiming_uniform(&[n_mels, h], h, rng),
            out_b: Tensor::zeros(&[n_mels]),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero_grad();
        z
    }

    pub fn cast<G: Real>(&self) -> DecoderParams<G> {
        DecoderParams {
            cell: self.cell,
            embed_dim: self.embed_dim,
            hidden: self.hidden,
            n_mels: self.n_mels,
            in_w: self.in_w.cast(),
            in_b: self.in_b.cast(),
            w_x: self.w_x.cast(),
            w_h: self.w_h.cast(),
            b_x: self.b_x.cast(),
            b_h: self.b_h.as_ref().map(|b| b.cast()),
            out_w: self.out_w.cast(),
            out_b: self.out_b.cast(),
        }
    }
}

/// Per-step activations, all laid out `T × B × ·`.
pub struct DecoderCache<F> {
    batch: usize,
    steps: usize,
    z: Vec<F>,
    u: Vec<F>,
    /// LSTM: activated i,f,g,o. GRU: r, z, n, then `W_hn·h + b_hn`.
    gates: Vec<F>,
    cells: Vec<F>,
    hs: Vec<F>,
}

fn tanh<F: Real>(x: F) -> F {
    x.tanh()
}

/// Batched decode of `z` (`B × 2J`) into `B × T × M` frames.
pub fn forward<F: Real>(p: &DecoderParams<F>, z: &[F], batch: usize, steps: usize) -> (Vec<F>, DecoderCache<F>) {
    let h = p.hidden;
    let u = nn::linear(z, batch, &p.in_w, Some(&p.in_b));
    let gx = nn::linear(&u, batch, &p.w_x, Some(&p.b_x));
    // both cells cache four gate-width blocks per step
    let gw = 4 * h;
    let mut gates = vec![F::zero(); steps * batch * gw];
    let mut cells = if p.cell == CellKind::Lstm {
        vec![F::zero(); steps * batch * h]
    } else {
        Vec::new()
    };
    let mut hs = vec![F::zero(); steps * batch * h];
    let mut h_prev = vec![F::zero(); batch * h];
    let mut c_prev = vec![F::zero(); batch * h];
    let ng = p.cell.gates() * h;
    let mut rec = vec![F::zero(); batch * ng];

    for t in 0..steps {
        match p.b_h.as_ref() {
            Some(bh) => {
                for row in rec.chunks_exact_mut(ng) {
                    row.copy_from_slice(bh.data());
                }
                matmul(Op::N, Op::T, batch, h, ng, F::one(), &h_prev, p.w_h.data(), F::one(), &mut rec);
            }
            None => matmul(Op::N, Op::T, batch, h, ng, F::one(), &h_prev, p.w_h.data(), F::zero(), &mut rec),
        }
        let gt = &mut gates[t * batch * gw..(t + 1) * batch * gw];
        let ht = &mut hs[t * batch * h..(t + 1) * batch * h];
        for b in 0..batch {
            let x = &gx[b * ng..(b + 1) * ng];
            let r = &rec[b * ng..(b + 1) * ng];
            let g = &mut gt[b * gw..(b + 1) * gw];
            match p.cell {
                CellKind::Lstm => {
                    for j in 0..h {
                        let i_ = sigmoid(x[j] + r[j]);
                        let f_ = sigmoid(x[h + j] + r[h + j]);
                        let g_ = tanh(x[2 * h + j] + r[2 * h + j]);
                        let o_ = sigmoid(x[3 * h + j] + r[3 * h + j]);
                        let c = f_ * c_prev[b * h + j] + i_ * g_;
                        g[j] = i_;
                        g[h + j] = f_;
                        g[2 * h + j] = g_;
                        g[3 * h + j] = o_;
                        cells[(t * batch + b) * h + j] = c;
                        c_prev[b * h + j] = c;
                        ht[b * h + j] = o_ * tanh(c);
                    }
                }
                CellKind::Gru => {
                    for j in 0..h {
                        let r_ = sigmoid(x[j] + r[j]);
                        let z_ = sigmoid(x[h + j] + r[h + j]);
                        let hn = r[2 * h + j];
                        let n_ = tanh(x[2 * h + j] + r_ * hn);
                        g[j] = r_;
                        g[h + j] = z_;
                        g[2 * h + j] = n_;
                        g[3 * h + j] = hn;
                        ht[b * h + j] = (F::one() - z_) * n_ + z_ * h_prev[b * h + j];
                    }
                }
            }
        }
        h_prev.copy_from_slice(ht);
    }

    // frames for all (t, b) at once, then reorder to B × T × M
    let m = p.n_mels;
    let y_tb = nn::linear(&hs, steps * batch, &p.out_w, Some(&p.out_b));
    let mut y = vec![F::zero(); batch * steps * m];
    for t in 0..steps {
        for b in 0..batch {
            y[(b * steps + t) * m..][..m].copy_from_slice(&y_tb[(t * batch + b) * m..][..m]);
        }
    }
    let cache = DecoderCache {
        batch,
        steps,
        z: z.to_vec(),
        u,
        gates,
        cells,
        hs,
    };
    (y, cache)
}

/// Backward of [`forward`] given `dy` (`B × T × M`); returns `dz`.
pub fn backward<F: Real>(p: &DecoderParams<F>, cache: &DecoderCache<F>, dy: &[F], g: &mut DecoderParams<F>) -> Vec<F> {
    let (batch, steps, h, m) = (cache.batch, cache.steps, p.hidden, p.n_mels);
    let ng = p.cell.gates() * h;
    let gw = 4 * h;
    let mut dy_tb = vec![F::zero(); steps * batch * m];
    for t in 0..steps {
        for b in 0..batch {
            dy_tb[(t * batch + b) * m..][..m].copy_from_slice(&dy[(b * steps + t) * m..][..m]);
        }
    }
    let dh_out = nn::linear_backward(&cache.hs, steps * batch, &p.out_w, &dy_tb, &mut g.out_w, Some(&mut g.out_b), true)
        .expect("dx requested");

    // pre-activation gradients of input-side and recurrent-side gate sums
    let mut dgx_all = vec![F::zero(); steps * batch * ng];
    let mut dgh_all = vec![F::zero(); steps * batch * ng];
    let mut dh_next = vec![F::zero(); batch * h];
    let mut dc_next = vec![F::zero(); batch * h];
    let zero_h = vec![F::zero(); batch * h];

    for t in (0..steps).rev() {
        let gt = &cache.gates[t * batch * gw..(t + 1) * batch * gw];
        let h_prev = if t > 0 {
            &cache.hs[(t - 1) * batch * h..t * batch * h]
        } else {
            &zero_h[..]
        };
        let dgx = &mut dgx_all[t * batch * ng..(t + 1) * batch * ng];
        let dgh = &mut dgh_all[t * batch * ng..(t + 1) * batch * ng];
        let mut dh_direct = vec![F::zero(); batch * h];
        for b in 0..batch {
            let gg = &gt[b * gw..(b + 1) * gw];
            for j in 0..h {
                let k = b * h + j;
                let dh = dh_out[(t * batch + b) * h + j] + dh_next[k];
                match p.cell {
                    CellKind::Lstm => {
                        let (i_, f_, g_, o_) = (gg[j], gg[h + j], gg[2 * h + j], gg[3 * h + j]);
                        let c = cache.cells[(t * batch + b) * h + j];
                        let c_prev = if t > 0 {
                            cache.cells[((t - 1) * batch + b) * h + j]
                        } else {
                            F::zero()
                        };
                        let tc = tanh(c);
                        let d_o = dh * tc;
                        let dc = dh * o_ * (F::one() - tc * tc) + dc_next[k];
                        let (di, dg, df) = (dc * g_, dc * i_, dc * c_prev);
                        dc_next[k] = dc * f_;
                        let row = b * ng;
                        dgx[row + j] = di * i_ * (F::one() - i_);
                        dgx[row + h + j] = df * f_ * (F::one() - f_);
                        dgx[row + 2 * h + j] = dg * (F::one() - g_ * g_);
                        dgx[row + 3 * h + j] = d_o * o_ * (F::one() - o_);
                        for q in 0..4 {
                            dgh[row + q * h + j] = dgx[row + q * h + j];
                        }
                    }
                    CellKind::Gru => {
                        let (r_, z_, n_, hn) = (gg[j], gg[h + j], gg[2 * h + j], gg[3 * h + j]);
                        let hp = h_prev[k];
                        let dn = dh * (F::one() - z_);
                        let dz = dh * (hp - n_);
                        dh_direct[k] = dh * z_;
                        let dan = dn * (F::one() - n_ * n_);
                        let dar = dan * hn * r_ * (F::one() - r_);
                        let daz = dz * z_ * (F::one() - z_);
                        let row = b * ng;
                        dgx[row + j] = dar;
                        dgx[row + h + j] = daz;
                        dgx[row + 2 * h + j] = dan;
                        dgh[row + j] = dar;
                        dgh[row + h + j] = daz;
                        dgh[row + 2 * h + j] = dan * r_;
                    }
                }
            }
        }
        // dh_{t-1} = dgh · W_h (+ direct GRU path)
        matmul(Op::N, Op::N, batch, ng, h, F::one(), dgh, p.w_h.data(), F::zero(), &mut dh_next);
        for (a, b) in dh_next.iter_mut().zip(&dh_direct) {
            *a += *b;
        }
    }

    // recurrent weights: sum_t dgh_tᵀ · h_{t-1}; step 0 sees h = 0
    if steps > 1 {
        let rows = (steps - 1) * batch;
        matmul(
            Op::T,
            Op::N,
            ng,
            rows,
            h,
            F::one(),
            &dgh_all[batch * ng..],
            &cache.hs[..rows * h],
            F::one(),
            g.w_h.data_mut(),
        );
    }
    if let Some(gbh) = g.b_h.as_mut() {
        for row in dgh_all.chunks_exact(ng) {
            for (a, b) in gbh.data_mut().iter_mut().zip(row) {
                *a += *b;
            }
        }
    }
    let mut dgx_sum = vec![F::zero(); batch * ng];
    for t in 0..steps {
        for (a, b) in dgx_sum.iter_mut().zip(&dgx_all[t * batch * ng..(t + 1) * batch * ng]) {
            *a += *b;
        }
    }
    let du = nn::linear_backward(&cache.u, batch, &p.w_x, &dgx_sum, &mut g.w_x, Some(&mut g.b_x), true).expect("dx");
    nn::linear_backward(&cache.z, batch, &p.in_w, &du, &mut g.in_w, Some(&mut g.in_b), true).expect("dx")
}

/// Reconstructs a `T × M` spectrogram from the fused embedding pair.
pub fn decode<F: Real>(
    p: &DecoderParams<F>,
    e_spk_lng: &Embedding,
    e_lng_spk: &Embedding,
    n_frames: usize,
) -> Result<MelSpectrogram> {
    if n_frames == 0 {
        return Err(Error::Input("decoder horizon must be at least one frame".into()));
    }
    for e in [e_spk_lng, e_lng_spk] {
        if e.len() != p.embed_dim {
            return Err(Error::shape("decoder input embedding", p.embed_dim, e.len()));
        }
    }
    let z: Vec<F> = e_spk_lng.to_real::<F>().into_iter().chain(e_lng_spk.to_real::<F>()).collect();
    let (y, _) = forward(p, &z, 1, n_frames);
    MelSpectrogram::from_frames(n_frames, p.n_mels, y.iter().map(|v| v.as_f32()).collect())
}
