//! Token-by-token decoding with constant state per step: a ring buffer of
//! recent keys/values per local head and running feature sums per global head.
//!
//! Every row operation here reuses the tensor crate's kernels and replicates
//! the batched forward's loop order exactly, so the logits of step `t` equal
//! row `t` of a full forward pass bit for bit. Any change to the forward pass
//! must be mirrored here; the equality test catches drift.

use std::collections::VecDeque;

use lifeseq_tensor::kernels::{axpy, dot, gelu_scalar, rope_apply, softmax_into, RMSNORM_EPS};
use lifeseq_tensor::Tensor;

use super::forward::{sinusoidal_row, PERFORMER_EPS};
use super::params::ModelParams;
use super::projections::Projections;
use crate::{Error, Result};

struct LocalHead {
    k: VecDeque<Vec<f64>>,
    v: VecDeque<Vec<f64>>,
}

struct GlobalHead {
    /// Running sum of `phi(k_s) (outer) v_s`, row-major `m x head_dim`.
    s: Vec<f64>,
    /// Running sum of `phi(k_s)`.
    z: Vec<f64>,
}

struct LayerState {
    locals: Vec<LocalHead>,
    globals: Vec<GlobalHead>,
}

/// Incremental evaluator over fixed parameters and projections.
pub struct DecodeState<'a> {
    params: &'a ModelParams,
    proj: &'a Projections,
    position: usize,
    layers: Vec<LayerState>,
}

impl<'a> DecodeState<'a> {
    pub fn new(params: &'a ModelParams, proj: &'a Projections) -> Self {
        let cfg = &params.config;
        let dh = cfg.head_dim();
        let m = cfg.n_random_features;
        let layers = (0..cfg.n_layers)
            .map(|_| LayerState {
                locals: (0..cfg.n_local_heads)
                    .map(|_| LocalHead { k: VecDeque::new(), v: VecDeque::new() })
                    .collect(),
                globals: (0..cfg.n_global_heads())
                    .map(|_| GlobalHead { s: vec![0.0; m * dh], z: vec![0.0; m] })
                    .collect(),
            })
            .collect();
        DecodeState { params, proj, position: 0, layers }
    }

    /// Number of tokens consumed so far; the next token lands at this position.
    pub fn position(&self) -> usize {
        self.position
    }

    /// Feeds one token and returns the logits row predicting its successor.
    pub fn step(&mut self, id: u32, year_index: i32, age: i32) -> Result<Vec<f64>> {
        let params = self.params;
        let proj = self.proj;
        let cfg = &params.config;
        if id as usize >= cfg.vocab_size {
            return Err(Error::Model(format!("token id {id} outside vocabulary of {}", cfg.vocab_size)));
        }
        if self.position >= cfg.max_len {
            return Err(Error::Model(format!("decode position {} reached max_len", self.position)));
        }
        let pos = self.position;
        let d = cfg.d_model;
        let dh = cfg.head_dim();
        let set = &params.set;
        let value = |pid| -> &Tensor { &set.get(pid).expect("handle was resolved at load").value };

        // Embedding: centered token row, then gated position/age/year streams
        // in the same order as the batched builder.
        let mut x: Vec<f64> = value(params.tokens).row(id as usize).to_vec();
        let mean = x.iter().sum::<f64>() / d as f64;
        for v in &mut x {
            *v -= mean;
        }
        let mut pos_row = vec![0.0; d];
        sinusoidal_row(pos, &mut pos_row);
        let a_pos = value(params.alpha_pos).data()[0];
        for j in 0..d {
            x[j] += pos_row[j] * a_pos;
        }
        let a_age = value(params.alpha_age).data()[0];
        add_time_stream(&mut x, value(params.age_w), value(params.age_phi), age as f64, d / cfg.age_z, a_age);
        let a_year = value(params.alpha_year).data()[0];
        add_time_stream(&mut x, value(params.year_w), value(params.year_phi), year_index as f64, d / cfg.year_z, a_year);

        let scale_local = 1.0 / (dh as f64).sqrt();
        let scale_feat = 1.0 / (dh as f64).powf(0.25);

        for (l, ids_l) in params.layers.iter().enumerate() {
            let state = &mut self.layers[l];
            let h = rmsnorm_row(&x, value(ids_l.norm1));
            let q = affine_row(&h, value(ids_l.wq), value(ids_l.bq));
            let k = affine_row(&h, value(ids_l.wk), value(ids_l.bk));
            let v = affine_row(&h, value(ids_l.wv), value(ids_l.bv));

            let mut cat = vec![0.0; cfg.attn_width()];
            for head in 0..cfg.n_heads {
                let (c0, c1) = (head * dh, (head + 1) * dh);
                let out = if head < cfg.n_local_heads {
                    local_head_step(
                        &mut state.locals[head],
                        &q[c0..c1],
                        &k[c0..c1],
                        &v[c0..c1],
                        scale_local,
                        cfg.local_window,
                    )
                } else {
                    global_head_step(
                        &mut state.globals[head - cfg.n_local_heads],
                        &q[c0..c1],
                        &k[c0..c1],
                        &v[c0..c1],
                        proj.head(l, head - cfg.n_local_heads),
                        pos,
                        cfg.rope_base,
                        scale_feat,
                    )
                };
                cat[c0..c1].copy_from_slice(&out);
            }
            let attn = affine_row(&cat, value(ids_l.wo), value(ids_l.bo));
            for j in 0..d {
                x[j] += attn[j];
            }

            let h2 = rmsnorm_row(&x, value(ids_l.norm2));
            let mut ff = affine_row(&h2, value(ids_l.ff1), value(ids_l.ff1_b));
            for f in &mut ff {
                *f = gelu_scalar(*f);
            }
            let ff = affine_row(&ff, value(ids_l.ff2), value(ids_l.ff2_b));
            for j in 0..d {
                x[j] += ff[j];
            }
        }

        self.position += 1;
        Ok(affine_row(&x, value(params.head_w), value(params.head_b)))
    }
}

/// `x W + b` for a single row, sharing the graph's matmul kernel.
fn affine_row(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (l, &av) in x.iter().enumerate() {
        if av != 0.0 {
            axpy(av, w.row(l), &mut out);
        }
    }
    for (o, &bv) in out.iter_mut().zip(b.data()) {
        *o += bv;
    }
    out
}

fn rmsnorm_row(x: &[f64], gain: &Tensor) -> Vec<f64> {
    let c = x.len();
    let ms = x.iter().map(|v| v * v).sum::<f64>() / c as f64;
    let inv = 1.0 / (ms + RMSNORM_EPS).sqrt();
    let gv = gain.data();
    (0..c).map(|j| gv[j] * x[j] * inv).collect()
}

fn add_time_stream(x: &mut [f64], w: &Tensor, phi: &Tensor, t: f64, n_tanh: usize, alpha: f64) {
    let wv = w.data();
    let pv = phi.data();
    for j in 0..x.len() {
        let u = wv[j] * t + pv[j];
        let f = if j < n_tanh { u.tanh() } else { u.sin() };
        x[j] += f * alpha;
    }
}

fn local_head_step(
    state: &mut LocalHead,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    scale: f64,
    window: usize,
) -> Vec<f64> {
    if state.k.len() == window {
        state.k.pop_front();
        state.v.pop_front();
    }
    state.k.push_back(k.to_vec());
    state.v.push_back(v.to_vec());
    let n = state.k.len();
    let mut scores = vec![0.0; n];
    for (j, ks) in state.k.iter().enumerate() {
        scores[j] = scale * dot(q, ks);
    }
    let mut probs = vec![0.0; n];
    softmax_into(&scores, &mut probs);
    let mut out = vec![0.0; v.len()];
    for (j, vs) in state.v.iter().enumerate() {
        let p = probs[j];
        for (oi, vi) in out.iter_mut().zip(vs) {
            *oi += p * vi;
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn global_head_step(
    state: &mut GlobalHead,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    omega: &Tensor,
    pos: usize,
    rope_base: f64,
    scale_feat: f64,
) -> Vec<f64> {
    let dh = q.len();
    let mut qr = Tensor::from_vec(1, dh, q.to_vec()).expect("sized data");
    let mut kr = Tensor::from_vec(1, dh, k.to_vec()).expect("sized data");
    rope_apply(&mut qr, &[pos], rope_base, 1.0);
    rope_apply(&mut kr, &[pos], rope_base, 1.0);
    let qs: Vec<f64> = qr.data().iter().map(|x| x * scale_feat).collect();
    let ks: Vec<f64> = kr.data().iter().map(|x| x * scale_feat).collect();
    let pq = favor_row(&qs, omega, true);
    let pk = favor_row(&ks, omega, false);

    // Same update-then-read order as the fused graph kernel: the current
    // token joins the running sums before they are queried.
    for (mu, &pkm) in pk.iter().enumerate() {
        state.z[mu] += pkm;
        if pkm != 0.0 {
            let srow = &mut state.s[mu * dh..(mu + 1) * dh];
            for (sj, &vj) in srow.iter_mut().zip(v) {
                *sj += pkm * vj;
            }
        }
    }
    let den = dot(&pq, &state.z) + PERFORMER_EPS;
    let mut out = vec![0.0; dh];
    for (mu, &pqm) in pq.iter().enumerate() {
        if pqm != 0.0 {
            let srow = &state.s[mu * dh..(mu + 1) * dh];
            for (oj, &sj) in out.iter_mut().zip(srow) {
                *oj += pqm * sj;
            }
        }
    }
    for oj in out.iter_mut() {
        *oj /= den;
    }
    out
}

fn favor_row(x: &[f64], omega: &Tensor, row_stab: bool) -> Vec<f64> {
    let m = omega.rows();
    let inv_sqrt_m = 1.0 / (m as f64).sqrt();
    let energy = 0.5 * dot(x, x);
    let mut o: Vec<f64> = (0..m).map(|mu| dot(x, omega.row(mu))).collect();
    let c = if row_stab { o.iter().cloned().fold(f64::NEG_INFINITY, f64::max) } else { 0.0 };
    for om in o.iter_mut() {
        *om = (*om - energy - c).exp() * inv_sqrt_m;
    }
    o
}
