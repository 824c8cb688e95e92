//! Builds the forward graph: embedding block with gated time streams, stacked
//! decoder blocks mixing windowed-softmax and linear-attention heads, and the
//! vocabulary head. One graph per sequence; batching is the caller's loop.

use lifeseq_tensor::{Graph, NodeId, Tensor};
use rand::Rng;

use super::params::ModelParams;
use super::projections::Projections;
use crate::encode::PAD_ID;
use crate::rng::substream_indexed;
use crate::{Error, Result};

/// Normalizer guard for the linear-attention denominator.
pub(super) const PERFORMER_EPS: f64 = 1e-9;
/// Base of the fixed sinusoidal position table.
pub(super) const POS_BASE: f64 = 10_000.0;

/// Forward-pass switches. `train` enables dropout (seeded per call site from
/// `dropout_seed`); `include_time_streams` drops the positional and time
/// additions entirely, which must be output-identical to gates at zero.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOpts {
    pub train: bool,
    pub dropout_seed: u64,
    pub include_time_streams: bool,
}

impl Default for ForwardOpts {
    fn default() -> Self {
        ForwardOpts { train: false, dropout_seed: 0, include_time_streams: true }
    }
}

/// A built forward graph and its logits node (`len x vocab_size`).
pub struct ForwardBuild {
    pub graph: Graph,
    pub logits: NodeId,
}

/// A built training graph: summed cross-entropy over next-token targets and
/// the number of predicted (non-pad) positions. Callers divide by a token
/// count themselves so gradient accumulation stays exact.
pub struct LossBuild {
    pub graph: Graph,
    pub loss_sum: NodeId,
    pub n_predicted: usize,
}

/// Writes the sinusoidal position features for `pos` into `row`:
/// `sin(pos / base^(2i/d))` and `cos` on alternating columns.
pub(super) fn sinusoidal_row(pos: usize, row: &mut [f64]) {
    let d = row.len();
    for i in 0..d / 2 {
        let angle = pos as f64 / POS_BASE.powf((2 * i) as f64 / d as f64);
        row[2 * i] = angle.sin();
        row[2 * i + 1] = angle.cos();
    }
    if d % 2 == 1 {
        let i = d / 2;
        row[d - 1] = (pos as f64 / POS_BASE.powf((2 * i) as f64 / d as f64)).sin();
    }
}

/// Fixed position table for sequence positions `0..len`.
pub fn sinusoidal_table(len: usize, d_model: usize) -> Tensor {
    let mut t = Tensor::zeros(len, d_model);
    for pos in 0..len {
        sinusoidal_row(pos, t.row_mut(pos));
    }
    t
}

/// Per-site dropout seed, decorrelated across sites of one forward pass.
fn site_seed(root: u64, site: &mut u64) -> u64 {
    let s = substream_indexed(root, "dropout-site", *site).gen();
    *site += 1;
    s
}

fn validate_streams(params: &ModelParams, ids: &[u32], year_index: &[i32], age: &[i32]) -> Result<()> {
    let cfg = &params.config;
    if ids.is_empty() {
        return Err(Error::Model("empty sequence".into()));
    }
    if ids.len() > cfg.max_len {
        return Err(Error::Model(format!("sequence length {} exceeds max_len {}", ids.len(), cfg.max_len)));
    }
    if year_index.len() != ids.len() || age.len() != ids.len() {
        return Err(Error::Model(format!(
            "stream lengths differ: {} ids, {} year indices, {} ages",
            ids.len(),
            year_index.len(),
            age.len()
        )));
    }
    if let Some(&id) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::Model(format!("token id {id} outside vocabulary of {}", cfg.vocab_size)));
    }
    Ok(())
}

/// Builds the full forward graph for one sequence. Logits cover every
/// position; projections must match the model's layer/head layout.
pub fn build_forward(
    params: &ModelParams,
    proj: &Projections,
    ids: &[u32],
    year_index: &[i32],
    age: &[i32],
    opts: ForwardOpts,
) -> Result<ForwardBuild> {
    validate_streams(params, ids, year_index, age)?;
    let cfg = &params.config;
    let len = ids.len();
    let dh = cfg.head_dim();
    let scale_local = 1.0 / (dh as f64).sqrt();
    let scale_feat = 1.0 / (dh as f64).powf(0.25);
    let positions: Vec<usize> = (0..len).collect();
    let dropout = |g: &mut Graph, x: NodeId, site: &mut u64| -> Result<NodeId> {
        if opts.train && cfg.dropout_rate > 0.0 {
            Ok(g.dropout(x, cfg.dropout_rate, site_seed(opts.dropout_seed, site))?)
        } else {
            Ok(x)
        }
    };
    let mut site = 0u64;

    let mut g = Graph::new();
    let p = &params.set;

    // Embedding block: mean-centered token rows, then each time stream scaled
    // by its residual gate. Gates start at zero, so a fresh model reduces to
    // the centered token embeddings.
    let table = g.param(p, params.tokens)?;
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let gathered = g.gather_rows(table, &idx)?;
    let mut x = g.sub_row_mean(gathered)?;
    if opts.include_time_streams {
        let pos = g.input(sinusoidal_table(len, cfg.d_model));
        let a_pos = g.param(p, params.alpha_pos)?;
        let pos_gated = g.scale_by_scalar(pos, a_pos)?;
        x = g.add(x, pos_gated)?;

        let ages: Vec<f64> = age.iter().map(|&a| a as f64).collect();
        let aw = g.param(p, params.age_w)?;
        let aphi = g.param(p, params.age_phi)?;
        let aget = g.time2vec(aw, aphi, &ages, cfg.d_model / cfg.age_z)?;
        let a_age = g.param(p, params.alpha_age)?;
        let age_gated = g.scale_by_scalar(aget, a_age)?;
        x = g.add(x, age_gated)?;

        let years: Vec<f64> = year_index.iter().map(|&y| y as f64).collect();
        let yw = g.param(p, params.year_w)?;
        let yphi = g.param(p, params.year_phi)?;
        let yeart = g.time2vec(yw, yphi, &years, cfg.d_model / cfg.year_z)?;
        let a_year = g.param(p, params.alpha_year)?;
        let year_gated = g.scale_by_scalar(yeart, a_year)?;
        x = g.add(x, year_gated)?;
    }
    x = dropout(&mut g, x, &mut site)?;

    for (l, ids_l) in params.layers.iter().enumerate() {
        let norm1 = g.param(p, ids_l.norm1)?;
        let h = g.rmsnorm(x, norm1)?;
        let wq = g.param(p, ids_l.wq)?;
        let bq = g.param(p, ids_l.bq)?;
        let q = g.matmul(h, wq)?;
        let q = g.add_row(q, bq)?;
        let wk = g.param(p, ids_l.wk)?;
        let bk = g.param(p, ids_l.bk)?;
        let k = g.matmul(h, wk)?;
        let k = g.add_row(k, bk)?;
        let wv = g.param(p, ids_l.wv)?;
        let bv = g.param(p, ids_l.bv)?;
        let v = g.matmul(h, wv)?;
        let v = g.add_row(v, bv)?;

        let mut heads = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let (c0, c1) = (head * dh, (head + 1) * dh);
            let qh = g.slice_cols(q, c0, c1)?;
            let kh = g.slice_cols(k, c0, c1)?;
            let vh = g.slice_cols(v, c0, c1)?;
            if head < cfg.n_local_heads {
                heads.push(g.causal_attention(qh, kh, vh, scale_local, Some(cfg.local_window))?);
            } else {
                let omega = proj.head(l, head - cfg.n_local_heads);
                let qr = g.rope(qh, &positions, cfg.rope_base)?;
                let kr = g.rope(kh, &positions, cfg.rope_base)?;
                let qs = g.scale(qr, scale_feat)?;
                let ks = g.scale(kr, scale_feat)?;
                let pq = g.favor_features(qs, omega, true)?;
                let pk = g.favor_features(ks, omega, false)?;
                heads.push(g.performer_causal(pq, pk, vh, PERFORMER_EPS)?);
            }
        }
        let cat = g.concat_cols(&heads)?;
        let wo = g.param(p, ids_l.wo)?;
        let bo = g.param(p, ids_l.bo)?;
        let attn = g.matmul(cat, wo)?;
        let attn = g.add_row(attn, bo)?;
        let attn = dropout(&mut g, attn, &mut site)?;
        x = g.add(x, attn)?;

        let norm2 = g.param(p, ids_l.norm2)?;
        let h2 = g.rmsnorm(x, norm2)?;
        let ff1 = g.param(p, ids_l.ff1)?;
        let ff1_b = g.param(p, ids_l.ff1_b)?;
        let ff = g.matmul(h2, ff1)?;
        let ff = g.add_row(ff, ff1_b)?;
        let ff = g.gelu(ff)?;
        let ff2 = g.param(p, ids_l.ff2)?;
        let ff2_b = g.param(p, ids_l.ff2_b)?;
        let ff = g.matmul(ff, ff2)?;
        let ff = g.add_row(ff, ff2_b)?;
        let ff = dropout(&mut g, ff, &mut site)?;
        x = g.add(x, ff)?;
    }

    let hw = g.param(p, params.head_w)?;
    let hb = g.param(p, params.head_b)?;
    let logits = g.matmul(x, hw)?;
    let logits = g.add_row(logits, hb)?;
    Ok(ForwardBuild { graph: g, logits })
}

/// Forward plus summed next-token cross-entropy. Position `t` predicts token
/// `t+1`; positions whose target is padding are masked out.
pub fn build_loss_sum(
    params: &ModelParams,
    proj: &Projections,
    ids: &[u32],
    year_index: &[i32],
    age: &[i32],
    opts: ForwardOpts,
) -> Result<LossBuild> {
    if ids.len() < 2 {
        return Err(Error::Model(format!("need at least 2 tokens to predict, got {}", ids.len())));
    }
    let ForwardBuild { mut graph, logits } = build_forward(params, proj, ids, year_index, age, opts)?;
    let targets: Vec<usize> = ids[1..].iter().map(|&i| i as usize).collect();
    let mask: Vec<bool> = ids[1..].iter().map(|&i| i != PAD_ID).collect();
    let n_predicted = mask.iter().filter(|&&m| m).count();
    if n_predicted == 0 {
        return Err(Error::Model("all prediction targets are padding".into()));
    }
    let pred = graph.slice_rows(logits, 0, ids.len() - 1)?;
    let loss_sum = graph.cross_entropy_sum(pred, &targets, &mask)?;
    Ok(LossBuild { graph, loss_sum, n_predicted })
}
