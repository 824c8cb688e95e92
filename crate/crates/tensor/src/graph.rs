use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::param::{ParamId, ParamSet};
use crate::tensor::dot;
use crate::{Result, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_A: f64 = 0.044_715;
pub const RMSNORM_EPS: f64 = 1e-8;

/// Counters surfaced to callers instead of silent clamping.
#[derive(Debug, Clone, Copy, Default)]
pub struct GraphDiagnostics {
    /// Queries whose linear-attention normalizer fell below 1e-6.
    pub small_denominators: usize,
}

#[derive(Debug)]
pub(crate) enum Op {
    Input,
    Param(ParamId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow { mat: NodeId, row: NodeId },
    Scale { x: NodeId, c: f64 },
    ScaleByScalar { x: NodeId, s: NodeId },
    MatMul { a: NodeId, b: NodeId },
    Tanh(NodeId),
    Sin(NodeId),
    Exp(NodeId),
    Gelu(NodeId),
    SoftmaxRows(NodeId),
    MeanAll(NodeId),
    SumAll(NodeId),
    SliceCols { x: NodeId, c0: usize },
    SliceRows { x: NodeId, r0: usize },
    ConcatCols(Vec<NodeId>),
    GatherRows { table: NodeId, ids: Vec<usize> },
    SubRowMean(NodeId),
    RmsNorm { x: NodeId, gain: NodeId },
    Dropout { x: NodeId, mask: Vec<f64> },
    Rope { x: NodeId, positions: Vec<usize>, base: f64 },
    CausalAttention { q: NodeId, k: NodeId, v: NodeId, scale: f64, window: Option<usize>, probs: Vec<f64> },
    PerformerCausal { pq: NodeId, pk: NodeId, v: NodeId, dens: Vec<f64> },
    FavorFeatures { x: NodeId, omega: Box<Tensor> },
    CrossEntropySum { logits: NodeId, targets: Vec<usize>, mask: Vec<bool>, probs: Box<Tensor> },
    Time2Vec { w: NodeId, phi: NodeId, xs: Vec<f64>, n_tanh: usize },
}

/// Define-by-run tape. Construction is forward execution; [`Graph::backward`]
/// walks the tape once in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    pub(crate) values: Vec<Tensor>,
    pub(crate) ops: Vec<Op>,
    pub(crate) requires: Vec<bool>,
    pub(crate) backward_run: bool,
    non_smooth: Option<&'static str>,
    pub diagnostics: GraphDiagnostics,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Name of the first non-smooth operation recorded, if any.
    pub fn non_smooth_op(&self) -> Option<&'static str> {
        self.non_smooth
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn node_count(&self) -> usize {
        self.values.len()
    }

    fn push(&mut self, value: Tensor, op: Op, requires: bool) -> NodeId {
        let id = NodeId(self.values.len());
        self.values.push(value);
        self.ops.push(op);
        self.requires.push(requires);
        id
    }

    fn req(&self, id: NodeId) -> bool {
        self.requires[id.0]
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.values.len() {
            return Err(TensorError::UnknownNode(id.0));
        }
        Ok(())
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(usize, usize)> {
        self.check(a)?;
        self.check(b)?;
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if (ar, ac) != (br, bc) {
            return Err(TensorError::ShapeMismatch { op, lhs_rows: ar, lhs_cols: ac, rhs_rows: br, rhs_cols: bc });
        }
        Ok((ar, ac))
    }

    /// Constant leaf; gradients do not flow into it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input, false)
    }

    /// Trainable leaf; the current parameter value is copied into the graph.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Result<NodeId> {
        let p = params.get(id)?;
        Ok(self.push(p.value.clone(), Op::Param(id), true))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let _ = self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b), self.req(a) || self.req(b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let _ = self.same_shape("sub", a, b)?;
        let bv = self.value(b);
        let mut out = self.value(a).clone();
        for (o, s) in out.data_mut().iter_mut().zip(bv.data()) {
            *o -= s;
        }
        Ok(self.push(out, Op::Sub(a, b), self.req(a) || self.req(b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let _ = self.same_shape("mul", a, b)?;
        let bv = self.value(b);
        let mut out = self.value(a).clone();
        for (o, s) in out.data_mut().iter_mut().zip(bv.data()) {
            *o *= s;
        }
        Ok(self.push(out, Op::Mul(a, b), self.req(a) || self.req(b)))
    }

    /// Adds a `1 x c` row vector to every row of a matrix.
    pub fn add_row(&mut self, mat: NodeId, row: NodeId) -> Result<NodeId> {
        self.check(mat)?;
        self.check(row)?;
        let (r, c) = self.value(mat).shape();
        let (vr, vc) = self.value(row).shape();
        if vr != 1 || vc != c {
            return Err(TensorError::ShapeMismatch { op: "add_row", lhs_rows: r, lhs_cols: c, rhs_rows: vr, rhs_cols: vc });
        }
        let mut out = self.value(mat).clone();
        let rowv = self.value(row).data().to_vec();
        for i in 0..r {
            let o = out.row_mut(i);
            for j in 0..c {
                o[j] += rowv[j];
            }
        }
        Ok(self.push(out, Op::AddRow { mat, row }, self.req(mat) || self.req(row)))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.check(x)?;
        let out = self.value(x).map(|v| v * c);
        Ok(self.push(out, Op::Scale { x, c }, self.req(x)))
    }

    /// Multiplies every element by a trainable `1 x 1` scalar (residual gate).
    pub fn scale_by_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        self.check(x)?;
        self.check(s)?;
        let sv = self.value(s).item()?;
        let out = self.value(x).map(|v| v * sv);
        Ok(self.push(out, Op::ScaleByScalar { x, s }, self.req(x) || self.req(s)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul { a, b }, self.req(a) || self.req(b)))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let out = self.value(x).map(f64::tanh);
        Ok(self.push(out, Op::Tanh(x), self.req(x)))
    }

    pub fn sin(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let out = self.value(x).map(f64::sin);
        Ok(self.push(out, Op::Sin(x), self.req(x)))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let out = self.value(x).map(f64::exp);
        Ok(self.push(out, Op::Exp(x), self.req(x)))
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let out = self.value(x).map(gelu_scalar);
        Ok(self.push(out, Op::Gelu(x), self.req(x)))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let xv = self.value(x);
        let (r, c) = xv.shape();
        if c == 0 {
            return Err(TensorError::Invalid { op: "softmax_rows", msg: "zero columns".into() });
        }
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            softmax_into(xv.row(i), out.row_mut(i));
        }
        Ok(self.push(out, Op::SoftmaxRows(x), self.req(x)))
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(TensorError::Invalid { op: "mean_all", msg: "empty tensor".into() });
        }
        let m = xv.data().iter().sum::<f64>() / xv.len() as f64;
        Ok(self.push(Tensor::scalar(m), Op::MeanAll(x), self.req(x)))
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let s = self.value(x).data().iter().sum::<f64>();
        Ok(self.push(Tensor::scalar(s), Op::SumAll(x), self.req(x)))
    }

    pub fn slice_cols(&mut self, x: NodeId, c0: usize, c1: usize) -> Result<NodeId> {
        self.check(x)?;
        let xv = self.value(x);
        let (r, c) = xv.shape();
        if c0 >= c1 || c1 > c {
            return Err(TensorError::Invalid { op: "slice_cols", msg: format!("range {c0}..{c1} out of 0..{c}") });
        }
        let w = c1 - c0;
        let mut out = Tensor::zeros(r, w);
        for i in 0..r {
            out.row_mut(i).copy_from_slice(&xv.row(i)[c0..c1]);
        }
        Ok(self.push(out, Op::SliceCols { x, c0 }, self.req(x)))
    }

    pub fn slice_rows(&mut self, x: NodeId, r0: usize, r1: usize) -> Result<NodeId> {
        self.check(x)?;
        let xv = self.value(x);
        let (r, c) = xv.shape();
        if r0 >= r1 || r1 > r {
            return Err(TensorError::Invalid { op: "slice_rows", msg: format!("range {r0}..{r1} out of 0..{r}") });
        }
        let mut out = Tensor::zeros(r1 - r0, c);
        for i in r0..r1 {
            out.row_mut(i - r0).copy_from_slice(xv.row(i));
        }
        Ok(self.push(out, Op::SliceRows { x, r0 }, self.req(x)))
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(TensorError::Invalid { op: "concat_cols", msg: "no inputs".into() });
        }
        let r = self.value(xs[0]).rows();
        let mut total = 0;
        for &x in xs {
            self.check(x)?;
            let (xr, xc) = self.value(x).shape();
            if xr != r {
                return Err(TensorError::ShapeMismatch { op: "concat_cols", lhs_rows: r, lhs_cols: total, rhs_rows: xr, rhs_cols: xc });
            }
            total += xc;
        }
        let mut out = Tensor::zeros(r, total);
        let mut at = 0;
        for &x in xs {
            let xv = self.value(x);
            let w = xv.cols();
            for i in 0..r {
                out.row_mut(i)[at..at + w].copy_from_slice(xv.row(i));
            }
            at += w;
        }
        let requires = xs.iter().any(|&x| self.req(x));
        Ok(self.push(out, Op::ConcatCols(xs.to_vec()), requires))
    }

    /// Embedding lookup: stacks `table` rows selected by `ids`.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        self.check(table)?;
        let tv = self.value(table);
        let (v, d) = tv.shape();
        for &i in ids {
            if i >= v {
                return Err(TensorError::Invalid { op: "gather_rows", msg: format!("row {i} out of 0..{v}") });
            }
        }
        let mut out = Tensor::zeros(ids.len(), d);
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tv.row(i));
        }
        Ok(self.push(out, Op::GatherRows { table, ids: ids.to_vec() }, self.req(table)))
    }

    /// Subtracts each row's mean from that row.
    pub fn sub_row_mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let xv = self.value(x);
        let (r, c) = xv.shape();
        if c == 0 {
            return Err(TensorError::Invalid { op: "sub_row_mean", msg: "zero columns".into() });
        }
        let mut out = xv.clone();
        for i in 0..r {
            let row = out.row_mut(i);
            let m = row.iter().sum::<f64>() / c as f64;
            for v in row {
                *v -= m;
            }
        }
        Ok(self.push(out, Op::SubRowMean(x), self.req(x)))
    }

    /// Root-mean-square normalization per row with a learned per-column gain.
    pub fn rmsnorm(&mut self, x: NodeId, gain: NodeId) -> Result<NodeId> {
        self.check(x)?;
        self.check(gain)?;
        let (r, c) = self.value(x).shape();
        let (gr, gc) = self.value(gain).shape();
        if gr != 1 || gc != c {
            return Err(TensorError::ShapeMismatch { op: "rmsnorm", lhs_rows: r, lhs_cols: c, rhs_rows: gr, rhs_cols: gc });
        }
        let mut out = Tensor::zeros(r, c);
        {
            let xv = self.value(x);
            let gv = self.value(gain).data().to_vec();
            for i in 0..r {
                let xr = xv.row(i);
                let ms = xr.iter().map(|v| v * v).sum::<f64>() / c as f64;
                let inv = 1.0 / (ms + RMSNORM_EPS).sqrt();
                let o = out.row_mut(i);
                for j in 0..c {
                    o[j] = gv[j] * xr[j] * inv;
                }
            }
        }
        Ok(self.push(out, Op::RmsNorm { x, gain }, self.req(x) || self.req(gain)))
    }

    /// Inverted dropout: kept elements are scaled by `1/(1-rate)` so the map
    /// is expectation-preserving; the mask is drawn from `seed`. Marks the
    /// graph non-smooth for finite-difference checking purposes.
    pub fn dropout(&mut self, x: NodeId, rate: f64, seed: u64) -> Result<NodeId> {
        self.check(x)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Invalid { op: "dropout", msg: format!("rate {rate} outside [0,1)") });
        }
        if rate == 0.0 {
            // Identity; no node needed, but keep graph shape stable for callers.
            return Ok(x);
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - rate);
        let xv = self.value(x);
        let mask: Vec<f64> =
            (0..xv.len()).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
        let mut out = xv.clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        self.non_smooth.get_or_insert("dropout");
        Ok(self.push(out, Op::Dropout { x, mask }, self.req(x)))
    }

    /// Rotary position map: consecutive column pairs `(2i, 2i+1)` are rotated
    /// by `pos * base^(-2i/d)`.
    pub fn rope(&mut self, x: NodeId, positions: &[usize], base: f64) -> Result<NodeId> {
        self.check(x)?;
        let (r, c) = self.value(x).shape();
        if c % 2 != 0 {
            return Err(TensorError::Invalid { op: "rope", msg: format!("odd column count {c}") });
        }
        if positions.len() != r {
            return Err(TensorError::Invalid { op: "rope", msg: format!("{} positions for {r} rows", positions.len()) });
        }
        if base <= 0.0 {
            return Err(TensorError::Invalid { op: "rope", msg: format!("base {base} must be positive") });
        }
        let mut out = self.value(x).clone();
        rope_apply(&mut out, positions, base, 1.0);
        Ok(self.push(out, Op::Rope { x, positions: positions.to_vec(), base }, self.req(x)))
    }

    /// Causal softmax attention. Each query row attends to itself and the
    /// preceding rows, restricted to the most recent `window` positions when
    /// a window is given. Scores are `scale * (q . k)`.
    pub fn causal_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        scale: f64,
        window: Option<usize>,
    ) -> Result<NodeId> {
        let (l, dh) = self.same_shape("causal_attention(q,k)", q, k)?;
        let (vl, _dv) = self.same_shape("causal_attention(k,v)", k, v)?;
        debug_assert_eq!(l, vl);
        if let Some(0) = window {
            return Err(TensorError::Invalid { op: "causal_attention", msg: "window must be at least 1".into() });
        }
        let w = window.unwrap_or(l).min(l.max(1));
        let mut probs = vec![0.0; l * w];
        let mut out = Tensor::zeros(l, dh);
        {
            let qv = self.value(q);
            let kv = self.value(k);
            let vv = self.value(v);
            let mut scores = vec![0.0; w];
            for t in 0..l {
                let lo = t + 1 - w.min(t + 1);
                let n = t - lo + 1;
                let qr = qv.row(t);
                for (j, s) in (lo..=t).enumerate() {
                    scores[j] = scale * dot(qr, kv.row(s));
                }
                softmax_into(&scores[..n], &mut probs[t * w..t * w + n]);
                let o = out.row_mut(t);
                for (j, s) in (lo..=t).enumerate() {
                    let p = probs[t * w + j];
                    for (oi, vi) in o.iter_mut().zip(vv.row(s)) {
                        *oi += p * vi;
                    }
                }
            }
        }
        let requires = self.req(q) || self.req(k) || self.req(v);
        Ok(self.push(out, Op::CausalAttention { q, k, v, scale, window: Some(w), probs }, requires))
    }

    /// Causal linear attention over feature-mapped queries/keys, computed with
    /// prefix sums: `out_t = (sum_{s<=t} pk_s v_s^T)^T pq_t / (pq_t . sum_{s<=t} pk_s + eps)`.
    /// Denominators below 1e-6 are counted in [`GraphDiagnostics`] rather than clamped.
    pub fn performer_causal(&mut self, pq: NodeId, pk: NodeId, v: NodeId, eps: f64) -> Result<NodeId> {
        let (l, m) = self.same_shape("performer_causal(pq,pk)", pq, pk)?;
        self.check(v)?;
        let (vl, dh) = self.value(v).shape();
        if vl != l {
            return Err(TensorError::ShapeMismatch { op: "performer_causal(pq,v)", lhs_rows: l, lhs_cols: m, rhs_rows: vl, rhs_cols: dh });
        }
        if eps <= 0.0 {
            return Err(TensorError::Invalid { op: "performer_causal", msg: format!("eps {eps} must be positive") });
        }
        let mut out = Tensor::zeros(l, dh);
        let mut dens = vec![0.0; l];
        let mut small = 0usize;
        {
            let pqv = self.value(pq);
            let pkv = self.value(pk);
            let vv = self.value(v);
            let mut s = vec![0.0; m * dh]; // running sum of pk_s (outer) v_s
            let mut z = vec![0.0; m]; // running sum of pk_s
            for t in 0..l {
                let pk_t = pkv.row(t);
                let v_t = vv.row(t);
                for (mu, &pkm) in pk_t.iter().enumerate() {
                    z[mu] += pkm;
                    if pkm != 0.0 {
                        let srow = &mut s[mu * dh..(mu + 1) * dh];
                        for (sj, &vj) in srow.iter_mut().zip(v_t) {
                            *sj += pkm * vj;
                        }
                    }
                }
                let pq_t = pqv.row(t);
                let den = dot(pq_t, &z) + eps;
                dens[t] = den;
                if den < 1e-6 {
                    small += 1;
                }
                let o = out.row_mut(t);
                for (mu, &pqm) in pq_t.iter().enumerate() {
                    if pqm != 0.0 {
                        let srow = &s[mu * dh..(mu + 1) * dh];
                        for (oj, &sj) in o.iter_mut().zip(srow) {
                            *oj += pqm * sj;
                        }
                    }
                }
                for oj in o.iter_mut() {
                    *oj /= den;
                }
            }
        }
        self.diagnostics.small_denominators += small;
        let requires = self.req(pq) || self.req(pk) || self.req(v);
        Ok(self.push(out, Op::PerformerCausal { pq, pk, v, dens }, requires))
    }

    /// Positive random-feature map `phi(x)_tm = exp(x_t . omega_m  - |x_t|^2/2 - c_t) / sqrt(m)`.
    /// With `row_stab` the stabilizer c_t is the row's largest projection,
    /// otherwise zero. c is treated as a constant in the gradient: attention
    /// built on these features divides it out, so composed gradients are
    /// exact, while the raw feature values alone are defined up to exp(-c).
    pub fn favor_features(&mut self, x: NodeId, omega: &Tensor, row_stab: bool) -> Result<NodeId> {
        self.check(x)?;
        let (l, d) = self.value(x).shape();
        let (m, od) = omega.shape();
        if od != d || m == 0 {
            return Err(TensorError::ShapeMismatch { op: "favor_features", lhs_rows: l, lhs_cols: d, rhs_rows: m, rhs_cols: od });
        }
        let inv_sqrt_m = 1.0 / (m as f64).sqrt();
        let mut out = Tensor::zeros(l, m);
        {
            let xv = self.value(x);
            for t in 0..l {
                let xt = xv.row(t);
                let energy = 0.5 * dot(xt, xt);
                let o = out.row_mut(t);
                for mu in 0..m {
                    o[mu] = dot(xt, omega.row(mu));
                }
                let c = if row_stab { o.iter().cloned().fold(f64::NEG_INFINITY, f64::max) } else { 0.0 };
                for om in o.iter_mut() {
                    *om = (*om - energy - c).exp() * inv_sqrt_m;
                }
            }
        }
        let requires = self.req(x);
        Ok(self.push(out, Op::FavorFeatures { x, omega: Box::new(omega.clone()) }, requires))
    }

    /// Sum of per-position cross-entropy over the masked positions. Rows whose
    /// mask is false contribute nothing (and receive zero gradient).
    pub fn cross_entropy_sum(&mut self, logits: NodeId, targets: &[usize], mask: &[bool]) -> Result<NodeId> {
        self.check(logits)?;
        let (l, v) = self.value(logits).shape();
        if targets.len() != l || mask.len() != l {
            return Err(TensorError::Invalid {
                op: "cross_entropy_sum",
                msg: format!("{l} logit rows, {} targets, {} mask entries", targets.len(), mask.len()),
            });
        }
        for (&t, &m) in targets.iter().zip(mask) {
            if m && t >= v {
                return Err(TensorError::Invalid { op: "cross_entropy_sum", msg: format!("target {t} out of 0..{v}") });
            }
        }
        let mut probs = Tensor::zeros(l, v);
        let mut loss = 0.0;
        {
            let lv = self.value(logits);
            for t in 0..l {
                if !mask[t] {
                    continue;
                }
                let row = lv.row(t);
                let p = probs.row_mut(t);
                let lse = softmax_into(row, p);
                loss += lse - row[targets[t]];
            }
        }
        let requires = self.req(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropySum { logits, targets: targets.to_vec(), mask: mask.to_vec(), probs: Box::new(probs) },
            requires,
        ))
    }

    /// Periodic time feature map. Column `j` of row `t` is `act(w_j * x_t + phi_j)`
    /// where `act` is tanh for the first `n_tanh` columns and sine afterwards.
    pub fn time2vec(&mut self, w: NodeId, phi: NodeId, xs: &[f64], n_tanh: usize) -> Result<NodeId> {
        let (_, d) = self.same_shape("time2vec(w,phi)", w, phi)?;
        if self.value(w).rows() != 1 {
            return Err(TensorError::Invalid { op: "time2vec", msg: "w and phi must be 1 x d rows".into() });
        }
        if n_tanh > d {
            return Err(TensorError::Invalid { op: "time2vec", msg: format!("n_tanh {n_tanh} exceeds width {d}") });
        }
        let mut out = Tensor::zeros(xs.len(), d);
        {
            let wv = self.value(w).data().to_vec();
            let pv = self.value(phi).data().to_vec();
            for (t, &x) in xs.iter().enumerate() {
                let o = out.row_mut(t);
                for j in 0..d {
                    let u = wv[j] * x + pv[j];
                    o[j] = if j < n_tanh { u.tanh() } else { u.sin() };
                }
            }
        }
        let requires = self.req(w) || self.req(phi);
        Ok(self.push(out, Op::Time2Vec { w, phi, xs: xs.to_vec(), n_tanh }, requires))
    }
}

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

/// Writes softmax of `x` into `out` and returns the log-sum-exp of `x`.
pub fn softmax_into(x: &[f64], out: &mut [f64]) -> f64 {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v - m).exp();
        *o = e;
        z += e;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
    m + z.ln()
}

/// Rotates column pairs in place; `sign` of -1 undoes a rotation.
pub fn rope_apply(x: &mut Tensor, positions: &[usize], base: f64, sign: f64) {
    let d = x.cols();
    let half = d / 2;
    for (r, &pos) in positions.iter().enumerate() {
        let row = x.row_mut(r);
        for i in 0..half {
            let theta = sign * pos as f64 * base.powf(-((2 * i) as f64) / d as f64);
            let (s, c) = theta.sin_cos();
            let a = row[2 * i];
            let b = row[2 * i + 1];
            row[2 * i] = a * c - b * s;
            row[2 * i + 1] = a * s + b * c;
        }
    }
}
