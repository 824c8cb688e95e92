use crate::graph::{rope_apply, Graph, NodeId, Op, GELU_A, GELU_C, RMSNORM_EPS};
use crate::param::GradStore;
use crate::tensor::{axpy, dot};
use crate::{Result, Tensor, TensorError};

impl Graph {
    /// Reverse pass from a scalar loss; returns a fresh gradient store.
    pub fn backward(&mut self, loss: NodeId) -> Result<GradStore> {
        let mut store = GradStore::default();
        self.backward_into(loss, &mut store)?;
        Ok(store)
    }

    /// Reverse pass that accumulates into an existing store, so gradients from
    /// several graphs can be summed before an optimizer step.
    pub fn backward_into(&mut self, loss: NodeId, store: &mut GradStore) -> Result<()> {
        if self.backward_run {
            return Err(TensorError::BackwardAlreadyRun);
        }
        if loss.0 >= self.values.len() {
            return Err(TensorError::UnknownNode(loss.0));
        }
        let (lr, lc) = self.values[loss.0].shape();
        if (lr, lc) != (1, 1) {
            return Err(TensorError::NonScalarLoss { rows: lr, cols: lc });
        }
        self.backward_run = true;

        let n = self.values.len();
        let mut adj: Vec<Option<Tensor>> = vec![None; n];
        adj[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..n).rev() {
            if !self.requires[id] {
                adj[id] = None;
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            match &self.ops[id] {
                Op::Input => {}
                Op::Param(pid) => store.accumulate(*pid, g),
                Op::Add(a, b) => {
                    self.push_adj(&mut adj, *b, &g, |g| g.clone());
                    self.give_adj(&mut adj, *a, g);
                }
                Op::Sub(a, b) => {
                    self.push_adj(&mut adj, *b, &g, |g| g.map(|v| -v));
                    self.give_adj(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.requires[a.0] {
                        let mut da = g.clone();
                        for (x, y) in da.data_mut().iter_mut().zip(self.values[b.0].data()) {
                            *x *= y;
                        }
                        self.give_adj(&mut adj, a, da);
                    }
                    if self.requires[b.0] {
                        let mut db = g;
                        for (x, y) in db.data_mut().iter_mut().zip(self.values[a.0].data()) {
                            *x *= y;
                        }
                        self.give_adj(&mut adj, b, db);
                    }
                }
                Op::AddRow { mat, row } => {
                    let (mat, row) = (*mat, *row);
                    if self.requires[row.0] {
                        let c = g.cols();
                        let mut dr = Tensor::zeros(1, c);
                        for i in 0..g.rows() {
                            axpy(1.0, g.row(i), dr.row_mut(0));
                        }
                        self.give_adj(&mut adj, row, dr);
                    }
                    self.give_adj(&mut adj, mat, g);
                }
                Op::Scale { x, c } => {
                    let (x, c) = (*x, *c);
                    self.give_adj(&mut adj, x, g.map(|v| v * c));
                }
                Op::ScaleByScalar { x, s } => {
                    let (x, s) = (*x, *s);
                    let sv = self.values[s.0].data()[0];
                    if self.requires[s.0] {
                        let ds = dot(g.data(), self.values[x.0].data());
                        self.give_adj(&mut adj, s, Tensor::scalar(ds));
                    }
                    if self.requires[x.0] {
                        self.give_adj(&mut adj, x, g.map(|v| v * sv));
                    }
                }
                Op::MatMul { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.requires[a.0] {
                        let da = g.matmul_nt(&self.values[b.0])?;
                        self.give_adj(&mut adj, a, da);
                    }
                    if self.requires[b.0] {
                        let db = self.values[a.0].matmul_tn(&g)?;
                        self.give_adj(&mut adj, b, db);
                    }
                }
                Op::Tanh(x) => {
                    let x = *x;
                    let y = &self.values[id];
                    let mut dx = g;
                    for (d, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
                        *d *= 1.0 - yv * yv;
                    }
                    self.give_adj(&mut adj, x, dx);
                }
                Op::Sin(x) => {
                    let x = *x;
                    let xv = &self.values[x.0];
                    let mut dx = g;
                    for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        *d *= v.cos();
                    }
                    self.give_adj(&mut adj, x, dx);
                }
                Op::Exp(x) => {
                    let x = *x;
                    let y = &self.values[id];
                    let mut dx = g;
                    for (d, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
                        *d *= yv;
                    }
                    self.give_adj(&mut adj, x, dx);
                }
                Op::Gelu(x) => {
                    let x = *x;
                    let xv = &self.values[x.0];
                    let mut dx = g;
                    for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        *d *= gelu_grad(v);
                    }
                    self.give_adj(&mut adj, x, dx);
                }
                Op::SoftmaxRows(x) => {
                    let x = *x;
                    let y = &self.values[id];
                    let mut dx = g;
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = dx.row_mut(i);
                        let s = dot(gr, yr);
                        for (d, &yv) in gr.iter_mut().zip(yr) {
                            *d = yv * (*d - s);
                        }
                    }
                    self.give_adj(&mut adj, x, dx);
                }
                Op::MeanAll(x) => {
                    let x = *x;
                    let (r, c) = self.values[x.0].shape();
                    let gv = g.data()[0] / (r * c) as f64;
                    self.give_adj(&mut adj, x, Tensor::filled(r, c, gv));
                }
                Op::SumAll(x) => {
                    let x = *x;
                    let (r, c) = self.values[x.0].shape();
                    self.give_adj(&mut adj, x, Tensor::filled(r, c, g.data()[0]));
                }
                Op::SliceCols { x, c0 } => {
                    let (x, c0) = (*x, *c0);
                    let (r, c) = self.values[x.0].shape();
                    let w = g.cols();
                    let mut dx = Tensor::zeros(r, c);
                    for i in 0..r {
                        dx.row_mut(i)[c0..c0 + w].copy_from_slice(g.row(i));
                    }
                    self.give_adj(&mut adj, x, dx);
                }
                Op::SliceRows { x, r0 } => {
                    let (x, r0) = (*x, *r0);
                    let (r, c) = self.values[x.0].shape();
                    let mut dx = Tensor::zeros(r, c);
                    for i in 0..g.rows() {
                        dx.row_mut(r0 + i).copy_from_slice(g.row(i));
                    }
                    self.give_adj(&mut adj, x, dx);
                }
                Op::ConcatCols(xs) => {
                    let xs = xs.clone();
                    let mut at = 0;
                    for x in xs {
                        let w = self.values[x.0].cols();
                        if self.requires[x.0] {
                            let mut dx = Tensor::zeros(g.rows(), w);
                            for i in 0..g.rows() {
                                dx.row_mut(i).copy_from_slice(&g.row(i)[at..at + w]);
                            }
                            self.give_adj(&mut adj, x, dx);
                        }
                        at += w;
                    }
                }
                Op::GatherRows { table, ids } => {
                    let table = *table;
                    let ids = ids.clone();
                    let (v, d) = self.values[table.0].shape();
                    let mut dt = Tensor::zeros(v, d);
                    for (r, &i) in ids.iter().enumerate() {
                        axpy(1.0, g.row(r), dt.row_mut(i));
                    }
                    self.give_adj(&mut adj, table, dt);
                }
                Op::SubRowMean(x) => {
                    let x = *x;
                    let c = g.cols();
                    let mut dx = g;
                    for i in 0..dx.rows() {
                        let row = dx.row_mut(i);
                        let m = row.iter().sum::<f64>() / c as f64;
                        for v in row {
                            *v -= m;
                        }
                    }
                    self.give_adj(&mut adj, x, dx);
                }
                Op::RmsNorm { x, gain } => {
                    let (x, gain) = (*x, *gain);
                    let xv = &self.values[x.0];
                    let gv = &self.values[gain.0];
                    let (r, c) = xv.shape();
                    let mut dx = Tensor::zeros(r, c);
                    let mut dgain = Tensor::zeros(1, c);
                    for i in 0..r {
                        let xr = xv.row(i);
                        let gr = g.row(i);
                        let ms = xr.iter().map(|v| v * v).sum::<f64>() / c as f64;
                        let inv = 1.0 / (ms + RMSNORM_EPS).sqrt();
                        let dg = dgain.row_mut(0);
                        let mut proj = 0.0;
                        for j in 0..c {
                            let t = xr[j] * inv;
                            dg[j] += gr[j] * t;
                            proj += gr[j] * gv.data()[j] * t;
                        }
                        proj /= c as f64;
                        let dr = dx.row_mut(i);
                        for j in 0..c {
                            let t = xr[j] * inv;
                            dr[j] = inv * (gr[j] * gv.data()[j] - t * proj);
                        }
                    }
                    if self.requires[gain.0] {
                        self.give_adj(&mut adj, gain, dgain);
                    }
                    if self.requires[x.0] {
                        self.give_adj(&mut adj, x, dx);
                    }
                }
                Op::Dropout { x, mask } => {
                    let x = *x;
                    let mut dx = g;
                    for (d, m) in dx.data_mut().iter_mut().zip(mask) {
                        *d *= m;
                    }
                    self.give_adj(&mut adj, x, dx);
                }
                Op::Rope { x, positions, base } => {
                    let (x, base) = (*x, *base);
                    let positions = positions.clone();
                    let mut dx = g;
                    rope_apply(&mut dx, &positions, base, -1.0);
                    self.give_adj(&mut adj, x, dx);
                }
                Op::CausalAttention { q, k, v, scale, window, probs } => {
                    let (q, k, v, scale) = (*q, *k, *v, *scale);
                    let w = window.expect("window normalized at construction");
                    let qv = &self.values[q.0];
                    let kv = &self.values[k.0];
                    let vv = &self.values[v.0];
                    let (l, dh) = qv.shape();
                    let mut dq = Tensor::zeros(l, dh);
                    let mut dk = Tensor::zeros(l, dh);
                    let mut dv = Tensor::zeros(l, dh);
                    let mut da = vec![0.0; w];
                    for t in 0..l {
                        let lo = t + 1 - w.min(t + 1);
                        let gt = g.row(t);
                        let prow = &probs[t * w..(t + 1) * w];
                        let mut sum_pa = 0.0;
                        for (j, s) in (lo..=t).enumerate() {
                            let p = prow[j];
                            axpy(p, gt, dv.row_mut(s));
                            da[j] = dot(gt, vv.row(s));
                            sum_pa += p * da[j];
                        }
                        for (j, s) in (lo..=t).enumerate() {
                            let dl = prow[j] * (da[j] - sum_pa) * scale;
                            axpy(dl, kv.row(s), dq.row_mut(t));
                            axpy(dl, qv.row(t), dk.row_mut(s));
                        }
                    }
                    if self.requires[q.0] {
                        self.give_adj(&mut adj, q, dq);
                    }
                    if self.requires[k.0] {
                        self.give_adj(&mut adj, k, dk);
                    }
                    if self.requires[v.0] {
                        self.give_adj(&mut adj, v, dv);
                    }
                }
                Op::PerformerCausal { pq, pk, v, dens } => {
                    let (pq, pk, v) = (*pq, *pk, *v);
                    let pqv = &self.values[pq.0];
                    let pkv = &self.values[pk.0];
                    let vv = &self.values[v.0];
                    let y = &self.values[id];
                    let (l, m) = pqv.shape();
                    let dh = vv.cols();
                    let mut dpq = Tensor::zeros(l, m);
                    let mut dpk = Tensor::zeros(l, m);
                    let mut dv = Tensor::zeros(l, dh);

                    // Forward sweep rebuilds the prefix sums for the query gradient.
                    let mut s = vec![0.0; m * dh];
                    let mut z = vec![0.0; m];
                    for t in 0..l {
                        let pk_t = pkv.row(t);
                        let v_t = vv.row(t);
                        for (mu, &pkm) in pk_t.iter().enumerate() {
                            z[mu] += pkm;
                            if pkm != 0.0 {
                                axpy(pkm, v_t, &mut s[mu * dh..(mu + 1) * dh]);
                            }
                        }
                        let gt = g.row(t);
                        let den = dens[t];
                        let wt = -dot(gt, y.row(t)) / den;
                        let dq_t = dpq.row_mut(t);
                        for mu in 0..m {
                            dq_t[mu] = dot(&s[mu * dh..(mu + 1) * dh], gt) / den + wt * z[mu];
                        }
                    }

                    // Reverse sweep accumulates suffix terms for keys and values.
                    let mut rmat = vec![0.0; m * dh];
                    let mut rvec = vec![0.0; m];
                    for t in (0..l).rev() {
                        let gt = g.row(t);
                        let den = dens[t];
                        let wt = -dot(gt, y.row(t)) / den;
                        let pq_t = pqv.row(t);
                        for (mu, &pqm) in pq_t.iter().enumerate() {
                            rvec[mu] += wt * pqm;
                            if pqm != 0.0 {
                                let rrow = &mut rmat[mu * dh..(mu + 1) * dh];
                                for (rj, &gj) in rrow.iter_mut().zip(gt) {
                                    *rj += pqm * gj / den;
                                }
                            }
                        }
                        let pk_t = pkv.row(t);
                        let v_t = vv.row(t);
                        let dk_t = dpk.row_mut(t);
                        for mu in 0..m {
                            dk_t[mu] = dot(&rmat[mu * dh..(mu + 1) * dh], v_t) + rvec[mu];
                        }
                        let dv_t = dv.row_mut(t);
                        for (mu, &pkm) in pk_t.iter().enumerate() {
                            if pkm != 0.0 {
                                axpy(pkm, &rmat[mu * dh..(mu + 1) * dh], dv_t);
                            }
                        }
                    }
                    if self.requires[pq.0] {
                        self.give_adj(&mut adj, pq, dpq);
                    }
                    if self.requires[pk.0] {
                        self.give_adj(&mut adj, pk, dpk);
                    }
                    if self.requires[v.0] {
                        self.give_adj(&mut adj, v, dv);
                    }
                }
                Op::FavorFeatures { x, omega } => {
                    // phi = exp(x.w - |x|^2/2 - c)/sqrt(m), c constant:
                    // dx_t = sum_m (g phi)_tm (w_m - x_t)
                    if self.requires[x.0] {
                        let phi = &self.values[id];
                        let xv = &self.values[x.0];
                        let (l, m) = phi.shape();
                        let d = xv.cols();
                        let mut dx = Tensor::zeros(l, d);
                        for t in 0..l {
                            let g_t = g.row(t);
                            let phi_t = phi.row(t);
                            let x_t = xv.row(t);
                            let dx_t = dx.row_mut(t);
                            let mut wsum = 0.0;
                            for mu in 0..m {
                                let w = g_t[mu] * phi_t[mu];
                                if w != 0.0 {
                                    axpy(w, omega.row(mu), dx_t);
                                    wsum += w;
                                }
                            }
                            axpy(-wsum, x_t, dx_t);
                        }
                        self.give_adj(&mut adj, *x, dx);
                    }
                }
                Op::CrossEntropySum { logits, targets, mask, probs } => {
                    let logits = *logits;
                    let g0 = g.data()[0];
                    let (l, c) = probs.shape();
                    let mut dx = Tensor::zeros(l, c);
                    for t in 0..l {
                        if !mask[t] {
                            continue;
                        }
                        let pr = probs.row(t);
                        let dr = dx.row_mut(t);
                        for j in 0..c {
                            dr[j] = g0 * pr[j];
                        }
                        dr[targets[t]] -= g0;
                    }
                    self.give_adj(&mut adj, logits, dx);
                }
                Op::Time2Vec { w, phi, xs, n_tanh } => {
                    let (w, phi, n_tanh) = (*w, *phi, *n_tanh);
                    let xs = xs.clone();
                    let wv = &self.values[w.0];
                    let pv = &self.values[phi.0];
                    let d = wv.cols();
                    let mut dw = Tensor::zeros(1, d);
                    let mut dphi = Tensor::zeros(1, d);
                    for (t, &x) in xs.iter().enumerate() {
                        let gr = g.row(t);
                        for j in 0..d {
                            let u = wv.data()[j] * x + pv.data()[j];
                            let du = if j < n_tanh {
                                let th = u.tanh();
                                1.0 - th * th
                            } else {
                                u.cos()
                            };
                            dw.data_mut()[j] += gr[j] * du * x;
                            dphi.data_mut()[j] += gr[j] * du;
                        }
                    }
                    if self.requires[w.0] {
                        self.give_adj(&mut adj, w, dw);
                    }
                    if self.requires[phi.0] {
                        self.give_adj(&mut adj, phi, dphi);
                    }
                }
            }
        }
        Ok(())
    }

    fn give_adj(&self, adj: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.requires[id.0] {
            return;
        }
        match &mut adj[id.0] {
            Some(t) => t.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn push_adj(&self, adj: &mut [Option<Tensor>], id: NodeId, g: &Tensor, f: impl Fn(&Tensor) -> Tensor) {
        if self.requires[id.0] {
            self.give_adj(adj, id, f(g));
        }
    }
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
