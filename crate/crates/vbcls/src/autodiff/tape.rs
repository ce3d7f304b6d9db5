//! Reverse-mode differentiation on a per-step tape.
//!
//! Values are rank-2 row-major f64 buffers owned by the tape; handles are
//! [`TensorId`]s. Persistent parameters live in a [`ParamSet`] and are
//! registered onto a tape with [`Tape::param`]; registering the same
//! parameter twice returns the same leaf, so gradients from multiple uses
//! accumulate. `backward` runs once per tape (a second call is a stale-tape
//! error), visits each node exactly once in reverse record order, and writes
//! a gradient into every parameter of the set: zeros for parameters the
//! loss never touched.

use crate::distributions::{
    kl_term_diag, kl_term_standard, kl_term_verbatim, reparam_elem, KlFormula,
};
use crate::error::{Error, Result};

use super::optimizer::{ParamId, ParamSet};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

enum OpKind {
    Leaf,
    Affine { x: usize, w: usize, b: usize },
    Relu { x: usize },
    Concat { a: usize, b: usize },
    AddRow { x: usize },
    GradScale { x: usize, factor: f64 },
    Add { a: usize, b: usize },
    Scale { x: usize, factor: f64 },
    Sum { x: usize },
    SquaredError { a: usize, b: usize },
    CrossEntropy { logits: usize, targets: Vec<usize>, smoothing: f64 },
    Reparameterize { mean: usize, log_var: usize, eps: Vec<f64> },
    KlToPrior {
        mean: usize,
        log_var: usize,
        prior_mean: Vec<f64>,
        prior_std: Vec<f64>,
        formula: KlFormula,
    },
    KlDiag { mean1: usize, log_var1: usize, mean2: usize, log_var2: usize },
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: OpKind,
}

/// Recording of one forward pass. Dropped (or left consumed) after the step.
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: Vec<Option<usize>>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: OpKind) -> TensorId {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { rows, cols, value, op });
        TensorId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    /// Scalar convenience accessor; panics if the node is not 1x1.
    pub fn scalar(&self, id: TensorId) -> f64 {
        let n = &self.nodes[id.0];
        assert_eq!(n.value.len(), 1, "scalar() on a non-scalar node");
        n.value[0]
    }

    /// Gradient of the node after `backward`; `None` if the loss never
    /// reached it (or backward has not run).
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Sign pattern of every relu input on the tape, in record order. Used
    /// by the finite-difference checker to detect kink crossings.
    pub fn relu_activity(&self) -> Vec<bool> {
        let mut bits = Vec::new();
        for node in &self.nodes {
            if let OpKind::Relu { x } = node.op {
                bits.extend(self.nodes[x].value.iter().map(|&v| v > 0.0));
            }
        }
        bits
    }

    /// Records a constant leaf. Constants participate in gradient flow as
    /// sinks only.
    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<TensorId> {
        if value.len() != rows * cols {
            return Err(Error::InvalidShape(format!(
                "constant data length {} does not match {}x{}",
                value.len(),
                rows,
                cols
            )));
        }
        Ok(self.push(rows, cols, value, OpKind::Leaf))
    }

    /// Registers a parameter as a leaf, copying its current data. Repeated
    /// registration of the same parameter returns the original leaf.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> TensorId {
        if self.param_nodes.len() < params.len() {
            self.param_nodes.resize(params.len(), None);
        }
        if let Some(node) = self.param_nodes[id] {
            return TensorId(node);
        }
        let p = params.get(id);
        let t = self.push(p.rows, p.cols, p.data.clone(), OpKind::Leaf);
        self.param_nodes[id] = Some(t.0);
        t
    }

    /// out = x W + b with b broadcast over rows.
    pub fn affine(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.shape(x);
        let (wk, n) = self.shape(w);
        let (br, bn) = self.shape(b);
        if k != wk {
            return Err(Error::InvalidShape(format!(
                "affine: input has {k} columns, weight has {wk} rows"
            )));
        }
        if br != 1 || bn != n {
            return Err(Error::InvalidShape(format!(
                "affine: bias is {br}x{bn}, expected 1x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        {
            let xv = &self.nodes[x.0].value;
            let wv = &self.nodes[w.0].value;
            let bv = &self.nodes[b.0].value;
            for i in 0..m {
                for j in 0..n {
                    let mut acc = bv[j];
                    for l in 0..k {
                        acc += xv[i * k + l] * wv[l * n + j];
                    }
                    out[i * n + j] = acc;
                }
            }
        }
        Ok(self.push(m, n, out, OpKind::Affine { x: x.0, w: w.0, b: b.0 }))
    }

    /// Elementwise max(0, x). The subgradient at zero is taken as zero.
    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let (m, n) = self.shape(x);
        let out = self.nodes[x.0].value.iter().map(|&v| v.max(0.0)).collect();
        self.push(m, n, out, OpKind::Relu { x: x.0 })
    }

    /// Column-wise juxtaposition of two blocks with equal row counts.
    pub fn concat(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ma, ca) = self.shape(a);
        let (mb, cb) = self.shape(b);
        if ma != mb {
            return Err(Error::InvalidShape(format!(
                "concat: row counts {ma} and {mb} differ"
            )));
        }
        let mut out = vec![0.0; ma * (ca + cb)];
        {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            for i in 0..ma {
                out[i * (ca + cb)..i * (ca + cb) + ca].copy_from_slice(&av[i * ca..(i + 1) * ca]);
                out[i * (ca + cb) + ca..(i + 1) * (ca + cb)]
                    .copy_from_slice(&bv[i * cb..(i + 1) * cb]);
            }
        }
        Ok(self.push(ma, ca + cb, out, OpKind::Concat { a: a.0, b: b.0 }))
    }

    /// Adds a fixed row vector to every row of x.
    pub fn add_row(&mut self, x: TensorId, row: &[f64]) -> Result<TensorId> {
        let (m, n) = self.shape(x);
        if row.len() != n {
            return Err(Error::InvalidShape(format!(
                "add_row: row has {} entries, tensor has {n} columns",
                row.len()
            )));
        }
        let mut out = self.nodes[x.0].value.clone();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += row[j];
            }
        }
        Ok(self.push(m, n, out, OpKind::AddRow { x: x.0 }))
    }

    /// Identity in the forward pass; multiplies the incoming gradient by
    /// `factor` in the backward pass. Used to give the shared latent input
    /// a different loss weight than the branch that consumes it.
    pub fn grad_scale(&mut self, x: TensorId, factor: f64) -> TensorId {
        let (m, n) = self.shape(x);
        let out = self.nodes[x.0].value.clone();
        self.push(m, n, out, OpKind::GradScale { x: x.0, factor })
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ma, ca) = self.shape(a);
        let (mb, cb) = self.shape(b);
        if (ma, ca) != (mb, cb) {
            return Err(Error::InvalidShape(format!(
                "add: shapes {ma}x{ca} and {mb}x{cb} differ"
            )));
        }
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(ma, ca, out, OpKind::Add { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, x: TensorId, factor: f64) -> TensorId {
        let (m, n) = self.shape(x);
        let out = self.nodes[x.0].value.iter().map(|v| v * factor).collect();
        self.push(m, n, out, OpKind::Scale { x: x.0, factor })
    }

    /// Sum of all entries, as a 1x1 tensor.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let total: f64 = self.nodes[x.0].value.iter().sum();
        self.push(1, 1, vec![total], OpKind::Sum { x: x.0 })
    }

    /// Sum of squared differences over all entries.
    pub fn squared_error(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ma, ca) = self.shape(a);
        let (mb, cb) = self.shape(b);
        if (ma, ca) != (mb, cb) {
            return Err(Error::InvalidShape(format!(
                "squared_error: shapes {ma}x{ca} and {mb}x{cb} differ"
            )));
        }
        let total: f64 = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(1, 1, vec![total], OpKind::SquaredError { a: a.0, b: b.0 }))
    }

    /// Label-smoothed softmax cross-entropy, summed over rows. The target
    /// distribution per row puts 1 - smoothing on the target class plus
    /// smoothing / K spread uniformly. Log-sum-exp is max-shifted.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        smoothing: f64,
    ) -> Result<TensorId> {
        let (m, k) = self.shape(logits);
        if targets.len() != m {
            return Err(Error::InvalidShape(format!(
                "cross-entropy: {} targets for {m} rows",
                targets.len()
            )));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::Config(format!(
                "label smoothing {smoothing} outside [0, 1)"
            )));
        }
        for &t in targets {
            if t >= k {
                return Err(Error::InvalidLabel { label: t, classes: k });
            }
        }
        let mut total = 0.0;
        {
            let lv = &self.nodes[logits.0].value;
            for (i, &t) in targets.iter().enumerate() {
                let row = &lv[i * k..(i + 1) * k];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
                let mut dot = 0.0;
                for (j, &l) in row.iter().enumerate() {
                    let tj = smoothing / k as f64 + if j == t { 1.0 - smoothing } else { 0.0 };
                    dot += tj * l;
                }
                total += lse - dot;
            }
        }
        Ok(self.push(
            1,
            1,
            vec![total],
            OpKind::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                smoothing,
            },
        ))
    }

    /// z = mean + exp(log_var / 2) * eps with eps fixed at record time.
    pub fn reparameterize(
        &mut self,
        mean: TensorId,
        log_var: TensorId,
        eps: &[f64],
    ) -> Result<TensorId> {
        let (m, z) = self.shape(mean);
        if self.shape(log_var) != (m, z) {
            return Err(Error::InvalidShape(
                "reparameterize: mean and log_var shapes differ".into(),
            ));
        }
        if eps.len() != m * z {
            return Err(Error::InvalidShape(format!(
                "reparameterize: {} noise entries for a {m}x{z} tensor",
                eps.len()
            )));
        }
        let out = (0..m * z)
            .map(|i| {
                reparam_elem(
                    self.nodes[mean.0].value[i],
                    self.nodes[log_var.0].value[i],
                    eps[i],
                )
            })
            .collect();
        Ok(self.push(
            m,
            z,
            out,
            OpKind::Reparameterize {
                mean: mean.0,
                log_var: log_var.0,
                eps: eps.to_vec(),
            },
        ))
    }

    /// Per-row KL to an independent-Gaussian prior, summed over rows and
    /// dimensions into a scalar.
    pub fn kl_to_prior(
        &mut self,
        mean: TensorId,
        log_var: TensorId,
        prior_mean: &[f64],
        prior_std: &[f64],
        formula: KlFormula,
    ) -> Result<TensorId> {
        let (m, z) = self.shape(mean);
        if self.shape(log_var) != (m, z) {
            return Err(Error::InvalidShape(
                "kl_to_prior: mean and log_var shapes differ".into(),
            ));
        }
        if prior_mean.len() != z || prior_std.len() != z {
            return Err(Error::InvalidShape(format!(
                "kl_to_prior: prior dimension does not match latent width {z}"
            )));
        }
        let mut total = 0.0;
        for i in 0..m {
            for j in 0..z {
                let mu = self.nodes[mean.0].value[i * z + j];
                let lv = self.nodes[log_var.0].value[i * z + j];
                total += match formula {
                    KlFormula::Standard => kl_term_standard(mu, lv, prior_mean[j], prior_std[j]),
                    KlFormula::Verbatim => kl_term_verbatim(mu, lv, prior_mean[j], prior_std[j]),
                };
            }
        }
        Ok(self.push(
            1,
            1,
            vec![total],
            OpKind::KlToPrior {
                mean: mean.0,
                log_var: log_var.0,
                prior_mean: prior_mean.to_vec(),
                prior_std: prior_std.to_vec(),
                formula,
            },
        ))
    }

    /// Per-row KL between two diagonal Gaussians, summed into a scalar.
    pub fn kl_diag(
        &mut self,
        mean1: TensorId,
        log_var1: TensorId,
        mean2: TensorId,
        log_var2: TensorId,
    ) -> Result<TensorId> {
        let (m, z) = self.shape(mean1);
        for &other in &[log_var1, mean2, log_var2] {
            if self.shape(other) != (m, z) {
                return Err(Error::InvalidShape(
                    "kl_diag: argument shapes differ".into(),
                ));
            }
        }
        let mut total = 0.0;
        for i in 0..m * z {
            total += kl_term_diag(
                self.nodes[mean1.0].value[i],
                self.nodes[log_var1.0].value[i],
                self.nodes[mean2.0].value[i],
                self.nodes[log_var2.0].value[i],
            );
        }
        Ok(self.push(
            1,
            1,
            vec![total],
            OpKind::KlDiag {
                mean1: mean1.0,
                log_var1: log_var1.0,
                mean2: mean2.0,
                log_var2: log_var2.0,
            },
        ))
    }

    /// Reverse pass from a scalar loss. Populates `grad` on every parameter
    /// in `params` (zeros where the loss is independent of the parameter)
    /// and consumes the tape.
    pub fn backward(&mut self, loss: TensorId, params: &mut ParamSet) -> Result<()> {
        if self.consumed {
            return Err(Error::StaleTape);
        }
        {
            let n = &self.nodes[loss.0];
            if n.rows * n.cols != 1 {
                return Err(Error::InvalidShape(format!(
                    "backward: loss is {}x{}, expected a scalar",
                    n.rows, n.cols
                )));
            }
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        for id in 0..params.len() {
            let g = self
                .param_nodes
                .get(id)
                .copied()
                .flatten()
                .and_then(|node| grads[node].clone())
                .unwrap_or_else(|| vec![0.0; params.get(id).data.len()]);
            params.set_grad(id, g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        fn acc<'a>(
            grads: &'a mut [Option<Vec<f64>>],
            idx: usize,
            len: usize,
        ) -> &'a mut Vec<f64> {
            grads[idx].get_or_insert_with(|| vec![0.0; len])
        }

        match &self.nodes[i].op {
            OpKind::Leaf { .. } => {}
            OpKind::Affine { x, w, b } => {
                let (m, k) = (self.nodes[*x].rows, self.nodes[*x].cols);
                let n = self.nodes[*w].cols;
                {
                    let wv = &self.nodes[*w].value;
                    let dx = acc(grads, *x, m * k);
                    for i in 0..m {
                        for l in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * wv[l * n + j];
                            }
                            dx[i * k + l] += s;
                        }
                    }
                }
                {
                    let xv = &self.nodes[*x].value;
                    let dw = acc(grads, *w, k * n);
                    for l in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += xv[i * k + l] * g[i * n + j];
                            }
                            dw[l * n + j] += s;
                        }
                    }
                }
                {
                    let db = acc(grads, *b, n);
                    for j in 0..n {
                        for i in 0..m {
                            db[j] += g[i * n + j];
                        }
                    }
                }
            }
            OpKind::Relu { x } => {
                let xv = &self.nodes[*x].value;
                let dx = acc(grads, *x, xv.len());
                for (j, &v) in xv.iter().enumerate() {
                    if v > 0.0 {
                        dx[j] += g[j];
                    }
                }
            }
            OpKind::Concat { a, b } => {
                let (m, ca) = (self.nodes[*a].rows, self.nodes[*a].cols);
                let cb = self.nodes[*b].cols;
                {
                    let da = acc(grads, *a, m * ca);
                    for i in 0..m {
                        for j in 0..ca {
                            da[i * ca + j] += g[i * (ca + cb) + j];
                        }
                    }
                }
                {
                    let db = acc(grads, *b, m * cb);
                    for i in 0..m {
                        for j in 0..cb {
                            db[i * cb + j] += g[i * (ca + cb) + ca + j];
                        }
                    }
                }
            }
            OpKind::AddRow { x } => {
                let dx = acc(grads, *x, g.len());
                for (d, &gv) in dx.iter_mut().zip(g) {
                    *d += gv;
                }
            }
            OpKind::GradScale { x, factor } => {
                let dx = acc(grads, *x, g.len());
                for (d, &gv) in dx.iter_mut().zip(g) {
                    *d += factor * gv;
                }
            }
            OpKind::Add { a, b } => {
                for idx in [*a, *b] {
                    let d = acc(grads, idx, g.len());
                    for (dv, &gv) in d.iter_mut().zip(g) {
                        *dv += gv;
                    }
                }
            }
            OpKind::Scale { x, factor } => {
                let dx = acc(grads, *x, g.len());
                for (d, &gv) in dx.iter_mut().zip(g) {
                    *d += factor * gv;
                }
            }
            OpKind::Sum { x } => {
                let len = self.nodes[*x].value.len();
                let dx = acc(grads, *x, len);
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            }
            OpKind::SquaredError { a, b } => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                {
                    let da = acc(grads, *a, av.len());
                    for j in 0..av.len() {
                        da[j] += g[0] * 2.0 * (av[j] - bv[j]);
                    }
                }
                {
                    let db = acc(grads, *b, bv.len());
                    for j in 0..bv.len() {
                        db[j] -= g[0] * 2.0 * (av[j] - bv[j]);
                    }
                }
            }
            OpKind::CrossEntropy { logits, targets, smoothing } => {
                let (m, k) = (self.nodes[*logits].rows, self.nodes[*logits].cols);
                let lv = &self.nodes[*logits].value;
                let dl = acc(grads, *logits, m * k);
                for (i, &t) in targets.iter().enumerate() {
                    let row = &lv[i * k..(i + 1) * k];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|l| (l - max).exp()).sum();
                    for j in 0..k {
                        let p = (row[j] - max).exp() / denom;
                        let tj =
                            smoothing / k as f64 + if j == t { 1.0 - smoothing } else { 0.0 };
                        dl[i * k + j] += g[0] * (p - tj);
                    }
                }
            }
            OpKind::Reparameterize { mean, log_var, eps } => {
                let lvv = &self.nodes[*log_var].value;
                {
                    let dm = acc(grads, *mean, g.len());
                    for (d, &gv) in dm.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                {
                    let dlv = acc(grads, *log_var, g.len());
                    for j in 0..g.len() {
                        dlv[j] += g[j] * 0.5 * (0.5 * lvv[j]).exp() * eps[j];
                    }
                }
            }
            OpKind::KlToPrior { mean, log_var, prior_mean, prior_std, formula } => {
                let (m, z) = (self.nodes[*mean].rows, self.nodes[*mean].cols);
                let mv = &self.nodes[*mean].value;
                let lvv = &self.nodes[*log_var].value;
                {
                    let dm = acc(grads, *mean, m * z);
                    for i in 0..m {
                        for j in 0..z {
                            let mu = mv[i * z + j];
                            let lv = lvv[i * z + j];
                            let (pm, ps) = (prior_mean[j], prior_std[j]);
                            dm[i * z + j] += g[0]
                                * match formula {
                                    KlFormula::Standard => (mu - pm) / (ps * ps),
                                    KlFormula::Verbatim => (mu - pm) * (-lv).exp(),
                                };
                        }
                    }
                }
                {
                    let dlv = acc(grads, *log_var, m * z);
                    for i in 0..m {
                        for j in 0..z {
                            let mu = mv[i * z + j];
                            let lv = lvv[i * z + j];
                            let (pm, ps) = (prior_mean[j], prior_std[j]);
                            dlv[i * z + j] += g[0]
                                * match formula {
                                    KlFormula::Standard => {
                                        -0.5 + lv.exp() / (2.0 * ps * ps)
                                    }
                                    KlFormula::Verbatim => {
                                        let d = pm - mu;
                                        -0.5 - 0.5 * (ps * ps + d * d) * (-lv).exp()
                                    }
                                };
                        }
                    }
                }
            }
            OpKind::KlDiag { mean1, log_var1, mean2, log_var2 } => {
                let n = self.nodes[*mean1].value.len();
                let m1 = &self.nodes[*mean1].value;
                let l1 = &self.nodes[*log_var1].value;
                let m2 = &self.nodes[*mean2].value;
                let l2 = &self.nodes[*log_var2].value;
                {
                    let d = acc(grads, *mean1, n);
                    for j in 0..n {
                        d[j] += g[0] * (m1[j] - m2[j]) * (-l2[j]).exp();
                    }
                }
                {
                    let d = acc(grads, *log_var1, n);
                    for j in 0..n {
                        d[j] += g[0] * 0.5 * ((l1[j] - l2[j]).exp() - 1.0);
                    }
                }
                {
                    let d = acc(grads, *mean2, n);
                    for j in 0..n {
                        d[j] -= g[0] * (m1[j] - m2[j]) * (-l2[j]).exp();
                    }
                }
                {
                    let d = acc(grads, *log_var2, n);
                    for j in 0..n {
                        let dd = m1[j] - m2[j];
                        d[j] += g[0]
                            * 0.5
                            * (1.0 - (l1[j] - l2[j]).exp() - dd * dd * (-l2[j]).exp());
                    }
                }
            }
        }
    }
}
