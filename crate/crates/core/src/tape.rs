//! Reverse-mode automatic differentiation on an explicit tape.
//!
//! A [`Tape`] records one forward pass as a flat list of nodes; [`Tape::backward`]
//! walks it once in reverse and leaves a gradient per node. The tape is meant to
//! be built, differentiated, read, and dropped per training step. All math is f64.

use crate::error::{DllError, Result};
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};

/// Clamp applied inside every log (BCE, KL, logit). Keeps losses and their
/// gradients finite on saturated probabilities.
pub const CLAMP_EPS: f64 = 1e-7;

/// Non-negative gradient scale for [`Tape::grad_reverse`]. The sign flip is the
/// layer's job; the scale must not smuggle a second flip in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradScale(f64);

impl GradScale {
    pub fn new(lambda: f64) -> Result<Self> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(DllError::InvalidArgument {
                op: "GradScale::new",
                detail: format!("lambda must be finite and >= 0, got {lambda}"),
            });
        }
        Ok(GradScale(lambda))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    /// y = x*w + b, x: [B,din], w: [din,dout], b: [dout].
    Affine { x: Var, w: Var, b: Var },
    /// y = a*b, a: [m,k], b: [k,n].
    Matmul { a: Var, b: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    /// Row-wise softmax with max subtraction.
    SoftmaxRows { x: Var },
    /// Softmax over all positions except `mask`, which is pinned to exactly 0.
    MaskedSoftmax { x: Var, mask: usize },
    /// Clamped log-odds ln(x/(1-x)).
    Logit { x: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    ElemMul { a: Var, b: Var },
    SumAll { x: Var },
    /// Row `index` of a rank-2 tensor, as a rank-1 tensor.
    Row { x: Var, index: usize },
    /// Identity forward; backward multiplies incoming gradients by -lambda.
    GradReverse { x: Var, lambda: f64 },
    /// Identity forward; backward stops here.
    Detach,
    /// Mean binary cross-entropy of predictions `p` against constant targets.
    Bce { p: Var, q: Tensor },
    /// Mean over rows of KL(p_row || r_row); per-row results floored at zero
    /// (the log clamp can leave a residual of order n*eps below zero).
    KlRows { p: Var, r: Var, floored: Vec<bool> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// One recorded forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Tensor>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss w.r.t. node `v`. Zero for nodes the
    /// loss does not reach. Panics if `backward` has not run.
    pub fn grad(&self, v: Var) -> &Tensor {
        assert!(!self.grads.is_empty(), "backward has not run");
        &self.grads[v.0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Insert a constant or parameter value as a leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (bs, din) = (xv.rows(), xv.cols());
        let (wr, dout) = (wv.rows(), wv.cols());
        if din != wr || bv.shape().len() != 1 || bv.len() != dout {
            return Err(DllError::ShapeMismatch {
                op: "affine",
                detail: format!(
                    "x is {:?}, w is {:?}, b is {:?}; want x cols == w rows and b len == w cols",
                    xv.shape(),
                    wv.shape(),
                    bv.shape()
                ),
            });
        }
        let mut out = matmul_nn(xv, wv);
        for i in 0..bs {
            let row = &mut out.data_mut()[i * dout..(i + 1) * dout];
            for (o, bj) in row.iter_mut().zip(bv.data()) {
                *o += *bj;
            }
        }
        Ok(self.push(out, Op::Affine { x, w, b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(DllError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} * {:?}", av.shape(), bv.shape()),
            });
        }
        let out = matmul_nn(av, bv);
        Ok(self.push(out, Op::Matmul { a, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(out, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = 1.0 / (1.0 + (-*v).exp());
        }
        self.push(out, Op::Sigmoid { x })
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = xv.clone();
        for i in 0..r {
            let row = &mut out.data_mut()[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(out, Op::SoftmaxRows { x })
    }

    pub fn masked_softmax(&mut self, x: Var, mask: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 1 || xv.len() < 2 || mask >= xv.len() {
            return Err(DllError::InvalidArgument {
                op: "masked_softmax",
                detail: format!(
                    "wants a rank-1 tensor of len >= 2 and mask < len, got shape {:?} mask {mask}",
                    xv.shape()
                ),
            });
        }
        let mut out = xv.clone();
        let data = out.data_mut();
        let max = data
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != mask)
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (i, v) in data.iter_mut().enumerate() {
            if i == mask {
                *v = 0.0;
            } else {
                *v = (*v - max).exp();
                sum += *v;
            }
        }
        for v in data.iter_mut() {
            *v /= sum;
        }
        Ok(self.push(out, Op::MaskedSoftmax { x, mask }))
    }

    pub fn logit(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            let p = v.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS);
            *v = p.ln() - (1.0 - p).ln();
        }
        self.push(out, Op::Logit { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(DllError::ShapeMismatch {
                op: "add",
                detail: format!("{:?} + {:?}", av.shape(), bv.shape()),
            });
        }
        let mut out = av.clone();
        out.add_assign(bv);
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v *= c;
        }
        self.push(out, Op::Scale { x, c })
    }

    pub fn elem_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(DllError::ShapeMismatch {
                op: "elem_mul",
                detail: format!("{:?} * {:?}", av.shape(), bv.shape()),
            });
        }
        let mut out = av.clone();
        for (o, s) in out.data_mut().iter_mut().zip(bv.data()) {
            *o *= *s;
        }
        Ok(self.push(out, Op::ElemMul { a, b }))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll { x })
    }

    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || index >= xv.rows() {
            return Err(DllError::InvalidArgument {
                op: "row",
                detail: format!("row {index} of shape {:?}", xv.shape()),
            });
        }
        let out = Tensor::from_vec(&[xv.cols()], xv.row(index).to_vec())?;
        Ok(self.push(out, Op::Row { x, index }))
    }

    /// Gradient reversal: forward is the bit-exact identity, backward scales the
    /// incoming gradient by `-lambda`.
    pub fn grad_reverse(&mut self, x: Var, lambda: GradScale) -> Var {
        let out = self.value(x).clone();
        self.push(
            out,
            Op::GradReverse {
                x,
                lambda: lambda.get(),
            },
        )
    }

    /// Forward identity that blocks all gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let out = self.value(x).clone();
        self.push(out, Op::Detach)
    }

    /// Mean over all entries of `-[q ln p + (1-q) ln(1-p)]` with `p` clamped to
    /// `[eps, 1-eps]` inside the logs.
    pub fn bce_loss(&mut self, p: Var, q: &Tensor) -> Result<Var> {
        let pv = self.value(p);
        if pv.shape() != q.shape() {
            return Err(DllError::ShapeMismatch {
                op: "bce_loss",
                detail: format!("p is {:?}, q is {:?}", pv.shape(), q.shape()),
            });
        }
        let n = pv.len() as f64;
        let mut acc = 0.0;
        for (&pi, &qi) in pv.data().iter().zip(q.data()) {
            let pc = pi.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS);
            acc -= qi * pc.ln() + (1.0 - qi) * (1.0 - pc).ln();
        }
        Ok(self.push(
            Tensor::scalar(acc / n),
            Op::Bce {
                p,
                q: q.clone(),
            },
        ))
    }

    /// Mean over rows of `KL(p_row || r_row)`. Rows must be distributions:
    /// entries >= 0, each row summing to 1 within 1e-9. Logs are clamped at
    /// [`CLAMP_EPS`] and each row's divergence is floored at zero.
    pub fn kl_divergence(&mut self, p: Var, r: Var) -> Result<Var> {
        let (pv, rv) = (self.value(p), self.value(r));
        if pv.shape() != rv.shape() {
            return Err(DllError::ShapeMismatch {
                op: "kl_divergence",
                detail: format!("p is {:?}, r is {:?}", pv.shape(), rv.shape()),
            });
        }
        let (rows, cols) = (pv.rows(), pv.cols());
        for (label, t) in [("p", pv), ("r", rv)] {
            for i in 0..rows {
                let row = &t.data()[i * cols..(i + 1) * cols];
                let sum: f64 = row.iter().sum();
                if row.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > 1e-9 {
                    return Err(DllError::NotNormalized {
                        op: if label == "p" {
                            "kl_divergence (first argument)"
                        } else {
                            "kl_divergence (second argument)"
                        },
                        row: i,
                        sum,
                    });
                }
            }
        }
        let mut acc = 0.0;
        let mut floored = vec![false; rows];
        for i in 0..rows {
            let prow = &pv.data()[i * cols..(i + 1) * cols];
            let rrow = &rv.data()[i * cols..(i + 1) * cols];
            let mut kl = 0.0;
            for (&pi, &ri) in prow.iter().zip(rrow) {
                kl += pi * (pi.max(CLAMP_EPS).ln() - ri.max(CLAMP_EPS).ln());
            }
            if kl <= 0.0 {
                floored[i] = kl < 0.0;
                kl = kl.max(0.0);
            }
            acc += kl;
        }
        Ok(self.push(
            Tensor::scalar(acc / rows as f64),
            Op::KlRows { p, r, floored },
        ))
    }

    /// Reverse sweep from scalar `loss`. Fills a gradient per node; reachable
    /// leaves can then be read with [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(DllError::InvalidArgument {
                op: "backward",
                detail: format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|node| Tensor::zeros(node.value.shape()))
            .collect();
        let mut reached = vec![false; n];
        grads[loss.0] = Tensor::scalar(1.0);
        reached[loss.0] = true;

        for i in (0..=loss.0).rev() {
            if !reached[i] {
                continue;
            }
            let g = std::mem::replace(&mut grads[i], Tensor::zeros(&[1]));
            // Split off the already-processed tail so inputs (always < i) stay borrowable.
            let (head, _) = grads.split_at_mut(i);
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Affine { x, w, b } => {
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[w.0].value;
                    head[x.0].add_assign(&matmul_nt(&g, wv));
                    head[w.0].add_assign(&matmul_tn(xv, &g));
                    let dout = g.cols();
                    let gb = &mut head[b.0];
                    for i2 in 0..g.rows() {
                        let grow = &g.data()[i2 * dout..(i2 + 1) * dout];
                        for (bj, gj) in gb.data_mut().iter_mut().zip(grow) {
                            *bj += *gj;
                        }
                    }
                    reached[x.0] = true;
                    reached[w.0] = true;
                    reached[b.0] = true;
                }
                Op::Matmul { a, b } => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    head[a.0].add_assign(&matmul_nt(&g, bv));
                    head[b.0].add_assign(&matmul_tn(av, &g));
                    reached[a.0] = true;
                    reached[b.0] = true;
                }
                Op::Relu { x } => {
                    let xv = &self.nodes[x.0].value;
                    let gx = &mut head[x.0];
                    for ((d, &gi), &xi) in gx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        if xi > 0.0 {
                            *d += gi;
                        }
                    }
                    reached[x.0] = true;
                }
                Op::Sigmoid { x } => {
                    let sv = &node.value;
                    let gx = &mut head[x.0];
                    for ((d, &gi), &si) in gx.data_mut().iter_mut().zip(g.data()).zip(sv.data()) {
                        *d += gi * si * (1.0 - si);
                    }
                    reached[x.0] = true;
                }
                Op::SoftmaxRows { x } => {
                    let sv = &node.value;
                    let (r, c) = (sv.rows(), sv.cols());
                    let gx = &mut head[x.0];
                    for i2 in 0..r {
                        let srow = &sv.data()[i2 * c..(i2 + 1) * c];
                        let grow = &g.data()[i2 * c..(i2 + 1) * c];
                        let dot: f64 = srow.iter().zip(grow).map(|(s, gi)| s * gi).sum();
                        let xrow = &mut gx.data_mut()[i2 * c..(i2 + 1) * c];
                        for ((d, &si), &gi) in xrow.iter_mut().zip(srow).zip(grow) {
                            *d += si * (gi - dot);
                        }
                    }
                    reached[x.0] = true;
                }
                Op::MaskedSoftmax { x, mask } => {
                    let sv = &node.value;
                    let dot: f64 = sv
                        .data()
                        .iter()
                        .zip(g.data())
                        .enumerate()
                        .filter(|&(i2, _)| i2 != *mask)
                        .map(|(_, (s, gi))| s * gi)
                        .sum();
                    let gx = &mut head[x.0];
                    for (i2, ((d, &si), &gi)) in gx
                        .data_mut()
                        .iter_mut()
                        .zip(sv.data())
                        .zip(g.data())
                        .enumerate()
                    {
                        if i2 != *mask {
                            *d += si * (gi - dot);
                        }
                    }
                    reached[x.0] = true;
                }
                Op::Logit { x } => {
                    let xv = &self.nodes[x.0].value;
                    let gx = &mut head[x.0];
                    for ((d, &gi), &xi) in gx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        if xi > CLAMP_EPS && xi < 1.0 - CLAMP_EPS {
                            *d += gi / (xi * (1.0 - xi));
                        }
                    }
                    reached[x.0] = true;
                }
                Op::Add { a, b } => {
                    head[a.0].add_assign(&g);
                    head[b.0].add_assign(&g);
                    reached[a.0] = true;
                    reached[b.0] = true;
                }
                Op::Scale { x, c } => {
                    head[x.0].add_scaled_assign(&g, *c);
                    reached[x.0] = true;
                }
                Op::ElemMul { a, b } => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    {
                        let ga = &mut head[a.0];
                        for ((d, &gi), &bi) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                            *d += gi * bi;
                        }
                    }
                    let gb = &mut head[b.0];
                    for ((d, &gi), &ai) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *d += gi * ai;
                    }
                    reached[a.0] = true;
                    reached[b.0] = true;
                }
                Op::SumAll { x } => {
                    let gi = g.item();
                    for d in head[x.0].data_mut() {
                        *d += gi;
                    }
                    reached[x.0] = true;
                }
                Op::Row { x, index } => {
                    let c = g.len();
                    let gx = &mut head[x.0];
                    let row = &mut gx.data_mut()[index * c..(index + 1) * c];
                    for (d, &gi) in row.iter_mut().zip(g.data()) {
                        *d += gi;
                    }
                    reached[x.0] = true;
                }
                Op::GradReverse { x, lambda } => {
                    head[x.0].add_scaled_assign(&g, -lambda);
                    reached[x.0] = true;
                }
                Op::Detach => {}
                Op::Bce { p, q } => {
                    let pv = &self.nodes[p.0].value;
                    let n2 = pv.len() as f64;
                    let gi = g.item() / n2;
                    let gp = &mut head[p.0];
                    for ((d, &pi), &qi) in gp.data_mut().iter_mut().zip(pv.data()).zip(q.data()) {
                        if pi > CLAMP_EPS && pi < 1.0 - CLAMP_EPS {
                            *d += gi * (pi - qi) / (pi * (1.0 - pi));
                        }
                    }
                    reached[p.0] = true;
                }
                Op::KlRows { p, r, floored } => {
                    let pv = &self.nodes[p.0].value;
                    let rv = &self.nodes[r.0].value;
                    let (rows, cols) = (pv.rows(), pv.cols());
                    let gi = g.item() / rows as f64;
                    for i2 in 0..rows {
                        if floored[i2] {
                            continue;
                        }
                        let prow = &pv.data()[i2 * cols..(i2 + 1) * cols];
                        let rrow = &rv.data()[i2 * cols..(i2 + 1) * cols];
                        {
                            let gp = &mut head[p.0];
                            let gprow = &mut gp.data_mut()[i2 * cols..(i2 + 1) * cols];
                            for ((d, &pi), &ri) in gprow.iter_mut().zip(prow).zip(rrow) {
                                let mut term = pi.max(CLAMP_EPS).ln() - ri.max(CLAMP_EPS).ln();
                                if pi > CLAMP_EPS {
                                    term += 1.0;
                                }
                                *d += gi * term;
                            }
                        }
                        let gr = &mut head[r.0];
                        let grrow = &mut gr.data_mut()[i2 * cols..(i2 + 1) * cols];
                        for ((d, &pi), &ri) in grrow.iter_mut().zip(prow).zip(rrow) {
                            if ri > CLAMP_EPS {
                                *d += gi * (-pi / ri);
                            }
                        }
                    }
                    reached[p.0] = true;
                    reached[r.0] = true;
                }
            }
            grads[i] = g; // keep the node's own gradient readable after the sweep
        }
        self.grads = grads;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(data: &[f64]) -> Tensor {
        Tensor::from_vec(&[data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn affine_identity_passthrough() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.leaf(Tensor::zeros(&[2]));
        let y = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn affine_zero_weight_returns_bias() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[3, 2], vec![0.5; 6]).unwrap());
        let w = tape.leaf(Tensor::zeros(&[2, 4]));
        let b = tape.leaf(t1(&[1.0, -2.0, 3.0, 0.25]));
        let y = tape.affine(x, w, b).unwrap();
        for i in 0..3 {
            assert_eq!(tape.value(y).row(i), &[1.0, -2.0, 3.0, 0.25]);
        }
    }

    #[test]
    fn affine_shape_mismatch_names_dimensions() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3]));
        let w = tape.leaf(Tensor::zeros(&[4, 5]));
        let b = tape.leaf(Tensor::zeros(&[5]));
        let err = tape.affine(x, w, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[0.0, 0.0]));
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_constant_row_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 4], vec![3.0; 4]).unwrap());
        let s = tape.softmax_rows(x);
        for &v in tape.value(s).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2, 3], vec![100.0, -40.0, 3.0, 0.1, 0.2, 0.3]).unwrap());
        let s = tape.softmax_rows(x);
        for i in 0..2 {
            let sum: f64 = tape.value(s).row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_gradient_masks_negative_inputs() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[-1.0, 2.0, -3.0, 4.0]));
        let y = tape.relu(x);
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn bce_matches_hand_value() {
        // p = 0.5 everywhere, any q: loss is ln 2.
        let mut tape = Tape::new();
        let p = tape.leaf(t1(&[0.5, 0.5, 0.5]));
        let loss = tape.bce_loss(p, &t1(&[1.0, 0.0, 1.0])).unwrap();
        assert!((tape.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_perfect_prediction_is_clamp_limited() {
        let mut tape = Tape::new();
        let p = tape.leaf(t1(&[1.0, 0.0]));
        let loss = tape.bce_loss(p, &t1(&[1.0, 0.0])).unwrap();
        // -ln(1 - eps) per entry, essentially zero.
        assert!(tape.value(loss).item() < 1e-6);
    }

    #[test]
    fn kl_identical_distributions_is_zero() {
        let mut tape = Tape::new();
        let p = tape.leaf(t1(&[0.2, 0.3, 0.5]));
        let r = tape.leaf(t1(&[0.2, 0.3, 0.5]));
        let kl = tape.kl_divergence(p, r).unwrap();
        assert_eq!(tape.value(kl).item(), 0.0);
    }

    #[test]
    fn kl_known_value_and_asymmetry() {
        // KL([1,0] || [0.5,0.5]) = ln 2 up to the clamp on the zero entry.
        let mut tape = Tape::new();
        let p = tape.leaf(t1(&[1.0, 0.0]));
        let r = tape.leaf(t1(&[0.5, 0.5]));
        let kl = tape.kl_divergence(p, r).unwrap();
        assert!((tape.value(kl).item() - std::f64::consts::LN_2).abs() < 1e-5);

        let mut tape2 = Tape::new();
        let p2 = tape2.leaf(t1(&[0.5, 0.5]));
        let r2 = tape2.leaf(t1(&[1.0, 0.0]));
        let kl2 = tape2.kl_divergence(p2, r2).unwrap();
        assert!((tape2.value(kl2).item() - tape.value(kl).item()).abs() > 1.0);
    }

    #[test]
    fn kl_rejects_unnormalized_input() {
        let mut tape = Tape::new();
        let p = tape.leaf(t1(&[0.2, 0.3]));
        let r = tape.leaf(t1(&[0.5, 0.5]));
        assert!(matches!(
            tape.kl_divergence(p, r),
            Err(DllError::NotNormalized { .. })
        ));
    }

    #[test]
    fn grad_reverse_forward_identity_backward_flip() {
        for lambda in [0.0, 0.13, 1.0] {
            let mut tape = Tape::new();
            let x = tape.leaf(t1(&[1.5, -2.5, 0.0]));
            let y = tape.grad_reverse(x, GradScale::new(lambda).unwrap());
            assert_eq!(tape.value(y).data(), tape.value(x).data());
            let w = tape.leaf(t1(&[1.0, 2.0, 3.0]));
            let m = tape.elem_mul(y, w).unwrap();
            let s = tape.sum_all(m);
            tape.backward(s).unwrap();
            assert_eq!(tape.grad(x).data(), &[-lambda, -2.0 * lambda, -3.0 * lambda]);
        }
    }

    #[test]
    fn grad_scale_rejects_negative_lambda() {
        assert!(GradScale::new(-0.1).is_err());
        assert!(GradScale::new(f64::NAN).is_err());
    }

    #[test]
    fn detach_blocks_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[2.0, 3.0]));
        let d = tape.detach(x);
        assert_eq!(tape.value(d).data(), &[2.0, 3.0]);
        let s = tape.sum_all(d);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn masked_softmax_zeroes_mask_and_normalizes() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[0.0, std::f64::consts::LN_2, 0.0]));
        let m = tape.masked_softmax(x, 0).unwrap();
        let v = tape.value(m).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!((v[2] - 1.0 / 3.0).abs() < 1e-12);
    }
}
