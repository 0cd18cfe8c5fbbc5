//! Reverse-mode differentiation over a recorded operation list.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and backward is a single reverse sweep.

use crate::error::{PcrpError, Result};

use super::tensor::{matmul_into, matmul_nt_acc, matmul_tn_acc, Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Sigmoid(Var),
    Tanh(Var),
    Concat { a: Var, b: Var, axis: usize },
    Reshape(Var),
    Sum(Var),
    MeanAbs(Var),
    L2Normalize { x: Var, norms: Vec<F> },
    SubsetNll {
        logits: Var,
        rows: Vec<Vec<usize>>,
        probs: Vec<Vec<F>>,
    },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Operation recorder. One graph per forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(PcrpError::Shape {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Right operand must match the left shape or a suffix of it; it is
    /// repeated over the leading axes.
    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(PcrpError::Shape {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(self.value(b).numel())
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let inner = self.broadcast_check(name, a, b)?;
        let bv = self.value(b).data();
        let av = self.value(a);
        let data = if inner == 0 {
            Vec::new()
        } else {
            av.data()
                .chunks(inner)
                .flat_map(|chunk| chunk.iter().zip(bv).map(|(&x, &y)| f(x, y)))
                .collect()
        };
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(F::tanh);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(&sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(PcrpError::Shape {
                op: "concat",
                left: sa,
                right: sb,
            });
        }
        let (outer, ia, ib) = concat_blocks(&sa, &sb, axis);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(da.len() + db.len());
        for o in 0..outer {
            data.extend_from_slice(&da[o * ia..(o + 1) * ia]);
            data.extend_from_slice(&db[o * ib..(o + 1) * ib]);
        }
        let mut shape = sa;
        shape[axis] += sb[axis];
        let value = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Concat { a, b, axis }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: F = self.value(a).data().iter().copied().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum(a);
        self.scale(s, F::one() / F::from_usize(n).unwrap())
    }

    /// Mean of absolute values over every element. Subgradient at zero is 0.
    pub fn mean_abs(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.numel().max(1);
        let s: F = t.data().iter().map(|x| x.abs()).sum();
        let value = Tensor::scalar(s / F::from_usize(n).unwrap());
        let rg = self.any_grad(&[a]);
        self.push(value, Op::MeanAbs(a), rg)
    }

    /// Unit-normalizes along the last axis.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let eps = F::lit(1e-12);
        let t = self.value(a);
        let width = *t.shape().last().ok_or_else(|| {
            PcrpError::Contract("l2_normalize on a scalar".into())
        })?;
        let mut norms = Vec::new();
        let mut data = Vec::with_capacity(t.numel());
        for row in t.data().chunks(width.max(1)) {
            let norm = row.iter().map(|&x| x * x).sum::<F>().sqrt();
            if !(norm > eps) {
                return Err(PcrpError::Normalization { norm: norm.as_f64() });
            }
            norms.push(norm);
            data.extend(row.iter().map(|&x| x / norm));
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::L2Normalize { x: a, norms }, rg))
    }

    /// Per-row negative log-softmax restricted to an index subset.
    ///
    /// `logits` is `[R×K]`; `rows[i]` lists distinct column indices of row
    /// `i` with the positive first. Output `[R]` holds
    /// `logsumexp(logits[i, rows[i]]) − logits[i, rows[i][0]]`, evaluated
    /// with the max logit subtracted.
    pub fn subset_nll(&mut self, logits: Var, rows: Vec<Vec<usize>>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != rows.len() {
            return Err(PcrpError::Shape {
                op: "subset_nll",
                left: shape,
                right: vec![rows.len()],
            });
        }
        let k = shape[1];
        let data = self.value(logits).data();
        let mut out = Vec::with_capacity(rows.len());
        let mut probs = Vec::with_capacity(rows.len());
        for (i, idx) in rows.iter().enumerate() {
            if idx.is_empty() || idx.iter().any(|&j| j >= k) {
                return Err(PcrpError::Contract(format!(
                    "subset_nll row {i}: indices {idx:?} invalid for {k} columns"
                )));
            }
            let row = &data[i * k..(i + 1) * k];
            let max = idx.iter().map(|&j| row[j]).fold(F::neg_infinity(), F::max);
            let exps: Vec<F> = idx.iter().map(|&j| (row[j] - max).exp()).collect();
            let z: F = exps.iter().copied().sum();
            out.push(z.ln() + max - row[idx[0]]);
            probs.push(exps.into_iter().map(|e| e / z).collect());
        }
        let value = Tensor::vector(out);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(value, Op::SubsetNll { logits, rows, probs }, rg))
    }

    /// `−log softmax` of the positive among `v·z_k / temp_k`.
    ///
    /// `v` has shape `[C]`, `prototypes` is a row-major `r×C` constant.
    pub fn log_softmax_dot(
        &mut self,
        v: Var,
        prototypes: &Tensor<F>,
        temps: &[F],
        positive: usize,
    ) -> Result<Var> {
        let ps = prototypes.shape();
        if ps.len() != 2 || ps[0] != temps.len() {
            return Err(PcrpError::Shape {
                op: "log_softmax_dot",
                left: ps.to_vec(),
                right: vec![temps.len()],
            });
        }
        let (r, c) = (ps[0], ps[1]);
        if positive >= r {
            return Err(PcrpError::Param(format!(
                "positive index {positive} out of range for {r} prototypes"
            )));
        }
        if let Some(t) = temps.iter().find(|t| !(**t > F::zero())) {
            return Err(PcrpError::Domain(format!("temperature {t} must be positive")));
        }
        let row = self.reshape(v, vec![1, c])?;
        let zt = self.constant(transpose(prototypes.data(), r, c));
        let dots = self.matmul(row, zt)?;
        let inv = self.constant(Tensor::vector(temps.iter().map(|&t| F::one() / t).collect()));
        let logits = self.mul(dots, inv)?;
        let mut order = vec![positive];
        order.extend((0..r).filter(|&j| j != positive));
        let nll = self.subset_nll(logits, vec![order])?;
        Ok(self.sum(nll))
    }

    /// Gradients of the scalar `loss` with respect to each of `params`.
    /// Parameters the loss does not depend on receive zeros.
    pub fn backward(&self, loss: Var, params: &[Var]) -> Result<Vec<Tensor<F>>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(PcrpError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![F::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        Ok(params
            .iter()
            .map(|p| {
                let shape = self.shape(*p).to_vec();
                match grads.get(p.0).and_then(|g| g.clone()) {
                    Some(g) if self.nodes[p.0].requires_grad => Tensor::new(shape, g).unwrap(),
                    _ => Tensor::zeros(&shape),
                }
            })
            .collect())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<F>>], target: Var, f: impl FnOnce(&mut [F])) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let slot = grads[target.0]
            .get_or_insert_with(|| vec![F::zero(); self.nodes[target.0].value.numel()]);
        f(slot);
    }

    fn propagate(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| matmul_nt_acc(g, bv, ga, m, k, n));
                self.accumulate(grads, *b, |gb| matmul_tn_acc(av, g, gb, m, k, n));
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -F::one() } else { F::one() };
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                let inner = self.value(*b).numel();
                self.accumulate(grads, *b, |gb| {
                    for chunk in g.chunks(inner.max(1)) {
                        gb.iter_mut().zip(chunk).for_each(|(x, &y)| *x += sign * y);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let inner = bv.len();
                self.accumulate(grads, *a, |ga| {
                    for (i, (x, &y)) in ga.iter_mut().zip(g).enumerate() {
                        *x += y * bv[i % inner];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (i, (&y, &x)) in g.iter().zip(av).enumerate() {
                        gb[i % inner] += y * x;
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *c));
            }
            Op::Sigmoid(a) => {
                let out = node.value.data();
                self.accumulate(grads, *a, |ga| {
                    for ((x, &y), &s) in ga.iter_mut().zip(g).zip(out) {
                        *x += y * s * (F::one() - s);
                    }
                });
            }
            Op::Tanh(a) => {
                let out = node.value.data();
                self.accumulate(grads, *a, |ga| {
                    for ((x, &y), &t) in ga.iter_mut().zip(g).zip(out) {
                        *x += y * (F::one() - t * t);
                    }
                });
            }
            Op::Concat { a, b, axis } => {
                let (outer, ia, ib) = concat_blocks(self.shape(*a), self.shape(*b), *axis);
                self.accumulate(grads, *a, |ga| {
                    for o in 0..outer {
                        let src = &g[o * (ia + ib)..o * (ia + ib) + ia];
                        ga[o * ia..(o + 1) * ia].iter_mut().zip(src).for_each(|(x, &y)| *x += y);
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for o in 0..outer {
                        let src = &g[o * (ia + ib) + ia..(o + 1) * (ia + ib)];
                        gb[o * ib..(o + 1) * ib].iter_mut().zip(src).for_each(|(x, &y)| *x += y);
                    }
                });
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::MeanAbs(a) => {
                let av = self.value(*a).data();
                let scale = g[0] / F::from_usize(av.len().max(1)).unwrap();
                self.accumulate(grads, *a, |ga| {
                    for (x, &v) in ga.iter_mut().zip(av) {
                        *x += scale * sign0(v);
                    }
                });
            }
            Op::L2Normalize { x, norms } => {
                let y = node.value.data();
                let width = y.len() / norms.len().max(1);
                self.accumulate(grads, *x, |gx| {
                    for (r, &norm) in norms.iter().enumerate() {
                        let span = r * width..(r + 1) * width;
                        let (yr, gr) = (&y[span.clone()], &g[span.clone()]);
                        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((o, &yi), &gi) in gx[span].iter_mut().zip(yr).zip(gr) {
                            *o += (gi - yi * dot) / norm;
                        }
                    }
                });
            }
            Op::SubsetNll { logits, rows, probs } => {
                let k = self.shape(*logits)[1];
                self.accumulate(grads, *logits, |gl| {
                    for (i, (idx, p)) in rows.iter().zip(probs).enumerate() {
                        for (pos, (&j, &pj)) in idx.iter().zip(p).enumerate() {
                            let target = if pos == 0 { F::one() } else { F::zero() };
                            gl[i * k + j] += g[i] * (pj - target);
                        }
                    }
                });
            }
        }
    }
}

fn concat_blocks(sa: &[usize], sb: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = sa[..axis].iter().product();
    let ia: usize = sa[axis..].iter().product();
    let ib: usize = sb[axis..].iter().product();
    (outer, ia, ib)
}

pub(crate) fn transpose<F: Real>(data: &[F], rows: usize, cols: usize) -> Tensor<F> {
    let mut out = vec![F::zero(); data.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    Tensor::new(vec![cols, rows], out).unwrap()
}

fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn sign0<F: Real>(x: F) -> F {
    if x > F::zero() {
        F::one()
    } else if x < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}
