//! Reverse-mode automatic differentiation over [`Array2`] values.
//!
//! A [`Tape`] records every operation in execution order. Nodes whose inputs
//! are all constants are evaluated eagerly and never visited by
//! [`Tape::backward`], so inference through the same network code costs only
//! the forward arithmetic.

use super::array::{dot, Array2};
use super::param::Parameter;
use crate::error::{FbError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Col,
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    Tanh,
    Exp,
    Log,
    Square,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Binary(BinaryOp, Var, Var, Broadcast),
    Unary(UnaryOp, Var),
    Scale(Var, f64),
    SumAll(Var),
    SumCols(Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    Minimum(Var, Var),
    /// Cached per-row inverse standard deviations.
    LayerNorm(Var, Vec<f64>),
    /// Cached softmax probabilities.
    LogSoftmax(Var, Array2),
    /// Block boundaries and cached per-row, per-block norms.
    BlockNormalize(Var, Vec<(usize, usize)>, Vec<f64>),
}

struct Node {
    value: Array2,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2 {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Array2, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Array2, inputs: &[Var], op: Op) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Constant subgraphs keep their value but drop backward bookkeeping.
        let op = if rg { op } else { Op::Leaf };
        self.push(value, rg, op)
    }

    pub fn constant(&mut self, value: Array2) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// A leaf that gradients flow into.
    pub fn variable(&mut self, value: Array2) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Binds a parameter; `trainable = false` records it as a constant.
    pub fn param(&mut self, p: &Parameter, trainable: bool) -> Var {
        self.push(p.value.clone(), trainable, Op::Leaf)
    }

    /// Copies the value into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push_op(value, &[a, b], Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push_op(value, &[a, b], Op::MatMulNt(a, b)))
    }

    fn broadcast_kind(a: &Array2, b: &Array2) -> Result<Broadcast> {
        let (ar, ac) = a.shape();
        match b.shape() {
            (r, c) if r == ar && c == ac => Ok(Broadcast::Same),
            (1, 1) => Ok(Broadcast::Scalar),
            (1, c) if c == ac => Ok(Broadcast::Row),
            (r, 1) if r == ar => Ok(Broadcast::Col),
            (r, c) => Err(FbError::Dimension(format!(
                "cannot broadcast {}x{} onto {}x{}",
                r, c, ar, ac
            ))),
        }
    }

    /// Binary elementwise op; `b` may be the same shape as `a`, a `1×cols`
    /// row, a `rows×1` column or a `1×1` scalar.
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let kind = Self::broadcast_kind(av, bv)?;
        let f = match op {
            BinaryOp::Add => |x: f64, y: f64| x + y,
            BinaryOp::Sub => |x: f64, y: f64| x - y,
            BinaryOp::Mul => |x: f64, y: f64| x * y,
        };
        let (rows, cols) = av.shape();
        let mut out = av.clone();
        {
            let od = out.data_mut();
            let bd = bv.data();
            match kind {
                Broadcast::Same => od.iter_mut().zip(bd).for_each(|(o, &y)| *o = f(*o, y)),
                Broadcast::Scalar => od.iter_mut().for_each(|o| *o = f(*o, bd[0])),
                Broadcast::Row => {
                    for i in 0..rows {
                        for j in 0..cols {
                            od[i * cols + j] = f(od[i * cols + j], bd[j]);
                        }
                    }
                }
                Broadcast::Col => {
                    for i in 0..rows {
                        for j in 0..cols {
                            od[i * cols + j] = f(od[i * cols + j], bd[i]);
                        }
                    }
                }
            }
        }
        Ok(self.push_op(out, &[a, b], Op::Binary(op, a, b, kind)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Var {
        let f: fn(f64) -> f64 = match op {
            UnaryOp::Relu => |x| if x > 0.0 { x } else { 0.0 },
            UnaryOp::Tanh => f64::tanh,
            UnaryOp::Exp => f64::exp,
            UnaryOp::Log => f64::ln,
            UnaryOp::Square => |x| x * x,
        };
        let value = self.value(a).map(f);
        self.push_op(value, &[a], Op::Unary(op, a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Tanh, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Log, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Square, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.push_op(value, &[a], Op::Scale(a, c))
    }

    /// `x · w + bias`, with `bias` a `1×out` row.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add(h, bias)
    }

    /// `x · (w ⊙ mask) + bias`. Masked-out weights receive exactly zero
    /// gradient.
    pub fn masked_linear(&mut self, x: Var, w: Var, mask: Var, bias: Var) -> Result<Var> {
        let (ws, ms) = (self.value(w).shape(), self.value(mask).shape());
        if ws != ms {
            return Err(FbError::Dimension(format!(
                "mask {}x{} does not match weight {}x{}",
                ms.0, ms.1, ws.0, ws.1
            )));
        }
        let masked = self.mul(w, mask)?;
        self.linear(x, masked, bias)
    }

    /// Sum of all entries, as a `1×1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::scalar(self.value(a).sum());
        self.push_op(value, &[a], Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums, as a `rows×1` node.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Array2::from_fn(av.rows(), 1, |i, _| av.row(i).iter().sum());
        self.push_op(value, &[a], Op::SumCols(a))
    }

    /// Per-row dot products of two equally shaped nodes, as `rows×1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        Ok(self.sum_cols(p))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Array2> = parts.iter().map(|v| self.value(*v)).collect();
        let value = Array2::hcat(&refs)?;
        Ok(self.push_op(value, parts, Op::Concat(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start > end || end > av.cols() {
            return Err(FbError::Dimension(format!(
                "column slice {}..{} of {}x{}",
                start,
                end,
                av.rows(),
                av.cols()
            )));
        }
        let value = av.slice_cols(start, end);
        Ok(self.push_op(value, &[a], Op::SliceCols(a, start)))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(FbError::Dimension(format!(
                "minimum of {}x{} and {}x{}",
                av.rows(),
                av.cols(),
                bv.rows(),
                bv.cols()
            )));
        }
        let value = av.zip_map(bv, |x, y| if y < x { y } else { x });
        Ok(self.push_op(value, &[a, b], Op::Minimum(a, b)))
    }

    /// Row-wise standardization without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let (rows, cols) = av.shape();
        let mut out = av.clone();
        let mut inv_std = Vec::with_capacity(rows);
        for i in 0..rows {
            let r = out.row_mut(i);
            let mean = r.iter().sum::<f64>() / cols as f64;
            let var = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            r.iter_mut().for_each(|x| *x = (*x - mean) * is);
            inv_std.push(is);
        }
        self.push_op(out, &[a], Op::LayerNorm(a, inv_std))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (rows, _) = av.shape();
        let mut out = av.clone();
        let mut probs = av.clone();
        for i in 0..rows {
            let r = out.row_mut(i);
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + r.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            r.iter_mut().for_each(|x| *x -= lse);
            for (p, x) in probs.row_mut(i).iter_mut().zip(out.row(i)) {
                *p = x.exp();
            }
        }
        self.push_op(out, &[a], Op::LogSoftmax(a, probs))
    }

    /// Rescales every row block `[start, end)` to Euclidean norm
    /// `sqrt(end - start)`.
    pub fn block_normalize(&mut self, a: Var, blocks: &[(usize, usize)]) -> Var {
        let av = self.value(a);
        let rows = av.rows();
        let mut out = av.clone();
        let mut norms = Vec::with_capacity(rows * blocks.len());
        for i in 0..rows {
            let r = out.row_mut(i);
            for &(s, e) in blocks {
                let n = r[s..e].iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                let c = ((e - s) as f64).sqrt() / n;
                r[s..e].iter_mut().for_each(|x| *x *= c);
                norms.push(n);
            }
        }
        self.push_op(out, &[a], Op::BlockNormalize(a, blocks.to_vec(), norms))
    }

    /// Accumulates `d loss / d node` for every node reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(FbError::contract(format!(
                "backward needs a scalar loss, got {}x{}",
                lv.rows(),
                lv.cols()
            )));
        }
        let mut grads: Vec<Option<Array2>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Array2>], v: Var, g: Array2) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Array2, grads: &mut [Option<Array2>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.matmul_nt(bv)?);
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, av.matmul_tn(g)?);
                }
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.matmul(bv)?);
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.matmul_tn(av)?);
                }
            }
            Op::Binary(op, a, b, kind) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let ga = match op {
                        BinaryOp::Add | BinaryOp::Sub => g.clone(),
                        BinaryOp::Mul => {
                            let mut ga = g.clone();
                            let (rows, cols) = g.shape();
                            let bd = bv.data();
                            let gd = ga.data_mut();
                            for i in 0..rows {
                                for j in 0..cols {
                                    let y = match kind {
                                        Broadcast::Same => bd[i * cols + j],
                                        Broadcast::Row => bd[j],
                                        Broadcast::Col => bd[i],
                                        Broadcast::Scalar => bd[0],
                                    };
                                    gd[i * cols + j] *= y;
                                }
                            }
                            ga
                        }
                    };
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let full = match op {
                        BinaryOp::Add => g.clone(),
                        BinaryOp::Sub => g.scale(-1.0),
                        BinaryOp::Mul => g.zip_map(av, |x, y| x * y),
                    };
                    let gb = reduce_broadcast(&full, *kind, bv.shape());
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Unary(op, a) => {
                let av = self.value(*a);
                let out = &node.value;
                let ga = match op {
                    UnaryOp::Relu => g.zip_map(av, |gi, x| if x > 0.0 { gi } else { 0.0 }),
                    UnaryOp::Tanh => g.zip_map(out, |gi, y| gi * (1.0 - y * y)),
                    UnaryOp::Exp => g.zip_map(out, |gi, y| gi * y),
                    UnaryOp::Log => g.zip_map(av, |gi, x| gi / x),
                    UnaryOp::Square => g.zip_map(av, |gi, x| 2.0 * gi * x),
                };
                self.accumulate(grads, *a, ga);
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.scale(*c)),
            Op::SumAll(a) => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(grads, *a, Array2::filled(r, c, g.item()));
            }
            Op::SumCols(a) => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(grads, *a, Array2::from_fn(r, c, |i, _| g.get(i, 0)));
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.requires_grad(*p) {
                        self.accumulate(grads, *p, g.slice_cols(start, start + w));
                    }
                    start += w;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Array2::zeros(r, c);
                let w = g.cols();
                for i in 0..r {
                    ga.row_mut(i)[*start..*start + w].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let take_b = av.zip_map(bv, |x, y| if y < x { 1.0 } else { 0.0 });
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.zip_map(&take_b, |gi, t| gi * (1.0 - t)));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.zip_map(&take_b, |gi, t| gi * t));
                }
            }
            Op::LayerNorm(a, inv_std) => {
                let y = &node.value;
                let (rows, cols) = y.shape();
                let n = cols as f64;
                let mut ga = Array2::zeros(rows, cols);
                for i in 0..rows {
                    let (gr, yr) = (g.row(i), y.row(i));
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = dot(gr, yr) / n;
                    for (o, (&gi, &yi)) in ga.row_mut(i).iter_mut().zip(gr.iter().zip(yr)) {
                        *o = inv_std[i] * (gi - mean_g - yi * mean_gy);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LogSoftmax(a, probs) => {
                let (rows, cols) = probs.shape();
                let mut ga = Array2::zeros(rows, cols);
                for i in 0..rows {
                    let gsum: f64 = g.row(i).iter().sum();
                    for ((o, &gi), &p) in ga.row_mut(i).iter_mut().zip(g.row(i)).zip(probs.row(i)) {
                        *o = gi - p * gsum;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::BlockNormalize(a, blocks, norms) => {
                let y = &node.value;
                let (rows, cols) = y.shape();
                let mut ga = Array2::zeros(rows, cols);
                for i in 0..rows {
                    for (b, &(s, e)) in blocks.iter().enumerate() {
                        let n = norms[i * blocks.len() + b];
                        let target = ((e - s) as f64).sqrt();
                        let gr = &g.row(i)[s..e];
                        let yr = &y.row(i)[s..e];
                        // y = target * x / |x|; dy/dx = (target/|x|)(I - u uᵀ), u = y/target
                        let proj = dot(gr, yr) / (target * target);
                        for (k, o) in ga.row_mut(i)[s..e].iter_mut().enumerate() {
                            *o = target / n * (gr[k] - proj * yr[k]);
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
        }
        Ok(())
    }
}

fn reduce_broadcast(full: &Array2, kind: Broadcast, shape: (usize, usize)) -> Array2 {
    match kind {
        Broadcast::Same => full.clone(),
        Broadcast::Scalar => Array2::scalar(full.sum()),
        Broadcast::Row => {
            let mut out = Array2::zeros(1, shape.1);
            for i in 0..full.rows() {
                for (o, &v) in out.data_mut().iter_mut().zip(full.row(i)) {
                    *o += v;
                }
            }
            out
        }
        Broadcast::Col => Array2::from_fn(shape.0, 1, |i, _| full.row(i).iter().sum()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2 {
        Array2::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    /// Checks the tape gradient of `build(x)` against central differences.
    fn check(x: Array2, build: impl Fn(&mut Tape, Var) -> Var) {
        let mut tape = Tape::new();
        let v = tape.variable(x.clone());
        let out = build(&mut tape, v);
        let grads = tape.backward(out).unwrap();
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Array2::zeros(x.rows(), x.cols()));
        let numeric = finite_difference(&x, 1e-5, |p| {
            let mut t = Tape::new();
            let v = t.constant(p.clone());
            let o = build(&mut t, v);
            t.value(o).item()
        });
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-6, "relative error {err:.3e}\n{analytic:?}\n{numeric:?}");
    }

    #[test]
    fn relu_and_tanh_values() {
        let mut t = Tape::new();
        let x = t.constant(Array2::row_vector(&[-1.0, 0.0, 2.0]));
        let r = t.relu(x);
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = t.constant(Array2::scalar(0.0));
        let th = t.tanh(z);
        assert_eq!(t.value(th).item(), 0.0);
        let p = t.constant(Array2::row_vector(&[0.3, 1.0, 7.5]));
        let l = t.log(p);
        let e = t.exp(l);
        for (a, b) in t.value(e).data().iter().zip([0.3, 1.0, 7.5]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = random(4, 3, &mut rng);
        let row = random(1, 3, &mut rng);
        let col = random(5, 1, &mut rng);
        let other = random(5, 3, &mut rng);

        check(random(5, 4, &mut rng), |t, x| {
            let w = t.constant(w.clone());
            let h = t.matmul(x, w).unwrap();
            let h = t.tanh(h);
            t.sum(h)
        });
        check(random(4, 3, &mut rng), |t, w| {
            let x =t.constant(Array2::from_fn(5, 4, |i, j| ((i * 4 + j) as f64).sin()));
            let h = t.matmul(x, w).unwrap();
            let s = t.square(h);
            t.mean(s)
        });
        check(random(5, 3, &mut rng), |t, x| {
            let o = t.constant(other.clone());
            let p = t.matmul_nt(x, o).unwrap();
            let p = t.square(p);
            t.sum(p)
        });
        for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul] {
            for b in [other.clone(), row.clone(), col.clone(), Array2::scalar(0.7)] {
                check(random(5, 3, &mut rng), |t, x| {
                    let bv = t.constant(b.clone());
                    let y = t.binary(op, x, bv).unwrap();
                    let y = t.square(y);
                    t.sum(y)
                });
                // gradient into the broadcast operand
                check(b.clone(), |t, bv| {
                    let a = t.constant(other.clone());
                    let y = t.binary(op, a, bv).unwrap();
                    let y = t.tanh(y);
                    t.sum(y)
                });
            }
        }
        check(random(3, 4, &mut rng).map(|v| v.abs() + 0.2), |t, x| {
            let l = t.log(x);
            let e = t.exp(l);
            let y = t.mul(l, e).unwrap();
            t.sum(y)
        });
        check(random(3, 4, &mut rng), |t, x| {
            let r = t.relu(x);
            let s = t.square(r);
            let s = t.scale(s, -1.7);
            t.sum(s)
        });
        check(random(4, 5, &mut rng), |t, x| {
            let s = t.sum_cols(x);
            let s = t.square(s);
            t.sum(s)
        });
        check(random(4, 5, &mut rng), |t, x| {
            let a = t.slice_cols(x, 1, 3).unwrap();
            let b = t.slice_cols(x, 3, 5).unwrap();
            let c = t.concat_cols(&[b, a, x]).unwrap();
            let c = t.tanh(c);
            let c = t.square(c);
            t.sum(c)
        });
        check(random(4, 3, &mut rng), |t, x| {
            let o = t.constant(other.gather_rows(&[0, 1, 2, 3]));
            let m = t.minimum(x, o).unwrap();
            let m = t.square(m);
            t.sum(m)
        });
        check(random(4, 6, &mut rng), |t, x| {
            let y = t.layer_norm(x, 1e-5);
            let k = t.constant(Array2::from_fn(4, 6, |i, j| (i as f64 - j as f64).cos()));
            let y = t.mul(y, k).unwrap();
            let y = t.tanh(y);
            t.sum(y)
        });
        check(random(4, 5, &mut rng), |t, x| {
            let y = t.log_softmax(x);
            let k = t.constant(Array2::from_fn(4, 5, |i, j| ((i + 2 * j) % 3) as f64));
            let y = t.mul(y, k).unwrap();
            t.sum(y)
        });
        check(random(3, 6, &mut rng), |t, x| {
            let y = t.block_normalize(x, &[(0, 2), (2, 3), (3, 6)]);
            let k = t.constant(Array2::from_fn(3, 6, |i, j| (1.0 + i as f64) * (j as f64 - 2.5)));
            let y = t.mul(y, k).unwrap();
            t.sum(y)
        });
        check(random(3, 4, &mut rng), |t, w| {
            let x = t.constant(Array2::from_fn(5, 3, |i, j| (i as f64 + 0.5 * j as f64).sin()));
            let mask = t.constant(Array2::from_fn(3, 4, |i, j| if (i + j) % 2 == 0 { 1.0 } else { 0.0 }));
            let b = t.constant(Array2::row_vector(&[0.1, -0.2, 0.3, 0.0]));
            let y = t.masked_linear(x, w, mask, b).unwrap();
            let y = t.tanh(y);
            t.sum(y)
        });
    }

    #[test]
    fn masked_weights_get_exact_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut t = Tape::new();
        let x = t.constant(random(6, 4, &mut rng));
        let w = t.variable(random(4, 3, &mut rng));
        let mask_arr = Array2::from_fn(4, 3, |i, j| if i > j { 1.0 } else { 0.0 });
        let mask = t.constant(mask_arr.clone());
        let b = t.variable(random(1, 3, &mut rng));
        let y = t.masked_linear(x, w, mask, b).unwrap();
        let y = t.square(y);
        let loss = t.sum(y);
        let g = t.backward(loss).unwrap();
        let gw = g.get(w).unwrap();
        for (gv, m) in gw.data().iter().zip(mask_arr.data()) {
            if *m == 0.0 {
                assert_eq!(*gv, 0.0);
            }
        }
    }

    #[test]
    fn mask_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xa = random(3, 4, &mut rng);
        let wa = random(4, 2, &mut rng);
        let ba = random(1, 2, &mut rng);
        let mut t = Tape::new();
        let (x, w, b) = (t.constant(xa), t.constant(wa), t.constant(ba.clone()));
        let ones = t.constant(Array2::filled(4, 2, 1.0));
        let zeros = t.constant(Array2::zeros(4, 2));
        let masked = t.masked_linear(x, w, ones, b).unwrap();
        let plain = t.linear(x, w, b).unwrap();
        assert_eq!(t.value(masked), t.value(plain));
        let only_bias = t.masked_linear(x, w, zeros, b).unwrap();
        for i in 0..3 {
            assert_eq!(t.value(only_bias).row(i), ba.row(0));
        }
        let bad = t.constant(Array2::zeros(2, 4));
        assert!(matches!(t.masked_linear(x, w, bad, b), Err(FbError::Dimension(_))));
    }

    #[test]
    fn sum_of_squares_gradient_and_accumulation() {
        let wv = Array2::row_vector(&[1.0, -2.0, 0.5]);
        let mut p = Parameter::new("w", wv.clone());
        let mut t = Tape::new();
        let w = t.param(&p, true);
        let sq = t.mul(w, w).unwrap();
        let loss = t.sum(sq);
        let g = t.backward(loss).unwrap();
        p.accumulate(&g, w);
        assert_eq!(p.grad, wv.scale(2.0));
        let g = t.backward(loss).unwrap();
        p.accumulate(&g, w);
        assert_eq!(p.grad, wv.scale(4.0));
        p.zero_grad();
        assert_eq!(p.grad.sum(), 0.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let x = t.variable(Array2::zeros(2, 2));
        assert!(matches!(t.backward(x), Err(FbError::Contract(_))));
    }

    #[test]
    fn broadcast_errors() {
        let mut t = Tape::new();
        let a = t.constant(Array2::zeros(3, 2));
        let b = t.constant(Array2::zeros(2, 3));
        assert!(matches!(t.add(a, b), Err(FbError::Dimension(_))));
    }
}
