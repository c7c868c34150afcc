//! Append-only computation tape for reverse-mode differentiation.
//!
//! Every operation pushes one node holding its forward value and the
//! references needed by its backward rule. Because nodes can only refer to
//! earlier nodes, the tape is always in topological order and a single
//! reverse sweep visits each operation once.
//!
//! Gradients accumulate: [`Tape::backward`] adds into the stored gradient of
//! every node that requires one, so running it twice without
//! [`Tape::zero_grad`] yields exactly twice the gradient.

use super::tensor::{gemm, Operand, Tensor2D};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor2D,
    },
    StraightThrough {
        h: Var,
    },
    SquaredDistance {
        a: Var,
        b: Var,
    },
    GatherRows {
        src: Var,
        indices: Vec<usize>,
    },
    Sum {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        k: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor2D,
    requires_grad: bool,
    grad: Option<Tensor2D>,
    op: Op,
}

#[derive(Debug, Default)]
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

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor2D, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor2D) -> Var {
        self.leaf(value, false)
    }

    /// Parameter that receives a gradient.
    pub fn param(&mut self, value: Tensor2D) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor2D {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor2D> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor2D, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Stop-gradient: same value, cut from the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    /// `x . w + b`, with `b` (1 x O) broadcast over the rows of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.cols() != wv.rows() || bv.rows() != 1 || bv.cols() != wv.cols() {
            return Err(Error::shape(
                "linear",
                format!(
                    "x {}x{}, w {}x{}, b {}x{}",
                    xv.rows(),
                    xv.cols(),
                    wv.rows(),
                    wv.cols(),
                    bv.rows(),
                    bv.cols()
                ),
            ));
        }
        let mut out = Tensor2D::zeros(xv.rows(), wv.cols());
        for r in 0..out.rows() {
            out.row_mut(r).copy_from_slice(bv.data());
        }
        gemm(
            xv.rows(),
            xv.cols(),
            wv.cols(),
            Operand::plain(xv),
            Operand::plain(wv),
            &mut out,
        );
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(out, rg, Op::Linear { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.any_grad(&[x]);
        self.push(out, rg, Op::Relu { x })
    }

    /// Mean over rows of `-log softmax(logits)[label]`, as a 1x1 node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, c) = lv.shape();
        if labels.len() != n {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if n == 0 {
            return Err(Error::InvalidArgument(
                "softmax_cross_entropy needs at least one row".into(),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let mut probs = Tensor2D::zeros(n, c);
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            let prow = probs.row_mut(r);
            for (p, &z) in prow.iter_mut().zip(row) {
                *p = (z - max).exp();
                denom += *p;
            }
            prow.iter_mut().for_each(|p| *p /= denom);
            loss += denom.ln() - (row[label] - max);
        }
        loss /= n as f64;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor2D::scalar(loss),
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Forward value `q`; backward copies the incoming gradient onto `h`
    /// unchanged. `q` itself is recorded as a constant, so nothing upstream
    /// of `q` is reached through this node.
    pub fn straight_through(&mut self, h: Var, q: Tensor2D) -> Result<Var> {
        if !self.value(h).same_shape(&q) {
            return Err(Error::shape(
                "straight_through",
                format!("h {:?} vs q {:?}", self.value(h).shape(), q.shape()),
            ));
        }
        let rg = self.any_grad(&[h]);
        Ok(self.push(q, rg, Op::StraightThrough { h }))
    }

    /// `sum_ij (a_ij - b_ij)^2` as a 1x1 node.
    pub fn squared_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(Error::shape(
                "squared_distance",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let s: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor2D::scalar(s), rg, Op::SquaredDistance { a, b }))
    }

    pub fn gather_rows(&mut self, src: Var, indices: &[usize]) -> Result<Var> {
        let sv = self.value(src);
        if let Some(&bad) = indices.iter().find(|&&i| i >= sv.rows()) {
            return Err(Error::InvalidArgument(format!(
                "row index {bad} out of range for {} rows",
                sv.rows()
            )));
        }
        let out = sv.select_rows(indices);
        let rg = self.any_grad(&[src]);
        Ok(self.push(
            out,
            rg,
            Op::GatherRows {
                src,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor2D::scalar(s), rg, Op::Sum { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_values("add", a, b, |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Add { a, b }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_values("mul", a, b, |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).map(|v| v * k);
        let rg = self.any_grad(&[x]);
        self.push(out, rg, Op::Scale { x, k })
    }

    fn zip_values(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor2D> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor2D::new(av.rows(), av.cols(), data)
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient and
    /// adds it to that node's stored gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("loss must be 1x1, got {:?}", lv.shape()),
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut local: Vec<Option<Tensor2D>> = (0..=loss.0).map(|_| None).collect();
        local[loss.0] = Some(Tensor2D::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = local[i].take() else { continue };
            self.propagate(i, &g, &mut local);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor2D, local: &mut [Option<Tensor2D>]) {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if wants(*x) {
                    let mut dx = Tensor2D::zeros(xv.rows(), xv.cols());
                    gemm(
                        g.rows(),
                        g.cols(),
                        wv.rows(),
                        Operand::plain(g),
                        Operand::transposed(wv),
                        &mut dx,
                    );
                    accumulate(local, *x, dx);
                }
                if wants(*w) {
                    let mut dw = Tensor2D::zeros(wv.rows(), wv.cols());
                    gemm(
                        xv.cols(),
                        xv.rows(),
                        g.cols(),
                        Operand::transposed(xv),
                        Operand::plain(g),
                        &mut dw,
                    );
                    accumulate(local, *w, dw);
                }
                if wants(*b) {
                    let mut db = Tensor2D::zeros(1, g.cols());
                    for r in g.row_iter() {
                        for (d, v) in db.data_mut().iter_mut().zip(r) {
                            *d += v;
                        }
                    }
                    accumulate(local, *b, db);
                }
            }
            Op::Relu { x } => {
                if wants(*x) {
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
                        .collect();
                    accumulate(local, *x, tensor_like(xv, data));
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if wants(*logits) {
                    let upstream = g.data()[0] / labels.len() as f64;
                    let mut d = probs.clone();
                    for (r, &label) in labels.iter().enumerate() {
                        let row = d.row_mut(r);
                        row[label] -= 1.0;
                        row.iter_mut().for_each(|v| *v *= upstream);
                    }
                    accumulate(local, *logits, d);
                }
            }
            Op::StraightThrough { h } => {
                if wants(*h) {
                    accumulate(local, *h, g.clone());
                }
            }
            Op::SquaredDistance { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let up = g.data()[0];
                if wants(*a) {
                    let data = av
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(x, y)| 2.0 * (x - y) * up)
                        .collect();
                    accumulate(local, *a, tensor_like(av, data));
                }
                if wants(*b) {
                    let data = av
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(x, y)| -2.0 * (x - y) * up)
                        .collect();
                    accumulate(local, *b, tensor_like(bv, data));
                }
            }
            Op::GatherRows { src, indices } => {
                if wants(*src) {
                    let sv = self.value(*src);
                    let mut d = Tensor2D::zeros(sv.rows(), sv.cols());
                    for (j, &idx) in indices.iter().enumerate() {
                        for (o, v) in d.row_mut(idx).iter_mut().zip(g.row(j)) {
                            *o += v;
                        }
                    }
                    accumulate(local, *src, d);
                }
            }
            Op::Sum { x } => {
                if wants(*x) {
                    let xv = self.value(*x);
                    accumulate(local, *x, Tensor2D::filled(xv.rows(), xv.cols(), g.data()[0]));
                }
            }
            Op::Add { a, b } => {
                if wants(*a) {
                    accumulate(local, *a, g.clone());
                }
                if wants(*b) {
                    accumulate(local, *b, g.clone());
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if wants(*a) {
                    let data = g.data().iter().zip(bv.data()).map(|(d, y)| d * y).collect();
                    accumulate(local, *a, tensor_like(av, data));
                }
                if wants(*b) {
                    let data = g.data().iter().zip(av.data()).map(|(d, x)| d * x).collect();
                    accumulate(local, *b, tensor_like(bv, data));
                }
            }
            Op::Scale { x, k } => {
                if wants(*x) {
                    accumulate(local, *x, g.map(|v| v * k));
                }
            }
        }
    }
}

fn tensor_like(t: &Tensor2D, data: Vec<f64>) -> Tensor2D {
    Tensor2D::new(t.rows(), t.cols(), data).expect("gradient has the shape of its input")
}

// First contribution is moved in rather than added to zeros, keeping
// single-path gradients bitwise identical to their source (signed zeros included).
fn accumulate(local: &mut [Option<Tensor2D>], v: Var, g: Tensor2D) {
    match &mut local[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
