//! A small tape-based reverse-mode differentiation engine over dense `f64`
//! tensors.
//!
//! The operator set is deliberately closed: `matmul`, `softmax_rows`,
//! `mul`, `add`, `exp`, `scale`, `sum` and `gather`. Anything that is not
//! differentiable (sorting, thresholding, sign masks) is computed outside the
//! tape and enters as a constant.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    SoftmaxRows(Var),
    Mul(Var, Var),
    Add(Var, Var),
    Exp(Var),
    Scale(Var, f64),
    Sum(Var),
    Gather(Var, Arc<Vec<usize>>),
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Work below this many multiply-adds stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn as_matrix(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [r, c] => Ok((r, c)),
        _ => Err(Error::Shape {
            op,
            detail: format!("expected a matrix, got shape {shape:?}"),
        }),
    }
}

/// `out[m x n] += a[m x k] * b[k x n]`, rows computed independently.
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let row = |(i, out_row): (usize, &mut [f64])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (t, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[t * n..(t + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let grad = vec![0.0; value.len()];
        self.nodes.push(Node {
            shape,
            value,
            grad,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, shape: &[usize], values: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if numel(shape) != values.len() {
            return Err(Error::Shape {
                op: "leaf",
                detail: format!("shape {shape:?} needs {} values, got {}", numel(shape), values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape {
                op: "leaf",
                detail: "non-finite value".into(),
            });
        }
        Ok(self.push(shape.to_vec(), values, Op::Leaf, requires_grad))
    }

    /// Trainable leaf: receives a gradient on [`Graph::backward`].
    pub fn param(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        self.leaf(shape, values, true)
    }

    /// Constant leaf: no gradient is propagated into it.
    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        self.leaf(shape, values, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix("matmul", self.shape(a))?;
        let (k2, n) = as_matrix("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("[{m}x{k}] * [{k2}x{n}]"),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.needs(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (_, cols) = as_matrix("softmax_rows", self.shape(a))?;
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.needs(&[a]);
        Ok(self.push(shape, out, Op::SoftmaxRows(a), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(&[a, b]);
        Ok(self.push(shape, out, Op::Mul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(&[a, b]);
        Ok(self.push(shape, out, Op::Add(a, b), rg))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x.exp()).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(&[a]);
        Ok(self.push(shape, out, Op::Exp(a), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(&[a]);
        Ok(self.push(shape, out, Op::Scale(a, s), rg))
    }

    /// Sum of all elements as a scalar (shape `[]`).
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).iter().sum();
        let rg = self.needs(&[a]);
        Ok(self.push(Vec::new(), vec![total], Op::Sum(a), rg))
    }

    /// `out[i] = a[indices[i]]` (flat indexing), reshaped to `shape`.
    /// The adjoint scatter-adds, so repeated indices accumulate.
    pub fn gather(&mut self, a: Var, indices: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        if numel(shape) != indices.len() {
            return Err(Error::Shape {
                op: "gather",
                detail: format!("{} indices for output shape {shape:?}", indices.len()),
            });
        }
        let src = self.value(a);
        let len = src.len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::IndexOutOfRange { index: bad, len });
        }
        let out: Vec<f64> = if indices.len() >= PAR_THRESHOLD {
            indices.par_iter().map(|&i| src[i]).collect()
        } else {
            indices.iter().map(|&i| src[i]).collect()
        };
        let rg = self.needs(&[a]);
        Ok(self.push(shape.to_vec(), out, Op::Gather(a, indices), rg))
    }

    /// Same data under a new shape.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n = self.value(a).len();
        self.gather(a, Arc::new((0..n).collect()), shape)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = as_matrix("transpose", self.shape(a))?;
        let idx = (0..c).flat_map(|j| (0..r).map(move |i| i * c + j)).collect();
        self.gather(a, Arc::new(idx), &[c, r])
    }

    /// Accumulates `d loss / d node` into the gradient of every node that
    /// depends on a trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if numel(self.shape(loss)) != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        fn acc(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            adj[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            match node.op.clone() {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = as_matrix("matmul", self.shape(a))?;
                    let n = self.shape(b)[1];
                    if self.nodes[a.0].requires_grad {
                        let bt = transpose(self.value(b), k, n);
                        let mut da = vec![0.0; m * k];
                        matmul_into(&g, &bt, &mut da, m, n, k);
                        let dst = acc(&mut adj, a, m * k);
                        dst.iter_mut().zip(da).for_each(|(d, v)| *d += v);
                    }
                    if self.nodes[b.0].requires_grad {
                        let at = transpose(self.value(a), m, k);
                        let mut db = vec![0.0; k * n];
                        matmul_into(&at, &g, &mut db, k, m, n);
                        let dst = acc(&mut adj, b, k * n);
                        dst.iter_mut().zip(db).for_each(|(d, v)| *d += v);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let cols = self.shape(a)[1];
                    let y = &self.nodes[id].value;
                    let mut da = vec![0.0; y.len()];
                    for ((dr, yr), gr) in da
                        .chunks_mut(cols)
                        .zip(y.chunks(cols))
                        .zip(g.chunks(cols))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = yv * (gv - dot);
                        }
                    }
                    let len = da.len();
                    let dst = acc(&mut adj, a, len);
                    dst.iter_mut().zip(da).for_each(|(d, v)| *d += v);
                }
                Op::Mul(a, b) => {
                    for (x, other) in [(a, b), (b, a)] {
                        if !self.nodes[x.0].requires_grad {
                            continue;
                        }
                        let ov = &self.nodes[other.0].value;
                        let contrib: Vec<f64> = g.iter().zip(ov).map(|(gv, o)| gv * o).collect();
                        let dst = acc(&mut adj, x, contrib.len());
                        dst.iter_mut().zip(contrib).for_each(|(d, v)| *d += v);
                    }
                }
                Op::Add(a, b) => {
                    for x in [a, b] {
                        if !self.nodes[x.0].requires_grad {
                            continue;
                        }
                        let dst = acc(&mut adj, x, g.len());
                        dst.iter_mut().zip(&g).for_each(|(d, v)| *d += v);
                    }
                }
                Op::Exp(a) => {
                    let y = &self.nodes[id].value;
                    let contrib: Vec<f64> = g.iter().zip(y).map(|(gv, yv)| gv * yv).collect();
                    let dst = acc(&mut adj, a, contrib.len());
                    dst.iter_mut().zip(contrib).for_each(|(d, v)| *d += v);
                }
                Op::Scale(a, s) => {
                    let dst = acc(&mut adj, a, g.len());
                    dst.iter_mut().zip(&g).for_each(|(d, v)| *d += v * s);
                }
                Op::Sum(a) => {
                    let len = self.nodes[a.0].value.len();
                    let dst = acc(&mut adj, a, len);
                    dst.iter_mut().for_each(|d| *d += g[0]);
                }
                Op::Gather(a, indices) => {
                    let len = self.nodes[a.0].value.len();
                    let dst = acc(&mut adj, a, len);
                    for (&i, gv) in indices.iter().zip(&g) {
                        dst[i] += gv;
                    }
                }
            }
            let node = &mut self.nodes[id];
            node.grad.iter_mut().zip(&g).for_each(|(d, v)| *d += v);
        }
        Ok(())
    }
}

/// Largest elementwise relative error between the analytic gradient of `f`
/// at `x` and central finite differences with step `eps`, measured as
/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<F>(shape: &[usize], x: &[f64], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |values: Vec<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.param(shape, values)?;
        let out = f(&mut g, v)?;
        Ok(g.value(out)[0])
    };

    let mut g = Graph::new();
    let v = g.param(shape, x.to_vec())?;
    let out = f(&mut g, v)?;
    g.backward(out)?;
    let analytic = g.grad(v).to_vec();

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.to_vec();
        plus[i] += eps;
        let mut minus = x.to_vec();
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
