//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation eagerly: values are computed as nodes
//! are pushed, and [`Graph::backward`] walks the tape in reverse. Parameters
//! are borrowed from a [`ParamSet`], so building a graph never copies weights.

use super::tensor::gemm;
use super::{Grads, ParamId, ParamSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Relu(Var),
    Exp(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, rstd: Vec<f64> },
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Transpose(Var),
    Reshape(Var),
    MeanCols(Var),
    Sum(Var),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<f64> },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
}

/// Result of a backward pass: parameter gradients plus per-node gradients.
pub struct Gradients {
    pub params: Grads,
    nodes: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to an input node, zero if it did not influence
    /// the output.
    pub fn wrt(&self, v: Var, len: usize) -> Vec<f64> {
        self.nodes[v.0].clone().unwrap_or_else(|| vec![0.0; len])
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    /// `a [m,k] @ b [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul(a, b))
    }

    /// `a [m,k] @ b[n,k]^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims2(a);
        let (n, k2) = self.dims2(b);
        assert_eq!(k, k2, "matmul_t inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out, 0.0);
        self.push(Tensor::new(vec![m, n], out), Op::MatMulT(a, b))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.len(), tb.len(), "elementwise shape mismatch {:?} vs {:?}", ta.shape(), tb.shape());
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, data), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn broadcast(&mut self, a: Var, b: Var, along_rows: bool, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let tb = self.value(b);
        let (m, n) = (ta.rows(), ta.cols());
        let want = if along_rows { n } else { m };
        assert_eq!(tb.len(), want, "broadcast operand has {} elements, expected {want}", tb.len());
        let mut data = ta.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                let bv = if along_rows { tb.data()[j] } else { tb.data()[i] };
                data[i * n + j] = f(data[i * n + j], bv);
            }
        }
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, data), op)
    }

    /// Adds a length-`n` vector to every row of `a [m,n]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        self.broadcast(a, b, true, |x, y| x + y, Op::AddRow(a, b))
    }

    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        self.broadcast(a, b, true, |x, y| x * y, Op::MulRow(a, b))
    }

    /// Adds a length-`m` vector to every column of `a [m,n]`.
    pub fn add_col(&mut self, a: Var, b: Var) -> Var {
        self.broadcast(a, b, false, |x, y| x + y, Op::AddCol(a, b))
    }

    pub fn mul_col(&mut self, a: Var, b: Var) -> Var {
        self.broadcast(a, b, false, |x, y| x * y, Op::MulCol(a, b))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| f(*x)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, data), op)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x + c, Op::AddConst(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, f64::abs, Op::Abs(a))
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.push(Tensor::new(vec![m, n], data), Op::SoftmaxRows(a))
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        let mut data = t.data().to_vec();
        let mut rstd = Vec::with_capacity(m);
        for row in data.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, data), Op::LayerNormRows { x: a, rstd })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        assert!(start + len <= n);
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&t.data()[i * n + start..i * n + start + len]);
        }
        self.push(Tensor::new(vec![m, len], data), Op::SliceCols { x: a, start })
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        let n = t.cols();
        assert!(start + len <= t.rows());
        let data = t.data()[start * n..(start + len) * n].to_vec();
        self.push(Tensor::new(vec![len, n], data), Op::SliceRows { x: a, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let m = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for p in parts {
                let t = self.value(*p);
                assert_eq!(t.rows(), m, "concat_cols row mismatch");
                data.extend_from_slice(t.row_slice(i));
            }
        }
        self.push(Tensor::new(vec![m, n], data), Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut m = 0;
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.cols(), n, "concat_rows width mismatch: {} vs {n}", t.cols());
            data.extend_from_slice(t.data());
            m += t.rows();
        }
        self.push(Tensor::new(vec![m, n], data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = t.data()[i * n + j];
            }
        }
        self.push(Tensor::new(vec![n, m], data), Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshaped(shape);
        self.push(t, Op::Reshape(a))
    }

    /// Mean over columns: `[m,n] -> [1,m]`.
    pub fn mean_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        let data = (0..m).map(|i| t.row_slice(i).iter().sum::<f64>() / n as f64).collect();
        self.push(Tensor::new(vec![1, m], data), Op::MeanCols(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// 2-D convolution of one `[C,H,W]` image with weights `[O, C*k*k]`
    /// and bias `[O]`, producing `[O,Ho,Wo]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, k: usize, stride: usize, pad: usize) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.shape().len(), 3, "conv2d expects [C,H,W], got {:?}", tx.shape());
        let (c, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let geom = ConvGeom { c, h, w: wd, k, stride, pad, ho, wo };
        let cols = im2col(tx.data(), &geom);
        let tw = self.value(w);
        let o = tw.rows();
        assert_eq!(tw.cols(), c * k * k, "conv2d weight width {} != C*k*k {}", tw.cols(), c * k * k);
        let tb = self.value(b);
        assert_eq!(tb.len(), o);
        let hw = ho * wo;
        let mut out = vec![0.0; o * hw];
        for (oc, row) in out.chunks_mut(hw).enumerate() {
            row.fill(tb.data()[oc]);
        }
        gemm(o, c * k * k, hw, tw.data(), false, &cols, false, &mut out, 1.0);
        self.push(Tensor::new(vec![o, ho, wo], out), Op::Conv2d { x, w, b, geom, cols })
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward requires a scalar output");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut pgrads = self.params.zero_grads();

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Input) {
                grads[i] = Some(g);
                continue;
            }
            match &node.op {
                Op::Input => unreachable!(),
                Op::Param(id) => {
                    for (a, b) in pgrads.data[id.0].iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.dims2(*a);
                    let n = self.value(*b).cols();
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, &g, false, self.value(*b).data(), true, &mut ga, 0.0);
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, &g, false, &mut gb, 0.0);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let (m, k) = self.dims2(*a);
                    let n = self.value(*b).rows();
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, &g, false, self.value(*b).data(), false, &mut ga, 0.0);
                    let mut gb = vec![0.0; n * k];
                    gemm(n, m, k, &g, true, self.value(*a).data(), false, &mut gb, 0.0);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    let neg = g.iter().map(|v| -v).collect();
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, neg);
                }
                Op::Mul(a, b) => {
                    let va = self.value(*a).data();
                    let vb = self.value(*b).data();
                    let ga = g.iter().zip(vb).map(|(x, y)| x * y).collect();
                    let gb = g.iter().zip(va).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, b) | Op::AddCol(a, b) => {
                    let along_rows = matches!(node.op, Op::AddRow(..));
                    let (m, n) = self.dims2(*a);
                    let mut gb = vec![0.0; if along_rows { n } else { m }];
                    for i in 0..m {
                        for j in 0..n {
                            gb[if along_rows { j } else { i }] += g[i * n + j];
                        }
                    }
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MulRow(a, b) | Op::MulCol(a, b) => {
                    let along_rows = matches!(node.op, Op::MulRow(..));
                    let (m, n) = self.dims2(*a);
                    let va = self.value(*a).data();
                    let vb = self.value(*b).data();
                    let mut ga = vec![0.0; m * n];
                    let mut gb = vec![0.0; if along_rows { n } else { m }];
                    for i in 0..m {
                        for j in 0..n {
                            let bi = if along_rows { j } else { i };
                            ga[i * n + j] = g[i * n + j] * vb[bi];
                            gb[bi] += g[i * n + j] * va[i * n + j];
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads, *a, g.iter().map(|v| v * s).collect());
                }
                Op::AddConst(a) | Op::Reshape(a) => accumulate(&mut grads, *a, g),
                Op::Relu(a) => {
                    let va = self.value(*a).data();
                    let ga = g.iter().zip(va).map(|(d, x)| if *x > 0.0 { *d } else { 0.0 }).collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let y = node.value.as_ref().unwrap().data();
                    accumulate(&mut grads, *a, g.iter().zip(y).map(|(d, y)| d * y).collect());
                }
                Op::Abs(a) => {
                    let va = self.value(*a).data();
                    let ga = g.iter().zip(va).map(|(d, x)| d * sign(*x)).collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let va = self.value(*a).data();
                    let ga = g
                        .iter()
                        .zip(va)
                        .map(|(d, x)| if *x >= *lo && *x <= *hi { *d } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = node.value.as_ref().unwrap();
                    let n = y.cols();
                    let mut ga = vec![0.0; g.len()];
                    for ((gr, yr), out) in g.chunks(n).zip(y.data().chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            out[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNormRows { x, rstd } => {
                    let y = node.value.as_ref().unwrap();
                    let n = y.cols();
                    let mut ga = vec![0.0; g.len()];
                    for (r, ((gr, yr), out)) in g.chunks(n).zip(y.data().chunks(n)).zip(ga.chunks_mut(n)).enumerate() {
                        let mg = gr.iter().sum::<f64>() / n as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            out[j] = rstd[r] * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                    accumulate(&mut grads, *x, ga);
                }
                Op::SliceCols { x, start } => {
                    let (m, n) = self.dims2(*x);
                    let len = node.value.as_ref().unwrap().cols();
                    let mut gx = vec![0.0; m * n];
                    for i in 0..m {
                        gx[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SliceRows { x, start } => {
                    let (m, n) = self.dims2(*x);
                    let mut gx = vec![0.0; m * n];
                    gx[start * n..start * n + g.len()].copy_from_slice(&g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let n = node.value.as_ref().unwrap().cols();
                    let m = g.len() / n;
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        let mut gp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            gp.extend_from_slice(&g[i * n + off..i * n + off + w]);
                        }
                        off += w;
                        accumulate(&mut grads, *p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = self.value(*p).len();
                        accumulate(&mut grads, *p, g[off..off + len].to_vec());
                        off += len;
                    }
                }
                Op::Transpose(a) => {
                    let (m, n) = self.dims2(*a);
                    let mut ga = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] = g[j * m + i];
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::MeanCols(a) => {
                    let (m, n) = self.dims2(*a);
                    let mut ga = vec![0.0; m * n];
                    for i in 0..m {
                        let v = g[i] / n as f64;
                        ga[i * n..(i + 1) * n].fill(v);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let len = self.value(*a).len();
                    accumulate(&mut grads, *a, vec![g[0]; len]);
                }
                Op::Conv2d { x, w, b, geom, cols } => {
                    let o = self.value(*w).rows();
                    let ckk = geom.c * geom.k * geom.k;
                    let hw = geom.ho * geom.wo;
                    let gb: Vec<f64> = g.chunks(hw).map(|r| r.iter().sum()).collect();
                    let mut gw = vec![0.0; o * ckk];
                    gemm(o, hw, ckk, &g, false, cols, true, &mut gw, 0.0);
                    let mut gcols = vec![0.0; ckk * hw];
                    gemm(ckk, o, hw, self.value(*w).data(), true, &g, false, &mut gcols, 0.0);
                    let gx = col2im(&gcols, geom);
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *b, gb);
                }
            }
        }
        Gradients {
            params: pgrads,
            nodes: grads,
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let hw = g.ho * g.wo;
    let mut cols = vec![0.0; g.c * g.k * g.k * hw];
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj < 0 || jj >= g.w as isize {
                            continue;
                        }
                        dst[oi * g.wo + oj] = x[(c * g.h + ii as usize) * g.w + jj as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let hw = g.ho * g.wo;
    let mut x = vec![0.0; g.c * g.h * g.w];
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj < 0 || jj >= g.w as isize {
                            continue;
                        }
                        x[(c * g.h + ii as usize) * g.w + jj as usize] += src[oi * g.wo + oj];
                    }
                }
            }
        }
    }
    x
}
