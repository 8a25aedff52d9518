//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records operations on one sample; [`Graph::backward`] returns
//! gradients for every parameter of the borrowed [`ParamStore`]. Graphs are
//! cheap and single-use, so per-sample gradients can be computed on separate
//! threads against the same frozen parameters.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients(self.tensors.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect())
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

/// One gradient tensor per parameter, aligned with the store.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Tensor>);

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.0[id.0]
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.0 {
            t.scale_assign(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.0.iter().map(|t| t.norm_sq()).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    DivRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    SqrtFloor(Var, f64),
    SumAll(Var),
    SumRows(Var),
    MeanRows(Var),
    SumCols(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Transpose(Var),
    PairAdd(Var, Var),
    Windows {
        x: Var,
        kernel: usize,
        stride: usize,
        pad_left: usize,
    },
    BceLogits(Var, Tensor),
    SmoothL1(Var),
    MulConst(Var, Tensor),
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant with no gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    fn row_op(&mut self, a: Var, r: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, rv) = (self.value(a), self.value(r));
        assert_eq!(rv.rows(), 1, "row operand must be 1 x n");
        assert_eq!(av.cols(), rv.cols(), "row operand width mismatch");
        let mut out = av.clone();
        let c = av.cols();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x = f(*x, rv.data()[i % c]);
        }
        self.push(out, op)
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        self.row_op(a, r, |x, y| x + y, Op::AddRow(a, r))
    }

    pub fn mul_row(&mut self, a: Var, r: Var) -> Var {
        self.row_op(a, r, |x, y| x * y, Op::MulRow(a, r))
    }

    pub fn div_row(&mut self, a: Var, r: Var) -> Var {
        self.row_op(a, r, |x, y| x / y, Op::DivRow(a, r))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// `max(sqrt(a), floor)`, with zero gradient where the floor is active.
    pub fn sqrt_floor(&mut self, a: Var, floor: f64) -> Var {
        let v = self.value(a).map(|x| x.max(0.0).sqrt().max(floor));
        self.push(v, Op::SqrtFloor(a, floor))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    /// Column sums: `r x c -> 1 x c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_rows();
        self.push(v, Op::SumRows(a))
    }

    /// Column means: `r x c -> 1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut v = t.sum_rows();
        v.scale_assign(1.0 / t.rows() as f64);
        self.push(v, Op::MeanRows(a))
    }

    /// Row sums: `r x c -> r x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::from_vec(t.rows(), 1, (0..t.rows()).map(|r| t.row(r).iter().sum()).collect());
        self.push(v, Op::SumCols(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = t.clone();
        let c = t.cols();
        for r in 0..t.rows() {
            let row = &mut out.data_mut()[r * c..(r + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = t.clone();
        let c = t.cols();
        for r in 0..t.rows() {
            let row = &mut out.data_mut()[r * c..(r + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        self.push(out, Op::LogSoftmaxRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.data_mut()[r * cols + off..r * cols + off + t.cols()].copy_from_slice(t.row(r));
            }
            off += t.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(t.data());
        }
        let rows = data.len() / cols.max(1);
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let v = Tensor::from_vec(len, c, t.data()[start * c..(start + len) * c].to_vec());
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        let mut v = Tensor::zeros(t.rows(), len);
        for r in 0..t.rows() {
            v.data_mut()[r * len..(r + 1) * len].copy_from_slice(&t.row(r)[start..start + len]);
        }
        self.push(v, Op::SliceCols(a, start))
    }

    /// Embedding lookup: selects rows of `table`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let t = self.value(table);
        let c = t.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        self.push(Tensor::from_vec(idx.len(), c, data), Op::GatherRows(table, idx.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(a).clone().reshaped(rows, cols);
        self.push(v, Op::Reshape(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    /// All pairwise row sums: row `i * n + j` is `a[i] + b[j]`.
    pub fn pair_add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols(), "pair_add width mismatch");
        let (t, n, h) = (av.rows(), bv.rows(), av.cols());
        let mut out = Tensor::zeros(t * n, h);
        for i in 0..t {
            for j in 0..n {
                let o = &mut out.data_mut()[(i * n + j) * h..(i * n + j + 1) * h];
                for ((o, x), y) in o.iter_mut().zip(av.row(i)).zip(bv.row(j)) {
                    *o = x + y;
                }
            }
        }
        self.push(out, Op::PairAdd(a, b))
    }

    /// Sliding windows over rows (im2col for a 1-D convolution). Output row
    /// `i` concatenates input rows `i*stride - pad_left .. + kernel`, with
    /// zeros outside the input.
    pub fn windows(&mut self, x: Var, kernel: usize, stride: usize, pad_left: usize, out_len: usize) -> Var {
        let t = self.value(x);
        let (n, h) = (t.rows(), t.cols());
        let mut out = Tensor::zeros(out_len, kernel * h);
        for i in 0..out_len {
            for k in 0..kernel {
                let src = (i * stride + k) as isize - pad_left as isize;
                if src >= 0 && (src as usize) < n {
                    let dst = &mut out.data_mut()[i * kernel * h + k * h..i * kernel * h + (k + 1) * h];
                    dst.copy_from_slice(t.row(src as usize));
                }
            }
        }
        self.push(
            out,
            Op::Windows {
                x,
                kernel,
                stride,
                pad_left,
            },
        )
    }

    /// Elementwise binary cross-entropy on logits against constant targets:
    /// `softplus(z) - g z`.
    pub fn bce_logits(&mut self, z: Var, targets: Tensor) -> Var {
        let v = self.value(z).zip_map(&targets, |z, g| softplus(z) - g * z);
        self.push(v, Op::BceLogits(z, targets))
    }

    pub fn smooth_l1(&mut self, a: Var) -> Var {
        let v = self.value(a).map(smooth_l1);
        self.push(v, Op::SmoothL1(a))
    }

    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Var {
        let v = self.value(a).zip_map(&c, |x, y| x * y);
        self.push(v, Op::MulConst(a, c))
    }

    /// Gradients of the scalar `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Shape(format!("backward from non-scalar {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = self.params.zero_grads();

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let out_v = self.value(Var(idx));
            match &node.op {
                Op::Input => {}
                Op::Param(id) => out.0[id.0].add_assign(&g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, g.matmul_t(bv));
                    acc(&mut grads, *b, av.t_matmul(&g));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|x| -x));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, g.zip_map(bv, |x, y| x * y));
                    acc(&mut grads, *b, g.zip_map(av, |x, y| x * y));
                }
                Op::AddRow(a, r) => {
                    acc(&mut grads, *r, g.sum_rows());
                    acc(&mut grads, *a, g);
                }
                Op::MulRow(a, r) => {
                    let (av, rv) = (self.value(*a), self.value(*r));
                    let c = rv.cols();
                    let ga = Tensor::from_vec(
                        g.rows(),
                        c,
                        g.data().iter().enumerate().map(|(i, x)| x * rv.data()[i % c]).collect(),
                    );
                    acc(&mut grads, *r, g.zip_map(av, |x, y| x * y).sum_rows());
                    acc(&mut grads, *a, ga);
                }
                Op::DivRow(a, r) => {
                    let (av, rv) = (self.value(*a), self.value(*r));
                    let c = rv.cols();
                    let ga = Tensor::from_vec(
                        g.rows(),
                        c,
                        g.data().iter().enumerate().map(|(i, x)| x / rv.data()[i % c]).collect(),
                    );
                    let mut gr = Tensor::zeros(1, c);
                    for (i, (x, a)) in g.data().iter().zip(av.data()).enumerate() {
                        let d = rv.data()[i % c];
                        gr.data_mut()[i % c] -= x * a / (d * d);
                    }
                    acc(&mut grads, *r, gr);
                    acc(&mut grads, *a, ga);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.map(|x| x * s)),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Relu(a) => {
                    let av = self.value(*a);
                    acc(&mut grads, *a, g.zip_map(av, |x, y| if y > 0.0 { x } else { 0.0 }));
                }
                Op::Tanh(a) => acc(&mut grads, *a, g.zip_map(out_v, |x, y| x * (1.0 - y * y))),
                Op::Sigmoid(a) => acc(&mut grads, *a, g.zip_map(out_v, |x, y| x * y * (1.0 - y))),
                Op::Exp(a) => acc(&mut grads, *a, g.zip_map(out_v, |x, y| x * y)),
                Op::LogSoftmaxRows(a) => {
                    let c = out_v.cols();
                    let mut ga = g.clone();
                    for r in 0..g.rows() {
                        let gs: f64 = g.row(r).iter().sum();
                        for k in 0..c {
                            ga.data_mut()[r * c + k] -= out_v.get(r, k).exp() * gs;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let av = self.value(*a);
                    acc(&mut grads, *a, g.zip_map(av, |x, y| 2.0 * x * y));
                }
                Op::SqrtFloor(a, floor) => {
                    let f = *floor;
                    acc(
                        &mut grads,
                        *a,
                        g.zip_map(out_v, |x, y| if y > f { x / (2.0 * y) } else { 0.0 }),
                    );
                }
                Op::SumAll(a) => {
                    let (r, c) = self.value(*a).shape();
                    acc(&mut grads, *a, Tensor::filled(r, c, g.item()));
                }
                Op::SumRows(a) | Op::MeanRows(a) => {
                    let (r, c) = self.value(*a).shape();
                    let s = if matches!(node.op, Op::MeanRows(_)) { 1.0 / r as f64 } else { 1.0 };
                    let mut ga = Tensor::zeros(r, c);
                    for (i, x) in ga.data_mut().iter_mut().enumerate() {
                        *x = g.data()[i % c] * s;
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SumCols(a) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Tensor::zeros(r, c);
                    for (i, x) in ga.data_mut().iter_mut().enumerate() {
                        *x = g.data()[i / c];
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let (r, c) = out_v.shape();
                    let mut ga = Tensor::zeros(r, c);
                    for i in 0..r {
                        let y = out_v.row(i);
                        let gy = g.row(i);
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            ga.data_mut()[i * c + j] = y[j] * (gy[j] - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let rows = g.rows();
                    let total = g.cols();
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        let mut gp = Tensor::zeros(rows, w);
                        for r in 0..rows {
                            gp.data_mut()[r * w..(r + 1) * w]
                                .copy_from_slice(&g.data()[r * total + off..r * total + off + w]);
                        }
                        off += w;
                        acc(&mut grads, *p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let c = g.cols();
                    let mut off = 0;
                    for p in parts {
                        let r = self.value(*p).rows();
                        let gp = Tensor::from_vec(r, c, g.data()[off * c..(off + r) * c].to_vec());
                        off += r;
                        acc(&mut grads, *p, gp);
                    }
                }
                Op::SliceRows(a, start) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Tensor::zeros(r, c);
                    ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.value(*a).shape();
                    let w = g.cols();
                    let mut ga = Tensor::zeros(r, c);
                    for i in 0..r {
                        ga.data_mut()[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::GatherRows(table, idx) => {
                    let (r, c) = self.value(*table).shape();
                    let mut gt = Tensor::zeros(r, c);
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            gt.data_mut()[i * c + j] += g.data()[k * c + j];
                        }
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::Reshape(a) => {
                    let (r, c) = self.value(*a).shape();
                    acc(&mut grads, *a, g.reshaped(r, c));
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::PairAdd(a, b) => {
                    let (t, h) = self.value(*a).shape();
                    let n = self.value(*b).rows();
                    let mut ga = Tensor::zeros(t, h);
                    let mut gb = Tensor::zeros(n, h);
                    for i in 0..t {
                        for j in 0..n {
                            let row = g.row(i * n + j);
                            for k in 0..h {
                                ga.data_mut()[i * h + k] += row[k];
                                gb.data_mut()[j * h + k] += row[k];
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Windows {
                    x,
                    kernel,
                    stride,
                    pad_left,
                } => {
                    let (n, h) = self.value(*x).shape();
                    let mut gx = Tensor::zeros(n, h);
                    for i in 0..g.rows() {
                        for k in 0..*kernel {
                            let src = (i * stride + k) as isize - *pad_left as isize;
                            if src >= 0 && (src as usize) < n {
                                let s = src as usize;
                                for j in 0..h {
                                    gx.data_mut()[s * h + j] += g.data()[i * kernel * h + k * h + j];
                                }
                            }
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::BceLogits(z, targets) => {
                    let zv = self.value(*z);
                    let dz = zv.zip_map(targets, |z, t| sigmoid(z) - t);
                    acc(&mut grads, *z, g.zip_map(&dz, |x, y| x * y));
                }
                Op::SmoothL1(a) => {
                    let av = self.value(*a);
                    acc(
                        &mut grads,
                        *a,
                        g.zip_map(av, |x, y| if y.abs() < 1.0 { x * y } else { x * y.signum() }),
                    );
                }
                Op::MulConst(a, c) => acc(&mut grads, *a, g.zip_map(c, |x, y| x * y)),
            }
        }
        Ok(out)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `0.5 x^2` for `|x| < 1`, `|x| - 0.5` otherwise.
pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

/// Largest relative disagreement between analytic gradients and central
/// finite differences of `loss` over every scalar of every parameter.
///
/// The relative error of one entry is `|a - n| / max(|a|, |n|, floor)`.
pub fn gradient_check(
    store: &ParamStore,
    h: f64,
    floor: f64,
    loss: impl Fn(&mut Graph) -> Result<Var>,
) -> Result<GradCheck> {
    let analytic = {
        let mut g = Graph::new(store);
        let l = loss(&mut g)?;
        g.backward(l)?
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(s);
        let l = loss(&mut g)?;
        Ok(g.value(l).item())
    };
    let mut work = store.clone();
    let mut report = GradCheck::default();
    for p in 0..store.len() {
        for k in 0..store.tensors[p].len() {
            let orig = work.tensors[p].data()[k];
            work.tensors[p].data_mut()[k] = orig + h;
            let up = eval(&work)?;
            work.tensors[p].data_mut()[k] = orig - h;
            let down = eval(&work)?;
            work.tensors[p].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.0[p].data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.names[p].clone(), k, a, numeric));
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter name, flat index, analytic and numeric values of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}
