use std::sync::Arc;

use nalgebra::DMatrix;

use super::kernels::{conv1d_backward, conv1d_forward, InterpPlan};
use super::tensor::{axpy, matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};
use super::DiffError;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A constant linear operator `y = M x` that can appear inside a graph.
///
/// Implementors supply the forward product and its transpose; the graph
/// only differentiates with respect to `x`.
pub trait LinearMap: Send + Sync {
    fn in_len(&self) -> usize;
    fn out_shape(&self) -> Vec<usize>;
    /// `out = M x` (out is zeroed by the caller).
    fn apply(&self, x: &[f64], out: &mut [f64]);
    /// `g_x += M^T g_out`.
    fn apply_transpose(&self, g_out: &[f64], g_x: &mut [f64]);
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Arc<Tensor>),
    AddConst(Var),
    MatMul(Var, Var),
    Transpose(Var),
    AddRowBias(Var, Var),
    Relu(Var),
    Tanh(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    SquaredNorm(Var),
    Reshape(Var),
    SliceCols(Var, usize),
    SelectRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ScaleShiftRows(Var, Vec<f64>),
    Conv1d { x: Var, w: Var, b: Var, width: usize },
    Interp(Var, Arc<InterpPlan>),
    Recurrence(Box<RecurrenceOp>),
    Linear(Var, Arc<dyn LinearMap>),
    SpectralNorm { k: Var, u: Vec<f64>, v: Vec<f64> },
}

struct RecurrenceOp {
    psi0: Var,
    inputs: Var,
    k: Arc<Tensor>,
    b: Arc<Tensor>,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape over dense `f64` arrays.
///
/// Nodes are appended in evaluation order, so the tape is a topological
/// order by construction and the backward sweep visits each node once.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node on the tape.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` does not influence the root.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor::new(self.shapes[v.0].clone(), g.clone()),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: shape mismatch");
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        Tensor::new(
            av.shape().to_vec(),
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let v = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let v = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let v = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.map(|x| c * x);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.map(|x| x + c);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Arc<Tensor>) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.shape(), c.shape(), "mul_const: shape mismatch");
        let v = Tensor::new(
            av.shape().to_vec(),
            av.data().iter().zip(c.data()).map(|(x, y)| x * y).collect(),
        );
        let rg = self.rg(a);
        self.push(v, Op::MulConst(a, c), rg)
    }

    /// Elementwise sum with a constant tensor of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.shape(), c.shape(), "add_const: shape mismatch");
        let v = Tensor::new(
            av.shape().to_vec(),
            av.data().iter().zip(c.data()).map(|(x, y)| x + y).collect(),
        );
        let rg = self.rg(a);
        self.push(v, Op::AddConst(a), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.nodes[a.0].value.dims2();
        let (k2, n) = self.nodes[b.0].value.dims2();
        assert_eq!(k, k2, "matmul: inner dimensions {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        matmul_acc(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            &mut out,
            m,
            k,
            n,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let (m, n) = av.dims2();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av.data()[i * n + j];
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::new(vec![n, m], out), Op::Transpose(a), rg)
    }

    /// `x[m x n] + bias[n]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Var {
        let (m, n) = self.nodes[x.0].value.dims2();
        assert_eq!(self.nodes[bias.0].value.len(), n, "add_row_bias: bias length");
        let mut out = self.nodes[x.0].value.data().to_vec();
        let bv = self.nodes[bias.0].value.data();
        for i in 0..m {
            for (o, &b) in out[i * n..(i + 1) * n].iter_mut().zip(bv) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(Tensor::new(vec![m, n], out), Op::AddRowBias(x, bias), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(f64::tanh);
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(f64::abs);
        let rg = self.rg(a);
        self.push(v, Op::Abs(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(|x| x * x);
        let rg = self.rg(a);
        self.push(v, Op::Square(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn squared_norm(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().map(|x| x * x).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SquaredNorm(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let v = self.nodes[a.0].value.clone().reshaped(shape);
        let rg = self.rg(a);
        self.push(v, Op::Reshape(a), rg)
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = &self.nodes[a.0].value;
        let (m, n) = av.dims2();
        assert!(start < end && end <= n, "slice_cols: bad range {start}..{end} of {n}");
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&av.data()[i * n + start..i * n + end]);
        }
        let rg = self.rg(a);
        self.push(Tensor::new(vec![m, w], out), Op::SliceCols(a, start), rg)
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let av = &self.nodes[a.0].value;
        let (m, n) = av.dims2();
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            assert!(r < m, "select_rows: row {r} out of {m}");
            out.extend_from_slice(av.row(r));
        }
        let rg = self.rg(a);
        self.push(
            Tensor::new(vec![rows.len(), n], out),
            Op::SelectRows(a, rows.to_vec()),
            rg,
        )
    }

    /// Horizontal concatenation of 2-D tensors sharing a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let m = self.nodes[parts[0].0].value.dims2().0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let (r, c) = self.nodes[p.0].value.dims2();
                assert_eq!(r, m, "concat_cols: row mismatch");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let pv = self.nodes[p.0].value.data();
            for i in 0..m {
                out[i * total + off..i * total + off + w].copy_from_slice(&pv[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::new(vec![m, total], out),
            Op::ConcatCols(parts.to_vec()),
            rg,
        )
    }

    /// Row-wise affine map `y[r, :] = scale[r] * x[r, :] + shift[r]`.
    pub fn scale_shift_rows(&mut self, a: Var, scale: &[f64], shift: &[f64]) -> Var {
        let av = &self.nodes[a.0].value;
        let (m, n) = av.dims2();
        assert!(scale.len() == m && shift.len() == m, "scale_shift_rows: length");
        let mut out = av.data().to_vec();
        for i in 0..m {
            for o in &mut out[i * n..(i + 1) * n] {
                *o = scale[i] * *o + shift[i];
            }
        }
        let rg = self.rg(a);
        self.push(
            Tensor::new(vec![m, n], out),
            Op::ScaleShiftRows(a, scale.to_vec()),
            rg,
        )
    }

    /// Stride-one zero-padded convolution along the time axis.
    ///
    /// `x: c_in x len`, `w: c_out x c_in x width`, `b: c_out`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (c_in, len) = self.nodes[x.0].value.dims2();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 3, "conv1d: kernel must be 3-D");
        let (c_out, wc_in, width) = (ws[0], ws[1], ws[2]);
        assert_eq!(c_in, wc_in, "conv1d: channel mismatch");
        assert!(width >= 1, "conv1d: empty kernel");
        assert_eq!(self.nodes[b.0].value.len(), c_out, "conv1d: bias length");
        let out = conv1d_forward(
            self.nodes[x.0].value.data(),
            c_in,
            len,
            self.nodes[w.0].value.data(),
            c_out,
            width,
            self.nodes[b.0].value.data(),
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            Tensor::new(vec![c_out, len], out),
            Op::Conv1d { x, w, b, width },
            rg,
        )
    }

    /// Row-wise linear interpolation from knots onto the plan's fine grid.
    pub fn interpolate(&mut self, knots: Var, plan: Arc<InterpPlan>) -> Var {
        let (m, n) = self.nodes[knots.0].value.dims2();
        assert_eq!(n, plan.n_knots(), "interpolate: knot count");
        let nf = plan.n_fine();
        let mut out = vec![0.0; m * nf];
        let kv = self.nodes[knots.0].value.data();
        for i in 0..m {
            plan.apply(&kv[i * n..(i + 1) * n], &mut out[i * nf..(i + 1) * nf]);
        }
        let rg = self.rg(knots);
        self.push(Tensor::new(vec![m, nf], out), Op::Interp(knots, plan), rg)
    }

    /// Input-affine linear recurrence `psi[t+1] = K (psi[t] - B u[t]) + B u[t]`.
    ///
    /// `psi0: n`, `inputs: m x N` (channel-major), constant `k: n x n` and
    /// `b: n x m`. Returns `n x (N+1)` with column `t` holding `psi[t]`.
    pub fn affine_recurrence(
        &mut self,
        psi0: Var,
        inputs: Var,
        k: Arc<Tensor>,
        b: Arc<Tensor>,
    ) -> Var {
        let n = self.nodes[psi0.0].value.len();
        let (m, steps) = self.nodes[inputs.0].value.dims2();
        assert_eq!(k.dims2(), (n, n), "affine_recurrence: K shape");
        assert_eq!(b.dims2(), (n, m), "affine_recurrence: B shape");
        let g = input_gain(&k, &b);
        let u = self.nodes[inputs.0].value.data();
        let mut out = vec![0.0; n * (steps + 1)];
        // column-major scratch: states[t] contiguous
        let mut states = vec![0.0; n * (steps + 1)];
        states[..n].copy_from_slice(self.nodes[psi0.0].value.data());
        let mut u_t = vec![0.0; m];
        for t in 0..steps {
            for (c, ut) in u_t.iter_mut().enumerate() {
                *ut = u[c * steps + t];
            }
            let (prev, next) = states.split_at_mut((t + 1) * n);
            let cur = &prev[t * n..];
            let nxt = &mut next[..n];
            recurrence_step(k.data(), &g, cur, &u_t, nxt, n, m);
        }
        for t in 0..=steps {
            for i in 0..n {
                out[i * (steps + 1) + t] = states[t * n + i];
            }
        }
        let rg = self.rg(psi0) || self.rg(inputs);
        self.push(
            Tensor::new(vec![n, steps + 1], out),
            Op::Recurrence(Box::new(RecurrenceOp {
                psi0,
                inputs,
                k,
                b,
            })),
            rg,
        )
    }

    /// Applies a constant linear operator to the flattened value of `x`.
    pub fn linear(&mut self, x: Var, map: Arc<dyn LinearMap>) -> Var {
        assert_eq!(self.nodes[x.0].value.len(), map.in_len(), "linear: input length");
        let shape = map.out_shape();
        let mut out = vec![0.0; shape.iter().product()];
        map.apply(self.nodes[x.0].value.data(), &mut out);
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out), Op::Linear(x, map), rg)
    }

    /// Largest singular value of a square or rectangular matrix.
    pub fn spectral_norm(&mut self, k: Var) -> Var {
        let kv = &self.nodes[k.0].value;
        let (m, n) = kv.dims2();
        let mat = DMatrix::from_row_slice(m, n, kv.data());
        let svd = mat.svd(true, true);
        let (idx, sigma) = svd
            .singular_values
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &s)| if s > acc.1 { (i, s) } else { acc });
        let u = svd.u.as_ref().expect("svd u").column(idx).iter().copied().collect();
        let v = svd.v_t.as_ref().expect("svd v_t").row(idx).iter().copied().collect();
        let rg = self.rg(k);
        self.push(Tensor::scalar(sigma), Op::SpectralNorm { k, u, v }, rg)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients, DiffError> {
        let root_val = &self.nodes[root.0].value;
        if root_val.len() != 1 {
            return Err(DiffError::NonScalarRoot(root_val.shape().to_vec()));
        }
        if !root_val.is_finite() {
            return Err(DiffError::NumericFault {
                node: root.0,
                what: "non-finite root value".into(),
            });
        }
        let n_nodes = root.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..n_nodes).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if g.iter().any(|x| !x.is_finite()) {
                return Err(DiffError::NumericFault {
                    node: idx,
                    what: "non-finite gradient".into(),
                });
            }
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    axpy(1.0, g, ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    axpy(1.0, g, gb);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    axpy(1.0, g, ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    axpy(-1.0, g, gb);
                }
            }
            Op::Mul(a, b) => {
                let bv = self.nodes[b.0].value.data().to_vec();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &gi), &bi) in ga.iter_mut().zip(g).zip(&bv) {
                        *o += gi * bi;
                    }
                }
                let av = self.nodes[a.0].value.data();
                if let Some(gb) = self.acc(grads, *b) {
                    for ((o, &gi), &ai) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * ai;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    axpy(*c, g, ga);
                }
            }
            Op::AddScalar(a) | Op::AddConst(a) | Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    axpy(1.0, g, ga);
                }
            }
            Op::MulConst(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &gi), &ci) in ga.iter_mut().zip(g).zip(c.data()) {
                        *o += gi * ci;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2();
                let (_, n) = self.nodes[b.0].value.dims2();
                if self.rg(*a) {
                    let bv = self.nodes[b.0].value.data();
                    let ga = self.acc(grads, *a).unwrap();
                    matmul_bt_acc(g, bv, ga, m, n, k);
                }
                if self.rg(*b) {
                    let av = self.nodes[a.0].value.data();
                    let gb = self.acc(grads, *b).unwrap();
                    matmul_at_acc(av, g, gb, m, k, n);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.nodes[a.0].value.dims2();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::AddRowBias(x, bias) => {
                let (m, n) = self.nodes[x.0].value.dims2();
                if let Some(gx) = self.acc(grads, *x) {
                    axpy(1.0, g, gx);
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for i in 0..m {
                        axpy(1.0, &g[i * n..(i + 1) * n], gb);
                    }
                }
            }
            Op::Relu(a) => {
                let av = self.nodes[a.0].value.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &gi), &x) in ga.iter_mut().zip(g).zip(av) {
                        if x > 0.0 {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                let yv = node.value.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &gi), &y) in ga.iter_mut().zip(g).zip(yv) {
                        *o += gi * (1.0 - y * y);
                    }
                }
            }
            Op::Abs(a) => {
                let av = self.nodes[a.0].value.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &gi), &x) in ga.iter_mut().zip(g).zip(av) {
                        // zero subgradient at the kink
                        if x > 0.0 {
                            *o += gi;
                        } else if x < 0.0 {
                            *o -= gi;
                        }
                    }
                }
            }
            Op::Square(a) => {
                let av = self.nodes[a.0].value.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &gi), &x) in ga.iter_mut().zip(g).zip(av) {
                        *o += 2.0 * x * gi;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::SquaredNorm(a) => {
                let av = self.nodes[a.0].value.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for (o, &x) in ga.iter_mut().zip(av) {
                        *o += 2.0 * x * g[0];
                    }
                }
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.nodes[a.0].value.dims2();
                let w = node.value.dims2().1;
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..m {
                        axpy(1.0, &g[i * w..(i + 1) * w], &mut ga[i * n + start..i * n + start + w]);
                    }
                }
            }
            Op::SelectRows(a, rows) => {
                let (_, n) = self.nodes[a.0].value.dims2();
                if let Some(ga) = self.acc(grads, *a) {
                    for (k, &r) in rows.iter().enumerate() {
                        axpy(1.0, &g[k * n..(k + 1) * n], &mut ga[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = node.value.dims2();
                let mut off = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.dims2().1;
                    if let Some(gp) = self.acc(grads, *p) {
                        for i in 0..m {
                            axpy(
                                1.0,
                                &g[i * total + off..i * total + off + w],
                                &mut gp[i * w..(i + 1) * w],
                            );
                        }
                    }
                    off += w;
                }
            }
            Op::ScaleShiftRows(a, scale) => {
                let (m, n) = node.value.dims2();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..m {
                        axpy(scale[i], &g[i * n..(i + 1) * n], &mut ga[i * n..(i + 1) * n]);
                    }
                }
            }
            Op::Conv1d { x, w, b, width } => {
                let (c_in, len) = self.nodes[x.0].value.dims2();
                let c_out = node.value.dims2().0;
                let xv = self.nodes[x.0].value.data();
                let wv = self.nodes[w.0].value.data();
                // Gradients land in distinct nodes, so take them out one at a time.
                let mut gx = self.rg(*x).then(|| take_or_zero(grads, *x, xv.len()));
                let mut gw = self.rg(*w).then(|| take_or_zero(grads, *w, wv.len()));
                let mut gb = self.rg(*b).then(|| take_or_zero(grads, *b, c_out));
                conv1d_backward(
                    xv,
                    c_in,
                    len,
                    wv,
                    c_out,
                    *width,
                    g,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(v) = gx {
                    grads[x.0] = Some(v);
                }
                if let Some(v) = gw {
                    grads[w.0] = Some(v);
                }
                if let Some(v) = gb {
                    grads[b.0] = Some(v);
                }
            }
            Op::Interp(knots, plan) => {
                let (m, n) = self.nodes[knots.0].value.dims2();
                let nf = plan.n_fine();
                if let Some(gk) = self.acc(grads, *knots) {
                    for i in 0..m {
                        plan.apply_transpose(&g[i * nf..(i + 1) * nf], &mut gk[i * n..(i + 1) * n]);
                    }
                }
            }
            Op::Recurrence(op) => self.recurrence_backward(idx, op, g, grads),
            Op::Linear(x, map) => {
                if let Some(gx) = self.acc(grads, *x) {
                    map.apply_transpose(g, gx);
                }
            }
            Op::SpectralNorm { k, u, v } => {
                let (m, n) = self.nodes[k.0].value.dims2();
                if let Some(gk) = self.acc(grads, *k) {
                    for i in 0..m {
                        for j in 0..n {
                            gk[i * n + j] += g[0] * u[i] * v[j];
                        }
                    }
                }
            }
        }
    }

    fn recurrence_backward(
        &self,
        idx: usize,
        op: &RecurrenceOp,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let n = self.nodes[op.psi0.0].value.len();
        let (m, steps) = self.nodes[op.inputs.0].value.dims2();
        let cols = steps + 1;
        debug_assert_eq!(self.nodes[idx].value.len(), n * cols);
        let k = op.k.data();
        let gain = input_gain(&op.k, &op.b);
        // Adjoint sweep: lambda[t] = dL/dpsi[t] accumulated from the output
        // gradient at column t plus K^T lambda[t+1].
        let mut lambda = vec![0.0; n];
        let mut next = vec![0.0; n];
        let mut g_u = vec![0.0; m * steps];
        for i in 0..n {
            lambda[i] = g[i * cols + steps];
        }
        for t in (0..steps).rev() {
            // input gradient for step t: G^T lambda[t+1]
            for c in 0..m {
                let mut s = 0.0;
                for i in 0..n {
                    s += gain[i * m + c] * lambda[i];
                }
                g_u[c * steps + t] = s;
            }
            next.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..n {
                let li = lambda[i];
                if li != 0.0 {
                    axpy(li, &k[i * n..(i + 1) * n], &mut next);
                }
            }
            for i in 0..n {
                next[i] += g[i * cols + t];
            }
            std::mem::swap(&mut lambda, &mut next);
        }
        if let Some(gp) = self.acc(grads, op.psi0) {
            axpy(1.0, &lambda, gp);
        }
        if let Some(gi) = self.acc(grads, op.inputs) {
            axpy(1.0, &g_u, gi);
        }
    }
}

fn take_or_zero(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> Vec<f64> {
    grads[v.0].take().unwrap_or_else(|| vec![0.0; len])
}

/// `G = (I - K) B`, the per-step input gain of the affine recurrence.
pub(crate) fn input_gain(k: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n, m) = b.dims2();
    let mut kb = vec![0.0; n * m];
    matmul_acc(k.data(), b.data(), &mut kb, n, n, m);
    b.data().iter().zip(&kb).map(|(bi, kbi)| bi - kbi).collect()
}

/// One step `next = K cur + G u`.
#[inline]
pub(crate) fn recurrence_step(
    k: &[f64],
    gain: &[f64],
    cur: &[f64],
    u: &[f64],
    next: &mut [f64],
    n: usize,
    m: usize,
) {
    for i in 0..n {
        let mut s = super::tensor::dot(&k[i * n..(i + 1) * n], cur);
        for c in 0..m {
            s += gain[i * m + c] * u[c];
        }
        next[i] = s;
    }
}
