//! A small tape-based reverse-mode differentiation engine over dense `f64`
//! arrays.
//!
//! Forward ops append a node holding their value and enough bookkeeping for
//! the adjoint rule. [`Tape::backward`] then walks the tape once in reverse
//! and accumulates gradients in tape order, so repeated runs produce the same
//! bits. Every forward result is checked for NaN and infinity.
//!
//! Broadcasting is limited to one case: [`Tape::mul`] accepts a per-row
//! scalar for its second operand. All other ops need exact shape agreement.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Dense row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension and the product of the rest.
    fn rows_cols(&self) -> (usize, usize) {
        match self.shape.split_first() {
            Some((&r, rest)) => (r, rest.iter().product()),
            None => (1, 1),
        }
    }

    fn all_finite(&self) -> bool {
        // Non-short-circuiting so the scan vectorizes.
        self.data.iter().fold(true, |ok, v| ok & v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { xs: Vec<Var>, w: Var, b: Option<Var> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { x: Var, y: Var, per_row: bool },
    Concat { inputs: Vec<Var>, axis: usize },
    GatherRows { x: Var, index: Vec<usize> },
    SliceCols { x: Var, start: usize },
    MaxOverAxis { x: Var, argmax: Vec<usize> },
    GatherAddMax { a: Var, b: Var, from: Vec<usize>, slope: f64 },
    LeakyRelu { x: Var, slope: f64 },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Reshape { x: Var },
    Sum { x: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Record of executed ops, in topological order by construction.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node on the tape that
/// needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Takes the gradient out, substituting zeros of `like`'s shape for
    /// nodes the loss does not depend on.
    pub fn take_or_zeros(&mut self, v: Var, like: &Tensor) -> Tensor {
        self.grads
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

/// `c = a·b + beta·c` on strided row-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || ((m - 1) * rsa + (k - 1) * csa) < a.len());
    debug_assert!(k == 0 || ((k - 1) * rsb + (n - 1) * csb) < b.len());
    debug_assert!((m - 1) * rsc + n - 1 < c.len());
    // SAFETY: the asserts above bound every strided access inside the
    // slices; `c` does not alias `a` or `b` because it is borrowed mutably.
    unsafe { dgemm_raw(m, k, n, a, (rsa, csa), b, (rsb, csb), beta, c.as_mut_ptr(), rsc) }
}

/// `a·b` into a new dense `m × n` row-major buffer, skipping the zero fill.
fn gemm_fresh(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize)) -> Vec<f64> {
    let mut c = Vec::with_capacity(m * n);
    if m == 0 || n == 0 {
        return c;
    }
    debug_assert!(k == 0 || ((m - 1) * sa.0 + (k - 1) * sa.1) < a.len());
    debug_assert!(k == 0 || ((k - 1) * sb.0 + (n - 1) * sb.1) < b.len());
    // SAFETY: with beta 0 dgemm writes all m·n outputs without reading them
    // (k == 0 included), so every element is initialized before `set_len`.
    unsafe {
        dgemm_raw(m, k, n, a, sa, b, sb, 0.0, c.as_mut_ptr(), n);
        c.set_len(m * n);
    }
    c
}

/// Caller guarantees every strided access is in bounds and `c` holds
/// `m` rows at stride `rsc`.
#[allow(clippy::too_many_arguments)]
unsafe fn dgemm_raw(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: *mut f64,
    rsc: usize,
) {
    matrixmultiply::dgemm(
        m,
        k,
        n,
        1.0,
        a.as_ptr(),
        rsa as isize,
        csa as isize,
        b.as_ptr(),
        rsb as isize,
        csb as isize,
        beta,
        c,
        rsc as isize,
        1,
    );
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], contribution: impl FnOnce(&mut [f64])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
    contribution(&mut t.data);
}

/// Adds the `m × n` product `a·b` to the slot, or stores it if empty.
fn accumulate_gemm(
    slot: &mut Option<Tensor>,
    shape: &[usize],
    (m, k, n): (usize, usize, usize),
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
) {
    match slot {
        Some(t) => gemm(m, k, n, a, sa, b, sb, 1.0, &mut t.data, n),
        None => {
            *slot = Some(Tensor {
                shape: shape.to_vec(),
                data: gemm_fresh(m, k, n, a, sa, b, sb),
            })
        }
    }
}

/// Row `r` of `x` (rows of width `cols`) times `scale[r]`.
fn scale_rows(x: &[f64], scale: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for (row, s) in x.chunks_exact(cols).zip(scale) {
        out.extend(row.iter().map(|v| v * s));
    }
    out
}

/// Adds a dense contribution given element by element; the first one is
/// stored as is.
fn accumulate_elems(slot: &mut Option<Tensor>, shape: &[usize], values: impl Iterator<Item = f64>) {
    match slot {
        Some(t) => t.data.iter_mut().zip(values).for_each(|(d, v)| *d += v),
        None => {
            *slot = Some(Tensor {
                shape: shape.to_vec(),
                data: values.collect(),
            })
        }
    }
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

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Moves a node's value out, leaving an empty tensor. Later reads of
    /// the node, including by `backward`, see no data.
    pub fn take_value(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor { shape: vec![0], data: Vec::new() })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NumericFault(format!("{name} produced a non-finite value")));
        }
        Ok(self.push_unchecked(value, op, inputs))
    }

    /// For ops whose outputs are finite whenever their inputs are.
    fn push_unchecked(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// `x·Wᵀ + b` for `x: [N, F]`, `w: [O, F]`, `b: [O]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.affine_cat(&[x], w, b)
    }

    /// `[x_1 | x_2 | ...]·Wᵀ + b` without materializing the column
    /// concatenation: each part multiplies its own column block of `W`.
    pub fn affine_cat(&mut self, xs: &[Var], w: Var, b: Option<Var>) -> Result<Var> {
        let ws = self.shape(w);
        let n = xs.first().map(|x| self.shape(*x)[0]);
        let widths: Vec<usize> = xs.iter().map(|x| self.shape(*x).get(1).copied().unwrap_or(0)).collect();
        let bad_part = xs.iter().any(|x| self.shape(*x).len() != 2 || Some(self.shape(*x)[0]) != n);
        if n.is_none() || bad_part || ws.len() != 2 || widths.iter().sum::<usize>() != ws[1] {
            let parts: Vec<_> = xs.iter().map(|x| self.shape(*x)).collect();
            return Err(Error::InvalidShape(format!("affine: x {parts:?} vs W {ws:?}")));
        }
        let (n, f, o) = (n.unwrap_or(0), ws[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::InvalidShape(format!("affine: bias {:?} vs {o} outputs", self.shape(b))));
            }
        }
        let wv = &self.value(w).data;
        let mut out = match b {
            Some(b) => {
                let bias = &self.value(b).data;
                let mut out = Vec::with_capacity(n * o);
                (0..n).for_each(|_| out.extend_from_slice(bias));
                out
            }
            None => gemm_fresh(n, widths[0], o, &self.value(xs[0]).data, (widths[0], 1), wv, (1, f)),
        };
        let mut offset = 0;
        for (i, (x, &width)) in xs.iter().zip(&widths).enumerate() {
            if b.is_some() || i > 0 {
                gemm(n, width, o, &self.value(*x).data, (width, 1), &wv[offset..], (1, f), 1.0, &mut out, o);
            }
            offset += width;
        }
        let inputs: Vec<Var> = xs.iter().copied().chain([w]).chain(b).collect();
        let op = Op::Affine { xs: xs.to_vec(), w, b };
        self.push(Tensor { shape: vec![n, o], data: out }, op, &inputs, "affine")
    }

    fn same_shape(&self, a: Var, b: Var, name: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::InvalidShape(format!(
                "{name}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor { shape, data }, Op::Add { a, b }, &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor { shape, data }, Op::Sub { a, b }, &[a, b], "sub")
    }

    /// Elementwise product. `y` either matches `x` exactly or holds one
    /// value per row of `x` (shape `[R]` or `[R, 1]`).
    pub fn mul(&mut self, x: Var, y: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).rows_cols();
        let ys = self.shape(y);
        let per_row = if ys == self.shape(x) {
            false
        } else if ys == [rows] || ys == [rows, 1] {
            true
        } else {
            return Err(Error::InvalidShape(format!("mul: {:?} vs {ys:?}", self.shape(x))));
        };
        let (xv, yv) = (&self.value(x).data, &self.value(y).data);
        let data = if per_row {
            scale_rows(xv, yv, cols.max(1))
        } else {
            xv.iter().zip(yv).map(|(a, b)| a * b).collect()
        };
        let shape = self.shape(x).to_vec();
        self.push(Tensor { shape, data }, Op::Mul { x, y, per_row }, &[x, y], "mul")
    }

    /// Joins tensors along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::InvalidShape("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidShape(format!("concat axis {axis} on shape {base:?}")));
        }
        let mut axis_total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != base.len() || s.iter().enumerate().any(|(d, &n)| d != axis && n != base[d]) {
                return Err(Error::InvalidShape(format!("concat: {s:?} vs {base:?} on axis {axis}")));
            }
            axis_total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for v in inputs {
                let chunk = self.shape(*v)[axis] * inner;
                data.extend_from_slice(&self.value(*v).data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = axis_total;
        Ok(self.push_unchecked(Tensor { shape, data }, Op::Concat { inputs: inputs.to_vec(), axis }, inputs))
    }

    /// Selects rows (slices along the leading axis) by index, repeats allowed.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(x).rows_cols();
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidShape(format!("gather_rows: index {bad} with {rows} rows")));
        }
        let src = &self.value(x).data;
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index {
            data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let mut shape = self.shape(x).to_vec();
        shape[0] = index.len();
        Ok(self.push_unchecked(Tensor { shape, data }, Op::GatherRows { x, index: index.to_vec() }, &[x]))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start >= end || end > s[1] {
            return Err(Error::InvalidShape(format!("slice_cols {start}..{end} on {s:?}")));
        }
        let cols = s[1];
        let data = self.value(x).data.chunks_exact(cols).flat_map(|r| r[start..end].iter().copied()).collect();
        let shape = vec![s[0], end - start];
        Ok(self.push_unchecked(Tensor { shape, data }, Op::SliceCols { x, start }, &[x]))
    }

    /// Maximum along `axis`, which is removed from the shape. The gradient
    /// flows to the first maximal element.
    pub fn max_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return Err(Error::InvalidShape(format!("max_over_axis {axis} on {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let src = &self.value(x).data;
        let mut data = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            let out = &mut data[o * inner..(o + 1) * inner];
            let arg = &mut argmax[o * inner..(o + 1) * inner];
            for a in 0..len {
                let base = (o * len + a) * inner;
                for (i, (best, at)) in out.iter_mut().zip(arg.iter_mut()).enumerate() {
                    let v = src[base + i];
                    if v > *best {
                        *best = v;
                        *at = base + i;
                    }
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.push_unchecked(Tensor { shape, data }, Op::MaxOverAxis { x, argmax }, &[x]))
    }

    /// `out[r, f] = max_j (a[r, f] + b[index[r·width + j], f])` for
    /// `a: [R, F]`, `b: [S, F]` and `index` of length `R·width`.
    ///
    /// Equal to `gather_rows`, `add`, `reshape` and `max_over_axis` in
    /// sequence, without the `[R·width, F]` intermediate. The gradient of
    /// `b` goes to the first maximal `j`.
    pub fn gather_add_max(&mut self, a: Var, b: Var, index: &[usize], width: usize) -> Result<Var> {
        self.gather_add_max_leaky(a, b, index, width, 1.0)
    }

    /// `leaky_relu(gather_add_max(..), slope)` as one op. The backward mask
    /// reads the output sign, which matches the input sign for `slope >= 0`.
    pub fn gather_add_max_leaky(&mut self, a: Var, b: Var, index: &[usize], width: usize, slope: f64) -> Result<Var> {
        if slope.is_nan() || slope < 0.0 {
            return Err(Error::InvalidInput(format!("gather_add_max_leaky: slope {slope} < 0")));
        }
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] || width == 0 || index.len() != sa[0] * width {
            return Err(Error::InvalidShape(format!(
                "gather_add_max: a {sa:?}, b {sb:?}, {} indices of width {width}",
                index.len()
            )));
        }
        let (rows, cols, src_rows) = (sa[0], sa[1], sb[0]);
        if let Some(&i) = index.iter().find(|&&i| i >= src_rows) {
            return Err(Error::InvalidShape(format!("gather_add_max: row {i} of {src_rows}")));
        }
        let (av, bv) = (&self.value(a).data, &self.value(b).data);
        let mut data = vec![f64::NEG_INFINITY; rows * cols];
        let mut from = vec![0usize; rows * cols];
        let rows_iter = data.chunks_exact_mut(cols).zip(from.chunks_exact_mut(cols));
        for (((out, arg), arow), nbrs) in rows_iter.zip(av.chunks_exact(cols)).zip(index.chunks_exact(width)) {
            for &j in nbrs {
                let brow = &bv[j * cols..(j + 1) * cols];
                for (((o, s), x), y) in out.iter_mut().zip(arg.iter_mut()).zip(arow).zip(brow) {
                    let v = x + y;
                    let better = v > *o;
                    *o = if better { v } else { *o };
                    *s = if better { j } else { *s };
                }
            }
        }
        if slope != 1.0 {
            data.iter_mut().for_each(|v| *v = if *v > 0.0 { *v } else { slope * *v });
        }
        let shape = vec![rows, cols];
        self.push(Tensor { shape, data }, Op::GatherAddMax { a, b, from, slope }, &[a, b], "gather_add_max")
    }

    /// `bounded` marks maps that send finite values to finite values.
    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op, name: &str, bounded: bool) -> Result<Var> {
        let data = self.value(x).data.iter().map(|&v| f(v)).collect();
        let value = Tensor {
            shape: self.shape(x).to_vec(),
            data,
        };
        if bounded {
            Ok(self.push_unchecked(value, op, &[x]))
        } else {
            self.push(value, op, &[x], name)
        }
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let bounded = slope.abs() <= 1.0;
        self.unary(x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu { x, slope }, "leaky_relu", bounded)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid { x }, "sigmoid", true)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::tanh, Op::Tanh { x }, "tanh", true)
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::InvalidShape(format!("reshape {:?} to {shape:?}", self.shape(x))));
        }
        let data = self.value(x).data.clone();
        Ok(self.push_unchecked(Tensor { shape: shape.to_vec(), data }, Op::Reshape { x }, &[x]))
    }

    /// Collapses everything after the leading axis: `[N, ...] -> [N, rest]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).rows_cols();
        self.reshape(x, &[rows, cols])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(total), Op::Sum { x }, &[x], "sum")
    }

    /// Mean softmax cross-entropy of `logits` (`[B, K]`, or `[K]` for a
    /// single sample) against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        let (batch, classes) = match *s {
            [k] => (1, k),
            [b, k] => (b, k),
            _ => return Err(Error::InvalidShape(format!("softmax_cross_entropy on {s:?}"))),
        };
        if labels.len() != batch || batch == 0 {
            return Err(Error::InvalidShape(format!("{} labels for batch {batch}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidShape(format!("label {bad} with {classes} classes")));
        }
        let values = &self.value(logits).data;
        let mut probs = Vec::with_capacity(values.len());
        let mut loss = 0.0;
        for (row, &label) in values.chunks_exact(classes).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + z.ln();
            loss += log_z - row[label];
            probs.extend(row.iter().map(|v| (v - log_z).exp()));
        }
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push(Tensor::scalar(loss / batch as f64), op, &[logits], "softmax_cross_entropy")
    }

    /// Gradients of the scalar `loss` with respect to every node that needs
    /// one. Fails if a parameter gradient is not finite.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidShape(format!("backward from non-scalar {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor {
            shape: self.shape(loss).to_vec(),
            data: vec![1.0],
        });
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                if !g.all_finite() {
                    return Err(Error::NumericFault("non-finite parameter gradient".into()));
                }
                grads[idx] = Some(g);
                continue;
            }
            let (before, _) = grads.split_at_mut(idx);
            self.propagate(node, &g.data, before);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Affine { xs, w, b } => {
                let (n, f) = (node.value.shape[0], self.shape(*w)[1]);
                let o = self.shape(*w)[0];
                let wv = &self.value(*w).data;
                let mut offset = 0;
                for x in xs {
                    let width = self.shape(*x)[1];
                    if self.wants(*x) {
                        let part = &wv[offset..];
                        accumulate_gemm(&mut grads[x.0], self.shape(*x), (n, o, width), g, (o, 1), part, (f, 1));
                    }
                    offset += width;
                }
                if self.wants(*w) {
                    if let [x] = xs.as_slice() {
                        let xv = &self.value(*x).data;
                        accumulate_gemm(&mut grads[w.0], self.shape(*w), (o, n, f), g, (1, o), xv, (f, 1));
                    } else {
                        accumulate(&mut grads[w.0], self.shape(*w), |dw| {
                            let mut offset = 0;
                            for x in xs {
                                let width = self.shape(*x)[1];
                                let xv = &self.value(*x).data;
                                gemm(o, n, width, g, (1, o), xv, (width, 1), 1.0, &mut dw[offset..], f);
                                offset += width;
                            }
                        });
                    }
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    accumulate(&mut grads[b.0], self.shape(b), |db| {
                        for row in g.chunks_exact(o) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    });
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                if self.wants(*a) {
                    accumulate_elems(&mut grads[a.0], self.shape(*a), g.iter().copied());
                }
                if self.wants(*b) {
                    accumulate_elems(&mut grads[b.0], self.shape(*b), g.iter().map(|v| sign * v));
                }
            }
            Op::Mul { x, y, per_row } => {
                let (xv, yv) = (&self.value(*x).data, &self.value(*y).data);
                let cols = self.value(*x).rows_cols().1.max(1);
                if self.wants(*x) {
                    let slot = &mut grads[x.0];
                    if *per_row {
                        match slot {
                            Some(t) => {
                                for ((drow, grow), s) in t.data.chunks_exact_mut(cols).zip(g.chunks_exact(cols)).zip(yv) {
                                    drow.iter_mut().zip(grow).for_each(|(d, v)| *d += v * s);
                                }
                            }
                            None => *slot = Some(Tensor { shape: self.shape(*x).to_vec(), data: scale_rows(g, yv, cols) }),
                        }
                    } else {
                        accumulate_elems(slot, self.shape(*x), g.iter().zip(yv).map(|(v, s)| v * s));
                    }
                }
                if self.wants(*y) {
                    accumulate(&mut grads[y.0], self.shape(*y), |dy| {
                        if *per_row {
                            for ((d, grow), xrow) in dy.iter_mut().zip(g.chunks_exact(cols)).zip(xv.chunks_exact(cols)) {
                                *d += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                            }
                        } else {
                            dy.iter_mut().zip(g.iter().zip(xv)).for_each(|(d, (v, s))| *d += v * s);
                        }
                    });
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = &node.value.shape;
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let out_chunk = out_shape[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let chunk = self.shape(*v)[*axis] * inner;
                    if self.wants(*v) {
                        let pieces = (0..outer).map(|o| &g[o * out_chunk + offset..o * out_chunk + offset + chunk]);
                        match &mut grads[v.0] {
                            Some(t) => {
                                for (d, src) in t.data.chunks_exact_mut(chunk).zip(pieces) {
                                    d.iter_mut().zip(src).for_each(|(d, v)| *d += v);
                                }
                            }
                            slot @ None => {
                                let mut data = Vec::with_capacity(outer * chunk);
                                pieces.for_each(|src| data.extend_from_slice(src));
                                *slot = Some(Tensor {
                                    shape: self.shape(*v).to_vec(),
                                    data,
                                });
                            }
                        }
                    }
                    offset += chunk;
                }
            }
            Op::GatherRows { x, index } => {
                let cols = self.value(*x).rows_cols().1;
                accumulate(&mut grads[x.0], self.shape(*x), |d| {
                    for (k, &i) in index.iter().enumerate() {
                        d[i * cols..(i + 1) * cols]
                            .iter_mut()
                            .zip(&g[k * cols..(k + 1) * cols])
                            .for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let cols = self.shape(*x)[1];
                let width = node.value.shape[1];
                accumulate(&mut grads[x.0], self.shape(*x), |d| {
                    for (drow, grow) in d.chunks_exact_mut(cols).zip(g.chunks_exact(width)) {
                        drow[*start..*start + width].iter_mut().zip(grow).for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::GatherAddMax { a, b, from, slope } => {
                let out = &node.value.data;
                let masked = |v: f64, y: f64| if y > 0.0 { v } else { slope * v };
                if self.wants(*a) {
                    accumulate_elems(&mut grads[a.0], self.shape(*a), g.iter().zip(out).map(|(&v, &y)| masked(v, y)));
                }
                if self.wants(*b) {
                    let cols = self.shape(*b)[1];
                    accumulate(&mut grads[b.0], self.shape(*b), |d| {
                        let rows = from.chunks_exact(cols).zip(g.chunks_exact(cols)).zip(out.chunks_exact(cols));
                        for ((src, grow), orow) in rows {
                            for (f, ((&j, &v), &y)) in src.iter().zip(grow).zip(orow).enumerate() {
                                d[j * cols + f] += masked(v, y);
                            }
                        }
                    });
                }
            }
            Op::MaxOverAxis { x, argmax } => {
                accumulate(&mut grads[x.0], self.shape(*x), |d| {
                    for (&at, v) in argmax.iter().zip(g) {
                        d[at] += v;
                    }
                });
            }
            Op::LeakyRelu { x, slope } => {
                let xv = &self.value(*x).data;
                let values = g.iter().zip(xv).map(|(v, xi)| if *xi > 0.0 { *v } else { slope * v });
                accumulate_elems(&mut grads[x.0], self.shape(*x), values);
            }
            Op::Sigmoid { x } => {
                let out = &node.value.data;
                accumulate_elems(&mut grads[x.0], self.shape(*x), g.iter().zip(out).map(|(v, s)| v * s * (1.0 - s)));
            }
            Op::Tanh { x } => {
                let out = &node.value.data;
                accumulate_elems(&mut grads[x.0], self.shape(*x), g.iter().zip(out).map(|(v, t)| v * (1.0 - t * t)));
            }
            Op::Reshape { x } => accumulate_elems(&mut grads[x.0], self.shape(*x), g.iter().copied()),
            Op::Sum { x } => {
                let seed = g[0];
                accumulate(&mut grads[x.0], self.shape(*x), |d| d.iter_mut().for_each(|d| *d += seed));
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let classes = probs.len() / labels.len();
                let scale = g[0] / labels.len() as f64;
                accumulate(&mut grads[logits.0], self.shape(*logits), |d| {
                    for (row, (&label, p)) in labels.iter().zip(probs.chunks_exact(classes)).enumerate() {
                        for k in 0..classes {
                            let target = if k == label { 1.0 } else { 0.0 };
                            d[row * classes + k] += scale * (p[k] - target);
                        }
                    }
                });
            }
        }
    }
}

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// (parameter index, flat element index) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Denominator floor in the relative error. Central differences at step
/// 1e-6 carry about 1e-10 of rounding noise, so gradients smaller than the
/// floor are judged on absolute error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-5;

/// Relative error `|a - b| / max(|a|, |b|, GRAD_CHECK_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares the reverse-mode gradient of the scalar built by `f` with
/// central finite differences at step `eps`, over every coordinate of every
/// parameter.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_sampled(f, params, eps, usize::MAX, 0)
}

/// Like [`grad_check`], checking at most `per_param` coordinates of each
/// parameter, chosen by a seeded draw.
pub fn grad_check_sampled<F>(f: F, params: &[Tensor], eps: f64, per_param: usize, seed: u64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let mut grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().zip(params).map(|(v, p)| grads.take_or_zeros(*v, p)).collect();

    let mut rng = rng::stream(seed, Stream::Diagnostics);
    let mut work = params.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (pi, p) in params.iter().enumerate() {
        let coords: Vec<usize> = if p.len() <= per_param {
            (0..p.len()).collect()
        } else {
            (0..per_param).map(|_| rng.random_range(0..p.len())).collect()
        };
        for i in coords {
            let orig = p.data[i];
            work[pi].data[i] = orig + eps;
            let up = eval(&work)?;
            work[pi].data[i] = orig - eps;
            let down = eval(&work)?;
            work[pi].data[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = relative_error(analytic[pi].data[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((pi, i));
            }
        }
    }
    Ok(report)
}
