use super::kernels;
use super::{Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Softmax(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    LayerNorm { x: Var, scale: Option<Var>, normed: Vec<T>, inv_std: Vec<T> },
    RmsNorm { x: Var, scale: Var, normed: Vec<T>, inv_rms: Vec<T> },
    Silu(Var),
    Gelu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Mse(Var, Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Gather { table: Var, ids: Vec<usize> },
    Permute { x: Var, index: Vec<usize> },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Nodes are appended in execution order, so a node's inputs always have
/// smaller indices and a reverse sweep is a valid reverse topological order.
/// Values on the tape are never mutated after they are recorded.
#[derive(Clone, Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape(op: &'static str, a: &Tensor<impl Real>, b: &Tensor<impl Real>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn log_sigmoid<T: Real>(x: T) -> T {
    // log σ(x) = -softplus(-x)
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let three = T::lit(3.0);
    let u = c * (x + k * x * x * x);
    let th = u.tanh();
    let y = half * x * (T::one() + th);
    let du = c * (T::one() + three * k * x * x);
    let dy = half * (T::one() + th) + half * x * (T::one() - th * th) * du;
    (y, dy)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(
            !value.data().iter().any(|x| x.is_nan()),
            "NaN produced by {op:?}"
        );
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

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(TensorError::contract(op, format!("expects a 2-D tensor, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a[m×k] · b[n×k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul_nt", a)?;
        let (n, k2) = self.dims2("matmul_nt", b)?;
        if k != k2 {
            return Err(TensorError::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.dims2("transpose", a)?;
        let out = self.value(a).transpose()?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(op, va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    fn row_broadcast(&mut self, op: &'static str, a: Var, row: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vr) = (self.value(a), self.value(row));
        let n = va.cols();
        if vr.len() != n {
            return Err(TensorError::shape(op, va.shape(), vr.shape()));
        }
        let r = vr.data();
        let data = va
            .data()
            .chunks_exact(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&x, &y)| f(x, y)))
            .collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    /// Adds a length-`n` row vector to every row of `a[...×n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast("add_row", a, row, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    /// Multiplies every row of `a[...×n]` elementwise by a length-`n` row vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast("mul_row", a, row, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::MulRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    /// Row-wise softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.cols();
        let mut out = va.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total = total + *x;
            }
            for x in row.iter_mut() {
                *x = *x / total;
            }
        }
        let out = Tensor::new(va.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Concatenates 2-D parts along the sequence (row) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::contract("concat_rows", "no parts"))?;
        let d = self.value(first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 2 || v.cols() != d {
                return Err(TensorError::shape("concat_rows", self.shape(first), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new([rows, d], data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Concatenates 2-D parts along the feature (column) axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::contract("concat_cols", "no parts"))?;
        let m = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 2 || v.rows() != m {
                return Err(TensorError::shape("concat_cols", self.shape(first), v.shape()));
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![T::zero(); m * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p).data();
            for r in 0..m {
                data[r * total + offset..r * total + offset + w].copy_from_slice(&v[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new([m, total], data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2("slice_rows", x)?;
        if len == 0 || start + len > m {
            return Err(TensorError::contract(
                "slice_rows",
                format!("rows {start}..{} out of range for {m}", start + len),
            ));
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new([len, n], data)?, Op::SliceRows { x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2("slice_cols", x)?;
        if len == 0 || start + len > n {
            return Err(TensorError::contract(
                "slice_cols",
                format!("cols {start}..{} out of range for {n}", start + len),
            ));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new([m, len], data)?, Op::SliceCols { x, start }, rg))
    }

    /// Layer normalization over the last axis with an optional learnable scale.
    pub fn layer_norm(&mut self, x: Var, scale: Option<Var>, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let n = vx.cols();
        if let Some(s) = scale {
            if self.value(s).len() != n {
                return Err(TensorError::shape("layer_norm", vx.shape(), self.shape(s)));
            }
        }
        let nf = T::lit(n as f64);
        let mut normed = vec![T::zero(); vx.len()];
        let mut inv_std = Vec::with_capacity(vx.rows());
        for (row, out) in vx.data().chunks_exact(n).zip(normed.chunks_exact_mut(n)) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + T::lit(eps)).sqrt();
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let mut out = normed.clone();
        if let Some(s) = scale {
            let g = self.value(s).data();
            for row in out.chunks_exact_mut(n) {
                for (o, &gv) in row.iter_mut().zip(g) {
                    *o = *o * gv;
                }
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(x) || scale.is_some_and(|s| self.rg(s));
        Ok(self.push(out, Op::LayerNorm { x, scale, normed, inv_std }, rg))
    }

    /// RMS normalization over the last axis with a learnable scale.
    pub fn rms_norm(&mut self, x: Var, scale: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let n = vx.cols();
        if self.value(scale).len() != n {
            return Err(TensorError::shape("rms_norm", vx.shape(), self.shape(scale)));
        }
        let nf = T::lit(n as f64);
        let g = self.value(scale).data();
        let mut normed = vec![T::zero(); vx.len()];
        let mut out = vec![T::zero(); vx.len()];
        let mut inv_rms = Vec::with_capacity(vx.rows());
        for ((row, nr), orow) in vx
            .data()
            .chunks_exact(n)
            .zip(normed.chunks_exact_mut(n))
            .zip(out.chunks_exact_mut(n))
        {
            let ms = row.iter().map(|&v| v * v).sum::<T>() / nf;
            let ir = T::one() / (ms + T::lit(eps)).sqrt();
            for ((o, nv), (&v, &gv)) in orow.iter_mut().zip(nr.iter_mut()).zip(row.iter().zip(g)) {
                *nv = v * ir;
                *o = *nv * gv;
            }
            inv_rms.push(ir);
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(scale);
        Ok(self.push(out, Op::RmsNorm { x, scale, normed, inv_rms }, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, |x| gelu_parts(x).0, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, log_sigmoid, Op::LogSigmoid(a))
    }

    /// Mean of squared differences over all elements, as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("mse", va, vb)?;
        let n = T::lit(va.len() as f64);
        let total: T = va.data().iter().zip(vb.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(total / n), Op::Mse(a, b), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.sum() / T::lit(v.len() as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2("gather_rows", table)?;
        if ids.is_empty() {
            return Err(TensorError::contract("gather_rows", "no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::contract(
                "gather_rows",
                format!("id {bad} out of range for table of {v} rows"),
            ));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new([ids.len(), d], data)?,
            Op::Gather { table, ids: ids.to_vec() },
            rg,
        ))
    }

    /// Flat permutation: `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn permute(&mut self, x: Var, index: &[usize], shape: impl Into<Vec<usize>>) -> Result<Var> {
        let src = self.value(x).data();
        if index.len() != src.len() {
            return Err(TensorError::contract(
                "permute",
                format!("index of length {} for {} values", index.len(), src.len()),
            ));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Permute { x, index: index.to_vec() }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every `requires_grad` node reachable from `loss` gets exactly one
    /// accumulated gradient in the returned [`Gradients`].
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| self.nodes[i].requires_grad)
                    .map(|g| Tensor::new(self.nodes[i].value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                self.accumulate(grads, *a, |ga| kernels::matmul_nt(g, vb.data(), ga, m, n, k));
                self.accumulate(grads, *b, |gb| kernels::matmul_tn(va.data(), g, gb, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[0]);
                self.accumulate(grads, *a, |ga| kernels::matmul(g, vb.data(), ga, m, n, k));
                self.accumulate(grads, *b, |gb| kernels::matmul_tn(g, va.data(), gb, m, n, k));
            }
            Op::Transpose(a) => {
                let (m, n) = (out.shape()[0], out.shape()[1]);
                self.accumulate(grads, *a, |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[j * m + i] = ga[j * m + i] + g[i * n + j];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| kernels::add_into(g, ga));
                self.accumulate(grads, *b, |gb| kernels::add_into(g, gb));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| kernels::add_into(g, ga));
                self.accumulate(grads, *b, |gb| kernels::axpy(-T::one(), g, gb));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for ((o, &gi), &y) in ga.iter_mut().zip(g).zip(vb) {
                        *o = *o + gi * y;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((o, &gi), &x) in gb.iter_mut().zip(g).zip(va) {
                        *o = *o + gi * x;
                    }
                });
            }
            Op::AddRow(a, row) => {
                let n = out.cols();
                self.accumulate(grads, *a, |ga| kernels::add_into(g, ga));
                self.accumulate(grads, *row, |gr| {
                    for chunk in g.chunks_exact(n) {
                        kernels::add_into(chunk, gr);
                    }
                });
            }
            Op::MulRow(a, row) => {
                let n = out.cols();
                let (va, vr) = (self.value(*a).data(), self.value(*row).data());
                self.accumulate(grads, *a, |ga| {
                    for (gchunk, achunk) in g.chunks_exact(n).zip(ga.chunks_exact_mut(n)) {
                        for ((o, &gi), &r) in achunk.iter_mut().zip(gchunk).zip(vr) {
                            *o = *o + gi * r;
                        }
                    }
                });
                self.accumulate(grads, *row, |gr| {
                    for (gchunk, xchunk) in g.chunks_exact(n).zip(va.chunks_exact(n)) {
                        for ((o, &gi), &x) in gr.iter_mut().zip(gchunk).zip(xchunk) {
                            *o = *o + gi * x;
                        }
                    }
                });
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, |ga| kernels::axpy(*s, g, ga)),
            Op::AddScalar(a) => self.accumulate(grads, *a, |ga| kernels::add_into(g, ga)),
            Op::Softmax(a) => {
                let n = out.cols();
                self.accumulate(grads, *a, |ga| {
                    for ((gchunk, ychunk), achunk) in g
                        .chunks_exact(n)
                        .zip(out.data().chunks_exact(n))
                        .zip(ga.chunks_exact_mut(n))
                    {
                        let dot = kernels::dot(gchunk, ychunk);
                        for ((o, &gi), &y) in achunk.iter_mut().zip(gchunk).zip(ychunk) {
                            *o = *o + y * (gi - dot);
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(grads, p, |gp| kernels::add_into(&g[offset..offset + len], gp));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let m = out.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.accumulate(grads, p, |gp| {
                        for r in 0..m {
                            kernels::add_into(
                                &g[r * total + offset..r * total + offset + w],
                                &mut gp[r * w..(r + 1) * w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                let n = out.cols();
                self.accumulate(grads, *x, |gx| {
                    kernels::add_into(g, &mut gx[start * n..start * n + g.len()]);
                });
            }
            Op::SliceCols { x, start } => {
                let (m, w) = (out.rows(), out.cols());
                let n = self.value(*x).cols();
                self.accumulate(grads, *x, |gx| {
                    for r in 0..m {
                        kernels::add_into(&g[r * w..(r + 1) * w], &mut gx[r * n + start..r * n + start + w]);
                    }
                });
            }
            Op::LayerNorm { x, scale, normed, inv_std } => {
                let n = out.cols();
                let nf = T::lit(n as f64);
                let gamma = scale.map(|s| self.value(s).data());
                if let Some(s) = scale {
                    self.accumulate(grads, *s, |gs| {
                        for (gchunk, nchunk) in g.chunks_exact(n).zip(normed.chunks_exact(n)) {
                            for ((o, &gi), &h) in gs.iter_mut().zip(gchunk).zip(nchunk) {
                                *o = *o + gi * h;
                            }
                        }
                    });
                }
                self.accumulate(grads, *x, |gx| {
                    let mut dh = vec![T::zero(); n];
                    for (r, ((gchunk, nchunk), xchunk)) in g
                        .chunks_exact(n)
                        .zip(normed.chunks_exact(n))
                        .zip(gx.chunks_exact_mut(n))
                        .enumerate()
                    {
                        for (j, d) in dh.iter_mut().enumerate() {
                            *d = match gamma {
                                Some(gm) => gchunk[j] * gm[j],
                                None => gchunk[j],
                            };
                        }
                        let sum_dh: T = dh.iter().copied().sum();
                        let sum_dh_h = kernels::dot(&dh, nchunk);
                        let k = inv_std[r] / nf;
                        for ((o, &d), &h) in xchunk.iter_mut().zip(&dh).zip(nchunk) {
                            *o = *o + k * (nf * d - sum_dh - h * sum_dh_h);
                        }
                    }
                });
            }
            Op::RmsNorm { x, scale, normed, inv_rms } => {
                let n = out.cols();
                let nf = T::lit(n as f64);
                let gamma = self.value(*scale).data();
                self.accumulate(grads, *scale, |gs| {
                    for (gchunk, nchunk) in g.chunks_exact(n).zip(normed.chunks_exact(n)) {
                        for ((o, &gi), &h) in gs.iter_mut().zip(gchunk).zip(nchunk) {
                            *o = *o + gi * h;
                        }
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    let mut dh = vec![T::zero(); n];
                    for (r, ((gchunk, nchunk), xchunk)) in g
                        .chunks_exact(n)
                        .zip(normed.chunks_exact(n))
                        .zip(gx.chunks_exact_mut(n))
                        .enumerate()
                    {
                        for (j, d) in dh.iter_mut().enumerate() {
                            *d = gchunk[j] * gamma[j];
                        }
                        let mean_dh_h = kernels::dot(&dh, nchunk) / nf;
                        for ((o, &d), &h) in xchunk.iter_mut().zip(&dh).zip(nchunk) {
                            *o = *o + inv_rms[r] * (d - h * mean_dh_h);
                        }
                    }
                });
            }
            Op::Silu(a) => {
                let va = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for ((o, &gi), &x) in ga.iter_mut().zip(g).zip(va) {
                        let s = sigmoid(x);
                        *o = *o + gi * s * (T::one() + x * (T::one() - s));
                    }
                });
            }
            Op::Gelu(a) => {
                let va = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for ((o, &gi), &x) in ga.iter_mut().zip(g).zip(va) {
                        *o = *o + gi * gelu_parts(x).1;
                    }
                });
            }
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, |ga| {
                    for ((o, &gi), &y) in ga.iter_mut().zip(g).zip(out.data()) {
                        *o = *o + gi * y * (T::one() - y);
                    }
                });
            }
            Op::LogSigmoid(a) => {
                let va = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for ((o, &gi), &x) in ga.iter_mut().zip(g).zip(va) {
                        *o = *o + gi * sigmoid(-x);
                    }
                });
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let k = g[0] * T::lit(2.0) / T::lit(va.len() as f64);
                self.accumulate(grads, *a, |ga| {
                    for ((o, &x), &y) in ga.iter_mut().zip(va).zip(vb) {
                        *o = *o + k * (x - y);
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((o, &x), &y) in gb.iter_mut().zip(va).zip(vb) {
                        *o = *o - k * (x - y);
                    }
                });
            }
            Op::Sum(a) => self.accumulate(grads, *a, |ga| {
                for o in ga.iter_mut() {
                    *o = *o + g[0];
                }
            }),
            Op::Mean(a) => {
                let k = g[0] / T::lit(self.value(*a).len() as f64);
                self.accumulate(grads, *a, |ga| {
                    for o in ga.iter_mut() {
                        *o = *o + k;
                    }
                });
            }
            Op::Reshape(a) => self.accumulate(grads, *a, |ga| kernels::add_into(g, ga)),
            Op::Gather { table, ids } => {
                let d = out.cols();
                self.accumulate(grads, *table, |gt| {
                    for (r, &i) in ids.iter().enumerate() {
                        kernels::add_into(&g[r * d..(r + 1) * d], &mut gt[i * d..(i + 1) * d]);
                    }
                });
            }
            Op::Permute { x, index } => self.accumulate(grads, *x, |gx| {
                for (&gi, &src) in g.iter().zip(index) {
                    gx[src] = gx[src] + gi;
                }
            }),
        }
    }
}
