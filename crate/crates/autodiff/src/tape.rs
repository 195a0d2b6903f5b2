use rand::Rng;

use crate::{AutodiffError, ParamId, ParamStore, Result, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    /// Per-element multiplier, `0` or `1/(1-p)`.
    Dropout(Var, Vec<T>),
    Sum(Var),
    Mean(Var),
    MeanCols(Var),
    SumSegments(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    PickCols(Var, Vec<usize>),
    Concat(Var, Var),
    Reshape(Var),
    Huber(Var, T),
    ScaleRows(Var, Vec<T>),
    SoftmaxMasked(Var, Vec<bool>),
    LogSoftmaxMasked(Var, Vec<bool>),
    LogSumExpMasked(Var, Vec<bool>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records eagerly evaluated operations for one backward pass.
///
/// A tape is confined to one thread. Parameters enter through
/// [`Tape::param`]; everything else is a constant.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    /// A constant copy of `v`; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AutodiffError::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(AutodiffError::shape("matmul", format!("{m}x{k} times {k2}x{n}")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            T::zero(),
            &mut out,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(m, n, out)?, Op::MatMul(a, b), ng))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_shape(op, a, b)?;
        let (r, c) = self.shape(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(r, c, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("add", a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// Adds a `1×c` row to every row of an `r×c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let ((r, c), (r2, c2)) = (self.shape(a), self.shape(row));
        if r2 != 1 || c2 != c {
            return Err(AutodiffError::shape("add_row", format!("{r}x{c} plus {r2}x{c2}")));
        }
        let mut data = self.value(a).data().to_vec();
        let bias = self.value(row).data();
        for chunk in data.chunks_mut(c.max(1)) {
            for (x, &b) in chunk.iter_mut().zip(bias) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(Tensor::new(r, c, data)?, Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, s), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a).map(|x| x + s);
        let ng = self.ng(a);
        self.push(t, Op::AddScalar(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let ng = self.ng(a);
        self.push(t, Op::Relu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(T::exp);
        let ng = self.ng(a);
        self.push(t, Op::Exp(a), ng)
    }

    /// Inverted dropout: surviving entries are scaled by `1/(1-p)`. The
    /// identity when `train` is false or `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64, train: bool, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(AutodiffError::shape("dropout", format!("rate {p} outside [0,1)")));
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let (r, c) = self.shape(a);
        let data = self.value(a).data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(r, c, data)?, Op::Dropout(a, mask), ng))
    }

    /// Sum of all entries, `1×1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Mean of all entries, `1×1`.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(AutodiffError::shape("mean", "empty tensor"));
        }
        let s: T = self.value(a).data().iter().copied().sum();
        let ng = self.ng(a);
        Ok(self.push(Tensor::scalar(s / T::from_usize(n).unwrap()), Op::Mean(a), ng))
    }

    /// Mean across columns of each row, `r×1`.
    pub fn mean_cols(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if c == 0 {
            return Err(AutodiffError::shape("mean_cols", "zero columns"));
        }
        let inv = T::one() / T::from_usize(c).unwrap();
        let data = (0..r)
            .map(|i| self.value(a).row(i).iter().copied().sum::<T>() * inv)
            .collect();
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(r, 1, data)?, Op::MeanCols(a), ng))
    }

    /// Sums rows that share a segment id: row `i` of `a` is added into row
    /// `segments[i]` of a `num_segments×c` output.
    pub fn sum_segments(&mut self, a: Var, segments: &[usize], num_segments: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if segments.len() != r {
            return Err(AutodiffError::shape(
                "sum_segments",
                format!("{} segment ids for {r} rows", segments.len()),
            ));
        }
        if let Some(&bad) = segments.iter().find(|&&s| s >= num_segments) {
            return Err(AutodiffError::shape(
                "sum_segments",
                format!("segment {bad} >= {num_segments}"),
            ));
        }
        let mut out = vec![T::zero(); num_segments * c];
        let src = self.value(a).data();
        for (i, &s) in segments.iter().enumerate() {
            for j in 0..c {
                out[s * c + j] += src[i * c + j];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::new(num_segments, c, out)?,
            Op::SumSegments(a, segments.to_vec()),
            ng,
        ))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(AutodiffError::shape("gather_rows", format!("row {bad} >= {r}")));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(src.row(i));
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(rows.len(), c, out)?, Op::GatherRows(a, rows.to_vec()), ng))
    }

    pub fn gather_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(AutodiffError::shape("gather_cols", format!("column {bad} >= {c}")));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(r * cols.len());
        for i in 0..r {
            let row = src.row(i);
            out.extend(cols.iter().map(|&j| row[j]));
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(r, cols.len(), out)?, Op::GatherCols(a, cols.to_vec()), ng))
    }

    /// Picks one column per row, `r×1`.
    pub fn pick_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if cols.len() != r {
            return Err(AutodiffError::shape(
                "pick_cols",
                format!("{} indices for {r} rows", cols.len()),
            ));
        }
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(AutodiffError::shape("pick_cols", format!("column {bad} >= {c}")));
        }
        let src = self.value(a);
        let data = cols.iter().enumerate().map(|(i, &j)| src.get(i, j)).collect();
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(r, 1, data)?, Op::PickCols(a, cols.to_vec()), ng))
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((ra, ca), (rb, cb)) = (self.shape(a), self.shape(b));
        if ra != rb {
            return Err(AutodiffError::shape("concat", format!("{ra} rows vs {rb} rows")));
        }
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(self.value(a).row(i));
            out.extend_from_slice(self.value(b).row(i));
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(ra, ca + cb, out)?, Op::Concat(a, b), ng))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = Tensor::new(rows, cols, self.value(a).data().to_vec())
            .map_err(|_| AutodiffError::shape("reshape", format!("{:?} to {rows}x{cols}", self.shape(a))))?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    /// Elementwise Huber loss `L_k(u)`: `u²/2` for `|u| <= k`, else
    /// `k(|u| - k/2)`.
    pub fn huber(&mut self, a: Var, kappa: T) -> Var {
        let half = T::from_f64_lossy(0.5);
        let t = self.value(a).map(|u| {
            if u.abs() <= kappa {
                half * u * u
            } else {
                kappa * (u.abs() - half * kappa)
            }
        });
        let ng = self.ng(a);
        self.push(t, Op::Huber(a, kappa), ng)
    }

    /// Multiplies row `i` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, a: Var, factors: &[T]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if factors.len() != r {
            return Err(AutodiffError::shape(
                "scale_rows",
                format!("{} factors for {r} rows", factors.len()),
            ));
        }
        let mut data = self.value(a).data().to_vec();
        for (i, &f) in factors.iter().enumerate() {
            data[i * c..(i + 1) * c].iter_mut().for_each(|x| *x *= f);
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(r, c, data)?, Op::ScaleRows(a, factors.to_vec()), ng))
    }

    fn check_mask(&self, op: &'static str, a: Var, mask: &[bool]) -> Result<(usize, usize)> {
        let (r, c) = self.shape(a);
        if mask.len() != r * c {
            return Err(AutodiffError::shape(op, format!("mask of {} for {r}x{c}", mask.len())));
        }
        if c == 0 {
            if r > 0 {
                return Err(AutodiffError::Mask { op, row: 0 });
            }
            return Ok((r, c));
        }
        if let Some(row) = mask.chunks(c).position(|m| !m.iter().any(|&b| b)) {
            return Err(AutodiffError::Mask { op, row });
        }
        Ok((r, c))
    }

    /// Per-row `(max, Σ exp(x - max))` over available entries only.
    fn masked_max_sumexp(x: &[T], mask: &[bool], c: usize) -> Vec<(T, T)> {
        x.chunks(c)
            .zip(mask.chunks(c))
            .map(|(row, m)| {
                let max = row
                    .iter()
                    .zip(m)
                    .filter(|(_, &k)| k)
                    .map(|(&v, _)| v)
                    .fold(T::neg_infinity(), T::max);
                let s: T = row
                    .iter()
                    .zip(m)
                    .filter(|(_, &k)| k)
                    .map(|(&v, _)| (v - max).exp())
                    .sum();
                (max, s)
            })
            .collect()
    }

    fn masked_lse_rows(x: &[T], mask: &[bool], c: usize) -> Vec<T> {
        Self::masked_max_sumexp(x, mask, c)
            .into_iter()
            .map(|(max, s)| max + s.ln())
            .collect()
    }

    /// Row-wise softmax over available entries; masked entries are exactly
    /// zero and receive zero gradient.
    pub fn softmax_masked(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.check_mask("softmax_masked", a, mask)?;
        let x = self.value(a).data();
        let stats = Self::masked_max_sumexp(x, mask, c);
        let mut out = vec![T::zero(); r * c];
        for (i, &(max, s)) in stats.iter().enumerate() {
            for j in 0..c {
                if mask[i * c + j] {
                    out[i * c + j] = (x[i * c + j] - max).exp() / s;
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(r, c, out)?, Op::SoftmaxMasked(a, mask.to_vec()), ng))
    }

    /// Row-wise log-softmax over available entries. Masked entries hold `0`
    /// (not `-inf`) so products with their zero probabilities stay exact.
    pub fn log_softmax_masked(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.check_mask("log_softmax_masked", a, mask)?;
        let x = self.value(a).data();
        let lse = Self::masked_lse_rows(x, mask, c);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                if mask[i * c + j] {
                    out[i * c + j] = x[i * c + j] - lse[i];
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(r, c, out)?, Op::LogSoftmaxMasked(a, mask.to_vec()), ng))
    }

    /// Row-wise log-sum-exp over available entries, `r×1`.
    pub fn logsumexp_masked(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.check_mask("logsumexp_masked", a, mask)?;
        let lse = Self::masked_lse_rows(self.value(a).data(), mask, c);
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(r, 1, lse)?, Op::LogSumExpMasked(a, mask.to_vec()), ng))
    }

    /// Back-propagates from a `1×1` loss and adds the resulting gradients
    /// into `store`'s gradient buffers.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(AutodiffError::shape("backward", format!("loss is {r}x{c}")));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    for (acc, &x) in store.grad_mut(*id).data_mut().iter_mut().zip(&g) {
                        *acc += x;
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.shape(*a);
                    let n = self.shape(*b).1;
                    if self.ng(*a) {
                        let ga = slot(&mut grads, *a, m * k);
                        // dA = dC · Bᵀ
                        T::gemm(
                            m,
                            n,
                            k,
                            &g,
                            (n as isize, 1),
                            self.value(*b).data(),
                            (1, n as isize),
                            T::one(),
                            ga,
                        );
                    }
                    if self.ng(*b) {
                        let gb = slot(&mut grads, *b, k * n);
                        // dB = Aᵀ · dC
                        T::gemm(
                            k,
                            m,
                            n,
                            self.value(*a).data(),
                            (1, k as isize),
                            &g,
                            (n as isize, 1),
                            T::one(),
                            gb,
                        );
                    }
                }
                Op::Add(a, b) => {
                    self.acc_map(&mut grads, *a, &g, |x, _| x);
                    self.acc_map(&mut grads, *b, &g, |x, _| x);
                }
                Op::Sub(a, b) => {
                    self.acc_map(&mut grads, *a, &g, |x, _| x);
                    self.acc_map(&mut grads, *b, &g, |x, _| -x);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    self.acc_map(&mut grads, *a, &g, |x, k| x * vb[k]);
                    self.acc_map(&mut grads, *b, &g, |x, k| x * va[k]);
                }
                Op::AddRow(a, row) => {
                    self.acc_map(&mut grads, *a, &g, |x, _| x);
                    if self.ng(*row) {
                        let c = self.shape(*row).1;
                        let gr = slot(&mut grads, *row, c);
                        for chunk in g.chunks(c.max(1)) {
                            for (acc, &x) in gr.iter_mut().zip(chunk) {
                                *acc += x;
                            }
                        }
                    }
                }
                Op::Scale(a, s) => self.acc_map(&mut grads, *a, &g, |x, _| x * *s),
                Op::AddScalar(a) | Op::Reshape(a) => self.acc_map(&mut grads, *a, &g, |x, _| x),
                Op::Relu(a) => {
                    let va = self.value(*a).data();
                    self.acc_map(&mut grads, *a, &g, |x, k| if va[k] > T::zero() { x } else { T::zero() });
                }
                Op::Exp(a) => {
                    let out = node.value.data();
                    self.acc_map(&mut grads, *a, &g, |x, k| x * out[k]);
                }
                Op::Dropout(a, mask) => self.acc_map(&mut grads, *a, &g, |x, k| x * mask[k]),
                Op::Sum(a) => {
                    let g0 = g[0];
                    self.acc_map_len(&mut grads, *a, |_| g0);
                }
                Op::Mean(a) => {
                    let n = T::from_usize(self.value(*a).len()).unwrap();
                    let g0 = g[0] / n;
                    self.acc_map_len(&mut grads, *a, |_| g0);
                }
                Op::MeanCols(a) => {
                    let c = self.shape(*a).1;
                    let inv = T::one() / T::from_usize(c).unwrap();
                    self.acc_map_len(&mut grads, *a, |k| g[k / c] * inv);
                }
                Op::SumSegments(a, seg) => {
                    let c = self.shape(*a).1;
                    self.acc_map_len(&mut grads, *a, |k| g[seg[k / c] * c + k % c]);
                }
                Op::GatherRows(a, rows) => {
                    if self.ng(*a) {
                        let (r, c) = self.shape(*a);
                        let ga = slot(&mut grads, *a, r * c);
                        for (out_row, &src) in rows.iter().enumerate() {
                            for j in 0..c {
                                ga[src * c + j] += g[out_row * c + j];
                            }
                        }
                    }
                }
                Op::GatherCols(a, cols) => {
                    if self.ng(*a) {
                        let (r, c) = self.shape(*a);
                        let w = cols.len();
                        let ga = slot(&mut grads, *a, r * c);
                        for i in 0..r {
                            for (k, &j) in cols.iter().enumerate() {
                                ga[i * c + j] += g[i * w + k];
                            }
                        }
                    }
                }
                Op::PickCols(a, cols) => {
                    if self.ng(*a) {
                        let (r, c) = self.shape(*a);
                        let ga = slot(&mut grads, *a, r * c);
                        for (i, &j) in cols.iter().enumerate() {
                            ga[i * c + j] += g[i];
                        }
                    }
                }
                Op::Concat(a, b) => {
                    let ca = self.shape(*a).1;
                    let cb = self.shape(*b).1;
                    let w = ca + cb;
                    self.acc_map_len(&mut grads, *a, |k| g[(k / ca.max(1)) * w + k % ca.max(1)]);
                    self.acc_map_len(&mut grads, *b, |k| g[(k / cb.max(1)) * w + ca + k % cb.max(1)]);
                }
                Op::Huber(a, kappa) => {
                    let va = self.value(*a).data();
                    let kappa = *kappa;
                    self.acc_map(&mut grads, *a, &g, |x, k| {
                        let u = va[k];
                        if u.abs() <= kappa {
                            x * u
                        } else {
                            x * kappa * u.signum()
                        }
                    });
                }
                Op::ScaleRows(a, f) => {
                    let c = self.shape(*a).1;
                    self.acc_map(&mut grads, *a, &g, |x, k| x * f[k / c]);
                }
                Op::SoftmaxMasked(a, mask) => {
                    let c = self.shape(*a).1;
                    let y = node.value.data();
                    let dots: Vec<T> = (0..g.len() / c)
                        .map(|r| (0..c).map(|j| y[r * c + j] * g[r * c + j]).sum())
                        .collect();
                    self.acc_map_len(&mut grads, *a, |k| {
                        if mask[k] {
                            y[k] * (g[k] - dots[k / c])
                        } else {
                            T::zero()
                        }
                    });
                }
                Op::LogSoftmaxMasked(a, mask) => {
                    let c = self.shape(*a).1;
                    let y = node.value.data();
                    let sums: Vec<T> = (0..g.len() / c)
                        .map(|r| (0..c).filter(|&j| mask[r * c + j]).map(|j| g[r * c + j]).sum())
                        .collect();
                    self.acc_map_len(&mut grads, *a, |k| {
                        if mask[k] {
                            g[k] - y[k].exp() * sums[k / c]
                        } else {
                            T::zero()
                        }
                    });
                }
                Op::LogSumExpMasked(a, mask) => {
                    let c = self.shape(*a).1;
                    let x = self.value(*a).data();
                    let lse = node.value.data();
                    self.acc_map_len(&mut grads, *a, |k| {
                        if mask[k] {
                            g[k / c] * (x[k] - lse[k / c]).exp()
                        } else {
                            T::zero()
                        }
                    });
                }
            }
        }
        Ok(())
    }

    /// `grad[a][k] += f(g[k], k)` for same-shape ops.
    fn acc_map(&self, grads: &mut [Option<Vec<T>>], a: Var, g: &[T], f: impl Fn(T, usize) -> T) {
        if !self.ng(a) {
            return;
        }
        let ga = slot(grads, a, g.len());
        for (k, (acc, &x)) in ga.iter_mut().zip(g).enumerate() {
            *acc += f(x, k);
        }
    }

    /// `grad[a][k] += f(k)` over every entry of `a`.
    fn acc_map_len(&self, grads: &mut [Option<Vec<T>>], a: Var, f: impl Fn(usize) -> T) {
        if !self.ng(a) {
            return;
        }
        let n = self.value(a).len();
        let ga = slot(grads, a, n);
        for (k, acc) in ga.iter_mut().enumerate() {
            *acc += f(k);
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}
