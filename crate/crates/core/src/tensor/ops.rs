use super::shape::{broadcast_shape, broadcast_strides, for_each_broadcast2, for_each_row, numel};
use super::attention::Heads;
use super::{gemm, strict, Float, Layout, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum UnaryKind {
    Neg,
    Exp,
    Sqrt,
    Tanh,
    Gelu,
    Silu,
    Scale(f64),
    AddScalar(f64),
}

/// Recorded operation with the inputs (and saved statistics) its backward needs.
pub(crate) enum Op<F: Float> {
    Binary {
        kind: BinaryKind,
        lhs: Tensor<F>,
        rhs: Tensor<F>,
    },
    Unary {
        kind: UnaryKind,
        input: Tensor<F>,
    },
    MatMul {
        lhs: Tensor<F>,
        rhs: Tensor<F>,
    },
    Softmax {
        input: Tensor<F>,
    },
    LayerNorm {
        input: Tensor<F>,
        gain: Option<Tensor<F>>,
        bias: Option<Tensor<F>>,
        mean: Vec<F>,
        rstd: Vec<F>,
    },
    Sum {
        input: Tensor<F>,
    },
    SumAxis {
        input: Tensor<F>,
        axis: usize,
    },
    Reshape {
        input: Tensor<F>,
    },
    Permute {
        input: Tensor<F>,
        perm: Vec<usize>,
    },
    Slice {
        input: Tensor<F>,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<Tensor<F>>,
        axis: usize,
    },
    Embedding {
        table: Tensor<F>,
        indices: Vec<usize>,
    },
    Attention {
        qkv: Tensor<F>,
        heads: Heads,
        probs: Vec<F>,
    },
}

impl<F: Float> Op<F> {
    pub(crate) fn inputs(&self) -> Vec<&Tensor<F>> {
        match self {
            Op::Binary { lhs, rhs, .. } | Op::MatMul { lhs, rhs } => vec![lhs, rhs],
            Op::Unary { input, .. }
            | Op::Softmax { input }
            | Op::Sum { input }
            | Op::SumAxis { input, .. }
            | Op::Reshape { input }
            | Op::Permute { input, .. }
            | Op::Slice { input, .. } => vec![input],
            Op::LayerNorm {
                input, gain, bias, ..
            } => {
                let mut v = vec![input];
                v.extend(gain.iter());
                v.extend(bias.iter());
                v
            }
            Op::Concat { inputs, .. } => inputs.iter().collect(),
            Op::Embedding { table, .. } => vec![table],
            Op::Attention { qkv, .. } => vec![qkv],
        }
    }

    pub(crate) fn needs_grad(&self) -> bool {
        self.inputs().iter().any(|t| t.requires_grad())
    }
}

pub(crate) fn gelu_scalar<F: Float>(x: F) -> F {
    let c = F::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).fast_tanh())
}

pub(crate) fn gelu_grad_scalar<F: Float>(x: F) -> F {
    let c = F::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let th = (c * (x + k * x * x * x)).fast_tanh();
    half * (F::one() + th) + half * x * (F::one() - th * th) * c * (F::one() + three * k * x * x)
}

impl<F: Float> Tensor<F> {
    fn binary(&self, rhs: &Tensor<F>, kind: BinaryKind, name: &'static str) -> Result<Tensor<F>> {
        let (shape, data) = match kind {
            BinaryKind::Add => self.broadcast_map(rhs, name, |x, y| x + y)?,
            BinaryKind::Sub => self.broadcast_map(rhs, name, |x, y| x - y)?,
            BinaryKind::Mul => self.broadcast_map(rhs, name, |x, y| x * y)?,
            BinaryKind::Div => self.broadcast_map(rhs, name, |x, y| x / y)?,
        };
        if kind == BinaryKind::Div && strict() && data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        Ok(Tensor::from_op(
            shape,
            data,
            Op::Binary {
                kind,
                lhs: self.clone(),
                rhs: rhs.clone(),
            },
        ))
    }

    fn broadcast_map(
        &self,
        rhs: &Tensor<F>,
        name: &'static str,
        f: impl Fn(F, F) -> F,
    ) -> Result<(Vec<usize>, Vec<F>)> {
        let (a, b) = (self.data(), rhs.data());
        if self.shape() == rhs.shape() {
            return Ok((self.shape().to_vec(), a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()));
        }
        let out_shape = broadcast_shape(self.shape(), rhs.shape()).ok_or_else(|| TensorError::Shape {
            op: name,
            lhs: self.shape().to_vec(),
            rhs: rhs.shape().to_vec(),
        })?;
        let sa = broadcast_strides(self.shape(), &out_shape);
        let sb = broadcast_strides(rhs.shape(), &out_shape);
        let mut data = Vec::with_capacity(numel(&out_shape));
        for_each_row(&out_shape, &sa, &sb, |_, ia, ib, row| match (row.step_a, row.step_b) {
            (1, 1) => data.extend(a[ia..ia + row.len].iter().zip(&b[ib..ib + row.len]).map(|(&x, &y)| f(x, y))),
            (1, 0) => data.extend(a[ia..ia + row.len].iter().map(|&x| f(x, b[ib]))),
            (0, 1) => data.extend(b[ib..ib + row.len].iter().map(|&y| f(a[ia], y))),
            (sa, sb) => data.extend((0..row.len).map(|j| f(a[ia + j * sa], b[ib + j * sb]))),
        });
        Ok((out_shape, data))
    }

    pub fn add(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary(rhs, BinaryKind::Add, "add")
    }

    pub fn sub(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary(rhs, BinaryKind::Sub, "sub")
    }

    pub fn mul(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary(rhs, BinaryKind::Mul, "mul")
    }

    pub fn div(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        self.binary(rhs, BinaryKind::Div, "div")
    }

    fn unary(&self, kind: UnaryKind) -> Tensor<F> {
        let x = self.data();
        let data: Vec<F> = match kind {
            UnaryKind::Neg => x.iter().map(|&v| -v).collect(),
            UnaryKind::Exp => x.iter().map(|&v| v.exp()).collect(),
            UnaryKind::Sqrt => x.iter().map(|&v| v.sqrt()).collect(),
            UnaryKind::Tanh => x.iter().map(|&v| v.tanh()).collect(),
            UnaryKind::Gelu => x.iter().map(|&v| gelu_scalar(v)).collect(),
            UnaryKind::Silu => x.iter().map(|&v| v / (F::one() + (-v).fast_exp())).collect(),
            UnaryKind::Scale(c) => {
                let c = F::from_f64(c);
                x.iter().map(|&v| v * c).collect()
            }
            UnaryKind::AddScalar(c) => {
                let c = F::from_f64(c);
                x.iter().map(|&v| v + c).collect()
            }
        };
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Unary {
                kind,
                input: self.clone(),
            },
        )
    }

    pub fn neg(&self) -> Tensor<F> {
        self.unary(UnaryKind::Neg)
    }

    pub fn exp(&self) -> Tensor<F> {
        self.unary(UnaryKind::Exp)
    }

    pub fn sqrt(&self) -> Tensor<F> {
        self.unary(UnaryKind::Sqrt)
    }

    pub fn tanh(&self) -> Tensor<F> {
        self.unary(UnaryKind::Tanh)
    }

    /// GELU, tanh approximation:
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&self) -> Tensor<F> {
        self.unary(UnaryKind::Gelu)
    }

    pub fn scale(&self, c: f64) -> Tensor<F> {
        self.unary(UnaryKind::Scale(c))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<F> {
        self.unary(UnaryKind::AddScalar(c))
    }

    pub fn square(&self) -> Result<Tensor<F>> {
        self.mul(self)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self) -> Result<Tensor<F>> {
        Ok(self.unary(UnaryKind::Silu))
    }

    /// Batched matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        let err = || TensorError::Shape {
            op: "matmul",
            lhs: self.shape().to_vec(),
            rhs: rhs.shape().to_vec(),
        };
        let (ra, rb) = (self.rank(), rhs.rank());
        if ra < 2 || rb < 2 {
            return Err(err());
        }
        let (m, k) = (self.shape()[ra - 2], self.shape()[ra - 1]);
        let (k2, n) = (rhs.shape()[rb - 2], rhs.shape()[rb - 1]);
        if k != k2 {
            return Err(err());
        }
        let batch = broadcast_shape(&self.shape()[..ra - 2], &rhs.shape()[..rb - 2]).ok_or_else(err)?;
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);
        let mut out = vec![F::zero(); numel(&out_shape)];
        let plan = MatmulPlan::new(self.shape(), rhs.shape(), &batch);
        if plan.rhs_shared() && plan.lhs_batches == numel(&batch) {
            // rhs is a single matrix: fold the batch into the row dimension
            let rows = plan.lhs_batches * m;
            gemm(rows, k, n, self.data(), Layout::Normal, rhs.data(), Layout::Normal, F::zero(), &mut out);
        } else {
            for (bi, (ia, ib)) in plan.pairs().enumerate() {
                gemm(
                    m,
                    k,
                    n,
                    &self.data()[ia * m * k..(ia + 1) * m * k],
                    Layout::Normal,
                    &rhs.data()[ib * k * n..(ib + 1) * k * n],
                    Layout::Normal,
                    F::zero(),
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        Ok(Tensor::from_op(
            out_shape,
            out,
            Op::MatMul {
                lhs: self.clone(),
                rhs: rhs.clone(),
            },
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Tensor<F>> {
        let n = *self.shape().last().ok_or(TensorError::Invalid {
            op: "softmax",
            msg: "scalar input".into(),
        })?;
        let mut out = self.to_vec();
        if n > 0 {
            for row in out.chunks_mut(n) {
                let max = row.iter().copied().fold(F::neg_infinity(), F::max);
                let mut sum = F::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).fast_exp();
                }
                for v in row.iter() {
                    sum += *v;
                }
                let inv = F::one() / sum;
                for v in row.iter_mut() {
                    *v *= inv;
                }
            }
        }
        Ok(Tensor::from_op(self.shape().to_vec(), out, Op::Softmax { input: self.clone() }))
    }

    pub fn sum(&self) -> Tensor<F> {
        let total: F = self.data().iter().copied().sum();
        Tensor::from_op(vec![1], vec![total], Op::Sum { input: self.clone() })
    }

    pub fn mean(&self) -> Tensor<F> {
        let n = self.numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<F>> {
        if axis >= self.rank() {
            return Err(TensorError::Invalid {
                op: "sum_axis",
                msg: format!("axis {} out of range for shape {:?}", axis, self.shape()),
            });
        }
        let shape = self.shape();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![F::zero(); outer * inner];
        let x = self.data();
        for o in 0..outer {
            for a in 0..len {
                let src = &x[(o * len + a) * inner..(o * len + a + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        Ok(Tensor::from_op(out_shape, out, Op::SumAxis { input: self.clone(), axis }))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<F>> {
        let len = *self.shape().get(axis).unwrap_or(&1) as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / len.max(1.0)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<F>> {
        if numel(shape) != self.numel() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(shape.to_vec(), self.to_vec(), Op::Reshape { input: self.clone() }))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<F>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("{:?} is not a permutation of rank {}", perm, rank),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let data = permute_data(self.data(), self.shape(), perm);
        Ok(Tensor::from_op(
            out_shape,
            data,
            Op::Permute {
                input: self.clone(),
                perm: perm.to_vec(),
            },
        ))
    }

    /// Swap two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor<F>> {
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        if a >= perm.len() || b >= perm.len() {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: format!("axes ({a}, {b}) out of range for shape {:?}", self.shape()),
            });
        }
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Contiguous range `start..start + len` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<F>> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("range {}..{} on axis {} of {:?}", start, start + len, axis, shape),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        Ok(Tensor::from_op(
            out_shape,
            data,
            Op::Slice {
                input: self.clone(),
                axis,
                start,
            },
        ))
    }

    /// Split `axis` into `parts` equal slices.
    pub fn chunk(&self, parts: usize, axis: usize) -> Result<Vec<Tensor<F>>> {
        let size = *self.shape().get(axis).unwrap_or(&0);
        if parts == 0 || size % parts != 0 {
            return Err(TensorError::Invalid {
                op: "chunk",
                msg: format!("cannot split axis {axis} of {:?} into {parts}", self.shape()),
            });
        }
        let step = size / parts;
        (0..parts).map(|i| self.slice(axis, i * step, step)).collect()
    }
}

pub(crate) fn permute_data<F: Float>(x: &[F], shape: &[usize], perm: &[usize]) -> Vec<F> {
    let rank = shape.len();
    let in_strides = super::shape::contiguous_strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zeros = vec![0; rank];
    let mut out = vec![F::zero(); x.len()];
    if rank == 0 {
        out.copy_from_slice(x);
        return out;
    }
    for_each_broadcast2(&out_shape, &src_strides, &zeros, |o, i, _| out[o] = x[i]);
    out
}

/// Leading-axis pairing for batched matmul.
pub(crate) struct MatmulPlan {
    pub batch: Vec<usize>,
    pub sa: Vec<usize>,
    pub sb: Vec<usize>,
    pub lhs_batches: usize,
    pub rhs_batches: usize,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize], batch: &[usize]) -> Self {
        let a_batch = &a[..a.len() - 2];
        let b_batch = &b[..b.len() - 2];
        Self {
            batch: batch.to_vec(),
            sa: broadcast_strides(a_batch, batch),
            sb: broadcast_strides(b_batch, batch),
            lhs_batches: numel(a_batch),
            rhs_batches: numel(b_batch),
        }
    }

    pub fn rhs_shared(&self) -> bool {
        self.rhs_batches == 1
    }

    /// (lhs matrix index, rhs matrix index) for each output matrix in order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> {
        let mut v = Vec::with_capacity(numel(&self.batch));
        if self.batch.is_empty() {
            v.push((0, 0));
        } else {
            for_each_broadcast2(&self.batch, &self.sa, &self.sb, |_, ia, ib| v.push((ia, ib)));
        }
        v.into_iter()
    }
}

/// Layer normalization over the last axis with optional affine parameters.
pub fn layer_norm<F: Float>(
    x: &Tensor<F>,
    gain: Option<&Tensor<F>>,
    bias: Option<&Tensor<F>>,
    eps: f64,
) -> Result<Tensor<F>> {
    if eps < 0.0 {
        return Err(TensorError::Invalid {
            op: "layer_norm",
            msg: format!("eps must be non-negative, got {eps}"),
        });
    }
    let d = *x.shape().last().ok_or(TensorError::Invalid {
        op: "layer_norm",
        msg: "scalar input".into(),
    })?;
    for p in [gain, bias].into_iter().flatten() {
        if p.shape() != [d] {
            return Err(TensorError::Shape {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    let rows = if d == 0 { 0 } else { x.numel() / d };
    let eps = F::from_f64(eps);
    let inv_d = F::one() / F::from_f64(d as f64);
    let mut out = vec![F::zero(); x.numel()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for (r, row) in x.data().chunks(d.max(1)).enumerate().take(rows) {
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rstd = F::one() / (var + eps).sqrt();
        let dst = &mut out[r * d..(r + 1) * d];
        for (j, (&v, o)) in row.iter().zip(dst.iter_mut()).enumerate() {
            let mut y = (v - mean) * rstd;
            if let Some(g) = gain {
                y *= g.data()[j];
            }
            if let Some(b) = bias {
                y += b.data()[j];
            }
            *o = y;
        }
        means.push(mean);
        rstds.push(rstd);
    }
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        out,
        Op::LayerNorm {
            input: x.clone(),
            gain: gain.cloned(),
            bias: bias.cloned(),
            mean: means,
            rstd: rstds,
        },
    ))
}

/// Concatenate along `axis`; all other axes must agree.
pub fn concat<F: Float>(inputs: &[Tensor<F>], axis: usize) -> Result<Tensor<F>> {
    let first = inputs.first().ok_or(TensorError::Invalid {
        op: "concat",
        msg: "no inputs".into(),
    })?;
    let rank = first.rank();
    if axis >= rank {
        return Err(TensorError::Invalid {
            op: "concat",
            msg: format!("axis {axis} out of range for rank {rank}"),
        });
    }
    let mut total = 0;
    for t in inputs {
        let same = t.rank() == rank
            && t.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !same {
            return Err(TensorError::Shape {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        total += t.shape()[axis];
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for t in inputs {
            let len = t.shape()[axis] * inner;
            data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_op(
        shape,
        data,
        Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        },
    ))
}

/// Row lookup into a `(vocab, dim)` table, producing `(indices.len(), dim)`.
pub fn embedding<F: Float>(table: &Tensor<F>, indices: &[usize]) -> Result<Tensor<F>> {
    if table.rank() != 2 {
        return Err(TensorError::Invalid {
            op: "embedding",
            msg: format!("table must be 2-d, got {:?}", table.shape()),
        });
    }
    let (vocab, dim) = (table.shape()[0], table.shape()[1]);
    let mut data = Vec::with_capacity(indices.len() * dim);
    for &i in indices {
        if i >= vocab {
            return Err(TensorError::Invalid {
                op: "embedding",
                msg: format!("index {i} out of range for {vocab} rows"),
            });
        }
        data.extend_from_slice(&table.data()[i * dim..(i + 1) * dim]);
    }
    Ok(Tensor::from_op(
        vec![indices.len(), dim],
        data,
        Op::Embedding {
            table: table.clone(),
            indices: indices.to_vec(),
        },
    ))
}
