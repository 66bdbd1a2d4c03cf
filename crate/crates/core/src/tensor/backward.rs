use std::collections::{HashMap, HashSet};

use super::attention::attention_backward;
use super::ops::{gelu_grad_scalar, permute_data, BinaryKind, MatmulPlan, Op, UnaryKind};
use super::shape::{broadcast_strides, for_each_row, numel};
use super::{gemm, Float, Layout, Result, Tensor, TensorError};

impl<F: Float> Tensor<F> {
    /// Reverse-mode pass from a scalar. Gradients add into every reachable
    /// leaf that requires them, so repeated calls accumulate.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        // Node ids grow with creation order, so descending id is a valid
        // reverse topological order.
        let mut order: Vec<Tensor<F>> = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.id()) {
                continue;
            }
            if let Some(op) = &t.node().op {
                for p in op.inputs() {
                    if p.requires_grad() && !seen.contains(&p.id()) {
                        stack.push(p.clone());
                    }
                }
            }
            order.push(t);
        }
        order.sort_by_key(|t| std::cmp::Reverse(t.id()));

        let mut grads: HashMap<u64, Vec<F>> = HashMap::new();
        grads.insert(self.id(), vec![F::one()]);
        for t in &order {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            match &t.node().op {
                None => {
                    let mut slot = t.node().grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(op) => {
                    let parent_grads = op_backward(op, t, &g);
                    for (p, pg) in op.inputs().into_iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        match grads.get_mut(&p.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a += b),
                            None => {
                                grads.insert(p.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn wants(t: &Tensor<impl Float>) -> bool {
    t.requires_grad()
}

fn op_backward<F: Float>(op: &Op<F>, out: &Tensor<F>, g: &[F]) -> Vec<Option<Vec<F>>> {
    match op {
        Op::Binary { kind, lhs, rhs } => binary_backward(*kind, lhs, rhs, out, g),
        Op::Unary { kind, input } => {
            let x = input.data();
            let y = out.data();
            let dx: Vec<F> = match kind {
                UnaryKind::Neg => g.iter().map(|&v| -v).collect(),
                UnaryKind::Exp => g.iter().zip(y).map(|(&g, &y)| g * y).collect(),
                UnaryKind::Sqrt => {
                    let half = F::from_f64(0.5);
                    g.iter().zip(y).map(|(&g, &y)| g * half / y).collect()
                }
                UnaryKind::Tanh => g.iter().zip(y).map(|(&g, &y)| g * (F::one() - y * y)).collect(),
                UnaryKind::Gelu => g.iter().zip(x).map(|(&g, &x)| g * gelu_grad_scalar(x)).collect(),
                UnaryKind::Silu => g
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| {
                        let s = F::one() / (F::one() + (-x).fast_exp());
                        g * s * (F::one() + x * (F::one() - s))
                    })
                    .collect(),
                UnaryKind::Scale(c) => {
                    let c = F::from_f64(*c);
                    g.iter().map(|&v| v * c).collect()
                }
                UnaryKind::AddScalar(_) => g.to_vec(),
            };
            vec![Some(dx)]
        }
        Op::MatMul { lhs, rhs } => matmul_backward(lhs, rhs, g),
        Op::Softmax { .. } => {
            let y = out.data();
            let n = *out.shape().last().unwrap();
            let mut dx = vec![F::zero(); y.len()];
            if n > 0 {
                for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                    let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
            }
            vec![Some(dx)]
        }
        Op::LayerNorm {
            input,
            gain,
            bias,
            mean,
            rstd,
        } => layer_norm_backward(input, gain.as_ref(), bias.as_ref(), mean, rstd, g),
        Op::Sum { input } => vec![Some(vec![g[0]; input.numel()])],
        Op::SumAxis { input, axis } => {
            let shape = input.shape();
            let outer: usize = shape[..*axis].iter().product();
            let len = shape[*axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let mut dx = vec![F::zero(); input.numel()];
            for o in 0..outer {
                let src = &g[o * inner..(o + 1) * inner];
                for a in 0..len {
                    let start = (o * len + a) * inner;
                    dx[start..start + inner].copy_from_slice(src);
                }
            }
            vec![Some(dx)]
        }
        Op::Reshape { .. } => vec![Some(g.to_vec())],
        Op::Permute { perm, .. } => {
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            vec![Some(permute_data(g, out.shape(), &inverse))]
        }
        Op::Slice { input, axis, start } => {
            let shape = input.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let len = out.shape()[*axis];
            let mut dx = vec![F::zero(); input.numel()];
            for o in 0..outer {
                let dst = (o * shape[*axis] + start) * inner;
                dx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(dx)]
        }
        Op::Concat { inputs, axis } => {
            let outer: usize = out.shape()[..*axis].iter().product();
            let inner: usize = out.shape()[axis + 1..].iter().product();
            let mut parts: Vec<Vec<F>> = inputs.iter().map(|t| Vec::with_capacity(t.numel())).collect();
            let mut offset = 0;
            for _ in 0..outer {
                for (t, part) in inputs.iter().zip(parts.iter_mut()) {
                    let len = t.shape()[*axis] * inner;
                    part.extend_from_slice(&g[offset..offset + len]);
                    offset += len;
                }
            }
            inputs
                .iter()
                .zip(parts)
                .map(|(t, p)| wants(t).then_some(p))
                .collect()
        }
        Op::Attention { qkv, heads, probs } => vec![Some(attention_backward(qkv, *heads, probs, g))],
        Op::Embedding { table, indices } => {
            let dim = table.shape()[1];
            let mut dt = vec![F::zero(); table.numel()];
            for (row, &i) in indices.iter().enumerate() {
                let dst = &mut dt[i * dim..(i + 1) * dim];
                for (d, &v) in dst.iter_mut().zip(&g[row * dim..(row + 1) * dim]) {
                    *d += v;
                }
            }
            vec![Some(dt)]
        }
    }
}

fn binary_backward<F: Float>(
    kind: BinaryKind,
    lhs: &Tensor<F>,
    rhs: &Tensor<F>,
    out: &Tensor<F>,
    g: &[F],
) -> Vec<Option<Vec<F>>> {
    let (a, b, y) = (lhs.data(), rhs.data(), out.data());
    if lhs.shape() == rhs.shape() {
        let da = wants(lhs).then(|| match kind {
            BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
            BinaryKind::Mul => g.iter().zip(b).map(|(&g, &b)| g * b).collect(),
            BinaryKind::Div => g.iter().zip(b).map(|(&g, &b)| g / b).collect(),
        });
        let db = wants(rhs).then(|| match kind {
            BinaryKind::Add => g.to_vec(),
            BinaryKind::Sub => g.iter().map(|&g| -g).collect(),
            BinaryKind::Mul => g.iter().zip(a).map(|(&g, &a)| g * a).collect(),
            BinaryKind::Div => g.iter().zip(y).zip(b).map(|((&g, &y), &b)| -g * y / b).collect(),
        });
        return vec![da, db];
    }
    let out_shape = out.shape();
    let sa = broadcast_strides(lhs.shape(), out_shape);
    let sb = broadcast_strides(rhs.shape(), out_shape);
    let da = wants(lhs).then(|| match kind {
        BinaryKind::Add | BinaryKind::Sub => reduce_into(lhs.shape(), out_shape, &sa, &sb, |o, _| g[o]),
        BinaryKind::Mul => reduce_into(lhs.shape(), out_shape, &sa, &sb, |o, ib| g[o] * b[ib]),
        BinaryKind::Div => reduce_into(lhs.shape(), out_shape, &sa, &sb, |o, ib| g[o] / b[ib]),
    });
    let db = wants(rhs).then(|| match kind {
        BinaryKind::Add => reduce_into(rhs.shape(), out_shape, &sb, &sa, |o, _| g[o]),
        BinaryKind::Sub => reduce_into(rhs.shape(), out_shape, &sb, &sa, |o, _| -g[o]),
        BinaryKind::Mul => reduce_into(rhs.shape(), out_shape, &sb, &sa, |o, ia| g[o] * a[ia]),
        BinaryKind::Div => {
            let mut d = reduce_into(rhs.shape(), out_shape, &sb, &sa, |o, _| -g[o] * y[o]);
            d.iter_mut().zip(b).for_each(|(d, &bv)| *d /= bv);
            d
        }
    });
    vec![da, db]
}

/// Sum `term(o, other_index)` over the output into an operand of `shape`
/// whose broadcast strides are `own`; `other` are the other operand's.
fn reduce_into<F: Float>(
    shape: &[usize],
    out_shape: &[usize],
    own: &[usize],
    other: &[usize],
    term: impl Fn(usize, usize) -> F,
) -> Vec<F> {
    let mut acc = vec![F::zero(); numel(shape)];
    for_each_row(out_shape, own, other, |o, i, j, row| {
        if row.step_a == 1 {
            for (k, d) in acc[i..i + row.len].iter_mut().enumerate() {
                *d += term(o + k, j + k * row.step_b);
            }
        } else {
            let mut s = F::zero();
            for k in 0..row.len {
                s += term(o + k, j + k * row.step_b);
            }
            acc[i] += s;
        }
    });
    acc
}

fn matmul_backward<F: Float>(lhs: &Tensor<F>, rhs: &Tensor<F>, g: &[F]) -> Vec<Option<Vec<F>>> {
    let (ra, rb) = (lhs.rank(), rhs.rank());
    let (m, k) = (lhs.shape()[ra - 2], lhs.shape()[ra - 1]);
    let n = rhs.shape()[rb - 1];
    let batch = super::shape::broadcast_shape(&lhs.shape()[..ra - 2], &rhs.shape()[..rb - 2])
        .expect("shapes validated in forward");
    let plan = MatmulPlan::new(lhs.shape(), rhs.shape(), &batch);
    let out_batches = numel(&batch);
    let mut da = wants(lhs).then(|| vec![F::zero(); lhs.numel()]);
    let mut db = wants(rhs).then(|| vec![F::zero(); rhs.numel()]);

    if plan.rhs_shared() && plan.lhs_batches == out_batches {
        let rows = out_batches * m;
        if let Some(da) = da.as_mut() {
            // dA = dC · Bᵀ
            gemm(rows, n, k, g, Layout::Normal, rhs.data(), Layout::Transposed, F::zero(), da);
        }
        if let Some(db) = db.as_mut() {
            // dB = Aᵀ · dC
            gemm(k, rows, n, lhs.data(), Layout::Transposed, g, Layout::Normal, F::zero(), db);
        }
        return vec![da, db];
    }
    for (bi, (ia, ib)) in plan.pairs().enumerate() {
        let gc = &g[bi * m * n..(bi + 1) * m * n];
        if let Some(da) = da.as_mut() {
            gemm(
                m,
                n,
                k,
                gc,
                Layout::Normal,
                &rhs.data()[ib * k * n..(ib + 1) * k * n],
                Layout::Transposed,
                F::one(),
                &mut da[ia * m * k..(ia + 1) * m * k],
            );
        }
        if let Some(db) = db.as_mut() {
            gemm(
                k,
                m,
                n,
                &lhs.data()[ia * m * k..(ia + 1) * m * k],
                Layout::Transposed,
                gc,
                Layout::Normal,
                F::one(),
                &mut db[ib * k * n..(ib + 1) * k * n],
            );
        }
    }
    vec![da, db]
}

fn layer_norm_backward<F: Float>(
    input: &Tensor<F>,
    gain: Option<&Tensor<F>>,
    bias: Option<&Tensor<F>>,
    mean: &[F],
    rstd: &[F],
    g: &[F],
) -> Vec<Option<Vec<F>>> {
    let d = *input.shape().last().unwrap();
    let x = input.data();
    let inv_d = F::one() / F::from_f64(d as f64);
    let mut dx = wants(input).then(|| vec![F::zero(); x.len()]);
    let mut dgain = gain.filter(|t| wants(*t)).map(|_| vec![F::zero(); d]);
    let mut dbias = bias.filter(|t| wants(*t)).map(|_| vec![F::zero(); d]);
    let mut xhat = vec![F::zero(); d];
    let mut dxhat = vec![F::zero(); d];
    for (r, (&mu, &rs)) in mean.iter().zip(rstd).enumerate() {
        let row = &x[r * d..(r + 1) * d];
        let gr = &g[r * d..(r + 1) * d];
        for j in 0..d {
            xhat[j] = (row[j] - mu) * rs;
            dxhat[j] = match gain {
                Some(gn) => gr[j] * gn.data()[j],
                None => gr[j],
            };
        }
        if let Some(dg) = dgain.as_mut() {
            for j in 0..d {
                dg[j] += gr[j] * xhat[j];
            }
        }
        if let Some(dbv) = dbias.as_mut() {
            for j in 0..d {
                dbv[j] += gr[j];
            }
        }
        if let Some(dx) = dx.as_mut() {
            let m1: F = dxhat.iter().copied().sum::<F>() * inv_d;
            let m2: F = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<F>() * inv_d;
            for j in 0..d {
                dx[r * d + j] = rs * (dxhat[j] - m1 - xhat[j] * m2);
            }
        }
    }
    let mut out = vec![dx];
    if gain.is_some() {
        out.push(dgain);
    }
    if bias.is_some() {
        out.push(dbias);
    }
    out
}
