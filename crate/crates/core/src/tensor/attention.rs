//! Fused multi-head self-attention over a packed `qkv` projection.
//!
//! Reads q, k and v for each (batch, head) straight out of the
//! `(B, L, 3D)` buffer with strided GEMMs and writes the `(B, L, D)`
//! token-major result, so no permuted copies are materialized. The softmax
//! probabilities are kept for the backward pass.

use super::ops::Op;
use super::{Float, Result, Tensor, TensorError};

/// Geometry of one fused attention call.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Heads {
    pub batch: usize,
    pub tokens: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl Heads {
    fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Offsets of q, k, v for `(b, h)` inside the packed buffer.
    fn qkv_offsets(&self, b: usize, h: usize) -> [usize; 3] {
        let d = self.width();
        let base = b * self.tokens * 3 * d + h * self.head_dim;
        [base, base + d, base + 2 * d]
    }

    fn out_offset(&self, b: usize, h: usize) -> usize {
        b * self.tokens * self.width() + h * self.head_dim
    }
}

/// `c = alpha · a·b + beta · c` with explicit (row, column) strides.
#[allow(clippy::too_many_arguments)]
fn gemm_strided<F: Float>(
    (m, k, n): (usize, usize, usize),
    alpha: F,
    a: (&[F], usize, isize, isize),
    b: (&[F], usize, isize, isize),
    beta: F,
    c: (&mut [F], usize, isize, isize),
) {
    let last = |off: usize, rows: usize, cols: usize, rs: isize, cs: isize| {
        off + (rows.saturating_sub(1)) * rs as usize + (cols.saturating_sub(1)) * cs as usize
    };
    assert!(last(a.1, m, k, a.2, a.3) < a.0.len());
    assert!(last(b.1, k, n, b.2, b.3) < b.0.len());
    assert!(last(c.1, m, n, c.2, c.3) < c.0.len());
    // SAFETY: the asserts bound the furthest element each operand can reach
    // with non-negative strides.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.0.as_ptr().add(a.1),
            a.2,
            a.3,
            b.0.as_ptr().add(b.1),
            b.2,
            b.3,
            beta,
            c.0.as_mut_ptr().add(c.1),
            c.2,
            c.3,
        );
    }
}

fn softmax_rows<F: Float>(s: &mut [F], n: usize) {
    for row in s.chunks_mut(n) {
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

/// `softmax(q kᵀ / √d_h) v` per head. `qkv` is `(B, L, 3D)` with q, k, v
/// packed along the last axis and heads contiguous inside each; the
/// result is `(B, L, D)`.
pub fn multi_head_attention<F: Float>(qkv: &Tensor<F>, heads: usize) -> Result<Tensor<F>> {
    let bad = |msg: String| TensorError::Invalid { op: "attention", msg };
    if qkv.rank() != 3 || heads == 0 || qkv.shape()[2] % (3 * heads) != 0 {
        return Err(bad(format!("qkv shape {:?} does not split into 3 × {heads} heads", qkv.shape())));
    }
    let g = Heads {
        batch: qkv.shape()[0],
        tokens: qkv.shape()[1],
        heads,
        head_dim: qkv.shape()[2] / (3 * heads),
    };
    let (l, dh, d) = (g.tokens, g.head_dim, g.width());
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    let x = qkv.data();
    let mut probs = vec![F::zero(); g.batch * heads * l * l];
    let mut out = vec![F::zero(); g.batch * l * d];
    let (rs3, rsd, ls) = ((3 * d) as isize, d as isize, l as isize);
    for b in 0..g.batch {
        for h in 0..heads {
            let [q, k, v] = g.qkv_offsets(b, h);
            let p_off = (b * heads + h) * l * l;
            let p = &mut probs[p_off..p_off + l * l];
            // S = scale · q kᵀ
            gemm_strided((l, dh, l), scale, (x, q, rs3, 1), (x, k, 1, rs3), F::zero(), (p, 0, ls, 1));
            softmax_rows(p, l);
            // O = P v
            let o = g.out_offset(b, h);
            gemm_strided((l, l, dh), F::one(), (p, 0, ls, 1), (x, v, rs3, 1), F::zero(), (&mut out, o, rsd, 1));
        }
    }
    let mut shape = qkv.shape().to_vec();
    shape[2] = d;
    Ok(Tensor::from_op(
        shape,
        out,
        Op::Attention {
            qkv: qkv.clone(),
            heads: g,
            probs,
        },
    ))
}

pub(crate) fn attention_backward<F: Float>(qkv: &Tensor<F>, g: Heads, probs: &[F], grad: &[F]) -> Vec<F> {
    let (l, dh, d) = (g.tokens, g.head_dim, g.width());
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    let x = qkv.data();
    let mut dx = vec![F::zero(); x.len()];
    let mut ds = vec![F::zero(); l * l];
    let (rs3, rsd, ls) = ((3 * d) as isize, d as isize, l as isize);
    for b in 0..g.batch {
        for h in 0..g.heads {
            let [q, k, v] = g.qkv_offsets(b, h);
            let o = g.out_offset(b, h);
            let p_off = (b * g.heads + h) * l * l;
            let p = &probs[p_off..p_off + l * l];
            // dV = Pᵀ dO
            gemm_strided((l, l, dh), F::one(), (p, 0, 1, ls), (grad, o, rsd, 1), F::zero(), (&mut dx, v, rs3, 1));
            // dP = dO vᵀ
            gemm_strided((l, dh, l), F::one(), (grad, o, rsd, 1), (x, v, 1, rs3), F::zero(), (&mut ds, 0, ls, 1));
            // dS = P ⊙ (dP − rowsum(dP ⊙ P))
            for (dr, pr) in ds.chunks_mut(l).zip(p.chunks(l)) {
                let dot: F = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                for (dv, &pv) in dr.iter_mut().zip(pr) {
                    *dv = pv * (*dv - dot);
                }
            }
            // dQ = scale · dS k ;  dK = scale · dSᵀ q
            gemm_strided((l, l, dh), scale, (&ds, 0, ls, 1), (x, k, rs3, 1), F::zero(), (&mut dx, q, rs3, 1));
            gemm_strided((l, l, dh), scale, (&ds, 0, 1, ls), (x, q, rs3, 1), F::zero(), (&mut dx, k, rs3, 1));
        }
    }
    dx
}
