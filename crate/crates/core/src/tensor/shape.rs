//! Shape arithmetic shared by the tensor ops.

/// Broadcast two shapes by trailing-dimension rules.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Row-major strides of a contiguous shape.
pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Strides of `shape` viewed inside `out_shape`, zero on broadcast axes.
pub(crate) fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let pad = out_shape.len() - shape.len();
    let own = contiguous_strides(shape);
    (0..out_shape.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                own[i - pad]
            }
        })
        .collect()
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Visit every element of `out_shape` with the matching offsets into two
/// broadcast operands.
#[inline]
pub(crate) fn for_each_broadcast2(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    for_each_row(out_shape, sa, sb, |o, ia, ib, row| {
        for j in 0..row.len {
            f(o + j, ia + j * row.step_a, ib + j * row.step_b);
        }
    });
}

/// Innermost-axis run handed to [`for_each_row`] callbacks.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Row {
    pub len: usize,
    pub step_a: usize,
    pub step_b: usize,
}

/// Visit `out_shape` one innermost row at a time: the callback gets the
/// starting offsets of the output and both operands plus the row geometry.
pub(crate) fn for_each_row(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize, Row),
) {
    let rank = out_shape.len();
    if numel(out_shape) == 0 {
        return;
    }
    if rank == 0 {
        f(0, 0, 0, Row { len: 1, step_a: 0, step_b: 0 });
        return;
    }
    let row = Row {
        len: out_shape[rank - 1],
        step_a: sa[rank - 1],
        step_b: sb[rank - 1],
    };
    let mut idx = vec![0usize; rank];
    let mut base_a = 0usize;
    let mut base_b = 0usize;
    let mut o = 0usize;
    loop {
        f(o, base_a, base_b, row);
        o += row.len;
        // advance the odometer over the outer axes
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            idx[axis] += 1;
            base_a += sa[axis];
            base_b += sb[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            base_a -= sa[axis] * out_shape[axis];
            base_b -= sb[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
}
