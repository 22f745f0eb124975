//! Raw array kernels over row-major `f64` buffers.

use crate::value::numel;

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Per-output-dimension strides into a source of shape `from` broadcast to `to`.
fn broadcast_strides(from: &[usize], to: &[usize]) -> Vec<usize> {
    assert!(
        from.len() <= to.len(),
        "cannot broadcast {from:?} to {to:?}"
    );
    let off = to.len() - from.len();
    let mut strides = vec![0; to.len()];
    let mut s = 1;
    for i in (0..from.len()).rev() {
        let f = from[i];
        let t = to[i + off];
        assert!(f == t || f == 1, "cannot broadcast {from:?} to {to:?}");
        if f != 1 {
            strides[i + off] = s;
        }
        s *= f;
    }
    strides
}

/// Visits every output element in row-major order together with its source
/// offset under the given strides.
fn for_each_strided(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let total = numel(shape);
    if total == 0 {
        return;
    }
    let nd = shape.len();
    if nd == 0 {
        f(0, 0);
        return;
    }
    let inner = shape[nd - 1];
    let inner_stride = strides[nd - 1];
    let mut idx = vec![0usize; nd];
    let mut base = 0usize;
    let mut out = 0usize;
    loop {
        let mut src = base;
        for _ in 0..inner {
            f(out, src);
            out += 1;
            src += inner_stride;
        }
        if out >= total {
            break;
        }
        let mut d = nd - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            base += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            base -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn broadcast_to(src: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return src.to_vec();
    }
    let strides = broadcast_strides(from, to);
    let mut out = vec![0.0; numel(to)];
    for_each_strided(to, &strides, |o, s| out[o] = src[s]);
    out
}

/// Sums `src` (shape `from`) down to the broadcast-compatible shape `to`.
pub(crate) fn sum_to(src: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return src.to_vec();
    }
    let strides = broadcast_strides(to, from);
    let mut out = vec![0.0; numel(to)];
    for_each_strided(from, &strides, |o, s| out[s] += src[o]);
    out
}

pub(crate) fn permute(src: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let nd = shape.len();
    let mut src_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        src_strides[i] = src_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let mut out = vec![0.0; src.len()];
    for_each_strided(&out_shape, &strides, |o, s| out[o] = src[s]);
    (out, out_shape)
}

/// (outer, axis extent, inner) split of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

pub(crate) fn sum_axis(src: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for k in 0..n {
            let row = &src[(o * n + k) * inner..(o * n + k + 1) * inner];
            for (d, s) in dst.iter_mut().zip(row) {
                *d += s;
            }
        }
    }
    out
}

pub(crate) fn slice_axis(
    src: &[f64],
    shape: &[usize],
    axis: usize,
    start: usize,
    end: usize,
) -> Vec<f64> {
    let (outer, n, inner) = split_axis(shape, axis);
    let len = end - start;
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        out.extend_from_slice(&src[(o * n + start) * inner..(o * n + end) * inner]);
    }
    out
}

/// Embeds `src` into zeros of extent `full` along `axis`, starting at `start`.
pub(crate) fn pad_axis(
    src: &[f64],
    shape: &[usize],
    axis: usize,
    start: usize,
    full: usize,
) -> Vec<f64> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; outer * full * inner];
    for o in 0..outer {
        out[(o * full + start) * inner..(o * full + start + n) * inner]
            .copy_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
    }
    out
}

pub(crate) fn softmax_last(src: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for (row, dst) in src.chunks(n).zip(out.chunks_mut(n)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            // Fully masked row: no mass anywhere.
            continue;
        }
        let mut total = 0.0;
        for (d, &x) in dst.iter_mut().zip(row) {
            *d = (x - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

/// Batched `op(a) @ op(b)` where each operand is a stack of row-major matrices.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul(
    a: &[f64],
    b: &[f64],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    b_shared: bool,
) -> Vec<f64> {
    let mut c = vec![0.0; batch * m * n];
    // Row-major storage of op(a) is [m,k]; of a itself [m,k] or [k,m].
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    for i in 0..batch {
        let ap = &a[i * m * k..(i + 1) * m * k];
        let bp = if b_shared { b } else { &b[i * k * n..(i + 1) * k * n] };
        let cp = &mut c[i * m * n..(i + 1) * m * n];
        if m == 0 || n == 0 {
            continue;
        }
        // SAFETY: the slices above have exactly the extents described by the
        // dimensions and strides passed to dgemm.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                ap.as_ptr(),
                rsa,
                csa,
                bp.as_ptr(),
                rsb,
                csb,
                0.0,
                cp.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    c
}
