//! Value-level kernels. These know nothing about the tape; `ops` wires them
//! into differentiable operations.

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Right-aligned broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
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

/// Strides of `shape` right-aligned into `out_rank` dims, zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 && out_shape[offset + i] != 1 {
            0
        } else {
            acc
        };
        acc *= shape[i];
    }
    strides
}

/// Visits every multi-index of `shape` in row-major order, passing the flat
/// output index and the offsets under each stride set.
fn for_each_offset<const K: usize>(
    shape: &[usize],
    strides: [&[usize]; K],
    mut f: impl FnMut(usize, [usize; K]),
) {
    let total: usize = shape.iter().product();
    if total == 0 {
        return;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut offs = [0usize; K];
    for flat in 0..total {
        f(flat, offs);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            for k in 0..K {
                offs[k] += strides[k][ax];
            }
            if idx[ax] < shape[ax] {
                break;
            }
            for k in 0..K {
                offs[k] -= strides[k][ax] * shape[ax];
            }
            idx[ax] = 0;
        }
    }
}

pub fn binary<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out_shape =
        broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::shape(op, a.shape(), b.shape()))?;
    let n: usize = out_shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    // Fast path: one operand is a trailing block repeated over leading axes.
    if a.len() == n && (b.len() == 1 || out_shape.ends_with(b.shape())) {
        let m = b.len();
        let data = (0..n).map(|i| f(ad[i], bd[i % m])).collect();
        return Ok(Tensor::from_parts(out_shape, data));
    }
    if b.len() == n && (a.len() == 1 || out_shape.ends_with(a.shape())) {
        let m = a.len();
        let data = (0..n).map(|i| f(ad[i % m], bd[i])).collect();
        return Ok(Tensor::from_parts(out_shape, data));
    }
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut data = Vec::with_capacity(n);
    for_each_offset(&out_shape, [&sa, &sb], |_, [oa, ob]| data.push(f(ad[oa], bd[ob])));
    Ok(Tensor::from_parts(out_shape, data))
}

/// Sums `g` down to `shape`, undoing a broadcast.
pub fn sum_to<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let n: usize = shape.iter().product();
    let mut out = vec![T::zero(); n];
    let gd = g.data();
    if g.shape().ends_with(shape) {
        for (i, &v) in gd.iter().enumerate() {
            out[i % n] += v;
        }
    } else {
        let s = broadcast_strides(shape, g.shape());
        for_each_offset(g.shape(), [&s], |flat, [o]| out[o] += gd[flat]);
    }
    Tensor::from_parts(shape.to_vec(), out)
}

/// `out += a · b` for row-major `a: p×q`, `b: q×r`. The accumulation order
/// for each output element is `k = 0..q`, independent of the row index.
#[inline]
pub(crate) fn gemm_acc<T: Scalar>(p: usize, q: usize, r: usize, a: &[T], b: &[T], out: &mut [T]) {
    for i in 0..p {
        let a_row = &a[i * q..(i + 1) * q];
        let out_row = &mut out[i * r..(i + 1) * r];
        let mut k = 0;
        // Four rows of `b` per sweep; each output still accumulates in
        // ascending k, so results match the one-row loop bit for bit.
        while k + 4 <= q {
            let (a0, a1, a2, a3) = (a_row[k], a_row[k + 1], a_row[k + 2], a_row[k + 3]);
            let b0 = &b[k * r..(k + 1) * r];
            let b1 = &b[(k + 1) * r..(k + 2) * r];
            let b2 = &b[(k + 2) * r..(k + 3) * r];
            let b3 = &b[(k + 3) * r..(k + 4) * r];
            for j in 0..r {
                let mut o = out_row[j];
                o += a0 * b0[j];
                o += a1 * b1[j];
                o += a2 * b2[j];
                o += a3 * b3[j];
                out_row[j] = o;
            }
            k += 4;
        }
        for (k, &aik) in a_row.iter().enumerate().skip(k) {
            let b_row = &b[k * r..(k + 1) * r];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
}

/// Batched matrix product with broadcast batch dimensions.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ash, bsh) = (a.shape(), b.shape());
    if ash.len() < 2 || bsh.len() < 2 || ash[ash.len() - 1] != bsh[bsh.len() - 2] {
        return Err(Error::shape("matmul", ash, bsh));
    }
    let (p, q) = (ash[ash.len() - 2], ash[ash.len() - 1]);
    let r = bsh[bsh.len() - 1];
    let (ba, bb) = (&ash[..ash.len() - 2], &bsh[..bsh.len() - 2]);
    let batch = broadcast_shape(ba, bb).ok_or_else(|| Error::shape("matmul", ash, bsh))?;
    let nb: usize = batch.iter().product();
    let mut out = vec![T::zero(); nb * p * r];
    let (ad, bd) = (a.data(), b.data());
    if batch.is_empty() {
        gemm_acc(p, q, r, ad, bd, &mut out);
    } else {
        let sa = broadcast_strides(ba, &batch);
        let sb = broadcast_strides(bb, &batch);
        for_each_offset(&batch, [&sa, &sb], |flat, [oa, ob]| {
            gemm_acc(
                p,
                q,
                r,
                &ad[oa * p * q..(oa + 1) * p * q],
                &bd[ob * q * r..(ob + 1) * q * r],
                &mut out[flat * p * r..(flat + 1) * p * r],
            );
        });
    }
    let mut shape = batch;
    shape.extend([p, r]);
    Ok(Tensor::from_parts(shape, out))
}

/// Swaps the last two axes (materialized).
pub fn transpose<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let rank = t.rank();
    if rank < 2 {
        return Err(Error::shape("transpose", t.shape(), &[]));
    }
    let mut axes: Vec<usize> = (0..rank).collect();
    axes.swap(rank - 1, rank - 2);
    permute(t, &axes)
}

pub fn permute<T: Scalar>(t: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let rank = t.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::shape("permute", t.shape(), axes));
    }
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * t.shape()[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| t.shape()[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let d = t.data();
    let mut out = Vec::with_capacity(t.len());
    for_each_offset(&out_shape, [&strides], |_, [o]| out.push(d[o]));
    Ok(Tensor::from_parts(out_shape, out))
}

/// Splits a shape around `axis` into (outer, axis length, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::Parameter(format!(
            "softmax axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = T::neg_infinity();
            for k in 0..len {
                max = max.max(xd[base + k * inner]);
            }
            let mut sum = T::zero();
            for k in 0..len {
                let e = (xd[base + k * inner] - max).exp();
                out[base + k * inner] = e;
                sum += e;
            }
            for k in 0..len {
                out[base + k * inner] /= sum;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Given softmax output `y` and upstream `g`: `y ⊙ (g − Σ g⊙y)` along `axis`.
pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = axis_split(y.shape(), axis);
    let (yd, gd) = (y.data(), g.data());
    let mut out = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = T::zero();
            for k in 0..len {
                dot += yd[base + k * inner] * gd[base + k * inner];
            }
            for k in 0..len {
                let j = base + k * inner;
                out[j] = yd[j] * (gd[j] - dot);
            }
        }
    }
    Tensor::from_parts(y.shape().to_vec(), out)
}

pub fn sum_axis<T: Scalar>(x: &Tensor<T>, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::Parameter(format!(
            "sum axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for k in 0..len {
            let src = &xd[(o * len + k) * inner..(o * len + k + 1) * inner];
            for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *dst += v;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    if keepdim || shape.len() == 1 {
        shape[axis] = 1;
    } else {
        shape.remove(axis);
    }
    Ok(Tensor::from_parts(shape, out))
}

pub fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Parameter("concat of zero tensors".into()))?;
    if axis >= first.rank() {
        return Err(Error::Parameter(format!("concat axis {axis} out of range")));
    }
    for p in &parts[1..] {
        let ok = p.rank() == first.rank()
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::shape("concat", first.shape(), p.shape()));
        }
    }
    let (outer, _, inner) = axis_split(first.shape(), axis);
    let total_axis: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total_axis * inner);
    for o in 0..outer {
        for p in parts {
            let block = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total_axis;
    Ok(Tensor::from_parts(shape, out))
}

pub fn slice<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() || len == 0 || start + len > x.shape()[axis] {
        return Err(Error::Parameter(format!(
            "slice [{start}, {}) on axis {axis} out of range for shape {:?}",
            start + len,
            x.shape()
        )));
    }
    let (outer, alen, inner) = axis_split(x.shape(), axis);
    let xd = x.data();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * alen + start) * inner;
        out.extend_from_slice(&xd[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, out))
}

/// Embeds `g` into zeros of `full_shape` at `start` along `axis`; adjoint of [`slice`].
pub(crate) fn unslice<T: Scalar>(g: &Tensor<T>, full_shape: &[usize], axis: usize, start: usize) -> Tensor<T> {
    let (outer, alen, inner) = axis_split(full_shape, axis);
    let len = g.shape()[axis];
    let mut out = vec![T::zero(); outer * alen * inner];
    for o in 0..outer {
        let base = (o * alen + start) * inner;
        out[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::from_parts(full_shape.to_vec(), out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through a single `exp`.
#[inline]
fn fast_tanh<T: Scalar>(z: T) -> T {
    let e = (T::lit(-2.0) * z.abs()).exp();
    let t = (T::one() - e) / (T::one() + e);
    if z < T::zero() {
        -t
    } else {
        t
    }
}

/// Tanh-approximated GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    half * x * (T::one() + fast_tanh(inner))
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let t = fast_tanh(inner);
    let d_inner = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * d_inner
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Row-wise layer normalization over the last axis.
/// Returns `(y, xhat, inv_std)` where `inv_std` has one entry per row.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    let (rows, cols) = x.rows_cols();
    if gain.shape() != [cols] || bias.shape() != [cols] {
        return Err(Error::shape("layer_norm", x.shape(), gain.shape()));
    }
    let n = T::from_usize(cols).expect("width fits");
    let (xd, gd, bd) = (x.data(), gain.data(), bias.data());
    let mut y = Vec::with_capacity(x.len());
    let mut xhat = Vec::with_capacity(x.len());
    let mut inv = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &xd[r * cols..(r + 1) * cols];
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = T::one() / (var + eps).sqrt();
        inv.push(is);
        for c in 0..cols {
            let h = (row[c] - mean) * is;
            xhat.push(h);
            y.push(h * gd[c] + bd[c]);
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), y),
        Tensor::from_parts(x.shape().to_vec(), xhat),
        inv,
    ))
}

/// Gradients `(dx, dgain, dbias)` of layer normalization.
pub fn layer_norm_backward<T: Scalar>(
    g: &Tensor<T>,
    xhat: &Tensor<T>,
    inv_std: &[T],
    gain: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (rows, cols) = xhat.rows_cols();
    let n = T::from_usize(cols).expect("width fits");
    let (gd, hd, wd) = (g.data(), xhat.data(), gain.data());
    let mut dx = Vec::with_capacity(xhat.len());
    let mut dgain = vec![T::zero(); cols];
    let mut dbias = vec![T::zero(); cols];
    let mut dh = vec![T::zero(); cols];
    for r in 0..rows {
        let grow = &gd[r * cols..(r + 1) * cols];
        let hrow = &hd[r * cols..(r + 1) * cols];
        let mut mean_dh = T::zero();
        let mut mean_dh_h = T::zero();
        for c in 0..cols {
            dh[c] = grow[c] * wd[c];
            mean_dh += dh[c];
            mean_dh_h += dh[c] * hrow[c];
            dgain[c] += grow[c] * hrow[c];
            dbias[c] += grow[c];
        }
        mean_dh /= n;
        mean_dh_h /= n;
        for c in 0..cols {
            dx.push(inv_std[r] * (dh[c] - mean_dh - hrow[c] * mean_dh_h));
        }
    }
    (
        Tensor::from_parts(xhat.shape().to_vec(), dx),
        Tensor::from_parts(vec![cols], dgain),
        Tensor::from_parts(vec![cols], dbias),
    )
}

/// `Aᵀ·V` for `A: N×M`, `V: N×K`, summing over the points in a canonical
/// order: rows `[A_n, V_n]` sorted lexicographically. Any permutation of the
/// points yields the same order (equal rows contribute equal terms), so the
/// result is bit-identical under permutation.
pub fn point_pool<T: Scalar>(a: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || v.rank() != 2 || a.shape()[0] != v.shape()[0] {
        return Err(Error::shape("point_pool", a.shape(), v.shape()));
    }
    let (n, m, k) = (a.shape()[0], a.shape()[1], v.shape()[1]);
    let (ad, vd) = (a.data(), v.data());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_unstable_by(|&x, &y| {
        let key = |i: usize| ad[i * m..(i + 1) * m].iter().chain(&vd[i * k..(i + 1) * k]);
        key(x)
            .zip(key(y))
            .map(|(p, q)| p.as_f64().total_cmp(&q.as_f64()))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut at = Vec::with_capacity(m * n);
    for j in 0..m {
        at.extend(order.iter().map(|&i| ad[i * m + j]));
    }
    let mut vs = Vec::with_capacity(n * k);
    for &i in &order {
        vs.extend_from_slice(&vd[i * k..(i + 1) * k]);
    }
    let mut out = vec![T::zero(); m * k];
    gemm_acc(m, n, k, &at, &vs, &mut out);
    Ok(Tensor::from_parts(vec![m, k], out))
}
