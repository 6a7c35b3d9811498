//! Forward kernels and their hand-derived backward kernels.
//!
//! Naming: `foo` computes the forward value, `foo_backward` maps the upstream
//! gradient of `foo`'s output to gradients of its inputs.

use super::{Scalar, Tensor};
use crate::error::{dim_err, Result};

// ---------------------------------------------------------------------------
// inner loops

#[inline]
fn axpy<T: Scalar>(out: &mut [T], a: T, x: &[T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        s += x * y;
    }
    acc.iter().copied().sum::<T>() + s
}

const K_BLOCK: usize = 128;

/// `c[m×n] += a[m×k] · b[k×n]`
fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for p0 in (0..k).step_by(K_BLOCK) {
        let p1 = (p0 + K_BLOCK).min(k);
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            let arow = &a[i * k..(i + 1) * k];
            for p in p0..p1 {
                axpy(crow, arow[p], &b[p * n..(p + 1) * n]);
            }
        }
    }
}

/// `c[m×n] += aᵀ · b` with `a[k×m]`, `b[k×n]`.
fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        let arow = &a[p * m..(p + 1) * m];
        for (i, &aip) in arow.iter().enumerate() {
            axpy(&mut c[i * n..(i + 1) * n], aip, brow);
        }
    }
}

fn transpose_raw<T: Scalar>(rows: usize, cols: usize, a: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn dims2<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(dim_err!("{what}: expected a matrix, got shape {:?}", t.shape())),
    }
}

fn dims3<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(dim_err!("{what}: expected rank 3, got shape {:?}", t.shape())),
    }
}

// ---------------------------------------------------------------------------
// matrix products

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = dims2(a, "transpose")?;
    Tensor::new(&[c, r], transpose_raw(r, c, a.data()))
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = dims2(a, "matmul lhs")?;
    let (k2, n) = dims2(b, "matmul rhs")?;
    if k != k2 {
        return Err(dim_err!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let mut c = vec![T::zero(); m * n];
    gemm_nn(m, k, n, a.data(), b.data(), &mut c);
    Tensor::new(&[m, n], c)
}

/// `dA = dC·Bᵀ`, `dB = Aᵀ·dC`.
pub fn matmul_backward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let bt = transpose_raw(k, n, b.data());
    let mut ga = vec![T::zero(); m * k];
    gemm_nn(m, n, k, g.data(), &bt, &mut ga);
    let mut gb = vec![T::zero(); k * n];
    gemm_tn(k, m, n, a.data(), g.data(), &mut gb);
    (
        Tensor::new(&[m, k], ga).expect("shape"),
        Tensor::new(&[k, n], gb).expect("shape"),
    )
}

/// `a · bᵀ` for `a[m×k]`, `b[n×k]`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = dims2(a, "matmul_nt lhs")?;
    let (n, k2) = dims2(b, "matmul_nt rhs")?;
    if k != k2 {
        return Err(dim_err!(
            "matmul_nt inner dimensions differ: {:?} x {:?}ᵀ",
            a.shape(),
            b.shape()
        ));
    }
    let bt = transpose_raw(n, k, b.data());
    let mut c = vec![T::zero(); m * n];
    gemm_nn(m, k, n, a.data(), &bt, &mut c);
    Tensor::new(&[m, n], c)
}

/// For `c = a·bᵀ`: `dA = dC·B`, `dB = dCᵀ·A`.
pub fn matmul_nt_backward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[0];
    let mut ga = vec![T::zero(); m * k];
    gemm_nn(m, n, k, g.data(), b.data(), &mut ga);
    let mut gb = vec![T::zero(); n * k];
    gemm_tn(n, m, k, g.data(), a.data(), &mut gb);
    (
        Tensor::new(&[m, k], ga).expect("shape"),
        Tensor::new(&[n, k], gb).expect("shape"),
    )
}

/// Adds a bias vector to every row of `x[n×d]`.
pub fn add_row_bias<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, d) = dims2(x, "add_row_bias")?;
    if bias.len() != d {
        return Err(dim_err!("bias of length {} does not match row width {d}", bias.len()));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(d) {
        for (o, &b) in row.iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    Ok(out)
}

/// Column sums of `g[n×d]`.
pub fn sum_rows<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let d = g.last_dim();
    let mut out = vec![T::zero(); d];
    for row in g.data().chunks_exact(d) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::new(&[d], out).expect("shape")
}

// ---------------------------------------------------------------------------
// softmax

/// Softmax over the last dimension. `-inf` inputs map to exactly 0 and a
/// slice that is entirely `-inf` maps to all zeros.
pub fn softmax_lastdim<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let d = x.last_dim();
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(d) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        if m == T::neg_infinity() {
            row.fill(T::zero());
            continue;
        }
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

/// `dx = y ⊙ (g − ⟨g, y⟩)` per slice.
pub fn softmax_lastdim_backward<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let d = y.last_dim();
    let mut out = g.clone();
    for (orow, yrow) in out.data_mut().chunks_exact_mut(d).zip(y.data().chunks_exact(d)) {
        let inner = dot(orow, yrow);
        for (o, &yv) in orow.iter_mut().zip(yrow) {
            *o = yv * (*o - inner);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// convolution

/// Output side length of a convolution along one axis, if positive.
pub fn conv_out_len(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Range of output positions `o` for which `o*stride + tap - pad` lands in
/// `[0, len)`; returns `(o_lo, o_hi_exclusive)`.
#[inline]
fn valid_out_range(len: usize, out_len: usize, tap: usize, stride: usize, pad: usize) -> (usize, usize) {
    // need o*stride + tap >= pad and o*stride + tap - pad <= len - 1
    let lo = if tap >= pad { 0 } else { (pad - tap).div_ceil(stride) };
    let hi = if len + pad < tap + 1 {
        0
    } else {
        ((len - 1 + pad - tap) / stride + 1).min(out_len)
    };
    (lo, hi.max(lo))
}

struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

fn conv_geom<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, stride: usize, pad: usize) -> Result<ConvGeom> {
    let (c_in, h, w) = dims3(x, "conv2d input")?;
    let (c_out, c_in2, k, k2) = match *kernel.shape() {
        [a, b, c, d] => (a, b, c, d),
        _ => return Err(dim_err!("conv2d kernel must be rank 4, got {:?}", kernel.shape())),
    };
    if c_in != c_in2 || k != k2 {
        return Err(dim_err!(
            "conv2d kernel {:?} incompatible with input {:?}",
            kernel.shape(),
            x.shape()
        ));
    }
    let ho = conv_out_len(h, k, stride, pad);
    let wo = conv_out_len(w, k, stride, pad);
    match (ho, wo) {
        (Some(ho), Some(wo)) if ho > 0 && wo > 0 => Ok(ConvGeom {
            c_in,
            h,
            w,
            c_out,
            k,
            ho,
            wo,
            stride,
            pad,
        }),
        _ => Err(dim_err!(
            "conv2d output is empty for input {:?}, kernel {k}, stride {stride}, pad {pad}",
            x.shape()
        )),
    }
}

/// Direct 2-D cross-correlation of `x[C_in×H×W]` with `kernel[C_out×C_in×k×k]`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let gm = conv_geom(x, kernel, stride, pad)?;
    if let Some(b) = bias {
        if b.len() != gm.c_out {
            return Err(dim_err!("conv2d bias length {} != {}", b.len(), gm.c_out));
        }
    }
    let ConvGeom {
        c_in,
        h,
        w,
        c_out,
        k,
        ho,
        wo,
        stride,
        pad,
    } = gm;
    let xd = x.data();
    let kd = kernel.data();
    let mut out = vec![T::zero(); c_out * ho * wo];
    let x_ranges: Vec<(usize, usize)> = (0..k).map(|kx| valid_out_range(w, wo, kx, stride, pad)).collect();
    for oy in 0..ho {
        for co in 0..c_out {
            let row = &mut out[(co * ho + oy) * wo..(co * ho + oy + 1) * wo];
            if let Some(b) = bias {
                row.fill(b.data()[co]);
            }
            for ci in 0..c_in {
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = &xd[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    let wbase = ((co * c_in + ci) * k + ky) * k;
                    if stride == 1 && k == 3 {
                        conv_row3(row, xrow, &kd[wbase..wbase + 3], &x_ranges, pad);
                        continue;
                    }
                    for kx in 0..k {
                        let wv = kd[wbase + kx];
                        let (lo, hi) = x_ranges[kx];
                        if lo >= hi {
                            continue;
                        }
                        let ix0 = lo * stride + kx - pad;
                        if stride == 1 {
                            axpy(&mut row[lo..hi], wv, &xrow[ix0..ix0 + (hi - lo)]);
                        } else {
                            for (j, o) in row[lo..hi].iter_mut().enumerate() {
                                *o += wv * xrow[ix0 + j * stride];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[c_out, ho, wo], out)
}

/// One kernel row of a stride-1 3-tap correlation: the three taps share a
/// single pass over the interior, edges fall back to per-tap updates.
#[inline]
fn conv_row3<T: Scalar>(row: &mut [T], xrow: &[T], wk: &[T], ranges: &[(usize, usize)], pad: usize) {
    let lo = ranges.iter().map(|r| r.0).max().unwrap_or(0);
    let hi = ranges.iter().map(|r| r.1).min().unwrap_or(0);
    let (w0, w1, w2) = (wk[0], wk[1], wk[2]);
    if lo < hi {
        let base = lo - pad;
        let xs = &xrow[base..base + (hi - lo) + 2];
        for (j, o) in row[lo..hi].iter_mut().enumerate() {
            *o += w0 * xs[j] + w1 * xs[j + 1] + w2 * xs[j + 2];
        }
    }
    for (kx, &(tlo, thi)) in ranges.iter().enumerate() {
        let (a, b) = if lo < hi { (tlo, lo.min(thi)) } else { (tlo, thi) };
        for j in a..b {
            row[j] += wk[kx] * xrow[j + kx - pad];
        }
        if lo < hi {
            for j in hi.max(tlo)..thi {
                row[j] += wk[kx] * xrow[j + kx - pad];
            }
        }
    }
}

/// Gradients of [`conv2d`] with respect to input, kernel and (if present) bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    g: &Tensor<T>,
    stride: usize,
    pad: usize,
    with_bias: bool,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let gm = conv_geom(x, kernel, stride, pad)?;
    let ConvGeom {
        c_in,
        h,
        w,
        c_out,
        k,
        ho,
        wo,
        stride,
        pad,
    } = gm;
    if g.shape() != [c_out, ho, wo] {
        return Err(dim_err!("conv2d upstream gradient has shape {:?}", g.shape()));
    }
    let xd = x.data();
    let kd = kernel.data();
    let gd = g.data();
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); kernel.len()];
    let x_ranges: Vec<(usize, usize)> = (0..k).map(|kx| valid_out_range(w, wo, kx, stride, pad)).collect();
    for co in 0..c_out {
        for oy in 0..ho {
            let grow = &gd[(co * ho + oy) * wo..(co * ho + oy + 1) * wo];
            for ci in 0..c_in {
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xoff = (ci * h + iy as usize) * w;
                    let wbase = ((co * c_in + ci) * k + ky) * k;
                    for kx in 0..k {
                        let (lo, hi) = x_ranges[kx];
                        if lo >= hi {
                            continue;
                        }
                        let ix0 = lo * stride + kx - pad;
                        let wv = kd[wbase + kx];
                        if stride == 1 {
                            let n = hi - lo;
                            gw[wbase + kx] += dot(&grow[lo..hi], &xd[xoff + ix0..xoff + ix0 + n]);
                            axpy(&mut gx[xoff + ix0..xoff + ix0 + n], wv, &grow[lo..hi]);
                        } else {
                            let mut s = T::zero();
                            for (j, &gv) in grow[lo..hi].iter().enumerate() {
                                let ix = xoff + ix0 + j * stride;
                                s += gv * xd[ix];
                                gx[ix] += wv * gv;
                            }
                            gw[wbase + kx] += s;
                        }
                    }
                }
            }
        }
    }
    let gb = with_bias.then(|| {
        let plane = ho * wo;
        let sums = (0..c_out)
            .map(|co| gd[co * plane..(co + 1) * plane].iter().copied().sum())
            .collect();
        Tensor::new(&[c_out], sums).expect("shape")
    });
    Ok((Tensor::new(x.shape(), gx)?, Tensor::new(kernel.shape(), gw)?, gb))
}

// ---------------------------------------------------------------------------
// pointwise

/// `x·σ(x)`, the smooth rectifier used throughout the model.
pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * sigmoid_scalar(v))
}

pub fn silu_backward<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let mut out = g.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
        let s = sigmoid_scalar(v);
        *o *= s * (T::one() + v * (T::one() - s));
    }
    out
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let mut out = g.clone();
    for (o, &s) in out.data_mut().iter_mut().zip(y.data()) {
        *o *= s * (T::one() - s);
    }
    out
}

/// `max(ln x, floor)`; non-positive inputs map to `floor`.
pub fn log_clamped<T: Scalar>(x: &Tensor<T>, floor: T) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v.ln().max(floor) } else { floor })
}

pub fn log_clamped_backward<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>, floor: T) -> Tensor<T> {
    let mut out = g.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
        *o = if v > T::zero() && v.ln() > floor {
            *o / v
        } else {
            T::zero()
        };
    }
    out
}

// ---------------------------------------------------------------------------
// layout

/// `[H×W×C]` to `[C×H×W]`.
pub fn hwc_to_chw<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = dims3(x, "hwc_to_chw")?;
    let xd = x.data();
    let mut out = vec![T::zero(); x.len()];
    for y in 0..h {
        for xx in 0..w {
            let src = (y * w + xx) * c;
            for ch in 0..c {
                out[(ch * h + y) * w + xx] = xd[src + ch];
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// `[C×H×W]` to `[H×W×C]`.
pub fn chw_to_hwc<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = dims3(x, "chw_to_hwc")?;
    let xd = x.data();
    let mut out = vec![T::zero(); x.len()];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out[(y * w + xx) * c + ch] = xd[(ch * h + y) * w + xx];
            }
        }
    }
    Tensor::new(&[h, w, c], out)
}

/// Concatenates along the first axis (channel concat for `[C×H×W]`).
pub fn concat_first<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != b.rank() || a.shape()[1..] != b.shape()[1..] {
        return Err(dim_err!(
            "cannot concatenate {:?} and {:?} along axis 0",
            a.shape(),
            b.shape()
        ));
    }
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(&shape, data)
}

/// Splits a tensor along axis 0 into leading `first` rows and the rest.
pub fn split_first<T: Scalar>(x: &Tensor<T>, first: usize) -> (Tensor<T>, Tensor<T>) {
    let inner: usize = x.shape()[1..].iter().product();
    let mut sa = x.shape().to_vec();
    sa[0] = first;
    let mut sb = x.shape().to_vec();
    sb[0] -= first;
    let (da, db) = x.data().split_at(first * inner);
    (
        Tensor::new(&sa, da.to_vec()).expect("shape"),
        Tensor::new(&sb, db.to_vec()).expect("shape"),
    )
}

/// Columns `[start, start+len)` of a matrix.
pub fn slice_cols<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (n, d) = dims2(x, "slice_cols")?;
    if start + len > d || len == 0 {
        return Err(dim_err!("column slice {start}..{} out of width {d}", start + len));
    }
    let mut out = Vec::with_capacity(n * len);
    for row in x.data().chunks_exact(d) {
        out.extend_from_slice(&row[start..start + len]);
    }
    Tensor::new(&[n, len], out)
}

/// Horizontal concatenation of matrices with equal row counts.
pub fn concat_cols<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let n = parts.first().ok_or_else(|| dim_err!("concat_cols of nothing"))?.shape()[0];
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (r, c) = dims2(p, "concat_cols")?;
        if r != n {
            return Err(dim_err!("concat_cols row counts differ: {r} vs {n}"));
        }
        widths.push(c);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(n * total);
    for i in 0..n {
        for (p, &c) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data()[i * c..(i + 1) * c]);
        }
    }
    Tensor::new(&[n, total], out)
}

/// Token index and in-token feature index for pixel `(y, x, ch)` under
/// non-overlapping `ph×pw` patches of a `[H×W×C]` grid with `wg` patches per
/// row. Tokens are row-major over the patch grid; features are ordered
/// `(py, px, ch)`.
#[inline]
pub fn patch_index(y: usize, x: usize, ch: usize, c: usize, ph: usize, pw: usize, wg: usize) -> (usize, usize) {
    let token = (y / ph) * wg + x / pw;
    let feat = ((y % ph) * pw + x % pw) * c + ch;
    (token, feat)
}

/// `[H×W×C]` into `[N × ph·pw·C]` non-overlapping patch vectors.
pub fn patchify<T: Scalar>(x: &Tensor<T>, ph: usize, pw: usize) -> Result<Tensor<T>> {
    let (h, w, c) = dims3(x, "patchify")?;
    if ph == 0 || pw == 0 || h % ph != 0 || w % pw != 0 {
        return Err(dim_err!("grid {h}x{w} is not divisible into {ph}x{pw} patches"));
    }
    let (hg, wg) = (h / ph, w / pw);
    let d = ph * pw * c;
    let mut out = vec![T::zero(); x.len()];
    let xd = x.data();
    for y in 0..h {
        for xx in 0..w {
            let (t, f) = patch_index(y, xx, 0, c, ph, pw, wg);
            let src = (y * w + xx) * c;
            out[t * d + f..t * d + f + c].copy_from_slice(&xd[src..src + c]);
        }
    }
    Tensor::new(&[hg * wg, d], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(
    tokens: &Tensor<T>,
    h: usize,
    w: usize,
    c: usize,
    ph: usize,
    pw: usize,
) -> Result<Tensor<T>> {
    let (n, d) = dims2(tokens, "unpatchify")?;
    if h % ph != 0 || w % pw != 0 || n != (h / ph) * (w / pw) || d != ph * pw * c {
        return Err(dim_err!(
            "tokens {:?} do not tile a {h}x{w}x{c} grid with {ph}x{pw} patches",
            tokens.shape()
        ));
    }
    let wg = w / pw;
    let td = tokens.data();
    let mut out = vec![T::zero(); tokens.len()];
    for y in 0..h {
        for xx in 0..w {
            let (t, f) = patch_index(y, xx, 0, c, ph, pw, wg);
            let dst = (y * w + xx) * c;
            out[dst..dst + c].copy_from_slice(&td[t * d + f..t * d + f + c]);
        }
    }
    Tensor::new(&[h, w, c], out)
}

/// Adds a per-patch embedding `pe[Hg×Wg×C]` to every pixel of its patch.
pub fn add_patch_broadcast<T: Scalar>(x: &Tensor<T>, pe: &Tensor<T>, ph: usize, pw: usize) -> Result<Tensor<T>> {
    let (h, w, c) = dims3(x, "add_patch_broadcast")?;
    let (hg, wg, c2) = dims3(pe, "position embedding")?;
    if c != c2 || hg * ph != h || wg * pw != w {
        return Err(dim_err!(
            "position embedding {:?} does not match features {:?} with {ph}x{pw} patches",
            pe.shape(),
            x.shape()
        ));
    }
    let mut out = x.clone();
    let od = out.data_mut();
    for y in 0..h {
        for xx in 0..w {
            let p = ((y / ph) * wg + xx / pw) * c;
            let dst = (y * w + xx) * c;
            for ch in 0..c {
                od[dst + ch] += pe.data()[p + ch];
            }
        }
    }
    Ok(out)
}

/// Sums a `[H×W×C]` gradient over each patch, giving `[Hg×Wg×C]`.
pub fn patch_sum<T: Scalar>(g: &Tensor<T>, ph: usize, pw: usize) -> Tensor<T> {
    let (h, w, c) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let (hg, wg) = (h / ph, w / pw);
    let mut out = vec![T::zero(); hg * wg * c];
    for y in 0..h {
        for xx in 0..w {
            let p = ((y / ph) * wg + xx / pw) * c;
            let src = (y * w + xx) * c;
            for ch in 0..c {
                out[p + ch] += g.data()[src + ch];
            }
        }
    }
    Tensor::new(&[hg, wg, c], out).expect("shape")
}

/// Mean of a `[H×W]` map over each `ph×pw` patch, flattened row-major to
/// `[Hg·Wg]`.
pub fn patch_mean<T: Scalar>(s: &Tensor<T>, ph: usize, pw: usize) -> Result<Tensor<T>> {
    let (h, w) = dims2(s, "patch_mean")?;
    if h % ph != 0 || w % pw != 0 {
        return Err(dim_err!("grid {h}x{w} is not divisible into {ph}x{pw} patches"));
    }
    let (hg, wg) = (h / ph, w / pw);
    let mut out = vec![T::zero(); hg * wg];
    for y in 0..h {
        for x in 0..w {
            out[(y / ph) * wg + x / pw] += s.data()[y * w + x];
        }
    }
    let inv = T::one() / T::of((ph * pw) as f64);
    out.iter_mut().for_each(|v| *v *= inv);
    Tensor::new(&[hg * wg], out)
}

pub fn patch_mean_backward<T: Scalar>(g: &Tensor<T>, h: usize, w: usize, ph: usize, pw: usize) -> Tensor<T> {
    let wg = w / pw;
    let inv = T::one() / T::of((ph * pw) as f64);
    Tensor::from_fn(&[h, w], |i| g.data()[(i / w / ph) * wg + (i % w) / pw] * inv)
}

/// Repeats a vector `v[M]` as `n` identical rows.
pub fn broadcast_rows<T: Scalar>(v: &Tensor<T>, n: usize) -> Tensor<T> {
    let m = v.len();
    let mut out = Vec::with_capacity(n * m);
    for _ in 0..n {
        out.extend_from_slice(v.data());
    }
    Tensor::new(&[n, m], out).expect("shape")
}

// ---------------------------------------------------------------------------
// bilinear warp

/// One of the four bilinear neighbours of a sample point, with its weight and
/// the derivatives of that weight along each sampling axis.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Tap<T> {
    pub row: usize,
    pub col: usize,
    pub weight: T,
    pub d_row: T,
    pub d_col: T,
}

/// The in-bounds bilinear taps for continuous position `(y, x)` on an
/// `h×w` grid. Positions outside the grid lose the taps that fall outside,
/// matching the truncated kernel `max(0, 1 − |·|)`.
#[inline]
pub(crate) fn bilinear_taps<T: Scalar>(y: T, x: T, h: usize, w: usize) -> impl Iterator<Item = Tap<T>> {
    let valid = y.is_finite() && x.is_finite();
    let (y0, x0) = if valid {
        (y.floor(), x.floor())
    } else {
        (T::zero(), T::zero())
    };
    let (fy, fx) = (y - y0, x - x0);
    let one = T::one();
    let rows = [(y0, one - fy, -one), (y0 + one, fy, one)];
    let cols = [(x0, one - fx, -one), (x0 + one, fx, one)];
    let (hf, wf) = (T::of(h as f64), T::of(w as f64));
    rows.into_iter()
        .flat_map(move |r| cols.into_iter().map(move |c| (r, c)))
        .filter_map(move |((ry, wy, dy), (cx, wx, dx))| {
            if !valid || ry < T::zero() || cx < T::zero() || ry >= hf || cx >= wf {
                return None;
            }
            Some(Tap {
                row: ry.to_usize().expect("in range"),
                col: cx.to_usize().expect("in range"),
                weight: wy * wx,
                d_row: dy * wx,
                d_col: wy * dx,
            })
        })
}

fn check_warp_shapes<T: Scalar>(f: &Tensor<T>, delta: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (h, w, c) = dims3(f, "warp features")?;
    if delta.shape() != [h, w, 2] {
        return Err(dim_err!(
            "offset field {:?} does not match features {:?}",
            delta.shape(),
            f.shape()
        ));
    }
    Ok((h, w, c))
}

/// Bilinear warp of `f[H×W×C]` by per-cell offsets `delta[H×W×2]`:
/// `out(h,w) = Σ f(h',w')·max(0,1−|h+Δ₁−h'|)·max(0,1−|w+Δ₂−w'|)`, evaluated
/// as a four-neighbour gather.
pub fn warp<T: Scalar>(f: &Tensor<T>, delta: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = check_warp_shapes(f, delta)?;
    let fd = f.data();
    let dd = delta.data();
    let mut out = vec![T::zero(); f.len()];
    for y in 0..h {
        for x in 0..w {
            let cell = y * w + x;
            let sy = T::of(y as f64) + dd[cell * 2];
            let sx = T::of(x as f64) + dd[cell * 2 + 1];
            let orow = &mut out[cell * c..(cell + 1) * c];
            for tap in bilinear_taps(sy, sx, h, w) {
                let src = (tap.row * w + tap.col) * c;
                axpy(orow, tap.weight, &fd[src..src + c]);
            }
        }
    }
    Tensor::new(f.shape(), out)
}

/// Gradients of [`warp`] with respect to the features and the offsets.
pub fn warp_backward<T: Scalar>(f: &Tensor<T>, delta: &Tensor<T>, g: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, w, c) = check_warp_shapes(f, delta)?;
    let fd = f.data();
    let dd = delta.data();
    let gd = g.data();
    let mut gf = vec![T::zero(); f.len()];
    let mut gdelta = vec![T::zero(); delta.len()];
    for y in 0..h {
        for x in 0..w {
            let cell = y * w + x;
            let sy = T::of(y as f64) + dd[cell * 2];
            let sx = T::of(x as f64) + dd[cell * 2 + 1];
            let grow = &gd[cell * c..(cell + 1) * c];
            for tap in bilinear_taps(sy, sx, h, w) {
                let src = (tap.row * w + tap.col) * c;
                axpy(&mut gf[src..src + c], tap.weight, grow);
                let proj = dot(grow, &fd[src..src + c]);
                gdelta[cell * 2] += tap.d_row * proj;
                gdelta[cell * 2 + 1] += tap.d_col * proj;
            }
        }
    }
    Ok((Tensor::new(f.shape(), gf)?, Tensor::new(delta.shape(), gdelta)?))
}

// ---------------------------------------------------------------------------
// losses

/// Weighted softmax cross-entropy over the class axis of `logits[K×H×W]`.
/// Returns the loss (weighted mean over pixels) and its gradient.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[u8],
    class_weights: &[T],
) -> Result<(T, Tensor<T>)> {
    let (k, h, w) = dims3(logits, "cross entropy logits")?;
    let plane = h * w;
    if targets.len() != plane || class_weights.len() != k {
        return Err(dim_err!(
            "cross entropy: {} targets / {} weights for logits {:?}",
            targets.len(),
            class_weights.len(),
            logits.shape()
        ));
    }
    let ld = logits.data();
    let mut grad = vec![T::zero(); logits.len()];
    let mut loss = T::zero();
    let mut total_w = T::zero();
    let mut probs = vec![T::zero(); k];
    for (i, &t) in targets.iter().enumerate() {
        let t = t as usize;
        if t >= k {
            return Err(dim_err!("target class {t} out of range for {k} classes"));
        }
        let m = (0..k).map(|c| ld[c * plane + i]).fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for c in 0..k {
            probs[c] = (ld[c * plane + i] - m).exp();
            s += probs[c];
        }
        let wt = class_weights[t];
        loss += wt * (s.ln() + m - ld[t * plane + i]);
        total_w += wt;
        for c in 0..k {
            let p = probs[c] / s;
            let onehot = if c == t { T::one() } else { T::zero() };
            grad[c * plane + i] = wt * (p - onehot);
        }
    }
    if total_w <= T::zero() {
        return Ok((T::zero(), Tensor::zeros(logits.shape())));
    }
    let inv = T::one() / total_w;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((loss * inv, Tensor::new(logits.shape(), grad)?))
}

/// Mean binary cross-entropy of `logits` against soft targets in `[0, 1]`.
pub fn bce_with_logits<T: Scalar>(logits: &Tensor<T>, targets: &[T]) -> Result<(T, Tensor<T>)> {
    if targets.len() != logits.len() {
        return Err(dim_err!("bce: {} targets for {} logits", targets.len(), logits.len()));
    }
    let n = T::of(logits.len() as f64);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.data().iter().zip(targets) {
        let softplus = z.max(T::zero()) + (-z.abs()).exp().ln_1p();
        loss += softplus - y * z;
        grad.push((sigmoid_scalar(z) - y) / n);
    }
    Ok((loss / n, Tensor::new(logits.shape(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t64(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar_product() {
        let i2 = t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&i2, &m).unwrap(), m);
        let r = matmul(&t64(&[1, 2], &[1.0, 2.0]), &t64(&[2, 1], &[3.0, 4.0])).unwrap();
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::<f32>::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let a = Tensor::<f64>::from_fn(&[3, 4], |i| (i as f64 * 0.37).sin());
        let b = Tensor::<f64>::from_fn(&[5, 4], |i| (i as f64 * 0.11).cos());
        let direct = matmul(&a, &transpose(&b).unwrap()).unwrap();
        let nt = matmul_nt(&a, &b).unwrap();
        for (x, y) in direct.data().iter().zip(nt.data()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_conventions() {
        let s = softmax_lastdim(&t64(&[3], &[0.0, 0.0, 0.0]));
        for v in s.data() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let s = softmax_lastdim(&t64(&[2], &[f64::NEG_INFINITY, 0.0]));
        assert_eq!(s.data(), &[0.0, 1.0]);
        let s = softmax_lastdim(&t64(&[2, 2], &[f64::NEG_INFINITY; 4]));
        assert_eq!(s.data(), &[0.0; 4]);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::<f64>::from_fn(&[1, 4, 5], |i| i as f64);
        let k = Tensor::ones(&[1, 1, 1, 1]);
        assert_eq!(conv2d(&x, &k, None, 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_rejects_empty_output() {
        let x = Tensor::<f32>::zeros(&[1, 2, 2]);
        let k = Tensor::ones(&[1, 1, 3, 3]);
        assert!(conv2d(&x, &k, None, 1, 0).is_err());
    }

    #[test]
    fn conv_strided_output_size() {
        let x = Tensor::<f32>::ones(&[2, 7, 9]);
        let k = Tensor::ones(&[3, 2, 3, 3]);
        let y = conv2d(&x, &k, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[3, 4, 5]);
        // interior taps see the full 3x3x2 window
        assert_eq!(y.at(&[0, 1, 1]), 18.0);
        // corner sees a 2x2x2 window
        assert_eq!(y.at(&[0, 0, 0]), 8.0);
    }

    #[test]
    fn patchify_roundtrip() {
        let x = Tensor::<f32>::from_fn(&[10, 20, 3], |i| i as f32);
        let p = patchify(&x, 5, 5).unwrap();
        assert_eq!(p.shape(), &[8, 75]);
        assert_eq!(unpatchify(&p, 10, 20, 3, 5, 5).unwrap(), x);
        assert!(patchify(&x, 3, 5).is_err());
    }

    #[test]
    fn warp_zero_offset_is_identity() {
        let f = Tensor::<f64>::from_fn(&[4, 5, 3], |i| (i as f64).sqrt());
        let d = Tensor::zeros(&[4, 5, 2]);
        assert_eq!(warp(&f, &d).unwrap(), f);
    }

    #[test]
    fn warp_half_cell_averages_neighbours() {
        // horizontal ramp, offset half a column
        let f = Tensor::<f64>::from_fn(&[2, 5, 1], |i| (i % 5) as f64 * 2.0);
        let d = Tensor::from_fn(&[2, 5, 2], |i| if i % 2 == 1 { 0.5 } else { 0.0 });
        let out = warp(&f, &d).unwrap();
        for x in 0..4 {
            let expect = (f.at(&[0, x, 0]) + f.at(&[0, x + 1, 0])) / 2.0;
            assert_eq!(out.at(&[0, x, 0]), expect);
        }
        // last column: right neighbour is outside the grid
        assert_eq!(out.at(&[0, 4, 0]), 0.5 * f.at(&[0, 4, 0]));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::<f64>::zeros(&[4, 2, 3]);
        let (loss, grad) = softmax_cross_entropy(&logits, &[0, 1, 2, 3, 0, 1], &[1.0; 4]).unwrap();
        assert_abs_diff_eq!(loss, 4f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(grad.sum(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn bce_at_zero_logit() {
        let (loss, grad) = bce_with_logits(&Tensor::<f64>::zeros(&[2]), &[1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(loss, 2f64.ln(), epsilon = 1e-12);
        assert_eq!(grad.data(), &[-0.25, 0.25]);
    }
}
