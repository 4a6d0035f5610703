//! Tape-free kernels. Every differentiable kernel has a matching `*_backward`
//! that maps the output gradient to input gradients; the tape composes them.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::{order_invariant_sum, total_cmp, Real};
use crate::shape_err;
use crate::tensor::Tensor;

/// Strides of `b` when broadcast against `a_shape`; `None` if incompatible.
/// `b` may have equal rank with singleton dims, or be 1-D matching the last
/// dim of `a` (bias form).
fn broadcast_strides(a_shape: &[usize], b_shape: &[usize]) -> Option<Vec<usize>> {
    let r = a_shape.len();
    let padded: Vec<usize> = if b_shape.len() == r {
        b_shape.to_vec()
    } else if b_shape.len() == 1 && r > 1 {
        let mut p = vec![1; r];
        p[r - 1] = b_shape[0];
        p
    } else {
        return None;
    };
    let mut strides = vec![0; r];
    let mut acc = 1;
    for i in (0..r).rev() {
        if padded[i] == a_shape[i] {
            strides[i] = if padded[i] == 1 { 0 } else { acc };
        } else if padded[i] == 1 {
            strides[i] = 0;
        } else {
            return None;
        }
        acc *= padded[i];
    }
    Some(strides)
}

/// For each flat index of a tensor shaped `shape`, the flat index into the
/// broadcast operand with `strides`.
fn broadcast_offsets(shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(off);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
    out
}

fn broadcast_plan(op: &'static str, a: &[usize], b: &[usize]) -> Result<Option<Vec<usize>>> {
    if a == b {
        return Ok(None);
    }
    let strides = broadcast_strides(a, b)
        .ok_or_else(|| shape_err!(op, "cannot broadcast {:?} onto {:?}", b, a))?;
    Ok(Some(broadcast_offsets(a, &strides)))
}

fn binary<T: Real>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let plan = broadcast_plan(op, a.shape(), b.shape())?;
    let (ad, bd) = (a.data(), b.data());
    let data = match plan {
        None => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        Some(offs) => ad.iter().zip(&offs).map(|(&x, &o)| f(x, bd[o])).collect(),
    };
    Tensor::new(a.shape().to_vec(), data)
}

/// Reduce a gradient shaped like `a` onto the (possibly broadcast) shape of `b`.
fn reduce_to<T: Real>(grad: &[T], a_shape: &[usize], b_shape: &[usize]) -> Tensor<T> {
    let mut out = Tensor::zeros(b_shape);
    match broadcast_plan("reduce", a_shape, b_shape).expect("validated in forward") {
        None => out.data_mut().copy_from_slice(grad),
        Some(offs) => {
            let od = out.data_mut();
            for (g, &o) in grad.iter().zip(&offs) {
                od[o] += *g;
            }
        }
    }
    out
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary("add", a, b, |x, y| x + y)
}

pub fn add_backward<T: Real>(g: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    (g.clone(), reduce_to(g.data(), a.shape(), b.shape()))
}

pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary("mul", a, b, |x, y| x * y)
}

pub fn mul_backward<T: Real>(g: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let plan = broadcast_plan("mul", a.shape(), b.shape()).expect("validated in forward");
    let (gd, ad, bd) = (g.data(), a.data(), b.data());
    let (ga, gb_full): (Vec<T>, Vec<T>) = match &plan {
        None => (
            gd.iter().zip(bd).map(|(&g, &y)| g * y).collect(),
            gd.iter().zip(ad).map(|(&g, &x)| g * x).collect(),
        ),
        Some(offs) => (
            gd.iter().zip(offs).map(|(&g, &o)| g * bd[o]).collect(),
            gd.iter().zip(ad).map(|(&g, &x)| g * x).collect(),
        ),
    };
    let ga = Tensor::new(a.shape().to_vec(), ga).expect("same shape");
    (ga, reduce_to(&gb_full, a.shape(), b.shape()))
}

/// `scale * x + shift`, elementwise.
pub fn affine<T: Real>(x: &Tensor<T>, scale: T, shift: T) -> Tensor<T> {
    x.map(|v| scale * v + shift)
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(shape_err!(
            "matmul",
            "inner dimensions differ: lhs is {m}x{k}, rhs is {k2}x{n}"
        ));
    }
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, T::one(), a.data(), k as isize, 1, b.data(), n as isize, 1, T::zero(), &mut out, n as isize, 1);
    Tensor::new(vec![m, n], out)
}

pub fn matmul_backward<T: Real>(g: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    // dA = G B^T, dB = A^T G
    let mut da = vec![T::zero(); m * k];
    T::gemm(m, n, k, T::one(), g.data(), n as isize, 1, b.data(), 1, n as isize, T::zero(), &mut da, k as isize, 1);
    let mut db = vec![T::zero(); k * n];
    T::gemm(k, m, n, T::one(), a.data(), 1, k as isize, g.data(), n as isize, 1, T::zero(), &mut db, n as isize, 1);
    (
        Tensor::new(vec![m, k], da).expect("shape"),
        Tensor::new(vec![k, n], db).expect("shape"),
    )
}

/// Concatenate along the last axis; all leading dims must agree.
pub fn concat_last<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| shape_err!("concat", "no operands"))?;
    let lead = &first.shape()[..first.rank() - 1];
    for p in parts {
        if p.rank() != first.rank() || &p.shape()[..p.rank() - 1] != lead {
            return Err(shape_err!(
                "concat",
                "leading dims {:?} do not match {:?}",
                p.shape(),
                first.shape()
            ));
        }
    }
    let rows: usize = lead.iter().product();
    let widths: Vec<usize> = parts.iter().map(|p| *p.shape().last().unwrap()).collect();
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (p, &w) in parts.iter().zip(&widths) {
            data.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Tensor::new(shape, data)
}

pub fn concat_last_backward<T: Real>(g: &Tensor<T>, shapes: &[Vec<usize>]) -> Vec<Tensor<T>> {
    let total = *g.shape().last().unwrap();
    let rows = g.len() / total;
    let mut outs: Vec<Vec<T>> = shapes.iter().map(|s| Vec::with_capacity(s.iter().product())).collect();
    for r in 0..rows {
        let mut off = r * total;
        for (o, s) in outs.iter_mut().zip(shapes) {
            let w = *s.last().unwrap();
            o.extend_from_slice(&g.data()[off..off + w]);
            off += w;
        }
    }
    outs.into_iter()
        .zip(shapes)
        .map(|(d, s)| Tensor::new(s.clone(), d).expect("shape"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    fn pad(&self) -> usize {
        self.k / 2
    }

    fn patch(&self) -> usize {
        self.k * self.k * self.cin
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }
}

pub fn conv_geometry<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<ConvGeometry> {
    let (h, w, cin) = x.dims3("conv2d")?;
    let [k, k2, kc, cout] = kernel.shape()[..] else {
        return Err(Error::RankMismatch {
            op: "conv2d kernel",
            expected: 4,
            got: kernel.rank(),
        });
    };
    if k != k2 || !matches!(k, 1 | 3 | 5 | 7) {
        return Err(Error::InvalidKernel(if k != k2 { k.max(k2) } else { k }));
    }
    if kc != cin {
        return Err(shape_err!(
            "conv2d",
            "input has {cin} channels but kernel expects {kc}"
        ));
    }
    if bias.shape() != [cout] {
        return Err(shape_err!(
            "conv2d",
            "bias shape {:?} does not match {cout} output channels",
            bias.shape()
        ));
    }
    if !matches!(stride, 1 | 2) {
        return Err(shape_err!("conv2d", "unsupported stride {stride}"));
    }
    Ok(ConvGeometry {
        h,
        w,
        cin,
        cout,
        k,
        stride,
        ho: h.div_ceil(stride),
        wo: w.div_ceil(stride),
    })
}

fn im2col<T: Real>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let patch = g.patch();
    let pad = g.pad() as isize;
    let mut cols = vec![T::zero(); g.ho * g.wo * patch];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &mut cols[(oy * g.wo + ox) * patch..][..patch];
            for ky in 0..g.k {
                let iy = (oy * g.stride) as isize + ky as isize - pad;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride) as isize + kx as isize - pad;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.w + ix as usize) * g.cin;
                    let dst = (ky * g.k + kx) * g.cin;
                    row[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let patch = g.patch();
    let pad = g.pad() as isize;
    let mut x = vec![T::zero(); g.h * g.w * g.cin];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &cols[(oy * g.wo + ox) * patch..][..patch];
            for ky in 0..g.k {
                let iy = (oy * g.stride) as isize + ky as isize - pad;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride) as isize + kx as isize - pad;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * g.cin;
                    let src = (ky * g.k + kx) * g.cin;
                    for c in 0..g.cin {
                        x[dst + c] += row[src + c];
                    }
                }
            }
        }
    }
    x
}

/// Zero-padded "same" convolution. `kernel` is `k x k x Cin x Cout`, the
/// output is `ceil(H/stride) x ceil(W/stride) x Cout`.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let g = conv_geometry(x, kernel, bias, stride)?;
    let pixels = g.ho * g.wo;
    let patch = g.patch();
    let mut out = Vec::with_capacity(pixels * g.cout);
    for _ in 0..pixels {
        out.extend_from_slice(bias.data());
    }
    let cols;
    let lhs = if g.is_pointwise() {
        x.data()
    } else {
        cols = im2col(x.data(), &g);
        &cols
    };
    T::gemm(pixels, patch, g.cout, T::one(), lhs, patch as isize, 1, kernel.data(), g.cout as isize, 1, T::one(), &mut out, g.cout as isize, 1);
    Tensor::new(vec![g.ho, g.wo, g.cout], out)
}

/// Returns `(d_input, d_kernel, d_bias)`.
pub fn conv2d_backward<T: Real>(
    grad: &Tensor<T>,
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    need_input: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let g = conv_geometry(x, kernel, bias, stride).expect("validated in forward");
    let pixels = g.ho * g.wo;
    let patch = g.patch();
    let gd = grad.data();

    let mut db = vec![T::zero(); g.cout];
    for p in 0..pixels {
        for (acc, &v) in db.iter_mut().zip(&gd[p * g.cout..(p + 1) * g.cout]) {
            *acc += v;
        }
    }

    let cols;
    let lhs = if g.is_pointwise() {
        x.data()
    } else {
        cols = im2col(x.data(), &g);
        &cols
    };
    // dW = cols^T * G
    let mut dw = vec![T::zero(); patch * g.cout];
    T::gemm(patch, pixels, g.cout, T::one(), lhs, 1, patch as isize, gd, g.cout as isize, 1, T::zero(), &mut dw, g.cout as isize, 1);

    let dx = need_input.then(|| {
        // dcols = G * W^T
        let mut dcols = vec![T::zero(); pixels * patch];
        T::gemm(pixels, g.cout, patch, T::one(), gd, g.cout as isize, 1, kernel.data(), 1, g.cout as isize, T::zero(), &mut dcols, patch as isize, 1);
        let dx = if g.is_pointwise() { dcols } else { col2im(&dcols, &g) };
        Tensor::new(x.shape().to_vec(), dx).expect("shape")
    });
    (
        dx,
        Tensor::new(kernel.shape().to_vec(), dw).expect("shape"),
        Tensor::new(vec![g.cout], db).expect("shape"),
    )
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() || v.is_nan() { v } else { T::zero() })
}

pub fn relu_backward<T: Real>(g: &Tensor<T>, x: &Tensor<T>) -> Tensor<T> {
    let data = g
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape")
}

#[inline]
pub fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Takes the sigmoid *output*.
pub fn sigmoid_backward<T: Real>(g: &Tensor<T>, y: &Tensor<T>) -> Tensor<T> {
    let data = g
        .data()
        .iter()
        .zip(y.data())
        .map(|(&g, &s)| g * s * (T::one() - s))
        .collect();
    Tensor::new(y.shape().to_vec(), data).expect("shape")
}

/// Channel-wise mean `H x W x C -> H x W x 1`. The per-pixel sum is taken in
/// sorted order so the result is invariant to channel permutations.
pub fn channel_mean<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = x.dims3("channel_avg")?;
    let inv = T::one() / T::cst(c as f64);
    let mut buf = vec![T::zero(); c];
    let data = x
        .data()
        .chunks_exact(c)
        .map(|px| {
            buf.copy_from_slice(px);
            order_invariant_sum(&mut buf) * inv
        })
        .collect();
    Tensor::new(vec![h, w, 1], data)
}

pub fn channel_mean_backward<T: Real>(g: &Tensor<T>, x_shape: &[usize]) -> Tensor<T> {
    let c = x_shape[2];
    let inv = T::one() / T::cst(c as f64);
    let mut out = Vec::with_capacity(g.len() * c);
    for &v in g.data() {
        out.extend(core::iter::repeat_n(v * inv, c));
    }
    Tensor::new(x_shape.to_vec(), out).expect("shape")
}

/// Channel-wise max `H x W x C -> H x W x 1`, with the winning channel index
/// per pixel (first maximum on ties).
pub fn channel_max<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let (h, w, c) = x.dims3("channel_max")?;
    let mut arg = Vec::with_capacity(h * w);
    let data = x
        .data()
        .chunks_exact(c)
        .map(|px| {
            let mut best = 0;
            for i in 1..c {
                if px[i] > px[best] {
                    best = i;
                }
            }
            arg.push(best as u32);
            px[best]
        })
        .collect();
    Ok((Tensor::new(vec![h, w, 1], data)?, arg))
}

pub fn channel_max_backward<T: Real>(g: &Tensor<T>, argmax: &[u32], x_shape: &[usize]) -> Tensor<T> {
    let c = x_shape[2];
    let mut out = Tensor::zeros(x_shape);
    let od = out.data_mut();
    for (p, (&v, &a)) in g.data().iter().zip(argmax).enumerate() {
        od[p * c + a as usize] = v;
    }
    out
}

/// Average over vertices: `a1 x a2 -> 1 x a2`.
pub fn row_mean<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = x.dims2("global_vertex_avg")?;
    let mut acc = vec![T::zero(); c];
    for row in x.data().chunks_exact(c) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    let inv = T::one() / T::cst(r as f64);
    Tensor::new(vec![1, c], acc.into_iter().map(|v| v * inv).collect())
}

pub fn row_mean_backward<T: Real>(g: &Tensor<T>, x_shape: &[usize]) -> Tensor<T> {
    let r = x_shape[0];
    let inv = T::one() / T::cst(r as f64);
    let row: Vec<T> = g.data().iter().map(|&v| v * inv).collect();
    let mut out = Vec::with_capacity(r * row.len());
    for _ in 0..r {
        out.extend_from_slice(&row);
    }
    Tensor::new(x_shape.to_vec(), out).expect("shape")
}

/// Nearest-neighbour 2x upsampling of `H x W x C` (or `H x W`).
pub fn upsample2x<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = match x.shape()[..] {
        [h, w, c] => (h, w, c),
        [h, w] => (h, w, 1),
        _ => {
            return Err(Error::RankMismatch {
                op: "upsample2x",
                expected: 3,
                got: x.rank(),
            })
        }
    };
    let mut out = Vec::with_capacity(4 * x.len());
    for y in 0..2 * h {
        for xx in 0..2 * w {
            let src = ((y / 2) * w + xx / 2) * c;
            out.extend_from_slice(&x.data()[src..src + c]);
        }
    }
    let mut shape = x.shape().to_vec();
    shape[0] *= 2;
    shape[1] *= 2;
    Tensor::new(shape, out)
}

pub fn upsample2x_backward<T: Real>(g: &Tensor<T>, x_shape: &[usize]) -> Tensor<T> {
    let (h, w) = (x_shape[0], x_shape[1]);
    let c = x_shape.get(2).copied().unwrap_or(1);
    let mut out = Tensor::zeros(x_shape);
    let od = out.data_mut();
    let gd = g.data();
    for y in 0..2 * h {
        for xx in 0..2 * w {
            let dst = ((y / 2) * w + xx / 2) * c;
            let src = (y * 2 * w + xx) * c;
            for k in 0..c {
                od[dst + k] += gd[src + k];
            }
        }
    }
    out
}

/// 2x2 average pooling with stride 2; `H` and `W` must be even.
pub fn avg_pool2x2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = x.dims3("avg_pool2x2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err!("avg_pool2x2", "odd spatial size {h}x{w}"));
    }
    let quarter = T::cst(0.25);
    let mut out = Vec::with_capacity(x.len() / 4);
    for y in 0..h / 2 {
        for xx in 0..w / 2 {
            for k in 0..c {
                let s = x.at3(2 * y, 2 * xx, k)
                    + x.at3(2 * y, 2 * xx + 1, k)
                    + x.at3(2 * y + 1, 2 * xx, k)
                    + x.at3(2 * y + 1, 2 * xx + 1, k);
                out.push(s * quarter);
            }
        }
    }
    Tensor::new(vec![h / 2, w / 2, c], out)
}

pub fn avg_pool2x2_backward<T: Real>(g: &Tensor<T>, x_shape: &[usize]) -> Tensor<T> {
    let (w, c) = (x_shape[1], x_shape[2]);
    let quarter = T::cst(0.25);
    Tensor::from_fn(x_shape, |i| {
        let k = i % c;
        let px = i / c;
        let (y, xx) = (px / w, px % w);
        g.at3(y / 2, xx / 2, k) * quarter
    })
}

/// `P diag(lambda) P^T` for `P: a1 x a2`, `lambda: 1 x a2`. Only the upper
/// triangle is computed and mirrored, so the result is exactly symmetric.
pub fn weighted_gram<T: Real>(p: &Tensor<T>, lambda: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, f) = p.dims2("adjacency")?;
    if lambda.len() != f {
        return Err(shape_err!(
            "adjacency",
            "metric vector has {} entries, vertices have {f} features",
            lambda.len()
        ));
    }
    // Q = P diag(sqrt-free) : scale columns once, then Gram via gemm on the
    // upper triangle by mirroring the full product.
    let pd = p.data();
    let ld = lambda.data();
    let mut scaled = Vec::with_capacity(n * f);
    for row in pd.chunks_exact(f) {
        scaled.extend(row.iter().zip(ld).map(|(&a, &l)| a * l));
    }
    let mut full = vec![T::zero(); n * n];
    T::gemm(n, f, n, T::one(), &scaled, f as isize, 1, pd, 1, f as isize, T::zero(), &mut full, n as isize, 1);
    for i in 0..n {
        for j in 0..i {
            full[i * n + j] = full[j * n + i];
        }
    }
    Tensor::new(vec![n, n], full)
}

/// Returns `(dP, dlambda)` for `A = P diag(lambda) P^T` where the forward
/// mirrors the upper triangle: `A_ij = A_ji = sum_f lambda_f P_if P_jf`.
pub fn weighted_gram_backward<T: Real>(
    g: &Tensor<T>,
    p: &Tensor<T>,
    lambda: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (n, f) = (p.shape()[0], p.shape()[1]);
    // The forward value depends on the upper triangle only, so the effective
    // upstream gradient is G_sym(i<=j) = G_ij + G_ji (i<j), G_ii on the diagonal.
    let gd = g.data();
    let mut gs = vec![T::zero(); n * n];
    for i in 0..n {
        gs[i * n + i] = gd[i * n + i];
        for j in i + 1..n {
            let v = gd[i * n + j] + gd[j * n + i];
            gs[i * n + j] = v * T::cst(0.5);
            gs[j * n + i] = v * T::cst(0.5);
        }
    }
    // A = P L P^T with symmetric upstream S: dP = 2 S P L, dL_f = sum_ij S_ij P_if P_jf
    let mut sp = vec![T::zero(); n * f];
    T::gemm(n, n, f, T::one(), &gs, n as isize, 1, p.data(), f as isize, 1, T::zero(), &mut sp, f as isize, 1);
    let ld = lambda.data();
    let two = T::cst(2.0);
    let mut dp = Vec::with_capacity(n * f);
    for row in sp.chunks_exact(f) {
        dp.extend(row.iter().zip(ld).map(|(&v, &l)| two * v * l));
    }
    let mut dl = vec![T::zero(); f];
    for (prow, sprow) in p.data().chunks_exact(f).zip(sp.chunks_exact(f)) {
        for k in 0..f {
            dl[k] += prow[k] * sprow[k];
        }
    }
    (
        Tensor::new(vec![n, f], dp).expect("shape"),
        Tensor::new(lambda.shape().to_vec(), dl).expect("shape"),
    )
}

/// `I - D^{-1/2} A D^{-1/2}` with `d_i = max(sum_j A_ij, eps)`.
pub fn normalized_laplacian<T: Real>(adj: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let (n, m) = adj.dims2("normalized_laplacian")?;
    if n != m {
        return Err(shape_err!("normalized_laplacian", "adjacency is {n}x{m}, not square"));
    }
    let ad = adj.data();
    for (i, &v) in ad.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "normalized_laplacian" });
        }
        if v < T::zero() {
            return Err(Error::NegativeAdjacency {
                row: i / n,
                col: i % n,
                value: v.as_f64(),
            });
        }
    }
    let d: Vec<T> = ad.chunks_exact(n).map(|row| row.iter().copied().sum::<T>().max(eps)).collect();
    let mut out = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            // sqrt(d_i d_j) is symmetric in (i, j) and exact when d_i == d_j.
            let v = -(ad[i * n + j] / (d[i] * d[j]).sqrt());
            out[i * n + j] = if i == j { T::one() + v } else { v };
        }
    }
    Tensor::new(vec![n, n], out)
}

fn inv_sqrt_degrees<T: Real>(ad: &[T], n: usize, eps: T) -> Vec<T> {
    ad.chunks_exact(n)
        .map(|row| {
            let d: T = row.iter().copied().sum();
            T::one() / d.max(eps).sqrt()
        })
        .collect()
}

pub fn normalized_laplacian_backward<T: Real>(g: &Tensor<T>, adj: &Tensor<T>, eps: T) -> Tensor<T> {
    let n = adj.shape()[0];
    let ad = adj.data();
    let gd = g.data();
    let degrees: Vec<T> = ad.chunks_exact(n).map(|r| r.iter().copied().sum()).collect();
    let s = inv_sqrt_degrees(ad, n, eps);
    // L_ij = delta_ij - s_i A_ij s_j
    let mut ds = vec![T::zero(); n];
    let mut da = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            let gij = gd[i * n + j];
            da[i * n + j] = -gij * s[i] * s[j];
            let t = -gij * ad[i * n + j];
            ds[i] += t * s[j];
            ds[j] += t * s[i];
        }
    }
    // s_i = d_i^{-1/2} where d_i > eps, constant otherwise.
    let half = T::cst(-0.5);
    for i in 0..n {
        if degrees[i] > eps {
            let dd = ds[i] * half * s[i] * s[i] * s[i];
            for j in 0..n {
                da[i * n + j] += dd;
            }
        }
    }
    Tensor::new(vec![n, n], da).expect("shape")
}

pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = x.dims2("softmax")?;
    let mut out = Vec::with_capacity(r * c);
    for row in x.data().chunks_exact(c) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut z = T::zero();
        for &v in row {
            let e = (v - m).exp();
            z += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= z;
        }
    }
    Tensor::new(vec![r, c], out)
}

/// Takes the softmax *output*.
pub fn softmax_rows_backward<T: Real>(g: &Tensor<T>, y: &Tensor<T>) -> Tensor<T> {
    let c = y.shape()[1];
    let mut out = Vec::with_capacity(y.len());
    for (grow, yrow) in g.data().chunks_exact(c).zip(y.data().chunks_exact(c)) {
        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
        out.extend(grow.iter().zip(yrow).map(|(&g, &y)| y * (g - dot)));
    }
    Tensor::new(y.shape().to_vec(), out).expect("shape")
}

/// Output row `i` is input row `perm[i]`.
pub fn permute_rows<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let (r, c) = x.dims2("permute_rows")?;
    if perm.len() != r {
        return Err(shape_err!("permute_rows", "permutation of length {} for {r} rows", perm.len()));
    }
    let mut out = Vec::with_capacity(r * c);
    for &p in perm {
        out.extend_from_slice(&x.data()[p * c..(p + 1) * c]);
    }
    Tensor::new(vec![r, c], out)
}

pub fn permute_rows_backward<T: Real>(g: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let c = g.shape()[1];
    let mut out = Tensor::zeros(g.shape());
    let od = out.data_mut();
    for (i, &p) in perm.iter().enumerate() {
        od[p * c..(p + 1) * c].copy_from_slice(&g.data()[i * c..(i + 1) * c]);
    }
    out
}

/// Row order that sorts rows lexicographically under IEEE total order.
/// Stable, so equal rows keep their relative order.
pub fn canonical_row_order<T: Real>(x: &Tensor<T>) -> Result<Vec<usize>> {
    let (r, c) = x.dims2("canonical_row_order")?;
    let d = x.data();
    let mut idx: Vec<usize> = (0..r).collect();
    idx.sort_by(|&a, &b| {
        let (ra, rb) = (&d[a * c..(a + 1) * c], &d[b * c..(b + 1) * c]);
        ra.iter()
            .zip(rb)
            .map(|(&u, &v)| total_cmp(u, v))
            .find(|o| o.is_ne())
            .unwrap_or(core::cmp::Ordering::Equal)
    });
    Ok(idx)
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Class-balanced binary cross-entropy, averaged over pixels.
///
/// Weights are `p = (B - Bm)/B` on positives and `q = Bm/B` on negatives.
/// An all-background label falls back to plain BCE (`p = q = 1`), since the
/// weighted form is identically zero there.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BalanceWeights {
    pub p: f64,
    pub q: f64,
    pub fallback: bool,
}

pub const PROB_CLAMP: f64 = 1e-7;

pub fn balance_weights<T: Real>(label: &Tensor<T>) -> Result<BalanceWeights> {
    let mut positives = 0usize;
    for (i, &v) in label.data().iter().enumerate() {
        if v == T::one() {
            positives += 1;
        } else if v != T::zero() {
            return Err(Error::NonBinaryLabel {
                index: i,
                value: v.as_f64(),
            });
        }
    }
    let b = label.len() as f64;
    if positives == 0 {
        return Ok(BalanceWeights {
            p: 1.0,
            q: 1.0,
            fallback: true,
        });
    }
    let bm = positives as f64;
    Ok(BalanceWeights {
        p: (b - bm) / b,
        q: bm / b,
        fallback: false,
    })
}

pub fn balanced_bce<T: Real>(s: &Tensor<T>, label: &Tensor<T>, w: BalanceWeights) -> Result<T> {
    if s.shape() != label.shape() {
        return Err(shape_err!(
            "loss",
            "prediction {:?} vs label {:?}",
            s.shape(),
            label.shape()
        ));
    }
    let (lo, hi) = (T::cst(PROB_CLAMP), T::cst(1.0 - PROB_CLAMP));
    let (p, q) = (T::cst(w.p), T::cst(w.q));
    let mut acc = T::zero();
    for (&sv, &l) in s.data().iter().zip(label.data()) {
        let sc = sv.max(lo).min(hi);
        acc += if l == T::one() { p * sc.ln() } else { q * (T::one() - sc).ln() };
    }
    Ok(-acc / T::cst(s.len() as f64))
}

pub fn balanced_bce_backward<T: Real>(g: T, s: &Tensor<T>, label: &Tensor<T>, w: BalanceWeights) -> Tensor<T> {
    let (lo, hi) = (T::cst(PROB_CLAMP), T::cst(1.0 - PROB_CLAMP));
    let (p, q) = (T::cst(w.p), T::cst(w.q));
    let scale = g / T::cst(s.len() as f64);
    let data = s
        .data()
        .iter()
        .zip(label.data())
        .map(|(&sv, &l)| {
            if sv < lo || sv > hi {
                T::zero()
            } else if l == T::one() {
                -scale * p / sv
            } else {
                scale * q / (T::one() - sv)
            }
        })
        .collect();
    Tensor::new(s.shape().to_vec(), data).expect("shape")
}

/// Elementwise mean of same-shape tensors. Each element is summed in sorted
/// order, so the result does not depend on the operand order.
pub fn mean_of<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| shape_err!("mean_of", "no operands"))?;
    if parts.iter().any(|p| p.shape() != first.shape()) {
        return Err(shape_err!("mean_of", "operands differ in shape"));
    }
    let inv = T::one() / T::cst(parts.len() as f64);
    let mut buf = vec![T::zero(); parts.len()];
    let data = (0..first.len())
        .map(|i| {
            for (b, p) in buf.iter_mut().zip(parts) {
                *b = p.data()[i];
            }
            order_invariant_sum(&mut buf) * inv
        })
        .collect();
    Tensor::new(first.shape().to_vec(), data)
}
