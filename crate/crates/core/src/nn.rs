//! Neural operator kernels on plain tensors: forward passes and the
//! vector-Jacobian products the autodiff layer calls.
//!
//! Weight layouts (all rank-4):
//! - 1×1 convolution / dense: `(1, 1, C_out, C_in)`
//! - depthwise 3×3: `(1, C, 3, 3)`
//! - full 3×3: `(C_out, C_in, 3, 3)`
//! - biases: `(1, C, 1, 1)`
//!
//! Sampling grids hold absolute pixel coordinates of the input, channel
//! `2g` = x (width axis) and `2g+1` = y for feature group `g`.

use crate::element::Element;
use crate::error::{contract_err, shape_err, Result};
use crate::tensor::{Dims, Tensor};

/// Per-pixel channel mixing.
#[derive(Clone, Debug)]
pub struct Conv1x1Params<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

/// One 3×3 filter per channel, zero padding 1.
#[derive(Clone, Debug)]
pub struct DWConv3x3Params<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

/// Continuous sampling positions `(N, 2·groups, H_out, W_out)` in input pixels.
#[derive(Clone, Debug)]
pub struct SampleGrid<T>(pub Tensor<T>);

fn check_bias<T: Element>(bias: Option<&Tensor<T>>, c: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.dims() != [1, c, 1, 1] {
            return Err(shape_err!("bias {:?}, expected [1, {c}, 1, 1]", b.dims()));
        }
    }
    Ok(())
}

fn add_bias<T: Element>(out: &mut [T], bias: Option<&Tensor<T>>, n: usize, c: usize, plane: usize) {
    if let Some(b) = bias {
        let b = b.data();
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * plane;
                for v in &mut out[base..base + plane] {
                    *v += b[ch];
                }
            }
        }
    }
}

/// Bias gradient: sum of `g` over batch and space.
pub fn bias_grad<T: Element>(g: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = g.dims();
    let plane = h * w;
    let gd = g.data();
    let mut out = vec![T::ZERO; c];
    for i in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            let base = (i * c + ch) * plane;
            *o += gd[base..base + plane].iter().copied().sum::<T>();
        }
    }
    Tensor::from_vec([1, c, 1, 1], out)
}

// ---------------------------------------------------------------------------
// Dense over the last axis
// ---------------------------------------------------------------------------

fn matmul_dims(a: Dims, w: Dims) -> Result<(usize, usize, usize)> {
    if w[0] != 1 || w[1] != 1 {
        return Err(shape_err!("matmul weight must be (1,1,K,L), got {w:?}"));
    }
    if a[3] != w[2] {
        return Err(shape_err!("matmul inner extents {} vs {}", a[3], w[2]));
    }
    Ok((a[0] * a[1] * a[2], a[3], w[3]))
}

/// `(…, M, K) · (K, L) → (…, M, L)` with `w` stored as `(1, 1, K, L)`.
pub fn matmul_lastdim<T: Element>(a: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, k, l) = matmul_dims(a.dims(), w.dims())?;
    let mut out = vec![T::ZERO; rows * l];
    T::gemm(rows, k, l, a.data(), (k, 1), w.data(), (l, 1), &mut out, (l, 1), false);
    let d = a.dims();
    Tensor::from_vec([d[0], d[1], d[2], l], out)
}

/// Returns `(∂a, ∂w)` for [`matmul_lastdim`].
pub fn matmul_lastdim_backward<T: Element>(
    a: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (rows, k, l) = matmul_dims(a.dims(), w.dims())?;
    let mut ga = vec![T::ZERO; rows * k];
    // ga = g · wᵀ
    T::gemm(rows, l, k, g.data(), (l, 1), w.data(), (1, l), &mut ga, (k, 1), false);
    let mut gw = vec![T::ZERO; k * l];
    // gw = aᵀ · g
    T::gemm(k, rows, l, a.data(), (1, k), g.data(), (l, 1), &mut gw, (l, 1), false);
    Ok((Tensor::from_vec(a.dims(), ga)?, Tensor::from_vec(w.dims(), gw)?))
}

// ---------------------------------------------------------------------------
// 1×1 convolution
// ---------------------------------------------------------------------------

fn conv1x1_dims(x: Dims, w: Dims) -> Result<(usize, usize)> {
    if w[0] != 1 || w[1] != 1 {
        return Err(shape_err!("conv1x1 weight must be (1,1,C_out,C_in), got {w:?}"));
    }
    if x[1] != w[3] {
        return Err(shape_err!("conv1x1 expects {} input channels, got {}", w[3], x[1]));
    }
    Ok((w[2], w[3]))
}

pub fn conv1x1<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (cout, cin) = conv1x1_dims(x.dims(), weight.dims())?;
    check_bias(bias, cout)?;
    let [n, _, h, w] = x.dims();
    let plane = h * w;
    let mut out = vec![T::ZERO; n * cout * plane];
    for i in 0..n {
        let xs = &x.data()[i * cin * plane..(i + 1) * cin * plane];
        let os = &mut out[i * cout * plane..(i + 1) * cout * plane];
        T::gemm(cout, cin, plane, weight.data(), (cin, 1), xs, (plane, 1), os, (plane, 1), false);
    }
    add_bias(&mut out, bias, n, cout, plane);
    Tensor::from_vec([n, cout, h, w], out)
}

/// Returns `(∂x, ∂weight)`; the bias gradient is [`bias_grad`].
pub fn conv1x1_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (cout, cin) = conv1x1_dims(x.dims(), weight.dims())?;
    let [n, _, h, w] = x.dims();
    let plane = h * w;
    let mut gx = vec![T::ZERO; n * cin * plane];
    let mut gw = vec![T::ZERO; cout * cin];
    for i in 0..n {
        let xs = &x.data()[i * cin * plane..(i + 1) * cin * plane];
        let gs = &g.data()[i * cout * plane..(i + 1) * cout * plane];
        let gxs = &mut gx[i * cin * plane..(i + 1) * cin * plane];
        T::gemm(cin, cout, plane, weight.data(), (1, cin), gs, (plane, 1), gxs, (plane, 1), false);
        T::gemm(cout, plane, cin, gs, (plane, 1), xs, (1, plane), &mut gw, (cin, 1), i > 0);
    }
    Ok((Tensor::from_vec(x.dims(), gx)?, Tensor::from_vec(weight.dims(), gw)?))
}

// ---------------------------------------------------------------------------
// Depthwise 3×3 convolution, zero padding 1
// ---------------------------------------------------------------------------

fn dw_dims(x: Dims, w: Dims) -> Result<()> {
    if w != [1, x[1], 3, 3] {
        return Err(shape_err!("dwconv3x3 weight {w:?} for input {x:?}, expected [1, {}, 3, 3]", x[1]));
    }
    Ok(())
}

pub fn dwconv3x3<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    dw_dims(x.dims(), weight.dims())?;
    let [n, c, h, w] = x.dims();
    check_bias(bias, c)?;
    let plane = h * w;
    let xd = x.data();
    let wd = weight.data();
    let mut out = vec![T::ZERO; x.len()];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * plane;
            let k = &wd[ch * 9..ch * 9 + 9];
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = T::ZERO;
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            acc += k[ky * 3 + kx] * xd[base + sy as usize * w + sx as usize];
                        }
                    }
                    out[base + y * w + xx] = acc;
                }
            }
        }
    }
    add_bias(&mut out, bias, n, c, plane);
    Tensor::from_vec(x.dims(), out)
}

pub fn dwconv3x3_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    dw_dims(x.dims(), weight.dims())?;
    let [n, c, h, w] = x.dims();
    let plane = h * w;
    let (xd, wd, gd) = (x.data(), weight.data(), g.data());
    let mut gx = vec![T::ZERO; x.len()];
    let mut gw = vec![T::ZERO; c * 9];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * plane;
            for y in 0..h {
                for xx in 0..w {
                    let go = gd[base + y * w + xx];
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let src = base + sy as usize * w + sx as usize;
                            gx[src] += wd[ch * 9 + ky * 3 + kx] * go;
                            gw[ch * 9 + ky * 3 + kx] += xd[src] * go;
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::from_vec(x.dims(), gx)?, Tensor::from_vec(weight.dims(), gw)?))
}

// ---------------------------------------------------------------------------
// Full 3×3 convolution with stride, zero padding 1 (im2col + GEMM)
// ---------------------------------------------------------------------------

fn conv3x3_out(h: usize, stride: usize) -> usize {
    (h + 2 - 3) / stride + 1
}

fn conv3x3_dims(x: Dims, w: Dims, stride: usize) -> Result<(usize, usize, usize)> {
    if stride == 0 {
        return Err(contract_err!("conv3x3 stride must be >= 1"));
    }
    if w[1] != x[1] || w[2] != 3 || w[3] != 3 {
        return Err(shape_err!("conv3x3 weight {w:?} for input {x:?}"));
    }
    if x[2] == 0 || x[3] == 0 {
        return Err(shape_err!("conv3x3 on empty spatial extent {x:?}"));
    }
    Ok((w[0], conv3x3_out(x[2], stride), conv3x3_out(x[3], stride)))
}

fn im2col<T: Element>(xs: &[T], cin: usize, h: usize, w: usize, stride: usize, ho: usize, wo: usize) -> Vec<T> {
    let p = ho * wo;
    let mut cols = vec![T::ZERO; cin * 9 * p];
    for ch in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * p;
                for oy in 0..ho {
                    let sy = (oy * stride + ky) as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let sx = (ox * stride + kx) as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        cols[row + oy * wo + ox] = xs[(ch * h + sy as usize) * w + sx as usize];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Element>(cols: &[T], gx: &mut [T], cin: usize, h: usize, w: usize, stride: usize, ho: usize, wo: usize) {
    let p = ho * wo;
    for ch in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * p;
                for oy in 0..ho {
                    let sy = (oy * stride + ky) as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let sx = (ox * stride + kx) as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        gx[(ch * h + sy as usize) * w + sx as usize] += cols[row + oy * wo + ox];
                    }
                }
            }
        }
    }
}

pub fn conv3x3<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
) -> Result<Tensor<T>> {
    let (cout, ho, wo) = conv3x3_dims(x.dims(), weight.dims(), stride)?;
    check_bias(bias, cout)?;
    let [n, cin, h, w] = x.dims();
    let p = ho * wo;
    let kk = cin * 9;
    let mut out = vec![T::ZERO; n * cout * p];
    for i in 0..n {
        let xs = &x.data()[i * cin * h * w..(i + 1) * cin * h * w];
        let cols = im2col(xs, cin, h, w, stride, ho, wo);
        let os = &mut out[i * cout * p..(i + 1) * cout * p];
        T::gemm(cout, kk, p, weight.data(), (kk, 1), &cols, (p, 1), os, (p, 1), false);
    }
    add_bias(&mut out, bias, n, cout, p);
    Tensor::from_vec([n, cout, ho, wo], out)
}

pub fn conv3x3_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    g: &Tensor<T>,
    stride: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (cout, ho, wo) = conv3x3_dims(x.dims(), weight.dims(), stride)?;
    let [n, cin, h, w] = x.dims();
    let p = ho * wo;
    let kk = cin * 9;
    let mut gx = vec![T::ZERO; x.len()];
    let mut gw = vec![T::ZERO; cout * kk];
    let mut gcols = vec![T::ZERO; kk * p];
    for i in 0..n {
        let xs = &x.data()[i * cin * h * w..(i + 1) * cin * h * w];
        let cols = im2col(xs, cin, h, w, stride, ho, wo);
        let gs = &g.data()[i * cout * p..(i + 1) * cout * p];
        T::gemm(cout, p, kk, gs, (p, 1), &cols, (1, p), &mut gw, (kk, 1), i > 0);
        T::gemm(kk, cout, p, weight.data(), (1, kk), gs, (p, 1), &mut gcols, (p, 1), false);
        col2im(&gcols, &mut gx[i * cin * h * w..(i + 1) * cin * h * w], cin, h, w, stride, ho, wo);
    }
    Ok((Tensor::from_vec(x.dims(), gx)?, Tensor::from_vec(weight.dims(), gw)?))
}

// ---------------------------------------------------------------------------
// Adaptive average pooling
// ---------------------------------------------------------------------------

/// Window `[⌊i·n/out⌋, ⌈(i+1)·n/out⌉)`.
#[inline]
pub fn pool_window(i: usize, n: usize, out: usize) -> (usize, usize) {
    ((i * n) / out, ((i + 1) * n).div_ceil(out))
}

fn pool_check(x: Dims, (oh, ow): (usize, usize)) -> Result<()> {
    if oh == 0 || ow == 0 {
        return Err(contract_err!("adaptive_avg_pool output extent must be >= 1, got ({oh}, {ow})"));
    }
    if oh > x[2] || ow > x[3] {
        return Err(contract_err!(
            "adaptive_avg_pool output ({oh}, {ow}) larger than input ({}, {})",
            x[2],
            x[3]
        ));
    }
    Ok(())
}

pub fn adaptive_avg_pool<T: Element>(x: &Tensor<T>, out_hw: (usize, usize)) -> Result<Tensor<T>> {
    pool_check(x.dims(), out_hw)?;
    let [n, c, h, w] = x.dims();
    let (oh, ow) = out_hw;
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            let (y0, y1) = pool_window(i, h, oh);
            for j in 0..ow {
                let (x0, x1) = pool_window(j, w, ow);
                let mut acc = T::ZERO;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        acc += xd[base + y * w + xx];
                    }
                }
                out.push(acc / T::from_f64(((y1 - y0) * (x1 - x0)) as f64));
            }
        }
    }
    Tensor::from_vec([n, c, oh, ow], out)
}

pub fn adaptive_avg_pool_backward<T: Element>(x_dims: Dims, g: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, oh, ow] = g.dims();
    pool_check(x_dims, (oh, ow))?;
    let [_, _, h, w] = x_dims;
    let gd = g.data();
    let mut gx = vec![T::ZERO; n * c * h * w];
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            let (y0, y1) = pool_window(i, h, oh);
            for j in 0..ow {
                let (x0, x1) = pool_window(j, w, ow);
                let share = gd[(plane * oh + i) * ow + j] / T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                for y in y0..y1 {
                    for xx in x0..x1 {
                        gx[base + y * w + xx] += share;
                    }
                }
            }
        }
    }
    Tensor::from_vec(x_dims, gx)
}

// ---------------------------------------------------------------------------
// Pixel shuffle
// ---------------------------------------------------------------------------

/// `(N, C·s², H, W) → (N, C, sH, sW)` with
/// `out[n, c, s·y+dy, s·x+dx] = in[n, c·s² + dy·s + dx, y, x]`.
pub fn pixel_shuffle<T: Element>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    if s == 0 {
        return Err(contract_err!("pixel_shuffle factor must be >= 1"));
    }
    let [n, cs, h, w] = x.dims();
    if cs % (s * s) != 0 {
        return Err(shape_err!("pixel_shuffle: {cs} channels not divisible by {}", s * s));
    }
    let c = cs / (s * s);
    let (oh, ow) = (h * s, w * s);
    let xd = x.data();
    let mut out = vec![T::ZERO; x.len()];
    for b in 0..n {
        for ch in 0..c {
            for dy in 0..s {
                for dx in 0..s {
                    let src_c = ch * s * s + dy * s + dx;
                    let src = ((b * cs + src_c) * h) * w;
                    for y in 0..h {
                        let dst_row = ((b * c + ch) * oh + s * y + dy) * ow;
                        for xx in 0..w {
                            out[dst_row + s * xx + dx] = xd[src + y * w + xx];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec([n, c, oh, ow], out)
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Element>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    if s == 0 {
        return Err(contract_err!("pixel_unshuffle factor must be >= 1"));
    }
    let [n, c, oh, ow] = x.dims();
    if oh % s != 0 || ow % s != 0 {
        return Err(shape_err!("pixel_unshuffle: ({oh}, {ow}) not divisible by {s}"));
    }
    let (h, w) = (oh / s, ow / s);
    let cs = c * s * s;
    let xd = x.data();
    let mut out = vec![T::ZERO; x.len()];
    for b in 0..n {
        for ch in 0..c {
            for dy in 0..s {
                for dx in 0..s {
                    let dst_c = ch * s * s + dy * s + dx;
                    let dst = ((b * cs + dst_c) * h) * w;
                    for y in 0..h {
                        let src_row = ((b * c + ch) * oh + s * y + dy) * ow;
                        for xx in 0..w {
                            out[dst + y * w + xx] = xd[src_row + s * xx + dx];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec([n, cs, h, w], out)
}

// ---------------------------------------------------------------------------
// Bilinear grid sampling (border clamping, align_corners = false)
// ---------------------------------------------------------------------------

/// Source grid of a ×`s` bilinear upsample of an `h×w` map:
/// output `(i, j)` reads input `((j+0.5)/s − 0.5, (i+0.5)/s − 0.5)`.
/// Shape `(1, 2, s·h, s·w)`.
pub fn upsample_grid<T: Element>(h: usize, w: usize, s: usize) -> Result<Tensor<T>> {
    if s == 0 {
        return Err(contract_err!("upsample factor must be >= 1"));
    }
    let inv = 1.0 / s as f64;
    Tensor::from_fn([1, 2, h * s, w * s], |[_, axis, i, j]| {
        let k = if axis == 0 { j } else { i };
        T::from_f64((k as f64 + 0.5) * inv - 0.5)
    })
}

fn grid_check(x: Dims, g: Dims) -> Result<usize> {
    if g[0] != x[0] && g[0] != 1 {
        return Err(shape_err!("grid batch {} vs input batch {}", g[0], x[0]));
    }
    if g[1] == 0 || g[1] % 2 != 0 {
        return Err(shape_err!("grid needs 2·groups channels, got {}", g[1]));
    }
    let groups = g[1] / 2;
    if x[1] % groups != 0 {
        return Err(shape_err!("{} channels not divisible into {groups} sampling groups", x[1]));
    }
    if x[2] == 0 || x[3] == 0 {
        return Err(shape_err!("grid_sample on empty input {x:?}"));
    }
    Ok(groups)
}

/// Neighbour indices and weights of one clamped coordinate on an axis of
/// length `n`: `(i0, i1, frac, inside)`.
#[inline]
fn axis_taps<T: Element>(v: T, n: usize) -> (usize, usize, T, bool) {
    let hi = T::from_f64((n - 1) as f64);
    let inside = v >= T::ZERO && v <= hi;
    let c = v.max(T::ZERO).min(hi);
    let f = c.floor();
    let i0 = f.to_f64() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, c - f, inside)
}

/// Bilinear sampling of `x` at `grid`. Channel group `g` of `x` (of
/// `C / groups` channels) reads grid channels `2g, 2g+1`. A grid with batch
/// 1 is shared across the batch.
pub fn grid_sample_bilinear<T: Element>(x: &Tensor<T>, grid: &Tensor<T>) -> Result<Tensor<T>> {
    let groups = grid_check(x.dims(), grid.dims())?;
    let [n, c, h, w] = x.dims();
    let [gn, _, oh, ow] = grid.dims();
    let cg = c / groups;
    let (xd, gd) = (x.data(), grid.data());
    let op = oh * ow;
    let mut out = vec![T::ZERO; n * c * op];
    for b in 0..n {
        let gb = if gn == 1 { 0 } else { b };
        for grp in 0..groups {
            let gx_base = ((gb * groups + grp) * 2) * op;
            let gy_base = gx_base + op;
            for p in 0..op {
                let (x0, x1, fx, _) = axis_taps(gd[gx_base + p], w);
                let (y0, y1, fy, _) = axis_taps(gd[gy_base + p], h);
                let w00 = (T::ONE - fx) * (T::ONE - fy);
                let w01 = fx * (T::ONE - fy);
                let w10 = (T::ONE - fx) * fy;
                let w11 = fx * fy;
                for ch in grp * cg..(grp + 1) * cg {
                    let base = (b * c + ch) * h * w;
                    let v = w00 * xd[base + y0 * w + x0]
                        + w01 * xd[base + y0 * w + x1]
                        + w10 * xd[base + y1 * w + x0]
                        + w11 * xd[base + y1 * w + x1];
                    out[(b * c + ch) * op + p] = v;
                }
            }
        }
    }
    Tensor::from_vec([n, c, oh, ow], out)
}

/// Returns `(∂x, ∂grid)`. Coordinates outside the valid range get zero
/// gradient (clamping subgradient).
pub fn grid_sample_bilinear_backward<T: Element>(
    x: &Tensor<T>,
    grid: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let groups = grid_check(x.dims(), grid.dims())?;
    let [n, c, h, w] = x.dims();
    let [gn, _, oh, ow] = grid.dims();
    let cg = c / groups;
    let (xd, gd, god) = (x.data(), grid.data(), g.data());
    let op = oh * ow;
    let mut gx = vec![T::ZERO; x.len()];
    let mut ggrid = vec![T::ZERO; grid.len()];
    for b in 0..n {
        let gb = if gn == 1 { 0 } else { b };
        for grp in 0..groups {
            let gx_base = ((gb * groups + grp) * 2) * op;
            let gy_base = gx_base + op;
            for p in 0..op {
                let (x0, x1, fx, in_x) = axis_taps(gd[gx_base + p], w);
                let (y0, y1, fy, in_y) = axis_taps(gd[gy_base + p], h);
                let w00 = (T::ONE - fx) * (T::ONE - fy);
                let w01 = fx * (T::ONE - fy);
                let w10 = (T::ONE - fx) * fy;
                let w11 = fx * fy;
                let mut dcx = T::ZERO;
                let mut dcy = T::ZERO;
                for ch in grp * cg..(grp + 1) * cg {
                    let base = (b * c + ch) * h * w;
                    let go = god[(b * c + ch) * op + p];
                    let (i00, i01) = (base + y0 * w + x0, base + y0 * w + x1);
                    let (i10, i11) = (base + y1 * w + x0, base + y1 * w + x1);
                    gx[i00] += w00 * go;
                    gx[i01] += w01 * go;
                    gx[i10] += w10 * go;
                    gx[i11] += w11 * go;
                    let (v00, v01, v10, v11) = (xd[i00], xd[i01], xd[i10], xd[i11]);
                    dcx += go * ((T::ONE - fy) * (v01 - v00) + fy * (v11 - v10));
                    dcy += go * ((T::ONE - fx) * (v10 - v00) + fx * (v11 - v01));
                }
                // A tap pair collapses (i0 == i1) exactly at the upper border,
                // where the one-sided derivative into the valid range is used.
                if in_x && x1 != x0 {
                    ggrid[gx_base + p] += dcx;
                }
                if in_y && y1 != y0 {
                    ggrid[gy_base + p] += dcy;
                }
            }
        }
    }
    Ok((Tensor::from_vec(x.dims(), gx)?, Tensor::from_vec(grid.dims(), ggrid)?))
}

/// ×`s` bilinear upsample, defined as grid sampling on [`upsample_grid`].
pub fn bilinear_resize<T: Element>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let [_, _, h, w] = x.dims();
    if s == 1 {
        return Ok(x.clone());
    }
    grid_sample_bilinear(x, &upsample_grid(h, w, s)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rand(dims: Dims, rng: &mut Rng) -> Tensor<f64> {
        Tensor::normal(dims, 0.0, 1.0, rng).unwrap()
    }

    fn conv1x1_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Tensor<f64> {
        oracle::conv1x1(x, w, b)
    }

    fn dwconv_oracle(x: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
        oracle::dwconv3x3(x, w, None)
    }

    fn conv3x3_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize) -> Tensor<f64> {
        oracle::conv3x3(x, w, None, stride)
    }

    use crate::oracle::{self, sample as sample_oracle};

    #[test]
    fn conv1x1_identity_and_sum() {
        let mut rng = Rng::new(1);
        let x = rand([2, 3, 4, 5], &mut rng);
        let eye = Tensor::from_fn([1, 1, 3, 3], |[_, _, o, i]| if o == i { 1.0 } else { 0.0 }).unwrap();
        assert!(conv1x1(&x, &eye, None).unwrap().bitwise_eq(&x));

        let x2 = rand([1, 2, 3, 3], &mut rng);
        let ones = Tensor::ones([1, 1, 1, 2]).unwrap();
        let s = conv1x1(&x2, &ones, None).unwrap();
        let oracle = Tensor::from_fn([1, 1, 3, 3], |[_, _, y, xx]| x2.at([0, 0, y, xx]) + x2.at([0, 1, y, xx])).unwrap();
        assert!(s.max_abs_diff(&oracle).unwrap() < 1e-15);
    }

    #[test]
    fn conv1x1_matches_oracle_f32() {
        let mut rng = Rng::new(2);
        for _ in 0..100 {
            let cin = rng.int_range(1, 8) as usize;
            let cout = rng.int_range(1, 8) as usize;
            let dims = [rng.int_range(1, 2) as usize, cin, rng.int_range(1, 8) as usize, rng.int_range(1, 8) as usize];
            let x = rand(dims, &mut rng);
            let w = rand([1, 1, cout, cin], &mut rng);
            let b = rand([1, cout, 1, 1], &mut rng);
            let got = conv1x1(&x.cast::<f32>(), &w.cast(), Some(&b.cast())).unwrap();
            let want = conv1x1_oracle(&x, &w, Some(&b));
            assert!(got.cast::<f64>().max_abs_diff(&want).unwrap() < 1e-5);
        }
    }

    #[test]
    fn conv1x1_channel_mismatch() {
        let x = Tensor::<f32>::zeros([1, 3, 2, 2]).unwrap();
        let w = Tensor::<f32>::zeros([1, 1, 4, 2]).unwrap();
        assert!(matches!(conv1x1(&x, &w, None), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn dwconv_delta_and_counting() {
        let mut rng = Rng::new(3);
        let x = rand([1, 2, 5, 4], &mut rng);
        let delta = Tensor::from_fn([1, 2, 3, 3], |[_, _, y, xx]| if (y, xx) == (1, 1) { 1.0 } else { 0.0 }).unwrap();
        assert!(dwconv3x3(&x, &delta, None).unwrap().bitwise_eq(&x));

        let ones = Tensor::<f64>::ones([1, 1, 3, 3]).unwrap();
        let out = dwconv3x3(&ones, &ones, None).unwrap();
        assert_eq!(out.at([0, 0, 1, 1]), 9.0);
        assert_eq!(out.at([0, 0, 0, 0]), 4.0);
        assert_eq!(out.at([0, 0, 0, 1]), 6.0);
    }

    #[test]
    fn dwconv_matches_oracle() {
        let mut rng = Rng::new(4);
        for _ in 0..100 {
            let c = rng.int_range(1, 8) as usize;
            let dims = [rng.int_range(1, 2) as usize, c, rng.int_range(1, 8) as usize, rng.int_range(1, 8) as usize];
            let x = rand(dims, &mut rng);
            let w = rand([1, c, 3, 3], &mut rng);
            let got = dwconv3x3(&x.cast::<f32>(), &w.cast(), None).unwrap();
            assert!(got.cast::<f64>().max_abs_diff(&dwconv_oracle(&x, &w)).unwrap() < 1e-5);
        }
    }

    #[test]
    fn conv3x3_matches_oracle() {
        let mut rng = Rng::new(5);
        for stride in [1, 2] {
            for _ in 0..30 {
                let cin = rng.int_range(1, 4) as usize;
                let cout = rng.int_range(1, 4) as usize;
                let dims = [rng.int_range(1, 2) as usize, cin, rng.int_range(1, 8) as usize, rng.int_range(1, 8) as usize];
                let x = rand(dims, &mut rng);
                let w = rand([cout, cin, 3, 3], &mut rng);
                let got = conv3x3(&x, &w, None, stride).unwrap();
                assert!(got.max_abs_diff(&conv3x3_oracle(&x, &w, stride)).unwrap() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_oracle_and_identities() {
        let mut rng = Rng::new(6);
        let a = rand([1, 1, 4, 3], &mut rng);
        let w = rand([1, 1, 3, 2], &mut rng);
        let got = matmul_lastdim(&a, &w).unwrap();
        let mut max = 0.0f64;
        for i in 0..4 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += a.at([0, 0, i, k]) * w.at([0, 0, k, j]);
                }
                max = max.max((acc - got.at([0, 0, i, j])).abs());
            }
        }
        assert!(max < 1e-12);

        let eye = Tensor::from_fn([1, 1, 3, 3], |[_, _, i, j]| if i == j { 1.0 } else { 0.0 }).unwrap();
        assert!(matmul_lastdim(&a, &eye).unwrap().bitwise_eq(&a));
        let zero = Tensor::zeros([1, 1, 3, 5]).unwrap();
        assert!(matmul_lastdim(&a, &zero).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(matmul_lastdim(&a, &Tensor::zeros([1, 1, 4, 2]).unwrap()).is_err());
    }

    #[test]
    fn pooling_examples() {
        let x = Tensor::<f64>::from_fn([1, 1, 4, 4], |[_, _, y, xx]| (y * 4 + xx) as f64).unwrap();
        let p = adaptive_avg_pool(&x, (2, 2)).unwrap();
        assert_eq!(p.data(), &[2.5, 4.5, 10.5, 12.5]);
        assert!(adaptive_avg_pool(&x, (4, 4)).unwrap().bitwise_eq(&x));
        let c = Tensor::<f64>::full([1, 2, 5, 7], 3.25).unwrap();
        assert!(adaptive_avg_pool(&c, (3, 2)).unwrap().data().iter().all(|&v| (v - 3.25).abs() < 1e-15));
        assert!(adaptive_avg_pool(&x, (0, 1)).is_err());
        assert!(adaptive_avg_pool(&x, (5, 1)).is_err());
    }

    #[test]
    fn pooling_preserves_mean_when_divisible() {
        let mut rng = Rng::new(7);
        let x = rand([2, 3, 8, 6], &mut rng);
        let p = adaptive_avg_pool(&x, (4, 3)).unwrap();
        assert!((p.mean() - x.mean()).abs() < 1e-12);
    }

    #[test]
    fn pixel_shuffle_examples() {
        let x = Tensor::<f32>::from_vec([1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.dims(), [1, 1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(pixel_shuffle(&x, 1).unwrap().bitwise_eq(&x));
        assert!(pixel_shuffle(&Tensor::<f32>::zeros([1, 3, 1, 1]).unwrap(), 2).is_err());

        let mut rng = Rng::new(8);
        let r = rand([2, 18, 3, 2], &mut rng);
        let s = pixel_shuffle(&r, 3).unwrap();
        assert!(pixel_unshuffle(&s, 3).unwrap().bitwise_eq(&r));
        let mut a = r.to_vec();
        let mut b = s.to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
    }

    #[test]
    fn bilinear_resize_examples() {
        let x = Tensor::<f64>::from_vec([1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = bilinear_resize(&x, 2).unwrap();
        // Output (i, j) reads (j/2 − 0.25, i/2 − 0.25), clamped to [0, 1].
        let coord = |k: usize| ((k as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 1.0);
        for i in 0..4 {
            for j in 0..4 {
                let want = coord(j) + 2.0 * coord(i);
                assert!((y.at([0, 0, i, j]) - want).abs() < 1e-15);
            }
        }
        assert_eq!(y.at([0, 0, 0, 0]), 0.0);
        assert_eq!(y.at([0, 0, 0, 3]), 1.0);
        assert_eq!(y.at([0, 0, 3, 0]), 2.0);
        assert_eq!(y.at([0, 0, 3, 3]), 3.0);
        assert_eq!(y.at([0, 0, 1, 1]), 0.75);

        let c = Tensor::<f32>::full([1, 2, 3, 3], 0.7).unwrap();
        assert!(bilinear_resize(&c, 4).unwrap().data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
        let mut rng = Rng::new(9);
        let r = rand([1, 2, 3, 4], &mut rng);
        assert!(grid_sample_bilinear(&r, &upsample_grid(3, 4, 1).unwrap()).unwrap().bitwise_eq(&r));
    }

    #[test]
    fn grid_sample_degenerate_cases() {
        let x = Tensor::<f64>::from_vec([1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let g = Tensor::from_vec([1, 2, 1, 1], vec![0.5, 0.0]).unwrap();
        assert_eq!(grid_sample_bilinear(&x, &g).unwrap().data(), &[0.5]);
        let at_px = Tensor::from_vec([1, 2, 1, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(grid_sample_bilinear(&x, &at_px).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn grid_sample_matches_scalar_oracle() {
        let mut rng = Rng::new(10);
        for _ in 0..100 {
            let groups = rng.int_range(1, 2) as usize;
            let c = groups * rng.int_range(1, 3) as usize;
            let n = rng.int_range(1, 2) as usize;
            let (h, w) = (rng.int_range(1, 8) as usize, rng.int_range(1, 8) as usize);
            let (oh, ow) = (rng.int_range(1, 8) as usize, rng.int_range(1, 8) as usize);
            let x = rand([n, c, h, w], &mut rng);
            let grid = Tensor::from_fn([n, 2 * groups, oh, ow], |[_, ax, _, _]| {
                let ext = if ax % 2 == 0 { w } else { h } as f64;
                rng.uniform(-2.0, ext + 1.0)
            })
            .unwrap();
            let out = grid_sample_bilinear(&x, &grid).unwrap();
            let cg = c / groups;
            for b in 0..n {
                for ch in 0..c {
                    let grp = ch / cg;
                    for i in 0..oh {
                        for j in 0..ow {
                            let px = grid.at([b, 2 * grp, i, j]);
                            let py = grid.at([b, 2 * grp + 1, i, j]);
                            let want = sample_oracle(&x, b, ch, px, py);
                            assert!((out.at([b, ch, i, j]) - want).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    /// Central-difference check of the hand-written VJPs against the
    /// forward kernels, with `L = Σ r ⊙ f(x)` for a random `r`.
    fn fd_vjp(f: &dyn Fn(&Tensor<f64>) -> Tensor<f64>, x: &Tensor<f64>, r: &Tensor<f64>, analytic: &Tensor<f64>) -> f64 {
        let h = 1e-6;
        let mut worst = 0.0f64;
        for i in 0..x.len() {
            let mut plus = x.to_vec();
            plus[i] += h;
            let mut minus = x.to_vec();
            minus[i] -= h;
            let lp: f64 = f(&Tensor::from_vec(x.dims(), plus).unwrap()).data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
            let lm: f64 = f(&Tensor::from_vec(x.dims(), minus).unwrap()).data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
            let fd = (lp - lm) / (2.0 * h);
            let a = analytic.data()[i];
            worst = worst.max((fd - a).abs() / fd.abs().max(a.abs()).max(1e-3));
        }
        worst
    }

    #[test]
    fn kernel_vjps_match_finite_differences() {
        let mut rng = Rng::new(11);
        let x = rand([2, 3, 5, 4], &mut rng);

        let w1 = rand([1, 1, 2, 3], &mut rng);
        let r = rand([2, 2, 5, 4], &mut rng);
        let (gx, gw) = conv1x1_backward(&x, &w1, &r).unwrap();
        assert!(fd_vjp(&|t| conv1x1(t, &w1, None).unwrap(), &x, &r, &gx) < 1e-6);
        assert!(fd_vjp(&|t| conv1x1(&x, t, None).unwrap(), &w1, &r, &gw) < 1e-6);

        let wd = rand([1, 3, 3, 3], &mut rng);
        let r = rand([2, 3, 5, 4], &mut rng);
        let (gx, gw) = dwconv3x3_backward(&x, &wd, &r).unwrap();
        assert!(fd_vjp(&|t| dwconv3x3(t, &wd, None).unwrap(), &x, &r, &gx) < 1e-6);
        assert!(fd_vjp(&|t| dwconv3x3(&x, t, None).unwrap(), &wd, &r, &gw) < 1e-6);

        for stride in [1, 2] {
            let wf = rand([2, 3, 3, 3], &mut rng);
            let out = conv3x3(&x, &wf, None, stride).unwrap();
            let r = rand(out.dims(), &mut rng);
            let (gx, gw) = conv3x3_backward(&x, &wf, &r, stride).unwrap();
            assert!(fd_vjp(&|t| conv3x3(t, &wf, None, stride).unwrap(), &x, &r, &gx) < 1e-6);
            assert!(fd_vjp(&|t| conv3x3(&x, t, None, stride).unwrap(), &wf, &r, &gw) < 1e-6);
        }

        let r = rand([2, 3, 2, 3], &mut rng);
        let gx = adaptive_avg_pool_backward(x.dims(), &r).unwrap();
        assert!(fd_vjp(&|t| adaptive_avg_pool(t, (2, 3)).unwrap(), &x, &r, &gx) < 1e-6);

        let a = rand([2, 1, 3, 4], &mut rng);
        let wm = rand([1, 1, 4, 2], &mut rng);
        let r = rand([2, 1, 3, 2], &mut rng);
        let (ga, gw) = matmul_lastdim_backward(&a, &wm, &r).unwrap();
        assert!(fd_vjp(&|t| matmul_lastdim(t, &wm).unwrap(), &a, &r, &ga) < 1e-6);
        assert!(fd_vjp(&|t| matmul_lastdim(&a, t).unwrap(), &wm, &r, &gw) < 1e-6);
    }

    #[test]
    fn grid_sample_vjp_away_from_kinks() {
        let mut rng = Rng::new(12);
        let x = rand([2, 4, 5, 6], &mut rng);
        // Integer + 0.25 offsets stay clear of the bilinear kinks.
        let grid = Tensor::from_fn([2, 4, 3, 3], |[_, ax, _, _]| {
            let ext = if ax % 2 == 0 { 6 } else { 5 };
            rng.int_range(0, ext - 2) as f64 + 0.25 + 0.5 * rng.int_range(0, 1) as f64
        })
        .unwrap();
        let r = rand([2, 4, 3, 3], &mut rng);
        let (gx, gg) = grid_sample_bilinear_backward(&x, &grid, &r).unwrap();
        assert!(fd_vjp(&|t| grid_sample_bilinear(t, &grid).unwrap(), &x, &r, &gx) < 1e-6);
        assert!(fd_vjp(&|t| grid_sample_bilinear(&x, t).unwrap(), &grid, &r, &gg) < 1e-6);
    }

    #[test]
    fn out_of_range_coordinates_have_zero_gradient() {
        let x = Tensor::<f64>::from_vec([1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let grid = Tensor::from_vec([1, 2, 1, 1], vec![-0.7, 3.5]).unwrap();
        let r = Tensor::ones([1, 1, 1, 1]).unwrap();
        let (_, gg) = grid_sample_bilinear_backward(&x, &grid, &r).unwrap();
        assert_eq!(gg.data(), &[0.0, 0.0]);
        assert_eq!(grid_sample_bilinear(&x, &grid).unwrap().data(), &[2.0]);
    }
}
