//! Brute-force scalar references for the optimized kernels.
//!
//! Every function here is a direct transcription of its definition with
//! per-element indexing and no shared code with the kernels it checks.

use crate::tensor::Tensor;

/// `y[n,o,y,x] = b[o] + Σ_k w[o,k]·x[n,k,y,x]`, weight `(1, 1, C_out, C_in)`.
pub fn conv1x1(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Tensor<f64> {
    let [n, cin, h, ww] = x.dims();
    let cout = w.dims()[2];
    Tensor::from_fn([n, cout, h, ww], |[i, o, y, xx]| {
        let mut acc = b.map_or(0.0, |b| b.at([0, o, 0, 0]));
        for k in 0..cin {
            acc += w.at([0, 0, o, k]) * x.at([i, k, y, xx]);
        }
        acc
    })
    .expect("conv1x1 oracle dims")
}

/// Per-channel 3×3 cross-correlation with zero padding, weight `(1, C, 3, 3)`.
pub fn dwconv3x3(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Tensor<f64> {
    let [_, _, h, ww] = x.dims();
    Tensor::from_fn(x.dims(), |[i, c, y, xx]| {
        let mut acc = b.map_or(0.0, |b| b.at([0, c, 0, 0]));
        for ky in 0..3i64 {
            for kx in 0..3i64 {
                let sy = y as i64 + ky - 1;
                let sx = xx as i64 + kx - 1;
                if (0..h as i64).contains(&sy) && (0..ww as i64).contains(&sx) {
                    acc += w.at([0, c, ky as usize, kx as usize]) * x.at([i, c, sy as usize, sx as usize]);
                }
            }
        }
        acc
    })
    .expect("dwconv oracle dims")
}

/// Full 3×3 convolution with padding 1, weight `(C_out, C_in, 3, 3)`.
pub fn conv3x3(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: usize) -> Tensor<f64> {
    let [n, cin, h, ww] = x.dims();
    let cout = w.dims()[0];
    let (oh, ow) = ((h - 1) / stride + 1, (ww - 1) / stride + 1);
    Tensor::from_fn([n, cout, oh, ow], |[i, o, y, xx]| {
        let mut acc = b.map_or(0.0, |b| b.at([0, o, 0, 0]));
        for k in 0..cin {
            for ky in 0..3 {
                for kx in 0..3 {
                    let sy = (y * stride + ky) as i64 - 1;
                    let sx = (xx * stride + kx) as i64 - 1;
                    if (0..h as i64).contains(&sy) && (0..ww as i64).contains(&sx) {
                        acc += w.at([o, k, ky, kx]) * x.at([i, k, sy as usize, sx as usize]);
                    }
                }
            }
        }
        acc
    })
    .expect("conv3x3 oracle dims")
}

/// Mean over windows `[⌊i·H/h⌋, ⌈(i+1)·H/h⌉)`.
pub fn adaptive_avg_pool(x: &Tensor<f64>, oh: usize, ow: usize) -> Tensor<f64> {
    let [n, c, h, w] = x.dims();
    Tensor::from_fn([n, c, oh, ow], |[b, ch, i, j]| {
        let window = |k: usize, n: usize, out: usize| {
            ((k * n) as f64 / out as f64).floor() as usize..(((k + 1) * n) as f64 / out as f64).ceil() as usize
        };
        let (ys, xs) = (window(i, h, oh), window(j, w, ow));
        let count = ys.len() * xs.len();
        let mut acc = 0.0;
        for y in ys {
            for xx in xs.clone() {
                acc += x.at([b, ch, y, xx]);
            }
        }
        acc / count as f64
    })
    .expect("pool oracle dims")
}

/// `out[n, c, s·y+i, s·x+j] = in[n, c·s² + i·s + j, y, x]`.
pub fn pixel_shuffle(x: &Tensor<f64>, s: usize) -> Tensor<f64> {
    let [n, cs, h, w] = x.dims();
    Tensor::from_fn([n, cs / (s * s), h * s, w * s], |[b, c, oy, ox]| {
        x.at([b, c * s * s + (oy % s) * s + ox % s, oy / s, ox / s])
    })
    .expect("pixel shuffle oracle dims")
}

/// Bilinear read of channel `c` at `(px, py)` clamped to the map, as a sum
/// of tent weights over every pixel.
pub fn sample(x: &Tensor<f64>, n: usize, c: usize, px: f64, py: f64) -> f64 {
    let [_, _, h, w] = x.dims();
    let cx = px.clamp(0.0, (w - 1) as f64);
    let cy = py.clamp(0.0, (h - 1) as f64);
    let mut acc = 0.0;
    for qy in 0..h {
        for qx in 0..w {
            let wx = (1.0 - (cx - qx as f64).abs()).max(0.0);
            let wy = (1.0 - (cy - qy as f64).abs()).max(0.0);
            acc += wx * wy * x.at([n, c, qy, qx]);
        }
    }
    acc
}

/// Grouped grid sampling: channel group `g` reads grid channels `2g, 2g+1`.
pub fn grid_sample(x: &Tensor<f64>, grid: &Tensor<f64>) -> Tensor<f64> {
    let [_, c, _, _] = x.dims();
    let [gn, g2, oh, ow] = grid.dims();
    let per = c / (g2 / 2);
    Tensor::from_fn([x.dims()[0], c, oh, ow], |[b, ch, i, j]| {
        let gb = if gn == 1 { 0 } else { b };
        let g = ch / per;
        sample(x, b, ch, grid.at([gb, 2 * g, i, j]), grid.at([gb, 2 * g + 1, i, j]))
    })
    .expect("grid sample oracle dims")
}

/// ×`s` upsample reading input `((j+0.5)/s − 0.5, (i+0.5)/s − 0.5)`.
pub fn bilinear_resize(x: &Tensor<f64>, s: usize) -> Tensor<f64> {
    let [n, c, h, w] = x.dims();
    let coord = |k: usize| (k as f64 + 0.5) / s as f64 - 0.5;
    Tensor::from_fn([n, c, h * s, w * s], |[b, ch, i, j]| sample(x, b, ch, coord(j), coord(i))).expect("resize oracle dims")
}

/// The selective-scan recurrence, one channel and one state at a time.
/// Shapes: `abar`, `bu` `(N, L, D, S)`; `c` `(N, 1, L, S)`; `d` `(1, 1, 1, D)`;
/// `u` `(N, 1, L, D)`.
pub fn scan(abar: &Tensor<f64>, bu: &Tensor<f64>, c: &Tensor<f64>, d: &Tensor<f64>, u: &Tensor<f64>) -> Tensor<f64> {
    let [n, l, dd, s] = abar.dims();
    let mut y = vec![0.0; n * l * dd];
    for b in 0..n {
        for e in 0..dd {
            let mut x = vec![0.0; s];
            for k in 0..l {
                let mut acc = 0.0;
                for j in 0..s {
                    x[j] = abar.at([b, k, e, j]) * x[j] + bu.at([b, k, e, j]);
                    acc += c.at([b, 0, k, j]) * x[j];
                }
                y[(b * l + k) * dd + e] = acc + d.at([0, 0, 0, e]) * u.at([b, 0, k, e]);
            }
        }
    }
    Tensor::from_vec([n, 1, l, dd], y).expect("scan oracle dims")
}

/// Repeats a `(N, C, 1, 1)` (or `(1, C, 1, 1)`) tensor over `H×W` and the batch.
pub fn tile(v: &Tensor<f64>, n: usize, h: usize, w: usize) -> Tensor<f64> {
    let [vn, c, _, _] = v.dims();
    Tensor::from_fn([n, c, h, w], |[b, ch, _, _]| v.at([if vn == 1 { 0 } else { b }, ch, 0, 0])).expect("tile dims")
}

/// Fraction of pixels where `pred ≥ τ` agrees with `target ≥ 0.5`, by counting.
pub fn pixel_accuracy(pred: &[f64], target: &[f64], tau: f64) -> f64 {
    let mut hits = 0usize;
    for i in 0..pred.len() {
        if (pred[i] >= tau) == (target[i] >= 0.5) {
            hits += 1;
        }
    }
    hits as f64 / pred.len() as f64
}

pub fn mae(pred: &[f64], target: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..pred.len() {
        acc += (pred[i] - target[i]).abs();
    }
    acc / pred.len() as f64
}
