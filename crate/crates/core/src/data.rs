//! Synthetic saliency data: flat shapes on a noisy background.

use crate::element::Element;
use crate::error::{contract_err, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct SynthSample<T> {
    /// `(1, 3, H, W)` in `[0, 1]`.
    pub image: Tensor<T>,
    /// `(1, 1, H, W)`, exactly 0 or 1.
    pub mask: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Circle { cx: f64, cy: f64, r: f64 },
    Triangle([(f64, f64); 3]),
}

impl Shape {
    fn random(w: f64, h: f64, rng: &mut Rng) -> Shape {
        let side = w.min(h);
        match rng.int_range(0, 2) {
            0 => {
                let (sw, sh) = (rng.uniform(0.15, 0.45) * w, rng.uniform(0.15, 0.45) * h);
                let (x0, y0) = (rng.uniform(0.0, w - sw), rng.uniform(0.0, h - sh));
                Shape::Rect {
                    x0,
                    y0,
                    x1: x0 + sw,
                    y1: y0 + sh,
                }
            }
            1 => {
                let r = rng.uniform(0.1, 0.25) * side;
                Shape::Circle {
                    cx: rng.uniform(r, w - r),
                    cy: rng.uniform(r, h - r),
                    r,
                }
            }
            _ => {
                let size = rng.uniform(0.3, 0.6) * side;
                let (ox, oy) = (rng.uniform(0.0, w - size), rng.uniform(0.0, h - size));
                // Flat base with a random apex keeps triangles from degenerating.
                let v = [(ox, oy + size), (ox + size, oy + size), (ox + rng.uniform(0.0, size), oy)];
                Shape::Triangle(v)
            }
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Circle { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Triangle([a, b, c]) => {
                let cross = |p: (f64, f64), q: (f64, f64)| (q.0 - p.0) * (y - p.1) - (q.1 - p.1) * (x - p.0);
                let (d0, d1, d2) = (cross(a, b), cross(b, c), cross(c, a));
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
        }
    }
}

fn distinct_color(avoid: &[[f64; 3]], rng: &mut Rng) -> [f64; 3] {
    let mut best = [0.0; 3];
    let mut best_dist = -1.0;
    for _ in 0..64 {
        let c = [rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)];
        let dist = avoid
            .iter()
            .map(|a| (0..3).map(|i| (a[i] - c[i]).abs()).fold(0.0, f64::max))
            .fold(f64::INFINITY, f64::min);
        if dist >= 0.35 {
            return c;
        }
        if dist > best_dist {
            best = c;
            best_dist = dist;
        }
    }
    best
}

/// One sample drawn from `rng`.
pub fn synth_sample<T: Element>(h: usize, w: usize, rng: &mut Rng) -> Result<SynthSample<T>> {
    let background = [rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)];
    let count = rng.int_range(1, 3) as usize;
    let mut colors = vec![background];
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        shapes.push(Shape::random(w as f64, h as f64, rng));
        colors.push(distinct_color(&colors, rng));
    }
    let plane = h * w;
    let mut img = vec![T::ZERO; 3 * plane];
    let mut mask = vec![T::ZERO; plane];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            // Later shapes paint over earlier ones.
            let owner = shapes.iter().rposition(|s| s.contains(px, py));
            let color = match owner {
                Some(k) => {
                    mask[y * w + x] = T::ONE;
                    colors[k + 1]
                }
                None => background,
            };
            for ch in 0..3 {
                let v = color[ch] + rng.uniform(-0.05, 0.05);
                img[ch * plane + y * w + x] = T::from_f64(v.clamp(0.0, 1.0));
            }
        }
    }
    Ok(SynthSample {
        image: Tensor::from_vec([1, 3, h, w], img)?,
        mask: Tensor::from_vec([1, 1, h, w], mask)?,
    })
}

/// `n` samples, fully determined by `rng`'s state.
pub fn synth_dataset<T: Element>(n: usize, h: usize, w: usize, rng: &mut Rng) -> Result<Vec<SynthSample<T>>> {
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(contract_err!("synthetic images must be a positive multiple of 32, got {h}×{w}"));
    }
    (0..n).map(|_| synth_sample(h, w, rng)).collect()
}

/// Stacks samples into `(N, 3, H, W)` images and `(N, 1, H, W)` masks.
pub fn collate<T: Element>(samples: &[SynthSample<T>]) -> Result<(Tensor<T>, Tensor<T>)> {
    let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
    let masks: Vec<_> = samples.iter().map(|s| s.mask.clone()).collect();
    Ok((Tensor::stack_batch(&images)?, Tensor::stack_batch(&masks)?))
}
