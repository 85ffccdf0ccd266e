//! Differentiable operations on [`Var`].

use super::{Tape, Var};
use crate::activation as act;
use crate::element::Element;
use crate::error::{shape_err, Result};
use crate::nn;
use crate::ssm;
use crate::tensor::{reduce_to, zip_broadcast, Dims, Tensor};

fn same_tape<T: Element>(a: &Var<'_, T>, b: &Var<'_, T>) -> Result<()> {
    if std::ptr::eq(a.tape, b.tape) {
        Ok(())
    } else {
        Err(crate::Error::Internal("operands live on different tapes".into()))
    }
}

fn mul_same<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_broadcast(a, b, |x, y| x * y)
}

impl<'t, T: Element> Var<'t, T> {
    fn unary(self, f: impl Fn(T) -> T, df: fn(T) -> T) -> Var<'t, T> {
        let x = self.value();
        let y = x.map(f);
        self.tape.push(
            y,
            &[self],
            Box::new(move |g, _| {
                let data = g.data().iter().zip(x.data()).map(|(&g, &x)| g * df(x)).collect();
                Ok(vec![Some(Tensor::from_vec(x.dims(), data)?)])
            }),
        )
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(act::sigmoid, act::sigmoid_grad)
    }

    pub fn tanh(self) -> Var<'t, T> {
        self.unary(act::tanh, act::tanh_grad)
    }

    pub fn gelu(self) -> Var<'t, T> {
        self.unary(act::gelu, act::gelu_grad)
    }

    pub fn silu(self) -> Var<'t, T> {
        self.unary(act::silu, act::silu_grad)
    }

    pub fn softplus(self) -> Var<'t, T> {
        self.unary(act::softplus, act::softplus_grad)
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(|x| x.exp(), |x| x.exp())
    }

    pub fn scale(self, k: f64) -> Var<'t, T> {
        let k = T::from_f64(k);
        let y = self.value().map(|v| v * k);
        self.tape.push(y, &[self], Box::new(move |g, _| Ok(vec![Some(g.map(|v| v * k))])))
    }

    pub fn add_scalar(self, k: f64) -> Var<'t, T> {
        let k = T::from_f64(k);
        let y = self.value().map(|v| v + k);
        self.tape.push(y, &[self], Box::new(|g, _| Ok(vec![Some(g.clone())])))
    }

    /// `self + other`; `other` may broadcast (each axis equal or 1).
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(&self, &other)?;
        let (a, b) = (self.value(), other.value());
        let y = zip_broadcast(&a, &b, |x, y| x + y)?;
        let bd = b.dims();
        Ok(self.tape.push(
            y,
            &[self, other],
            Box::new(move |g, needs| {
                Ok(vec![
                    needs[0].then(|| g.clone()),
                    if needs[1] { Some(reduce_to(g, bd)?) } else { None },
                ])
            }),
        ))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(&self, &other)?;
        let (a, b) = (self.value(), other.value());
        let y = zip_broadcast(&a, &b, |x, y| x - y)?;
        let bd = b.dims();
        Ok(self.tape.push(
            y,
            &[self, other],
            Box::new(move |g, needs| {
                Ok(vec![
                    needs[0].then(|| g.clone()),
                    if needs[1] { Some(reduce_to(&g.map(|v| -v), bd)?) } else { None },
                ])
            }),
        ))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(&self, &other)?;
        let (a, b) = (self.value(), other.value());
        let y = mul_same(&a, &b)?;
        Ok(self.tape.push(
            y,
            &[self, other],
            Box::new(move |g, needs| {
                let ga = if needs[0] { Some(mul_same(g, &b)?) } else { None };
                let gb = if needs[1] {
                    Some(reduce_to(&zip_broadcast(g, &a, |x, y| x * y)?, b.dims())?)
                } else {
                    None
                };
                Ok(vec![ga, gb])
            }),
        ))
    }

    /// Sum of all elements as a `(1,1,1,1)` scalar.
    pub fn sum(self) -> Var<'t, T> {
        let x = self.value();
        let s: T = x.data().iter().copied().sum();
        let dims = x.dims();
        self.tape.push(
            Tensor::scalar(s),
            &[self],
            Box::new(move |g, _| Ok(vec![Some(Tensor::full(dims, g.data()[0])?)])),
        )
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().len().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    pub fn reshape(self, dims: Dims) -> Result<Var<'t, T>> {
        let x = self.value();
        let from = x.dims();
        let y = x.reshape(dims)?;
        Ok(self.tape.push(y, &[self], Box::new(move |g, _| Ok(vec![Some(g.reshape(from)?)]))))
    }

    /// `(…, M, K) · (K, L)` with `w` shaped `(1, 1, K, L)`.
    pub fn matmul(self, w: Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(&self, &w)?;
        let (a, wv) = (self.value(), w.value());
        let y = nn::matmul_lastdim(&a, &wv)?;
        Ok(self.tape.push(
            y,
            &[self, w],
            Box::new(move |g, needs| {
                let (ga, gw) = nn::matmul_lastdim_backward(&a, &wv, g)?;
                Ok(vec![needs[0].then_some(ga), needs[1].then_some(gw)])
            }),
        ))
    }

    pub fn conv1x1(self, w: Var<'t, T>, bias: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        same_tape(&self, &w)?;
        let (x, wv) = (self.value(), w.value());
        let y = nn::conv1x1(&x, &wv, None)?;
        let y = self.tape.push(
            y,
            &[self, w],
            Box::new(move |g, needs| {
                let (gx, gw) = nn::conv1x1_backward(&x, &wv, g)?;
                Ok(vec![needs[0].then_some(gx), needs[1].then_some(gw)])
            }),
        );
        match bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }

    pub fn dwconv3x3(self, w: Var<'t, T>, bias: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        same_tape(&self, &w)?;
        let (x, wv) = (self.value(), w.value());
        let y = nn::dwconv3x3(&x, &wv, None)?;
        let y = self.tape.push(
            y,
            &[self, w],
            Box::new(move |g, needs| {
                let (gx, gw) = nn::dwconv3x3_backward(&x, &wv, g)?;
                Ok(vec![needs[0].then_some(gx), needs[1].then_some(gw)])
            }),
        );
        match bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }

    pub fn conv3x3(self, w: Var<'t, T>, bias: Option<Var<'t, T>>, stride: usize) -> Result<Var<'t, T>> {
        same_tape(&self, &w)?;
        let (x, wv) = (self.value(), w.value());
        let y = nn::conv3x3(&x, &wv, None, stride)?;
        let y = self.tape.push(
            y,
            &[self, w],
            Box::new(move |g, needs| {
                let (gx, gw) = nn::conv3x3_backward(&x, &wv, g, stride)?;
                Ok(vec![needs[0].then_some(gx), needs[1].then_some(gw)])
            }),
        );
        match bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }

    pub fn adaptive_avg_pool(self, out_hw: (usize, usize)) -> Result<Var<'t, T>> {
        let x = self.value();
        let dims = x.dims();
        if (dims[2], dims[3]) == out_hw {
            return Ok(self);
        }
        let y = nn::adaptive_avg_pool(&x, out_hw)?;
        Ok(self.tape.push(
            y,
            &[self],
            Box::new(move |g, _| Ok(vec![Some(nn::adaptive_avg_pool_backward(dims, g)?)])),
        ))
    }

    pub fn pixel_shuffle(self, s: usize) -> Result<Var<'t, T>> {
        let y = nn::pixel_shuffle(&self.value(), s)?;
        Ok(self.tape.push(y, &[self], Box::new(move |g, _| Ok(vec![Some(nn::pixel_unshuffle(g, s)?)]))))
    }

    pub fn pixel_unshuffle(self, s: usize) -> Result<Var<'t, T>> {
        let y = nn::pixel_unshuffle(&self.value(), s)?;
        Ok(self.tape.push(y, &[self], Box::new(move |g, _| Ok(vec![Some(nn::pixel_shuffle(g, s)?)]))))
    }

    /// Bilinear sampling at `grid` (see [`nn::grid_sample_bilinear`]),
    /// differentiable in both the values and the coordinates.
    pub fn grid_sample(self, grid: Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(&self, &grid)?;
        let (x, gv) = (self.value(), grid.value());
        let y = nn::grid_sample_bilinear(&x, &gv)?;
        Ok(self.tape.push(
            y,
            &[self, grid],
            Box::new(move |g, needs| {
                let (gx, gg) = nn::grid_sample_bilinear_backward(&x, &gv, g)?;
                Ok(vec![needs[0].then_some(gx), needs[1].then_some(gg)])
            }),
        ))
    }

    pub fn bilinear_resize(self, s: usize) -> Result<Var<'t, T>> {
        if s == 1 {
            return Ok(self);
        }
        let [_, _, h, w] = self.dims();
        let grid = self.tape.constant(nn::upsample_grid(h, w, s)?);
        self.grid_sample(grid)
    }

    pub fn slice_channels(self, start: usize, end: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let dims = x.dims();
        if start == 0 && end == dims[1] {
            return Ok(self);
        }
        let y = x.slice_channels(start, end)?;
        Ok(self.tape.push(
            y,
            &[self],
            Box::new(move |g, _| {
                let [n, c, h, w] = dims;
                let plane = h * w;
                let mut out = vec![T::ZERO; n * c * plane];
                let k = end - start;
                for b in 0..n {
                    let dst = (b * c + start) * plane;
                    out[dst..dst + k * plane].copy_from_slice(&g.data()[b * k * plane..(b + 1) * k * plane]);
                }
                Ok(vec![Some(Tensor::from_vec(dims, out)?)])
            }),
        ))
    }

    /// Columns `[start, end)` of the last axis.
    pub fn slice_lastdim(self, start: usize, end: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let dims = x.dims();
        let [n, c, h, w] = dims;
        if start > end || end > w {
            return Err(shape_err!("last-axis slice {start}..{end} of {w}"));
        }
        let k = end - start;
        let rows = n * c * h;
        let mut out = Vec::with_capacity(rows * k);
        for r in 0..rows {
            out.extend_from_slice(&x.data()[r * w + start..r * w + end]);
        }
        let y = Tensor::from_vec([n, c, h, k], out)?;
        Ok(self.tape.push(
            y,
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![T::ZERO; rows * w];
                for r in 0..rows {
                    gx[r * w + start..r * w + end].copy_from_slice(&g.data()[r * k..(r + 1) * k]);
                }
                Ok(vec![Some(Tensor::from_vec(dims, gx)?)])
            }),
        ))
    }

    /// `(N, C, H, W) → (N, 1, H·W, C)`: one token per pixel, row-major.
    pub fn to_tokens(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let dims = x.dims();
        let [n, c, h, w] = dims;
        let p = h * w;
        let mut out = vec![T::ZERO; x.len()];
        for b in 0..n {
            for ch in 0..c {
                for i in 0..p {
                    out[(b * p + i) * c + ch] = x.data()[(b * c + ch) * p + i];
                }
            }
        }
        let y = Tensor::from_vec([n, 1, p, c], out)?;
        Ok(self.tape.push(
            y,
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![T::ZERO; n * c * p];
                for b in 0..n {
                    for ch in 0..c {
                        for i in 0..p {
                            gx[(b * c + ch) * p + i] = g.data()[(b * p + i) * c + ch];
                        }
                    }
                }
                Ok(vec![Some(Tensor::from_vec(dims, gx)?)])
            }),
        ))
    }

    /// Mean of token rows `[start, end)` of `(N, 1, L, C)` → `(N, 1, 1, C)`.
    pub fn row_mean(self, start: usize, end: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let dims = x.dims();
        let [n, one, l, c] = dims;
        if one != 1 || start >= end || end > l {
            return Err(shape_err!("row_mean {start}..{end} on {dims:?}"));
        }
        let inv = T::from_f64(1.0 / (end - start) as f64);
        let mut out = vec![T::ZERO; n * c];
        for b in 0..n {
            for r in start..end {
                let row = &x.data()[(b * l + r) * c..(b * l + r + 1) * c];
                for (o, &v) in out[b * c..(b + 1) * c].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        for v in &mut out {
            *v *= inv;
        }
        let y = Tensor::from_vec([n, 1, 1, c], out)?;
        Ok(self.tape.push(
            y,
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![T::ZERO; n * l * c];
                for b in 0..n {
                    for r in start..end {
                        for ch in 0..c {
                            gx[(b * l + r) * c + ch] = g.data()[b * c + ch] * inv;
                        }
                    }
                }
                Ok(vec![Some(Tensor::from_vec(dims, gx)?)])
            }),
        ))
    }

    /// Reverses the order of the rows (axis 2).
    pub fn flip_rows(self) -> Result<Var<'t, T>> {
        let y = flip_rows(&self.value())?;
        Ok(self.tape.push(y, &[self], Box::new(|g, _| Ok(vec![Some(flip_rows(g)?)]))))
    }

    /// ZOH decay `Ā[n,l,e,s] = exp(Δ[n,0,l,e]·A[0,0,e,s])`, shape `(N, L, E, S)`.
    pub fn ssm_decay(self, a: Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(&self, &a)?;
        let (delta, av) = (self.value(), a.value());
        let abar = ssm::decay_forward(&delta, &av)?;
        let saved = abar.clone();
        Ok(self.tape.push(
            abar,
            &[self, a],
            Box::new(move |g, needs| {
                let (gd, ga) = ssm::decay_backward(&delta, &av, &saved, g)?;
                Ok(vec![needs[0].then_some(gd), needs[1].then_some(ga)])
            }),
        ))
    }

    /// Discretized input `B̄u[n,l,e,s] = Δ[n,0,l,e]·B[n,0,l,s]·u[n,0,l,e]`.
    pub fn ssm_input(self, b: Var<'t, T>, u: Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(&self, &b)?;
        same_tape(&self, &u)?;
        let (delta, bv, uv) = (self.value(), b.value(), u.value());
        let y = ssm::input_forward(&delta, &bv, &uv)?;
        Ok(self.tape.push(
            y,
            &[self, b, u],
            Box::new(move |g, needs| {
                let (gd, gb, gu) = ssm::input_backward(&delta, &bv, &uv, g)?;
                Ok(vec![needs[0].then_some(gd), needs[1].then_some(gb), needs[2].then_some(gu)])
            }),
        ))
    }

    /// Selective scan `x_k = Ā_k ⊙ x_{k−1} + B̄u_k`, `y_k = ⟨C_k, x_k⟩ + d ⊙ u_k`
    /// with `x_0 = 0`. `self` is `Ā`.
    pub fn selective_scan(
        self,
        bu: Var<'t, T>,
        c: Var<'t, T>,
        u: Var<'t, T>,
        d: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        for v in [&bu, &c, &u, &d] {
            same_tape(&self, v)?;
        }
        let (abar, buv, cv, uv, dv) = (self.value(), bu.value(), c.value(), u.value(), d.value());
        let (y, states) = ssm::scan_with_states(&abar, &buv, &cv, &uv, &dv)?;
        Ok(self.tape.push(
            y,
            &[self, bu, c, u, d],
            Box::new(move |g, needs| {
                let grads = ssm::scan_backward(&abar, &cv, &uv, &dv, &states, g)?;
                Ok(vec![
                    needs[0].then_some(grads.abar),
                    needs[1].then_some(grads.bu),
                    needs[2].then_some(grads.c),
                    needs[3].then_some(grads.u),
                    needs[4].then_some(grads.d),
                ])
            }),
        ))
    }

    /// Mean binary cross-entropy against a fixed target; predictions are
    /// clamped to `[ε, 1−ε]` with `ε = 1e-7`.
    pub fn bce_loss(self, target: &Tensor<T>) -> Result<Var<'t, T>> {
        let p = self.value();
        if p.dims() != target.dims() {
            return Err(shape_err!("bce_loss: prediction {:?} vs target {:?}", p.dims(), target.dims()));
        }
        let loss = crate::train::bce_value(&p, target)?;
        let target = target.clone();
        let n = T::from_f64(p.len() as f64);
        let eps = T::from_f64(crate::train::BCE_EPS);
        Ok(self.tape.push(
            Tensor::scalar(T::from_f64(loss)),
            &[self],
            Box::new(move |g, _| {
                let g0 = g.data()[0];
                let data = p
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&pv, &t)| {
                        if pv < eps || pv > T::ONE - eps {
                            T::ZERO
                        } else {
                            g0 * (pv - t) / (pv * (T::ONE - pv)) / n
                        }
                    })
                    .collect();
                Ok(vec![Some(Tensor::from_vec(p.dims(), data)?)])
            }),
        ))
    }
}

fn flip_rows<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims();
    let mut out = Vec::with_capacity(x.len());
    for plane in 0..n * c {
        for r in (0..h).rev() {
            let start = (plane * h + r) * w;
            out.extend_from_slice(&x.data()[start..start + w]);
        }
    }
    Tensor::from_vec(x.dims(), out)
}

/// Concatenates along the channel axis.
pub fn concat_channels<'t, T: Element>(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let first = parts.first().ok_or_else(|| shape_err!("concat of zero tensors"))?;
    if parts.len() == 1 {
        return Ok(*first);
    }
    let values: Vec<Tensor<T>> = parts.iter().map(|p| p.value()).collect();
    let [n, _, h, w] = values[0].dims();
    let mut widths = Vec::with_capacity(parts.len());
    for (p, v) in parts.iter().zip(&values) {
        same_tape(first, p)?;
        let d = v.dims();
        if (d[0], d[2], d[3]) != (n, h, w) {
            return Err(shape_err!("concat_channels {:?} with {:?}", values[0].dims(), d));
        }
        widths.push(d[1]);
    }
    let c: usize = widths.iter().sum();
    let plane = h * w;
    let mut out = Vec::with_capacity(n * c * plane);
    for b in 0..n {
        for (v, &k) in values.iter().zip(&widths) {
            out.extend_from_slice(&v.data()[b * k * plane..(b + 1) * k * plane]);
        }
    }
    let y = Tensor::from_vec([n, c, h, w], out)?;
    let tape: &Tape<T> = first.tape;
    Ok(tape.push(
        y,
        parts,
        Box::new(move |g, needs| {
            let mut grads = Vec::with_capacity(widths.len());
            let mut offset = 0;
            for (i, &k) in widths.iter().enumerate() {
                if needs[i] {
                    grads.push(Some(g.slice_channels(offset, offset + k)?));
                } else {
                    grads.push(None);
                }
                offset += k;
            }
            Ok(grads)
        }),
    ))
}

/// Concatenates `(N, 1, L_i, C)` token sequences along the row axis.
pub fn concat_rows<'t, T: Element>(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let first = parts.first().ok_or_else(|| shape_err!("concat of zero tensors"))?;
    let values: Vec<Tensor<T>> = parts.iter().map(|p| p.value()).collect();
    let [n, one, _, c] = values[0].dims();
    let mut lens = Vec::with_capacity(parts.len());
    for (p, v) in parts.iter().zip(&values) {
        same_tape(first, p)?;
        let d = v.dims();
        if (d[0], d[1], d[3]) != (n, one, c) || one != 1 {
            return Err(shape_err!("concat_rows {:?} with {:?}", values[0].dims(), d));
        }
        lens.push(d[2]);
    }
    let total: usize = lens.iter().sum();
    let mut out = Vec::with_capacity(n * total * c);
    for b in 0..n {
        for (v, &l) in values.iter().zip(&lens) {
            out.extend_from_slice(&v.data()[b * l * c..(b + 1) * l * c]);
        }
    }
    let y = Tensor::from_vec([n, 1, total, c], out)?;
    let tape: &Tape<T> = first.tape;
    Ok(tape.push(
        y,
        parts,
        Box::new(move |g, needs| {
            let mut grads = Vec::with_capacity(lens.len());
            let mut offset = 0;
            for (i, &l) in lens.iter().enumerate() {
                if needs[i] {
                    let mut part = Vec::with_capacity(n * l * c);
                    for b in 0..n {
                        let start = (b * total + offset) * c;
                        part.extend_from_slice(&g.data()[start..start + l * c]);
                    }
                    grads.push(Some(Tensor::from_vec([n, 1, l, c], part)?));
                } else {
                    grads.push(None);
                }
                offset += l;
            }
            Ok(grads)
        }),
    ))
}
