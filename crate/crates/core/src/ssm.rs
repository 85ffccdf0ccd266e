//! Selective state-space recurrence.
//!
//! Sequences are stored as `(N, 1, L, D)` tensors (one row per timestep).
//! Discretized parameters are timestep-major `(N, L, D, S)` tensors with a
//! diagonal state matrix per channel:
//!
//! ```text
//! Δ_k  = softplus(u_k·W_Δ + b_Δ)          (N, 1, L, D)
//! Ā_k  = exp(Δ_k ⊙ A),  A = −exp(a_log)   (N, L, D, S)
//! B̄u_k = Δ_k ⊙ (u_k·W_B) ⊙ u_k            (N, L, D, S)
//! C_k  = u_k·W_C                          (N, 1, L, S)
//! x_k  = Ā_k ⊙ x_{k−1} + B̄u_k,  x_0 = 0
//! y_k  = ⟨C_k, x_k⟩ + d ⊙ u_k
//! ```

use crate::activation::softplus;
use crate::autodiff::Var;
use crate::element::Element;
use crate::error::{contract_err, shape_err, Error, Result};
use crate::nn::matmul_lastdim;
use crate::params::{scaled_normal, Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{zip_broadcast, Tensor};

/// Static (input-independent) parameters of one selective SSM of width `D`
/// and state size `S`.
#[derive(Clone, Debug)]
pub struct SsmStaticParams<T> {
    /// `(1, 1, D, S)`; `A = −exp(a_log)`.
    pub a_log: Tensor<T>,
    /// `(1, 1, D, D)`.
    pub w_delta: Tensor<T>,
    /// `(1, 1, 1, D)`.
    pub delta_bias: Tensor<T>,
    /// `(1, 1, D, S)`.
    pub w_b: Tensor<T>,
    /// `(1, 1, D, S)`.
    pub w_c: Tensor<T>,
    /// `(1, 1, 1, D)`.
    pub d_skip: Tensor<T>,
}

impl<T: Element> SsmStaticParams<T> {
    pub fn width(&self) -> usize {
        self.a_log.dims()[2]
    }

    pub fn state_size(&self) -> usize {
        self.a_log.dims()[3]
    }

    fn validate(&self) -> Result<()> {
        let (d, s) = (self.width(), self.state_size());
        let expect = [
            ("a_log", &self.a_log, [1, 1, d, s]),
            ("w_delta", &self.w_delta, [1, 1, d, d]),
            ("delta_bias", &self.delta_bias, [1, 1, 1, d]),
            ("w_b", &self.w_b, [1, 1, d, s]),
            ("w_c", &self.w_c, [1, 1, d, s]),
            ("d_skip", &self.d_skip, [1, 1, 1, d]),
        ];
        for (name, t, dims) in expect {
            if t.dims() != dims {
                return Err(shape_err!("ssm {name}: {:?}, expected {dims:?}", t.dims()));
            }
            t.ensure_finite(name)?;
        }
        Ok(())
    }

    /// Random parameters in the usual selective-SSM ranges.
    pub fn random(d: usize, s: usize, rng: &mut Rng) -> Result<Self> {
        Ok(SsmStaticParams {
            a_log: Tensor::from_fn([1, 1, d, s], |[_, _, _, j]| T::from_f64(((j + 1) as f64).ln()))?,
            w_delta: scaled_normal([1, 1, d, d], d, 0.5, rng)?,
            delta_bias: Tensor::uniform([1, 1, 1, d], -4.0, -1.0, rng)?,
            w_b: scaled_normal([1, 1, d, s], d, 1.0, rng)?,
            w_c: scaled_normal([1, 1, d, s], d, 1.0, rng)?,
            d_skip: Tensor::ones([1, 1, 1, d])?,
        })
    }
}

/// Per-timestep discretized parameters of a batch of sequences.
#[derive(Clone, Debug)]
pub struct ScanParams<T> {
    /// `(N, L, D, S)`.
    pub abar: Tensor<T>,
    /// `(N, L, D, S)`, input already multiplied in.
    pub bu: Tensor<T>,
    /// `(N, 1, L, S)`.
    pub c: Tensor<T>,
}

impl<T: Element> ScanParams<T> {
    fn dims(&self) -> Result<(usize, usize, usize, usize)> {
        let [n, l, d, s] = self.abar.dims();
        if self.bu.dims() != [n, l, d, s] {
            return Err(shape_err!("scan: Ā {:?} vs B̄u {:?}", self.abar.dims(), self.bu.dims()));
        }
        if self.c.dims() != [n, 1, l, s] {
            return Err(shape_err!("scan: C {:?}, expected [{n}, 1, {l}, {s}]", self.c.dims()));
        }
        Ok((n, l, d, s))
    }
}

fn check_seq<T: Element>(u: &Tensor<T>, what: &str) -> Result<(usize, usize, usize)> {
    let [n, one, l, d] = u.dims();
    if one != 1 {
        return Err(shape_err!("{what}: sequence must be (N, 1, L, D), got {:?}", u.dims()));
    }
    if l == 0 {
        return Err(contract_err!("{what}: sequence length must be >= 1"));
    }
    Ok((n, l, d))
}

/// Generates the per-timestep scan parameters from the input sequence.
pub fn discretize<T: Element>(u: &Tensor<T>, p: &SsmStaticParams<T>) -> Result<ScanParams<T>> {
    check_seq(u, "discretize")?;
    p.validate().map_err(|e| match e {
        Error::Numeric(m) => Error::Numeric(format!("discretize: {m}")),
        other => other,
    })?;
    if u.dims()[3] != p.width() {
        return Err(shape_err!("discretize: input width {} vs parameter width {}", u.dims()[3], p.width()));
    }
    let pre = zip_broadcast(&matmul_lastdim(u, &p.w_delta)?, &p.delta_bias, |a, b| a + b)?;
    let delta = pre.map(softplus);
    let b = matmul_lastdim(u, &p.w_b)?;
    let c = matmul_lastdim(u, &p.w_c)?;
    let a = p.a_log.map(|v| -v.exp());
    let sp = ScanParams {
        abar: decay_forward(&delta, &a)?,
        bu: input_forward(&delta, &b, u)?,
        c,
    };
    sp.abar.ensure_finite("discretize Ā")?;
    sp.bu.ensure_finite("discretize B̄u")?;
    Ok(sp)
}

pub(crate) fn decay_forward<T: Element>(delta: &Tensor<T>, a: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, l, d) = check_seq(delta, "ssm decay")?;
    let s = a.dims()[3];
    if a.dims() != [1, 1, d, s] {
        return Err(shape_err!("ssm decay: A {:?} for width {d}", a.dims()));
    }
    let (dd, ad) = (delta.data(), a.data());
    let mut out = Vec::with_capacity(n * l * d * s);
    for t in 0..n * l {
        for e in 0..d {
            let dt = dd[t * d + e];
            for j in 0..s {
                out.push((dt * ad[e * s + j]).exp());
            }
        }
    }
    Tensor::from_vec([n, l, d, s], out)
}

pub(crate) fn decay_backward<T: Element>(
    delta: &Tensor<T>,
    a: &Tensor<T>,
    abar: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let [n, l, d, s] = abar.dims();
    let (dd, ad, bd, gd) = (delta.data(), a.data(), abar.data(), g.data());
    let mut gdelta = vec![T::ZERO; n * l * d];
    let mut ga = vec![T::ZERO; d * s];
    for t in 0..n * l {
        for e in 0..d {
            let dt = dd[t * d + e];
            let mut acc = T::ZERO;
            for j in 0..s {
                let k = (t * d + e) * s + j;
                let ge = gd[k] * bd[k];
                acc += ge * ad[e * s + j];
                ga[e * s + j] += ge * dt;
            }
            gdelta[t * d + e] = acc;
        }
    }
    Ok((Tensor::from_vec(delta.dims(), gdelta)?, Tensor::from_vec(a.dims(), ga)?))
}

pub(crate) fn input_forward<T: Element>(delta: &Tensor<T>, b: &Tensor<T>, u: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, l, d) = check_seq(delta, "ssm input")?;
    let s = b.dims()[3];
    if b.dims() != [n, 1, l, s] || u.dims() != delta.dims() {
        return Err(shape_err!(
            "ssm input: Δ {:?}, B {:?}, u {:?}",
            delta.dims(),
            b.dims(),
            u.dims()
        ));
    }
    let (dd, bd, ud) = (delta.data(), b.data(), u.data());
    let mut out = Vec::with_capacity(n * l * d * s);
    for t in 0..n * l {
        for e in 0..d {
            let du = dd[t * d + e] * ud[t * d + e];
            for j in 0..s {
                out.push(du * bd[t * s + j]);
            }
        }
    }
    Tensor::from_vec([n, l, d, s], out)
}

pub(crate) fn input_backward<T: Element>(
    delta: &Tensor<T>,
    b: &Tensor<T>,
    u: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [n, _, l, d] = delta.dims();
    let s = b.dims()[3];
    let (dd, bd, ud, gd) = (delta.data(), b.data(), u.data(), g.data());
    let mut gdelta = vec![T::ZERO; n * l * d];
    let mut gb = vec![T::ZERO; n * l * s];
    let mut gu = vec![T::ZERO; n * l * d];
    for t in 0..n * l {
        for e in 0..d {
            let (dt, ut) = (dd[t * d + e], ud[t * d + e]);
            let mut gbsum = T::ZERO;
            for j in 0..s {
                let ge = gd[(t * d + e) * s + j];
                gbsum += ge * bd[t * s + j];
                gb[t * s + j] += ge * dt * ut;
            }
            gdelta[t * d + e] = gbsum * ut;
            gu[t * d + e] = gbsum * dt;
        }
    }
    Ok((
        Tensor::from_vec(delta.dims(), gdelta)?,
        Tensor::from_vec(b.dims(), gb)?,
        Tensor::from_vec(u.dims(), gu)?,
    ))
}

fn check_scan_inputs<T: Element>(sp: &ScanParams<T>, d_skip: &Tensor<T>, u: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let (n, l, d, s) = sp.dims()?;
    if u.dims() != [n, 1, l, d] {
        return Err(shape_err!("scan: u {:?}, expected [{n}, 1, {l}, {d}]", u.dims()));
    }
    if d_skip.dims() != [1, 1, 1, d] {
        return Err(shape_err!("scan: d_skip {:?}, expected [1, 1, 1, {d}]", d_skip.dims()));
    }
    Ok((n, l, d, s))
}

/// `y_k = ⟨C_k, x_k⟩ + d ⊙ u_k` for one timestep. Shared by every scan
/// variant so their readouts round identically.
#[inline]
fn readout<T: Element>(state: &[T], c: &[T], d_skip: &[T], u: &[T], y: &mut [T]) {
    let s = c.len();
    for (e, ye) in y.iter_mut().enumerate() {
        let mut acc = T::ZERO;
        for j in 0..s {
            acc += c[j] * state[e * s + j];
        }
        *ye = acc + d_skip[e] * u[e];
    }
}

/// Sequential scan; the reference every other variant is checked against.
pub fn scan_sequential<T: Element>(sp: &ScanParams<T>, d_skip: &Tensor<T>, u: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(scan_impl(sp, d_skip, u, false)?.0)
}

pub(crate) fn scan_with_states<T: Element>(
    abar: &Tensor<T>,
    bu: &Tensor<T>,
    c: &Tensor<T>,
    u: &Tensor<T>,
    d_skip: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let sp = ScanParams {
        abar: abar.clone(),
        bu: bu.clone(),
        c: c.clone(),
    };
    let (y, states) = scan_impl(&sp, d_skip, u, true)?;
    Ok((y, states.expect("states requested")))
}

fn scan_impl<T: Element>(
    sp: &ScanParams<T>,
    d_skip: &Tensor<T>,
    u: &Tensor<T>,
    keep_states: bool,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    let (n, l, d, s) = check_scan_inputs(sp, d_skip, u)?;
    let (ad, bd, cd, ud, dd) = (sp.abar.data(), sp.bu.data(), sp.c.data(), u.data(), d_skip.data());
    let ds = d * s;
    let mut y = vec![T::ZERO; n * l * d];
    let mut states = if keep_states { vec![T::ZERO; n * l * ds] } else { Vec::new() };
    let mut x = vec![T::ZERO; ds];
    for b in 0..n {
        x.iter_mut().for_each(|v| *v = T::ZERO);
        for k in 0..l {
            let t = b * l + k;
            let (ak, bk) = (&ad[t * ds..(t + 1) * ds], &bd[t * ds..(t + 1) * ds]);
            for i in 0..ds {
                x[i] = ak[i] * x[i] + bk[i];
            }
            readout(&x, &cd[t * s..(t + 1) * s], dd, &ud[t * d..(t + 1) * d], &mut y[t * d..(t + 1) * d]);
            if keep_states {
                states[t * ds..(t + 1) * ds].copy_from_slice(&x);
            }
        }
    }
    let y = Tensor::from_vec([n, 1, l, d], y)?;
    let states = if keep_states { Some(Tensor::from_vec([n, l, d, s], states)?) } else { None };
    Ok((y, states))
}

/// Blocked scan. The affine maps `x ↦ Ā_k x + B̄u_k` compose associatively,
/// so each block is first scanned from a zero state while accumulating the
/// product of its decays; a short sequential pass then propagates the
/// block-boundary states and every block is corrected by
/// `x_k = x̃_k + P_k ⊙ x_in`. The per-block passes are independent.
pub fn scan_blocked<T: Element>(sp: &ScanParams<T>, d_skip: &Tensor<T>, u: &Tensor<T>, block: usize) -> Result<Tensor<T>> {
    if block == 0 {
        return Err(contract_err!("scan_blocked: block length must be >= 1"));
    }
    let (n, l, d, s) = check_scan_inputs(sp, d_skip, u)?;
    let (ad, bd, cd, ud, dd) = (sp.abar.data(), sp.bu.data(), sp.c.data(), u.data(), d_skip.data());
    let ds = d * s;
    let mut y = vec![T::ZERO; n * l * d];
    let mut local = vec![T::ZERO; l * ds];
    let mut prod = vec![T::ZERO; l * ds];
    let mut carry = vec![T::ZERO; ds];
    let mut state = vec![T::ZERO; ds];
    for b in 0..n {
        let base = b * l;
        // Intra-block: local states from zero and cumulative decay products.
        for start in (0..l).step_by(block) {
            let end = (start + block).min(l);
            for k in start..end {
                let (ak, bk) = (&ad[(base + k) * ds..(base + k + 1) * ds], &bd[(base + k) * ds..(base + k + 1) * ds]);
                let (head, tail) = local.split_at_mut(k * ds);
                let (phead, ptail) = prod.split_at_mut(k * ds);
                let (lk, pk) = (&mut tail[..ds], &mut ptail[..ds]);
                if k == start {
                    for i in 0..ds {
                        lk[i] = ak[i] * T::ZERO + bk[i];
                        pk[i] = ak[i];
                    }
                } else {
                    let (lprev, pprev) = (&head[(k - 1) * ds..], &phead[(k - 1) * ds..]);
                    for i in 0..ds {
                        lk[i] = ak[i] * lprev[i] + bk[i];
                        pk[i] = ak[i] * pprev[i];
                    }
                }
            }
        }
        // Inter-block: carry states across block boundaries, then correct.
        carry.iter_mut().for_each(|v| *v = T::ZERO);
        for start in (0..l).step_by(block) {
            let end = (start + block).min(l);
            for k in start..end {
                let (lk, pk) = (&local[k * ds..(k + 1) * ds], &prod[k * ds..(k + 1) * ds]);
                for i in 0..ds {
                    state[i] = lk[i] + pk[i] * carry[i];
                }
                let t = base + k;
                readout(&state, &cd[t * s..(t + 1) * s], dd, &ud[t * d..(t + 1) * d], &mut y[t * d..(t + 1) * d]);
            }
            carry.copy_from_slice(&state);
        }
    }
    Tensor::from_vec([n, 1, l, d], y)
}

pub(crate) struct ScanGrads<T> {
    pub abar: Tensor<T>,
    pub bu: Tensor<T>,
    pub c: Tensor<T>,
    pub u: Tensor<T>,
    pub d: Tensor<T>,
}

/// Reverse sweep of the scan. `λ_k`, the adjoint of `x_k`, obeys
/// `λ_k = gy_k ⊗ C_k + Ā_{k+1} ⊙ λ_{k+1}`.
pub(crate) fn scan_backward<T: Element>(
    abar: &Tensor<T>,
    c: &Tensor<T>,
    u: &Tensor<T>,
    d_skip: &Tensor<T>,
    states: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<ScanGrads<T>> {
    let [n, l, d, s] = abar.dims();
    let ds = d * s;
    let (ad, cd, ud, dd, xd, gd) = (abar.data(), c.data(), u.data(), d_skip.data(), states.data(), gy.data());
    let mut g_abar = vec![T::ZERO; n * l * ds];
    let mut g_bu = vec![T::ZERO; n * l * ds];
    let mut g_c = vec![T::ZERO; n * l * s];
    let mut g_u = vec![T::ZERO; n * l * d];
    let mut g_d = vec![T::ZERO; d];
    let mut lam = vec![T::ZERO; ds];
    for b in 0..n {
        lam.iter_mut().for_each(|v| *v = T::ZERO);
        for k in (0..l).rev() {
            let t = b * l + k;
            let gyk = &gd[t * d..(t + 1) * d];
            let ck = &cd[t * s..(t + 1) * s];
            let xk = &xd[t * ds..(t + 1) * ds];
            // λ_k = gy_k ⊗ C_k + Ā_{k+1} ⊙ λ_{k+1}
            if k + 1 < l {
                let anext = &ad[(t + 1) * ds..(t + 2) * ds];
                for i in 0..ds {
                    lam[i] *= anext[i];
                }
            }
            for e in 0..d {
                for j in 0..s {
                    lam[e * s + j] += gyk[e] * ck[j];
                }
            }
            for j in 0..s {
                let mut acc = T::ZERO;
                for e in 0..d {
                    acc += gyk[e] * xk[e * s + j];
                }
                g_c[t * s + j] = acc;
            }
            for e in 0..d {
                g_u[t * d + e] = dd[e] * gyk[e];
                g_d[e] += gyk[e] * ud[t * d + e];
            }
            g_bu[t * ds..(t + 1) * ds].copy_from_slice(&lam);
            if k > 0 {
                let xprev = &xd[(t - 1) * ds..t * ds];
                for i in 0..ds {
                    g_abar[t * ds + i] = lam[i] * xprev[i];
                }
            }
        }
    }
    Ok(ScanGrads {
        abar: Tensor::from_vec(abar.dims(), g_abar)?,
        bu: Tensor::from_vec(abar.dims(), g_bu)?,
        c: Tensor::from_vec(c.dims(), g_c)?,
        u: Tensor::from_vec(u.dims(), g_u)?,
        d: Tensor::from_vec(d_skip.dims(), g_d)?,
    })
}

// ---------------------------------------------------------------------------
// Gated Mamba block
// ---------------------------------------------------------------------------

/// Gated selective-SSM block on `(N, 1, L, D)` token sequences:
/// `in-proj → (main, gate)`, SSM over `silu(main)`, gate with `silu(gate)`,
/// `out-proj`, residual.
#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub bidirectional: bool,
    pub w_in: ParamId,
    pub a_log: ParamId,
    pub w_delta: ParamId,
    pub delta_bias: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
    pub d_skip: ParamId,
    pub w_out: ParamId,
}

impl MambaBlock {
    /// Registers the block's parameters under `prefix`.
    pub fn init<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_model: usize,
        d_inner: usize,
        d_state: usize,
        bidirectional: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let (d, e, s) = (d_model, d_inner, d_state);
        // Step sizes log-uniform in [1e-3, 1e-1], stored as inverse softplus.
        let mut dt_rng = rng.fork(1);
        let delta_bias = Tensor::from_fn([1, 1, 1, e], |_| {
            let dt = (dt_rng.uniform(1e-3f64.ln(), 1e-1f64.ln())).exp();
            T::from_f64(dt + (-(-dt).exp_m1()).ln())
        })?;
        Ok(MambaBlock {
            d_model: d,
            d_inner: e,
            d_state: s,
            bidirectional,
            w_in: store.add(format!("{prefix}.w_in"), scaled_normal([1, 1, d, 2 * e], d, 1.0, rng)?)?,
            a_log: store.add(
                format!("{prefix}.a_log"),
                Tensor::from_fn([1, 1, e, s], |[_, _, _, j]| T::from_f64(((j + 1) as f64).ln()))?,
            )?,
            w_delta: store.add(format!("{prefix}.w_delta"), scaled_normal([1, 1, e, e], e, 0.1, rng)?)?,
            delta_bias: store.add(format!("{prefix}.delta_bias"), delta_bias)?,
            w_b: store.add(format!("{prefix}.w_b"), scaled_normal([1, 1, e, s], e, 1.0, rng)?)?,
            w_c: store.add(format!("{prefix}.w_c"), scaled_normal([1, 1, e, s], e, 1.0, rng)?)?,
            d_skip: store.add(format!("{prefix}.d_skip"), Tensor::ones([1, 1, 1, e])?)?,
            w_out: store.add(format!("{prefix}.w_out"), scaled_normal([1, 1, e, d], e, 1.0, rng)?)?,
        })
    }

    fn ssm<'t, T: Element>(&self, m: Var<'t, T>, p: &Bound<'t, T>) -> Result<Var<'t, T>> {
        let delta = m.matmul(p[self.w_delta])?.add(p[self.delta_bias])?.softplus();
        let b = m.matmul(p[self.w_b])?;
        let c = m.matmul(p[self.w_c])?;
        let a = p[self.a_log].exp().scale(-1.0);
        let abar = delta.ssm_decay(a)?;
        let bu = delta.ssm_input(b, m)?;
        abar.selective_scan(bu, c, m, p[self.d_skip])
    }

    /// `x`: `(N, 1, L, D)` → `(N, 1, L, D)`.
    pub fn forward<'t, T: Element>(&self, x: Var<'t, T>, p: &Bound<'t, T>) -> Result<Var<'t, T>> {
        let [_, one, l, d] = x.dims();
        if one != 1 || d != self.d_model {
            return Err(shape_err!("mamba block expects (N, 1, L, {}), got {:?}", self.d_model, x.dims()));
        }
        if l == 0 {
            return Err(contract_err!("mamba block: sequence length must be >= 1"));
        }
        let e = self.d_inner;
        let h = x.matmul(p[self.w_in])?;
        let main = h.slice_lastdim(0, e)?.silu();
        let gate = h.slice_lastdim(e, 2 * e)?.silu();
        let mut y = self.ssm(main, p)?;
        if self.bidirectional {
            let back = self.ssm(main.flip_rows()?, p)?.flip_rows()?;
            y = y.add(back)?.scale(0.5);
        }
        let out = y.mul(gate)?.matmul(p[self.w_out])?;
        out.add(x)
    }

    /// Inference-only evaluation on plain tensors.
    pub fn apply<T: Element>(&self, x: &Tensor<T>, store: &ParamStore<T>) -> Result<Tensor<T>> {
        let tape = crate::autodiff::Tape::inference();
        let p = store.bind(&tape);
        Ok(self.forward(tape.constant(x.clone()), &p)?.value())
    }

    /// The block's SSM parameters as plain tensors.
    pub fn static_params<T: Element>(&self, store: &ParamStore<T>) -> SsmStaticParams<T> {
        SsmStaticParams {
            a_log: store.get(self.a_log).clone(),
            w_delta: store.get(self.w_delta).clone(),
            delta_bias: store.get(self.delta_bias).clone(),
            w_b: store.get(self.w_b).clone(),
            w_c: store.get(self.w_c).clone(),
            d_skip: store.get(self.d_skip).clone(),
        }
    }
}
