//! Finite-difference verification of the analytic gradients.
//!
//! Every check compares central differences `(f(x+h·e_i) − f(x−h·e_i)) / 2h`
//! with the tape's gradient, using the relative error
//! `|a − b| / max(|a|, |b|, 1e-8)`. Tensors larger than [`SAMPLE`] elements
//! are checked on a random subsample of that many components.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::autodiff::{concat_channels, concat_rows, Tape, Var};
use crate::cflma::{Cflma, CflmaConfig, SequenceMode, WeightMode};
use crate::cflmd::{Cflmd, CflmdConfig, Dum, DumConfig};
use crate::config::{ModelConfig, OffsetOrder, OffsetVariant};
use crate::error::{Error, Result};
use crate::model::Cfmd;
use crate::params::{scaled_normal, Bound, ParamStore};
use crate::rng::Rng;
use crate::ssm::MambaBlock;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
/// Step for the end-to-end check, whose loss is a long composition with
/// proportionally more rounding noise.
pub const MODEL_STEP: f64 = 1e-5;
/// Minimum distance of every sampling coordinate from an integer at the
/// end-to-end check point.
pub const KINK_MARGIN: f64 = 1e-4;
pub const SAMPLE: usize = 64;
/// Threshold for single operations.
pub const OP_THRESHOLD: f64 = 1e-4;
/// Threshold for composed modules and the full model.
pub const COMPOSITE_THRESHOLD: f64 = 1e-3;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    Central,
    /// Best of central and both one-sided differences at steps `10h`, `h`
    /// and `h/10`. Large steps beat rounding noise on tiny components,
    /// small steps and one-sided stencils avoid nearby kinks; every estimate
    /// converges to the true derivative, so a wrong gradient fails all of
    /// them.
    KinkTolerant,
}

/// Largest relative error between `analytic` and central differences of
/// `eval` around `x`.
pub fn compare_components(
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    eval: impl FnMut(&Tensor<f64>) -> Result<f64>,
    h: f64,
    rng: &mut Rng,
) -> Result<f64> {
    compare_with(x, analytic, eval, h, Stencil::Central, rng)
}

pub fn compare_with(
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    mut eval: impl FnMut(&Tensor<f64>) -> Result<f64>,
    h: f64,
    stencil: Stencil,
    rng: &mut Rng,
) -> Result<f64> {
    if analytic.dims() != x.dims() {
        return Err(Error::Shape(format!("gradient {:?} vs input {:?}", analytic.dims(), x.dims())));
    }
    if !(h > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {h}")));
    }
    let indices: Vec<usize> = if x.len() <= SAMPLE {
        (0..x.len()).collect()
    } else {
        let mut all: Vec<usize> = (0..x.len()).collect();
        for i in 0..SAMPLE {
            let j = rng.int_range(i as i64, (x.len() - 1) as i64) as usize;
            all.swap(i, j);
        }
        all.truncate(SAMPLE);
        all
    };
    let centre = match stencil {
        Stencil::Central => 0.0,
        Stencil::KinkTolerant => eval(x)?,
    };
    let steps: &[f64] = match stencil {
        Stencil::Central => &[h],
        Stencil::KinkTolerant => &[10.0 * h, h, 0.1 * h],
    };
    let mut buf = x.to_vec();
    let mut worst = 0.0f64;
    for i in indices {
        let a = analytic.data()[i];
        let orig = buf[i];
        let mut err = f64::INFINITY;
        for &step in steps {
            buf[i] = orig + step;
            let plus = eval(&Tensor::from_vec(x.dims(), buf.clone())?)?;
            buf[i] = orig - step;
            let minus = eval(&Tensor::from_vec(x.dims(), buf.clone())?)?;
            buf[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Eval(format!("non-finite evaluation at component {i}")));
            }
            err = err.min(relative_error((plus - minus) / (2.0 * step), a));
            if stencil == Stencil::KinkTolerant {
                err = err.min(relative_error((plus - centre) / step, a)).min(relative_error((centre - minus) / step, a));
            }
            if err.is_nan() {
                break;
            }
        }
        // NaN must never look like a pass.
        worst = if err.is_nan() { f64::NAN } else { worst.max(err) };
    }
    Ok(worst)
}

/// Checks the gradient of a scalar-valued `f` at `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let leaf = tape.param(x.clone());
    let out = f(leaf)?;
    let grads = tape.backward(out)?;
    let analytic = match grads.get(leaf) {
        Some(g) => g.clone(),
        None => Tensor::zeros(x.dims())?,
    };
    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let tape = Tape::inference();
        Ok(f(tape.constant(t.clone()))?.value().item()?)
    };
    compare_components(x, &analytic, eval, h, &mut Rng::new(x.len() as u64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Modules,
    Model,
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Scope::Ops),
            "modules" => Ok(Scope::Modules),
            "model" => Ok(Scope::Model),
            _ => Err(Error::Config(format!("unknown gradcheck scope {s:?} (ops, modules, model)"))),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Ops => "ops",
            Scope::Modules => "modules",
            Scope::Model => "model",
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub max_rel_error: f64,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Options {
    pub seed: u64,
    /// Test hook: the named check sees a deliberately wrong gradient.
    pub corrupt: Option<String>,
}

struct Runner<'a> {
    opts: &'a Options,
    rng: Rng,
    checks: Vec<Check>,
}

impl Runner<'_> {
    fn normal(&mut self, dims: [usize; 4], std: f64) -> Tensor<f64> {
        Tensor::normal(dims, 0.0, std, &mut self.rng).expect("valid dims")
    }

    fn uniform(&mut self, dims: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::uniform(dims, lo, hi, &mut self.rng).expect("valid dims")
    }

    /// Relative error per leaf (parameters first, then `inputs`) of the
    /// scalar `Σ r ⊙ f(...)` with a fixed random `r`.
    fn leaf_errors<F>(&mut self, name: &str, h: f64, stencil: Stencil, store: &ParamStore<f64>, inputs: &[Tensor<f64>], f: F) -> Result<Vec<(String, f64)>>
    where
        F: for<'t> Fn(&Bound<'t, f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
    {
        let probe = {
            let tape = Tape::inference();
            let p = store.bind(&tape);
            let xs: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            f(&p, &xs)?.dims()
        };
        let r = self.normal(probe, 1.0);
        let scalar = |p: &Bound<'_, f64>, xs: &[Var<'_, f64>]| -> Result<f64> {
            let y = f(p, xs)?;
            Ok(y.mul(y.tape().constant(r.clone()))?.sum().value().item()?)
        };

        let tape = Tape::new();
        let p = store.bind(&tape);
        let xs: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let root = f(&p, &xs)?.mul(tape.constant(r.clone()))?.sum();
        let grads = tape.backward(root)?;
        let mut analytic: Vec<Tensor<f64>> = p.gradients(&grads)?;
        for x in &xs {
            analytic.push(match grads.get(*x) {
                Some(g) => g.clone(),
                None => Tensor::zeros(x.dims())?,
            });
        }
        if self.opts.corrupt.as_deref() == Some(name) {
            for g in &mut analytic {
                *g = g.map(|v| 1.5 * v + 1e-2);
            }
        }

        let ids: Vec<_> = store.ids().collect();
        let mut out = Vec::with_capacity(analytic.len());
        for (k, grad) in analytic.iter().enumerate() {
            let mut rng = self.rng.fork(k as u64);
            let err = if k < ids.len() {
                let id = ids[k];
                let mut local = store.clone();
                let eval = |t: &Tensor<f64>| -> Result<f64> {
                    local.set(id, t.clone())?;
                    let tape = Tape::inference();
                    let p = local.bind(&tape);
                    let xs: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
                    scalar(&p, &xs)
                };
                (store.name(id).to_string(), compare_with(store.get(id), grad, eval, h, stencil, &mut rng)?)
            } else {
                let j = k - ids.len();
                let eval = |t: &Tensor<f64>| -> Result<f64> {
                    let tape = Tape::inference();
                    let p = store.bind(&tape);
                    let xs: Vec<_> = inputs
                        .iter()
                        .enumerate()
                        .map(|(i, x)| tape.constant(if i == j { t.clone() } else { x.clone() }))
                        .collect();
                    scalar(&p, &xs)
                };
                (format!("input{j}"), compare_with(&inputs[j], grad, eval, h, stencil, &mut rng)?)
            };
            out.push(err);
        }
        Ok(out)
    }

    fn record(&mut self, name: String, err: f64, threshold: f64) {
        self.checks.push(Check {
            passed: err < threshold,
            name,
            max_rel_error: err,
            threshold,
        });
    }

    /// One check covering every leaf.
    fn check<F>(&mut self, name: &str, threshold: f64, store: &ParamStore<f64>, inputs: &[Tensor<f64>], f: F) -> Result<()>
    where
        F: for<'t> Fn(&Bound<'t, f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
    {
        self.check_with(name, threshold, Stencil::Central, store, inputs, f)
    }

    /// Composite modules chain many roundings and may sample near bilinear
    /// kinks, so the step is swept as in the model scope.
    fn composite<F>(&mut self, name: &str, store: &ParamStore<f64>, inputs: &[Tensor<f64>], f: F) -> Result<()>
    where
        F: for<'t> Fn(&Bound<'t, f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
    {
        self.check_with(name, COMPOSITE_THRESHOLD, Stencil::KinkTolerant, store, inputs, f)
    }

    fn check_with<F>(&mut self, name: &str, threshold: f64, stencil: Stencil, store: &ParamStore<f64>, inputs: &[Tensor<f64>], f: F) -> Result<()>
    where
        F: for<'t> Fn(&Bound<'t, f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
    {
        let errs = self.leaf_errors(name, DEFAULT_STEP, stencil, store, inputs, f)?;
        let worst = errs.iter().map(|e| e.1).fold(0.0, |a: f64, b| if b.is_nan() { f64::NAN } else { a.max(b) });
        self.record(name.to_string(), worst, threshold);
        Ok(())
    }

    fn op<F>(&mut self, name: &str, inputs: &[Tensor<f64>], f: F) -> Result<()>
    where
        F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>,
    {
        self.check(name, OP_THRESHOLD, &ParamStore::new(), inputs, |_, xs| f(xs))
    }
}

/// Moves SSM step sizes from their tiny initial values to `softplus(0)`.
/// At `Δ ≈ 1e-3` the gradients of `a_log` and `W_Δ` are so small that
/// finite-difference rounding noise swamps them; the evaluation point does
/// not change which gradient formula is being checked.
pub fn condition_step_sizes(store: &mut ParamStore<f64>) -> Result<()> {
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).ends_with("delta_bias")).collect();
    for id in ids {
        let zero = Tensor::zeros(store.get(id).dims())?;
        store.set(id, zero)?;
    }
    Ok(())
}

fn ops(r: &mut Runner<'_>) -> Result<()> {
    let x = r.normal([2, 3, 4, 5], 1.0);
    r.op("sigmoid", &[x.clone()], |v| Ok(v[0].sigmoid()))?;
    r.op("tanh", &[x.clone()], |v| Ok(v[0].tanh()))?;
    r.op("gelu", &[x.clone()], |v| Ok(v[0].gelu()))?;
    r.op("silu", &[x.clone()], |v| Ok(v[0].silu()))?;
    r.op("softplus", &[x.clone()], |v| Ok(v[0].softplus()))?;
    r.op("exp", &[x.clone()], |v| Ok(v[0].exp()))?;
    r.op("scale_shift", &[x.clone()], |v| Ok(v[0].scale(1.7).add_scalar(0.3)))?;

    let c = r.normal([2, 3, 1, 1], 1.0);
    let b = r.normal([1, 3, 1, 1], 1.0);
    r.op("add_broadcast", &[x.clone(), b.clone()], |v| v[0].add(v[1]))?;
    r.op("sub_broadcast", &[x.clone(), c.clone()], |v| v[0].sub(v[1]))?;
    r.op("mul_broadcast", &[x.clone(), c.clone()], |v| v[0].mul(v[1]))?;
    r.op("sum", &[x.clone()], |v| Ok(v[0].sum()))?;
    r.op("mean", &[x.clone()], |v| Ok(v[0].mean()))?;
    r.op("reshape", &[x.clone()], |v| Ok(v[0].reshape([1, 6, 5, 4])?.sigmoid()))?;

    let a = r.normal([2, 1, 3, 4], 1.0);
    let w = r.normal([1, 1, 4, 2], 1.0);
    r.op("matmul", &[a.clone(), w], |v| v[0].matmul(v[1]))?;

    let w1 = r.normal([1, 1, 2, 3], 1.0);
    let b1 = r.normal([1, 2, 1, 1], 1.0);
    r.op("conv1x1", &[x.clone(), w1, b1], |v| v[0].conv1x1(v[1], Some(v[2])))?;
    let wd = r.normal([1, 3, 3, 3], 1.0);
    let bd = r.normal([1, 3, 1, 1], 1.0);
    r.op("dwconv3x3", &[x.clone(), wd, bd], |v| v[0].dwconv3x3(v[1], Some(v[2])))?;
    for stride in [1, 2] {
        let wf = r.normal([2, 3, 3, 3], 1.0);
        let bf = r.normal([1, 2, 1, 1], 1.0);
        r.op(&format!("conv3x3_stride{stride}"), &[x.clone(), wf, bf], move |v| {
            v[0].conv3x3(v[1], Some(v[2]), stride)
        })?;
    }
    r.op("adaptive_avg_pool", &[x.clone()], |v| v[0].adaptive_avg_pool((3, 2)))?;

    let xs = r.normal([1, 8, 3, 3], 1.0);
    r.op("pixel_shuffle", &[xs], |v| Ok(v[0].pixel_shuffle(2)?.sigmoid()))?;
    let xu = r.normal([1, 2, 4, 6], 1.0);
    r.op("pixel_unshuffle", &[xu], |v| Ok(v[0].pixel_unshuffle(2)?.sigmoid()))?;

    let xg = r.normal([2, 4, 5, 6], 1.0);
    // Integer + {0.25, 0.75} coordinates stay clear of the bilinear kinks.
    let mut grid_rng = r.rng.fork(100);
    let grid = Tensor::from_fn([2, 4, 3, 3], |[_, ax, _, _]| {
        let ext = if ax % 2 == 0 { 6 } else { 5 };
        grid_rng.int_range(0, ext - 2) as f64 + 0.25 + 0.5 * grid_rng.int_range(0, 1) as f64
    })?;
    r.op("grid_sample", &[xg, grid], |v| v[0].grid_sample(v[1]))?;
    let xb = r.normal([1, 2, 3, 4], 1.0);
    r.op("bilinear_resize", &[xb], |v| v[0].bilinear_resize(2))?;
    r.op("slice_channels", &[x.clone()], |v| Ok(v[0].slice_channels(1, 3)?.sigmoid()))?;
    r.op("slice_lastdim", &[a.clone()], |v| Ok(v[0].slice_lastdim(1, 3)?.sigmoid()))?;
    r.op("to_tokens", &[x.clone()], |v| Ok(v[0].to_tokens()?.sigmoid()))?;
    let tokens = r.normal([2, 1, 6, 3], 1.0);
    r.op("row_mean", &[tokens.clone()], |v| Ok(v[0].row_mean(1, 4)?.sigmoid()))?;
    r.op("flip_rows", &[tokens.clone()], |v| Ok(v[0].flip_rows()?.sigmoid()))?;
    let other = r.normal([2, 1, 2, 3], 1.0);
    r.op("concat_rows", &[tokens, other], |v| Ok(concat_rows(&[v[0], v[1]])?.sigmoid()))?;
    let more = r.normal([2, 2, 4, 5], 1.0);
    r.op("concat_channels", &[x.clone(), more], |v| Ok(concat_channels(&[v[0], v[1]])?.sigmoid()))?;

    let (l, e, s) = (5, 3, 2);
    let delta = r.uniform([1, 1, l, e], 0.1, 1.0);
    let a_mat = r.uniform([1, 1, e, s], -2.0, -0.5);
    r.op("ssm_decay", &[delta.clone(), a_mat], |v| v[0].ssm_decay(v[1]))?;
    let bm = r.normal([1, 1, l, s], 1.0);
    let u = r.normal([1, 1, l, e], 1.0);
    r.op("ssm_input", &[delta, bm, u.clone()], |v| v[0].ssm_input(v[1], v[2]))?;
    let abar = r.uniform([1, l, e, s], 0.2, 0.95);
    let bu = r.normal([1, l, e, s], 1.0);
    let cm = r.normal([1, 1, l, s], 1.0);
    let d = r.normal([1, 1, 1, e], 1.0);
    r.op("selective_scan", &[abar, bu, cm, u, d], |v| v[0].selective_scan(v[1], v[2], v[3], v[4]))?;

    let pred = r.uniform([1, 1, 4, 4], 0.05, 0.95);
    let mut mask_rng = r.rng.fork(101);
    let target = Tensor::from_fn([1, 1, 4, 4], |_| if mask_rng.bernoulli(0.5) { 1.0 } else { 0.0 })?;
    r.op("bce_loss", &[pred], move |v| v[0].bce_loss(&target))?;
    Ok(())
}

fn dum_config(variant: OffsetVariant, order: OffsetOrder) -> DumConfig {
    DumConfig {
        channels: 4,
        mid: 4,
        groups: 2,
        alpha: 0.25,
        scale: 2,
        variant,
        order,
        init_std: 0.5,
    }
}

fn modules(r: &mut Runner<'_>) -> Result<()> {
    for bidir in [false, true] {
        let mut store = ParamStore::new();
        let block = MambaBlock::init(&mut store, "mamba", 4, 8, 4, bidir, &mut r.rng.fork(200 + bidir as u64))?;
        condition_step_sizes(&mut store)?;
        let x = r.normal([2, 1, 6, 4], 1.0);
        let name = if bidir { "mamba_block_bidirectional" } else { "mamba_block" };
        r.composite(name, &store, &[x], |p, v| block.forward(v[0], p))?;
    }

    let mut store = ParamStore::new();
    let cfg = CflmaConfig {
        in_channels: [3, 4, 5, 6],
        unified: 8,
        grid: 1,
        d_state: 4,
        expand: 2,
        bidirectional: false,
        positional_encoding: false,
    };
    let cflma = Cflma::init(&mut store, "cflma", cfg, &mut r.rng.fork(210))?;
    condition_step_sizes(&mut store)?;
    // Pooling to one token divides the spread by the side; scale it back so
    // the Mamba path sees unit-scale tokens and its gradients clear the noise.
    let pyramid: Vec<_> = [(3, 8), (4, 4), (5, 2), (6, 1)].iter().map(|&(c, s)| r.normal([1, c, s, s], s as f64)).collect();
    r.check("cflma_unify", OP_THRESHOLD, &store, &pyramid, |p, v| {
        let levels = cflma.unify_channels(v, p)?;
        let mut pooled = Vec::new();
        for l in levels {
            pooled.push(l.mean());
        }
        Ok(concat_rows(&pooled)?.sigmoid())
    })?;
    r.composite("cflma_forward", &store, &pyramid, |p, v| {
        Ok(cflma.forward(v, p, SequenceMode::Mamba, WeightMode::Learned)?.aggregate)
    })?;

    let mut store = ParamStore::new();
    let dum = Dum::init(&mut store, "dum", dum_config(OffsetVariant::Tanh, OffsetOrder::LinearThenShuffle), &mut r.rng.fork(220))?;
    let x = r.normal([1, 4, 4, 4], 1.0);
    r.check("dum_mid", OP_THRESHOLD, &store, &[x.clone()], |p, v| dum.mid(v[0], p))?;
    for (name, variant, order) in [
        ("dum_tanh_linear_then_shuffle", OffsetVariant::Tanh, OffsetOrder::LinearThenShuffle),
        ("dum_tanh_shuffle_then_linear", OffsetVariant::Tanh, OffsetOrder::ShuffleThenLinear),
        ("dum_sigmoid_scope_linear_then_shuffle", OffsetVariant::SigmoidScope, OffsetOrder::LinearThenShuffle),
        ("dum_sigmoid_scope_shuffle_then_linear", OffsetVariant::SigmoidScope, OffsetOrder::ShuffleThenLinear),
    ] {
        let mut store = ParamStore::new();
        let dum = Dum::init(&mut store, "dum", dum_config(variant, order), &mut r.rng.fork(230))?;
        r.composite(name, &store, &[x.clone()], |p, v| dum.forward(v[0], p))?;
    }

    for scale in [1, 4] {
        let mut store = ParamStore::new();
        let cfg = DumConfig {
            scale,
            ..dum_config(OffsetVariant::Tanh, OffsetOrder::LinearThenShuffle)
        };
        let dum = Dum::init(&mut store, "dum", cfg, &mut r.rng.fork(235))?;
        r.composite(&format!("dum_tanh_scale{scale}"), &store, &[x.clone()], |p, v| dum.forward(v[0], p))?;
    }

    let mut store = ParamStore::new();
    let cflmd = Cflmd::init(
        &mut store,
        "cflmd",
        CflmdConfig {
            channels: 4,
            mid: 4,
            groups: 2,
            alpha: 0.25,
            ratios: vec![1, 1, 2, 2, 4, 8],
            variant: OffsetVariant::Tanh,
            order: OffsetOrder::LinearThenShuffle,
            init_std: 0.5,
        },
        &mut r.rng.fork(240),
    )?;
    let agg = r.normal([1, 4, 8, 8], 1.0);
    r.composite("cflmd_distribute", &store, &[agg], |p, v| {
        Ok(concat_channels(&cflmd.distribute(v[0], p)?)?)
    })?;
    Ok(())
}

/// The reduced end-to-end configuration used by the model scope.
pub fn model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        seed,
        ..ModelConfig::tiny()
    }
}

/// Smallest distance of any CFLMD sampling coordinate from an integer,
/// where bilinear sampling and border clamping have kinks.
pub fn kink_margin(net: &Cfmd, store: &ParamStore<f64>, x: &Tensor<f64>) -> Result<f64> {
    let Some(cflmd) = &net.cflmd else {
        return Ok(f64::INFINITY);
    };
    let tape = Tape::inference();
    let p = store.bind(&tape);
    let agg = net.trace(tape.constant(x.clone()), &p)?.aggregate;
    let [_, _, h, w] = agg.dims();
    let mut margin = f64::INFINITY;
    for (dum, &ratio) in cflmd.branches.iter().zip(&cflmd.config.ratios) {
        let pooled = agg.adaptive_avg_pool((h / ratio, w / ratio))?;
        let grid = dum.sampling_grid(pooled, &p)?.value();
        margin = grid.data().iter().fold(margin, |m, v| m.min((v - v.round()).abs()));
    }
    Ok(margin)
}

fn model(r: &mut Runner<'_>) -> Result<()> {
    let cfg = model_config(r.opts.seed);
    let (net, mut store) = Cfmd::new::<f64>(&cfg)?;
    condition_step_sizes(&mut store)?;
    // The small output-head init scales every upstream gradient down to
    // the rounding-noise floor of the loss; check at unit gain instead.
    let dims = store.get(net.head_w).dims();
    let head = scaled_normal(dims, dims[3], 1.0, &mut r.rng.fork(301))?;
    store.set(net.head_w, head)?;
    // Unit-scale branches sample at integer coordinates plus offsets, so
    // offsets must be large enough to keep most points off the kinks.
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).ends_with("offset.weight")).collect();
    for id in ids {
        let enlarged = store.get(id).map(|v| 30.0 * v);
        store.set(id, enlarged)?;
    }
    let s = cfg.input_size;
    let mut x = Tensor::zeros([1, 3, s, s])?;
    for attempt in 0..64 {
        x = Tensor::uniform([1, 3, s, s], 0.0, 1.0, &mut r.rng.fork(400 + attempt))?;
        if kink_margin(&net, &store, &x)? >= KINK_MARGIN {
            break;
        }
    }
    let mut mask_rng = r.rng.fork(300);
    let target = Tensor::from_fn([1, 1, s, s], |_| if mask_rng.bernoulli(0.3) { 1.0 } else { 0.0 })?;
    let name = "model";
    let errs = r.leaf_errors(name, MODEL_STEP, Stencil::KinkTolerant, &store, &[x], |p, v| net.forward(v[0], p)?.bce_loss(&target))?;
    for (leaf, err) in errs {
        r.record(format!("{name}/{leaf}"), err, COMPOSITE_THRESHOLD);
    }
    Ok(())
}

/// Runs every check in `scope`.
pub fn run(scope: Scope, opts: &Options) -> Result<Vec<Check>> {
    let mut r = Runner {
        opts,
        rng: Rng::new(opts.seed).fork(7),
        checks: Vec::new(),
    };
    match scope {
        Scope::Ops => ops(&mut r)?,
        Scope::Modules => modules(&mut r)?,
        Scope::Model => model(&mut r)?,
    }
    Ok(r.checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_exact_gradient() {
        let x = Tensor::normal([1, 2, 3, 4], 0.0, 1.0, &mut Rng::new(0)).unwrap();
        assert!(finite_diff_check(|v| Ok(v.sum()), &x, DEFAULT_STEP).unwrap() < 1e-9);
    }

    #[test]
    fn sigmoid_sum_at_zero() {
        let x = Tensor::zeros([1, 1, 2, 2]).unwrap();
        let tape = Tape::new();
        let leaf = tape.param(x.clone());
        let g = tape.backward(leaf.sigmoid().sum()).unwrap();
        assert!(g.get(leaf).unwrap().data().iter().all(|&v| v == 0.25));
        assert!(finite_diff_check(|v| Ok(v.sigmoid().sum()), &x, DEFAULT_STEP).unwrap() < 1e-8);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // Σx³ checked against the gradient of Σx².
        let x = Tensor::normal([1, 1, 3, 3], 0.0, 1.0, &mut Rng::new(1)).unwrap();
        let analytic = x.map(|v| 2.0 * v);
        let err = compare_components(&x, &analytic, |t| Ok(t.data().iter().map(|v| v * v * v).sum()), 1e-5, &mut Rng::new(0))
            .unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn large_inputs_are_subsampled() {
        let x = Tensor::<f64>::zeros([1, 1, 20, 20]).unwrap();
        let mut calls = 0;
        compare_components(&x, &x, |_| {
            calls += 1;
            Ok(0.0)
        }, 1e-5, &mut Rng::new(0))
        .unwrap();
        assert_eq!(calls, 2 * SAMPLE);
    }

    #[test]
    fn non_finite_evaluation_is_an_error() {
        let x = Tensor::<f64>::zeros([1, 1, 1, 2]).unwrap();
        let r = compare_components(&x, &x, |_| Ok(f64::NAN), 1e-5, &mut Rng::new(0));
        assert!(matches!(r, Err(Error::Eval(_))));
    }

    #[test]
    fn op_scope_passes() {
        let checks = run(Scope::Ops, &Options::default()).unwrap();
        assert!(checks.len() >= 30);
        let failed: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
        assert!(failed.is_empty(), "{failed:?}");
    }

    #[test]
    fn module_scope_passes() {
        let checks = run(Scope::Modules, &Options::default()).unwrap();
        let failed: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
        assert!(failed.is_empty(), "{failed:?}");
    }

    #[test]
    fn model_scope_passes_per_parameter() {
        let checks = run(Scope::Model, &Options::default()).unwrap();
        let (_, store) = Cfmd::new::<f64>(&model_config(0)).unwrap();
        assert_eq!(checks.len(), store.len() + 1);
        let failed: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
        assert!(failed.is_empty(), "{failed:?}");
    }

    #[test]
    fn corrupt_hook_fails_only_its_check() {
        let opts = Options {
            seed: 0,
            corrupt: Some("gelu".into()),
        };
        let checks = run(Scope::Ops, &opts).unwrap();
        let failed: Vec<_> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        assert_eq!(failed, ["gelu"]);
    }

    #[test]
    fn scope_parses() {
        assert_eq!("model".parse::<Scope>().unwrap(), Scope::Model);
        assert!("all".parse::<Scope>().is_err());
    }
}
