//! The composed saliency network.
//!
//! ```text
//! image ─ backbone ─▶ {F⁰..F³} ─ CFLMA ─▶ F_agg ─ CFLMD ─▶ 4 stride-4 maps
//!       ─ Σ ─ conv1x1 ─ ×4 bilinear ─ sigmoid ─▶ saliency (N, 1, H, W)
//! ```

use crate::autodiff::{Tape, Var};
use crate::cflma::{Cflma, CflmaConfig, SequenceMode, WeightMode};
use crate::cflmd::{Cflmd, CflmdConfig};
use crate::config::ModelConfig;
use crate::element::Element;
use crate::error::{contract_err, shape_err, Result};
use crate::params::{scaled_normal, Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Strided 3×3 GeLU convolutions producing strides 4, 8, 16, 32.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub channels: [usize; 4],
    /// `(weight, bias)` per convolution; the first two form stage 1.
    pub convs: Vec<(ParamId, ParamId)>,
}

impl Backbone {
    pub fn init<T: Element>(store: &mut ParamStore<T>, channels: [usize; 4], rng: &mut Rng) -> Result<Self> {
        let plan = [
            (3, channels[0]),
            (channels[0], channels[0]),
            (channels[0], channels[1]),
            (channels[1], channels[2]),
            (channels[2], channels[3]),
        ];
        let mut convs = Vec::with_capacity(plan.len());
        for (i, &(cin, cout)) in plan.iter().enumerate() {
            let w = store.add(
                format!("backbone.conv{i}.weight"),
                scaled_normal([cout, cin, 3, 3], 9 * cin, 2f64.sqrt(), rng)?,
            )?;
            let b = store.add(format!("backbone.conv{i}.bias"), Tensor::zeros([1, cout, 1, 1])?)?;
            convs.push((w, b));
        }
        Ok(Backbone { channels, convs })
    }

    pub fn forward<'t, T: Element>(&self, x: Var<'t, T>, p: &Bound<'t, T>) -> Result<Vec<Var<'t, T>>> {
        let [_, c, h, w] = x.dims();
        if c != 3 {
            return Err(shape_err!("backbone expects 3 input channels, got {c}"));
        }
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(contract_err!("backbone input {h}×{w} must be a positive multiple of 32"));
        }
        let conv = |v: Var<'t, T>, i: usize| -> Result<Var<'t, T>> {
            let (wi, bi) = self.convs[i];
            Ok(v.conv3x3(p[wi], Some(p[bi]), 2)?.gelu())
        };
        let mut f = conv(conv(x, 0)?, 1)?;
        let mut levels = vec![f];
        for i in 2..5 {
            f = conv(f, i)?;
            levels.push(f);
        }
        Ok(levels)
    }
}

#[derive(Clone, Debug)]
pub struct Cfmd {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub cflma: Cflma,
    pub cflmd: Option<Cflmd>,
    /// `(weight, bias)` of the hidden GeLU layer of the head, if any.
    pub head_hidden: Option<(ParamId, ParamId)>,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

/// Intermediate values of one forward pass.
pub struct Trace<'t, T> {
    pub pyramid: Vec<Var<'t, T>>,
    pub weights: Vec<Var<'t, T>>,
    pub aggregate: Var<'t, T>,
    pub distributed: Vec<Var<'t, T>>,
    pub logits: Var<'t, T>,
    pub saliency: Var<'t, T>,
}

impl Cfmd {
    /// Builds the network and registers its freshly initialized parameters.
    pub fn new<T: Element>(config: &ModelConfig) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let root = Rng::new(config.seed);
        let backbone = Backbone::init(&mut store, config.backbone_channels, &mut root.fork(1))?;
        let cflma = Cflma::init(
            &mut store,
            "cflma",
            CflmaConfig {
                in_channels: config.backbone_channels,
                unified: config.unified_channels,
                grid: config.token_grid,
                d_state: config.ssm_state,
                expand: config.ssm_expand,
                bidirectional: config.bidirectional,
                positional_encoding: config.positional_encoding,
            },
            &mut root.fork(2),
        )?;
        let cflmd = if config.use_cflmd {
            Some(Cflmd::init(
                &mut store,
                "cflmd",
                CflmdConfig {
                    channels: config.unified_channels,
                    mid: config.dum_mid_channels,
                    groups: config.dum_groups,
                    alpha: config.offset_bound,
                    ratios: config.pooling_ratios.clone(),
                    variant: config.offset_variant,
                    order: config.offset_order,
                    init_std: config.offset_init_std,
                },
                &mut root.fork(3),
            )?)
        } else {
            None
        };
        let cu = config.unified_channels;
        let mut head_rng = root.fork(4);
        let (head_hidden, head_in) = match config.head_hidden {
            0 => (None, cu),
            hid => {
                let w = store.add("head.hidden.weight", scaled_normal([1, 1, hid, cu], cu, 2f64.sqrt(), &mut head_rng)?)?;
                let b = store.add("head.hidden.bias", Tensor::zeros([1, hid, 1, 1])?)?;
                (Some((w, b)), hid)
            }
        };
        let head_w = store.add("head.weight", scaled_normal([1, 1, 1, head_in], head_in, 0.1, &mut head_rng)?)?;
        let head_b = store.add("head.bias", Tensor::zeros([1, 1, 1, 1])?)?;
        let model = Cfmd {
            config: config.clone(),
            backbone,
            cflma,
            cflmd,
            head_hidden,
            head_w,
            head_b,
        };
        Ok((model, store))
    }

    pub fn trace<'t, T: Element>(&self, x: Var<'t, T>, p: &Bound<'t, T>) -> Result<Trace<'t, T>> {
        let pyramid = self.backbone.forward(x, p)?;
        let mode = if self.config.use_cflma { WeightMode::Learned } else { WeightMode::Ones };
        let agg = self.cflma.forward(&pyramid, p, SequenceMode::Mamba, mode)?;
        let distributed = match &self.cflmd {
            Some(d) => d.distribute(agg.aggregate, p)?,
            None => vec![agg.aggregate],
        };
        let mut fused = distributed[0];
        for lvl in &distributed[1..] {
            fused = fused.add(*lvl)?;
        }
        if let Some((w, b)) = self.head_hidden {
            fused = fused.conv1x1(p[w], Some(p[b]))?.gelu();
        }
        let logits = fused.conv1x1(p[self.head_w], Some(p[self.head_b]))?.bilinear_resize(4)?;
        let saliency = logits.sigmoid();
        Ok(Trace {
            pyramid,
            weights: agg.weights,
            aggregate: agg.aggregate,
            distributed,
            logits,
            saliency,
        })
    }

    /// Saliency map in `(0, 1)`, `(N, 1, H, W)`.
    pub fn forward<'t, T: Element>(&self, x: Var<'t, T>, p: &Bound<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.trace(x, p)?.saliency)
    }

    /// Inference on plain tensors.
    pub fn predict<T: Element>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::inference();
        let p = store.bind(&tape);
        let y = self.forward(tape.constant(x.clone()), &p)?.value();
        y.ensure_finite("saliency")?;
        Ok(y)
    }
}
