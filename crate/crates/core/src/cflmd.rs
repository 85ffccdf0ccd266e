//! Dynamic upsampling and pyramid redistribution.
//!
//! A DUM upsamples by `s` with bilinear grid sampling whose source grid is
//! shifted by learned, content-dependent offsets:
//!
//! ```text
//! F_mid = DWConv3x3(GeLU(Conv1x1(F_in)))
//! O     = α·tanh(W_o F_mid)                  (N, 2s²G, H, W)
//! S     = G + pixel_shuffle(O, s)            (N, 2G, sH, sW)
//! F_out = grid_sample(F_in, S)               per feature group
//! ```
//!
//! Offsets are in input-pixel units. [`Cflmd`] pools the aggregated map at
//! several ratios, brings every branch back with a DUM and sums branches of
//! equal ratio into one pyramid level.

use crate::config::{OffsetOrder, OffsetVariant};
use crate::element::Element;
use crate::error::{contract_err, shape_err, Result};
use crate::nn::upsample_grid;
use crate::params::{scaled_normal, Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::autodiff::Var;

#[derive(Clone, Debug, PartialEq)]
pub struct DumConfig {
    pub channels: usize,
    pub mid: usize,
    pub groups: usize,
    pub alpha: f64,
    pub scale: usize,
    pub variant: OffsetVariant,
    pub order: OffsetOrder,
    /// Standard deviation of the offset projection at init (0 = zeros).
    pub init_std: f64,
}

impl DumConfig {
    fn validate(&self) -> Result<()> {
        if self.scale == 0 || self.groups == 0 || self.channels % self.groups != 0 {
            return Err(contract_err!(
                "dum: scale {} and groups {} must be positive, channels {} divisible by groups",
                self.scale,
                self.groups,
                self.channels
            ));
        }
        if !(self.alpha > 0.0) {
            return Err(contract_err!("dum: offset bound must be positive, got {}", self.alpha));
        }
        if self.order == OffsetOrder::ShuffleThenLinear && self.offset_input_channels() % (self.scale * self.scale) != 0 {
            return Err(contract_err!(
                "dum: shuffle-then-linear needs {} channels divisible by {}",
                self.offset_input_channels(),
                self.scale * self.scale
            ));
        }
        Ok(())
    }

    /// Channels feeding the offset projection.
    fn offset_input_channels(&self) -> usize {
        match self.variant {
            OffsetVariant::Tanh => self.mid,
            OffsetVariant::SigmoidScope => self.channels,
        }
    }

    /// `(in, out)` channels of the offset projection.
    fn projection_dims(&self) -> (usize, usize) {
        let s2 = self.scale * self.scale;
        match self.order {
            OffsetOrder::LinearThenShuffle => (self.offset_input_channels(), 2 * s2 * self.groups),
            OffsetOrder::ShuffleThenLinear => (self.offset_input_channels() / s2, 2 * self.groups),
        }
    }
}

#[derive(Clone, Debug)]
pub enum OffsetHead {
    Tanh {
        conv_w: ParamId,
        conv_b: ParamId,
        dw_w: ParamId,
        dw_b: ParamId,
        w_o: ParamId,
    },
    SigmoidScope {
        w1: ParamId,
        w2: ParamId,
    },
}

#[derive(Clone, Debug)]
pub struct Dum {
    pub config: DumConfig,
    pub head: OffsetHead,
}

impl Dum {
    pub fn init<T: Element>(store: &mut ParamStore<T>, prefix: &str, config: DumConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (pin, pout) = config.projection_dims();
        let offset_proj = |rng: &mut Rng| -> Result<Tensor<T>> {
            if config.init_std > 0.0 {
                Tensor::normal([1, 1, pout, pin], 0.0, config.init_std, rng)
            } else {
                Tensor::zeros([1, 1, pout, pin])
            }
        };
        let head = match config.variant {
            OffsetVariant::Tanh => {
                let (c, m) = (config.channels, config.mid);
                OffsetHead::Tanh {
                    conv_w: store.add(format!("{prefix}.conv.weight"), scaled_normal([1, 1, m, c], c, 1.0, rng)?)?,
                    conv_b: store.add(format!("{prefix}.conv.bias"), Tensor::zeros([1, m, 1, 1])?)?,
                    dw_w: store.add(format!("{prefix}.dw.weight"), scaled_normal([1, m, 3, 3], 9, 1.0, rng)?)?,
                    dw_b: store.add(format!("{prefix}.dw.bias"), Tensor::zeros([1, m, 1, 1])?)?,
                    w_o: store.add(format!("{prefix}.offset.weight"), offset_proj(rng)?)?,
                }
            }
            OffsetVariant::SigmoidScope => OffsetHead::SigmoidScope {
                w1: store.add(format!("{prefix}.scope.weight"), scaled_normal([1, 1, pout, pin], pin, 1.0, rng)?)?,
                w2: store.add(format!("{prefix}.offset.weight"), offset_proj(rng)?)?,
            },
        };
        Ok(Dum { config, head })
    }

    fn check_input<T: Element>(&self, x: &Var<'_, T>) -> Result<()> {
        if x.dims()[1] != self.config.channels {
            return Err(shape_err!("dum: input has {} channels, expected {}", x.dims()[1], self.config.channels));
        }
        Ok(())
    }

    /// `DWConv3x3(GeLU(Conv1x1(F_in)))`; only defined for the tanh head.
    pub fn mid<'t, T: Element>(&self, x: Var<'t, T>, p: &Bound<'t, T>) -> Result<Var<'t, T>> {
        self.check_input(&x)?;
        match self.head {
            OffsetHead::Tanh {
                conv_w,
                conv_b,
                dw_w,
                dw_b,
                ..
            } => x.conv1x1(p[conv_w], Some(p[conv_b]))?.gelu().dwconv3x3(p[dw_w], Some(p[dw_b])),
            OffsetHead::SigmoidScope { .. } => Err(contract_err!("dum: the sigmoid-scope head has no F_mid branch")),
        }
    }

    /// Offsets as predicted, before reconstruction: `(N, 2s²G, H, W)` for
    /// linear-then-shuffle, `(N, 2G, sH, sW)` for shuffle-then-linear.
    pub fn raw_offsets<'t, T: Element>(&self, x: Var<'t, T>, p: &Bound<'t, T>) -> Result<Var<'t, T>> {
        let s = self.config.scale;
        let shuffle = |v: Var<'t, T>| match self.config.order {
            OffsetOrder::LinearThenShuffle => Ok(v),
            OffsetOrder::ShuffleThenLinear => v.pixel_shuffle(s),
        };
        match self.head {
            OffsetHead::Tanh { w_o, .. } => {
                let f = shuffle(self.mid(x, p)?)?;
                Ok(f.conv1x1(p[w_o], None)?.tanh().scale(self.config.alpha))
            }
            OffsetHead::SigmoidScope { w1, w2 } => {
                self.check_input(&x)?;
                let f = shuffle(x)?;
                let gate = f.conv1x1(p[w1], None)?.sigmoid().scale(0.5);
                gate.mul(f.conv1x1(p[w2], None)?)
            }
        }
    }

    /// Offset field at output resolution, `(N, 2G, sH, sW)`.
    pub fn offset_field<'t, T: Element>(&self, x: Var<'t, T>, p: &Bound<'t, T>) -> Result<Var<'t, T>> {
        let raw = self.raw_offsets(x, p)?;
        match self.config.order {
            OffsetOrder::LinearThenShuffle => raw.pixel_shuffle(self.config.scale),
            OffsetOrder::ShuffleThenLinear => Ok(raw),
        }
    }

    /// The bilinear source grid repeated for every group, `(1, 2G, sH, sW)`.
    pub fn base_grid<T: Element>(&self, h: usize, w: usize) -> Result<Tensor<T>> {
        let g = upsample_grid::<T>(h, w, self.config.scale)?;
        let [_, _, oh, ow] = g.dims();
        Tensor::from_fn([1, 2 * self.config.groups, oh, ow], |[_, c, i, j]| g.at([0, c % 2, i, j]))
    }

    /// Sampling coordinates `S = G + R(O)`.
    pub fn sampling_grid<'t, T: Element>(&self, x: Var<'t, T>, p: &Bound<'t, T>) -> Result<Var<'t, T>> {
        let [_, _, h, w] = x.dims();
        let offsets = self.offset_field(x, p)?;
        offsets.add(x.tape().constant(self.base_grid(h, w)?))
    }

    /// `(N, C, H, W) → (N, C, sH, sW)`.
    pub fn forward<'t, T: Element>(&self, x: Var<'t, T>, p: &Bound<'t, T>) -> Result<Var<'t, T>> {
        self.check_input(&x)?;
        let grid = self.sampling_grid(x, p)?;
        x.grid_sample(grid)
    }
}

#[derive(Clone, Debug)]
pub struct CflmdConfig {
    pub channels: usize,
    pub mid: usize,
    pub groups: usize,
    pub alpha: f64,
    pub ratios: Vec<usize>,
    pub variant: OffsetVariant,
    pub order: OffsetOrder,
    pub init_std: f64,
}

#[derive(Clone, Debug)]
pub struct Cflmd {
    pub config: CflmdConfig,
    pub branches: Vec<Dum>,
}

impl Cflmd {
    pub fn init<T: Element>(store: &mut ParamStore<T>, prefix: &str, config: CflmdConfig, rng: &mut Rng) -> Result<Self> {
        let mut branches = Vec::with_capacity(config.ratios.len());
        for (i, &r) in config.ratios.iter().enumerate() {
            let dc = DumConfig {
                channels: config.channels,
                mid: config.mid,
                groups: config.groups,
                alpha: config.alpha,
                scale: r,
                variant: config.variant,
                order: config.order,
                init_std: config.init_std,
            };
            branches.push(Dum::init(store, &format!("{prefix}.branch{i}"), dc, rng)?);
        }
        Ok(Cflmd { config, branches })
    }

    /// Runs of consecutive equal ratios; each run becomes one pyramid level.
    pub fn level_groups(&self) -> Vec<std::ops::Range<usize>> {
        let r = &self.config.ratios;
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=r.len() {
            if i == r.len() || r[i] != r[start] {
                out.push(start..i);
                start = i;
            }
        }
        out
    }

    /// One branch: pool by `r`, upsample by `r` with its DUM.
    pub fn branch<'t, T: Element>(&self, i: usize, agg: Var<'t, T>, p: &Bound<'t, T>) -> Result<Var<'t, T>> {
        let r = self.config.ratios[i];
        let [_, _, h, w] = agg.dims();
        let pooled = if r == 1 { agg } else { agg.adaptive_avg_pool((h / r, w / r))? };
        self.branches[i].forward(pooled, p)
    }

    /// Redistributes the stride-4 aggregate into a pyramid of stride-4 maps.
    pub fn distribute<'t, T: Element>(&self, agg: Var<'t, T>, p: &Bound<'t, T>) -> Result<Vec<Var<'t, T>>> {
        let [_, c, h, w] = agg.dims();
        if c != self.config.channels {
            return Err(shape_err!("cflmd: aggregate has {c} channels, expected {}", self.config.channels));
        }
        for &r in &self.config.ratios {
            if h % r != 0 || w % r != 0 {
                return Err(contract_err!("cflmd: {h}×{w} aggregate is not divisible by pooling ratio {r}"));
            }
        }
        let mut levels = Vec::new();
        for group in self.level_groups() {
            let mut acc: Option<Var<'t, T>> = None;
            for i in group {
                let b = self.branch(i, agg, p)?;
                acc = Some(match acc {
                    None => b,
                    Some(a) => a.add(b)?,
                });
            }
            levels.push(acc.expect("non-empty group"));
        }
        Ok(levels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::nn::bilinear_resize;

    fn cfg(c: usize, s: usize) -> DumConfig {
        DumConfig {
            channels: c,
            mid: 8,
            groups: 2,
            alpha: 0.25,
            scale: s,
            variant: OffsetVariant::Tanh,
            order: OffsetOrder::LinearThenShuffle,
            init_std: 0.0,
        }
    }

    #[test]
    fn zero_projection_is_bilinear() {
        let mut rng = Rng::new(1);
        for s in [1, 2, 4] {
            let mut store = ParamStore::<f64>::new();
            let dum = Dum::init(&mut store, "d", cfg(4, s), &mut rng).unwrap();
            let x = Tensor::normal([2, 4, 5, 6], 0.0, 1.0, &mut rng).unwrap();
            let tape = Tape::new();
            let p = store.bind(&tape);
            let y = dum.forward(tape.constant(x.clone()), &p).unwrap().value();
            assert!(y.max_abs_diff(&bilinear_resize(&x, s).unwrap()).unwrap() < 1e-12, "s = {s}");
        }
    }

    #[test]
    fn offsets_are_bounded_and_shaped() {
        let mut rng = Rng::new(2);
        let mut store = ParamStore::<f64>::new();
        let mut c = cfg(4, 2);
        c.init_std = 10.0;
        let dum = Dum::init(&mut store, "d", c, &mut rng).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(Tensor::normal([1, 4, 3, 5], 0.0, 5.0, &mut rng).unwrap());
        let raw = dum.raw_offsets(x, &p).unwrap();
        assert_eq!(raw.dims(), [1, 2 * 4 * 2, 3, 5]);
        assert!(raw.value().max_abs() <= 0.25);
        assert_eq!(dum.offset_field(x, &p).unwrap().dims(), [1, 4, 6, 10]);
    }

    #[test]
    fn mid_collapses_to_gelu_with_identity_weights() {
        let mut rng = Rng::new(3);
        let mut store = ParamStore::<f64>::new();
        let mut c = cfg(3, 2);
        c.mid = 3;
        c.groups = 1;
        let dum = Dum::init(&mut store, "d", c, &mut rng).unwrap();
        let OffsetHead::Tanh { conv_w, dw_w, .. } = dum.head else { unreachable!() };
        store.set(conv_w, Tensor::from_fn([1, 1, 3, 3], |[_, _, i, j]| if i == j { 1.0 } else { 0.0 }).unwrap()).unwrap();
        store.set(dw_w, Tensor::from_fn([1, 3, 3, 3], |[_, _, i, j]| if i == 1 && j == 1 { 1.0 } else { 0.0 }).unwrap()).unwrap();
        let x = Tensor::normal([1, 3, 4, 4], 0.0, 1.0, &mut rng).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let mid = dum.mid(tape.constant(x.clone()), &p).unwrap().value();
        assert!(mid.max_abs_diff(&x.map(crate::activation::gelu)).unwrap() < 1e-15);
    }

    #[test]
    fn constant_input_stays_constant() {
        let mut rng = Rng::new(4);
        let mut store = ParamStore::<f64>::new();
        let mut c = cfg(4, 4);
        c.init_std = 3.0;
        let dum = Dum::init(&mut store, "d", c, &mut rng).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let y = dum.forward(tape.constant(Tensor::full([1, 4, 3, 3], 0.7).unwrap()), &p).unwrap().value();
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn sigmoid_scope_gate_range_and_zero_init() {
        let mut rng = Rng::new(5);
        let mut store = ParamStore::<f64>::new();
        let mut c = cfg(4, 2);
        c.variant = OffsetVariant::SigmoidScope;
        let dum = Dum::init(&mut store, "d", c, &mut rng).unwrap();
        let x = Tensor::normal([1, 4, 3, 3], 0.0, 1.0, &mut rng).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let xv = tape.constant(x.clone());
        assert!(dum.raw_offsets(xv, &p).unwrap().value().data().iter().all(|&v| v == 0.0));
        assert!(dum.mid(xv, &p).is_err());
        let OffsetHead::SigmoidScope { w1, .. } = dum.head else { unreachable!() };
        let gate = xv.conv1x1(p[w1], None).unwrap().sigmoid().scale(0.5).value();
        assert!(gate.data().iter().all(|&v| v > 0.0 && v < 0.5));
    }

    #[test]
    fn shuffle_then_linear_shapes() {
        let mut rng = Rng::new(6);
        let mut store = ParamStore::<f64>::new();
        let mut c = cfg(4, 2);
        c.order = OffsetOrder::ShuffleThenLinear;
        c.init_std = 1.0;
        let dum = Dum::init(&mut store, "d", c.clone(), &mut rng).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(Tensor::normal([2, 4, 3, 3], 0.0, 1.0, &mut rng).unwrap());
        assert_eq!(dum.raw_offsets(x, &p).unwrap().dims(), [2, 4, 6, 6]);
        assert_eq!(dum.forward(x, &p).unwrap().dims(), [2, 4, 6, 6]);
        c.mid = 6;
        assert!(Dum::init(&mut ParamStore::<f64>::new(), "d", c, &mut rng).is_err());
    }

    #[test]
    fn groups_are_independent() {
        let mut rng = Rng::new(7);
        let mut store = ParamStore::<f64>::new();
        let mut c = cfg(4, 2);
        c.init_std = 2.0;
        let dum = Dum::init(&mut store, "d", c, &mut rng).unwrap();
        let x = Tensor::normal([1, 4, 4, 4], 0.0, 1.0, &mut rng).unwrap();
        let run = |store: &ParamStore<f64>| {
            let tape = Tape::new();
            let p = store.bind(&tape);
            dum.forward(tape.constant(x.clone()), &p).unwrap().value()
        };
        let before = run(&store);
        // Output channels of the projection: 2·s²·G, group k owns the block
        // [2s²k, 2s²(k+1)).
        let OffsetHead::Tanh { w_o, .. } = dum.head else { unreachable!() };
        let w = store.get(w_o).clone();
        let zeroed = Tensor::from_fn(w.dims(), |[a, b, o, i]| if o >= 8 { 0.0 } else { w.at([a, b, o, i]) }).unwrap();
        store.set(w_o, zeroed).unwrap();
        let after = run(&store);
        let plane = 8 * 8;
        assert_eq!(&before.data()[..2 * plane], &after.data()[..2 * plane]);
        assert_ne!(&before.data()[2 * plane..], &after.data()[2 * plane..]);
    }

    #[test]
    fn s2_sampling_grid_is_monotone() {
        let mut rng = Rng::new(8);
        let mut store = ParamStore::<f64>::new();
        let mut c = cfg(4, 2);
        c.init_std = 50.0;
        let dum = Dum::init(&mut store, "d", c, &mut rng).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let grid = dum
            .sampling_grid(tape.constant(Tensor::normal([2, 4, 5, 5], 0.0, 3.0, &mut rng).unwrap()), &p)
            .unwrap()
            .value();
        let [n, c2, h, w] = grid.dims();
        for b in 0..n {
            for ch in 0..c2 {
                for i in 0..h {
                    for j in 0..w {
                        if ch % 2 == 0 && j + 1 < w {
                            assert!(grid.at([b, ch, i, j + 1]) >= grid.at([b, ch, i, j]));
                        }
                        if ch % 2 == 1 && i + 1 < h {
                            assert!(grid.at([b, ch, i + 1, j]) >= grid.at([b, ch, i, j]));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn distribute_levels_and_constants() {
        let mut rng = Rng::new(9);
        let mut store = ParamStore::<f64>::new();
        let cfg = CflmdConfig {
            channels: 4,
            mid: 4,
            groups: 2,
            alpha: 0.25,
            ratios: vec![1, 1, 2, 2, 4, 8],
            variant: OffsetVariant::Tanh,
            order: OffsetOrder::LinearThenShuffle,
            init_std: 0.0,
        };
        let m = Cflmd::init(&mut store, "c", cfg, &mut rng).unwrap();
        assert_eq!(m.level_groups(), vec![0..2, 2..4, 4..5, 5..6]);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let levels = m.distribute(tape.constant(Tensor::full([2, 4, 8, 8], 0.3).unwrap()), &p).unwrap();
        assert_eq!(levels.len(), 4);
        for (l, lvl) in levels.iter().enumerate() {
            assert_eq!(lvl.dims(), [2, 4, 8, 8]);
            let want = if l < 2 { 0.6 } else { 0.3 };
            assert!(lvl.value().data().iter().all(|&v| (v - want).abs() < 1e-14));
        }
        assert!(m.distribute(tape.constant(Tensor::full([1, 4, 12, 12], 0.3).unwrap()), &p).is_err());
    }
}
