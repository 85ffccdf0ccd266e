//! Cross-layer feature aggregation: pooled pyramid tokens pass through a
//! Mamba block and come back as per-level channel attention weights `Ψ_l`,
//! which recalibrate the levels before they are fused at stride 4.

use crate::autodiff::{concat_rows, Tape, Var};
use crate::element::Element;
use crate::error::{contract_err, shape_err, Result};
use crate::params::{scaled_normal, Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::ssm::MambaBlock;
use crate::tensor::Tensor;

/// Number of pyramid levels (strides 4, 8, 16, 32).
pub const LEVELS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct CflmaConfig {
    pub in_channels: [usize; LEVELS],
    pub unified: usize,
    pub grid: usize,
    pub d_state: usize,
    pub expand: usize,
    pub bidirectional: bool,
    pub positional_encoding: bool,
}

/// Position of one token in the serialized pyramid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenIndex {
    pub level: usize,
    pub y: usize,
    pub x: usize,
}

/// What runs between serialization and the weight heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SequenceMode {
    Mamba,
    /// Identity sequence op; isolates the pooling and the heads.
    Bypass,
}

/// How the attention weights are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightMode {
    Learned,
    /// `Ψ_l = 1`: plain fusion without recalibration.
    Ones,
    /// `Ψ_l = 0`.
    Zeros,
}

#[derive(Clone, Debug)]
pub struct Cflma {
    pub config: CflmaConfig,
    pub unify: Vec<(ParamId, ParamId)>,
    pub mamba: MambaBlock,
    pub heads: Vec<(ParamId, ParamId)>,
}

pub struct CflmaOutput<'t, T> {
    /// `F̂_l = Ψ_l ⊙ F_l`, native resolution, `C_u` channels.
    pub levels: Vec<Var<'t, T>>,
    /// `Ψ_l`, each `(N, C_u, 1, 1)`.
    pub weights: Vec<Var<'t, T>>,
    /// Mean of the recalibrated levels resized to stride 4.
    pub aggregate: Var<'t, T>,
}

/// Pools each level to `g×g`, flattens row-major and concatenates the levels
/// in order. Returns the `(N, 1, L·g², C)` token sequence and the position of
/// every token.
pub fn serialize_pyramid<'t, T: Element>(levels: &[Var<'t, T>], g: usize) -> Result<(Var<'t, T>, Vec<TokenIndex>)> {
    if levels.is_empty() || g == 0 {
        return Err(contract_err!("serialize_pyramid: need levels and a positive grid"));
    }
    let c = levels[0].dims()[1];
    let mut parts = Vec::with_capacity(levels.len());
    let mut index = Vec::with_capacity(levels.len() * g * g);
    for (l, lvl) in levels.iter().enumerate() {
        let [_, cl, h, w] = lvl.dims();
        if cl != c {
            return Err(shape_err!("serialize_pyramid: level {l} has {cl} channels, level 0 has {c}"));
        }
        if h < g || w < g {
            return Err(contract_err!("serialize_pyramid: level {l} is {h}×{w}, smaller than the {g}×{g} token grid"));
        }
        parts.push(lvl.adaptive_avg_pool((g, g))?.to_tokens()?);
        for y in 0..g {
            for x in 0..g {
                index.push(TokenIndex { level: l, y, x });
            }
        }
    }
    Ok((concat_rows(&parts)?, index))
}

/// Additive sinusoidal position code for `l` tokens of width `c`.
pub fn sinusoidal_encoding<T: Element>(l: usize, c: usize) -> Result<Tensor<T>> {
    Tensor::from_fn([1, 1, l, c], |[_, _, pos, i]| {
        let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / c as f64);
        let a = pos as f64 * freq;
        T::from_f64(if i % 2 == 0 { a.sin() } else { a.cos() })
    })
}

impl Cflma {
    pub fn init<T: Element>(store: &mut ParamStore<T>, prefix: &str, config: CflmaConfig, rng: &mut Rng) -> Result<Self> {
        let cu = config.unified;
        let mut unify = Vec::with_capacity(LEVELS);
        for (l, &cin) in config.in_channels.iter().enumerate() {
            let w = store.add(format!("{prefix}.unify{l}.weight"), scaled_normal([1, 1, cu, cin], cin, 1.0, rng)?)?;
            let b = store.add(format!("{prefix}.unify{l}.bias"), Tensor::zeros([1, cu, 1, 1])?)?;
            unify.push((w, b));
        }
        let mamba = MambaBlock::init(
            store,
            &format!("{prefix}.mamba"),
            cu,
            config.expand * cu,
            config.d_state,
            config.bidirectional,
            rng,
        )?;
        let mut heads = Vec::with_capacity(LEVELS);
        for l in 0..LEVELS {
            let w = store.add(format!("{prefix}.head{l}.weight"), scaled_normal([1, 1, cu, cu], cu, 1.0, rng)?)?;
            let b = store.add(format!("{prefix}.head{l}.bias"), Tensor::zeros([1, 1, 1, cu])?)?;
            heads.push((w, b));
        }
        Ok(Cflma {
            config,
            unify,
            mamba,
            heads,
        })
    }

    /// Per-level 1×1 convolution to `C_u` channels.
    pub fn unify_channels<'t, T: Element>(&self, pyramid: &[Var<'t, T>], p: &Bound<'t, T>) -> Result<Vec<Var<'t, T>>> {
        if pyramid.len() != LEVELS {
            return Err(shape_err!("cflma expects {LEVELS} pyramid levels, got {}", pyramid.len()));
        }
        pyramid
            .iter()
            .zip(&self.unify)
            .map(|(f, &(w, b))| f.conv1x1(p[w], Some(p[b])))
            .collect()
    }

    /// Per-level token mean → linear head → sigmoid, as `(N, C_u, 1, 1)`.
    pub fn attention_weights<'t, T: Element>(
        &self,
        seq_out: Var<'t, T>,
        index: &[TokenIndex],
        p: &Bound<'t, T>,
    ) -> Result<Vec<Var<'t, T>>> {
        let [n, _, l, c] = seq_out.dims();
        if l != index.len() {
            return Err(shape_err!("attention_weights: {l} tokens, index has {}", index.len()));
        }
        let mut out = Vec::with_capacity(LEVELS);
        for (level, &(w, b)) in self.heads.iter().enumerate() {
            let start = index.iter().position(|t| t.level == level);
            let end = index.iter().rposition(|t| t.level == level);
            let (Some(start), Some(end)) = (start, end) else {
                return Err(shape_err!("attention_weights: no tokens for level {level}"));
            };
            let pooled = seq_out.row_mean(start, end + 1)?;
            let psi = pooled.matmul(p[w])?.add(p[b])?.sigmoid();
            out.push(psi.reshape([n, c, 1, 1])?);
        }
        Ok(out)
    }

    pub fn forward<'t, T: Element>(
        &self,
        pyramid: &[Var<'t, T>],
        p: &Bound<'t, T>,
        sequence: SequenceMode,
        weights: WeightMode,
    ) -> Result<CflmaOutput<'t, T>> {
        let levels = self.unify_channels(pyramid, p)?;
        let [n, cu, h0, w0] = levels[0].dims();
        for (l, f) in levels.iter().enumerate() {
            let [_, _, h, w] = f.dims();
            if h << l != h0 || w << l != w0 {
                return Err(shape_err!("pyramid level {l} is {h}×{w}; level 0 is {h0}×{w0}"));
            }
        }
        let psi: Vec<Var<'t, T>> = match weights {
            WeightMode::Learned => {
                let (mut seq, index) = serialize_pyramid(&levels, self.config.grid)?;
                if self.config.positional_encoding {
                    let code = sinusoidal_encoding(index.len(), cu)?;
                    seq = seq.add(levels[0].tape().constant(code))?;
                }
                let seq_out = match sequence {
                    SequenceMode::Mamba => self.mamba.forward(seq, p)?,
                    SequenceMode::Bypass => seq,
                };
                let psi = self.attention_weights(seq_out, &index, p)?;
                for w in &psi {
                    let v = w.value();
                    if !v.data().iter().all(|&x| x > T::ZERO && x < T::ONE) {
                        return Err(crate::Error::Numeric("attention weight left (0, 1)".into()));
                    }
                }
                psi
            }
            WeightMode::Ones | WeightMode::Zeros => {
                let fill = if weights == WeightMode::Ones { T::ONE } else { T::ZERO };
                let tape: &Tape<T> = levels[0].tape();
                (0..LEVELS).map(|_| Ok(tape.constant(Tensor::full([n, cu, 1, 1], fill)?))).collect::<Result<_>>()?
            }
        };
        let recal: Vec<Var<'t, T>> = levels.iter().zip(&psi).map(|(f, w)| f.mul(*w)).collect::<Result<_>>()?;
        let mut agg = recal[0];
        for (l, f) in recal.iter().enumerate().skip(1) {
            agg = agg.add(f.bilinear_resize(1 << l)?)?;
        }
        let aggregate = agg.scale(1.0 / LEVELS as f64);
        Ok(CflmaOutput {
            levels: recal,
            weights: psi,
            aggregate,
        })
    }
}
