//! Model and training configuration: one strict JSON record.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::element::DType;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetVariant {
    /// `O = α·tanh(W_o F_mid)`.
    Tanh,
    /// `O = 0.5·sigmoid(W₁F)·(W₂F)` on the raw input.
    SigmoidScope,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetOrder {
    /// Predict `2s²·G` channels at low resolution, then pixel-shuffle.
    LinearThenShuffle,
    /// Pixel-shuffle the features first, then predict `2·G` channels.
    ShuffleThenLinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Square input side; must be divisible by 32.
    pub input_size: usize,
    pub backbone_channels: [usize; 4],
    pub unified_channels: usize,
    /// Pooled token grid per pyramid level.
    pub token_grid: usize,
    pub ssm_state: usize,
    pub ssm_expand: usize,
    pub bidirectional: bool,
    pub positional_encoding: bool,
    pub dum_mid_channels: usize,
    pub dum_groups: usize,
    pub offset_bound: f64,
    pub offset_variant: OffsetVariant,
    pub offset_order: OffsetOrder,
    /// Standard deviation of the offset projection at init; 0 gives exact
    /// bilinear upsampling at step 0.
    pub offset_init_std: f64,
    pub pooling_ratios: Vec<usize>,
    pub use_cflma: bool,
    pub use_cflmd: bool,
    /// Hidden width of the per-pixel saliency head; 0 makes it linear.
    pub head_hidden: usize,

    pub seed: u64,
    pub dtype: DType,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub eval_samples: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 128,
            backbone_channels: [32, 64, 128, 256],
            unified_channels: 256,
            token_grid: 4,
            ssm_state: 16,
            ssm_expand: 2,
            bidirectional: false,
            positional_encoding: false,
            dum_mid_channels: 64,
            dum_groups: 4,
            offset_bound: 0.25,
            offset_variant: OffsetVariant::Tanh,
            offset_order: OffsetOrder::LinearThenShuffle,
            offset_init_std: 0.0,
            pooling_ratios: vec![1, 1, 2, 2, 4, 8],
            use_cflma: true,
            use_cflmd: true,
            head_hidden: 64,
            seed: 0,
            dtype: DType::F32,
            learning_rate: 1e-3,
            steps: 500,
            batch_size: 4,
            eval_every: 50,
            eval_samples: 32,
        }
    }
}

impl ModelConfig {
    /// 500 steps, batch 4, 64×64 inputs.
    pub fn quick() -> Self {
        ModelConfig {
            input_size: 64,
            token_grid: 2,
            ..Default::default()
        }
    }

    /// The quick setup trained ten times longer.
    pub fn full() -> Self {
        ModelConfig {
            steps: 5000,
            eval_every: 250,
            ..Self::quick()
        }
    }

    /// Smallest configuration that still exercises every path; used by the
    /// gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            input_size: 32,
            backbone_channels: [4, 4, 6, 8],
            unified_channels: 16,
            token_grid: 1,
            ssm_state: 4,
            dum_mid_channels: 4,
            dum_groups: 2,
            offset_init_std: 0.5,
            head_hidden: 4,
            dtype: DType::F64,
            ..Default::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "quick" => Ok(Self::quick()),
            "full" => Ok(Self::full()),
            "tiny" => Ok(Self::tiny()),
            "default" => Ok(Self::default()),
            other => Err(Error::Config(format!("unknown preset {other:?} (quick, full, tiny, default)"))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Applies a `key=value` override; the value is parsed as JSON, falling
    /// back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let key = key.trim();
        let value: serde_json::Value =
            serde_json::from_str(raw.trim()).unwrap_or_else(|_| serde_json::Value::String(raw.trim().to_string()));
        let mut obj = serde_json::to_value(&*self).expect("config serializes");
        let map = obj.as_object_mut().expect("config is an object");
        if !map.contains_key(key) {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        map.insert(key.to_string(), value);
        let cfg: ModelConfig = serde_json::from_value(obj).map_err(|e| Error::Config(format!("{key}: {e}")))?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return bad(format!("input_size {} must be a positive multiple of 32", self.input_size));
        }
        if self.backbone_channels.contains(&0) || self.unified_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        let coarsest = self.input_size / 32;
        if self.token_grid == 0 || self.token_grid > coarsest {
            return bad(format!(
                "token_grid {} must be in 1..={coarsest} for input_size {}",
                self.token_grid, self.input_size
            ));
        }
        if self.ssm_state == 0 || self.ssm_expand == 0 {
            return bad("ssm_state and ssm_expand must be positive".into());
        }
        if self.dum_mid_channels == 0 || self.dum_groups == 0 || self.unified_channels % self.dum_groups != 0 {
            return bad(format!(
                "unified_channels {} must be divisible by dum_groups {}",
                self.unified_channels, self.dum_groups
            ));
        }
        if !(self.offset_bound > 0.0 && self.offset_bound.is_finite()) {
            return bad(format!("offset_bound must be positive, got {}", self.offset_bound));
        }
        if !(self.offset_init_std >= 0.0 && self.offset_init_std.is_finite()) {
            return bad("offset_init_std must be >= 0".into());
        }
        let stride4 = self.input_size / 4;
        for &r in &self.pooling_ratios {
            if r == 0 || stride4 % r != 0 {
                return bad(format!("pooling ratio {r} does not divide the stride-4 extent {stride4}"));
            }
            if self.offset_order == OffsetOrder::ShuffleThenLinear {
                let width = match self.offset_variant {
                    OffsetVariant::Tanh => self.dum_mid_channels,
                    OffsetVariant::SigmoidScope => self.unified_channels,
                };
                if width % (r * r) != 0 {
                    return bad(format!("shuffle_then_linear needs {width} channels divisible by {}", r * r));
                }
            }
        }
        if self.pooling_ratios.is_empty() {
            return bad("pooling_ratios must not be empty".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.eval_samples == 0 {
            return bad("batch_size, eval_every and eval_samples must be positive".into());
        }
        Ok(())
    }
}
