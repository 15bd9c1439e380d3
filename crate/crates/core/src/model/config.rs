use serde::{Deserialize, Serialize};

use crate::neurons::NeuronConfig;

use super::ModelError;

/// Channel multiplier (of `c`) and block count of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub mult: usize,
    pub blocks: usize,
}

impl StageSpec {
    pub const fn new(mult: usize, blocks: usize) -> Self {
        Self { mult, blocks }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressAt {
    /// Offset and size are read at the ground-truth cell during training.
    #[default]
    GtCell,
    /// Offset and size are read at the predicted score maximum.
    Argmax,
}

/// Architecture hyperparameters.
///
/// A stride-2 stem is followed by the convolutional stages, each opening
/// with a stride-2 downsampling conv; the transformer stages keep the final
/// resolution. Feature stride is therefore `2^(1 + conv_stages.len())`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub c: usize,
    pub conv_stages: Vec<StageSpec>,
    pub transformer_stages: Vec<StageSpec>,
    pub sep_expansion: usize,
    pub mlp_ratio: usize,
    pub num_heads: usize,
    /// `None` means `1/sqrt(d_head)`.
    pub ssa_scale: Option<f64>,
    pub timesteps: usize,
    pub neuron: NeuronConfig,
    pub template_size: usize,
    pub search_size: usize,
    pub head_top_channels: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub regress_at: RegressAt,
}

impl ModelConfig {
    pub fn base() -> Self {
        Self {
            name: "base".into(),
            c: 64,
            conv_stages: vec![StageSpec::new(1, 1), StageSpec::new(2, 2), StageSpec::new(4, 6)],
            transformer_stages: vec![StageSpec::new(8, 10), StageSpec::new(12, 6)],
            sep_expansion: 2,
            mlp_ratio: 4,
            num_heads: 8,
            ssa_scale: None,
            timesteps: 1,
            neuron: NeuronConfig::ilif(4),
            template_size: 128,
            search_size: 256,
            head_top_channels: 512,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            regress_at: RegressAt::GtCell,
        }
    }

    pub fn tiny() -> Self {
        Self {
            name: "tiny".into(),
            c: 32,
            transformer_stages: vec![StageSpec::new(8, 6), StageSpec::new(10, 2)],
            head_top_channels: 256,
            ..Self::base()
        }
    }

    /// Desk-scale network for the synthetic experiments.
    pub fn toy() -> Self {
        Self {
            name: "toy".into(),
            c: 8,
            conv_stages: vec![StageSpec::new(1, 1), StageSpec::new(2, 1)],
            transformer_stages: vec![StageSpec::new(4, 2)],
            num_heads: 2,
            template_size: 32,
            search_size: 64,
            head_top_channels: 32,
            ..Self::base()
        }
    }

    pub fn preset(name: &str) -> Result<Self, ModelError> {
        match name {
            "base" => Ok(Self::base()),
            "tiny" => Ok(Self::tiny()),
            "toy" => Ok(Self::toy()),
            other => Err(ModelError::Config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn stride(&self) -> usize {
        1 << (1 + self.conv_stages.len())
    }

    pub fn conv_channels(&self, stage: usize) -> usize {
        self.c * self.conv_stages[stage].mult
    }

    pub fn embed_dim(&self, stage: usize) -> usize {
        self.c * self.transformer_stages[stage].mult
    }

    pub fn final_dim(&self) -> usize {
        self.embed_dim(self.transformer_stages.len() - 1)
    }

    /// Side of the search-region feature map (and of the score map).
    pub fn search_feat(&self) -> usize {
        self.search_size / self.stride()
    }

    pub fn template_feat(&self) -> usize {
        self.template_size / self.stride()
    }

    pub fn head_channels(&self) -> [usize; 4] {
        let t = self.head_top_channels;
        [t, t / 2, t / 4, t / 8]
    }

    pub fn ssa_scale_value(&self, dim: usize) -> f64 {
        self.ssa_scale.unwrap_or_else(|| 1.0 / ((dim / self.num_heads) as f64).sqrt())
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        self.neuron.validate()?;
        if self.c == 0 || self.timesteps == 0 {
            return bad("c and timesteps must be positive".into());
        }
        if self.conv_stages.is_empty() || self.transformer_stages.is_empty() {
            return bad("at least one conv and one transformer stage required".into());
        }
        let s = self.stride();
        for (what, size) in [("template", self.template_size), ("search", self.search_size)] {
            if size == 0 || size % s != 0 {
                return bad(format!("{what} size {size} is not a multiple of stride {s}"));
            }
        }
        for (i, st) in self.transformer_stages.iter().enumerate() {
            let d = self.c * st.mult;
            if d % self.num_heads != 0 {
                return bad(format!("transformer stage {i} width {d} not divisible by {} heads", self.num_heads));
            }
        }
        if self.head_top_channels < 8 || self.head_top_channels % 8 != 0 {
            return bad("head_top_channels must be a positive multiple of 8".into());
        }
        if self.sep_expansion == 0 || self.mlp_ratio == 0 {
            return bad("expansion ratios must be positive".into());
        }
        Ok(())
    }
}
