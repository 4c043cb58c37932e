//! Model and per-stage training configuration.

use serde::{Deserialize, Serialize};

use crate::data::Modality;
use crate::error::{Error, Result};

/// Dimensions of the whole pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Input feature width of the verbal stream.
    pub d_l: usize,
    /// Input feature width of the visual stream.
    pub d_vis: usize,
    /// Input feature width of the acoustic stream.
    pub d_a: usize,
    /// Channels produced by the temporal convolution.
    pub d_ch: usize,
    pub d_k: usize,
    /// Per-head value width.
    pub d_v: usize,
    /// Output width of each modality encoder.
    pub d_o: usize,
    pub heads: usize,
    pub layers: usize,
    /// Temporal convolution width (odd).
    pub kernel: usize,
    /// Attention window radius; `None` attends to the whole sequence.
    pub window: Option<usize>,
    pub causal: bool,
    /// Longest sequence (including the classification token) an encoder accepts.
    pub t_max: usize,
    /// Hidden width of the two-layer view encoders.
    pub d_mid: usize,
    /// Output width of the view encoders.
    pub d_r: usize,
    pub view_kernel: usize,
    pub cca_reg: f64,
    /// Canonical components per view pair; `None` uses `d_r`.
    pub cca_components: Option<usize>,
    /// Width of the fused attention projections.
    pub d_t: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_l: 8,
            d_vis: 12,
            d_a: 10,
            d_ch: 16,
            d_k: 8,
            d_v: 16,
            d_o: 16,
            heads: 2,
            layers: 1,
            kernel: 3,
            window: None,
            causal: false,
            t_max: 64,
            d_mid: 12,
            d_r: 8,
            view_kernel: 3,
            cca_reg: 1e-4,
            cca_components: None,
            d_t: 16,
        }
    }
}

impl ModelConfig {
    pub fn input_dim(&self, m: Modality) -> usize {
        match m {
            Modality::L => self.d_l,
            Modality::V => self.d_vis,
            Modality::A => self.d_a,
        }
    }

    pub fn components(&self) -> usize {
        self.cca_components.unwrap_or(self.d_r)
    }

    pub fn attention(&self, m: Modality) -> AttentionConfig {
        AttentionConfig {
            d_in: self.input_dim(m),
            d_ch: self.d_ch,
            d_k: self.d_k,
            d_v: self.d_v,
            d_o: self.d_o,
            heads: self.heads,
            layers: self.layers,
            kernel: self.kernel,
            window: self.window,
            causal: self.causal,
            t_max: self.t_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_l", self.d_l),
            ("d_vis", self.d_vis),
            ("d_a", self.d_a),
            ("d_ch", self.d_ch),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("d_o", self.d_o),
            ("heads", self.heads),
            ("layers", self.layers),
            ("t_max", self.t_max),
            ("d_mid", self.d_mid),
            ("d_r", self.d_r),
            ("d_t", self.d_t),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        for (name, k) in [("kernel", self.kernel), ("view_kernel", self.view_kernel)] {
            if k % 2 == 0 {
                return Err(Error::Config(format!("{name} {k} must be odd")));
            }
        }
        if self.layers > 1 && self.d_o != self.d_ch {
            return Err(Error::Config("stacked delta layers need d_o == d_ch".into()));
        }
        if self.d_r >= self.d_o {
            return Err(Error::Config(format!(
                "view encoder width d_r={} must be below d_o={}",
                self.d_r, self.d_o
            )));
        }
        if self.components() == 0 || self.components() > self.d_r {
            return Err(Error::Config(format!(
                "canonical components {} must lie in 1..={}",
                self.components(),
                self.d_r
            )));
        }
        if !(self.cca_reg > 0.0) {
            return Err(Error::Config("cca_reg must be positive".into()));
        }
        Ok(())
    }
}

/// Per-modality delta self-attention dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub d_in: usize,
    pub d_ch: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_o: usize,
    pub heads: usize,
    pub layers: usize,
    pub kernel: usize,
    pub window: Option<usize>,
    pub causal: bool,
    pub t_max: usize,
}

/// The five separately trained modules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    SelfattnL,
    SelfattnV,
    SelfattnA,
    Dcca,
    CrossattnFused,
}

impl StageTag {
    pub const ALL: [StageTag; 5] = [
        StageTag::SelfattnL,
        StageTag::SelfattnV,
        StageTag::SelfattnA,
        StageTag::Dcca,
        StageTag::CrossattnFused,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StageTag::SelfattnL => "selfattn_l",
            StageTag::SelfattnV => "selfattn_v",
            StageTag::SelfattnA => "selfattn_a",
            StageTag::Dcca => "dcca",
            StageTag::CrossattnFused => "crossattn_fused",
        }
    }

    pub fn parse(s: &str) -> Option<StageTag> {
        let s = s.to_ascii_lowercase();
        StageTag::ALL.into_iter().find(|t| t.name() == s)
    }

    pub fn unimodal(m: Modality) -> StageTag {
        match m {
            Modality::L => StageTag::SelfattnL,
            Modality::V => StageTag::SelfattnV,
            Modality::A => StageTag::SelfattnA,
        }
    }

    pub fn modality(self) -> Option<Modality> {
        match self {
            StageTag::SelfattnL => Some(Modality::L),
            StageTag::SelfattnV => Some(Modality::V),
            StageTag::SelfattnA => Some(Modality::A),
            _ => None,
        }
    }
}

impl std::fmt::Display for StageTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Optimiser settings for one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl StageConfig {
    /// Hyperparameters reported for the full-scale emotion benchmark.
    pub fn reference(tag: StageTag) -> Self {
        let (epochs, lr, batch_size, weight_decay) = match tag {
            StageTag::SelfattnL => (10, 1e-6, 32, 1e-4),
            StageTag::SelfattnV => (10, 1e-5, 8, 1e-4),
            StageTag::SelfattnA => (10, 1e-5, 8, 1e-4),
            StageTag::Dcca => (100, 2e-4, 4, 1e-6),
            StageTag::CrossattnFused => (5, 1e-5, 8, 1e-6),
        };
        Self {
            epochs,
            lr,
            batch_size,
            weight_decay,
        }
    }

    /// Settings tuned for the desk-scale synthetic benchmark, where the
    /// reference learning rates are too small to move the weights in a
    /// few hundred steps.
    pub fn desk(tag: StageTag) -> Self {
        let (epochs, lr, batch_size, weight_decay) = match tag {
            StageTag::SelfattnL | StageTag::SelfattnV | StageTag::SelfattnA => (12, 3e-3, 8, 1e-4),
            StageTag::Dcca => (10, 1e-3, 4, 1e-6),
            StageTag::CrossattnFused => (30, 5e-3, 8, 1e-6),
        };
        Self {
            epochs,
            lr,
            batch_size,
            weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr and weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Stage settings for a full run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StagePlan {
    pub selfattn_l: StageConfig,
    pub selfattn_v: StageConfig,
    pub selfattn_a: StageConfig,
    pub dcca: StageConfig,
    pub crossattn_fused: StageConfig,
}

impl StagePlan {
    pub fn reference() -> Self {
        Self::from_fn(StageConfig::reference)
    }

    pub fn desk() -> Self {
        Self::from_fn(StageConfig::desk)
    }

    fn from_fn(f: impl Fn(StageTag) -> StageConfig) -> Self {
        Self {
            selfattn_l: f(StageTag::SelfattnL),
            selfattn_v: f(StageTag::SelfattnV),
            selfattn_a: f(StageTag::SelfattnA),
            dcca: f(StageTag::Dcca),
            crossattn_fused: f(StageTag::CrossattnFused),
        }
    }

    pub fn get(&self, tag: StageTag) -> &StageConfig {
        match tag {
            StageTag::SelfattnL => &self.selfattn_l,
            StageTag::SelfattnV => &self.selfattn_v,
            StageTag::SelfattnA => &self.selfattn_a,
            StageTag::Dcca => &self.dcca,
            StageTag::CrossattnFused => &self.crossattn_fused,
        }
    }

    pub fn get_mut(&mut self, tag: StageTag) -> &mut StageConfig {
        match tag {
            StageTag::SelfattnL => &mut self.selfattn_l,
            StageTag::SelfattnV => &mut self.selfattn_v,
            StageTag::SelfattnA => &mut self.selfattn_a,
            StageTag::Dcca => &mut self.dcca,
            StageTag::CrossattnFused => &mut self.crossattn_fused,
        }
    }
}

impl Default for StagePlan {
    fn default() -> Self {
        Self::desk()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_hyperparameters() {
        let p = StagePlan::reference();
        assert_eq!(p.selfattn_l, StageConfig { epochs: 10, lr: 1e-6, batch_size: 32, weight_decay: 1e-4 });
        assert_eq!(p.selfattn_v, StageConfig { epochs: 10, lr: 1e-5, batch_size: 8, weight_decay: 1e-4 });
        assert_eq!(p.selfattn_a, p.selfattn_v);
        assert_eq!(p.dcca, StageConfig { epochs: 100, lr: 2e-4, batch_size: 4, weight_decay: 1e-6 });
        assert_eq!(p.crossattn_fused, StageConfig { epochs: 5, lr: 1e-5, batch_size: 8, weight_decay: 1e-6 });
    }

    #[test]
    fn default_model_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_even_kernel_and_wide_bottleneck() {
        let c = ModelConfig { kernel: 2, ..Default::default() };
        assert!(c.validate().is_err());
        let c = ModelConfig { d_r: 16, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn stage_tags_round_trip() {
        for t in StageTag::ALL {
            assert_eq!(StageTag::parse(t.name()), Some(t));
        }
        assert_eq!(StageTag::parse("SelfAttn_V"), Some(StageTag::SelfattnV));
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let c: ModelConfig = toml::from_str("d_ch = 4\nwindow = 3").unwrap();
        assert_eq!(c.d_ch, 4);
        assert_eq!(c.window, Some(3));
        assert_eq!(c.d_o, 16);
    }
}
