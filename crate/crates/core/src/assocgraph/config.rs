use serde::{Deserialize, Serialize};

use crate::appearance::SIGMA0;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssociationMode {
    Learned,
    /// Greedy matching on a fixed linear score of appearance cosine, IoU,
    /// class agreement and confidence.
    Heuristic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    Learned,
    /// Mean matched-detection confidence and majority-vote class.
    Heuristic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    Lstm,
    Simple,
    /// Experimental: GNN track output fed forward untouched. Unstable.
    None,
}

/// Weights and thresholds of the heuristic association baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeuristicConfig {
    /// `[appearance cosine, IoU, class match, confidence]`.
    pub weights: [f64; 4],
    /// Minimum score, as a fraction of the weight sum, for a match.
    pub match_threshold: f64,
    /// Unmatched detections at or above this confidence start tracks.
    pub init_confidence: f64,
}

impl Default for HeuristicConfig {
    fn default() -> Self {
        Self {
            weights: [1.0, 1.0, 1.0, 1.0],
            match_threshold: 0.6,
            init_confidence: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub appearance_dim: usize,
    pub grid: usize,
    /// Embedding channels.
    pub d: usize,
    pub blocks: usize,
    pub interleave_residuals: bool,
    /// Off: node updates use ungated sums and two-layer update networks.
    pub gated_aggregation: bool,
    pub limited_gnn: bool,
    pub use_appearance: bool,
    pub const_variance: bool,
    pub association: AssociationMode,
    pub scoring: ScoringMode,
    pub gate: GateMode,
    pub sigma0: f64,
    pub sigma_tilde: f64,
    pub heuristic: HeuristicConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            appearance_dim: 8,
            grid: 24,
            d: 32,
            blocks: 2,
            interleave_residuals: true,
            gated_aggregation: true,
            limited_gnn: false,
            use_appearance: true,
            const_variance: false,
            association: AssociationMode::Learned,
            scoring: ScoringMode::Learned,
            gate: GateMode::Lstm,
            sigma0: SIGMA0,
            sigma_tilde: 0.0,
            heuristic: HeuristicConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 4 {
            return Err(Error::invalid(format!("d must be ≥ 4, got {}", self.d)));
        }
        if self.blocks < 1 {
            return Err(Error::invalid("blocks must be ≥ 1"));
        }
        if self.num_classes < 1 || self.appearance_dim < 1 || self.grid < 1 {
            return Err(Error::invalid("num_classes, appearance_dim and grid must be ≥ 1"));
        }
        if !(self.sigma0 > 0.0) || !(self.sigma_tilde >= 0.0) {
            return Err(Error::invalid("sigma0 must be > 0 and sigma_tilde ≥ 0"));
        }
        Ok(())
    }

    /// Detection input width: `C + 1` scores plus four box coordinates.
    pub fn det_in(&self) -> usize {
        self.num_classes + 5
    }

    /// Bottleneck width of gates and residual blocks.
    pub fn bottleneck(&self) -> usize {
        (self.d / 4).max(1)
    }
}
