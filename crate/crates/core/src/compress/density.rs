use serde::{Deserialize, Serialize};

use crate::encoder::EncoderWeights;

/// The unit a density is measured in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityKind {
    Weights,
    Heads,
    FfnDims,
}

impl DensityKind {
    pub const ALL: [DensityKind; 3] = [DensityKind::Weights, DensityKind::Heads, DensityKind::FfnDims];

    pub fn name(self) -> &'static str {
        match self {
            DensityKind::Weights => "weights",
            DensityKind::Heads => "heads",
            DensityKind::FfnDims => "ffn_dims",
        }
    }
}

/// `(remaining, total)` prunable units of `kind`.
///
/// Weights count entries of the linear-layer weights and biases inside the
/// encoder blocks as currently shaped; heads and FFN dims are measured
/// against the unpruned geometry in the config.
pub fn prunable_counts(weights: &EncoderWeights, kind: DensityKind) -> (usize, usize) {
    let layers = weights.layers.iter();
    match kind {
        DensityKind::Weights => layers
            .flat_map(|l| l.linear_params())
            .fold((0, 0), |(live, total), p| (live + p.live(), total + p.len())),
        DensityKind::Heads => (
            layers.map(|l| l.live_heads()).sum(),
            weights.depth() * weights.config.heads,
        ),
        DensityKind::FfnDims => (
            layers.map(|l| l.ffn_dim()).sum(),
            weights.depth() * weights.config.ffn_dim,
        ),
    }
}

/// Remaining over total prunable units; 1.0 is unpruned. A model with no
/// blocks has nothing to prune and reports 1.0.
pub fn density_of(weights: &EncoderWeights, kind: DensityKind) -> f64 {
    match prunable_counts(weights, kind) {
        (_, 0) => 1.0,
        (live, total) => live as f64 / total as f64,
    }
}
