//! Iterative pruning: global magnitude weight pruning driven by a density
//! schedule and a loss trigger, attention-head pruning, and FFN hidden-unit
//! pruning.

mod density;
mod ffn;
mod heads;
mod iterative;
mod schedule;
mod trigger;
mod weight;

pub use density::{density_of, prunable_counts, DensityKind};
pub use ffn::{ffn_unit_scores, mask_ffn_unit, prune_ffn, remove_ffn_units};
pub use heads::{
    head_scores, head_scores_gradient, head_scores_gradient_raw, head_scores_weight, mask_head, normalize_per_layer,
    prune_heads, remove_heads, select_heads, HeadCriterion, HeadScore, HeadSelection,
};
pub use iterative::{
    iterative_compress, weight_density_trace, CompressConfig, Densities, FfnPruneConfig, HeadPruneConfig,
    StageReport, Technique, WeightPruneConfig,
};
pub use schedule::{bp_to_fraction, percent_to_bp, ScheduleStage, WeightPruneSchedule, FULL_DENSITY_BP};
pub use trigger::{TriggerConfig, TriggerState};
pub use weight::{prune_to_density, target_live, weight_prune_step, WeightPruneStep};
