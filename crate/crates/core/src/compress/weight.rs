use serde::{Deserialize, Serialize};

use super::density::{prunable_counts, DensityKind};
use super::schedule::{WeightPruneSchedule, FULL_DENSITY_BP};
use crate::encoder::EncoderWeights;
use crate::error::{Error, Result};

/// Outcome of one magnitude-pruning stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightPruneStep {
    pub from_bp: u32,
    pub to_bp: u32,
    /// Entries masked by this step.
    pub pruned: usize,
    /// Largest magnitude among the entries masked by this step.
    pub threshold: f64,
}

/// Entries that remain at density `bp`.
pub fn target_live(total: usize, bp: u32) -> usize {
    // Integer rounding of total * bp / 10000, half up.
    ((total as u128 * bp as u128 * 2 + FULL_DENSITY_BP as u128) / (2 * FULL_DENSITY_BP as u128)) as usize
}

/// Mask the smallest-magnitude live entries of all encoder linear layers
/// until exactly `target_live(total, bp)` remain.
///
/// Ranking is global across layers; ties break by (tensor, flat index).
pub fn prune_to_density(weights: &mut EncoderWeights, bp: u32) -> Result<(usize, f64)> {
    let (live, total) = prunable_counts(weights, DensityKind::Weights);
    let keep = target_live(total, bp);
    if keep > live {
        return Err(Error::contract(format!(
            "cannot reach {keep} live weights from {live}: pruned weights never return"
        )));
    }
    let mut candidates: Vec<(f64, usize, usize)> = Vec::with_capacity(live);
    let mut tensor = 0;
    for layer in &weights.layers {
        for p in layer.linear_params() {
            for (i, v) in p.value.data().iter().enumerate() {
                if p.is_live(i) {
                    candidates.push((v.abs(), tensor, i));
                }
            }
            tensor += 1;
        }
    }
    let n_prune = live - keep;
    if n_prune == 0 {
        return Ok((0, 0.0));
    }
    let by_rank = |a: &(f64, usize, usize), b: &(f64, usize, usize)| {
        a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    };
    candidates.select_nth_unstable_by(n_prune - 1, by_rank);
    let doomed = &mut candidates[..n_prune];
    doomed.sort_unstable_by(|a, b| a.1.cmp(&b.1).then(a.2.cmp(&b.2)));
    let threshold = doomed.iter().map(|c| c.0).fold(0.0, f64::max);
    let mut params: Vec<_> = weights.layers.iter_mut().flat_map(|l| l.linear_params_mut()).collect();
    for &(_, t, i) in doomed.iter() {
        params[t].prune_entry(i);
    }
    Ok((n_prune, threshold))
}

/// Advance one schedule stage from `current_bp`.
pub fn weight_prune_step(weights: &mut EncoderWeights, schedule: &WeightPruneSchedule, current_bp: u32) -> Result<WeightPruneStep> {
    let Some(to_bp) = schedule.next_target(current_bp)? else {
        return Err(Error::contract(format!(
            "already at the stop density ({}%)",
            current_bp as f64 / 100.0
        )));
    };
    let (pruned, threshold) = prune_to_density(weights, to_bp)?;
    Ok(WeightPruneStep {
        from_bp: current_bp,
        to_bp,
        pruned,
        threshold,
    })
}
