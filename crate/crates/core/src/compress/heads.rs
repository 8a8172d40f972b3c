use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::encoder::{cluster_labels, eval_masks, forward, EncoderWeights, ForwardSpec, LayerWeights};
use crate::error::{Error, Result};
use crate::numcore::{gemm, Layout, Tape, Tensor};

/// Importance of one live head. `slot` is its storage position in the
/// layer, `head` its original id.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadScore {
    pub layer: usize,
    pub slot: usize,
    pub head: usize,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadCriterion {
    /// L1 norm of the head's weights.
    Weight,
    /// Accumulated |V_k^T dL/dV_k| over data, normalized per layer.
    Gradient,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadSelection {
    /// Remove this many lowest-scoring heads from every layer.
    PerLayerFixed(usize),
    /// Remove this many lowest-scoring heads across all layers.
    Global(usize),
}

fn head_cols(slot: usize, head_dim: usize) -> std::ops::Range<usize> {
    slot * head_dim..(slot + 1) * head_dim
}

fn col_abs_sum(t: &Tensor, cols: std::ops::Range<usize>) -> f64 {
    (0..t.rows()).map(|r| t.row(r)[cols.clone()].iter().map(|v| v.abs()).sum::<f64>()).sum()
}

fn row_abs_sum(t: &Tensor, rows: std::ops::Range<usize>) -> f64 {
    rows.map(|r| t.row(r).iter().map(|v| v.abs()).sum::<f64>()).sum()
}

fn weight_score(layer: &LayerWeights, slot: usize, head_dim: usize) -> f64 {
    let cols = head_cols(slot, head_dim);
    let qkv: f64 = [&layer.q, &layer.k, &layer.v]
        .iter()
        .map(|lin| col_abs_sum(&lin.weight.value, cols.clone()) + col_abs_sum(&lin.bias.value, cols.clone()))
        .sum();
    qkv + row_abs_sum(&layer.o.weight.value, cols)
}

/// L1 norm of every parameter a head owns: its Q/K/V projection columns
/// and biases, and its rows of the output projection.
pub fn head_scores_weight(weights: &EncoderWeights) -> Vec<HeadScore> {
    let hd = weights.config.head_dim();
    let mut out = Vec::new();
    for (l, layer) in weights.layers.iter().enumerate() {
        for (slot, &head) in layer.head_ids.iter().enumerate() {
            out.push(HeadScore {
                layer: l,
                slot,
                head,
                score: weight_score(layer, slot, hd),
            });
        }
    }
    out
}

/// `|| a^T b ||_1` for `a`, `b` of equal shape.
fn transpose_product_l1(a: &Tensor, b: &Tensor) -> f64 {
    let (t, n) = (a.rows(), a.cols());
    let mut out = vec![0.0; n * n];
    gemm(n, t, n, a.data(), Layout::Transposed, b.data(), Layout::Normal, &mut out);
    out.iter().map(|v| v.abs()).sum()
}

/// Raw gradient scores: for each utterance (inference mode, seeded mask),
/// the L1 norm of `V_k^T dL/dV_k` where `V_k` is head k's
/// attention-weighted value output, summed over utterances.
pub fn head_scores_gradient_raw(weights: &EncoderWeights, data: &[Utterance], seed: u64) -> Result<Vec<HeadScore>> {
    if data.is_empty() {
        return Err(Error::contract("gradient head scores need at least one utterance"));
    }
    let mut scores = head_scores_weight(weights);
    scores.iter_mut().for_each(|s| s.score = 0.0);
    let masks = eval_masks(weights, data, seed);
    for (u, mask) in data.iter().zip(&masks) {
        let labels = cluster_labels(u)?;
        let mut tape = Tape::new();
        let vars = weights.bind(&mut tape);
        let graph = forward(&mut tape, weights, &vars, &u.features, ForwardSpec::masked(weights, mask), None)?;
        let loss = tape.masked_cross_entropy(graph.logits.expect("requested"), labels, mask)?;
        let grads = tape.backward(loss)?;
        let mut idx = 0;
        for heads in &graph.head_outputs {
            for &vk in heads {
                if let Some(g) = grads.get(vk) {
                    scores[idx].score += transpose_product_l1(tape.value(vk), g);
                }
                idx += 1;
            }
        }
    }
    Ok(scores)
}

/// Scale each layer's scores to unit L2 norm. Layers whose scores are all
/// zero are left at zero.
pub fn normalize_per_layer(scores: &mut [HeadScore]) {
    let layers = scores.iter().map(|s| s.layer + 1).max().unwrap_or(0);
    for l in 0..layers {
        let norm = scores.iter().filter(|s| s.layer == l).map(|s| s.score * s.score).sum::<f64>().sqrt();
        if norm > 0.0 {
            scores.iter_mut().filter(|s| s.layer == l).for_each(|s| s.score /= norm);
        }
    }
}

/// Per-layer L2-normalized gradient scores.
pub fn head_scores_gradient(weights: &EncoderWeights, data: &[Utterance], seed: u64) -> Result<Vec<HeadScore>> {
    let mut scores = head_scores_gradient_raw(weights, data, seed)?;
    normalize_per_layer(&mut scores);
    Ok(scores)
}

pub fn head_scores(
    weights: &EncoderWeights,
    criterion: HeadCriterion,
    data: &[Utterance],
    seed: u64,
) -> Result<Vec<HeadScore>> {
    match criterion {
        HeadCriterion::Weight => Ok(head_scores_weight(weights)),
        HeadCriterion::Gradient => head_scores_gradient(weights, data, seed),
    }
}

fn ascending(a: &HeadScore, b: &HeadScore) -> std::cmp::Ordering {
    a.score.total_cmp(&b.score).then(a.layer.cmp(&b.layer)).then(a.head.cmp(&b.head))
}

/// Pick the heads to remove. No layer is ever left without a head.
pub fn select_heads(weights: &EncoderWeights, scores: &[HeadScore], mode: HeadSelection) -> Result<Vec<HeadScore>> {
    for s in scores {
        let ok = weights.layers.get(s.layer).is_some_and(|l| l.head_ids.get(s.slot) == Some(&s.head));
        if !ok || !s.score.is_finite() {
            return Err(Error::contract(format!(
                "score for layer {} slot {} does not match a live head",
                s.layer, s.slot
            )));
        }
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(ascending);
    let mut live: Vec<usize> = weights.layers.iter().map(LayerWeights::live_heads).collect();
    let mut chosen = Vec::new();
    match mode {
        HeadSelection::PerLayerFixed(m) => {
            for (l, &n) in live.iter().enumerate() {
                if m >= n && m > 0 {
                    return Err(Error::contract(format!(
                        "removing {m} heads would empty layer {l}, which has {n}"
                    )));
                }
                chosen.extend(sorted.iter().filter(|s| s.layer == l).take(m));
            }
        }
        HeadSelection::Global(count) => {
            for s in &sorted {
                if chosen.len() == count {
                    break;
                }
                if live[s.layer] > 1 {
                    live[s.layer] -= 1;
                    chosen.push(*s);
                }
            }
            if chosen.len() < count {
                return Err(Error::contract(format!(
                    "only {} heads can be removed without emptying a layer, {count} requested",
                    chosen.len()
                )));
            }
        }
    }
    chosen.sort_by_key(|s| (s.layer, s.slot));
    Ok(chosen)
}

/// Physically remove storage slots `slots` from `layer`.
pub fn remove_heads(weights: &mut EncoderWeights, layer: usize, slots: &[usize]) -> Result<()> {
    let hd = weights.config.head_dim();
    let l = weights
        .layers
        .get_mut(layer)
        .ok_or_else(|| Error::contract(format!("no layer {layer}")))?;
    if slots.iter().any(|&s| s >= l.live_heads()) {
        return Err(Error::contract(format!("head slot out of range in layer {layer}")));
    }
    let keep_slots: Vec<usize> = (0..l.live_heads()).filter(|s| !slots.contains(s)).collect();
    if keep_slots.is_empty() {
        return Err(Error::contract(format!("refusing to remove every head of layer {layer}")));
    }
    let cols: Vec<usize> = keep_slots.iter().flat_map(|&s| head_cols(s, hd)).collect();
    for lin in [&mut l.q, &mut l.k, &mut l.v] {
        lin.keep_outputs(&cols);
    }
    l.o.keep_inputs(&cols);
    l.head_ids = keep_slots.iter().map(|&s| l.head_ids[s]).collect();
    Ok(())
}

/// Select heads by `mode` and remove them. Returns the removed heads.
pub fn prune_heads(weights: &mut EncoderWeights, scores: &[HeadScore], mode: HeadSelection) -> Result<Vec<HeadScore>> {
    let chosen = select_heads(weights, scores, mode)?;
    for l in 0..weights.depth() {
        let slots: Vec<usize> = chosen.iter().filter(|s| s.layer == l).map(|s| s.slot).collect();
        if !slots.is_empty() {
            remove_heads(weights, l, &slots)?;
        }
    }
    Ok(chosen)
}

/// Zero-mask everything head `slot` of `layer` owns, leaving shapes intact.
pub fn mask_head(weights: &mut EncoderWeights, layer: usize, slot: usize) -> Result<()> {
    let hd = weights.config.head_dim();
    let l = weights
        .layers
        .get_mut(layer)
        .ok_or_else(|| Error::contract(format!("no layer {layer}")))?;
    if slot >= l.live_heads() {
        return Err(Error::contract(format!("head slot {slot} out of range")));
    }
    for lin in [&mut l.q, &mut l.k, &mut l.v] {
        let width = lin.fan_out();
        for c in head_cols(slot, hd) {
            for r in 0..lin.fan_in() {
                lin.weight.prune_entry(r * width + c);
            }
            lin.bias.prune_entry(c);
        }
    }
    let width = l.o.fan_out();
    for r in head_cols(slot, hd) {
        for c in 0..width {
            l.o.weight.prune_entry(r * width + c);
        }
    }
    Ok(())
}
