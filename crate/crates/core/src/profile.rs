//! Cost accounting: parameter counts, analytic MACs per second of speech,
//! and measured real-time factor.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::compress::{prunable_counts, DensityKind};
use crate::corpus::Utterance;
use crate::encoder::{forward, EncoderConfig, EncoderWeights, FramePeriod, ForwardSpec};
use crate::error::{Error, Result};
use crate::numcore::{count_macs, Parameter, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    /// All entries of the encoder blocks (attention, FFN, layer norms).
    pub total: usize,
    /// Block entries not removed by a prune mask.
    pub nonzero: usize,
    /// Input projection plus the mask embedding.
    pub input_projection: usize,
    pub classifier: usize,
}

fn live_and_len<'a>(params: impl IntoIterator<Item = &'a Parameter>) -> (usize, usize) {
    params.into_iter().fold((0, 0), |(l, n), p| (l + p.live(), n + p.len()))
}

pub fn count_params(weights: &EncoderWeights) -> ParamCounts {
    let names = weights.named_params();
    let blocks = names.iter().filter(|(n, _)| n.starts_with("layers.")).map(|(_, p)| *p);
    let (nonzero, total) = live_and_len(blocks);
    let input = live_and_len([&weights.input.weight, &weights.input.bias, &weights.mask_embedding]).1;
    let classifier = live_and_len([&weights.classifier.weight, &weights.classifier.bias]).1;
    ParamCounts {
        total,
        nonzero,
        input_projection: input,
        classifier,
    }
}

/// Closed-form parameter count of `layers` unpruned blocks.
pub fn block_params_closed_form(layers: usize, d: usize, f: usize) -> usize {
    layers * (4 * d * d + 4 * d + 2 * d * f + d + f + 4 * d)
}

/// Structural geometry of one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub heads: usize,
    pub ffn_dim: usize,
}

/// Everything the MAC count depends on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub input_dim: usize,
    pub d_model: usize,
    pub head_dim: usize,
    pub clusters: usize,
    pub layers: Vec<LayerShape>,
}

impl ModelShape {
    pub fn from_config(config: &EncoderConfig) -> Self {
        Self {
            input_dim: config.input_dim,
            d_model: config.d_model,
            head_dim: config.head_dim(),
            clusters: config.clusters,
            layers: vec![
                LayerShape {
                    heads: config.heads,
                    ffn_dim: config.ffn_dim,
                };
                config.layers
            ],
        }
    }

    pub fn from_weights(weights: &EncoderWeights) -> Self {
        Self {
            input_dim: weights.input.fan_in(),
            d_model: weights.config.d_model,
            head_dim: weights.config.head_dim(),
            clusters: weights.classifier.fan_out(),
            layers: weights
                .layers
                .iter()
                .map(|l| LayerShape {
                    heads: l.live_heads(),
                    ffn_dim: l.ffn_dim(),
                })
                .collect(),
        }
    }

    /// The first `k` blocks only.
    pub fn prefix(&self, k: usize) -> Result<Self> {
        if k > self.layers.len() {
            return Err(Error::contract(format!("prefix of {k} layers from {}", self.layers.len())));
        }
        Ok(Self {
            layers: self.layers[..k].to_vec(),
            ..self.clone()
        })
    }
}

/// MACs of one forward pass over `frames` frames, by term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacBreakdown {
    pub frames: u64,
    pub input_projection: u64,
    /// Q, K, V and output projections.
    pub projections: u64,
    /// Attention scores and the weighted sum of values (the T^2 terms).
    pub attention: u64,
    pub ffn: u64,
    /// Zero unless the classifier was requested.
    pub classifier: u64,
    pub total: u64,
}

/// Analytic MACs for `frames` frames. Only matrix products are counted.
pub fn macs_for_frames(shape: &ModelShape, frames: usize, include_classifier: bool) -> MacBreakdown {
    let t = frames as u64;
    let d = shape.d_model as u64;
    let hd = shape.head_dim as u64;
    let input_projection = t * shape.input_dim as u64 * d;
    let (mut projections, mut attention, mut ffn) = (0, 0, 0);
    for l in &shape.layers {
        let width = l.heads as u64 * hd;
        projections += 4 * t * d * width;
        attention += 2 * t * t * width;
        ffn += 2 * t * d * l.ffn_dim as u64;
    }
    let classifier = if include_classifier { t * d * shape.clusters as u64 } else { 0 };
    MacBreakdown {
        frames: t,
        input_projection,
        projections,
        attention,
        ffn,
        classifier,
        total: input_projection + projections + attention + ffn + classifier,
    }
}

/// Analytic MACs for one second of speech, classifier excluded.
pub fn macs_per_second(shape: &ModelShape, period: FramePeriod) -> MacBreakdown {
    macs_for_frames(shape, period.frames_per_second(), false)
}

/// MACs per second counting only multiplies by weights that survive
/// pruning masks. Attention terms and the input projection are unchanged.
pub fn theoretical_macs_per_second(weights: &EncoderWeights, period: FramePeriod) -> u64 {
    let dense = macs_per_second(&ModelShape::from_weights(weights), period);
    let t = dense.frames;
    let live_weights: u64 = weights
        .layers
        .iter()
        .flat_map(|l| [&l.q, &l.k, &l.v, &l.o, &l.fc1, &l.fc2])
        .map(|lin| lin.weight.live() as u64)
        .sum();
    dense.input_projection + dense.attention + t * live_weights
}

/// Count MACs by running an inference forward pass through the counter.
pub fn instrumented_macs(weights: &EncoderWeights, frames: usize, depth: usize, logits: bool) -> Result<u64> {
    let features = Tensor::zeros(frames, weights.input.fan_in());
    let mut tape = Tape::new();
    let vars = weights.bind(&mut tape);
    let spec = ForwardSpec {
        frame_mask: None,
        depth,
        logits,
    };
    let (graph, macs) = count_macs(|| forward(&mut tape, weights, &vars, &features, spec, None));
    graph?;
    Ok(macs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RtfStats {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub samples: Vec<f64>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl RtfStats {
    pub fn from_samples(samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::contract("no timing samples"));
        }
        let mut sorted = samples.clone();
        sorted.sort_by(f64::total_cmp);
        let (q1, q3) = (quantile(&sorted, 0.25), quantile(&sorted, 0.75));
        Ok(Self {
            median: quantile(&sorted, 0.5),
            q1,
            q3,
            iqr: q3 - q1,
            samples,
        })
    }
}

/// Wall-clock inference time over speech duration for the first `depth`
/// blocks. One warm-up pass is discarded; each repeat encodes every
/// utterance once. Pruning masks are applied but not exploited.
pub fn measure_rtf(weights: &EncoderWeights, utts: &[Utterance], depth: usize, repeats: usize) -> Result<RtfStats> {
    if utts.is_empty() {
        return Err(Error::contract("real-time factor needs at least one utterance"));
    }
    if repeats < 3 {
        return Err(Error::contract(format!("need at least 3 timing repeats, got {repeats}")));
    }
    let frames: usize = utts.iter().map(Utterance::frames).sum();
    let speech = frames as f64 * weights.config.frame_period.seconds();
    let spec = ForwardSpec {
        frame_mask: None,
        depth,
        logits: false,
    };
    let pass = || -> Result<()> {
        for u in utts {
            let mut tape = Tape::new();
            let vars = weights.bind(&mut tape);
            forward(&mut tape, weights, &vars, &u.features, spec, None)?;
        }
        Ok(())
    };
    pass()?;
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        pass()?;
        samples.push(start.elapsed().as_secs_f64() / speech);
    }
    RtfStats::from_samples(samples)
}

/// Cost summary of one checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub params_total: usize,
    pub params_nonzero: usize,
    pub input_projection_params: usize,
    pub classifier_params: usize,
    /// Blocks run at inference (fewer than the model's for early exit).
    pub depth: usize,
    pub frame_period: FramePeriod,
    pub macs_per_sec: u64,
    pub macs_breakdown: MacBreakdown,
    /// Counting only multiplies by unpruned weights.
    pub macs_per_sec_theoretical: u64,
    pub rtf: Option<RtfStats>,
    pub densities: BTreeMap<String, f64>,
    pub heads_per_layer: Vec<usize>,
    pub ffn_dims_per_layer: Vec<usize>,
    pub config: EncoderConfig,
}

/// Report on the first `depth` blocks of `weights` (all of them if `None`).
pub fn compression_report(weights: &EncoderWeights, depth: Option<usize>, rtf: Option<RtfStats>) -> Result<CompressionReport> {
    let depth = depth.unwrap_or(weights.depth());
    let view = weights.truncated(depth)?;
    let counts = count_params(&view);
    let period = weights.config.frame_period;
    let shape = ModelShape::from_weights(&view);
    let macs = macs_per_second(&shape, period);
    let densities = DensityKind::ALL
        .iter()
        .map(|&k| {
            let (live, total) = prunable_counts(&view, k);
            (k.name().to_string(), if total == 0 { 1.0 } else { live as f64 / total as f64 })
        })
        .collect();
    Ok(CompressionReport {
        params_total: counts.total,
        params_nonzero: counts.nonzero,
        input_projection_params: counts.input_projection,
        classifier_params: counts.classifier,
        depth,
        frame_period: period,
        macs_per_sec: macs.total,
        macs_breakdown: macs,
        macs_per_sec_theoretical: theoretical_macs_per_second(&view, period),
        rtf,
        densities,
        heads_per_layer: shape.layers.iter().map(|l| l.heads).collect(),
        ffn_dims_per_layer: shape.layers.iter().map(|l| l.ffn_dim).collect(),
        config: weights.config.clone(),
    })
}
