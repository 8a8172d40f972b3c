use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::{forward, ForwardSpec};
use super::masking::sample_nonempty_mask;
use super::weights::{EncoderVars, EncoderWeights};
use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::numcore::{adam_step, AdamHyper, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub hyper: AdamHyper,
    pub seed: u64,
    /// Stop after this many optimizer steps even if epochs remain.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            hyper: AdamHyper::default(),
            seed: 0,
            max_steps: None,
        }
    }
}

pub(crate) fn cluster_labels(u: &Utterance) -> Result<&[usize]> {
    u.cluster_labels
        .as_deref()
        .ok_or_else(|| Error::contract("utterance has no cluster labels; run k-means assignment first"))
}

/// Record the masked-prediction loss of `u` under `mask` on `tape`.
pub(crate) fn masked_loss_graph(
    tape: &mut Tape,
    weights: &EncoderWeights,
    vars: &EncoderVars,
    u: &Utterance,
    mask: &[bool],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let labels = cluster_labels(u)?;
    let graph = forward(tape, weights, vars, &u.features, ForwardSpec::masked(weights, mask), rng)?;
    tape.masked_cross_entropy(graph.logits.expect("requested"), labels, mask)
}

/// Draws batches from successive shuffled passes over `0..n`; a batch may
/// straddle two passes.
pub(crate) struct EpochSampler {
    order: Vec<usize>,
    cursor: usize,
    n: usize,
}

impl EpochSampler {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            order: Vec::new(),
            cursor: 0,
            n,
        }
    }

    pub(crate) fn next_batch(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size && self.n > 0 {
            if self.cursor == self.order.len() {
                self.order = (0..self.n).collect();
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }
}

/// One optimizer step over `batch`: per-utterance losses are averaged.
pub(crate) fn train_batch<F>(weights: &mut EncoderWeights, batch: &[&Utterance], hyper: &AdamHyper, mut loss_of: F) -> Result<f64>
where
    F: FnMut(&mut Tape, &EncoderWeights, &EncoderVars, &Utterance) -> Result<Var>,
{
    weights.zero_grads();
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for u in batch {
        let mut tape = Tape::new();
        let vars = weights.bind(&mut tape);
        let loss = loss_of(&mut tape, weights, &vars, u)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numeric {
                op: "loss".into(),
                detail: format!("loss is {value}"),
            });
        }
        let grads = tape.backward(loss)?;
        weights.accumulate_grads(&vars, &grads, scale);
        total += value;
    }
    adam_step(weights.params_mut(), hyper)?;
    weights.check_finite()?;
    Ok(total * scale)
}

/// Masked-prediction training steps drawn from shuffled epochs of `data`.
/// Calls `on_step` with the 0-based step index and batch loss; stops after
/// `steps` steps. Returns the per-step losses.
pub(crate) fn masked_training(
    weights: &mut EncoderWeights,
    data: &[Utterance],
    hyper: &AdamHyper,
    steps: usize,
    rng: &mut ChaCha8Rng,
    mut on_step: impl FnMut(usize, f64, &EncoderWeights) -> Result<bool>,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::contract("no training utterances"));
    }
    let mut losses = Vec::with_capacity(steps);
    let mut sampler = EpochSampler::new(data.len());
    let masking = weights.config.masking;
    while losses.len() < steps {
        let batch: Vec<&Utterance> = sampler.next_batch(hyper.batch_size, rng).into_iter().map(|i| &data[i]).collect();
        let loss = train_batch(weights, &batch, hyper, |tape, w, vars, u| {
            let mask = sample_nonempty_mask(u.frames(), &masking, rng);
            masked_loss_graph(tape, w, vars, u, &mask, Some(&mut *rng))
        })?;
        losses.push(loss);
        if !on_step(losses.len() - 1, loss, weights)? {
            break;
        }
    }
    Ok(losses)
}

/// Seeded frame masks for evaluation: utterance `i` always gets the same mask.
pub fn eval_masks(weights: &EncoderWeights, utts: &[Utterance], seed: u64) -> Vec<Vec<bool>> {
    utts.iter()
        .enumerate()
        .map(|(i, u)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            sample_nonempty_mask(u.frames(), &weights.config.masking, &mut rng)
        })
        .collect()
}

/// Mean masked-prediction loss in inference mode with seeded masks.
pub fn eval_masked_loss(weights: &EncoderWeights, utts: &[Utterance], seed: u64) -> Result<f64> {
    if utts.is_empty() {
        return Err(Error::contract("no evaluation utterances"));
    }
    let masks = eval_masks(weights, utts, seed);
    let mut total = 0.0;
    for (u, mask) in utts.iter().zip(&masks) {
        let mut tape = Tape::new();
        let vars = weights.bind(&mut tape);
        let loss = masked_loss_graph(&mut tape, weights, &vars, u, mask, None)?;
        total += tape.value(loss).item();
    }
    Ok(total / utts.len() as f64)
}

/// Masked-prediction pre-training with Adam.
///
/// `on_epoch` runs after every epoch with the epoch index and its losses.
/// If training diverges, `weights` is rolled back to the end of the last
/// completed epoch and the numeric error is returned.
pub fn pretrain(
    weights: &mut EncoderWeights,
    train: &[Utterance],
    config: &PretrainConfig,
    mut on_epoch: impl FnMut(usize, &EncoderWeights, &[f64]) -> Result<()>,
) -> Result<Vec<f64>> {
    config.hyper.validate()?;
    if train.is_empty() {
        return Err(Error::contract("pre-training needs at least one utterance"));
    }
    for u in train {
        cluster_labels(u)?;
    }
    let steps_per_epoch = train.len().div_ceil(config.hyper.batch_size);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut curve = Vec::new();
    for epoch in 0..config.epochs {
        let mut steps = steps_per_epoch;
        if let Some(max) = config.max_steps {
            steps = steps.min(max.saturating_sub(curve.len()));
        }
        if steps == 0 {
            break;
        }
        let snapshot = weights.clone();
        match masked_training(weights, train, &config.hyper, steps, &mut rng, |_, _, _| Ok(true)) {
            Ok(losses) => {
                on_epoch(epoch, weights, &losses)?;
                curve.extend(losses);
            }
            Err(e @ Error::Numeric { .. }) => {
                *weights = snapshot;
                return Err(e);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(curve)
}
