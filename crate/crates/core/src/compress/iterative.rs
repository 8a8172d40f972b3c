use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::density::{density_of, DensityKind};
use super::ffn::prune_ffn;
use super::heads::{head_scores, prune_heads, HeadCriterion, HeadSelection};
use super::schedule::{bp_to_fraction, percent_to_bp, WeightPruneSchedule, FULL_DENSITY_BP};
use super::trigger::{TriggerConfig, TriggerState};
use super::weight::weight_prune_step;
use crate::corpus::Utterance;
use crate::encoder::{eval_masked_loss, masked_training, EncoderWeights};
use crate::error::{Error, Result};
use crate::numcore::AdamHyper;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Technique {
    Weights,
    Heads,
    Ffn,
}

impl Technique {
    pub fn name(self) -> &'static str {
        match self {
            Technique::Weights => "weights",
            Technique::Heads => "heads",
            Technique::Ffn => "ffn",
        }
    }

    pub fn density_kind(self) -> DensityKind {
        match self {
            Technique::Weights => DensityKind::Weights,
            Technique::Heads => DensityKind::Heads,
            Technique::Ffn => DensityKind::FfnDims,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightPruneConfig {
    pub schedule: WeightPruneSchedule,
    pub trigger: TriggerConfig,
    /// Retraining ends after this many steps even if the trigger never fires.
    pub max_retrain_steps: usize,
    /// Stop once this density (percent) is reached; defaults to the
    /// schedule's terminal floor.
    pub stop_density: Option<f64>,
}

impl Default for WeightPruneConfig {
    fn default() -> Self {
        Self {
            schedule: WeightPruneSchedule::default(),
            trigger: TriggerConfig {
                decay: 0.995,
                window: 250,
                tolerance: 0.001,
            },
            max_retrain_steps: 2000,
            stop_density: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadPruneConfig {
    pub criterion: HeadCriterion,
    /// Heads removed from every layer per stage (weight criterion).
    pub per_layer: usize,
    /// Heads removed across the model per stage (gradient criterion).
    pub global: usize,
    /// Number of stages; `None` runs until no further stage is possible.
    pub stages: Option<usize>,
    pub retrain_steps: usize,
    /// Leading fraction of the training set used for gradient scores.
    pub score_fraction: f64,
}

impl Default for HeadPruneConfig {
    fn default() -> Self {
        Self {
            criterion: HeadCriterion::Weight,
            per_layer: 1,
            global: 4,
            stages: None,
            retrain_steps: 2000,
            score_fraction: 0.25,
        }
    }
}

impl HeadPruneConfig {
    pub fn selection(&self) -> HeadSelection {
        match self.criterion {
            HeadCriterion::Weight => HeadSelection::PerLayerFixed(self.per_layer),
            HeadCriterion::Gradient => HeadSelection::Global(self.global),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FfnPruneConfig {
    /// Units removed per layer per stage; `None` means `ffn_dim / 24`.
    pub dims_per_stage: Option<usize>,
    pub stages: Option<usize>,
    pub retrain_steps: usize,
}

impl Default for FfnPruneConfig {
    fn default() -> Self {
        Self {
            dims_per_stage: None,
            stages: None,
            retrain_steps: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompressConfig {
    pub hyper: AdamHyper,
    pub seed: u64,
    /// Seed for the fixed dev-set masks.
    pub eval_seed: u64,
    /// Prune all stages at once and retrain a single time.
    pub one_shot: bool,
    pub weights: WeightPruneConfig,
    pub heads: HeadPruneConfig,
    pub ffn: FfnPruneConfig,
}

impl Default for CompressConfig {
    fn default() -> Self {
        Self {
            hyper: AdamHyper::compression(),
            seed: 0,
            eval_seed: 0,
            one_shot: false,
            weights: WeightPruneConfig::default(),
            heads: HeadPruneConfig::default(),
            ffn: FfnPruneConfig::default(),
        }
    }
}

impl CompressConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        self.weights.schedule.validate()?;
        self.weights.trigger.validate()?;
        if let Some(stop) = self.weights.stop_density {
            percent_to_bp(stop)?;
        }
        if !(self.heads.score_fraction > 0.0 && self.heads.score_fraction <= 1.0) {
            return Err(Error::config("head score fraction must lie in (0, 1]"));
        }
        if self.ffn.dims_per_stage == Some(0) {
            return Err(Error::config("FFN dims per stage must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Densities {
    pub weights: f64,
    pub heads: f64,
    pub ffn_dims: f64,
}

impl Densities {
    pub fn of(weights: &EncoderWeights) -> Self {
        Self {
            weights: density_of(weights, DensityKind::Weights),
            heads: density_of(weights, DensityKind::Heads),
            ffn_dims: density_of(weights, DensityKind::FfnDims),
        }
    }
}

/// State of the model after one prune-and-retrain stage. Stage 0 describes
/// the input model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub technique: Technique,
    /// Density in the technique's own unit.
    pub density: f64,
    /// Scheduled weight density, exact (weights technique only).
    pub target_density_bp: Option<u32>,
    pub densities: Densities,
    /// Units removed in this stage.
    pub pruned: usize,
    pub retrain_steps: usize,
    /// Whether the loss trigger ended retraining (weights technique only).
    pub triggered: Option<bool>,
    /// Mean training loss over the final retraining steps.
    pub train_loss: Option<f64>,
    pub dev_loss: f64,
}

struct Pruned {
    units: usize,
    target_bp: Option<u32>,
}

fn tail_mean(losses: &[f64]) -> Option<f64> {
    let n = losses.len().min(50);
    (n > 0).then(|| losses[losses.len() - n..].iter().sum::<f64>() / n as f64)
}

struct Runner<'a> {
    technique: Technique,
    config: &'a CompressConfig,
    train: &'a [Utterance],
    density_bp: u32,
    stop_bp: u32,
    stage: usize,
}

impl Runner<'_> {
    /// One prune step, or `None` when the technique cannot go further.
    fn prune(&mut self, weights: &mut EncoderWeights) -> Result<Option<Pruned>> {
        let c = self.config;
        let limit = match self.technique {
            Technique::Weights => None,
            Technique::Heads => c.heads.stages,
            Technique::Ffn => c.ffn.stages,
        };
        if limit.is_some_and(|n| self.stage >= n) {
            return Ok(None);
        }
        match self.technique {
            Technique::Weights => {
                if self.density_bp <= self.stop_bp {
                    return Ok(None);
                }
                let step = weight_prune_step(weights, &c.weights.schedule, self.density_bp)?;
                self.density_bp = step.to_bp;
                Ok(Some(Pruned {
                    units: step.pruned,
                    target_bp: Some(step.to_bp),
                }))
            }
            Technique::Heads => {
                let selection = c.heads.selection();
                let removable: usize = weights.layers.iter().map(|l| l.live_heads() - 1).sum();
                let possible = match selection {
                    HeadSelection::PerLayerFixed(m) => m > 0 && weights.layers.iter().all(|l| l.live_heads() > m),
                    HeadSelection::Global(n) => n > 0 && removable >= n,
                };
                if !possible {
                    return Ok(None);
                }
                let n_score = ((self.train.len() as f64 * c.heads.score_fraction).ceil() as usize).max(1);
                let scores = head_scores(weights, c.heads.criterion, &self.train[..n_score.min(self.train.len())], c.eval_seed)?;
                let removed = prune_heads(weights, &scores, selection)?;
                Ok(Some(Pruned {
                    units: removed.len(),
                    target_bp: None,
                }))
            }
            Technique::Ffn => {
                let n = c.ffn.dims_per_stage.unwrap_or((weights.config.ffn_dim / 24).max(1));
                if weights.layers.is_empty() || weights.layers.iter().any(|l| l.ffn_dim() <= n) {
                    return Ok(None);
                }
                let removed = prune_ffn(weights, n)?;
                Ok(Some(Pruned {
                    units: removed.iter().map(Vec::len).sum(),
                    target_bp: None,
                }))
            }
        }
    }

    fn retrain(&self, weights: &mut EncoderWeights, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, Option<bool>)> {
        let c = self.config;
        match self.technique {
            Technique::Weights => {
                let mut trigger = TriggerState::new(c.weights.trigger);
                let mut fired = false;
                let losses = masked_training(weights, self.train, &c.hyper, c.weights.max_retrain_steps, rng, |_, loss, _| {
                    fired = trigger.update(loss);
                    Ok(!fired)
                })?;
                Ok((losses, Some(fired)))
            }
            Technique::Heads => Ok((
                masked_training(weights, self.train, &c.hyper, c.heads.retrain_steps, rng, |_, _, _| Ok(true))?,
                None,
            )),
            Technique::Ffn => Ok((
                masked_training(weights, self.train, &c.hyper, c.ffn.retrain_steps, rng, |_, _, _| Ok(true))?,
                None,
            )),
        }
    }
}

/// Alternate pruning and retraining until the technique's schedule ends.
///
/// `on_stage` sees every report (stage 0 first) together with the model at
/// that point. On a numeric failure `weights` is restored to the last
/// completed stage and the error is returned.
pub fn iterative_compress(
    weights: &mut EncoderWeights,
    technique: Technique,
    config: &CompressConfig,
    train: &[Utterance],
    dev: &[Utterance],
    mut on_stage: impl FnMut(&StageReport, &EncoderWeights) -> Result<()>,
) -> Result<Vec<StageReport>> {
    config.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::contract("compression needs training and dev utterances"));
    }
    let schedule_stop = config.weights.schedule.stop_bp()?;
    let stop_bp = match config.weights.stop_density {
        Some(p) => percent_to_bp(p)?.max(schedule_stop),
        None => schedule_stop,
    };
    let kind = technique.density_kind();
    if technique == Technique::Weights {
        let d = density_of(weights, DensityKind::Weights);
        if d != 1.0 {
            return Err(Error::contract(format!(
                "weight pruning must start from a dense model, found density {d}"
            )));
        }
    }
    let mut runner = Runner {
        technique,
        config,
        train,
        density_bp: FULL_DENSITY_BP,
        stop_bp,
        stage: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let report = |stage, weights: &EncoderWeights, pruned: Option<&Pruned>, steps, triggered, train_loss| {
        Ok::<_, Error>(StageReport {
            stage,
            technique,
            density: density_of(weights, kind),
            target_density_bp: pruned.and_then(|p| p.target_bp).or((technique == Technique::Weights && stage == 0).then_some(FULL_DENSITY_BP)),
            densities: Densities::of(weights),
            pruned: pruned.map_or(0, |p| p.units),
            retrain_steps: steps,
            triggered,
            train_loss,
            dev_loss: eval_masked_loss(weights, dev, config.eval_seed)?,
        })
    };
    let first = report(0, weights, None, 0, None, None)?;
    on_stage(&first, weights)?;
    let mut reports = vec![first];
    loop {
        let snapshot = weights.clone();
        let mut pruned: Option<Pruned> = None;
        while let Some(p) = runner.prune(weights)? {
            let merged = match pruned.take() {
                None => p,
                Some(prev) => Pruned {
                    units: prev.units + p.units,
                    target_bp: p.target_bp,
                },
            };
            pruned = Some(merged);
            if !config.one_shot {
                break;
            }
            runner.stage += 1;
        }
        let Some(pruned) = pruned else { break };
        let (losses, triggered) = match runner.retrain(weights, &mut rng) {
            Ok(r) => r,
            Err(e @ Error::Numeric { .. }) => {
                *weights = snapshot;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if !config.one_shot {
            runner.stage += 1;
        }
        let r = report(reports.len(), weights, Some(&pruned), losses.len(), triggered, tail_mean(&losses))?;
        on_stage(&r, weights)?;
        reports.push(r);
        if config.one_shot {
            break;
        }
    }
    Ok(reports)
}

/// Closed-form weight density trace (fractions) for a schedule.
pub fn weight_density_trace(schedule: &WeightPruneSchedule) -> Result<Vec<f64>> {
    Ok(schedule.trace_bp()?.into_iter().map(bp_to_fraction).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{fit_codebook, generate, label_corpus, GeneratorSpec};
    use crate::encoder::EncoderConfig;

    fn data() -> Vec<Utterance> {
        let spec = GeneratorSpec {
            dim: 6,
            min_len: 8,
            max_len: 12,
            ..GeneratorSpec::default()
        };
        let mut utts = generate(&spec, 10).unwrap();
        let fit = fit_codebook(&utts, 4, 5, 0).unwrap();
        label_corpus(&fit.codebook, &mut utts).unwrap();
        utts
    }

    fn model() -> EncoderWeights {
        let cfg = EncoderConfig {
            layers: 2,
            d_model: 8,
            heads: 4,
            ffn_dim: 48,
            input_dim: 6,
            clusters: 4,
            ..EncoderConfig::default()
        };
        EncoderWeights::init(&cfg, 0).unwrap()
    }

    fn quick() -> CompressConfig {
        CompressConfig {
            weights: WeightPruneConfig {
                trigger: TriggerConfig {
                    decay: 0.9,
                    window: 3,
                    tolerance: 0.05,
                },
                max_retrain_steps: 6,
                ..WeightPruneConfig::default()
            },
            heads: HeadPruneConfig {
                retrain_steps: 2,
                ..HeadPruneConfig::default()
            },
            ffn: FfnPruneConfig {
                retrain_steps: 2,
                ..FfnPruneConfig::default()
            },
            ..CompressConfig::default()
        }
    }

    #[test]
    fn weight_run_follows_the_schedule() {
        let d = data();
        let mut w = model();
        let mut config = quick();
        config.weights.stop_density = Some(45.0);
        let reports = iterative_compress(&mut w, Technique::Weights, &config, &d[..8], &d[8..], |_, _| Ok(())).unwrap();
        let targets: Vec<u32> = reports.iter().map(|r| r.target_density_bp.unwrap()).collect();
        assert_eq!(targets, vec![10_000, 8_000, 7_000, 6_000, 5_000, 4_500]);
        assert!(reports.iter().all(|r| r.retrain_steps <= 6));
    }

    #[test]
    fn gradient_head_run_removes_four_per_stage() {
        let d = data();
        let mut w = model();
        let mut config = quick();
        config.heads.criterion = HeadCriterion::Gradient;
        let reports = iterative_compress(&mut w, Technique::Heads, &config, &d[..8], &d[8..], |_, _| Ok(())).unwrap();
        let trace: Vec<f64> = reports.iter().map(|r| r.density).collect();
        assert_eq!(trace, vec![1.0, 0.5]);
        assert!(w.layers.iter().all(|l| l.live_heads() >= 1));
    }

    #[test]
    fn ffn_run_uses_default_step() {
        let d = data();
        let mut w = model();
        let mut config = quick();
        config.ffn.stages = Some(2);
        let reports = iterative_compress(&mut w, Technique::Ffn, &config, &d[..8], &d[8..], |_, _| Ok(())).unwrap();
        assert_eq!(reports.len(), 3);
        assert_eq!(w.layers[0].ffn_dim(), 44);
    }

    #[test]
    fn one_shot_is_off_by_default_and_prunes_everything_at_once() {
        assert!(!CompressConfig::default().one_shot);
        let d = data();
        let mut w = model();
        let mut config = quick();
        config.one_shot = true;
        config.weights.stop_density = Some(50.0);
        let reports = iterative_compress(&mut w, Technique::Weights, &config, &d[..8], &d[8..], |_, _| Ok(())).unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(reports[1].target_density_bp, Some(5_000));
    }
}
