//! Knowledge distillation into shallower students, and the first-k-layers
//! baseline it is compared against.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::encoder::{encode, forward, sample_nonempty_mask, train_batch, EncoderWeights, EpochSampler, ForwardSpec};
use crate::error::{Error, Result};
use crate::numcore::{AdamHyper, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentInit {
    Random,
    TeacherFirstK,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub student_layers: usize,
    pub init: StudentInit,
    pub temperature: f64,
    /// Feed the same sampled frame mask to teacher and student. When false
    /// both see clean input.
    pub mask_student_input: bool,
    pub steps: usize,
    pub hyper: AdamHyper,
    pub student_dropout: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            student_layers: 2,
            init: StudentInit::TeacherFirstK,
            temperature: 1.0,
            mask_student_input: false,
            steps: 2000,
            hyper: AdamHyper {
                batch_size: 4,
                ..AdamHyper::default()
            },
            student_dropout: 0.0,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(format!("temperature {} must be positive", self.temperature)));
        }
        if self.student_layers == 0 {
            return Err(Error::config("student needs at least one layer"));
        }
        if !(0.0..1.0).contains(&self.student_dropout) {
            return Err(Error::config("student dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// A student with the teacher's width and `cfg.student_layers` blocks.
pub fn build_student(teacher: &EncoderWeights, cfg: &DistillConfig) -> Result<EncoderWeights> {
    cfg.validate()?;
    let mut student = match cfg.init {
        StudentInit::TeacherFirstK => {
            if cfg.student_layers > teacher.depth() {
                return Err(Error::contract(format!(
                    "cannot initialize {} student layers from a {}-layer teacher",
                    cfg.student_layers,
                    teacher.depth()
                )));
            }
            teacher.truncated(cfg.student_layers)?
        }
        StudentInit::Random => {
            let mut config = teacher.config.clone();
            config.layers = cfg.student_layers;
            EncoderWeights::init(&config, cfg.seed)?
        }
    };
    student.config.dropout = cfg.student_dropout;
    for p in student.params_mut() {
        p.adam = crate::numcore::AdamState::for_shape(&p.value);
        p.zero_grad();
    }
    Ok(student)
}

/// Mean over frames of `tau^2 * KL(softmax(t/tau) || softmax(s/tau))`.
pub fn kd_loss(teacher_logits: &Tensor, student_logits: &Tensor, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.leaf(student_logits.clone());
    let loss = tape.kl_div(teacher_logits, s, tau)?;
    Ok(tape.value(loss).item())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillOutcome {
    pub student: EncoderWeights,
    /// Per-step batch loss.
    pub losses: Vec<f64>,
}

/// Train a student on the teacher's output distribution. The teacher runs
/// in inference mode and is never modified.
pub fn distill(
    teacher: &EncoderWeights,
    cfg: &DistillConfig,
    train: &[Utterance],
    mut on_step: impl FnMut(usize, f64, &EncoderWeights) -> Result<()>,
) -> Result<DistillOutcome> {
    let mut student = build_student(teacher, cfg)?;
    if train.is_empty() {
        return Err(Error::contract("distillation needs training utterances"));
    }
    let clean: Vec<Tensor> = if cfg.mask_student_input {
        Vec::new()
    } else {
        train
            .iter()
            .map(|u| encode(&u.features, teacher, None).map(|(_, logits)| logits))
            .collect::<Result<_>>()?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sampler = EpochSampler::new(train.len());
    let masking = teacher.config.masking;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = sampler.next_batch(cfg.hyper.batch_size, &mut rng);
        let mut jobs = Vec::with_capacity(batch.len());
        for &i in &batch {
            let u = &train[i];
            if cfg.mask_student_input {
                let mask = sample_nonempty_mask(u.frames(), &masking, &mut rng);
                let (_, logits) = encode(&u.features, teacher, Some(&mask))?;
                jobs.push((i, Some(mask), logits));
            } else {
                jobs.push((i, None, clean[i].clone()));
            }
        }
        let refs: Vec<&Utterance> = batch.iter().map(|&i| &train[i]).collect();
        let mut next = jobs.iter();
        let tau = cfg.temperature;
        let loss = train_batch(&mut student, &refs, &cfg.hyper, |tape, w, vars, u| {
            let (_, mask, teacher_logits) = next.next().expect("one job per utterance");
            let spec = ForwardSpec {
                frame_mask: mask.as_deref(),
                ..ForwardSpec::full(w)
            };
            let graph = forward(tape, w, vars, &u.features, spec, Some(&mut rng))?;
            tape.kl_div(teacher_logits, graph.logits.expect("requested"), tau)
        })?;
        losses.push(loss);
        on_step(step, loss, &student)?;
    }
    Ok(DistillOutcome { student, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate, GeneratorSpec};
    use crate::encoder::{encode_prefix, EncoderConfig};

    fn teacher() -> EncoderWeights {
        let cfg = EncoderConfig {
            layers: 3,
            d_model: 8,
            heads: 2,
            ffn_dim: 16,
            input_dim: 5,
            clusters: 6,
            ..EncoderConfig::default()
        };
        EncoderWeights::init(&cfg, 21).unwrap()
    }

    fn corpus() -> Vec<Utterance> {
        let spec = GeneratorSpec {
            dim: 5,
            min_len: 6,
            max_len: 10,
            ..GeneratorSpec::default()
        };
        generate(&spec, 6).unwrap()
    }

    #[test]
    fn kl_closed_form() {
        // p = (1/2, 1/2), q = (3/4, 1/4).
        let t = Tensor::from_rows(1, 2, vec![0.0, 0.0]);
        let s = Tensor::from_rows(1, 2, vec![3f64.ln(), 0.0]);
        let direct = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
        assert!((kd_loss(&t, &s, 1.0).unwrap() - direct).abs() < 1e-15);
        assert!((direct - 0.5 * (4.0f64 / 3.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn identical_logits_give_zero() {
        let t = Tensor::from_rows(2, 3, vec![0.3, -1.0, 2.0, 5.0, 0.0, 0.1]);
        for tau in [0.5, 1.0, 4.0] {
            assert_eq!(kd_loss(&t, &t, tau).unwrap(), 0.0);
        }
    }

    #[test]
    fn high_temperature_approaches_squared_difference() {
        // For large tau, tau^2 KL -> sum_k p_k (d_k - mean_p d)^2 / 2 with
        // p the uniform distribution and d = t - s.
        let t = Tensor::from_rows(1, 3, vec![0.5, -0.2, 0.1]);
        let s = Tensor::from_rows(1, 3, vec![0.1, 0.3, -0.4]);
        let d: Vec<f64> = t.data().iter().zip(s.data()).map(|(a, b)| a - b).collect();
        let mean = d.iter().sum::<f64>() / 3.0;
        let quad = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 6.0;
        let at = |tau: f64| kd_loss(&t, &s, tau).unwrap();
        assert!((at(100.0) - quad).abs() < 1e-2 * quad);
        assert!((at(100.0) - quad).abs() < (at(10.0) - quad).abs());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let t = Tensor::zeros(2, 3);
        assert!(kd_loss(&t, &Tensor::zeros(2, 4), 1.0).is_err());
    }

    #[test]
    fn student_matches_prefix() {
        let teacher = teacher();
        let student = build_student(&teacher, &DistillConfig::default()).unwrap();
        let x = &corpus()[0].features;
        let (taps, logits) = encode(x, &student, None).unwrap();
        let prefix = encode_prefix(x, &teacher, 2).unwrap();
        assert_eq!(taps, prefix);
        let (_, direct) = encode(x, &teacher.truncated(2).unwrap(), None).unwrap();
        assert_eq!(logits, direct);
    }

    #[test]
    fn random_students_are_seeded() {
        let cfg = DistillConfig {
            init: StudentInit::Random,
            student_layers: 6,
            ..DistillConfig::default()
        };
        assert_eq!(build_student(&teacher(), &cfg).unwrap(), build_student(&teacher(), &cfg).unwrap());
        let too_deep = DistillConfig {
            student_layers: 4,
            ..DistillConfig::default()
        };
        assert!(build_student(&teacher(), &too_deep).is_err());
    }

    #[test]
    fn full_depth_teacher_init_stays_at_zero() {
        let teacher = teacher();
        let before = teacher.clone();
        for mask_student_input in [false, true] {
            let cfg = DistillConfig {
                student_layers: 3,
                steps: 10,
                mask_student_input,
                ..DistillConfig::default()
            };
            let out = distill(&teacher, &cfg, &corpus(), |_, _, _| Ok(())).unwrap();
            assert!(out.losses.iter().all(|&l| l < 1e-8), "{:?}", out.losses);
        }
        assert_eq!(teacher, before);
    }

    #[test]
    fn distillation_loss_drops() {
        let cfg = DistillConfig {
            init: StudentInit::Random,
            student_layers: 1,
            steps: 120,
            hyper: AdamHyper {
                learning_rate: 3e-3,
                batch_size: 2,
                ..AdamHyper::default()
            },
            ..DistillConfig::default()
        };
        let out = distill(&teacher(), &cfg, &corpus(), |_, _, _| Ok(())).unwrap();
        let head: f64 = out.losses[..20].iter().sum();
        let tail: f64 = out.losses[100..].iter().sum();
        assert!(tail < 0.5 * head, "{head} -> {tail}");
    }
}
