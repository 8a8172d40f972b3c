use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Spread of the per-sequence-class emission offset relative to the
/// per-state means (which are unit normal).
const CLASS_SHIFT_STD: f64 = 0.5;

/// Frame features with their ground-truth labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    /// `T x D` frame features.
    pub features: Tensor,
    /// Hidden state per frame; the frame-level probe target.
    pub frame_states: Option<Vec<usize>>,
    /// Sequence-level class; the sequence-level probe target.
    pub seq_class: Option<usize>,
    /// Codebook assignment per frame; the masked-prediction target.
    pub cluster_labels: Option<Vec<usize>>,
}

impl Utterance {
    pub fn new(features: Tensor) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::EmptyUtterance("utterance has no frames".into()));
        }
        if !features.is_finite() {
            return Err(Error::Numeric {
                op: "utterance".into(),
                detail: "non-finite feature value".into(),
            });
        }
        Ok(Self {
            features,
            frame_states: None,
            seq_class: None,
            cluster_labels: None,
        })
    }

    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// Parameters of the synthetic corpus: a sticky Markov chain over hidden
/// states whose Gaussian emissions depend on state and sequence class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub n_states: usize,
    pub n_seq_classes: usize,
    pub dim: usize,
    /// Probability of staying in the current state at each frame.
    pub stickiness: f64,
    pub noise_scale: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            n_states: 8,
            n_seq_classes: 4,
            dim: 40,
            stickiness: 0.95,
            noise_scale: 1.0,
            min_len: 80,
            max_len: 160,
            seed: 0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_states < 2 {
            return Err(Error::config("generator needs at least 2 states"));
        }
        if self.n_seq_classes < 1 {
            return Err(Error::config("generator needs at least 1 sequence class"));
        }
        if self.dim == 0 {
            return Err(Error::config("feature dimension must be positive"));
        }
        if !(0.0..=1.0).contains(&self.stickiness) {
            return Err(Error::config("stickiness must be a probability"));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::config("noise scale must be non-negative"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config(format!(
                "utterance length range ({}, {}) is invalid",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }
}

/// Sample `n_utts` utterances. Deterministic given `spec.seed`.
pub fn generate(spec: &GeneratorSpec, n_utts: usize) -> Result<Vec<Utterance>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let state_means = Tensor::randn(spec.n_states, spec.dim, 1.0, &mut rng);
    let class_shifts = Tensor::randn(spec.n_seq_classes, spec.dim, CLASS_SHIFT_STD, &mut rng);

    let mut out = Vec::with_capacity(n_utts);
    for _ in 0..n_utts {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let class = rng.random_range(0..spec.n_seq_classes);
        let mut state = rng.random_range(0..spec.n_states);
        let noise = Tensor::randn(len, spec.dim, spec.noise_scale, &mut rng);
        let mut features = noise;
        let mut states = Vec::with_capacity(len);
        for t in 0..len {
            if t > 0 && rng.random::<f64>() >= spec.stickiness {
                // Uniform over the other states, so the self-transition
                // rate is exactly the stickiness.
                let jump = rng.random_range(1..spec.n_states);
                state = (state + jump) % spec.n_states;
            }
            states.push(state);
            let row = features.row_mut(t);
            for ((x, m), c) in row.iter_mut().zip(state_means.row(state)).zip(class_shifts.row(class)) {
                *x += m + c;
            }
        }
        let mut utt = Utterance::new(features)?;
        utt.frame_states = Some(states);
        utt.seq_class = Some(class);
        out.push(utt);
    }
    Ok(out)
}
