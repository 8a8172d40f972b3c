//! Frozen-upstream probing: a learned softmax-weighted sum of layer taps
//! feeding a linear frame classifier or a mean-pooled sequence classifier.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::encoder::{encode_prefix, weights_hash, EncoderWeights, EpochSampler, LayerOutputs};
use crate::error::{Error, Result};
use crate::numcore::{adam_step, softmax_rows, AdamHyper, Parameter, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTask {
    /// Per-frame hidden state (phone-recognition analog).
    FrameState,
    /// Per-utterance class (speaker-identification analog).
    SeqClass,
}

impl ProbeTask {
    pub fn name(self) -> &'static str {
        match self {
            ProbeTask::FrameState => "frame_state",
            ProbeTask::SeqClass => "seq_class",
        }
    }
}

/// Raw per-tap weights; the effective weights are their softmax.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWeighting {
    pub raw: Vec<f64>,
}

impl LayerWeighting {
    pub fn uniform(taps: usize) -> Self {
        Self { raw: vec![0.0; taps] }
    }

    pub fn effective(&self) -> Vec<f64> {
        softmax_rows(&Tensor::row_vector(self.raw.clone()), 1.0).into_data()
    }
}

/// `sum_l softmax(raw)_l * h_l`.
pub fn weighted_features(taps: &LayerOutputs, lw: &LayerWeighting) -> Result<Tensor> {
    if taps.len() != lw.raw.len() || taps.is_empty() {
        return Err(Error::shape(format!("{} taps for {} layer weights", taps.len(), lw.raw.len())));
    }
    let mut out = Tensor::zeros_like(&taps.taps[0]);
    for (t, w) in taps.taps.iter().zip(lw.effective()) {
        let mut s = t.clone();
        s.scale_assign(w);
        out.add_assign(&s);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub hyper: AdamHyper,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hyper: AdamHyper {
                learning_rate: 1e-2,
                batch_size: 8,
                ..AdamHyper::default()
            },
            epochs: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub task: ProbeTask,
    /// Held-out test accuracy: fraction of frames or of utterances.
    pub accuracy: f64,
    pub dev_accuracy: f64,
    pub classes: usize,
    /// Encoder blocks whose taps were used.
    pub depth: usize,
    /// Effective layer weights after training.
    pub layer_weights: Vec<f64>,
    pub upstream_hash: String,
}

/// Seeded 80/10/10 split of `0..n` into train, dev and test indices.
pub fn split_indices(n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let n_train = n * 8 / 10;
    let n_dev = n / 10;
    if n_train == 0 || n_dev == 0 || n - n_train - n_dev == 0 {
        return Err(Error::contract(format!("{n} utterances are too few for an 80/10/10 split")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = idx.split_off(n_train + n_dev);
    let dev = idx.split_off(n_train);
    Ok((idx, dev, test))
}

fn labels_of(u: &Utterance, task: ProbeTask) -> Result<Vec<usize>> {
    let missing = || Error::contract(format!("utterance lacks {} labels", task.name()));
    match task {
        ProbeTask::FrameState => u.frame_states.clone().ok_or_else(missing),
        ProbeTask::SeqClass => u.seq_class.map(|c| vec![c]).ok_or_else(missing),
    }
}

struct Head {
    layer: Parameter,
    weight: Parameter,
    bias: Parameter,
}

struct HeadVars {
    layer: Var,
    weight: Var,
    bias: Var,
}

impl Head {
    fn bind(&self, tape: &mut Tape) -> HeadVars {
        HeadVars {
            layer: tape.leaf(self.layer.value.clone()),
            weight: tape.leaf(self.weight.value.clone()),
            bias: tape.leaf(self.bias.value.clone()),
        }
    }

    fn logits(&self, tape: &mut Tape, vars: &HeadVars, taps: &LayerOutputs, task: ProbeTask) -> Var {
        let leaves: Vec<Var> = taps.taps.iter().map(|t| tape.leaf(t.clone())).collect();
        let mix = tape.softmax_rows(vars.layer);
        let mut x = tape.mix(&leaves, mix);
        if task == ProbeTask::SeqClass {
            x = tape.mean_rows(x);
        }
        let y = tape.matmul(x, vars.weight);
        tape.add_row(y, vars.bias)
    }

    fn params_mut(&mut self) -> [&mut Parameter; 3] {
        [&mut self.layer, &mut self.weight, &mut self.bias]
    }
}

/// Probe loss for one utterance, exposed for gradient checks.
pub fn probe_loss(
    raw_layer_weights: &[f64],
    weight: &Tensor,
    bias: &Tensor,
    taps: &LayerOutputs,
    labels: &[usize],
    task: ProbeTask,
) -> Result<(f64, Vec<f64>)> {
    let head = Head {
        layer: Parameter::new(Tensor::row_vector(raw_layer_weights.to_vec())),
        weight: Parameter::new(weight.clone()),
        bias: Parameter::new(bias.clone()),
    };
    let mut tape = Tape::new();
    let vars = head.bind(&mut tape);
    let logits = head.logits(&mut tape, &vars, taps, task);
    let rows = vec![true; labels.len()];
    let loss = tape.masked_cross_entropy(logits, labels, &rows)?;
    let grads = tape.backward(loss)?;
    let g = grads.get(vars.layer).map_or(vec![0.0; raw_layer_weights.len()], |g| g.data().to_vec());
    Ok((tape.value(loss).item(), g))
}

fn accuracy(head: &Head, feats: &[(LayerOutputs, Vec<usize>)], idx: &[usize], task: ProbeTask) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for &i in idx {
        let (taps, labels) = &feats[i];
        let mut tape = Tape::new();
        let vars = head.bind(&mut tape);
        let logits = head.logits(&mut tape, &vars, taps, task);
        let lv = tape.value(logits);
        for (r, &label) in labels.iter().enumerate() {
            let row = lv.row(r);
            let best = (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            hit += usize::from(best == label);
            n += 1;
        }
    }
    hit as f64 / n.max(1) as f64
}

/// Train a probe on the first `depth` blocks of a frozen upstream.
pub fn train_probe(
    upstream: &EncoderWeights,
    corpus: &[Utterance],
    task: ProbeTask,
    depth: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    cfg.hyper.validate()?;
    let hash_before = weights_hash(upstream)?;
    let mut feats = Vec::with_capacity(corpus.len());
    for u in corpus {
        let labels = labels_of(u, task)?;
        feats.push((encode_prefix(&u.features, upstream, depth)?, labels));
    }
    let classes = feats.iter().flat_map(|(_, l)| l.iter()).max().map_or(0, |m| m + 1).max(2);
    let (train, dev, test) = split_indices(corpus.len(), cfg.seed)?;
    let d = upstream.config.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut head = Head {
        layer: Parameter::new(Tensor::zeros(1, depth + 1)),
        weight: Parameter::new(Tensor::randn(d, classes, 1.0 / (d as f64).sqrt(), &mut rng)),
        bias: Parameter::new(Tensor::zeros(1, classes)),
    };
    let steps_per_epoch = train.len().div_ceil(cfg.hyper.batch_size);
    let mut sampler = EpochSampler::new(train.len());
    for _ in 0..cfg.epochs * steps_per_epoch {
        let batch = sampler.next_batch(cfg.hyper.batch_size, &mut rng);
        let scale = 1.0 / batch.len() as f64;
        head.params_mut().into_iter().for_each(|p| p.zero_grad());
        for &b in &batch {
            let (taps, labels) = &feats[train[b]];
            let mut tape = Tape::new();
            let vars = head.bind(&mut tape);
            let logits = head.logits(&mut tape, &vars, taps, task);
            let rows = vec![true; labels.len()];
            let loss = tape.masked_cross_entropy(logits, labels, &rows)?;
            let grads = tape.backward(loss)?;
            for (p, v) in head.params_mut().into_iter().zip([vars.layer, vars.weight, vars.bias]) {
                let mut g = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros_like(&p.value));
                g.scale_assign(scale);
                p.accumulate_grad(&g);
            }
        }
        adam_step(head.params_mut(), &cfg.hyper)?;
    }
    let result = ProbeResult {
        task,
        accuracy: accuracy(&head, &feats, &test, task),
        dev_accuracy: accuracy(&head, &feats, &dev, task),
        classes,
        depth,
        layer_weights: LayerWeighting {
            raw: head.layer.value.data().to_vec(),
        }
        .effective(),
        upstream_hash: hash_before.clone(),
    };
    if weights_hash(upstream)? != hash_before {
        return Err(Error::contract("upstream weights changed during probing"));
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate, GeneratorSpec};
    use crate::encoder::{encode, EncoderConfig};

    fn taps(n: usize) -> LayerOutputs {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        LayerOutputs {
            taps: (0..n).map(|_| Tensor::randn(3, 4, 1.0, &mut rng)).collect(),
        }
    }

    #[test]
    fn dominant_weight_selects_a_layer() {
        let t = taps(3);
        let out = weighted_features(&t, &LayerWeighting { raw: vec![0.0, 20.0, 0.0] }).unwrap();
        assert!(out.max_abs_diff(&t.taps[1]) < 1e-6 * 10.0);
    }

    #[test]
    fn uniform_weights_average() {
        let t = taps(4);
        let out = weighted_features(&t, &LayerWeighting::uniform(4)).unwrap();
        let mut mean = Tensor::zeros(3, 4);
        for x in &t.taps {
            mean.add_assign(x);
        }
        mean.scale_assign(0.25);
        assert!(out.max_abs_diff(&mean) < 1e-15);
    }

    #[test]
    fn weighting_is_shift_invariant() {
        let t = taps(3);
        let a = weighted_features(&t, &LayerWeighting { raw: vec![0.1, -0.4, 0.9] }).unwrap();
        let b = weighted_features(&t, &LayerWeighting { raw: vec![3.1, 2.6, 3.9] }).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-14);
        assert!(weighted_features(&t, &LayerWeighting::uniform(2)).is_err());
    }

    #[test]
    fn layer_weight_gradient_matches_finite_differences() {
        let t = taps(3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = Tensor::randn(4, 3, 1.0, &mut rng);
        let b = Tensor::randn(1, 3, 0.1, &mut rng);
        let raw = [0.3, -0.2, 0.5];
        for task in [ProbeTask::FrameState, ProbeTask::SeqClass] {
            let labels: Vec<usize> = if task == ProbeTask::FrameState { vec![0, 2, 1] } else { vec![1] };
            let (_, g) = probe_loss(&raw, &w, &b, &t, &labels, task).unwrap();
            for i in 0..3 {
                let h = 1e-5;
                let mut up = raw;
                up[i] += h;
                let mut down = raw;
                down[i] -= h;
                let fd = (probe_loss(&up, &w, &b, &t, &labels, task).unwrap().0
                    - probe_loss(&down, &w, &b, &t, &labels, task).unwrap().0)
                    / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(g[i].abs()).max(1e-6), "{fd} vs {}", g[i]);
            }
        }
    }

    fn upstream(input_dim: usize) -> EncoderWeights {
        let cfg = EncoderConfig {
            layers: 2,
            d_model: 16,
            heads: 2,
            ffn_dim: 32,
            input_dim,
            clusters: 4,
            ..EncoderConfig::default()
        };
        EncoderWeights::init(&cfg, 5).unwrap()
    }

    #[test]
    fn separable_frames_are_learned() {
        let spec = GeneratorSpec {
            dim: 8,
            n_states: 4,
            noise_scale: 0.0,
            min_len: 10,
            max_len: 20,
            ..GeneratorSpec::default()
        };
        let corpus = generate(&spec, 30).unwrap();
        let up = upstream(8);
        let cfg = ProbeConfig {
            epochs: 100,
            ..ProbeConfig::default()
        };
        let r = train_probe(&up, &corpus, ProbeTask::FrameState, 2, &cfg).unwrap();
        assert!(r.accuracy > 0.99, "{r:?}");
        let total: f64 = r.layer_weights.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shuffled_labels_stay_at_chance() {
        let spec = GeneratorSpec {
            dim: 8,
            n_states: 4,
            min_len: 20,
            max_len: 30,
            ..GeneratorSpec::default()
        };
        let mut corpus = generate(&spec, 50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        use rand::Rng;
        for u in &mut corpus {
            let n = u.frames();
            u.frame_states = Some((0..n).map(|_| rng.random_range(0..4)).collect());
        }
        let r = train_probe(&upstream(8), &corpus, ProbeTask::FrameState, 2, &ProbeConfig::default()).unwrap();
        let (_, _, test) = split_indices(50, 0).unwrap();
        let frames: usize = test.iter().map(|&i| corpus[i].frames()).sum();
        let sigma = (0.25 * 0.75 / frames as f64).sqrt();
        assert!((r.accuracy - 0.25).abs() <= 3.0 * sigma, "{} vs 0.25 +- {sigma}", r.accuracy);
    }

    #[test]
    fn missing_labels_and_upstream_immutability() {
        let spec = GeneratorSpec {
            dim: 8,
            min_len: 5,
            max_len: 8,
            ..GeneratorSpec::default()
        };
        let mut corpus = generate(&spec, 20).unwrap();
        let up = upstream(8);
        let before = encode(&corpus[0].features, &up, None).unwrap();
        let r = train_probe(&up, &corpus, ProbeTask::SeqClass, 1, &ProbeConfig::default()).unwrap();
        assert_eq!(r.upstream_hash, weights_hash(&up).unwrap());
        assert_eq!(encode(&corpus[0].features, &up, None).unwrap(), before);
        corpus[3].seq_class = None;
        assert!(train_probe(&up, &corpus, ProbeTask::SeqClass, 1, &ProbeConfig::default()).is_err());
    }
}
