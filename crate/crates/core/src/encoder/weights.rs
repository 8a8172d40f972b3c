use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::numcore::{Gradients, Parameter, Tape, Tensor, Var};

/// Affine map `y = x W + b`, with `W` stored `in x out` and `b` as `1 x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, std: f64) -> Self {
        Self {
            weight: Parameter::new(Tensor::randn(fan_in, fan_out, std, rng)),
            bias: Parameter::new(Tensor::zeros(1, fan_out)),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.value.cols()
    }

    /// Keep output units `idx` (weight columns and bias entries).
    pub fn keep_outputs(&mut self, idx: &[usize]) {
        self.weight.keep_cols(idx);
        self.bias.keep_cols(idx);
    }

    /// Keep input units `idx` (weight rows).
    pub fn keep_inputs(&mut self, idx: &[usize]) {
        self.weight.keep_rows(idx);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Parameter,
    pub beta: Parameter,
}

impl LayerNormParams {
    fn init(d: usize) -> Self {
        Self {
            gamma: Parameter::new(Tensor::filled(1, d, 1.0)),
            beta: Parameter::new(Tensor::zeros(1, d)),
        }
    }
}

/// One pre-LN Transformer block. Live heads occupy consecutive `head_dim`
/// column groups of `q`, `k`, `v` outputs and row groups of `o`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln1: LayerNormParams,
    pub fc1: Linear,
    pub fc2: Linear,
    pub ln2: LayerNormParams,
    /// Original index of every live head, in storage order.
    pub head_ids: Vec<usize>,
}

impl LayerWeights {
    pub fn live_heads(&self) -> usize {
        self.head_ids.len()
    }

    pub fn ffn_dim(&self) -> usize {
        self.fc1.fan_out()
    }

    /// The twelve linear-layer tensors (weights and biases) of this block.
    pub fn linear_params(&self) -> [&Parameter; 12] {
        [
            &self.q.weight,
            &self.q.bias,
            &self.k.weight,
            &self.k.bias,
            &self.v.weight,
            &self.v.bias,
            &self.o.weight,
            &self.o.bias,
            &self.fc1.weight,
            &self.fc1.bias,
            &self.fc2.weight,
            &self.fc2.bias,
        ]
    }

    pub fn linear_params_mut(&mut self) -> [&mut Parameter; 12] {
        [
            &mut self.q.weight,
            &mut self.q.bias,
            &mut self.k.weight,
            &mut self.k.bias,
            &mut self.v.weight,
            &mut self.v.bias,
            &mut self.o.weight,
            &mut self.o.bias,
            &mut self.fc1.weight,
            &mut self.fc1.bias,
            &mut self.fc2.weight,
            &mut self.fc2.bias,
        ]
    }

    fn params(&self) -> [(&'static str, &Parameter); 16] {
        [
            ("attn.q.weight", &self.q.weight),
            ("attn.q.bias", &self.q.bias),
            ("attn.k.weight", &self.k.weight),
            ("attn.k.bias", &self.k.bias),
            ("attn.v.weight", &self.v.weight),
            ("attn.v.bias", &self.v.bias),
            ("attn.o.weight", &self.o.weight),
            ("attn.o.bias", &self.o.bias),
            ("ln1.gamma", &self.ln1.gamma),
            ("ln1.beta", &self.ln1.beta),
            ("ffn.fc1.weight", &self.fc1.weight),
            ("ffn.fc1.bias", &self.fc1.bias),
            ("ffn.fc2.weight", &self.fc2.weight),
            ("ffn.fc2.bias", &self.fc2.bias),
            ("ln2.gamma", &self.ln2.gamma),
            ("ln2.beta", &self.ln2.beta),
        ]
    }

    fn params_mut(&mut self) -> [&mut Parameter; 16] {
        [
            &mut self.q.weight,
            &mut self.q.bias,
            &mut self.k.weight,
            &mut self.k.bias,
            &mut self.v.weight,
            &mut self.v.bias,
            &mut self.o.weight,
            &mut self.o.bias,
            &mut self.ln1.gamma,
            &mut self.ln1.beta,
            &mut self.fc1.weight,
            &mut self.fc1.bias,
            &mut self.fc2.weight,
            &mut self.fc2.bias,
            &mut self.ln2.gamma,
            &mut self.ln2.beta,
        ]
    }
}

/// All encoder parameters. Structural pruning changes tensor shapes but
/// never `config`, which keeps the unpruned geometry.
#[derive(Clone, PartialEq)]
pub struct EncoderWeights {
    pub config: EncoderConfig,
    pub input: Linear,
    pub mask_embedding: Parameter,
    pub layers: Vec<LayerWeights>,
    pub classifier: Linear,
}

impl fmt::Debug for EncoderWeights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EncoderWeights")
            .field("config", &self.config)
            .field(
                "heads",
                &self.layers.iter().map(LayerWeights::live_heads).collect::<Vec<_>>(),
            )
            .field("ffn", &self.layers.iter().map(LayerWeights::ffn_dim).collect::<Vec<_>>())
            .finish_non_exhaustive()
    }
}

pub(crate) const PARAMS_PER_LAYER: usize = 16;

impl EncoderWeights {
    /// Random initialization, deterministic in `seed`.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f) = (config.d_model, config.ffn_dim);
        let residual_scale = 1.0 / ((2 * config.layers.max(1)) as f64).sqrt();
        let std_in = |n: usize| 1.0 / (n as f64).sqrt();
        let input = Linear::init(&mut rng, config.input_dim, d, std_in(config.input_dim));
        let mask_embedding = Parameter::new(Tensor::randn(1, d, 1.0, &mut rng));
        let layers = (0..config.layers)
            .map(|_| LayerWeights {
                q: Linear::init(&mut rng, d, d, std_in(d)),
                k: Linear::init(&mut rng, d, d, std_in(d)),
                v: Linear::init(&mut rng, d, d, std_in(d)),
                o: Linear::init(&mut rng, d, d, std_in(d) * residual_scale),
                ln1: LayerNormParams::init(d),
                fc1: Linear::init(&mut rng, d, f, std_in(d)),
                fc2: Linear::init(&mut rng, f, d, std_in(f) * residual_scale),
                ln2: LayerNormParams::init(d),
                head_ids: (0..config.heads).collect(),
            })
            .collect();
        let classifier = Linear::init(&mut rng, d, config.clusters, 0.02);
        Ok(Self {
            config: config.clone(),
            input,
            mask_embedding,
            layers,
            classifier,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Every parameter with its checkpoint name, in binding order.
    pub fn named_params(&self) -> Vec<(String, &Parameter)> {
        let mut out = vec![
            ("input.weight".to_string(), &self.input.weight),
            ("input.bias".to_string(), &self.input.bias),
            ("mask_embedding".to_string(), &self.mask_embedding),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(layer.params().into_iter().map(|(n, p)| (format!("layers.{i}.{n}"), p)));
        }
        out.push(("classifier.weight".to_string(), &self.classifier.weight));
        out.push(("classifier.bias".to_string(), &self.classifier.bias));
        out
    }

    /// Mutable parameters in the same order as [`Self::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = vec![&mut self.input.weight, &mut self.input.bias, &mut self.mask_embedding];
        for layer in &mut self.layers {
            out.extend(layer.params_mut());
        }
        out.push(&mut self.classifier.weight);
        out.push(&mut self.classifier.bias);
        out
    }

    /// Record every parameter value as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> EncoderVars {
        let flat: Vec<Var> = self.named_params().into_iter().map(|(_, p)| tape.leaf(p.value.clone())).collect();
        EncoderVars::from_flat(flat, self.layers.len())
    }

    /// Add `scale * dL/dparam` into every gradient buffer. Parameters the
    /// loss does not reach get an explicit zero gradient.
    pub fn accumulate_grads(&mut self, vars: &EncoderVars, grads: &Gradients, scale: f64) {
        for (p, v) in self.params_mut().into_iter().zip(&vars.flat) {
            match grads.get(*v) {
                Some(g) if scale == 1.0 => p.accumulate_grad(g),
                Some(g) => {
                    let mut g = g.clone();
                    g.scale_assign(scale);
                    p.accumulate_grad(&g);
                }
                None => p.accumulate_grad(&Tensor::zeros_like(&p.value)),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Re-apply every mask (values, gradients and moments).
    pub fn apply_masks(&mut self) {
        for p in self.params_mut() {
            p.apply_mask();
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, p) in self.named_params() {
            if !p.value.is_finite() {
                return Err(Error::Numeric {
                    op: "parameter".into(),
                    detail: format!("{name} holds a non-finite value"),
                });
            }
        }
        Ok(())
    }

    /// Copy of the first `k` blocks with the same input projection, mask
    /// embedding and classifier.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        if k > self.layers.len() {
            return Err(Error::contract(format!("cannot keep {k} of {} layers", self.layers.len())));
        }
        let mut config = self.config.clone();
        config.layers = k;
        Ok(Self {
            config,
            input: self.input.clone(),
            mask_embedding: self.mask_embedding.clone(),
            layers: self.layers[..k].to_vec(),
            classifier: self.classifier.clone(),
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        let y = tape.matmul(x, self.weight);
        tape.add_row(y, self.bias)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NormVars {
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Clone, Debug)]
pub struct LayerVars {
    pub q: LinearVars,
    pub k: LinearVars,
    pub v: LinearVars,
    pub o: LinearVars,
    pub ln1: NormVars,
    pub fc1: LinearVars,
    pub fc2: LinearVars,
    pub ln2: NormVars,
}

/// Tape handles for every encoder parameter.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub input: LinearVars,
    pub mask_embedding: Var,
    pub layers: Vec<LayerVars>,
    pub classifier: LinearVars,
    flat: Vec<Var>,
}

impl EncoderVars {
    fn from_flat(flat: Vec<Var>, layers: usize) -> Self {
        let lin = |i: usize| LinearVars {
            weight: flat[i],
            bias: flat[i + 1],
        };
        let norm = |i: usize| NormVars {
            gamma: flat[i],
            beta: flat[i + 1],
        };
        let layer_vars = (0..layers)
            .map(|l| {
                let b = 3 + l * PARAMS_PER_LAYER;
                LayerVars {
                    q: lin(b),
                    k: lin(b + 2),
                    v: lin(b + 4),
                    o: lin(b + 6),
                    ln1: norm(b + 8),
                    fc1: lin(b + 10),
                    fc2: lin(b + 12),
                    ln2: norm(b + 14),
                }
            })
            .collect();
        let c = 3 + layers * PARAMS_PER_LAYER;
        Self {
            input: lin(0),
            mask_embedding: flat[2],
            layers: layer_vars,
            classifier: lin(c),
            flat,
        }
    }

    /// Handles in [`EncoderWeights::named_params`] order.
    pub fn flat(&self) -> &[Var] {
        &self.flat
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            layers: 2,
            d_model: 8,
            heads: 2,
            ffn_dim: 12,
            input_dim: 5,
            clusters: 4,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = EncoderWeights::init(&tiny(), 3).unwrap();
        assert_eq!(a, EncoderWeights::init(&tiny(), 3).unwrap());
        assert_ne!(a, EncoderWeights::init(&tiny(), 4).unwrap());
    }

    #[test]
    fn names_and_binding_line_up() {
        let w = EncoderWeights::init(&tiny(), 0).unwrap();
        let named = w.named_params();
        assert_eq!(named.len(), 3 + 2 * PARAMS_PER_LAYER + 2);
        let mut tape = Tape::new();
        let vars = w.bind(&mut tape);
        assert_eq!(tape.value(vars.layers[1].fc2.weight).shape(), &[12, 8]);
        assert_eq!(tape.value(vars.classifier.weight).shape(), &[8, 4]);
        for ((_, p), v) in named.iter().zip(vars.flat()) {
            assert_eq!(&p.value, tape.value(*v));
        }
        let mut w2 = w.clone();
        let n = w2.params_mut().len();
        assert_eq!(n, named.len());
    }

    #[test]
    fn truncation_keeps_prefix() {
        let w = EncoderWeights::init(&tiny(), 0).unwrap();
        let t = w.truncated(1).unwrap();
        assert_eq!(t.layers[0], w.layers[0]);
        assert_eq!(t.config.layers, 1);
        assert!(w.truncated(3).is_err());
    }
}
