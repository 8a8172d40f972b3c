use rand_chacha::ChaCha8Rng;

use super::weights::{EncoderVars, EncoderWeights, LayerVars, LayerWeights, NormVars};
use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};

/// Hidden states `h_0..h_k`; `h_0` is the input embedding after masking
/// and positional encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerOutputs {
    pub taps: Vec<Tensor>,
}

impl LayerOutputs {
    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn last(&self) -> &Tensor {
        self.taps.last().expect("at least the embedding tap")
    }
}

/// Handles into a recorded forward pass.
#[derive(Clone, Debug)]
pub struct ForwardGraph {
    pub taps: Vec<Var>,
    pub logits: Option<Var>,
    /// Per layer, per live head: the attention-weighted values (`T x d_h`).
    pub head_outputs: Vec<Vec<Var>>,
}

/// What to compute in [`forward`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardSpec<'a> {
    /// Frames to replace by the learned mask embedding.
    pub frame_mask: Option<&'a [bool]>,
    /// Number of blocks to run; later blocks are never computed.
    pub depth: usize,
    pub logits: bool,
}

impl<'a> ForwardSpec<'a> {
    pub fn full(weights: &EncoderWeights) -> Self {
        Self {
            frame_mask: None,
            depth: weights.depth(),
            logits: true,
        }
    }

    pub fn masked(weights: &EncoderWeights, mask: &'a [bool]) -> Self {
        Self {
            frame_mask: Some(mask),
            ..Self::full(weights)
        }
    }
}

/// Sinusoidal absolute positions, `T x d`.
pub fn positional_encoding(frames: usize, d: usize) -> Tensor {
    let mut pe = Tensor::zeros(frames, d);
    for t in 0..frames {
        let row = pe.row_mut(t);
        for i in 0..d {
            let pair = (i / 2) as f64 * 2.0;
            let angle = t as f64 / 10000f64.powf(pair / d as f64);
            row[i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

fn layer_norm(tape: &mut Tape, x: Var, n: NormVars) -> Var {
    tape.layer_norm(x, n.gamma, n.beta)
}

fn block(
    tape: &mut Tape,
    weights: &LayerWeights,
    vars: &LayerVars,
    head_dim: usize,
    dropout: f64,
    h: Var,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, Vec<Var>)> {
    let heads = weights.live_heads();
    if heads == 0 {
        return Err(Error::contract("attention block has no live heads"));
    }
    let a = layer_norm(tape, h, vars.ln1);
    let q = vars.q.apply(tape, a);
    let q = tape.dropout(q, dropout, rng.as_deref_mut())?;
    let k = vars.k.apply(tape, a);
    let k = tape.dropout(k, dropout, rng.as_deref_mut())?;
    let v = vars.v.apply(tape, a);
    let v = tape.dropout(v, dropout, rng.as_deref_mut())?;
    if tape.value(q).cols() != heads * head_dim {
        return Err(Error::shape(format!(
            "query width {} for {heads} heads of dim {head_dim}",
            tape.value(q).cols()
        )));
    }
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut contexts = Vec::with_capacity(heads);
    for j in 0..heads {
        let qj = tape.slice_cols(q, j * head_dim, head_dim);
        let kj = tape.slice_cols(k, j * head_dim, head_dim);
        let vj = tape.slice_cols(v, j * head_dim, head_dim);
        let scores = tape.matmul_bt(qj, kj);
        let scores = tape.scale(scores, scale);
        let probs = tape.softmax_rows(scores);
        contexts.push(tape.matmul(probs, vj));
    }
    let joined = if heads == 1 {
        contexts[0]
    } else {
        tape.concat_cols(&contexts)
    };
    let attn = vars.o.apply(tape, joined);
    let attn = tape.dropout(attn, dropout, rng.as_deref_mut())?;
    let h = tape.add(h, attn);

    let b = layer_norm(tape, h, vars.ln2);
    let hidden = vars.fc1.apply(tape, b);
    let hidden = tape.gelu(hidden);
    let hidden = tape.dropout(hidden, dropout, rng.as_deref_mut())?;
    let out = vars.fc2.apply(tape, hidden);
    let out = tape.dropout(out, dropout, rng.as_deref_mut())?;
    Ok((tape.add(h, out), contexts))
}

/// Record a forward pass. Passing `rng` enables dropout (training mode).
pub fn forward(
    tape: &mut Tape,
    weights: &EncoderWeights,
    vars: &EncoderVars,
    features: &Tensor,
    spec: ForwardSpec<'_>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardGraph> {
    let frames = features.rows();
    if frames == 0 {
        return Err(Error::EmptyUtterance("no frames to encode".into()));
    }
    if features.cols() != weights.input.fan_in() {
        return Err(Error::shape(format!(
            "features have dim {}, encoder expects {}",
            features.cols(),
            weights.input.fan_in()
        )));
    }
    if spec.depth > weights.depth() {
        return Err(Error::contract(format!(
            "requested {} layers of a {}-layer encoder",
            spec.depth,
            weights.depth()
        )));
    }
    let x = tape.leaf(features.clone());
    let mut h = vars.input.apply(tape, x);
    if let Some(mask) = spec.frame_mask {
        if mask.len() != frames {
            return Err(Error::shape(format!("{} mask flags for {frames} frames", mask.len())));
        }
        h = tape.replace_rows(h, vars.mask_embedding, mask);
    }
    let pe = tape.leaf(positional_encoding(frames, weights.config.d_model));
    h = tape.add(h, pe);

    let head_dim = weights.config.head_dim();
    let mut taps = vec![h];
    let mut head_outputs = Vec::with_capacity(spec.depth);
    for (layer, lv) in weights.layers.iter().zip(&vars.layers).take(spec.depth) {
        let (next, heads) = block(tape, layer, lv, head_dim, weights.config.dropout, h, rng.as_deref_mut())?;
        h = next;
        taps.push(h);
        head_outputs.push(heads);
    }
    let logits = spec.logits.then(|| vars.classifier.apply(tape, h));
    tape.check()?;
    Ok(ForwardGraph {
        taps,
        logits,
        head_outputs,
    })
}

/// Inference-mode forward: all layer taps and the cluster logits.
pub fn encode(features: &Tensor, weights: &EncoderWeights, frame_mask: Option<&[bool]>) -> Result<(LayerOutputs, Tensor)> {
    let mut tape = Tape::new();
    let vars = weights.bind(&mut tape);
    let spec = ForwardSpec {
        frame_mask,
        ..ForwardSpec::full(weights)
    };
    let graph = forward(&mut tape, weights, &vars, features, spec, None)?;
    let taps = graph.taps.iter().map(|&v| tape.value(v).clone()).collect();
    let logits = tape.value(graph.logits.expect("requested")).clone();
    Ok((LayerOutputs { taps }, logits))
}

/// Inference-mode taps `h_0..h_k`; blocks after `k` are not evaluated.
pub fn encode_prefix(features: &Tensor, weights: &EncoderWeights, k: usize) -> Result<LayerOutputs> {
    let mut tape = Tape::new();
    let vars = weights.bind(&mut tape);
    let spec = ForwardSpec {
        frame_mask: None,
        depth: k,
        logits: false,
    };
    let graph = forward(&mut tape, weights, &vars, features, spec, None)?;
    Ok(LayerOutputs {
        taps: graph.taps.iter().map(|&v| tape.value(v).clone()).collect(),
    })
}

/// Mean cross-entropy of `labels` over the frames selected by `frame_mask`.
pub fn masked_ce_loss(logits: &Tensor, labels: &[usize], frame_mask: &[bool]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone());
    let loss = tape.masked_cross_entropy(l, labels, frame_mask)?;
    Ok(tape.value(loss).item())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::encoder::EncoderConfig;

    fn config(layers: usize, heads: usize) -> EncoderConfig {
        EncoderConfig {
            layers,
            d_model: 8,
            heads,
            ffn_dim: 16,
            input_dim: 3,
            clusters: 5,
            dropout: 0.0,
            ..EncoderConfig::default()
        }
    }

    fn features(t: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(t, d, 1.0, &mut rng)
    }

    #[test]
    fn zero_layers_is_classifier_of_embedding() {
        let w = EncoderWeights::init(&config(0, 2), 1).unwrap();
        let x = features(4, 3, 0);
        let (taps, logits) = encode(&x, &w, None).unwrap();
        assert_eq!(taps.len(), 1);
        let mut want = Tensor::zeros(4, 5);
        let h = &taps.taps[0];
        for t in 0..4 {
            for c in 0..5 {
                let mut s = w.classifier.bias.value.get(0, c);
                for j in 0..8 {
                    s += h.get(t, j) * w.classifier.weight.value.get(j, c);
                }
                want.set(t, c, s);
            }
        }
        assert!(logits.max_abs_diff(&want) < 1e-12);
        // And the embedding itself is x W + b + positions.
        let pe = positional_encoding(4, 8);
        for t in 0..4 {
            for j in 0..8 {
                let mut s = w.input.bias.value.get(0, j) + pe.get(t, j);
                for i in 0..3 {
                    s += x.get(t, i) * w.input.weight.value.get(i, j);
                }
                assert!((s - h.get(t, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn head_permutation_leaves_output_unchanged() {
        let w = EncoderWeights::init(&config(2, 2), 5).unwrap();
        let mut p = w.clone();
        let swap: Vec<usize> = (4..8).chain(0..4).collect();
        for layer in &mut p.layers {
            for lin in [&mut layer.q, &mut layer.k, &mut layer.v] {
                lin.keep_outputs(&swap);
            }
            layer.o.keep_inputs(&swap);
        }
        let x = features(6, 3, 2);
        let (_, a) = encode(&x, &w, None).unwrap();
        let (_, b) = encode(&x, &p, None).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    /// One layer, one head, T = 2, with every step written out by hand.
    #[test]
    fn single_head_matches_hand_computation() {
        let cfg = EncoderConfig {
            d_model: 2,
            heads: 1,
            ffn_dim: 2,
            input_dim: 2,
            clusters: 2,
            ..config(1, 1)
        };
        let w = EncoderWeights::init(&cfg, 9).unwrap();
        let x = Tensor::from_rows(2, 2, vec![0.5, -1.0, 1.5, 0.25]);
        let (taps, _) = encode(&x, &w, None).unwrap();

        let mat = |t: &Tensor| (t.get(0, 0), t.get(0, 1), t.get(1, 0), t.get(1, 1));
        let lin = |x: [f64; 2], l: &crate::encoder::Linear| -> [f64; 2] {
            let (a, b, c, d) = mat(&l.weight.value);
            [
                x[0] * a + x[1] * c + l.bias.value.get(0, 0),
                x[0] * b + x[1] * d + l.bias.value.get(0, 1),
            ]
        };
        let ln = |x: [f64; 2]| -> [f64; 2] {
            let m = (x[0] + x[1]) / 2.0;
            let v = ((x[0] - m).powi(2) + (x[1] - m).powi(2)) / 2.0;
            let s = (v + 1e-5).sqrt();
            [(x[0] - m) / s, (x[1] - m) / s]
        };
        let gelu = |v: f64| 0.5 * v * (1.0 + (0.797_884_560_802_865_4 * (v + 0.044715 * v * v * v)).tanh());
        // Embedding: positions are [sin 0, cos 0] = [0, 1] and [sin 1, cos 1].
        let pos = [[0.0, 1.0], [1f64.sin(), 1f64.cos()]];
        let mut h = [[0.0; 2]; 2];
        for t in 0..2 {
            let e = lin([x.get(t, 0), x.get(t, 1)], &w.input);
            h[t] = [e[0] + pos[t][0], e[1] + pos[t][1]];
        }
        let layer = &w.layers[0];
        let a: Vec<[f64; 2]> = h.iter().map(|r| ln(*r)).collect();
        let q: Vec<_> = a.iter().map(|r| lin(*r, &layer.q)).collect();
        let k: Vec<_> = a.iter().map(|r| lin(*r, &layer.k)).collect();
        let v: Vec<_> = a.iter().map(|r| lin(*r, &layer.v)).collect();
        let mut h1 = [[0.0; 2]; 2];
        for t in 0..2 {
            let s: Vec<f64> = (0..2)
                .map(|u| (q[t][0] * k[u][0] + q[t][1] * k[u][1]) / 2f64.sqrt())
                .collect();
            let z = s[0].exp() + s[1].exp();
            let p = [s[0].exp() / z, s[1].exp() / z];
            let ctx = [p[0] * v[0][0] + p[1] * v[1][0], p[0] * v[0][1] + p[1] * v[1][1]];
            let o = lin(ctx, &layer.o);
            h1[t] = [h[t][0] + o[0], h[t][1] + o[1]];
        }
        for t in 0..2 {
            let b = ln(h1[t]);
            let f = lin(b, &layer.fc1);
            let g = [gelu(f[0]), gelu(f[1])];
            let out = lin(g, &layer.fc2);
            let want = [h1[t][0] + out[0], h1[t][1] + out[1]];
            for j in 0..2 {
                assert!((taps.taps[1].get(t, j) - want[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prefix_equals_leading_taps() {
        let w = EncoderWeights::init(&config(3, 2), 2).unwrap();
        let x = features(7, 3, 1);
        let (full, _) = encode(&x, &w, None).unwrap();
        for k in 0..=3 {
            let p = encode_prefix(&x, &w, k).unwrap();
            assert_eq!(p.taps[..], full.taps[..=k]);
        }
        assert!(encode_prefix(&x, &w, 4).is_err());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let w = EncoderWeights::init(&config(1, 2), 2).unwrap();
        assert!(matches!(encode(&features(3, 4, 0), &w, None), Err(Error::Shape(_))));
        assert!(matches!(encode(&features(3, 3, 0), &w, Some(&[true])), Err(Error::Shape(_))));
    }

    #[test]
    fn masked_ce_examples() {
        let k = 32;
        let uniform = Tensor::zeros(3, k);
        let loss = masked_ce_loss(&uniform, &[0, 5, 7], &[true, true, false]).unwrap();
        assert!((loss - (k as f64).ln()).abs() < 1e-12);

        let mut confident = Tensor::zeros(2, k);
        confident.set(0, 4, 100.0);
        confident.set(1, 9, 100.0);
        assert!(masked_ce_loss(&confident, &[4, 9], &[true, true]).unwrap() < 1e-30);

        let mut perturbed = confident.clone();
        perturbed.set(1, 0, 55.0);
        let a = masked_ce_loss(&confident, &[4, 9], &[true, false]).unwrap();
        let b = masked_ce_loss(&perturbed, &[4, 9], &[true, false]).unwrap();
        assert_eq!(a, b);
        assert!(matches!(masked_ce_loss(&uniform, &[0, 0, 0], &[false; 3]), Err(Error::EmptyMask)));
    }
}
