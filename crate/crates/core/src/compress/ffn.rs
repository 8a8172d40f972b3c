use crate::encoder::{EncoderWeights, LayerWeights};
use crate::error::{Error, Result};

fn unit_score(layer: &LayerWeights, j: usize) -> f64 {
    let fc1 = &layer.fc1.weight.value;
    let fc2 = &layer.fc2.weight.value;
    let into: f64 = (0..fc1.rows()).map(|r| fc1.get(r, j).abs()).sum();
    let out: f64 = fc2.row(j).iter().map(|v| v.abs()).sum();
    into + layer.fc1.bias.value.get(0, j).abs() + out
}

/// Per layer, per hidden unit j: L1 of FC1 column j with its bias plus L1
/// of FC2 row j.
pub fn ffn_unit_scores(weights: &EncoderWeights) -> Vec<Vec<f64>> {
    weights
        .layers
        .iter()
        .map(|l| (0..l.ffn_dim()).map(|j| unit_score(l, j)).collect())
        .collect()
}

/// Physically remove hidden units `units` of `layer`.
pub fn remove_ffn_units(weights: &mut EncoderWeights, layer: usize, units: &[usize]) -> Result<()> {
    let l = weights
        .layers
        .get_mut(layer)
        .ok_or_else(|| Error::contract(format!("no layer {layer}")))?;
    let f = l.ffn_dim();
    if units.iter().any(|&u| u >= f) {
        return Err(Error::contract(format!("FFN unit out of range in layer {layer}")));
    }
    let keep: Vec<usize> = (0..f).filter(|j| !units.contains(j)).collect();
    if keep.is_empty() {
        return Err(Error::contract(format!("refusing to remove every FFN unit of layer {layer}")));
    }
    l.fc1.keep_outputs(&keep);
    l.fc2.keep_inputs(&keep);
    Ok(())
}

/// Remove the `n_dims` lowest-scoring units of every layer (ties toward the
/// lower index). Returns the removed unit indices per layer, ascending.
pub fn prune_ffn(weights: &mut EncoderWeights, n_dims: usize) -> Result<Vec<Vec<usize>>> {
    for (l, layer) in weights.layers.iter().enumerate() {
        if n_dims > 0 && n_dims >= layer.ffn_dim() {
            return Err(Error::contract(format!(
                "cannot remove {n_dims} FFN dims from layer {l} with {}",
                layer.ffn_dim()
            )));
        }
    }
    let scores = ffn_unit_scores(weights);
    let mut removed = Vec::with_capacity(scores.len());
    for (l, s) in scores.iter().enumerate() {
        let mut order: Vec<usize> = (0..s.len()).collect();
        order.sort_by(|&a, &b| s[a].total_cmp(&s[b]).then(a.cmp(&b)));
        let mut units = order[..n_dims].to_vec();
        units.sort_unstable();
        if !units.is_empty() {
            remove_ffn_units(weights, l, &units)?;
        }
        removed.push(units);
    }
    Ok(removed)
}

/// Zero-mask FFN unit `unit` of `layer` without changing shapes.
pub fn mask_ffn_unit(weights: &mut EncoderWeights, layer: usize, unit: usize) -> Result<()> {
    let l = weights
        .layers
        .get_mut(layer)
        .ok_or_else(|| Error::contract(format!("no layer {layer}")))?;
    let f = l.ffn_dim();
    if unit >= f {
        return Err(Error::contract(format!("FFN unit {unit} out of range")));
    }
    for r in 0..l.fc1.fan_in() {
        l.fc1.weight.prune_entry(r * f + unit);
    }
    l.fc1.bias.prune_entry(unit);
    let d = l.fc2.fan_out();
    for c in 0..d {
        l.fc2.weight.prune_entry(unit * d + c);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::encoder::{encode, EncoderConfig};
    use crate::numcore::Tensor;

    fn model() -> EncoderWeights {
        let cfg = EncoderConfig {
            layers: 2,
            d_model: 8,
            heads: 2,
            ffn_dim: 12,
            input_dim: 3,
            clusters: 4,
            ..EncoderConfig::default()
        };
        let mut w = EncoderWeights::init(&cfg, 11).unwrap();
        for l in &mut w.layers {
            l.fc1.bias.value = Tensor::randn(1, 12, 0.1, &mut ChaCha8Rng::seed_from_u64(1));
        }
        w
    }

    fn input() -> Tensor {
        Tensor::randn(7, 3, 1.0, &mut ChaCha8Rng::seed_from_u64(2))
    }

    #[test]
    fn scores_match_entry_sums() {
        let w = model();
        let scores = ffn_unit_scores(&w);
        for (l, layer) in w.layers.iter().enumerate() {
            for j in 0..12 {
                let mut s = layer.fc1.bias.value.data()[j].abs();
                for (i, v) in layer.fc1.weight.value.data().iter().enumerate() {
                    if i % 12 == j {
                        s += v.abs();
                    }
                }
                for (i, v) in layer.fc2.weight.value.data().iter().enumerate() {
                    if i / 8 == j {
                        s += v.abs();
                    }
                }
                assert!((scores[l][j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_and_duplicated_units() {
        let mut w = model();
        mask_ffn_unit(&mut w, 0, 4).unwrap();
        let l = &mut w.layers[1];
        for r in 0..8 {
            let v = l.fc1.weight.value.get(r, 1);
            l.fc1.weight.value.set(r, 2, v);
            let v = l.fc2.weight.value.get(1, r);
            l.fc2.weight.value.set(2, r, v);
        }
        let b = l.fc1.bias.value.get(0, 1);
        l.fc1.bias.value.set(0, 2, b);
        let s = ffn_unit_scores(&w);
        assert_eq!(s[0][4], 0.0);
        assert_eq!(s[1][1], s[1][2]);
    }

    #[test]
    fn prune_zero_is_identity() {
        let mut w = model();
        let before = w.clone();
        prune_ffn(&mut w, 0).unwrap();
        assert_eq!(w, before);
    }

    #[test]
    fn dead_unit_removal_is_exact() {
        let mut w = model();
        for c in 0..8 {
            w.layers[0].fc2.weight.value.set(5, c, 0.0);
        }
        let before = encode(&input(), &w, None).unwrap();
        remove_ffn_units(&mut w, 0, &[5]).unwrap();
        assert_eq!(encode(&input(), &w, None).unwrap(), before);
    }

    #[test]
    fn removal_matches_masking() {
        let base = model();
        let mut masked = base.clone();
        let mut removed = base.clone();
        let pruned = prune_ffn(&mut removed, 3).unwrap();
        for (l, units) in pruned.iter().enumerate() {
            assert_eq!(units.len(), 3);
            for &u in units {
                mask_ffn_unit(&mut masked, l, u).unwrap();
            }
        }
        let (ta, la) = encode(&input(), &masked, None).unwrap();
        let (tb, lb) = encode(&input(), &removed, None).unwrap();
        assert!(la.max_abs_diff(&lb) <= 1e-10);
        assert!(ta.last().max_abs_diff(tb.last()) <= 1e-10);
        assert_eq!(removed.layers[0].ffn_dim(), 9);
    }

    #[test]
    fn too_many_dims_is_an_error() {
        assert!(prune_ffn(&mut model(), 12).is_err());
    }
}
