//! Fixtures shared by the criterion benchmarks.

use melcompress::compress::{prune_heads, HeadScore, HeadSelection};
use melcompress::corpus::Utterance;
use melcompress::encoder::{EncoderConfig, EncoderWeights};
use melcompress::numcore::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The default desk-scale encoder with random weights.
pub fn desk_encoder(seed: u64) -> EncoderWeights {
    EncoderWeights::init(&EncoderConfig::default(), seed).expect("default config is valid")
}

/// Remove `per_layer` heads from every block, lowest slot first.
pub fn head_pruned(mut weights: EncoderWeights, per_layer: usize) -> EncoderWeights {
    let scores: Vec<HeadScore> = (0..weights.depth())
        .flat_map(|layer| {
            (0..weights.config.heads).map(move |slot| HeadScore {
                layer,
                slot,
                head: slot,
                score: slot as f64,
            })
        })
        .collect();
    prune_heads(&mut weights, &scores, HeadSelection::PerLayerFixed(per_layer)).expect("heads remain");
    weights
}

/// Gaussian frames, `frames x dim`.
pub fn utterance(frames: usize, dim: usize, seed: u64) -> Utterance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Utterance::new(Tensor::randn(frames, dim, 1.0, &mut rng)).expect("non-empty and finite")
}
