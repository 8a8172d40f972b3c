use rand::Rng;

use super::MaskingSpec;

/// Union of spans: each frame starts a span with probability
/// `spec.mask_prob`, covering `min(span_len, remaining)` frames.
pub fn sample_mask<R: Rng + ?Sized>(frames: usize, spec: &MaskingSpec, rng: &mut R) -> Vec<bool> {
    let mut mask = vec![false; frames];
    for t in 0..frames {
        if rng.random::<f64>() < spec.mask_prob {
            let end = (t + spec.span_len).min(frames);
            mask[t..end].iter_mut().for_each(|m| *m = true);
        }
    }
    mask
}

/// Sample until at least one frame is masked.
pub fn sample_nonempty_mask<R: Rng + ?Sized>(frames: usize, spec: &MaskingSpec, rng: &mut R) -> Vec<bool> {
    loop {
        let mask = sample_mask(frames, spec, rng);
        if mask.iter().any(|&m| m) {
            return mask;
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn tiny_probability_masks_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = MaskingSpec {
            mask_prob: 1e-12,
            span_len: 10,
        };
        assert!(sample_mask(1000, &spec, &mut rng).iter().all(|&m| !m));
    }

    #[test]
    fn spans_are_clipped_at_the_end() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = MaskingSpec {
            mask_prob: 0.999_999,
            span_len: 4,
        };
        assert_eq!(sample_mask(3, &spec, &mut rng), vec![true; 3]);
    }

    #[test]
    fn nonempty_mask_resamples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = MaskingSpec {
            mask_prob: 0.01,
            span_len: 1,
        };
        for _ in 0..20 {
            assert!(sample_nonempty_mask(5, &spec, &mut rng).iter().any(|&m| m));
        }
    }

    /// Exact mean and standard deviation of the masked fraction, from the
    /// joint probability that two frames both escape every span.
    fn coverage_moments(frames: usize, p: f64, len: usize) -> (f64, f64) {
        let keep = 1.0 - p;
        // Frame t can be covered by spans starting at max(0, t+1-len)..=t.
        let starts = |t: usize| (t + 1).min(len) as i32;
        let mean = (0..frames).map(|t| 1.0 - keep.powi(starts(t))).sum::<f64>() / frames as f64;
        let interior = 1.0 - keep.powi(len as i32);
        let mut var = frames as f64 * interior * (1.0 - interior);
        for k in 1..len {
            // Both frames unmasked: no span starts in a window of len + k.
            let both = 1.0 - 2.0 * keep.powi(len as i32) + keep.powi((len + k) as i32);
            var += 2.0 * (frames - k) as f64 * (both - interior * interior);
        }
        (mean, var.sqrt() / frames as f64)
    }

    #[test]
    fn coverage_matches_span_process() {
        for (seed, spec) in [
            (7, MaskingSpec { mask_prob: 0.07, span_len: 10 }),
            (8, MaskingSpec { mask_prob: 0.14, span_len: 5 }),
        ] {
            let frames = 100_000;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mask = sample_mask(frames, &spec, &mut rng);
            let frac = mask.iter().filter(|&&m| m).count() as f64 / frames as f64;
            let (mean, sd) = coverage_moments(frames, spec.mask_prob, spec.span_len);
            assert!((mean - spec.expected_coverage()).abs() < 1e-3);
            assert!((frac - mean).abs() <= 3.0 * sd, "{frac} vs {mean} +- {sd}");
        }
    }

    #[test]
    fn both_frame_periods_mask_similar_amounts() {
        let a = MaskingSpec { mask_prob: 0.07, span_len: 10 }.expected_coverage();
        let b = MaskingSpec { mask_prob: 0.14, span_len: 5 }.expected_coverage();
        assert!((a - 0.516).abs() < 1e-3 && (b - 0.530).abs() < 1e-3);
        assert!((a - b).abs() < 0.02);
    }
}
