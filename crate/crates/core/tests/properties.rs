use melcompress::compress::{percent_to_bp, target_live, WeightPruneSchedule};
use melcompress::corpus::{decode_features, encode_features, splice2, Utterance};
use melcompress::distill::kd_loss;
use melcompress::numcore::{adam_step, softmax_rows, AdamHyper, Parameter, Tensor};
use proptest::prelude::*;

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-5.0f64..5.0, r * c).prop_map(move |d| Tensor::from_rows(r, c, d))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masked_entries_stay_zero_through_adam(
        (values, grads, keep) in (1usize..40).prop_flat_map(|n| (
            prop::collection::vec(-1.0f64..1.0, n),
            prop::collection::vec(prop::collection::vec(-1.0f64..1.0, n), 1..6),
            prop::collection::vec(any::<bool>(), n),
        ))
    ) {
        let n = values.len();
        let mut p = Parameter::new(Tensor::row_vector(values));
        p.set_mask(Tensor::row_vector(keep.iter().map(|&k| f64::from(u8::from(k))).collect())).unwrap();
        for g in grads {
            p.zero_grad();
            p.accumulate_grad(&Tensor::row_vector(g));
            adam_step([&mut p], &AdamHyper { learning_rate: 0.1, ..AdamHyper::default() }).unwrap();
        }
        for i in 0..n {
            if !keep[i] {
                prop_assert_eq!(p.value.data()[i], 0.0);
            }
        }
    }

    #[test]
    fn softmax_is_shift_invariant(x in matrix(4, 7), shift in -50.0f64..50.0) {
        let shifted = Tensor::from_rows(x.rows(), x.cols(), x.data().iter().map(|v| v + shift).collect());
        let a = softmax_rows(&x, 1.0);
        let b = softmax_rows(&shifted, 1.0);
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
        for r in 0..a.rows() {
            prop_assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kd_loss_is_nonnegative_and_zero_on_self(
        (t, s) in (1usize..5, 2usize..6).prop_flat_map(|(r, c)| (
            prop::collection::vec(-4.0f64..4.0, r * c).prop_map(move |d| Tensor::from_rows(r, c, d)),
            prop::collection::vec(-4.0f64..4.0, r * c).prop_map(move |d| Tensor::from_rows(r, c, d)),
        )),
        tau in 0.5f64..4.0,
    ) {
        prop_assert!(kd_loss(&t, &s, tau).unwrap() >= -1e-12);
        prop_assert!(kd_loss(&t, &t, tau).unwrap().abs() < 1e-12);
    }

    #[test]
    fn feature_files_roundtrip(
        (rows, cols, data) in (1usize..20, 1usize..9).prop_flat_map(|(r, c)| (
            Just(r), Just(c), prop::collection::vec(-1e3f32..1e3, r * c),
        )),
        class in prop::option::of(0usize..10),
        with_states in any::<bool>(),
    ) {
        let mut u = Utterance::new(Tensor::from_rows(rows, cols, data.iter().map(|&v| f64::from(v)).collect())).unwrap();
        u.seq_class = class;
        if with_states {
            u.frame_states = Some((0..rows).map(|t| t % 3).collect());
        }
        prop_assert_eq!(decode_features(&encode_features(&u).unwrap()).unwrap(), u);
    }

    #[test]
    fn splicing_halves_frames_and_doubles_width(u in matrix(21, 5)) {
        let u = Utterance::new(u).unwrap();
        match splice2(&u) {
            Ok(s) => {
                prop_assert_eq!(s.frames(), u.frames() / 2);
                prop_assert_eq!(s.dim(), 2 * u.dim());
                for t in 0..s.frames() {
                    prop_assert_eq!(&s.features.row(t)[..u.dim()], u.features.row(2 * t));
                    prop_assert_eq!(&s.features.row(t)[u.dim()..], u.features.row(2 * t + 1));
                }
            }
            Err(_) => prop_assert!(u.frames() < 2),
        }
    }

    #[test]
    fn target_live_rounds_half_up(total in 0usize..1_000_000, percent_hundredths in 0u32..=10_000) {
        let bp = percent_to_bp(f64::from(percent_hundredths) / 100.0).unwrap();
        let live = target_live(total, bp);
        let exact = total as f64 * f64::from(bp) / 10_000.0;
        prop_assert!(live as f64 <= exact + 0.5 && live as f64 > exact - 0.5);
    }
}

#[test]
fn default_schedule_is_strictly_decreasing() {
    let trace = WeightPruneSchedule::default().trace_bp().unwrap();
    assert_eq!(trace[0], 10_000);
    assert!(trace.windows(2).all(|w| w[1] < w[0]));
}
