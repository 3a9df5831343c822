use avsr_core::harness::noise::power;
use avsr_core::harness::{edit_distance, mix_at_snr};
use avsr_core::numerics::Tensor;
use avsr_core::objectives::kmeans::standardize_columns;
use avsr_core::objectives::{kmeans, masked_prediction_loss, span_mask, MaskSpec, Vocab};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tokens() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..4, 0..12)
}

fn signal(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, n).prop_filter("audible", |x| power(x) > 1e-6)
}

proptest! {
    #[test]
    fn edit_counts_are_consistent(r in tokens(), h in tokens()) {
        let c = edit_distance(&r, &h);
        prop_assert_eq!(c.n_ref, r.len());
        // every hypothesis token is a match, a substitution or an insertion
        prop_assert_eq!(h.len() + c.deletions, r.len() + c.insertions);
        prop_assert!(c.errors() >= r.len().abs_diff(h.len()));
        prop_assert!(c.errors() <= r.len().max(h.len()));
        prop_assert_eq!(c.errors(), edit_distance(&h, &r).errors());
    }

    #[test]
    fn edit_distance_is_a_metric(a in tokens(), b in tokens(), c in tokens()) {
        prop_assert_eq!(edit_distance(&a, &a).errors(), 0);
        let ab = edit_distance(&a, &b).errors();
        prop_assert_eq!(ab == 0, a == b);
        prop_assert!(edit_distance(&a, &c).errors() <= ab + edit_distance(&b, &c).errors());
    }

    #[test]
    fn mixing_hits_any_target(
        (speech, noise) in (8usize..200).prop_flat_map(|n| (signal(n), signal(n / 2 + 1))),
        snr in -10.0f64..30.0,
    ) {
        let mixed = mix_at_snr(&speech, &noise, snr).unwrap();
        prop_assert_eq!(mixed.len(), speech.len());
        let residual: Vec<f64> = mixed.iter().zip(&speech).map(|(m, s)| m - s).collect();
        let measured = 10.0 * (power(&speech) / power(&residual)).log10();
        prop_assert!((measured - snr).abs() < 1e-9);
    }

    #[test]
    fn span_mask_is_a_union_of_spans(t in 1usize..80, span in 1usize..12, p in 0.0f64..1.0, seed in any::<u64>()) {
        prop_assume!(span <= t);
        let spec = MaskSpec { mask_prob: p, span_len: span };
        let mask = span_mask(t, &spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(mask.len(), t);
        // runs shorter than a span can only be clipped at the end
        let mut i = 0;
        while i < t {
            if mask[i] {
                let start = i;
                while i < t && mask[i] {
                    i += 1;
                }
                prop_assert!(i - start >= span || i == t);
            }
            i += 1;
        }
    }

    #[test]
    fn unmasked_logits_do_not_move_the_loss(
        logits in prop::collection::vec(-3.0f64..3.0, 24),
        noise in prop::collection::vec(-3.0f64..3.0, 24),
        mask in prop::collection::vec(any::<bool>(), 6),
        labels in prop::collection::vec(0usize..4, 6),
    ) {
        let a = Tensor::new([6, 4], logits.clone()).unwrap();
        let mut shifted = logits;
        for (i, m) in mask.iter().enumerate() {
            if !m {
                for j in 0..4 {
                    shifted[i * 4 + j] += noise[i * 4 + j];
                }
            }
        }
        let b = Tensor::new([6, 4], shifted).unwrap();
        let la = masked_prediction_loss(&a, &labels, &mask).unwrap();
        let lb = masked_prediction_loss(&b, &labels, &mask).unwrap();
        prop_assert_eq!(la.loss, lb.loss);
        prop_assert_eq!(la.empty_mask, !mask.iter().any(|&m| m));
        prop_assert!(la.loss >= 0.0);
    }

    #[test]
    fn kmeans_labels_are_nearest_and_inertia_never_rises(
        data in prop::collection::vec(-5.0f64..5.0, 60),
        k in 1usize..6,
        seed in any::<u64>(),
    ) {
        let x = Tensor::new([20, 3], data).unwrap();
        let r = kmeans(&x, k, 20, seed).unwrap();
        for w in r.history.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
        }
        let d = |i: usize, j: usize| -> f64 {
            x.row(i).iter().zip(r.centroids.row(j)).map(|(a, b)| (a - b).powi(2)).sum()
        };
        let mut inertia = 0.0;
        for (i, &l) in r.labels.iter().enumerate() {
            for j in 0..k {
                prop_assert!(d(i, l) <= d(i, j) + 1e-9);
            }
            inertia += d(i, l);
        }
        prop_assert!((inertia - r.inertia).abs() < 1e-9 * (1.0 + inertia));
    }

    #[test]
    fn standardized_columns_have_zero_mean_unit_variance(data in prop::collection::vec(-50.0f64..50.0, 40)) {
        let z = standardize_columns(&Tensor::new([10, 4], data).unwrap());
        for j in 0..4 {
            let col: Vec<f64> = (0..10).map(|i| z.at2(i, j)).collect();
            let mean = col.iter().sum::<f64>() / 10.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 10.0;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!(var < 1e-12 || (var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn character_vocab_round_trips(words in prop::collection::vec("[a-z ]{1,12}", 1..5)) {
        let vocab = Vocab::characters(words.iter().map(String::as_str));
        for w in &words {
            prop_assert_eq!(&vocab.decode(&vocab.encode(w)), w);
        }
    }
}
