use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cel_core::augment::{crop_two, mix_at_snr};
use cel_core::checkpoint::{Checkpoint, CheckpointHeader};
use cel_core::embedding::{norm, normalize, random_unit, EmbeddingBatch, SimilarityParams};
use cel_core::encoder::EncoderConfig;
use cel_core::eval::{det_points, eer_from_scores, min_dcf_from_scores, DcfParams, Trial};
use cel_core::features::{FeatureConfig, Waveform};
use cel_core::losses::{acont_loss, aprot_loss, uniformity_loss, KernelParam};
use cel_core::trainer::epoch_batches;

fn unit_batch(seed: u64, k: usize, m: usize) -> EmbeddingBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v1 = (0..k).map(|_| random_unit(&mut rng, m)).collect();
    let v2 = (0..k).map(|_| random_unit(&mut rng, m)).collect();
    EmbeddingBatch::new(v1, v2).unwrap()
}

fn scores() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(-5.0f64..5.0, 1..40),
        prop::collection::vec(-5.0f64..5.0, 1..40),
    )
}

proptest! {
    #[test]
    fn normalized_vectors_have_unit_norm(v in prop::collection::vec(-100.0f64..100.0, 1..32)) {
        prop_assume!(norm(&v) > 1e-6);
        let n = normalize(&v).unwrap();
        prop_assert!((norm(n.as_slice()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniformity_stays_in_bounds(seed in any::<u64>(), k in 2usize..10, m in 2usize..12, t in 0.05f64..10.0) {
        let out = uniformity_loss(&unit_batch(seed, k, m), KernelParam::new(t).unwrap()).unwrap();
        prop_assert!(out.value <= 1e-12 && out.value >= -4.0 * t - 1e-12);
    }

    #[test]
    fn contrastive_losses_are_positive_and_finite(
        seed in any::<u64>(), k in 2usize..10, m in 2usize..12, w in 0.01f64..50.0, b in -20.0f64..20.0
    ) {
        let batch = unit_batch(seed, k, m);
        let p = SimilarityParams::new(w, b).unwrap();
        for v in [aprot_loss(&batch, p).unwrap().value, acont_loss(&batch, p).unwrap().value] {
            prop_assert!(v.is_finite() && v > 0.0);
        }
    }

    #[test]
    fn eer_and_dcf_lie_in_unit_interval((t, n) in scores()) {
        let (e, _) = eer_from_scores(&t, &n).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        // accepting or rejecting everything costs exactly the normalizer
        let (d, _) = min_dcf_from_scores(&t, &n, DcfParams::default()).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&d));
    }

    #[test]
    fn metrics_ignore_monotone_rescaling((t, n) in scores(), a in 0.1f64..10.0, c in -3.0f64..3.0) {
        let f = |v: &[f64]| v.iter().map(|x| a * x + c).collect::<Vec<_>>();
        prop_assert_eq!(eer_from_scores(&t, &n).unwrap().0, eer_from_scores(&f(&t), &f(&n)).unwrap().0);
        let p = DcfParams::default();
        prop_assert_eq!(min_dcf_from_scores(&t, &n, p).unwrap().0, min_dcf_from_scores(&f(&t), &f(&n), p).unwrap().0);
    }

    #[test]
    fn det_curve_is_a_monotone_staircase((t, n) in scores()) {
        let trials: Vec<Trial> = t.iter().map(|&s| (true, s)).chain(n.iter().map(|&s| (false, s)))
            .map(|(is_target, s)| Trial { score: Some(s), ..Trial::new(is_target, "a", "b") })
            .collect();
        let det = det_points(&trials).unwrap();
        prop_assert_eq!(det.first().copied(), Some((1.0, 0.0)));
        prop_assert_eq!(det.last().copied(), Some((0.0, 1.0)));
        for w in det.windows(2) {
            prop_assert!(w[1].0 <= w[0].0 && w[1].1 >= w[0].1);
        }
    }

    #[test]
    fn batches_never_repeat_a_speaker(speakers in 2usize..20, per in 1usize..6, k in 2usize..8, seed in any::<u64>()) {
        prop_assume!(k <= speakers);
        let keys: Vec<String> = (0..speakers * per).map(|i| format!("s{}", i % speakers)).collect();
        let batches = epoch_batches(&keys, k, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut seen = std::collections::HashSet::new();
        for b in &batches {
            prop_assert_eq!(b.len(), k);
            let distinct: std::collections::HashSet<_> = b.iter().map(|&i| &keys[i]).collect();
            prop_assert_eq!(distinct.len(), k);
            for &i in b {
                prop_assert!(seen.insert(i), "utterance {} used twice in one epoch", i);
            }
        }
    }

    #[test]
    fn crops_stay_inside_the_utterance(len in 1usize..5000, crop in 1usize..5000, seed in any::<u64>()) {
        let w = Waveform::new((0..len).map(|i| i as f64).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match crop_two(&w, "u", crop, false, &mut rng) {
            Ok(pair) => {
                prop_assert!(crop <= len);
                for (c, o) in [(&pair.crop1, pair.offsets.0), (&pair.crop2, pair.offsets.1)] {
                    prop_assert_eq!(c.len(), crop);
                    prop_assert!(o + crop <= len);
                    prop_assert_eq!(c.samples[0], o as f64);
                }
            }
            Err(_) => prop_assert!(crop > len),
        }
    }

    #[test]
    fn frame_count_matches_the_framing_formula(len in 0usize..50_000) {
        let cfg = FeatureConfig::default();
        let expected = if len < 400 { 0 } else { (len - 400) / 160 + 1 };
        prop_assert_eq!(cfg.frame_count(len), expected);
        if expected > 0 {
            prop_assert!(cfg.samples_for_frames(expected) <= len);
        }
    }

    #[test]
    fn noise_is_mixed_at_the_requested_snr(seed in any::<u64>(), snr in -5.0f64..30.0) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Waveform::new((0..2000).map(|_| rng.random_range(-0.05..0.05)).collect());
        let noise: Vec<f64> = (0..2000).map(|_| rng.random_range(-0.05..0.05)).collect();
        let mix = mix_at_snr(&s, &noise, snr).unwrap();
        prop_assume!(mix.clipped_fraction == 0.0);
        let ps: f64 = s.samples.iter().map(|x| x * x).sum();
        let pn: f64 = mix.waveform.samples.iter().zip(&s.samples).map(|(m, x)| (m - x).powi(2)).sum();
        prop_assert!((10.0 * (ps / pn).log10() - snr).abs() < 0.01);
    }

    #[test]
    fn checkpoints_round_trip(blocks in prop::collection::vec(prop::collection::vec(any::<f64>(), 0..20), 0..5), epoch in 0usize..1000) {
        let mut ck = Checkpoint::new(CheckpointHeader {
            stage: "pretrain".into(),
            epoch,
            encoder: EncoderConfig::default(),
            meta: Default::default(),
            features: None,
        });
        for (i, b) in blocks.iter().enumerate() {
            ck.push(&format!("b{i}"), b.clone());
        }
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back.header, ck.header);
        prop_assert_eq!(back.blocks.len(), ck.blocks.len());
        for ((na, a), (nb, b)) in back.blocks.iter().zip(&ck.blocks) {
            prop_assert_eq!(na, nb);
            prop_assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }
    }
}
