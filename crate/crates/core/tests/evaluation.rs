mod common;

use common::{brute_force_eer, synth};
use proptest::prelude::*;
use sslsv_core::eval::{eer_from_scores, zero_shot_scores};
use sslsv_core::{build_trials, compute_eer, cosine_score, ScoreSet};

fn scores_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    // Coarse grids force ties, the continuous branch avoids them.
    let score = prop_oneof![(0i32..8).prop_map(|v| v as f64 / 4.0), -3.0f64..3.0,];
    (
        prop::collection::vec(score.clone(), 1..100),
        prop::collection::vec(score, 1..100),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn eer_matches_threshold_sweep((tar, non) in scores_strategy()) {
        let (eer, _) = eer_from_scores(&tar, &non).unwrap();
        prop_assert!((eer - brute_force_eer(&tar, &non)).abs() <= 1e-9);
        prop_assert!((0.0..=1.0).contains(&eer));
    }

    #[test]
    fn eer_invariant_to_increasing_transform((tar, non) in scores_strategy()) {
        let f = |v: &Vec<f64>| v.iter().map(|s| (0.7 * s).exp() + 2.0).collect::<Vec<_>>();
        let (a, _) = eer_from_scores(&tar, &non).unwrap();
        let (b, _) = eer_from_scores(&f(&tar), &f(&non)).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn cosine_ignores_positive_scale(
        a in prop::collection::vec(-5.0f64..5.0, 3),
        b in prop::collection::vec(-5.0f64..5.0, 3),
        k in 0.01f64..100.0,
    ) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        let scaled: Vec<f64> = a.iter().map(|v| v * k).collect();
        let c = cosine_score(&a, &b).unwrap();
        prop_assert!((c - cosine_score(&scaled, &b).unwrap()).abs() <= 1e-12);
        prop_assert!((-1.0..=1.0).contains(&c));
    }
}

#[test]
fn silent_layer_scores_at_chance() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), 12, 8, 1.0, &[0.0, 1.0], 21);
    let trials = build_trials(&m, 8.0, 12.0, 5, 3).unwrap();
    assert!(trials.len() >= 500);
    let sets = zero_shot_scores(&m, &trials, None).unwrap();
    let chance = compute_eer(&sets[&0]).unwrap().eer;
    let signal = compute_eer(&sets[&1]).unwrap().eer;
    assert!((chance - 0.5).abs() <= 0.05, "silent layer EER {chance}");
    assert!(signal < 0.05, "signal layer EER {signal}");
}

#[test]
fn noiseless_corpus_is_perfect_on_signal_layers() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), 5, 4, 0.0, &[0.0, 0.5, 1.0], 4);
    let trials = build_trials(&m, 8.0, 12.0, 5, 0).unwrap();
    let sets = zero_shot_scores(&m, &trials, None).unwrap();
    for l in [1, 2] {
        assert_eq!(compute_eer(&sets[&l]).unwrap().eer, 0.0, "layer {l}");
    }
}

#[test]
fn zero_shot_eer_falls_with_frame_noise() {
    let mut eers = Vec::new();
    for noise in [2.0, 16.0, 64.0] {
        let dir = tempfile::tempdir().unwrap();
        let m = synth(dir.path(), 10, 6, noise, &[1.0], 8);
        let trials = build_trials(&m, 8.0, 12.0, 5, 8).unwrap();
        eers.push(
            compute_eer(&zero_shot_scores(&m, &trials, Some(0)).unwrap()[&0])
                .unwrap()
                .eer,
        );
    }
    assert!(eers[0] <= eers[1] && eers[1] <= eers[2], "{eers:?}");
    assert!(eers[2] > eers[0]);
}

#[test]
fn zero_shot_ignores_global_feature_scale() {
    // Scaling both generator parameters by 4 scales every feature exactly.
    let (d1, d4) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let base = synth(d1.path(), 6, 5, 3.0, &[0.0, 1.0], 9);
    let spec = sslsv_core::SynthSpec {
        n_speakers: 6,
        utts_per_speaker: 5,
        layers: 2,
        dim: 16,
        frames_range: (420, 580),
        speaker_scale: 4.0,
        frame_noise: 12.0,
        layer_mix: vec![0.0, 1.0],
        seed: 9,
    };
    let scaled = sslsv_core::generate_synthetic_corpus(&spec, d4.path()).unwrap();
    let trials = build_trials(&base, 8.0, 12.0, 5, 1).unwrap();
    let a = zero_shot_scores(&base, &trials, None).unwrap();
    let b = zero_shot_scores(&scaled, &trials, None).unwrap();
    for l in 0..2 {
        let (ea, eb) = (
            compute_eer(&a[&l]).unwrap().eer,
            compute_eer(&b[&l]).unwrap().eer,
        );
        assert!((ea - eb).abs() <= 1e-12, "layer {l}: {ea} vs {eb}");
    }
}

#[test]
fn score_files_recompute_to_the_same_eer() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(&dir.path().join("c"), 6, 5, 8.0, &[0.3, 1.0], 2);
    let trials = build_trials(&m, 8.0, 12.0, 5, 2).unwrap();
    for (l, set) in zero_shot_scores(&m, &trials, None).unwrap() {
        let path = dir.path().join(format!("s{l}.txt"));
        set.write(&path).unwrap();
        let back = ScoreSet::read(&path).unwrap();
        let (tar, non) = back.split();
        let eer = compute_eer(&set).unwrap().eer;
        assert_eq!(brute_force_eer(&tar, &non), eer);
        assert_eq!(compute_eer(&back).unwrap().eer, eer);
    }
}
