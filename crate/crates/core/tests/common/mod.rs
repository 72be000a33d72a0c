//! Test oracles and fixtures shared by the integration suites.
#![allow(dead_code)]

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use sslsv_core::{generate_synthetic_corpus, Manifest, SynthSpec, UtteranceRecord};

/// Threshold-sweep EER by direct counting.
///
/// Thresholds: one below every score, every midpoint between consecutive
/// distinct scores, one above every score. A target is rejected when its
/// score is below the threshold, a non-target accepted when at or above.
/// The EER is interpolated linearly at the first sweep point where
/// `FNR − FPR` turns non-negative.
pub fn brute_force_eer(targets: &[f64], nontargets: &[f64]) -> f64 {
    let mut distinct: Vec<f64> = targets.iter().chain(nontargets).copied().collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut thresholds = vec![distinct[0] - 1.0];
    thresholds.extend(distinct.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    thresholds.push(distinct[distinct.len() - 1] + 1.0);

    let rates = |tau: f64| {
        let fnr = targets.iter().filter(|&&s| s < tau).count() as f64 / targets.len() as f64;
        let fpr = nontargets.iter().filter(|&&s| s >= tau).count() as f64 / nontargets.len() as f64;
        (fnr, fpr)
    };
    let mut prev = rates(thresholds[0]);
    for &tau in &thresholds[1..] {
        let (fnr, fpr) = rates(tau);
        let d = fnr - fpr;
        if d == 0.0 {
            return fnr;
        }
        if d > 0.0 {
            let pd = prev.0 - prev.1;
            let a = -pd / (d - pd);
            return prev.0 + a * (fnr - prev.0);
        }
        prev = (fnr, fpr);
    }
    unreachable!("FNR reaches 1 and FPR 0 above the top score")
}

pub fn record(utt: &str, spk: &str, dur: f64) -> UtteranceRecord {
    UtteranceRecord {
        utt_id: utt.into(),
        speaker_id: spk.into(),
        duration_s: dur,
        path: format!("feats/{utt}.svf"),
    }
}

/// Manifest without feature files: speaker `i` gets `counts[i]` in-range
/// utterances of 10 s, plus the given out-of-range durations on speaker 0.
pub fn manifest_with_counts(counts: &[usize], out_of_range: &[f64]) -> Manifest {
    let mut records = Vec::new();
    for (s, &c) in counts.iter().enumerate() {
        let spk = format!("spk{s:03}");
        for u in 0..c {
            records.push(record(&format!("{spk}_u{u:02}"), &spk, 10.0));
        }
    }
    for (i, &d) in out_of_range.iter().enumerate() {
        records.push(record(&format!("spk000_x{i:02}"), "spk000", d));
    }
    Manifest::new("", records).unwrap()
}

/// Random manifest with 1–8 speakers, 1–6 utterances each, durations in
/// [6, 14] s quantized to 0.5 s so that boundary values occur.
pub fn random_manifest(rng: &mut impl Rng) -> Manifest {
    let n_spk = rng.random_range(1..=8);
    let mut records = Vec::new();
    for s in 0..n_spk {
        for u in 0..rng.random_range(1..=6) {
            let dur = 0.5 * rng.random_range(12..=28) as f64;
            records.push(record(&format!("s{s}u{u}"), &format!("s{s}"), dur));
        }
    }
    records.shuffle(rng);
    Manifest::new("", records).unwrap()
}

/// Synthetic corpus with trial-length utterances (8.4–11.6 s).
pub fn synth(
    dir: &Path,
    n_speakers: usize,
    utts: usize,
    noise: f64,
    mix: &[f64],
    seed: u64,
) -> Manifest {
    let spec = SynthSpec {
        n_speakers,
        utts_per_speaker: utts,
        layers: mix.len(),
        dim: 16,
        frames_range: (420, 580),
        speaker_scale: 1.0,
        frame_noise: noise,
        layer_mix: mix.to_vec(),
        seed,
    };
    generate_synthetic_corpus(&spec, dir).unwrap()
}

/// Keeps the records whose speaker passes `keep`.
pub fn filter_speakers(m: &Manifest, keep: impl Fn(&str) -> bool) -> Manifest {
    let records = m
        .records
        .iter()
        .filter(|r| keep(&r.speaker_id))
        .cloned()
        .collect();
    Manifest::new(m.base_dir.clone(), records).unwrap()
}
