//! Verification trial lists and nested speaker subsets.
//!
//! The trial file format is one trial per line,
//! `<label> <enroll_utt> <test_utt>`, single-space separated, with label
//! `1` for same-speaker and `0` for different-speaker pairs.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::Manifest;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Trial {
    pub label: bool,
    pub enroll_utt: String,
    pub test_utt: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrialList {
    pub trials: Vec<Trial>,
    pub source: String,
    pub seed: u64,
}

impl TrialList {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn n_target(&self) -> usize {
        self.trials.iter().filter(|t| t.label).count()
    }

    pub fn n_nontarget(&self) -> usize {
        self.trials.len() - self.n_target()
    }

    /// Utterance ids referenced by the list, in first-seen order.
    pub fn utterances(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for t in &self.trials {
            for u in [t.enroll_utt.as_str(), t.test_utt.as_str()] {
                if seen.insert(u) {
                    out.push(u);
                }
            }
        }
        out
    }

    /// Concatenates lists built independently (no cross-list pairs).
    pub fn concat(lists: Vec<TrialList>) -> TrialList {
        let source = lists
            .iter()
            .map(|l| l.source.as_str())
            .collect::<Vec<_>>()
            .join("+");
        let seed = lists.first().map_or(0, |l| l.seed);
        TrialList {
            trials: lists.into_iter().flat_map(|l| l.trials).collect(),
            source,
            seed,
        }
    }
}

/// Builds a trial list: keep utterances with `min_s < duration < max_s`,
/// form all unordered pairs, keep every positive and sample
/// `min(#negatives, neg_per_pos · #positives)` negatives uniformly without
/// replacement.
///
/// Positives come first in manifest order, followed by negatives in draw
/// order.
pub fn build_trials(
    manifest: &Manifest,
    min_s: f64,
    max_s: f64,
    neg_per_pos: usize,
    seed: u64,
) -> Result<TrialList> {
    if !(min_s < max_s) {
        return Err(Error::Config(format!(
            "duration bounds must satisfy min < max, got {min_s} and {max_s}"
        )));
    }
    if neg_per_pos == 0 {
        return Err(Error::Config("neg_per_pos must be >= 1".into()));
    }
    let kept: Vec<_> = manifest
        .records
        .iter()
        .filter(|r| min_s < r.duration_s && r.duration_s < max_s)
        .collect();
    if kept.len() < 2 {
        return Err(Error::Protocol(format!(
            "{} utterance(s) within ({min_s}, {max_s}) s; at least 2 required",
            kept.len()
        )));
    }

    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (i, a) in kept.iter().enumerate() {
        for b in &kept[i + 1..] {
            let trial = Trial {
                label: a.speaker_id == b.speaker_id,
                enroll_utt: a.utt_id.clone(),
                test_utt: b.utt_id.clone(),
            };
            if trial.label {
                positives.push(trial);
            } else {
                negatives.push(trial);
            }
        }
    }
    if positives.is_empty() {
        return Err(Error::Protocol(
            "no same-speaker pairs survive the duration filter".into(),
        ));
    }

    let wanted = neg_per_pos.saturating_mul(positives.len());
    let take = wanted.min(negatives.len());
    if take < wanted {
        log::warn!(
            "only {} negative pairs available, {} requested for a 1:{neg_per_pos} ratio",
            negatives.len(),
            wanted
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let drawn = index::sample(&mut rng, negatives.len(), take);
    let mut slots: Vec<Option<Trial>> = negatives.into_iter().map(Some).collect();
    let mut trials = positives;
    for i in drawn.iter() {
        trials.push(slots[i].take().expect("indices drawn without replacement"));
    }
    Ok(TrialList {
        trials,
        source: manifest.identity(),
        seed,
    })
}

fn round_half_away(x: f64) -> usize {
    // f64::round already rounds half away from zero.
    x.round() as usize
}

/// Nested speaker subsets: one manifest per fraction, each speaker set
/// contained in the next. Speakers are shuffled once with `seed` and the
/// first `round(fraction · n)` (at least 1) are kept.
pub fn subset_speakers(manifest: &Manifest, fractions: &[f64], seed: u64) -> Result<Vec<Manifest>> {
    if manifest.records.is_empty() {
        return Err(Error::Manifest("empty manifest".into()));
    }
    if fractions.is_empty() {
        return Err(Error::Config("at least one fraction required".into()));
    }
    for (i, &f) in fractions.iter().enumerate() {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!("fraction {f} outside (0, 1]")));
        }
        if i > 0 && f <= fractions[i - 1] {
            return Err(Error::Config(
                "fractions must be strictly increasing".into(),
            ));
        }
    }
    let mut speakers = manifest.speakers();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    speakers.shuffle(&mut rng);
    let n = speakers.len();
    fractions
        .iter()
        .map(|&f| {
            let k = round_half_away(f * n as f64).clamp(1, n);
            let chosen: BTreeSet<&str> = speakers[..k].iter().map(String::as_str).collect();
            let records = manifest
                .records
                .iter()
                .filter(|r| chosen.contains(r.speaker_id.as_str()))
                .cloned()
                .collect();
            Manifest::new(manifest.base_dir.clone(), records)
        })
        .collect()
}

pub fn write_trials(list: &TrialList, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::with_capacity(list.trials.len() * 32);
    for t in &list.trials {
        out.push(if t.label { '1' } else { '0' });
        out.push(' ');
        out.push_str(&t.enroll_utt);
        out.push(' ');
        out.push_str(&t.test_utt);
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_trials(path: impl AsRef<Path>) -> Result<TrialList> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let trials = parse_trials(path, &text)?;
    if trials.is_empty() {
        log::warn!("{}: empty trial list", path.display());
    }
    Ok(TrialList {
        trials,
        source: path.display().to_string(),
        seed: 0,
    })
}

fn parse_trials(path: &Path, text: &str) -> Result<Vec<Trial>> {
    let mut trials = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |message: String| Error::Parse {
            path: path.into(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split(' ').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(err(format!(
                "expected `<label> <enroll> <test>`, got {line:?}"
            )));
        }
        let label = match fields[0] {
            "1" => true,
            "0" => false,
            other => return Err(err(format!("label must be 0 or 1, got {other:?}"))),
        };
        if fields[1] == fields[2] {
            return Err(err("enroll and test utterance are identical".into()));
        }
        trials.push(Trial {
            label,
            enroll_utt: fields[1].to_string(),
            test_utt: fields[2].to_string(),
        });
    }
    Ok(trials)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::UtteranceRecord;

    fn manifest(spec: &[(&str, &str, f64)]) -> Manifest {
        let records = spec
            .iter()
            .map(|&(u, s, d)| UtteranceRecord {
                utt_id: u.into(),
                speaker_id: s.into(),
                duration_s: d,
                path: format!("{u}.svf"),
            })
            .collect();
        Manifest::new("/nonexistent", records).unwrap()
    }

    #[test]
    fn single_speaker_gives_positives_only() {
        let m = manifest(&[("a", "s", 9.0), ("b", "s", 10.0), ("c", "s", 11.0)]);
        let l = build_trials(&m, 8.0, 12.0, 5, 0).unwrap();
        assert_eq!(l.len(), 3);
        assert!(l.trials.iter().all(|t| t.label));
    }

    #[test]
    fn strict_duration_bounds() {
        let m = manifest(&[
            ("a", "s", 8.0),
            ("b", "s", 12.0),
            ("c", "s", 9.0),
            ("d", "s", 11.9),
        ]);
        let l = build_trials(&m, 8.0, 12.0, 5, 0).unwrap();
        assert_eq!(l.trials.len(), 1);
        assert_eq!(l.trials[0].enroll_utt, "c");
    }

    #[test]
    fn filter_and_positive_errors() {
        let m = manifest(&[("a", "s", 9.0), ("b", "t", 13.0)]);
        assert!(matches!(
            build_trials(&m, 8.0, 12.0, 5, 0),
            Err(Error::Protocol(_))
        ));
        let m = manifest(&[("a", "s", 9.0), ("b", "t", 10.0)]);
        assert!(matches!(
            build_trials(&m, 8.0, 12.0, 5, 0),
            Err(Error::Protocol(_))
        ));
        assert!(build_trials(&m, 12.0, 8.0, 5, 0).is_err());
        assert!(build_trials(&m, 8.0, 12.0, 0, 0).is_err());
    }

    #[test]
    fn deterministic_and_ordered() {
        let spec: Vec<(String, String, f64)> = (0..30)
            .map(|i| (format!("u{i}"), format!("s{}", i % 6), 10.0))
            .collect();
        let refs: Vec<(&str, &str, f64)> = spec
            .iter()
            .map(|(a, b, c)| (a.as_str(), b.as_str(), *c))
            .collect();
        let m = manifest(&refs);
        let a = build_trials(&m, 8.0, 12.0, 2, 11).unwrap();
        let b = build_trials(&m, 8.0, 12.0, 2, 11).unwrap();
        assert_eq!(a, b);
        let p = a.n_target();
        assert_eq!(p, 6 * 10);
        assert_eq!(a.n_nontarget(), 2 * p);
        assert!(a.trials[..p].iter().all(|t| t.label));
        assert!(a.trials[p..].iter().all(|t| !t.label));
        let c = build_trials(&m, 8.0, 12.0, 2, 12).unwrap();
        assert_ne!(a.trials[p..], c.trials[p..]);
    }

    #[test]
    fn nested_subsets() {
        let spec: Vec<(String, String, f64)> = (0..20)
            .map(|i| (format!("u{i}"), format!("s{}", i % 10), 10.0))
            .collect();
        let refs: Vec<(&str, &str, f64)> = spec
            .iter()
            .map(|(a, b, c)| (a.as_str(), b.as_str(), *c))
            .collect();
        let m = manifest(&refs);
        let subs = subset_speakers(&m, &[0.2, 0.6, 1.0], 5).unwrap();
        let sizes: Vec<usize> = subs.iter().map(|s| s.speakers().len()).collect();
        assert_eq!(sizes, vec![2, 6, 10]);
        for w in subs.windows(2) {
            let a: BTreeSet<_> = w[0].speakers().into_iter().collect();
            let b: BTreeSet<_> = w[1].speakers().into_iter().collect();
            assert!(a.is_subset(&b));
        }
        assert_eq!(subs[2].records, m.records);
        assert_eq!(subset_speakers(&m, &[0.2, 0.6, 1.0], 5).unwrap(), subs);
        let tiny = subset_speakers(&m, &[0.01], 5).unwrap();
        assert_eq!(tiny[0].speakers().len(), 1);
        assert!(subset_speakers(&m, &[0.6, 0.2], 5).is_err());
        assert!(subset_speakers(&m, &[0.0], 5).is_err());
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        assert_eq!(round_half_away(2.5), 3);
        assert_eq!(round_half_away(0.5), 1);
        assert_eq!(round_half_away(1.49), 1);
    }

    #[test]
    fn trial_file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.txt");
        let list = TrialList {
            trials: vec![
                Trial {
                    label: true,
                    enroll_utt: "a".into(),
                    test_utt: "b".into(),
                },
                Trial {
                    label: false,
                    enroll_utt: "a".into(),
                    test_utt: "c".into(),
                },
            ],
            source: p.display().to_string(),
            seed: 0,
        };
        write_trials(&list, &p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "1 a b\n0 a c\n");
        assert_eq!(read_trials(&p).unwrap().trials, list.trials);

        fs::write(&p, "2 a b\n").unwrap();
        match read_trials(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
        fs::write(&p, "1 a b\n1 a\n").unwrap();
        assert!(matches!(read_trials(&p), Err(Error::Parse { line: 2, .. })));

        fs::write(&p, "").unwrap();
        assert!(read_trials(&p).unwrap().is_empty());
    }
}
