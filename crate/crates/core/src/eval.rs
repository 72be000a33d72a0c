//! Trial scoring, equal error rate, zero-shot layer probing and the
//! comparison statistics used to summarise results across feature sets.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::features::Manifest;
use crate::pooling::{stats_pool, DEFAULT_EPS_STD};
use crate::tensor::{dot, norm};
use crate::trials::{Trial, TrialList};

pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm("cosine score"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// One score per trial.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet {
    pub scores: Vec<(Trial, f64)>,
    pub protocol: String,
}

impl ScoreSet {
    pub fn split(&self) -> (Vec<f64>, Vec<f64>) {
        let mut tar = Vec::new();
        let mut non = Vec::new();
        for (t, s) in &self.scores {
            if t.label {
                tar.push(*s);
            } else {
                non.push(*s);
            }
        }
        (tar, non)
    }

    /// Writes `<score> <label> <enroll> <test>` lines; scores use the
    /// shortest representation that parses back to the same `f64`.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::with_capacity(self.scores.len() * 48);
        for (t, s) in &self.scores {
            out.push_str(&format!(
                "{s} {} {} {}\n",
                u8::from(t.label),
                t.enroll_utt,
                t.test_utt
            ));
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut scores = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let err = |message: String| Error::Parse {
                path: path.into(),
                line: i + 1,
                message,
            };
            let f: Vec<&str> = line.split(' ').collect();
            if f.len() != 4 {
                return Err(err(format!("expected 4 fields, got {line:?}")));
            }
            let score: f64 = f[0]
                .parse()
                .map_err(|_| err(format!("bad score {:?}", f[0])))?;
            if !score.is_finite() {
                return Err(err("non-finite score".into()));
            }
            let label = match f[1] {
                "1" => true,
                "0" => false,
                other => return Err(err(format!("label must be 0 or 1, got {other:?}"))),
            };
            scores.push((
                Trial {
                    label,
                    enroll_utt: f[2].into(),
                    test_utt: f[3].into(),
                },
                score,
            ));
        }
        Ok(ScoreSet {
            scores,
            protocol: path.display().to_string(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Fraction in `[0, 1]`.
    pub eer: f64,
    pub threshold: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
    /// Layer index → EER, for zero-shot probing.
    pub per_layer: Option<BTreeMap<usize, f64>>,
    pub best_layer: Option<usize>,
}

impl EvalReport {
    /// Writes `metric,layer,value` rows.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        let mut row = |m: &str, l: String, v: String| {
            w.write_record([m, l.as_str(), v.as_str()])
                .map_err(|e| Error::csv(path, e))
        };
        row("metric", "layer".into(), "value".into())?;
        if let Some(per_layer) = &self.per_layer {
            for (l, e) in per_layer {
                row("eer", l.to_string(), e.to_string())?;
            }
        }
        let best = self.best_layer.map(|l| l.to_string()).unwrap_or_default();
        if self.best_layer.is_some() {
            row("best_layer", best.clone(), best.clone())?;
        }
        row("best_eer", best.clone(), self.eer.to_string())?;
        row("threshold", best, self.threshold.to_string())?;
        row("n_target", String::new(), self.n_target.to_string())?;
        row("n_nontarget", String::new(), self.n_nontarget.to_string())?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// `(eer, threshold)` from raw target and non-target scores.
///
/// At threshold `τ`, FNR is the fraction of targets scoring below `τ` and
/// FPR the fraction of non-targets scoring at or above `τ`. Operating points
/// are taken at every distinct score plus `+∞`; the EER is read off where
/// `FNR − FPR` changes sign, interpolating linearly between the two
/// adjacent points.
pub fn eer_from_scores(targets: &[f64], nontargets: &[f64]) -> Result<(f64, f64)> {
    if targets.is_empty() || nontargets.is_empty() {
        return Err(Error::Statistics(format!(
            "EER needs both classes, got {} target and {} non-target scores",
            targets.len(),
            nontargets.len()
        )));
    }
    if targets.iter().chain(nontargets).any(|s| !s.is_finite()) {
        return Err(Error::Statistics("non-finite score".into()));
    }
    let mut all: Vec<(f64, bool)> = targets
        .iter()
        .map(|&s| (s, true))
        .chain(nontargets.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (nt, nn) = (targets.len() as f64, nontargets.len() as f64);

    // Walk thresholds upward. Before consuming the scores equal to `τ`,
    // `below_t` targets are < τ and `at_or_above_n` non-targets are ≥ τ.
    let mut below_t = 0usize;
    let mut at_or_above_n = nontargets.len();
    let mut prev: Option<(f64, f64, f64)> = None; // (τ, fnr, fpr)
    let mut i = 0;
    loop {
        let (tau, fnr, fpr) = if i < all.len() {
            (all[i].0, below_t as f64 / nt, at_or_above_n as f64 / nn)
        } else {
            (f64::INFINITY, 1.0, 0.0)
        };
        let diff = fnr - fpr;
        if diff >= 0.0 {
            return Ok(match prev {
                None => (fnr, tau),
                Some(_) if diff == 0.0 => (fnr, tau),
                Some((p_tau, p_fnr, p_fpr)) => {
                    let p_diff = p_fnr - p_fpr;
                    let a = -p_diff / (diff - p_diff);
                    let eer = p_fnr + a * (fnr - p_fnr);
                    let thr = if tau.is_finite() {
                        p_tau + a * (tau - p_tau)
                    } else {
                        p_tau
                    };
                    (eer, thr)
                }
            });
        }
        prev = Some((tau, fnr, fpr));
        let current = all[i].0;
        while i < all.len() && all[i].0 == current {
            if all[i].1 {
                below_t += 1;
            } else {
                at_or_above_n -= 1;
            }
            i += 1;
        }
    }
}

pub fn compute_eer(scores: &ScoreSet) -> Result<EvalReport> {
    let (tar, non) = scores.split();
    let (eer, threshold) = eer_from_scores(&tar, &non)?;
    Ok(EvalReport {
        eer,
        threshold,
        n_target: tar.len(),
        n_nontarget: non.len(),
        per_layer: None,
        best_layer: None,
    })
}

/// Scores trials from per-utterance vectors with cosine similarity.
pub fn score_trials(trials: &TrialList, vectors: &BTreeMap<String, Vec<f64>>) -> Result<ScoreSet> {
    let lookup = |u: &str| {
        vectors
            .get(u)
            .ok_or_else(|| Error::Protocol(format!("no vector for utterance {u:?}")))
    };
    let scores = trials
        .trials
        .iter()
        .map(|t| {
            let s = cosine_score(lookup(&t.enroll_utt)?, lookup(&t.test_utt)?)?;
            Ok((t.clone(), s))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreSet {
        scores,
        protocol: trials.source.clone(),
    })
}

/// Applies `f` to the feature stack of every utterance referenced by
/// `trials`, in parallel, returning utterance id → result.
pub fn map_trial_utterances<T, F>(
    manifest: &Manifest,
    trials: &TrialList,
    f: F,
) -> Result<BTreeMap<String, T>>
where
    T: Send,
    F: Fn(&crate::features::FeatureStack) -> Result<T> + Sync,
{
    let index = manifest.index();
    let utts = trials.utterances();
    let records = utts
        .iter()
        .map(|u| {
            index
                .get(u)
                .map(|&i| &manifest.records[i])
                .ok_or_else(|| Error::Protocol(format!("utterance {u:?} not in manifest")))
        })
        .collect::<Result<Vec<_>>>()?;
    let results = records
        .par_iter()
        .map(|r| manifest.load_features(r).and_then(|s| f(&s)))
        .collect::<Result<Vec<T>>>()?;
    Ok(utts.into_iter().map(String::from).zip(results).collect())
}

/// Per-layer zero-shot score sets: each utterance is represented by the
/// mean and standard deviation of its layer-`l` frames.
pub fn zero_shot_scores(
    manifest: &Manifest,
    trials: &TrialList,
    layer: Option<usize>,
) -> Result<BTreeMap<usize, ScoreSet>> {
    let pooled = map_trial_utterances(manifest, trials, |stack| {
        let layers: Vec<usize> = match layer {
            Some(l) if l >= stack.layers() => {
                return Err(Error::Config(format!(
                    "layer {l} out of range for {} layers",
                    stack.layers()
                )))
            }
            Some(l) => vec![l],
            None => (0..stack.layers()).collect(),
        };
        layers
            .into_iter()
            .map(|l| Ok((l, stats_pool(&stack.layer_mat(l), DEFAULT_EPS_STD)?)))
            .collect::<Result<BTreeMap<usize, Vec<f64>>>>()
    })?;
    let mut layer_ids: Option<Vec<usize>> = None;
    for per in pooled.values() {
        let ids: Vec<usize> = per.keys().copied().collect();
        match &layer_ids {
            None => layer_ids = Some(ids),
            Some(prev) if *prev != ids => {
                return Err(Error::Shape("utterances differ in layer count".into()))
            }
            _ => {}
        }
    }
    let mut out = BTreeMap::new();
    for l in layer_ids.unwrap_or_default() {
        let vectors: BTreeMap<String, Vec<f64>> = pooled
            .iter()
            .map(|(u, per)| (u.clone(), per[&l].clone()))
            .collect();
        out.insert(l, score_trials(trials, &vectors)?);
    }
    Ok(out)
}

/// Zero-shot EER for one layer or all layers; the headline numbers are
/// those of the best (lowest-EER, earliest on ties) layer.
pub fn zero_shot_eval(
    manifest: &Manifest,
    trials: &TrialList,
    layer: Option<usize>,
) -> Result<EvalReport> {
    let sets = zero_shot_scores(manifest, trials, layer)?;
    report_from_layers(&sets)
}

pub fn report_from_layers(sets: &BTreeMap<usize, ScoreSet>) -> Result<EvalReport> {
    let mut per_layer = BTreeMap::new();
    let mut best: Option<(usize, EvalReport)> = None;
    for (&l, set) in sets {
        let r = compute_eer(set)?;
        per_layer.insert(l, r.eer);
        if best.as_ref().is_none_or(|(_, b)| r.eer < b.eer) {
            best = Some((l, r));
        }
    }
    let (l, mut report) = best.ok_or_else(|| Error::Statistics("no layers evaluated".into()))?;
    report.per_layer = Some(per_layer);
    report.best_layer = Some(l);
    Ok(report)
}

/// `100 · (baseline − value) / baseline`.
pub fn rel_improvement(baseline: f64, value: f64) -> Result<f64> {
    if !(baseline > 0.0) || !baseline.is_finite() {
        return Err(Error::Statistics(format!(
            "relative improvement needs a positive baseline, got {baseline}"
        )));
    }
    Ok(100.0 * (baseline - value) / baseline)
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rank correlation and its two-sided p-value from the
/// t-approximation with `n − 2` degrees of freedom.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(Error::Statistics(format!(
            "spearman needs equal lengths, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 3 {
        return Err(Error::Statistics("spearman needs n >= 3".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Statistics("non-finite input".into()));
    }
    let rho = pearson(&average_ranks(x), &average_ranks(y))
        .ok_or_else(|| Error::Statistics("constant input, rho undefined".into()))?;
    let df = (x.len() - 2) as f64;
    let p = if rho.abs() >= 1.0 {
        0.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Statistics(e.to_string()))?;
        2.0 * (1.0 - dist.cdf(t.abs()))
    };
    Ok((rho, p))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(tar: &[f64], non: &[f64]) -> ScoreSet {
        let mk = |label: bool, i: usize| Trial {
            label,
            enroll_utt: format!("e{i}"),
            test_utt: format!("t{i}"),
        };
        let mut scores: Vec<(Trial, f64)> = tar
            .iter()
            .enumerate()
            .map(|(i, &s)| (mk(true, i), s))
            .collect();
        scores.extend(non.iter().enumerate().map(|(i, &s)| (mk(false, i), s)));
        ScoreSet {
            scores,
            protocol: "test".into(),
        }
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_score(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_score(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        let c = cosine_score(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(matches!(
            cosine_score(&[0.0, 0.0], &[1.0, 1.0]),
            Err(Error::ZeroNorm(_))
        ));
    }

    #[test]
    fn cosine_scale_invariance() {
        let a = [0.3, -1.2, 2.5];
        let b = [1.1, 0.4, -0.7];
        let c0 = cosine_score(&a, &b).unwrap();
        let a2: Vec<f64> = a.iter().map(|v| v * 37.5).collect();
        assert!((cosine_score(&a2, &b).unwrap() - c0).abs() < 1e-12);
    }

    #[test]
    fn eer_examples() {
        assert_eq!(
            compute_eer(&set(&[0.9, 0.8], &[0.2, 0.1])).unwrap().eer,
            0.0
        );
        assert_eq!(
            compute_eer(&set(&[0.2, 0.1], &[0.9, 0.8])).unwrap().eer,
            1.0
        );
        let r = compute_eer(&set(&[0.9, 0.4], &[0.6, 0.1])).unwrap();
        assert_eq!(r.eer, 0.5);
        assert_eq!((r.n_target, r.n_nontarget), (2, 2));
    }

    #[test]
    fn eer_all_tied() {
        let r = compute_eer(&set(&[0.5, 0.5], &[0.5])).unwrap();
        assert!((r.eer - 0.5).abs() < 1e-15);
    }

    #[test]
    fn eer_interpolates() {
        // (FNR, FPR) at τ=0.5 is (1/3, 1/2) and at τ=0.7 is (2/3, 1/2);
        // FNR − FPR goes −1/6 → +1/6, so the crossing sits halfway.
        let r = compute_eer(&set(&[0.3, 0.5, 0.9], &[0.1, 0.7])).unwrap();
        assert!((r.eer - 0.5).abs() < 1e-12);
        assert!((r.threshold - 0.6).abs() < 1e-12);
    }

    #[test]
    fn eer_missing_class() {
        assert!(compute_eer(&set(&[0.5], &[])).is_err());
    }

    #[test]
    fn rel_improvement_examples() {
        assert_eq!(format!("{:.1}", rel_improvement(7.2, 4.4).unwrap()), "38.9");
        assert_eq!(
            format!("{:.1}", rel_improvement(7.2, 11.4).unwrap()),
            "-58.3"
        );
        assert_eq!(
            format!("{:.2}", rel_improvement(8_000_000.0, 199_000.0).unwrap()),
            "97.51"
        );
        assert_eq!(rel_improvement(3.3, 3.3).unwrap(), 0.0);
        assert!(rel_improvement(0.0, 1.0).is_err());
        assert!(rel_improvement(-1.0, 1.0).is_err());
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(
            average_ranks(&[10.0, 20.0, 20.0, 5.0]),
            vec![2.0, 3.5, 3.5, 1.0]
        );
    }

    #[test]
    fn spearman_extremes() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(
            spearman_rho(&x, &[2.0, 4.0, 8.0, 16.0, 32.0]).unwrap(),
            (1.0, 0.0)
        );
        assert_eq!(
            spearman_rho(&x, &[5.0, 4.0, 3.0, 2.0, 1.0]).unwrap().0,
            -1.0
        );
        assert!(spearman_rho(&x, &[1.0; 5]).is_err());
        assert!(spearman_rho(&x[..2], &x[..2]).is_err());
        assert!(spearman_rho(&x, &x[..4]).is_err());
    }

    #[test]
    fn spearman_symmetry() {
        let x = [0.3, 1.5, -2.0, 4.4, 0.0, 0.3];
        let y = [1.0, -1.0, 2.0, 3.0, 0.5, 0.7];
        let (a, pa) = spearman_rho(&x, &y).unwrap();
        let (b, pb) = spearman_rho(&y, &x).unwrap();
        assert_eq!((a, pa), (b, pb));
        assert!((-1.0..=1.0).contains(&a));
    }

    #[test]
    fn score_file_round_trip_is_exact() {
        let s = set(&[0.1 + 0.2, 1.0 / 3.0], &[-0.7071067811865476]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.txt");
        s.write(&p).unwrap();
        let back = ScoreSet::read(&p).unwrap();
        assert_eq!(back.scores, s.scores);
        fs::write(&p, "0.5 2 a b\n").unwrap();
        assert!(matches!(
            ScoreSet::read(&p),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}
