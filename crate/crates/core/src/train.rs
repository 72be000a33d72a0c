//! Speaker-classification training of the embedding head with an
//! additive-margin softmax and AdamW.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eval::{compute_eer, map_trial_utterances, score_trials, EvalReport, ScoreSet};
use crate::features::Manifest;
use crate::head::{load_tensors, save_tensors, HeadConfig, HeadParams};
use crate::tensor::{dot, norm, softmax, Mat};
use crate::trials::TrialList;

pub const DEFAULT_SCALE: f64 = 30.0;
pub const DEFAULT_MARGIN: f64 = 0.4;
const CLASS_WEIGHT_TENSOR: &str = "amsoftmax.weight";

#[derive(Clone, Debug, PartialEq)]
pub struct AmSoftmaxParams {
    /// `n_speakers × embed_dim`
    pub class_weights: Mat,
    pub scale: f64,
    pub margin: f64,
}

impl AmSoftmaxParams {
    /// Rows drawn from a standard normal and scaled to unit length.
    pub fn init(
        n_classes: usize,
        embed_dim: usize,
        scale: f64,
        margin: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mut w = Mat::zeros(n_classes, embed_dim);
        for r in 0..n_classes {
            let row = w.row_mut(r);
            for v in row.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let n = norm(row);
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        AmSoftmaxParams {
            class_weights: w,
            scale,
            margin,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AmSoftmaxOutput {
    pub loss: f64,
    pub grad_embedding: Vec<f64>,
    pub grad_weights: Mat,
}

/// `−log( e^{s(cos θ_y − m)} / (e^{s(cos θ_y − m)} + Σ_{j≠y} e^{s cos θ_j}) )`
/// with gradients for the embedding and the class weights.
pub fn amsoftmax_loss(
    embedding: &[f64],
    label: usize,
    params: &AmSoftmaxParams,
) -> Result<AmSoftmaxOutput> {
    let w = &params.class_weights;
    if label >= w.rows {
        return Err(Error::Config(format!(
            "label {label} out of range for {} classes",
            w.rows
        )));
    }
    if embedding.len() != w.cols {
        return Err(Error::Shape(format!(
            "embedding length {} but class weights have {} columns",
            embedding.len(),
            w.cols
        )));
    }
    let e_norm = norm(embedding);
    if e_norm == 0.0 {
        return Err(Error::ZeroNorm("embedding"));
    }
    let e_hat: Vec<f64> = embedding.iter().map(|v| v / e_norm).collect();
    let mut w_norms = Vec::with_capacity(w.rows);
    let mut cos = Vec::with_capacity(w.rows);
    for j in 0..w.rows {
        let n = norm(w.row(j));
        if n == 0.0 {
            return Err(Error::ZeroNorm("class weight"));
        }
        w_norms.push(n);
        cos.push(dot(w.row(j), &e_hat) / n);
    }
    let s = params.scale;
    let logits: Vec<f64> = cos
        .iter()
        .enumerate()
        .map(|(j, &c)| s * (c - if j == label { params.margin } else { 0.0 }))
        .collect();

    // loss = log Σ_j exp(z_j − z_y); log1p keeps precision when z_y dominates.
    let rel: Vec<f64> = logits.iter().map(|z| z - logits[label]).collect();
    let top = rel.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let loss = if top == 0.0 {
        rel.iter()
            .enumerate()
            .filter(|&(j, _)| j != label)
            .map(|(_, r)| r.exp())
            .sum::<f64>()
            .ln_1p()
    } else {
        top + rel.iter().map(|r| (r - top).exp()).sum::<f64>().ln()
    };

    let mut d_logits = softmax(&logits);
    d_logits[label] -= 1.0;
    let d_cos: Vec<f64> = d_logits.iter().map(|g| s * g).collect();

    let mut d_ehat = vec![0.0; w.cols];
    let mut grad_weights = Mat::zeros(w.rows, w.cols);
    for j in 0..w.rows {
        let row = w.row(j);
        let n = w_norms[j];
        for (d, &wv) in d_ehat.iter_mut().zip(row) {
            *d += d_cos[j] * wv / n;
        }
        let gj = grad_weights.row_mut(j);
        for ((g, &wv), &ev) in gj.iter_mut().zip(row).zip(&e_hat) {
            *g = d_cos[j] * (ev - cos[j] * wv / n) / n;
        }
    }
    let radial = dot(&d_ehat, &e_hat);
    let grad_embedding = d_ehat
        .iter()
        .zip(&e_hat)
        .map(|(d, e)| (d - radial * e) / e_norm)
        .collect();
    Ok(AmSoftmaxOutput {
        loss,
        grad_embedding,
        grad_weights,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub config: AdamWConfig,
}

impl OptimState {
    pub fn new(config: AdamWConfig) -> Self {
        OptimState {
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            config,
        }
    }
}

/// One bias-corrected AdamW update with decoupled weight decay:
/// `p ← p − lr · (m̂ / (√v̂ + eps) + wd · p)`.
///
/// Moments are allocated on the first call. Nothing is modified when any
/// gradient is non-finite.
pub fn adamw_step(
    params: &mut [&mut Vec<f64>],
    grads: &[&[f64]],
    state: &mut OptimState,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!(
            "{} parameter tensors but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Shape(format!(
                "tensor {i}: {} parameters but {} gradients",
                p.len(),
                g.len()
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                tensor: i.to_string(),
                step: state.step + 1,
            });
        }
    }
    if state.first_moment.is_empty() {
        state.first_moment = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.second_moment = state.first_moment.clone();
    } else if state.first_moment.len() != params.len()
        || state
            .first_moment
            .iter()
            .zip(params.iter())
            .any(|(m, p)| m.len() != p.len())
    {
        return Err(Error::Shape(
            "optimizer moments do not match parameters".into(),
        ));
    }

    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(
        state
            .first_moment
            .iter_mut()
            .zip(state.second_moment.iter_mut()),
    ) {
        for i in 0..p.len() {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * p[i]);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub checkpoint_every: u64,
    pub batch_size: usize,
    /// Fixed crop length per training sample; shorter samples are zero-padded.
    pub crop_frames: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    pub scale: f64,
    pub margin: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 100_000,
            checkpoint_every: 5_000,
            batch_size: 40,
            crop_frames: 300,
            seed: 0,
            optimizer: AdamWConfig::default(),
            scale: DEFAULT_SCALE,
            margin: DEFAULT_MARGIN,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.total_steps == 0 || self.batch_size == 0 || self.crop_frames == 0 {
            return bad("total_steps, batch_size and crop_frames must be >= 1");
        }
        if self.checkpoint_every == 0 || self.checkpoint_every > self.total_steps {
            return bad("checkpoint_every must lie in [1, total_steps]");
        }
        if !(self.scale > 0.0) || !(self.margin >= 0.0) {
            return bad("AM-softmax needs scale > 0 and margin >= 0");
        }
        let o = self.optimizer;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return bad("AdamW needs lr > 0 and betas in [0, 1)");
        }
        if !(o.eps > 0.0) || !(o.weight_decay >= 0.0) {
            return bad("AdamW needs eps > 0 and weight_decay >= 0");
        }
        Ok(())
    }
}

/// Head plus classifier, i.e. everything the optimizer updates.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub head: HeadParams,
    pub classifier: AmSoftmaxParams,
}

impl Model {
    fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut t = self.head.tensors_mut();
        t.push(&mut self.classifier.class_weights.data);
        t
    }

    fn tensors(&self) -> Vec<(String, usize, usize, &[f64])> {
        let mut t = self.head.tensors();
        let w = &self.classifier.class_weights;
        t.push((CLASS_WEIGHT_TENSOR.into(), w.rows, w.cols, &w.data));
        t
    }

    fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v = f64::from(*v as f32);
            }
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        save_tensors(dir, &self.tensors())
    }
}

/// Loss and gradients for one labelled sample.
pub fn sample_loss(
    model: &Model,
    config: &HeadConfig,
    layers: &[Mat],
    label: usize,
) -> Result<(f64, HeadParams, Mat)> {
    let (embedding, cache) = model.head.forward(config, layers)?;
    let out = amsoftmax_loss(&embedding, label, &model.classifier)?;
    let head_grads = model.head.backward(config, &cache, &out.grad_embedding)?;
    Ok((out.loss, head_grads, out.grad_weights))
}

/// Crops `crop` frames starting at `offset`, zero-padding past the end.
fn crop_layers(layers: &[Mat], offset: usize, crop: usize) -> Vec<Mat> {
    layers
        .iter()
        .map(|m| {
            let mut out = Mat::zeros(crop, m.cols);
            let avail = m.rows.saturating_sub(offset).min(crop);
            out.data[..avail * m.cols]
                .copy_from_slice(&m.data[offset * m.cols..(offset + avail) * m.cols]);
            out
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// `(step, directory)` in step order.
    pub checkpoints: Vec<(u64, PathBuf)>,
    pub losses: Vec<f64>,
    pub speakers: Vec<String>,
}

/// Trains a head on `manifest` and writes `head.cfg`, `speakers.txt`,
/// `train_log.csv` and `ckpt_<step>/` directories into `out_dir`.
///
/// Labels follow sorted speaker ids. Batches walk seeded per-epoch
/// shuffles of the utterances; every sample gets a random crop offset.
/// Per-sample gradients may be computed in parallel but are summed in
/// batch order, so a run is a pure function of its inputs.
pub fn train(
    manifest: &Manifest,
    config: &TrainConfig,
    head_config: &HeadConfig,
    out_dir: impl AsRef<Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    head_config.validate()?;
    let out_dir = out_dir.as_ref();
    let speakers = manifest.speakers();
    if speakers.len() < 2 {
        return Err(Error::Config(format!(
            "training needs at least 2 speakers, manifest has {}",
            speakers.len()
        )));
    }
    let label_of: BTreeMap<&str, usize> = speakers
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();

    let data: Vec<(Vec<Mat>, usize)> = manifest
        .records
        .par_iter()
        .map(|r| {
            let stack = manifest.load_features(r)?;
            if stack.layers() != head_config.n_layers || stack.dim() != head_config.input_dim {
                return Err(Error::Shape(format!(
                    "{}: features are {}x?x{}, head expects {} layers of dim {}",
                    r.utt_id,
                    stack.layers(),
                    stack.dim(),
                    head_config.n_layers,
                    head_config.input_dim
                )));
            }
            Ok((stack.layer_mats(), label_of[r.speaker_id.as_str()]))
        })
        .collect::<Result<_>>()?;

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cfg_path = out_dir.join("head.cfg");
    fs::write(&cfg_path, head_config.to_kv()).map_err(|e| Error::io(&cfg_path, e))?;
    let spk_path = out_dir.join("speakers.txt");
    fs::write(&spk_path, speakers.join("\n") + "\n").map_err(|e| Error::io(&spk_path, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Model {
        head: HeadParams::init(head_config, &mut rng)?,
        classifier: AmSoftmaxParams::init(
            speakers.len(),
            head_config.embed_dim,
            config.scale,
            config.margin,
            &mut rng,
        ),
    };
    model.round_to_f32();
    let mut state = OptimState::new(config.optimizer);

    let log_path = out_dir.join("train_log.csv");
    let mut log = csv::Writer::from_path(&log_path).map_err(|e| Error::csv(&log_path, e))?;
    log.write_record(["step", "loss"])
        .map_err(|e| Error::csv(&log_path, e))?;

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(config.total_steps as usize);
    let mut checkpoints = Vec::new();

    for step in 1..=config.total_steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = order[cursor];
            cursor += 1;
            let frames = data[idx].0[0].rows;
            let offset = if frames > config.crop_frames {
                rng.random_range(0..=frames - config.crop_frames)
            } else {
                0
            };
            batch.push((idx, offset));
        }

        let results: Vec<(f64, HeadParams, Mat)> = batch
            .par_iter()
            .map(|&(idx, offset)| {
                let (layers, label) = &data[idx];
                let cropped = crop_layers(layers, offset, config.crop_frames);
                sample_loss(&model, head_config, &cropped, *label)
            })
            .collect::<Result<_>>()?;

        let scale = 1.0 / config.batch_size as f64;
        let mut head_grad = HeadParams::zeros(head_config);
        let mut class_grad = Mat::zeros(
            model.classifier.class_weights.rows,
            model.classifier.class_weights.cols,
        );
        let mut loss = 0.0;
        for (l, hg, cg) in &results {
            loss += l;
            for (acc, g) in head_grad.tensors_mut().into_iter().zip(hg.tensors()) {
                for (a, v) in acc.iter_mut().zip(g.3) {
                    *a += v;
                }
            }
            class_grad.add_assign(cg);
        }
        loss *= scale;
        for t in head_grad.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= scale);
        }
        class_grad.data.iter_mut().for_each(|v| *v *= scale);

        let names: Vec<String> = model.tensors().into_iter().map(|t| t.0).collect();
        let head_views = head_grad.tensors();
        let mut grads: Vec<&[f64]> = head_views.iter().map(|t| t.3).collect();
        grads.push(&class_grad.data);
        adamw_step(&mut model.tensors_mut(), &grads, &mut state).map_err(|e| match e {
            Error::NonFiniteGradient { tensor, step } => Error::NonFiniteGradient {
                tensor: tensor
                    .parse::<usize>()
                    .ok()
                    .and_then(|i| names.get(i).cloned())
                    .unwrap_or(tensor),
                step,
            },
            other => other,
        })?;
        model.round_to_f32();

        losses.push(loss);
        log.write_record([step.to_string(), loss.to_string()])
            .map_err(|e| Error::csv(&log_path, e))?;
        if step % config.checkpoint_every == 0 {
            let dir = out_dir.join(format!("ckpt_{step}"));
            model.save(&dir)?;
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            log::info!("step {step}: loss {loss:.4}, checkpoint {}", dir.display());
            checkpoints.push((step, dir));
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    Ok(TrainOutcome {
        checkpoints,
        losses,
        speakers,
    })
}

/// Loads the head stored in a checkpoint directory.
pub fn load_checkpoint(dir: impl AsRef<Path>, config: &HeadConfig) -> Result<HeadParams> {
    HeadParams::load(dir, config)
}

/// Loads the classifier weights of a checkpoint written by [`train`].
pub fn load_classifier(dir: impl AsRef<Path>, scale: f64, margin: f64) -> Result<AmSoftmaxParams> {
    let dir = dir.as_ref();
    let (rows, cols, data) = load_tensors(dir)?
        .remove(CLASS_WEIGHT_TENSOR)
        .ok_or_else(|| Error::Shape(format!("{}: no classifier weights", dir.display())))?;
    Ok(AmSoftmaxParams {
        class_weights: Mat::from_vec(rows, cols, data)?,
        scale,
        margin,
    })
}

/// Lists `(step, dir)` for every `ckpt_<step>` directory under `run_dir`,
/// sorted by step.
pub fn list_checkpoints(run_dir: impl AsRef<Path>) -> Result<Vec<(u64, PathBuf)>> {
    let run_dir = run_dir.as_ref();
    let mut out = Vec::new();
    for entry in fs::read_dir(run_dir).map_err(|e| Error::io(run_dir, e))? {
        let entry = entry.map_err(|e| Error::io(run_dir, e))?;
        let name = entry.file_name();
        if let Some(step) = name
            .to_str()
            .and_then(|n| n.strip_prefix("ckpt_"))
            .and_then(|s| s.parse::<u64>().ok())
        {
            out.push((step, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

/// Embeds every trial utterance with full-length features and scores the
/// trials by cosine similarity.
pub fn score_with_head(
    params: &HeadParams,
    config: &HeadConfig,
    manifest: &Manifest,
    trials: &TrialList,
) -> Result<ScoreSet> {
    let embeddings =
        map_trial_utterances(manifest, trials, |stack| params.embed_stack(config, stack))?;
    score_trials(trials, &embeddings)
}

/// Evaluates every checkpoint and returns the lowest-EER one (earliest step
/// on ties) with its report.
pub fn select_best_checkpoint(
    checkpoints: &[(u64, PathBuf)],
    trials: &TrialList,
    manifest: &Manifest,
    config: &HeadConfig,
) -> Result<(u64, EvalReport, Vec<(u64, f64)>)> {
    if checkpoints.is_empty() {
        return Err(Error::Config("no checkpoints to select from".into()));
    }
    let mut reports = Vec::with_capacity(checkpoints.len());
    for (step, dir) in checkpoints {
        let params = load_checkpoint(dir, config)?;
        let report = compute_eer(&score_with_head(&params, config, manifest, trials)?)?;
        reports.push((*step, report));
    }
    let all: Vec<(u64, f64)> = reports.iter().map(|(s, r)| (*s, r.eer)).collect();
    let (step, _) = pick_best(&all).expect("non-empty");
    let report = reports
        .into_iter()
        .find(|(s, _)| *s == step)
        .map(|(_, r)| r)
        .expect("selected step present");
    Ok((step, report, all))
}

/// Picks the earliest minimum from `(step, eer)` pairs.
pub fn pick_best(results: &[(u64, f64)]) -> Option<(u64, f64)> {
    let mut sorted = results.to_vec();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    sorted
        .into_iter()
        .fold(None, |best: Option<(u64, f64)>, (s, e)| match best {
            Some((_, be)) if be <= e => best,
            _ => Some((s, e)),
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(rows: &[Vec<f64>], scale: f64, margin: f64) -> AmSoftmaxParams {
        AmSoftmaxParams {
            class_weights: Mat::from_rows(rows).unwrap(),
            scale,
            margin,
        }
    }

    #[test]
    fn symmetric_margin_free_is_ln2() {
        // Embedding at 45° to both class directions.
        let p = params(&[vec![1.0, 0.0], vec![0.0, 1.0]], 1.0, 0.0);
        let out = amsoftmax_loss(&[1.0, 1.0], 0, &p).unwrap();
        assert!((out.loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn closed_form_margin_case() {
        let p = params(&[vec![1.0, 0.0], vec![0.0, 1.0]], 30.0, 0.4);
        let out = amsoftmax_loss(&[2.0, 0.0], 0, &p).unwrap();
        let want = (-18f64).exp().ln_1p();
        assert!((out.loss - want).abs() < 1e-12);
        assert!((out.loss - 1.523e-8).abs() < 1e-11);
    }

    #[test]
    fn loss_errors() {
        let p = params(&[vec![1.0, 0.0], vec![0.0, 1.0]], 30.0, 0.4);
        assert!(matches!(
            amsoftmax_loss(&[0.0, 0.0], 0, &p),
            Err(Error::ZeroNorm(_))
        ));
        assert!(amsoftmax_loss(&[1.0, 0.0], 2, &p).is_err());
        let z = params(&[vec![1.0, 0.0], vec![0.0, 0.0]], 30.0, 0.4);
        assert!(matches!(
            amsoftmax_loss(&[1.0, 0.0], 0, &z),
            Err(Error::ZeroNorm(_))
        ));
    }

    #[test]
    fn loss_scale_invariant_and_monotone_in_margin() {
        let rows = vec![
            vec![0.3, -1.0, 0.2],
            vec![1.1, 0.4, -0.3],
            vec![-0.5, 0.5, 0.9],
        ];
        let e = [0.7, -0.2, 0.4];
        let base = amsoftmax_loss(&e, 1, &params(&rows, 30.0, 0.4))
            .unwrap()
            .loss;
        let scaled: Vec<f64> = e.iter().map(|v| v * 123.0).collect();
        let other = amsoftmax_loss(&scaled, 1, &params(&rows, 30.0, 0.4))
            .unwrap()
            .loss;
        assert!((base - other).abs() < 1e-10);
        let mut prev = f64::INFINITY;
        for m in [0.8, 0.4, 0.2, 0.0] {
            let l = amsoftmax_loss(&e, 1, &params(&rows, 30.0, m)).unwrap().loss;
            assert!(l > 0.0 && l.is_finite());
            assert!(l <= prev);
            prev = l;
        }
    }

    fn step_scalar(p0: f64, g: f64, cfg: AdamWConfig) -> f64 {
        let mut p = vec![p0];
        let mut st = OptimState::new(cfg);
        adamw_step(&mut [&mut p], &[&[g]], &mut st).unwrap();
        assert_eq!(st.step, 1);
        p[0]
    }

    #[test]
    fn adamw_examples() {
        let no_wd = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        assert_eq!(step_scalar(1.5, 0.0, no_wd), 1.5);
        let p = step_scalar(1.0, 1.0, no_wd);
        assert!((p - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        let wd = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        assert!((step_scalar(1.0, 0.0, wd) - 0.99).abs() < 1e-15);
    }

    #[test]
    fn adamw_rejects_non_finite_without_mutating() {
        let mut p = vec![1.0, 2.0];
        let mut st = OptimState::new(AdamWConfig::default());
        let err = adamw_step(&mut [&mut p], &[&[0.1, f64::NAN]], &mut st);
        assert!(matches!(err, Err(Error::NonFiniteGradient { .. })));
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn crop_pads_with_zeros() {
        let m = Mat::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        assert_eq!(crop_layers(&[m.clone()], 1, 2)[0].data, vec![2.0, 3.0]);
        assert_eq!(
            crop_layers(&[m], 0, 5)[0].data,
            vec![1.0, 2.0, 3.0, 0.0, 0.0]
        );
    }

    #[test]
    fn best_checkpoint_tie_breaks_earliest() {
        assert_eq!(
            pick_best(&[(15_000, 0.05), (5_000, 0.10), (10_000, 0.05)]),
            Some((10_000, 0.05))
        );
        assert_eq!(pick_best(&[(5_000, 0.2)]), Some((5_000, 0.2)));
        assert_eq!(pick_best(&[]), None);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.checkpoint_every = c.total_steps + 1;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
