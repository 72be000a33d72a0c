//! Central finite-difference checks for every trainable operation.
//!
//! Each check draws a random tiny instance, contracts the operation's
//! output with a random probe vector to get a scalar, and compares the
//! analytic gradient of that scalar against
//! `(f(x + h) − f(x − h)) / 2h`, one coordinate at a time. The error for a
//! tensor is `‖g_analytic − g_numeric‖₂ / max(‖g_analytic‖₂, ‖g_numeric‖₂, 1e-8)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::head::{FrameEncoderConfig, HeadConfig, HeadParams};
use crate::pooling::{
    attentive_stats_pool, attentive_stats_pool_backward, channel_context_stats_pool,
    channel_context_stats_pool_backward, layer_weighted_sum, layer_weighted_sum_backward,
    stats_pool, stats_pool_backward, AttentiveParams, ChannelContextParams, LayerWeights,
    PoolingConfig, PoolingKind,
};
use crate::tensor::{dot, norm, Mat};
use crate::train::{amsoftmax_loss, sample_loss, AmSoftmaxParams, Model};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;
/// Looser bound for the loss-through-head chain on layer logits.
pub const PIPELINE_TOLERANCE: f64 = 1e-4;

/// Central differences of `f` around `x`.
pub fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckResult {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

struct Tally {
    entries: Vec<GradCheckResult>,
}

impl Tally {
    fn record(&mut self, name: &str, tolerance: f64, err: f64) {
        match self.entries.iter_mut().find(|e| e.name == name) {
            Some(e) => {
                e.instances += 1;
                e.max_rel_error = e.max_rel_error.max(err);
            }
            None => self.entries.push(GradCheckResult {
                name: name.into(),
                instances: 1,
                max_rel_error: err,
                tolerance,
            }),
        }
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_vec(rows, cols, rand_vec(rng, rows * cols, scale)).expect("shape")
}

/// Compares `analytic` against finite differences of `f` over the tensor
/// selected by `view` inside a copy of `model`.
fn check_tensor<M: Clone>(
    model: &M,
    view: impl Fn(&mut M) -> &mut Vec<f64>,
    f: impl Fn(&M) -> f64,
    analytic: &[f64],
) -> f64 {
    let mut work = model.clone();
    let x0 = view(&mut work).clone();
    let numeric = central_difference(&x0, STEP, |x| {
        view(&mut work).copy_from_slice(x);
        f(&work)
    });
    relative_error(analytic, &numeric)
}

fn check_layer_weights(rng: &mut ChaCha8Rng, tally: &mut Tally) -> Result<()> {
    let (l, t, d) = (
        rng.random_range(2..=4),
        rng.random_range(2..=5),
        rng.random_range(1..=4),
    );
    let layers: Vec<Mat> = (0..l).map(|_| rand_mat(rng, t, d, 1.0)).collect();
    let w = LayerWeights {
        logits: rand_vec(rng, l, 1.0),
    };
    let probe = rand_mat(rng, t, d, 1.0);
    let analytic = layer_weighted_sum_backward(&layers, &w, &probe)?;
    let err = check_tensor(
        &w,
        |w| &mut w.logits,
        |w| {
            dot(
                &layer_weighted_sum(&layers, w).expect("shape").data,
                &probe.data,
            )
        },
        &analytic,
    );
    tally.record("layer_weights.logits", TOLERANCE, err);
    Ok(())
}

fn check_stats(rng: &mut ChaCha8Rng, tally: &mut Tally) -> Result<()> {
    let (t, d) = (rng.random_range(2..=5), rng.random_range(1..=4));
    let frames = rand_mat(rng, t, d, 1.0);
    let probe = rand_vec(rng, 2 * d, 1.0);
    let eps = 1e-6;
    let analytic = stats_pool_backward(&frames, eps, &probe)?;
    let err = check_tensor(
        &frames,
        |m| &mut m.data,
        |m| dot(&stats_pool(m, eps).expect("shape"), &probe),
        &analytic.data,
    );
    tally.record("stats_pool.input", TOLERANCE, err);
    Ok(())
}

fn check_attentive(rng: &mut ChaCha8Rng, tally: &mut Tally) -> Result<()> {
    let (t, d, h) = (
        rng.random_range(2..=5),
        rng.random_range(1..=4),
        rng.random_range(1..=4),
    );
    let frames = rand_mat(rng, t, d, 1.0);
    let params = AttentiveParams {
        w: rand_mat(rng, h, d, 1.0),
        b: rand_vec(rng, h, 1.0),
        v: rand_vec(rng, h, 1.5),
    };
    let probe = rand_vec(rng, 2 * d, 1.0);
    let eps = 1e-6;
    let (d_frames, grads) = attentive_stats_pool_backward(&frames, &params, eps, &probe)?;
    let f = |p: &AttentiveParams| {
        dot(
            &attentive_stats_pool(&frames, p, eps).expect("shape"),
            &probe,
        )
    };
    tally.record(
        "attentive.w",
        TOLERANCE,
        check_tensor(&params, |p| &mut p.w.data, f, &grads.w.data),
    );
    tally.record(
        "attentive.b",
        TOLERANCE,
        check_tensor(&params, |p| &mut p.b, f, &grads.b),
    );
    tally.record(
        "attentive.v",
        TOLERANCE,
        check_tensor(&params, |p| &mut p.v, f, &grads.v),
    );
    let err = check_tensor(
        &frames,
        |m| &mut m.data,
        |m| {
            dot(
                &attentive_stats_pool(m, &params, eps).expect("shape"),
                &probe,
            )
        },
        &d_frames.data,
    );
    tally.record("attentive.input", TOLERANCE, err);
    Ok(())
}

fn check_channel_context(rng: &mut ChaCha8Rng, tally: &mut Tally, context: bool) -> Result<()> {
    let (t, d, h) = (
        rng.random_range(2..=5),
        rng.random_range(1..=4),
        rng.random_range(1..=4),
    );
    let input = if context { 3 * d } else { d };
    let frames = rand_mat(rng, t, d, 1.0);
    let params = ChannelContextParams {
        w1: rand_mat(rng, h, input, 1.0),
        b1: rand_vec(rng, h, 1.0),
        w2: rand_mat(rng, d, h, 1.5),
        context,
    };
    let probe = rand_vec(rng, 2 * d, 1.0);
    let eps = 1e-6;
    let (d_frames, grads) = channel_context_stats_pool_backward(&frames, &params, eps, &probe)?;
    let f = |p: &ChannelContextParams| {
        dot(
            &channel_context_stats_pool(&frames, p, eps).expect("shape"),
            &probe,
        )
    };
    let tag = if context {
        "channel_context"
    } else {
        "channel"
    };
    tally.record(
        &format!("{tag}.w1"),
        TOLERANCE,
        check_tensor(&params, |p| &mut p.w1.data, f, &grads.w1.data),
    );
    tally.record(
        &format!("{tag}.b1"),
        TOLERANCE,
        check_tensor(&params, |p| &mut p.b1, f, &grads.b1),
    );
    tally.record(
        &format!("{tag}.w2"),
        TOLERANCE,
        check_tensor(&params, |p| &mut p.w2.data, f, &grads.w2.data),
    );
    let err = check_tensor(
        &frames,
        |m| &mut m.data,
        |m| {
            dot(
                &channel_context_stats_pool(m, &params, eps).expect("shape"),
                &probe,
            )
        },
        &d_frames.data,
    );
    tally.record(&format!("{tag}.input"), TOLERANCE, err);
    Ok(())
}

fn random_head_config(rng: &mut ChaCha8Rng, kind: PoolingKind, encoder: bool) -> HeadConfig {
    let frame_encoder = encoder.then(|| {
        let n_blocks = rng.random_range(1..=2);
        FrameEncoderConfig {
            n_blocks,
            hidden: rng.random_range(1..=4),
            dilations: (0..n_blocks).map(|_| rng.random_range(1..=2)).collect(),
        }
    });
    HeadConfig {
        input_dim: rng.random_range(1..=4),
        n_layers: rng.random_range(2..=3),
        pooling: PoolingConfig {
            kind,
            attention_hidden: rng.random_range(1..=3),
            context: rng.random_bool(0.5),
            eps_std: 1e-6,
        },
        embed_dim: rng.random_range(1..=4),
        frame_encoder,
    }
}

fn randomize_head(rng: &mut ChaCha8Rng, params: &mut HeadParams) {
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
}

/// Every tensor of a random head, probed through the embedding.
fn check_head(
    rng: &mut ChaCha8Rng,
    tally: &mut Tally,
    kind: PoolingKind,
    encoder: bool,
) -> Result<()> {
    let cfg = random_head_config(rng, kind, encoder);
    let t = rng.random_range(2..=5);
    let layers: Vec<Mat> = (0..cfg.n_layers)
        .map(|_| rand_mat(rng, t, cfg.input_dim, 1.0))
        .collect();
    let mut params = HeadParams::init(&cfg, rng)?;
    randomize_head(rng, &mut params);
    let probe = rand_vec(rng, cfg.embed_dim, 1.0);
    let (_, cache) = params.forward(&cfg, &layers)?;
    let grads = params.backward(&cfg, &cache, &probe)?;
    let f = |p: &HeadParams| dot(&p.embed(&cfg, &layers).expect("shape"), &probe);
    let names: Vec<String> = params.tensors().into_iter().map(|t| t.0).collect();
    let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().map(|t| t.3.to_vec()).collect();
    for (i, name) in names.iter().enumerate() {
        let err = check_tensor(&params, |p| p.tensors_mut().swap_remove(i), f, &analytic[i]);
        let group = if name.starts_with("enc") {
            format!("frame_encoder.{}", name.split_once('.').map_or("", |x| x.1))
        } else {
            format!("head[{}].{name}", kind.as_str())
        };
        tally.record(&group, TOLERANCE, err);
    }
    Ok(())
}

fn check_amsoftmax(rng: &mut ChaCha8Rng, tally: &mut Tally) -> Result<()> {
    let (n, e) = (3, rng.random_range(2..=4));
    let params = AmSoftmaxParams {
        class_weights: rand_mat(rng, n, e, 1.0),
        scale: 30.0,
        margin: 0.4,
    };
    let embedding = rand_vec(rng, e, 1.0);
    let label = rng.random_range(0..n);
    let out = amsoftmax_loss(&embedding, label, &params)?;
    let err = check_tensor(
        &embedding,
        |v| v,
        |v| amsoftmax_loss(v, label, &params).expect("valid").loss,
        &out.grad_embedding,
    );
    tally.record("amsoftmax.embedding", TOLERANCE, err);
    let err = check_tensor(
        &params,
        |p| &mut p.class_weights.data,
        |p| amsoftmax_loss(&embedding, label, p).expect("valid").loss,
        &out.grad_weights.data,
    );
    tally.record("amsoftmax.class_weights", TOLERANCE, err);
    Ok(())
}

/// AM-softmax loss through the full head, checked on the layer logits.
fn check_pipeline(rng: &mut ChaCha8Rng, tally: &mut Tally) -> Result<()> {
    let kind = [
        PoolingKind::Stats,
        PoolingKind::AttentiveStats,
        PoolingKind::ChannelContextStats,
    ][rng.random_range(0..3)];
    let encoder = rng.random_bool(0.5);
    let cfg = random_head_config(rng, kind, encoder);
    let t = rng.random_range(2..=5);
    let layers: Vec<Mat> = (0..cfg.n_layers)
        .map(|_| rand_mat(rng, t, cfg.input_dim, 1.0))
        .collect();
    let mut head = HeadParams::init(&cfg, rng)?;
    randomize_head(rng, &mut head);
    let model = Model {
        head,
        classifier: AmSoftmaxParams {
            class_weights: rand_mat(rng, 3, cfg.embed_dim, 1.0),
            scale: 30.0,
            margin: 0.4,
        },
    };
    let label = rng.random_range(0..3);
    let (_, head_grads, _) = sample_loss(&model, &cfg, &layers, label)?;
    let err = check_tensor(
        &model,
        |m| &mut m.head.layer_weights.logits,
        |m| sample_loss(m, &cfg, &layers, label).expect("valid").0,
        &head_grads.layer_weights.logits,
    );
    tally.record("pipeline.loss->layer_logits", PIPELINE_TOLERANCE, err);
    Ok(())
}

/// Runs `instances` random instances of every check.
pub fn run_suite(seed: u64, instances: usize) -> Result<Vec<GradCheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = Tally {
        entries: Vec::new(),
    };
    for _ in 0..instances {
        check_layer_weights(&mut rng, &mut tally)?;
        check_stats(&mut rng, &mut tally)?;
        check_attentive(&mut rng, &mut tally)?;
        check_channel_context(&mut rng, &mut tally, false)?;
        check_channel_context(&mut rng, &mut tally, true)?;
        for kind in [
            PoolingKind::Stats,
            PoolingKind::AttentiveStats,
            PoolingKind::ChannelContextStats,
        ] {
            check_head(&mut rng, &mut tally, kind, false)?;
        }
        check_head(&mut rng, &mut tally, PoolingKind::Stats, true)?;
        check_amsoftmax(&mut rng, &mut tally)?;
        check_pipeline(&mut rng, &mut tally)?;
    }
    Ok(tally.entries)
}
