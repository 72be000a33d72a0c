//! Layer aggregation and temporal pooling with analytic gradients.
//!
//! All pooling variants reduce a `T × D` frame sequence to `[μ, σ]` (length
//! `2D`) using per-(frame, channel) weights `α` that sum to one over time:
//!
//! * statistics pooling: `α = 1/T`;
//! * attentive statistics pooling: `e_t = vᵀ tanh(W h_t + b)`, `α = softmax_t(e)`
//!   shared across channels;
//! * channel/context statistics pooling: `z_t = W₂ tanh(W₁ x_t + b₁)` with
//!   `x_t = h_t` or `[h_t, mean, std]`, `α_{·,c} = softmax_t(z_{·,c})`.
//!
//! `σ_c = sqrt(max(Σ_t α_{t,c} (h_{t,c} − μ_c)², 0) + eps_std)` everywhere.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{dot, softmax, softmax_backward, Mat};

pub const DEFAULT_EPS_STD: f64 = 1e-6;
pub const DEFAULT_ATTENTION_HIDDEN: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolingKind {
    Stats,
    AttentiveStats,
    ChannelContextStats,
}

impl PoolingKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PoolingKind::Stats => "stats",
            PoolingKind::AttentiveStats => "attentive_stats",
            PoolingKind::ChannelContextStats => "channel_context_stats",
        }
    }
}

impl std::str::FromStr for PoolingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stats" => Ok(PoolingKind::Stats),
            "attentive_stats" | "attentive" => Ok(PoolingKind::AttentiveStats),
            "channel_context_stats" | "channel_context" => Ok(PoolingKind::ChannelContextStats),
            other => Err(Error::Config(format!("unknown pooling kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolingConfig {
    pub kind: PoolingKind,
    pub attention_hidden: usize,
    /// Condition channel attention on utterance-wide mean and std.
    pub context: bool,
    pub eps_std: f64,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        PoolingConfig {
            kind: PoolingKind::Stats,
            attention_hidden: DEFAULT_ATTENTION_HIDDEN,
            context: true,
            eps_std: DEFAULT_EPS_STD,
        }
    }
}

impl PoolingConfig {
    pub fn stats() -> Self {
        PoolingConfig::default()
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind != PoolingKind::Stats && self.attention_hidden == 0 {
            return Err(Error::Config("attention_hidden must be >= 1".into()));
        }
        if !(self.eps_std >= 0.0 && self.eps_std.is_finite()) {
            return Err(Error::Config("eps_std must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Trainable scalars for an input of `dim` channels.
    pub fn param_count(&self, dim: usize) -> usize {
        let h = self.attention_hidden;
        match self.kind {
            PoolingKind::Stats => 0,
            PoolingKind::AttentiveStats => h * dim + h + h,
            PoolingKind::ChannelContextStats => {
                let input = if self.context { 3 * dim } else { dim };
                h * input + h + dim * h
            }
        }
    }
}

/// Learnable per-layer logits; effective weights are their softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub logits: Vec<f64>,
}

impl LayerWeights {
    pub fn uniform(layers: usize) -> Self {
        LayerWeights {
            logits: vec![0.0; layers],
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        softmax(&self.logits)
    }
}

fn check_layers(layers: &[Mat], weights: &LayerWeights) -> Result<()> {
    if layers.len() != weights.logits.len() {
        return Err(Error::Shape(format!(
            "{} layers but {} layer weights",
            layers.len(),
            weights.logits.len()
        )));
    }
    let first = layers
        .first()
        .ok_or_else(|| Error::Shape("no layers".into()))?;
    if layers
        .iter()
        .any(|m| m.rows != first.rows || m.cols != first.cols)
    {
        return Err(Error::Shape("layers differ in shape".into()));
    }
    Ok(())
}

/// `o_t = Σ_l w^l h_t^l` with `w = softmax(logits)`.
pub fn layer_weighted_sum(layers: &[Mat], weights: &LayerWeights) -> Result<Mat> {
    check_layers(layers, weights)?;
    let w = weights.weights();
    let mut out = Mat::zeros(layers[0].rows, layers[0].cols);
    for (layer, &wl) in layers.iter().zip(&w) {
        for (o, &h) in out.data.iter_mut().zip(&layer.data) {
            *o += wl * h;
        }
    }
    Ok(out)
}

/// Gradient of the weighted sum with respect to the layer logits.
pub fn layer_weighted_sum_backward(
    layers: &[Mat],
    weights: &LayerWeights,
    grad_out: &Mat,
) -> Result<Vec<f64>> {
    check_layers(layers, weights)?;
    let dw: Vec<f64> = layers
        .iter()
        .map(|l| dot(&l.data, &grad_out.data))
        .collect();
    Ok(softmax_backward(&weights.weights(), &dw))
}

/// Time weights feeding the shared weighted-statistics kernel.
#[derive(Clone, Copy)]
enum Alpha<'a> {
    Uniform,
    Frame(&'a [f64]),
    Channel(&'a Mat),
}

impl Alpha<'_> {
    #[inline]
    fn at(&self, t: usize, c: usize, frames: usize) -> f64 {
        match self {
            Alpha::Uniform => 1.0 / frames as f64,
            Alpha::Frame(a) => a[t],
            Alpha::Channel(a) => a.get(t, c),
        }
    }
}

fn check_frames(frames: &Mat) -> Result<()> {
    if frames.rows == 0 || frames.cols == 0 {
        return Err(Error::Shape(format!(
            "pooling needs T >= 1 and D >= 1, got {}x{}",
            frames.rows, frames.cols
        )));
    }
    Ok(())
}

#[inline]
fn guarded_std(var: f64, eps: f64) -> f64 {
    (var.max(0.0) + eps).sqrt()
}

/// `dσ/dvar`, zero where the clamp is active or σ vanishes.
#[inline]
fn guarded_std_grad(var: f64, std: f64) -> f64 {
    if var < 0.0 || std == 0.0 {
        0.0
    } else {
        0.5 / std
    }
}

/// Per-channel weighted means and centred variances.
fn moments(frames: &Mat, alpha: Alpha<'_>) -> (Vec<f64>, Vec<f64>) {
    let (t_len, d) = (frames.rows, frames.cols);
    let mut mean = vec![0.0; d];
    match alpha {
        Alpha::Uniform => {
            for t in 0..t_len {
                for (m, &x) in mean.iter_mut().zip(frames.row(t)) {
                    *m += x;
                }
            }
            for m in &mut mean {
                *m /= t_len as f64;
            }
        }
        _ => {
            for t in 0..t_len {
                for (c, (m, &x)) in mean.iter_mut().zip(frames.row(t)).enumerate() {
                    *m += alpha.at(t, c, t_len) * x;
                }
            }
        }
    }
    let mut var = vec![0.0; d];
    for t in 0..t_len {
        for (c, (v, &x)) in var.iter_mut().zip(frames.row(t)).enumerate() {
            let dx = x - mean[c];
            *v += alpha.at(t, c, t_len) * dx * dx;
        }
    }
    (mean, var)
}

fn weighted_stats(frames: &Mat, alpha: Alpha<'_>, eps: f64) -> Vec<f64> {
    let (mean, var) = moments(frames, alpha);
    let mut out = mean;
    out.extend(var.iter().map(|&v| guarded_std(v, eps)));
    out
}

/// Returns `(dframes, dalpha)` where `dalpha` is per (frame, channel). The
/// `dalpha` entries are exact on the simplex `Σ_t α_{t,c} = 1`, which is all
/// the softmax-parameterised callers need.
fn weighted_stats_backward(
    frames: &Mat,
    alpha: Alpha<'_>,
    eps: f64,
    grad_out: &[f64],
) -> (Mat, Mat) {
    let (t_len, d) = (frames.rows, frames.cols);
    let (mean, var) = moments(frames, alpha);
    let (g_mean, g_std) = grad_out.split_at(d);
    let d_var: Vec<f64> = (0..d)
        .map(|c| g_std[c] * guarded_std_grad(var[c], guarded_std(var[c], eps)))
        .collect();
    let mut d_frames = Mat::zeros(t_len, d);
    let mut d_alpha = Mat::zeros(t_len, d);
    for t in 0..t_len {
        for c in 0..d {
            let a = alpha.at(t, c, t_len);
            let x = frames.get(t, c);
            let dx = x - mean[c];
            d_frames.set(t, c, g_mean[c] * a + d_var[c] * 2.0 * a * dx);
            d_alpha.set(t, c, g_mean[c] * x + d_var[c] * dx * dx);
        }
    }
    (d_frames, d_alpha)
}

/// Per-channel mean and population standard deviation over time.
pub fn stats_pool(frames: &Mat, eps_std: f64) -> Result<Vec<f64>> {
    check_frames(frames)?;
    Ok(weighted_stats(frames, Alpha::Uniform, eps_std))
}

pub fn stats_pool_backward(frames: &Mat, eps_std: f64, grad_out: &[f64]) -> Result<Mat> {
    check_frames(frames)?;
    check_grad_len(grad_out, frames.cols)?;
    Ok(weighted_stats_backward(frames, Alpha::Uniform, eps_std, grad_out).0)
}

fn check_grad_len(grad_out: &[f64], d: usize) -> Result<()> {
    if grad_out.len() != 2 * d {
        return Err(Error::Shape(format!(
            "pooling gradient has length {}, expected {}",
            grad_out.len(),
            2 * d
        )));
    }
    Ok(())
}

fn uniform_init(rng: &mut impl Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

/// Parameters of attentive statistics pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentiveParams {
    /// `hidden × D`
    pub w: Mat,
    pub b: Vec<f64>,
    pub v: Vec<f64>,
}

impl AttentiveParams {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        AttentiveParams {
            w: Mat::zeros(hidden, dim),
            b: vec![0.0; hidden],
            v: vec![0.0; hidden],
        }
    }

    pub fn init(dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        AttentiveParams {
            w: Mat::from_vec(hidden, dim, uniform_init(rng, hidden * dim, dim)).expect("shape"),
            b: uniform_init(rng, hidden, dim),
            v: uniform_init(rng, hidden, hidden),
        }
    }

    fn check(&self, dim: usize) -> Result<()> {
        let h = self.w.rows;
        if self.w.cols != dim || self.b.len() != h || self.v.len() != h {
            return Err(Error::Shape(format!(
                "attentive pooling params ({}x{}, b {}, v {}) do not fit D={dim}",
                self.w.rows,
                self.w.cols,
                self.b.len(),
                self.v.len()
            )));
        }
        Ok(())
    }

    fn hidden(&self, h_t: &[f64]) -> Vec<f64> {
        let mut a = vec![0.0; self.w.rows];
        self.w.matvec(h_t, &mut a);
        a.iter().zip(&self.b).map(|(x, b)| (x + b).tanh()).collect()
    }
}

/// Attention weights over time (one per frame).
pub fn attentive_weights(frames: &Mat, params: &AttentiveParams) -> Result<Vec<f64>> {
    check_frames(frames)?;
    params.check(frames.cols)?;
    let scores: Vec<f64> = (0..frames.rows)
        .map(|t| dot(&params.v, &params.hidden(frames.row(t))))
        .collect();
    Ok(softmax(&scores))
}

pub fn attentive_stats_pool(
    frames: &Mat,
    params: &AttentiveParams,
    eps_std: f64,
) -> Result<Vec<f64>> {
    let alpha = attentive_weights(frames, params)?;
    Ok(weighted_stats(frames, Alpha::Frame(&alpha), eps_std))
}

pub fn attentive_stats_pool_backward(
    frames: &Mat,
    params: &AttentiveParams,
    eps_std: f64,
    grad_out: &[f64],
) -> Result<(Mat, AttentiveParams)> {
    check_grad_len(grad_out, frames.cols)?;
    let alpha = attentive_weights(frames, params)?;
    let (mut d_frames, d_alpha_tc) =
        weighted_stats_backward(frames, Alpha::Frame(&alpha), eps_std, grad_out);
    let d_alpha: Vec<f64> = (0..frames.rows)
        .map(|t| d_alpha_tc.row(t).iter().sum())
        .collect();
    let d_scores = softmax_backward(&alpha, &d_alpha);

    let hidden = params.w.rows;
    let mut grads = AttentiveParams::zeros(frames.cols, hidden);
    for (t, &de) in d_scores.iter().enumerate() {
        let h_t = frames.row(t);
        let u = params.hidden(h_t);
        let d_pre: Vec<f64> = u
            .iter()
            .zip(&params.v)
            .map(|(&ui, &vi)| de * vi * (1.0 - ui * ui))
            .collect();
        for (g, &ui) in grads.v.iter_mut().zip(&u) {
            *g += de * ui;
        }
        for (g, &dp) in grads.b.iter_mut().zip(&d_pre) {
            *g += dp;
        }
        grads.w.add_outer(&d_pre, h_t);
        params.w.matvec_t_acc(&d_pre, d_frames.row_mut(t));
    }
    Ok((d_frames, grads))
}

/// Parameters of channel- and context-dependent statistics pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelContextParams {
    /// `hidden × input` with input `D` or `3D` (context).
    pub w1: Mat,
    pub b1: Vec<f64>,
    /// `D × hidden`
    pub w2: Mat,
    pub context: bool,
}

impl ChannelContextParams {
    fn input_dim(dim: usize, context: bool) -> usize {
        if context {
            3 * dim
        } else {
            dim
        }
    }

    pub fn zeros(dim: usize, hidden: usize, context: bool) -> Self {
        ChannelContextParams {
            w1: Mat::zeros(hidden, Self::input_dim(dim, context)),
            b1: vec![0.0; hidden],
            w2: Mat::zeros(dim, hidden),
            context,
        }
    }

    pub fn init(dim: usize, hidden: usize, context: bool, rng: &mut impl Rng) -> Self {
        let input = Self::input_dim(dim, context);
        ChannelContextParams {
            w1: Mat::from_vec(hidden, input, uniform_init(rng, hidden * input, input))
                .expect("shape"),
            b1: uniform_init(rng, hidden, input),
            w2: Mat::from_vec(dim, hidden, uniform_init(rng, dim * hidden, hidden)).expect("shape"),
            context,
        }
    }

    fn check(&self, dim: usize) -> Result<()> {
        let h = self.w1.rows;
        if self.w1.cols != Self::input_dim(dim, self.context)
            || self.b1.len() != h
            || self.w2.rows != dim
            || self.w2.cols != h
        {
            return Err(Error::Shape(format!(
                "channel/context pooling params (w1 {}x{}, w2 {}x{}) do not fit D={dim}",
                self.w1.rows, self.w1.cols, self.w2.rows, self.w2.cols
            )));
        }
        Ok(())
    }

    fn inputs(&self, frames: &Mat, eps: f64) -> Mat {
        if !self.context {
            return frames.clone();
        }
        let ctx = weighted_stats(frames, Alpha::Uniform, eps);
        let d = frames.cols;
        let mut x = Mat::zeros(frames.rows, 3 * d);
        for t in 0..frames.rows {
            let row = x.row_mut(t);
            row[..d].copy_from_slice(frames.row(t));
            row[d..].copy_from_slice(&ctx);
        }
        x
    }

    /// Returns `(tanh activations per frame, scores T × D)`.
    fn scores(&self, inputs: &Mat) -> (Vec<Vec<f64>>, Mat) {
        let hidden = self.w1.rows;
        let d = self.w2.rows;
        let mut acts = Vec::with_capacity(inputs.rows);
        let mut z = Mat::zeros(inputs.rows, d);
        for t in 0..inputs.rows {
            let mut a = vec![0.0; hidden];
            self.w1.matvec(inputs.row(t), &mut a);
            let u: Vec<f64> = a
                .iter()
                .zip(&self.b1)
                .map(|(x, b)| (x + b).tanh())
                .collect();
            self.w2.matvec(&u, z.row_mut(t));
            acts.push(u);
        }
        (acts, z)
    }
}

/// Column-wise softmax over time.
fn softmax_over_time(z: &Mat) -> Mat {
    let mut alpha = Mat::zeros(z.rows, z.cols);
    for c in 0..z.cols {
        let col: Vec<f64> = (0..z.rows).map(|t| z.get(t, c)).collect();
        for (t, a) in softmax(&col).into_iter().enumerate() {
            alpha.set(t, c, a);
        }
    }
    alpha
}

/// Attention weights per (frame, channel), normalised over time per channel.
pub fn channel_context_weights(
    frames: &Mat,
    params: &ChannelContextParams,
    eps_std: f64,
) -> Result<Mat> {
    check_frames(frames)?;
    params.check(frames.cols)?;
    let (_, z) = params.scores(&params.inputs(frames, eps_std));
    Ok(softmax_over_time(&z))
}

pub fn channel_context_stats_pool(
    frames: &Mat,
    params: &ChannelContextParams,
    eps_std: f64,
) -> Result<Vec<f64>> {
    let alpha = channel_context_weights(frames, params, eps_std)?;
    Ok(weighted_stats(frames, Alpha::Channel(&alpha), eps_std))
}

pub fn channel_context_stats_pool_backward(
    frames: &Mat,
    params: &ChannelContextParams,
    eps_std: f64,
    grad_out: &[f64],
) -> Result<(Mat, ChannelContextParams)> {
    check_frames(frames)?;
    params.check(frames.cols)?;
    check_grad_len(grad_out, frames.cols)?;
    let (t_len, d) = (frames.rows, frames.cols);
    let inputs = params.inputs(frames, eps_std);
    let (acts, z) = params.scores(&inputs);
    let alpha = softmax_over_time(&z);
    let (mut d_frames, d_alpha) =
        weighted_stats_backward(frames, Alpha::Channel(&alpha), eps_std, grad_out);

    let mut d_z = Mat::zeros(t_len, d);
    for c in 0..d {
        let a: Vec<f64> = (0..t_len).map(|t| alpha.get(t, c)).collect();
        let g: Vec<f64> = (0..t_len).map(|t| d_alpha.get(t, c)).collect();
        for (t, v) in softmax_backward(&a, &g).into_iter().enumerate() {
            d_z.set(t, c, v);
        }
    }

    let hidden = params.w1.rows;
    let mut grads = ChannelContextParams::zeros(d, hidden, params.context);
    let mut d_ctx = vec![0.0; 2 * d];
    for (t, u) in acts.iter().enumerate() {
        let dz_t = d_z.row(t);
        grads.w2.add_outer(dz_t, u);
        let mut d_u = vec![0.0; hidden];
        params.w2.matvec_t_acc(dz_t, &mut d_u);
        let d_pre: Vec<f64> = d_u
            .iter()
            .zip(u)
            .map(|(&g, &ui)| g * (1.0 - ui * ui))
            .collect();
        grads.w1.add_outer(&d_pre, inputs.row(t));
        for (g, &dp) in grads.b1.iter_mut().zip(&d_pre) {
            *g += dp;
        }
        let mut d_in = vec![0.0; inputs.cols];
        params.w1.matvec_t_acc(&d_pre, &mut d_in);
        for (df, &di) in d_frames.row_mut(t).iter_mut().zip(&d_in[..d]) {
            *df += di;
        }
        if params.context {
            for (dc, &di) in d_ctx.iter_mut().zip(&d_in[d..]) {
                *dc += di;
            }
        }
    }
    if params.context {
        let (d_from_ctx, _) = weighted_stats_backward(frames, Alpha::Uniform, eps_std, &d_ctx);
        d_frames.add_assign(&d_from_ctx);
    }
    Ok((d_frames, grads))
}

/// Pooling parameters for any [`PoolingKind`].
#[derive(Clone, Debug, PartialEq)]
pub enum PoolingParams {
    Stats,
    Attentive(AttentiveParams),
    ChannelContext(ChannelContextParams),
}

impl PoolingParams {
    pub fn init(config: &PoolingConfig, dim: usize, rng: &mut impl Rng) -> Self {
        match config.kind {
            PoolingKind::Stats => PoolingParams::Stats,
            PoolingKind::AttentiveStats => {
                PoolingParams::Attentive(AttentiveParams::init(dim, config.attention_hidden, rng))
            }
            PoolingKind::ChannelContextStats => PoolingParams::ChannelContext(
                ChannelContextParams::init(dim, config.attention_hidden, config.context, rng),
            ),
        }
    }

    pub fn zeros(config: &PoolingConfig, dim: usize) -> Self {
        match config.kind {
            PoolingKind::Stats => PoolingParams::Stats,
            PoolingKind::AttentiveStats => {
                PoolingParams::Attentive(AttentiveParams::zeros(dim, config.attention_hidden))
            }
            PoolingKind::ChannelContextStats => PoolingParams::ChannelContext(
                ChannelContextParams::zeros(dim, config.attention_hidden, config.context),
            ),
        }
    }

    pub fn forward(&self, frames: &Mat, eps_std: f64) -> Result<Vec<f64>> {
        match self {
            PoolingParams::Stats => stats_pool(frames, eps_std),
            PoolingParams::Attentive(p) => attentive_stats_pool(frames, p, eps_std),
            PoolingParams::ChannelContext(p) => channel_context_stats_pool(frames, p, eps_std),
        }
    }

    pub fn backward(
        &self,
        frames: &Mat,
        eps_std: f64,
        grad_out: &[f64],
    ) -> Result<(Mat, PoolingParams)> {
        match self {
            PoolingParams::Stats => Ok((
                stats_pool_backward(frames, eps_std, grad_out)?,
                PoolingParams::Stats,
            )),
            PoolingParams::Attentive(p) => {
                let (df, g) = attentive_stats_pool_backward(frames, p, eps_std, grad_out)?;
                Ok((df, PoolingParams::Attentive(g)))
            }
            PoolingParams::ChannelContext(p) => {
                let (df, g) = channel_context_stats_pool_backward(frames, p, eps_std, grad_out)?;
                Ok((df, PoolingParams::ChannelContext(g)))
            }
        }
    }

    /// `(name, rows, cols, values)` for every trainable tensor.
    pub fn tensors(&self) -> Vec<(&'static str, usize, usize, &[f64])> {
        match self {
            PoolingParams::Stats => vec![],
            PoolingParams::Attentive(p) => vec![
                ("pool.w", p.w.rows, p.w.cols, &p.w.data),
                ("pool.b", 1, p.b.len(), &p.b),
                ("pool.v", 1, p.v.len(), &p.v),
            ],
            PoolingParams::ChannelContext(p) => vec![
                ("pool.w1", p.w1.rows, p.w1.cols, &p.w1.data),
                ("pool.b1", 1, p.b1.len(), &p.b1),
                ("pool.w2", p.w2.rows, p.w2.cols, &p.w2.data),
            ],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match self {
            PoolingParams::Stats => vec![],
            PoolingParams::Attentive(p) => vec![&mut p.w.data, &mut p.b, &mut p.v],
            PoolingParams::ChannelContext(p) => vec![&mut p.w1.data, &mut p.b1, &mut p.w2.data],
        }
    }
}
