//! Downstream embedding head:
//! `embedding = affine(pool(encode(layer_weighted_sum(stack))))`.
//!
//! `encode` is either the identity or a small stack of time-dilated affine
//! blocks with ReLU. Checkpoints store every tensor as its own `SVFT` file
//! (`1 × rows × cols`) with an `index.csv` of `tensor_name,path`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::features::{read_features, write_features, FeatureStack};
use crate::pooling::{
    layer_weighted_sum, layer_weighted_sum_backward, LayerWeights, PoolingConfig, PoolingParams,
};
use crate::tensor::Mat;

pub const DEFAULT_EMBED_DIM: usize = 192;

#[derive(Clone, Debug, PartialEq)]
pub struct FrameEncoderConfig {
    pub n_blocks: usize,
    pub hidden: usize,
    pub dilations: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub input_dim: usize,
    pub n_layers: usize,
    pub pooling: PoolingConfig,
    pub embed_dim: usize,
    pub frame_encoder: Option<FrameEncoderConfig>,
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.n_layers == 0 {
            return Err(Error::Config("input_dim and n_layers must be >= 1".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be >= 1".into()));
        }
        if let Some(enc) = &self.frame_encoder {
            if enc.n_blocks == 0 || enc.hidden == 0 {
                return Err(Error::Config(
                    "frame encoder needs n_blocks >= 1 and hidden >= 1".into(),
                ));
            }
            if enc.dilations.len() != enc.n_blocks {
                return Err(Error::Config(format!(
                    "{} dilations for {} encoder blocks",
                    enc.dilations.len(),
                    enc.n_blocks
                )));
            }
            if enc.dilations.contains(&0) {
                return Err(Error::Config("dilations must be >= 1".into()));
            }
        }
        self.pooling.validate()
    }

    /// Channel count entering the pooling layer.
    pub fn pool_input_dim(&self) -> usize {
        self.frame_encoder
            .as_ref()
            .map_or(self.input_dim, |e| e.hidden)
    }

    pub fn pool_output_dim(&self) -> usize {
        2 * self.pool_input_dim()
    }

    /// Flat `key=value` lines, readable by [`HeadConfig::from_kv`].
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        put("input_dim", self.input_dim.to_string());
        put("n_layers", self.n_layers.to_string());
        put("pooling", self.pooling.kind.as_str().to_string());
        put(
            "attention_hidden",
            self.pooling.attention_hidden.to_string(),
        );
        put("context", self.pooling.context.to_string());
        put("eps_std", format!("{:e}", self.pooling.eps_std));
        put("embed_dim", self.embed_dim.to_string());
        match &self.frame_encoder {
            None => put("encoder_blocks", "0".into()),
            Some(e) => {
                put("encoder_blocks", e.n_blocks.to_string());
                put("encoder_hidden", e.hidden.to_string());
                put(
                    "dilations",
                    e.dilations
                        .iter()
                        .map(ToString::to_string)
                        .collect::<Vec<_>>()
                        .join(","),
                );
            }
        }
        out
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got {line:?}")))?;
            map.insert(k.trim(), v.trim());
        }
        fn get<T: std::str::FromStr>(map: &BTreeMap<&str, &str>, k: &str) -> Result<T> {
            map.get(k)
                .ok_or_else(|| Error::Config(format!("missing key {k}")))?
                .parse()
                .map_err(|_| Error::Config(format!("bad value for {k}")))
        }
        let blocks: usize = get(&map, "encoder_blocks")?;
        let frame_encoder = if blocks == 0 {
            None
        } else {
            let dilations = map
                .get("dilations")
                .ok_or_else(|| Error::Config("missing key dilations".into()))?
                .split(',')
                .map(|d| {
                    d.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad dilation {d:?}")))
                })
                .collect::<Result<Vec<usize>>>()?;
            Some(FrameEncoderConfig {
                n_blocks: blocks,
                hidden: get(&map, "encoder_hidden")?,
                dilations,
            })
        };
        let cfg = HeadConfig {
            input_dim: get(&map, "input_dim")?,
            n_layers: get(&map, "n_layers")?,
            pooling: PoolingConfig {
                kind: map
                    .get("pooling")
                    .ok_or_else(|| Error::Config("missing key pooling".into()))?
                    .parse()?,
                attention_hidden: get(&map, "attention_hidden")?,
                context: get(&map, "context")?,
                eps_std: get(&map, "eps_std")?,
            },
            embed_dim: get(&map, "embed_dim")?,
            frame_encoder,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Exact number of trainable scalars, layer-weight logits included.
pub fn param_count(config: &HeadConfig) -> usize {
    let mut n = config.n_layers;
    if let Some(enc) = &config.frame_encoder {
        let mut input = config.input_dim;
        for _ in 0..enc.n_blocks {
            n += enc.hidden * 3 * input + enc.hidden;
            input = enc.hidden;
        }
    }
    n += config.pooling.param_count(config.pool_input_dim());
    n + config.pool_output_dim() * config.embed_dim + config.embed_dim
}

/// One time-dilated block: `y_t = ReLU(W [x_{t−d}; x_t; x_{t+d}] + b)` with
/// edge frames replicated.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock {
    /// `hidden × 3·input`
    pub weight: Mat,
    pub bias: Vec<f64>,
    pub dilation: usize,
}

impl EncoderBlock {
    fn gather(x: &Mat, t: usize, dilation: usize) -> Vec<f64> {
        let last = x.rows - 1;
        let prev = t.saturating_sub(dilation);
        let next = (t + dilation).min(last);
        let mut ctx = Vec::with_capacity(3 * x.cols);
        ctx.extend_from_slice(x.row(prev));
        ctx.extend_from_slice(x.row(t));
        ctx.extend_from_slice(x.row(next));
        ctx
    }

    fn check(&self, input_dim: usize) -> Result<()> {
        if self.weight.cols != 3 * input_dim || self.bias.len() != self.weight.rows {
            return Err(Error::Shape(format!(
                "encoder block {}x{} (bias {}) does not fit input width {input_dim}",
                self.weight.rows,
                self.weight.cols,
                self.bias.len()
            )));
        }
        Ok(())
    }

    /// Returns the pre-activation and the post-ReLU output.
    fn forward(&self, x: &Mat) -> Result<(Mat, Mat)> {
        self.check(x.cols)?;
        if x.rows == 0 {
            return Err(Error::Shape("encoder input has no frames".into()));
        }
        let hidden = self.weight.rows;
        let mut pre = Mat::zeros(x.rows, hidden);
        for t in 0..x.rows {
            let ctx = Self::gather(x, t, self.dilation);
            let row = pre.row_mut(t);
            self.weight.matvec(&ctx, row);
            for (p, b) in row.iter_mut().zip(&self.bias) {
                *p += b;
            }
        }
        let mut out = pre.clone();
        for v in &mut out.data {
            *v = v.max(0.0);
        }
        Ok((pre, out))
    }

    /// Returns `(d_input, d_weight, d_bias)`.
    fn backward(&self, x: &Mat, pre: &Mat, grad_out: &Mat) -> (Mat, Mat, Vec<f64>) {
        let hidden = self.weight.rows;
        let mut d_in = Mat::zeros(x.rows, x.cols);
        let mut d_w = Mat::zeros(hidden, self.weight.cols);
        let mut d_b = vec![0.0; hidden];
        let last = x.rows - 1;
        let d = x.cols;
        for t in 0..x.rows {
            let d_pre: Vec<f64> = grad_out
                .row(t)
                .iter()
                .zip(pre.row(t))
                .map(|(&g, &p)| if p > 0.0 { g } else { 0.0 })
                .collect();
            let ctx = Self::gather(x, t, self.dilation);
            d_w.add_outer(&d_pre, &ctx);
            for (g, dp) in d_b.iter_mut().zip(&d_pre) {
                *g += dp;
            }
            let mut d_ctx = vec![0.0; 3 * d];
            self.weight.matvec_t_acc(&d_pre, &mut d_ctx);
            let taps = [
                t.saturating_sub(self.dilation),
                t,
                (t + self.dilation).min(last),
            ];
            for (k, &src) in taps.iter().enumerate() {
                for (di, &g) in d_in.row_mut(src).iter_mut().zip(&d_ctx[k * d..(k + 1) * d]) {
                    *di += g;
                }
            }
        }
        (d_in, d_w, d_b)
    }
}

/// Runs the encoder blocks in sequence.
pub fn frame_encoder_forward(frames: &Mat, blocks: &[EncoderBlock]) -> Result<Mat> {
    let mut x = frames.clone();
    for b in blocks {
        x = b.forward(&x)?.1;
    }
    Ok(x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub layer_weights: LayerWeights,
    pub encoder: Vec<EncoderBlock>,
    pub pooling: PoolingParams,
    /// `embed_dim × pool_out`
    pub embed_weight: Mat,
    pub embed_bias: Vec<f64>,
}

fn uniform(rng: &mut impl Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

/// Intermediate values kept from a forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct HeadCache {
    layers: Vec<Mat>,
    /// Inputs and pre-activations of each encoder block.
    enc_inputs: Vec<Mat>,
    enc_pre: Vec<Mat>,
    pool_input: Mat,
    pooled: Vec<f64>,
}

impl HeadCache {
    pub fn pooled(&self) -> &[f64] {
        &self.pooled
    }
}

impl HeadParams {
    /// Layer logits start at zero (uniform weights); every other tensor is
    /// uniform in `±sqrt(1/fan_in)`.
    pub fn init(config: &HeadConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut encoder = Vec::new();
        if let Some(enc) = &config.frame_encoder {
            let mut input = config.input_dim;
            for &dilation in &enc.dilations {
                let fan_in = 3 * input;
                encoder.push(EncoderBlock {
                    weight: Mat::from_vec(
                        enc.hidden,
                        fan_in,
                        uniform(rng, enc.hidden * fan_in, fan_in),
                    )?,
                    bias: uniform(rng, enc.hidden, fan_in),
                    dilation,
                });
                input = enc.hidden;
            }
        }
        let pooling = PoolingParams::init(&config.pooling, config.pool_input_dim(), rng);
        let pool_out = config.pool_output_dim();
        Ok(HeadParams {
            layer_weights: LayerWeights::uniform(config.n_layers),
            encoder,
            pooling,
            embed_weight: Mat::from_vec(
                config.embed_dim,
                pool_out,
                uniform(rng, config.embed_dim * pool_out, pool_out),
            )?,
            embed_bias: uniform(rng, config.embed_dim, pool_out),
        })
    }

    /// All-zero tensors shaped like `config`; used as a gradient buffer.
    pub fn zeros(config: &HeadConfig) -> Self {
        let mut encoder = Vec::new();
        if let Some(enc) = &config.frame_encoder {
            let mut input = config.input_dim;
            for &dilation in &enc.dilations {
                encoder.push(EncoderBlock {
                    weight: Mat::zeros(enc.hidden, 3 * input),
                    bias: vec![0.0; enc.hidden],
                    dilation,
                });
                input = enc.hidden;
            }
        }
        HeadParams {
            layer_weights: LayerWeights {
                logits: vec![0.0; config.n_layers],
            },
            encoder,
            pooling: PoolingParams::zeros(&config.pooling, config.pool_input_dim()),
            embed_weight: Mat::zeros(config.embed_dim, config.pool_output_dim()),
            embed_bias: vec![0.0; config.embed_dim],
        }
    }

    pub fn forward(&self, config: &HeadConfig, layers: &[Mat]) -> Result<(Vec<f64>, HeadCache)> {
        if layers.len() != config.n_layers {
            return Err(Error::Shape(format!(
                "{} feature layers, head expects {}",
                layers.len(),
                config.n_layers
            )));
        }
        if layers[0].cols != config.input_dim {
            return Err(Error::Shape(format!(
                "feature dim {}, head expects {}",
                layers[0].cols, config.input_dim
            )));
        }
        let mut x = layer_weighted_sum(layers, &self.layer_weights)?;
        let mut enc_inputs = Vec::with_capacity(self.encoder.len());
        let mut enc_pre = Vec::with_capacity(self.encoder.len());
        for block in &self.encoder {
            let (pre, out) = block.forward(&x)?;
            enc_inputs.push(x);
            enc_pre.push(pre);
            x = out;
        }
        let pooled = self.pooling.forward(&x, config.pooling.eps_std)?;
        if pooled.len() != self.embed_weight.cols {
            return Err(Error::Shape(format!(
                "pooled width {} but embedding expects {}",
                pooled.len(),
                self.embed_weight.cols
            )));
        }
        let mut embedding = vec![0.0; self.embed_weight.rows];
        self.embed_weight.matvec(&pooled, &mut embedding);
        for (e, b) in embedding.iter_mut().zip(&self.embed_bias) {
            *e += b;
        }
        Ok((
            embedding,
            HeadCache {
                layers: layers.to_vec(),
                enc_inputs,
                enc_pre,
                pool_input: x,
                pooled,
            },
        ))
    }

    pub fn embed(&self, config: &HeadConfig, layers: &[Mat]) -> Result<Vec<f64>> {
        Ok(self.forward(config, layers)?.0)
    }

    pub fn embed_stack(&self, config: &HeadConfig, stack: &FeatureStack) -> Result<Vec<f64>> {
        self.embed(config, &stack.layer_mats())
    }

    /// Gradients of `⟨grad_embedding, embedding⟩` with respect to every tensor.
    pub fn backward(
        &self,
        config: &HeadConfig,
        cache: &HeadCache,
        grad_embedding: &[f64],
    ) -> Result<HeadParams> {
        if grad_embedding.len() != self.embed_weight.rows {
            return Err(Error::Shape("embedding gradient length".into()));
        }
        let mut grads = HeadParams::zeros(config);
        grads.embed_weight.add_outer(grad_embedding, &cache.pooled);
        grads.embed_bias.copy_from_slice(grad_embedding);
        let mut d_pooled = vec![0.0; cache.pooled.len()];
        self.embed_weight
            .matvec_t_acc(grad_embedding, &mut d_pooled);

        let (mut d_x, pool_grads) =
            self.pooling
                .backward(&cache.pool_input, config.pooling.eps_std, &d_pooled)?;
        grads.pooling = pool_grads;

        for (i, block) in self.encoder.iter().enumerate().rev() {
            let (d_in, d_w, d_b) = block.backward(&cache.enc_inputs[i], &cache.enc_pre[i], &d_x);
            grads.encoder[i].weight = d_w;
            grads.encoder[i].bias = d_b;
            d_x = d_in;
        }
        grads.layer_weights.logits =
            layer_weighted_sum_backward(&cache.layers, &self.layer_weights, &d_x)?;
        Ok(grads)
    }

    /// `(name, rows, cols, values)` for every trainable tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, usize, usize, &[f64])> {
        let mut out: Vec<(String, usize, usize, &[f64])> = vec![(
            "layer_logits".into(),
            1,
            self.layer_weights.logits.len(),
            &self.layer_weights.logits,
        )];
        for (i, b) in self.encoder.iter().enumerate() {
            out.push((
                format!("enc{i}.weight"),
                b.weight.rows,
                b.weight.cols,
                &b.weight.data,
            ));
            out.push((format!("enc{i}.bias"), 1, b.bias.len(), &b.bias));
        }
        for (name, r, c, v) in self.pooling.tensors() {
            out.push((name.to_string(), r, c, v));
        }
        out.push((
            "embed.weight".into(),
            self.embed_weight.rows,
            self.embed_weight.cols,
            &self.embed_weight.data,
        ));
        out.push((
            "embed.bias".into(),
            1,
            self.embed_bias.len(),
            &self.embed_bias,
        ));
        out
    }

    /// Mutable views in the same order as [`HeadParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = vec![&mut self.layer_weights.logits];
        for b in &mut self.encoder {
            out.push(&mut b.weight.data);
            out.push(&mut b.bias);
        }
        out.extend(self.pooling.tensors_mut());
        out.push(&mut self.embed_weight.data);
        out.push(&mut self.embed_bias);
        out
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors().iter().map(|t| t.3.len()).sum()
    }
}

/// Writes named tensors as `SVFT` files plus `index.csv` into `dir`.
pub fn save_tensors(
    dir: impl AsRef<Path>,
    tensors: &[(String, usize, usize, &[f64])],
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let index_path = dir.join("index.csv");
    let mut index = csv::Writer::from_path(&index_path).map_err(|e| Error::csv(&index_path, e))?;
    index
        .write_record(["tensor_name", "path"])
        .map_err(|e| Error::csv(&index_path, e))?;
    for (name, rows, cols, data) in tensors {
        let file = format!("{name}.svf");
        let stack = FeatureStack::new(1, *rows, *cols, data.iter().map(|&v| v as f32).collect())?;
        write_features(&stack, dir.join(&file))?;
        index
            .write_record([name.as_str(), file.as_str()])
            .map_err(|e| Error::csv(&index_path, e))?;
    }
    index.flush().map_err(|e| Error::io(&index_path, e))
}

/// Reads every tensor listed in `dir/index.csv` as `(rows, cols, values)`.
pub fn load_tensors(dir: impl AsRef<Path>) -> Result<BTreeMap<String, (usize, usize, Vec<f64>)>> {
    let dir = dir.as_ref();
    let index_path = dir.join("index.csv");
    let mut reader = csv::Reader::from_path(&index_path).map_err(|e| Error::csv(&index_path, e))?;
    let mut out = BTreeMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::csv(&index_path, e))?;
        let (name, file) = (&row[0], &row[1]);
        let stack = read_features(dir.join(file))?;
        let values = stack.values().iter().map(|&v| f64::from(v)).collect();
        out.insert(name.to_string(), (stack.frames(), stack.dim(), values));
    }
    Ok(out)
}

impl HeadParams {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        save_tensors(dir, &self.tensors())
    }

    pub fn load(dir: impl AsRef<Path>, config: &HeadConfig) -> Result<Self> {
        let dir = dir.as_ref();
        let mut stored = load_tensors(dir)?;
        let mut params = HeadParams::zeros(config);
        let shapes: Vec<(String, usize, usize)> = params
            .tensors()
            .into_iter()
            .map(|(n, r, c, _)| (n, r, c))
            .collect();
        for ((name, rows, cols), slot) in shapes.into_iter().zip(params.tensors_mut()) {
            let (r, c, values) = stored.remove(&name).ok_or_else(|| {
                Error::Shape(format!("{}: checkpoint lacks tensor {name}", dir.display()))
            })?;
            if (r, c) != (rows, cols) {
                return Err(Error::Shape(format!(
                    "{}: tensor {name} is {r}x{c}, config expects {rows}x{cols}",
                    dir.display()
                )));
            }
            *slot = values;
        }
        Ok(params)
    }

    /// Rounds every tensor to `f32` precision, the checkpoint storage type.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v = f64::from(*v as f32);
            }
        }
    }
}
