//! The ConvTransformer: conv(1→20) → conv(20→64) → max-pool → two
//! post-norm transformer encoder blocks → column-wise max → linear head.

mod checkpoint;

use std::fmt;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, derive_tagged};
use crate::tensor::{sinusoidal_encoding, AttentionVars, Graph, Tensor, Var};
use crate::trajgen::{normalize_positions, DiffusionModel, Trajectory, MIN_LENGTH};

pub use checkpoint::{file_sha256, load_checkpoint, save_checkpoint, Checkpoint, ModelCard, INIT_SCHEME};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionalEncoding {
    Off,
    Sinusoidal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Exponent regression, one output.
    Alpha,
    /// Diffusion-model classification, five logits.
    Model,
}

impl Task {
    pub fn head_out(self) -> usize {
        match self {
            Task::Alpha => 1,
            Task::Model => 5,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Alpha => "alpha",
            Task::Model => "model",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub conv1_out: usize,
    /// Also the transformer width.
    pub conv2_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pool_kernel: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub ffn_hidden: usize,
    pub cnn_dropout: f64,
    pub trans_dropout: f64,
    pub head_out: usize,
    pub positional_encoding: PositionalEncoding,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            conv1_out: 20,
            conv2_out: 64,
            kernel: 3,
            stride: 1,
            pool_kernel: 2,
            heads: 16,
            encoder_blocks: 2,
            ffn_hidden: 256,
            cnn_dropout: 0.05,
            trans_dropout: 0.0,
            head_out: 1,
            positional_encoding: PositionalEncoding::Off,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn for_task(task: Task) -> Self {
        Self {
            head_out: task.head_out(),
            ..Self::default()
        }
    }

    pub fn task(&self) -> Task {
        if self.head_out == 5 {
            Task::Model
        } else {
            Task::Alpha
        }
    }

    /// Returns the config with additive sinusoidal encodings switched on
    /// (`true`) or off.
    pub fn positional_encoding_ablation(&self, on: bool) -> Self {
        Self {
            positional_encoding: if on {
                PositionalEncoding::Sinusoidal
            } else {
                PositionalEncoding::Off
            },
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel != 3 || self.stride != 1 || self.pool_kernel != 2 {
            return Err(Error::Config(format!(
                "only kernel 3, stride 1, pool 2 are supported (got {}, {}, {})",
                self.kernel, self.stride, self.pool_kernel
            )));
        }
        if self.heads == 0 || self.conv2_out % self.heads != 0 {
            return Err(Error::Config(format!(
                "model width {} not divisible by {} heads",
                self.conv2_out, self.heads
            )));
        }
        if self.head_out != 1 && self.head_out != 5 {
            return Err(Error::Config(format!("head_out must be 1 or 5, got {}", self.head_out)));
        }
        if self.conv1_out == 0 || self.conv2_out == 0 || self.ffn_hidden == 0 || self.encoder_blocks == 0 {
            return Err(Error::Config("layer widths and block count must be positive".into()));
        }
        for p in [self.cnn_dropout, self.trans_dropout] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("dropout {p} outside [0, 1)")));
            }
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Names and shapes of every learnable tensor, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.conv2_out;
        let mut v = vec![
            ("conv1.weight".to_string(), vec![self.conv1_out, 1, 3]),
            ("conv1.bias".to_string(), vec![self.conv1_out]),
            ("conv2.weight".to_string(), vec![d, self.conv1_out, 3]),
            ("conv2.bias".to_string(), vec![d]),
        ];
        for b in 0..self.encoder_blocks {
            for proj in ["q", "k", "v", "o"] {
                v.push((format!("block{b}.attn.w{proj}"), vec![d, d]));
                v.push((format!("block{b}.attn.b{proj}"), vec![d]));
            }
            v.push((format!("block{b}.norm1.gamma"), vec![d]));
            v.push((format!("block{b}.norm1.beta"), vec![d]));
            v.push((format!("block{b}.ffn1.weight"), vec![self.ffn_hidden, d]));
            v.push((format!("block{b}.ffn1.bias"), vec![self.ffn_hidden]));
            v.push((format!("block{b}.ffn2.weight"), vec![d, self.ffn_hidden]));
            v.push((format!("block{b}.ffn2.bias"), vec![d]));
            v.push((format!("block{b}.norm2.gamma"), vec![d]));
            v.push((format!("block{b}.norm2.beta"), vec![d]));
        }
        v.push(("head.weight".to_string(), vec![self.head_out, d]));
        v.push(("head.bias".to_string(), vec![self.head_out]));
        v
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// All learnable tensors of a ConvTransformer, in the order of
/// [`ModelConfig::param_shapes`]. Values are kept at `f32` precision so that
/// checkpoints round-trip exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    entries: Vec<(String, Tensor)>,
}

impl ModelParams {
    /// Uniform(−1/√fan_in, 1/√fan_in) for convolution and linear weights and
    /// biases; ones/zeros for layer-norm gains/offsets.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(derive_tagged(seed, "init", 0));
        let entries = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let tensor = if name.ends_with(".gamma") {
                    Tensor::full(&shape, 1.0)
                } else if name.ends_with(".beta") {
                    Tensor::zeros(&shape)
                } else {
                    let fan_in = fan_in(&name, config);
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let mut t = Tensor::from_fn(&shape, |_| rng.gen_range(-bound..bound));
                    t.round_to_f32();
                    t
                };
                (name, tensor)
            })
            .collect();
        Ok(Self { entries })
    }

    pub fn from_entries(config: &ModelConfig, entries: Vec<(String, Tensor)>) -> Result<Self> {
        let expected = config.param_shapes();
        if expected.len() != entries.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                entries.len()
            )));
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(&entries) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::Config(format!(
                    "parameter {got_name} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Zeroes the final linear layer, making every output exactly 0.
    pub fn zero_head(&mut self) {
        for name in ["head.weight", "head.bias"] {
            if let Some(t) = self.get_mut(name) {
                t.data_mut().fill(0.0);
            }
        }
    }

    /// Adds every tensor to `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> ParamVars {
        ParamVars(self.entries.iter().map(|(_, t)| g.param(t.clone())).collect())
    }

    /// SHA-256 over names, shapes and the `f32` bit patterns.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update((*v as f32).to_bits().to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}

fn fan_in(name: &str, config: &ModelConfig) -> usize {
    let d = config.conv2_out;
    if name.starts_with("conv1") {
        3
    } else if name.starts_with("conv2") {
        config.conv1_out * 3
    } else if name.contains(".ffn2.") {
        config.ffn_hidden
    } else {
        d
    }
}

/// Graph handles for a bound [`ModelParams`], in storage order.
#[derive(Debug, Clone)]
pub struct ParamVars(pub Vec<Var>);

struct Layout {
    blocks: usize,
}

impl Layout {
    const BLOCK: usize = 16;

    fn conv(&self, layer: usize) -> (usize, usize) {
        (2 * layer, 2 * layer + 1)
    }

    fn block_base(&self, b: usize) -> usize {
        4 + b * Self::BLOCK
    }

    fn head(&self) -> (usize, usize) {
        let base = 4 + self.blocks * Self::BLOCK;
        (base, base + 1)
    }
}

fn layer_error(layer: &str, e: Error) -> Error {
    match e {
        Error::Numeric { location, detail } => Error::Numeric {
            location: format!("{layer} ({location})"),
            detail,
        },
        other => other,
    }
}

/// Convolution stage: (B, 1, L) → pooled sequence (B, ⌊L/2⌋, d_model).
pub fn conv_stage(
    g: &mut Graph,
    p: &ParamVars,
    config: &ModelConfig,
    input: Var,
    training: bool,
    seed: u64,
) -> Result<Var> {
    let shape = g.shape(input).to_vec();
    if shape.len() != 3 || shape[1] != 1 {
        return Err(Error::Shape(format!("model input must be (B, 1, L), got {shape:?}")));
    }
    if shape[2] < MIN_LENGTH {
        return Err(Error::TooShort {
            length: shape[2],
            minimum: MIN_LENGTH,
        });
    }
    let layout = Layout { blocks: config.encoder_blocks };
    let mut x = input;
    for layer in 0..2 {
        let name = format!("conv{}", layer + 1);
        let (w, b) = layout.conv(layer);
        x = (|| {
            let c = g.conv1d(x, p.0[w], p.0[b])?;
            let r = g.relu(c)?;
            g.dropout(r, config.cnn_dropout, training, derive_tagged(seed, "dropout", layer as u64))
        })()
        .map_err(|e| layer_error(&name, e))?;
    }
    let pooled = g.maxpool1d(x).map_err(|e| layer_error("pool", e))?;
    g.transpose12(pooled)
}

/// Post-norm encoder block:
/// y = Dropout(LayerNorm(x + MHA(x))); z = Dropout(W₂·ReLU(W₁·y));
/// out = LayerNorm(y + z).
pub fn encoder_block(
    g: &mut Graph,
    p: &ParamVars,
    config: &ModelConfig,
    block: usize,
    x: Var,
    training: bool,
    seed: u64,
) -> Result<Var> {
    let name = format!("block{block}");
    let base = Layout { blocks: config.encoder_blocks }.block_base(block);
    let v = |k: usize| p.0[base + k];
    let attn = AttentionVars {
        wq: v(0),
        bq: v(1),
        wk: v(2),
        bk: v(3),
        wv: v(4),
        bv: v(5),
        wo: v(6),
        bo: v(7),
    };
    let eps = config.layer_norm_eps;
    let site = |k: u64| derive_tagged(seed, "dropout", 100 + 10 * block as u64 + k);
    (|| {
        let a = g.multi_head_attention(x, &attn, config.heads)?;
        let r = g.add(x, a)?;
        let n = g.layer_norm(r, v(8), v(9), eps)?;
        let y = g.dropout(n, config.trans_dropout, training, site(0))?;
        let h = g.linear(y, v(10), v(11))?;
        let h = g.relu(h)?;
        let z = g.linear(h, v(12), v(13))?;
        let z = g.dropout(z, config.trans_dropout, training, site(1))?;
        let r2 = g.add(y, z)?;
        g.layer_norm(r2, v(14), v(15), eps)
    })()
    .map_err(|e| layer_error(&name, e))
}

/// Everything after the convolution stage: optional position encodings,
/// encoder blocks, column-wise max and the head.
pub fn encoder_stage(
    g: &mut Graph,
    p: &ParamVars,
    config: &ModelConfig,
    seq: Var,
    training: bool,
    seed: u64,
) -> Result<Var> {
    let mut x = seq;
    if config.positional_encoding == PositionalEncoding::Sinusoidal {
        let s = g.shape(x).to_vec();
        x = g.add_const(x, &sinusoidal_encoding(s[1], s[2]))?;
    }
    for b in 0..config.encoder_blocks {
        x = encoder_block(g, p, config, b, x, training, seed)?;
    }
    let pooled = g.max_over_seq(x).map_err(|e| layer_error("readout", e))?;
    let (w, b) = Layout { blocks: config.encoder_blocks }.head();
    g.linear(pooled, p.0[w], p.0[b]).map_err(|e| layer_error("head", e))
}

/// Builds the full forward pass on `g` and returns the (B, head_out) output.
pub fn forward_graph(
    g: &mut Graph,
    p: &ParamVars,
    config: &ModelConfig,
    input: Var,
    training: bool,
    seed: u64,
) -> Result<Var> {
    let seq = conv_stage(g, p, config, input, training, seed)?;
    encoder_stage(g, p, config, seq, training, seed)
}

/// Forward pass on a (B, 1, L) batch without recording gradients.
pub fn forward(params: &ModelParams, config: &ModelConfig, batch: &Tensor, training: bool, seed: u64) -> Result<Tensor> {
    config.validate()?;
    let mut g = Graph::inference();
    let vars = ParamVars(params.entries.iter().map(|(_, t)| g.constant(t.clone())).collect());
    let x = g.constant(batch.clone());
    let out = forward_graph(&mut g, &vars, config, x, training, seed)?;
    Ok(g.value(out).clone())
}

/// Stacks equal-length position sequences into a (B, 1, L) tensor.
pub fn batch_tensor(sequences: &[&[f64]]) -> Result<Tensor> {
    let len = sequences.first().map(|s| s.len()).unwrap_or(0);
    if sequences.iter().any(|s| s.len() != len) {
        return Err(Error::Shape("batch mixes trajectory lengths".into()));
    }
    let data: Vec<f64> = sequences.iter().flat_map(|s| s.iter().copied()).collect();
    Tensor::new(vec![sequences.len(), 1, len], data)
}

/// Evaluation-mode outputs for many sequences, grouped by length into
/// batches of at most `batch_size`. Returns one output row per input, in
/// input order.
pub fn predict_raw(
    params: &ModelParams,
    config: &ModelConfig,
    sequences: &[&[f64]],
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    order.sort_by_key(|&i| (sequences[i].len(), i));
    let mut out = vec![Vec::new(); sequences.len()];
    let mut start = 0;
    while start < order.len() {
        let len = sequences[order[start]].len();
        let mut end = start;
        while end < order.len() && end - start < batch_size.max(1) && sequences[order[end]].len() == len {
            end += 1;
        }
        let idx = &order[start..end];
        let batch: Vec<&[f64]> = idx.iter().map(|&i| sequences[i]).collect();
        let y = forward(params, config, &batch_tensor(&batch)?, false, 0)?;
        for (row, &i) in y.data().chunks(config.head_out).zip(idx) {
            out[i] = row.to_vec();
        }
        start = end;
    }
    Ok(out)
}

fn standardized(traj: &Trajectory) -> Result<Vec<f64>> {
    if traj.len() < MIN_LENGTH {
        return Err(Error::TooShort {
            length: traj.len(),
            minimum: MIN_LENGTH,
        });
    }
    normalize_positions(&traj.positions)
}

/// Predicted anomalous exponent. The raw head output is returned unclipped.
pub fn predict_alpha(params: &ModelParams, config: &ModelConfig, traj: &Trajectory) -> Result<f64> {
    if config.head_out != 1 {
        return Err(Error::Config("predict_alpha needs a regression model (head_out = 1)".into()));
    }
    let x = standardized(traj)?;
    let y = forward(params, config, &batch_tensor(&[&x])?, false, 0)?;
    Ok(y.data()[0])
}

/// Softmax probabilities and their argmax; ties go to the lowest code.
pub fn class_probabilities(logits: &[f64]) -> (DiffusionModel, [f64; 5]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut probs = [0.0; 5];
    for (p, e) in probs.iter_mut().zip(&exps) {
        *p = e / total;
    }
    let mut best = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = i;
        }
    }
    (DiffusionModel::ALL[best], probs)
}

pub fn predict_model(
    params: &ModelParams,
    config: &ModelConfig,
    traj: &Trajectory,
) -> Result<(DiffusionModel, [f64; 5])> {
    if config.head_out != 5 {
        return Err(Error::Config("predict_model needs a classification model (head_out = 5)".into()));
    }
    let x = standardized(traj)?;
    let y = forward(params, config, &batch_tensor(&[&x])?, false, 0)?;
    Ok(class_probabilities(y.data()))
}

#[cfg(test)]
mod tests;
