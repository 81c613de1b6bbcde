//! Tiny conditional autoregressive model with a single projected image slot.
//!
//! The context is `[H v ; embed(q)]`: one row produced by the linear image
//! projector followed by the question token embeddings. Position `i` of an
//! answer is predicted from three summaries of the prefix `x ++ y[..i]`:
//! the running mean of all prefix rows, the most recent row, and the image
//! row. These are mixed by an input matrix, passed through residual SiLU
//! blocks and projected onto the vocabulary.
//!
//! The projector is a stand-in for a vision encoder plus connector; nothing
//! about its internals matters for the loss identities built on top.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax_rows, Graph, Tensor, Var};
use crate::error::{Error, Result};

pub type TokenId = usize;

pub const CHECKPOINT_FORMAT: &str = "nsft-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub latent_dim: usize,
    pub blocks: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 16 {
            return Err(Error::contract(format!("vocab_size {} < 16", self.vocab_size)));
        }
        if self.dim < 8 {
            return Err(Error::contract(format!("dim {} < 8", self.dim)));
        }
        if self.latent_dim == 0 {
            return Err(Error::contract("latent_dim must be positive"));
        }
        if !(1..=2).contains(&self.blocks) {
            return Err(Error::contract(format!(
                "{} hidden blocks, expected 1 or 2",
                self.blocks
            )));
        }
        if self.parameter_count() > 1_000_000 {
            return Err(Error::contract(format!(
                "{} parameters exceeds the desk-scale budget",
                self.parameter_count()
            )));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        let (v, d, k) = (self.vocab_size, self.dim, self.latent_dim);
        v * d + k * d + 3 * d * d + self.blocks * d * d + d * v
    }

    /// End-of-answer token, always the last vocabulary id.
    pub fn eos(&self) -> TokenId {
        self.vocab_size - 1
    }
}

/// Weights of the toy model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `vocab x dim`
    pub embed: Tensor,
    /// `latent_dim x dim`, the image projector.
    pub projector: Tensor,
    /// `3·dim x dim`, mixes (prefix mean, previous row, image row).
    pub input: Tensor,
    /// `dim x dim` residual blocks.
    pub blocks: Vec<Tensor>,
    /// `dim x vocab`
    pub output: Tensor,
}

/// Conditioning for one answer: an image latent and a question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputContext {
    pub image_latent: Vec<f64>,
    pub question: Vec<TokenId>,
}

impl InputContext {
    pub fn new(image_latent: Vec<f64>, question: Vec<TokenId>) -> Self {
        Self { image_latent, question }
    }
}

/// Graph handles for one binding of [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub embed: Var,
    pub projector: Var,
    pub input: Var,
    pub blocks: Vec<Var>,
    pub output: Var,
}

impl ParamVars {
    /// Handles in the same order as [`ModelParams::tensors`].
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.embed, self.projector, self.input];
        v.extend(&self.blocks);
        v.push(self.output);
        v
    }
}

fn normal_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("sized")
}

impl ModelParams {
    /// Random initialization, deterministic in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, d, k) = (config.vocab_size, config.dim, config.latent_dim);
        let df = d as f64;
        Ok(Self {
            config,
            embed: normal_tensor(&mut rng, v, d, 1.0 / df.sqrt()),
            projector: normal_tensor(&mut rng, k, d, 1.0 / df.sqrt()),
            input: normal_tensor(&mut rng, 3 * d, d, 1.0 / (3.0 * df).sqrt()),
            blocks: (0..config.blocks)
                .map(|_| normal_tensor(&mut rng, d, d, 1.0 / df.sqrt()))
                .collect(),
            output: normal_tensor(&mut rng, d, v, 1.0 / df.sqrt()),
        })
    }

    /// All-zero weights: every position predicts the uniform distribution.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (v, d, k) = (config.vocab_size, config.dim, config.latent_dim);
        Ok(Self {
            config,
            embed: Tensor::zeros(vec![v, d]),
            projector: Tensor::zeros(vec![k, d]),
            input: Tensor::zeros(vec![3 * d, d]),
            blocks: (0..config.blocks).map(|_| Tensor::zeros(vec![d, d])).collect(),
            output: Tensor::zeros(vec![d, v]),
        })
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.embed, &self.projector, &self.input];
        v.extend(self.blocks.iter());
        v.push(&self.output);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.embed, &mut self.projector, &mut self.input];
        v.extend(self.blocks.iter_mut());
        v.push(&mut self.output);
        v
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut v = vec!["embed".to_string(), "projector".into(), "input".into()];
        v.extend((0..self.blocks.len()).map(|i| format!("block{i}")));
        v.push("output".into());
        v
    }

    /// Rebuilds parameters from tensors in [`ModelParams::tensors`] order.
    pub fn from_tensors(config: ModelConfig, tensors: &[Tensor]) -> Result<Self> {
        if tensors.len() != 4 + config.blocks {
            return Err(Error::contract(format!(
                "expected {} tensors, got {}",
                4 + config.blocks,
                tensors.len()
            )));
        }
        let p = Self {
            config,
            embed: tensors[0].clone(),
            projector: tensors[1].clone(),
            input: tensors[2].clone(),
            blocks: tensors[3..3 + config.blocks].to_vec(),
            output: tensors[3 + config.blocks].clone(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let (v, d, k) = (self.config.vocab_size, self.config.dim, self.config.latent_dim);
        let expected: Vec<Vec<usize>> = {
            let mut e = vec![vec![v, d], vec![k, d], vec![3 * d, d]];
            e.extend((0..self.config.blocks).map(|_| vec![d, d]));
            e.push(vec![d, v]);
            e
        };
        if self.blocks.len() != self.config.blocks {
            return Err(Error::contract("block count disagrees with config"));
        }
        for ((t, shape), name) in self.tensors().into_iter().zip(&expected).zip(self.tensor_names()) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "model_params",
                    detail: format!("{name}: {:?}, expected {shape:?}", t.shape()),
                });
            }
            if !t.is_finite() {
                return Err(Error::contract(format!("{name} has non-finite values")));
            }
        }
        Ok(())
    }

    /// Stable 64-bit fingerprint of the raw weight bits.
    pub fn fingerprint(&self) -> u64 {
        // FNV-1a over the IEEE bit patterns
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.tensors() {
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Adds the tensors to `graph`, trainable when `trainable` is set.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> ParamVars {
        let mut leaf = |t: &Tensor| {
            if trainable {
                graph.param(t)
            } else {
                graph.constant(t.clone())
            }
        };
        ParamVars {
            embed: leaf(&self.embed),
            projector: leaf(&self.projector),
            input: leaf(&self.input),
            blocks: self.blocks.iter().map(&mut leaf).collect(),
            output: leaf(&self.output),
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            params: self.clone(),
        };
        let text = serde_json::to_string(&ck)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(&text)
    }

    pub fn to_checkpoint_string(&self) -> Result<String> {
        Ok(serde_json::to_string(&Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            params: self.clone(),
        })?)
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::contract(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        ck.params.validate()?;
        Ok(ck.params)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    params: ModelParams,
}

fn check_context(config: &ModelConfig, ctx: &InputContext) -> Result<()> {
    if ctx.image_latent.len() != config.latent_dim {
        return Err(Error::Shape {
            op: "encode_context",
            detail: format!(
                "latent of length {} for projector input {}",
                ctx.image_latent.len(),
                config.latent_dim
            ),
        });
    }
    if ctx.image_latent.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("image latent has non-finite values"));
    }
    if ctx.question.is_empty() {
        return Err(Error::contract("question must be non-empty"));
    }
    check_tokens(config, &ctx.question)
}

fn check_tokens(config: &ModelConfig, ids: &[TokenId]) -> Result<()> {
    if let Some(bad) = ids.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::contract(format!(
            "token id {bad} outside vocabulary of {}",
            config.vocab_size
        )));
    }
    Ok(())
}

/// Prefix rows `[H v ; embed(q)]` on the graph.
pub fn encode_context_var(
    graph: &mut Graph,
    vars: &ParamVars,
    config: &ModelConfig,
    ctx: &InputContext,
) -> Result<Var> {
    check_context(config, ctx)?;
    let latent = graph.constant(Tensor::matrix(1, config.latent_dim, ctx.image_latent.clone())?);
    let image_row = graph.matmul(latent, vars.projector)?;
    let question = graph.gather_rows(vars.embed, &ctx.question)?;
    graph.concat_rows(&[image_row, question])
}

/// Prefix embedding sequence `x` with `1 + |q|` rows.
pub fn encode_context(params: &ModelParams, ctx: &InputContext) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let x = encode_context_var(&mut g, &vars, &params.config, ctx)?;
    Ok(g.value(x).clone())
}

/// Log-softmax rows `[(|prev| + 1) x V]`: row `i` is the next-token
/// distribution after `prev[..i]`.
pub fn position_logprobs_var(
    graph: &mut Graph,
    vars: &ParamVars,
    config: &ModelConfig,
    ctx: &InputContext,
    prev: &[TokenId],
) -> Result<Var> {
    check_tokens(config, prev)?;
    let context = encode_context_var(graph, vars, config, ctx)?;
    let x = if prev.is_empty() {
        context
    } else {
        let answer = graph.gather_rows(vars.embed, prev)?;
        graph.concat_rows(&[context, answer])?
    };
    let q = ctx.question.len();
    let positions = prev.len() + 1;
    let width = q + prev.len() + 1;

    let mut mean = vec![0.0; positions * width];
    let mut last = vec![0.0; positions * width];
    let mut image = vec![0.0; positions * width];
    for i in 0..positions {
        let count = q + i + 1;
        for j in 0..count {
            mean[i * width + j] = 1.0 / count as f64;
        }
        last[i * width + q + i] = 1.0;
        image[i * width] = 1.0;
    }
    let mean = graph.constant(Tensor::matrix(positions, width, mean)?);
    let last = graph.constant(Tensor::matrix(positions, width, last)?);
    let image = graph.constant(Tensor::matrix(positions, width, image)?);
    let mean = graph.matmul(mean, x)?;
    let last = graph.matmul(last, x)?;
    let image = graph.matmul(image, x)?;
    let features = graph.concat_cols(&[mean, last, image])?;

    let mut h = graph.matmul(features, vars.input)?;
    for &w in &vars.blocks {
        let pre = graph.matmul(h, w)?;
        let act = graph.silu(pre)?;
        h = graph.add(h, act)?;
    }
    let logits = graph.matmul(h, vars.output)?;
    graph.log_softmax_rows(logits)
}

/// Per-position `log π(y_i | y_<i, x)` as a graph vector of length `|y|`.
pub fn token_logprobs_var(
    graph: &mut Graph,
    vars: &ParamVars,
    config: &ModelConfig,
    ctx: &InputContext,
    y: &[TokenId],
) -> Result<Var> {
    if y.is_empty() {
        return Err(Error::contract("token_logprobs needs a non-empty sequence"));
    }
    check_tokens(config, y)?;
    let lp = position_logprobs_var(graph, vars, config, ctx, &y[..y.len() - 1])?;
    graph.pick(lp, y)
}

pub fn token_logprobs(params: &ModelParams, ctx: &InputContext, y: &[TokenId]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let lp = token_logprobs_var(&mut g, &vars, &params.config, ctx, y)?;
    Ok(g.value(lp).data().to_vec())
}

/// Full next-token log distribution at every position of `y`, `[|y| x V]`.
pub fn position_distributions(params: &ModelParams, ctx: &InputContext, y: &[TokenId]) -> Result<Vec<Vec<f64>>> {
    if y.is_empty() {
        return Err(Error::contract("position_distributions needs a non-empty sequence"));
    }
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let lp = position_logprobs_var(&mut g, &vars, &params.config, ctx, &y[..y.len() - 1])?;
    Ok(g.value(lp)
        .data()
        .chunks(params.config.vocab_size)
        .map(<[f64]>::to_vec)
        .collect())
}

/// Log distribution of the token following `prefix`.
pub fn next_token_logprobs(params: &ModelParams, ctx: &InputContext, prefix: &[TokenId]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let lp = position_logprobs_var(&mut g, &vars, &params.config, ctx, prefix)?;
    let v = params.config.vocab_size;
    let data = g.value(lp).data();
    Ok(data[data.len() - v..].to_vec())
}

/// Argmax decoding; stops after emitting the end token or `max_len` tokens.
/// Ties go to the lowest token id.
pub fn greedy_decode(params: &ModelParams, ctx: &InputContext, max_len: usize) -> Result<Vec<TokenId>> {
    if max_len == 0 {
        return Err(Error::contract("greedy_decode needs max_len >= 1"));
    }
    let eos = params.config.eos();
    let mut out = Vec::with_capacity(max_len);
    while out.len() < max_len {
        let lp = next_token_logprobs(params, ctx, &out)?;
        let mut best = 0;
        for (t, v) in lp.iter().enumerate() {
            if *v > lp[best] {
                best = t;
            }
        }
        out.push(best);
        if best == eos {
            break;
        }
    }
    Ok(out)
}

/// Plain (graph-free) log-softmax helper re-exported for oracles.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    log_softmax_rows(row, row.len())
}
