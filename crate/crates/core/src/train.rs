//! Continual-alignment training on the synthetic world: continued SFT,
//! GT-DPO, nSFT and their KL-regularized variants.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::construct::{
    balance_yes_no, construct_conversation, ConstructionStyle, Conversation, ErrorCodebook, ErrorOracle, Provenance,
    RuleOracle, Turn,
};
use crate::error::{Error, Result};
use crate::losses::{conversation_sft_var, dpo_loss_from_logit, sequence_logprob_var, PreferenceSample};
use crate::model::{position_distributions, InputContext, ModelParams, ParamVars};
use crate::world::{derive_seed, WorldSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ContSft,
    GtDpo,
    Nsft,
    SftKl,
    NsftKl,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::ContSft,
        Method::GtDpo,
        Method::Nsft,
        Method::SftKl,
        Method::NsftKl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::ContSft => "cont_sft",
            Method::GtDpo => "gt_dpo",
            Method::Nsft => "nsft",
            Method::SftKl => "sft_kl",
            Method::NsftKl => "nsft_kl",
        }
    }

    fn uses_constructed(self) -> bool {
        matches!(self, Method::Nsft | Method::NsftKl)
    }

    fn uses_kl(self) -> bool {
        matches!(self, Method::SftKl | Method::NsftKl)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta: f64,
    pub kl_weight: f64,
    pub steps: usize,
    pub seed: u64,
    pub schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::ContSft,
            batch_size: 16,
            lr: 1e-2,
            weight_decay: 0.0,
            beta: 0.1,
            kl_weight: 0.1,
            steps: 500,
            seed: 0,
            schedule: LrSchedule::Cosine,
        }
    }
}

impl TrainConfig {
    /// Hyperparameters of the 7B-scale recipe, for reference runs.
    pub fn seven_b_scale() -> Self {
        Self {
            batch_size: 128,
            lr: 2e-6,
            weight_decay: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::contract(format!(
                "learning rate {} must be finite and non-negative",
                self.lr
            )));
        }
        if !(self.beta > 0.0) {
            return Err(Error::contract(format!("beta {} must be positive", self.beta)));
        }
        if !(self.kl_weight >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::contract("kl_weight and weight_decay must be non-negative"));
        }
        Ok(())
    }
}

/// `base · (1 + cos(π · step / total)) / 2`.
pub fn cosine_lr(step: usize, total: usize, base_lr: f64) -> Result<f64> {
    if step > total {
        return Err(Error::contract(format!("step {step} beyond schedule length {total}")));
    }
    if total == 0 {
        return Ok(base_lr);
    }
    let frac = step as f64 / total as f64;
    Ok(base_lr * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0)
}

/// One training unit: the preference pair, its GT conversation and the
/// constructed negative-supervision conversation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainExample {
    pub preference: PreferenceSample,
    pub gt: Conversation,
    pub constructed: Option<Conversation>,
}

impl TrainExample {
    pub fn image_latent(&self) -> &[f64] {
        &self.preference.context.image_latent
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstructOptions {
    pub turns: usize,
    pub style: ConstructionStyle,
    /// Yes-fraction band applied to constructed conversations.
    pub yes_band: Option<(f64, f64)>,
    pub seed: u64,
}

impl Default for ConstructOptions {
    fn default() -> Self {
        Self {
            turns: crate::construct::DEFAULT_TURNS,
            style: ConstructionStyle::Caption,
            yes_band: Some(crate::construct::DEFAULT_YES_BAND),
            seed: 0,
        }
    }
}

/// Runs the rule-based oracle and conversation builder on each sample.
pub fn prepare_examples(samples: &[WorldSample], opts: &ConstructOptions) -> Result<Vec<TrainExample>> {
    let prefs: Vec<PreferenceSample> = samples.iter().map(WorldSample::preference).collect();
    prepare_preference_examples(&prefs, opts)
}

/// As [`prepare_examples`] for preference pairs from any source.
pub fn prepare_preference_examples(prefs: &[PreferenceSample], opts: &ConstructOptions) -> Result<Vec<TrainExample>> {
    prepare_examples_with(&RuleOracle, &ErrorCodebook::builtin(), prefs, opts)
}

/// As [`prepare_preference_examples`] with any error oracle and codebook.
pub fn prepare_examples_with(
    oracle: &dyn ErrorOracle,
    codebook: &ErrorCodebook,
    prefs: &[PreferenceSample],
    opts: &ConstructOptions,
) -> Result<Vec<TrainExample>> {
    prefs
        .iter()
        .enumerate()
        .map(|(i, pref)| {
            let pref = pref.clone();
            let errors = oracle.identify_errors(&pref.rejected, &pref.chosen, codebook)?;
            let mut constructed =
                construct_conversation(&errors, &pref.rejected, &pref.chosen, opts.turns, opts.style)?;
            if let Some((lo, hi)) = opts.yes_band {
                constructed = balance_yes_no(&constructed, lo, hi, derive_seed(opts.seed, i as u64))?;
            }
            let gt = Conversation::new(
                vec![Turn::new(pref.context.question.clone(), pref.chosen.clone())],
                Provenance::Gt,
            )?;
            Ok(TrainExample {
                preference: pref,
                gt,
                constructed: Some(constructed),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Batch mean of `log π(y_c|x)` before the update.
    pub chosen_logprob: f64,
    pub rejected_logprob: f64,
    /// Batch geometric means of `π/π_ref` for chosen and rejected (DPO only).
    pub t1: Option<f64>,
    pub t2: Option<f64>,
    /// Batch mean DPO logit (DPO only).
    pub p_dpo: Option<f64>,
    /// Batch mean per-token KL to the reference on chosen answers.
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub records: Vec<StepRecord>,
}

impl TrajectoryLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "step",
            "lr",
            "loss",
            "chosen_logprob",
            "rejected_logprob",
            "t1",
            "t2",
            "p_dpo",
            "kl",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            w.write_record([
                r.step.to_string(),
                r.lr.to_string(),
                r.loss.to_string(),
                r.chosen_logprob.to_string(),
                r.rejected_logprob.to_string(),
                opt(r.t1),
                opt(r.t2),
                opt(r.p_dpo),
                r.kl.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Reference-model quantities for one example, computed once.
#[derive(Debug, Clone)]
pub struct ReferenceCache {
    chosen_logprob: f64,
    rejected_logprob: f64,
    /// `[|y_c| x V]` reference log distributions along the chosen answer.
    chosen_dists: Tensor,
}

impl ReferenceCache {
    pub fn new(reference: &ModelParams, pref: &PreferenceSample) -> Result<Self> {
        let dists = position_distributions(reference, &pref.context, &pref.chosen)?;
        let v = reference.config.vocab_size;
        let chosen_logprob = dists.iter().zip(&pref.chosen).map(|(row, &t)| row[t]).sum();
        let flat: Vec<f64> = dists.into_iter().flatten().collect();
        Ok(Self {
            chosen_logprob,
            rejected_logprob: crate::losses::sequence_logprob(reference, &pref.context, &pref.rejected)?,
            chosen_dists: Tensor::matrix(pref.chosen.len(), v, flat)?,
        })
    }
}

/// Per-token KL on `y` against cached reference distributions.
fn cached_kl_var(
    g: &mut Graph,
    vars: &ParamVars,
    params: &ModelParams,
    ctx: &InputContext,
    y: &[usize],
    reference_dists: &Tensor,
) -> Result<Var> {
    let lp = crate::model::position_logprobs_var(g, vars, &params.config, ctx, &y[..y.len() - 1])?;
    let lq = g.constant(reference_dists.clone());
    let p = g.exp(lp);
    let diff = g.sub(lp, lq)?;
    let terms = g.mul(p, diff)?;
    let total = g.sum(terms);
    Ok(g.scale(total, 1.0 / y.len() as f64))
}

struct BatchOutput {
    loss: Var,
    chosen: Vec<Var>,
    rejected: Vec<Var>,
    kl: Vec<Var>,
}

fn build_batch(
    g: &mut Graph,
    vars: &ParamVars,
    params: &ModelParams,
    config: &TrainConfig,
    batch: &[(&TrainExample, &ReferenceCache)],
) -> Result<BatchOutput> {
    let cfg = &params.config;
    let mut terms = Vec::with_capacity(batch.len());
    let (mut chosen, mut rejected, mut kls) = (Vec::new(), Vec::new(), Vec::new());
    for (ex, rc) in batch {
        let pref = &ex.preference;
        let pc = sequence_logprob_var(g, vars, cfg, &pref.context, &pref.chosen)?;
        let pr = sequence_logprob_var(g, vars, cfg, &pref.context, &pref.rejected)?;
        let kl = cached_kl_var(g, vars, params, &pref.context, &pref.chosen, &rc.chosen_dists)?;
        chosen.push(pc);
        rejected.push(pr);
        kls.push(kl);
        let term = match config.method {
            Method::GtDpo => {
                let ref_c = g.constant(Tensor::scalar(rc.chosen_logprob));
                let ref_r = g.constant(Tensor::scalar(rc.rejected_logprob));
                let chosen = g.sub(pc, ref_c)?;
                let rejected = g.sub(pr, ref_r)?;
                let logit = g.sub(chosen, rejected)?;
                dpo_loss_from_logit(g, logit, config.beta)
            }
            m => {
                let mut t = conversation_sft_var(g, vars, cfg, ex.image_latent(), &ex.gt)?;
                if m.uses_constructed() {
                    if let Some(c) = ex.constructed.as_ref().filter(|c| !c.is_empty()) {
                        let neg = conversation_sft_var(g, vars, cfg, ex.image_latent(), c)?;
                        t = g.add(t, neg)?;
                    }
                }
                if m.uses_kl() {
                    let k = g.scale(kl, config.kl_weight);
                    t = g.add(t, k)?;
                }
                t
            }
        };
        terms.push(term);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(BatchOutput {
        loss: g.scale(total, 1.0 / batch.len() as f64),
        chosen,
        rejected,
        kl: kls,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Trains a copy of `init`; the frozen reference is `init` itself.
pub fn train(config: &TrainConfig, init: &ModelParams, data: &[TrainExample]) -> Result<(ModelParams, TrajectoryLog)> {
    let refs = data
        .iter()
        .map(|ex| ReferenceCache::new(init, &ex.preference))
        .collect::<Result<Vec<_>>>()?;
    train_with_cache(config, init, data, &refs)
}

/// As [`train`], with reference quantities precomputed by the caller.
pub fn train_with_cache(
    config: &TrainConfig,
    init: &ModelParams,
    data: &[TrainExample],
    refs: &[ReferenceCache],
) -> Result<(ModelParams, TrajectoryLog)> {
    config.validate()?;
    init.validate()?;
    let mut params = init.clone();
    let mut log = TrajectoryLog::default();
    if config.steps == 0 {
        return Ok((params, log));
    }
    if data.is_empty() {
        return Err(Error::contract("training needs at least one example"));
    }
    if refs.len() != data.len() {
        return Err(Error::contract("reference cache does not match the dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0xBA7C));
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    for step in 0..config.steps {
        let mut idx = Vec::with_capacity(config.batch_size);
        while idx.len() < config.batch_size {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let batch: Vec<(&TrainExample, &ReferenceCache)> = idx.iter().map(|&i| (&data[i], &refs[i])).collect();

        let mut g = Graph::new();
        let vars = params.bind(&mut g, true);
        let out = build_batch(&mut g, &vars, &params, config, &batch)?;
        let loss = g.scalar(out.loss);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let grads = g.backward(out.loss)?;

        let chosen: Vec<f64> = out.chosen.iter().map(|v| g.scalar(*v)).collect();
        let rejected: Vec<f64> = out.rejected.iter().map(|v| g.scalar(*v)).collect();
        let (t1, t2, p_dpo) = if config.method == Method::GtDpo {
            let lc = mean(batch.iter().zip(&chosen).map(|((_, r), c)| c - r.chosen_logprob));
            let lr = mean(batch.iter().zip(&rejected).map(|((_, r), c)| c - r.rejected_logprob));
            (Some(lc.exp()), Some(lr.exp()), Some(lc - lr))
        } else {
            (None, None, None)
        };
        let lr = match config.schedule {
            LrSchedule::Cosine => cosine_lr(step, config.steps, config.lr)?,
            LrSchedule::Constant => config.lr,
        };
        log.records.push(StepRecord {
            step,
            lr,
            loss,
            chosen_logprob: mean(chosen.iter().copied()),
            rejected_logprob: mean(rejected.iter().copied()),
            t1,
            t2,
            p_dpo,
            kl: mean(out.kl.iter().map(|v| g.scalar(*v))),
        });

        if lr != 0.0 {
            for (t, v) in params.tensors_mut().into_iter().zip(vars.all()) {
                let grad = grads.get(v).expect("trainable leaf");
                let wd = config.weight_decay;
                for (w, gr) in t.data_mut().iter_mut().zip(grad.data()) {
                    *w -= lr * (gr + wd * *w);
                }
            }
        }
    }
    Ok((params, log))
}
