//! Seeded end-to-end comparison of continual-alignment methods on the
//! synthetic world.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::construct::{Conversation, Provenance};
use crate::error::{Error, Result};
use crate::losses::{per_token_kl, sequence_logprob, PreferenceSample};
use crate::metrics::{chair, CaptionEval, ChairScores};
use crate::model::{greedy_decode, InputContext, ModelConfig, ModelParams};
use crate::theory::{bias_trajectory_report, BiasReport, DEFAULT_WARMUP_FRAC};
use crate::train::{
    prepare_examples, prepare_preference_examples, train_with_cache, ConstructOptions, Method, ReferenceCache,
    TrainConfig, TrainExample, TrajectoryLog,
};
use crate::world::{
    caption_question, derive_seed, generate_scene, make_preference_dataset, make_preference_dataset_in, vocab, Scene,
    WorldConfig, WorldSample, LATENT_DIM, MAX_CAPTION_LEN,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Scenes in the pretraining world, drawn from `world_seed`.
    pub n: usize,
    pub world_seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Also train on GT-grounded question/answer turns.
    pub qa_turns: usize,
    pub world: WorldConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            world_seed: 1_000_003,
            steps: 1500,
            batch_size: 16,
            lr: 0.05,
            qa_turns: 0,
            // co-occurring pairs make the base model hallucinate companions
            world: WorldConfig { companion_prob: 0.9 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub init_seed: u64,
    pub pretrain: PretrainConfig,
    /// Size and seed of the alignment preference set.
    pub data_n: usize,
    pub data_seed: u64,
    pub eval_n: usize,
    pub eval_seed: u64,
    pub construct: ConstructOptions,
    pub rejected_source: RejectedSource,
    /// Shared hyperparameters; `method` is overridden per run.
    pub train: TrainConfig,
    pub methods: Vec<Method>,
    pub warmup_frac: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                vocab_size: vocab::VOCAB_SIZE,
                dim: 32,
                latent_dim: LATENT_DIM,
                blocks: 2,
            },
            init_seed: 0,
            pretrain: PretrainConfig::default(),
            data_n: 500,
            data_seed: 0,
            eval_n: 1000,
            eval_seed: 2_000_003,
            construct: ConstructOptions::default(),
            rejected_source: RejectedSource::default(),
            train: TrainConfig::default(),
            methods: vec![Method::ContSft, Method::GtDpo, Method::Nsft, Method::SftKl],
            warmup_frac: DEFAULT_WARMUP_FRAC,
        }
    }
}

/// Where rejected responses come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectedSource {
    /// Injected corruptions of the GT caption.
    Corruption,
    /// The initial model's own greedy caption where it differs from the GT,
    /// otherwise the injected corruption.
    #[default]
    SelfOrCorruption,
}

/// Preference pairs for `samples`, with rejected responses from `source`.
pub fn preference_pairs(
    samples: &[WorldSample],
    model: &ModelParams,
    source: RejectedSource,
) -> Result<Vec<PreferenceSample>> {
    samples
        .iter()
        .map(|s| {
            let mut p = s.preference();
            if source == RejectedSource::SelfOrCorruption {
                let own = greedy_decode(model, &p.context, MAX_CAPTION_LEN)?;
                if own != p.chosen {
                    p.rejected = own;
                }
            }
            Ok(p)
        })
        .collect()
}

/// Held-out scenes for caption evaluation.
pub fn held_out_scenes(n: usize, seed: u64) -> Vec<Scene> {
    (0..n as u64).map(|i| generate_scene(derive_seed(seed, i))).collect()
}

pub fn caption_context(scene: &Scene) -> InputContext {
    InputContext::new(scene.featurize(), caption_question())
}

/// CHAIR of greedy captions on `scenes`.
pub fn evaluate_chair(params: &ModelParams, scenes: &[Scene]) -> Result<ChairScores> {
    let evals = scenes
        .iter()
        .map(|s| {
            let out = greedy_decode(params, &caption_context(s), MAX_CAPTION_LEN)?;
            Ok(CaptionEval::from_tokens(&out, s))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(chair(&evals))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub chosen_logprob: f64,
    pub rejected_logprob: f64,
    pub kl: f64,
}

/// Mean chosen/rejected log-probs on the preference set, and mean per-token
/// KL to `reference` on chosen answers.
pub fn dataset_stats(params: &ModelParams, reference: &ModelParams, data: &[TrainExample]) -> Result<DatasetStats> {
    let n = data.len() as f64;
    let (mut c, mut r, mut k) = (0.0, 0.0, 0.0);
    for ex in data {
        let p = &ex.preference;
        c += sequence_logprob(params, &p.context, &p.chosen)?;
        r += sequence_logprob(params, &p.context, &p.rejected)?;
        k += per_token_kl(params, reference, &p.context, &p.chosen)?;
    }
    Ok(DatasetStats {
        chosen_logprob: c / n,
        rejected_logprob: r / n,
        kl: k / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub chair_i: Option<f64>,
    pub chair_s: Option<f64>,
    pub chair_avg: Option<f64>,
    pub chosen_logprob_delta: f64,
    pub rejected_logprob_delta: f64,
    pub kl_drift: f64,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<MethodRow>,
}

impl ComparisonReport {
    pub fn row(&self, method: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "method",
            "chair_i",
            "chair_s",
            "chair_avg",
            "chosen_logprob_delta",
            "rejected_logprob_delta",
            "kl_drift",
            "final_loss",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.method.clone(),
                opt(r.chair_i),
                opt(r.chair_s),
                opt(r.chair_avg),
                r.chosen_logprob_delta.to_string(),
                r.rejected_logprob_delta.to_string(),
                r.kl_drift.to_string(),
                opt(r.final_loss),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

fn row(
    label: &str,
    params: &ModelParams,
    init: &ModelParams,
    base: &DatasetStats,
    data: &[TrainExample],
    eval: &[Scene],
    final_loss: Option<f64>,
) -> Result<MethodRow> {
    let scores = evaluate_chair(params, eval)?;
    let stats = dataset_stats(params, init, data)?;
    Ok(MethodRow {
        method: label.to_string(),
        chair_i: scores.chair_i,
        chair_s: scores.chair_s,
        chair_avg: scores.chair_avg,
        chosen_logprob_delta: stats.chosen_logprob - base.chosen_logprob,
        rejected_logprob_delta: stats.rejected_logprob - base.rejected_logprob,
        kl_drift: stats.kl,
        final_loss,
    })
}

/// Trains every config from the same `init` on the same data, evaluating
/// each result. The first row is the untrained baseline. Runs in parallel,
/// output order follows `configs`.
pub fn compare_methods(
    configs: &[TrainConfig],
    init: &ModelParams,
    data: &[TrainExample],
    eval: &[Scene],
) -> Result<(ComparisonReport, Vec<TrajectoryLog>)> {
    let refs = data
        .iter()
        .map(|ex| ReferenceCache::new(init, &ex.preference))
        .collect::<Result<Vec<_>>>()?;
    let base = dataset_stats(init, init, data)?;
    let results: Vec<Result<(MethodRow, TrajectoryLog)>> = std::thread::scope(|s| {
        let handles: Vec<_> = configs
            .iter()
            .map(|cfg| {
                let refs = &refs;
                let base = &base;
                s.spawn(move || {
                    let (params, log) = train_with_cache(cfg, init, data, refs)?;
                    let last = log.records.last().map(|r| r.loss);
                    Ok((row(cfg.method.name(), &params, init, base, data, eval, last)?, log))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::contract("training thread panicked")))
            })
            .collect()
    });
    let mut rows = vec![row("base", init, init, &base, data, eval, None)?];
    let mut logs = Vec::with_capacity(configs.len());
    for r in results {
        let (row, log) = r?;
        rows.push(row);
        logs.push(log);
    }
    Ok((ComparisonReport { rows }, logs))
}

/// Base-model training: SFT on GT captions (and optionally GT-grounded
/// question/answer turns) of a separate world.
pub fn pretrain(model: ModelConfig, init_seed: u64, cfg: &PretrainConfig) -> Result<ModelParams> {
    let init = ModelParams::init(model, init_seed)?;
    if cfg.steps == 0 {
        return Ok(init);
    }
    let samples = make_preference_dataset_in(cfg.n, cfg.world_seed, &cfg.world)?;
    let opts = ConstructOptions {
        turns: cfg.qa_turns.max(1),
        yes_band: None,
        ..ConstructOptions::default()
    };
    let mut data = prepare_examples(&samples, &opts)?;
    for ex in &mut data {
        let mut turns = ex.gt.turns.clone();
        if cfg.qa_turns > 0 {
            // grounded turns only: rebuild from the GT caption with no errors
            let qa = crate::construct::construct_conversation(
                &[],
                &ex.preference.chosen,
                &ex.preference.chosen,
                cfg.qa_turns,
                opts.style,
            )?;
            turns.extend(qa.turns);
        }
        ex.gt = Conversation::new(turns, Provenance::Gt)?;
        ex.constructed = None;
    }
    let tc = TrainConfig {
        method: Method::ContSft,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        steps: cfg.steps,
        seed: init_seed,
        ..TrainConfig::default()
    };
    let (params, _) = crate::train::train(&tc, &init, &data)?;
    Ok(params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub comparison: ComparisonReport,
    pub logs: BTreeMap<String, TrajectoryLog>,
    /// Reject-bias report of the GT-DPO run, when one was trained.
    pub bias: Option<BiasReport>,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let init = pretrain(cfg.model, cfg.init_seed, &cfg.pretrain)?;
    let samples = make_preference_dataset(cfg.data_n, cfg.data_seed)?;
    let pairs = preference_pairs(&samples, &init, cfg.rejected_source)?;
    let data = prepare_preference_examples(&pairs, &cfg.construct)?;
    let eval = held_out_scenes(cfg.eval_n, cfg.eval_seed);
    let configs: Vec<TrainConfig> = cfg
        .methods
        .iter()
        .map(|&m| TrainConfig {
            method: m,
            ..cfg.train.clone()
        })
        .collect();
    let (comparison, logs) = compare_methods(&configs, &init, &data, &eval)?;
    let mut by_name = BTreeMap::new();
    let mut bias = None;
    for (c, log) in configs.iter().zip(logs) {
        if c.method == Method::GtDpo && !log.is_empty() {
            bias = Some(bias_trajectory_report(&log, cfg.warmup_frac)?);
        }
        by_name.insert(c.method.name().to_string(), log);
    }
    Ok(ExperimentReport {
        comparison,
        logs: by_name,
        bias,
    })
}
