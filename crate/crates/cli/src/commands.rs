use std::path::Path;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use nsft_core::checks;
use nsft_core::construct::llava::LlavaRecord;
use nsft_core::construct::llm::{HttpTransport, LlmConfig, LlmOracle};
use nsft_core::construct::{ErrorCodebook, RuleOracle};
use nsft_core::experiment::{
    evaluate_chair, held_out_scenes, preference_pairs, pretrain, run_experiment, ExperimentConfig,
};
use nsft_core::io::{read_jsonl, write_jsonl};
use nsft_core::metrics::{
    aggregate_scores as aggregate, chair as chair_scores, write_aggregates_csv, write_chair_csv, CaptionEval,
    ScoreItem, ScoreSheet,
};
use nsft_core::model::ModelParams;
use nsft_core::theory::bias_trajectory_report;
use nsft_core::train::{prepare_examples_with, ConstructOptions, Method, TrainConfig};
use nsft_core::world::{derive_seed, make_preference_dataset_in, vocab, WorldConfig, WorldSample};

use crate::{
    load_config, AggregateArgs, ChairArgs, CheckTheoryArgs, CompareArgs, ConstructArgs, ExperimentArgs, GenWorldArgs,
    TrainArgs,
};

pub fn check_theory(a: &CheckTheoryArgs) -> Result<()> {
    if a.seeds == 0 {
        bail!("--seeds must be positive");
    }
    let results = checks::run_all(a.seeds, a.seed, a.beta)?;
    let lines: Vec<String> = results.iter().map(checks::CheckResult::line).collect();
    for l in &lines {
        println!("{l}");
    }
    if let Some(out) = &a.out {
        write_text(out, &(lines.join("\n") + "\n"))?;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        bail!("{failed} of {} invariant checks failed", results.len());
    }
    Ok(())
}

pub fn gen_world(a: &GenWorldArgs) -> Result<()> {
    let world: WorldConfig = a.config.as_deref().map(load_config).transpose()?.unwrap_or_default();
    world.validate()?;
    let samples = make_preference_dataset_in(a.n, a.seed, &world)?;
    write_jsonl(&a.out, &samples)?;
    println!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

pub fn construct(a: &ConstructArgs) -> Result<()> {
    let mut opts: ConstructOptions = a.config.as_deref().map(load_config).transpose()?.unwrap_or_default();
    opts.seed = a.seed;
    let samples: Vec<WorldSample> = match &a.input {
        Some(path) => read_jsonl(path)?,
        None => make_preference_dataset_in(a.n, a.seed, &WorldConfig::default())?,
    };
    let prefs: Vec<_> = samples.iter().map(WorldSample::preference).collect();
    let codebook = ErrorCodebook::builtin();
    let examples = match &a.llm_endpoint {
        Some(url) => {
            let transport = HttpTransport::from_env(url.clone(), Duration::from_secs(60));
            let mut oracle = LlmOracle::new(
                transport,
                LlmConfig {
                    model: a.llm_model.clone(),
                    turns: opts.turns,
                    ..LlmConfig::default()
                },
            );
            if let Some(audit) = &a.audit {
                oracle = oracle.with_audit_file(audit)?;
            }
            prepare_examples_with(&oracle, &codebook, &prefs, &opts)?
        }
        None => prepare_examples_with(&RuleOracle, &codebook, &prefs, &opts)?,
    };
    write_jsonl(&a.out, &examples)?;
    if let Some(path) = &a.llava {
        let records: Vec<LlavaRecord> = examples
            .iter()
            .enumerate()
            .filter_map(|(i, ex)| {
                let c = ex.constructed.as_ref()?;
                Some(LlavaRecord::from_conversation(
                    format!("{i}"),
                    format!("scene-{i}"),
                    c,
                    vocab::detokenize,
                ))
            })
            .collect();
        write_jsonl(path, &records)?;
    }
    let turns: usize = examples
        .iter()
        .filter_map(|e| e.constructed.as_ref())
        .map(|c| c.turns.len())
        .sum();
    println!(
        "wrote {} examples ({turns} corrective turns) to {}",
        examples.len(),
        a.out.display()
    );
    Ok(())
}

/// Applies the shared experiment flags on top of the config file.
fn experiment_config(a: &ExperimentArgs) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = a.config.as_deref().map(load_config).transpose()?.unwrap_or_default();
    if let Some(s) = a.seed {
        cfg.init_seed = s;
        cfg.data_seed = s;
        cfg.train.seed = s;
        cfg.construct.seed = s;
        cfg.pretrain.world_seed = derive_seed(s, 1);
        cfg.eval_seed = derive_seed(s, 2);
    }
    if let Some(n) = a.n {
        cfg.data_n = n;
    }
    if let Some(b) = a.beta {
        cfg.train.beta = b;
    }
    if let Some(k) = a.kl_weight {
        cfg.train.kl_weight = k;
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let cfg = experiment_config(&a.common)?;
    let out = &a.common.out;
    create_dir(out)?;
    let init = match &a.init {
        Some(path) => ModelParams::load_checkpoint(path)?,
        None => pretrain(cfg.model, cfg.init_seed, &cfg.pretrain)?,
    };
    let samples = make_preference_dataset_in(cfg.data_n, cfg.data_seed, &WorldConfig::default())?;
    let pairs = preference_pairs(&samples, &init, cfg.rejected_source)?;
    let data = prepare_examples_with(&RuleOracle, &ErrorCodebook::builtin(), &pairs, &cfg.construct)?;
    let tc = TrainConfig {
        method: a.method,
        ..cfg.train.clone()
    };
    let (params, log) = nsft_core::train::train(&tc, &init, &data)?;
    init.save_checkpoint(&out.join("init.json"))?;
    params.save_checkpoint(&out.join("checkpoint.json"))?;
    log.write_csv(&out.join("trajectory.csv"))?;
    if a.method == Method::GtDpo && !log.is_empty() {
        let bias = bias_trajectory_report(&log, cfg.warmup_frac)?;
        bias.write_csv(&out.join("bias.csv"))?;
        bias.write_summary_json(&out.join("bias_summary.json"))?;
    }
    if let Some(last) = log.records.last() {
        println!("{} steps, final loss {}", log.len(), last.loss);
    }
    Ok(())
}

pub fn compare(a: &CompareArgs) -> Result<()> {
    let mut cfg = experiment_config(&a.common)?;
    if !a.method.is_empty() {
        cfg.methods = a.method.clone();
    }
    let out = &a.common.out;
    create_dir(out)?;
    let report = run_experiment(&cfg)?;
    report.comparison.write_csv(&out.join("comparison.csv"))?;
    report.comparison.write_json(&out.join("comparison.json"))?;
    for (name, log) in &report.logs {
        log.write_csv(&out.join(format!("trajectory_{name}.csv")))?;
    }
    if let Some(bias) = &report.bias {
        bias.write_csv(&out.join("bias.csv"))?;
        bias.write_summary_json(&out.join("bias_summary.json"))?;
    }
    for r in &report.comparison.rows {
        let chair = r.chair_i.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        println!(
            "{:<9} chair_i={chair} d_chosen={:+.4} d_rejected={:+.4} kl={:.5}",
            r.method, r.chosen_logprob_delta, r.rejected_logprob_delta, r.kl_drift
        );
    }
    Ok(())
}

pub fn chair(a: &ChairArgs) -> Result<()> {
    let scores = match (&a.checkpoint, &a.input) {
        (Some(ck), _) => {
            let params = ModelParams::load_checkpoint(ck)?;
            evaluate_chair(&params, &held_out_scenes(a.n, a.seed))?
        }
        (None, Some(input)) => {
            let evals: Vec<CaptionEval<String>> = read_jsonl(input)?;
            chair_scores(&evals)
        }
        (None, None) => bail!("one of --checkpoint or --input is required"),
    };
    let json = serde_json::to_string_pretty(&scores)?;
    println!("{json}");
    if let Some(out) = &a.out {
        if out.extension().is_some_and(|e| e == "csv") {
            write_chair_csv(out, &scores)?;
        } else {
            write_text(out, &(json + "\n"))?;
        }
    }
    Ok(())
}

pub fn aggregate_scores(a: &AggregateArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let sheet = match serde_json::from_str::<ScoreSheet>(&text) {
        Ok(sheet) => sheet,
        Err(_) => ScoreSheet {
            items: read_jsonl::<ScoreItem>(&a.input)?,
        },
    };
    let agg = aggregate(&sheet)?;
    let json = serde_json::to_string_pretty(&agg)?;
    println!("{json}");
    if let Some(out) = &a.out {
        if out.extension().is_some_and(|e| e == "csv") {
            write_aggregates_csv(out, &agg)?;
        } else {
            write_text(out, &(json + "\n"))?;
        }
    }
    Ok(())
}
