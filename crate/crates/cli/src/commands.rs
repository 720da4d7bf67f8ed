//! One function per subcommand. Each writes its artifacts under `out` and
//! returns the input files it consumed.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use agent_omit::analysis::{
    attribution_csv, attribution_curve, bounds_csv, intervention_sweep, interventions_csv, verify_bound,
};
use agent_omit::env::{make_task, Task, ThinkingStyle};
use agent_omit::policy::PolicyParams;
use agent_omit::rl::{evaluate, omission_histogram, train_loop, EvalSummary, TurnOmissions};
use agent_omit::rng;
use agent_omit::rollout::{run_episode, Actor};
use agent_omit::synthesis::{
    decision_match, fit_reference_policy, read_jsonl, sft_train, synthesize, write_jsonl, SftSample,
    SynthesisOutput,
};
use agent_omit::trajectory::encode_jsonl;
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::{Continuation, EvalMode, RunConfig};

pub struct Flags {
    pub policy: Option<PathBuf>,
    pub data: Vec<PathBuf>,
}

fn tasks(config: &RunConfig, offset: u64, count: usize) -> Vec<Arc<Task>> {
    (offset..offset + count as u64)
        .map(|s| Arc::new(make_task(config.env, s, config.difficulty)))
        .collect()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())?;
    Ok(w.flush()?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn save(params: &PolicyParams, path: &Path) -> Result<()> {
    write_text(path, &params.to_checkpoint_string())
}

fn load_policy(path: &Path, inputs: &mut Vec<PathBuf>) -> Result<PolicyParams> {
    let p = PolicyParams::load(path).with_context(|| format!("loading policy {}", path.display()))?;
    inputs.push(path.to_path_buf());
    Ok(p)
}

/// The `--policy` checkpoint, or a reference policy fitted on expert
/// demonstrations and saved as `reference.ckpt`.
fn reference_policy(config: &RunConfig, flags: &Flags, out: &Path, inputs: &mut Vec<PathBuf>) -> Result<PolicyParams> {
    if let Some(path) = &flags.policy {
        return load_policy(path, inputs);
    }
    let demo = tasks(config, config.tasks.reference_offset, config.tasks.reference);
    let fit = fit_reference_policy(&demo, config.reference.learning_rate, config.reference.epochs)?;
    save(&fit.params, &out.join("reference.ckpt"))?;
    Ok(fit.params)
}

pub fn analyze(config: &RunConfig, flags: &Flags, out: &Path) -> Result<Vec<PathBuf>> {
    let mut inputs = Vec::new();
    let reference = reference_policy(config, flags, out, &mut inputs)?;
    let actor = Actor::Sample { params: &reference, temperature: 1.0 };
    let tasks = tasks(config, config.tasks.eval_offset, config.analysis.tasks);
    let points = attribution_curve(&tasks, Actor::Oracle(ThinkingStyle::Verbose), actor, config.analysis.k, config.seed)?;
    write_text(&out.join("attribution.csv"), &attribution_csv(&points))?;
    let mut results = Vec::new();
    for task in &tasks {
        let mut r = rng::stream(&[config.seed, rng::str_key(&task.task_id)]);
        let expert = run_episode(task, Actor::Oracle(ThinkingStyle::Verbose), &mut r);
        results.extend(intervention_sweep(task, &expert.trajectory, actor, config.analysis.k, config.seed)?);
    }
    write_text(&out.join("interventions.csv"), &interventions_csv(&results))?;
    Ok(inputs)
}

#[derive(Debug, Serialize, Deserialize)]
struct SynthesisSummary {
    sources: usize,
    marks: usize,
    single_turn: usize,
    multi_turn: usize,
    rejected: Vec<(String, String)>,
    rejection_rate: f64,
}

fn run_synthesis(config: &RunConfig, flags: &Flags, out: &Path, inputs: &mut Vec<PathBuf>) -> Result<SynthesisOutput> {
    let train = tasks(config, config.tasks.train_offset, config.tasks.train);
    let reference;
    let actor = match config.continuation {
        Continuation::Oracle => Actor::Oracle(ThinkingStyle::Terse),
        Continuation::Reference => {
            reference = reference_policy(config, flags, out, inputs)?;
            Actor::Sample { params: &reference, temperature: 1.0 }
        }
    };
    Ok(synthesize(&train, actor, &config.synthesis)?)
}

fn write_synthesis(s: &SynthesisOutput, out: &Path) -> Result<()> {
    let mut w = create(&out.join("sources.jsonl"))?;
    encode_jsonl(&mut w, &s.sources)?;
    w.flush()?;
    let mut w = create(&out.join("rewrites.jsonl"))?;
    encode_jsonl(&mut w, &s.rewrites)?;
    w.flush()?;
    for (name, rows) in [("single_turn.jsonl", &s.single_turn), ("multi_turn.jsonl", &s.multi_turn)] {
        let mut w = create(&out.join(name))?;
        write_jsonl(&mut w, rows)?;
        w.flush()?;
    }
    let mut w = create(&out.join("marks.jsonl"))?;
    write_jsonl(&mut w, &s.marks)?;
    w.flush()?;
    write_json(
        &out.join("synthesis.json"),
        &SynthesisSummary {
            sources: s.sources.len(),
            marks: s.marks.len(),
            single_turn: s.single_turn.len(),
            multi_turn: s.multi_turn.len(),
            rejected: s.rejected.clone(),
            rejection_rate: s.rejection_rate(),
        },
    )
}

pub fn synthesize_cmd(config: &RunConfig, flags: &Flags, out: &Path) -> Result<Vec<PathBuf>> {
    let mut inputs = Vec::new();
    let s = run_synthesis(config, flags, out, &mut inputs)?;
    write_synthesis(&s, out)?;
    Ok(inputs)
}

fn read_samples(dir: &Path, inputs: &mut Vec<PathBuf>) -> Result<Vec<SftSample>> {
    let mut samples = Vec::new();
    for name in ["single_turn.jsonl", "multi_turn.jsonl"] {
        let path = dir.join(name);
        let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
        samples.extend(read_jsonl::<SftSample, _>(BufReader::new(file))?);
        inputs.push(path);
    }
    Ok(samples)
}

#[derive(Debug, Serialize, Deserialize)]
struct SftSummary {
    samples: usize,
    initial_loss: f64,
    final_loss: f64,
    train_decision_match: f64,
}

/// Reference fit, synthesis (unless `--data` names an earlier run) and SFT.
/// Returns the reference and SFT parameters.
fn cold_start(config: &RunConfig, flags: &Flags, out: &Path, inputs: &mut Vec<PathBuf>) -> Result<(PolicyParams, PolicyParams)> {
    let initial = reference_policy(config, flags, out, inputs)?;
    let samples = match flags.data.first() {
        Some(dir) => read_samples(dir, inputs)?,
        None => {
            let s = run_synthesis(config, &Flags { policy: flags.policy.clone(), data: Vec::new() }, out, inputs)?;
            write_synthesis(&s, &out.join("data"))?;
            s.samples()
        }
    };
    let fit = sft_train(&initial, &samples, config.sft.learning_rate, config.sft.epochs, config.seed)?;
    let mut loss = String::from("epoch,loss\n");
    for (i, l) in fit.losses.iter().enumerate() {
        writeln!(loss, "{i},{l}").expect("writing to a string");
    }
    write_text(&out.join("loss.csv"), &loss)?;
    save(&initial, &out.join("reference.ckpt"))?;
    save(&fit.params, &out.join("sft.ckpt"))?;
    write_json(
        &out.join("sft.json"),
        &SftSummary {
            samples: samples.len(),
            initial_loss: fit.losses[0],
            final_loss: *fit.losses.last().expect("losses include the start"),
            train_decision_match: decision_match(&fit.params, &samples),
        },
    )?;
    Ok((initial, fit.params))
}

pub fn sft(config: &RunConfig, flags: &Flags, out: &Path) -> Result<Vec<PathBuf>> {
    let mut inputs = Vec::new();
    cold_start(config, flags, out, &mut inputs)?;
    Ok(inputs)
}

pub fn train(config: &RunConfig, flags: &Flags, out: &Path) -> Result<Vec<PathBuf>> {
    let mut inputs = Vec::new();
    let initial = match &flags.policy {
        Some(path) => load_policy(path, &mut inputs)?,
        None => cold_start(config, flags, &out.join("cold_start"), &mut inputs)?.1,
    };
    let rl_tasks = tasks(config, config.tasks.rl_offset, config.tasks.rl);
    let outcome = train_loop(&config.rl, &initial, &initial, &rl_tasks)?;
    let mut w = create(&out.join("metrics.jsonl"))?;
    write_jsonl(&mut w, &outcome.metrics)?;
    w.flush()?;
    for (step, params) in &outcome.checkpoints {
        save(params, &out.join("checkpoints").join(format!("step_{step:03}.ckpt")))?;
    }
    save(&outcome.params, &out.join("final.ckpt"))?;
    Ok(inputs)
}

/// Contents of `eval.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub actor: String,
    pub tasks: usize,
    pub seeds: Vec<u64>,
    pub summary: EvalSummary,
    pub histogram: Vec<TurnOmissions>,
}

pub fn eval(config: &RunConfig, flags: &Flags, out: &Path) -> Result<Vec<PathBuf>> {
    let mut inputs = Vec::new();
    let params = flags.policy.as_ref().map(|p| load_policy(p, &mut inputs)).transpose()?;
    let (actor, name) = match (&params, config.eval.mode) {
        (None, _) => (Actor::Oracle(ThinkingStyle::Verbose), "oracle".to_string()),
        (Some(p), EvalMode::Greedy) => (Actor::Greedy(p), "greedy".to_string()),
        (Some(p), EvalMode::Sample) => (
            Actor::Sample { params: p, temperature: config.eval.temperature },
            format!("sample@{}", config.eval.temperature),
        ),
    };
    let tasks = tasks(config, config.tasks.eval_offset, config.tasks.eval);
    let episodes = evaluate(&tasks, &config.eval.seeds, actor);
    let histogram = omission_histogram(&episodes);
    let mut csv = String::from("turn,episodes,empty_thought_rate,omit_command_rate,any_rate\n");
    for h in &histogram {
        writeln!(csv, "{},{},{},{},{}", h.turn, h.episodes, h.empty_thought_rate, h.omit_command_rate, h.any_rate)
            .expect("writing to a string");
    }
    write_text(&out.join("histogram.csv"), &csv)?;
    write_json(
        &out.join("eval.json"),
        &EvalReport {
            actor: name,
            tasks: tasks.len(),
            seeds: config.eval.seeds.clone(),
            summary: EvalSummary::from_episodes(&episodes),
            histogram,
        },
    )?;
    Ok(inputs)
}

pub fn verify_theory(config: &RunConfig, flags: &Flags, out: &Path) -> Result<Vec<PathBuf>> {
    let mut inputs = Vec::new();
    let reference = reference_policy(config, flags, out, &mut inputs)?;
    let th = &config.theory;
    let tasks = tasks(config, config.tasks.eval_offset, th.tasks);
    let estimate = verify_bound(&tasks, &reference, &th.scales, th.rollouts, &th.seeds)?;
    write_text(&out.join("bounds.csv"), &bounds_csv(&estimate))?;
    write_json(&out.join("bounds.json"), &estimate)?;
    Ok(inputs)
}

#[derive(Debug, Deserialize)]
struct MetricsTail {
    step: usize,
    mean_r_task: f64,
    mean_r_omit: f64,
    mean_live_tokens: f64,
    kl_to_ref: f64,
}

/// Aggregate the artifacts of earlier runs given with `--data`.
pub fn report(_config: &RunConfig, flags: &Flags, out: &Path) -> Result<Vec<PathBuf>> {
    if flags.data.is_empty() {
        bail!("report needs at least one run directory via --data");
    }
    let mut inputs = Vec::new();
    let mut csv = String::from("run,source,metric,value\n");
    let mut md = String::from("# Run report\n");
    let mut evals = String::new();
    let mut trains = String::new();
    for dir in &flags.data {
        let run = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        let eval_path = dir.join("eval.json");
        if eval_path.exists() {
            let e: EvalReport = serde_json::from_str(&fs::read_to_string(&eval_path)?)
                .with_context(|| format!("parsing {}", eval_path.display()))?;
            let s = &e.summary;
            for (metric, value) in [
                ("success_rate", s.success_rate),
                ("mean_live_tokens", s.mean_live_tokens),
                ("mean_transcript_tokens", s.mean_transcript_tokens),
                ("mean_omitted_turns", s.mean_omitted_turns),
                ("mean_turns", s.mean_turns),
            ] {
                writeln!(csv, "{run},eval,{metric},{value}").expect("writing to a string");
            }
            let peak = e
                .histogram
                .iter()
                .filter(|h| h.any_rate > 0.0)
                .max_by(|a, b| a.any_rate.total_cmp(&b.any_rate).then(b.turn.cmp(&a.turn)))
                .map_or_else(|| "-".to_string(), |h| h.turn.to_string());
            writeln!(
                evals,
                "| {run} | {} | {} | {:.3} | {:.1} | {:.1} | {:.2} | {peak} |",
                e.actor, s.episodes, s.success_rate, s.mean_live_tokens, s.mean_transcript_tokens, s.mean_omitted_turns
            )
            .expect("writing to a string");
            inputs.push(eval_path);
        }
        let metrics_path = dir.join("metrics.jsonl");
        if metrics_path.exists() {
            let rows: Vec<MetricsTail> = read_jsonl(BufReader::new(File::open(&metrics_path)?))?;
            if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
                for (metric, value) in [
                    ("steps", rows.len() as f64),
                    ("final_r_task", last.mean_r_task),
                    ("final_r_omit", last.mean_r_omit),
                    ("final_live_tokens", last.mean_live_tokens),
                    ("final_kl_to_ref", last.kl_to_ref),
                ] {
                    writeln!(csv, "{run},train,{metric},{value}").expect("writing to a string");
                }
                writeln!(
                    trains,
                    "| {run} | {} | {:.1} | {:.1} | {:.3} | {:.3} | {:.5} |",
                    last.step, first.mean_live_tokens, last.mean_live_tokens, last.mean_r_task, last.mean_r_omit, last.kl_to_ref
                )
                .expect("writing to a string");
            }
            inputs.push(metrics_path);
        }
        for name in ["attribution.csv", "interventions.csv", "bounds.csv"] {
            let path = dir.join(name);
            if path.exists() {
                let rows = fs::read_to_string(&path)?.lines().count().saturating_sub(1);
                writeln!(csv, "{run},{name},rows,{rows}").expect("writing to a string");
                inputs.push(path);
            }
        }
    }
    if !evals.is_empty() {
        md.push_str("\n## Evaluation\n\n| run | actor | episodes | success | live tokens | transcript tokens | omitted turns | peak omission turn |\n|---|---|---|---|---|---|---|---|\n");
        md.push_str(&evals);
    }
    if !trains.is_empty() {
        md.push_str("\n## Training\n\n| run | last step | first live tokens | last live tokens | r_task | r_omit | KL to ref |\n|---|---|---|---|---|---|---|\n");
        md.push_str(&trains);
    }
    write_text(&out.join("report.md"), &md)?;
    write_text(&out.join("summary.csv"), &csv)?;
    Ok(inputs)
}
