//! Cold-start data: omittable-turn identification, single-turn and
//! multi-turn omission datasets, and masked supervised fitting.
//!
//! Supervision is decision-level, so environment text only ever appears as
//! conditioning features; that is the structural form of the loss mask.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{restore_turns, EnvError, Task, ThinkingStyle};
use crate::policy::{
    featurize, greedy, log_prob, log_prob_and_grad, Decision, Features, PolicyParams, N_PARAMS,
};
use crate::rollout::{
    continuations, drive, live_prefix, oracle_decision, run_episode, Actor, ContinuationOutcome,
    Episode, InterventionError, OmissionKind,
};
use crate::rng;
use crate::trajectory::{ThoughtMode, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmitMark {
    pub turn: usize,
    pub kind: OmissionKind,
    /// Mean live-token saving over the paired continuations, rounded down.
    pub token_saving: usize,
    /// Treated Pass@k minus control Pass@k; never negative for a mark.
    pub accuracy_delta: f64,
}

/// One row of the marks sidecar file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkRecord {
    pub task_id: String,
    pub turn: usize,
    pub kind: OmissionKind,
    pub saving: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftSample {
    pub features: Features,
    pub target: Decision,
}

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("mark at turn {turn} ({kind}) does not fit the trajectory: {reason}")]
    Mismatch {
        turn: usize,
        kind: &'static str,
        reason: String,
    },
    #[error(transparent)]
    Intervention(#[from] InterventionError),
    #[error("replay failed: {0}")]
    Replay(#[from] EnvError),
    #[error("rewrite rejected: {0}")]
    Rejected(String),
    #[error("no samples to fit")]
    NoSamples,
    #[error("learning rate must be positive")]
    LearningRate,
    #[error("non-finite loss {loss} at epoch {epoch}; params {params:?}")]
    NonFinite {
        epoch: usize,
        loss: f64,
        params: PolicyParams,
    },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisConfig {
    pub k: usize,
    pub min_token_saving: usize,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            k: 8,
            min_token_saving: 8,
            seed: 0,
        }
    }
}

fn pass_at_k(outcomes: &[ContinuationOutcome]) -> f64 {
    f64::from(u8::from(outcomes.iter().any(|o| o.success)))
}

fn mean_cost(outcomes: &[ContinuationOutcome]) -> f64 {
    outcomes.iter().map(|o| o.cost as f64).sum::<f64>() / outcomes.len().max(1) as f64
}

/// Candidate single omissions of a trajectory: every verbose thought and
/// every present observation of a non-final turn.
pub fn candidate_omissions(trajectory: &Trajectory) -> Vec<(usize, OmissionKind)> {
    let last = trajectory.turns.len();
    let mut out = Vec::new();
    for turn in trajectory.turns.iter().filter(|t| t.index < last) {
        if turn.thought.mode == ThoughtMode::Verbose {
            out.push((turn.index, OmissionKind::Thought));
        }
        if turn.observation.as_ref().is_some_and(|o| !o.is_omitted()) {
            out.push((turn.index, OmissionKind::Observation));
        }
    }
    out
}

/// Forward traversal of single omissions, each judged against paired
/// unomitted continuations.
pub fn identify_omittable(
    task: &Arc<Task>,
    trajectory: &Trajectory,
    actor: Actor<'_>,
    k: usize,
    min_token_saving: usize,
    seed: u64,
) -> Result<Vec<OmitMark>, SynthesisError> {
    let probes = candidate_omissions(trajectory);
    let turns: BTreeSet<usize> = probes.iter().map(|p| p.0).collect();
    let controls: BTreeMap<usize, Vec<ContinuationOutcome>> = turns
        .into_par_iter()
        .map(|t| Ok((t, continuations(task, trajectory, t, None, actor, k, seed)?)))
        .collect::<Result<_, InterventionError>>()?;
    let verdicts: Vec<Option<OmitMark>> = probes
        .par_iter()
        .map(|&(t, kind)| {
            let treated = continuations(task, trajectory, t, Some(kind), actor, k, seed)?;
            let control = &controls[&t];
            let saving = mean_cost(control) - mean_cost(&treated);
            let delta = pass_at_k(&treated) - pass_at_k(control);
            let ok = saving >= min_token_saving as f64 && saving >= 1.0 && delta >= 0.0;
            Ok(ok.then(|| OmitMark {
                turn: t,
                kind,
                token_saving: saving.floor() as usize,
                accuracy_delta: delta,
            }))
        })
        .collect::<Result<_, InterventionError>>()?;
    Ok(verdicts.into_iter().flatten().collect())
}

/// Decision-turn view of a mark set: which thoughts to empty and which
/// observations each decision omits.
struct Plan {
    empty_thoughts: BTreeSet<usize>,
    omit_at: BTreeMap<usize, BTreeSet<usize>>,
}

fn plan(trajectory: &Trajectory, marks: &[OmitMark]) -> Result<Plan, SynthesisError> {
    let len = trajectory.turns.len();
    let mut p = Plan {
        empty_thoughts: BTreeSet::new(),
        omit_at: BTreeMap::new(),
    };
    for m in marks {
        let mismatch = |reason: &str| SynthesisError::Mismatch {
            turn: m.turn,
            kind: m.kind.name(),
            reason: reason.to_string(),
        };
        if m.turn == 0 || m.turn >= len {
            return Err(mismatch("no decision follows this turn"));
        }
        let turn = &trajectory.turns[m.turn - 1];
        match m.kind {
            OmissionKind::Thought => {
                if turn.thought.mode != ThoughtMode::Verbose {
                    return Err(mismatch("thought is already empty"));
                }
                p.empty_thoughts.insert(m.turn);
            }
            OmissionKind::Observation => {
                if !turn.observation.as_ref().is_some_and(|o| !o.is_omitted()) {
                    return Err(mismatch("no present observation"));
                }
                p.omit_at.entry(m.turn + 1).or_default().insert(m.turn);
            }
        }
    }
    Ok(p)
}

/// One sample per decision turn touched by a mark, on the pre-omission live
/// context of the original trajectory.
pub fn build_single_turn(
    task: &Arc<Task>,
    trajectory: &Trajectory,
    marks: &[OmitMark],
) -> Result<Vec<SftSample>, SynthesisError> {
    let p = plan(trajectory, marks)?;
    let decision_turns: BTreeSet<usize> = p
        .empty_thoughts
        .iter()
        .chain(p.omit_at.keys())
        .copied()
        .collect();
    decision_turns
        .into_iter()
        .map(|d| {
            let prefix = live_prefix(&trajectory.turns, d);
            let state = restore_turns(task, &prefix)?;
            let candidates = state.enumerate_actions();
            let features = featurize(
                &task.question,
                &prefix,
                &candidates,
                task.max_turns,
                state.last_action_ok(),
            );
            let turn = &trajectory.turns[d - 1];
            let action = candidates
                .iter()
                .position(|c| c.action == turn.action)
                .ok_or_else(|| SynthesisError::Mismatch {
                    turn: d,
                    kind: "action",
                    reason: "recorded action is not a candidate".into(),
                })?;
            let targets = p.omit_at.get(&d).cloned().unwrap_or_default();
            let omit: Vec<bool> = features.obs_turns.iter().map(|k| targets.contains(k)).collect();
            if omit.iter().filter(|f| **f).count() != targets.len() {
                return Err(SynthesisError::Mismatch {
                    turn: d,
                    kind: "observation",
                    reason: "marked observation is not in the live context".into(),
                });
            }
            let thought = if p.empty_thoughts.contains(&d) {
                ThoughtMode::Empty
            } else {
                turn.thought.mode
            };
            Ok(SftSample {
                features,
                target: Decision {
                    thought,
                    action,
                    omit,
                },
            })
        })
        .collect()
}

/// Re-run the task with every marked thought emptied and every marked
/// observation omitted by the following decision, the expert choosing the
/// actions. The rewrite is kept only if it still solves the task.
pub fn build_multi_turn(
    task: &Arc<Task>,
    trajectory: &Trajectory,
    marks: &[OmitMark],
) -> Result<Episode, SynthesisError> {
    let p = plan(trajectory, marks)?;
    let state = crate::env::EnvState::new(Arc::clone(task));
    let ep = drive(state, Vec::new(), BTreeSet::new(), |ctx| {
        let t = ctx.turns.len() + 1;
        let mut d = oracle_decision(ctx, ThinkingStyle::Verbose);
        if p.empty_thoughts.contains(&t) {
            d.thought = ThoughtMode::Empty;
        }
        if let Some(targets) = p.omit_at.get(&t) {
            for (flag, k) in d.omit.iter_mut().zip(&ctx.features.obs_turns) {
                *flag = targets.contains(k);
            }
        }
        d
    });
    for (d, targets) in &p.omit_at {
        let issued = ep.steps.get(d - 1).map(|s| &s.gamma);
        if issued != Some(targets) {
            return Err(SynthesisError::Rejected(format!(
                "turn {d} could not issue omissions {targets:?}"
            )));
        }
    }
    if !ep.success() {
        return Err(SynthesisError::Rejected(format!(
            "verification rollout failed with answer {:?}",
            ep.trajectory.final_answer
        )));
    }
    Ok(ep)
}

/// Every decision of an episode as a supervised sample.
pub fn episode_samples(episode: &Episode) -> Vec<SftSample> {
    episode
        .steps
        .iter()
        .map(|s| SftSample {
            features: s.features.clone(),
            target: s.decision.clone(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftOutcome {
    pub params: PolicyParams,
    /// Mean negative log-likelihood before training and after every epoch.
    pub losses: Vec<f64>,
}

pub fn mean_nll(params: &PolicyParams, samples: &[SftSample]) -> f64 {
    -samples
        .iter()
        .map(|s| log_prob(params, &s.features, &s.target))
        .sum::<f64>()
        / samples.len().max(1) as f64
}

/// Full-batch gradient descent on the mean negative log-likelihood. The run
/// draws no randomness, so `seed` only labels it.
pub fn sft_train(
    initial: &PolicyParams,
    samples: &[SftSample],
    learning_rate: f64,
    epochs: usize,
    _seed: u64,
) -> Result<SftOutcome, SynthesisError> {
    if samples.is_empty() {
        return Err(SynthesisError::NoSamples);
    }
    if !(learning_rate > 0.0) {
        return Err(SynthesisError::LearningRate);
    }
    let n = samples.len() as f64;
    let pass = |params: &PolicyParams| {
        let terms: Vec<(f64, [f64; N_PARAMS])> = samples
            .par_iter()
            .map(|s| log_prob_and_grad(params, &s.features, &s.target))
            .collect();
        let mut g = [0.0; N_PARAMS];
        let mut total = 0.0;
        for (lp, x) in &terms {
            total += lp;
            for (gi, xi) in g.iter_mut().zip(x) {
                *gi += xi / n;
            }
        }
        (-total / n, g)
    };
    let mut params = *initial;
    let (loss, mut g) = pass(&params);
    let mut losses = vec![loss];
    for epoch in 1..=epochs {
        params = params.axpy(learning_rate, &g);
        let (loss, next) = pass(&params);
        if !loss.is_finite() || !params.is_finite() {
            return Err(SynthesisError::NonFinite {
                epoch,
                loss,
                params,
            });
        }
        losses.push(loss);
        g = next;
    }
    Ok(SftOutcome { params, losses })
}

/// Fraction of samples whose greedy decision equals the target exactly.
pub fn decision_match(params: &PolicyParams, samples: &[SftSample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let hits = samples
        .iter()
        .filter(|s| greedy(params, &s.features) == s.target)
        .count();
    hits as f64 / samples.len() as f64
}

/// Behavior-cloned stand-in for the reference agent: fitted to the terse
/// expert, which thinks until a plan exists and then acts directly.
pub fn fit_reference_policy(
    tasks: &[Arc<Task>],
    learning_rate: f64,
    epochs: usize,
) -> Result<SftOutcome, SynthesisError> {
    let samples: Vec<SftSample> = tasks
        .par_iter()
        .flat_map_iter(|t| {
            let ep = run_episode(t, Actor::Oracle(ThinkingStyle::Terse), &mut rng::stream(&[0]));
            episode_samples(&ep)
        })
        .collect();
    sft_train(&PolicyParams::zeros(), &samples, learning_rate, epochs, 0)
}

/// Everything synthesized from a batch of expert trajectories.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SynthesisOutput {
    pub sources: Vec<Trajectory>,
    pub marks: Vec<MarkRecord>,
    pub single_turn: Vec<SftSample>,
    pub rewrites: Vec<Trajectory>,
    pub multi_turn: Vec<SftSample>,
    /// (task_id, reason) for every rejected rewrite.
    pub rejected: Vec<(String, String)>,
}

impl SynthesisOutput {
    pub fn samples(&self) -> Vec<SftSample> {
        self.single_turn.iter().chain(&self.multi_turn).cloned().collect()
    }

    pub fn rejection_rate(&self) -> f64 {
        if self.sources.is_empty() {
            0.0
        } else {
            self.rejected.len() as f64 / self.sources.len() as f64
        }
    }
}

struct PerTask {
    source: Trajectory,
    marks: Vec<OmitMark>,
    single: Vec<SftSample>,
    rewrite: Result<Episode, String>,
}

/// Identify, build both datasets and collect rejections, in task order.
pub fn synthesize(
    tasks: &[Arc<Task>],
    actor: Actor<'_>,
    config: &SynthesisConfig,
) -> Result<SynthesisOutput, SynthesisError> {
    let per: Vec<PerTask> = tasks
        .par_iter()
        .map(|task| {
            let ep = run_episode(task, Actor::Oracle(ThinkingStyle::Verbose), &mut rng::stream(&[0]));
            let source = ep.trajectory;
            let marks = identify_omittable(
                task,
                &source,
                actor,
                config.k,
                config.min_token_saving,
                config.seed,
            )?;
            let single = build_single_turn(task, &source, &marks)?;
            let rewrite = match build_multi_turn(task, &source, &marks) {
                Ok(e) => Ok(e),
                Err(SynthesisError::Rejected(r)) => Err(r),
                Err(e) => return Err(e),
            };
            Ok(PerTask {
                source,
                marks,
                single,
                rewrite,
            })
        })
        .collect::<Result<_, SynthesisError>>()?;
    let mut out = SynthesisOutput::default();
    for p in per {
        out.marks.extend(p.marks.iter().map(|m| MarkRecord {
            task_id: p.source.task_id.clone(),
            turn: m.turn,
            kind: m.kind,
            saving: m.token_saving,
        }));
        out.single_turn.extend(p.single);
        match p.rewrite {
            Ok(ep) => {
                out.multi_turn.extend(episode_samples(&ep));
                out.rewrites.push(ep.trajectory);
            }
            Err(reason) => out.rejected.push((p.source.task_id.clone(), reason)),
        }
        out.sources.push(p.source);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize, W: Write>(out: &mut W, rows: &[T]) -> Result<(), SynthesisError> {
    for r in rows {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>, R: BufRead>(
    input: R,
) -> Result<Vec<T>, SynthesisError> {
    let mut rows = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            rows.push(serde_json::from_str(&line)?);
        }
    }
    Ok(rows)
}
