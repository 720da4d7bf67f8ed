//! Omit-aware group-relative policy optimization.
//!
//! Each task contributes a group of `n` sampled rollouts. Every rollout turn
//! whose decision omits something spawns a partial record: the context the
//! decision saw before its directive took effect, completed greedily and
//! graded. A rollout's score is its reweighted reward plus the mean
//! partial-completion reward; scores are normalized within the group.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{restore_turns, EnvError, Task};
use crate::policy::{
    featurize_rows, kl, kl_grad, log_prob, grad_log_prob, Decision, Features, ParamVec,
    PolicyParams, N_PARAMS,
};
use crate::rng;
use crate::rollout::{drive, live_prefix, omitted_observation_tokens, Actor, Episode};
use crate::tokenizer::count_tokens;
use crate::trajectory::{full_transcript_tokens, ThoughtMode, Trajectory, Turn};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Rollouts per task.
    pub n: usize,
    pub mu: f64,
    pub beta: f64,
    pub clip: f64,
    pub learning_rate: f64,
    pub temperature: f64,
    /// Passes over the task list.
    pub epochs_rl: usize,
    /// Gradient steps per batch; the ratio clip only matters above 1.
    pub grad_epochs: usize,
    pub tasks_per_step: usize,
    pub seed: u64,
    pub max_grad_norm: Option<f64>,
    /// Spawn partial records for empty-thought decisions, not only for
    /// observation omissions.
    pub partial_on_thought: bool,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n: 8,
            mu: 0.2,
            beta: 0.001,
            clip: 0.2,
            learning_rate: 0.1,
            temperature: 1.0,
            epochs_rl: 1,
            grad_epochs: 1,
            tasks_per_step: 4,
            seed: 0,
            max_grad_norm: Some(5.0),
            partial_on_thought: true,
            checkpoint_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.n < 2 {
            return bad("n must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return bad("mu must lie in [0, 1]");
        }
        if !(self.beta >= 0.0) {
            return bad("beta must be non-negative");
        }
        if !(self.clip > 0.0) {
            return bad("clip must be positive");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if !(self.learning_rate >= 0.0) {
            return bad("learning_rate must be non-negative");
        }
        if self.epochs_rl == 0 || self.grad_epochs == 0 || self.tasks_per_step == 0 {
            return bad("epochs_rl, grad_epochs and tasks_per_step must be positive");
        }
        if self.max_grad_norm.is_some_and(|g| !(g > 0.0)) {
            return bad("max_grad_norm must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no tasks to train on")]
    NoTasks,
    #[error("non-finite gradient; groups: {dump}")]
    NonFinite { dump: String },
    #[error("partial completion could not be replayed: {0}")]
    Replay(#[from] EnvError),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RewardError {
    #[error("transcript has no tokens")]
    EmptyTranscript,
    #[error("replay failed: {0}")]
    Replay(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_task: f64,
    pub r_omit: f64,
    pub r_combined: f64,
}

pub fn combine(r_task: f64, r_omit: f64, mu: f64) -> f64 {
    (1.0 - mu) * r_task + mu * r_omit
}

/// Saved-token ratio, zero whenever the task failed.
pub fn omission_reward_from_counts(
    transcript_tokens: usize,
    omitted_thought_tokens: usize,
    omitted_observation_tokens: usize,
    r_task: f64,
) -> Result<f64, RewardError> {
    if transcript_tokens == 0 {
        return Err(RewardError::EmptyTranscript);
    }
    if r_task == 0.0 {
        return Ok(0.0);
    }
    let y = transcript_tokens as f64;
    Ok(omitted_thought_tokens as f64 / y + omitted_observation_tokens as f64 / y)
}

/// Tok(τ_omitted) by replaying the task to every empty-thought turn.
pub fn omitted_thought_tokens(task: &Arc<Task>, turns: &[Turn]) -> Result<usize, RewardError> {
    let mut total = 0;
    for turn in turns.iter().filter(|t| t.thought.mode == ThoughtMode::Empty) {
        let prefix = live_prefix(turns, turn.index);
        let state = restore_turns(task, &prefix).map_err(|e| RewardError::Replay(e.to_string()))?;
        total += count_tokens(&state.oracle_thought());
    }
    Ok(total)
}

pub fn omission_reward(
    task: &Arc<Task>,
    trajectory: &Trajectory,
    mu: f64,
) -> Result<RewardBreakdown, RewardError> {
    let r_omit = omission_reward_from_counts(
        full_transcript_tokens(&trajectory.turns),
        omitted_thought_tokens(task, &trajectory.turns)?,
        omitted_observation_tokens(&trajectory.turns),
        trajectory.r_task,
    )?;
    Ok(RewardBreakdown {
        r_task: trajectory.r_task,
        r_omit,
        r_combined: combine(trajectory.r_task, r_omit, mu),
    })
}

/// Snapshot of an omitting decision and the graded greedy completion of it.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialRecord {
    pub turn: usize,
    /// Features before the decision's own directive took effect.
    pub features: Features,
    pub decision: Decision,
    pub completion_answer: String,
    pub r_prime: f64,
}

fn triggers(decision: &Decision, on_thought: bool) -> bool {
    decision.omit.iter().any(|f| *f) || (on_thought && decision.thought == ThoughtMode::Empty)
}

/// Restore the context a decision saw, take that decision, then continue
/// greedily to the end. Returns the final answer and its grade.
pub fn complete_partial(
    task: &Arc<Task>,
    prefix: &[Turn],
    decision: &Decision,
    params: &PolicyParams,
) -> Result<(String, f64), EnvError> {
    let state = restore_turns(task, prefix)?;
    let mut first = Some(decision.clone());
    let greedy = Actor::Greedy(params);
    let mut unused = rng::stream(&[0]);
    let ep = drive(state, prefix.to_vec(), BTreeSet::new(), |ctx| {
        first.take().unwrap_or_else(|| greedy.decide(ctx, &mut unused))
    });
    Ok((ep.trajectory.final_answer.clone(), ep.trajectory.r_task))
}

pub fn partial_records(
    task: &Arc<Task>,
    episode: &Episode,
    params: &PolicyParams,
    on_thought: bool,
) -> Result<Vec<PartialRecord>, EnvError> {
    episode
        .steps
        .iter()
        .filter(|s| triggers(&s.decision, on_thought))
        .map(|s| {
            let prefix = live_prefix(&episode.trajectory.turns, s.turn);
            let (answer, r) = complete_partial(task, &prefix, &s.decision, params)?;
            Ok(PartialRecord {
                turn: s.turn,
                features: s.features.clone(),
                decision: s.decision.clone(),
                completion_answer: answer,
                r_prime: r,
            })
        })
        .collect()
}

/// Sample one rollout and its partial records.
pub fn rollout(
    task: &Arc<Task>,
    params: &PolicyParams,
    temperature: f64,
    rng: &mut ChaCha8Rng,
    on_thought: bool,
) -> Result<(Episode, Vec<PartialRecord>), EnvError> {
    let ep = crate::rollout::run_episode(
        task,
        Actor::Sample {
            params,
            temperature,
        },
        rng,
    );
    let partials = partial_records(task, &ep, params, on_thought)?;
    Ok((ep, partials))
}

/// Decisions of a finished rollout re-featurized on the post-omission
/// transcript: every issued omission is already in effect, so the omitted
/// rows are gone and the remaining flags are all "keep".
pub fn replay_terms(task: &Task, episode: &Episode) -> Vec<(Features, Decision)> {
    let turns = &episode.trajectory.turns;
    episode
        .steps
        .iter()
        .map(|s| {
            let f = featurize_rows(
                &task.question,
                &turns[..s.turn - 1],
                s.features.candidates.clone(),
                task.max_turns,
                s.features.global[3] == 1.0,
            );
            let d = Decision {
                thought: s.decision.thought,
                action: s.decision.action,
                omit: vec![false; f.observations.len()],
            };
            (f, d)
        })
        .collect()
}

/// Normalize scores within a group by the population standard deviation.
pub fn group_advantages(scores: &[f64], eps_std: f64) -> Vec<f64> {
    if scores.is_empty() {
        return Vec::new();
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    if var == 0.0 {
        return vec![0.0; scores.len()];
    }
    let sd = var.sqrt();
    scores.iter().map(|s| (s - mean) / (sd + eps_std)).collect()
}

pub fn rollout_score(reward: &RewardBreakdown, partials: &[PartialRecord]) -> f64 {
    let partial = if partials.is_empty() {
        0.0
    } else {
        partials.iter().map(|p| p.r_prime).sum::<f64>() / partials.len() as f64
    };
    reward.r_combined + partial
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub task: Arc<Task>,
    pub episodes: Vec<Episode>,
    pub partials: Vec<Vec<PartialRecord>>,
    pub rewards: Vec<RewardBreakdown>,
    pub scores: Vec<f64>,
}

impl RolloutGroup {
    pub fn advantages(&self) -> Vec<f64> {
        group_advantages(&self.scores, 1e-8)
    }
}

pub fn sample_group(
    task: &Arc<Task>,
    params: &PolicyParams,
    config: &TrainConfig,
    step: u64,
) -> Result<RolloutGroup, EnvError> {
    let results: Vec<Result<(Episode, Vec<PartialRecord>), EnvError>> = (0..config.n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(&[config.seed, step, rng::str_key(&task.task_id), i as u64]);
            rollout(task, params, config.temperature, &mut r, config.partial_on_thought)
        })
        .collect();
    let mut episodes = Vec::new();
    let mut partials = Vec::new();
    for r in results {
        let (e, p) = r?;
        episodes.push(e);
        partials.push(p);
    }
    let rewards: Vec<RewardBreakdown> = episodes
        .iter()
        .map(|e| RewardBreakdown {
            r_task: e.trajectory.r_task,
            r_omit: e.trajectory.r_omit,
            r_combined: combine(e.trajectory.r_task, e.trajectory.r_omit, config.mu),
        })
        .collect();
    let scores = rewards
        .iter()
        .zip(&partials)
        .map(|(r, p)| rollout_score(r, p))
        .collect();
    Ok(RolloutGroup {
        task: Arc::clone(task),
        episodes,
        partials,
        rewards,
        scores,
    })
}

/// One policy-gradient term: a context, the decision taken there, and the
/// advantage of the rollout it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub features: Features,
    pub decision: Decision,
    pub advantage: f64,
    pub old_log_prob: f64,
}

/// Everything the surrogate needs, flattened in deterministic order.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub terms: Vec<Term>,
    pub kl_contexts: Vec<Features>,
    pub n_rollouts: usize,
}

pub fn build_batch(groups: &[RolloutGroup], old: &PolicyParams) -> Batch {
    let mut terms = Vec::new();
    let mut kl_contexts = Vec::new();
    let mut n_rollouts = 0;
    for g in groups {
        let adv = g.advantages();
        for ((ep, partials), a) in g.episodes.iter().zip(&g.partials).zip(adv) {
            n_rollouts += 1;
            for (features, decision) in replay_terms(&g.task, ep) {
                let old_log_prob = log_prob(old, &features, &decision);
                kl_contexts.push(features.clone());
                terms.push(Term {
                    features,
                    decision,
                    advantage: a,
                    old_log_prob,
                });
            }
            for p in partials {
                kl_contexts.push(p.features.clone());
                terms.push(Term {
                    features: p.features.clone(),
                    decision: p.decision.clone(),
                    advantage: a,
                    old_log_prob: log_prob(old, &p.features, &p.decision),
                });
            }
        }
    }
    Batch {
        terms,
        kl_contexts,
        n_rollouts,
    }
}

pub fn mean_kl(params: &PolicyParams, reference: &PolicyParams, contexts: &[Features]) -> f64 {
    if contexts.is_empty() {
        return 0.0;
    }
    contexts.iter().map(|f| kl(params, reference, f)).sum::<f64>() / contexts.len() as f64
}

/// Clipped surrogate minus the KL penalty.
pub fn surrogate(
    params: &PolicyParams,
    reference: &PolicyParams,
    batch: &Batch,
    clip: f64,
    beta: f64,
) -> f64 {
    let mut total = 0.0;
    for term in &batch.terms {
        let ratio = (log_prob(params, &term.features, &term.decision) - term.old_log_prob).exp();
        let a = term.advantage;
        total += (ratio * a).min(ratio.clamp(1.0 - clip, 1.0 + clip) * a);
    }
    let n = batch.n_rollouts.max(1) as f64;
    total / n - beta * mean_kl(params, reference, &batch.kl_contexts)
}

pub fn surrogate_grad(
    params: &PolicyParams,
    reference: &PolicyParams,
    batch: &Batch,
    clip: f64,
    beta: f64,
) -> ParamVec {
    let mut g = [0.0; N_PARAMS];
    let n = batch.n_rollouts.max(1) as f64;
    for term in &batch.terms {
        let a = term.advantage;
        if a == 0.0 {
            continue;
        }
        let ratio = (log_prob(params, &term.features, &term.decision) - term.old_log_prob).exp();
        let clipped = (a > 0.0 && ratio > 1.0 + clip) || (a < 0.0 && ratio < 1.0 - clip);
        if clipped {
            continue;
        }
        let gl = grad_log_prob(params, &term.features, &term.decision);
        for (gi, x) in g.iter_mut().zip(gl) {
            *gi += a * ratio * x / n;
        }
    }
    if beta != 0.0 && !batch.kl_contexts.is_empty() {
        let m = batch.kl_contexts.len() as f64;
        for f in &batch.kl_contexts {
            for (gi, x) in g.iter_mut().zip(kl_grad(params, reference, f)) {
                *gi -= beta * x / m;
            }
        }
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub objective: f64,
    pub grad_norm: f64,
    pub kl_to_ref: f64,
    pub n_terms: usize,
    pub n_rollouts: usize,
}

fn norm(v: &ParamVec) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dump_groups(groups: &[RolloutGroup]) -> String {
    groups
        .iter()
        .map(|g| format!("{} scores={:?}", g.task.task_id, g.scores))
        .collect::<Vec<_>>()
        .join("; ")
}

pub fn grpo_update(
    params: &PolicyParams,
    reference: &PolicyParams,
    groups: &[RolloutGroup],
    config: &TrainConfig,
) -> Result<(PolicyParams, TrainStats), TrainError> {
    let batch = build_batch(groups, params);
    let mut current = *params;
    let mut first_norm = 0.0;
    for epoch in 0..config.grad_epochs {
        let g = surrogate_grad(&current, reference, &batch, config.clip, config.beta);
        if !g.iter().all(|x| x.is_finite()) {
            return Err(TrainError::NonFinite {
                dump: dump_groups(groups),
            });
        }
        let n = norm(&g);
        if epoch == 0 {
            first_norm = n;
        }
        let scale = match config.max_grad_norm {
            Some(max) if n > max => max / n,
            _ => 1.0,
        };
        current = current.axpy(config.learning_rate * scale, &g);
    }
    let stats = TrainStats {
        objective: surrogate(params, reference, &batch, config.clip, config.beta),
        grad_norm: first_norm,
        kl_to_ref: mean_kl(params, reference, &batch.kl_contexts),
        n_terms: batch.terms.len(),
        n_rollouts: batch.n_rollouts,
    };
    Ok((current, stats))
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mean_r_task: f64,
    pub mean_r_omit: f64,
    pub mean_transcript_tokens: f64,
    pub mean_live_tokens: f64,
    pub mean_partials: f64,
    pub kl_to_ref: f64,
    pub grad_norm: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub metrics: Vec<StepMetrics>,
    /// Parameters after every `checkpoint_every` steps.
    pub checkpoints: Vec<(usize, PolicyParams)>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn step_metrics(step: usize, groups: &[RolloutGroup], stats: &TrainStats) -> StepMetrics {
    let eps = || groups.iter().flat_map(|g| g.episodes.iter());
    StepMetrics {
        step,
        mean_r_task: mean(eps().map(|e| e.trajectory.r_task)),
        mean_r_omit: mean(eps().map(|e| e.trajectory.r_omit)),
        mean_transcript_tokens: mean(eps().map(|e| e.trajectory.full_transcript_tokens() as f64)),
        mean_live_tokens: mean(eps().map(|e| e.trajectory.live_tokens() as f64)),
        mean_partials: mean(groups.iter().flat_map(|g| g.partials.iter().map(|p| p.len() as f64))),
        kl_to_ref: stats.kl_to_ref,
        grad_norm: stats.grad_norm,
        objective: stats.objective,
    }
}

pub fn train_loop(
    config: &TrainConfig,
    initial: &PolicyParams,
    reference: &PolicyParams,
    tasks: &[Arc<Task>],
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if tasks.is_empty() {
        return Err(TrainError::NoTasks);
    }
    let mut params = *initial;
    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();
    let mut step = 0usize;
    for _ in 0..config.epochs_rl {
        for chunk in tasks.chunks(config.tasks_per_step) {
            step += 1;
            let groups: Vec<Result<RolloutGroup, EnvError>> = chunk
                .par_iter()
                .map(|t| sample_group(t, &params, config, step as u64))
                .collect();
            let groups: Vec<RolloutGroup> = groups.into_iter().collect::<Result<_, _>>()?;
            let (next, stats) = grpo_update(&params, reference, &groups, config)?;
            metrics.push(step_metrics(step, &groups, &stats));
            params = next;
            if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
                checkpoints.push((step, params));
            }
        }
    }
    Ok(TrainOutcome {
        params,
        metrics,
        checkpoints,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_live_tokens: f64,
    pub mean_transcript_tokens: f64,
    pub mean_r_omit: f64,
    pub mean_turns: f64,
    /// Turns per episode with an empty thought or an omitted observation.
    pub mean_omitted_turns: f64,
}

impl EvalSummary {
    pub fn from_episodes(episodes: &[Episode]) -> Self {
        let t = || episodes.iter().map(|e| &e.trajectory);
        EvalSummary {
            episodes: episodes.len(),
            success_rate: mean(t().map(|x| x.r_task)),
            mean_live_tokens: mean(t().map(|x| x.live_tokens() as f64)),
            mean_transcript_tokens: mean(t().map(|x| x.full_transcript_tokens() as f64)),
            mean_r_omit: mean(t().map(|x| x.r_omit)),
            mean_turns: mean(t().map(|x| x.turns.len() as f64)),
            mean_omitted_turns: mean(t().map(|x| x.omitted_turns().len() as f64)),
        }
    }
}

/// How often the decision at each turn omitted something.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TurnOmissions {
    pub turn: usize,
    /// Episodes that reached this turn.
    pub episodes: usize,
    pub empty_thought_rate: f64,
    /// Fraction of those decisions that issued at least one omit command.
    pub omit_command_rate: f64,
    pub any_rate: f64,
}

pub fn omission_histogram(episodes: &[Episode]) -> Vec<TurnOmissions> {
    let max = episodes.iter().map(|e| e.steps.len()).max().unwrap_or(0);
    (1..=max)
        .map(|turn| {
            let steps: Vec<_> = episodes.iter().filter_map(|e| e.steps.get(turn - 1)).collect();
            let n = steps.len() as f64;
            let count = |f: &dyn Fn(&crate::rollout::StepLog) -> bool| {
                steps.iter().filter(|s| f(s)).count() as f64 / n
            };
            TurnOmissions {
                turn,
                episodes: steps.len(),
                empty_thought_rate: count(&|s| s.decision.thought == ThoughtMode::Empty),
                omit_command_rate: count(&|s| !s.gamma.is_empty()),
                any_rate: count(&|s| s.decision.thought == ThoughtMode::Empty || !s.gamma.is_empty()),
            }
        })
        .collect()
}

/// Run every (task, seed) pair once with the given actor.
pub fn evaluate(tasks: &[Arc<Task>], seeds: &[u64], actor: Actor<'_>) -> Vec<Episode> {
    let jobs: Vec<(usize, u64)> = (0..tasks.len())
        .flat_map(|i| seeds.iter().map(move |s| (i, *s)))
        .collect();
    jobs.par_iter()
        .map(|(i, s)| {
            let task = &tasks[*i];
            let mut r = rng::stream(&[*s, rng::str_key(&task.task_id), 0xe7a1]);
            crate::rollout::run_episode(task, actor, &mut r)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{make_task, Difficulty, EnvKind, ThinkingStyle};
    use crate::policy::tests::{random_decision, random_features, random_params};
    use crate::rollout::run_episode;

    fn task(env: EnvKind, seed: u64) -> Arc<Task> {
        Arc::new(make_task(env, seed, Difficulty::Easy))
    }

    #[test]
    fn reward_hand_cases() {
        assert_eq!(omission_reward_from_counts(200, 30, 50, 1.0).unwrap(), 0.4);
        assert_eq!(omission_reward_from_counts(200, 30, 50, 0.0).unwrap(), 0.0);
        assert_eq!(omission_reward_from_counts(200, 0, 0, 1.0).unwrap(), 0.0);
        assert_eq!(
            omission_reward_from_counts(0, 0, 0, 1.0),
            Err(RewardError::EmptyTranscript)
        );
        assert_eq!(combine(1.0, 0.4, 0.2), 0.8 + 0.2 * 0.4);
    }

    #[test]
    fn advantages_hand_cases() {
        assert_eq!(group_advantages(&[1.0, 1.0, 1.0, 1.0], 1e-8), vec![0.0; 4]);
        assert_eq!(group_advantages(&[0.7], 1e-8), vec![0.0]);
        let a = group_advantages(&[1.0, 0.0, 0.0, 1.0], 1e-8);
        for (x, e) in a.iter().zip([1.0, -1.0, -1.0, 1.0]) {
            assert!((x - e).abs() < 1e-7);
        }
        assert!(a.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn replayed_reward_matches_rollout() {
        let mut r = rng::stream(&[3]);
        for i in 0..60u64 {
            let t = task(EnvKind::ALL[(i % 3) as usize], i);
            let p = random_params(&mut r, 2.0);
            let ep = run_episode(
                &t,
                Actor::Sample {
                    params: &p,
                    temperature: 1.0,
                },
                &mut rng::stream(&[i]),
            );
            let rb = omission_reward(&t, &ep.trajectory, 0.2).unwrap();
            assert_eq!(rb.r_omit, ep.trajectory.r_omit);
            assert_eq!(
                omitted_thought_tokens(&t, &ep.trajectory.turns).unwrap(),
                ep.omitted_thought_tokens()
            );
        }
    }

    #[test]
    fn partial_records_capture_context_change() {
        let mut r = rng::stream(&[4]);
        let mut seen = 0;
        for i in 0..40u64 {
            let t = task(EnvKind::ALL[(i % 3) as usize], i);
            let p = random_params(&mut r, 2.0);
            let (ep, partials) = rollout(&t, &p, 1.0, &mut rng::stream(&[i]), true).unwrap();
            let replay = replay_terms(&t, &ep);
            let triggered = ep.steps.iter().filter(|s| s.decision.omits_anything()).count();
            assert_eq!(partials.len(), triggered);
            for rec in &partials {
                assert!(rec.decision.omits_anything());
                assert!(rec.r_prime == 0.0 || rec.r_prime == 1.0);
                let (f, _) = &replay[rec.turn - 1];
                if rec.decision.omit.iter().any(|x| *x) {
                    assert_ne!(f, &rec.features);
                    seen += 1;
                }
                let step = &ep.steps[rec.turn - 1];
                if step.candidates[rec.decision.action].is_answer() {
                    assert_eq!(rec.completion_answer, step.candidates[rec.decision.action].text);
                }
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn omission_free_rollout_has_no_partials() {
        let t = task(EnvKind::CraftWorld, 1);
        let p = PolicyParams {
            w_thought: [50.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            w_action: [0.0; 6],
            w_omit: [-50.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        };
        let (_, partials) = rollout(&t, &p, 1.0, &mut rng::stream(&[1]), true).unwrap();
        assert!(partials.is_empty());
    }

    fn random_groups(seed: u64) -> (Vec<RolloutGroup>, PolicyParams) {
        let mut r = rng::stream(&[seed]);
        let p = random_params(&mut r, 1.5);
        let config = TrainConfig {
            n: 4,
            seed,
            ..TrainConfig::default()
        };
        let groups = (0..2)
            .map(|i| sample_group(&task(EnvKind::ALL[i], seed + i as u64), &p, &config, 1).unwrap())
            .collect();
        (groups, p)
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        for seed in 0..10 {
            let (groups, p) = random_groups(seed);
            let reference = random_params(&mut rng::stream(&[seed, 1]), 1.0);
            let batch = build_batch(&groups, &p);
            let g = surrogate_grad(&p, &reference, &batch, 0.2, 0.05);
            let h = 1e-5;
            for k in 0..N_PARAMS {
                let mut e = [0.0; N_PARAMS];
                e[k] = h;
                let fd = (surrogate(&p.axpy(1.0, &e), &reference, &batch, 0.2, 0.05)
                    - surrogate(&p.axpy(-1.0, &e), &reference, &batch, 0.2, 0.05))
                    / (2.0 * h);
                let rel = (g[k] - fd).abs() / g[k].abs().max(fd.abs()).max(1e-4);
                assert!(rel < 1e-4, "k={k}: {} vs {fd}", g[k]);
            }
        }
    }

    #[test]
    fn zero_variance_and_equal_reference_is_stationary() {
        let (mut groups, p) = random_groups(3);
        for g in &mut groups {
            for s in &mut g.scores {
                *s = 0.5;
            }
        }
        let (next, stats) = grpo_update(&p, &p, &groups, &TrainConfig::default()).unwrap();
        assert_eq!(next, p);
        assert_eq!(stats.grad_norm, 0.0);
    }

    #[test]
    fn small_step_raises_positive_advantage_log_prob() {
        let (groups, p) = random_groups(5);
        let batch = build_batch(&groups, &p);
        let config = TrainConfig {
            learning_rate: 1e-3,
            beta: 0.0,
            max_grad_norm: None,
            ..TrainConfig::default()
        };
        let (next, _) = grpo_update(&p, &p, &groups, &config).unwrap();
        let before: f64 = batch
            .terms
            .iter()
            .map(|t| t.advantage * log_prob(&p, &t.features, &t.decision))
            .sum();
        let after: f64 = batch
            .terms
            .iter()
            .map(|t| t.advantage * log_prob(&next, &t.features, &t.decision))
            .sum();
        assert!(after > before);
    }

    #[test]
    fn clipped_terms_stop_contributing() {
        let mut r = rng::stream(&[8]);
        let f = random_features(&mut r);
        let d = random_decision(&mut r, &f);
        let p = random_params(&mut r, 1.0);
        let batch = Batch {
            terms: vec![Term {
                features: f.clone(),
                decision: d.clone(),
                advantage: 1.0,
                old_log_prob: log_prob(&p, &f, &d) - 1.0,
            }],
            kl_contexts: vec![],
            n_rollouts: 1,
        };
        assert_eq!(surrogate_grad(&p, &p, &batch, 0.2, 0.0), [0.0; N_PARAMS]);
        assert!((surrogate(&p, &p, &batch, 0.2, 0.0) - 1.2).abs() < 1e-12);
    }

    #[test]
    fn train_loop_zero_lr_and_determinism() {
        let tasks: Vec<Arc<Task>> = (0..4).map(|s| task(EnvKind::CraftWorld, s)).collect();
        let p = random_params(&mut rng::stream(&[1]), 1.0);
        let config = TrainConfig {
            n: 3,
            learning_rate: 0.0,
            tasks_per_step: 2,
            ..TrainConfig::default()
        };
        let out = train_loop(&config, &p, &p, &tasks).unwrap();
        assert_eq!(out.params, p);
        assert_eq!(out.metrics.len(), 2);
        let config = TrainConfig {
            learning_rate: 0.3,
            ..config
        };
        let a = train_loop(&config, &p, &p, &tasks).unwrap();
        let b = train_loop(&config, &p, &p, &tasks).unwrap();
        assert_eq!(a, b);
        assert!(TrainConfig { n: 1, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn evaluation_of_oracle() {
        let tasks: Vec<Arc<Task>> = (0..5).map(|s| task(EnvKind::GridNav, s)).collect();
        let eps = evaluate(&tasks, &[1, 2], Actor::Oracle(ThinkingStyle::Verbose));
        let s = EvalSummary::from_episodes(&eps);
        assert_eq!(s.episodes, 10);
        assert_eq!(s.success_rate, 1.0);
        assert_eq!(s.mean_live_tokens, s.mean_transcript_tokens);
        assert_eq!(s.mean_omitted_turns, 0.0);
        let hist = omission_histogram(&eps);
        assert_eq!(hist.len(), eps.iter().map(|e| e.steps.len()).max().unwrap());
        assert!(hist.iter().all(|h| h.any_rate == 0.0 && h.episodes > 0));
        let terse = evaluate(&tasks, &[1], Actor::Oracle(ThinkingStyle::Terse));
        let hist = omission_histogram(&terse);
        assert_eq!(hist[0].empty_thought_rate, 0.0);
        assert_eq!(hist[1].empty_thought_rate, 1.0);
        assert!(EvalSummary::from_episodes(&terse).mean_omitted_turns > 0.0);
    }
}
