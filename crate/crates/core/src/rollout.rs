//! Episode driver shared by training, synthesis and analysis.
//!
//! A turn is decided on the live context as it stands before that turn's
//! omission directive. The directive, and the plan flag set by a verbose
//! thought, take effect once the turn is recorded.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{restore_turns, ActionCandidate, EnvError, EnvState, Task, ThinkingStyle};
use crate::policy::{distribution, featurize, Decision, Features, PolicyParams};
use crate::render::apply_omission_in_place;
use crate::rl::omission_reward_from_counts;
use crate::rng;
use crate::tokenizer::count_tokens;
use crate::trajectory::{
    full_transcript_tokens, ActionBlock, ObservationCell, ObservationState, ThoughtBlock,
    ThoughtMode, Trajectory, Turn,
};

/// Who makes the decisions in an episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Actor<'a> {
    /// The scripted expert; never omits observations.
    Oracle(ThinkingStyle),
    Sample {
        params: &'a PolicyParams,
        temperature: f64,
    },
    Greedy(&'a PolicyParams),
}

impl Actor<'_> {
    pub fn decide(&self, ctx: &DecisionContext<'_>, rng: &mut ChaCha8Rng) -> Decision {
        match self {
            Actor::Oracle(style) => oracle_decision(ctx, *style),
            Actor::Sample {
                params,
                temperature,
            } => distribution(params, ctx.features, *temperature).sample(rng),
            Actor::Greedy(params) => distribution(params, ctx.features, 1.0).greedy(),
        }
    }
}

pub struct DecisionContext<'a> {
    pub state: &'a EnvState,
    pub turns: &'a [Turn],
    pub candidates: &'a [ActionCandidate],
    pub features: &'a Features,
}

pub fn oracle_decision(ctx: &DecisionContext<'_>, style: ThinkingStyle) -> Decision {
    let step = ctx.state.oracle_step(style);
    let action = ctx
        .candidates
        .iter()
        .position(|c| c.action == step.action)
        .expect("candidate list always contains the expert move");
    Decision {
        thought: step.thought_mode,
        action,
        omit: vec![false; ctx.features.observations.len()],
    }
}

/// One decision as it was taken during an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub turn: usize,
    pub features: Features,
    pub candidates: Vec<ActionBlock>,
    pub decision: Decision,
    pub gamma: BTreeSet<usize>,
    /// Template thought length the expert would have emitted here; counted
    /// as saved when the decision left the thought empty.
    pub reference_thought_tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub trajectory: Trajectory,
    pub steps: Vec<StepLog>,
}

impl Episode {
    pub fn success(&self) -> bool {
        self.trajectory.r_task >= 1.0
    }

    /// Tokens of the expert thoughts that empty-thought decisions skipped.
    pub fn omitted_thought_tokens(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| s.decision.thought == ThoughtMode::Empty)
            .map(|s| s.reference_thought_tokens)
            .sum()
    }
}

/// Turns before decision `t` with only the omissions issued before `t`
/// applied: the context the turn-`t` decision saw.
pub fn live_prefix(turns: &[Turn], t: usize) -> Vec<Turn> {
    let mut prefix: Vec<Turn> = turns[..t - 1].to_vec();
    let issued: BTreeSet<usize> = prefix.iter().flat_map(|x| x.omit.iter().copied()).collect();
    for turn in &mut prefix {
        if let Some(obs) = turn.observation.as_mut() {
            obs.state = if issued.contains(&turn.index) {
                ObservationState::Omitted
            } else {
                ObservationState::Present
            };
        }
    }
    prefix
}

/// Tok(o_omitted): observation text tokens of omitted cells.
pub fn omitted_observation_tokens(turns: &[Turn]) -> usize {
    turns
        .iter()
        .filter_map(|t| t.observation.as_ref())
        .filter(|o| o.is_omitted())
        .map(|o| count_tokens(&o.text))
        .sum()
}

/// Run from `state`/`turns` until the episode ends. `pending` is merged into
/// the first new turn's omission set; `decide` is called once per turn.
pub fn drive(
    state: EnvState,
    turns: Vec<Turn>,
    pending: BTreeSet<usize>,
    mut decide: impl FnMut(&DecisionContext<'_>) -> Decision,
) -> Episode {
    let task = Arc::clone(state.task());
    let mut state = state;
    let mut turns = turns;
    let mut pending = pending;
    let mut steps = Vec::new();
    let mut r_task = 0.0;
    let mut final_answer = String::new();
    while !state.done() {
        let t = turns.len() + 1;
        let candidates = state.enumerate_actions();
        let features = featurize(
            &task.question,
            &turns,
            &candidates,
            task.max_turns,
            state.last_action_ok(),
        );
        let decision = decide(&DecisionContext {
            state: &state,
            turns: &turns,
            candidates: &candidates,
            features: &features,
        });
        debug_assert!(decision.is_valid_for(&features));
        let reference = state.oracle_thought();
        let reference_thought_tokens = count_tokens(&reference);
        let thought = match decision.thought {
            ThoughtMode::Verbose => ThoughtBlock::verbose(reference),
            ThoughtMode::Empty => ThoughtBlock::empty(),
        };
        let action = candidates[decision.action].action.clone();
        let outcome = state.step(&action).expect("fresh candidate on a live state");
        let mut gamma = decision.gamma(&features);
        gamma.append(&mut pending);
        turns.push(Turn {
            index: t,
            thought,
            omit: gamma.clone(),
            action: action.clone(),
            observation: outcome.observation.map(ObservationCell::present),
        });
        apply_omission_in_place(&mut turns, t, &gamma).expect("flags cover present rows only");
        for &k in &gamma {
            state.omit_observation(k).expect("observation exists");
        }
        if decision.thought == ThoughtMode::Verbose {
            state.establish_plan();
        }
        if let Some(r) = outcome.r_task {
            r_task = r;
            if action.is_answer() {
                final_answer = action.text.clone();
            }
        }
        steps.push(StepLog {
            turn: t,
            features,
            candidates: candidates.into_iter().map(|c| c.action).collect(),
            decision,
            gamma,
            reference_thought_tokens,
        });
    }
    let tok_y = full_transcript_tokens(&turns);
    let thought_saved: usize = steps
        .iter()
        .filter(|s| s.decision.thought == ThoughtMode::Empty)
        .map(|s| s.reference_thought_tokens)
        .sum();
    let r_omit = omission_reward_from_counts(
        tok_y,
        thought_saved,
        omitted_observation_tokens(&turns),
        r_task,
    )
    .unwrap_or(0.0);
    let trajectory = Trajectory {
        task_id: task.task_id.clone(),
        env: task.env.name().to_string(),
        seed: task.seed,
        question: task.question.clone(),
        turns,
        final_answer,
        r_task,
        r_omit,
    };
    Episode { trajectory, steps }
}

pub fn run_episode(task: &Arc<Task>, actor: Actor<'_>, rng: &mut ChaCha8Rng) -> Episode {
    drive(
        EnvState::new(Arc::clone(task)),
        Vec::new(),
        BTreeSet::new(),
        |ctx| actor.decide(ctx, rng),
    )
}

/// Continue an episode from a turn prefix (omission states as given).
pub fn continue_from(
    task: &Arc<Task>,
    prefix: Vec<Turn>,
    pending: BTreeSet<usize>,
    actor: Actor<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<Episode, EnvError> {
    let state = restore_turns(task, &prefix)?;
    Ok(drive(state, prefix, pending, |ctx| actor.decide(ctx, rng)))
}

/// [`continue_from`] with a fresh stream per turn keyed by `key` and the
/// turn index, so runs that differ in one decision stay aligned afterwards.
pub fn continue_paired(
    task: &Arc<Task>,
    prefix: Vec<Turn>,
    pending: BTreeSet<usize>,
    actor: Actor<'_>,
    key: &[u64],
) -> Result<Episode, EnvError> {
    let state = restore_turns(task, &prefix)?;
    let mut k = key.to_vec();
    k.push(0);
    Ok(drive(state, prefix, pending, |ctx| {
        *k.last_mut().expect("key has a turn slot") = ctx.turns.len() as u64 + 1;
        actor.decide(ctx, &mut rng::stream(&k))
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OmissionKind {
    Thought,
    Observation,
}

impl OmissionKind {
    pub fn name(self) -> &'static str {
        match self {
            OmissionKind::Thought => "thought",
            OmissionKind::Observation => "observation",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum InterventionError {
    #[error("turn {turn} does not exist (trajectory has {len} turns)")]
    NoSuchTurn { turn: usize, len: usize },
    #[error("turn {0} is the last turn; nothing follows it")]
    Terminal(usize),
    #[error("turn {0} has no observation to omit")]
    NoObservation(usize),
    #[error("replay failed: {0}")]
    Replay(String),
}

/// The prefix through turn `t` with the single omission applied, and the
/// directive the next decision must carry.
pub fn intervention_prefix(
    trajectory: &Trajectory,
    t: usize,
    kind: Option<OmissionKind>,
) -> Result<(Vec<Turn>, BTreeSet<usize>), InterventionError> {
    let len = trajectory.turns.len();
    if t == 0 || t > len {
        return Err(InterventionError::NoSuchTurn { turn: t, len });
    }
    if t == len {
        return Err(InterventionError::Terminal(t));
    }
    let mut prefix = live_prefix(&trajectory.turns, t + 1);
    let mut pending = BTreeSet::new();
    match kind {
        None => {}
        Some(OmissionKind::Thought) => prefix[t - 1].thought = ThoughtBlock::empty(),
        Some(OmissionKind::Observation) => {
            let obs = prefix[t - 1]
                .observation
                .as_mut()
                .ok_or(InterventionError::NoObservation(t))?;
            if !obs.is_omitted() {
                obs.state = ObservationState::Omitted;
                pending.insert(t);
            }
        }
    }
    Ok((prefix, pending))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuationOutcome {
    pub success: bool,
    /// Live-view tokens of the completed trajectory.
    pub cost: usize,
}

/// `k` continuations after turn `t` with the given omission (or none).
/// Continuation `j` draws from streams keyed only by `(seed, task, t, j)`
/// and the turn, so control and treatment runs are paired.
pub fn continuations(
    task: &Arc<Task>,
    trajectory: &Trajectory,
    t: usize,
    kind: Option<OmissionKind>,
    actor: Actor<'_>,
    k: usize,
    seed: u64,
) -> Result<Vec<ContinuationOutcome>, InterventionError> {
    let (prefix, pending) = intervention_prefix(trajectory, t, kind)?;
    (0..k)
        .map(|j| {
            let key = [seed, rng::str_key(&task.task_id), t as u64, j as u64];
            let ep = continue_paired(task, prefix.clone(), pending.clone(), actor, &key)
                .map_err(|e| InterventionError::Replay(e.to_string()))?;
            Ok(ContinuationOutcome {
                success: ep.success(),
                cost: ep.trajectory.live_tokens(),
            })
        })
        .collect()
}
