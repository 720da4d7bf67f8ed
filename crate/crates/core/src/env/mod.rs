//! Deterministic toy environments with scripted experts.
//!
//! Three worlds share one state machine ([`EnvState`]):
//! - `craftworld`: recipe trees with distractor recipes,
//! - `gridnav`: two-room grids with doors and keys,
//! - `factsearch`: two-hop questions over a small fact corpus.
//!
//! Every candidate action carries six features
//! `[bias, question overlap, legality, novelty, progress, tokens/16]`.
//! The progress feature is 1 only on the expert's next step, and only once a
//! verbose thought has established a plan.

mod craftworld;
mod factsearch;
mod gridnav;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::tokenizer::{count_tokens, jaccard, token_set};
use crate::trajectory::{ActionBlock, ActionKind, ThoughtMode, Turn};

pub use craftworld::CraftTask;
pub use factsearch::{Fact, FactTask};
pub use gridnav::GridTask;

pub const CANDIDATE_WIDTH: usize = 6;
pub const MIN_CANDIDATES: usize = 4;
pub const MAX_CANDIDATES: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    CraftWorld,
    GridNav,
    FactSearch,
}

impl EnvKind {
    pub const ALL: [EnvKind; 3] = [EnvKind::CraftWorld, EnvKind::GridNav, EnvKind::FactSearch];

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::CraftWorld => "craftworld",
            EnvKind::GridNav => "gridnav",
            EnvKind::FactSearch => "factsearch",
        }
    }

    pub fn default_max_turns(self) -> usize {
        match self {
            EnvKind::CraftWorld => 20,
            EnvKind::GridNav => 10,
            EnvKind::FactSearch => 8,
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = EnvError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EnvKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| EnvError::UnknownEnv(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard];

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
        }
    }

    fn ordinal(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Difficulty {
    type Err = EnvError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Difficulty::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| EnvError::UnknownDifficulty(s.to_string()))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EnvError {
    #[error("unknown environment '{0}' (expected craftworld, gridnav or factsearch)")]
    UnknownEnv(String),
    #[error("unknown difficulty '{0}' (expected easy, medium or hard)")]
    UnknownDifficulty(String),
    #[error("episode is already done")]
    Done,
    #[error("empty action text")]
    EmptyAction,
    #[error("action {index} ('{text}') cannot be replayed: {reason}")]
    Replay {
        index: usize,
        text: String,
        reason: String,
    },
    #[error("observation {0} does not exist")]
    NoSuchObservation(usize),
}

/// World-specific hidden state of a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum World {
    CraftWorld(CraftTask),
    GridNav(GridTask),
    FactSearch(FactTask),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: String,
    pub env: EnvKind,
    pub seed: u64,
    pub difficulty: Difficulty,
    pub question: String,
    pub max_turns: usize,
    pub world: World,
}

impl Task {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("task serializes")
    }

    /// Ground-truth answer string accepted by [`grade`].
    pub fn expected_answer(&self) -> String {
        match &self.world {
            World::CraftWorld(c) => c.expected_answer(),
            World::GridNav(g) => g.expected_answer(),
            World::FactSearch(f) => f.answer.clone(),
        }
    }
}

pub fn make_task(env: EnvKind, seed: u64, difficulty: Difficulty) -> Task {
    let mut rng = rng::stream(&[rng::str_key(env.name()), seed, difficulty.ordinal()]);
    let task_id = format!("{}-{}-{}", env.name(), difficulty.name(), seed);
    let (question, world) = match env {
        EnvKind::CraftWorld => {
            let t = CraftTask::generate(&mut rng, difficulty);
            (t.question(), World::CraftWorld(t))
        }
        EnvKind::GridNav => {
            let t = GridTask::generate(&mut rng, difficulty);
            (t.question(), World::GridNav(t))
        }
        EnvKind::FactSearch => {
            let t = FactTask::generate(&mut rng, difficulty);
            (t.question(), World::FactSearch(t))
        }
    };
    Task {
        task_id,
        env,
        seed,
        difficulty,
        question,
        max_turns: env.default_max_turns(),
        world,
    }
}

pub fn make_task_by_name(env: &str, seed: u64, difficulty: &str) -> Result<Task, EnvError> {
    Ok(make_task(env.parse()?, seed, difficulty.parse()?))
}

/// Normalize for answer comparison: case-folded, whitespace collapsed.
pub fn normalize_answer(s: &str) -> String {
    s.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn grade(task: &Task, final_answer: &str) -> f64 {
    let given = normalize_answer(final_answer);
    if !given.is_empty() && given == normalize_answer(&task.expected_answer()) {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionCandidate {
    pub action: ActionBlock,
    pub features: [f64; CANDIDATE_WIDTH],
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub action: ActionBlock,
    pub observation: Option<String>,
    pub present: bool,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// `None` for answer actions.
    pub observation: Option<String>,
    pub done: bool,
    /// Set once the episode terminates (0 on truncation).
    pub r_task: Option<f64>,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Inner {
    Craft(craftworld::CraftState),
    Grid(gridnav::GridState),
    Fact(factsearch::FactState),
}

/// Read-only view of the interaction history handed to world logic.
pub(crate) struct History<'a> {
    pub steps: &'a [StepRecord],
}

impl History<'_> {
    pub fn present_observations(&self) -> impl Iterator<Item = &str> {
        self.steps
            .iter()
            .filter(|s| s.present)
            .filter_map(|s| s.observation.as_deref())
    }

    pub fn took(&self, text: &str) -> bool {
        self.steps.iter().any(|s| s.action.text == text)
    }
}

/// The expert's move at a state: either a genuine solution step or a
/// fallback taken when the information it needs is gone from the context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum ExpertMove {
    Solve(ActionBlock),
    Fallback(ActionBlock),
}

impl ExpertMove {
    pub fn action(&self) -> &ActionBlock {
        match self {
            ExpertMove::Solve(a) | ExpertMove::Fallback(a) => a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ThinkingStyle {
    /// Plans at the first turn, then thinks before every action.
    #[default]
    Verbose,
    /// Plans once, then acts with empty thoughts.
    Terse,
}

/// The expert's decision at a state, in terms of text rather than indices.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleStep {
    pub thought_mode: ThoughtMode,
    pub thought: String,
    pub action: ActionBlock,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    task: Arc<Task>,
    inner: Inner,
    turn: usize,
    plan_established: bool,
    done: bool,
    steps: Vec<StepRecord>,
    final_answer: Option<String>,
}

impl EnvState {
    pub fn new(task: Arc<Task>) -> Self {
        let inner = match &task.world {
            World::CraftWorld(c) => Inner::Craft(c.initial()),
            World::GridNav(g) => Inner::Grid(g.initial()),
            World::FactSearch(f) => Inner::Fact(f.initial()),
        };
        Self {
            task,
            inner,
            turn: 0,
            plan_established: false,
            done: false,
            steps: Vec::new(),
            final_answer: None,
        }
    }

    pub fn task(&self) -> &Arc<Task> {
        &self.task
    }

    /// Number of actions taken so far.
    pub fn turn(&self) -> usize {
        self.turn
    }

    pub fn done(&self) -> bool {
        self.done
    }

    pub fn plan_established(&self) -> bool {
        self.plan_established
    }

    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }

    pub fn final_answer(&self) -> Option<&str> {
        self.final_answer.as_deref()
    }

    /// Whether the previous action was accepted; false before the first action.
    pub fn last_action_ok(&self) -> bool {
        self.steps.last().is_some_and(|s| s.valid)
    }

    pub fn establish_plan(&mut self) {
        self.plan_established = true;
    }

    pub fn set_plan_established(&mut self, value: bool) {
        self.plan_established = value;
    }

    /// Take observation `k` (1-based turn index) out of the live context.
    pub fn omit_observation(&mut self, k: usize) -> Result<(), EnvError> {
        match self.steps.get_mut(k.wrapping_sub(1)) {
            Some(step) if step.observation.is_some() => {
                step.present = false;
                Ok(())
            }
            _ => Err(EnvError::NoSuchObservation(k)),
        }
    }

    /// Sync observation presence and plan flag with a turn list.
    pub fn sync_with_turns(&mut self, turns: &[Turn]) {
        for (step, turn) in self.steps.iter_mut().zip(turns) {
            step.present = turn.observation.as_ref().is_some_and(|o| !o.is_omitted());
        }
        self.plan_established = turns.iter().any(|t| t.thought.mode == ThoughtMode::Verbose);
    }

    fn history(&self) -> History<'_> {
        History { steps: &self.steps }
    }

    /// Apply an action to the world only; returns (observation, valid).
    fn simulate(&self, inner: &mut Inner, action: &ActionBlock) -> (String, bool) {
        match (inner, &self.task.world) {
            (Inner::Craft(s), World::CraftWorld(t)) => t.step(s, &action.text),
            (Inner::Grid(s), World::GridNav(t)) => t.step(s, &action.text),
            (Inner::Fact(s), World::FactSearch(t)) => t.step(s, &action.text),
            _ => unreachable!("state and task world always match"),
        }
    }

    /// Whether the world would accept a tool call, without keeping its effect.
    fn legal(&self, action: &ActionBlock) -> bool {
        match (&self.inner, &self.task.world) {
            (_, World::FactSearch(_)) => factsearch::search_query(&action.text).is_some(),
            (Inner::Craft(s), World::CraftWorld(t)) => t.accepts(s, &action.text),
            _ => {
                let mut probe = self.inner.clone();
                self.simulate(&mut probe, action).1
            }
        }
    }

    pub fn step(&mut self, action: &ActionBlock) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::Done);
        }
        if action.text.trim().is_empty() {
            return Err(EnvError::EmptyAction);
        }
        self.turn += 1;
        if action.kind == ActionKind::Answer {
            self.done = true;
            self.final_answer = Some(action.text.clone());
            self.steps.push(StepRecord {
                action: action.clone(),
                observation: None,
                present: false,
                valid: true,
            });
            return Ok(StepOutcome {
                observation: None,
                done: true,
                r_task: Some(grade(&self.task, &action.text)),
                valid: true,
            });
        }
        let mut inner = self.inner.clone();
        let (observation, valid) = self.simulate(&mut inner, action);
        if valid {
            self.inner = inner;
        }
        self.steps.push(StepRecord {
            action: action.clone(),
            observation: Some(observation.clone()),
            present: true,
            valid,
        });
        let truncated = self.turn >= self.task.max_turns;
        if truncated {
            self.done = true;
        }
        Ok(StepOutcome {
            observation: Some(observation),
            done: truncated,
            r_task: truncated.then_some(0.0),
            valid,
        })
    }

    pub(crate) fn expert_move(&self) -> ExpertMove {
        let h = self.history();
        match (&self.inner, &self.task.world) {
            (Inner::Craft(s), World::CraftWorld(t)) => t.expert(s, &h),
            (Inner::Grid(s), World::GridNav(t)) => t.expert(s, &h),
            (Inner::Fact(s), World::FactSearch(t)) => t.expert(s, &h),
            _ => unreachable!("state and task world always match"),
        }
    }

    /// The expert's next solution step, if one exists from here.
    pub fn correct_next_step(&self) -> Option<ActionBlock> {
        match self.expert_move() {
            ExpertMove::Solve(a) => Some(a),
            ExpertMove::Fallback(_) => None,
        }
    }

    /// The template thought the expert would emit here: a plan (30 to 80
    /// tokens) while no plan exists, a short step note otherwise.
    pub fn oracle_thought(&self) -> String {
        let next = self.expert_move();
        let plan = !self.plan_established;
        match &self.task.world {
            World::CraftWorld(t) if plan => t.plan_text(),
            World::CraftWorld(t) => t.step_note(next.action()),
            World::GridNav(t) if plan => t.plan_text(),
            World::GridNav(t) => t.step_note(next.action()),
            World::FactSearch(t) if plan => t.plan_text(),
            World::FactSearch(t) => t.step_note(next.action()),
        }
    }

    pub fn oracle_step(&self, style: ThinkingStyle) -> OracleStep {
        let verbose = !self.plan_established || style == ThinkingStyle::Verbose;
        OracleStep {
            thought_mode: if verbose { ThoughtMode::Verbose } else { ThoughtMode::Empty },
            thought: if verbose { self.oracle_thought() } else { String::new() },
            action: self.expert_move().action().clone(),
        }
    }

    fn candidate_pool(&self) -> (Vec<ActionBlock>, Vec<ActionBlock>) {
        let h = self.history();
        match (&self.inner, &self.task.world) {
            (Inner::Craft(s), World::CraftWorld(t)) => t.candidates(s, &h),
            (Inner::Grid(s), World::GridNav(t)) => t.candidates(s, &h),
            (Inner::Fact(s), World::FactSearch(t)) => t.candidates(s, &h),
            _ => unreachable!("state and task world always match"),
        }
    }

    /// Candidate actions with features. Always contains the expert's move.
    pub fn enumerate_actions(&self) -> Vec<ActionCandidate> {
        let expert = self.expert_move();
        let (mut priority, mut rest) = self.candidate_pool();
        let mut chosen: Vec<ActionBlock> = vec![expert.action().clone()];
        let push = |a: ActionBlock, chosen: &mut Vec<ActionBlock>| {
            if chosen.len() < MAX_CANDIDATES && !chosen.contains(&a) {
                chosen.push(a);
            }
        };
        let mut rng = rng::stream(&[rng::str_key(&self.task.task_id), self.turn as u64, 0xc4]);
        priority.dedup();
        for a in priority {
            push(a, &mut chosen);
        }
        rest.shuffle(&mut rng);
        for a in rest {
            push(a, &mut chosen);
        }
        debug_assert!(chosen.len() >= MIN_CANDIDATES, "pool too small: {chosen:?}");
        chosen.shuffle(&mut rng);

        let correct = match &expert {
            ExpertMove::Solve(a) if self.plan_established => Some(a),
            _ => None,
        };
        let question = token_set(&self.task.question);
        chosen
            .into_iter()
            .map(|action| {
                let legal = match action.kind {
                    ActionKind::Answer => true,
                    ActionKind::ToolCall => self.legal(&action),
                };
                let novel = !self.steps.iter().any(|s| s.action == action);
                let progress = correct.is_some_and(|c| *c == action);
                let overlap = jaccard(&token_set(&action.text), &question);
                let features = [
                    1.0,
                    overlap,
                    f64::from(u8::from(legal)),
                    f64::from(u8::from(novel)),
                    f64::from(u8::from(progress)),
                    count_tokens(&action.text) as f64 / 16.0,
                ];
                ActionCandidate { action, features }
            })
            .collect()
    }
}

/// Replay an action list from the initial state. Invalid-but-accepted actions
/// (those producing error feedback) replay fine; stepping past the end fails.
pub fn restore(task: &Arc<Task>, actions: &[ActionBlock]) -> Result<EnvState, EnvError> {
    let mut state = EnvState::new(Arc::clone(task));
    for (i, a) in actions.iter().enumerate() {
        state.step(a).map_err(|e| EnvError::Replay {
            index: i,
            text: a.text.clone(),
            reason: e.to_string(),
        })?;
    }
    Ok(state)
}

/// Restore to the boundary after `turns` and sync omissions and plan flag.
pub fn restore_turns(task: &Arc<Task>, turns: &[Turn]) -> Result<EnvState, EnvError> {
    let actions: Vec<ActionBlock> = turns.iter().map(|t| t.action.clone()).collect();
    let mut state = restore(task, &actions)?;
    state.sync_with_turns(turns);
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_oracle(task: &Task, style: ThinkingStyle) -> (EnvState, f64) {
        let task = Arc::new(task.clone());
        let mut state = EnvState::new(Arc::clone(&task));
        loop {
            let step = state.oracle_step(style);
            if step.thought_mode == ThoughtMode::Verbose {
                state.establish_plan();
            }
            let out = state.step(&step.action).unwrap();
            if out.done {
                return (state, out.r_task.unwrap());
            }
        }
    }

    #[test]
    fn unknown_names_rejected() {
        assert_eq!(
            make_task_by_name("webshop", 1, "easy"),
            Err(EnvError::UnknownEnv("webshop".into()))
        );
        assert!(matches!(
            make_task_by_name("gridnav", 1, "extreme"),
            Err(EnvError::UnknownDifficulty(_))
        ));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = make_task(EnvKind::CraftWorld, 7, Difficulty::Easy);
        let b = make_task(EnvKind::CraftWorld, 7, Difficulty::Easy);
        assert_eq!(a, b);
        assert_eq!(a.to_json(), b.to_json());
        assert_ne!(a, make_task(EnvKind::CraftWorld, 8, Difficulty::Easy));
    }

    #[test]
    fn oracle_solves_everything() {
        for env in EnvKind::ALL {
            for d in Difficulty::ALL {
                for seed in 0..40 {
                    let task = make_task(env, seed, d);
                    for style in [ThinkingStyle::Verbose, ThinkingStyle::Terse] {
                        let (state, r) = run_oracle(&task, style);
                        assert_eq!(r, 1.0, "{} failed", task.task_id);
                        assert!(state.turn() <= task.max_turns);
                    }
                }
            }
        }
    }

    #[test]
    fn oracle_thought_lengths() {
        for env in EnvKind::ALL {
            for d in Difficulty::ALL {
                for seed in 0..30 {
                    let task = Arc::new(make_task(env, seed, d));
                    let mut state = EnvState::new(Arc::clone(&task));
                    let plan = count_tokens(&state.oracle_thought());
                    assert!((30..=80).contains(&plan), "{}: plan {plan}", task.task_id);
                    state.establish_plan();
                    while !state.done() {
                        let n = count_tokens(&state.oracle_thought());
                        assert!((5..=15).contains(&n), "{}: note {n}", task.task_id);
                        let a = state.oracle_step(ThinkingStyle::Terse).action;
                        state.step(&a).unwrap();
                    }
                }
            }
        }
    }

    #[test]
    fn grading_normalizes() {
        let task = make_task(EnvKind::FactSearch, 3, Difficulty::Easy);
        let ans = task.expected_answer();
        assert_eq!(grade(&task, &ans), 1.0);
        assert_eq!(grade(&task, &format!("  {}  ", ans.to_uppercase())), 1.0);
        assert_eq!(grade(&task, ""), 0.0);
        assert_eq!(grade(&task, "nobody"), 0.0);
    }

    #[test]
    fn stepping_done_state_fails() {
        let task = Arc::new(make_task(EnvKind::FactSearch, 1, Difficulty::Easy));
        let mut state = EnvState::new(task);
        state.step(&ActionBlock::answer("x")).unwrap();
        assert_eq!(state.step(&ActionBlock::answer("x")), Err(EnvError::Done));
    }

    #[test]
    fn truncation_at_max_turns() {
        let task = Arc::new(make_task(EnvKind::FactSearch, 1, Difficulty::Easy));
        let mut state = EnvState::new(Arc::clone(&task));
        for i in 0..task.max_turns {
            let out = state.step(&ActionBlock::tool_call("search(nothing)")).unwrap();
            assert_eq!(out.done, i + 1 == task.max_turns);
        }
        assert_eq!(state.step(&ActionBlock::tool_call("search(x)")), Err(EnvError::Done));
    }

    #[test]
    fn plan_gating_and_candidate_bounds() {
        use rand::Rng;
        let mut rng = rng::stream(&[99]);
        let mut states = 0;
        for env in EnvKind::ALL {
            for seed in 0..60 {
                let d = Difficulty::ALL[seed as usize % 3];
                let task = Arc::new(make_task(env, seed, d));
                let mut state = EnvState::new(Arc::clone(&task));
                let plan = rng.gen_bool(0.5);
                while !state.done() {
                    let cands = state.enumerate_actions();
                    states += 1;
                    assert!(
                        (MIN_CANDIDATES..=MAX_CANDIDATES).contains(&cands.len()),
                        "{}: {} candidates",
                        task.task_id,
                        cands.len()
                    );
                    let expert = state.expert_move();
                    assert!(cands.iter().any(|c| &c.action == expert.action()));
                    let progress: Vec<_> = cands.iter().filter(|c| c.features[4] == 1.0).collect();
                    if !state.plan_established() {
                        assert!(progress.is_empty());
                    } else if let ExpertMove::Solve(a) = &expert {
                        assert_eq!(progress.len(), 1);
                        assert_eq!(&progress[0].action, a);
                    }
                    for c in &cands {
                        assert!(c.features[2] == 0.0 || c.features[2] == 1.0);
                    }
                    if plan && state.turn() == 1 {
                        state.establish_plan();
                    }
                    let pick = if rng.gen_bool(0.7) {
                        expert.action().clone()
                    } else {
                        cands[rng.gen_range(0..cands.len())].action.clone()
                    };
                    state.step(&pick).unwrap();
                }
            }
        }
        assert!(states >= 1000, "only {states} states swept");
    }

    #[test]
    fn restore_matches_direct_rollout() {
        use rand::Rng;
        let mut rng = rng::stream(&[5]);
        for episode in 0..500u64 {
            let env = EnvKind::ALL[(episode % 3) as usize];
            let task = Arc::new(make_task(env, episode / 3, Difficulty::ALL[(episode % 7 % 3) as usize]));
            let mut state = EnvState::new(Arc::clone(&task));
            let mut actions = Vec::new();
            while !state.done() {
                let cands = state.enumerate_actions();
                let a = if rng.gen_bool(0.6) {
                    state.expert_move().action().clone()
                } else {
                    cands[rng.gen_range(0..cands.len())].action.clone()
                };
                actions.push(a.clone());
                state.step(&a).unwrap();
            }
            assert_eq!(restore(&task, &actions).unwrap(), state);
            let cut = rng.gen_range(0..=actions.len());
            let mut partial = restore(&task, &actions[..cut]).unwrap();
            for a in &actions[cut..] {
                partial.step(a).unwrap();
            }
            assert_eq!(partial, state);
        }
        let task = Arc::new(make_task(EnvKind::GridNav, 0, Difficulty::Easy));
        assert_eq!(restore(&task, &[]).unwrap(), EnvState::new(Arc::clone(&task)));
    }

    #[test]
    fn orientation_is_uniquely_shortest() {
        for env in EnvKind::ALL {
            for seed in 0..30 {
                let task = Arc::new(make_task(env, seed, Difficulty::ALL[seed as usize % 3]));
                let state = EnvState::new(task);
                let expert = state.expert_move().action().clone();
                let len = count_tokens(&expert.text);
                for c in state.enumerate_actions() {
                    if c.action != expert {
                        assert!(count_tokens(&c.action.text) > len, "{:?}", c.action);
                    }
                }
            }
        }
    }

    #[test]
    fn legality_shortcut_matches_simulation() {
        let mut r = rng::stream(&[0x1e9]);
        let mut checked = 0;
        for env in EnvKind::ALL {
            for seed in 0..10 {
                let task = Arc::new(make_task(env, seed, Difficulty::Easy));
                let mut state = EnvState::new(Arc::clone(&task));
                while !state.done() {
                    let candidates = state.enumerate_actions();
                    for c in candidates.iter().filter(|c| c.action.kind == ActionKind::ToolCall) {
                        let mut probe = state.inner.clone();
                        assert_eq!(state.legal(&c.action), state.simulate(&mut probe, &c.action).1, "{:?}", c.action);
                        checked += 1;
                    }
                    let pick = &candidates[rand::Rng::gen_range(&mut r, 0..candidates.len())].action;
                    state.step(pick).unwrap();
                }
            }
        }
        assert!(checked > 500);
    }

    #[test]
    fn factsearch_answer_needs_present_evidence() {
        for seed in 0..40 {
            let task = Arc::new(make_task(EnvKind::FactSearch, seed, Difficulty::Medium));
            let answer = task.expected_answer();
            let has_answer = |s: &EnvState| {
                s.enumerate_actions()
                    .iter()
                    .any(|c| c.action.is_answer() && c.action.text == answer)
            };
            let mut state = EnvState::new(Arc::clone(&task));
            while !state.expert_move().action().is_answer() {
                assert!(!has_answer(&state));
                let a = state.expert_move().action().clone();
                state.step(&a).unwrap();
            }
            assert!(has_answer(&state));
            let last = state.turn();
            state.omit_observation(last).unwrap();
            assert!(!has_answer(&state));
            assert!(matches!(state.expert_move(), ExpertMove::Fallback(_)));
        }
    }
}
