//! Multi-turn interaction records, category-wise token accounting and the
//! JSON-Lines trajectory format.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::render::{self, View};
use crate::tokenizer::count_tokens;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThoughtMode {
    Verbose,
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThoughtBlock {
    pub mode: ThoughtMode,
    pub text: String,
}

impl ThoughtBlock {
    pub fn verbose(text: impl Into<String>) -> Self {
        Self {
            mode: ThoughtMode::Verbose,
            text: text.into(),
        }
    }

    pub fn empty() -> Self {
        Self {
            mode: ThoughtMode::Empty,
            text: String::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.mode == ThoughtMode::Empty
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    ToolCall,
    Answer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionBlock {
    pub kind: ActionKind,
    pub text: String,
}

impl ActionBlock {
    pub fn tool_call(text: impl Into<String>) -> Self {
        Self {
            kind: ActionKind::ToolCall,
            text: text.into(),
        }
    }

    pub fn answer(text: impl Into<String>) -> Self {
        Self {
            kind: ActionKind::Answer,
            text: text.into(),
        }
    }

    pub fn is_answer(&self) -> bool {
        self.kind == ActionKind::Answer
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationState {
    Present,
    Omitted,
}

/// Environment feedback. The text is kept even after omission so that the
/// pre-omission transcript can always be reconstructed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationCell {
    pub state: ObservationState,
    pub text: String,
}

impl ObservationCell {
    pub fn present(text: impl Into<String>) -> Self {
        Self {
            state: ObservationState::Present,
            text: text.into(),
        }
    }

    pub fn is_omitted(&self) -> bool {
        self.state == ObservationState::Omitted
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    #[serde(rename = "t")]
    pub index: usize,
    pub thought: ThoughtBlock,
    /// Earlier turns whose observations this turn removes from the live context.
    #[serde(rename = "omit")]
    pub omit: BTreeSet<usize>,
    pub action: ActionBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation: Option<ObservationCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub env: String,
    pub seed: u64,
    pub question: String,
    pub turns: Vec<Turn>,
    pub final_answer: String,
    pub r_task: f64,
    pub r_omit: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum TrajectoryError {
    #[error("turn {position}: index {found} is not consecutive (expected {expected})")]
    NonConsecutive {
        position: usize,
        expected: usize,
        found: usize,
    },
    #[error("turn {turn}: omit references turn {target}, which is not earlier")]
    ForwardOmission { turn: usize, target: usize },
    #[error("turn {turn}: omit references turn {target}, which has no observation")]
    OmitWithoutObservation { turn: usize, target: usize },
    #[error("turn {turn}: observation state is {state:?} but omission commands say otherwise")]
    OmissionMismatch { turn: usize, state: ObservationState },
    #[error("turn {turn}: answer action before the final turn")]
    EarlyAnswer { turn: usize },
    #[error("turn {turn}: answer turn carries an observation")]
    AnswerWithObservation { turn: usize },
    #[error("turn {turn}: tool call without an observation")]
    MissingObservation { turn: usize },
    #[error("turn {turn}: empty thought with non-empty text")]
    EmptyThoughtText { turn: usize },
    #[error("turn {turn}: verbose thought with blank text")]
    BlankVerboseThought { turn: usize },
    #[error("turn {turn}: action text is empty")]
    EmptyAction { turn: usize },
    #[error("truncated trajectory (no answer turn) has a non-empty final answer")]
    TruncatedWithAnswer,
    #[error("{field} = {value} out of range")]
    RewardRange { field: &'static str, value: f64 },
}

/// Validate turn-level invariants. A trajectory either ends in exactly one
/// answer turn or is truncated (every turn a tool call).
pub fn validate_turns(turns: &[Turn]) -> Result<(), TrajectoryError> {
    let mut omitted_by_command = BTreeSet::new();
    for (pos, turn) in turns.iter().enumerate() {
        let t = pos + 1;
        if turn.index != t {
            return Err(TrajectoryError::NonConsecutive {
                position: pos,
                expected: t,
                found: turn.index,
            });
        }
        match turn.thought.mode {
            ThoughtMode::Empty if !turn.thought.text.is_empty() => {
                return Err(TrajectoryError::EmptyThoughtText { turn: t })
            }
            ThoughtMode::Verbose if turn.thought.text.trim().is_empty() => {
                return Err(TrajectoryError::BlankVerboseThought { turn: t })
            }
            _ => {}
        }
        if turn.action.text.trim().is_empty() {
            return Err(TrajectoryError::EmptyAction { turn: t });
        }
        for &k in &turn.omit {
            if k == 0 || k >= t {
                return Err(TrajectoryError::ForwardOmission { turn: t, target: k });
            }
            if turns[k - 1].observation.is_none() {
                return Err(TrajectoryError::OmitWithoutObservation { turn: t, target: k });
            }
            omitted_by_command.insert(k);
        }
        match (turn.action.kind, &turn.observation) {
            (ActionKind::Answer, _) if t != turns.len() => {
                return Err(TrajectoryError::EarlyAnswer { turn: t })
            }
            (ActionKind::Answer, Some(_)) => {
                return Err(TrajectoryError::AnswerWithObservation { turn: t })
            }
            (ActionKind::ToolCall, None) => {
                return Err(TrajectoryError::MissingObservation { turn: t })
            }
            _ => {}
        }
    }
    for turn in turns {
        if let Some(obs) = &turn.observation {
            let commanded = omitted_by_command.contains(&turn.index);
            if obs.is_omitted() != commanded {
                return Err(TrajectoryError::OmissionMismatch {
                    turn: turn.index,
                    state: obs.state,
                });
            }
        }
    }
    Ok(())
}

impl Trajectory {
    pub fn validate(&self) -> Result<(), TrajectoryError> {
        validate_turns(&self.turns)?;
        if self.is_truncated() && !self.final_answer.is_empty() {
            return Err(TrajectoryError::TruncatedWithAnswer);
        }
        if !(0.0..=1.0).contains(&self.r_task) {
            return Err(TrajectoryError::RewardRange {
                field: "r_task",
                value: self.r_task,
            });
        }
        if !(self.r_omit >= 0.0 && self.r_omit.is_finite()) {
            return Err(TrajectoryError::RewardRange {
                field: "r_omit",
                value: self.r_omit,
            });
        }
        Ok(())
    }

    /// True when the episode hit its turn budget without answering.
    pub fn is_truncated(&self) -> bool {
        self.turns.last().is_some_and(|t| !t.action.is_answer())
    }

    /// Tokens of the pre-omission transcript: every observation rendered in
    /// full, thoughts as emitted, omission commands included.
    pub fn full_transcript_tokens(&self) -> usize {
        full_transcript_tokens(&self.turns)
    }

    /// Tokens of the live context after every issued omission.
    pub fn live_tokens(&self) -> usize {
        render::render(&self.question, &self.turns, View::Live).total_tokens
    }

    pub fn token_breakdown(&self) -> TokenBreakdown {
        token_breakdown(&self.turns, View::Transcript)
    }

    /// Turns whose thought was emptied or whose observation was omitted.
    pub fn omitted_turns(&self) -> BTreeSet<usize> {
        self.turns
            .iter()
            .filter(|t| t.thought.is_empty() || t.observation.as_ref().is_some_and(|o| o.is_omitted()))
            .map(|t| t.index)
            .collect()
    }
}

pub fn full_transcript_tokens(turns: &[Turn]) -> usize {
    token_breakdown(turns, View::Transcript).total()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub thought: usize,
    pub action: usize,
    pub observation: usize,
    pub markers: usize,
}

impl CategoryCounts {
    pub fn total(&self) -> usize {
        self.thought + self.action + self.observation + self.markers
    }

    fn add(&mut self, other: &CategoryCounts) {
        self.thought += other.thought;
        self.action += other.action;
        self.observation += other.observation;
        self.markers += other.markers;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenBreakdown {
    pub totals: CategoryCounts,
    pub per_turn: Vec<CategoryCounts>,
}

impl TokenBreakdown {
    pub fn total(&self) -> usize {
        self.totals.total()
    }
}

/// Per-category token counts. In the transcript view observations count in
/// full regardless of state; in the live view omitted ones count as their
/// two-token placeholder under `markers`.
pub fn token_breakdown(turns: &[Turn], view: View) -> TokenBreakdown {
    let mut out = TokenBreakdown::default();
    for turn in turns {
        let mut c = CategoryCounts {
            thought: 2 + count_tokens(&turn.thought.text),
            action: 2 + count_tokens(&turn.action.text),
            markers: 2 * turn.omit.len(),
            observation: 0,
        };
        if let Some(obs) = &turn.observation {
            if view == View::Live && obs.is_omitted() {
                c.markers += 2;
            } else {
                c.observation = 2 + count_tokens(&obs.text);
            }
        }
        out.totals.add(&c);
        out.per_turn.push(c);
    }
    out
}

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: invalid trajectory: {source}")]
    Invalid {
        line: usize,
        #[source]
        source: TrajectoryError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn encode_jsonl<W: Write>(out: &mut W, trajectories: &[Trajectory]) -> Result<(), JsonlError> {
    for traj in trajectories {
        serde_json::to_writer(&mut *out, traj).map_err(|e| JsonlError::Malformed {
            line: 0,
            message: e.to_string(),
        })?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn encode_jsonl_string(trajectories: &[Trajectory]) -> String {
    let mut buf = Vec::new();
    encode_jsonl(&mut buf, trajectories).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("serde_json emits UTF-8")
}

/// Decode and validate. Blank lines are skipped; line numbers are 1-based.
pub fn decode_jsonl<R: BufRead>(input: R) -> Result<Vec<Trajectory>, JsonlError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let traj: Trajectory = serde_json::from_str(&line).map_err(|e| JsonlError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        traj.validate()
            .map_err(|source| JsonlError::Invalid { line: i + 1, source })?;
        out.push(traj);
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn turn(t: usize, thought: &str, action: ActionBlock, obs: Option<&str>) -> Turn {
        Turn {
            index: t,
            thought: if thought.is_empty() {
                ThoughtBlock::empty()
            } else {
                ThoughtBlock::verbose(thought)
            },
            omit: BTreeSet::new(),
            action,
            observation: obs.map(ObservationCell::present),
        }
    }

    fn traj(turns: Vec<Turn>) -> Trajectory {
        Trajectory {
            task_id: "t0".into(),
            env: "factsearch".into(),
            seed: 1,
            question: "q".into(),
            turns,
            final_answer: "x".into(),
            r_task: 1.0,
            r_omit: 0.0,
        }
    }

    #[test]
    fn empty_breakdown() {
        let b = token_breakdown(&[], View::Transcript);
        assert_eq!(b.total(), 0);
        assert!(b.per_turn.is_empty());
    }

    #[test]
    fn single_turn_breakdown() {
        let turns = vec![turn(
            1,
            "plan first",
            ActionBlock::tool_call("search cats"),
            Some("cats are mammals"),
        )];
        let b = token_breakdown(&turns, View::Transcript);
        assert_eq!(b.totals.thought, 4);
        assert_eq!(b.totals.action, 4);
        assert_eq!(b.totals.observation, 5);
        assert_eq!(b.totals.markers, 0);
    }

    #[test]
    fn three_turn_hand_sum() {
        let mut turns = vec![
            turn(1, "find the capital", ActionBlock::tool_call("search(capital)"), Some("The capital of A is B.")),
            turn(2, "", ActionBlock::tool_call("search(mayor of B)"), Some("The mayor of B is C.")),
            turn(3, "", ActionBlock::answer("C"), None),
        ];
        turns[2].omit.insert(1);
        turns[0].observation.as_mut().unwrap().state = ObservationState::Omitted;
        validate_turns(&turns).unwrap();
        // thoughts: (2+3) + 2 + 2; actions: (2+4) + (2+6) + (2+1)
        // observations: (2+7) + (2+7); markers: 2
        let expected = 9 + 17 + 18 + 2;
        assert_eq!(full_transcript_tokens(&turns), expected);
        let live = token_breakdown(&turns, View::Live);
        assert_eq!(live.total(), expected - 9 + 2);
    }

    #[test]
    fn rejects_forward_omission() {
        let mut turns = vec![
            turn(1, "a", ActionBlock::tool_call("x"), Some("o")),
            turn(2, "", ActionBlock::answer("y"), None),
        ];
        turns[0].omit.insert(2);
        assert!(matches!(
            validate_turns(&turns),
            Err(TrajectoryError::ForwardOmission { turn: 1, target: 2 })
        ));
    }

    #[test]
    fn rejects_unannounced_omission() {
        let mut turns = vec![
            turn(1, "a", ActionBlock::tool_call("x"), Some("o")),
            turn(2, "", ActionBlock::answer("y"), None),
        ];
        turns[0].observation.as_mut().unwrap().state = ObservationState::Omitted;
        assert!(matches!(
            validate_turns(&turns),
            Err(TrajectoryError::OmissionMismatch { turn: 1, .. })
        ));
    }

    #[test]
    fn jsonl_empty_and_single() {
        assert_eq!(encode_jsonl_string(&[]), "");
        assert!(decode_jsonl("".as_bytes()).unwrap().is_empty());
        let t = traj(vec![turn(1, "think", ActionBlock::answer("x"), None)]);
        let s = encode_jsonl_string(std::slice::from_ref(&t));
        assert_eq!(s.lines().count(), 1);
        assert_eq!(decode_jsonl(s.as_bytes()).unwrap(), vec![t]);
    }

    #[test]
    fn jsonl_field_order_is_fixed() {
        let t = traj(vec![
            turn(1, "think", ActionBlock::tool_call("a"), Some("b")),
            turn(2, "", ActionBlock::answer("x"), None),
        ]);
        let s = encode_jsonl_string(&[t]);
        assert!(s.starts_with(
            r#"{"task_id":"t0","env":"factsearch","seed":1,"question":"q","turns":[{"t":1,"thought":{"mode":"verbose","text":"think"},"omit":[],"action":{"kind":"tool_call","text":"a"},"observation":{"state":"present","text":"b"}},"#
        ));
        assert!(s.trim_end().ends_with(r#""final_answer":"x","r_task":1.0,"r_omit":0.0}"#));
    }

    #[test]
    fn jsonl_reports_line_of_bad_record() {
        let good = encode_jsonl_string(&[traj(vec![turn(1, "a", ActionBlock::answer("x"), None)])]);
        let bad = good.replace(r#""omit":[]"#, r#""omit":[1]"#);
        let input = format!("{good}{bad}");
        match decode_jsonl(input.as_bytes()) {
            Err(JsonlError::Invalid { line, source }) => {
                assert_eq!(line, 2);
                assert!(matches!(source, TrajectoryError::ForwardOmission { .. }));
            }
            other => panic!("unexpected {other:?}"),
        }
        let missing = good.replace(r#""question":"q","#, "");
        match decode_jsonl(missing.as_bytes()) {
            Err(JsonlError::Malformed { line, message }) => {
                assert_eq!(line, 1);
                assert!(message.contains("question"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    pub(crate) fn arb_trajectory() -> impl Strategy<Value = Trajectory> {
        let word = "[a-zA-Z0-9]{1,6}";
        let text = proptest::collection::vec(word, 1..6).prop_map(|w| w.join(" "));
        let turn_spec = (
            proptest::option::of(text.clone()),
            text.clone(),
            text.clone(),
            proptest::collection::vec(any::<bool>(), 0..8),
        );
        (
            proptest::collection::vec(turn_spec, 1..8),
            any::<bool>(),
            text,
            0u64..1000,
        )
            .prop_map(|(specs, truncated, answer, seed)| {
                let n = specs.len();
                let mut turns: Vec<Turn> = Vec::with_capacity(n);
                for (i, (thought, action, obs, omit_bits)) in specs.into_iter().enumerate() {
                    let t = i + 1;
                    let last = t == n && !truncated;
                    let mut omit = BTreeSet::new();
                    for (j, bit) in omit_bits.into_iter().enumerate() {
                        let k = j + 1;
                        if bit && k < t && turns[k - 1].observation.as_ref().is_some_and(|o| !o.is_omitted()) {
                            omit.insert(k);
                        }
                    }
                    for &k in &omit {
                        turns[k - 1].observation.as_mut().unwrap().state = ObservationState::Omitted;
                    }
                    turns.push(Turn {
                        index: t,
                        thought: thought.map(ThoughtBlock::verbose).unwrap_or_else(ThoughtBlock::empty),
                        omit,
                        action: if last { ActionBlock::answer(action) } else { ActionBlock::tool_call(action) },
                        observation: (!last).then(|| ObservationCell::present(obs)),
                    });
                }
                Trajectory {
                    task_id: format!("task-{seed}"),
                    env: "craftworld".into(),
                    seed,
                    question: "What is the capital of Freedonia?".into(),
                    turns,
                    final_answer: if truncated { String::new() } else { answer },
                    r_task: if truncated { 0.0 } else { 1.0 },
                    r_omit: seed as f64 / 997.0,
                }
            })
    }

    proptest! {
        #[test]
        fn jsonl_round_trip(ts in proptest::collection::vec(arb_trajectory(), 0..4)) {
            for t in &ts { prop_assert!(t.validate().is_ok()); }
            let s = encode_jsonl_string(&ts);
            prop_assert_eq!(decode_jsonl(s.as_bytes()).unwrap(), ts);
        }

        #[test]
        fn accounting_conservation(t in arb_trajectory()) {
            let b = t.token_breakdown();
            let sum: usize = b.per_turn.iter().map(|c| c.total()).sum();
            prop_assert_eq!(sum, b.total());
            prop_assert_eq!(t.full_transcript_tokens(), b.total());
            let rendered = render::render(&t.question, &t.turns, View::Transcript);
            prop_assert_eq!(rendered.total_tokens, b.total());
        }
    }
}
