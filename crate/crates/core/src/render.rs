//! Tag wire format: rendering, omission directives, loss masks, parsing.
//!
//! Layout (segments joined by `\n`, preceded by a question header line):
//!
//! ```text
//! <question>Q</question>
//! <think>THOUGHT</think>                      (or `<think> </think>` when empty)
//! <omit_tool_response_K></omit_tool_response_K> (one per K in the turn's omit set, ascending)
//! <tool_call>ACTION</tool_call>               (or `<answer>ACTION</answer>`)
//! <tool_response_t>OBSERVATION</tool_response_t>
//! ```
//!
//! In the live view an omitted observation `t` is replaced by
//! `<omitted_tool_response_t></omitted_tool_response_t>`.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::tokenizer::{count_tokens, for_each_token};
use crate::trajectory::{
    validate_turns, ActionBlock, ActionKind, ObservationCell, ObservationState, ThoughtBlock,
    ThoughtMode, Turn, TrajectoryError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum View {
    /// Issued omissions applied; what the policy conditions on.
    Live,
    /// Everything rendered in full.
    Transcript,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    Agent,
    Environment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Category {
    Thought,
    Action,
    Observation,
    Marker,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptSegment {
    pub text: String,
    pub origin: Origin,
    pub turn: usize,
    pub category: Category,
    pub tokens: usize,
}

impl TranscriptSegment {
    fn new(text: String, turn: usize, category: Category) -> Self {
        let origin = match category {
            Category::Observation => Origin::Environment,
            _ => Origin::Agent,
        };
        let tokens = count_tokens(&text);
        Self {
            text,
            origin,
            turn,
            category,
            tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedContext {
    pub question: String,
    pub segments: Vec<TranscriptSegment>,
    pub total_tokens: usize,
    pub view: View,
}

impl RenderedContext {
    /// Wire text. Round-trips through [`parse_transcript`] in the transcript view.
    pub fn to_text(&self) -> String {
        let mut out = format!("<question>{}</question>", self.question);
        for seg in &self.segments {
            out.push('\n');
            out.push_str(&seg.text);
        }
        out
    }
}

pub fn placeholder(t: usize) -> String {
    format!("<omitted_tool_response_{t}></omitted_tool_response_{t}>")
}

pub fn omit_command(k: usize) -> String {
    format!("<omit_tool_response_{k}></omit_tool_response_{k}>")
}

/// Render turns. Turns are assumed valid (see [`render_checked`]).
pub fn render(question: &str, turns: &[Turn], view: View) -> RenderedContext {
    let mut segments = Vec::with_capacity(turns.len() * 3);
    for turn in turns {
        let t = turn.index;
        let thought = match turn.thought.mode {
            ThoughtMode::Empty => "<think> </think>".to_string(),
            ThoughtMode::Verbose => format!("<think>{}</think>", turn.thought.text),
        };
        segments.push(TranscriptSegment::new(thought, t, Category::Thought));
        for &k in &turn.omit {
            segments.push(TranscriptSegment::new(omit_command(k), t, Category::Marker));
        }
        let action = match turn.action.kind {
            ActionKind::ToolCall => format!("<tool_call>{}</tool_call>", turn.action.text),
            ActionKind::Answer => format!("<answer>{}</answer>", turn.action.text),
        };
        segments.push(TranscriptSegment::new(action, t, Category::Action));
        if let Some(obs) = &turn.observation {
            if view == View::Live && obs.is_omitted() {
                segments.push(TranscriptSegment::new(placeholder(t), t, Category::Marker));
            } else {
                segments.push(TranscriptSegment::new(
                    format!("<tool_response_{t}>{}</tool_response_{t}>", obs.text),
                    t,
                    Category::Observation,
                ));
            }
        }
    }
    let total_tokens = segments.iter().map(|s| s.tokens).sum();
    RenderedContext {
        question: question.to_string(),
        segments,
        total_tokens,
        view,
    }
}

pub fn render_checked(
    question: &str,
    turns: &[Turn],
    view: View,
) -> Result<RenderedContext, TrajectoryError> {
    validate_turns(turns)?;
    Ok(render(question, turns, view))
}

/// Live-view token count of a turn prefix without building segment strings.
pub fn live_tokens(turns: &[Turn]) -> usize {
    crate::trajectory::token_breakdown(turns, View::Live).total()
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OmissionError {
    #[error("cannot omit observation {target} at turn {turn}: only earlier turns are eligible")]
    NotEarlier { turn: usize, target: usize },
    #[error("cannot omit observation {target}: turn has no observation")]
    NoObservation { target: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OmissionOutcome {
    pub turns: Vec<Turn>,
    /// Indices in the directive that were already omitted.
    pub redundant: usize,
}

/// Mark observations in `gamma` as omitted. Only observation states change;
/// recording the command on turn `t` is the caller's job.
pub fn apply_omission(
    turns: &[Turn],
    t: usize,
    gamma: &BTreeSet<usize>,
) -> Result<OmissionOutcome, OmissionError> {
    let mut out = turns.to_vec();
    let redundant = apply_omission_in_place(&mut out, t, gamma)?;
    Ok(OmissionOutcome {
        turns: out,
        redundant,
    })
}

pub fn apply_omission_in_place(
    turns: &mut [Turn],
    t: usize,
    gamma: &BTreeSet<usize>,
) -> Result<usize, OmissionError> {
    for &k in gamma {
        if k == 0 || k >= t {
            return Err(OmissionError::NotEarlier { turn: t, target: k });
        }
        if turns.get(k - 1).and_then(|x| x.observation.as_ref()).is_none() {
            return Err(OmissionError::NoObservation { target: k });
        }
    }
    let mut redundant = 0;
    for &k in gamma {
        let obs = turns[k - 1].observation.as_mut().expect("checked above");
        if obs.is_omitted() {
            redundant += 1;
        }
        obs.state = ObservationState::Omitted;
    }
    Ok(redundant)
}

/// True for tokens of agent-origin segments.
pub fn agent_token_mask(rendered: &RenderedContext) -> Vec<bool> {
    let mut mask = Vec::with_capacity(rendered.total_tokens);
    for seg in &rendered.segments {
        let agent = seg.origin == Origin::Agent;
        for_each_token(&seg.text, |_| mask.push(agent));
    }
    mask
}

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("offset {offset}: expected {expected}")]
    Expected { offset: usize, expected: String },
    #[error("offset {offset}: unclosed <{tag}>")]
    Unclosed { offset: usize, tag: String },
    #[error("offset {offset}: turn numbering out of order (expected {expected}, found {found})")]
    TurnOrder {
        offset: usize,
        expected: usize,
        found: usize,
    },
    #[error("invalid turns: {0}")]
    Invalid(#[from] TrajectoryError),
}

struct Cursor<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_newlines(&mut self) {
        while self.src[self.pos..].starts_with('\n') {
            self.pos += 1;
        }
    }

    fn at_end(&self) -> bool {
        self.pos >= self.src.len()
    }

    fn peek_tag(&self) -> Option<&'a str> {
        let rest = &self.src[self.pos..];
        if !rest.starts_with('<') {
            return None;
        }
        let end = rest.find('>')?;
        Some(&rest[1..end])
    }

    fn expect(&mut self, lit: &str) -> Result<(), ParseError> {
        if self.src[self.pos..].starts_with(lit) {
            self.pos += lit.len();
            Ok(())
        } else {
            Err(ParseError::Expected {
                offset: self.pos,
                expected: lit.to_string(),
            })
        }
    }

    /// `<tag>BODY</tag>` where BODY runs to the first closing tag.
    fn element(&mut self, tag: &str) -> Result<&'a str, ParseError> {
        let start = self.pos;
        self.expect(&format!("<{tag}>"))?;
        let close = format!("</{tag}>");
        let rest = &self.src[self.pos..];
        let end = rest.find(&close).ok_or_else(|| ParseError::Unclosed {
            offset: start,
            tag: tag.to_string(),
        })?;
        let body = &rest[..end];
        self.pos += end + close.len();
        Ok(body)
    }
}

/// Inverse of [`render`] in the transcript view. Observation states are
/// reconstructed from the omission commands.
pub fn parse_transcript(text: &str) -> Result<(String, Vec<Turn>), ParseError> {
    if text.is_empty() {
        return Ok((String::new(), Vec::new()));
    }
    let mut cur = Cursor { src: text, pos: 0 };
    let question = cur.element("question")?.to_string();
    let mut turns: Vec<Turn> = Vec::new();
    loop {
        cur.skip_newlines();
        if cur.at_end() {
            break;
        }
        let t = turns.len() + 1;
        let body = cur.element("think")?;
        let thought = if body == " " {
            ThoughtBlock::empty()
        } else {
            ThoughtBlock::verbose(body)
        };
        let mut omit = BTreeSet::new();
        loop {
            cur.skip_newlines();
            match cur.peek_tag() {
                Some(tag) if tag.starts_with("omit_tool_response_") => {
                    let offset = cur.pos;
                    let k: usize = tag["omit_tool_response_".len()..]
                        .parse()
                        .map_err(|_| ParseError::Expected {
                            offset,
                            expected: "omission index".into(),
                        })?;
                    let body = cur.element(tag)?;
                    if !body.is_empty() {
                        return Err(ParseError::Expected {
                            offset,
                            expected: "empty omission command".into(),
                        });
                    }
                    omit.insert(k);
                }
                _ => break,
            }
        }
        let action = match cur.peek_tag() {
            Some("tool_call") => ActionBlock::tool_call(cur.element("tool_call")?),
            Some("answer") => ActionBlock::answer(cur.element("answer")?),
            _ => {
                return Err(ParseError::Expected {
                    offset: cur.pos,
                    expected: "<tool_call> or <answer>".into(),
                })
            }
        };
        cur.skip_newlines();
        let mut observation = None;
        if let Some(tag) = cur.peek_tag() {
            if let Some(num) = tag.strip_prefix("tool_response_") {
                let offset = cur.pos;
                let found: usize = num.parse().map_err(|_| ParseError::Expected {
                    offset,
                    expected: "observation index".into(),
                })?;
                if found != t {
                    return Err(ParseError::TurnOrder {
                        offset,
                        expected: t,
                        found,
                    });
                }
                let tag = tag.to_string();
                observation = Some(ObservationCell::present(cur.element(&tag)?));
            }
        }
        turns.push(Turn {
            index: t,
            thought,
            omit,
            action,
            observation,
        });
    }
    let all_omitted: BTreeSet<usize> = turns.iter().flat_map(|t| t.omit.iter().copied()).collect();
    for &k in &all_omitted {
        if let Some(obs) = turns.get_mut(k.wrapping_sub(1)).and_then(|t| t.observation.as_mut()) {
            obs.state = ObservationState::Omitted;
        }
    }
    validate_turns(&turns)?;
    Ok((question, turns))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::tests::{arb_trajectory, turn};
    use crate::trajectory::{token_breakdown, ActionBlock};
    use proptest::prelude::*;

    fn three_turns() -> Vec<Turn> {
        let mut turns = vec![
            turn(1, "survey first", ActionBlock::tool_call("search(mayor)"), Some("The mayor of X is Y.")),
            turn(2, "", ActionBlock::tool_call("search(capital of A)"), Some("The capital of A is B.")),
            turn(3, "", ActionBlock::answer("B"), None),
        ];
        turns[2].omit.insert(1);
        turns[0].observation.as_mut().unwrap().state = ObservationState::Omitted;
        turns
    }

    #[test]
    fn empty_thought_form() {
        let turns = three_turns();
        let text = render("q", &turns, View::Transcript).to_text();
        assert!(text.contains("<think> </think>"));
        assert!(text.contains("<omit_tool_response_1></omit_tool_response_1>\n<answer>B</answer>"));
    }

    #[test]
    fn live_view_placeholder() {
        let turns = three_turns();
        let live = render("q", &turns, View::Live);
        let first_obs = &live.segments[2];
        assert_eq!(first_obs.text, "<omitted_tool_response_1></omitted_tool_response_1>");
        assert_eq!(first_obs.tokens, 2);
        assert_eq!(first_obs.category, Category::Marker);
    }

    #[test]
    fn views_agree_without_omissions() {
        let turns = vec![
            turn(1, "plan", ActionBlock::tool_call("a"), Some("b")),
            turn(2, "", ActionBlock::answer("c"), None),
        ];
        assert_eq!(
            render("q", &turns, View::Live).to_text(),
            render("q", &turns, View::Transcript).to_text()
        );
    }

    #[test]
    fn omission_is_idempotent_and_checked() {
        let turns = vec![
            turn(1, "plan", ActionBlock::tool_call("a"), Some("b")),
            turn(2, "", ActionBlock::tool_call("c"), Some("d")),
        ];
        let none = apply_omission(&turns, 3, &BTreeSet::new()).unwrap();
        assert_eq!(none.turns, turns);
        let g: BTreeSet<usize> = [1].into();
        let once = apply_omission(&turns, 3, &g).unwrap();
        assert_eq!(once.redundant, 0);
        let twice = apply_omission(&once.turns, 3, &g).unwrap();
        assert_eq!(twice.redundant, 1);
        assert_eq!(twice.turns, once.turns);
        assert_eq!(
            apply_omission(&turns, 2, &[2].into()),
            Err(OmissionError::NotEarlier { turn: 2, target: 2 })
        );
    }

    #[test]
    fn mask_cases() {
        let obs_only = RenderedContext {
            question: String::new(),
            segments: vec![TranscriptSegment::new("<tool_response_1>x y</tool_response_1>".into(), 1, Category::Observation)],
            total_tokens: 4,
            view: View::Transcript,
        };
        assert!(agent_token_mask(&obs_only).iter().all(|m| !m));
        let agent_only = render("q", &[turn(1, "plan it", ActionBlock::answer("z"), None)], View::Live);
        let mask = agent_token_mask(&agent_only);
        assert_eq!(mask.len(), agent_only.total_tokens);
        assert!(mask.iter().all(|m| *m));
        let mixed = render("q", &three_turns(), View::Transcript);
        let b = token_breakdown(&three_turns(), View::Transcript);
        let agent = agent_token_mask(&mixed).iter().filter(|m| **m).count();
        assert_eq!(agent, b.totals.thought + b.totals.action + b.totals.markers);
    }

    #[test]
    fn parse_errors() {
        assert_eq!(parse_transcript("").unwrap(), (String::new(), vec![]));
        let err = parse_transcript("<question>q</question>\n<think>never closed").unwrap_err();
        assert_eq!(err, ParseError::Unclosed { offset: 23, tag: "think".into() });
        let err = parse_transcript("<question>q</question>\n<tool_call>x</tool_call>").unwrap_err();
        assert!(matches!(err, ParseError::Expected { offset: 23, .. }));
    }

    proptest! {
        #[test]
        fn parse_inverts_render(t in arb_trajectory()) {
            let text = render(&t.question, &t.turns, View::Transcript).to_text();
            let (q, turns) = parse_transcript(&text).unwrap();
            prop_assert_eq!(q, t.question.clone());
            prop_assert_eq!(turns, t.turns.clone());
        }

        #[test]
        fn token_saving_identity(t in arb_trajectory()) {
            let live = render(&t.question, &t.turns, View::Live);
            let full = render(&t.question, &t.turns, View::Transcript);
            let omitted: usize = t.turns.iter()
                .filter_map(|x| x.observation.as_ref())
                .filter(|o| o.is_omitted())
                .map(|o| count_tokens(&o.text) + 2 - 2)
                .sum();
            prop_assert_eq!(live.total_tokens, full.total_tokens - omitted);
            let live_b = token_breakdown(&t.turns, View::Live);
            let env_tokens = agent_token_mask(&live).iter().filter(|m| !**m).count();
            prop_assert_eq!(env_tokens, live_b.totals.observation);
            prop_assert_eq!(live_tokens(&t.turns), live.total_tokens);
        }
    }
}
