//! Factorized decision policy with three linear heads.
//!
//! One decision per turn: a thought mode (Bernoulli on the global features),
//! an action (softmax over candidate features) and one keep/omit flag per
//! present prior observation (independent Bernoullis on per-observation
//! features). Verbose thought text comes from the environment template, so
//! the policy only decides whether to think.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{ActionCandidate, CANDIDATE_WIDTH};
use crate::render::live_tokens;
use crate::tokenizer::{count_tokens, jaccard, token_set};
use crate::trajectory::{ThoughtMode, Turn};

pub const GLOBAL_WIDTH: usize = 6;
pub const OBS_WIDTH: usize = 6;
pub const HEAD_WIDTH: usize = 6;
pub const N_PARAMS: usize = 3 * HEAD_WIDTH;
pub const FORMAT_VERSION: u32 = 1;
const HEADER_TAG: &str = "agent-omit-policy";

pub type Vec6 = [f64; 6];
pub type ParamVec = [f64; N_PARAMS];

const STOPWORDS: &[&str] = &[
    "the", "and", "you", "are", "for", "with", "from", "that", "this", "into", "your", "has",
    "have", "not", "was", "were", "got", "see", "use", "using", "results", "ahead", "left",
    "right", "behind", "holding", "nothing", "inventory", "craft", "crafted", "search", "get",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Features {
    pub global: Vec6,
    pub candidates: Vec<Vec6>,
    pub observations: Vec<Vec6>,
    /// Turn index of each row in `observations`.
    pub obs_turns: Vec<usize>,
}

/// Content words of already lower-cased text.
fn content_words(lower: &str) -> BTreeSet<&str> {
    let mut out = BTreeSet::new();
    crate::tokenizer::for_each_token(lower, |t| {
        if t.chars().count() >= 3 && t.chars().all(char::is_alphabetic) && !STOPWORDS.contains(&t)
        {
            out.insert(t);
        }
    });
    out
}

#[cfg(test)]
fn alpha_words(text: &str) -> BTreeSet<String> {
    content_words(&text.to_lowercase()).into_iter().map(str::to_string).collect()
}

/// Per turn, whether some later action used a word first revealed by that
/// turn's present observation.
fn consumption(question: &str, turns: &[Turn]) -> Vec<bool> {
    let lowered: Vec<String> = turns.iter().map(|t| t.action.text.to_lowercase()).collect();
    let actions: Vec<BTreeSet<&str>> = lowered.iter().map(|a| content_words(a)).collect();
    let question = question.to_lowercase();
    let mut known = content_words(&question);
    let mut out = Vec::with_capacity(turns.len());
    for (j, turn) in turns.iter().enumerate() {
        known.extend(&actions[j]);
        let used = turn.observation.as_ref().filter(|o| !o.is_omitted()).is_some_and(|obs| {
            let later = &actions[j + 1..];
            content_words(&obs.text.to_lowercase())
                .iter()
                .any(|w| !known.contains(w) && later.iter().any(|a| a.contains(w)))
        });
        out.push(used);
    }
    out
}

/// Features for the decision at turn `turns.len() + 1`, computed on the live
/// context formed by `turns`.
pub fn featurize(
    question: &str,
    turns: &[Turn],
    candidates: &[ActionCandidate],
    max_turns: usize,
    last_action_ok: bool,
) -> Features {
    let rows = candidates.iter().map(|c| c.features).collect();
    featurize_rows(question, turns, rows, max_turns, last_action_ok)
}

/// [`featurize`] with candidate feature rows supplied directly.
pub fn featurize_rows(
    question: &str,
    turns: &[Turn],
    candidates: Vec<Vec6>,
    max_turns: usize,
    last_action_ok: bool,
) -> Features {
    let t = turns.len() + 1;
    let mt = max_turns as f64;
    let with_obs = turns.iter().filter(|x| x.observation.is_some()).count();
    let omitted = turns
        .iter()
        .filter(|x| x.observation.as_ref().is_some_and(|o| o.is_omitted()))
        .count();
    let frac_omitted = if with_obs == 0 {
        0.0
    } else {
        omitted as f64 / with_obs as f64
    };
    let global = [
        1.0,
        t as f64 / mt,
        live_tokens(turns) as f64 / 4096.0,
        f64::from(u8::from(last_action_ok)),
        frac_omitted,
        count_tokens(question) as f64 / 64.0,
    ];
    let q = token_set(question);
    let last_action = turns.last().map(|x| x.action.text.as_str()).unwrap_or("");
    let last = token_set(last_action);
    let consumed = consumption(question, turns);
    let mut observations = Vec::new();
    let mut obs_turns = Vec::new();
    for turn in turns {
        let Some(obs) = turn.observation.as_ref().filter(|o| !o.is_omitted()) else {
            continue;
        };
        let i = turn.index;
        let o = token_set(&obs.text);
        observations.push([
            1.0,
            count_tokens(&obs.text) as f64 / 256.0,
            (t - i) as f64 / mt,
            jaccard(&o, &q),
            jaccard(&o, &last),
            f64::from(u8::from(consumed[i - 1])),
        ]);
        obs_turns.push(i);
    }
    Features {
        global,
        candidates,
        observations,
        obs_turns,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub thought: ThoughtMode,
    pub action: usize,
    /// One flag per row of `Features::observations`; true means omit.
    pub omit: Vec<bool>,
}

impl Decision {
    /// Turn indices selected for omission.
    pub fn gamma(&self, features: &Features) -> BTreeSet<usize> {
        self.omit
            .iter()
            .zip(&features.obs_turns)
            .filter(|(f, _)| **f)
            .map(|(_, t)| *t)
            .collect()
    }

    pub fn omits_anything(&self) -> bool {
        self.thought == ThoughtMode::Empty || self.omit.iter().any(|f| *f)
    }

    pub fn is_valid_for(&self, features: &Features) -> bool {
        self.action < features.candidates.len() && self.omit.len() == features.observations.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub w_thought: Vec6,
    pub w_action: Vec6,
    pub w_omit: Vec6,
}

impl Default for PolicyParams {
    fn default() -> Self {
        Self::zeros()
    }
}

fn dot(a: &Vec6, b: &Vec6) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// ln σ(z) for y = 1, ln(1 − σ(z)) for y = 0.
fn bernoulli_log_prob(z: f64, y: bool) -> f64 {
    if y {
        -softplus(-z)
    } else {
        -softplus(z)
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

impl PolicyParams {
    pub fn zeros() -> Self {
        Self {
            w_thought: [0.0; 6],
            w_action: [0.0; 6],
            w_omit: [0.0; 6],
        }
    }

    pub fn to_array(&self) -> ParamVec {
        let mut out = [0.0; N_PARAMS];
        out[..6].copy_from_slice(&self.w_thought);
        out[6..12].copy_from_slice(&self.w_action);
        out[12..].copy_from_slice(&self.w_omit);
        out
    }

    pub fn from_array(a: &ParamVec) -> Self {
        let mut p = Self::zeros();
        p.w_thought.copy_from_slice(&a[..6]);
        p.w_action.copy_from_slice(&a[6..12]);
        p.w_omit.copy_from_slice(&a[12..]);
        p
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|x| x.is_finite())
    }

    /// `self + scale * direction`.
    pub fn axpy(&self, scale: f64, direction: &ParamVec) -> Self {
        let mut a = self.to_array();
        for (x, d) in a.iter_mut().zip(direction) {
            *x += scale * d;
        }
        Self::from_array(&a)
    }

    pub fn distance(&self, other: &Self) -> f64 {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    fn logits(&self, f: &Features) -> Logits {
        Logits {
            thought: dot(&self.w_thought, &f.global),
            action: f.candidates.iter().map(|c| dot(&self.w_action, c)).collect(),
            omit: f.observations.iter().map(|o| dot(&self.w_omit, o)).collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        std::fs::write(path, self.to_checkpoint_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        Self::from_checkpoint_str(&std::fs::read_to_string(path)?)
    }

    /// Header line then one shortest round-trip decimal per line in the
    /// order thought, action, omit.
    pub fn to_checkpoint_string(&self) -> String {
        let mut out = format!(
            "{HEADER_TAG} v{FORMAT_VERSION} thought={HEAD_WIDTH} action={HEAD_WIDTH} omit={HEAD_WIDTH}\n"
        );
        for x in self.to_array() {
            writeln!(out, "{x:?}").expect("writing to a string");
        }
        out
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self, PolicyError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(PolicyError::Malformed {
            line: 1,
            message: "empty checkpoint".into(),
        })?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.first() != Some(&HEADER_TAG) || fields.len() != 5 {
            return Err(PolicyError::Malformed {
                line: 1,
                message: format!("bad header '{header}'"),
            });
        }
        let version = fields[1]
            .strip_prefix('v')
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| PolicyError::Malformed {
                line: 1,
                message: format!("bad version field '{}'", fields[1]),
            })?;
        if version != FORMAT_VERSION {
            return Err(PolicyError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let expected_widths = [
            format!("thought={HEAD_WIDTH}"),
            format!("action={HEAD_WIDTH}"),
            format!("omit={HEAD_WIDTH}"),
        ];
        if fields[2..] != expected_widths.iter().map(String::as_str).collect::<Vec<_>>()[..] {
            return Err(PolicyError::Malformed {
                line: 1,
                message: format!("unexpected head widths in '{header}'"),
            });
        }
        let mut values = [0.0; N_PARAMS];
        for (i, slot) in values.iter_mut().enumerate() {
            let line = lines.next().ok_or(PolicyError::Malformed {
                line: i + 2,
                message: "missing parameter".into(),
            })?;
            let v: f64 = line.trim().parse().map_err(|_| PolicyError::Malformed {
                line: i + 2,
                message: format!("not a number: '{line}'"),
            })?;
            if !v.is_finite() {
                return Err(PolicyError::NonFinite { line: i + 2 });
            }
            *slot = v;
        }
        if let Some(extra) = lines.find(|l| !l.trim().is_empty()) {
            return Err(PolicyError::Malformed {
                line: N_PARAMS + 2,
                message: format!("trailing content '{extra}'"),
            });
        }
        Ok(Self::from_array(&values))
    }
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("malformed checkpoint at line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("non-finite parameter at line {line}")]
    NonFinite { line: usize },
}

struct Logits {
    thought: f64,
    action: Vec<f64>,
    omit: Vec<f64>,
}

/// Per-head probabilities after temperature scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionDistribution {
    pub p_verbose: f64,
    pub action_probs: Vec<f64>,
    pub omit_probs: Vec<f64>,
    thought_logit: f64,
    action_logits: Vec<f64>,
    omit_logits: Vec<f64>,
}

pub fn distribution(params: &PolicyParams, features: &Features, temperature: f64) -> DecisionDistribution {
    let l = params.logits(features);
    let scaled: Vec<f64> = l.action.iter().map(|z| z / temperature).collect();
    let action_probs = log_softmax(&scaled).into_iter().map(f64::exp).collect();
    DecisionDistribution {
        p_verbose: sigmoid(l.thought / temperature),
        action_probs,
        omit_probs: l.omit.iter().map(|z| sigmoid(z / temperature)).collect(),
        thought_logit: l.thought,
        action_logits: l.action,
        omit_logits: l.omit,
    }
}

impl DecisionDistribution {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Decision {
        let thought = if rng.gen::<f64>() < self.p_verbose {
            ThoughtMode::Verbose
        } else {
            ThoughtMode::Empty
        };
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut action = self.action_probs.len() - 1;
        for (i, p) in self.action_probs.iter().enumerate() {
            acc += p;
            if u < acc {
                action = i;
                break;
            }
        }
        let omit = self.omit_probs.iter().map(|p| rng.gen::<f64>() < *p).collect();
        Decision {
            thought,
            action,
            omit,
        }
    }

    /// Argmax per head on the raw logits. Ties go to verbose, keep and the
    /// lowest candidate index.
    pub fn greedy(&self) -> Decision {
        let mut action = 0;
        for (i, z) in self.action_logits.iter().enumerate() {
            if *z > self.action_logits[action] {
                action = i;
            }
        }
        Decision {
            thought: if self.thought_logit >= 0.0 {
                ThoughtMode::Verbose
            } else {
                ThoughtMode::Empty
            },
            action,
            omit: self.omit_logits.iter().map(|z| *z > 0.0).collect(),
        }
    }
}

pub fn sample<R: Rng>(params: &PolicyParams, features: &Features, temperature: f64, rng: &mut R) -> Decision {
    distribution(params, features, temperature).sample(rng)
}

pub fn greedy(params: &PolicyParams, features: &Features) -> Decision {
    distribution(params, features, 1.0).greedy()
}

/// Per-head log-probabilities at temperature 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadLogProbs {
    pub thought: f64,
    pub action: f64,
    pub omit: f64,
}

impl HeadLogProbs {
    pub fn total(&self) -> f64 {
        self.thought + self.action + self.omit
    }
}

pub fn head_log_probs(params: &PolicyParams, features: &Features, decision: &Decision) -> HeadLogProbs {
    let l = params.logits(features);
    HeadLogProbs {
        thought: bernoulli_log_prob(l.thought, decision.thought == ThoughtMode::Verbose),
        action: log_softmax(&l.action)[decision.action],
        omit: l
            .omit
            .iter()
            .zip(&decision.omit)
            .map(|(z, y)| bernoulli_log_prob(*z, *y))
            .sum(),
    }
}

pub fn log_prob(params: &PolicyParams, features: &Features, decision: &Decision) -> f64 {
    head_log_probs(params, features, decision).total()
}

/// [`log_prob`] and [`grad_log_prob`] from a single evaluation of the logits.
pub fn log_prob_and_grad(params: &PolicyParams, features: &Features, decision: &Decision) -> (f64, ParamVec) {
    let l = params.logits(features);
    let verbose = decision.thought == ThoughtMode::Verbose;
    let log_actions = log_softmax(&l.action);
    let lp = HeadLogProbs {
        thought: bernoulli_log_prob(l.thought, verbose),
        action: log_actions[decision.action],
        omit: l
            .omit
            .iter()
            .zip(&decision.omit)
            .map(|(z, y)| bernoulli_log_prob(*z, *y))
            .sum(),
    }
    .total();
    let mut g = [0.0; N_PARAMS];
    let r = f64::from(u8::from(verbose)) - sigmoid(l.thought);
    for k in 0..6 {
        g[k] = r * features.global[k];
    }
    let mut mean = [0.0; CANDIDATE_WIDTH];
    for (lp, c) in log_actions.iter().zip(&features.candidates) {
        let p = lp.exp();
        for k in 0..6 {
            mean[k] += p * c[k];
        }
    }
    let chosen = &features.candidates[decision.action];
    for k in 0..6 {
        g[6 + k] = chosen[k] - mean[k];
    }
    for ((z, o), flag) in l.omit.iter().zip(&features.observations).zip(&decision.omit) {
        let r = f64::from(u8::from(*flag)) - sigmoid(*z);
        for k in 0..6 {
            g[12 + k] += r * o[k];
        }
    }
    (lp, g)
}

pub fn grad_log_prob(params: &PolicyParams, features: &Features, decision: &Decision) -> ParamVec {
    let d = distribution(params, features, 1.0);
    let mut g = [0.0; N_PARAMS];
    let y = f64::from(u8::from(decision.thought == ThoughtMode::Verbose));
    for k in 0..6 {
        g[k] = (y - d.p_verbose) * features.global[k];
    }
    let mut mean = [0.0; CANDIDATE_WIDTH];
    for (p, c) in d.action_probs.iter().zip(&features.candidates) {
        for k in 0..6 {
            mean[k] += p * c[k];
        }
    }
    let chosen = &features.candidates[decision.action];
    for k in 0..6 {
        g[6 + k] = chosen[k] - mean[k];
    }
    for ((p, o), flag) in d.omit_probs.iter().zip(&features.observations).zip(&decision.omit) {
        let r = f64::from(u8::from(*flag)) - p;
        for k in 0..6 {
            g[12 + k] += r * o[k];
        }
    }
    g
}

/// KL between Bernoullis with logits `zp` and `zq`.
fn bernoulli_kl(zp: f64, zq: f64) -> f64 {
    let p = sigmoid(zp);
    let lp1 = bernoulli_log_prob(zp, true);
    let lp0 = bernoulli_log_prob(zp, false);
    let lq1 = bernoulli_log_prob(zq, true);
    let lq0 = bernoulli_log_prob(zq, false);
    (p * (lp1 - lq1) + (1.0 - p) * (lp0 - lq0)).max(0.0)
}

fn categorical_kl(lp: &[f64], lq: &[f64]) -> f64 {
    lp.iter()
        .zip(lq)
        .map(|(a, b)| if a.is_finite() { a.exp() * (a - b) } else { 0.0 })
        .sum::<f64>()
        .max(0.0)
}

/// Exact KL(π_p ‖ π_q) of the decision distribution at one context.
pub fn kl(p: &PolicyParams, q: &PolicyParams, features: &Features) -> f64 {
    let lp = p.logits(features);
    let lq = q.logits(features);
    let thought = bernoulli_kl(lp.thought, lq.thought);
    let action = categorical_kl(&log_softmax(&lp.action), &log_softmax(&lq.action));
    let omit: f64 = lp.omit.iter().zip(&lq.omit).map(|(a, b)| bernoulli_kl(*a, *b)).sum();
    thought + action + omit
}

/// Gradient of [`kl`] with respect to the first argument.
pub fn kl_grad(p: &PolicyParams, q: &PolicyParams, features: &Features) -> ParamVec {
    let lp = p.logits(features);
    let lq = q.logits(features);
    let mut g = [0.0; N_PARAMS];
    let pt = sigmoid(lp.thought);
    let dz = pt * (1.0 - pt) * (lp.thought - lq.thought);
    for k in 0..6 {
        g[k] = dz * features.global[k];
    }
    let a = log_softmax(&lp.action);
    let b = log_softmax(&lq.action);
    let kl_cat: f64 = a.iter().zip(&b).map(|(x, y)| x.exp() * (x - y)).sum();
    for ((x, y), c) in a.iter().zip(&b).zip(&features.candidates) {
        let dz = x.exp() * ((x - y) - kl_cat);
        for k in 0..6 {
            g[6 + k] += dz * c[k];
        }
    }
    for ((zp, zq), o) in lp.omit.iter().zip(&lq.omit).zip(&features.observations) {
        let pi = sigmoid(*zp);
        let dz = pi * (1.0 - pi) * (zp - zq);
        for k in 0..6 {
            g[12 + k] += dz * o[k];
        }
    }
    g
}
