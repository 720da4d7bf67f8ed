//! Two-hop question answering over a keyword-searchable fact corpus.
//!
//! The question asks for `rel2` of the `rel1` of an entity A. The hop fact
//! names the bridge entity B and the evidence fact names the answer C. A
//! survey search on `rel2` alone only ever returns distractors, because at
//! least five other `rel2` facts precede the evidence fact.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Difficulty, ExpertMove, History};
use crate::tokenizer::for_each_token;
use crate::trajectory::{ActionBlock, ActionKind};

const RELATIONS: &[&str] = &[
    "capital", "founder", "mentor", "rival", "author", "neighbor", "sponsor", "guardian",
    "successor", "partner", "patron", "teacher",
];

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ra", "ven", "tor", "sel", "dra", "quin", "bel", "mor", "fen", "lu",
    "zar", "ith", "ol", "gar", "nes", "pa", "rin", "tha", "vo", "wen", "cal",
];

pub const RESULTS: usize = 5;
const MAX_ANSWERS: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub subj: String,
    pub rel: String,
    pub obj: String,
}

impl Fact {
    pub fn text(&self) -> String {
        format!("The {} of {} is {}.", self.rel, self.subj, self.obj)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactTask {
    pub facts: Vec<Fact>,
    pub entity: String,
    pub bridge: String,
    pub answer: String,
    pub rel1: String,
    pub rel2: String,
    pub hop_index: usize,
    pub evidence_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FactState;

fn lower_tokens(text: &str) -> BTreeSet<String> {
    let lower = text.to_lowercase();
    let mut set = BTreeSet::new();
    for_each_token(&lower, |t| {
        set.insert(t.to_string());
    });
    set
}

fn make_name(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(2..=3);
    let raw: String = (0..n)
        .map(|_| SYLLABLES[rng.gen_range(0..SYLLABLES.len())])
        .collect();
    let mut chars = raw.chars();
    let first = chars.next().expect("non-empty").to_ascii_uppercase();
    std::iter::once(first).chain(chars).collect()
}

pub fn search_query(text: &str) -> Option<&str> {
    text.trim()
        .strip_prefix("search(")
        .and_then(|r| r.strip_suffix(')'))
        .map(str::trim)
        .filter(|q| !q.is_empty())
}

impl FactTask {
    pub fn generate(rng: &mut ChaCha8Rng, difficulty: Difficulty) -> Self {
        let n_facts = match difficulty {
            Difficulty::Easy => 50,
            Difficulty::Medium => 80,
            Difficulty::Hard => 120,
        };
        let n_names = n_facts / 2 + 13;
        let mut names: Vec<String> = Vec::new();
        while names.len() < n_names {
            let name = make_name(rng);
            let clash = names.contains(&name)
                || RELATIONS.iter().any(|r| r.eq_ignore_ascii_case(&name));
            if !clash {
                names.push(name);
            }
        }
        let entity = names.pop().expect("names");
        let bridge = names.pop().expect("names");
        let answer = names.pop().expect("names");
        let mut rels: Vec<&str> = RELATIONS.to_vec();
        rels.shuffle(rng);
        let (rel1, rel2) = (rels[0].to_string(), rels[1].to_string());

        let mut used: BTreeSet<(String, String)> = BTreeSet::new();
        let mut fillers: Vec<Fact> = Vec::new();
        while fillers.len() < n_facts - 2 {
            let rel = if fillers.len() < 6 {
                rel2.clone()
            } else {
                RELATIONS[rng.gen_range(0..RELATIONS.len())].to_string()
            };
            let subj = names[rng.gen_range(0..names.len())].clone();
            let obj = names[rng.gen_range(0..names.len())].clone();
            if subj == obj || !used.insert((subj.clone(), rel.clone())) {
                continue;
            }
            fillers.push(Fact { subj, rel, obj });
        }
        fillers.shuffle(rng);

        let fifth = fillers
            .iter()
            .enumerate()
            .filter(|(_, f)| f.rel == rel2)
            .nth(RESULTS - 1)
            .map(|(i, _)| i)
            .expect("six rel2 fillers");
        let evidence_index = rng.gen_range(fifth + 1..=fillers.len());
        fillers.insert(
            evidence_index,
            Fact {
                subj: bridge.clone(),
                rel: rel2.clone(),
                obj: answer.clone(),
            },
        );
        let hop_index = rng.gen_range(0..=fillers.len());
        fillers.insert(
            hop_index,
            Fact {
                subj: entity.clone(),
                rel: rel1.clone(),
                obj: bridge.clone(),
            },
        );
        let evidence_index = if hop_index <= evidence_index {
            evidence_index + 1
        } else {
            evidence_index
        };
        FactTask {
            facts: fillers,
            entity,
            bridge,
            answer,
            rel1,
            rel2,
            hop_index,
            evidence_index,
        }
    }

    pub fn question(&self) -> String {
        format!("What is the {} of the {} of {}?", self.rel2, self.rel1, self.entity)
    }

    pub fn initial(&self) -> FactState {
        FactState
    }

    /// Indices of the top facts for a query: most shared case-folded
    /// tokens first, corpus order on ties, zero-overlap facts dropped.
    pub fn rank(&self, query: &str) -> Vec<usize> {
        let q = lower_tokens(query);
        let mut scored: Vec<(usize, usize)> = self
            .facts
            .iter()
            .enumerate()
            .map(|(i, f)| (lower_tokens(&f.text()).intersection(&q).count(), i))
            .filter(|(score, _)| *score > 0)
            .collect();
        scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        scored.into_iter().take(RESULTS).map(|(_, i)| i).collect()
    }

    pub fn step(&self, _s: &mut FactState, text: &str) -> (String, bool) {
        let Some(query) = search_query(text) else {
            return ("Unknown command. Use search(query).".to_string(), false);
        };
        let hits = self.rank(query);
        if hits.is_empty() {
            return (format!("No results for {query}."), true);
        }
        let lines: Vec<String> = hits
            .iter()
            .enumerate()
            .map(|(n, i)| format!("{}. {}", n + 1, self.facts[*i].text()))
            .collect();
        (format!("Results for {query}: {}", lines.join(" ")), true)
    }

    pub fn survey_query(&self) -> String {
        format!("search({})", self.rel2)
    }

    pub fn hop_query(&self) -> String {
        format!("search({} of {})", self.rel1, self.entity)
    }

    pub fn evidence_query(&self) -> String {
        format!("search({} of {})", self.rel2, self.bridge)
    }

    fn visible(&self, h: &History<'_>, index: usize) -> bool {
        let text = self.facts[index].text();
        h.present_observations().any(|o| o.contains(&text))
    }

    /// Objects of `rel2` facts in present observations, corpus order.
    fn visible_answers(&self, h: &History<'_>) -> Vec<String> {
        let mut out = Vec::new();
        for (i, f) in self.facts.iter().enumerate() {
            if f.rel == self.rel2 && self.visible(h, i) && !out.contains(&f.obj) {
                out.push(f.obj.clone());
            }
        }
        out
    }

    fn visible_subjects(&self, h: &History<'_>) -> Vec<String> {
        let mut out = Vec::new();
        for (i, f) in self.facts.iter().enumerate() {
            if self.visible(h, i) && !out.contains(&f.subj) {
                out.push(f.subj.clone());
            }
        }
        out
    }

    pub(crate) fn expert(&self, _s: &FactState, h: &History<'_>) -> ExpertMove {
        if !h.took(&self.survey_query()) {
            return ExpertMove::Solve(ActionBlock::tool_call(self.survey_query()));
        }
        if self.visible(h, self.evidence_index) {
            return ExpertMove::Solve(ActionBlock::answer(self.answer.clone()));
        }
        if h.took(&self.evidence_query()) {
            return ExpertMove::Fallback(match self.visible_answers(h).into_iter().next() {
                Some(a) => ActionBlock::answer(a),
                None => ActionBlock::tool_call(self.survey_query()),
            });
        }
        if self.visible(h, self.hop_index) {
            return ExpertMove::Solve(ActionBlock::tool_call(self.evidence_query()));
        }
        ExpertMove::Solve(ActionBlock::tool_call(self.hop_query()))
    }

    pub(crate) fn candidates(
        &self,
        _s: &FactState,
        h: &History<'_>,
    ) -> (Vec<ActionBlock>, Vec<ActionBlock>) {
        let priority: Vec<ActionBlock> = self
            .visible_answers(h)
            .into_iter()
            .take(MAX_ANSWERS)
            .map(ActionBlock::answer)
            .collect();
        let mut rest = vec![
            ActionBlock::tool_call(self.survey_query()),
            ActionBlock::tool_call(self.hop_query()),
        ];
        let others: Vec<&str> = RELATIONS
            .iter()
            .copied()
            .filter(|r| *r != self.rel1)
            .take(3)
            .collect();
        for r in others {
            rest.push(ActionBlock::tool_call(format!("search({r} of {})", self.entity)));
        }
        for subj in self.visible_subjects(h).into_iter().take(4) {
            rest.push(ActionBlock::tool_call(format!("search({} of {subj})", self.rel2)));
        }
        if self.visible(h, self.hop_index) {
            rest.push(ActionBlock::tool_call(self.evidence_query()));
            rest.push(ActionBlock::tool_call(format!(
                "search({} of {})",
                self.rel1, self.bridge
            )));
        }
        (priority, rest)
    }

    pub fn plan_text(&self) -> String {
        format!(
            "Plan: the question asks for the {r2} of the {r1} of {a}. I will first survey how \
             {r2} facts are written, then search for the {r1} of {a} to find the bridge \
             entity, then search for the {r2} of that entity and answer with its name.",
            r1 = self.rel1,
            r2 = self.rel2,
            a = self.entity
        )
    }

    pub fn step_note(&self, next: &ActionBlock) -> String {
        if next.kind == ActionKind::Answer {
            return format!("Following the plan, I answer {}.", next.text);
        }
        format!("Following the plan, next I {}.", next.text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn task(seed: u64, d: Difficulty) -> FactTask {
        FactTask::generate(&mut rng::stream(&[seed]), d)
    }

    fn mentions(t: &FactTask, name: &str) -> usize {
        t.facts
            .iter()
            .filter(|f| f.subj == name || f.obj == name)
            .count()
    }

    #[test]
    fn corpus_structure() {
        for d in [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard] {
            for seed in 0..30 {
                let t = task(seed, d);
                assert!(t.facts.len() >= 50);
                assert_eq!(mentions(&t, &t.entity), 1);
                assert_eq!(mentions(&t, &t.bridge), 2);
                assert_eq!(mentions(&t, &t.answer), 1);
                let hop = &t.facts[t.hop_index];
                assert_eq!((&hop.subj, &hop.rel, &hop.obj), (&t.entity, &t.rel1, &t.bridge));
                let ev = &t.facts[t.evidence_index];
                assert_eq!((&ev.subj, &ev.rel, &ev.obj), (&t.bridge, &t.rel2, &t.answer));
                let before = t.facts[..t.evidence_index]
                    .iter()
                    .filter(|f| f.rel == t.rel2)
                    .count();
                assert!(before >= RESULTS);
                for f in &t.facts {
                    assert_eq!(crate::tokenizer::count_tokens(&f.subj), 1);
                }
            }
        }
    }

    #[test]
    fn ranking_matches_brute_force() {
        for seed in 0..20 {
            let t = task(seed, Difficulty::Medium);
            let queries = [
                t.rel2.clone(),
                format!("{} of {}", t.rel1, t.entity),
                format!("{} of {}", t.rel2, t.bridge),
                format!("THE {} IS", t.rel1.to_uppercase()),
                "nothing matches".to_string(),
            ];
            for q in queries {
                let qs = lower_tokens(&q);
                let mut expected: Vec<usize> = (0..t.facts.len())
                    .filter(|i| !lower_tokens(&t.facts[*i].text()).is_disjoint(&qs))
                    .collect();
                let score = |i: usize| lower_tokens(&t.facts[i].text()).intersection(&qs).count();
                // stable sort keeps corpus order within a score
                expected.sort_by_key(|i| std::cmp::Reverse(score(*i)));
                expected.truncate(RESULTS);
                assert_eq!(t.rank(&q), expected, "query {q}");
            }
            assert_eq!(t.rank(&format!("{} of {}", t.rel1, t.entity))[0], t.hop_index);
            assert_eq!(t.rank(&format!("{} of {}", t.rel2, t.bridge))[0], t.evidence_index);
            assert!(!t.rank(&t.rel2).contains(&t.evidence_index));
        }
    }

    #[test]
    fn observation_length() {
        let t = task(2, Difficulty::Easy);
        let mut s = FactState;
        let (obs, ok) = t.step(&mut s, &t.hop_query());
        assert!(ok);
        let n = crate::tokenizer::count_tokens(&obs);
        assert!((40..=120).contains(&n), "{n} tokens");
        assert!(!t.step(&mut s, "search()").1);
        assert!(!t.step(&mut s, "lookup(x)").1);
    }
}
