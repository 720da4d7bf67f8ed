//! Recipe-tree crafting world.
//!
//! The goal item is crafted from two intermediates. Each intermediate is a
//! chain: the first link takes two base items, every further link takes the
//! previous link plus one more base item. Distractor recipes share the
//! recipe list but are never needed.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Difficulty, ExpertMove, History};
use crate::trajectory::{ActionBlock, ActionKind};

const BASES: &[&str] = &[
    "oak log",
    "iron ore",
    "coal",
    "sand",
    "clay",
    "flint",
    "feather",
    "string",
    "wool",
    "lapis lazuli",
    "copper ore",
    "gold nugget",
    "bone",
    "leather",
    "reed",
    "slime ball",
    "quartz",
    "sugar cane",
    "cobblestone",
    "gravel",
    "birch log",
    "redstone dust",
];

const INTERMEDIATES: &[&str] = &[
    "stick",
    "iron ingot",
    "glass pane",
    "blue dye",
    "paper",
    "brick",
    "rope",
    "torch",
    "charcoal",
    "bone meal",
    "copper wire",
    "gold ingot",
    "plank",
    "glue",
    "lens",
    "gear",
    "spring",
    "thread",
];

const TARGETS: &[&str] = &[
    "lantern",
    "compass",
    "bookshelf",
    "crossbow",
    "piston",
    "clock",
    "spyglass",
    "loom",
    "anvil",
    "fishing rod",
];

pub const ORIENT: &str = "recipes";
pub const INVENTORY: &str = "check inventory";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recipe {
    pub output: String,
    pub inputs: Vec<(u32, String)>,
}

impl Recipe {
    fn inputs_text(&self) -> String {
        self.inputs
            .iter()
            .map(|(q, item)| format!("{q} {item}"))
            .collect::<Vec<_>>()
            .join(", ")
    }

    pub fn action_text(&self) -> String {
        format!("craft 1 {} using {}", self.output, self.inputs_text())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CraftTask {
    pub target: String,
    /// Every recipe in display order, distractors included.
    pub recipes: Vec<Recipe>,
    /// Intermediates of the goal tree, branch by branch, bottom-up.
    pub intermediates: Vec<String>,
    /// Obtainable base items in display order.
    pub bases: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CraftState {
    pub inventory: BTreeMap<String, u32>,
}

impl CraftState {
    fn have(&self, item: &str) -> u32 {
        self.inventory.get(item).copied().unwrap_or(0)
    }
}

fn inventory_text(inv: &BTreeMap<String, u32>) -> String {
    if inv.is_empty() {
        return "Inventory: empty.".to_string();
    }
    let items: Vec<String> = inv.iter().map(|(k, v)| format!("{v} {k}")).collect();
    format!("Inventory: {}.", items.join(", "))
}

impl CraftTask {
    pub fn generate(rng: &mut ChaCha8Rng, difficulty: Difficulty) -> Self {
        let depth = match difficulty {
            Difficulty::Easy => 2,
            Difficulty::Medium => 3,
            Difficulty::Hard => 4,
        };
        let mut bases: Vec<&str> = BASES.to_vec();
        bases.shuffle(rng);
        let mut inters: Vec<&str> = INTERMEDIATES.to_vec();
        inters.shuffle(rng);
        let target = TARGETS[rng.gen_range(0..TARGETS.len())].to_string();

        let mut base_iter = bases.iter();
        let mut inter_iter = inters.iter();
        let mut recipes = Vec::new();
        let mut intermediates = Vec::new();
        let mut tree_bases = Vec::new();
        let mut tops = Vec::new();
        for _branch in 0..2 {
            let mut prev: Option<String> = None;
            for _level in 1..depth {
                let output = inter_iter.next().expect("enough intermediates").to_string();
                let mut inputs = Vec::new();
                if let Some(p) = prev.take() {
                    inputs.push((1, p));
                }
                let fresh = if inputs.is_empty() { 2 } else { 1 };
                for _ in 0..fresh {
                    let b = base_iter.next().expect("enough bases").to_string();
                    tree_bases.push(b.clone());
                    inputs.push((rng.gen_range(1..=3), b));
                }
                recipes.push(Recipe {
                    output: output.clone(),
                    inputs,
                });
                intermediates.push(output.clone());
                prev = Some(output);
            }
            tops.push(prev.expect("depth at least 2"));
        }
        recipes.push(Recipe {
            output: target.clone(),
            inputs: tops.into_iter().map(|t| (1, t)).collect(),
        });

        let extras: Vec<String> = base_iter.take(2).map(|s| s.to_string()).collect();
        let n_distractors = rng.gen_range(2..=3);
        for _ in 0..n_distractors {
            let output = inter_iter.next().expect("enough intermediates").to_string();
            let mut pool: Vec<&String> = tree_bases.iter().chain(extras.iter()).collect();
            pool.shuffle(rng);
            let inputs = pool
                .into_iter()
                .take(2)
                .map(|b| (rng.gen_range(1..=3), b.clone()))
                .collect();
            recipes.push(Recipe { output, inputs });
        }
        recipes.shuffle(rng);

        let mut all_bases: Vec<String> = tree_bases.into_iter().chain(extras).collect();
        all_bases.sort();
        CraftTask {
            target,
            recipes,
            intermediates,
            bases: all_bases,
        }
    }

    pub fn question(&self) -> String {
        format!(
            "Craft 1 {} from base materials and report once it is in your inventory.",
            self.target
        )
    }

    pub fn expected_answer(&self) -> String {
        format!("crafted {}", self.target)
    }

    pub fn initial(&self) -> CraftState {
        CraftState::default()
    }

    fn recipe_for(&self, item: &str) -> Option<&Recipe> {
        self.recipes.iter().find(|r| r.output == item)
    }

    fn is_base(&self, item: &str) -> bool {
        self.bases.iter().any(|b| b == item)
    }

    fn recipes_text(&self) -> String {
        let lines: Vec<String> = self
            .recipes
            .iter()
            .map(|r| format!("{}: {}.", r.output, r.inputs_text()))
            .collect();
        format!(
            "Known recipes. {} Base items you can get: {}.",
            lines.join(" "),
            self.bases.join(", ")
        )
    }

    /// The validity flag [`CraftTask::step`] would return, without applying it.
    pub fn accepts(&self, s: &CraftState, text: &str) -> bool {
        let text = text.trim();
        if text == ORIENT || text == INVENTORY {
            return true;
        }
        if let Some(rest) = text.strip_prefix("get ") {
            let (n, item) = rest.split_once(' ').unwrap_or((rest, ""));
            return n.parse::<u32>().is_ok_and(|n| (1..=9).contains(&n)) && self.is_base(item);
        }
        if let Some(rest) = text.strip_prefix("craft 1 ") {
            let (output, using) = rest.split_once(" using ").unwrap_or((rest, ""));
            return self
                .recipe_for(output)
                .is_some_and(|r| r.inputs_text() == using && r.inputs.iter().all(|(q, item)| s.have(item) >= *q));
        }
        false
    }

    pub fn step(&self, s: &mut CraftState, text: &str) -> (String, bool) {
        let text = text.trim();
        if text == ORIENT {
            return (self.recipes_text(), true);
        }
        if text == INVENTORY {
            return (inventory_text(&s.inventory), true);
        }
        if let Some(rest) = text.strip_prefix("get ") {
            let (n, item) = rest.split_once(' ').unwrap_or((rest, ""));
            let n = match n.parse::<u32>() {
                Ok(n) if (1..=9).contains(&n) => n,
                _ => return ("Could not get that amount.".to_string(), false),
            };
            if !self.is_base(item) {
                return (format!("Could not find {item}."), false);
            }
            *s.inventory.entry(item.to_string()).or_insert(0) += n;
            return (
                format!("Got {n} {item}. {}", inventory_text(&s.inventory)),
                true,
            );
        }
        if let Some(rest) = text.strip_prefix("craft 1 ") {
            let (output, using) = rest.split_once(" using ").unwrap_or((rest, ""));
            let recipe = match self.recipe_for(output) {
                Some(r) if r.inputs_text() == using => r,
                _ => return (format!("Could not find a recipe for {output} that way."), false),
            };
            let missing: Vec<String> = recipe
                .inputs
                .iter()
                .filter(|(q, item)| s.have(item) < *q)
                .map(|(q, item)| format!("{} {item}", q - s.have(item)))
                .collect();
            if !missing.is_empty() {
                return (format!("Cannot craft: missing {}.", missing.join(", ")), false);
            }
            for (q, item) in &recipe.inputs {
                let left = s.have(item) - q;
                if left == 0 {
                    s.inventory.remove(item);
                } else {
                    s.inventory.insert(item.clone(), left);
                }
            }
            *s.inventory.entry(output.to_string()).or_insert(0) += 1;
            return (
                format!("Crafted 1 {output}. {}", inventory_text(&s.inventory)),
                true,
            );
        }
        ("Unknown command.".to_string(), false)
    }

    fn first_missing(&self, s: &CraftState, item: &str, qty: u32) -> Option<ActionBlock> {
        let have = s.have(item);
        if have >= qty {
            return None;
        }
        match self.recipe_for(item) {
            Some(recipe) if !self.is_base(item) => recipe
                .inputs
                .iter()
                .find_map(|(q, input)| self.first_missing(s, input, *q))
                .or_else(|| Some(ActionBlock::tool_call(recipe.action_text()))),
            _ => Some(ActionBlock::tool_call(format!("get {} {item}", qty - have))),
        }
    }

    pub(crate) fn expert(&self, s: &CraftState, h: &History<'_>) -> ExpertMove {
        if !h.took(ORIENT) {
            return ExpertMove::Solve(ActionBlock::tool_call(ORIENT));
        }
        if s.have(&self.target) > 0 {
            return ExpertMove::Solve(ActionBlock::answer(self.expected_answer()));
        }
        ExpertMove::Solve(
            self.first_missing(s, &self.target, 1)
                .expect("target is missing so some step is missing"),
        )
    }

    pub(crate) fn candidates(
        &self,
        s: &CraftState,
        _h: &History<'_>,
    ) -> (Vec<ActionBlock>, Vec<ActionBlock>) {
        let mut priority = Vec::new();
        if s.have(&self.target) > 0 {
            priority.push(ActionBlock::answer(self.expected_answer()));
        }
        let mut rest = vec![
            ActionBlock::tool_call(ORIENT),
            ActionBlock::tool_call(INVENTORY),
        ];
        rest.extend(
            self.recipes
                .iter()
                .map(|r| ActionBlock::tool_call(r.action_text())),
        );
        for r in &self.recipes {
            for (q, item) in &r.inputs {
                if self.is_base(item) {
                    rest.push(ActionBlock::tool_call(format!("get {q} {item}")));
                }
            }
        }
        (priority, rest)
    }

    pub fn plan_text(&self) -> String {
        let top = self.recipe_for(&self.target).expect("target recipe");
        let parts: Vec<&str> = top.inputs.iter().map(|(_, i)| i.as_str()).collect();
        let mut text = format!(
            "Plan: to craft {} I need {}.",
            self.target,
            parts.join(" and ")
        );
        for inter in &self.intermediates {
            let r = self.recipe_for(inter).expect("tree recipe");
            let names: Vec<&str> = r.inputs.iter().map(|(_, i)| i.as_str()).collect();
            text.push_str(&format!(" {} takes {}.", inter, names.join(" and ")));
        }
        text.push_str(&format!(
            " I will check the recipes, get base items, craft each part, then the {}.",
            self.target
        ));
        text
    }

    pub fn step_note(&self, next: &ActionBlock) -> String {
        let t = next.text.as_str();
        let what = if next.kind == ActionKind::Answer {
            return format!("Following the plan, I report the {} as crafted.", self.target);
        } else if t == ORIENT {
            "read the recipe list".to_string()
        } else if let Some(rest) = t.strip_prefix("craft 1 ") {
            format!("craft the {}", rest.split(" using ").next().unwrap_or(rest))
        } else if let Some(rest) = t.strip_prefix("get ") {
            format!("get {rest}")
        } else {
            "check my inventory".to_string()
        };
        format!("Following the plan, next I {what}.")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn task(seed: u64, d: Difficulty) -> CraftTask {
        CraftTask::generate(&mut rng::stream(&[seed]), d)
    }

    #[test]
    fn tree_shape() {
        for (d, depth) in [(Difficulty::Easy, 2), (Difficulty::Medium, 3), (Difficulty::Hard, 4)] {
            let t = task(3, d);
            assert_eq!(t.intermediates.len(), 2 * (depth - 1));
            let distractors = t.recipes.len() - t.intermediates.len() - 1;
            assert!(distractors >= 2);
        }
    }

    #[test]
    fn get_and_craft_feedback() {
        let t = task(1, Difficulty::Easy);
        let recipe = t.recipe_for(&t.intermediates[0]).unwrap().clone();
        let mut s = t.initial();
        let (obs, ok) = t.step(&mut s, &recipe.action_text());
        assert!(!ok);
        assert!(obs.starts_with("Cannot craft: missing "), "{obs}");
        assert_eq!(s, t.initial());

        let (q, item) = recipe.inputs[0].clone();
        let (obs, ok) = t.step(&mut s, &format!("get 1 {item}"));
        assert!(ok);
        assert!(obs.starts_with(&format!("Got 1 {item}.")));
        assert_eq!(s.have(&item), 1);
        t.step(&mut s, &format!("get {q} {item}"));
        let (_, q2) = &recipe.inputs[1];
        t.step(&mut s, &format!("get 3 {q2}"));
        let (obs, ok) = t.step(&mut s, &recipe.action_text());
        assert!(ok, "{obs}");
        assert!(obs.starts_with(&format!("Crafted 1 {}.", recipe.output)));
        assert_eq!(s.have(&item), 1);

        let before = s.clone();
        assert!(!t.step(&mut s, "get 1 unobtainium").1);
        assert!(!t.step(&mut s, "dance").1);
        assert_eq!(s, before);
    }
}
