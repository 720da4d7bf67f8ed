//! Grid navigation with macro actions.
//!
//! Easy grids are one room. Medium and hard grids are split by a wall column
//! with a single door; the hard door starts locked and its key lies in the
//! starting room. Movement is by `go to`, which walks a shortest path inside
//! the current room.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Difficulty, ExpertMove, History};
use crate::trajectory::{ActionBlock, ActionKind};

const COLORS: &[&str] = &["red", "green", "blue", "yellow", "purple", "grey"];

pub const ORIENT: &str = "look";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dir {
    North,
    East,
    South,
    West,
}

impl Dir {
    fn delta(self) -> (i32, i32) {
        match self {
            Dir::North => (0, -1),
            Dir::East => (1, 0),
            Dir::South => (0, 1),
            Dir::West => (-1, 0),
        }
    }

    fn right(self) -> Dir {
        match self {
            Dir::North => Dir::East,
            Dir::East => Dir::South,
            Dir::South => Dir::West,
            Dir::West => Dir::North,
        }
    }

    fn left(self) -> Dir {
        self.right().right().right()
    }

    fn name(self) -> &'static str {
        match self {
            Dir::North => "north",
            Dir::East => "east",
            Dir::South => "south",
            Dir::West => "west",
        }
    }

    fn towards(from: (i32, i32), to: (i32, i32)) -> Dir {
        match (to.0 - from.0, to.1 - from.1) {
            (0, dy) if dy < 0 => Dir::North,
            (0, _) => Dir::South,
            (dx, _) if dx > 0 => Dir::East,
            _ => Dir::West,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Ball,
    Box,
    Key,
}

impl Kind {
    fn name(self) -> &'static str {
        match self {
            Kind::Ball => "ball",
            Kind::Box => "box",
            Kind::Key => "key",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Object {
    pub color: String,
    pub kind: Kind,
    pub pos: (i32, i32),
}

impl Object {
    fn name(&self) -> String {
        format!("{} {}", self.color, self.kind.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Door {
    pub color: String,
    pub pos: (i32, i32),
    pub locked: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridTask {
    pub size: i32,
    pub door: Option<Door>,
    pub target_color: String,
    pub objects: Vec<Object>,
    pub start: (i32, i32),
    pub start_dir: Dir,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridState {
    pub pos: (i32, i32),
    pub dir: Dir,
    pub holding: Option<(String, Kind)>,
    pub objects: Vec<Object>,
    pub door_open: bool,
    pub door_locked: bool,
}

fn step_pos(p: (i32, i32), d: Dir) -> (i32, i32) {
    let (dx, dy) = d.delta();
    (p.0 + dx, p.1 + dy)
}

fn place(
    rng: &mut ChaCha8Rng,
    room: usize,
    task: &GridTask,
    taken: &mut Vec<(i32, i32)>,
) -> (i32, i32) {
    loop {
        let p = (rng.gen_range(0..task.size), rng.gen_range(0..task.size));
        if task.room_of(p) == Some(room) && !taken.contains(&p) {
            taken.push(p);
            return p;
        }
    }
}

const DIRS: [Dir; 4] = [Dir::North, Dir::East, Dir::South, Dir::West];

impl GridTask {
    pub fn generate(rng: &mut ChaCha8Rng, difficulty: Difficulty) -> Self {
        let size = rng.gen_range(6..=10);
        let mut colors: Vec<&str> = COLORS.to_vec();
        colors.shuffle(rng);
        let target_color = colors[0].to_string();
        let door = match difficulty {
            Difficulty::Easy => None,
            _ => Some(Door {
                color: colors[1].to_string(),
                pos: (rng.gen_range(2..=size - 3), rng.gen_range(0..size)),
                locked: difficulty == Difficulty::Hard,
            }),
        };
        let mut combos: Vec<(&str, Kind)> = COLORS
            .iter()
            .flat_map(|c| [(*c, Kind::Ball), (*c, Kind::Box), (*c, Kind::Key)])
            .filter(|(c, k)| {
                !(*c == colors[0] && *k == Kind::Box) && !(*c == colors[1] && *k == Kind::Key)
            })
            .collect();
        combos.shuffle(rng);

        loop {
            let mut task = GridTask {
                size,
                door: door.clone(),
                target_color: target_color.clone(),
                objects: Vec::new(),
                start: (0, 0),
                start_dir: DIRS[rng.gen_range(0..4)],
            };
            let mut taken: Vec<(i32, i32)> = Vec::new();
            if let Some(d) = &door {
                taken.extend([(d.pos.0 - 1, d.pos.1), (d.pos.0 + 1, d.pos.1)]);
            }
            task.start = place(rng, 0, &task, &mut taken);
            let box_room = usize::from(door.is_some());
            let box_pos = place(rng, box_room, &task, &mut taken);
            task.objects.push(Object {
                color: target_color.clone(),
                kind: Kind::Box,
                pos: box_pos,
            });
            if let Some(d) = door.as_ref().filter(|d| d.locked) {
                let key_pos = place(rng, 0, &task, &mut taken);
                task.objects.push(Object {
                    color: d.color.clone(),
                    kind: Kind::Key,
                    pos: key_pos,
                });
            }
            for (c, k) in combos.iter().take(3) {
                let room = if door.is_some() { rng.gen_range(0..2) } else { 0 };
                let pos = place(rng, room, &task, &mut taken);
                task.objects.push(Object {
                    color: c.to_string(),
                    kind: *k,
                    pos,
                });
            }
            task.objects.sort_by_key(|o| (o.pos.1, o.pos.0));
            if task.connected() {
                return task;
            }
        }
    }

    /// Every object and door side is reachable in the initial layout.
    fn connected(&self) -> bool {
        let s = self.initial();
        let mut starts = vec![s.pos];
        if let Some(d) = &self.door {
            starts.push((d.pos.0 + 1, d.pos.1));
        }
        self.objects.iter().all(|o| {
            let room = self.room_of(o.pos);
            starts
                .iter()
                .filter(|p| self.room_of(**p) == room)
                .any(|p| self.path_to_adjacent(&s, *p, o.pos).is_some())
        }) && self.door.as_ref().is_none_or(|d| {
            self.bfs(&s, s.pos, &[(d.pos.0 - 1, d.pos.1)]).is_some()
        })
    }

    pub fn question(&self) -> String {
        format!(
            "Find the {} box, pick it up, and report what you are holding.",
            self.target_color
        )
    }

    pub fn expected_answer(&self) -> String {
        format!("holding {} box", self.target_color)
    }

    pub fn initial(&self) -> GridState {
        GridState {
            pos: self.start,
            dir: self.start_dir,
            holding: None,
            objects: self.objects.clone(),
            door_open: false,
            door_locked: self.door.as_ref().is_some_and(|d| d.locked),
        }
    }

    fn in_bounds(&self, p: (i32, i32)) -> bool {
        (0..self.size).contains(&p.0) && (0..self.size).contains(&p.1)
    }

    /// 0 for the west (or only) room, 1 for the east room, `None` off-grid
    /// or on the wall column.
    fn room_of(&self, p: (i32, i32)) -> Option<usize> {
        if !self.in_bounds(p) {
            return None;
        }
        match &self.door {
            None => Some(0),
            Some(d) if p.0 < d.pos.0 => Some(0),
            Some(d) if p.0 > d.pos.0 => Some(1),
            Some(_) => None,
        }
    }

    fn room_name(&self, room: usize) -> &'static str {
        match (&self.door, room) {
            (None, _) => "room",
            (Some(_), 0) => "west room",
            (Some(_), _) => "east room",
        }
    }

    fn free(&self, s: &GridState, p: (i32, i32)) -> bool {
        self.room_of(p).is_some() && !s.objects.iter().any(|o| o.pos == p)
    }

    /// Shortest walk inside the start's room to any goal cell, first found
    /// in fixed neighbour order.
    fn bfs(&self, s: &GridState, from: (i32, i32), goals: &[(i32, i32)]) -> Option<(i32, i32)> {
        let room = self.room_of(from)?;
        let n = self.size as usize;
        let mut seen = vec![false; n * n];
        let idx = |p: (i32, i32)| p.1 as usize * n + p.0 as usize;
        let mut queue = VecDeque::from([from]);
        seen[idx(from)] = true;
        while let Some(p) = queue.pop_front() {
            if goals.contains(&p) {
                return Some(p);
            }
            for d in DIRS {
                let q = step_pos(p, d);
                if self.room_of(q) == Some(room) && self.free(s, q) && !seen[idx(q)] {
                    seen[idx(q)] = true;
                    queue.push_back(q);
                }
            }
        }
        None
    }

    fn path_to_adjacent(
        &self,
        s: &GridState,
        from: (i32, i32),
        target: (i32, i32),
    ) -> Option<(i32, i32)> {
        let room = self.room_of(from);
        let goals: Vec<(i32, i32)> = DIRS
            .iter()
            .map(|d| step_pos(target, *d))
            .filter(|p| *p == from || (self.room_of(*p) == room && self.free(s, *p)))
            .collect();
        self.bfs(s, from, &goals)
    }

    fn door_named(&self, name: &str) -> Option<&Door> {
        self.door.as_ref().filter(|d| d.color == name)
    }

    fn relative(&self, s: &GridState, p: (i32, i32)) -> String {
        let (dx, dy) = s.dir.delta();
        let (ox, oy) = (p.0 - s.pos.0, p.1 - s.pos.1);
        let fwd = ox * dx + oy * dy;
        let right = -ox * dy + oy * dx;
        let mut text = if fwd >= 0 {
            format!("{fwd} ahead")
        } else {
            format!("{} behind", -fwd)
        };
        if right > 0 {
            text.push_str(&format!(", {right} right"));
        } else if right < 0 {
            text.push_str(&format!(", {} left", -right));
        }
        text
    }

    fn view(&self, s: &GridState) -> String {
        let room = self.room_of(s.pos);
        let mut seen: Vec<String> = s
            .objects
            .iter()
            .filter(|o| self.room_of(o.pos) == room)
            .map(|o| format!("the {} {}", o.name(), self.relative(s, o.pos)))
            .collect();
        if let Some(d) = &self.door {
            let state = if s.door_open {
                "open"
            } else if s.door_locked {
                "locked"
            } else {
                "closed"
            };
            seen.push(format!(
                "the {} door ({state}) {}",
                d.color,
                self.relative(s, d.pos)
            ));
        }
        let seen = if seen.is_empty() {
            "nothing".to_string()
        } else {
            seen.join("; ")
        };
        let holding = match &s.holding {
            Some((c, k)) => format!("the {c} {}", k.name()),
            None => "nothing".to_string(),
        };
        format!(
            "You face {} in the {}. You see {seen}. You are holding {holding}.",
            s.dir.name(),
            self.room_name(room.unwrap_or(0))
        )
    }

    pub fn step(&self, s: &mut GridState, text: &str) -> (String, bool) {
        let text = text.trim();
        match text {
            ORIENT => return (self.view(s), true),
            "turn left" => {
                s.dir = s.dir.left();
                return (self.view(s), true);
            }
            "turn right" => {
                s.dir = s.dir.right();
                return (self.view(s), true);
            }
            "pick up" => {
                let front = step_pos(s.pos, s.dir);
                let Some(i) = s.objects.iter().position(|o| o.pos == front) else {
                    return ("There is nothing to pick up.".to_string(), false);
                };
                let obj = s.objects.remove(i);
                if let Some((color, kind)) = s.holding.take() {
                    s.objects.push(Object {
                        color,
                        kind,
                        pos: front,
                    });
                }
                s.holding = Some((obj.color.clone(), obj.kind));
                return (format!("You pick up the {}. {}", obj.name(), self.view(s)), true);
            }
            _ => {}
        }
        if let Some(color) = text
            .strip_prefix("toggle ")
            .and_then(|r| r.strip_suffix(" door"))
        {
            let Some(door) = self.door_named(color) else {
                return (format!("There is no {color} door."), false);
            };
            if step_pos(s.pos, s.dir) != door.pos {
                return (format!("You are not facing the {color} door."), false);
            }
            if s.door_locked {
                if s.holding != Some((color.to_string(), Kind::Key)) {
                    return (format!("The {color} door is locked."), false);
                }
                s.door_locked = false;
                s.door_open = true;
                return (format!("You unlock and open the {color} door. {}", self.view(s)), true);
            }
            s.door_open = !s.door_open;
            let verb = if s.door_open { "open" } else { "close" };
            return (format!("You {verb} the {color} door. {}", self.view(s)), true);
        }
        if let Some(color) = text
            .strip_prefix("go through ")
            .and_then(|r| r.strip_suffix(" door"))
        {
            let Some(door) = self.door_named(color) else {
                return (format!("There is no {color} door."), false);
            };
            if !s.door_open {
                return (format!("The {color} door is not open."), false);
            }
            let west = (door.pos.0 - 1, door.pos.1);
            let east = (door.pos.0 + 1, door.pos.1);
            let (near, far, dir) = if self.room_of(s.pos) == Some(0) {
                (west, east, Dir::East)
            } else {
                (east, west, Dir::West)
            };
            if self.bfs(s, s.pos, &[near]).is_none() || !self.free(s, far) {
                return (format!("You cannot reach the {color} door."), false);
            }
            s.pos = far;
            s.dir = dir;
            return (format!("You go through the {color} door. {}", self.view(s)), true);
        }
        if let Some(name) = text.strip_prefix("go to ") {
            let room = self.room_of(s.pos);
            let target = if let Some(color) = name.strip_suffix(" door") {
                self.door_named(color).map(|d| d.pos)
            } else {
                s.objects
                    .iter()
                    .find(|o| o.name() == name && self.room_of(o.pos) == room)
                    .map(|o| o.pos)
            };
            let Some(target) = target else {
                return (format!("You do not see a {name} here."), false);
            };
            let Some(cell) = self.path_to_adjacent(s, s.pos, target) else {
                return (format!("You cannot reach the {name}."), false);
            };
            s.pos = cell;
            s.dir = Dir::towards(cell, target);
            return (format!("You walk to the {name}. {}", self.view(s)), true);
        }
        ("Unknown command.".to_string(), false)
    }

    fn located(&self, s: &GridState, color: &str, kind: Kind) -> Option<(i32, i32)> {
        s.objects
            .iter()
            .find(|o| o.color == color && o.kind == kind)
            .map(|o| o.pos)
    }

    fn approach(&self, s: &GridState, target: (i32, i32), name: String) -> ActionBlock {
        if step_pos(s.pos, s.dir) == target {
            if name.ends_with(" door") {
                return ActionBlock::tool_call(format!("toggle {name}"));
            }
            return ActionBlock::tool_call("pick up");
        }
        ActionBlock::tool_call(format!("go to {name}"))
    }

    pub(crate) fn expert(&self, s: &GridState, h: &History<'_>) -> ExpertMove {
        let goal = (self.target_color.clone(), Kind::Box);
        let act = if !h.took(ORIENT) {
            ActionBlock::tool_call(ORIENT)
        } else if s.holding.as_ref() == Some(&goal) {
            ActionBlock::answer(self.expected_answer())
        } else {
            let box_pos = self
                .located(s, &self.target_color, Kind::Box)
                .expect("box is on the grid when not held");
            if self.room_of(box_pos) == self.room_of(s.pos) {
                self.approach(s, box_pos, format!("{} box", self.target_color))
            } else {
                let door = self.door.as_ref().expect("two rooms imply a door");
                let door_name = format!("{} door", door.color);
                let key = (door.color.clone(), Kind::Key);
                if s.door_open {
                    ActionBlock::tool_call(format!("go through {door_name}"))
                } else if !s.door_locked || s.holding.as_ref() == Some(&key) {
                    self.approach(s, door.pos, door_name)
                } else {
                    let key_pos = self
                        .located(s, &door.color, Kind::Key)
                        .expect("key is on the grid when not held");
                    self.approach(s, key_pos, format!("{} key", door.color))
                }
            }
        };
        ExpertMove::Solve(act)
    }

    pub(crate) fn candidates(
        &self,
        s: &GridState,
        _h: &History<'_>,
    ) -> (Vec<ActionBlock>, Vec<ActionBlock>) {
        let mut priority = Vec::new();
        if let Some((c, k)) = &s.holding {
            priority.push(ActionBlock::answer(format!("holding {c} {}", k.name())));
        }
        let mut rest: Vec<ActionBlock> = [ORIENT, "turn left", "turn right", "pick up"]
            .into_iter()
            .map(ActionBlock::tool_call)
            .collect();
        let room = self.room_of(s.pos);
        for o in s.objects.iter().filter(|o| self.room_of(o.pos) == room) {
            rest.push(ActionBlock::tool_call(format!("go to {}", o.name())));
        }
        if let Some(d) = &self.door {
            for verb in ["go to", "toggle", "go through"] {
                rest.push(ActionBlock::tool_call(format!("{verb} {} door", d.color)));
            }
        }
        (priority, rest)
    }

    pub fn plan_text(&self) -> String {
        let c = &self.target_color;
        match &self.door {
            None => format!(
                "Plan: the {c} box should be somewhere in this room. I will look around to \
                 find it, walk over to the {c} box, pick it up, and then report that I am \
                 holding the {c} box."
            ),
            Some(d) if d.locked => format!(
                "Plan: the {c} box is probably in the east room behind the locked {0} door. \
                 I will look around, fetch the {0} key, unlock the {0} door, go through, walk \
                 to the {c} box, pick it up, and report holding it.",
                d.color
            ),
            Some(d) => format!(
                "Plan: the {c} box is probably in the east room behind the {0} door. I will \
                 look around, walk to the {0} door, open it, go through, walk to the {c} box, \
                 pick it up, and report holding it.",
                d.color
            ),
        }
    }

    pub fn step_note(&self, next: &ActionBlock) -> String {
        if next.kind == ActionKind::Answer {
            return format!("Following the plan, I report holding the {} box.", self.target_color);
        }
        format!("Following the plan, next I {}.", next.text)
    }
}
