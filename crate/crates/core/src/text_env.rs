//! Deterministic toy text environments with a Jericho-style interface:
//! a textual observation, an ordered admissible-action list, a scalar reward
//! and a done flag.
//!
//! * `LoopTrapRooms`: hallway/closet dead loop with a two-step exit to the west.
//! * `KeyDoorQuest`: five-room chain, key, locked door, two sparse rewards.
//! * `GridCommand`: 5x5 grid with shaped reward `1 - 0.9 t / T` on success.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedTree;

/// Padded size of every action space (world-model policy head width).
pub const ACTION_SLOTS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvName {
    LoopTrapRooms,
    KeyDoorQuest,
    GridCommand,
}

impl EnvName {
    pub const ALL: [EnvName; 3] = [
        EnvName::LoopTrapRooms,
        EnvName::KeyDoorQuest,
        EnvName::GridCommand,
    ];

    pub fn default_max_steps(self) -> usize {
        match self {
            EnvName::LoopTrapRooms => 20,
            EnvName::KeyDoorQuest => 50,
            EnvName::GridCommand => 20,
        }
    }
}

impl fmt::Display for EnvName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EnvName::LoopTrapRooms => "LoopTrapRooms",
            EnvName::KeyDoorQuest => "KeyDoorQuest",
            EnvName::GridCommand => "GridCommand",
        };
        f.write_str(s)
    }
}

impl FromStr for EnvName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match norm.as_str() {
            "looptraprooms" | "looptrap" => Ok(EnvName::LoopTrapRooms),
            "keydoorquest" | "keydoor" => Ok(EnvName::KeyDoorQuest),
            "gridcommand" | "grid" => Ok(EnvName::GridCommand),
            _ => Err(Error::Config(format!("unknown environment {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: EnvName,
    pub max_steps: usize,
    pub seed: u64,
}

impl EnvSpec {
    pub fn new(name: EnvName, seed: u64) -> Self {
        Self {
            name,
            max_steps: name.default_max_steps(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub text: String,
    pub valid_actions: Vec<String>,
    pub step_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
}

/// One line of the episode-trace dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    pub obs_text: String,
    pub valid_actions: Vec<String>,
    pub action: String,
    pub reward: f64,
    pub done: bool,
}

/// A live environment instance. Owned by exactly one collector.
#[derive(Debug, Clone)]
pub struct Env {
    spec: EnvSpec,
    state: EnvState,
    step_index: usize,
    done: bool,
    current: Observation,
}

#[derive(Debug, Clone)]
enum EnvState {
    LoopTrap(Location),
    KeyDoor(KeyDoorState),
    Grid(GridState),
}

/// Creates the environment described by `spec` and returns its initial observation.
pub fn reset(spec: &EnvSpec) -> Result<(Env, Observation)> {
    let mut env = Env::new(*spec)?;
    let obs = env.reset();
    Ok((env, obs))
}

impl Env {
    pub fn new(spec: EnvSpec) -> Result<Self> {
        spec.validate()?;
        let state = initial_state(&spec);
        let mut env = Self {
            spec,
            state,
            step_index: 0,
            done: false,
            current: Observation {
                text: String::new(),
                valid_actions: Vec::new(),
                step_index: 0,
            },
        };
        env.current = env.observe();
        Ok(env)
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn observation(&self) -> &Observation {
        &self.current
    }

    pub fn reset(&mut self) -> Observation {
        self.state = initial_state(&self.spec);
        self.step_index = 0;
        self.done = false;
        self.current = self.observe();
        self.current.clone()
    }

    pub fn step(&mut self, action: &str) -> Result<StepResult> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        if !self.current.valid_actions.iter().any(|a| a == action) {
            return Err(Error::InvalidAction {
                action: action.to_string(),
                valid: self.current.valid_actions.clone(),
            });
        }
        self.step_index += 1;
        let t = self.step_index;
        let max_steps = self.spec.max_steps;
        let (reward, goal) = match &mut self.state {
            EnvState::LoopTrap(loc) => loop_trap_step(loc, action),
            EnvState::KeyDoor(s) => key_door_step(s, action),
            EnvState::Grid(s) => {
                let success = grid_step(s, action);
                if success {
                    (1.0 - 0.9 * (t as f64 / max_steps as f64), true)
                } else {
                    (0.0, false)
                }
            }
        };
        self.done = goal || self.step_index >= self.spec.max_steps;
        self.current = self.observe();
        Ok(StepResult {
            observation: self.current.clone(),
            reward,
            done: self.done,
        })
    }

    fn observe(&self) -> Observation {
        let (text, actions) = match &self.state {
            EnvState::LoopTrap(loc) => loop_trap_view(*loc),
            EnvState::KeyDoor(s) => key_door_view(s, self.spec.seed),
            EnvState::Grid(s) => grid_view(s),
        };
        Observation {
            text,
            valid_actions: if self.done { Vec::new() } else { actions },
            step_index: self.step_index,
        }
    }
}

/// Replays a fixed action sequence from reset, producing the trace dump.
pub fn run_trace(spec: &EnvSpec, actions: &[&str]) -> Result<Vec<TraceRecord>> {
    let (mut env, mut obs) = reset(spec)?;
    let mut out = Vec::with_capacity(actions.len());
    for (t, &a) in actions.iter().enumerate() {
        let step = env.step(a)?;
        out.push(TraceRecord {
            t,
            obs_text: obs.text.clone(),
            valid_actions: obs.valid_actions.clone(),
            action: a.to_string(),
            reward: step.reward,
            done: step.done,
        });
        obs = step.observation;
        if step.done {
            break;
        }
    }
    Ok(out)
}

fn initial_state(spec: &EnvSpec) -> EnvState {
    match spec.name {
        EnvName::LoopTrapRooms => EnvState::LoopTrap(Location::Hallway),
        EnvName::KeyDoorQuest => EnvState::KeyDoor(KeyDoorState::default()),
        EnvName::GridCommand => EnvState::Grid(GridState::generate(spec.seed)),
    }
}

// ---------------------------------------------------------------------------
// LoopTrapRooms

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Location {
    Hallway,
    Closet,
    Corridor,
    Exit,
}

fn loop_trap_view(loc: Location) -> (String, Vec<String>) {
    let (text, actions): (&str, &[&str]) = match loc {
        Location::Hallway => (
            "You are in a hallway. A closet is to the north. A corridor leads west.",
            &["north", "south", "west"],
        ),
        Location::Closet => ("You are in a closet. It is dark and empty.", &["south"]),
        Location::Corridor => (
            "You are in a corridor. Light comes from the west.",
            &["east", "west"],
        ),
        Location::Exit => ("You are at the exit. You escaped.", &[]),
    };
    (
        text.to_string(),
        actions.iter().map(|s| s.to_string()).collect(),
    )
}

fn loop_trap_step(loc: &mut Location, action: &str) -> (f64, bool) {
    *loc = match (*loc, action) {
        (Location::Hallway, "north") => Location::Closet,
        (Location::Hallway, "west") => Location::Corridor,
        (Location::Closet, "south") => Location::Hallway,
        (Location::Corridor, "east") => Location::Hallway,
        (Location::Corridor, "west") => Location::Exit,
        (other, _) => other,
    };
    if *loc == Location::Exit {
        (1.0, true)
    } else {
        (0.0, false)
    }
}

// ---------------------------------------------------------------------------
// KeyDoorQuest
//
// Rooms 1..=5 in a west-to-east chain. The agent starts in room 2 next to the
// key; room 1 is a dead end. The door between rooms 4 and 5 starts locked.

#[derive(Debug, Clone)]
struct KeyDoorState {
    room: u8,
    key_on_floor: bool,
    holding_key: bool,
    door_open: bool,
}

impl Default for KeyDoorState {
    fn default() -> Self {
        Self {
            room: 2,
            key_on_floor: true,
            holding_key: false,
            door_open: false,
        }
    }
}

fn key_door_view(s: &KeyDoorState, seed: u64) -> (String, Vec<String>) {
    let mut text = match s.room {
        1 => "You are in a cellar. The storeroom is to the east.".to_string(),
        2 => {
            let mut t = "You are in a storeroom.".to_string();
            if s.key_on_floor {
                t.push_str(" There is a brass key here.");
            }
            t.push_str(" The cellar is to the west and the gallery is to the east.");
            t
        }
        3 => "You are in a gallery. Old paintings cover the walls. The hall is to the east."
            .to_string(),
        4 => {
            if s.door_open {
                "You are in a hall. A heavy door to the east is open.".to_string()
            } else {
                "You are in a hall. A heavy door to the east is locked.".to_string()
            }
        }
        _ => "You found the treasure room.".to_string(),
    };
    if s.holding_key && s.room != 5 {
        text.push_str(" You carry a brass key.");
    }
    let mut actions: Vec<&str> = match s.room {
        1 => vec!["go east", "look", "wait", "search"],
        2 => {
            let mut a = vec!["go east", "go west"];
            if s.key_on_floor {
                a.push("take key");
            }
            a.extend(["look", "wait"]);
            a
        }
        3 => vec!["go east", "go west", "look", "wait"],
        4 => {
            if s.door_open {
                vec!["go east", "go west", "look", "wait"]
            } else if s.holding_key {
                vec!["go west", "unlock door", "knock", "look", "wait"]
            } else {
                vec!["go west", "knock", "look", "wait"]
            }
        }
        _ => vec![],
    };
    if seed != 0 {
        // Layout variant: a per-room, per-seed fixed action ordering.
        let tree = SeedTree::new(seed);
        let mut rng = tree.stream("key_door_layout", s.room as u64);
        actions.shuffle(&mut rng);
    }
    (text, actions.into_iter().map(String::from).collect())
}

fn key_door_step(s: &mut KeyDoorState, action: &str) -> (f64, bool) {
    match action {
        "go east" => match s.room {
            1..=3 => s.room += 1,
            4 if s.door_open => {
                s.room = 5;
                return (1.0, true);
            }
            _ => {}
        },
        "go west" if s.room > 1 => s.room -= 1,
        "take key" if s.room == 2 && s.key_on_floor => {
            s.key_on_floor = false;
            s.holding_key = true;
        }
        "unlock door" if s.room == 4 && s.holding_key && !s.door_open => {
            s.door_open = true;
            return (1.0, false);
        }
        _ => {}
    }
    (0.0, false)
}

// ---------------------------------------------------------------------------
// GridCommand

const GRID: i32 = 5;
const COLORS: [&str; 4] = ["red", "blue", "green", "yellow"];
const KINDS: [&str; 3] = ["ball", "key", "box"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Facing {
    North,
    East,
    South,
    West,
}

impl Facing {
    fn turn_left(self) -> Self {
        match self {
            Facing::North => Facing::West,
            Facing::West => Facing::South,
            Facing::South => Facing::East,
            Facing::East => Facing::North,
        }
    }

    fn turn_right(self) -> Self {
        self.turn_left().turn_left().turn_left()
    }

    fn delta(self) -> (i32, i32) {
        match self {
            Facing::North => (0, -1),
            Facing::East => (1, 0),
            Facing::South => (0, 1),
            Facing::West => (-1, 0),
        }
    }

    fn word(self) -> &'static str {
        match self {
            Facing::North => "north",
            Facing::East => "east",
            Facing::South => "south",
            Facing::West => "west",
        }
    }
}

#[derive(Debug, Clone)]
struct GridObject {
    color: &'static str,
    kind: &'static str,
    pos: (i32, i32),
}

impl GridObject {
    fn name(&self) -> String {
        format!("{} {}", self.color, self.kind)
    }
}

#[derive(Debug, Clone)]
struct GridState {
    agent: (i32, i32),
    facing: Facing,
    /// `objects[0]` is the target (always the red ball).
    objects: Vec<GridObject>,
}

impl GridState {
    fn generate(seed: u64) -> Self {
        let mut rng = SeedTree::new(seed).stream("grid_layout", 0);
        let mut cells: Vec<(i32, i32)> = (0..GRID)
            .flat_map(|y| (0..GRID).map(move |x| (x, y)))
            .collect();
        cells.shuffle(&mut rng);
        let mut kinds: Vec<(&'static str, &'static str)> = COLORS
            .iter()
            .flat_map(|&c| KINDS.iter().map(move |&k| (c, k)))
            .filter(|&(c, k)| !(c == "red" && k == "ball"))
            .collect();
        kinds.shuffle(&mut rng);
        let mut objects = vec![GridObject {
            color: "red",
            kind: "ball",
            pos: cells[1],
        }];
        for (i, &(color, kind)) in kinds.iter().take(2).enumerate() {
            objects.push(GridObject {
                color,
                kind,
                pos: cells[2 + i],
            });
        }
        let facing = [Facing::North, Facing::East, Facing::South, Facing::West]
            [rng.random_range(0..4)];
        Self {
            agent: cells[0],
            facing,
            objects,
        }
    }

    /// Objects strictly ahead of the agent, with their lateral side.
    fn visible(&self) -> Vec<(usize, &'static str)> {
        let (dx, dy) = self.facing.delta();
        let mut out = Vec::new();
        for (i, o) in self.objects.iter().enumerate() {
            let rx = o.pos.0 - self.agent.0;
            let ry = o.pos.1 - self.agent.1;
            let forward = rx * dx + ry * dy;
            if forward <= 0 {
                continue;
            }
            // Right-hand lateral axis is (-dy, dx) in screen coordinates.
            let lateral = rx * -dy + ry * dx;
            let side = match lateral.cmp(&0) {
                std::cmp::Ordering::Less => "on the left",
                std::cmp::Ordering::Equal => "ahead",
                std::cmp::Ordering::Greater => "on the right",
            };
            out.push((i, side));
        }
        out
    }
}

fn grid_view(s: &GridState) -> (String, Vec<String>) {
    let visible = s.visible();
    let seen = if visible.is_empty() {
        "You see nothing.".to_string()
    } else {
        let parts: Vec<String> = visible
            .iter()
            .map(|&(i, side)| format!("a {} {}", s.objects[i].name(), side))
            .collect();
        format!("You see {}.", parts.join(" and "))
    };
    let text = format!(
        "Your goal: go to the red ball.\nYou are facing {}.\n{}",
        s.facing.word(),
        seen
    );
    let mut actions = vec![
        "turn left".to_string(),
        "turn right".to_string(),
        "move forward".to_string(),
    ];
    for &(i, _) in &visible {
        actions.push(format!("go to {}", s.objects[i].name()));
    }
    (text, actions)
}

/// Returns true when the agent reached the target.
fn grid_step(s: &mut GridState, action: &str) -> bool {
    match action {
        "turn left" => s.facing = s.facing.turn_left(),
        "turn right" => s.facing = s.facing.turn_right(),
        "move forward" => {
            let (dx, dy) = s.facing.delta();
            let (nx, ny) = (s.agent.0 + dx, s.agent.1 + dy);
            if (0..GRID).contains(&nx) && (0..GRID).contains(&ny) {
                s.agent = (nx, ny);
            }
        }
        other => {
            if let Some(name) = other.strip_prefix("go to ") {
                if let Some(i) = s.objects.iter().position(|o| o.name() == name) {
                    if i == 0 {
                        return true;
                    }
                    s.agent = s.objects[i].pos;
                }
            }
        }
    }
    false
}
