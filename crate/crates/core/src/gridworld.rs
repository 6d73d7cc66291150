//! Fully observable GoToLocal: an 8×8 room (walls on the border), a handful
//! of coloured objects, and the instruction "go to (a|the) <color> <type>".
//!
//! Reset consumes one SplitMix64 stream per seed in this order: goal article,
//! goal color, goal type, goal object cell, then for each distractor its
//! color, type (redrawn while it collides with a "the" goal) and cell, then
//! the agent cell and direction. Layouts where no goal object can be faced
//! are discarded and sampling continues on the same stream.

use std::collections::VecDeque;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const GRID: usize = 8;
pub const CELLS: usize = GRID * GRID;
pub const MAX_STEPS: u32 = 64;
pub const NUM_ACTIONS: usize = 7;
pub const NUM_TYPES: usize = 6;
pub const NUM_COLORS: usize = 7;
pub const NUM_GOALS: usize = 36;

pub const EMPTY: u8 = 0;
pub const WALL: u8 = 1;
pub const BOX: u8 = 2;
pub const BALL: u8 = 3;
pub const KEY: u8 = 4;
pub const AGENT: u8 = 5;

pub const COLOR_NAMES: [&str; NUM_COLORS] = ["none", "blue", "red", "green", "yellow", "purple", "grey"];
pub const TYPE_NAMES: [&str; NUM_TYPES] = ["empty", "wall", "box", "ball", "key", "agent"];

pub const VOCAB: [&str; 13] = [
    "go", "to", "a", "the", "blue", "red", "green", "yellow", "purple", "grey", "box", "ball", "key",
];
pub const VOCAB_SIZE: usize = VOCAB.len();
pub const INSTRUCTION_LEN: usize = 5;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EnvError {
    #[error("episode already terminated")]
    Terminated,
    #[error("invalid environment config: {0}")]
    Config(String),
    #[error("invalid instruction: {0}")]
    Instruction(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub kind: u8,
    pub color: u8,
    pub held: u8,
}

impl Cell {
    pub const EMPTY: Cell = Cell {
        kind: EMPTY,
        color: 0,
        held: 0,
    };
    pub const WALL: Cell = Cell {
        kind: WALL,
        color: 0,
        held: 0,
    };

    pub fn object(kind: u8, color: u8) -> Cell {
        debug_assert!((BOX..=KEY).contains(&kind) && (1..=6).contains(&color));
        Cell { kind, color, held: 0 }
    }

    pub fn is_object(self) -> bool {
        (BOX..=KEY).contains(&self.kind)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Article {
    A,
    The,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Goal {
    pub article: Article,
    pub color: u8,
    pub kind: u8,
}

impl Goal {
    pub fn new(article: Article, color: u8, kind: u8) -> Goal {
        assert!((1..=6).contains(&color) && (BOX..=KEY).contains(&kind));
        Goal { article, color, kind }
    }

    /// Dense index in `0..36`: article-major, then color, then type.
    pub fn index(self) -> usize {
        let a = match self.article {
            Article::A => 0,
            Article::The => 1,
        };
        a * 18 + (self.color as usize - 1) * 3 + (self.kind - BOX) as usize
    }

    pub fn from_index(i: usize) -> Goal {
        assert!(i < NUM_GOALS);
        let article = if i < 18 { Article::A } else { Article::The };
        let r = i % 18;
        Goal::new(article, (r / 3) as u8 + 1, (r % 3) as u8 + BOX)
    }

    pub fn all() -> impl Iterator<Item = Goal> {
        (0..NUM_GOALS).map(Goal::from_index)
    }

    pub fn matches(self, cell: Cell) -> bool {
        cell.kind == self.kind && cell.color == self.color
    }

    pub fn combination(self) -> (u8, u8) {
        (self.color, self.kind)
    }
}

impl fmt::Display for Goal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let words = goal_to_instruction(*self).words();
        write!(f, "{}", words.join(" "))
    }
}

/// Token ids for "go to <article> <color> <type>".
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instruction(pub [u8; INSTRUCTION_LEN]);

impl Instruction {
    pub fn tokens(&self) -> &[u8; INSTRUCTION_LEN] {
        &self.0
    }

    pub fn words(&self) -> Vec<&'static str> {
        self.0.iter().map(|&t| VOCAB[t as usize]).collect()
    }

    pub fn to_goal(&self) -> Result<Goal, EnvError> {
        let t = self.0;
        let bad = || EnvError::Instruction(format!("{t:?}"));
        if t[0] != 0 || t[1] != 1 {
            return Err(bad());
        }
        let article = match t[2] {
            2 => Article::A,
            3 => Article::The,
            _ => return Err(bad()),
        };
        if !(4..=9).contains(&t[3]) || !(10..=12).contains(&t[4]) {
            return Err(bad());
        }
        Ok(Goal::new(article, t[3] - 3, t[4] - 8))
    }
}

pub fn goal_to_instruction(goal: Goal) -> Instruction {
    let article = match goal.article {
        Article::A => 2,
        Article::The => 3,
    };
    Instruction([0, 1, article, goal.color + 3, goal.kind + 8])
}

/// Vocabulary id of the word naming a color id (1..=6).
pub fn color_word(color: u8) -> usize {
    color as usize + 3
}

/// Vocabulary id of the word naming an object type id (2..=4).
pub fn type_word(kind: u8) -> usize {
    kind as usize + 8
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Action {
    Left = 0,
    Right = 1,
    Forward = 2,
    Open = 3,
    Pickup = 4,
    Putdown = 5,
    Done = 6,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [
        Action::Left,
        Action::Right,
        Action::Forward,
        Action::Open,
        Action::Pickup,
        Action::Putdown,
        Action::Done,
    ];

    pub fn from_id(id: u8) -> Option<Action> {
        Action::ALL.get(id as usize).copied()
    }

    pub fn id(self) -> u8 {
        self as u8
    }
}

/// Row/column offset of the cell in front of an agent facing `dir`
/// (0 north, 1 east, 2 south, 3 west).
pub fn dir_offset(dir: u8) -> (isize, isize) {
    match dir % 4 {
        0 => (-1, 0),
        1 => (0, 1),
        2 => (1, 0),
        _ => (0, -1),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub num_objects: usize,
    /// (color, type) pairs never drawn as distractors.
    pub excluded_distractors: Vec<(u8, u8)>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            num_objects: 8,
            excluded_distractors: Vec::new(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let interior = (GRID - 2) * (GRID - 2);
        if self.num_objects == 0 || self.num_objects > interior - 1 {
            return Err(EnvError::Config(format!(
                "num_objects must be in 1..={}, got {}",
                interior - 1,
                self.num_objects
            )));
        }
        if self.excluded_distractors.len() >= 18 {
            return Err(EnvError::Config("every distractor combination is excluded".into()));
        }
        Ok(())
    }
}

/// Observation channels per cell: (type, color, held), plus the agent's
/// direction kept outside the grid.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct FactoredGrid {
    pub cells: [[u8; 3]; CELLS],
    pub direction: u8,
}

impl FactoredGrid {
    pub fn kind(&self, pos: usize) -> u8 {
        self.cells[pos][0]
    }

    pub fn color(&self, pos: usize) -> u8 {
        self.cells[pos][1]
    }

    pub fn agent_pos(&self) -> Option<usize> {
        self.cells.iter().position(|c| c[0] == AGENT)
    }

    /// Flat index of the cell the agent faces.
    pub fn faced_pos(&self) -> Option<usize> {
        let p = self.agent_pos()?;
        let (dr, dc) = dir_offset(self.direction);
        let r = (p / GRID) as isize + dr;
        let c = (p % GRID) as isize + dc;
        if r < 0 || c < 0 || r >= GRID as isize || c >= GRID as isize {
            return None;
        }
        Some(r as usize * GRID + c as usize)
    }

    /// Cells whose (type, color) match the goal.
    pub fn goal_cells(&self, goal: Goal) -> [bool; CELLS] {
        let mut mask = [false; CELLS];
        for (m, c) in mask.iter_mut().zip(&self.cells) {
            *m = c[0] == goal.kind && c[1] == goal.color;
        }
        mask
    }

    /// Row-major bytes: 192 channel bytes then the direction.
    pub fn to_bytes(&self) -> [u8; CELLS * 3 + 1] {
        let mut out = [0u8; CELLS * 3 + 1];
        for (i, c) in self.cells.iter().enumerate() {
            out[i * 3..i * 3 + 3].copy_from_slice(c);
        }
        out[CELLS * 3] = self.direction;
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<FactoredGrid> {
        if bytes.len() != CELLS * 3 + 1 {
            return None;
        }
        let mut cells = [[0u8; 3]; CELLS];
        for (i, c) in cells.iter_mut().enumerate() {
            c.copy_from_slice(&bytes[i * 3..i * 3 + 3]);
        }
        Some(FactoredGrid {
            cells,
            direction: bytes[CELLS * 3],
        })
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut legend = Vec::new();
        for r in 0..GRID {
            for c in 0..GRID {
                let [kind, color, _] = self.cells[r * GRID + c];
                let ch = match kind {
                    EMPTY => '.',
                    WALL => '#',
                    BOX => 'b',
                    BALL => 'o',
                    KEY => 'k',
                    AGENT => ['^', '>', 'v', '<'][self.direction as usize % 4],
                    _ => '?',
                };
                if (BOX..=KEY).contains(&kind) {
                    legend.push(format!(
                        "({r},{c}) {} {}",
                        COLOR_NAMES[color as usize], TYPE_NAMES[kind as usize]
                    ));
                }
                s.push(ch);
            }
            s.push('\n');
        }
        for l in legend {
            s.push_str(&l);
            s.push('\n');
        }
        s
    }
}

impl fmt::Debug for FactoredGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FactoredGrid(dir={})\n{}", self.direction, self.render())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpisodeState {
    /// Room contents without the agent.
    pub grid: [[Cell; GRID]; GRID],
    pub agent: (usize, usize),
    pub direction: u8,
    pub goal: Goal,
    pub step_count: u32,
    pub terminated: bool,
    pub seed: u64,
}

impl EpisodeState {
    pub fn cell(&self, row: usize, col: usize) -> Cell {
        self.grid[row][col]
    }

    pub fn faced(&self) -> (usize, usize) {
        let (dr, dc) = dir_offset(self.direction);
        (
            (self.agent.0 as isize + dr) as usize,
            (self.agent.1 as isize + dc) as usize,
        )
    }

    pub fn faced_cell(&self) -> Cell {
        let (r, c) = self.faced();
        self.grid[r][c]
    }

    pub fn instruction(&self) -> Instruction {
        goal_to_instruction(self.goal)
    }

    pub fn objects(&self) -> impl Iterator<Item = ((usize, usize), Cell)> + '_ {
        (0..GRID)
            .flat_map(move |r| (0..GRID).map(move |c| ((r, c), self.grid[r][c])))
            .filter(|(_, cell)| cell.is_object())
    }
}

fn is_interior(r: usize, c: usize) -> bool {
    r > 0 && c > 0 && r < GRID - 1 && c < GRID - 1
}

fn empty_interior(grid: &[[Cell; GRID]; GRID], agent: Option<(usize, usize)>) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for r in 1..GRID - 1 {
        for c in 1..GRID - 1 {
            if grid[r][c].kind == EMPTY && Some((r, c)) != agent {
                out.push((r, c));
            }
        }
    }
    out
}

/// True when some goal object sits next to a cell the agent can walk to.
pub fn goal_reachable(state: &EpisodeState) -> bool {
    let mut seen = [[false; GRID]; GRID];
    let mut queue = VecDeque::from([state.agent]);
    seen[state.agent.0][state.agent.1] = true;
    while let Some((r, c)) = queue.pop_front() {
        for d in 0..4 {
            let (dr, dc) = dir_offset(d);
            let (nr, nc) = ((r as isize + dr) as usize, (c as isize + dc) as usize);
            let cell = state.grid[nr][nc];
            if state.goal.matches(cell) {
                return true;
            }
            if cell.kind == EMPTY && !seen[nr][nc] {
                seen[nr][nc] = true;
                queue.push_back((nr, nc));
            }
        }
    }
    false
}

pub fn reset(seed: u64, config: &EnvConfig) -> Result<EpisodeState, EnvError> {
    config.validate()?;
    let mut rng = SplitMix64::seed_from_u64(seed);
    let article = if rng.random_range(0..2) == 0 { Article::A } else { Article::The };
    let goal = Goal::new(article, rng.random_range(1..=6u8), rng.random_range(BOX..=KEY));
    loop {
        let mut grid = [[Cell::EMPTY; GRID]; GRID];
        for (r, row) in grid.iter_mut().enumerate() {
            for (c, cell) in row.iter_mut().enumerate() {
                if !is_interior(r, c) {
                    *cell = Cell::WALL;
                }
            }
        }
        let free = empty_interior(&grid, None);
        let (r, c) = free[rng.random_range(0..free.len())];
        grid[r][c] = Cell::object(goal.kind, goal.color);
        for _ in 1..config.num_objects {
            let (color, kind) = loop {
                let color = rng.random_range(1..=6u8);
                let kind = rng.random_range(BOX..=KEY);
                let clashes = goal.article == Article::The && (color, kind) == goal.combination();
                if !clashes && !config.excluded_distractors.contains(&(color, kind)) {
                    break (color, kind);
                }
            };
            let free = empty_interior(&grid, None);
            let (r, c) = free[rng.random_range(0..free.len())];
            grid[r][c] = Cell::object(kind, color);
        }
        let free = empty_interior(&grid, None);
        let agent = free[rng.random_range(0..free.len())];
        let direction = rng.random_range(0..4u8);
        let state = EpisodeState {
            grid,
            agent,
            direction,
            goal,
            step_count: 0,
            terminated: false,
            seed,
        };
        if goal_reachable(&state) {
            return Ok(state);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub state: EpisodeState,
    pub reward: f64,
    pub terminated: bool,
}

pub fn step(state: &EpisodeState, action: Action) -> Result<StepOutcome, EnvError> {
    if state.terminated {
        return Err(EnvError::Terminated);
    }
    let mut next = state.clone();
    next.step_count += 1;
    let mut reward = 0.0;
    match action {
        Action::Left => next.direction = (next.direction + 3) % 4,
        Action::Right => next.direction = (next.direction + 1) % 4,
        Action::Forward => {
            let (r, c) = state.faced();
            if state.grid[r][c].kind == EMPTY {
                next.agent = (r, c);
            }
        }
        Action::Open | Action::Pickup | Action::Putdown => {}
        Action::Done => {
            next.terminated = true;
            if state.goal.matches(state.faced_cell()) {
                reward = 1.0;
            }
        }
    }
    if next.step_count >= MAX_STEPS {
        next.terminated = true;
    }
    let terminated = next.terminated;
    Ok(StepOutcome {
        state: next,
        reward,
        terminated,
    })
}

pub fn encode_observation(state: &EpisodeState) -> FactoredGrid {
    let mut cells = [[0u8; 3]; CELLS];
    for r in 0..GRID {
        for c in 0..GRID {
            let cell = state.grid[r][c];
            cells[r * GRID + c] = [cell.kind, cell.color, cell.held];
        }
    }
    cells[state.agent.0 * GRID + state.agent.1] = [AGENT, 0, 0];
    FactoredGrid {
        cells,
        direction: state.direction,
    }
}

/// Boolean mask of cells whose (type, color) match `goal`.
pub fn goal_cells(state: &EpisodeState, goal: Goal) -> [bool; CELLS] {
    encode_observation(state).goal_cells(goal)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state_with(objects: &[((usize, usize), Cell)], agent: (usize, usize), dir: u8, goal: Goal) -> EpisodeState {
        let mut grid = [[Cell::EMPTY; GRID]; GRID];
        for r in 0..GRID {
            for c in 0..GRID {
                if !is_interior(r, c) {
                    grid[r][c] = Cell::WALL;
                }
            }
        }
        for &((r, c), cell) in objects {
            grid[r][c] = cell;
        }
        EpisodeState {
            grid,
            agent,
            direction: dir,
            goal,
            step_count: 0,
            terminated: false,
            seed: 0,
        }
    }

    #[test]
    fn reset_is_deterministic_and_well_formed() {
        let cfg = EnvConfig::default();
        for seed in 0..500 {
            let a = reset(seed, &cfg).unwrap();
            assert_eq!(a, reset(seed, &cfg).unwrap());
            for i in 0..GRID {
                for edge in [0, GRID - 1] {
                    assert_eq!(a.grid[i][edge], Cell::WALL);
                    assert_eq!(a.grid[edge][i], Cell::WALL);
                }
            }
            assert_eq!(a.objects().count(), cfg.num_objects);
            assert_eq!(a.cell(a.agent.0, a.agent.1), Cell::EMPTY);
            let matching = a.objects().filter(|(_, c)| a.goal.matches(*c)).count();
            assert!(matching >= 1);
            if a.goal.article == Article::The {
                assert_eq!(matching, 1);
            }
            assert!(a.direction < 4);
        }
    }

    #[test]
    fn done_facing_goal_rewards() {
        let goal = Goal::new(Article::The, 2, BALL);
        let s = state_with(&[((1, 3), Cell::object(BALL, 2))], (1, 2), 1, goal);
        let out = step(&s, Action::Done).unwrap();
        assert!(out.terminated);
        assert_eq!(out.reward, 1.0);
        assert_eq!(step(&out.state, Action::Left), Err(EnvError::Terminated));
    }

    #[test]
    fn done_facing_wrong_cell_ends_without_reward() {
        let goal = Goal::new(Article::The, 2, BALL);
        let s = state_with(&[((1, 3), Cell::object(BALL, 1))], (1, 2), 1, goal);
        let out = step(&s, Action::Done).unwrap();
        assert!(out.terminated);
        assert_eq!(out.reward, 0.0);
    }

    #[test]
    fn forward_into_wall_is_blocked() {
        let goal = Goal::new(Article::A, 2, BALL);
        let s = state_with(&[((3, 3), Cell::object(BALL, 2))], (1, 1), 0, goal);
        let out = step(&s, Action::Forward).unwrap();
        assert_eq!(out.state.agent, (1, 1));
        assert_eq!(out.state.step_count, 1);
        assert!(!out.terminated);
        let turned = step(&s, Action::Right).unwrap().state;
        assert_eq!(turned.direction, 1);
        let moved = step(&turned, Action::Forward).unwrap().state;
        assert_eq!(moved.agent, (1, 2));
        assert_eq!(step(&s, Action::Left).unwrap().state.direction, 3);
    }

    #[test]
    fn sixty_four_steps_time_out() {
        let mut s = reset(7, &EnvConfig::default()).unwrap();
        let mut last = None;
        for i in 0..MAX_STEPS {
            let out = step(&s, Action::Pickup).unwrap();
            assert_eq!(out.terminated, i + 1 == MAX_STEPS);
            last = Some(out.reward);
            s = out.state;
        }
        assert!(s.terminated);
        assert_eq!(last, Some(0.0));
    }

    #[test]
    fn step_preserves_objects_and_walls() {
        let s0 = reset(3, &EnvConfig::default()).unwrap();
        let mut s = s0.clone();
        for (i, a) in [2u8, 0, 2, 2, 1, 2, 3, 4, 5, 2].iter().cycle().take(40).enumerate() {
            let out = step(&s, Action::from_id(*a).unwrap()).unwrap();
            assert_eq!(out.state.grid, s0.grid, "step {i}");
            let obs = encode_observation(&out.state);
            assert_eq!(obs.cells.iter().filter(|c| c[0] == AGENT).count(), 1);
            assert_eq!(out, step(&s, Action::from_id(*a).unwrap()).unwrap());
            s = out.state;
        }
    }

    #[test]
    fn observation_channels() {
        let goal = Goal::new(Article::A, 2, BALL);
        let s = state_with(&[((3, 4), Cell::object(BALL, 2))], (2, 2), 2, goal);
        let obs = encode_observation(&s);
        assert_eq!(obs.cells[3 * GRID + 4], [3, 2, 0]);
        assert_eq!(obs.cells[GRID + 1], [0, 0, 0]);
        assert_eq!(obs.cells[0], [1, 0, 0]);
        assert_eq!(obs.cells[2 * GRID + 2], [5, 0, 0]);
        assert_eq!(obs.direction, 2);
        assert_eq!(obs, encode_observation(&s));
        assert_eq!(FactoredGrid::from_bytes(&obs.to_bytes()), Some(obs));
    }

    #[test]
    fn goal_cells_marks_matches() {
        let goal = Goal::new(Article::A, 2, BALL);
        let s = state_with(
            &[((3, 4), Cell::object(BALL, 2)), ((5, 5), Cell::object(BALL, 2)), ((1, 1), Cell::object(BOX, 2))],
            (2, 2),
            0,
            goal,
        );
        let mask = goal_cells(&s, goal);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 2);
        assert!(mask[3 * GRID + 4] && mask[5 * GRID + 5]);
        let one = goal_cells(&s, Goal::new(Article::The, 2, BOX));
        assert_eq!(one.iter().filter(|&&m| m).count(), 1);
        assert!(one[GRID + 1]);
        for seed in 0..200 {
            let s = reset(seed, &EnvConfig::default()).unwrap();
            assert!(goal_cells(&s, s.goal).iter().any(|&m| m));
        }
    }

    #[test]
    fn instructions_biject_with_goals() {
        assert_eq!(VOCAB_SIZE, 13);
        let red_ball = goal_to_instruction(Goal::new(Article::The, 2, BALL));
        assert_eq!(red_ball.words(), vec!["go", "to", "the", "red", "ball"]);
        let mut seen = std::collections::HashSet::new();
        for g in Goal::all() {
            let ins = goal_to_instruction(g);
            assert_eq!(ins.to_goal().unwrap(), g);
            assert_eq!(goal_to_instruction(ins.to_goal().unwrap()), ins);
            assert_eq!(Goal::from_index(g.index()), g);
            assert!(seen.insert(ins));
        }
        assert_eq!(seen.len(), NUM_GOALS);
        assert!(Instruction([0, 1, 2, 10, 4]).to_goal().is_err());
    }

    #[test]
    fn config_validation() {
        let cfg = EnvConfig {
            num_objects: 36,
            ..Default::default()
        };
        assert!(reset(0, &cfg).is_err());
        let cfg = EnvConfig {
            num_objects: 35,
            ..Default::default()
        };
        assert!(reset(0, &cfg).is_ok());
    }
}
