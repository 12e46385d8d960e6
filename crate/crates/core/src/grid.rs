//! The `FindGoal` environment.
//!
//! An `L`×`L` grid with one goal tile, a configurable number of obstacle
//! tiles, and `N` agents. Each agent sees an occluded `M`×`M` window centered
//! on its own cell and may broadcast one discrete symbol per step. Agents
//! move synchronously under a joint action; an agent that enters the goal
//! cell receives reward 1 exactly once and stops acting.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding;

/// Grid cell coordinates as (row, col).
pub type Cell = (usize, usize);

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid environment config: {0}")]
    Config(String),
    #[error("cannot place all entities: {0}")]
    Placement(String),
    #[error("cell ({0}, {1}) out of bounds for grid side {2}")]
    Bounds(usize, usize, usize),
    #[error("agent id {0} out of range for {1} agents")]
    AgentId(usize, usize),
    #[error("probability {0} outside [0, 1]")]
    Probability(f64),
    #[error("step called on a finished episode")]
    EpisodeOver,
}

/// State of one grid location as seen by an agent.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash, Serialize, Deserialize)]
pub enum CellState {
    /// An obstacle is sensed at the location.
    Occupied,
    /// The location is obstacle-free.
    Unoccupied,
    /// The location holds the goal.
    Destination,
    /// The location is in a blind spot (occluded or noise-erased).
    Unknown,
}

impl CellState {
    pub const COUNT: usize = 4;
}

/// One of the five navigation actions.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Stay,
}

impl Action {
    pub const COUNT: usize = 5;

    pub fn all() -> [Action; 5] {
        [Action::Up, Action::Down, Action::Left, Action::Right, Action::Stay]
    }

    pub fn index(self) -> usize {
        match self {
            Action::Up => 0,
            Action::Down => 1,
            Action::Left => 2,
            Action::Right => 3,
            Action::Stay => 4,
        }
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::all().get(i).copied()
    }

    /// Row/col delta of the move.
    fn delta(self) -> (isize, isize) {
        match self {
            Action::Up => (-1, 0),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
            Action::Right => (0, 1),
            Action::Stay => (0, 0),
        }
    }
}

/// A communication token, or the reserved null token for an erased or
/// absent message.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Symbol(Option<u16>);

impl Symbol {
    pub const NULL: Symbol = Symbol(None);

    pub fn token(index: u16) -> Symbol {
        Symbol(Some(index))
    }

    pub fn is_null(self) -> bool {
        self.0.is_none()
    }

    pub fn index(self) -> Option<u16> {
        self.0
    }

    /// Row of the symbol embedding table: 0 is reserved for null, token `i`
    /// maps to row `i + 1`.
    pub fn embed_row(self) -> usize {
        match self.0 {
            None => 0,
            Some(i) => i as usize + 1,
        }
    }
}

/// Ground-truth map: obstacles, free space, and exactly one goal cell.
/// `Unknown` never appears here; it exists only in observations.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct GridMap {
    size: usize,
    cells: Vec<CellState>,
    goal: Cell,
}

impl GridMap {
    /// Builds a map from an obstacle list and a goal position.
    pub fn new(size: usize, obstacles: &[Cell], goal: Cell) -> Result<GridMap, GridError> {
        let mut cells = vec![CellState::Unoccupied; size * size];
        if goal.0 >= size || goal.1 >= size {
            return Err(GridError::Bounds(goal.0, goal.1, size));
        }
        for &(r, c) in obstacles {
            if r >= size || c >= size {
                return Err(GridError::Bounds(r, c, size));
            }
            if (r, c) == goal {
                return Err(GridError::Placement("obstacle on goal cell".into()));
            }
            cells[r * size + c] = CellState::Occupied;
        }
        cells[goal.0 * size + goal.1] = CellState::Destination;
        Ok(GridMap { size, cells, goal })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn goal(&self) -> Cell {
        self.goal
    }

    pub fn in_bounds(&self, r: isize, c: isize) -> bool {
        r >= 0 && c >= 0 && (r as usize) < self.size && (c as usize) < self.size
    }

    pub fn cell(&self, r: usize, c: usize) -> CellState {
        self.cells[r * self.size + c]
    }

    pub fn is_occupied(&self, r: usize, c: usize) -> bool {
        self.cell(r, c) == CellState::Occupied
    }

    pub fn obstacle_count(&self) -> usize {
        self.cells.iter().filter(|&&s| s == CellState::Occupied).count()
    }
}

/// How initial agent positions are constrained at reset.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpawnRule {
    /// Uniform over remaining empty cells, no visibility constraint.
    #[default]
    Any,
    /// Re-draw layouts until at most one agent has the goal inside its
    /// (occlusion-checked) field of view.
    GoalSeenByAtMostOne,
}

/// Environment configuration.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// Grid side length L.
    pub grid_side: usize,
    /// Field-of-view side length M (a power of two, M < L).
    pub fov_side: usize,
    /// Number of agents N.
    pub agents: usize,
    /// Number of obstacle tiles placed at reset.
    pub obstacle_count: usize,
    /// Alternative parameterization: obstacle density over the grid. When
    /// set, it overrides `obstacle_count` with ⌊density·L²⌋.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub obstacle_density: Option<f64>,
    /// Maximum episode length T.
    pub max_steps: usize,
    /// Spawn constraint.
    pub spawn_rule: SpawnRule,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            grid_side: 15,
            fov_side: 8,
            agents: 2,
            obstacle_count: 25,
            obstacle_density: None,
            max_steps: 1024,
            spawn_rule: SpawnRule::Any,
        }
    }
}

impl EnvConfig {
    /// Applies the density parameterization, replacing the obstacle count.
    pub fn resolve_density(mut self) -> Result<EnvConfig, GridError> {
        if let Some(d) = self.obstacle_density {
            if !(0.0..=1.0).contains(&d) {
                return Err(GridError::Config(format!("obstacle density {d} outside [0, 1]")));
            }
            self.obstacle_count = EnvConfig::obstacles_from_density(self.grid_side, d);
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        let l = self.grid_side;
        if l == 0 || self.agents == 0 || self.max_steps == 0 {
            return Err(GridError::Config("grid side, agents and max steps must be positive".into()));
        }
        if let Some(d) = self.obstacle_density {
            if !(0.0..=1.0).contains(&d) {
                return Err(GridError::Config(format!("obstacle density {d} outside [0, 1]")));
            }
        }
        if !self.fov_side.is_power_of_two() || self.fov_side < 2 {
            return Err(GridError::Config(format!(
                "fov side {} must be a power of two >= 2",
                self.fov_side
            )));
        }
        if self.fov_side >= l {
            return Err(GridError::Config(format!(
                "fov side {} must be smaller than grid side {}",
                self.fov_side, l
            )));
        }
        if self.obstacle_count + 1 + self.agents > l * l {
            return Err(GridError::Config(format!(
                "{} obstacles do not leave room for goal and {} agents on a {}x{} grid",
                self.obstacle_count, self.agents, l, l
            )));
        }
        Ok(())
    }

    /// Obstacle count implied by a density over the full grid, as an
    /// alternative parameterization.
    pub fn obstacles_from_density(grid_side: usize, density: f64) -> usize {
        ((grid_side * grid_side) as f64 * density).floor() as usize
    }
}

/// Full environment state: map, agent positions, done flags, step counter.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct EnvState {
    pub config: EnvConfig,
    pub map: GridMap,
    pub agent_pos: Vec<Cell>,
    pub agent_done: Vec<bool>,
    pub t: usize,
}

/// Occluded M×M window centered (per the even-window convention) on an
/// agent's cell.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Observation {
    fov_side: usize,
    window: Vec<CellState>,
    /// Agent location on the global grid.
    pub anchor: Cell,
}

impl Observation {
    pub fn new(fov_side: usize, window: Vec<CellState>, anchor: Cell) -> Observation {
        assert_eq!(window.len(), fov_side * fov_side);
        Observation { fov_side, window, anchor }
    }

    pub fn side(&self) -> usize {
        self.fov_side
    }

    pub fn cell(&self, r: usize, c: usize) -> CellState {
        self.window[r * self.fov_side + c]
    }

    pub fn cells(&self) -> &[CellState] {
        &self.window
    }
}

/// Per-step rewards and termination flags.
#[derive(Clone, PartialEq, Debug)]
pub struct StepResult {
    pub rewards: Vec<f64>,
    pub done: bool,
    pub per_agent_done: Vec<bool>,
}

/// Samples a fresh episode layout: goal first, then obstacles, then agents,
/// each uniform over the remaining cells.
pub fn reset(config: &EnvConfig, seed: u64) -> Result<EnvState, GridError> {
    let mut rng = seeding::stream_rng(seed, "env-reset", 0);
    reset_with_rng(config, &mut rng)
}

/// As [`reset`] but drawing from a caller-supplied stream.
pub fn reset_with_rng<R: Rng>(config: &EnvConfig, rng: &mut R) -> Result<EnvState, GridError> {
    config.validate()?;
    let l = config.grid_side;
    // Rejection loop for the spawn constraint; each attempt redraws the
    // whole layout from the same stream so results stay reproducible.
    for _ in 0..10_000 {
        let mut pool: Vec<Cell> = (0..l).flat_map(|r| (0..l).map(move |c| (r, c))).collect();
        pool.shuffle(rng);
        let goal = pool.pop().expect("grid is non-empty");
        let obstacles: Vec<Cell> = pool.split_off(pool.len() - config.obstacle_count);
        let map = GridMap::new(l, &obstacles, goal)?;
        if pool.len() < config.agents {
            return Err(GridError::Placement("not enough empty cells for agents".into()));
        }
        let agent_pos: Vec<Cell> = pool.split_off(pool.len() - config.agents);
        let state = EnvState {
            config: *config,
            map,
            agent_pos,
            agent_done: vec![false; config.agents],
            t: 0,
        };
        let ok = match config.spawn_rule {
            SpawnRule::Any => true,
            SpawnRule::GoalSeenByAtMostOne => {
                (0..config.agents).filter(|&n| goal_visible(&state, n)).count() <= 1
            }
        };
        if ok {
            return Ok(state);
        }
    }
    Err(GridError::Placement("spawn constraint not satisfiable".into()))
}

/// True iff the goal lies inside agent `n`'s window and has a clear sight
/// line from the agent's cell.
pub fn goal_visible(state: &EnvState, agent_id: usize) -> bool {
    let (gr, gc) = state.map.goal();
    let (r, c) = state.agent_pos[agent_id];
    let m = state.config.fov_side as isize;
    let (top, left) = (r as isize - m / 2, c as isize - m / 2);
    let within = (gr as isize) >= top
        && (gr as isize) < top + m
        && (gc as isize) >= left
        && (gc as isize) < left + m;
    within && line_of_sight(&state.map, (r, c), (gr, gc)).unwrap_or(false)
}

/// Walks the integer (Bresenham) line between the two cell centers and
/// reports whether no strictly intermediate cell is occupied. The target
/// being occupied does not hide itself; diagonal steps pass between cells.
pub fn line_of_sight(map: &GridMap, from: Cell, to: Cell) -> Result<bool, GridError> {
    for &(r, c) in &[from, to] {
        if r >= map.size() || c >= map.size() {
            return Err(GridError::Bounds(r, c, map.size()));
        }
    }
    let (mut r, mut c) = (from.0 as isize, from.1 as isize);
    let (r1, c1) = (to.0 as isize, to.1 as isize);
    let dr = (r1 - r).abs();
    let dc = -(c1 - c).abs();
    let sr = if r < r1 { 1 } else { -1 };
    let sc = if c < c1 { 1 } else { -1 };
    let mut err = dr + dc;
    loop {
        if (r, c) != (from.0 as isize, from.1 as isize)
            && (r, c) != (r1, c1)
            && map.is_occupied(r as usize, c as usize)
        {
            return Ok(false);
        }
        if (r, c) == (r1, c1) {
            return Ok(true);
        }
        let e2 = 2 * err;
        if e2 >= dc {
            err += dc;
            r += sr;
        }
        if e2 <= dr {
            err += dr;
            c += sc;
        }
    }
}

/// Renders agent `n`'s occluded window. The window spans rows
/// `[r - M/2, r + M/2)` and columns `[c - M/2, c + M/2)` so the agent's own
/// cell sits at window index `(M/2, M/2)`. Cells outside the grid read as
/// `Occupied` (the border is impassable); in-bounds cells without a sight
/// line read as `Unknown`. Agents are not rendered.
pub fn observe(state: &EnvState, agent_id: usize) -> Result<Observation, GridError> {
    if agent_id >= state.config.agents {
        return Err(GridError::AgentId(agent_id, state.config.agents));
    }
    let m = state.config.fov_side;
    let (ar, ac) = state.agent_pos[agent_id];
    let (top, left) = (ar as isize - (m / 2) as isize, ac as isize - (m / 2) as isize);
    let mut window = Vec::with_capacity(m * m);
    for wr in 0..m {
        for wc in 0..m {
            let (r, c) = (top + wr as isize, left + wc as isize);
            let cell = if !state.map.in_bounds(r, c) {
                CellState::Occupied
            } else if line_of_sight(&state.map, (ar, ac), (r as usize, c as usize))? {
                state.map.cell(r as usize, c as usize)
            } else {
                CellState::Unknown
            };
            window.push(cell);
        }
    }
    Ok(Observation::new(m, window, (ar, ac)))
}

/// Advances the world by one synchronous joint step.
///
/// Non-done agents move one cell in their action's direction; moves into
/// obstacles or off the grid are no-ops, and agents may share a cell. An
/// agent entering the goal receives reward 1 and becomes done. The episode
/// ends when every agent is done or the step counter reaches the limit.
pub fn step(state: &EnvState, joint_action: &[Action]) -> Result<(EnvState, StepResult), GridError> {
    if state.t >= state.config.max_steps || state.agent_done.iter().all(|&d| d) {
        return Err(GridError::EpisodeOver);
    }
    assert_eq!(joint_action.len(), state.config.agents, "one action per agent");
    let mut next = state.clone();
    let mut rewards = vec![0.0; state.config.agents];
    for (n, action) in joint_action.iter().enumerate() {
        if next.agent_done[n] {
            continue;
        }
        let (dr, dc) = action.delta();
        let (r, c) = next.agent_pos[n];
        let (nr, nc) = (r as isize + dr, c as isize + dc);
        if next.map.in_bounds(nr, nc) && !next.map.is_occupied(nr as usize, nc as usize) {
            next.agent_pos[n] = (nr as usize, nc as usize);
        }
        if next.agent_pos[n] == next.map.goal() {
            rewards[n] = 1.0;
            next.agent_done[n] = true;
        }
    }
    next.t += 1;
    let done = next.agent_done.iter().all(|&d| d) || next.t >= next.config.max_steps;
    let result = StepResult {
        rewards,
        done,
        per_agent_done: next.agent_done.clone(),
    };
    Ok((next, result))
}

/// Independently turns each `Occupied`/`Unoccupied` cell into `Unknown` with
/// probability `alpha`. `Destination` and `Unknown` cells are never altered.
pub fn apply_noise<R: Rng>(
    obs: &Observation,
    alpha: f64,
    rng: &mut R,
) -> Result<Observation, GridError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(GridError::Probability(alpha));
    }
    let window = obs
        .window
        .iter()
        .map(|&s| match s {
            CellState::Occupied | CellState::Unoccupied if rng.random::<f64>() < alpha => {
                CellState::Unknown
            }
            other => other,
        })
        .collect();
    Ok(Observation::new(obs.fov_side, window, obs.anchor))
}

/// Independently replaces each symbol by the null token with probability
/// `beta`.
pub fn erase_symbols<R: Rng>(
    symbols: &[Symbol],
    beta: f64,
    rng: &mut R,
) -> Result<Vec<Symbol>, GridError> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(GridError::Probability(beta));
    }
    Ok(symbols
        .iter()
        .map(|&s| if rng.random::<f64>() < beta { Symbol::NULL } else { s })
        .collect())
}

/// One line of an episode trace: everything needed to replay a step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    pub positions: Vec<Cell>,
    pub actions: Vec<usize>,
    pub symbols: Vec<Option<u16>>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
}

/// Line-delimited episode trace for replay and debugging.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodeTrace {
    pub records: Vec<TraceRecord>,
}

impl EpisodeTrace {
    pub fn push(&mut self, record: TraceRecord) {
        self.records.push(record);
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("trace serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<EpisodeTrace, serde_json::Error> {
        let mut records = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            records.push(serde_json::from_str(line)?);
        }
        Ok(EpisodeTrace { records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> EnvConfig {
        EnvConfig {
            grid_side: 15,
            fov_side: 8,
            agents: 2,
            obstacle_count: 25,
            obstacle_density: None,
            max_steps: 1024,
            spawn_rule: SpawnRule::Any,
        }
    }

    #[test]
    fn reset_places_everything() {
        let state = reset(&small_config(), 7).unwrap();
        assert_eq!(state.map.obstacle_count(), 25);
        let dest = (0..15)
            .flat_map(|r| (0..15).map(move |c| (r, c)))
            .filter(|&(r, c)| state.map.cell(r, c) == CellState::Destination)
            .count();
        assert_eq!(dest, 1);
        assert_eq!(state.agent_pos.len(), 2);
        assert_ne!(state.agent_pos[0], state.agent_pos[1]);
        for &(r, c) in &state.agent_pos {
            assert_ne!(state.map.cell(r, c), CellState::Occupied);
            assert_ne!((r, c), state.map.goal());
        }
        assert_eq!(state.t, 0);
        assert!(state.agent_done.iter().all(|&d| !d));
    }

    #[test]
    fn reset_tiny_grid() {
        let config = EnvConfig {
            grid_side: 3,
            fov_side: 2,
            agents: 1,
            obstacle_count: 0,
            obstacle_density: None,
            max_steps: 16,
            spawn_rule: SpawnRule::Any,
        };
        let state = reset(&config, 0).unwrap();
        assert_eq!(state.map.obstacle_count(), 0);
        assert_eq!(state.agent_pos.len(), 1);
    }

    #[test]
    fn reset_is_deterministic() {
        let a = reset(&small_config(), 123).unwrap();
        let b = reset(&small_config(), 123).unwrap();
        assert_eq!(a, b);
        let c = reset(&small_config(), 124).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn reset_rejects_overfull_grid() {
        let config = EnvConfig {
            grid_side: 3,
            fov_side: 2,
            agents: 1,
            obstacle_count: 8,
            obstacle_density: None,
            max_steps: 16,
            spawn_rule: SpawnRule::Any,
        };
        assert!(matches!(reset(&config, 0), Err(GridError::Config(_))));
    }

    #[test]
    fn constrained_spawn_limits_goal_visibility() {
        let config = EnvConfig {
            grid_side: 9,
            fov_side: 4,
            agents: 2,
            obstacle_count: 6,
            obstacle_density: None,
            max_steps: 64,
            spawn_rule: SpawnRule::GoalSeenByAtMostOne,
        };
        for seed in 0..50 {
            let state = reset(&config, seed).unwrap();
            let seers = (0..2).filter(|&n| goal_visible(&state, n)).count();
            assert!(seers <= 1, "seed {seed}: {seers} agents see the goal");
        }
    }

    #[test]
    fn line_of_sight_basics() {
        let map = GridMap::new(5, &[(0, 1)], (4, 4)).unwrap();
        assert!(line_of_sight(&map, (0, 0), (0, 0)).unwrap());
        assert!(!line_of_sight(&map, (0, 0), (0, 2)).unwrap());
        // An obstacle is itself visible.
        assert!(line_of_sight(&map, (0, 0), (0, 1)).unwrap());
        assert!(line_of_sight(&map, (2, 0), (2, 4)).unwrap());
        assert!(matches!(
            line_of_sight(&map, (0, 0), (5, 0)),
            Err(GridError::Bounds(..))
        ));
    }

    #[test]
    fn observe_open_map_has_no_unknown() {
        let config = EnvConfig {
            grid_side: 15,
            fov_side: 8,
            agents: 1,
            obstacle_count: 0,
            obstacle_density: None,
            max_steps: 8,
            spawn_rule: SpawnRule::Any,
        };
        let mut state = reset(&config, 3).unwrap();
        state.agent_pos[0] = (7, 7);
        let obs = observe(&state, 0).unwrap();
        assert!(obs.cells().iter().all(|&s| s != CellState::Unknown));
        // Own cell sits at (M/2, M/2).
        assert_ne!(obs.cell(4, 4), CellState::Occupied);
    }

    #[test]
    fn observe_wall_blocks_row_above() {
        // Wall across the full row above the agent: everything beyond it is
        // a blind spot.
        let wall: Vec<Cell> = (0..15).map(|c| (6, c)).collect();
        let map = GridMap::new(15, &wall, (14, 14)).unwrap();
        let config = small_config();
        let state = EnvState {
            config,
            map,
            agent_pos: vec![(7, 7), (14, 0)],
            agent_done: vec![false, false],
            t: 0,
        };
        let obs = observe(&state, 0).unwrap();
        // Window rows 0..3 map to grid rows 3..6; all strictly above the wall.
        for wr in 0..3 {
            for wc in 0..8 {
                assert_eq!(obs.cell(wr, wc), CellState::Unknown, "window ({wr},{wc})");
            }
        }
        // The wall itself (window row 3) is visible where the sight line is
        // direct; straight up is.
        assert_eq!(obs.cell(3, 4), CellState::Occupied);
    }

    #[test]
    fn observe_out_of_bounds_fills_occupied() {
        let config = EnvConfig {
            grid_side: 15,
            fov_side: 8,
            agents: 1,
            obstacle_count: 0,
            obstacle_density: None,
            max_steps: 8,
            spawn_rule: SpawnRule::Any,
        };
        let mut state = reset(&config, 3).unwrap();
        state.agent_pos[0] = (0, 0);
        let obs = observe(&state, 0).unwrap();
        // Window rows 0..4 and cols 0..4 are off-grid.
        for wr in 0..4 {
            for wc in 0..8 {
                assert_eq!(obs.cell(wr, wc), CellState::Occupied);
            }
        }
        assert!(matches!(observe(&state, 1), Err(GridError::AgentId(1, 1))));
    }

    /// Brute-force oracle: recompute visibility for every window cell and
    /// count destination cells.
    #[test]
    fn observe_goal_in_fov_shows_one_destination() {
        let map = GridMap::new(15, &[(10, 10)], (5, 7)).unwrap();
        let config = small_config();
        let state = EnvState {
            config,
            map: map.clone(),
            agent_pos: vec![(7, 7), (14, 0)],
            agent_done: vec![false, false],
            t: 0,
        };
        assert!(line_of_sight(&map, (7, 7), (5, 7)).unwrap());
        let obs = observe(&state, 0).unwrap();
        let dest_in_window = obs
            .cells()
            .iter()
            .filter(|&&s| s == CellState::Destination)
            .count();
        assert_eq!(dest_in_window, 1);
        // Oracle: per-cell recomputation must agree with the rendered window.
        for wr in 0..8 {
            for wc in 0..8 {
                let (r, c) = (7 + wr as isize - 4, 7 + wc as isize - 4);
                let expect = if !map.in_bounds(r, c) {
                    CellState::Occupied
                } else if line_of_sight(&map, (7, 7), (r as usize, c as usize)).unwrap() {
                    map.cell(r as usize, c as usize)
                } else {
                    CellState::Unknown
                };
                assert_eq!(obs.cell(wr, wc), expect);
            }
        }
    }

    #[test]
    fn step_moves_and_blocks() {
        let map = GridMap::new(15, &[(4, 5)], (0, 0)).unwrap();
        let config = EnvConfig { agents: 1, ..small_config() };
        let state = EnvState {
            config,
            map,
            agent_pos: vec![(5, 5)],
            agent_done: vec![false],
            t: 0,
        };
        let (next, result) = step(&state, &[Action::Up]).unwrap();
        // (4,5) is occupied: no move.
        assert_eq!(next.agent_pos[0], (5, 5));
        assert_eq!(result.rewards[0], 0.0);
        let (next, result) = step(&next, &[Action::Down]).unwrap();
        assert_eq!(next.agent_pos[0], (6, 5));
        assert_eq!(result.rewards[0], 0.0);
        assert_eq!(next.t, 2);
    }

    #[test]
    fn step_goal_gives_reward_once() {
        let map = GridMap::new(15, &[], (4, 5)).unwrap();
        let config = EnvConfig { agents: 1, ..small_config() };
        let state = EnvState {
            config,
            map,
            agent_pos: vec![(5, 5)],
            agent_done: vec![false],
            t: 0,
        };
        let (next, result) = step(&state, &[Action::Up]).unwrap();
        assert_eq!(next.agent_pos[0], (4, 5));
        assert_eq!(result.rewards[0], 1.0);
        assert!(result.per_agent_done[0]);
        assert!(result.done);
        assert!(matches!(step(&next, &[Action::Stay]), Err(GridError::EpisodeOver)));
    }

    #[test]
    fn step_ends_at_max_steps() {
        let map = GridMap::new(15, &[], (0, 0)).unwrap();
        let config = EnvConfig { agents: 1, max_steps: 2, ..small_config() };
        let mut state = EnvState {
            config,
            map,
            agent_pos: vec![(5, 5)],
            agent_done: vec![false],
            t: 0,
        };
        let (s, r) = step(&state, &[Action::Stay]).unwrap();
        assert!(!r.done);
        state = s;
        let (_, r) = step(&state, &[Action::Stay]).unwrap();
        assert!(r.done);
    }

    #[test]
    fn noise_identity_and_saturation() {
        let config = small_config();
        let state = reset(&config, 11).unwrap();
        let obs = observe(&state, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(apply_noise(&obs, 0.0, &mut rng).unwrap(), obs);
        let noisy = apply_noise(&obs, 1.0, &mut rng).unwrap();
        for (a, b) in obs.cells().iter().zip(noisy.cells()) {
            match a {
                CellState::Occupied | CellState::Unoccupied => {
                    assert_eq!(*b, CellState::Unknown)
                }
                other => assert_eq!(b, other),
            }
        }
        assert!(apply_noise(&obs, 1.5, &mut rng).is_err());
    }

    /// Monte-Carlo oracle: the empirical flip rate over many trials
    /// estimates alpha.
    #[test]
    fn noise_rate_matches_alpha() {
        let window = vec![CellState::Unoccupied; 64];
        let obs = Observation::new(8, window, (0, 0));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let trials = 10_000;
        let mut flipped = 0usize;
        for _ in 0..trials {
            let noisy = apply_noise(&obs, 0.5, &mut rng).unwrap();
            flipped += noisy.cells().iter().filter(|&&s| s == CellState::Unknown).count();
        }
        let rate = flipped as f64 / (trials * 64) as f64;
        assert!((rate - 0.5).abs() < 0.02, "rate {rate}");
    }

    #[test]
    fn erasure_identity_saturation_and_rate() {
        let symbols = vec![Symbol::token(3); 10];
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        assert_eq!(erase_symbols(&symbols, 0.0, &mut rng).unwrap(), symbols);
        assert!(erase_symbols(&symbols, 1.0, &mut rng)
            .unwrap()
            .iter()
            .all(|s| s.is_null()));
        let trials = 100_000;
        let one = [Symbol::token(1)];
        let mut erased = 0usize;
        for _ in 0..trials {
            if erase_symbols(&one, 0.3, &mut rng).unwrap()[0].is_null() {
                erased += 1;
            }
        }
        let rate = erased as f64 / trials as f64;
        assert!((rate - 0.3).abs() < 0.01, "rate {rate}");
        assert!(erase_symbols(&one, -0.1, &mut rng).is_err());
    }

    #[test]
    fn episode_reward_accounting() {
        // Random rollouts: per-agent episode reward stays in {0, 1} and
        // length never exceeds the limit.
        let config = EnvConfig {
            grid_side: 7,
            fov_side: 4,
            agents: 2,
            obstacle_count: 4,
            obstacle_density: None,
            max_steps: 60,
            spawn_rule: SpawnRule::Any,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for seed in 0..20 {
            let mut state = reset(&config, seed).unwrap();
            let mut totals = vec![0.0; 2];
            let mut steps = 0;
            loop {
                let actions: Vec<Action> = (0..2)
                    .map(|_| Action::from_index(rng.random_range(0..5)).unwrap())
                    .collect();
                let (next, result) = step(&state, &actions).unwrap();
                for (t, r) in totals.iter_mut().zip(&result.rewards) {
                    *t += r;
                }
                steps += 1;
                state = next;
                if result.done {
                    break;
                }
            }
            assert!(steps <= config.max_steps);
            for t in totals {
                assert!(t == 0.0 || t == 1.0);
            }
        }
    }

    #[test]
    fn symbol_embedding_rows() {
        assert_eq!(Symbol::NULL.embed_row(), 0);
        assert_eq!(Symbol::token(0).embed_row(), 1);
        assert_eq!(Symbol::token(9).embed_row(), 10);
    }

    #[test]
    fn trace_round_trips() {
        let mut trace = EpisodeTrace::default();
        trace.push(TraceRecord {
            t: 0,
            positions: vec![(1, 2), (3, 4)],
            actions: vec![0, 4],
            symbols: vec![Some(7), None],
            rewards: vec![0.0, 1.0],
            dones: vec![false, true],
        });
        let text = trace.to_jsonl();
        assert_eq!(EpisodeTrace::from_jsonl(&text).unwrap(), trace);
    }
}
