//! Deterministic grid mazes and an exact breadth-first reachability oracle.
//!
//! The oracle works on ground-truth [`State`]s; models only ever see
//! [`Observation`] feature vectors.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A grid cell occupied by the agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct State {
    pub row: i32,
    pub col: i32,
}

impl State {
    pub const fn new(row: i32, col: i32) -> Self {
        Self { row, col }
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.row, self.col)
    }
}

impl FromStr for State {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (r, c) = s
            .trim()
            .split_once(',')
            .ok_or_else(|| Error::InvalidGrid(format!("cell '{s}' is not 'r,c'")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<i32>()
                .map_err(|_| Error::InvalidGrid(format!("cell '{s}' is not 'r,c'")))
        };
        Ok(State::new(parse(r)?, parse(c)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Stay,
}

impl Action {
    pub const COUNT: usize = 5;
    pub const ALL: [Action; 5] = [
        Action::Up,
        Action::Down,
        Action::Left,
        Action::Right,
        Action::Stay,
    ];

    pub fn from_id(id: u8) -> Result<Self> {
        Self::ALL
            .get(id as usize)
            .copied()
            .ok_or(Error::InvalidAction(id))
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn delta(self) -> (i32, i32) {
        match self {
            Action::Up => (-1, 0),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
            Action::Right => (0, 1),
            Action::Stay => (0, 0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Up => "up",
            Action::Down => "down",
            Action::Left => "left",
            Action::Right => "right",
            Action::Stay => "stay",
        }
    }
}

/// Feature vector seen by the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub features: Vec<f64>,
}

impl Observation {
    pub fn dim(&self) -> usize {
        self.features.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridSpec {
    pub name: String,
    pub width: i32,
    pub height: i32,
    /// Impassable cells.
    pub blocked: BTreeSet<State>,
    /// Openings cut into a wall line; always free.
    pub doors: BTreeSet<State>,
    /// Append the static blocked-cell mask to every observation.
    pub layout_in_obs: bool,
}

impl GridSpec {
    pub fn open(width: i32, height: i32) -> Self {
        Self {
            name: "open".into(),
            width,
            height,
            blocked: BTreeSet::new(),
            doors: BTreeSet::new(),
            layout_in_obs: false,
        }
    }

    /// 9x9 with a vertical wall down column 4 and a single door in its middle.
    pub fn two_room() -> Self {
        Self::with_wall_line("tworoom", (0..9).map(|r| State::new(r, 4)), [State::new(4, 4)])
    }

    /// 9x9 with a horizontal wall along row 4 and one door near the left edge,
    /// so that straight-line proximity across the wall is misleading.
    pub fn wall() -> Self {
        Self::with_wall_line("wall", (0..9).map(|c| State::new(4, c)), [State::new(4, 1)])
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "tworoom" => Ok(Self::two_room()),
            "wall" => Ok(Self::wall()),
            "open" | "open5" => Ok(Self::open(5, 5)),
            other => Err(Error::InvalidGrid(format!("unknown environment '{other}'"))),
        }
    }

    fn with_wall_line(
        name: &str,
        line: impl IntoIterator<Item = State>,
        doors: impl IntoIterator<Item = State>,
    ) -> Self {
        let doors: BTreeSet<State> = doors.into_iter().collect();
        let blocked = line.into_iter().filter(|c| !doors.contains(c)).collect();
        let spec = Self {
            name: name.into(),
            width: 9,
            height: 9,
            blocked,
            doors,
            layout_in_obs: false,
        };
        debug_assert!(spec.validate().is_ok());
        spec
    }

    pub fn in_bounds(&self, s: State) -> bool {
        s.row >= 0 && s.row < self.height && s.col >= 0 && s.col < self.width
    }

    pub fn is_free(&self, s: State) -> bool {
        self.in_bounds(s) && !self.blocked.contains(&s)
    }

    pub fn check_state(&self, s: State) -> Result<()> {
        if self.is_free(s) {
            Ok(())
        } else {
            Err(Error::StateOffGrid(s.row, s.col))
        }
    }

    pub fn n_cells(&self) -> usize {
        (self.width * self.height) as usize
    }

    pub fn cell_index(&self, s: State) -> usize {
        (s.row * self.width + s.col) as usize
    }

    pub fn cell_at(&self, index: usize) -> State {
        let index = index as i32;
        State::new(index / self.width, index % self.width)
    }

    /// Free cells in row-major order.
    pub fn free_cells(&self) -> Vec<State> {
        (0..self.n_cells())
            .map(|i| self.cell_at(i))
            .filter(|&s| self.is_free(s))
            .collect()
    }

    pub fn obs_dim(&self) -> usize {
        if self.layout_in_obs {
            2 * self.n_cells()
        } else {
            self.n_cells()
        }
    }

    /// Checks the structural invariants: doors are free, and all free cells
    /// form one connected component.
    pub fn validate(&self) -> Result<()> {
        if self.width <= 0 || self.height <= 0 {
            return Err(Error::InvalidGrid("non-positive dimensions".into()));
        }
        if let Some(d) = self.doors.iter().find(|d| self.blocked.contains(d)) {
            return Err(Error::InvalidGrid(format!("door {d} is blocked")));
        }
        if let Some(c) = self
            .blocked
            .iter()
            .chain(self.doors.iter())
            .find(|c| !self.in_bounds(**c))
        {
            return Err(Error::InvalidGrid(format!("cell {c} is outside the grid")));
        }
        let free = self.free_cells();
        let Some(&first) = free.first() else {
            return Err(Error::InvalidGrid("no free cells".into()));
        };
        let dist = bfs_from(self, first);
        if dist.iter().zip(0..).any(|(d, i)| d.is_none() && self.is_free(self.cell_at(i))) {
            return Err(Error::InvalidGrid("free cells are not connected".into()));
        }
        Ok(())
    }

    /// Structured-text form: one `key = value` per line, cells as `"r,c"`
    /// separated by spaces.
    pub fn to_text(&self) -> String {
        let cells = |set: &BTreeSet<State>| {
            set.iter()
                .map(|c| format!("\"{c}\""))
                .collect::<Vec<_>>()
                .join(" ")
        };
        format!(
            "name = {}\nwidth = {}\nheight = {}\nblocked = [{}]\ndoors = [{}]\nlayout_in_obs = {}\n",
            self.name,
            self.width,
            self.height,
            cells(&self.blocked),
            cells(&self.doors),
            self.layout_in_obs
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut spec = GridSpec::open(0, 0);
        spec.name.clear();
        let mut seen = BTreeSet::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidGrid(format!("malformed line '{line}'")))?;
            let (key, value) = (key.trim(), value.trim());
            let int = |v: &str| {
                v.parse::<i32>()
                    .map_err(|_| Error::InvalidGrid(format!("bad integer for {key}: '{v}'")))
            };
            match key {
                "name" => spec.name = value.to_string(),
                "width" => spec.width = int(value)?,
                "height" => spec.height = int(value)?,
                "blocked" => spec.blocked = parse_cell_list(value)?,
                "doors" => spec.doors = parse_cell_list(value)?,
                "layout_in_obs" => {
                    spec.layout_in_obs = value
                        .parse()
                        .map_err(|_| Error::InvalidGrid(format!("bad bool '{value}'")))?
                }
                other => return Err(Error::InvalidGrid(format!("unknown key '{other}'"))),
            }
            seen.insert(key.to_string());
        }
        for required in ["name", "width", "height", "blocked", "doors"] {
            if !seen.contains(required) {
                return Err(Error::InvalidGrid(format!("missing key '{required}'")));
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn parse_cell_list(value: &str) -> Result<BTreeSet<State>> {
    let inner = value
        .strip_prefix('[')
        .and_then(|v| v.strip_suffix(']'))
        .ok_or_else(|| Error::InvalidGrid(format!("expected [..] list, got '{value}'")))?;
    inner
        .split('"')
        .map(str::trim)
        .filter(|t| !t.is_empty() && *t != ",")
        .map(State::from_str)
        .collect()
}

/// Blocked moves and moves off the grid leave the state unchanged.
pub fn step(spec: &GridSpec, s: State, a: Action) -> Result<State> {
    spec.check_state(s)?;
    Ok(step_unchecked(spec, s, a))
}

pub(crate) fn step_unchecked(spec: &GridSpec, s: State, a: Action) -> State {
    let (dr, dc) = a.delta();
    let next = State::new(s.row + dr, s.col + dc);
    if spec.is_free(next) {
        next
    } else {
        s
    }
}

pub fn observe(spec: &GridSpec, s: State) -> Result<Observation> {
    spec.check_state(s)?;
    let n = spec.n_cells();
    let mut features = vec![0.0; spec.obs_dim()];
    features[spec.cell_index(s)] = 1.0;
    if spec.layout_in_obs {
        for b in &spec.blocked {
            features[n + spec.cell_index(*b)] = 1.0;
        }
    }
    Ok(Observation { features })
}

fn bfs_from(spec: &GridSpec, source: State) -> Vec<Option<u32>> {
    let mut dist = vec![None; spec.n_cells()];
    if !spec.is_free(source) {
        return dist;
    }
    let mut queue = VecDeque::from([source]);
    dist[spec.cell_index(source)] = Some(0);
    while let Some(s) = queue.pop_front() {
        let d = dist[spec.cell_index(s)].unwrap_or(0);
        for a in Action::ALL {
            let next = step_unchecked(spec, s, a);
            let slot = &mut dist[spec.cell_index(next)];
            if slot.is_none() {
                *slot = Some(d + 1);
                queue.push_back(next);
            }
        }
    }
    dist
}

/// BFS hitting time from `s` to `g`; `None` when `g` is unreachable.
pub fn shortest_hitting_time(spec: &GridSpec, s: State, g: State) -> Result<Option<u32>> {
    spec.check_state(s)?;
    spec.check_state(g)?;
    Ok(bfs_from(spec, s)[spec.cell_index(g)])
}

pub fn oracle_reachable(spec: &GridSpec, s: State, g: State, h: i64) -> Result<bool> {
    if h < 0 {
        return Err(Error::NegativeBudget(h));
    }
    Ok(shortest_hitting_time(spec, s, g)?.is_some_and(|d| i64::from(d) <= h))
}

/// All-pairs hitting times, computed once per grid. Immutable after
/// construction, so shared reads from many threads are fine.
#[derive(Debug, Clone)]
pub struct Oracle {
    spec: GridSpec,
    table: Vec<Vec<Option<u32>>>,
}

impl Oracle {
    pub fn new(spec: &GridSpec) -> Self {
        let table = (0..spec.n_cells())
            .map(|i| bfs_from(spec, spec.cell_at(i)))
            .collect();
        Self {
            spec: spec.clone(),
            table,
        }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn distance(&self, s: State, g: State) -> Option<u32> {
        if !self.spec.is_free(s) || !self.spec.is_free(g) {
            return None;
        }
        self.table[self.spec.cell_index(s)][self.spec.cell_index(g)]
    }

    pub fn reachable(&self, s: State, g: State, h: i64) -> Result<bool> {
        if h < 0 {
            return Err(Error::NegativeBudget(h));
        }
        Ok(self.distance(s, g).is_some_and(|d| i64::from(d) <= h))
    }

    /// First action of some shortest path, preferring lower action ids.
    pub fn greedy_action(&self, s: State, g: State) -> Option<Action> {
        let d = self.distance(s, g)?;
        if d == 0 {
            return Some(Action::Stay);
        }
        Action::ALL
            .into_iter()
            .find(|&a| self.distance(step_unchecked(&self.spec, s, a), g) == Some(d - 1))
    }
}

/// Restricts the hitting time between sampled start and goal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GoalDistance {
    pub min: Option<u32>,
    pub max: Option<u32>,
}

impl GoalDistance {
    fn admits(&self, d: u32) -> bool {
        self.min.is_none_or(|m| d >= m) && self.max.is_none_or(|m| d <= m)
    }
}

/// Deterministic `(start, goal)` with `start != goal` and the goal reachable.
pub fn sample_episode_spec(spec: &GridSpec, seed: u64) -> Result<(State, State)> {
    sample_episode_with(&Oracle::new(spec), seed, GoalDistance::default())
}

pub fn sample_episode_with(
    oracle: &Oracle,
    seed: u64,
    distance: GoalDistance,
) -> Result<(State, State)> {
    let free = oracle.spec().free_cells();
    if free.len() < 2 {
        return Err(Error::InvalidGrid("need at least two free cells".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts = free.clone();
    starts.shuffle(&mut rng);
    for start in starts {
        let goals: Vec<State> = free
            .iter()
            .copied()
            .filter(|&g| {
                g != start
                    && oracle
                        .distance(start, g)
                        .is_some_and(|d| distance.admits(d))
            })
            .collect();
        if let Some(&goal) = goals.choose(&mut rng) {
            return Ok((start, goal));
        }
    }
    Err(Error::InvalidGrid(
        "no start/goal pair satisfies the distance constraint".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moves_into_free_cell() {
        let spec = GridSpec::open(5, 5);
        assert_eq!(
            step(&spec, State::new(2, 2), Action::Right).unwrap(),
            State::new(2, 3)
        );
    }

    #[test]
    fn blocked_move_is_noop() {
        let spec = GridSpec::two_room();
        let s = State::new(0, 3);
        assert_eq!(step(&spec, s, Action::Right).unwrap(), s);
        let corner = State::new(0, 0);
        assert_eq!(step(&spec, corner, Action::Up).unwrap(), corner);
    }

    #[test]
    fn stay_is_identity() {
        let spec = GridSpec::wall();
        for s in spec.free_cells() {
            assert_eq!(step(&spec, s, Action::Stay).unwrap(), s);
            assert_eq!(
                observe(&spec, step(&spec, s, Action::Stay).unwrap()).unwrap(),
                observe(&spec, s).unwrap()
            );
        }
    }

    #[test]
    fn off_grid_state_rejected() {
        let spec = GridSpec::wall();
        let err = step(&spec, State::new(4, 5), Action::Up).unwrap_err();
        assert!(err.to_string().contains("state off grid"));
        assert!(step(&spec, State::new(-1, 0), Action::Up).is_err());
    }

    #[test]
    fn action_ids_round_trip() {
        for a in Action::ALL {
            assert_eq!(Action::from_id(a.id()).unwrap(), a);
        }
        assert!(Action::from_id(5).is_err());
    }

    #[test]
    fn observation_is_one_hot() {
        let spec = GridSpec::open(3, 3);
        let o = observe(&spec, State::new(0, 0)).unwrap();
        assert_eq!(o.features[0], 1.0);
        assert_eq!(o.features.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn observation_with_layout_mask() {
        let mut spec = GridSpec::two_room();
        spec.layout_in_obs = true;
        let o = observe(&spec, State::new(0, 0)).unwrap();
        assert_eq!(o.dim(), 162);
        assert_eq!(o.features[..81].iter().sum::<f64>(), 1.0);
        assert_eq!(o.features[81..].iter().sum::<f64>(), 8.0);
    }

    #[test]
    fn observations_injective() {
        let spec = GridSpec::wall();
        let obs: Vec<_> = spec
            .free_cells()
            .into_iter()
            .map(|s| observe(&spec, s).unwrap())
            .collect();
        for i in 0..obs.len() {
            for j in i + 1..obs.len() {
                assert_ne!(obs[i], obs[j]);
            }
        }
    }

    #[test]
    fn hitting_time_basics() {
        let spec = GridSpec::two_room();
        let s = State::new(2, 2);
        assert_eq!(shortest_hitting_time(&spec, s, s).unwrap(), Some(0));
        assert_eq!(
            shortest_hitting_time(&spec, s, State::new(2, 3)).unwrap(),
            Some(1)
        );
        // down two, across the door at (4,4), up two
        assert_eq!(
            shortest_hitting_time(&spec, State::new(2, 3), State::new(2, 5)).unwrap(),
            Some(6)
        );
    }

    #[test]
    fn unreachable_is_none() {
        let mut spec = GridSpec::open(3, 3);
        spec.blocked = [State::new(0, 1), State::new(1, 0)].into();
        // (0,0) is sealed off; validate rejects, but the oracle still answers
        assert!(spec.validate().is_err());
        let table = bfs_from(&spec, State::new(2, 2));
        assert_eq!(table[spec.cell_index(State::new(0, 0))], None);
    }

    #[test]
    fn reachability_threshold_at_hitting_time() {
        let spec = GridSpec::wall();
        let (s, g) = (State::new(3, 7), State::new(5, 7));
        let d = shortest_hitting_time(&spec, s, g).unwrap().unwrap() as i64;
        // straight down is blocked; the detour through the door at column 1
        assert_eq!(d, 6 + 2 + 6);
        assert!(!oracle_reachable(&spec, s, g, d - 1).unwrap());
        assert!(oracle_reachable(&spec, s, g, d).unwrap());
        assert!(oracle_reachable(&spec, s, s, 0).unwrap());
        assert!(matches!(
            oracle_reachable(&spec, s, g, -1),
            Err(Error::NegativeBudget(-1))
        ));
    }

    #[test]
    fn oracle_matches_single_bfs() {
        let spec = GridSpec::two_room();
        let oracle = Oracle::new(&spec);
        for s in spec.free_cells().into_iter().step_by(7) {
            for g in spec.free_cells() {
                assert_eq!(
                    oracle.distance(s, g),
                    shortest_hitting_time(&spec, s, g).unwrap()
                );
            }
        }
    }

    #[test]
    fn greedy_action_descends() {
        let spec = GridSpec::wall();
        let oracle = Oracle::new(&spec);
        let (mut s, g) = (State::new(8, 8), State::new(0, 8));
        let d0 = oracle.distance(s, g).unwrap();
        for _ in 0..d0 {
            s = step(&spec, s, oracle.greedy_action(s, g).unwrap()).unwrap();
        }
        assert_eq!(s, g);
    }

    #[test]
    fn text_round_trip() {
        for spec in [GridSpec::two_room(), GridSpec::wall(), GridSpec::open(5, 5)] {
            let parsed = GridSpec::from_text(&spec.to_text()).unwrap();
            assert_eq!(parsed, spec);
        }
    }

    #[test]
    fn text_errors() {
        assert!(GridSpec::from_text("name = x\nwidth = 3\n").is_err());
        assert!(GridSpec::from_text("name = x\nwidth = q\n").is_err());
        let sealed = "name = s\nwidth = 3\nheight = 3\nblocked = [\"0,1\" \"1,0\"]\ndoors = []\n";
        assert!(GridSpec::from_text(sealed).is_err());
        let bad_door = "name = s\nwidth = 3\nheight = 3\nblocked = [\"0,1\"]\ndoors = [\"0,1\"]\n";
        assert!(GridSpec::from_text(bad_door).is_err());
    }

    #[test]
    fn builtin_grids_are_valid() {
        for spec in [GridSpec::two_room(), GridSpec::wall()] {
            spec.validate().unwrap();
            assert_eq!(spec.free_cells().len(), 81 - 8);
            assert!(spec.doors.iter().all(|d| spec.is_free(*d)));
        }
    }

    #[test]
    fn episode_sampling_deterministic_and_feasible() {
        let spec = GridSpec::wall();
        let a = sample_episode_spec(&spec, 11).unwrap();
        let b = sample_episode_spec(&spec, 11).unwrap();
        assert_eq!(a, b);
        let (s, g) = a;
        assert_ne!(s, g);
        let budget = i64::from(spec.width * spec.height);
        assert!(oracle_reachable(&spec, s, g, budget).unwrap());
    }

    #[test]
    fn goal_distance_constraint_respected() {
        let oracle = Oracle::new(&GridSpec::wall());
        let c = GoalDistance {
            min: Some(8),
            max: Some(8),
        };
        for seed in 0..50 {
            let (s, g) = sample_episode_with(&oracle, seed, c).unwrap();
            assert_eq!(oracle.distance(s, g), Some(8));
        }
    }
}
