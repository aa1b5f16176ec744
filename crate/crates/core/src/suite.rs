//! Concrete task families: Gaussian and Bernoulli bandits, the sparse-reward
//! Darkroom grids, and a dense-reward grid.
//!
//! Grid coordinates: `x` grows rightward, `y` grows downward. Actions are
//! indexed `[up, down, left, right, stay]`. Moves off the grid clamp to the
//! boundary.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::{ActionId, EnvError, StateVec};

pub const UP: usize = 0;
pub const DOWN: usize = 1;
pub const LEFT: usize = 2;
pub const RIGHT: usize = 3;
pub const STAY: usize = 4;
pub const NUM_GRID_ACTIONS: usize = 5;
pub const NUM_ARMS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

impl Cell {
    pub const fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }

    pub fn manhattan(self, other: Cell) -> usize {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y)
    }
}

/// Geometry, goal and episode length of a grid task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridParams {
    pub width: usize,
    pub height: usize,
    pub goal: Cell,
    pub horizon: usize,
}

pub type DarkroomParams = GridParams;
pub type DenseGridParams = GridParams;

impl GridParams {
    pub fn darkroom(goal: Cell) -> Self {
        Self { width: 7, height: 7, goal, horizon: 49 }
    }

    pub fn darkroom_large(goal: Cell) -> Self {
        Self { width: 10, height: 10, goal, horizon: 100 }
    }

    pub fn center(&self) -> Cell {
        Cell::new(self.width / 2, self.height / 2)
    }

    pub fn contains(&self, c: Cell) -> bool {
        c.x < self.width && c.y < self.height
    }

    pub fn cell_at(&self, idx: usize) -> Cell {
        Cell::new(idx % self.width, idx / self.width)
    }

    pub fn index_of(&self, c: Cell) -> usize {
        c.y * self.width + c.x
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.width * self.height).map(|i| self.cell_at(i))
    }

    /// Parses an integer-valued 2-vector lying inside the grid.
    pub fn cell_of(&self, s: &StateVec) -> Option<Cell> {
        let [x, y] = s.0.as_slice() else { return None };
        let valid = |v: f64, bound: usize| v >= 0.0 && v.fract() == 0.0 && v < bound as f64;
        (valid(*x, self.width) && valid(*y, self.height)).then(|| Cell::new(*x as usize, *y as usize))
    }

    fn encode(&self) -> String {
        format!("{}x{}:{}:{},{}", self.width, self.height, self.horizon, self.goal.x, self.goal.y)
    }

    pub(crate) fn decode(s: &str) -> Option<Self> {
        let (dims, rest) = s.split_once(':')?;
        let (horizon, goal) = rest.split_once(':')?;
        let (w, h) = dims.split_once('x')?;
        let (gx, gy) = goal.split_once(',')?;
        let p = Self {
            width: w.parse().ok()?,
            height: h.parse().ok()?,
            goal: Cell::new(gx.parse().ok()?, gy.parse().ok()?),
            horizon: horizon.parse().ok()?,
        };
        (p.width > 0 && p.height > 0 && p.contains(p.goal)).then_some(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianBanditParams {
    pub means: Vec<f64>,
    pub sigma: f64,
}

impl GaussianBanditParams {
    pub const SIGMA: f64 = 0.3;

    fn encode(&self) -> String {
        format!("{};{}", self.sigma, join(&self.means))
    }

    pub(crate) fn decode(s: &str) -> Option<Self> {
        let (sigma, means) = s.split_once(';')?;
        let p = Self { sigma: sigma.parse().ok()?, means: split_floats(means)? };
        (p.sigma >= 0.0 && !p.means.is_empty()).then_some(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BernoulliBanditParams {
    pub means: Vec<f64>,
}

impl BernoulliBanditParams {
    pub(crate) fn decode(s: &str) -> Option<Self> {
        let means = split_floats(s)?;
        (!means.is_empty() && means.iter().all(|m| (0.0..=1.0).contains(m))).then_some(Self { means })
    }
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn split_floats(s: &str) -> Option<Vec<f64>> {
    s.split(',').map(|v| v.parse().ok()).collect()
}

/// Hidden parameters of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Task {
    Gaussian(GaussianBanditParams),
    Bernoulli(BernoulliBanditParams),
    Darkroom(GridParams),
    DenseGrid(GridParams),
}

impl Task {
    pub(crate) fn encode(&self) -> String {
        match self {
            Task::Gaussian(p) => p.encode(),
            Task::Bernoulli(p) => join(&p.means),
            Task::Darkroom(g) | Task::DenseGrid(g) => g.encode(),
        }
    }
}

fn check_arm(arm: ActionId, n: usize) -> Result<(), EnvError> {
    if arm.0 >= n {
        return Err(EnvError::InvalidAction { action: arm.0, num_actions: n });
    }
    Ok(())
}

/// One pull of a Gaussian arm: `N(mean, sigma^2)`.
pub fn reward_gaussian<R: Rng + ?Sized>(
    p: &GaussianBanditParams,
    arm: ActionId,
    rng: &mut R,
) -> Result<f64, EnvError> {
    check_arm(arm, p.means.len())?;
    let z: f64 = StandardNormal.sample(rng);
    Ok(p.means[arm.0] + p.sigma * z)
}

/// One pull of a Bernoulli arm, in `{0, 1}`.
pub fn reward_bernoulli<R: Rng + ?Sized>(
    p: &BernoulliBanditParams,
    arm: ActionId,
    rng: &mut R,
) -> Result<f64, EnvError> {
    check_arm(arm, p.means.len())?;
    Ok(if rng.random_bool(p.means[arm.0]) { 1.0 } else { 0.0 })
}

/// Deterministic move with boundary clamping. Unknown actions stay put.
pub fn grid_step(p: &GridParams, s: Cell, a: ActionId) -> Cell {
    match a.0 {
        UP => Cell::new(s.x, s.y.saturating_sub(1)),
        DOWN => Cell::new(s.x, (s.y + 1).min(p.height - 1)),
        LEFT => Cell::new(s.x.saturating_sub(1), s.y),
        RIGHT => Cell::new((s.x + 1).min(p.width - 1), s.y),
        _ => s,
    }
}

/// 1 while occupying the goal, 0 elsewhere.
pub fn sparse_reward(p: &GridParams, next: Cell) -> f64 {
    if next == p.goal {
        1.0
    } else {
        0.0
    }
}

/// `1 - manhattan(next, goal) / (width + height - 2)`.
pub fn dense_reward(p: &GridParams, next: Cell) -> f64 {
    let span = p.width + p.height - 2;
    if span == 0 {
        return 1.0;
    }
    1.0 - next.manhattan(p.goal) as f64 / span as f64
}
