//! Environment abstraction: finite-state tasks with hidden parameters, the
//! behaviour policy, and task sampling with train/test splits.

mod policy;
mod registry;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::suite::{self, Cell, GridParams, Task};

pub use policy::{sample_categorical, Policy};
pub use registry::{sample_env, EnvFamily, GoalSplit, Split};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EnvError {
    #[error("invalid state {0:?}")]
    InvalidState(Vec<f64>),
    #[error("invalid action {action} (environment has {num_actions})")]
    InvalidAction { action: usize, num_actions: usize },
    #[error("episode horizon {0} exceeded")]
    HorizonExceeded(usize),
    #[error("unknown environment family {0:?}")]
    UnknownFamily(String),
    #[error("unsupported: {0}")]
    Unsupported(&'static str),
    #[error("malformed environment tag {0:?}")]
    BadTag(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    Dense,
    Sparse,
    Bandit,
}

/// Public shape of an environment family.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub state_dim: usize,
    pub num_actions: usize,
    /// Episode length in steps.
    pub horizon: usize,
    pub reward_kind: RewardKind,
    pub env_family: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateVec(pub Vec<f64>);

impl StateVec {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

impl From<Cell> for StateVec {
    fn from(c: Cell) -> Self {
        Self(vec![c.x as f64, c.y as f64])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionId(pub usize);

impl ActionId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One interaction `(s, a, r, s')`. Serialized as a 4-element array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "(StateVec, ActionId, f64, StateVec)", into = "(StateVec, ActionId, f64, StateVec)")]
pub struct Transition {
    pub state: StateVec,
    pub action: ActionId,
    pub reward: f64,
    pub next_state: StateVec,
}

impl From<(StateVec, ActionId, f64, StateVec)> for Transition {
    fn from((state, action, reward, next_state): (StateVec, ActionId, f64, StateVec)) -> Self {
        Self { state, action, reward, next_state }
    }
}

impl From<Transition> for (StateVec, ActionId, f64, StateVec) {
    fn from(t: Transition) -> Self {
        (t.state, t.action, t.reward, t.next_state)
    }
}

/// A sampled task: hidden parameters plus simulator state.
///
/// Single-owner and mutable; clone it to get an independent simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvInstance {
    family: EnvFamily,
    split: Split,
    spec: EnvSpec,
    task: Task,
    pos: Cell,
    clock: usize,
}

impl EnvInstance {
    pub fn new(family: EnvFamily, split: Split, task: Task) -> Self {
        let spec = family.spec_for(&task);
        let mut env = Self { family, split, spec, task, pos: Cell::new(0, 0), clock: 0 };
        env.reset();
        env
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn family(&self) -> EnvFamily {
        self.family
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn task(&self) -> &Task {
        &self.task
    }

    pub fn clock(&self) -> usize {
        self.clock
    }

    pub fn num_actions(&self) -> usize {
        self.spec.num_actions
    }

    pub fn grid(&self) -> Option<&GridParams> {
        match &self.task {
            Task::Darkroom(g) | Task::DenseGrid(g) => Some(g),
            _ => None,
        }
    }

    /// True arm means for bandit tasks.
    pub fn arm_means(&self) -> Option<&[f64]> {
        match &self.task {
            Task::Gaussian(p) => Some(&p.means),
            Task::Bernoulli(p) => Some(&p.means),
            _ => None,
        }
    }

    /// Starts an episode from the initial state (grid centre, or the single bandit state).
    pub fn reset(&mut self) -> StateVec {
        self.clock = 0;
        match &self.task {
            Task::Darkroom(g) | Task::DenseGrid(g) => {
                self.pos = g.center();
                self.pos.into()
            }
            _ => StateVec::zeros(1),
        }
    }

    /// Starts an episode from `s`.
    pub fn reset_to(&mut self, s: &StateVec) -> Result<(), EnvError> {
        match &self.task {
            Task::Darkroom(g) | Task::DenseGrid(g) => {
                self.pos = g.cell_of(s).ok_or_else(|| EnvError::InvalidState(s.0.clone()))?;
            }
            _ => {
                if s.0 != [0.0] {
                    return Err(EnvError::InvalidState(s.0.clone()));
                }
            }
        }
        self.clock = 0;
        Ok(())
    }

    pub fn step<R: Rng + ?Sized>(&mut self, a: ActionId, rng: &mut R) -> Result<(f64, StateVec), EnvError> {
        if a.0 >= self.spec.num_actions {
            return Err(EnvError::InvalidAction { action: a.0, num_actions: self.spec.num_actions });
        }
        match &self.task {
            Task::Gaussian(p) => {
                let r = suite::reward_gaussian(p, a, rng)?;
                self.clock += 1;
                Ok((r, StateVec::zeros(1)))
            }
            Task::Bernoulli(p) => {
                let r = suite::reward_bernoulli(p, a, rng)?;
                self.clock += 1;
                Ok((r, StateVec::zeros(1)))
            }
            Task::Darkroom(g) | Task::DenseGrid(g) => {
                if self.clock >= self.spec.horizon {
                    return Err(EnvError::HorizonExceeded(self.spec.horizon));
                }
                let next = suite::grid_step(g, self.pos, a);
                let r = match self.task {
                    Task::Darkroom(_) => suite::sparse_reward(g, next),
                    _ => suite::dense_reward(g, next),
                };
                self.pos = next;
                self.clock += 1;
                Ok((r, next.into()))
            }
        }
    }

    pub fn num_states(&self) -> usize {
        self.grid().map_or(1, |g| g.width * g.height)
    }

    /// State with enumeration index `idx` (row-major over the grid).
    pub fn state_at(&self, idx: usize) -> StateVec {
        match self.grid() {
            Some(g) => g.cell_at(idx).into(),
            None => StateVec::zeros(1),
        }
    }

    pub fn state_index(&self, s: &StateVec) -> Option<usize> {
        match self.grid() {
            Some(g) => g.cell_of(s).map(|c| g.index_of(c)),
            None => (s.0 == [0.0]).then_some(0),
        }
    }

    /// Uniform draw over the finite state space.
    pub fn sample_state_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> StateVec {
        match self.grid() {
            Some(g) => g.cell_at(rng.random_range(0..g.width * g.height)).into(),
            None => StateVec::zeros(1),
        }
    }

    /// Identifier that encodes the family, split and hidden parameters.
    pub fn tag(&self) -> String {
        format!("{}|{}|{}", self.family.id(), self.split.id(), self.task.encode())
    }

    pub fn from_tag(tag: &str) -> Result<Self, EnvError> {
        let bad = || EnvError::BadTag(tag.to_string());
        let mut parts = tag.splitn(3, '|');
        let family = EnvFamily::from_id(parts.next().ok_or_else(bad)?)?;
        let split = Split::from_id(parts.next().ok_or_else(bad)?).ok_or_else(bad)?;
        let task = family.decode_task(parts.next().ok_or_else(bad)?).ok_or_else(bad)?;
        Ok(Self::new(family, split, task))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::suite::{GaussianBanditParams, UP, LEFT, RIGHT, STAY};

    fn darkroom(goal: (usize, usize)) -> EnvInstance {
        EnvInstance::new(EnvFamily::Darkroom, Split::Train, Task::Darkroom(GridParams::darkroom(Cell::new(goal.0, goal.1))))
    }

    #[test]
    fn darkroom_resets_to_center() {
        let mut env = darkroom((0, 0));
        assert_eq!(env.reset(), StateVec(vec![3.0, 3.0]));
        assert_eq!(env.clock(), 0);
        let mut large = EnvInstance::new(
            EnvFamily::DarkroomLarge,
            Split::Train,
            Task::Darkroom(GridParams::darkroom_large(Cell::new(1, 1))),
        );
        assert_eq!(large.reset(), StateVec(vec![5.0, 5.0]));
    }

    #[test]
    fn bandit_reset_is_single_zero_state() {
        let mut env = EnvInstance::new(
            EnvFamily::GaussianBandit,
            Split::Test,
            Task::Gaussian(GaussianBanditParams { means: vec![0.1; 5], sigma: 0.3 }),
        );
        assert_eq!(env.reset(), StateVec(vec![0.0]));
        assert!(env.reset_to(&StateVec(vec![0.0])).is_ok());
        assert!(matches!(env.reset_to(&StateVec(vec![1.0])), Err(EnvError::InvalidState(_))));
        let mut rng = RngStream::new(0, 0);
        for _ in 0..10 {
            let (_, next) = env.step(ActionId(2), &mut rng).unwrap();
            assert_eq!(next, StateVec(vec![0.0]));
        }
    }

    #[test]
    fn reset_to_teleports_and_validates() {
        let mut env = darkroom((4, 2));
        let mut rng = RngStream::new(0, 0);
        env.reset_to(&StateVec(vec![0.0, 6.0])).unwrap();
        let (_, next) = env.step(ActionId(RIGHT), &mut rng).unwrap();
        assert_eq!(next, StateVec(vec![1.0, 6.0]));
        assert!(matches!(env.reset_to(&StateVec(vec![9.0, 9.0])), Err(EnvError::InvalidState(_))));
        assert!(env.reset_to(&StateVec(vec![1.5, 2.0])).is_err());
    }

    #[test]
    fn step_rewards_on_reaching_goal() {
        let mut env = darkroom((4, 2));
        let mut rng = RngStream::new(0, 0);
        env.reset_to(&StateVec(vec![3.0, 2.0])).unwrap();
        assert_eq!(env.step(ActionId(RIGHT), &mut rng).unwrap(), (1.0, StateVec(vec![4.0, 2.0])));
        // Occupying the goal keeps paying.
        assert_eq!(env.step(ActionId(STAY), &mut rng).unwrap(), (1.0, StateVec(vec![4.0, 2.0])));
        env.reset_to(&StateVec(vec![0.0, 0.0])).unwrap();
        assert_eq!(env.step(ActionId(LEFT), &mut rng).unwrap(), (0.0, StateVec(vec![0.0, 0.0])));
        assert_eq!(env.step(ActionId(UP), &mut rng).unwrap(), (0.0, StateVec(vec![0.0, 0.0])));
    }

    #[test]
    fn step_errors() {
        let mut env = darkroom((4, 2));
        let mut rng = RngStream::new(0, 0);
        assert_eq!(
            env.step(ActionId(5), &mut rng),
            Err(EnvError::InvalidAction { action: 5, num_actions: 5 })
        );
        for _ in 0..49 {
            env.step(ActionId(STAY), &mut rng).unwrap();
        }
        assert_eq!(env.step(ActionId(STAY), &mut rng), Err(EnvError::HorizonExceeded(49)));
    }

    #[test]
    fn tag_round_trips() {
        let env = darkroom((4, 2));
        assert_eq!(EnvInstance::from_tag(&env.tag()).unwrap(), env);
        let bandit = EnvInstance::new(
            EnvFamily::GaussianBandit,
            Split::Test,
            Task::Gaussian(GaussianBanditParams { means: vec![0.1, 0.123456789012345, 0.9, 1e-17, 0.5], sigma: 0.3 }),
        );
        assert_eq!(EnvInstance::from_tag(&bandit.tag()).unwrap(), bandit);
        assert!(EnvInstance::from_tag("nope|train|x").is_err());
        assert!(EnvInstance::from_tag("darkroom|train|9,9").is_err());
    }

    #[test]
    fn transition_serializes_as_array() {
        let t = Transition {
            state: StateVec(vec![1.0, 2.0]),
            action: ActionId(3),
            reward: 0.25,
            next_state: StateVec(vec![2.0, 2.0]),
        };
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(s, "[[1.0,2.0],3,0.25,[2.0,2.0]]");
        assert_eq!(serde_json::from_str::<Transition>(&s).unwrap(), t);
    }
}
