use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::{EnvError, EnvInstance, EnvSpec, RewardKind};
use crate::rng::{domain, RngStream};
use crate::suite::{BernoulliBanditParams, Cell, GaussianBanditParams, GridParams, Task, NUM_ARMS, NUM_GRID_ACTIONS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn id(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn from_id(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Registered task families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvFamily {
    GaussianBandit,
    BernoulliBandit,
    Darkroom,
    DarkroomLarge,
    DenseGrid,
}

impl EnvFamily {
    pub const ALL: [EnvFamily; 5] = [
        EnvFamily::GaussianBandit,
        EnvFamily::BernoulliBandit,
        EnvFamily::Darkroom,
        EnvFamily::DarkroomLarge,
        EnvFamily::DenseGrid,
    ];

    pub fn id(self) -> &'static str {
        match self {
            EnvFamily::GaussianBandit => "gaussian_bandit",
            EnvFamily::BernoulliBandit => "bernoulli_bandit",
            EnvFamily::Darkroom => "darkroom",
            EnvFamily::DarkroomLarge => "darkroom_large",
            EnvFamily::DenseGrid => "dense_grid",
        }
    }

    pub fn from_id(s: &str) -> Result<Self, EnvError> {
        Self::ALL
            .into_iter()
            .find(|f| f.id() == s)
            .ok_or_else(|| EnvError::UnknownFamily(s.to_string()))
    }

    pub fn is_bandit(self) -> bool {
        matches!(self, EnvFamily::GaussianBandit | EnvFamily::BernoulliBandit)
    }

    /// Default grid geometry for grid families.
    pub fn default_grid(self) -> Option<GridParams> {
        let origin = Cell::new(0, 0);
        match self {
            EnvFamily::Darkroom => Some(GridParams::darkroom(origin)),
            EnvFamily::DarkroomLarge => Some(GridParams::darkroom_large(origin)),
            EnvFamily::DenseGrid => Some(GridParams { width: 7, height: 7, goal: origin, horizon: 49 }),
            _ => None,
        }
    }

    /// The family's registered shape.
    pub fn spec(self) -> EnvSpec {
        match self.default_grid() {
            Some(g) => self.grid_spec(&g),
            None => EnvSpec {
                state_dim: 1,
                num_actions: NUM_ARMS,
                horizon: 1,
                reward_kind: RewardKind::Bandit,
                env_family: self.id().to_string(),
            },
        }
    }

    fn grid_spec(self, g: &GridParams) -> EnvSpec {
        EnvSpec {
            state_dim: 2,
            num_actions: NUM_GRID_ACTIONS,
            horizon: g.horizon,
            reward_kind: if self == EnvFamily::DenseGrid { RewardKind::Dense } else { RewardKind::Sparse },
            env_family: self.id().to_string(),
        }
    }

    pub(crate) fn spec_for(self, task: &Task) -> EnvSpec {
        match task {
            Task::Darkroom(g) | Task::DenseGrid(g) => self.grid_spec(g),
            Task::Gaussian(p) => EnvSpec { num_actions: p.means.len(), ..self.spec() },
            Task::Bernoulli(p) => EnvSpec { num_actions: p.means.len(), ..self.spec() },
        }
    }

    pub(crate) fn decode_task(self, s: &str) -> Option<Task> {
        match self {
            EnvFamily::GaussianBandit => GaussianBanditParams::decode(s).map(Task::Gaussian),
            EnvFamily::BernoulliBandit => BernoulliBanditParams::decode(s).map(Task::Bernoulli),
            EnvFamily::Darkroom | EnvFamily::DarkroomLarge => {
                GridParams::decode(s).map(Task::Darkroom)
            }
            EnvFamily::DenseGrid => GridParams::decode(s).map(Task::DenseGrid),
        }
    }
}

/// Seeded partition of the goal cells of a grid into train and test goals.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoalSplit {
    pub train: Vec<Cell>,
    pub test: Vec<Cell>,
}

impl GoalSplit {
    /// Test share is 20% of the cells, rounded half up.
    pub fn new(grid: &GridParams, master_seed: u64) -> Self {
        let n = grid.width * grid.height;
        let test_n = (2 * n + 5) / 10;
        let mut cells: Vec<Cell> = (0..n).map(|i| grid.cell_at(i)).collect();
        let mut rng = RngStream::in_domain(master_seed, domain::GOAL_SPLIT, 0);
        cells.shuffle(&mut rng);
        let train = cells.split_off(test_n);
        Self { train, test: cells }
    }

    pub fn goals(&self, split: Split) -> &[Cell] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

/// Draws a task from `family`. Grid goals come from the split table of
/// `rng.master_seed()`; bandit parameters are drawn fresh.
pub fn sample_env(family: &str, split: Split, rng: &mut RngStream) -> Result<EnvInstance, EnvError> {
    let fam = EnvFamily::from_id(family)?;
    let task = match fam {
        EnvFamily::GaussianBandit => Task::Gaussian(GaussianBanditParams {
            means: (0..NUM_ARMS).map(|_| rng.random::<f64>()).collect(),
            sigma: GaussianBanditParams::SIGMA,
        }),
        EnvFamily::BernoulliBandit => {
            let beta = Beta::new(1.0, 1.0).expect("valid beta parameters");
            Task::Bernoulli(BernoulliBanditParams { means: (0..NUM_ARMS).map(|_| beta.sample(rng)).collect() })
        }
        _ => {
            let grid = fam.default_grid().expect("grid family");
            let table = GoalSplit::new(&grid, rng.master_seed());
            let goals = table.goals(split);
            let goal = goals[rng.random_range(0..goals.len())];
            let g = GridParams { goal, ..grid };
            if fam == EnvFamily::DenseGrid {
                Task::DenseGrid(g)
            } else {
                Task::Darkroom(g)
            }
        }
    };
    Ok(EnvInstance::new(fam, split, task))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn darkroom_split_sizes() {
        let s = GoalSplit::new(&GridParams::darkroom(Cell::new(0, 0)), 42);
        assert_eq!((s.train.len(), s.test.len()), (39, 10));
        let l = GoalSplit::new(&GridParams::darkroom_large(Cell::new(0, 0)), 42);
        assert_eq!((l.train.len(), l.test.len()), (80, 20));
    }

    #[test]
    fn split_is_a_disjoint_cover_and_seeded() {
        for seed in 0..20 {
            let s = GoalSplit::new(&GridParams::darkroom(Cell::new(0, 0)), seed);
            let train: HashSet<_> = s.train.iter().collect();
            let test: HashSet<_> = s.test.iter().collect();
            assert!(train.is_disjoint(&test));
            assert_eq!(train.len() + test.len(), 49);
            assert_eq!(s, GoalSplit::new(&GridParams::darkroom(Cell::new(0, 0)), seed));
        }
        assert_ne!(
            GoalSplit::new(&GridParams::darkroom(Cell::new(0, 0)), 1),
            GoalSplit::new(&GridParams::darkroom(Cell::new(0, 0)), 2)
        );
    }

    #[test]
    fn sampled_goals_respect_split() {
        let table = GoalSplit::new(&GridParams::darkroom(Cell::new(0, 0)), 9);
        for i in 0..200 {
            let mut rng = RngStream::new(9, i);
            let env = sample_env("darkroom", Split::Train, &mut rng).unwrap();
            assert!(table.train.contains(&env.grid().unwrap().goal));
            let env = sample_env("darkroom", Split::Test, &mut rng).unwrap();
            assert!(table.test.contains(&env.grid().unwrap().goal));
            assert_eq!(env.split(), Split::Test);
        }
    }

    #[test]
    fn bandit_parameters_in_range() {
        let mut rng = RngStream::new(3, 0);
        for _ in 0..100 {
            let g = sample_env("gaussian_bandit", Split::Train, &mut rng).unwrap();
            let m = g.arm_means().unwrap();
            assert_eq!(m.len(), 5);
            assert!(m.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let b = sample_env("bernoulli_bandit", Split::Train, &mut rng).unwrap();
            assert!(b.arm_means().unwrap().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn beta_one_one_means_look_uniform() {
        // Beta(1, 1) is U[0, 1]: mean 1/2, variance 1/12.
        let mut rng = RngStream::new(5, 0);
        let mut xs = Vec::new();
        for _ in 0..4000 {
            xs.extend_from_slice(sample_env("bernoulli_bandit", Split::Train, &mut rng).unwrap().arm_means().unwrap());
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!((mean - 0.5).abs() < 4.0 * (1.0 / 12.0 / n).sqrt());
        assert!((var - 1.0 / 12.0).abs() < 0.003);
    }

    #[test]
    fn unknown_family() {
        let mut rng = RngStream::new(0, 0);
        assert_eq!(
            sample_env("miniworld", Split::Train, &mut rng).unwrap_err(),
            EnvError::UnknownFamily("miniworld".into())
        );
    }

    #[test]
    fn registry_specs() {
        let d = EnvFamily::Darkroom.spec();
        assert_eq!((d.state_dim, d.num_actions, d.horizon, d.reward_kind), (2, 5, 49, RewardKind::Sparse));
        let l = EnvFamily::DarkroomLarge.spec();
        assert_eq!(l.horizon, 100);
        assert_eq!(EnvFamily::DenseGrid.spec().reward_kind, RewardKind::Dense);
        let b = EnvFamily::GaussianBandit.spec();
        assert_eq!((b.state_dim, b.num_actions, b.reward_kind), (1, 5, RewardKind::Bandit));
    }
}
