//! Synthetic environments with known ground truth.

use crate::error::{check_dim, Error, Result};
use crate::numerics::{norm, seeded_rng, standard_normal, Rng};
use crate::scm::{generate_dataset, GroundTruthScm, Transition};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    LinScm,
    PointMaze,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::LinScm => "lin-scm",
            Self::PointMaze => "point-maze",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lin-scm" => Ok(Self::LinScm),
            "point-maze" => Ok(Self::PointMaze),
            other => Err(Error::InvalidArgument(format!("unknown environment '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub state_dim: usize,
    pub action_dim: usize,
    pub horizon: usize,
    /// Number of action coordinates with a causal effect (lin-scm).
    pub causal_actions: usize,
    /// Seeds the random operators of lin-scm.
    pub seed: u64,
    pub maze_dt: f64,
    pub goal_radius: f64,
}

impl EnvSpec {
    pub fn lin_scm(seed: u64) -> Self {
        Self {
            kind: EnvKind::LinScm,
            state_dim: 6,
            action_dim: 4,
            horizon: 50,
            causal_actions: 2,
            seed,
            maze_dt: 0.05,
            goal_radius: 0.1,
        }
    }

    pub fn point_maze() -> Self {
        Self {
            kind: EnvKind::PointMaze,
            state_dim: 4,
            action_dim: 2,
            horizon: 200,
            causal_actions: 2,
            seed: 0,
            maze_dt: 0.05,
            goal_radius: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.action_dim == 0 || self.horizon == 0 {
            return Err(Error::InvalidArgument(
                "environment sizes and horizon must be at least 1".into(),
            ));
        }
        if self.kind == EnvKind::PointMaze && (self.state_dim != 4 || self.action_dim != 2) {
            return Err(Error::InvalidArgument(
                "point-maze has state dim 4 and action dim 2".into(),
            ));
        }
        if self.kind == EnvKind::LinScm && self.causal_actions > self.action_dim {
            return Err(Error::InvalidArgument(
                "more causal actions than action coordinates".into(),
            ));
        }
        if !(self.maze_dt > 0.0) || !(self.goal_radius > 0.0) {
            return Err(Error::InvalidArgument(
                "maze dt and goal radius must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub obs: Vec<f64>,
    pub step: usize,
    pub done: bool,
}

pub const MAZE_START: [f64; 2] = [-1.0, -1.0];
pub const MAZE_GOAL: [f64; 2] = [1.0, 1.0];
/// Position and velocity are clamped to this box.
pub const MAZE_ARENA: f64 = 1.5;
pub const MAZE_MAX_SPEED: f64 = 1.0;
pub const ACTION_BOUND: f64 = 1.0;

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Env {
    LinScm { spec: EnvSpec, scm: GroundTruthScm },
    PointMaze { spec: EnvSpec },
}

impl Env {
    pub fn new(spec: EnvSpec) -> Result<Self> {
        spec.validate()?;
        match spec.kind {
            EnvKind::LinScm => {
                let mut rng = seeded_rng(spec.seed);
                let scm =
                    GroundTruthScm::random_sparse(spec.state_dim, spec.action_dim, spec.causal_actions, &mut rng)?;
                Ok(Self::LinScm { spec, scm })
            }
            EnvKind::PointMaze => Ok(Self::PointMaze { spec }),
        }
    }

    /// Wraps an existing ground-truth model.
    pub fn from_scm(scm: GroundTruthScm, horizon: usize) -> Result<Self> {
        let spec = EnvSpec {
            state_dim: scm.state_dim(),
            action_dim: scm.action_dim(),
            horizon,
            causal_actions: scm.params().b_a.iter().filter(|x| **x != 0.0).count(),
            ..EnvSpec::lin_scm(0)
        };
        spec.validate()?;
        Ok(Self::LinScm { spec, scm })
    }

    pub fn spec(&self) -> &EnvSpec {
        match self {
            Self::LinScm { spec, .. } | Self::PointMaze { spec } => spec,
        }
    }

    pub fn scm(&self) -> Option<&GroundTruthScm> {
        match self {
            Self::LinScm { scm, .. } => Some(scm),
            Self::PointMaze { .. } => None,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.spec().state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.spec().action_dim
    }

    pub fn horizon(&self) -> usize {
        self.spec().horizon
    }

    /// lin-scm: `s_0 ~ N(0, I)`; point-maze: at the start cell, at rest.
    pub fn reset(&self, rng: &mut Rng) -> EnvState {
        let obs = match self {
            Self::LinScm { scm, .. } => scm.reset(rng),
            Self::PointMaze { .. } => vec![MAZE_START[0], MAZE_START[1], 0.0, 0.0],
        };
        EnvState {
            obs,
            step: 0,
            done: false,
        }
    }

    /// Applies the clamped action; returns the next state and reward.
    pub fn step(&self, state: &EnvState, action: &[f64], rng: &mut Rng) -> Result<(EnvState, f64)> {
        if state.done {
            return Err(Error::Environment {
                step: state.step,
                message: "step called on a finished episode".into(),
            });
        }
        check_dim("action", self.action_dim(), action.len())?;
        if !action.iter().all(|x| x.is_finite()) {
            return Err(Error::Environment {
                step: state.step,
                message: "non-finite action".into(),
            });
        }
        let a: Vec<f64> = action.iter().map(|x| x.clamp(-ACTION_BOUND, ACTION_BOUND)).collect();
        let step = state.step + 1;
        let horizon = self.horizon();
        let (obs, r, reached) = match self {
            Self::LinScm { scm, .. } => {
                let (s_next, r) = scm.transition(&state.obs, &a, rng);
                (s_next, r, false)
            }
            Self::PointMaze { spec } => {
                let dt = spec.maze_dt;
                let s = &state.obs;
                let mut next = vec![0.0; 4];
                for i in 0..2 {
                    next[i] = (s[i] + s[2 + i] * dt).clamp(-MAZE_ARENA, MAZE_ARENA);
                    next[2 + i] = (s[2 + i] + a[i] * dt).clamp(-MAZE_MAX_SPEED, MAZE_MAX_SPEED);
                }
                let dist = norm(&[next[0] - MAZE_GOAL[0], next[1] - MAZE_GOAL[1]]);
                (next, -dist * dist, dist <= spec.goal_radius)
            }
        };
        if !obs.iter().all(|x| x.is_finite()) {
            return Err(Error::Environment {
                step: state.step,
                message: "state became non-finite".into(),
            });
        }
        let done = reached || step >= horizon;
        Ok((EnvState { obs, step, done }, r))
    }

    /// Largest expected one-step reward from the zero state over the action
    /// box (lin-scm) or the goal reward 0 (point-maze).
    pub fn optimal_reward(&self) -> f64 {
        match self {
            Self::LinScm { scm, .. } => {
                let n = scm.state_dim();
                self.optimal_reward_at(&vec![0.0; n])
            }
            Self::PointMaze { .. } => 0.0,
        }
    }

    /// State-conditional version: `B_s F_s s + Σ_j |c_j|` with
    /// `c = B_a + F_aᵀ B_sᵀ` for lin-scm.
    pub fn optimal_reward_at(&self, s: &[f64]) -> f64 {
        match self {
            Self::LinScm { scm, .. } => {
                let p = scm.params();
                let n = scm.state_dim();
                let drift: f64 = (0..n)
                    .map(|i| p.b_s[i] * (0..n).map(|j| p.f_s[(i, j)] * s[j]).sum::<f64>())
                    .sum();
                let c = scm.expected_reward_action_gradient();
                drift + ACTION_BOUND * c.iter().map(|x| x.abs()).sum::<f64>()
            }
            Self::PointMaze { .. } => 0.0,
        }
    }

    /// Offline data from the behavior policy: the SCM's noisy linear
    /// controller (lin-scm) or a noisy proportional controller toward the
    /// goal (point-maze).
    pub fn behavior_dataset(&self, episodes: usize, noise: f64, rng: &mut Rng) -> Result<Vec<Transition>> {
        match self {
            Self::LinScm { scm, spec } => generate_dataset(scm, episodes, spec.horizon, noise, rng),
            Self::PointMaze { .. } => {
                if !(noise >= 0.0) {
                    return Err(Error::InvalidArgument("behavior noise must be non-negative".into()));
                }
                let mut out = Vec::new();
                for _ in 0..episodes {
                    let mut state = self.reset(rng);
                    while !state.done {
                        let s = &state.obs;
                        let a: Vec<f64> = (0..2)
                            .map(|i| {
                                let pd = 2.0 * (MAZE_GOAL[i] - s[i]) - s[2 + i];
                                (pd + noise * standard_normal(rng)).clamp(-ACTION_BOUND, ACTION_BOUND)
                            })
                            .collect();
                        let (next, r) = self.step(&state, &a, rng)?;
                        out.push(Transition {
                            s: state.obs.clone(),
                            a,
                            r,
                            s_next: next.obs.clone(),
                            done: next.done,
                        });
                        state = next;
                    }
                }
                Ok(out)
            }
        }
    }

    /// Expected one-step reward of action `a` at `s` (lin-scm only).
    pub fn expected_reward(&self, s: &[f64], a: &[f64]) -> Option<f64> {
        let scm = self.scm()?;
        let a: Vec<f64> = a.iter().map(|x| x.clamp(-ACTION_BOUND, ACTION_BOUND)).collect();
        let s_next = scm.mean_next_state(s, &a);
        Some(scm.mean_reward(&s_next, &a))
    }
}
