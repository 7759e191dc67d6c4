//! Run configuration: flat `key = value` text with `#` comments and
//! namespaced keys. Every key has a default; unknown keys are rejected, and
//! [`RunConfig::dump`] writes every effective value so `parse(dump(c)) == c`.

use crate::discovery::NotearsConfig;
use crate::dynamics::{DynamicsKind, MlpFitConfig};
use crate::envs::{EnvKind, EnvSpec};
use crate::error::{Error, Result};
use crate::guidance::LambdaSchedule;
use crate::rl::{RStarRule, TrainerConfig};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Offline data generation.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub episodes: usize,
    pub behavior_noise: f64,
    /// Dataset file; empty means `<out>/dataset.txt`.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblateConfig {
    pub seeds: usize,
    pub flip_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyConfig {
    pub lemma1_samples: usize,
    pub lemma1_steps: usize,
    pub prop1_seeds: usize,
    pub prop1_steps: usize,
    pub prop2_samples: usize,
    pub prop2_seeds: usize,
    pub theorem1_seeds: usize,
    pub theorem1_rollouts: usize,
    pub theorem1_horizon: usize,
    pub theorem1_lambdas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub env: EnvSpec,
    pub data: DataConfig,
    pub trainer: TrainerConfig,
    pub ablate: AblateConfig,
    pub eval_episodes: usize,
    pub verify: VerifyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs"),
            env: EnvSpec::lin_scm(0),
            data: DataConfig {
                episodes: 40,
                behavior_noise: 1.0,
                path: String::new(),
            },
            trainer: TrainerConfig::default(),
            ablate: AblateConfig {
                seeds: 5,
                flip_prob: 0.25,
            },
            eval_episodes: 10,
            verify: VerifyConfig {
                lemma1_samples: 20_000,
                lemma1_steps: 1000,
                prop1_seeds: 20,
                prop1_steps: 10_000,
                prop2_samples: 10_000,
                prop2_seeds: 10,
                theorem1_seeds: 20,
                theorem1_rollouts: 1000,
                theorem1_horizon: 50,
                theorem1_lambdas: vec![0.1, 1.0],
            },
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| Error::InvalidArgument(format!("{key}: cannot parse '{v}': {e}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::InvalidArgument(format!("{key}: expected true/false, got '{v}'"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| parse_num(key, x.trim())).collect()
}

fn list<T: std::fmt::Debug>(xs: &[T]) -> String {
    xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(Error::Parse {
                line: i + 1,
                message: format!("expected key = value, got '{line}'"),
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.trainer.validate()?;
        if !(self.data.behavior_noise >= 0.0) {
            return Err(Error::InvalidArgument(
                "data.behavior_noise must be non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.ablate.flip_prob) {
            return Err(Error::InvalidArgument("ablate.flip_prob must lie in [0, 1]".into()));
        }
        if self.ablate.seeds == 0 {
            return Err(Error::InvalidArgument("ablate.seeds must be at least 1".into()));
        }
        Ok(())
    }

    /// Dataset location, defaulting inside the output directory.
    pub fn dataset_path(&self) -> PathBuf {
        if self.data.path.is_empty() {
            self.out.join("dataset.txt")
        } else {
            PathBuf::from(&self.data.path)
        }
    }

    /// Trainer settings with the run seed applied.
    pub fn trainer_for_seed(&self, seed: u64) -> TrainerConfig {
        TrainerConfig {
            seed,
            ..self.trainer.clone()
        }
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.trainer;
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "env.kind" => self.env.kind = EnvKind::parse(v)?,
            "env.state_dim" => self.env.state_dim = parse_num(key, v)?,
            "env.action_dim" => self.env.action_dim = parse_num(key, v)?,
            "env.horizon" => self.env.horizon = parse_num(key, v)?,
            "env.causal_actions" => self.env.causal_actions = parse_num(key, v)?,
            "env.seed" => self.env.seed = parse_num(key, v)?,
            "env.maze_dt" => self.env.maze_dt = parse_num(key, v)?,
            "env.goal_radius" => self.env.goal_radius = parse_num(key, v)?,
            "data.episodes" => self.data.episodes = parse_num(key, v)?,
            "data.behavior_noise" => self.data.behavior_noise = parse_num(key, v)?,
            "data.path" => self.data.path = v.to_string(),
            "train.lr" => t.lr = parse_num(key, v)?,
            "train.eta" => t.eta = parse_num(key, v)?,
            "train.batch" => t.batch = parse_num(key, v)?,
            "train.hidden" => t.hidden = parse_list(key, v)?,
            "train.critic_hidden" => t.critic_hidden = parse_list(key, v)?,
            "train.offline_steps" => t.offline_steps = parse_num(key, v)?,
            "train.episodes" => t.episodes = parse_num(key, v)?,
            "train.mask_refresh" => t.mask_refresh = parse_num(key, v)?,
            "train.refresh_window" => t.refresh_window = parse_num(key, v)?,
            "train.acting_steps" => t.acting_steps = parse_num(key, v)?,
            "train.actor_steps" => t.actor_steps = parse_num(key, v)?,
            "train.actor_batch" => t.actor_batch = parse_num(key, v)?,
            "train.td_steps" => t.td_steps = parse_num(key, v)?,
            "train.discount" => t.discount = parse_num(key, v)?,
            "train.rho_target" => t.rho_target = parse_num(key, v)?,
            "train.buffer_capacity" => t.buffer_capacity = parse_num(key, v)?,
            "train.mask_flip_prob" => t.mask_flip_prob = parse_num(key, v)?,
            "train.stability_delta" => t.stability_delta = if v == "none" { None } else { Some(parse_num(key, v)?) },
            "train.r_star" => {
                t.r_star = if v == "env" {
                    RStarRule::Env
                } else {
                    RStarRule::Fixed(parse_num(key, v)?)
                }
            }
            "diffusion.steps" => t.diffusion_steps = parse_num(key, v)?,
            "diffusion.beta_start" => t.beta_start = parse_num(key, v)?,
            "diffusion.beta_end" => t.beta_end = parse_num(key, v)?,
            "guidance.lambda" => t.guidance.lambda = LambdaSchedule::Constant(parse_num(key, v)?),
            "guidance.gamma" => t.guidance.gamma = parse_num(key, v)?,
            "guidance.beta" => t.guidance.beta_guid = parse_num(key, v)?,
            "guidance.use_r_star" => t.guidance.use_r_star = parse_bool(key, v)?,
            "notears.lambda1" => t.notears.lambda1 = parse_num(key, v)?,
            "notears.rho_init" => t.notears.rho_init = parse_num(key, v)?,
            "notears.rho_growth" => t.notears.rho_growth = parse_num(key, v)?,
            "notears.rho_max" => t.notears.rho_max = parse_num(key, v)?,
            "notears.alpha_init" => t.notears.alpha_init = parse_num(key, v)?,
            "notears.tolerance" => t.notears.tolerance = parse_num(key, v)?,
            "notears.max_outer" => t.notears.max_outer = parse_num(key, v)?,
            "notears.max_inner" => t.notears.max_inner = parse_num(key, v)?,
            "notears.threshold" => t.notears.threshold = parse_num(key, v)?,
            "dynamics.kind" => {
                t.dynamics = match v {
                    "linear" => DynamicsKind::Linear,
                    "mlp" => match &t.dynamics {
                        DynamicsKind::Mlp(c) => DynamicsKind::Mlp(c.clone()),
                        DynamicsKind::Linear => DynamicsKind::Mlp(MlpFitConfig::default()),
                    },
                    _ => {
                        return Err(Error::InvalidArgument(format!(
                            "{key}: expected linear or mlp, got '{v}'"
                        )))
                    }
                }
            }
            "dynamics.hidden" | "dynamics.steps" | "dynamics.batch" | "dynamics.lr" | "dynamics.seed" => {
                let DynamicsKind::Mlp(c) = &mut t.dynamics else {
                    return Err(Error::InvalidArgument(format!(
                        "{key} needs dynamics.kind = mlp set first"
                    )));
                };
                match key {
                    "dynamics.hidden" => c.hidden = parse_list(key, v)?,
                    "dynamics.steps" => c.steps = parse_num(key, v)?,
                    "dynamics.batch" => c.batch = parse_num(key, v)?,
                    "dynamics.lr" => c.lr = parse_num(key, v)?,
                    _ => c.seed = parse_num(key, v)?,
                }
            }
            "ablate.seeds" => self.ablate.seeds = parse_num(key, v)?,
            "ablate.flip_prob" => self.ablate.flip_prob = parse_num(key, v)?,
            "eval.episodes" => self.eval_episodes = parse_num(key, v)?,
            "verify.lemma1_samples" => self.verify.lemma1_samples = parse_num(key, v)?,
            "verify.lemma1_steps" => self.verify.lemma1_steps = parse_num(key, v)?,
            "verify.prop1_seeds" => self.verify.prop1_seeds = parse_num(key, v)?,
            "verify.prop1_steps" => self.verify.prop1_steps = parse_num(key, v)?,
            "verify.prop2_samples" => self.verify.prop2_samples = parse_num(key, v)?,
            "verify.prop2_seeds" => self.verify.prop2_seeds = parse_num(key, v)?,
            "verify.theorem1_seeds" => self.verify.theorem1_seeds = parse_num(key, v)?,
            "verify.theorem1_rollouts" => self.verify.theorem1_rollouts = parse_num(key, v)?,
            "verify.theorem1_horizon" => self.verify.theorem1_horizon = parse_num(key, v)?,
            "verify.theorem1_lambdas" => self.verify.theorem1_lambdas = parse_list(key, v)?,
            _ => return Err(Error::InvalidArgument(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Every effective value, one `key = value` per line. Floats use the
    /// shortest round-trip form.
    pub fn dump(&self) -> String {
        let t = &self.trainer;
        let lambda = match &t.guidance.lambda {
            LambdaSchedule::Constant(x) => *x,
            LambdaSchedule::PerStep(v) => v.first().copied().unwrap_or(0.0),
        };
        let mut e: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("env.kind", self.env.kind.name().to_string()),
            ("env.state_dim", self.env.state_dim.to_string()),
            ("env.action_dim", self.env.action_dim.to_string()),
            ("env.horizon", self.env.horizon.to_string()),
            ("env.causal_actions", self.env.causal_actions.to_string()),
            ("env.seed", self.env.seed.to_string()),
            ("env.maze_dt", format!("{:?}", self.env.maze_dt)),
            ("env.goal_radius", format!("{:?}", self.env.goal_radius)),
            ("data.episodes", self.data.episodes.to_string()),
            ("data.behavior_noise", format!("{:?}", self.data.behavior_noise)),
            ("data.path", self.data.path.clone()),
            ("train.lr", format!("{:?}", t.lr)),
            ("train.eta", format!("{:?}", t.eta)),
            ("train.batch", t.batch.to_string()),
            ("train.hidden", list(&t.hidden)),
            ("train.critic_hidden", list(&t.critic_hidden)),
            ("train.offline_steps", t.offline_steps.to_string()),
            ("train.episodes", t.episodes.to_string()),
            ("train.mask_refresh", t.mask_refresh.to_string()),
            ("train.refresh_window", t.refresh_window.to_string()),
            ("train.acting_steps", t.acting_steps.to_string()),
            ("train.actor_steps", t.actor_steps.to_string()),
            ("train.actor_batch", t.actor_batch.to_string()),
            ("train.td_steps", t.td_steps.to_string()),
            ("train.discount", format!("{:?}", t.discount)),
            ("train.rho_target", format!("{:?}", t.rho_target)),
            ("train.buffer_capacity", t.buffer_capacity.to_string()),
            ("train.mask_flip_prob", format!("{:?}", t.mask_flip_prob)),
            (
                "train.stability_delta",
                t.stability_delta.map_or("none".to_string(), |d| format!("{d:?}")),
            ),
            (
                "train.r_star",
                match t.r_star {
                    RStarRule::Env => "env".to_string(),
                    RStarRule::Fixed(x) => format!("{x:?}"),
                },
            ),
            ("diffusion.steps", t.diffusion_steps.to_string()),
            ("diffusion.beta_start", format!("{:?}", t.beta_start)),
            ("diffusion.beta_end", format!("{:?}", t.beta_end)),
            ("guidance.lambda", format!("{lambda:?}")),
            ("guidance.gamma", format!("{:?}", t.guidance.gamma)),
            ("guidance.beta", format!("{:?}", t.guidance.beta_guid)),
            ("guidance.use_r_star", t.guidance.use_r_star.to_string()),
        ];
        let n: &NotearsConfig = &t.notears;
        e.extend([
            ("notears.lambda1", format!("{:?}", n.lambda1)),
            ("notears.rho_init", format!("{:?}", n.rho_init)),
            ("notears.rho_growth", format!("{:?}", n.rho_growth)),
            ("notears.rho_max", format!("{:?}", n.rho_max)),
            ("notears.alpha_init", format!("{:?}", n.alpha_init)),
            ("notears.tolerance", format!("{:?}", n.tolerance)),
            ("notears.max_outer", n.max_outer.to_string()),
            ("notears.max_inner", n.max_inner.to_string()),
            ("notears.threshold", format!("{:?}", n.threshold)),
        ]);
        match &t.dynamics {
            DynamicsKind::Linear => e.push(("dynamics.kind", "linear".into())),
            DynamicsKind::Mlp(c) => e.extend([
                ("dynamics.kind", "mlp".into()),
                ("dynamics.hidden", list(&c.hidden)),
                ("dynamics.steps", c.steps.to_string()),
                ("dynamics.batch", c.batch.to_string()),
                ("dynamics.lr", format!("{:?}", c.lr)),
                ("dynamics.seed", c.seed.to_string()),
            ]),
        }
        let v = &self.verify;
        e.extend([
            ("ablate.seeds", self.ablate.seeds.to_string()),
            ("ablate.flip_prob", format!("{:?}", self.ablate.flip_prob)),
            ("eval.episodes", self.eval_episodes.to_string()),
            ("verify.lemma1_samples", v.lemma1_samples.to_string()),
            ("verify.lemma1_steps", v.lemma1_steps.to_string()),
            ("verify.prop1_seeds", v.prop1_seeds.to_string()),
            ("verify.prop1_steps", v.prop1_steps.to_string()),
            ("verify.prop2_samples", v.prop2_samples.to_string()),
            ("verify.prop2_seeds", v.prop2_seeds.to_string()),
            ("verify.theorem1_seeds", v.theorem1_seeds.to_string()),
            ("verify.theorem1_rollouts", v.theorem1_rollouts.to_string()),
            ("verify.theorem1_horizon", v.theorem1_horizon.to_string()),
            ("verify.theorem1_lambdas", list(&v.theorem1_lambdas)),
        ]);
        let mut out = String::new();
        for (k, v) in e {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.dump();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.dump(), text);
    }

    #[test]
    fn overrides_and_comments() {
        let text = "# comment\nseed = 7  # trailing\nguidance.lambda = 0.5\ntrain.hidden = 16, 8\n\ndynamics.kind = mlp\ndynamics.steps = 10\ntrain.stability_delta = none\ntrain.r_star = 1.25\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.trainer.guidance.lambda, LambdaSchedule::Constant(0.5));
        assert_eq!(cfg.trainer.hidden, vec![16, 8]);
        assert_eq!(cfg.trainer.stability_delta, None);
        assert_eq!(cfg.trainer.r_star, RStarRule::Fixed(1.25));
        assert!(matches!(&cfg.trainer.dynamics, DynamicsKind::Mlp(c) if c.steps == 10));
        assert_eq!(RunConfig::parse(&cfg.dump()).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(matches!(
            RunConfig::parse("nope = 1"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(RunConfig::parse("seed 3").is_err());
        assert!(RunConfig::parse("train.batch = x").is_err());
        assert!(RunConfig::parse("ablate.flip_prob = 2").is_err());
        assert!(RunConfig::parse("dynamics.steps = 5").is_err());
    }

    #[test]
    fn dataset_path_defaults_under_out() {
        let mut cfg = RunConfig {
            out: PathBuf::from("x"),
            ..RunConfig::default()
        };
        assert_eq!(cfg.dataset_path(), PathBuf::from("x/dataset.txt"));
        cfg.data.path = "d.txt".into();
        assert_eq!(cfg.dataset_path(), PathBuf::from("d.txt"));
    }
}
