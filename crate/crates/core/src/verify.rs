//! Executable checks of the posterior-sampling lemma, the step-size bound,
//! the interventional policy-gradient estimator and the performance bound,
//! each against an independent oracle.

use crate::diffusion::{
    ddpm_sample, ddpm_sample_with, DiffusionSchedule, GaussianPriorNoise, LangevinCorrector, SamplerHook,
    SamplerOptions,
};
use crate::dynamics::{sample_intervention, CausalDynamics, RewardModel, TransitionModel};
use crate::envs::{Env, ACTION_BOUND};
use crate::error::{check_dim, Error, Result};
use crate::guidance::{
    ddpm_stable_lambda_schedule, estimate_lipschitz, guidance_lipschitz, make_guidance_hook, stability_max_step,
    BetaFn, GuidanceConfig, GuidedSde, KlAccumulator, LambdaSchedule, LinearScore, Outcome,
};
use crate::numerics::{
    seeded_rng, spd_inverse_logdet, spectral_norm, standard_normal, standard_normal_vec, Matrix, Rng, Vector,
};
use crate::par::map_indexed;
use crate::rl::fmt_sig;
use crate::scm::{exact_masks, CausalMasks, GroundTruthScm};
use rand::Rng as _;
use std::fmt::Write as _;

/// Gaussian action prior and a linear-Gaussian observation `y = M a + η`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSpec {
    pub prior_mean: Vec<f64>,
    pub prior_cov: Matrix,
    pub m: Matrix,
    pub sigma_y: Matrix,
    pub y: Vec<f64>,
}

impl PosteriorSpec {
    pub fn validate(&self) -> Result<()> {
        let d = self.prior_mean.len();
        let p = self.y.len();
        check_dim("prior covariance", d, self.prior_cov.nrows())?;
        check_dim("prior covariance columns", d, self.prior_cov.ncols())?;
        check_dim("observation operator rows", p, self.m.nrows())?;
        check_dim("observation operator columns", d, self.m.ncols())?;
        check_dim("observation noise", p, self.sigma_y.nrows())?;
        check_dim("observation noise columns", p, self.sigma_y.ncols())?;
        spd_inverse_logdet(&self.prior_cov, "prior covariance")?;
        spd_inverse_logdet(&self.sigma_y, "observation noise")?;
        Ok(())
    }

    /// Observation of `(s', r)` at `s = 0` under linear dynamics:
    /// `M = [F_a; B_a]`, `Σ_y = diag(Σ_φ, σ_ω)`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_linear(
        prior_mean: Vec<f64>,
        prior_cov: Matrix,
        f_a: &Matrix,
        b_a: &[f64],
        sigma_phi: &Matrix,
        sigma_omega: f64,
        s_next: &[f64],
        r: f64,
    ) -> Self {
        let (n, d) = (f_a.nrows(), f_a.ncols());
        let m = Matrix::from_fn(n + 1, d, |i, j| if i < n { f_a[(i, j)] } else { b_a[j] });
        let sigma_y = Matrix::from_fn(n + 1, n + 1, |i, j| {
            if i < n && j < n {
                sigma_phi[(i, j)]
            } else if i == n && j == n {
                sigma_omega
            } else {
                0.0
            }
        });
        let y = s_next.iter().copied().chain([r]).collect();
        Self {
            prior_mean,
            prior_cov,
            m,
            sigma_y,
            y,
        }
    }
}

/// Posterior mean and covariance by Gaussian conditioning.
pub fn gaussian_posterior(spec: &PosteriorSpec) -> Result<(Vec<f64>, Matrix)> {
    spec.validate()?;
    let sm = &spec.prior_cov * spec.m.transpose();
    let innovation = &spec.sigma_y + &spec.m * &sm;
    let (inv, _) = spd_inverse_logdet(&innovation, "innovation covariance")?;
    let gain = &sm * inv;
    let mu = Vector::from_column_slice(&spec.prior_mean);
    let resid = Vector::from_column_slice(&spec.y) - &spec.m * &mu;
    let mean = mu + &gain * resid;
    let cov = &spec.prior_cov - &gain * sm.transpose();
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok((mean.iter().copied().collect(), cov))
}

/// Hook adding `λ Mᵀ Σ_y⁻¹ (y - M a)` to the score.
struct PosteriorHook {
    m: Matrix,
    precision: Matrix,
    y: Vector,
    lambda: f64,
}

impl SamplerHook for PosteriorHook {
    fn correction(&mut self, a_k: &[f64], k: usize, schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
        let a = Vector::from_column_slice(a_k);
        let g = self.m.transpose() * (&self.precision * (&self.y - &self.m * a));
        let scale = self.lambda * (1.0 - schedule.alpha_bar(k)).sqrt();
        Ok(g.iter().map(|x| scale * x).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentReport {
    pub sample_mean: Vec<f64>,
    pub sample_cov: Matrix,
    pub target_mean: Vec<f64>,
    pub target_cov: Matrix,
    /// `|mean error| / standard error` per coordinate.
    pub mean_z: Vec<f64>,
    pub cov_rel_error: f64,
    pub pass: bool,
}

impl MomentReport {
    fn from_samples(samples: &[Vec<f64>], target_mean: Vec<f64>, target_cov: Matrix) -> Self {
        let d = target_mean.len();
        let n = samples.len() as f64;
        let mut mean = vec![0.0; d];
        for s in samples {
            for j in 0..d {
                mean[j] += s[j] / n;
            }
        }
        let mut cov = Matrix::zeros(d, d);
        for s in samples {
            for i in 0..d {
                for j in 0..d {
                    cov[(i, j)] += (s[i] - mean[i]) * (s[j] - mean[j]) / (n - 1.0);
                }
            }
        }
        let mean_z: Vec<f64> = (0..d)
            .map(|j| (mean[j] - target_mean[j]).abs() / (cov[(j, j)] / n).sqrt())
            .collect();
        let cov_rel_error = (&cov - &target_cov).norm() / target_cov.norm();
        let pass = mean_z.iter().all(|z| *z < 3.0) && cov_rel_error < 0.1;
        Self {
            sample_mean: mean,
            sample_cov: cov,
            target_mean,
            target_cov,
            mean_z,
            cov_rel_error,
            pass,
        }
    }

    pub fn summary(&self) -> String {
        let z: Vec<String> = self.mean_z.iter().map(|x| format!("{x:.3}")).collect();
        format!("mean_z=[{}] cov_rel_error={:.4}", z.join(","), self.cov_rel_error)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("coordinate,sample_mean,target_mean,z,sample_var,target_var\n");
        for j in 0..self.target_mean.len() {
            writeln!(
                out,
                "{j},{},{},{},{},{}",
                fmt_sig(self.sample_mean[j]),
                fmt_sig(self.target_mean[j]),
                fmt_sig(self.mean_z[j]),
                fmt_sig(self.sample_cov[(j, j)]),
                fmt_sig(self.target_cov[(j, j)])
            )
            .unwrap();
        }
        writeln!(out, "cov_rel_error,{}", fmt_sig(self.cov_rel_error)).unwrap();
        out
    }
}

/// Sample-count independent per-draw seeds.
fn draw_seeds(count: usize, rng: &mut Rng) -> Vec<u64> {
    (0..count).map(|_| rng.random()).collect()
}

/// Guided DDPM sampling with the exact prior noise and the posterior hook at
/// `λ = 1` (or unguided when `guided` is false), compared to the posterior
/// (or prior). A Langevin corrector at the last level removes the residual
/// bias of guiding every level with the clean-action likelihood; it runs
/// 1000 steps of size `0.02 / L`, `L` the Lipschitz constant of the guided
/// score at that level.
pub fn check_lemma1(
    spec: &PosteriorSpec,
    schedule: &DiffusionSchedule,
    samples: usize,
    guided: bool,
    rng: &mut Rng,
) -> Result<MomentReport> {
    spec.validate()?;
    if schedule.steps() < 500 || samples < 10_000 {
        return Err(Error::InvalidArgument("need K ≥ 500 and at least 10^4 samples".into()));
    }
    let prior = GaussianPriorNoise::new(spec.prior_mean.clone(), spec.prior_cov.clone(), schedule)?;
    let (precision, _) = spd_inverse_logdet(&spec.sigma_y, "observation noise")?;
    let lambda = if guided { 1.0 } else { 0.0 };
    let info = spectral_norm(&(spec.m.transpose() * &precision * &spec.m));
    let lipschitz = spectral_norm(prior.precision(1)) + lambda * info;
    let options = SamplerOptions {
        corrector: guided.then_some(LangevinCorrector {
            level: 1,
            steps: 1000,
            step_size: 0.02 / lipschitz,
        }),
    };
    let seeds = draw_seeds(samples, rng);
    let state: [f64; 0] = [];
    let draws = map_indexed(&seeds, |_, &seed| {
        let mut r = seeded_rng(seed);
        if guided {
            let mut hook = PosteriorHook {
                m: spec.m.clone(),
                precision: precision.clone(),
                y: Vector::from_column_slice(&spec.y),
                lambda,
            };
            ddpm_sample_with(&prior, schedule, &state, &mut r, Some(&mut hook), options)
        } else {
            ddpm_sample(&prior, schedule, &state, &mut r, None)
        }
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let (mean, cov) = if guided {
        gaussian_posterior(spec)?
    } else {
        (spec.prior_mean.clone(), spec.prior_cov.clone())
    };
    Ok(MomentReport::from_samples(&draws, mean, cov))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prop2Report {
    pub estimate: Vec<f64>,
    pub analytic: Vec<f64>,
    pub cosine: f64,
    pub pass: bool,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Monte Carlo `(1/N) Σ r_i ∇_a log p(s'_i, r_i | s, do(a))` over model
/// rollouts, compared in direction with `∇_a E[r | s, do(a)] = B_a + F_aᵀ B_s`.
pub fn check_prop2(
    dynamics: &CausalDynamics,
    s: &[f64],
    a: &[f64],
    samples: usize,
    rng: &mut Rng,
) -> Result<Prop2Report> {
    let (jac, b) = match (
        dynamics.linear_action_jacobian(),
        dynamics.transition_model(),
        dynamics.reward_model(),
    ) {
        (Some(j), TransitionModel::Linear { .. }, RewardModel::Linear { b_s, .. }) => {
            let u = &dynamics.masks().u_sr;
            (
                j,
                b_s.iter()
                    .zip(u)
                    .map(|(&b, &m)| if m == 0.0 { 0.0 } else { b * m })
                    .collect::<Vec<f64>>(),
            )
        }
        _ => {
            return Err(Error::InvalidArgument(
                "the gradient oracle needs linear dynamics".into(),
            ))
        }
    };
    if samples == 0 {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let d = dynamics.action_dim();
    let direct = dynamics.linear_reward_action_weights().expect("linear reward");
    let analytic: Vec<f64> = (0..d)
        .map(|j| direct[j] + (0..b.len()).map(|i| jac[(i, j)] * b[i]).sum::<f64>())
        .collect();
    let mut estimate = vec![0.0; d];
    for _ in 0..samples {
        let (s_next, r) = sample_intervention(dynamics, s, a, rng)?;
        let g = dynamics.do_intervention_joint_grad(s, a, &s_next, r, 1.0, 1.0)?;
        for j in 0..d {
            estimate[j] += r * g[j] / samples as f64;
        }
    }
    let c = cosine(&estimate, &analytic);
    Ok(Prop2Report {
        estimate,
        analytic,
        cosine: c,
        pass: c >= 0.95,
    })
}

/// A linear guided SDE with exact Lipschitz constants.
#[derive(Debug, Clone)]
pub struct StabilityInstance {
    pub dynamics: CausalDynamics,
    pub score: LinearScore,
    pub beta: BetaFn,
    pub guidance: GuidanceConfig,
    pub s: Vec<f64>,
    pub s_next: Vec<f64>,
    pub r: f64,
}

/// The ground-truth SCM as a linear causal dynamics model.
pub fn scm_dynamics(scm: &GroundTruthScm) -> Result<CausalDynamics> {
    let p = scm.params();
    CausalDynamics::new(
        exact_masks(scm),
        TransitionModel::Linear {
            f_s: p.f_s.clone(),
            f_a: p.f_a.clone(),
        },
        RewardModel::Linear {
            b_s: p.b_s.clone(),
            b_a: p.b_a.clone(),
        },
        p.sigma_phi.clone(),
        p.sigma_omega,
    )
}

fn linear_dynamics(f_a: Matrix, b_a: Vec<f64>, sigma_phi: Matrix, sigma_omega: f64) -> Result<CausalDynamics> {
    let (n, d) = (f_a.nrows(), f_a.ncols());
    CausalDynamics::new(
        CausalMasks::ones(n, d),
        TransitionModel::Linear {
            f_s: Matrix::zeros(n, n),
            f_a,
        },
        RewardModel::Linear { b_s: vec![0.0; n], b_a },
        sigma_phi,
        sigma_omega,
    )
}

impl StabilityInstance {
    /// Random 3-state / 2-action instance whose prior precision has
    /// eigenvalues in `[1, 3]`, so the continuous-time drift is contracting.
    pub fn random_linear(seed: u64) -> Result<Self> {
        let mut rng = seeded_rng(seed);
        let f_a = Matrix::from_fn(3, 2, |_, _| standard_normal(&mut rng));
        let b_a = vec![standard_normal(&mut rng), standard_normal(&mut rng)];
        let q = Matrix::from_fn(2, 2, |_, _| standard_normal(&mut rng)).qr().q();
        let eig = Matrix::from_diagonal(&nalgebra::dvector![
            rng.random_range(1.0..3.0),
            rng.random_range(1.0..3.0)
        ]);
        let precision = &q * eig * q.transpose();
        Ok(Self {
            dynamics: linear_dynamics(f_a, b_a, Matrix::identity(3, 3), 0.5)?,
            score: LinearScore {
                precision,
                mean: vec![0.2, -0.1],
            },
            beta: BetaFn::Constant(1.0),
            guidance: GuidanceConfig {
                lambda: LambdaSchedule::Constant(1.0),
                gamma: 1.0,
                beta_guid: 1.0,
                r_star: 0.0,
                use_r_star: false,
            },
            s: vec![0.0; 3],
            s_next: (0..3).map(|_| standard_normal(&mut rng)).collect(),
            r: standard_normal(&mut rng),
        })
    }

    /// One-dimensional stiff instance: `L_f = 0.5`, `g² L_s = 90`,
    /// `γ L_φ = 9`, so the constants sum to 99.5.
    pub fn stiff() -> Result<Self> {
        Ok(Self {
            dynamics: linear_dynamics(Matrix::from_element(1, 1, 3.0), vec![0.0], Matrix::identity(1, 1), 1.0)?,
            score: LinearScore {
                precision: Matrix::from_element(1, 1, 90.0),
                mean: vec![0.0],
            },
            beta: BetaFn::Constant(1.0),
            guidance: GuidanceConfig {
                lambda: LambdaSchedule::Constant(1.0),
                gamma: 1.0,
                beta_guid: 0.0,
                r_star: 0.0,
                use_r_star: false,
            },
            s: vec![0.0],
            s_next: vec![0.5],
            r: 0.0,
        })
    }

    fn sde(&self) -> GuidedSde<'_> {
        GuidedSde {
            dynamics: &self.dynamics,
            score: &self.score,
            beta: self.beta,
            guidance: &self.guidance,
            s: &self.s,
            s_next: &self.s_next,
            r: self.r,
        }
    }

    pub fn max_step(&self, delta: f64) -> Result<f64> {
        let mut rng = seeded_rng(0);
        let mut bundle = estimate_lipschitz(&self.dynamics, &self.score, self.beta, delta, 100, &mut rng)?;
        // Exact for a linear score.
        bundle.l_s = spectral_norm(&self.score.precision);
        Ok(stability_max_step(&bundle, self.guidance.gamma, self.guidance.beta_guid, 0.0, 1.0)?.dt_max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityRow {
    pub instance: usize,
    pub seed: u64,
    pub multiple: f64,
    pub dt: f64,
    pub diverged: bool,
    pub terminal_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prop1Report {
    pub rows: Vec<StabilityRow>,
    /// No divergence at or below the bound.
    pub pass: bool,
    /// Divergences observed at 50x the bound.
    pub divergences_above: usize,
    pub note: Option<String>,
}

impl Prop1Report {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("instance,seed,multiple,dt,diverged,terminal_norm\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.instance,
                r.seed,
                r.multiple,
                fmt_sig(r.dt),
                u8::from(r.diverged),
                fmt_sig(r.terminal_norm)
            )
            .unwrap();
        }
        if let Some(n) = &self.note {
            writeln!(out, "# {n}").unwrap();
        }
        out
    }
}

pub const STEP_MULTIPLES: [f64; 5] = [0.1, 0.5, 1.0, 10.0, 50.0];

/// Euler–Maruyama sweep at multiples of the step bound, one row per
/// (instance, seed, multiple). Only the sufficiency direction is asserted.
pub fn check_prop1(instances: &[StabilityInstance], delta: f64, seeds: &[u64], steps: usize) -> Result<Prop1Report> {
    let mut jobs = Vec::new();
    for (i, inst) in instances.iter().enumerate() {
        let dt_max = inst.max_step(delta)?;
        if dt_max == 0.0 {
            return Ok(Prop1Report {
                rows: Vec::new(),
                pass: true,
                divergences_above: 0,
                note: Some("step bound is 0 (δ = 0); sweep skipped".into()),
            });
        }
        for &seed in seeds {
            for &mult in &STEP_MULTIPLES {
                jobs.push((i, seed, mult, mult * dt_max));
            }
        }
    }
    let rows = map_indexed(&jobs, |_, &(i, seed, mult, dt)| -> Result<StabilityRow> {
        let inst = &instances[i];
        let a0 = vec![0.0; inst.score.mean.len()];
        let tr = inst.sde().euler_maruyama(&a0, dt, steps, &mut seeded_rng(seed))?;
        let last = tr.path.last().expect("path holds the start");
        Ok(StabilityRow {
            instance: i,
            seed,
            multiple: mult,
            dt,
            diverged: tr.diverged,
            terminal_norm: last.iter().map(|x| x * x).sum::<f64>().sqrt(),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let pass = rows.iter().filter(|r| r.multiple <= 1.0).all(|r| !r.diverged);
    let divergences_above = rows.iter().filter(|r| r.multiple >= 50.0 && r.diverged).count();
    Ok(Prop1Report {
        rows,
        pass,
        divergences_above,
        note: None,
    })
}

/// Inputs of the performance-difference check.
pub struct Theorem1Setup<'a> {
    pub env: &'a Env,
    /// State-independent Gaussian base policy, sampled with its exact noise.
    pub prior: &'a GaussianPriorNoise,
    pub dynamics: &'a CausalDynamics,
    pub schedule: &'a DiffusionSchedule,
    pub guidance: GuidanceConfig,
    pub discount: f64,
    pub rollouts: usize,
    /// Stability margin capping `λ_k` per ancestral step; `None` disables.
    pub stability_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Theorem1Row {
    pub seed: u64,
    pub j_guided: f64,
    pub j_base: f64,
    pub gap: f64,
    pub kl: f64,
    pub bound: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Theorem1Report {
    pub rows: Vec<Theorem1Row>,
    pub sup_advantage_sq: f64,
}

impl Theorem1Report {
    pub fn hold_fraction(&self) -> f64 {
        self.rows.iter().filter(|r| r.holds).count() as f64 / self.rows.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,kl,bound,gap,j_guided,j_base,holds\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.seed,
                fmt_sig(r.kl),
                fmt_sig(r.bound),
                fmt_sig(r.gap),
                fmt_sig(r.j_guided),
                fmt_sig(r.j_base),
                u8::from(r.holds)
            )
            .unwrap();
        }
        out
    }
}

fn box_grid(d: usize, resolution: f64) -> Vec<Vec<f64>> {
    let ticks = (2.0 * ACTION_BOUND / resolution).round() as usize + 1;
    let mut out = Vec::with_capacity(ticks.pow(d as u32));
    let mut idx = vec![0usize; d];
    loop {
        out.push(idx.iter().map(|&i| -ACTION_BOUND + resolution * i as f64).collect());
        let mut j = 0;
        loop {
            if j == d {
                return out;
            }
            idx[j] += 1;
            if idx[j] < ticks {
                break;
            }
            idx[j] = 0;
            j += 1;
        }
    }
}

/// Mean over episode steps of `sup_a A_t(a)²` for the state-independent base
/// policy on lin-scm, where `A_t(s, a) = c_t · (a - E[a])` is exact and the
/// supremum is a grid search over the action box.
pub fn sup_advantage_sq(setup: &Theorem1Setup<'_>, resolution: f64, rng: &mut Rng) -> Result<f64> {
    let scm = setup.env.scm().ok_or(Error::InvalidArgument(
        "the advantage oracle needs a lin-scm environment".into(),
    ))?;
    let p = scm.params();
    let (n, d, h) = (scm.state_dim(), scm.action_dim(), setup.env.horizon());
    let state = vec![0.0; n];
    let mut mean_action = vec![0.0; d];
    let draws = 2000;
    for _ in 0..draws {
        let a = ddpm_sample(setup.prior, setup.schedule, &state, rng, None)?;
        for j in 0..d {
            mean_action[j] += a[j].clamp(-ACTION_BOUND, ACTION_BOUND) / draws as f64;
        }
    }
    let grid = box_grid(d, resolution);
    let mut v_next = vec![0.0; n];
    let mut total = 0.0;
    for _ in 0..h {
        let w: Vec<f64> = (0..n).map(|i| p.b_s[i] + setup.discount * v_next[i]).collect();
        let c: Vec<f64> = (0..d)
            .map(|j| p.b_a[j] + (0..n).map(|i| p.f_a[(i, j)] * w[i]).sum::<f64>())
            .collect();
        let base: f64 = c.iter().zip(&mean_action).map(|(x, m)| x * m).sum();
        let sup = grid
            .iter()
            .map(|a| (c.iter().zip(a).map(|(x, y)| x * y).sum::<f64>() - base).abs())
            .fold(0.0, f64::max);
        total += sup * sup;
        v_next = (0..n).map(|j| (0..n).map(|i| p.f_s[(i, j)] * w[i]).sum()).collect();
    }
    Ok(total / h as f64)
}

fn discounted_return(
    setup: &Theorem1Setup<'_>,
    guidance: Option<&GuidanceConfig>,
    seed: u64,
) -> Result<(f64, f64, usize)> {
    let env = setup.env;
    let mut rng = seeded_rng(seed);
    let mut state = env.reset(&mut rng);
    let (mut ret, mut disc, mut kl, mut steps) = (0.0, 1.0, 0.0, 0);
    while !state.done {
        let a = match guidance {
            Some(cfg) => {
                let cfg = GuidanceConfig {
                    r_star: env.optimal_reward_at(&state.obs),
                    ..cfg.clone()
                };
                let mut hook = make_guidance_hook(setup.dynamics, &cfg, &state.obs, Outcome::Predicted);
                let a = ddpm_sample(setup.prior, setup.schedule, &state.obs, &mut rng, Some(&mut hook))?;
                kl += hook.kl().total();
                a
            }
            None => ddpm_sample(setup.prior, setup.schedule, &state.obs, &mut rng, None)?,
        };
        let (next, r) = env.step(&state, &a, &mut rng)?;
        ret += disc * r;
        disc *= setup.discount;
        steps += 1;
        state = next;
    }
    Ok((ret, kl, steps))
}

/// Per seed: Monte Carlo `J` of the guided and base policies over shared
/// random streams, the mean per-step guidance KL, and the bound
/// `(1/(1-γ)) √(E sup A²) √(KL/2)`.
pub fn check_theorem1(setup: &Theorem1Setup<'_>, seeds: &[u64]) -> Result<Theorem1Report> {
    if setup.env.horizon() > 50 {
        return Err(Error::InvalidArgument(
            "the performance check needs horizon ≤ 50".into(),
        ));
    }
    let guidance = match setup.stability_delta {
        Some(delta) if !setup.guidance.is_inactive() => {
            let l = guidance_lipschitz(setup.dynamics, setup.guidance.gamma, setup.guidance.beta_guid)?;
            let caps = ddpm_stable_lambda_schedule(setup.schedule, f64::INFINITY, l, delta)?;
            GuidanceConfig {
                lambda: LambdaSchedule::PerStep(
                    (1..=setup.schedule.steps())
                        .map(|k| setup.guidance.lambda.at(k).min(caps.at(k)))
                        .collect(),
                ),
                ..setup.guidance.clone()
            }
        }
        _ => setup.guidance.clone(),
    };
    let sup_sq = sup_advantage_sq(setup, 0.05, &mut seeded_rng(0x5eed))?;
    let rows = map_indexed(seeds, |_, &seed| -> Result<Theorem1Row> {
        let mut rng = seeded_rng(seed);
        let streams: Vec<u64> = (0..setup.rollouts).map(|_| rng.random()).collect();
        let (mut jg, mut jb, mut kl, mut steps) = (0.0, 0.0, 0.0, 0usize);
        let guided = (!guidance.is_inactive()).then_some(&guidance);
        for &stream in &streams {
            let (rg, k, n) = discounted_return(setup, guided, stream)?;
            let (rb, _, _) = discounted_return(setup, None, stream)?;
            jg += rg / setup.rollouts as f64;
            jb += rb / setup.rollouts as f64;
            kl += k;
            steps += n;
        }
        let kl = kl / steps.max(1) as f64;
        let bound = sup_sq.sqrt() * (kl / 2.0).sqrt() / (1.0 - setup.discount);
        let gap = (jg - jb).abs();
        Ok(Theorem1Row {
            seed,
            j_guided: jg,
            j_base: jb,
            gap,
            kl,
            bound,
            holds: gap <= bound,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(Theorem1Report {
        rows,
        sup_advantage_sq: sup_sq,
    })
}

/// KL accumulated by the hook along one guided DDPM chain.
pub fn chain_kl(
    prior: &GaussianPriorNoise,
    schedule: &DiffusionSchedule,
    dynamics: &CausalDynamics,
    cfg: &GuidanceConfig,
    s: &[f64],
    rng: &mut Rng,
) -> Result<KlAccumulator> {
    let mut hook = make_guidance_hook(dynamics, cfg, s, Outcome::Predicted);
    ddpm_sample(prior, schedule, s, rng, Some(&mut hook))?;
    Ok(hook.into_kl())
}

/// Random 2-action / 3-state linear-Gaussian posterior problem: a Gaussian
/// action prior and one observed `(s', r)` from the model at `s = 0`.
pub fn lemma1_instance(seed: u64) -> Result<PosteriorSpec> {
    let mut rng = seeded_rng(seed);
    let f_a = Matrix::from_fn(3, 2, |_, _| 0.7 * standard_normal(&mut rng));
    let b_a: Vec<f64> = (0..2).map(|_| standard_normal(&mut rng)).collect();
    let sigma_phi = Matrix::identity(3, 3) * 0.5;
    let sigma_omega: f64 = 0.5;
    let l = Matrix::from_fn(2, 2, |_, _| 0.5 * standard_normal(&mut rng));
    let prior_cov = &l * l.transpose() + Matrix::identity(2, 2) * 0.5;
    let prior_mean: Vec<f64> = (0..2).map(|_| 0.3 * standard_normal(&mut rng)).collect();
    let a_true: Vec<f64> = (0..2).map(|_| standard_normal(&mut rng)).collect();
    let s_next: Vec<f64> = (0..3)
        .map(|i| (0..2).map(|j| f_a[(i, j)] * a_true[j]).sum::<f64>() + 0.5f64.sqrt() * standard_normal(&mut rng))
        .collect();
    let r = (0..2).map(|j| b_a[j] * a_true[j]).sum::<f64>() + sigma_omega.sqrt() * standard_normal(&mut rng);
    let spec = PosteriorSpec::from_linear(prior_mean, prior_cov, &f_a, &b_a, &sigma_phi, sigma_omega, &s_next, r);
    spec.validate()?;
    Ok(spec)
}

/// Random 3-state / 2-action linear-Gaussian dynamics with a query `(s, a)`.
pub fn prop2_instance(seed: u64) -> Result<(CausalDynamics, Vec<f64>, Vec<f64>)> {
    let mut rng = seeded_rng(seed);
    let f_s = Matrix::from_fn(3, 3, |_, _| 0.3 * standard_normal(&mut rng));
    let f_a = Matrix::from_fn(3, 2, |_, _| standard_normal(&mut rng));
    let b_s: Vec<f64> = (0..3).map(|_| standard_normal(&mut rng)).collect();
    let b_a: Vec<f64> = (0..2).map(|_| standard_normal(&mut rng)).collect();
    let dynamics = CausalDynamics::new(
        CausalMasks::ones(3, 2),
        TransitionModel::Linear { f_s, f_a },
        RewardModel::Linear { b_s, b_a },
        Matrix::identity(3, 3) * 0.25,
        0.25,
    )?;
    let s = standard_normal_vec(3, &mut rng);
    let a = standard_normal_vec(2, &mut rng);
    Ok((dynamics, s, a))
}

/// lin-scm environment, its true dynamics, a 50-level schedule and the
/// `N(0, 0.25 I)` base policy used by the performance check.
pub fn theorem1_parts(
    env_seed: u64,
    horizon: usize,
) -> Result<(Env, GaussianPriorNoise, CausalDynamics, DiffusionSchedule)> {
    let spec = crate::envs::EnvSpec {
        horizon,
        ..crate::envs::EnvSpec::lin_scm(env_seed)
    };
    let env = Env::new(spec)?;
    let dynamics = scm_dynamics(env.scm().expect("lin-scm"))?;
    let schedule = crate::diffusion::make_schedule(50, 1e-4, 0.2)?;
    let d = env.action_dim();
    let prior = GaussianPriorNoise::new(vec![0.0; d], Matrix::identity(d, d) * 0.25, &schedule)?;
    Ok((env, prior, dynamics, schedule))
}

/// Guidance used by the performance check at strength `lambda`.
pub fn theorem1_guidance(lambda: f64) -> GuidanceConfig {
    GuidanceConfig {
        lambda: LambdaSchedule::Constant(lambda),
        gamma: 1.0,
        beta_guid: 1.0,
        r_star: 0.0,
        use_r_star: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;
    use approx::assert_relative_eq;

    fn scalar_spec(y: f64, sigma_y: f64, m: f64) -> PosteriorSpec {
        PosteriorSpec {
            prior_mean: vec![0.0],
            prior_cov: Matrix::identity(1, 1),
            m: Matrix::from_element(1, 1, m),
            sigma_y: Matrix::from_element(1, 1, sigma_y),
            y: vec![y],
        }
    }

    #[test]
    fn scalar_posterior() {
        let (mean, cov) = gaussian_posterior(&scalar_spec(2.0, 1.0, 1.0)).unwrap();
        assert_relative_eq!(mean[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(cov[(0, 0)], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn uninformative_observation_returns_prior() {
        let (mean, cov) = gaussian_posterior(&scalar_spec(2.0, 1.0, 0.0)).unwrap();
        assert_eq!(mean, vec![0.0]);
        assert_eq!(cov[(0, 0)], 1.0);
        let (mean, cov) = gaussian_posterior(&scalar_spec(2.0, 1e12, 1.0)).unwrap();
        assert!(mean[0].abs() < 1e-6);
        assert!((cov[(0, 0)] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn sequential_conditioning_matches_stacked() {
        let mut rng = seeded_rng(3);
        let mut g = |r, c| Matrix::from_fn(r, c, |_, _| standard_normal(&mut rng));
        let a = g(3, 3);
        let prior_cov = &a * a.transpose() + Matrix::identity(3, 3);
        let (m1, m2) = (g(2, 3), g(2, 3));
        let (y1, y2) = (vec![0.3, -1.0], vec![1.2, 0.4]);
        let first = gaussian_posterior(&PosteriorSpec {
            prior_mean: vec![0.1, 0.0, -0.2],
            prior_cov: prior_cov.clone(),
            m: m1.clone(),
            sigma_y: Matrix::identity(2, 2) * 0.5,
            y: y1.clone(),
        })
        .unwrap();
        let two = gaussian_posterior(&PosteriorSpec {
            prior_mean: first.0,
            prior_cov: first.1,
            m: m2.clone(),
            sigma_y: Matrix::identity(2, 2) * 0.5,
            y: y2.clone(),
        })
        .unwrap();
        let stacked = gaussian_posterior(&PosteriorSpec {
            prior_mean: vec![0.1, 0.0, -0.2],
            prior_cov,
            m: Matrix::from_fn(4, 3, |i, j| if i < 2 { m1[(i, j)] } else { m2[(i - 2, j)] }),
            sigma_y: Matrix::identity(4, 4) * 0.5,
            y: y1.into_iter().chain(y2).collect(),
        })
        .unwrap();
        for j in 0..3 {
            assert!((two.0[j] - stacked.0[j]).abs() < 1e-8);
        }
        assert!((two.1 - stacked.1).norm() < 1e-8);
    }

    #[test]
    fn lemma1_scalar_moments() {
        let schedule = make_schedule(1000, 1e-4, 0.02).unwrap();
        let report = check_lemma1(&scalar_spec(2.0, 1.0, 1.0), &schedule, 20_000, true, &mut seeded_rng(1)).unwrap();
        assert!((0.95..=1.05).contains(&report.sample_mean[0]), "{}", report.summary());
        assert!(
            (0.45..=0.55).contains(&report.sample_cov[(0, 0)]),
            "{}",
            report.summary()
        );
        assert!(report.pass);
    }

    #[test]
    fn lemma1_unguided_recovers_prior() {
        let schedule = make_schedule(500, 1e-4, 0.02).unwrap();
        let report = check_lemma1(
            &scalar_spec(2.0, 1.0, 1.0),
            &schedule,
            10_000,
            false,
            &mut seeded_rng(2),
        )
        .unwrap();
        assert!(report.pass, "{}", report.summary());
        assert_eq!(report.target_mean, vec![0.0]);
    }

    #[test]
    fn lemma1_rejects_small_runs() {
        let schedule = make_schedule(100, 1e-4, 0.02).unwrap();
        assert!(check_lemma1(&scalar_spec(2.0, 1.0, 1.0), &schedule, 20_000, true, &mut seeded_rng(0)).is_err());
    }

    fn linear_dyn(f_a: Matrix, b_a: Vec<f64>, b_s: Vec<f64>) -> CausalDynamics {
        let n = f_a.nrows();
        CausalDynamics::new(
            CausalMasks::ones(n, f_a.ncols()),
            TransitionModel::Linear {
                f_s: Matrix::zeros(n, n),
                f_a,
            },
            RewardModel::Linear { b_s, b_a },
            Matrix::identity(n, n) * 0.25,
            0.25,
        )
        .unwrap()
    }

    #[test]
    fn prop2_zero_effect_gives_small_estimate() {
        let dyn_ = linear_dyn(Matrix::zeros(2, 2), vec![0.0, 0.0], vec![1.0, -1.0]);
        let n = 10_000;
        let rep = check_prop2(&dyn_, &[0.5, 0.5], &[0.2, -0.3], n, &mut seeded_rng(4)).unwrap();
        let norm = rep.estimate.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm < 3.0 / (n as f64).sqrt(), "{norm}");
    }

    #[test]
    fn prop2_scalar_sign() {
        let dyn_ = linear_dyn(Matrix::zeros(1, 1), vec![2.0], vec![0.0]);
        let positive = (0..100)
            .filter(|&seed| {
                check_prop2(&dyn_, &[0.0], &[0.5], 1000, &mut seeded_rng(seed))
                    .unwrap()
                    .estimate[0]
                    > 0.0
            })
            .count();
        assert!(positive >= 99);
    }

    #[test]
    fn prop2_scales_with_rewards() {
        let base = linear_dyn(Matrix::from_element(1, 1, 1.0), vec![1.0], vec![1.0]);
        let doubled = linear_dyn(Matrix::from_element(1, 1, 1.0), vec![2.0], vec![2.0]);
        let s = [0.0];
        let a = [0.3];
        let r1 = check_prop2(&base, &s, &a, 10_000, &mut seeded_rng(9)).unwrap();
        let r2 = check_prop2(&doubled, &s, &a, 10_000, &mut seeded_rng(9)).unwrap();
        assert_relative_eq!(r2.analytic[0], 2.0 * r1.analytic[0]);
        assert!(r1.pass && r2.pass);
        let ratio = r2.estimate[0] / r1.estimate[0];
        assert!((ratio - 2.0).abs() < 0.3, "{ratio}");
    }

    #[test]
    fn prop1_bound_is_safe_and_stiff_case_diverges() {
        let instances: Vec<_> = (0..3).map(|s| StabilityInstance::random_linear(s).unwrap()).collect();
        let rep = check_prop1(&instances, 0.5, &[1, 2], 200).unwrap();
        assert!(rep.pass);
        assert_eq!(rep.rows.len(), 3 * 2 * STEP_MULTIPLES.len());
        let stiff = check_prop1(&[StabilityInstance::stiff().unwrap()], 0.5, &[1, 2, 3], 200).unwrap();
        assert!(stiff.pass);
        assert!(stiff.divergences_above >= 1);
    }

    #[test]
    fn prop1_zero_margin_skips() {
        let rep = check_prop1(&[StabilityInstance::stiff().unwrap()], 0.0, &[1], 10).unwrap();
        assert!(rep.rows.is_empty());
        assert!(rep.note.is_some());
    }

    #[test]
    fn stiff_constants_sum() {
        let inst = StabilityInstance::stiff().unwrap();
        assert_relative_eq!(inst.max_step(0.5).unwrap(), 0.5 / 99.5, epsilon = 1e-9);
    }

    fn theorem_setup<'a>(
        env: &'a Env,
        prior: &'a GaussianPriorNoise,
        dyn_: &'a CausalDynamics,
        schedule: &'a DiffusionSchedule,
        lambda: f64,
    ) -> Theorem1Setup<'a> {
        Theorem1Setup {
            env,
            prior,
            dynamics: dyn_,
            schedule,
            guidance: theorem1_guidance(lambda),
            discount: 0.99,
            rollouts: 50,
            stability_delta: Some(0.5),
        }
    }

    fn theorem_parts() -> (Env, GaussianPriorNoise, CausalDynamics, DiffusionSchedule) {
        theorem1_parts(0, 10).unwrap()
    }

    #[test]
    fn theorem1_zero_guidance_is_trivially_tight() {
        let (env, prior, dyn_, schedule) = theorem_parts();
        let setup = theorem_setup(&env, &prior, &dyn_, &schedule, 0.0);
        let rep = check_theorem1(&setup, &[1]).unwrap();
        assert_eq!(rep.rows[0].gap, 0.0);
        assert_eq!(rep.rows[0].bound, 0.0);
        assert!(rep.rows[0].holds);
    }

    #[test]
    fn theorem1_small_guidance_holds() {
        let (env, prior, dyn_, schedule) = theorem_parts();
        let setup = theorem_setup(&env, &prior, &dyn_, &schedule, 0.01);
        let rep = check_theorem1(&setup, &[1, 2]).unwrap();
        assert!(rep.rows.iter().all(|r| r.holds && r.kl > 0.0), "{rep:?}");
    }

    #[test]
    fn box_grid_covers_corners() {
        let g = box_grid(2, 0.5);
        assert_eq!(g.len(), 25);
        assert!(g.contains(&vec![-1.0, -1.0]) && g.contains(&vec![1.0, 1.0]));
    }
}

#[cfg(test)]
mod instance_tests {
    use super::*;

    #[test]
    fn builders_are_deterministic_and_valid() {
        assert_eq!(lemma1_instance(3).unwrap(), lemma1_instance(3).unwrap());
        let spec = lemma1_instance(3).unwrap();
        assert_eq!((spec.m.nrows(), spec.m.ncols()), (4, 2));
        let (d, s, a) = prop2_instance(1).unwrap();
        assert_eq!((d.state_dim(), s.len(), a.len()), (3, 3, 2));
        let rep = check_prop2(&d, &s, &a, 10_000, &mut seeded_rng(0)).unwrap();
        assert!(rep.pass, "{rep:?}");
    }
}
