//! Causal guidance: guided noise and score, the sampler hook, the path-space
//! KL accumulator, and the explicit-Euler stability bound for the guided SDE.

use crate::diffusion::{DiffusionSchedule, NoisePredictor, SamplerHook};
use crate::dynamics::CausalDynamics;
use crate::error::{check_dim, Error, Result};
use crate::numerics::{norm, spectral_norm, standard_normal, Matrix, Rng};
use rand::Rng as _;

/// Guidance scale per diffusion step.
#[derive(Debug, Clone, PartialEq)]
pub enum LambdaSchedule {
    Constant(f64),
    /// Entry `k - 1` is `λ_k`.
    PerStep(Vec<f64>),
}

impl LambdaSchedule {
    pub fn at(&self, k: usize) -> f64 {
        match self {
            Self::Constant(x) => *x,
            Self::PerStep(v) => v.get(k.saturating_sub(1)).copied().unwrap_or(0.0),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Self::Constant(x) => *x == 0.0,
            Self::PerStep(v) => v.iter().all(|&x| x == 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceConfig {
    pub lambda: LambdaSchedule,
    /// Weight of the next-state log-density term.
    pub gamma: f64,
    /// Weight of the reward log-density term (not the noise schedule).
    pub beta_guid: f64,
    pub r_star: f64,
    pub use_r_star: bool,
}

impl GuidanceConfig {
    pub fn disabled() -> Self {
        Self {
            lambda: LambdaSchedule::Constant(0.0),
            gamma: 0.0,
            beta_guid: 0.0,
            r_star: 0.0,
            use_r_star: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lambdas_ok = match &self.lambda {
            LambdaSchedule::Constant(x) => x.is_finite() && *x >= 0.0,
            LambdaSchedule::PerStep(v) => v.iter().all(|x| x.is_finite() && *x >= 0.0),
        };
        if !lambdas_ok || !self.gamma.is_finite() || !self.beta_guid.is_finite() || !self.r_star.is_finite() {
            return Err(Error::InvalidArgument(
                "guidance coefficients must be finite, λ ≥ 0".into(),
            ));
        }
        Ok(())
    }

    /// True when no step can produce a nonzero correction.
    pub fn is_inactive(&self) -> bool {
        self.lambda.is_zero() || (self.gamma == 0.0 && self.beta_guid == 0.0)
    }
}

/// `ε^cg = ε - λ √(1-ᾱ) ∇`. With `λ = 0` the raw prediction is returned as is.
pub fn guided_noise(eps_raw: &[f64], causal_grad: &[f64], lambda: f64, alpha_bar: f64) -> Result<Vec<f64>> {
    check_dim("causal gradient", eps_raw.len(), causal_grad.len())?;
    if !(alpha_bar > 0.0 && alpha_bar < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha_bar {alpha_bar} outside (0, 1)")));
    }
    if lambda == 0.0 {
        return Ok(eps_raw.to_vec());
    }
    let c = lambda * (1.0 - alpha_bar).sqrt();
    Ok(eps_raw.iter().zip(causal_grad).map(|(e, g)| e - c * g).collect())
}

/// `score + λ ∇`.
pub fn guided_score(score: &[f64], causal_grad: &[f64], lambda: f64) -> Vec<f64> {
    score.iter().zip(causal_grad).map(|(s, g)| s + lambda * g).collect()
}

/// Running `∫ ‖correction / g‖² dt` along one trajectory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KlAccumulator {
    total: f64,
    records: Vec<f64>,
}

impl KlAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, correction: &[f64], g: f64, dt: f64) -> Result<()> {
        if !(g > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "diffusion coefficient must be positive, got {g}"
            )));
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
        }
        let inc = correction.iter().map(|c| (c / g).powi(2)).sum::<f64>() * dt;
        self.total += inc;
        self.records.push(inc);
        Ok(())
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn records(&self) -> &[f64] {
        &self.records
    }

    pub fn reset(&mut self) {
        self.total = 0.0;
        self.records.clear();
    }
}

/// `kl_path_integral` in functional form.
pub fn kl_path_integral(mut acc: KlAccumulator, correction: &[f64], g: f64, dt: f64) -> Result<KlAccumulator> {
    acc.add(correction, g, dt)?;
    Ok(acc)
}

/// Where the hook takes `(s', r)` from.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    /// A recorded transition (replay).
    Observed { s_next: Vec<f64>, r: f64 },
    /// Not yet observed: use the model mean `f_phi(s, a^k)`.
    Predicted,
}

/// Sampler hook applying causal guidance at state `s`.
pub struct CausalGuidanceHook<'a> {
    dynamics: &'a CausalDynamics,
    cfg: &'a GuidanceConfig,
    s: &'a [f64],
    outcome: Outcome,
    kl: KlAccumulator,
}

impl<'a> CausalGuidanceHook<'a> {
    pub fn new(dynamics: &'a CausalDynamics, cfg: &'a GuidanceConfig, s: &'a [f64], outcome: Outcome) -> Self {
        Self {
            dynamics,
            cfg,
            s,
            outcome,
            kl: KlAccumulator::new(),
        }
    }

    pub fn kl(&self) -> &KlAccumulator {
        &self.kl
    }

    pub fn into_kl(self) -> KlAccumulator {
        self.kl
    }

    /// `γ ∇ log p(s'|s,do(a)) + β ∇ log p(r|s',do(a))` at `a`.
    pub fn causal_gradient(&self, a: &[f64]) -> Result<Vec<f64>> {
        let predicted;
        let (s_next, observed_r) = match &self.outcome {
            Outcome::Observed { s_next, r } => (s_next.as_slice(), Some(*r)),
            Outcome::Predicted => {
                predicted = self.dynamics.predict_next_state(self.s, a)?;
                (predicted.as_slice(), None)
            }
        };
        let r = if self.cfg.use_r_star {
            self.cfg.r_star
        } else {
            match observed_r {
                Some(r) => r,
                None => self.dynamics.predict_reward(s_next, a)?,
            }
        };
        self.dynamics
            .do_intervention_joint_grad(self.s, a, s_next, r, self.cfg.gamma, self.cfg.beta_guid)
    }
}

/// Guidance correction in noise space at level `k`, plus the KL increment.
/// Shared by the hook and the differentiable actor chain.
pub fn hook_correction(
    grad: &[f64],
    lambda: f64,
    k: usize,
    schedule: &DiffusionSchedule,
    kl: Option<&mut KlAccumulator>,
) -> Result<Vec<f64>> {
    let ab = schedule.alpha_bar(k);
    let scale = lambda * (1.0 - ab).sqrt();
    if let Some(acc) = kl {
        // Drift correction λ g² ∇ with g² = K β_k over a step of 1/K.
        let steps = schedule.steps() as f64;
        let g2 = steps * schedule.beta(k);
        let drift: Vec<f64> = grad.iter().map(|x| lambda * g2 * x).collect();
        acc.add(&drift, g2.sqrt(), 1.0 / steps)?;
    }
    Ok(grad.iter().map(|x| scale * x).collect())
}

impl SamplerHook for CausalGuidanceHook<'_> {
    fn correction(&mut self, a_k: &[f64], k: usize, schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
        let lambda = self.cfg.lambda.at(k);
        if lambda == 0.0 || (self.cfg.gamma == 0.0 && self.cfg.beta_guid == 0.0) {
            return Ok(vec![0.0; a_k.len()]);
        }
        let grad = self.causal_gradient(a_k)?;
        hook_correction(&grad, lambda, k, schedule, Some(&mut self.kl))
    }
}

/// `make_guidance_hook`: a hook for state `s` with the given outcome source.
pub fn make_guidance_hook<'a>(
    dynamics: &'a CausalDynamics,
    cfg: &'a GuidanceConfig,
    s: &'a [f64],
    outcome: Outcome,
) -> CausalGuidanceHook<'a> {
    CausalGuidanceHook::new(dynamics, cfg, s, outcome)
}

/// `β(t)` of the variance-preserving SDE; `g(t)² = β(t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BetaFn {
    Constant(f64),
    /// `β(t) = start + (end - start) t` for `t ∈ [0, 1]`, clamped outside.
    Linear {
        start: f64,
        end: f64,
    },
}

impl BetaFn {
    pub fn at(&self, t: f64) -> f64 {
        match *self {
            Self::Constant(b) => b,
            Self::Linear { start, end } => start + (end - start) * t.clamp(0.0, 1.0),
        }
    }

    pub fn max(&self) -> f64 {
        match *self {
            Self::Constant(b) => b,
            Self::Linear { start, end } => start.max(end),
        }
    }

    /// Continuous-time counterpart of a discrete schedule: `β(t) = K β_k`.
    pub fn from_schedule(schedule: &DiffusionSchedule) -> Self {
        let k = schedule.steps() as f64;
        Self::Linear {
            start: k * schedule.beta(1),
            end: k * schedule.beta(schedule.steps()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzBundle {
    pub l_f: f64,
    pub l_s: f64,
    pub l_phi: f64,
    pub l_omega: f64,
    pub beta: BetaFn,
    pub delta: f64,
    /// Probe count behind empirical constants; 0 when they are exact.
    pub probes: usize,
}

impl LipschitzBundle {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.l_f, self.l_s, self.l_phi, self.l_omega]
            .iter()
            .all(|x| x.is_finite() && *x >= 0.0)
            && (0.0..1.0).contains(&self.delta);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid Lipschitz bundle {self:?}")))
        }
    }

    /// `L_f + g(t)² L_s + |γ| L_φ + |β| L_ω`.
    pub fn l_sum(&self, gamma: f64, beta_guid: f64, t: f64) -> f64 {
        self.l_f + self.beta.at(t) * self.l_s + gamma.abs() * self.l_phi + beta_guid.abs() * self.l_omega
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepBound {
    pub dt_max: f64,
    /// Set when the sum of constants is zero and `dt_max` is the cap.
    pub capped: bool,
}

/// Largest explicit-Euler step `δ / L_sum` keeping the guided SDE stable.
pub fn stability_max_step(bundle: &LipschitzBundle, gamma: f64, beta_guid: f64, t: f64, cap: f64) -> Result<StepBound> {
    bundle.validate()?;
    let l = bundle.l_sum(gamma, beta_guid, t);
    if !l.is_finite() {
        return Err(Error::NonFinite("Lipschitz sum"));
    }
    if l == 0.0 {
        return Ok(StepBound {
            dt_max: cap,
            capped: true,
        });
    }
    Ok(StepBound {
        dt_max: bundle.delta / l,
        capped: false,
    })
}

/// Relative size of the guidance move in one DDIM stride `k -> k_prev`:
/// with `a' = c₁ a + c₂ ε̂`, a correction of slope `λ √(1-ᾱ_k) L` changes the
/// contraction of `a` by `λ L |c₂| √(1-ᾱ_k) / c₁`.
pub fn ddim_stride_gain(schedule: &DiffusionSchedule, k: usize, k_prev: usize) -> f64 {
    let (ab, abp) = (schedule.alpha_bar(k), schedule.alpha_bar(k_prev));
    let c1 = (abp / ab).sqrt();
    let c2 = (1.0 - abp).sqrt() - (abp * (1.0 - ab) / ab).sqrt();
    c2.abs() * (1.0 - ab).sqrt() / c1
}

/// Per-level `λ_k = min(λ, δ / (gain_k L_guide))`, where `gain_k` is the
/// largest stride gain over `level_sets` among strides containing `k`. Keeps
/// every guided DDIM stride within the explicit-Euler stability margin `δ`.
pub fn stable_lambda_schedule(
    schedule: &DiffusionSchedule,
    level_sets: &[&[usize]],
    lambda: f64,
    l_guide: f64,
    delta: f64,
) -> Result<LambdaSchedule> {
    if !(lambda >= 0.0) || !(l_guide >= 0.0) || !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument("need λ ≥ 0, L ≥ 0 and δ in (0, 1)".into()));
    }
    let steps = schedule.steps();
    let mut gain = vec![0.0f64; steps];
    for levels in level_sets {
        for w in levels.windows(2) {
            let g = ddim_stride_gain(schedule, w[0], w[1]);
            for k in (w[1] + 1)..=w[0] {
                gain[k - 1] = gain[k - 1].max(g);
            }
        }
    }
    Ok(LambdaSchedule::PerStep(
        gain.iter()
            .map(|&g| {
                let den = g * l_guide;
                if den > 0.0 {
                    lambda.min(delta / den)
                } else {
                    lambda
                }
            })
            .collect(),
    ))
}

/// Ancestral (DDPM) counterpart: the guidance enters the step as `λ β_k ∇`,
/// so `λ_k = min(λ, δ / (β_k L_guide))`.
pub fn ddpm_stable_lambda_schedule(
    schedule: &DiffusionSchedule,
    lambda: f64,
    l_guide: f64,
    delta: f64,
) -> Result<LambdaSchedule> {
    if !(lambda >= 0.0) || !(l_guide >= 0.0) || !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument("need λ ≥ 0, L ≥ 0 and δ in (0, 1)".into()));
    }
    Ok(LambdaSchedule::PerStep(
        schedule
            .betas()
            .iter()
            .map(|b| {
                let den = b * l_guide;
                if den > 0.0 {
                    lambda.min(delta / den)
                } else {
                    lambda
                }
            })
            .collect(),
    ))
}

/// `|γ| L_φ + |β| L_ω` of the causal gradient in the action.
pub fn guidance_lipschitz(dynamics: &CausalDynamics, gamma: f64, beta_guid: f64) -> Result<f64> {
    let score = LinearScore {
        precision: Matrix::zeros(dynamics.action_dim(), dynamics.action_dim()),
        mean: vec![0.0; dynamics.action_dim()],
    };
    let mut rng = crate::numerics::seeded_rng(0);
    let b = estimate_lipschitz(dynamics, &score, BetaFn::Constant(0.0), 0.5, 200, &mut rng)?;
    Ok(gamma.abs() * b.l_phi + beta_guid.abs() * b.l_omega)
}

/// Score of the (noisy) action distribution at SDE time `t`.
pub trait ActionScore {
    fn action_dim(&self) -> usize;
    fn score(&self, a: &[f64], s: &[f64], t: f64) -> Result<Vec<f64>>;
}

/// Gaussian score `-P (a - m)`, time independent.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearScore {
    pub precision: Matrix,
    pub mean: Vec<f64>,
}

impl ActionScore for LinearScore {
    fn action_dim(&self) -> usize {
        self.mean.len()
    }

    fn score(&self, a: &[f64], _s: &[f64], _t: f64) -> Result<Vec<f64>> {
        check_dim("action", self.mean.len(), a.len())?;
        let d = a.len();
        Ok((0..d)
            .map(|i| {
                -(0..d)
                    .map(|j| self.precision[(i, j)] * (a[j] - self.mean[j]))
                    .sum::<f64>()
            })
            .collect())
    }
}

/// Score read off a noise predictor; reverse time `t ∈ [0, 1]` maps to level
/// `k = ⌈(1 - t) K⌉`.
pub struct NetScore<'a> {
    pub net: &'a dyn NoisePredictor,
    pub schedule: &'a DiffusionSchedule,
}

impl NetScore<'_> {
    pub fn level(&self, t: f64) -> usize {
        let steps = self.schedule.steps();
        (((1.0 - t) * steps as f64).ceil() as usize).clamp(1, steps)
    }
}

impl ActionScore for NetScore<'_> {
    fn action_dim(&self) -> usize {
        self.net.action_dim()
    }

    fn score(&self, a: &[f64], s: &[f64], t: f64) -> Result<Vec<f64>> {
        let k = self.level(t);
        let eps = self.net.predict_noise(a, s, k, self.schedule)?;
        crate::diffusion::score_from_noise(&eps, self.schedule.alpha_bar(k))
    }
}

/// Lipschitz constants of the guided drift's components.
///
/// Linear dynamics give exact constants `‖Jᵀ Σ_φ⁻¹ J‖₂` and `‖b‖² / Σ_ω`;
/// MLP dynamics and the score are probed on random pairs in `[-2, 2]^d`,
/// which can only under-estimate.
pub fn estimate_lipschitz(
    dynamics: &CausalDynamics,
    score: &dyn ActionScore,
    beta: BetaFn,
    delta: f64,
    probes: usize,
    rng: &mut Rng,
) -> Result<LipschitzBundle> {
    if probes < 100 {
        return Err(Error::InvalidArgument(format!(
            "need at least 100 probes, got {probes}"
        )));
    }
    let (n, d) = (dynamics.state_dim(), dynamics.action_dim());
    let uniform = |len: usize, rng: &mut Rng| -> Vec<f64> { (0..len).map(|_| rng.random_range(-2.0..2.0)).collect() };
    let ratio = |f: &dyn Fn(&[f64]) -> Result<Vec<f64>>, rng: &mut Rng| -> Result<f64> {
        let mut best: f64 = 0.0;
        for _ in 0..probes {
            let a = uniform(d, rng);
            let b = uniform(d, rng);
            let da: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            let (fa, fb) = (f(&a)?, f(&b)?);
            let df: Vec<f64> = fa.iter().zip(&fb).map(|(x, y)| x - y).collect();
            let den = norm(&da);
            if den > 0.0 {
                best = best.max(norm(&df) / den);
            }
        }
        Ok(best)
    };
    let s = vec![0.0; n];
    let (l_phi, l_omega, empirical) = match (
        dynamics.linear_action_jacobian(),
        dynamics.linear_reward_action_weights(),
    ) {
        (Some(j), Some(b)) => {
            let h = j.transpose() * dynamics.sigma_phi_inv() * &j;
            (
                spectral_norm(&h),
                b.iter().map(|x| x * x).sum::<f64>() / dynamics.sigma_omega(),
                false,
            )
        }
        _ => {
            let s_next = vec![0.0; n];
            let lp = ratio(&|a: &[f64]| Ok(dynamics.transition_logpdf_grad(&s, a, &s_next)?.1), rng)?;
            let lo = ratio(&|a: &[f64]| Ok(dynamics.reward_logpdf_grad(&s_next, a, 0.0)?.1), rng)?;
            (lp, lo, true)
        }
    };
    let mut l_s: f64 = 0.0;
    for t in [0.0, 0.5, 1.0] {
        l_s = l_s.max(ratio(&|a: &[f64]| score.score(a, &s, t), rng)?);
    }
    Ok(LipschitzBundle {
        l_f: 0.5 * beta.max(),
        l_s,
        l_phi,
        l_omega,
        beta,
        delta,
        probes: if empirical { probes } else { 0 },
    })
}

/// The guided reverse SDE at a fixed state and observed outcome.
pub struct GuidedSde<'a> {
    pub dynamics: &'a CausalDynamics,
    pub score: &'a dyn ActionScore,
    pub beta: BetaFn,
    pub guidance: &'a GuidanceConfig,
    pub s: &'a [f64],
    pub s_next: &'a [f64],
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmTrajectory {
    pub path: Vec<Vec<f64>>,
    pub diverged: bool,
}

pub const DIVERGENCE_NORM: f64 = 1e6;

impl GuidedSde<'_> {
    /// Drift in reverse-process time: `½β a + β ∇log p_t + γ ∇log p_φ + β_g ∇log p_ω`.
    pub fn drift(&self, a: &[f64], t: f64) -> Result<Vec<f64>> {
        let b = self.beta.at(t);
        let score = self.score.score(a, self.s, t)?;
        let r = if self.guidance.use_r_star {
            self.guidance.r_star
        } else {
            self.r
        };
        let guide = self.dynamics.do_intervention_joint_grad(
            self.s,
            a,
            self.s_next,
            r,
            self.guidance.gamma,
            self.guidance.beta_guid,
        )?;
        Ok((0..a.len()).map(|j| 0.5 * b * a[j] + b * score[j] + guide[j]).collect())
    }

    /// Explicit Euler–Maruyama from `a_init`; stops early on divergence.
    pub fn euler_maruyama(&self, a_init: &[f64], dt: f64, steps: usize, rng: &mut Rng) -> Result<EmTrajectory> {
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
        }
        let mut a = a_init.to_vec();
        let mut path = Vec::with_capacity(steps + 1);
        path.push(a.clone());
        let sq = dt.sqrt();
        for n in 0..steps {
            let t = n as f64 * dt;
            let drift = self.drift(&a, t)?;
            let g = self.beta.at(t).sqrt();
            for j in 0..a.len() {
                let noise = if g == 0.0 { 0.0 } else { g * sq * standard_normal(rng) };
                a[j] += drift[j] * dt + noise;
            }
            path.push(a.clone());
            if !a.iter().all(|x| x.is_finite()) || norm(&a) > DIVERGENCE_NORM {
                return Ok(EmTrajectory { path, diverged: true });
            }
        }
        Ok(EmTrajectory { path, diverged: false })
    }
}

/// Convenience wrapper over [`GuidedSde::euler_maruyama`].
#[allow(clippy::too_many_arguments)]
pub fn euler_maruyama_guided(
    sde: &GuidedSde<'_>,
    a_init: &[f64],
    dt: f64,
    steps: usize,
    rng: &mut Rng,
) -> Result<EmTrajectory> {
    sde.euler_maruyama(a_init, dt, steps, rng)
}
