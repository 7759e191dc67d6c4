//! Noise schedules, forward corruption, the noise-prediction network and the
//! DDPM / DDIM reverse samplers.

use crate::error::{check_dim, Error, Result};
use crate::numerics::{standard_normal, standard_normal_vec, Adam, Matrix, Mlp, Rng};
use crate::scm::Transition;
use rand::Rng as _;
use std::sync::Once;

/// `β_k`, `α_k = 1 - β_k` and `ᾱ_k = ∏_{j≤k} α_j` for `k = 1..=K`; `ᾱ_0 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidArgument("every beta must lie in (0, 1)".into()));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `β_k`, `1 ≤ k ≤ K`.
    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        1.0 - self.betas[k - 1]
    }

    /// `ᾱ_k`, `0 ≤ k ≤ K`.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bars[k]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }
}

/// Linearly spaced `β_k` from `beta_start` to `beta_end`.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    DiffusionSchedule::from_betas(betas)
}

fn check_step(schedule: &DiffusionSchedule, k: usize, lowest: usize) -> Result<()> {
    if k < lowest || k > schedule.steps() {
        return Err(Error::InvalidArgument(format!(
            "diffusion step {k} outside {lowest}..={}",
            schedule.steps()
        )));
    }
    Ok(())
}

/// `a^k = √ᾱ_k a⁰ + √(1-ᾱ_k) ε`; returns the corrupted action and `ε`.
pub fn forward_corrupt(
    schedule: &DiffusionSchedule,
    a0: &[f64],
    k: usize,
    rng: &mut Rng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_step(schedule, k, 0)?;
    let eps = standard_normal_vec(a0.len(), rng);
    let ab = schedule.alpha_bar(k);
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let ak = a0.iter().zip(&eps).map(|(a, e)| sa * a + sn * e).collect();
    Ok((ak, eps))
}

/// `-ε / √(1-ᾱ)`.
pub fn score_from_noise(eps: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
    if !(alpha_bar > 0.0 && alpha_bar < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha_bar {alpha_bar} outside (0, 1)")));
    }
    let s = (1.0 - alpha_bar).sqrt();
    Ok(eps.iter().map(|e| -e / s).collect())
}

/// Inverse of [`score_from_noise`].
pub fn noise_from_score(score: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
    if !(alpha_bar > 0.0 && alpha_bar < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha_bar {alpha_bar} outside (0, 1)")));
    }
    let s = (1.0 - alpha_bar).sqrt();
    Ok(score.iter().map(|x| -x * s).collect())
}

/// Anything that predicts the injected noise of `a^k` given the state.
pub trait NoisePredictor {
    fn action_dim(&self) -> usize;
    fn predict_noise(&self, a_k: &[f64], s: &[f64], k: usize, schedule: &DiffusionSchedule) -> Result<Vec<f64>>;
}

/// `ε_θ(a^k, s, k/K)` backed by an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseNet {
    net: Mlp,
    state_dim: usize,
    action_dim: usize,
}

impl NoiseNet {
    pub fn new(state_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut Rng) -> Result<Self> {
        let widths: Vec<usize> = std::iter::once(action_dim + state_dim + 1)
            .chain(hidden.iter().copied())
            .chain([action_dim])
            .collect();
        Ok(Self {
            net: Mlp::new(&widths, rng)?,
            state_dim,
            action_dim,
        })
    }

    pub fn from_mlp(net: Mlp, state_dim: usize, action_dim: usize) -> Result<Self> {
        check_dim("noise net input", action_dim + state_dim + 1, net.input_dim())?;
        check_dim("noise net output", action_dim, net.output_dim())?;
        Ok(Self {
            net,
            state_dim,
            action_dim,
        })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.net
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// Network input `[a^k | s | k/K]`.
    pub fn input(&self, a_k: &[f64], s: &[f64], k: usize, steps: usize) -> Result<Vec<f64>> {
        check_dim("noisy action", self.action_dim, a_k.len())?;
        check_dim("state", self.state_dim, s.len())?;
        Ok(a_k.iter().chain(s).copied().chain([k as f64 / steps as f64]).collect())
    }

    pub fn to_checkpoint(&self) -> crate::checkpoint::Checkpoint {
        let mut ck = crate::checkpoint::Checkpoint::new("noise-net");
        ck.push_scalar("state_dim", self.state_dim as f64);
        ck.push_scalar("action_dim", self.action_dim as f64);
        crate::dynamics::push_mlp(&mut ck, "eps", &self.net);
        ck
    }

    pub fn from_checkpoint(ck: &crate::checkpoint::Checkpoint) -> Result<Self> {
        ck.expect_kind("noise-net")?;
        let net = crate::dynamics::read_mlp(ck, "eps")?;
        Self::from_mlp(net, ck.scalar("state_dim")? as usize, ck.scalar("action_dim")? as usize)
    }
}

impl NoisePredictor for NoiseNet {
    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn predict_noise(&self, a_k: &[f64], s: &[f64], k: usize, schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
        self.net.forward(&self.input(a_k, s, k, schedule.steps())?)
    }
}

/// Exact noise of a Gaussian action prior `N(μ̄, Σ̄)` (state ignored):
/// `ε = √(1-ᾱ) C⁻¹ (a - √ᾱ μ̄)` with `C = ᾱ Σ̄ + (1-ᾱ) I`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPriorNoise {
    mean: Vec<f64>,
    cov: Matrix,
    /// `C_k⁻¹` for `k = 0..=K`.
    precisions: Vec<Matrix>,
}

impl GaussianPriorNoise {
    pub fn new(mean: Vec<f64>, cov: Matrix, schedule: &DiffusionSchedule) -> Result<Self> {
        let d = mean.len();
        check_dim("prior covariance rows", d, cov.nrows())?;
        check_dim("prior covariance columns", d, cov.ncols())?;
        crate::numerics::cholesky_lower(&cov, "prior covariance")?;
        let precisions = (0..=schedule.steps())
            .map(|k| {
                let ab = schedule.alpha_bar(k);
                let c = &cov * ab + Matrix::identity(d, d) * (1.0 - ab);
                crate::numerics::spd_inverse_logdet(&c, "noisy prior covariance").map(|(inv, _)| inv)
            })
            .collect::<Result<_>>()?;
        Ok(Self { mean, cov, precisions })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &Matrix {
        &self.cov
    }

    /// `C_k⁻¹`, the negative Hessian of the noisy prior log-density at level `k`.
    pub fn precision(&self, k: usize) -> &Matrix {
        &self.precisions[k]
    }
}

impl NoisePredictor for GaussianPriorNoise {
    fn action_dim(&self) -> usize {
        self.mean.len()
    }

    fn predict_noise(&self, a_k: &[f64], _s: &[f64], k: usize, schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
        check_dim("noisy action", self.mean.len(), a_k.len())?;
        let ab = schedule.alpha_bar(k);
        let sa = ab.sqrt();
        let centered = nalgebra::DVector::from_iterator(a_k.len(), a_k.iter().zip(&self.mean).map(|(a, m)| a - sa * m));
        let e = &self.precisions[k] * centered * (1.0 - ab).sqrt();
        Ok(e.iter().copied().collect())
    }
}

/// A per-step correction of the predicted noise: `ε̂ = ε_θ - δ`.
pub trait SamplerHook {
    fn correction(&mut self, a_k: &[f64], k: usize, schedule: &DiffusionSchedule) -> Result<Vec<f64>>;
}

/// Applies a hook to a raw noise prediction.
pub fn hooked_noise(
    eps: Vec<f64>,
    a_k: &[f64],
    k: usize,
    schedule: &DiffusionSchedule,
    hook: Option<&mut (dyn SamplerHook + '_)>,
) -> Result<Vec<f64>> {
    match hook {
        None => Ok(eps),
        Some(h) => {
            let delta = h.correction(a_k, k, schedule)?;
            check_dim("hook correction", eps.len(), delta.len())?;
            Ok(eps.iter().zip(&delta).map(|(e, d)| e - d).collect())
        }
    }
}

/// Unadjusted Langevin iterations on the (guided) score at a fixed noise level,
/// run before the last reverse step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LangevinCorrector {
    pub level: usize,
    pub steps: usize,
    pub step_size: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SamplerOptions {
    pub corrector: Option<LangevinCorrector>,
}

/// DDPM ancestral sampling from `a^K ~ N(0, I)`. The final step adds no noise.
pub fn ddpm_sample(
    net: &dyn NoisePredictor,
    schedule: &DiffusionSchedule,
    s: &[f64],
    rng: &mut Rng,
    hook: Option<&mut (dyn SamplerHook + '_)>,
) -> Result<Vec<f64>> {
    ddpm_sample_with(net, schedule, s, rng, hook, SamplerOptions::default())
}

pub fn ddpm_sample_with(
    net: &dyn NoisePredictor,
    schedule: &DiffusionSchedule,
    s: &[f64],
    rng: &mut Rng,
    mut hook: Option<&mut (dyn SamplerHook + '_)>,
    options: SamplerOptions,
) -> Result<Vec<f64>> {
    let d = net.action_dim();
    let mut a = standard_normal_vec(d, rng);
    for k in (1..=schedule.steps()).rev() {
        if let Some(c) = options.corrector.filter(|c| c.level == k) {
            a = langevin(net, schedule, s, a, k, c, rng, hook.as_deref_mut())?;
        }
        let eps = net.predict_noise(&a, s, k, schedule)?;
        let eps = hooked_noise(eps, &a, k, schedule, hook.as_deref_mut())?;
        let (alpha, beta) = (schedule.alpha(k), schedule.beta(k));
        let coef = beta / (1.0 - schedule.alpha_bar(k)).sqrt();
        let inv = 1.0 / alpha.sqrt();
        let sigma = beta.sqrt();
        for j in 0..d {
            let mean = inv * (a[j] - coef * eps[j]);
            a[j] = if k > 1 {
                mean + sigma * standard_normal(rng)
            } else {
                mean
            };
        }
    }
    Ok(a)
}

#[allow(clippy::too_many_arguments)]
fn langevin(
    net: &dyn NoisePredictor,
    schedule: &DiffusionSchedule,
    s: &[f64],
    mut a: Vec<f64>,
    k: usize,
    c: LangevinCorrector,
    rng: &mut Rng,
    mut hook: Option<&mut (dyn SamplerHook + '_)>,
) -> Result<Vec<f64>> {
    let ab = schedule.alpha_bar(k);
    let noise = (2.0 * c.step_size).sqrt();
    for _ in 0..c.steps {
        let eps = net.predict_noise(&a, s, k, schedule)?;
        let eps = hooked_noise(eps, &a, k, schedule, hook.as_deref_mut())?;
        let score = score_from_noise(&eps, ab)?;
        for j in 0..a.len() {
            a[j] += c.step_size * score[j] + noise * standard_normal(rng);
        }
    }
    Ok(a)
}

static CLAMP_WARNING: Once = Once::new();

fn clamped_alpha_bar(ab: f64) -> f64 {
    if ab <= 0.0 {
        CLAMP_WARNING.call_once(|| eprintln!("warning: alpha_bar = 0 in DDIM step, clamped to 1e-8"));
        1e-8
    } else {
        ab
    }
}

/// Deterministic update from level `k` to level `k_prev < k` given `ε̂`:
/// returns `(â⁰, a^{k_prev})`.
pub fn ddim_update(a_k: &[f64], eps: &[f64], alpha_bar_k: f64, alpha_bar_prev: f64) -> (Vec<f64>, Vec<f64>) {
    let ab = clamped_alpha_bar(alpha_bar_k);
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let a0: Vec<f64> = a_k.iter().zip(eps).map(|(a, e)| (a - sn * e) / sa).collect();
    let (pa, pn) = (alpha_bar_prev.sqrt(), (1.0 - alpha_bar_prev).sqrt());
    let prev = a0.iter().zip(eps).map(|(x, e)| pa * x + pn * e).collect();
    (a0, prev)
}

/// One DDIM step `k -> k-1`.
pub fn ddim_step(
    net: &dyn NoisePredictor,
    schedule: &DiffusionSchedule,
    a_k: &[f64],
    s: &[f64],
    k: usize,
    hook: Option<&mut (dyn SamplerHook + '_)>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    ddim_step_to(net, schedule, a_k, s, k, k - 1, hook)
}

/// DDIM step `k -> k_prev`, for strided sampling.
pub fn ddim_step_to(
    net: &dyn NoisePredictor,
    schedule: &DiffusionSchedule,
    a_k: &[f64],
    s: &[f64],
    k: usize,
    k_prev: usize,
    hook: Option<&mut (dyn SamplerHook + '_)>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_step(schedule, k, 1)?;
    if k_prev >= k {
        return Err(Error::InvalidArgument(format!(
            "DDIM target level {k_prev} must be below {k}"
        )));
    }
    let eps = net.predict_noise(a_k, s, k, schedule)?;
    let eps = hooked_noise(eps, a_k, k, schedule, hook)?;
    Ok(ddim_update(
        a_k,
        &eps,
        schedule.alpha_bar(k),
        schedule.alpha_bar(k_prev),
    ))
}

/// Evenly spaced levels `K = l_0 > l_1 > ... > l_m = 0` with `m = min(steps, K)`.
pub fn ddim_levels(total: usize, steps: usize) -> Vec<usize> {
    let m = steps.clamp(1, total.max(1));
    let mut levels: Vec<usize> = (0..=m).map(|i| (total * (m - i) + m / 2) / m).collect();
    levels.dedup();
    levels
}

/// Full DDIM chain from `a^K ~ N(0, I)` over `steps` evenly spaced levels.
pub fn ddim_sample(
    net: &dyn NoisePredictor,
    schedule: &DiffusionSchedule,
    s: &[f64],
    steps: usize,
    rng: &mut Rng,
    mut hook: Option<&mut (dyn SamplerHook + '_)>,
) -> Result<Vec<f64>> {
    let mut a = standard_normal_vec(net.action_dim(), rng);
    for w in ddim_levels(schedule.steps(), steps).windows(2) {
        a = ddim_step_to(net, schedule, &a, s, w[0], w[1], hook.as_deref_mut())?.1;
    }
    Ok(a)
}

/// One draw of the denoising objective: state, clean action, level and noise.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseSample {
    pub index: usize,
    pub k: usize,
    pub eps: Vec<f64>,
    pub a_k: Vec<f64>,
}

/// Draws a minibatch: per sample an index, a level `k ~ U{1..K}`, then `ε`.
pub fn draw_denoise_batch(
    data: &[Transition],
    batch: usize,
    schedule: &DiffusionSchedule,
    rng: &mut Rng,
) -> Result<Vec<DenoiseSample>> {
    if data.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    (0..batch)
        .map(|_| {
            let index = rng.random_range(0..data.len());
            let k = rng.random_range(1..=schedule.steps());
            let (a_k, eps) = forward_corrupt(schedule, &data[index].a, k, rng)?;
            Ok(DenoiseSample { index, k, eps, a_k })
        })
        .collect()
}

/// Mean squared error of `ε_θ` against `targets`, and its parameter gradient.
pub fn denoise_loss_grad(
    net: &NoiseNet,
    schedule: &DiffusionSchedule,
    data: &[Transition],
    samples: &[DenoiseSample],
    targets: &[Vec<f64>],
) -> Result<(f64, Vec<f64>)> {
    check_dim("denoising targets", samples.len(), targets.len())?;
    let mut grad = vec![0.0; net.mlp().num_params()];
    let mut loss = 0.0;
    let scale = 1.0 / (samples.len() * net.action_dim).max(1) as f64;
    for (smp, target) in samples.iter().zip(targets) {
        let input = net.input(&smp.a_k, &data[smp.index].s, smp.k, schedule.steps())?;
        let trace = net.mlp().forward_trace(&input)?;
        let diff: Vec<f64> = trace.output().iter().zip(target).map(|(p, t)| p - t).collect();
        loss += diff.iter().map(|x| x * x).sum::<f64>() * scale;
        let og: Vec<f64> = diff.iter().map(|x| 2.0 * x * scale).collect();
        net.mlp().backward(&trace, &og, &mut grad)?;
    }
    Ok((loss, grad))
}

/// Minibatch Adam on the noise-prediction loss; returns the per-step losses.
pub fn train_noise_net(
    net: &mut NoiseNet,
    data: &[Transition],
    schedule: &DiffusionSchedule,
    opt: &mut Adam,
    steps: usize,
    batch: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        losses.push(noise_net_step(net, data, schedule, opt, batch, rng)?);
    }
    Ok(losses)
}

/// One optimizer step of [`train_noise_net`].
pub fn noise_net_step(
    net: &mut NoiseNet,
    data: &[Transition],
    schedule: &DiffusionSchedule,
    opt: &mut Adam,
    batch: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let samples = draw_denoise_batch(data, batch, schedule, rng)?;
    let targets: Vec<Vec<f64>> = samples.iter().map(|s| s.eps.clone()).collect();
    let (loss, grad) = denoise_loss_grad(net, schedule, data, &samples, &targets)?;
    opt.step(net.mlp_mut().params_mut(), &grad)?;
    Ok(loss)
}

/// Average denoising loss on fresh draws, without updating anything.
pub fn evaluate_noise_loss(
    net: &NoiseNet,
    data: &[Transition],
    schedule: &DiffusionSchedule,
    batch: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let samples = draw_denoise_batch(data, batch, schedule, rng)?;
    let targets: Vec<Vec<f64>> = samples.iter().map(|s| s.eps.clone()).collect();
    Ok(denoise_loss_grad(net, schedule, data, &samples, &targets)?.0)
}
