//! Replay buffer, double-Q critics, the combined policy objective and the
//! offline-then-online trainer.

use crate::checkpoint::Checkpoint;
use crate::diffusion::{
    ddim_levels, ddim_sample, ddim_update, denoise_loss_grad, draw_denoise_batch, make_schedule, train_noise_net,
    DiffusionSchedule, NoiseNet, NoisePredictor,
};
use crate::discovery::{corrupt_masks, discover_masks_detailed, NotearsConfig};
use crate::dynamics::{fit_dynamics, push_mlp, read_mlp, CausalDynamics, DynamicsKind};
use crate::envs::{Env, ACTION_BOUND};
use crate::error::{check_dim, Error, Result};
use crate::guidance::{
    guidance_lipschitz, guided_noise, make_guidance_hook, stable_lambda_schedule, CausalGuidanceHook, GuidanceConfig,
    LambdaSchedule, Outcome,
};
use crate::numerics::{seeded_rng, standard_normal_vec, Adam, Matrix, Mlp, Rng, Trace};
use crate::scm::{CausalMasks, Transition};
use rand::Rng as _;
use std::fmt::Write as _;

/// Fixed-capacity FIFO store of transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("replay capacity must be at least 1".into()));
        }
        Ok(Self {
            capacity,
            items: Vec::new(),
            cursor: 0,
        })
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Contents from oldest to newest.
    pub fn ordered(&self) -> Vec<Transition> {
        if self.items.len() < self.capacity {
            self.items.clone()
        } else {
            self.items[self.cursor..]
                .iter()
                .chain(&self.items[..self.cursor])
                .cloned()
                .collect()
        }
    }

    /// The newest `count` transitions, oldest first.
    pub fn latest(&self, count: usize) -> Vec<Transition> {
        let all = self.ordered();
        let skip = all.len().saturating_sub(count);
        all[skip..].to_vec()
    }

    /// Uniform sampling with replacement.
    pub fn sample(&self, batch: usize, rng: &mut Rng) -> Result<Vec<Transition>> {
        if self.items.is_empty() {
            return Err(Error::InsufficientSamples { needed: 1, got: 0 });
        }
        Ok((0..batch)
            .map(|_| self.items[rng.random_range(0..self.items.len())].clone())
            .collect())
    }
}

/// Two Q networks `(s, a) -> R` with soft-updated target copies.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticPair {
    pub online: [Mlp; 2],
    pub target: [Mlp; 2],
    pub rho: f64,
    pub discount: f64,
}

impl CriticPair {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        rho: f64,
        discount: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let widths: Vec<usize> = std::iter::once(state_dim + action_dim)
            .chain(hidden.iter().copied())
            .chain([1])
            .collect();
        let q1 = Mlp::new(&widths, rng)?;
        let q2 = Mlp::new(&widths, rng)?;
        Self::from_nets(q1, q2, rho, discount)
    }

    pub fn from_nets(q1: Mlp, q2: Mlp, rho: f64, discount: f64) -> Result<Self> {
        if q1.widths() != q2.widths() || q1.output_dim() != 1 {
            return Err(Error::InvalidArgument(
                "critics must share a shape with scalar output".into(),
            ));
        }
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(Error::InvalidArgument(format!("soft update rate {rho} outside (0, 1]")));
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::InvalidArgument(format!("discount {discount} outside [0, 1)")));
        }
        Ok(Self {
            target: [q1.clone(), q2.clone()],
            online: [q1, q2],
            rho,
            discount,
        })
    }

    pub fn input(s: &[f64], a: &[f64]) -> Vec<f64> {
        s.iter().chain(a).copied().collect()
    }

    pub fn q(&self, which: usize, s: &[f64], a: &[f64]) -> Result<f64> {
        Ok(self.online[which].forward(&Self::input(s, a))?[0])
    }

    pub fn target_min(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        let x = Self::input(s, a);
        Ok(self.target[0].forward(&x)?[0].min(self.target[1].forward(&x)?[0]))
    }

    /// `θ' ← ρ θ + (1 - ρ) θ'`.
    pub fn soft_update(&mut self) {
        for (t, o) in self.target.iter_mut().zip(&self.online) {
            for (tp, op) in t.params_mut().iter_mut().zip(o.params()) {
                *tp = self.rho * op + (1.0 - self.rho) * *tp;
            }
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("critics");
        ck.push_scalar("rho", self.rho);
        ck.push_scalar("discount", self.discount);
        push_mlp(&mut ck, "q1", &self.online[0]);
        push_mlp(&mut ck, "q2", &self.online[1]);
        push_mlp(&mut ck, "t1", &self.target[0]);
        push_mlp(&mut ck, "t2", &self.target[1]);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("critics")?;
        let mut out = Self::from_nets(
            read_mlp(ck, "q1")?,
            read_mlp(ck, "q2")?,
            ck.scalar("rho")?,
            ck.scalar("discount")?,
        )?;
        out.target = [read_mlp(ck, "t1")?, read_mlp(ck, "t2")?];
        Ok(out)
    }
}

/// `y = r + γ (1 - done) min(Q1'(s', a'), Q2'(s', a'))`.
pub fn td_target(critics: &CriticPair, r: f64, s_next: &[f64], a_next: &[f64], done: bool) -> Result<f64> {
    if done {
        return Ok(r);
    }
    Ok(r + critics.discount * critics.target_min(s_next, a_next)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticOptimizer {
    pub adam: [Adam; 2],
}

impl CriticOptimizer {
    pub fn new(critics: &CriticPair, lr: f64) -> Self {
        let n = critics.online[0].num_params();
        Self {
            adam: [Adam::new(n, lr), Adam::new(n, lr)],
        }
    }
}

/// One Adam step per critic on `Σ (Q_i - y)²`, then a soft target update.
/// `next_actions[i]` is the policy's action at `batch[i].s_next`.
pub fn critic_update(
    critics: &mut CriticPair,
    batch: &[Transition],
    next_actions: &[Vec<f64>],
    opt: &mut CriticOptimizer,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    check_dim("next actions", batch.len(), next_actions.len())?;
    let ys = batch
        .iter()
        .zip(next_actions)
        .map(|(t, a)| td_target(critics, t.r, &t.s_next, a, t.done))
        .collect::<Result<Vec<f64>>>()?;
    let mut loss = 0.0;
    for which in 0..2 {
        let net = &critics.online[which];
        let mut grad = vec![0.0; net.num_params()];
        for (t, y) in batch.iter().zip(&ys) {
            let trace = net.forward_trace(&CriticPair::input(&t.s, &t.a))?;
            let diff = trace.output()[0] - y;
            loss += diff * diff;
            net.backward(&trace, &[2.0 * diff], &mut grad)?;
        }
        opt.adam[which].step(critics.online[which].params_mut(), &grad)?;
    }
    critics.soft_update();
    Ok(loss)
}

/// Guidance applied inside the actor chain and at acting time.
#[derive(Clone, Copy)]
pub struct ChainGuide<'a> {
    pub dynamics: &'a CausalDynamics,
    pub cfg: &'a GuidanceConfig,
}

const JACOBIAN_STEP: f64 = 1e-5;

struct ChainStep {
    trace: Trace,
    c_prev: f64,
    c_eps: f64,
    /// `λ √(1-ᾱ) ∂∇/∂a`, the action Jacobian of the guidance correction.
    guide_jac: Option<Matrix>,
}

fn with_r_star(cfg: &GuidanceConfig, r_star: f64) -> GuidanceConfig {
    GuidanceConfig { r_star, ..cfg.clone() }
}

/// `Q(s, G_θ(s; z))` for one state and its gradient w.r.t. `θ`.
#[allow(clippy::too_many_arguments)]
fn actor_single(
    net: &NoiseNet,
    critic: &Mlp,
    schedule: &DiffusionSchedule,
    levels: &[usize],
    guide: Option<ChainGuide<'_>>,
    s: &[f64],
    r_star: f64,
    z: &[f64],
    bound: f64,
) -> Result<(f64, Vec<f64>)> {
    let d = z.len();
    let total = schedule.steps();
    let cfg = guide.map(|g| with_r_star(g.cfg, r_star));
    let hook: Option<CausalGuidanceHook<'_>> = match (guide, &cfg) {
        (Some(g), Some(c)) if !c.is_inactive() => Some(make_guidance_hook(g.dynamics, c, s, Outcome::Predicted)),
        _ => None,
    };
    let mut a = z.to_vec();
    let mut steps = Vec::with_capacity(levels.len());
    for w in levels.windows(2) {
        let (k, kp) = (w[0], w[1]);
        let trace = net.mlp().forward_trace(&net.input(&a, s, k, total)?)?;
        let mut eps = trace.output().to_vec();
        let (ab, abp) = (schedule.alpha_bar(k), schedule.alpha_bar(kp));
        let mut guide_jac = None;
        if let (Some(h), Some(c)) = (&hook, &cfg) {
            let lambda = c.lambda.at(k);
            if lambda != 0.0 {
                let scale = lambda * (1.0 - ab).sqrt();
                let g = h.causal_gradient(&a)?;
                for j in 0..d {
                    eps[j] -= scale * g[j];
                }
                let mut jac = Matrix::zeros(d, d);
                for j in 0..d {
                    let mut up = a.clone();
                    let mut down = a.clone();
                    up[j] += JACOBIAN_STEP;
                    down[j] -= JACOBIAN_STEP;
                    let (gu, gd) = (h.causal_gradient(&up)?, h.causal_gradient(&down)?);
                    for i in 0..d {
                        jac[(i, j)] = scale * (gu[i] - gd[i]) / (2.0 * JACOBIAN_STEP);
                    }
                }
                guide_jac = Some(jac);
            }
        }
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (pa, pn) = (abp.sqrt(), (1.0 - abp).sqrt());
        a = ddim_update(&a, &eps, ab, abp).1;
        steps.push(ChainStep {
            trace,
            c_prev: pa / sa,
            c_eps: pn - pa * sn / sa,
            guide_jac,
        });
    }
    let clamped: Vec<f64> = a.iter().map(|x| x.clamp(-bound, bound)).collect();
    let ctrace = critic.forward_trace(&CriticPair::input(s, &clamped))?;
    let q = ctrace.output()[0];
    let mut scratch = vec![0.0; critic.num_params()];
    let gin = critic.backward(&ctrace, &[1.0], &mut scratch)?;
    let n = s.len();
    let mut ga: Vec<f64> = (0..d)
        .map(|j| if a[j].abs() < bound { gin[n + j] } else { 0.0 })
        .collect();
    let mut grad = vec![0.0; net.mlp().num_params()];
    for step in steps.iter().rev() {
        let g_eps: Vec<f64> = ga.iter().map(|x| step.c_eps * x).collect();
        let gi = net.mlp().backward(&step.trace, &g_eps, &mut grad)?;
        let mut next: Vec<f64> = (0..d).map(|j| step.c_prev * ga[j] + gi[j]).collect();
        if let Some(jac) = &step.guide_jac {
            for j in 0..d {
                next[j] -= (0..d).map(|i| jac[(i, j)] * g_eps[i]).sum::<f64>();
            }
        }
        ga = next;
    }
    Ok((q, grad))
}

/// Mean over states of `Q(s, G_θ(s; z))` and its gradient w.r.t. the noise
/// network parameters, backpropagated through the DDIM chain over `levels`.
#[allow(clippy::too_many_arguments)]
pub fn actor_objective_grad(
    net: &NoiseNet,
    critic: &Mlp,
    schedule: &DiffusionSchedule,
    levels: &[usize],
    guide: Option<ChainGuide<'_>>,
    states: &[Vec<f64>],
    r_stars: &[f64],
    noise: &[Vec<f64>],
    bound: f64,
) -> Result<(f64, Vec<f64>)> {
    check_dim("actor r* targets", states.len(), r_stars.len())?;
    check_dim("actor noise draws", states.len(), noise.len())?;
    if states.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let idx: Vec<usize> = (0..states.len()).collect();
    let parts = crate::par::map_indexed(&idx, |_, &i| {
        actor_single(
            net, critic, schedule, levels, guide, &states[i], r_stars[i], &noise[i], bound,
        )
    });
    let scale = 1.0 / states.len() as f64;
    let mut q = 0.0;
    let mut grad = vec![0.0; net.mlp().num_params()];
    for part in parts {
        let (qi, gi) = part?;
        q += qi * scale;
        for (g, x) in grad.iter_mut().zip(gi) {
            *g += x * scale;
        }
    }
    Ok((q, grad))
}

/// Settings of one policy update.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyUpdateConfig {
    pub eta: f64,
    pub actor_steps: usize,
    pub actor_batch: usize,
    pub action_bound: f64,
}

/// Guided denoising targets `ε^cg` from the recorded `(s', r)`.
pub fn guided_targets(
    samples: &[crate::diffusion::DenoiseSample],
    batch: &[Transition],
    schedule: &DiffusionSchedule,
    guide: Option<ChainGuide<'_>>,
) -> Result<Vec<Vec<f64>>> {
    let active = guide.filter(|g| !g.cfg.is_inactive());
    let Some(g) = active else {
        return Ok(samples.iter().map(|s| s.eps.clone()).collect());
    };
    let cfg = GuidanceConfig {
        use_r_star: false,
        ..g.cfg.clone()
    };
    samples
        .iter()
        .map(|smp| {
            let lambda = cfg.lambda.at(smp.k);
            if lambda == 0.0 {
                return Ok(smp.eps.clone());
            }
            let t = &batch[smp.index];
            let hook = make_guidance_hook(
                g.dynamics,
                &cfg,
                &t.s,
                Outcome::Observed {
                    s_next: t.s_next.clone(),
                    r: t.r,
                },
            );
            let grad = hook.causal_gradient(&smp.a_k)?;
            guided_noise(&smp.eps, &grad, lambda, schedule.alpha_bar(smp.k))
        })
        .collect()
}

/// One step on `denoise(ε^cg) - η Q_1(s, G_θ(s; z))`; returns the denoising
/// loss and the Q objective (0 when `η = 0`).
///
/// RNG draws: the denoising batch, then one noise vector per actor state.
#[allow(clippy::too_many_arguments)]
pub fn policy_update(
    net: &mut NoiseNet,
    critics: &CriticPair,
    guide: Option<ChainGuide<'_>>,
    batch: &[Transition],
    r_stars: &[f64],
    cfg: &PolicyUpdateConfig,
    schedule: &DiffusionSchedule,
    opt: &mut Adam,
    rng: &mut Rng,
) -> Result<(f64, f64)> {
    check_dim("policy r* targets", batch.len(), r_stars.len())?;
    if !(cfg.eta >= 0.0) {
        return Err(Error::InvalidArgument("η must be non-negative".into()));
    }
    let samples = draw_denoise_batch(batch, batch.len(), schedule, rng)?;
    let targets = guided_targets(&samples, batch, schedule, guide)?;
    let (loss, mut grad) = denoise_loss_grad(net, schedule, batch, &samples, &targets)?;
    let mut q_obj = 0.0;
    if cfg.eta > 0.0 {
        let m = cfg.actor_batch.min(batch.len()).max(1);
        let states: Vec<Vec<f64>> = batch[..m].iter().map(|t| t.s.clone()).collect();
        let noise: Vec<Vec<f64>> = (0..m).map(|_| standard_normal_vec(net.action_dim(), rng)).collect();
        let levels = ddim_levels(schedule.steps(), cfg.actor_steps);
        let (q, qg) = actor_objective_grad(
            net,
            &critics.online[0],
            schedule,
            &levels,
            guide,
            &states,
            &r_stars[..m],
            &noise,
            cfg.action_bound,
        )?;
        q_obj = q;
        for (g, x) in grad.iter_mut().zip(qg) {
            *g -= cfg.eta * x;
        }
    }
    opt.step(net.mlp_mut().params_mut(), &grad)?;
    Ok((loss, q_obj))
}

/// How the acting-time reward target is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RStarRule {
    /// The environment's state-conditional optimum.
    Env,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub lr: f64,
    pub eta: f64,
    pub batch: usize,
    pub hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub offline_steps: usize,
    pub episodes: usize,
    /// Mask refresh period in environment steps; 0 disables refreshing.
    pub mask_refresh: usize,
    pub refresh_window: usize,
    pub guidance: GuidanceConfig,
    pub r_star: RStarRule,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub acting_steps: usize,
    pub actor_steps: usize,
    pub actor_batch: usize,
    pub td_steps: usize,
    pub discount: f64,
    pub rho_target: f64,
    pub buffer_capacity: usize,
    pub mask_flip_prob: f64,
    /// Stability margin for capping `λ_k` per DDIM stride; `None` keeps the
    /// configured schedule as is.
    pub stability_delta: Option<f64>,
    pub notears: NotearsConfig,
    pub dynamics: DynamicsKind,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            eta: 3.0,
            batch: 64,
            hidden: vec![64, 64],
            critic_hidden: vec![64, 64],
            offline_steps: 2000,
            episodes: 200,
            mask_refresh: 1000,
            refresh_window: 5000,
            guidance: GuidanceConfig {
                lambda: LambdaSchedule::Constant(3.0),
                gamma: 1.0,
                beta_guid: 1.0,
                r_star: 0.0,
                use_r_star: true,
            },
            r_star: RStarRule::Env,
            diffusion_steps: 100,
            beta_start: 1e-4,
            beta_end: 0.15,
            acting_steps: 10,
            actor_steps: 5,
            actor_batch: 32,
            td_steps: 5,
            discount: 0.99,
            rho_target: 0.005,
            buffer_capacity: 100_000,
            mask_flip_prob: 0.0,
            stability_delta: Some(0.5),
            notears: NotearsConfig::default(),
            dynamics: DynamicsKind::Linear,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return bad("η must be finite and non-negative");
        }
        if self.batch == 0 || self.actor_batch == 0 {
            return bad("batch sizes must be at least 1");
        }
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.acting_steps == 0 || self.actor_steps == 0 || self.td_steps == 0 {
            return bad("sampler step counts must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.mask_flip_prob) {
            return bad("mask flip probability must lie in [0, 1]");
        }
        if let Some(delta) = self.stability_delta {
            if !(delta > 0.0 && delta < 1.0) {
                return bad("stability margin must lie in (0, 1)");
            }
        }
        self.guidance.validate()?;
        self.notears.validate()?;
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.diffusion_steps, self.beta_start, self.beta_end)
    }

    /// Same config with guidance switched off.
    pub fn unguided(&self) -> Self {
        Self {
            guidance: GuidanceConfig {
                lambda: LambdaSchedule::Constant(0.0),
                ..self.guidance.clone()
            },
            ..self.clone()
        }
    }

    /// Guidance actually applied with the given dynamics: `λ_k` capped per
    /// stride of the acting and actor chains when a stability margin is set.
    pub fn effective_guidance(&self, dynamics: &CausalDynamics) -> Result<GuidanceConfig> {
        let Some(delta) = self.stability_delta else {
            return Ok(self.guidance.clone());
        };
        if self.guidance.is_inactive() {
            return Ok(self.guidance.clone());
        }
        let schedule = self.schedule()?;
        let l = guidance_lipschitz(dynamics, self.guidance.gamma, self.guidance.beta_guid)?;
        let acting = ddim_levels(schedule.steps(), self.acting_steps);
        let actor = ddim_levels(schedule.steps(), self.actor_steps);
        let td = ddim_levels(schedule.steps(), self.td_steps);
        let caps = stable_lambda_schedule(&schedule, &[&acting, &actor, &td], f64::INFINITY, l, delta)?;
        let lambda = (1..=schedule.steps())
            .map(|k| self.guidance.lambda.at(k).min(caps.at(k)))
            .collect();
        Ok(GuidanceConfig {
            lambda: LambdaSchedule::PerStep(lambda),
            ..self.guidance.clone()
        })
    }

    fn policy_update_config(&self) -> PolicyUpdateConfig {
        PolicyUpdateConfig {
            eta: self.eta,
            actor_steps: self.actor_steps,
            actor_batch: self.actor_batch,
            action_bound: ACTION_BOUND,
        }
    }
}

/// Everything the offline stage produces.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifacts {
    pub net: NoiseNet,
    pub dynamics: CausalDynamics,
    pub masks: CausalMasks,
    /// Last discovered weighted adjacency, the warm start for refreshes.
    pub adjacency: Matrix,
}

impl Artifacts {
    pub fn checkpoints(&self) -> [(&'static str, Checkpoint); 2] {
        [
            ("policy", self.net.to_checkpoint()),
            ("dynamics", self.dynamics.to_checkpoint()),
        ]
    }
}

/// Dedicated stream for mask corruption so the main stream is unaffected.
fn corruption_rng(seed: u64, round: u64) -> Rng {
    seeded_rng(seed ^ 0x6d61_736b_0000_0000 ^ round)
}

fn discover(
    transitions: &[Transition],
    cfg: &TrainerConfig,
    warm: Option<&Matrix>,
    round: u64,
) -> Result<(CausalMasks, Matrix)> {
    let found = match discover_masks_detailed(transitions, &cfg.notears, warm) {
        Ok(m) => m,
        Err(Error::NotConverged { best, .. }) => {
            let layout = crate::discovery::stacked_data(&transitions[..1])?.1;
            let masks = crate::discovery::masks_from_adjacency(&best.w, layout, cfg.notears.threshold);
            return finish_masks(masks, best.w.clone(), cfg, round);
        }
        Err(e) => return Err(e),
    };
    finish_masks(found.masks, found.result.w, cfg, round)
}

fn finish_masks(masks: CausalMasks, w: Matrix, cfg: &TrainerConfig, round: u64) -> Result<(CausalMasks, Matrix)> {
    if cfg.mask_flip_prob > 0.0 {
        let masks = corrupt_masks(&masks, cfg.mask_flip_prob, &mut corruption_rng(cfg.seed, round))?;
        return Ok((masks, w));
    }
    Ok((masks, w))
}

/// Mask discovery, dynamics fitting and offline noise-network training.
pub fn offline_stage(dataset: &[Transition], cfg: &TrainerConfig, rng: &mut Rng) -> Result<Artifacts> {
    cfg.validate()?;
    let first = dataset
        .first()
        .ok_or(Error::InsufficientSamples { needed: 2, got: 0 })?;
    let (n, d) = (first.s.len(), first.a.len());
    let (masks, adjacency) = discover(dataset, cfg, None, 0)?;
    let dynamics = fit_dynamics(dataset, &masks, &cfg.dynamics)?;
    let schedule = cfg.schedule()?;
    let mut net = NoiseNet::new(n, d, &cfg.hidden, rng)?;
    let mut opt = Adam::new(net.mlp().num_params(), cfg.lr);
    train_noise_net(
        &mut net,
        dataset,
        &schedule,
        &mut opt,
        cfg.offline_steps,
        cfg.batch,
        rng,
    )?;
    Ok(Artifacts {
        net,
        dynamics,
        masks,
        adjacency,
    })
}

/// Per-episode training record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub ret: f64,
    pub denoise_loss: f64,
    pub q_loss: f64,
    pub kl_integral: f64,
    pub mask_refresh: bool,
}

pub const METRICS_HEADER: &str = "episode return denoise_loss q_loss kl_integral mask_refresh";

/// Nine significant digits, so identical values print identically.
pub fn fmt_sig(x: f64) -> String {
    format!("{x:.8e}")
}

impl EpisodeMetrics {
    pub fn to_line(&self) -> String {
        format!(
            "{} {} {} {} {} {}",
            self.episode,
            fmt_sig(self.ret),
            fmt_sig(self.denoise_loss),
            fmt_sig(self.q_loss),
            fmt_sig(self.kl_integral),
            u8::from(self.mask_refresh)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingTrace {
    pub episodes: Vec<EpisodeMetrics>,
}

impl TrainingTrace {
    pub fn returns(&self) -> Vec<f64> {
        self.episodes.iter().map(|e| e.ret).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for e in &self.episodes {
            writeln!(out, "{}", e.to_line()).unwrap();
        }
        out
    }
}

/// Samples one clamped action with the (possibly guided) DDIM sampler;
/// returns the action and the guidance KL accumulated along the chain.
#[allow(clippy::too_many_arguments)]
pub fn act(
    net: &NoiseNet,
    schedule: &DiffusionSchedule,
    guide: Option<ChainGuide<'_>>,
    s: &[f64],
    r_star: f64,
    steps: usize,
    rng: &mut Rng,
) -> Result<(Vec<f64>, f64)> {
    let cfg = guide.map(|g| with_r_star(g.cfg, r_star));
    let (mut a, kl) = match (guide, &cfg) {
        (Some(g), Some(c)) if !c.is_inactive() => {
            let mut hook = make_guidance_hook(g.dynamics, c, s, Outcome::Predicted);
            let a = ddim_sample(net, schedule, s, steps, rng, Some(&mut hook))?;
            (a, hook.kl().total())
        }
        _ => (ddim_sample(net, schedule, s, steps, rng, None)?, 0.0),
    };
    for x in &mut a {
        *x = x.clamp(-ACTION_BOUND, ACTION_BOUND);
    }
    Ok((a, kl))
}

fn r_star_for(env: &Env, rule: RStarRule, s: &[f64]) -> f64 {
    match rule {
        RStarRule::Env => env.optimal_reward_at(s),
        RStarRule::Fixed(x) => x,
    }
}

/// Online interaction with per-step critic and policy updates.
///
/// The buffer starts with the offline dataset. Every `mask_refresh` steps the
/// masks are rediscovered on the newest `refresh_window` transitions (warm
/// started) and the dynamics refitted.
pub fn online_stage(
    env: &Env,
    artifacts: Artifacts,
    offline: &[Transition],
    cfg: &TrainerConfig,
    rng: &mut Rng,
) -> Result<(Artifacts, TrainingTrace)> {
    cfg.validate()?;
    let mut art = artifacts;
    let mut trace = TrainingTrace::default();
    if cfg.episodes == 0 {
        return Ok((art, trace));
    }
    let schedule = cfg.schedule()?;
    let (n, d) = (env.state_dim(), env.action_dim());
    let mut critics = CriticPair::new(n, d, &cfg.critic_hidden, cfg.rho_target, cfg.discount, rng)?;
    let mut critic_opt = CriticOptimizer::new(&critics, cfg.lr);
    let mut policy_opt = Adam::new(art.net.mlp().num_params(), cfg.lr);
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity)?;
    for t in offline {
        buffer.push(t.clone());
    }
    let pu = cfg.policy_update_config();
    let td_levels = ddim_levels(schedule.steps(), cfg.td_steps);
    let mut total_steps = 0usize;
    let mut refresh_round = 0u64;
    let mut guidance = cfg.effective_guidance(&art.dynamics)?;
    for episode in 0..cfg.episodes {
        let mut state = env.reset(rng);
        let (mut ret, mut dl, mut ql, mut kl, mut updates) = (0.0, 0.0, 0.0, 0.0, 0usize);
        let mut refreshed = false;
        while !state.done {
            let guide = Some(ChainGuide {
                dynamics: &art.dynamics,
                cfg: &guidance,
            });
            let rs = r_star_for(env, cfg.r_star, &state.obs);
            let (a, step_kl) = act(&art.net, &schedule, guide, &state.obs, rs, cfg.acting_steps, rng)?;
            kl += step_kl;
            let (next, r) = env.step(&state, &a, rng).map_err(|e| match e {
                Error::Environment { .. } => e,
                other => Error::Environment {
                    step: total_steps,
                    message: other.to_string(),
                },
            })?;
            ret += r;
            buffer.push(Transition {
                s: state.obs.clone(),
                a,
                r,
                s_next: next.obs.clone(),
                done: next.done,
            });
            state = next;
            total_steps += 1;

            let batch = buffer.sample(cfg.batch, rng)?;
            let mut next_actions = Vec::with_capacity(batch.len());
            for t in &batch {
                let rs = r_star_for(env, cfg.r_star, &t.s_next);
                let cfg_t = with_r_star(&guidance, rs);
                let a = if cfg_t.is_inactive() {
                    td_action(&art.net, &schedule, &td_levels, &t.s_next, None, rng)?
                } else {
                    let mut hook = make_guidance_hook(&art.dynamics, &cfg_t, &t.s_next, Outcome::Predicted);
                    td_action(&art.net, &schedule, &td_levels, &t.s_next, Some(&mut hook), rng)?
                };
                next_actions.push(a);
            }
            ql += critic_update(&mut critics, &batch, &next_actions, &mut critic_opt)? / batch.len() as f64;
            let r_stars: Vec<f64> = batch.iter().map(|t| r_star_for(env, cfg.r_star, &t.s)).collect();
            let (loss, _) = policy_update(
                &mut art.net,
                &critics,
                Some(ChainGuide {
                    dynamics: &art.dynamics,
                    cfg: &guidance,
                }),
                &batch,
                &r_stars,
                &pu,
                &schedule,
                &mut policy_opt,
                rng,
            )?;
            dl += loss;
            updates += 1;

            if cfg.mask_refresh > 0 && total_steps.is_multiple_of(cfg.mask_refresh) {
                refresh_round += 1;
                let window = buffer.latest(cfg.refresh_window);
                let (masks, w) = discover(&window, cfg, Some(&art.adjacency), refresh_round)?;
                art.dynamics = fit_dynamics(&window, &masks, &cfg.dynamics)?;
                art.masks = masks;
                art.adjacency = w;
                guidance = cfg.effective_guidance(&art.dynamics)?;
                refreshed = true;
            }
        }
        let per = 1.0 / updates.max(1) as f64;
        trace.episodes.push(EpisodeMetrics {
            episode,
            ret,
            denoise_loss: dl * per,
            q_loss: ql * per,
            kl_integral: kl,
            mask_refresh: refreshed,
        });
    }
    Ok((art, trace))
}

fn td_action(
    net: &NoiseNet,
    schedule: &DiffusionSchedule,
    levels: &[usize],
    s: &[f64],
    mut hook: Option<&mut (dyn crate::diffusion::SamplerHook + '_)>,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let mut a = standard_normal_vec(net.action_dim(), rng);
    for w in levels.windows(2) {
        a = crate::diffusion::ddim_step_to(net, schedule, &a, s, w[0], w[1], hook.as_deref_mut())?.1;
    }
    Ok(a.into_iter().map(|x| x.clamp(-ACTION_BOUND, ACTION_BOUND)).collect())
}

/// Average undiscounted return of the policy over fresh episodes.
pub fn evaluate_policy(
    env: &Env,
    artifacts: &Artifacts,
    cfg: &TrainerConfig,
    episodes: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let schedule = cfg.schedule()?;
    let guidance = cfg.effective_guidance(&artifacts.dynamics)?;
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut state = env.reset(rng);
        while !state.done {
            let rs = r_star_for(env, cfg.r_star, &state.obs);
            let guide = Some(ChainGuide {
                dynamics: &artifacts.dynamics,
                cfg: &guidance,
            });
            let (a, _) = act(&artifacts.net, &schedule, guide, &state.obs, rs, cfg.acting_steps, rng)?;
            let (next, r) = env.step(&state, &a, rng)?;
            total += r;
            state = next;
        }
    }
    Ok(total / episodes.max(1) as f64)
}

/// Offline then online training in one call.
pub fn train(env: &Env, dataset: &[Transition], cfg: &TrainerConfig) -> Result<(Artifacts, TrainingTrace)> {
    let mut rng = seeded_rng(cfg.seed);
    let art = offline_stage(dataset, cfg, &mut rng)?;
    online_stage(env, art, dataset, cfg, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::noise_net_step;
    use crate::dynamics::{RewardModel, TransitionModel};
    use crate::envs::EnvSpec;
    use crate::scm::{exact_masks, generate_dataset, GroundTruthScm, ScmParams};

    fn tr(x: f64) -> Transition {
        Transition {
            s: vec![x],
            a: vec![0.0],
            r: x,
            s_next: vec![x],
            done: false,
        }
    }

    #[test]
    fn replay_is_fifo() {
        let mut buf = ReplayBuffer::new(3).unwrap();
        for i in 0..5 {
            buf.push(tr(i as f64));
        }
        assert_eq!(buf.len(), 3);
        let xs: Vec<f64> = buf.ordered().iter().map(|t| t.r).collect();
        assert_eq!(xs, vec![2.0, 3.0, 4.0]);
        assert_eq!(buf.latest(2).iter().map(|t| t.r).collect::<Vec<_>>(), vec![3.0, 4.0]);
        assert!(ReplayBuffer::new(0).is_err());
        assert!(ReplayBuffer::new(1).unwrap().sample(4, &mut seeded_rng(0)).is_err());
    }

    /// Critic whose output is its bias `q`.
    fn constant_critic(n: usize, d: usize, q: f64) -> Mlp {
        let mut net = Mlp::zeros(&[n + d, 4, 1]).unwrap();
        let last = net.num_params() - 1;
        net.params_mut()[last] = q;
        net
    }

    #[test]
    fn td_target_example() {
        let critics =
            CriticPair::from_nets(constant_critic(1, 1, 2.0), constant_critic(1, 1, 3.0), 0.005, 0.99).unwrap();
        let y = td_target(&critics, 1.0, &[0.3], &[0.1], false).unwrap();
        assert!((y - 2.98).abs() < 1e-12);
        assert_eq!(td_target(&critics, 1.0, &[0.3], &[0.1], true).unwrap(), 1.0);
    }

    #[test]
    fn critic_step_matches_hand_computation() {
        // Linear critic Q = w·x + b; Adam's first step moves every parameter
        // by -lr·sign(grad), so Q at the training input drops by
        // lr·sign(Q - y)·(Σ|x| + 1), up to Adam's ε.
        let q0 = Mlp::from_params(&[2, 1], vec![0.5, -0.25, 0.1]).unwrap();
        let mut critics = CriticPair::from_nets(q0.clone(), q0.clone(), 0.1, 0.9).unwrap();
        let lr = 0.01;
        let mut opt = CriticOptimizer::new(&critics, lr);
        let t = Transition {
            s: vec![1.0],
            a: vec![2.0],
            r: 0.5,
            s_next: vec![-1.0],
            done: false,
        };
        let q_before = critics.q(0, &t.s, &t.a).unwrap();
        let target_next = critics.target_min(&t.s_next, &[0.0]).unwrap();
        let y = 0.5 + 0.9 * target_next;
        let loss = critic_update(&mut critics, std::slice::from_ref(&t), &[vec![0.0]], &mut opt).unwrap();
        assert!((loss - 2.0 * (q_before - y).powi(2)).abs() < 1e-12);
        let expected = q_before - lr * (q_before - y).signum() * (1.0 + 2.0 + 1.0);
        for which in 0..2 {
            let q = critics.q(which, &t.s, &t.a).unwrap();
            assert!(
                (q - expected).abs() < 1e-7,
                "{q} vs {expected} (before {q_before}, y {y})"
            );
        }
        // Target moved a fraction ρ of the way.
        let tq = critics.target[0].forward(&CriticPair::input(&t.s, &t.a)).unwrap()[0];
        assert!((tq - (0.9 * q_before + 0.1 * expected)).abs() < 1e-8);
    }

    #[test]
    fn soft_update_stays_in_rho_ball() {
        let mut rng = seeded_rng(5);
        let mut critics = CriticPair::new(2, 1, &[8], 0.05, 0.99, &mut rng).unwrap();
        for p in critics.online[0].params_mut() {
            *p += 1.0;
        }
        let before = critics.target[0].params().to_vec();
        critics.soft_update();
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let moved = dist(critics.target[0].params(), &before);
        let gap = dist(critics.online[0].params(), &before);
        assert!(moved <= 0.05 * gap + 1e-12);
        assert!(moved > 0.0);
    }

    #[test]
    fn critic_loss_decreases() {
        let mut wins = 0;
        for seed in 0..10 {
            let mut rng = seeded_rng(seed);
            let mut critics = CriticPair::new(2, 1, &[16, 16], 0.005, 0.9, &mut rng).unwrap();
            let mut opt = CriticOptimizer::new(&critics, 3e-3);
            let batch: Vec<Transition> = (0..32)
                .map(|_| {
                    let s = standard_normal_vec(2, &mut rng);
                    let a = standard_normal_vec(1, &mut rng);
                    Transition {
                        r: s[0] - a[0],
                        s_next: s.clone(),
                        s,
                        a,
                        done: false,
                    }
                })
                .collect();
            let next: Vec<Vec<f64>> = batch.iter().map(|t| t.a.clone()).collect();
            let first = critic_update(&mut critics, &batch, &next, &mut opt).unwrap();
            let mut last = first;
            for _ in 0..99 {
                last = critic_update(&mut critics, &batch, &next, &mut opt).unwrap();
            }
            wins += usize::from(last < first);
        }
        assert!(wins >= 9, "{wins}");
    }

    fn toy_batch(rng: &mut Rng, m: usize) -> Vec<Transition> {
        (0..m)
            .map(|_| Transition {
                s: standard_normal_vec(2, rng),
                a: standard_normal_vec(2, rng),
                r: 0.0,
                s_next: standard_normal_vec(2, rng),
                done: false,
            })
            .collect()
    }

    #[test]
    fn policy_update_without_critic_or_guidance_is_denoising_step() {
        let mut rng = seeded_rng(8);
        let net = NoiseNet::new(2, 2, &[8], &mut rng).unwrap();
        let critics = CriticPair::new(2, 2, &[8], 0.005, 0.99, &mut rng).unwrap();
        let batch = toy_batch(&mut rng, 16);
        let schedule = make_schedule(20, 1e-4, 0.2).unwrap();
        let cfg = PolicyUpdateConfig {
            eta: 0.0,
            actor_steps: 3,
            actor_batch: 4,
            action_bound: 1.0,
        };
        let (mut a, mut b) = (net.clone(), net);
        let (mut oa, mut ob) = (
            Adam::new(a.mlp().num_params(), 1e-3),
            Adam::new(b.mlp().num_params(), 1e-3),
        );
        let (la, _) = policy_update(
            &mut a,
            &critics,
            None,
            &batch,
            &[0.0; 16],
            &cfg,
            &schedule,
            &mut oa,
            &mut seeded_rng(1),
        )
        .unwrap();
        let lb = noise_net_step(&mut b, &batch, &schedule, &mut ob, 16, &mut seeded_rng(1)).unwrap();
        assert_eq!(la.to_bits(), lb.to_bits());
        assert_eq!(a, b);
    }

    fn actor_q(
        net: &NoiseNet,
        critic: &Mlp,
        schedule: &DiffusionSchedule,
        states: &[Vec<f64>],
        noise: &[Vec<f64>],
    ) -> f64 {
        let levels = ddim_levels(schedule.steps(), 1);
        let r = vec![0.0; states.len()];
        actor_objective_grad(net, critic, schedule, &levels, None, states, &r, noise, 1e9)
            .unwrap()
            .0
    }

    #[test]
    fn actor_gradient_matches_finite_differences() {
        let mut rng = seeded_rng(11);
        let net = NoiseNet::new(2, 2, &[], &mut rng).unwrap();
        let critic = Mlp::new(&[4, 8, 1], &mut rng).unwrap();
        let schedule = make_schedule(1, 0.3, 0.3).unwrap();
        let states: Vec<Vec<f64>> = (0..3).map(|_| standard_normal_vec(2, &mut rng)).collect();
        let noise: Vec<Vec<f64>> = (0..3).map(|_| standard_normal_vec(2, &mut rng)).collect();
        let levels = ddim_levels(1, 1);
        let (_, grad) =
            actor_objective_grad(&net, &critic, &schedule, &levels, None, &states, &[0.0; 3], &noise, 1e9).unwrap();
        let h = 1e-6;
        for p in 0..net.mlp().num_params() {
            let mut up = net.clone();
            up.mlp_mut().params_mut()[p] += h;
            let mut down = net.clone();
            down.mlp_mut().params_mut()[p] -= h;
            let fd = (actor_q(&up, &critic, &schedule, &states, &noise)
                - actor_q(&down, &critic, &schedule, &states, &noise))
                / (2.0 * h);
            let rel = (fd - grad[p]).abs() / fd.abs().max(grad[p].abs()).max(1e-8);
            assert!(
                rel < 1e-4 || (fd - grad[p]).abs() < 1e-9,
                "param {p}: fd {fd} analytic {}",
                grad[p]
            );
        }
    }

    #[test]
    fn constant_critic_gives_zero_actor_gradient() {
        let mut rng = seeded_rng(12);
        let net = NoiseNet::new(2, 2, &[8], &mut rng).unwrap();
        let schedule = make_schedule(10, 1e-4, 0.2).unwrap();
        let levels = ddim_levels(10, 3);
        let states = vec![vec![0.1, 0.2]];
        let noise = vec![vec![0.3, -0.4]];
        let (q, g) = actor_objective_grad(
            &net,
            &constant_critic(2, 2, 1.5),
            &schedule,
            &levels,
            None,
            &states,
            &[0.0],
            &noise,
            1.0,
        )
        .unwrap();
        assert_eq!(q, 1.5);
        assert!(g.iter().all(|x| *x == 0.0));
    }

    fn noiseless_scm() -> GroundTruthScm {
        GroundTruthScm::new(ScmParams {
            f_s: Matrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.6]),
            f_a: Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.7]),
            b_s: vec![1.0, 0.0],
            b_a: vec![0.0, 0.8],
            sigma_phi: Matrix::zeros(2, 2),
            sigma_omega: 0.0,
            behavior_gain: Matrix::zeros(2, 2),
            action_bound: f64::INFINITY,
        })
        .unwrap()
    }

    fn small_cfg() -> TrainerConfig {
        TrainerConfig {
            offline_steps: 20,
            hidden: vec![8],
            critic_hidden: vec![8],
            batch: 16,
            actor_batch: 4,
            diffusion_steps: 20,
            episodes: 2,
            mask_refresh: 0,
            ..TrainerConfig::default()
        }
    }

    #[test]
    fn offline_stage_on_noiseless_linear_data_is_exact() {
        let scm = noiseless_scm();
        let data = generate_dataset(&scm, 80, 5, 1.0, &mut seeded_rng(2)).unwrap();
        let art = offline_stage(&data, &small_cfg(), &mut seeded_rng(3)).unwrap();
        assert_eq!(art.masks, exact_masks(&scm));
        let (TransitionModel::Linear { f_s, f_a }, RewardModel::Linear { b_s, b_a }) =
            (art.dynamics.transition_model(), art.dynamics.reward_model())
        else {
            panic!("expected linear dynamics");
        };
        let p = scm.params();
        assert!((f_s - &p.f_s).amax() < 1e-6);
        assert!((f_a - &p.f_a).amax() < 1e-6);
        for i in 0..2 {
            assert!((b_s[i] - p.b_s[i]).abs() < 1e-6);
            assert!((b_a[i] - p.b_a[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn offline_stage_rejects_single_transition() {
        let data = generate_dataset(&noiseless_scm(), 1, 1, 1.0, &mut seeded_rng(2)).unwrap();
        assert!(matches!(
            offline_stage(&data, &small_cfg(), &mut seeded_rng(3)),
            Err(Error::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn training_is_deterministic_and_zero_episodes_is_empty() {
        let mut spec = EnvSpec::lin_scm(1);
        spec.horizon = 5;
        let env = Env::new(spec).unwrap();
        let data = generate_dataset(env.scm().unwrap(), 20, 5, 1.0, &mut seeded_rng(4)).unwrap();
        let cfg = small_cfg();
        let (a1, t1) = train(&env, &data, &cfg).unwrap();
        let (a2, t2) = train(&env, &data, &cfg).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(t1.to_text(), t2.to_text());
        assert_eq!(t1.episodes.len(), 2);
        assert!(t1.episodes.iter().all(|e| e.kl_integral > 0.0));
        let text = t1.to_text();
        let header: Vec<&str> = text.lines().next().unwrap().split(' ').collect();
        assert_eq!(
            header,
            [
                "episode",
                "return",
                "denoise_loss",
                "q_loss",
                "kl_integral",
                "mask_refresh"
            ]
        );

        let (_, off) = train(&env, &data, &cfg.unguided()).unwrap();
        assert!(off.episodes.iter().all(|e| e.kl_integral == 0.0));

        let empty = TrainerConfig { episodes: 0, ..cfg };
        let (_, t0) = train(&env, &data, &empty).unwrap();
        assert!(t0.episodes.is_empty());
    }

    #[test]
    fn metrics_print_nine_significant_digits() {
        assert_eq!(fmt_sig(1.0 / 3.0), "3.33333333e-1");
        assert_eq!(fmt_sig(0.0), "0.00000000e0");
    }
}
