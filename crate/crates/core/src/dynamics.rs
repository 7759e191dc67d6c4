//! Masked Gaussian causal dynamics `p(s' | s, do(a))` and `p(r | s', do(a))`,
//! their fitting from transitions, and log-density gradients w.r.t. the action.

use crate::checkpoint::Checkpoint;
use crate::error::{check_dim, Error, Result};
use crate::numerics::{dot, psd_factor, seeded_rng, spd_inverse_logdet, Adam, Matrix, Mlp, Rng};
use crate::scm::{CausalMasks, Transition};
use rand::Rng as _;
use std::f64::consts::PI;

/// Floor added to fitted variances so noiseless data still gives a proper density.
pub const VARIANCE_FLOOR: f64 = 1e-9;

/// Dimension up to which `Sigma_phi` is fitted as a full covariance.
pub const FULL_COVARIANCE_MAX_DIM: usize = 8;

/// Hadamard gate: a zero mask entry yields an exact zero whatever the input.
#[inline]
pub fn gate(mask: f64, x: f64) -> f64 {
    if mask == 0.0 {
        0.0
    } else {
        mask * x
    }
}

/// Gated inputs of every structural equation: entry `i` of the first list
/// holds `(C_ss[:, i] ⊙ s, C_as[:, i] ⊙ a)` for next-state coordinate `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedFeatures {
    pub state: Vec<Vec<f64>>,
    pub action: Vec<Vec<f64>>,
}

pub fn apply_masks(masks: &CausalMasks, s: &[f64], a: &[f64]) -> Result<MaskedFeatures> {
    let (n, d) = (masks.state_dim(), masks.action_dim());
    check_dim("state", n, s.len())?;
    check_dim("action", d, a.len())?;
    Ok(MaskedFeatures {
        state: (0..n)
            .map(|i| (0..n).map(|j| gate(masks.c_ss[(j, i)], s[j])).collect())
            .collect(),
        action: (0..n)
            .map(|i| (0..d).map(|j| gate(masks.c_as[(j, i)], a[j])).collect())
            .collect(),
    })
}

/// Gated reward inputs `(U_sr ⊙ s', U_ar ⊙ a)`.
pub fn apply_reward_masks(masks: &CausalMasks, s_next: &[f64], a: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_dim("next state", masks.state_dim(), s_next.len())?;
    check_dim("action", masks.action_dim(), a.len())?;
    Ok((
        s_next.iter().zip(&masks.u_sr).map(|(&x, &m)| gate(m, x)).collect(),
        a.iter().zip(&masks.u_ar).map(|(&x, &m)| gate(m, x)).collect(),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransitionModel {
    /// `F_s` (`n x n`) and `F_a` (`n x d`), output-by-input.
    Linear { f_s: Matrix, f_a: Matrix },
    /// One scalar network per next-state coordinate over its gated inputs.
    Mlp { nets: Vec<Mlp> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum RewardModel {
    Linear { b_s: Vec<f64>, b_a: Vec<f64> },
    Mlp { net: Mlp },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpFitConfig {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for MlpFitConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            steps: 3000,
            batch: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DynamicsKind {
    Linear,
    Mlp(MlpFitConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CausalDynamics {
    masks: CausalMasks,
    transition: TransitionModel,
    reward: RewardModel,
    sigma_phi: Matrix,
    sigma_omega: f64,
    sigma_phi_inv: Matrix,
    sigma_phi_logdet: f64,
}

impl CausalDynamics {
    pub fn new(
        masks: CausalMasks,
        transition: TransitionModel,
        reward: RewardModel,
        sigma_phi: Matrix,
        sigma_omega: f64,
    ) -> Result<Self> {
        masks.validate()?;
        let (n, d) = (masks.state_dim(), masks.action_dim());
        match &transition {
            TransitionModel::Linear { f_s, f_a } => {
                check_dim("F_s rows", n, f_s.nrows())?;
                check_dim("F_s columns", n, f_s.ncols())?;
                check_dim("F_a rows", n, f_a.nrows())?;
                check_dim("F_a columns", d, f_a.ncols())?;
            }
            TransitionModel::Mlp { nets } => {
                check_dim("transition networks", n, nets.len())?;
                for net in nets {
                    check_dim("transition network input", n + d, net.input_dim())?;
                    check_dim("transition network output", 1, net.output_dim())?;
                }
            }
        }
        match &reward {
            RewardModel::Linear { b_s, b_a } => {
                check_dim("B_s length", n, b_s.len())?;
                check_dim("B_a length", d, b_a.len())?;
            }
            RewardModel::Mlp { net } => {
                check_dim("reward network input", n + d, net.input_dim())?;
                check_dim("reward network output", 1, net.output_dim())?;
            }
        }
        check_dim("Sigma_phi rows", n, sigma_phi.nrows())?;
        if !(sigma_omega > 0.0) || !sigma_omega.is_finite() {
            return Err(Error::NotPositiveDefinite("Sigma_omega"));
        }
        let (sigma_phi_inv, sigma_phi_logdet) = spd_inverse_logdet(&sigma_phi, "Sigma_phi")?;
        Ok(Self {
            masks,
            transition,
            reward,
            sigma_phi,
            sigma_omega,
            sigma_phi_inv,
            sigma_phi_logdet,
        })
    }

    pub fn masks(&self) -> &CausalMasks {
        &self.masks
    }
    pub fn transition_model(&self) -> &TransitionModel {
        &self.transition
    }
    pub fn reward_model(&self) -> &RewardModel {
        &self.reward
    }
    pub fn sigma_phi(&self) -> &Matrix {
        &self.sigma_phi
    }
    pub fn sigma_phi_inv(&self) -> &Matrix {
        &self.sigma_phi_inv
    }
    pub fn sigma_omega(&self) -> f64 {
        self.sigma_omega
    }
    pub fn state_dim(&self) -> usize {
        self.masks.state_dim()
    }
    pub fn action_dim(&self) -> usize {
        self.masks.action_dim()
    }
    pub fn is_linear(&self) -> bool {
        matches!(
            (&self.transition, &self.reward),
            (TransitionModel::Linear { .. }, RewardModel::Linear { .. })
        )
    }

    /// Effective `∂f/∂a` of a linear transition model: `F_a[i, j] · C_as[j, i]`.
    pub fn linear_action_jacobian(&self) -> Option<Matrix> {
        match &self.transition {
            TransitionModel::Linear { f_a, .. } => Some(Matrix::from_fn(f_a.nrows(), f_a.ncols(), |i, j| {
                gate(self.masks.c_as[(j, i)], f_a[(i, j)])
            })),
            TransitionModel::Mlp { .. } => None,
        }
    }

    /// Effective `∂g/∂a` of a linear reward model: `B_a ⊙ U_ar`.
    pub fn linear_reward_action_weights(&self) -> Option<Vec<f64>> {
        match &self.reward {
            RewardModel::Linear { b_a, .. } => {
                Some(b_a.iter().zip(&self.masks.u_ar).map(|(&b, &u)| gate(u, b)).collect())
            }
            RewardModel::Mlp { .. } => None,
        }
    }

    /// Mean next state `f_phi(s, a)`.
    pub fn predict_next_state(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        let feats = apply_masks(&self.masks, s, a)?;
        let n = self.state_dim();
        match &self.transition {
            TransitionModel::Linear { f_s, f_a } => Ok((0..n)
                .map(|i| {
                    let row_s: f64 = (0..n).map(|j| f_s[(i, j)] * feats.state[i][j]).sum();
                    let row_a: f64 = (0..self.action_dim()).map(|j| f_a[(i, j)] * feats.action[i][j]).sum();
                    row_s + row_a
                })
                .collect()),
            TransitionModel::Mlp { nets } => (0..n)
                .map(|i| {
                    let input: Vec<f64> = feats.state[i].iter().chain(&feats.action[i]).copied().collect();
                    Ok(nets[i].forward(&input)?[0])
                })
                .collect(),
        }
    }

    /// Mean reward `g_omega(s', a)`.
    pub fn predict_reward(&self, s_next: &[f64], a: &[f64]) -> Result<f64> {
        let (fs, fa) = apply_reward_masks(&self.masks, s_next, a)?;
        match &self.reward {
            RewardModel::Linear { b_s, b_a } => Ok(dot(b_s, &fs) + dot(b_a, &fa)),
            RewardModel::Mlp { net } => {
                let input: Vec<f64> = fs.iter().chain(&fa).copied().collect();
                Ok(net.forward(&input)?[0])
            }
        }
    }

    /// `log N(s'; f_phi(s, a), Sigma_phi)` and its gradient w.r.t. `a`.
    pub fn transition_logpdf_grad(&self, s: &[f64], a: &[f64], s_next: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (n, d) = (self.state_dim(), self.action_dim());
        check_dim("next state", n, s_next.len())?;
        let mean = self.predict_next_state(s, a)?;
        let delta: Vec<f64> = s_next.iter().zip(&mean).map(|(x, m)| x - m).collect();
        let delta_v = nalgebra::DVector::from_column_slice(&delta);
        let weighted = &self.sigma_phi_inv * &delta_v;
        let logp = -0.5 * (delta_v.dot(&weighted) + self.sigma_phi_logdet + n as f64 * (2.0 * PI).ln());
        let mut grad = vec![0.0; d];
        match &self.transition {
            TransitionModel::Linear { .. } => {
                let jac = self.linear_action_jacobian().expect("linear model");
                for j in 0..d {
                    grad[j] = (0..n).map(|i| jac[(i, j)] * weighted[i]).sum();
                }
            }
            TransitionModel::Mlp { nets } => {
                let feats = apply_masks(&self.masks, s, a)?;
                for i in 0..n {
                    if weighted[i] == 0.0 {
                        continue;
                    }
                    let input: Vec<f64> = feats.state[i].iter().chain(&feats.action[i]).copied().collect();
                    let trace = nets[i].forward_trace(&input)?;
                    let mut scratch = vec![0.0; nets[i].num_params()];
                    let gin = nets[i].backward(&trace, &[weighted[i]], &mut scratch)?;
                    for j in 0..d {
                        grad[j] += gate(self.masks.c_as[(j, i)], gin[n + j]);
                    }
                }
            }
        }
        Ok((logp, grad))
    }

    /// `log N(r; g_omega(s', a), Sigma_omega)` and its gradient w.r.t. `a`,
    /// holding `s'` fixed.
    pub fn reward_logpdf_grad(&self, s_next: &[f64], a: &[f64], r: f64) -> Result<(f64, Vec<f64>)> {
        let (n, d) = (self.state_dim(), self.action_dim());
        let mean = self.predict_reward(s_next, a)?;
        let delta = r - mean;
        let logp = -0.5 * (delta * delta / self.sigma_omega + self.sigma_omega.ln() + (2.0 * PI).ln());
        let w = delta / self.sigma_omega;
        let grad = match &self.reward {
            RewardModel::Linear { .. } => {
                let b = self.linear_reward_action_weights().expect("linear model");
                b.iter().map(|x| x * w).collect()
            }
            RewardModel::Mlp { net } => {
                let (fs, fa) = apply_reward_masks(&self.masks, s_next, a)?;
                let input: Vec<f64> = fs.iter().chain(&fa).copied().collect();
                let g = net.gradients(&input, &[w])?;
                (0..d).map(|j| gate(self.masks.u_ar[j], g.input[n + j])).collect()
            }
        };
        Ok((logp, grad))
    }

    /// `log p(s', r | s, do(a))` as the product of the two structural factors.
    pub fn joint_logpdf(&self, s: &[f64], a: &[f64], s_next: &[f64], r: f64) -> Result<f64> {
        Ok(self.transition_logpdf_grad(s, a, s_next)?.0 + self.reward_logpdf_grad(s_next, a, r)?.0)
    }

    /// `γ ∇_a log p(s' | s, do(a)) + β ∇_a log p(r_target | s', do(a))`.
    pub fn do_intervention_joint_grad(
        &self,
        s: &[f64],
        a: &[f64],
        s_next: &[f64],
        r_target: f64,
        gamma: f64,
        beta_guid: f64,
    ) -> Result<Vec<f64>> {
        if !gamma.is_finite() || !beta_guid.is_finite() {
            return Err(Error::NonFinite("guidance coefficients"));
        }
        let d = self.action_dim();
        let mut out = vec![0.0; d];
        if gamma != 0.0 {
            let (_, g) = self.transition_logpdf_grad(s, a, s_next)?;
            for (o, x) in out.iter_mut().zip(g) {
                *o += gamma * x;
            }
        }
        if beta_guid != 0.0 {
            let (_, g) = self.reward_logpdf_grad(s_next, a, r_target)?;
            for (o, x) in out.iter_mut().zip(g) {
                *o += beta_guid * x;
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let kind = if self.is_linear() {
            "dynamics-linear"
        } else {
            "dynamics-mlp"
        };
        let mut ck = Checkpoint::new(kind);
        ck.push_matrix("c_ss", &self.masks.c_ss);
        ck.push_matrix("c_as", &self.masks.c_as);
        ck.push_vector("u_sr", &self.masks.u_sr);
        ck.push_vector("u_ar", &self.masks.u_ar);
        ck.push_matrix("sigma_phi", &self.sigma_phi);
        ck.push_scalar("sigma_omega", self.sigma_omega);
        match &self.transition {
            TransitionModel::Linear { f_s, f_a } => {
                ck.push_matrix("f_s", f_s);
                ck.push_matrix("f_a", f_a);
            }
            TransitionModel::Mlp { nets } => {
                for (i, net) in nets.iter().enumerate() {
                    push_mlp(&mut ck, &format!("f{i}"), net);
                }
            }
        }
        match &self.reward {
            RewardModel::Linear { b_s, b_a } => {
                ck.push_vector("b_s", b_s);
                ck.push_vector("b_a", b_a);
            }
            RewardModel::Mlp { net } => push_mlp(&mut ck, "g", net),
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let linear = match ck.kind.as_str() {
            "dynamics-linear" => true,
            "dynamics-mlp" => false,
            other => return Err(Error::InvalidArgument(format!("not a dynamics checkpoint: {other}"))),
        };
        let masks = CausalMasks {
            c_ss: ck.matrix("c_ss")?.clone(),
            c_as: ck.matrix("c_as")?.clone(),
            u_sr: ck.vector("u_sr")?,
            u_ar: ck.vector("u_ar")?,
        };
        let (transition, reward) = if linear {
            (
                TransitionModel::Linear {
                    f_s: ck.matrix("f_s")?.clone(),
                    f_a: ck.matrix("f_a")?.clone(),
                },
                RewardModel::Linear {
                    b_s: ck.vector("b_s")?,
                    b_a: ck.vector("b_a")?,
                },
            )
        } else {
            let nets = (0..masks.state_dim())
                .map(|i| read_mlp(ck, &format!("f{i}")))
                .collect::<Result<_>>()?;
            (
                TransitionModel::Mlp { nets },
                RewardModel::Mlp {
                    net: read_mlp(ck, "g")?,
                },
            )
        };
        Self::new(
            masks,
            transition,
            reward,
            ck.matrix("sigma_phi")?.clone(),
            ck.scalar("sigma_omega")?,
        )
    }
}

pub(crate) fn push_mlp(ck: &mut Checkpoint, name: &str, net: &Mlp) {
    let widths: Vec<f64> = net.widths().iter().map(|&w| w as f64).collect();
    ck.push_vector(&format!("{name}.widths"), &widths);
    ck.push_vector(&format!("{name}.params"), net.params());
}

pub(crate) fn read_mlp(ck: &Checkpoint, name: &str) -> Result<Mlp> {
    let widths: Vec<usize> = ck
        .vector(&format!("{name}.widths"))?
        .iter()
        .map(|&w| w as usize)
        .collect();
    Mlp::from_params(&widths, ck.vector(&format!("{name}.params"))?)
}

/// Solves least squares on the given columns, with a tiny ridge if the
/// design is rank deficient. Returns the coefficients.
fn masked_least_squares(design: &Matrix, y: &[f64]) -> Vec<f64> {
    let p = design.ncols();
    if p == 0 {
        return vec![];
    }
    let y = nalgebra::DVector::from_column_slice(y);
    let gram = design.transpose() * design;
    let rhs = design.transpose() * y;
    let scale = gram.diagonal().amax().max(1.0);
    // Cholesky succeeds on numerically singular grams too, so guard on the
    // pivot ratio before trusting it.
    let well_posed = gram.clone().cholesky().filter(|ch| {
        let diag = ch.l_dirty().diagonal();
        let min = diag.iter().fold(f64::INFINITY, |m, &x| m.min(x.abs()));
        min * min > 1e-12 * scale
    });
    let coef = match well_posed {
        Some(ch) => ch.solve(&rhs),
        None => {
            let ridge = gram + Matrix::identity(p, p) * 1e-6;
            ridge
                .cholesky()
                .map(|ch| ch.solve(&rhs))
                .unwrap_or_else(|| nalgebra::DVector::zeros(p))
        }
    };
    coef.iter().copied().collect()
}

/// Fits the causal dynamics to transitions under fixed masks.
pub fn fit_dynamics(transitions: &[Transition], masks: &CausalMasks, kind: &DynamicsKind) -> Result<CausalDynamics> {
    masks.validate()?;
    let (n, d) = (masks.state_dim(), masks.action_dim());
    for t in transitions {
        check_dim("transition state", n, t.s.len())?;
        check_dim("transition action", d, t.a.len())?;
        check_dim("transition next state", n, t.s_next.len())?;
    }
    match kind {
        DynamicsKind::Linear => fit_linear(transitions, masks),
        DynamicsKind::Mlp(cfg) => fit_mlp(transitions, masks, cfg),
    }
}

fn fit_linear(transitions: &[Transition], masks: &CausalMasks) -> Result<CausalDynamics> {
    let (n, d) = (masks.state_dim(), masks.action_dim());
    let rows = transitions.len();
    let needed = 10 * (n + d);
    if rows < needed {
        return Err(Error::InsufficientSamples { needed, got: rows });
    }
    let mut f_s = Matrix::zeros(n, n);
    let mut f_a = Matrix::zeros(n, d);
    let mut residuals = Matrix::zeros(rows, n);
    for i in 0..n {
        let cols: Vec<(bool, usize, f64)> = (0..n)
            .filter(|&j| masks.c_ss[(j, i)] != 0.0)
            .map(|j| (true, j, masks.c_ss[(j, i)]))
            .chain(
                (0..d)
                    .filter(|&j| masks.c_as[(j, i)] != 0.0)
                    .map(|j| (false, j, masks.c_as[(j, i)])),
            )
            .collect();
        let design = Matrix::from_fn(rows, cols.len(), |r, c| {
            let (is_state, j, m) = cols[c];
            let t = &transitions[r];
            m * if is_state { t.s[j] } else { t.a[j] }
        });
        let y: Vec<f64> = transitions.iter().map(|t| t.s_next[i]).collect();
        let coef = masked_least_squares(&design, &y);
        for (&(is_state, j, _), &c) in cols.iter().zip(&coef) {
            if is_state {
                f_s[(i, j)] = c;
            } else {
                f_a[(i, j)] = c;
            }
        }
        let fitted = &design * nalgebra::DVector::from_column_slice(&coef);
        for r in 0..rows {
            residuals[(r, i)] = y[r] - fitted[r];
        }
    }
    let cols: Vec<(bool, usize, f64)> = (0..n)
        .filter(|&j| masks.u_sr[j] != 0.0)
        .map(|j| (true, j, masks.u_sr[j]))
        .chain(
            (0..d)
                .filter(|&j| masks.u_ar[j] != 0.0)
                .map(|j| (false, j, masks.u_ar[j])),
        )
        .collect();
    let design = Matrix::from_fn(rows, cols.len(), |r, c| {
        let (is_state, j, m) = cols[c];
        let t = &transitions[r];
        m * if is_state { t.s_next[j] } else { t.a[j] }
    });
    let y: Vec<f64> = transitions.iter().map(|t| t.r).collect();
    let coef = masked_least_squares(&design, &y);
    let mut b_s = vec![0.0; n];
    let mut b_a = vec![0.0; d];
    for (&(is_state, j, _), &c) in cols.iter().zip(&coef) {
        if is_state {
            b_s[j] = c;
        } else {
            b_a[j] = c;
        }
    }
    let fitted = &design * nalgebra::DVector::from_column_slice(&coef);
    let sigma_omega = (0..rows).map(|r| (y[r] - fitted[r]).powi(2)).sum::<f64>() / rows as f64 + VARIANCE_FLOOR;
    let sigma_phi = residual_covariance(&residuals);
    CausalDynamics::new(
        masks.clone(),
        TransitionModel::Linear { f_s, f_a },
        RewardModel::Linear { b_s, b_a },
        sigma_phi,
        sigma_omega,
    )
}

fn residual_covariance(residuals: &Matrix) -> Matrix {
    let (rows, n) = (residuals.nrows() as f64, residuals.ncols());
    let mut cov = residuals.transpose() * residuals / rows;
    if n > FULL_COVARIANCE_MAX_DIM {
        cov = Matrix::from_diagonal(&cov.diagonal());
    }
    cov + Matrix::identity(n, n) * VARIANCE_FLOOR
}

fn fit_mlp(transitions: &[Transition], masks: &CausalMasks, cfg: &MlpFitConfig) -> Result<CausalDynamics> {
    let (n, d) = (masks.state_dim(), masks.action_dim());
    if transitions.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    if cfg.batch == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let mut rng = seeded_rng(cfg.seed);
    let widths: Vec<usize> = std::iter::once(n + d)
        .chain(cfg.hidden.iter().copied())
        .chain([1])
        .collect();
    let mut nets: Vec<Mlp> = (0..=n).map(|_| Mlp::new(&widths, &mut rng)).collect::<Result<_>>()?;
    // Index n is the reward network; log_var holds one entry per network.
    let mut log_var = vec![0.0f64; n + 1];
    let mut opts: Vec<Adam> = nets.iter().map(|net| Adam::new(net.num_params() + 1, cfg.lr)).collect();
    let inputs = |t: &Transition, i: usize| -> Result<(Vec<f64>, f64)> {
        if i < n {
            let f = apply_masks(masks, &t.s, &t.a)?;
            Ok((f.state[i].iter().chain(&f.action[i]).copied().collect(), t.s_next[i]))
        } else {
            let (fs, fa) = apply_reward_masks(masks, &t.s_next, &t.a)?;
            Ok((fs.into_iter().chain(fa).collect(), t.r))
        }
    };
    for _ in 0..cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..transitions.len())).collect();
        for (i, net) in nets.iter_mut().enumerate() {
            let mut grad = vec![0.0; net.num_params() + 1];
            let prec = (-log_var[i]).exp();
            let scale = 1.0 / cfg.batch as f64;
            for &b in &batch {
                let (x, y) = inputs(&transitions[b], i)?;
                let trace = net.forward_trace(&x)?;
                let delta = y - trace.output()[0];
                let (pg, vg) = grad.split_at_mut(net.num_params());
                net.backward(&trace, &[-delta * prec * scale], pg)?;
                vg[0] += 0.5 * (1.0 - delta * delta * prec) * scale;
            }
            let mut params: Vec<f64> = net.params().iter().copied().chain([log_var[i]]).collect();
            opts[i].step(&mut params, &grad)?;
            let p = net.num_params();
            net.params_mut().copy_from_slice(&params[..p]);
            log_var[i] = params[p];
        }
    }
    let reward_net = nets.pop().expect("reward network");
    let sigma_phi = Matrix::from_diagonal(&nalgebra::DVector::from_iterator(
        n,
        log_var[..n].iter().map(|v| v.exp() + VARIANCE_FLOOR),
    ));
    CausalDynamics::new(
        masks.clone(),
        TransitionModel::Mlp { nets },
        RewardModel::Mlp { net: reward_net },
        sigma_phi,
        log_var[n].exp() + VARIANCE_FLOOR,
    )
}

/// Samples `(s', r)` from the fitted model under `do(a)`.
pub fn sample_intervention(dynamics: &CausalDynamics, s: &[f64], a: &[f64], rng: &mut Rng) -> Result<(Vec<f64>, f64)> {
    let mean = dynamics.predict_next_state(s, a)?;
    let chol = psd_factor(dynamics.sigma_phi(), "Sigma_phi")?;
    let z = crate::numerics::standard_normal_vec(mean.len(), rng);
    let s_next: Vec<f64> = (0..mean.len())
        .map(|i| mean[i] + (0..mean.len()).map(|j| chol[(i, j)] * z[j]).sum::<f64>())
        .collect();
    let r =
        dynamics.predict_reward(&s_next, a)? + dynamics.sigma_omega().sqrt() * crate::numerics::standard_normal(rng);
    Ok((s_next, r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::{exact_masks, generate_dataset, GroundTruthScm, ScmParams};
    use approx::assert_relative_eq;

    fn linear(
        f_s: Matrix,
        f_a: Matrix,
        b_s: Vec<f64>,
        b_a: Vec<f64>,
        sigma_phi: Matrix,
        sigma_omega: f64,
    ) -> CausalDynamics {
        let masks = CausalMasks::ones(f_s.nrows(), f_a.ncols());
        CausalDynamics::new(
            masks,
            TransitionModel::Linear { f_s, f_a },
            RewardModel::Linear { b_s, b_a },
            sigma_phi,
            sigma_omega,
        )
        .unwrap()
    }

    fn scm_with_noise(seed: u64, noise: f64) -> GroundTruthScm {
        let base = GroundTruthScm::random_sparse(4, 3, 2, &mut seeded_rng(seed)).unwrap();
        let mut p: ScmParams = base.params().clone();
        p.sigma_phi = Matrix::identity(4, 4) * noise;
        p.sigma_omega = noise;
        GroundTruthScm::new(p).unwrap()
    }

    #[test]
    fn identity_and_zero_masks() {
        let s = [1.0, -2.0];
        let a = [0.5];
        let f = apply_masks(&CausalMasks::ones(2, 1), &s, &a).unwrap();
        assert_eq!(f.state, vec![s.to_vec(), s.to_vec()]);
        assert_eq!(f.action, vec![a.to_vec(), a.to_vec()]);
        let z = apply_masks(&CausalMasks::zeros(2, 1), &s, &a).unwrap();
        assert!(z
            .state
            .iter()
            .flatten()
            .chain(z.action.iter().flatten())
            .all(|&x| x == 0.0));
        assert!(apply_masks(&CausalMasks::ones(2, 1), &[1.0], &a).is_err());
    }

    #[test]
    fn transition_gradient_examples() {
        let dy = linear(
            Matrix::zeros(2, 2),
            Matrix::identity(2, 2),
            vec![0.0; 2],
            vec![0.0; 2],
            Matrix::identity(2, 2),
            1.0,
        );
        let (_, g) = dy
            .transition_logpdf_grad(&[0.3, 0.4], &[1.0, 0.0], &[0.0, 0.0])
            .unwrap();
        assert_eq!(g, vec![-1.0, 0.0]);
        let mean = dy.predict_next_state(&[0.3, 0.4], &[0.7, -0.2]).unwrap();
        let (_, g) = dy.transition_logpdf_grad(&[0.3, 0.4], &[0.7, -0.2], &mean).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn reward_gradient_examples() {
        let dy = linear(
            Matrix::zeros(1, 1),
            Matrix::zeros(1, 1),
            vec![0.0],
            vec![1.0],
            Matrix::identity(1, 1),
            1.0,
        );
        let (_, g) = dy.reward_logpdf_grad(&[0.0], &[2.0], 0.0).unwrap();
        assert_eq!(g, vec![-2.0]);
        let r = dy.predict_reward(&[0.0], &[0.3]).unwrap();
        assert_eq!(dy.reward_logpdf_grad(&[0.0], &[0.3], r).unwrap().1, vec![0.0]);
    }

    #[test]
    fn joint_gradient_reductions() {
        let scm = scm_with_noise(2, 0.3);
        let p = scm.params();
        let dy = linear(
            p.f_s.clone(),
            p.f_a.clone(),
            p.b_s.clone(),
            p.b_a.clone(),
            p.sigma_phi.clone(),
            p.sigma_omega,
        );
        let (s, a, sn, r) = ([0.1, 0.2, -0.3, 0.4], [0.5, -0.1, 0.2], [0.0, 1.0, 0.5, -0.5], 1.3);
        assert!(dy
            .do_intervention_joint_grad(&s, &a, &sn, r, 0.0, 0.0)
            .unwrap()
            .iter()
            .all(|&x| x == 0.0));
        let t = dy.transition_logpdf_grad(&s, &a, &sn).unwrap().1;
        assert_eq!(dy.do_intervention_joint_grad(&s, &a, &sn, r, 1.0, 0.0).unwrap(), t);
        let w = dy.reward_logpdf_grad(&sn, &a, r).unwrap().1;
        let both = dy.do_intervention_joint_grad(&s, &a, &sn, r, 1.0, 1.0).unwrap();
        for j in 0..3 {
            assert_relative_eq!(both[j], t[j] + w[j], max_relative = 1e-14);
        }
        let joint = dy.joint_logpdf(&s, &a, &sn, r).unwrap();
        let parts = dy.transition_logpdf_grad(&s, &a, &sn).unwrap().0 + dy.reward_logpdf_grad(&sn, &a, r).unwrap().0;
        assert_eq!(joint, parts);
    }

    #[test]
    fn noiseless_fit_recovers_operators() {
        let scm = scm_with_noise(5, 0.0);
        let data = generate_dataset(&scm, 10, 20, 1.0, &mut seeded_rng(1)).unwrap();
        let dy = fit_dynamics(&data, &exact_masks(&scm), &DynamicsKind::Linear).unwrap();
        let TransitionModel::Linear { f_s, f_a } = dy.transition_model() else {
            unreachable!()
        };
        let RewardModel::Linear { b_s, b_a } = dy.reward_model() else {
            unreachable!()
        };
        let p = scm.params();
        assert!((f_s - &p.f_s).amax() < 1e-6);
        assert!((f_a - &p.f_a).amax() < 1e-6);
        for (x, y) in b_s.iter().chain(b_a).zip(p.b_s.iter().chain(&p.b_a)) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn noisy_fit_is_consistent() {
        let scm = scm_with_noise(6, 0.1);
        let data = generate_dataset(&scm, 200, 50, 1.0, &mut seeded_rng(2)).unwrap();
        let dy = fit_dynamics(&data, &exact_masks(&scm), &DynamicsKind::Linear).unwrap();
        let TransitionModel::Linear { f_s, f_a } = dy.transition_model() else {
            unreachable!()
        };
        let p = scm.params();
        assert!((f_s - &p.f_s).amax() < 0.05);
        assert!((f_a - &p.f_a).amax() < 0.05);
        let rel = (dy.sigma_phi() - &p.sigma_phi).norm() / p.sigma_phi.norm();
        assert!(rel < 0.15, "{rel}");
    }

    #[test]
    fn zero_action_mask_gives_zero_operator() {
        let scm = scm_with_noise(7, 0.1);
        let mut masks = exact_masks(&scm);
        masks.c_as.fill(0.0);
        let data = generate_dataset(&scm, 20, 20, 1.0, &mut seeded_rng(3)).unwrap();
        let dy = fit_dynamics(&data, &masks, &DynamicsKind::Linear).unwrap();
        let TransitionModel::Linear { f_a, .. } = dy.transition_model() else {
            unreachable!()
        };
        assert!(f_a.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rank_deficient_design_uses_ridge() {
        let scm = scm_with_noise(8, 0.1);
        let mut data = generate_dataset(&scm, 10, 20, 1.0, &mut seeded_rng(4)).unwrap();
        for t in &mut data {
            t.a[1] = t.a[0];
        }
        let dy = fit_dynamics(&data, &CausalMasks::ones(4, 3), &DynamicsKind::Linear).unwrap();
        assert!(dy
            .predict_next_state(&[1.0; 4], &[1.0; 3])
            .unwrap()
            .iter()
            .all(|x| x.is_finite()));
    }

    #[test]
    fn too_few_transitions() {
        let scm = scm_with_noise(8, 0.1);
        let data = generate_dataset(&scm, 1, 5, 1.0, &mut seeded_rng(4)).unwrap();
        assert!(matches!(
            fit_dynamics(&data, &CausalMasks::ones(4, 3), &DynamicsKind::Linear),
            Err(Error::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn mlp_fit_learns_something_and_respects_masks() {
        let scm = scm_with_noise(9, 0.1);
        let data = generate_dataset(&scm, 40, 25, 1.0, &mut seeded_rng(5)).unwrap();
        let masks = exact_masks(&scm);
        let cfg = MlpFitConfig {
            hidden: vec![16],
            steps: 1500,
            ..MlpFitConfig::default()
        };
        let dy = fit_dynamics(&data, &masks, &DynamicsKind::Mlp(cfg)).unwrap();
        let mse: f64 = data
            .iter()
            .map(|t| {
                let m = dy.predict_next_state(&t.s, &t.a).unwrap();
                m.iter().zip(&t.s_next).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
            })
            .sum::<f64>()
            / data.len() as f64;
        let var: f64 = data
            .iter()
            .map(|t| t.s_next.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            / data.len() as f64;
        assert!(mse < 0.5 * var, "mse {mse} var {var}");
        // A masked-out action coordinate has exactly no influence.
        let j = (0..3).find(|&j| masks.c_as.row(j).iter().all(|&x| x == 0.0)).unwrap();
        let s = [0.3, -0.2, 0.1, 0.4];
        let mut a = [0.2, -0.4, 0.6];
        let before = (
            dy.predict_next_state(&s, &a).unwrap(),
            dy.transition_logpdf_grad(&s, &a, &s).unwrap(),
        );
        a[j] += 0.77;
        let after = (
            dy.predict_next_state(&s, &a).unwrap(),
            dy.transition_logpdf_grad(&s, &a, &s).unwrap(),
        );
        assert_eq!(before, after);
    }

    #[test]
    fn checkpoint_round_trip() {
        let scm = scm_with_noise(10, 0.1);
        let data = generate_dataset(&scm, 20, 20, 1.0, &mut seeded_rng(6)).unwrap();
        let dy = fit_dynamics(&data, &exact_masks(&scm), &DynamicsKind::Linear).unwrap();
        let text = dy.to_checkpoint().to_text();
        let back = CausalDynamics::from_checkpoint(&Checkpoint::from_text(&text).unwrap()).unwrap();
        assert_eq!(back, dy);
        assert_eq!(back.to_checkpoint().to_text(), text);

        let cfg = MlpFitConfig {
            hidden: vec![4],
            steps: 3,
            ..MlpFitConfig::default()
        };
        let mlp = fit_dynamics(&data, &exact_masks(&scm), &DynamicsKind::Mlp(cfg)).unwrap();
        let back = CausalDynamics::from_checkpoint(&mlp.to_checkpoint()).unwrap();
        assert_eq!(back, mlp);
    }
}
