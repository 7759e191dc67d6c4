//! Ground-truth structural causal models, causal masks and offline data.
//!
//! Variables are ordered `s_t, a_t, s_{t+1}, r_t`. The structural equations are
//!
//! ```text
//! s_{t+1} = F_s s_t + F_a a_t + xi_s,        xi_s ~ N(0, Sigma_phi)
//! r_t     = B_s s_{t+1} + B_a a_t + xi_r,    xi_r ~ N(0, sigma_omega)
//! ```
//!
//! Operators are stored output-by-input (`F_s` is `n x n`, `F_a` is `n x d`).
//! Masks use the adjacency convention instead: entry `[j, i]` gates input `j`
//! into output `i`.

mod dataset;

pub use dataset::{read_dataset, write_dataset, Dataset};

use crate::error::{check_dim, Error, Result};
use crate::numerics::{psd_factor, standard_normal, standard_normal_vec, Matrix, Rng};
use rand::Rng as _;

/// One environment interaction.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub done: bool,
}

/// Weighted DAG; `weights[(i, j)]` is the weight of edge `i -> j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dag {
    pub weights: Matrix,
}

impl Dag {
    pub fn nodes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let d = self.nodes();
        let mut out = Vec::new();
        for i in 0..d {
            for j in 0..d {
                if self.weights[(i, j)] != 0.0 {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.weights.iter().filter(|&&w| w != 0.0).count()
    }

    /// NOTEARS acyclicity residual of the weighted adjacency.
    pub fn acyclicity(&self) -> Result<f64> {
        crate::discovery::acyclicity(&self.weights).map(|(h, _)| h)
    }
}

/// Structural gates: `c_ss[(j, i)]` gates `s_j` into `s'_i`, `c_as[(j, i)]`
/// gates `a_j` into `s'_i`, `u_sr[j]` gates `s'_j` into `r`, `u_ar[j]` gates
/// `a_j` into `r`. All entries lie in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalMasks {
    pub c_ss: Matrix,
    pub c_as: Matrix,
    pub u_sr: Vec<f64>,
    pub u_ar: Vec<f64>,
}

impl CausalMasks {
    pub fn ones(n: usize, d: usize) -> Self {
        Self {
            c_ss: Matrix::from_element(n, n, 1.0),
            c_as: Matrix::from_element(d, n, 1.0),
            u_sr: vec![1.0; n],
            u_ar: vec![1.0; d],
        }
    }

    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            c_ss: Matrix::zeros(n, n),
            c_as: Matrix::zeros(d, n),
            u_sr: vec![0.0; n],
            u_ar: vec![0.0; d],
        }
    }

    pub fn state_dim(&self) -> usize {
        self.c_ss.nrows()
    }

    pub fn action_dim(&self) -> usize {
        self.c_as.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = (self.state_dim(), self.action_dim());
        check_dim("c_ss columns", n, self.c_ss.ncols())?;
        check_dim("c_as columns", n, self.c_as.ncols())?;
        check_dim("u_sr length", n, self.u_sr.len())?;
        check_dim("u_ar length", d, self.u_ar.len())?;
        let in_range = |x: &f64| (0.0..=1.0).contains(x);
        if !(self.c_ss.iter().all(in_range)
            && self.c_as.iter().all(in_range)
            && self.u_sr.iter().all(in_range)
            && self.u_ar.iter().all(in_range))
        {
            return Err(Error::InvalidArgument("mask entries must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Applies `f` to every entry, block by block.
    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self {
            c_ss: self.c_ss.map(&mut f),
            c_as: self.c_as.map(&mut f),
            u_sr: self.u_sr.iter().map(|&x| f(x)).collect(),
            u_ar: self.u_ar.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Number of differing entries per block: `(c_ss, c_as, u_sr, u_ar)`.
    pub fn differences(&self, other: &Self) -> [usize; 4] {
        let count = |a: &mut dyn Iterator<Item = (&f64, &f64)>| a.filter(|(x, y)| x != y).count();
        [
            count(&mut self.c_ss.iter().zip(other.c_ss.iter())),
            count(&mut self.c_as.iter().zip(other.c_as.iter())),
            count(&mut self.u_sr.iter().zip(other.u_sr.iter())),
            count(&mut self.u_ar.iter().zip(other.u_ar.iter())),
        ]
    }

    pub fn len(&self) -> usize {
        self.c_ss.len() + self.c_as.len() + self.u_sr.len() + self.u_ar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Operators and noise of a linear-Gaussian ground-truth model plus the
/// behavior policy used to collect offline data.
#[derive(Debug, Clone, PartialEq)]
pub struct ScmParams {
    pub f_s: Matrix,
    pub f_a: Matrix,
    pub b_s: Vec<f64>,
    pub b_a: Vec<f64>,
    pub sigma_phi: Matrix,
    pub sigma_omega: f64,
    /// Behavior policy gain, `d x n`: `a = K s + noise`.
    pub behavior_gain: Matrix,
    /// Actions are clamped to `[-bound, bound]`; infinity disables clamping.
    pub action_bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthScm {
    params: ScmParams,
    noise_factor: Matrix,
}

impl GroundTruthScm {
    pub fn new(params: ScmParams) -> Result<Self> {
        let n = params.f_s.nrows();
        let d = params.f_a.ncols();
        check_dim("F_s columns", n, params.f_s.ncols())?;
        check_dim("F_a rows", n, params.f_a.nrows())?;
        check_dim("B_s length", n, params.b_s.len())?;
        check_dim("B_a length", d, params.b_a.len())?;
        check_dim("Sigma_phi rows", n, params.sigma_phi.nrows())?;
        check_dim("behavior gain rows", d, params.behavior_gain.nrows())?;
        check_dim("behavior gain columns", n, params.behavior_gain.ncols())?;
        if !(params.sigma_omega >= 0.0) || !params.sigma_omega.is_finite() {
            return Err(Error::NotPositiveDefinite("sigma_omega"));
        }
        if !(params.action_bound > 0.0) {
            return Err(Error::InvalidArgument("action bound must be positive".into()));
        }
        let noise_factor = psd_factor(&params.sigma_phi, "Sigma_phi")?;
        Ok(Self { params, noise_factor })
    }

    pub fn params(&self) -> &ScmParams {
        &self.params
    }

    pub fn state_dim(&self) -> usize {
        self.params.f_s.nrows()
    }

    pub fn action_dim(&self) -> usize {
        self.params.f_a.ncols()
    }

    /// `s_0 ~ N(0, I)`.
    pub fn reset(&self, rng: &mut Rng) -> Vec<f64> {
        standard_normal_vec(self.state_dim(), rng)
    }

    pub fn clamp_action(&self, a: &mut [f64]) {
        let b = self.params.action_bound;
        for x in a {
            *x = x.clamp(-b, b);
        }
    }

    pub fn behavior_action(&self, s: &[f64], noise: f64, rng: &mut Rng) -> Vec<f64> {
        let k = &self.params.behavior_gain;
        let mut a: Vec<f64> = (0..self.action_dim())
            .map(|j| {
                let mean: f64 = (0..self.state_dim()).map(|i| k[(j, i)] * s[i]).sum();
                mean + noise * standard_normal(rng)
            })
            .collect();
        self.clamp_action(&mut a);
        a
    }

    /// Expected next state `F_s s + F_a a`.
    pub fn mean_next_state(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        let p = &self.params;
        (0..self.state_dim())
            .map(|i| {
                let fs: f64 = (0..self.state_dim()).map(|j| p.f_s[(i, j)] * s[j]).sum();
                let fa: f64 = (0..self.action_dim()).map(|j| p.f_a[(i, j)] * a[j]).sum();
                fs + fa
            })
            .collect()
    }

    pub fn mean_reward(&self, s_next: &[f64], a: &[f64]) -> f64 {
        let p = &self.params;
        crate::numerics::dot(&p.b_s, s_next) + crate::numerics::dot(&p.b_a, a)
    }

    /// Samples `(s_{t+1}, r_t)` for an already-clamped action.
    pub fn transition(&self, s: &[f64], a: &[f64], rng: &mut Rng) -> (Vec<f64>, f64) {
        let n = self.state_dim();
        let mut s_next = self.mean_next_state(s, a);
        let z = standard_normal_vec(n, rng);
        for i in 0..n {
            s_next[i] += (0..n).map(|j| self.noise_factor[(i, j)] * z[j]).sum::<f64>();
        }
        let xi_r = self.params.sigma_omega.sqrt() * standard_normal(rng);
        let r = self.mean_reward(&s_next, a) + xi_r;
        (s_next, r)
    }

    /// Gradient of `E[r | s, do(a)]` w.r.t. `a`: `B_a + F_aᵀ B_sᵀ`.
    pub fn expected_reward_action_gradient(&self) -> Vec<f64> {
        let p = &self.params;
        (0..self.action_dim())
            .map(|j| p.b_a[j] + (0..self.state_dim()).map(|i| p.b_s[i] * p.f_a[(i, j)]).sum::<f64>())
            .collect()
    }

    /// Random sparse model: stable `F_s`, only `causal_actions` action
    /// coordinates with nonzero `F_a` columns and `B_a` entries. Nonzero
    /// weights have magnitude at least 0.5 and `Sigma_phi = I`, so every edge
    /// survives the default lasso penalty and edge threshold.
    pub fn random_sparse(n: usize, d: usize, causal_actions: usize, rng: &mut Rng) -> Result<Self> {
        if n == 0 || d == 0 || causal_actions > d {
            return Err(Error::InvalidArgument(format!(
                "invalid random SCM sizes n={n} d={d} causal={causal_actions}"
            )));
        }
        let signed = |lo: f64, hi: f64, rng: &mut Rng| {
            let m: f64 = rng.random_range(lo..hi);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        };
        let mut f_s = Matrix::zeros(n, n);
        for _attempt in 0..200 {
            f_s = Matrix::zeros(n, n);
            for i in 0..n {
                f_s[(i, i)] = rng.random_range(0.4..0.6);
            }
            for _ in 0..n / 2 {
                let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
                if i != j {
                    f_s[(i, j)] = signed(0.5, 0.8, rng);
                }
            }
            let radius = f_s
                .clone()
                .complex_eigenvalues()
                .iter()
                .map(|l| l.norm())
                .fold(0.0, f64::max);
            if radius < 0.9 {
                break;
            }
        }
        let mut causal: Vec<usize> = (0..d).collect();
        for i in (1..d).rev() {
            causal.swap(i, rng.random_range(0..=i));
        }
        causal.truncate(causal_actions);
        causal.sort_unstable();

        let mut f_a = Matrix::zeros(n, d);
        for &j in &causal {
            let hits = 1 + rng.random_range(0..2usize.min(n));
            for _ in 0..hits {
                f_a[(rng.random_range(0..n), j)] = signed(0.5, 1.0, rng);
            }
        }
        let mut b_s = vec![0.0; n];
        for _ in 0..n.div_ceil(3) {
            b_s[rng.random_range(0..n)] = signed(0.5, 1.0, rng);
        }
        // Direct reward effect agrees in sign with the discounted long-run effect
        // of holding the action fixed, so greedy and long-run optima coincide.
        let lead = {
            let resolvent = (Matrix::identity(n, n) - &f_s * 0.99)
                .try_inverse()
                .ok_or(Error::InvalidArgument("unstable state operator".into()))?;
            let bs = Matrix::from_row_slice(1, n, &b_s);
            &bs * resolvent * &f_a
        };
        let mut b_a = vec![0.0; d];
        for &j in &causal {
            let m: f64 = rng.random_range(0.6..1.0);
            b_a[j] = if lead[(0, j)] < 0.0 { -m } else { m };
        }
        let behavior_gain = Matrix::from_fn(d, n, |_, _| 0.3 * standard_normal(rng));
        Self::new(ScmParams {
            f_s,
            f_a,
            b_s,
            b_a,
            sigma_phi: Matrix::identity(n, n),
            sigma_omega: 0.1,
            behavior_gain,
            action_bound: 1.0,
        })
    }
}

/// Rolls out the behavior policy `a = K s + noise` through the model.
///
/// RNG draws per episode: `n` for the initial state, then per step `d`
/// behavior draws followed by `n + 1` noise draws. The environment wrapper
/// consumes the stream in the same order.
pub fn generate_dataset(
    scm: &GroundTruthScm,
    episodes: usize,
    horizon: usize,
    behavior_noise: f64,
    rng: &mut Rng,
) -> Result<Vec<Transition>> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    if !(behavior_noise >= 0.0) {
        return Err(Error::InvalidArgument("behavior noise must be non-negative".into()));
    }
    let mut out = Vec::with_capacity(episodes * horizon);
    for _ in 0..episodes {
        let mut s = scm.reset(rng);
        for t in 0..horizon {
            let a = scm.behavior_action(&s, behavior_noise, rng);
            let (s_next, r) = scm.transition(&s, &a, rng);
            out.push(Transition {
                s: s.clone(),
                a,
                r,
                s_next: s_next.clone(),
                done: t + 1 == horizon,
            });
            s = s_next;
        }
    }
    Ok(out)
}

fn pattern(x: f64) -> f64 {
    if x != 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Masks read off the nonzero pattern of the true operators.
pub fn exact_masks(scm: &GroundTruthScm) -> CausalMasks {
    let p = scm.params();
    CausalMasks {
        c_ss: p.f_s.transpose().map(pattern),
        c_as: p.f_a.transpose().map(pattern),
        u_sr: p.b_s.iter().map(|&x| pattern(x)).collect(),
        u_ar: p.b_a.iter().map(|&x| pattern(x)).collect(),
    }
}

/// Stacked-variable index layout `[s_t | a_t | s_{t+1} | r_t]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackedLayout {
    pub n: usize,
    pub d: usize,
}

impl StackedLayout {
    pub fn total(&self) -> usize {
        2 * self.n + self.d + 1
    }
    pub fn state(&self, i: usize) -> usize {
        i
    }
    pub fn action(&self, j: usize) -> usize {
        self.n + j
    }
    pub fn next_state(&self, i: usize) -> usize {
        self.n + self.d + i
    }
    pub fn reward(&self) -> usize {
        2 * self.n + self.d
    }
}

/// The DAG over `(s_t, a_t, s_{t+1}, r_t)` implied by the true operators.
pub fn stacked_adjacency(scm: &GroundTruthScm) -> Dag {
    let p = scm.params();
    let (n, d) = (scm.state_dim(), scm.action_dim());
    let layout = StackedLayout { n, d };
    let mut w = Matrix::zeros(layout.total(), layout.total());
    for i in 0..n {
        for j in 0..n {
            w[(layout.state(j), layout.next_state(i))] = p.f_s[(i, j)];
        }
        for j in 0..d {
            w[(layout.action(j), layout.next_state(i))] = p.f_a[(i, j)];
        }
        w[(layout.next_state(i), layout.reward())] = p.b_s[i];
    }
    for j in 0..d {
        w[(layout.action(j), layout.reward())] = p.b_a[j];
    }
    Dag { weights: w }
}

/// Random weighted DAG: a random topological order, each forward pair an
/// edge with probability `edge_prob`, weights uniform on `±[0.5, 2]`.
pub fn random_linear_sem(d: usize, edge_prob: f64, rng: &mut Rng) -> Result<Dag> {
    if !(0.0..=1.0).contains(&edge_prob) {
        return Err(Error::InvalidArgument(format!(
            "edge probability {edge_prob} outside [0, 1]"
        )));
    }
    let mut order: Vec<usize> = (0..d).collect();
    for i in (1..d).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut w = Matrix::zeros(d, d);
    for a in 0..d {
        for b in a + 1..d {
            if rng.random_bool(edge_prob) {
                let m: f64 = rng.random_range(0.5..2.0);
                w[(order[a], order[b])] = if rng.random_bool(0.5) { m } else { -m };
            }
        }
    }
    Ok(Dag { weights: w })
}

/// Draws `samples` rows from `x = Wᵀx + z`, `z ~ N(0, I)`.
pub fn sample_linear_sem(dag: &Dag, samples: usize, rng: &mut Rng) -> Result<Matrix> {
    let d = dag.nodes();
    let order = topological_order(&dag.weights)
        .ok_or_else(|| Error::InvalidArgument("weighted adjacency has a cycle".into()))?;
    let mut x = Matrix::zeros(samples, d);
    for r in 0..samples {
        for &j in &order {
            let mut v = standard_normal(rng);
            for i in 0..d {
                if dag.weights[(i, j)] != 0.0 {
                    v += dag.weights[(i, j)] * x[(r, i)];
                }
            }
            x[(r, j)] = v;
        }
    }
    Ok(x)
}

pub(crate) fn topological_order(w: &Matrix) -> Option<Vec<usize>> {
    let d = w.nrows();
    let mut indeg: Vec<usize> = (0..d).map(|j| (0..d).filter(|&i| w[(i, j)] != 0.0).count()).collect();
    let mut ready: Vec<usize> = (0..d).rev().filter(|&j| indeg[j] == 0).collect();
    let mut order = Vec::with_capacity(d);
    while let Some(i) = ready.pop() {
        order.push(i);
        for j in 0..d {
            if w[(i, j)] != 0.0 {
                indeg[j] -= 1;
                if indeg[j] == 0 {
                    ready.push(j);
                }
            }
        }
    }
    (order.len() == d).then_some(order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;

    fn simple(f_s: Matrix, f_a: Matrix, b_s: Vec<f64>, b_a: Vec<f64>, noise: f64) -> GroundTruthScm {
        let (n, d) = (f_s.nrows(), f_a.ncols());
        GroundTruthScm::new(ScmParams {
            f_s,
            f_a,
            b_s,
            b_a,
            sigma_phi: Matrix::identity(n, n) * noise,
            sigma_omega: noise,
            behavior_gain: Matrix::from_element(d, n, 0.2),
            action_bound: f64::INFINITY,
        })
        .unwrap()
    }

    #[test]
    fn noiseless_rollout_follows_recursion() {
        let scm = simple(
            Matrix::from_row_slice(2, 2, &[0.5, 0.1, 0.0, 0.7]),
            Matrix::from_row_slice(2, 1, &[1.0, -1.0]),
            vec![1.0, 0.5],
            vec![2.0],
            0.0,
        );
        let data = generate_dataset(&scm, 2, 5, 0.0, &mut seeded_rng(3)).unwrap();
        assert_eq!(data.len(), 10);
        for t in &data {
            let expected = scm.mean_next_state(&t.s, &t.a);
            assert_eq!(t.s_next, expected);
            assert_eq!(t.r, scm.mean_reward(&t.s_next, &t.a));
            assert_eq!(t.a[0], 0.2 * t.s[0] + 0.2 * t.s[1]);
        }
        for w in data[..5].windows(2) {
            assert_eq!(w[0].s_next, w[1].s);
        }
        assert!(data[4].done && !data[3].done);
    }

    #[test]
    fn identical_seeds_identical_data() {
        let scm = GroundTruthScm::random_sparse(4, 3, 2, &mut seeded_rng(1)).unwrap();
        let a = generate_dataset(&scm, 3, 10, 0.5, &mut seeded_rng(9)).unwrap();
        let b = generate_dataset(&scm, 3, 10, 0.5, &mut seeded_rng(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_indefinite_noise() {
        let mut p = GroundTruthScm::random_sparse(2, 1, 1, &mut seeded_rng(1))
            .unwrap()
            .params()
            .clone();
        p.sigma_phi[(0, 0)] = -1.0;
        assert!(matches!(GroundTruthScm::new(p), Err(Error::NotPositiveDefinite(_))));
    }

    #[test]
    fn masks_from_patterns() {
        let scm = simple(
            Matrix::from_diagonal(&nalgebra::dvector![0.3, 0.4]),
            Matrix::zeros(2, 2),
            vec![1.0, 0.0],
            vec![0.0, 0.0],
            0.1,
        );
        let m = exact_masks(&scm);
        assert_eq!(m.c_ss, Matrix::identity(2, 2));
        assert_eq!(m.c_as, Matrix::zeros(2, 2));
        assert_eq!(m.u_sr, vec![1.0, 0.0]);
        assert_eq!(m.u_ar, vec![0.0, 0.0]);

        let dense = simple(
            Matrix::from_element(2, 2, 0.2),
            Matrix::from_element(2, 3, -0.3),
            vec![1.0, 2.0],
            vec![0.1, 0.2, 0.3],
            0.1,
        );
        assert_eq!(exact_masks(&dense), CausalMasks::ones(2, 3));
    }

    #[test]
    fn masks_ignore_rescaling() {
        let scm = GroundTruthScm::random_sparse(5, 3, 2, &mut seeded_rng(4)).unwrap();
        let mut p = scm.params().clone();
        p.f_s *= 3.7;
        p.f_a *= -0.01;
        p.b_s.iter_mut().for_each(|x| *x *= 12.0);
        let scaled = GroundTruthScm::new(p).unwrap();
        assert_eq!(exact_masks(&scm), exact_masks(&scaled));
    }

    #[test]
    fn stacked_edgeless_and_chain() {
        let zero = simple(Matrix::zeros(1, 1), Matrix::zeros(1, 1), vec![0.0], vec![0.0], 0.1);
        let dag = stacked_adjacency(&zero);
        assert_eq!(dag.nodes(), 4);
        assert_eq!(dag.edge_count(), 0);

        let chain = simple(
            Matrix::from_element(1, 1, 0.9),
            Matrix::zeros(1, 1),
            vec![1.0],
            vec![0.0],
            0.1,
        );
        let dag = stacked_adjacency(&chain);
        assert_eq!(dag.edges(), vec![(0, 2), (2, 3)]);
    }

    #[test]
    fn stacked_adjacency_is_acyclic() {
        for seed in 0..10 {
            let scm = GroundTruthScm::random_sparse(5, 4, 2, &mut seeded_rng(seed)).unwrap();
            assert!(stacked_adjacency(&scm).acyclicity().unwrap() < 1e-8);
        }
    }

    #[test]
    fn random_sparse_has_designated_causal_actions() {
        let scm = GroundTruthScm::random_sparse(6, 4, 2, &mut seeded_rng(11)).unwrap();
        let m = exact_masks(&scm);
        let causal: Vec<usize> = (0..4).filter(|&j| m.u_ar[j] == 1.0).collect();
        assert_eq!(causal.len(), 2);
        for j in 0..4 {
            if !causal.contains(&j) {
                assert!(m.c_as.row(j).iter().all(|&x| x == 0.0));
            }
        }
    }
}
