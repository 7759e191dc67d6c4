//! NOTEARS structure learning, an exhaustive small-graph oracle, and the
//! conversion from a learned DAG over `(s_t, a_t, s_{t+1}, r_t)` into masks.

use crate::error::{check_dim, Error, Result};
use crate::numerics::{mat_expm, Matrix, Rng};
use crate::scm::{CausalMasks, Dag, StackedLayout, Transition};
use rand::Rng as _;
use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq)]
pub struct NotearsConfig {
    pub lambda1: f64,
    pub rho_init: f64,
    pub rho_growth: f64,
    pub rho_max: f64,
    pub alpha_init: f64,
    pub tolerance: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub threshold: f64,
}

impl Default for NotearsConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            rho_init: 1.0,
            rho_growth: 10.0,
            rho_max: 1e16,
            alpha_init: 0.0,
            tolerance: 1e-8,
            max_outer: 100,
            max_inner: 3000,
            threshold: 0.3,
        }
    }
}

impl NotearsConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda1 >= 0.0
            && self.rho_init > 0.0
            && self.rho_growth > 1.0
            && self.rho_max >= self.rho_init
            && self.alpha_init.is_finite()
            && self.tolerance > 0.0
            && self.max_outer >= 1
            && self.max_inner >= 1
            && self.threshold > 0.0
            && self.threshold < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid NOTEARS config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscoveryResult {
    /// Weighted adjacency before thresholding, in data units.
    pub w: Matrix,
    pub threshold: f64,
    pub acyclicity: f64,
    /// Penalized least-squares objective at `w`.
    pub objective: f64,
    pub outer_iterations: usize,
}

impl DiscoveryResult {
    /// `w` with entries below the threshold (in magnitude) set to zero.
    pub fn thresholded(&self) -> Matrix {
        self.w.map(|x| if x.abs() >= self.threshold { x } else { 0.0 })
    }

    pub fn dag(&self) -> Dag {
        Dag {
            weights: self.thresholded(),
        }
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.dag().edges()
    }
}

/// `h(W) = tr(exp(W∘W)) - d` and its gradient `exp(W∘W)ᵀ ∘ 2W`.
pub fn acyclicity(w: &Matrix) -> Result<(f64, Matrix)> {
    if !w.is_square() {
        return Err(Error::NotSquare {
            rows: w.nrows(),
            cols: w.ncols(),
        });
    }
    let e = mat_expm(&w.component_mul(w))?;
    let h = e.trace() - w.nrows() as f64;
    let grad = e.transpose().component_mul(w) * 2.0;
    Ok((h, grad))
}

fn center_columns(data: &Matrix) -> Matrix {
    let mut x = data.clone();
    let n = x.nrows() as f64;
    for mut col in x.column_iter_mut() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
    }
    x
}

struct Problem<'a> {
    gram: Matrix,
    allowed: &'a Matrix,
    lambda1: f64,
}

impl Problem<'_> {
    fn squared_loss(&self, w: &Matrix) -> f64 {
        let d = w.nrows();
        let r = Matrix::identity(d, d) - w;
        0.5 * (r.transpose() * &self.gram * &r).trace()
    }

    fn l1(&self, w: &Matrix) -> f64 {
        self.lambda1 * w.iter().map(|x| x.abs()).sum::<f64>()
    }

    /// Smooth part of the augmented Lagrangian and its gradient.
    fn smooth(&self, w: &Matrix, rho: f64, alpha: f64) -> Result<(f64, Matrix)> {
        let d = w.nrows();
        let (h, gh) = acyclicity(w)?;
        let loss = self.squared_loss(w) + 0.5 * rho * h * h + alpha * h;
        let grad = &self.gram * (w - Matrix::identity(d, d)) + gh * (rho * h + alpha);
        Ok((loss, grad))
    }

    fn prox(&self, v: &Matrix, step: f64) -> Matrix {
        let t = step * self.lambda1;
        Matrix::from_fn(v.nrows(), v.ncols(), |i, j| {
            if self.allowed[(i, j)] == 0.0 {
                0.0
            } else {
                let x = v[(i, j)];
                x.signum() * (x.abs() - t).max(0.0)
            }
        })
    }

    /// Accelerated proximal gradient with backtracking and adaptive restart.
    fn solve_inner(&self, w0: &Matrix, rho: f64, alpha: f64, max_iter: usize) -> Result<Matrix> {
        let mut w = w0.clone();
        let mut y = w.clone();
        let mut t_mom: f64 = 1.0;
        let mut step = 1.0;
        let mut f_prev = self.smooth(&w, rho, alpha)?.0 + self.l1(&w);
        for _ in 0..max_iter {
            let (fy, gy) = self.smooth(&y, rho, alpha)?;
            let mut candidate;
            loop {
                candidate = self.prox(&(&y - &gy * step), step);
                let diff = &candidate - &y;
                let quad = fy + gy.dot(&diff) + diff.norm_squared() / (2.0 * step);
                let f_cand = self.smooth(&candidate, rho, alpha)?.0;
                if f_cand <= quad + 1e-12 * quad.abs().max(1.0) || step < 1e-20 {
                    break;
                }
                step *= 0.5;
            }
            let f_new = self.smooth(&candidate, rho, alpha)?.0 + self.l1(&candidate);
            let moved = (&candidate - &w).amax();
            if f_new > f_prev {
                // Restart momentum from the last accepted iterate.
                y = w.clone();
                t_mom = 1.0;
                continue;
            }
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_mom * t_mom).sqrt());
            y = &candidate + (&candidate - &w) * ((t_mom - 1.0) / t_next);
            t_mom = t_next;
            w = candidate;
            let rel = (f_prev - f_new).abs() / f_prev.abs().max(1.0);
            f_prev = f_new;
            step *= 2.0;
            if moved < 1e-10 || rel < 1e-14 {
                break;
            }
        }
        Ok(w)
    }
}

/// NOTEARS on the rows of `data` (samples x variables).
pub fn notears_fit(data: &Matrix, cfg: &NotearsConfig) -> Result<DiscoveryResult> {
    let d = data.ncols();
    let allowed = Matrix::from_fn(d, d, |i, j| if i == j { 0.0 } else { 1.0 });
    notears_fit_constrained(data, cfg, &allowed, None)
}

/// NOTEARS with a 0/1 matrix of admissible edges and an optional warm start.
pub fn notears_fit_constrained(
    data: &Matrix,
    cfg: &NotearsConfig,
    allowed: &Matrix,
    warm_start: Option<&Matrix>,
) -> Result<DiscoveryResult> {
    cfg.validate()?;
    let (n, d) = (data.nrows(), data.ncols());
    if n < 30 {
        return Err(Error::InsufficientSamples { needed: 30, got: n });
    }
    if d == 0 {
        return Err(Error::InvalidArgument("data has no variables".into()));
    }
    check_dim("allowed-edge rows", d, allowed.nrows())?;
    check_dim("allowed-edge columns", d, allowed.ncols())?;
    if !data.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("discovery data"));
    }
    let x = center_columns(data);
    let problem = Problem {
        gram: x.transpose() * &x / n as f64,
        allowed,
        lambda1: cfg.lambda1,
    };
    let mut w = match warm_start {
        Some(w0) => {
            check_dim("warm start rows", d, w0.nrows())?;
            check_dim("warm start columns", d, w0.ncols())?;
            problem.prox(w0, 0.0)
        }
        None => Matrix::zeros(d, d),
    };
    let mut rho = cfg.rho_init;
    let mut alpha = cfg.alpha_init;
    // Any first inner solution counts as sufficient progress.
    let mut h = f64::INFINITY;
    let mut outer = 0;
    let objective = |w: &Matrix| problem.squared_loss(w) + problem.l1(w);
    while outer < cfg.max_outer {
        outer += 1;
        let mut w_new;
        let mut h_new;
        loop {
            w_new = problem.solve_inner(&w, rho, alpha, cfg.max_inner)?;
            h_new = acyclicity(&w_new)?.0;
            if h_new > 0.25 * h && rho < cfg.rho_max {
                rho *= cfg.rho_growth;
            } else {
                break;
            }
        }
        w = w_new;
        h = h_new;
        alpha += rho * h;
        if h <= cfg.tolerance || rho >= cfg.rho_max {
            break;
        }
    }
    let result = DiscoveryResult {
        objective: objective(&w),
        w,
        threshold: cfg.threshold,
        acyclicity: h,
        outer_iterations: outer,
    };
    if result.acyclicity > cfg.tolerance {
        return Err(Error::NotConverged {
            residual: result.acyclicity,
            iterations: outer,
            best: Box::new(result),
        });
    }
    Ok(result)
}

fn is_acyclic(adj: &[bool], d: usize) -> bool {
    // Kahn's algorithm.
    let mut indeg: Vec<usize> = (0..d).map(|j| (0..d).filter(|&i| adj[i * d + j]).count()).collect();
    let mut stack: Vec<usize> = (0..d).filter(|&j| indeg[j] == 0).collect();
    let mut seen = 0;
    while let Some(i) = stack.pop() {
        seen += 1;
        for j in 0..d {
            if adj[i * d + j] {
                indeg[j] -= 1;
                if indeg[j] == 0 {
                    stack.push(j);
                }
            }
        }
    }
    seen == d
}

/// Least-squares coefficients of column `child` on `parents`, and the RSS.
fn ols_fit(x: &Matrix, child: usize, parents: &[usize]) -> (Vec<f64>, f64) {
    let y = x.column(child).clone_owned();
    if parents.is_empty() {
        return (vec![], y.norm_squared());
    }
    let design = Matrix::from_fn(x.nrows(), parents.len(), |r, c| x[(r, parents[c])]);
    let gram = design.transpose() * &design;
    let rhs = design.transpose() * &y;
    let coef = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => {
            let ridge = gram + Matrix::identity(parents.len(), parents.len()) * 1e-9;
            ridge
                .lu()
                .solve(&rhs)
                .unwrap_or_else(|| nalgebra::DVector::zeros(parents.len()))
        }
    };
    let resid = y - design * &coef;
    (coef.iter().copied().collect(), resid.norm_squared())
}

/// Enumerates every DAG on at most four variables and returns the one with
/// the best BIC under a shared-noise-variance linear Gaussian model.
pub fn exhaustive_dag_oracle(data: &Matrix) -> Result<Dag> {
    let (n, d) = (data.nrows(), data.ncols());
    if d == 0 || d > 4 {
        return Err(Error::InvalidArgument(format!(
            "exhaustive search supports 1..=4 variables, got {d}"
        )));
    }
    if n <= d {
        return Err(Error::InsufficientSamples { needed: d + 1, got: n });
    }
    let x = center_columns(data);
    let pairs: Vec<(usize, usize)> = (0..d)
        .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect();
    let nf = n as f64;
    let mut best: Option<(f64, Matrix)> = None;
    for bits in 0u32..(1 << pairs.len()) {
        let mut adj = vec![false; d * d];
        for (b, &(i, j)) in pairs.iter().enumerate() {
            adj[i * d + j] = bits >> b & 1 == 1;
        }
        if !is_acyclic(&adj, d) {
            continue;
        }
        let mut w = Matrix::zeros(d, d);
        let mut rss = 0.0;
        let mut k = 0;
        for j in 0..d {
            let parents: Vec<usize> = (0..d).filter(|&i| adj[i * d + j]).collect();
            let (coef, r) = ols_fit(&x, j, &parents);
            for (&p, c) in parents.iter().zip(coef) {
                w[(p, j)] = c;
            }
            rss += r;
            k += parents.len();
        }
        let total = nf * d as f64;
        let score = total * (rss / total).max(f64::MIN_POSITIVE).ln() + k as f64 * nf.ln();
        if best.as_ref().is_none_or(|(s, _)| score < *s) {
            best = Some((score, w));
        }
    }
    Ok(Dag {
        weights: best.expect("the empty graph is always acyclic").1,
    })
}

/// Structural Hamming distance: a reversed edge counts once.
pub fn structural_hamming_distance(a: &Matrix, b: &Matrix) -> usize {
    let d = a.nrows();
    let mut shd = 0;
    for i in 0..d {
        for j in i + 1..d {
            let ea = (a[(i, j)] != 0.0, a[(j, i)] != 0.0);
            let eb = (b[(i, j)] != 0.0, b[(j, i)] != 0.0);
            if ea != eb {
                shd += 1;
            }
        }
    }
    shd
}

/// Stacked data matrix `[s_t | a_t | s_{t+1} | r_t]`, one row per transition.
pub fn stacked_data(transitions: &[Transition]) -> Result<(Matrix, StackedLayout)> {
    let first = transitions
        .first()
        .ok_or(Error::InsufficientSamples { needed: 1, got: 0 })?;
    let layout = StackedLayout {
        n: first.s.len(),
        d: first.a.len(),
    };
    let mut x = Matrix::zeros(transitions.len(), layout.total());
    for (row, t) in transitions.iter().enumerate() {
        check_dim("transition state", layout.n, t.s.len())?;
        check_dim("transition action", layout.d, t.a.len())?;
        check_dim("transition next state", layout.n, t.s_next.len())?;
        for i in 0..layout.n {
            x[(row, layout.state(i))] = t.s[i];
            x[(row, layout.next_state(i))] = t.s_next[i];
        }
        for j in 0..layout.d {
            x[(row, layout.action(j))] = t.a[j];
        }
        x[(row, layout.reward())] = t.r;
    }
    Ok((x, layout))
}

/// Admissible edges over the stacked variables. Nothing points into `s_t` or
/// `a_t`, the reward has no children, and next-state coordinates do not feed
/// each other (the transition noise is modelled jointly instead).
pub fn temporal_allowed_edges(layout: StackedLayout) -> Matrix {
    let total = layout.total();
    let first_next = layout.next_state(0);
    Matrix::from_fn(total, total, |i, j| {
        let into_present = j < first_next;
        let from_reward = i == layout.reward();
        let next_to_next = i >= first_next && j >= first_next && j != layout.reward();
        if i == j || into_present || from_reward || next_to_next {
            0.0
        } else {
            1.0
        }
    })
}

/// Slices a thresholded stacked adjacency into the four mask blocks.
pub fn masks_from_adjacency(w: &Matrix, layout: StackedLayout, threshold: f64) -> CausalMasks {
    let gate = |x: f64| if x.abs() >= threshold { 1.0 } else { 0.0 };
    let (n, d) = (layout.n, layout.d);
    CausalMasks {
        c_ss: Matrix::from_fn(n, n, |j, i| gate(w[(layout.state(j), layout.next_state(i))])),
        c_as: Matrix::from_fn(d, n, |j, i| gate(w[(layout.action(j), layout.next_state(i))])),
        u_sr: (0..n)
            .map(|j| gate(w[(layout.next_state(j), layout.reward())]))
            .collect(),
        u_ar: (0..d).map(|j| gate(w[(layout.action(j), layout.reward())])).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskDiscovery {
    pub result: DiscoveryResult,
    pub masks: CausalMasks,
    pub layout: StackedLayout,
}

impl MaskDiscovery {
    /// `W` rows, then the threshold, then the four mask blocks.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let w = &self.result.w;
        writeln!(out, "W {} {}", w.nrows(), w.ncols()).unwrap();
        for row in w.row_iter() {
            let cells: Vec<String> = row.iter().map(|x| format!("{x:?}")).collect();
            writeln!(out, "{}", cells.join(" ")).unwrap();
        }
        writeln!(out, "threshold {:?}", self.result.threshold).unwrap();
        writeln!(out, "acyclicity {:?}", self.result.acyclicity).unwrap();
        let block = |out: &mut String, name: &str, m: &Matrix| {
            writeln!(out, "{name} {} {}", m.nrows(), m.ncols()).unwrap();
            for row in m.row_iter() {
                let cells: Vec<String> = row.iter().map(|x| format!("{x:?}")).collect();
                writeln!(out, "{}", cells.join(" ")).unwrap();
            }
        };
        block(&mut out, "C_ss", &self.masks.c_ss);
        block(&mut out, "C_as", &self.masks.c_as);
        block(
            &mut out,
            "U_sr",
            &Matrix::from_row_slice(1, self.masks.u_sr.len(), &self.masks.u_sr),
        );
        block(
            &mut out,
            "U_ar",
            &Matrix::from_row_slice(1, self.masks.u_ar.len(), &self.masks.u_ar),
        );
        out
    }
}

/// Runs constrained NOTEARS on transitions and thresholds into masks.
pub fn discover_masks_detailed(
    transitions: &[Transition],
    cfg: &NotearsConfig,
    warm_start: Option<&Matrix>,
) -> Result<MaskDiscovery> {
    let (x, layout) = stacked_data(transitions)?;
    let allowed = temporal_allowed_edges(layout);
    let result = notears_fit_constrained(&x, cfg, &allowed, warm_start)?;
    let masks = masks_from_adjacency(&result.w, layout, cfg.threshold);
    Ok(MaskDiscovery { result, masks, layout })
}

pub fn discover_masks(transitions: &[Transition], cfg: &NotearsConfig) -> Result<CausalMasks> {
    discover_masks_detailed(transitions, cfg, None).map(|m| m.masks)
}

/// Flips each entry `x -> 1 - x` independently with probability `flip_prob`.
/// Entries are visited block by block in column-major order.
pub fn corrupt_masks(masks: &CausalMasks, flip_prob: f64, rng: &mut Rng) -> Result<CausalMasks> {
    if !(0.0..=1.0).contains(&flip_prob) {
        return Err(Error::InvalidArgument(format!(
            "flip probability {flip_prob} outside [0, 1]"
        )));
    }
    Ok(masks.map(|x| if rng.random_bool(flip_prob) { 1.0 - x } else { x }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{seeded_rng, standard_normal};
    use approx::assert_relative_eq;

    fn sem(n: usize, weights: &Matrix, seed: u64) -> Matrix {
        // Nodes are assumed topologically ordered by index.
        let d = weights.nrows();
        let mut rng = seeded_rng(seed);
        let mut x = Matrix::zeros(n, d);
        for r in 0..n {
            for j in 0..d {
                let mut v = standard_normal(&mut rng);
                for i in 0..j {
                    v += weights[(i, j)] * x[(r, i)];
                }
                x[(r, j)] = v;
            }
        }
        x
    }

    fn series_expm(m: &Matrix) -> Matrix {
        let d = m.nrows();
        let mut term = Matrix::identity(d, d);
        let mut sum = term.clone();
        for k in 1..30 {
            term = &term * m / k as f64;
            sum += &term;
        }
        sum
    }

    #[test]
    fn acyclicity_examples() {
        assert_eq!(acyclicity(&Matrix::zeros(3, 3)).unwrap().0, 0.0);
        let cycle = Matrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let oracle = series_expm(&cycle).trace() - 2.0;
        assert_relative_eq!(acyclicity(&cycle).unwrap().0, oracle, max_relative = 1e-12);
        assert_relative_eq!(oracle, 2.0 * 1f64.cosh() - 2.0, max_relative = 1e-12);
        let edge = Matrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert!(acyclicity(&edge).unwrap().0.abs() < 1e-15);
        assert!(matches!(acyclicity(&Matrix::zeros(2, 3)), Err(Error::NotSquare { .. })));
    }

    #[test]
    fn acyclicity_gradient_matches_finite_differences() {
        let mut rng = seeded_rng(3);
        for _ in 0..20 {
            let w = Matrix::from_fn(4, 4, |_, _| 0.6 * standard_normal(&mut rng));
            let (_, g) = acyclicity(&w).unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    let h = 1e-6;
                    let mut wp = w.clone();
                    wp[(i, j)] += h;
                    let mut wm = w.clone();
                    wm[(i, j)] -= h;
                    let fd = (acyclicity(&wp).unwrap().0 - acyclicity(&wm).unwrap().0) / (2.0 * h);
                    assert!(
                        (fd - g[(i, j)]).abs() <= 1e-5 * fd.abs().max(1e-3),
                        "{fd} vs {}",
                        g[(i, j)]
                    );
                }
            }
        }
    }

    #[test]
    fn chain_recovery() {
        let mut w = Matrix::zeros(3, 3);
        w[(0, 1)] = 1.5;
        w[(1, 2)] = -1.2;
        let x = sem(1000, &w, 7);
        let res = notears_fit(&x, &NotearsConfig::default()).unwrap();
        assert!(res.acyclicity <= 1e-8);
        assert_eq!(res.edges(), vec![(0, 1), (1, 2)]);
        assert!((res.w[(0, 1)] - 1.5).abs() <= 0.15);
        assert!((res.w[(1, 2)] + 1.2).abs() <= 0.15);
        assert_eq!(exhaustive_dag_oracle(&x).unwrap().edges(), res.edges());
    }

    #[test]
    fn independent_noise_has_no_edges() {
        let x = sem(1000, &Matrix::zeros(3, 3), 2);
        let res = notears_fit(&x, &NotearsConfig::default()).unwrap();
        assert!(res.w.iter().all(|v| v.abs() < 0.3));
        assert!(exhaustive_dag_oracle(&x.columns(0, 2).clone_owned())
            .unwrap()
            .edges()
            .is_empty());
    }

    #[test]
    fn two_node_regression() {
        let mut w = Matrix::zeros(2, 2);
        w[(0, 1)] = 2.0;
        let x = sem(1000, &w, 11);
        let res = notears_fit(&x, &NotearsConfig::default()).unwrap();
        assert!((1.85..=2.15).contains(&res.w[(0, 1)]), "{}", res.w);
        assert!(res.w[(1, 0)].abs() < 0.3);
        assert_eq!(exhaustive_dag_oracle(&x).unwrap().edges(), vec![(0, 1)]);
    }

    #[test]
    fn collider_oracle() {
        let mut w = Matrix::zeros(3, 3);
        w[(0, 2)] = 1.0;
        w[(1, 2)] = 1.0;
        let x = sem(1000, &w, 5);
        assert_eq!(exhaustive_dag_oracle(&x).unwrap().edges(), vec![(0, 2), (1, 2)]);
    }

    #[test]
    fn oracle_rejects_large_graphs() {
        assert!(exhaustive_dag_oracle(&Matrix::zeros(50, 5)).is_err());
    }

    #[test]
    fn too_few_samples() {
        assert!(matches!(
            notears_fit(&Matrix::zeros(10, 2), &NotearsConfig::default()),
            Err(Error::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn corruption_extremes() {
        let mut m = CausalMasks::zeros(3, 2);
        m.c_ss[(0, 1)] = 1.0;
        m.u_ar[1] = 1.0;
        let mut rng = seeded_rng(1);
        assert_eq!(corrupt_masks(&m, 0.0, &mut rng).unwrap(), m);
        assert_eq!(corrupt_masks(&m, 1.0, &mut rng).unwrap(), m.map(|x| 1.0 - x));
        assert!(corrupt_masks(&m, 1.5, &mut rng).is_err());
    }

    #[test]
    fn corruption_flip_count() {
        // 100 entries: 4x4 + 16x4 + 4 + 16.
        let m = CausalMasks::zeros(4, 16);
        assert_eq!(m.len(), 100);
        for seed in 0..20 {
            let c = corrupt_masks(&m, 0.25, &mut seeded_rng(seed)).unwrap();
            let flips: usize = m.differences(&c).iter().sum();
            assert!((12..=38).contains(&flips), "{flips}");
        }
    }

    #[test]
    fn text_dump_layout() {
        let res = DiscoveryResult {
            w: Matrix::zeros(4, 4),
            threshold: 0.3,
            acyclicity: 0.0,
            objective: 0.0,
            outer_iterations: 1,
        };
        let layout = StackedLayout { n: 1, d: 1 };
        let md = MaskDiscovery {
            masks: masks_from_adjacency(&res.w, layout, 0.3),
            result: res,
            layout,
        };
        let text = md.to_text();
        assert!(text.starts_with("W 4 4\n"));
        assert!(text.contains("threshold 0.3\n"));
        assert!(text.contains("U_ar 1 1\n0.0\n"));
    }
}
