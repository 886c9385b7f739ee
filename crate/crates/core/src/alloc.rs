//! Per-step allocation program: weighted proportional fairness minus linear
//! assignment costs, subject to server-class capacities.
//!
//! With `W_i = w_i Q_i / V` and costs `c_ij = γ − r̂_ij`, the program is
//!
//! ```text
//! maximize   Σ_i W_i log(Σ_j y_ij) − Σ_ij c_ij y_ij
//! subject to Σ_i y_ij ≤ n_j,  y ≥ 0.
//! ```

use crate::error::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITERS: usize = 100_000;

/// Entries below this are treated as outside the support when recovering
/// column prices.
const SUPPORT_EPS: f64 = 1e-10;
const NONMONOTONE_WINDOW: usize = 10;
const ARMIJO: f64 = 1e-4;
const STEP_MIN: f64 = 1e-14;
const STEP_MAX: f64 = 1e14;
const POLISH_PATIENCE: usize = 2_000;

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationProblem {
    /// `w_i` per active class.
    weights: Vec<f64>,
    /// `Q_i` per active class.
    queues: Vec<f64>,
    /// `r̂_ij`, one row per active class.
    rewards: Vec<Vec<f64>>,
    capacities: Vec<f64>,
    gamma: f64,
    v: f64,
    bound: f64,
}

impl AllocationProblem {
    pub fn new(
        weights: Vec<f64>,
        queues: Vec<f64>,
        rewards: Vec<Vec<f64>>,
        capacities: Vec<f64>,
        gamma: f64,
        v: f64,
        bound: f64,
    ) -> Result<Self> {
        let rows = weights.len();
        if queues.len() != rows || rewards.len() != rows {
            return Err(Error::DimensionMismatch {
                expected: rows,
                actual: if queues.len() != rows { queues.len() } else { rewards.len() },
            });
        }
        if let Some(r) = rewards.iter().find(|r| r.len() != capacities.len()) {
            return Err(Error::DimensionMismatch {
                expected: capacities.len(),
                actual: r.len(),
            });
        }
        if !(bound > 0.0) || !(gamma > bound) {
            return Err(Error::InvalidConfig(format!("need gamma = {gamma} > a = {bound} > 0")));
        }
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::InvalidConfig(format!("V = {v} must be > 0")));
        }
        if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidConfig("weights must be positive".into()));
        }
        if queues.iter().any(|q| !(*q >= 1.0) || !q.is_finite()) {
            return Err(Error::InvalidConfig("active classes need Q_i >= 1".into()));
        }
        if capacities.iter().any(|n| !(*n >= 0.0) || !n.is_finite()) {
            return Err(Error::InvalidConfig("capacities must be >= 0".into()));
        }
        for r in rewards.iter().flatten() {
            if !r.is_finite() || r.abs() > bound * (1.0 + 1e-12) {
                return Err(Error::OutOfRange {
                    what: "reward estimate",
                    value: *r,
                    low: -bound,
                    high: bound,
                });
            }
        }
        if !rewards.is_empty() && capacities.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidConfig("no server capacity".into()));
        }
        Ok(Self {
            weights,
            queues,
            rewards,
            capacities,
            gamma,
            v,
            bound,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.weights.len()
    }

    pub fn num_servers(&self) -> usize {
        self.capacities.len()
    }

    pub fn capacities(&self) -> &[f64] {
        &self.capacities
    }

    pub fn rewards(&self) -> &[Vec<f64>] {
        &self.rewards
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn queues(&self) -> &[f64] {
        &self.queues
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn v(&self) -> f64 {
        self.v
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    /// `w_i Q_i / V`.
    pub fn utility_weight(&self, i: usize) -> f64 {
        self.weights[i] * self.queues[i] / self.v
    }

    /// Marginal cost `γ − r̂_ij`.
    pub fn cost(&self, i: usize, j: usize) -> f64 {
        self.gamma - self.rewards[i][j]
    }

    /// Objective value; `-inf` when some row sum is not positive.
    pub fn objective(&self, y: &[Vec<f64>]) -> f64 {
        let mut f = 0.0;
        for (i, row) in y.iter().enumerate() {
            let total: f64 = row.iter().sum();
            if total <= 0.0 {
                return f64::NEG_INFINITY;
            }
            f += self.utility_weight(i) * total.ln();
            f -= row.iter().enumerate().map(|(j, y)| self.cost(i, j) * y).sum::<f64>();
        }
        f
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub y: Vec<Vec<f64>>,
    /// Column prices `q_j`.
    pub q: Vec<f64>,
    /// Nonnegativity multipliers `h_ij`.
    pub h: Vec<Vec<f64>>,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl Allocation {
    pub fn empty(num_servers: usize) -> Self {
        Self {
            y: Vec::new(),
            q: vec![0.0; num_servers],
            h: Vec::new(),
            kkt_residual: 0.0,
            iterations: 0,
            converged: true,
        }
    }

    /// `Y_i = Σ_j y_ij`.
    pub fn row_sums(&self) -> Vec<f64> {
        self.y.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let cols = self.q.len();
        (0..cols).map(|j| self.y.iter().map(|r| r[j]).sum()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iters: DEFAULT_MAX_ITERS,
        }
    }
}

fn check_shape(problem: &AllocationProblem, m: &[Vec<f64>]) -> Result<()> {
    if m.len() != problem.num_classes() {
        return Err(Error::DimensionMismatch {
            expected: problem.num_classes(),
            actual: m.len(),
        });
    }
    if let Some(r) = m.iter().find(|r| r.len() != problem.num_servers()) {
        return Err(Error::DimensionMismatch {
            expected: problem.num_servers(),
            actual: r.len(),
        });
    }
    Ok(())
}

/// Max-norm aggregate of stationarity gaps, primal violation, complementary
/// slackness products and dual sign violations.
pub fn kkt_residual(problem: &AllocationProblem, y: &[Vec<f64>], q: &[f64], h: &[Vec<f64>]) -> Result<f64> {
    check_shape(problem, y)?;
    check_shape(problem, h)?;
    if q.len() != problem.num_servers() {
        return Err(Error::DimensionMismatch {
            expected: problem.num_servers(),
            actual: q.len(),
        });
    }
    let mut res = 0.0_f64;
    for (i, row) in y.iter().enumerate() {
        let total: f64 = row.iter().sum();
        if !(total > 0.0) {
            return Ok(f64::INFINITY);
        }
        let marginal = problem.utility_weight(i) / total;
        for (j, &yij) in row.iter().enumerate() {
            let gap = marginal - q[j] - problem.cost(i, j) + h[i][j];
            res = res.max(gap.abs()).max(-yij).max(-h[i][j]).max((h[i][j] * yij).abs());
        }
    }
    for (j, &qj) in q.iter().enumerate() {
        let load: f64 = y.iter().map(|r| r[j]).sum();
        let slack = problem.capacities[j] - load;
        res = res.max(-slack).max(-qj).max((qj * slack).abs());
    }
    Ok(res)
}

/// Column prices and nonnegativity multipliers implied by a primal point.
pub fn recover_duals(problem: &AllocationProblem, y: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let cols = problem.num_servers();
    let marginals: Vec<f64> = y
        .iter()
        .enumerate()
        .map(|(i, r)| problem.utility_weight(i) / r.iter().sum::<f64>())
        .collect();
    let mut q = vec![0.0_f64; cols];
    for (j, qj) in q.iter_mut().enumerate() {
        let eps = SUPPORT_EPS * problem.capacities[j].max(1.0);
        for (i, row) in y.iter().enumerate() {
            if row[j] > eps {
                *qj = qj.max(marginals[i] - problem.cost(i, j));
            }
        }
    }
    let h = y
        .iter()
        .enumerate()
        .map(|(i, _)| {
            (0..cols)
                .map(|j| (q[j] + problem.cost(i, j) - marginals[i]).max(0.0))
                .collect()
        })
        .collect();
    (q, h)
}

/// Euclidean projection of `x` onto `{z ≥ 0, Σ z ≤ cap}`.
pub fn project_capped_simplex(x: &mut [f64], cap: f64) {
    let positive: f64 = x.iter().map(|v| v.max(0.0)).sum();
    if positive <= cap {
        x.iter_mut().for_each(|v| *v = v.max(0.0));
        return;
    }
    let mut sorted: Vec<f64> = x.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut shift = 0.0;
    for (k, &s) in sorted.iter().enumerate() {
        cumulative += s;
        let candidate = (cumulative - cap) / (k + 1) as f64;
        if s - candidate > 0.0 {
            shift = candidate;
        } else {
            break;
        }
    }
    x.iter_mut().for_each(|v| *v = (*v - shift).max(0.0));
}

struct Flat<'a> {
    p: &'a AllocationProblem,
    rows: usize,
    cols: usize,
    utility: Vec<f64>,
    cost: Vec<f64>,
}

impl<'a> Flat<'a> {
    fn new(p: &'a AllocationProblem) -> Self {
        let rows = p.num_classes();
        let cols = p.num_servers();
        let utility = (0..rows).map(|i| p.utility_weight(i)).collect();
        let cost = (0..rows * cols).map(|k| p.cost(k / cols, k % cols)).collect();
        Self {
            p,
            rows,
            cols,
            utility,
            cost,
        }
    }

    /// `f(y + d) − f(y)` without forming either value; `-inf` if a row of
    /// `y + d` is not positive.
    fn increment(&self, y: &[f64], d: &[f64]) -> f64 {
        let mut delta = 0.0;
        for i in 0..self.rows {
            let span = i * self.cols..(i + 1) * self.cols;
            let total: f64 = y[span.clone()].iter().sum();
            let change: f64 = d[span.clone()].iter().sum();
            if !(total + change > 0.0) {
                return f64::NEG_INFINITY;
            }
            delta += self.utility[i] * (change / total).ln_1p();
            for k in span {
                delta -= self.cost[k] * d[k];
            }
        }
        delta
    }

    fn gradient(&self, y: &[f64], g: &mut [f64]) {
        for i in 0..self.rows {
            let total: f64 = y[i * self.cols..(i + 1) * self.cols].iter().sum();
            let m = self.utility[i] / total;
            for j in 0..self.cols {
                g[i * self.cols + j] = m - self.cost[i * self.cols + j];
            }
        }
    }

    /// Largest Hessian eigenvalue magnitude, `max_i J W_i / Y_i²`.
    fn curvature_bound(&self, y: &[f64]) -> f64 {
        (0..self.rows)
            .map(|i| {
                let total: f64 = y[i * self.cols..(i + 1) * self.cols].iter().sum();
                self.cols as f64 * self.utility[i] / (total * total)
            })
            .fold(f64::MIN_POSITIVE, f64::max)
    }

    fn project(&self, y: &mut [f64]) {
        let mut column = vec![0.0; self.rows];
        for j in 0..self.cols {
            for i in 0..self.rows {
                column[i] = y[i * self.cols + j];
            }
            project_capped_simplex(&mut column, self.p.capacities[j]);
            for i in 0..self.rows {
                y[i * self.cols + j] = column[i];
            }
        }
    }

    fn to_rows(&self, y: &[f64]) -> Vec<Vec<f64>> {
        y.chunks_exact(self.cols).map(|r| r.to_vec()).collect()
    }

    fn residual(&self, y: &[f64]) -> f64 {
        let rows = self.to_rows(y);
        if rows.iter().any(|r| !(r.iter().sum::<f64>() > 0.0)) {
            return f64::INFINITY;
        }
        let (q, h) = recover_duals(self.p, &rows);
        kkt_residual(self.p, &rows, &q, &h).unwrap_or(f64::INFINITY)
    }

    fn initial(&self) -> Vec<f64> {
        let rows = self.rows as f64;
        let cols = self.cols as f64;
        let spread = self.p.gamma + self.p.bound;
        (0..self.rows * self.cols)
            .map(|k| {
                let (i, j) = (k / self.cols, k % self.cols);
                (self.p.capacities[j] / rows).min(self.utility[i] / (spread * cols))
            })
            .collect()
    }

    fn rows_positive(&self, y: &[f64]) -> bool {
        y.chunks_exact(self.cols).all(|r| r.iter().sum::<f64>() > 0.0)
    }
}

/// Solve to `tol`, returning an error when the budget runs out.
pub fn solve(problem: &AllocationProblem, tol: f64) -> Result<Allocation> {
    let opts = SolverOptions {
        tol,
        ..SolverOptions::default()
    };
    let alloc = solve_best(problem, &opts, None)?;
    if alloc.converged {
        Ok(alloc)
    } else {
        Err(Error::NotConverged {
            iterations: alloc.iterations,
            residual: alloc.kkt_residual,
        })
    }
}

/// Spectral projected gradient ascent with a nonmonotone Armijo search.
/// Always returns the best iterate found; `converged` reports whether the
/// KKT residual reached `opts.tol`.
pub fn solve_best(
    problem: &AllocationProblem,
    opts: &SolverOptions,
    warm_start: Option<&[Vec<f64>]>,
) -> Result<Allocation> {
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidConfig("tolerance must be positive".into()));
    }
    if problem.num_classes() == 0 {
        return Ok(Allocation::empty(problem.num_servers()));
    }
    let flat = Flat::new(problem);
    let n = flat.rows * flat.cols;

    let mut x = flat.initial();
    if let Some(warm) = warm_start {
        check_shape(problem, warm)?;
        let mut candidate: Vec<f64> = warm.iter().flatten().copied().collect();
        if candidate.iter().all(|v| v.is_finite()) {
            flat.project(&mut candidate);
            if !flat.rows_positive(&candidate) {
                for (c, x0) in candidate.iter_mut().zip(&x) {
                    *c = 0.9 * *c + 0.1 * x0;
                }
            }
            x = candidate;
        }
    }

    let mut g = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut step_vec = vec![0.0; n];
    flat.gradient(&x, &mut g);
    // objective values relative to the starting point, accumulated from
    // exact increments
    let mut f = 0.0;
    let mut history = vec![f; 1];

    let mut best_x = x.clone();
    let mut best_res = flat.residual(&x);
    let mut iterations = 0;

    let mut step = {
        for k in 0..n {
            trial[k] = x[k] + g[k];
        }
        flat.project(&mut trial);
        let d_inf = trial.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if d_inf > 0.0 { (1.0 / d_inf).clamp(STEP_MIN, STEP_MAX) } else { 1.0 }
    };

    while best_res > opts.tol && iterations < opts.max_iters {
        iterations += 1;
        for k in 0..n {
            trial[k] = x[k] + step * g[k];
        }
        flat.project(&mut trial);
        let d: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
        let slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        if !(slope > 0.0) {
            break;
        }
        let allowance = history.iter().copied().fold(f64::NEG_INFINITY, f64::max) - f;
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            for k in 0..n {
                step_vec[k] = lambda * d[k];
            }
            let gain = flat.increment(&x, &step_vec);
            if gain >= allowance + ARMIJO * lambda * slope {
                f += gain;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            break;
        }
        for k in 0..n {
            trial[k] = x[k] + step_vec[k];
        }
        flat.gradient(&trial, &mut g_new);
        let mut ss = 0.0;
        let mut sy = 0.0;
        for k in 0..n {
            let s = step_vec[k];
            ss += s * s;
            sy -= s * (g_new[k] - g[k]);
        }
        step = if sy > 0.0 { (ss / sy).clamp(STEP_MIN, STEP_MAX) } else { STEP_MAX };
        std::mem::swap(&mut x, &mut trial);
        std::mem::swap(&mut g, &mut g_new);
        history.push(f);
        if history.len() > NONMONOTONE_WINDOW {
            history.remove(0);
        }
        let res = flat.residual(&x);
        if res < best_res {
            best_res = res;
            best_x.copy_from_slice(&x);
        }
    }

    if best_res > opts.tol && iterations < opts.max_iters {
        // The ascent slope is quadratic in the residual, so the line search
        // loses resolution near the optimum. Finish with fixed steps 1/L.
        x.copy_from_slice(&best_x);
        let mut stalled = 0;
        while best_res > opts.tol && iterations < opts.max_iters && stalled < POLISH_PATIENCE {
            iterations += 1;
            let lipschitz = flat.curvature_bound(&x);
            flat.gradient(&x, &mut g);
            for k in 0..n {
                x[k] += g[k] / lipschitz;
            }
            flat.project(&mut x);
            let res = flat.residual(&x);
            if res < best_res {
                best_res = res;
                best_x.copy_from_slice(&x);
                stalled = 0;
            } else {
                stalled += 1;
            }
        }
    }

    let y = flat.to_rows(&best_x);
    let (q, h) = recover_duals(problem, &y);
    Ok(Allocation {
        y,
        q,
        h,
        kkt_residual: best_res,
        iterations,
        converged: best_res <= opts.tol,
    })
}

/// Exact solution with a single server class via the column price `q`
/// solving `Σ_i W_i / (q + c_i) = n`.
pub fn closed_form_single_server(problem: &AllocationProblem) -> Result<Allocation> {
    if problem.num_servers() != 1 {
        return Err(Error::InvalidInput(format!(
            "closed form needs one server class, got {}",
            problem.num_servers()
        )));
    }
    let rows = problem.num_classes();
    if rows == 0 {
        return Ok(Allocation::empty(1));
    }
    let cap = problem.capacities[0];
    let util: Vec<f64> = (0..rows).map(|i| problem.utility_weight(i)).collect();
    let cost: Vec<f64> = (0..rows).map(|i| problem.cost(i, 0)).collect();
    let demand = |q: f64| -> f64 { util.iter().zip(&cost).map(|(w, c)| w / (q + c)).sum() };
    let q = if demand(0.0) <= cap {
        0.0
    } else {
        // demand is decreasing and convex in q; bracket [0, ΣW/n]
        let mut lo = 0.0;
        let mut hi = util.iter().sum::<f64>() / cap;
        let mut q = 0.5 * (lo + hi);
        for _ in 0..200 {
            let excess = demand(q) - cap;
            if excess.abs() <= 1e-15 * cap || hi - lo <= 1e-15 * hi.max(1.0) {
                break;
            }
            if excess > 0.0 {
                lo = q;
            } else {
                hi = q;
            }
            let slope: f64 = -util.iter().zip(&cost).map(|(w, c)| w / (q + c).powi(2)).sum::<f64>();
            let newton = q - excess / slope;
            q = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        }
        q
    };
    let y: Vec<Vec<f64>> = util.iter().zip(&cost).map(|(w, c)| vec![w / (q + c)]).collect();
    let h = vec![vec![0.0]; rows];
    let kkt = kkt_residual(problem, &y, &[q], &h)?;
    Ok(Allocation {
        y,
        q: vec![q],
        h,
        kkt_residual: kkt,
        iterations: 0,
        converged: true,
    })
}
