//! Soft-penalty allocation program and its delayed, distributed gradient dynamics.
//!
//! Hard server capacities are replaced by convex penalties `C_j(z) = ∫₀ᶻ p_j`.
//! Job nodes or server nodes iterate a projected gradient step using delayed
//! aggregates; a local stability condition bounds the step-size/delay product.

use std::collections::VecDeque;
use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::alloc::AllocationProblem;
use crate::error::{Error, Result};

/// Slack above which an optimality condition counts as strict.
pub const INTERIOR_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PenaltyKind {
    /// `p(z) = (z/n)^β`.
    Power { beta: f64 },
    /// `p(z) = γ_j s / (1 + s)` with `s = (z/n)^β`; bounded by `γ_j`.
    Bounded { beta: f64, ceiling: f64 },
    /// `p(z) = (z/n) / (1 − z/n)`, infinite at and beyond `n`.
    Rational,
}

impl FromStr for PenaltyKind {
    type Err = Error;

    /// `power:β`, `bounded:β:γ` or `rational`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |k: usize| -> Result<f64> {
            parts
                .get(k)
                .ok_or_else(|| Error::InvalidInput(format!("penalty '{s}' is missing a parameter")))?
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidInput(format!("bad number in penalty '{s}'")))
        };
        let kind = match (parts[0].trim(), parts.len()) {
            ("power", 2) => PenaltyKind::Power { beta: num(1)? },
            ("bounded", 3) => PenaltyKind::Bounded {
                beta: num(1)?,
                ceiling: num(2)?,
            },
            ("rational", 1) => PenaltyKind::Rational,
            _ => return Err(Error::InvalidInput(format!("unknown penalty '{s}'"))),
        };
        Ok(kind)
    }
}

impl fmt::Display for PenaltyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PenaltyKind::Power { beta } => write!(f, "power:{beta}"),
            PenaltyKind::Bounded { beta, ceiling } => write!(f, "bounded:{beta}:{ceiling}"),
            PenaltyKind::Rational => write!(f, "rational"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltySpec {
    pub kind: PenaltyKind,
    /// Nominal capacity `n_j`.
    pub capacity: f64,
}

/// Composite Simpson rule with `n` (even) panels.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for k in 1..n {
        let x = a + k as f64 * h;
        acc += if k % 2 == 1 { 4.0 * f(x) } else { 2.0 * f(x) };
    }
    acc * h / 3.0
}

impl PenaltySpec {
    pub fn new(kind: PenaltyKind, capacity: f64) -> Result<Self> {
        if !(capacity > 0.0 && capacity.is_finite()) {
            return Err(Error::InvalidConfig(format!("penalty capacity {capacity} must be positive")));
        }
        match kind {
            PenaltyKind::Power { beta } if !(beta > 0.0) => {
                Err(Error::InvalidConfig(format!("power exponent {beta} must be positive")))
            }
            PenaltyKind::Bounded { beta, ceiling } if !(beta > 0.0 && ceiling > 0.0) => Err(Error::InvalidConfig(
                format!("bounded penalty needs positive exponent and ceiling, got {beta}, {ceiling}"),
            )),
            _ => Ok(Self { kind, capacity }),
        }
    }

    pub fn value(&self, z: f64) -> f64 {
        let x = z.max(0.0) / self.capacity;
        match self.kind {
            PenaltyKind::Power { beta } => x.powf(beta),
            PenaltyKind::Bounded { beta, ceiling } => {
                let s = x.powf(beta);
                ceiling * s / (1.0 + s)
            }
            PenaltyKind::Rational => {
                if x >= 1.0 {
                    f64::INFINITY
                } else {
                    x / (1.0 - x)
                }
            }
        }
    }

    pub fn derivative(&self, z: f64) -> f64 {
        let n = self.capacity;
        let x = z.max(0.0) / n;
        match self.kind {
            PenaltyKind::Power { beta } => beta * x.powf(beta - 1.0) / n,
            PenaltyKind::Bounded { beta, ceiling } => {
                let s = x.powf(beta);
                ceiling * beta * x.powf(beta - 1.0) / (n * (1.0 + s).powi(2))
            }
            PenaltyKind::Rational => {
                if x >= 1.0 {
                    f64::INFINITY
                } else {
                    1.0 / (n * (1.0 - x).powi(2))
                }
            }
        }
    }

    /// `p′(z)·z`, written to stay finite at `z = 0`.
    pub fn elasticity(&self, z: f64) -> f64 {
        let x = z.max(0.0) / self.capacity;
        match self.kind {
            PenaltyKind::Power { beta } => beta * x.powf(beta),
            PenaltyKind::Bounded { beta, ceiling } => {
                let s = x.powf(beta);
                ceiling * beta * s / (1.0 + s).powi(2)
            }
            PenaltyKind::Rational => {
                let p = self.value(z);
                p * (1.0 + p)
            }
        }
    }

    /// `C(z) = ∫₀ᶻ p`.
    pub fn integral(&self, z: f64) -> f64 {
        let n = self.capacity;
        let z = z.max(0.0);
        let x = z / n;
        match self.kind {
            PenaltyKind::Power { beta } => n * x.powf(beta + 1.0) / (beta + 1.0),
            PenaltyKind::Rational => {
                if x >= 1.0 {
                    f64::INFINITY
                } else {
                    n * (-x - (-x).ln_1p())
                }
            }
            PenaltyKind::Bounded { .. } => simpson(|u| self.value(u), 0.0, z, 2000),
        }
    }

    /// `C(b) − C(a)`, accurate when `a` and `b` are close.
    pub fn integral_between(&self, a: f64, b: f64) -> f64 {
        if a == b {
            return 0.0;
        }
        if matches!(self.kind, PenaltyKind::Rational) && a.max(b) >= self.capacity {
            return f64::INFINITY * (b - a).signum();
        }
        simpson(|u| self.value(u), a, b, 16)
    }
}

/// Inputs of the soft-penalty program: utility weights `W_i = w_i Q_i / V`,
/// marginal prices `c_ij = γ − r̂_ij ≥ 0` and one penalty per server class.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributedProblem {
    weights: Vec<f64>,
    prices: Vec<Vec<f64>>,
    penalties: Vec<PenaltySpec>,
}

impl DistributedProblem {
    pub fn new(weights: Vec<f64>, prices: Vec<Vec<f64>>, penalties: Vec<PenaltySpec>) -> Result<Self> {
        if weights.is_empty() || penalties.is_empty() {
            return Err(Error::InvalidInput("empty problem".into()));
        }
        if prices.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                expected: weights.len(),
                actual: prices.len(),
            });
        }
        for row in &prices {
            if row.len() != penalties.len() {
                return Err(Error::DimensionMismatch {
                    expected: penalties.len(),
                    actual: row.len(),
                });
            }
            if row.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
                return Err(Error::InvalidInput("marginal prices must be finite and nonnegative".into()));
            }
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidInput("utility weights must be positive".into()));
        }
        Ok(Self {
            weights,
            prices,
            penalties,
        })
    }

    /// Same utilities and prices as a hard-capacity allocation problem.
    pub fn from_allocation(problem: &AllocationProblem, penalties: Vec<PenaltySpec>) -> Result<Self> {
        let ni = problem.num_classes();
        let nj = problem.num_servers();
        Self::new(
            (0..ni).map(|i| problem.utility_weight(i)).collect(),
            (0..ni).map(|i| (0..nj).map(|j| problem.cost(i, j)).collect()).collect(),
            penalties,
        )
    }

    pub fn num_classes(&self) -> usize {
        self.weights.len()
    }

    pub fn num_servers(&self) -> usize {
        self.penalties.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn prices(&self) -> &[Vec<f64>] {
        &self.prices
    }

    pub fn penalties(&self) -> &[PenaltySpec] {
        &self.penalties
    }

    /// `Σ W_i log Y_i − Σ_j C_j(S_j) − Σ c_ij y_ij`.
    pub fn objective(&self, y: &[Vec<f64>]) -> f64 {
        let (rows, cols) = sums(y, self.num_servers());
        let util: f64 = self.weights.iter().zip(&rows).map(|(w, r)| w * r.ln()).sum();
        let pen: f64 = self.penalties.iter().zip(&cols).map(|(p, s)| p.integral(*s)).sum();
        let lin: f64 = self
            .prices
            .iter()
            .zip(y)
            .map(|(c, yr)| c.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        util - pen - lin
    }

    /// `∂f/∂y_ij = W_i/Y_i − p_j(S_j) − c_ij`.
    pub fn gradient(&self, y: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let (rows, cols) = sums(y, self.num_servers());
        let prices: Vec<f64> = self.penalties.iter().zip(&cols).map(|(p, s)| p.value(*s)).collect();
        self.prices
            .iter()
            .enumerate()
            .map(|(i, c)| {
                c.iter()
                    .enumerate()
                    .map(|(j, cij)| self.weights[i] / rows[i] - prices[j] - cij)
                    .collect()
            })
            .collect()
    }

    /// `f(b) − f(a)` without cancellation for nearby points.
    fn objective_change(&self, a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        let nj = self.num_servers();
        let (ra, ca) = sums(a, nj);
        let (rb, cb) = sums(b, nj);
        let mut delta = 0.0;
        for i in 0..self.num_classes() {
            delta += self.weights[i] * ((rb[i] - ra[i]) / ra[i]).ln_1p();
            for j in 0..nj {
                delta -= self.prices[i][j] * (b[i][j] - a[i][j]);
            }
        }
        for j in 0..nj {
            delta -= self.penalties[j].integral_between(ca[j], cb[j]);
        }
        delta
    }

    /// Largest violation of the optimality conditions: `y ≥ 0`,
    /// `∂f/∂y ≤ 0` and complementary slackness.
    pub fn optimality_residual(&self, y: &[Vec<f64>]) -> f64 {
        let g = self.gradient(y);
        let mut res: f64 = 0.0;
        for (yr, gr) in y.iter().zip(&g) {
            for (&v, &d) in yr.iter().zip(gr) {
                res = res.max(-v).max(d).max((v * d).abs());
            }
        }
        if res.is_nan() { f64::INFINITY } else { res }
    }
}

fn sums(y: &[Vec<f64>], nj: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = y.iter().map(|r| r.iter().sum()).collect();
    let mut cols = vec![0.0; nj];
    for r in y {
        for (c, v) in cols.iter_mut().zip(r) {
            *c += v;
        }
    }
    (rows, cols)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumPoint {
    pub y: Vec<Vec<f64>>,
    pub row_sums: Vec<f64>,
    pub column_sums: Vec<f64>,
    pub residual: f64,
    /// Every pair has `y_ij > ε` or slack `> ε` in the gradient condition.
    pub interior: bool,
    pub iterations: usize,
}

/// Maximize the soft-penalty program by spectral projected gradient on `y ≥ 0`.
pub fn equilibrium_solve(problem: &DistributedProblem, tol: f64, max_iters: usize) -> Result<EquilibriumPoint> {
    const WINDOW: usize = 10;
    const SIGMA: f64 = 1e-4;
    let (ni, nj) = (problem.num_classes(), problem.num_servers());
    // start well inside every rational asymptote
    let mut y: Vec<Vec<f64>> = (0..ni)
        .map(|_| {
            problem
                .penalties
                .iter()
                .map(|p| 0.5 * p.capacity / ni as f64)
                .collect()
        })
        .collect();
    let mut g = problem.gradient(&y);
    let mut step = 1.0;
    // objective values relative to the start point
    let mut level = 0.0;
    let mut history: VecDeque<f64> = VecDeque::from([0.0]);
    for iter in 0..max_iters {
        let res = problem.optimality_residual(&y);
        if res <= tol {
            let g = problem.gradient(&y);
            let interior = y
                .iter()
                .flatten()
                .zip(g.iter().flatten())
                .all(|(&v, &d)| v > INTERIOR_EPS || -d > INTERIOR_EPS);
            let (row_sums, column_sums) = sums(&y, nj);
            return Ok(EquilibriumPoint {
                y,
                row_sums,
                column_sums,
                residual: res,
                interior,
                iterations: iter,
            });
        }
        let d: Vec<Vec<f64>> = y
            .iter()
            .zip(&g)
            .map(|(yr, gr)| yr.iter().zip(gr).map(|(v, dv)| (v + step * dv).max(0.0) - v).collect())
            .collect();
        let slope: f64 = d.iter().flatten().zip(g.iter().flatten()).map(|(a, b)| a * b).sum();
        let floor = history.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut theta = 1.0;
        let mut accepted = None;
        for _ in 0..80 {
            let trial: Vec<Vec<f64>> = y
                .iter()
                .zip(&d)
                .map(|(yr, dr)| yr.iter().zip(dr).map(|(v, dv)| (v + theta * dv).max(0.0)).collect())
                .collect();
            let change = problem.objective_change(&y, &trial);
            if change.is_finite() && level + change >= floor + SIGMA * theta * slope {
                accepted = Some((trial, change));
                break;
            }
            theta *= 0.5;
        }
        let Some((next, change)) = accepted else {
            return Err(Error::NotConverged {
                iterations: iter,
                residual: res,
            });
        };
        let g_next = problem.gradient(&next);
        let mut ss = 0.0;
        let mut sy = 0.0;
        for i in 0..ni {
            for j in 0..nj {
                let s = next[i][j] - y[i][j];
                ss += s * s;
                sy -= s * (g_next[i][j] - g[i][j]);
            }
        }
        step = if sy > 0.0 { (ss / sy).clamp(1e-12, 1e12) } else { 1e12_f64.min(step * 10.0) };
        level += change;
        history.push_back(level);
        if history.len() > WINDOW {
            history.pop_front();
        }
        y = next;
        g = g_next;
    }
    Err(Error::NotConverged {
        iterations: max_iters,
        residual: problem.optimality_residual(&y),
    })
}

/// Job-node updates or the server-node variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeMode {
    Job,
    Server,
}

impl FromStr for NodeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "job" => Ok(NodeMode::Job),
            "server" => Ok(NodeMode::Server),
            other => Err(Error::InvalidInput(format!("unknown node mode '{other}'"))),
        }
    }
}

/// Step sizes and integer delays per pair: `forward[i][j]` is job node `i` to
/// server node `j`, `backward[i][j]` is server node `j` back to job node `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayedDynamics {
    pub alpha: Vec<Vec<f64>>,
    pub forward: Vec<Vec<usize>>,
    pub backward: Vec<Vec<usize>>,
    pub mode: NodeMode,
}

impl DelayedDynamics {
    pub fn uniform(ni: usize, nj: usize, alpha: f64, forward: usize, backward: usize, mode: NodeMode) -> Self {
        Self {
            alpha: vec![vec![alpha; nj]; ni],
            forward: vec![vec![forward; nj]; ni],
            backward: vec![vec![backward; nj]; ni],
            mode,
        }
    }

    pub fn round_trip(&self, i: usize, j: usize) -> usize {
        self.forward[i][j] + self.backward[i][j]
    }

    /// Ticks of history any update can look back.
    pub fn max_lag(&self) -> usize {
        let f = self.forward.iter().flatten().max().copied().unwrap_or(0);
        let b = self.backward.iter().flatten().max().copied().unwrap_or(0);
        f + b
    }

    fn validate(&self, ni: usize, nj: usize) -> Result<()> {
        for m in [&self.forward, &self.backward] {
            if m.len() != ni || m.iter().any(|r| r.len() != nj) {
                return Err(Error::DimensionMismatch {
                    expected: ni * nj,
                    actual: m.iter().map(Vec::len).sum(),
                });
            }
        }
        if self.alpha.len() != ni || self.alpha.iter().any(|r| r.len() != nj) {
            return Err(Error::DimensionMismatch {
                expected: ni * nj,
                actual: self.alpha.iter().map(Vec::len).sum(),
            });
        }
        if self.alpha.iter().flatten().any(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(Error::InvalidInput("step sizes must be positive".into()));
        }
        Ok(())
    }

    /// Load a `i,j,forward,backward` table; missing pairs default to zero delay.
    pub fn load_delays(path: impl AsRef<Path>, ni: usize, nj: usize) -> Result<(Vec<Vec<usize>>, Vec<Vec<usize>>)> {
        let path = path.as_ref();
        let mut forward = vec![vec![0; nj]; ni];
        let mut backward = vec![vec![0; nj]; ni];
        let mut reader = csv::Reader::from_path(path)?;
        for rec in reader.records() {
            let rec = rec?;
            let field = |k: usize| -> Result<usize> {
                rec.get(k)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| Error::InvalidInput(format!("bad delay row {:?}", rec)))
            };
            let (i, j) = (field(0)?, field(1)?);
            if i >= ni || j >= nj {
                return Err(Error::InvalidInput(format!("delay pair ({i}, {j}) out of range")));
            }
            forward[i][j] = field(2)?;
            backward[i][j] = field(3)?;
        }
        Ok((forward, backward))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub tick: usize,
    pub row_sums: Vec<f64>,
    pub column_sums: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
    pub final_y: Vec<Vec<f64>>,
}

impl Trajectory {
    /// Sup-norm distance of the row sums plus that of the column sums from equilibrium, per recorded tick.
    pub fn distances(&self, eq: &EquilibriumPoint) -> Vec<f64> {
        let sup = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        self.points
            .iter()
            .map(|p| sup(&p.row_sums, &eq.row_sums) + sup(&p.column_sums, &eq.column_sums))
            .collect()
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let (ni, nj) = self
            .points
            .first()
            .map_or((0, 0), |p| (p.row_sums.len(), p.column_sums.len()));
        let mut header = vec!["tick".to_string()];
        header.extend((0..ni).map(|i| format!("row_{i}")));
        header.extend((0..nj).map(|j| format!("col_{j}")));
        w.write_record(&header)?;
        for p in &self.points {
            let mut rec = vec![p.tick.to_string()];
            rec.extend(p.row_sums.iter().map(|v| v.to_string()));
            rec.extend(p.column_sums.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("trajectory", e))?;
        Ok(())
    }
}

/// Iterate `y_ij ← max(0, y_ij + α_ij (1 − λ_ij / u′_i(Y)))` for `ticks` steps
/// from a constant initial trajectory, with delayed aggregates per `mode`.
pub fn simulate_dynamics(
    problem: &DistributedProblem,
    dynamics: &DelayedDynamics,
    initial: &[Vec<f64>],
    ticks: usize,
) -> Result<Trajectory> {
    let (ni, nj) = (problem.num_classes(), problem.num_servers());
    dynamics.validate(ni, nj)?;
    if initial.len() != ni || initial.iter().any(|r| r.len() != nj) {
        return Err(Error::DimensionMismatch {
            expected: ni * nj,
            actual: initial.iter().map(Vec::len).sum(),
        });
    }
    if initial.iter().flatten().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidInput("initial allocation must be finite and nonnegative".into()));
    }
    let lag = dynamics.max_lag();
    // history[k] holds y(r − lag + k); the back is y(r)
    let mut history: VecDeque<Vec<Vec<f64>>> = (0..=lag).map(|_| initial.to_vec()).collect();
    let at = |h: &VecDeque<Vec<Vec<f64>>>, back: usize, i: usize, j: usize| h[lag - back][i][j];

    let record = |tick: usize, y: &[Vec<f64>]| {
        let (row_sums, column_sums) = sums(y, nj);
        TrajectoryPoint {
            tick,
            row_sums,
            column_sums,
        }
    };
    let mut points = Vec::with_capacity(ticks + 1);
    points.push(record(0, initial));
    for tick in 1..=ticks {
        let current = history.back().expect("nonempty history").clone();
        let mut next = current.clone();
        for i in 0..ni {
            for j in 0..nj {
                let fwd = &dynamics.forward;
                let bwd = &dynamics.backward;
                let (row, col) = match dynamics.mode {
                    NodeMode::Job => {
                        let lag_col = bwd[i][j];
                        let col: f64 = (0..ni).map(|k| at(&history, lag_col + fwd[k][j], k, j)).sum();
                        let row: f64 = (0..nj).map(|l| at(&history, dynamics.round_trip(i, l), i, l)).sum();
                        (row, col)
                    }
                    NodeMode::Server => {
                        let col: f64 = (0..ni).map(|k| at(&history, dynamics.round_trip(k, j), k, j)).sum();
                        let row: f64 = (0..nj).map(|l| at(&history, fwd[i][j] + bwd[i][l], i, l)).sum();
                        (row, col)
                    }
                };
                let lambda = problem.penalties[j].value(col) + problem.prices[i][j];
                // λ / u′(Y) with u′(Y) = W / Y; zero when Y = 0
                let ratio = if row > 0.0 { lambda * row / problem.weights[i] } else { 0.0 };
                let v = (current[i][j] + dynamics.alpha[i][j] * (1.0 - ratio)).max(0.0);
                if !v.is_finite() {
                    return Err(Error::Diverged(tick));
                }
                next[i][j] = v;
            }
        }
        points.push(record(tick, &next));
        history.pop_front();
        history.push_back(next);
    }
    Ok(Trajectory {
        points,
        final_y: history.pop_back().expect("nonempty history"),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    /// `α_ij τ_(ij) (1 + p′_j(S*) S* / (p_j(S*) + c_ij))`.
    pub margins: Vec<Vec<f64>>,
    pub max_margin: f64,
    /// `max m_ij < π/2`.
    pub stable: bool,
    /// Bound on `α τ` implied by the general condition at equilibrium.
    pub general_thresholds: Vec<Vec<f64>>,
    /// The same bound with the marginal price replaced by zero.
    pub general_thresholds_zero_price: Vec<Vec<f64>>,
    /// Closed-form bound on `α τ` for the penalty family of each pair.
    pub specialized_thresholds: Vec<Vec<f64>>,
}

pub fn stability_check(
    problem: &DistributedProblem,
    dynamics: &DelayedDynamics,
    eq: &EquilibriumPoint,
) -> Result<StabilityReport> {
    if !eq.interior {
        return Err(Error::NotInterior);
    }
    let (ni, nj) = (problem.num_classes(), problem.num_servers());
    dynamics.validate(ni, nj)?;
    let min_price = problem.prices.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
    let epsilon = problem
        .penalties
        .iter()
        .zip(&eq.column_sums)
        .map(|(p, s)| 1.0 - s / p.capacity)
        .fold(f64::INFINITY, f64::min);
    let mut margins = vec![vec![0.0; nj]; ni];
    let mut general = vec![vec![0.0; nj]; ni];
    let mut general_zero = vec![vec![0.0; nj]; ni];
    let mut special = vec![vec![0.0; nj]; ni];
    for j in 0..nj {
        let pen = &problem.penalties[j];
        let s = eq.column_sums[j];
        let (p, e) = (pen.value(s), pen.elasticity(s));
        for i in 0..ni {
            let c = problem.prices[i][j];
            let factor = 1.0 + e / (p + c);
            margins[i][j] = dynamics.alpha[i][j] * dynamics.round_trip(i, j) as f64 * factor;
            general[i][j] = FRAC_PI_2 / factor;
            general_zero[i][j] = FRAC_PI_2 / (1.0 + e / p);
            special[i][j] = match pen.kind {
                PenaltyKind::Power { beta } => FRAC_PI_2 / (1.0 + beta),
                PenaltyKind::Bounded { beta, ceiling } => {
                    FRAC_PI_2 * (ceiling + min_price) / (ceiling + ceiling * beta + min_price)
                }
                PenaltyKind::Rational => std::f64::consts::FRAC_PI_4 * epsilon,
            };
        }
    }
    let max_margin = margins.iter().flatten().cloned().fold(0.0, f64::max);
    Ok(StabilityReport {
        margins,
        max_margin,
        stable: max_margin < FRAC_PI_2,
        general_thresholds: general,
        general_thresholds_zero_price: general_zero,
        specialized_thresholds: special,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_4;

    fn scalar(w: f64, c: f64, kind: PenaltyKind, n: f64) -> DistributedProblem {
        DistributedProblem::new(vec![w], vec![vec![c]], vec![PenaltySpec::new(kind, n).unwrap()]).unwrap()
    }

    #[test]
    fn scalar_power_equilibrium() {
        let p = scalar(2.0, 1.0, PenaltyKind::Power { beta: 1.0 }, 1.0);
        let eq = equilibrium_solve(&p, 1e-12, 10_000).unwrap();
        assert!((eq.row_sums[0] - 1.0).abs() < 1e-9);
        assert!(eq.interior);
        // general quadratic closed form
        let p = scalar(0.7, 0.3, PenaltyKind::Power { beta: 1.0 }, 1.0);
        let eq = equilibrium_solve(&p, 1e-12, 10_000).unwrap();
        let want = (-0.3 + (0.09f64 + 4.0 * 0.7).sqrt()) / 2.0;
        assert!((eq.row_sums[0] - want).abs() < 1e-9);
    }

    #[test]
    fn expensive_pairs_shrink_toward_zero() {
        let mut last = f64::INFINITY;
        for c in [1.0, 10.0, 100.0, 1000.0] {
            let p = scalar(1.0, c, PenaltyKind::Power { beta: 1.0 }, 1.0);
            let y = equilibrium_solve(&p, 1e-12, 10_000).unwrap().row_sums[0];
            assert!(y > 0.0 && y < last);
            last = y;
        }
        assert!(last < 1.1e-3);
    }

    #[test]
    fn penalty_derivatives_and_integrals() {
        let specs = [
            PenaltySpec::new(PenaltyKind::Power { beta: 1.5 }, 2.0).unwrap(),
            PenaltySpec::new(PenaltyKind::Bounded { beta: 2.0, ceiling: 3.0 }, 1.5).unwrap(),
            PenaltySpec::new(PenaltyKind::Rational, 2.0).unwrap(),
        ];
        for p in specs {
            for z in [0.3, 0.9, 1.4] {
                let h = 1e-6;
                let fd = (p.value(z + h) - p.value(z - h)) / (2.0 * h);
                assert!((fd - p.derivative(z)).abs() < 1e-6 * (1.0 + fd.abs()), "{p:?} {z}");
                let fd = (p.integral(z + h) - p.integral(z - h)) / (2.0 * h);
                assert!((fd - p.value(z)).abs() < 1e-6, "{p:?} {z}");
                assert!((p.elasticity(z) - p.derivative(z) * z).abs() < 1e-12);
                let gap = p.integral(z + 0.1) - p.integral(z);
                assert!((p.integral_between(z, z + 0.1) - gap).abs() < 1e-9);
            }
        }
        let r = PenaltySpec::new(PenaltyKind::Rational, 1.0).unwrap();
        assert!(r.value(1.0).is_infinite() && r.integral(1.2).is_infinite());
    }

    #[test]
    fn penalty_parsing() {
        assert_eq!("power:1.0".parse::<PenaltyKind>().unwrap(), PenaltyKind::Power { beta: 1.0 });
        assert_eq!(
            "bounded:2:0.5".parse::<PenaltyKind>().unwrap(),
            PenaltyKind::Bounded { beta: 2.0, ceiling: 0.5 }
        );
        assert_eq!("rational".parse::<PenaltyKind>().unwrap(), PenaltyKind::Rational);
        assert!("power".parse::<PenaltyKind>().is_err());
        assert!("cubic:1".parse::<PenaltyKind>().is_err());
        assert!(PenaltySpec::new(PenaltyKind::Power { beta: 0.0 }, 1.0).is_err());
    }

    #[test]
    fn power_threshold_is_quarter_pi_for_unit_exponent() {
        let p = scalar(2.0, 0.0, PenaltyKind::Power { beta: 1.0 }, 1.0);
        let eq = equilibrium_solve(&p, 1e-12, 10_000).unwrap();
        let dynamics = DelayedDynamics::uniform(1, 1, 0.1, 1, 1, NodeMode::Job);
        let report = stability_check(&p, &dynamics, &eq).unwrap();
        assert!((report.specialized_thresholds[0][0] - FRAC_PI_4).abs() < 1e-15);
        assert!((report.general_thresholds[0][0] - FRAC_PI_4).abs() < 1e-9);
        assert!((report.max_margin - 0.2 * 2.0).abs() < 1e-9);
    }

    #[test]
    fn rational_threshold_value() {
        // column sum 0.8 of capacity 1 leaves ε = 0.2
        let p = scalar(0.8 * 4.0, 0.0, PenaltyKind::Rational, 1.0);
        let eq = equilibrium_solve(&p, 1e-12, 10_000).unwrap();
        assert!((eq.column_sums[0] - 0.8).abs() < 1e-9);
        let dynamics = DelayedDynamics::uniform(1, 1, 0.01, 1, 0, NodeMode::Job);
        let report = stability_check(&p, &dynamics, &eq).unwrap();
        assert!((report.specialized_thresholds[0][0] - 0.15708).abs() < 1e-5);
    }

    #[test]
    fn small_steps_make_every_margin_small() {
        let p = scalar(2.0, 1.0, PenaltyKind::Power { beta: 1.0 }, 1.0);
        let eq = equilibrium_solve(&p, 1e-12, 10_000).unwrap();
        for alpha in [1e-2, 1e-4, 1e-8] {
            let d = DelayedDynamics::uniform(1, 1, alpha, 3, 2, NodeMode::Server);
            let r = stability_check(&p, &d, &eq).unwrap();
            assert!(r.stable && r.max_margin <= alpha * 5.0 * 2.0);
        }
    }

    #[test]
    fn boundary_equilibrium_is_not_interior() {
        // the second server is priced so that its gradient is exactly zero at y = 0
        let p = DistributedProblem::new(
            vec![2.0],
            vec![vec![1.0, 2.0]],
            vec![
                PenaltySpec::new(PenaltyKind::Power { beta: 1.0 }, 1.0).unwrap(),
                PenaltySpec::new(PenaltyKind::Power { beta: 1.0 }, 1.0).unwrap(),
            ],
        )
        .unwrap();
        let eq = equilibrium_solve(&p, 1e-12, 10_000).unwrap();
        assert!(eq.y[0][1] < 1e-9);
        assert!(!eq.interior);
        let d = DelayedDynamics::uniform(1, 2, 0.1, 1, 1, NodeMode::Job);
        assert!(matches!(stability_check(&p, &d, &eq), Err(Error::NotInterior)));
    }

    #[test]
    fn starting_at_equilibrium_stays_put() {
        let p = DistributedProblem::new(
            vec![1.0, 2.0],
            vec![vec![0.2, 0.4], vec![0.3, 0.1]],
            vec![
                PenaltySpec::new(PenaltyKind::Power { beta: 2.0 }, 2.0).unwrap(),
                PenaltySpec::new(PenaltyKind::Bounded { beta: 1.0, ceiling: 2.0 }, 1.0).unwrap(),
            ],
        )
        .unwrap();
        let eq = equilibrium_solve(&p, 1e-13, 100_000).unwrap();
        for mode in [NodeMode::Job, NodeMode::Server] {
            let d = DelayedDynamics::uniform(2, 2, 0.05, 0, 0, mode);
            let traj = simulate_dynamics(&p, &d, &eq.y, 200).unwrap();
            assert!(traj.distances(&eq).iter().all(|&x| x < 1e-9));
        }
    }

    #[test]
    fn undelayed_small_steps_increase_objective() {
        let p = DistributedProblem::new(
            vec![1.5, 0.5],
            vec![vec![0.1, 0.6], vec![0.5, 0.2]],
            vec![
                PenaltySpec::new(PenaltyKind::Power { beta: 1.0 }, 1.0).unwrap(),
                PenaltySpec::new(PenaltyKind::Power { beta: 1.0 }, 2.0).unwrap(),
            ],
        )
        .unwrap();
        let d = DelayedDynamics::uniform(2, 2, 0.01, 0, 0, NodeMode::Job);
        let mut y = vec![vec![0.1, 0.1], vec![0.1, 0.1]];
        let mut f = p.objective(&y);
        for _ in 0..300 {
            y = simulate_dynamics(&p, &d, &y, 1).unwrap().final_y;
            let next = p.objective(&y);
            assert!(next >= f - 1e-12);
            f = next;
        }
    }

    #[test]
    fn delayed_scalar_decays_exponentially() {
        let p = scalar(2.0, 1.0, PenaltyKind::Power { beta: 1.0 }, 1.0);
        let eq = equilibrium_solve(&p, 1e-12, 10_000).unwrap();
        // margin α τ (1 + p′Y/(p + c)) = (1/6) · 2 · 1.5 = 0.5
        let d = DelayedDynamics::uniform(1, 1, 1.0 / 6.0, 1, 1, NodeMode::Job);
        let report = stability_check(&p, &d, &eq).unwrap();
        assert!((report.max_margin - 0.5).abs() < 1e-9);
        let traj = simulate_dynamics(&p, &d, &[vec![1.01]], 300).unwrap();
        let dist = traj.distances(&eq);
        let tail: Vec<(f64, f64)> = dist
            .iter()
            .enumerate()
            .skip(20)
            .take(100)
            .map(|(k, v)| (k as f64, v.ln()))
            .collect();
        let n = tail.len() as f64;
        let mx = tail.iter().map(|p| p.0).sum::<f64>() / n;
        let my = tail.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = tail.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = tail.iter().map(|p| (p.0 - mx).powi(2)).sum();
        assert!(sxy / sxx < 0.0);
        assert!(dist[300] < 1e-6);
    }

    #[test]
    fn delays_table_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("delays.csv");
        std::fs::write(&path, "i,j,forward,backward\n0,1,2,3\n1,0,1,0\n").unwrap();
        let (f, b) = DelayedDynamics::load_delays(&path, 2, 2).unwrap();
        assert_eq!(f, vec![vec![0, 2], vec![1, 0]]);
        assert_eq!(b, vec![vec![0, 3], vec![0, 0]]);
        std::fs::write(&path, "i,j,forward,backward\n5,0,1,1\n").unwrap();
        assert!(DelayedDynamics::load_delays(&path, 2, 2).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn equilibrium_satisfies_optimality(
            w in proptest::collection::vec(0.3f64..3.0, 1..4),
            beta in 0.5f64..3.0,
            seed_prices in proptest::collection::vec(0.0f64..1.0, 12),
        ) {
            let ni = w.len();
            let nj = 3;
            let prices: Vec<Vec<f64>> = (0..ni).map(|i| (0..nj).map(|j| seed_prices[i * nj + j]).collect()).collect();
            let pens = vec![
                PenaltySpec::new(PenaltyKind::Power { beta }, 1.0).unwrap(),
                PenaltySpec::new(PenaltyKind::Bounded { beta, ceiling: 2.0 }, 2.0).unwrap(),
                PenaltySpec::new(PenaltyKind::Rational, 1.5).unwrap(),
            ];
            let p = DistributedProblem::new(w, prices, pens).unwrap();
            let eq = equilibrium_solve(&p, 1e-10, 200_000).unwrap();
            prop_assert!(eq.residual <= 1e-10);
            prop_assert!(eq.column_sums[2] < 1.5);
            // no feasible perturbation improves the objective
            let f = p.objective(&eq.y);
            for i in 0..ni {
                for j in 0..nj {
                    let mut z = eq.y.clone();
                    z[i][j] += 1e-4;
                    prop_assert!(p.objective(&z) <= f + 1e-9);
                }
            }
        }
    }
}
