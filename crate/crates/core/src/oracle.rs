//! Best static fractional assignment under known mean rewards, used as the
//! regret reference.
//!
//! With `z_ij = ρ_i p_ij` the program is a transportation LP:
//! maximize `Σ r_ij z_ij` subject to `Σ_j z_ij = ρ_i`, `Σ_i z_ij ≤ n_j`,
//! `z ≥ 0`. It is solved by a dense two-phase primal simplex with Bland's
//! rule.

use crate::error::{Error, Result};

const PIVOT_EPS: f64 = 1e-12;
const FEASIBILITY_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleProblem {
    pub rho: Vec<f64>,
    pub capacities: Vec<f64>,
    /// `r_ij`, one row per job class.
    pub rewards: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    /// `p_ij`; each row sums to one.
    pub p: Vec<Vec<f64>>,
    /// `z_ij = ρ_i p_ij`.
    pub z: Vec<Vec<f64>>,
    pub value: f64,
    /// Free multipliers of the row constraints `Σ_j z_ij = ρ_i`.
    pub row_potentials: Vec<f64>,
    /// Nonnegative multipliers of the capacity constraints.
    pub column_prices: Vec<f64>,
    /// Primal value minus dual objective.
    pub duality_gap: f64,
}

impl OracleProblem {
    pub fn new(rho: Vec<f64>, capacities: Vec<f64>, rewards: Vec<Vec<f64>>) -> Result<Self> {
        if rewards.len() != rho.len() {
            return Err(Error::DimensionMismatch {
                expected: rho.len(),
                actual: rewards.len(),
            });
        }
        if let Some(r) = rewards.iter().find(|r| r.len() != capacities.len()) {
            return Err(Error::DimensionMismatch {
                expected: capacities.len(),
                actual: r.len(),
            });
        }
        if rho.is_empty() || capacities.is_empty() {
            return Err(Error::InvalidInput("oracle needs at least one class of each kind".into()));
        }
        if rho.iter().chain(&capacities).any(|x| !(*x > 0.0) || !x.is_finite()) {
            return Err(Error::InvalidInput("traffic intensities and capacities must be > 0".into()));
        }
        if rewards.iter().flatten().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("oracle rewards"));
        }
        Ok(Self {
            rho,
            capacities,
            rewards,
        })
    }

    pub fn num_rows(&self) -> usize {
        self.rho.len()
    }

    pub fn num_cols(&self) -> usize {
        self.capacities.len()
    }
}

/// Dense tableau over `[z (I·J) | slack (J) | artificial (I+J)]`.
struct Tableau {
    rows: Vec<Vec<f64>>,
    rhs: Vec<f64>,
    basis: Vec<usize>,
    num_structural: usize,
}

impl Tableau {
    fn pivot(&mut self, r: usize, c: usize) {
        let piv = self.rows[r][c];
        self.rows[r].iter_mut().for_each(|x| *x /= piv);
        self.rhs[r] /= piv;
        let pivot_row = self.rows[r].clone();
        let pivot_rhs = self.rhs[r];
        for k in 0..self.rows.len() {
            if k == r {
                continue;
            }
            let factor = self.rows[k][c];
            if factor != 0.0 {
                for (x, p) in self.rows[k].iter_mut().zip(&pivot_row) {
                    *x -= factor * p;
                }
                self.rhs[k] -= factor * pivot_rhs;
            }
        }
        self.basis[r] = c;
    }

    fn reduced_costs(&self, cost: &[f64]) -> Vec<f64> {
        let mut rc = cost.to_vec();
        for (k, &b) in self.basis.iter().enumerate() {
            let cb = cost[b];
            if cb != 0.0 {
                for (x, t) in rc.iter_mut().zip(&self.rows[k]) {
                    *x -= cb * t;
                }
            }
        }
        rc
    }

    /// Maximize `cost · x` over columns `< allowed`, Bland's rule.
    fn optimize(&mut self, cost: &[f64], allowed: usize) -> Result<()> {
        let max_pivots = 50 * (self.rows.len() + allowed) * (self.rows.len() + 1);
        for _ in 0..max_pivots {
            let rc = self.reduced_costs(cost);
            let Some(enter) = (0..allowed).find(|&c| rc[c] > PIVOT_EPS && !self.basis.contains(&c)) else {
                return Ok(());
            };
            let mut leave: Option<(usize, f64)> = None;
            for k in 0..self.rows.len() {
                let a = self.rows[k][enter];
                if a > PIVOT_EPS {
                    let ratio = self.rhs[k] / a;
                    leave = match leave {
                        None => Some((k, ratio)),
                        Some((best, r)) => {
                            if ratio < r - PIVOT_EPS
                                || (ratio <= r + PIVOT_EPS && self.basis[k] < self.basis[best])
                            {
                                Some((k, ratio))
                            } else {
                                Some((best, r))
                            }
                        }
                    };
                }
            }
            let Some((r, _)) = leave else {
                return Err(Error::Unbounded);
            };
            self.pivot(r, enter);
        }
        Err(Error::NotConverged {
            iterations: max_pivots,
            residual: f64::NAN,
        })
    }
}

pub fn solve_oracle(problem: &OracleProblem) -> Result<OracleSolution> {
    let (ni, nj) = (problem.num_rows(), problem.num_cols());
    let total_rho: f64 = problem.rho.iter().sum();
    let total_cap: f64 = problem.capacities.iter().sum();
    if total_rho > total_cap * (1.0 + 1e-12) {
        return Err(Error::Infeasible);
    }
    let nz = ni * nj;
    let num_structural = nz + nj;
    let m = ni + nj;
    let width = num_structural + m;
    let mut rows = vec![vec![0.0; width]; m];
    let mut rhs = vec![0.0; m];
    for i in 0..ni {
        for j in 0..nj {
            rows[i][i * nj + j] = 1.0;
        }
        rhs[i] = problem.rho[i];
    }
    for j in 0..nj {
        let r = ni + j;
        for i in 0..ni {
            rows[r][i * nj + j] = 1.0;
        }
        rows[r][nz + j] = 1.0;
        rhs[r] = problem.capacities[j];
    }
    for (k, row) in rows.iter_mut().enumerate() {
        row[num_structural + k] = 1.0;
    }
    let mut tab = Tableau {
        rows,
        rhs,
        basis: (num_structural..width).collect(),
        num_structural,
    };

    let mut phase1 = vec![0.0; width];
    phase1[num_structural..].iter_mut().for_each(|c| *c = -1.0);
    tab.optimize(&phase1, width)?;
    let infeasibility: f64 = tab
        .basis
        .iter()
        .zip(&tab.rhs)
        .filter(|(b, _)| **b >= num_structural)
        .map(|(_, v)| *v)
        .sum();
    if infeasibility > FEASIBILITY_EPS * (1.0 + total_rho) {
        return Err(Error::Infeasible);
    }
    // drive zero-level artificials out of the basis where possible
    for r in 0..m {
        if tab.basis[r] >= num_structural {
            if let Some(c) = (0..num_structural)
                .find(|&c| tab.rows[r][c].abs() > PIVOT_EPS && !tab.basis.contains(&c))
            {
                tab.pivot(r, c);
            }
        }
    }

    let mut cost = vec![0.0; width];
    for i in 0..ni {
        for j in 0..nj {
            cost[i * nj + j] = problem.rewards[i][j];
        }
    }
    tab.optimize(&cost, tab.num_structural)?;

    let mut x = vec![0.0; width];
    for (k, &b) in tab.basis.iter().enumerate() {
        x[b] = tab.rhs[k].max(0.0);
    }
    let z: Vec<Vec<f64>> = (0..ni).map(|i| x[i * nj..(i + 1) * nj].to_vec()).collect();
    let p = z
        .iter()
        .zip(&problem.rho)
        .map(|(row, rho)| row.iter().map(|v| v / rho).collect())
        .collect();
    let value: f64 = z
        .iter()
        .zip(&problem.rewards)
        .map(|(zr, rr)| zr.iter().zip(rr).map(|(a, b)| a * b).sum::<f64>())
        .sum();

    // duals y = c_B B⁻¹; B⁻¹ sits in the artificial columns
    let duals: Vec<f64> = (0..m)
        .map(|k| {
            tab.basis
                .iter()
                .enumerate()
                .map(|(r, &b)| cost[b] * tab.rows[r][num_structural + k])
                .sum()
        })
        .collect();
    let row_potentials = duals[..ni].to_vec();
    let column_prices: Vec<f64> = duals[ni..].to_vec();
    let dual_value: f64 = row_potentials.iter().zip(&problem.rho).map(|(a, b)| a * b).sum::<f64>()
        + column_prices.iter().zip(&problem.capacities).map(|(a, b)| a * b).sum::<f64>();
    Ok(OracleSolution {
        p,
        z,
        value,
        row_potentials,
        column_prices,
        duality_gap: value - dual_value,
    })
}

/// `T` times the per-step oracle reward.
pub fn regret_reference(solution: &OracleSolution, horizon: usize) -> f64 {
    horizon as f64 * solution.value
}

impl OracleSolution {
    /// Largest violation of dual feasibility `φ_i + π_j ≥ r_ij`, `π ≥ 0`.
    pub fn dual_infeasibility(&self, problem: &OracleProblem) -> f64 {
        let mut worst = self.column_prices.iter().fold(0.0_f64, |m, p| m.max(-p));
        for (i, row) in problem.rewards.iter().enumerate() {
            for (j, r) in row.iter().enumerate() {
                worst = worst.max(r - self.row_potentials[i] - self.column_prices[j]);
            }
        }
        worst
    }

    /// Largest primal constraint violation.
    pub fn primal_infeasibility(&self, problem: &OracleProblem) -> f64 {
        let mut worst = 0.0_f64;
        for row in &self.p {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            worst = row.iter().fold(worst, |m, v| m.max(-v));
        }
        for (j, cap) in problem.capacities.iter().enumerate() {
            let load: f64 = self.z.iter().map(|r| r[j]).sum();
            worst = worst.max(load - cap);
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Best basic feasible solution of the standard-form LP by enumerating
    /// every square column subset.
    pub(crate) fn vertex_enumeration(problem: &OracleProblem) -> Option<f64> {
        let (ni, nj) = (problem.num_rows(), problem.num_cols());
        let m = ni + nj;
        let cols = ni * nj + nj;
        let a = DMatrix::from_fn(m, cols, |r, c| {
            if c < ni * nj {
                let (i, j) = (c / nj, c % nj);
                if r == i || r == ni + j { 1.0 } else { 0.0 }
            } else if r == ni + (c - ni * nj) {
                1.0
            } else {
                0.0
            }
        });
        let b = DVector::from_iterator(m, problem.rho.iter().chain(&problem.capacities).copied());
        let cost: Vec<f64> = (0..cols)
            .map(|c| if c < ni * nj { problem.rewards[c / nj][c % nj] } else { 0.0 })
            .collect();
        let mut best: Option<f64> = None;
        let mut subset: Vec<usize> = (0..m).collect();
        loop {
            let basis = DMatrix::from_fn(m, m, |r, k| a[(r, subset[k])]);
            if let Some(sol) = basis.clone().lu().solve(&b) {
                let check = (&basis * &sol - &b).norm();
                if check < 1e-9 && sol.iter().all(|v| *v >= -1e-9) {
                    let val: f64 = subset.iter().zip(sol.iter()).map(|(&c, v)| cost[c] * v).sum();
                    best = Some(best.map_or(val, |b: f64| b.max(val)));
                }
            }
            // next combination
            let mut k = m;
            loop {
                if k == 0 {
                    return best;
                }
                k -= 1;
                if subset[k] < cols - m + k {
                    subset[k] += 1;
                    for l in k + 1..m {
                        subset[l] = subset[l - 1] + 1;
                    }
                    break;
                }
            }
        }
    }

    pub(crate) fn random_rational(rng: &mut ChaCha8Rng, ni: usize, nj: usize) -> OracleProblem {
        let caps: Vec<f64> = (0..nj).map(|_| rng.random_range(1..5) as f64 / 2.0).collect();
        let total: f64 = caps.iter().sum();
        let rho: Vec<f64> = (0..ni)
            .map(|_| rng.random_range(1..10) as f64 / 10.0 * total / ni as f64)
            .collect();
        let rewards = (0..ni)
            .map(|_| (0..nj).map(|_| rng.random_range(-8..=8) as f64 / 8.0).collect())
            .collect();
        OracleProblem::new(rho, caps, rewards).unwrap()
    }

    #[test]
    fn single_column_forced() {
        let p = OracleProblem::new(vec![0.5, 0.5], vec![1.0], vec![vec![0.9], vec![0.1]]).unwrap();
        let s = solve_oracle(&p).unwrap();
        assert!((s.value - 0.5).abs() < 1e-12);
        assert!((s.p[0][0] - 1.0).abs() < 1e-12 && (s.p[1][0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_two_by_two() {
        let p = OracleProblem::new(vec![1.0, 1.0], vec![1.0, 1.0], vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let s = solve_oracle(&p).unwrap();
        let brute = vertex_enumeration(&p).unwrap();
        assert!((brute - 2.0).abs() < 1e-12);
        assert!((s.value - brute).abs() < 1e-12);
        assert!((s.p[0][0] - 1.0).abs() < 1e-12 && (s.p[1][1] - 1.0).abs() < 1e-12);
        assert!((regret_reference(&s, 500) - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn constant_rewards_give_constant_value() {
        let c = 0.3;
        let p = OracleProblem::new(vec![0.4, 0.7, 0.2], vec![1.0, 2.0], vec![vec![c; 2]; 3]).unwrap();
        let s = solve_oracle(&p).unwrap();
        assert!((s.value - c * 1.3).abs() < 1e-12);
    }

    #[test]
    fn reference_scales_with_horizon() {
        let mut s = solve_oracle(
            &OracleProblem::new(vec![0.5, 0.5], vec![1.0], vec![vec![0.9], vec![0.1]]).unwrap(),
        )
        .unwrap();
        assert!((regret_reference(&s, 100) - 50.0).abs() < 1e-9);
        s.value = 0.0;
        assert_eq!(regret_reference(&s, 1234), 0.0);
    }

    #[test]
    fn overload_is_infeasible() {
        let p = OracleProblem::new(vec![2.0, 1.0], vec![1.0, 1.0], vec![vec![0.0; 2]; 2]).unwrap();
        assert!(matches!(solve_oracle(&p), Err(Error::Infeasible)));
        assert!(OracleProblem::new(vec![0.0], vec![1.0], vec![vec![0.0]]).is_err());
    }

    #[test]
    fn certificate_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let (ni, nj) = (rng.random_range(1..6), rng.random_range(1..5));
            let p = random_rational(&mut rng, ni, nj);
            let s = solve_oracle(&p).unwrap();
            assert!(s.duality_gap.abs() <= 1e-9 * (1.0 + s.value.abs()));
            assert!(s.dual_infeasibility(&p) <= 1e-9);
            assert!(s.primal_infeasibility(&p) <= 1e-9);
        }
    }

    #[test]
    fn agrees_with_vertex_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..60 {
            let (ni, nj) = (rng.random_range(1..4), rng.random_range(1..4));
            let p = random_rational(&mut rng, ni, nj);
            let s = solve_oracle(&p).unwrap();
            let brute = vertex_enumeration(&p).unwrap();
            assert!((s.value - brute).abs() < 1e-6, "{} vs {brute}", s.value);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn value_monotone_in_rewards_and_capacity(
            seed in 0u64..100_000,
            bump in 0.0f64..0.5,
            extra in 0.0f64..2.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_rational(&mut rng, 3, 2);
            let base = solve_oracle(&p).unwrap().value;
            let mut richer = p.clone();
            let (i, j) = (rng.random_range(0..3), rng.random_range(0..2));
            richer.rewards[i][j] += bump;
            prop_assert!(solve_oracle(&richer).unwrap().value >= base - 1e-9);
            let mut bigger = p.clone();
            bigger.capacities[j] += extra;
            prop_assert!(solve_oracle(&bigger).unwrap().value >= base - 1e-9);
        }
    }
}
