//! Closed-form queue, holding-cost and regret-bound constants, and the
//! regret-optimal choice of `V`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which family of guarantees applies to a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// Identical service rates and a fixed server set.
    Identical,
    /// Class-dependent service rates, fixed server set.
    NonIdentical,
    /// Server capacities follow a schedule.
    TimeVarying,
}

/// Everything the closed-form bounds depend on.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundInputs {
    pub kind: ScenarioKind,
    pub bound: f64,
    pub gamma: f64,
    pub weights: Vec<f64>,
    pub holding_costs: Vec<f64>,
    /// Traffic intensities `ρ_i = λ_i / μ_i`.
    pub rho: Vec<f64>,
    /// Total arrival rate `λ`.
    pub lambda: f64,
    pub mu_min: f64,
    pub n_min: f64,
    pub n_max: f64,
}

impl BoundInputs {
    /// Inputs for the identical-service, fixed-server case.
    pub fn identical(bound: f64, gamma: f64, weights: Vec<f64>, rho: Vec<f64>, mu: f64, n: f64) -> Self {
        let lambda = rho.iter().sum::<f64>() * mu;
        let holding_costs = vec![1.0; weights.len()];
        Self {
            kind: ScenarioKind::Identical,
            bound,
            gamma,
            weights,
            holding_costs,
            rho,
            lambda,
            mu_min: mu,
            n_min: n,
            n_max: n,
        }
    }

    pub fn c_a_gamma(&self) -> f64 {
        (self.gamma + self.bound) / (self.gamma - self.bound)
    }

    pub fn total_rho(&self) -> f64 {
        self.rho.iter().sum()
    }

    /// Effective load `(2λ/μ_min − ρ) / n_min`; equals `ρ/n` with identical
    /// service rates and a fixed server set.
    pub fn effective_load(&self) -> f64 {
        (2.0 * self.lambda / self.mu_min - self.total_rho()) / self.n_min
    }

    pub fn is_stable(&self) -> bool {
        self.effective_load() < 1.0
    }

    fn check(&self) -> Result<()> {
        if !(self.gamma > self.bound) {
            return Err(Error::InvalidConfig(format!(
                "gamma = {} must exceed a = {}",
                self.gamma, self.bound
            )));
        }
        if self.weights.is_empty()
            || self.weights.len() != self.rho.len()
            || self.weights.len() != self.holding_costs.len()
        {
            return Err(Error::InvalidInput("class vectors must be non-empty and aligned".into()));
        }
        if !self.is_stable() {
            return Err(Error::Unstable(format!(
                "effective load {:.4} >= 1",
                self.effective_load()
            )));
        }
        Ok(())
    }

    fn w_min(&self) -> f64 {
        self.weights.iter().copied().fold(f64::INFINITY, f64::min)
    }

    fn w_max(&self) -> f64 {
        self.weights.iter().copied().fold(0.0, f64::max)
    }

    /// `min_i ρ_i / w_i`.
    pub fn normalized_rho_min(&self) -> f64 {
        self.rho
            .iter()
            .zip(&self.weights)
            .map(|(r, w)| r / w)
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremBounds {
    pub kind: ScenarioKind,
    pub v: f64,
    pub c_a_gamma: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub alpha4: f64,
    pub alpha5: f64,
    /// Backlog above which every server capacity is used in full.
    pub tau1: f64,
    pub tau2: f64,
    pub holding_cost_bound: f64,
    /// Mean total queue length bound (all holding costs equal to one).
    pub queue_bound: f64,
    pub recommended_v: f64,
}

struct Alphas {
    a1: f64,
    a2: f64,
    a3: f64,
    a4: f64,
    a5: f64,
}

fn alphas(inp: &BoundInputs) -> Alphas {
    let c = inp.c_a_gamma();
    let n = inp.n_max;
    Alphas {
        a1: inp.gamma * inp.gamma * n,
        a2: inp.gamma * c * n * n / (1.0 - inp.effective_load()),
        a3: c * c * n * n,
        a4: inp.bound * n.sqrt(),
        a5: inp.bound * n,
    }
}

/// `V = sqrt((α₃/ρ̃_min + Σ w_i) · μ · w_min / α₁)`.
pub fn recommended_v(inp: &BoundInputs) -> Result<f64> {
    inp.check()?;
    let rho_tilde = inp.normalized_rho_min();
    if !(rho_tilde > 0.0) {
        return Err(Error::InvalidConfig("minimum normalized traffic intensity is zero".into()));
    }
    let al = alphas(inp);
    let sum_w: f64 = inp.weights.iter().sum();
    Ok(((al.a3 / rho_tilde + sum_w) * inp.mu_min * inp.w_min() / al.a1).sqrt())
}

/// Mean holding-cost bound
/// `max{(γ+a)V n_max, 2c n_max² w_max/(1−ρ/n_min)} / min(w/c)
///  + (1+ρ/n_min)/(1−load)·c_max + c_max`.
fn holding_bound(inp: &BoundInputs, v: f64, costs: &[f64]) -> (f64, f64, f64) {
    let c = inp.c_a_gamma();
    let n_max = inp.n_max;
    let rho_over_n = inp.total_rho() / inp.n_min;
    let min_wc = inp
        .weights
        .iter()
        .zip(costs)
        .map(|(w, c)| w / c)
        .fold(f64::INFINITY, f64::min);
    let c_max = costs.iter().copied().fold(0.0, f64::max);
    let tau1 = (inp.gamma + inp.bound) * v * n_max / min_wc;
    let tau2 = 2.0 * c * n_max * n_max * inp.w_max() / ((1.0 - rho_over_n) * min_wc);
    let tail = (1.0 + rho_over_n) / (1.0 - inp.effective_load()) * c_max + c_max;
    (tau1, tau2, tau1.max(tau2) + tail)
}

pub fn theorem_bounds(inp: &BoundInputs, v: f64) -> Result<TheoremBounds> {
    inp.check()?;
    if !(v > 0.0) {
        return Err(Error::InvalidConfig(format!("V = {v} must be > 0")));
    }
    let al = alphas(inp);
    let (tau1, tau2, holding) = holding_bound(inp, v, &inp.holding_costs);
    let unit = vec![1.0; inp.weights.len()];
    let (_, _, queue) = holding_bound(inp, v, &unit);
    Ok(TheoremBounds {
        kind: inp.kind,
        v,
        c_a_gamma: inp.c_a_gamma(),
        alpha1: al.a1,
        alpha2: al.a2,
        alpha3: al.a3,
        alpha4: al.a4,
        alpha5: al.a5,
        tau1,
        tau2,
        holding_cost_bound: holding,
        queue_bound: queue,
        recommended_v: recommended_v(inp)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_setup(weights: Vec<f64>) -> BoundInputs {
        BoundInputs::identical(1.0, 1.2, weights, vec![0.1; 10], 1.0, 4.0)
    }

    #[test]
    fn recommended_v_matches_hand_arithmetic() {
        let v = recommended_v(&reference_setup(vec![1.0; 10])).unwrap();
        // c = 11, α₃ = 121·16 = 1936, α₁ = 1.44·4 = 5.76
        let expected = ((1936.0 / 0.1 + 10.0) / 5.76_f64).sqrt();
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 57.99).abs() < 0.01);
    }

    #[test]
    fn identical_weights_reduce() {
        let w = 0.7;
        let v = recommended_v(&reference_setup(vec![w; 10])).unwrap();
        let a1 = 5.76;
        let a3 = 1936.0;
        // ρ̃_min = ρ_min / w, Σw = I w
        let reduced = (a3 / (0.1 / w) + 10.0 * w) * w / a1;
        assert!((v - reduced.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn doubling_weights_doubles_v() {
        // ρ̃_min halves while Σw and w_min double, so the radicand grows 4x.
        let base = recommended_v(&reference_setup(vec![1.0; 10])).unwrap();
        let doubled = recommended_v(&reference_setup(vec![2.0; 10])).unwrap();
        assert!((doubled / base - 2.0).abs() < 1e-12);
    }

    #[test]
    fn queue_bound_example() {
        let b = theorem_bounds(&reference_setup(vec![1.0; 10]), 1.0).unwrap();
        let expected = (2.2 * 4.0_f64).max(2.0 * 11.0 * 16.0 / 0.75) + 1.25 / 0.75 + 1.0;
        assert!((b.queue_bound - expected).abs() < 1e-9);
        assert!((b.queue_bound - 472.0).abs() < 0.01);
        assert!((b.tau1 - 8.8).abs() < 1e-12);
        assert!((b.tau2 - 469.333_333_333).abs() < 1e-6);
        assert_eq!(b.alpha1, 1.44 * 4.0);
        assert_eq!(b.alpha5, 4.0);
    }

    #[test]
    fn queue_bound_is_linear_in_large_v() {
        let inp = reference_setup(vec![1.0; 10]);
        let b1 = theorem_bounds(&inp, 1e4).unwrap().queue_bound;
        let b2 = theorem_bounds(&inp, 2e4).unwrap().queue_bound;
        assert!(((b2 - b1) / 1e4 - 2.2 * 4.0).abs() < 1e-9);
    }

    #[test]
    fn holding_cost_equal_to_weights() {
        let mut inp = reference_setup(vec![1.75, 0.25, 1.75, 0.25, 1.75, 0.25, 1.75, 0.25, 1.75, 0.25]);
        inp.holding_costs = inp.weights.clone();
        let b = theorem_bounds(&inp, 10.0).unwrap();
        let expected = (2.2 * 10.0 * 4.0_f64).max(2.0 * 11.0 * 16.0 / 0.75 * 1.75)
            + 1.25 / 0.75 * 1.75
            + 1.75;
        assert!((b.holding_cost_bound - expected).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_parameters() {
        let mut inp = reference_setup(vec![1.0; 10]);
        inp.gamma = 1.0;
        assert!(theorem_bounds(&inp, 1.0).is_err());
        let mut inp = reference_setup(vec![1.0; 10]);
        inp.rho = vec![0.5; 10];
        inp.lambda = 5.0;
        assert!(matches!(recommended_v(&inp), Err(Error::Unstable(_))));
    }

    #[test]
    fn non_identical_load_uses_slowest_class() {
        let inp = BoundInputs {
            kind: ScenarioKind::NonIdentical,
            bound: 1.0,
            gamma: 1.2,
            weights: vec![1.0, 1.0],
            holding_costs: vec![1.0, 1.0],
            rho: vec![0.2, 0.4],
            lambda: 0.3,
            mu_min: 0.5,
            n_min: 4.0,
            n_max: 4.0,
        };
        // (2·0.3/0.5 − 0.6)/4 = 0.15
        assert!((inp.effective_load() - 0.15).abs() < 1e-12);
        let b = theorem_bounds(&inp, 3.0).unwrap();
        assert!((b.alpha2 - 1.2 * 11.0 * 16.0 / 0.85).abs() < 1e-9);
    }
}
