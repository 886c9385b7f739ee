//! Domain types: job and server classes, the bilinear reward environment and
//! system parameters.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major flattening of the outer product `u vᵀ`.
///
/// Entry `k * d + l` holds `u[k] * v[l]`, the same convention used to flatten
/// the parameter matrix, so `⟨vectorize_outer(u, v), vec(Θ)⟩ = uᵀ Θ v`.
pub fn vectorize_outer(u: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            actual: v.len(),
        });
    }
    Ok(u.iter()
        .flat_map(|&uk| v.iter().map(move |&vl| uk * vl))
        .collect())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobClass {
    pub features: Vec<f64>,
    /// Bernoulli arrival probability per step attributed to this class.
    pub arrival_rate: f64,
    /// Per-step completion probability of an assigned service unit.
    pub service_rate: f64,
    #[serde(default = "one")]
    pub weight: f64,
    #[serde(default = "one")]
    pub holding_cost: f64,
}

impl JobClass {
    pub fn traffic_intensity(&self) -> f64 {
        self.arrival_rate / self.service_rate
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerClass {
    pub features: Vec<f64>,
    /// Nominal number of servers; used by the oracle program.
    pub capacity: usize,
    /// Optional periodic capacity schedule: step `t` (1-based) uses
    /// `schedule[(t - 1) % len]`. A zero entry means the class is inactive.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Vec<usize>>,
}

impl ServerClass {
    pub fn capacity_at(&self, t: usize) -> usize {
        match &self.schedule {
            Some(s) if !s.is_empty() => s[(t.max(1) - 1) % s.len()],
            _ => self.capacity,
        }
    }
}

/// Active capacities `n_j(t)` for every server class at step `t`.
pub fn time_varying_capacity(servers: &[ServerClass], t: usize) -> Result<Vec<usize>> {
    let caps: Vec<usize> = servers.iter().map(|s| s.capacity_at(t)).collect();
    if caps.iter().sum::<usize>() == 0 {
        return Err(Error::InvalidConfig(format!(
            "no active servers at step {t}"
        )));
    }
    Ok(caps)
}

/// Zero-mean reward noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum NoiseLaw {
    Gaussian { std_dev: f64 },
    /// Uniform on `[-half_width, half_width]`.
    Uniform { half_width: f64 },
}

impl NoiseLaw {
    /// Sub-Gaussian parameter of the law.
    pub fn kappa(&self) -> f64 {
        match *self {
            NoiseLaw::Gaussian { std_dev } => std_dev,
            NoiseLaw::Uniform { half_width } => half_width,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            NoiseLaw::Gaussian { std_dev } => {
                if std_dev == 0.0 {
                    0.0
                } else {
                    Normal::new(0.0, std_dev).expect("validated std").sample(rng)
                }
            }
            NoiseLaw::Uniform { half_width } => {
                if half_width == 0.0 {
                    0.0
                } else {
                    Uniform::new_inclusive(-half_width, half_width)
                        .expect("validated width")
                        .sample(rng)
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let k = self.kappa();
        if !k.is_finite() || k < 0.0 {
            return Err(Error::InvalidConfig(format!("noise parameter {k} must be >= 0")));
        }
        Ok(())
    }
}

impl Default for NoiseLaw {
    fn default() -> Self {
        NoiseLaw::Gaussian { std_dev: 0.1 }
    }
}

/// Hidden bilinear parameter `Θ` (stored row-major as `θ = vec(Θ)`) and noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BilinearEnvironment {
    pub dim: usize,
    pub theta: Vec<f64>,
    pub bound: f64,
    pub noise: NoiseLaw,
}

impl BilinearEnvironment {
    pub fn new(dim: usize, theta: Vec<f64>, bound: f64, noise: NoiseLaw) -> Result<Self> {
        if theta.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                actual: theta.len(),
            });
        }
        if !(bound > 0.0) || !bound.is_finite() {
            return Err(Error::InvalidConfig(format!("bound a = {bound} must be > 0")));
        }
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("theta"));
        }
        let tn = norm2(&theta);
        if tn > bound.sqrt() * (1.0 + 1e-12) {
            return Err(Error::InvalidConfig(format!(
                "||theta|| = {tn} exceeds sqrt(a) = {}",
                bound.sqrt()
            )));
        }
        noise.validate()?;
        Ok(Self {
            dim,
            theta,
            bound,
            noise,
        })
    }

    /// `uᵀ Θ v`, evaluated directly from the matrix.
    pub fn mean_reward(&self, u: &[f64], v: &[f64]) -> f64 {
        let d = self.dim;
        let mut acc = 0.0;
        for k in 0..d {
            let row = &self.theta[k * d..(k + 1) * d];
            acc += u[k] * dot(row, v);
        }
        acc
    }

    pub fn sample_reward<R: Rng + ?Sized>(&self, u: &[f64], v: &[f64], rng: &mut R) -> f64 {
        self.mean_reward(u, v) + self.noise.sample(rng)
    }
}

/// Source of true mean rewards and observation noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum RewardModel {
    Bilinear(BilinearEnvironment),
    /// Per-cell Gaussian rewards; the learner still sees class features.
    Table {
        bound: f64,
        means: Vec<Vec<f64>>,
        variances: Vec<Vec<f64>>,
    },
}

impl RewardModel {
    pub fn bound(&self) -> f64 {
        match self {
            RewardModel::Bilinear(env) => env.bound,
            RewardModel::Table { bound, .. } => *bound,
        }
    }

    /// Sub-Gaussian parameter used for confidence radii.
    pub fn kappa(&self) -> f64 {
        match self {
            RewardModel::Bilinear(env) => env.noise.kappa(),
            RewardModel::Table { variances, .. } => variances
                .iter()
                .flatten()
                .fold(0.0_f64, |m, v| m.max(v.sqrt())),
        }
    }
}

/// Which learning rule drives the reward estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// Bilinear UCB with unit weights.
    Sabr,
    /// Bilinear UCB with weights equal to holding costs.
    WSabr,
    /// Bilinear UCB refreshed only when `det Λ` grows by `1 + C`.
    SwitchingSabr,
    /// Knows the true mean rewards; no learning.
    OracleInformed,
    /// Uses zero reward estimates; no learning.
    NoLearning,
    /// Independent per-job, per-server-class UCB estimates.
    PerJobUcb,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [
        Algorithm::Sabr,
        Algorithm::WSabr,
        Algorithm::SwitchingSabr,
        Algorithm::OracleInformed,
        Algorithm::NoLearning,
        Algorithm::PerJobUcb,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Sabr => "sabr",
            Algorithm::WSabr => "w-sabr",
            Algorithm::SwitchingSabr => "switching-sabr",
            Algorithm::OracleInformed => "oracle",
            Algorithm::NoLearning => "no-learning",
            Algorithm::PerJobUcb => "per-job-ucb",
        }
    }

    /// Weights used in the allocation objective.
    pub fn weights(&self, jobs: &[JobClass]) -> Vec<f64> {
        match self {
            Algorithm::WSabr => jobs.iter().map(|j| j.holding_cost).collect(),
            _ => vec![1.0; jobs.len()],
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .iter()
            .copied()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown policy '{s}'")))
    }
}

/// Control parameters shared by all policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    /// Drift-plus-penalty weight; `None` selects the regret-optimal value.
    #[serde(default, rename = "V", skip_serializing_if = "Option::is_none")]
    pub v: Option<f64>,
    pub gamma: f64,
    /// Ridge regularizer; `None` means `a · n_max`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zeta: Option<f64>,
    pub horizon: usize,
    #[serde(default)]
    pub seed: u64,
    /// Determinant growth threshold `C` for the rarely switching variant.
    #[serde(default)]
    pub switch_threshold: f64,
    /// Override for the sub-Gaussian parameter in the confidence radius.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(default = "default_algorithm")]
    pub algorithm: Algorithm,
}

fn default_algorithm() -> Algorithm {
    Algorithm::Sabr
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            v: None,
            gamma: 1.2,
            zeta: None,
            horizon: 500,
            seed: 0,
            switch_threshold: 0.0,
            kappa: None,
            algorithm: Algorithm::Sabr,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn outer_product_is_row_major() {
        assert_eq!(
            vectorize_outer(&[1.0, 2.0], &[3.0, 4.0]).unwrap(),
            vec![3.0, 4.0, 6.0, 8.0]
        );
        assert_eq!(
            vectorize_outer(&[1.0, 0.0], &[1.0, 0.0]).unwrap(),
            vec![1.0, 0.0, 0.0, 0.0]
        );
        assert!(matches!(
            vectorize_outer(&[1.0], &[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn outer_product_against_identity_is_inner_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let identity = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        for _ in 0..100 {
            let u: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w = vectorize_outer(&u, &v).unwrap();
            assert!((dot(&w, &identity) - dot(&u, &v)).abs() < 1e-14);
        }
    }

    #[test]
    fn mean_reward_two_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let d = 3;
            let theta: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let scale = norm2(&theta);
            let theta: Vec<f64> = theta.iter().map(|x| x / scale).collect();
            let env = BilinearEnvironment::new(d, theta.clone(), 1.0, NoiseLaw::default()).unwrap();
            let u: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let via_vec = dot(&vectorize_outer(&u, &v).unwrap(), &theta);
            assert!((env.mean_reward(&u, &v) - via_vec).abs() < 1e-12);
        }
    }

    #[test]
    fn trivial_mean_rewards() {
        let env = BilinearEnvironment::new(2, vec![1.0, 0.0, 0.0, 1.0], 2.0, NoiseLaw::default())
            .unwrap();
        assert_eq!(env.mean_reward(&[1.0, 0.0], &[1.0, 0.0]), 1.0);
        let zero = BilinearEnvironment::new(2, vec![0.0; 4], 1.0, NoiseLaw::default()).unwrap();
        assert_eq!(zero.mean_reward(&[0.3, 0.4], &[0.6, 0.8]), 0.0);
    }

    #[test]
    fn noiseless_sample_is_exact_and_noisy_sample_mean_is_close() {
        let theta = vec![0.6, 0.0, 0.0, 0.8];
        let u = [0.6, 0.8];
        let v = [1.0, 0.0];
        let quiet = BilinearEnvironment::new(
            2,
            theta.clone(),
            1.0,
            NoiseLaw::Gaussian { std_dev: 0.0 },
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = quiet.mean_reward(&u, &v);
        assert_eq!(quiet.sample_reward(&u, &v, &mut rng), r);

        let noisy = BilinearEnvironment::new(2, theta, 1.0, NoiseLaw::Gaussian { std_dev: 0.1 })
            .unwrap();
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| noisy.sample_reward(&u, &v, &mut rng)).sum::<f64>() / n as f64;
        assert!((mean - r).abs() <= 3.0 * 0.1 / (n as f64).sqrt());
    }

    #[test]
    fn rejects_theta_outside_ball() {
        let err = BilinearEnvironment::new(2, vec![1.0, 1.0, 0.0, 0.0], 1.0, NoiseLaw::default());
        assert!(matches!(err, Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn schedules_cycle() {
        let s = ServerClass {
            features: vec![1.0],
            capacity: 2,
            schedule: Some(vec![2, 3]),
        };
        assert_eq!(s.capacity_at(1), 2);
        assert_eq!(s.capacity_at(2), 3);
        assert_eq!(s.capacity_at(3), 2);
        let off = ServerClass {
            features: vec![1.0],
            capacity: 1,
            schedule: Some(vec![0]),
        };
        assert!(time_varying_capacity(&[off], 1).is_err());
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
        }
        assert!("ugda".parse::<Algorithm>().is_err());
    }

    proptest::proptest! {
        #[test]
        fn outer_product_is_bilinear(
            u in proptest::collection::vec(-2.0f64..2.0, 3),
            v in proptest::collection::vec(-2.0f64..2.0, 3),
            alpha in -5.0f64..5.0,
        ) {
            let scaled: Vec<f64> = u.iter().map(|x| alpha * x).collect();
            let lhs = vectorize_outer(&scaled, &v).unwrap();
            let rhs = vectorize_outer(&u, &v).unwrap();
            for (l, r) in lhs.iter().zip(&rhs) {
                proptest::prop_assert!((l - alpha * r).abs() <= 1e-12 * (1.0 + r.abs()));
            }
        }
    }
}
