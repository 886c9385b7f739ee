//! A validated system description: classes, reward source and parameters,
//! together with its TOML file format and the random-instance generator.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::{self, BoundInputs, ScenarioKind, TheoremBounds};
use crate::error::{Error, Result};
use crate::model::{
    norm2, vectorize_outer, Algorithm, BilinearEnvironment, JobClass, NoiseLaw, RewardModel,
    ServerClass, SystemConfig,
};

const NORM_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    jobs: Vec<JobClass>,
    servers: Vec<ServerClass>,
    rewards: RewardModel,
    config: SystemConfig,
    dim: usize,
    /// `w_ij = vec(u_i v_jᵀ)`, indexed `i * J + j`.
    features: Vec<Vec<f64>>,
    means: Vec<Vec<f64>>,
}

impl Scenario {
    pub fn new(
        jobs: Vec<JobClass>,
        servers: Vec<ServerClass>,
        rewards: RewardModel,
        config: SystemConfig,
    ) -> Result<Self> {
        if jobs.is_empty() || servers.is_empty() {
            return Err(Error::InvalidConfig("need at least one job and one server class".into()));
        }
        let dim = jobs[0].features.len();
        for f in jobs.iter().map(|j| &j.features).chain(servers.iter().map(|s| &s.features)) {
            if f.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: f.len(),
                });
            }
            if f.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("features"));
            }
        }
        let mut features = Vec::with_capacity(jobs.len() * servers.len());
        for job in &jobs {
            for server in &servers {
                features.push(vectorize_outer(&job.features, &server.features)?);
            }
        }
        let means = match &rewards {
            RewardModel::Bilinear(env) => {
                if env.dim != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        actual: env.dim,
                    });
                }
                jobs.iter()
                    .map(|j| {
                        servers
                            .iter()
                            .map(|s| env.mean_reward(&j.features, &s.features))
                            .collect()
                    })
                    .collect()
            }
            RewardModel::Table { means, variances, .. } => {
                let shape_ok = means.len() == jobs.len()
                    && variances.len() == jobs.len()
                    && means.iter().chain(variances).all(|r| r.len() == servers.len());
                if !shape_ok {
                    return Err(Error::InvalidConfig(format!(
                        "reward table must be {}x{}",
                        jobs.len(),
                        servers.len()
                    )));
                }
                means.clone()
            }
        };
        let scenario = Self {
            jobs,
            servers,
            rewards,
            config,
            dim,
            features,
            means,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    fn validate(&self) -> Result<()> {
        let a = self.bound();
        let cfg = &self.config;
        if !(a > 0.0) || !a.is_finite() {
            return Err(Error::InvalidConfig(format!("bound a = {a} must be > 0")));
        }
        if !(cfg.gamma > a) {
            return Err(Error::InvalidConfig(format!("gamma = {} must exceed a = {a}", cfg.gamma)));
        }
        if cfg.horizon == 0 {
            return Err(Error::InvalidConfig("horizon must be positive".into()));
        }
        if let Some(v) = cfg.v {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("V = {v} must be > 0")));
            }
        }
        if let Some(z) = cfg.zeta {
            if !(z > 0.0) || !z.is_finite() {
                return Err(Error::InvalidConfig(format!("zeta = {z} must be > 0")));
            }
        }
        if !(cfg.switch_threshold >= 0.0) {
            return Err(Error::InvalidConfig("switch threshold must be >= 0".into()));
        }
        if let Some(k) = cfg.kappa {
            if !(k >= 0.0) {
                return Err(Error::InvalidConfig("kappa must be >= 0".into()));
            }
        }
        for (i, job) in self.jobs.iter().enumerate() {
            if !(job.arrival_rate > 0.0 && job.arrival_rate <= 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "job class {i}: arrival rate {} not in (0, 1]",
                    job.arrival_rate
                )));
            }
            if !(job.service_rate > 0.0 && job.service_rate <= 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "job class {i}: service rate {} not in (0, 1]",
                    job.service_rate
                )));
            }
            if job.service_rate * (cfg.horizon as f64) < 1.0 {
                return Err(Error::InvalidConfig(format!(
                    "job class {i}: mean service time exceeds the horizon"
                )));
            }
            if !(job.weight > 0.0) || !(job.holding_cost > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "job class {i}: weight and holding cost must be > 0"
                )));
            }
        }
        let lambda = self.total_arrival_rate();
        if lambda > 1.0 + 1e-12 {
            return Err(Error::InvalidConfig(format!(
                "total arrival rate {lambda} exceeds one arrival per step"
            )));
        }
        for (j, s) in self.servers.iter().enumerate() {
            if s.capacity == 0 {
                return Err(Error::InvalidConfig(format!("server class {j}: capacity must be >= 1")));
            }
            if matches!(&s.schedule, Some(v) if v.is_empty()) {
                return Err(Error::InvalidConfig(format!("server class {j}: empty schedule")));
            }
        }
        let root_a = a.sqrt();
        for (k, w) in self.features.iter().enumerate() {
            if norm2(w) > root_a * (1.0 + NORM_SLACK) {
                return Err(Error::InvalidConfig(format!(
                    "pair ({}, {}): ||w_ij|| = {} exceeds sqrt(a)",
                    k / self.servers.len(),
                    k % self.servers.len(),
                    norm2(w)
                )));
            }
        }
        if let RewardModel::Table { means, variances, .. } = &self.rewards {
            if means.iter().flatten().any(|m| !m.is_finite() || m.abs() > a) {
                return Err(Error::InvalidConfig("table means must lie in [-a, a]".into()));
            }
            if variances.iter().flatten().any(|v| !(*v >= 0.0)) {
                return Err(Error::InvalidConfig("table variances must be >= 0".into()));
            }
        }
        let (n_min, n_max) = self.capacity_range();
        if n_min == 0 {
            return Err(Error::InvalidConfig("some step has no active server".into()));
        }
        if cfg.horizon < n_max {
            return Err(Error::InvalidConfig(format!(
                "horizon {} shorter than the number of servers {n_max}",
                cfg.horizon
            )));
        }
        let load = (2.0 * lambda / self.mu_min() - self.total_rho()) / n_min as f64;
        // the boundary load of exactly one is unstable; allow for rounding in the sums
        if !(load < 1.0 - 1e-12) {
            return Err(Error::Unstable(format!(
                "(2λ/μ_min − ρ)/n_min = {load:.4} >= 1"
            )));
        }
        Ok(())
    }

    pub fn jobs(&self) -> &[JobClass] {
        &self.jobs
    }

    pub fn servers(&self) -> &[ServerClass] {
        &self.servers
    }

    pub fn rewards(&self) -> &RewardModel {
        &self.rewards
    }

    pub fn config(&self) -> &SystemConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_jobs(&self) -> usize {
        self.jobs.len()
    }

    pub fn num_servers(&self) -> usize {
        self.servers.len()
    }

    pub fn bound(&self) -> f64 {
        self.rewards.bound()
    }

    pub fn feature(&self, i: usize, j: usize) -> &[f64] {
        &self.features[i * self.servers.len() + j]
    }

    pub fn mean_reward(&self, i: usize, j: usize) -> Result<f64> {
        if i >= self.jobs.len() {
            return Err(Error::UnknownClass(i));
        }
        if j >= self.servers.len() {
            return Err(Error::UnknownClass(j));
        }
        Ok(self.means[i][j])
    }

    /// True mean rewards `r_ij`, one row per job class.
    pub fn mean_matrix(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn sample_reward<R: Rng + ?Sized>(&self, i: usize, j: usize, rng: &mut R) -> f64 {
        match &self.rewards {
            RewardModel::Bilinear(env) => {
                env.sample_reward(&self.jobs[i].features, &self.servers[j].features, rng)
            }
            RewardModel::Table { means, variances, .. } => {
                let sd = variances[i][j].sqrt();
                means[i][j] + NoiseLaw::Gaussian { std_dev: sd }.sample(rng)
            }
        }
    }

    pub fn kind(&self) -> ScenarioKind {
        if self.servers.iter().any(|s| s.schedule.is_some()) {
            ScenarioKind::TimeVarying
        } else if self
            .jobs
            .iter()
            .any(|j| j.service_rate != self.jobs[0].service_rate)
        {
            ScenarioKind::NonIdentical
        } else {
            ScenarioKind::Identical
        }
    }

    pub fn total_arrival_rate(&self) -> f64 {
        self.jobs.iter().map(|j| j.arrival_rate).sum()
    }

    pub fn total_rho(&self) -> f64 {
        self.jobs.iter().map(|j| j.traffic_intensity()).sum()
    }

    pub fn mu_min(&self) -> f64 {
        self.jobs.iter().map(|j| j.service_rate).fold(f64::INFINITY, f64::min)
    }

    /// Nominal capacities `n_j`.
    pub fn nominal_capacities(&self) -> Vec<usize> {
        self.servers.iter().map(|s| s.capacity).collect()
    }

    /// `(n_min, n_max)` of `n(t) = Σ_j n_j(t)` over the horizon.
    pub fn capacity_range(&self) -> (usize, usize) {
        if self.kind() != ScenarioKind::TimeVarying {
            let n = self.servers.iter().map(|s| s.capacity).sum();
            return (n, n);
        }
        (1..=self.config.horizon)
            .map(|t| self.servers.iter().map(|s| s.capacity_at(t)).sum::<usize>())
            .fold((usize::MAX, 0), |(lo, hi), n| (lo.min(n), hi.max(n)))
    }

    /// Ridge regularizer: configured value or `a · n_max`.
    pub fn zeta(&self) -> f64 {
        self.config
            .zeta
            .unwrap_or_else(|| self.bound() * self.capacity_range().1 as f64)
    }

    /// Sub-Gaussian parameter for confidence radii.
    pub fn kappa(&self) -> f64 {
        self.config.kappa.unwrap_or_else(|| self.rewards.kappa())
    }

    pub fn bound_inputs(&self, weights: &[f64]) -> BoundInputs {
        let (n_min, n_max) = self.capacity_range();
        BoundInputs {
            kind: self.kind(),
            bound: self.bound(),
            gamma: self.config.gamma,
            weights: weights.to_vec(),
            holding_costs: self.jobs.iter().map(|j| j.holding_cost).collect(),
            rho: self.jobs.iter().map(|j| j.traffic_intensity()).collect(),
            lambda: self.total_arrival_rate(),
            mu_min: self.mu_min(),
            n_min: n_min as f64,
            n_max: n_max as f64,
        }
    }

    /// Configured `V`, or the regret-optimal value for the algorithm's weights.
    pub fn resolve_v(&self, algorithm: Algorithm) -> Result<f64> {
        match self.config.v {
            Some(v) => Ok(v),
            None => bounds::recommended_v(&self.bound_inputs(&algorithm.weights(&self.jobs))),
        }
    }

    pub fn theorem_bounds(&self, algorithm: Algorithm) -> Result<TheoremBounds> {
        let v = self.resolve_v(algorithm)?;
        bounds::theorem_bounds(&self.bound_inputs(&algorithm.weights(&self.jobs)), v)
    }

    pub fn with_config(self, config: SystemConfig) -> Result<Self> {
        Scenario::new(self.jobs, self.servers, self.rewards, config)
    }

    pub fn with_holding_costs(mut self, costs: &[f64]) -> Result<Self> {
        if costs.len() != self.jobs.len() {
            return Err(Error::DimensionMismatch {
                expected: self.jobs.len(),
                actual: costs.len(),
            });
        }
        for (job, &c) in self.jobs.iter_mut().zip(costs) {
            job.holding_cost = c;
        }
        Scenario::new(self.jobs, self.servers, self.rewards, self.config)
    }

    pub fn with_schedules(mut self, schedules: Vec<Option<Vec<usize>>>) -> Result<Self> {
        if schedules.len() != self.servers.len() {
            return Err(Error::DimensionMismatch {
                expected: self.servers.len(),
                actual: schedules.len(),
            });
        }
        for (s, sched) in self.servers.iter_mut().zip(schedules) {
            s.schedule = sched;
        }
        Scenario::new(self.jobs, self.servers, self.rewards, self.config)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: ScenarioFile = toml::from_str(text)?;
        file.into_scenario()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        let file = ScenarioFile {
            config: self.config.clone(),
            generate: None,
            jobs: self.jobs.clone(),
            servers: self.servers.clone(),
            rewards: Some(self.rewards.clone()),
        };
        Ok(toml::to_string(&file)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(path, e))
    }
}

/// On-disk scenario layout. Either explicit `jobs`/`servers`/`rewards`, or a
/// `generate` table describing a random instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub config: SystemConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generate: Option<SyntheticSpec>,
    #[serde(default)]
    pub jobs: Vec<JobClass>,
    #[serde(default)]
    pub servers: Vec<ServerClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewards: Option<RewardModel>,
}

impl ScenarioFile {
    pub fn into_scenario(self) -> Result<Scenario> {
        match self.generate {
            Some(spec) => {
                let mut scenario = spec.generate(self.config)?;
                if !self.jobs.is_empty() || !self.servers.is_empty() || self.rewards.is_some() {
                    return Err(Error::InvalidConfig(
                        "'generate' cannot be combined with explicit classes".into(),
                    ));
                }
                if let Some(costs) = spec.holding_costs.clone() {
                    scenario = scenario.with_holding_costs(&costs)?;
                }
                Ok(scenario)
            }
            None => {
                let rewards = self
                    .rewards
                    .ok_or_else(|| Error::InvalidConfig("missing [rewards] table".into()))?;
                Scenario::new(self.jobs, self.servers, rewards, self.config)
            }
        }
    }
}

/// Random instance in the style of the synthetic experiments: identical
/// traffic intensities `ρ/I`, identical capacities `n/J`, uniform features
/// normalized to unit length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub job_classes: usize,
    pub server_classes: usize,
    pub dim: usize,
    pub rho: f64,
    pub servers: usize,
    pub service_rate: f64,
    pub noise_std: f64,
    pub bound: f64,
    /// Seed for features and `θ`; independent of the simulation seed.
    pub instance_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub holding_costs: Option<Vec<f64>>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            job_classes: 10,
            server_classes: 2,
            dim: 2,
            rho: 1.0,
            servers: 4,
            service_rate: 1.0,
            noise_std: 0.1,
            bound: 1.0,
            instance_seed: 2024,
            holding_costs: None,
        }
    }
}

fn random_unit<R: Rng>(rng: &mut R, dim: usize, scale: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
        let n = norm2(&v);
        if n > 1e-9 {
            return v.into_iter().map(|x| scale * x / n).collect();
        }
    }
}

impl SyntheticSpec {
    pub fn generate(&self, config: SystemConfig) -> Result<Scenario> {
        if self.job_classes == 0 || self.server_classes == 0 || self.dim == 0 {
            return Err(Error::InvalidConfig("generator sizes must be positive".into()));
        }
        if self.servers < self.server_classes {
            return Err(Error::InvalidConfig("need at least one server per class".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.instance_seed);
        // unit norms when a >= 1; otherwise shrink so ||w|| and ||θ|| stay <= sqrt(a)
        let feature_scale = self.bound.powf(0.25).min(1.0);
        let theta_scale = self.bound.sqrt().min(1.0);
        let arrival = self.rho * self.service_rate / self.job_classes as f64;
        let jobs = (0..self.job_classes)
            .map(|_| JobClass {
                features: random_unit(&mut rng, self.dim, feature_scale),
                arrival_rate: arrival,
                service_rate: self.service_rate,
                weight: 1.0,
                holding_cost: 1.0,
            })
            .collect();
        let base = self.servers / self.server_classes;
        let extra = self.servers % self.server_classes;
        let servers = (0..self.server_classes)
            .map(|j| ServerClass {
                features: random_unit(&mut rng, self.dim, feature_scale),
                capacity: base + usize::from(j < extra),
                schedule: None,
            })
            .collect();
        let theta = random_unit(&mut rng, self.dim * self.dim, theta_scale);
        let env = BilinearEnvironment::new(
            self.dim,
            theta,
            self.bound,
            NoiseLaw::Gaussian {
                std_dev: self.noise_std,
            },
        )?;
        Scenario::new(jobs, servers, RewardModel::Bilinear(env), config)
    }
}
