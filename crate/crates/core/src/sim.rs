//! Discrete-time queueing simulation driven by a learning or baseline policy.
//!
//! Each step runs, in order: estimate refresh, allocation solve over the
//! nonempty classes, randomized slot assignment, reward observation, learner
//! update, departures, arrivals for the next step and metrics.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::alloc::{self, Allocation, AllocationProblem, SolverOptions};
use crate::bandit::{optimistic_index, truncated_estimate, ConfidenceParams, RegularizedDesign, SwitchState};
use crate::error::{Error, Result};
use crate::model::{time_varying_capacity, Algorithm, JobClass, RewardModel};
use crate::oracle::{self, OracleProblem};
use crate::scenario::Scenario;

/// Largest tolerated per-slot selection mass.
const SLOT_MASS_TOL: f64 = 1e-9;

pub type JobId = u64;

/// One server slot at one step, with the job it served, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentRecord {
    pub t: usize,
    pub server_class: usize,
    pub slot: usize,
    pub job: Option<JobId>,
    pub job_class: Option<usize>,
    pub reward: Option<f64>,
}

/// Jobs waiting per class, in arrival order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Queues {
    classes: Vec<Vec<JobId>>,
    next_id: JobId,
}

impl Queues {
    pub fn new(num_classes: usize) -> Self {
        Self {
            classes: vec![Vec::new(); num_classes],
            next_id: 0,
        }
    }

    pub fn len(&self, class: usize) -> usize {
        self.classes[class].len()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.classes.iter().map(Vec::len).collect()
    }

    pub fn total(&self) -> usize {
        self.classes.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    pub fn jobs(&self, class: usize) -> &[JobId] {
        &self.classes[class]
    }

    pub fn push(&mut self, class: usize) -> JobId {
        let id = self.next_id;
        self.next_id += 1;
        self.classes[class].push(id);
        id
    }

    /// Remove the given jobs; returns how many left each class.
    pub fn remove(&mut self, departed: &[(JobId, usize)]) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for &(_, class) in departed {
            counts[class] += 1;
        }
        for (class, jobs) in self.classes.iter_mut().enumerate() {
            if counts[class] > 0 {
                jobs.retain(|id| !departed.iter().any(|(d, c)| *c == class && d == id));
            }
        }
        counts
    }
}

/// Assign every slot of every server class independently: class `i` with
/// probability `y_ij / n_j`, then a uniformly random waiting job of that class.
///
/// `y` has one row per entry of `active`.
pub fn randomized_allocation<R: Rng + ?Sized>(
    t: usize,
    y: &[Vec<f64>],
    active: &[usize],
    queues: &Queues,
    capacities: &[usize],
    rng: &mut R,
) -> Result<Vec<AssignmentRecord>> {
    if y.len() != active.len() {
        return Err(Error::DimensionMismatch {
            expected: active.len(),
            actual: y.len(),
        });
    }
    let mut records = Vec::with_capacity(capacities.iter().sum());
    for (j, &n) in capacities.iter().enumerate() {
        if n == 0 {
            continue;
        }
        let probs: Vec<f64> = y.iter().map(|row| row[j].max(0.0) / n as f64).collect();
        let mass: f64 = probs.iter().sum();
        if mass > 1.0 + SLOT_MASS_TOL {
            return Err(Error::InfeasibleAllocation(mass));
        }
        for slot in 0..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut chosen = None;
            for (k, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    chosen = Some(active[k]);
                    break;
                }
            }
            let (job, job_class) = match chosen {
                Some(class) if queues.len(class) > 0 => {
                    let jobs = queues.jobs(class);
                    (Some(jobs[rng.random_range(0..jobs.len())]), Some(class))
                }
                _ => (None, None),
            };
            records.push(AssignmentRecord {
                t,
                server_class: j,
                slot,
                job,
                job_class,
                reward: None,
            });
        }
    }
    Ok(records)
}

/// One Bernoulli(μ) completion trial per assignment; a job departs when any
/// of its trials succeeds. Returns `(job, class)` pairs, each at most once.
pub fn departures<R: Rng + ?Sized>(
    assignments: &[AssignmentRecord],
    jobs: &[JobClass],
    rng: &mut R,
) -> Vec<(JobId, usize)> {
    let mut departed: Vec<(JobId, usize)> = Vec::new();
    for rec in assignments {
        let (Some(job), Some(class)) = (rec.job, rec.job_class) else {
            continue;
        };
        let success = rng.random_bool(jobs[class].service_rate);
        if success && !departed.iter().any(|(d, _)| *d == job) {
            departed.push((job, class));
        }
    }
    departed
}

/// At most one arrival: with probability `λ`, a job of class `i` chosen with
/// probability `λ_i / λ`. Returns the class, if any.
pub fn arrivals<R: Rng + ?Sized>(jobs: &[JobClass], rng: &mut R) -> Option<usize> {
    let total: f64 = jobs.iter().map(|j| j.arrival_rate).sum();
    if total <= 0.0 {
        return None;
    }
    let u: f64 = rng.random();
    if u >= total.min(1.0) {
        return None;
    }
    let mut acc = 0.0;
    for (i, job) in jobs.iter().enumerate() {
        acc += job.arrival_rate;
        if u < acc {
            return Some(i);
        }
    }
    Some(jobs.len() - 1)
}

/// Metrics of one step. Queue lengths are taken at the start of the step;
/// `arrivals` are those landing at the start of the next step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub t: usize,
    pub queues: Vec<usize>,
    pub arrivals: Vec<usize>,
    pub departures: Vec<usize>,
    pub assigned: Vec<usize>,
    pub capacities: Vec<usize>,
    pub holding_cost: f64,
    /// `Σ r_ij y_ij` over nonempty classes under true means.
    pub expected_reward: f64,
    pub realized_reward: f64,
    pub cumulative_reward: f64,
    pub regret: f64,
    pub refresh_count: usize,
    pub kkt_residual: f64,
    pub solver_converged: bool,
    pub theta_in_confidence: Option<bool>,
}

impl StepMetrics {
    pub fn queue_total(&self) -> usize {
        self.queues.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    pub policy: Algorithm,
    pub seed: u64,
    pub horizon: usize,
    pub v: f64,
    pub oracle_value: f64,
    /// `A(1)`, the arrivals forming the initial queue.
    pub initial_arrivals: Vec<usize>,
    pub steps: Vec<StepMetrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub policy: Algorithm,
    pub seed: u64,
    pub horizon: usize,
    pub v: f64,
    pub oracle_value: f64,
    pub final_regret: f64,
    pub cumulative_reward: f64,
    pub mean_queue: f64,
    /// Mean total queue over `t ∈ [T/2, T]`.
    pub mean_queue_second_half: f64,
    pub mean_holding_cost: f64,
    pub refresh_count: usize,
    pub unconverged_steps: usize,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 { 0.0 } else { sum / n as f64 }
}

impl MetricsLog {
    pub fn summary(&self) -> Summary {
        let last = self.steps.last();
        let half = self.horizon / 2;
        Summary {
            policy: self.policy,
            seed: self.seed,
            horizon: self.horizon,
            v: self.v,
            oracle_value: self.oracle_value,
            final_regret: last.map_or(0.0, |s| s.regret),
            cumulative_reward: last.map_or(0.0, |s| s.cumulative_reward),
            mean_queue: mean(self.steps.iter().map(|s| s.queue_total() as f64)),
            mean_queue_second_half: mean(
                self.steps.iter().filter(|s| s.t >= half).map(|s| s.queue_total() as f64),
            ),
            mean_holding_cost: mean(self.steps.iter().map(|s| s.holding_cost)),
            refresh_count: last.map_or(0, |s| s.refresh_count),
            unconverged_steps: self.steps.iter().filter(|s| !s.solver_converged).count(),
        }
    }

    /// Time-averaged queue length per class.
    pub fn mean_class_queues(&self) -> Vec<f64> {
        let classes = self.initial_arrivals.len();
        (0..classes)
            .map(|i| mean(self.steps.iter().map(|s| s.queues[i] as f64)))
            .collect()
    }

    /// Exact queue balance and capacity caps at every step.
    pub fn check_invariants(&self) -> Result<()> {
        let mut expected = self.initial_arrivals.clone();
        for s in &self.steps {
            if s.queues != expected {
                return Err(Error::InvalidInput(format!(
                    "queue balance broken at t = {}: {:?} vs {:?}",
                    s.t, s.queues, expected
                )));
            }
            for (j, (&a, &n)) in s.assigned.iter().zip(&s.capacities).enumerate() {
                if a > n {
                    return Err(Error::InvalidInput(format!(
                        "server class {j} has {a} assignments over capacity {n} at t = {}",
                        s.t
                    )));
                }
            }
            expected = s
                .queues
                .iter()
                .zip(&s.arrivals)
                .zip(&s.departures)
                .map(|((q, a), d)| {
                    (q + a).checked_sub(*d).ok_or_else(|| {
                        Error::InvalidInput(format!("more departures than jobs at t = {}", s.t))
                    })
                })
                .collect::<Result<_>>()?;
        }
        Ok(())
    }

    pub fn header(num_jobs: usize, num_servers: usize) -> Vec<String> {
        let mut h: Vec<String> = [
            "t",
            "queue_total",
            "holding_cost",
            "expected_reward",
            "realized_reward",
            "cumulative_reward",
            "regret",
            "refresh_count",
            "kkt_residual",
            "solver_converged",
            "theta_in_confidence",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        h.extend((0..num_jobs).map(|i| format!("q_{i}")));
        h.extend((0..num_jobs).map(|i| format!("a_{i}")));
        h.extend((0..num_jobs).map(|i| format!("d_{i}")));
        h.extend((0..num_servers).map(|j| format!("assigned_{j}")));
        h.extend((0..num_servers).map(|j| format!("n_{j}")));
        h
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let num_jobs = self.initial_arrivals.len();
        let num_servers = self.steps.first().map_or(0, |s| s.capacities.len());
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::header(num_jobs, num_servers))?;
        for s in &self.steps {
            let mut rec = vec![
                s.t.to_string(),
                s.queue_total().to_string(),
                s.holding_cost.to_string(),
                s.expected_reward.to_string(),
                s.realized_reward.to_string(),
                s.cumulative_reward.to_string(),
                s.regret.to_string(),
                s.refresh_count.to_string(),
                s.kkt_residual.to_string(),
                u8::from(s.solver_converged).to_string(),
                s.theta_in_confidence.map_or(String::new(), |b| u8::from(b).to_string()),
            ];
            rec.extend(s.queues.iter().map(|x| x.to_string()));
            rec.extend(s.arrivals.iter().map(|x| x.to_string()));
            rec.extend(s.departures.iter().map(|x| x.to_string()));
            rec.extend(s.assigned.iter().map(|x| x.to_string()));
            rec.extend(s.capacities.iter().map(|x| x.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("metrics", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

pub const SUMMARY_HEADER: [&str; 12] = [
    "policy",
    "seed",
    "T",
    "V",
    "oracle_value",
    "final_regret",
    "cumulative_reward",
    "mean_queue",
    "mean_queue_second_half",
    "mean_holding_cost",
    "refresh_count",
    "unconverged_steps",
];

pub fn write_summaries(path: impl AsRef<Path>, summaries: &[Summary]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SUMMARY_HEADER)?;
    for s in summaries {
        w.write_record([
            s.policy.name().to_string(),
            s.seed.to_string(),
            s.horizon.to_string(),
            s.v.to_string(),
            s.oracle_value.to_string(),
            s.final_regret.to_string(),
            s.cumulative_reward.to_string(),
            s.mean_queue.to_string(),
            s.mean_queue_second_half.to_string(),
            s.mean_holding_cost.to_string(),
            s.refresh_count.to_string(),
            s.unconverged_steps.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Per-job, per-server-class sample means with a `√(2 ln t / N)` bonus.
#[derive(Debug, Clone, Default)]
struct PerJobStats {
    /// `(count, sum)` per server class.
    jobs: HashMap<JobId, Vec<(u32, f64)>>,
}

impl PerJobStats {
    fn class_estimate(&self, jobs: &[JobId], j: usize, t: usize, bound: f64) -> f64 {
        let log_t = (t.max(1) as f64).ln();
        let total: f64 = jobs
            .iter()
            .map(|id| match self.jobs.get(id).map(|s| s[j]) {
                Some((n, sum)) if n > 0 => {
                    let n = n as f64;
                    truncated_estimate(sum / n + (2.0 * log_t / n).sqrt(), bound)
                }
                _ => bound,
            })
            .sum();
        total / jobs.len() as f64
    }

    fn observe(&mut self, job: JobId, j: usize, reward: f64, num_servers: usize) {
        let entry = self.jobs.entry(job).or_insert_with(|| vec![(0, 0.0); num_servers]);
        entry[j].0 += 1;
        entry[j].1 += reward;
    }

    fn forget(&mut self, job: JobId) {
        self.jobs.remove(&job);
    }
}

#[derive(Debug, Clone)]
enum Learner {
    Bandit {
        design: RegularizedDesign,
        params: ConfidenceParams,
        switch: Option<SwitchState>,
        refreshes: usize,
    },
    Known,
    Zero,
    PerJob(PerJobStats),
}

/// Mutable state of one run.
#[derive(Debug, Clone)]
pub struct SimState {
    pub t: usize,
    pub queues: Queues,
    rng: ChaCha8Rng,
    learner: Learner,
    /// Previous allocation on the full class grid, for warm starts.
    last_y: Vec<Vec<f64>>,
    cumulative_reward: f64,
}

pub struct Simulator<'a> {
    scenario: &'a Scenario,
    policy: Algorithm,
    horizon: usize,
    weights: Vec<f64>,
    v: f64,
    oracle_value: f64,
    solver: SolverOptions,
    state: SimState,
    log: MetricsLog,
}

impl<'a> Simulator<'a> {
    pub fn new(scenario: &'a Scenario, policy: Algorithm, horizon: usize, seed: u64) -> Result<Self> {
        let v = scenario.resolve_v(policy)?;
        let weights = policy.weights(scenario.jobs());
        let oracle_value = oracle_value(scenario)?;
        let (ni, nj) = (scenario.num_jobs(), scenario.num_servers());
        let learner = match policy {
            Algorithm::Sabr | Algorithm::WSabr | Algorithm::SwitchingSabr => {
                let zeta = scenario.zeta();
                let switch = match policy {
                    Algorithm::SwitchingSabr => Some(SwitchState::new(scenario.config().switch_threshold)?),
                    _ => None,
                };
                Learner::Bandit {
                    design: RegularizedDesign::new(scenario.dim() * scenario.dim(), zeta)?,
                    params: ConfidenceParams {
                        kappa: scenario.kappa(),
                        horizon: horizon.max(1),
                        zeta,
                        feature_dim: scenario.dim(),
                    },
                    switch,
                    refreshes: 0,
                }
            }
            Algorithm::OracleInformed => Learner::Known,
            Algorithm::NoLearning => Learner::Zero,
            Algorithm::PerJobUcb => Learner::PerJob(PerJobStats::default()),
        };
        let state = SimState {
            t: 0,
            queues: Queues::new(ni),
            rng: ChaCha8Rng::seed_from_u64(seed),
            learner,
            last_y: vec![vec![0.0; nj]; ni],
            cumulative_reward: 0.0,
        };
        let log = MetricsLog {
            policy,
            seed,
            horizon,
            v,
            oracle_value,
            initial_arrivals: vec![0; ni],
            steps: Vec::with_capacity(horizon),
        };
        Ok(Self {
            scenario,
            policy,
            horizon,
            weights,
            v,
            oracle_value,
            solver: SolverOptions::default(),
            state,
            log,
        })
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn log(&self) -> &MetricsLog {
        &self.log
    }

    pub fn v(&self) -> f64 {
        self.v
    }

    /// Draw `A(1)`; must precede the first step.
    fn initial_arrivals(&mut self) {
        if let Some(i) = arrivals(self.scenario.jobs(), &mut self.state.rng) {
            self.state.queues.push(i);
            self.log.initial_arrivals[i] += 1;
        }
    }

    fn estimates(&mut self, active: &[usize], t: usize) -> Result<(Vec<Vec<f64>>, Option<bool>)> {
        let sc = self.scenario;
        let nj = sc.num_servers();
        let bound = sc.bound();
        match &mut self.state.learner {
            Learner::Known => Ok((active.iter().map(|&i| sc.mean_matrix()[i].clone()).collect(), None)),
            Learner::Zero => Ok((vec![vec![0.0; nj]; active.len()], None)),
            Learner::PerJob(stats) => Ok((
                active
                    .iter()
                    .map(|&i| {
                        let jobs = self.state.queues.jobs(i);
                        (0..nj).map(|j| stats.class_estimate(jobs, j, t, bound)).collect()
                    })
                    .collect(),
                None,
            )),
            Learner::Bandit {
                design,
                params,
                switch,
                refreshes,
            } => {
                let covered = match sc.rewards() {
                    RewardModel::Bilinear(env) => Some(design.covers(&env.theta, params, t)?),
                    RewardModel::Table { .. } => None,
                };
                let rows = match switch {
                    Some(sw) => {
                        let all: Vec<&[f64]> = (0..sc.num_jobs())
                            .flat_map(|i| (0..nj).map(move |j| (i, j)))
                            .map(|(i, j)| sc.feature(i, j))
                            .collect();
                        sw.maybe_refresh(design, params, &all, t)?;
                        *refreshes = sw.refresh_count();
                        let cached = sw.cached();
                        active
                            .iter()
                            .map(|&i| (0..nj).map(|j| truncated_estimate(cached[i * nj + j], bound)).collect())
                            .collect()
                    }
                    None => {
                        *refreshes += 1;
                        let theta = design.theta_hat();
                        let radius = params.sqrt_beta(t)?;
                        active
                            .iter()
                            .map(|&i| {
                                (0..nj)
                                    .map(|j| truncated_estimate(optimistic_index(design, &theta, sc.feature(i, j), radius), bound))
                                    .collect()
                            })
                            .collect()
                    }
                };
                Ok((rows, covered))
            }
        }
    }

    fn refresh_count(&self) -> usize {
        match &self.state.learner {
            Learner::Bandit { refreshes, .. } => *refreshes,
            _ => 0,
        }
    }

    /// Advance one step.
    pub fn step(&mut self) -> Result<&StepMetrics> {
        if self.state.t >= self.horizon {
            return Err(Error::InvalidInput(format!("horizon {} already reached", self.horizon)));
        }
        if self.state.t == 0 {
            self.initial_arrivals();
        }
        self.state.t += 1;
        let t = self.state.t;
        let sc = self.scenario;
        let (ni, nj) = (sc.num_jobs(), sc.num_servers());
        let capacities = time_varying_capacity(sc.servers(), t)?;
        let queues_before = self.state.queues.lengths();
        let active: Vec<usize> = (0..ni).filter(|&i| queues_before[i] > 0).collect();

        let (estimates, covered) = self.estimates(&active, t)?;
        let allocation = if active.is_empty() {
            Allocation::empty(nj)
        } else {
            let problem = AllocationProblem::new(
                active.iter().map(|&i| self.weights[i]).collect(),
                active.iter().map(|&i| queues_before[i] as f64).collect(),
                estimates,
                capacities.iter().map(|&n| n as f64).collect(),
                sc.config().gamma,
                self.v,
                sc.bound(),
            )?;
            let warm: Vec<Vec<f64>> = active.iter().map(|&i| self.state.last_y[i].clone()).collect();
            alloc::solve_best(&problem, &self.solver, Some(&warm))?
        };
        for row in self.state.last_y.iter_mut() {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
        for (k, &i) in active.iter().enumerate() {
            self.state.last_y[i].copy_from_slice(&allocation.y[k]);
        }
        let expected_reward: f64 = active
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                allocation.y[k]
                    .iter()
                    .zip(&sc.mean_matrix()[i])
                    .map(|(y, r)| y * r)
                    .sum::<f64>()
            })
            .sum();

        let mut records = randomized_allocation(t, &allocation.y, &active, &self.state.queues, &capacities, &mut self.state.rng)?;
        let mut realized = 0.0;
        let mut assigned = vec![0; nj];
        for rec in records.iter_mut() {
            if let Some(i) = rec.job_class {
                let xi = sc.sample_reward(i, rec.server_class, &mut self.state.rng);
                rec.reward = Some(xi);
                realized += xi;
                assigned[rec.server_class] += 1;
            }
        }
        match &mut self.state.learner {
            Learner::Bandit { design, .. } => {
                for rec in &records {
                    if let (Some(i), Some(xi)) = (rec.job_class, rec.reward) {
                        design.update(sc.feature(i, rec.server_class), xi)?;
                    }
                }
            }
            Learner::PerJob(stats) => {
                for rec in &records {
                    if let (Some(job), Some(xi)) = (rec.job, rec.reward) {
                        stats.observe(job, rec.server_class, xi, nj);
                    }
                }
            }
            Learner::Known | Learner::Zero => {}
        }

        let departed = departures(&records, sc.jobs(), &mut self.state.rng);
        let departed_counts = self.state.queues.remove(&departed);
        if let Learner::PerJob(stats) = &mut self.state.learner {
            for (job, _) in &departed {
                stats.forget(*job);
            }
        }
        let mut arrived = vec![0; ni];
        if let Some(i) = arrivals(sc.jobs(), &mut self.state.rng) {
            self.state.queues.push(i);
            arrived[i] += 1;
        }

        self.state.cumulative_reward += expected_reward;
        let holding_cost = queues_before
            .iter()
            .zip(sc.jobs())
            .map(|(&q, job)| q as f64 * job.holding_cost)
            .sum();
        let metrics = StepMetrics {
            t,
            queues: queues_before,
            arrivals: arrived,
            departures: departed_counts,
            assigned,
            capacities,
            holding_cost,
            expected_reward,
            realized_reward: realized,
            cumulative_reward: self.state.cumulative_reward,
            regret: t as f64 * self.oracle_value - self.state.cumulative_reward,
            refresh_count: self.refresh_count(),
            kkt_residual: allocation.kkt_residual,
            solver_converged: allocation.converged,
            theta_in_confidence: covered,
        };
        self.log.steps.push(metrics);
        Ok(self.log.steps.last().expect("just pushed"))
    }

    pub fn run(mut self) -> Result<MetricsLog> {
        while self.state.t < self.horizon {
            self.step()?;
        }
        Ok(self.log)
    }

    pub fn policy(&self) -> Algorithm {
        self.policy
    }
}

/// Per-step oracle reward on nominal capacities.
pub fn oracle_value(scenario: &Scenario) -> Result<f64> {
    let problem = OracleProblem::new(
        scenario.jobs().iter().map(|j| j.traffic_intensity()).collect(),
        scenario.nominal_capacities().iter().map(|&n| n as f64).collect(),
        scenario.mean_matrix().to_vec(),
    )?;
    Ok(oracle::solve_oracle(&problem)?.value)
}

/// Simulate `horizon` steps of `policy`; deterministic given `seed`.
pub fn run(scenario: &Scenario, policy: Algorithm, horizon: usize, seed: u64) -> Result<MetricsLog> {
    Simulator::new(scenario, policy, horizon, seed)?.run()
}

/// SplitMix64 mix of `(master, index)`, giving independent run seeds.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Every `(policy, repetition)` pair, run in parallel. Repetition `k` uses
/// seed `derive_seed(master_seed, k)` for every policy.
pub fn sweep(
    scenario: &Scenario,
    policies: &[Algorithm],
    repetitions: usize,
    horizon: usize,
    master_seed: u64,
) -> Result<Vec<MetricsLog>> {
    let jobs: Vec<(Algorithm, u64)> = policies
        .iter()
        .flat_map(|&p| (0..repetitions as u64).map(move |k| (p, derive_seed(master_seed, k))))
        .collect();
    jobs.into_par_iter()
        .map(|(p, seed)| run(scenario, p, horizon, seed))
        .collect()
}

/// Mean and 95% normal half-width `1.96 sd / √n` across runs at each step.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub mean: Vec<f64>,
    pub half_width: Vec<f64>,
}

pub fn band(series: &[Vec<f64>]) -> Result<Band> {
    let Some(first) = series.first() else {
        return Err(Error::InvalidInput("no series to aggregate".into()));
    };
    let len = first.len();
    if series.iter().any(|s| s.len() != len) {
        return Err(Error::InvalidInput("series lengths differ".into()));
    }
    let n = series.len() as f64;
    let mut mean = vec![0.0; len];
    let mut half_width = vec![0.0; len];
    for k in 0..len {
        let m = series.iter().map(|s| s[k]).sum::<f64>() / n;
        let var = if series.len() > 1 {
            series.iter().map(|s| (s[k] - m).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        mean[k] = m;
        half_width[k] = 1.96 * var.sqrt() / n.sqrt();
    }
    Ok(Band { mean, half_width })
}

/// Named per-step series extracted from a log.
pub fn series(log: &MetricsLog, metric: &str) -> Result<Vec<f64>> {
    log.steps
        .iter()
        .map(|s| match metric {
            "regret" => Ok(s.regret),
            "queue_total" => Ok(s.queue_total() as f64),
            "holding_cost" => Ok(s.holding_cost),
            "cumulative_reward" => Ok(s.cumulative_reward),
            "expected_reward" => Ok(s.expected_reward),
            other => Err(Error::InvalidInput(format!("unknown metric '{other}'"))),
        })
        .collect()
}

pub const AGGREGATE_METRICS: [&str; 4] = ["regret", "queue_total", "holding_cost", "cumulative_reward"];

/// Long-format table `policy,t,metric,mean,ci_low,ci_high`.
pub fn write_aggregate(path: impl AsRef<Path>, logs: &[MetricsLog]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["policy", "t", "metric", "mean", "ci_low", "ci_high"])?;
    let mut policies: Vec<Algorithm> = Vec::new();
    for l in logs {
        if !policies.contains(&l.policy) {
            policies.push(l.policy);
        }
    }
    for p in policies {
        let runs: Vec<&MetricsLog> = logs.iter().filter(|l| l.policy == p).collect();
        for metric in AGGREGATE_METRICS {
            let data: Vec<Vec<f64>> = runs.iter().map(|l| series(l, metric)).collect::<Result<_>>()?;
            let b = band(&data)?;
            for (k, (m, h)) in b.mean.iter().zip(&b.half_width).enumerate() {
                w.write_record([
                    p.name().to_string(),
                    (k + 1).to_string(),
                    metric.to_string(),
                    m.to_string(),
                    (m - h).to_string(),
                    (m + h).to_string(),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ServerClass, SystemConfig};
    use crate::scenario::SyntheticSpec;

    fn scenario(horizon: usize) -> Scenario {
        SyntheticSpec::default()
            .generate(SystemConfig {
                horizon,
                ..SystemConfig::default()
            })
            .unwrap()
    }

    fn job(arrival: f64, service: f64) -> JobClass {
        JobClass {
            features: vec![1.0],
            arrival_rate: arrival,
            service_rate: service,
            weight: 1.0,
            holding_cost: 1.0,
        }
    }

    #[test]
    fn full_allocation_selects_the_only_job() {
        let mut q = Queues::new(1);
        let id = q.push(0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let recs = randomized_allocation(1, &[vec![3.0]], &[0], &q, &[3], &mut rng).unwrap();
        assert_eq!(recs.len(), 3);
        assert!(recs.iter().all(|r| r.job == Some(id)));
    }

    #[test]
    fn zero_allocation_assigns_nothing() {
        let mut q = Queues::new(2);
        q.push(0);
        q.push(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let recs = randomized_allocation(1, &[vec![0.0, 0.0], vec![0.0, 0.0]], &[0, 1], &q, &[2, 2], &mut rng).unwrap();
        assert!(recs.iter().all(|r| r.job.is_none()));
        assert_eq!(recs.len(), 4);
    }

    #[test]
    fn overfull_allocation_is_rejected() {
        let mut q = Queues::new(1);
        q.push(0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = randomized_allocation(1, &[vec![2.5]], &[0], &q, &[2], &mut rng);
        assert!(matches!(err, Err(Error::InfeasibleAllocation(_))));
    }

    #[test]
    fn selection_frequencies_match_allocation() {
        // two classes with two jobs each; class 0 gets the whole server class
        let mut q = Queues::new(2);
        let a = q.push(0);
        q.push(0);
        q.push(1);
        q.push(1);
        let n = 2usize;
        let y = [vec![2.0], vec![0.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws = 100_000;
        let mut hits = 0usize;
        let mut other_class = 0usize;
        for _ in 0..draws {
            let recs = randomized_allocation(1, &y, &[0, 1], &q, &[n], &mut rng).unwrap();
            let r = &recs[0];
            if r.job == Some(a) {
                hits += 1;
            }
            if r.job_class == Some(1) {
                other_class += 1;
            }
        }
        let p = 2.0 / (n as f64 * 2.0);
        let sd = (p * (1.0 - p) / draws as f64).sqrt();
        assert!((hits as f64 / draws as f64 - p).abs() < 3.0 * sd);
        assert_eq!(other_class, 0);
    }

    #[test]
    fn double_assignment_departure_probability() {
        let jobs = [job(0.5, 0.5)];
        let recs: Vec<AssignmentRecord> = (0..2)
            .map(|slot| AssignmentRecord {
                t: 1,
                server_class: 0,
                slot,
                job: Some(7),
                job_class: Some(0),
                reward: None,
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let trials = 100_000;
        let left = (0..trials).filter(|_| !departures(&recs, &jobs, &mut rng).is_empty()).count();
        let p = 0.75;
        let sd = (p * (1.0 - p) / trials as f64).sqrt();
        assert!((left as f64 / trials as f64 - p).abs() < 3.0 * sd);
        let sure = [job(0.5, 1.0)];
        assert_eq!(departures(&recs, &sure, &mut rng), vec![(7, 0)]);
        assert!(departures(&[], &sure, &mut rng).is_empty());
    }

    #[test]
    fn arrival_process() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let none = [JobClass { arrival_rate: 0.0, ..job(0.0, 1.0) }];
        assert!((0..1000).all(|_| arrivals(&none, &mut rng).is_none()));
        let always = [job(1.0, 1.0)];
        assert!((0..1000).all(|_| arrivals(&always, &mut rng) == Some(0)));
        let two = [job(0.3, 1.0), job(0.2, 1.0)];
        let steps = 100_000;
        let mut counts = [0usize; 2];
        for _ in 0..steps {
            if let Some(i) = arrivals(&two, &mut rng) {
                counts[i] += 1;
            }
        }
        let total = (counts[0] + counts[1]) as f64;
        let sd_total = (0.25 / steps as f64).sqrt();
        assert!((total / steps as f64 - 0.5).abs() < 3.0 * sd_total);
        let frac = counts[0] as f64 / total;
        assert!((frac - 0.6).abs() < 3.0 * (0.24 / total).sqrt());
    }

    #[test]
    fn zero_horizon_gives_empty_log() {
        let s = scenario(50);
        let log = run(&s, Algorithm::Sabr, 0, 1).unwrap();
        assert!(log.steps.is_empty());
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let s = scenario(60);
        for p in Algorithm::ALL {
            let a = run(&s, p, 60, 11).unwrap();
            let b = run(&s, p, 60, 11).unwrap();
            assert_eq!(a, b);
            a.check_invariants().unwrap();
        }
    }

    #[test]
    fn empty_step_has_zero_metrics() {
        let s = scenario(10);
        let mut sim = Simulator::new(&s, Algorithm::Sabr, 10, 3).unwrap();
        // drain any initial arrival by stepping until an empty queue is seen
        loop {
            let m = sim.step().unwrap().clone();
            if m.queue_total() == 0 {
                assert_eq!(m.expected_reward, 0.0);
                assert_eq!(m.realized_reward, 0.0);
                assert_eq!(m.departures.iter().sum::<usize>(), 0);
                assert!(m.arrivals.iter().sum::<usize>() <= 1);
                break;
            }
            if sim.state().t == 10 {
                break;
            }
        }
    }

    #[test]
    fn single_job_step_matches_closed_form() {
        let server = ServerClass {
            features: vec![1.0],
            capacity: 4,
            schedule: None,
        };
        let jobs = vec![job(1.0, 1.0)];
        let rewards = RewardModel::Table {
            bound: 1.0,
            means: vec![vec![0.2]],
            variances: vec![vec![0.0]],
        };
        let config = SystemConfig {
            v: Some(0.05),
            horizon: 5,
            ..SystemConfig::default()
        };
        let s = Scenario::new(jobs, vec![server], rewards, config).unwrap();
        let mut sim = Simulator::new(&s, Algorithm::OracleInformed, 5, 0).unwrap();
        let m = sim.step().unwrap().clone();
        assert_eq!(m.queues, vec![1]);
        let problem = AllocationProblem::new(vec![1.0], vec![1.0], vec![vec![0.2]], vec![4.0], 1.2, 0.05, 1.0).unwrap();
        let exact = alloc::closed_form_single_server(&problem).unwrap();
        assert!((sim.state().last_y[0][0] - exact.y[0][0]).abs() < 1e-6);
        assert!((m.expected_reward - 0.2 * exact.y[0][0]).abs() < 1e-6);
    }

    #[test]
    fn constant_schedule_matches_fixed_capacity() {
        let s = scenario(80);
        let sched = s.clone().with_schedules(vec![Some(vec![2]), Some(vec![2])]).unwrap();
        let a = run(&s, Algorithm::Sabr, 80, 4).unwrap();
        let b = run(&sched, Algorithm::Sabr, 80, 4).unwrap();
        assert_eq!(a.steps, b.steps);
    }

    #[test]
    fn alternating_capacity_is_respected() {
        let s = scenario(100)
            .with_schedules(vec![Some(vec![2, 3]), Some(vec![2, 3])])
            .unwrap();
        let log = run(&s, Algorithm::Sabr, 100, 8).unwrap();
        log.check_invariants().unwrap();
        assert_eq!(log.steps[0].capacities, vec![2, 2]);
        assert_eq!(log.steps[1].capacities, vec![3, 3]);
    }

    #[test]
    fn regret_is_reference_minus_cumulative_reward() {
        let s = scenario(50);
        let log = run(&s, Algorithm::PerJobUcb, 50, 2).unwrap();
        let mut cum = 0.0;
        for st in &log.steps {
            cum += st.expected_reward;
            assert!((st.regret - (st.t as f64 * log.oracle_value - cum)).abs() < 1e-9);
        }
    }

    #[test]
    fn switching_refreshes_no_more_than_plain() {
        let s = scenario(200);
        let cfg = SystemConfig {
            switch_threshold: 1.0,
            ..s.config().clone()
        };
        let s = s.with_config(cfg).unwrap();
        let plain = run(&s, Algorithm::Sabr, 200, 1).unwrap().summary();
        let rare = run(&s, Algorithm::SwitchingSabr, 200, 1).unwrap().summary();
        assert_eq!(plain.refresh_count, 200);
        assert!(rare.refresh_count < 40);
    }

    #[test]
    fn seeds_differ_per_index() {
        let seeds: Vec<u64> = (0..100).map(|k| derive_seed(7, k)).collect();
        let mut sorted = seeds.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 100);
        assert_eq!(derive_seed(7, 3), seeds[3]);
    }

    #[test]
    fn band_formula() {
        let b = band(&[vec![1.0, 2.0], vec![3.0, 2.0]]).unwrap();
        assert_eq!(b.mean, vec![2.0, 2.0]);
        assert!((b.half_width[0] - 1.96 * 2f64.sqrt() / 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(b.half_width[1], 0.0);
        assert!(band(&[]).is_err());
    }

    #[test]
    fn metrics_csv_layout() {
        let s = scenario(5);
        let log = run(&s, Algorithm::Sabr, 5, 0).unwrap();
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("t,queue_total,holding_cost,expected_reward"));
        assert!(header.ends_with("assigned_1,n_0,n_1"));
        assert_eq!(lines.count(), 5);
        assert!(!text.contains('\r'));
    }
}
