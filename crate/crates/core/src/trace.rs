//! Cluster-trace pipeline: CSV ingestion, collection classing, machine
//! classing, inverse-CPI reward tables and scenario export.
//!
//! Input files:
//! - `collections.csv`: `collection_id,instance_index,enqueue_time,cpu_request,memory_request`
//! - `machines.csv`: `machine_id,cpu_capacity,memory_capacity,start_time`
//! - `cpi.csv`: `collection_id,instance_index,machine_id,cpi`

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{JobClass, RewardModel, ServerClass, SystemConfig};
use crate::scenario::Scenario;

pub const COLLECTIONS_HEADER: [&str; 5] = [
    "collection_id",
    "instance_index",
    "enqueue_time",
    "cpu_request",
    "memory_request",
];
pub const MACHINES_HEADER: [&str; 4] = ["machine_id", "cpu_capacity", "memory_capacity", "start_time"];
pub const CPI_HEADER: [&str; 4] = ["collection_id", "instance_index", "machine_id", "cpi"];

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub wcss: f64,
    /// Within-cluster sum of squares after every assignment pass.
    pub wcss_history: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>], labels: &mut [usize]) -> f64 {
    let mut wcss = 0.0;
    for (p, label) in points.iter().zip(labels.iter_mut()) {
        let (best, d) = centroids
            .iter()
            .enumerate()
            .map(|(k, c)| (k, sq_dist(p, c)))
            .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
        *label = best;
        wcss += d;
    }
    wcss
}

/// Lloyd's algorithm from `k` distinct seeded starting points. Empty
/// clusters keep their previous centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iters: usize) -> Result<KMeansResult> {
    let Some(dim) = points.first().map(Vec::len) else {
        return Err(Error::InvalidInput("k-means needs at least one point".into()));
    };
    if points.iter().any(|p| p.len() != dim || p.iter().any(|x| !x.is_finite())) {
        return Err(Error::InvalidInput("k-means points must be finite and equally sized".into()));
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    for idx in order {
        if centroids.len() == k {
            break;
        }
        if !centroids.iter().any(|c| c == &points[idx]) {
            centroids.push(points[idx].clone());
        }
    }
    if k == 0 || centroids.len() < k {
        return Err(Error::InvalidInput(format!(
            "k = {k} must be between 1 and the number of distinct points ({})",
            centroids.len()
        )));
    }
    let mut labels = vec![0; points.len()];
    let mut wcss = assign(points, &centroids, &mut labels);
    let mut history = vec![wcss];
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let before = labels.clone();
        wcss = assign(points, &centroids, &mut labels);
        let last = *history.last().expect("nonempty history");
        if wcss > last * (1.0 + 1e-12) + 1e-300 {
            return Err(Error::InvalidInput(format!(
                "k-means objective rose from {last} to {wcss} at iteration {iterations}"
            )));
        }
        history.push(wcss);
        if labels == before {
            break;
        }
    }
    Ok(KMeansResult {
        labels,
        centroids,
        wcss,
        wcss_history: history,
        iterations,
    })
}

/// `(cpu, mem, 1/cpu, 1/mem)` scaled to unit Euclidean norm.
pub fn build_features(cpu: f64, mem: f64) -> Result<Vec<f64>> {
    if !(cpu > 0.0 && mem > 0.0 && cpu.is_finite() && mem.is_finite()) {
        return Err(Error::InvalidInput(format!("resources must be positive, got cpu {cpu}, mem {mem}")));
    }
    let raw = [cpu, mem, 1.0 / cpu, 1.0 / mem];
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(raw.iter().map(|x| x / norm).collect())
}

/// Per-cell inverse-CPI statistics; unseen cells have mean 0.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RewardTable {
    pub means: Vec<Vec<f64>>,
    /// Population variances; a single sample gives 0.
    pub variances: Vec<Vec<f64>>,
    pub counts: Vec<Vec<usize>>,
}

/// Group `(job class, machine class, cpi)` samples into an inverse-CPI table.
pub fn estimate_reward_table(samples: &[(usize, usize, f64)], num_jobs: usize, num_machines: usize) -> Result<RewardTable> {
    let mut sum = vec![vec![0.0; num_machines]; num_jobs];
    let mut counts = vec![vec![0usize; num_machines]; num_jobs];
    for &(i, j, cpi) in samples {
        if i >= num_jobs || j >= num_machines {
            return Err(Error::UnknownClass(i.max(j)));
        }
        if !(cpi > 0.0 && cpi.is_finite()) {
            return Err(Error::InvalidInput(format!("cpi {cpi} must be positive")));
        }
        sum[i][j] += 1.0 / cpi;
        counts[i][j] += 1;
    }
    let means: Vec<Vec<f64>> = (0..num_jobs)
        .map(|i| {
            (0..num_machines)
                .map(|j| if counts[i][j] > 0 { sum[i][j] / counts[i][j] as f64 } else { 0.0 })
                .collect()
        })
        .collect();
    let mut sq = vec![vec![0.0; num_machines]; num_jobs];
    for &(i, j, cpi) in samples {
        sq[i][j] += (1.0 / cpi - means[i][j]).powi(2);
    }
    let variances = (0..num_jobs)
        .map(|i| {
            (0..num_machines)
                .map(|j| if counts[i][j] > 0 { sq[i][j] / counts[i][j] as f64 } else { 0.0 })
                .collect()
        })
        .collect();
    Ok(RewardTable {
        means,
        variances,
        counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RejectedRow {
    /// 1-based line number, counting the header as line 1.
    pub line: usize,
    pub reason: String,
}

/// Row accounting for one input file: `rows = parsed + rejected`.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct IngestReport {
    pub file: String,
    pub rows: usize,
    pub parsed: usize,
    pub rejected: Vec<RejectedRow>,
}

impl IngestReport {
    fn new(file: &str) -> Self {
        Self {
            file: file.to_string(),
            ..Self::default()
        }
    }

    fn reject(&mut self, line: usize, reason: impl Into<String>) {
        self.rejected.push(RejectedRow {
            line,
            reason: reason.into(),
        });
    }

    pub fn is_balanced(&self) -> bool {
        self.rows == self.parsed + self.rejected.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRecord {
    pub collection: String,
    pub instance: u64,
    pub enqueue_time: f64,
    pub cpu: f64,
    pub mem: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MachineRecord {
    pub machine: String,
    pub cpu: f64,
    pub mem: f64,
    pub start_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpiRecord {
    /// Line in the source file, or 0 for records built in memory.
    pub line: usize,
    pub collection: String,
    pub instance: u64,
    pub machine: String,
    pub cpi: f64,
}

/// Observation window and time step, both in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceWindow {
    pub start: f64,
    pub end: f64,
    pub step: f64,
}

impl Default for TraceWindow {
    fn default() -> Self {
        Self {
            start: 0.0,
            end: 5000.0,
            step: 5.0,
        }
    }
}

impl TraceWindow {
    /// Number of simulation steps, `⌊(end − start) / step⌋`.
    pub fn steps(&self) -> usize {
        ((self.end - self.start) / self.step).floor() as usize
    }
}

type Row = csv::StringRecord;

fn read_rows(path: &Path, header: &[&str]) -> Result<Vec<(usize, std::result::Result<Row, String>)>> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let got: Vec<String> = reader.headers()?.iter().map(|s| s.trim().to_string()).collect();
    if got != header {
        return Err(Error::InvalidInput(format!(
            "{} has header {:?}, expected {:?}",
            path.display(),
            got,
            header
        )));
    }
    let mut out = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let line = k + 2;
        out.push((
            line,
            match rec {
                Ok(r) if r.len() == header.len() => Ok(r),
                Ok(r) => Err(format!("expected {} fields, found {}", header.len(), r.len())),
                Err(e) => Err(e.to_string()),
            },
        ));
    }
    Ok(out)
}

fn num(row: &Row, k: usize, name: &str) -> std::result::Result<f64, String> {
    row[k]
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| format!("{name} '{}' is not a number", &row[k]))
}

pub fn read_collections(path: impl AsRef<Path>, window: &TraceWindow) -> Result<(Vec<InstanceRecord>, IngestReport)> {
    let path = path.as_ref();
    let mut report = IngestReport::new("collections.csv");
    let mut out = Vec::new();
    for (line, row) in read_rows(path, &COLLECTIONS_HEADER)? {
        report.rows += 1;
        let parsed = row.and_then(|r| {
            let instance = r[1].trim().parse::<u64>().map_err(|_| format!("instance_index '{}' is invalid", &r[1]))?;
            let t = num(&r, 2, "enqueue_time")?;
            let cpu = num(&r, 3, "cpu_request")?;
            let mem = num(&r, 4, "memory_request")?;
            if r[0].trim().is_empty() {
                return Err("empty collection_id".to_string());
            }
            if cpu <= 0.0 || mem <= 0.0 {
                return Err("resource requests must be positive".to_string());
            }
            if t < window.start || t >= window.end {
                return Err(format!("enqueue_time {t} outside the window"));
            }
            Ok(InstanceRecord {
                collection: r[0].trim().to_string(),
                instance,
                enqueue_time: t,
                cpu,
                mem,
            })
        });
        match parsed {
            Ok(rec) => {
                report.parsed += 1;
                out.push(rec);
            }
            Err(reason) => report.reject(line, reason),
        }
    }
    Ok((out, report))
}

/// Machines that started after the window opens are rejected.
pub fn read_machines(path: impl AsRef<Path>, window: &TraceWindow) -> Result<(Vec<MachineRecord>, IngestReport)> {
    let path = path.as_ref();
    let mut report = IngestReport::new("machines.csv");
    let mut out: Vec<MachineRecord> = Vec::new();
    for (line, row) in read_rows(path, &MACHINES_HEADER)? {
        report.rows += 1;
        let parsed = row.and_then(|r| {
            let cpu = num(&r, 1, "cpu_capacity")?;
            let mem = num(&r, 2, "memory_capacity")?;
            let start = num(&r, 3, "start_time")?;
            let id = r[0].trim().to_string();
            if id.is_empty() {
                return Err("empty machine_id".to_string());
            }
            if cpu <= 0.0 || mem <= 0.0 {
                return Err("capacities must be positive".to_string());
            }
            if start > window.start {
                return Err(format!("machine started at {start}, after the window opened"));
            }
            if out.iter().any(|m| m.machine == id) {
                return Err(format!("duplicate machine_id '{id}'"));
            }
            Ok(MachineRecord {
                machine: id,
                cpu,
                mem,
                start_time: start,
            })
        });
        match parsed {
            Ok(rec) => {
                report.parsed += 1;
                out.push(rec);
            }
            Err(reason) => report.reject(line, reason),
        }
    }
    Ok((out, report))
}

pub fn read_cpi(path: impl AsRef<Path>) -> Result<(Vec<CpiRecord>, IngestReport)> {
    let path = path.as_ref();
    let mut report = IngestReport::new("cpi.csv");
    let mut out = Vec::new();
    for (line, row) in read_rows(path, &CPI_HEADER)? {
        report.rows += 1;
        let parsed = row.and_then(|r| {
            let instance = r[1].trim().parse::<u64>().map_err(|_| format!("instance_index '{}' is invalid", &r[1]))?;
            let cpi = num(&r, 3, "cpi")?;
            if cpi <= 0.0 {
                return Err(format!("cpi {cpi} must be positive"));
            }
            Ok(CpiRecord {
                line,
                collection: r[0].trim().to_string(),
                instance,
                machine: r[2].trim().to_string(),
                cpi,
            })
        });
        match parsed {
            Ok(rec) => {
                report.parsed += 1;
                out.push(rec);
            }
            Err(reason) => report.reject(line, reason),
        }
    }
    Ok((out, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestOptions {
    pub classes: usize,
    pub seed: u64,
    pub window: TraceWindow,
    pub kmeans_max_iters: usize,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            classes: 5,
            seed: 0,
            window: TraceWindow::default(),
            kmeans_max_iters: 300,
        }
    }
}

/// Everything derived from a trace on the way to a scenario.
#[derive(Debug, Clone)]
pub struct TraceSummary {
    pub collection_ids: Vec<String>,
    /// Mean `(cpu, mem)` request per collection.
    pub collection_points: Vec<Vec<f64>>,
    pub collection_labels: Vec<usize>,
    pub class_centroids: Vec<Vec<f64>>,
    pub wcss_history: Vec<f64>,
    /// Distinct `(cpu, mem)` capacities and their machine counts.
    pub machine_classes: Vec<(f64, f64, usize)>,
    pub rewards: RewardTable,
    pub class_arrivals: Vec<usize>,
    pub median_instances: f64,
    pub horizon: usize,
    pub reports: Vec<IngestReport>,
}

/// Build the trace summary from parsed records. CPI rows that reference an
/// unknown collection or machine are rejected into `cpi_report`.
pub fn summarize(
    instances: &[InstanceRecord],
    machines: &[MachineRecord],
    cpi: &[CpiRecord],
    mut reports: Vec<IngestReport>,
    options: &IngestOptions,
) -> Result<TraceSummary> {
    if instances.is_empty() {
        return Err(Error::InvalidInput("trace has no collections in the window".into()));
    }
    if machines.is_empty() {
        return Err(Error::InvalidInput("trace has no machines".into()));
    }
    let horizon = options.window.steps();
    if horizon == 0 {
        return Err(Error::InvalidConfig("window shorter than one step".into()));
    }
    // (cpu sum, mem sum, count) per collection, ordered by id
    let mut per: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
    for r in instances {
        let e = per.entry(r.collection.clone()).or_insert((0.0, 0.0, 0));
        e.0 += r.cpu;
        e.1 += r.mem;
        e.2 += 1;
    }
    let collection_ids: Vec<String> = per.keys().cloned().collect();
    let points: Vec<Vec<f64>> = per.values().map(|(c, m, n)| vec![c / *n as f64, m / *n as f64]).collect();
    let mut sizes: Vec<usize> = per.values().map(|v| v.2).collect();
    sizes.sort_unstable();
    let median_instances = if sizes.len() % 2 == 1 {
        sizes[sizes.len() / 2] as f64
    } else {
        (sizes[sizes.len() / 2 - 1] + sizes[sizes.len() / 2]) as f64 / 2.0
    };
    let km = kmeans(&points, options.classes, options.seed, options.kmeans_max_iters)?;
    let k = options.classes;
    let mut class_arrivals = vec![0usize; k];
    for &l in &km.labels {
        class_arrivals[l] += 1;
    }
    let class_of: HashMap<&str, usize> = collection_ids
        .iter()
        .zip(&km.labels)
        .map(|(id, &l)| (id.as_str(), l))
        .collect();

    let mut machine_classes: Vec<(f64, f64, usize)> = Vec::new();
    let mut machine_class_of: HashMap<&str, usize> = HashMap::new();
    for m in machines {
        let idx = match machine_classes.iter().position(|(c, r, _)| *c == m.cpu && *r == m.mem) {
            Some(idx) => idx,
            None => {
                machine_classes.push((m.cpu, m.mem, 0));
                machine_classes.len() - 1
            }
        };
        machine_classes[idx].2 += 1;
        machine_class_of.insert(m.machine.as_str(), idx);
    }

    let cpi_report = reports
        .iter()
        .position(|r| r.file == "cpi.csv")
        .map(|k| &mut reports[k]);
    let mut samples = Vec::with_capacity(cpi.len());
    let mut orphans = Vec::new();
    for r in cpi {
        match (class_of.get(r.collection.as_str()), machine_class_of.get(r.machine.as_str())) {
            (Some(&i), Some(&j)) => samples.push((i, j, r.cpi)),
            (None, _) => orphans.push((r.line, format!("unknown collection '{}'", r.collection))),
            (_, None) => orphans.push((r.line, format!("unknown machine '{}'", r.machine))),
        }
    }
    if let Some(report) = cpi_report {
        // parsed rows that reference nothing move to the rejected list
        for (line, reason) in orphans {
            report.parsed = report.parsed.saturating_sub(1);
            report.reject(line, reason);
        }
        report.rejected.sort_by_key(|r| r.line);
    }
    let rewards = estimate_reward_table(&samples, k, machine_classes.len())?;
    Ok(TraceSummary {
        collection_ids,
        collection_points: points,
        collection_labels: km.labels,
        class_centroids: km.centroids,
        wcss_history: km.wcss_history,
        machine_classes,
        rewards,
        class_arrivals,
        median_instances,
        horizon,
        reports,
    })
}

/// Read the three trace files and summarize them.
pub fn ingest(
    collections: impl AsRef<Path>,
    machines: impl AsRef<Path>,
    cpi: impl AsRef<Path>,
    options: &IngestOptions,
) -> Result<TraceSummary> {
    let (inst, r1) = read_collections(collections, &options.window)?;
    let (mach, r2) = read_machines(machines, &options.window)?;
    let (cpis, r3) = read_cpi(cpi)?;
    summarize(&inst, &mach, &cpis, vec![r1, r2, r3], options)
}

/// Scenario with one job class per cluster, one server class per distinct
/// machine capacity pair, `μ = 1`, `λ_i = collections_i / T` and the
/// inverse-CPI table as reward source.
pub fn export_scenario(summary: &TraceSummary, base: &SystemConfig) -> Result<Scenario> {
    let t = summary.horizon as f64;
    let jobs: Vec<JobClass> = summary
        .class_centroids
        .iter()
        .zip(&summary.class_arrivals)
        .map(|(c, &count)| {
            Ok(JobClass {
                features: build_features(c[0], c[1])?,
                arrival_rate: count as f64 / t,
                service_rate: 1.0,
                weight: 1.0,
                holding_cost: 1.0,
            })
        })
        .collect::<Result<_>>()?;
    let servers: Vec<ServerClass> = summary
        .machine_classes
        .iter()
        .map(|&(cpu, mem, count)| {
            Ok(ServerClass {
                features: build_features(cpu, mem)?,
                capacity: count,
                schedule: None,
            })
        })
        .collect::<Result<_>>()?;
    let bound = summary
        .rewards
        .means
        .iter()
        .flatten()
        .fold(1.0_f64, |a, m| a.max(m.abs()));
    let config = SystemConfig {
        gamma: 1.2 * bound,
        horizon: summary.horizon,
        ..base.clone()
    };
    Scenario::new(
        jobs,
        servers,
        RewardModel::Table {
            bound,
            means: summary.rewards.means.clone(),
            variances: summary.rewards.variances.clone(),
        },
        config,
    )
}

/// Shape of a synthetic trace.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTrace {
    pub seed: u64,
    pub window: TraceWindow,
    pub collections: usize,
    pub max_instances: usize,
    /// `(cpu, mem, count)` machine types.
    pub machine_types: Vec<(f64, f64, usize)>,
    /// Machine types that never appear in `cpi.csv`.
    pub idle_machine_types: Vec<(f64, f64, usize)>,
    /// Centers of the collection request clusters.
    pub request_centers: Vec<(f64, f64)>,
    pub cpi_noise: f64,
}

impl Default for SyntheticTrace {
    fn default() -> Self {
        Self {
            seed: 0,
            window: TraceWindow::default(),
            collections: 300,
            max_instances: 6,
            machine_types: vec![(0.5, 0.5, 8), (1.0, 0.5, 6), (0.5, 1.0, 6), (1.0, 1.0, 4)],
            idle_machine_types: vec![(0.25, 2.0, 2)],
            request_centers: vec![(0.05, 0.04), (0.2, 0.1), (0.1, 0.25), (0.3, 0.3), (0.02, 0.15)],
            cpi_noise: 0.1,
        }
    }
}

/// Write schema-compatible `collections.csv`, `machines.csv` and `cpi.csv`.
pub fn gen_trace(spec: &SyntheticTrace, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let jitter = Normal::new(0.0, 0.01).expect("valid normal");
    let noise = Normal::new(0.0, spec.cpi_noise.max(0.0)).map_err(|e| Error::InvalidConfig(e.to_string()))?;

    let mut machines = csv::Writer::from_path(dir.join("machines.csv"))?;
    machines.write_record(MACHINES_HEADER)?;
    let mut ids = Vec::new();
    let mut caps = Vec::new();
    for (cpu, mem, count) in &spec.machine_types {
        for _ in 0..*count {
            let id = format!("m{}", ids.len());
            let start = spec.window.start - rng.random_range(0.0..1000.0);
            machines.write_record([id.clone(), cpu.to_string(), mem.to_string(), start.to_string()])?;
            ids.push(id);
            caps.push((*cpu, *mem));
        }
    }
    let mut idle = 0;
    for (cpu, mem, count) in &spec.idle_machine_types {
        for _ in 0..*count {
            let id = format!("idle{idle}");
            idle += 1;
            machines.write_record([id, cpu.to_string(), mem.to_string(), spec.window.start.to_string()])?;
        }
    }
    // one machine that starts late and is filtered out
    machines.write_record([
        "m_late".to_string(),
        "2".to_string(),
        "2".to_string(),
        (spec.window.start + 10.0).to_string(),
    ])?;
    machines.flush().map_err(|e| Error::io(dir, e))?;

    let mut coll = csv::Writer::from_path(dir.join("collections.csv"))?;
    coll.write_record(COLLECTIONS_HEADER)?;
    let mut cpi = csv::Writer::from_path(dir.join("cpi.csv"))?;
    cpi.write_record(CPI_HEADER)?;
    for c in 0..spec.collections {
        let id = format!("c{c}");
        let t = rng.random_range(spec.window.start..spec.window.end);
        let (cx, cy) = spec.request_centers[rng.random_range(0..spec.request_centers.len())];
        let instances = rng.random_range(1..=spec.max_instances.max(1));
        for k in 0..instances {
            let cpu = (cx + jitter.sample(&mut rng)).max(0.005);
            let mem = (cy + jitter.sample(&mut rng)).max(0.005);
            coll.write_record([id.clone(), k.to_string(), t.to_string(), cpu.to_string(), mem.to_string()])?;
            let m = rng.random_range(0..ids.len());
            // faster machines relative to the request give lower CPI
            let (mc, mm) = caps[m];
            let base = 1.0 + cpu / mc + mem / mm;
            let value = (base + noise.sample(&mut rng)).max(0.2);
            cpi.write_record([id.clone(), k.to_string(), ids[m].clone(), value.to_string()])?;
        }
    }
    coll.flush().map_err(|e| Error::io(dir, e))?;
    cpi.flush().map_err(|e| Error::io(dir, e))?;
    Ok(())
}
