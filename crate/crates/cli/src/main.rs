use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use sabr_core::alloc::{self, SolverOptions};
use sabr_core::distributed::{self, DelayedDynamics, NodeMode, PenaltyKind};
use sabr_core::oracle;
use sabr_core::plot;
use sabr_core::sim::{self, AGGREGATE_METRICS};
use sabr_core::table::{self, ProblemTable};
use sabr_core::trace::{self, IngestOptions, SyntheticTrace, TraceWindow};
use sabr_core::{Algorithm, Scenario, SystemConfig};

#[derive(Parser)]
#[command(name = "sabr", version, about = "Job-to-server scheduling with learned bilinear rewards")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one allocation problem from a `kind,i,j,value` table.
    Solve {
        #[arg(long)]
        problem: PathBuf,
        /// Output table; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = alloc::DEFAULT_TOL)]
        tol: f64,
    },
    /// Solve the known-reward transportation program.
    Oracle {
        #[arg(long)]
        problem: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one policy on a scenario and write metrics.csv and summary.csv.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        /// Defaults to the scenario's algorithm.
        #[arg(long)]
        policy: Option<Algorithm>,
        /// Defaults to the scenario's horizon.
        #[arg(long = "T")]
        horizon: Option<usize>,
        /// Defaults to the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a policy × seed grid; writes aggregate.csv, summary.csv and SVG plots.
    Sweep {
        #[arg(long)]
        scenario: PathBuf,
        /// Comma-separated policy names.
        #[arg(long, value_delimiter = ',', default_value = "sabr,per-job-ucb")]
        policies: Vec<Algorithm>,
        /// Repetitions per policy.
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        #[arg(long = "T")]
        horizon: Option<usize>,
        /// Master seed from which run seeds are derived.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate the delayed distributed allocation dynamics.
    Distsim {
        #[arg(long)]
        problem: PathBuf,
        /// `power:β`, `bounded:β:γ` or `rational`.
        #[arg(long, default_value = "power:1.0")]
        penalty: PenaltyKind,
        #[arg(long)]
        alpha: f64,
        /// `i,j,forward,backward` table; zero delays when omitted.
        #[arg(long)]
        delays: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        ticks: usize,
        #[arg(long, default_value = "job")]
        mode: NodeMode,
        /// Start at the equilibrium scaled by this factor.
        #[arg(long, default_value_t = 1.01)]
        init_scale: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn trace CSVs into a scenario file.
    Ingest {
        #[arg(long)]
        collections: PathBuf,
        #[arg(long)]
        machines: PathBuf,
        #[arg(long)]
        cpi: PathBuf,
        #[arg(long = "K", default_value_t = 5)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Window length in seconds.
        #[arg(long, default_value_t = 5000.0)]
        window: f64,
        /// Simulation step in seconds.
        #[arg(long, default_value_t = 5.0)]
        step: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic trace in the ingest schema.
    GenTrace {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 300)]
        collections: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plot one metric from metrics files; several files form a 95% band.
    Plot {
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "regret")]
        metric: String,
        #[arg(long, default_value = "run")]
        label: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_or_print(t: &table::TableWriter, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => t.save(p)?,
        None => t.write(std::io::stdout().lock())?,
    }
    Ok(())
}

fn load_scenario(path: &Path, horizon: Option<usize>) -> Result<Scenario> {
    let s = Scenario::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(match horizon {
        Some(t) => {
            let cfg = SystemConfig {
                horizon: t,
                ..s.config().clone()
            };
            s.with_config(cfg)?
        }
        None => s,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Solve { problem, out, tol } => {
            let p = ProblemTable::load(&problem)?.allocation_problem()?;
            let opts = SolverOptions {
                tol,
                ..SolverOptions::default()
            };
            let a = alloc::solve_best(&p, &opts, None)?;
            if !a.converged {
                eprintln!("warning: residual {:.3e} above tolerance {tol:.1e}", a.kkt_residual);
            }
            write_or_print(&table::allocation_table(&p, &a), out.as_deref())
        }
        Command::Oracle { problem, out } => {
            let p = ProblemTable::load(&problem)?.oracle_problem()?;
            let s = oracle::solve_oracle(&p)?;
            write_or_print(&table::oracle_table(&s), out.as_deref())
        }
        Command::Simulate {
            scenario,
            policy,
            horizon,
            seed,
            out,
        } => {
            let s = load_scenario(&scenario, horizon)?;
            let policy = policy.unwrap_or(s.config().algorithm);
            let seed = seed.unwrap_or(s.config().seed);
            let log = sim::run(&s, policy, s.config().horizon, seed)?;
            log.check_invariants()?;
            create_dir(&out)?;
            log.save_csv(out.join("metrics.csv"))?;
            let summary = log.summary();
            sim::write_summaries(out.join("summary.csv"), std::slice::from_ref(&summary))?;
            println!(
                "{policy}: T = {}, regret {:.4}, mean queue {:.3}, V = {:.4}",
                summary.horizon, summary.final_regret, summary.mean_queue, summary.v
            );
            Ok(())
        }
        Command::Sweep {
            scenario,
            policies,
            seeds,
            horizon,
            seed,
            out,
        } => {
            if policies.is_empty() || seeds == 0 {
                bail!("sweep needs at least one policy and one seed");
            }
            let s = load_scenario(&scenario, horizon)?;
            let logs = sim::sweep(&s, &policies, seeds, s.config().horizon, seed)?;
            for l in &logs {
                l.check_invariants()?;
            }
            create_dir(&out)?;
            sim::write_aggregate(out.join("aggregate.csv"), &logs)?;
            let summaries: Vec<_> = logs.iter().map(|l| l.summary()).collect();
            sim::write_summaries(out.join("summary.csv"), &summaries)?;
            plot::write_sweep_plots(&out, &logs, &AGGREGATE_METRICS[..3])?;
            for p in &policies {
                let rows: Vec<_> = summaries.iter().filter(|x| x.policy == *p).collect();
                let n = rows.len() as f64;
                println!(
                    "{p}: mean regret {:.4}, mean cumulative reward {:.4}, mean queue {:.3}",
                    rows.iter().map(|x| x.final_regret).sum::<f64>() / n,
                    rows.iter().map(|x| x.cumulative_reward).sum::<f64>() / n,
                    rows.iter().map(|x| x.mean_queue).sum::<f64>() / n,
                );
            }
            Ok(())
        }
        Command::Distsim {
            problem,
            penalty,
            alpha,
            delays,
            ticks,
            mode,
            init_scale,
            out,
        } => {
            let p = ProblemTable::load(&problem)?.distributed_problem(penalty)?;
            let (ni, nj) = (p.num_classes(), p.num_servers());
            let (forward, backward) = match &delays {
                Some(path) => DelayedDynamics::load_delays(path, ni, nj)?,
                None => (vec![vec![0; nj]; ni], vec![vec![0; nj]; ni]),
            };
            let dynamics = DelayedDynamics {
                alpha: vec![vec![alpha; nj]; ni],
                forward,
                backward,
                mode,
            };
            let eq = distributed::equilibrium_solve(&p, 1e-10, 200_000)?;
            let start: Vec<Vec<f64>> = eq.y.iter().map(|r| r.iter().map(|v| v * init_scale).collect()).collect();
            let traj = distributed::simulate_dynamics(&p, &dynamics, &start, ticks)?;
            create_dir(&out)?;
            let file = fs::File::create(out.join("trajectory.csv"))?;
            traj.write_csv(std::io::BufWriter::new(file))?;
            let mut report = String::new();
            report.push_str(&format!("equilibrium residual: {:.3e}\n", eq.residual));
            report.push_str(&format!("interior: {}\n", eq.interior));
            let dist = traj.distances(&eq);
            report.push_str(&format!("final distance: {:.3e}\n", dist.last().copied().unwrap_or(0.0)));
            match distributed::stability_check(&p, &dynamics, &eq) {
                Ok(r) => {
                    report.push_str(&format!("max margin: {:.6}\n", r.max_margin));
                    report.push_str(&format!("condition holds: {}\n", r.stable));
                    report.push_str("i,j,margin,general_threshold,specialized_threshold\n");
                    for i in 0..ni {
                        for j in 0..nj {
                            report.push_str(&format!(
                                "{i},{j},{},{},{}\n",
                                r.margins[i][j], r.general_thresholds[i][j], r.specialized_thresholds[i][j]
                            ));
                        }
                    }
                }
                Err(e) => report.push_str(&format!("stability condition not applicable: {e}\n")),
            }
            fs::write(out.join("stability.txt"), &report)?;
            print!("{report}");
            Ok(())
        }
        Command::Ingest {
            collections,
            machines,
            cpi,
            classes,
            seed,
            window,
            step,
            out,
        } => {
            let options = IngestOptions {
                classes,
                seed,
                window: TraceWindow {
                    start: 0.0,
                    end: window,
                    step,
                },
                ..IngestOptions::default()
            };
            let summary = trace::ingest(&collections, &machines, &cpi, &options)?;
            let mut stderr = std::io::stderr().lock();
            for r in &summary.reports {
                writeln!(stderr, "{}: {} rows, {} parsed, {} rejected", r.file, r.rows, r.parsed, r.rejected.len())?;
                for rej in &r.rejected {
                    writeln!(stderr, "  line {}: {}", rej.line, rej.reason)?;
                }
            }
            let scenario = trace::export_scenario(
                &summary,
                &SystemConfig {
                    seed,
                    ..SystemConfig::default()
                },
            )?;
            scenario.save(&out)?;
            println!(
                "{} job classes, {} machine classes, T = {}, median instances per collection {}",
                scenario.num_jobs(),
                scenario.num_servers(),
                summary.horizon,
                summary.median_instances
            );
            Ok(())
        }
        Command::GenTrace { seed, collections, out } => {
            let spec = SyntheticTrace {
                seed,
                collections,
                ..SyntheticTrace::default()
            };
            trace::gen_trace(&spec, &out)?;
            println!("wrote synthetic trace to {}", out.display());
            Ok(())
        }
        Command::Plot {
            inputs,
            metric,
            label,
            out,
        } => {
            plot::emit_plots(&inputs, &metric, &label, &out)?;
            Ok(())
        }
    }
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
