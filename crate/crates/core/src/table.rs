//! Long-format `kind,i,j,value` tables for single problems and their solutions.
//!
//! Scalars leave `i` and `j` empty, vectors leave `j` empty.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::alloc::{Allocation, AllocationProblem};
use crate::distributed::{DistributedProblem, PenaltyKind, PenaltySpec};
use crate::error::{Error, Result};
use crate::oracle::{OracleProblem, OracleSolution};

pub const HEADER: [&str; 4] = ["kind", "i", "j", "value"];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProblemTable {
    scalars: HashMap<String, f64>,
    vectors: HashMap<String, BTreeMap<usize, f64>>,
    matrices: HashMap<String, BTreeMap<(usize, usize), f64>>,
}

fn index(field: &str, line: usize) -> Result<Option<usize>> {
    let f = field.trim();
    if f.is_empty() {
        return Ok(None);
    }
    f.parse()
        .map(Some)
        .map_err(|_| Error::InvalidInput(format!("line {line}: bad index '{f}'")))
}

impl ProblemTable {
    pub fn parse<R: std::io::Read>(input: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(input);
        let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
        if header != HEADER {
            return Err(Error::InvalidInput(format!("expected header {HEADER:?}, found {header:?}")));
        }
        let mut table = Self::default();
        for (k, rec) in reader.records().enumerate() {
            let rec = rec?;
            let line = k + 2;
            let kind = rec[0].trim().to_string();
            let value: f64 = rec[3]
                .trim()
                .parse()
                .map_err(|_| Error::InvalidInput(format!("line {line}: bad value '{}'", &rec[3])))?;
            let dup = match (index(&rec[1], line)?, index(&rec[2], line)?) {
                (None, None) => table.scalars.insert(kind, value).is_some(),
                (Some(i), None) => table.vectors.entry(kind).or_default().insert(i, value).is_some(),
                (Some(i), Some(j)) => table.matrices.entry(kind).or_default().insert((i, j), value).is_some(),
                (None, Some(_)) => return Err(Error::InvalidInput(format!("line {line}: column index without row index"))),
            };
            if dup {
                return Err(Error::InvalidInput(format!("line {line}: duplicate entry")));
            }
        }
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::parse(file)
    }

    pub fn scalar(&self, kind: &str) -> Option<f64> {
        self.scalars.get(kind).copied()
    }

    fn require_scalar(&self, kind: &str) -> Result<f64> {
        self.scalar(kind)
            .ok_or_else(|| Error::InvalidInput(format!("missing scalar '{kind}'")))
    }

    /// Dense vector `0..len`; entries must be contiguous from 0.
    pub fn vector(&self, kind: &str) -> Result<Vec<f64>> {
        let map = self
            .vectors
            .get(kind)
            .ok_or_else(|| Error::InvalidInput(format!("missing vector '{kind}'")))?;
        map.iter()
            .enumerate()
            .map(|(k, (&i, &v))| {
                if k == i {
                    Ok(v)
                } else {
                    Err(Error::InvalidInput(format!("vector '{kind}' is missing index {k}")))
                }
            })
            .collect()
    }

    fn vector_or(&self, kind: &str, len: usize, default: f64) -> Result<Vec<f64>> {
        if self.vectors.contains_key(kind) {
            let v = self.vector(kind)?;
            if v.len() != len {
                return Err(Error::DimensionMismatch {
                    expected: len,
                    actual: v.len(),
                });
            }
            Ok(v)
        } else {
            Ok(vec![default; len])
        }
    }

    /// Dense `rows × cols` matrix; every entry must be present.
    pub fn matrix(&self, kind: &str, rows: usize, cols: usize) -> Result<Vec<Vec<f64>>> {
        let map = self
            .matrices
            .get(kind)
            .ok_or_else(|| Error::InvalidInput(format!("missing matrix '{kind}'")))?;
        if map.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                actual: map.len(),
            });
        }
        (0..rows)
            .map(|i| {
                (0..cols)
                    .map(|j| {
                        map.get(&(i, j))
                            .copied()
                            .ok_or_else(|| Error::InvalidInput(format!("matrix '{kind}' is missing ({i}, {j})")))
                    })
                    .collect()
            })
            .collect()
    }

    /// Kinds: `gamma`, `v`, optional `bound` (default `max(1, max|r̂|)`),
    /// `queue[i]`, optional `weight[i]` (default 1), `capacity[j]`, `r_hat[i,j]`.
    pub fn allocation_problem(&self) -> Result<AllocationProblem> {
        let queues = self.vector("queue")?;
        let capacities = self.vector("capacity")?;
        let rewards = self.matrix("r_hat", queues.len(), capacities.len())?;
        let weights = self.vector_or("weight", queues.len(), 1.0)?;
        let bound = self
            .scalar("bound")
            .unwrap_or_else(|| rewards.iter().flatten().fold(1.0_f64, |a, r| a.max(r.abs())));
        AllocationProblem::new(
            weights,
            queues,
            rewards,
            capacities,
            self.require_scalar("gamma")?,
            self.require_scalar("v")?,
            bound,
        )
    }

    /// Kinds: `rho[i]`, `capacity[j]`, `reward[i,j]`.
    pub fn oracle_problem(&self) -> Result<OracleProblem> {
        let rho = self.vector("rho")?;
        let capacities = self.vector("capacity")?;
        let rewards = self.matrix("reward", rho.len(), capacities.len())?;
        OracleProblem::new(rho, capacities, rewards)
    }

    /// Allocation inputs with every server class given the same penalty family
    /// scaled by its capacity.
    pub fn distributed_problem(&self, penalty: PenaltyKind) -> Result<DistributedProblem> {
        let base = self.allocation_problem()?;
        let penalties = base
            .capacities()
            .iter()
            .map(|&n| PenaltySpec::new(penalty, n))
            .collect::<Result<_>>()?;
        DistributedProblem::from_allocation(&base, penalties)
    }
}

/// Accumulates `kind,i,j,value` rows for output.
#[derive(Debug, Clone, Default)]
pub struct TableWriter {
    rows: Vec<[String; 4]>,
}

impl TableWriter {
    pub fn scalar(&mut self, kind: &str, v: f64) {
        self.rows.push([kind.into(), String::new(), String::new(), v.to_string()]);
    }

    pub fn vector(&mut self, kind: &str, v: &[f64]) {
        for (i, x) in v.iter().enumerate() {
            self.rows.push([kind.into(), i.to_string(), String::new(), x.to_string()]);
        }
    }

    pub fn matrix(&mut self, kind: &str, m: &[Vec<f64>]) {
        for (i, row) in m.iter().enumerate() {
            for (j, x) in row.iter().enumerate() {
                self.rows.push([kind.into(), i.to_string(), j.to_string(), x.to_string()]);
            }
        }
    }

    pub fn write<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(HEADER)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush().map_err(|e| Error::io("table", e))?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write(std::io::BufWriter::new(file))
    }
}

pub fn allocation_table(problem: &AllocationProblem, a: &Allocation) -> TableWriter {
    let mut t = TableWriter::default();
    t.matrix("y", &a.y);
    t.vector("q", &a.q);
    t.matrix("h", &a.h);
    t.vector("row_sum", &a.row_sums());
    t.scalar("objective", problem.objective(&a.y));
    t.scalar("kkt_residual", a.kkt_residual);
    t.scalar("iterations", a.iterations as f64);
    t
}

pub fn oracle_table(s: &OracleSolution) -> TableWriter {
    let mut t = TableWriter::default();
    t.matrix("p", &s.p);
    t.matrix("z", &s.z);
    t.vector("row_potential", &s.row_potentials);
    t.vector("column_price", &s.column_prices);
    t.scalar("value", s.value);
    t.scalar("duality_gap", s.duality_gap);
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    const SOLVE: &str = "kind,i,j,value\ngamma,,,1.2\nv,,,1\nqueue,0,,1\ncapacity,0,,1\nr_hat,0,0,0.2\n";

    #[test]
    fn allocation_problem_from_table() {
        let t = ProblemTable::parse(SOLVE.as_bytes()).unwrap();
        let p = t.allocation_problem().unwrap();
        assert_eq!(p.num_classes(), 1);
        assert_eq!(p.weights(), &[1.0]);
        assert_eq!(p.bound(), 1.0);
    }

    #[test]
    fn missing_or_duplicate_entries_rejected() {
        let no_gamma = SOLVE.replace("gamma,,,1.2\n", "");
        assert!(ProblemTable::parse(no_gamma.as_bytes()).unwrap().allocation_problem().is_err());
        let dup = format!("{SOLVE}queue,0,,2\n");
        assert!(ProblemTable::parse(dup.as_bytes()).is_err());
        let gap = SOLVE.replace("queue,0,,1", "queue,1,,1");
        assert!(ProblemTable::parse(gap.as_bytes()).unwrap().allocation_problem().is_err());
        assert!(ProblemTable::parse("a,b\n".as_bytes()).is_err());
    }

    #[test]
    fn oracle_problem_from_table() {
        let text = "kind,i,j,value\nrho,0,,0.5\nrho,1,,0.5\ncapacity,0,,1\nreward,0,0,0.3\nreward,1,0,0.7\n";
        let p = ProblemTable::parse(text.as_bytes()).unwrap().oracle_problem().unwrap();
        let s = crate::oracle::solve_oracle(&p).unwrap();
        let mut buf = Vec::new();
        oracle_table(&s).write(&mut buf).unwrap();
        let out = String::from_utf8(buf).unwrap();
        assert!(out.starts_with("kind,i,j,value\n"));
        let back = ProblemTable::parse(out.as_bytes()).unwrap();
        assert!((back.scalar("value").unwrap() - 0.5).abs() < 1e-12);
    }
}
