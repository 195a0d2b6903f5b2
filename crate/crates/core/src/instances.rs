//! Job shop instances: generation, and the Taillard-style text format.
//!
//! Text format (machines are 0-based, `#` starts a comment line):
//!
//! ```text
//! # optional comments
//! <num_jobs> <num_machines>
//! <m> <p> <m> <p> ...      one line per job, operations in routing order
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{below, seeded, shuffle};

/// Smallest and largest generated processing time.
pub const MIN_PROC_TIME: u32 = 1;
pub const MAX_PROC_TIME: u32 = 99;

/// A job shop instance where every job visits every machine exactly once.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Instance {
    num_jobs: usize,
    num_machines: usize,
    routing: Vec<Vec<usize>>,
    proc_times: Vec<Vec<u32>>,
}

impl Instance {
    /// Builds an instance, checking that every routing row is a permutation
    /// of the machines and every processing time is positive.
    pub fn new(routing: Vec<Vec<usize>>, proc_times: Vec<Vec<u32>>) -> Result<Self> {
        let num_jobs = routing.len();
        if num_jobs == 0 {
            return Err(Error::Dimension("instance has no jobs".into()));
        }
        let num_machines = routing[0].len();
        if num_machines == 0 {
            return Err(Error::Dimension("instance has no machines".into()));
        }
        if proc_times.len() != num_jobs {
            return Err(Error::Dimension(format!(
                "{num_jobs} routing rows but {} processing-time rows",
                proc_times.len()
            )));
        }
        for (j, (r, p)) in routing.iter().zip(&proc_times).enumerate() {
            if r.len() != num_machines || p.len() != num_machines {
                return Err(Error::Dimension(format!(
                    "job {j} has {} machines and {} times, expected {num_machines}",
                    r.len(),
                    p.len()
                )));
            }
            check_permutation(r, num_machines).map_err(|m| Error::Dimension(format!("job {j}: {m}")))?;
            if p.contains(&0) {
                return Err(Error::Dimension(format!("job {j} has a zero processing time")));
            }
        }
        Ok(Instance {
            num_jobs,
            num_machines,
            routing,
            proc_times,
        })
    }

    pub fn num_jobs(&self) -> usize {
        self.num_jobs
    }

    pub fn num_machines(&self) -> usize {
        self.num_machines
    }

    pub fn num_ops(&self) -> usize {
        self.num_jobs * self.num_machines
    }

    /// Flat operation id of the `k`-th operation of `job`.
    pub fn op_id(&self, job: usize, k: usize) -> usize {
        job * self.num_machines + k
    }

    /// `(job, position in job)` of a flat operation id.
    pub fn op_coords(&self, op: usize) -> (usize, usize) {
        (op / self.num_machines, op % self.num_machines)
    }

    pub fn machine(&self, job: usize, k: usize) -> usize {
        self.routing[job][k]
    }

    pub fn proc_time(&self, job: usize, k: usize) -> u32 {
        self.proc_times[job][k]
    }

    pub fn routing(&self) -> &[Vec<usize>] {
        &self.routing
    }

    pub fn proc_times(&self) -> &[Vec<u32>] {
        &self.proc_times
    }

    /// Total processing time of a job.
    pub fn job_work(&self, job: usize) -> i64 {
        self.proc_times[job].iter().map(|&p| p as i64).sum()
    }

    /// Same routing with every processing time multiplied by `k`.
    pub fn scaled(&self, k: u32) -> Result<Instance> {
        if k == 0 {
            return Err(Error::Dimension("scale factor must be positive".into()));
        }
        Instance::new(
            self.routing.clone(),
            self.proc_times
                .iter()
                .map(|row| row.iter().map(|&p| p * k).collect())
                .collect(),
        )
    }
}

fn check_permutation(row: &[usize], m: usize) -> std::result::Result<(), String> {
    let mut seen = vec![false; m];
    for &x in row {
        if x >= m {
            return Err(format!("machine {x} out of range 0..{m}"));
        }
        if seen[x] {
            return Err(format!("machine {x} appears twice"));
        }
        seen[x] = true;
    }
    Ok(())
}

/// Random instance: processing times uniform on `1..=99`, each routing an
/// independent uniform permutation (Fisher–Yates). The same seed always
/// yields the same instance.
pub fn generate_instance(num_jobs: usize, num_machines: usize, seed: u64) -> Result<Instance> {
    if num_jobs == 0 || num_machines == 0 {
        return Err(Error::Dimension(format!(
            "cannot generate a {num_jobs}x{num_machines} instance"
        )));
    }
    let mut rng = seeded(seed);
    let span = (MAX_PROC_TIME - MIN_PROC_TIME + 1) as usize;
    let proc_times = (0..num_jobs)
        .map(|_| {
            (0..num_machines)
                .map(|_| MIN_PROC_TIME + below(&mut rng, span) as u32)
                .collect()
        })
        .collect();
    let routing = (0..num_jobs)
        .map(|_| {
            let mut row: Vec<usize> = (0..num_machines).collect();
            shuffle(&mut rng, &mut row);
            row
        })
        .collect();
    Instance::new(routing, proc_times)
}

/// Parses the Taillard-style text format described in the module docs.
pub fn parse_taillard(text: &str) -> Result<Instance> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (hline, header) = lines.next().ok_or_else(|| Error::parse(1, "missing header line"))?;
    let dims = parse_numbers(hline, header)?;
    let [num_jobs, num_machines] = dims[..] else {
        return Err(Error::parse(hline, "header must be `num_jobs num_machines`"));
    };
    if num_jobs == 0 || num_machines == 0 {
        return Err(Error::parse(hline, "dimensions must be positive"));
    }

    let mut routing = Vec::with_capacity(num_jobs as usize);
    let mut proc_times = Vec::with_capacity(num_jobs as usize);
    for j in 0..num_jobs as usize {
        let (ln, line) = lines
            .next()
            .ok_or_else(|| Error::parse(hline, format!("expected {num_jobs} job lines, found {j}")))?;
        let nums = parse_numbers(ln, line)?;
        if nums.len() != 2 * num_machines as usize {
            return Err(Error::parse(
                ln,
                format!("expected {} numbers, found {}", 2 * num_machines, nums.len()),
            ));
        }
        let mut row_m = Vec::with_capacity(num_machines as usize);
        let mut row_p = Vec::with_capacity(num_machines as usize);
        for pair in nums.chunks(2) {
            if pair[0] >= num_machines {
                return Err(Error::parse(
                    ln,
                    format!("machine index {} out of range 0..{num_machines}", pair[0]),
                ));
            }
            if pair[1] == 0 || pair[1] > u32::MAX as u64 {
                return Err(Error::parse(ln, format!("invalid processing time {}", pair[1])));
            }
            row_m.push(pair[0] as usize);
            row_p.push(pair[1] as u32);
        }
        check_permutation(&row_m, num_machines as usize).map_err(|m| Error::parse(ln, m))?;
        routing.push(row_m);
        proc_times.push(row_p);
    }
    if let Some((ln, _)) = lines.next() {
        return Err(Error::parse(ln, "unexpected content after the last job line"));
    }
    Instance::new(routing, proc_times)
}

fn parse_numbers(line_no: usize, line: &str) -> Result<Vec<u64>> {
    line.split_whitespace()
        .map(|t| {
            t.parse::<u64>()
                .map_err(|_| Error::parse(line_no, format!("`{t}` is not a non-negative integer")))
        })
        .collect()
}

/// Canonical text form that [`parse_taillard`] inverts.
pub fn write_taillard(inst: &Instance) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{} {}", inst.num_jobs, inst.num_machines);
    for (r, p) in inst.routing.iter().zip(&inst.proc_times) {
        let row: Vec<String> = r.iter().zip(p).map(|(m, t)| format!("{m} {t}")).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    out
}

pub fn read_instance(path: &Path) -> Result<Instance> {
    parse_taillard(&std::fs::read_to_string(path)?)
}

/// Reads every `*.txt` instance in `dir`, sorted by file name. Names are
/// file stems.
pub fn read_instance_dir(dir: &Path) -> Result<Vec<(String, Instance)>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "txt"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let name = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let inst = read_instance(&p).map_err(|e| match e {
                Error::Parse { line, msg } => Error::parse(line, format!("{}: {msg}", p.display())),
                other => other,
            })?;
            Ok((name, inst))
        })
        .collect()
}
