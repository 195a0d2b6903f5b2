//! Schedules, their validation and file formats, an exact branch-and-bound
//! oracle for small instances, and the schedule → dispatch-sequence replay.
//!
//! Solution file:
//!
//! ```text
//! solution <num_jobs> <num_machines> <makespan>
//! <start of op 0> <start of op 1> ...     one line per job, routing order
//! ```
//!
//! Reference file: one `<instance_name> <reference_makespan>` per line.

use std::fmt;
use std::fmt::Write as _;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::instances::Instance;
use crate::pdr::{pdr_rollout, PdrRule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScheduleSource {
    Oracle,
    External,
    Rollout,
}

/// Start time of every operation (flat op ids, see [`Instance::op_id`]).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    pub start: Vec<i64>,
    pub makespan: i64,
    pub source: ScheduleSource,
}

impl Schedule {
    /// Builds a schedule from start times, computing the makespan.
    pub fn from_starts(inst: &Instance, start: Vec<i64>, source: ScheduleSource) -> Self {
        let makespan = start
            .iter()
            .enumerate()
            .map(|(op, &s)| {
                let (j, k) = inst.op_coords(op);
                s + inst.proc_time(j, k) as i64
            })
            .max()
            .unwrap_or(0);
        Schedule {
            start,
            makespan,
            source,
        }
    }
}

/// First problem found by [`validate_schedule`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    Shape {
        expected: usize,
        found: usize,
    },
    NegativeStart {
        op: usize,
    },
    Precedence {
        job: usize,
        op: usize,
    },
    MachineOverlap {
        machine: usize,
        first: usize,
        second: usize,
    },
    Makespan {
        stated: i64,
        actual: i64,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Shape { expected, found } => {
                write!(f, "expected {expected} start times, found {found}")
            }
            Violation::NegativeStart { op } => write!(f, "operation {op} starts before 0"),
            Violation::Precedence { job, op } => {
                write!(f, "operation {op} of job {job} starts before its predecessor completes")
            }
            Violation::MachineOverlap { machine, first, second } => {
                write!(f, "operations {first} and {second} overlap on machine {machine}")
            }
            Violation::Makespan { stated, actual } => {
                write!(f, "stated makespan {stated} but operations complete at {actual}")
            }
        }
    }
}

/// Checks non-negative starts, job precedence, machine disjointness and the
/// stated makespan.
pub fn validate_schedule(inst: &Instance, sched: &Schedule) -> std::result::Result<(), Violation> {
    let n = inst.num_ops();
    if sched.start.len() != n {
        return Err(Violation::Shape {
            expected: n,
            found: sched.start.len(),
        });
    }
    if let Some(op) = sched.start.iter().position(|&s| s < 0) {
        return Err(Violation::NegativeStart { op });
    }
    for j in 0..inst.num_jobs() {
        for k in 1..inst.num_machines() {
            let (prev, op) = (inst.op_id(j, k - 1), inst.op_id(j, k));
            if sched.start[op] < sched.start[prev] + inst.proc_time(j, k - 1) as i64 {
                return Err(Violation::Precedence { job: j, op });
            }
        }
    }
    let mut per_machine: Vec<Vec<(i64, i64, usize)>> = vec![Vec::new(); inst.num_machines()];
    for op in 0..n {
        let (j, k) = inst.op_coords(op);
        let s = sched.start[op];
        per_machine[inst.machine(j, k)].push((s, s + inst.proc_time(j, k) as i64, op));
    }
    for (machine, ivs) in per_machine.iter_mut().enumerate() {
        ivs.sort();
        for w in ivs.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Violation::MachineOverlap {
                    machine,
                    first: w[0].2,
                    second: w[1].2,
                });
            }
        }
    }
    let actual = Schedule::from_starts(inst, sched.start.clone(), sched.source).makespan;
    if actual != sched.makespan {
        return Err(Violation::Makespan {
            stated: sched.makespan,
            actual,
        });
    }
    Ok(())
}

/// Dispatch sequence for a schedule: operations sorted by
/// `(start, machine, job)`, each emitting its job. Replaying it never
/// exceeds the schedule's makespan and reproduces semi-active schedules.
pub fn schedule_to_actions(inst: &Instance, sched: &Schedule) -> Result<Vec<usize>> {
    validate_schedule(inst, sched).map_err(Error::Validation)?;
    let mut ops: Vec<(i64, usize, usize)> = (0..inst.num_ops())
        .map(|op| {
            let (j, k) = inst.op_coords(op);
            (sched.start[op], inst.machine(j, k), j)
        })
        .collect();
    ops.sort();
    Ok(ops.into_iter().map(|(_, _, j)| j).collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExactOutcome {
    pub schedule: Schedule,
    /// False when the node budget ran out before the search completed.
    pub optimal: bool,
    pub nodes: u64,
}

/// Rough size guard: the search is only practical up to about this many
/// operations.
pub const RECOMMENDED_MAX_OPS: usize = 49;

/// Depth-first branch and bound over Giffler–Thompson dispatch decisions.
///
/// Every node fixes the next operation on the machine with the earliest
/// possible completion, branching over the conflicting operations on that
/// machine, so the search covers all active schedules (which include an
/// optimal one). Nodes are pruned with the maximum of job-chain remaining
/// work and per-machine preemptive (Jackson) bounds with heads and tails.
/// The incumbent starts from the best dispatching rule.
pub fn solve_exact(inst: &Instance, node_budget: u64) -> Result<ExactOutcome> {
    let arc = Arc::new(inst.clone());
    let mut best: Option<Schedule> = None;
    for rule in PdrRule::ALL {
        let (s, _) = pdr_rollout(arc.clone(), rule)?;
        if best.as_ref().is_none_or(|b| s.makespan < b.makespan) {
            best = Some(s);
        }
    }
    let incumbent = best.expect("at least one rule");
    let mut bnb = BranchAndBound::new(inst, incumbent.makespan, incumbent.start, node_budget);
    bnb.search(0);
    let optimal = !bnb.exhausted;
    Ok(ExactOutcome {
        schedule: Schedule {
            start: bnb.best_start,
            makespan: bnb.best,
            source: ScheduleSource::Oracle,
        },
        optimal,
        nodes: bnb.nodes,
    })
}

struct BranchAndBound<'a> {
    inst: &'a Instance,
    m: usize,
    next: Vec<usize>,
    job_ready: Vec<i64>,
    mach_ready: Vec<i64>,
    start: Vec<i64>,
    /// `work_from[j][k]`: processing time of operations `k..` of job `j`.
    work_from: Vec<Vec<i64>>,
    best: i64,
    best_start: Vec<i64>,
    nodes: u64,
    budget: u64,
    exhausted: bool,
    scratch: Vec<(i64, i64, i64)>,
}

impl<'a> BranchAndBound<'a> {
    fn new(inst: &'a Instance, best: i64, best_start: Vec<i64>, budget: u64) -> Self {
        let m = inst.num_machines();
        let work_from = (0..inst.num_jobs())
            .map(|j| {
                let mut w = vec![0; m + 1];
                for k in (0..m).rev() {
                    w[k] = w[k + 1] + inst.proc_time(j, k) as i64;
                }
                w
            })
            .collect();
        BranchAndBound {
            inst,
            m,
            next: vec![0; inst.num_jobs()],
            job_ready: vec![0; inst.num_jobs()],
            mach_ready: vec![0; m],
            start: vec![0; inst.num_ops()],
            work_from,
            best,
            best_start,
            nodes: 0,
            budget,
            exhausted: false,
            scratch: Vec::new(),
        }
    }

    fn est(&self, j: usize) -> i64 {
        let k = self.next[j];
        self.job_ready[j].max(self.mach_ready[self.inst.machine(j, k)])
    }

    fn lower_bound(&mut self) -> i64 {
        let inst = self.inst;
        let mut lb = 0;
        for j in 0..inst.num_jobs() {
            lb = lb.max(self.job_ready[j] + self.work_from[j][self.next[j]]);
        }
        for machine in 0..self.m {
            self.scratch.clear();
            for j in 0..inst.num_jobs() {
                let mut head = self.job_ready[j];
                for k in self.next[j]..self.m {
                    if inst.machine(j, k) == machine {
                        let head = head.max(self.mach_ready[machine]);
                        self.scratch
                            .push((head, inst.proc_time(j, k) as i64, self.work_from[j][k + 1]));
                        break;
                    }
                    head += inst.proc_time(j, k) as i64;
                }
            }
            if !self.scratch.is_empty() {
                lb = lb.max(jackson_preemptive_bound(&mut self.scratch));
            }
        }
        lb
    }

    fn search(&mut self, depth: usize) {
        if self.nodes >= self.budget {
            self.exhausted = true;
            return;
        }
        self.nodes += 1;
        let inst = self.inst;
        if depth == inst.num_ops() {
            let makespan = self.job_ready.iter().copied().max().unwrap_or(0);
            if makespan < self.best {
                self.best = makespan;
                self.best_start.copy_from_slice(&self.start);
            }
            return;
        }
        if self.lower_bound() >= self.best {
            return;
        }

        let mut best_ect = i64::MAX;
        let mut machine_star = 0;
        for j in 0..inst.num_jobs() {
            if self.next[j] < self.m {
                let ect = self.est(j) + inst.proc_time(j, self.next[j]) as i64;
                if ect < best_ect {
                    best_ect = ect;
                    machine_star = inst.machine(j, self.next[j]);
                }
            }
        }
        let mut conflict: Vec<(i64, i64, usize)> = (0..inst.num_jobs())
            .filter(|&j| self.next[j] < self.m && inst.machine(j, self.next[j]) == machine_star)
            .map(|j| (self.est(j), -self.work_from[j][self.next[j]], j))
            .filter(|&(est, _, _)| est < best_ect)
            .collect();
        conflict.sort_unstable();

        for (est, _, j) in conflict {
            let k = self.next[j];
            let op = inst.op_id(j, k);
            let p = inst.proc_time(j, k) as i64;
            let (saved_job, saved_mach) = (self.job_ready[j], self.mach_ready[machine_star]);
            self.start[op] = est;
            self.job_ready[j] = est + p;
            self.mach_ready[machine_star] = est + p;
            self.next[j] += 1;
            self.search(depth + 1);
            self.next[j] -= 1;
            self.job_ready[j] = saved_job;
            self.mach_ready[machine_star] = saved_mach;
            if self.exhausted {
                return;
            }
        }
    }
}

/// Makespan lower bound of one machine from Jackson's preemptive schedule:
/// operations `(head, processing, tail)` run preemptively, always the
/// released one with the largest tail; the bound is the largest
/// `completion + tail`.
fn jackson_preemptive_bound(ops: &mut [(i64, i64, i64)]) -> i64 {
    ops.sort_unstable();
    let mut remaining: Vec<i64> = ops.iter().map(|o| o.1).collect();
    let mut left = ops.len();
    let mut t = ops[0].0;
    let mut bound = 0;
    while left > 0 {
        let mut pick: Option<usize> = None;
        let mut next_release = i64::MAX;
        for (i, &(r, _, q)) in ops.iter().enumerate() {
            if remaining[i] == 0 {
                continue;
            }
            if r <= t {
                if pick.is_none_or(|p| q > ops[p].2) {
                    pick = Some(i);
                }
            } else {
                next_release = next_release.min(r);
            }
        }
        match pick {
            None => t = next_release,
            Some(i) => {
                let run = remaining[i].min(next_release.saturating_sub(t));
                t += run;
                remaining[i] -= run;
                if remaining[i] == 0 {
                    left -= 1;
                    bound = bound.max(t + ops[i].2);
                }
            }
        }
    }
    bound
}

/// Text form of a schedule in the solution file format.
pub fn write_solution(inst: &Instance, sched: &Schedule) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "solution {} {} {}",
        inst.num_jobs(),
        inst.num_machines(),
        sched.makespan
    );
    for j in 0..inst.num_jobs() {
        let row: Vec<String> = (0..inst.num_machines())
            .map(|k| sched.start[inst.op_id(j, k)].to_string())
            .collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    out
}

/// Parses a solution file for `inst`. Only the shape is checked here; use
/// [`validate_schedule`] for feasibility.
pub fn parse_solution(inst: &Instance, text: &str) -> Result<Schedule> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let (hl, header) = lines.next().ok_or_else(|| Error::parse(1, "empty solution file"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 || fields[0] != "solution" {
        return Err(Error::parse(
            hl,
            "header must be `solution num_jobs num_machines makespan`",
        ));
    }
    let num = |s: &str| -> Result<i64> {
        s.parse::<i64>()
            .map_err(|_| Error::parse(hl, format!("`{s}` is not an integer")))
    };
    let (nj, nm, makespan) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if nj != inst.num_jobs() as i64 || nm != inst.num_machines() as i64 {
        return Err(Error::parse(
            hl,
            format!(
                "solution is {nj}x{nm} but the instance is {}x{}",
                inst.num_jobs(),
                inst.num_machines()
            ),
        ));
    }
    let mut start = vec![0; inst.num_ops()];
    for j in 0..inst.num_jobs() {
        let (ln, line) = lines
            .next()
            .ok_or_else(|| Error::parse(hl, format!("missing start times for job {j}")))?;
        let row = line
            .split_whitespace()
            .map(|t| {
                t.parse::<i64>()
                    .map_err(|_| Error::parse(ln, format!("`{t}` is not an integer")))
            })
            .collect::<Result<Vec<_>>>()?;
        if row.len() != inst.num_machines() {
            return Err(Error::parse(
                ln,
                format!("expected {} start times, found {}", inst.num_machines(), row.len()),
            ));
        }
        for (k, s) in row.into_iter().enumerate() {
            start[inst.op_id(j, k)] = s;
        }
    }
    if let Some((ln, _)) = lines.next() {
        return Err(Error::parse(ln, "unexpected content after the last job line"));
    }
    Ok(Schedule {
        start,
        makespan,
        source: ScheduleSource::External,
    })
}

/// Parses `<name> <makespan>` lines; `#` comments and blank lines are ignored.
pub fn parse_references(text: &str) -> Result<Vec<(String, i64)>> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(ln, l)| {
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() != 2 {
                return Err(Error::parse(ln, "expected `instance_name reference_makespan`"));
            }
            let c = f[1]
                .parse::<i64>()
                .map_err(|_| Error::parse(ln, format!("`{}` is not an integer", f[1])))?;
            Ok((f[0].to_string(), c))
        })
        .collect()
}

pub fn write_references(refs: &[(String, i64)]) -> String {
    refs.iter().map(|(n, c)| format!("{n} {c}\n")).collect()
}
