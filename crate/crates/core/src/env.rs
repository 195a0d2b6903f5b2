//! The dispatching MDP over the disjunctive graph.
//!
//! An action picks a job; its first unscheduled operation is placed on its
//! machine at the earliest start that is at least the job's ready time and
//! fits in an idle gap of that machine (or after the last interval). The
//! per-operation completion lower bound is the actual completion for
//! scheduled operations and `clb(job predecessor) + p` otherwise, and the
//! reward is the decrease of its maximum. All of this is integer arithmetic.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::exact::{Schedule, ScheduleSource};
use crate::instances::Instance;

/// Default divisor applied to completion lower bounds in node features.
pub const DEFAULT_FEATURE_SCALE: f32 = 1000.0;

/// How an operation is placed on its machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Placement {
    /// Earliest idle gap that fits, or after the last interval.
    #[default]
    Insertion,
    /// Always after the machine's last interval.
    Append,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interval {
    pub start: i64,
    pub end: i64,
    pub op: usize,
}

/// A partial schedule built by dispatching.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DispatchState {
    inst: Arc<Instance>,
    scheduled: Vec<bool>,
    start_time: Vec<Option<i64>>,
    /// Number of scheduled operations of each job.
    next_op: Vec<usize>,
    machine_timeline: Vec<Vec<Interval>>,
    clb: Vec<i64>,
    step_count: usize,
    placement: Placement,
}

/// Graph view fed to the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// `num_ops × 2`, row-major: `[scheduled flag, clb / feature_scale]`.
    pub node_features: Vec<f32>,
    /// Job precedence edges `(pred, succ)`.
    pub conj_edges: Vec<(u32, u32)>,
    /// Machine order fixed so far, consecutive pairs `(earlier, later)`.
    pub disj_edges: Vec<(u32, u32)>,
    /// Per job: whether it still has an unscheduled operation.
    pub mask: Vec<bool>,
    /// Per job: its first unscheduled operation, or its last operation once
    /// the job is complete.
    pub candidates: Vec<u32>,
}

impl Observation {
    pub fn num_nodes(&self) -> usize {
        self.node_features.len() / 2
    }

    pub fn num_jobs(&self) -> usize {
        self.mask.len()
    }
}

/// Initial state: nothing scheduled, lower bounds are job prefix sums.
pub fn reset(inst: Arc<Instance>) -> DispatchState {
    reset_with_placement(inst, Placement::Insertion)
}

pub fn reset_with_placement(inst: Arc<Instance>, placement: Placement) -> DispatchState {
    let n = inst.num_ops();
    let mut state = DispatchState {
        scheduled: vec![false; n],
        start_time: vec![None; n],
        next_op: vec![0; inst.num_jobs()],
        machine_timeline: vec![Vec::new(); inst.num_machines()],
        clb: vec![0; n],
        step_count: 0,
        placement,
        inst,
    };
    state.clb = compute_clb(&state);
    state
}

/// Completion lower bounds recomputed from scratch.
pub fn compute_clb(state: &DispatchState) -> Vec<i64> {
    let inst = &*state.inst;
    let mut clb = vec![0; inst.num_ops()];
    for j in 0..inst.num_jobs() {
        let mut prev = 0;
        for k in 0..inst.num_machines() {
            let op = inst.op_id(j, k);
            let p = inst.proc_time(j, k) as i64;
            prev = match state.start_time[op] {
                Some(s) => s + p,
                None => prev + p,
            };
            clb[op] = prev;
        }
    }
    clb
}

impl DispatchState {
    pub fn instance(&self) -> &Instance {
        &self.inst
    }

    pub fn instance_arc(&self) -> &Arc<Instance> {
        &self.inst
    }

    pub fn scheduled(&self) -> &[bool] {
        &self.scheduled
    }

    pub fn start_time(&self, op: usize) -> Option<i64> {
        self.start_time[op]
    }

    pub fn machine_timeline(&self, machine: usize) -> &[Interval] {
        &self.machine_timeline[machine]
    }

    pub fn clb(&self) -> &[i64] {
        &self.clb
    }

    pub fn max_clb(&self) -> i64 {
        self.clb.iter().copied().max().unwrap_or(0)
    }

    pub fn placement(&self) -> Placement {
        self.placement
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    /// Scheduled operations of `job`.
    pub fn job_progress(&self, job: usize) -> usize {
        self.next_op[job]
    }

    pub fn is_terminal(&self) -> bool {
        self.step_count == self.inst.num_ops()
    }

    pub fn is_legal(&self, job: usize) -> bool {
        job < self.next_op.len() && self.next_op[job] < self.inst.num_machines()
    }

    /// Jobs with an unscheduled operation, ascending.
    pub fn legal_actions(&self) -> Vec<usize> {
        (0..self.inst.num_jobs()).filter(|&j| self.is_legal(j)).collect()
    }

    pub fn action_mask(&self) -> Vec<bool> {
        (0..self.inst.num_jobs()).map(|j| self.is_legal(j)).collect()
    }

    /// Start time the next operation of `job` would receive.
    pub fn earliest_start(&self, job: usize) -> Result<i64> {
        if !self.is_legal(job) {
            return Err(self.illegal(job));
        }
        let k = self.next_op[job];
        Ok(self.slot(job, k).0)
    }

    fn illegal(&self, job: usize) -> Error {
        let reason = if job >= self.next_op.len() {
            format!("only {} jobs", self.next_op.len())
        } else {
            "job has no unscheduled operation".to_string()
        };
        Error::InvalidAction { action: job, reason }
    }

    fn job_ready(&self, job: usize, k: usize) -> i64 {
        if k == 0 {
            0
        } else {
            let prev = self.inst.op_id(job, k - 1);
            self.start_time[prev].expect("predecessor scheduled") + self.inst.proc_time(job, k - 1) as i64
        }
    }

    /// `(start, insertion index)` of the earliest feasible slot.
    fn slot(&self, job: usize, k: usize) -> (i64, usize) {
        let ready = self.job_ready(job, k);
        let p = self.inst.proc_time(job, k) as i64;
        let timeline = &self.machine_timeline[self.inst.machine(job, k)];
        if self.placement == Placement::Append {
            let end = timeline.last().map_or(0, |iv| iv.end);
            return (ready.max(end), timeline.len());
        }
        let mut prev_end = 0;
        for (idx, iv) in timeline.iter().enumerate() {
            let cand = ready.max(prev_end);
            if cand + p <= iv.start {
                return (cand, idx);
            }
            prev_end = iv.end;
        }
        (ready.max(prev_end), timeline.len())
    }

    /// Dispatches `job` and returns the exact reward
    /// `max clb(before) - max clb(after)`.
    pub fn step(&mut self, job: usize) -> Result<i64> {
        if !self.is_legal(job) {
            return Err(self.illegal(job));
        }
        let before = self.max_clb();
        let k = self.next_op[job];
        let op = self.inst.op_id(job, k);
        let p = self.inst.proc_time(job, k) as i64;
        let (start, idx) = self.slot(job, k);
        let machine = self.inst.machine(job, k);
        self.machine_timeline[machine].insert(
            idx,
            Interval {
                start,
                end: start + p,
                op,
            },
        );
        self.start_time[op] = Some(start);
        self.scheduled[op] = true;
        self.next_op[job] += 1;
        self.step_count += 1;

        // only this job's chain can change
        let mut prev = start + p;
        self.clb[op] = prev;
        for kk in k + 1..self.inst.num_machines() {
            prev += self.inst.proc_time(job, kk) as i64;
            self.clb[self.inst.op_id(job, kk)] = prev;
        }
        Ok(before - self.max_clb())
    }

    /// Makespan of a complete schedule.
    pub fn makespan(&self) -> Result<i64> {
        if !self.is_terminal() {
            return Err(Error::State(format!(
                "makespan of a partial schedule ({} of {} operations)",
                self.step_count,
                self.inst.num_ops()
            )));
        }
        Ok(self.max_clb())
    }

    /// The schedule induced by a terminal state.
    pub fn to_schedule(&self, source: ScheduleSource) -> Result<Schedule> {
        let makespan = self.makespan()?;
        let start = self.start_time.iter().map(|s| s.expect("terminal")).collect();
        Ok(Schedule {
            start,
            makespan,
            source,
        })
    }

    /// Consecutive machine-order pairs fixed so far.
    pub fn disjunctive_edges(&self) -> Vec<(usize, usize)> {
        self.machine_timeline
            .iter()
            .flat_map(|tl| tl.windows(2).map(|w| (w[0].op, w[1].op)))
            .collect()
    }

    pub fn observe(&self, feature_scale: f32) -> Observation {
        let inst = &*self.inst;
        let n = inst.num_ops();
        let m = inst.num_machines();
        let mut node_features = Vec::with_capacity(2 * n);
        for op in 0..n {
            node_features.push(if self.scheduled[op] { 1.0 } else { 0.0 });
            node_features.push(self.clb[op] as f32 / feature_scale);
        }
        let conj_edges = conjunctive_edges(inst)
            .into_iter()
            .map(|(a, b)| (a as u32, b as u32))
            .collect();
        let disj_edges = self
            .disjunctive_edges()
            .into_iter()
            .map(|(a, b)| (a as u32, b as u32))
            .collect();
        let candidates = (0..inst.num_jobs())
            .map(|j| inst.op_id(j, self.next_op[j].min(m - 1)) as u32)
            .collect();
        Observation {
            node_features,
            conj_edges,
            disj_edges,
            mask: self.action_mask(),
            candidates,
        }
    }
}

/// Free-standing form of [`DispatchState::legal_actions`].
pub fn legal_actions(state: &DispatchState) -> Vec<usize> {
    state.legal_actions()
}

/// Job precedence edges of an instance.
pub fn conjunctive_edges(inst: &Instance) -> Vec<(usize, usize)> {
    (0..inst.num_jobs())
        .flat_map(|j| (1..inst.num_machines()).map(move |k| (j, k)))
        .map(|(j, k)| (inst.op_id(j, k - 1), inst.op_id(j, k)))
        .collect()
}

/// Kahn's algorithm over `num_nodes` nodes.
pub fn is_acyclic(num_nodes: usize, edges: &[(usize, usize)]) -> bool {
    let mut indeg = vec![0usize; num_nodes];
    let mut out = vec![Vec::new(); num_nodes];
    for &(a, b) in edges {
        out[a].push(b);
        indeg[b] += 1;
    }
    let mut stack: Vec<usize> = (0..num_nodes).filter(|&v| indeg[v] == 0).collect();
    let mut seen = 0;
    while let Some(v) = stack.pop() {
        seen += 1;
        for &w in &out[v] {
            indeg[w] -= 1;
            if indeg[w] == 0 {
                stack.push(w);
            }
        }
    }
    seen == num_nodes
}

/// Conjunctive edges plus every machine orientation fixed so far form a DAG.
pub fn oriented_graph_is_acyclic(state: &DispatchState) -> bool {
    let mut edges = conjunctive_edges(state.instance());
    edges.extend(state.disjunctive_edges());
    is_acyclic(state.instance().num_ops(), &edges)
}

/// Replays `actions` from a fresh state; returns the final state and the
/// per-step rewards.
pub fn replay(inst: Arc<Instance>, actions: &[usize]) -> Result<(DispatchState, Vec<i64>)> {
    let mut state = reset(inst);
    let rewards = actions.iter().map(|&a| state.step(a)).collect::<Result<Vec<_>>>()?;
    Ok((state, rewards))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{generate_instance, parse_taillard};

    fn inst(text: &str) -> Arc<Instance> {
        Arc::new(parse_taillard(text).unwrap())
    }

    #[test]
    fn single_operation() {
        let mut s = reset(inst("1 1\n0 7"));
        assert_eq!(s.clb(), &[7]);
        assert_eq!(s.action_mask(), vec![true]);
        assert!(s.makespan().is_err());
        assert_eq!(s.step(0).unwrap(), 0);
        assert_eq!(s.makespan().unwrap(), 7);
        assert!(s.legal_actions().is_empty());
    }

    #[test]
    fn prefix_sums_at_reset() {
        let s = reset(inst("1 2\n0 3 1 2"));
        assert_eq!(s.clb(), &[3, 5]);
    }

    #[test]
    fn two_jobs_one_machine_rewards() {
        let mut s = reset(inst("2 1\n0 3\n0 5"));
        assert_eq!(s.step(0).unwrap(), 0);
        assert_eq!(s.step(1).unwrap(), -3);
        assert_eq!(s.makespan().unwrap(), 8);
        assert_eq!(s.start_time(1), Some(3));
    }

    #[test]
    fn illegal_actions_are_rejected() {
        let mut s = reset(inst("2 1\n0 3\n0 5"));
        s.step(0).unwrap();
        let before = s.clone();
        assert!(matches!(s.step(0), Err(Error::InvalidAction { action: 0, .. })));
        assert!(matches!(s.step(5), Err(Error::InvalidAction { .. })));
        assert_eq!(s, before);
        assert_eq!(s.legal_actions(), vec![1]);
    }

    #[test]
    fn fresh_state_legal_actions_and_observation() {
        let i = Arc::new(generate_instance(3, 3, 1).unwrap());
        let s = reset(i.clone());
        assert_eq!(legal_actions(&s), vec![0, 1, 2]);
        let obs = s.observe(DEFAULT_FEATURE_SCALE);
        assert!(obs.disj_edges.is_empty());
        assert_eq!(obs.conj_edges.len(), 6);
        assert_eq!(obs.candidates, vec![0, 3, 6]);
        let max_row = (0..3).map(|j| i.job_work(j)).max().unwrap();
        assert_eq!(s.max_clb(), max_row);
    }

    #[test]
    fn feature_scaling() {
        let s = reset(inst("1 1\n0 500"));
        let obs = s.observe(1000.0);
        assert_eq!(obs.node_features, vec![0.0, 0.5]);
    }

    #[test]
    fn gap_insertion_uses_idle_time() {
        // job 0: M1 for 10 then M0 for 2; jobs 1 and 2 start on M0 with
        // 2 and 3 units, both fitting before job 0's second operation.
        let i = inst("3 2\n1 10 0 2\n0 2 1 1\n0 3 1 1");
        let mut s = reset(i);
        s.step(0).unwrap(); // M1 [0,10)
        s.step(0).unwrap(); // M0 [10,12)
        s.step(1).unwrap(); // M0 gap [0,2)
        assert_eq!(s.start_time(2), Some(0));
        s.step(2).unwrap(); // M0: gap [2,10) holds 3 units
        assert_eq!(s.start_time(4), Some(2));
        assert!(oriented_graph_is_acyclic(&s));
        let order: Vec<usize> = s.machine_timeline(0).iter().map(|iv| iv.op).collect();
        assert_eq!(order, vec![2, 4, 1]);
    }

    #[test]
    fn append_placement_never_fills_gaps() {
        let i = inst("3 2\n1 10 0 2\n0 2 1 1\n0 3 1 1");
        let mut s = reset_with_placement(i, Placement::Append);
        for a in [0, 0, 1, 2] {
            s.step(a).unwrap();
        }
        assert_eq!(s.start_time(2), Some(12));
        assert_eq!(s.start_time(4), Some(14));
    }

    #[test]
    fn terminal_disjunctive_edges_are_total_orders() {
        let i = Arc::new(generate_instance(4, 3, 9).unwrap());
        let mut s = reset(i.clone());
        while let Some(&a) = s.legal_actions().last() {
            s.step(a).unwrap();
        }
        let obs = s.observe(DEFAULT_FEATURE_SCALE);
        assert_eq!(obs.disj_edges.len(), 3 * (4 - 1));
        assert!(obs.mask.iter().all(|&m| !m));
        assert_eq!(compute_clb(&s), s.clb());
    }
}
