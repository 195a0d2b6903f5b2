//! Priority dispatching rule baselines.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::env::{reset_with_placement, DispatchState, Placement};
use crate::error::{Error, Result};
use crate::exact::{Schedule, ScheduleSource};
use crate::instances::Instance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PdrRule {
    /// Shortest processing time of the next operation.
    Spt,
    /// Most operations remaining.
    Mor,
    /// Most work remaining.
    Mwkr,
}

impl PdrRule {
    pub const ALL: [PdrRule; 3] = [PdrRule::Spt, PdrRule::Mor, PdrRule::Mwkr];

    pub fn name(self) -> &'static str {
        match self {
            PdrRule::Spt => "spt",
            PdrRule::Mor => "mor",
            PdrRule::Mwkr => "mwkr",
        }
    }
}

impl fmt::Display for PdrRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PdrRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "spt" => Ok(PdrRule::Spt),
            "mor" => Ok(PdrRule::Mor),
            "mwkr" => Ok(PdrRule::Mwkr),
            other => Err(Error::Config(format!("unknown rule `{other}` (spt|mor|mwkr)"))),
        }
    }
}

/// Job chosen by `rule`; ties go to the lowest job index.
pub fn pdr_action(state: &DispatchState, rule: PdrRule) -> Result<usize> {
    let inst = state.instance();
    let m = inst.num_machines();
    // larger key wins; max_by_key keeps the last maximum, so iterate in
    // reverse to prefer the lowest index
    let key = |j: usize| -> i64 {
        let k = state.job_progress(j);
        match rule {
            PdrRule::Spt => -(inst.proc_time(j, k) as i64),
            PdrRule::Mor => (m - k) as i64,
            PdrRule::Mwkr => (k..m).map(|kk| inst.proc_time(j, kk) as i64).sum(),
        }
    };
    state
        .legal_actions()
        .into_iter()
        .rev()
        .max_by_key(|&j| key(j))
        .ok_or_else(|| Error::State("no legal action in a terminal state".into()))
}

/// Dispatches with `rule` until every operation is scheduled.
pub fn pdr_rollout(inst: Arc<Instance>, rule: PdrRule) -> Result<(Schedule, i64)> {
    pdr_rollout_with(inst, rule, Placement::Insertion)
}

pub fn pdr_rollout_with(inst: Arc<Instance>, rule: PdrRule, placement: Placement) -> Result<(Schedule, i64)> {
    let mut state = reset_with_placement(inst, placement);
    while !state.is_terminal() {
        let a = pdr_action(&state, rule)?;
        state.step(a)?;
    }
    let sched = state.to_schedule(ScheduleSource::Rollout)?;
    let makespan = sched.makespan;
    Ok((sched, makespan))
}
