//! Offline datasets: expert and noisy-expert episodes, reward modes, the
//! dataset file format, and materialization into transitions.
//!
//! Episodes are stored as an instance plus its dispatch sequence; the
//! transitions are a pure function of replay. Dataset file:
//!
//! ```text
//! offld-dataset 1
//! episodes <n>
//! noisy <count>
//! reward_mode normalized|raw|scaled:<c>
//! p_noisy <p>
//! epsilon <e>
//! seed <s>|none
//! episode <i> <noisy 0|1> <expert_makespan>
//! <instance in Taillard form>
//! actions <a0> <a1> ...
//! ...
//! ```

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;

use crate::env::{reset, Observation, DEFAULT_FEATURE_SCALE};
use crate::error::{Error, Result};
use crate::exact::{schedule_to_actions, Schedule};
use crate::instances::{parse_taillard, write_taillard, Instance};
use crate::rng::{below, chance, derive_seed, seeded, Rng64};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeRecord {
    pub instance: Arc<Instance>,
    /// Dispatched job per step.
    pub actions: Vec<usize>,
    pub noisy: bool,
    /// Makespan of the expert episode this record came from.
    pub expert_makespan: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum RewardMode {
    /// Raw reward divided by the episode's expert makespan.
    #[default]
    Normalized,
    /// Raw reward times a constant.
    Scaled(f64),
    Raw,
}

impl fmt::Display for RewardMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RewardMode::Normalized => f.write_str("normalized"),
            RewardMode::Scaled(c) => write!(f, "scaled:{c}"),
            RewardMode::Raw => f.write_str("raw"),
        }
    }
}

impl FromStr for RewardMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normalized" => Ok(RewardMode::Normalized),
            "raw" => Ok(RewardMode::Raw),
            _ => {
                let c = s
                    .strip_prefix("scaled:")
                    .and_then(|c| c.parse::<f64>().ok())
                    .filter(|c| c.is_finite())
                    .ok_or_else(|| Error::Config(format!("unknown reward mode `{s}` (normalized|raw|scaled:<c>)")))?;
                Ok(RewardMode::Scaled(c))
            }
        }
    }
}

/// One `(s, a, r, s')` tuple. The next state's mask is `next_obs.mask`.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Arc<Observation>,
    pub action: usize,
    pub reward: f32,
    pub next_obs: Arc<Observation>,
    pub terminal: bool,
}

impl Transition {
    pub fn next_mask(&self) -> &[bool] {
        &self.next_obs.mask
    }
}

/// Expert episodes: one record per `(instance, schedule)` pair.
pub fn make_expert_dataset(items: &[(Arc<Instance>, Schedule)]) -> Result<Vec<EpisodeRecord>> {
    items
        .par_iter()
        .enumerate()
        .map(|(i, (inst, sched))| {
            let actions =
                schedule_to_actions(inst, sched).map_err(|e| Error::Data(format!("expert episode {i}: {e}")))?;
            Ok(EpisodeRecord {
                instance: Arc::clone(inst),
                actions,
                noisy: false,
                expert_makespan: sched.makespan,
            })
        })
        .collect()
}

/// Noisy copies of expert episodes.
///
/// Each episode is noisy with probability `p_noisy`; in a noisy episode
/// every step takes a uniform legal action with probability `epsilon` and
/// otherwise follows the expert. The expert sequence is consumed per job:
/// dispatching job `j`, by whoever chose it, uses up the first unused entry
/// of `j`, and the expert's next action is the first unused entry overall.
/// Episode `i` draws from `derive_seed(seed, i)`.
pub fn make_noisy_dataset(
    expert: &[EpisodeRecord],
    p_noisy: f64,
    epsilon: f64,
    seed: u64,
) -> Result<Vec<EpisodeRecord>> {
    for (name, p) in [("p_noisy", p_noisy), ("epsilon", epsilon)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
        }
    }
    expert
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let mut rng = seeded(derive_seed(seed, i as u64));
            if !chance(&mut rng, p_noisy) {
                return Ok(EpisodeRecord {
                    noisy: false,
                    ..rec.clone()
                });
            }
            let actions = noisy_actions(rec, epsilon, &mut rng)?;
            Ok(EpisodeRecord {
                instance: Arc::clone(&rec.instance),
                actions,
                noisy: true,
                expert_makespan: rec.expert_makespan,
            })
        })
        .collect()
}

fn noisy_actions(rec: &EpisodeRecord, epsilon: f64, rng: &mut Rng64) -> Result<Vec<usize>> {
    let mut state = reset(Arc::clone(&rec.instance));
    let mut used = vec![false; rec.actions.len()];
    let mut out = Vec::with_capacity(rec.actions.len());
    while !state.is_terminal() {
        let legal = state.legal_actions();
        let intended = used
            .iter()
            .position(|&u| !u)
            .map(|p| rec.actions[p])
            .filter(|&j| state.is_legal(j));
        let a = match intended {
            Some(j) if !chance(rng, epsilon) => j,
            _ => legal[below(rng, legal.len())],
        };
        if let Some(p) = (0..used.len()).find(|&p| !used[p] && rec.actions[p] == a) {
            used[p] = true;
        }
        state.step(a)?;
        out.push(a);
    }
    Ok(out)
}

/// Integer rewards of an episode, checking every action is legal.
pub fn raw_rewards(rec: &EpisodeRecord) -> Result<Vec<i64>> {
    let mut state = reset(Arc::clone(&rec.instance));
    let rewards = rec
        .actions
        .iter()
        .enumerate()
        .map(|(t, &a)| {
            state
                .step(a)
                .map_err(|e| Error::Data(format!("corrupted episode at step {t}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if !state.is_terminal() {
        return Err(Error::Data(format!(
            "corrupted episode: {} actions for {} operations",
            rec.actions.len(),
            rec.instance.num_ops()
        )));
    }
    Ok(rewards)
}

/// Episode rewards under `mode`.
pub fn episode_rewards(rec: &EpisodeRecord, mode: RewardMode) -> Result<Vec<f64>> {
    let raw = raw_rewards(rec)?;
    if mode == RewardMode::Normalized && rec.expert_makespan <= 0 {
        return Err(Error::Data(format!(
            "expert makespan must be positive, got {}",
            rec.expert_makespan
        )));
    }
    Ok(raw
        .into_iter()
        .map(|r| match mode {
            RewardMode::Normalized => r as f64 / rec.expert_makespan as f64,
            RewardMode::Scaled(c) => r as f64 * c,
            RewardMode::Raw => r as f64,
        })
        .collect())
}

/// Per-episode rewards divided by each episode's expert makespan.
pub fn normalize_rewards(records: &[EpisodeRecord]) -> Result<Vec<Vec<f64>>> {
    records
        .par_iter()
        .map(|r| episode_rewards(r, RewardMode::Normalized))
        .collect()
}

/// Replays every record into transitions, in record order.
pub fn materialize(records: &[EpisodeRecord], mode: RewardMode) -> Result<Vec<Transition>> {
    let per_episode = records
        .par_iter()
        .map(|rec| {
            let rewards = episode_rewards(rec, mode)?;
            let mut state = reset(Arc::clone(&rec.instance));
            let mut obs = Arc::new(state.observe(DEFAULT_FEATURE_SCALE));
            let mut out = Vec::with_capacity(rec.actions.len());
            for (&a, &r) in rec.actions.iter().zip(&rewards) {
                state.step(a)?;
                let next = Arc::new(state.observe(DEFAULT_FEATURE_SCALE));
                out.push(Transition {
                    obs,
                    action: a,
                    reward: r as f32,
                    next_obs: Arc::clone(&next),
                    terminal: state.is_terminal(),
                });
                obs = next;
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_episode.into_iter().flatten().collect())
}

/// Uniform sample with replacement.
pub fn sample_batch<'a>(
    transitions: &'a [Transition],
    batch_size: usize,
    rng: &mut Rng64,
) -> Result<Vec<&'a Transition>> {
    if transitions.is_empty() {
        return Err(Error::Data("cannot sample from an empty dataset".into()));
    }
    if batch_size > transitions.len() {
        return Err(Error::Data(format!(
            "batch size {batch_size} exceeds dataset size {}",
            transitions.len()
        )));
    }
    Ok((0..batch_size)
        .map(|_| &transitions[below(rng, transitions.len())])
        .collect())
}

/// How a dataset was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub reward_mode: RewardMode,
    pub p_noisy: f64,
    pub epsilon: f64,
    pub seed: Option<u64>,
}

impl Default for DatasetMeta {
    fn default() -> Self {
        DatasetMeta {
            reward_mode: RewardMode::Normalized,
            p_noisy: 0.0,
            epsilon: 0.0,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub records: Vec<EpisodeRecord>,
}

impl Dataset {
    pub fn noisy_count(&self) -> usize {
        self.records.iter().filter(|r| r.noisy).count()
    }
}

pub fn write_dataset(ds: &Dataset) -> String {
    let mut out = String::new();
    let m = &ds.meta;
    let _ = writeln!(out, "offld-dataset {FORMAT_VERSION}");
    let _ = writeln!(out, "episodes {}", ds.records.len());
    let _ = writeln!(out, "noisy {}", ds.noisy_count());
    let _ = writeln!(out, "reward_mode {}", m.reward_mode);
    let _ = writeln!(out, "p_noisy {}", m.p_noisy);
    let _ = writeln!(out, "epsilon {}", m.epsilon);
    match m.seed {
        Some(s) => {
            let _ = writeln!(out, "seed {s}");
        }
        None => out.push_str("seed none\n"),
    }
    for (i, r) in ds.records.iter().enumerate() {
        let _ = writeln!(out, "episode {i} {} {}", r.noisy as u8, r.expert_makespan);
        out.push_str(&write_taillard(&r.instance));
        let acts: Vec<String> = r.actions.iter().map(|a| a.to_string()).collect();
        let _ = writeln!(out, "actions {}", acts.join(" "));
    }
    out
}

struct Lines<'a> {
    lines: Vec<(usize, &'a str)>,
    pos: usize,
}

impl<'a> Lines<'a> {
    fn last_line(&self) -> usize {
        self.lines.last().map_or(1, |l| l.0)
    }

    fn peek(&self) -> Option<(usize, &'a str)> {
        self.lines.get(self.pos).copied()
    }

    /// Value of a `key value...` line.
    fn field(&mut self, key: &str) -> Result<(usize, &'a str)> {
        let (ln, line) = self
            .peek()
            .ok_or_else(|| Error::parse(self.last_line(), format!("missing `{key}` line")))?;
        let rest = line
            .strip_prefix(key)
            .filter(|r| r.is_empty() || r.starts_with(' '))
            .ok_or_else(|| Error::parse(ln, format!("expected `{key} ...`")))?;
        self.pos += 1;
        Ok((ln, rest.trim()))
    }
}

fn num<T: FromStr>(ln: usize, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::parse(ln, format!("`{s}` is not a valid number")))
}

/// Parses a dataset file and replays every episode to check it.
pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let mut cur = Lines {
        lines: text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty())
            .collect(),
        pos: 0,
    };

    let (ln, v) = cur.field("offld-dataset")?;
    if num::<u32>(ln, v)? != FORMAT_VERSION {
        return Err(Error::Compatibility(format!(
            "dataset format {v}, expected {FORMAT_VERSION}"
        )));
    }
    let (ln, v) = cur.field("episodes")?;
    let episodes: usize = num(ln, v)?;
    let (noisy_ln, v) = cur.field("noisy")?;
    let noisy: usize = num(noisy_ln, v)?;
    let (ln, v) = cur.field("reward_mode")?;
    let reward_mode = v.parse::<RewardMode>().map_err(|e| Error::parse(ln, e.to_string()))?;
    let (ln, v) = cur.field("p_noisy")?;
    let p_noisy = num(ln, v)?;
    let (ln, v) = cur.field("epsilon")?;
    let epsilon = num(ln, v)?;
    let (ln, v) = cur.field("seed")?;
    let seed = if v == "none" { None } else { Some(num(ln, v)?) };

    let mut records = Vec::with_capacity(episodes);
    for i in 0..episodes {
        let (ln, v) = cur.field("episode")?;
        let f: Vec<&str> = v.split_whitespace().collect();
        if f.len() != 3 || num::<usize>(ln, f[0])? != i {
            return Err(Error::parse(
                ln,
                format!("expected `episode {i} <noisy> <expert_makespan>`"),
            ));
        }
        let noisy = match f[1] {
            "0" => false,
            "1" => true,
            o => return Err(Error::parse(ln, format!("noisy flag must be 0 or 1, got `{o}`"))),
        };
        let expert_makespan: i64 = num(ln, f[2])?;
        if expert_makespan <= 0 {
            return Err(Error::parse(ln, "expert makespan must be positive"));
        }

        let (hl, header) = cur.peek().ok_or_else(|| Error::parse(ln, "missing instance"))?;
        let nj: usize = num(hl, header.split_whitespace().next().unwrap_or(""))?;
        let block = cur
            .lines
            .get(cur.pos..cur.pos + nj + 1)
            .ok_or_else(|| Error::parse(hl, "truncated instance"))?;
        let body: String = block.iter().map(|(_, l)| format!("{l}\n")).collect();
        let inst = parse_taillard(&body).map_err(|e| match e {
            Error::Parse { line, msg } => Error::parse(block[line - 1].0, msg),
            other => other,
        })?;
        cur.pos += nj + 1;

        let (al, v) = cur.field("actions")?;
        let actions = v
            .split_whitespace()
            .map(|t| num(al, t))
            .collect::<Result<Vec<usize>>>()?;
        let rec = EpisodeRecord {
            instance: Arc::new(inst),
            actions,
            noisy,
            expert_makespan,
        };
        raw_rewards(&rec).map_err(|e| Error::Data(format!("episode {i} (line {al}): {e}")))?;
        records.push(rec);
    }
    if let Some((ln, _)) = cur.peek() {
        return Err(Error::parse(ln, "unexpected content after the last episode"));
    }
    let ds = Dataset {
        meta: DatasetMeta {
            reward_mode,
            p_noisy,
            epsilon,
            seed,
        },
        records,
    };
    if ds.noisy_count() != noisy {
        return Err(Error::parse(
            noisy_ln,
            format!("manifest says {noisy} noisy episodes, found {}", ds.noisy_count()),
        ));
    }
    Ok(ds)
}

pub fn save_dataset(ds: &Dataset, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, write_dataset(ds))?;
    Ok(())
}

pub fn load_dataset(path: &std::path::Path) -> Result<Dataset> {
    parse_dataset(&std::fs::read_to_string(path)?)
}
