//! Offline training loop, greedy evaluation and comparison reports.
//!
//! Training log CSV: `step,loss_total,loss_td,loss_cql,loss_policy,alpha`
//! plus `eval_gap` when an evaluation set is configured. Evaluation CSV:
//! `instance,C,C_star,gap_pct,millis`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use offld_autodiff::{Adam, AdamConfig, ParamId, Tape, Tensor, Var};
use rayon::prelude::*;

use crate::agents::{
    bc_loss, cql_term, mse_loss, qrdqn_loss, qrdqn_target, sac_policy_loss, sac_q_target, sync_target,
    temperature_loss, total_q_loss, AgentConfig,
};
use crate::dataset::{materialize, sample_batch, EpisodeRecord, Transition};
use crate::env::{reset, DEFAULT_FEATURE_SCALE};
use crate::error::{Error, Result};
use crate::instances::Instance;
use crate::model::{Grad, GraphBatch, Model, ModelConfig, ModelKind};
use crate::pdr::{pdr_action, PdrRule};
use crate::rng::{derive_seed, seeded, Rng64};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: ModelKind,
    pub steps: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub agent: AgentConfig,
    pub hidden: usize,
    pub gin_layers: usize,
    pub head_hidden: usize,
    pub dropout: f64,
    pub dataset: Option<PathBuf>,
    pub eval_instances: Option<PathBuf>,
    pub eval_refs: Option<PathBuf>,
    /// Evaluate every this many steps (and after the last); 0 disables.
    pub eval_every: u64,
    /// Extra checkpoints every this many steps; 0 keeps only the final one.
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: ModelKind::Mqrdqn,
            steps: 50_000,
            lr: 2e-5,
            batch_size: 64,
            seed: 600,
            agent: AgentConfig::default(),
            hidden: 64,
            gin_layers: 2,
            head_hidden: 32,
            dropout: 0.4,
            dataset: None,
            eval_instances: None,
            eval_refs: None,
            eval_every: 2500,
            checkpoint_every: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            kind: self.method,
            hidden: self.hidden,
            gin_layers: self.gin_layers,
            head_hidden: self.head_hidden,
            n_quantiles: self.agent.n_quantiles,
            dropout: self.dropout,
        }
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        self.agent.validate()?;
        Ok(())
    }

    /// Sets one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
        }
        let path = |v: &str| if v.is_empty() { None } else { Some(PathBuf::from(v)) };
        match key {
            "method" => self.method = value.parse()?,
            "steps" => self.steps = p(key, value)?,
            "lr" => self.lr = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "hidden" => self.hidden = p(key, value)?,
            "gin_layers" => self.gin_layers = p(key, value)?,
            "head_hidden" => self.head_hidden = p(key, value)?,
            "dropout" => self.dropout = p(key, value)?,
            "dataset" => self.dataset = path(value),
            "eval_instances" => self.eval_instances = path(value),
            "eval_refs" => self.eval_refs = path(value),
            "eval_every" => self.eval_every = p(key, value)?,
            "checkpoint_every" => self.checkpoint_every = p(key, value)?,
            "log_every" => self.log_every = p(key, value)?,
            "alpha_cql" => self.agent.alpha_cql = p(key, value)?,
            "gamma" => self.agent.gamma = p(key, value)?,
            "n_quantiles" => self.agent.n_quantiles = p(key, value)?,
            "kappa" => self.agent.kappa = p(key, value)?,
            "c_h" => self.agent.c_h = p(key, value)?,
            "target_update_every" => self.agent.target_update_every = p(key, value)?,
            "reward_mode" => self.agent.reward_mode = value.parse()?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a `key = value` file; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(i + 1, "expected `key = value`"))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::parse(i + 1, e.to_string()))?;
        }
        Ok(())
    }

    /// Every setting in the form [`TrainConfig::apply_text`] reads.
    pub fn to_text(&self) -> String {
        let a = &self.agent;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("method", self.method.to_string());
        kv("steps", self.steps.to_string());
        kv("lr", self.lr.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("seed", self.seed.to_string());
        kv("hidden", self.hidden.to_string());
        kv("gin_layers", self.gin_layers.to_string());
        kv("head_hidden", self.head_hidden.to_string());
        kv("dropout", self.dropout.to_string());
        kv("alpha_cql", a.alpha_cql.to_string());
        kv("gamma", a.gamma.to_string());
        kv("n_quantiles", a.n_quantiles.to_string());
        kv("kappa", a.kappa.to_string());
        kv("c_h", a.c_h.to_string());
        kv("target_update_every", a.target_update_every.to_string());
        kv("reward_mode", a.reward_mode.to_string());
        kv("dataset", path(&self.dataset));
        kv("eval_instances", path(&self.eval_instances));
        kv("eval_refs", path(&self.eval_refs));
        kv("eval_every", self.eval_every.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("log_every", self.log_every.to_string());
        out
    }
}

/// Held-out instances with optional reference makespans.
#[derive(Debug, Clone, Default)]
pub struct EvalSet {
    pub names: Vec<String>,
    pub instances: Vec<Arc<Instance>>,
    pub refs: Vec<Option<i64>>,
}

impl EvalSet {
    /// Pairs instances with a reference table by name.
    pub fn new(named: Vec<(String, Instance)>, refs: &[(String, i64)]) -> Self {
        let table: HashMap<&str, i64> = refs.iter().map(|(n, c)| (n.as_str(), *c)).collect();
        let mut set = EvalSet::default();
        for (name, inst) in named {
            set.refs.push(table.get(name.as_str()).copied());
            set.names.push(name);
            set.instances.push(Arc::new(inst));
        }
        set
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss_total: f64,
    pub loss_td: f64,
    pub loss_cql: f64,
    pub loss_policy: f64,
    pub alpha: f64,
    pub eval_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub with_eval: bool,
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss_total,loss_td,loss_cql,loss_policy,alpha");
        out.push_str(if self.with_eval { ",eval_gap\n" } else { "\n" });
        for r in &self.rows {
            let _ = write!(
                out,
                "{},{},{},{},{},{}",
                r.step, r.loss_total, r.loss_td, r.loss_cql, r.loss_policy, r.alpha
            );
            if self.with_eval {
                out.push(',');
                if let Some(g) = r.eval_gap {
                    let _ = write!(out, "{g}");
                }
            }
            out.push('\n');
        }
        out
    }

    /// Last logged evaluation gap.
    pub fn final_eval_gap(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.eval_gap)
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct StepLosses {
    total: f64,
    td: f64,
    cql: f64,
    policy: f64,
    alpha: f64,
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    online: Model<f32>,
    target: Model<f32>,
    groups: Vec<Adam<f32>>,
    dropout_rng: Rng64,
}

fn value_at(tape: &Tape<f32>, v: Var) -> f64 {
    tape.value(v).item() as f64
}

/// Row-wise masked softmax of plain values; all-masked rows are zero.
fn masked_softmax_rows(values: &[f32], mask: &[bool], cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; values.len()];
    for (i, (row, m)) in values.chunks(cols).zip(mask.chunks(cols)).enumerate() {
        let max = row
            .iter()
            .zip(m)
            .filter(|(_, &k)| k)
            .map(|(&v, _)| v)
            .fold(f32::NEG_INFINITY, f32::max);
        if max == f32::NEG_INFINITY {
            continue;
        }
        let mut s = 0.0;
        for j in 0..cols {
            if m[j] {
                let e = (row[j] - max).exp();
                out[i * cols + j] = e;
                s += e;
            }
        }
        for x in &mut out[i * cols..(i + 1) * cols] {
            *x /= s;
        }
    }
    out
}

impl<'a> Trainer<'a> {
    fn new(cfg: &'a TrainConfig) -> Result<Self> {
        let online = Model::<f32>::init(cfg.model_config(), derive_seed(cfg.seed, 0))?;
        let target = online.clone();
        let adam = AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        };
        let p = &online.params;
        let prefixes: Vec<Vec<&str>> = match cfg.method {
            ModelKind::Mqrdqn => vec![vec!["encoder.", "q."]],
            ModelKind::Dmsac => vec![vec!["encoder.", "q1.", "q2."], vec!["policy."], vec!["log_alpha"]],
            ModelKind::Bc => vec![vec!["encoder.", "policy."]],
        };
        let groups = prefixes
            .into_iter()
            .map(|ps| {
                let ids: Vec<ParamId> = ps.iter().flat_map(|pre| p.ids_with_prefix(pre)).collect();
                Adam::new(adam, p, ids)
            })
            .collect();
        Ok(Trainer {
            cfg,
            online,
            target,
            groups,
            dropout_rng: seeded(derive_seed(cfg.seed, 2)),
        })
    }

    fn step(&mut self, batch: &[&Transition]) -> Result<StepLosses> {
        let obs: Vec<_> = batch.iter().map(|t| &*t.obs).collect();
        let next: Vec<_> = batch.iter().map(|t| &*t.next_obs).collect();
        let gb = GraphBatch::new(&obs)?;
        let nb = GraphBatch::new(&next)?;
        let actions: Vec<usize> = batch.iter().map(|t| t.action).collect();
        let losses = match self.cfg.method {
            ModelKind::Mqrdqn => self.mqrdqn_step(batch, &gb, &nb, &actions)?,
            ModelKind::Dmsac => self.dmsac_step(batch, &gb, &nb, &actions)?,
            ModelKind::Bc => self.bc_step(&gb, &actions)?,
        };
        for g in &mut self.groups {
            g.step(&mut self.online.params);
        }
        Ok(losses)
    }

    fn mqrdqn_step(
        &mut self,
        batch: &[&Transition],
        gb: &GraphBatch,
        nb: &GraphBatch,
        actions: &[usize],
    ) -> Result<StepLosses> {
        let a = &self.cfg.agent;
        let (n, j) = (a.n_quantiles, gb.num_jobs);
        let mut tape = Tape::<f32>::new();

        let (h, g) = self.target.encode(&mut tape, nb, Grad::Frozen)?;
        let next_q = self
            .target
            .score_actions(&mut tape, "q", h, g, nb, Grad::Frozen, false, &mut self.dropout_rng)?;
        let next_q = tape.value(next_q).data().to_vec();
        let mut targets = Vec::with_capacity(batch.len() * n);
        for (b, t) in batch.iter().enumerate() {
            targets.extend(qrdqn_target(
                t.reward,
                &next_q[b * j * n..(b + 1) * j * n],
                n,
                t.next_mask(),
                t.terminal,
                a.gamma as f32,
            )?);
        }
        let targets = Tensor::new(batch.len(), n, targets)?;

        let (h, g) = self.online.encode(&mut tape, gb, Grad::Track)?;
        let q = self
            .online
            .score_actions(&mut tape, "q", h, g, gb, Grad::Track, true, &mut self.dropout_rng)?;
        let rows: Vec<usize> = actions.iter().enumerate().map(|(b, &a)| b * j + a).collect();
        let pred = tape.gather_rows(q, &rows)?;
        let td = qrdqn_loss(&mut tape, pred, &targets, a.kappa)?;
        let qmean = tape.mean_cols(q)?;
        let qmean = tape.reshape(qmean, gb.num_graphs, j)?;
        let cql = cql_term(&mut tape, qmean, &gb.mask, actions, a.alpha_cql)?;
        let total = total_q_loss(&mut tape, cql, td)?;
        tape.backward(total, &mut self.online.params)?;
        Ok(StepLosses {
            total: value_at(&tape, total),
            td: value_at(&tape, td),
            cql: value_at(&tape, cql),
            policy: 0.0,
            alpha: 0.0,
        })
    }

    fn dmsac_step(
        &mut self,
        batch: &[&Transition],
        gb: &GraphBatch,
        nb: &GraphBatch,
        actions: &[usize],
    ) -> Result<StepLosses> {
        let a = &self.cfg.agent;
        let j = gb.num_jobs;
        let rng = &mut self.dropout_rng;
        let mut tape = Tape::<f32>::new();

        // soft targets from the target critics and the current policy
        let (h, g) = self.target.encode(&mut tape, nb, Grad::Frozen)?;
        let q1t = self
            .target
            .score_actions(&mut tape, "q1", h, g, nb, Grad::Frozen, false, rng)?;
        let q2t = self
            .target
            .score_actions(&mut tape, "q2", h, g, nb, Grad::Frozen, false, rng)?;
        let (h, g) = self.online.encode(&mut tape, nb, Grad::Frozen)?;
        let pl = self
            .online
            .score_actions(&mut tape, "policy", h, g, nb, Grad::Frozen, false, rng)?;
        let next_probs = masked_softmax_rows(tape.value(pl).data(), &nb.mask, j);
        let (q1t, q2t) = (tape.value(q1t).data(), tape.value(q2t).data());
        let y: Vec<f32> = batch
            .iter()
            .enumerate()
            .map(|(b, t)| {
                let r = b * j..(b + 1) * j;
                sac_q_target(
                    t.reward,
                    &next_probs[r.clone()],
                    &q1t[r.clone()],
                    &q2t[r.clone()],
                    t.next_mask(),
                    t.terminal,
                    a.gamma as f32,
                )
            })
            .collect();

        let (h, g) = self.online.encode(&mut tape, gb, Grad::Track)?;
        let mut td_sum = None;
        let mut cql_sum = None;
        let mut critic = None;
        let mut qs = Vec::new();
        for head in ["q1", "q2"] {
            let q = self
                .online
                .score_actions(&mut tape, head, h, g, gb, Grad::Track, true, rng)?;
            let q = self.online.per_job(&mut tape, q, gb)?;
            let qa = tape.pick_cols(q, actions)?;
            let td = mse_loss(&mut tape, qa, &y)?;
            let cql = cql_term(&mut tape, q, &gb.mask, actions, a.alpha_cql)?;
            let part = total_q_loss(&mut tape, cql, td)?;
            let add = |tape: &mut Tape<f32>, acc: Option<Var>, v: Var| -> Result<Option<Var>> {
                Ok(Some(match acc {
                    Some(x) => tape.add(x, v)?,
                    None => v,
                }))
            };
            td_sum = add(&mut tape, td_sum, td)?;
            cql_sum = add(&mut tape, cql_sum, cql)?;
            critic = add(&mut tape, critic, part)?;
            qs.push(tape.value(q).clone());
        }
        let (td, cql, critic) = (td_sum.unwrap(), cql_sum.unwrap(), critic.unwrap());

        // the actor sees detached embeddings, so only critics shape the encoder
        let hd = tape.detach(h);
        let gd = tape.detach(g);
        let logits = self
            .online
            .score_actions(&mut tape, "policy", hd, gd, gb, Grad::Track, false, rng)?;
        let logits = self.online.per_job(&mut tape, logits, gb)?;
        let la_id = self.online.id("log_alpha")?;
        let alpha = self.online.params.value(la_id).item().exp();
        let policy = sac_policy_loss(&mut tape, logits, &gb.mask, &qs[0], &qs[1], alpha)?;
        let probs = Tensor::new(
            gb.num_graphs,
            j,
            masked_softmax_rows(tape.value(logits).data(), &gb.mask, j),
        )?;
        let la = tape.param(&self.online.params, la_id);
        let temp = temperature_loss(&mut tape, la, &probs, &gb.mask, a.c_h)?;

        let total = tape.add(critic, policy)?;
        let total = tape.add(total, temp)?;
        tape.backward(total, &mut self.online.params)?;
        Ok(StepLosses {
            total: value_at(&tape, total),
            td: value_at(&tape, td),
            cql: value_at(&tape, cql),
            policy: value_at(&tape, policy),
            alpha: alpha as f64,
        })
    }

    fn bc_step(&mut self, gb: &GraphBatch, actions: &[usize]) -> Result<StepLosses> {
        let mut tape = Tape::<f32>::new();
        let logits = self
            .online
            .forward_head(&mut tape, "policy", gb, Grad::Track, false, &mut self.dropout_rng)?;
        let loss = bc_loss(&mut tape, logits, &gb.mask, actions)?;
        tape.backward(loss, &mut self.online.params)?;
        let l = value_at(&tape, loss);
        Ok(StepLosses {
            total: l,
            policy: l,
            ..StepLosses::default()
        })
    }
}

pub struct TrainOutput {
    pub model: Model<f32>,
    pub log: TrainLog,
}

/// Trains from episode records. `on_checkpoint` receives the model at every
/// checkpoint step (not the final one, which is returned).
pub fn train_offline(
    cfg: &TrainConfig,
    records: &[EpisodeRecord],
    eval: Option<&EvalSet>,
    mut on_checkpoint: impl FnMut(u64, &Model<f32>) -> Result<()>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let transitions = materialize(records, cfg.agent.reward_mode)?;
    let first = transitions
        .first()
        .ok_or_else(|| Error::Data("dataset has no transitions".into()))?;
    if transitions.iter().any(|t| t.obs.num_jobs() != first.obs.num_jobs()) {
        return Err(Error::Data(
            "training needs every episode to have the same job count".into(),
        ));
    }
    if cfg.batch_size > transitions.len() {
        return Err(Error::Data(format!(
            "batch size {} exceeds the {} transitions",
            cfg.batch_size,
            transitions.len()
        )));
    }
    let eval = eval.filter(|e| !e.is_empty() && cfg.eval_every > 0);
    let mut trainer = Trainer::new(cfg)?;
    let mut sample_rng = seeded(derive_seed(cfg.seed, 1));
    let mut log = TrainLog {
        with_eval: eval.is_some(),
        rows: Vec::new(),
    };
    for step in 1..=cfg.steps {
        let batch = sample_batch(&transitions, cfg.batch_size, &mut sample_rng)?;
        let l = trainer.step(&batch)?;
        sync_target(
            &trainer.online.params,
            &mut trainer.target.params,
            step,
            cfg.agent.target_update_every,
        )?;
        let last = step == cfg.steps;
        let eval_gap = match eval {
            Some(e) if step % cfg.eval_every == 0 || last => {
                Some(evaluate(&Policy::Model(&trainer.online), e)?.mean_gap())
            }
            _ => None,
        };
        if step % cfg.log_every == 0 || last || eval_gap.is_some() {
            log.rows.push(LogRow {
                step,
                loss_total: l.total,
                loss_td: l.td,
                loss_cql: l.cql,
                loss_policy: l.policy,
                alpha: l.alpha,
                eval_gap: eval_gap.flatten(),
            });
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && !last {
            on_checkpoint(step, &trainer.online)?;
        }
    }
    Ok(TrainOutput {
        model: trainer.online,
        log,
    })
}

/// What picks actions during evaluation.
#[derive(Debug, Clone, Copy)]
pub enum Policy<'a> {
    Rule(PdrRule),
    Model(&'a Model<f32>),
}

impl Policy<'_> {
    pub fn tag(&self) -> String {
        match self {
            Policy::Rule(r) => r.name().to_string(),
            Policy::Model(m) => m.config.kind.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub instance: String,
    pub makespan: i64,
    pub reference: Option<i64>,
    pub gap_pct: Option<f64>,
    pub millis: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub rows: Vec<EvalRow>,
}

/// `(C − C*) / C* · 100`.
pub fn gap_pct(makespan: i64, reference: i64) -> Option<f64> {
    (reference > 0).then(|| (makespan - reference) as f64 / reference as f64 * 100.0)
}

impl EvalReport {
    fn gaps(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.gap_pct).collect()
    }

    /// Rows without a usable reference.
    pub fn skipped(&self) -> usize {
        self.rows.iter().filter(|r| r.gap_pct.is_none()).count()
    }

    /// Mean gap over rows with a reference; `None` when there are none.
    pub fn mean_gap(&self) -> Option<f64> {
        let g = self.gaps();
        (!g.is_empty()).then(|| g.iter().sum::<f64>() / g.len() as f64)
    }

    /// Population standard deviation of the gaps.
    pub fn std_gap(&self) -> Option<f64> {
        let g = self.gaps();
        let m = self.mean_gap()?;
        Some((g.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / g.len() as f64).sqrt())
    }

    pub fn mean_millis(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.millis).sum::<f64>() / self.rows.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("instance,C,C_star,gap_pct,millis\n");
        for r in &self.rows {
            let opt = |x: Option<String>| x.unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.instance,
                r.makespan,
                opt(r.reference.map(|c| c.to_string())),
                opt(r.gap_pct.map(|g| g.to_string())),
                r.millis
            );
        }
        out
    }

    pub fn from_csv(method: &str, text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "instance,C,C_star,gap_pct,millis")) => {}
            _ => return Err(Error::parse(1, "expected header `instance,C,C_star,gap_pct,millis`")),
        }
        let rows = lines
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                let ln = i + 1;
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 5 {
                    return Err(Error::parse(ln, "expected 5 fields"));
                }
                let bad = |s: &str| Error::parse(ln, format!("invalid field `{s}`"));
                let opt_i = |s: &str| -> Result<Option<i64>> {
                    if s.is_empty() {
                        Ok(None)
                    } else {
                        s.parse().map(Some).map_err(|_| bad(s))
                    }
                };
                let opt_f = |s: &str| -> Result<Option<f64>> {
                    if s.is_empty() {
                        Ok(None)
                    } else {
                        s.parse().map(Some).map_err(|_| bad(s))
                    }
                };
                Ok(EvalRow {
                    instance: f[0].to_string(),
                    makespan: f[1].parse().map_err(|_| bad(f[1]))?,
                    reference: opt_i(f[2])?,
                    gap_pct: opt_f(f[3])?,
                    millis: f[4].parse().map_err(|_| bad(f[4]))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(EvalReport {
            method: method.to_string(),
            rows,
        })
    }
}

/// Greedy rollout of one instance; returns the makespan. Checks that every
/// chosen action is available and that the rewards telescope.
pub fn rollout(policy: &Policy, inst: Arc<Instance>) -> Result<i64> {
    let mut state = reset(inst);
    let start_bound = state.max_clb();
    let mut ret = 0i64;
    while !state.is_terminal() {
        let a = match policy {
            Policy::Rule(r) => pdr_action(&state, *r)?,
            Policy::Model(m) => m.greedy_action(&state.observe(DEFAULT_FEATURE_SCALE))?,
        };
        if !state.is_legal(a) {
            return Err(Error::InvalidAction {
                action: a,
                reason: "greedy evaluation chose a masked action".into(),
            });
        }
        ret += state.step(a)?;
    }
    let c = state.makespan()?;
    if ret != start_bound - c {
        return Err(Error::State(format!(
            "rewards sum to {ret}, expected {}",
            start_bound - c
        )));
    }
    Ok(c)
}

/// Greedy evaluation, parallel over instances.
pub fn evaluate(policy: &Policy, set: &EvalSet) -> Result<EvalReport> {
    let rows = (0..set.len())
        .into_par_iter()
        .map(|i| {
            let t0 = Instant::now();
            let c = rollout(policy, Arc::clone(&set.instances[i]))?;
            let millis = t0.elapsed().as_secs_f64() * 1000.0;
            let reference = set.refs[i];
            Ok(EvalRow {
                instance: set.names[i].clone(),
                makespan: c,
                reference,
                gap_pct: reference.and_then(|r| gap_pct(c, r)),
                millis,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        method: policy.tag(),
        rows,
    })
}

/// One summary line per report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportLine {
    pub method: String,
    pub mean_gap: Option<f64>,
    pub std_gap: Option<f64>,
    pub mean_millis: f64,
    pub instances: usize,
    pub skipped: usize,
}

fn summary(reports: &[EvalReport]) -> Vec<ReportLine> {
    let mut lines: Vec<ReportLine> = reports
        .iter()
        .map(|r| ReportLine {
            method: r.method.clone(),
            mean_gap: r.mean_gap(),
            std_gap: r.std_gap(),
            mean_millis: r.mean_millis(),
            instances: r.rows.len(),
            skipped: r.skipped(),
        })
        .collect();
    lines.sort_by(|a, b| {
        let key = |l: &ReportLine| l.mean_gap.unwrap_or(f64::INFINITY);
        key(a).total_cmp(&key(b)).then_with(|| a.method.cmp(&b.method))
    });
    lines
}

/// Comparison table (text) and CSV, sorted by mean gap ascending.
pub fn report(reports: &[EvalReport]) -> (String, String) {
    let lines = summary(reports);
    let w = lines.iter().map(|l| l.method.len()).max().unwrap_or(0).max(6);
    let mut table = format!(
        "{:<w$}  {:>16}  {:>10}  {:>9}\n",
        "method", "gap % (mean±std)", "ms/inst", "instances"
    );
    let mut csv = String::from("method,mean_gap,std_gap,mean_millis,instances,skipped\n");
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for l in &lines {
        let gap = match (l.mean_gap, l.std_gap) {
            (Some(m), Some(s)) => format!("{m:.1}±{s:.1}"),
            _ => "n/a".into(),
        };
        let _ = writeln!(
            table,
            "{:<w$}  {:>16}  {:>10.3}  {:>9}",
            l.method, gap, l.mean_millis, l.instances
        );
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            l.method,
            opt(l.mean_gap),
            opt(l.std_gap),
            l.mean_millis,
            l.instances,
            l.skipped
        );
    }
    (table, csv)
}

/// Parses the CSV written by [`report`].
pub fn parse_report_csv(text: &str) -> Result<Vec<ReportLine>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "method,mean_gap,std_gap,mean_millis,instances,skipped")) => {}
        _ => return Err(Error::parse(1, "unexpected report header")),
    }
    lines
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::parse(i + 1, format!("invalid report line `{l}`"));
            if f.len() != 6 {
                return Err(bad());
            }
            let opt = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| bad())
                }
            };
            Ok(ReportLine {
                method: f[0].to_string(),
                mean_gap: opt(f[1])?,
                std_gap: opt(f[2])?,
                mean_millis: f[3].parse().map_err(|_| bad())?,
                instances: f[4].parse().map_err(|_| bad())?,
                skipped: f[5].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
