//! Graph encoder, pooling, scoring heads and checkpoints.
//!
//! The encoder is a directed GIN over conjunctive edges plus the machine
//! orders fixed so far: each layer computes `h' = MLP(h + Σ_{u→v} h_u)` with
//! a three-layer ReLU MLP. The graph embedding is the mean embedding of the
//! jobs' candidate operations that are still available. A head scores each
//! job from `[h_candidate, h_graph]`.
//!
//! Checkpoint file: a text manifest, an `end` line, then every parameter as
//! little-endian `f32` in manifest order.
//!
//! ```text
//! offld-checkpoint 1
//! kind mqrdqn
//! hidden 64
//! gin_layers 2
//! head_hidden 32
//! n_quantiles 32
//! dropout 0.4
//! param <name> <rows> <cols>
//! ...
//! end
//! ```

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use offld_autodiff::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;

use crate::env::Observation;
use crate::error::{Error, Result};
use crate::rng::seeded;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const NODE_FEATURES: usize = 2;

/// Which heads a model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    /// One head with `n_quantiles` outputs per job.
    Mqrdqn,
    /// Twin critics `q1`, `q2`, a `policy` head and `log_alpha`.
    Dmsac,
    /// A `policy` head only.
    Bc,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Mqrdqn => "mqrdqn",
            ModelKind::Dmsac => "dmsac",
            ModelKind::Bc => "bc",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mqrdqn" => Ok(ModelKind::Mqrdqn),
            "dmsac" => Ok(ModelKind::Dmsac),
            "bc" => Ok(ModelKind::Bc),
            o => Err(Error::Config(format!("unknown method `{o}` (mqrdqn|dmsac|bc)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hidden: usize,
    pub gin_layers: usize,
    pub head_hidden: usize,
    pub n_quantiles: usize,
    /// Dropout rate in the heads, training only.
    pub dropout: f64,
}

impl ModelConfig {
    pub fn new(kind: ModelKind) -> Self {
        ModelConfig {
            kind,
            hidden: 64,
            gin_layers: 2,
            head_hidden: 32,
            n_quantiles: 32,
            dropout: 0.4,
        }
    }

    /// `(name, outputs per job)` of every head.
    pub fn heads(&self) -> Vec<(&'static str, usize)> {
        match self.kind {
            ModelKind::Mqrdqn => vec![("q", self.n_quantiles)],
            ModelKind::Dmsac => vec![("q1", 1), ("q2", 1), ("policy", 1)],
            ModelKind::Bc => vec![("policy", 1)],
        }
    }

    /// Parameter names and shapes in manifest order.
    pub fn layout(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        for l in 0..self.gin_layers {
            let input = if l == 0 { NODE_FEATURES } else { self.hidden };
            for (k, fan_in) in [input, self.hidden, self.hidden].into_iter().enumerate() {
                out.push((format!("encoder.{l}.w{k}"), fan_in, self.hidden));
                out.push((format!("encoder.{l}.b{k}"), 1, self.hidden));
            }
        }
        for (head, k) in self.heads() {
            out.push((format!("{head}.w0"), 2 * self.hidden, self.head_hidden));
            out.push((format!("{head}.b0"), 1, self.head_hidden));
            out.push((format!("{head}.w1"), self.head_hidden, k));
            out.push((format!("{head}.b1"), 1, k));
        }
        if self.kind == ModelKind::Dmsac {
            out.push(("log_alpha".into(), 1, 1));
        }
        out
    }

    fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.gin_layers == 0 || self.head_hidden == 0 || self.n_quantiles == 0 {
            return Err(Error::Config(
                "model widths, layers and quantiles must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Parameters of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

/// Whether forward passes record parameters for gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grad {
    Track,
    Frozen,
}

impl<T: Scalar> Model<T> {
    /// Kaiming-uniform weights (`±sqrt(6 / fan_in)`), zero biases,
    /// `log_alpha = 0`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let mut params = ParamStore::new();
        for (name, r, c) in config.layout() {
            let is_weight = name.rsplit('.').next().is_some_and(|l| l.starts_with('w'));
            let t = if is_weight {
                let bound = (6.0 / r as f64).sqrt();
                let data = (0..r * c)
                    .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
                    .collect();
                Tensor::new(r, c, data)?
            } else {
                Tensor::zeros(r, c)
            };
            params.insert(name, t)?;
        }
        Ok(Model { config, params })
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        Ok(self.params.id(name)?)
    }

    fn var(&self, tape: &mut Tape<T>, name: &str, grad: Grad) -> Result<Var> {
        let id = self.id(name)?;
        Ok(match grad {
            Grad::Track => tape.param(&self.params, id),
            Grad::Frozen => tape.constant(self.params.value(id).clone()),
        })
    }

    fn linear(&self, tape: &mut Tape<T>, x: Var, prefix: &str, k: usize, grad: Grad) -> Result<Var> {
        let w = self.var(tape, &format!("{prefix}.w{k}"), grad)?;
        let b = self.var(tape, &format!("{prefix}.b{k}"), grad)?;
        let y = tape.matmul(x, w)?;
        Ok(tape.add_row(y, b)?)
    }

    /// Node embeddings (`num_nodes × hidden`) and graph embeddings
    /// (`num_graphs × hidden`).
    pub fn encode(&self, tape: &mut Tape<T>, batch: &GraphBatch, grad: Grad) -> Result<(Var, Var)> {
        let feats = batch.features.iter().map(|&x| T::from_f64_lossy(x as f64)).collect();
        let mut h = tape.constant(Tensor::new(batch.num_nodes, NODE_FEATURES, feats)?);
        for l in 0..self.config.gin_layers {
            let msgs = tape.gather_rows(h, &batch.src)?;
            let agg = tape.sum_segments(msgs, &batch.dst, batch.num_nodes)?;
            let mut x = tape.add(h, agg)?;
            let prefix = format!("encoder.{l}");
            for k in 0..3 {
                x = self.linear(tape, x, &prefix, k, grad)?;
                x = tape.relu(x);
            }
            h = x;
        }
        let avail = tape.gather_rows(h, &batch.pool_rows)?;
        let sums = tape.sum_segments(avail, &batch.pool_graph, batch.num_graphs)?;
        let scale: Vec<T> = batch.pool_scale.iter().map(|&s| T::from_f64_lossy(s)).collect();
        let h_graph = tape.scale_rows(sums, &scale)?;
        Ok((h, h_graph))
    }

    /// Head outputs for every `(graph, job)` pair, `num_graphs·num_jobs × K`
    /// in row-major `(graph, job)` order. Masked rows are computed but
    /// meaningless; use the batch mask.
    #[allow(clippy::too_many_arguments)]
    pub fn score_actions(
        &self,
        tape: &mut Tape<T>,
        head: &str,
        h_nodes: Var,
        h_graph: Var,
        batch: &GraphBatch,
        grad: Grad,
        train: bool,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let cand = tape.gather_rows(h_nodes, &batch.candidates)?;
        let graph_rows: Vec<usize> = (0..batch.num_graphs * batch.num_jobs)
            .map(|r| r / batch.num_jobs)
            .collect();
        let pooled = tape.gather_rows(h_graph, &graph_rows)?;
        let x = tape.concat(cand, pooled)?;
        let x = self.linear(tape, x, head, 0, grad)?;
        let x = tape.relu(x);
        let x = tape.dropout(x, self.config.dropout, train, rng)?;
        self.linear(tape, x, head, 1, grad)
    }

    /// Convenience: encode then score with one head, returning
    /// `num_graphs × num_jobs` when the head has one output per job.
    pub fn forward_head(
        &self,
        tape: &mut Tape<T>,
        head: &str,
        batch: &GraphBatch,
        grad: Grad,
        train: bool,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let (h, g) = self.encode(tape, batch, grad)?;
        let s = self.score_actions(tape, head, h, g, batch, grad, train, rng)?;
        self.per_job(tape, s, batch)
    }

    /// Reshapes single-output head scores to `num_graphs × num_jobs`.
    pub fn per_job(&self, tape: &mut Tape<T>, scores: Var, batch: &GraphBatch) -> Result<Var> {
        let (r, c) = tape.shape(scores);
        if c == 1 {
            Ok(tape.reshape(scores, batch.num_graphs, batch.num_jobs)?)
        } else {
            Err(Error::Dimension(format!(
                "{r}x{c} head output is not one score per job"
            )))
        }
    }

    /// Greedy action for one observation: the highest action value (mean
    /// over quantiles) for value-based models, the largest policy logit
    /// otherwise. Ties go to the lowest job index.
    pub fn greedy_action(&self, obs: &Observation) -> Result<usize> {
        let batch = GraphBatch::new(&[obs])?;
        let mut tape = Tape::new();
        let mut rng = seeded(0);
        let head = match self.config.kind {
            ModelKind::Mqrdqn => "q",
            ModelKind::Dmsac | ModelKind::Bc => "policy",
        };
        let (h, g) = self.encode(&mut tape, &batch, Grad::Frozen)?;
        let s = self.score_actions(&mut tape, head, h, g, &batch, Grad::Frozen, false, &mut rng)?;
        let v = tape.value(s);
        let values: Vec<T> = (0..batch.num_jobs)
            .map(|j| {
                let row = v.row(j);
                row.iter().copied().sum::<T>() / T::from_usize(row.len()).unwrap()
            })
            .collect();
        masked_argmax(&values, &obs.mask).ok_or_else(|| Error::State("no legal action in a terminal state".into()))
    }
}

/// Index of the largest value among unmasked entries; lowest index on ties.
pub fn masked_argmax<T: PartialOrd + Copy>(values: &[T], mask: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, (&v, &m)) in values.iter().zip(mask).enumerate() {
        if m && best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Copies `values` with masked entries replaced by `-inf`.
pub fn masked_scores<T: Scalar>(values: &[T], mask: &[bool]) -> Vec<T> {
    values
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { v } else { T::neg_infinity() })
        .collect()
}

/// Several observations of the same job count stacked block-diagonally.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphBatch {
    pub num_graphs: usize,
    pub num_jobs: usize,
    pub num_nodes: usize,
    /// `num_nodes × 2`.
    pub features: Vec<f32>,
    /// Edge sources and destinations, global node ids.
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    /// Candidate node of each `(graph, job)`.
    pub candidates: Vec<usize>,
    /// `(graph, job)` availability.
    pub mask: Vec<bool>,
    /// Available candidate nodes and their graph, for pooling.
    pub pool_rows: Vec<usize>,
    pub pool_graph: Vec<usize>,
    /// `1 / available count` per graph, `0` when none is available.
    pub pool_scale: Vec<f64>,
}

impl GraphBatch {
    pub fn new(obs: &[&Observation]) -> Result<Self> {
        let first = obs
            .first()
            .ok_or_else(|| Error::Dimension("empty observation batch".into()))?;
        let num_jobs = first.num_jobs();
        let mut b = GraphBatch {
            num_graphs: obs.len(),
            num_jobs,
            num_nodes: 0,
            features: Vec::new(),
            src: Vec::new(),
            dst: Vec::new(),
            candidates: Vec::with_capacity(obs.len() * num_jobs),
            mask: Vec::with_capacity(obs.len() * num_jobs),
            pool_rows: Vec::new(),
            pool_graph: Vec::new(),
            pool_scale: Vec::with_capacity(obs.len()),
        };
        for (g, o) in obs.iter().enumerate() {
            let n = o.num_nodes();
            if o.num_jobs() != num_jobs || o.candidates.len() != num_jobs || o.node_features.len() != 2 * n {
                return Err(Error::Dimension(format!(
                    "observation {g} has {} jobs and {} candidates, batch expects {num_jobs}",
                    o.num_jobs(),
                    o.candidates.len()
                )));
            }
            let off = b.num_nodes;
            b.features.extend_from_slice(&o.node_features);
            for &(u, v) in o.conj_edges.iter().chain(&o.disj_edges) {
                if u as usize >= n || v as usize >= n {
                    return Err(Error::Dimension(format!("edge ({u}, {v}) outside {n} nodes")));
                }
                b.src.push(off + u as usize);
                b.dst.push(off + v as usize);
            }
            let mut count = 0;
            for (&c, &m) in o.candidates.iter().zip(&o.mask) {
                if c as usize >= n {
                    return Err(Error::Dimension(format!("candidate {c} outside {n} nodes")));
                }
                b.candidates.push(off + c as usize);
                b.mask.push(m);
                if m {
                    b.pool_rows.push(off + c as usize);
                    b.pool_graph.push(g);
                    count += 1;
                }
            }
            b.pool_scale.push(if count == 0 { 0.0 } else { 1.0 / count as f64 });
            b.num_nodes += n;
        }
        Ok(b)
    }
}

impl Model<f32> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut head = String::new();
        let _ = writeln!(head, "offld-checkpoint {CHECKPOINT_VERSION}");
        let _ = writeln!(head, "kind {}", c.kind);
        let _ = writeln!(head, "hidden {}", c.hidden);
        let _ = writeln!(head, "gin_layers {}", c.gin_layers);
        let _ = writeln!(head, "head_hidden {}", c.head_hidden);
        let _ = writeln!(head, "n_quantiles {}", c.n_quantiles);
        let _ = writeln!(head, "dropout {}", c.dropout);
        for id in self.params.ids() {
            let (r, cols) = self.params.value(id).shape();
            let _ = writeln!(head, "param {} {r} {cols}", self.params.name(id));
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        for id in self.params.ids() {
            for x in self.params.value(id).data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Compatibility(format!("checkpoint: {m}"));
        let mut pos = 0;
        let mut lines = Vec::new();
        loop {
            let nl = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("manifest is not terminated by `end`".into()))?;
            let line = std::str::from_utf8(&bytes[pos..pos + nl]).map_err(|_| bad("manifest is not UTF-8".into()))?;
            pos += nl + 1;
            if line == "end" {
                break;
            }
            lines.push(line);
        }
        let mut it = lines.iter().map(|l| l.split_whitespace().collect::<Vec<_>>());
        let mut kv = |key: &str| -> Result<String> {
            match it.next() {
                Some(f) if f.len() == 2 && f[0] == key => Ok(f[1].to_string()),
                _ => Err(bad(format!("expected `{key} <value>`"))),
            }
        };
        let version = kv("offld-checkpoint")?;
        if version != CHECKPOINT_VERSION.to_string() {
            return Err(bad(format!("format version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let kind: ModelKind = kv("kind")?.parse().map_err(|e: Error| bad(e.to_string()))?;
        let mut usize_kv =
            |key: &str| -> Result<usize> { kv(key)?.parse().map_err(|_| bad(format!("`{key}` is not an integer"))) };
        let hidden = usize_kv("hidden")?;
        let gin_layers = usize_kv("gin_layers")?;
        let head_hidden = usize_kv("head_hidden")?;
        let n_quantiles = usize_kv("n_quantiles")?;
        let dropout: f64 = kv("dropout")?
            .parse()
            .map_err(|_| bad("`dropout` is not a number".into()))?;
        let config = ModelConfig {
            kind,
            hidden,
            gin_layers,
            head_hidden,
            n_quantiles,
            dropout,
        };
        config.validate().map_err(|e| bad(e.to_string()))?;
        let layout = config.layout();
        let declared: Vec<(String, usize, usize)> = it
            .map(|f| match f[..] {
                ["param", name, r, c] => Ok((
                    name.to_string(),
                    r.parse().map_err(|_| bad(format!("bad rows for {name}")))?,
                    c.parse().map_err(|_| bad(format!("bad cols for {name}")))?,
                )),
                _ => Err(bad(format!("unexpected manifest line `{}`", f.join(" ")))),
            })
            .collect::<Result<_>>()?;
        if declared != layout {
            return Err(bad("parameter manifest does not match the declared architecture".into()));
        }
        let total: usize = layout.iter().map(|(_, r, c)| r * c).sum();
        if bytes.len() - pos != 4 * total {
            return Err(bad(format!(
                "expected {} bytes of parameters, found {}",
                4 * total,
                bytes.len() - pos
            )));
        }
        let mut params = ParamStore::new();
        for (name, r, c) in layout {
            let data = bytes[pos..pos + 4 * r * c]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            pos += 4 * r * c;
            params.insert(name, Tensor::new(r, c, data)?)?;
        }
        Ok(Model { config, params })
    }
}

pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, model.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    Model::from_bytes(&std::fs::read(path)?)
}

/// Loads a checkpoint and checks it was built with `expected`.
pub fn load_checkpoint_expecting(path: &Path, expected: &ModelConfig) -> Result<Model<f32>> {
    let m = load_checkpoint(path)?;
    if &m.config != expected {
        return Err(Error::Compatibility(format!(
            "checkpoint architecture {:?} differs from expected {:?}",
            m.config, expected
        )));
    }
    Ok(m)
}
