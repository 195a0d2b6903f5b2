//! Acceptance gate: one verdict line per criterion.
//!
//! Run a subset with `cargo test -p offld-validation --test acceptance -- 2 5`.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use offld_autodiff::{ParamStore, Tape, Tensor, Var};
use offld_core::agents::*;
use offld_core::dataset::{make_expert_dataset, make_noisy_dataset, RewardMode};
use offld_core::env::{reset, reset_with_placement, DispatchState, Placement};
use offld_core::exact::{schedule_to_actions, solve_exact, validate_schedule, Schedule, ScheduleSource};
use offld_core::instances::{generate_instance, Instance};
use offld_core::model::{masked_argmax, Grad, GraphBatch, Model, ModelConfig, ModelKind};
use offld_core::pdr::{pdr_rollout_with, PdrRule};
use offld_core::pipeline::{evaluate, train_offline, EvalSet, Policy, TrainConfig};
use offld_core::rng::{derive_seed, seeded, Rng64};
use offld_validation::{Outcome, Suite};
use rand::Rng;

const TRAIN_SEED: u64 = 200;
const EVAL_SEED: u64 = 300;
const NODE_BUDGET: u64 = 20_000_000;

fn solved(seed: u64, n: usize) -> Vec<(Arc<Instance>, Schedule)> {
    (0..n)
        .map(|k| {
            let inst = Arc::new(generate_instance(6, 6, derive_seed(seed, k as u64)).unwrap());
            let out = solve_exact(&inst, NODE_BUDGET).unwrap();
            assert!(out.optimal, "instance {k} of seed {seed} not proven optimal");
            (inst, out.schedule)
        })
        .collect()
}

fn eval_set() -> &'static EvalSet {
    static SET: OnceLock<EvalSet> = OnceLock::new();
    SET.get_or_init(|| {
        let items = solved(EVAL_SEED, 100);
        let mut set = EvalSet::default();
        for (k, (inst, s)) in items.into_iter().enumerate() {
            set.names.push(format!("inst_{k:03}"));
            set.instances.push(inst);
            set.refs.push(Some(s.makespan));
        }
        set
    })
}

fn train_items() -> &'static [(Arc<Instance>, Schedule)] {
    static ITEMS: OnceLock<Vec<(Arc<Instance>, Schedule)>> = OnceLock::new();
    ITEMS.get_or_init(|| solved(TRAIN_SEED, 100))
}

fn mean_gap(policy: Policy) -> f64 {
    evaluate(&policy, eval_set()).unwrap().mean_gap().unwrap()
}

/// Final eval gap of a 20k-step mQRDQN run on the expert dataset.
fn trained_gap(mode: RewardMode) -> f64 {
    static RUNS: OnceLock<std::sync::Mutex<Vec<(String, f64)>>> = OnceLock::new();
    let runs = RUNS.get_or_init(Default::default);
    let key = mode.to_string();
    if let Some(&(_, g)) = runs.lock().unwrap().iter().find(|(k, _)| *k == key) {
        return g;
    }
    let records = make_expert_dataset(train_items()).unwrap();
    let mut cfg = TrainConfig {
        steps: 20_000,
        eval_every: 20_000,
        log_every: 1000,
        ..TrainConfig::default()
    };
    cfg.agent.reward_mode = mode;
    let out = train_offline(&cfg, &records, Some(eval_set()), |_, _| Ok(())).unwrap();
    let g = out.log.final_eval_gap().unwrap();
    runs.lock().unwrap().push((key, g));
    g
}

fn c1() -> Outcome {
    let t = Instant::now();
    let targets = [(PdrRule::Spt, 41.6), (PdrRule::Mor, 20.7), (PdrRule::Mwkr, 32.4)];
    let mut pass = true;
    let mut parts = Vec::new();
    for (rule, want) in targets {
        let g = mean_gap(Policy::Rule(rule));
        let ok = (g - want).abs() <= 5.0;
        pass &= ok;
        parts.push(format!(
            "{} {g:.1}% (target {want}±5{})",
            rule.name(),
            if ok { "" } else { ", out" }
        ));
    }
    let secs = t.elapsed().as_secs_f64();
    pass &= secs < 60.0;
    Outcome::new(pass, format!("{}; {secs:.1}s incl. oracle", parts.join(", ")))
}

/// Minimum makespan over every interleaving of the jobs' operation chains,
/// each operation appended at the earliest time after its job and machine.
/// Every semi-active schedule is reached by replaying its operations in
/// start order, so this is the optimum.
fn brute_force(inst: &Instance) -> i64 {
    fn go(
        inst: &Instance,
        next: &mut [usize],
        job: &mut [i64],
        mach: &mut [i64],
        left: usize,
        cur: i64,
        best: &mut i64,
    ) {
        if cur >= *best {
            return;
        }
        if left == 0 {
            *best = cur;
            return;
        }
        for j in 0..next.len() {
            let k = next[j];
            if k == inst.num_machines() {
                continue;
            }
            let m = inst.machine(j, k);
            let end = job[j].max(mach[m]) + inst.proc_time(j, k) as i64;
            let (pj, pm) = (job[j], mach[m]);
            next[j] += 1;
            job[j] = end;
            mach[m] = end;
            go(inst, next, job, mach, left - 1, cur.max(end), best);
            next[j] -= 1;
            job[j] = pj;
            mach[m] = pm;
        }
    }
    let mut best = i64::MAX;
    go(
        inst,
        &mut vec![0; inst.num_jobs()],
        &mut vec![0; inst.num_jobs()],
        &mut vec![0; inst.num_machines()],
        inst.num_ops(),
        0,
        &mut best,
    );
    best
}

fn c2() -> Outcome {
    let shapes = [(3, 3), (2, 4), (4, 2), (2, 3), (3, 2), (1, 9), (9, 1), (2, 2)];
    let mut mismatches = 0;
    for k in 0..50 {
        let (j, m) = shapes[k % shapes.len()];
        let inst = generate_instance(j, m, derive_seed(7000, k as u64)).unwrap();
        let out = solve_exact(&inst, NODE_BUDGET).unwrap();
        let ok = out.optimal
            && validate_schedule(&inst, &out.schedule).is_ok()
            && out.schedule.makespan == brute_force(&inst);
        mismatches += usize::from(!ok);
    }
    let t = Instant::now();
    let mut unproven = 0;
    for k in 0..100 {
        let inst = generate_instance(6, 6, derive_seed(400, k)).unwrap();
        let out = solve_exact(&inst, NODE_BUDGET).unwrap();
        unproven += usize::from(!out.optimal || validate_schedule(&inst, &out.schedule).is_err());
    }
    let secs = t.elapsed().as_secs_f64();
    Outcome::new(
        mismatches == 0 && unproven == 0 && secs < 300.0,
        format!("{mismatches}/50 mismatches vs enumeration; 100 6x6 solved in {secs:.1}s, {unproven} unproven"),
    )
}

fn c3() -> Outcome {
    let spt = mean_gap(Policy::Rule(PdrRule::Spt));
    let g = trained_gap(RewardMode::Normalized);
    Outcome::new(
        g <= 25.0 && g < spt,
        format!("mqrdqn 20000 steps: {g:.2}% (bound 25%), spt {spt:.2}%"),
    )
}

fn c4() -> Outcome {
    let norm = trained_gap(RewardMode::Normalized);
    let raw = trained_gap(RewardMode::Raw);
    Outcome::new(norm <= raw, format!("normalized {norm:.2}% vs raw {raw:.2}%"))
}

fn random_size(rng: &mut Rng64, max: usize) -> (usize, usize) {
    (rng.gen_range(1..=max), rng.gen_range(1..=max))
}

fn random_legal(rng: &mut Rng64, s: &DispatchState) -> usize {
    let legal = s.legal_actions();
    legal[rng.gen_range(0..legal.len())]
}

/// Makespan from start times and processing times alone.
fn makespan_of(inst: &Instance, start: &[i64]) -> i64 {
    (0..inst.num_ops())
        .map(|op| {
            let (j, k) = inst.op_coords(op);
            start[op] + inst.proc_time(j, k) as i64
        })
        .max()
        .unwrap()
}

fn c5() -> Outcome {
    let mut rng = seeded(5);
    let mut bad = 0;
    for e in 0..1000 {
        let (j, m) = random_size(&mut rng, 10);
        let inst = Arc::new(generate_instance(j, m, rng.gen()).unwrap());
        let placement = if e % 4 == 3 {
            Placement::Append
        } else {
            Placement::Insertion
        };
        let mut s = reset_with_placement(Arc::clone(&inst), placement);
        // every operation's bound starts at its job prefix sum
        let lb0 = (0..j)
            .map(|jj| (0..m).map(|k| inst.proc_time(jj, k) as i64).sum::<i64>())
            .max()
            .unwrap();
        let mut total = 0;
        while !s.is_terminal() {
            let a = random_legal(&mut rng, &s);
            total += s.step(a).unwrap();
        }
        let start: Vec<i64> = (0..inst.num_ops()).map(|op| s.start_time(op).unwrap()).collect();
        bad += usize::from(total != lb0 - makespan_of(&inst, &start));
    }
    Outcome::new(
        bad == 0,
        format!("{bad}/1000 rollouts break the identity (sizes up to 10x10)"),
    )
}

/// Kahn's algorithm.
fn acyclic(n: usize, edges: &[(usize, usize)]) -> bool {
    let mut indeg = vec![0; n];
    let mut out = vec![Vec::new(); n];
    for &(u, v) in edges {
        indeg[v] += 1;
        out[u].push(v);
    }
    let mut q: VecDeque<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
    let mut seen = 0;
    while let Some(u) = q.pop_front() {
        seen += 1;
        for &v in &out[u] {
            indeg[v] -= 1;
            if indeg[v] == 0 {
                q.push_back(v);
            }
        }
    }
    seen == n
}

/// Job chains plus each machine's operations in start order.
fn oriented_edges(inst: &Instance, start: &[i64]) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for j in 0..inst.num_jobs() {
        for k in 1..inst.num_machines() {
            edges.push((inst.op_id(j, k - 1), inst.op_id(j, k)));
        }
    }
    for m in 0..inst.num_machines() {
        let mut ops: Vec<usize> = (0..inst.num_ops())
            .filter(|&op| {
                let (j, k) = inst.op_coords(op);
                inst.machine(j, k) == m
            })
            .collect();
        ops.sort_by_key(|&op| start[op]);
        edges.extend(ops.windows(2).map(|w| (w[0], w[1])));
    }
    edges
}

fn c6() -> Outcome {
    let mut rng = seeded(6);
    let model = Model::<f32>::init(ModelConfig::new(ModelKind::Dmsac), 6).unwrap();
    let mut checked = 0;
    let mut bad = Vec::new();
    let mut check = |name: &str, inst: &Instance, s: &Schedule, state: Option<&DispatchState>| {
        checked += 1;
        let mut ok = validate_schedule(inst, s).is_ok()
            && acyclic(inst.num_ops(), &oriented_edges(inst, &s.start))
            && s.makespan == makespan_of(inst, &s.start);
        if let Some(st) = state {
            let mut edges = oriented_edges(inst, &s.start);
            edges.extend(st.disjunctive_edges());
            ok &= acyclic(inst.num_ops(), &edges);
        }
        if !ok {
            bad.push(name.to_string());
        }
    };
    for k in 0..200u64 {
        let (j, m) = random_size(&mut rng, 8);
        let inst = Arc::new(generate_instance(j, m, derive_seed(66, k)).unwrap());
        for rule in PdrRule::ALL {
            for placement in [Placement::Insertion, Placement::Append] {
                let (s, _) = pdr_rollout_with(Arc::clone(&inst), rule, placement).unwrap();
                check(rule.name(), &inst, &s, None);
            }
        }
        let mut st = reset(Arc::clone(&inst));
        while !st.is_terminal() {
            let a = random_legal(&mut rng, &st);
            st.step(a).unwrap();
        }
        check(
            "random",
            &inst,
            &st.to_schedule(ScheduleSource::Rollout).unwrap(),
            Some(&st),
        );
        let mut st = reset(Arc::clone(&inst));
        while !st.is_terminal() {
            let a = model.greedy_action(&st.observe(100.0)).unwrap();
            st.step(a).unwrap();
        }
        check(
            "model",
            &inst,
            &st.to_schedule(ScheduleSource::Rollout).unwrap(),
            Some(&st),
        );
        if inst.num_ops() <= 36 {
            let s = solve_exact(&inst, NODE_BUDGET).unwrap().schedule;
            check("exact", &inst, &s, None);
            let rec = make_expert_dataset(&[(Arc::clone(&inst), s)]).unwrap();
            for noisy in make_noisy_dataset(&rec, 1.0, 0.5, k).unwrap() {
                let mut st = reset(Arc::clone(&inst));
                for &a in &noisy.actions {
                    st.step(a).unwrap();
                }
                check(
                    "noisy",
                    &inst,
                    &st.to_schedule(ScheduleSource::Rollout).unwrap(),
                    Some(&st),
                );
            }
        }
    }
    bad.dedup();
    Outcome::new(
        bad.is_empty(),
        format!("{checked} schedules from rules, random, model, oracle and noisy episodes; failing producers {bad:?}"),
    )
}

const H: f64 = 1e-6;

/// Value bounded away from the relu and unit-huber kinks.
fn smooth(rng: &mut Rng64) -> f64 {
    let mag = if rng.gen_bool(0.5) {
        rng.gen_range(0.1..0.9)
    } else {
        rng.gen_range(1.2..2.7)
    };
    if rng.gen_bool(0.5) {
        mag
    } else {
        -mag
    }
}

fn tensor(rng: &mut Rng64, r: usize, c: usize) -> Tensor<f64> {
    Tensor::new(r, c, (0..r * c).map(|_| smooth(rng)).collect()).unwrap()
}

fn mask(rng: &mut Rng64, r: usize, c: usize) -> Vec<bool> {
    let mut m: Vec<bool> = (0..r * c).map(|_| rng.gen_bool(0.6)).collect();
    for i in 0..r {
        m[i * c + rng.gen_range(0..c)] = true;
    }
    m
}

fn legal_actions(rng: &mut Rng64, m: &[bool], c: usize) -> Vec<usize> {
    m.chunks(c)
        .map(|row| {
            let l: Vec<usize> = (0..c).filter(|&i| row[i]).collect();
            l[rng.gen_range(0..l.len())]
        })
        .collect()
}

/// Largest `|analytic − numeric| / (1e-4 · scale)` over every parameter
/// entry; at most 1 means the check passes.
fn fd_ratio(store: &mut ParamStore<f64>, build: &dyn Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var) -> f64 {
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = build(&mut tape, store);
    tape.backward(loss, store).unwrap();
    let mut worst = 0.0f64;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for k in 0..store.value(id).len() {
            let orig = store.value(id).data()[k];
            let mut at = |x: f64| {
                store.value_mut(id).data_mut()[k] = x;
                let mut t = Tape::new();
                let l = build(&mut t, store);
                t.value(l).item()
            };
            let numeric = (at(orig + H) - at(orig - H)) / (2.0 * H);
            store.value_mut(id).data_mut()[k] = orig;
            let a = store.grad(id).data()[k];
            let scale = a.abs().max(numeric.abs()).max(1e-2);
            worst = worst.max((a - numeric).abs() / (1e-4 * scale));
        }
    }
    worst
}

type Case = Box<dyn Fn(&mut Tape<f64>, &[Var], &mut Rng64) -> Var>;

/// Reduces any output to a scalar with distinct fixed weights per entry.
fn reduce(t: &mut Tape<f64>, v: Var) -> Var {
    let (r, c) = t.shape(v);
    let w: Vec<f64> = (0..r * c).map(|i| 0.3 + (i % 7) as f64 * 0.17).collect();
    let w = t.constant(Tensor::new(r, c, w).unwrap());
    let p = t.mul(v, w).unwrap();
    t.sum(p)
}

type NamedCase = (&'static str, Vec<(usize, usize)>, Case);

fn op_cases() -> Vec<NamedCase> {
    // (name, parameter shapes as (rows, cols) with 0 = reuse r/c draws, builder)
    vec![
        (
            "matmul",
            vec![(3, 4), (4, 2)],
            Box::new(|t, v, _| {
                let o = t.matmul(v[0], v[1]).unwrap();
                reduce(t, o)
            }),
        ),
        (
            "add",
            vec![(3, 4), (3, 4)],
            Box::new(|t, v, _| {
                let o = t.add(v[0], v[1]).unwrap();
                reduce(t, o)
            }),
        ),
        (
            "sub",
            vec![(3, 4), (3, 4)],
            Box::new(|t, v, _| {
                let o = t.sub(v[0], v[1]).unwrap();
                reduce(t, o)
            }),
        ),
        (
            "mul",
            vec![(3, 4), (3, 4)],
            Box::new(|t, v, _| {
                let o = t.mul(v[0], v[1]).unwrap();
                reduce(t, o)
            }),
        ),
        (
            "add_row",
            vec![(3, 4), (1, 4)],
            Box::new(|t, v, _| {
                let o = t.add_row(v[0], v[1]).unwrap();
                reduce(t, o)
            }),
        ),
        (
            "scale",
            vec![(3, 4)],
            Box::new(|t, v, _| {
                let o = t.scale(v[0], -1.7);
                reduce(t, o)
            }),
        ),
        (
            "neg",
            vec![(3, 4)],
            Box::new(|t, v, _| {
                let o = t.neg(v[0]);
                reduce(t, o)
            }),
        ),
        (
            "add_scalar",
            vec![(3, 4)],
            Box::new(|t, v, _| {
                let o = t.add_scalar(v[0], 0.4);
                reduce(t, o)
            }),
        ),
        (
            "relu",
            vec![(3, 4)],
            Box::new(|t, v, _| {
                let o = t.relu(v[0]);
                reduce(t, o)
            }),
        ),
        (
            "exp",
            vec![(3, 4)],
            Box::new(|t, v, _| {
                let o = t.exp(v[0]);
                reduce(t, o)
            }),
        ),
        (
            "dropout",
            vec![(4, 5)],
            Box::new(|t, v, _| {
                let o = t.dropout(v[0], 0.4, true, &mut seeded(1)).unwrap();
                reduce(t, o)
            }),
        ),
        (
            "sum",
            vec![(3, 4)],
            Box::new(|t, v, _| {
                let o = t.sum(v[0]);
                reduce(t, o)
            }),
        ),
        (
            "mean",
            vec![(3, 4)],
            Box::new(|t, v, _| {
                let o = t.mean(v[0]).unwrap();
                reduce(t, o)
            }),
        ),
        (
            "mean_cols",
            vec![(3, 4)],
            Box::new(|t, v, _| {
                let o = t.mean_cols(v[0]).unwrap();
                reduce(t, o)
            }),
        ),
        (
            "sum_segments",
            vec![(5, 3)],
            Box::new(|t, v, _| {
                let o = t.sum_segments(v[0], &[2, 0, 2, 1, 0], 4).unwrap();
                reduce(t, o)
            }),
        ),
        (
            "gather_rows",
            vec![(4, 3)],
            Box::new(|t, v, _| {
                let o = t.gather_rows(v[0], &[3, 0, 3, 1, 1]).unwrap();
                reduce(t, o)
            }),
        ),
        (
            "gather_cols",
            vec![(3, 4)],
            Box::new(|t, v, _| {
                let o = t.gather_cols(v[0], &[1, 1, 3, 0, 2, 3]).unwrap();
                reduce(t, o)
            }),
        ),
        (
            "pick_cols",
            vec![(3, 4)],
            Box::new(|t, v, _| {
                let o = t.pick_cols(v[0], &[2, 0, 3]).unwrap();
                reduce(t, o)
            }),
        ),
        (
            "concat",
            vec![(3, 2), (3, 4)],
            Box::new(|t, v, _| {
                let o = t.concat(v[0], v[1]).unwrap();
                reduce(t, o)
            }),
        ),
        (
            "reshape",
            vec![(3, 4)],
            Box::new(|t, v, _| {
                let o = t.reshape(v[0], 6, 2).unwrap();
                reduce(t, o)
            }),
        ),
        (
            "huber",
            vec![(3, 4)],
            Box::new(|t, v, _| {
                let o = t.huber(v[0], 1.0);
                reduce(t, o)
            }),
        ),
        (
            "scale_rows",
            vec![(3, 4)],
            Box::new(|t, v, _| {
                let o = t.scale_rows(v[0], &[0.5, -2.0, 0.0]).unwrap();
                reduce(t, o)
            }),
        ),
        (
            "softmax_masked",
            vec![(3, 4)],
            Box::new(|t, v, r| {
                let m = mask(r, 3, 4);
                let o = t.softmax_masked(v[0], &m).unwrap();
                reduce(t, o)
            }),
        ),
        (
            "log_softmax_masked",
            vec![(3, 4)],
            Box::new(|t, v, r| {
                let m = mask(r, 3, 4);
                let o = t.log_softmax_masked(v[0], &m).unwrap();
                reduce(t, o)
            }),
        ),
        (
            "logsumexp_masked",
            vec![(3, 4)],
            Box::new(|t, v, r| {
                let m = mask(r, 3, 4);
                let o = t.logsumexp_masked(v[0], &m).unwrap();
                reduce(t, o)
            }),
        ),
    ]
}

fn loss_cases() -> Vec<NamedCase> {
    vec![
        (
            "cql",
            vec![(4, 5)],
            Box::new(|t, v, r| {
                let m = mask(r, 4, 5);
                let a = legal_actions(r, &m, 5);
                cql_term(t, v[0], &m, &a, 1.3).unwrap()
            }),
        ),
        (
            "quantile_huber",
            vec![(3, 5)],
            Box::new(|t, v, r| {
                let y = tensor(r, 3, 5);
                qrdqn_loss(t, v[0], &y, 1.0).unwrap()
            }),
        ),
        (
            "mse",
            vec![(4, 1)],
            Box::new(|t, v, r| {
                let y: Vec<f64> = (0..4).map(|_| smooth(r)).collect();
                mse_loss(t, v[0], &y).unwrap()
            }),
        ),
        (
            "cql_plus_half_td",
            vec![(4, 5)],
            Box::new(|t, v, r| {
                let m = mask(r, 4, 5);
                let a = legal_actions(r, &m, 5);
                let y: Vec<f64> = (0..4).map(|_| smooth(r)).collect();
                let qa = t.pick_cols(v[0], &a).unwrap();
                let td = mse_loss(t, qa, &y).unwrap();
                let c = cql_term(t, v[0], &m, &a, 1.0).unwrap();
                total_q_loss(t, c, td).unwrap()
            }),
        ),
        (
            "sac_policy",
            vec![(3, 5)],
            Box::new(|t, v, r| {
                let m = mask(r, 3, 5);
                let (q1, q2) = (tensor(r, 3, 5), tensor(r, 3, 5));
                sac_policy_loss(t, v[0], &m, &q1, &q2, 0.7).unwrap()
            }),
        ),
        (
            "temperature",
            vec![(1, 1)],
            Box::new(|t, v, r| {
                let m = mask(r, 3, 5);
                let mut lt = Tape::new();
                let l = lt.constant(tensor(r, 3, 5));
                let p = lt.softmax_masked(l, &m).unwrap();
                let probs = lt.value(p).clone();
                temperature_loss(t, v[0], &probs, &m, 0.98).unwrap()
            }),
        ),
        (
            "behaviour_cloning",
            vec![(4, 5)],
            Box::new(|t, v, r| {
                let m = mask(r, 4, 5);
                let a = legal_actions(r, &m, 5);
                bc_loss(t, v[0], &m, &a).unwrap()
            }),
        ),
    ]
}

fn c7() -> Outcome {
    let mut failing = Vec::new();
    let mut checks = 0;
    let mut worst = 0.0f64;
    let all: Vec<_> = op_cases().into_iter().chain(loss_cases()).collect();
    for (name, shapes, build) in &all {
        for trial in 0..10u64 {
            let mut rng = seeded(derive_seed(7, trial));
            let mut store = ParamStore::new();
            let ids: Vec<_> = shapes
                .iter()
                .enumerate()
                .map(|(i, &(r, c))| store.insert(format!("x{i}"), tensor(&mut rng, r, c)).unwrap())
                .collect();
            let case_seed = rng.gen::<u64>();
            let ratio = fd_ratio(&mut store, &|t, s| {
                let vars: Vec<Var> = ids.iter().map(|&id| t.param(s, id)).collect();
                build(t, &vars, &mut seeded(case_seed))
            });
            checks += 1;
            worst = worst.max(ratio);
            if ratio > 1.0 && !failing.contains(name) {
                failing.push(*name);
            }
        }
    }
    // the whole model through the quantile and actor-critic objectives
    for (kind, seed) in [(ModelKind::Mqrdqn, 1u64), (ModelKind::Dmsac, 2), (ModelKind::Bc, 3)] {
        let cfg = ModelConfig {
            hidden: 5,
            head_hidden: 4,
            n_quantiles: 3,
            ..ModelConfig::new(kind)
        };
        let mut model = Model::<f64>::init(cfg.clone(), seed).unwrap();
        // zero biases can leave a pre-activation exactly on the relu kink
        let mut brng = seeded(seed + 100);
        for id in model.params.ids().collect::<Vec<_>>() {
            if model
                .params
                .name(id)
                .rsplit('.')
                .next()
                .is_some_and(|l| l.starts_with('b'))
            {
                for x in model.params.value_mut(id).data_mut() {
                    *x = brng.gen_range(-0.5..0.5);
                }
            }
        }
        let mut st = reset(Arc::new(generate_instance(3, 3, seed).unwrap()));
        let o0 = st.observe(100.0);
        st.step(1).unwrap();
        st.step(2).unwrap();
        let o1 = st.observe(100.0);
        let gb = GraphBatch::new(&[&o0, &o1]).unwrap();
        let actions = [0usize, 1];
        let mut rng = seeded(seed);
        let (c1, c2) = (tensor(&mut rng, 2, 3), tensor(&mut rng, 2, 3));
        let y = tensor(&mut rng, 2, 3);
        let ratio = fd_ratio(&mut model.params, &|t, s| {
            let m = Model {
                config: cfg.clone(),
                params: s.clone(),
            };
            let mut drop = seeded(11);
            let (h, g) = m.encode(t, &gb, Grad::Track).unwrap();
            match kind {
                ModelKind::Mqrdqn => {
                    let q = m
                        .score_actions(t, "q", h, g, &gb, Grad::Track, true, &mut drop)
                        .unwrap();
                    let pred = t.gather_rows(q, &[actions[0], 3 + actions[1]]).unwrap();
                    let td = qrdqn_loss(t, pred, &y, 1.0).unwrap();
                    let qm = t.mean_cols(q).unwrap();
                    let qm = t.reshape(qm, 2, 3).unwrap();
                    let c = cql_term(t, qm, &gb.mask, &actions, 1.0).unwrap();
                    total_q_loss(t, c, td).unwrap()
                }
                ModelKind::Dmsac => {
                    let q = m.forward_head(t, "q1", &gb, Grad::Track, true, &mut drop).unwrap();
                    let qa = t.pick_cols(q, &actions).unwrap();
                    let td = mse_loss(t, qa, &[0.1, -0.2]).unwrap();
                    let c = cql_term(t, q, &gb.mask, &actions, 1.0).unwrap();
                    let critic = total_q_loss(t, c, td).unwrap();
                    let lg = m
                        .score_actions(t, "policy", h, g, &gb, Grad::Track, false, &mut drop)
                        .unwrap();
                    let lg = m.per_job(t, lg, &gb).unwrap();
                    let p = sac_policy_loss(t, lg, &gb.mask, &c1, &c2, 0.5).unwrap();
                    t.add(critic, p).unwrap()
                }
                ModelKind::Bc => {
                    let lg = m
                        .score_actions(t, "policy", h, g, &gb, Grad::Track, false, &mut drop)
                        .unwrap();
                    let lg = m.per_job(t, lg, &gb).unwrap();
                    bc_loss(t, lg, &gb.mask, &actions).unwrap()
                }
            }
        });
        checks += 1;
        worst = worst.max(ratio);
        if ratio > 1.0 {
            failing.push(kind.name());
        }
    }
    // detach is a stop-gradient, so finite differences do not apply; its
    // gradient must be exactly zero and its value unchanged
    let mut store = ParamStore::new();
    let x = store.insert("x", tensor(&mut seeded(70), 3, 4)).unwrap();
    let mut t = Tape::new();
    let v = t.param(&store, x);
    let d = t.detach(v);
    let same = t.value(d) == t.value(v);
    let o = reduce(&mut t, d);
    t.backward(o, &mut store).unwrap();
    if !same || store.grad(x).data().iter().any(|&g| g != 0.0) {
        failing.push("detach");
    }
    Outcome::new(
        failing.is_empty(),
        format!(
            "{} ops plus detach, {} losses, 3 full models; {checks} checks, worst error {:.3} of tolerance; failing {failing:?}",
            op_cases().len(),
            loss_cases().len(),
            worst
        ),
    )
}

fn random_state(rng: &mut Rng64) -> DispatchState {
    let (j, m) = (rng.gen_range(2..=8), rng.gen_range(1..=8));
    let inst = Arc::new(generate_instance(j, m, rng.gen()).unwrap());
    let mut s = reset(inst);
    let steps = rng.gen_range(0..j * m);
    for _ in 0..steps {
        let a = random_legal(rng, &s);
        s.step(a).unwrap();
    }
    s
}

fn c8() -> Outcome {
    let mut rng = seeded(8);
    let q_model = Model::<f32>::init(ModelConfig::new(ModelKind::Mqrdqn), 81).unwrap();
    let ac_model = Model::<f32>::init(ModelConfig::new(ModelKind::Dmsac), 82).unwrap();
    let ac64 = Model {
        config: ac_model.config.clone(),
        params: ac_model.params.cast::<f64>(),
    };
    let mut violations = [0usize; 5];
    let n = 10_000;
    for _ in 0..n {
        let s = random_state(&mut rng);
        let obs = s.observe(100.0);
        let mask = obs.mask.clone();
        let j = mask.len();
        let gb = GraphBatch::new(&[&obs]).unwrap();
        let mut t = Tape::new();
        let mut drop = seeded(0);
        let logits = ac64
            .forward_head(&mut t, "policy", &gb, Grad::Frozen, false, &mut drop)
            .unwrap();
        let q1 = ac64
            .forward_head(&mut t, "q1", &gb, Grad::Frozen, false, &mut drop)
            .unwrap();
        let q2 = ac64
            .forward_head(&mut t, "q2", &gb, Grad::Frozen, false, &mut drop)
            .unwrap();
        let (lv, q1v, q2v) = (t.value(logits).clone(), t.value(q1).clone(), t.value(q2).clone());
        // zero probability
        let p = t.softmax_masked(logits, &mask).unwrap();
        let probs = t.value(p).clone();
        if (0..j).any(|c| !mask[c] && probs.data()[c] != 0.0) {
            violations[0] += 1;
        }
        // CQL logsumexp: no value, no gradient from masked entries
        let a = legal_actions(&mut rng, &mask, j)[0];
        let mut poisoned = q1v.clone();
        for c in (0..j).filter(|&c| !mask[c]) {
            poisoned.data_mut()[c] = 1e6 * (c as f64 + 1.0);
        }
        let mut store = ParamStore::new();
        let qid = store.insert("q", poisoned).unwrap();
        let mut t2 = Tape::new();
        let qv = t2.param(&store, qid);
        let cql = cql_term(&mut t2, qv, &mask, &[a], 1.0).unwrap();
        let clean_cql = {
            let mut t3 = Tape::new();
            let c = t3.constant(q1v.clone());
            let l = cql_term(&mut t3, c, &mask, &[a], 1.0).unwrap();
            t3.value(l).item()
        };
        let cql_val = t2.value(cql).item();
        t2.backward(cql, &mut store).unwrap();
        if cql_val != clean_cql || (0..j).any(|c| !mask[c] && store.grad(qid).data()[c] != 0.0) {
            violations[1] += 1;
        }
        // SAC expectations: policy loss and soft target ignore masked entries
        let mut pq1 = q1v.clone();
        let mut pq2 = q2v.clone();
        let mut pprobs = probs.data().to_vec();
        for c in (0..j).filter(|&c| !mask[c]) {
            pq1.data_mut()[c] = -1e6;
            pq2.data_mut()[c] = 1e6;
            pprobs[c] = 0.9;
        }
        let mut ls = ParamStore::new();
        let lid = ls.insert("logits", lv.clone()).unwrap();
        let mut t4 = Tape::new();
        let lvv = t4.param(&ls, lid);
        let pol = sac_policy_loss(&mut t4, lvv, &mask, &pq1, &pq2, 0.3).unwrap();
        let pol_val = t4.value(pol).item();
        t4.backward(pol, &mut ls).unwrap();
        let clean_pol = {
            let mut t5 = Tape::new();
            let c = t5.constant(lv.clone());
            let l = sac_policy_loss(&mut t5, c, &mask, &q1v, &q2v, 0.3).unwrap();
            t5.value(l).item()
        };
        let target = sac_q_target(0.0, &pprobs, pq1.data(), pq2.data(), &mask, false, 1.0);
        let clean_target = sac_q_target(0.0, probs.data(), q1v.data(), q2v.data(), &mask, false, 1.0);
        if pol_val != clean_pol || target != clean_target || (0..j).any(|c| !mask[c] && ls.grad(lid).data()[c] != 0.0) {
            violations[2] += 1;
        }
        // greedy evaluation
        let g1 = q_model.greedy_action(&obs).unwrap();
        let g2 = ac_model.greedy_action(&obs).unwrap();
        if !mask[g1] || !mask[g2] || masked_argmax(pq1.data(), &mask).is_none_or(|g| !mask[g]) {
            violations[3] += 1;
        }
        // quantile bootstrap picks an available next action
        let nq = 4;
        let quant: Vec<f64> = (0..j * nq)
            .map(|i| if mask[i / nq] { smooth(&mut rng) } else { 1e9 })
            .collect();
        let tgt = qrdqn_target(0.0, &quant, nq, &mask, false, 1.0).unwrap();
        if tgt.iter().any(|&x| x >= 1e8) {
            violations[4] += 1;
        }
    }
    let total: usize = violations.iter().sum();
    Outcome::new(
        total == 0,
        format!(
            "{n} states; violations probability/cql/sac/greedy/bootstrap = {:?}",
            violations
        ),
    )
}

fn c9() -> Outcome {
    let mut rng = seeded(9);
    let (mut negative, mut mismatch) = (0, 0);
    let n = 10_000;
    for _ in 0..n {
        let (b, j) = (rng.gen_range(1..=8), rng.gen_range(1..=10));
        let q: Vec<f64> = (0..b * j).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let m = mask(&mut rng, b, j);
        let a = legal_actions(&mut rng, &m, j);
        let y: Vec<f64> = (0..b).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let alpha = rng.gen_range(0.0..3.0);
        let mut t = Tape::new();
        let qv = t.constant(Tensor::new(b, j, q.clone()).unwrap());
        let cql = cql_term(&mut t, qv, &m, &a, alpha).unwrap();
        let qa = t.pick_cols(qv, &a).unwrap();
        let td = mse_loss(&mut t, qa, &y).unwrap();
        let total = total_q_loss(&mut t, cql, td).unwrap();
        let (cv, tv) = (t.value(cql).item(), t.value(total).item());
        negative += usize::from(cv < 0.0);
        // scalar reimplementation
        let mut reg = 0.0;
        let mut sq = 0.0;
        for i in 0..b {
            let row = &q[i * j..(i + 1) * j];
            let mx = (0..j)
                .filter(|&c| m[i * j + c])
                .map(|c| row[c])
                .fold(f64::MIN, f64::max);
            let lse = mx
                + (0..j)
                    .filter(|&c| m[i * j + c])
                    .map(|c| (row[c] - mx).exp())
                    .sum::<f64>()
                    .ln();
            reg += lse - row[a[i]];
            sq += (row[a[i]] - y[i]).powi(2);
        }
        let want = alpha * reg / b as f64 + 0.5 * sq / b as f64;
        mismatch += usize::from((tv - want).abs() > 1e-9 * want.abs().max(1.0));
    }
    Outcome::new(
        negative == 0 && mismatch == 0,
        format!("{n} random batches: {negative} negative CQL values, {mismatch} total-loss mismatches"),
    )
}

/// Random feasible schedule: random dispatch order, each operation after
/// its job and machine predecessors plus a random idle gap.
fn random_valid_schedule(rng: &mut Rng64, inst: &Instance) -> Schedule {
    let (j, m) = (inst.num_jobs(), inst.num_machines());
    let mut next = vec![0; j];
    let mut job = vec![0i64; j];
    let mut mach = vec![0i64; m];
    let mut start = vec![0i64; inst.num_ops()];
    for _ in 0..inst.num_ops() {
        let open: Vec<usize> = (0..j).filter(|&x| next[x] < m).collect();
        let x = open[rng.gen_range(0..open.len())];
        let k = next[x];
        let mc = inst.machine(x, k);
        let s = job[x].max(mach[mc]) + if rng.gen_bool(0.3) { rng.gen_range(0..20) } else { 0 };
        start[inst.op_id(x, k)] = s;
        job[x] = s + inst.proc_time(x, k) as i64;
        mach[mc] = job[x];
        next[x] += 1;
    }
    Schedule::from_starts(inst, start, ScheduleSource::External)
}

fn c10() -> Outcome {
    let mut exact_bad = 0;
    for (inst, s) in train_items() {
        let actions = schedule_to_actions(inst, s).unwrap();
        let mut st = reset(Arc::clone(inst));
        for &a in &actions {
            st.step(a).unwrap();
        }
        let start: Vec<i64> = (0..inst.num_ops()).map(|op| st.start_time(op).unwrap()).collect();
        exact_bad += usize::from(makespan_of(inst, &start) != s.makespan);
    }
    let mut rng = seeded(10);
    let mut worse = 0;
    let n = 500;
    for _ in 0..n {
        let (j, m) = random_size(&mut rng, 8);
        let inst = Arc::new(generate_instance(j, m, rng.gen()).unwrap());
        let s = random_valid_schedule(&mut rng, &inst);
        assert!(validate_schedule(&inst, &s).is_ok());
        let actions = schedule_to_actions(&inst, &s).unwrap();
        let mut st = reset(Arc::clone(&inst));
        for &a in &actions {
            st.step(a).unwrap();
        }
        let start: Vec<i64> = (0..inst.num_ops()).map(|op| st.start_time(op).unwrap()).collect();
        worse += usize::from(makespan_of(&inst, &start) > s.makespan);
    }
    Outcome::new(
        exact_bad == 0 && worse == 0,
        format!("{exact_bad}/100 oracle replays differ; {worse}/{n} arbitrary schedules replay longer"),
    )
}

fn cli(args: &[&str]) {
    let mut full = vec!["offld"];
    full.extend_from_slice(args);
    assert_eq!(offld_cli::run_args(&full), 0, "offld {}", args.join(" "));
}

fn c11() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let (ti, ei, sol, esol) = (d.join("ti"), d.join("ei"), d.join("sol"), d.join("esol"));
    cli(&[
        "gen-instances",
        "--jobs",
        "5",
        "--machines",
        "5",
        "--count",
        "20",
        "--out",
        &s(&ti),
    ]);
    cli(&[
        "--seed",
        "300",
        "gen-instances",
        "--jobs",
        "5",
        "--machines",
        "5",
        "--count",
        "10",
        "--out",
        &s(&ei),
    ]);
    cli(&["solve", "--instances", &s(&ti), "--exact", "--out", &s(&sol)]);
    cli(&["solve", "--instances", &s(&ei), "--exact", "--out", &s(&esol)]);
    let ds = d.join("data.txt");
    cli(&[
        "make-dataset",
        "--instances",
        &s(&ti),
        "--solutions",
        &s(&sol),
        "--noisy",
        "--out",
        &s(&ds),
    ]);
    let config = d.join("train.cfg");
    std::fs::write(
        &config,
        format!(
            "method = dmsac\nsteps = 300\nbatch_size = 32\nseed = 600\neval_every = 100\ncheckpoint_every = 100\n\
             log_every = 25\ndataset = {}\neval_instances = {}\neval_refs = {}\n",
            s(&ds),
            s(&ei),
            s(&esol.join("refs.txt"))
        ),
    )
    .unwrap();
    let runs = [d.join("a"), d.join("b")];
    for r in &runs {
        cli(&["train", "--config", &s(&config), "--out", &s(r)]);
    }
    cli(&[
        "train",
        "--config",
        &s(&config),
        "--set",
        "seed=601",
        "--out",
        &s(&d.join("c")),
    ]);
    let files = [
        "checkpoint.bin",
        "checkpoint_100.bin",
        "checkpoint_200.bin",
        "train_log.csv",
        "config.txt",
    ];
    let mut differing = Vec::new();
    for f in files {
        if std::fs::read(runs[0].join(f)).unwrap() != std::fs::read(runs[1].join(f)).unwrap() {
            differing.push(f);
        }
    }
    let other_seed_differs = std::fs::read(runs[0].join("checkpoint.bin")).unwrap()
        != std::fs::read(d.join("c").join("checkpoint.bin")).unwrap();
    Outcome::new(
        differing.is_empty() && other_seed_differs,
        format!(
            "two dmsac runs, {} artifacts compared, differing {differing:?}; another seed differs: {other_seed_differs}",
            files.len()
        ),
    )
}

fn main() {
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut suite = Suite::default();
    suite.run(&filter, 1, "dispatching-rule gaps on 100 fresh 6x6 instances", c1);
    suite.run(&filter, 2, "exact oracle validity and speed", c2);
    suite.run(&filter, 3, "mQRDQN training smoke test", c3);
    suite.run(&filter, 4, "normalized rewards beat raw rewards", c4);
    suite.run(&filter, 5, "reward telescoping", c5);
    suite.run(&filter, 6, "schedule feasibility and acyclic graphs", c6);
    suite.run(&filter, 7, "finite-difference gradient checks", c7);
    suite.run(&filter, 8, "masking soundness", c8);
    suite.run(&filter, 9, "CQL non-negativity and total loss", c9);
    suite.run(&filter, 10, "replay identity", c10);
    suite.run(&filter, 11, "train determinism through the CLI", c11);
    std::process::exit(suite.finish());
}
