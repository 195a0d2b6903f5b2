//! `offld`: command-line front end for offline learned dispatching.
//!
//! [`run_args`] is the whole program; the binary only forwards its
//! arguments and exit code.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Args, Parser, Subcommand};
use rayon::prelude::*;

use offld_core::dataset::{
    load_dataset, make_expert_dataset, make_noisy_dataset, save_dataset, Dataset, DatasetMeta, RewardMode,
};
use offld_core::exact::{
    parse_references, parse_solution, solve_exact, validate_schedule, write_references, write_solution,
};
use offld_core::instances::{generate_instance, read_instance_dir, write_taillard, Instance};
use offld_core::model::{load_checkpoint, save_checkpoint};
use offld_core::pdr::{pdr_rollout, PdrRule};
use offld_core::pipeline::{evaluate, report, train_offline, EvalReport, EvalSet, Policy, TrainConfig};
use offld_core::rng::derive_seed;

#[derive(Debug, Parser)]
#[command(
    name = "offld",
    version,
    about = "Offline learned dispatching for job shop scheduling"
)]
struct Cli {
    /// Seed for every random choice of the command (command-specific default).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for instance-parallel phases.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate random instances (default seed 200).
    GenInstances(GenArgs),
    /// Solve instances with a dispatching rule or the exact oracle.
    Solve(SolveArgs),
    /// Validate external solution files and write a reference table.
    ImportSolutions(ImportArgs),
    /// Build an expert or noisy-expert dataset (default seed 0).
    MakeDataset(DatasetArgs),
    /// Train offline from a dataset (default seed 600).
    Train(TrainArgs),
    /// Greedy evaluation of a checkpoint or a rule.
    Eval(EvalArgs),
    /// Compare evaluation CSVs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long)]
    jobs: usize,
    #[arg(long)]
    machines: usize,
    #[arg(long)]
    count: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// File name prefix.
    #[arg(long, default_value = "inst")]
    prefix: String,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("solver").required(true).args(["rule", "exact"])))]
struct SolveArgs {
    /// Directory of instance `.txt` files.
    #[arg(long)]
    instances: PathBuf,
    /// Dispatching rule: spt, mor or mwkr.
    #[arg(long)]
    rule: Option<PdrRule>,
    /// Use the branch-and-bound oracle.
    #[arg(long)]
    exact: bool,
    /// Node budget per instance for --exact.
    #[arg(long, default_value_t = 20_000_000)]
    node_budget: u64,
    /// Output directory for `<name>.sol` files and `refs.txt`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ImportArgs {
    #[arg(long)]
    instances: PathBuf,
    /// Directory holding `<name>.sol` for every instance.
    #[arg(long)]
    solutions: PathBuf,
    /// Reference table to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DatasetArgs {
    #[arg(long)]
    instances: PathBuf,
    /// Directory holding `<name>.sol` for every instance.
    #[arg(long)]
    solutions: PathBuf,
    /// Inject epsilon-greedy noise into a fraction of episodes.
    #[arg(long)]
    noisy: bool,
    #[arg(long, default_value_t = 0.5)]
    p_noisy: f64,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    /// Reward mode recorded in the manifest: normalized, raw or scaled:<c>.
    #[arg(long, default_value = "normalized")]
    reward_mode: RewardMode,
    /// Dataset file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// mqrdqn, dmsac or bc.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    eval_instances: Option<PathBuf>,
    #[arg(long)]
    eval_refs: Option<PathBuf>,
    /// Extra `key=value` settings, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory for the checkpoint, log and effective config.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("policy").required(true).args(["checkpoint", "rule"])))]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    rule: Option<PdrRule>,
    #[arg(long)]
    instances: PathBuf,
    /// Reference table (`<name> <makespan>` per line).
    #[arg(long)]
    refs: Option<PathBuf>,
    /// Evaluation CSV to write; printed to stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Evaluation CSVs; each file stem names its method.
    #[arg(long, required = true, num_args = 1..)]
    reports: Vec<PathBuf>,
    /// Summary CSV to write.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn banner(cmd: &str, settings: &[(&str, String)]) {
    let parts: Vec<String> = settings.iter().map(|(k, v)| format!("{k}={v}")).collect();
    eprintln!("# offld {cmd} {}", parts.join(" "));
}

fn read_refs(path: &Path) -> Result<Vec<(String, i64)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_references(&text)?)
}

fn read_instances(dir: &Path) -> Result<Vec<(String, Instance)>> {
    let v = read_instance_dir(dir).with_context(|| format!("reading instances from {}", dir.display()))?;
    if v.is_empty() {
        bail!(offld_core::Error::Data(format!(
            "no .txt instances in {}",
            dir.display()
        )));
    }
    Ok(v)
}

fn read_solutions(
    named: &[(String, Instance)],
    dir: &Path,
) -> Result<Vec<(Arc<Instance>, offld_core::exact::Schedule)>> {
    named
        .iter()
        .map(|(name, inst)| {
            let p = dir.join(format!("{name}.sol"));
            let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            let s = parse_solution(inst, &text).with_context(|| p.display().to_string())?;
            validate_schedule(inst, &s)
                .map_err(offld_core::Error::Validation)
                .with_context(|| p.display().to_string())?;
            Ok((Arc::new(inst.clone()), s))
        })
        .collect()
}

fn gen_instances(seed: u64, a: &GenArgs) -> Result<()> {
    banner(
        "gen-instances",
        &[
            ("jobs", a.jobs.to_string()),
            ("machines", a.machines.to_string()),
            ("count", a.count.to_string()),
            ("seed", seed.to_string()),
            ("out", a.out.display().to_string()),
            ("prefix", a.prefix.clone()),
        ],
    );
    fs::create_dir_all(&a.out)?;
    let width = a.count.saturating_sub(1).to_string().len().max(3);
    for k in 0..a.count {
        let inst = generate_instance(a.jobs, a.machines, derive_seed(seed, k as u64))?;
        fs::write(
            a.out.join(format!("{}_{k:0width$}.txt", a.prefix)),
            write_taillard(&inst),
        )?;
    }
    Ok(())
}

fn solve(a: &SolveArgs) -> Result<()> {
    let named = read_instances(&a.instances)?;
    let method = match a.rule {
        Some(r) => r.to_string(),
        None => "exact".into(),
    };
    banner(
        "solve",
        &[
            ("instances", a.instances.display().to_string()),
            ("method", method),
            ("node_budget", a.node_budget.to_string()),
            ("out", a.out.display().to_string()),
        ],
    );
    fs::create_dir_all(&a.out)?;
    let solved = named
        .par_iter()
        .map(|(name, inst)| {
            let sched = match a.rule {
                Some(rule) => pdr_rollout(Arc::new(inst.clone()), rule)?.0,
                None => {
                    let o = solve_exact(inst, a.node_budget)?;
                    if !o.optimal {
                        eprintln!(
                            "warning: {name}: node budget exhausted, best makespan {}",
                            o.schedule.makespan
                        );
                    }
                    o.schedule
                }
            };
            Ok((name.clone(), write_solution(inst, &sched), sched.makespan))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut refs = Vec::new();
    for (name, text, c) in solved {
        fs::write(a.out.join(format!("{name}.sol")), text)?;
        refs.push((name, c));
    }
    fs::write(a.out.join("refs.txt"), write_references(&refs))?;
    Ok(())
}

fn import_solutions(a: &ImportArgs) -> Result<()> {
    banner(
        "import-solutions",
        &[
            ("instances", a.instances.display().to_string()),
            ("solutions", a.solutions.display().to_string()),
            ("out", a.out.display().to_string()),
        ],
    );
    let named = read_instances(&a.instances)?;
    let sols = read_solutions(&named, &a.solutions)?;
    let refs: Vec<(String, i64)> = named
        .iter()
        .zip(&sols)
        .map(|((n, _), (_, s))| (n.clone(), s.makespan))
        .collect();
    fs::write(&a.out, write_references(&refs))?;
    Ok(())
}

fn make_dataset(seed: u64, a: &DatasetArgs) -> Result<()> {
    banner(
        "make-dataset",
        &[
            ("instances", a.instances.display().to_string()),
            ("solutions", a.solutions.display().to_string()),
            ("noisy", a.noisy.to_string()),
            ("p_noisy", a.p_noisy.to_string()),
            ("epsilon", a.epsilon.to_string()),
            ("reward_mode", a.reward_mode.to_string()),
            ("seed", seed.to_string()),
            ("out", a.out.display().to_string()),
        ],
    );
    let named = read_instances(&a.instances)?;
    let expert = make_expert_dataset(&read_solutions(&named, &a.solutions)?)?;
    let (records, meta) = if a.noisy {
        (
            make_noisy_dataset(&expert, a.p_noisy, a.epsilon, seed)?,
            DatasetMeta {
                reward_mode: a.reward_mode,
                p_noisy: a.p_noisy,
                epsilon: a.epsilon,
                seed: Some(seed),
            },
        )
    } else {
        (
            expert,
            DatasetMeta {
                reward_mode: a.reward_mode,
                ..DatasetMeta::default()
            },
        )
    };
    let ds = Dataset { meta, records };
    save_dataset(&ds, &a.out)?;
    eprintln!("wrote {} episodes ({} noisy)", ds.records.len(), ds.noisy_count());
    Ok(())
}

fn eval_set(instances: &Path, refs: Option<&Path>) -> Result<EvalSet> {
    let named = read_instances(instances)?;
    let refs = match refs {
        Some(p) => read_refs(p)?,
        None => Vec::new(),
    };
    Ok(EvalSet::new(named, &refs))
}

fn train(seed: Option<u64>, a: &TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::default();
    if let Some(p) = &a.config {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        cfg.apply_text(&text).with_context(|| p.display().to_string())?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(m) = &a.method {
        cfg.set("method", m)?;
    }
    if let Some(d) = &a.dataset {
        cfg.dataset = Some(d.clone());
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(p) = &a.eval_instances {
        cfg.eval_instances = Some(p.clone());
    }
    if let Some(p) = &a.eval_refs {
        cfg.eval_refs = Some(p.clone());
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    let text = cfg.to_text();
    for line in text.lines() {
        eprintln!("# {line}");
    }
    let Some(ds_path) = cfg.dataset.clone() else {
        bail!(offld_core::Error::Config(
            "no dataset given (--dataset or `dataset =`)".into()
        ));
    };
    let ds = load_dataset(&ds_path).with_context(|| ds_path.display().to_string())?;
    let eval = match &cfg.eval_instances {
        Some(dir) => Some(eval_set(dir, cfg.eval_refs.as_deref())?),
        None => None,
    };
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("config.txt"), &text)?;
    let out = train_offline(&cfg, &ds.records, eval.as_ref(), |step, m| {
        save_checkpoint(m, &a.out.join(format!("checkpoint_{step}.bin")))
    })?;
    save_checkpoint(&out.model, &a.out.join("checkpoint.bin"))?;
    fs::write(a.out.join("train_log.csv"), out.log.to_csv())?;
    if let Some(g) = out.log.final_eval_gap() {
        eprintln!("final eval gap {g:.2}%");
    }
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let set = eval_set(&a.instances, a.refs.as_deref())?;
    let model = a.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let policy = match (&model, a.rule) {
        (Some(m), _) => Policy::Model(m),
        (None, Some(r)) => Policy::Rule(r),
        (None, None) => unreachable!("clap requires one of --checkpoint and --rule"),
    };
    banner(
        "eval",
        &[
            ("policy", policy.tag()),
            (
                "checkpoint",
                a.checkpoint
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
            ),
            ("instances", a.instances.display().to_string()),
            (
                "refs",
                a.refs.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ),
        ],
    );
    let rep = evaluate(&policy, &set)?;
    if rep.skipped() > 0 {
        eprintln!("warning: {} instances without a reference were skipped", rep.skipped());
    }
    if let (Some(m), Some(s)) = (rep.mean_gap(), rep.std_gap()) {
        eprintln!("{}: gap {m:.2}% ± {s:.2}", rep.method);
    }
    match &a.out {
        Some(p) => fs::write(p, rep.to_csv())?,
        None => print!("{}", rep.to_csv()),
    }
    Ok(())
}

fn run_report(a: &ReportArgs) -> Result<()> {
    banner(
        "report",
        &[(
            "reports",
            a.reports
                .iter()
                .map(|p| p.display().to_string())
                .collect::<Vec<_>>()
                .join(","),
        )],
    );
    let reports = a
        .reports
        .iter()
        .map(|p| {
            let method = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            EvalReport::from_csv(&method, &text).with_context(|| p.display().to_string())
        })
        .collect::<Result<Vec<_>>>()?;
    let (table, csv) = report(&reports);
    print!("{table}");
    if let Some(p) = &a.csv {
        fs::write(p, csv)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .context("configuring the thread pool")?;
        return pool.install(|| dispatch(&cli));
    }
    dispatch(&cli)
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenInstances(a) => gen_instances(cli.seed.unwrap_or(200), a),
        Command::Solve(a) => solve(a),
        Command::ImportSolutions(a) => import_solutions(a),
        Command::MakeDataset(a) => make_dataset(cli.seed.unwrap_or(0), a),
        Command::Train(a) => train(cli.seed, a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => run_report(a),
    }
}

/// Short category of an error for the one-line report.
fn kind(e: &anyhow::Error) -> &'static str {
    use offld_core::Error as E;
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<E>() {
            return match err {
                E::Dimension(_) => "dimension",
                E::Parse { .. } => "parse",
                E::InvalidAction { .. } => "action",
                E::State(_) => "state",
                E::Validation(_) => "infeasible",
                E::Data(_) => "data",
                E::Compatibility(_) => "compatibility",
                E::Config(_) => "config",
                E::Autodiff(_) => "internal",
                E::Io(_) => "io",
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "error"
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Runs one command line (program name first) and returns the exit code:
/// 0 on success, 1 on a failed command, 2 on a usage error. Errors are
/// reported on stderr as a single `error[kind]: message` line.
pub fn run_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {}", one_line(first));
            return 2;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", kind(&e), one_line(&format!("{e:#}")));
            1
        }
    }
}
