//! `wsc` command line tool. Every subcommand reads one JSON config: either
//! a full experiment config or a bare world spec.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;

use wsc_core::graph::{self, Graph, GraphKind, PerturbationConfig};
use wsc_core::io::{self, mat_to_rows, rows_to_mat};
use wsc_core::metrics::{self, BoundOptions};
use wsc_core::pipeline::{self, ExperimentConfig, RecoveryChoice, WorldSource};
use wsc_core::verify::{self, VerifyScope};
use wsc_core::world::{sample_weak_dataset, WeakWorld, WorldSpec};
use wsc_core::{probe, spectral, Error, Result};

#[derive(Parser, Debug)]
#[command(name = "wsc", version, about = "Weak spectral contrastive learning on finite augmentation graphs")]
struct Cli {
    /// Experiment config or world spec (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed; for `run` it replaces the config's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write results into this directory instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for parallel seeds.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Recovery map: exact, inverse-t, scui, posterior or file:PATH.
    #[arg(long, global = true)]
    recovery: Option<String>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    /// Refuse worlds with more augmentation points than this.
    #[arg(long, global = true, default_value_t = graph::MAX_GRAPH_NODES)]
    max_nodes: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a weakly labeled dataset from the world.
    ///
    /// Symmetric noise flips a label to each other class with probability
    /// rate/(c-1), so the diagonal of T is 1 - rate. Asymmetric noise moves
    /// class y to y+1 mod c with probability rate.
    Simulate,
    /// Build an augmentation graph.
    BuildGraph {
        #[arg(long, default_value = "perturbation")]
        kind: String,
    },
    /// Spectrum of the normalized perturbation graph.
    Spectral {
        /// Read the graph from a JSON or CSV file instead of building it.
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Also report the eigengap and optimal objective at this rank.
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        vectors: bool,
    },
    /// Train features for one arm at the configured beta.
    Train,
    /// Linear probe error of trained (or freshly trained) features.
    Evaluate {
        /// Features file written by `train`.
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Quantities entering the error bound.
    Metrics {
        #[arg(long)]
        rho_max_i: Option<usize>,
        #[arg(long)]
        skip_partitions: bool,
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Full experiment over all seeds and arms.
    Run,
    /// Check the library's identities on seeded random worlds.
    Verify {
        /// Comma separated check names.
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
        /// Use corrupted recovery maps; the identity checks should fail.
        #[arg(long)]
        corrupt_recovery: bool,
        #[arg(long, default_value_t = 20)]
        worlds: usize,
    },
}

#[derive(Serialize, serde::Deserialize)]
struct FeaturesFile {
    features: Vec<Vec<f64>>,
    converged: bool,
    steps_used: usize,
    final_loss: f64,
    optimum: Option<f64>,
    loss_trajectory: Vec<f64>,
}

struct Ctx {
    cfg: ExperimentConfig,
    base_dir: PathBuf,
}

impl Ctx {
    fn seed(&self, cli: &Cli) -> u64 {
        cli.seed.or_else(|| self.cfg.seeds.first().copied()).unwrap_or(0)
    }
    fn weak_world(&self, cli: &Cli) -> Result<WeakWorld> {
        let ww = self.cfg.weak_world(&self.base_dir)?;
        let n = ww.world().aug_points();
        if n > cli.max_nodes {
            return Err(Error::TooLarge { what: "augmentation points".into(), size: n, cap: cli.max_nodes });
        }
        Ok(ww)
    }
    fn perturbation(&self) -> Result<PerturbationConfig> {
        PerturbationConfig::new(self.cfg.alpha, self.cfg.beta)
    }
}

fn load_config(cli: &Cli) -> Result<Ctx> {
    let path = cli.config.as_ref().ok_or_else(|| Error::invalid("config", "--config PATH is required"))?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::invalid("config", format!("cannot read {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text)?;
    let mut cfg: ExperimentConfig = if value.get("world").is_some() {
        serde_json::from_value(value)?
    } else {
        let spec: WorldSpec = serde_json::from_value(value)?;
        serde_json::from_value(serde_json::json!({ "world": spec }))?
    };
    if let Some(r) = &cli.recovery {
        cfg.recovery = r.clone();
    }
    if let Some(a) = cli.alpha {
        cfg.alpha = a;
    }
    if let Some(b) = cli.beta {
        cfg.beta = b;
        cfg.beta_grid.clear();
    }
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    if let WorldSource::Path { path } = &cfg.world {
        log::debug!("world spec from {}", base_dir.join(path).display());
    }
    Ok(Ctx { cfg, base_dir })
}

/// Print or write one result. `csv` is None when the result has no flat form.
fn emit(cli: &Cli, name: &str, json: String, csv: Option<String>) -> Result<()> {
    let (body, ext) = match cli.format {
        Format::Json => (json, "json"),
        Format::Csv => (
            csv.ok_or_else(|| Error::invalid("format", format!("{name} has no csv form, use --format json")))?,
            "csv",
        ),
    };
    match &cli.out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join(format!("{name}.{ext}")), body)?;
        }
        None => print!("{body}"),
    }
    Ok(())
}

/// key,value rows for the scalar fields of a JSON object; maps are
/// flattened as key[k].
fn kv_csv(value: &Value) -> String {
    let mut rows = Vec::new();
    if let Value::Object(map) = value {
        for (k, v) in map {
            match v {
                Value::Object(inner) => {
                    for (ik, iv) in inner {
                        rows.push(vec![format!("{k}[{ik}]"), iv.to_string()]);
                    }
                }
                Value::Array(items) => {
                    let joined: Vec<String> = items.iter().map(|v| v.to_string().trim_matches('"').to_string()).collect();
                    rows.push(vec![k.clone(), joined.join(";")]);
                }
                other => rows.push(vec![k.clone(), other.to_string()]),
            }
        }
    }
    io::csv_string(&["key", "value"], &rows)
}

fn simulate(cli: &Cli, ctx: &Ctx) -> Result<()> {
    let ww = ctx.weak_world(cli)?;
    let data = sample_weak_dataset(&ww, ctx.cfg.n_q, ctx.cfg.n_u, ctx.seed(cli))?;
    let mut rows: Vec<Vec<String>> =
        data.labeled.iter().map(|s| vec![s.instance.to_string(), s.weak.to_string()]).collect();
    rows.extend(data.unlabeled.iter().map(|i| vec![i.to_string(), String::new()]));
    emit(cli, "dataset", io::to_json_pretty(&data)?, Some(io::csv_string(&["instance", "weak"], &rows)))
}

fn build_graph(cli: &Cli, ctx: &Ctx, kind: &str) -> Result<()> {
    let g = graph_of_kind(cli, ctx, GraphKind::parse(kind)?)?;
    emit(cli, "graph", g.to_json()?, Some(g.to_csv()))
}

fn graph_of_kind(cli: &Cli, ctx: &Ctx, kind: GraphKind) -> Result<Graph> {
    let ww = ctx.weak_world(cli)?;
    let choice = RecoveryChoice::parse(&ctx.cfg.recovery)?;
    match kind {
        GraphKind::SelfSup => graph::self_supervised_graph(ww.world()),
        GraphKind::Supervised => graph::supervised_graph(ww.world()),
        GraphKind::Weak => graph::weak_supervised_graph(&ww, &pipeline::recovery_for(&choice, &ww, None, &ctx.base_dir)?),
        GraphKind::Perturbation => {
            let s = pipeline::recovery_for(&choice, &ww, None, &ctx.base_dir)?;
            graph::build_perturbation_graph(&ww, &s, &ctx.perturbation()?)
        }
    }
}

fn spectral_cmd(cli: &Cli, graph_path: Option<&Path>, d: Option<usize>, vectors: bool) -> Result<()> {
    let g = match graph_path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            if p.extension().is_some_and(|e| e == "csv") {
                Graph::from_csv(&text)?
            } else {
                Graph::from_json(&text)?
            }
        }
        None => {
            let ctx = load_config(cli)?;
            graph_of_kind(cli, &ctx, GraphKind::Perturbation)?
        }
    };
    if g.n() > cli.max_nodes {
        return Err(Error::TooLarge { what: "graph nodes".into(), size: g.n(), cap: cli.max_nodes });
    }
    let sp = spectral::eigendecompose(&graph::normalize(&g)?)?;
    let mut value = serde_json::to_value(sp.to_file(vectors))?;
    if let Some(d) = d {
        value["d"] = d.into();
        value["optimal_objective"] = spectral::optimal_objective(&sp, d)?.into();
        if d >= 2 {
            value["eigengap"] = spectral::eigengap(&sp, d)?.into();
        }
    }
    let rows: Vec<Vec<String>> =
        sp.eigenvalues().iter().enumerate().map(|(k, l)| vec![k.to_string(), l.to_string()]).collect();
    emit(cli, "spectrum", io::to_json_pretty(&value)?, Some(io::csv_string(&["index", "eigenvalue"], &rows)))
}

fn train(cli: &Cli, ctx: &Ctx) -> Result<()> {
    ctx.weak_world(cli)?;
    let arm = pipeline::train_single_arm(&ctx.cfg, &ctx.base_dir, ctx.seed(cli))?;
    let r = &arm.result;
    let file = FeaturesFile {
        features: mat_to_rows(&r.final_features),
        converged: r.converged,
        steps_used: r.steps_used,
        final_loss: r.final_loss(),
        optimum: r.optimum,
        loss_trajectory: r.loss_trajectory(),
    };
    emit(cli, "features", io::to_json_pretty(&file)?, Some(r.trajectory_csv()))
}

fn evaluate(cli: &Cli, ctx: &Ctx, features: Option<&Path>) -> Result<()> {
    let ww = ctx.weak_world(cli)?;
    let f = match features {
        Some(p) => {
            let file: FeaturesFile = io::read_json(p)?;
            rows_to_mat("features", &file.features, ww.world().aug_points(), None)?
        }
        None => pipeline::train_single_arm(&ctx.cfg, &ctx.base_dir, ctx.seed(cli))?.result.final_features,
    };
    let res = probe::probe_error(&f, ww.world(), ctx.cfg.ridge)?;
    log::info!("epsilon = {}", res.epsilon);
    let csv = format!("epsilon,{}\n\n{}", res.epsilon, res.confusion_csv());
    emit(cli, "evaluation", io::to_json_pretty(&res)?, Some(csv))
}

fn metrics_cmd(cli: &Cli, ctx: &Ctx, rho_max_i: Option<usize>, skip: bool, delta: Option<f64>) -> Result<()> {
    ctx.weak_world(cli)?;
    let arm = pipeline::train_single_arm(&ctx.cfg, &ctx.base_dir, ctx.seed(cli))?;
    let opts = BoundOptions {
        d: ctx.cfg.train.d,
        n: ctx.cfg.n_q + ctx.cfg.n_u,
        n_q: ctx.cfg.n_q,
        delta: delta.unwrap_or(ctx.cfg.metrics.delta),
        rho_max_i: rho_max_i.or(ctx.cfg.metrics.rho_max_i),
        skip_partitions: skip || ctx.cfg.metrics.skip_partitions,
    };
    let report =
        metrics::bound_report(&arm.weak_world, &arm.recovery, &ctx.perturbation()?, &arm.result.final_features, &opts)?;
    emit(cli, "metrics", io::to_json_pretty(&report)?, Some(kv_csv(&serde_json::to_value(&report)?)))
}

fn run(cli: &Cli, ctx: &Ctx) -> Result<()> {
    ctx.weak_world(cli)?;
    let report = pipeline::run_experiment(&ctx.cfg, &ctx.base_dir)?;
    let json = io::to_json_pretty(&report)?;
    let csv = report.to_csv();
    match (&cli.out, cli.format) {
        // a run directory always gets both the report and the flat table
        (Some(dir), _) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("report.json"), json)?;
            std::fs::write(dir.join("report.csv"), csv)?;
            Ok(())
        }
        (None, _) => emit(cli, "report", json, Some(csv)),
    }
}

fn verify_cmd(cli: &Cli, only: &[String], corrupt: bool, worlds: usize) -> Result<bool> {
    let scope = VerifyScope {
        only: only.to_vec(),
        corrupt_recovery: corrupt,
        worlds,
        seed: cli.seed.unwrap_or(VerifyScope::default().seed),
    };
    let report = verify::verify_invariants(&scope)?;
    let rows: Vec<Vec<String>> = report
        .checks
        .iter()
        .map(|c| {
            vec![c.name.clone(), c.passed.to_string(), format!("{:e}", c.worst_residual), format!("{:e}", c.tolerance)]
        })
        .collect();
    let csv = io::csv_string(&["check", "passed", "worst_residual", "tolerance"], &rows);
    emit(cli, "verification", io::to_json_pretty(&report)?, Some(csv))?;
    for c in report.checks.iter().filter(|c| !c.passed) {
        log::error!("{} failed: worst residual {:e} > {:e}", c.name, c.worst_residual, c.tolerance);
    }
    Ok(report.passed)
}

fn dispatch(cli: &Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::invalid("threads", e.to_string()))?;
    }
    match &cli.command {
        Command::Verify { only, corrupt_recovery, worlds } => return verify_cmd(cli, only, *corrupt_recovery, *worlds),
        Command::Spectral { graph, d, vectors } => spectral_cmd(cli, graph.as_deref(), *d, *vectors)?,
        other => {
            let ctx = load_config(cli)?;
            match other {
                Command::Simulate => simulate(cli, &ctx)?,
                Command::BuildGraph { kind } => build_graph(cli, &ctx, kind)?,
                Command::Train => train(cli, &ctx)?,
                Command::Evaluate { features } => evaluate(cli, &ctx, features.as_deref())?,
                Command::Metrics { rho_max_i, skip_partitions, delta } => {
                    metrics_cmd(cli, &ctx, *rho_max_i, *skip_partitions, *delta)?
                }
                Command::Run => run(cli, &ctx)?,
                Command::Verify { .. } | Command::Spectral { .. } => unreachable!(),
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("WSC_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
