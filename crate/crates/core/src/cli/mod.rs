//! The `dirinet` command-line tool.
//!
//! Exit codes: 0 success, 2 input error (including usage), 3 protocol
//! violation, 4 checkpoint error. Every command that writes outputs also
//! writes a run manifest next to them; `dirinet replay` re-runs a manifest.

pub mod config;
pub mod manifest;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::autoencoder::{load_checkpoint, save_checkpoint, write_atomic};
use crate::data::{generate_synthetic, load_speed_csv, speed_csv_bytes, window_iter, SpeedSeries};
use crate::evaluation::{d_v2a, metrics, report_row, REPORT_HEADER};
use crate::experiment::{dgae_series, hide_virtual, propagate_series, train_dgae};
use crate::graph::{build_adjacency, read_distance_csv, read_node_csv, write_distance_csv, write_node_csv, Sigma};
use crate::propagation::{reference_speed, InitPolicy, PropagationConfig, PropagationMode};
use crate::{Error, NodePartition, Result, WeightedDigraph};

use manifest::{manifest_path_for, sha256_file, RunManifest};

pub const EXIT_INPUT: i32 = 2;
pub const EXIT_PROTOCOL: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "dirinet", version, about = "Traffic speed estimation at sensor-free road segments")]
pub struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the sensor graph from a node list and a route distance table.
    GraphBuild(GraphBuildArgs),
    /// Fill unobserved sensors by directed Dirichlet-energy propagation.
    Propagate(PropagateArgs),
    /// Train a graph auto-encoder with dynamic masking.
    Train(TrainArgs),
    /// Estimate every sensor with a trained auto-encoder.
    Estimate(EstimateArgs),
    /// Score estimates on virtual sensors.
    Eval(EvalArgs),
    /// Generate a synthetic corridor dataset.
    Synth(SynthArgs),
    /// Re-run a command from its manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct GraphBuildArgs {
    /// CSV with an `id` column listing every sensor.
    #[arg(long)]
    pub nodes: PathBuf,
    /// CSV with `from,to,dist` rows, distances in meters.
    #[arg(long)]
    pub distances: PathBuf,
    /// Kernel width in meters, or `auto` for the distance standard deviation.
    #[arg(long, default_value = "auto")]
    pub sigma: Sigma,
    /// Drop routes longer than this many meters.
    #[arg(long)]
    pub kappa: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ModeArg {
    Coupled,
    Decoupled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum InitArg {
    Zeros,
    ObservedMean,
    Random,
}

#[derive(Debug, Args)]
pub struct PropagateArgs {
    #[arg(long)]
    pub graph: PathBuf,
    /// Wide speed CSV.
    #[arg(long)]
    pub readings: PathBuf,
    /// File listing the sensor ids whose readings may be used, one per line.
    #[arg(long)]
    pub observed: PathBuf,
    #[arg(long, value_enum, default_value = "coupled")]
    pub mode: ModeArg,
    /// Free-flow reference speed in mph, or `auto` for each sensor's 85th
    /// percentile. Required in decoupled mode.
    #[arg(long, required_if_eq("mode", "decoupled"))]
    pub vref: Option<String>,
    #[arg(long, default_value_t = 90)]
    pub iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, value_enum, default_value = "observed-mean")]
    pub init: InitArg,
    /// Steps per reporting window.
    #[arg(long, default_value_t = 12)]
    pub window: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub readings: PathBuf,
    /// `key = value` model and training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Sensor ids held out from training entirely, one per line.
    #[arg(long)]
    pub vs: Option<PathBuf>,
    #[arg(long)]
    pub out_checkpoint: PathBuf,
    /// Loss history CSV; defaults to `<checkpoint>.history.csv`.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub readings: PathBuf,
    #[arg(long)]
    pub observed: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub estimates: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    /// Virtual sensor ids, one per line.
    #[arg(long)]
    pub vs: PathBuf,
    /// Route distances for the VS-to-AS diagnostic.
    #[arg(long)]
    pub distances: Option<PathBuf>,
    /// Available sensor ids; defaults to every truth column not in `--vs`.
    #[arg(long)]
    pub available: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Protocol(_) => EXIT_PROTOCOL,
        Error::Checkpoint { .. } => EXIT_CHECKPOINT,
        _ => EXIT_INPUT,
    }
}

/// Parses `args` (including the program name), runs the command, and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { 0 };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    configure_threads();
    let argv: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var("DIRINET_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn execute(cli: Cli, argv: &[String]) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::GraphBuild(a) => graph_build(a, argv),
        Command::Propagate(a) => propagate(a, seed, argv),
        Command::Train(a) => train(a, seed, argv),
        Command::Estimate(a) => estimate(a, argv),
        Command::Eval(a) => eval(a, argv),
        Command::Synth(a) => synth(a, seed, argv),
        Command::Replay(a) => replay(a),
    }
}

/// One id per line; blank lines, `#` comments and an `id` header are skipped.
pub fn read_id_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ids: Vec<String> = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .enumerate()
        .filter(|(i, l)| !l.is_empty() && !(*i == 0 && *l == "id"))
        .map(|(_, l)| l.to_string())
        .collect();
    if ids.is_empty() {
        return Err(Error::parse(path, 1, "no sensor ids listed"));
    }
    Ok(ids)
}

fn indices_of(g: &WeightedDigraph, ids: &[String], what: &str) -> Result<Vec<usize>> {
    let mut out = ids
        .iter()
        .map(|id| {
            g.index_of(id)
                .ok_or_else(|| Error::invalid(format!("{what} sensor `{id}` is not in the graph")))
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

fn readings_for(g: &WeightedDigraph, path: &Path) -> Result<SpeedSeries> {
    load_speed_csv(path)?.select_nodes(g.node_ids())
}

fn write_series(path: &Path, series: &SpeedSeries) -> Result<()> {
    write_atomic(path, &speed_csv_bytes(series))
}

fn finish(mut m: RunManifest, started: Instant, path: &Path) -> Result<()> {
    m.push("duration_ms", started.elapsed().as_millis());
    m.write(path)
}

fn graph_build(a: GraphBuildArgs, argv: &[String]) -> Result<()> {
    let started = Instant::now();
    let mut m = RunManifest::new("graph-build", argv);
    m.input("nodes", &a.nodes)?;
    m.input("distances", &a.distances)?;
    let ids = read_node_csv(&a.nodes)?;
    let dist = read_distance_csv(&a.distances)?;
    let g = build_adjacency(&ids, &dist, a.sigma, a.kappa)?;
    g.save_json(&a.out)?;
    let deg = g.total_degree();
    let mean_deg = deg.iter().sum::<f64>() / deg.len().max(1) as f64;
    let sigma = g.sigma().unwrap_or(f64::NAN);
    println!(
        "N={} edges={} sigma={sigma} kappa={} mean_total_degree={mean_deg:.6} isolated={}",
        g.len(),
        g.edge_count(),
        g.kappa().map_or("inf".to_string(), |k| k.to_string()),
        g.isolated_nodes().len()
    );
    m.push("sigma", sigma);
    m.push("sigma_mode", if matches!(a.sigma, Sigma::Auto) { "auto" } else { "value" });
    m.push("kappa", g.kappa().map_or("inf".to_string(), |k| k.to_string()));
    m.push("nodes", g.len());
    m.push("edges", g.edge_count());
    m.output("graph", &a.out)?;
    finish(m, started, &manifest_path_for(&a.out))
}

fn propagate(a: PropagateArgs, seed: Option<u64>, argv: &[String]) -> Result<()> {
    let started = Instant::now();
    let mut m = RunManifest::new("propagate", argv);
    m.input("graph", &a.graph)?;
    m.input("readings", &a.readings)?;
    m.input("observed", &a.observed)?;
    let g = WeightedDigraph::load_json(&a.graph)?;
    let readings = readings_for(&g, &a.readings)?;
    let avail = indices_of(&g, &read_id_list(&a.observed)?, "observed")?;
    let visible = hide_virtual(&readings, &avail);
    let seed = seed.unwrap_or(0);
    let reference_speed = match (a.mode, a.vref.as_deref()) {
        (ModeArg::Coupled, _) => None,
        (ModeArg::Decoupled, Some("auto")) => Some(reference_speed(visible.values.view())?),
        (ModeArg::Decoupled, Some(v)) => {
            let v: f64 = v
                .parse()
                .map_err(|_| Error::invalid(format!("--vref must be `auto` or a speed, got `{v}`")))?;
            Some(vec![v; g.len()])
        }
        (ModeArg::Decoupled, None) => return Err(Error::invalid("decoupled mode requires --vref")),
    };
    let cfg = PropagationConfig {
        max_iters: a.iters,
        tolerance: a.tol,
        mode: match a.mode {
            ModeArg::Coupled => PropagationMode::Coupled,
            ModeArg::Decoupled => PropagationMode::Decoupled,
        },
        init: match a.init {
            InitArg::Zeros => InitPolicy::Zeros,
            InitArg::ObservedMean => InitPolicy::ObservedMean,
            InitArg::Random => InitPolicy::Random(seed),
        },
        reference_speed,
    };
    let run = propagate_series(&g, &visible, &avail, &cfg)?;
    let part = NodePartition::new(g.len(), &avail)?;
    for (k, w) in window_iter(&visible, a.window, a.window, &part).enumerate() {
        let used = run.iterations[w.start..w.start + a.window].iter().max().copied().unwrap_or(0);
        println!("window {k} start={} iterations={used}", crate::data::format_timestamp(visible.timestamps[w.start]));
    }
    let out = SpeedSeries::new(g.node_ids().to_vec(), visible.timestamps.clone(), run.estimates)?;
    write_series(&a.out, &out)?;
    m.push("seed", seed);
    m.push("mode", format!("{:?}", a.mode).to_lowercase());
    m.push("iters", a.iters);
    m.push("tol", a.tol);
    m.push("init", format!("{:?}", a.init).to_lowercase());
    m.push("vref", a.vref.as_deref().unwrap_or("none"));
    m.push("max_iterations_used", run.iterations.iter().max().copied().unwrap_or(0));
    m.output("estimates", &a.out)?;
    finish(m, started, &manifest_path_for(&a.out))
}

fn train(a: TrainArgs, seed: Option<u64>, argv: &[String]) -> Result<()> {
    let started = Instant::now();
    let mut m = RunManifest::new("train", argv);
    m.input("graph", &a.graph)?;
    m.input("readings", &a.readings)?;
    let (template, mut tcfg, cfg_seed) = match &a.config {
        Some(p) => {
            m.input("config", p)?;
            config::train_settings(&config::read_kv(p)?, p)?
        }
        None => Default::default(),
    };
    tcfg.seed = seed.or(cfg_seed).unwrap_or(0);
    let g = WeightedDigraph::load_json(&a.graph)?;
    let readings = readings_for(&g, &a.readings)?;
    let held_out = match &a.vs {
        Some(p) => {
            m.input("vs", p)?;
            indices_of(&g, &read_id_list(p)?, "virtual")?
        }
        None => Vec::new(),
    };
    let avail: Vec<usize> = (0..g.len()).filter(|i| held_out.binary_search(i).is_err()).collect();
    if avail.len() < 2 {
        return Err(Error::Protocol("training needs at least two available sensors".into()));
    }
    let fit = train_dgae(&template, &g, &hide_virtual(&readings, &avail), &avail, &tcfg)?;
    save_checkpoint(&fit.params, &a.out_checkpoint)?;
    let history_path = a.history.clone().unwrap_or_else(|| {
        let mut s = a.out_checkpoint.as_os_str().to_owned();
        s.push(".history.csv");
        PathBuf::from(s)
    });
    let mut hist = String::from("epoch,mean_loss,batches\n");
    for h in &fit.history {
        hist.push_str(&format!("{},{},{}\n", h.epoch, h.mean_loss, h.batches));
    }
    write_atomic(&history_path, hist.as_bytes())?;
    let best = fit.history.get(fit.best_epoch).map_or(f64::NAN, |h| h.mean_loss);
    println!(
        "epochs={} best_epoch={} best_loss={best:.6} stopped_early={} parameters={}",
        fit.history.len(),
        fit.best_epoch,
        fit.stopped_early,
        fit.params.num_parameters()
    );
    m.push("seed", tcfg.seed);
    m.extend(config::model_entries(&fit.params.config));
    m.extend(config::train_entries(&tcfg));
    m.push("epochs_run", fit.history.len());
    m.push("best_epoch", fit.best_epoch);
    m.push("best_loss", best);
    m.push(
        "history",
        fit.history.iter().map(|h| h.mean_loss.to_string()).collect::<Vec<_>>().join(" "),
    );
    m.output("checkpoint", &a.out_checkpoint)?;
    m.output("history", &history_path)?;
    finish(m, started, &manifest_path_for(&a.out_checkpoint))
}

fn estimate(a: EstimateArgs, argv: &[String]) -> Result<()> {
    let started = Instant::now();
    let mut m = RunManifest::new("estimate", argv);
    m.input("checkpoint", &a.checkpoint)?;
    m.input("graph", &a.graph)?;
    m.input("readings", &a.readings)?;
    m.input("observed", &a.observed)?;
    let params = load_checkpoint(&a.checkpoint)?;
    let g = WeightedDigraph::load_json(&a.graph)?;
    let readings = readings_for(&g, &a.readings)?;
    let avail = indices_of(&g, &read_id_list(&a.observed)?, "observed")?;
    let est = dgae_series(&params, &g, &hide_virtual(&readings, &avail), &avail)?;
    let out = SpeedSeries::new(g.node_ids().to_vec(), readings.timestamps.clone(), est)?;
    write_series(&a.out, &out)?;
    m.extend(config::model_entries(&params.config));
    m.output("estimates", &a.out)?;
    finish(m, started, &manifest_path_for(&a.out))
}

fn eval(a: EvalArgs, argv: &[String]) -> Result<()> {
    let started = Instant::now();
    let mut m = RunManifest::new("eval", argv);
    m.input("estimates", &a.estimates)?;
    m.input("truth", &a.truth)?;
    m.input("vs", &a.vs)?;
    let est = load_speed_csv(&a.estimates)?;
    let truth = load_speed_csv(&a.truth)?;
    let vs = read_id_list(&a.vs)?;
    if est.timestamps != truth.timestamps {
        return Err(Error::Protocol("estimates and truth cover different timestamps".into()));
    }
    for id in &vs {
        if !truth.node_ids.contains(id) {
            return Err(Error::Protocol(format!("virtual sensor `{id}` has no ground-truth column")));
        }
        if !est.node_ids.contains(id) {
            return Err(Error::Protocol(format!("virtual sensor `{id}` has no estimate column")));
        }
    }
    let available = match &a.available {
        Some(p) => {
            m.input("available", p)?;
            read_id_list(p)?
        }
        None => truth.node_ids.iter().filter(|id| !vs.contains(id)).cloned().collect(),
    };
    if let Some(id) = available.iter().find(|id| vs.contains(id)) {
        return Err(Error::Protocol(format!("sensor `{id}` is both virtual and available")));
    }
    let e = est.select_nodes(&vs)?;
    let t = truth.select_nodes(&vs)?;
    let mut report = metrics(e.values.view(), t.values.view(), t.mask.view())?;
    if let Some(p) = &a.distances {
        m.input("distances", p)?;
        report.d_v2a = Some(d_v2a(&read_distance_csv(p)?, &vs, &available)?.mean_km);
    }
    let row = report_row(vs.len(), &report);
    println!("{REPORT_HEADER}\n{row}");
    write_atomic(&a.out, format!("{REPORT_HEADER}\n{row}\n").as_bytes())?;
    m.output("report", &a.out)?;
    finish(m, started, &manifest_path_for(&a.out))
}

fn synth(a: SynthArgs, seed: Option<u64>, argv: &[String]) -> Result<()> {
    let started = Instant::now();
    let mut m = RunManifest::new("synth", argv);
    let (mut cfg, cfg_seed) = match &a.config {
        Some(p) => {
            m.input("config", p)?;
            config::synth_settings(&config::read_kv(p)?, p)?
        }
        None => Default::default(),
    };
    cfg.seed = seed.or(cfg_seed).unwrap_or(0);
    let data = generate_synthetic(&cfg)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let paths = [
        ("readings", a.out_dir.join("readings.csv")),
        ("truth", a.out_dir.join("truth.csv")),
        ("distances", a.out_dir.join("distances.csv")),
        ("nodes", a.out_dir.join("nodes.csv")),
    ];
    write_series(&paths[0].1, &data.observed)?;
    write_series(&paths[1].1, &data.truth)?;
    write_distance_csv(&paths[2].1, &data.distances)?;
    write_node_csv(&paths[3].1, &data.observed.node_ids)?;
    println!(
        "nodes={} steps={} events={} missing_rate={:.4}",
        data.observed.n_nodes(),
        data.observed.len(),
        data.events.len(),
        data.observed.missing_rate()
    );
    m.push("seed", cfg.seed);
    m.extend(config::synth_entries(&cfg));
    for (name, p) in &paths {
        m.output(name, p)?;
    }
    finish(m, started, &a.out_dir.join("manifest.txt"))
}

fn replay(a: ReplayArgs) -> Result<()> {
    let manifest = RunManifest::read(&a.manifest)?;
    let (args, cwd, inputs) = manifest.replay_plan()?;
    if let Some(dir) = cwd {
        std::env::set_current_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for (path, digest) in inputs {
        if sha256_file(&path)? != digest {
            return Err(Error::invalid(format!("input {} changed since the manifest was written", path.display())));
        }
    }
    let cli = Cli::try_parse_from(&args).map_err(|e| Error::invalid(format!("manifest arguments: {e}")))?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(Error::invalid("a replay manifest cannot replay itself"));
    }
    execute(cli, &args)
}
