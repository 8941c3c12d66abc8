//! Batch command-line front end: solve, synth, eval, cds, stats, sweep.
//!
//! Exit codes: 0 ok, 1 solver failure, 2 I/O or parse failure, 3 bad
//! configuration. Failures print a machine-readable JSON object to stderr.

use clap::{Args, Parser, Subcommand, ValueEnum};
use rotavg_core::align::AverageMode;
use rotavg_core::cds::{self, CdsWeighting};
use rotavg_core::error::Error;
use rotavg_core::eval;
use rotavg_core::graph::{self, EpipolarGraph, Frame, Registration};
use rotavg_core::pipeline::{self, ClusterCount, RunConfig};
use rotavg_core::synth::{self, Structure, SynthConfig};
use serde_json::json;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(name = "rotavg", version, about = "Rotation averaging on epipolar graphs")]
struct Cli {
    /// Cap the worker thread count (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate absolute rotations from an EG file.
    Solve(SolveArgs),
    /// Generate a synthetic instance with noise and labeled outliers.
    Synth(SynthArgs),
    /// Score an estimate against ground truth.
    Eval(EvalArgs),
    /// Extract a connected dominating set.
    Cds(CdsArgs),
    /// Graph statistics (vertex/edge counts, relative-rotation errors).
    Stats(StatsArgs),
    /// Run a solver over a (sigma, p, trial) grid and emit CSV.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Ira,
    Irav4,
    Irav3plusRef,
    SpanningTree,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Ira => "ira",
            Mode::Irav4 => "irav4",
            Mode::Irav3plusRef => "irav3plus-ref",
            Mode::SpanningTree => "spanning-tree",
        }
    }
}

#[derive(Args)]
struct SolveArgs {
    /// Input EG file.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "irav4")]
    mode: Mode,
    /// Outlier threshold in degrees.
    #[arg(long, default_value_t = 3.0)]
    theta_th: f64,
    /// Selected-set growth fraction that triggers a global optimization.
    #[arg(long, default_value_t = 0.05)]
    global_rate: f64,
    /// Cluster count: "auto" or a number ("1" forces a single cluster).
    #[arg(long, default_value = "auto")]
    clusters: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Hold all reference rotations fixed in the final optimization.
    #[arg(long)]
    freeze_reference: bool,
    /// Output absolute-rotation file.
    #[arg(long)]
    out: PathBuf,
    /// Write the run report JSON here (also printed to stdout).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Ground truth for evaluation in the report.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Write per-iteration engine traces as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Random-structure vertex count.
    #[arg(long, conflicts_with = "structure", requires = "edge_prob")]
    n: Option<usize>,
    #[arg(long, requires = "n")]
    edge_prob: Option<f64>,
    /// Reuse the topology of an existing EG file.
    #[arg(long)]
    structure: Option<PathBuf>,
    #[arg(long)]
    sigma: f64,
    /// Percentage of edges replaced by random rotations.
    #[arg(long)]
    p: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Writes <prefix>.eg, <prefix>.gt, <prefix>.labels.
    #[arg(long)]
    out_prefix: String,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Estimator {
    GeodesicL1,
    ChordalL2,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    est: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_enum, default_value = "geodesic-l1")]
    estimator: Estimator,
    /// Emit a CSV row instead of JSON.
    #[arg(long)]
    csv: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CdsAlgorithm {
    Traditional,
    TaskSpecific,
}

#[derive(Args)]
struct CdsArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "task-specific")]
    algorithm: CdsAlgorithm,
    #[arg(long, default_value_t = 3.0)]
    theta_th: f64,
    /// Ground truth; fills the reference accuracy field.
    #[arg(long)]
    gt: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, conflicts_with = "structure", requires = "edge_prob")]
    n: Option<usize>,
    #[arg(long, requires = "n")]
    edge_prob: Option<f64>,
    #[arg(long)]
    structure: Option<PathBuf>,
    /// Comma-separated noise levels in degrees.
    #[arg(long, default_value = "5,10", value_delimiter = ',')]
    sigmas: Vec<f64>,
    /// Comma-separated outlier percentages.
    #[arg(long, default_value = "0,10,20,30,40,50", value_delimiter = ',')]
    ps: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long, value_enum, default_value = "irav4")]
    solver: Mode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3.0)]
    theta_th: f64,
    #[arg(long, default_value_t = 0.05)]
    global_rate: f64,
    /// Output CSV path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_)
        | Error::Parse { .. }
        | Error::DuplicateEdge { .. }
        | Error::NonUnitQuaternion { .. } => 2,
        Error::BadConfig(_) => 3,
        _ => 1,
    }
}

fn fail(e: Error) -> ! {
    let payload = json!({"kind": e.kind(), "message": e.to_string()});
    eprintln!("{payload}");
    std::process::exit(exit_code(&e));
}

fn open_reader(path: &Path) -> Result<BufReader<File>, Error> {
    Ok(BufReader::new(File::open(path)?))
}

fn create_writer(path: &Path) -> Result<BufWriter<File>, Error> {
    Ok(BufWriter::new(File::create(path)?))
}

fn load_graph_file(path: &Path) -> Result<EpipolarGraph, Error> {
    graph::load_graph(open_reader(path)?)
}

fn load_registration_file(path: &Path, frame: Frame) -> Result<Registration, Error> {
    graph::load_registration(open_reader(path)?, frame)
}

fn parse_clusters(s: &str) -> Result<ClusterCount, Error> {
    if s == "auto" {
        return Ok(ClusterCount::Auto);
    }
    s.parse::<usize>()
        .map(ClusterCount::Fixed)
        .map_err(|_| Error::BadConfig(format!("--clusters must be `auto` or a count, got `{s}`")))
}

fn cmd_solve(args: SolveArgs) -> Result<(), Error> {
    let t0 = Instant::now();
    let g = load_graph_file(&args.input)?;
    let cfg = RunConfig {
        theta_th: args.theta_th,
        global_rate: args.global_rate,
        clusters: parse_clusters(&args.clusters)?,
        rng_seed: args.seed,
        freeze_reference: args.freeze_reference,
    };
    let pipeline = pipeline::by_name(args.mode.name())
        .ok_or_else(|| Error::BadConfig(format!("unknown mode {}", args.mode.name())))?;
    let t_load = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let result = pipeline.run(&g, &cfg)?;
    let t_solve = t1.elapsed().as_secs_f64();

    graph::save_registration(&result.rotations, create_writer(&args.out)?)?;

    if let Some(path) = &args.trace {
        let mut w = create_writer(path)?;
        for (name, records) in &result.traces {
            for r in records {
                let mut line = serde_json::to_value(r).expect("trace serializes");
                line["trace"] = json!(name);
                writeln!(w, "{line}")?;
            }
        }
    }

    let eval_section = match &args.gt {
        Some(path) => {
            let gt = load_registration_file(path, Frame::GroundTruth)?;
            let rep = eval::align_and_score(&result.rotations, &gt)?;
            json!({
                "n_common": rep.n_common,
                "median_error": rep.median_error,
                "mean_error": rep.mean_error,
            })
        }
        None => json!(null),
    };

    let report = json!({
        "schema_version": 1,
        "config": {
            "command": "solve",
            "input": args.input,
            "out": args.out,
            "mode": args.mode.name(),
            "theta_th": args.theta_th,
            "global_rate": args.global_rate,
            "clusters": args.clusters,
            "seed": args.seed,
            "freeze_reference": args.freeze_reference,
        },
        "result": {
            "n_vertices": g.n_vertices(),
            "n_edges": g.n_edges(),
            "n_registered": result.rotations.len(),
            "excluded_vertices": result.excluded_vertices,
            "n_inlier_edges": result.inlier_pairs.len(),
            "final_cost": result.final_cost,
            "details": result.details,
            "warnings": result.warnings,
        },
        "eval": eval_section,
        "timings": {"load_s": t_load, "solve_s": t_solve},
    });
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
    if let Some(path) = &args.report {
        let mut w = create_writer(path)?;
        writeln!(w, "{}", serde_json::to_string_pretty(&report).unwrap())?;
    }
    Ok(())
}

fn structure_from(
    n: Option<usize>,
    edge_prob: Option<f64>,
    structure: &Option<PathBuf>,
) -> Result<Structure, Error> {
    match (n, structure) {
        (Some(n), None) => Ok(Structure::Random {
            n,
            edge_probability: edge_prob.expect("clap enforces the pair"),
        }),
        (None, Some(path)) => Ok(Structure::Loaded {
            graph: load_graph_file(path)?,
            gt: None,
        }),
        _ => Err(Error::BadConfig(
            "exactly one of --n/--edge-prob or --structure is required".into(),
        )),
    }
}

fn cmd_synth(args: SynthArgs) -> Result<(), Error> {
    let structure = structure_from(args.n, args.edge_prob, &args.structure)?;
    let inst = synth::generate(&SynthConfig {
        sigma: args.sigma,
        p: args.p,
        rng_seed: args.seed,
        structure,
    });
    let mut eg = create_writer(Path::new(&format!("{}.eg", args.out_prefix)))?;
    let mut gt = create_writer(Path::new(&format!("{}.gt", args.out_prefix)))?;
    let mut labels = create_writer(Path::new(&format!("{}.labels", args.out_prefix)))?;
    synth::write_instance(&inst, &mut eg, &mut gt, &mut labels)?;
    let summary = json!({
        "n_vertices": inst.graph.n_vertices(),
        "n_edges": inst.graph.n_edges(),
        "n_outliers": inst.outlier_labels.iter().filter(|&&l| l).count(),
        "structure_was_disconnected": inst.structure_was_disconnected,
        "sigma": args.sigma,
        "p": args.p,
        "seed": args.seed,
    });
    println!("{}", serde_json::to_string_pretty(&summary).unwrap());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let est = load_registration_file(&args.est, Frame::Global)?;
    let gt = load_registration_file(&args.gt, Frame::GroundTruth)?;
    let mode = match args.estimator {
        Estimator::GeodesicL1 => AverageMode::GeodesicL1,
        Estimator::ChordalL2 => AverageMode::ChordalL2,
    };
    let rep = eval::align_and_score_with(&est, &gt, mode)?;
    if args.csv {
        println!("n_common,median_error,mean_error");
        println!("{},{:.9},{:.9}", rep.n_common, rep.median_error, rep.mean_error);
    } else {
        let out = json!({
            "n_common": rep.n_common,
            "median_error": rep.median_error,
            "mean_error": rep.mean_error,
            "alignment_angle": rep.alignment.angle_radians().to_degrees(),
        });
        println!("{}", serde_json::to_string_pretty(&out).unwrap());
    }
    Ok(())
}

fn cmd_cds(args: CdsArgs) -> Result<(), Error> {
    let g = load_graph_file(&args.input)?;
    let component = g.largest_component();
    let excluded = g.n_vertices() - component.len();
    let sub = if excluded > 0 {
        g.restrict_to(&component)
    } else {
        g.clone()
    };
    let ecfg = rotavg_core::engine::EngineConfig {
        theta_th: args.theta_th,
        ..Default::default()
    };
    let (name, mut reference) = match args.algorithm {
        CdsAlgorithm::Traditional => (
            "traditional",
            cds::traditional_cds(&sub, &CdsWeighting::Unweighted),
        ),
        CdsAlgorithm::TaskSpecific => {
            let (r, _run) = cds::task_specific_cds(&sub, &ecfg)?;
            ("task-specific", r)
        }
    };
    if let Some(path) = &args.gt {
        let gt = load_registration_file(path, Frame::GroundTruth)?;
        if !reference.rotations.is_empty() {
            reference.e_ref = Some(eval::reference_accuracy(&reference, &gt)?);
        }
    }
    let out = json!({
        "algorithm": name,
        "n_ref": reference.n_ref,
        "members": reference.members.iter().map(|v| v.0).collect::<Vec<_>>(),
        "e_ref": reference.e_ref,
        "connected": reference.connected,
        "dominating": reference.dominating,
        "excluded_vertices": excluded,
    });
    println!("{}", serde_json::to_string_pretty(&out).unwrap());
    Ok(())
}

fn cmd_stats(args: StatsArgs) -> Result<(), Error> {
    let g = load_graph_file(&args.input)?;
    let gt = match &args.gt {
        Some(path) => Some(load_registration_file(path, Frame::GroundTruth)?),
        None => None,
    };
    let stats = eval::graph_stats(&g, gt.as_ref());
    if args.csv {
        println!("n_v,n_v_star,n_e,median_rel_err,mean_rel_err");
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.9}")).unwrap_or_default();
        println!(
            "{},{},{},{},{}",
            stats.n_v,
            stats.n_v_star,
            stats.n_e,
            fmt(stats.median_rel_err),
            fmt(stats.mean_rel_err)
        );
    } else {
        let out = json!({
            "n_v": stats.n_v,
            "n_v_star": stats.n_v_star,
            "n_e": stats.n_e,
            "median_rel_err": stats.median_rel_err,
            "mean_rel_err": stats.mean_rel_err,
        });
        println!("{}", serde_json::to_string_pretty(&out).unwrap());
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<(), Error> {
    let structure = structure_from(args.n, args.edge_prob, &args.structure)?;
    let solver = pipeline::by_name(args.solver.name())
        .ok_or_else(|| Error::BadConfig(format!("unknown solver {}", args.solver.name())))?;
    let cfg = RunConfig {
        theta_th: args.theta_th,
        global_rate: args.global_rate,
        ..RunConfig::default()
    };
    let rows = synth::sweep(
        &structure,
        &args.sigmas,
        &args.ps,
        args.trials,
        solver.as_ref(),
        args.seed,
        &cfg,
    );
    let csv = synth::sweep_csv(&rows);
    match &args.out {
        Some(path) => create_writer(path)?.write_all(csv.as_bytes())?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if e.kind() == clap::error::ErrorKind::DisplayHelp
                || e.kind() == clap::error::ErrorKind::DisplayVersion
            {
                print!("{e}");
                std::process::exit(0);
            }
            let payload = json!({"kind": "config", "message": e.to_string()});
            eprintln!("{payload}");
            std::process::exit(3);
        }
    };
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .ok();
    }
    let result = match cli.command {
        Command::Solve(args) => cmd_solve(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Cds(args) => cmd_cds(args),
        Command::Stats(args) => cmd_stats(args),
        Command::Sweep(args) => cmd_sweep(args),
    };
    if let Err(e) = result {
        fail(e);
    }
}
