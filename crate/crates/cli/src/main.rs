mod config;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use uddml::bench::{self, BootstrapSpec, Experiment, ExperimentSpec, Manifest};
use uddml::design::{admissible_generators, CacheOutcome, SkeletonCache, SkeletonKey};
use uddml::dgp::{self, DgpSpec, Scenario};
use uddml::dml::{estimate_full, estimate_ud, estimate_unif, ud_select};
use uddml::matching::{max_abs, smd_for_rows};
use uddml::nuisance::{OutcomeLearner, PropensityLearner};
use uddml::{Dataset, DmlOptions, Error, MethodTag, Result, SeedBundle, UdParams};

use config::{cache_dir, pick, FileConfig};

/// Largest n for which `--diagnostics` evaluates the O(n²) GEFD term.
const GEFD_MAX_ROWS: usize = 20_000;

#[derive(Parser)]
#[command(
    name = "uddml",
    version,
    about = "Uniform-design subsampling with cross-fitted AIPW estimation of the average treatment effect"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a dataset from one of the built-in simulators and write it as CSV.
    Simulate(SimulateArgs),
    /// Estimate the ATE of a CSV dataset with UD, UNIF or FULL cross-fitted AIPW.
    Estimate(EstimateArgs),
    /// Run a Monte Carlo experiment or the paired bootstrap.
    Bench(BenchArgs),
    /// Search (or load from cache) a lattice skeleton and report its discrepancy.
    Design(DesignArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// obs1, obs2, obs3 or obs3-overlap.
    #[arg(long)]
    scenario: Scenario,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Propensity multiplier for obs3-overlap (1 reproduces obs3).
    #[arg(long, default_value_t = 1.0)]
    c: f64,
    /// Also write true_e0, true_m0, true_m1, true_cate.
    #[arg(long)]
    truth: bool,
    /// Output CSV (stdout when omitted).
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    /// CSV with header Y,W,X1..Xp (true_* columns are ignored).
    #[arg(short, long)]
    input: PathBuf,
    /// ud, unif or full.
    #[arg(long, default_value = "ud")]
    method: MethodTag,
    /// UD anchors r_p (subsample size 2·r_p); defaults to r/2.
    #[arg(long)]
    rp: Option<usize>,
    /// Total subsample size for UNIF; defaults to 2·rp.
    #[arg(long)]
    r: Option<usize>,
    /// Cumulative-variance threshold for retained components [default: 0.85].
    #[arg(long)]
    rho0: Option<f64>,
    /// Generator candidates scored per skeleton search [default: 30].
    #[arg(long)]
    budget: Option<usize>,
    /// Cross-fitting folds [default: 2 for simulated input with true_* columns, 5 otherwise].
    #[arg(long)]
    k: Option<usize>,
    /// Interval level 1 − alpha [default: 0.05].
    #[arg(long)]
    alpha: Option<f64>,
    /// Seed for subsampling and fold assignment [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Seed for the generator search [default: 0].
    #[arg(long)]
    design_seed: Option<u64>,
    /// boosted_trees, linear or linear_on_x5 [default: boosted_trees].
    #[arg(long, value_parser = parse_outcome)]
    outcome_learner: Option<OutcomeLearner>,
    /// boosted_trees, logistic or logistic_on_x5 [default: boosted_trees].
    #[arg(long, value_parser = parse_propensity)]
    propensity_learner: Option<PropensityLearner>,
    /// JSON config file; flags take precedence over its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Skeleton cache directory [env: UDDML_CACHE_DIR; default: ~/.cache/uddml].
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Report path (stdout when omitted).
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Include used rows, pseudo-outcomes and fold labels.
    #[arg(long)]
    with_pseudo_outcomes: bool,
    /// Include wall-clock timings (makes the report non-reproducible).
    #[arg(long)]
    with_timings: bool,
    /// Add covariate balance (SMD) and, for UD, matching/GEFD diagnostics.
    #[arg(long)]
    diagnostics: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// subsample_sweep, scalability, double_robust, overlap_gradient or bootstrap_real.
    #[arg(long)]
    experiment: Option<Experiment>,
    /// JSON experiment spec overlaid on the experiment's defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Re-run exactly the experiment recorded in a previous manifest.
    #[arg(long, conflicts_with = "config")]
    manifest: Option<PathBuf>,
    /// Replications per cell.
    #[arg(long)]
    replicates: Option<usize>,
    /// Worker threads for replicates.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated scenarios.
    #[arg(long, value_delimiter = ',')]
    scenarios: Option<Vec<Scenario>>,
    #[arg(long, value_delimiter = ',')]
    n_grid: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    r_grid: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    c_grid: Option<Vec<f64>>,
    /// Comma-separated subset of ud, unif, full.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<MethodTag>>,
    /// Cross-fitting folds [default: 2; 5 for bootstrap_real].
    #[arg(long)]
    k: Option<usize>,
    /// Input CSV for bootstrap_real.
    #[arg(short, long)]
    input: Option<PathBuf>,
    /// Subsample size for bootstrap_real.
    #[arg(long)]
    r: Option<usize>,
    /// Skeleton cache directory [env: UDDML_CACHE_DIR; default: ~/.cache/uddml].
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Output directory.
    #[arg(short, long, default_value = "bench_out")]
    output: PathBuf,
}

#[derive(Args)]
struct DesignArgs {
    #[arg(long)]
    rp: usize,
    #[arg(long)]
    q: usize,
    /// Generator candidates scored [default: 30].
    #[arg(long, default_value_t = config::DEFAULT_BUDGET)]
    budget: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skeleton cache directory [env: UDDML_CACHE_DIR; default: ~/.cache/uddml].
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Also write the design points as CSV.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

fn parse_outcome(s: &str) -> std::result::Result<OutcomeLearner, String> {
    serde_json::from_value(Value::String(s.replace('-', "_")))
        .map_err(|_| format!("unknown outcome learner '{s}' (boosted_trees, linear, linear_on_x5)"))
}

fn parse_propensity(s: &str) -> std::result::Result<PropensityLearner, String> {
    serde_json::from_value(Value::String(s.replace('-', "_")))
        .map_err(|_| format!("unknown propensity learner '{s}' (boosted_trees, logistic, logistic_on_x5)"))
}

fn write_output(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, bytes)?;
        }
        None => io::stdout().write_all(bytes)?,
    }
    Ok(())
}

fn skeleton_cache(dir: Option<PathBuf>) -> SkeletonCache {
    dir.map_or_else(SkeletonCache::in_memory, SkeletonCache::with_dir)
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Schema(format!("cannot open {}: {e}", path.display())))?;
    Dataset::read_csv(io::BufReader::new(file))
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let spec = DgpSpec {
        scenario: args.scenario,
        n: args.n,
        overlap_c: args.c,
    };
    let data = dgp::simulate(&spec, args.seed)?;
    let mut buf = Vec::new();
    data.write_csv(&mut buf, args.truth)?;
    write_output(args.output.as_deref(), &buf)
}

fn cmd_estimate(args: EstimateArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let data = read_dataset(&args.input)?;
    let simulated = data.truth.is_some();
    let default_k = if simulated {
        config::DEFAULT_K_SIMULATED
    } else {
        config::DEFAULT_K_REAL
    };
    let opts = DmlOptions {
        k: pick(args.k, file.k, default_k),
        alpha: pick(args.alpha, file.alpha, config::DEFAULT_ALPHA),
        nuisance: file.nuisance(args.outcome_learner, args.propensity_learner),
    };
    opts.validate()?;
    let seed = pick(args.seed, file.seed, config::DEFAULT_SEED);
    let seeds = SeedBundle::new(pick(args.design_seed, file.design_seed, config::DEFAULT_SEED), seed);
    let rp = args.rp.or(file.rp);
    let r = args.r.or(file.r);
    let params = |r_p: usize| UdParams {
        r_p,
        rho0: pick(args.rho0, file.rho0, config::DEFAULT_RHO0),
        budget: pick(args.budget, file.budget, config::DEFAULT_BUDGET),
    };
    let cache = skeleton_cache(cache_dir(args.cache_dir.clone(), file.cache_dir.clone()));

    let report = match args.method {
        MethodTag::FULL => estimate_full(&data, &opts, &seeds)?,
        MethodTag::UNIF => {
            let r = r
                .or(rp.map(|v| 2 * v))
                .ok_or_else(|| Error::InvalidArgument("--method unif needs --r (or --rp)".into()))?;
            estimate_unif(&data, r, &opts, &seeds)?
        }
        MethodTag::UD => {
            let r_p = rp
                .or(r.map(|v| v / 2))
                .ok_or_else(|| Error::InvalidArgument("--method ud needs --rp (or --r)".into()))?;
            estimate_ud(&data, &params(r_p), &opts, &seeds, &cache)?
        }
    };

    let mut diagnostics = None;
    if args.diagnostics {
        let (treated, control): (Vec<usize>, Vec<usize>) = report.rows.iter().partition(|&&i| data.w[i] == 1);
        let smd = smd_for_rows(data.covariates(), &treated, &control);
        let mut d = json!({ "max_abs_smd": max_abs(&smd), "smd": smd });
        if args.method == MethodTag::UD {
            let sel = ud_select(&data, &params(report.n_used / 2), seeds.design, &cache)?;
            let gefd = if data.n() <= GEFD_MAX_ROWS {
                let chosen = sel.scores.select(ndarray::Axis(0), &report.rows);
                Some(uddml::design::gefd_sq(chosen.view(), sel.scores.view(), &sel.space)?)
            } else {
                None
            };
            d["gefd_sq"] = json!(gefd);
            d["mean_distance_treated"] = json!(uddml::stats::mean(&sel.selection.treated_distances));
            d["mean_distance_control"] = json!(uddml::stats::mean(&sel.selection.control_distances));
        }
        diagnostics = Some(d);
    }

    let report = if args.with_pseudo_outcomes {
        report
    } else {
        report.without_details()
    };
    let mut value = serde_json::to_value(&report)?;
    if !args.with_timings {
        value.as_object_mut().expect("report is an object").remove("timings");
    }
    if let Some(d) = diagnostics {
        value["diagnostics"] = d;
    }
    let mut text = serde_json::to_string_pretty(&value)?;
    text.push('\n');
    write_output(args.output.as_deref(), text.as_bytes())
}

fn merge(base: &mut Value, overlay: Value) {
    if let (Some(b), Value::Object(o)) = (base.as_object_mut(), overlay) {
        for (k, v) in o {
            b.insert(k, v);
        }
    }
}

fn bench_spec(args: &BenchArgs) -> Result<ExperimentSpec> {
    if let Some(path) = &args.manifest {
        return Ok(Manifest::load(path)?.spec);
    }
    let overlay: Option<Value> = match &args.config {
        Some(p) => Some(
            serde_json::from_str(&fs::read_to_string(p)?)
                .map_err(|e| Error::Schema(format!("config {}: {e}", p.display())))?,
        ),
        None => None,
    };
    let from_file = overlay
        .as_ref()
        .and_then(|v| v.get("experiment"))
        .and_then(|v| serde_json::from_value::<Experiment>(v.clone()).ok());
    let experiment = args
        .experiment
        .or(from_file)
        .ok_or_else(|| Error::InvalidArgument("--experiment is required (or set it in --config)".into()))?;
    let mut value = serde_json::to_value(ExperimentSpec::preset(experiment))?;
    if let Some(o) = overlay {
        merge(&mut value, o);
    }
    value["experiment"] = serde_json::to_value(experiment)?;
    let mut spec: ExperimentSpec =
        serde_json::from_value(value).map_err(|e| Error::Schema(format!("experiment spec: {e}")))?;
    if let Some(v) = args.replicates {
        spec.replicates = v;
    }
    if let Some(v) = args.workers {
        spec.workers = v;
    }
    if let Some(v) = args.seed {
        spec.base_seed = v;
    }
    if let Some(v) = &args.scenarios {
        spec.scenarios = v.clone();
    }
    if let Some(v) = &args.n_grid {
        spec.n_grid = v.clone();
    }
    if let Some(v) = &args.r_grid {
        spec.r_grid = v.clone();
    }
    if let Some(v) = args.r {
        spec.r_grid = vec![v];
    }
    if let Some(v) = &args.c_grid {
        spec.c_grid = v.clone();
    }
    if let Some(v) = &args.methods {
        spec.methods = v.clone();
    }
    if let Some(v) = args.k {
        spec.k = v;
    }
    Ok(spec)
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let spec = bench_spec(&args)?;
    let cache = skeleton_cache(cache_dir(args.cache_dir.clone(), None));
    if spec.experiment == Experiment::BootstrapReal {
        let input = args
            .input
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("bootstrap_real needs --input".into()))?;
        let r = *spec
            .r_grid
            .first()
            .ok_or_else(|| Error::InvalidArgument("bootstrap_real needs --r".into()))?;
        let data = read_dataset(input)?;
        let boot = BootstrapSpec::from_experiment(&spec, r);
        let result = bench::bootstrap_real(&data, &boot, &cache)?;
        bench::write_bootstrap(&args.output, &result)?;
        for s in &result.summaries {
            eprintln!(
                "{:>4}  mean {:.5}  mc_sd {:.5}  rmse_to_full {:.5}  ({} ok, {} failed)",
                s.method, s.mean, s.mc_sd, s.rmse_to_full, s.successes, s.failures
            );
        }
        return Ok(());
    }
    let result = bench::run_experiment(&spec, Some(&args.output), &cache)?;
    for row in &result.rows {
        eprintln!(
            "{:<16} {:<12} n={:<7} r={:<6} {:>4}  rmse {:.4}  cover {:.3}  width {:.4}  fail {}",
            row.cell.experiment.name(),
            row.cell.scenario,
            row.cell.n,
            row.cell.r.map_or("-".into(), |r| r.to_string()),
            row.cell.method,
            row.rmse,
            row.coverage,
            row.ci_width,
            row.failures
        );
    }
    eprintln!("wrote {}", args.output.display());
    Ok(())
}

fn cmd_design(args: DesignArgs) -> Result<()> {
    let cache = skeleton_cache(cache_dir(args.cache_dir.clone(), None));
    let key = SkeletonKey {
        r_p: args.rp,
        q: args.q,
        budget: args.budget,
        seed: args.seed,
    };
    let (sk, source) = cache.get_or_build(key)?;
    let admissible = admissible_generators(args.rp, args.q).len();
    let mut out = io::stdout().lock();
    writeln!(out, "r_p: {}", sk.r_p)?;
    writeln!(out, "q: {}", sk.q)?;
    writeln!(out, "admissible_generators: {admissible}")?;
    writeln!(out, "candidates_scored: {}", admissible.min(args.budget))?;
    writeln!(out, "generator: {}", sk.generator)?;
    writeln!(out, "discrepancy_sq: {:.16e}", sk.discrepancy_sq)?;
    let source = match source {
        CacheOutcome::Built => "built (cache miss)",
        CacheOutcome::Disk => "cache hit (disk)",
        CacheOutcome::Memory => "cache hit (memory)",
    };
    writeln!(out, "source: {source}")?;
    if let Some(path) = &args.output {
        let mut w = Vec::new();
        let header: Vec<String> = (1..=sk.q).map(|d| format!("u{d}")).collect();
        writeln!(w, "{}", header.join(","))?;
        for row in sk.points.rows() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        write_output(Some(path), &w)?;
    }
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    if err.is_statistical() {
        3
    } else if err.is_usage() || matches!(err, Error::Io(_)) {
        2
    } else {
        4
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = std::panic::catch_unwind(|| match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Design(a) => cmd_design(a),
    });
    match outcome {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(_) => ExitCode::from(4),
    }
}
