//! Monte Carlo harness: simulation experiments over scenario/size/overlap/
//! misspecification grids, the paired bootstrap for tabular data, and
//! normality diagnostics.
//!
//! Outputs per experiment `<name>`:
//! - `<name>.csv`: one metric row per cell (deterministic given the experiment settings)
//! - `<name>_replicates.csv`: one row per replicate and method (deterministic)
//! - `<name>_runtime.csv`: mean wall-clock seconds per cell
//! - `<name>_manifest.json`: spec, seeds, `git describe`, timestamps

use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::design::{SkeletonCache, DEFAULT_BUDGET};
use crate::dgp::{simulate, DgpSpec, Scenario, THETA0};
use crate::dml::{estimate_full, estimate_ud, estimate_unif, DmlOptions, EstimateReport, MethodTag, SeedBundle, UdParams};
use crate::error::{Error, Result};
use crate::matching::{max_abs, smd_for_rows};
use crate::nuisance::{NuisanceConfig, OutcomeLearner, PropensityLearner};
use crate::stats::{derive_seed, mean, normal_cdf, normal_quantile, sample_sd};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    SubsampleSweep,
    Scalability,
    DoubleRobust,
    OverlapGradient,
    BootstrapReal,
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::SubsampleSweep => "subsample_sweep",
            Experiment::Scalability => "scalability",
            Experiment::DoubleRobust => "double_robust",
            Experiment::OverlapGradient => "overlap_gradient",
            Experiment::BootstrapReal => "bootstrap_real",
        }
    }
}

impl std::str::FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "subsample_sweep" => Ok(Experiment::SubsampleSweep),
            "scalability" => Ok(Experiment::Scalability),
            "double_robust" => Ok(Experiment::DoubleRobust),
            "overlap_gradient" => Ok(Experiment::OverlapGradient),
            "bootstrap_real" => Ok(Experiment::BootstrapReal),
            other => Err(Error::InvalidArgument(format!("unknown experiment '{other}'"))),
        }
    }
}

/// Whether a nuisance component uses the flexible learner or the
/// single-covariate misspecified one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Spec {
    Correct,
    Wrong,
}

impl std::fmt::Display for Spec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Spec::Correct => "Correct",
            Spec::Wrong => "Wrong",
        })
    }
}

/// (outcome model, propensity model).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Misspec {
    pub outcome: Spec,
    pub propensity: Spec,
}

impl Misspec {
    pub const ALL: [Misspec; 4] = [
        Misspec::new(Spec::Correct, Spec::Correct),
        Misspec::new(Spec::Correct, Spec::Wrong),
        Misspec::new(Spec::Wrong, Spec::Correct),
        Misspec::new(Spec::Wrong, Spec::Wrong),
    ];

    pub const fn new(outcome: Spec, propensity: Spec) -> Self {
        Misspec { outcome, propensity }
    }

    pub fn apply(&self, base: &NuisanceConfig) -> NuisanceConfig {
        NuisanceConfig {
            outcome_learner: match self.outcome {
                Spec::Correct => base.outcome_learner,
                Spec::Wrong => OutcomeLearner::LinearOnX5,
            },
            propensity_learner: match self.propensity {
                Spec::Correct => base.propensity_learner,
                Spec::Wrong => PropensityLearner::LogisticOnX5,
            },
            ..*base
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub experiment: Experiment,
    pub scenarios: Vec<Scenario>,
    pub n_grid: Vec<usize>,
    /// Total subsample sizes; UD uses r/2 anchors.
    pub r_grid: Vec<usize>,
    /// Overlap multipliers (overlap_gradient only).
    pub c_grid: Vec<f64>,
    /// Misspecification cells (double_robust only).
    pub misspec_grid: Vec<Misspec>,
    pub replicates: usize,
    pub methods: Vec<MethodTag>,
    pub base_seed: u64,
    pub k: usize,
    pub alpha: f64,
    pub rho0: f64,
    pub budget: usize,
    pub nuisance: NuisanceConfig,
    pub workers: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec::preset(Experiment::SubsampleSweep)
    }
}

impl ExperimentSpec {
    /// Desk-scale defaults for each experiment.
    pub fn preset(experiment: Experiment) -> Self {
        let all = vec![Scenario::Obs1, Scenario::Obs2, Scenario::Obs3];
        let mut spec = ExperimentSpec {
            experiment,
            scenarios: all,
            n_grid: vec![100_000],
            r_grid: vec![5000],
            c_grid: Vec::new(),
            misspec_grid: Vec::new(),
            replicates: 20,
            methods: vec![MethodTag::UD, MethodTag::UNIF],
            base_seed: 20240601,
            k: 2,
            alpha: 0.05,
            rho0: 0.85,
            budget: DEFAULT_BUDGET,
            nuisance: NuisanceConfig::default(),
            workers: 1,
        };
        match experiment {
            Experiment::SubsampleSweep => spec.r_grid = vec![1000, 2500, 5000, 7500, 10_000],
            Experiment::Scalability => {
                spec.n_grid = vec![100_000, 500_000];
                spec.r_grid = vec![1000, 5000];
                spec.methods = vec![MethodTag::UD, MethodTag::UNIF, MethodTag::FULL];
            }
            Experiment::DoubleRobust => spec.misspec_grid = Misspec::ALL.to_vec(),
            Experiment::OverlapGradient => {
                spec.scenarios = vec![Scenario::Obs3Overlap];
                spec.c_grid = vec![0.1, 0.3, 0.5, 0.7, 1.0, 1.5];
            }
            Experiment::BootstrapReal => {
                spec.scenarios = Vec::new();
                spec.n_grid = Vec::new();
                spec.k = 5;
                spec.replicates = 50;
            }
        }
        spec
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.replicates == 0 {
            return bad("replicates must be at least 1");
        }
        if self.methods.is_empty() {
            return bad("method list is empty");
        }
        if self.experiment != Experiment::BootstrapReal && (self.scenarios.is_empty() || self.n_grid.is_empty()) {
            return bad("scenario and n grids must be nonempty");
        }
        let subsampled = self.methods.iter().any(|&m| m != MethodTag::FULL);
        if subsampled && self.r_grid.is_empty() {
            return bad("r grid must be nonempty");
        }
        if self.r_grid.iter().any(|&r| r < 2) {
            return bad("subsample sizes must be at least 2");
        }
        if self.experiment == Experiment::OverlapGradient && self.c_grid.is_empty() {
            return bad("overlap grid must be nonempty");
        }
        if self.experiment == Experiment::DoubleRobust && self.misspec_grid.is_empty() {
            return bad("misspecification grid must be nonempty");
        }
        if self.workers == 0 {
            return bad("workers must be at least 1");
        }
        self.options(&self.nuisance).validate()
    }

    fn options(&self, nuisance: &NuisanceConfig) -> DmlOptions {
        DmlOptions {
            k: self.k,
            alpha: self.alpha,
            nuisance: *nuisance,
        }
    }

    /// Seed of the generator search, shared by every replicate so that
    /// skeletons are built once per (r_p, q).
    pub fn design_seed(&self) -> u64 {
        derive_seed(self.base_seed, "design")
    }

    fn data_groups(&self) -> Vec<DataGroup> {
        let cs: Vec<Option<f64>> = if self.experiment == Experiment::OverlapGradient {
            self.c_grid.iter().map(|&c| Some(c)).collect()
        } else {
            vec![None]
        };
        let mut groups = Vec::new();
        for &scenario in &self.scenarios {
            for &n in &self.n_grid {
                for &c in &cs {
                    groups.push(DataGroup { scenario, n, c });
                }
            }
        }
        groups
    }

    fn cells_for(&self, group: &DataGroup) -> Vec<CellKey> {
        let misspecs: Vec<Option<Misspec>> = if self.experiment == Experiment::DoubleRobust {
            self.misspec_grid.iter().map(|&m| Some(m)).collect()
        } else {
            vec![None]
        };
        let mut cells = Vec::new();
        for &misspec in &misspecs {
            for &r in &self.r_grid {
                for &method in self.methods.iter().filter(|&&m| m != MethodTag::FULL) {
                    cells.push(CellKey::new(self.experiment, group, Some(r), misspec, method));
                }
            }
            if self.methods.contains(&MethodTag::FULL) {
                cells.push(CellKey::new(self.experiment, group, None, misspec, MethodTag::FULL));
            }
        }
        cells
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct DataGroup {
    scenario: Scenario,
    n: usize,
    c: Option<f64>,
}

impl DataGroup {
    fn dgp(&self) -> DgpSpec {
        DgpSpec {
            scenario: self.scenario,
            n: self.n,
            overlap_c: self.c.unwrap_or(1.0),
        }
    }

    /// Depends on the data-defining coordinates only, never on r or method.
    fn data_seed(&self, base: u64, b: usize) -> u64 {
        let c = self.c.map_or("-".to_string(), |c| format!("{c}"));
        derive_seed(base, &format!("data/{}/{}/{}/{}", self.scenario, self.n, c, b))
    }
}

/// Identifies one experiment cell. FULL cells have `r = None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub experiment: Experiment,
    pub scenario: Scenario,
    pub n: usize,
    pub r: Option<usize>,
    pub c: Option<f64>,
    pub misspec: Option<Misspec>,
    pub method: MethodTag,
}

impl CellKey {
    fn new(experiment: Experiment, g: &DataGroup, r: Option<usize>, misspec: Option<Misspec>, method: MethodTag) -> Self {
        CellKey {
            experiment,
            scenario: g.scenario,
            n: g.n,
            r,
            c: g.c,
            misspec,
            method,
        }
    }

    const HEADER: [&'static str; 8] = ["experiment", "scenario", "n", "r", "c", "m_spec", "e_spec", "method"];

    fn fields(&self) -> Vec<String> {
        let opt = |v: Option<String>| v.unwrap_or_default();
        vec![
            self.experiment.name().to_string(),
            self.scenario.to_string(),
            self.n.to_string(),
            opt(self.r.map(|r| r.to_string())),
            opt(self.c.map(|c| format!("{c}"))),
            opt(self.misspec.map(|m| m.outcome.to_string())),
            opt(self.misspec.map(|m| m.propensity.to_string())),
            self.method.to_string(),
        ]
    }
}

/// Outcome of one method on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateRecord {
    pub cell: CellKey,
    pub replicate: usize,
    pub data_seed: u64,
    pub outcome: std::result::Result<ReplicateEstimate, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReplicateEstimate {
    pub theta_hat: f64,
    pub variance: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Max |SMD| over covariates between treated and control rows used.
    pub max_abs_smd: f64,
    pub subsample_s: f64,
    pub estimate_s: f64,
}

impl ReplicateEstimate {
    fn from_report(report: &EstimateReport, data: &Dataset) -> Self {
        let (treated, control): (Vec<usize>, Vec<usize>) = report.rows.iter().partition(|&&i| data.w[i] == 1);
        ReplicateEstimate {
            theta_hat: report.theta_hat,
            variance: report.variance,
            ci_low: report.ci_low,
            ci_high: report.ci_high,
            max_abs_smd: max_abs(&smd_for_rows(data.covariates(), &treated, &control)),
            subsample_s: report.timings.subsample_s,
            estimate_s: report.timings.estimate_s,
        }
    }

    pub fn covers(&self, theta: f64) -> bool {
        self.ci_low <= theta && theta <= self.ci_high
    }
}

/// Aggregates over the successful replicates of one cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub cell: CellKey,
    pub replicates: usize,
    pub failures: usize,
    pub mean: f64,
    pub mc_sd: f64,
    pub rmse: f64,
    pub coverage: f64,
    pub ci_width: f64,
    pub max_abs_smd: f64,
    pub runtime_mean_s: f64,
    pub subsample_runtime_mean_s: f64,
    pub estimate_runtime_mean_s: f64,
}

impl MetricRow {
    /// Aggregate `records` (all belonging to `cell`) against `truth`.
    pub fn aggregate(cell: CellKey, records: &[&ReplicateRecord], truth: f64) -> MetricRow {
        let ok: Vec<&ReplicateEstimate> = records.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
        let theta: Vec<f64> = ok.iter().map(|e| e.theta_hat).collect();
        let avg = |f: &dyn Fn(&ReplicateEstimate) -> f64| mean(&ok.iter().map(|e| f(e)).collect::<Vec<_>>());
        MetricRow {
            cell,
            replicates: records.len(),
            failures: records.len() - ok.len(),
            mean: mean(&theta),
            mc_sd: if theta.len() >= 2 { sample_sd(&theta) } else { f64::NAN },
            rmse: avg(&|e| (e.theta_hat - truth).powi(2)).sqrt(),
            coverage: avg(&|e| f64::from(u8::from(e.covers(truth)))),
            ci_width: avg(&|e| e.ci_high - e.ci_low),
            max_abs_smd: avg(&|e| e.max_abs_smd),
            runtime_mean_s: avg(&|e| e.subsample_s + e.estimate_s),
            subsample_runtime_mean_s: avg(&|e| e.subsample_s),
            estimate_runtime_mean_s: avg(&|e| e.estimate_s),
        }
    }

    const METRICS: [&'static str; 9] = [
        "replicates",
        "failures",
        "mean",
        "mc_sd",
        "rmse",
        "coverage",
        "ci_width",
        "max_abs_smd",
        "successes",
    ];

    fn metric_fields(&self) -> Vec<String> {
        vec![
            self.replicates.to_string(),
            self.failures.to_string(),
            fmt_f64(self.mean),
            fmt_f64(self.mc_sd),
            fmt_f64(self.rmse),
            fmt_f64(self.coverage),
            fmt_f64(self.ci_width),
            fmt_f64(self.max_abs_smd),
            (self.replicates - self.failures).to_string(),
        ]
    }
}

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentResult {
    pub spec: ExperimentSpec,
    pub rows: Vec<MetricRow>,
    pub records: Vec<ReplicateRecord>,
}

impl ExperimentResult {
    pub fn row(&self, pred: impl Fn(&CellKey) -> bool) -> Option<&MetricRow> {
        self.rows.iter().find(|r| pred(&r.cell))
    }
}

/// Streams metric rows and replicate records to CSV as cells complete.
struct CsvSink {
    metrics: csv::Writer<fs::File>,
    replicates: csv::Writer<fs::File>,
    runtime: csv::Writer<fs::File>,
}

impl CsvSink {
    fn create(dir: &Path, name: &str) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let open = |suffix: &str| csv::Writer::from_path(dir.join(format!("{name}{suffix}.csv")));
        let mut sink = CsvSink {
            metrics: open("")?,
            replicates: open("_replicates")?,
            runtime: open("_runtime")?,
        };
        let mut h: Vec<&str> = CellKey::HEADER.to_vec();
        h.extend(MetricRow::METRICS);
        sink.metrics.write_record(&h)?;
        let mut h: Vec<&str> = CellKey::HEADER.to_vec();
        h.extend(["replicate", "data_seed", "theta_hat", "variance", "ci_low", "ci_high", "max_abs_smd", "error"]);
        sink.replicates.write_record(&h)?;
        let mut h: Vec<&str> = CellKey::HEADER.to_vec();
        h.extend(["runtime_mean_s", "subsample_runtime_mean_s", "estimate_runtime_mean_s"]);
        sink.runtime.write_record(&h)?;
        Ok(sink)
    }

    fn write(&mut self, rows: &[MetricRow], records: &[ReplicateRecord]) -> Result<()> {
        for rec in records {
            let mut f = rec.cell.fields();
            f.push(rec.replicate.to_string());
            f.push(rec.data_seed.to_string());
            match &rec.outcome {
                Ok(e) => {
                    f.extend([e.theta_hat, e.variance, e.ci_low, e.ci_high, e.max_abs_smd].map(fmt_f64));
                    f.push(String::new());
                }
                Err(msg) => {
                    f.extend(std::iter::repeat_n(String::new(), 5));
                    f.push(msg.clone());
                }
            }
            self.replicates.write_record(&f)?;
        }
        for row in rows {
            let mut f = row.cell.fields();
            f.extend(row.metric_fields());
            self.metrics.write_record(&f)?;
            let mut f = row.cell.fields();
            f.extend(
                [row.runtime_mean_s, row.subsample_runtime_mean_s, row.estimate_runtime_mean_s].map(fmt_f64),
            );
            self.runtime.write_record(&f)?;
        }
        self.metrics.flush()?;
        self.replicates.flush()?;
        self.runtime.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub spec: ExperimentSpec,
    pub base_seed: u64,
    pub design_seed: u64,
    pub git_describe: String,
    pub crate_version: String,
    pub started_unix_s: u64,
    pub finished_unix_s: u64,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let m: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::Schema(format!(
                "manifest format version {} (expected {MANIFEST_VERSION})",
                m.format_version
            )));
        }
        Ok(m)
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}

fn write_manifest(dir: &Path, spec: &ExperimentSpec, started: u64, outputs: Vec<String>) -> Result<PathBuf> {
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        spec: spec.clone(),
        base_seed: spec.base_seed,
        design_seed: spec.design_seed(),
        git_describe: git_describe(),
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix_s: started,
        finished_unix_s: unix_now(),
        outputs,
    };
    let path = dir.join(format!("{}_manifest.json", spec.experiment.name()));
    let mut f = fs::File::create(&path)?;
    f.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(path)
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start {workers} workers: {e}")))
}

fn guarded<T>(f: impl FnOnce() -> Result<T>) -> std::result::Result<T, String> {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(v)) => Ok(v),
        Ok(Err(e)) => Err(e.to_string()),
        Err(panic) => Err(format!(
            "internal error: {}",
            panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default()
        )),
    }
}

/// Run one method on one dataset.
fn run_method(
    spec: &ExperimentSpec,
    cell: &CellKey,
    data: &Dataset,
    data_seed: u64,
    cache: &SkeletonCache,
) -> std::result::Result<ReplicateEstimate, String> {
    let nuisance = cell.misspec.map_or(spec.nuisance, |m| m.apply(&spec.nuisance));
    let opts = spec.options(&nuisance);
    let tag = format!("{}/{}", cell.method, cell.r.map_or(0, |r| r));
    let seeds = SeedBundle::new(spec.design_seed(), derive_seed(data_seed, &tag));
    guarded(|| {
        let report = match (cell.method, cell.r) {
            (MethodTag::FULL, _) => estimate_full(data, &opts, &seeds)?,
            (MethodTag::UNIF, Some(r)) => estimate_unif(data, r, &opts, &seeds)?,
            (MethodTag::UD, Some(r)) => {
                let params = UdParams {
                    r_p: r / 2,
                    rho0: spec.rho0,
                    budget: spec.budget,
                };
                estimate_ud(data, &params, &opts, &seeds, cache)?
            }
            _ => return Err(Error::InvalidArgument("subsampling cell without r".into())),
        };
        Ok(ReplicateEstimate::from_report(&report, data))
    })
}

/// Run every cell of `spec`, drawing data with `make_data(dgp, seed)`.
/// Results are streamed to `output` (if given) one data group at a time.
pub fn run_experiment_with<F>(
    spec: &ExperimentSpec,
    output: Option<&Path>,
    cache: &SkeletonCache,
    make_data: F,
) -> Result<ExperimentResult>
where
    F: Fn(&DgpSpec, u64) -> Result<Dataset> + Sync,
{
    spec.validate()?;
    if spec.experiment == Experiment::BootstrapReal {
        return Err(Error::InvalidArgument(
            "bootstrap_real runs on input data; use bootstrap_real()".into(),
        ));
    }
    let started = unix_now();
    let pool = thread_pool(spec.workers)?;
    let mut sink = output.map(|d| CsvSink::create(d, spec.experiment.name())).transpose()?;
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for group in spec.data_groups() {
        let cells = spec.cells_for(&group);
        let per_rep: Vec<Vec<ReplicateRecord>> = pool.install(|| {
            (0..spec.replicates)
                .into_par_iter()
                .map(|b| {
                    let data_seed = group.data_seed(spec.base_seed, b);
                    let data = guarded(|| make_data(&group.dgp(), data_seed));
                    cells
                        .iter()
                        .map(|cell| ReplicateRecord {
                            cell: *cell,
                            replicate: b,
                            data_seed,
                            outcome: match &data {
                                Ok(d) => run_method(spec, cell, d, data_seed, cache),
                                Err(e) => Err(e.clone()),
                            },
                        })
                        .collect()
                })
                .collect()
        });
        // group records cell-major so the replicate file reads naturally
        let mut group_records = Vec::with_capacity(cells.len() * spec.replicates);
        let mut group_rows = Vec::with_capacity(cells.len());
        for (ci, cell) in cells.iter().enumerate() {
            let cell_records: Vec<ReplicateRecord> = per_rep.iter().map(|v| v[ci].clone()).collect();
            group_rows.push(MetricRow::aggregate(*cell, &cell_records.iter().collect::<Vec<_>>(), THETA0));
            group_records.extend(cell_records);
        }
        if let Some(s) = sink.as_mut() {
            s.write(&group_rows, &group_records)?;
        }
        rows.extend(group_rows);
        records.extend(group_records);
    }
    if let Some(dir) = output {
        let name = spec.experiment.name();
        let outputs = ["", "_replicates", "_runtime"].iter().map(|s| format!("{name}{s}.csv")).collect();
        write_manifest(dir, spec, started, outputs)?;
    }
    Ok(ExperimentResult {
        spec: spec.clone(),
        rows,
        records,
    })
}

pub fn run_experiment(spec: &ExperimentSpec, output: Option<&Path>, cache: &SkeletonCache) -> Result<ExperimentResult> {
    run_experiment_with(spec, output, cache, simulate)
}

/// Standardized estimates, Q–Q pairs against N(0,1) and the Kolmogorov
/// distance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Normality {
    pub standardized: Vec<f64>,
    /// (theoretical quantile Φ⁻¹((i − ½)/B), sorted standardized value).
    pub qq_pairs: Vec<(f64, f64)>,
    pub ks_distance: f64,
    /// Sample mean minus `truth`.
    pub bias: f64,
    pub sample_sd: f64,
}

pub fn normality_diagnostics(estimates: &[f64], truth: f64) -> Result<Normality> {
    let b = estimates.len();
    if b < 30 {
        return Err(Error::TooFewRows { needed: 30, got: b });
    }
    let m = mean(estimates);
    let sd = sample_sd(estimates);
    if !(sd > 0.0) {
        return Err(Error::ZeroVariance);
    }
    let standardized: Vec<f64> = estimates.iter().map(|v| (v - m) / sd).collect();
    let mut sorted = standardized.clone();
    sorted.sort_by(f64::total_cmp);
    let bf = b as f64;
    let qq_pairs = sorted
        .iter()
        .enumerate()
        .map(|(i, &z)| (normal_quantile((i as f64 + 0.5) / bf), z))
        .collect();
    let ks_distance = sorted
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            let f = normal_cdf(z);
            ((i as f64 + 1.0) / bf - f).max(f - i as f64 / bf)
        })
        .fold(0.0, f64::max);
    Ok(Normality {
        standardized,
        qq_pairs,
        ks_distance,
        bias: m - truth,
        sample_sd: sd,
    })
}

/// Settings for the paired nonparametric bootstrap on tabular data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSpec {
    /// Total subsample size; UD uses r/2 anchors.
    pub r: usize,
    pub replicates: usize,
    pub methods: Vec<MethodTag>,
    pub base_seed: u64,
    pub k: usize,
    pub alpha: f64,
    pub rho0: f64,
    pub budget: usize,
    pub nuisance: NuisanceConfig,
    pub workers: usize,
}

impl BootstrapSpec {
    pub fn from_experiment(spec: &ExperimentSpec, r: usize) -> Self {
        BootstrapSpec {
            r,
            replicates: spec.replicates,
            methods: spec.methods.iter().copied().filter(|&m| m != MethodTag::FULL).collect(),
            base_seed: spec.base_seed,
            k: spec.k,
            alpha: spec.alpha,
            rho0: spec.rho0,
            budget: spec.budget,
            nuisance: spec.nuisance,
            workers: spec.workers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapRecord {
    pub replicate: usize,
    pub method: MethodTag,
    pub outcome: std::result::Result<ReplicateEstimate, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapSummary {
    pub method: MethodTag,
    pub successes: usize,
    pub failures: usize,
    pub mean: f64,
    pub mc_sd: f64,
    /// Root mean squared difference to the full-data reference estimate.
    pub rmse_to_full: f64,
    pub ci_width: f64,
    pub runtime_mean_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapResult {
    pub reference: EstimateReport,
    pub records: Vec<BootstrapRecord>,
    pub summaries: Vec<BootstrapSummary>,
}

/// Draw `replicates` resamples of `data` (n rows with replacement, one seed
/// pool shared by every method) and re-run each subsampling method on each.
/// FULL is fit once on the original data as the reference.
pub fn bootstrap_real(data: &Dataset, spec: &BootstrapSpec, cache: &SkeletonCache) -> Result<BootstrapResult> {
    if spec.replicates == 0 || spec.workers == 0 || spec.r < 2 {
        return Err(Error::InvalidArgument("need replicates, workers >= 1 and r >= 2".into()));
    }
    data.validate()?;
    for arm in [0u8, 1] {
        if data.arm_count(arm) == 0 {
            return Err(Error::EmptyArm { arm });
        }
    }
    let opts = DmlOptions {
        k: spec.k,
        alpha: spec.alpha,
        nuisance: spec.nuisance,
    };
    let design_seed = derive_seed(spec.base_seed, "design");
    let reference = estimate_full(data, &opts, &SeedBundle::new(design_seed, derive_seed(spec.base_seed, "full")))?;
    let methods: Vec<MethodTag> = spec.methods.iter().copied().filter(|&m| m != MethodTag::FULL).collect();
    let pool = thread_pool(spec.workers)?;
    let n = data.n();
    let need = spec.r / 2;
    let per_rep: Vec<Vec<BootstrapRecord>> = pool.install(|| {
        (0..spec.replicates)
            .into_par_iter()
            .map(|b| {
                let seed = derive_seed(spec.base_seed, &format!("bootstrap/{b}"));
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                let sample = data.subset(&rows);
                let starved = [1u8, 0].into_iter().find_map(|arm| {
                    let size = sample.arm_count(arm);
                    (size < need).then(|| Error::ArmTooSmall { arm, size, needed: need }.to_string())
                });
                methods
                    .iter()
                    .map(|&method| {
                        let outcome = match &starved {
                            Some(msg) => Err(msg.clone()),
                            None => {
                                let seeds = SeedBundle::new(design_seed, derive_seed(seed, &method.to_string()));
                                guarded(|| {
                                    let report = match method {
                                        MethodTag::UD => {
                                            let params = UdParams {
                                                r_p: need,
                                                rho0: spec.rho0,
                                                budget: spec.budget,
                                            };
                                            estimate_ud(&sample, &params, &opts, &seeds, cache)?
                                        }
                                        _ => estimate_unif(&sample, spec.r, &opts, &seeds)?,
                                    };
                                    Ok(ReplicateEstimate::from_report(&report, &sample))
                                })
                            }
                        };
                        BootstrapRecord {
                            replicate: b,
                            method,
                            outcome,
                        }
                    })
                    .collect()
            })
            .collect()
    });
    let records: Vec<BootstrapRecord> = per_rep.into_iter().flatten().collect();
    let summaries = methods
        .iter()
        .map(|&method| {
            let ok: Vec<&ReplicateEstimate> = records
                .iter()
                .filter(|r| r.method == method)
                .filter_map(|r| r.outcome.as_ref().ok())
                .collect();
            let theta: Vec<f64> = ok.iter().map(|e| e.theta_hat).collect();
            let avg = |f: &dyn Fn(&ReplicateEstimate) -> f64| mean(&ok.iter().map(|e| f(e)).collect::<Vec<_>>());
            BootstrapSummary {
                method,
                successes: ok.len(),
                failures: spec.replicates - ok.len(),
                mean: mean(&theta),
                mc_sd: if theta.len() >= 2 { sample_sd(&theta) } else { f64::NAN },
                rmse_to_full: avg(&|e| (e.theta_hat - reference.theta_hat).powi(2)).sqrt(),
                ci_width: avg(&|e| e.ci_high - e.ci_low),
                runtime_mean_s: avg(&|e| e.subsample_s + e.estimate_s),
            }
        })
        .collect();
    Ok(BootstrapResult {
        reference: reference.without_details(),
        records,
        summaries,
    })
}

/// Write `bootstrap_real.csv` (summaries), `bootstrap_real_replicates.csv`
/// and `bootstrap_real_runtime.csv` under `dir`.
pub fn write_bootstrap(dir: &Path, result: &BootstrapResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("bootstrap_real.csv"))?;
    w.write_record([
        "method",
        "successes",
        "failures",
        "mean",
        "mc_sd",
        "rmse_to_full",
        "ci_width",
        "full_theta_hat",
        "full_ci_low",
        "full_ci_high",
    ])?;
    for s in &result.summaries {
        let mut f = vec![s.method.to_string(), s.successes.to_string(), s.failures.to_string()];
        f.extend(
            [
                s.mean,
                s.mc_sd,
                s.rmse_to_full,
                s.ci_width,
                result.reference.theta_hat,
                result.reference.ci_low,
                result.reference.ci_high,
            ]
            .map(fmt_f64),
        );
        w.write_record(&f)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("bootstrap_real_replicates.csv"))?;
    w.write_record(["replicate", "method", "theta_hat", "variance", "ci_low", "ci_high", "max_abs_smd", "error"])?;
    for r in &result.records {
        let mut f = vec![r.replicate.to_string(), r.method.to_string()];
        match &r.outcome {
            Ok(e) => {
                f.extend([e.theta_hat, e.variance, e.ci_low, e.ci_high, e.max_abs_smd].map(fmt_f64));
                f.push(String::new());
            }
            Err(msg) => {
                f.extend(std::iter::repeat_n(String::new(), 5));
                f.push(msg.clone());
            }
        }
        w.write_record(&f)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("bootstrap_real_runtime.csv"))?;
    w.write_record(["method", "runtime_mean_s", "full_runtime_s"])?;
    for s in &result.summaries {
        w.write_record([s.method.to_string(), fmt_f64(s.runtime_mean_s), fmt_f64(result.reference.timings.total_s())])?;
    }
    w.flush()?;
    Ok(())
}
