//! Cross-fitted AIPW estimation of the average treatment effect, applied
//! identically to UD subsamples, uniform subsamples and the full sample.

use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::design::{CacheOutcome, SkeletonCache, SkeletonKey, UDSkeleton, DEFAULT_BUDGET};
use crate::error::{Error, Result};
use crate::matching::{select_pairs, SubsampleSelection};
use crate::nuisance::{fit_nuisance, NuisanceConfig};
use crate::preprocess::{fit_rotation_with_scores, RotatedSpace};
use crate::stats::{derive_seed, mean, two_sided_z};

/// (m₁ − m₀) + w(y − m₁)/e − (1 − w)(y − m₀)/(1 − e).
pub fn aipw_pseudo_outcome(y: f64, w: u8, m0: f64, m1: f64, e: f64) -> Result<f64> {
    if !(e > 0.0 && e < 1.0) {
        return Err(Error::PropensityOutOfRange(e));
    }
    let wf = f64::from(w);
    Ok((m1 - m0) + wf * (y - m1) / e - (1.0 - wf) * (y - m0) / (1.0 - e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MethodTag {
    UD,
    UNIF,
    FULL,
}

impl std::fmt::Display for MethodTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MethodTag::UD => "UD",
            MethodTag::UNIF => "UNIF",
            MethodTag::FULL => "FULL",
        })
    }
}

impl std::str::FromStr for MethodTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ud" => Ok(MethodTag::UD),
            "unif" | "uniform" => Ok(MethodTag::UNIF),
            "full" => Ok(MethodTag::FULL),
            other => Err(Error::InvalidArgument(format!("unknown method '{other}'"))),
        }
    }
}

/// Settings shared by every estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DmlOptions {
    pub k: usize,
    pub alpha: f64,
    pub nuisance: NuisanceConfig,
}

impl Default for DmlOptions {
    fn default() -> Self {
        DmlOptions {
            k: 2,
            alpha: 0.05,
            nuisance: NuisanceConfig::default(),
        }
    }
}

impl DmlOptions {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidArgument(format!("need K >= 2 folds, got {}", self.k)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        self.nuisance.validate()
    }
}

/// Uniform-design subsampling parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UdParams {
    /// Number of anchors; the subsample has 2·r_p rows.
    pub r_p: usize,
    pub rho0: f64,
    pub budget: usize,
}

impl UdParams {
    pub fn new(r_p: usize) -> Self {
        UdParams {
            r_p,
            rho0: 0.85,
            budget: DEFAULT_BUDGET,
        }
    }
}

/// Seeds consumed by one estimation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedBundle {
    /// Generator search; kept fixed across replicates so skeletons are reused.
    pub design: u64,
    pub subsample: u64,
    pub folds: u64,
}

impl SeedBundle {
    pub fn new(design: u64, replicate: u64) -> Self {
        SeedBundle {
            design,
            subsample: derive_seed(replicate, "subsample"),
            folds: derive_seed(replicate, "folds"),
        }
    }
}

/// Wall-clock seconds per phase. `subsample_s` covers rotation, design
/// search, ECDF mapping and matching (or uniform sampling).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub subsample_s: f64,
    pub estimate_s: f64,
    pub rotation_s: f64,
    pub design_s: f64,
    pub matching_s: f64,
}

impl Timings {
    pub fn total_s(&self) -> f64 {
        self.subsample_s + self.estimate_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UdDiagnostics {
    pub q: usize,
    pub explained_fraction: f64,
    pub generator: u64,
    pub discrepancy_sq: f64,
    pub radius_treated: f64,
    pub radius_control: f64,
    pub skeleton_source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub method_tag: MethodTag,
    pub theta_hat: f64,
    pub variance: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub alpha: f64,
    pub k_folds: usize,
    pub n_used: usize,
    pub n_treated: usize,
    pub n_control: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ud: Option<UdDiagnostics>,
    /// Rows of the input dataset used, in estimation order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rows: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pseudo_outcomes: Vec<f64>,
    /// 1-based fold label of each used row.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fold_of: Vec<usize>,
    pub timings: Timings,
}

impl EstimateReport {
    pub fn covers(&self, theta: f64) -> bool {
        self.ci_low <= theta && theta <= self.ci_high
    }

    pub fn ci_width(&self) -> f64 {
        self.ci_high - self.ci_low
    }

    /// Drops the per-row vectors (rows, pseudo-outcomes, folds).
    pub fn without_details(mut self) -> Self {
        self.rows.clear();
        self.pseudo_outcomes.clear();
        self.fold_of.clear();
        self
    }
}

/// Stratified fold labels in 1..=k: each arm is shuffled with the seeded
/// generator and dealt round-robin, continuing the deal across arms so fold
/// sizes differ by at most one.
pub fn stratified_folds(w: &[u8], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need K >= 2 folds, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![0; w.len()];
    let mut next = 0;
    for arm in [0u8, 1u8] {
        let mut rows: Vec<usize> = (0..w.len()).filter(|&i| w[i] == arm).collect();
        if rows.len() < k {
            return Err(Error::ArmTooSmall {
                arm,
                size: rows.len(),
                needed: k,
            });
        }
        rows.shuffle(&mut rng);
        for i in rows {
            fold_of[i] = next % k + 1;
            next += 1;
        }
    }
    Ok(fold_of)
}

/// Cross-fitted pseudo-outcomes and the resulting Wald summary.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossFit {
    pub theta_hat: f64,
    pub variance: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub pseudo_outcomes: Vec<f64>,
    pub fold_of: Vec<usize>,
}

/// Plug-in variance Σ(ψ − θ̂)² / (r(r − 1)).
pub fn plug_in_variance(psi: &[f64], theta_hat: f64) -> f64 {
    let r = psi.len() as f64;
    psi.iter().map(|v| (v - theta_hat) * (v - theta_hat)).sum::<f64>() / (r * (r - 1.0))
}

pub fn cross_fit(sample: &Dataset, opts: &DmlOptions, seed: u64) -> Result<CrossFit> {
    opts.validate()?;
    let r = sample.n();
    if r < 2 {
        return Err(Error::TooFewRows { needed: 2, got: r });
    }
    let fold_of = stratified_folds(&sample.w, opts.k, seed)?;
    let x = sample.covariates();
    let per_fold: Vec<Result<(Vec<usize>, Vec<f64>)>> = (1..=opts.k)
        .into_par_iter()
        .map(|fold| {
            let (test, train): (Vec<usize>, Vec<usize>) = (0..r).partition(|&i| fold_of[i] == fold);
            let fitted = fit_nuisance(&sample.subset(&train), &opts.nuisance)?;
            let xt: Array2<f64> = x.select(Axis(0), &test);
            let m0 = fitted.predict_m0(xt.view())?;
            let m1 = fitted.predict_m1(xt.view())?;
            let e = fitted.predict_propensity(xt.view())?;
            let psi = test
                .iter()
                .enumerate()
                .map(|(j, &i)| aipw_pseudo_outcome(sample.y[i], sample.w[i], m0[j], m1[j], e[j]))
                .collect::<Result<Vec<f64>>>()?;
            Ok((test, psi))
        })
        .collect();
    let mut pseudo_outcomes = vec![0.0; r];
    for res in per_fold {
        let (test, psi) = res?;
        for (i, v) in test.into_iter().zip(psi) {
            pseudo_outcomes[i] = v;
        }
    }
    let theta_hat = mean(&pseudo_outcomes);
    let variance = plug_in_variance(&pseudo_outcomes, theta_hat);
    let half = two_sided_z(opts.alpha) * variance.sqrt();
    Ok(CrossFit {
        theta_hat,
        variance,
        ci_low: theta_hat - half,
        ci_high: theta_hat + half,
        pseudo_outcomes,
        fold_of,
    })
}

/// `r` distinct row ids drawn without replacement.
pub fn uniform_subsample(n: usize, r: usize, seed: u64) -> Result<Vec<usize>> {
    if r > n {
        return Err(Error::InvalidArgument(format!(
            "subsample size {r} exceeds the {n} available rows"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, n, r).into_vec())
}

/// Cross-fit on `rows` of `dataset` and package the report; shared by all
/// three estimators.
pub fn estimate_on_rows(
    dataset: &Dataset,
    rows: &[usize],
    tag: MethodTag,
    opts: &DmlOptions,
    fold_seed: u64,
) -> Result<EstimateReport> {
    let start = Instant::now();
    let sample = dataset.subset(rows);
    let fit = cross_fit(&sample, opts, fold_seed)?;
    let n_treated = sample.arm_count(1);
    Ok(EstimateReport {
        method_tag: tag,
        theta_hat: fit.theta_hat,
        variance: fit.variance,
        std_error: fit.variance.sqrt(),
        ci_low: fit.ci_low,
        ci_high: fit.ci_high,
        alpha: opts.alpha,
        k_folds: opts.k,
        n_used: rows.len(),
        n_treated,
        n_control: rows.len() - n_treated,
        ud: None,
        rows: rows.to_vec(),
        pseudo_outcomes: fit.pseudo_outcomes,
        fold_of: fit.fold_of,
        timings: Timings {
            estimate_s: start.elapsed().as_secs_f64(),
            ..Timings::default()
        },
    })
}

pub fn estimate_full(dataset: &Dataset, opts: &DmlOptions, seeds: &SeedBundle) -> Result<EstimateReport> {
    let rows: Vec<usize> = (0..dataset.n()).collect();
    estimate_on_rows(dataset, &rows, MethodTag::FULL, opts, seeds.folds)
}

pub fn estimate_unif(
    dataset: &Dataset,
    r: usize,
    opts: &DmlOptions,
    seeds: &SeedBundle,
) -> Result<EstimateReport> {
    let start = Instant::now();
    let rows = uniform_subsample(dataset.n(), r, seeds.subsample)?;
    let subsample_s = start.elapsed().as_secs_f64();
    let mut report = estimate_on_rows(dataset, &rows, MethodTag::UNIF, opts, seeds.folds)?;
    report.timings.subsample_s = subsample_s;
    Ok(report)
}

/// Everything produced by the UD subsampling phase.
#[derive(Debug, Clone)]
pub struct UdSelection {
    pub space: RotatedSpace,
    /// Rotated coordinates of every dataset row (n×q).
    pub scores: Array2<f64>,
    pub skeleton: std::sync::Arc<UDSkeleton>,
    pub skeleton_source: CacheOutcome,
    /// Skeleton points mapped into rotated space (r_p×q).
    pub anchors: Array2<f64>,
    pub selection: SubsampleSelection,
    pub timings: Timings,
}

/// Rotation → skeleton (cached) → ECDF-inverse anchors → paired matching.
pub fn ud_select(
    dataset: &Dataset,
    params: &UdParams,
    design_seed: u64,
    cache: &SkeletonCache,
) -> Result<UdSelection> {
    if params.r_p == 0 {
        return Err(Error::InvalidArgument("r_p must be positive".into()));
    }
    if !(params.rho0 > 0.0 && params.rho0 <= 1.0) {
        return Err(Error::InvalidArgument(format!("rho0 must lie in (0, 1], got {}", params.rho0)));
    }
    if params.budget == 0 {
        return Err(Error::InvalidArgument("design search budget must be positive".into()));
    }
    for arm in [1u8, 0u8] {
        let size = dataset.arm_count(arm);
        if size < params.r_p {
            return Err(Error::ArmTooSmall {
                arm,
                size,
                needed: params.r_p,
            });
        }
    }
    let mut timings = Timings::default();
    let t0 = Instant::now();
    let (space, scores) = fit_rotation_with_scores(dataset.covariates(), params.rho0)?;
    timings.rotation_s = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let key = SkeletonKey {
        r_p: params.r_p,
        q: space.q,
        budget: params.budget,
        seed: design_seed,
    };
    let (skeleton, skeleton_source) = cache.get_or_build(key)?;
    timings.design_s = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    let anchors = space.map_design(skeleton.points.view())?;
    let selection = select_pairs(scores.view(), &dataset.w, anchors.view())?;
    timings.matching_s = t2.elapsed().as_secs_f64();
    timings.subsample_s = t0.elapsed().as_secs_f64();
    Ok(UdSelection {
        space,
        scores,
        skeleton,
        skeleton_source,
        anchors,
        selection,
        timings,
    })
}

pub fn estimate_ud(
    dataset: &Dataset,
    params: &UdParams,
    opts: &DmlOptions,
    seeds: &SeedBundle,
    cache: &SkeletonCache,
) -> Result<EstimateReport> {
    opts.validate()?;
    let sel = ud_select(dataset, params, seeds.design, cache)?;
    let rows = sel.selection.all_indices();
    let mut report = estimate_on_rows(dataset, &rows, MethodTag::UD, opts, seeds.folds)?;
    let estimate_s = report.timings.estimate_s;
    report.timings = Timings {
        estimate_s,
        ..sel.timings
    };
    report.ud = Some(UdDiagnostics {
        q: sel.space.q,
        explained_fraction: sel.space.explained_fraction,
        generator: sel.skeleton.generator,
        discrepancy_sq: sel.skeleton.discrepancy_sq,
        radius_treated: sel.selection.radius_treated,
        radius_control: sel.selection.radius_control,
        skeleton_source: format!("{:?}", sel.skeleton_source).to_lowercase(),
    });
    Ok(report)
}
