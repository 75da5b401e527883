//! Nuisance learners: outcome regressions m₀, m₁ and the propensity e.

pub mod boosting;
pub mod linear;

use ndarray::{ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
pub use boosting::{BoostedTrees, BoostingParams};
pub use linear::{LinearModel, LogisticModel};

/// Column used by the deliberately misspecified learners (the fifth covariate).
pub const MISSPEC_COLUMN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeLearner {
    BoostedTrees,
    Linear,
    LinearOnX5,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropensityLearner {
    BoostedTrees,
    Logistic,
    LogisticOnX5,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Clip {
    pub low: f64,
    pub high: f64,
}

impl Default for Clip {
    fn default() -> Self {
        Clip { low: 0.01, high: 0.99 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NuisanceConfig {
    pub outcome_learner: OutcomeLearner,
    pub propensity_learner: PropensityLearner,
    pub boosting: BoostingParams,
    pub clip: Clip,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        NuisanceConfig {
            outcome_learner: OutcomeLearner::BoostedTrees,
            propensity_learner: PropensityLearner::BoostedTrees,
            boosting: BoostingParams::default(),
            clip: Clip::default(),
        }
    }
}

impl NuisanceConfig {
    /// Linear outcome and logistic propensity on all covariates.
    pub fn parametric() -> Self {
        NuisanceConfig {
            outcome_learner: OutcomeLearner::Linear,
            propensity_learner: PropensityLearner::Logistic,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let Clip { low, high } = self.clip;
        if !(0.0 < low && low < high && high < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "propensity clip must satisfy 0 < low < high < 1, got [{low}, {high}]"
            )));
        }
        self.boosting.validate().map_err(Error::InvalidArgument)
    }

    fn needs_x5(&self) -> bool {
        self.outcome_learner == OutcomeLearner::LinearOnX5
            || self.propensity_learner == PropensityLearner::LogisticOnX5
    }
}

#[derive(Debug, Clone, PartialEq)]
enum OutcomeModel {
    Boosted(BoostedTrees),
    Linear(LinearModel),
    LinearOnX5(LinearModel),
}

impl OutcomeModel {
    fn fit(learner: OutcomeLearner, x: ArrayView2<'_, f64>, y: &[f64], params: &BoostingParams) -> Self {
        match learner {
            OutcomeLearner::BoostedTrees => OutcomeModel::Boosted(BoostedTrees::fit_regression(x, y, params)),
            OutcomeLearner::Linear => OutcomeModel::Linear(LinearModel::fit(x, y)),
            OutcomeLearner::LinearOnX5 => OutcomeModel::LinearOnX5(LinearModel::fit(x5(x), y)),
        }
    }

    fn predict(&self, x: ArrayView2<'_, f64>) -> Vec<f64> {
        match self {
            OutcomeModel::Boosted(m) => m.predict(x),
            OutcomeModel::Linear(m) => m.predict(x),
            OutcomeModel::LinearOnX5(m) => m.predict(x5(x)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum PropensityModel {
    Boosted(BoostedTrees),
    Logistic(LogisticModel),
    LogisticOnX5(LogisticModel),
}

impl PropensityModel {
    fn predict(&self, x: ArrayView2<'_, f64>) -> Vec<f64> {
        match self {
            PropensityModel::Boosted(m) => m.predict(x),
            PropensityModel::Logistic(m) => m.predict_proba(x),
            PropensityModel::LogisticOnX5(m) => m.predict_proba(x5(x)),
        }
    }
}

fn x5(x: ArrayView2<'_, f64>) -> ArrayView2<'_, f64> {
    x.slice_move(ndarray::s![.., MISSPEC_COLUMN..=MISSPEC_COLUMN])
}

/// Fitted m₀, m₁ and e; immutable after fitting.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedNuisance {
    m0: OutcomeModel,
    m1: OutcomeModel,
    e: PropensityModel,
    clip: Clip,
    p: usize,
}

/// m₁ on treated rows, m₀ on control rows, e on all rows.
pub fn fit_nuisance(train: &Dataset, config: &NuisanceConfig) -> Result<FittedNuisance> {
    config.validate()?;
    let p = train.p();
    if config.needs_x5() && p <= MISSPEC_COLUMN {
        return Err(Error::DimensionMismatch {
            expected: MISSPEC_COLUMN + 1,
            got: p,
        });
    }
    let x = train.covariates();
    let mut arms = Vec::with_capacity(2);
    for arm in [0u8, 1u8] {
        let rows = train.arm_indices(arm);
        if rows.is_empty() {
            return Err(Error::EmptyArm { arm });
        }
        let xa = x.select(Axis(0), &rows);
        let ya: Vec<f64> = rows.iter().map(|&i| train.y[i]).collect();
        arms.push(OutcomeModel::fit(config.outcome_learner, xa.view(), &ya, &config.boosting));
    }
    let m1 = arms.pop().unwrap();
    let m0 = arms.pop().unwrap();
    let e = match config.propensity_learner {
        PropensityLearner::BoostedTrees => {
            PropensityModel::Boosted(BoostedTrees::fit_binary(x, &train.w, &config.boosting))
        }
        PropensityLearner::Logistic => PropensityModel::Logistic(LogisticModel::fit(x, &train.w)),
        PropensityLearner::LogisticOnX5 => {
            PropensityModel::LogisticOnX5(LogisticModel::fit(x5(x), &train.w))
        }
    };
    Ok(FittedNuisance {
        m0,
        m1,
        e,
        clip: config.clip,
        p,
    })
}

/// Element-wise clamp into `[clip.low, clip.high]`.
pub fn clip_propensities(raw: &[f64], clip: Clip) -> Vec<f64> {
    raw.iter().map(|&v| v.clamp(clip.low, clip.high)).collect()
}

impl FittedNuisance {
    fn check(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.p {
            return Err(Error::DimensionMismatch {
                expected: self.p,
                got: x.ncols(),
            });
        }
        Ok(())
    }

    pub fn predict_m0(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        self.check(x)?;
        Ok(self.m0.predict(x))
    }

    pub fn predict_m1(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        self.check(x)?;
        Ok(self.m1.predict(x))
    }

    /// Unclipped model probabilities.
    pub fn predict_propensity_raw(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        self.check(x)?;
        Ok(self.e.predict(x))
    }

    /// Probabilities clamped into the configured clip interval.
    pub fn predict_propensity(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        Ok(clip_propensities(&self.predict_propensity_raw(x)?, self.clip))
    }

    pub fn clip(&self) -> Clip {
        self.clip
    }
}
