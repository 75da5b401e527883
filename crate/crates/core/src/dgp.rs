//! Observational simulators with p = 10 covariates and θ₀ = 1.
//!
//! Y = g(X) + W·Δ(X) + ε, ε ~ N(0, 1), W ~ Bernoulli(e(X)).
//!
//! Randomness: one ChaCha8 generator per (seed, column), selected with
//! `set_stream`. Covariate d uses stream d−1, the OBS-3 mixture component
//! stream 10, the treatment draw stream 11 and the noise stream 12. Row i
//! always consumes the i-th draws of each stream, so growing n extends a
//! dataset instead of reshuffling it.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Truth};
use crate::error::{Error, Result};

pub const P: usize = 10;
pub const THETA0: f64 = 1.0;

const STREAM_COMPONENT: u64 = 10;
const STREAM_TREATMENT: u64 = 11;
const STREAM_NOISE: u64 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "obs1")]
    Obs1,
    #[serde(rename = "obs2")]
    Obs2,
    #[serde(rename = "obs3")]
    Obs3,
    /// OBS-3 with the propensity log-odds scaled by `overlap_c`.
    #[serde(rename = "obs3-overlap")]
    Obs3Overlap,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Obs1 => "obs1",
            Scenario::Obs2 => "obs2",
            Scenario::Obs3 => "obs3",
            Scenario::Obs3Overlap => "obs3-overlap",
        })
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "obs1" | "obs-1" => Ok(Scenario::Obs1),
            "obs2" | "obs-2" => Ok(Scenario::Obs2),
            "obs3" | "obs-3" => Ok(Scenario::Obs3),
            "obs3-overlap" => Ok(Scenario::Obs3Overlap),
            other => Err(Error::InvalidArgument(format!(
                "unknown scenario '{other}' (expected obs1, obs2, obs3 or obs3-overlap)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub scenario: Scenario,
    pub n: usize,
    /// Propensity scale; only read for `Obs3Overlap`.
    pub overlap_c: f64,
}

impl DgpSpec {
    pub fn new(scenario: Scenario, n: usize) -> Self {
        DgpSpec {
            scenario,
            n,
            overlap_c: 1.0,
        }
    }

    pub fn overlap(n: usize, c: f64) -> Self {
        DgpSpec {
            scenario: Scenario::Obs3Overlap,
            n,
            overlap_c: c,
        }
    }

    fn propensity_scale(&self) -> f64 {
        match self.scenario {
            Scenario::Obs3Overlap => self.overlap_c,
            _ => 1.0,
        }
    }

    /// g(x): outcome surface under control.
    pub fn baseline(&self, x: ArrayView1<'_, f64>) -> f64 {
        match self.scenario {
            Scenario::Obs1 => 0.5 * x[0] + 0.3 * x[1],
            Scenario::Obs2 => 0.5 * x[0] * x[0] + 0.5 * x[1] * x[2] + x[5].sin(),
            Scenario::Obs3 | Scenario::Obs3Overlap => {
                (PI * x[0]).sin() + 0.5 * x[1] * x[2] + 0.1 * x[5].powi(3) + 0.2 * x[6].cos()
            }
        }
    }

    /// Δ(x): conditional average treatment effect.
    pub fn cate(&self, x: ArrayView1<'_, f64>) -> f64 {
        match self.scenario {
            Scenario::Obs1 => 1.0 + 0.2 * x[2],
            Scenario::Obs2 => 1.0 + 0.5 * x[0] * x[1],
            Scenario::Obs3 | Scenario::Obs3Overlap => 1.0 + 0.5 * x[0].tanh() + 0.2 * x[5] * x[6],
        }
    }

    pub fn propensity_logit(&self, x: ArrayView1<'_, f64>) -> f64 {
        match self.scenario {
            Scenario::Obs1 => 0.2 * x[0] - 0.2 * x[1],
            Scenario::Obs2 => 0.5 * x[0] - 0.3 * x[1] * x[1] + 0.4 * x[5].sin() + 0.2 * x[6],
            Scenario::Obs3 | Scenario::Obs3Overlap => {
                self.propensity_scale() * (0.3 * x[0] + 0.3 * x[1] - 0.5 * x[5])
            }
        }
    }

    pub fn propensity(&self, x: ArrayView1<'_, f64>) -> f64 {
        1.0 / (1.0 + (-self.propensity_logit(x)).exp())
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidArgument("n must be positive".into()));
        }
        if self.scenario == Scenario::Obs3Overlap && !(self.overlap_c >= 0.0 && self.overlap_c.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "overlap multiplier must be finite and >= 0, got {}",
                self.overlap_c
            )));
        }
        Ok(())
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn uniform_column(seed: u64, id: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = stream(seed, id);
    (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect()
}

fn normal_column(seed: u64, id: u64, n: usize, sd: f64) -> Vec<f64> {
    let mut rng = stream(seed, id);
    (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn covariates(spec: &DgpSpec, seed: u64) -> Array2<f64> {
    let n = spec.n;
    let mut x = Array2::zeros((n, P));
    let columns: Vec<Vec<f64>> = match spec.scenario {
        Scenario::Obs1 => (0..P as u64).map(|d| uniform_column(seed, d, n, -2.0, 2.0)).collect(),
        Scenario::Obs2 => (0..P as u64)
            .map(|d| {
                if d < 5 {
                    uniform_column(seed, d, n, -2.0, 2.0)
                } else {
                    normal_column(seed, d, n, 1.5)
                }
            })
            .collect(),
        Scenario::Obs3 | Scenario::Obs3Overlap => {
            let mut comp = stream(seed, STREAM_COMPONENT);
            let sign: Vec<f64> = (0..n)
                .map(|_| if comp.random::<f64>() < 0.5 { -1.0 } else { 1.0 })
                .collect();
            (0..P as u64)
                .map(|d| {
                    if d < 5 {
                        let centre = if d < 2 { 2.0 } else { 0.0 };
                        normal_column(seed, d, n, 0.5)
                            .into_iter()
                            .zip(&sign)
                            .map(|(v, s)| s * centre + v)
                            .collect()
                    } else {
                        normal_column(seed, d, n, 1.0)
                    }
                })
                .collect()
        }
    };
    for (d, col) in columns.into_iter().enumerate() {
        x.column_mut(d).assign(&ndarray::Array1::from(col));
    }
    x
}

/// Closed-form (e₀, m₀, m₁) at every row of `x`, with m_g = g + g·Δ.
pub fn analytic_nuisance(spec: &DgpSpec, x: ArrayView2<'_, f64>) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    if x.ncols() != P {
        return Err(Error::DimensionMismatch {
            expected: P,
            got: x.ncols(),
        });
    }
    let mut e0 = Vec::with_capacity(x.nrows());
    let mut m0 = Vec::with_capacity(x.nrows());
    let mut m1 = Vec::with_capacity(x.nrows());
    for row in x.axis_iter(Axis(0)) {
        let g = spec.baseline(row);
        e0.push(spec.propensity(row));
        m0.push(g);
        m1.push(g + spec.cate(row));
    }
    Ok((e0, m0, m1))
}

/// Draw a dataset with its analytic truth attached.
pub fn simulate(spec: &DgpSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let n = spec.n;
    let x = covariates(spec, seed);
    let (e0, m0, m1) = analytic_nuisance(spec, x.view())?;
    let mut treat = stream(seed, STREAM_TREATMENT);
    let w: Vec<u8> = e0.iter().map(|&e| u8::from(treat.random::<f64>() < e)).collect();
    let noise = normal_column(seed, STREAM_NOISE, n, 1.0);
    let y: Vec<f64> = (0..n)
        .map(|i| if w[i] == 1 { m1[i] } else { m0[i] } + noise[i])
        .collect();
    let cate = m1.iter().zip(&m0).map(|(a, b)| a - b).collect();
    let mut ds = Dataset::new(y, w, x)?;
    ds.truth = Some(Truth { e0, m0, m1, cate });
    Ok(ds)
}
