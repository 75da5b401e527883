//! Ridge-stabilised least squares and logistic regression with an
//! unpenalised intercept.

use nalgebra::{DMatrix, DVector};
use ndarray::ArrayView2;

/// Ridge weight on every non-intercept coefficient.
pub const RIDGE: f64 = 1e-6;

const NEWTON_TOL: f64 = 1e-8;
const NEWTON_MAX_ITER: usize = 100;

fn design_with_intercept(x: ArrayView2<'_, f64>) -> DMatrix<f64> {
    let (n, p) = x.dim();
    DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { x[[i, j - 1]] })
}

fn solve_spd(a: DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    match a.clone().cholesky() {
        Some(ch) => ch.solve(b),
        None => a
            .lu()
            .solve(b)
            .unwrap_or_else(|| DVector::zeros(b.len())),
    }
}

/// y ≈ β₀ + xᵀβ.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub coefficients: Vec<f64>,
}

impl LinearModel {
    pub fn fit(x: ArrayView2<'_, f64>, y: &[f64]) -> Self {
        let design = design_with_intercept(x);
        let mut gram = design.transpose() * &design;
        for j in 1..gram.ncols() {
            gram[(j, j)] += RIDGE;
        }
        let rhs = design.transpose() * DVector::from_column_slice(y);
        LinearModel {
            coefficients: solve_spd(gram, &rhs).iter().copied().collect(),
        }
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Vec<f64> {
        x.rows()
            .into_iter()
            .map(|r| {
                self.coefficients[0]
                    + r.iter().zip(&self.coefficients[1..]).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^t) without overflow.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// P(W = 1 | x) = σ(β₀ + xᵀβ), fit by damped Newton on the ridge-penalised
/// negative log-likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub coefficients: Vec<f64>,
    pub iterations: usize,
}

/// Penalised negative log-likelihood and its gradient at `beta`
/// (intercept first).
pub fn logistic_objective(x: ArrayView2<'_, f64>, w: &[u8], beta: &[f64]) -> (f64, Vec<f64>) {
    let design = design_with_intercept(x);
    let b = DVector::from_column_slice(beta);
    let eta = &design * &b;
    let mut value = 0.0;
    let mut resid = DVector::zeros(eta.len());
    for i in 0..eta.len() {
        let wi = f64::from(w[i]);
        value += softplus(eta[i]) - wi * eta[i];
        resid[i] = sigmoid(eta[i]) - wi;
    }
    let mut grad = design.transpose() * resid;
    for j in 1..beta.len() {
        value += 0.5 * RIDGE * beta[j] * beta[j];
        grad[j] += RIDGE * beta[j];
    }
    (value, grad.iter().copied().collect())
}

impl LogisticModel {
    pub fn fit(x: ArrayView2<'_, f64>, w: &[u8]) -> Self {
        let design = design_with_intercept(x);
        let k = design.ncols();
        let mut beta = vec![0.0; k];
        let (mut value, mut grad) = logistic_objective(x, w, &beta);
        let mut iterations = 0;
        while iterations < NEWTON_MAX_ITER {
            let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if gnorm < NEWTON_TOL {
                break;
            }
            iterations += 1;
            let b = DVector::from_column_slice(&beta);
            let eta = &design * &b;
            let mut hess = DMatrix::<f64>::zeros(k, k);
            for i in 0..design.nrows() {
                let p = sigmoid(eta[i]);
                let wt = p * (1.0 - p);
                if wt == 0.0 {
                    continue;
                }
                let row = design.row(i);
                for a in 0..k {
                    let ra = row[a] * wt;
                    for c in a..k {
                        hess[(a, c)] += ra * row[c];
                    }
                }
            }
            for a in 0..k {
                for c in 0..a {
                    hess[(a, c)] = hess[(c, a)];
                }
                if a > 0 {
                    hess[(a, a)] += RIDGE;
                }
            }
            let step = solve_spd(hess, &DVector::from_column_slice(&grad));
            // backtracking on the objective
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let trial: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b - t * s).collect();
                let (tv, tg) = logistic_objective(x, w, &trial);
                if tv <= value {
                    beta = trial;
                    value = tv;
                    grad = tg;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        LogisticModel {
            coefficients: beta,
            iterations,
        }
    }

    pub fn predict_proba(&self, x: ArrayView2<'_, f64>) -> Vec<f64> {
        x.rows()
            .into_iter()
            .map(|r| {
                let eta = self.coefficients[0]
                    + r.iter().zip(&self.coefficients[1..]).map(|(a, b)| a * b).sum::<f64>();
                sigmoid(eta)
            })
            .collect()
    }
}
