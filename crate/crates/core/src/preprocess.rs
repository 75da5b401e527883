//! Covariate standardization, PCA rotation with cumulative-variance
//! retention, and per-coordinate empirical CDFs on the rotated scores.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Above this many rows the rotation is computed from the p×p Gram matrix
/// instead of a thin SVD of the standardized data.
pub const SVD_MAX_ROWS: usize = 5_000;

/// A fitted standardization + PCA rotation and the marginal ECDFs of the
/// rotated training data.
#[derive(Debug, Clone)]
pub struct RotatedSpace {
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
    /// p×q, orthonormal columns.
    pub loadings: Array2<f64>,
    pub q: usize,
    pub explained_fraction: f64,
    /// All p eigenvalues of the standardized Gram matrix, descending.
    pub eigenvalues: Vec<f64>,
    /// One sorted array of fitted rotated values per retained coordinate.
    pub ecdfs: Vec<Vec<f64>>,
}

/// Fit the rotation on `x` and return it together with the rotated
/// training scores Z (n×q).
pub fn fit_rotation_with_scores(
    x: ArrayView2<'_, f64>,
    rho0: f64,
) -> Result<(RotatedSpace, Array2<f64>)> {
    let (n, p) = x.dim();
    if n < 2 {
        return Err(Error::TooFewRows { needed: 2, got: n });
    }
    if p == 0 {
        return Err(Error::InvalidArgument("covariate matrix has no columns".into()));
    }
    if !(rho0 > 0.0 && rho0 < 1.0) {
        return Err(Error::InvalidArgument(format!("rho0 = {rho0} must lie in (0, 1)")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("covariates".into()));
    }

    let mean = x.mean_axis(Axis(0)).expect("n >= 2");
    let mut scale = Array1::<f64>::ones(p);
    for (d, col) in x.axis_iter(Axis(1)).enumerate() {
        let m = mean[d];
        let ss: f64 = col.iter().map(|v| (v - m) * (v - m)).sum();
        let sd = (ss / (n - 1) as f64).sqrt();
        if sd > 1e-12 * m.abs().max(1.0) {
            scale[d] = sd;
        }
    }
    let standardized = standardize(x, &mean, &scale);

    let (eigenvalues, vectors) = if n <= SVD_MAX_ROWS {
        principal_axes_svd(&standardized)
    } else {
        principal_axes_gram(&standardized)
    };

    let total: f64 = eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let (q, explained_fraction) = if total <= 0.0 {
        (1, 1.0)
    } else {
        let mut cum = 0.0;
        let mut chosen = (p, 1.0);
        for (d, ev) in eigenvalues.iter().enumerate() {
            cum += ev.max(0.0);
            let frac = (cum / total).min(1.0);
            if frac >= rho0 {
                chosen = (d + 1, frac);
                break;
            }
        }
        chosen
    };

    let mut loadings = Array2::<f64>::zeros((p, q));
    for c in 0..q {
        let col: Vec<f64> = (0..p).map(|r| vectors[(r, c)]).collect();
        // largest-magnitude entry positive; first index wins on ties
        let mut arg = 0;
        for (r, v) in col.iter().enumerate() {
            if v.abs() > col[arg].abs() {
                arg = r;
            }
        }
        let sign = if col[arg] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..p {
            loadings[[r, c]] = sign * col[r];
        }
    }

    let scores = standardized.dot(&loadings);
    let ecdfs = scores
        .axis_iter(Axis(1))
        .map(|col| {
            let mut v = col.to_vec();
            v.sort_by(f64::total_cmp);
            v
        })
        .collect();

    let space = RotatedSpace {
        mean,
        scale,
        loadings,
        q,
        explained_fraction,
        eigenvalues,
        ecdfs,
    };
    Ok((space, scores))
}

pub fn fit_rotation(x: ArrayView2<'_, f64>, rho0: f64) -> Result<RotatedSpace> {
    fit_rotation_with_scores(x, rho0).map(|(s, _)| s)
}

fn standardize(x: ArrayView2<'_, f64>, mean: &Array1<f64>, scale: &Array1<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        for d in 0..row.len() {
            row[d] = (row[d] - mean[d]) / scale[d];
        }
    }
    out
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    let (n, p) = a.dim();
    DMatrix::from_fn(n, p, |i, j| a[[i, j]])
}

/// Eigenvalues (σ², descending) and matching right singular vectors.
fn principal_axes_svd(standardized: &Array2<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let p = standardized.ncols();
    let svd = to_dmatrix(standardized).svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut values = vec![0.0; p];
    let mut vectors = DMatrix::<f64>::zeros(p, p);
    for (c, &k) in order.iter().enumerate() {
        values[c] = svd.singular_values[k].powi(2);
        for r in 0..p {
            vectors[(r, c)] = v_t[(k, r)];
        }
    }
    // thin SVD with n < p yields fewer than p axes; remaining variance is zero
    (values, vectors)
}

fn principal_axes_gram(standardized: &Array2<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let p = standardized.ncols();
    let gram = standardized.t().dot(standardized);
    let eig = SymmetricEigen::new(to_dmatrix(&gram));
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = DMatrix::from_fn(p, p, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

impl RotatedSpace {
    pub fn p(&self) -> usize {
        self.mean.len()
    }

    /// Number of rows the ECDFs were fitted on.
    pub fn n_fitted(&self) -> usize {
        self.ecdfs.first().map_or(0, Vec::len)
    }

    /// Z = ((X - mean) / scale) · loadings.
    pub fn rotate(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.p() {
            return Err(Error::DimensionMismatch {
                expected: self.p(),
                got: x.ncols(),
            });
        }
        Ok(standardize(x, &self.mean, &self.scale).dot(&self.loadings))
    }

    /// Coordinate-wise ECDF: (# fitted values <= z_d) / n.
    pub fn ecdf_forward(&self, z: ArrayView1<'_, f64>) -> Vec<f64> {
        self.ecdfs
            .iter()
            .zip(z.iter())
            .map(|(sorted, &v)| sorted.partition_point(|&s| s <= v) as f64 / sorted.len() as f64)
            .collect()
    }

    /// Left-continuous generalized inverse: the smallest fitted order
    /// statistic whose ECDF value is >= u_d. u_d <= 0 maps to the minimum.
    pub fn ecdf_inverse(&self, u: ArrayView1<'_, f64>) -> Vec<f64> {
        self.ecdfs
            .iter()
            .zip(u.iter())
            .map(|(sorted, &ud)| sorted[inverse_rank(ud, sorted.len()) - 1])
            .collect()
    }

    /// ECDF-inverse applied to every row of a design in [0,1]^q.
    pub fn map_design(&self, design: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if design.ncols() != self.q {
            return Err(Error::DimensionMismatch {
                expected: self.q,
                got: design.ncols(),
            });
        }
        let mut out = Array2::zeros(design.dim());
        for (j, row) in design.axis_iter(Axis(0)).enumerate() {
            for (d, v) in self.ecdf_inverse(row).into_iter().enumerate() {
                out[[j, d]] = v;
            }
        }
        Ok(out)
    }
}

/// Smallest 1-based rank k in 1..=n with k/n >= u, computed with the same
/// division used by the forward transform so that round trips are exact.
fn inverse_rank(u: f64, n: usize) -> usize {
    let nf = n as f64;
    let mut k = (u * nf).ceil().clamp(1.0, nf) as usize;
    while k > 1 && (k - 1) as f64 / nf >= u {
        k -= 1;
    }
    while k < n && (k as f64) / nf < u {
        k += 1;
    }
    k
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn space_from_values(values: Vec<f64>) -> RotatedSpace {
        let mut sorted = values;
        sorted.sort_by(f64::total_cmp);
        RotatedSpace {
            mean: array![0.0],
            scale: array![1.0],
            loadings: array![[1.0]],
            q: 1,
            explained_fraction: 1.0,
            eigenvalues: vec![1.0],
            ecdfs: vec![sorted],
        }
    }

    fn random_matrix(n: usize, p: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, p), |_| rng.random::<f64>() * 4.0 - 2.0)
    }

    #[test]
    fn equal_variance_columns_keep_both_components() {
        // symmetric 2-column data: both correlation eigenvalues equal 1
        let x = array![[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]];
        let s = fit_rotation(x.view(), 0.85).unwrap();
        assert_eq!(s.q, 2);
        assert!((s.explained_fraction - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_one_data_keeps_one_component() {
        let x = Array2::from_shape_fn((50, 2), |(i, j)| (i as f64 * 0.37).sin() * (1.0 + j as f64));
        let s = fit_rotation(x.view(), 0.85).unwrap();
        assert_eq!(s.q, 1);
        assert!((s.explained_fraction - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_column_gets_unit_scale() {
        let x = array![[1.0, 3.0], [2.0, 3.0], [4.0, 3.0]];
        let s = fit_rotation(x.view(), 0.5).unwrap();
        assert_eq!(s.scale[1], 1.0);
        assert!(s.scale.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn rejects_bad_input() {
        let one = array![[1.0, 2.0]];
        assert!(matches!(fit_rotation(one.view(), 0.85), Err(Error::TooFewRows { .. })));
        let nan = array![[1.0, f64::NAN], [2.0, 3.0]];
        assert!(matches!(fit_rotation(nan.view(), 0.85), Err(Error::NonFinite(_))));
    }

    #[test]
    fn loadings_are_orthonormal_with_positive_dominant_entries() {
        let x = random_matrix(300, 6, 3);
        let s = fit_rotation(x.view(), 0.99).unwrap();
        let gram = s.loadings.t().dot(&s.loadings);
        for i in 0..s.q {
            for j in 0..s.q {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram[[i, j]] - want).abs() < 1e-8);
            }
            let col = s.loadings.column(i);
            let dom = col.iter().cloned().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            assert!(dom > 0.0);
        }
    }

    #[test]
    fn svd_and_gram_routes_agree() {
        let mut x = random_matrix(SVD_MAX_ROWS + 1, 4, 11);
        for i in 0..x.nrows() {
            x[[i, 1]] += 0.8 * x[[i, 0]];
        }
        let big = fit_rotation(x.view(), 0.9).unwrap();
        let small = fit_rotation(x.slice(ndarray::s![..SVD_MAX_ROWS, ..]), 0.9).unwrap();
        assert_eq!(big.q, small.q);
        // same subspace: |cosine| between matching leading axes close to 1
        let c = big.loadings.column(0).dot(&small.loadings.column(0));
        assert!(c > 0.99, "cos = {c}");
    }

    #[test]
    fn rotate_matches_scalar_arithmetic() {
        let x = random_matrix(40, 3, 5);
        let s = fit_rotation(x.view(), 0.95).unwrap();
        let block = random_matrix(3, 3, 6);
        let z = s.rotate(block.view()).unwrap();
        for i in 0..3 {
            for c in 0..s.q {
                let mut acc = 0.0;
                for d in 0..3 {
                    acc += (block[[i, d]] - s.mean[d]) / s.scale[d] * s.loadings[[d, c]];
                }
                assert!((z[[i, c]] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rotate_mean_row_is_zero_and_checks_width() {
        let x = random_matrix(40, 3, 9);
        let s = fit_rotation(x.view(), 0.95).unwrap();
        let m = s.mean.clone().insert_axis(Axis(0));
        assert!(s.rotate(m.view()).unwrap().iter().all(|v| v.abs() < 1e-12));
        let wrong = Array2::<f64>::zeros((1, 2));
        assert!(matches!(s.rotate(wrong.view()), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn identity_rotation_subtracts_mean() {
        let s = RotatedSpace {
            mean: array![1.0, -2.0],
            scale: array![1.0, 1.0],
            loadings: array![[1.0, 0.0], [0.0, 1.0]],
            q: 2,
            explained_fraction: 1.0,
            eigenvalues: vec![1.0, 1.0],
            ecdfs: vec![vec![0.0], vec![0.0]],
        };
        let z = s.rotate(array![[3.0, 5.0]].view()).unwrap();
        assert_eq!(z, array![[2.0, 7.0]]);
    }

    #[test]
    fn full_rank_rotation_is_invertible() {
        let x = random_matrix(200, 4, 21);
        let (s, z) = fit_rotation_with_scores(x.view(), 0.999_999).unwrap();
        assert_eq!(s.q, 4);
        let back = z.dot(&s.loadings.t());
        for i in 0..200 {
            for d in 0..4 {
                let std = (x[[i, d]] - s.mean[d]) / s.scale[d];
                assert!((back[[i, d]] - std).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn ecdf_forward_and_inverse_examples() {
        let s = space_from_values(vec![3.0, 1.0, 4.0, 2.0]);
        assert_eq!(s.ecdf_forward(array![2.5].view()), vec![0.5]);
        assert_eq!(s.ecdf_forward(array![0.0].view()), vec![0.0]);
        assert_eq!(s.ecdf_forward(array![4.0].view()), vec![1.0]);
        assert_eq!(s.ecdf_inverse(array![0.5].view()), vec![2.0]);
        assert_eq!(s.ecdf_inverse(array![0.0].view()), vec![1.0]);
        assert_eq!(s.ecdf_inverse(array![1.0].view()), vec![4.0]);
        assert_eq!(s.ecdf_inverse(array![0.51].view()), vec![3.0]);
    }

    #[test]
    fn ecdf_round_trip_on_atoms_with_ties() {
        let vals: Vec<f64> = (0..97).map(|i| ((i * 31) % 13) as f64 * 0.1).collect();
        let s = space_from_values(vals.clone());
        for v in vals {
            let u = s.ecdf_forward(array![v].view());
            assert_eq!(s.ecdf_inverse(ndarray::ArrayView1::from(&u)), vec![v]);
        }
    }

    proptest::proptest! {
        #[test]
        fn ecdf_inverse_is_generalized_inverse(
            vals in proptest::collection::vec(-5.0f64..5.0, 1..60),
            u in 1e-9f64..=1.0,
        ) {
            let s = space_from_values(vals);
            let z = s.ecdf_inverse(array![u].view());
            let back = s.ecdf_forward(ndarray::ArrayView1::from(&z));
            proptest::prop_assert!(back[0] >= u);
        }

        #[test]
        fn ecdf_forward_is_monotone(
            vals in proptest::collection::vec(-5.0f64..5.0, 1..60),
            a in -6.0f64..6.0,
            b in -6.0f64..6.0,
        ) {
            let s = space_from_values(vals);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let fl = s.ecdf_forward(array![lo].view())[0];
            let fh = s.ecdf_forward(array![hi].view())[0];
            proptest::prop_assert!(fl <= fh);
        }
    }
}
