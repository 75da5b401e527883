use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uddml::design::SkeletonCache;
use uddml::dgp::{simulate, DgpSpec, Scenario, THETA0};
use uddml::dml::{
    aipw_pseudo_outcome, estimate_full, estimate_ud, estimate_unif, uniform_subsample, EstimateReport,
};
use uddml::nuisance::{NuisanceConfig, OutcomeLearner};
use uddml::stats::{mean, sample_sd, two_sided_z};
use uddml::{Dataset, DmlOptions, Error, MethodTag, SeedBundle, UdParams};

fn parametric(k: usize) -> DmlOptions {
    DmlOptions {
        k,
        alpha: 0.05,
        nuisance: NuisanceConfig::parametric(),
    }
}

fn within(report: &EstimateReport, z: f64) -> bool {
    (report.theta_hat - THETA0).abs() <= z * report.std_error
}

#[test]
fn obs1_with_correct_linear_learners_recovers_the_ate() {
    let data = simulate(&DgpSpec::new(Scenario::Obs1, 100_000), 1).unwrap();
    let report = estimate_unif(&data, 5000, &parametric(2), &SeedBundle::new(0, 1)).unwrap();
    assert!(within(&report, 3.0), "{} ± {}", report.theta_hat, report.std_error);
    let ud = estimate_ud(&data, &UdParams::new(2500), &parametric(2), &SeedBundle::new(0, 1), &SkeletonCache::in_memory())
        .unwrap();
    assert!(within(&ud, 3.0), "{} ± {}", ud.theta_hat, ud.std_error);
}

#[test]
fn two_and_five_folds_both_cover() {
    for seed in 0..20 {
        let data = simulate(&DgpSpec::new(Scenario::Obs1, 3000), 100 + seed).unwrap();
        let seeds = SeedBundle::new(0, seed);
        let a = estimate_full(&data, &parametric(2), &seeds).unwrap();
        let b = estimate_full(&data, &parametric(5), &seeds).unwrap();
        assert_ne!(a.theta_hat, b.theta_hat);
        assert!(within(&a, 4.0) && within(&b, 4.0), "seed {seed}");
    }
}

#[test]
fn oracle_propensity_rescues_a_wrong_outcome_model() {
    let data = simulate(&DgpSpec::new(Scenario::Obs3, 100_000), 2).unwrap();
    let truth = data.truth.as_ref().unwrap();
    let rows = uniform_subsample(data.n(), 5000, 3).unwrap();
    // Bounded but wrong regressions: constant per arm.
    let psi: Vec<f64> = rows
        .iter()
        .map(|&i| aipw_pseudo_outcome(data.y[i], data.w[i], 0.3, -0.2, truth.e0[i]).unwrap())
        .collect();
    let se = sample_sd(&psi) / (psi.len() as f64).sqrt();
    assert!((mean(&psi) - THETA0).abs() < 4.0 * se, "{} ± {se}", mean(&psi));
}

#[test]
fn ud_runs_are_bit_identical() {
    let data = simulate(&DgpSpec::new(Scenario::Obs3, 20_000), 4).unwrap();
    let run = || {
        estimate_ud(&data, &UdParams::new(300), &DmlOptions::default(), &SeedBundle::new(7, 8), &SkeletonCache::in_memory())
            .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.method_tag, MethodTag::UD);
    assert_eq!(a.n_used, 600);
    assert_eq!((a.n_treated, a.n_control), (300, 300));
    assert_eq!(a.clone().without_details().timings_free(), b.clone().without_details().timings_free());
    assert_eq!(a.pseudo_outcomes, b.pseudo_outcomes);
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.fold_of, b.fold_of);
}

trait TimingsFree {
    fn timings_free(self) -> Self;
}

impl TimingsFree for EstimateReport {
    fn timings_free(mut self) -> Self {
        self.timings = Default::default();
        self
    }
}

#[test]
fn interval_width_identity() {
    let data = simulate(&DgpSpec::new(Scenario::Obs2, 4000), 5).unwrap();
    for alpha in [0.01, 0.05, 0.2] {
        let opts = DmlOptions { alpha, ..parametric(3) };
        let r = estimate_full(&data, &opts, &SeedBundle::new(0, 0)).unwrap();
        let want = 2.0 * two_sided_z(alpha) * r.variance.sqrt();
        assert!((r.ci_width() - want).abs() <= 1e-12 * want);
        assert!(r.covers(r.theta_hat));
    }
}

#[test]
fn identical_arms_with_exact_linear_outcomes_give_the_effect_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let half = Array2::from_shape_fn((200, 3), |_| rng.random::<f64>() * 2.0 - 1.0);
    let mut x = Array2::zeros((400, 3));
    x.slice_mut(ndarray::s![..200, ..]).assign(&half);
    x.slice_mut(ndarray::s![200.., ..]).assign(&half);
    let w: Vec<u8> = (0..400).map(|i| u8::from(i < 200)).collect();
    let c = 2.75;
    let y: Vec<f64> = (0..400)
        .map(|i| 0.5 * x[[i, 0]] - x[[i, 1]] + 0.25 * x[[i, 2]] + c * f64::from(w[i]))
        .collect();
    let data = Dataset::new(y, w, x).unwrap();
    let opts = DmlOptions {
        nuisance: NuisanceConfig {
            outcome_learner: OutcomeLearner::Linear,
            ..NuisanceConfig::parametric()
        },
        ..DmlOptions::default()
    };
    let r = estimate_ud(&data, &UdParams::new(50), &opts, &SeedBundle::new(0, 0), &SkeletonCache::in_memory()).unwrap();
    assert!((r.theta_hat - c).abs() < 1e-8, "{}", r.theta_hat);
    assert!(r.variance < 1e-12, "{}", r.variance);
}

#[test]
fn uniform_subsample_treated_share_concentrates() {
    let data = simulate(&DgpSpec::new(Scenario::Obs1, 100_000), 9).unwrap();
    let p = data.treated_fraction();
    let r = 1000;
    let tol = 4.0 * (p * (1.0 - p) / r as f64).sqrt();
    let inside = (0..500u64)
        .filter(|&s| {
            let rows = uniform_subsample(data.n(), r, s).unwrap();
            let t = rows.iter().filter(|&&i| data.w[i] == 1).count() as f64 / r as f64;
            (t - p).abs() <= tol
        })
        .count();
    assert!(inside >= 495, "{inside}/500");
}

#[test]
fn uniform_subsample_is_a_permutation_when_r_equals_n() {
    let mut rows = uniform_subsample(50, 50, 1).unwrap();
    rows.sort_unstable();
    assert_eq!(rows, (0..50).collect::<Vec<_>>());
    assert!(uniform_subsample(50, 51, 1).is_err());
    assert_eq!(uniform_subsample(1000, 10, 4).unwrap(), uniform_subsample(1000, 10, 4).unwrap());
}

#[test]
fn too_few_treated_units_is_reported() {
    let data = simulate(&DgpSpec::new(Scenario::Obs1, 400), 1).unwrap();
    let err = estimate_ud(&data, &UdParams::new(300), &DmlOptions::default(), &SeedBundle::new(0, 0), &SkeletonCache::in_memory())
        .unwrap_err();
    assert!(matches!(err, Error::ArmTooSmall { .. }), "{err}");
    assert!(err.is_statistical());
}
