//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero if any
//! criterion fails. Pass criterion numbers as arguments to run a subset,
//! e.g. `cargo test --test acceptance -- 1 2 3`.

mod common;

use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uddml::bench::{
    bootstrap_real, normality_diagnostics, run_experiment, BootstrapSpec, Experiment, ExperimentResult,
    ExperimentSpec, MetricRow, Misspec, Spec,
};
use uddml::design::{mixture_discrepancy_sq, SkeletonCache};
use uddml::dgp::{simulate, DgpSpec, Scenario, THETA0};
use uddml::dml::{estimate_full, estimate_ud, ud_select, uniform_subsample};
use uddml::matching::{max_abs, select_pairs, smd_for_rows};
use uddml::nuisance::NuisanceConfig;
use uddml::{DmlOptions, MethodTag, SeedBundle, UdParams};

type Outcome = Result<String, String>;

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// Kernel, quadrature and greedy oracles are written out again here so the
// acceptance target stands alone.

fn k1(a: f64, b: f64) -> f64 {
    15.0 / 8.0 - (a - 0.5).abs() / 4.0 - (b - 0.5).abs() / 4.0 - 0.75 * (a - b).abs() + 0.5 * (a - b).powi(2)
}

fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    (1..=n)
        .map(|i| {
            let mut x = (std::f64::consts::PI * (i as f64 - 0.25) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            (x, 2.0 / ((1.0 - x * x) * dp * dp))
        })
        .collect()
}

fn integrate(f: &dyn Fn(f64) -> f64, breaks: &[f64], rule: &[(f64, f64)]) -> f64 {
    let mut cuts = vec![0.0, 1.0];
    cuts.extend(breaks.iter().copied().filter(|&b| b > 0.0 && b < 1.0));
    cuts.sort_by(f64::total_cmp);
    cuts.windows(2)
        .map(|w| {
            let (mid, half) = (0.5 * (w[0] + w[1]), 0.5 * (w[1] - w[0]));
            rule.iter().map(|&(x, wt)| wt * half * f(mid + half * x)).sum::<f64>()
        })
        .sum()
}

fn quadrature_discrepancy(points: &Array2<f64>) -> f64 {
    let rule = gauss_legendre(8);
    let (m, q) = points.dim();
    let dd = integrate(&|a| integrate(&|b| k1(a, b), &[0.5, a], &rule), &[0.5], &rule);
    let single: f64 = (0..m)
        .map(|j| {
            (0..q)
                .map(|d| {
                    let x = points[[j, d]];
                    integrate(&|a| k1(a, x), &[0.5, x], &rule)
                })
                .product::<f64>()
        })
        .sum();
    let pairs: f64 = (0..m)
        .flat_map(|j| (0..m).map(move |k| (j, k)))
        .map(|(j, k)| (0..q).map(|d| k1(points[[j, d]], points[[k, d]])).product::<f64>())
        .sum();
    let mf = m as f64;
    dd.powi(q as i32) - 2.0 / mf * single + pairs / (mf * mf)
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let m = rng.random_range(1..=8);
        let q = rng.random_range(1..=3);
        let pts = Array2::from_shape_fn((m, q), |_| rng.random::<f64>());
        let closed = mixture_discrepancy_sq(pts.view()).map_err(|e| e.to_string())?;
        worst = worst.max((closed - quadrature_discrepancy(&pts)).abs());
    }
    verdict(worst < 1e-8, format!("max |closed form − quadrature| = {worst:.2e} over 20 sets (tol 1e-8)"))
}

fn criterion_2() -> Outcome {
    let centre = mixture_discrepancy_sq(Array2::from_elem((1, 1), 0.5).view()).map_err(|e| e.to_string())?;
    let corner = mixture_discrepancy_sq(Array2::zeros((1, 1)).view()).map_err(|e| e.to_string())?;
    let want_centre = 0.125;
    let want_corner = 19.0 / 12.0 - 2.0 * (25.0 / 16.0) + 7.0 / 4.0;
    verdict(
        (centre - want_centre).abs() < 1e-12 && (corner - want_corner).abs() < 1e-12,
        format!(
            "D²({{0.5}}) = {centre:.15} (want {want_centre}); D²({{0}}) = {corner:.15} (want {want_corner:.15}); \
             quadrature of the kernel definition gives {:.15} for {{0}}",
            quadrature_discrepancy(&Array2::zeros((1, 1)))
        ),
    )
}

fn greedy(z: &Array2<f64>, w: &[u8], anchors: &Array2<f64>, arm: u8) -> (Vec<usize>, Vec<f64>) {
    let mut taken = vec![false; w.len()];
    let mut out = (Vec::new(), Vec::new());
    for a in anchors.rows() {
        let mut best: Option<(f64, usize)> = None;
        for i in (0..w.len()).filter(|&i| w[i] == arm && !taken[i]) {
            let d = z.row(i).iter().zip(a.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, i));
            }
        }
        let (d, i) = best.unwrap();
        taken[i] = true;
        out.0.push(i);
        out.1.push(d);
    }
    out
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    for case in 0..200 {
        let n = rng.random_range(4..=200);
        let q = rng.random_range(1..=4);
        let lattice = case % 4 == 0;
        let coord = |rng: &mut ChaCha8Rng| {
            if lattice {
                f64::from(rng.random_range(0..4u8))
            } else {
                rng.random::<f64>()
            }
        };
        let z = Array2::from_shape_fn((n, q), |_| coord(&mut rng));
        let mut w: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<f64>() < 0.5)).collect();
        w[0] = 0;
        w[1] = 1;
        let small = w.iter().filter(|&&v| v == 1).count().min(w.iter().filter(|&&v| v == 0).count());
        let r_p = rng.random_range(1..=small);
        let anchors = Array2::from_shape_fn((r_p, q), |_| coord(&mut rng));
        let sel = select_pairs(z.view(), &w, anchors.view()).map_err(|e| e.to_string())?;
        if (sel.treated_indices.clone(), sel.treated_distances.clone()) != greedy(&z, &w, &anchors, 1)
            || (sel.control_indices.clone(), sel.control_distances.clone()) != greedy(&z, &w, &anchors, 0)
        {
            mismatches += 1;
        }
    }
    verdict(mismatches == 0, format!("{mismatches}/200 instances differ from the greedy scan"))
}

fn run(spec: &ExperimentSpec, cache: &SkeletonCache) -> Result<ExperimentResult, String> {
    run_experiment(spec, None, cache).map_err(|e| e.to_string())
}

fn cell(res: &ExperimentResult, pred: impl Fn(&uddml::bench::CellKey) -> bool) -> Result<&MetricRow, String> {
    res.row(pred).ok_or_else(|| "missing cell".to_string())
}

fn desk_spec(experiment: Experiment) -> ExperimentSpec {
    ExperimentSpec {
        scenarios: vec![Scenario::Obs3],
        n_grid: vec![100_000],
        r_grid: vec![5000],
        replicates: 100,
        methods: vec![MethodTag::UD, MethodTag::UNIF],
        workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
        ..ExperimentSpec::preset(experiment)
    }
}

fn criterion_4(cache: &SkeletonCache) -> Outcome {
    let res = run(&desk_spec(Experiment::SubsampleSweep), cache)?;
    let ud = cell(&res, |c| c.method == MethodTag::UD)?;
    let unif = cell(&res, |c| c.method == MethodTag::UNIF)?;
    let ok = ud.rmse <= 0.06
        && unif.rmse >= 1.3 * ud.rmse
        && (0.88..=0.99).contains(&ud.coverage)
        && ud.ci_width <= 0.7 * unif.ci_width;
    verdict(
        ok,
        format!(
            "UD rmse {:.4} cover {:.2} width {:.4} | UNIF rmse {:.4} cover {:.2} width {:.4} | ratio {:.2} (failures {}/{})",
            ud.rmse,
            ud.coverage,
            ud.ci_width,
            unif.rmse,
            unif.coverage,
            unif.ci_width,
            unif.rmse / ud.rmse,
            ud.failures,
            unif.failures
        ),
    )
}

fn criterion_5(cache: &SkeletonCache) -> Outcome {
    let obs1 = run(
        &ExperimentSpec {
            scenarios: vec![Scenario::Obs1],
            misspec_grid: vec![Misspec::new(Spec::Correct, Spec::Wrong), Misspec::new(Spec::Wrong, Spec::Correct)],
            ..desk_spec(Experiment::DoubleRobust)
        },
        cache,
    )?;
    let obs3 = run(
        &ExperimentSpec {
            misspec_grid: vec![Misspec::new(Spec::Wrong, Spec::Wrong)],
            ..desk_spec(Experiment::DoubleRobust)
        },
        cache,
    )?;
    let mut ok = true;
    let mut parts = Vec::new();
    for row in &obs1.rows {
        ok &= row.coverage >= 0.85;
        let m = row.cell.misspec.unwrap();
        parts.push(format!("obs1 {}/{} {} {:.2}", m.outcome, m.propensity, row.cell.method, row.coverage));
    }
    let ud = cell(&obs3, |c| c.method == MethodTag::UD)?;
    let unif = cell(&obs3, |c| c.method == MethodTag::UNIF)?;
    ok &= ud.coverage >= 0.85 && unif.coverage <= 0.30;
    parts.push(format!("obs3 Wrong/Wrong UD {:.2} UNIF {:.2}", ud.coverage, unif.coverage));
    verdict(ok, parts.join("; "))
}

fn criterion_6(cache: &SkeletonCache) -> Outcome {
    let res = run(
        &ExperimentSpec {
            scenarios: vec![Scenario::Obs3Overlap],
            c_grid: vec![0.1, 0.5, 1.0, 1.5],
            replicates: 50,
            ..desk_spec(Experiment::OverlapGradient)
        },
        cache,
    )?;
    let series = |m: MethodTag| -> Vec<f64> {
        let mut rows: Vec<&MetricRow> = res.rows.iter().filter(|r| r.cell.method == m).collect();
        rows.sort_by(|a, b| a.cell.c.unwrap().total_cmp(&b.cell.c.unwrap()));
        rows.iter().map(|r| r.rmse).collect()
    };
    let (ud, unif) = (series(MethodTag::UD), series(MethodTag::UNIF));
    let monotone = unif.windows(2).all(|w| w[1] >= w[0]);
    let flat = ud[3] <= 1.5 * ud[0];
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ");
    verdict(
        monotone && flat,
        format!("c = 0.1, 0.5, 1.0, 1.5 | UNIF rmse [{}] | UD rmse [{}]", fmt(&unif), fmt(&ud)),
    )
}

fn criterion_7(cache: &SkeletonCache) -> Outcome {
    let res = run(
        &ExperimentSpec {
            n_grid: vec![50_000],
            r_grid: vec![2000],
            replicates: 500,
            methods: vec![MethodTag::UD],
            ..desk_spec(Experiment::SubsampleSweep)
        },
        cache,
    )?;
    let theta: Vec<f64> = res.records.iter().filter_map(|r| r.outcome.as_ref().ok()).map(|e| e.theta_hat).collect();
    let norm = normality_diagnostics(&theta, THETA0).map_err(|e| e.to_string())?;
    verdict(
        norm.ks_distance < 0.08,
        format!(
            "KS distance {:.4} over {} estimates (bias {:+.4}, sd {:.4})",
            norm.ks_distance,
            theta.len(),
            norm.bias,
            norm.sample_sd
        ),
    )
}

fn criterion_8(cache: &SkeletonCache) -> Outcome {
    let mut wins = 0;
    for seed in 0..100u64 {
        let data = simulate(&DgpSpec::new(Scenario::Obs3, 20_000), 8_000 + seed).map_err(|e| e.to_string())?;
        let sel = ud_select(&data, &UdParams::new(500), 0, cache).map_err(|e| e.to_string())?;
        let ud = max_abs(&smd_for_rows(data.covariates(), &sel.selection.treated_indices, &sel.selection.control_indices));
        let rows = uniform_subsample(data.n(), 1000, seed).map_err(|e| e.to_string())?;
        let (t, c): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| data.w[i] == 1);
        let unif = max_abs(&smd_for_rows(data.covariates(), &t, &c));
        wins += usize::from(ud < unif);
    }
    verdict(wins >= 90, format!("UD max|SMD| below UNIF in {wins}/100 seeds"))
}

fn criterion_9(cache: &SkeletonCache) -> Outcome {
    let data = simulate(&DgpSpec::new(Scenario::Obs3, 100_000), 9).map_err(|e| e.to_string())?;
    let opts = DmlOptions::default();
    let params = UdParams::new(2500);
    let seeds = SeedBundle::new(0, 9);
    ud_select(&data, &params, seeds.design, cache).map_err(|e| e.to_string())?;
    let t = Instant::now();
    let ud = estimate_ud(&data, &params, &opts, &seeds, cache).map_err(|e| e.to_string())?;
    let ud_s = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let full = estimate_full(&data, &opts, &seeds).map_err(|e| e.to_string())?;
    let full_s = t.elapsed().as_secs_f64();
    verdict(
        ud_s < full_s,
        format!(
            "UD-DML {ud_s:.2}s (θ̂ {:.4}) vs FULL-DML {full_s:.2}s (θ̂ {:.4}), warm skeleton cache",
            ud.theta_hat, full.theta_hat
        ),
    )
}

fn criterion_10(cache: &SkeletonCache) -> Outcome {
    let data = common::natality_like(200_000, 10);
    let spec = BootstrapSpec {
        r: 5000,
        replicates: 50,
        methods: vec![MethodTag::UD, MethodTag::UNIF],
        base_seed: 10,
        k: 5,
        alpha: 0.05,
        rho0: 0.85,
        budget: 30,
        nuisance: NuisanceConfig::default(),
        workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let res = bootstrap_real(&data, &spec, cache).map_err(|e| e.to_string())?;
    let get = |m: MethodTag| res.summaries.iter().find(|s| s.method == m).unwrap();
    let (ud, unif) = (get(MethodTag::UD), get(MethodTag::UNIF));
    verdict(
        ud.mc_sd < unif.mc_sd,
        format!(
            "treated {:.1}% | UD mc_sd {:.5} ({} ok) vs UNIF mc_sd {:.5} ({} ok); FULL θ̂ {:.4}",
            100.0 * data.treated_fraction(),
            ud.mc_sd,
            ud.successes,
            unif.mc_sd,
            unif.successes,
            res.reference.theta_hat
        ),
    )
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let cache = SkeletonCache::in_memory();
    let criteria: Vec<(usize, &str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        (1, "mixture discrepancy equals quadrature", Box::new(criterion_1)),
        (2, "single-point discrepancy values", Box::new(criterion_2)),
        (3, "matching equals greedy scan", Box::new(criterion_3)),
        (4, "OBS-3 desk-scale UD vs UNIF", Box::new(|| criterion_4(&cache))),
        (5, "double robustness grid", Box::new(|| criterion_5(&cache))),
        (6, "overlap gradient", Box::new(|| criterion_6(&cache))),
        (7, "normality of UD estimates", Box::new(|| criterion_7(&cache))),
        (8, "UD balance beats uniform", Box::new(|| criterion_8(&cache))),
        (9, "UD-DML faster than FULL-DML", Box::new(|| criterion_9(&cache))),
        (10, "bootstrap on 4%-treated synthetic data", Box::new(|| criterion_10(&cache))),
    ];
    let mut failed = Vec::new();
    for (id, name, check) in &criteria {
        if !wanted.is_empty() && !wanted.contains(id) {
            continue;
        }
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS  {name} [{secs:.1}s]: {detail}"),
            Err(detail) => {
                println!("criterion {id:>2} FAIL  {name} [{secs:.1}s]: {detail}");
                failed.push(*id);
            }
        }
    }
    if !failed.is_empty() {
        println!("acceptance: {} criteria failed: {failed:?}", failed.len());
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
