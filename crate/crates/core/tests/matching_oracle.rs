use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uddml::matching::select_pairs;

/// Greedy linear scan: anchors in order, nearest available unit per arm,
/// ties to the lower row id.
fn greedy(z: &Array2<f64>, w: &[u8], anchors: &Array2<f64>, arm: u8) -> (Vec<usize>, Vec<f64>) {
    let mut taken = vec![false; w.len()];
    let mut ids = Vec::new();
    let mut dists = Vec::new();
    for a in anchors.rows() {
        let mut best: Option<(f64, usize)> = None;
        for i in 0..w.len() {
            if w[i] != arm || taken[i] {
                continue;
            }
            let d = z
                .row(i)
                .iter()
                .zip(a.iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, i));
            }
        }
        let (d, i) = best.expect("arm large enough");
        taken[i] = true;
        ids.push(i);
        dists.push(d);
    }
    (ids, dists)
}

fn instance(rng: &mut ChaCha8Rng, lattice: bool) -> (Array2<f64>, Vec<u8>, Array2<f64>) {
    let n = rng.random_range(4..=200);
    let q = rng.random_range(1..=4);
    let coord = |rng: &mut ChaCha8Rng| {
        if lattice {
            f64::from(rng.random_range(0..4u8))
        } else {
            rng.random::<f64>() * 4.0 - 2.0
        }
    };
    let z = Array2::from_shape_fn((n, q), |_| coord(rng));
    let mut w: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<f64>() < 0.4)).collect();
    w[0] = 0;
    w[1] = 1;
    let smaller = w.iter().filter(|&&v| v == 1).count().min(w.iter().filter(|&&v| v == 0).count());
    let r_p = rng.random_range(1..=smaller);
    let anchors = Array2::from_shape_fn((r_p, q), |_| coord(rng));
    (z, w, anchors)
}

#[test]
fn select_pairs_equals_greedy_scan_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..200 {
        // Every fourth instance sits on an integer lattice to force ties.
        let (z, w, anchors) = instance(&mut rng, case % 4 == 0);
        let sel = select_pairs(z.view(), &w, anchors.view()).unwrap();
        let (t_ids, t_d) = greedy(&z, &w, &anchors, 1);
        let (c_ids, c_d) = greedy(&z, &w, &anchors, 0);
        assert_eq!(sel.treated_indices, t_ids, "case {case}");
        assert_eq!(sel.control_indices, c_ids, "case {case}");
        assert_eq!(sel.treated_distances, t_d, "case {case}");
        assert_eq!(sel.control_distances, c_d, "case {case}");
        assert_eq!(sel.radius_treated, t_d.iter().copied().fold(0.0, f64::max));
        assert_eq!(sel.radius_control, c_d.iter().copied().fold(0.0, f64::max));
    }
}

#[test]
fn n50_rp5_instance() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z = Array2::from_shape_fn((50, 3), |_| rng.random::<f64>());
    let w: Vec<u8> = (0..50).map(|i| (i % 2) as u8).collect();
    let anchors = Array2::from_shape_fn((5, 3), |_| rng.random::<f64>());
    let sel = select_pairs(z.view(), &w, anchors.view()).unwrap();
    assert_eq!(sel.treated_indices, greedy(&z, &w, &anchors, 1).0);
    assert_eq!(sel.control_indices, greedy(&z, &w, &anchors, 0).0);
    let all = sel.all_indices();
    let mut dedup = all.clone();
    dedup.sort_unstable();
    dedup.dedup();
    assert_eq!(dedup.len(), 10, "without replacement");
}
