//! Good-lattice-point uniform designs with power generators, the closed-form
//! mixture discrepancy, budgeted generator search, GEFD diagnostics and an
//! on-disk skeleton cache.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::RotatedSpace;

/// Default size of the random generator subset examined by the search.
pub const DEFAULT_BUDGET: usize = 30;

/// Version tag written into every cache file; bump to invalidate old entries.
pub const CACHE_FORMAT_VERSION: u32 = 1;

/// A quasi-optimal r_p-run q-factor lattice design.
#[derive(Debug, Clone, PartialEq)]
pub struct UDSkeleton {
    /// r_p×q, every coordinate of the form (k - 0.5)/r_p.
    pub points: Array2<f64>,
    pub generator: u64,
    pub r_p: usize,
    pub q: usize,
    pub discrepancy_sq: f64,
    pub search_budget: usize,
    pub search_seed: u64,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// γ^0, …, γ^{q-1} modulo r_p + 1.
fn power_residues(gamma: u64, r_p: usize, q: usize) -> Vec<u64> {
    let modulus = r_p as u64 + 1;
    let mut out = Vec::with_capacity(q);
    let mut cur = 1 % modulus;
    for _ in 0..q {
        out.push(cur);
        cur = cur * (gamma % modulus) % modulus;
    }
    out
}

/// γ is admissible when gcd(γ, r_p + 1) = 1 and its first q powers are
/// pairwise distinct modulo r_p + 1.
pub fn is_admissible(gamma: u64, r_p: usize, q: usize) -> bool {
    if gamma == 0 || r_p < 2 || q == 0 {
        return false;
    }
    if gcd(gamma, r_p as u64 + 1) != 1 {
        return false;
    }
    let mut res = power_residues(gamma, r_p, q);
    res.sort_unstable();
    res.windows(2).all(|w| w[0] != w[1])
}

/// All admissible generators in 1..=r_p, ascending.
pub fn admissible_generators(r_p: usize, q: usize) -> Vec<u64> {
    (1..=r_p as u64).filter(|&g| is_admissible(g, r_p, q)).collect()
}

/// Row j (1-based) has coordinates mod(j·γ^{d-1}, r_p+1)/r_p - 1/(2 r_p).
pub fn build_candidate(gamma: u64, r_p: usize, q: usize) -> Result<Array2<f64>> {
    if !is_admissible(gamma, r_p, q) {
        return Err(Error::InadmissibleGenerator { gamma, r_p, q });
    }
    let modulus = r_p as u64 + 1;
    let powers = power_residues(gamma, r_p, q);
    let denom = 2.0 * r_p as f64;
    Ok(Array2::from_shape_fn((r_p, q), |(row, d)| {
        let k = (row as u64 + 1) * powers[d] % modulus;
        (2 * k - 1) as f64 / denom
    }))
}

#[inline]
fn kernel_factor(a: f64, b: f64, ca: f64, cb: f64) -> f64 {
    let diff = (a - b).abs();
    15.0 / 8.0 - 0.25 * ca - 0.25 * cb - 0.75 * diff + 0.5 * diff * diff
}

/// Mixture-discrepancy kernel K_M(u, t).
pub fn mixture_kernel(u: &[f64], t: &[f64]) -> f64 {
    u.iter()
        .zip(t)
        .map(|(&a, &b)| kernel_factor(a, b, (a - 0.5).abs(), (b - 0.5).abs()))
        .product()
}

/// Closed-form squared mixture discrepancy of a point set in [0,1]^q.
pub fn mixture_discrepancy_sq(points: ArrayView2<'_, f64>) -> Result<f64> {
    let (m, q) = points.dim();
    if m == 0 {
        return Err(Error::InvalidArgument("empty point set".into()));
    }
    if let Some(&bad) = points.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::CoordinateOutOfRange { value: bad });
    }
    let flat: Vec<f64> = points.iter().copied().collect();
    let centred: Vec<f64> = flat.iter().map(|v| (v - 0.5).abs()).collect();

    let first = (19.0f64 / 12.0).powi(q as i32);
    let mut single = 0.0;
    for j in 0..m {
        let mut prod = 1.0;
        for d in 0..q {
            let c = centred[j * q + d];
            prod *= 5.0 / 3.0 - 0.25 * c - 0.25 * c * c;
        }
        single += prod;
    }
    let mut pair_diag = 0.0;
    let mut pair_off = 0.0;
    for j in 0..m {
        let rj = &flat[j * q..(j + 1) * q];
        let cj = &centred[j * q..(j + 1) * q];
        let mut prod = 1.0;
        for d in 0..q {
            prod *= kernel_factor(rj[d], rj[d], cj[d], cj[d]);
        }
        pair_diag += prod;
        for k in (j + 1)..m {
            let rk = &flat[k * q..(k + 1) * q];
            let ck = &centred[k * q..(k + 1) * q];
            let mut prod = 1.0;
            for d in 0..q {
                prod *= kernel_factor(rj[d], rk[d], cj[d], ck[d]);
            }
            pair_off += prod;
        }
    }
    let mf = m as f64;
    Ok(first - 2.0 / mf * single + (pair_diag + 2.0 * pair_off) / (mf * mf))
}

/// Draws min(budget, #admissible) generators without replacement using
/// `seed` and keeps the one with the smallest discrepancy; ties go to the
/// smallest γ.
pub fn search_skeleton(r_p: usize, q: usize, budget: usize, seed: u64) -> Result<UDSkeleton> {
    if r_p < 2 {
        return Err(Error::InvalidArgument(format!("r_p = {r_p} must be at least 2")));
    }
    if q == 0 {
        return Err(Error::InvalidArgument("q must be at least 1".into()));
    }
    if budget == 0 {
        return Err(Error::InvalidArgument("search budget must be positive".into()));
    }
    let admissible = admissible_generators(r_p, q);
    if admissible.is_empty() {
        return Err(Error::NoAdmissibleGenerator { r_p, q });
    }
    let take = budget.min(admissible.len());
    let candidates: Vec<u64> = if take == admissible.len() {
        admissible
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        index::sample(&mut rng, admissible.len(), take)
            .into_iter()
            .map(|i| admissible[i])
            .collect()
    };

    let scored: Vec<(f64, u64)> = candidates
        .par_iter()
        .map(|&g| {
            let pts = build_candidate(g, r_p, q)?;
            Ok((mixture_discrepancy_sq(pts.view())?, g))
        })
        .collect::<Result<_>>()?;
    let (discrepancy_sq, generator) = scored
        .into_iter()
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .expect("at least one candidate");

    Ok(UDSkeleton {
        points: build_candidate(generator, r_p, q)?,
        generator,
        r_p,
        q,
        discrepancy_sq,
        search_budget: budget,
        search_seed: seed,
    })
}

/// Squared generalized empirical F-discrepancy of `selected` relative to the
/// rows of `full_rotated`, with K_M applied after the ECDF transform of
/// `space`.
pub fn gefd_sq(
    selected: ArrayView2<'_, f64>,
    full_rotated: ArrayView2<'_, f64>,
    space: &RotatedSpace,
) -> Result<f64> {
    for block in [&selected, &full_rotated] {
        if block.ncols() != space.q {
            return Err(Error::DimensionMismatch {
                expected: space.q,
                got: block.ncols(),
            });
        }
    }
    let m = selected.nrows();
    let n = full_rotated.nrows();
    if m == 0 || n == 0 {
        return Err(Error::InvalidArgument("empty point set".into()));
    }
    let transform = |block: ArrayView2<'_, f64>| -> Vec<Vec<f64>> {
        block.axis_iter(Axis(0)).map(|r| space.ecdf_forward(r)).collect()
    };
    let tz = transform(full_rotated);
    let tp = transform(selected);

    let sum_within = |pts: &[Vec<f64>]| -> f64 {
        (0..pts.len())
            .into_par_iter()
            .map(|i| {
                let mut s = mixture_kernel(&pts[i], &pts[i]);
                for k in (i + 1)..pts.len() {
                    s += 2.0 * mixture_kernel(&pts[i], &pts[k]);
                }
                s
            })
            .sum()
    };
    let zz = sum_within(&tz);
    let pp = sum_within(&tp);
    let zp: f64 = tz
        .par_iter()
        .map(|a| tp.iter().map(|b| mixture_kernel(a, b)).sum::<f64>())
        .sum();
    let (nf, mf) = (n as f64, m as f64);
    Ok(zz / (nf * nf) - 2.0 * zp / (nf * mf) + pp / (mf * mf))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SkeletonKey {
    pub r_p: usize,
    pub q: usize,
    pub budget: usize,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    format_version: u32,
    r_p: usize,
    q: usize,
    budget: usize,
    seed: u64,
    generator: u64,
    discrepancy_sq: String,
}

fn cache_file(dir: &Path, key: &SkeletonKey) -> PathBuf {
    dir.join(format!(
        "skeleton_rp{}_q{}_b{}_s{}.json",
        key.r_p, key.q, key.budget, key.seed
    ))
}

/// Load a skeleton for `key` from `dir`. Missing, unreadable, stale-version
/// or inconsistent entries are misses.
pub fn cache_lookup(dir: &Path, key: &SkeletonKey) -> Option<UDSkeleton> {
    let text = fs::read_to_string(cache_file(dir, key)).ok()?;
    let entry: CacheEntry = serde_json::from_str(&text).ok()?;
    if entry.format_version != CACHE_FORMAT_VERSION
        || entry.r_p != key.r_p
        || entry.q != key.q
        || entry.budget != key.budget
        || entry.seed != key.seed
    {
        return None;
    }
    let stored: f64 = entry.discrepancy_sq.parse().ok()?;
    let points = build_candidate(entry.generator, key.r_p, key.q).ok()?;
    let recomputed = mixture_discrepancy_sq(points.view()).ok()?;
    if recomputed.to_bits() != stored.to_bits() {
        return None;
    }
    Some(UDSkeleton {
        points,
        generator: entry.generator,
        r_p: key.r_p,
        q: key.q,
        discrepancy_sq: recomputed,
        search_budget: key.budget,
        search_seed: key.seed,
    })
}

/// Write-to-temp then rename, so concurrent writers never expose a partial
/// file.
pub fn cache_store(dir: &Path, skeleton: &UDSkeleton) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let key = SkeletonKey {
        r_p: skeleton.r_p,
        q: skeleton.q,
        budget: skeleton.search_budget,
        seed: skeleton.search_seed,
    };
    let entry = CacheEntry {
        format_version: CACHE_FORMAT_VERSION,
        r_p: key.r_p,
        q: key.q,
        budget: key.budget,
        seed: key.seed,
        generator: skeleton.generator,
        discrepancy_sq: format!("{:.16e}", skeleton.discrepancy_sq),
    };
    let target = cache_file(dir, &key);
    let tmp = dir.join(format!(
        ".{}.{}.tmp",
        target.file_name().unwrap().to_string_lossy(),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(serde_json::to_string_pretty(&entry)?.as_bytes())?;
        f.write_all(b"\n")?;
        f.sync_all()?;
    }
    fs::rename(&tmp, &target)?;
    Ok(target)
}

/// Where a skeleton came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheOutcome {
    Memory,
    Disk,
    Built,
}

/// Process-wide skeleton cache: in-memory map in front of an optional
/// cache directory. Concurrent requests for one key build it once.
#[derive(Debug, Default)]
pub struct SkeletonCache {
    dir: Option<PathBuf>,
    slots: Mutex<HashMap<SkeletonKey, Arc<Mutex<Option<Arc<UDSkeleton>>>>>>,
}

impl SkeletonCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn with_dir(dir: impl Into<PathBuf>) -> Self {
        SkeletonCache {
            dir: Some(dir.into()),
            slots: Mutex::default(),
        }
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn get_or_build(&self, key: SkeletonKey) -> Result<(Arc<UDSkeleton>, CacheOutcome)> {
        let slot = {
            let mut map = self.slots.lock().expect("cache map poisoned");
            map.entry(key).or_default().clone()
        };
        let mut guard = slot.lock().expect("cache slot poisoned");
        if let Some(sk) = guard.as_ref() {
            return Ok((sk.clone(), CacheOutcome::Memory));
        }
        let (sk, outcome) = match self.dir.as_deref().and_then(|d| cache_lookup(d, &key)) {
            Some(sk) => (sk, CacheOutcome::Disk),
            None => {
                let sk = search_skeleton(key.r_p, key.q, key.budget, key.seed)?;
                if let Some(d) = &self.dir {
                    cache_store(d, &sk)?;
                }
                (sk, CacheOutcome::Built)
            }
        };
        let sk = Arc::new(sk);
        *guard = Some(sk.clone());
        Ok((sk, outcome))
    }
}
