//! Exact per-arm nearest-neighbour indexes over rotated covariates and the
//! paired anchor-to-unit selection that produces the balanced subsample.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use ndarray::{ArrayView1, ArrayView2, Axis};
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::stats;

const LEAF_SIZE: usize = 16;
const INITIAL_K: usize = 4;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        dim: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Median-split KD-tree with exact k-nearest-neighbour queries.
///
/// Results are ordered by (squared distance, row id), so equidistant points
/// resolve to the lower row id.
#[derive(Debug, Clone)]
pub struct KdTree {
    dim: usize,
    /// Points reordered into leaf order, row-major.
    coords: Vec<f64>,
    ids: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    dist2: f64,
    id: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2.total_cmp(&other.dist2).then(self.id.cmp(&other.id))
    }
}

#[inline]
fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

impl KdTree {
    /// Build over `points` (row-major rows of width `dim`) labelled by `ids`.
    pub fn build(dim: usize, points: &[f64], ids: Vec<usize>) -> Self {
        assert_eq!(points.len(), dim * ids.len());
        let mut order: Vec<usize> = (0..ids.len()).collect();
        let mut nodes = Vec::new();
        if !order.is_empty() {
            Self::build_node(dim, points, &mut order, 0, &mut nodes);
        }
        let mut coords = Vec::with_capacity(points.len());
        for &i in &order {
            coords.extend_from_slice(&points[i * dim..(i + 1) * dim]);
        }
        let ids = order.iter().map(|&i| ids[i]).collect();
        KdTree { dim, coords, ids, nodes }
    }

    fn build_node(
        dim: usize,
        points: &[f64],
        order: &mut [usize],
        offset: usize,
        nodes: &mut Vec<Node>,
    ) -> usize {
        let me = nodes.len();
        if order.len() <= LEAF_SIZE {
            nodes.push(Node::Leaf {
                start: offset,
                end: offset + order.len(),
            });
            return me;
        }
        // split on the dimension of widest spread
        let mut split_dim = 0;
        let mut widest = f64::NEG_INFINITY;
        for d in 0..dim {
            let (lo, hi) = order.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                let v = points[i * dim + d];
                (lo.min(v), hi.max(v))
            });
            if hi - lo > widest {
                widest = hi - lo;
                split_dim = d;
            }
        }
        let mid = order.len() / 2;
        order.select_nth_unstable_by(mid, |&a, &b| {
            points[a * dim + split_dim].total_cmp(&points[b * dim + split_dim])
        });
        let value = points[order[mid] * dim + split_dim];
        nodes.push(Node::Leaf { start: 0, end: 0 });
        let (lo, hi) = order.split_at_mut(mid);
        let left = Self::build_node(dim, points, lo, offset, nodes);
        let right = Self::build_node(dim, points, hi, offset + mid, nodes);
        nodes[me] = Node::Split {
            dim: split_dim,
            value,
            left,
            right,
        };
        me
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// The `k` nearest points as (distance, row id), nearest first.
    pub fn knn(&self, query: &[f64], k: usize) -> Vec<(f64, usize)> {
        assert_eq!(query.len(), self.dim);
        let k = k.min(self.len());
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        let mut offsets = vec![0.0; self.dim];
        self.search(0, query, k, &mut heap, &mut offsets, 0.0);
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| (c.dist2.sqrt(), c.id)).collect()
    }

    /// `offsets[d]` holds the per-dimension gap between the query and the
    /// current cell, `rd` their squared sum (a lower bound on any distance
    /// inside the cell).
    fn search(
        &self,
        node: usize,
        query: &[f64],
        k: usize,
        heap: &mut BinaryHeap<Candidate>,
        offsets: &mut [f64],
        rd: f64,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for slot in start..end {
                    let p = &self.coords[slot * self.dim..(slot + 1) * self.dim];
                    let cand = Candidate {
                        dist2: squared_distance(query, p),
                        id: self.ids[slot],
                    };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = query[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, query, k, heap, offsets, rd);
                let old = offsets[dim];
                let far_rd = rd - old * old + diff * diff;
                // equality must still be visited: an equidistant point with a
                // lower id can displace the current worst
                if heap.len() < k || far_rd <= heap.peek().unwrap().dist2 {
                    offsets[dim] = diff;
                    self.search(far, query, k, heap, offsets, far_rd);
                    offsets[dim] = old;
                }
            }
        }
    }
}

/// Exact nearest-neighbour index over one treatment arm.
#[derive(Debug, Clone)]
pub struct ArmIndex {
    pub arm: u8,
    tree: KdTree,
}

impl ArmIndex {
    pub fn len(&self) -> usize {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }

    /// k nearest arm members to `query` as (distance, dataset row id).
    pub fn knn(&self, query: &[f64], k: usize) -> Vec<(f64, usize)> {
        self.tree.knn(query, k)
    }
}

pub fn build_arm_index(z: ArrayView2<'_, f64>, w: &[u8], arm: u8) -> Result<ArmIndex> {
    if z.nrows() != w.len() {
        return Err(Error::InvalidArgument(format!(
            "{} rotated rows but {} treatment labels",
            z.nrows(),
            w.len()
        )));
    }
    let q = z.ncols();
    let mut ids = Vec::new();
    let mut pts = Vec::new();
    for (i, row) in z.axis_iter(Axis(0)).enumerate() {
        if w[i] == arm {
            ids.push(i);
            pts.extend(row.iter().copied());
        }
    }
    if ids.is_empty() {
        return Err(Error::EmptyArm { arm });
    }
    Ok(ArmIndex {
        arm,
        tree: KdTree::build(q, &pts, ids),
    })
}

/// The UD-selected treated/control units.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubsampleSelection {
    /// Anchor order; `treated_indices[j]` was matched to anchor j.
    pub treated_indices: Vec<usize>,
    pub control_indices: Vec<usize>,
    pub radius_treated: f64,
    pub radius_control: f64,
    pub treated_distances: Vec<f64>,
    pub control_distances: Vec<f64>,
}

impl SubsampleSelection {
    /// (treated id, control id) for anchor j.
    pub fn anchor_of(&self, j: usize) -> (usize, usize) {
        (self.treated_indices[j], self.control_indices[j])
    }

    /// All 2·r_p selected row ids, treated first.
    pub fn all_indices(&self) -> Vec<usize> {
        let mut v = self.treated_indices.clone();
        v.extend_from_slice(&self.control_indices);
        v
    }

    pub fn pairs(&self) -> usize {
        self.treated_indices.len()
    }
}

fn match_arm(index: &ArmIndex, anchors: ArrayView2<'_, f64>, n: usize) -> (Vec<usize>, Vec<f64>) {
    let mut taken = vec![false; n];
    let mut ids = Vec::with_capacity(anchors.nrows());
    let mut dists = Vec::with_capacity(anchors.nrows());
    let size = index.len();
    let mut query = vec![0.0; anchors.ncols()];
    for anchor in anchors.axis_iter(Axis(0)) {
        query.iter_mut().zip(anchor.iter()).for_each(|(q, &a)| *q = a);
        let mut k = INITIAL_K.min(size);
        loop {
            let hits = index.knn(&query, k);
            if let Some(&(d, id)) = hits.iter().find(|(_, id)| !taken[*id]) {
                taken[id] = true;
                ids.push(id);
                dists.push(d);
                break;
            }
            assert!(k < size, "arm exhausted despite size check");
            k = (2 * k).min(size);
        }
    }
    (ids, dists)
}

/// For each anchor in order, take the nearest not-yet-selected treated unit
/// and the nearest not-yet-selected control unit.
pub fn select_pairs(
    z: ArrayView2<'_, f64>,
    w: &[u8],
    anchors: ArrayView2<'_, f64>,
) -> Result<SubsampleSelection> {
    if anchors.ncols() != z.ncols() {
        return Err(Error::DimensionMismatch {
            expected: z.ncols(),
            got: anchors.ncols(),
        });
    }
    let r_p = anchors.nrows();
    let mut per_arm = Vec::with_capacity(2);
    for arm in [1u8, 0u8] {
        let index = build_arm_index(z, w, arm)?;
        if index.len() < r_p {
            return Err(Error::ArmTooSmall {
                arm,
                size: index.len(),
                needed: r_p,
            });
        }
        per_arm.push(match_arm(&index, anchors, w.len()));
    }
    let (control_indices, control_distances) = per_arm.pop().unwrap();
    let (treated_indices, treated_distances) = per_arm.pop().unwrap();
    let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
    Ok(SubsampleSelection {
        radius_treated: max(&treated_distances),
        radius_control: max(&control_distances),
        treated_indices,
        control_indices,
        treated_distances,
        control_distances,
    })
}

/// Treated-vs-control standardized mean difference of every covariate over
/// the given row sets; pooled sd = sqrt((s1² + s0²)/2), 0 when that is 0.
pub fn smd_for_rows(x: ArrayView2<'_, f64>, treated: &[usize], control: &[usize]) -> Vec<f64> {
    x.axis_iter(Axis(1))
        .map(|col: ArrayView1<'_, f64>| {
            let t: Vec<f64> = treated.iter().map(|&i| col[i]).collect();
            let c: Vec<f64> = control.iter().map(|&i| col[i]).collect();
            let pooled = ((stats::sample_variance(&t) + stats::sample_variance(&c)) / 2.0).sqrt();
            if pooled == 0.0 {
                0.0
            } else {
                (stats::mean(&t) - stats::mean(&c)) / pooled
            }
        })
        .collect()
}

pub fn standardized_mean_differences(dataset: &Dataset, selection: &SubsampleSelection) -> Vec<f64> {
    smd_for_rows(
        dataset.covariates(),
        &selection.treated_indices,
        &selection.control_indices,
    )
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, b| a.max(b.abs()))
}
