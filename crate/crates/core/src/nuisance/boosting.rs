//! Gradient-boosted regression trees with exact (sort-based) split search
//! and leaf-wise growth.
//!
//! Squared error for continuous outcomes, log-loss for binary targets; both
//! use Newton leaf values -G/H. Ties in split gain go to the lowest feature
//! index, then the lowest threshold.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

/// Tree-ensemble hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoostingParams {
    pub rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub max_leaves: usize,
    /// Minimum rows in each child of a split.
    pub min_data_in_leaf: usize,
    /// Minimum summed hessian in each child of a split.
    pub min_sum_hessian: f64,
}

impl Default for BoostingParams {
    fn default() -> Self {
        BoostingParams {
            rounds: 100,
            max_depth: 5,
            learning_rate: 0.1,
            max_leaves: 31,
            min_data_in_leaf: 20,
            min_sum_hessian: 1e-3,
        }
    }
}

impl BoostingParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.rounds == 0 || self.max_depth == 0 || self.max_leaves < 2 {
            return Err("boosting rounds, depth must be positive and leaves at least 2".into());
        }
        if !(self.learning_rate > 0.0) {
            return Err("learning rate must be positive".into());
        }
        if self.min_data_in_leaf == 0 || self.min_sum_hessian < 0.0 {
            return Err("leaf minimums must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    SquaredError,
    LogLoss,
}

#[derive(Debug, Clone, PartialEq)]
enum TreeNode {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct Tree {
    nodes: Vec<TreeNode>,
}

impl Tree {
    fn predict_row(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf(v) => return v,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if row[feature] <= threshold { left } else { right },
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoostedTrees {
    objective: Objective,
    base_score: f64,
    learning_rate: f64,
    trees: Vec<Tree>,
    /// Mean training loss after each round (index 0 = base score only).
    pub train_loss: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct SplitCandidate {
    gain: f64,
    feature: usize,
    threshold: f64,
    left_count: usize,
}

#[derive(Debug, Clone)]
struct Leaf {
    start: usize,
    end: usize,
    depth: usize,
    node: usize,
    sum_g: f64,
    sum_h: f64,
    best: Option<SplitCandidate>,
}

struct TreeBuilder<'a> {
    columns: &'a [Vec<f64>],
    grad: &'a [f64],
    hess: &'a [f64],
    params: &'a BoostingParams,
    /// Per feature: row ids, each leaf owning a contiguous segment sorted by
    /// that feature.
    orders: Vec<Vec<u32>>,
    go_left: Vec<bool>,
    scratch: Vec<u32>,
}

impl TreeBuilder<'_> {
    fn score(g: f64, h: f64) -> f64 {
        g * g / h
    }

    fn find_best(&self, leaf: &Leaf) -> Option<SplitCandidate> {
        let len = leaf.end - leaf.start;
        let min_leaf = self.params.min_data_in_leaf;
        if leaf.depth >= self.params.max_depth || len < 2 * min_leaf {
            return None;
        }
        let parent = Self::score(leaf.sum_g, leaf.sum_h);
        let mut best: Option<SplitCandidate> = None;
        let mut best_gain = 0.0;
        for (f, col) in self.columns.iter().enumerate() {
            let seg = &self.orders[f][leaf.start..leaf.end];
            let (mut gl, mut hl) = (0.0, 0.0);
            for i in 0..len - 1 {
                let r = seg[i] as usize;
                gl += self.grad[r];
                hl += self.hess[r];
                let count = i + 1;
                if count < min_leaf {
                    continue;
                }
                if len - count < min_leaf {
                    break;
                }
                let a = col[r];
                let b = col[seg[i + 1] as usize];
                if !(a < b) {
                    continue;
                }
                let hr = leaf.sum_h - hl;
                if hl < self.params.min_sum_hessian || hr < self.params.min_sum_hessian {
                    continue;
                }
                let gr = leaf.sum_g - gl;
                let gain = Self::score(gl, hl) + Self::score(gr, hr) - parent;
                if gain > best_gain {
                    let mid = a + (b - a) / 2.0;
                    best_gain = gain;
                    best = Some(SplitCandidate {
                        gain,
                        feature: f,
                        threshold: if mid < b { mid } else { a },
                        left_count: count,
                    });
                }
            }
        }
        best
    }

    fn sums(&self, start: usize, end: usize) -> (f64, f64) {
        self.orders[0][start..end].iter().fold((0.0, 0.0), |(g, h), &r| {
            (g + self.grad[r as usize], h + self.hess[r as usize])
        })
    }

    fn split(&mut self, leaf: &Leaf, cand: &SplitCandidate) -> (Leaf, Leaf) {
        let (start, end) = (leaf.start, leaf.end);
        let mid = start + cand.left_count;
        for (i, &r) in self.orders[cand.feature][start..end].iter().enumerate() {
            self.go_left[r as usize] = i < cand.left_count;
        }
        for f in 0..self.orders.len() {
            if f == cand.feature {
                continue;
            }
            let seg = &mut self.orders[f][start..end];
            self.scratch.clear();
            let mut write = 0;
            for k in 0..seg.len() {
                let r = seg[k];
                if self.go_left[r as usize] {
                    seg[write] = r;
                    write += 1;
                } else {
                    self.scratch.push(r);
                }
            }
            seg[write..].copy_from_slice(&self.scratch);
        }
        let (lg, lh) = self.sums(start, mid);
        let make = |start, end, g, h| Leaf {
            start,
            end,
            depth: leaf.depth + 1,
            node: 0,
            sum_g: g,
            sum_h: h,
            best: None,
        };
        (
            make(start, mid, lg, lh),
            make(mid, end, leaf.sum_g - lg, leaf.sum_h - lh),
        )
    }

    /// Grows one tree and returns it with the raw leaf value of every row.
    fn grow(&mut self, presorted: &[Vec<u32>], n: usize) -> (Tree, Vec<f64>) {
        for (dst, src) in self.orders.iter_mut().zip(presorted) {
            dst.copy_from_slice(src);
        }
        let (g, h) = self.sums(0, n);
        let mut nodes = vec![TreeNode::Leaf(0.0)];
        let mut root = Leaf {
            start: 0,
            end: n,
            depth: 0,
            node: 0,
            sum_g: g,
            sum_h: h,
            best: None,
        };
        root.best = self.find_best(&root);
        let mut leaves = vec![root];
        while leaves.len() < self.params.max_leaves {
            let mut pick: Option<usize> = None;
            for (i, l) in leaves.iter().enumerate() {
                if let Some(c) = l.best {
                    if pick.is_none_or(|p| c.gain > leaves[p].best.unwrap().gain) {
                        pick = Some(i);
                    }
                }
            }
            let Some(i) = pick else { break };
            let leaf = leaves.remove(i);
            let cand = leaf.best.unwrap();
            let (mut left, mut right) = self.split(&leaf, &cand);
            left.node = nodes.len();
            right.node = nodes.len() + 1;
            nodes.push(TreeNode::Leaf(0.0));
            nodes.push(TreeNode::Leaf(0.0));
            nodes[leaf.node] = TreeNode::Split {
                feature: cand.feature,
                threshold: cand.threshold,
                left: left.node,
                right: right.node,
            };
            left.best = self.find_best(&left);
            right.best = self.find_best(&right);
            // keep the leaf list in creation order so gain ties are stable
            leaves.insert(i, right);
            leaves.insert(i, left);
        }
        let mut row_values = vec![0.0; n];
        for l in &leaves {
            let v = -l.sum_g / l.sum_h;
            nodes[l.node] = TreeNode::Leaf(v);
            for &r in &self.orders[0][l.start..l.end] {
                row_values[r as usize] = v;
            }
        }
        (Tree { nodes }, row_values)
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

fn mean_loss(objective: Objective, target: &[f64], raw: &[f64]) -> f64 {
    let total: f64 = match objective {
        Objective::SquaredError => target
            .iter()
            .zip(raw)
            .map(|(y, f)| 0.5 * (y - f) * (y - f))
            .sum(),
        Objective::LogLoss => target
            .iter()
            .zip(raw)
            .map(|(y, &f)| {
                let sp = if f > 0.0 { f + (-f).exp().ln_1p() } else { f.exp().ln_1p() };
                sp - y * f
            })
            .sum(),
    };
    total / target.len() as f64
}

impl BoostedTrees {
    pub fn fit_regression(x: ArrayView2<'_, f64>, y: &[f64], params: &BoostingParams) -> Self {
        Self::fit(x, y, params, Objective::SquaredError)
    }

    pub fn fit_binary(x: ArrayView2<'_, f64>, w: &[u8], params: &BoostingParams) -> Self {
        let target: Vec<f64> = w.iter().map(|&v| f64::from(v)).collect();
        Self::fit(x, &target, params, Objective::LogLoss)
    }

    fn fit(x: ArrayView2<'_, f64>, target: &[f64], params: &BoostingParams, objective: Objective) -> Self {
        let (n, p) = x.dim();
        assert_eq!(n, target.len());
        assert!(n > 0, "cannot fit boosted trees on zero rows");
        let columns: Vec<Vec<f64>> = (0..p).map(|f| x.column(f).to_vec()).collect();
        let presorted: Vec<Vec<u32>> = columns
            .iter()
            .map(|col| {
                let mut idx: Vec<u32> = (0..n as u32).collect();
                idx.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
                idx
            })
            .collect();

        let mean = target.iter().sum::<f64>() / n as f64;
        let base_score = match objective {
            Objective::SquaredError => mean,
            Objective::LogLoss => {
                let pbar = mean.clamp(1e-6, 1.0 - 1e-6);
                (pbar / (1.0 - pbar)).ln()
            }
        };
        let mut raw = vec![base_score; n];
        let mut grad = vec![0.0; n];
        let mut hess = vec![0.0; n];
        let mut trees = Vec::with_capacity(params.rounds);
        let mut train_loss = vec![mean_loss(objective, target, &raw)];
        let mut orders = vec![vec![0u32; n]; p];
        let mut go_left = vec![false; n];
        let mut scratch = Vec::with_capacity(n);

        let rounds = if p == 0 { 0 } else { params.rounds };
        for _ in 0..rounds {
            for i in 0..n {
                match objective {
                    Objective::SquaredError => {
                        grad[i] = raw[i] - target[i];
                        hess[i] = 1.0;
                    }
                    Objective::LogLoss => {
                        let pr = sigmoid(raw[i]);
                        grad[i] = pr - target[i];
                        hess[i] = pr * (1.0 - pr);
                    }
                }
            }
            let mut builder = TreeBuilder {
                columns: &columns,
                grad: &grad,
                hess: &hess,
                params,
                orders: std::mem::take(&mut orders),
                go_left: std::mem::take(&mut go_left),
                scratch: std::mem::take(&mut scratch),
            };
            let (tree, values) = builder.grow(&presorted, n);
            (orders, go_left, scratch) = (builder.orders, builder.go_left, builder.scratch);
            for i in 0..n {
                raw[i] += params.learning_rate * values[i];
            }
            trees.push(tree);
            train_loss.push(mean_loss(objective, target, &raw));
        }

        BoostedTrees {
            objective,
            base_score,
            learning_rate: params.learning_rate,
            trees,
            train_loss,
        }
    }

    /// Raw additive score (log-odds for binary targets).
    pub fn predict_raw(&self, x: ArrayView2<'_, f64>) -> Vec<f64> {
        let mut buf = vec![0.0; x.ncols()];
        x.rows()
            .into_iter()
            .map(|row| {
                buf.iter_mut().zip(row.iter()).for_each(|(b, &v)| *b = v);
                self.base_score
                    + self.learning_rate
                        * self.trees.iter().map(|t| t.predict_row(&buf)).sum::<f64>()
            })
            .collect()
    }

    /// Outcome predictions, or probabilities for binary targets.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Vec<f64> {
        let raw = self.predict_raw(x);
        match self.objective {
            Objective::SquaredError => raw,
            Objective::LogLoss => raw.into_iter().map(sigmoid).collect(),
        }
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn max_leaves_used(&self) -> usize {
        self.trees
            .iter()
            .map(|t| t.nodes.iter().filter(|n| matches!(n, TreeNode::Leaf(_))).count())
            .max()
            .unwrap_or(0)
    }
}
