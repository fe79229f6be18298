//! Second-order gradient boosting with quantile-histogram regression trees
//! and a softmax objective.

use super::{check_training_inputs, softmax_in_place, Matrix, Prediction, TrainConfig};
use crate::error::{Error, Result};
use crate::labeling::ClassWeights;

const MIN_HESSIAN: f64 = 1e-16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GbdtParams {
    pub learning_rate: f64,
    pub rounds: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub bins: usize,
    pub lambda: f64,
    pub early_stopping_rounds: usize,
}

impl From<&TrainConfig> for GbdtParams {
    fn from(c: &TrainConfig) -> Self {
        GbdtParams {
            learning_rate: c.learning_rate,
            rounds: c.rounds,
            max_depth: c.max_depth,
            min_samples_leaf: c.min_samples_leaf,
            bins: c.bins,
            lambda: c.lambda,
            early_stopping_rounds: c.early_stopping_rounds,
        }
    }
}

/// Per-feature equal-frequency bin upper edges. A value `v` falls in the
/// first bin whose edge is `>= v`; the last edge is the training maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct BinMapper {
    pub edges: Vec<Vec<f64>>,
}

impl BinMapper {
    /// When a feature has at most `max_bins` distinct values each value gets
    /// its own bin, so splits can separate any two distinct values.
    pub fn fit(x: &Matrix, max_bins: usize) -> Self {
        let n = x.rows();
        let edges = (0..x.cols())
            .map(|j| {
                let mut vals: Vec<f64> = (0..n).map(|i| x.get(i, j)).collect();
                vals.sort_by(f64::total_cmp);
                let mut distinct = vals.clone();
                distinct.dedup();
                if distinct.len() <= max_bins {
                    return distinct;
                }
                let mut e: Vec<f64> = (1..=max_bins)
                    .map(|b| vals[(b * n).div_ceil(max_bins) - 1])
                    .collect();
                e.dedup();
                e
            })
            .collect();
        BinMapper { edges }
    }

    pub fn bin(&self, feature: usize, v: f64) -> u16 {
        let e = &self.edges[feature];
        e.partition_point(|&edge| edge < v).min(e.len() - 1) as u16
    }

    pub fn transform(&self, x: &Matrix) -> BinnedMatrix {
        let d = x.cols();
        let mut bins = Vec::with_capacity(x.rows() * d);
        for row in x.iter_rows() {
            bins.extend(row.iter().enumerate().map(|(j, &v)| self.bin(j, v)));
        }
        let mut offsets = Vec::with_capacity(d + 1);
        let mut acc = 0;
        for e in &self.edges {
            offsets.push(acc);
            acc += e.len();
        }
        offsets.push(acc);
        BinnedMatrix {
            rows: x.rows(),
            cols: d,
            bins,
            offsets,
            edges: self.edges.clone(),
        }
    }
}

/// Bin indices of a training matrix, row-major.
#[derive(Debug, Clone)]
pub struct BinnedMatrix {
    rows: usize,
    cols: usize,
    bins: Vec<u16>,
    offsets: Vec<usize>,
    edges: Vec<Vec<f64>>,
}

impl BinnedMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    fn row(&self, i: usize) -> &[u16] {
        &self.bins[i * self.cols..(i + 1) * self.cols]
    }

    fn total_bins(&self) -> usize {
        self.offsets[self.cols]
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct BinStat {
    g: f64,
    h: f64,
    n: u32,
}

type Histogram = Vec<BinStat>;

fn build_histogram(data: &BinnedMatrix, rows: &[u32], grad: &[f64], hess: &[f64]) -> Histogram {
    let mut hist = vec![BinStat::default(); data.total_bins()];
    for &r in rows {
        let r = r as usize;
        let (g, h) = (grad[r], hess[r]);
        for (j, &b) in data.row(r).iter().enumerate() {
            let s = &mut hist[data.offsets[j] + b as usize];
            s.g += g;
            s.h += h;
            s.n += 1;
        }
    }
    hist
}

fn subtract(parent: &Histogram, child: &Histogram) -> Histogram {
    parent
        .iter()
        .zip(child)
        .map(|(p, c)| BinStat {
            g: p.g - c.g,
            h: p.h - c.h,
            n: p.n - c.n,
        })
        .collect()
}

/// Best axis-aligned split of a node: rows with `bin <= bin` (equivalently
/// `x <= threshold`) go left.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCandidate {
    pub feature: usize,
    pub bin: u16,
    pub threshold: f64,
    pub gain: f64,
}

fn score(g: f64, h: f64, lambda: f64) -> f64 {
    g * g / (h + lambda)
}

fn best_split_from_hist(
    data: &BinnedMatrix,
    hist: &Histogram,
    g_total: f64,
    h_total: f64,
    n_total: u32,
    lambda: f64,
    min_leaf: usize,
) -> Option<SplitCandidate> {
    let parent = score(g_total, h_total, lambda);
    let mut best: Option<SplitCandidate> = None;
    for j in 0..data.cols {
        let feature_hist = &hist[data.offsets[j]..data.offsets[j + 1]];
        let (mut gl, mut hl, mut nl) = (0.0, 0.0, 0u32);
        // the last bin cannot be a split point: nothing would go right
        for (b, s) in feature_hist[..feature_hist.len().saturating_sub(1)].iter().enumerate() {
            gl += s.g;
            hl += s.h;
            nl += s.n;
            let nr = n_total - nl;
            if (nl as usize) < min_leaf || (nr as usize) < min_leaf {
                continue;
            }
            let gain = score(gl, hl, lambda) + score(g_total - gl, h_total - hl, lambda) - parent;
            if gain > 0.0 && best.is_none_or(|c| gain > c.gain) {
                best = Some(SplitCandidate {
                    feature: j,
                    bin: b as u16,
                    threshold: data.edges[j][b],
                    gain,
                });
            }
        }
    }
    best
}

/// Best split for the rows of one node, from gradient/hessian histograms.
pub fn best_split(
    data: &BinnedMatrix,
    rows: &[u32],
    grad: &[f64],
    hess: &[f64],
    lambda: f64,
    min_samples_leaf: usize,
) -> Option<SplitCandidate> {
    let hist = build_histogram(data, rows, grad, hess);
    let (g, h) = rows.iter().fold((0.0, 0.0), |(g, h), &r| {
        (g + grad[r as usize], h + hess[r as usize])
    });
    best_split_from_hist(data, &hist, g, h, rows.len() as u32, lambda, min_samples_leaf)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Node {
    Split {
        feature: u32,
        bin: u16,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        value: f64,
    },
}

/// Regression tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    i = if x[feature as usize] <= threshold {
                        left
                    } else {
                        right
                    } as usize;
                }
            }
        }
    }

    fn predict_binned(&self, bins: &[u16]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    bin,
                    left,
                    right,
                    ..
                } => {
                    i = if bins[feature as usize] <= bin { left } else { right } as usize;
                }
            }
        }
    }

    pub fn max_feature(&self) -> Option<u32> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { feature, .. } => Some(*feature),
                Node::Leaf { .. } => None,
            })
            .max()
    }
}

struct TreeBuilder<'a> {
    data: &'a BinnedMatrix,
    grad: &'a [f64],
    hess: &'a [f64],
    lambda: f64,
    max_depth: usize,
    min_leaf: usize,
    nodes: Vec<Node>,
}

impl TreeBuilder<'_> {
    fn grow(&mut self, rows: Vec<u32>, hist: Histogram, depth: usize) -> u32 {
        let id = self.nodes.len() as u32;
        let (g, h) = rows.iter().fold((0.0, 0.0), |(g, h), &r| {
            (g + self.grad[r as usize], h + self.hess[r as usize])
        });
        self.nodes.push(Node::Leaf {
            value: -g / (h + self.lambda),
        });
        if depth >= self.max_depth || rows.len() < 2 * self.min_leaf {
            return id;
        }
        let Some(split) = best_split_from_hist(
            self.data,
            &hist,
            g,
            h,
            rows.len() as u32,
            self.lambda,
            self.min_leaf,
        ) else {
            return id;
        };
        let (left_rows, right_rows): (Vec<u32>, Vec<u32>) = rows
            .iter()
            .partition(|&&r| self.data.row(r as usize)[split.feature] <= split.bin);
        drop(rows);
        // build the smaller child's histogram, derive the other by subtraction
        let (left_hist, right_hist) = if left_rows.len() <= right_rows.len() {
            let lh = build_histogram(self.data, &left_rows, self.grad, self.hess);
            let rh = subtract(&hist, &lh);
            (lh, rh)
        } else {
            let rh = build_histogram(self.data, &right_rows, self.grad, self.hess);
            let lh = subtract(&hist, &rh);
            (lh, rh)
        };
        drop(hist);
        let left = self.grow(left_rows, left_hist, depth + 1);
        let right = self.grow(right_rows, right_hist, depth + 1);
        self.nodes[id as usize] = Node::Split {
            feature: split.feature as u32,
            bin: split.bin,
            threshold: split.threshold,
            left,
            right,
        };
        id
    }
}

/// Fit one depth-limited regression tree to gradients/hessians over `rows`.
/// Leaf values are `-G / (H + lambda)`.
pub fn build_tree(
    data: &BinnedMatrix,
    rows: &[u32],
    grad: &[f64],
    hess: &[f64],
    lambda: f64,
    max_depth: usize,
    min_samples_leaf: usize,
) -> Tree {
    let mut builder = TreeBuilder {
        data,
        grad,
        hess,
        lambda,
        max_depth,
        min_leaf: min_samples_leaf,
        nodes: Vec::new(),
    };
    let hist = build_histogram(data, rows, grad, hess);
    builder.grow(rows.to_vec(), hist, 0);
    Tree {
        nodes: builder.nodes,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GbdtModel {
    pub k: usize,
    pub d: usize,
    pub params: GbdtParams,
    /// Log weighted class priors.
    pub base_score: Vec<f64>,
    /// `rounds[r][c]` is the tree for class `c` in round `r`.
    pub rounds: Vec<Vec<Tree>>,
    /// Number of leading rounds used for prediction.
    pub best_round: usize,
    /// Validation weighted log-loss after 0, 1, ... rounds.
    pub val_loss: Vec<f64>,
}

impl GbdtModel {
    fn add_round_scores(&self, round: &[Tree], x: &[f64], scores: &mut [f64]) {
        for (s, tree) in scores.iter_mut().zip(round) {
            *s += self.params.learning_rate * tree.predict(x);
        }
    }

    /// Raw scores using the first `n_rounds` rounds.
    pub fn scores_at(&self, x: &[f64], n_rounds: usize) -> Vec<f64> {
        let mut s = self.base_score.clone();
        for round in &self.rounds[..n_rounds] {
            self.add_round_scores(round, x, &mut s);
        }
        s
    }

    /// Softmax of the summed scores up to `n_rounds`.
    pub fn predict_proba_at(&self, x: &Matrix, n_rounds: usize) -> Result<Prediction> {
        if x.cols() != self.d {
            return Err(Error::data(format!(
                "model expects {} features, got {}",
                self.d,
                x.cols()
            )));
        }
        let n_rounds = n_rounds.min(self.rounds.len());
        let mut probs = Vec::with_capacity(x.rows() * self.k);
        for row in x.iter_rows() {
            let mut s = self.scores_at(row, n_rounds);
            softmax_in_place(&mut s);
            probs.extend(s);
        }
        Ok(Prediction { k: self.k, probs })
    }

    pub fn predict_proba(&self, x: &Matrix) -> Result<Prediction> {
        self.predict_proba_at(x, self.best_round)
    }

    /// Copy truncated to the first `max_rounds` rounds, with `best_round`
    /// re-chosen over that prefix.
    pub fn truncated(&self, max_rounds: usize) -> GbdtModel {
        let built = max_rounds.min(self.rounds.len());
        let mut m = self.clone();
        m.rounds.truncate(built);
        m.val_loss.truncate(built + 1);
        m.params.rounds = max_rounds;
        m.best_round = argmin(&m.val_loss);
        m
    }
}

fn argmin(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v < xs[best] {
            best = i;
        }
    }
    best
}

fn weighted_log_loss(scores: &[f64], k: usize, y: &[u8], cw: &ClassWeights) -> f64 {
    let mut p = vec![0.0; k];
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &yi) in y.iter().enumerate() {
        p.copy_from_slice(&scores[i * k..(i + 1) * k]);
        softmax_in_place(&mut p);
        let w = cw.get(yi);
        num -= w * p[yi as usize].max(1e-300).ln();
        den += w;
    }
    num / den
}

/// Boost `cfg.rounds` rounds at most, stopping once validation loss has not
/// improved for `cfg.early_stopping_rounds` rounds.
pub fn train_gbdt(
    x: &Matrix,
    y: &[u8],
    class_weights: &ClassWeights,
    cfg: &TrainConfig,
    val: (&Matrix, &[u8]),
) -> Result<GbdtModel> {
    cfg.validate()?;
    check_training_inputs(x, y, class_weights)?;
    let (xv, yv) = val;
    if xv.rows() == 0 {
        return Err(Error::data("empty validation set"));
    }
    check_training_inputs(xv, yv, class_weights)?;
    if xv.cols() != x.cols() {
        return Err(Error::data("validation width differs from training width"));
    }
    if y.iter().all(|&c| c == y[0]) {
        return Err(Error::data("training labels contain a single class"));
    }
    let k = class_weights.n_classes();
    let n = x.rows();
    let params = GbdtParams::from(cfg);

    let sample_w: Vec<f64> = y.iter().map(|&c| class_weights.get(c)).collect();
    let total_w: f64 = sample_w.iter().sum();
    let mut prior = vec![0.0; k];
    for (&c, &w) in y.iter().zip(&sample_w) {
        prior[c as usize] += w / total_w;
    }
    let base_score: Vec<f64> = prior.iter().map(|p| p.max(1e-12).ln()).collect();

    let binned = BinMapper::fit(x, params.bins).transform(x);
    let all_rows: Vec<u32> = (0..n as u32).collect();

    let mut model = GbdtModel {
        k,
        d: x.cols(),
        params,
        base_score: base_score.clone(),
        rounds: Vec::new(),
        best_round: 0,
        val_loss: Vec::new(),
    };

    let mut train_scores: Vec<f64> = base_score.iter().copied().cycle().take(n * k).collect();
    let mut val_scores: Vec<f64> = base_score
        .iter()
        .copied()
        .cycle()
        .take(xv.rows() * k)
        .collect();
    model
        .val_loss
        .push(weighted_log_loss(&val_scores, k, yv, class_weights));

    let mut grad = vec![vec![0.0; n]; k];
    let mut hess = vec![vec![0.0; n]; k];
    let mut p = vec![0.0; k];
    for round in 0..params.rounds {
        for i in 0..n {
            p.copy_from_slice(&train_scores[i * k..(i + 1) * k]);
            softmax_in_place(&mut p);
            let w = sample_w[i];
            for c in 0..k {
                let target = if y[i] as usize == c { 1.0 } else { 0.0 };
                grad[c][i] = w * (p[c] - target);
                hess[c][i] = w * (p[c] * (1.0 - p[c])).max(MIN_HESSIAN);
            }
        }
        let trees: Vec<Tree> = (0..k)
            .map(|c| {
                build_tree(
                    &binned,
                    &all_rows,
                    &grad[c],
                    &hess[c],
                    params.lambda,
                    params.max_depth,
                    params.min_samples_leaf,
                )
            })
            .collect();
        for i in 0..n {
            for (c, tree) in trees.iter().enumerate() {
                train_scores[i * k + c] += params.learning_rate * tree.predict_binned(binned.row(i));
            }
        }
        for (i, row) in xv.iter_rows().enumerate() {
            model.add_round_scores(&trees, row, &mut val_scores[i * k..(i + 1) * k]);
        }
        let loss = weighted_log_loss(&val_scores, k, yv, class_weights);
        if !loss.is_finite() {
            return Err(Error::Divergence(format!(
                "validation loss became non-finite at round {round}"
            )));
        }
        model.rounds.push(trees);
        model.val_loss.push(loss);
        if loss < model.val_loss[model.best_round] {
            model.best_round = round + 1;
        }
        if round + 1 - model.best_round >= params.early_stopping_rounds {
            break;
        }
    }
    Ok(model)
}
