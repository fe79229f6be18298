//! From-scratch classifiers behind one prediction interface.

mod gbdt;
mod grid;
mod logistic;
mod serialize;

pub use gbdt::{
    best_split, build_tree, train_gbdt, BinMapper, BinnedMatrix, GbdtModel, GbdtParams, Node,
    SplitCandidate, Tree,
};
pub use grid::{grid_search, GridCell, GridReport, GridRow, ModelKind};
pub use logistic::{logistic_loss_and_grad, train_logistic, train_logistic_checkpoints, LogisticModel};
pub use serialize::{load_model, save_model};

use crate::error::{Error, Result};
use crate::labeling::ClassWeights;

/// Dense row-major design matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::data(format!(
                "matrix data has {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::data("ragged rows"));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    /// Apply `f` to every value of column `j`.
    pub fn map_column(&mut self, j: usize, f: impl Fn(f64) -> f64) {
        for i in 0..self.rows {
            let v = &mut self.data[i * self.cols + j];
            *v = f(*v);
        }
    }
}

/// Per-sample class probabilities, row-major `n × k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub k: usize,
    pub probs: Vec<f64>,
}

impl Prediction {
    pub fn n(&self) -> usize {
        self.probs.len() / self.k
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.k..(i + 1) * self.k]
    }

    /// Most probable class per sample; ties go to the lower class.
    pub fn argmax(&self) -> Vec<u8> {
        (0..self.n())
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for c in 1..self.k {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect()
    }

    /// Class-weighted mean negative log-likelihood.
    pub fn weighted_log_loss(&self, y: &[u8], weights: &ClassWeights) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &yi) in y.iter().enumerate() {
            let w = weights.get(yi);
            num -= w * self.row(i)[yi as usize].max(1e-300).ln();
            den += w;
        }
        num / den
    }
}

/// Numerically stable in-place softmax.
pub(crate) fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    /// Gradient-descent epochs (logistic).
    pub epochs: usize,
    /// Maximum boosting rounds (GBDT).
    pub rounds: usize,
    pub learning_rate: f64,
    /// L2 penalty on non-bias weights (logistic).
    pub l2: f64,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub bins: usize,
    /// Leaf-value regularizer (GBDT).
    pub lambda: f64,
    pub early_stopping_rounds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 42,
            epochs: 300,
            rounds: 300,
            learning_rate: 0.1,
            l2: 1e-4,
            max_depth: 4,
            min_samples_leaf: 20,
            bins: 64,
            lambda: 1.0,
            early_stopping_rounds: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be non-negative"));
        }
        if self.l2 < 0.0 || self.lambda < 0.0 {
            return Err(Error::config("regularization must be non-negative"));
        }
        if self.max_depth == 0 || self.min_samples_leaf == 0 || self.bins < 2 {
            return Err(Error::config(
                "max_depth and min_samples_leaf must be positive, bins >= 2",
            ));
        }
        if self.early_stopping_rounds == 0 {
            return Err(Error::config("early_stopping_rounds must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Logistic(LogisticModel),
    Gbdt(GbdtModel),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Logistic(_) => ModelKind::Logistic,
            Model::Gbdt(_) => ModelKind::Gbdt,
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            Model::Logistic(m) => m.k,
            Model::Gbdt(m) => m.k,
        }
    }

    pub fn n_features(&self) -> usize {
        match self {
            Model::Logistic(m) => m.d,
            Model::Gbdt(m) => m.d,
        }
    }

    pub fn predict_proba(&self, x: &Matrix) -> Result<Prediction> {
        match self {
            Model::Logistic(m) => m.predict_proba(x),
            Model::Gbdt(m) => m.predict_proba(x),
        }
    }
}

pub(crate) fn check_training_inputs(x: &Matrix, y: &[u8], weights: &ClassWeights) -> Result<()> {
    if x.rows() == 0 {
        return Err(Error::data("empty training set"));
    }
    if x.rows() != y.len() {
        return Err(Error::data(format!(
            "{} feature rows but {} labels",
            x.rows(),
            y.len()
        )));
    }
    if let Some(&bad) = y.iter().find(|&&c| c as usize >= weights.n_classes()) {
        return Err(Error::data(format!(
            "label {bad} out of range for {} classes",
            weights.n_classes()
        )));
    }
    if x.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::data("non-finite feature value"));
    }
    Ok(())
}
