//! Hand-crafted microstructure features and the train-only z-score normalizer.

use std::io::{BufRead, Write};
use std::ops::Range;

use crate::error::{Error, Result};
use crate::ingest::{level_column_names, BookFrame};

/// Mid-price of the best level.
pub fn mid_price(f: &BookFrame) -> f64 {
    level_mid(f, 0)
}

fn level_mid(f: &BookFrame, level: usize) -> f64 {
    (f.ask_price[level] + f.bid_price[level]) / 2.0
}

/// Quantity imbalance over the first `levels` levels, in `[-1, 1]`.
///
/// Returns 0 when both sides hold zero quantity.
pub fn imbalance(f: &BookFrame, levels: usize) -> f64 {
    assert!(
        (1..=f.depth()).contains(&levels),
        "imbalance over {levels} levels on a depth-{} frame",
        f.depth()
    );
    let bid: f64 = f.bid_qty[..levels].iter().sum();
    let ask: f64 = f.ask_qty[..levels].iter().sum();
    let total = bid + ask;
    if total > 0.0 {
        (bid - ask) / total
    } else {
        0.0
    }
}

/// Weighted change of the level-1..3 mid-prices between consecutive frames.
pub fn weighted_mid_change(prev: &BookFrame, cur: &BookFrame, w: &[f64; 3]) -> f64 {
    (0..3)
        .map(|i| w[i] * (level_mid(cur, i) - level_mid(prev, i)))
        .sum()
}

/// Prefix sums of bid and ask quantity.
pub fn cumulative_depth(f: &BookFrame) -> (Vec<f64>, Vec<f64>) {
    let prefix = |q: &[f64]| {
        q.iter()
            .scan(0.0, |acc, &x| {
                *acc += x;
                Some(*acc)
            })
            .collect()
    };
    (prefix(&f.bid_qty), prefix(&f.ask_qty))
}

/// Engineered feature families, in canonical column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Engineered {
    Mid,
    Imb1,
    Imb5,
    WmidChange,
    CumDepth,
}

impl Engineered {
    pub const ALL: [Engineered; 5] = [
        Engineered::Mid,
        Engineered::Imb1,
        Engineered::Imb5,
        Engineered::WmidChange,
        Engineered::CumDepth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Engineered::Mid => "mid",
            Engineered::Imb1 => "imb1",
            Engineered::Imb5 => "imb5",
            Engineered::WmidChange => "wmid_change",
            Engineered::CumDepth => "cum_depth",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::config(format!("unknown engineered feature `{s}`")))
    }

    fn min_depth(self) -> usize {
        match self {
            Engineered::Imb5 => 5,
            Engineered::WmidChange => 3,
            _ => 1,
        }
    }
}

/// Inverse-level weights `w_i ∝ 1/i`, i.e. (6/11, 3/11, 2/11).
pub fn inverse_level_weights() -> [f64; 3] {
    [6.0 / 11.0, 3.0 / 11.0, 2.0 / 11.0]
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSpec {
    pub depth: usize,
    pub include_raw_levels: bool,
    pub engineered: Vec<Engineered>,
    pub weights: [f64; 3],
}

impl FeatureSpec {
    /// Raw levels plus every engineered feature the depth supports.
    pub fn full(depth: usize) -> Self {
        FeatureSpec {
            depth,
            include_raw_levels: true,
            engineered: Engineered::ALL
                .into_iter()
                .filter(|e| e.min_depth() <= depth)
                .collect(),
            weights: inverse_level_weights(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("feature depth must be at least 1"));
        }
        if self.weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::config("feature weights must be positive"));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!("feature weights sum to {sum}, not 1")));
        }
        for e in &self.engineered {
            if e.min_depth() > self.depth {
                return Err(Error::config(format!(
                    "feature `{}` needs depth >= {}, have {}",
                    e.name(),
                    e.min_depth(),
                    self.depth
                )));
            }
        }
        if !self.include_raw_levels && self.engineered.is_empty() {
            return Err(Error::config("feature spec selects no columns"));
        }
        Ok(())
    }

    fn engineered_sorted(&self) -> Vec<Engineered> {
        let mut e = self.engineered.clone();
        e.sort();
        e.dedup();
        e
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.include_raw_levels {
            names.extend(level_column_names(self.depth));
        }
        for e in self.engineered_sorted() {
            if e == Engineered::CumDepth {
                names.extend((1..=self.depth).map(|i| format!("cbq{i}")));
                names.extend((1..=self.depth).map(|i| format!("caq{i}")));
            } else {
                names.push(e.name().to_string());
            }
        }
        names
    }
}

/// Time-ordered feature columns. Stored column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    ts: Vec<i64>,
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
    normalized: bool,
}

impl FeatureMatrix {
    pub fn new(ts: Vec<i64>, names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(Error::data("column names and columns differ in count"));
        }
        if columns.iter().any(|c| c.len() != ts.len()) {
            return Err(Error::data("columns differ in length"));
        }
        if ts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::data("timestamps must be strictly increasing"));
        }
        for (name, col) in names.iter().zip(&columns) {
            if col.iter().any(|v| !v.is_finite()) {
                return Err(Error::data(format!("column `{name}` has non-finite values")));
            }
        }
        Ok(FeatureMatrix {
            ts,
            names,
            columns,
            normalized: false,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.ts.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn ts(&self) -> &[i64] {
        &self.ts
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.columns[i].as_slice())
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.columns[col][row]
    }

    /// Append row `row` to `out` in column order.
    pub fn extend_row(&self, row: usize, out: &mut Vec<f64>) {
        out.extend(self.columns.iter().map(|c| c[row]));
    }

    pub fn row(&self, row: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_cols());
        self.extend_row(row, &mut out);
        out
    }

    /// Same timestamps and names, new column data.
    pub fn with_columns(&self, columns: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = FeatureMatrix::new(self.ts.clone(), self.names.clone(), columns)?;
        m.normalized = self.normalized;
        Ok(m)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "ts")?;
        for n in &self.names {
            write!(out, ",{n}")?;
        }
        writeln!(out)?;
        for r in 0..self.n_rows() {
            write!(out, "{}", self.ts[r])?;
            for c in &self.columns {
                write!(out, ",{}", c[r])?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(source: R) -> Result<Self> {
        let mut lines = source.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::format("empty feature file"))??;
        let mut cols = header.trim().split(',');
        if cols.next() != Some("ts") {
            return Err(Error::format("feature file must start with a ts column"));
        }
        let names: Vec<String> = cols.map(str::to_string).collect();
        let mut ts = Vec::new();
        let mut columns = vec![Vec::new(); names.len()];
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::format(format!("feature file line {}: bad row", lineno + 2));
            let mut fields = line.trim().split(',');
            ts.push(fields.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?);
            let mut n = 0;
            for (col, field) in columns.iter_mut().zip(fields.by_ref()) {
                col.push(field.parse::<f64>().map_err(|_| bad())?);
                n += 1;
            }
            if n != names.len() || fields.next().is_some() {
                return Err(bad());
            }
        }
        FeatureMatrix::new(ts, names, columns)
    }
}

/// Build the feature matrix for time-ordered frames of uniform depth.
pub fn build_feature_matrix(frames: &[BookFrame], spec: &FeatureSpec) -> Result<FeatureMatrix> {
    spec.validate()?;
    if let Some(f) = frames.iter().find(|f| f.depth() < spec.depth) {
        return Err(Error::config(format!(
            "frame at ts={} has depth {}, features need {}",
            f.ts,
            f.depth(),
            spec.depth
        )));
    }
    let k = spec.depth;
    let n = frames.len();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    if spec.include_raw_levels {
        for i in 0..k {
            columns.push(frames.iter().map(|f| f.bid_price[i]).collect());
            columns.push(frames.iter().map(|f| f.bid_qty[i]).collect());
            columns.push(frames.iter().map(|f| f.ask_price[i]).collect());
            columns.push(frames.iter().map(|f| f.ask_qty[i]).collect());
        }
    }
    for e in spec.engineered_sorted() {
        match e {
            Engineered::Mid => columns.push(frames.iter().map(mid_price).collect()),
            Engineered::Imb1 => columns.push(frames.iter().map(|f| imbalance(f, 1)).collect()),
            Engineered::Imb5 => columns.push(frames.iter().map(|f| imbalance(f, 5)).collect()),
            Engineered::WmidChange => {
                let mut col = Vec::with_capacity(n);
                if n > 0 {
                    col.push(0.0);
                }
                col.extend(
                    frames
                        .windows(2)
                        .map(|w| weighted_mid_change(&w[0], &w[1], &spec.weights)),
                );
                columns.push(col);
            }
            Engineered::CumDepth => {
                let cums: Vec<_> = frames.iter().map(cumulative_depth).collect();
                for i in 0..k {
                    columns.push(cums.iter().map(|(b, _)| b[i]).collect());
                }
                for i in 0..k {
                    columns.push(cums.iter().map(|(_, a)| a[i]).collect());
                }
            }
        }
    }
    FeatureMatrix::new(
        frames.iter().map(|f| f.ts).collect(),
        spec.column_names(),
        columns,
    )
}

/// Per-column z-score statistics fitted on a row range.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Columns whose fitted std is zero; they pass through unscaled.
    pub constant: Vec<bool>,
    pub fitted_range: Range<usize>,
}

pub fn fit_normalizer(matrix: &FeatureMatrix, train_range: Range<usize>) -> Result<Normalizer> {
    if train_range.is_empty() || train_range.end > matrix.n_rows() {
        return Err(Error::data(format!(
            "normalizer range {train_range:?} invalid for {} rows",
            matrix.n_rows()
        )));
    }
    let n = train_range.len() as f64;
    let mut mean = Vec::with_capacity(matrix.n_cols());
    let mut std = Vec::with_capacity(matrix.n_cols());
    let mut constant = Vec::with_capacity(matrix.n_cols());
    for col in matrix.columns() {
        let slice = &col[train_range.clone()];
        let mu = slice.iter().sum::<f64>() / n;
        let var = slice.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        let sd = var.sqrt();
        mean.push(mu);
        std.push(sd);
        constant.push(sd <= 1e-12 * (1.0 + mu.abs()));
    }
    Ok(Normalizer {
        names: matrix.names().to_vec(),
        mean,
        std,
        constant,
        fitted_range: train_range,
    })
}

/// Standardize every row with train-fitted statistics. Single use: a
/// matrix that is already normalized is rejected.
pub fn apply_normalizer(matrix: &FeatureMatrix, norm: &Normalizer) -> Result<FeatureMatrix> {
    if matrix.is_normalized() {
        return Err(Error::data("matrix is already normalized"));
    }
    if matrix.names() != norm.names.as_slice() {
        return Err(Error::data("normalizer columns do not match the matrix"));
    }
    let columns = matrix
        .columns()
        .iter()
        .enumerate()
        .map(|(i, col)| {
            if norm.constant[i] {
                col.clone()
            } else {
                col.iter().map(|v| (v - norm.mean[i]) / norm.std[i]).collect()
            }
        })
        .collect();
    let mut out = matrix.with_columns(columns)?;
    out.normalized = true;
    Ok(out)
}
