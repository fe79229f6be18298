//! Horizon returns, binary/ternary labels, ε tuning and class weights.

use crate::error::{Error, Result};

/// Snapshot grid spacing in milliseconds.
pub const GRID_MS: i64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Horizon {
    steps: usize,
}

impl Horizon {
    pub fn new(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("horizon must be at least one step"));
        }
        Ok(Horizon { steps })
    }

    pub fn from_ms(ms: i64) -> Result<Self> {
        if ms <= 0 || ms % GRID_MS != 0 {
            return Err(Error::config(format!(
                "horizon {ms} ms is not a positive multiple of {GRID_MS} ms"
            )));
        }
        Horizon::new((ms / GRID_MS) as usize)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn ms(&self) -> i64 {
        self.steps as i64 * GRID_MS
    }
}

/// True when rows `from..=to` sit on consecutive grid ticks.
pub fn contiguous(ts: &[i64], from: usize, to: usize) -> bool {
    to < ts.len() && from <= to && ts[to] - ts[from] == (to - from) as i64 * GRID_MS
}

/// Relative mid change from row `t` to `t + H`, or `None` when the horizon
/// runs past the data or crosses a grid gap.
pub fn horizon_return(mids: &[f64], ts: &[i64], t: usize, h: Horizon) -> Option<f64> {
    let end = t.checked_add(h.steps)?;
    if end >= mids.len() || !contiguous(ts, t, end) {
        return None;
    }
    Some((mids[end] - mids[t]) / mids[t])
}

/// Horizon returns for every row.
pub fn horizon_returns(mids: &[f64], ts: &[i64], h: Horizon) -> Vec<Option<f64>> {
    (0..mids.len())
        .map(|t| horizon_return(mids, ts, t, h))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TieRule {
    Up,
    Down,
    Drop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LabelSource {
    Raw,
    Filtered,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LabelKind {
    Binary { tie_rule: TieRule },
    Ternary { epsilon: f64 },
}

impl LabelKind {
    pub fn n_classes(&self) -> usize {
        match self {
            LabelKind::Binary { .. } => 2,
            LabelKind::Ternary { .. } => 3,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LabelKind::Binary { .. } => "binary",
            LabelKind::Ternary { .. } => "ternary",
        }
    }

    pub fn label(&self, r: f64) -> Option<u8> {
        match *self {
            LabelKind::Binary { tie_rule } => label_binary(r, tie_rule),
            LabelKind::Ternary { epsilon } => Some(label_ternary(r, epsilon)),
        }
    }
}

/// 1 = up, 0 = down; zero returns follow the tie rule.
pub fn label_binary(r: f64, tie_rule: TieRule) -> Option<u8> {
    if r > 0.0 {
        Some(1)
    } else if r < 0.0 {
        Some(0)
    } else {
        match tie_rule {
            TieRule::Up => Some(1),
            TieRule::Down => Some(0),
            TieRule::Drop => None,
        }
    }
}

/// 2 = up, 1 = flat (`|r| <= ε`, inclusive), 0 = down.
pub fn label_ternary(r: f64, epsilon: f64) -> u8 {
    if r > epsilon {
        2
    } else if r < -epsilon {
        0
    } else {
        1
    }
}

/// Linear-interpolated empirical quantile (`(n-1)·q` positioning).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_sorted(&sorted, q)
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Flat-band half-width giving roughly `target_flat_share` flat labels: the
/// `target_flat_share` quantile of `|returns|`.
pub fn tune_epsilon(returns: &[f64], target_flat_share: f64) -> Result<f64> {
    if !(target_flat_share > 0.0 && target_flat_share < 1.0) {
        return Err(Error::config(format!(
            "flat share must be in (0, 1), got {target_flat_share}"
        )));
    }
    if returns.len() < 3 || returns.iter().any(|r| !r.is_finite()) {
        return Err(Error::data("epsilon tuning needs at least 3 finite returns"));
    }
    if returns.iter().all(|&r| r == returns[0]) {
        log::warn!("all returns identical; using epsilon = 0");
        return Ok(0.0);
    }
    let abs: Vec<f64> = returns.iter().map(|r| r.abs()).collect();
    Ok(quantile(&abs, target_flat_share))
}

/// Per-row labels for one scheme and horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSet {
    pub labels: Vec<Option<u8>>,
    pub returns: Vec<Option<f64>>,
    pub kind: LabelKind,
    pub source: LabelSource,
    pub horizon: Horizon,
}

impl LabelSet {
    pub fn from_returns(
        returns: Vec<Option<f64>>,
        kind: LabelKind,
        source: LabelSource,
        horizon: Horizon,
    ) -> Self {
        let labels = returns
            .iter()
            .map(|r| r.and_then(|r| kind.label(r)))
            .collect();
        LabelSet {
            labels,
            returns,
            kind,
            source,
            horizon,
        }
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        self.labels.iter().map(Option::is_some).collect()
    }

    pub fn n_valid(&self) -> usize {
        self.labels.iter().flatten().count()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        class_counts(self.labels.iter().flatten().copied(), self.kind.n_classes())
    }
}

pub fn class_counts(labels: impl IntoIterator<Item = u8>, k: usize) -> Vec<usize> {
    let mut counts = vec![0; k];
    for l in labels {
        counts[l as usize] += 1;
    }
    counts
}

/// Inverse-frequency loss weights, `N / (K · N_c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights(pub Vec<f64>);

impl ClassWeights {
    pub fn uniform(k: usize) -> Self {
        ClassWeights(vec![1.0; k])
    }

    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::config(format!(
                "class {c} has no training samples; cannot weight it"
            )));
        }
        let n: usize = counts.iter().sum();
        let k = counts.len() as f64;
        Ok(ClassWeights(
            counts.iter().map(|&c| n as f64 / (k * c as f64)).collect(),
        ))
    }

    pub fn get(&self, class: u8) -> f64 {
        self.0[class as usize]
    }

    pub fn n_classes(&self) -> usize {
        self.0.len()
    }
}

pub fn class_weights(labels: &LabelSet) -> Result<ClassWeights> {
    ClassWeights::from_counts(&labels.class_counts())
}
