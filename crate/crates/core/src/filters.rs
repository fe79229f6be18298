//! Column-wise denoising: Savitzky–Golay polynomial smoothing and a scalar
//! random-walk Kalman filter.

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::linalg::poly_eval_weights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SgMode {
    /// Window `[t-m, t+m]`, estimate at the centre. Uses `m` future samples.
    Centered,
    /// Window `[t-2m, t]`, estimate at the right edge.
    Causal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgConfig {
    pub half_window: usize,
    pub degree: usize,
    pub mode: SgMode,
}

impl Default for SgConfig {
    fn default() -> Self {
        SgConfig {
            half_window: 10,
            degree: 3,
            mode: SgMode::Centered,
        }
    }
}

impl SgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.half_window == 0 {
            return Err(Error::config("sg half_window must be positive"));
        }
        if 2 * self.half_window < self.degree {
            return Err(Error::config(format!(
                "sg window {} cannot fit degree {}",
                2 * self.half_window + 1,
                self.degree
            )));
        }
        Ok(())
    }

    /// Number of samples past `t` the filter reads when estimating `t`.
    pub fn lookahead(&self) -> usize {
        match self.mode {
            SgMode::Centered => self.half_window,
            SgMode::Causal => 0,
        }
    }
}

/// Convolution weights for the full window, ordered by offset.
///
/// Centered: offsets `-m..=m` (length `2m+1`). Causal: offsets `-2m..=0`
/// (length `2m+1`; the causal fit uses the same window size, anchored at
/// its right edge).
pub fn sg_weights(cfg: &SgConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let m = cfg.half_window as i64;
    let xs: Vec<f64> = match cfg.mode {
        SgMode::Centered => (-m..=m).map(|j| j as f64).collect(),
        SgMode::Causal => (-2 * m..=0).map(|j| j as f64).collect(),
    };
    poly_eval_weights(&xs, cfg.degree, 0.0)
}

/// Least-squares fit over `series[lo..=hi]` evaluated at index `at`.
fn local_fit(series: &[f64], lo: usize, hi: usize, degree: usize, at: usize) -> Result<f64> {
    let len = hi - lo + 1;
    let degree = degree.min(len - 1);
    let xs: Vec<f64> = (lo..=hi).map(|j| j as f64 - at as f64).collect();
    let w = poly_eval_weights(&xs, degree, 0.0)?;
    Ok(w.iter().zip(&series[lo..=hi]).map(|(w, v)| w * v).sum())
}

/// Savitzky–Golay smoothing. Output has the input's length.
///
/// Interior points are the convolution with [`sg_weights`]. In centered mode
/// the `m` points at each edge are fitted on the truncated window. In causal
/// mode the first `2m` points repeat the first full-window estimate.
pub fn sg_smooth(series: &[f64], cfg: &SgConfig) -> Result<Vec<f64>> {
    let weights = sg_weights(cfg)?;
    sg_smooth_with(series, cfg, &weights)
}

fn sg_smooth_with(series: &[f64], cfg: &SgConfig, weights: &[f64]) -> Result<Vec<f64>> {
    if series.is_empty() {
        return Err(Error::data("sg_smooth on an empty series"));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("sg_smooth on a series with non-finite values"));
    }
    let n = series.len();
    let m = cfg.half_window;
    let w = 2 * m + 1;
    let mut out = vec![0.0; n];
    match cfg.mode {
        SgMode::Centered => {
            for (t, o) in out.iter_mut().enumerate() {
                *o = if t >= m && t + m < n {
                    dot(weights, &series[t - m..=t + m])
                } else {
                    local_fit(series, t.saturating_sub(m), (t + m).min(n - 1), cfg.degree, t)?
                };
            }
        }
        SgMode::Causal => {
            if n >= w {
                for t in (w - 1)..n {
                    out[t] = dot(weights, &series[t + 1 - w..=t]);
                }
                let first = out[w - 1];
                out[..w - 1].fill(first);
            } else {
                // too short for one full window: causal truncated fits
                for t in 0..n {
                    out[t] = local_fit(series, 0, t, cfg.degree, t)?;
                }
            }
        }
    }
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KalmanConfig {
    /// Process-noise variance.
    pub q: f64,
    /// Observation-noise variance.
    pub r: f64,
    /// Initial state; the first observation when `None`.
    pub x0: Option<f64>,
    /// Initial variance; `r` (or 1 when `r == 0`) when `None`.
    pub p0: Option<f64>,
}

impl KalmanConfig {
    pub fn new(q: f64, r: f64) -> Self {
        KalmanConfig {
            q,
            r,
            x0: None,
            p0: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.q.is_finite()) {
            return Err(Error::config(format!("kalman q must be > 0, got {}", self.q)));
        }
        if !(self.r >= 0.0 && self.r.is_finite()) {
            return Err(Error::config(format!("kalman r must be >= 0, got {}", self.r)));
        }
        if let Some(p0) = self.p0 {
            if !(p0 >= 0.0 && p0.is_finite()) {
                return Err(Error::config(format!("kalman p0 must be >= 0, got {p0}")));
            }
        }
        Ok(())
    }

    fn initial_variance(&self) -> f64 {
        self.p0
            .unwrap_or(if self.r > 0.0 { self.r } else { 1.0 })
    }
}

/// Gain sequence `K_1..K_{n-1}` (the first sample is the initial state).
/// The gains do not depend on the data.
pub fn kalman_gains(n: usize, cfg: &KalmanConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut p = cfg.initial_variance();
    let mut gains = Vec::with_capacity(n.saturating_sub(1));
    for _ in 1..n {
        let prior = p + cfg.q;
        let k = prior / (prior + cfg.r);
        p = (1.0 - k) * prior;
        gains.push(k);
    }
    Ok(gains)
}

/// Limit of the gain sequence, from the stationary prior variance
/// `M = (Q + sqrt(Q^2 + 4QR)) / 2`, `K = M / (M + R)`.
pub fn steady_state_gain(q: f64, r: f64) -> f64 {
    let prior = 0.5 * (q + (q * q + 4.0 * q * r).sqrt());
    prior / (prior + r)
}

/// Filtered estimates `x̂_t`; `x̂_0` is the initial state.
pub fn kalman_smooth(series: &[f64], cfg: &KalmanConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if series.is_empty() {
        return Err(Error::data("kalman_smooth on an empty series"));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("kalman_smooth on a series with non-finite values"));
    }
    let mut x = cfg.x0.unwrap_or(series[0]);
    let mut p = cfg.initial_variance();
    let mut out = Vec::with_capacity(series.len());
    out.push(x);
    for &v in &series[1..] {
        let prior = p + cfg.q;
        let k = prior / (prior + cfg.r);
        x += k * (v - x);
        p = (1.0 - k) * prior;
        out.push(x);
    }
    Ok(out)
}

/// Mean squared one-step-ahead prediction error `(v_t - x̂_{t-1})^2`.
pub fn one_step_mse(series: &[f64], cfg: &KalmanConfig) -> Result<f64> {
    let est = kalman_smooth(series, cfg)?;
    if series.len() < 2 {
        return Ok(0.0);
    }
    let sse: f64 = series[1..]
        .iter()
        .zip(&est[..est.len() - 1])
        .map(|(v, x)| (v - x) * (v - x))
        .sum();
    Ok(sse / (series.len() - 1) as f64)
}

/// Log-spaced grid `10^-6, 10^-5, ..., 1`.
pub fn default_log_grid() -> Vec<f64> {
    (0..=6).map(|e| 10f64.powi(e - 6)).collect()
}

/// Pick `(q, r)` minimizing one-step-ahead MSE on `calibration`.
/// Ties keep the earliest cell in `(q, r)` iteration order.
pub fn kalman_grid_search(calibration: &[f64], qs: &[f64], rs: &[f64]) -> Result<(f64, f64, f64)> {
    let mut best: Option<(f64, f64, f64)> = None;
    for &q in qs {
        for &r in rs {
            let mse = one_step_mse(calibration, &KalmanConfig::new(q, r))?;
            if best.is_none_or(|(_, _, b)| mse < b) {
                best = Some((q, r, mse));
            }
        }
    }
    best.ok_or_else(|| Error::config("empty kalman grid"))
}

/// How Kalman variances are interpreted when filtering a matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KalmanScale {
    /// `q` and `r` are multiples of each column's calibration variance.
    Variance,
    /// `q` and `r` are used as-is for every column.
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KalmanSpec {
    pub q: f64,
    pub r: f64,
    pub scale: KalmanScale,
    pub grid_search: bool,
    /// Leading fraction of rows used for variances and the grid search.
    pub calibration_frac: f64,
}

impl Default for KalmanSpec {
    fn default() -> Self {
        KalmanSpec {
            q: 1e-4,
            r: 1e-2,
            scale: KalmanScale::Variance,
            grid_search: false,
            calibration_frac: 0.1,
        }
    }
}

impl KalmanSpec {
    fn calibration_rows(&self, n: usize) -> usize {
        ((n as f64 * self.calibration_frac).floor() as usize).clamp(2.min(n), n)
    }

    /// Resolve absolute `(q, r)` for one column.
    pub fn resolve(&self, column: &[f64]) -> Result<KalmanConfig> {
        let calib = &column[..self.calibration_rows(column.len())];
        let var = variance(calib);
        let unit = match self.scale {
            KalmanScale::Absolute => 1.0,
            KalmanScale::Variance if var > 0.0 => var,
            KalmanScale::Variance => 1.0,
        };
        let (q, r) = if self.grid_search {
            let qs: Vec<f64> = default_log_grid().iter().map(|g| g * unit).collect();
            let (q, r, _) = kalman_grid_search(calib, &qs, &qs)?;
            (q, r)
        } else {
            (self.q * unit, self.r * unit)
        };
        let cfg = KalmanConfig::new(q, r);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FilterKind {
    Raw,
    SavitzkyGolay(SgConfig),
    Kalman(KalmanSpec),
}

impl FilterKind {
    pub fn name(&self) -> &'static str {
        match self {
            FilterKind::Raw => "raw",
            FilterKind::SavitzkyGolay(_) => "sg",
            FilterKind::Kalman(_) => "kalman",
        }
    }

    /// Future samples read per estimate.
    pub fn lookahead(&self) -> usize {
        match self {
            FilterKind::SavitzkyGolay(cfg) => cfg.lookahead(),
            _ => 0,
        }
    }
}

/// Filter one series with `kind`.
pub fn filter_series(series: &[f64], kind: &FilterKind) -> Result<Vec<f64>> {
    match kind {
        FilterKind::Raw => Ok(series.to_vec()),
        FilterKind::SavitzkyGolay(cfg) => sg_smooth(series, cfg),
        FilterKind::Kalman(spec) => kalman_smooth(series, &spec.resolve(series)?),
    }
}

/// Filter every column independently; timestamps are unchanged.
pub fn apply_filter(matrix: &FeatureMatrix, kind: &FilterKind) -> Result<FeatureMatrix> {
    let columns = match kind {
        FilterKind::Raw => return Ok(matrix.clone()),
        FilterKind::SavitzkyGolay(cfg) => {
            let weights = sg_weights(cfg)?;
            matrix
                .columns()
                .iter()
                .map(|c| sg_smooth_with(c, cfg, &weights))
                .collect::<Result<Vec<_>>>()?
        }
        FilterKind::Kalman(_) => matrix
            .columns()
            .iter()
            .map(|c| filter_series(c, kind))
            .collect::<Result<Vec<_>>>()?,
    };
    matrix.with_columns(columns)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_one_and_are_symmetric() {
        let c = sg_weights(&SgConfig::default()).unwrap();
        assert_eq!(c.len(), 21);
        assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for j in 0..10 {
            assert!((c[j] - c[20 - j]).abs() < 1e-12);
        }
        let causal = sg_weights(&SgConfig {
            mode: SgMode::Causal,
            ..Default::default()
        })
        .unwrap();
        assert!((causal.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn known_five_point_quadratic_weights() {
        // classic tabulated 5-point quadratic smoother: (-3, 12, 17, 12, -3) / 35
        let c = sg_weights(&SgConfig {
            half_window: 2,
            degree: 2,
            mode: SgMode::Centered,
        })
        .unwrap();
        let expect = [-3.0, 12.0, 17.0, 12.0, -3.0].map(|v| v / 35.0);
        for (a, b) in c.iter().zip(expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn cubic_annihilated_at_centre() {
        let c = sg_weights(&SgConfig::default()).unwrap();
        let v: f64 = c
            .iter()
            .enumerate()
            .map(|(i, w)| w * ((i as f64) - 10.0).powi(3))
            .sum();
        assert!(v.abs() < 1e-9);
    }

    #[test]
    fn constant_series_is_fixed() {
        for mode in [SgMode::Centered, SgMode::Causal] {
            let cfg = SgConfig {
                mode,
                ..Default::default()
            };
            for n in [1, 5, 21, 50] {
                let out = sg_smooth(&vec![5.0; n], &cfg).unwrap();
                assert!(out.iter().all(|v| (v - 5.0).abs() < 1e-12), "{mode:?} n={n}");
            }
        }
    }

    #[test]
    fn sg_rejects_nan_and_bad_config() {
        assert!(sg_smooth(&[1.0, f64::NAN], &SgConfig::default()).is_err());
        assert!(sg_smooth(&[], &SgConfig::default()).is_err());
        let bad = SgConfig {
            half_window: 1,
            degree: 3,
            mode: SgMode::Centered,
        };
        assert!(sg_weights(&bad).is_err());
    }

    #[test]
    fn causal_warmup_copies_first_full_estimate() {
        let series: Vec<f64> = (0..40).map(|i| ((i * 7) % 11) as f64).collect();
        let cfg = SgConfig {
            mode: SgMode::Causal,
            ..Default::default()
        };
        let out = sg_smooth(&series, &cfg).unwrap();
        assert!(out[..20].iter().all(|&v| v == out[20]));
    }

    #[test]
    fn kalman_r_zero_passthrough() {
        let v = [1.0, 3.0, -2.0, 8.0];
        let out = kalman_smooth(&v, &KalmanConfig::new(0.5, 0.0)).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn kalman_constant_input() {
        let out = kalman_smooth(&[4.0; 30], &KalmanConfig::new(1e-3, 10.0)).unwrap();
        assert!(out.iter().all(|&x| x == 4.0));
    }

    #[test]
    fn kalman_config_errors() {
        assert!(kalman_smooth(&[1.0], &KalmanConfig::new(0.0, 1.0)).is_err());
        assert!(kalman_smooth(&[1.0], &KalmanConfig::new(1.0, -1.0)).is_err());
    }

    #[test]
    fn gains_in_unit_interval() {
        let gains = kalman_gains(200, &KalmanConfig::new(1e-4, 1e-2)).unwrap();
        assert!(gains.iter().all(|&k| k > 0.0 && k <= 1.0));
    }

    #[test]
    fn grid_search_prefers_tracking_for_random_walk() {
        // a pure random walk is best predicted by the last observation
        let mut x = 0.0;
        let walk: Vec<f64> = (0..300)
            .map(|i| {
                x += if (i * 37) % 7 < 3 { 1.0 } else { -1.0 };
                x
            })
            .collect();
        let g = default_log_grid();
        let (q, r, _) = kalman_grid_search(&walk, &g, &g).unwrap();
        assert!(q / r.max(1e-300) >= 1.0);
    }

    #[test]
    fn raw_filter_is_identity() {
        let m = FeatureMatrix::new(vec![1, 2, 3], vec!["a".into()], vec![vec![1.0, 2.5, 3.0]])
            .unwrap();
        assert_eq!(apply_filter(&m, &FilterKind::Raw).unwrap(), m);
    }
}
