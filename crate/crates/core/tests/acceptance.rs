//! Acceptance suite. Prints one `PASS`/`FAIL`/`SKIP` line per criterion and
//! exits non-zero when a required criterion fails. P12 runs only when
//! `LOB_BYBIT_FILE` names a Bybit orderbook archive or a canonical NDJSON
//! file; its outcome never affects the exit status.

mod common;

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use common::{config, rel_err, write_synth};
use lobbench::eval::{confusion, metrics};
use lobbench::experiment::{prepare_dataset, run_with_cache, PipelineCache, RunOutcome};
use lobbench::features::{imbalance, mid_price, weighted_mid_change, inverse_level_weights};
use lobbench::filters::{
    kalman_gains, kalman_smooth, sg_smooth, sg_weights, KalmanConfig, SgConfig, SgMode,
};
use lobbench::ingest::{convert_bybit, BookFrame};
use lobbench::labeling::{label_ternary, tune_epsilon, ClassWeights};
use lobbench::models::{
    best_split, build_tree, logistic_loss_and_grad, train_gbdt, BinMapper, LogisticModel, Matrix,
    TrainConfig,
};
use lobbench::synth::{oracle_accuracy, SynthConfig, SynthStream};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn main() {
    let checks: [(&str, &str, fn() -> Outcome); 11] = [
        ("P1", "SG oracle equivalence", p1_sg_oracle),
        ("P2", "SG polynomial reproduction", p2_sg_polynomials),
        ("P3", "Kalman oracle equivalence", p3_kalman_oracle),
        ("P4", "feature properties", p4_features),
        ("P5", "epsilon tuning", p5_epsilon),
        ("P6", "logistic gradient check", p6_gradient),
        ("P7", "GBDT correctness", p7_gbdt),
        ("P8", "metrics hand evaluation", p8_metrics),
        ("P9", "end-to-end directional replication", p9_end_to_end),
        ("P10", "determinism", p10_determinism),
        ("P11", "leakage guard", p11_leakage),
    ];
    let mut failed = 0;
    for (id, name, check) in checks {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|e| Err(panic_message(e.as_ref())));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("{id:<4} PASS  {name}: {detail} ({secs:.2} s)"),
            Err(why) => {
                failed += 1;
                println!("{id:<4} FAIL  {name}: {why} ({secs:.2} s)");
            }
        }
    }
    match std::env::var_os("LOB_BYBIT_FILE") {
        None => println!("P12  SKIP  reference-day reproduction: LOB_BYBIT_FILE not set"),
        Some(path) => {
            let start = Instant::now();
            let outcome = catch_unwind(AssertUnwindSafe(|| p12_reference_day(Path::new(&path))))
                .unwrap_or_else(|e| Err(panic_message(e.as_ref())));
            let secs = start.elapsed().as_secs_f64();
            match outcome {
                Ok(detail) => println!("P12  PASS  reference-day reproduction: {detail} ({secs:.2} s)"),
                Err(why) => println!(
                    "P12  FAIL  reference-day reproduction (optional, not counted): {why} ({secs:.2} s)"
                ),
            }
        }
    }
    if failed > 0 {
        println!("{failed} required criteria failed");
        std::process::exit(1);
    }
    println!("all required criteria passed");
}

fn panic_message(e: &(dyn std::any::Any + Send)) -> String {
    e.downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .map_or_else(|| "panicked".into(), |m| format!("panicked: {m}"))
}

fn random_walk(rng: &mut ChaCha8Rng, n: usize, start: f64, step: f64) -> Vec<f64> {
    let mut v = start;
    (0..n)
        .map(|_| {
            v += rng.random_range(-step..step);
            v
        })
        .collect()
}

/// Least-squares polynomial through `(xs, ys)` evaluated at 0, via QR.
fn lsq_at_zero(xs: &[f64], ys: &[f64], degree: usize) -> f64 {
    let a = DMatrix::from_fn(xs.len(), degree + 1, |i, j| xs[i].powi(j as i32));
    let b = DVector::from_column_slice(ys);
    let qr = a.qr();
    let qtb = qr.q().transpose() * b;
    let coef = qr
        .r()
        .solve_upper_triangular(&qtb)
        .expect("full-rank Vandermonde");
    coef[0]
}

fn p1_sg_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let series = random_walk(&mut rng, 1_000, 100.0, 0.5);
    let cfg = SgConfig {
        half_window: 10,
        degree: 3,
        mode: SgMode::Centered,
    };
    let start = Instant::now();
    let out = sg_smooth(&series, &cfg).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let m = 10;
    let xs: Vec<f64> = (-(m as i64)..=m as i64).map(|j| j as f64).collect();
    let mut worst: f64 = 0.0;
    for t in m..series.len() - m {
        let want = lsq_at_zero(&xs, &series[t - m..=t + m], 3);
        worst = worst.max(rel_err(out[t], want));
    }
    ensure(worst <= 1e-9, || format!("max relative error {worst:.3e} > 1e-9"))?;
    ensure(elapsed < Duration::from_secs(1), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "max rel err {worst:.2e} over {} interior points, smoothing took {:.1} ms",
        series.len() - 2 * m,
        elapsed.as_secs_f64() * 1e3
    ))
}

fn p2_sg_polynomials() -> Outcome {
    let cubic = |t: f64| 3.0 - 0.5 * t + 0.02 * t * t - 1e-4 * t * t * t;
    let series: Vec<f64> = (0..300).map(|t| cubic(t as f64)).collect();
    let scale = series.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut worst_cubic: f64 = 0.0;
    for (m, mode) in [(10, SgMode::Centered), (5, SgMode::Centered), (10, SgMode::Causal)] {
        let cfg = SgConfig {
            half_window: m,
            degree: 3,
            mode,
        };
        let out = sg_smooth(&series, &cfg).map_err(|e| e.to_string())?;
        let (lo, hi) = match mode {
            SgMode::Centered => (m, series.len() - m),
            SgMode::Causal => (2 * m, series.len()),
        };
        for t in lo..hi {
            worst_cubic = worst_cubic.max((out[t] - series[t]).abs() / scale);
        }
    }
    ensure(worst_cubic <= 1e-9, || format!("cubic reproduction error {worst_cubic:.3e}"))?;

    let mut worst_sum: f64 = 0.0;
    let mut cells = 0;
    for m in 1..=25 {
        for d in 0..=5 {
            if 2 * m + 1 <= d {
                continue;
            }
            for mode in [SgMode::Centered, SgMode::Causal] {
                let w = sg_weights(&SgConfig {
                    half_window: m,
                    degree: d,
                    mode,
                })
                .map_err(|e| format!("m={m} d={d}: {e}"))?;
                worst_sum = worst_sum.max((w.iter().sum::<f64>() - 1.0).abs());
                cells += 1;
            }
        }
    }
    ensure(worst_sum <= 1e-12, || format!("weight sum off by {worst_sum:.3e}"))?;

    let w = sg_weights(&SgConfig {
        half_window: 10,
        degree: 3,
        mode: SgMode::Centered,
    })
    .map_err(|e| e.to_string())?;
    let at_centre: f64 = w
        .iter()
        .zip(-10i32..=10)
        .map(|(c, j)| c * f64::from(j).powi(3))
        .sum();
    ensure(at_centre.abs() <= 1e-9, || format!("j^3 at centre gives {at_centre:.3e}"))?;
    Ok(format!(
        "cubic err {worst_cubic:.2e}·scale, weight sums within {worst_sum:.1e} over {cells} (m, d, mode) cells"
    ))
}

/// Predict/update recursion written out step by step.
fn kalman_oracle(z: &[f64], q: f64, r: f64, x0: f64, p0: f64) -> (Vec<f64>, Vec<f64>) {
    let mut x = x0;
    let mut p = p0;
    let mut est = vec![x];
    let mut gains = Vec::new();
    for &obs in &z[1..] {
        let x_pred = x;
        let p_pred = p + q;
        let k = p_pred / (p_pred + r);
        x = x_pred + k * (obs - x_pred);
        p = (1.0 - k) * p_pred;
        est.push(x);
        gains.push(k);
    }
    (est, gains)
}

fn p3_kalman_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = Normal::new(0.0, 0.1).unwrap();
    let walk = random_walk(&mut rng, 500, 100.0, 0.05);
    let z: Vec<f64> = walk.iter().map(|v| v + noise.sample(&mut rng)).collect();
    let (q, r) = (1e-4, 1e-2);
    let (x0, p0) = (z[0], r);
    let cfg = KalmanConfig {
        q,
        r,
        x0: Some(x0),
        p0: Some(p0),
    };
    let got = kalman_smooth(&z, &cfg).map_err(|e| e.to_string())?;
    let (want, want_gains) = kalman_oracle(&z, q, r, x0, p0);
    let worst = got
        .iter()
        .zip(&want)
        .map(|(a, b)| rel_err(*a, *b))
        .fold(0.0f64, f64::max);
    ensure(worst <= 1e-12, || format!("estimates differ by {worst:.3e}"))?;
    let gains = kalman_gains(z.len(), &cfg).map_err(|e| e.to_string())?;
    let worst_gain = gains
        .iter()
        .zip(&want_gains)
        .map(|(a, b)| rel_err(*a, *b))
        .fold(0.0f64, f64::max);
    ensure(worst_gain <= 1e-12, || format!("gains differ by {worst_gain:.3e}"))?;

    // steady state by fixed-point iteration of the variance recursion
    let mut p = 1.0;
    for _ in 0..100_000 {
        let prior = p + q;
        p = prior * r / (prior + r);
    }
    let k_inf = (p + q) / (p + q + r);
    let last = *gains.last().unwrap();
    ensure(rel_err(last, k_inf) <= 1e-9, || {
        format!("final gain {last} vs fixed point {k_inf}")
    })?;

    let pass = kalman_smooth(&z, &KalmanConfig::new(1e-3, 0.0)).map_err(|e| e.to_string())?;
    let worst_pass = pass
        .iter()
        .zip(&z)
        .map(|(a, b)| rel_err(*a, *b))
        .fold(0.0f64, f64::max);
    ensure(worst_pass <= 1e-12, || format!("R=0 output deviates by {worst_pass:.3e}"))?;

    let c = 37.5;
    let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
    let base = kalman_smooth(&z, &KalmanConfig::new(q, r)).map_err(|e| e.to_string())?;
    let moved = kalman_smooth(&shifted, &KalmanConfig::new(q, r)).map_err(|e| e.to_string())?;
    let worst_shift = base
        .iter()
        .zip(&moved)
        .map(|(a, b)| rel_err(*b, a + c))
        .fold(0.0f64, f64::max);
    ensure(worst_shift <= 1e-12, || format!("shift equivariance off by {worst_shift:.3e}"))?;
    Ok(format!(
        "recursion err {worst:.1e}, gain err {worst_gain:.1e}, K_final {last:.6} vs K_inf {k_inf:.6}, R=0 err {worst_pass:.1e}, shift err {worst_shift:.1e}"
    ))
}

fn random_frame(rng: &mut ChaCha8Rng, depth: usize) -> BookFrame {
    let tick = 0.1;
    let best_bid = (rng.random_range(1_000..1_000_000) as f64) * tick;
    let best_ask = best_bid + rng.random_range(1..5) as f64 * tick;
    let qty = |rng: &mut ChaCha8Rng| {
        if rng.random_bool(0.1) {
            0.0
        } else {
            rng.random_range(0.0..10.0)
        }
    };
    let (mut bp, mut ap) = (vec![best_bid], vec![best_ask]);
    for i in 1..depth {
        bp.push(bp[i - 1] - rng.random_range(1..4) as f64 * tick);
        ap.push(ap[i - 1] + rng.random_range(1..4) as f64 * tick);
    }
    let bq = (0..depth).map(|_| qty(rng)).collect();
    let aq = (0..depth).map(|_| qty(rng)).collect();
    BookFrame::new(0, bp, bq, ap, aq).unwrap()
}

fn p4_features() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 10_000;
    for i in 0..n {
        let f = random_frame(&mut rng, 10);
        let mirror = BookFrame::new(
            f.ts,
            f.bid_price.clone(),
            f.ask_qty.clone(),
            f.ask_price.clone(),
            f.bid_qty.clone(),
        )
        .unwrap();
        for levels in [1, 5, 10] {
            let a = imbalance(&f, levels);
            ensure((-1.0..=1.0).contains(&a), || format!("frame {i}: imbalance {a} out of range"))?;
            let b = imbalance(&mirror, levels);
            ensure(a == -b, || format!("frame {i}, L={levels}: {a} vs mirrored {b}"))?;
        }
        let mid = mid_price(&f);
        ensure(f.bid_price[0] < mid && mid < f.ask_price[0], || {
            format!("frame {i}: mid {mid} outside ({}, {})", f.bid_price[0], f.ask_price[0])
        })?;
    }
    let prev = BookFrame::new(
        0,
        vec![99.0, 98.0, 97.0],
        vec![1.0; 3],
        vec![101.0, 102.0, 103.0],
        vec![1.0; 3],
    )
    .unwrap();
    // level mids move by (+2, 0, -1)
    let cur = BookFrame::new(
        100,
        vec![101.0, 96.0, 93.0],
        vec![1.0; 3],
        vec![103.0, 104.0, 105.0],
        vec![1.0; 3],
    )
    .unwrap();
    let got = weighted_mid_change(&prev, &cur, &inverse_level_weights());
    ensure((got - 10.0 / 11.0).abs() <= 1e-12, || format!("hand fixture gave {got}, want 10/11"))?;
    Ok(format!("{n} random frames, hand fixture {got:.12}"))
}

fn p5_epsilon() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dist = Normal::new(0.0, 1e-4).unwrap();
    let returns: Vec<f64> = (0..100_000).map(|_| dist.sample(&mut rng)).collect();
    let eps = tune_epsilon(&returns, 1.0 / 3.0).map_err(|e| e.to_string())?;
    let mut counts = [0usize; 3];
    for &r in &returns {
        counts[label_ternary(r, eps) as usize] += 1;
    }
    let shares = counts.map(|c| c as f64 / returns.len() as f64);
    let worst = shares
        .iter()
        .map(|s| (s - 1.0 / 3.0).abs())
        .fold(0.0f64, f64::max);
    ensure(worst <= 0.02, || format!("class shares {shares:?}"))?;
    Ok(format!(
        "eps {eps:.4e}, shares down/flat/up {:.4}/{:.4}/{:.4}",
        shares[0], shares[1], shares[2]
    ))
}

fn p6_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let batches = 20;
    for _ in 0..batches {
        let (n, d, k) = (5, 4, 3);
        let x = Matrix::new(n, d, (0..n * d).map(|_| normal.sample(&mut rng)).collect()).unwrap();
        let y: Vec<u8> = (0..n).map(|_| rng.random_range(0..k as u8)).collect();
        let cw = ClassWeights((0..k).map(|_| rng.random_range(0.5..2.0)).collect());
        let mut model = LogisticModel::zeros(k, d);
        for w in &mut model.weights {
            *w = normal.sample(&mut rng);
        }
        let l2 = 1e-2;
        let (_, grad) = logistic_loss_and_grad(&model, &x, &y, &cw, l2);
        for i in 0..model.weights.len() {
            let mut plus = model.clone();
            plus.weights[i] += h;
            let mut minus = model.clone();
            minus.weights[i] -= h;
            let fp = logistic_loss_and_grad(&plus, &x, &y, &cw, l2).0;
            let fm = logistic_loss_and_grad(&minus, &x, &y, &cw, l2).0;
            let numeric = (fp - fm) / (2.0 * h);
            let denom = grad[i].abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((grad[i] - numeric).abs() / denom);
        }
    }
    ensure(worst <= 1e-4, || format!("max relative error {worst:.3e}"))?;
    Ok(format!("max rel err {worst:.2e} over {batches} random 5x4 batches, K=3"))
}

/// Brute-force best split over every distinct value of every feature.
fn exhaustive_split(
    x: &Matrix,
    rows: &[usize],
    g: &[f64],
    h: &[f64],
    lambda: f64,
    min_leaf: usize,
) -> Option<(usize, f64, f64)> {
    let score = |g: f64, h: f64| g * g / (h + lambda);
    let gt: f64 = rows.iter().map(|&r| g[r]).sum();
    let ht: f64 = rows.iter().map(|&r| h[r]).sum();
    let mut best: Option<(usize, f64, f64)> = None;
    for j in 0..x.cols() {
        let mut values: Vec<f64> = rows.iter().map(|&r| x.get(r, j)).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        for &thr in &values[..values.len() - 1] {
            let left: Vec<usize> = rows.iter().copied().filter(|&r| x.get(r, j) <= thr).collect();
            let nr = rows.len() - left.len();
            if left.len() < min_leaf || nr < min_leaf {
                continue;
            }
            let gl: f64 = left.iter().map(|&r| g[r]).sum();
            let hl: f64 = left.iter().map(|&r| h[r]).sum();
            let gain = score(gl, hl) + score(gt - gl, ht - hl) - score(gt, ht);
            if gain > 0.0 && best.is_none_or(|b| gain > b.2) {
                best = Some((j, thr, gain));
            }
        }
    }
    best
}

enum OracleTree {
    Leaf(f64),
    Split(usize, f64, Box<OracleTree>, Box<OracleTree>),
}

fn oracle_tree(
    x: &Matrix,
    rows: &[usize],
    g: &[f64],
    h: &[f64],
    lambda: f64,
    depth_left: usize,
    min_leaf: usize,
) -> OracleTree {
    let leaf = || {
        let gs: f64 = rows.iter().map(|&r| g[r]).sum();
        let hs: f64 = rows.iter().map(|&r| h[r]).sum();
        OracleTree::Leaf(-gs / (hs + lambda))
    };
    if depth_left == 0 {
        return leaf();
    }
    match exhaustive_split(x, rows, g, h, lambda, min_leaf) {
        None => leaf(),
        Some((j, thr, _)) => {
            let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&r| x.get(r, j) <= thr);
            OracleTree::Split(
                j,
                thr,
                Box::new(oracle_tree(x, &l, g, h, lambda, depth_left - 1, min_leaf)),
                Box::new(oracle_tree(x, &r, g, h, lambda, depth_left - 1, min_leaf)),
            )
        }
    }
}

fn oracle_predict(t: &OracleTree, row: &[f64]) -> f64 {
    match t {
        OracleTree::Leaf(v) => *v,
        OracleTree::Split(j, thr, l, r) => {
            if row[*j] <= *thr {
                oracle_predict(l, row)
            } else {
                oracle_predict(r, row)
            }
        }
    }
}

fn p7_gbdt() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut fixtures = 0;
    for case in 0..200 {
        let n = rng.random_range(8..=50);
        let d = rng.random_range(1..=3);
        let coarse = case % 2 == 0;
        let data: Vec<f64> = (0..n * d)
            .map(|_| {
                let v: f64 = rng.random_range(0.0..3.0);
                if coarse { (v * 4.0).round() / 4.0 } else { v }
            })
            .collect();
        let x = Matrix::new(n, d, data).unwrap();
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
        let lambda = if case % 3 == 0 { 0.0 } else { 1.0 };
        let min_leaf = [1, 2, 5][case % 3];
        let binned = BinMapper::fit(&x, 64).transform(&x);
        let rows: Vec<u32> = (0..n as u32).collect();
        let all: Vec<usize> = (0..n).collect();

        let got = best_split(&binned, &rows, &g, &h, lambda, min_leaf);
        let want = exhaustive_split(&x, &all, &g, &h, lambda, min_leaf);
        match (got, want) {
            (None, None) => {}
            (Some(a), Some((j, thr, gain))) => {
                ensure(a.feature == j && a.threshold == thr, || {
                    format!("case {case}: split ({}, {}) vs oracle ({j}, {thr})", a.feature, a.threshold)
                })?;
                ensure(rel_err(a.gain, gain) <= 1e-9, || {
                    format!("case {case}: gain {} vs oracle {gain}", a.gain)
                })?;
            }
            (a, b) => return Err(format!("case {case}: split {a:?} vs oracle {b:?}")),
        }

        for depth in 1..=2 {
            let tree = build_tree(&binned, &rows, &g, &h, lambda, depth, min_leaf);
            let oracle = oracle_tree(&x, &all, &g, &h, lambda, depth, min_leaf);
            for i in 0..n {
                let (a, b) = (tree.predict(x.row(i)), oracle_predict(&oracle, x.row(i)));
                ensure((a - b).abs() <= 1e-12 * b.abs().max(1.0), || {
                    format!("case {case}, depth {depth}, row {i}: tree {a} vs oracle {b}")
                })?;
            }
        }
        fixtures += 1;
    }

    // threshold rule y = [x > 0]
    let sample = |rng: &mut ChaCha8Rng, n: usize| {
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ys: Vec<u8> = xs.iter().map(|&v| u8::from(v > 0.0)).collect();
        (Matrix::new(n, 1, xs).unwrap(), ys)
    };
    let (xt, yt) = sample(&mut rng, 1_000);
    let (xv, yv) = sample(&mut rng, 500);
    let (xs, ys) = sample(&mut rng, 1_000);
    let cfg = TrainConfig {
        rounds: 20,
        ..TrainConfig::default()
    };
    let model = train_gbdt(&xt, &yt, &ClassWeights::uniform(2), &cfg, (&xv, &yv))
        .map_err(|e| e.to_string())?;
    let pred = model.predict_proba(&xs).map_err(|e| e.to_string())?.argmax();
    let acc = pred.iter().zip(&ys).filter(|(a, b)| a == b).count() as f64 / ys.len() as f64;
    ensure(acc >= 0.99, || format!("threshold task accuracy {acc}"))?;
    ensure(model.rounds.len() <= 20, || "more than 20 rounds".into())?;

    // zero learning rate keeps the class prior
    let yt_skewed: Vec<u8> = (0..xt.rows()).map(|i| u8::from(i % 4 == 0)).collect();
    let yv_skewed: Vec<u8> = (0..xv.rows()).map(|i| u8::from(i % 4 == 0)).collect();
    let prior = yt_skewed.iter().filter(|&&c| c == 1).count() as f64 / yt_skewed.len() as f64;
    let frozen = TrainConfig {
        learning_rate: 0.0,
        rounds: 15,
        early_stopping_rounds: 100,
        ..TrainConfig::default()
    };
    let m0 = train_gbdt(&xt, &yt_skewed, &ClassWeights::uniform(2), &frozen, (&xv, &yv_skewed))
        .map_err(|e| e.to_string())?;
    for n_rounds in [0, m0.rounds.len()] {
        let p = m0.predict_proba_at(&xs, n_rounds).map_err(|e| e.to_string())?;
        for i in 0..p.n() {
            let row = p.row(i);
            ensure((row[1] - prior).abs() <= 1e-12 && (row[0] - (1.0 - prior)).abs() <= 1e-12, || {
                format!("eta=0 after {n_rounds} rounds predicts {row:?}, prior {prior}")
            })?;
        }
    }

    // early stopping on a noisy task: best_round minimizes recomputed val loss
    let noisy = |rng: &mut ChaCha8Rng, n: usize| {
        let xs: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ys: Vec<u8> = (0..n)
            .map(|i| {
                let s = xs[i * 3] + 0.5 * xs[i * 3 + 1];
                let flip = rng.random_bool(0.3);
                u8::from((s > 0.0) != flip)
            })
            .collect();
        (Matrix::new(n, 3, xs).unwrap(), ys)
    };
    let (xt, yt) = noisy(&mut rng, 600);
    let (xv, yv) = noisy(&mut rng, 300);
    let cw = ClassWeights(vec![1.3, 0.8]);
    let cfg = TrainConfig {
        rounds: 200,
        learning_rate: 0.3,
        max_depth: 4,
        min_samples_leaf: 2,
        early_stopping_rounds: 15,
        ..TrainConfig::default()
    };
    let m = train_gbdt(&xt, &yt, &cw, &cfg, (&xv, &yv)).map_err(|e| e.to_string())?;
    let built = m.rounds.len();
    let losses: Vec<f64> = (0..=built)
        .map(|r| m.predict_proba_at(&xv, r).unwrap().weighted_log_loss(&yv, &cw))
        .collect();
    let min = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    ensure(rel_err(losses[m.best_round], min) <= 1e-12, || {
        format!("best_round {} has loss {} but minimum is {min}", m.best_round, losses[m.best_round])
    })?;
    ensure(built < 200, || "early stopping never triggered".into())?;
    Ok(format!(
        "{fixtures} split/tree fixtures match exhaustive oracle, threshold accuracy {acc:.3}, eta=0 keeps prior, best_round {} of {built} minimizes val loss",
        m.best_round
    ))
}

fn p8_metrics() -> Outcome {
    let cm = confusion(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).map_err(|e| e.to_string())?;
    ensure(cm.rows() == vec![vec![1, 1], vec![0, 2]], || format!("confusion {:?}", cm.rows()))?;
    let r = metrics(&cm);
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    let pc = &r.per_class;
    let ok = close(pc[0].precision, 1.0)
        && close(pc[1].precision, 2.0 / 3.0)
        && close(pc[0].recall, 0.5)
        && close(pc[1].recall, 1.0)
        && close(pc[0].f1, 2.0 / 3.0)
        && close(pc[1].f1, 0.8)
        && close(r.accuracy, 0.75);
    ensure(ok, || format!("got {pc:?}, accuracy {}", r.accuracy))?;
    Ok("precision (1, 2/3), recall (0.5, 1), F1 (2/3, 0.8), accuracy 0.75".into())
}

fn p9_end_to_end() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig {
        seed: 11,
        n: 20_000,
        noise_sigma: 1.0,
        signal_strength: 0.8,
        ..SynthConfig::default()
    };
    let beta = oracle_accuracy(&synth);
    let input = write_synth(dir.path(), "p9.ndjson", &synth);
    let out = dir.path().join("results");
    let filters: [(&str, &[(&str, &str)]); 3] = [
        ("sg", &[("filter.kind", "sg"), ("filter.sg.mode", "causal")]),
        ("raw", &[("filter.kind", "raw")]),
        (
            "kalman-bad",
            &[("filter.kind", "kalman"), ("filter.kalman.q", "1e-6"), ("filter.kalman.r", "1")],
        ),
    ];
    let mut cache = PipelineCache::new(true);
    let mut lines = Vec::new();
    for model in ["logistic", "gbdt"] {
        let mut acc = Vec::new();
        for (name, keys) in &filters {
            let mut overrides = vec![
                ("label.kind", "binary"),
                ("label.source", "raw"),
                ("label.horizon_ms", "100"),
                ("model.kind", model),
            ];
            overrides.extend_from_slice(keys);
            let cfg = config(&input, &out, &overrides);
            let o: RunOutcome = run_with_cache(&cfg, &mut cache).map_err(|e| e.to_string())?;
            let n = o.y_test.len() as f64;
            let majority = (0..2)
                .map(|c| o.y_test.iter().filter(|&&y| y == c).count() as f64 / n)
                .fold(0.5f64, f64::max);
            let bound = beta + 3.0 * (beta * (1.0 - beta) / n).sqrt();
            let a = o.report.accuracy;
            ensure(a <= bound, || format!("{model}/{name}: accuracy {a:.4} above bound {bound:.4}"))?;
            if *name != "kalman-bad" {
                ensure(a >= majority + 0.05, || {
                    format!("{model}/{name}: accuracy {a:.4} vs chance {majority:.4}")
                })?;
            }
            acc.push(a);
        }
        lines.push(format!(
            "{model} sg {:.4} > raw {:.4} > kalman-bad {:.4}",
            acc[0], acc[1], acc[2]
        ));
        ensure(acc[0] > acc[1] && acc[1] > acc[2], || {
            format!("ordering violated: {}", lines.last().unwrap())
        })?;
    }
    Ok(format!("{}; beta {beta}", lines.join("; ")))
}

fn files_equal(a: &Path, b: &Path, names: &[&str]) -> Result<(), String> {
    for name in names {
        let (x, y) = (fs::read(a.join(name)), fs::read(b.join(name)));
        match (x, y) {
            (Ok(x), Ok(y)) if x == y => {}
            (Ok(_), Ok(_)) => return Err(format!("{name} differs between runs")),
            (x, y) => return Err(format!("{name}: {:?} / {:?}", x.err(), y.err())),
        }
    }
    Ok(())
}

fn p10_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let input = write_synth(
        dir.path(),
        "p10.ndjson",
        &SynthConfig {
            n: 4_000,
            noise_sigma: 0.7,
            ..SynthConfig::default()
        },
    );
    let files = ["metrics.csv", "model.bin", "confusion.csv", "grid.csv", "predictions.csv"];
    let mut checked = Vec::new();
    for model in ["logistic", "gbdt"] {
        let overrides = [
            ("model.kind", model),
            ("filter.kind", "sg"),
            ("model.grid.rounds", "20, 40"),
            ("model.grid.learning_rates", "0.1, 0.3"),
        ];
        let a = run_with_cache(&config(&input, &dir.path().join("a"), &overrides), &mut PipelineCache::new(false))
            .map_err(|e| e.to_string())?;
        let b = run_with_cache(&config(&input, &dir.path().join("b"), &overrides), &mut PipelineCache::new(false))
            .map_err(|e| e.to_string())?;
        ensure(a.id == b.id, || "ids differ".into())?;
        files_equal(&a.dir, &b.dir, &files)?;
        checked.push(model);
    }
    Ok(format!("{} identical across two runs for {}", files.join(", "), checked.join(" and ")))
}

fn p11_leakage() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig {
        seed: 21,
        n: 6_000,
        noise_sigma: 0.5,
        ..SynthConfig::default()
    };
    let clean = write_synth(dir.path(), "clean.ndjson", &synth);
    let out = dir.path().join("results");
    let variants: [&[(&str, &str)]; 3] = [
        &[("filter.kind", "raw")],
        &[("filter.kind", "sg"), ("filter.sg.mode", "centered")],
        &[("filter.kind", "kalman")],
    ];
    let mut notes = Vec::new();
    for keys in variants {
        let mut overrides = vec![
            ("label.kind", "ternary"),
            ("label.epsilon", "auto"),
            ("model.grid.rounds", "20, 40"),
            ("model.grid.learning_rates", "0.1, 0.3"),
        ];
        overrides.extend_from_slice(keys);
        let cfg = config(&clean, &out, &overrides);
        let prepared = prepare_dataset(&cfg, &mut PipelineCache::new(false)).map_err(|e| e.to_string())?;
        let ds = &prepared.dataset;
        ensure(prepared.ingest_stats.accepted as usize == synth.n, || "synthetic rows rejected".into())?;
        let first_test = ds.splits[2][0].start;

        let perturbed = dir.path().join(format!("perturbed-{first_test}.ndjson"));
        let mut w = BufWriter::new(File::create(&perturbed).unwrap());
        for (i, mut snap) in SynthStream::new(synth).unwrap().enumerate() {
            if i >= first_test {
                for l in snap.bids.iter_mut().chain(snap.asks.iter_mut()) {
                    l.qty *= 3.0;
                    l.price += 50.0 * synth.tick;
                }
            }
            writeln!(w, "{}", snap.to_ndjson()).unwrap();
        }
        w.flush().unwrap();
        drop(w);

        let pcfg = config(&perturbed, &out, &overrides);
        let a = run_with_cache(&cfg, &mut PipelineCache::new(false)).map_err(|e| e.to_string())?;
        let b = run_with_cache(&pcfg, &mut PipelineCache::new(false)).map_err(|e| e.to_string())?;
        let name = cfg.filter.name();
        ensure(a.normalizer == b.normalizer, || format!("{name}: normalizer changed"))?;
        ensure(a.epsilon == b.epsilon, || format!("{name}: epsilon {:?} vs {:?}", a.epsilon, b.epsilon))?;
        ensure(a.class_weights == b.class_weights, || format!("{name}: class weights changed"))?;
        ensure(a.grid == b.grid, || format!("{name}: grid report changed"))?;
        ensure(a.train_config == b.train_config, || format!("{name}: selected cell changed"))?;
        ensure(a.model == b.model, || format!("{name}: fitted model changed"))?;
        let pb = prepare_dataset(&pcfg, &mut PipelineCache::new(false)).map_err(|e| e.to_string())?;
        let (xa, _) = ds.design(2).map_err(|e| e.to_string())?;
        let (xb, _) = pb.dataset.design(2).map_err(|e| e.to_string())?;
        ensure(xa != xb, || format!("{name}: perturbation did not reach the test split"))?;
        notes.push(format!("{name} (test from row {first_test})"));
    }
    Ok(format!(
        "normalizer, epsilon, class weights, grid choice and losses unchanged for {}",
        notes.join(", ")
    ))
}

/// Optional comparison against published reference-day figures.
fn p12_reference_day(path: &Path) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let first = BufReader::new(File::open(path).map_err(|e| e.to_string())?)
        .lines()
        .next()
        .and_then(|l| l.ok())
        .unwrap_or_default();
    let canonical = if first.contains("\"topic\"") {
        let out = dir.path().join("converted.ndjson");
        let stats = convert_bybit(
            BufReader::new(File::open(path).map_err(|e| e.to_string())?),
            BufWriter::new(File::create(&out).map_err(|e| e.to_string())?),
            200,
        )
        .map_err(|e| e.to_string())?;
        if stats.records_written == 0 {
            return Err("archive produced no records".into());
        }
        out
    } else {
        path.to_path_buf()
    };
    let out = dir.path().join("results");
    let base = [
        ("input.limit", "100000"),
        ("depth", "40"),
        ("label.kind", "binary"),
        ("label.horizon_ms", "1000"),
        ("filter.kind", "sg"),
        ("model.kind", "gbdt"),
    ];
    let mut cache = PipelineCache::new(true);
    let t1 = run_with_cache(&config(&canonical, &out, &base), &mut cache).map_err(|e| e.to_string())?;
    let mut with_t10 = base.to_vec();
    with_t10.push(("window.t", "10"));
    let t10 = run_with_cache(&config(&canonical, &out, &with_t10), &mut cache).map_err(|e| e.to_string())?;
    let support = t1.y_test.len();
    let mut problems = Vec::new();
    if !(544..=54_420).contains(&support) {
        problems.push(format!("test support {support} not of the order of 5,442"));
    }
    if (t1.report.accuracy - 0.7150).abs() > 0.05 {
        problems.push(format!("T=1 accuracy {:.4} outside 0.7150 ± 0.05", t1.report.accuracy));
    }
    if t10.report.accuracy < t1.report.accuracy + 0.01 {
        problems.push(format!(
            "T=10 accuracy {:.4} does not beat T=1 {:.4} by one point",
            t10.report.accuracy, t1.report.accuracy
        ));
    }
    let summary = format!(
        "support {support}, T=1 accuracy {:.4}, T=10 accuracy {:.4}",
        t1.report.accuracy, t10.report.accuracy
    );
    if problems.is_empty() {
        Ok(summary)
    } else {
        Err(format!(
            "{summary}; {}; differences in the feature set, snapshot sampling or hyperparameters can account for this",
            problems.join("; ")
        ))
    }
}
