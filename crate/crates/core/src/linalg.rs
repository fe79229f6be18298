//! Small dense least-squares helpers.

use crate::error::{Error, Result};

/// Weights `w` such that `sum_j w[j] * v[j]` is the value at `at` of the
/// degree-`degree` least-squares polynomial through `(xs[j], v[j])`.
///
/// Solved by Householder QR on abscissae centred at `at` and scaled to
/// `[-1, 1]`; the fitted polynomial (and so the weights) is unchanged by the
/// affine change of variable, only the conditioning improves.
pub(crate) fn poly_eval_weights(xs: &[f64], degree: usize, at: f64) -> Result<Vec<f64>> {
    let m = xs.len();
    let p = degree + 1;
    if m < p {
        return Err(Error::Numeric(format!(
            "{m} points cannot determine a degree-{degree} fit"
        )));
    }
    let scale = xs.iter().map(|x| (x - at).abs()).fold(0.0_f64, f64::max).max(1.0);
    let t: Vec<f64> = xs.iter().map(|x| (x - at) / scale).collect();

    // column-major design matrix, a[l * m + j] = t_j^l
    let mut a = vec![0.0; m * p];
    for (j, &tj) in t.iter().enumerate() {
        let mut pow = 1.0;
        for l in 0..p {
            a[l * m + j] = pow;
            pow *= tj;
        }
    }

    let mut reflectors: Vec<(Vec<f64>, f64)> = Vec::with_capacity(p);
    for k in 0..p {
        let col = &a[k * m + k..(k + 1) * m];
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-13 {
            return Err(Error::Numeric("singular least-squares system".into()));
        }
        let alpha = if col[0] > 0.0 { -norm } else { norm };
        let mut v = col.to_vec();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        for c in k..p {
            let colc = &mut a[c * m + k..(c + 1) * m];
            let s: f64 = v.iter().zip(colc.iter()).map(|(x, y)| x * y).sum();
            let f = 2.0 * s / vnorm2;
            for (y, x) in colc.iter_mut().zip(&v) {
                *y -= f * x;
            }
        }
        reflectors.push((v, vnorm2));
    }

    let r = |i: usize, j: usize| a[j * m + i];
    // Rᵀ u = e0 by forward substitution
    let mut u = vec![0.0; p];
    for i in 0..p {
        let rhs = if i == 0 { 1.0 } else { 0.0 };
        let acc: f64 = (0..i).map(|k| r(k, i) * u[k]).sum();
        u[i] = (rhs - acc) / r(i, i);
    }

    // w = Q [u; 0]
    let mut w = vec![0.0; m];
    w[..p].copy_from_slice(&u);
    for (k, (v, vnorm2)) in reflectors.iter().enumerate().rev() {
        let tail = &mut w[k..];
        let s: f64 = v.iter().zip(tail.iter()).map(|(x, y)| x * y).sum();
        let f = 2.0 * s / vnorm2;
        for (y, x) in tail.iter_mut().zip(v) {
            *y -= f * x;
        }
    }
    Ok(w)
}
