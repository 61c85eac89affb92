//! Independent numerical oracles shared by the integration tests.
#![allow(dead_code)]

use pqm::tensor::Matrix;

/// `erf(x)` from the all-positive series
/// `2/√π · e^{-x²} · Σ 2ⁿ x^{2n+1} / (1·3·…·(2n+1))`, summed until the terms
/// vanish. No cancellation, so it is accurate to a few ulps for moderate `x`.
pub fn erf(x: f64) -> f64 {
    if x < 0.0 {
        return -erf(-x);
    }
    if x > 6.0 {
        return 1.0;
    }
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    loop {
        n += 1.0;
        term *= 2.0 * x2 / (2.0 * n + 1.0);
        sum += term;
        if term <= sum * 1e-18 {
            break;
        }
    }
    2.0 / std::f64::consts::PI.sqrt() * (-x2).exp() * sum
}

/// Standard normal CDF.
pub fn phi(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Standard normal quantile by bisection on [`phi`].
pub fn phi_inv(p: f64) -> f64 {
    let (mut lo, mut hi) = (-10.0f64, 10.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if phi(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Row-major f64 copy.
pub fn f64s(m: &Matrix) -> Vec<f64> {
    m.data().iter().map(|&v| v as f64).collect()
}

/// `Σ gy ⊙ (W₀x + s·B·A·x)` in f64, straight-line loops. Its gradient with
/// respect to any argument is what the backward pass returns for `gy`.
#[allow(clippy::too_many_arguments)]
pub fn lora_objective(w0: &[f64], a: &[f64], b: &[f64], x: &[f64], gy: &[f64], d: usize, k: usize, r: usize, n: usize, s: f64) -> f64 {
    let mut total = 0.0;
    for col in 0..n {
        let mut ax = vec![0.0; r];
        for (p, axp) in ax.iter_mut().enumerate() {
            for j in 0..k {
                *axp += a[p * k + j] * x[j * n + col];
            }
        }
        for i in 0..d {
            let mut y = 0.0;
            for j in 0..k {
                y += w0[i * k + j] * x[j * n + col];
            }
            for (p, axp) in ax.iter().enumerate() {
                y += s * b[i * r + p] * axp;
            }
            total += gy[i * n + col] * y;
        }
    }
    total
}

/// Central differences of `eval` at `param` with step `h`.
pub fn central_differences(param: &[f64], h: f64, eval: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = param.to_vec();
    (0..param.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = eval(&p);
            p[i] = orig - h;
            let down = eval(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest absolute difference over the largest reference magnitude.
pub fn rel_err(analytic: &[f32], reference: &[f64]) -> f64 {
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let diff = analytic
        .iter()
        .zip(reference)
        .fold(0.0f64, |m, (&g, &f)| m.max((g as f64 - f).abs()));
    diff / scale
}
