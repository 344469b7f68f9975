//! Scalar numerics shared by the entropy model and the range coder.

use std::f64::consts::{LN_2, SQRT_2};

/// Lower bound applied to bin probabilities before taking logarithms.
pub const P_MIN: f64 = 1.0 / 65536.0;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Probability mass of `N(mu, sigma²) * U(-½, ½)` at integer `s`, i.e.
/// `Φ((s+½−μ)/σ) − Φ((s−½−μ)/σ)`.
///
/// Evaluated on the lower tail (mirroring through the mean when `s > μ`)
/// so the subtraction never cancels two values close to one.
pub fn gaussian_bin_probability(s: f64, mu: f64, sigma: f64) -> f64 {
    let d = -(s - mu).abs();
    let upper = normal_cdf((d + 0.5) / sigma);
    let lower = normal_cdf((d - 0.5) / sigma);
    (upper - lower).max(0.0)
}

/// Bin probability plus its partial derivatives with respect to the
/// (continuous) symbol value and sigma. The mean derivative is the negated
/// symbol derivative.
pub fn gaussian_bin_with_grads(y: f64, mu: f64, sigma: f64) -> (f64, f64, f64) {
    let d = y - mu;
    let flip = d > 0.0;
    let d = if flip { -d } else { d };
    let a = (d + 0.5) / sigma;
    let b = (d - 0.5) / sigma;
    let p = (normal_cdf(a) - normal_cdf(b)).max(0.0);
    let pa = normal_pdf(a);
    let pb = normal_pdf(b);
    let dp_dd = (pa - pb) / sigma;
    let dp_dsigma = -(a * pa - b * pb) / sigma;
    let dp_dy = if flip { -dp_dd } else { dp_dd };
    (p, dp_dy, dp_dsigma)
}

/// `−log₂ max(p, P_MIN)`.
pub fn bits_of(p: f64) -> f64 {
    -p.max(P_MIN).log2()
}

pub(crate) fn ln2() -> f64 {
    LN_2
}

/// Numerically stable `ln(1 + eˣ)`.
pub fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else if x < -20.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
