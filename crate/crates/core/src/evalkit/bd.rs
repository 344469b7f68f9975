//! Bjontegaard deltas between two rate-quality curves.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Rate-quality points ordered by strictly increasing bpp.
#[derive(Clone, Debug, PartialEq)]
pub struct RDCurve {
    pub label: String,
    points: Vec<(f64, f64)>,
}

impl RDCurve {
    pub fn new(label: impl Into<String>, points: Vec<(f64, f64)>) -> Result<Self> {
        if points.iter().any(|&(r, q)| !(r > 0.0 && r.is_finite() && q.is_finite())) {
            return Err(Error::Format("curve points need finite quality and positive finite bpp".into()));
        }
        if points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Format("curve bpp values must be strictly increasing".into()));
        }
        Ok(Self {
            label: label.into(),
            points,
        })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Same rates, quality shifted by `dq`.
    pub fn offset(&self, dq: f64) -> Self {
        Self {
            label: self.label.clone(),
            points: self.points.iter().map(|&(r, q)| (r, q + dq)).collect(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bpp,quality\n");
        for (r, q) in &self.points {
            s.push_str(&format!("{r},{q}\n"));
        }
        s
    }

    pub fn parse_csv(label: impl Into<String>, text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        if lines.next() != Some("bpp,quality") {
            return Err(Error::Format("curve file must start with `bpp,quality`".into()));
        }
        let points = lines
            .enumerate()
            .map(|(i, l)| {
                let bad = || Error::Format(format!("curve row {}: `{l}`", i + 2));
                let (r, q) = l.split_once(',').ok_or_else(bad)?;
                Ok((r.trim().parse().map_err(|_| bad())?, q.trim().parse().map_err(|_| bad())?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(label, points)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::parse_csv(label, &std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_csv())?)
    }
}

/// Interpolant used for the integrals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BdMethod {
    /// Least-squares cubic polynomial.
    #[default]
    Cubic,
    /// Piecewise cubic Hermite with monotone slopes.
    Pchip,
}

/// Average quality gain of `test` over `anchor` at equal rate.
pub fn bd_quality(anchor: &RDCurve, test: &RDCurve) -> Result<f64> {
    bd_quality_with(anchor, test, BdMethod::Cubic)
}

/// Average rate change of `test` against `anchor` at equal quality, in
/// percent. Negative means `test` needs fewer bits.
pub fn bd_rate(anchor: &RDCurve, test: &RDCurve) -> Result<f64> {
    bd_rate_with(anchor, test, BdMethod::Cubic)
}

pub fn bd_quality_with(anchor: &RDCurve, test: &RDCurve, method: BdMethod) -> Result<f64> {
    let side = |c: &RDCurve| -> Result<Vec<(f64, f64)>> {
        check_curve(c)?;
        Ok(c.points.iter().map(|&(r, q)| (r.log10(), q)).collect())
    };
    mean_gap(&side(anchor)?, &side(test)?, method)
}

pub fn bd_rate_with(anchor: &RDCurve, test: &RDCurve, method: BdMethod) -> Result<f64> {
    let side = |c: &RDCurve| -> Result<Vec<(f64, f64)>> {
        check_curve(c)?;
        let mut pts: Vec<(f64, f64)> = c.points.iter().map(|&(r, q)| (q, r.log10())).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(pts)
    };
    let gap = mean_gap(&side(anchor)?, &side(test)?, method)?;
    Ok((10f64.powf(gap) - 1.0) * 100.0)
}

fn check_curve(c: &RDCurve) -> Result<()> {
    if c.len() < 4 {
        return Err(Error::Config(format!("curve `{}` has {} points; BD needs at least 4", c.label, c.len())));
    }
    let q: Vec<f64> = c.points.iter().map(|p| p.1).collect();
    let up = q.windows(2).all(|w| w[1] > w[0]);
    let down = q.windows(2).all(|w| w[1] < w[0]);
    if !(up || down) {
        log::warn!("curve `{}` is not monotone in quality; proceeding", c.label);
    }
    Ok(())
}

/// `(∫ test − ∫ anchor) / (hi − lo)` over the shared abscissa range.
fn mean_gap(anchor: &[(f64, f64)], test: &[(f64, f64)], method: BdMethod) -> Result<f64> {
    let range = |p: &[(f64, f64)]| {
        p.iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(x, _)| (lo.min(x), hi.max(x)))
    };
    let (a0, a1) = range(anchor);
    let (t0, t1) = range(test);
    let (lo, hi) = (a0.max(t0), a1.min(t1));
    if !(hi > lo) {
        return Err(Error::Config(format!("curves do not overlap: [{a0}, {a1}] vs [{t0}, {t1}]")));
    }
    let integral = |p: &[(f64, f64)]| -> Result<f64> {
        match method {
            BdMethod::Cubic => Ok(poly_integral(&cubic_fit(p)?, lo, hi)),
            BdMethod::Pchip => pchip_integral(p, lo, hi),
        }
    };
    Ok((integral(test)? - integral(anchor)?) / (hi - lo))
}

/// Least-squares coefficients `c0 + c1 x + c2 x² + c3 x³`.
fn cubic_fit(p: &[(f64, f64)]) -> Result<[f64; 4]> {
    let a = DMatrix::from_fn(p.len(), 4, |i, k| p[i].0.powi(k as i32));
    let b = DVector::from_iterator(p.len(), p.iter().map(|q| q.1));
    let c = a
        .svd(true, true)
        .solve(&b, 1e-14)
        .map_err(|e| Error::Numeric(format!("cubic fit failed: {e}")))?;
    Ok([c[0], c[1], c[2], c[3]])
}

fn poly_integral(c: &[f64], lo: f64, hi: f64) -> f64 {
    c.iter()
        .enumerate()
        .map(|(k, ck)| ck * (hi.powi(k as i32 + 1) - lo.powi(k as i32 + 1)) / (k + 1) as f64)
        .sum()
}

/// Fritsch-Carlson slopes at each knot.
fn pchip_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let m: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
    let mut d = vec![0.0; n];
    for k in 1..n - 1 {
        if m[k - 1] * m[k] > 0.0 {
            let (w1, w2) = (2.0 * h[k] + h[k - 1], h[k] + 2.0 * h[k - 1]);
            d[k] = (w1 + w2) / (w1 / m[k - 1] + w2 / m[k]);
        }
    }
    let end = |h0: f64, h1: f64, m0: f64, m1: f64| {
        let s = ((2.0 * h0 + h1) * m0 - h0 * m1) / (h0 + h1);
        if s.signum() != m0.signum() {
            0.0
        } else if m0.signum() != m1.signum() && s.abs() > 3.0 * m0.abs() {
            3.0 * m0
        } else {
            s
        }
    };
    if n == 2 {
        d[0] = m[0];
        d[1] = m[0];
    } else {
        d[0] = end(h[0], h[1], m[0], m[1]);
        d[n - 1] = end(h[n - 2], h[n - 3], m[n - 2], m[n - 3]);
    }
    d
}

fn pchip_integral(p: &[(f64, f64)], lo: f64, hi: f64) -> Result<f64> {
    let x: Vec<f64> = p.iter().map(|q| q.0).collect();
    let y: Vec<f64> = p.iter().map(|q| q.1).collect();
    if x.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("piecewise interpolation needs distinct abscissae".into()));
    }
    let d = pchip_slopes(&x, &y);
    let mut total = 0.0;
    for k in 0..x.len() - 1 {
        let (a, b) = (x[k].max(lo), x[k + 1].min(hi));
        if b <= a {
            continue;
        }
        let h = x[k + 1] - x[k];
        let m = (y[k + 1] - y[k]) / h;
        let c = [
            y[k],
            d[k],
            (3.0 * m - 2.0 * d[k] - d[k + 1]) / h,
            (d[k] + d[k + 1] - 2.0 * m) / (h * h),
        ];
        total += poly_integral(&c, a - x[k], b - x[k]);
    }
    Ok(total)
}
