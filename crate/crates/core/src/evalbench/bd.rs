//! Bjontegaard delta metrics: fit each curve with a cubic, integrate the
//! gap over the overlapping interval, average.

use super::EvalError;

const MIN_POINTS: usize = 4;

/// Rate-quality operating points, one per QP. Rates are in bits, quality
/// in dB.
#[derive(Debug, Clone, PartialEq)]
pub struct RdCurve {
    pub points: Vec<(f64, f64)>,
}

impl RdCurve {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self, EvalError> {
        for &(r, q) in &points {
            if !(r > 0.0 && r.is_finite()) {
                return Err(EvalError::BadCurve(format!("rate {r} must be positive")));
            }
            if !q.is_finite() {
                return Err(EvalError::BadCurve(format!("quality {q} is not finite")));
            }
        }
        Ok(RdCurve { points })
    }

    fn checked(&self) -> Result<(), EvalError> {
        if self.points.len() < MIN_POINTS {
            return Err(EvalError::InsufficientPoints {
                needed: MIN_POINTS,
                got: self.points.len(),
            });
        }
        Ok(())
    }

    fn log_rates(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.0.log10()).collect()
    }

    fn qualities(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.1).collect()
    }
}

/// Least-squares polynomial in the normalised variable `t = (x - c) / s`.
#[derive(Debug, Clone)]
struct Poly {
    c: f64,
    s: f64,
    /// Ascending powers of `t`.
    coef: Vec<f64>,
}

impl Poly {
    fn fit(xs: &[f64], ys: &[f64]) -> Result<Poly, EvalError> {
        let (lo, hi) = bounds(xs);
        if !(hi > lo) {
            return Err(EvalError::BadCurve("all points share one abscissa".into()));
        }
        let c = 0.5 * (lo + hi);
        let s = 0.5 * (hi - lo);
        let ts: Vec<f64> = xs.iter().map(|x| (x - c) / s).collect();
        let mut distinct = ts.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        let linear = solve_ls(&ts, ys, 1).expect("two distinct abscissae");
        let scale = ys.iter().fold(1.0f64, |m, y| m.max(y.abs()));
        let collinear = ts
            .iter()
            .zip(ys)
            .all(|(t, y)| (eval(&linear, *t) - y).abs() <= 1e-12 * scale);
        let coef = if collinear || distinct.len() < MIN_POINTS {
            linear
        } else {
            solve_ls(&ts, ys, 3).unwrap_or(linear)
        };
        Ok(Poly { c, s, coef })
    }

    /// Exact integral over `[a, b]` in the original variable.
    fn integral(&self, a: f64, b: f64) -> f64 {
        let anti = |x: f64| {
            let t = (x - self.c) / self.s;
            self.coef
                .iter()
                .enumerate()
                .rev()
                .fold(0.0, |acc, (k, &ck)| acc * t + ck / (k + 1) as f64)
                * t
        };
        self.s * (anti(b) - anti(a))
    }
}

fn eval(coef: &[f64], t: f64) -> f64 {
    coef.iter().rev().fold(0.0, |acc, &c| acc * t + c)
}

fn bounds(xs: &[f64]) -> (f64, f64) {
    xs.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// Normal equations with partial pivoting; `None` when singular.
fn solve_ls(ts: &[f64], ys: &[f64], degree: usize) -> Option<Vec<f64>> {
    let n = degree + 1;
    let mut a = vec![vec![0.0; n + 1]; n];
    for (&t, &y) in ts.iter().zip(ys) {
        let pows: Vec<f64> = (0..n).map(|k| t.powi(k as i32)).collect();
        for i in 0..n {
            for j in 0..n {
                a[i][j] += pows[i] * pows[j];
            }
            a[i][n] += pows[i] * y;
        }
    }
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = a[r][col] / a[col][col];
                for k in col..=n {
                    a[r][k] -= f * a[col][k];
                }
            }
        }
    }
    Some((0..n).map(|i| a[i][n] / a[i][i]).collect())
}

/// Mean vertical gap `test - anchor` of the fitted curves over the shared
/// abscissa range.
fn mean_gap(xa: &[f64], ya: &[f64], xt: &[f64], yt: &[f64]) -> Result<f64, EvalError> {
    let (a_lo, a_hi) = bounds(xa);
    let (t_lo, t_hi) = bounds(xt);
    let (lo, hi) = (a_lo.max(t_lo), a_hi.min(t_hi));
    if !(hi > lo) {
        return Err(EvalError::NoOverlap);
    }
    let pa = Poly::fit(xa, ya)?;
    let pt = Poly::fit(xt, yt)?;
    Ok((pt.integral(lo, hi) - pa.integral(lo, hi)) / (hi - lo))
}

/// Average bitrate change of `test` against `anchor` at equal quality, in
/// percent.
pub fn bd_rate(anchor: &RdCurve, test: &RdCurve) -> Result<f64, EvalError> {
    anchor.checked()?;
    test.checked()?;
    let gap = mean_gap(&anchor.qualities(), &anchor.log_rates(), &test.qualities(), &test.log_rates())?;
    Ok((10f64.powf(gap) - 1.0) * 100.0)
}

/// Average quality change of `test` against `anchor` at equal rate, in dB.
pub fn bd_psnr(anchor: &RdCurve, test: &RdCurve) -> Result<f64, EvalError> {
    anchor.checked()?;
    test.checked()?;
    mean_gap(&anchor.log_rates(), &anchor.qualities(), &test.log_rates(), &test.qualities())
}
