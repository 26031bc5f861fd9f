//! Small scalar solvers shared by the calibration routines: bracketed root
//! finding, bounded one-dimensional minimization, damped Gauss–Newton
//! (Levenberg–Marquardt) least squares and ordinary linear regression.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Brent's bracketed root finder on `[a, b]`.
///
/// The bracket may be given in either order. Stops when the bracket is
/// narrower than `xtol` or `|f| <= ftol`.
pub fn brent_root<F>(mut f: F, a: f64, b: f64, xtol: f64, ftol: f64, max_iter: usize) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    let (mut a, mut b) = (a, b);
    let mut fa = f(a)?;
    let mut fb = f(b)?;
    if !fa.is_finite() || !fb.is_finite() {
        return Err(Error::NonFinite);
    }
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if fa.signum() == fb.signum() {
        return Err(Error::NoSignChange { lo: a.min(b), hi: a.max(b) });
    }
    let (mut c, mut fc) = (a, fa);
    let mut d = b - a;
    let mut e = d;
    for _ in 0..max_iter {
        if fb.signum() == fc.signum() {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol = 2.0 * f64::EPSILON * b.abs() + 0.5 * xtol;
        let m = 0.5 * (c - b);
        if m.abs() <= tol || fb.abs() <= ftol {
            return Ok(b);
        }
        if e.abs() >= tol && fa.abs() > fb.abs() {
            // inverse quadratic interpolation, or secant when a == c
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * m * s;
                q = 1.0 - s;
            } else {
                let qa = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * m * qa * (qa - r) - (b - a) * (r - 1.0));
                q = (qa - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            } else {
                p = -p;
            }
            if 2.0 * p < (3.0 * m * q - (tol * q).abs()).min((e * q).abs()) {
                e = d;
                d = p / q;
            } else {
                d = m;
                e = m;
            }
        } else {
            d = m;
            e = m;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol { d } else { tol.copysign(m) };
        fb = f(b)?;
        if !fb.is_finite() {
            return Err(Error::NonFinite);
        }
    }
    Ok(b)
}

/// Result of a bounded scalar minimization.
#[derive(Debug, Clone, Copy)]
pub struct Minimum {
    pub x: f64,
    pub value: f64,
    pub evaluations: usize,
}

/// Brent's minimizer (golden section with parabolic steps) on `[a, b]`.
pub fn brent_minimize<F>(mut f: F, a: f64, b: f64, xtol: f64, max_iter: usize) -> Result<Minimum>
where
    F: FnMut(f64) -> Result<f64>,
{
    const GOLD: f64 = 0.381_966_011_250_105_1;
    let (mut a, mut b) = if a < b { (a, b) } else { (b, a) };
    let mut x = a + GOLD * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = f(x)?;
    let (mut fw, mut fv) = (fx, fx);
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    let mut evaluations = 1;
    for _ in 0..max_iter {
        let xm = 0.5 * (a + b);
        let tol1 = xtol + 1e-12 * x.abs();
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let etemp = e;
            e = d;
            if p.abs() < (0.5 * q * etemp).abs() && p > q * (a - x) && p < q * (b - x) {
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = tol1.copysign(xm - x);
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= xm { a - x } else { b - x };
            d = GOLD * e;
        }
        let u = if d.abs() >= tol1 { x + d } else { x + tol1.copysign(d) };
        let fu = f(u)?;
        evaluations += 1;
        if !fu.is_finite() {
            return Err(Error::NonFinite);
        }
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    Ok(Minimum { x, value: fx, evaluations })
}

/// Options for [`levenberg_marquardt`].
#[derive(Debug, Clone, Copy)]
pub struct LmOptions {
    pub max_iter: usize,
    /// Relative cost reduction below which the fit is considered converged.
    pub ftol: f64,
    /// Relative parameter step below which the fit is considered converged.
    pub xtol: f64,
    pub initial_damping: f64,
    /// Relative step for the central-difference Jacobian.
    pub diff_step: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self { max_iter: 200, ftol: 1e-14, xtol: 1e-12, initial_damping: 1e-3, diff_step: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct LmReport {
    pub params: Vec<f64>,
    pub residuals: Vec<f64>,
    pub initial_cost: f64,
    /// Sum of squared residuals at the solution.
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl LmReport {
    pub fn rms(&self) -> f64 {
        if self.residuals.is_empty() {
            0.0
        } else {
            (self.cost / self.residuals.len() as f64).sqrt()
        }
    }
}

fn sum_sq(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

/// Damped Gauss–Newton least squares with a central-difference Jacobian.
///
/// `residual` maps a parameter vector to the residual vector; errors it
/// returns are treated as rejected steps during the search and propagated
/// only at the starting point.
pub fn levenberg_marquardt<F>(mut residual: F, x0: &[f64], opts: LmOptions) -> Result<LmReport>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut r = residual(&x)?;
    let m = r.len();
    if m < n {
        return Err(Error::InvalidInput(format!("{m} residuals for {n} parameters")));
    }
    let mut cost = sum_sq(&r);
    if !cost.is_finite() {
        return Err(Error::FitDiverged("non-finite residual at the initial guess".into()));
    }
    let initial_cost = cost;
    let mut lambda = opts.initial_damping;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        let mut jac = DMatrix::<f64>::zeros(m, n);
        for j in 0..n {
            let h = opts.diff_step * x[j].abs().max(1.0);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let rp = residual(&xp)?;
            let rm = residual(&xm)?;
            for i in 0..m {
                jac[(i, j)] = (rp[i] - rm[i]) / (2.0 * h);
            }
        }
        let rv = DVector::from_column_slice(&r);
        let jtj = jac.transpose() * &jac;
        let grad = jac.transpose() * &rv;
        if grad.amax() <= 1e-300 {
            converged = true;
            break;
        }

        let mut accepted = false;
        for _ in 0..40 {
            let mut a = jtj.clone();
            for k in 0..n {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let step = match a.cholesky() {
                Some(ch) => ch.solve(&(-&grad)),
                None => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let xn: Vec<f64> = x.iter().zip(step.iter()).map(|(xi, si)| xi + si).collect();
            match residual(&xn) {
                Ok(rn) => {
                    let cn = sum_sq(&rn);
                    if cn.is_finite() && cn < cost {
                        let rel_cost = (cost - cn) / cost.max(f64::MIN_POSITIVE);
                        let rel_step =
                            step.iter().zip(xn.iter()).map(|(s, xi)| s.abs() / xi.abs().max(1e-12)).fold(0.0, f64::max);
                        x = xn;
                        r = rn;
                        cost = cn;
                        lambda = (lambda / 3.0).max(1e-15);
                        accepted = true;
                        if rel_cost < opts.ftol || rel_step < opts.xtol {
                            converged = true;
                        }
                        break;
                    }
                    lambda *= 4.0;
                }
                Err(_) => lambda *= 4.0,
            }
        }
        if !accepted {
            // no descent direction left at the current damping: treat as converged
            converged = true;
            break;
        }
        if converged || cost == 0.0 {
            converged = true;
            break;
        }
    }

    if !(cost < initial_cost || initial_cost == 0.0 || converged) {
        return Err(Error::FitDiverged(format!(
            "cost {cost:.4e} not reduced from {initial_cost:.4e} after {iterations} iterations"
        )));
    }
    Ok(LmReport { params: x, residuals: r, initial_cost, cost, iterations, converged })
}

/// Ordinary least-squares line `y = slope * x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub slope_stderr: f64,
    pub intercept_stderr: f64,
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    let n = x.len();
    if n != y.len() || n < 2 {
        return Err(Error::InvalidInput(format!("linear fit needs >= 2 paired points, got {n}/{}", y.len())));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidInput("linear fit with zero spread in x".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - slope * a - intercept).powi(2)).sum();
    let r_squared = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    let (slope_stderr, intercept_stderr) = if n > 2 {
        let s2 = sse / (nf - 2.0);
        let se_slope = (s2 / sxx).sqrt();
        let se_int = (s2 * (1.0 / nf + mx * mx / sxx)).sqrt();
        (se_slope, se_int)
    } else {
        (0.0, 0.0)
    };
    Ok(LinearFit { slope, intercept, r_squared, slope_stderr, intercept_stderr })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn root_of_cubic_independent_of_bracket_order() {
        let f = |x: f64| Ok(x * x * x - 2.0 * x - 5.0);
        let r1 = brent_root(f, 2.0, 3.0, 1e-14, 0.0, 200).unwrap();
        let r2 = brent_root(f, 3.0, 2.0, 1e-14, 0.0, 200).unwrap();
        assert!((r1 - 2.094_551_481_542_326_5).abs() < 1e-12);
        assert!((r1 - r2).abs() < 1e-12);
    }

    #[test]
    fn root_requires_sign_change() {
        let err = brent_root(|x| Ok(x * x + 1.0), -1.0, 1.0, 1e-12, 0.0, 100).unwrap_err();
        assert!(matches!(err, Error::NoSignChange { .. }));
    }

    #[test]
    fn minimize_shifted_parabola() {
        let m = brent_minimize(|x| Ok((x - 0.3).powi(2) + 1.0), -2.0, 5.0, 1e-10, 200).unwrap();
        assert!((m.x - 0.3).abs() < 1e-8);
        assert!((m.value - 1.0).abs() < 1e-14);
    }

    #[test]
    fn lm_recovers_exponential_decay() {
        let ts: Vec<f64> = (0..20).map(|i| i as f64 * 0.25).collect();
        let ys: Vec<f64> = ts.iter().map(|t| 2.5 * (-0.7 * t).exp()).collect();
        let rep = levenberg_marquardt(
            |p| Ok(ts.iter().zip(&ys).map(|(t, y)| p[0] * (-p[1] * t).exp() - y).collect()),
            &[1.0, 0.2],
            LmOptions::default(),
        )
        .unwrap();
        assert!((rep.params[0] - 2.5).abs() < 1e-8);
        assert!((rep.params[1] - 0.7).abs() < 1e-8);
        assert!(rep.rms() < 1e-9);
    }

    #[test]
    fn linear_fit_exact_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y = [1.0, 3.0, 5.0, 7.0];
        let fit = linear_fit(&x, &y).unwrap();
        assert!((fit.slope - 2.0).abs() < 1e-14);
        assert!((fit.intercept - 1.0).abs() < 1e-14);
        assert!((fit.r_squared - 1.0).abs() < 1e-14);
    }
}
