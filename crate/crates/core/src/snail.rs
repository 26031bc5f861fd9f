//! SNAIL-terminated resonator: potential landscape, effective-mode Taylor
//! expansion, flux-dependent mode parameters and device calibration.
//!
//! Circuit energies are in GHz (`E/h`), flux phases in radians
//! (`φ_ext = 2π Φ_ext/Φ0`). Frequencies are cyclic: `omega_s_ghz` is
//! `ω_s/2π` in GHz, Kerr-type quantities are `/2π` in MHz.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{brent_root, levenberg_marquardt, LmOptions};

/// Dispersive shift versus flux, in MHz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ChiTable {
    Constant(f64),
    /// `(φ_ext/2π, χ)` pairs sorted by flux; linear interpolation, clamped
    /// at the ends.
    Tabulated(Vec<(f64, f64)>),
}

impl ChiTable {
    pub fn validate(&self) -> Result<()> {
        match self {
            ChiTable::Constant(c) if c.is_finite() => Ok(()),
            ChiTable::Constant(c) => Err(Error::InvalidInput(format!("chi {c} MHz"))),
            ChiTable::Tabulated(rows) => {
                if rows.is_empty() {
                    return Err(Error::InvalidInput("empty chi table".into()));
                }
                if rows.iter().any(|(f, c)| !f.is_finite() || !c.is_finite()) {
                    return Err(Error::InvalidInput("non-finite chi table entry".into()));
                }
                if rows.windows(2).any(|w| w[1].0 <= w[0].0) {
                    return Err(Error::InvalidInput("chi table flux column must increase strictly".into()));
                }
                Ok(())
            }
        }
    }

    /// `χ/2π` in MHz at `phi_ext` (radians).
    pub fn at(&self, phi_ext: f64) -> f64 {
        match self {
            ChiTable::Constant(c) => *c,
            ChiTable::Tabulated(rows) => {
                let x = phi_ext / (2.0 * PI);
                let first = rows[0];
                let last = rows[rows.len() - 1];
                if x <= first.0 {
                    return first.1;
                }
                if x >= last.0 {
                    return last.1;
                }
                let k = rows.partition_point(|r| r.0 <= x);
                let (x0, y0) = rows[k - 1];
                let (x1, y1) = rows[k];
                y0 + (y1 - y0) * (x - x0) / (x1 - x0)
            }
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        match self {
            ChiTable::Constant(c) => ChiTable::Constant(c * factor),
            ChiTable::Tabulated(rows) => ChiTable::Tabulated(rows.iter().map(|(f, c)| (*f, c * factor)).collect()),
        }
    }
}

/// Circuit and ancilla parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnailDevice {
    pub beta: f64,
    pub ej_ghz: f64,
    pub el_ghz: f64,
    pub ec_ghz: f64,
    /// Qubit anharmonicity `K_q/2π` in MHz (negative).
    pub kq_mhz: f64,
    /// Qubit frequency `ω_q/2π` in GHz.
    pub omega_q_ghz: f64,
    pub chi: ChiTable,
}

/// Flux of the Kerr-free working point, `0.4026 Φ0`, in radians.
pub const REFERENCE_KERR_FREE_FLUX: f64 = 0.4026 * 2.0 * PI;
/// Resonator frequency at the working point, GHz.
pub const REFERENCE_OMEGA_S0_GHZ: f64 = 4.223;

impl SnailDevice {
    /// β = 0.095, E_J = 830 GHz, χ = 4.35 MHz, K_q = −420 MHz, ω_q = 5.095 GHz,
    /// with E_C and E_L solved from the reference anchors (4.223 GHz and
    /// K = 0 at 0.4026 Φ0).
    pub fn reference() -> Result<Self> {
        let template = Self {
            beta: 0.095,
            ej_ghz: 830.0,
            el_ghz: 950.0,
            ec_ghz: 0.0124,
            kq_mhz: -420.0,
            omega_q_ghz: 5.095,
            chi: ChiTable::Constant(4.35),
        };
        solve_anchors(&template, &Anchors::reference())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::InvalidInput(format!("beta {} not in (0, 1)", self.beta)));
        }
        for (name, v) in [("EJ", self.ej_ghz), ("EL", self.el_ghz), ("EC", self.ec_ghz)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} = {v} GHz must be > 0")));
            }
        }
        if !(self.kq_mhz < 0.0) {
            return Err(Error::InvalidInput(format!("Kq = {} MHz must be negative", self.kq_mhz)));
        }
        self.chi.validate()
    }

    /// Same device with all circuit energies multiplied by `s`.
    pub fn scaled_energies(&self, s: f64) -> Self {
        Self { ej_ghz: self.ej_ghz * s, el_ghz: self.el_ghz * s, ec_ghz: self.ec_ghz * s, ..self.clone() }
    }
}

/// `U(φ) = −βE_J cos φ − 3E_J cos((φ_ext − φ)/3)`.
pub fn snail_potential(phi: f64, phi_ext: f64, dev: &SnailDevice) -> f64 {
    -dev.beta * dev.ej_ghz * phi.cos() - 3.0 * dev.ej_ghz * ((phi_ext - phi) / 3.0).cos()
}

fn snail_d1(phi: f64, phi_ext: f64, dev: &SnailDevice) -> f64 {
    dev.ej_ghz * (dev.beta * phi.sin() - ((phi_ext - phi) / 3.0).sin())
}

fn snail_d2(phi: f64, phi_ext: f64, dev: &SnailDevice) -> f64 {
    dev.ej_ghz * (dev.beta * phi.cos() + ((phi_ext - phi) / 3.0).cos() / 3.0)
}

const SCAN_POINTS: usize = 720;

/// Local minima of the SNAIL potential in `[center − 3π, center + 3π)`.
fn snail_minima(phi_ext: f64, dev: &SnailDevice, center: f64) -> Result<Vec<f64>> {
    let lo = center - 3.0 * PI;
    let step = 6.0 * PI / SCAN_POINTS as f64;
    let mut out = Vec::new();
    let mut x0 = lo;
    let mut g0 = snail_d1(x0, phi_ext, dev);
    for k in 1..=SCAN_POINTS {
        let x1 = lo + k as f64 * step;
        let g1 = snail_d1(x1, phi_ext, dev);
        if g0 < 0.0 && g1 >= 0.0 {
            let r = brent_root(|p| Ok(snail_d1(p, phi_ext, dev)), x0, x1, 1e-15, 0.0, 200)?;
            if r < lo + 6.0 * PI {
                out.push(r);
            }
        }
        x0 = x1;
        g0 = g1;
    }
    Ok(out)
}

fn gradient_tol(dev: &SnailDevice, phi: f64, phi_s: f64) -> f64 {
    let scale = dev.el_ghz * phi.abs().max(phi_s.abs()).max(1.0) + dev.ej_ghz * (1.0 + dev.beta);
    (64.0 * f64::EPSILON * scale).max(1e-10)
}

/// Inner stationarity condition `∂/∂φ_s [½E_L(φ−φ_s)² + U(φ_s)]`.
fn inner_grad(phi_s: f64, phi: f64, phi_ext: f64, dev: &SnailDevice) -> f64 {
    dev.el_ghz * (phi_s - phi) + snail_d1(phi_s, phi_ext, dev)
}

fn inner_energy(phi_s: f64, phi: f64, phi_ext: f64, dev: &SnailDevice) -> f64 {
    0.5 * dev.el_ghz * (phi - phi_s).powi(2) + snail_potential(phi_s, phi_ext, dev)
}

fn inner_newton(phi: f64, phi_ext: f64, dev: &SnailDevice, guess: f64) -> Option<f64> {
    let mut x = guess;
    for _ in 0..60 {
        let g = inner_grad(x, phi, phi_ext, dev);
        let h = dev.el_ghz + snail_d2(x, phi_ext, dev);
        if !(h > 0.0) {
            return None;
        }
        let step = g / h;
        x -= step;
        if step.abs() <= 4.0 * f64::EPSILON * x.abs().max(1.0) {
            break;
        }
    }
    let ok = inner_grad(x, phi, phi_ext, dev).abs() <= gradient_tol(dev, phi, x)
        && dev.el_ghz + snail_d2(x, phi_ext, dev) > 0.0;
    ok.then_some(x)
}

fn inner_global(phi: f64, phi_ext: f64, dev: &SnailDevice) -> Result<f64> {
    // |U'| ≤ E_J(1+β) confines every stationary point to φ ± R
    let r = dev.ej_ghz * (1.0 + dev.beta) / dev.el_ghz + 1e-9;
    let n = ((2.0 * r / 0.01).ceil() as usize).clamp(64, 4000);
    let (lo, hi) = (phi - r, phi + r);
    let step = (hi - lo) / n as f64;
    let mut best: Option<(f64, f64)> = None;
    let mut x0 = lo;
    let mut g0 = inner_grad(x0, phi, phi_ext, dev);
    for k in 1..=n {
        let x1 = lo + k as f64 * step;
        let g1 = inner_grad(x1, phi, phi_ext, dev);
        if g0 <= 0.0 && g1 > 0.0 {
            let root = brent_root(|p| Ok(inner_grad(p, phi, phi_ext, dev)), x0, x1, 1e-15, 0.0, 200)?;
            let root = inner_newton(phi, phi_ext, dev, root).unwrap_or(root);
            let e = inner_energy(root, phi, phi_ext, dev);
            if best.map_or(true, |(_, be)| e < be) {
                best = Some((root, e));
            }
        }
        x0 = x1;
        g0 = g1;
    }
    let (root, _) = best
        .ok_or_else(|| Error::MinimizationFailed(format!("no inner minimum for φ = {phi:.6}, φ_ext = {phi_ext:.6}")))?;
    if inner_grad(root, phi, phi_ext, dev).abs() > gradient_tol(dev, phi, root) {
        return Err(Error::MinimizationFailed(format!("inner gradient not converged at φ = {phi:.6}")));
    }
    Ok(root)
}

/// `min_{φ_s} ½E_L(φ − φ_s)² + U(φ_s)`, searched over the whole bracket of
/// stationary points.
pub fn effective_potential(phi: f64, phi_ext: f64, dev: &SnailDevice) -> Result<f64> {
    let s = inner_global(phi, phi_ext, dev)?;
    Ok(inner_energy(s, phi, phi_ext, dev))
}

/// Continuation form of [`effective_potential`]: Newton from `guess` (the
/// previous φ_s), falling back to the global search. Returns the energy and
/// the inner minimizer.
pub fn effective_potential_from(phi: f64, phi_ext: f64, dev: &SnailDevice, guess: f64) -> Result<(f64, f64)> {
    let s = match inner_newton(phi, phi_ext, dev, guess) {
        Some(s) => s,
        None => inner_global(phi, phi_ext, dev)?,
    };
    Ok((inner_energy(s, phi, phi_ext, dev), s))
}

/// Minimum location and `c_j = U_eff^{(j)}(φ_min)/E_J`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaylorCoefficients {
    pub phi_min: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
}

const RICHARDSON_H0: f64 = 0.2;
const RICHARDSON_LEVELS: usize = 4;
const RICHARDSON_RTOL: f64 = 1e-6;
const RICHARDSON_ATOL: f64 = 1e-8;

/// Richardson table over `h0/2^k`, eliminating the even error terms.
fn richardson(d: &[f64]) -> (f64, f64) {
    let n = d.len();
    let mut t = vec![vec![0.0; n]; n];
    for i in 0..n {
        t[i][0] = d[i];
        for k in 1..=i {
            let f = 4f64.powi(k as i32);
            t[i][k] = t[i][k - 1] + (t[i][k - 1] - t[i - 1][k - 1]) / (f - 1.0);
        }
    }
    let est = t[n - 1][n - 1];
    let spread = (est - t[n - 2][n - 2]).abs();
    (est, spread)
}

/// Locates the potential minimum near `guess` and differentiates the
/// effective potential there.
pub fn taylor_coefficients_near(phi_ext: f64, dev: &SnailDevice, guess: f64) -> Result<TaylorCoefficients> {
    dev.validate()?;
    let minima = snail_minima(phi_ext, dev, guess)?;
    match minima.len() {
        0 => return Err(Error::MinimizationFailed(format!("no potential minimum at φ_ext = {phi_ext:.6}"))),
        1 => {}
        n => return Err(Error::MultipleMinima(n)),
    }
    let phi_min = minima[0];

    let (_, s0) = effective_potential_from(phi_min, phi_ext, dev, phi_min)?;
    // envelope theorem: dU_eff/dφ = E_L (φ − φ_s)
    let grad = dev.el_ghz * (phi_min - s0);
    if grad.abs() > gradient_tol(dev, phi_min, s0) {
        return Err(Error::MinimizationFailed(format!("|dU/dφ| = {grad:.3e} at the located minimum")));
    }

    // energies relative to the minimum, with cosine differences in product
    // form so the ~E_J offset does not cancel
    let half_sin = |a: f64, b: f64| -2.0 * (0.5 * (a + b)).sin() * (0.5 * (a - b)).sin();
    let x0 = (phi_ext - s0) / 3.0;
    let delta = |phi: f64, s: f64| {
        let x = (phi_ext - s) / 3.0;
        0.5 * dev.el_ghz * (phi - s).powi(2)
            - dev.beta * dev.ej_ghz * half_sin(s, s0)
            - 3.0 * dev.ej_ghz * half_sin(x, x0)
    };
    let f0 = delta(phi_min, s0);
    let mut d2 = Vec::with_capacity(RICHARDSON_LEVELS);
    let mut d3 = Vec::with_capacity(RICHARDSON_LEVELS);
    let mut d4 = Vec::with_capacity(RICHARDSON_LEVELS);
    for k in 0..RICHARDSON_LEVELS {
        let h = RICHARDSON_H0 / 2f64.powi(k as i32);
        let f = |x: f64| effective_potential_from(phi_min + x, phi_ext, dev, s0 + x).map(|v| delta(phi_min + x, v.1));
        let (fp1, fm1, fp2, fm2) = (f(h)?, f(-h)?, f(2.0 * h)?, f(-2.0 * h)?);
        d2.push((fp1 - 2.0 * f0 + fm1) / (h * h));
        d3.push((fp2 - 2.0 * fp1 + 2.0 * fm1 - fm2) / (2.0 * h.powi(3)));
        d4.push((fp2 - 4.0 * fp1 + 6.0 * f0 - 4.0 * fm1 + fm2) / h.powi(4));
    }
    let mut c = [0.0; 3];
    for (j, d) in [d2, d3, d4].iter().enumerate() {
        let (est, spread) = richardson(d);
        let est = est / dev.ej_ghz;
        let spread = spread / dev.ej_ghz;
        if !est.is_finite() || spread > RICHARDSON_RTOL * est.abs() + RICHARDSON_ATOL {
            return Err(Error::DerivativeUnstable { order: j + 2, spread });
        }
        c[j] = est;
    }
    Ok(TaylorCoefficients { phi_min, c2: c[0], c3: c[1], c4: c[2] })
}

/// [`taylor_coefficients_near`] with the minimum searched around φ = 0.
pub fn taylor_coefficients(phi_ext: f64, dev: &SnailDevice) -> Result<TaylorCoefficients> {
    taylor_coefficients_near(phi_ext, dev, 0.0)
}

/// Mode parameters at one flux bias.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluxPoint {
    pub phi_ext: f64,
    pub phi_min: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub omega_s_ghz: f64,
    pub g3_mhz: f64,
    pub g4_mhz: f64,
    pub ks_mhz: f64,
    pub kqs_mhz: f64,
    pub k_mhz: f64,
    pub chi_mhz: f64,
}

/// `χ²/(4K_q)`.
pub fn cross_kerr_mhz(chi_mhz: f64, kq_mhz: f64) -> f64 {
    chi_mhz * chi_mhz / (4.0 * kq_mhz)
}

fn flux_point(phi_ext: f64, dev: &SnailDevice, tc: TaylorCoefficients) -> Result<FluxPoint> {
    let TaylorCoefficients { phi_min, c2, c3, c4 } = tc;
    if !(c2 > 0.0) {
        return Err(Error::MinimizationFailed(format!("c2 = {c2:.3e} is not positive at φ_ext = {phi_ext:.6}")));
    }
    let ec = dev.ec_ghz;
    let omega = (8.0 * ec * dev.ej_ghz * c2).sqrt();
    let g3 = c3 * (ec * omega).sqrt() / (6.0 * c2);
    let g4 = c4 * ec / (12.0 * c2);
    let ks = 12.0 * (g4 - 5.0 * g3 * g3 / omega);
    let chi = dev.chi.at(phi_ext);
    let kqs = cross_kerr_mhz(chi, dev.kq_mhz);
    let ks_mhz = ks * 1e3;
    Ok(FluxPoint {
        phi_ext,
        phi_min,
        c2,
        c3,
        c4,
        omega_s_ghz: omega,
        g3_mhz: g3 * 1e3,
        g4_mhz: g4 * 1e3,
        ks_mhz,
        kqs_mhz: kqs,
        k_mhz: ks_mhz + kqs,
        chi_mhz: chi,
    })
}

pub fn mode_parameters(phi_ext: f64, dev: &SnailDevice) -> Result<FluxPoint> {
    flux_point(phi_ext, dev, taylor_coefficients(phi_ext, dev)?)
}

/// Mode parameters at each flux in order, each minimum search centered on
/// the previous `φ_min`.
pub fn sweep(phi_exts: &[f64], dev: &SnailDevice) -> Result<Vec<FluxPoint>> {
    let mut guess = 0.0;
    let mut out = Vec::with_capacity(phi_exts.len());
    for &pe in phi_exts {
        let tc = taylor_coefficients_near(pe, dev, guess)?;
        guess = tc.phi_min;
        out.push(flux_point(pe, dev, tc)?);
    }
    Ok(out)
}

/// Root of `K(φ_ext)` on the bracket (radians, either order), to
/// `|K| < 0.1 kHz`.
pub fn kerr_free_flux(dev: &SnailDevice, bracket: (f64, f64)) -> Result<FluxPoint> {
    let k = |pe: f64| mode_parameters(pe, dev).map(|p| p.k_mhz);
    let root = brent_root(k, bracket.0, bracket.1, 1e-13, 1e-6, 200)?;
    mode_parameters(root, dev)
}

/// Hard calibration anchors: `K = 0` and `ω_s = omega_s0_ghz` at
/// `kerr_free_phi_ext`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchors {
    pub kerr_free_phi_ext: f64,
    pub omega_s0_ghz: f64,
}

impl Anchors {
    pub fn reference() -> Self {
        Self { kerr_free_phi_ext: REFERENCE_KERR_FREE_FLUX, omega_s0_ghz: REFERENCE_OMEGA_S0_GHZ }
    }
}

const ANCHOR_EL_SCAN: (f64, f64, usize) = (-2.0, 1.5, 90);

/// Solves `E_L` and `E_C` so the device meets both anchors, keeping β,
/// `E_J`, χ and `K_q` from `template`.
///
/// `ω_s ∝ √E_C` and `K_s ∝ E_C` at fixed `E_L/E_J`, so for a given `E_C` the
/// Kerr-free condition fixes `E_L/E_J` by a root search, after which the
/// frequency anchor fixes `E_C` in closed form. The `K_qs` offset makes the
/// two weakly coupled; a few alternations converge.
pub fn solve_anchors(template: &SnailDevice, anchors: &Anchors) -> Result<SnailDevice> {
    template.validate()?;
    let base = template.clone();
    let pe = anchors.kerr_free_phi_ext;
    let k_at = |el_ratio: f64, ec: f64| -> Result<f64> {
        let mut d = base.clone();
        d.el_ghz = el_ratio * d.ej_ghz;
        d.ec_ghz = ec;
        mode_parameters(pe, &d).map(|p| p.k_mhz)
    };
    let (lo, hi, n) = ANCHOR_EL_SCAN;
    let mut el_ratio = base.el_ghz / base.ej_ghz;
    let mut ec = base.ec_ghz;
    for _ in 0..12 {
        let mut bracket = None;
        let mut prev: Option<(f64, f64)> = None;
        // prefer the sign change closest to the current ratio
        let mut best_dist = f64::INFINITY;
        for k in 0..=n {
            let x = 10f64.powf(lo + (hi - lo) * k as f64 / n as f64);
            let v = match k_at(x, ec) {
                Ok(v) => v,
                Err(_) => {
                    prev = None;
                    continue;
                }
            };
            if let Some((px, pv)) = prev {
                if pv.signum() != v.signum() {
                    let dist = ((px * x).sqrt().ln() - el_ratio.ln()).abs();
                    if dist < best_dist {
                        best_dist = dist;
                        bracket = Some((px, x));
                    }
                }
            }
            prev = Some((x, v));
        }
        let (a, b) = bracket.ok_or(Error::NoSignChange { lo: 10f64.powf(lo), hi: 10f64.powf(hi) })?;
        let new_el = brent_root(|x| k_at(x, ec), a, b, 1e-14, 0.0, 200)?;
        let mut d = base.clone();
        d.el_ghz = new_el * d.ej_ghz;
        let c2 = taylor_coefficients(pe, &d)?.c2;
        let new_ec = anchors.omega_s0_ghz.powi(2) / (8.0 * d.ej_ghz * c2);
        let converged = (new_el / el_ratio - 1.0).abs() < 1e-12 && (new_ec / ec - 1.0).abs() < 1e-12;
        el_ratio = new_el;
        ec = new_ec;
        if converged {
            break;
        }
    }
    let mut dev = base.clone();
    dev.ec_ghz = ec;
    // polish E_L against the final E_C so K = 0 holds to solver precision
    let el_final = brent_root(|x| k_at(x, ec), el_ratio * (1.0 - 1e-6), el_ratio * (1.0 + 1e-6), 1e-15, 0.0, 200)
        .unwrap_or(el_ratio);
    dev.el_ghz = el_final * dev.ej_ghz;
    Ok(dev)
}

/// Options for [`calibrate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOptions {
    /// Fit `E_J` as well. `ω_s(φ_ext)` depends on `E_C` and `E_J` only
    /// through their product, so this leaves a flat direction.
    pub fit_ej: bool,
    /// Fail with `ReportedWithResidual` above this RMS (GHz).
    pub rms_threshold_ghz: Option<f64>,
    pub max_iter: usize,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self { fit_ej: false, rms_threshold_ghz: None, max_iter: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub device: SnailDevice,
    pub rms_ghz: f64,
    pub residuals_ghz: Vec<f64>,
    pub iterations: usize,
}

/// Least-squares fit of the circuit energies (and β) to `(φ_ext, ω_s/2π)`
/// samples in radians and GHz. With anchors, `E_L` and `E_C` are eliminated
/// by [`solve_anchors`] and only β (and optionally `E_J`) is searched.
pub fn calibrate(
    target_curve: &[(f64, f64)],
    anchors: Option<&Anchors>,
    initial_guess: &SnailDevice,
    opts: &CalibrationOptions,
) -> Result<CalibrationReport> {
    initial_guess.validate()?;
    if target_curve.len() < 4 {
        return Err(Error::InvalidInput(format!("calibration needs >= 4 samples, got {}", target_curve.len())));
    }
    if target_curve.iter().any(|(f, w)| !f.is_finite() || !w.is_finite()) {
        return Err(Error::InvalidInput("non-finite calibration sample".into()));
    }
    let mut curve: Vec<(f64, f64)> = target_curve.to_vec();
    curve.sort_by(|a, b| a.0.total_cmp(&b.0));
    let fluxes: Vec<f64> = curve.iter().map(|c| c.0).collect();

    // parameters are logarithms of the positive circuit quantities
    let build = |p: &[f64]| -> Result<SnailDevice> {
        let mut d = initial_guess.clone();
        let mut it = p.iter();
        d.beta = it.next().expect("beta").exp();
        if opts.fit_ej {
            d.ej_ghz = it.next().expect("ej").exp();
        }
        if let Some(a) = anchors {
            d.validate()?;
            d = solve_anchors(&d, a)?;
        } else {
            d.ec_ghz = it.next().expect("ec").exp();
            d.el_ghz = it.next().expect("el").exp();
        }
        d.validate()?;
        Ok(d)
    };
    let mut x0 = vec![initial_guess.beta.ln()];
    if opts.fit_ej {
        x0.push(initial_guess.ej_ghz.ln());
    }
    if anchors.is_none() {
        x0.push(initial_guess.ec_ghz.ln());
        x0.push(initial_guess.el_ghz.ln());
    }
    let residual = |p: &[f64]| -> Result<Vec<f64>> {
        let d = build(p)?;
        let pts = sweep(&fluxes, &d)?;
        Ok(pts.iter().zip(&curve).map(|(pt, (_, w))| pt.omega_s_ghz - w).collect())
    };
    let lm = LmOptions { max_iter: opts.max_iter, ftol: 1e-16, xtol: 1e-13, initial_damping: 1e-3, diff_step: 1e-7 };
    let rep = levenberg_marquardt(residual, &x0, lm)?;
    let device = build(&rep.params)?;
    let rms = rep.rms();
    if let Some(th) = opts.rms_threshold_ghz {
        if rms > th {
            return Err(Error::ReportedWithResidual { rms, threshold: th });
        }
    }
    Ok(CalibrationReport { device, rms_ghz: rms, residuals_ghz: rep.residuals, iterations: rep.iterations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::OnceLock;

    fn reference() -> &'static SnailDevice {
        static DEV: OnceLock<SnailDevice> = OnceLock::new();
        DEV.get_or_init(|| SnailDevice::reference().unwrap())
    }

    /// Independent oracle: analytic derivatives of the SNAIL potential at its
    /// minimum, combined with the series spring by implicit differentiation of
    /// the inner stationarity condition.
    fn oracle(phi_ext: f64, dev: &SnailDevice) -> (f64, f64, f64, f64) {
        let b = dev.beta;
        let el = dev.el_ghz / dev.ej_ghz;
        // root of β sin φ = sin((φ_ext − φ)/3) near 0 by bisection
        let u1 = |p: f64| b * p.sin() - ((phi_ext - p) / 3.0).sin();
        let (mut lo, mut hi) = (-PI, PI);
        assert!(u1(lo) < 0.0 && u1(hi) > 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if u1(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let p = 0.5 * (lo + hi);
        let x = (phi_ext - p) / 3.0;
        let s2 = b * p.cos() + x.cos() / 3.0;
        let s3 = -b * p.sin() + x.sin() / 9.0;
        let s4 = -b * p.cos() - x.cos() / 27.0;
        let r = el / (el + s2);
        let c2 = el * s2 / (el + s2);
        let c3 = s3 * r.powi(3);
        let c4 = (s4 - 3.0 * s3 * s3 / (el + s2)) * r.powi(4);
        (p, c2, c3, c4)
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-12)
    }

    #[test]
    fn potential_at_origin() {
        let dev = SnailDevice { ec_ghz: 0.01, el_ghz: 900.0, ..reference().clone() };
        assert!((snail_potential(0.0, 0.0, &dev) - (-2568.85)).abs() < 1e-9);
    }

    #[test]
    fn potential_symmetries() {
        let dev = reference();
        for k in 0..50 {
            let phi = -4.0 + 0.17 * k as f64;
            let pe = 0.3 * k as f64 - 5.0;
            let u = snail_potential(phi, pe, dev);
            assert!((u - snail_potential(-phi, -pe, dev)).abs() < 1e-12 * u.abs().max(1.0));
            assert!((u - snail_potential(phi, pe + 6.0 * PI, dev)).abs() < 1e-12 * u.abs().max(1.0));
        }
    }

    #[test]
    fn stiff_spring_limit_recovers_snail_potential() {
        let dev = SnailDevice { el_ghz: 1e6 * 830.0, ..reference().clone() };
        for k in 0..11 {
            let phi = -1.0 + 0.2 * k as f64;
            let pe = 0.3 * 2.0 * PI;
            let u = effective_potential(phi, pe, &dev).unwrap();
            assert!((u - snail_potential(phi, pe, &dev)).abs() < 1e-3);
        }
    }

    #[test]
    fn symmetric_flux_minimum_at_origin() {
        let tc = taylor_coefficients(0.0, reference()).unwrap();
        assert!(tc.phi_min.abs() < 1e-9);
        assert!(tc.c3.abs() < 1e-8);
        let u = |x| effective_potential(x, 0.0, reference()).unwrap();
        assert!(u(1e-3) > u(0.0) && u(-1e-3) > u(0.0));
    }

    #[test]
    fn convex_at_kerr_free_flux() {
        let dev = reference();
        let tc = taylor_coefficients(REFERENCE_KERR_FREE_FLUX, dev).unwrap();
        let h = 1e-3;
        let u = |x| effective_potential(x, REFERENCE_KERR_FREE_FLUX, dev).unwrap();
        let second = u(tc.phi_min + h) - 2.0 * u(tc.phi_min) + u(tc.phi_min - h);
        assert!(second > 0.0);
        let (p, c2, c3, c4) = oracle(REFERENCE_KERR_FREE_FLUX, dev);
        assert!((tc.phi_min - p).abs() < 1e-10);
        assert!(rel(tc.c2, c2) < 1e-5);
        assert!(rel(tc.c3, c3) < 1e-5);
        assert!(rel(tc.c4, c4) < 1e-5);
    }

    #[test]
    fn taylor_coefficients_match_oracle_on_random_fluxes() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let dev = reference();
        for _ in 0..20 {
            let pe = rng.random_range(0.0..PI);
            let tc = taylor_coefficients(pe, dev).unwrap();
            let (_, c2, c3, c4) = oracle(pe, dev);
            assert!(rel(tc.c2, c2) < 1e-5, "c2 at {pe}");
            assert!(rel(tc.c3, c3) < 1e-5 || (tc.c3 - c3).abs() < 1e-8, "c3 at {pe}: {} vs {c3}", tc.c3);
            assert!(rel(tc.c4, c4) < 1e-5, "c4 at {pe}: {} vs {c4}", tc.c4);
        }
    }

    #[test]
    fn cross_kerr_value() {
        let kqs = cross_kerr_mhz(4.35, -420.0);
        assert!((kqs - (-0.011_263)).abs() < 1e-6);
    }

    #[test]
    fn anchored_device_hits_both_anchors() {
        let dev = reference();
        let p = mode_parameters(REFERENCE_KERR_FREE_FLUX, dev).unwrap();
        assert!((p.omega_s_ghz - 4.223).abs() < 1e-3);
        assert!(p.k_mhz.abs() < 1e-4);
        assert!((p.k_mhz - (p.ks_mhz + p.kqs_mhz)).abs() == 0.0);
    }

    #[test]
    fn symmetric_flux_has_no_three_wave_term() {
        let p = mode_parameters(0.0, reference()).unwrap();
        assert!(p.g3_mhz.abs() < 1e-6);
        assert!((p.ks_mhz - 12.0 * p.g4_mhz).abs() < 1e-6);
    }

    #[test]
    fn kerr_free_root_and_bracket_order() {
        let dev = reference();
        let b = (0.35 * 2.0 * PI, 0.45 * 2.0 * PI);
        let r1 = kerr_free_flux(dev, b).unwrap();
        let r2 = kerr_free_flux(dev, (b.1, b.0)).unwrap();
        assert!((r1.phi_ext / (2.0 * PI) - 0.4026).abs() < 0.005);
        assert!(r1.k_mhz.abs() < 1e-4);
        assert!((r1.phi_ext - r2.phi_ext).abs() < 1e-9);
        let err = kerr_free_flux(dev, (0.0, 0.2 * 2.0 * PI)).unwrap_err();
        assert!(matches!(err, Error::NoSignChange { .. }));
    }

    #[test]
    fn larger_chi_moves_root_towards_more_positive_self_kerr() {
        let dev = reference();
        let b = (0.35 * 2.0 * PI, 0.45 * 2.0 * PI);
        let base = kerr_free_flux(dev, b).unwrap();
        let shifted_dev = SnailDevice { chi: dev.chi.scaled(1.1), ..dev.clone() };
        let shifted = kerr_free_flux(&shifted_dev, b).unwrap();
        assert!(shifted.ks_mhz > base.ks_mhz);
        // dense sweep: K_s grows with flux across the bracket, so the root moves up
        let grid: Vec<f64> = (0..=20).map(|k| b.0 + (b.1 - b.0) * k as f64 / 20.0).collect();
        let pts = sweep(&grid, dev).unwrap();
        assert!(pts.windows(2).all(|w| w[1].ks_mhz > w[0].ks_mhz));
        assert!(shifted.phi_ext > base.phi_ext);
    }

    #[test]
    fn kerr_is_continuous_near_working_point() {
        let dev = reference();
        let grid: Vec<f64> = (0..=40).map(|k| (0.39 + 0.001 * k as f64) * 2.0 * PI).collect();
        let pts = sweep(&grid, dev).unwrap();
        for w in pts.windows(2) {
            assert!((w[1].k_mhz - w[0].k_mhz).abs() < 0.2);
        }
        assert!(pts.iter().all(|p| p.c2 > 0.0));
    }

    #[test]
    fn scaling_energies_scales_frequency_only() {
        let dev = reference();
        let s = 1.7;
        let big = dev.scaled_energies(s);
        for pe in [0.0, 1.1, REFERENCE_KERR_FREE_FLUX, 3.0] {
            let a = mode_parameters(pe, dev).unwrap();
            let b = mode_parameters(pe, &big).unwrap();
            assert!(rel(b.omega_s_ghz, s * a.omega_s_ghz) < 1e-9);
            assert!(rel(b.c2, a.c2) < 1e-7);
            assert!((b.c3 - a.c3).abs() < 1e-7 * a.c3.abs().max(1e-3));
            assert!(rel(b.c4, a.c4) < 1e-7);
        }
    }

    #[test]
    fn multiple_minima_are_rejected() {
        let dev = SnailDevice { beta: 0.9, ..reference().clone() };
        let err = taylor_coefficients(PI, &dev).unwrap_err();
        assert!(matches!(err, Error::MultipleMinima(_)), "{err:?}");
    }

    #[test]
    fn chi_table_interpolates_and_clamps() {
        let t = ChiTable::Tabulated(vec![(0.0, 18.0), (0.4, 4.0), (0.5, 3.5)]);
        t.validate().unwrap();
        assert_eq!(t.at(-1.0), 18.0);
        assert!((t.at(0.2 * 2.0 * PI) - 11.0).abs() < 1e-12);
        assert_eq!(t.at(10.0), 3.5);
        assert!(ChiTable::Tabulated(vec![(0.1, 1.0), (0.1, 2.0)]).validate().is_err());
    }

    #[test]
    fn calibration_recovers_synthetic_device() {
        let truth = reference().clone();
        let fluxes: Vec<f64> = (0..8).map(|k| (0.05 + 0.06 * k as f64) * 2.0 * PI).collect();
        let pts = sweep(&fluxes, &truth).unwrap();
        let curve: Vec<(f64, f64)> = pts.iter().map(|p| (p.phi_ext, p.omega_s_ghz)).collect();
        let guess = SnailDevice {
            beta: truth.beta * 1.05,
            ec_ghz: truth.ec_ghz * 0.95,
            el_ghz: truth.el_ghz * 1.04,
            ..truth.clone()
        };
        let rep = calibrate(&curve, None, &guess, &CalibrationOptions::default()).unwrap();
        assert!(rel(rep.device.beta, truth.beta) < 1e-3, "{:?}", rep.device);
        assert!(rel(rep.device.ec_ghz, truth.ec_ghz) < 1e-3);
        assert!(rel(rep.device.el_ghz, truth.el_ghz) < 1e-3);
        assert!(rep.rms_ghz < 1e-6);
    }

    #[test]
    fn calibration_threshold_and_sample_count() {
        let dev = reference();
        let few = [(0.1, 5.0), (0.2, 4.9), (0.3, 4.8)];
        assert!(matches!(calibrate(&few, None, dev, &CalibrationOptions::default()), Err(Error::InvalidInput(_))));
        // a curve the model cannot follow
        let curve: Vec<(f64, f64)> = (0..6).map(|k| (0.5 * k as f64, 4.0 + 0.3 * (k % 2) as f64)).collect();
        let opts = CalibrationOptions { rms_threshold_ghz: Some(1e-3), max_iter: 30, ..Default::default() };
        assert!(matches!(calibrate(&curve, None, dev, &opts), Err(Error::ReportedWithResidual { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn curvature_positive_across_sweep(x in 0.0f64..0.5) {
            let p = mode_parameters(x * 2.0 * PI, reference()).unwrap();
            prop_assert!(p.c2 > 0.0);
            prop_assert!(p.omega_s_ghz > 0.0);
        }
    }
}
