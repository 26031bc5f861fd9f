//! Rotating-frame Hamiltonians, unitary and Lindblad propagation, pulse
//! envelopes.
//!
//! Hamiltonians are returned as `H/ℏ` in rad/ns. Parameters are given in
//! cyclic MHz and converted with [`mhz`].

use std::f64::consts::PI;

use nalgebra::{Complex, ComplexField, DMatrix, DVector};
use num_traits::Zero;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::{annihilation, HilbertLayout, OperatorMatrix, QuantumState, Representation};
use crate::scalar::{expi, lit, to_f64, Real, C64};

/// Cyclic MHz to angular frequency in rad/ns.
#[inline]
pub fn mhz(f: f64) -> f64 {
    2.0 * PI * f * 1e-3
}

/// Parameters of the joint Hamiltonian in the drive frames.
///
/// `H = Δs n + (K/2) n² − χ n q + Δq q + (ε a† + ε* a)`, with `q = b†b`.
/// `chi` is the full qubit line shift per photon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotatingFrameHamiltonian {
    pub layout: HilbertLayout,
    pub detuning_res_mhz: f64,
    pub kerr_mhz: f64,
    pub chi_mhz: f64,
    pub drive_amp_mhz: C64,
    pub qubit_detuning_mhz: f64,
}

impl RotatingFrameHamiltonian {
    pub fn new(layout: HilbertLayout) -> Self {
        Self {
            layout,
            detuning_res_mhz: 0.0,
            kerr_mhz: 0.0,
            chi_mhz: 0.0,
            drive_amp_mhz: C64::zero(),
            qubit_detuning_mhz: 0.0,
        }
    }
}

pub fn assemble_hamiltonian<T: Real>(p: &RotatingFrameHamiltonian) -> OperatorMatrix<T> {
    let ds = mhz(p.detuning_res_mhz);
    let k = mhz(p.kerr_mhz);
    let chi = mhz(p.chi_mhz);
    let dq = mhz(p.qubit_detuning_mhz);
    let mut h = OperatorMatrix::<T>::diagonal(p.layout, |q, n| {
        let (n, q) = (n as f64, q as f64);
        Complex::new(lit(ds * n + 0.5 * k * n * n - chi * n * q + dq * q), T::zero())
    });
    if !p.drive_amp_mhz.is_zero() {
        let eps = Complex::new(lit::<T>(mhz(p.drive_amp_mhz.re)), lit::<T>(mhz(p.drive_amp_mhz.im)));
        let a = annihilation::<T>(p.layout.resonator_dim());
        let block = a.adjoint() * eps + &a * eps.conj();
        let drive = OperatorMatrix::embed_resonator(p.layout, &block).expect("block matches layout");
        h = h.add(&drive).expect("same layout");
    }
    h
}

fn ensure_hermitian<T: Real>(h: &OperatorMatrix<T>) -> Result<()> {
    let scale = to_f64(h.matrix().iter().fold(T::zero(), |a, z| a.max(z.modulus()))).max(1.0);
    let dev = h.hermiticity_deviation();
    if dev > 1e-12 * scale {
        return Err(Error::NonHermitian(dev));
    }
    Ok(())
}

/// `exp(−iHt)`; diagonal Hamiltonians take an elementwise shortcut.
pub fn propagator<T: Real>(h: &OperatorMatrix<T>, t: f64) -> Result<OperatorMatrix<T>> {
    ensure_hermitian(h)?;
    let layout = h.layout();
    if h.is_diagonal() {
        let d = layout.dim();
        let diag = DVector::from_fn(d, |i, _| expi(-h.matrix()[(i, i)].re * lit(t)));
        return OperatorMatrix::new(layout, DMatrix::from_diagonal(&diag));
    }
    let gen = h.matrix() * Complex::new(T::zero(), lit(-t));
    OperatorMatrix::new(layout, crate::hilbert::expm(&gen)?)
}

/// Applies `exp(−iHt)` to a state.
pub fn evolve_unitary<T: Real>(h: &OperatorMatrix<T>, t: f64, state: &QuantumState<T>) -> Result<QuantumState<T>> {
    if t == 0.0 {
        ensure_hermitian(h)?;
        return Ok(state.clone());
    }
    state.apply(&propagator(h, t)?)
}

/// Diagonal `e^{+i(K/2) n² τ}` on the resonator factor.
pub fn kerr_cat_propagator<T: Real>(kerr_mhz: f64, tau_ns: f64, layout: HilbertLayout) -> OperatorMatrix<T> {
    let k = mhz(kerr_mhz);
    OperatorMatrix::diagonal(layout, |_, n| {
        let n = n as f64;
        expi(lit(0.5 * k * n * n * tau_ns))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    /// `L = √κ a`.
    PhotonLoss,
    /// `L = √Γ1 b`.
    QubitDecay,
    /// `L = √(2Γφ) b†b`.
    QubitDephasing,
}

/// Collapse channel with its rate in 1/μs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollapseChannel {
    pub kind: ChannelKind,
    pub rate_per_us: f64,
}

impl CollapseChannel {
    pub fn new(kind: ChannelKind, rate_per_us: f64) -> Result<Self> {
        if !rate_per_us.is_finite() || rate_per_us < 0.0 {
            return Err(Error::InvalidInput(format!("collapse rate {rate_per_us} must be finite and >= 0")));
        }
        Ok(Self { kind, rate_per_us })
    }

    pub fn photon_loss(kappa_per_us: f64) -> Result<Self> {
        Self::new(ChannelKind::PhotonLoss, kappa_per_us)
    }

    fn rate_per_ns(&self) -> f64 {
        self.rate_per_us * 1e-3
    }

    /// Jump operator `L` in units of √(1/ns).
    pub fn operator<T: Real>(&self, layout: HilbertLayout) -> Result<OperatorMatrix<T>> {
        let r = self.rate_per_ns();
        match self.kind {
            ChannelKind::PhotonLoss => {
                let a = annihilation::<T>(layout.resonator_dim()) * Complex::new(lit::<T>(r.sqrt()), T::zero());
                OperatorMatrix::embed_resonator(layout, &a)
            }
            ChannelKind::QubitDecay => {
                Ok(crate::hilbert::qubit_lowering::<T>(layout)?.scale(Complex::new(lit(r.sqrt()), T::zero())))
            }
            ChannelKind::QubitDephasing => {
                layout.ensure_qubit()?;
                let s = (2.0 * r).sqrt();
                Ok(OperatorMatrix::diagonal(layout, |q, _| Complex::new(lit(s * q as f64), T::zero())))
            }
        }
    }

    /// Diagonal of `L†L` in the product basis.
    fn ldag_l(&self, layout: HilbertLayout, q: usize, n: usize) -> f64 {
        let r = self.rate_per_ns();
        let _ = layout;
        match self.kind {
            ChannelKind::PhotonLoss => r * n as f64,
            ChannelKind::QubitDecay => r * q as f64,
            ChannelKind::QubitDephasing => 2.0 * r * q as f64,
        }
    }
}

/// Master-equation right-hand side with the channel structure precomputed.
///
/// With `H_eff = H − (i/2) Σ L†L` and Hermitian ρ, the coherent and
/// anticommutator terms combine into `−i X + i X†` with `X = H_eff ρ`.
#[derive(Debug, Clone)]
pub struct Liouvillian<T: Real> {
    layout: HilbertLayout,
    heff: DMatrix<Complex<T>>,
    heff_diag: Option<DVector<Complex<T>>>,
    channels: Vec<CollapseChannel>,
}

impl<T: Real> Liouvillian<T> {
    pub fn new(h: &OperatorMatrix<T>, channels: &[CollapseChannel]) -> Result<Self> {
        ensure_hermitian(h)?;
        let layout = h.layout();
        for ch in channels {
            if ch.kind != ChannelKind::PhotonLoss {
                layout.ensure_qubit()?;
            }
        }
        let channels: Vec<_> = channels.iter().copied().filter(|c| c.rate_per_us > 0.0).collect();
        let d = layout.resonator_dim();
        let mut heff = h.matrix().clone();
        for q in 0..layout.qubit_levels() {
            for n in 0..d {
                let g: f64 = channels.iter().map(|c| c.ldag_l(layout, q, n)).sum();
                let i = layout.index(q, n);
                heff[(i, i)] -= Complex::new(T::zero(), lit(0.5 * g));
            }
        }
        let heff_diag = if h.is_diagonal() { Some(heff.diagonal()) } else { None };
        Ok(Self { layout, heff, heff_diag, channels })
    }

    pub fn layout(&self) -> HilbertLayout {
        self.layout
    }

    /// `dρ/dt` in 1/ns.
    pub fn rhs(&self, rho: &DMatrix<Complex<T>>) -> DMatrix<Complex<T>> {
        let dim = self.layout.dim();
        let x = match &self.heff_diag {
            Some(h) => DMatrix::from_fn(dim, dim, |i, j| h[i] * rho[(i, j)]),
            None => &self.heff * rho,
        };
        let mi = Complex::new(T::zero(), -T::one());
        let mut out = DMatrix::from_fn(dim, dim, |i, j| mi * x[(i, j)] - mi * x[(j, i)].conj());
        self.add_jumps(rho, &mut out);
        out
    }

    /// Adds `Σ L ρ L†` to `out`.
    fn add_jumps(&self, rho: &DMatrix<Complex<T>>, out: &mut DMatrix<Complex<T>>) {
        let d = self.layout.resonator_dim();
        let ql = self.layout.qubit_levels();
        for ch in &self.channels {
            let r: T = lit(ch.rate_per_ns());
            match ch.kind {
                ChannelKind::PhotonLoss => {
                    for q in 0..ql {
                        for p in 0..ql {
                            for j in 0..d - 1 {
                                for i in 0..d - 1 {
                                    let w = r * lit::<T>(((i + 1) * (j + 1)) as f64).sqrt();
                                    out[(q * d + i, p * d + j)] +=
                                        rho[(q * d + i + 1, p * d + j + 1)] * Complex::new(w, T::zero());
                                }
                            }
                        }
                    }
                }
                ChannelKind::QubitDecay => {
                    for j in 0..d {
                        for i in 0..d {
                            out[(i, j)] += rho[(d + i, d + j)] * Complex::new(r, T::zero());
                        }
                    }
                }
                ChannelKind::QubitDephasing => {
                    let w = Complex::new(r * lit(2.0), T::zero());
                    for j in 0..d {
                        for i in 0..d {
                            out[(d + i, d + j)] += rho[(d + i, d + j)] * w;
                        }
                    }
                }
            }
        }
    }

    fn jumps(&self, rho: &DMatrix<Complex<T>>) -> DMatrix<Complex<T>> {
        let dim = self.layout.dim();
        let mut out = DMatrix::zeros(dim, dim);
        self.add_jumps(rho, &mut out);
        out
    }

    /// One classical RK4 step followed by Hermitian symmetrization.
    pub fn rk4_step(&self, rho: &DMatrix<Complex<T>>, dt: f64) -> DMatrix<Complex<T>> {
        let h: T = lit(dt);
        let half = Complex::new(h / lit(2.0), T::zero());
        let full = Complex::new(h, T::zero());
        let k1 = self.rhs(rho);
        let k2 = self.rhs(&(rho + &k1 * half));
        let k3 = self.rhs(&(rho + &k2 * half));
        let k4 = self.rhs(&(rho + &k3 * full));
        let sixth = Complex::new(h / lit(6.0), T::zero());
        let two = Complex::new(lit::<T>(2.0), T::zero());
        let next = rho + (k1 + k2 * two + k3 * two + k4) * sixth;
        symmetrize(next)
    }

    /// Elementwise `e^{λ_ij t}` with `λ_ij = −i h_i + i h_j*`.
    fn decay_factors(h: &DVector<Complex<T>>, t: f64) -> DMatrix<Complex<T>> {
        let dim = h.len();
        let tt: T = lit(t);
        let mi = Complex::new(T::zero(), -T::one());
        DMatrix::from_fn(dim, dim, |i, j| ((mi * h[i] - mi * h[j].conj()) * Complex::new(tt, T::zero())).exp())
    }

    /// Integrating-factor (Lawson) RK4 step for diagonal `H_eff`: the
    /// diagonal part is propagated exactly and RK4 only sees the jump terms.
    fn lawson_step(
        &self,
        rho: &DMatrix<Complex<T>>,
        dt: f64,
        e_half: &DMatrix<Complex<T>>,
        e_full: &DMatrix<Complex<T>>,
    ) -> DMatrix<Complex<T>> {
        let h = Complex::new(lit::<T>(dt), T::zero());
        let half = h * Complex::new(lit::<T>(0.5), T::zero());
        let k1 = self.jumps(rho);
        let k2 = self.jumps(&(rho + &k1 * half).component_mul(e_half));
        let k3 = self.jumps(&(rho.component_mul(e_half) + &k2 * half));
        let k4 = self.jumps(&(rho.component_mul(e_full) + k3.component_mul(e_half) * h));
        let sixth = h / Complex::new(lit::<T>(6.0), T::zero());
        let third = h / Complex::new(lit::<T>(3.0), T::zero());
        let next = (rho + &k1 * sixth).component_mul(e_full) + (k2 + k3).component_mul(e_half) * third + k4 * sixth;
        symmetrize(next)
    }

    /// `steps` steps of size `dt`: classical RK4 in general, integrating-factor
    /// RK4 when `H_eff` is diagonal.
    pub fn integrate(&self, rho: &DMatrix<Complex<T>>, dt: f64, steps: usize) -> DMatrix<Complex<T>> {
        let mut r = rho.clone();
        match &self.heff_diag {
            Some(hd) => {
                let e_half = Self::decay_factors(hd, 0.5 * dt);
                let e_full = Self::decay_factors(hd, dt);
                for _ in 0..steps {
                    r = self.lawson_step(&r, dt, &e_half, &e_full);
                }
            }
            None => {
                for _ in 0..steps {
                    r = self.rk4_step(&r, dt);
                }
            }
        }
        r
    }
}

fn symmetrize<T: Real>(m: DMatrix<Complex<T>>) -> DMatrix<Complex<T>> {
    (&m + m.adjoint()) * Complex::new(lit::<T>(0.5), T::zero())
}

/// `½ Σ |λ(ρ1 − ρ2)|`.
pub fn trace_distance<T: Real>(r1: &DMatrix<Complex<T>>, r2: &DMatrix<Complex<T>>) -> f64 {
    let diff = r1 - r2;
    let herm = (&diff + diff.adjoint()) * Complex::new(lit::<T>(0.5), T::zero());
    0.5 * herm.symmetric_eigenvalues().iter().map(|l| to_f64(l.abs())).sum::<f64>()
}

/// Tolerance of the step-halving check in trace distance.
pub const HALVING_TOL: f64 = 1e-6;

fn step_count(t: f64, dt: f64) -> Result<usize> {
    if !(t.is_finite() && dt.is_finite()) || t < 0.0 || dt <= 0.0 {
        return Err(Error::InvalidInput(format!("Lindblad time {t} ns / step {dt} ns")));
    }
    Ok((t / dt).ceil().max(1.0) as usize)
}

fn density_of<T: Real>(state: &QuantumState<T>) -> DMatrix<Complex<T>> {
    match state.representation() {
        Representation::Density(r) => r.clone(),
        Representation::Pure(_) => state.density(),
    }
}

/// Fixed-step RK4 Lindblad evolution over `t` ns with step ≤ `dt`, verified
/// against a run at half the step.
pub fn evolve_lindblad<T: Real>(
    h: &OperatorMatrix<T>,
    channels: &[CollapseChannel],
    rho: &QuantumState<T>,
    t: f64,
    dt: f64,
) -> Result<QuantumState<T>> {
    h.layout().ensure_same(&rho.layout())?;
    let lv = Liouvillian::new(h, channels)?;
    let steps = step_count(t, dt)?;
    let r0 = density_of(rho);
    if t == 0.0 {
        return Ok(QuantumState::from_density_unchecked(rho.layout(), r0));
    }
    let h_step = t / steps as f64;
    let coarse = lv.integrate(&r0, h_step, steps);
    let fine = lv.integrate(&r0, h_step / 2.0, 2 * steps);
    let change = trace_distance(&coarse, &fine);
    if !change.is_finite() || change > HALVING_TOL {
        return Err(Error::StepTooLarge { change });
    }
    Ok(QuantumState::from_density_unchecked(rho.layout(), fine))
}

/// Same integrator without the halving check, for inner loops of searches
/// whose final result is re-run through [`evolve_lindblad`].
pub fn evolve_lindblad_unchecked<T: Real>(
    h: &OperatorMatrix<T>,
    channels: &[CollapseChannel],
    rho: &QuantumState<T>,
    t: f64,
    dt: f64,
) -> Result<QuantumState<T>> {
    h.layout().ensure_same(&rho.layout())?;
    let lv = Liouvillian::new(h, channels)?;
    let steps = step_count(t, dt)?;
    let r0 = density_of(rho);
    if t == 0.0 {
        return Ok(QuantumState::from_density_unchecked(rho.layout(), r0));
    }
    let out = lv.integrate(&r0, t / steps as f64, steps);
    Ok(QuantumState::from_density_unchecked(rho.layout(), out))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PulseShape {
    Square,
    Gaussian {
        sigma_ns: f64,
    },
    /// `sin(x)/x` with `x = 2π (t − T/2) / width`; spectrum flat for
    /// `|f| < 1/width`.
    Sinc {
        width_ns: f64,
    },
}

/// Shaped drive; zero outside `[0, duration]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseEnvelope {
    pub shape: PulseShape,
    pub amplitude_mhz: f64,
    pub duration_ns: f64,
    pub carrier_detuning_mhz: f64,
}

impl PulseEnvelope {
    pub fn new(shape: PulseShape, amplitude_mhz: f64, duration_ns: f64, carrier_detuning_mhz: f64) -> Result<Self> {
        if !(duration_ns > 0.0 && duration_ns.is_finite()) {
            return Err(Error::InvalidInput(format!("pulse duration {duration_ns} ns must be > 0")));
        }
        match shape {
            PulseShape::Gaussian { sigma_ns } if !(sigma_ns > 0.0) => {
                return Err(Error::InvalidInput("gaussian sigma must be > 0".into()))
            }
            PulseShape::Sinc { width_ns } if !(width_ns > 0.0) => {
                return Err(Error::InvalidInput("sinc width must be > 0".into()))
            }
            _ => {}
        }
        Ok(Self { shape, amplitude_mhz, duration_ns, carrier_detuning_mhz })
    }

    /// Real shape factor in `[−1, 1]`, peak 1 at the center.
    pub fn shape_at(&self, t: f64) -> f64 {
        let tc = t - 0.5 * self.duration_ns;
        match self.shape {
            PulseShape::Square => 1.0,
            PulseShape::Gaussian { sigma_ns } => (-0.5 * (tc / sigma_ns).powi(2)).exp(),
            PulseShape::Sinc { width_ns } => {
                let x = 2.0 * PI * tc / width_ns;
                if x.abs() < 1e-8 {
                    1.0 - x * x / 6.0
                } else {
                    x.sin() / x
                }
            }
        }
    }

    /// `∫ shape dt` over the window, by composite Simpson on 2000 panels.
    pub fn shape_area_ns(&self) -> f64 {
        if matches!(self.shape, PulseShape::Square) {
            return self.duration_ns;
        }
        let n = 2000;
        let h = self.duration_ns / n as f64;
        let mut s = self.shape_at(0.0) + self.shape_at(self.duration_ns);
        for k in 1..n {
            s += self.shape_at(k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }
}

/// Complex amplitude (MHz) at time `t`: shape × amplitude ×
/// `e^{−i·Δ_carrier·t}`.
pub fn sample_envelope(p: &PulseEnvelope, t: f64) -> Result<C64> {
    if !(0.0..=p.duration_ns).contains(&t) {
        return Err(Error::OutOfWindow { t, duration: p.duration_ns });
    }
    let phase = -mhz(p.carrier_detuning_mhz) * t;
    Ok(C64::from_polar(p.amplitude_mhz * p.shape_at(t), phase))
}

/// Pure-state RK4 integration of `H(t) = H0 + ε(t) A + ε*(t) A†` over the
/// envelope window, with `ε(t)` from [`sample_envelope`] (converted to
/// rad/ns). The output is not renormalized, so its norm drift measures the
/// step error.
pub fn evolve_driven<T: Real>(
    h0: &OperatorMatrix<T>,
    raising: &OperatorMatrix<T>,
    envelope: &PulseEnvelope,
    state: &QuantumState<T>,
    steps: usize,
) -> Result<QuantumState<T>> {
    ensure_hermitian(h0)?;
    h0.layout().ensure_same(&raising.layout())?;
    h0.layout().ensure_same(&state.layout())?;
    let psi0 = state.vector().ok_or_else(|| Error::InvalidState("driven evolution needs a pure state".into()))?.clone();
    let steps = steps.max(1);
    let dt = envelope.duration_ns / steps as f64;
    let h0m = h0.matrix();
    let a_up = raising.matrix();
    let a_dn = a_up.adjoint();
    let eps_at = |t: f64| -> Result<Complex<T>> {
        let e = sample_envelope(envelope, t.clamp(0.0, envelope.duration_ns))?;
        Ok(Complex::new(lit(mhz(e.re)), lit(mhz(e.im))))
    };
    let mi = Complex::new(T::zero(), -T::one());
    let f = |t: f64, v: &DVector<Complex<T>>| -> Result<DVector<Complex<T>>> {
        let e = eps_at(t)?;
        Ok((h0m * v + (a_up * v) * e + (&a_dn * v) * e.conj()) * mi)
    };
    let mut psi = psi0;
    let half = Complex::new(lit::<T>(dt / 2.0), T::zero());
    let full = Complex::new(lit::<T>(dt), T::zero());
    let sixth = Complex::new(lit::<T>(dt / 6.0), T::zero());
    let two = Complex::new(lit::<T>(2.0), T::zero());
    for k in 0..steps {
        let t = k as f64 * dt;
        let k1 = f(t, &psi)?;
        let k2 = f(t + dt / 2.0, &(&psi + &k1 * half))?;
        let k3 = f(t + dt / 2.0, &(&psi + &k2 * half))?;
        let k4 = f(t + dt, &(&psi + &k3 * full))?;
        psi += (k1 + k2 * two + k3 * two + k4) * sixth;
    }
    Ok(QuantumState::from_vector_unchecked(state.layout(), psi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::{fidelity_trace, make_ladder, parity_operator};
    use proptest::prelude::*;
    use rustfft::FftPlanner;
    use std::f64::consts::FRAC_1_SQRT_2;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn res(d: usize) -> HilbertLayout {
        HilbertLayout::resonator(d).unwrap()
    }

    #[test]
    fn zero_parameters_give_zero_matrix() {
        let h = assemble_hamiltonian::<f64>(&RotatingFrameHamiltonian::new(HilbertLayout::with_qubit(6).unwrap()));
        assert_eq!(h.matrix().camax(), 0.0);
    }

    #[test]
    fn undriven_hamiltonian_is_diagonal_with_expected_levels() {
        let l = HilbertLayout::with_qubit(8).unwrap();
        let p = RotatingFrameHamiltonian {
            layout: l,
            detuning_res_mhz: 1.3,
            kerr_mhz: -0.7,
            chi_mhz: 4.35,
            drive_amp_mhz: C64::zero(),
            qubit_detuning_mhz: 2.5,
        };
        let h = assemble_hamiltonian::<f64>(&p);
        assert!(h.is_diagonal());
        for q in 0..2 {
            for n in 0..8 {
                let (nf, qf) = (n as f64, q as f64);
                let want = mhz(1.3 * nf - 0.35 * nf * nf - 4.35 * nf * qf + 2.5 * qf);
                assert!((h.matrix()[(l.index(q, n), l.index(q, n))].re - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn one_photon_moves_qubit_line_down_by_chi() {
        let l = HilbertLayout::with_qubit(4).unwrap();
        let mut p = RotatingFrameHamiltonian::new(l);
        p.chi_mhz = 4.35;
        let h = assemble_hamiltonian::<f64>(&p);
        let e = |q, n| h.matrix()[(l.index(q, n), l.index(q, n))].re / mhz(1.0);
        let f0 = e(1, 0) - e(0, 0);
        let f1 = e(1, 1) - e(0, 1);
        assert!((f0 - f1 - 4.35).abs() < 1e-12);
    }

    #[test]
    fn driven_hamiltonian_is_hermitian() {
        let mut p = RotatingFrameHamiltonian::new(HilbertLayout::with_qubit(10).unwrap());
        p.kerr_mhz = 2.0;
        p.drive_amp_mhz = c(0.3, -1.2);
        let h = assemble_hamiltonian::<f64>(&p);
        assert!(h.hermiticity_deviation() < 1e-12);
    }

    #[test]
    fn evolve_unitary_zero_time_and_non_hermitian() {
        let l = res(6);
        let s = QuantumState::<f64>::fock(l, 2).unwrap();
        let mut p = RotatingFrameHamiltonian::new(l);
        p.drive_amp_mhz = c(1.0, 0.0);
        let h = assemble_hamiltonian::<f64>(&p);
        assert_eq!(evolve_unitary(&h, 0.0, &s).unwrap(), s);
        let (a, _, _) = make_ladder::<f64>(l);
        assert!(matches!(evolve_unitary(&a, 1.0, &s), Err(Error::NonHermitian(_))));
    }

    #[test]
    fn diagonal_evolution_matches_elementwise_phases() {
        let l = res(10);
        let e: Vec<f64> = (0..10).map(|n| 0.01 * (n as f64).powf(1.7) - 0.03 * n as f64).collect();
        let h = OperatorMatrix::diagonal(l, |_, n| c(e[n], 0.0));
        let psi = QuantumState::normalized(l, DVector::from_fn(10, |i, _| c(1.0 + i as f64, 0.5 * i as f64))).unwrap();
        let t = 37.5;
        let out = evolve_unitary(&h, t, &psi).unwrap();
        let v0 = psi.vector().unwrap();
        let v1 = out.vector().unwrap();
        for n in 0..10 {
            assert!((v1[n] - v0[n] * C64::from_polar(1.0, -e[n] * t)).norm() < 1e-10);
        }
        // dense path agrees with the shortcut
        let dense = crate::hilbert::expm(&(h.matrix() * c(0.0, -t))).unwrap();
        assert!((dense * v0 - v1).camax() < 1e-10);
    }

    #[test]
    fn kerr_revival_maps_alpha_to_minus_alpha() {
        let l = res(40);
        let alpha = c(1.42, 0.0);
        let k = 5.21;
        let tau = 1000.0 / k;
        let mut p = RotatingFrameHamiltonian::new(l);
        p.kerr_mhz = k;
        let h = assemble_hamiltonian::<f64>(&p);
        let out = evolve_unitary(&h, tau, &QuantumState::coherent(l, alpha).unwrap()).unwrap();
        let target = QuantumState::coherent(l, -alpha).unwrap();
        assert!(fidelity_trace(&out, &target).unwrap() > 1.0 - 1e-8);
    }

    #[test]
    fn kerr_half_period_gives_two_component_cat() {
        let l = res(40);
        let alpha = c(1.42, 0.0);
        let k = 5.21;
        let tau0 = 1000.0 / k;
        assert!((tau0 - 191.94).abs() < 0.01);
        let u = kerr_cat_propagator::<f64>(k, tau0 / 2.0, l);
        let out = QuantumState::coherent(l, alpha).unwrap().apply(&u).unwrap();
        let plus = QuantumState::coherent(l, alpha).unwrap();
        let minus = QuantumState::coherent(l, -alpha).unwrap();
        let cat = plus.vector().unwrap() - minus.vector().unwrap() * c(0.0, 1.0);
        let cat = QuantumState::normalized(l, cat).unwrap();
        assert!(fidelity_trace(&out, &cat).unwrap() > 1.0 - 1e-8);
        // Fock-phase oracle: even n pick up 1, odd n pick up i
        for n in 0..8 {
            let want = if n % 2 == 0 { c(1.0, 0.0) } else { c(0.0, 1.0) };
            assert!((u.matrix()[(n, n)] - want).norm() < 1e-12);
        }
        assert_eq!(kerr_cat_propagator::<f64>(k, 0.0, l), OperatorMatrix::identity(l));
    }

    #[test]
    fn kerr_propagator_conserves_parity() {
        let l = res(30);
        let s = QuantumState::coherent(l, c(0.9, 1.1)).unwrap();
        let p = parity_operator::<f64>(l);
        let before = s.expectation(&p).unwrap().re;
        let after = s.apply(&kerr_cat_propagator(3.7, 41.0, l)).unwrap().expectation(&p).unwrap().re;
        assert!((before - after).abs() < 1e-10);
        assert!(kerr_cat_propagator::<f64>(3.7, 41.0, l).commutator(&p).unwrap().matrix().camax() < 1e-14);
    }

    #[test]
    fn lindblad_without_channels_matches_unitary() {
        let l = HilbertLayout::with_qubit(14).unwrap();
        let mut p = RotatingFrameHamiltonian::new(l);
        p.kerr_mhz = 1.5;
        p.chi_mhz = 4.0;
        p.drive_amp_mhz = c(0.4, 0.1);
        let h = assemble_hamiltonian::<f64>(&p);
        let s = QuantumState::<f64>::basis(l, 1, 0).unwrap();
        let u = evolve_unitary(&h, 120.0, &s).unwrap();
        let r = evolve_lindblad(&h, &[], &s, 120.0, 0.5).unwrap();
        assert!((r.density() - u.density()).camax() < 1e-7);
    }

    #[test]
    fn photon_loss_keeps_state_coherent() {
        let l = res(30);
        let alpha = c(1.42, 0.0);
        let kappa = 2.0;
        let t = 300.0;
        let h = OperatorMatrix::<f64>::zeros(l);
        let ch = [CollapseChannel::photon_loss(kappa).unwrap()];
        let out = evolve_lindblad(&h, &ch, &QuantumState::coherent(l, alpha).unwrap(), t, 2.0).unwrap();
        let decay = (-kappa * t * 1e-3).exp();
        let nbar = out.mean_photon_number();
        assert!((nbar / (alpha.norm_sqr() * decay) - 1.0).abs() < 1e-4);
        let target = QuantumState::coherent(l, alpha * decay.sqrt()).unwrap();
        assert!(fidelity_trace(&out, &target).unwrap() > 1.0 - 1e-6);
        assert!((out.trace() - 1.0).abs() < 1e-7);
    }

    #[test]
    fn cat_fringes_decay_faster_for_larger_alpha() {
        let kappa = 1.0;
        let t = 100.0;
        let mut losses = Vec::new();
        for a in [1.0, 1.42, 2.0] {
            let l = res(34);
            let plus = QuantumState::coherent(l, c(a, 0.0)).unwrap();
            let minus = QuantumState::coherent(l, c(-a, 0.0)).unwrap();
            let cat = QuantumState::normalized(l, plus.vector().unwrap() + minus.vector().unwrap()).unwrap();
            let h = OperatorMatrix::<f64>::zeros(l);
            let out = evolve_lindblad(&h, &[CollapseChannel::photon_loss(kappa).unwrap()], &cat, t, 2.0).unwrap();
            // W(0) = (2/π)⟨P⟩; exact loss channel keeps the lobes at ±α√η and
            // damps the coherence by e^{-2|α|²(1-η)}
            let contrast = out.parity();
            let eta = (-kappa * t * 1e-3).exp();
            let coh = (-2.0 * a * a * (1.0 - eta)).exp();
            let expected = ((-2.0 * a * a * eta).exp() + coh) / (1.0 + (-2.0 * a * a).exp());
            assert!((contrast - expected).abs() < 1e-4, "alpha {a}: {contrast} vs {expected}");
            losses.push(1.0 - contrast);
        }
        assert!(losses[0] < losses[1] && losses[1] < losses[2]);
    }

    #[test]
    fn step_too_large_is_reported() {
        let l = res(12);
        let mut p = RotatingFrameHamiltonian::new(l);
        p.drive_amp_mhz = c(20.0, 0.0);
        let h = assemble_hamiltonian::<f64>(&p);
        let s = QuantumState::<f64>::fock(l, 0).unwrap();
        let err = evolve_lindblad(&h, &[], &s, 50.0, 10.0).unwrap_err();
        assert!(matches!(err, Error::StepTooLarge { .. }));
    }

    #[test]
    fn rk4_has_fourth_order_convergence() {
        let l = HilbertLayout::with_qubit(4).unwrap();
        let mut p = RotatingFrameHamiltonian::new(l);
        p.kerr_mhz = 3.0;
        p.chi_mhz = 5.0;
        p.drive_amp_mhz = c(4.0, 2.0);
        p.qubit_detuning_mhz = -2.0;
        let h = assemble_hamiltonian::<f64>(&p);
        let chans = [
            CollapseChannel::photon_loss(5.0).unwrap(),
            CollapseChannel::new(ChannelKind::QubitDecay, 3.0).unwrap(),
            CollapseChannel::new(ChannelKind::QubitDephasing, 2.0).unwrap(),
        ];
        let lv = Liouvillian::new(&h, &chans).unwrap();
        let r0 = QuantumState::<f64>::basis(l, 1, 1).unwrap().density();
        let t = 80.0;
        let reference = lv.integrate(&r0, t / 4096.0, 4096);
        let steps = [16usize, 32, 64, 128];
        let errs: Vec<f64> = steps.iter().map(|&n| (lv.integrate(&r0, t / n as f64, n) - &reference).camax()).collect();
        let xs: Vec<f64> = steps.iter().map(|&n| (t / n as f64).ln()).collect();
        let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
        let fit = crate::numerics::linear_fit(&xs, &ys).unwrap();
        assert!((fit.slope - 4.0).abs() < 0.3, "slope {} errs {errs:?}", fit.slope);
    }

    #[test]
    fn integrating_factor_path_matches_fine_rk4() {
        let l = HilbertLayout::with_qubit(20).unwrap();
        let mut p = RotatingFrameHamiltonian::new(l);
        p.kerr_mhz = 5.21;
        p.chi_mhz = 4.35;
        p.qubit_detuning_mhz = 2.0;
        let h = assemble_hamiltonian::<f64>(&p);
        let chans = [
            CollapseChannel::photon_loss(2.0).unwrap(),
            CollapseChannel::new(ChannelKind::QubitDecay, 1.0).unwrap(),
            CollapseChannel::new(ChannelKind::QubitDephasing, 0.5).unwrap(),
        ];
        let lv = Liouvillian::new(&h, &chans).unwrap();
        let res = QuantumState::<f64>::coherent(HilbertLayout::resonator(20).unwrap(), c(1.2, 0.3)).unwrap();
        let s = QuantumState::product(l, [c(FRAC_1_SQRT_2, 0.0), c(0.0, FRAC_1_SQRT_2)], &res).unwrap();
        let r0 = s.density();
        let t = 60.0;
        let fast = lv.integrate(&r0, 0.5, 120);
        let mut slow = r0.clone();
        for _ in 0..12000 {
            slow = lv.rk4_step(&slow, t / 12000.0);
        }
        assert!(trace_distance(&fast, &slow) < 1e-7);
    }

    #[test]
    fn explicit_jump_operators_match_structured_rhs() {
        let l = HilbertLayout::with_qubit(5).unwrap();
        let h = OperatorMatrix::<f64>::zeros(l);
        let chans = [
            CollapseChannel::photon_loss(7.0).unwrap(),
            CollapseChannel::new(ChannelKind::QubitDecay, 3.0).unwrap(),
            CollapseChannel::new(ChannelKind::QubitDephasing, 1.5).unwrap(),
        ];
        let lv = Liouvillian::new(&h, &chans).unwrap();
        let psi =
            QuantumState::normalized(l, DVector::from_fn(10, |i, _| c(0.3 + i as f64, 1.0 - 0.2 * i as f64))).unwrap();
        let rho = psi.density();
        let mut want = DMatrix::<C64>::zeros(10, 10);
        for ch in &chans {
            let lop = ch.operator::<f64>(l).unwrap();
            let lm = lop.matrix();
            let ldl = lm.adjoint() * lm;
            want += lm * &rho * lm.adjoint() - (&ldl * &rho + &rho * &ldl) * c(0.5, 0.0);
        }
        assert!((lv.rhs(&rho) - want).camax() < 1e-15);
    }

    #[test]
    fn envelope_shapes() {
        let sq = PulseEnvelope::new(PulseShape::Square, 2.0, 100.0, 0.0).unwrap();
        for t in [0.0, 13.0, 100.0] {
            assert_eq!(sample_envelope(&sq, t).unwrap(), c(2.0, 0.0));
        }
        let sinc = PulseEnvelope::new(PulseShape::Sinc { width_ns: 12.0 }, 0.7, 48.0, 0.0).unwrap();
        assert!((sample_envelope(&sinc, 24.0).unwrap() - c(0.7, 0.0)).norm() < 1e-15);
        assert!(sample_envelope(&sinc, 30.0).unwrap().norm() < 1e-12);
        assert!(matches!(sample_envelope(&sinc, 48.1), Err(Error::OutOfWindow { .. })));
        let g = PulseEnvelope::new(PulseShape::Gaussian { sigma_ns: 10.0 }, 1.0, 80.0, 0.0).unwrap();
        assert!((sample_envelope(&g, 50.0).unwrap().re - (-0.5f64).exp()).abs() < 1e-15);
        let det = PulseEnvelope::new(PulseShape::Square, 1.0, 100.0, 2.5).unwrap();
        let z = sample_envelope(&det, 100.0).unwrap();
        assert!((z - C64::from_polar(1.0, -mhz(2.5) * 100.0)).norm() < 1e-14);
        assert!(PulseEnvelope::new(PulseShape::Square, 1.0, 0.0, 0.0).is_err());
    }

    fn passband_ripple_db(p: &PulseEnvelope, band_mhz: f64) -> f64 {
        let dt = 0.25;
        let n = 1 << 16;
        let samples = (p.duration_ns / dt).round() as usize;
        let mut buf: Vec<rustfft::num_complex::Complex<f64>> = (0..n)
            .map(|k| {
                if k <= samples {
                    let z = sample_envelope(p, k as f64 * dt).unwrap();
                    rustfft::num_complex::Complex::new(z.re, z.im)
                } else {
                    rustfft::num_complex::Complex::new(0.0, 0.0)
                }
            })
            .collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let df_mhz = 1e3 / (n as f64 * dt);
        let kmax = (band_mhz / df_mhz).floor() as usize;
        let mags: Vec<f64> = (0..=kmax).flat_map(|k| [buf[k].norm(), buf[(n - k) % n].norm()]).collect();
        let hi = mags.iter().cloned().fold(0.0, f64::max);
        let lo = mags.iter().cloned().fold(f64::INFINITY, f64::min);
        20.0 * (hi / lo.max(1e-300)).log10()
    }

    #[test]
    fn sinc_spectrum_is_flat_where_square_is_not() {
        let w = 12.0;
        let sinc = PulseEnvelope::new(PulseShape::Sinc { width_ns: w }, 1.0, 8.0 * w, 0.0).unwrap();
        let square = PulseEnvelope::new(PulseShape::Square, 1.0, 8.0 * w, 0.0).unwrap();
        let band = 0.8 * 1e3 / w;
        let r_sinc = passband_ripple_db(&sinc, band);
        let r_square = passband_ripple_db(&square, band);
        assert!(r_sinc < 3.0, "sinc ripple {r_sinc} dB");
        assert!(r_square > 3.0, "square ripple {r_square} dB");
    }

    #[test]
    fn driven_rk4_matches_exact_square_pulse() {
        let l = res(12);
        let mut p = RotatingFrameHamiltonian::new(l);
        p.kerr_mhz = 1.0;
        p.detuning_res_mhz = 0.5;
        let h0 = assemble_hamiltonian::<f64>(&p);
        let (_, ad, _) = make_ladder::<f64>(l);
        let env = PulseEnvelope::new(PulseShape::Square, 3.0, 60.0, 0.0).unwrap();
        let s = QuantumState::<f64>::fock(l, 0).unwrap();
        let out = evolve_driven(&h0, &ad, &env, &s, 600).unwrap();
        let mut pd = p;
        pd.drive_amp_mhz = c(3.0, 0.0);
        let exact = evolve_unitary(&assemble_hamiltonian(&pd), 60.0, &s).unwrap();
        assert!((out.vector().unwrap() - exact.vector().unwrap()).camax() < 1e-8);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn propagators_unitary_and_composable(
            k in -6.0f64..6.0, chi in 0.0f64..8.0, er in -2.0f64..2.0, ei in -2.0f64..2.0,
            t1 in 0.0f64..80.0, t2 in 0.0f64..80.0,
        ) {
            let l = HilbertLayout::with_qubit(10).unwrap();
            let p = RotatingFrameHamiltonian {
                layout: l, detuning_res_mhz: 0.3, kerr_mhz: k, chi_mhz: chi,
                drive_amp_mhz: c(er, ei), qubit_detuning_mhz: -1.0,
            };
            let h = assemble_hamiltonian::<f64>(&p);
            prop_assert!(h.hermiticity_deviation() < 1e-12);
            let u1 = propagator(&h, t1).unwrap();
            let u2 = propagator(&h, t2).unwrap();
            let u12 = propagator(&h, t1 + t2).unwrap();
            prop_assert!(u12.unitarity_deviation() < 1e-8);
            prop_assert!((u2.compose(&u1).unwrap().matrix() - u12.matrix()).camax() < 1e-9);
        }

        #[test]
        fn lindblad_preserves_trace_hermiticity_and_purity_decreases(
            kappa in 0.1f64..5.0, g1 in 0.0f64..3.0, gphi in 0.0f64..3.0, er in -1.0f64..1.0,
        ) {
            let l = HilbertLayout::with_qubit(6).unwrap();
            let mut p = RotatingFrameHamiltonian::new(l);
            p.kerr_mhz = 2.0;
            p.chi_mhz = 3.0;
            p.drive_amp_mhz = c(er, 0.0);
            let h = assemble_hamiltonian::<f64>(&p);
            let chans = [
                CollapseChannel::photon_loss(kappa).unwrap(),
                CollapseChannel::new(ChannelKind::QubitDecay, g1).unwrap(),
                CollapseChannel::new(ChannelKind::QubitDephasing, gphi).unwrap(),
            ];
            let s0 = QuantumState::<f64>::basis(l, 1, 2).unwrap().to_density();
            let mut s = s0.clone();
            let mut purity = s.purity();
            for _ in 0..4 {
                s = evolve_lindblad(&h, &chans, &s, 25.0, 0.5).unwrap();
                prop_assert!((s.trace() - 1.0).abs() < 1e-7);
                let r = s.density();
                prop_assert!((&r - r.adjoint()).camax() < 1e-7);
                let pn = s.purity();
                prop_assert!(pn <= purity + 1e-9);
                purity = pn;
            }
        }
    }
}
