//! Wigner functions on rectangular phase-space grids.
//!
//! Convention: `W(γ) = (2/π) Tr[D(−γ) ρ D(γ) P]`, so the vacuum peaks at
//! `+2/π` and `π ∫ W1 W2 d²γ = Tr[ρ1 ρ2]`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{mhz, PulseEnvelope};
use crate::error::{Error, Result};
use crate::hilbert::{displacement_matrix, working_dim, Representation};
use crate::numerics::{levenberg_marquardt, LmOptions};
use crate::scalar::C64;
use crate::State;

pub const CONVENTION: &str = "W(gamma) = (2/pi) Tr[D(-gamma) rho D(gamma) P]";

/// Largest padded truncation the reference evaluator will build.
pub const MAX_WORKING_DIM: usize = 1024;

/// Closed ranges of `Re γ` and `Im γ` sampled at `nx` and `ny` points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub re_min: f64,
    pub re_max: f64,
    pub im_min: f64,
    pub im_max: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn new(re: (f64, f64), im: (f64, f64), nx: usize, ny: usize) -> Result<Self> {
        let g = Self { re_min: re.0, re_max: re.1, im_min: im.0, im_max: im.1, nx, ny };
        g.validate()?;
        Ok(g)
    }

    /// Square grid `[−h, h]²` with `n × n` points.
    pub fn square(half_width: f64, n: usize) -> Result<Self> {
        Self::new((-half_width, half_width), (-half_width, half_width), n, n)
    }

    /// `±(|α| + 3)` with 101 × 101 points.
    pub fn reference(alpha_abs: f64) -> Self {
        Self::square(alpha_abs + 3.0, 101).expect("valid reference grid")
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.re_min, self.re_max, self.im_min, self.im_max].iter().all(|v| v.is_finite());
        if !finite || self.re_max <= self.re_min || self.im_max <= self.im_min || self.nx < 2 || self.ny < 2 {
            return Err(Error::InvalidInput(format!("degenerate Wigner grid {self:?}")));
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        (self.re_max - self.re_min) / (self.nx - 1) as f64
    }

    pub fn dy(&self) -> f64 {
        (self.im_max - self.im_min) / (self.ny - 1) as f64
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.nx).map(|k| self.re_min + k as f64 * self.dx()).collect()
    }

    pub fn ys(&self) -> Vec<f64> {
        (0..self.ny).map(|k| self.im_min + k as f64 * self.dy()).collect()
    }

    pub fn cell_area(&self) -> f64 {
        self.dx() * self.dy()
    }

    fn max_abs_re(&self) -> f64 {
        self.re_min.abs().max(self.re_max.abs())
    }

    fn max_abs_im(&self) -> f64 {
        self.im_min.abs().max(self.im_max.abs())
    }
}

/// Sampled Wigner function; `values[iy * nx + ix]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WignerGrid {
    pub spec: GridSpec,
    pub values: Vec<f64>,
    pub convention: String,
}

impl WignerGrid {
    pub fn new(spec: GridSpec, values: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if values.len() != spec.nx * spec.ny {
            return Err(Error::GridMismatch(format!("{} values for a {}x{} grid", values.len(), spec.nx, spec.ny)));
        }
        Ok(Self { spec, values, convention: CONVENTION.to_string() })
    }

    pub fn at(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.spec.nx + ix]
    }

    /// `Σ W dA`.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.spec.cell_area()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        same_grid(self, other)?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }

    /// `(γ, W)` triples in storage order.
    pub fn points(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        let xs = self.spec.xs();
        let ys = self.spec.ys();
        self.values.iter().enumerate().map(move |(i, w)| (xs[i % self.spec.nx], ys[i / self.spec.nx], *w))
    }
}

fn same_grid(a: &WignerGrid, b: &WignerGrid) -> Result<()> {
    if a.spec != b.spec {
        return Err(Error::GridMismatch(format!("{:?} vs {:?}", a.spec, b.spec)));
    }
    Ok(())
}

/// Evaluation route for [`wigner_exact_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WignerMethod {
    /// Displaced parity from padded dense displacement operators.
    Reference,
    /// `(2/π) Σ ρ_mn ⟨n|D(2γ)|m⟩ (−1)^m` with recurrence matrix elements.
    Recurrence,
}

/// Spectral components `(sign λ, √|λ| ψ)` of the resonator state.
fn components(rho: &State) -> (Vec<f64>, DMatrix<C64>) {
    let r = rho.reduce_to_resonator();
    match r.representation() {
        Representation::Pure(v) => (vec![1.0], DMatrix::from_column_slice(v.len(), 1, v.as_slice())),
        Representation::Density(m) => {
            let eig = m.clone().symmetric_eigen();
            let keep: Vec<usize> = (0..eig.eigenvalues.len()).filter(|&i| eig.eigenvalues[i].abs() > 1e-15).collect();
            let d = m.nrows();
            let mut cols = DMatrix::zeros(d, keep.len());
            let mut signs = Vec::with_capacity(keep.len());
            for (j, &i) in keep.iter().enumerate() {
                let l = eig.eigenvalues[i];
                signs.push(l.signum());
                cols.set_column(j, &(eig.eigenvectors.column(i) * C64::new(l.abs().sqrt(), 0.0)));
            }
            (signs, cols)
        }
    }
}

/// Working truncation for displacing a `dim`-level state across the grid.
pub fn reference_working_dim(dim: usize, spec: &GridSpec) -> usize {
    working_dim(dim, spec.max_abs_re() + spec.max_abs_im()).max(dim)
}

/// `Σ_n w_n ⟨n|D(−γ) ρ D(γ)|n⟩` over the grid, for a weight `w_n` defined on
/// the padded space.
///
/// `D(−γ) = e^{ixy} D(−x) D(−iy)`, and same-axis displacements compose
/// without phase, so each grid row and column is reached by repeated
/// application of one small step. The phase drops out of populations.
fn displaced_weighted_sum(rho: &State, spec: &GridSpec, weights: &dyn Fn(usize) -> f64) -> Result<Vec<f64>> {
    spec.validate()?;
    let (signs, psi) = components(rho);
    let d = psi.nrows();
    let r = psi.ncols();
    let dw = reference_working_dim(d, spec);
    if dw > MAX_WORKING_DIM {
        return Err(Error::TruncationTooSmall { required: dw, available: MAX_WORKING_DIM });
    }
    let w: Vec<f64> = (0..dw).map(weights).collect();
    let mut padded = DMatrix::<C64>::zeros(dw, r);
    padded.view_mut((0, 0), (d, r)).copy_from(&psi);

    let xs = spec.xs();
    let ys = spec.ys();
    let dx = spec.dx();
    let dy = spec.dy();

    // D(−iy_0) and D(−i dy) acting on the left; D(−x_k) applied first
    let step_x = displacement_matrix(C64::new(-dx, 0.0), dw)?;
    let start_x = displacement_matrix(C64::new(-xs[0], 0.0), dw)?;
    let step_y = displacement_matrix(C64::new(0.0, -dy), dw)?;
    let start_y = displacement_matrix(C64::new(0.0, -ys[0]), dw)?;

    let mut cols: Vec<DMatrix<C64>> = Vec::with_capacity(spec.nx);
    let mut v = &start_x * &padded;
    for k in 0..spec.nx {
        if k > 0 {
            v = &step_x * &v;
        }
        cols.push(v.clone());
    }

    let threads = rayon::current_num_threads().max(1);
    let chunk = spec.nx.div_ceil(threads).max(1);
    let chunks: Vec<(usize, DMatrix<C64>)> = cols
        .chunks(chunk)
        .enumerate()
        .map(|(ci, block)| {
            let mut m = DMatrix::<C64>::zeros(dw, block.len() * r);
            for (j, c) in block.iter().enumerate() {
                m.view_mut((0, j * r), (dw, r)).copy_from(c);
            }
            (ci * chunk, m)
        })
        .collect();

    let partial: Vec<(usize, usize, Vec<f64>)> = chunks
        .into_par_iter()
        .map(|(x0, block)| {
            let nxb = block.ncols() / r;
            let mut out = vec![0.0; nxb * spec.ny];
            let mut cur = &start_y * &block;
            for iy in 0..spec.ny {
                if iy > 0 {
                    cur = &step_y * &cur;
                }
                for jx in 0..nxb {
                    let mut acc = 0.0;
                    for (j, s) in signs.iter().enumerate() {
                        let col = cur.column(jx * r + j);
                        let mut sub = 0.0;
                        for n in 0..dw {
                            sub += w[n] * col[n].norm_sqr();
                        }
                        acc += s * sub;
                    }
                    out[iy * nxb + jx] = acc;
                }
            }
            (x0, nxb, out)
        })
        .collect();

    let mut values = vec![0.0; spec.nx * spec.ny];
    for (x0, nxb, out) in partial {
        for iy in 0..spec.ny {
            for jx in 0..nxb {
                values[iy * spec.nx + x0 + jx] = out[iy * nxb + jx];
            }
        }
    }
    Ok(values)
}

/// `⟨n|D(β)|m⟩` for `n, m < dim` by the ladder recurrences
/// `d_{n+1,0} = β d_{n,0}/√(n+1)` and
/// `d_{n,m+1} = (√n d_{n−1,m} − β* d_{n,m})/√(m+1)`.
pub fn displacement_elements(beta: C64, dim: usize) -> DMatrix<C64> {
    let mut d = DMatrix::<C64>::zeros(dim, dim);
    d[(0, 0)] = C64::new((-0.5 * beta.norm_sqr()).exp(), 0.0);
    for n in 0..dim - 1 {
        d[(n + 1, 0)] = d[(n, 0)] * beta / ((n + 1) as f64).sqrt();
    }
    let bc = beta.conj();
    for m in 0..dim - 1 {
        let s = ((m + 1) as f64).sqrt();
        d[(0, m + 1)] = -bc * d[(0, m)] / s;
        for n in 1..dim {
            d[(n, m + 1)] = ((n as f64).sqrt() * d[(n - 1, m)] - bc * d[(n, m)]) / s;
        }
    }
    d
}

fn wigner_recurrence(rho: &State, spec: &GridSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let r = rho.reduce_to_resonator().density();
    let dim = r.nrows();
    // ρ_mn (−1)^m, transposed for a contiguous inner product with d_{n,m}
    let weighted = DMatrix::from_fn(dim, dim, |n, m| if m % 2 == 0 { r[(m, n)] } else { -r[(m, n)] });
    let xs = spec.xs();
    let ys = spec.ys();
    let values: Vec<f64> = (0..spec.nx * spec.ny)
        .into_par_iter()
        .map(|i| {
            let g = C64::new(xs[i % spec.nx], ys[i / spec.nx]);
            let d = displacement_elements(g * 2.0, dim);
            let s: C64 = d.iter().zip(weighted.iter()).map(|(a, b)| a * b).sum();
            2.0 / PI * s.re
        })
        .collect();
    Ok(values)
}

/// Wigner function by the reference displaced-parity evaluation.
pub fn wigner_exact(rho: &State, spec: &GridSpec) -> Result<WignerGrid> {
    wigner_exact_with(rho, spec, WignerMethod::Reference)
}

pub fn wigner_exact_with(rho: &State, spec: &GridSpec, method: WignerMethod) -> Result<WignerGrid> {
    let values = match method {
        WignerMethod::Reference => {
            let parity = |n: usize| if n % 2 == 0 { 2.0 / PI } else { -2.0 / PI };
            displaced_weighted_sum(rho, spec, &parity)?
        }
        WignerMethod::Recurrence => wigner_recurrence(rho, spec)?,
    };
    WignerGrid::new(*spec, values)
}

/// Ancilla pulses used by the Ramsey parity readout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RamseyPulses {
    /// Instantaneous π/2 rotations separated by a free wait of π/χ.
    Ideal,
    /// Two shaped pulses whose centers are π/χ apart. The envelope fixes
    /// shape and duration; its amplitude is rescaled to a π/2 area.
    Shaped(PulseEnvelope),
}

/// Ramsey parity readout on a qubit driven at its `n = 0` line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RamseyReadout {
    pub chi_mhz: f64,
    pub pulses: RamseyPulses,
}

type M2 = [[C64; 2]; 2];

fn m2_mul(a: &M2, b: &M2) -> M2 {
    let mut c = [[C64::new(0.0, 0.0); 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

fn rx(theta: f64) -> M2 {
    let c = C64::new((0.5 * theta).cos(), 0.0);
    let s = C64::new(0.0, -(0.5 * theta).sin());
    [[c, s], [s, c]]
}

impl RamseyReadout {
    pub fn ideal(chi_mhz: f64) -> Self {
        Self { chi_mhz, pulses: RamseyPulses::Ideal }
    }

    fn wait_ns(&self) -> f64 {
        // π/χ with χ in rad/ns
        PI / mhz(self.chi_mhz)
    }

    /// Excited-state probability after the readout with `n` photons present
    /// (the readout conserves photon number).
    pub fn excited_probability(&self, n: usize) -> Result<f64> {
        let chi = mhz(self.chi_mhz);
        match self.pulses {
            RamseyPulses::Ideal => {
                // |e⟩ acquires e^{+iχnt} in the frame of the n = 0 line
                let phase = C64::from_polar(1.0, chi * n as f64 * self.wait_ns());
                let wait = [[C64::new(1.0, 0.0), C64::new(0.0, 0.0)], [C64::new(0.0, 0.0), phase]];
                let u = m2_mul(&rx(0.5 * PI), &m2_mul(&wait, &rx(0.5 * PI)));
                Ok(u[1][0].norm_sqr())
            }
            RamseyPulses::Shaped(env) => self.shaped_probability(&env, n),
        }
    }

    fn shaped_probability(&self, env: &PulseEnvelope, n: usize) -> Result<f64> {
        let chi = mhz(self.chi_mhz);
        let tp = env.duration_ns;
        let sep = self.wait_ns();
        let total = sep + tp;
        // Ω(t)/2 σx per pulse with ∫Ω = π/2
        let area = env.shape_area_ns();
        if area.abs() < 1e-12 {
            return Err(Error::InvalidInput("readout pulse has zero area".into()));
        }
        let omega0 = 0.5 * PI / area;
        let drive = |t: f64| -> f64 {
            let mut s = 0.0;
            for start in [0.0, sep] {
                let tl = t - start;
                if (0.0..=tp).contains(&tl) {
                    s += env.shape_at(tl);
                }
            }
            omega0 * s
        };
        let det = -chi * n as f64;
        let f = |t: f64, v: [C64; 2]| -> [C64; 2] {
            let half = 0.5 * drive(t);
            let mi = C64::new(0.0, -1.0);
            [mi * (half * v[1]), mi * (half * v[0] + det * v[1])]
        };
        let steps = ((total / (tp.min(sep) / 200.0)).ceil() as usize).max(400);
        let h = total / steps as f64;
        let mut v = [C64::new(1.0, 0.0), C64::new(0.0, 0.0)];
        for k in 0..steps {
            let t = k as f64 * h;
            let add = |a: [C64; 2], b: [C64; 2], s: f64| [a[0] + b[0] * s, a[1] + b[1] * s];
            let k1 = f(t, v);
            let k2 = f(t + 0.5 * h, add(v, k1, 0.5 * h));
            let k3 = f(t + 0.5 * h, add(v, k2, 0.5 * h));
            let k4 = f(t + h, add(v, k3, h));
            for i in 0..2 {
                v[i] += (k1[i] + k2[i] * 2.0 + k3[i] * 2.0 + k4[i]) * (h / 6.0);
            }
        }
        Ok(v[1].norm_sqr())
    }
}

/// Wigner function inferred from the Ramsey readout: for each γ the
/// resonator is displaced by `−γ`, the readout returns `p_e`, and
/// `W = (2/π)(2 p_e − 1)` (vacuum reads `+2/π`).
pub fn wigner_ramsey(rho: &State, readout: &RamseyReadout, spec: &GridSpec) -> Result<WignerGrid> {
    let dim = rho.layout().resonator_dim();
    let dw = reference_working_dim(dim, spec);
    if dw > MAX_WORKING_DIM {
        return Err(Error::TruncationTooSmall { required: dw, available: MAX_WORKING_DIM });
    }
    let pe: Vec<f64> = (0..dw).into_par_iter().map(|n| readout.excited_probability(n)).collect::<Result<_>>()?;
    let weights = |n: usize| 2.0 / PI * (2.0 * pe[n] - 1.0);
    let values = displaced_weighted_sum(rho, spec, &weights)?;
    WignerGrid::new(*spec, values)
}

/// `π Σ W1 W2 ΔA`.
pub fn fidelity_wigner(w_meas: &WignerGrid, w_cal: &WignerGrid) -> Result<f64> {
    same_grid(w_meas, w_cal)?;
    let s: f64 = w_meas.values.iter().zip(&w_cal.values).map(|(a, b)| a * b).sum();
    Ok(PI * s * w_meas.spec.cell_area())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub alpha0: C64,
    pub amplitude: f64,
    pub rms: f64,
}

/// Least-squares fit of `A exp(−2|γ − α0|²)`.
pub fn fit_coherent_gaussian(w: &WignerGrid) -> Result<GaussianFit> {
    let pts: Vec<(f64, f64, f64)> = w.points().collect();
    let (x0, y0, a0) =
        pts.iter().cloned().fold((0.0, 0.0, f64::NEG_INFINITY), |acc, p| if p.2 > acc.2 { p } else { acc });
    if !(a0 > 0.0) {
        return Err(Error::FitDiverged("Wigner grid has no positive peak".into()));
    }
    let residual = |p: &[f64]| -> Result<Vec<f64>> {
        Ok(pts.iter().map(|(x, y, v)| p[0] * (-2.0 * ((x - p[1]).powi(2) + (y - p[2]).powi(2))).exp() - v).collect())
    };
    let rep = levenberg_marquardt(residual, &[a0, x0, y0], LmOptions::default())?;
    if !rep.params.iter().all(|v| v.is_finite()) {
        return Err(Error::FitDiverged("non-finite Gaussian parameters".into()));
    }
    Ok(GaussianFit { alpha0: C64::new(rep.params[1], rep.params[2]), amplitude: rep.params[0], rms: rep.rms() })
}

/// Density-matrix-free helper: amplitudes `⟨n|D(−γ)|ψ⟩` for a pure state,
/// used by tests and diagnostics.
pub fn displaced_amplitudes(psi: &DVector<C64>, gamma: C64, dim: usize) -> Result<DVector<C64>> {
    let mut padded = DVector::zeros(dim);
    padded.rows_mut(0, psi.len()).copy_from(psi);
    Ok(displacement_matrix(-gamma, dim)? * padded)
}
