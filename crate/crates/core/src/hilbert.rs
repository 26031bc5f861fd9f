//! Truncated Fock-space linear algebra.
//!
//! States and operators live on `qubit ⊗ resonator` with the qubit index
//! major: basis index `q * D + n`. A layout with `qubit_levels == 1` is a
//! bare resonator.

use std::fmt;

use nalgebra::{Complex, ComplexField, DMatrix, DVector};
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, to_f64, tolerance, Real};

/// Dimension bookkeeping for the joint space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HilbertLayout {
    resonator_dim: usize,
    qubit_levels: usize,
}

impl HilbertLayout {
    pub fn new(resonator_dim: usize, qubit_levels: usize) -> Result<Self> {
        if resonator_dim < 2 {
            return Err(Error::InvalidLayout(format!("resonator_dim {resonator_dim} < 2")));
        }
        if !(1..=2).contains(&qubit_levels) {
            return Err(Error::InvalidLayout(format!("qubit_levels {qubit_levels} not in {{1, 2}}")));
        }
        Ok(Self { resonator_dim, qubit_levels })
    }

    pub fn resonator(resonator_dim: usize) -> Result<Self> {
        Self::new(resonator_dim, 1)
    }

    pub fn with_qubit(resonator_dim: usize) -> Result<Self> {
        Self::new(resonator_dim, 2)
    }

    pub fn resonator_dim(&self) -> usize {
        self.resonator_dim
    }

    pub fn qubit_levels(&self) -> usize {
        self.qubit_levels
    }

    pub fn has_qubit(&self) -> bool {
        self.qubit_levels == 2
    }

    pub fn dim(&self) -> usize {
        self.qubit_levels * self.resonator_dim
    }

    /// Basis index of `|q⟩ ⊗ |n⟩`.
    pub fn index(&self, q: usize, n: usize) -> usize {
        q * self.resonator_dim + n
    }

    /// Same truncation without the qubit factor.
    pub fn resonator_only(&self) -> Self {
        Self { resonator_dim: self.resonator_dim, qubit_levels: 1 }
    }

    /// Same qubit factor with a different truncation.
    pub fn with_resonator_dim(&self, resonator_dim: usize) -> Result<Self> {
        Self::new(resonator_dim, self.qubit_levels)
    }

    pub(crate) fn ensure_same(&self, other: &Self) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::LayoutMismatch { left: self.to_string(), right: other.to_string() })
        }
    }

    pub(crate) fn ensure_qubit(&self) -> Result<()> {
        if self.has_qubit() {
            Ok(())
        } else {
            Err(Error::InvalidLayout("operation needs a two-level ancilla".into()))
        }
    }
}

impl fmt::Display for HilbertLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.has_qubit() {
            write!(f, "qubit(2) x fock({})", self.resonator_dim)
        } else {
            write!(f, "fock({})", self.resonator_dim)
        }
    }
}

/// Smallest truncation the displacement guard accepts for `|alpha|`.
pub fn required_dim(alpha_abs: f64) -> usize {
    (alpha_abs * alpha_abs + 6.0 * alpha_abs + 10.0).ceil() as usize
}

/// Truncation needed to displace a state supported on `n < support` by `r`
/// while keeping the displaced tail below the guard level.
pub fn working_dim(support: usize, r: f64) -> usize {
    let reach = (support as f64).sqrt() + r;
    (reach * reach + 6.0 * reach + 10.0).ceil() as usize
}

fn check_guard(alpha_abs: f64, dim: usize) -> Result<()> {
    let required = required_dim(alpha_abs);
    if required > dim {
        Err(Error::TruncationTooSmall { required, available: dim })
    } else {
        Ok(())
    }
}

fn max_abs<T: Real>(m: &DMatrix<Complex<T>>) -> T {
    m.iter().fold(T::zero(), |acc, z| acc.max(z.modulus()))
}

fn all_finite<T: Real>(m: &DMatrix<Complex<T>>) -> bool {
    m.iter().all(|z| to_f64(z.re).is_finite() && to_f64(z.im).is_finite())
}

/// Dense operator on a declared layout.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorMatrix<T: Real> {
    layout: HilbertLayout,
    matrix: DMatrix<Complex<T>>,
}

impl<T: Real> OperatorMatrix<T> {
    pub fn new(layout: HilbertLayout, matrix: DMatrix<Complex<T>>) -> Result<Self> {
        let d = layout.dim();
        if matrix.nrows() != d || matrix.ncols() != d {
            return Err(Error::InvalidLayout(format!(
                "{}x{} matrix for layout {layout} of dimension {d}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        Ok(Self { layout, matrix })
    }

    /// Like [`OperatorMatrix::new`] but additionally asserts `U†U = I`
    /// within `tol`.
    pub fn new_unitary(layout: HilbertLayout, matrix: DMatrix<Complex<T>>, tol: f64) -> Result<Self> {
        let op = Self::new(layout, matrix)?;
        let dev = op.unitarity_deviation();
        if dev > tol {
            return Err(Error::NonUnitary(dev));
        }
        Ok(op)
    }

    pub fn identity(layout: HilbertLayout) -> Self {
        Self { layout, matrix: DMatrix::identity(layout.dim(), layout.dim()) }
    }

    pub fn zeros(layout: HilbertLayout) -> Self {
        Self { layout, matrix: DMatrix::zeros(layout.dim(), layout.dim()) }
    }

    /// Diagonal operator `f(q, n)` in the product Fock basis.
    pub fn diagonal(layout: HilbertLayout, f: impl Fn(usize, usize) -> Complex<T>) -> Self {
        let d = layout.resonator_dim();
        let mut diag = DVector::zeros(layout.dim());
        for q in 0..layout.qubit_levels() {
            for n in 0..d {
                diag[q * d + n] = f(q, n);
            }
        }
        Self { layout, matrix: DMatrix::from_diagonal(&diag) }
    }

    /// `I_qubit ⊗ A` for a resonator-space matrix `A`.
    pub fn embed_resonator(layout: HilbertLayout, a: &DMatrix<Complex<T>>) -> Result<Self> {
        let d = layout.resonator_dim();
        if a.nrows() != d || a.ncols() != d {
            return Err(Error::InvalidLayout(format!("resonator block {}x{} vs D = {d}", a.nrows(), a.ncols())));
        }
        let id_q = DMatrix::<Complex<T>>::identity(layout.qubit_levels(), layout.qubit_levels());
        Ok(Self { layout, matrix: id_q.kronecker(a) })
    }

    /// `Q ⊗ I_resonator` for a 2x2 qubit matrix `Q`.
    pub fn embed_qubit(layout: HilbertLayout, q: &DMatrix<Complex<T>>) -> Result<Self> {
        layout.ensure_qubit()?;
        if q.nrows() != 2 || q.ncols() != 2 {
            return Err(Error::InvalidLayout("qubit block must be 2x2".into()));
        }
        let id_r = DMatrix::<Complex<T>>::identity(layout.resonator_dim(), layout.resonator_dim());
        Ok(Self { layout, matrix: q.kronecker(&id_r) })
    }

    pub fn layout(&self) -> HilbertLayout {
        self.layout
    }

    pub fn matrix(&self) -> &DMatrix<Complex<T>> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<Complex<T>> {
        self.matrix
    }

    pub fn dagger(&self) -> Self {
        Self { layout: self.layout, matrix: self.matrix.adjoint() }
    }

    pub fn compose(&self, rhs: &Self) -> Result<Self> {
        self.layout.ensure_same(&rhs.layout)?;
        Ok(Self { layout: self.layout, matrix: &self.matrix * &rhs.matrix })
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.layout.ensure_same(&rhs.layout)?;
        Ok(Self { layout: self.layout, matrix: &self.matrix + &rhs.matrix })
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.layout.ensure_same(&rhs.layout)?;
        Ok(Self { layout: self.layout, matrix: &self.matrix - &rhs.matrix })
    }

    pub fn scale(&self, c: Complex<T>) -> Self {
        Self { layout: self.layout, matrix: &self.matrix * c }
    }

    /// `[self, rhs]`.
    pub fn commutator(&self, rhs: &Self) -> Result<Self> {
        self.layout.ensure_same(&rhs.layout)?;
        Ok(Self { layout: self.layout, matrix: &self.matrix * &rhs.matrix - &rhs.matrix * &self.matrix })
    }

    /// `max |H - H†|`.
    pub fn hermiticity_deviation(&self) -> f64 {
        to_f64(max_abs(&(&self.matrix - self.matrix.adjoint())))
    }

    /// `max |U†U - I|`.
    pub fn unitarity_deviation(&self) -> f64 {
        let d = self.layout.dim();
        let g = self.matrix.adjoint() * &self.matrix - DMatrix::<Complex<T>>::identity(d, d);
        to_f64(max_abs(&g))
    }

    pub fn is_diagonal(&self) -> bool {
        let d = self.layout.dim();
        (0..d).all(|j| (0..d).all(|i| i == j || self.matrix[(i, j)].is_zero()))
    }

    /// Resonator block `⟨q, ·|O|q, ·⟩`.
    pub fn resonator_block(&self, q: usize) -> DMatrix<Complex<T>> {
        let d = self.layout.resonator_dim();
        self.matrix.view((q * d, q * d), (d, d)).into_owned()
    }

    pub fn apply_vector(&self, v: &DVector<Complex<T>>) -> DVector<Complex<T>> {
        &self.matrix * v
    }
}

/// Pure-vector or density-matrix representation.
#[derive(Debug, Clone, PartialEq)]
pub enum Representation<T: Real> {
    Pure(DVector<Complex<T>>),
    Density(DMatrix<Complex<T>>),
}

/// Validated state on a layout.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantumState<T: Real> {
    layout: HilbertLayout,
    repr: Representation<T>,
}

const STATE_TOL: f64 = 1e-9;
const EIGEN_TOL: f64 = 1e-8;

impl<T: Real> QuantumState<T> {
    /// Pure state; the vector must have unit norm within 1e-9.
    pub fn from_vector(layout: HilbertLayout, v: DVector<Complex<T>>) -> Result<Self> {
        if v.len() != layout.dim() {
            return Err(Error::InvalidState(format!("vector length {} for layout {layout}", v.len())));
        }
        if v.iter().any(|z| !to_f64(z.re).is_finite() || !to_f64(z.im).is_finite()) {
            return Err(Error::NonFinite);
        }
        let norm = v.norm();
        if (norm - T::one()).abs() > tolerance::<T>(STATE_TOL) {
            return Err(Error::InvalidState(format!("norm {} differs from 1", to_f64(norm))));
        }
        Ok(Self { layout, repr: Representation::Pure(v) })
    }

    /// Pure state from any nonzero vector, rescaled to unit norm.
    pub fn normalized(layout: HilbertLayout, v: DVector<Complex<T>>) -> Result<Self> {
        let norm = v.norm();
        if norm.is_zero() || !to_f64(norm).is_finite() {
            return Err(Error::InvalidState("cannot normalize a zero or non-finite vector".into()));
        }
        Self::from_vector(layout, v.unscale(norm))
    }

    /// Density matrix; checked for Hermiticity, unit trace and positivity.
    pub fn from_density(layout: HilbertLayout, rho: DMatrix<Complex<T>>) -> Result<Self> {
        let d = layout.dim();
        if rho.nrows() != d || rho.ncols() != d {
            return Err(Error::InvalidState(format!("{}x{} density for layout {layout}", rho.nrows(), rho.ncols())));
        }
        if !all_finite(&rho) {
            return Err(Error::NonFinite);
        }
        let herm = max_abs(&(&rho - rho.adjoint()));
        if herm > tolerance::<T>(STATE_TOL) {
            return Err(Error::InvalidState(format!("density not Hermitian (deviation {:.3e})", to_f64(herm))));
        }
        let tr = rho.trace();
        if (tr.re - T::one()).abs() > tolerance::<T>(STATE_TOL) || tr.im.abs() > tolerance::<T>(STATE_TOL) {
            return Err(Error::InvalidState(format!("trace {} differs from 1", to_f64(tr.re))));
        }
        let sym = (&rho + rho.adjoint()) * Complex::new(lit::<T>(0.5), T::zero());
        let min_eig = sym.symmetric_eigenvalues().iter().fold(T::max_value().unwrap_or(T::one()), |a, &b| a.min(b));
        if min_eig < -tolerance::<T>(EIGEN_TOL) {
            return Err(Error::InvalidState(format!("negative eigenvalue {:.3e}", to_f64(min_eig))));
        }
        Ok(Self { layout, repr: Representation::Density(rho) })
    }

    /// Density matrix accepted as-is; for propagator outputs whose drift is
    /// bounded by the integrator's own checks.
    pub(crate) fn from_density_unchecked(layout: HilbertLayout, rho: DMatrix<Complex<T>>) -> Self {
        Self { layout, repr: Representation::Density(rho) }
    }

    pub(crate) fn from_vector_unchecked(layout: HilbertLayout, v: DVector<Complex<T>>) -> Self {
        Self { layout, repr: Representation::Pure(v) }
    }

    /// `|q⟩ ⊗ |n⟩` (qubit index ignored for resonator-only layouts).
    pub fn basis(layout: HilbertLayout, q: usize, n: usize) -> Result<Self> {
        if n >= layout.resonator_dim() || q >= layout.qubit_levels() {
            return Err(Error::InvalidState(format!("basis state |{q},{n}⟩ outside {layout}")));
        }
        let mut v = DVector::zeros(layout.dim());
        v[layout.index(q, n)] = Complex::one();
        Ok(Self { layout, repr: Representation::Pure(v) })
    }

    /// Fock state `|n⟩` with the qubit (if any) in `|g⟩`.
    pub fn fock(layout: HilbertLayout, n: usize) -> Result<Self> {
        Self::basis(layout, 0, n)
    }

    /// Coherent state `|α⟩` (qubit in `|g⟩`), from the analytic Fock
    /// amplitudes `e^{-|α|²/2} αⁿ/√n!`. Subject to the displacement guard.
    pub fn coherent(layout: HilbertLayout, alpha: Complex<T>) -> Result<Self> {
        check_guard(to_f64(alpha.modulus()), layout.resonator_dim())?;
        let amps = coherent_amplitudes(alpha, layout.resonator_dim());
        let mut v = DVector::zeros(layout.dim());
        v.rows_mut(0, layout.resonator_dim()).copy_from(&amps);
        Self::normalized(layout, v)
    }

    /// `(c_g|g⟩ + c_e|e⟩) ⊗ |ψ⟩` for a resonator-only pure state `ψ`.
    pub fn product(layout: HilbertLayout, qubit: [Complex<T>; 2], resonator: &Self) -> Result<Self> {
        layout.ensure_qubit()?;
        layout.resonator_only().ensure_same(&resonator.layout)?;
        let psi =
            resonator.vector().ok_or_else(|| Error::InvalidState("product needs a pure resonator state".into()))?;
        let d = layout.resonator_dim();
        let mut v = DVector::zeros(layout.dim());
        for (q, c) in qubit.iter().enumerate() {
            v.rows_mut(q * d, d).copy_from(&(psi * *c));
        }
        Self::normalized(layout, v)
    }

    pub fn layout(&self) -> HilbertLayout {
        self.layout
    }

    pub fn representation(&self) -> &Representation<T> {
        &self.repr
    }

    pub fn is_pure_vector(&self) -> bool {
        matches!(self.repr, Representation::Pure(_))
    }

    pub fn vector(&self) -> Option<&DVector<Complex<T>>> {
        match &self.repr {
            Representation::Pure(v) => Some(v),
            Representation::Density(_) => None,
        }
    }

    pub fn density(&self) -> DMatrix<Complex<T>> {
        match &self.repr {
            Representation::Pure(v) => v * v.adjoint(),
            Representation::Density(r) => r.clone(),
        }
    }

    pub fn to_density(&self) -> Self {
        Self { layout: self.layout, repr: Representation::Density(self.density()) }
    }

    pub fn trace(&self) -> T {
        match &self.repr {
            Representation::Pure(v) => v.norm_squared(),
            Representation::Density(r) => r.trace().re,
        }
    }

    pub fn purity(&self) -> T {
        match &self.repr {
            Representation::Pure(v) => {
                let n = v.norm_squared();
                n * n
            }
            Representation::Density(r) => r.iter().fold(T::zero(), |acc, z| acc + z.modulus_squared()),
        }
    }

    /// `⟨O⟩`.
    pub fn expectation(&self, op: &OperatorMatrix<T>) -> Result<Complex<T>> {
        self.layout.ensure_same(&op.layout)?;
        Ok(match &self.repr {
            Representation::Pure(v) => v.dotc(&(&op.matrix * v)),
            Representation::Density(r) => (&op.matrix * r).trace(),
        })
    }

    /// `U|ψ⟩` or `UρU†`.
    pub fn apply(&self, op: &OperatorMatrix<T>) -> Result<Self> {
        self.layout.ensure_same(&op.layout)?;
        Ok(Self {
            layout: self.layout,
            repr: match &self.repr {
                Representation::Pure(v) => Representation::Pure(&op.matrix * v),
                Representation::Density(r) => Representation::Density(&op.matrix * r * op.matrix.adjoint()),
            },
        })
    }

    /// Resonator photon-number distribution `P(n)`, summed over the qubit.
    pub fn photon_distribution(&self) -> Vec<T> {
        let d = self.layout.resonator_dim();
        let mut p = vec![T::zero(); d];
        for q in 0..self.layout.qubit_levels() {
            for (n, pn) in p.iter_mut().enumerate() {
                let i = q * d + n;
                *pn += match &self.repr {
                    Representation::Pure(v) => v[i].modulus_squared(),
                    Representation::Density(r) => r[(i, i)].re,
                };
            }
        }
        p
    }

    pub fn mean_photon_number(&self) -> T {
        self.photon_distribution().iter().enumerate().fold(T::zero(), |acc, (n, p)| acc + lit::<T>(n as f64) * *p)
    }

    /// `⟨(-1)^{a†a}⟩`.
    pub fn parity(&self) -> T {
        self.photon_distribution()
            .iter()
            .enumerate()
            .fold(T::zero(), |acc, (n, p)| if n % 2 == 0 { acc + *p } else { acc - *p })
    }

    /// Traces out the qubit; resonator-only layouts are returned unchanged.
    pub fn reduce_to_resonator(&self) -> Self {
        if !self.layout.has_qubit() {
            return self.clone();
        }
        let d = self.layout.resonator_dim();
        let rho = self.density();
        let mut red = DMatrix::zeros(d, d);
        for q in 0..2 {
            red += rho.view((q * d, q * d), (d, d));
        }
        Self { layout: self.layout.resonator_only(), repr: Representation::Density(red) }
    }

    /// Projects the qubit on `|q⟩`; returns the outcome probability and the
    /// normalized conditional resonator state.
    pub fn project_qubit(&self, q: usize) -> Result<(T, Self)> {
        self.layout.ensure_qubit()?;
        if q > 1 {
            return Err(Error::InvalidInput(format!("qubit level {q}")));
        }
        let d = self.layout.resonator_dim();
        let res = self.layout.resonator_only();
        match &self.repr {
            Representation::Pure(v) => {
                let block = v.rows(q * d, d).into_owned();
                let p = block.norm_squared();
                if p <= T::default_epsilon() {
                    return Err(Error::InvalidState(format!("qubit outcome {q} has zero probability")));
                }
                Ok((p, Self { layout: res, repr: Representation::Pure(block.unscale(p.sqrt())) }))
            }
            Representation::Density(r) => {
                let block = r.view((q * d, q * d), (d, d)).into_owned();
                let p = block.trace().re;
                if p <= T::default_epsilon() {
                    return Err(Error::InvalidState(format!("qubit outcome {q} has zero probability")));
                }
                Ok((p, Self { layout: res, repr: Representation::Density(block.unscale(p)) }))
            }
        }
    }

    /// Resonator-only state placed in a qubit layout with the qubit in `|q⟩`.
    pub fn with_qubit_level(&self, q: usize) -> Result<Self> {
        if self.layout.has_qubit() {
            return Err(Error::InvalidLayout("state already carries a qubit".into()));
        }
        let d = self.layout.resonator_dim();
        let layout = HilbertLayout::with_qubit(d)?;
        Ok(Self {
            layout,
            repr: match &self.repr {
                Representation::Pure(v) => {
                    let mut w = DVector::zeros(2 * d);
                    w.rows_mut(q * d, d).copy_from(v);
                    Representation::Pure(w)
                }
                Representation::Density(r) => {
                    let mut w = DMatrix::zeros(2 * d, 2 * d);
                    w.view_mut((q * d, q * d), (d, d)).copy_from(r);
                    Representation::Density(w)
                }
            },
        })
    }

    /// Re-expresses the state with a larger resonator truncation
    /// (zero-padding each qubit block).
    pub fn padded(&self, resonator_dim: usize) -> Result<Self> {
        let d = self.layout.resonator_dim();
        if resonator_dim < d {
            return Err(Error::InvalidLayout(format!("cannot pad D = {d} down to {resonator_dim}")));
        }
        let layout = self.layout.with_resonator_dim(resonator_dim)?;
        let ql = self.layout.qubit_levels();
        Ok(Self {
            layout,
            repr: match &self.repr {
                Representation::Pure(v) => {
                    let mut w = DVector::zeros(layout.dim());
                    for q in 0..ql {
                        w.rows_mut(q * resonator_dim, d).copy_from(&v.rows(q * d, d));
                    }
                    Representation::Pure(w)
                }
                Representation::Density(r) => {
                    let mut w = DMatrix::zeros(layout.dim(), layout.dim());
                    for q in 0..ql {
                        for p in 0..ql {
                            w.view_mut((q * resonator_dim, p * resonator_dim), (d, d))
                                .copy_from(&r.view((q * d, p * d), (d, d)));
                        }
                    }
                    Representation::Density(w)
                }
            },
        })
    }
}

/// `Tr[ρ1 ρ2]`, with pure states promoted to projectors.
pub fn fidelity_trace<T: Real>(s1: &QuantumState<T>, s2: &QuantumState<T>) -> Result<T> {
    s1.layout.ensure_same(&s2.layout)?;
    let f = match (&s1.repr, &s2.repr) {
        (Representation::Pure(a), Representation::Pure(b)) => a.dotc(b).modulus_squared(),
        (Representation::Pure(a), Representation::Density(r))
        | (Representation::Density(r), Representation::Pure(a)) => a.dotc(&(r * a)).re,
        (Representation::Density(r1), Representation::Density(r2)) => {
            // Tr[AB] = Σ_ij A_ij B_ji
            let mut acc = T::zero();
            for j in 0..r1.ncols() {
                for i in 0..r1.nrows() {
                    acc += (r1[(i, j)] * r2[(j, i)]).re;
                }
            }
            acc
        }
    };
    Ok(f)
}

/// Analytic coherent-state amplitudes `e^{-|α|²/2} αⁿ/√n!` for `n < dim`.
pub fn coherent_amplitudes<T: Real>(alpha: Complex<T>, dim: usize) -> DVector<Complex<T>> {
    let mut v = DVector::zeros(dim);
    let mut c = Complex::new((-alpha.modulus_squared() / lit(2.0)).exp(), T::zero());
    for n in 0..dim {
        v[n] = c;
        c = c * alpha / Complex::new(lit::<T>((n + 1) as f64).sqrt(), T::zero());
    }
    v
}

/// Resonator annihilation operator on `D` levels.
pub fn annihilation<T: Real>(dim: usize) -> DMatrix<Complex<T>> {
    let mut a = DMatrix::zeros(dim, dim);
    for n in 1..dim {
        a[(n - 1, n)] = Complex::new(lit::<T>(n as f64).sqrt(), T::zero());
    }
    a
}

/// `(a, a†, a†a)` embedded in the layout.
pub fn make_ladder<T: Real>(layout: HilbertLayout) -> (OperatorMatrix<T>, OperatorMatrix<T>, OperatorMatrix<T>) {
    let a = annihilation::<T>(layout.resonator_dim());
    let a_op = OperatorMatrix::embed_resonator(layout, &a).expect("block matches layout");
    let ad_op = a_op.dagger();
    let num = OperatorMatrix::diagonal(layout, |_, n| Complex::new(lit(n as f64), T::zero()));
    (a_op, ad_op, num)
}

/// Qubit lowering operator `b = |g⟩⟨e|` embedded in the layout.
pub fn qubit_lowering<T: Real>(layout: HilbertLayout) -> Result<OperatorMatrix<T>> {
    let mut b = DMatrix::zeros(2, 2);
    b[(0, 1)] = Complex::one();
    OperatorMatrix::embed_qubit(layout, &b)
}

/// `exp(-i θ/2 (cos φ σx + sin φ σy))` on the qubit, as a 2x2 matrix.
pub fn qubit_rotation_matrix<T: Real>(theta: T, phase: T) -> DMatrix<Complex<T>> {
    let half = theta / lit(2.0);
    let c = Complex::new(half.cos(), T::zero());
    let s = half.sin();
    // -i s e^{∓iφ}
    let off_01 = Complex::new(-s * phase.sin(), -s * phase.cos());
    let off_10 = Complex::new(s * phase.sin(), -s * phase.cos());
    DMatrix::from_row_slice(2, 2, &[c, off_01, off_10, c])
}

/// Qubit rotation by `theta` about the equatorial axis at angle `phase`
/// from x, identity on the resonator.
pub fn qubit_rotation<T: Real>(layout: HilbertLayout, theta: T, phase: T) -> Result<OperatorMatrix<T>> {
    OperatorMatrix::embed_qubit(layout, &qubit_rotation_matrix(theta, phase))
}

/// Resonator-space `exp(α a† − α* a)` on `dim` levels, without the
/// truncation guard. Callers are responsible for padding.
pub fn displacement_matrix<T: Real>(alpha: Complex<T>, dim: usize) -> Result<DMatrix<Complex<T>>> {
    let a = annihilation::<T>(dim);
    let gen = a.adjoint() * alpha - &a * alpha.conj();
    expm(&gen)
}

/// `D(α)` on the layout, guarded by `D ≥ |α|² + 6|α| + 10`.
pub fn displacement<T: Real>(alpha: Complex<T>, layout: HilbertLayout) -> Result<OperatorMatrix<T>> {
    check_guard(to_f64(alpha.modulus()), layout.resonator_dim())?;
    let m = displacement_matrix(alpha, layout.resonator_dim())?;
    OperatorMatrix::embed_resonator(layout, &m)
}

/// `(-1)^{a†a}` on the resonator factor.
pub fn parity_operator<T: Real>(layout: HilbertLayout) -> OperatorMatrix<T> {
    OperatorMatrix::diagonal(layout, |_, n| if n % 2 == 0 { Complex::one() } else { -Complex::<T>::one() })
}

/// `exp(M)` for an operator.
pub fn matrix_exponential<T: Real>(m: &OperatorMatrix<T>) -> Result<OperatorMatrix<T>> {
    Ok(OperatorMatrix { layout: m.layout, matrix: expm(&m.matrix)? })
}

const PADE3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE7: [f64; 8] = [17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0];
const PADE9: [f64; 10] =
    [17643225600.0, 8821612800.0, 2075673600.0, 302702400.0, 30270240.0, 2162160.0, 110880.0, 3960.0, 90.0, 1.0];
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
// Higham (2005) backward-error thresholds for double precision.
const THETA: [f64; 5] =
    [1.495585217958292e-2, 2.539398330063230e-1, 9.504178996162932e-1, 2.097847961257068, 5.371920351148152];

fn one_norm<T: Real>(m: &DMatrix<Complex<T>>) -> T {
    m.column_iter().map(|c| c.iter().fold(T::zero(), |acc, z| acc + z.modulus())).fold(T::zero(), |a, b| a.max(b))
}

fn rc<T: Real>(x: f64) -> Complex<T> {
    Complex::new(lit(x), T::zero())
}

/// Dense `exp(M)` by Padé scaling and squaring.
pub fn expm<T: Real>(m: &DMatrix<Complex<T>>) -> Result<DMatrix<Complex<T>>> {
    if m.nrows() != m.ncols() {
        return Err(Error::InvalidInput("matrix exponential of a non-square matrix".into()));
    }
    if !all_finite(m) {
        return Err(Error::NonFinite);
    }
    let n = m.nrows();
    let ident = DMatrix::<Complex<T>>::identity(n, n);
    let norm = to_f64(one_norm(m));
    if norm == 0.0 {
        return Ok(ident);
    }

    let a2 = m * m;
    let low = |coef: &[f64], powers: &[&DMatrix<Complex<T>>]| {
        // U = A Σ b_{2k+1} A^{2k}, V = Σ b_{2k} A^{2k}
        let mut u = &ident * rc::<T>(coef[1]);
        let mut v = &ident * rc::<T>(coef[0]);
        for (k, p) in powers.iter().enumerate() {
            u += *p * rc::<T>(coef[2 * k + 3]);
            v += *p * rc::<T>(coef[2 * k + 2]);
        }
        (m * u, v)
    };

    let (u, v, squarings) = if norm <= THETA[0] {
        let (u, v) = low(&PADE3, &[&a2]);
        (u, v, 0)
    } else if norm <= THETA[1] {
        let a4 = &a2 * &a2;
        let (u, v) = low(&PADE5, &[&a2, &a4]);
        (u, v, 0)
    } else if norm <= THETA[2] {
        let a4 = &a2 * &a2;
        let a6 = &a4 * &a2;
        let (u, v) = low(&PADE7, &[&a2, &a4, &a6]);
        (u, v, 0)
    } else if norm <= THETA[3] {
        let a4 = &a2 * &a2;
        let a6 = &a4 * &a2;
        let a8 = &a6 * &a2;
        let (u, v) = low(&PADE9, &[&a2, &a4, &a6, &a8]);
        (u, v, 0)
    } else {
        let s = (norm / THETA[4]).log2().ceil().max(0.0) as i32;
        let scale = rc::<T>(0.5f64.powi(s));
        let a = m * scale;
        let a2 = &a * &a;
        let a4 = &a2 * &a2;
        let a6 = &a4 * &a2;
        let b = |k: usize| rc::<T>(PADE13[k]);
        let u_inner =
            &a6 * (&a6 * b(13) + &a4 * b(11) + &a2 * b(9)) + &a6 * b(7) + &a4 * b(5) + &a2 * b(3) + &ident * b(1);
        let u = &a * u_inner;
        let v = &a6 * (&a6 * b(12) + &a4 * b(10) + &a2 * b(8)) + &a6 * b(6) + &a4 * b(4) + &a2 * b(2) + &ident * b(0);
        (u, v, s)
    };

    let p = &v + &u;
    let q = &v - &u;
    let mut r = q.lu().solve(&p).ok_or(Error::NonFinite)?;
    for _ in 0..squarings {
        r = &r * &r;
    }
    if !all_finite(&r) {
        return Err(Error::NonFinite);
    }
    Ok(r)
}
