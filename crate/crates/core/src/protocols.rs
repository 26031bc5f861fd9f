//! Experimental sequences: Kerr-cat generation, ancilla-assisted odd/even
//! cats, state preservation, Kerr spectroscopy and calibration loops.
//!
//! Sequence steps that let the resonator evolve under a Kerr term (flux
//! windows and idle waits) apply `e^{+i(K/2) n² t}`, the same phase as
//! [`kerr_cat_propagator`], so a flux window of length `τ0/m` reproduces
//! [`generate_kerr_cat`]. Spectroscopy protocols model the physical
//! anharmonic ladder `+(K/2) n²`, where `f12 − f01 = K`.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    assemble_hamiltonian, evolve_driven, evolve_lindblad, evolve_lindblad_unchecked, kerr_cat_propagator, mhz,
    propagator, CollapseChannel, PulseEnvelope, PulseShape, RotatingFrameHamiltonian,
};
use crate::hilbert::{displacement, fidelity_trace, make_ladder, qubit_rotation_matrix, required_dim, HilbertLayout};
use crate::numerics::{brent_minimize, brent_root, levenberg_marquardt, linear_fit, LinearFit, LmOptions};
use crate::snail::FluxPoint;
use crate::tomography::{fit_coherent_gaussian, WignerGrid};
use crate::{Error, Operator, Result, State, C64};

/// `τ0 = 2π/K` in ns for `K` in MHz.
pub fn kerr_period_ns(kerr_mhz: f64) -> f64 {
    1000.0 / kerr_mhz.abs()
}

fn ensure_finite(name: &str, v: f64) -> Result<()> {
    if !v.is_finite() {
        return Err(Error::InvalidInput(format!("{name} = {v} is not finite")));
    }
    Ok(())
}

fn ensure_guard(alpha_abs: f64, layout: HilbertLayout) -> Result<()> {
    let need = required_dim(alpha_abs);
    if layout.resonator_dim() < need {
        return Err(Error::TruncationTooSmall { required: need, available: layout.resonator_dim() });
    }
    Ok(())
}

/// `D(α)|0⟩` followed by Kerr evolution for `τ0/m`.
pub fn generate_kerr_cat(alpha: C64, kerr_mhz: f64, m: usize, layout: HilbertLayout) -> Result<State> {
    if m == 0 {
        return Err(Error::InvalidInput("m must be >= 1".into()));
    }
    ensure_finite("K", kerr_mhz)?;
    if kerr_mhz == 0.0 {
        return Err(Error::InvalidInput("Kerr-cat generation needs K != 0".into()));
    }
    let vac = State::basis(layout, 0, 0)?;
    let s = vac.apply(&displacement(alpha, layout)?)?;
    let tau = kerr_period_ns(kerr_mhz) / m as f64;
    s.apply(&kerr_cat_propagator(kerr_mhz, tau, layout))
}

/// Photon numbers on which a qubit rotation acts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum FockCondition {
    PhotonNumbers(Vec<usize>),
    /// All `n < bound`.
    Below(usize),
}

impl FockCondition {
    pub fn contains(&self, n: usize) -> bool {
        match self {
            FockCondition::PhotonNumbers(v) => v.contains(&n),
            FockCondition::Below(b) => n < *b,
        }
    }

    fn members(&self, dim: usize) -> Vec<usize> {
        (0..dim).filter(|&n| self.contains(n)).collect()
    }

    fn validate(&self, dim: usize) -> Result<()> {
        match self {
            FockCondition::PhotonNumbers(v) => {
                if v.is_empty() {
                    return Err(Error::InvalidInput("empty photon-number condition".into()));
                }
                if let Some(n) = v.iter().find(|&&n| n >= dim) {
                    return Err(Error::InvalidInput(format!("condition on n = {n} outside D = {dim}")));
                }
            }
            FockCondition::Below(b) => {
                if *b == 0 || *b > dim {
                    return Err(Error::ConditionWindowTooWide { cutoff: *b as f64, dim });
                }
            }
        }
        Ok(())
    }
}

/// Finite-bandwidth qubit pulse; its carrier sits on the mean qubit line of
/// the targeted photon numbers and its area is set by the rotation angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectivePulse {
    pub shape: PulseShape,
    pub duration_ns: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Step {
    /// Instantaneous displacement, or a square resonant drive of the given
    /// duration when `duration_ns` is set.
    Displace {
        alpha_re: f64,
        alpha_im: f64,
        #[serde(default)]
        duration_ns: Option<f64>,
    },
    FluxWindow {
        kerr_mhz: f64,
        duration_ns: f64,
    },
    /// `exp(−i θ/2 (cos φ σx + sin φ σy))` on the qubit, restricted to the
    /// photon numbers in `condition`.
    QubitRotation {
        angle_rad: f64,
        #[serde(default)]
        phase_rad: f64,
        #[serde(default)]
        condition: Option<FockCondition>,
        #[serde(default)]
        pulse: Option<SelectivePulse>,
    },
    Wait {
        duration_ns: f64,
    },
    /// Projects the qubit on `project` and records the outcome probability.
    MeasureQubit {
        #[serde(default)]
        project: usize,
    },
    MeasureParity,
}

impl Step {
    fn duration(&self) -> Option<f64> {
        match self {
            Step::Displace { duration_ns, .. } => *duration_ns,
            Step::FluxWindow { duration_ns, .. } | Step::Wait { duration_ns } => Some(*duration_ns),
            Step::QubitRotation { pulse, .. } => pulse.map(|p| p.duration_ns),
            _ => None,
        }
    }
}

/// Ordered program over a fixed layout. `chi_mhz` and
/// `qubit_detuning_mhz` define the idle Hamiltonian `−χ n q + Δq q`;
/// `idle_kerr_mhz` is the resonator Kerr outside flux windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseSequence {
    pub layout: HilbertLayout,
    #[serde(default)]
    pub chi_mhz: f64,
    #[serde(default)]
    pub qubit_detuning_mhz: f64,
    #[serde(default)]
    pub idle_kerr_mhz: f64,
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementKind {
    QubitProbability,
    Parity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub step: usize,
    pub kind: MeasurementKind,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct SequenceRun {
    pub state: State,
    pub records: Vec<Measurement>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub channels: Vec<CollapseChannel>,
    /// Lindblad step bound in ns.
    pub dt_ns: f64,
    /// Verify each Lindblad segment against a half-step run.
    pub checked: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { channels: Vec::new(), dt_ns: 0.5, checked: true }
    }
}

impl RunOptions {
    pub fn with_channels(channels: Vec<CollapseChannel>) -> Self {
        Self { channels, ..Self::default() }
    }
}

type M2 = [[C64; 2]; 2];

impl PulseSequence {
    pub fn new(layout: HilbertLayout, steps: Vec<Step>) -> Result<Self> {
        let s = Self { layout, chi_mhz: 0.0, qubit_detuning_mhz: 0.0, idle_kerr_mhz: 0.0, steps };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        HilbertLayout::new(self.layout.resonator_dim(), self.layout.qubit_levels())?;
        for v in [self.chi_mhz, self.qubit_detuning_mhz, self.idle_kerr_mhz] {
            ensure_finite("sequence parameter", v)?;
        }
        let d = self.layout.resonator_dim();
        for (i, s) in self.steps.iter().enumerate() {
            if let Some(t) = s.duration() {
                if !(t >= 0.0 && t.is_finite()) {
                    return Err(Error::InvalidInput(format!("step {i}: duration {t} ns")));
                }
            }
            match s {
                Step::Displace { alpha_re, alpha_im, .. } => {
                    ensure_finite("alpha", *alpha_re)?;
                    ensure_finite("alpha", *alpha_im)?;
                }
                Step::FluxWindow { kerr_mhz, .. } => ensure_finite("K", *kerr_mhz)?,
                Step::QubitRotation { angle_rad, phase_rad, condition, pulse } => {
                    self.layout.ensure_qubit()?;
                    ensure_finite("angle", *angle_rad)?;
                    ensure_finite("phase", *phase_rad)?;
                    if let Some(c) = condition {
                        c.validate(d)?;
                    }
                    if let Some(p) = pulse {
                        if p.duration_ns <= 0.0 {
                            return Err(Error::InvalidInput(format!("step {i}: pulse duration must be > 0")));
                        }
                    }
                }
                Step::MeasureQubit { project } => {
                    self.layout.ensure_qubit()?;
                    if *project > 1 {
                        return Err(Error::InvalidInput(format!("step {i}: qubit level {project}")));
                    }
                }
                Step::Wait { .. } | Step::MeasureParity => {}
            }
        }
        Ok(())
    }

    /// Total duration of timed steps in ns.
    pub fn duration_ns(&self) -> f64 {
        self.steps.iter().filter_map(Step::duration).sum()
    }

    /// The sequence with only the first `n` steps.
    pub fn prefix(&self, n: usize) -> Self {
        Self { steps: self.steps[..n.min(self.steps.len())].to_vec(), ..self.clone() }
    }

    pub fn run(&self, initial: &State) -> Result<SequenceRun> {
        self.run_with(initial, &RunOptions::default())
    }

    pub fn run_with(&self, initial: &State, opts: &RunOptions) -> Result<SequenceRun> {
        self.validate()?;
        self.layout.ensure_same(&initial.layout())?;
        let mut state = initial.clone();
        let mut records = Vec::new();
        for (i, step) in self.steps.iter().enumerate() {
            state = self.apply_step(i, step, state, opts, &mut records)?;
        }
        Ok(SequenceRun { state, records })
    }

    fn idle_hamiltonian(&self, kerr_mhz: f64) -> Operator {
        let mut p = RotatingFrameHamiltonian::new(self.layout);
        p.kerr_mhz = -kerr_mhz;
        p.chi_mhz = self.chi_mhz;
        p.qubit_detuning_mhz = self.qubit_detuning_mhz;
        assemble_hamiltonian(&p)
    }

    fn evolve(&self, state: State, kerr_mhz: f64, t: f64, opts: &RunOptions) -> Result<State> {
        if t == 0.0 {
            return Ok(state);
        }
        let h = self.idle_hamiltonian(kerr_mhz);
        if opts.channels.iter().all(|c| c.rate_per_us == 0.0) {
            return state.apply(&propagator(&h, t)?);
        }
        if opts.checked {
            evolve_lindblad(&h, &opts.channels, &state, t, opts.dt_ns)
        } else {
            evolve_lindblad_unchecked(&h, &opts.channels, &state, t, opts.dt_ns)
        }
    }

    fn apply_step(
        &self,
        index: usize,
        step: &Step,
        state: State,
        opts: &RunOptions,
        records: &mut Vec<Measurement>,
    ) -> Result<State> {
        let d = self.layout.resonator_dim();
        match step {
            Step::Displace { alpha_re, alpha_im, duration_ns } => {
                let alpha = C64::new(*alpha_re, *alpha_im);
                match duration_ns {
                    None | Some(0.0) => state.apply(&displacement(alpha, self.layout)?),
                    Some(t) => self.driven_displacement(state, alpha, *t),
                }
            }
            Step::FluxWindow { kerr_mhz, duration_ns } => self.evolve(state, *kerr_mhz, *duration_ns, opts),
            Step::Wait { duration_ns } => self.evolve(state, self.idle_kerr_mhz, *duration_ns, opts),
            Step::QubitRotation { angle_rad, phase_rad, condition, pulse } => {
                let op = match pulse {
                    None => {
                        let r = qubit_rotation_matrix(*angle_rad, *phase_rad);
                        let m: M2 = [[r[(0, 0)], r[(0, 1)]], [r[(1, 0)], r[(1, 1)]]];
                        let id: M2 =
                            [[C64::new(1.0, 0.0), C64::new(0.0, 0.0)], [C64::new(0.0, 0.0), C64::new(1.0, 0.0)]];
                        block_operator(self.layout, |n| match condition {
                            Some(c) if !c.contains(n) => id,
                            _ => m,
                        })
                    }
                    Some(p) => self.selective_rotation(*angle_rad, *phase_rad, condition.as_ref(), p)?,
                };
                state.apply(&op)
            }
            Step::MeasureQubit { project } => {
                let (p, res) = state.project_qubit(*project)?;
                records.push(Measurement { step: index, kind: MeasurementKind::QubitProbability, value: p });
                res.with_qubit_level(*project)
            }
            Step::MeasureParity => {
                let p = state.parity();
                records.push(Measurement { step: index, kind: MeasurementKind::Parity, value: p });
                let _ = d;
                Ok(state)
            }
        }
    }

    fn driven_displacement(&self, state: State, alpha: C64, t: f64) -> Result<State> {
        // linear response of a square drive: α = −i ε t (ε in rad/ns)
        let eps = C64::new(0.0, 1.0) * alpha / t;
        let amp_mhz = eps.norm() / mhz(1.0);
        let envelope = PulseEnvelope::new(PulseShape::Square, amp_mhz, t, 0.0)?;
        let h0 = self.idle_hamiltonian(self.idle_kerr_mhz);
        let (_, adag, _) = make_ladder::<f64>(self.layout);
        let phase = if eps.norm() > 0.0 { eps / eps.norm() } else { C64::new(1.0, 0.0) };
        let raising = adag.scale(phase);
        let steps = ((t / 0.01).ceil() as usize).max(200);
        evolve_driven(&h0, &raising, &envelope, &state, steps)
    }

    /// Per-photon-number 2×2 propagators of a shaped qubit pulse in the
    /// sequence frame, including the dispersive shift during the pulse.
    fn selective_rotation(
        &self,
        angle: f64,
        phase: f64,
        condition: Option<&FockCondition>,
        pulse: &SelectivePulse,
    ) -> Result<Operator> {
        let d = self.layout.resonator_dim();
        let env = PulseEnvelope::new(pulse.shape, 1.0, pulse.duration_ns, 0.0)?;
        let targets = condition.map(|c| c.members(d)).unwrap_or_else(|| vec![0]);
        let line = |n: usize| self.qubit_detuning_mhz - self.chi_mhz * n as f64;
        let carrier = targets.iter().map(|&n| line(n)).sum::<f64>() / targets.len() as f64;
        let omega0 = angle / env.shape_area_ns();
        let t = pulse.duration_ns;
        let kerr = mhz(self.idle_kerr_mhz);
        let blocks: Vec<M2> = (0..d)
            .into_par_iter()
            .map(|n| {
                let det = mhz(line(n) - carrier);
                let u = shaped_qubit_unitary(det, |s| omega0 * env.shape_at(s), phase, t);
                // back to the sequence frame, plus the idle Kerr phase
                let back = C64::from_polar(1.0, -mhz(carrier) * t);
                let kp = C64::from_polar(1.0, 0.5 * kerr * (n * n) as f64 * t);
                [[u[0][0] * kp, u[0][1] * kp], [u[1][0] * back * kp, u[1][1] * back * kp]]
            })
            .collect();
        Ok(block_operator(self.layout, |n| blocks[n]))
    }
}

fn block_operator(layout: HilbertLayout, block: impl Fn(usize) -> M2) -> Operator {
    let d = layout.resonator_dim();
    let mut m = DMatrix::<C64>::zeros(layout.dim(), layout.dim());
    for n in 0..d {
        let b = block(n);
        for q in 0..2 {
            for p in 0..2 {
                m[(q * d + n, p * d + n)] = b[q][p];
            }
        }
    }
    Operator::new(layout, m).expect("block operator matches layout")
}

fn mul2(a: &M2, b: &M2) -> M2 {
    let mut m = [[C64::new(0.0, 0.0); 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            m[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    m
}

fn expm2(x: &M2) -> M2 {
    let half_tr = (x[0][0] + x[1][1]) * 0.5;
    let p = (x[0][0] - x[1][1]) * 0.5;
    let s = (p * p + x[0][1] * x[1][0]).sqrt();
    let (ch, sh) = if s.norm() < 1e-8 {
        (C64::new(1.0, 0.0) + s * s * 0.5, C64::new(1.0, 0.0) + s * s / 6.0)
    } else {
        (s.cosh(), s.sinh() / s)
    };
    let e = half_tr.exp();
    [[e * (ch + sh * p), e * sh * x[0][1]], [e * sh * x[1][0], e * (ch - sh * p)]]
}

/// Propagator of `H = δ|e⟩⟨e| + (Ω(t)/2)(cos φ σx + sin φ σy)` over
/// `[0, t]`, with `δ` and `Ω` in rad/ns (fourth-order Magnus steps).
pub fn shaped_qubit_unitary(detuning: f64, omega: impl Fn(f64) -> f64, phase: f64, t: f64) -> M2 {
    let steps = ((t / 2.0).ceil() as usize).max(400);
    let h = t / steps as f64;
    let ep = C64::from_polar(1.0, phase);
    let gen = |s: f64| -> M2 {
        let w = 0.5 * omega(s);
        let mi = C64::new(0.0, -1.0);
        [[C64::new(0.0, 0.0), mi * ep.conj() * w], [mi * ep * w, mi * detuning]]
    };
    let g = 0.5 / 3f64.sqrt();
    let mut u: M2 = [[C64::new(1.0, 0.0), C64::new(0.0, 0.0)], [C64::new(0.0, 0.0), C64::new(1.0, 0.0)]];
    for k in 0..steps {
        let s = k as f64 * h;
        let a1 = gen(s + (0.5 - g) * h);
        let a2 = gen(s + (0.5 + g) * h);
        let c21 = mul2(&a2, &a1);
        let c12 = mul2(&a1, &a2);
        let w = 3f64.sqrt() * h * h / 12.0;
        let mut x = [[C64::new(0.0, 0.0); 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                x[i][j] = (a1[i][j] + a2[i][j]) * (0.5 * h) + (c21[i][j] - c12[i][j]) * w;
            }
        }
        u = mul2(&expm2(&x), &u);
    }
    u
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Odd,
    Even,
}

/// Photon numbers addressed by the conditional π-pulse of the odd/even
/// protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionWindow {
    /// Only the vacuum line.
    Vacuum,
    /// Every `n < 4|α|²`.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OddEvenOptions {
    pub window: ConditionWindow,
    pub pulse: Option<SelectivePulse>,
}

impl Default for OddEvenOptions {
    fn default() -> Self {
        Self { window: ConditionWindow::Vacuum, pulse: None }
    }
}

#[derive(Debug, Clone)]
pub struct OddEvenCat {
    /// Resonator state conditioned on the qubit in `|g⟩`.
    pub state: State,
    pub success_probability: f64,
    /// Joint state right after the dispersive wait.
    pub entangled: State,
}

/// π/2 → D(α) → wait → D(α) → conditional π → D(−α) → project `|g⟩`.
///
/// The qubit frame sits χ/2 above the vacuum line, so the wait leaves the
/// `|e⟩` branch with a relative phase of `−i` (odd, `τ = π/χ`) or `+i`
/// (even, `τ = 3π/χ`), which the π/2 pulse about x turns into `∓1`.
pub fn odd_even_sequence(
    alpha: C64,
    chi_mhz: f64,
    branch: Branch,
    layout: HilbertLayout,
    opts: &OddEvenOptions,
) -> Result<PulseSequence> {
    layout.ensure_qubit()?;
    ensure_finite("chi", chi_mhz)?;
    if chi_mhz == 0.0 {
        return Err(Error::InvalidInput("odd/even protocol needs chi != 0".into()));
    }
    ensure_guard(2.0 * alpha.norm(), layout)?;
    let d = layout.resonator_dim();
    let cutoff = 4.0 * alpha.norm_sqr();
    if cutoff >= d as f64 {
        return Err(Error::ConditionWindowTooWide { cutoff, dim: d });
    }
    let condition = match opts.window {
        ConditionWindow::Vacuum => FockCondition::PhotonNumbers(vec![0]),
        ConditionWindow::Literal => FockCondition::Below((cutoff.ceil() as usize).max(1)),
    };
    let half_period = PI / mhz(chi_mhz).abs();
    let wait = match branch {
        Branch::Odd => half_period,
        Branch::Even => 3.0 * half_period,
    };
    let disp = |a: C64| Step::Displace { alpha_re: a.re, alpha_im: a.im, duration_ns: None };
    let steps = vec![
        Step::QubitRotation { angle_rad: 0.5 * PI, phase_rad: 0.0, condition: None, pulse: None },
        disp(alpha),
        Step::Wait { duration_ns: wait },
        disp(alpha),
        Step::QubitRotation { angle_rad: PI, phase_rad: -0.5 * PI, condition: Some(condition), pulse: opts.pulse },
        disp(-alpha),
        Step::MeasureQubit { project: 0 },
    ];
    let s = PulseSequence { layout, chi_mhz, qubit_detuning_mhz: 0.5 * chi_mhz, idle_kerr_mhz: 0.0, steps };
    s.validate()?;
    Ok(s)
}

pub fn generate_odd_even_cat(
    alpha: C64,
    chi_mhz: f64,
    branch: Branch,
    layout: HilbertLayout,
    opts: &OddEvenOptions,
) -> Result<OddEvenCat> {
    let seq = odd_even_sequence(alpha, chi_mhz, branch, layout, opts)?;
    let vac = State::basis(layout, 0, 0)?;
    let entangled = seq.prefix(3).run(&vac)?.state;
    let rest = PulseSequence { steps: seq.steps[3..].to_vec(), ..seq.clone() };
    let out = rest.run(&entangled)?;
    let success_probability = out.records.last().map(|r| r.value).unwrap_or(1.0);
    Ok(OddEvenCat { state: out.state.reduce_to_resonator(), success_probability, entangled })
}

/// Snapshots after each `Δt` of Kerr evolution at `K_residual` under the
/// given channels. Snapshots follow the order of `dt_list`.
pub fn preserve_state(
    state: &State,
    dt_list: &[f64],
    channels: &[CollapseChannel],
    k_residual_mhz: f64,
) -> Result<Vec<State>> {
    preserve_state_with(state, dt_list, &RunOptions::with_channels(channels.to_vec()), k_residual_mhz)
}

pub fn preserve_state_with(
    state: &State,
    dt_list: &[f64],
    opts: &RunOptions,
    k_residual_mhz: f64,
) -> Result<Vec<State>> {
    ensure_finite("K_residual", k_residual_mhz)?;
    if let Some(t) = dt_list.iter().find(|t| !(**t >= 0.0 && t.is_finite())) {
        return Err(Error::InvalidInput(format!("preservation time {t} ns")));
    }
    let seq = PulseSequence {
        layout: state.layout(),
        chi_mhz: 0.0,
        qubit_detuning_mhz: 0.0,
        idle_kerr_mhz: k_residual_mhz,
        steps: Vec::new(),
    };
    let mut order: Vec<usize> = (0..dt_list.len()).collect();
    order.sort_by(|a, b| dt_list[*a].total_cmp(&dt_list[*b]));
    let mut out: Vec<Option<State>> = vec![None; dt_list.len()];
    let mut cur = state.clone();
    let mut t_cur = 0.0;
    for i in order {
        cur = seq.evolve(cur, k_residual_mhz, dt_list[i] - t_cur, opts)?;
        t_cur = dt_list[i];
        out[i] = Some(cur.clone());
    }
    Ok(out.into_iter().map(|s| s.expect("every snapshot filled")).collect())
}

/// Vacuum-population dip search and Kerr estimate from one drive setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleToneReport {
    pub kerr_mhz: f64,
    /// Slope of dip center against `N̄`, in MHz per photon.
    pub raw_slope_mhz: f64,
    /// Calibrated `slope / K` of the drive; see [`single_tone_kerr`].
    pub response_factor: f64,
    pub mean_photons: Vec<f64>,
    pub centers_mhz: Vec<f64>,
    pub fit: LinearFit,
}

/// Displacement magnitude that the envelope produces on resonance in a
/// linear resonator.
pub fn linear_displacement(drive: &PulseEnvelope, amp_mhz: f64) -> f64 {
    mhz(amp_mhz) * drive.shape_area_ns()
}

/// Probability that the resonator is still empty after the drive, i.e. the
/// excitation probability of an ideal vacuum-selective π-pulse.
fn vacuum_population(
    kerr_mhz: f64,
    drive: &PulseEnvelope,
    amp_mhz: f64,
    freq_mhz: f64,
    layout: HilbertLayout,
) -> Result<f64> {
    let mut p = RotatingFrameHamiltonian::new(layout);
    p.detuning_res_mhz = -freq_mhz;
    p.kerr_mhz = kerr_mhz;
    let vac = State::basis(layout, 0, 0)?;
    let out = match drive.shape {
        PulseShape::Square if drive.carrier_detuning_mhz == 0.0 => {
            p.drive_amp_mhz = C64::new(amp_mhz, 0.0);
            let h = assemble_hamiltonian::<f64>(&p);
            vac.apply(&propagator(&h, drive.duration_ns)?)?
        }
        _ => {
            let h0 = assemble_hamiltonian::<f64>(&p);
            let (_, adag, _) = make_ladder::<f64>(layout);
            let env = PulseEnvelope { amplitude_mhz: amp_mhz, ..*drive };
            let steps = ((drive.duration_ns / 0.01).ceil() as usize).max(400);
            evolve_driven(&h0, &adag, &env, &vac, steps)?
        }
    };
    let v = out.vector().expect("pure evolution");
    Ok(v[0].norm_sqr())
}

fn dip_center(kerr_mhz: f64, drive: &PulseEnvelope, amp_mhz: f64, layout: HilbertLayout) -> Result<f64> {
    let lw = 1000.0 / drive.duration_ns;
    let n = 121;
    let step = 2.0 * lw / (n - 1) as f64;
    let grid: Vec<f64> = (0..n).map(|k| -lw + k as f64 * step).collect();
    let vals: Vec<f64> =
        grid.iter().map(|&f| vacuum_population(kerr_mhz, drive, amp_mhz, f, layout)).collect::<Result<_>>()?;
    let k = (0..n).min_by(|a, b| vals[*a].total_cmp(&vals[*b])).expect("non-empty scan");
    if k == 0 || k == n - 1 {
        return Err(Error::ShiftExceedsLinewidth { shift_mhz: grid[k], linewidth_mhz: lw });
    }
    let h = 1e-3;
    let deriv = |f: f64| -> Result<f64> {
        Ok((vacuum_population(kerr_mhz, drive, amp_mhz, f + h, layout)?
            - vacuum_population(kerr_mhz, drive, amp_mhz, f - h, layout)?)
            / (2.0 * h))
    };
    match brent_root(deriv, grid[k - 1], grid[k + 1], 1e-9, 0.0, 200) {
        Ok(f) => Ok(f),
        Err(Error::NoSignChange { .. }) => {
            let m = brent_minimize(
                |f| vacuum_population(kerr_mhz, drive, amp_mhz, f, layout),
                grid[k - 1],
                grid[k + 1],
                1e-9,
                200,
            )?;
            Ok(m.x)
        }
        Err(e) => Err(e),
    }
}

fn dip_slope(
    kerr_mhz: f64,
    drive: &PulseEnvelope,
    amps_mhz: &[f64],
    layout: HilbertLayout,
) -> Result<(Vec<f64>, Vec<f64>, LinearFit)> {
    let nbar: Vec<f64> = amps_mhz.iter().map(|&a| linear_displacement(drive, a).powi(2)).collect();
    let centers: Vec<f64> =
        amps_mhz.par_iter().map(|&a| dip_center(kerr_mhz, drive, a, layout)).collect::<Result<_>>()?;
    let fit = linear_fit(&nbar, &centers)?;
    Ok((nbar, centers, fit))
}

/// Kerr used to calibrate the response factor of a drive.
pub const SINGLE_TONE_REFERENCE_KERR_MHZ: f64 = 1e-3;

/// Single-tone Kerr measurement: for each drive amplitude the carrier is
/// swept, the vacuum population after the drive is minimized, and the dip
/// centers are regressed against `N̄ = |α|²`.
///
/// A finite drive probes the Kerr shift while the field is still building
/// up, so the raw slope is `η K` with a shape factor `η < 1` fixed by the
/// envelope (about 0.2 for a square pulse). `η` is calibrated by running
/// the same sweep at a small reference Kerr, and the returned value is
/// `slope / η`.
pub fn single_tone_kerr(
    point: &FluxPoint,
    drive: &PulseEnvelope,
    amps_mhz: &[f64],
    layout: HilbertLayout,
) -> Result<SingleToneReport> {
    if amps_mhz.len() < 2 {
        return Err(Error::InvalidInput("single-tone fit needs at least two amplitudes".into()));
    }
    let layout = layout.resonator_only();
    let k = point.k_mhz;
    ensure_finite("K", k)?;
    let amax = amps_mhz.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let alpha_max = linear_displacement(drive, amax);
    ensure_guard(alpha_max, layout)?;
    let lw = 1000.0 / drive.duration_ns;
    let shift = k.abs() * alpha_max * alpha_max;
    if shift > lw {
        return Err(Error::ShiftExceedsLinewidth { shift_mhz: shift, linewidth_mhz: lw });
    }
    let (_, _, reference) = dip_slope(SINGLE_TONE_REFERENCE_KERR_MHZ, drive, amps_mhz, layout)?;
    let eta = reference.slope / SINGLE_TONE_REFERENCE_KERR_MHZ;
    if !(eta.is_finite() && eta.abs() > 1e-3) {
        return Err(Error::FitDiverged(format!("single-tone response factor {eta}")));
    }
    let (mean_photons, centers_mhz, fit) = dip_slope(k, drive, amps_mhz, layout)?;
    Ok(SingleToneReport {
        kerr_mhz: fit.slope / eta,
        raw_slope_mhz: fit.slope,
        response_factor: eta,
        mean_photons,
        centers_mhz,
        fit,
    })
}

/// Population of one level under a resonant drive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RabiTrace {
    pub drive_freq_mhz: f64,
    pub times_ns: Vec<f64>,
    pub population: Vec<f64>,
    /// Fitted frequency of `A sin²(π f t)` in MHz.
    pub rabi_freq_mhz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoToneOptions {
    pub probe_duration_ns: f64,
    /// Probe amplitude; `None` gives a π-pulse on `|0⟩↔|1⟩`.
    pub probe_amp_mhz: Option<f64>,
    pub rabi_points: usize,
    pub rabi_periods: f64,
}

impl Default for TwoToneOptions {
    fn default() -> Self {
        Self { probe_duration_ns: 2000.0, probe_amp_mhz: None, rabi_points: 201, rabi_periods: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoToneReport {
    pub kerr_mhz: f64,
    pub f01_mhz: f64,
    pub f12_mhz: f64,
    pub rabi_01: RabiTrace,
    pub rabi_12: RabiTrace,
}

fn probe_hamiltonian(kerr_mhz: f64, freq_mhz: f64, amp_mhz: f64, layout: HilbertLayout) -> Operator {
    let mut p = RotatingFrameHamiltonian::new(layout);
    p.detuning_res_mhz = -freq_mhz;
    p.kerr_mhz = kerr_mhz;
    p.drive_amp_mhz = C64::new(amp_mhz, 0.0);
    assemble_hamiltonian(&p)
}

fn probe_level(kerr_mhz: f64, freq: f64, amp: f64, t: f64, start: &State, level: usize) -> Result<f64> {
    let h = probe_hamiltonian(kerr_mhz, freq, amp, start.layout());
    let out = start.apply(&propagator(&h, t)?)?;
    Ok(out.photon_distribution()[level])
}

fn locate_peak(kerr_mhz: f64, amp: f64, t: f64, start: &State, level: usize, half_width: f64) -> Result<(f64, f64)> {
    let lw = 1000.0 / t;
    let step = lw / 8.0;
    let n = (2.0 * half_width / step).ceil() as usize + 1;
    let grid: Vec<f64> = (0..n).map(|k| -half_width + k as f64 * step).collect();
    let vals: Vec<f64> =
        grid.par_iter().map(|&f| probe_level(kerr_mhz, f, amp, t, start, level)).collect::<Result<_>>()?;
    let k = (0..n).max_by(|a, b| vals[*a].total_cmp(&vals[*b])).expect("non-empty sweep");
    if vals[k] < 0.5 {
        return Err(Error::PeaksUnresolved(format!("level {level} peak reaches only {:.3}", vals[k])));
    }
    let lo = grid[k.saturating_sub(1)];
    let hi = grid[(k + 1).min(n - 1)];
    let m = brent_minimize(|f| Ok(-probe_level(kerr_mhz, f, amp, t, start, level)?), lo, hi, 1e-7, 200)?;
    Ok((m.x, -m.value))
}

fn rabi_trace(
    kerr_mhz: f64,
    freq: f64,
    amp: f64,
    start: &State,
    level: usize,
    opts: &TwoToneOptions,
    gain: f64,
) -> Result<RabiTrace> {
    // expected period 1/(2 g ε) for matrix element g
    let period = 1000.0 / (2.0 * gain * amp);
    let total = opts.rabi_periods * period;
    let n = opts.rabi_points.max(8);
    let dt = total / (n - 1) as f64;
    let h = probe_hamiltonian(kerr_mhz, freq, amp, start.layout());
    let u = propagator(&h, dt)?;
    let mut s = start.clone();
    let mut times = Vec::with_capacity(n);
    let mut pop = Vec::with_capacity(n);
    for k in 0..n {
        if k > 0 {
            s = s.apply(&u)?;
        }
        times.push(k as f64 * dt);
        pop.push(s.photon_distribution()[level]);
    }
    let f0 = 1.0 / period;
    let residual = |p: &[f64]| -> Result<Vec<f64>> {
        Ok(times.iter().zip(&pop).map(|(t, y)| p[0] * (PI * p[1] * 1e-3 * t).sin().powi(2) - y).collect())
    };
    let fit = levenberg_marquardt(residual, &[1.0, f0 * 1e3], LmOptions::default())?;
    Ok(RabiTrace { drive_freq_mhz: freq, times_ns: times, population: pop, rabi_freq_mhz: fit.params[1] })
}

/// Two-tone Kerr measurement on the lowest three resonator levels: a weak
/// probe locates the `|0⟩→|1⟩` line from the `|1⟩` population, a π-pulse on
/// that line prepares `|1⟩`, and a second sweep locates `|1⟩→|2⟩` from the
/// `|2⟩` population. `K = f12 − f01`.
pub fn two_tone_kerr(point: &FluxPoint, layout: HilbertLayout, opts: &TwoToneOptions) -> Result<TwoToneReport> {
    let layout = layout.resonator_only();
    if layout.resonator_dim() < 3 {
        return Err(Error::InvalidLayout("two-tone measurement needs at least three levels".into()));
    }
    let k = point.k_mhz;
    ensure_finite("K", k)?;
    let t = opts.probe_duration_ns;
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidInput(format!("probe duration {t} ns")));
    }
    let lw = 1000.0 / t;
    let amp = opts.probe_amp_mhz.unwrap_or(1000.0 / (4.0 * t));
    let half_width = 3.0 * k.abs() + 20.0 * lw;
    let vac = State::basis(layout, 0, 0)?;
    let (f01, _) = locate_peak(k, amp, t, &vac, 1, half_width)?;
    let one = vac.apply(&propagator(&probe_hamiltonian(k, f01, amp, layout), t)?)?;
    let (f12, _) = locate_peak(k, amp, t, &one, 2, half_width)?;
    if (f12 - f01).abs() < 2.0 * lw {
        return Err(Error::PeaksUnresolved(format!(
            "f01 = {f01:.4} MHz and f12 = {f12:.4} MHz closer than two linewidths ({:.4} MHz)",
            2.0 * lw
        )));
    }
    let rabi_01 = rabi_trace(k, f01, amp, &vac, 1, opts, 1.0)?;
    let fock1 = State::basis(layout, 0, 1)?;
    let rabi_12 = rabi_trace(k, f12, amp, &fock1, 2, opts, 2f64.sqrt())?;
    Ok(TwoToneReport { kerr_mhz: f12 - f01, f01_mhz: f01, f12_mhz: f12, rabi_01, rabi_12 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralPeak {
    pub photon_number: usize,
    pub center_mhz: f64,
    pub width_mhz: f64,
    pub weight: f64,
}

/// Qubit excitation probability against probe frequency (MHz, relative to
/// the vacuum line).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectroscopyResult {
    pub frequencies_mhz: Vec<f64>,
    pub response: Vec<f64>,
    pub peaks: Vec<SpectralPeak>,
}

impl SpectroscopyResult {
    pub fn new(frequencies_mhz: Vec<f64>, response: Vec<f64>) -> Result<Self> {
        if frequencies_mhz.len() != response.len() || frequencies_mhz.len() < 3 {
            return Err(Error::InvalidInput("spectrum needs matching frequency and response lists".into()));
        }
        if frequencies_mhz.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput("spectrum frequencies must increase strictly".into()));
        }
        if let Some(p) = response.iter().find(|p| !(-1e-9..=1.0 + 1e-9).contains(*p)) {
            return Err(Error::InvalidInput(format!("response {p} outside [0, 1]")));
        }
        let response = response.into_iter().map(|p| p.clamp(0.0, 1.0)).collect();
        Ok(Self { frequencies_mhz, response, peaks: Vec::new() })
    }

    /// Finds the number-split lines at `−nχ`: in each window of width χ the
    /// maximum is refined by a parabola through its neighbours, and the
    /// full width at half maximum is interpolated.
    pub fn locate_peaks(&mut self, chi_mhz: f64) -> Result<&[SpectralPeak]> {
        let chi = chi_mhz.abs();
        if !(chi > 0.0) {
            return Err(Error::InvalidInput("chi must be non-zero".into()));
        }
        let f = &self.frequencies_mhz;
        let r = &self.response;
        let fmin = f[0];
        let fmax = *f.last().expect("non-empty");
        let sign = -chi_mhz.signum();
        let mut peaks = Vec::new();
        for n in 0.. {
            let c = sign * chi * n as f64;
            let (lo, hi) = ((c - 0.5 * chi).max(fmin), (c + 0.5 * chi).min(fmax));
            if c < fmin || c > fmax {
                if n == 0 {
                    return Err(Error::PeaksUnresolved("vacuum line outside the frequency range".into()));
                }
                break;
            }
            let idx: Vec<usize> = (0..f.len()).filter(|&i| f[i] >= lo && f[i] <= hi).collect();
            if idx.len() < 3 {
                return Err(Error::PeaksUnresolved(format!("fewer than 3 samples around n = {n}")));
            }
            let k = *idx.iter().max_by(|a, b| r[**a].total_cmp(&r[**b])).expect("non-empty window");
            let interior = k > 0 && k + 1 < f.len() && r[k] >= r[k - 1] && r[k] >= r[k + 1];
            if !interior {
                // only the tail of a neighbouring line: read the response at the expected center
                let j = idx.iter().copied().find(|&i| f[i] >= c).unwrap_or(k).max(1);
                let t = ((c - f[j - 1]) / (f[j] - f[j - 1])).clamp(0.0, 1.0);
                let height = r[j - 1] + t * (r[j] - r[j - 1]);
                peaks.push(SpectralPeak { photon_number: n, center_mhz: c, width_mhz: 0.0, weight: height });
                continue;
            }
            let (mut center, mut height) = (f[k], r[k]);
            let (x0, x1, x2) = (f[k - 1], f[k], f[k + 1]);
            let (y0, y1, y2) = (r[k - 1], r[k], r[k + 1]);
            let den = (x0 - x1) * (x0 - x2) * (x1 - x2);
            let a = (x2 * (y1 - y0) + x1 * (y0 - y2) + x0 * (y2 - y1)) / den;
            let b = (x2 * x2 * (y0 - y1) + x1 * x1 * (y2 - y0) + x0 * x0 * (y1 - y2)) / den;
            if a < 0.0 {
                let xv = -b / (2.0 * a);
                if xv > x0 && xv < x2 {
                    let c0 = y1 - a * x1 * x1 - b * x1;
                    center = xv;
                    height = (c0 - b * b / (4.0 * a)).max(y1);
                }
            }
            let width = half_max_width(f, r, k, height, lo, hi);
            peaks.push(SpectralPeak { photon_number: n, center_mhz: center, width_mhz: width, weight: height });
        }
        let significant = peaks.iter().filter(|p| p.weight > 0.05);
        if let Some(p) = significant.clone().find(|p| p.width_mhz >= 0.5 * chi) {
            return Err(Error::PeaksUnresolved(format!(
                "line n = {} is {:.3} MHz wide for chi = {chi:.3} MHz",
                p.photon_number, p.width_mhz
            )));
        }
        self.peaks = peaks;
        Ok(&self.peaks)
    }
}

fn half_max_width(f: &[f64], r: &[f64], k: usize, height: f64, lo: f64, hi: f64) -> f64 {
    let half = 0.5 * height;
    let mut left = lo;
    let mut i = k;
    while i > 0 && f[i - 1] >= lo {
        if r[i - 1] <= half {
            let t = (half - r[i - 1]) / (r[i] - r[i - 1]);
            left = f[i - 1] + t * (f[i] - f[i - 1]);
            break;
        }
        i -= 1;
    }
    let mut right = hi;
    let mut j = k;
    while j + 1 < f.len() && f[j + 1] <= hi {
        if r[j + 1] <= half {
            let t = (r[j] - half) / (r[j] - r[j + 1]);
            right = f[j] + t * (f[j + 1] - f[j]);
            break;
        }
        j += 1;
    }
    right - left
}

/// Amplitude (MHz) that gives a π rotation with the envelope's shape.
pub fn pi_pulse_amplitude_mhz(shape: PulseShape, duration_ns: f64) -> Result<f64> {
    let env = PulseEnvelope::new(shape, 1.0, duration_ns, 0.0)?;
    Ok(0.5 / (env.shape_area_ns() * 1e-3))
}

/// Number-split qubit spectroscopy of a resonator state: the qubit starts in
/// `|g⟩`, its line sits at `−nχ` for `n` photons, and `probe` drives it with
/// Rabi amplitude `probe.amplitude_mhz`.
pub fn qubit_spectroscopy(
    state: &State,
    chi_mhz: f64,
    probe: &PulseEnvelope,
    freqs_mhz: &[f64],
) -> Result<SpectroscopyResult> {
    ensure_finite("chi", chi_mhz)?;
    let pn = state.reduce_to_resonator().photon_distribution();
    let used: Vec<(usize, f64)> = pn.iter().copied().enumerate().filter(|(_, p)| *p > 1e-12).collect();
    let omega = mhz(probe.amplitude_mhz);
    let response: Vec<f64> = freqs_mhz
        .par_iter()
        .map(|&f| {
            used.iter()
                .map(|&(n, p)| {
                    let det = mhz(-chi_mhz * n as f64 - f);
                    let u = shaped_qubit_unitary(det, |s| omega * probe.shape_at(s), 0.0, probe.duration_ns);
                    p * u[1][0].norm_sqr()
                })
                .sum::<f64>()
                .clamp(0.0, 1.0)
        })
        .collect();
    SpectroscopyResult::new(freqs_mhz.to_vec(), response)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoissonFit {
    pub mean_photons: f64,
    pub rms: f64,
}

/// Least-squares Poisson fit to normalized line weights.
pub fn fit_poisson(weights: &[f64], rms_threshold: f64) -> Result<PoissonFit> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::PeaksUnresolved("no spectral weight".into()));
    }
    let w: Vec<f64> = weights.iter().map(|x| x / total).collect();
    let sse = |nb: f64| -> Result<f64> {
        let mut p = (-nb).exp();
        let mut s = 0.0;
        for (n, wn) in w.iter().enumerate() {
            if n > 0 {
                p *= nb / n as f64;
            }
            s += (wn - p).powi(2);
        }
        Ok(s)
    };
    let hi = w.len() as f64;
    let steps = 20 * w.len();
    let mut best = (0, f64::INFINITY);
    for k in 0..=steps {
        let v = sse(hi * k as f64 / steps as f64)?;
        if v < best.1 {
            best = (k, v);
        }
    }
    let at = |k: usize| hi * k.min(steps) as f64 / steps as f64;
    let m = brent_minimize(sse, at(best.0.saturating_sub(1)), at(best.0 + 1), 1e-10, 500)?;
    let rms = (m.value / w.len() as f64).sqrt();
    if rms > rms_threshold {
        return Err(Error::PoissonFitPoor { rms, threshold: rms_threshold });
    }
    Ok(PoissonFit { mean_photons: m.x, rms })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhotonCalibrationOptions {
    pub chi_mhz: f64,
    pub rms_threshold: f64,
}

impl PhotonCalibrationOptions {
    pub fn new(chi_mhz: f64) -> Self {
        Self { chi_mhz, rms_threshold: 0.02 }
    }
}

/// `√N̄ = G V + b` regression result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhotonCalibration {
    pub scale: LinearFit,
    pub amps: Vec<f64>,
    pub mean_photons: Vec<f64>,
    pub residuals: Vec<f64>,
}

impl PhotonCalibration {
    pub fn g(&self) -> f64 {
        self.scale.slope
    }
}

/// Poisson route: mean photon number of each spectrum from its line
/// weights, then `G` from `√N̄` against drive amplitude.
pub fn calibrate_photon_number(
    spectra: &[SpectroscopyResult],
    amps: &[f64],
    opts: &PhotonCalibrationOptions,
) -> Result<PhotonCalibration> {
    if spectra.len() != amps.len() || spectra.len() < 2 {
        return Err(Error::InvalidInput("need one spectrum per amplitude and at least two".into()));
    }
    let mut nbar = Vec::with_capacity(spectra.len());
    let mut res = Vec::with_capacity(spectra.len());
    for s in spectra {
        let mut s = s.clone();
        let peaks = s.locate_peaks(opts.chi_mhz)?;
        let w: Vec<f64> = peaks.iter().map(|p| p.weight).collect();
        let fit = fit_poisson(&w, opts.rms_threshold)?;
        nbar.push(fit.mean_photons);
        res.push(fit.rms);
    }
    let roots: Vec<f64> = nbar.iter().map(|n| n.max(0.0).sqrt()).collect();
    let scale = linear_fit(amps, &roots)?;
    Ok(PhotonCalibration { scale, amps: amps.to_vec(), mean_photons: nbar, residuals: res })
}

/// Wigner route: each grid is fitted with `A exp(−2|γ − α0|²)` and `|α0|`
/// is regressed against drive amplitude.
pub fn calibrate_photon_number_wigner(grids: &[WignerGrid], amps: &[f64]) -> Result<PhotonCalibration> {
    if grids.len() != amps.len() || grids.len() < 2 {
        return Err(Error::InvalidInput("need one Wigner grid per amplitude and at least two".into()));
    }
    let fits: Vec<_> = grids.par_iter().map(fit_coherent_gaussian).collect::<Result<_>>()?;
    let alphas: Vec<f64> = fits.iter().map(|f| f.alpha0.norm()).collect();
    let scale = linear_fit(amps, &alphas)?;
    Ok(PhotonCalibration {
        scale,
        amps: amps.to_vec(),
        mean_photons: alphas.iter().map(|a| a * a).collect(),
        residuals: fits.iter().map(|f| f.rms).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoherenceTarget {
    pub wait_ns: f64,
    pub fidelity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoherenceOptions {
    /// Upper end of the κ search in 1/μs.
    pub kappa_max_per_us: f64,
    /// Also fit a qubit dephasing rate (requires a qubit layout).
    pub fit_dephasing: bool,
    /// Kerr during the waits.
    pub residual_kerr_mhz: f64,
    pub dt_ns: f64,
}

impl Default for DecoherenceOptions {
    fn default() -> Self {
        Self { kappa_max_per_us: 20.0, fit_dephasing: false, residual_kerr_mhz: 0.0, dt_ns: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoherenceFit {
    pub kappa_per_us: f64,
    pub dephasing_per_us: Option<f64>,
    pub channels: Vec<CollapseChannel>,
    pub predictions: Vec<f64>,
    /// RMS of `prediction − target`.
    pub rms: f64,
}

fn channel_set(kappa: f64, dephasing: Option<f64>) -> Result<Vec<CollapseChannel>> {
    let mut v = vec![CollapseChannel::photon_loss(kappa.max(0.0))?];
    if let Some(g) = dephasing {
        v.push(CollapseChannel::new(crate::dynamics::ChannelKind::QubitDephasing, g.max(0.0))?);
    }
    Ok(v)
}

/// Fidelities with the ideal protocol output after preparation under
/// `channels` and each wait.
pub fn decoherence_forward(
    protocol: &PulseSequence,
    initial: &State,
    waits_ns: &[f64],
    channels: &[CollapseChannel],
    residual_kerr_mhz: f64,
    dt_ns: f64,
    checked: bool,
) -> Result<Vec<f64>> {
    let ideal = protocol.run(initial)?.state;
    let opts = RunOptions { channels: channels.to_vec(), dt_ns, checked };
    let noisy = protocol.run_with(initial, &opts)?.state;
    let snaps = preserve_state_with(&noisy, waits_ns, &opts, residual_kerr_mhz)?;
    snaps.iter().map(|s| fidelity_trace(s, &ideal)).collect()
}

/// Fits the photon-loss rate (and optionally qubit dephasing) so that the
/// protocol output, held for each target wait, matches the target fidelity
/// against the ideal output.
pub fn calibrate_decoherence(
    targets: &[DecoherenceTarget],
    protocol: &PulseSequence,
    initial: &State,
    opts: &DecoherenceOptions,
) -> Result<DecoherenceFit> {
    if targets.len() < 2 {
        return Err(Error::InvalidInput("decoherence fit needs at least two targets".into()));
    }
    let waits: Vec<f64> = targets.iter().map(|t| t.wait_ns).collect();
    let want: Vec<f64> = targets.iter().map(|t| t.fidelity).collect();
    let resid = |kappa: f64, deph: Option<f64>, checked: bool| -> Result<Vec<f64>> {
        let ch = channel_set(kappa, deph)?;
        let f = decoherence_forward(protocol, initial, &waits, &ch, opts.residual_kerr_mhz, opts.dt_ns, checked)?;
        Ok(f.iter().zip(&want).map(|(a, b)| a - b).collect())
    };
    let kmax = opts.kappa_max_per_us;
    let sse = |k: f64| -> Result<f64> { Ok(resid(k, None, false)?.iter().map(|r| r * r).sum()) };
    let m = brent_minimize(sse, 0.0, kmax, 1e-7 * kmax, 200)?;
    if !m.x.is_finite() || m.x > 0.999 * kmax {
        return Err(Error::FitDiverged(format!("photon-loss rate ran to the search limit {kmax} /us")));
    }
    let (kappa, dephasing) = if opts.fit_dephasing {
        protocol.layout.ensure_qubit()?;
        let lm = levenberg_marquardt(
            |p: &[f64]| resid(p[0] * p[0], Some(p[1] * p[1]), false),
            &[m.x.sqrt(), 0.1],
            LmOptions { max_iter: 100, ..LmOptions::default() },
        )?;
        (lm.params[0].powi(2), Some(lm.params[1].powi(2)))
    } else {
        (m.x, None)
    };
    let channels = channel_set(kappa, dephasing)?;
    let r = resid(kappa, dephasing, true)?;
    let rms = (r.iter().map(|x| x * x).sum::<f64>() / r.len() as f64).sqrt();
    if !rms.is_finite() {
        return Err(Error::FitDiverged("non-finite decoherence residual".into()));
    }
    let predictions = r.iter().zip(&want).map(|(a, b)| a + b).collect();
    Ok(DecoherenceFit { kappa_per_us: kappa, dephasing_per_us: dephasing, channels, predictions, rms })
}

/// Binomial shot noise on probabilities, seeded for reproducibility.
#[derive(Debug, Clone)]
pub struct ShotSampler {
    shots: u64,
    rng: ChaCha8Rng,
}

impl ShotSampler {
    pub fn new(shots: u64, seed: u64) -> Result<Self> {
        if shots == 0 {
            return Err(Error::InvalidInput("shot count must be > 0".into()));
        }
        Ok(Self { shots, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn shots(&self) -> u64 {
        self.shots
    }

    /// Observed frequency of an outcome with probability `p`.
    pub fn sample(&mut self, p: f64) -> Result<f64> {
        if !(-1e-9..=1.0 + 1e-9).contains(&p) {
            return Err(Error::InvalidInput(format!("probability {p}")));
        }
        let b = Binomial::new(self.shots, p.clamp(0.0, 1.0)).map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(b.sample(&mut self.rng) as f64 / self.shots as f64)
    }

    pub fn sample_spectrum(&mut self, s: &SpectroscopyResult) -> Result<SpectroscopyResult> {
        let r = s.response.iter().map(|p| self.sample(*p)).collect::<Result<Vec<_>>>()?;
        SpectroscopyResult::new(s.frequencies_mhz.clone(), r)
    }
}
