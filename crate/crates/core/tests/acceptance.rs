//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Run with `cargo test -p kerrcat --test acceptance`.

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kerrcat::dynamics::{
    assemble_hamiltonian, evolve_lindblad, propagator, ChannelKind, CollapseChannel, Liouvillian, PulseEnvelope,
    PulseShape, RotatingFrameHamiltonian,
};
use kerrcat::hilbert::{annihilation, fidelity_trace, HilbertLayout};
use kerrcat::numerics::linear_fit;
use kerrcat::protocols::{
    calibrate_decoherence, calibrate_photon_number, calibrate_photon_number_wigner, fit_poisson, generate_kerr_cat,
    kerr_period_ns, linear_displacement, pi_pulse_amplitude_mhz, preserve_state, qubit_spectroscopy, single_tone_kerr,
    two_tone_kerr, DecoherenceOptions, DecoherenceTarget, PhotonCalibrationOptions, PulseSequence, Step,
    TwoToneOptions,
};
use kerrcat::snail::{cross_kerr_mhz, kerr_free_flux, sweep, taylor_coefficients, FluxPoint, SnailDevice};
use kerrcat::tomography::{
    fidelity_wigner, wigner_exact, wigner_exact_with, wigner_ramsey, GridSpec, RamseyReadout, WignerMethod,
};
use kerrcat::{State, C64};

type Outcome = (bool, Vec<String>);

struct Check {
    ok: bool,
    notes: Vec<String>,
}

impl Check {
    fn new() -> Self {
        Self { ok: true, notes: Vec::new() }
    }

    fn expect(&mut self, cond: bool, note: String) {
        if !cond {
            self.ok = false;
            self.notes.push(format!("FAILED {note}"));
        } else {
            self.notes.push(note);
        }
    }

    fn within(&mut self, t: Duration, limit_s: f64, what: &str) {
        let s = t.as_secs_f64();
        self.expect(s < limit_s, format!("{what} {s:.1} s (< {limit_s} s)"));
    }

    fn done(self) -> Outcome {
        (self.ok, self.notes)
    }
}

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

fn res(d: usize) -> HilbertLayout {
    HilbertLayout::resonator(d).unwrap()
}

fn reference_device() -> SnailDevice {
    SnailDevice::reference().unwrap()
}

fn bare_point(k: f64) -> FluxPoint {
    FluxPoint {
        phi_ext: 0.0,
        phi_min: 0.0,
        c2: 1.0,
        c3: 0.0,
        c4: 0.0,
        omega_s_ghz: 4.223,
        g3_mhz: 0.0,
        g4_mhz: 0.0,
        ks_mhz: k,
        kqs_mhz: 0.0,
        k_mhz: k,
        chi_mhz: 4.35,
    }
}

fn kerr_free_point() -> Outcome {
    let mut ck = Check::new();
    let t0 = Instant::now();
    let dev = reference_device();
    let p = kerr_free_flux(&dev, (0.38 * 2.0 * PI, 0.42 * 2.0 * PI)).unwrap();
    let el = t0.elapsed();
    let flux = p.phi_ext / (2.0 * PI);
    ck.expect((flux - 0.4026).abs() < 0.005, format!("root at {flux:.5} Φ0"));
    ck.expect(p.k_mhz.abs() * 1e3 < 0.1, format!("|K| = {:.2e} kHz", p.k_mhz.abs() * 1e3));
    ck.within(el, 10.0, "runtime");
    ck.done()
}

fn kerr_tunability() -> Outcome {
    let mut ck = Check::new();
    let t0 = Instant::now();
    let dev = reference_device();
    let fluxes: Vec<f64> = (0..=200).map(|k| 0.5 * 2.0 * PI * k as f64 / 200.0).collect();
    let pts = sweep(&fluxes, &dev).unwrap();
    let el = t0.elapsed();
    let kmin = pts.iter().map(|p| p.k_mhz).fold(f64::INFINITY, f64::min);
    let kmax = pts.iter().map(|p| p.k_mhz).fold(f64::NEG_INFINITY, f64::max);
    ck.expect((kmin / -5.0 - 1.0).abs() <= 0.3, format!("K min {kmin:.3} MHz (target -5 ± 30%)"));
    ck.expect((kmax / 6.0 - 1.0).abs() <= 0.3, format!("K max {kmax:.3} MHz (target +6 ± 30%)"));
    let kqs = cross_kerr_mhz(4.35, -420.0) * 1e3;
    ck.expect((kqs + 11.3).abs() <= 0.5, format!("K_qs {kqs:.2} kHz"));
    ck.within(el, 30.0, "runtime");
    ck.done()
}

/// Dense brute-force Kerr evolution through nalgebra's own exponential.
fn brute_force_cat(alpha: f64, kerr_mhz: f64, tau: f64, d: usize) -> State {
    let a = annihilation::<f64>(d);
    let gen = a.adjoint() * c(alpha, 0.0) - &a * c(alpha, 0.0);
    let disp = gen.exp();
    let n2 = DMatrix::from_fn(d, d, |i, j| if i == j { c((i * i) as f64, 0.0) } else { c(0.0, 0.0) });
    // H = −(K/2) n² in rad/ns
    let h = n2 * c(-0.5 * 2.0 * PI * kerr_mhz * 1e-3, 0.0);
    let u = (h * c(0.0, -tau)).exp();
    let mut vac = DVector::zeros(d);
    vac[0] = c(1.0, 0.0);
    State::normalized(res(d), u * disp * vac).unwrap()
}

fn cat_timing() -> Outcome {
    let mut ck = Check::new();
    let t0 = Instant::now();
    let d = 40;
    let l = res(d);
    let k = 5.21;
    let tau0 = kerr_period_ns(k);
    ck.expect((tau0 - 192.0).abs() <= 0.5, format!("τ0 = {tau0:.2} ns"));
    let a = 1.42;
    let cat2 = generate_kerr_cat(c(a, 0.0), k, 2, l).unwrap();
    let plus = State::coherent(l, c(a, 0.0)).unwrap();
    let minus = State::coherent(l, c(-a, 0.0)).unwrap();
    let analytic = State::normalized(l, plus.vector().unwrap() - minus.vector().unwrap() * c(0.0, 1.0)).unwrap();
    let f2 = fidelity_trace(&cat2, &analytic).unwrap();
    ck.expect(f2 >= 0.999, format!("m=2 at {:.1} ns: F = {f2:.9}", tau0 / 2.0));
    let rev = generate_kerr_cat(c(a, 0.0), k, 1, l).unwrap();
    let f1 = fidelity_trace(&rev, &minus).unwrap();
    ck.expect(f1 >= 1.0 - 1e-8, format!("m=1 revival: 1 - F = {:.1e}", 1.0 - f1));
    for m in [3usize, 4] {
        let s = generate_kerr_cat(c(a, 0.0), k, m, l).unwrap();
        let tau = tau0 / m as f64;
        let oracle = brute_force_cat(a, k, tau, d);
        let f = fidelity_trace(&s, &oracle).unwrap();
        ck.expect(f >= 0.999, format!("m={m} at {tau:.1} ns: F = {f:.9}"));
    }
    ck.within(t0.elapsed(), 10.0, "runtime");
    ck.done()
}

fn tomography_equivalence() -> Outcome {
    let mut ck = Check::new();
    let readout = RamseyReadout::ideal(4.35);
    let spec = GridSpec::square(2.5, 41).unwrap();
    let l20 = res(20);
    let coh = State::coherent(l20, c(1.0, 0.5)).unwrap();
    let cat = generate_kerr_cat(c(1.0, 0.0), 5.21, 2, l20).unwrap();
    let lossy = preserve_state(&cat, &[300.0], &[CollapseChannel::photon_loss(1.0).unwrap()], 0.0).unwrap().remove(0);
    let mut worst: f64 = 0.0;
    for s in [&coh, &cat, &lossy, &State::fock(l20, 3).unwrap()] {
        let wr = wigner_ramsey(s, &readout, &spec).unwrap();
        let we = wigner_exact(s, &spec).unwrap();
        let wc = wigner_exact_with(s, &spec, WignerMethod::Recurrence).unwrap();
        worst = worst.max(wr.max_abs_diff(&we).unwrap()).max(wr.max_abs_diff(&wc).unwrap());
    }
    ck.expect(worst < 1e-6, format!("Ramsey vs exact (both evaluators) max |ΔW| = {worst:.1e}"));

    let l = res(40);
    let a = 1.42;
    let cat40 = generate_kerr_cat(c(a, 0.0), 5.21, 2, l).unwrap();
    let other = State::coherent(l, c(0.6, 0.8)).unwrap();
    let t0 = Instant::now();
    let reference = GridSpec::reference(a);
    let wa = wigner_exact(&cat40, &reference).unwrap();
    let el = t0.elapsed();
    let wb = wigner_exact(&other, &reference).unwrap();
    let exact = fidelity_trace(&cat40, &other).unwrap();
    let fw = fidelity_wigner(&wa, &wb).unwrap();
    ck.expect((fw - exact).abs() < 1e-3, format!("reference grid: |F_W - F| = {:.1e}", (fw - exact).abs()));
    let self_f = fidelity_wigner(&wa, &wa).unwrap();
    ck.expect((self_f - 1.0).abs() < 1e-3, format!("self-overlap {self_f:.6}"));
    let h = a + 3.0;
    let mut errs = Vec::new();
    for n in [11usize, 21, 41, 81] {
        let g = GridSpec::square(h, n).unwrap();
        let x = wigner_exact_with(&cat40, &g, WignerMethod::Recurrence).unwrap();
        let y = wigner_exact_with(&other, &g, WignerMethod::Recurrence).unwrap();
        let xx = fidelity_wigner(&x, &x).unwrap();
        errs.push((fidelity_wigner(&x, &y).unwrap() - exact).abs().max((xx - 1.0).abs()));
    }
    // errors shrink until they reach the roundoff floor
    let tightening = errs.windows(2).all(|w| w[1] <= w[0] || w[1] < 1e-12) && errs[0] > errs[errs.len() - 1];
    let shown: Vec<String> = errs.iter().map(|e| format!("{e:.1e}")).collect();
    ck.expect(tightening, format!("refinement errors on 11/21/41/81 points {}", shown.join(", ")));
    ck.within(el, 60.0, "101x101 grid at D=40");
    ck.done()
}

fn measurement_closed_loop() -> Outcome {
    let mut ck = Check::new();
    let t0 = Instant::now();
    let drive = PulseEnvelope::new(PulseShape::Square, 1.0, 40.0, 0.0).unwrap();
    let amps: Vec<f64> =
        [0.25, 0.5, 1.0, 1.5, 2.0].iter().map(|n: &f64| n.sqrt() / linear_displacement(&drive, 1.0)).collect();
    let l = res(24);
    let mut single = Vec::new();
    for k in [0.5, 1.0, 2.0, -0.5, -1.0, -2.0] {
        let r = single_tone_kerr(&bare_point(k), &drive, &amps, l).unwrap();
        single.push((k, r.kerr_mhz));
        ck.expect((r.kerr_mhz / k - 1.0).abs() < 0.05, format!("single-tone {k} -> {:.4} MHz", r.kerr_mhz));
    }
    let dev = reference_device();
    let free = kerr_free_flux(&dev, (0.38 * 2.0 * PI, 0.42 * 2.0 * PI)).unwrap();
    let r = single_tone_kerr(&free, &drive, &amps, l).unwrap();
    ck.expect(r.kerr_mhz.abs() < 0.07, format!("Kerr-free point reads {:.2} kHz", r.kerr_mhz * 1e3));
    let opts = TwoToneOptions::default();
    for k in [2.0, 3.0, 5.21, -3.0] {
        let r = two_tone_kerr(&bare_point(k), res(6), &opts).unwrap();
        ck.expect((r.kerr_mhz / k - 1.0).abs() < 0.02, format!("two-tone {k} -> {:.4} MHz", r.kerr_mhz));
    }
    for k in [2.0, 3.0] {
        let a = single_tone_kerr(&bare_point(k), &drive, &amps, l).unwrap().kerr_mhz;
        let b = two_tone_kerr(&bare_point(k), res(6), &opts).unwrap().kerr_mhz;
        ck.expect(((a - b) / b).abs() < 0.1, format!("overlap at {k}: {a:.4} vs {b:.4} MHz"));
    }
    ck.within(t0.elapsed(), 60.0, "runtime");
    ck.done()
}

fn photon_calibration() -> Outcome {
    let mut ck = Check::new();
    let chi = 4.35;
    let shape = PulseShape::Gaussian { sigma_ns: 200.0 };
    let probe = PulseEnvelope::new(shape, pi_pulse_amplitude_mhz(shape, 1600.0).unwrap(), 1600.0, 0.0).unwrap();
    let grid = |nmax: usize| -> Vec<f64> {
        let lo = -chi * (nmax as f64 + 0.5);
        let n = 60 * (nmax + 1);
        (0..=n).map(|k| lo + (0.5 * chi - lo) * k as f64 / n as f64).collect()
    };
    let l = res(30);
    let s = State::coherent(l, c(1.92f64.sqrt(), 0.0)).unwrap();
    let mut spec = qubit_spectroscopy(&s, chi, &probe, &grid(9)).unwrap();
    let w: Vec<f64> = spec.locate_peaks(chi).unwrap().iter().map(|p| p.weight).collect();
    let nbar = fit_poisson(&w, 0.02).unwrap().mean_photons;
    ck.expect((nbar / 1.92 - 1.0).abs() < 0.02, format!("N̄ = {nbar:.4} (programmed 1.92)"));

    let g_true = 0.55;
    let amps = [1.0, 2.0, 3.0, 4.0];
    let states: Vec<State> = amps.iter().map(|v| State::coherent(l, c(g_true * v, 0.0)).unwrap()).collect();
    let spectra: Vec<_> = states.iter().map(|s| qubit_spectroscopy(s, chi, &probe, &grid(12)).unwrap()).collect();
    let pois = calibrate_photon_number(&spectra, &amps, &PhotonCalibrationOptions::new(chi)).unwrap();
    let grids: Vec<_> = states
        .iter()
        .map(|s| wigner_exact_with(s, &GridSpec::reference(g_true * 4.0), WignerMethod::Recurrence).unwrap())
        .collect();
    let wig = calibrate_photon_number_wigner(&grids, &amps).unwrap();
    let nmax = pois.mean_photons.iter().cloned().fold(0.0, f64::max);
    let rel = (pois.g() / wig.g() - 1.0).abs();
    ck.expect(rel < 0.03, format!("G Poisson {:.4} vs Wigner {:.4} (N̄ ≤ {nmax:.2})", pois.g(), wig.g()));
    ck.done()
}

fn preservation_contrast() -> Outcome {
    let mut ck = Check::new();
    let l = res(30);
    let a = 1.42;
    let cat = generate_kerr_cat(c(a, 0.0), 5.21, 2, l).unwrap();
    let dts: Vec<f64> = (0..=5).map(|k| 100.0 * k as f64).collect();
    let kept = preserve_state(&cat, &dts, &[], 0.0).unwrap();
    let worst = kept.iter().map(|s| fidelity_trace(s, &cat).unwrap()).fold(1.0, f64::min);
    ck.expect(worst >= 1.0 - 1e-6, format!("K_res = 0: min F = {worst:.9}"));
    let drift = preserve_state(&cat, &dts, &[], 0.5).unwrap();
    let f500 = fidelity_trace(&drift[5], &cat).unwrap();
    ck.expect(f500 < 0.9, format!("K_res = 0.5 MHz: F(500 ns) = {f500:.4}"));

    let protocol = PulseSequence::new(
        l,
        vec![
            Step::Displace { alpha_re: a, alpha_im: 0.0, duration_ns: None },
            Step::FluxWindow { kerr_mhz: 5.21, duration_ns: kerr_period_ns(5.21) / 2.0 },
        ],
    )
    .unwrap();
    let targets =
        [(0.0, 0.891), (100.0, 0.819), (200.0, 0.758)].map(|(t, f)| DecoherenceTarget { wait_ns: t, fidelity: f });
    let fit = calibrate_decoherence(&targets, &protocol, &State::fock(l, 0).unwrap(), &DecoherenceOptions::default())
        .unwrap();
    let pred: Vec<String> = fit.predictions.iter().map(|p| format!("{:.1}%", 100.0 * p)).collect();
    ck.expect(
        fit.rms < 0.02,
        format!("κ = {:.3}/μs gives {} (RMS {:.2} points)", fit.kappa_per_us, pred.join(", "), 100.0 * fit.rms),
    );
    ck.done()
}

fn snail_oracle(phi_ext: f64, dev: &SnailDevice) -> (f64, f64, f64) {
    let b = dev.beta;
    let el = dev.el_ghz / dev.ej_ghz;
    let u1 = |p: f64| b * p.sin() - ((phi_ext - p) / 3.0).sin();
    let (mut lo, mut hi) = (-PI, PI);
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
    (el * s2 / (el + s2), s3 * r.powi(3), (s4 - 3.0 * s3 * s3 / (el + s2)) * r.powi(4))
}

fn property_suites() -> Outcome {
    let mut ck = Check::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut herm, mut unit, mut trace, mut parity): (f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..100 {
        let d = rng.random_range(4..12);
        let l = HilbertLayout::with_qubit(d).unwrap();
        let mut p = RotatingFrameHamiltonian::new(l);
        p.detuning_res_mhz = rng.random_range(-5.0..5.0);
        p.kerr_mhz = rng.random_range(-6.0..6.0);
        p.chi_mhz = rng.random_range(-5.0..5.0);
        p.qubit_detuning_mhz = rng.random_range(-3.0..3.0);
        p.drive_amp_mhz = c(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let h = assemble_hamiltonian::<f64>(&p);
        herm = herm.max(h.hermiticity_deviation());
        let t = rng.random_range(1.0..200.0);
        unit = unit.max(propagator(&h, t).unwrap().unitarity_deviation());
        let chans = [
            CollapseChannel::photon_loss(rng.random_range(0.0..3.0)).unwrap(),
            CollapseChannel::new(ChannelKind::QubitDecay, rng.random_range(0.0..3.0)).unwrap(),
            CollapseChannel::new(ChannelKind::QubitDephasing, rng.random_range(0.0..3.0)).unwrap(),
        ];
        let s0 = State::basis(l, rng.random_range(0..2), rng.random_range(0..d / 2)).unwrap();
        let s = evolve_lindblad(&h, &chans, &s0, 20.0, 0.5).unwrap();
        let rho = s.density();
        trace = trace.max((s.trace() - 1.0).abs()).max((&rho - rho.adjoint()).camax());
        // drive-free Kerr evolution conserves photon parity
        let r = res(24);
        let alpha = c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let coh = State::coherent(r, alpha).unwrap();
        let mut pr = RotatingFrameHamiltonian::new(r);
        pr.kerr_mhz = p.kerr_mhz;
        pr.detuning_res_mhz = p.detuning_res_mhz;
        let moved = coh.apply(&propagator(&assemble_hamiltonian::<f64>(&pr), t).unwrap()).unwrap();
        parity = parity.max((moved.parity() - coh.parity()).abs());
    }
    ck.expect(herm < 1e-12, format!("Hermiticity deviation {herm:.1e}"));
    ck.expect(unit < 1e-10, format!("unitarity deviation {unit:.1e}"));
    ck.expect(trace < 1e-9, format!("Lindblad trace/Hermiticity deviation {trace:.1e}"));
    ck.expect(parity < 1e-10, format!("parity drift {parity:.1e}"));

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
    let r0 = State::basis(l, 1, 1).unwrap().density();
    let t = 80.0;
    let fine = lv.integrate(&r0, t / 4096.0, 4096);
    let steps = [16usize, 32, 64, 128];
    let xs: Vec<f64> = steps.iter().map(|&n| (t / n as f64).ln()).collect();
    let ys: Vec<f64> = steps.iter().map(|&n| (lv.integrate(&r0, t / n as f64, n) - &fine).camax().ln()).collect();
    let slope = linear_fit(&xs, &ys).unwrap().slope;
    ck.expect((slope - 4.0).abs() <= 0.3, format!("RK4 order slope {slope:.3}"));

    let dev = reference_device();
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let pe = rng.random_range(0.0..PI);
        let tc = taylor_coefficients(pe, &dev).unwrap();
        let (c2, c3, c4) = snail_oracle(pe, &dev);
        let r3 = if c3.abs() < 1e-8 { (tc.c3 - c3).abs() } else { (tc.c3 / c3 - 1.0).abs() };
        worst = worst.max((tc.c2 / c2 - 1.0).abs()).max(r3).max((tc.c4 / c4 - 1.0).abs());
    }
    ck.expect(worst < 1e-5, format!("Taylor coefficients vs oracle: worst relative {worst:.1e}"));

    let l = res(40);
    let states = [
        State::fock(l, 0).unwrap(),
        State::coherent(l, c(1.0, -0.7)).unwrap(),
        generate_kerr_cat(c(1.42, 0.0), 5.21, 3, l).unwrap(),
        State::fock(l, 4).unwrap(),
    ];
    let mut norm: f64 = 0.0;
    for s in &states {
        let g = wigner_exact_with(s, &GridSpec::square(5.0, 201).unwrap(), WignerMethod::Recurrence).unwrap();
        norm = norm.max((g.integral() - 1.0).abs());
    }
    ck.expect(norm < 5e-3, format!("Wigner normalization on 201x201: max |∫W - 1| = {norm:.1e}"));
    ck.done()
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("Kerr-free point", kerr_free_point),
        ("Kerr tunability", kerr_tunability),
        ("cat timing", cat_timing),
        ("tomography equivalence", tomography_equivalence),
        ("measurement closed loop", measurement_closed_loop),
        ("photon calibration", photon_calibration),
        ("preservation contrast", preservation_contrast),
        ("property suites", property_suites),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let start = Instant::now();
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let (ok, notes) = match catch_unwind(AssertUnwindSafe(run)) {
            Ok(out) => out,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                (false, vec![format!("aborted: {msg}")])
            }
        };
        let verdict = if ok { "PASS" } else { "FAIL" };
        println!("criterion {} [{name}]: {verdict} ({:.1} s) {}", i + 1, t0.elapsed().as_secs_f64(), notes.join("; "));
        if !ok {
            failed.push(i + 1);
        }
    }
    let total = start.elapsed().as_secs_f64();
    println!("acceptance total {total:.1} s");
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
