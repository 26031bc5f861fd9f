use std::f64::consts::PI;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use anyhow::{Context as _, Result};
use serde::Serialize;

use kerrcat::dynamics::{CollapseChannel, PulseEnvelope, PulseShape};
use kerrcat::hilbert::{fidelity_trace, HilbertLayout};
use kerrcat::io::{
    read_state, read_wigner_files, write_json, write_spectrum, write_state, write_sweep, write_wigner_files,
};
use kerrcat::numerics::LinearFit;
use kerrcat::protocols::{
    calibrate_decoherence, calibrate_photon_number, calibrate_photon_number_wigner, generate_kerr_cat,
    generate_odd_even_cat, kerr_period_ns, linear_displacement, odd_even_sequence, pi_pulse_amplitude_mhz,
    preserve_state, qubit_spectroscopy, single_tone_kerr, two_tone_kerr, Branch, DecoherenceFit, DecoherenceOptions,
    OddEvenOptions, PhotonCalibrationOptions, PulseSequence, RunOptions, ShotSampler, Step, TwoToneOptions,
};
use kerrcat::snail::{kerr_free_flux, mode_parameters, sweep, FluxPoint, SnailDevice};
use kerrcat::tomography::{
    fidelity_wigner, wigner_exact_with, wigner_ramsey, GridSpec, RamseyReadout, WignerGrid, WignerMethod,
};
use kerrcat::{State, C64};

use crate::config::{config_error, FileFormat, KerrRoute, ProtocolConfig, RunConfig, TomographyConfig, WignerRoute};
use crate::plot::{line_plot, wigner_heatmap, Series};

pub struct Context {
    pub cfg: RunConfig,
    /// Directory of the config file; relative input paths start here.
    pub base: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
}

impl Context {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let p = self.path(name);
        write_json(File::create(&p).with_context(|| format!("creating {}", p.display()))?, value)?;
        Ok(())
    }

    fn csv<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<()> {
        let p = self.path(name);
        let mut w = csv::Writer::from_path(&p).with_context(|| format!("creating {}", p.display()))?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    fn plots(&self) -> bool {
        self.cfg.output.plot
    }

    fn dim(&self) -> usize {
        self.cfg.simulation.resonator_dim
    }

    fn device(&self) -> Result<SnailDevice> {
        Ok(self.cfg.resolve_device(&self.base)?.0)
    }

    fn sampler(&self) -> Result<Option<ShotSampler>> {
        Ok(match self.cfg.simulation.shots {
            Some(n) => Some(ShotSampler::new(n, self.seed)?),
            None => None,
        })
    }
}

fn wrong_protocol(cmd: &str, wanted: &str, cfg: &RunConfig) -> anyhow::Error {
    config_error(format!("`{cmd}` needs protocol kind {wanted}, config has `{}`", cfg.protocol.kind()))
}

fn programmed_point(k_mhz: f64, chi_mhz: f64) -> FluxPoint {
    FluxPoint {
        phi_ext: f64::NAN,
        phi_min: f64::NAN,
        c2: f64::NAN,
        c3: f64::NAN,
        c4: f64::NAN,
        omega_s_ghz: f64::NAN,
        g3_mhz: f64::NAN,
        g4_mhz: f64::NAN,
        ks_mhz: k_mhz,
        kqs_mhz: 0.0,
        k_mhz,
        chi_mhz,
    }
}

fn kerr_free_chi(dev: &SnailDevice, cfg: &RunConfig) -> f64 {
    dev.chi.at(cfg.device.kerr_free_phi_ext_over_2pi * 2.0 * PI)
}

#[derive(Serialize)]
struct KerrFreeRoot {
    phi_ext_over_2pi: f64,
    k_mhz: f64,
}

#[derive(Serialize)]
struct FluxSweepReport {
    device: SnailDevice,
    points: usize,
    k_min_mhz: f64,
    k_max_mhz: f64,
    kerr_free_roots: Vec<KerrFreeRoot>,
}

pub fn flux_sweep(ctx: &Context) -> Result<()> {
    let ProtocolConfig::FluxSweep { phi_start_over_2pi, phi_stop_over_2pi, points } = ctx.cfg.protocol else {
        return Err(wrong_protocol("flux-sweep", "flux_sweep", &ctx.cfg));
    };
    let dev = ctx.device()?;
    let fluxes: Vec<f64> = if points == 1 {
        vec![phi_start_over_2pi * 2.0 * PI]
    } else {
        (0..points)
            .map(|k| {
                let f = phi_start_over_2pi + (phi_stop_over_2pi - phi_start_over_2pi) * k as f64 / (points - 1) as f64;
                f * 2.0 * PI
            })
            .collect()
    };
    let pts = sweep(&fluxes, &dev)?;
    let mut roots = Vec::new();
    for w in pts.windows(2) {
        if w[0].k_mhz.signum() != w[1].k_mhz.signum() {
            let p = kerr_free_flux(&dev, (w[0].phi_ext, w[1].phi_ext))?;
            roots.push(KerrFreeRoot { phi_ext_over_2pi: p.phi_ext / (2.0 * PI), k_mhz: p.k_mhz });
        }
    }
    write_sweep(File::create(ctx.path("sweep.csv"))?, &pts)?;
    if ctx.plots() {
        let x: Vec<f64> = pts.iter().map(|p| p.phi_ext / (2.0 * PI)).collect();
        let k: Vec<f64> = pts.iter().map(|p| p.k_mhz).collect();
        let marks: Vec<f64> = roots.iter().map(|r| r.phi_ext_over_2pi).collect();
        line_plot(&[Series { x: &x, y: &k }], &marks, &ctx.path("sweep.png"))?;
    }
    let report = FluxSweepReport {
        device: dev,
        points: pts.len(),
        k_min_mhz: pts.iter().map(|p| p.k_mhz).fold(f64::INFINITY, f64::min),
        k_max_mhz: pts.iter().map(|p| p.k_mhz).fold(f64::NEG_INFINITY, f64::max),
        kerr_free_roots: roots,
    };
    ctx.json("report.json", &report)
}

fn grid_for(t: &TomographyConfig, alpha: f64) -> Result<GridSpec> {
    Ok(GridSpec::square(t.half_width.unwrap_or(alpha + 3.0), t.points)?)
}

/// Wigner grid by the configured route; Ramsey readout draws shot noise on
/// the excited-state probability when shots are configured.
fn tomography(ctx: &Context, state: &State, t: &TomographyConfig, spec: &GridSpec, chi_mhz: f64) -> Result<WignerGrid> {
    let res = state.reduce_to_resonator();
    Ok(match t.method {
        WignerRoute::Exact => wigner_exact_with(&res, spec, WignerMethod::Reference)?,
        WignerRoute::Recurrence => wigner_exact_with(&res, spec, WignerMethod::Recurrence)?,
        WignerRoute::Ramsey => {
            let mut g = wigner_ramsey(&res, &RamseyReadout::ideal(chi_mhz), spec)?;
            if let Some(mut s) = ctx.sampler()? {
                for w in g.values.iter_mut() {
                    let pe = (0.5 * (1.0 + 0.5 * PI * *w)).clamp(0.0, 1.0);
                    *w = 2.0 / PI * (2.0 * s.sample(pe)? - 1.0);
                }
            }
            g
        }
    })
}

#[derive(Serialize)]
struct CatReport {
    protocol: &'static str,
    alpha_re: f64,
    alpha_im: f64,
    duration_ns: f64,
    fidelity_vs_ideal: f64,
    fidelity_vs_analytic: Option<f64>,
    success_probability: Option<f64>,
    parity: f64,
    mean_photons: f64,
    wigner_method: WignerRoute,
    wigner_fidelity_vs_ideal: f64,
    wigner_min: f64,
    wigner_integral: f64,
    channels: Vec<CollapseChannel>,
}

fn cat_superposition(layout: HilbertLayout, alpha: C64, weight: C64) -> Result<State> {
    let p = State::coherent(layout, alpha)?;
    let m = State::coherent(layout, -alpha)?;
    let v = p.vector().expect("pure") + m.vector().expect("pure") * weight;
    Ok(State::normalized(layout, v)?)
}

pub fn cat(ctx: &Context) -> Result<()> {
    let d = ctx.dim();
    let opts = |channels: &[CollapseChannel]| RunOptions {
        channels: channels.to_vec(),
        dt_ns: ctx.cfg.simulation.dt_ns,
        checked: true,
    };
    let (name, alpha, state, ideal, analytic, success, duration, chi, tomo, channels) = match &ctx.cfg.protocol {
        ProtocolConfig::KerrCat { alpha_re, alpha_im, kerr_mhz, components, channels, tomography } => {
            let l = HilbertLayout::resonator(d)?;
            let alpha = C64::new(*alpha_re, *alpha_im);
            let ideal = generate_kerr_cat(alpha, *kerr_mhz, *components, l)?;
            let tau = kerr_period_ns(*kerr_mhz) / *components as f64;
            let state = if channels.is_empty() {
                ideal.clone()
            } else {
                let seq = PulseSequence::new(
                    l,
                    vec![
                        Step::Displace { alpha_re: alpha.re, alpha_im: alpha.im, duration_ns: None },
                        Step::FluxWindow { kerr_mhz: *kerr_mhz, duration_ns: tau },
                    ],
                )?;
                seq.run_with(&State::fock(l, 0)?, &opts(channels))?.state
            };
            let analytic = match components {
                2 => Some(cat_superposition(l, alpha, C64::new(0.0, -1.0))?),
                1 => Some(State::coherent(l, -alpha)?),
                _ => None,
            };
            let chi = kerr_free_chi(&ctx.device()?, &ctx.cfg);
            ("kerr_cat", alpha, state, ideal, analytic, None, tau, chi, tomography, channels)
        }
        ProtocolConfig::OddEvenCat { alpha_re, alpha_im, branch, window, chi_mhz, channels, tomography } => {
            let lq = HilbertLayout::with_qubit(d)?;
            let l = HilbertLayout::resonator(d)?;
            let alpha = C64::new(*alpha_re, *alpha_im);
            let chi = match chi_mhz {
                Some(c) => *c,
                None => kerr_free_chi(&ctx.device()?, &ctx.cfg),
            };
            let oe = OddEvenOptions { window: *window, pulse: None };
            let ideal_run = generate_odd_even_cat(alpha, chi, *branch, lq, &oe)?;
            let seq = odd_even_sequence(alpha, chi, *branch, lq, &oe)?;
            let (state, success) = if channels.is_empty() {
                (ideal_run.state.clone(), ideal_run.success_probability)
            } else {
                let run = seq.run_with(&State::basis(lq, 0, 0)?, &opts(channels))?;
                let p = run.records.last().map(|r| r.value).unwrap_or(1.0);
                (run.state.reduce_to_resonator(), p)
            };
            let sign = match branch {
                Branch::Odd => -1.0,
                Branch::Even => 1.0,
            };
            let analytic = cat_superposition(l, alpha, C64::new(sign, 0.0))?;
            let name = "odd_even_cat";
            (
                name,
                alpha,
                state,
                ideal_run.state,
                Some(analytic),
                Some(success),
                seq.duration_ns(),
                chi,
                tomography,
                channels,
            )
        }
        _ => return Err(wrong_protocol("cat", "kerr_cat or odd_even_cat", &ctx.cfg)),
    };
    let spec = grid_for(tomo, alpha.norm())?;
    let w = tomography(ctx, &state, tomo, &spec, chi)?;
    let w_ideal = wigner_exact_with(&ideal.reduce_to_resonator(), &spec, WignerMethod::Reference)?;
    write_state(File::create(ctx.path("state.json"))?, &state)?;
    write_wigner_files(&ctx.path("wigner.csv"), &ctx.path("wigner.json"), &w)?;
    write_wigner_files(&ctx.path("ideal_wigner.csv"), &ctx.path("ideal_wigner.json"), &w_ideal)?;
    if ctx.plots() {
        wigner_heatmap(&w, &ctx.path("wigner.png"))?;
    }
    let report = CatReport {
        protocol: name,
        alpha_re: alpha.re,
        alpha_im: alpha.im,
        duration_ns: duration,
        fidelity_vs_ideal: fidelity_trace(&state, &ideal)?,
        fidelity_vs_analytic: analytic.map(|a| fidelity_trace(&state, &a)).transpose()?,
        success_probability: success,
        parity: state.parity(),
        mean_photons: state.mean_photon_number(),
        wigner_method: tomo.method,
        wigner_fidelity_vs_ideal: fidelity_wigner(&w, &w_ideal)?,
        wigner_min: w.values.iter().copied().fold(f64::INFINITY, f64::min),
        wigner_integral: w.integral(),
        channels: channels.clone(),
    };
    ctx.json("report.json", &report)
}

#[derive(Serialize)]
struct KerrRow {
    phi_ext_over_2pi: Option<f64>,
    programmed_k_mhz: f64,
    single_tone_k_mhz: Option<f64>,
    two_tone_k_mhz: Option<f64>,
    single_tone_error: Option<String>,
    two_tone_error: Option<String>,
}

fn outcome(r: kerrcat::Result<f64>) -> (Option<f64>, Option<String>) {
    match r {
        Ok(v) => (Some(v), None),
        Err(e) => (None, Some(format!("{}: {e}", e.name()))),
    }
}

pub fn measure_kerr(ctx: &Context) -> Result<()> {
    let ProtocolConfig::MeasureKerr {
        route,
        kerr_mhz,
        phi_ext_over_2pi,
        drive_duration_ns,
        mean_photons,
        probe_duration_ns,
    } = &ctx.cfg.protocol
    else {
        return Err(wrong_protocol("measure-kerr", "measure_kerr", &ctx.cfg));
    };
    let mut points: Vec<(Option<f64>, FluxPoint)> = Vec::new();
    if !phi_ext_over_2pi.is_empty() || kerr_mhz.is_empty() {
        let dev = ctx.device()?;
        for f in phi_ext_over_2pi {
            points.push((Some(*f), mode_parameters(f * 2.0 * PI, &dev)?));
        }
    }
    let chi = ctx.cfg.device.chi_mhz.at(ctx.cfg.device.kerr_free_phi_ext_over_2pi * 2.0 * PI);
    for k in kerr_mhz {
        points.push((None, programmed_point(*k, chi)));
    }
    let drive = PulseEnvelope::new(PulseShape::Square, 1.0, *drive_duration_ns, 0.0)?;
    let amps: Vec<f64> = mean_photons.iter().map(|n| n.sqrt() / linear_displacement(&drive, 1.0)).collect();
    let single_layout = HilbertLayout::resonator(ctx.dim())?;
    let two_layout = HilbertLayout::resonator(ctx.dim().min(8))?;
    let opts = TwoToneOptions { probe_duration_ns: *probe_duration_ns, ..TwoToneOptions::default() };
    let rows: Vec<KerrRow> = points
        .iter()
        .map(|(flux, p)| {
            let (s, se) = if *route != KerrRoute::TwoTone {
                outcome(single_tone_kerr(p, &drive, &amps, single_layout).map(|r| r.kerr_mhz))
            } else {
                (None, None)
            };
            let (t, te) = if *route != KerrRoute::SingleTone {
                outcome(two_tone_kerr(p, two_layout, &opts).map(|r| r.kerr_mhz))
            } else {
                (None, None)
            };
            KerrRow {
                phi_ext_over_2pi: *flux,
                programmed_k_mhz: p.k_mhz,
                single_tone_k_mhz: s,
                two_tone_k_mhz: t,
                single_tone_error: se,
                two_tone_error: te,
            }
        })
        .collect();
    ctx.csv("kerr.csv", &rows)?;
    ctx.json("report.json", &rows)
}

#[derive(Serialize)]
struct PreserveRow {
    residual_kerr_mhz: f64,
    wait_ns: f64,
    fidelity: f64,
}

#[derive(Serialize)]
struct PreserveReport {
    generation_time_ns: f64,
    channels: Vec<CollapseChannel>,
    decoherence_fit: Option<DecoherenceFit>,
    rows: Vec<PreserveRow>,
}

pub fn preserve(ctx: &Context) -> Result<()> {
    let ProtocolConfig::Preserve {
        alpha_re,
        alpha_im,
        kerr_mhz,
        components,
        residual_kerr_mhz,
        waits_ns,
        channels,
        decoherence_targets,
    } = &ctx.cfg.protocol
    else {
        return Err(wrong_protocol("preserve", "preserve", &ctx.cfg));
    };
    let l = HilbertLayout::resonator(ctx.dim())?;
    let alpha = C64::new(*alpha_re, *alpha_im);
    let ideal = generate_kerr_cat(alpha, *kerr_mhz, *components, l)?;
    let tau = kerr_period_ns(*kerr_mhz) / *components as f64;
    let seq = PulseSequence::new(
        l,
        vec![
            Step::Displace { alpha_re: alpha.re, alpha_im: alpha.im, duration_ns: None },
            Step::FluxWindow { kerr_mhz: *kerr_mhz, duration_ns: tau },
        ],
    )?;
    let vac = State::fock(l, 0)?;
    let dt = ctx.cfg.simulation.dt_ns;
    let (channels, fit) = if decoherence_targets.is_empty() {
        (channels.clone(), None)
    } else {
        let opts = DecoherenceOptions { dt_ns: dt, ..DecoherenceOptions::default() };
        let fit = calibrate_decoherence(decoherence_targets, &seq, &vac, &opts)?;
        (fit.channels.clone(), Some(fit))
    };
    let prepared = if channels.is_empty() {
        ideal.clone()
    } else {
        seq.run_with(&vac, &RunOptions { channels: channels.clone(), dt_ns: dt, checked: true })?.state
    };
    let mut rows = Vec::new();
    for &k in residual_kerr_mhz {
        let snaps = preserve_state(&prepared, waits_ns, &channels, k)?;
        for (t, s) in waits_ns.iter().zip(&snaps) {
            rows.push(PreserveRow { residual_kerr_mhz: k, wait_ns: *t, fidelity: fidelity_trace(s, &ideal)? });
        }
    }
    ctx.csv("preserve.csv", &rows)?;
    if ctx.plots() {
        let per: Vec<(Vec<f64>, Vec<f64>)> = residual_kerr_mhz
            .iter()
            .map(|k| {
                let sel: Vec<&PreserveRow> = rows.iter().filter(|r| r.residual_kerr_mhz == *k).collect();
                (sel.iter().map(|r| r.wait_ns).collect(), sel.iter().map(|r| r.fidelity).collect())
            })
            .collect();
        let series: Vec<Series> = per.iter().map(|(x, y)| Series { x, y }).collect();
        line_plot(&series, &[], &ctx.path("preserve.png"))?;
    }
    ctx.json("report.json", &PreserveReport { generation_time_ns: tau, channels, decoherence_fit: fit, rows })
}

#[derive(Serialize)]
struct DeviceCalibrationReport {
    device: SnailDevice,
    rms_ghz: f64,
    residuals_ghz: Vec<f64>,
    iterations: usize,
}

#[derive(Serialize)]
struct PhotonCalibrationReport {
    g_programmed: f64,
    poisson_g: f64,
    poisson_fit: LinearFit,
    poisson_mean_photons: Vec<f64>,
    poisson_rms: Vec<f64>,
    wigner_g: f64,
    wigner_fit: LinearFit,
    relative_difference: f64,
    shots: Option<u64>,
}

pub fn calibrate(ctx: &Context) -> Result<()> {
    match &ctx.cfg.protocol {
        ProtocolConfig::DeviceCalibration { .. } => {
            let (dev, report) = ctx.cfg.resolve_device(&ctx.base)?;
            let r = report.expect("device_calibration always has a curve");
            ctx.json("device.json", &dev)?;
            ctx.json(
                "report.json",
                &DeviceCalibrationReport {
                    device: dev,
                    rms_ghz: r.rms_ghz,
                    residuals_ghz: r.residuals_ghz,
                    iterations: r.iterations,
                },
            )
        }
        ProtocolConfig::PhotonCalibration { g_per_amp, amplitudes, probe_sigma_ns, rms_threshold } => {
            let l = HilbertLayout::resonator(ctx.dim())?;
            let chi = kerr_free_chi(&ctx.device()?, &ctx.cfg);
            let shape = PulseShape::Gaussian { sigma_ns: *probe_sigma_ns };
            let dur = 8.0 * probe_sigma_ns;
            let probe = PulseEnvelope::new(shape, pi_pulse_amplitude_mhz(shape, dur)?, dur, 0.0)?;
            let amax = amplitudes.iter().fold(0.0f64, |m, a| m.max(a.abs()));
            let nbar_max = (g_per_amp * amax).powi(2);
            let nmax = (nbar_max + 6.0 * nbar_max.sqrt() + 3.0).ceil() as usize;
            let lo = -chi.abs() * (nmax as f64 + 0.5);
            let npts = 60 * (nmax + 1);
            let freqs: Vec<f64> = (0..=npts).map(|k| lo + (0.5 * chi.abs() - lo) * k as f64 / npts as f64).collect();
            let freqs: Vec<f64> = if chi < 0.0 { freqs.iter().rev().map(|f| -f).collect() } else { freqs };
            let mut sampler = ctx.sampler()?;
            let mut spectra = Vec::new();
            let mut grids = Vec::new();
            for (k, v) in amplitudes.iter().enumerate() {
                let s = State::coherent(l, C64::new(g_per_amp * v, 0.0))?;
                let mut spec = qubit_spectroscopy(&s, chi, &probe, &freqs)?;
                if let Some(sm) = sampler.as_mut() {
                    spec = sm.sample_spectrum(&spec)?;
                }
                write_spectrum(File::create(ctx.path(&format!("spectrum_{k}.csv")))?, &spec)?;
                spectra.push(spec);
                grids.push(wigner_exact_with(&s, &GridSpec::reference(g_per_amp * amax), WignerMethod::Recurrence)?);
            }
            let opts = PhotonCalibrationOptions { chi_mhz: chi, rms_threshold: *rms_threshold };
            let pois = calibrate_photon_number(&spectra, amplitudes, &opts)?;
            let wig = calibrate_photon_number_wigner(&grids, amplitudes)?;
            ctx.json(
                "report.json",
                &PhotonCalibrationReport {
                    g_programmed: *g_per_amp,
                    poisson_g: pois.g(),
                    poisson_fit: pois.scale,
                    poisson_mean_photons: pois.mean_photons.clone(),
                    poisson_rms: pois.residuals.clone(),
                    wigner_g: wig.g(),
                    wigner_fit: wig.scale,
                    relative_difference: pois.g() / wig.g() - 1.0,
                    shots: ctx.cfg.simulation.shots,
                },
            )
        }
        _ => Err(wrong_protocol("calibrate", "device_calibration or photon_calibration", &ctx.cfg)),
    }
}

#[derive(Serialize)]
struct WignerReport {
    method: WignerRoute,
    grid: GridSpec,
    integral: f64,
    min: f64,
    max: f64,
    convention: String,
}

pub fn wigner(ctx: &Context) -> Result<()> {
    let ProtocolConfig::Wigner { state, tomography: tomo } = &ctx.cfg.protocol else {
        return Err(wrong_protocol("wigner", "wigner", &ctx.cfg));
    };
    let path = ctx.base.join(state);
    let s = read_state(File::open(&path).map_err(|e| config_error(format!("{}: {e}", path.display())))?)?;
    let alpha = s.reduce_to_resonator().mean_photon_number().sqrt();
    let spec = grid_for(tomo, alpha)?;
    let chi = ctx.cfg.device.chi_mhz.at(ctx.cfg.device.kerr_free_phi_ext_over_2pi * 2.0 * PI);
    let w = tomography(ctx, &s, tomo, &spec, chi)?;
    write_wigner_files(&ctx.path("wigner.csv"), &ctx.path("wigner.json"), &w)?;
    if ctx.plots() {
        wigner_heatmap(&w, &ctx.path("wigner.png"))?;
    }
    ctx.json(
        "report.json",
        &WignerReport {
            method: tomo.method,
            grid: spec,
            integral: w.integral(),
            min: w.values.iter().copied().fold(f64::INFINITY, f64::min),
            max: w.values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            convention: w.convention.clone(),
        },
    )
}

#[derive(Serialize)]
struct FidelityReport {
    format: FileFormat,
    measured: PathBuf,
    reference: PathBuf,
    fidelity: f64,
}

/// Sidecar path of a Wigner CSV: same stem, `.json`.
pub fn sidecar_of(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

pub fn fidelity(ctx: &Context) -> Result<()> {
    let ProtocolConfig::Fidelity { measured, reference, format } = &ctx.cfg.protocol else {
        return Err(wrong_protocol("fidelity", "fidelity", &ctx.cfg));
    };
    let (m, r) = (ctx.base.join(measured), ctx.base.join(reference));
    for p in [&m, &r] {
        if !p.exists() {
            return Err(config_error(format!("{} does not exist", p.display())));
        }
    }
    let f = match format {
        FileFormat::Wigner => {
            let a = read_wigner_files(&m, &sidecar_of(&m))?;
            let b = read_wigner_files(&r, &sidecar_of(&r))?;
            fidelity_wigner(&a, &b)?
        }
        FileFormat::State => fidelity_trace(&read_state(File::open(&m)?)?, &read_state(File::open(&r)?)?)?,
    };
    ctx.json(
        "report.json",
        &FidelityReport { format: *format, measured: measured.clone(), reference: reference.clone(), fidelity: f },
    )
}

pub fn ensure_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating output directory {}", out.display()))
}
