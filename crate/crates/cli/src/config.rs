//! Run configuration. Every physical key carries its unit as a suffix
//! (`_ghz`, `_mhz`, `_ns`, `_per_us`); `alpha_*`, `beta`, `components` and
//! `*_over_2pi` fluxes are dimensionless. Unknown keys are rejected.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use kerrcat::dynamics::CollapseChannel;
use kerrcat::io::read_flux_curve_file;
use kerrcat::protocols::{Branch, ConditionWindow, DecoherenceTarget};
use kerrcat::snail::{calibrate, solve_anchors, Anchors, CalibrationOptions, CalibrationReport, ChiTable, SnailDevice};

/// Problems with the configuration itself (exit code 2).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(ConfigError(msg.into()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub device: DeviceConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
    pub protocol: ProtocolConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceConfig {
    #[serde(default = "defaults::beta")]
    pub beta: f64,
    #[serde(default = "defaults::ej")]
    pub ej_ghz: f64,
    /// Explicit energies; when both are absent they are solved from the
    /// anchors or fitted to `calibration_curve`.
    pub el_ghz: Option<f64>,
    pub ec_ghz: Option<f64>,
    /// CSV `phi_ext_over_2pi,omega_s_ghz`, relative to the config file.
    pub calibration_curve: Option<PathBuf>,
    #[serde(default = "defaults::kerr_free")]
    pub kerr_free_phi_ext_over_2pi: f64,
    #[serde(default = "defaults::omega_s0")]
    pub omega_s0_ghz: f64,
    /// Constant χ in MHz, or `[[phi_ext_over_2pi, chi_mhz], ...]`.
    #[serde(default = "defaults::chi")]
    pub chi_mhz: ChiTable,
    #[serde(default = "defaults::kq")]
    pub kq_mhz: f64,
    #[serde(default = "defaults::omega_q")]
    pub omega_q_ghz: f64,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        Self {
            beta: defaults::beta(),
            ej_ghz: defaults::ej(),
            el_ghz: None,
            ec_ghz: None,
            calibration_curve: None,
            kerr_free_phi_ext_over_2pi: defaults::kerr_free(),
            omega_s0_ghz: defaults::omega_s0(),
            chi_mhz: defaults::chi(),
            kq_mhz: defaults::kq(),
            omega_q_ghz: defaults::omega_q(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    #[serde(default = "defaults::dim")]
    pub resonator_dim: usize,
    #[serde(default = "defaults::dt")]
    pub dt_ns: f64,
    /// Binomial readout noise with this many shots; expectation values when
    /// absent.
    pub shots: Option<u64>,
    pub threads: Option<usize>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self { resonator_dim: defaults::dim(), dt_ns: defaults::dt(), shots: None, threads: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Output directory, relative to the working directory.
    pub dir: Option<PathBuf>,
    #[serde(default = "defaults::yes")]
    pub plot: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: None, plot: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WignerRoute {
    Exact,
    Recurrence,
    Ramsey,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TomographyConfig {
    #[serde(default = "defaults::route")]
    pub method: WignerRoute,
    /// Grid half-width in units of α; defaults to `|α| + 3`.
    pub half_width: Option<f64>,
    #[serde(default = "defaults::grid_points")]
    pub points: usize,
}

impl Default for TomographyConfig {
    fn default() -> Self {
        Self { method: defaults::route(), half_width: None, points: defaults::grid_points() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KerrRoute {
    SingleTone,
    TwoTone,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileFormat {
    Wigner,
    State,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProtocolConfig {
    FluxSweep {
        phi_start_over_2pi: f64,
        phi_stop_over_2pi: f64,
        #[serde(default = "defaults::sweep_points")]
        points: usize,
    },
    KerrCat {
        alpha_re: f64,
        #[serde(default)]
        alpha_im: f64,
        #[serde(default = "defaults::kerr")]
        kerr_mhz: f64,
        #[serde(default = "defaults::components")]
        components: usize,
        #[serde(default)]
        channels: Vec<CollapseChannel>,
        #[serde(default)]
        tomography: TomographyConfig,
    },
    OddEvenCat {
        alpha_re: f64,
        #[serde(default)]
        alpha_im: f64,
        branch: Branch,
        #[serde(default = "defaults::window")]
        window: ConditionWindow,
        /// Defaults to the device χ at the Kerr-free flux.
        chi_mhz: Option<f64>,
        #[serde(default)]
        channels: Vec<CollapseChannel>,
        #[serde(default)]
        tomography: TomographyConfig,
    },
    MeasureKerr {
        #[serde(default = "defaults::kerr_route")]
        route: KerrRoute,
        /// Programmed Kerr values.
        #[serde(default)]
        kerr_mhz: Vec<f64>,
        /// Flux points whose device Kerr is measured.
        #[serde(default)]
        phi_ext_over_2pi: Vec<f64>,
        #[serde(default = "defaults::drive_duration")]
        drive_duration_ns: f64,
        #[serde(default = "defaults::mean_photons")]
        mean_photons: Vec<f64>,
        #[serde(default = "defaults::probe_duration")]
        probe_duration_ns: f64,
    },
    Preserve {
        alpha_re: f64,
        #[serde(default)]
        alpha_im: f64,
        #[serde(default = "defaults::kerr")]
        kerr_mhz: f64,
        #[serde(default = "defaults::components")]
        components: usize,
        residual_kerr_mhz: Vec<f64>,
        waits_ns: Vec<f64>,
        #[serde(default)]
        channels: Vec<CollapseChannel>,
        /// Fit photon loss to these fidelities before the waits.
        #[serde(default)]
        decoherence_targets: Vec<DecoherenceTarget>,
    },
    DeviceCalibration {
        #[serde(default)]
        fit_ej: bool,
        rms_threshold_ghz: Option<f64>,
    },
    PhotonCalibration {
        /// Programmed `√N̄` per unit drive amplitude.
        g_per_amp: f64,
        amplitudes: Vec<f64>,
        #[serde(default = "defaults::probe_sigma")]
        probe_sigma_ns: f64,
        #[serde(default = "defaults::poisson_rms")]
        rms_threshold: f64,
    },
    Wigner {
        state: PathBuf,
        #[serde(default)]
        tomography: TomographyConfig,
    },
    Fidelity {
        measured: PathBuf,
        reference: PathBuf,
        format: FileFormat,
    },
}

impl ProtocolConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            ProtocolConfig::FluxSweep { .. } => "flux_sweep",
            ProtocolConfig::KerrCat { .. } => "kerr_cat",
            ProtocolConfig::OddEvenCat { .. } => "odd_even_cat",
            ProtocolConfig::MeasureKerr { .. } => "measure_kerr",
            ProtocolConfig::Preserve { .. } => "preserve",
            ProtocolConfig::DeviceCalibration { .. } => "device_calibration",
            ProtocolConfig::PhotonCalibration { .. } => "photon_calibration",
            ProtocolConfig::Wigner { .. } => "wigner",
            ProtocolConfig::Fidelity { .. } => "fidelity",
        }
    }
}

mod defaults {
    use super::*;

    pub fn beta() -> f64 {
        0.095
    }
    pub fn ej() -> f64 {
        830.0
    }
    pub fn kerr_free() -> f64 {
        0.4026
    }
    pub fn omega_s0() -> f64 {
        4.223
    }
    pub fn chi() -> ChiTable {
        ChiTable::Constant(4.35)
    }
    pub fn kq() -> f64 {
        -420.0
    }
    pub fn omega_q() -> f64 {
        5.095
    }
    pub fn dim() -> usize {
        40
    }
    pub fn dt() -> f64 {
        0.5
    }
    pub fn yes() -> bool {
        true
    }
    pub fn route() -> WignerRoute {
        WignerRoute::Exact
    }
    pub fn grid_points() -> usize {
        101
    }
    pub fn sweep_points() -> usize {
        201
    }
    pub fn kerr() -> f64 {
        5.21
    }
    pub fn components() -> usize {
        2
    }
    pub fn window() -> ConditionWindow {
        ConditionWindow::Vacuum
    }
    pub fn kerr_route() -> KerrRoute {
        KerrRoute::Both
    }
    pub fn drive_duration() -> f64 {
        40.0
    }
    pub fn mean_photons() -> Vec<f64> {
        vec![0.25, 0.5, 1.0, 1.5, 2.0]
    }
    pub fn probe_duration() -> f64 {
        2000.0
    }
    pub fn probe_sigma() -> f64 {
        200.0
    }
    pub fn poisson_rms() -> f64 {
        0.02
    }
}

/// Parses a config document; parse errors carry line and column.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = serde_json::from_str(text)
        .map_err(|e| config_error(format!("line {} column {}: {e}", e.line(), e.column())))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| match e.downcast::<ConfigError>() {
        Ok(c) => config_error(format!("{}: {}", path.display(), c.0)),
        Err(e) => e,
    })
}

fn finite(name: &str, v: f64) -> Result<()> {
    if !v.is_finite() {
        bail!(ConfigError(format!("{name} must be finite")));
    }
    Ok(())
}

fn non_empty<T>(name: &str, v: &[T]) -> Result<()> {
    if v.is_empty() {
        bail!(ConfigError(format!("{name} must not be empty")));
    }
    Ok(())
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.device;
        for (n, v) in [
            ("device.beta", d.beta),
            ("device.ej_ghz", d.ej_ghz),
            ("device.kerr_free_phi_ext_over_2pi", d.kerr_free_phi_ext_over_2pi),
            ("device.omega_s0_ghz", d.omega_s0_ghz),
            ("device.kq_mhz", d.kq_mhz),
            ("device.omega_q_ghz", d.omega_q_ghz),
            ("simulation.dt_ns", self.simulation.dt_ns),
        ] {
            finite(n, v)?;
        }
        if d.el_ghz.is_some() != d.ec_ghz.is_some() {
            bail!(ConfigError("device.el_ghz and device.ec_ghz must be given together".into()));
        }
        if self.simulation.resonator_dim < 2 {
            bail!(ConfigError("simulation.resonator_dim must be >= 2".into()));
        }
        if self.simulation.dt_ns <= 0.0 {
            bail!(ConfigError("simulation.dt_ns must be > 0".into()));
        }
        if self.simulation.shots == Some(0) {
            bail!(ConfigError("simulation.shots must be > 0".into()));
        }
        if self.simulation.threads == Some(0) {
            bail!(ConfigError("simulation.threads must be > 0".into()));
        }
        match &self.protocol {
            ProtocolConfig::FluxSweep { phi_start_over_2pi, phi_stop_over_2pi, points } => {
                finite("protocol.phi_start_over_2pi", *phi_start_over_2pi)?;
                finite("protocol.phi_stop_over_2pi", *phi_stop_over_2pi)?;
                if *points == 0 {
                    bail!(ConfigError("protocol.points must be >= 1".into()));
                }
                if *points > 1 && phi_stop_over_2pi <= phi_start_over_2pi {
                    bail!(ConfigError("flux range is empty: phi_stop_over_2pi must exceed phi_start_over_2pi".into()));
                }
            }
            ProtocolConfig::KerrCat { components, tomography, .. } => {
                if *components == 0 {
                    bail!(ConfigError("protocol.components must be >= 1".into()));
                }
                validate_tomography(tomography)?;
            }
            ProtocolConfig::OddEvenCat { tomography, .. } => validate_tomography(tomography)?,
            ProtocolConfig::MeasureKerr { kerr_mhz, phi_ext_over_2pi, mean_photons, .. } => {
                if kerr_mhz.is_empty() && phi_ext_over_2pi.is_empty() {
                    bail!(ConfigError("measure_kerr needs kerr_mhz or phi_ext_over_2pi values".into()));
                }
                if mean_photons.len() < 2 {
                    bail!(ConfigError("protocol.mean_photons needs at least two values".into()));
                }
            }
            ProtocolConfig::Preserve { residual_kerr_mhz, waits_ns, decoherence_targets, .. } => {
                non_empty("protocol.waits_ns", waits_ns)?;
                non_empty("protocol.residual_kerr_mhz", residual_kerr_mhz)?;
                if waits_ns.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
                    bail!(ConfigError("protocol.waits_ns entries must be >= 0".into()));
                }
                if decoherence_targets.len() == 1 {
                    bail!(ConfigError("protocol.decoherence_targets needs at least two entries".into()));
                }
            }
            ProtocolConfig::DeviceCalibration { .. } => {
                if d.calibration_curve.is_none() {
                    bail!(ConfigError("device_calibration needs device.calibration_curve".into()));
                }
            }
            ProtocolConfig::PhotonCalibration { amplitudes, .. } => {
                if amplitudes.len() < 2 {
                    bail!(ConfigError("protocol.amplitudes needs at least two values".into()));
                }
            }
            ProtocolConfig::Wigner { tomography, .. } => validate_tomography(tomography)?,
            ProtocolConfig::Fidelity { .. } => {}
        }
        Ok(())
    }

    /// Device with all energies resolved. Curve paths are taken relative to
    /// `base`.
    pub fn resolve_device(&self, base: &Path) -> Result<(SnailDevice, Option<CalibrationReport>)> {
        let d = &self.device;
        let template = SnailDevice {
            beta: d.beta,
            ej_ghz: d.ej_ghz,
            el_ghz: d.el_ghz.unwrap_or(950.0),
            ec_ghz: d.ec_ghz.unwrap_or(0.0124),
            kq_mhz: d.kq_mhz,
            omega_q_ghz: d.omega_q_ghz,
            chi: d.chi_mhz.clone(),
        };
        template.validate().map_err(|e| config_error(format!("device: {e}")))?;
        if d.el_ghz.is_some() {
            return Ok((template, None));
        }
        let anchors =
            Anchors { kerr_free_phi_ext: d.kerr_free_phi_ext_over_2pi * 2.0 * PI, omega_s0_ghz: d.omega_s0_ghz };
        let anchored = solve_anchors(&template, &anchors)?;
        match &d.calibration_curve {
            None => Ok((anchored, None)),
            Some(p) => {
                let path = base.join(p);
                let curve =
                    read_flux_curve_file(&path).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
                let (fit_ej, rms_threshold_ghz) = match &self.protocol {
                    ProtocolConfig::DeviceCalibration { fit_ej, rms_threshold_ghz } => (*fit_ej, *rms_threshold_ghz),
                    _ => (false, None),
                };
                let opts = CalibrationOptions { fit_ej, rms_threshold_ghz, ..CalibrationOptions::default() };
                let report = calibrate(&curve, Some(&anchors), &anchored, &opts)
                    .with_context(|| format!("calibrating against {}", path.display()))?;
                Ok((report.device.clone(), Some(report)))
            }
        }
    }
}

fn validate_tomography(t: &TomographyConfig) -> Result<()> {
    if t.points < 2 {
        bail!(ConfigError("tomography.points must be >= 2".into()));
    }
    if let Some(h) = t.half_width {
        if !(h > 0.0 && h.is_finite()) {
            bail!(ConfigError("tomography.half_width must be > 0".into()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = parse_config(r#"{"protocol":{"kind":"kerr_cat","alpha_re":1.42}}"#).unwrap();
        assert_eq!(c.simulation.resonator_dim, 40);
        assert_eq!(c.device.chi_mhz, ChiTable::Constant(4.35));
        match c.protocol {
            ProtocolConfig::KerrCat { kerr_mhz, components, .. } => {
                assert_eq!(kerr_mhz, 5.21);
                assert_eq!(components, 2);
            }
            _ => panic!("wrong protocol"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected_with_position() {
        let err = parse_config("{\n  \"protocol\": {\"kind\": \"kerr_cat\", \"alpha_re\": 1.0},\n  \"sead\": 3\n}")
            .unwrap_err();
        let msg = err.to_string();
        assert!(err.downcast_ref::<ConfigError>().is_some());
        assert!(msg.contains("line 3"), "{msg}");
        let err = parse_config(r#"{"protocol":{"kind":"kerr_cat","alpha_re":1.0,"kerr":5}}"#).unwrap_err();
        assert!(err.to_string().contains("kerr"));
    }

    #[test]
    fn empty_lists_and_ranges_are_config_errors() {
        for doc in [
            r#"{"protocol":{"kind":"flux_sweep","phi_start_over_2pi":0.3,"phi_stop_over_2pi":0.3}}"#,
            r#"{"protocol":{"kind":"preserve","alpha_re":1.42,"residual_kerr_mhz":[0],"waits_ns":[]}}"#,
            r#"{"protocol":{"kind":"kerr_cat","alpha_re":1.0},"simulation":{"resonator_dim":1}}"#,
            r#"{"protocol":{"kind":"device_calibration"}}"#,
        ] {
            let e = parse_config(doc).unwrap_err();
            assert!(e.downcast_ref::<ConfigError>().is_some(), "{doc}");
        }
    }

    #[test]
    fn chi_table_accepts_rows() {
        let c = parse_config(
            r#"{"device":{"chi_mhz":[[0.0,4.0],[0.5,5.0]]},"protocol":{"kind":"flux_sweep","phi_start_over_2pi":0,"phi_stop_over_2pi":0.5}}"#,
        )
        .unwrap();
        assert_eq!(c.device.chi_mhz, ChiTable::Tabulated(vec![(0.0, 4.0), (0.5, 5.0)]));
    }
}
