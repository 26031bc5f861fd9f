//! CSV and JSON file formats.
//!
//! Flux values in files are `Φ_ext/Φ0` (`phi_ext_over_2pi`); in memory they
//! are the phase `φ_ext` in radians.

use std::f64::consts::TAU;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use nalgebra::{DMatrix, DVector};

use crate::hilbert::HilbertLayout;
use crate::protocols::{PulseSequence, SpectroscopyResult};
use crate::snail::FluxPoint;
use crate::tomography::{GridSpec, WignerGrid};
use crate::{Error, Result, State, C64};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FluxCurveRow {
    phi_ext_over_2pi: f64,
    omega_s_ghz: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepRow {
    phi_ext_over_2pi: f64,
    omega_s_ghz: f64,
    g3_mhz: f64,
    g4_mhz: f64,
    ks_mhz: f64,
    kqs_mhz: f64,
    k_mhz: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpectrumRow {
    freq_mhz: f64,
    p_excited: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WignerRow {
    re_gamma: f64,
    im_gamma: f64,
    w: f64,
}

fn read_rows<T: DeserializeOwned, R: Read>(reader: R) -> Result<Vec<T>> {
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    rd.deserialize().map(|r| r.map_err(Error::from)).collect()
}

fn write_rows<T: Serialize, W: Write>(writer: W, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut wr = csv::Writer::from_writer(writer);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

/// `(φ_ext, ω_s/2π)` samples in radians and GHz.
pub fn read_flux_curve<R: Read>(reader: R) -> Result<Vec<(f64, f64)>> {
    let rows: Vec<FluxCurveRow> = read_rows(reader)?;
    if rows.is_empty() {
        return Err(Error::InvalidInput("flux curve has no rows".into()));
    }
    Ok(rows.into_iter().map(|r| (r.phi_ext_over_2pi * TAU, r.omega_s_ghz)).collect())
}

pub fn read_flux_curve_file(path: &Path) -> Result<Vec<(f64, f64)>> {
    read_flux_curve(File::open(path)?)
}

pub fn write_flux_curve<W: Write>(writer: W, curve: &[(f64, f64)]) -> Result<()> {
    write_rows(writer, curve.iter().map(|(p, w)| FluxCurveRow { phi_ext_over_2pi: p / TAU, omega_s_ghz: *w }))
}

pub fn write_sweep<W: Write>(writer: W, points: &[FluxPoint]) -> Result<()> {
    write_rows(
        writer,
        points.iter().map(|p| SweepRow {
            phi_ext_over_2pi: p.phi_ext / TAU,
            omega_s_ghz: p.omega_s_ghz,
            g3_mhz: p.g3_mhz,
            g4_mhz: p.g4_mhz,
            ks_mhz: p.ks_mhz,
            kqs_mhz: p.kqs_mhz,
            k_mhz: p.k_mhz,
        }),
    )
}

/// Sweep table rows as `(φ_ext, ω_s, g3, g4, K_s, K_qs, K)`.
pub fn read_sweep<R: Read>(reader: R) -> Result<Vec<[f64; 7]>> {
    let rows: Vec<SweepRow> = read_rows(reader)?;
    Ok(rows
        .into_iter()
        .map(|r| [r.phi_ext_over_2pi * TAU, r.omega_s_ghz, r.g3_mhz, r.g4_mhz, r.ks_mhz, r.kqs_mhz, r.k_mhz])
        .collect())
}

pub fn write_spectrum<W: Write>(writer: W, s: &SpectroscopyResult) -> Result<()> {
    write_rows(
        writer,
        s.frequencies_mhz.iter().zip(&s.response).map(|(f, p)| SpectrumRow { freq_mhz: *f, p_excited: *p }),
    )
}

pub fn read_spectrum<R: Read>(reader: R) -> Result<SpectroscopyResult> {
    let rows: Vec<SpectrumRow> = read_rows(reader)?;
    SpectroscopyResult::new(rows.iter().map(|r| r.freq_mhz).collect(), rows.iter().map(|r| r.p_excited).collect())
}

/// Sidecar metadata written next to a Wigner CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WignerSidecar {
    pub grid: GridSpec,
    pub convention: String,
    /// Row order of the CSV.
    pub ordering: String,
}

const ORDERING: &str = "row-major in im_gamma, re_gamma fastest";

/// Writes the grid values; returns the sidecar to store alongside.
pub fn write_wigner<W: Write>(writer: W, grid: &WignerGrid) -> Result<WignerSidecar> {
    let xs = grid.spec.xs();
    let ys = grid.spec.ys();
    let rows = ys.iter().enumerate().flat_map(|(iy, y)| {
        let xs = &xs;
        xs.iter().enumerate().map(move |(ix, x)| WignerRow { re_gamma: *x, im_gamma: *y, w: grid.at(ix, iy) })
    });
    write_rows(writer, rows)?;
    Ok(WignerSidecar { grid: grid.spec, convention: grid.convention.clone(), ordering: ORDERING.into() })
}

pub fn read_wigner<R: Read>(reader: R, sidecar: &WignerSidecar) -> Result<WignerGrid> {
    let rows: Vec<WignerRow> = read_rows(reader)?;
    let spec = sidecar.grid;
    spec.validate()?;
    if rows.len() != spec.nx * spec.ny {
        return Err(Error::GridMismatch(format!("{} rows for a {}x{} grid", rows.len(), spec.nx, spec.ny)));
    }
    let xs = spec.xs();
    let ys = spec.ys();
    let tol = 1e-9 * (1.0 + spec.re_max.abs().max(spec.im_max.abs()));
    for (k, r) in rows.iter().enumerate() {
        let (ix, iy) = (k % spec.nx, k / spec.nx);
        if (r.re_gamma - xs[ix]).abs() > tol || (r.im_gamma - ys[iy]).abs() > tol {
            return Err(Error::GridMismatch(format!("row {k} at ({}, {}) is off the grid", r.re_gamma, r.im_gamma)));
        }
    }
    let mut g = WignerGrid::new(spec, rows.into_iter().map(|r| r.w).collect())?;
    g.convention = sidecar.convention.clone();
    Ok(g)
}

pub fn write_wigner_files(csv_path: &Path, sidecar_path: &Path, grid: &WignerGrid) -> Result<()> {
    let side = write_wigner(File::create(csv_path)?, grid)?;
    write_json(File::create(sidecar_path)?, &side)
}

pub fn read_wigner_files(csv_path: &Path, sidecar_path: &Path) -> Result<WignerGrid> {
    let side: WignerSidecar = read_json(File::open(sidecar_path)?)?;
    read_wigner(File::open(csv_path)?, &side)
}

pub fn write_json<W: Write, T: Serialize>(mut writer: W, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(&mut writer, value)?;
    writer.write_all(b"\n")?;
    Ok(())
}

pub fn read_json<R: Read, T: DeserializeOwned>(reader: R) -> Result<T> {
    Ok(serde_json::from_reader(reader)?)
}

pub fn read_sequence<R: Read>(reader: R) -> Result<PulseSequence> {
    let s: PulseSequence = read_json(reader)?;
    s.validate()?;
    Ok(s)
}

/// JSON form of a state: amplitudes (pure) or the row-major density
/// matrix, split into real and imaginary parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateDocument {
    pub layout: HilbertLayout,
    pub pure: bool,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl StateDocument {
    pub fn from_state(s: &State) -> Self {
        let (pure, data): (bool, Vec<C64>) = match s.vector() {
            Some(v) => (true, v.iter().copied().collect()),
            None => {
                let rho = s.density();
                let n = rho.nrows();
                (false, (0..n * n).map(|k| rho[(k / n, k % n)]).collect())
            }
        };
        Self {
            layout: s.layout(),
            pure,
            re: data.iter().map(|z| z.re).collect(),
            im: data.iter().map(|z| z.im).collect(),
        }
    }

    pub fn to_state(&self) -> Result<State> {
        let layout = HilbertLayout::new(self.layout.resonator_dim(), self.layout.qubit_levels())?;
        let n = layout.dim();
        let want = if self.pure { n } else { n * n };
        if self.re.len() != want || self.im.len() != want {
            return Err(Error::InvalidState(format!("expected {want} entries for dimension {n}")));
        }
        let z = self.re.iter().zip(&self.im).map(|(a, b)| C64::new(*a, *b));
        if self.pure {
            State::from_vector(layout, DVector::from_iterator(n, z))
        } else {
            State::from_density(layout, DMatrix::from_row_iterator(n, n, z))
        }
    }
}

pub fn write_state<W: Write>(writer: W, s: &State) -> Result<()> {
    write_json(writer, &StateDocument::from_state(s))
}

pub fn read_state<R: Read>(reader: R) -> Result<State> {
    read_json::<_, StateDocument>(reader)?.to_state()
}
