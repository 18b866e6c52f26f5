//! CSV output.
//!
//! Every file starts with a `# config_hash=...` comment line, then a header
//! row whose column names carry their units. Floats are written in the
//! shortest form that parses back to the same value, so identical inputs
//! give byte-identical files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::bohm::{BohmTrajectory, EquivarianceReport};
use crate::classical::ClosedOrbit;
use crate::error::Result;
use crate::quantum::Spectrum;
use crate::units::{au_to_ps, n_eff_from_energy};
use crate::wavepacket::{SeriesValues, TimeSeries};

pub struct CsvWriter<W: Write> {
    out: W,
    columns: usize,
}

impl CsvWriter<BufWriter<File>> {
    pub fn create(path: &Path, config_hash: &str, header: &[&str]) -> Result<Self> {
        Self::new(BufWriter::new(File::create(path)?), config_hash, header)
    }
}

impl<W: Write> CsvWriter<W> {
    pub fn new(mut out: W, config_hash: &str, header: &[&str]) -> Result<Self> {
        writeln!(out, "# config_hash={config_hash}")?;
        writeln!(out, "{}", header.join(","))?;
        Ok(Self { out, columns: header.len() })
    }

    /// Comment line, `# ` prefixed.
    pub fn note(&mut self, text: &str) -> Result<()> {
        writeln!(self.out, "# {text}")?;
        Ok(())
    }

    pub fn row(&mut self, fields: &[Field]) -> Result<()> {
        debug_assert_eq!(fields.len(), self.columns);
        for (i, f) in fields.iter().enumerate() {
            if i > 0 {
                self.out.write_all(b",")?;
            }
            match f {
                Field::F(x) => write!(self.out, "{x}")?,
                Field::U(x) => write!(self.out, "{x}")?,
                Field::S(s) => write!(self.out, "{s}")?,
            }
        }
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

/// One CSV cell.
#[derive(Debug, Clone, PartialEq)]
pub enum Field {
    F(f64),
    U(u64),
    S(String),
}

pub fn write_spectrum_csv(path: &Path, hash: &str, s: &Spectrum) -> Result<()> {
    let mut w = CsvWriter::create(path, hash, &["k", "energy_au", "n_eff"])?;
    if s.is_empty() {
        w.note("no states in the requested window")?;
    }
    for (k, e) in s.energies.iter().enumerate() {
        w.row(&[Field::U(k as u64), Field::F(*e), Field::F(n_eff_from_energy(*e).unwrap_or(f64::NAN))])?;
    }
    w.finish()?;
    Ok(())
}

pub fn write_time_series_csv(path: &Path, hash: &str, series: &TimeSeries) -> Result<()> {
    match &series.values {
        SeriesValues::Real(v) => {
            let mut w = CsvWriter::create(path, hash, &["t_ps", "value"])?;
            for (t, x) in series.times_ps.iter().zip(v) {
                w.row(&[Field::F(*t), Field::F(*x)])?;
            }
            w.finish()?;
        }
        SeriesValues::Complex(v) => {
            let mut w = CsvWriter::create(path, hash, &["t_ps", "re", "im", "abs2"])?;
            for (t, x) in series.times_ps.iter().zip(v) {
                w.row(&[Field::F(*t), Field::F(x.re), Field::F(x.im), Field::F(x.norm_sqr())])?;
            }
            w.finish()?;
        }
    }
    Ok(())
}

pub fn write_trajectory_csv(path: &Path, hash: &str, tr: &BohmTrajectory) -> Result<()> {
    let mut w = CsvWriter::create(path, hash, &["t_ps", "rho_au", "z_au", "v_rho_au", "v_z_au", "abs_psi"])?;
    w.note(&format!("status={} min_abs_psi={}", tr.status.name(), tr.min_amp_seen))?;
    for i in 0..tr.times.len() {
        let (p, v) = (tr.points[i], tr.velocities[i]);
        w.row(&[
            Field::F(au_to_ps(tr.times[i])),
            Field::F(p[0]),
            Field::F(p[1]),
            Field::F(v[0]),
            Field::F(v[1]),
            Field::F(tr.amplitudes[i]),
        ])?;
    }
    w.finish()?;
    Ok(())
}

/// Ensemble positions at one time; failed members are skipped.
pub fn write_snapshot_csv(path: &Path, hash: &str, t_au: f64, points: &[Option<[f64; 2]>]) -> Result<()> {
    let mut w = CsvWriter::create(path, hash, &["rho_au", "z_au"])?;
    w.note(&format!("t_ps={}", au_to_ps(t_au)))?;
    for p in points.iter().flatten() {
        w.row(&[Field::F(p[0]), Field::F(p[1])])?;
    }
    w.finish()?;
    Ok(())
}

pub fn write_equivariance_csv(path: &Path, hash: &str, reports: &[EquivarianceReport]) -> Result<()> {
    let mut w = CsvWriter::create(path, hash, &["t_ps", "tv_distance", "bootstrap_noise", "failed"])?;
    for r in reports {
        w.row(&[Field::F(au_to_ps(r.t)), Field::F(r.tv_distance), Field::F(r.bootstrap_noise), Field::U(r.failed as u64)])?;
    }
    w.finish()?;
    Ok(())
}

/// Orbit summary; `gamma` converts scaled periods to picoseconds.
pub fn write_orbits_csv(path: &Path, hash: &str, orbits: &[ClosedOrbit], gamma: Option<f64>) -> Result<()> {
    let mut w = CsvWriter::create(
        path,
        hash,
        &["label", "theta_launch_rad", "scaled_period", "period_ps", "return_radius_scaled", "repetition"],
    )?;
    if orbits.is_empty() {
        w.note("no closed orbits found")?;
    }
    for o in orbits {
        let ps = gamma.map(|g| au_to_ps(o.scaled_period / g)).unwrap_or(f64::NAN);
        w.row(&[
            Field::S(o.display_label()),
            Field::F(o.theta_launch),
            Field::F(o.scaled_period),
            Field::F(ps),
            Field::F(o.return_radius),
            Field::U(o.repetition as u64),
        ])?;
    }
    w.finish()?;
    Ok(())
}

/// One orbit's polyline, in scaled units and converted with `gamma`.
pub fn write_orbit_trace_csv(path: &Path, hash: &str, orbit: &ClosedOrbit, gamma: f64) -> Result<()> {
    let mut w = CsvWriter::create(path, hash, &["t_scaled", "t_ps", "rho_au", "z_au"])?;
    let length = gamma.powf(-2.0 / 3.0);
    for p in &orbit.trace {
        w.row(&[Field::F(p.t), Field::F(au_to_ps(p.t / gamma)), Field::F(p.rho * length), Field::F(p.z * length)])?;
    }
    w.finish()?;
    Ok(())
}
