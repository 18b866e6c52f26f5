//! Atomic-unit conversions and the classical scaling transformation.
//!
//! Everything inside the crate works in atomic units. Tesla and picoseconds
//! appear only when a [`FieldConfig`] is built or a result is reported.

use std::f64::consts::PI;

use crate::error::{invalid, Result};

/// Fixed conversion constants between SI and atomic units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitBundle {
    /// Seconds per atomic unit of time.
    pub au_time_seconds: f64,
    /// Tesla per atomic unit of magnetic field.
    pub au_field_tesla: f64,
}

pub const UNITS: UnitBundle = UnitBundle {
    au_time_seconds: 2.418884e-17,
    au_field_tesla: 2.350518e5,
};

/// Atomic time units to picoseconds.
pub fn au_to_ps(t_au: f64) -> f64 {
    t_au * UNITS.au_time_seconds * 1e12
}

/// Picoseconds to atomic time units.
pub fn ps_to_au(t_ps: f64) -> f64 {
    t_ps / (UNITS.au_time_seconds * 1e12)
}

/// Field strength in atomic units from tesla.
pub fn gamma_from_tesla(b_tesla: f64) -> Result<f64> {
    if !(b_tesla > 0.0) || !b_tesla.is_finite() {
        return Err(invalid(format!("magnetic field must be positive, got {b_tesla} T")));
    }
    Ok(b_tesla / UNITS.au_field_tesla)
}

pub fn tesla_from_gamma(gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    Ok(gamma * UNITS.au_field_tesla)
}

pub(crate) fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("field gamma must be positive, got {gamma}")))
    }
}

/// Scaled energy `E * gamma^(-2/3)`; the only parameter of the classical dynamics.
pub fn scaled_energy(e_au: f64, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    Ok(e_au * gamma.powf(-2.0 / 3.0))
}

/// Field strength at which energy `e_au` has scaled energy `epsilon`.
pub fn gamma_for_scaled_energy(e_au: f64, epsilon: f64) -> Result<f64> {
    if !(e_au < 0.0 && epsilon < 0.0) {
        return Err(invalid(format!(
            "need negative energy and scaled energy, got E = {e_au}, epsilon = {epsilon}"
        )));
    }
    Ok((e_au / epsilon).powf(1.5))
}

/// Cyclotron period `2 pi / gamma`, in picoseconds.
pub fn cyclotron_period(gamma: f64) -> Result<f64> {
    Ok(au_to_ps(cyclotron_period_au(gamma)?))
}

pub fn cyclotron_period_au(gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    Ok(2.0 * PI / gamma)
}

/// Energy of a level with effective principal quantum number `n_eff`.
pub fn energy_from_n_eff(n_eff: f64) -> f64 {
    -0.5 / (n_eff * n_eff)
}

/// Effective quantum number of a bound energy; `None` for `E >= 0`.
pub fn n_eff_from_energy(e_au: f64) -> Option<f64> {
    (e_au < 0.0).then(|| (-0.5 / e_au).sqrt())
}

/// A point of the meridional-plane phase space, `(rho, z)` and conjugate momenta.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhasePoint {
    pub r: [f64; 2],
    pub p: [f64; 2],
    pub t: f64,
}

/// Map a physical phase point to scaled variables:
/// `r -> gamma^(2/3) r`, `p -> gamma^(-1/3) p`, `t -> gamma t`.
pub fn scale_phase_point(point: &PhasePoint, gamma: f64) -> Result<PhasePoint> {
    check_gamma(gamma)?;
    let sr = gamma.powf(2.0 / 3.0);
    let sp = gamma.powf(-1.0 / 3.0);
    Ok(PhasePoint {
        r: point.r.map(|x| x * sr),
        p: point.p.map(|x| x * sp),
        t: point.t * gamma,
    })
}

/// Inverse of [`scale_phase_point`].
pub fn unscale_phase_point(point: &PhasePoint, gamma: f64) -> Result<PhasePoint> {
    check_gamma(gamma)?;
    let sr = gamma.powf(-2.0 / 3.0);
    let sp = gamma.powf(1.0 / 3.0);
    Ok(PhasePoint {
        r: point.r.map(|x| x * sr),
        p: point.p.map(|x| x * sp),
        t: point.t / gamma,
    })
}

/// The `(E, B, epsilon)` triple describing one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldConfig {
    pub b_tesla: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub e_au: f64,
    pub n_eff: f64,
}

impl FieldConfig {
    pub fn from_tesla_and_n_eff(b_tesla: f64, n_eff: f64) -> Result<Self> {
        let gamma = gamma_from_tesla(b_tesla)?;
        Self::from_gamma_and_n_eff(gamma, n_eff)
    }

    pub fn from_gamma_and_n_eff(gamma: f64, n_eff: f64) -> Result<Self> {
        check_gamma(gamma)?;
        if !(n_eff > 0.0) || !n_eff.is_finite() {
            return Err(invalid(format!("n_eff must be positive, got {n_eff}")));
        }
        let e_au = energy_from_n_eff(n_eff);
        Ok(Self {
            b_tesla: gamma * UNITS.au_field_tesla,
            gamma,
            epsilon: scaled_energy(e_au, gamma)?,
            e_au,
            n_eff,
        })
    }

    /// The field that puts level `n_eff` at scaled energy `epsilon`.
    pub fn from_epsilon_and_n_eff(epsilon: f64, n_eff: f64) -> Result<Self> {
        let e_au = energy_from_n_eff(n_eff);
        let gamma = gamma_for_scaled_energy(e_au, epsilon)?;
        Self::from_gamma_and_n_eff(gamma, n_eff)
    }

    pub fn cyclotron_period_ps(&self) -> f64 {
        au_to_ps(2.0 * PI / self.gamma)
    }
}
