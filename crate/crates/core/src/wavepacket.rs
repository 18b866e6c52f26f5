//! Localized wavepackets expanded over a window of eigenstates, evolved
//! exactly in the eigenbasis.
//!
//! The target state is a radial Gaussian around `r0` times a sum of
//! Gaussian bumps in the polar angle. Its projection onto the retained
//! eigenstates is renormalized, so the realized packet only approximates it.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{invalid, Error, Result};
use crate::quad::composite;
use crate::quantum::{EigenfunctionSet, PointBasis, Spectrum, StateSample};
use crate::units::{au_to_ps, energy_from_n_eff};

/// Which eigenstates of the spectrum the packet keeps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StateWindow {
    /// Energies in `[lo, hi)`, hartree.
    Energy { lo: f64, hi: f64 },
    /// Effective quantum numbers in `[lo, hi]`.
    NEff { lo: f64, hi: f64 },
    /// The `n` states with the largest overlap with the target.
    Strongest(usize),
}

impl StateWindow {
    fn energy_bounds(&self) -> Option<(f64, f64)> {
        match *self {
            StateWindow::Energy { lo, hi } => Some((lo, hi)),
            StateWindow::NEff { lo, hi } => Some((energy_from_n_eff(lo), energy_from_n_eff(hi))),
            StateWindow::Strongest(_) => None,
        }
    }
}

/// Quadrature grid used to project the target onto eigenstates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionGrid {
    /// Gauss-Legendre order per panel.
    pub order: usize,
    /// Initial panel count in `r` and in `theta`; doubled until converged.
    pub panels: usize,
    /// Radial extent in units of the Gaussian width on either side of `r0`.
    pub r_extent: f64,
    pub tol: f64,
    pub max_doublings: usize,
}

impl Default for ProjectionGrid {
    fn default() -> Self {
        Self { order: 16, panels: 3, r_extent: 10.0, tol: 1e-9, max_doublings: 4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WavepacketSpec {
    pub r0: f64,
    /// Radial width parameter (au^2): the target is `exp(-(r - r0)^2 / (2 delta_r))`.
    pub delta_r: f64,
    pub bump_angles: Vec<f64>,
    pub sigma_theta: f64,
    pub window: StateWindow,
    pub grid: ProjectionGrid,
}

impl Default for WavepacketSpec {
    fn default() -> Self {
        Self {
            r0: 10.0,
            delta_r: 4.0,
            bump_angles: vec![0.0, 1.1],
            sigma_theta: 0.2,
            window: StateWindow::NEff { lo: 21.5, hi: 26.5 },
            grid: ProjectionGrid::default(),
        }
    }
}

impl WavepacketSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.r0 > 0.0) || !(self.delta_r > 0.0) || !(self.sigma_theta > 0.0) {
            return Err(invalid("r0, delta_r and sigma_theta must be positive"));
        }
        if self.bump_angles.is_empty() {
            return Err(invalid("at least one bump angle is required"));
        }
        if let Some(a) = self.bump_angles.iter().find(|a| !(0.0..=PI / 2.0).contains(*a)) {
            return Err(invalid(format!("bump angle {a} outside [0, pi/2]")));
        }
        if self.grid.order == 0 || self.grid.panels == 0 {
            return Err(invalid("projection grid needs at least one panel and one node"));
        }
        Ok(())
    }

    /// Unnormalized target `g(r, theta)`.
    pub fn target(&self, r: f64, theta: f64) -> f64 {
        let radial = (-(r - self.r0).powi(2) / (2.0 * self.delta_r)).exp();
        let s2 = 2.0 * self.sigma_theta * self.sigma_theta;
        let angular: f64 = self.bump_angles.iter().map(|a| (-(theta - a).powi(2) / s2).exp()).sum();
        radial * angular
    }
}

/// Target state sampled on a quadrature grid over the upper half plane.
struct TargetGrid {
    rho: Vec<f64>,
    z: Vec<f64>,
    /// `g * weight`, with the full 3D measure and the mirror half included.
    gw: Vec<f64>,
    norm: f64,
}

fn target_grid(spec: &WavepacketSpec, panels: usize) -> TargetGrid {
    let width = spec.delta_r.sqrt();
    let r_lo = (spec.r0 - spec.grid.r_extent * width).max(0.0);
    let r_hi = spec.r0 + spec.grid.r_extent * width;
    let (rs, wr) = composite(r_lo, r_hi, panels, spec.grid.order);
    let (ts, wt) = composite(0.0, PI / 2.0, panels, spec.grid.order);
    let n = rs.len() * ts.len();
    let mut out = TargetGrid { rho: Vec::with_capacity(n), z: Vec::with_capacity(n), gw: Vec::with_capacity(n), norm: 0.0 };
    let mut g2 = 0.0;
    for (r, w1) in rs.iter().zip(&wr) {
        for (t, w2) in ts.iter().zip(&wt) {
            // d^3r = 2 pi r^2 sin(theta) dr dtheta, doubled for z < 0
            let w = 2.0 * 2.0 * PI * r * r * t.sin() * w1 * w2;
            let g = spec.target(*r, *t);
            out.rho.push(r * t.sin());
            out.z.push(r * t.cos());
            out.gw.push(g * w);
            g2 += g * g * w;
        }
    }
    out.norm = g2.sqrt();
    out
}

/// `<psi_k | g>` for every state of `set`, with `g` normalized.
fn project(set: &EigenfunctionSet, grid: &TargetGrid) -> Vec<f64> {
    let mut pb = set.point_basis();
    let mut samples = vec![StateSample::default(); set.states];
    let mut acc = vec![0.0; set.states];
    for i in 0..grid.rho.len() {
        pb.at(set.b, grid.rho[i], grid.z[i]);
        set.eval_at(&pb, &mut samples, false);
        for (a, s) in acc.iter_mut().zip(&samples) {
            *a += s.value * grid.gw[i];
        }
    }
    acc.iter().map(|a| a / grid.norm).collect()
}

/// Overlaps of all states of `spectrum` with the normalized target, converged in the grid.
pub fn target_overlaps(spec: &WavepacketSpec, spectrum: &Spectrum) -> Result<Vec<f64>> {
    spec.validate()?;
    let set = spectrum.evaluator();
    let mut panels = spec.grid.panels;
    let mut prev = project(&set, &target_grid(spec, panels));
    for _ in 0..spec.grid.max_doublings {
        panels *= 2;
        let next = project(&set, &target_grid(spec, panels));
        let diff = prev.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if diff <= spec.grid.tol {
            return Ok(next);
        }
        prev = next;
    }
    Err(Error::Quadrature(format!(
        "projection onto {} states not converged at {} x {} panels of order {}",
        spectrum.len(),
        panels,
        panels,
        spec.grid.order
    )))
}

/// Exactly evolving superposition `sum_k alpha_k exp(-i E_k (t - t0)) psi_k`.
#[derive(Debug, Clone)]
pub struct Wavepacket {
    /// Retained states only.
    pub spectrum: Spectrum,
    pub alpha: Vec<Complex64>,
    /// Zero of time, au.
    pub t0: f64,
    /// Weight of the target inside the retained window before renormalization.
    pub captured_fraction: f64,
    set: EigenfunctionSet,
}

/// Complex value, gradient and Laplacian of the packet at one point.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PsiSample {
    pub value: Complex64,
    pub d_rho: Complex64,
    pub d_z: Complex64,
    pub laplacian: Complex64,
}

/// Scratch buffers for repeated evaluation.
#[derive(Debug, Clone)]
pub struct PsiWorkspace {
    pb: PointBasis,
    samples: Vec<StateSample>,
    phases: Vec<Complex64>,
    t_cached: f64,
}

pub fn build_initial(spec: &WavepacketSpec, spectrum: &Spectrum) -> Result<Wavepacket> {
    spec.validate()?;
    let keep: Vec<usize> = match spec.window.energy_bounds() {
        Some((lo, hi)) => (0..spectrum.len()).filter(|&k| spectrum.energies[k] >= lo && spectrum.energies[k] < hi).collect(),
        None => (0..spectrum.len()).collect(),
    };
    if keep.is_empty() {
        return Err(Error::EmptyWindow(format!("no eigenstates of the spectrum fall in {:?}", spec.window)));
    }
    let sub = spectrum.select(&keep)?;
    let overlaps = target_overlaps(spec, &sub)?;
    let (sub, overlaps) = match spec.window {
        StateWindow::Strongest(n) => {
            if n == 0 {
                return Err(Error::EmptyWindow("state count 0".into()));
            }
            let mut order: Vec<usize> = (0..sub.len()).collect();
            order.sort_by(|&i, &j| overlaps[j].abs().total_cmp(&overlaps[i].abs()));
            let mut chosen: Vec<usize> = order.into_iter().take(n).collect();
            chosen.sort_unstable();
            let ov = chosen.iter().map(|&i| overlaps[i]).collect();
            (sub.select(&chosen)?, ov)
        }
        _ => (sub, overlaps),
    };
    let captured: f64 = overlaps.iter().map(|a| a * a).sum();
    if !(captured > 0.0) {
        return Err(Error::EmptyWindow("target has no weight on the retained states".into()));
    }
    let alpha = overlaps.iter().map(|a| Complex64::new(a / captured.sqrt(), 0.0)).collect();
    Ok(Wavepacket::from_parts(sub, alpha, captured))
}

impl Wavepacket {
    /// Packet with explicit coefficients; they are renormalized.
    pub fn from_coefficients(spectrum: Spectrum, alpha: Vec<Complex64>) -> Result<Self> {
        if alpha.len() != spectrum.len() || alpha.is_empty() {
            return Err(invalid(format!("{} coefficients for {} states", alpha.len(), spectrum.len())));
        }
        let n2: f64 = alpha.iter().map(|a| a.norm_sqr()).sum();
        if !(n2 > 0.0) {
            return Err(invalid("coefficients vanish"));
        }
        let alpha = alpha.into_iter().map(|a| a / n2.sqrt()).collect();
        Ok(Self::from_parts(spectrum, alpha, 1.0))
    }

    fn from_parts(spectrum: Spectrum, alpha: Vec<Complex64>, captured_fraction: f64) -> Self {
        let set = spectrum.evaluator();
        Self { spectrum, alpha, t0: 0.0, captured_fraction, set }
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn energies(&self) -> &[f64] {
        &self.spectrum.energies
    }

    /// `|<g | psi(0)>|` for the target the packet was built from.
    pub fn target_overlap(&self) -> f64 {
        self.captured_fraction.sqrt()
    }

    /// Same target, with the lowest and highest retained states removed and the rest renormalized.
    pub fn trimmed(&self) -> Result<Self> {
        if self.len() < 3 {
            return Err(Error::EmptyWindow("trimming would leave no states".into()));
        }
        let idx: Vec<usize> = (1..self.len() - 1).collect();
        let sub = self.spectrum.select(&idx)?;
        let alpha: Vec<Complex64> = idx.iter().map(|&i| self.alpha[i]).collect();
        let kept: f64 = alpha.iter().map(|a| a.norm_sqr()).sum();
        let mut wp = Self::from_coefficients(sub, alpha)?;
        wp.captured_fraction = self.captured_fraction * kept;
        wp.t0 = self.t0;
        Ok(wp)
    }

    pub fn workspace(&self) -> PsiWorkspace {
        PsiWorkspace { pb: self.set.point_basis(), samples: vec![StateSample::default(); self.len()], phases: vec![Complex64::default(); self.len()], t_cached: f64::NAN }
    }

    fn update_phases(&self, ws: &mut PsiWorkspace, t: f64) {
        if ws.t_cached.to_bits() == t.to_bits() {
            return;
        }
        let dt = t - self.t0;
        for ((p, a), e) in ws.phases.iter_mut().zip(&self.alpha).zip(&self.spectrum.energies) {
            *p = a * Complex64::from_polar(1.0, -e * dt);
        }
        ws.t_cached = t;
    }

    /// Phase-weighted coefficients `alpha_k exp(-i E_k (t - t0))` and real state samples at a point.
    pub fn state_view<'w>(
        &self,
        ws: &'w mut PsiWorkspace,
        rho: f64,
        z: f64,
        t: f64,
        laplacian: bool,
    ) -> (&'w [Complex64], &'w [StateSample]) {
        self.update_phases(ws, t);
        ws.pb.at(self.set.b, rho, z);
        self.set.eval_at(&ws.pb, &mut ws.samples, laplacian);
        (&ws.phases, &ws.samples)
    }

    /// `psi`, its gradient and (if asked) its Laplacian at `(rho, z)` and time `t` (au).
    pub fn psi_with(&self, ws: &mut PsiWorkspace, rho: f64, z: f64, t: f64, laplacian: bool) -> PsiSample {
        let (phases, samples) = self.state_view(ws, rho, z, t, laplacian);
        let mut out = PsiSample::default();
        for (p, s) in phases.iter().zip(samples) {
            out.value += p * s.value;
            out.d_rho += p * s.d_rho;
            out.d_z += p * s.d_z;
            if laplacian {
                out.laplacian += p * s.laplacian;
            }
        }
        out
    }

    /// Value and gradient at `(rho, z)`, time `t` in au.
    pub fn psi_at(&self, rho: f64, z: f64, t: f64) -> Result<PsiSample> {
        if !(rho >= 0.0) || !z.is_finite() || !t.is_finite() {
            return Err(invalid(format!("invalid evaluation point rho = {rho}, z = {z}, t = {t}")));
        }
        Ok(self.psi_with(&mut self.workspace(), rho, z, t, false))
    }

    /// `C(t) = sum_k |alpha_k|^2 exp(-i E_k t)` at one time (au).
    pub fn autocorrelation_at(&self, t: f64) -> Complex64 {
        self.alpha
            .iter()
            .zip(&self.spectrum.energies)
            .map(|(a, e)| a.norm_sqr() * Complex64::from_polar(1.0, -e * t))
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeriesKind {
    Autocorrelation,
    Probe,
    RecurrenceSignal,
}

impl SeriesKind {
    pub fn name(&self) -> &'static str {
        match self {
            SeriesKind::Autocorrelation => "autocorrelation",
            SeriesKind::Probe => "probe",
            SeriesKind::RecurrenceSignal => "recurrence-signal",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SeriesValues {
    Real(Vec<f64>),
    Complex(Vec<Complex64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub kind: SeriesKind,
    pub times_ps: Vec<f64>,
    pub values: SeriesValues,
}

impl TimeSeries {
    pub fn len(&self) -> usize {
        self.times_ps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times_ps.is_empty()
    }

    /// Real samples, or squared moduli for complex series.
    pub fn intensity(&self) -> Vec<f64> {
        match &self.values {
            SeriesValues::Real(v) => v.clone(),
            SeriesValues::Complex(v) => v.iter().map(|c| c.norm_sqr()).collect(),
        }
    }
}

fn check_times(times: &[f64]) -> Result<()> {
    if times.is_empty() {
        return Err(invalid("time grid is empty"));
    }
    if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(invalid("times must be finite and strictly increasing"));
    }
    Ok(())
}

/// Evenly spaced times `0..=t_max` with `samples` points.
pub fn uniform_times(t_max: f64, samples: usize) -> Result<Vec<f64>> {
    if samples < 2 || !(t_max > 0.0) {
        return Err(invalid(format!("need t_max > 0 and at least 2 samples, got {t_max}, {samples}")));
    }
    Ok((0..samples).map(|i| t_max * i as f64 / (samples - 1) as f64).collect())
}

/// `C(t)` on a grid of times in au.
pub fn autocorrelation(wp: &Wavepacket, times_au: &[f64]) -> Result<TimeSeries> {
    check_times(times_au)?;
    Ok(TimeSeries {
        kind: SeriesKind::Autocorrelation,
        times_ps: times_au.iter().map(|t| au_to_ps(*t)).collect(),
        values: SeriesValues::Complex(times_au.iter().map(|t| wp.autocorrelation_at(*t)).collect()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProbePoint {
    Cylindrical { rho: f64, z: f64 },
    Polar { r: f64, theta: f64 },
}

impl ProbePoint {
    pub fn rho_z(&self) -> (f64, f64) {
        match *self {
            ProbePoint::Cylindrical { rho, z } => (rho, z),
            ProbePoint::Polar { r, theta } => (r * theta.sin(), r * theta.cos()),
        }
    }
}

/// `|psi(point, t)|^power` for `power` 2 or 4.
pub fn density_probe(wp: &Wavepacket, point: ProbePoint, times_au: &[f64], power: u32) -> Result<TimeSeries> {
    check_times(times_au)?;
    if power != 2 && power != 4 {
        return Err(invalid(format!("probe power must be 2 or 4, got {power}")));
    }
    let (rho, z) = point.rho_z();
    if !(rho >= 0.0) || !z.is_finite() {
        return Err(invalid(format!("probe point rho = {rho}, z = {z} outside the half plane")));
    }
    let mut ws = wp.workspace();
    let values = times_au
        .iter()
        .map(|t| {
            let d = wp.psi_with(&mut ws, rho, z, *t, false).value.norm_sqr();
            if power == 4 { d * d } else { d }
        })
        .collect();
    Ok(TimeSeries { kind: SeriesKind::Probe, times_ps: times_au.iter().map(|t| au_to_ps(*t)).collect(), values: SeriesValues::Real(values) })
}

/// Taper applied across the energy window before transforming.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Apodization {
    Rectangular,
    Hann,
    /// Gaussian with standard deviation `width` times the half window.
    Gaussian { width: f64 },
}

impl Apodization {
    fn weight(&self, x: f64) -> f64 {
        // x in [-1, 1] across the window
        match *self {
            Apodization::Rectangular => 1.0,
            Apodization::Hann => 0.5 * (1.0 + (PI * x).cos()),
            Apodization::Gaussian { width } => (-0.5 * (x / width).powi(2)).exp(),
        }
    }
}

/// Magnitude of the finite-window Fourier transform of the stick spectrum `sum_k |alpha_k|^2 delta(E - E_k)`.
pub fn recurrence_time_signal(wp: &Wavepacket, window: (f64, f64), apodization: Apodization, times_au: &[f64]) -> Result<TimeSeries> {
    check_times(times_au)?;
    let (lo, hi) = window;
    if !(lo < hi) {
        return Err(invalid(format!("empty energy window [{lo}, {hi}]")));
    }
    let (emin, emax) = wp.energies().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), e| (a.min(*e), b.max(*e)));
    if emin < lo || emax > hi {
        return Err(invalid("signal window must cover every retained state"));
    }
    let mid = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let sticks: Vec<(f64, f64)> = wp
        .energies()
        .iter()
        .zip(&wp.alpha)
        .map(|(e, a)| (*e, a.norm_sqr() * apodization.weight((e - mid) / half)))
        .collect();
    let values = times_au
        .iter()
        .map(|t| sticks.iter().map(|(e, w)| w * Complex64::from_polar(1.0, -e * t)).sum::<Complex64>().norm())
        .collect();
    Ok(TimeSeries {
        kind: SeriesKind::RecurrenceSignal,
        times_ps: times_au.iter().map(|t| au_to_ps(*t)).collect(),
        values: SeriesValues::Real(values),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub index: usize,
    /// Parabolic-interpolated position and height.
    pub time: f64,
    pub height: f64,
}

/// Interior local maxima, refined by a parabola through the three samples.
pub fn local_maxima(times: &[f64], values: &[f64]) -> Vec<Peak> {
    let mut out = Vec::new();
    for i in 1..values.len().saturating_sub(1) {
        let (a, b, c) = (values[i - 1], values[i], values[i + 1]);
        if b > a && b >= c {
            let denom = a - 2.0 * b + c;
            let shift = if denom != 0.0 { (0.5 * (a - c) / denom).clamp(-0.5, 0.5) } else { 0.0 };
            let h = 0.5 * (times[i + 1] - times[i - 1]);
            out.push(Peak { index: i, time: times[i] + shift * h, height: b - 0.25 * (a - c) * shift });
        }
    }
    out
}

/// First recurrence: the earliest maximum after the initial decay whose height is at least
/// `fraction` of the tallest later maximum.
pub fn first_recurrence(times: &[f64], values: &[f64], fraction: f64) -> Option<Peak> {
    // the initial decay ends at the first local minimum
    let start = (1..values.len().saturating_sub(1)).find(|&i| values[i] <= values[i - 1] && values[i] < values[i + 1])?;
    let peaks: Vec<Peak> = local_maxima(times, values).into_iter().filter(|p| p.index > start).collect();
    let top = peaks.iter().map(|p| p.height).fold(0.0, f64::max);
    peaks.into_iter().find(|p| p.height >= fraction * top)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantum::{solve_window, BasisSpec, SolveTarget, SolverOptions};

    fn small_spectrum() -> Spectrum {
        let basis = BasisSpec::new(40, 3.0).unwrap();
        solve_window(&basis, 2e-3, SolveTarget::Window { lo: -0.04, hi: -0.01 }, &SolverOptions::default()).unwrap()
    }

    fn small_spec() -> WavepacketSpec {
        WavepacketSpec { r0: 12.0, delta_r: 4.0, window: StateWindow::Energy { lo: -0.04, hi: -0.01 }, ..Default::default() }
    }

    #[test]
    fn coefficients_are_normalized() {
        let spec = small_spectrum();
        let wp = build_initial(&small_spec(), &spec).unwrap();
        let n: f64 = wp.alpha.iter().map(|a| a.norm_sqr()).sum();
        assert!((n - 1.0).abs() < 1e-12);
        assert_eq!(wp.len(), spec.len());
        assert!(wp.captured_fraction > 0.0 && wp.captured_fraction <= 1.0 + 1e-9);
        assert!((wp.autocorrelation_at(0.0) - 1.0).norm() < 1e-12);
    }

    #[test]
    fn single_state_window_gives_unit_coefficient() {
        let spec = small_spectrum();
        let lo = spec.energies[2] - 1e-9;
        let hi = spec.energies[2] + 1e-9;
        let ws = WavepacketSpec { window: StateWindow::Energy { lo, hi }, ..small_spec() };
        let wp = build_initial(&ws, &spec).unwrap();
        assert_eq!(wp.len(), 1);
        assert!((wp.alpha[0].norm() - 1.0).abs() < 1e-15);
        // stationary: |psi| constant in time, probes flat, signal flat
        let a = wp.psi_at(3.0, 4.0, 0.0).unwrap().value.norm();
        let b = wp.psi_at(3.0, 4.0, 1234.5).unwrap().value.norm();
        assert!((a - b).abs() < 1e-14 * a.max(1e-300));
        let times = uniform_times(5000.0, 7).unwrap();
        let probe = density_probe(&wp, ProbePoint::Polar { r: 5.0, theta: 0.3 }, &times, 4).unwrap().intensity();
        assert!(probe.iter().all(|p| (p - probe[0]).abs() <= 1e-14 * probe[0]));
        let sig = recurrence_time_signal(&wp, (lo, hi), Apodization::Hann, &times).unwrap().intensity();
        assert!(sig.iter().all(|p| (p - sig[0]).abs() < 1e-14));
    }

    #[test]
    fn empty_window_is_an_error() {
        let spec = small_spectrum();
        let ws = WavepacketSpec { window: StateWindow::Energy { lo: -0.3, hi: -0.2 }, ..small_spec() };
        assert!(matches!(build_initial(&ws, &spec), Err(Error::EmptyWindow(_))));
    }

    #[test]
    fn strongest_window_keeps_largest_overlaps() {
        let spec = small_spectrum();
        let all = target_overlaps(&small_spec(), &spec).unwrap();
        let ws = WavepacketSpec { window: StateWindow::Strongest(3), ..small_spec() };
        let wp = build_initial(&ws, &spec).unwrap();
        assert_eq!(wp.len(), 3);
        let mut sorted: Vec<f64> = all.iter().map(|a| a * a).collect();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let top: f64 = sorted[..3].iter().sum();
        assert!((wp.captured_fraction - top).abs() < 1e-12);
    }

    #[test]
    fn beat_period_of_two_states() {
        let spec = small_spectrum().select(&[0, 3]).unwrap();
        let de = spec.energies[1] - spec.energies[0];
        let wp = Wavepacket::from_coefficients(spec, vec![Complex64::new(1.0, 0.0); 2]).unwrap();
        let period = 2.0 * PI / de;
        for &t in &[0.0, 0.3 * period, 0.71 * period] {
            let c0 = wp.autocorrelation_at(t).norm_sqr();
            let c1 = wp.autocorrelation_at(t + period).norm_sqr();
            assert!((c0 - c1).abs() < 1e-12);
            let expect = (0.5 * (1.0 + (de * t).cos())).clamp(0.0, 1.0);
            assert!((c0 - expect).abs() < 1e-12);
        }
        // time reversal
        let c = wp.autocorrelation_at(123.0);
        assert!((wp.autocorrelation_at(-123.0) - c.conj()).norm() < 1e-14);
    }

    #[test]
    fn evolution_composes_and_starts_at_initial_state() {
        let spec = small_spectrum();
        let wp = build_initial(&small_spec(), &spec).unwrap();
        let set = spec.evaluator();
        let mut s = vec![StateSample::default(); spec.len()];
        for &(rho, z) in &[(1.0, 2.0), (8.0, 0.5), (0.0, 11.0)] {
            set.eval(rho, z, &mut s).unwrap();
            let direct: f64 = s.iter().zip(&wp.alpha).map(|(x, a)| x.value * a.re).sum();
            let via = wp.psi_at(rho, z, 0.0).unwrap().value;
            assert!((via.re - direct).abs() < 1e-12 && via.im.abs() < 1e-15);
            // evolve to t/2 then by another t/2
            let t = 777.0;
            let half = Wavepacket::from_coefficients(
                wp.spectrum.clone(),
                wp.alpha.iter().zip(wp.energies()).map(|(a, e)| a * Complex64::from_polar(1.0, -e * t / 2.0)).collect(),
            )
            .unwrap();
            let a = half.psi_at(rho, z, t / 2.0).unwrap().value;
            let b = wp.psi_at(rho, z, t).unwrap().value;
            assert!((a - b).norm() < 1e-12);
        }
        assert!(wp.psi_at(-1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn rectangular_signal_equals_autocorrelation_modulus() {
        let spec = small_spectrum();
        let wp = build_initial(&small_spec(), &spec).unwrap();
        let times = uniform_times(2e4, 50).unwrap();
        let c = autocorrelation(&wp, &times).unwrap();
        let sig = recurrence_time_signal(&wp, (-0.04, -0.01), Apodization::Rectangular, &times).unwrap();
        let SeriesValues::Complex(cv) = &c.values else { panic!() };
        for (a, b) in cv.iter().zip(sig.intensity()) {
            assert!((a.norm() - b).abs() < 1e-13);
            assert!(a.norm() <= 1.0 + 1e-12);
        }
        assert!(recurrence_time_signal(&wp, (-0.03, -0.01), Apodization::Rectangular, &times).is_err());
    }

    #[test]
    fn peak_detection() {
        let times: Vec<f64> = (0..400).map(|i| i as f64 * 0.05).collect();
        let f = |t: f64| (-t * t * 4.0).exp() + 0.1 * (-(t - 5.0).powi(2) * 8.0).exp() + 0.3 * (-(t - 11.03).powi(2)).exp();
        let v: Vec<f64> = times.iter().map(|t| f(*t)).collect();
        let p = first_recurrence(&times, &v, 0.5).unwrap();
        assert!((p.time - 11.03).abs() < 0.01, "{p:?}");
        let p = first_recurrence(&times, &v, 0.2).unwrap();
        assert!((p.time - 5.0).abs() < 0.01);
        assert!(uniform_times(0.0, 10).is_err());
        assert!(autocorrelation(&Wavepacket::from_coefficients(small_spectrum().select(&[0]).unwrap(), vec![Complex64::new(1.0, 0.0)]).unwrap(), &[]).is_err());
    }
}
