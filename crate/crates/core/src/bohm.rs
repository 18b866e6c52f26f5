//! de Broglie-Bohm trajectories in the `(rho, z)` plane.
//!
//! The velocity `v = Im(grad psi / psi)` is summed directly from the
//! eigen-expansion at every evaluation. Near nodes the step is clamped by
//! the local length `|psi| / |grad psi|`; a trajectory that gets closer
//! than the hard threshold to an exact node stops with a status rather
//! than an error.

use std::cell::RefCell;
use std::f64::consts::PI;

use num_complex::Complex64;
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::ode::{dop853_step, initial_step, StepController, Tolerances};
use crate::quad::composite;
use crate::wavepacket::{PsiSample, PsiWorkspace, Wavepacket};

/// Node thresholds as fractions of the field's reference amplitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeThresholds {
    /// Below this the step clamp engages.
    pub eta_node: f64,
    /// Below this a trajectory is declared stalled.
    pub eta_hard: f64,
}

impl Default for NodeThresholds {
    fn default() -> Self {
        Self { eta_node: 1e-4, eta_hard: 1e-12 }
    }
}

/// A wavepacket together with absolute node thresholds.
#[derive(Debug, Clone)]
pub struct BohmField<'a> {
    pub wp: &'a Wavepacket,
    /// Largest `|psi(., 0)|` found on the scan grid.
    pub reference_amplitude: f64,
    pub node_amp: f64,
    pub hard_amp: f64,
}

impl<'a> BohmField<'a> {
    pub fn new(wp: &'a Wavepacket, thresholds: NodeThresholds) -> Result<Self> {
        let scan = DensityScan::new(wp, 96)?;
        Ok(Self::with_reference(wp, thresholds, scan.max_amplitude))
    }

    pub fn with_reference(wp: &'a Wavepacket, thresholds: NodeThresholds, reference_amplitude: f64) -> Self {
        Self {
            wp,
            reference_amplitude,
            node_amp: thresholds.eta_node * reference_amplitude,
            hard_amp: thresholds.eta_hard * reference_amplitude,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct VelocitySample {
    pub v_rho: f64,
    pub v_z: f64,
    pub amp: f64,
    /// `|grad psi|`
    pub grad: f64,
    pub node_flag: bool,
}

/// `Im(grad psi / psi)`, extended oddly across the axis and the plane.
pub fn velocity(field: &BohmField, ws: &mut PsiWorkspace, rho: f64, z: f64, t: f64) -> Result<VelocitySample> {
    let p = field.wp.psi_with(ws, rho.abs(), z, t, false);
    let amp = p.value.norm();
    if !(amp >= field.hard_amp) || amp == 0.0 {
        return Err(Error::NodeSingularity { rho, z, amplitude: amp });
    }
    let inv = p.value.conj() / (amp * amp);
    let mut v_rho = (p.d_rho * inv).im;
    let mut v_z = (p.d_z * inv).im;
    // exact on the invariant lines
    if rho == 0.0 {
        v_rho = 0.0;
    } else if rho < 0.0 {
        v_rho = -v_rho;
    }
    if z == 0.0 {
        v_z = 0.0;
    }
    let grad = (p.d_rho.norm_sqr() + p.d_z.norm_sqr()).sqrt();
    Ok(VelocitySample { v_rho, v_z, amp, grad, node_flag: amp < field.node_amp })
}

/// `Q = -(1/2) lap|psi| / |psi|`, hartree. Diverges at the nucleus, where
/// the Coulomb cusp makes the Laplacian singular.
pub fn quantum_potential(field: &BohmField, ws: &mut PsiWorkspace, rho: f64, z: f64, t: f64) -> Result<f64> {
    if rho == 0.0 && z == 0.0 {
        return Err(invalid("quantum potential is singular at the nucleus"));
    }
    let p = field.wp.psi_with(ws, rho.abs(), z, t, true);
    let amp = p.value.norm();
    if !(amp >= field.node_amp) {
        return Err(Error::NodeSingularity { rho, z, amplitude: amp });
    }
    Ok(quantum_potential_from(&p))
}

/// `Q` from a value, gradient and Laplacian, using
/// `lap|psi| = (Re(psi* lap psi) + |grad psi|^2 - |grad |psi||^2) / |psi|`.
pub fn quantum_potential_from(p: &PsiSample) -> f64 {
    let amp = p.value.norm();
    let grad2 = p.d_rho.norm_sqr() + p.d_z.norm_sqr();
    let gr_rho = (p.value.conj() * p.d_rho).re / amp;
    let gr_z = (p.value.conj() * p.d_z).re / amp;
    let lap_amp = ((p.value.conj() * p.laplacian).re + grad2 - gr_rho * gr_rho - gr_z * gr_z) / amp;
    -0.5 * lap_amp / amp
}

/// Density, its time derivative and current, summed pairwise so that
/// single-state contributions cancel exactly.
fn density_and_current(field: &BohmField, ws: &mut PsiWorkspace, rho: f64, z: f64, t: f64) -> (f64, f64, [f64; 2]) {
    let energies = field.wp.energies();
    let (phases, s) = field.wp.state_view(ws, rho.abs(), z, t, false);
    let n = phases.len();
    let mut dens = 0.0;
    let mut rate = 0.0;
    let mut j = [0.0; 2];
    for k in 0..n {
        dens += phases[k].norm_sqr() * s[k].value * s[k].value;
        for l in k + 1..n {
            let c = phases[k].conj() * phases[l];
            dens += 2.0 * c.re * s[k].value * s[l].value;
            rate += 2.0 * (energies[l] - energies[k]) * c.im * s[k].value * s[l].value;
            j[0] += c.im * (s[k].value * s[l].d_rho - s[l].value * s[k].d_rho);
            j[1] += c.im * (s[k].value * s[l].d_z - s[l].value * s[k].d_z);
        }
    }
    if rho < 0.0 {
        j[0] = -j[0];
    }
    (dens, rate, j)
}

/// Terms of the continuity equation at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuityResidual {
    pub density_rate: f64,
    pub divergence: f64,
    /// `(rate + divergence) / (|rate| + sum of |divergence terms|)`, 0 when everything vanishes.
    pub relative: f64,
}

/// `d|psi|^2/dt + div(|psi|^2 v)` with the time derivative exact and the divergence from
/// Richardson-extrapolated central differences of the cylindrical form.
pub fn continuity_residual(field: &BohmField, ws: &mut PsiWorkspace, rho: f64, z: f64, t: f64) -> Result<ContinuityResidual> {
    if !(rho > 0.0) {
        return Err(invalid("continuity residual needs rho > 0"));
    }
    let (dens, rate, j0) = density_and_current(field, ws, rho, z, t);
    if dens.sqrt() < field.node_amp {
        return Err(Error::NodeSingularity { rho, z, amplitude: dens.sqrt() });
    }
    let r = rho.hypot(z);
    let h0 = 0.02 * (1.0 + r).sqrt();
    let mut parts = |h: f64| {
        let (_, _, jp) = density_and_current(field, ws, rho + h, z, t);
        let (_, _, jm) = density_and_current(field, ws, rho - h, z, t);
        let (_, _, jzp) = density_and_current(field, ws, rho, z + h, t);
        let (_, _, jzm) = density_and_current(field, ws, rho, z - h, t);
        let d_rho = (jp[0] - jm[0]) / (2.0 * h);
        let d_z = (jzp[1] - jzm[1]) / (2.0 * h);
        (d_rho, d_z)
    };
    let (a1, b1) = parts(h0);
    let (a2, b2) = parts(0.5 * h0);
    let d_rho = (4.0 * a2 - a1) / 3.0;
    let d_z = (4.0 * b2 - b1) / 3.0;
    let divergence = d_rho + j0[0] / rho + d_z;
    let scale = rate.abs() + d_rho.abs() + (j0[0] / rho).abs() + d_z.abs();
    let relative = if scale == 0.0 { 0.0 } else { (rate + divergence) / scale };
    Ok(ContinuityResidual { density_rate: rate, divergence, relative })
}

/// `Im(psi* grad psi)`, summed pairwise (exact zero for a single state).
pub fn probability_current(field: &BohmField, ws: &mut PsiWorkspace, rho: f64, z: f64, t: f64) -> [f64; 2] {
    density_and_current(field, ws, rho, z, t).2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrajectoryStatus {
    Completed,
    NodeStalled,
    StepUnderflow,
}

impl TrajectoryStatus {
    pub fn name(&self) -> &'static str {
        match self {
            TrajectoryStatus::Completed => "completed",
            TrajectoryStatus::NodeStalled => "node-stalled",
            TrajectoryStatus::StepUnderflow => "step-underflow",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BohmTrajectory {
    /// Times of the recorded points, au.
    pub times: Vec<f64>,
    pub points: Vec<[f64; 2]>,
    pub velocities: Vec<[f64; 2]>,
    pub amplitudes: Vec<f64>,
    pub min_amp_seen: f64,
    pub status: TrajectoryStatus,
    /// Position at each requested checkpoint; `None` past a failure.
    pub checkpoints: Vec<Option<[f64; 2]>>,
    pub steps: usize,
}

impl BohmTrajectory {
    pub fn last(&self) -> [f64; 2] {
        *self.points.last().expect("trajectory has at least its start point")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BohmOptions {
    pub tol: Tolerances,
    /// Smallest step (au) before giving up; never below a few ulps of `t`.
    pub h_min: f64,
    pub h_max: f64,
    pub max_steps: usize,
    /// Fraction of the node length `|psi| / |grad psi|` allowed per step near nodes.
    pub clamp: f64,
    /// Keep every accepted step (otherwise only checkpoints and the end point).
    pub record_steps: bool,
}

impl Default for BohmOptions {
    fn default() -> Self {
        Self {
            tol: Tolerances::new(1e-8, 1e-6),
            h_min: 1e-10,
            h_max: f64::INFINITY,
            max_steps: 200_000,
            clamp: 0.25,
            record_steps: true,
        }
    }
}

/// Integrate `dr/dt = v` from `start` over `t_span` (au), stopping at each checkpoint exactly.
pub fn integrate_trajectory(
    field: &BohmField,
    start: [f64; 2],
    t_span: (f64, f64),
    checkpoints: &[f64],
    opts: &BohmOptions,
) -> Result<BohmTrajectory> {
    let (t0, t1) = t_span;
    if !(start[0] >= 0.0 && start[1] >= 0.0) || !start.iter().all(|x| x.is_finite()) {
        return Err(invalid(format!("start {start:?} outside the quadrant")));
    }
    if !(t1 >= t0) {
        return Err(invalid(format!("time span ({t0}, {t1}) is reversed")));
    }
    if checkpoints.windows(2).any(|w| !(w[1] > w[0])) || checkpoints.iter().any(|c| *c < t0 || *c > t1) {
        return Err(invalid("checkpoints must increase and lie inside the time span"));
    }
    let ws = RefCell::new(field.wp.workspace());
    let sys = |t: f64, y: &[f64; 2]| -> [f64; 2] {
        match velocity(field, &mut ws.borrow_mut(), y[0], y[1], t) {
            Ok(v) => [v.v_rho, v.v_z],
            Err(_) => [f64::NAN, f64::NAN],
        }
    };
    let mut traj = BohmTrajectory {
        times: vec![t0],
        points: vec![start],
        velocities: Vec::new(),
        amplitudes: Vec::new(),
        min_amp_seen: f64::INFINITY,
        status: TrajectoryStatus::Completed,
        checkpoints: vec![None; checkpoints.len()],
        steps: 0,
    };
    let mut vs = match velocity(field, &mut ws.borrow_mut(), start[0], start[1], t0) {
        Ok(v) => v,
        Err(Error::NodeSingularity { amplitude, .. }) => {
            traj.status = TrajectoryStatus::NodeStalled;
            traj.min_amp_seen = amplitude;
            traj.velocities.push([0.0; 2]);
            traj.amplitudes.push(amplitude);
            return Ok(traj);
        }
        Err(e) => return Err(e),
    };
    traj.velocities.push([vs.v_rho, vs.v_z]);
    traj.amplitudes.push(vs.amp);
    traj.min_amp_seen = vs.amp;

    let mut t = t0;
    let mut y = start;
    let mut k = [vs.v_rho, vs.v_z];
    let mut ctl = StepController::default();
    let span = (t1 - t0).max(f64::MIN_POSITIVE);
    let mut h = initial_step(&sys, t, &y, &k, opts.tol, opts.h_max.min(span));
    let mut targets: Vec<(f64, Option<usize>)> = checkpoints.iter().enumerate().map(|(i, c)| (*c, Some(i))).collect();
    targets.push((t1, None));

    'outer: for (target, slot) in targets {
        while t < target {
            if traj.steps >= opts.max_steps {
                traj.status = TrajectoryStatus::StepUnderflow;
                break 'outer;
            }
            let mut step = h.min(opts.h_max);
            if vs.node_flag {
                let speed = vs.v_rho.hypot(vs.v_z);
                if speed > 0.0 && vs.grad > 0.0 {
                    step = step.min(opts.clamp * vs.amp / vs.grad / speed);
                }
            }
            let last = t + step >= target - 1e-12 * target.abs().max(1.0);
            if last {
                step = target - t;
            }
            let floor = opts.h_min.max(16.0 * f64::EPSILON * t.abs());
            if step < floor && !last {
                traj.status = TrajectoryStatus::StepUnderflow;
                break 'outer;
            }
            traj.steps += 1;
            let trial = dop853_step(&sys, t, &y, &k, step, opts.tol);
            let (ok, h_next) = ctl.judge(step, trial.err);
            if !ok {
                h = h_next;
                if h < floor {
                    traj.status = TrajectoryStatus::StepUnderflow;
                    break 'outer;
                }
                continue;
            }
            t = if last { target } else { t + step };
            // the axis and the plane are invariant; fold rounding excursions back
            y = [trial.y[0].abs(), trial.y[1].abs()];
            match velocity(field, &mut ws.borrow_mut(), y[0], y[1], t) {
                Ok(v) => vs = v,
                Err(Error::NodeSingularity { amplitude, .. }) => {
                    traj.min_amp_seen = traj.min_amp_seen.min(amplitude);
                    traj.times.push(t);
                    traj.points.push(y);
                    traj.velocities.push([0.0; 2]);
                    traj.amplitudes.push(amplitude);
                    traj.status = TrajectoryStatus::NodeStalled;
                    break 'outer;
                }
                Err(e) => return Err(e),
            }
            k = [vs.v_rho, vs.v_z];
            traj.min_amp_seen = traj.min_amp_seen.min(vs.amp);
            if !last || !(h_next < h) {
                h = h_next;
            }
            if opts.record_steps || (last && slot.is_none()) {
                traj.times.push(t);
                traj.points.push(y);
                traj.velocities.push(k);
                traj.amplitudes.push(vs.amp);
            }
        }
        if let Some(i) = slot {
            traj.checkpoints[i] = Some(y);
        }
    }
    if traj.status == TrajectoryStatus::Completed && *traj.times.last().unwrap() != t1 {
        traj.times.push(t);
        traj.points.push(y);
        traj.velocities.push(k);
        traj.amplitudes.push(vs.amp);
    }
    Ok(traj)
}

/// `|psi|^2` weights on a midpoint grid over the `(mu, nu)` square, used for the sampling
/// envelope, the sampling box, and the reference amplitude.
#[derive(Debug, Clone)]
pub struct DensityScan {
    /// Box edge in `mu` and `nu` holding all but a negligible part of the probability.
    pub box_mu: f64,
    pub max_amplitude: f64,
    /// Largest sampling weight `|psi|^2 (mu^2 + nu^2) mu nu` inside the box.
    pub max_weight: f64,
}

impl DensityScan {
    pub fn new(wp: &Wavepacket, cells: usize) -> Result<Self> {
        if cells < 4 {
            return Err(invalid("density scan needs at least 4 cells per side"));
        }
        let basis = wp.spectrum.basis;
        let k = basis.per_coordinate() as f64;
        let edge = basis.b * (4.0 * k + 6.0).sqrt();
        let h = edge / cells as f64;
        let mut ws = wp.workspace();
        let mut weight = vec![0.0; cells * cells];
        let mut mean_weight = vec![0.0; cells * cells];
        let mut max_amplitude: f64 = 0.0;
        for i in 0..cells {
            for j in 0..=i {
                let mu = (i as f64 + 0.5) * h;
                let nu = (j as f64 + 0.5) * h;
                let (rho, z) = (mu * nu, 0.5 * (mu * mu - nu * nu));
                let (phases, s) = wp.state_view(&mut ws, rho, z, wp.t0, false);
                let psi: Complex64 = phases.iter().zip(s).map(|(p, x)| p * x.value).sum();
                let avg: f64 = phases.iter().zip(s).map(|(p, x)| p.norm_sqr() * x.value * x.value).sum();
                let jac = (mu * mu + nu * nu) * mu * nu;
                max_amplitude = max_amplitude.max(psi.norm());
                weight[i * cells + j] = psi.norm_sqr() * jac;
                mean_weight[i * cells + j] = avg * jac;
            }
        }
        // smallest box leaving less than 1e-7 of either density outside
        let total: f64 = weight.iter().sum();
        let total_mean: f64 = mean_weight.iter().sum();
        let mut box_cells = cells;
        let mut outside = 0.0;
        let mut outside_mean = 0.0;
        for m in (1..cells).rev() {
            // shell of cells with max(i, j) == m
            let shell: f64 = (0..=m).map(|j| weight[m * cells + j]).sum();
            let shell_mean: f64 = (0..=m).map(|j| mean_weight[m * cells + j]).sum();
            if (outside + shell) / total > 1e-7 || (outside_mean + shell_mean) / total_mean > 1e-7 {
                break;
            }
            outside += shell;
            outside_mean += shell_mean;
            box_cells = m;
        }
        let box_mu = ((box_cells + 1).min(cells)) as f64 * h;
        let max_weight = (0..box_cells.min(cells))
            .flat_map(|i| (0..=i).map(move |j| (i, j)))
            .map(|(i, j)| weight[i * cells + j])
            .fold(0.0, f64::max);
        Ok(Self { box_mu, max_amplitude, max_weight })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingOptions {
    pub scan_cells: usize,
    /// Envelope height over the scanned maximum.
    pub envelope_factor: f64,
    pub acceptance_floor: f64,
}

impl Default for SamplingOptions {
    fn default() -> Self {
        Self { scan_cells: 160, envelope_factor: 1.5, acceptance_floor: 1e-4 }
    }
}

/// Initial positions drawn from `|psi(., 0)|^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub seed: u64,
    pub points: Vec<[f64; 2]>,
    pub box_mu: f64,
    pub envelope: f64,
    pub acceptance_rate: f64,
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// One rejection draw per index, each from its own stream of the master seed.
fn draw(wp: &Wavepacket, seed: u64, index: u64, box_mu: f64, envelope: f64, cap: usize) -> ([f64; 2], usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let mut ws = wp.workspace();
    let mut worst: f64 = 0.0;
    for tries in 1..=cap {
        let a: f64 = rng.gen_range(0.0..box_mu);
        let b: f64 = rng.gen_range(0.0..box_mu);
        let (mu, nu) = if a >= b { (a, b) } else { (b, a) };
        let (rho, z) = (mu * nu, 0.5 * (mu * mu - nu * nu));
        let psi = wp.psi_with(&mut ws, rho, z, wp.t0, false).value;
        let w = psi.norm_sqr() * (mu * mu + nu * nu) * mu * nu;
        worst = worst.max(w);
        if rng.gen::<f64>() * envelope < w {
            return ([rho, z], tries, worst);
        }
    }
    ([f64::NAN; 2], cap, worst)
}

/// Rejection sampling from `2 pi rho |psi(rho, z, 0)|^2` over the quadrant, uniform envelope
/// over a `(mu, nu)` box. Deterministic for a fixed seed regardless of thread count.
pub fn sample_initial(wp: &Wavepacket, n: usize, seed: u64, opts: &SamplingOptions) -> Result<Ensemble> {
    if n == 0 {
        return Err(invalid("ensemble size must be at least 1"));
    }
    let scan = DensityScan::new(wp, opts.scan_cells)?;
    let mut envelope = opts.envelope_factor * scan.max_weight;
    let cap = ((10.0 / opts.acceptance_floor) as usize).max(1000);
    for _ in 0..8 {
        let draws: Vec<([f64; 2], usize, f64)> =
            (0..n as u64).into_par_iter().map(|i| draw(wp, seed, i, scan.box_mu, envelope, cap)).collect();
        let worst = draws.iter().map(|d| d.2).fold(0.0, f64::max);
        if worst > envelope {
            // the scan missed a peak; redo everything under a taller envelope
            envelope = opts.envelope_factor * worst;
            continue;
        }
        let tries: usize = draws.iter().map(|d| d.1).sum();
        let rate = n as f64 / tries as f64;
        if rate < opts.acceptance_floor || draws.iter().any(|d| d.0[0].is_nan()) {
            return Err(Error::LowAcceptance { rate, floor: opts.acceptance_floor });
        }
        return Ok(Ensemble {
            seed,
            points: draws.into_iter().map(|d| d.0).collect(),
            box_mu: scan.box_mu,
            envelope,
            acceptance_rate: rate,
        });
    }
    Err(invalid("sampling envelope did not settle"))
}

/// Square grid of `cells x cells` over `[0, extent]^2` in `(rho, z)`, plus one overflow bin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoarseGrid {
    pub cells: usize,
    pub extent: f64,
}

impl CoarseGrid {
    pub fn new(cells: usize, extent: f64) -> Result<Self> {
        if cells == 0 || !(extent > 0.0) {
            return Err(invalid("coarse grid needs cells > 0 and a positive extent"));
        }
        Ok(Self { cells, extent })
    }

    /// The grid matching an ensemble's sampling box.
    pub fn for_ensemble(cells: usize, ensemble: &Ensemble) -> Result<Self> {
        Self::new(cells, 0.5 * ensemble.box_mu * ensemble.box_mu)
    }

    pub fn bins(&self) -> usize {
        self.cells * self.cells + 1
    }

    pub fn bin(&self, p: [f64; 2]) -> usize {
        let h = self.extent / self.cells as f64;
        let (i, j) = ((p[0].abs() / h) as usize, (p[1].abs() / h) as usize);
        if i >= self.cells || j >= self.cells {
            self.cells * self.cells
        } else {
            i * self.cells + j
        }
    }
}

/// Normalized histogram of points over the grid bins.
pub fn histogram(grid: &CoarseGrid, points: &[[f64; 2]]) -> Vec<f64> {
    let mut h = vec![0.0; grid.bins()];
    for p in points {
        h[grid.bin(*p)] += 1.0;
    }
    let n = points.len().max(1) as f64;
    h.iter_mut().for_each(|x| *x /= n);
    h
}

pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Probability of each grid bin at time `t`, by adaptive Gauss-Legendre quadrature of
/// `2 * 2 pi rho |psi|^2` per cell (both signs of `z`). The overflow bin takes the rest.
pub fn reference_masses(wp: &Wavepacket, grid: &CoarseGrid, t: f64, tol: f64) -> Result<Vec<f64>> {
    let h = grid.extent / grid.cells as f64;
    let order = 6;
    let cells: Vec<(usize, usize)> = (0..grid.cells).flat_map(|i| (0..grid.cells).map(move |j| (i, j))).collect();
    let masses: Vec<Result<f64>> = cells
        .par_iter()
        .map(|&(i, j)| {
            let mut ws = wp.workspace();
            let mut cell = |panels: usize| {
                if (i, j) == (0, 0) {
                    return origin_cell(wp, &mut ws, h, t, panels, order);
                }
                let (xs, wx) = composite(i as f64 * h, (i + 1) as f64 * h, panels, order);
                let (zs, wz) = composite(j as f64 * h, (j + 1) as f64 * h, panels, order);
                let mut m = 0.0;
                for (x, a) in xs.iter().zip(&wx) {
                    for (z, b) in zs.iter().zip(&wz) {
                        m += a * b * x * wp.psi_with(&mut ws, *x, *z, t, false).value.norm_sqr();
                    }
                }
                4.0 * PI * m
            };
            let mut panels = 1;
            let mut prev = cell(panels);
            for _ in 0..6 {
                panels *= 2;
                let next = cell(panels);
                if (next - prev).abs() <= tol {
                    return Ok(next);
                }
                prev = next;
            }
            Err(Error::Quadrature(format!("cell ({i}, {j}) of the coarse grid not converged at {panels} panels")))
        })
        .collect();
    let mut out = Vec::with_capacity(grid.bins());
    for m in masses {
        out.push(m?);
    }
    let inside: f64 = out.iter().sum();
    out.push((1.0 - inside).max(0.0));
    Ok(out)
}

/// The cell at the nucleus, in polar coordinates so the Coulomb cusp sits on a panel edge.
fn origin_cell(wp: &Wavepacket, ws: &mut PsiWorkspace, h: f64, t: f64, panels: usize, order: usize) -> f64 {
    let (phis, wphi) = composite(0.0, 0.5 * PI, 2 * panels, order);
    let mut m = 0.0;
    for (phi, wp_) in phis.iter().zip(&wphi) {
        let (c, sn) = (phi.cos(), phi.sin());
        let r_max = h / c.max(sn);
        let (rs, wr) = composite(0.0, r_max, panels, order);
        for (r, w) in rs.iter().zip(&wr) {
            let rho = r * c;
            m += wp_ * w * r * rho * wp.psi_with(ws, rho, r * sn, t, false).value.norm_sqr();
        }
    }
    4.0 * PI * m
}

/// Expected TV distance between an `n`-point empirical histogram and `reference`, estimated
/// from `reps` multinomial resamples.
pub fn bootstrap_noise(reference: &[f64], n: usize, reps: usize, seed: u64) -> Result<f64> {
    if n == 0 || reps == 0 {
        return Err(invalid("bootstrap needs n > 0 and reps > 0"));
    }
    let dist = WeightedIndex::new(reference.iter().map(|p| p.max(0.0))).map_err(|e| invalid(format!("bad reference masses: {e}")))?;
    let total: f64 = reference.iter().map(|p| p.max(0.0)).sum();
    let norm: Vec<f64> = reference.iter().map(|p| p.max(0.0) / total).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    let mut counts = vec![0.0; reference.len()];
    for _ in 0..reps {
        counts.iter_mut().for_each(|c| *c = 0.0);
        for _ in 0..n {
            counts[dist.sample(&mut rng)] += 1.0;
        }
        let emp: Vec<f64> = counts.iter().map(|c| c / n as f64).collect();
        acc += tv_distance(&emp, &norm);
    }
    Ok(acc / reps as f64)
}

/// Positions of every ensemble member at each checkpoint.
#[derive(Debug, Clone)]
pub struct EnsembleRun {
    pub checkpoints: Vec<f64>,
    /// `positions[c][i]`: member `i` at checkpoint `c`, `None` after a failure.
    pub positions: Vec<Vec<Option<[f64; 2]>>>,
    pub statuses: Vec<TrajectoryStatus>,
}

impl EnsembleRun {
    pub fn census(&self) -> (usize, usize) {
        let stalled = self.statuses.iter().filter(|s| **s == TrajectoryStatus::NodeStalled).count();
        let underflow = self.statuses.iter().filter(|s| **s == TrajectoryStatus::StepUnderflow).count();
        (stalled, underflow)
    }
}

/// Propagate every member to each checkpoint (au); trajectories run in parallel.
pub fn propagate_ensemble(field: &BohmField, ensemble: &Ensemble, checkpoints: &[f64], opts: &BohmOptions) -> Result<EnsembleRun> {
    let t0 = field.wp.t0;
    let t1 = checkpoints.last().copied().unwrap_or(t0).max(t0);
    let inner: Vec<f64> = checkpoints.to_vec();
    let opts = BohmOptions { record_steps: false, ..*opts };
    let runs: Vec<Result<BohmTrajectory>> =
        ensemble.points.par_iter().map(|p| integrate_trajectory(field, *p, (t0, t1), &inner, &opts)).collect();
    let mut positions = vec![Vec::with_capacity(ensemble.len()); checkpoints.len()];
    let mut statuses = Vec::with_capacity(ensemble.len());
    for r in runs {
        let tr = r?;
        for (c, slot) in tr.checkpoints.iter().enumerate() {
            positions[c].push(*slot);
        }
        statuses.push(tr.status);
    }
    Ok(EnsembleRun { checkpoints: checkpoints.to_vec(), positions, statuses })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquivarianceReport {
    pub t: f64,
    pub tv_distance: f64,
    pub bootstrap_noise: f64,
    pub failed: usize,
}

/// TV distance at checkpoint `index` between the transported ensemble and `|psi(., t)|^2`.
pub fn equivariance_distance(
    wp: &Wavepacket,
    run: &EnsembleRun,
    index: usize,
    grid: &CoarseGrid,
    bootstrap_reps: usize,
    seed: u64,
) -> Result<EquivarianceReport> {
    let t = *run.checkpoints.get(index).ok_or_else(|| invalid(format!("no checkpoint {index}")))?;
    let pts: Vec<[f64; 2]> = run.positions[index].iter().flatten().copied().collect();
    let total = run.positions[index].len();
    let failed = total - pts.len();
    if failed * 100 > total {
        let (stalled, underflow) = run.census();
        return Err(Error::TrajectoryFailures { failed, total, stalled, underflow });
    }
    let reference = reference_masses(wp, grid, t, 1e-7)?;
    let emp = histogram(grid, &pts);
    let noise = bootstrap_noise(&reference, pts.len(), bootstrap_reps, seed)?;
    Ok(EquivarianceReport { t, tv_distance: tv_distance(&emp, &reference), bootstrap_noise: noise, failed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantum::{solve_window, BasisSpec, SolveTarget, SolverOptions, Spectrum};
    use crate::wavepacket::{build_initial, StateWindow, WavepacketSpec};

    fn spectrum() -> Spectrum {
        let basis = BasisSpec::new(64, 3.0).unwrap();
        solve_window(&basis, 2e-3, SolveTarget::Window { lo: -0.04, hi: -0.01 }, &SolverOptions::default()).unwrap()
    }

    fn packet() -> Wavepacket {
        let spec = WavepacketSpec { r0: 12.0, window: StateWindow::Energy { lo: -0.04, hi: -0.01 }, ..Default::default() };
        build_initial(&spec, &spectrum()).unwrap()
    }

    fn stationary() -> Wavepacket {
        let s = spectrum().select(&[3]).unwrap();
        Wavepacket::from_coefficients(s, vec![Complex64::from_polar(1.0, 0.4)]).unwrap()
    }

    #[test]
    fn stationary_state_has_no_flow() {
        let wp = stationary();
        let field = BohmField::new(&wp, NodeThresholds::default()).unwrap();
        let mut ws = wp.workspace();
        for &(rho, z) in &[(1.0, 2.0), (5.0, 0.3), (7.5, 9.0)] {
            let v = velocity(&field, &mut ws, rho, z, 321.0).unwrap();
            assert!(v.v_rho.abs() < 1e-12 * v.grad / v.amp && v.v_z.abs() < 1e-12 * v.grad / v.amp);
            let c = continuity_residual(&field, &mut ws, rho, z, 50.0).unwrap();
            assert_eq!(c.relative, 0.0);
        }
        let tr = integrate_trajectory(&field, [3.0, 4.0], (0.0, 5000.0), &[100.0], &BohmOptions::default()).unwrap();
        assert_eq!(tr.status, TrajectoryStatus::Completed);
        let end = tr.last();
        assert!((end[0] - 3.0).abs() < 1e-9 && (end[1] - 4.0).abs() < 1e-9, "{end:?}");
    }

    #[test]
    fn velocity_parity_on_axis_and_plane() {
        let wp = packet();
        let field = BohmField::new(&wp, NodeThresholds::default()).unwrap();
        let mut ws = wp.workspace();
        for &x in &[0.5, 3.0, 11.0] {
            for &t in &[0.0, 800.0] {
                if let Ok(v) = velocity(&field, &mut ws, 0.0, x, t) {
                    assert_eq!(v.v_rho, 0.0);
                }
                if let Ok(v) = velocity(&field, &mut ws, x, 0.0, t) {
                    assert_eq!(v.v_z, 0.0);
                }
                // the analytic gradient is already close to zero there
                let p = wp.psi_at(x, 0.0, t).unwrap();
                assert!(p.d_z.norm() < 1e-12 * (p.d_rho.norm() + p.value.norm()));
            }
        }
    }

    #[test]
    fn current_matches_finite_difference_gradient() {
        let wp = packet();
        let field = BohmField::new(&wp, NodeThresholds::default()).unwrap();
        let mut ws = wp.workspace();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let rho = rng.gen_range(0.5..25.0);
            let z = rng.gen_range(0.0..25.0);
            let t = rng.gen_range(0.0..2000.0);
            let v = velocity(&field, &mut ws, rho, z, t).unwrap();
            let h = 1e-3;
            let fd = |dr: f64, dz: f64| -> Complex64 {
                let d = |s: f64| wp.psi_at(rho + s * dr, z + s * dz, t).unwrap().value;
                let d1 = (d(h) - d(-h)) / (2.0 * h);
                let d2 = (d(h / 2.0) - d(-h / 2.0)) / h;
                (d2 * 4.0 - d1) / 3.0
            };
            let psi = wp.psi_at(rho, z, t).unwrap().value;
            let j_fd = [(psi.conj() * fd(1.0, 0.0)).im, (psi.conj() * fd(0.0, 1.0)).im];
            let j_v = [v.amp * v.amp * v.v_rho, v.amp * v.amp * v.v_z];
            let scale = v.amp * v.grad;
            for c in 0..2 {
                assert!((j_fd[c] - j_v[c]).abs() < 1e-6 * scale, "{c}: {} vs {}", j_fd[c], j_v[c]);
            }
            let j_pair = probability_current(&field, &mut ws, rho, z, t);
            for c in 0..2 {
                assert!((j_pair[c] - j_v[c]).abs() < 1e-10 * scale);
            }
        }
    }

    #[test]
    fn continuity_holds_at_random_points() {
        let wp = packet();
        let field = BohmField::new(&wp, NodeThresholds::default()).unwrap();
        let mut ws = wp.workspace();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let rho = rng.gen_range(0.5..25.0);
            let z = rng.gen_range(-25.0..25.0);
            let c = continuity_residual(&field, &mut ws, rho, z, rng.gen_range(0.0..3000.0)).unwrap();
            assert!(c.relative.abs() < 1e-5, "{rho} {z}: {c:?}");
        }
    }

    #[test]
    fn moving_gaussian_quantum_potential() {
        // psi = exp(-r^2 / (4 s^2) + i k z): the phase drops out and
        // Q = 3 / (4 s^2) - r^2 / (8 s^4)
        let (s2, kz) = (1.7f64, 0.8f64);
        for &(rho, z) in &[(0.3f64, 0.1f64), (1.0, -2.0), (2.5, 0.7)] {
            let r2 = rho * rho + z * z;
            let psi = Complex64::from_polar((-r2 / (4.0 * s2)).exp(), kz * z);
            let d_rho = psi * (-rho / (2.0 * s2));
            let d_z = psi * Complex64::new(-z / (2.0 * s2), kz);
            let lap = psi * (Complex64::new(-z / (2.0 * s2), kz).powi(2) + rho * rho / (4.0 * s2 * s2) - 3.0 / (2.0 * s2));
            let q = quantum_potential_from(&PsiSample { value: psi, d_rho, d_z, laplacian: lap });
            let exact = 3.0 / (4.0 * s2) - r2 / (8.0 * s2 * s2);
            assert!((q - exact).abs() < 1e-8 * exact.abs().max(1.0), "{q} vs {exact}");
        }
    }

    #[test]
    fn quantum_potential_finite_at_density_maximum() {
        let wp = packet();
        let field = BohmField::new(&wp, NodeThresholds::default()).unwrap();
        let mut ws = wp.workspace();
        assert!(quantum_potential(&field, &mut ws, 0.0, 0.0, 0.0).is_err());
        // off the nucleus cusp
        let mut best = (0.0, 0.0, 0.0);
        for i in 0..120 {
            for j in 0..120 {
                let (rho, z) = (0.25 * i as f64, 0.25 * j as f64);
                if rho.hypot(z) < 1.0 {
                    continue;
                }
                let a = wp.psi_with(&mut ws, rho, z, 0.0, false).value.norm();
                if a > best.2 {
                    best = (rho, z, a);
                }
            }
        }
        let q = quantum_potential(&field, &mut ws, best.0, best.1, 0.0).unwrap();
        assert!(q.is_finite(), "{best:?}");
    }

    #[test]
    fn stationary_quantum_potential_balances_energy() {
        // n = 3 levels are exact in a basis with b^2 = 3
        let basis = BasisSpec::new(12, 3f64.sqrt()).unwrap();
        let spec = solve_window(&basis, 0.0, SolveTarget::Lowest(4), &SolverOptions::default()).unwrap();
        let k = 2;
        let e = spec.energies[k];
        assert!((e + 1.0 / 18.0).abs() < 1e-12);
        let wp = Wavepacket::from_coefficients(spec.select(&[k]).unwrap(), vec![Complex64::new(1.0, 0.0)]).unwrap();
        let field = BohmField::new(&wp, NodeThresholds::default()).unwrap();
        let mut ws = wp.workspace();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut checked = 0;
        while checked < 20 {
            let rho = rng.gen_range(0.1..15.0);
            let z = rng.gen_range(-15.0..15.0);
            let Ok(q) = quantum_potential(&field, &mut ws, rho, z, 10.0) else { continue };
            let v = -1.0 / rho.hypot(z);
            assert!((e - v - q).abs() < 1e-6 * (e.abs() + v.abs() + q.abs()), "{rho} {z}: {}", e - v - q);
            checked += 1;
        }
    }

    #[test]
    fn sampling_is_deterministic_and_in_quadrant() {
        let wp = packet();
        let opts = SamplingOptions { scan_cells: 64, ..Default::default() };
        let a = sample_initial(&wp, 300, 42, &opts).unwrap();
        let b = sample_initial(&wp, 300, 42, &opts).unwrap();
        assert_eq!(a, b);
        assert!(a.points.iter().all(|p| p[0] >= 0.0 && p[1] >= 0.0));
        let c = sample_initial(&wp, 300, 43, &opts).unwrap();
        assert_ne!(a.points, c.points);
        assert!(sample_initial(&wp, 0, 1, &opts).is_err());
    }

    #[test]
    fn halved_tolerance_reproduces_short_spans() {
        let wp = packet();
        let field = BohmField::new(&wp, NodeThresholds::default()).unwrap();
        let opts = BohmOptions::default();
        let fine = BohmOptions { tol: opts.tol.halved(), ..opts };
        for start in [[4.0, 6.0], [9.0, 2.0], [1.0, 12.0]] {
            let a = integrate_trajectory(&field, start, (0.0, 400.0), &[], &opts).unwrap();
            let b = integrate_trajectory(&field, start, (0.0, 400.0), &[], &fine).unwrap();
            assert_eq!(a.status, TrajectoryStatus::Completed);
            let (ea, eb) = (a.last(), b.last());
            assert!((ea[0] - eb[0]).hypot(ea[1] - eb[1]) < 1e-4, "{ea:?} {eb:?}");
            assert!(a.times.windows(2).all(|w| w[1] > w[0]));
            assert_eq!(*a.times.last().unwrap(), 400.0);
        }
    }

    #[test]
    fn checkpoints_are_hit_and_trajectories_do_not_meet() {
        let wp = packet();
        let field = BohmField::new(&wp, NodeThresholds::default()).unwrap();
        let cps = [100.0, 250.0, 600.0];
        let opts = BohmOptions::default();
        let a = integrate_trajectory(&field, [5.0, 5.0], (0.0, 600.0), &cps, &opts).unwrap();
        let b = integrate_trajectory(&field, [5.5, 4.5], (0.0, 600.0), &cps, &opts).unwrap();
        for c in &cps {
            assert!(a.times.contains(c));
        }
        assert_eq!(a.checkpoints[2], Some(a.last()));
        for (pa, pb) in a.checkpoints.iter().zip(&b.checkpoints) {
            let (pa, pb) = (pa.unwrap(), pb.unwrap());
            assert!((pa[0] - pb[0]).hypot(pa[1] - pb[1]) > 1e-6);
        }
        assert!(integrate_trajectory(&field, [5.0, 5.0], (0.0, 600.0), &[700.0], &opts).is_err());
        assert!(integrate_trajectory(&field, [-1.0, 5.0], (0.0, 600.0), &[], &opts).is_err());
    }

    #[test]
    fn sample_histogram_passes_chi_square() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let wp = packet();
        let ens = sample_initial(&wp, 10_000, 11, &SamplingOptions { scan_cells: 64, ..Default::default() }).unwrap();
        let grid = CoarseGrid::for_ensemble(16, &ens).unwrap();
        let expected = reference_masses(&wp, &grid, 0.0, 1e-9).unwrap();
        let observed = histogram(&grid, &ens.points);
        let n = ens.len() as f64;
        let (mut chi2, mut dof) = (0.0, 0usize);
        for (o, e) in observed.iter().zip(&expected) {
            if e * n >= 5.0 {
                chi2 += (o * n - e * n).powi(2) / (e * n);
                dof += 1;
            }
        }
        let crit = ChiSquared::new((dof - 1) as f64).unwrap().inverse_cdf(0.999);
        assert!(dof > 10 && chi2 < crit, "chi2 {chi2} with {dof} bins, critical {crit}");
        assert!((expected.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn equivariance_trivial_cases() {
        let wp = packet();
        let field = BohmField::new(&wp, NodeThresholds::default()).unwrap();
        let opts = SamplingOptions { scan_cells: 64, ..Default::default() };
        let ens = sample_initial(&wp, 1000, 4, &opts).unwrap();
        let grid = CoarseGrid::for_ensemble(8, &ens).unwrap();
        let run = propagate_ensemble(&field, &ens, &[0.0], &BohmOptions::default()).unwrap();
        let r = equivariance_distance(&wp, &run, 0, &grid, 200, 1).unwrap();
        assert!(r.tv_distance < 3.0 * r.bootstrap_noise, "{r:?}");

        let still = stationary();
        let field = BohmField::new(&still, NodeThresholds::default()).unwrap();
        let ens = sample_initial(&still, 500, 4, &opts).unwrap();
        let grid = CoarseGrid::for_ensemble(8, &ens).unwrap();
        let run = propagate_ensemble(&field, &ens, &[0.0, 3000.0], &BohmOptions::default()).unwrap();
        let a = equivariance_distance(&still, &run, 0, &grid, 10, 1).unwrap();
        let b = equivariance_distance(&still, &run, 1, &grid, 10, 1).unwrap();
        assert_eq!(histogram(&grid, &ens.points), histogram(&grid, &run.positions[1].iter().flatten().copied().collect::<Vec<_>>()));
        assert!((a.tv_distance - b.tv_distance).abs() < 1e-6);
    }

    #[test]
    fn failure_census_is_reported() {
        let run = EnsembleRun {
            checkpoints: vec![1.0],
            positions: vec![vec![Some([1.0, 1.0]), None, Some([2.0, 2.0])]],
            statuses: vec![TrajectoryStatus::Completed, TrajectoryStatus::NodeStalled, TrajectoryStatus::Completed],
        };
        let wp = stationary();
        let grid = CoarseGrid::new(4, 10.0).unwrap();
        match equivariance_distance(&wp, &run, 0, &grid, 10, 1) {
            Err(Error::TrajectoryFailures { failed, total, stalled, underflow }) => assert_eq!((failed, total, stalled, underflow), (1, 3, 1, 0)),
            other => panic!("{other:?}"),
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(12))]
        #[test]
        fn trajectories_stay_in_quadrant(rho in 0.0f64..20.0, z in 0.0f64..20.0, span in 10.0f64..500.0) {
            let wp = packet_cached();
            let field = BohmField::with_reference(wp, NodeThresholds::default(), 1.0);
            let tr = integrate_trajectory(&field, [rho, z], (0.0, span), &[], &BohmOptions::default()).unwrap();
            proptest::prop_assert!(tr.points.iter().all(|p| p[0] >= 0.0 && p[1] >= 0.0));
            proptest::prop_assert!(tr.times.windows(2).all(|w| w[1] > w[0]));
        }
    }

    fn packet_cached() -> &'static Wavepacket {
        static WP: std::sync::OnceLock<Wavepacket> = std::sync::OnceLock::new();
        WP.get_or_init(packet)
    }

    #[test]
    fn histogram_and_tv() {
        let grid = CoarseGrid::new(2, 2.0).unwrap();
        let h = histogram(&grid, &[[0.5, 0.5], [1.5, 0.5], [5.0, 0.1], [0.2, 0.2]]);
        assert_eq!(h, vec![0.5, 0.0, 0.25, 0.0, 0.25]);
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(tv_distance(&h, &h), 0.0);
        let noise = bootstrap_noise(&[0.25; 4], 1000, 50, 1).unwrap();
        assert!(noise > 0.0 && noise < 0.05);
    }
}
