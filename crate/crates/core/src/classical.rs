//! Scaled classical dynamics of hydrogen in a magnetic field (`L_z = 0`).
//!
//! The motion is integrated in semiparabolic coordinates `mu^2 = r + z`,
//! `nu^2 = r - z` with the fictitious time `dt = (mu^2 + nu^2) dtau`, where
//! the regularized Hamiltonian
//!
//! ```text
//! h = (p_mu^2 + p_nu^2)/2 - eps (mu^2 + nu^2) + mu^2 nu^2 (mu^2 + nu^2)/8 = 2
//! ```
//!
//! has no Coulomb singularity. All lengths and times are scaled
//! (`r~ = gamma^(2/3) r`, `t~ = gamma t`); the dynamics depends on `eps` only.

use std::f64::consts::FRAC_PI_2;

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::ode::{dop853_step, initial_step, OdeSystem, StepController, Tolerances};
use crate::units::{au_to_ps, check_gamma};

/// Regularized phase-space point. `mu` and `nu` are kept unfolded during
/// integration (they change sign when the orbit crosses an axis); the
/// physical position is `rho = |mu nu|`, `z = (mu^2 - nu^2)/2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemiparabolicState {
    pub mu: f64,
    pub nu: f64,
    pub p_mu: f64,
    pub p_nu: f64,
    pub tau: f64,
    pub t_phys: f64,
}

/// `d/dtau` of every component of a [`SemiparabolicState`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateDerivative {
    pub d_mu: f64,
    pub d_nu: f64,
    pub d_p_mu: f64,
    pub d_p_nu: f64,
    pub d_t: f64,
}

impl SemiparabolicState {
    fn to_array(self) -> [f64; 5] {
        [self.mu, self.nu, self.p_mu, self.p_nu, self.t_phys]
    }

    fn from_array(tau: f64, y: &[f64; 5]) -> Self {
        Self { mu: y[0], nu: y[1], p_mu: y[2], p_nu: y[3], tau, t_phys: y[4] }
    }

    /// Value of the regularized Hamiltonian; 2 on every physical trajectory.
    pub fn regularized_energy(&self, epsilon: f64) -> f64 {
        let (m2, n2) = (self.mu * self.mu, self.nu * self.nu);
        0.5 * (self.p_mu * self.p_mu + self.p_nu * self.p_nu) - epsilon * (m2 + n2)
            + 0.125 * m2 * n2 * (m2 + n2)
    }

    pub fn rho(&self) -> f64 {
        (self.mu * self.nu).abs()
    }

    pub fn z(&self) -> f64 {
        0.5 * (self.mu * self.mu - self.nu * self.nu)
    }

    pub fn r(&self) -> f64 {
        0.5 * (self.mu * self.mu + self.nu * self.nu)
    }

    /// Signed distance of the local straight-line motion from the origin of
    /// the `(mu, nu)` plane. Vanishes for a trajectory that hits the nucleus.
    pub fn signed_miss(&self) -> f64 {
        let p = self.p_mu.hypot(self.p_nu);
        if p == 0.0 {
            return 0.0;
        }
        (self.mu * self.p_nu - self.nu * self.p_mu) / p
    }

    fn radial_rate(y: &[f64; 5]) -> f64 {
        y[0] * y[2] + y[1] * y[3]
    }
}

pub fn regularized_rhs(state: &SemiparabolicState, epsilon: f64) -> StateDerivative {
    let y = rhs_array(epsilon, &state.to_array());
    StateDerivative { d_mu: y[0], d_nu: y[1], d_p_mu: y[2], d_p_nu: y[3], d_t: y[4] }
}

#[inline]
fn rhs_array(epsilon: f64, y: &[f64; 5]) -> [f64; 5] {
    let [mu, nu, pm, pn, _] = *y;
    let (m2, n2) = (mu * mu, nu * nu);
    [
        pm,
        pn,
        2.0 * epsilon * mu - 0.25 * mu * n2 * (2.0 * m2 + n2),
        2.0 * epsilon * nu - 0.25 * nu * m2 * (m2 + 2.0 * n2),
        m2 + n2,
    ]
}

struct Regularized {
    epsilon: f64,
}

impl OdeSystem<5> for Regularized {
    fn rhs(&self, _tau: f64, y: &[f64; 5]) -> [f64; 5] {
        rhs_array(self.epsilon, y)
    }
}

/// Outgoing launch from radius `r0` at angle `theta` from the field axis,
/// with vanishing angular momentum `p_theta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaunchSpec {
    pub r0: f64,
    pub theta: f64,
    pub epsilon: f64,
}

impl LaunchSpec {
    pub fn new(r0: f64, theta: f64, epsilon: f64) -> Result<Self> {
        if !(r0 > 0.0) || !r0.is_finite() {
            return Err(invalid(format!("launch radius must be positive, got {r0}")));
        }
        if !(0.0..=FRAC_PI_2).contains(&theta) {
            return Err(invalid(format!("launch angle {theta} outside [0, pi/2]")));
        }
        if !epsilon.is_finite() {
            return Err(invalid("scaled energy must be finite"));
        }
        let spec = Self { r0, theta, epsilon };
        if spec.radial_momentum_sq() <= 0.0 {
            return Err(invalid(format!(
                "launch point r0 = {r0}, theta = {theta} is classically forbidden at eps = {epsilon}"
            )));
        }
        Ok(spec)
    }

    fn radial_momentum_sq(&self) -> f64 {
        let s = self.theta.sin();
        2.0 * (self.epsilon + 1.0 / self.r0 - self.r0 * self.r0 * s * s / 8.0)
    }

    pub fn initial_state(&self) -> SemiparabolicState {
        let pr = self.radial_momentum_sq().sqrt();
        let a = (2.0 * self.r0).sqrt();
        let mu = a * (0.5 * self.theta).cos();
        let nu = a * (0.5 * self.theta).sin();
        SemiparabolicState { mu, nu, p_mu: mu * pr, p_nu: nu * pr, tau: 0.0, t_phys: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassicalOptions {
    pub tol: Tolerances,
    pub max_steps: usize,
    /// Smallest admissible fictitious-time step.
    pub h_min: f64,
}

impl Default for ClassicalOptions {
    fn default() -> Self {
        Self { tol: Tolerances::new(1e-10, 1e-12), max_steps: 2_000_000, h_min: 1e-14 }
    }
}

/// One point of a trace, in scaled units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub t: f64,
    pub rho: f64,
    pub z: f64,
    pub energy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub epsilon: f64,
    pub points: Vec<TracePoint>,
    pub final_state: SemiparabolicState,
    /// Largest `|h - 2|` over every accepted step.
    pub max_energy_error: f64,
}

/// A return of the trajectory to its closest approach to the nucleus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReturnEvent {
    pub t: f64,
    pub miss: f64,
    pub radius: f64,
}

struct Stepper<'a> {
    sys: Regularized,
    opts: &'a ClassicalOptions,
    tau: f64,
    y: [f64; 5],
    k: [f64; 5],
    h: f64,
    ctl: StepController,
    steps: usize,
    max_energy_error: f64,
}

impl<'a> Stepper<'a> {
    fn new(state: SemiparabolicState, epsilon: f64, opts: &'a ClassicalOptions, backward: bool) -> Self {
        let sys = Regularized { epsilon };
        let y = state.to_array();
        let k = sys.rhs(state.tau, &y);
        let mut h = initial_step(&sys, state.tau, &y, &k, opts.tol, 0.1);
        if backward {
            // Time-reversed flow: negate tau steps.
            h = -h;
        }
        Self { sys, opts, tau: state.tau, y, k, h, ctl: StepController::default(), steps: 0, max_energy_error: 0.0 }
    }

    /// Advance one accepted step; returns `(tau0, y0, k0, h)` of that step.
    fn advance(&mut self) -> Result<(f64, [f64; 5], [f64; 5], f64)> {
        loop {
            if self.steps >= self.opts.max_steps {
                return Err(Error::IntegrationFailure {
                    tau: self.tau,
                    reason: format!("exceeded {} steps", self.opts.max_steps),
                });
            }
            if self.h.abs() < self.opts.h_min {
                return Err(Error::IntegrationFailure {
                    tau: self.tau,
                    reason: format!("step size underflow (h = {:e}, state {:?})", self.h, self.y),
                });
            }
            self.steps += 1;
            let trial = dop853_step(&self.sys, self.tau, &self.y, &self.k, self.h, self.opts.tol);
            let (ok, h_next) = self.ctl.judge(self.h.abs(), trial.err);
            let h_next = h_next.min(0.5).copysign(self.h);
            if ok {
                let start = (self.tau, self.y, self.k, self.h);
                self.tau += self.h;
                self.y = trial.y;
                self.k = self.sys.rhs(self.tau, &self.y);
                let e = SemiparabolicState::from_array(self.tau, &self.y).regularized_energy(self.sys.epsilon);
                self.max_energy_error = self.max_energy_error.max((e - 2.0).abs());
                self.h = h_next;
                return Ok(start);
            }
            self.h = h_next;
        }
    }

    /// State at `tau0 + delta` by a single re-step from the start of an accepted step.
    fn restep(&self, tau0: f64, y0: &[f64; 5], k0: &[f64; 5], delta: f64) -> [f64; 5] {
        if delta == 0.0 {
            return *y0;
        }
        dop853_step(&self.sys, tau0, y0, k0, delta, self.opts.tol).y
    }

    /// Root of `g` inside an accepted step, given the signs at both ends differ.
    fn locate<G: Fn(&[f64; 5]) -> f64>(
        &self,
        start: &(f64, [f64; 5], [f64; 5], f64),
        g: G,
    ) -> [f64; 5] {
        let (tau0, y0, k0, h) = start;
        let (mut a, mut fa) = (0.0, g(y0));
        let (mut b, mut fb) = (*h, g(&self.y));
        let mut side = 0i8;
        let mut best = self.y;
        for _ in 0..100 {
            // Illinois variant of regula falsi.
            let c = (a * fb - b * fa) / (fb - fa);
            let c = if c.is_finite() && (c - a) * (c - b) < 0.0 { c } else { 0.5 * (a + b) };
            let yc = self.restep(*tau0, y0, k0, c);
            let fc = g(&yc);
            best = yc;
            if fc == 0.0 || (b - a).abs() <= 1e-15 * h.abs().max(1e-300) {
                break;
            }
            if (fc > 0.0) == (fb > 0.0) {
                b = c;
                fb = fc;
                if side == -1 {
                    fa *= 0.5;
                }
                side = -1;
            } else {
                a = c;
                fa = fc;
                if side == 1 {
                    fb *= 0.5;
                }
                side = 1;
            }
        }
        best
    }
}

/// Integrate from a launch and sample the orbit uniformly in scaled physical time.
pub fn integrate(launch: &LaunchSpec, t_max: f64, dt_out: f64) -> Result<Trace> {
    integrate_with(launch, t_max, dt_out, &ClassicalOptions::default())
}

pub fn integrate_with(
    launch: &LaunchSpec,
    t_max: f64,
    dt_out: f64,
    opts: &ClassicalOptions,
) -> Result<Trace> {
    if !(t_max > 0.0) || !(dt_out > 0.0) {
        return Err(invalid(format!("need t_max > 0 and dt_out > 0, got {t_max}, {dt_out}")));
    }
    let state = launch.initial_state();
    let eps = launch.epsilon;
    let mut st = Stepper::new(state, eps, opts, false);
    let point = |y: &[f64; 5]| {
        let s = SemiparabolicState::from_array(0.0, y);
        TracePoint { t: y[4], rho: s.rho(), z: s.z(), energy: s.regularized_energy(eps) }
    };
    let mut points = vec![point(&st.y)];
    let mut next = 1usize;
    let n_samples = (t_max / dt_out).floor() as usize;
    while st.y[4] < t_max {
        let start = st.advance()?;
        while next <= n_samples && (next as f64) * dt_out <= st.y[4] {
            let target = next as f64 * dt_out;
            let y = st.locate(&start, |y| y[4] - target);
            points.push(TracePoint { t: target, ..point(&y) });
            next += 1;
        }
        if st.y[4] >= t_max && points.last().map_or(true, |p| p.t < t_max * (1.0 - 1e-12)) {
            let y = st.locate(&start, |y| y[4] - t_max);
            points.push(TracePoint { t: t_max, ..point(&y) });
        }
    }
    let final_state = SemiparabolicState::from_array(st.tau, &st.y);
    Ok(Trace { epsilon: eps, points, final_state, max_energy_error: st.max_energy_error })
}

/// All closest approaches to the nucleus up to scaled time `t_max`.
pub fn return_events(launch: &LaunchSpec, t_max: f64, opts: &ClassicalOptions) -> Result<Vec<ReturnEvent>> {
    let mut st = Stepper::new(launch.initial_state(), launch.epsilon, opts, false);
    let t_in = inbound_time(launch, opts)?;
    let mut events = Vec::new();
    let mut g_prev = SemiparabolicState::radial_rate(&st.y);
    while st.y[4] < t_max {
        let start = st.advance()?;
        let g = SemiparabolicState::radial_rate(&st.y);
        if g_prev < 0.0 && g >= 0.0 {
            let y = st.locate(&start, SemiparabolicState::radial_rate);
            let s = SemiparabolicState::from_array(0.0, &y);
            if y[4] <= t_max {
                events.push(ReturnEvent { t: y[4] + t_in, miss: s.signed_miss(), radius: s.r() });
            }
        }
        g_prev = g;
    }
    Ok(events)
}

/// Time the launch ray needs to go from the nucleus out to `r0`, found by
/// integrating the launch state backward to its closest approach.
fn inbound_time(launch: &LaunchSpec, opts: &ClassicalOptions) -> Result<f64> {
    let mut st = Stepper::new(launch.initial_state(), launch.epsilon, opts, true);
    let mut g_prev = SemiparabolicState::radial_rate(&st.y);
    loop {
        let start = st.advance()?;
        let g = SemiparabolicState::radial_rate(&st.y);
        if g_prev > 0.0 && g <= 0.0 {
            let y = st.locate(&start, SemiparabolicState::radial_rate);
            return Ok(-y[4]);
        }
        g_prev = g;
    }
}

/// An orbit launched from near the nucleus that comes back through it.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedOrbit {
    pub theta_launch: f64,
    /// Nucleus-to-nucleus period in scaled time.
    pub scaled_period: f64,
    /// Closest approach to the nucleus on return, scaled length.
    pub return_radius: f64,
    pub epsilon: f64,
    pub r0: f64,
    /// Sampled one-period polyline, scaled units.
    pub trace: Vec<TracePoint>,
    pub label: Option<String>,
    /// `k` when this is the k-th traversal of a shorter closed orbit.
    pub repetition: u32,
}

impl ClosedOrbit {
    pub fn display_label(&self) -> String {
        match (&self.label, self.repetition) {
            (Some(l), 1) => l.clone(),
            (Some(l), k) => format!("{l}^{k}"),
            (None, 1) => format!("theta={:.4}", self.theta_launch),
            (None, k) => format!("theta={:.4}^{k}", self.theta_launch),
        }
    }

    /// The point a fraction `f` of the way along the stored trace, by arc
    /// length, with the scaled time at which the orbit passes it.
    pub fn point_at_arc_fraction(&self, f: f64) -> Result<TracePoint> {
        if !(0.0..=1.0).contains(&f) {
            return Err(invalid(format!("arc fraction {f} outside [0, 1]")));
        }
        if self.trace.len() < 2 {
            return Err(invalid("orbit has no stored trace"));
        }
        let seg = |a: &TracePoint, b: &TracePoint| (b.rho - a.rho).hypot(b.z - a.z);
        let total: f64 = self.trace.windows(2).map(|w| seg(&w[0], &w[1])).sum();
        let goal = f * total;
        let mut acc = 0.0;
        for w in self.trace.windows(2) {
            let l = seg(&w[0], &w[1]);
            if acc + l >= goal && l > 0.0 {
                let s = (goal - acc) / l;
                let lerp = |x: f64, y: f64| x + s * (y - x);
                return Ok(TracePoint {
                    t: lerp(w[0].t, w[1].t),
                    rho: lerp(w[0].rho, w[1].rho),
                    z: lerp(w[0].z, w[1].z),
                    energy: lerp(w[0].energy, w[1].energy),
                });
            }
            acc += l;
        }
        Ok(*self.trace.last().unwrap())
    }
}

/// Physical period in picoseconds.
pub fn physical_period(orbit: &ClosedOrbit, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    Ok(au_to_ps(orbit.scaled_period / gamma))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinderOptions {
    /// Scaled launch radius.
    pub r0: f64,
    /// Number of intervals of the theta grid on `[0, pi/2]`.
    pub theta_steps: usize,
    /// Largest acceptable return radius (scaled).
    pub closure_tol: f64,
    /// Scan horizon in scaled time.
    pub t_max: f64,
    /// Sampling interval of the stored traces (scaled time).
    pub trace_dt: f64,
    pub integrator: ClassicalOptions,
}

impl FinderOptions {
    pub fn new(r0: f64, t_max: f64) -> Self {
        Self {
            r0,
            theta_steps: 64,
            closure_tol: 1e-8,
            t_max,
            trace_dt: t_max / 2000.0,
            integrator: ClassicalOptions::default(),
        }
    }
}

/// A sign change of the closure functional that bisection could not close.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateFailure {
    pub theta_bracket: (f64, f64),
    pub approx_period: f64,
    pub best_radius: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClosedOrbitSearch {
    pub orbits: Vec<ClosedOrbit>,
    pub failures: Vec<CandidateFailure>,
}

fn match_event(events: &[ReturnEvent], t: f64) -> Option<ReturnEvent> {
    events
        .iter()
        .filter(|e| (e.t - t).abs() <= 0.1 * t.max(1e-3))
        .min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
        .copied()
}

/// Scan launch angles and refine sign changes of the signed return miss by bisection.
pub fn find_closed_orbits(epsilon: f64, opts: &FinderOptions) -> Result<ClosedOrbitSearch> {
    if opts.theta_steps < 1 || !(opts.closure_tol > 0.0) || !(opts.t_max > 0.0) {
        return Err(invalid("finder needs theta_steps >= 1, closure_tol > 0, t_max > 0"));
    }
    let thetas: Vec<f64> =
        (0..=opts.theta_steps).map(|i| FRAC_PI_2 * i as f64 / opts.theta_steps as f64).collect();
    let scan: Vec<Vec<ReturnEvent>> = thetas
        .par_iter()
        .map(|&th| {
            let launch = LaunchSpec::new(opts.r0, th, epsilon)?;
            return_events(&launch, opts.t_max, &opts.integrator)
        })
        .collect::<Result<_>>()?;

    // (theta, scaled period, radius)
    let mut found: Vec<(f64, f64, f64)> = Vec::new();
    let mut failures = Vec::new();
    for (i, events) in scan.iter().enumerate() {
        for e in events.iter().filter(|e| e.radius < opts.closure_tol) {
            found.push((thetas[i], e.t, e.radius));
        }
    }
    let brackets: Vec<(usize, ReturnEvent, ReturnEvent)> = scan
        .windows(2)
        .enumerate()
        .flat_map(|(i, pair)| {
            pair[0].iter().filter_map(move |e| {
                let e2 = match_event(&pair[1], e.t)?;
                let open = e.radius >= opts.closure_tol && e2.radius >= opts.closure_tol;
                (open && e.miss.signum() != e2.miss.signum()).then_some((i, *e, e2))
            })
        })
        .collect();
    let refined: Vec<std::result::Result<(f64, f64, f64), CandidateFailure>> = brackets
        .par_iter()
        .map(|&(i, e_lo, e_hi)| bisect(epsilon, opts, (thetas[i], e_lo), (thetas[i + 1], e_hi)))
        .collect::<Result<_>>()?;
    for r in refined {
        match r {
            Ok(f) => found.push(f),
            Err(c) => failures.push(c),
        }
    }

    found.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)));
    found.dedup_by(|a, b| (a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-6 * b.1);

    let mut orbits = Vec::with_capacity(found.len());
    for (theta, period, radius) in found {
        let launch = LaunchSpec::new(opts.r0, theta, epsilon)?;
        let trace = integrate_with(&launch, period, opts.trace_dt.min(period / 8.0), &opts.integrator)?;
        orbits.push(ClosedOrbit {
            theta_launch: theta,
            scaled_period: period,
            return_radius: radius,
            epsilon,
            r0: opts.r0,
            trace: trace.points,
            label: None,
            repetition: 1,
        });
    }
    mark_repetitions(&mut orbits);
    Ok(ClosedOrbitSearch { orbits, failures })
}

fn bisect(
    epsilon: f64,
    opts: &FinderOptions,
    lo: (f64, ReturnEvent),
    hi: (f64, ReturnEvent),
) -> Result<std::result::Result<(f64, f64, f64), CandidateFailure>> {
    let (mut a, mut ea) = lo;
    let (mut b, mut eb) = hi;
    let mut best = if ea.radius < eb.radius { (a, ea) } else { (b, eb) };
    for _ in 0..200 {
        if best.1.radius < opts.closure_tol * 1e-4 || (b - a) < 1e-15 {
            break;
        }
        let m = 0.5 * (a + b);
        let launch = LaunchSpec::new(opts.r0, m, epsilon)?;
        let t_guess = 0.5 * (ea.t + eb.t);
        let events = return_events(&launch, (t_guess * 1.2).min(opts.t_max * 1.2), &opts.integrator)?;
        let Some(em) = match_event(&events, t_guess) else {
            break;
        };
        if em.radius < best.1.radius {
            best = (m, em);
        }
        if em.miss.signum() == ea.miss.signum() {
            a = m;
            ea = em;
        } else {
            b = m;
            eb = em;
        }
    }
    let (theta, e) = best;
    if e.radius < opts.closure_tol {
        Ok(Ok((theta, e.t, e.radius)))
    } else {
        Ok(Err(CandidateFailure { theta_bracket: (a, b), approx_period: e.t, best_radius: e.radius }))
    }
}

/// Orbits whose period is an integer multiple of a shorter orbit at the same
/// launch angle are flagged as its repetitions.
fn mark_repetitions(orbits: &mut [ClosedOrbit]) {
    for i in 0..orbits.len() {
        let (th, p) = (orbits[i].theta_launch, orbits[i].scaled_period);
        let base = orbits[..i]
            .iter()
            .filter(|o| o.repetition == 1 && (o.theta_launch - th).abs() < 1e-6)
            .find_map(|o| {
                let k = (p / o.scaled_period).round();
                (k >= 2.0 && (p / o.scaled_period - k).abs() < 1e-5 * k).then_some(k as u32)
            });
        if let Some(k) = base {
            orbits[i].repetition = k;
        }
    }
}

/// Tag primitive orbits with names by nearest launch angle, e.g. `("C", 1.1)`;
/// the shortest orbit within `tol` of each named angle gets the name, and
/// its repetitions inherit it.
pub fn label_orbits(orbits: &mut [ClosedOrbit], names: &[(String, f64)], tol: f64) {
    for (name, angle) in names {
        let pick = orbits
            .iter()
            .enumerate()
            .filter(|(_, o)| o.repetition == 1 && (o.theta_launch - angle).abs() <= tol)
            .min_by(|a, b| {
                let da = (a.1.theta_launch - angle).abs();
                let db = (b.1.theta_launch - angle).abs();
                a.1.scaled_period.total_cmp(&b.1.scaled_period).then(da.total_cmp(&db))
            })
            .map(|(i, o)| (i, o.theta_launch));
        if let Some((i, th)) = pick {
            orbits[i].label = Some(name.clone());
            for o in orbits.iter_mut() {
                if o.repetition > 1 && (o.theta_launch - th).abs() < 1e-6 {
                    o.label = Some(name.clone());
                }
            }
        }
    }
}
