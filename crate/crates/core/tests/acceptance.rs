//! End-to-end acceptance checks, one per numbered criterion.
//!
//! Runs without the libtest harness so that every criterion prints exactly one
//! `criterion N: PASS|FAIL|FLAG ...` line. Pass criterion numbers as arguments
//! to run a subset, e.g. `cargo test -p diamag-core --test acceptance -- 3 4`.

use std::process::ExitCode;
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use diamag_core::bohm::{
    continuity_residual, integrate_trajectory, propagate_ensemble, quantum_potential, sample_initial, velocity,
    BohmField, BohmOptions, CoarseGrid, NodeThresholds, SamplingOptions, TrajectoryStatus,
};
use diamag_core::classical::{find_closed_orbits, integrate, physical_period, ClosedOrbit, FinderOptions, LaunchSpec};
use diamag_core::ode::{dop853_step, initial_step, StepController, Tolerances};
use diamag_core::quantum::{assemble_operators, eigen, solve_window, BasisSpec, SolveTarget, SolverOptions};
use diamag_core::units::{
    au_to_ps, cyclotron_period, energy_from_n_eff, gamma_from_tesla, ps_to_au, scale_phase_point, scaled_energy,
    unscale_phase_point, FieldConfig, PhasePoint,
};
use diamag_core::wavepacket::{
    autocorrelation, build_initial, first_recurrence, uniform_times, StateWindow, Wavepacket, WavepacketSpec,
};

// Tolerances and thresholds, fixed here so that a run cannot loosen them.
const ZERO_FIELD_REL: f64 = 1e-8;
const CONVERGED_REL: f64 = 1e-10;
const DENSE_MAX_DIM: usize = 200;
const SPARSE_DENSE_REL: f64 = 1e-10;
const EPS_55_3T: (f64, f64) = (-0.30, 0.01);
const TC_3T_PS: (f64, f64) = (11.8, 0.015);
const PERIOD_B_PS: f64 = 25.4;
const PERIOD_C_PS: f64 = 16.3;
const PERIOD_REL: f64 = 0.02;
const C_OVER_TC: (f64, f64) = (1.4, 0.05);
const APEX_AU: (f64, f64) = (6000.0, 0.03);
const SCALING_ABS: f64 = 1e-8;
const RECURRENCE_REL: f64 = 0.05;
const EQUIVARIANCE_N: usize = 4000;
const EQUIVARIANCE_GRID: usize = 24;
const EQUIVARIANCE_FACTOR: f64 = 3.0;
const EQUIVARIANCE_CHECKPOINTS: usize = 8;
const BOOTSTRAP_REPS: usize = 200;
const CONTINUITY_REL: f64 = 1e-5;
const CURRENT_REL: f64 = 1e-6;
const IDENTITY_POINTS: usize = 100;
const STATIONARY_REL: f64 = 1e-6;
const FIXED_POINT_ABS: f64 = 1e-9;
const DIVERGENCE_MIN_AU: f64 = 1.0;
const C_MAX_DIFF: f64 = 0.05;

const EPS: f64 = -0.3;
const DESK_N_EFF: f64 = 24.0;
const DESK_N_MAX: usize = 78;

enum Outcome {
    Pass(String),
    Fail(String),
    /// A qualitative claim that did not hold; reported, not fatal.
    Flag(String),
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn hydrogen_n(e: f64) -> usize {
    (0.5 / -e).sqrt().round() as usize
}

/// Even-even `m = 0` states of level `n`: one per even `l < n`.
fn even_l_count(n: usize) -> usize {
    n.div_ceil(2)
}

fn criterion_1() -> Outcome {
    let b = 2f64.sqrt();
    let target = SolveTarget::Window { lo: -0.6, hi: energy_from_n_eff(6.5) };
    let sparse_opts = SolverOptions { dense_below: 0, ..Default::default() };
    let at = |n_max: usize| solve_window(&BasisSpec::new(n_max, b).unwrap(), 0.0, target, &sparse_opts).unwrap().energies;
    let base = at(40);
    let bigger = at(48);
    if base.len() != bigger.len() {
        return Outcome::Fail(format!("{} states at n_max 40 but {} at 48", base.len(), bigger.len()));
    }
    let mut counts = [0usize; 8];
    let mut converged_levels = vec![true; 8];
    let mut worst: f64 = 0.0;
    for (e, e2) in base.iter().zip(&bigger) {
        let n = hydrogen_n(*e);
        if ((e - e2) / e).abs() > CONVERGED_REL {
            converged_levels[n.min(7)] = false;
            continue;
        }
        let exact = -0.5 / (n * n) as f64;
        worst = worst.max(((e - exact) / exact).abs());
        counts[n.min(7)] += 1;
    }
    let full: Vec<usize> = (1..7).filter(|&n| converged_levels[n]).collect();
    let mult_ok = full.iter().all(|&n| counts[n] == even_l_count(n));

    // dense oracle on a basis small enough for the dense solver
    let small = BasisSpec::new(26, b).unwrap();
    assert!(small.dimension() <= DENSE_MAX_DIM);
    let (a, s) = assemble_operators(&small, 0.0).unwrap();
    let dense = eigen::dense(&a, &s, SolveTarget::Window { lo: -0.6, hi: energy_from_n_eff(4.5) }).unwrap();
    let mut dense_counts = [0usize; 5];
    for e in &dense.values {
        dense_counts[hydrogen_n(*e)] += 1;
    }
    let dense_ok = (1..5).all(|n| dense_counts[n] == even_l_count(n));
    check(
        worst < ZERO_FIELD_REL && mult_ok && dense_ok && full.len() >= 4,
        format!("max rel error {worst:.2e}, fully converged levels {full:?}, dense multiplicities {:?}", &dense_counts[1..]),
    )
}

fn criterion_2() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut total = 0;
    let cases = [(24usize, 3.0, 2e-3, (-0.03, -0.008)), (26, 2.0, 0.0, (-0.04, -0.015)), (22, 1.5, 1e-2, (-0.2, -0.02))];
    for (n_max, b, gamma, (lo, hi)) in cases {
        let basis = BasisSpec::new(n_max, b).unwrap();
        assert!(basis.dimension() <= DENSE_MAX_DIM);
        let (a, s) = assemble_operators(&basis, gamma).unwrap();
        let target = SolveTarget::Window { lo, hi };
        let dense = eigen::dense(&a, &s, target).unwrap();
        let sparse = eigen::solve(&a, &s, target, &SolverOptions { dense_below: 0, ..Default::default() }).unwrap();
        if dense.values.len() != sparse.values.len() || dense.values.is_empty() {
            return Outcome::Fail(format!("dense found {} states, sparse {}", dense.values.len(), sparse.values.len()));
        }
        for (d, sp) in dense.values.iter().zip(&sparse.values) {
            worst = worst.max(((d - sp) / d).abs());
        }
        total += dense.values.len();
    }
    check(worst < SPARSE_DENSE_REL, format!("{total} eigenvalues, max rel difference {worst:.2e}"))
}

fn criterion_3() -> Outcome {
    let g = gamma_from_tesla(3.0).unwrap();
    let eps = scaled_energy(energy_from_n_eff(55.0), g).unwrap();
    let tc = cyclotron_period(g).unwrap();
    check(
        (eps - EPS_55_3T.0).abs() <= EPS_55_3T.1 && (tc / TC_3T_PS.0 - 1.0).abs() <= TC_3T_PS.1,
        format!("epsilon(55, 3 T) = {eps:.4}, T_c(3 T) = {tc:.3} ps"),
    )
}

/// Scaled launch radius equivalent to 10 au at 3 T.
fn reference_r0() -> f64 {
    10.0 * gamma_from_tesla(3.0).unwrap().powf(2.0 / 3.0)
}

fn desk_orbits(gamma: f64) -> Vec<ClosedOrbit> {
    find_closed_orbits(EPS, &FinderOptions::new(10.0 * gamma.powf(2.0 / 3.0), 25.0)).unwrap().orbits
}

fn primitive_near(orbits: &[ClosedOrbit], theta: f64) -> Option<&ClosedOrbit> {
    orbits
        .iter()
        .filter(|o| o.repetition == 1 && (o.theta_launch - theta).abs() < 0.15)
        .min_by(|a, b| (a.theta_launch - theta).abs().total_cmp(&(b.theta_launch - theta).abs()))
}

fn criterion_4() -> Outcome {
    let g = gamma_from_tesla(3.0).unwrap();
    let found = find_closed_orbits(EPS, &FinderOptions::new(reference_r0(), 25.0)).unwrap();
    let (Some(b), Some(c)) = (primitive_near(&found.orbits, 0.0), primitive_near(&found.orbits, 1.1)) else {
        return Outcome::Fail(format!("orbits at theta = 0 and 1.1 not both found ({} orbits)", found.orbits.len()));
    };
    if b.theta_launch != 0.0 {
        return Outcome::Fail(format!("parallel orbit launched at {}", b.theta_launch));
    }
    let tb = physical_period(b, g).unwrap();
    let tc_orbit = physical_period(c, g).unwrap();
    let ratio = tc_orbit / cyclotron_period(g).unwrap();
    let launch = LaunchSpec::new(reference_r0(), 0.0, EPS).unwrap();
    let trace = integrate(&launch, b.scaled_period, b.scaled_period / 4000.0).unwrap();
    let apex = trace.points.iter().map(|p| p.z).fold(0.0, f64::max) / g.powf(2.0 / 3.0);
    check(
        (tb / PERIOD_B_PS - 1.0).abs() <= PERIOD_REL
            && (tc_orbit / PERIOD_C_PS - 1.0).abs() <= PERIOD_REL
            && (ratio - C_OVER_TC.0).abs() <= C_OVER_TC.1
            && (apex / APEX_AU.0 - 1.0).abs() <= APEX_AU.1,
        format!(
            "theta_C = {:.4}, T_B = {tb:.2} ps, T_C = {tc_orbit:.2} ps = {ratio:.3} T_c, apex z = {apex:.0} au",
            c.theta_launch
        ),
    )
}

/// Meridian-plane motion in physical atomic units, integrated directly in
/// `(x, z)` with `H = p^2/2 - 1/r + gamma^2 x^2 / 8`; valid away from the nucleus.
fn physical_positions(start: &PhasePoint, gamma: f64, times: &[f64]) -> Vec<[f64; 2]> {
    let g2 = gamma * gamma;
    let sys = move |_t: f64, y: &[f64; 4]| -> [f64; 4] {
        let r3 = y[0].hypot(y[1]).powi(3);
        [y[2], y[3], -y[0] / r3 - 0.25 * g2 * y[0], -y[1] / r3]
    };
    let tol = Tolerances::new(1e-13, 1e-13 * start.r[0].hypot(start.r[1]));
    let mut y = [start.r[0], start.r[1], start.p[0], start.p[1]];
    let mut t = 0.0;
    let mut k = sys(t, &y);
    let mut h = initial_step(&sys, t, &y, &k, tol, times[times.len() - 1]);
    let mut ctl = StepController::default();
    let mut out = Vec::new();
    for &target in times {
        while t < target {
            let step = h.min(target - t);
            let trial = dop853_step(&sys, t, &y, &k, step, tol);
            let (ok, next) = ctl.judge(step, trial.err);
            if ok {
                t = if step == target - t { target } else { t + step };
                y = trial.y;
                k = sys(t, &y);
            }
            h = next;
        }
        out.push([y[0], y[1]]);
    }
    out
}

fn criterion_5() -> Outcome {
    let theta = 0.7;
    let r0 = 0.5;
    let launch = LaunchSpec::new(r0, theta, EPS).unwrap();
    // the launch is radial and outward, with the speed fixed by the energy
    let p_phys = (2.0 * (EPS + 1.0 / r0 - (r0 * theta.sin()).powi(2) / 8.0)).sqrt();
    let scaled = PhasePoint {
        r: [r0 * theta.sin(), r0 * theta.cos()],
        p: [p_phys * theta.sin(), p_phys * theta.cos()],
        t: 0.0,
    };
    let t_max = 2.0;
    let dt = 0.05;
    let trace = integrate(&launch, t_max, dt).unwrap();
    let times: Vec<f64> = trace.points.iter().map(|p| p.t).collect();
    let mut worst: f64 = 0.0;
    for n_eff in [20.0, 55.0] {
        let e = energy_from_n_eff(n_eff);
        let gamma = (e / EPS).powf(1.5);
        let start = unscale_phase_point(&scaled, gamma).unwrap();
        let phys_times: Vec<f64> = times.iter().map(|t| t / gamma).collect();
        let pos = physical_positions(&start, gamma, &phys_times);
        for (p, tp) in pos.iter().zip(&trace.points) {
            let s = scale_phase_point(&PhasePoint { r: *p, p: [0.0; 2], t: 0.0 }, gamma).unwrap();
            worst = worst.max((s.r[0].abs() - tp.rho).abs()).max((s.r[1] - tp.z).abs());
        }
    }
    check(worst < SCALING_ABS, format!("{} samples over scaled time {t_max}, max scaled deviation {worst:.2e}", times.len()))
}

struct Desk {
    field: FieldConfig,
    wp: Wavepacket,
    orbit_c: ClosedOrbit,
    first_recurrence: Option<f64>,
}

fn desk() -> Desk {
    let field = FieldConfig::from_epsilon_and_n_eff(EPS, DESK_N_EFF).unwrap();
    let basis = BasisSpec::for_n_eff(DESK_N_MAX, DESK_N_EFF).unwrap();
    let (lo, hi) = (DESK_N_EFF - 2.5, DESK_N_EFF + 2.5);
    let target = SolveTarget::Window { lo: energy_from_n_eff(lo), hi: energy_from_n_eff(hi) };
    let spectrum = solve_window(&basis, field.gamma, target, &SolverOptions::default()).unwrap();
    let spec = WavepacketSpec { window: StateWindow::NEff { lo, hi }, ..Default::default() };
    let wp = build_initial(&spec, &spectrum).unwrap();
    let orbit_c = primitive_near(&desk_orbits(field.gamma), 1.1).expect("orbit near theta = 1.1").clone();
    let times = uniform_times(ps_to_au(4.0), 4001).unwrap();
    let intensity = autocorrelation(&wp, &times).unwrap().intensity();
    let first_recurrence = first_recurrence(&times, &intensity, 0.5).map(|p| p.time);
    Desk { field, wp, orbit_c, first_recurrence }
}

fn criterion_6(d: &Desk) -> Outcome {
    let t_orbit = d.orbit_c.scaled_period / d.field.gamma;
    let Some(t_rec) = d.first_recurrence else {
        return Outcome::Fail("no recurrence peak within 4 ps".into());
    };
    check(
        (t_rec / t_orbit - 1.0).abs() <= RECURRENCE_REL,
        format!(
            "gamma = {:.4e}, first |C|^2 peak {:.4} ps, orbit C {:.4} ps, ratio {:.4}",
            d.field.gamma,
            au_to_ps(t_rec),
            au_to_ps(t_orbit),
            t_rec / t_orbit
        ),
    )
}

fn criterion_7(d: &Desk) -> Outcome {
    use diamag_core::bohm::equivariance_distance;
    let Some(t_rec) = d.first_recurrence else {
        return Outcome::Fail("no recurrence to propagate to".into());
    };
    let field = BohmField::new(&d.wp, NodeThresholds::default()).unwrap();
    let ens = sample_initial(&d.wp, EQUIVARIANCE_N, 1, &SamplingOptions::default()).unwrap();
    let k = EQUIVARIANCE_CHECKPOINTS;
    let checkpoints: Vec<f64> = (0..=k).map(|c| d.wp.t0 + (t_rec - d.wp.t0) * c as f64 / k as f64).collect();
    let opts = BohmOptions { tol: Tolerances::new(1e-7, 1e-5), ..Default::default() };
    let run = propagate_ensemble(&field, &ens, &checkpoints, &opts).unwrap();
    let grid = CoarseGrid::for_ensemble(EQUIVARIANCE_GRID, &ens).unwrap();
    let mut worst: f64 = 0.0;
    let mut detail = Vec::new();
    for c in 0..checkpoints.len() {
        let r = match equivariance_distance(&d.wp, &run, c, &grid, BOOTSTRAP_REPS, 100 + c as u64) {
            Ok(r) => r,
            Err(e) => return Outcome::Fail(format!("checkpoint {c}: {e}")),
        };
        let ratio = r.tv_distance / r.bootstrap_noise;
        worst = worst.max(ratio);
        detail.push(format!("{ratio:.2}"));
    }
    let (stalled, underflow) = run.census();
    check(
        worst <= EQUIVARIANCE_FACTOR,
        format!(
            "N = {}, {} checkpoints to {:.4} ps, TV / noise = [{}], {stalled} stalled, {underflow} underflow",
            ens.len(),
            checkpoints.len(),
            au_to_ps(t_rec),
            detail.join(", ")
        ),
    )
}

fn criterion_8(d: &Desk) -> Outcome {
    let wp = &d.wp;
    let field = BohmField::new(wp, NodeThresholds::default()).unwrap();
    let mut ws = wp.workspace();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut worst_c, mut worst_j): (f64, f64) = (0.0, 0.0);
    let mut n = 0;
    while n < IDENTITY_POINTS {
        let r = rng.gen_range(5.0..900.0);
        let theta = rng.gen_range(0.05..1.5f64);
        let (rho, z) = (r * theta.sin(), r * theta.cos());
        let t = rng.gen_range(0.0..d.first_recurrence.unwrap_or(5e4));
        let Ok(v) = velocity(&field, &mut ws, rho, z, t) else { continue };
        if v.node_flag {
            continue;
        }
        let c = continuity_residual(&field, &mut ws, rho, z, t).unwrap();
        worst_c = worst_c.max(c.relative.abs());

        // current from a Richardson-extrapolated central difference of psi
        let h = 1e-3 * (1.0 + r).sqrt();
        let fd = |dr: f64, dz: f64| -> Complex64 {
            let f = |s: f64| wp.psi_at(rho + s * dr, z + s * dz, t).unwrap().value;
            let d1 = (f(h) - f(-h)) / (2.0 * h);
            let d2 = (f(h / 2.0) - f(-h / 2.0)) / h;
            (d2 * 4.0 - d1) / 3.0
        };
        let psi = wp.psi_at(rho, z, t).unwrap().value;
        let j_fd = [(psi.conj() * fd(1.0, 0.0)).im, (psi.conj() * fd(0.0, 1.0)).im];
        let density = v.amp * v.amp;
        let scale = v.amp * v.grad;
        worst_j = worst_j.max((j_fd[0] - density * v.v_rho).abs() / scale).max((j_fd[1] - density * v.v_z).abs() / scale);
        n += 1;
    }
    check(
        worst_c < CONTINUITY_REL && worst_j < CURRENT_REL,
        format!("{n} points: max continuity residual {worst_c:.2e}, max current mismatch {worst_j:.2e}"),
    )
}

fn criterion_9() -> Outcome {
    // n = 3 states are exact when b^2 = 3
    let basis = BasisSpec::new(12, 3f64.sqrt()).unwrap();
    let spec = solve_window(&basis, 0.0, SolveTarget::Lowest(4), &SolverOptions::default()).unwrap();
    let k = 2;
    let e = spec.energies[k];
    let wp = Wavepacket::from_coefficients(spec.select(&[k]).unwrap(), vec![Complex64::from_polar(1.0, 0.3)]).unwrap();
    let field = BohmField::new(&wp, NodeThresholds::default()).unwrap();
    let mut ws = wp.workspace();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut worst_v, mut worst_q): (f64, f64) = (0.0, 0.0);
    let mut n = 0;
    while n < IDENTITY_POINTS {
        let rho = rng.gen_range(0.1..15.0);
        let z = rng.gen_range(0.0..15.0);
        let t = rng.gen_range(0.0..1e4);
        let (Ok(v), Ok(q)) = (velocity(&field, &mut ws, rho, z, t), quantum_potential(&field, &mut ws, rho, z, t)) else {
            continue;
        };
        worst_v = worst_v.max(v.v_rho.hypot(v.v_z) * v.amp / v.grad);
        let pot = -1.0 / rho.hypot(z);
        worst_q = worst_q.max((e - pot - q).abs() / (e.abs() + pot.abs() + q.abs()));
        n += 1;
    }
    let start = [3.0, 4.0];
    let tr = integrate_trajectory(&field, start, (0.0, 5000.0), &[1000.0], &BohmOptions::default()).unwrap();
    let end = tr.last();
    let drift = (end[0] - start[0]).hypot(end[1] - start[1]);
    check(
        worst_v < 1e-12 && worst_q < STATIONARY_REL && tr.status == TrajectoryStatus::Completed && drift < FIXED_POINT_ABS,
        format!("{n} points: max |v| / (|grad psi| / |psi|) {worst_v:.1e}, max Q + V - E {worst_q:.2e}, fixed-point drift {drift:.1e} au"),
    )
}

fn criterion_10(d: &Desk) -> Outcome {
    let Some(t_rec) = d.first_recurrence else {
        return Outcome::Fail("no recurrence time".into());
    };
    let r0 = 10.0;
    let start = [r0 * 1.1f64.sin(), r0 * 1.1f64.cos()];
    let opts = BohmOptions::default();
    let field = BohmField::new(&d.wp, NodeThresholds::default()).unwrap();
    let tr = integrate_trajectory(&field, start, (d.wp.t0, t_rec), &[], &opts).unwrap();
    let p = tr.last();
    let dist = p[0].hypot(p[1]);

    let trimmed = d.wp.trimmed().unwrap();
    let times = uniform_times(ps_to_au(4.0), 4001).unwrap();
    let c_diff = times.iter().map(|t| (trimmed.autocorrelation_at(*t).norm() - d.wp.autocorrelation_at(*t).norm()).abs()).fold(0.0, f64::max);
    let tfield = BohmField::new(&trimmed, NodeThresholds::default()).unwrap();
    let other = integrate_trajectory(&tfield, start, (d.wp.t0, t_rec), &[], &opts).unwrap();
    let q = other.last();
    let sep = (q[0] - p[0]).hypot(q[1] - p[1]);

    let claims = [
        (dist > r0, format!("bump trajectory at recurrence r = {dist:.2} au (must exceed {r0})")),
        (c_diff <= C_MAX_DIFF, format!("trimmed window max ||C| - |C'|| = {c_diff:.4} (<= {C_MAX_DIFF})")),
        (sep >= DIVERGENCE_MIN_AU, format!("trimmed window trajectory separation {sep:.2} au (>= {DIVERGENCE_MIN_AU})")),
    ];
    let detail = claims.iter().map(|(ok, s)| format!("[{}] {s}", if *ok { "ok" } else { "flagged" })).collect::<Vec<_>>().join("; ");
    if claims.iter().all(|c| c.0) {
        Outcome::Pass(detail)
    } else {
        Outcome::Flag(detail)
    }
}

fn main() -> ExitCode {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let mut failed = 0;
    let mut report = |n: u32, start: Instant, o: Outcome| {
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match o {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Flag(d) => ("FLAG", d),
        };
        println!("criterion {n:>2}: {tag} ({secs:.1} s) {detail}");
    };
    let simple: [(u32, fn() -> Outcome); 6] =
        [(1, criterion_1), (2, criterion_2), (3, criterion_3), (4, criterion_4), (5, criterion_5), (9, criterion_9)];
    for (n, f) in simple {
        if run(n) {
            let t = Instant::now();
            report(n, t, f());
        }
    }
    if [6, 7, 8, 10].into_iter().any(run) {
        let t = Instant::now();
        let d = desk();
        println!("desk setup: {} states, {:.1} s", d.wp.len(), t.elapsed().as_secs_f64());
        let desk_checks: [(u32, fn(&Desk) -> Outcome); 4] = [(6, criterion_6), (8, criterion_8), (10, criterion_10), (7, criterion_7)];
        for (n, f) in desk_checks {
            if run(n) {
                let t = Instant::now();
                report(n, t, f(&d));
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
