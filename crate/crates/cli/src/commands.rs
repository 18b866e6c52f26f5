//! The subcommands. Each stage writes its CSVs (and plots unless disabled)
//! into the output directory and registers them with the manifest.

use std::fs;
use std::path::PathBuf;

use diamag_core::bohm::{
    equivariance_distance, integrate_trajectory, propagate_ensemble, sample_initial, BohmField, BohmOptions,
    BohmTrajectory, CoarseGrid, EquivarianceReport, NodeThresholds, SamplingOptions,
};
use diamag_core::classical::{find_closed_orbits, label_orbits, ClosedOrbit, ClosedOrbitSearch, FinderOptions};
use diamag_core::io as csv;
use diamag_core::ode::Tolerances;
use diamag_core::quantum::cache::{load_matching, write_spectrum, CacheKey};
use diamag_core::quantum::{solve_window, SolverOptions};
use diamag_core::units::{au_to_ps, ps_to_au};
use diamag_core::wavepacket::{
    autocorrelation, build_initial, density_probe, first_recurrence, local_maxima, ProbePoint, recurrence_time_signal, uniform_times,
    Wavepacket,
};
use diamag_core::{SolveTarget, Spectrum};

use crate::config::RunConfig;
use crate::manifest::Manifest;
use crate::plot::{Marker, Plot, Series};
use crate::CliError;

/// Outcome of one qualitative check.
#[derive(Debug, Clone, PartialEq)]
pub struct Flag {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
}

pub struct Run<'a> {
    pub cfg: &'a RunConfig,
    pub plots: bool,
    pub manifest: Manifest,
    pub flags: Vec<Flag>,
}

impl<'a> Run<'a> {
    pub fn new(cfg: &'a RunConfig, plots: bool) -> Result<Self, CliError> {
        fs::create_dir_all(&cfg.output_dir)?;
        Ok(Self { cfg, plots, manifest: Manifest::new(&cfg.hash, &cfg.output_dir), flags: Vec::new() })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.cfg.output_dir.join(name)
    }

    /// Path of a new CSV, registered with the manifest.
    fn csv_path(&mut self, name: &str) -> PathBuf {
        let p = self.path(name);
        self.manifest.add(&p);
        p
    }

    fn plot(&mut self, name: &str, plot: &Plot) -> Result<(), CliError> {
        if self.plots {
            let p = self.path(name);
            fs::write(&p, plot.to_svg())?;
            self.manifest.add(&p);
        }
        Ok(())
    }

    fn length_unit(&self) -> f64 {
        self.cfg.field.gamma.powf(-2.0 / 3.0)
    }
}

/// Search and label closed orbits without writing anything.
pub fn find_orbits(run: &mut Run) -> Result<ClosedOrbitSearch, CliError> {
    let cfg = run.cfg;
    let mut opts = FinderOptions::new(cfg.orbits.r0_au / run.length_unit(), cfg.orbits.t_max_scaled);
    opts.theta_steps = cfg.orbits.theta_steps;
    let mut search = run.manifest.time("closed-orbits", |_| find_closed_orbits(cfg.field.epsilon, &opts))?;
    label_orbits(&mut search.orbits, &cfg.orbits.labels, cfg.orbits.label_tol);
    Ok(search)
}

pub fn closed_orbits(run: &mut Run) -> Result<ClosedOrbitSearch, CliError> {
    let cfg = run.cfg;
    let gamma = cfg.field.gamma;
    let search = find_orbits(run)?;
    for f in &search.failures {
        log::warn!("unresolved closure near theta in {:?}, best return radius {:e}", f.theta_bracket, f.best_radius);
    }
    log::info!("{} closed orbits at epsilon = {}", search.orbits.len(), cfg.field.epsilon);
    let p = run.csv_path("orbits.csv");
    csv::write_orbits_csv(&p, &cfg.hash, &search.orbits, Some(gamma))?;
    let dir = run.path("orbits");
    fs::create_dir_all(&dir)?;
    let mut series = Vec::new();
    for (i, o) in search.orbits.iter().enumerate().filter(|(_, o)| o.repetition == 1) {
        let p = dir.join(format!("orbit_{i:02}.csv"));
        run.manifest.add(&p);
        csv::write_orbit_trace_csv(&p, &cfg.hash, o, gamma)?;
        let unit = run.length_unit();
        series.push(Series { label: o.display_label(), points: o.trace.iter().map(|q| (q.rho * unit, q.z * unit)).collect() });
    }
    run.plot(
        "orbits.svg",
        &Plot {
            title: format!("Closed orbits, scaled energy {}", cfg.field.epsilon),
            x_label: "rho (au)".into(),
            y_label: "z (au)".into(),
            series,
            markers: Vec::new(),
            equal_aspect: true,
        },
    )?;
    Ok(search)
}

fn cache_key(cfg: &RunConfig) -> CacheKey {
    CacheKey { gamma: cfg.field.gamma, basis: cfg.basis, target: SolveTarget::Window { lo: cfg.window.0, hi: cfg.window.1 } }
}

fn cache_file(cfg: &RunConfig) -> PathBuf {
    cfg.cache_path().join(cache_key(cfg).file_name())
}

/// Solve (or load from the cache) and write `spectrum.csv`.
pub fn spectrum(run: &mut Run) -> Result<Spectrum, CliError> {
    let cfg = run.cfg;
    let key = cache_key(cfg);
    let file = cache_file(cfg);
    let cached = if cfg.use_cache {
        run.manifest.time("spectrum-cache-lookup", |_| load_matching(&file, &key))?
    } else {
        None
    };
    let spec = match cached {
        Some(s) => {
            log::info!("spectrum cache hit: {}", file.display());
            s
        }
        None => {
            let s = run.manifest.time("spectrum", |_| {
                solve_window(&cfg.basis, cfg.field.gamma, key.target, &SolverOptions::default())
            })?;
            if cfg.use_cache {
                fs::create_dir_all(cfg.cache_path())?;
                write_spectrum(&file, &s)?;
                run.manifest.add(&file);
            }
            s
        }
    };
    log::info!("{} states in [{}, {}] hartree, dimension {}", spec.len(), cfg.window.0, cfg.window.1, cfg.basis.dimension());
    let p = run.csv_path("spectrum.csv");
    csv::write_spectrum_csv(&p, &cfg.hash, &spec)?;
    Ok(spec)
}

/// The cached spectrum for this configuration, or an error saying how to make it.
pub fn cached_spectrum(cfg: &RunConfig) -> Result<Spectrum, CliError> {
    let file = cache_file(cfg);
    match load_matching(&file, &cache_key(cfg))? {
        Some(s) => Ok(s),
        None => Err(CliError::Usage(format!(
            "no spectrum for this configuration at {}; run `diamag spectrum` with the same --config and --cache first",
            file.display()
        ))),
    }
}

/// Wavepacket plus what later stages need from the evolution.
pub struct Evolution {
    pub wp: Wavepacket,
    pub times_au: Vec<f64>,
    pub c_abs: Vec<f64>,
    /// First recurrence peak of `|C|^2`, au.
    pub first_recurrence: Option<f64>,
}

/// Orbit whose period (repetitions included) lies within 5% of `t_au`.
fn match_orbit(orbits: &[ClosedOrbit], gamma: f64, t_au: f64) -> Option<&ClosedOrbit> {
    orbits
        .iter()
        .map(|o| (o, o.scaled_period / gamma))
        .filter(|(_, p)| (p - t_au).abs() <= 0.05 * p)
        .min_by(|a, b| (a.1 - t_au).abs().total_cmp(&(b.1 - t_au).abs()))
        .map(|(o, _)| o)
}

pub fn evolve(run: &mut Run, spectrum: &Spectrum, orbits: &[ClosedOrbit]) -> Result<Evolution, CliError> {
    let cfg = run.cfg;
    let gamma = cfg.field.gamma;
    let wp = run.manifest.time("wavepacket", |_| build_initial(&cfg.wavepacket, spectrum))?;
    log::info!(
        "wavepacket: {} states, captured fraction {:.4e}, overlap with target {:.4}",
        wp.len(),
        wp.captured_fraction,
        wp.target_overlap()
    );
    let times = uniform_times(ps_to_au(cfg.time.t_max_ps), cfg.time.samples)?;
    let c = run.manifest.time("autocorrelation", |_| autocorrelation(&wp, &times))?;
    let p = run.csv_path("autocorrelation.csv");
    csv::write_time_series_csv(&p, &cfg.hash, &c)?;
    let intensity = c.intensity();
    let first = first_recurrence(&times, &intensity, cfg.peak_fraction);

    let later_max = intensity.iter().skip(1).copied().fold(0.0, f64::max);
    let peaks: Vec<_> = local_maxima(&times, &intensity).into_iter().filter(|q| q.height >= 0.1 * later_max).collect();
    let p = run.csv_path("peaks.csv");
    let mut w = csv::CsvWriter::create(&p, &cfg.hash, &["t_ps", "abs2", "orbit", "t_over_orbit_period", "first_recurrence"])?;
    let mut markers = Vec::new();
    for q in &peaks {
        let orbit = match_orbit(orbits, gamma, q.time);
        let label = orbit.map(|o| o.display_label()).unwrap_or_default();
        let ratio = orbit.map(|o| q.time / (o.scaled_period / gamma)).unwrap_or(f64::NAN);
        let is_first = first.as_ref().is_some_and(|f| f.index == q.index);
        w.row(&[
            csv::Field::F(au_to_ps(q.time)),
            csv::Field::F(q.height),
            csv::Field::S(label.clone()),
            csv::Field::F(ratio),
            csv::Field::U(is_first as u64),
        ])?;
        markers.push(Marker { x: au_to_ps(q.time), label: if label.is_empty() { format!("{:.3}", au_to_ps(q.time)) } else { label } });
    }
    w.finish()?;
    if let Some(f) = &first {
        log::info!("first recurrence at {:.5} ps, |C|^2 = {:.4e}", au_to_ps(f.time), f.height);
    } else {
        log::warn!("no recurrence peak of |C|^2 within the time grid");
    }
    let xs: Vec<f64> = c.times_ps.clone();
    run.plot(
        "autocorrelation.svg",
        &Plot {
            title: "Autocorrelation".into(),
            x_label: "t (ps)".into(),
            y_label: "|C(t)|^2".into(),
            series: vec![Series { label: "|C|^2".into(), points: xs.iter().copied().zip(intensity.iter().copied()).collect() }],
            markers,
            equal_aspect: false,
        },
    )?;

    let e = wp.energies();
    let window = (e[0] - 1e-9, e[e.len() - 1] + 1e-9);
    let sig = recurrence_time_signal(&wp, window, cfg.apodization, &times)?;
    let p = run.csv_path("recurrence_signal.csv");
    csv::write_time_series_csv(&p, &cfg.hash, &sig)?;
    let orbit_marks: Vec<Marker> = orbits
        .iter()
        .filter(|o| o.repetition == 1)
        .map(|o| Marker { x: au_to_ps(o.scaled_period / gamma), label: o.display_label() })
        .collect();
    run.plot(
        "recurrence_signal.svg",
        &Plot {
            title: "Recurrence signal".into(),
            x_label: "t (ps)".into(),
            y_label: "signal".into(),
            series: vec![Series { label: "signal".into(), points: sig.times_ps.iter().copied().zip(sig.intensity()).collect() }],
            markers: orbit_marks,
            equal_aspect: false,
        },
    )?;

    let mut probe_series = Vec::new();
    for (i, pt) in cfg.probes.iter().enumerate() {
        let s = density_probe(&wp, *pt, &times, cfg.probe_power)?;
        let p = run.csv_path(&format!("probe_{i}.csv"));
        csv::write_time_series_csv(&p, &cfg.hash, &s)?;
        let (rho, z) = pt.rho_z();
        probe_series.push(Series { label: format!("({rho:.2}, {z:.2})"), points: s.times_ps.iter().copied().zip(s.intensity()).collect() });
    }
    let mut probe_marks = Vec::new();
    let on_orbit = cfg.orbit_probe.as_ref().and_then(|(label, f)| {
        orbits.iter().find(|o| o.repetition == 1 && o.label.as_deref() == Some(label)).map(|o| (o, label, *f))
    });
    if let Some((orbit, label, f)) = on_orbit {
        let q = orbit.point_at_arc_fraction(f)?;
        let scale = gamma.powf(-2.0 / 3.0);
        let (rho, z) = (q.rho * scale, q.z * scale);
        let s = density_probe(&wp, ProbePoint::Cylindrical { rho, z }, &times, cfg.probe_power)?;
        // passages along the orbit and along its time reverse
        let t_out = au_to_ps(q.t / gamma);
        let t_back = au_to_ps((orbit.scaled_period - q.t) / gamma);
        log::info!("probe on orbit {label} at ({rho:.2}, {z:.2}) au: classical passages at {t_out:.4} and {t_back:.4} ps");
        let p = run.csv_path("probe_orbit.csv");
        csv::write_time_series_csv(&p, &cfg.hash, &s)?;
        let mut w = csv::CsvWriter::create(&run.csv_path("probe_orbit_passages.csv"), &cfg.hash, &["orbit", "arc_fraction", "rho_au", "z_au", "t_out_ps", "t_back_ps"])?;
        w.row(&[csv::Field::S(label.clone()), csv::Field::F(f), csv::Field::F(rho), csv::Field::F(z), csv::Field::F(t_out), csv::Field::F(t_back)])?;
        w.finish()?;
        probe_series.push(Series { label: format!("{label} at {f}"), points: s.times_ps.iter().copied().zip(s.intensity()).collect() });
        probe_marks.push(Marker { x: t_out, label: format!("{label} out") });
        probe_marks.push(Marker { x: t_back, label: format!("{label} back") });
    }
    if !probe_series.is_empty() {
        run.plot(
            "probes.svg",
            &Plot {
                title: "Density at probe points".into(),
                x_label: "t (ps)".into(),
                y_label: format!("|psi|^{}", cfg.probe_power),
                series: probe_series,
                markers: probe_marks,
                equal_aspect: false,
            },
        )?;
    }
    let c_abs = intensity.iter().map(|x| x.sqrt()).collect();
    Ok(Evolution { wp, times_au: times, c_abs, first_recurrence: first.map(|f| f.time) })
}

fn trajectory_series(label: String, tr: &BohmTrajectory) -> Series {
    Series { label, points: tr.points.iter().map(|p| (p[0], p[1])).collect() }
}

pub fn bohm(run: &mut Run, ev: &Evolution) -> Result<(), CliError> {
    let cfg = run.cfg;
    let wp = &ev.wp;
    let field = run.manifest.time("node-scan", |_| BohmField::new(wp, NodeThresholds::default()))?;
    let t_end = ps_to_au(cfg.trajectories.t_max_ps);
    let rec = ev.first_recurrence.filter(|t| *t > 0.0 && *t <= t_end);
    let checkpoints: Vec<f64> = rec.into_iter().collect();
    let opts = BohmOptions::default();

    let mut series = Vec::new();
    let mut at_recurrence = Vec::new();
    let trajs: Vec<BohmTrajectory> = run.manifest.time("trajectories", |_| {
        cfg.trajectories
            .starts
            .iter()
            .map(|&(r, th)| integrate_trajectory(&field, [r * th.sin(), r * th.cos()], (wp.t0, t_end), &checkpoints, &opts))
            .collect::<Result<_, _>>()
    })?;
    for (i, tr) in trajs.iter().enumerate() {
        let p = run.csv_path(&format!("trajectory_{i}.csv"));
        csv::write_trajectory_csv(&p, &cfg.hash, tr)?;
        let (r, th) = cfg.trajectories.starts[i];
        log::info!("trajectory {i} from (r = {r}, theta = {th}): {} after {} steps", tr.status.name(), tr.steps);
        series.push(trajectory_series(format!("r={r}, theta={th}"), tr));
        at_recurrence.push(tr.checkpoints.first().copied().flatten());
    }
    run.plot(
        "trajectories.svg",
        &Plot {
            title: "Bohmian trajectories".into(),
            x_label: "rho (au)".into(),
            y_label: "z (au)".into(),
            series,
            markers: Vec::new(),
            equal_aspect: true,
        },
    )?;

    if let (Some(t_rec), Some(Some(p))) = (rec, at_recurrence.first()) {
        let r0 = cfg.wavepacket.r0;
        let dist = p[0].hypot(p[1]);
        run.flags.push(Flag { name: "bump-trajectory-beyond-r0-at-recurrence".into(), passed: dist > r0, value: dist, threshold: r0 });

        let trimmed = wp.trimmed()?;
        let c_diff = ev
            .times_au
            .iter()
            .zip(&ev.c_abs)
            .map(|(t, c)| (trimmed.autocorrelation_at(*t).norm() - c).abs())
            .fold(0.0, f64::max);
        run.flags.push(Flag { name: "trimmed-window-autocorrelation-unchanged".into(), passed: c_diff <= cfg.checks.c_max_diff, value: c_diff, threshold: cfg.checks.c_max_diff });
        let tfield = BohmField::new(&trimmed, NodeThresholds::default())?;
        let (r, th) = cfg.trajectories.starts[0];
        let other = integrate_trajectory(&tfield, [r * th.sin(), r * th.cos()], (wp.t0, t_rec), &[], &opts)?;
        let q = other.last();
        let sep = (q[0] - p[0]).hypot(q[1] - p[1]);
        run.flags.push(Flag {
            name: "trimmed-window-trajectory-diverges".into(),
            passed: sep >= cfg.checks.divergence_min_au,
            value: sep,
            threshold: cfg.checks.divergence_min_au,
        });
    }

    ensemble(run, ev, &field)?;

    let p = run.csv_path("checks.csv");
    let mut w = csv::CsvWriter::create(&p, &cfg.hash, &["check", "passed", "value", "threshold"])?;
    for f in &run.flags {
        w.row(&[csv::Field::S(f.name.clone()), csv::Field::U(f.passed as u64), csv::Field::F(f.value), csv::Field::F(f.threshold)])?;
    }
    w.finish()?;
    Ok(())
}

fn ensemble(run: &mut Run, ev: &Evolution, field: &BohmField) -> Result<(), CliError> {
    let cfg = run.cfg;
    let es = &cfg.ensemble;
    let wp = &ev.wp;
    let t_last = es.t_max_ps.map(ps_to_au).or(ev.first_recurrence).unwrap_or(ps_to_au(cfg.time.t_max_ps));
    let checkpoints: Vec<f64> = (0..=es.checkpoints).map(|c| wp.t0 + (t_last - wp.t0) * c as f64 / es.checkpoints as f64).collect();
    let ens = run.manifest.time("sampling", |_| sample_initial(wp, es.n, es.seed, &SamplingOptions::default()))?;
    log::info!("sampled {} points, acceptance {:.4}", ens.len(), ens.acceptance_rate);
    let opts = BohmOptions { tol: Tolerances::new(es.rtol, es.atol), ..BohmOptions::default() };
    let ensemble_run = run.manifest.time("ensemble", |_| propagate_ensemble(field, &ens, &checkpoints, &opts))?;
    let (stalled, underflow) = ensemble_run.census();
    log::info!("ensemble: {stalled} node-stalled, {underflow} step-underflow of {}", ens.len());

    let dir = run.path("ensemble");
    fs::create_dir_all(&dir)?;
    for (c, t) in checkpoints.iter().enumerate() {
        let p = dir.join(format!("snapshot_{c:02}.csv"));
        run.manifest.add(&p);
        csv::write_snapshot_csv(&p, &cfg.hash, *t, &ensemble_run.positions[c])?;
    }
    let grid = CoarseGrid::for_ensemble(es.grid_cells, &ens)?;
    let reports: Vec<EquivarianceReport> = run.manifest.time("equivariance", |_| {
        (0..checkpoints.len())
            .map(|c| equivariance_distance(wp, &ensemble_run, c, &grid, es.bootstrap_reps, es.seed ^ c as u64))
            .collect::<Result<_, _>>()
    })?;
    let p = run.csv_path("equivariance.csv");
    csv::write_equivariance_csv(&p, &cfg.hash, &reports)?;
    let worst = reports.iter().map(|r| r.tv_distance / r.bootstrap_noise).fold(0.0, f64::max);
    run.flags.push(Flag { name: "equivariance-within-3x-noise".into(), passed: worst <= 3.0, value: worst, threshold: 3.0 });
    run.plot(
        "equivariance.svg",
        &Plot {
            title: "Ensemble vs |psi|^2 on the coarse grid".into(),
            x_label: "t (ps)".into(),
            y_label: "total variation".into(),
            series: vec![
                Series { label: "TV distance".into(), points: reports.iter().map(|r| (au_to_ps(r.t), r.tv_distance)).collect() },
                Series { label: "3 x bootstrap noise".into(), points: reports.iter().map(|r| (au_to_ps(r.t), 3.0 * r.bootstrap_noise)).collect() },
            ],
            markers: Vec::new(),
            equal_aspect: false,
        },
    )?;
    Ok(())
}

/// Flags that failed.
pub fn violations(flags: &[Flag]) -> Vec<&Flag> {
    flags.iter().filter(|f| !f.passed).collect()
}

