//! Run configuration: a TOML file of flat dotted keys such as
//! `field.tesla = 3.0` or `wavepacket.r0_au = 10.0`.
//!
//! Every key has a default, so an empty file is the desk-scale run. Unknown
//! keys are rejected. The config hash is taken over the resolved values
//! (defaults included), so spelling out a default does not change it;
//! output and cache locations are left out of the hash.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::PathBuf;

use diamag_core::units::{energy_from_n_eff, FieldConfig};
use diamag_core::wavepacket::{Apodization, ProbePoint, ProjectionGrid, StateWindow, WavepacketSpec};
use diamag_core::BasisSpec;
use sha2::{Digest, Sha256};
use toml::Value;

#[derive(Debug, thiserror::Error)]
#[error("config: {0}")]
pub struct ConfigError(pub String);

fn err(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    pub t_max_ps: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrbitSettings {
    pub r0_au: f64,
    pub t_max_scaled: f64,
    pub theta_steps: usize,
    /// `(name, launch angle)` pairs used to tag the found orbits.
    pub labels: Vec<(String, f64)>,
    pub label_tol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySettings {
    /// `(r, theta)` starting points, au and rad.
    pub starts: Vec<(f64, f64)>,
    pub t_max_ps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSettings {
    pub n: usize,
    pub seed: u64,
    pub checkpoints: usize,
    /// Last checkpoint; `None` means the first recurrence time.
    pub t_max_ps: Option<f64>,
    pub grid_cells: usize,
    pub bootstrap_reps: usize,
    pub rtol: f64,
    pub atol: f64,
}

/// Thresholds of the qualitative checks.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckSettings {
    /// Smallest end-point separation that counts as divergence, au.
    pub divergence_min_au: f64,
    /// Largest `max_t | |C| - |C_trimmed| |` that counts as unchanged.
    pub c_max_diff: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub field: FieldConfig,
    /// Energy window of the solve, hartree.
    pub window: (f64, f64),
    pub basis: BasisSpec,
    pub wavepacket: WavepacketSpec,
    pub time: TimeGrid,
    pub probes: Vec<ProbePoint>,
    pub probe_power: u32,
    /// Extra probe on a labeled closed orbit: `(label, arc-length fraction)`.
    pub orbit_probe: Option<(String, f64)>,
    pub apodization: Apodization,
    pub peak_fraction: f64,
    pub orbits: OrbitSettings,
    pub trajectories: TrajectorySettings,
    pub ensemble: EnsembleSettings,
    pub checks: CheckSettings,
    pub output_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub use_cache: bool,
    pub hash: String,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub cache: Option<PathBuf>,
}

struct Reader {
    map: BTreeMap<String, Value>,
    canon: BTreeMap<String, String>,
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

fn as_f64(key: &str, v: &Value) -> Result<f64, ConfigError> {
    match v {
        Value::Float(x) => Ok(*x),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(err(format!("{key}: expected a number, got {v}"))),
    }
}

impl Reader {
    fn record(&mut self, key: &str, v: impl Display) {
        self.canon.insert(key.to_string(), v.to_string());
    }

    fn has(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    fn opt_f64(&mut self, key: &str) -> Result<Option<f64>, ConfigError> {
        match self.map.remove(key) {
            None => Ok(None),
            Some(v) => {
                let x = as_f64(key, &v)?;
                if !x.is_finite() {
                    return Err(err(format!("{key} must be finite")));
                }
                self.record(key, x);
                Ok(Some(x))
            }
        }
    }

    fn f64(&mut self, key: &str, default: f64) -> Result<f64, ConfigError> {
        let x = self.opt_f64(key)?.unwrap_or(default);
        self.record(key, x);
        Ok(x)
    }

    fn positive(&mut self, key: &str, default: f64) -> Result<f64, ConfigError> {
        let x = self.f64(key, default)?;
        if !(x > 0.0) {
            return Err(err(format!("{key} must be positive, got {x}")));
        }
        Ok(x)
    }

    fn u64(&mut self, key: &str, default: u64) -> Result<u64, ConfigError> {
        let x = match self.map.remove(key) {
            None => default,
            Some(Value::Integer(i)) if i >= 0 => i as u64,
            Some(v) => return Err(err(format!("{key}: expected a non-negative integer, got {v}"))),
        };
        self.record(key, x);
        Ok(x)
    }

    fn usize(&mut self, key: &str, default: usize) -> Result<usize, ConfigError> {
        Ok(self.u64(key, default as u64)? as usize)
    }

    fn bool(&mut self, key: &str, default: bool) -> Result<bool, ConfigError> {
        let x = match self.map.remove(key) {
            None => default,
            Some(Value::Boolean(b)) => b,
            Some(v) => return Err(err(format!("{key}: expected true or false, got {v}"))),
        };
        self.record(key, x);
        Ok(x)
    }

    fn string(&mut self, key: &str, default: &str) -> Result<String, ConfigError> {
        let x = match self.map.remove(key) {
            None => default.to_string(),
            Some(Value::String(s)) => s,
            Some(v) => return Err(err(format!("{key}: expected a string, got {v}"))),
        };
        self.record(key, &x);
        Ok(x)
    }

    fn f64_list(&mut self, key: &str, default: &[f64]) -> Result<Vec<f64>, ConfigError> {
        let xs = match self.map.remove(key) {
            None => default.to_vec(),
            Some(Value::Array(a)) => a.iter().map(|v| as_f64(key, v)).collect::<Result<_, _>>()?,
            Some(v) => return Err(err(format!("{key}: expected an array of numbers, got {v}"))),
        };
        self.record(key, format!("{xs:?}"));
        Ok(xs)
    }

    fn pair_list(&mut self, key: &str, default: &[(f64, f64)]) -> Result<Vec<(f64, f64)>, ConfigError> {
        let xs = match self.map.remove(key) {
            None => default.to_vec(),
            Some(Value::Array(a)) => a
                .iter()
                .map(|v| match v {
                    Value::Array(p) if p.len() == 2 => Ok((as_f64(key, &p[0])?, as_f64(key, &p[1])?)),
                    _ => Err(err(format!("{key}: expected [a, b] pairs, got {v}"))),
                })
                .collect::<Result<_, _>>()?,
            Some(v) => return Err(err(format!("{key}: expected an array of pairs, got {v}"))),
        };
        self.record(key, format!("{xs:?}"));
        Ok(xs)
    }

    /// Every remaining key under `prefix.`, as `(suffix, number)`.
    fn numeric_children(&mut self, prefix: &str) -> Result<Vec<(String, f64)>, ConfigError> {
        let keys: Vec<String> = self.map.keys().filter(|k| k.starts_with(&format!("{prefix}."))).cloned().collect();
        let mut out = Vec::new();
        for k in keys {
            let v = self.opt_f64(&k)?.expect("key listed above");
            out.push((k[prefix.len() + 1..].to_string(), v));
        }
        Ok(out)
    }
}

impl RunConfig {
    /// The desk-scale run.
    pub fn desk() -> Self {
        Self::from_toml_str("", &Overrides::default()).expect("defaults are valid")
    }

    pub fn from_toml_str(text: &str, ov: &Overrides) -> Result<Self, ConfigError> {
        let table: toml::Table = text.parse().map_err(|e| err(format!("{e}")))?;
        let mut map = BTreeMap::new();
        flatten("", &table, &mut map);
        let mut r = Reader { map, canon: BTreeMap::new() };

        let n_eff = r.positive("field.n_eff", 24.0)?;
        let given = ["field.tesla", "field.gamma", "field.epsilon"].iter().filter(|k| r.has(k)).count();
        if given > 1 {
            return Err(err("give at most one of field.tesla, field.gamma, field.epsilon"));
        }
        let field = if r.has("field.tesla") {
            FieldConfig::from_tesla_and_n_eff(r.positive("field.tesla", 0.0)?, n_eff)
        } else if r.has("field.gamma") {
            match r.f64("field.gamma", 0.0)? {
                // field-free: there is no scaled energy, the classical stages will refuse to run
                0.0 => Ok(FieldConfig { b_tesla: 0.0, gamma: 0.0, epsilon: f64::NEG_INFINITY, e_au: energy_from_n_eff(n_eff), n_eff }),
                g => FieldConfig::from_gamma_and_n_eff(g, n_eff),
            }
        } else {
            FieldConfig::from_epsilon_and_n_eff(r.f64("field.epsilon", -0.3)?, n_eff)
        }
        .map_err(|e| err(e.to_string()))?;

        let window = if r.has("window.energy_lo_au") || r.has("window.energy_hi_au") {
            (r.f64("window.energy_lo_au", -1.0)?, r.f64("window.energy_hi_au", -1e-6)?)
        } else {
            let lo = r.positive("window.n_eff_lo", n_eff - 2.5)?;
            let hi = r.positive("window.n_eff_hi", n_eff + 2.5)?;
            (energy_from_n_eff(lo), energy_from_n_eff(hi))
        };
        if !(window.0 < window.1) {
            return Err(err(format!("empty energy window [{}, {}]", window.0, window.1)));
        }

        let n_max = r.usize("basis.n_max", 78)?;
        let b = r.positive("basis.b", n_eff.sqrt())?;
        let basis = BasisSpec::new(n_max, b).map_err(|e| err(e.to_string()))?;

        let grid = ProjectionGrid {
            order: r.usize("wavepacket.quad.order", 16)?,
            panels: r.usize("wavepacket.quad.panels", 3)?,
            r_extent: r.positive("wavepacket.quad.r_extent", 10.0)?,
            tol: r.positive("wavepacket.quad.tol", 1e-9)?,
            max_doublings: r.usize("wavepacket.quad.max_doublings", 4)?,
        };
        let wavepacket = WavepacketSpec {
            r0: r.positive("wavepacket.r0_au", 10.0)?,
            delta_r: r.positive("wavepacket.delta_r_au2", 4.0)?,
            bump_angles: r.f64_list("wavepacket.bump_angles_rad", &[0.0, 1.1])?,
            sigma_theta: r.positive("wavepacket.sigma_theta_rad", 0.2)?,
            window: StateWindow::Energy { lo: window.0, hi: window.1 },
            grid,
        };
        wavepacket.validate().map_err(|e| err(e.to_string()))?;

        let time = TimeGrid { t_max_ps: r.f64("time.t_max_ps", 4.0)?, samples: r.usize("time.samples", 4001)? };
        if !(time.t_max_ps > 0.0) || time.samples < 2 {
            return Err(err("time grid needs time.t_max_ps > 0 and time.samples >= 2"));
        }

        // default probe: the largest-angle bump maximum
        let th = wavepacket.bump_angles.iter().copied().fold(0.0, f64::max);
        let probes = r
            .pair_list("probes.rho_z_au", &[(wavepacket.r0 * th.sin(), wavepacket.r0 * th.cos())])?
            .into_iter()
            .map(|(rho, z)| ProbePoint::Cylindrical { rho, z })
            .collect();
        let probe_power = r.u64("probes.power", 2)? as u32;
        if probe_power != 2 && probe_power != 4 {
            return Err(err("probes.power must be 2 or 4"));
        }
        let orbit_label = r.string("probes.orbit_label", "C")?;
        let arc = r.f64("probes.orbit_arc_fraction", 0.25)?;
        if !(0.0..=1.0).contains(&arc) {
            return Err(err("probes.orbit_arc_fraction must lie in [0, 1]"));
        }
        let orbit_probe = (!orbit_label.is_empty()).then_some((orbit_label, arc));

        let apodization = match r.string("recurrence.apodization", "rectangular")?.as_str() {
            "rectangular" => Apodization::Rectangular,
            "hann" => Apodization::Hann,
            "gaussian" => Apodization::Gaussian { width: r.positive("recurrence.gaussian_width", 0.5)? },
            other => return Err(err(format!("recurrence.apodization: unknown kind {other:?}"))),
        };
        let peak_fraction = r.f64("recurrence.peak_fraction", 0.5)?;
        if !(peak_fraction > 0.0 && peak_fraction <= 1.0) {
            return Err(err("recurrence.peak_fraction must lie in (0, 1]"));
        }

        let mut labels = r.numeric_children("orbits.labels")?;
        if labels.is_empty() {
            labels = vec![("B".to_string(), 0.0), ("C".to_string(), 1.1)];
            for (k, v) in &labels {
                r.record(&format!("orbits.labels.{k}"), v);
            }
        }
        let orbits = OrbitSettings {
            r0_au: r.positive("orbits.r0_au", wavepacket.r0)?,
            t_max_scaled: r.positive("orbits.t_max_scaled", 25.0)?,
            theta_steps: r.usize("orbits.theta_steps", 64)?,
            labels,
            label_tol: r.positive("orbits.label_tol", 0.15)?,
        };

        let default_starts: Vec<(f64, f64)> = wavepacket.bump_angles.iter().rev().map(|a| (wavepacket.r0, *a)).collect();
        let trajectories = TrajectorySettings {
            starts: r.pair_list("trajectories.starts_polar", &default_starts)?,
            t_max_ps: r.positive("trajectories.t_max_ps", time.t_max_ps)?,
        };
        if trajectories.starts.iter().any(|(rr, th)| !(*rr >= 0.0) || !(0.0..=std::f64::consts::FRAC_PI_2).contains(th)) {
            return Err(err("trajectories.starts_polar must lie in the quadrant: r >= 0, 0 <= theta <= pi/2"));
        }

        let seed = r.u64("ensemble.seed", 1)?;
        let seed = ov.seed.unwrap_or(seed);
        r.record("ensemble.seed", seed);
        let ensemble = EnsembleSettings {
            n: r.usize("ensemble.n", 4000)?,
            seed,
            checkpoints: r.usize("ensemble.checkpoints", 8)?,
            t_max_ps: r.opt_f64("ensemble.t_max_ps")?,
            grid_cells: r.usize("ensemble.grid_cells", 24)?,
            bootstrap_reps: r.usize("ensemble.bootstrap_reps", 200)?,
            rtol: r.positive("ensemble.rtol", 1e-7)?,
            atol: r.positive("ensemble.atol", 1e-5)?,
        };
        if ensemble.n == 0 {
            return Err(err("ensemble.n must be at least 1"));
        }
        if ensemble.checkpoints == 0 || ensemble.grid_cells == 0 || ensemble.bootstrap_reps == 0 {
            return Err(err("ensemble.checkpoints, ensemble.grid_cells and ensemble.bootstrap_reps must be positive"));
        }

        let checks = CheckSettings {
            divergence_min_au: r.positive("checks.divergence_min_au", 1.0)?,
            c_max_diff: r.positive("checks.c_max_diff", 0.05)?,
        };

        // left out of the hash
        let hash_view = r.canon.clone();
        let output_dir = ov.out.clone().unwrap_or_else(|| PathBuf::from(r.string("output.dir", "out").unwrap_or_default()));
        let use_cache = r.bool("cache.enabled", true)?;
        let cache_dir = match (&ov.cache, r.map.remove("cache.dir")) {
            (Some(p), _) => Some(p.clone()),
            (None, Some(Value::String(s))) => Some(PathBuf::from(s)),
            (None, Some(v)) => return Err(err(format!("cache.dir: expected a string, got {v}"))),
            (None, None) => None,
        };
        r.map.remove("output.dir");

        if let Some(k) = r.map.keys().next() {
            return Err(err(format!("unknown key {k}")));
        }

        let mut h = Sha256::new();
        for (k, v) in &hash_view {
            h.update(format!("{k}={v}\n").as_bytes());
        }
        let hash = hex::encode(h.finalize())[..16].to_string();

        Ok(Self {
            field,
            window,
            basis,
            wavepacket,
            time,
            probes,
            probe_power,
            orbit_probe,
            apodization,
            peak_fraction,
            orbits,
            trajectories,
            ensemble,
            checks,
            output_dir,
            cache_dir,
            use_cache,
            hash,
        })
    }

    /// Where the spectrum cache lives: `--cache`, then `cache.dir`, then `<out>/cache`.
    pub fn cache_path(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.output_dir.join("cache"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_defaults() {
        let c = RunConfig::desk();
        assert!((c.field.epsilon + 0.3).abs() < 1e-12);
        assert_eq!(c.basis.n_max, 78);
        assert_eq!(c.basis.dimension(), 820);
        assert_eq!(c.ensemble.n, 4000);
        assert_eq!(c.trajectories.starts, vec![(10.0, 1.1), (10.0, 0.0)]);
        assert_eq!(c.hash.len(), 16);
    }

    #[test]
    fn spelled_out_defaults_keep_the_hash() {
        let a = RunConfig::desk();
        let b = RunConfig::from_toml_str("field.epsilon = -0.3\nbasis.n_max = 78\noutput.dir = \"elsewhere\"", &Overrides::default()).unwrap();
        assert_eq!(a.hash, b.hash);
        let c = RunConfig::from_toml_str("basis.n_max = 80", &Overrides::default()).unwrap();
        assert_ne!(a.hash, c.hash);
        let d = RunConfig::from_toml_str("", &Overrides { seed: Some(9), ..Default::default() }).unwrap();
        assert_ne!(a.hash, d.hash);
        assert_eq!(d.ensemble.seed, 9);
    }

    #[test]
    fn nested_tables_equal_dotted_keys() {
        let a = RunConfig::from_toml_str("[field]\ntesla = 3.0\nn_eff = 55", &Overrides::default()).unwrap();
        let b = RunConfig::from_toml_str("field.tesla = 3.0\nfield.n_eff = 55.0", &Overrides::default()).unwrap();
        assert_eq!(a.hash, b.hash);
        assert!((a.field.epsilon + 0.3).abs() < 0.01);
    }

    #[test]
    fn rejects_bad_input() {
        let bad = [
            "field.tesla = 3.0\nfield.gamma = 1e-5",
            "basis.n_max = \"many\"",
            "nonsense.key = 1",
            "ensemble.n = 0",
            "time.samples = 0",
            "recurrence.apodization = \"triangle\"",
            "window.n_eff_lo = 30\nwindow.n_eff_hi = 20",
            "field.tesla = -1",
            "this is not toml",
        ];
        for text in bad {
            assert!(RunConfig::from_toml_str(text, &Overrides::default()).is_err(), "{text}");
        }
    }

    #[test]
    fn custom_orbit_labels() {
        let c = RunConfig::from_toml_str("orbits.labels.X = 0.5\norbits.labels.Y = 1.2", &Overrides::default()).unwrap();
        assert_eq!(c.orbits.labels, vec![("X".to_string(), 0.5), ("Y".to_string(), 1.2)]);
    }
}
