//! Eigenstates of hydrogen in a magnetic field, `L_z = 0`, even z-parity.
//!
//! In semiparabolic coordinates `mu^2 = r + z`, `nu^2 = r - z` the
//! Schroedinger equation becomes the generalized problem
//!
//! ```text
//! [ -1/2 (D_mu + D_nu) + gamma^2/8 mu^2 nu^2 (mu^2 + nu^2) - 2 ] psi = E (mu^2 + nu^2) psi
//! ```
//!
//! with `D` the two-dimensional radial Laplacian of each coordinate.
//! It is expanded over products of oscillator functions, symmetrized under
//! `mu <-> nu` (reflection `z -> -z`).

pub mod basis;
pub mod cache;
pub mod eigen;
pub mod sparse;

use std::f64::consts::PI;

use basis::{eval_radial, radial_laplacian_factor, RadialMatrices, RadialValues};
pub use eigen::{SolveTarget, SolverOptions};
pub use sparse::SymmetricCsr;

use crate::error::{invalid, Result};

/// Parity sector of the basis. Only reflection-even states are implemented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sector {
    EvenEven,
}

/// Oscillator basis: `N_mu, N_nu` even and `<= n_max`, oscillator length `b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisSpec {
    pub n_max: usize,
    pub b: f64,
    pub sector: Sector,
}

impl BasisSpec {
    pub fn new(n_max: usize, b: f64) -> Result<Self> {
        let spec = Self { n_max, b, sector: Sector::EvenEven };
        spec.validate()?;
        Ok(spec)
    }

    /// `b` matched to a target effective quantum number (`b^2 = n_eff`).
    pub fn for_n_eff(n_max: usize, n_eff: f64) -> Result<Self> {
        Self::new(n_max, n_eff.sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_max < 2 {
            return Err(invalid(format!("n_max must be at least 2, got {}", self.n_max)));
        }
        if !(self.b > 0.0) || !self.b.is_finite() {
            return Err(invalid(format!("oscillator length must be positive, got {}", self.b)));
        }
        Ok(())
    }

    /// Functions per coordinate (even oscillator numbers up to `n_max`).
    pub fn per_coordinate(&self) -> usize {
        self.n_max / 2 + 1
    }

    /// Size of the reflection-symmetrized product basis, `K (K + 1) / 2`.
    pub fn dimension(&self) -> usize {
        let k = self.per_coordinate();
        k * (k + 1) / 2
    }

    /// Index pairs `(a, b)`, `a <= b`, ordered by `a + b` then `a`.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let k = self.per_coordinate();
        let mut out = Vec::with_capacity(self.dimension());
        for s in 0..=2 * (k - 1) {
            for a in s.saturating_sub(k - 1)..=s / 2 {
                out.push((a, s - a));
            }
        }
        out
    }

    fn index_table(&self) -> Vec<usize> {
        let k = self.per_coordinate();
        let mut t = vec![usize::MAX; k * k];
        for (i, (a, b)) in self.pairs().into_iter().enumerate() {
            t[a * k + b] = i;
            t[b * k + a] = i;
        }
        t
    }
}

/// `(A, S)` of the generalized problem over the symmetrized basis.
pub fn assemble_operators(basis: &BasisSpec, gamma: f64) -> Result<(SymmetricCsr, SymmetricCsr)> {
    basis.validate()?;
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(invalid(format!("field gamma must be non-negative, got {gamma}")));
    }
    let k = basis.per_coordinate();
    let m = RadialMatrices::new(k, basis.b);
    let pairs = basis.pairs();
    let index = basis.index_table();
    let dia = gamma * gamma / 8.0;
    let delta = |i: usize, j: usize| if i == j { 1.0 } else { 0.0 };

    let mut rows_a = Vec::with_capacity(pairs.len());
    let mut rows_s = Vec::with_capacity(pairs.len());
    for &(a, b) in &pairs {
        let mut ra = Vec::new();
        let mut rs = Vec::new();
        let sym_ab = 1.0 + delta(a, b);
        for c in a.saturating_sub(2)..(a + 3).min(k) {
            for d in b.saturating_sub(2)..(b + 3).min(k) {
                let mut oa = m.kin(a, c) * delta(b, d) + delta(a, c) * m.kin(b, d) - 2.0 * delta(a, c) * delta(b, d);
                if dia != 0.0 {
                    oa += dia * (m.m4(a, c) * m.m2(b, d) + m.m2(a, c) * m.m4(b, d));
                }
                let os = m.m2(a, c) * delta(b, d) + delta(a, c) * m.m2(b, d);
                if oa == 0.0 && os == 0.0 {
                    continue;
                }
                // (c, d) and (d, c) both map onto the symmetrized column {c, d}
                let twice = if c == d { 2.0 } else { 1.0 };
                let scale = twice / (sym_ab * (1.0 + delta(c, d))).sqrt();
                let col = index[c * k + d];
                ra.push((col, oa * scale));
                rs.push((col, os * scale));
            }
        }
        rows_a.push(ra);
        rows_s.push(rs);
    }
    Ok((SymmetricCsr::from_rows(rows_a), SymmetricCsr::from_rows(rows_s)))
}

/// Converged eigenpairs for one field and basis. Vectors are `S`-orthonormal.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub gamma: f64,
    pub basis: BasisSpec,
    pub target: SolveTarget,
    pub energies: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.energies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energies.is_empty()
    }

    pub fn n_eff(&self) -> Vec<f64> {
        self.energies.iter().map(|e| crate::units::n_eff_from_energy(*e).unwrap_or(f64::NAN)).collect()
    }

    /// Restrict to the given state indices (in order).
    pub fn select(&self, indices: &[usize]) -> Result<Spectrum> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(invalid(format!("state {bad} out of range ({} states)", self.len())));
        }
        Ok(Spectrum {
            gamma: self.gamma,
            basis: self.basis,
            target: self.target,
            energies: indices.iter().map(|&i| self.energies[i]).collect(),
            vectors: indices.iter().map(|&i| self.vectors[i].clone()).collect(),
        })
    }

    /// Evaluator for every state of the spectrum.
    pub fn evaluator(&self) -> EigenfunctionSet {
        EigenfunctionSet::new(self)
    }

    /// Value and gradient of state `k` at `(rho, z)`, normalized to one over all space.
    pub fn eigenfunction_value(&self, k: usize, rho: f64, z: f64) -> Result<StateSample> {
        if k >= self.len() {
            return Err(invalid(format!("state {k} out of range ({} states)", self.len())));
        }
        let set = EigenfunctionSet::new(&self.select(&[k])?);
        let mut out = [StateSample::default()];
        set.eval(rho, z, &mut out)?;
        Ok(out[0])
    }
}

/// Solve the eigenproblem for `target` at field `gamma`.
pub fn solve_window(basis: &BasisSpec, gamma: f64, target: SolveTarget, opts: &SolverOptions) -> Result<Spectrum> {
    let (a, s) = assemble_operators(basis, gamma)?;
    let pairs = eigen::solve(&a, &s, target, opts)?;
    Ok(Spectrum { gamma, basis: *basis, target, energies: pairs.values, vectors: pairs.vectors })
}

/// Stable map `(rho, z) -> (mu, nu)` with `mu, nu >= 0`.
pub fn to_semiparabolic(rho: f64, z: f64) -> (f64, f64) {
    let rho = rho.abs();
    let r = rho.hypot(z);
    if r == 0.0 {
        return (0.0, 0.0);
    }
    if z >= 0.0 {
        let mu2 = r + z;
        (mu2.sqrt(), rho / mu2.sqrt())
    } else {
        let nu2 = r - z;
        (rho / nu2.sqrt(), nu2.sqrt())
    }
}

/// One state's value, gradient in `(rho, z)` and optionally its Laplacian.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StateSample {
    pub value: f64,
    pub d_rho: f64,
    pub d_z: f64,
    pub laplacian: f64,
}

/// Per-point values of the one-coordinate functions, reusable across states.
#[derive(Debug, Clone)]
pub struct PointBasis {
    pub mu: f64,
    pub nu: f64,
    pub u: RadialValues,
    pub v: RadialValues,
}

impl PointBasis {
    pub fn new(k: usize) -> Self {
        Self { mu: 0.0, nu: 0.0, u: RadialValues::with_len(k), v: RadialValues::with_len(k) }
    }

    pub fn at(&mut self, b: f64, rho: f64, z: f64) {
        let (mu, nu) = to_semiparabolic(rho, z);
        self.mu = mu;
        self.nu = nu;
        eval_radial(mu, b, &mut self.u);
        eval_radial(nu, b, &mut self.v);
    }
}

/// Chain rule through the coordinate map; zero at the origin where both vanish by parity.
#[inline]
pub fn gradient_from_semiparabolic(mu: f64, nu: f64, d_mu: f64, d_nu: f64) -> (f64, f64) {
    let s = mu * mu + nu * nu;
    if s == 0.0 {
        return (0.0, 0.0);
    }
    ((nu * d_mu + mu * d_nu) / s, (mu * d_mu - nu * d_nu) / s)
}

/// Dense `K x K` coefficient matrices of a set of states, ready for point evaluation.
#[derive(Debug, Clone)]
pub struct EigenfunctionSet {
    pub k: usize,
    pub b: f64,
    pub states: usize,
    /// State-major `K x K` blocks, already scaled to unit norm over 3D space.
    coeffs: Vec<f64>,
}

impl EigenfunctionSet {
    pub fn new(spectrum: &Spectrum) -> Self {
        let k = spectrum.basis.per_coordinate();
        let pairs = spectrum.basis.pairs();
        let norm = 1.0 / (2.0 * PI).sqrt();
        let mut coeffs = vec![0.0; spectrum.len() * k * k];
        for (st, x) in spectrum.vectors.iter().enumerate() {
            let block = &mut coeffs[st * k * k..(st + 1) * k * k];
            for (&(a, b), &c) in pairs.iter().zip(x) {
                if a == b {
                    block[a * k + a] = c * norm;
                } else {
                    let v = c * norm * std::f64::consts::FRAC_1_SQRT_2;
                    block[a * k + b] = v;
                    block[b * k + a] = v;
                }
            }
        }
        Self { k, b: spectrum.basis.b, states: spectrum.len(), coeffs }
    }

    pub fn point_basis(&self) -> PointBasis {
        PointBasis::new(self.k)
    }

    /// Values and gradients of all states at `(rho, z)`.
    pub fn eval(&self, rho: f64, z: f64, out: &mut [StateSample]) -> Result<()> {
        let mut pb = self.point_basis();
        pb.at(self.b, rho, z);
        self.eval_at(&pb, out, false);
        Ok(())
    }

    /// Values, gradients and Laplacians of all states at `(rho, z)`.
    pub fn eval_with_laplacian(&self, rho: f64, z: f64, out: &mut [StateSample]) -> Result<()> {
        let mut pb = self.point_basis();
        pb.at(self.b, rho, z);
        self.eval_at(&pb, out, true);
        Ok(())
    }

    /// Evaluate on precomputed one-coordinate values.
    pub fn eval_at(&self, pb: &PointBasis, out: &mut [StateSample], laplacian: bool) {
        let k = self.k;
        let (u, du) = (&pb.u.value, &pb.u.deriv);
        let (v, dv) = (&pb.v.value, &pb.v.deriv);
        let fu: Vec<f64> = if laplacian { (0..k).map(|a| radial_laplacian_factor(pb.mu, self.b, a) * u[a]).collect() } else { Vec::new() };
        let fv: Vec<f64> = if laplacian { (0..k).map(|a| radial_laplacian_factor(pb.nu, self.b, a) * v[a]).collect() } else { Vec::new() };
        let s = pb.mu * pb.mu + pb.nu * pb.nu;
        // contract over the mu index first as row updates, which vectorize
        let mut w = vec![0.0; k];
        let mut dw = vec![0.0; k];
        let mut fw = vec![0.0; if laplacian { k } else { 0 }];
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
        for (st, o) in out.iter_mut().enumerate().take(self.states) {
            let block = &self.coeffs[st * k * k..(st + 1) * k * k];
            w.iter_mut().for_each(|x| *x = 0.0);
            dw.iter_mut().for_each(|x| *x = 0.0);
            fw.iter_mut().for_each(|x| *x = 0.0);
            for a in 0..k {
                let row = &block[a * k..(a + 1) * k];
                let (ua, dua) = (u[a], du[a]);
                for ((x, dx), r) in w.iter_mut().zip(dw.iter_mut()).zip(row) {
                    *x += ua * r;
                    *dx += dua * r;
                }
                if laplacian {
                    let fa = fu[a];
                    fw.iter_mut().zip(row).for_each(|(x, r)| *x += fa * r);
                }
            }
            let val = dot(&w, v);
            let dmu = dot(&dw, v);
            let dnu = dot(&w, dv);
            let (lmu, lnu) = if laplacian { (dot(&fw, v), dot(&w, &fv)) } else { (0.0, 0.0) };
            let (d_rho, d_z) = gradient_from_semiparabolic(pb.mu, pb.nu, dmu, dnu);
            let lap = if !laplacian {
                0.0
            } else if s > 0.0 {
                (lmu + lnu) / s
            } else {
                // limit at the origin: the numerator vanishes linearly in s
                f64::NAN
            };
            *o = StateSample { value: val, d_rho, d_z, laplacian: lap };
        }
    }
}
