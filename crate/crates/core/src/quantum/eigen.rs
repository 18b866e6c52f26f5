//! Generalized symmetric eigensolver for `A x = E S x` with `S` positive definite.
//!
//! Windows are solved by shift-invert Lanczos in the `S` inner product with
//! full reorthogonalization. Converged vectors are locked and the iteration
//! restarted, which also resolves degenerate levels. The number of
//! eigenvalues in a window is known beforehand from the inertia of
//! `A - sigma S`, so the solver knows when it is done. Small problems go
//! through a dense Cholesky reduction instead.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::sparse::{BandLdl, SymmetricCsr};
use crate::error::{invalid, Error, Result};

/// What part of the spectrum to compute.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolveTarget {
    /// All eigenvalues in `[lo, hi)`, hartree.
    Window { lo: f64, hi: f64 },
    /// The lowest `n` eigenvalues.
    Lowest(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub seed: u64,
    /// Dimensions below this use the dense solver.
    pub dense_below: usize,
    /// Relative Ritz residual accepted for locking.
    pub ritz_tol: f64,
    /// Maximum restarts per window before splitting it.
    pub max_restarts: usize,
    pub max_depth: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { seed: 0x5eed, dense_below: 500, ritz_tol: 1e-11, max_restarts: 40, max_depth: 8 }
    }
}

/// Eigenpairs sorted by energy; vectors are `S`-orthonormal.
#[derive(Debug, Clone, Default)]
pub struct Eigenpairs {
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
}

/// Lower bound on the spectrum of the regularized Coulomb pencil: no level lies below the
/// field-free ground state.
pub const SPECTRUM_FLOOR: f64 = -0.6;

pub fn solve(a: &SymmetricCsr, s: &SymmetricCsr, target: SolveTarget, opts: &SolverOptions) -> Result<Eigenpairs> {
    if a.dim != s.dim {
        return Err(invalid("operator dimensions differ"));
    }
    if let SolveTarget::Window { lo, hi } = target {
        if !(lo < hi) {
            return Err(invalid(format!("empty energy window [{lo}, {hi})")));
        }
        if lo >= 0.0 {
            return Ok(Eigenpairs::default());
        }
    }
    if a.dim < opts.dense_below {
        dense(a, s, target)
    } else {
        sparse(a, s, target, opts)
    }
}

/// Dense reference: Cholesky of `S`, symmetric eigendecomposition of `L^-1 A L^-T`.
pub fn dense(a: &SymmetricCsr, s: &SymmetricCsr, target: SolveTarget) -> Result<Eigenpairs> {
    let n = a.dim;
    let chol = s
        .to_dense()
        .cholesky()
        .ok_or_else(|| invalid("overlap operator is not positive definite"))?;
    let l = chol.l();
    let mut c = a.to_dense();
    // C = L^-1 A L^-T
    l.solve_lower_triangular_mut(&mut c);
    let mut ct = c.transpose();
    l.solve_lower_triangular_mut(&mut ct);
    let c = (&ct + ct.transpose()) * 0.5;
    let eig = SymmetricEigen::new(c);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let keep: Vec<usize> = match target {
        SolveTarget::Window { lo, hi } => {
            let hi = hi.min(0.0);
            order.into_iter().filter(|&i| eig.eigenvalues[i] >= lo && eig.eigenvalues[i] < hi).collect()
        }
        SolveTarget::Lowest(k) => order.into_iter().take(k).collect(),
    };
    let lt = l.transpose();
    let mut out = Eigenpairs::default();
    for i in keep {
        let y = eig.eigenvectors.column(i).into_owned();
        let x = lt
            .solve_upper_triangular(&y)
            .ok_or_else(|| invalid("singular Cholesky factor"))?;
        out.values.push(eig.eigenvalues[i]);
        out.vectors.push(x.as_slice().to_vec());
    }
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += alpha * xi);
}

/// Factor `A - x S`, nudging the shift if a pivot vanishes.
fn factor_near(a: &SymmetricCsr, s: &SymmetricCsr, x: f64) -> Result<BandLdl> {
    let mut last = None;
    for k in 0..6 {
        let nudge = if k == 0 { 0.0 } else { (k as f64) * 1e-9 * x.abs().max(1e-6) };
        match BandLdl::factor(a, s, x + nudge) {
            Ok(f) => return Ok(f),
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap())
}

/// Number of eigenvalues below `x`.
pub fn count_below(a: &SymmetricCsr, s: &SymmetricCsr, x: f64) -> Result<usize> {
    Ok(factor_near(a, s, x)?.negative_count())
}

struct Locked {
    values: Vec<f64>,
    x: Vec<Vec<f64>>,
    sx: Vec<Vec<f64>>,
}

impl Locked {
    /// Remove the `S`-components along locked vectors, given `S v` and `v` together.
    fn project_out(&self, v: &mut [f64]) {
        for (x, sx) in self.x.iter().zip(&self.sx) {
            let c = dot(sx, v);
            axpy(-c, x, v);
        }
    }

    fn in_window(&self, lo: f64, hi: f64) -> usize {
        self.values.iter().filter(|v| **v >= lo && **v < hi).count()
    }
}

fn sparse(a: &SymmetricCsr, s: &SymmetricCsr, target: SolveTarget, opts: &SolverOptions) -> Result<Eigenpairs> {
    let (lo, hi, take) = match target {
        SolveTarget::Window { lo, hi } => (lo, hi.min(0.0), None),
        SolveTarget::Lowest(k) => {
            if k == 0 {
                return Ok(Eigenpairs::default());
            }
            (SPECTRUM_FLOOR, upper_for_count(a, s, k)?, Some(k))
        }
    };
    let n_lo = count_below(a, s, lo)?;
    let n_hi = count_below(a, s, hi)?;
    let mut locked = Locked { values: Vec::new(), x: Vec::new(), sx: Vec::new() };
    if n_hi > n_lo {
        solve_interval(a, s, lo, hi, n_hi - n_lo, 0, opts, &mut locked)?;
    }
    let mut pairs = rayleigh_ritz(a, &locked)?;
    if let Some(k) = take {
        pairs.values.truncate(k);
        pairs.vectors.truncate(k);
    }
    Ok(pairs)
}

/// Smallest shift with at least `k` eigenvalues below it (to bisection accuracy).
fn upper_for_count(a: &SymmetricCsr, s: &SymmetricCsr, k: usize) -> Result<f64> {
    if k > a.dim {
        return Err(invalid(format!("asked for {k} eigenvalues of a {}-dimensional problem", a.dim)));
    }
    let mut lo = SPECTRUM_FLOOR;
    let mut hi = 0.0f64;
    let mut step = 1.0;
    while count_below(a, s, hi)? < k {
        lo = hi;
        hi += step;
        step *= 2.0;
        if step > 1e15 {
            return Err(invalid("could not bracket the requested eigenvalues"));
        }
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if count_below(a, s, mid)? >= k {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    // step just past the k-th eigenvalue
    Ok(hi + 1e-12 * hi.abs().max(1e-6))
}

#[allow(clippy::too_many_arguments)]
fn solve_interval(
    a: &SymmetricCsr,
    s: &SymmetricCsr,
    lo: f64,
    hi: f64,
    wanted: usize,
    depth: usize,
    opts: &SolverOptions,
    locked: &mut Locked,
) -> Result<()> {
    let sigma = 0.5 * (lo + hi);
    let f = factor_near(a, s, sigma)?;
    let mut total_steps = 0;
    for restart in 0..opts.max_restarts {
        let have = locked.in_window(lo, hi);
        if have >= wanted {
            return Ok(());
        }
        let seed = opts.seed ^ ((depth as u64) << 32) ^ (restart as u64) ^ sigma.to_bits();
        let (found, steps) = lanczos_run(a, s, &f, lo, hi, wanted - have, seed, opts, locked);
        total_steps += steps;
        if found == 0 {
            break;
        }
    }
    let have = locked.in_window(lo, hi);
    if have >= wanted {
        return Ok(());
    }
    if depth >= opts.max_depth {
        return Err(Error::NonConvergence { lo, hi, iterations: total_steps, converged: have, wanted });
    }
    let mid = 0.5 * (lo + hi);
    let n_lo = count_below(a, s, lo)?;
    let n_mid = count_below(a, s, mid)?;
    let n_hi = count_below(a, s, hi)?;
    if n_mid > n_lo {
        solve_interval(a, s, lo, mid, n_mid - n_lo, depth + 1, opts, locked)?;
    }
    if n_hi > n_mid {
        solve_interval(a, s, mid, hi, n_hi - n_mid, depth + 1, opts, locked)?;
    }
    Ok(())
}

/// One Lanczos sweep; locks converged Ritz pairs in `[lo, hi)` and returns how many.
#[allow(clippy::too_many_arguments)]
fn lanczos_run(
    a: &SymmetricCsr,
    s: &SymmetricCsr,
    f: &BandLdl,
    lo: f64,
    hi: f64,
    missing: usize,
    seed: u64,
    opts: &SolverOptions,
    locked: &mut Locked,
) -> (usize, usize) {
    let n = a.dim;
    let avail = n - locked.x.len();
    let m_max = avail.min(4 * missing + 80);
    if m_max == 0 {
        return (0, 0);
    }
    let sigma = f.shift;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    locked.project_out_twice(&mut v);
    let nrm = s_norm(s, &v);
    v.iter_mut().for_each(|x| *x /= nrm);

    let mut q: Vec<Vec<f64>> = Vec::with_capacity(m_max);
    let mut sq: Vec<Vec<f64>> = Vec::with_capacity(m_max);
    let mut alpha = Vec::with_capacity(m_max);
    let mut beta: Vec<f64> = Vec::with_capacity(m_max);
    let mut ritz: Option<(Vec<f64>, DMatrix<f64>, f64)> = None;

    for j in 0..m_max {
        let svj = s.apply(&v);
        let mut w = f.solve_refined(a, s, &svj, 1);
        q.push(v);
        sq.push(svj);
        let aj = dot(&sq[j], &w);
        alpha.push(aj);
        axpy(-aj, &q[j], &mut w);
        if j > 0 {
            axpy(-beta[j - 1], &q[j - 1], &mut w);
        }
        for _ in 0..2 {
            locked.project_out(&mut w);
            for i in 0..=j {
                let c = dot(&sq[i], &w);
                axpy(-c, &q[i], &mut w);
            }
        }
        let bj = s_norm(s, &w);
        beta.push(bj);
        let breakdown = !(bj > 1e-13 * aj.abs().max(1e-300));
        let last = j + 1 == m_max || breakdown;
        if last || (j + 1) % 8 == 0 {
            let (theta, vecs) = tridiagonal_eigen(&alpha, &beta[..j]);
            let converged = converged_in_window(&theta, &vecs, bj, sigma, lo, hi, opts.ritz_tol);
            let done = converged.len() >= missing;
            ritz = Some((theta, vecs, bj));
            if done || last {
                break;
            }
        }
        v = w.iter().map(|x| x / bj).collect();
    }

    let Some((theta, vecs, bj)) = ritz else { return (0, q.len()) };
    let mut found = 0;
    for i in converged_in_window(&theta, &vecs, bj, sigma, lo, hi, opts.ritz_tol) {
        let mut y = vec![0.0; n];
        for (k, qk) in q.iter().enumerate() {
            axpy(vecs[(k, i)], qk, &mut y);
        }
        // a Ritz vector that mostly duplicates a locked one is a ghost
        locked.project_out_twice(&mut y);
        let nrm = s_norm(s, &y);
        if nrm < 0.5 {
            continue;
        }
        y.iter_mut().for_each(|x| *x /= nrm);
        let sy = s.apply(&y);
        locked.values.push(sigma + 1.0 / theta[i]);
        locked.x.push(y);
        locked.sx.push(sy);
        found += 1;
    }
    (found, q.len())
}

impl Locked {
    fn project_out_twice(&self, v: &mut [f64]) {
        for _ in 0..2 {
            self.project_out(v);
        }
    }
}

fn s_norm(s: &SymmetricCsr, v: &[f64]) -> f64 {
    dot(v, &s.apply(v)).max(0.0).sqrt()
}

fn tridiagonal_eigen(alpha: &[f64], beta: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    let m = alpha.len();
    let mut t = DMatrix::zeros(m, m);
    for i in 0..m {
        t[(i, i)] = alpha[i];
        if i + 1 < m {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    let e = SymmetricEigen::new(t);
    (e.eigenvalues.as_slice().to_vec(), e.eigenvectors)
}

fn converged_in_window(
    theta: &[f64],
    vecs: &DMatrix<f64>,
    beta_last: f64,
    sigma: f64,
    lo: f64,
    hi: f64,
    tol: f64,
) -> Vec<usize> {
    let m = theta.len();
    (0..m)
        .filter(|&i| {
            let lam = sigma + 1.0 / theta[i];
            let est = (beta_last * vecs[(m - 1, i)]).abs();
            theta[i] != 0.0 && lam >= lo && lam < hi && est <= tol * theta[i].abs()
        })
        .collect()
}

/// Projected dense solve over the locked subspace; returns sorted, `S`-orthonormal pairs.
fn rayleigh_ritz(a: &SymmetricCsr, locked: &Locked) -> Result<Eigenpairs> {
    let p = locked.x.len();
    if p == 0 {
        return Ok(Eigenpairs::default());
    }
    let n = a.dim;
    let ax: Vec<Vec<f64>> = locked.x.iter().map(|x| a.apply(x)).collect();
    let mut ap = DMatrix::zeros(p, p);
    let mut sp = DMatrix::zeros(p, p);
    for i in 0..p {
        for j in 0..=i {
            let av = 0.5 * (dot(&locked.x[i], &ax[j]) + dot(&locked.x[j], &ax[i]));
            let sv = 0.5 * (dot(&locked.x[i], &locked.sx[j]) + dot(&locked.x[j], &locked.sx[i]));
            ap[(i, j)] = av;
            ap[(j, i)] = av;
            sp[(i, j)] = sv;
            sp[(j, i)] = sv;
        }
    }
    let chol = sp.cholesky().ok_or_else(|| invalid("locked vectors are linearly dependent"))?;
    let l = chol.l();
    let mut c = ap;
    l.solve_lower_triangular_mut(&mut c);
    let mut ct = c.transpose();
    l.solve_lower_triangular_mut(&mut ct);
    let c = (&ct + ct.transpose()) * 0.5;
    let eig = SymmetricEigen::new(c);
    let lt = l.transpose();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let mut out = Eigenpairs::default();
    for i in order {
        let y: DVector<f64> = lt
            .solve_upper_triangular(&eig.eigenvectors.column(i).into_owned())
            .ok_or_else(|| invalid("singular projected overlap"))?;
        let mut x = vec![0.0; n];
        for (k, xk) in locked.x.iter().enumerate() {
            axpy(y[k], xk, &mut x);
        }
        out.values.push(eig.eigenvalues[i]);
        out.vectors.push(x);
    }
    Ok(out)
}

/// `||A x - E S x|| / ||x||` for one pair.
pub fn residual(a: &SymmetricCsr, s: &SymmetricCsr, e: f64, x: &[f64]) -> f64 {
    let ax = a.apply(x);
    let sx = s.apply(x);
    let r: f64 = ax.iter().zip(&sx).map(|(p, q)| (p - e * q).powi(2)).sum::<f64>().sqrt();
    r / dot(x, x).sqrt()
}
