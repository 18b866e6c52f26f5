//! Symmetric sparse operators and a banded LDL^T factorization for shifts.

use crate::error::{Error, Result};

/// Symmetric matrix stored in full CSR form (both triangles present).
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricCsr {
    pub dim: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
    /// Largest `|i - j|` over stored entries.
    pub half_bandwidth: usize,
}

impl SymmetricCsr {
    /// Build from per-row `(col, value)` lists; duplicates are summed and zeros dropped.
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let dim = rows.len();
        let mut row_ptr = Vec::with_capacity(dim + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        let mut half_bandwidth = 0;
        row_ptr.push(0);
        for (i, mut row) in rows.into_iter().enumerate() {
            row.sort_by_key(|e| e.0);
            let mut k = 0;
            while k < row.len() {
                let c = row[k].0;
                let mut v = 0.0;
                while k < row.len() && row[k].0 == c {
                    v += row[k].1;
                    k += 1;
                }
                if v != 0.0 {
                    cols.push(c);
                    vals.push(v);
                    half_bandwidth = half_bandwidth.max(i.abs_diff(c));
                }
            }
            row_ptr.push(cols.len());
        }
        Self { dim, row_ptr, cols, vals, half_bandwidth }
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
        match self.cols[s..e].binary_search(&j) {
            Ok(k) => self.vals[s + k],
            Err(_) => 0.0,
        }
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.cols[s..e].iter().copied().zip(self.vals[s..e].iter().copied())
    }

    /// `out = self * x`
    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.row(i).map(|(j, v)| v * x[j]).sum();
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.mul_vec(x, &mut out);
        out
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (0..self.dim).all(|i| self.row(i).all(|(j, v)| (v - self.get(j, i)).abs() <= tol * v.abs().max(1.0)))
    }

    /// Largest absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.dim).map(|i| self.row(i).map(|(_, v)| v.abs()).sum::<f64>()).fold(0.0, f64::max)
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.dim, self.dim);
        for i in 0..self.dim {
            for (j, v) in self.row(i) {
                m[(i, j)] = v;
            }
        }
        m
    }
}

/// `A - shift * S` factored as `L D L^T` in band storage, no pivoting.
#[derive(Debug, Clone)]
pub struct BandLdl {
    n: usize,
    w: usize,
    /// Row `i` holds `L[i][i-w..i]` at offsets `0..w`.
    lower: Vec<f64>,
    diag: Vec<f64>,
    pub shift: f64,
}

impl BandLdl {
    pub fn factor(a: &SymmetricCsr, s: &SymmetricCsr, shift: f64) -> Result<Self> {
        let n = a.dim;
        let w = a.half_bandwidth.max(s.half_bandwidth);
        let mut lower = vec![0.0; n * w];
        let mut diag = vec![0.0; n];
        let scale = a.norm_inf() + shift.abs() * s.norm_inf();
        let tiny = 1e-14 * scale.max(f64::MIN_POSITIVE);
        // dense band of the shifted matrix, row by row
        let mut row = vec![0.0; w + 1];
        for i in 0..n {
            row.iter_mut().for_each(|x| *x = 0.0);
            for (j, v) in a.row(i) {
                if j <= i && i - j <= w {
                    row[w - (i - j)] += v;
                }
            }
            for (j, v) in s.row(i) {
                if j <= i && i - j <= w {
                    row[w - (i - j)] -= shift * v;
                }
            }
            let j0 = i.saturating_sub(w);
            for j in j0..i {
                // L_ij D_j = a_ij - sum_k L_ik D_k L_jk
                let k0 = j0.max(j.saturating_sub(w));
                let mut acc = row[w - (i - j)];
                for k in k0..j {
                    acc -= lower[i * w + w - (i - k)] * diag[k] * lower[j * w + w - (j - k)];
                }
                lower[i * w + w - (i - j)] = acc / diag[j];
            }
            let mut d = row[w];
            for k in j0..i {
                let l = lower[i * w + w - (i - k)];
                d -= l * l * diag[k];
            }
            if !(d.abs() > tiny) || !d.is_finite() {
                return Err(Error::Factorization { row: i, shift });
            }
            diag[i] = d;
        }
        Ok(Self { n, w, lower, diag, shift })
    }

    /// Number of negative pivots, equal to the number of eigenvalues below the shift.
    pub fn negative_count(&self) -> usize {
        self.diag.iter().filter(|d| **d < 0.0).count()
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        let (n, w) = (self.n, self.w);
        for i in 0..n {
            let j0 = i.saturating_sub(w);
            let mut acc = x[i];
            for j in j0..i {
                acc -= self.lower[i * w + w - (i - j)] * x[j];
            }
            x[i] = acc;
        }
        for i in 0..n {
            x[i] /= self.diag[i];
        }
        for i in (0..n).rev() {
            let xi = x[i];
            let j0 = i.saturating_sub(w);
            for j in j0..i {
                x[j] -= self.lower[i * w + w - (i - j)] * xi;
            }
        }
    }

    /// Solve `(A - shift S) x = rhs` with `steps` rounds of iterative refinement.
    pub fn solve_refined(&self, a: &SymmetricCsr, s: &SymmetricCsr, rhs: &[f64], steps: usize) -> Vec<f64> {
        let mut x = rhs.to_vec();
        self.solve_in_place(&mut x);
        let mut ax = vec![0.0; self.n];
        let mut sx = vec![0.0; self.n];
        for _ in 0..steps {
            a.mul_vec(&x, &mut ax);
            s.mul_vec(&x, &mut sx);
            let mut r: Vec<f64> = (0..self.n).map(|i| rhs[i] - ax[i] + self.shift * sx[i]).collect();
            self.solve_in_place(&mut r);
            x.iter_mut().zip(&r).for_each(|(xi, ri)| *xi += ri);
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_band(n: usize, w: usize, rng: &mut ChaCha8Rng, diag_shift: f64) -> SymmetricCsr {
        let mut rows = vec![Vec::new(); n];
        for i in 0..n {
            rows[i].push((i, diag_shift + rng.gen_range(-1.0..1.0)));
            for j in i + 1..(i + w + 1).min(n) {
                let v: f64 = rng.gen_range(-1.0..1.0);
                rows[i].push((j, v));
                rows[j].push((i, v));
            }
        }
        SymmetricCsr::from_rows(rows)
    }

    #[test]
    fn ldl_solves_and_counts_inertia() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 60;
        let a = random_band(n, 4, &mut rng, 0.0);
        let s = random_band(n, 2, &mut rng, 8.0);
        let shift = 0.13;
        let f = BandLdl::factor(&a, &s, shift).unwrap();
        let rhs: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let x = f.solve_refined(&a, &s, &rhs, 2);
        let m = a.to_dense() - s.to_dense() * shift;
        let r = &m * DMatrix::from_column_slice(n, 1, &x) - DMatrix::from_column_slice(n, 1, &rhs);
        assert!(r.norm() < 1e-10, "residual {}", r.norm());

        // Sylvester: negative pivots = eigenvalues of the pencil below the shift
        let chol = s.to_dense().cholesky().unwrap();
        let linv = chol.l().try_inverse().unwrap();
        let c = &linv * a.to_dense() * linv.transpose();
        let eig = c.symmetric_eigenvalues();
        let below = eig.iter().filter(|e| **e < shift).count();
        assert_eq!(f.negative_count(), below);
    }

    #[test]
    fn csr_sums_duplicates() {
        let m = SymmetricCsr::from_rows(vec![vec![(0, 1.0), (1, 2.0), (1, 1.0)], vec![(0, 3.0), (1, 0.0)]]);
        assert_eq!(m.get(0, 1), 3.0);
        assert_eq!(m.nnz(), 3);
        assert!(m.is_symmetric(0.0));
        assert_eq!(m.apply(&[1.0, 1.0]), vec![4.0, 3.0]);
    }
}
