//! One-coordinate building blocks of the semiparabolic oscillator basis.
//!
//! Each of `mu`, `nu` carries the `m = 0` two-dimensional oscillator
//! functions
//!
//! ```text
//! phi_k(mu) = sqrt(2)/b * L_k(mu^2/b^2) * exp(-mu^2/(2 b^2)),   k = 0, 1, ...
//! ```
//!
//! orthonormal with measure `mu dmu`. As functions of `mu` they are even
//! polynomials of degree `2k` (oscillator quantum number `N = 2k`) times a
//! Gaussian. Matrix elements of `mu^2`, `mu^4` and the radial kinetic
//! energy follow from the three-term recurrence of `x L_k(x)`.

/// Dense `K x K` one-coordinate matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialMatrices {
    pub k: usize,
    /// `<j| -1/2 (d^2/dmu^2 + 1/mu d/dmu) |k>`
    pub kinetic: Vec<f64>,
    /// `<j| mu^2 |k>`
    pub mu2: Vec<f64>,
    /// `<j| mu^4 |k>`
    pub mu4: Vec<f64>,
}

impl RadialMatrices {
    pub fn new(k: usize, b: f64) -> Self {
        // x = mu^2/b^2 is tridiagonal: diag 2j+1, off-diagonal -(j+1).
        // Squaring on an enlarged index range keeps the truncated mu^4 exact.
        let ke = k + 2;
        let x = |i: usize, j: usize| -> f64 {
            if i == j {
                (2 * i + 1) as f64
            } else if i + 1 == j || j + 1 == i {
                -(i.max(j) as f64)
            } else {
                0.0
            }
        };
        let b2 = b * b;
        let mut kinetic = vec![0.0; k * k];
        let mut mu2 = vec![0.0; k * k];
        let mut mu4 = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                let xij = x(i, j);
                mu2[i * k + j] = b2 * xij;
                let diag = if i == j { (2 * i + 1) as f64 } else { 0.0 };
                kinetic[i * k + j] = (diag - 0.5 * xij) / b2;
                let lo = i.min(j).saturating_sub(1);
                let hi = (i.max(j) + 1).min(ke - 1);
                let x2: f64 = (lo..=hi).map(|m| x(i, m) * x(m, j)).sum();
                mu4[i * k + j] = b2 * b2 * x2;
            }
        }
        Self { k, kinetic, mu2, mu4 }
    }

    #[inline]
    pub fn kin(&self, i: usize, j: usize) -> f64 {
        self.kinetic[i * self.k + j]
    }

    #[inline]
    pub fn m2(&self, i: usize, j: usize) -> f64 {
        self.mu2[i * self.k + j]
    }

    #[inline]
    pub fn m4(&self, i: usize, j: usize) -> f64 {
        self.mu4[i * self.k + j]
    }
}

/// Values, first derivatives and radial Laplacians of `phi_0..phi_{K-1}` at one point.
#[derive(Debug, Clone)]
pub struct RadialValues {
    pub value: Vec<f64>,
    pub deriv: Vec<f64>,
}

impl RadialValues {
    pub fn with_len(k: usize) -> Self {
        Self { value: vec![0.0; k], deriv: vec![0.0; k] }
    }
}

/// Fill `out` with `phi_k(mu)` and `d phi_k / d mu` for `k < out.len()`.
pub fn eval_radial(mu: f64, b: f64, out: &mut RadialValues) {
    let k = out.value.len();
    if k == 0 {
        return;
    }
    let x = mu * mu / (b * b);
    let norm = std::f64::consts::SQRT_2 / b;
    let g = norm * (-0.5 * x).exp();
    // L_k and L_k' times the normalized Gaussian.
    let (mut l_prev, mut l) = (0.0, g);
    let mut dl = 0.0;
    let chain = 2.0 * mu / (b * b);
    for j in 0..k {
        out.value[j] = l;
        out.deriv[j] = chain * (dl - 0.5 * l);
        // L'_{j+1} = L'_j - L_j
        dl -= l;
        let jf = j as f64;
        let next = ((2.0 * jf + 1.0 - x) * l - jf * l_prev) / (jf + 1.0);
        l_prev = l;
        l = next;
    }
}

/// `(d^2/dmu^2 + 1/mu d/dmu) phi_k = (mu^2/b^4 - 2(2k+1)/b^2) phi_k`.
#[inline]
pub fn radial_laplacian_factor(mu: f64, b: f64, k: usize) -> f64 {
    let b2 = b * b;
    mu * mu / (b2 * b2) - 2.0 * (2 * k + 1) as f64 / b2
}
