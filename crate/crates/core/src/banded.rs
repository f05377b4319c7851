//! Real symmetric banded factorizations applied to complex right-hand sides.

use num_complex::Complex64;

/// `LDL^T` factorization of a symmetric pentadiagonal matrix given by its
/// diagonal `a0` and first two super-diagonals `a1`, `a2`.
#[derive(Clone, Debug)]
pub struct PentaLdl {
    d: Vec<f64>,
    e: Vec<f64>,
    f: Vec<f64>,
}

impl PentaLdl {
    /// Returns `None` when a pivot is not strictly positive.
    pub fn factor(a0: &[f64], a1: &[f64], a2: &[f64]) -> Option<Self> {
        let n = a0.len();
        let mut d = vec![0.0; n];
        let mut e = vec![0.0; n];
        let mut f = vec![0.0; n];
        for i in 0..n {
            let mut di = a0[i];
            if i >= 1 {
                di -= e[i - 1] * e[i - 1] * d[i - 1];
            }
            if i >= 2 {
                di -= f[i - 2] * f[i - 2] * d[i - 2];
            }
            if di <= 0.0 || !di.is_finite() {
                return None;
            }
            d[i] = di;
            if i + 1 < n {
                let mut ei = a1[i];
                if i >= 1 {
                    ei -= f[i - 1] * d[i - 1] * e[i - 1];
                }
                e[i] = ei / di;
            }
            if i + 2 < n {
                f[i] = a2[i] / di;
            }
        }
        Some(PentaLdl { d, e, f })
    }

    pub fn len(&self) -> usize {
        self.d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d.is_empty()
    }

    /// Solves in place.
    pub fn solve(&self, x: &mut [Complex64]) {
        let n = self.d.len();
        for i in 1..n {
            let mut v = x[i] - x[i - 1] * self.e[i - 1];
            if i >= 2 {
                v -= x[i - 2] * self.f[i - 2];
            }
            x[i] = v;
        }
        for i in 0..n {
            x[i] /= self.d[i];
        }
        for i in (0..n.saturating_sub(1)).rev() {
            let mut v = x[i] - x[i + 1] * self.e[i];
            if i + 2 < n {
                v -= x[i + 2] * self.f[i];
            }
            x[i] = v;
        }
    }
}

/// Tridiagonal solve with constant off-diagonal `off` and diagonal `diag`,
/// pre-eliminated for repeated use.
#[derive(Clone, Debug)]
pub struct TriFactor {
    off: f64,
    inv_pivot: Vec<f64>,
}

impl TriFactor {
    pub fn new(diag: &[f64], off: f64) -> Self {
        let n = diag.len();
        let mut inv_pivot = vec![0.0; n];
        let mut prev = 0.0;
        for i in 0..n {
            let p = if i == 0 { diag[0] } else { diag[i] - off * off * prev };
            inv_pivot[i] = 1.0 / p;
            prev = inv_pivot[i];
        }
        TriFactor { off, inv_pivot }
    }

    pub fn solve(&self, x: &mut [Complex64]) {
        let n = x.len();
        if n == 0 {
            return;
        }
        x[0] *= self.inv_pivot[0];
        for i in 1..n {
            x[i] = (x[i] - x[i - 1] * self.off) * self.inv_pivot[i];
        }
        for i in (0..n - 1).rev() {
            let c = self.off * self.inv_pivot[i];
            x[i] -= x[i + 1] * c;
        }
    }
}
