//! Banded LU factorization with partial pivoting, LAPACK `dgbtrf` storage:
//! entry (i, j) lives at `data[j * ldab + kl + ku + i - j]`, with `kl` extra
//! rows on top absorbing pivot fill-in.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BandError {
    #[error("singular system: pivot {pivot:.3e} at row {row}")]
    Singular { row: usize, pivot: f64 },
    #[error("dimension mismatch: matrix is {n}, vector is {len}")]
    Mismatch { n: usize, len: usize },
    #[error("iterative refinement stalled at relative residual {0:.3e}")]
    RefinementStalled(f64),
}

#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    ldab: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn new(n: usize, kl: usize, ku: usize) -> Self {
        let ldab = 2 * kl + ku + 1;
        Self { n, kl, ku, ldab, data: vec![0.0; n * ldab] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match self.offset_checked(i, j) {
            Some(o) => self.data[o],
            None => 0.0,
        }
    }

    fn offset_checked(&self, i: usize, j: usize) -> Option<usize> {
        if i >= self.n || j >= self.n {
            return None;
        }
        let d = i as isize - j as isize;
        if d > self.kl as isize || d < -((self.kl + self.ku) as isize) {
            return None;
        }
        let row = (self.kl + self.ku) as isize + d;
        Some(j * self.ldab + row as usize)
    }

    /// Adds `v` to entry (i, j); the entry must lie inside the original band
    /// |i - j| <= min(kl, ku).
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let o = self.offset_checked(i, j).expect("entry inside band");
        self.data[o] += v;
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let o = self.offset_checked(i, j).expect("entry inside band");
        self.data[o] = v;
    }

    /// y = A x over the original band (call before factorization).
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for j in 0..self.n {
            let lo = j.saturating_sub(self.ku);
            let hi = (j + self.kl).min(self.n - 1);
            for i in lo..=hi {
                if let Some(o) = self.offset_checked(i, j) {
                    y[i] += self.data[o] * x[j];
                }
            }
        }
        y
    }

    /// In-place LU with partial pivoting. Returns the pivot permutation.
    pub fn factor(&mut self) -> Result<Vec<usize>, BandError> {
        let n = self.n;
        let (kl, ku, ldab) = (self.kl, self.ku, self.ldab);
        let mut pivots = vec![0usize; n];
        for j in 0..n {
            let reach = (j + kl).min(n - 1);
            // Pivot search in column j.
            let mut p = j;
            let mut best = 0.0f64;
            for i in j..=reach {
                let v = self.data[j * ldab + kl + ku + i - j].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            let pivot_val = self.data[j * ldab + kl + ku + p - j];
            if best == 0.0 || !pivot_val.is_finite() {
                return Err(BandError::Singular { row: p, pivot: pivot_val });
            }
            pivots[j] = p;
            let col_hi = (j + kl + ku).min(n - 1);
            if p != j {
                for c in j..=col_hi {
                    let oj = c * ldab + kl + ku + j - c;
                    let op = c * ldab + kl + ku + p - c;
                    self.data.swap(oj, op);
                }
            }
            let diag = self.data[j * ldab + kl + ku];
            for i in (j + 1)..=reach {
                let oij = j * ldab + kl + ku + i - j;
                let m = self.data[oij] / diag;
                self.data[oij] = m;
                if m != 0.0 {
                    for c in (j + 1)..=col_hi {
                        let oic = c * ldab + kl + ku + i - c;
                        let ojc = c * ldab + kl + ku + j - c;
                        self.data[oic] -= m * self.data[ojc];
                    }
                }
            }
        }
        Ok(pivots)
    }

    /// Solves A x = b given the factorization from [`Self::factor`].
    pub fn solve_factored(&self, pivots: &[usize], b: &[f64]) -> Result<Vec<f64>, BandError> {
        if b.len() != self.n {
            return Err(BandError::Mismatch { n: self.n, len: b.len() });
        }
        let n = self.n;
        let (kl, ku, ldab) = (self.kl, self.ku, self.ldab);
        let mut x = b.to_vec();
        for j in 0..n {
            let p = pivots[j];
            if p != j {
                x.swap(j, p);
            }
            let xj = x[j];
            if xj != 0.0 {
                let reach = (j + kl).min(n - 1);
                for i in (j + 1)..=reach {
                    x[i] -= self.data[j * ldab + kl + ku + i - j] * xj;
                }
            }
        }
        for j in (0..n).rev() {
            let mut s = x[j];
            for c in (j + 1)..=(j + kl + ku).min(n - 1) {
                s -= self.data[c * ldab + kl + ku + j - c] * x[c];
            }
            x[j] = s / self.data[j * ldab + kl + ku];
        }
        Ok(x)
    }

    /// Row-sum norm over the original band (call before factorization).
    pub fn norm_inf(&self) -> f64 {
        let mut rows = vec![0.0f64; self.n];
        for j in 0..self.n {
            let lo = j.saturating_sub(self.ku);
            let hi = (j + self.kl).min(self.n - 1);
            for i in lo..=hi {
                if let Some(o) = self.offset_checked(i, j) {
                    rows[i] += self.data[o].abs();
                }
            }
        }
        rows.iter().fold(0.0f64, |m, v| m.max(*v))
    }

    /// Factors a copy, solves, and applies iterative refinement until the
    /// normwise backward error |b - Ax| / (|A| |x| + |b|) reaches 1e-12.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, BandError> {
        let mut lu = self.clone();
        let pivots = lu.factor()?;
        let mut x = lu.solve_factored(&pivots, b)?;
        let a_norm = self.norm_inf();
        let b_norm = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let backward = |x: &[f64], r_norm: f64| -> f64 {
            let x_norm = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            r_norm / (a_norm * x_norm + b_norm).max(f64::MIN_POSITIVE)
        };
        let mut last = f64::INFINITY;
        for _ in 0..=3 {
            let ax = self.matvec(&x);
            let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
            let r_norm = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let be = backward(&x, r_norm);
            if be <= 1e-12 {
                return Ok(x);
            }
            last = be;
            let dx = lu.solve_factored(&pivots, &r)?;
            for (xi, di) in x.iter_mut().zip(&dx) {
                *xi += di;
            }
        }
        Err(BandError::RefinementStalled(last))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let mut m: Vec<Vec<f64>> = a.to_vec();
        let mut x = b.to_vec();
        for j in 0..n {
            let p = (j..n).max_by(|&i1, &i2| m[i1][j].abs().total_cmp(&m[i2][j].abs())).unwrap();
            m.swap(j, p);
            x.swap(j, p);
            for i in (j + 1)..n {
                let f = m[i][j] / m[j][j];
                for c in j..n {
                    m[i][c] -= f * m[j][c];
                }
                x[i] -= f * x[j];
            }
        }
        for j in (0..n).rev() {
            for c in (j + 1)..n {
                x[j] -= m[j][c] * x[c];
            }
            x[j] /= m[j][j];
        }
        x
    }

    #[test]
    fn matches_dense_on_random_band_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(n, kl) in &[(30usize, 3usize), (80, 7), (50, 1)] {
            let mut band = BandMatrix::new(n, kl, kl);
            let mut dense = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    if i.abs_diff(j) <= kl {
                        let v: f64 = rng.random_range(-1.0..1.0);
                        let v = if i == j { v + 4.0 } else { v };
                        band.set(i, j, v);
                        dense[i][j] = v;
                    }
                }
            }
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x_band = band.solve(&b).unwrap();
            let x_dense = dense_solve(&dense, &b);
            for i in 0..n {
                assert!((x_band[i] - x_dense[i]).abs() < 1e-10, "row {i}");
            }
        }
    }

    #[test]
    fn pivoting_handles_zero_diagonal() {
        // [[0, 1], [1, 0]] requires a row swap.
        let mut band = BandMatrix::new(2, 1, 1);
        band.set(0, 1, 1.0);
        band.set(1, 0, 1.0);
        let x = band.solve(&[2.0, 3.0]).unwrap();
        assert!((x[0] - 3.0).abs() < 1e-14);
        assert!((x[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn singular_reported_with_row() {
        let mut band = BandMatrix::new(3, 1, 1);
        band.set(0, 0, 1.0);
        band.set(2, 2, 1.0);
        // Row/column 1 entirely zero.
        match band.solve(&[1.0, 1.0, 1.0]) {
            Err(BandError::Singular { .. }) => {}
            other => panic!("expected singular, got {other:?}"),
        }
    }

    #[test]
    fn matvec_agrees_with_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (n, kl) = (40usize, 5usize);
        let mut band = BandMatrix::new(n, kl, kl);
        let mut dense = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                if i.abs_diff(j) <= kl {
                    let v: f64 = rng.random_range(-1.0..1.0);
                    band.set(i, j, v);
                    dense[i][j] = v;
                }
            }
        }
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = band.matvec(&x);
        for i in 0..n {
            let want: f64 = (0..n).map(|j| dense[i][j] * x[j]).sum();
            assert!((y[i] - want).abs() < 1e-12);
        }
    }
}
