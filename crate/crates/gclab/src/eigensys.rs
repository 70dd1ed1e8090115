//! Eigen-structure of symmetric matrices and the first/second derivatives of
//! eigenvalues and eigenvectors with respect to matrix entries.
//!
//! Derivative bookkeeping treats `W_pq` and `W_qp` as independent parameters.
//! Only symmetric perturbations are realizable, so the finite-difference
//! oracle moves the pair `E_pq + E_qp` at once and all comparisons go through
//! the summed convention (see [`compare_derivatives`]).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EigenError {
    #[error("matrix entries must be finite")]
    NonFinite,
    #[error("matrix must be square and at least 2x2, got {0} rows")]
    BadDimension(usize),
    #[error("matrix is not symmetric at ({p},{q}): {a} vs {b}")]
    NotSymmetric { p: usize, q: usize, a: f64, b: f64 },
    #[error("eigenvalues {i} and {j} are degenerate (gap {gap:.3e} below {tol:.3e})")]
    DegenerateGap { i: usize, j: usize, gap: f64, tol: f64 },
    #[error("oracle step {0:.3e} outside [1e-7, 1e-3]")]
    BadStep(f64),
    #[error("jacobi iteration failed to converge")]
    NoConvergence,
}

/// Symmetric n x n matrix with full storage, symmetry enforced on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    n: usize,
    a: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(n: usize) -> Result<Self, EigenError> {
        if n < 2 {
            return Err(EigenError::BadDimension(n));
        }
        Ok(Self { n, a: vec![0.0; n * n] })
    }

    /// Build from explicit rows; entries must match across the diagonal exactly.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, EigenError> {
        let n = rows.len();
        if n < 2 || rows.iter().any(|r| r.len() != n) {
            return Err(EigenError::BadDimension(n));
        }
        let mut m = Self::zeros(n)?;
        for (p, row) in rows.iter().enumerate() {
            for (q, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(EigenError::NonFinite);
                }
                m.a[p * n + q] = v;
            }
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if m.a[p * n + q] != m.a[q * n + p] {
                    return Err(EigenError::NotSymmetric {
                        p,
                        q,
                        a: m.a[p * n + q],
                        b: m.a[q * n + p],
                    });
                }
            }
        }
        Ok(m)
    }

    /// Build from a function of (p, q); the (q, p) mirror is filled automatically.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self, EigenError> {
        let mut m = Self::zeros(n)?;
        for p in 0..n {
            for q in p..n {
                let v = f(p, q);
                if !v.is_finite() {
                    return Err(EigenError::NonFinite);
                }
                m.a[p * n + q] = v;
                m.a[q * n + p] = v;
            }
        }
        Ok(m)
    }

    pub fn diagonal(d: &[f64]) -> Result<Self, EigenError> {
        Self::from_fn(d.len(), |p, q| if p == q { d[p] } else { 0.0 })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, p: usize, q: usize) -> f64 {
        self.a[p * self.n + q]
    }

    /// Set the (p, q) and (q, p) entries together.
    pub fn set_sym(&mut self, p: usize, q: usize, v: f64) {
        self.a[p * self.n + q] = v;
        self.a[q * self.n + p] = v;
    }

    pub fn norm_frobenius(&self) -> f64 {
        self.a.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest absolute off-diagonal entry.
    pub fn max_off_diagonal(&self) -> f64 {
        let mut m = 0.0f64;
        for p in 0..self.n {
            for q in (p + 1)..self.n {
                m = m.max(self.get(p, q).abs());
            }
        }
        m
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|p| (0..self.n).map(|q| self.get(p, q) * v[q]).sum())
            .collect()
    }
}

/// Ordered eigen-decomposition of a [`SymMatrix`].
///
/// Eigenvalues are sorted descending; `vectors[k]` is the unit eigenvector of
/// `eigenvalues[k]` with its largest-magnitude component positive (ties broken
/// by lowest index).
#[derive(Debug, Clone)]
pub struct EigenSystem {
    pub eigenvalues: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
    pub gap: f64,
}

impl EigenSystem {
    pub fn n(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Smallest gap between eigenvalue `k` and any other eigenvalue.
    pub fn gap_at(&self, k: usize) -> (f64, usize) {
        let mut best = (f64::INFINITY, usize::MAX);
        for j in 0..self.n() {
            if j != k {
                let g = (self.eigenvalues[k] - self.eigenvalues[j]).abs();
                if g < best.0 {
                    best = (g, j);
                }
            }
        }
        best
    }

    /// Sum_k lambda_k tau^k (tau^k)^T, used by the reconstruction invariant.
    pub fn reconstruct(&self) -> SymMatrix {
        let n = self.n();
        SymMatrix::from_fn(n, |p, q| {
            (0..n)
                .map(|k| self.eigenvalues[k] * self.vectors[k][p] * self.vectors[k][q])
                .sum()
        })
        .expect("reconstruction is finite")
    }
}

fn orient_largest_component(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// Full eigen-decomposition by cyclic Jacobi rotations.
///
/// Deterministic for identical input; residual `|W tau - lambda tau|` lands at
/// machine scale, far inside the 1e-12 contract.
pub fn eigen_system(w: &SymMatrix) -> Result<EigenSystem, EigenError> {
    if w.a.iter().any(|v| !v.is_finite()) {
        return Err(EigenError::NonFinite);
    }
    let n = w.n;
    let mut a = w.clone();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let norm = a.norm_frobenius().max(1.0);
    let tol = f64::EPSILON * norm;

    let mut converged = false;
    for _sweep in 0..64 {
        if a.max_off_diagonal() <= tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq.abs() <= tol * 1e-3 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (theta * theta + 1.0).sqrt())
                } else {
                    -1.0 / (-theta + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // A <- J^T A J with J the (p,q) rotation.
                for i in 0..n {
                    let aip = a.get(i, p);
                    let aiq = a.get(i, q);
                    if i != p && i != q {
                        a.set_sym(i, p, c * aip - s * aiq);
                        a.set_sym(i, q, s * aip + c * aiq);
                    }
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                a.a[p * n + p] = app - t * apq;
                a.a[q * n + q] = aqq + t * apq;
                a.set_sym(p, q, 0.0);
                for i in 0..n {
                    let vip = v[i * n + p];
                    let viq = v[i * n + q];
                    v[i * n + p] = c * vip - s * viq;
                    v[i * n + q] = s * vip + c * viq;
                }
            }
        }
    }
    if !converged && a.max_off_diagonal() > tol {
        return Err(EigenError::NoConvergence);
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a.get(j, j)
            .partial_cmp(&a.get(i, i))
            .expect("finite eigenvalues")
            .then(i.cmp(&j))
    });

    let eigenvalues: Vec<f64> = order.iter().map(|&i| a.get(i, i)).collect();
    let mut vectors = Vec::with_capacity(n);
    for &col in &order {
        let mut vec_k: Vec<f64> = (0..n).map(|i| v[i * n + col]).collect();
        orient_largest_component(&mut vec_k);
        vectors.push(vec_k);
    }
    let mut gap = f64::INFINITY;
    for i in 1..n {
        gap = gap.min(eigenvalues[i - 1] - eigenvalues[i]);
    }
    Ok(EigenSystem { eigenvalues, vectors, gap })
}

/// Closed-form 2x2 eigen-decomposition.
///
/// Eigenvalues are the quadratic roots ((W11+W22) +- sqrt((W11-W22)^2 +
/// 4 W12 W21))/2. The top eigenvector comes from the kernel column
/// (xi_1, xi_2) = (((W22-W11) - sqrt(..))/2, -W21); when W22 > W11 the first
/// component is evaluated in the rationalized form -2 W12 W21 / (sqrt(..) +
/// (W22 - W11)), which is algebraically identical but cancellation-free.
pub fn closed_form_2x2(w: &SymMatrix) -> Result<EigenSystem, EigenError> {
    if w.n != 2 {
        return Err(EigenError::BadDimension(w.n));
    }
    let (a, b, d) = (w.get(0, 0), w.get(1, 1), w.get(0, 1));
    let disc = ((a - b) * (a - b) + 4.0 * d * d).sqrt();
    let lambda1 = 0.5 * ((a + b) + disc);
    let lambda2 = 0.5 * ((a + b) - disc);
    if disc == 0.0 {
        return Err(EigenError::DegenerateGap { i: 0, j: 1, gap: 0.0, tol: 0.0 });
    }

    let xi = if a >= b {
        [-0.5 * ((a - b) + disc), -d]
    } else {
        // (b - a) - disc cancels; rationalize through the conjugate.
        [-2.0 * d * d / (disc + (b - a)), -d]
    };
    let norm = (xi[0] * xi[0] + xi[1] * xi[1]).sqrt();
    let mut tau1 = if norm == 0.0 {
        // Diagonal matrix: kernel column vanishes, eigenvector is an axis.
        if a >= b {
            vec![1.0, 0.0]
        } else {
            vec![0.0, 1.0]
        }
    } else {
        vec![-xi[0] / norm, -xi[1] / norm]
    };
    orient_largest_component(&mut tau1);
    let mut tau2 = vec![-tau1[1], tau1[0]];
    orient_largest_component(&mut tau2);

    Ok(EigenSystem {
        eigenvalues: vec![lambda1, lambda2],
        vectors: vec![tau1, tau2],
        gap: lambda1 - lambda2,
    })
}

/// First and second derivatives of `lambda_k` and `tau^k` with respect to the
/// matrix entries, valid while `lambda_k` stays simple.
///
/// At a diagonal matrix the arrays hold the tabulated rational values in
/// 1/(lambda_k - lambda_i); at a general symmetric matrix they are those
/// tables conjugated through the eigenframe (the entry map X -> Q^T X Q is
/// linear, so the chain rule is a pure four-index contraction).
#[derive(Debug, Clone)]
pub struct EigenDerivatives {
    n: usize,
    pub k: usize,
    /// Orthogonal frame whose columns are the eigenvectors at W.
    pub frame: Vec<Vec<f64>>,
    d_lambda: Vec<f64>,
    d_tau: Vec<f64>,
    d2_lambda: Vec<f64>,
    d2_tau: Vec<f64>,
}

impl EigenDerivatives {
    fn zeros(n: usize, k: usize, frame: Vec<Vec<f64>>) -> Self {
        Self {
            n,
            k,
            frame,
            d_lambda: vec![0.0; n * n],
            d_tau: vec![0.0; n * n * n],
            d2_lambda: vec![0.0; n * n * n * n],
            d2_tau: vec![0.0; n * n * n * n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// d lambda_k / d W_pq (0-based indices).
    pub fn d_lambda(&self, p: usize, q: usize) -> f64 {
        self.d_lambda[p * self.n + q]
    }

    /// d tau^k_i / d W_pq.
    pub fn d_tau(&self, i: usize, p: usize, q: usize) -> f64 {
        self.d_tau[(i * self.n + p) * self.n + q]
    }

    /// d^2 lambda_k / d W_pq d W_rs.
    pub fn d2_lambda(&self, p: usize, q: usize, r: usize, s: usize) -> f64 {
        self.d2_lambda[((p * self.n + q) * self.n + r) * self.n + s]
    }

    /// d^2 tau^k_i / d W_pq d W_rs.
    pub fn d2_tau(&self, i: usize, p: usize, q: usize, r: usize, s: usize) -> f64 {
        self.d2_tau[(((i * self.n + p) * self.n + q) * self.n + r) * self.n + s]
    }

    fn d_lambda_mut(&mut self, p: usize, q: usize) -> &mut f64 {
        &mut self.d_lambda[p * self.n + q]
    }

    fn d_tau_mut(&mut self, i: usize, p: usize, q: usize) -> &mut f64 {
        &mut self.d_tau[(i * self.n + p) * self.n + q]
    }

    fn d2_lambda_mut(&mut self, p: usize, q: usize, r: usize, s: usize) -> &mut f64 {
        &mut self.d2_lambda[((p * self.n + q) * self.n + r) * self.n + s]
    }

    fn d2_tau_mut(&mut self, i: usize, p: usize, q: usize, r: usize, s: usize) -> &mut f64 {
        &mut self.d2_tau[(((i * self.n + p) * self.n + q) * self.n + r) * self.n + s]
    }

    /// Directional derivative of tau^k_i along the symmetric pair direction
    /// {p, q}: the sum over the (p,q) and (q,p) slots.
    pub fn d_tau_pair(&self, i: usize, p: usize, q: usize) -> f64 {
        if p == q {
            self.d_tau(i, p, p)
        } else {
            self.d_tau(i, p, q) + self.d_tau(i, q, p)
        }
    }

    pub fn d_lambda_pair(&self, p: usize, q: usize) -> f64 {
        if p == q {
            self.d_lambda(p, p)
        } else {
            self.d_lambda(p, q) + self.d_lambda(q, p)
        }
    }

    fn pair_slots(p: usize, q: usize) -> Vec<(usize, usize)> {
        if p == q {
            vec![(p, p)]
        } else {
            vec![(p, q), (q, p)]
        }
    }

    /// Second directional derivative of lambda_k along pair directions
    /// {p, q} then {r, s}.
    pub fn d2_lambda_pair(&self, p: usize, q: usize, r: usize, s: usize) -> f64 {
        let mut acc = 0.0;
        for &(a, b) in &Self::pair_slots(p, q) {
            for &(c, d) in &Self::pair_slots(r, s) {
                acc += self.d2_lambda(a, b, c, d);
            }
        }
        acc
    }

    pub fn d2_tau_pair(&self, i: usize, p: usize, q: usize, r: usize, s: usize) -> f64 {
        let mut acc = 0.0;
        for &(a, b) in &Self::pair_slots(p, q) {
            for &(c, d) in &Self::pair_slots(r, s) {
                acc += self.d2_tau(i, a, b, c, d);
            }
        }
        acc
    }
}

/// Default gap tolerance below which eigenvector derivatives are refused.
pub fn default_gap_tolerance(w: &SymMatrix) -> f64 {
    1e-8 * (1.0 + w.norm_frobenius())
}

/// Derivatives of `lambda_k` and `tau^k` at a general symmetric matrix.
///
/// `k` is the 0-based rank in the descending eigenvalue order.
pub fn eigen_derivatives(w: &SymMatrix, k: usize) -> Result<EigenDerivatives, EigenError> {
    eigen_derivatives_with_tolerance(w, k, default_gap_tolerance(w))
}

pub fn eigen_derivatives_with_tolerance(
    w: &SymMatrix,
    k: usize,
    gap_tolerance: f64,
) -> Result<EigenDerivatives, EigenError> {
    let eig = eigen_system(w)?;
    let n = w.n;
    if k >= n {
        return Err(EigenError::BadDimension(k));
    }
    let (gap, j) = eig.gap_at(k);
    if gap < gap_tolerance {
        return Err(EigenError::DegenerateGap { i: k, j, gap, tol: gap_tolerance });
    }
    let lam = &eig.eigenvalues;
    // q[i][m] = component i of eigenvector m (columns of the diagonalizing frame).
    let q = |i: usize, m: usize| eig.vectors[m][i];

    let mut out = EigenDerivatives::zeros(n, k, eig.vectors.clone());

    // First derivatives: the diagonal-case tables are
    //   d lambda_k / d W'_ab = delta_ak delta_bk,
    //   d tau^k_m / d W'_ab  = delta_am delta_bk / (lambda_k - lambda_m),  m != k,
    // conjugated through the frame.
    for p in 0..n {
        for qq in 0..n {
            *out.d_lambda_mut(p, qq) = q(p, k) * q(qq, k);
        }
    }
    for i in 0..n {
        for p in 0..n {
            for qq in 0..n {
                let mut acc = 0.0;
                for m in 0..n {
                    if m == k {
                        continue;
                    }
                    acc += q(i, m) * q(p, m) * q(qq, k) / (lam[k] - lam[m]);
                }
                *out.d_tau_mut(i, p, qq) = acc;
            }
        }
    }

    // Second derivative of lambda_k: nonzero diagonal-case entries sit at
    // ((k,j),(j,k)) and the mirror ((j,k),(k,j)) with value 1/(lambda_k - lambda_j).
    for p in 0..n {
        for qq in 0..n {
            for r in 0..n {
                for s in 0..n {
                    let mut acc = 0.0;
                    for jj in 0..n {
                        if jj == k {
                            continue;
                        }
                        let inv = 1.0 / (lam[k] - lam[jj]);
                        acc += q(p, k) * q(qq, jj) * q(r, jj) * q(s, k) * inv;
                        acc += q(p, jj) * q(qq, k) * q(r, k) * q(s, jj) * inv;
                    }
                    *out.d2_lambda_mut(p, qq, r, s) = acc;
                }
            }
        }
    }

    // Second derivative of tau^k. Diagonal-case entries (with Clairaut mirrors):
    //   component k:       ((m,k),(m,k))            -> -1/(lambda_k-lambda_m)^2
    //   component m != k:  ((m,k),(m,m)) + mirror   -> +1/(lambda_k-lambda_m)^2
    //                      ((m,k),(k,k)) + mirror   -> -1/(lambda_k-lambda_m)^2
    //                      ((m,u),(u,k)) + mirror   -> 1/((lambda_k-lambda_m)(lambda_k-lambda_u))
    // Gathered as a sparse pattern list (component, a, b, c, d, value).
    let mut patterns: Vec<(usize, usize, usize, usize, usize, f64)> = Vec::new();
    for m in 0..n {
        if m == k {
            continue;
        }
        let gm = lam[k] - lam[m];
        patterns.push((k, m, k, m, k, -1.0 / (gm * gm)));
        patterns.push((m, m, k, m, m, 1.0 / (gm * gm)));
        patterns.push((m, m, m, m, k, 1.0 / (gm * gm)));
        patterns.push((m, m, k, k, k, -1.0 / (gm * gm)));
        patterns.push((m, k, k, m, k, -1.0 / (gm * gm)));
        for u in 0..n {
            if u == m || u == k {
                continue;
            }
            let gu = lam[k] - lam[u];
            patterns.push((m, m, u, u, k, 1.0 / (gm * gu)));
            patterns.push((m, u, k, m, u, 1.0 / (gm * gu)));
        }
    }
    for i in 0..n {
        for p in 0..n {
            for qq in 0..n {
                for r in 0..n {
                    for s in 0..n {
                        let mut acc = 0.0;
                        for &(m, a, b, c, d, val) in &patterns {
                            acc += q(i, m) * q(p, a) * q(qq, b) * q(r, c) * q(s, d) * val;
                        }
                        *out.d2_tau_mut(i, p, qq, r, s) = acc;
                    }
                }
            }
        }
    }

    Ok(out)
}

fn perturbed(w: &SymMatrix, dirs: &[(usize, usize, f64)]) -> SymMatrix {
    let mut m = w.clone();
    for &(p, q, h) in dirs {
        let v = m.get(p, q) + h;
        if p == q {
            m.a[p * m.n + p] = v;
        } else {
            m.set_sym(p, q, v);
        }
    }
    m
}

fn tau_aligned(w: &SymMatrix, k: usize, base: &[f64]) -> Result<(f64, Vec<f64>), EigenError> {
    let eig = eigen_system(w)?;
    let mut v = eig.vectors[k].clone();
    let dot: f64 = v.iter().zip(base).map(|(a, b)| a * b).sum();
    if dot < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
    Ok((eig.eigenvalues[k], v))
}

/// Central finite differences of [`eigen_system`] under symmetric pair
/// perturbations, packed so that the symmetric-pair sums reproduce the
/// measured directional derivatives (off-diagonal slots each carry half).
pub fn perturbation_oracle(w: &SymMatrix, k: usize, h: f64) -> Result<EigenDerivatives, EigenError> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(EigenError::BadStep(h));
    }
    let base = eigen_system(w)?;
    let n = w.n;
    if k >= n {
        return Err(EigenError::BadDimension(k));
    }
    let (gap, j) = base.gap_at(k);
    if gap < 10.0 * h {
        return Err(EigenError::DegenerateGap { i: k, j, gap, tol: 10.0 * h });
    }
    let tau0 = base.vectors[k].clone();

    let pairs: Vec<(usize, usize)> =
        (0..n).flat_map(|p| (p..n).map(move |q| (p, q))).collect();

    let mut out = EigenDerivatives::zeros(n, k, base.vectors.clone());

    // Evaluations at W +- h U for every pair direction, reused by the pure
    // second differences.
    let mut plus: Vec<(f64, Vec<f64>)> = Vec::with_capacity(pairs.len());
    let mut minus: Vec<(f64, Vec<f64>)> = Vec::with_capacity(pairs.len());
    for &(p, q) in &pairs {
        plus.push(tau_aligned(&perturbed(w, &[(p, q, h)]), k, &tau0)?);
        minus.push(tau_aligned(&perturbed(w, &[(p, q, -h)]), k, &tau0)?);
    }

    let spread = |out_slots: &[(usize, usize)], val: f64| -> Vec<(usize, usize, f64)> {
        let share = val / out_slots.len() as f64;
        out_slots.iter().map(|&(a, b)| (a, b, share)).collect()
    };

    for (idx, &(p, q)) in pairs.iter().enumerate() {
        let dl = (plus[idx].0 - minus[idx].0) / (2.0 * h);
        for (a, b, v) in spread(&EigenDerivatives::pair_slots(p, q), dl) {
            *out.d_lambda_mut(a, b) = v;
        }
        for i in 0..n {
            let dt = (plus[idx].1[i] - minus[idx].1[i]) / (2.0 * h);
            for (a, b, v) in spread(&EigenDerivatives::pair_slots(p, q), dt) {
                *out.d_tau_mut(i, a, b) = v;
            }
        }
    }

    // Second derivatives: pure directions reuse the first-derivative corner
    // evaluations; mixed directions use the four-corner stencil.
    for (iu, &(p, q)) in pairs.iter().enumerate() {
        for (iv, &(r, s)) in pairs.iter().enumerate().skip(iu) {
            let (d2l, d2t): (f64, Vec<f64>) = if iu == iv {
                let d2l = (plus[iu].0 - 2.0 * base.eigenvalues[k] + minus[iu].0) / (h * h);
                let d2t = (0..n)
                    .map(|i| (plus[iu].1[i] - 2.0 * tau0[i] + minus[iu].1[i]) / (h * h))
                    .collect();
                (d2l, d2t)
            } else {
                let pp = tau_aligned(&perturbed(w, &[(p, q, h), (r, s, h)]), k, &tau0)?;
                let pm = tau_aligned(&perturbed(w, &[(p, q, h), (r, s, -h)]), k, &tau0)?;
                let mp = tau_aligned(&perturbed(w, &[(p, q, -h), (r, s, h)]), k, &tau0)?;
                let mm = tau_aligned(&perturbed(w, &[(p, q, -h), (r, s, -h)]), k, &tau0)?;
                let d2l = (pp.0 - pm.0 - mp.0 + mm.0) / (4.0 * h * h);
                let d2t = (0..n)
                    .map(|i| (pp.1[i] - pm.1[i] - mp.1[i] + mm.1[i]) / (4.0 * h * h))
                    .collect();
                (d2l, d2t)
            };
            let u_slots = EigenDerivatives::pair_slots(p, q);
            let v_slots = EigenDerivatives::pair_slots(r, s);
            let slots = u_slots.len() * v_slots.len();
            let share_l = d2l / slots as f64;
            for &(a, b) in &u_slots {
                for &(c, d) in &v_slots {
                    *out.d2_lambda_mut(a, b, c, d) = share_l;
                    *out.d2_lambda_mut(c, d, a, b) = share_l;
                }
            }
            for i in 0..n {
                let share_t = d2t[i] / slots as f64;
                for &(a, b) in &u_slots {
                    for &(c, d) in &v_slots {
                        *out.d2_tau_mut(i, a, b, c, d) = share_t;
                        *out.d2_tau_mut(i, c, d, a, b) = share_t;
                    }
                }
            }
        }
    }

    Ok(out)
}

/// Worst absolute disagreement between two derivative sets under the
/// symmetric-pair summation convention.
#[derive(Debug, Clone, Copy, Default, serde::Serialize)]
pub struct DerivativeDiscrepancy {
    pub first_lambda: f64,
    pub first_tau: f64,
    pub second_lambda: f64,
    pub second_tau: f64,
}

impl DerivativeDiscrepancy {
    pub fn max_first(&self) -> f64 {
        self.first_lambda.max(self.first_tau)
    }

    pub fn max_second(&self) -> f64 {
        self.second_lambda.max(self.second_tau)
    }

    pub fn merge(&mut self, other: &DerivativeDiscrepancy) {
        self.first_lambda = self.first_lambda.max(other.first_lambda);
        self.first_tau = self.first_tau.max(other.first_tau);
        self.second_lambda = self.second_lambda.max(other.second_lambda);
        self.second_tau = self.second_tau.max(other.second_tau);
    }
}

pub fn compare_derivatives(
    formula: &EigenDerivatives,
    oracle: &EigenDerivatives,
) -> DerivativeDiscrepancy {
    let n = formula.n();
    let mut d = DerivativeDiscrepancy::default();
    let pairs: Vec<(usize, usize)> =
        (0..n).flat_map(|p| (p..n).map(move |q| (p, q))).collect();
    for &(p, q) in &pairs {
        d.first_lambda = d
            .first_lambda
            .max((formula.d_lambda_pair(p, q) - oracle.d_lambda_pair(p, q)).abs());
        for i in 0..n {
            d.first_tau = d
                .first_tau
                .max((formula.d_tau_pair(i, p, q) - oracle.d_tau_pair(i, p, q)).abs());
        }
        for &(r, s) in &pairs {
            d.second_lambda = d.second_lambda.max(
                (formula.d2_lambda_pair(p, q, r, s) - oracle.d2_lambda_pair(p, q, r, s)).abs(),
            );
            for i in 0..n {
                d.second_tau = d.second_tau.max(
                    (formula.d2_tau_pair(i, p, q, r, s) - oracle.d2_tau_pair(i, p, q, r, s))
                        .abs(),
                );
            }
        }
    }
    d
}

/// Random symmetric matrix with entries in [-range, range].
pub fn random_symmetric(n: usize, range: f64, rng: &mut impl rand::Rng) -> SymMatrix {
    SymMatrix::from_fn(n, |_, _| rng.random_range(-range..range)).expect("finite entries")
}

/// Rejection-sample a random symmetric matrix whose pairwise eigenvalue gaps
/// all reach `gap_min`. Returns the matrix and its eigen-decomposition.
pub fn random_symmetric_with_gap(
    n: usize,
    range: f64,
    gap_min: f64,
    rng: &mut impl rand::Rng,
) -> (SymMatrix, EigenSystem) {
    loop {
        let w = random_symmetric(n, range, rng);
        let eig = eigen_system(&w).expect("finite random matrix");
        if eig.gap >= gap_min {
            return (w, eig);
        }
    }
}
