//! Auxiliary-function machinery for the interior curvature bound: the top
//! eigenvector field tau(x), the localization set Sigma, the cutoff eta, the
//! exponential weight g, the auxiliary function phi = eta^beta g(|Du|^2/2)
//! u_tautau, identity checks for the differentiated equation, and the final
//! bound report.
//!
//! Geometry conventions: r^2 = R^2/2 is stored exactly as computed from R;
//! eta(x) = (r^2 - |x|^2 + <x,tau>^2)(r^2 - <x,tau>^2) is positive exactly on
//! Sigma-members inside B_R. All reductions run in (ix, iy) lexicographic
//! node order.

use serde::Serialize;
use thiserror::Error;

use crate::fieldcalc::{
    gradient_at, gradient_field, hessian_at, hessian_field, FamilyInstance, HessianField,
    Manufactured, ScalarField,
};
use crate::solver::{newton_solve, ProblemSpec, SolutionState, SolverConfig, SolverError};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("weight overflow at node ({ix},{iy}): exponent {exponent:.1} > 700")]
    WeightOverflow { ix: usize, iy: usize, exponent: f64 },
    #[error("Sigma contains no grid nodes")]
    EmptySigma,
    #[error("invalid auxiliary config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Field(#[from] crate::fieldcalc::FieldError),
}

/// Constants of the estimate: radius R, localization radius r = R/sqrt(2),
/// cutoff exponent beta, bounds m <= f <= M on the evaluation set, weight
/// rate c0 = 32/m, and the eigenvalue-gap floor for the tau field.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct AuxiliaryConfig {
    pub radius: f64,
    /// r^2 = R^2/2, the exact quantity used by eta and Sigma.
    pub r_squared: f64,
    pub beta: f64,
    pub m: f64,
    pub big_m: f64,
    pub c0: f64,
    pub gap_floor: f64,
}

impl AuxiliaryConfig {
    pub fn new(radius: f64, m: f64, big_m: f64) -> Result<Self, EstimatorError> {
        Self::with_overrides(radius, m, big_m, 4.0, 1e-9)
    }

    pub fn with_overrides(
        radius: f64,
        m: f64,
        big_m: f64,
        beta: f64,
        gap_floor: f64,
    ) -> Result<Self, EstimatorError> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(EstimatorError::BadConfig(format!("radius {radius} must be positive")));
        }
        if !(m.is_finite() && m > 0.0) {
            return Err(EstimatorError::BadConfig(format!("m {m} must be positive")));
        }
        if big_m < m {
            return Err(EstimatorError::BadConfig(format!("M {big_m} below m {m}")));
        }
        if beta.is_nan() || beta <= 0.0 {
            return Err(EstimatorError::BadConfig(format!("beta {beta} must be positive")));
        }
        Ok(Self {
            radius,
            r_squared: radius * radius / 2.0,
            beta,
            m,
            big_m,
            c0: 32.0 / m,
            gap_floor,
        })
    }

    pub fn r(&self) -> f64 {
        self.r_squared.sqrt()
    }

    /// Rate of the exponential weight: c0 / r^2.
    pub fn weight_rate(&self) -> f64 {
        self.c0 / self.r_squared
    }

    /// r^{4 beta} = (r^2)^{2 beta}, the normalization of the origin bound.
    pub fn r_pow_4beta(&self) -> f64 {
        self.r_squared.powf(2.0 * self.beta)
    }

    pub fn weight(&self) -> WeightG {
        WeightG { rate: self.weight_rate() }
    }
}

/// Exponential weight g(t) = exp(rate t) with rate = c0/r^2; g''g - g'^2 = 0.
#[derive(Debug, Clone, Copy)]
pub struct WeightG {
    rate: f64,
}

impl WeightG {
    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// g(t); exponents above 700 are refused instead of saturating.
    pub fn eval(&self, t: f64) -> Result<f64, f64> {
        let exponent = self.rate * t;
        if exponent > 700.0 {
            return Err(exponent);
        }
        Ok(exponent.exp())
    }

    pub fn g_prime(&self, t: f64) -> Result<f64, f64> {
        Ok(self.rate * self.eval(t)?)
    }

    pub fn g_second(&self, t: f64) -> Result<f64, f64> {
        Ok(self.rate * self.rate * self.eval(t)?)
    }

    /// g'/g, independent of t for the exponential weight.
    pub fn log_derivative(&self) -> f64 {
        self.rate
    }
}

fn orient_tau(mut t: [f64; 2]) -> [f64; 2] {
    if t[0] < 0.0 || (t[0] == 0.0 && t[1] < 0.0) {
        t = [-t[0], -t[1]];
    }
    t
}

/// Unit top-eigenvector field of the discrete Hessian on the margin-1
/// interior. Nodes with eigenvalue gap below the floor are flagged and carry
/// the reference direction (1, 0).
#[derive(Debug, Clone)]
pub struct TauField {
    pub grid: crate::fieldcalc::Grid2D,
    tau: Vec<[f64; 2]>,
    degenerate: Vec<bool>,
    gap: Vec<f64>,
}

impl TauField {
    pub fn compute(u: &ScalarField, gap_floor: f64) -> Self {
        let grid = u.grid;
        let len = grid.n_nodes() * grid.n_nodes();
        let mut tau = vec![[1.0, 0.0]; len];
        let mut degenerate = vec![false; len];
        let mut gap = vec![0.0; len];
        let hess = hessian_field(u);
        for (ix, iy) in grid.interior_nodes(1) {
            let [h11, h12, h22] = hess.get(ix, iy).expect("interior");
            let half_diff = 0.5 * (h11 - h22);
            let disc = (half_diff * half_diff + h12 * h12).sqrt();
            let g = 2.0 * disc;
            let i = grid.idx(ix, iy);
            gap[i] = g;
            if g < gap_floor {
                degenerate[i] = true;
                continue;
            }
            // Eigenvector of the larger eigenvalue, cancellation-free branch.
            let v = if half_diff >= 0.0 {
                [half_diff + disc, h12]
            } else {
                [h12 * h12 / (disc - half_diff), h12]
            };
            let norm = (v[0] * v[0] + v[1] * v[1]).sqrt();
            tau[i] = if norm == 0.0 {
                // h12 == 0 and h11 < h22: the axis eigenvector.
                if half_diff >= 0.0 {
                    [1.0, 0.0]
                } else {
                    [0.0, 1.0]
                }
            } else {
                orient_tau([v[0] / norm, v[1] / norm])
            };
        }
        Self { grid, tau, degenerate, gap }
    }

    pub fn get(&self, ix: usize, iy: usize) -> [f64; 2] {
        self.tau[self.grid.idx(ix, iy)]
    }

    pub fn is_degenerate(&self, ix: usize, iy: usize) -> bool {
        self.degenerate[self.grid.idx(ix, iy)]
    }

    pub fn gap(&self, ix: usize, iy: usize) -> f64 {
        self.gap[self.grid.idx(ix, iy)]
    }

    pub fn degenerate_count(&self) -> usize {
        self.grid
            .interior_nodes(1)
            .filter(|&(ix, iy)| self.is_degenerate(ix, iy))
            .count()
    }
}

pub fn tau_field(solution: &SolutionState, config: &AuxiliaryConfig) -> TauField {
    TauField::compute(&solution.u, config.gap_floor)
}

/// The two factors of eta at a point: (r^2 - |x|^2 + <x,tau>^2,
/// r^2 - <x,tau>^2).
pub fn sigma_factors(x: [f64; 2], tau: [f64; 2], config: &AuxiliaryConfig) -> (f64, f64) {
    let norm_sq = x[0] * x[0] + x[1] * x[1];
    let along = x[0] * tau[0] + x[1] * tau[1];
    let along_sq = along * along;
    (config.r_squared - norm_sq + along_sq, config.r_squared - along_sq)
}

/// Strict positivity of both factors; inside B_R this is exactly eta > 0.
pub fn sigma_membership_at(x: [f64; 2], tau: [f64; 2], config: &AuxiliaryConfig) -> bool {
    let (c1, c2) = sigma_factors(x, tau, config);
    c1 > 0.0 && c2 > 0.0
}

pub fn eta_at(x: [f64; 2], tau: [f64; 2], config: &AuxiliaryConfig) -> f64 {
    let (c1, c2) = sigma_factors(x, tau, config);
    c1 * c2
}

/// Node-level Sigma membership through the tau field.
pub fn sigma_membership(
    ix: usize,
    iy: usize,
    tau: &TauField,
    config: &AuxiliaryConfig,
) -> bool {
    tau.grid.is_interior(ix, iy, 1)
        && sigma_membership_at(tau.grid.node(ix, iy), tau.get(ix, iy), config)
}

pub fn eta_eval(ix: usize, iy: usize, tau: &TauField, config: &AuxiliaryConfig) -> f64 {
    eta_at(tau.grid.node(ix, iy), tau.get(ix, iy), config)
}

/// Discrete eta field on the margin-1 interior (zero elsewhere).
pub fn eta_field(tau: &TauField, config: &AuxiliaryConfig) -> ScalarField {
    let mut out = ScalarField::zeros(tau.grid);
    for (ix, iy) in tau.grid.interior_nodes(1) {
        out.set(ix, iy, eta_eval(ix, iy, tau, config));
    }
    out
}

/// phi over Sigma; non-members carry `None`.
#[derive(Debug, Clone)]
pub struct PhiField {
    pub grid: crate::fieldcalc::Grid2D,
    values: Vec<Option<f64>>,
}

impl PhiField {
    pub fn get(&self, ix: usize, iy: usize) -> Option<f64> {
        self.values[self.grid.idx(ix, iy)]
    }

    pub fn member_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }
}

/// phi = eta^beta g(|Du|^2/2) u_tautau on Sigma-member nodes.
pub fn phi_eval(
    u: &ScalarField,
    tau: &TauField,
    config: &AuxiliaryConfig,
) -> Result<PhiField, EstimatorError> {
    let grid = u.grid;
    let weight = config.weight();
    let mut values = vec![None; grid.n_nodes() * grid.n_nodes()];
    for (ix, iy) in grid.interior_nodes(1) {
        if !sigma_membership(ix, iy, tau, config) {
            continue;
        }
        let eta = eta_eval(ix, iy, tau, config);
        let g = gradient_at(u, ix, iy).expect("interior");
        let t = 0.5 * (g[0] * g[0] + g[1] * g[1]);
        let gw = weight
            .eval(t)
            .map_err(|exponent| EstimatorError::WeightOverflow { ix, iy, exponent })?;
        let [h11, h12, h22] = hessian_at(u, ix, iy).expect("interior");
        let tv = tau.get(ix, iy);
        let u_tt = tv[0] * tv[0] * h11 + 2.0 * tv[0] * tv[1] * h12 + tv[1] * tv[1] * h22;
        values[grid.idx(ix, iy)] = Some(eta.powf(config.beta) * gw * u_tt);
    }
    Ok(PhiField { grid, values })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ArgmaxInfo {
    pub ix: usize,
    pub iy: usize,
    pub x: [f64; 2],
    pub phi_max: f64,
    /// True when a 4-neighbor of the argmax lies outside Sigma.
    pub rim_adjacent: bool,
}

/// Argmax of phi over Sigma-nodes; ties keep the lexicographically first
/// node in (ix, iy) order.
pub fn locate_interior_max(phi: &PhiField) -> Result<ArgmaxInfo, EstimatorError> {
    let grid = phi.grid;
    let mut best: Option<(usize, usize, f64)> = None;
    for (ix, iy) in grid.interior_nodes(1) {
        if let Some(v) = phi.get(ix, iy) {
            match best {
                Some((_, _, b)) if v <= b => {}
                _ => best = Some((ix, iy, v)),
            }
        }
    }
    let (ix, iy, phi_max) = best.ok_or(EstimatorError::EmptySigma)?;
    let rim_adjacent = [(1isize, 0isize), (-1, 0), (0, 1), (0, -1)].iter().any(|&(dx, dy)| {
        let nx = ix as isize + dx;
        let ny = iy as isize + dy;
        if nx < 0 || ny < 0 || nx > grid.n_cells() as isize || ny > grid.n_cells() as isize {
            return true;
        }
        phi.get(nx as usize, ny as usize).is_none()
    });
    Ok(ArgmaxInfo { ix, iy, x: grid.node(ix, iy), phi_max, rim_adjacent })
}

/// Why a pointwise check was skipped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckSkip {
    DegenerateGap,
    OutsideSigma,
    InsufficientMargin,
}

/// Third-derivative tensor u_{pq,i} at a node, from centered differences of
/// the Hessian field; comp indices map (0,0)->0, (0,1)/(1,0)->1, (1,1)->2.
fn third_tensor(hess: &HessianField, ix: usize, iy: usize) -> Option<[[f64; 2]; 3]> {
    hess.third_derivatives(ix, iy).ok()
}

fn comp_of(p: usize, q: usize) -> usize {
    p + q
}

/// First-order condition of log phi at the argmax, evaluated in the frame
/// diagonalizing the Hessian there (largest eigenvalue first). Returns the
/// two residuals |u_{11i}/u_11 + beta eta_i/eta + (g'/g) u_i u_ii|.
pub fn critical_point_check(
    u: &ScalarField,
    tau: &TauField,
    config: &AuxiliaryConfig,
    ix: usize,
    iy: usize,
) -> Result<[f64; 2], CheckSkip> {
    let grid = u.grid;
    if !grid.is_interior(ix, iy, 2) {
        return Err(CheckSkip::InsufficientMargin);
    }
    if tau.is_degenerate(ix, iy) || tau.gap(ix, iy) < config.gap_floor {
        return Err(CheckSkip::DegenerateGap);
    }
    if !sigma_membership(ix, iy, tau, config) {
        return Err(CheckSkip::OutsideSigma);
    }
    let hess = hessian_field(u);
    let [h11, h12, h22] = hess.get(ix, iy).expect("interior");
    let v1 = tau.get(ix, iy);
    let v2 = [-v1[1], v1[0]];
    let frame = [v1, v2];
    let lambda = |v: [f64; 2]| v[0] * v[0] * h11 + 2.0 * v[0] * v[1] * h12 + v[1] * v[1] * h22;
    let lam = [lambda(v1), lambda(v2)];

    let grad = gradient_at(u, ix, iy).expect("interior");
    let grad_rot = [
        grad[0] * v1[0] + grad[1] * v1[1],
        grad[0] * v2[0] + grad[1] * v2[1],
    ];

    let t3 = third_tensor(&hess, ix, iy).ok_or(CheckSkip::InsufficientMargin)?;
    // u_{11i}' = sum over p,q,r of v1_p v1_q (e_i')_r u_{pq,r}.
    let mut u11i = [0.0f64; 2];
    for (i, dir) in frame.iter().enumerate() {
        let mut acc = 0.0;
        for p in 0..2 {
            for q in 0..2 {
                for r in 0..2 {
                    acc += v1[p] * v1[q] * dir[r] * t3[comp_of(p, q)][r];
                }
            }
        }
        u11i[i] = acc;
    }

    let eta = eta_field(tau, config);
    let eta0 = eta.get(ix, iy);
    let h2 = 2.0 * grid.spacing();
    let eta_grad = [
        (eta.get(ix + 1, iy) - eta.get(ix - 1, iy)) / h2,
        (eta.get(ix, iy + 1) - eta.get(ix, iy - 1)) / h2,
    ];
    let rate = config.weight().log_derivative();
    let mut out = [0.0f64; 2];
    for (i, dir) in frame.iter().enumerate() {
        let eta_i = eta_grad[0] * dir[0] + eta_grad[1] * dir[1];
        let r = u11i[i] / lam[0] + config.beta * eta_i / eta0 + rate * grad_rot[i] * lam[i];
        out[i] = r.abs();
    }
    Ok(out)
}

/// Identity-check summary: sup residual over the admissible nodes.
#[derive(Debug, Clone, Serialize)]
pub struct IdentitySup {
    pub sup: f64,
    pub nodes: usize,
}

/// First derivative of the equation in cofactor form:
/// sum_pq F^pq u_{pq,i} = d_i [ f (1 + |Du|^2)^2 ], analytic f and grad f.
pub fn differentiated_equation_check(
    u: &ScalarField,
    family: impl Into<FamilyInstance>,
) -> IdentitySup {
    let family = family.into();
    let grid = u.grid;
    let hess = hessian_field(u);
    let mut sup = 0.0f64;
    let mut nodes = 0usize;
    for (ix, iy) in grid.interior_nodes(2) {
        let [h11, h12, h22] = hess.get(ix, iy).expect("interior");
        let t3 = third_tensor(&hess, ix, iy).expect("margin 2");
        let grad = gradient_at(u, ix, iy).expect("interior");
        let s = 1.0 + grad[0] * grad[0] + grad[1] * grad[1];
        let [x1, x2] = grid.node(ix, iy);
        let fv = family.f(x1, x2);
        let gf = family.grad_f(x1, x2);
        for axis in 0..2 {
            let lhs = h22 * t3[0][axis] - 2.0 * h12 * t3[1][axis] + h11 * t3[2][axis];
            // u_{k,i} from the Hessian: row k of [h11 h12; h12 h22].
            let u1i = if axis == 0 { h11 } else { h12 };
            let u2i = if axis == 0 { h12 } else { h22 };
            let rhs = gf[axis] * s * s + 4.0 * fv * s * (grad[0] * u1i + grad[1] * u2i);
            sup = sup.max((lhs - rhs).abs());
        }
        nodes += 1;
    }
    IdentitySup { sup, nodes }
}

#[derive(Debug, Clone, Serialize)]
pub struct SecondVariationReport {
    pub sup: f64,
    pub nodes: usize,
    /// Estimated rounding scale of the fourth differences, eps-level noise
    /// amplified by 1/h^4.
    pub roundoff_floor: f64,
}

/// Second derivative of the equation in cofactor form:
/// sum F^pq u_{pq,ij} + [u_{11,i} u_{22,j} + u_{22,i} u_{11,j}
/// - 2 u_{12,i} u_{12,j}] = d^2_ij [ f (1 + |Du|^2)^2 ].
pub fn det_second_variation_check(
    u: &ScalarField,
    family: impl Into<FamilyInstance>,
) -> Result<SecondVariationReport, EstimatorError> {
    let family = family.into();
    let grid = u.grid;
    if grid.n_cells() < 2 * 4 + 1 {
        return Err(EstimatorError::BadConfig(format!(
            "grid with {} cells is too coarse for a four-node margin",
            grid.n_cells()
        )));
    }
    let hess = hessian_field(u);
    let mut sup = 0.0f64;
    let mut nodes = 0usize;
    let mut hess_l1 = 0.0f64;
    for (ix, iy) in grid.interior_nodes(4) {
        let [h11, h12, h22] = hess.get(ix, iy).expect("interior");
        hess_l1 = hess_l1.max(h11.abs() + 2.0 * h12.abs() + h22.abs());
        let t3 = third_tensor(&hess, ix, iy).expect("margin 2");
        let grad = gradient_at(u, ix, iy).expect("interior");
        let s = 1.0 + grad[0] * grad[0] + grad[1] * grad[1];
        let [x1, x2] = grid.node(ix, iy);
        let fv = family.f(x1, x2);
        let gf = family.grad_f(x1, x2);
        let hf = family.hess_f(x1, x2);
        let hess_comp = [h11, h12, h22];
        // s_i = 2 (u1 u_{1i} + u2 u_{2i}).
        let u_ki = |k: usize, i: usize| hess_comp[comp_of(k, i)];
        let s_d = [0, 1].map(|i| 2.0 * (grad[0] * u_ki(0, i) + grad[1] * u_ki(1, i)));
        for i in 0..2 {
            for j in i..2 {
                let mut lhs = 0.0;
                for p in 0..2 {
                    for q in 0..2 {
                        let f_pq = match (p, q) {
                            (0, 0) => h22,
                            (1, 1) => h11,
                            _ => -h12,
                        };
                        lhs += f_pq
                            * hess
                                .fourth_derivative(comp_of(p, q), i, j, ix, iy)
                                .expect("margin 4");
                    }
                }
                lhs += t3[0][i] * t3[2][j] + t3[2][i] * t3[0][j] - 2.0 * t3[1][i] * t3[1][j];

                // u_{k,ij} third derivatives of the gradient components.
                let u_kij = |k: usize, i: usize, j: usize| t3[comp_of(k, i)][j];
                let s_ij = 2.0
                    * (u_ki(0, i) * u_ki(0, j)
                        + grad[0] * u_kij(0, i, j)
                        + u_ki(1, i) * u_ki(1, j)
                        + grad[1] * u_kij(1, i, j));
                let f_ij = hf[i + j];
                let rhs = f_ij * s * s
                    + 2.0 * gf[j] * s * s_d[i]
                    + 2.0 * gf[i] * s * s_d[j]
                    + 2.0 * fv * (s_d[i] * s_d[j] + s * s_ij);
                sup = sup.max((lhs - rhs).abs());
            }
        }
        nodes += 1;
    }
    let h = grid.spacing();
    let roundoff_floor = f64::EPSILON * 4.0 * u.sup_norm() * hess_l1.max(1.0) / (h * h * h * h);
    Ok(SecondVariationReport { sup, nodes, roundoff_floor })
}

#[derive(Debug, Clone, Serialize)]
pub struct TauDirectionalReport {
    pub sup: f64,
    pub nodes: usize,
    pub skipped_degenerate: usize,
}

/// Checks <x, d_i tau> = x_2' u_{12,i}' / (lambda_1 - lambda_2) in the local
/// eigenframe, differencing the tau field (sign-aligned) along rotated axes.
///
/// `gap_min` gates admissibility: where the gap is at the h^2 scale the tau
/// field is dominated by discretization noise against a vanishing
/// denominator, so callers studying decay should pass an O(1) threshold.
pub fn tau_directional_check(
    u: &ScalarField,
    tau: &TauField,
    config: &AuxiliaryConfig,
    gap_min: f64,
) -> TauDirectionalReport {
    let grid = u.grid;
    let hess = hessian_field(u);
    let gap_min = gap_min.max(10.0 * config.gap_floor);
    let mut sup = 0.0f64;
    let mut nodes = 0usize;
    let mut skipped = 0usize;
    let h2 = 2.0 * grid.spacing();
    for (ix, iy) in grid.interior_nodes(2) {
        let neighbors =
            [(ix + 1, iy), (ix - 1, iy), (ix, iy + 1), (ix, iy - 1), (ix, iy)];
        if neighbors.iter().any(|&(jx, jy)| tau.is_degenerate(jx, jy) || tau.gap(jx, jy) < gap_min)
        {
            skipped += 1;
            continue;
        }
        let v1 = tau.get(ix, iy);
        let v2 = [-v1[1], v1[0]];
        let frame = [v1, v2];
        let [h11, h12, h22] = hess.get(ix, iy).expect("interior");
        let lam1 = v1[0] * v1[0] * h11 + 2.0 * v1[0] * v1[1] * h12 + v1[1] * v1[1] * h22;
        let lam2 = v2[0] * v2[0] * h11 + 2.0 * v2[0] * v2[1] * h12 + v2[1] * v2[1] * h22;
        let gap = lam1 - lam2;

        let aligned = |jx: usize, jy: usize| -> [f64; 2] {
            let t = tau.get(jx, jy);
            if t[0] * v1[0] + t[1] * v1[1] < 0.0 {
                [-t[0], -t[1]]
            } else {
                t
            }
        };
        let de = aligned(ix + 1, iy);
        let dw = aligned(ix - 1, iy);
        let dn = aligned(ix, iy + 1);
        let ds = aligned(ix, iy - 1);
        let dtau = [
            [(de[0] - dw[0]) / h2, (de[1] - dw[1]) / h2],
            [(dn[0] - ds[0]) / h2, (dn[1] - ds[1]) / h2],
        ];

        let t3 = third_tensor(&hess, ix, iy).expect("margin 2");
        let x = grid.node(ix, iy);
        let x2_rot = x[0] * v2[0] + x[1] * v2[1];
        for dir in &frame {
            // d_{e_i'} tau as a vector, then the frame-free inner product.
            let dti = [
                dir[0] * dtau[0][0] + dir[1] * dtau[1][0],
                dir[0] * dtau[0][1] + dir[1] * dtau[1][1],
            ];
            let lhs = x[0] * dti[0] + x[1] * dti[1];
            let mut u12i = 0.0;
            for p in 0..2 {
                for q in 0..2 {
                    for r in 0..2 {
                        u12i += v1[p] * v2[q] * dir[r] * t3[comp_of(p, q)][r];
                    }
                }
            }
            let rhs = x2_rot * u12i / gap;
            sup = sup.max((lhs - rhs).abs());
        }
        nodes += 1;
    }
    TauDirectionalReport { sup, nodes, skipped_degenerate: skipped }
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "kebab-case", tag = "status")]
pub enum CriticalPointOutcome {
    Checked { residuals: [f64; 2] },
    Skipped { reason: CheckSkip },
}

#[derive(Debug, Clone, Serialize)]
pub struct ConstantsDigest {
    pub m: f64,
    pub big_m: f64,
    pub radius: f64,
    pub sup_grad_f: f64,
    pub sup_hess_f: f64,
    pub sup_grad_u: f64,
    /// Measured range of f over the Sigma nodes of this run.
    pub f_min_sigma: f64,
    pub f_max_sigma: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct IdentityResiduals {
    pub critical_point: CriticalPointOutcome,
    pub differentiated_equation: IdentitySup,
    pub second_variation: SecondVariationReport,
    pub tau_directional: TauDirectionalReport,
}

/// Full outcome of the interior-bound measurement.
#[derive(Debug, Clone, Serialize)]
pub struct EstimateReport {
    pub manufactured: String,
    pub radius: f64,
    pub n_cells: usize,
    pub beta: f64,
    pub m: f64,
    pub big_m: f64,
    pub c0: f64,
    pub r_squared: f64,
    pub gap_floor: f64,
    pub x0: ArgmaxInfo,
    pub phi_max: f64,
    pub eta_lambda1_max: f64,
    pub u_tau_tau_origin: f64,
    pub bound_at_origin: f64,
    pub max_directional_origin: f64,
    pub directional_chain_holds: bool,
    pub origin_chain_holds: bool,
    pub origin_degenerate: bool,
    pub sigma_node_count: usize,
    pub degenerate_node_count: usize,
    pub identity_residuals: IdentityResiduals,
    pub constants_digest: ConstantsDigest,
}

/// Measures min/max of f over the Sigma-member nodes of a solution.
pub fn measure_f_bounds_on_sigma(
    u: &ScalarField,
    family: impl Into<FamilyInstance>,
    radius: f64,
    gap_floor: f64,
) -> Result<(f64, f64), EstimatorError> {
    let family = family.into();
    // Sigma depends on the config only through r^2 = R^2/2, never on m.
    let probe = AuxiliaryConfig::new(radius, 1.0, 1.0)?;
    let probe = AuxiliaryConfig { gap_floor, ..probe };
    let tau = TauField::compute(u, gap_floor);
    let mut f_min = f64::INFINITY;
    let mut f_max = f64::NEG_INFINITY;
    for (ix, iy) in u.grid.interior_nodes(1) {
        if sigma_membership(ix, iy, &tau, &probe) {
            let [x1, x2] = u.grid.node(ix, iy);
            let v = family.f(x1, x2);
            f_min = f_min.min(v);
            f_max = f_max.max(v);
        }
    }
    if !f_min.is_finite() {
        return Err(EstimatorError::EmptySigma);
    }
    Ok((f_min, f_max))
}

/// Sixteen unit directions sampling the half-circle.
pub fn sample_directions() -> [[f64; 2]; 16] {
    core::array::from_fn(|j| {
        let angle = j as f64 * std::f64::consts::PI / 16.0;
        [angle.cos(), angle.sin()]
    })
}

/// Assembles the full estimate report for a converged solution.
pub fn bound_report(
    solution: &SolutionState,
    spec: &ProblemSpec,
    config: &AuxiliaryConfig,
) -> Result<EstimateReport, EstimatorError> {
    let u = &solution.u;
    let grid = u.grid;
    let tau = tau_field(solution, config);
    let phi = phi_eval(u, &tau, config)?;
    let argmax = locate_interior_max(&phi)?;

    let hess = hessian_field(u);
    let mut eta_lambda1_max = f64::NEG_INFINITY;
    let mut sigma_count = 0usize;
    let mut f_min_sigma = f64::INFINITY;
    let mut f_max_sigma = f64::NEG_INFINITY;
    for (ix, iy) in grid.interior_nodes(1) {
        if !sigma_membership(ix, iy, &tau, config) {
            continue;
        }
        sigma_count += 1;
        let eta = eta_eval(ix, iy, &tau, config);
        let [l1, _] = hess.eigenvalues(ix, iy).expect("interior");
        eta_lambda1_max = eta_lambda1_max.max(eta * l1);
        let [x1, x2] = grid.node(ix, iy);
        let fv = spec.manufactured.f(x1, x2);
        f_min_sigma = f_min_sigma.min(fv);
        f_max_sigma = f_max_sigma.max(fv);
    }

    let (ox, oy) = grid.origin_index();
    let origin_degenerate = tau.is_degenerate(ox, oy);
    let tau0 = tau.get(ox, oy);
    let [h11, h12, h22] = hess.get(ox, oy).expect("origin interior");
    let u_tau_tau_origin =
        tau0[0] * tau0[0] * h11 + 2.0 * tau0[0] * tau0[1] * h12 + tau0[1] * tau0[1] * h22;
    let bound_at_origin = argmax.phi_max / config.r_pow_4beta();

    let mut max_directional = f64::NEG_INFINITY;
    let mut directional_ok = true;
    for xi in sample_directions() {
        let v = xi[0] * xi[0] * h11 + 2.0 * xi[0] * xi[1] * h12 + xi[1] * xi[1] * h22;
        max_directional = max_directional.max(v.abs());
        if v.abs() > u_tau_tau_origin + 1e-12 {
            directional_ok = false;
        }
    }
    let origin_chain_holds = u_tau_tau_origin <= bound_at_origin + 1e-12;

    let critical_point = match critical_point_check(u, &tau, config, argmax.ix, argmax.iy) {
        Ok(residuals) => CriticalPointOutcome::Checked { residuals },
        Err(reason) => CriticalPointOutcome::Skipped { reason },
    };
    let differentiated = differentiated_equation_check(u, spec.manufactured);
    let second_variation = det_second_variation_check(u, spec.manufactured)?;
    let tau_dir = tau_directional_check(u, &tau, config, 10.0 * config.gap_floor);

    // Data constants measured over grid nodes in the closed ball B_R.
    let grad = gradient_field(u);
    let mut sup_grad_f = 0.0f64;
    let mut sup_hess_f = 0.0f64;
    let mut sup_grad_u = 0.0f64;
    let r_sq = spec.radius * spec.radius;
    for (ix, iy) in grid.all_nodes() {
        let [x1, x2] = grid.node(ix, iy);
        if x1 * x1 + x2 * x2 > r_sq {
            continue;
        }
        let gf = spec.manufactured.grad_f(x1, x2);
        sup_grad_f = sup_grad_f.max((gf[0] * gf[0] + gf[1] * gf[1]).sqrt());
        let hf = spec.manufactured.hess_f(x1, x2);
        let half_tr = 0.5 * (hf[0] + hf[2]);
        let disc = (0.25 * (hf[0] - hf[2]) * (hf[0] - hf[2]) + hf[1] * hf[1]).sqrt();
        sup_hess_f = sup_hess_f.max((half_tr + disc).abs().max((half_tr - disc).abs()));
        if grid.is_interior(ix, iy, 1) {
            let g = grad.get(ix, iy).expect("interior");
            sup_grad_u = sup_grad_u.max((g[0] * g[0] + g[1] * g[1]).sqrt());
        }
    }

    Ok(EstimateReport {
        manufactured: spec.manufactured.name().to_string(),
        radius: spec.radius,
        n_cells: grid.n_cells(),
        beta: config.beta,
        m: config.m,
        big_m: config.big_m,
        c0: config.c0,
        r_squared: config.r_squared,
        gap_floor: config.gap_floor,
        x0: argmax,
        phi_max: argmax.phi_max,
        eta_lambda1_max,
        u_tau_tau_origin,
        bound_at_origin,
        max_directional_origin: max_directional,
        directional_chain_holds: directional_ok,
        origin_chain_holds,
        origin_degenerate,
        sigma_node_count: sigma_count,
        degenerate_node_count: tau.degenerate_count(),
        identity_residuals: IdentityResiduals {
            critical_point,
            differentiated_equation: differentiated,
            second_variation,
            tau_directional: tau_dir,
        },
        constants_digest: ConstantsDigest {
            m: config.m,
            big_m: config.big_m,
            radius: spec.radius,
            sup_grad_f,
            sup_hess_f,
            sup_grad_u,
            f_min_sigma,
            f_max_sigma,
        },
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub manufactured: String,
    pub radius: f64,
    pub n_cells: usize,
    pub f_scale: f64,
    pub m: Option<f64>,
    pub big_m: Option<f64>,
    pub c0: Option<f64>,
    pub r_squared: f64,
    pub sup_grad_f: Option<f64>,
    pub sup_hess_f: Option<f64>,
    pub sup_grad_u: Option<f64>,
    pub eta_lambda1_max: Option<f64>,
    pub bound_at_origin: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub failures: usize,
}

/// One sweep instance: manufactured family, base radius, grid size, and a
/// positive scaling of f realized through the exact dilation symmetry
/// u(x) -> u(Lx)/L with L = sqrt(f_scale); the solved domain is R/L.
#[derive(Debug, Clone, Copy)]
pub struct SweepInstance {
    pub kind: Manufactured,
    pub radius: f64,
    pub n_cells: usize,
    pub f_scale: f64,
}

fn scaled_spec(inst: &SweepInstance) -> Result<ProblemSpec, SolverError> {
    let lambda = inst.f_scale.sqrt();
    let family = FamilyInstance { kind: inst.kind, dilation: lambda };
    ProblemSpec::from_family(family, inst.radius / lambda, inst.n_cells)
}

/// Runs the solver + estimate over every instance; failures are recorded as
/// marked rows and do not abort the sweep.
pub fn parameter_sweep(instances: &[SweepInstance], solver: &SolverConfig) -> SweepTable {
    let mut rows = Vec::with_capacity(instances.len());
    let mut failures = 0usize;
    for inst in instances {
        // Dilation shrinks the solved domain to R / sqrt(f_scale).
        let solved_radius = inst.radius / inst.f_scale.sqrt();
        let r_squared = solved_radius * solved_radius / 2.0;
        let base = SweepRow {
            manufactured: inst.kind.name().to_string(),
            radius: solved_radius,
            n_cells: inst.n_cells,
            f_scale: inst.f_scale,
            m: None,
            big_m: None,
            c0: None,
            r_squared,
            sup_grad_f: None,
            sup_hess_f: None,
            sup_grad_u: None,
            eta_lambda1_max: None,
            bound_at_origin: None,
            failure: None,
        };
        let row = (|| -> Result<SweepRow, String> {
            let spec = scaled_spec(inst).map_err(|e| e.to_string())?;
            let state = newton_solve(&spec, solver).map_err(|e| e.to_string())?;
            let (m, big_m) =
                measure_f_bounds_on_sigma(&state.u, spec.manufactured, spec.radius, 1e-9)
                    .map_err(|e| e.to_string())?;
            let config =
                AuxiliaryConfig::new(spec.radius, m, big_m).map_err(|e| e.to_string())?;
            let report = bound_report(&state, &spec, &config).map_err(|e| e.to_string())?;
            Ok(SweepRow {
                m: Some(m),
                big_m: Some(big_m),
                c0: Some(config.c0),
                sup_grad_f: Some(report.constants_digest.sup_grad_f),
                sup_hess_f: Some(report.constants_digest.sup_hess_f),
                sup_grad_u: Some(report.constants_digest.sup_grad_u),
                eta_lambda1_max: Some(report.eta_lambda1_max),
                bound_at_origin: Some(report.bound_at_origin),
                ..base.clone()
            })
        })();
        match row {
            Ok(r) => rows.push(r),
            Err(msg) => {
                failures += 1;
                rows.push(SweepRow { failure: Some(msg), ..base });
            }
        }
    }
    SweepTable { rows, failures }
}
