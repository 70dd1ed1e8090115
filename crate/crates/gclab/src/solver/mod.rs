//! Damped Newton solver for the discrete equation
//! N(u) = det D2_h u - f (1 + |D_h u|^2)^2 = 0 with two-ring Dirichlet data.
//!
//! Boundary rows are identities, interior rows carry the cofactor-weighted
//! second-difference stencils minus the gradient-term linearization. A step is
//! accepted only if the sup residual drops and the discrete convexity margin
//! stays above -1e-8.

pub mod band;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::fieldcalc::{
    gradient_at, hessian_at, hessian_field, FamilyInstance, FieldError, Grid2D, Manufactured,
    ScalarField,
};
use band::{BandError, BandMatrix};

/// Margin (in node rings) of the Dirichlet data; residual rows start inside it.
pub const BOUNDARY_RINGS: usize = 2;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("f must satisfy 0 < m <= f <= M on the grid; found {value} at ({ix},{iy})")]
    BadCurvatureDatum { ix: usize, iy: usize, value: f64 },
    #[error("linear solve failed at node ({ix},{iy}): {source}")]
    LinearSolve {
        ix: usize,
        iy: usize,
        #[source]
        source: BandError,
    },
    #[error("no acceptable damped step at iteration {iteration} (residual {residual:.3e})")]
    StepRejected { iteration: usize, residual: f64 },
    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    MaxIterations { iterations: usize, residual: f64 },
    #[error("convergence study needs at least 2 levels, got {0}")]
    TooFewLevels(usize),
    #[error("invalid solver configuration: {0}")]
    BadConfig(String),
}

/// Discrete Dirichlet problem for the prescribed-curvature equation.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub manufactured: FamilyInstance,
    pub radius: f64,
    pub grid: Grid2D,
    pub f: ScalarField,
    /// Exact solution samples; only the outermost two rings act as data.
    pub boundary: ScalarField,
    pub f_min: f64,
    pub f_max: f64,
}

impl ProblemSpec {
    pub fn from_manufactured(
        kind: Manufactured,
        radius: f64,
        n_cells: usize,
    ) -> Result<Self, SolverError> {
        Self::from_family(kind.into(), radius, n_cells)
    }

    pub fn from_family(
        family: FamilyInstance,
        radius: f64,
        n_cells: usize,
    ) -> Result<Self, SolverError> {
        let grid = Grid2D::new(radius, n_cells)?;
        let f = family.f_field(grid);
        let mut f_min = f64::INFINITY;
        let mut f_max = f64::NEG_INFINITY;
        for (ix, iy) in grid.all_nodes() {
            let v = f.get(ix, iy);
            if !(v.is_finite() && v > 0.0) {
                return Err(SolverError::BadCurvatureDatum { ix, iy, value: v });
            }
            f_min = f_min.min(v);
            f_max = f_max.max(v);
        }
        Ok(Self {
            manufactured: family,
            radius,
            grid,
            f,
            boundary: family.u_field(grid),
            f_min,
            f_max,
        })
    }

    pub fn exact_solution(&self) -> ScalarField {
        self.manufactured.u_field(self.grid)
    }

    fn is_equation_node(&self, ix: usize, iy: usize) -> bool {
        self.grid.is_interior(ix, iy, BOUNDARY_RINGS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum InitialGuess {
    /// Exact samples plus a seeded smooth perturbation vanishing on the rings.
    ExactPerturbed { amplitude: f64, seed: u64 },
    /// Least-squares quadratic fitted to the two-ring boundary data.
    QuadraticFit,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub residual_tolerance: f64,
    pub max_halvings: u32,
    pub initial_guess: InitialGuess,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            residual_tolerance: 1e-10,
            max_halvings: 30,
            initial_guess: InitialGuess::ExactPerturbed { amplitude: 0.01, seed: 0 },
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        if self.max_iterations == 0 {
            return Err(SolverError::BadConfig("max_iterations must be >= 1".into()));
        }
        if self.residual_tolerance.is_nan() || self.residual_tolerance <= 0.0 {
            return Err(SolverError::BadConfig("residual_tolerance must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub residual_norm: f64,
    pub halvings: u32,
    pub convexity_margin: f64,
}

/// Converged discrete solution with diagnostics.
#[derive(Debug, Clone)]
pub struct SolutionState {
    pub u: ScalarField,
    pub residual_norm: f64,
    pub iterations: usize,
    pub convexity_margin: f64,
    pub converged: bool,
    pub log: Vec<IterationRecord>,
}

/// N(u): equation stencil on interior nodes, u - boundary data on the rings.
pub fn residual(u: &ScalarField, spec: &ProblemSpec) -> ScalarField {
    let grid = spec.grid;
    let mut out = ScalarField::zeros(grid);
    for (ix, iy) in grid.all_nodes() {
        let v = if spec.is_equation_node(ix, iy) {
            let [u11, u12, u22] = hessian_at(u, ix, iy).expect("equation node");
            let g = gradient_at(u, ix, iy).expect("equation node");
            let s = 1.0 + g[0] * g[0] + g[1] * g[1];
            u11 * u22 - u12 * u12 - spec.f.get(ix, iy) * s * s
        } else {
            u.get(ix, iy) - spec.boundary.get(ix, iy)
        };
        out.set(ix, iy, v);
    }
    out
}

/// Smallest discrete Hessian eigenvalue over margin-1 nodes.
pub fn convexity_margin(u: &ScalarField) -> f64 {
    let hess = hessian_field(u);
    let mut worst = f64::INFINITY;
    for (ix, iy) in u.grid.interior_nodes(1) {
        let [_, l2] = hess.eigenvalues(ix, iy).expect("interior");
        worst = worst.min(l2);
    }
    worst
}

/// Jacobian of [`residual`] as a banded operator in row-major node order.
pub fn jacobian_assemble(u: &ScalarField, spec: &ProblemSpec) -> BandMatrix {
    let grid = spec.grid;
    let nn = grid.n_nodes();
    let n = nn * nn;
    let bw = nn + 1;
    let mut jac = BandMatrix::new(n, bw, bw);
    let h = grid.spacing();
    let hh = h * h;
    let inv_hh = 1.0 / hh;
    let inv_cross = 1.0 / (4.0 * hh);
    let inv_2h = 1.0 / (2.0 * h);

    for (ix, iy) in grid.all_nodes() {
        let row = grid.idx(ix, iy);
        if !spec.is_equation_node(ix, iy) {
            jac.set(row, row, 1.0);
            continue;
        }
        let [u11, u12, u22] = hessian_at(u, ix, iy).expect("equation node");
        let g = gradient_at(u, ix, iy).expect("equation node");
        let s = 1.0 + g[0] * g[0] + g[1] * g[1];
        let fv = spec.f.get(ix, iy);
        // d/du(w) [u11 u22 - u12^2] = F11 du11 + F22 du22 - 2 u12 du12,
        // d/du(w) [-f (1+s)^2]      = -4 f (1+s) (u1 du1 + u2 du2).
        let f11 = u22;
        let f22 = u11;
        let grad_coeff = 4.0 * fv * s;

        jac.add(row, row, -2.0 * f11 * inv_hh - 2.0 * f22 * inv_hh);
        jac.add(row, grid.idx(ix + 1, iy), f11 * inv_hh - grad_coeff * g[0] * inv_2h);
        jac.add(row, grid.idx(ix - 1, iy), f11 * inv_hh + grad_coeff * g[0] * inv_2h);
        jac.add(row, grid.idx(ix, iy + 1), f22 * inv_hh - grad_coeff * g[1] * inv_2h);
        jac.add(row, grid.idx(ix, iy - 1), f22 * inv_hh + grad_coeff * g[1] * inv_2h);
        let cross = -2.0 * u12 * inv_cross;
        jac.add(row, grid.idx(ix + 1, iy + 1), cross);
        jac.add(row, grid.idx(ix - 1, iy - 1), cross);
        jac.add(row, grid.idx(ix + 1, iy - 1), -cross);
        jac.add(row, grid.idx(ix - 1, iy + 1), -cross);
    }
    jac
}

fn initial_guess(spec: &ProblemSpec, guess: InitialGuess) -> ScalarField {
    let grid = spec.grid;
    let mut u = match guess {
        InitialGuess::ExactPerturbed { amplitude, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let coeffs: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = grid.half_width();
            ScalarField::from_fn(grid, |x1, x2| {
                let b1 = 1.0 - (x1 / a) * (x1 / a);
                let b2 = 1.0 - (x2 / a) * (x2 / a);
                let bump = (b1 * b2) * (b1 * b2);
                let mix = coeffs[0]
                    + coeffs[1] * (2.1 * x1 + coeffs[2]).sin() * (1.7 * x2 + coeffs[3]).sin()
                    + coeffs[4] * (1.3 * (x1 + x2) + coeffs[5]).cos();
                spec.manufactured.u(x1, x2) + amplitude * bump * mix
            })
        }
        InitialGuess::QuadraticFit => quadratic_fit(spec),
    };
    // Rings carry the Dirichlet data exactly.
    for (ix, iy) in grid.all_nodes() {
        if !spec.is_equation_node(ix, iy) {
            u.set(ix, iy, spec.boundary.get(ix, iy));
        }
    }
    u
}

/// Least-squares fit of x^T A x / 2 + b.x + c to the two boundary rings.
fn quadratic_fit(spec: &ProblemSpec) -> ScalarField {
    let grid = spec.grid;
    let mut ata = [[0.0f64; 6]; 6];
    let mut atb = [0.0f64; 6];
    for (ix, iy) in grid.all_nodes() {
        if spec.is_equation_node(ix, iy) {
            continue;
        }
        let [x1, x2] = grid.node(ix, iy);
        let row = [0.5 * x1 * x1, x1 * x2, 0.5 * x2 * x2, x1, x2, 1.0];
        let v = spec.boundary.get(ix, iy);
        for i in 0..6 {
            atb[i] += row[i] * v;
            for j in 0..6 {
                ata[i][j] += row[i] * row[j];
            }
        }
    }
    // Dense 6x6 Gaussian elimination with partial pivoting.
    let mut m = ata;
    let mut x = atb;
    for col in 0..6 {
        let p = (col..6).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs())).unwrap();
        m.swap(col, p);
        x.swap(col, p);
        for i in (col + 1)..6 {
            let f = m[i][col] / m[col][col];
            for c in col..6 {
                m[i][c] -= f * m[col][c];
            }
            x[i] -= f * x[col];
        }
    }
    for col in (0..6).rev() {
        for c in (col + 1)..6 {
            x[col] -= m[col][c] * x[c];
        }
        x[col] /= m[col][col];
    }
    ScalarField::from_fn(grid, |x1, x2| {
        0.5 * x[0] * x1 * x1 + x[1] * x1 * x2 + 0.5 * x[2] * x2 * x2 + x[3] * x1 + x[4] * x2 + x[5]
    })
}

/// Damped Newton iteration. Steps are halved (at most `max_halvings` times)
/// until both the sup residual decreases and the convexity margin stays
/// above -1e-8.
pub fn newton_solve(spec: &ProblemSpec, config: &SolverConfig) -> Result<SolutionState, SolverError> {
    config.validate()?;
    let grid = spec.grid;
    let nn = grid.n_nodes();
    let mut u = initial_guess(spec, config.initial_guess);
    let mut res = residual(&u, spec);
    let mut res_norm = res.sup_norm();
    let mut log = Vec::new();

    for iteration in 0..=config.max_iterations {
        let margin = convexity_margin(&u);
        if res_norm <= config.residual_tolerance {
            return Ok(SolutionState {
                u,
                residual_norm: res_norm,
                iterations: iteration,
                convexity_margin: margin,
                converged: true,
                log,
            });
        }
        if iteration == config.max_iterations {
            break;
        }
        let jac = jacobian_assemble(&u, spec);
        let rhs: Vec<f64> = res.values().iter().map(|v| -v).collect();
        let delta = jac.solve(&rhs).map_err(|e| {
            let row = match &e {
                BandError::Singular { row, .. } => *row,
                _ => 0,
            };
            SolverError::LinearSolve { ix: row % nn, iy: row / nn, source: e }
        })?;

        let mut step = 1.0f64;
        let mut accepted = false;
        let mut halvings = 0u32;
        while halvings <= config.max_halvings {
            let mut trial = u.clone();
            for (idx, d) in delta.iter().enumerate() {
                let (ix, iy) = (idx % nn, idx / nn);
                trial.set(ix, iy, trial.get(ix, iy) + step * d);
            }
            let trial_res = residual(&trial, spec);
            let trial_norm = trial_res.sup_norm();
            let trial_margin = convexity_margin(&trial);
            if trial_norm < res_norm && trial_margin > -1e-8 {
                u = trial;
                res = trial_res;
                res_norm = trial_norm;
                log.push(IterationRecord {
                    iteration: iteration + 1,
                    residual_norm: res_norm,
                    halvings,
                    convexity_margin: trial_margin,
                });
                accepted = true;
                break;
            }
            step *= 0.5;
            halvings += 1;
        }
        if !accepted {
            return Err(SolverError::StepRejected { iteration: iteration + 1, residual: res_norm });
        }
    }
    Err(SolverError::MaxIterations {
        iterations: config.max_iterations,
        residual: res_norm,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct StudyRow {
    pub n_cells: usize,
    pub h: f64,
    pub sup_error: Option<f64>,
    pub order: Option<f64>,
    pub iterations: Option<usize>,
    pub residual: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceTable {
    pub manufactured: String,
    pub radius: f64,
    pub rows: Vec<StudyRow>,
    /// First level that failed to converge, if any; later levels are skipped.
    pub failed_level: Option<usize>,
}

/// Mesh-refinement study against the exact manufactured solution.
pub fn convergence_study(
    kind: Manufactured,
    radius: f64,
    levels: &[usize],
    config: &SolverConfig,
) -> Result<ConvergenceTable, SolverError> {
    if levels.len() < 2 {
        return Err(SolverError::TooFewLevels(levels.len()));
    }
    let mut rows: Vec<StudyRow> = Vec::new();
    let mut failed_level = None;
    let mut prev: Option<(f64, f64)> = None;
    for &n_cells in levels {
        let spec = ProblemSpec::from_manufactured(kind, radius, n_cells)?;
        let h = spec.grid.spacing();
        match newton_solve(&spec, config) {
            Ok(state) => {
                let err = state.u.max_abs_diff(&spec.exact_solution());
                let order = prev.map(|(h0, e0)| ((e0 / err).ln()) / (h0 / h).ln());
                rows.push(StudyRow {
                    n_cells,
                    h,
                    sup_error: Some(err),
                    order,
                    iterations: Some(state.iterations),
                    residual: Some(state.residual_norm),
                    failure: None,
                });
                prev = Some((h, err));
            }
            Err(e) => {
                rows.push(StudyRow {
                    n_cells,
                    h,
                    sup_error: None,
                    order: None,
                    iterations: None,
                    residual: None,
                    failure: Some(e.to_string()),
                });
                failed_level = Some(n_cells);
                break;
            }
        }
    }
    Ok(ConvergenceTable {
        manufactured: kind.name().to_string(),
        radius,
        rows,
        failed_level,
    })
}
