//! Uniform grids on [-a, a]^2, centered finite-difference calculus, and
//! manufactured convex solutions with their exact data.
//!
//! All derivative stencils are second order; derivative fields exist only on
//! nodes with the stated margin from the grid edge. Node coordinates are
//! computed as (index - n/2) * h so the origin node is exact.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eigensys::SymMatrix;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("n_cells must be an even integer >= 16, got {0}")]
    BadCellCount(usize),
    #[error("half width must be positive and finite, got {0}")]
    BadHalfWidth(f64),
    #[error("node ({ix},{iy}) outside the margin-{margin} interior")]
    OutOfDomain { ix: usize, iy: usize, margin: usize },
    #[error("field length {got} does not match grid with {want} nodes")]
    LengthMismatch { got: usize, want: usize },
    #[error("non-finite value at node ({ix},{iy})")]
    NonFinite { ix: usize, iy: usize },
    #[error("unknown manufactured solution `{0}`")]
    UnknownManufactured(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Uniform grid over the square [-a, a]^2 with an even number of cells per
/// axis, so the origin is a node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    half_width: f64,
    n_cells: usize,
    spacing: f64,
}

impl Grid2D {
    pub fn new(half_width: f64, n_cells: usize) -> Result<Self, FieldError> {
        if !(half_width.is_finite() && half_width > 0.0) {
            return Err(FieldError::BadHalfWidth(half_width));
        }
        if n_cells < 16 || !n_cells.is_multiple_of(2) {
            return Err(FieldError::BadCellCount(n_cells));
        }
        let spacing = 2.0 * half_width / n_cells as f64;
        Ok(Self { half_width, n_cells, spacing })
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    /// Nodes per axis.
    pub fn n_nodes(&self) -> usize {
        self.n_cells + 1
    }

    pub fn coord(&self, i: usize) -> f64 {
        (i as f64 - (self.n_cells / 2) as f64) * self.spacing
    }

    pub fn node(&self, ix: usize, iy: usize) -> [f64; 2] {
        [self.coord(ix), self.coord(iy)]
    }

    pub fn origin_index(&self) -> (usize, usize) {
        (self.n_cells / 2, self.n_cells / 2)
    }

    pub fn idx(&self, ix: usize, iy: usize) -> usize {
        iy * self.n_nodes() + ix
    }

    pub fn is_interior(&self, ix: usize, iy: usize, margin: usize) -> bool {
        let n = self.n_cells;
        ix >= margin && iy >= margin && ix + margin <= n && iy + margin <= n
    }

    /// All nodes with the given margin, in (ix, iy) lexicographic order.
    pub fn interior_nodes(&self, margin: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.n_cells;
        (margin..=n - margin)
            .flat_map(move |ix| (margin..=n - margin).map(move |iy| (ix, iy)))
    }

    pub fn all_nodes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.interior_nodes(0)
    }
}

/// Real values attached to every grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub grid: Grid2D,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: Grid2D) -> Self {
        Self { grid, values: vec![0.0; grid.n_nodes() * grid.n_nodes()] }
    }

    pub fn from_fn(grid: Grid2D, mut f: impl FnMut(f64, f64) -> f64) -> Self {
        let mut field = Self::zeros(grid);
        for (ix, iy) in grid.all_nodes() {
            let [x1, x2] = grid.node(ix, iy);
            field.values[grid.idx(ix, iy)] = f(x1, x2);
        }
        field
    }

    pub fn from_values(grid: Grid2D, values: Vec<f64>) -> Result<Self, FieldError> {
        let want = grid.n_nodes() * grid.n_nodes();
        if values.len() != want {
            return Err(FieldError::LengthMismatch { got: values.len(), want });
        }
        Ok(Self { grid, values })
    }

    pub fn get(&self, ix: usize, iy: usize) -> f64 {
        self.values[self.grid.idx(ix, iy)]
    }

    pub fn set(&mut self, ix: usize, iy: usize, v: f64) {
        let idx = self.grid.idx(ix, iy);
        self.values[idx] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn check_finite(&self) -> Result<(), FieldError> {
        for (ix, iy) in self.grid.all_nodes() {
            if !self.get(ix, iy).is_finite() {
                return Err(FieldError::NonFinite { ix, iy });
            }
        }
        Ok(())
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Sup norm over margin-`margin` interior nodes.
    pub fn sup_norm_interior(&self, margin: usize) -> f64 {
        self.grid
            .interior_nodes(margin)
            .fold(0.0f64, |m, (ix, iy)| m.max(self.get(ix, iy).abs()))
    }

    pub fn max_abs_diff(&self, other: &ScalarField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Centered gradient at an interior node (margin 1).
pub fn gradient_at(u: &ScalarField, ix: usize, iy: usize) -> Result<[f64; 2], FieldError> {
    if !u.grid.is_interior(ix, iy, 1) {
        return Err(FieldError::OutOfDomain { ix, iy, margin: 1 });
    }
    let h2 = 2.0 * u.grid.spacing();
    Ok([
        (u.get(ix + 1, iy) - u.get(ix - 1, iy)) / h2,
        (u.get(ix, iy + 1) - u.get(ix, iy - 1)) / h2,
    ])
}

/// Centered Hessian at an interior node: 3-point second differences on the
/// diagonal, the symmetric 4-corner cross stencil for u12.
pub fn hessian_at(u: &ScalarField, ix: usize, iy: usize) -> Result<[f64; 3], FieldError> {
    if !u.grid.is_interior(ix, iy, 1) {
        return Err(FieldError::OutOfDomain { ix, iy, margin: 1 });
    }
    let h = u.grid.spacing();
    let hh = h * h;
    let c = u.get(ix, iy);
    let u11 = (u.get(ix + 1, iy) - 2.0 * c + u.get(ix - 1, iy)) / hh;
    let u22 = (u.get(ix, iy + 1) - 2.0 * c + u.get(ix, iy - 1)) / hh;
    let u12 = (u.get(ix + 1, iy + 1) - u.get(ix + 1, iy - 1) - u.get(ix - 1, iy + 1)
        + u.get(ix - 1, iy - 1))
        / (4.0 * hh);
    Ok([u11, u12, u22])
}

/// Gradient field on the margin-1 interior.
#[derive(Debug, Clone)]
pub struct GradientField {
    pub grid: Grid2D,
    g1: Vec<f64>,
    g2: Vec<f64>,
}

impl GradientField {
    pub fn get(&self, ix: usize, iy: usize) -> Result<[f64; 2], FieldError> {
        if !self.grid.is_interior(ix, iy, 1) {
            return Err(FieldError::OutOfDomain { ix, iy, margin: 1 });
        }
        let i = self.grid.idx(ix, iy);
        Ok([self.g1[i], self.g2[i]])
    }

    /// Largest |grad u| over margin-1 nodes.
    pub fn sup_norm(&self) -> f64 {
        let mut m = 0.0f64;
        for (ix, iy) in self.grid.interior_nodes(1) {
            let i = self.grid.idx(ix, iy);
            m = m.max((self.g1[i] * self.g1[i] + self.g2[i] * self.g2[i]).sqrt());
        }
        m
    }
}

pub fn gradient_field(u: &ScalarField) -> GradientField {
    let grid = u.grid;
    let len = grid.n_nodes() * grid.n_nodes();
    let (mut g1, mut g2) = (vec![0.0; len], vec![0.0; len]);
    for (ix, iy) in grid.interior_nodes(1) {
        let g = gradient_at(u, ix, iy).expect("interior node");
        let i = grid.idx(ix, iy);
        g1[i] = g[0];
        g2[i] = g[1];
    }
    GradientField { grid, g1, g2 }
}

/// Hessian components on the margin-1 interior.
#[derive(Debug, Clone)]
pub struct HessianField {
    pub grid: Grid2D,
    h11: Vec<f64>,
    h12: Vec<f64>,
    h22: Vec<f64>,
}

impl HessianField {
    pub fn get(&self, ix: usize, iy: usize) -> Result<[f64; 3], FieldError> {
        if !self.grid.is_interior(ix, iy, 1) {
            return Err(FieldError::OutOfDomain { ix, iy, margin: 1 });
        }
        let i = self.grid.idx(ix, iy);
        Ok([self.h11[i], self.h12[i], self.h22[i]])
    }

    pub fn sym_matrix(&self, ix: usize, iy: usize) -> Result<SymMatrix, FieldError> {
        let [h11, h12, h22] = self.get(ix, iy)?;
        Ok(SymMatrix::from_fn(2, |p, q| match (p, q) {
            (0, 0) => h11,
            (1, 1) => h22,
            _ => h12,
        })
        .expect("2x2 hessian"))
    }

    /// Cofactor matrix of the Hessian as [F11, F12, F22] =
    /// [u22, -u12, u11]; diag(lambda2, lambda1) in the eigenframe.
    pub fn cofactor(&self, ix: usize, iy: usize) -> Result<[f64; 3], FieldError> {
        let [h11, h12, h22] = self.get(ix, iy)?;
        Ok([h22, -h12, h11])
    }

    /// Eigenvalues of the 2x2 Hessian, descending.
    pub fn eigenvalues(&self, ix: usize, iy: usize) -> Result<[f64; 2], FieldError> {
        let [h11, h12, h22] = self.get(ix, iy)?;
        let half_tr = 0.5 * (h11 + h22);
        let disc = (0.25 * (h11 - h22) * (h11 - h22) + h12 * h12).sqrt();
        Ok([half_tr + disc, half_tr - disc])
    }

    /// Centered difference of Hessian component `comp` (0 -> u11, 1 -> u12,
    /// 2 -> u22) along `axis`; needs margin 2.
    pub fn third_derivative(
        &self,
        comp: usize,
        axis: usize,
        ix: usize,
        iy: usize,
    ) -> Result<f64, FieldError> {
        if !self.grid.is_interior(ix, iy, 2) {
            return Err(FieldError::OutOfDomain { ix, iy, margin: 2 });
        }
        let data = match comp {
            0 => &self.h11,
            1 => &self.h12,
            _ => &self.h22,
        };
        let h2 = 2.0 * self.grid.spacing();
        let (ih, il) = match axis {
            0 => (self.grid.idx(ix + 1, iy), self.grid.idx(ix - 1, iy)),
            _ => (self.grid.idx(ix, iy + 1), self.grid.idx(ix, iy - 1)),
        };
        Ok((data[ih] - data[il]) / h2)
    }

    /// All six third derivatives u_pq,i at a margin-2 node, indexed
    /// [comp][axis] with comp in {u11, u12, u22}.
    pub fn third_derivatives(&self, ix: usize, iy: usize) -> Result<[[f64; 2]; 3], FieldError> {
        let mut out = [[0.0; 2]; 3];
        for comp in 0..3 {
            for axis in 0..2 {
                out[comp][axis] = self.third_derivative(comp, axis, ix, iy)?;
            }
        }
        Ok(out)
    }

    /// Fourth derivative u_pq,ij as the centered difference (along `axis_j`)
    /// of the third derivative along `axis_i`; needs margin 3.
    pub fn fourth_derivative(
        &self,
        comp: usize,
        axis_i: usize,
        axis_j: usize,
        ix: usize,
        iy: usize,
    ) -> Result<f64, FieldError> {
        if !self.grid.is_interior(ix, iy, 3) {
            return Err(FieldError::OutOfDomain { ix, iy, margin: 3 });
        }
        let h2 = 2.0 * self.grid.spacing();
        let shift = |ix: usize, iy: usize, axis: usize, step: isize| -> (usize, usize) {
            match axis {
                0 => ((ix as isize + step) as usize, iy),
                _ => (ix, (iy as isize + step) as usize),
            }
        };
        let (px, py) = shift(ix, iy, axis_j, 1);
        let (mx, my) = shift(ix, iy, axis_j, -1);
        let hi = self.third_derivative(comp, axis_i, px, py)?;
        let lo = self.third_derivative(comp, axis_i, mx, my)?;
        Ok((hi - lo) / h2)
    }
}

pub fn hessian_field(u: &ScalarField) -> HessianField {
    let grid = u.grid;
    let len = grid.n_nodes() * grid.n_nodes();
    let (mut h11, mut h12, mut h22) = (vec![0.0; len], vec![0.0; len], vec![0.0; len]);
    for (ix, iy) in grid.interior_nodes(1) {
        let hs = hessian_at(u, ix, iy).expect("interior node");
        let i = grid.idx(ix, iy);
        h11[i] = hs[0];
        h12[i] = hs[1];
        h22[i] = hs[2];
    }
    HessianField { grid, h11, h12, h22 }
}

/// Built-in manufactured convex solutions of
/// det D2u = f (1 + |Du|^2)^2 with analytic data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Manufactured {
    /// u = (2 x1^2 + x2^2)/2, Hessian diag(2,1).
    AnisoQuadratic,
    /// u = cosh x1 + x2^2/2, Hessian diag(cosh x1, 1).
    Cosh,
    /// u = |x|^2/2; both Hessian eigenvalues equal 1, kept for the
    /// degeneracy paths.
    RadialQuadratic,
}

impl Manufactured {
    pub fn parse(name: &str) -> Result<Self, FieldError> {
        match name {
            "aniso-quadratic" => Ok(Self::AnisoQuadratic),
            "cosh" => Ok(Self::Cosh),
            "radial-quadratic" => Ok(Self::RadialQuadratic),
            other => Err(FieldError::UnknownManufactured(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::AnisoQuadratic => "aniso-quadratic",
            Self::Cosh => "cosh",
            Self::RadialQuadratic => "radial-quadratic",
        }
    }

    pub fn u(&self, x1: f64, x2: f64) -> f64 {
        match self {
            Self::AnisoQuadratic => x1 * x1 + 0.5 * x2 * x2,
            Self::Cosh => x1.cosh() + 0.5 * x2 * x2,
            Self::RadialQuadratic => 0.5 * (x1 * x1 + x2 * x2),
        }
    }

    pub fn grad_u(&self, x1: f64, x2: f64) -> [f64; 2] {
        match self {
            Self::AnisoQuadratic => [2.0 * x1, x2],
            Self::Cosh => [x1.sinh(), x2],
            Self::RadialQuadratic => [x1, x2],
        }
    }

    /// Exact Hessian as [u11, u12, u22].
    pub fn hess_u(&self, x1: f64, _x2: f64) -> [f64; 3] {
        match self {
            Self::AnisoQuadratic => [2.0, 0.0, 1.0],
            Self::Cosh => [x1.cosh(), 0.0, 1.0],
            Self::RadialQuadratic => [1.0, 0.0, 1.0],
        }
    }

    pub fn det_hess(&self, x1: f64, _x2: f64) -> f64 {
        match self {
            Self::AnisoQuadratic => 2.0,
            Self::Cosh => x1.cosh(),
            Self::RadialQuadratic => 1.0,
        }
    }

    /// Induced curvature datum f = det D2u / (1 + |Du|^2)^2.
    pub fn f(&self, x1: f64, x2: f64) -> f64 {
        let g = self.grad_u(x1, x2);
        let s = 1.0 + g[0] * g[0] + g[1] * g[1];
        self.det_hess(x1, x2) / (s * s)
    }

    /// Analytic gradient of f.
    pub fn grad_f(&self, x1: f64, x2: f64) -> [f64; 2] {
        let g = self.grad_u(x1, x2);
        let s = 1.0 + g[0] * g[0] + g[1] * g[1];
        let hess = self.hess_u(x1, x2);
        let s1 = 2.0 * (g[0] * hess[0] + g[1] * hess[1]);
        let s2 = 2.0 * (g[0] * hess[1] + g[1] * hess[2]);
        let det = self.det_hess(x1, x2);
        let ddet1 = match self {
            Self::Cosh => x1.sinh(),
            _ => 0.0,
        };
        [
            ddet1 / (s * s) - 2.0 * det * s1 / (s * s * s),
            -2.0 * det * s2 / (s * s * s),
        ]
    }

    /// Analytic Hessian of f as [f11, f12, f22].
    pub fn hess_f(&self, x1: f64, x2: f64) -> [f64; 3] {
        let g = self.grad_u(x1, x2);
        let s = 1.0 + g[0] * g[0] + g[1] * g[1];
        let hess = self.hess_u(x1, x2);
        let s1 = 2.0 * (g[0] * hess[0] + g[1] * hess[1]);
        let s2 = 2.0 * (g[0] * hess[1] + g[1] * hess[2]);
        // Third derivatives of u vanish except u111 = sinh x1 for cosh.
        let u111 = match self {
            Self::Cosh => x1.sinh(),
            _ => 0.0,
        };
        let s11 = 2.0 * (hess[0] * hess[0] + g[0] * u111 + hess[1] * hess[1]);
        let s12 = 2.0 * (hess[0] * hess[1] + hess[1] * hess[2]);
        let s22 = 2.0 * (hess[1] * hess[1] + hess[2] * hess[2]);
        let det = self.det_hess(x1, x2);
        let (ddet1, ddet11) = match self {
            Self::Cosh => (x1.sinh(), x1.cosh()),
            _ => (0.0, 0.0),
        };
        let inv2 = 1.0 / (s * s);
        let inv3 = inv2 / s;
        let inv4 = inv3 / s;
        let f11 =
            ddet11 * inv2 - 4.0 * ddet1 * s1 * inv3 + det * (6.0 * s1 * s1 * inv4 - 2.0 * s11 * inv3);
        let f12 = -2.0 * ddet1 * s2 * inv3 + det * (6.0 * s1 * s2 * inv4 - 2.0 * s12 * inv3);
        let f22 = det * (6.0 * s2 * s2 * inv4 - 2.0 * s22 * inv3);
        [f11, f12, f22]
    }

    pub fn u_field(&self, grid: Grid2D) -> ScalarField {
        ScalarField::from_fn(grid, |x1, x2| self.u(x1, x2))
    }

    pub fn f_field(&self, grid: Grid2D) -> ScalarField {
        ScalarField::from_fn(grid, |x1, x2| self.f(x1, x2))
    }

    /// Smallest exact Hessian eigenvalue over the grid.
    pub fn convexity_certificate(&self, grid: Grid2D) -> f64 {
        let mut min = f64::INFINITY;
        for (ix, iy) in grid.all_nodes() {
            let [x1, x2] = grid.node(ix, iy);
            let [a, b, c] = self.hess_u(x1, x2);
            let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
            min = min.min(0.5 * (a + c) - disc);
        }
        min
    }

    /// Max over the grid of |det D2u - f (1 + |Du|^2)^2| with analytic
    /// closures; zero up to rounding by construction.
    pub fn consistency_residual(&self, grid: Grid2D) -> f64 {
        let mut worst = 0.0f64;
        for (ix, iy) in grid.all_nodes() {
            let [x1, x2] = grid.node(ix, iy);
            let g = self.grad_u(x1, x2);
            let s = 1.0 + g[0] * g[0] + g[1] * g[1];
            worst = worst.max((self.det_hess(x1, x2) - self.f(x1, x2) * s * s).abs());
        }
        worst
    }

    pub fn all() -> [Manufactured; 3] {
        [Self::AnisoQuadratic, Self::Cosh, Self::RadialQuadratic]
    }
}

/// A manufactured family together with an exact dilation: u(x) -> u(Lx)/L.
///
/// Dilation by L multiplies the Hessian by L, the induced f by L^2 pointwise
/// (at the mapped argument), grad f by L^3 and hess f by L^4, so it realizes
/// "scale f by s = L^2 with re-manufactured data" exactly on the shrunk
/// domain R/L.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FamilyInstance {
    pub kind: Manufactured,
    pub dilation: f64,
}

impl From<Manufactured> for FamilyInstance {
    fn from(kind: Manufactured) -> Self {
        Self { kind, dilation: 1.0 }
    }
}

impl FamilyInstance {
    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn u(&self, x1: f64, x2: f64) -> f64 {
        let l = self.dilation;
        self.kind.u(l * x1, l * x2) / l
    }

    pub fn grad_u(&self, x1: f64, x2: f64) -> [f64; 2] {
        let l = self.dilation;
        self.kind.grad_u(l * x1, l * x2)
    }

    pub fn hess_u(&self, x1: f64, x2: f64) -> [f64; 3] {
        let l = self.dilation;
        let h = self.kind.hess_u(l * x1, l * x2);
        [l * h[0], l * h[1], l * h[2]]
    }

    pub fn det_hess(&self, x1: f64, x2: f64) -> f64 {
        let l = self.dilation;
        l * l * self.kind.det_hess(l * x1, l * x2)
    }

    pub fn f(&self, x1: f64, x2: f64) -> f64 {
        let l = self.dilation;
        l * l * self.kind.f(l * x1, l * x2)
    }

    pub fn grad_f(&self, x1: f64, x2: f64) -> [f64; 2] {
        let l = self.dilation;
        let g = self.kind.grad_f(l * x1, l * x2);
        [l * l * l * g[0], l * l * l * g[1]]
    }

    pub fn hess_f(&self, x1: f64, x2: f64) -> [f64; 3] {
        let l = self.dilation;
        let h = self.kind.hess_f(l * x1, l * x2);
        let l4 = l * l * l * l;
        [l4 * h[0], l4 * h[1], l4 * h[2]]
    }

    pub fn u_field(&self, grid: Grid2D) -> ScalarField {
        ScalarField::from_fn(grid, |x1, x2| self.u(x1, x2))
    }

    pub fn f_field(&self, grid: Grid2D) -> ScalarField {
        ScalarField::from_fn(grid, |x1, x2| self.f(x1, x2))
    }
}

/// Outcome of the convex-gradient bound test
/// sup_{B_{R/2}} |Du| <= 2 osc_{B_R} u / R + C h.
#[derive(Debug, Clone, Serialize)]
pub struct GradientBoundReport {
    pub convex: bool,
    pub worst_node: Option<(usize, usize)>,
    pub worst_margin: f64,
    pub sup_grad_half_ball: f64,
    pub osc_ball: f64,
    pub slack_constant: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Checks the convex-function gradient bound on grid nodes. `radius` is R;
/// the slack constant is the measured sup of the Hessian spectral norm.
pub fn gradient_bound_check(u: &ScalarField, radius: f64) -> GradientBoundReport {
    let grid = u.grid;
    let hess = hessian_field(u);
    let mut worst = f64::INFINITY;
    let mut worst_node = None;
    let mut spec_norm = 0.0f64;
    for (ix, iy) in grid.interior_nodes(1) {
        let [l1, l2] = hess.eigenvalues(ix, iy).expect("interior");
        if l2 < worst {
            worst = l2;
            worst_node = Some((ix, iy));
        }
        spec_norm = spec_norm.max(l1.abs().max(l2.abs()));
    }
    let convex = worst >= -1e-10;

    let mut sup_grad = 0.0f64;
    let mut u_min = f64::INFINITY;
    let mut u_max = f64::NEG_INFINITY;
    let r_half_sq = 0.25 * radius * radius;
    let r_sq = radius * radius;
    for (ix, iy) in grid.all_nodes() {
        let [x1, x2] = grid.node(ix, iy);
        let d2 = x1 * x1 + x2 * x2;
        if d2 <= r_sq {
            let v = u.get(ix, iy);
            u_min = u_min.min(v);
            u_max = u_max.max(v);
        }
        if d2 <= r_half_sq && grid.is_interior(ix, iy, 1) {
            let g = gradient_at(u, ix, iy).expect("interior");
            sup_grad = sup_grad.max((g[0] * g[0] + g[1] * g[1]).sqrt());
        }
    }
    let osc = u_max - u_min;
    let rhs = 2.0 * osc / radius + spec_norm * grid.spacing();
    GradientBoundReport {
        convex,
        worst_node: if convex { None } else { worst_node },
        worst_margin: worst,
        sup_grad_half_ball: sup_grad,
        osc_ball: osc,
        slack_constant: spec_norm,
        rhs,
        holds: convex && sup_grad <= rhs,
    }
}

/// Grid metadata written next to every CSV dump.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridMeta {
    pub a: f64,
    pub n_cells: usize,
    pub h: f64,
}

impl From<Grid2D> for GridMeta {
    fn from(g: Grid2D) -> Self {
        Self { a: g.half_width(), n_cells: g.n_cells(), h: g.spacing() }
    }
}

/// Writes `<path>.csv` with (x1, x2, value) rows in (ix, iy) lexicographic
/// order and `<path>.json` with the grid metadata. Both writes are atomic.
pub fn write_field(field: &ScalarField, path_base: &Path) -> Result<(), FieldError> {
    let mut csv = String::from("x1,x2,value\n");
    for (ix, iy) in field.grid.all_nodes() {
        let [x1, x2] = field.grid.node(ix, iy);
        csv.push_str(&format!("{x1},{x2},{}\n", field.get(ix, iy)));
    }
    write_atomic(&path_base.with_extension("csv"), csv.as_bytes())?;
    let meta = GridMeta::from(field.grid);
    let json = serde_json::to_string_pretty(&meta).expect("grid meta serializes");
    write_atomic(&path_base.with_extension("json"), json.as_bytes())?;
    Ok(())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), FieldError> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("out")
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn grid_validation_and_origin() {
        assert!(matches!(Grid2D::new(1.0, 15), Err(FieldError::BadCellCount(15))));
        assert!(matches!(Grid2D::new(1.0, 14), Err(FieldError::BadCellCount(14))));
        assert!(matches!(Grid2D::new(0.0, 16), Err(FieldError::BadHalfWidth(_))));
        let g = Grid2D::new(1.0, 20).unwrap();
        let (ox, oy) = g.origin_index();
        assert_eq!(g.node(ox, oy), [0.0, 0.0]);
        assert_close(g.coord(0), -1.0, 0.0);
        assert_close(g.coord(20), 1.0, 0.0);
    }

    #[test]
    fn gradient_exact_on_linear_and_quadratic() {
        let g = Grid2D::new(1.0, 20).unwrap();
        let u = ScalarField::from_fn(g, |x1, _| x1);
        for (ix, iy) in g.interior_nodes(1) {
            let grad = gradient_at(&u, ix, iy).unwrap();
            assert_close(grad[0], 1.0, 1e-14);
            assert_close(grad[1], 0.0, 1e-14);
        }
        // h = 0.1 grid, node at (0.2, 0.1).
        let u = ScalarField::from_fn(g, |x1, x2| 0.5 * (x1 * x1 + x2 * x2));
        let (ix, iy) = (12, 11);
        let [x1, x2] = g.node(ix, iy);
        let grad = gradient_at(&u, ix, iy).unwrap();
        assert_close(grad[0], x1, 1e-14);
        assert_close(grad[1], x2, 1e-14);
    }

    #[test]
    fn gradient_second_order_on_cosh() {
        // Node (0.3, 0.2) exists on the h = 0.1 grid.
        let g = Grid2D::new(1.0, 20).unwrap();
        let u = ScalarField::from_fn(g, |x1, x2| x1.cosh() + 0.5 * x2 * x2);
        let (ix, iy) = (13, 12);
        let [x1, x2] = g.node(ix, iy);
        let grad = gradient_at(&u, ix, iy).unwrap();
        let h = g.spacing();
        // Centered error is h^2/6 u''' + O(h^4).
        let expected_err = h * h / 6.0 * x1.sinh();
        assert!((grad[0] - x1.sinh()).abs() <= 2.0 * expected_err);
        assert!((grad[0] - x1.sinh()).abs() >= 0.2 * expected_err);
        assert_close(grad[1], x2, 1e-13);
    }

    #[test]
    fn boundary_node_is_out_of_domain() {
        let g = Grid2D::new(1.0, 16).unwrap();
        let u = ScalarField::zeros(g);
        assert!(matches!(
            gradient_at(&u, 0, 5),
            Err(FieldError::OutOfDomain { margin: 1, .. })
        ));
        assert!(matches!(hessian_at(&u, 16, 3), Err(FieldError::OutOfDomain { .. })));
    }

    #[test]
    fn hessian_exact_on_quadratics() {
        let g = Grid2D::new(1.0, 16).unwrap();
        let u = ScalarField::from_fn(g, |x1, x2| x1 * x1 + 0.5 * x2 * x2);
        for (ix, iy) in g.interior_nodes(1) {
            let [h11, h12, h22] = hessian_at(&u, ix, iy).unwrap();
            assert_close(h11, 2.0, 1e-12);
            assert_close(h12, 0.0, 1e-12);
            assert_close(h22, 1.0, 1e-12);
        }
        let u = ScalarField::from_fn(g, |x1, x2| x1 * x2);
        for (ix, iy) in g.interior_nodes(1) {
            let [h11, h12, h22] = hessian_at(&u, ix, iy).unwrap();
            assert_close(h11, 0.0, 1e-12);
            assert_close(h12, 1.0, 1e-12);
            assert_close(h22, 0.0, 1e-12);
        }
    }

    #[test]
    fn hessian_second_order_on_cosh() {
        let g = Grid2D::new(1.0, 20).unwrap();
        let u = ScalarField::from_fn(g, |x1, x2| x1.cosh() + 0.5 * x2 * x2);
        let (ix, iy) = (13, 12);
        let [x1, _] = g.node(ix, iy);
        let [h11, h12, h22] = hessian_at(&u, ix, iy).unwrap();
        let h = g.spacing();
        let expected_err = h * h / 12.0 * x1.cosh();
        assert!((h11 - x1.cosh()).abs() <= 2.0 * expected_err);
        assert_close(h12, 0.0, 1e-12);
        assert_close(h22, 1.0, 1e-12);
    }

    #[test]
    fn stencil_order_halving() {
        // Max-norm errors drop by ~4 when h halves on a smooth field.
        let grad_errs: Vec<f64> = [32usize, 64]
            .iter()
            .map(|&n| {
                let g = Grid2D::new(1.0, n).unwrap();
                let u = ScalarField::from_fn(g, |x1, x2| x1.cosh() + 0.5 * x2 * x2);
                let mut worst = 0.0f64;
                for (ix, iy) in g.interior_nodes(1) {
                    let [x1, _] = g.node(ix, iy);
                    let grad = gradient_at(&u, ix, iy).unwrap();
                    worst = worst.max((grad[0] - x1.sinh()).abs());
                }
                worst
            })
            .collect();
        let ratio = grad_errs[0] / grad_errs[1];
        assert!((3.4..=4.6).contains(&ratio), "gradient ratio {ratio}");

        let hess_errs: Vec<f64> = [32usize, 64]
            .iter()
            .map(|&n| {
                let g = Grid2D::new(1.0, n).unwrap();
                let u = ScalarField::from_fn(g, |x1, x2| x1.cosh() + 0.5 * x2 * x2);
                let mut worst = 0.0f64;
                for (ix, iy) in g.interior_nodes(1) {
                    let [x1, _] = g.node(ix, iy);
                    let hs = hessian_at(&u, ix, iy).unwrap();
                    worst = worst.max((hs[0] - x1.cosh()).abs());
                }
                worst
            })
            .collect();
        let ratio = hess_errs[0] / hess_errs[1];
        assert!((3.4..=4.6).contains(&ratio), "hessian ratio {ratio}");
    }

    #[test]
    fn manufactured_values_and_consistency() {
        assert_close(Manufactured::AnisoQuadratic.f(0.0, 0.0), 2.0, 1e-15);
        assert_close(Manufactured::Cosh.f(0.0, 0.0), 1.0, 1e-15);
        assert_close(Manufactured::RadialQuadratic.f(1.0, 0.0), 0.25, 1e-15);
        let g = Grid2D::new(1.0, 32).unwrap();
        for m in Manufactured::all() {
            assert!(m.consistency_residual(g) < 1e-13, "{}", m.name());
            assert!(m.convexity_certificate(g) > 0.0);
            let f = m.f_field(g);
            assert!(f.values().iter().all(|&v| v > 0.0));
        }
        assert!(matches!(
            Manufactured::parse("no-such"),
            Err(FieldError::UnknownManufactured(_))
        ));
        assert_eq!(Manufactured::parse("cosh").unwrap(), Manufactured::Cosh);
    }

    #[test]
    fn manufactured_f_derivatives_match_finite_differences() {
        let eps = 1e-5;
        for m in Manufactured::all() {
            for &(x1, x2) in &[(0.3, 0.2), (-0.5, 0.7), (0.1, 0.0)] {
                let g = m.grad_f(x1, x2);
                let fd1 = (m.f(x1 + eps, x2) - m.f(x1 - eps, x2)) / (2.0 * eps);
                let fd2 = (m.f(x1, x2 + eps) - m.f(x1, x2 - eps)) / (2.0 * eps);
                assert_close(g[0], fd1, 1e-8);
                assert_close(g[1], fd2, 1e-8);
                let hs = m.hess_f(x1, x2);
                let fd11 =
                    (m.f(x1 + eps, x2) - 2.0 * m.f(x1, x2) + m.f(x1 - eps, x2)) / (eps * eps);
                let fd22 =
                    (m.f(x1, x2 + eps) - 2.0 * m.f(x1, x2) + m.f(x1, x2 - eps)) / (eps * eps);
                let fd12 = (m.f(x1 + eps, x2 + eps) - m.f(x1 + eps, x2 - eps)
                    - m.f(x1 - eps, x2 + eps)
                    + m.f(x1 - eps, x2 - eps))
                    / (4.0 * eps * eps);
                assert_close(hs[0], fd11, 1e-4);
                assert_close(hs[1], fd12, 1e-4);
                assert_close(hs[2], fd22, 1e-4);
            }
        }
    }

    #[test]
    fn gradient_bound_on_manufactured() {
        let g = Grid2D::new(1.0, 32).unwrap();
        let u = Manufactured::AnisoQuadratic.u_field(g);
        let rep = gradient_bound_check(&u, 1.0);
        assert!(rep.convex);
        assert!(rep.holds);
        // sup over B_{1/2} of |(2x1, x2)| is 1 at (+-1/2, 0).
        assert_close(rep.sup_grad_half_ball, 1.0, 1e-12);
        assert_close(rep.osc_ball, 1.0, 1e-12);

        let u = Manufactured::Cosh.u_field(g);
        let rep = gradient_bound_check(&u, 1.0);
        assert!(rep.convex && rep.holds);

        // Linear field: constant gradient, bound holds with room.
        let u = ScalarField::from_fn(g, |x1, x2| 0.4 * x1 - 0.3 * x2);
        let rep = gradient_bound_check(&u, 1.0);
        assert!(rep.convex && rep.holds);
        assert_close(rep.sup_grad_half_ball, 0.5, 1e-12);

        // Concave field flags non-convexity with a worst node.
        let u = ScalarField::from_fn(g, |x1, x2| -0.5 * (x1 * x1 + x2 * x2));
        let rep = gradient_bound_check(&u, 1.0);
        assert!(!rep.convex);
        assert!(rep.worst_node.is_some());
        assert!(rep.worst_margin < -0.9);
    }

    #[test]
    fn field_io_roundtrip_and_determinism() {
        let g = Grid2D::new(1.0, 16).unwrap();
        let u = Manufactured::Cosh.u_field(g);
        let dir = std::env::temp_dir().join("gclab-fieldcalc-io-test");
        std::fs::create_dir_all(&dir).unwrap();
        let base = dir.join("u");
        write_field(&u, &base).unwrap();
        let csv1 = std::fs::read(base.with_extension("csv")).unwrap();
        write_field(&u, &base).unwrap();
        let csv2 = std::fs::read(base.with_extension("csv")).unwrap();
        assert_eq!(csv1, csv2);
        let meta: GridMeta =
            serde_json::from_slice(&std::fs::read(base.with_extension("json")).unwrap()).unwrap();
        assert_eq!(meta.n_cells, 16);
        assert_close(meta.h, g.spacing(), 0.0);
        let text = String::from_utf8(csv1).unwrap();
        assert!(text.starts_with("x1,x2,value\n"));
        assert_eq!(text.lines().count(), 1 + 17 * 17);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn third_and_fourth_derivatives_on_cubic() {
        let g = Grid2D::new(1.0, 32).unwrap();
        // u = x1^3 x2: u11 = 6 x1 x2, u12 = 3 x1^2, u22 = 0.
        let u = ScalarField::from_fn(g, |x1, x2| x1 * x1 * x1 * x2);
        let hess = hessian_field(&u);
        let (ix, iy) = (20, 12);
        let [x1, x2] = g.node(ix, iy);
        let d3 = hess.third_derivatives(ix, iy).unwrap();
        assert_close(d3[0][0], 6.0 * x2, 1e-9); // u11,1
        assert_close(d3[0][1], 6.0 * x1, 1e-9); // u11,2
        assert_close(d3[1][0], 6.0 * x1, 1e-9); // u12,1
        assert_close(d3[1][1], 0.0, 1e-9);
        assert_close(d3[2][0], 0.0, 1e-9);
        // u_1111 = 0 and u_1112 = 6 for this cubic.
        let f4 = hess.fourth_derivative(0, 0, 0, ix, iy).unwrap();
        assert_close(f4, 0.0, 1e-8);
        let f4 = hess.fourth_derivative(0, 0, 1, ix, iy).unwrap();
        assert_close(f4, 6.0, 1e-8);
        // Mixed difference order commutes exactly.
        let a = hess.fourth_derivative(0, 1, 0, ix, iy).unwrap();
        let b = hess.fourth_derivative(0, 0, 1, ix, iy).unwrap();
        assert_close(a, b, 1e-12);
    }
}
