//! Full-order solvers for the benchmark PDEs.
//!
//! Three problems are supported, all parameterised by a two-component
//! parameter vector that enters only through the initial condition:
//!
//! * 1D inviscid Burgers on a periodic interval, first-order upwind in space,
//!   backward Euler in time.
//! * 2D viscous Burgers with homogeneous Dirichlet boundaries, backward
//!   differences for advection and central differences for diffusion,
//!   backward Euler in time.
//! * 2D radial advection with a divergence-free rotating velocity field,
//!   central differences in space and classical RK4 in time.
//!
//! Implicit steps are solved by Newton's method with the analytic sparse
//! Jacobian; the linear systems go through a sparse LU whose symbolic
//! analysis is computed once per trajectory.

use std::f64::consts::FRAC_PI_2;

use faer::prelude::*;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, Par};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lower: f64,
    pub upper: f64,
    pub points: usize,
}

impl Axis {
    pub fn new(lower: f64, upper: f64, points: usize) -> Result<Self> {
        if !(lower < upper) || points < 2 {
            return Err(Error::Domain(format!(
                "axis [{lower}, {upper}] with {points} points"
            )));
        }
        Ok(Self {
            lower,
            upper,
            points,
        })
    }

    pub fn spacing(&self) -> f64 {
        (self.upper - self.lower) / (self.points - 1) as f64
    }

    pub fn coord(&self, i: usize) -> f64 {
        if i + 1 == self.points {
            self.upper
        } else {
            self.lower + (self.upper - self.lower) * i as f64 / (self.points - 1) as f64
        }
    }
}

/// Uniform tensor-product spatial grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub axes: Vec<Axis>,
    /// Field components stored per node (2 for the vector Burgers problem).
    pub components: usize,
}

impl Grid {
    pub fn line(lower: f64, upper: f64, points: usize) -> Result<Self> {
        Ok(Self {
            axes: vec![Axis::new(lower, upper, points)?],
            components: 1,
        })
    }

    pub fn square(lower: f64, upper: f64, points: usize, components: usize) -> Result<Self> {
        let axis = Axis::new(lower, upper, points)?;
        Ok(Self {
            axes: vec![axis, axis],
            components,
        })
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.axes[axis].spacing()
    }

    pub fn n_nodes(&self) -> usize {
        self.axes.iter().map(|a| a.points).product()
    }

    /// Total degrees of freedom `N_u`.
    pub fn n_dof(&self) -> usize {
        self.n_nodes() * self.components
    }
}

/// Uniform time grid `t_n = n dt`, `n = 0..=steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub final_time: f64,
    pub dt: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(final_time: f64, steps: usize) -> Result<Self> {
        if !(final_time > 0.0) || steps == 0 {
            return Err(Error::Domain(format!(
                "time grid T={final_time} with {steps} steps"
            )));
        }
        Ok(Self {
            final_time,
            dt: final_time / steps as f64,
            steps,
        })
    }

    /// Builds a grid from a step size; `final_time / dt` must be an integer
    /// to 1e-12 relative.
    pub fn with_step(final_time: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::Domain(format!("time step {dt}")));
        }
        let steps = (final_time / dt).round() as usize;
        let grid = Self::new(final_time, steps)?;
        if ((steps as f64 * dt - final_time) / final_time).abs() > 1e-12 {
            return Err(Error::Domain(format!(
                "T={final_time} is not a whole number of steps dt={dt}"
            )));
        }
        Ok(grid)
    }

    pub fn t(&self, n: usize) -> f64 {
        n as f64 * self.dt
    }

    pub fn n_snapshots(&self) -> usize {
        self.steps + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProblemKind {
    Burgers1D,
    Burgers2D,
    RadialAdvection,
}

impl ProblemKind {
    /// Parameter box used in the benchmark studies.
    pub fn default_bounds(self) -> [[f64; 2]; 2] {
        match self {
            ProblemKind::Burgers1D | ProblemKind::Burgers2D => [[0.7, 0.9], [0.9, 1.1]],
            ProblemKind::RadialAdvection => [[1.5, 2.0], [2.0, 2.5]],
        }
    }

    pub fn param_names(self) -> [&'static str; 2] {
        match self {
            ProblemKind::Burgers1D | ProblemKind::Burgers2D => ["a", "w"],
            ProblemKind::RadialAdvection => ["w1", "w2"],
        }
    }

    pub fn is_implicit(self) -> bool {
        !matches!(self, ProblemKind::RadialAdvection)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FomProblem {
    pub kind: ProblemKind,
    /// Reynolds number, only used by `Burgers2D`.
    #[serde(default = "default_reynolds")]
    pub reynolds: f64,
    #[serde(default = "default_newton_tol")]
    pub newton_tol: f64,
    #[serde(default = "default_newton_max_iter")]
    pub newton_max_iter: usize,
    /// Admissible parameter box, one `[lower, upper]` per component.
    pub bounds: [[f64; 2]; 2],
}

fn default_reynolds() -> f64 {
    10_000.0
}
fn default_newton_tol() -> f64 {
    1e-10
}
fn default_newton_max_iter() -> usize {
    20
}

/// One parameter's snapshot matrix, `steps + 1` rows by `N_u` columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub mu: Vec<f64>,
    pub values: Array2<f64>,
    pub grid: Grid,
    pub time: TimeGrid,
}

impl Trajectory {
    pub fn n_dof(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

impl FomProblem {
    pub fn new(kind: ProblemKind) -> Self {
        Self {
            kind,
            reynolds: default_reynolds(),
            newton_tol: default_newton_tol(),
            newton_max_iter: default_newton_max_iter(),
            bounds: kind.default_bounds(),
        }
    }

    pub fn burgers1d() -> Self {
        Self::new(ProblemKind::Burgers1D)
    }

    pub fn burgers2d(reynolds: f64) -> Self {
        Self {
            reynolds,
            ..Self::new(ProblemKind::Burgers2D)
        }
    }

    pub fn radial_advection() -> Self {
        Self::new(ProblemKind::RadialAdvection)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.reynolds > 0.0) {
            return Err(Error::Config(format!("Reynolds number {}", self.reynolds)));
        }
        if !(self.newton_tol > 0.0) || self.newton_max_iter == 0 {
            return Err(Error::Config(format!(
                "Newton tolerance {} / max iterations {}",
                self.newton_tol, self.newton_max_iter
            )));
        }
        for b in &self.bounds {
            if !(b[0] < b[1]) {
                return Err(Error::Config(format!("parameter bounds {b:?}")));
            }
        }
        Ok(())
    }

    /// Checks that `grid` has the layout this problem expects.
    pub fn check_grid(&self, grid: &Grid) -> Result<()> {
        let (dim, comps) = match self.kind {
            ProblemKind::Burgers1D => (1, 1),
            ProblemKind::Burgers2D => (2, 2),
            ProblemKind::RadialAdvection => (2, 1),
        };
        if grid.dim() != dim {
            return Err(Error::shape("grid dimension", dim, grid.dim()));
        }
        if grid.components != comps {
            return Err(Error::shape("grid components", comps, grid.components));
        }
        if grid.axes.iter().any(|a| a.points < 3) {
            return Err(Error::Domain(
                "grid needs at least 3 points per axis".into(),
            ));
        }
        Ok(())
    }

    pub fn check_mu(&self, mu: &[f64]) -> Result<()> {
        if mu.len() != 2 {
            return Err(Error::shape("parameter vector", 2, mu.len()));
        }
        for (k, (&m, b)) in mu.iter().zip(&self.bounds).enumerate() {
            let slack = 1e-12 * (b[1] - b[0]).abs().max(1.0);
            if !m.is_finite() || m < b[0] - slack || m > b[1] + slack {
                return Err(Error::Domain(format!(
                    "parameter {} = {m} outside [{}, {}]",
                    self.kind.param_names()[k],
                    b[0],
                    b[1]
                )));
            }
        }
        Ok(())
    }

    /// Samples the parameterised initial condition on the grid nodes.
    pub fn initial_condition(&self, mu: &[f64], grid: &Grid) -> Result<Vec<f64>> {
        self.check_mu(mu)?;
        self.check_grid(grid)?;
        let mut u = vec![0.0; grid.n_dof()];
        match self.kind {
            ProblemKind::Burgers1D => {
                let (a, w) = (mu[0], mu[1]);
                let ax = &grid.axes[0];
                for (i, ui) in u.iter_mut().enumerate() {
                    let x = ax.coord(i);
                    *ui = a * (-x * x / (2.0 * w * w)).exp();
                }
            }
            ProblemKind::Burgers2D => {
                let (a, w) = (mu[0], mu[1]);
                let (nx, ny) = (grid.axes[0].points, grid.axes[1].points);
                let nodes = nx * ny;
                for i in 1..nx - 1 {
                    let x = grid.axes[0].coord(i);
                    for j in 1..ny - 1 {
                        let y = grid.axes[1].coord(j);
                        let v = a * (-(x * x + y * y) / (w * w)).exp();
                        u[i * ny + j] = v;
                        u[nodes + i * ny + j] = v;
                    }
                }
            }
            ProblemKind::RadialAdvection => {
                let (w1, w2) = (mu[0], mu[1]);
                let (nx, ny) = (grid.axes[0].points, grid.axes[1].points);
                for i in 1..nx - 1 {
                    let x1 = grid.axes[0].coord(i);
                    for j in 1..ny - 1 {
                        let x2 = grid.axes[1].coord(j);
                        u[i * ny + j] = (w1 * x1).sin() * (w2 * x2).sin();
                    }
                }
            }
        }
        Ok(u)
    }

    /// Evaluates the semi-discrete spatial operator `f(u)` into `out`.
    pub fn rhs(&self, u: &[f64], grid: &Grid, out: &mut [f64]) {
        match self.kind {
            ProblemKind::Burgers1D => burgers1d_rhs(u, grid, out),
            ProblemKind::Burgers2D => burgers2d_rhs(u, grid, 1.0 / self.reynolds, out),
            ProblemKind::RadialAdvection => advection_rhs(u, grid, out),
        }
    }

    /// Analytic Jacobian of [`FomProblem::rhs`] as `(row, col, value)`
    /// triplets. The pattern depends only on the grid.
    pub fn rhs_jacobian(&self, u: &[f64], grid: &Grid) -> Vec<(usize, usize, f64)> {
        match self.kind {
            ProblemKind::Burgers1D => burgers1d_jacobian(u, grid),
            ProblemKind::Burgers2D => burgers2d_jacobian(u, grid, 1.0 / self.reynolds),
            ProblemKind::RadialAdvection => advection_jacobian(grid),
        }
    }

    /// Backward-Euler residual `u_n - u_prev - dt f(u_n)`.
    ///
    /// The same form is used for every problem, including the explicitly
    /// integrated advection problem, so it can score any predicted trajectory.
    pub fn residual_step(
        &self,
        u_n: &[f64],
        u_prev: &[f64],
        dt: f64,
        grid: &Grid,
    ) -> Result<Vec<f64>> {
        let n = grid.n_dof();
        if u_n.len() != n {
            return Err(Error::shape("residual u_n", n, u_n.len()));
        }
        if u_prev.len() != n {
            return Err(Error::shape("residual u_prev", n, u_prev.len()));
        }
        let mut r = vec![0.0; n];
        self.rhs(u_n, grid, &mut r);
        for ((ri, &a), &b) in r.iter_mut().zip(u_n).zip(u_prev) {
            *ri = a - b - dt * *ri;
        }
        Ok(r)
    }

    /// Solves the full-order model from the initial condition at `mu`.
    pub fn solve(&self, mu: &[f64], grid: &Grid, time: &TimeGrid) -> Result<Trajectory> {
        let u0 = self.initial_condition(mu, grid)?;
        self.solve_from(mu, u0, grid, time)
    }

    /// Like [`FomProblem::solve`] but starting from an arbitrary field.
    pub fn solve_from(
        &self,
        mu: &[f64],
        u0: Vec<f64>,
        grid: &Grid,
        time: &TimeGrid,
    ) -> Result<Trajectory> {
        self.validate()?;
        self.check_grid(grid)?;
        let n = grid.n_dof();
        if u0.len() != n {
            return Err(Error::shape("initial field", n, u0.len()));
        }
        let mut values = Array2::zeros((time.n_snapshots(), n));
        values
            .row_mut(0)
            .assign(&ndarray::ArrayView1::from(&u0[..]));
        match self.kind {
            ProblemKind::RadialAdvection => self.integrate_rk4(&mut values, grid, time),
            _ => self.integrate_backward_euler(mu, &mut values, grid, time)?,
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite FOM state for mu={mu:?}")));
        }
        Ok(Trajectory {
            mu: mu.to_vec(),
            values,
            grid: grid.clone(),
            time: *time,
        })
    }

    fn integrate_rk4(&self, values: &mut Array2<f64>, grid: &Grid, time: &TimeGrid) {
        let n = grid.n_dof();
        let dt = time.dt;
        let mut u = values.row(0).to_vec();
        let (mut k1, mut k2, mut k3, mut k4) =
            (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        let mut stage = vec![0.0; n];
        for step in 1..=time.steps {
            self.rhs(&u, grid, &mut k1);
            axpy_into(&mut stage, &u, 0.5 * dt, &k1);
            self.rhs(&stage, grid, &mut k2);
            axpy_into(&mut stage, &u, 0.5 * dt, &k2);
            self.rhs(&stage, grid, &mut k3);
            axpy_into(&mut stage, &u, dt, &k3);
            self.rhs(&stage, grid, &mut k4);
            for i in 0..n {
                u[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            values
                .row_mut(step)
                .assign(&ndarray::ArrayView1::from(&u[..]));
        }
    }

    fn integrate_backward_euler(
        &self,
        mu: &[f64],
        values: &mut Array2<f64>,
        grid: &Grid,
        time: &TimeGrid,
    ) -> Result<()> {
        let n = grid.n_dof();
        let dt = time.dt;
        let mut symbolic: Option<SymbolicLu<usize>> = None;
        let mut u_prev = values.row(0).to_vec();
        let mut rhs = vec![0.0; n];
        let mut rhs_col = Mat::<f64>::zeros(n, 1);
        for step in 1..=time.steps {
            // Newton, starting from the previous state.
            let mut u = u_prev.clone();
            let mut iterations = 0;
            loop {
                self.rhs(&u, grid, &mut rhs);
                let mut norm2 = 0.0;
                for i in 0..n {
                    let r = u[i] - u_prev[i] - dt * rhs[i];
                    rhs_col[(i, 0)] = -r;
                    norm2 += r * r;
                }
                let norm = norm2.sqrt();
                if norm <= self.newton_tol {
                    break;
                }
                if iterations == self.newton_max_iter || !norm.is_finite() {
                    return Err(Error::Solver {
                        step,
                        mu: mu.to_vec(),
                        residual: norm,
                        iterations,
                    });
                }
                let matrix = self.newton_matrix(&u, grid, dt, step)?;
                let sym = match &symbolic {
                    Some(s) => s.clone(),
                    None => {
                        let s = SymbolicLu::try_new(matrix.symbolic()).map_err(|e| {
                            Error::LinearSolve {
                                step,
                                reason: format!("{e:?}"),
                            }
                        })?;
                        symbolic = Some(s.clone());
                        s
                    }
                };
                let lu = Lu::try_new_with_symbolic(sym, matrix.as_ref()).map_err(|e| {
                    Error::LinearSolve {
                        step,
                        reason: format!("{e:?}"),
                    }
                })?;
                lu.solve_in_place(rhs_col.as_mut());
                for i in 0..n {
                    u[i] += rhs_col[(i, 0)];
                }
                iterations += 1;
            }
            values
                .row_mut(step)
                .assign(&ndarray::ArrayView1::from(&u[..]));
            u_prev = u;
        }
        Ok(())
    }

    /// Assembles `I - dt * df/du` in compressed-column form.
    fn newton_matrix(
        &self,
        u: &[f64],
        grid: &Grid,
        dt: f64,
        step: usize,
    ) -> Result<SparseColMat<usize, f64>> {
        let n = grid.n_dof();
        let jac = self.rhs_jacobian(u, grid);
        let mut triplets = Vec::with_capacity(jac.len() + n);
        let mut has_diag = vec![false; n];
        for (r, c, v) in jac {
            let mut val = -dt * v;
            if r == c {
                val += 1.0;
                has_diag[r] = true;
            }
            triplets.push(Triplet::new(r, c, val));
        }
        for (i, present) in has_diag.into_iter().enumerate() {
            if !present {
                triplets.push(Triplet::new(i, i, 1.0));
            }
        }
        faer::set_global_parallelism(Par::Seq);
        SparseColMat::try_new_from_triplets(n, n, &triplets).map_err(|e| Error::LinearSolve {
            step,
            reason: format!("{e:?}"),
        })
    }
}

fn axpy_into(out: &mut [f64], x: &[f64], a: f64, y: &[f64]) {
    for ((o, &xi), &yi) in out.iter_mut().zip(x).zip(y) {
        *o = xi + a * yi;
    }
}

/// Left neighbour on the periodic line. The last node duplicates the first,
/// so node 0 wraps to `n - 2`.
fn periodic_left(j: usize, n: usize) -> usize {
    if j == 0 {
        n - 2
    } else {
        j - 1
    }
}

fn burgers1d_rhs(u: &[f64], grid: &Grid, out: &mut [f64]) {
    let n = u.len();
    let dx = grid.spacing(0);
    for j in 0..n {
        let l = periodic_left(j, n);
        out[j] = -u[j] * (u[j] - u[l]) / dx;
    }
}

fn burgers1d_jacobian(u: &[f64], grid: &Grid) -> Vec<(usize, usize, f64)> {
    let n = u.len();
    let dx = grid.spacing(0);
    let mut t = Vec::with_capacity(2 * n);
    for j in 0..n {
        let l = periodic_left(j, n);
        t.push((j, j, -(2.0 * u[j] - u[l]) / dx));
        t.push((j, l, u[j] / dx));
    }
    t
}

fn burgers2d_rhs(u: &[f64], grid: &Grid, nu: f64, out: &mut [f64]) {
    let (nx, ny) = (grid.axes[0].points, grid.axes[1].points);
    let (dx, dy) = (grid.spacing(0), grid.spacing(1));
    let nodes = nx * ny;
    let (uf, vf) = u.split_at(nodes);
    out.iter_mut().for_each(|o| *o = 0.0);
    let (ou, ov) = out.split_at_mut(nodes);
    for i in 1..nx - 1 {
        for j in 1..ny - 1 {
            let p = i * ny + j;
            let (w, s, e, nn) = (p - ny, p - 1, p + ny, p + 1);
            let (a, b) = (uf[p], vf[p]);
            let lap_u =
                (uf[e] - 2.0 * a + uf[w]) / (dx * dx) + (uf[nn] - 2.0 * a + uf[s]) / (dy * dy);
            let lap_v =
                (vf[e] - 2.0 * b + vf[w]) / (dx * dx) + (vf[nn] - 2.0 * b + vf[s]) / (dy * dy);
            ou[p] = -a * (a - uf[w]) / dx - b * (a - uf[s]) / dy + nu * lap_u;
            ov[p] = -a * (b - vf[w]) / dx - b * (b - vf[s]) / dy + nu * lap_v;
        }
    }
}

fn burgers2d_jacobian(u: &[f64], grid: &Grid, nu: f64) -> Vec<(usize, usize, f64)> {
    let (nx, ny) = (grid.axes[0].points, grid.axes[1].points);
    let (dx, dy) = (grid.spacing(0), grid.spacing(1));
    let nodes = nx * ny;
    let (uf, vf) = u.split_at(nodes);
    let (cx, cy) = (nu / (dx * dx), nu / (dy * dy));
    let mut t = Vec::with_capacity(12 * nodes);
    for i in 1..nx - 1 {
        for j in 1..ny - 1 {
            let p = i * ny + j;
            let (w, s, e, nn) = (p - ny, p - 1, p + ny, p + 1);
            let (a, b) = (uf[p], vf[p]);
            // d f_u
            t.push((p, p, -(2.0 * a - uf[w]) / dx - b / dy - 2.0 * cx - 2.0 * cy));
            t.push((p, w, a / dx + cx));
            t.push((p, s, b / dy + cy));
            t.push((p, e, cx));
            t.push((p, nn, cy));
            t.push((p, nodes + p, -(a - uf[s]) / dy));
            // d f_v
            let q = nodes + p;
            t.push((q, q, -a / dx - (2.0 * b - vf[s]) / dy - 2.0 * cx - 2.0 * cy));
            t.push((q, nodes + w, a / dx + cx));
            t.push((q, nodes + s, b / dy + cy));
            t.push((q, nodes + e, cx));
            t.push((q, nodes + nn, cy));
            t.push((q, p, -(b - vf[w]) / dx));
        }
    }
    t
}

/// Velocity of the rotating flow, `(pi/2) d (x2, -x1)` with
/// `d = (1 - x1^2)^2 (1 - x2^2)^2`.
pub fn advection_velocity(x1: f64, x2: f64) -> (f64, f64) {
    let d = (1.0 - x1 * x1).powi(2) * (1.0 - x2 * x2).powi(2);
    (FRAC_PI_2 * d * x2, -FRAC_PI_2 * d * x1)
}

fn advection_rhs(u: &[f64], grid: &Grid, out: &mut [f64]) {
    let (nx, ny) = (grid.axes[0].points, grid.axes[1].points);
    let (dx, dy) = (grid.spacing(0), grid.spacing(1));
    out.iter_mut().for_each(|o| *o = 0.0);
    for i in 1..nx - 1 {
        let x1 = grid.axes[0].coord(i);
        for j in 1..ny - 1 {
            let x2 = grid.axes[1].coord(j);
            let (v1, v2) = advection_velocity(x1, x2);
            let p = i * ny + j;
            out[p] = -(v1 * (u[p + ny] - u[p - ny]) / (2.0 * dx)
                + v2 * (u[p + 1] - u[p - 1]) / (2.0 * dy));
        }
    }
}

fn advection_jacobian(grid: &Grid) -> Vec<(usize, usize, f64)> {
    let (nx, ny) = (grid.axes[0].points, grid.axes[1].points);
    let (dx, dy) = (grid.spacing(0), grid.spacing(1));
    let mut t = Vec::with_capacity(4 * nx * ny);
    for i in 1..nx - 1 {
        let x1 = grid.axes[0].coord(i);
        for j in 1..ny - 1 {
            let x2 = grid.axes[1].coord(j);
            let (v1, v2) = advection_velocity(x1, x2);
            let p = i * ny + j;
            t.push((p, p + ny, -v1 / (2.0 * dx)));
            t.push((p, p - ny, v1 / (2.0 * dx)));
            t.push((p, p + 1, -v2 / (2.0 * dy)));
            t.push((p, p - 1, v2 / (2.0 * dy)));
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn fd_jacobian(problem: &FomProblem, u: &[f64], grid: &Grid) -> Array2<f64> {
        let n = u.len();
        let mut jac = Array2::zeros((n, n));
        let h = 1e-6;
        let (mut fp, mut fm) = (vec![0.0; n], vec![0.0; n]);
        let mut x = u.to_vec();
        for c in 0..n {
            x[c] = u[c] + h;
            problem.rhs(&x, grid, &mut fp);
            x[c] = u[c] - h;
            problem.rhs(&x, grid, &mut fm);
            x[c] = u[c];
            for r in 0..n {
                jac[(r, c)] = (fp[r] - fm[r]) / (2.0 * h);
            }
        }
        jac
    }

    fn dense(triplets: &[(usize, usize, f64)], n: usize) -> Array2<f64> {
        let mut m = Array2::zeros((n, n));
        for &(r, c, v) in triplets {
            m[(r, c)] += v;
        }
        m
    }

    #[test]
    fn burgers1d_ic_values() {
        let p = FomProblem::burgers1d();
        let grid = Grid::line(-3.0, 3.0, 7).unwrap(); // nodes at -3,-2,...,3
        let u = p.initial_condition(&[0.7, 0.9], &grid).unwrap();
        assert_eq!(u[3], 0.7);
        let u = p.initial_condition(&[0.8, 1.0], &grid).unwrap();
        assert_abs_diff_eq!(u[4], 0.485_224_527_770_540_4, epsilon = 1e-12);
        assert_abs_diff_eq!(u[4], 0.8 * (-0.5f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn advection_ic_is_zero_at_origin_and_boundary() {
        let p = FomProblem::radial_advection();
        let grid = Grid::square(-1.0, 1.0, 9, 1).unwrap();
        let u = p.initial_condition(&[1.7, 2.3], &grid).unwrap();
        assert_eq!(u[4 * 9 + 4], 0.0);
        for &c in &[0, 8, 72, 80] {
            assert_eq!(u[c], 0.0);
        }
    }

    #[test]
    fn mu_outside_domain_is_rejected() {
        let p = FomProblem::burgers1d();
        let grid = Grid::line(-3.0, 3.0, 11).unwrap();
        assert!(matches!(
            p.initial_condition(&[0.95, 1.0], &grid),
            Err(Error::Domain(_))
        ));
        assert!(p.initial_condition(&[0.8], &grid).is_err());
    }

    #[test]
    fn analytic_jacobians_match_finite_differences() {
        let g1 = Grid::line(-3.0, 3.0, 13).unwrap();
        let p1 = FomProblem::burgers1d();
        let u1 = p1.initial_condition(&[0.8, 1.0], &g1).unwrap();
        let diff = &dense(&p1.rhs_jacobian(&u1, &g1), 13) - &fd_jacobian(&p1, &u1, &g1);
        assert!(diff.iter().all(|d| d.abs() < 1e-6));

        let g2 = Grid::square(-3.0, 3.0, 7, 2).unwrap();
        let p2 = FomProblem::burgers2d(50.0);
        let mut u2 = p2.initial_condition(&[0.8, 1.0], &g2).unwrap();
        // break the u == v symmetry so cross terms are exercised
        for (k, v) in u2.iter_mut().enumerate().skip(49) {
            *v *= 0.5 + 0.01 * (k % 7) as f64;
        }
        let n2 = g2.n_dof();
        let diff = &dense(&p2.rhs_jacobian(&u2, &g2), n2) - &fd_jacobian(&p2, &u2, &g2);
        assert!(diff.iter().all(|d| d.abs() < 1e-6));

        let g3 = Grid::square(-1.0, 1.0, 8, 1).unwrap();
        let p3 = FomProblem::radial_advection();
        let u3 = p3.initial_condition(&[1.6, 2.1], &g3).unwrap();
        let diff = &dense(&p3.rhs_jacobian(&u3, &g3), 64) - &fd_jacobian(&p3, &u3, &g3);
        assert!(diff.iter().all(|d| d.abs() < 1e-6));
    }

    #[test]
    fn residual_of_zero_fields_is_zero() {
        for (p, g) in [
            (FomProblem::burgers1d(), Grid::line(-3.0, 3.0, 11).unwrap()),
            (
                FomProblem::burgers2d(100.0),
                Grid::square(-3.0, 3.0, 6, 2).unwrap(),
            ),
            (
                FomProblem::radial_advection(),
                Grid::square(-1.0, 1.0, 6, 1).unwrap(),
            ),
        ] {
            let z = vec![0.0; g.n_dof()];
            let r = p.residual_step(&z, &z, 0.01, &g).unwrap();
            assert!(r.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn residual_matches_hand_assembled_upwind_operator() {
        let p = FomProblem::burgers1d();
        let g = Grid::line(-3.0, 3.0, 11).unwrap();
        let dt = 0.01;
        let u = p.initial_condition(&[0.7, 0.9], &g).unwrap();
        let r = p.residual_step(&u, &u, dt, &g).unwrap();
        let dx = 0.6;
        // node 0 (x = -3) wraps to node 9 (x = 2.4); node 10 duplicates node 0
        let expected: Vec<f64> = (0..11)
            .map(|j| {
                let left = if j == 0 { u[9] } else { u[j - 1] };
                dt * u[j] * (u[j] - left) / dx
            })
            .collect();
        for (a, b) in r.iter().zip(&expected) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-15);
        }
    }

    #[test]
    fn residual_shape_errors() {
        let p = FomProblem::burgers1d();
        let g = Grid::line(-3.0, 3.0, 11).unwrap();
        assert!(matches!(
            p.residual_step(&[0.0; 10], &[0.0; 11], 0.1, &g),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn advection_residual_is_linear() {
        let p = FomProblem::radial_advection();
        let g = Grid::square(-1.0, 1.0, 10, 1).unwrap();
        let a = p.initial_condition(&[1.5, 2.0], &g).unwrap();
        let b = p.initial_condition(&[2.0, 2.5], &g).unwrap();
        let r = p.residual_step(&a, &b, 0.01, &g).unwrap();
        let alpha = -1.7;
        let sa: Vec<f64> = a.iter().map(|v| alpha * v).collect();
        let sb: Vec<f64> = b.iter().map(|v| alpha * v).collect();
        let rs = p.residual_step(&sa, &sb, 0.01, &g).unwrap();
        for (x, y) in r.iter().zip(&rs) {
            assert_abs_diff_eq!(alpha * x, *y, epsilon = 1e-13);
        }
    }

    #[test]
    fn constant_field_is_steady() {
        let p = FomProblem::burgers1d();
        let g = Grid::line(-3.0, 3.0, 51).unwrap();
        let t = TimeGrid::new(0.2, 20).unwrap();
        let traj = p.solve_from(&[0.8, 1.0], vec![0.37; 51], &g, &t).unwrap();
        assert!(traj.values.iter().all(|&v| v == 0.37));
    }

    #[test]
    fn burgers_steps_satisfy_newton_tolerance() {
        let p = FomProblem::burgers1d();
        let g = Grid::line(-3.0, 3.0, 101).unwrap();
        let t = TimeGrid::new(1.0, 50).unwrap();
        let traj = p.solve(&[0.9, 0.9], &g, &t).unwrap();
        for n in 1..=t.steps {
            let r = p
                .residual_step(
                    traj.values.row(n).as_slice().unwrap(),
                    traj.values.row(n - 1).as_slice().unwrap(),
                    t.dt,
                    &g,
                )
                .unwrap();
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm <= p.newton_tol, "step {n}: {norm}");
        }
        // periodic duplicate node tracks node 0
        for row in traj.values.rows() {
            assert_abs_diff_eq!(row[0], row[100], epsilon = 1e-12);
        }
    }

    #[test]
    fn burgers1d_sum_drifts_slowly() {
        let p = FomProblem::burgers1d();
        let g = Grid::line(-3.0, 3.0, 201).unwrap();
        let t = TimeGrid::new(1.0, 100).unwrap();
        let traj = p.solve(&[0.8, 1.0], &g, &t).unwrap();
        let (dt, dx) = (t.dt, g.spacing(0));
        for n in 1..=t.steps {
            let s1: f64 = traj.values.row(n).iter().take(200).sum::<f64>() * dx;
            let s0: f64 = traj.values.row(n - 1).iter().take(200).sum::<f64>() * dx;
            assert!((s1 - s0).abs() <= 10.0 * dt * dx, "step {n}: {}", s1 - s0);
        }
    }

    #[test]
    fn burgers2d_converges_and_keeps_boundary() {
        let p = FomProblem::burgers2d(10_000.0);
        let g = Grid::square(-3.0, 3.0, 16, 2).unwrap();
        let t = TimeGrid::new(0.2, 10).unwrap();
        let traj = p.solve(&[0.8, 1.0], &g, &t).unwrap();
        let last = traj.values.row(10);
        for k in 0..16 {
            assert_eq!(last[k], 0.0);
            assert_eq!(last[256 + 15 * 16 + k], 0.0);
        }
        for n in 1..=t.steps {
            let r = p
                .residual_step(
                    traj.values.row(n).as_slice().unwrap(),
                    traj.values.row(n - 1).as_slice().unwrap(),
                    t.dt,
                    &g,
                )
                .unwrap();
            assert!(r.iter().map(|v| v * v).sum::<f64>().sqrt() <= p.newton_tol);
        }
    }

    #[test]
    fn newton_failure_names_the_step() {
        let p = FomProblem {
            newton_max_iter: 1,
            newton_tol: 1e-300,
            ..FomProblem::burgers1d()
        };
        let g = Grid::line(-3.0, 3.0, 21).unwrap();
        let t = TimeGrid::new(0.1, 5).unwrap();
        match p.solve(&[0.8, 1.0], &g, &t) {
            Err(Error::Solver { step, .. }) => assert_eq!(step, 1),
            other => panic!("expected solver error, got {other:?}"),
        }
    }

    #[test]
    fn advection_corners_stay_zero() {
        let p = FomProblem::radial_advection();
        let g = Grid::square(-1.0, 1.0, 12, 1).unwrap();
        let t = TimeGrid::new(0.5, 25).unwrap();
        let traj = p.solve(&[1.8, 2.2], &g, &t).unwrap();
        for row in traj.values.rows() {
            for &c in &[0, 11, 132, 143] {
                assert_eq!(row[c], 0.0);
            }
        }
    }

    #[test]
    fn time_grid_rejects_fractional_steps() {
        assert!(TimeGrid::with_step(1.0, 0.3).is_err());
        let t = TimeGrid::with_step(1.0, 1e-3).unwrap();
        assert_eq!(t.steps, 1000);
    }
}
