//! Monotone finite-volume solver for `d_t rho = sum_i d_i^2 A_ii(rho)` on
//! `[-1, 1] x T^(d-1)` with Dirichlet data on the two faces.
//!
//! The Dirichlet data always sit at `u_1 = -1` and `u_1 = 1`; the torus has
//! unit length. In the [`Layout::Cell`] layout the `M_1` unknowns are cell
//! averages of width `du = 2 / M_1` and the data sit half a cell outside the
//! end cells. In the [`Layout::Node`] layout the unknowns are point values at
//! spacing `du = 2 / (M_1 + 1)` and the data sit one spacing outside, which
//! matches lattice sites with the reservoirs acting at `x_1 = +-N`.
//! With distance `theta du` to the data, the end flux is
//! `(A(rho_0) - A(b)) / (theta du)`; an `A`-linear profile is then an exact
//! discrete steady state, and each update is nondecreasing in its inputs under
//! `dt ((1 + 1/theta) max D_11 / du^2 + sum_t 2 max D_tt / dv^2) <= 1`.
//! Off-diagonal entries of `D` are not used.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionTensorTable;
use crate::error::{Error, Result};
use crate::lattice::Face;
use crate::thermo::BoundaryData;

/// Behavioural revision recorded in run metadata.
pub const MODULE_VERSION: &str = "1.0.0";

/// Relative off-diagonal size above which dropping it is reported.
pub const OFF_DIAGONAL_WARNING: f64 = 0.05;

/// Default number of uniform mesh intervals for the antiderivative.
pub const DEFAULT_MESH: usize = 4096;

/// Placement of the unknowns relative to the Dirichlet data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// Cell averages; data half a cell outside the end cells.
    #[default]
    Cell,
    /// Point values; data one spacing outside the end nodes.
    Node,
}

/// Cells of the macroscopic domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct MacroGrid {
    pub dim: usize,
    /// `M_1`, unknowns along `[-1, 1]`.
    pub axial: usize,
    /// `M_t`, unknowns along each unit-length transverse circle.
    pub transverse: usize,
    pub layout: Layout,
}

impl MacroGrid {
    pub fn new(dim: usize, axial: usize, transverse: usize) -> Result<Self> {
        Self::with_layout(dim, axial, transverse, Layout::Cell)
    }

    pub fn with_layout(dim: usize, axial: usize, transverse: usize, layout: Layout) -> Result<Self> {
        if dim == 0 || axial == 0 || transverse == 0 {
            return Err(Error::domain(format!("grid needs positive sizes, got d={dim} M1={axial} Mt={transverse}")));
        }
        Ok(MacroGrid {
            dim,
            axial,
            transverse,
            layout,
        })
    }

    /// Distance from the end unknowns to the data, in units of [`axial_step`](Self::axial_step).
    pub fn boundary_offset(&self) -> f64 {
        match self.layout {
            Layout::Cell => 0.5,
            Layout::Node => 1.0,
        }
    }

    pub fn line(axial: usize) -> Result<Self> {
        Self::new(1, axial, 1)
    }

    pub fn slice_len(&self) -> usize {
        self.transverse.pow(self.dim as u32 - 1)
    }

    pub fn cell_count(&self) -> usize {
        self.axial * self.slice_len()
    }

    pub fn axial_step(&self) -> f64 {
        match self.layout {
            Layout::Cell => 2.0 / self.axial as f64,
            Layout::Node => 2.0 / (self.axial + 1) as f64,
        }
    }

    pub fn transverse_step(&self) -> f64 {
        1.0 / self.transverse as f64
    }

    /// Product of the cell widths.
    pub fn cell_volume(&self) -> f64 {
        self.axial_step() * self.transverse_step().powi(self.dim as i32 - 1)
    }

    /// Centre of the cross-section cell `t` (row-major), in `[0, 1)^(d-1)`.
    pub fn transverse_center(&self, t: usize) -> Vec<f64> {
        let shift = match self.layout {
            Layout::Cell => 0.5,
            Layout::Node => 0.0,
        };
        let mut out = vec![0.0; self.dim - 1];
        let mut rem = t;
        for c in out.iter_mut().rev() {
            *c = ((rem % self.transverse) as f64 + shift) * self.transverse_step();
            rem /= self.transverse;
        }
        out
    }

    /// Axial position of layer `i`.
    pub fn axial_center(&self, i: usize) -> f64 {
        -1.0 + (i as f64 + self.boundary_offset()) * self.axial_step()
    }

    /// Centre of cell `index`: `(u_1, u_2, ...)`.
    pub fn cell_center(&self, index: usize) -> Vec<f64> {
        let slice = self.slice_len();
        let mut u = Vec::with_capacity(self.dim);
        u.push(self.axial_center(index / slice));
        u.extend(self.transverse_center(index % slice));
        u
    }
}

/// Density per cell together with its face data and clock.
#[derive(Clone, Debug, PartialEq)]
pub struct MacroField {
    grid: MacroGrid,
    values: Vec<f64>,
    boundary: BoundaryData,
    /// Face values per cross-section cell: `[minus, plus]`.
    ghosts: [Vec<f64>; 2],
    time: f64,
}

impl MacroField {
    pub fn new(grid: MacroGrid, values: Vec<f64>, boundary: BoundaryData) -> Result<Self> {
        if values.len() != grid.cell_count() {
            return Err(Error::domain(format!("field has {} values for {} cells", values.len(), grid.cell_count())));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::domain(format!("density {v} outside [0, 1]")));
        }
        boundary.validate("boundary")?;
        let ghost = |face| (0..grid.slice_len()).map(|t| boundary.value(face, &grid.transverse_center(t))).collect();
        Ok(MacroField {
            ghosts: [ghost(Face::Minus), ghost(Face::Plus)],
            grid,
            values,
            boundary,
            time: 0.0,
        })
    }

    /// Cell-centre samples of `profile`.
    pub fn from_profile(grid: MacroGrid, profile: impl Fn(&[f64]) -> f64, boundary: BoundaryData) -> Result<Self> {
        let values = (0..grid.cell_count()).map(|k| profile(&grid.cell_center(k))).collect();
        Self::new(grid, values, boundary)
    }

    pub fn constant(grid: MacroGrid, value: f64, boundary: BoundaryData) -> Result<Self> {
        Self::new(grid, vec![value; grid.cell_count()], boundary)
    }

    pub fn grid(&self) -> &MacroGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn boundary(&self) -> &BoundaryData {
        &self.boundary
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    /// Face value seen by cross-section cell `t`.
    pub fn ghost(&self, face: Face, t: usize) -> f64 {
        match face {
            Face::Minus => self.ghosts[0][t],
            Face::Plus => self.ghosts[1][t],
        }
    }

    /// `int |self - other|` over the domain (total measure 2).
    pub fn l1_distance(&self, other: &MacroField) -> Result<f64> {
        if self.grid != other.grid {
            return Err(Error::domain("fields live on different grids"));
        }
        Ok(l1_distance(&self.grid, &self.values, &other.values))
    }

    /// Mean over the cross-section of each axial layer.
    pub fn axial_profile(&self) -> Vec<f64> {
        let s = self.grid.slice_len();
        self.values.chunks(s).map(|c| c.iter().sum::<f64>() / s as f64).collect()
    }
}

/// `int |a - b|` for two cell vectors on `grid`.
pub fn l1_distance(grid: &MacroGrid, a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() * grid.cell_volume()
}

/// `A(rho) = int_0^rho D` for one entry, exact for the piecewise-linear interpolant of `D` on the mesh.
#[derive(Clone, Debug)]
struct Tabulated {
    rho: Vec<f64>,
    d: Vec<f64>,
    a: Vec<f64>,
}

impl Tabulated {
    fn new(rho: Vec<f64>, d: Vec<f64>) -> Self {
        let mut a = vec![0.0; rho.len()];
        for k in 1..rho.len() {
            a[k] = a[k - 1] + 0.5 * (d[k] + d[k - 1]) * (rho[k] - rho[k - 1]);
        }
        Tabulated { rho, d, a }
    }

    #[inline]
    fn interval(&self, rho: f64) -> usize {
        let n = self.rho.len();
        self.rho.partition_point(|&r| r <= rho).clamp(1, n - 1) - 1
    }

    #[inline]
    fn eval(&self, rho: f64) -> f64 {
        let k = self.interval(rho);
        let h = self.rho[k + 1] - self.rho[k];
        let s = rho - self.rho[k];
        let slope = (self.d[k + 1] - self.d[k]) / h;
        self.a[k] + self.d[k] * s + 0.5 * slope * s * s
    }

    fn derivative(&self, rho: f64) -> f64 {
        let k = self.interval(rho);
        let t = (rho - self.rho[k]) / (self.rho[k + 1] - self.rho[k]);
        self.d[k] * (1.0 - t) + self.d[k + 1] * t
    }

    /// Inverse of [`eval`](Self::eval) on `[0, 1]`; requires `a` strictly increasing.
    fn inverse(&self, y: f64) -> f64 {
        let n = self.a.len();
        let k = self.a.partition_point(|&v| v <= y).clamp(1, n - 1) - 1;
        let h = self.rho[k + 1] - self.rho[k];
        let c = 0.5 * (self.d[k + 1] - self.d[k]) / h;
        let r = y - self.a[k];
        // Root of c s^2 + d_k s - r = 0 in the cancellation-free form.
        let disc = (self.d[k] * self.d[k] + 4.0 * c * r).max(0.0);
        let denom = self.d[k] + disc.sqrt();
        let s = if denom > 0.0 { 2.0 * r / denom } else { 0.0 };
        self.rho[k] + s
    }

    fn max_d(&self) -> f64 {
        self.d.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    fn min_d(&self) -> f64 {
        self.d.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// `A_ij(rho) = int_0^rho D_ij`, tabulated on `[0, 1]`.
#[derive(Clone, Debug)]
pub struct FluxFunction {
    dim: usize,
    /// Row-major `d x d`.
    entries: Vec<Tabulated>,
    off_diagonal_ratio: f64,
}

fn mesh_with(points: &[f64], intervals: usize) -> Vec<f64> {
    let mut mesh: Vec<f64> = (0..=intervals).map(|k| k as f64 / intervals as f64).collect();
    mesh.extend(points.iter().copied().filter(|&r| r > 0.0 && r < 1.0));
    mesh.sort_by(f64::total_cmp);
    mesh.dedup_by(|a, b| (*a - *b).abs() < 1e-14);
    mesh
}

impl FluxFunction {
    /// Tabulates `d(i, j, rho)` on a uniform mesh merged with `breakpoints`.
    pub fn from_fn(
        dim: usize,
        d: impl Fn(usize, usize, f64) -> f64,
        breakpoints: &[f64],
        intervals: usize,
    ) -> Result<Self> {
        if dim == 0 || intervals == 0 {
            return Err(Error::domain("flux function needs d >= 1 and a nonempty mesh"));
        }
        let mesh = mesh_with(breakpoints, intervals);
        let mut entries = Vec::with_capacity(dim * dim);
        for i in 0..dim {
            for j in 0..dim {
                entries.push(Tabulated::new(mesh.clone(), mesh.iter().map(|&r| d(i, j, r)).collect()));
            }
        }
        for i in 0..dim {
            let t = &entries[i * dim + i];
            if t.min_d() < 0.0 || t.a.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Scheme(format!(
                    "A_{0}{0} is not strictly increasing: min D_{0}{0} = {1}",
                    i + 1,
                    t.min_d()
                )));
            }
        }
        let mut ratio: f64 = 0.0;
        for (k, &r) in mesh.iter().enumerate() {
            let _ = r;
            let diag = (0..dim).map(|i| entries[i * dim + i].d[k].abs()).fold(0.0, f64::max);
            for i in 0..dim {
                for j in 0..dim {
                    if i != j {
                        ratio = ratio.max(entries[i * dim + j].d[k].abs() / diag);
                    }
                }
            }
        }
        Ok(FluxFunction {
            dim,
            entries,
            off_diagonal_ratio: ratio,
        })
    }

    /// `A = rho * 1`.
    pub fn identity(dim: usize) -> Self {
        Self::from_fn(dim, |i, j, _| if i == j { 1.0 } else { 0.0 }, &[], 1).expect("identity is valid")
    }

    /// Diagonal entries of `D` given in closed form.
    pub fn from_diagonal(dim: usize, d: impl Fn(usize, f64) -> f64, intervals: usize) -> Result<Self> {
        Self::from_fn(dim, |i, j, r| if i == j { d(i, r) } else { 0.0 }, &[], intervals)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn a(&self, i: usize, j: usize, rho: f64) -> f64 {
        self.entries[i * self.dim + j].eval(rho)
    }

    /// The interpolated `D_ij(rho)`.
    pub fn d(&self, i: usize, j: usize, rho: f64) -> f64 {
        self.entries[i * self.dim + j].derivative(rho)
    }

    /// Inverse of `A_ii`.
    pub fn a_inverse(&self, i: usize, y: f64) -> f64 {
        self.entries[i * self.dim + i].inverse(y)
    }

    pub fn max_diagonal(&self, i: usize) -> f64 {
        self.entries[i * self.dim + i].max_d()
    }

    /// Largest `|D_ij| / max_i |D_ii|` seen on the mesh.
    pub fn off_diagonal_ratio(&self) -> f64 {
        self.off_diagonal_ratio
    }

    /// Message when the dropped off-diagonal part is not negligible.
    pub fn off_diagonal_warning(&self) -> Option<String> {
        (self.off_diagonal_ratio > OFF_DIAGONAL_WARNING).then(|| {
            format!(
                "off-diagonal diffusion up to {:.1}% of the diagonal is dropped by the solver",
                100.0 * self.off_diagonal_ratio
            )
        })
    }
}

/// Integrates the interpolated table: exact on its piecewise-linear interpolant.
pub fn antiderivative(table: &DiffusionTensorTable) -> Result<FluxFunction> {
    FluxFunction::from_fn(table.dim(), |i, j, r| table.entry(r, i, j), table.grid(), DEFAULT_MESH)
}

/// Largest step allowed by the monotonicity condition.
pub fn max_stable_step(grid: &MacroGrid, flux: &FluxFunction) -> Result<f64> {
    if flux.dim() != grid.dim {
        return Err(Error::domain(format!("flux is {}-dimensional, grid {}-dimensional", flux.dim(), grid.dim)));
    }
    let mut rate = (1.0 + 1.0 / grid.boundary_offset()) * flux.max_diagonal(0) / grid.axial_step().powi(2);
    if grid.transverse > 1 {
        for i in 1..grid.dim {
            rate += 2.0 * flux.max_diagonal(i) / grid.transverse_step().powi(2);
        }
    }
    Ok(1.0 / rate)
}

/// One forward-Euler step of the `A`-form scheme.
pub fn explicit_step(field: &MacroField, flux: &FluxFunction, dt: f64) -> Result<MacroField> {
    let grid = field.grid;
    let limit = max_stable_step(&grid, flux)?;
    if !(dt >= 0.0) || dt > limit * (1.0 + 1e-12) {
        return Err(Error::Scheme(format!("time step {dt:e} violates the stability limit {limit:e}")));
    }
    let mut next = field.clone();
    step_into(field, flux, dt, &mut next.values);
    next.time = field.time + dt;
    check_range(&next.values)?;
    Ok(next)
}

fn check_range(values: &[f64]) -> Result<()> {
    if let Some(v) = values.iter().find(|v| !(-1e-12..=1.0 + 1e-12).contains(*v)) {
        return Err(Error::Scheme(format!("density {v} left [0, 1]")));
    }
    Ok(())
}

fn step_into(field: &MacroField, flux: &FluxFunction, dt: f64, out: &mut [f64]) {
    let grid = field.grid;
    let slice = grid.slice_len();
    let m1 = grid.axial;
    let v = &field.values;
    let a1: Vec<f64> = v.iter().map(|&r| flux.a(0, 0, r)).collect();
    let ghost_lo: Vec<f64> = field.ghosts[0].iter().map(|&b| flux.a(0, 0, b)).collect();
    let ghost_hi: Vec<f64> = field.ghosts[1].iter().map(|&b| flux.a(0, 0, b)).collect();
    let inv_du2 = 1.0 / grid.axial_step().powi(2);
    let end = 1.0 / grid.boundary_offset();
    for i in 0..m1 {
        for t in 0..slice {
            let k = i * slice + t;
            let lo = if i == 0 { end * (ghost_lo[t] - a1[k]) } else { a1[k - slice] - a1[k] };
            let hi = if i + 1 == m1 { end * (ghost_hi[t] - a1[k]) } else { a1[k + slice] - a1[k] };
            out[k] = v[k] + dt * inv_du2 * (lo + hi);
        }
    }
    if grid.transverse > 1 {
        let inv_dv2 = 1.0 / grid.transverse_step().powi(2);
        let mt = grid.transverse;
        for dir in 1..grid.dim {
            let stride = mt.pow((grid.dim - 1 - dir) as u32);
            let a: Vec<f64> = v.iter().map(|&r| flux.a(dir, dir, r)).collect();
            for k in 0..v.len() {
                let c = (k / stride) % mt;
                let up = if c + 1 == mt { k + stride - mt * stride } else { k + stride };
                let down = if c == 0 { k + (mt - 1) * stride } else { k - stride };
                out[k] += dt * inv_dv2 * (a[up] - 2.0 * a[k] + a[down]);
            }
        }
    }
}

/// How [`solve`] picks its time step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepPolicy {
    /// A fraction in `(0, 1]` of the stability limit.
    Stable { fraction: f64 },
    /// A requested step, shortened so checkpoints are hit exactly.
    Fixed(f64),
}

impl Default for StepPolicy {
    fn default() -> Self {
        StepPolicy::Stable { fraction: 0.9 }
    }
}

impl StepPolicy {
    fn step(&self, grid: &MacroGrid, flux: &FluxFunction) -> Result<f64> {
        match *self {
            StepPolicy::Stable { fraction } if fraction > 0.0 && fraction <= 1.0 => {
                Ok(fraction * max_stable_step(grid, flux)?)
            }
            StepPolicy::Fixed(dt) if dt > 0.0 => Ok(dt),
            other => Err(Error::domain(format!("invalid step policy {other:?}"))),
        }
    }
}

/// Final field and the fields at the requested checkpoints.
#[derive(Clone, Debug)]
pub struct Solution {
    pub checkpoints: Vec<MacroField>,
    pub last: MacroField,
    pub steps: u64,
}

/// Integrates to `t_end`, visiting every step through `visit`.
fn integrate(
    field: &MacroField,
    flux: &FluxFunction,
    t_end: f64,
    policy: StepPolicy,
    checkpoints: &[f64],
    mut visit: impl FnMut(&MacroField) -> Result<()>,
) -> Result<Solution> {
    if !(t_end >= field.time) {
        return Err(Error::domain(format!("t_end {t_end} precedes the field time {}", field.time)));
    }
    if checkpoints.windows(2).any(|w| w[1] < w[0]) || checkpoints.iter().any(|&t| t < field.time || t > t_end) {
        return Err(Error::domain(format!("checkpoints {checkpoints:?} must be sorted inside [t0, t_end]")));
    }
    let dt_max = policy.step(&field.grid, flux)?;
    let limit = max_stable_step(&field.grid, flux)?;
    if dt_max > limit * (1.0 + 1e-12) {
        return Err(Error::Scheme(format!("time step {dt_max:e} violates the stability limit {limit:e}")));
    }
    let mut current = field.clone();
    let mut scratch = current.values.clone();
    let mut out = Vec::with_capacity(checkpoints.len());
    let mut steps = 0u64;
    let mut stops = checkpoints.to_vec();
    stops.push(t_end);
    for (s, &stop) in stops.iter().enumerate() {
        let span = stop - current.time;
        if span > 0.0 {
            let n = (span / dt_max).ceil().max(1.0) as u64;
            let start = current.time;
            for k in 1..=n {
                let dt = span / n as f64;
                step_into(&current, flux, dt, &mut scratch);
                std::mem::swap(&mut current.values, &mut scratch);
                current.time = if k == n { stop } else { start + dt * k as f64 };
                check_range(&current.values)?;
                visit(&current)?;
                steps += 1;
            }
        }
        if s < checkpoints.len() {
            out.push(current.clone());
        }
    }
    Ok(Solution {
        checkpoints: out,
        last: current,
        steps,
    })
}

/// Repeated [`explicit_step`] from `field` to `t_end`.
pub fn solve(
    field: &MacroField,
    flux: &FluxFunction,
    t_end: f64,
    policy: StepPolicy,
    checkpoints: &[f64],
) -> Result<Solution> {
    integrate(field, flux, t_end, policy, checkpoints, |_| Ok(()))
}

/// Exact discrete steady state for face-constant data: `A_11` affine in `u_1`.
pub fn stationary_1d(flux: &FluxFunction, grid: MacroGrid, boundary: &BoundaryData) -> Result<MacroField> {
    if !boundary.is_face_constant() {
        return Err(Error::domain("the stationary profile needs face-constant boundary data"));
    }
    boundary.validate("boundary")?;
    let (bm, bp) = (boundary.value(Face::Minus, &[]), boundary.value(Face::Plus, &[]));
    let (am, ap) = (flux.a(0, 0, bm), flux.a(0, 0, bp));
    let values = (0..grid.cell_count())
        .map(|k| {
            let u = grid.cell_center(k)[0];
            flux.a_inverse(0, am + (ap - am) * (u + 1.0) / 2.0)
        })
        .collect();
    MacroField::new(grid, values, *boundary)
}

/// Trajectories from the constant lower and upper solutions and their gap.
#[derive(Clone, Debug)]
pub struct Envelope {
    pub times: Vec<f64>,
    pub lower: Vec<MacroField>,
    pub upper: Vec<MacroField>,
    /// `(time, ||upper - lower||_1)`, starting at time 0.
    pub gaps: Vec<(f64, f64)>,
    /// Largest decrease of a lower-trajectory cell between consecutive steps.
    pub lower_decrease: f64,
    /// Largest increase of an upper-trajectory cell between consecutive steps.
    pub upper_increase: f64,
    /// Largest `lower - upper` over all steps and cells.
    pub order_violation: f64,
}

/// Tolerance on `lower <= upper` before the scheme is declared broken.
pub const ORDER_TOLERANCE: f64 = 1e-10;

/// Evolves `rho_0 = 0` and `rho_0 = 1` in lockstep and records their gap at each checkpoint.
pub fn monotone_envelope(
    flux: &FluxFunction,
    grid: MacroGrid,
    boundary: &BoundaryData,
    t_end: f64,
    checkpoints: &[f64],
    policy: StepPolicy,
) -> Result<Envelope> {
    let lower0 = MacroField::constant(grid, 0.0, *boundary)?;
    let upper0 = MacroField::constant(grid, 1.0, *boundary)?;
    let mut prev_lower = lower0.values.clone();
    let mut lower_decrease: f64 = 0.0;
    let lower = integrate(&lower0, flux, t_end, policy, checkpoints, |f| {
        for (a, b) in prev_lower.iter_mut().zip(&f.values) {
            lower_decrease = lower_decrease.max(*a - b);
            *a = *b;
        }
        Ok(())
    })?;
    let mut prev_upper = upper0.values.clone();
    let mut upper_increase: f64 = 0.0;
    let upper = integrate(&upper0, flux, t_end, policy, checkpoints, |f| {
        for (a, b) in prev_upper.iter_mut().zip(&f.values) {
            upper_increase = upper_increase.max(b - *a);
            *a = *b;
        }
        Ok(())
    })?;
    let mut order_violation: f64 = 0.0;
    let mut gaps = vec![(0.0, lower0.l1_distance(&upper0)?)];
    for (l, u) in lower.checkpoints.iter().zip(&upper.checkpoints) {
        for (a, b) in l.values.iter().zip(&u.values) {
            order_violation = order_violation.max(a - b);
        }
        gaps.push((l.time, l.l1_distance(u)?));
    }
    if order_violation > ORDER_TOLERANCE {
        return Err(Error::Scheme(format!("lower trajectory exceeds upper by {order_violation:e}")));
    }
    Ok(Envelope {
        times: checkpoints.to_vec(),
        lower: lower.checkpoints,
        upper: upper.checkpoints,
        gaps,
        lower_decrease,
        upper_increase,
        order_violation,
    })
}

/// Rows `time,u1[,u2...],density` for each field in order.
pub fn write_checkpoints_csv(path: &Path, fields: &[MacroField]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if let Some(f) = fields.first() {
        let mut header = vec!["time".to_string()];
        header.extend((1..=f.grid.dim).map(|i| format!("u{i}")));
        header.push("density".into());
        w.write_record(&header)?;
    }
    for f in fields {
        for (k, v) in f.values.iter().enumerate() {
            let mut row = vec![f.time.to_string()];
            row.extend(f.grid.cell_center(k).iter().map(|c| c.to_string()));
            row.push(v.to_string());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Rows `time,l1_gap`.
pub fn write_gap_csv(path: &Path, gaps: &[(f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["time", "l1_gap"])?;
    for g in gaps {
        w.serialize(g)?;
    }
    w.flush()?;
    Ok(())
}
