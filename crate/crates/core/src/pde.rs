//! Discrete Hardy operator, θ-scheme steppers and space-time inner products.
//!
//! Space-time products use the left rectangle rule in time: level `n` of a field stands
//! for the interval `(t_n, t_{n+1})`, so levels `0..N_t` enter and the last level only
//! through terminal pairings. The backward stepper is the exact transpose of the forward
//! stepper under this product.

use std::io::{Read, Write};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{check_mu, GridMode, SpatialGrid};

/// Values of one scalar quantity on every cell at every time level.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    n_cells: usize,
    n_steps: usize,
    t_final: f64,
    values: Vec<f64>,
}

impl Field {
    pub fn zeros(n_cells: usize, n_steps: usize, t_final: f64) -> Self {
        Field { n_cells, n_steps, t_final, values: vec![0.0; n_cells * (n_steps + 1)] }
    }

    /// Build from row-major values, `n_steps + 1` levels of `n_cells` values.
    pub fn from_values(n_cells: usize, n_steps: usize, t_final: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_cells * (n_steps + 1) {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values", n_cells * (n_steps + 1)),
                found: format!("{} values", values.len()),
            });
        }
        Ok(Field { n_cells, n_steps, t_final, values })
    }

    /// Fill level `n`, cell `j` with `f(n, j)`.
    pub fn from_fn(n_cells: usize, n_steps: usize, t_final: f64, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut out = Field::zeros(n_cells, n_steps, t_final);
        for n in 0..=n_steps {
            for j in 0..n_cells {
                out.values[n * n_cells + j] = f(n, j);
            }
        }
        out
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_levels(&self) -> usize {
        self.n_steps + 1
    }

    pub fn t_final(&self) -> f64 {
        self.t_final
    }

    pub fn dt(&self) -> f64 {
        if self.n_steps == 0 {
            0.0
        } else {
            self.t_final / self.n_steps as f64
        }
    }

    pub fn time(&self, n: usize) -> f64 {
        if self.n_steps == 0 {
            0.0
        } else {
            self.t_final * n as f64 / self.n_steps as f64
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn level(&self, n: usize) -> &[f64] {
        &self.values[n * self.n_cells..(n + 1) * self.n_cells]
    }

    pub fn level_mut(&mut self, n: usize) -> &mut [f64] {
        &mut self.values[n * self.n_cells..(n + 1) * self.n_cells]
    }

    pub fn terminal(&self) -> &[f64] {
        self.level(self.n_steps)
    }

    pub fn same_shape(&self, other: &Field) -> Result<()> {
        if self.n_cells != other.n_cells || self.n_steps != other.n_steps {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", self.n_steps + 1, self.n_cells),
                found: format!("{}x{}", other.n_steps + 1, other.n_cells),
            });
        }
        Ok(())
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &Field) -> Result<()> {
        self.same_shape(other)?;
        for (x, y) in self.values.iter_mut().zip(&other.values) {
            *x += a * y;
        }
        Ok(())
    }

    pub fn scale(&mut self, a: f64) {
        for x in &mut self.values {
            *x *= a;
        }
    }

    pub fn scaled(&self, a: f64) -> Field {
        let mut out = self.clone();
        out.scale(a);
        out
    }

    /// Linear combination `a * self + b * other`.
    pub fn combine(&self, a: f64, other: &Field, b: f64) -> Result<Field> {
        self.same_shape(other)?;
        let values = self.values.iter().zip(&other.values).map(|(x, y)| a * x + b * y).collect();
        Ok(Field { values, ..*self })
    }

    /// Restriction to `mask × (0, T)`: zero outside the mask and on the terminal level.
    pub fn restricted(&self, mask: &[bool]) -> Field {
        let mut out = self.clone();
        out.restrict(mask);
        out
    }

    pub fn restrict(&mut self, mask: &[bool]) {
        let n_cells = self.n_cells;
        for (k, x) in self.values.iter_mut().enumerate() {
            if k / n_cells == self.n_steps || !mask[k % n_cells] {
                *x = 0.0;
            }
        }
    }

    /// Pointwise map.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field { values: self.values.iter().map(|&x| f(x)).collect(), ..*self }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&x| x == 0.0)
    }

    /// Flat binary: u64 cells, u64 steps, f64 final time, then little-endian doubles row-major.
    pub fn write_binary(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(&(self.n_cells as u64).to_le_bytes())?;
        w.write_all(&(self.n_steps as u64).to_le_bytes())?;
        w.write_all(&self.t_final.to_le_bytes())?;
        for x in &self.values {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary(mut r: impl Read) -> std::io::Result<Field> {
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let n_cells = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8)?;
        let n_steps = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8)?;
        let t_final = f64::from_le_bytes(b8);
        let total = n_cells
            .checked_mul(n_steps + 1)
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidData, "field header overflows"))?;
        let mut values = Vec::with_capacity(total);
        for _ in 0..total {
            r.read_exact(&mut b8)?;
            values.push(f64::from_le_bytes(b8));
        }
        Ok(Field { n_cells, n_steps, t_final, values })
    }

    /// CSV rows `time,cell,value`, level-major.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time,cell,value\n");
        for n in 0..=self.n_steps {
            let t = self.time(n);
            for (j, x) in self.level(n).iter().enumerate() {
                out.push_str(&format!("{t:e},{j},{x:e}\n"));
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Field> {
        let bad = |msg: String| Error::InvalidArgument(format!("field csv: {msg}"));
        let mut times: Vec<f64> = Vec::new();
        let mut values = Vec::new();
        let mut max_cell = 0usize;
        for (k, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(bad(format!("line {} has {} columns", k + 1, parts.len())));
            }
            let t: f64 = parts[0].trim().parse().map_err(|e| bad(format!("line {}: {e}", k + 1)))?;
            let j: usize = parts[1].trim().parse().map_err(|e| bad(format!("line {}: {e}", k + 1)))?;
            let v: f64 = parts[2].trim().parse().map_err(|e| bad(format!("line {}: {e}", k + 1)))?;
            if times.last() != Some(&t) {
                times.push(t);
            }
            max_cell = max_cell.max(j);
            values.push(v);
        }
        if times.is_empty() {
            return Err(bad("no rows".into()));
        }
        let n_cells = max_cell + 1;
        let n_steps = times.len() - 1;
        Field::from_values(n_cells, n_steps, *times.last().unwrap(), values)
    }
}

/// Symmetric sparse matrix in compressed-row form with both triangles stored.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricCsr {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SymmetricCsr {
    fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|e| e.0);
            for (c, v) in row {
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        SymmetricCsr { n, row_ptr, cols, vals }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |k| (self.cols[k], self.vals[k]))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|e| e.0 == j).map_or(0.0, |e| e.1)
    }

    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..self.n {
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.vals[k] * x[self.cols[k]];
            }
            out[i] = s;
        }
    }

    pub fn bandwidth(&self) -> usize {
        (0..self.n).flat_map(|i| self.row(i).map(move |(j, _)| i.abs_diff(j))).max().unwrap_or(0)
    }
}

/// Dense lower band of a Cholesky factor.
#[derive(Debug, Clone)]
struct BandCholesky {
    n: usize,
    bw: usize,
    band: Vec<f64>,
}

impl BandCholesky {
    /// Factor `mass_coef * diag(mass) + k_coef * K`.
    fn factor(k: &SymmetricCsr, mass: &[f64], mass_coef: f64, k_coef: f64) -> Result<Self> {
        let n = k.dim();
        let bw = k.bandwidth();
        let w = bw + 1;
        let mut band = vec![0.0; n * w];
        for i in 0..n {
            for (j, v) in k.row(i) {
                if j <= i {
                    band[i * w + (j + bw - i)] += k_coef * v;
                }
            }
            band[i * w + bw] += mass_coef * mass[i];
        }
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            for j in lo..=i {
                let mut s = band[i * w + (j + bw - i)];
                let klo = lo.max(j.saturating_sub(bw));
                for kk in klo..j {
                    s -= band[i * w + (kk + bw - i)] * band[j * w + (kk + bw - j)];
                }
                if i == j {
                    if !(s > 0.0) {
                        return Err(Error::LinearSolveFailure(format!("non-positive pivot {s:e} at row {i}")));
                    }
                    band[i * w + bw] = s.sqrt();
                } else {
                    band[i * w + (j + bw - i)] = s / band[j * w + bw];
                }
            }
        }
        Ok(BandCholesky { n, bw, band })
    }

    fn solve(&self, rhs: &[f64], x: &mut [f64]) {
        let (n, bw, w) = (self.n, self.bw, self.bw + 1);
        for i in 0..n {
            let mut s = rhs[i];
            for kk in i.saturating_sub(bw)..i {
                s -= self.band[i * w + (kk + bw - i)] * x[kk];
            }
            x[i] = s / self.band[i * w + bw];
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for kk in i + 1..(i + bw + 1).min(n) {
                s -= self.band[kk * w + (i + bw - kk)] * x[kk];
            }
            x[i] = s / self.band[i * w + bw];
        }
    }
}

/// The assembled Hardy operator `-Δ_h - μ/|x|²` with homogeneous Dirichlet data.
///
/// Stored as the symmetric form `K = M A_h` with `M` the diagonal cell weights, so
/// `A_h` is self-adjoint in the `M`-weighted product.
#[derive(Debug, Clone)]
pub struct DiscreteOperator {
    grid: SpatialGrid,
    mu: f64,
    mass: Vec<f64>,
    stiffness: SymmetricCsr,
}

/// Assemble the operator on `grid` for potential strength `mu`.
pub fn assemble(grid: &SpatialGrid, mu: f64) -> Result<DiscreteOperator> {
    check_mu(grid.dimension(), mu)?;
    let n = grid.n_cells();
    let h = grid.spacing();
    let mass = grid.volumes().to_vec();
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    match grid.mode() {
        GridMode::Radial3d => {
            let four_pi = 4.0 * std::f64::consts::PI;
            let mut diag = vec![0.0; n];
            for j in 0..n - 1 {
                let rf = (j + 1) as f64 * h;
                let a = four_pi * rf * rf / h;
                diag[j] += a;
                diag[j + 1] += a;
                rows[j].push((j + 1, -a));
                rows[j + 1].push((j, -a));
            }
            // ghost value -v beyond r = R puts the Dirichlet zero on the face
            let r_out = grid.extent();
            diag[n - 1] += four_pi * r_out * r_out * 2.0 / h;
            for j in 0..n {
                let r = grid.radius(j);
                rows[j].push((j, diag[j] - mu * mass[j] / (r * r)));
            }
        }
        GridMode::Tensor => {
            let dim = grid.dimension();
            let cpa = grid.cells_per_axis();
            let vol = mass[0];
            let c = vol / (h * h);
            for j in 0..n {
                let idx = grid.tensor_index(j);
                let mut d = 0.0;
                for axis in 0..dim {
                    for step in [-1i64, 1] {
                        let k = idx[axis] as i64 + step;
                        d += c;
                        if k >= 0 && (k as usize) < cpa {
                            let mut nb = idx.clone();
                            nb[axis] = k as usize;
                            rows[j].push((grid.tensor_flat(&nb), -c));
                        } else {
                            // ghost -v: the missing neighbour adds another c on the diagonal
                            d += c;
                        }
                    }
                }
                let r = grid.radius(j);
                rows[j].push((j, d - mu * vol / (r * r)));
            }
        }
    }
    Ok(DiscreteOperator { grid: grid.clone(), mu, mass, stiffness: SymmetricCsr::from_rows(rows) })
}

impl DiscreteOperator {
    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn n_cells(&self) -> usize {
        self.mass.len()
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    /// The symmetric matrix `K = M A_h`.
    pub fn stiffness(&self) -> &SymmetricCsr {
        &self.stiffness
    }

    /// Row `j` of `A_h = M⁻¹K`.
    pub fn operator_row(&self, j: usize) -> Vec<(usize, f64)> {
        self.stiffness.row(j).map(|(c, v)| (c, v / self.mass[j])).collect()
    }

    /// `out = A_h x`.
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.stiffness.matvec(x, out);
        for (o, m) in out.iter_mut().zip(&self.mass) {
            *o /= m;
        }
    }

    /// Gershgorin bound on `‖A_h‖`.
    pub fn norm_bound(&self) -> f64 {
        (0..self.n_cells())
            .map(|j| self.stiffness.row(j).map(|(_, v)| v.abs()).sum::<f64>() / self.mass[j])
            .fold(0.0, f64::max)
    }

    /// Smallest eigenvalue of `A_h` by shifted inverse iteration on `K x = λ M x`.
    pub fn smallest_eigenvalue(&self, tol: f64, max_iter: usize) -> Result<f64> {
        let shift = self.grid.radii().iter().map(|r| self.mu / (r * r)).fold(0.0, f64::max) + 1.0;
        let chol = BandCholesky::factor(&self.stiffness, &self.mass, shift, 1.0)?;
        let n = self.n_cells();
        let mut x: Vec<f64> = (0..n).map(|j| 1.0 + 0.01 * (j % 7) as f64).collect();
        let mut y = vec![0.0; n];
        let mut kx = vec![0.0; n];
        let mut lambda = f64::NAN;
        for _ in 0..max_iter {
            let mx: Vec<f64> = x.iter().zip(&self.mass).map(|(a, m)| a * m).collect();
            chol.solve(&mx, &mut y);
            let norm = y.iter().zip(&self.mass).map(|(a, m)| a * a * m).sum::<f64>().sqrt();
            for (a, b) in x.iter_mut().zip(&y) {
                *a = b / norm;
            }
            self.stiffness.matvec(&x, &mut kx);
            let next = x.iter().zip(&kx).map(|(a, b)| a * b).sum::<f64>();
            if (next - lambda).abs() <= tol * next.abs().max(1.0) {
                return Ok(next);
            }
            lambda = next;
        }
        Ok(lambda)
    }

    /// Warn when the operator loses positivity at the critical potential strength.
    pub fn positivity_diagnostic(&self) -> Result<f64> {
        let lmin = self.smallest_eigenvalue(1e-12, 10_000)?;
        if lmin < -1e-6 * self.norm_bound() {
            log::warn!("smallest eigenvalue {lmin:e} of the discrete Hardy operator is negative");
        }
        Ok(lmin)
    }
}

/// Time discretisation: θ = 1 (implicit Euler) or θ = ½ (Crank–Nicolson).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeScheme {
    pub theta: f64,
    pub n_steps: usize,
}

impl TimeScheme {
    pub fn implicit_euler(n_steps: usize) -> Self {
        TimeScheme { theta: 1.0, n_steps }
    }

    pub fn crank_nicolson(n_steps: usize) -> Self {
        TimeScheme { theta: 0.5, n_steps }
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta != 1.0 && self.theta != 0.5 {
            return Err(Error::InvalidArgument(format!("theta must be 1 or 0.5, got {}", self.theta)));
        }
        if self.n_steps == 0 {
            return Err(Error::InvalidArgument("at least one time step is required".into()));
        }
        Ok(())
    }
}

/// How the implicit systems are solved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LinearSolver {
    /// Banded Cholesky factorisation, computed once.
    Direct,
    /// Jacobi-preconditioned conjugate gradient.
    Pcg { tol: f64, max_iter: usize },
}

impl Default for LinearSolver {
    fn default() -> Self {
        LinearSolver::Direct
    }
}

/// Result of a backward solve.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardSolution {
    /// Levels `0..N_t` hold the interval values; the last level is the terminal datum.
    pub field: Field,
    /// The value dual to the initial datum of the forward problem.
    pub initial: Vec<f64>,
}

#[derive(Clone)]
enum Implicit {
    Direct(BandCholesky),
    Pcg { tol: f64, max_iter: usize, diag: Vec<f64> },
}

/// Forward and backward θ-scheme steppers sharing one factorisation.
#[derive(Clone)]
pub struct HeatSolver {
    op: Arc<DiscreteOperator>,
    scheme: TimeScheme,
    t_final: f64,
    implicit: Implicit,
}

impl std::fmt::Debug for HeatSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HeatSolver").field("scheme", &self.scheme).field("t_final", &self.t_final).finish()
    }
}

impl HeatSolver {
    pub fn new(op: Arc<DiscreteOperator>, scheme: TimeScheme, t_final: f64, solver: LinearSolver) -> Result<Self> {
        scheme.validate()?;
        if !(t_final > 0.0) {
            return Err(Error::InvalidArgument(format!("final time must be positive, got {t_final}")));
        }
        let dt = t_final / scheme.n_steps as f64;
        let k_coef = scheme.theta * dt;
        let implicit = match solver {
            LinearSolver::Direct => Implicit::Direct(BandCholesky::factor(op.stiffness(), op.mass(), 1.0, k_coef)?),
            LinearSolver::Pcg { tol, max_iter } => {
                let diag = (0..op.n_cells()).map(|j| op.mass()[j] + k_coef * op.stiffness().get(j, j)).collect();
                Implicit::Pcg { tol, max_iter, diag }
            }
        };
        Ok(HeatSolver { op, scheme, t_final, implicit })
    }

    pub fn operator(&self) -> &DiscreteOperator {
        &self.op
    }

    pub fn operator_arc(&self) -> &Arc<DiscreteOperator> {
        &self.op
    }

    pub fn scheme(&self) -> TimeScheme {
        self.scheme
    }

    pub fn t_final(&self) -> f64 {
        self.t_final
    }

    pub fn n_steps(&self) -> usize {
        self.scheme.n_steps
    }

    pub fn n_cells(&self) -> usize {
        self.op.n_cells()
    }

    pub fn dt(&self) -> f64 {
        self.t_final / self.scheme.n_steps as f64
    }

    pub fn mass(&self) -> &[f64] {
        self.op.mass()
    }

    pub fn zeros(&self) -> Field {
        Field::zeros(self.n_cells(), self.n_steps(), self.t_final)
    }

    fn check(&self, f: &Field) -> Result<()> {
        if f.n_cells() != self.n_cells() || f.n_steps() != self.n_steps() {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", self.n_steps() + 1, self.n_cells()),
                found: format!("{}x{}", f.n_steps() + 1, f.n_cells()),
            });
        }
        Ok(())
    }

    fn check_vec(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.n_cells() {
            return Err(Error::ShapeMismatch { expected: format!("{} cells", self.n_cells()), found: format!("{} cells", v.len()) });
        }
        Ok(())
    }

    /// `out = (M - (1-θ)Δt K) y + Δt M (c ∘ y)`.
    fn explicit_part(&self, y: &[f64], reaction: Option<&[f64]>, out: &mut [f64], scratch: &mut [f64]) {
        let dt = self.dt();
        let m = self.op.mass();
        let kc = (1.0 - self.scheme.theta) * dt;
        if kc != 0.0 {
            self.op.stiffness().matvec(y, scratch);
            for j in 0..y.len() {
                out[j] = m[j] * y[j] - kc * scratch[j];
            }
        } else {
            for j in 0..y.len() {
                out[j] = m[j] * y[j];
            }
        }
        if let Some(c) = reaction {
            for j in 0..y.len() {
                out[j] += dt * m[j] * c[j] * y[j];
            }
        }
    }

    /// Solve `(M + θΔt K) x = rhs`.
    fn implicit_solve(&self, rhs: &[f64], x: &mut [f64]) -> Result<()> {
        match &self.implicit {
            Implicit::Direct(ch) => {
                ch.solve(rhs, x);
                Ok(())
            }
            Implicit::Pcg { tol, max_iter, diag } => {
                let kc = self.scheme.theta * self.dt();
                let m = self.op.mass();
                let apply = |v: &[f64], out: &mut [f64]| {
                    self.op.stiffness().matvec(v, out);
                    for j in 0..v.len() {
                        out[j] = m[j] * v[j] + kc * out[j];
                    }
                };
                pcg(apply, diag, rhs, x, *tol, *max_iter)
            }
        }
    }

    /// Forward solve from `y0` with interval sources and an optional explicit reaction.
    pub fn forward(&self, y0: &[f64], source: Option<&Field>, reaction: Option<&Field>) -> Result<Field> {
        self.check_vec(y0)?;
        if let Some(s) = source {
            self.check(s)?;
        }
        if let Some(c) = reaction {
            self.check(c)?;
        }
        self.forward_with(y0, reaction, |n, _, out| {
            if let Some(s) = source {
                out.copy_from_slice(s.level(n));
            }
        })
    }

    /// Forward solve where the source of interval `n` may depend on the state `y^n`.
    ///
    /// The closure receives `(n, y^n, out)` with `out` zeroed.
    pub fn forward_with(
        &self,
        y0: &[f64],
        reaction: Option<&Field>,
        mut source: impl FnMut(usize, &[f64], &mut [f64]),
    ) -> Result<Field> {
        self.check_vec(y0)?;
        let nc = self.n_cells();
        let dt = self.dt();
        let mut out = self.zeros();
        out.level_mut(0).copy_from_slice(y0);
        let mut rhs = vec![0.0; nc];
        let mut scratch = vec![0.0; nc];
        let mut src = vec![0.0; nc];
        let mut next = vec![0.0; nc];
        for n in 0..self.n_steps() {
            let y = out.level(n);
            self.explicit_part(y, reaction.map(|c| c.level(n)), &mut rhs, &mut scratch);
            src.iter_mut().for_each(|s| *s = 0.0);
            source(n, y, &mut src);
            let m = self.op.mass();
            for j in 0..nc {
                rhs[j] += dt * m[j] * src[j];
            }
            self.implicit_solve(&rhs, &mut next)?;
            out.level_mut(n + 1).copy_from_slice(&next);
        }
        Ok(out)
    }

    /// Backward solve from `terminal`: the exact transpose of [`forward`](Self::forward).
    ///
    /// For every `y0`, `f`, `g`, `ψ^T`:
    /// `⟨y, g⟩_Q + (y(T), ψ^T) = (y0, initial) + ⟨f, ψ⟩_Q` with `y = forward(y0, f)`
    /// and `(ψ, initial) = backward(ψ^T, g)`, both with the same reaction.
    pub fn backward(&self, terminal: &[f64], source: Option<&Field>, reaction: Option<&Field>) -> Result<BackwardSolution> {
        self.check_vec(terminal)?;
        if let Some(s) = source {
            self.check(s)?;
        }
        if let Some(c) = reaction {
            self.check(c)?;
        }
        let nc = self.n_cells();
        let nt = self.n_steps();
        let dt = self.dt();
        let m = self.op.mass();
        let mut out = self.zeros();
        out.level_mut(nt).copy_from_slice(terminal);
        let mut rhs: Vec<f64> = terminal.iter().zip(m).map(|(p, w)| p * w).collect();
        let mut scratch = vec![0.0; nc];
        let mut next = vec![0.0; nc];
        for n in (0..nt).rev() {
            self.implicit_solve(&rhs, &mut next)?;
            out.level_mut(n).copy_from_slice(&next);
            self.explicit_part(&next, reaction.map(|c| c.level(n)), &mut rhs, &mut scratch);
            if let Some(s) = source {
                let g = s.level(n);
                for j in 0..nc {
                    rhs[j] += dt * m[j] * g[j];
                }
            }
        }
        let initial = rhs.iter().zip(m).map(|(r, w)| r / w).collect();
        Ok(BackwardSolution { field: out, initial })
    }

    /// Left-rule space-time product over `mask × (0, T)`.
    pub fn inner_q(&self, a: &Field, b: &Field, mask: Option<&[bool]>) -> Result<f64> {
        self.check(a)?;
        self.check(b)?;
        Ok(inner_q_raw(self.op.mass(), self.dt(), a, b, mask))
    }

    pub fn norm_q(&self, a: &Field, mask: Option<&[bool]>) -> Result<f64> {
        Ok(self.inner_q(a, a, mask)?.sqrt())
    }

    /// Spatial `L²` product.
    pub fn inner_m(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).zip(self.op.mass()).map(|((x, y), w)| x * y * w).sum()
    }

    pub fn norm_m(&self, a: &[f64]) -> f64 {
        self.inner_m(a, a).sqrt()
    }
}

fn inner_q_raw(mass: &[f64], dt: f64, a: &Field, b: &Field, mask: Option<&[bool]>) -> f64 {
    let mut total = 0.0;
    for n in 0..a.n_steps() {
        let (x, y) = (a.level(n), b.level(n));
        let mut s = 0.0;
        for j in 0..x.len() {
            if mask.map_or(true, |m| m[j]) {
                s += mass[j] * x[j] * y[j];
            }
        }
        total += s;
    }
    total * dt
}

/// Left-rule space-time product with explicit cell weights.
pub fn inner_q(mass: &[f64], a: &Field, b: &Field, mask: Option<&[bool]>) -> Result<f64> {
    a.same_shape(b)?;
    if mass.len() != a.n_cells() {
        return Err(Error::ShapeMismatch { expected: format!("{} cells", a.n_cells()), found: format!("{} weights", mass.len()) });
    }
    Ok(inner_q_raw(mass, a.dt(), a, b, mask))
}

/// Jacobi-preconditioned conjugate gradient for an SPD operator.
pub(crate) fn pcg(
    apply: impl Fn(&[f64], &mut [f64]),
    diag: &[f64],
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iter: usize,
) -> Result<()> {
    let n = b.len();
    let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    x.iter_mut().for_each(|v| *v = 0.0);
    if bnorm == 0.0 {
        return Ok(());
    }
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(diag).map(|(a, d)| a / d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    for _ in 0..max_iter {
        apply(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if !(pap > 0.0) {
            return Err(Error::LinearSolveFailure("matrix is not positive definite".into()));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rnorm <= tol * bnorm {
            return Ok(());
        }
        for i in 0..n {
            z[i] = r[i] / diag[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::LinearSolveFailure(format!("no convergence in {max_iter} iterations")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_grid, GridSpec};

    #[test]
    fn tensor_stencil_interior() {
        let g = build_grid(&GridSpec::tensor(2, 1.5, 16)).unwrap();
        let op = assemble(&g, 0.0).unwrap();
        let h = g.spacing();
        let j = g.tensor_flat(&[5, 7]);
        let row = op.operator_row(j);
        for (c, v) in row {
            if c == j {
                assert!((v - 4.0 / (h * h)).abs() < 1e-9);
            } else {
                assert!((v + 1.0 / (h * h)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn banded_cholesky_solves() {
        let g = build_grid(&GridSpec::tensor(2, 1.5, 8)).unwrap();
        let op = assemble(&g, 0.0).unwrap();
        let ch = BandCholesky::factor(op.stiffness(), op.mass(), 1.0, 0.1).unwrap();
        let b: Vec<f64> = (0..64).map(|i| (i as f64).sin()).collect();
        let mut x = vec![0.0; 64];
        ch.solve(&b, &mut x);
        let mut kx = vec![0.0; 64];
        op.stiffness().matvec(&x, &mut kx);
        for i in 0..64 {
            let lhs = op.mass()[i] * x[i] + 0.1 * kx[i];
            assert!((lhs - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_round_trip() {
        let f = Field::from_fn(3, 2, 1.0, |n, j| (n * 3 + j) as f64 * 0.1 + 1e-17);
        let g = Field::from_csv(&f.to_csv()).unwrap();
        assert_eq!(f.values(), g.values());
    }
}
