//! Uniform time grids, discretized Volterra kernels and the operator calculus
//! used by every solver in the crate.
//!
//! A kernel `k(t, s)` on a grid with step `dt` becomes the matrix
//! `K[i][j] = (1/dt) * int_{t_j}^{t_j + dt} k(t_i, s) ds`, restricted to `s < t_i`.
//! Integral operators act with left-endpoint weights: `(K f)_i = sum_j K[i][j] f_j dt`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Smallest singular value accepted for dense solves.
pub const SINGULAR_TOL: f64 = 1e-10;

/// Uniform partition `t_k = k * dt`, `k = 0..n`, with `dt = T / n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    n: usize,
    dt: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, n: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidGrid(format!("horizon must be positive, got {horizon}")));
        }
        if n < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2 points, got {n}")));
        }
        Ok(Self { horizon, n, dt: horizon / n as f64 })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n).map(|k| self.time(k)).collect()
    }

    /// Same step, one more point. The last row of a kernel discretized on the
    /// extended grid is the kernel evaluated at `t = T`.
    pub fn extended(&self) -> TimeGrid {
        TimeGrid { horizon: self.horizon + self.dt, n: self.n + 1, dt: self.dt }
    }

    pub fn same_as(&self, other: &TimeGrid) -> bool {
        self.n == other.n && (self.dt - other.dt).abs() <= 1e-14 * self.dt.max(other.dt)
    }
}

pub fn build_grid(horizon: f64, n: usize) -> Result<TimeGrid> {
    TimeGrid::new(horizon, n)
}

/// Closed-form kernel families, all vanishing for `s >= t`.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelFamily {
    /// `c * exp(-rho (t - s))`
    ExponentialDecay { c: f64, rho: f64 },
    /// `c * (t - s)^(-alpha)` with `0 < alpha < 1/2`
    PowerLaw { c: f64, alpha: f64 },
    /// `1_{0 <= t - s < tau}`
    DelayIndicator { tau: f64 },
    ConstantLower { c: f64 },
    /// Already cell-averaged values, row-major `n x n`.
    Tabulated(Vec<Vec<f64>>),
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub scale: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily) -> Self {
        Self { family, scale: 1.0 }
    }

    pub fn scaled(family: KernelFamily, scale: f64) -> Self {
        Self { family, scale }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InadmissibleKernel(m));
        if !self.scale.is_finite() {
            return bad("non-finite scale".into());
        }
        match &self.family {
            KernelFamily::ExponentialDecay { c, rho } => {
                if !(c.is_finite() && rho.is_finite()) || *rho < 0.0 {
                    return bad(format!("exponential decay needs finite c and rho >= 0, got c={c}, rho={rho}"));
                }
            }
            KernelFamily::PowerLaw { c, alpha } => {
                if !c.is_finite() || !(*alpha > 0.0 && *alpha < 0.5) {
                    return bad(format!("power law exponent must lie in (0, 1/2), got {alpha}"));
                }
            }
            KernelFamily::DelayIndicator { tau } => {
                if !(tau.is_finite() && *tau >= 0.0) {
                    return bad(format!("delay must be nonnegative, got {tau}"));
                }
            }
            KernelFamily::ConstantLower { c } => {
                if !c.is_finite() {
                    return bad("non-finite constant".into());
                }
            }
            KernelFamily::Tabulated(rows) => {
                if rows.iter().flatten().any(|v| !v.is_finite()) {
                    return bad("non-finite tabulated entry".into());
                }
            }
            KernelFamily::Zero => {}
        }
        Ok(())
    }

    /// `Phi(x) = int_0^x (x - z) k(z) dz`, zero for `x <= 0`.
    fn second_antiderivative(&self, x: f64) -> Option<f64> {
        if x <= 0.0 {
            return Some(0.0);
        }
        let v = match &self.family {
            KernelFamily::ExponentialDecay { c, rho } => {
                if *rho == 0.0 {
                    c * x * x / 2.0
                } else {
                    c * (x / rho - (1.0 - (-rho * x).exp()) / (rho * rho))
                }
            }
            KernelFamily::PowerLaw { c, alpha } => c * x.powf(2.0 - alpha) / ((1.0 - alpha) * (2.0 - alpha)),
            KernelFamily::DelayIndicator { tau } => {
                if x <= *tau {
                    x * x / 2.0
                } else {
                    tau * x - tau * tau / 2.0
                }
            }
            KernelFamily::ConstantLower { c } => c * x * x / 2.0,
            KernelFamily::Zero => 0.0,
            KernelFamily::Tabulated(_) => return None,
        };
        Some(self.scale * v)
    }

    /// Integral of the kernel over lags `x in [lo, hi]`, `0 <= lo <= hi`.
    fn lag_integral(&self, lo: f64, hi: f64) -> f64 {
        let v = match &self.family {
            KernelFamily::ExponentialDecay { c, rho } => {
                if *rho == 0.0 {
                    c * (hi - lo)
                } else {
                    c * ((-rho * lo).exp() - (-rho * hi).exp()) / rho
                }
            }
            KernelFamily::PowerLaw { c, alpha } => {
                let p = 1.0 - alpha;
                c * (hi.powf(p) - lo.powf(p)) / p
            }
            KernelFamily::DelayIndicator { tau } => (hi.min(*tau) - lo).max(0.0),
            KernelFamily::ConstantLower { c } => c * (hi - lo),
            KernelFamily::Tabulated(_) | KernelFamily::Zero => 0.0,
        };
        self.scale * v
    }
}

/// An `n x n` discretized kernel. `volterra` marks strictly lower-triangular values.
#[derive(Debug, Clone, PartialEq)]
pub struct GridKernel {
    grid: TimeGrid,
    values: DMatrix<f64>,
    volterra: bool,
}

impl GridKernel {
    pub fn zero(grid: TimeGrid) -> Self {
        Self { grid, values: DMatrix::zeros(grid.n(), grid.n()), volterra: true }
    }

    /// Wraps raw values; the Volterra flag is set when the matrix is strictly lower-triangular.
    pub fn from_values(grid: TimeGrid, values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() != grid.n() || values.ncols() != grid.n() {
            return Err(Error::ShapeError(format!(
                "kernel is {}x{}, grid has {} points",
                values.nrows(),
                values.ncols(),
                grid.n()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InadmissibleKernel("non-finite kernel entry".into()));
        }
        let volterra = strictly_lower(&values);
        Ok(Self { grid, values, volterra })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n(&self) -> usize {
        self.grid.n()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    pub fn is_volterra(&self) -> bool {
        self.volterra
    }

    /// Lower-triangular including the diagonal.
    pub fn is_lower_triangular(&self) -> bool {
        let n = self.n();
        (0..n).all(|i| (i + 1..n).all(|j| self.values[(i, j)] == 0.0))
    }

    pub fn scaled(&self, c: f64) -> GridKernel {
        GridKernel { grid: self.grid, values: &self.values * c, volterra: self.volterra }
    }

    /// `sum_k c_k K_k` over kernels sharing one grid.
    pub fn combination(terms: &[(f64, &GridKernel)]) -> Result<GridKernel> {
        let first = terms.first().ok_or_else(|| Error::ShapeError("empty combination".into()))?;
        let grid = *first.1.grid();
        let mut values = DMatrix::zeros(grid.n(), grid.n());
        for (c, k) in terms {
            same_grid(&grid, k.grid())?;
            values += k.values() * *c;
        }
        GridKernel::from_values(grid, values)
    }

    pub fn add(&self, other: &GridKernel) -> Result<GridKernel> {
        GridKernel::combination(&[(1.0, self), (1.0, other)])
    }

    /// Leading `m x m` block on the first `m` grid points.
    pub fn truncate(&self, m: usize) -> Result<GridKernel> {
        let grid = TimeGrid::new(self.grid.dt() * m as f64, m)?;
        GridKernel::from_values(grid, self.values.view((0, 0), (m, m)).into_owned())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.amax()
    }
}

fn strictly_lower(m: &DMatrix<f64>) -> bool {
    let n = m.nrows();
    (0..n).all(|i| (i..n).all(|j| m[(i, j)] == 0.0))
}

fn same_grid(a: &TimeGrid, b: &TimeGrid) -> Result<()> {
    if a.same_as(b) {
        Ok(())
    } else {
        Err(Error::ShapeError(format!("grid mismatch: n={} vs n={}", a.n(), b.n())))
    }
}

pub fn discretize_kernel(spec: &KernelSpec, grid: &TimeGrid) -> Result<GridKernel> {
    spec.validate()?;
    let n = grid.n();
    let dt = grid.dt();
    if let KernelFamily::Tabulated(rows) = &spec.family {
        if rows.len() != n || rows.iter().any(|r| r.len() != n) {
            return Err(Error::ShapeError(format!("tabulated kernel must be {n}x{n}")));
        }
        let values = DMatrix::from_fn(n, n, |i, j| spec.scale * rows[i][j]);
        return GridKernel::from_values(*grid, values);
    }
    let mut values = DMatrix::zeros(n, n);
    for i in 1..n {
        for j in 0..i {
            let lag = (i - j) as f64;
            values[(i, j)] = spec.lag_integral((lag - 1.0) * dt, lag * dt) / dt;
        }
    }
    GridKernel::from_values(*grid, values)
}

fn check_len(k: &GridKernel, len: usize, what: &str) -> Result<()> {
    if k.n() != len {
        return Err(Error::ShapeError(format!("{what} has length {len}, kernel has {} points", k.n())));
    }
    Ok(())
}

/// `(K f)_i = sum_j K[i][j] f_j dt`
pub fn apply(k: &GridKernel, f: &[f64]) -> Result<Vec<f64>> {
    check_len(k, f.len(), "function")?;
    let dt = k.grid().dt();
    let v = k.values() * DVector::from_column_slice(f) * dt;
    Ok(v.iter().copied().collect())
}

pub fn adjoint(k: &GridKernel) -> GridKernel {
    GridKernel { grid: k.grid, values: k.values.transpose(), volterra: false }
}

pub fn grid_inner(f: &[f64], g: &[f64], dt: f64) -> f64 {
    f.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() * dt
}

/// `(G * H)[i][j] = sum_k G[i][k] H[k][j] dt`
pub fn star_product(g: &GridKernel, h: &GridKernel) -> Result<GridKernel> {
    same_grid(g.grid(), h.grid())?;
    let values = g.values() * h.values() * g.grid().dt();
    let mut out = GridKernel::from_values(*g.grid(), values)?;
    if g.is_volterra() && h.is_volterra() {
        // Products of strictly lower matrices are strictly lower; clear rounding noise.
        let n = out.n();
        for i in 0..n {
            for j in i..n {
                out.values[(i, j)] = 0.0;
            }
        }
        out.volterra = true;
    }
    Ok(out)
}

/// Resolvent `R = K + K*R`, i.e. `R = (I - dt K)^{-1} K`.
pub fn resolvent(k: &GridKernel) -> Result<GridKernel> {
    let solver = invert_id_minus(k)?;
    let n = k.n();
    let mut r = DMatrix::zeros(n, n);
    for j in 0..n {
        let col: Vec<f64> = k.values().column(j).iter().copied().collect();
        let x = solver.solve(&col)?;
        r.column_mut(j).copy_from_slice(&x);
    }
    let r = GridKernel::from_values(*k.grid(), r)?;
    let (res, comm) = resolvent_residuals(k, &r)?;
    let scale = 1.0 + r.max_abs();
    if res > 1e-8 * scale || comm > 1e-8 * scale {
        return Err(Error::SingularOperator(format!(
            "resolvent residual {res:.2e}, commutator {comm:.2e}"
        )));
    }
    Ok(r)
}

/// `(max |R - K - K*R|, max |K*R - R*K|)`
pub fn resolvent_residuals(k: &GridKernel, r: &GridKernel) -> Result<(f64, f64)> {
    same_grid(k.grid(), r.grid())?;
    let dt = k.grid().dt();
    let kr = k.values() * r.values() * dt;
    let rk = r.values() * k.values() * dt;
    let res = (r.values() - k.values() - &kr).amax();
    let comm = (kr - rk).amax();
    Ok((res, comm))
}

/// Zeroes columns `j < t_index`.
pub fn mask_from(k: &GridKernel, t_index: usize) -> Result<GridKernel> {
    if t_index >= k.n() {
        return Err(Error::ShapeError(format!("mask index {t_index} out of range for n={}", k.n())));
    }
    let mut out = k.clone();
    for j in 0..t_index {
        out.values.column_mut(j).fill(0.0);
    }
    out.volterra = strictly_lower(&out.values);
    Ok(out)
}

/// Smallest eigenvalue of `(dt/2)(K + K^T)`.
pub fn min_symmetric_eigenvalue(k: &GridKernel) -> f64 {
    let sym = (k.values() + k.values().transpose()) * (0.5 * k.grid().dt());
    sym.symmetric_eigen().eigenvalues.min()
}

/// Checks the discrete quadratic form `f -> sum K[i][j] f_i f_j dt^2`.
///
/// A nonzero strictly lower-triangular matrix always fails this (its symmetric part has
/// zero trace); use [`check_spec_nonneg_definite`] for closed-form families.
pub fn check_nonneg_definite(k: &GridKernel, tol: f64) -> bool {
    min_symmetric_eigenvalue(k) >= -tol
}

/// Galerkin matrix of a closed-form kernel on step functions:
/// `int int_{s<t} k(t, s) f(t) f(s) ds dt = dt^2 f^T M f` for `f` constant on cells.
pub fn galerkin_matrix(spec: &KernelSpec, grid: &TimeGrid) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let n = grid.n();
    let dt = grid.dt();
    let phi = |x: f64| {
        spec.second_antiderivative(x)
            .ok_or_else(|| Error::InadmissibleKernel("tabulated kernels have no closed form".into()))
    };
    let mut by_lag = vec![0.0; n];
    for (l, v) in by_lag.iter_mut().enumerate() {
        let x = l as f64 * dt;
        *v = (phi(x + dt)? - 2.0 * phi(x)? + phi(x - dt)?) / (dt * dt);
    }
    Ok(DMatrix::from_fn(n, n, |i, j| if j <= i { by_lag[i - j] } else { 0.0 }))
}

/// Smallest eigenvalue of the step-function quadratic form relative to `||f||^2`.
/// This is exact for the continuous kernel restricted to step functions.
pub fn spec_min_eigenvalue(spec: &KernelSpec, grid: &TimeGrid) -> Result<f64> {
    if let KernelFamily::Tabulated(_) = spec.family {
        return Ok(min_symmetric_eigenvalue(&discretize_kernel(spec, grid)?));
    }
    let m = galerkin_matrix(spec, grid)?;
    let sym = (&m + m.transpose()) * (0.5 * grid.dt());
    Ok(sym.symmetric_eigen().eigenvalues.min())
}

pub fn check_spec_nonneg_definite(spec: &KernelSpec, grid: &TimeGrid, tol: f64) -> Result<bool> {
    Ok(spec_min_eigenvalue(spec, grid)? >= -tol)
}

/// Solves `h = a + dt B h` for given `a`.
#[derive(Debug, Clone)]
pub enum IdMinusSolver {
    /// Forward substitution for lower-triangular `B`.
    Lower { b: DMatrix<f64>, dt: f64 },
    Dense { lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn> },
}

impl IdMinusSolver {
    pub fn n(&self) -> usize {
        match self {
            IdMinusSolver::Lower { b, .. } => b.nrows(),
            IdMinusSolver::Dense { lu } => lu.l().nrows(),
        }
    }

    pub fn solve(&self, a: &[f64]) -> Result<Vec<f64>> {
        let n = self.n();
        if a.len() != n {
            return Err(Error::ShapeError(format!("rhs length {} vs {n}", a.len())));
        }
        match self {
            IdMinusSolver::Lower { b, dt } => {
                let mut h = vec![0.0; n];
                for i in 0..n {
                    let mut acc = a[i];
                    for j in 0..i {
                        acc += dt * b[(i, j)] * h[j];
                    }
                    h[i] = acc / (1.0 - dt * b[(i, i)]);
                }
                Ok(h)
            }
            IdMinusSolver::Dense { lu } => {
                let x = lu
                    .solve(&DVector::from_column_slice(a))
                    .ok_or_else(|| Error::SingularOperator("LU solve failed".into()))?;
                Ok(x.iter().copied().collect())
            }
        }
    }
}

pub fn invert_id_minus(b: &GridKernel) -> Result<IdMinusSolver> {
    let dt = b.grid().dt();
    let n = b.n();
    if b.is_lower_triangular() {
        for i in 0..n {
            let d = 1.0 - dt * b.get(i, i);
            if d.abs() < SINGULAR_TOL {
                return Err(Error::SingularOperator(format!("pivot {d:.2e} at row {i}")));
            }
        }
        return Ok(IdMinusSolver::Lower { b: b.values().clone(), dt });
    }
    let m = DMatrix::identity(n, n) - b.values() * dt;
    let smin = m.clone().svd(false, false).singular_values.min();
    if smin < SINGULAR_TOL {
        return Err(Error::SingularOperator(format!("smallest singular value {smin:.2e}")));
    }
    Ok(IdMinusSolver::Dense { lu: m.lu() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(t: f64, n: usize) -> TimeGrid {
        TimeGrid::new(t, n).unwrap()
    }

    fn kernel(f: KernelFamily, g: &TimeGrid) -> GridKernel {
        discretize_kernel(&KernelSpec::new(f), g).unwrap()
    }

    #[test]
    fn grid_construction() {
        let g = grid(1.0, 4);
        assert_eq!(g.times(), vec![0.0, 0.25, 0.5, 0.75]);
        assert_eq!(g.dt(), 0.25);
        let g = grid(2.0, 2);
        assert_eq!(g.times(), vec![0.0, 1.0]);
        assert!(matches!(TimeGrid::new(1.0, 0), Err(Error::InvalidGrid(_))));
        assert!(matches!(TimeGrid::new(-1.0, 4), Err(Error::InvalidGrid(_))));
        let g = grid(3.0, 7);
        assert!((g.dt() * 7.0 - 3.0).abs() < 1e-15);
        assert!((g.time(6) - (3.0 - g.dt())).abs() < 1e-15);
    }

    #[test]
    fn constant_and_zero_kernels() {
        let g = grid(1.0, 4);
        let k = kernel(KernelFamily::ConstantLower { c: 1.0 }, &g);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(k.get(i, j), if j < i { 1.0 } else { 0.0 });
            }
        }
        assert!(k.is_volterra());
        let z = kernel(KernelFamily::Zero, &g);
        assert_eq!(z.max_abs(), 0.0);
    }

    #[test]
    fn power_law_first_cell() {
        let g = grid(1.0, 4);
        let k = kernel(KernelFamily::PowerLaw { c: 1.0, alpha: 0.3 }, &g);
        let expected = 0.25f64.powf(-0.3) / 0.7;
        assert!((k.get(1, 0) - expected).abs() < 1e-13);
        let err = discretize_kernel(&KernelSpec::new(KernelFamily::PowerLaw { c: 1.0, alpha: 0.6 }), &g);
        assert!(matches!(err, Err(Error::InadmissibleKernel(_))));
    }

    #[test]
    fn exponential_cell_average_matches_quadrature() {
        let g = grid(2.0, 8);
        let (c, rho) = (1.5, 0.7);
        let k = kernel(KernelFamily::ExponentialDecay { c, rho }, &g);
        let dt = g.dt();
        for i in 1..8 {
            for j in 0..i {
                // midpoint rule with many sub-cells
                let m = 2000;
                let h = dt / m as f64;
                let avg: f64 = (0..m)
                    .map(|q| {
                        let s = g.time(j) + (q as f64 + 0.5) * h;
                        c * (-rho * (g.time(i) - s)).exp()
                    })
                    .sum::<f64>()
                    / m as f64;
                assert!((k.get(i, j) - avg).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn delay_indicator_partial_cells() {
        let g = grid(1.0, 4);
        let k = kernel(KernelFamily::DelayIndicator { tau: 0.375 }, &g);
        // lags (i-j-1)dt..(i-j)dt intersected with [0, 0.375)
        assert_eq!(k.get(1, 0), 1.0);
        assert!((k.get(2, 0) - 0.5).abs() < 1e-15);
        assert_eq!(k.get(3, 0), 0.0);
        let long = kernel(KernelFamily::DelayIndicator { tau: 2.0 }, &g);
        assert_eq!(long, kernel(KernelFamily::ConstantLower { c: 1.0 }, &g));
    }

    #[test]
    fn apply_constant_kernel() {
        let g = grid(1.0, 4);
        let k = kernel(KernelFamily::ConstantLower { c: 1.0 }, &g);
        let out = apply(&k, &[1.0; 4]).unwrap();
        for (i, v) in out.iter().enumerate() {
            assert!((v - g.time(i)).abs() < 1e-15);
        }
        let z = kernel(KernelFamily::Zero, &g);
        assert_eq!(apply(&z, &[3.0, 1.0, 2.0, 5.0]).unwrap(), vec![0.0; 4]);
        assert!(matches!(apply(&k, &[1.0; 3]), Err(Error::ShapeError(_))));
    }

    #[test]
    fn adjoint_properties() {
        let g = grid(1.0, 6);
        let k = kernel(KernelFamily::ExponentialDecay { c: 1.0, rho: 2.0 }, &g);
        let kk = adjoint(&adjoint(&k));
        assert_eq!(kk.values(), k.values());
        assert!(!adjoint(&k).is_volterra());
        let z = GridKernel::zero(g);
        assert_eq!(adjoint(&z).max_abs(), 0.0);
        let f = [0.3, -1.0, 2.0, 0.5, 0.1, -0.7];
        let h = [1.0, 0.2, -0.4, 0.9, 1.1, 0.0];
        let lhs = grid_inner(&f, &apply(&k, &h).unwrap(), g.dt());
        let rhs = grid_inner(&apply(&adjoint(&k), &f).unwrap(), &h, g.dt());
        assert!((lhs - rhs).abs() < 1e-14);
    }

    #[test]
    fn star_product_constant() {
        let g = grid(1.0, 4);
        let k = kernel(KernelFamily::ConstantLower { c: 1.0 }, &g);
        let p = star_product(&k, &k).unwrap();
        assert!((p.get(3, 0) - 0.5).abs() < 1e-15);
        assert!(p.is_volterra());
        let z = GridKernel::zero(g);
        assert_eq!(star_product(&k, &z).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn resolvent_of_constant_kernel() {
        let g = grid(1.0, 256);
        let k = kernel(KernelFamily::ConstantLower { c: 1.0 }, &g);
        let r = resolvent(&k).unwrap();
        let (res, comm) = resolvent_residuals(&k, &r).unwrap();
        assert!(res <= 1e-10 && comm <= 1e-10);
        let mut err: f64 = 0.0;
        for i in 0..256 {
            for j in 0..i {
                err = err.max((r.get(i, j) - (g.time(i) - g.time(j)).exp()).abs());
            }
        }
        assert!(err <= 5e-2, "max error {err}");
        assert_eq!(resolvent(&GridKernel::zero(g)).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn resolvent_dense_kernel() {
        let g = grid(1.0, 10);
        let v = DMatrix::from_fn(10, 10, |i, j| 0.3 * ((i * 7 + j * 3) % 5) as f64 - 0.4);
        let k = GridKernel::from_values(g, v).unwrap();
        let r = resolvent(&k).unwrap();
        let (res, comm) = resolvent_residuals(&k, &r).unwrap();
        assert!(res <= 1e-10 && comm <= 1e-10);
    }

    #[test]
    fn mask_semantics() {
        let g = grid(1.0, 5);
        let k = kernel(KernelFamily::ExponentialDecay { c: 1.0, rho: 1.0 }, &g);
        assert_eq!(mask_from(&k, 0).unwrap(), k);
        let last = mask_from(&k, 4).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                assert_eq!(last.get(i, j), 0.0);
            }
        }
        assert_eq!(mask_from(&GridKernel::zero(g), 2).unwrap().max_abs(), 0.0);
        assert!(mask_from(&k, 5).is_err());
    }

    #[test]
    fn galerkin_matches_quadrature() {
        let g = grid(1.0, 4);
        let spec = KernelSpec::new(KernelFamily::ExponentialDecay { c: 1.0, rho: 2.0 });
        let m = galerkin_matrix(&spec, &g).unwrap();
        let dt = g.dt();
        let q = 400;
        let h = dt / q as f64;
        for (i, j) in [(0usize, 0usize), (2, 1), (3, 0)] {
            let mut acc = 0.0;
            for a in 0..q {
                for b in 0..q {
                    let t = g.time(i) + (a as f64 + 0.5) * h;
                    let s = g.time(j) + (b as f64 + 0.5) * h;
                    if s < t {
                        acc += (-2.0 * (t - s)).exp() * h * h;
                    } else if s == t {
                        acc += 0.5 * h * h;
                    }
                }
            }
            assert!((m[(i, j)] * dt * dt - acc).abs() < 1e-5, "({i},{j})");
        }
    }

    #[test]
    fn nonneg_definiteness() {
        let g = grid(1.0, 64);
        assert!(check_nonneg_definite(&GridKernel::zero(g), 1e-8));
        let e = kernel(KernelFamily::ExponentialDecay { c: 1.0, rho: 1.0 }, &g);
        assert!(!check_nonneg_definite(&e, 1e-8));
        for f in [
            KernelFamily::ExponentialDecay { c: 1.0, rho: 1.0 },
            KernelFamily::PowerLaw { c: 2.0, alpha: 0.4 },
            KernelFamily::ConstantLower { c: 0.5 },
            KernelFamily::Zero,
        ] {
            assert!(check_spec_nonneg_definite(&KernelSpec::new(f), &g, 1e-8).unwrap());
        }
        let neg = KernelSpec::scaled(KernelFamily::ConstantLower { c: 1.0 }, -1.0);
        assert!(!check_spec_nonneg_definite(&neg, &g, 1e-8).unwrap());
        let g2 = grid(1.0, 2);
        let mut v = DMatrix::zeros(2, 2);
        v[(1, 0)] = -5.0;
        let bad = GridKernel::from_values(g2, v).unwrap();
        assert!(!check_nonneg_definite(&bad, 1e-8));
    }

    #[test]
    fn id_minus_inverse() {
        let g = grid(1.0, 256);
        let z = invert_id_minus(&GridKernel::zero(g)).unwrap();
        let a: Vec<f64> = (0..256).map(|i| (i as f64).sin()).collect();
        assert_eq!(z.solve(&a).unwrap(), a);
        assert_eq!(z.solve(&vec![0.0; 256]).unwrap(), vec![0.0; 256]);
        let b = kernel(KernelFamily::ConstantLower { c: -1.0 }, &g);
        let h = invert_id_minus(&b).unwrap().solve(&vec![1.0; 256]).unwrap();
        let err = (0..256).map(|i| (h[i] - (-g.time(i)).exp()).abs()).fold(0.0, f64::max);
        assert!(err <= 5e-2);
    }

    #[test]
    fn id_minus_dense_matches_definition() {
        let g = grid(1.0, 6);
        let v = DMatrix::from_fn(6, 6, |i, j| ((i + 2 * j) % 4) as f64 * 0.5 - 0.6);
        let b = GridKernel::from_values(g, v).unwrap();
        let a = [1.0, -2.0, 0.5, 0.0, 3.0, 1.0];
        let h = invert_id_minus(&b).unwrap().solve(&a).unwrap();
        let bh = apply(&b, &h).unwrap();
        for i in 0..6 {
            assert!((h[i] - a[i] - bh[i]).abs() < 1e-12);
        }
    }
}
