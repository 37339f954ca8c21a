//! Stochastic Fredholm equations of the second kind on a grid:
//!
//! `lambda v_k - f_k + sum_{r<=k} K[k][r] v_r dt + sum_{r>=k} L[r][k] E_k[v_r] dt = 0`.
//!
//! Taking `E_k` of the equations at `j >= k` gives a closed system for `x_j = E_k[v_j]`
//! whose matrix `D_k` is the trailing block of `lambda I + dt (K + L^T)`. Its first row
//! yields `v_k = a_k + sum_{r<k} B[k][r] v_r dt` with a path-independent `B`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid_ops::{invert_id_minus, GridKernel, IdMinusSolver, TimeGrid};
use crate::signals::SignalPath;

pub const SELF_ADJOINT_TOL: f64 = 1e-10;
pub const RESIDUAL_TOL: f64 = 1e-9;
/// Largest accepted 1-norm condition number of a `D_k` block.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SelfAdjointPolicy {
    #[default]
    Strict,
    Warn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FredholmProblem {
    pub k: GridKernel,
    pub l: GridKernel,
    pub lambda: f64,
    pub policy: SelfAdjointPolicy,
}

impl FredholmProblem {
    pub fn new(k: GridKernel, l: GridKernel, lambda: f64) -> Self {
        FredholmProblem { k, l, lambda, policy: SelfAdjointPolicy::Strict }
    }

    /// `K = L`, the form used by every game solver.
    pub fn symmetric(k: GridKernel, lambda: f64) -> Self {
        FredholmProblem::new(k.clone(), k, lambda)
    }

    pub fn with_policy(mut self, policy: SelfAdjointPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn grid(&self) -> &TimeGrid {
        self.k.grid()
    }

    pub fn n(&self) -> usize {
        self.k.n()
    }

    /// `max |(K + L^T) - (K + L^T)^T|`
    pub fn self_adjoint_gap(&self) -> f64 {
        let s = self.k.values() + self.l.values().transpose();
        (&s - s.transpose()).amax()
    }

    fn validate(&self) -> Result<Vec<String>> {
        if !self.k.grid().same_as(self.l.grid()) {
            return Err(Error::ShapeError("K and L live on different grids".into()));
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::InvalidParameter(format!("identity scale must be positive, got {}", self.lambda)));
        }
        if !self.k.is_lower_triangular() || !self.l.is_lower_triangular() {
            return Err(Error::InadmissibleKernel("K and L must be Volterra kernels".into()));
        }
        let gap = self.self_adjoint_gap();
        let mut warnings = Vec::new();
        if gap > SELF_ADJOINT_TOL {
            let msg = format!("K + L* asymmetric by {gap:.3e}");
            match self.policy {
                SelfAdjointPolicy::Strict => return Err(Error::NotSelfAdjoint(msg)),
                SelfAdjointPolicy::Warn => warnings.push(msg),
            }
        }
        Ok(warnings)
    }
}

/// Path-independent part of the closed-form solution: the inverses of every `D_k`
/// and the kernel `B`. Build once, then solve any number of paths.
#[derive(Debug, Clone)]
pub struct FredholmOperator {
    problem: FredholmProblem,
    /// `inv[k]` is `D_k^{-1}`, of size `n - k`.
    inv: Vec<DMatrix<f64>>,
    b: GridKernel,
    b_solver: IdMinusSolver,
    conditions: Vec<f64>,
    warnings: Vec<String>,
}

/// Per-path output of [`FredholmOperator::solve`].
#[derive(Debug, Clone, PartialEq)]
pub struct FredholmSolution {
    pub v: Vec<f64>,
    pub a: Vec<f64>,
    /// `surface[k][j] = E_k[v_j]`
    pub surface: DMatrix<f64>,
    pub residual: f64,
}

impl FredholmSolution {
    pub fn as_path(&self) -> SignalPath {
        SignalPath::from_parts(self.v.clone(), self.surface.clone()).expect("consistent shapes")
    }
}

fn norm1(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Solve handles `D_k^{-1}` for `k = 0..n`, with their 1-norm condition numbers.
pub fn build_dt(problem: &FredholmProblem) -> Result<(Vec<DMatrix<f64>>, Vec<f64>)> {
    let n = problem.n();
    let dt = problem.grid().dt();
    let full = DMatrix::identity(n, n) * problem.lambda
        + (problem.k.values() + problem.l.values().transpose()) * dt;
    let blocks: Vec<Result<(DMatrix<f64>, f64)>> = (0..n)
        .into_par_iter()
        .map(|k| {
            let d = full.view((k, k), (n - k, n - k)).into_owned();
            let inv = d
                .clone()
                .try_inverse()
                .ok_or_else(|| Error::SingularOperator(format!("D at index {k} is not invertible")))?;
            let cond = norm1(&d) * norm1(&inv);
            if !cond.is_finite() || cond > MAX_CONDITION {
                return Err(Error::SingularOperator(format!("D at index {k} has condition {cond:.3e}")));
            }
            Ok((inv, cond))
        })
        .collect();
    let mut inv = Vec::with_capacity(n);
    let mut conds = Vec::with_capacity(n);
    for b in blocks {
        let (i, c) = b?;
        inv.push(i);
        conds.push(c);
    }
    Ok((inv, conds))
}

impl FredholmOperator {
    pub fn new(problem: FredholmProblem) -> Result<Self> {
        let warnings = problem.validate()?;
        let (inv, conditions) = build_dt(&problem)?;
        let n = problem.n();
        let mut b = DMatrix::zeros(n, n);
        for k in 1..n {
            let rho = inv[k].row(0);
            for r in 0..k {
                let col = problem.k.values().view((k, r), (n - k, 1));
                b[(k, r)] = -(rho * col)[(0, 0)];
            }
        }
        let b = GridKernel::from_values(*problem.grid(), b)?;
        let b_solver = invert_id_minus(&b)?;
        Ok(FredholmOperator { problem, inv, b, b_solver, conditions, warnings })
    }

    pub fn problem(&self) -> &FredholmProblem {
        &self.problem
    }

    pub fn n(&self) -> usize {
        self.problem.n()
    }

    pub fn b_kernel(&self) -> &GridKernel {
        &self.b
    }

    pub fn d_inverse(&self, k: usize) -> &DMatrix<f64> {
        &self.inv[k]
    }

    pub fn condition_numbers(&self) -> &[f64] {
        &self.conditions
    }

    pub fn max_condition(&self) -> f64 {
        self.conditions.iter().copied().fold(0.0, f64::max)
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    fn check_path(&self, path: &SignalPath) -> Result<()> {
        if path.n() != self.n() {
            return Err(Error::ShapeError(format!("driver on {} points, problem on {}", path.n(), self.n())));
        }
        Ok(())
    }

    /// `a_k = (D_k^{-1} m_k)_0` with `m_k = (E_k f_j)_{j >= k}`.
    pub fn assemble_a(&self, path: &SignalPath) -> Result<Vec<f64>> {
        self.check_path(path)?;
        let n = self.n();
        let s = path.surface();
        Ok((0..n)
            .map(|k| {
                let rho = self.inv[k].row(0);
                (0..n - k).map(|q| rho[q] * s[(k, k + q)]).sum()
            })
            .collect())
    }

    /// Values only, for Monte Carlo loops.
    pub fn solve_values(&self, path: &SignalPath) -> Result<Vec<f64>> {
        let a = self.assemble_a(path)?;
        self.b_solver.solve(&a)
    }

    pub fn solve(&self, path: &SignalPath) -> Result<FredholmSolution> {
        let a = self.assemble_a(path)?;
        let v = self.b_solver.solve(&a)?;
        let surface = self.conditional_solution(&v, path)?;
        let residual = self.residual(&v, &surface, path)?;
        if !(residual <= RESIDUAL_TOL * (1.0 + v.iter().fold(0.0f64, |m, x| m.max(x.abs())))) {
            return Err(Error::SingularOperator(format!("residual {residual:.3e} above tolerance")));
        }
        Ok(FredholmSolution { v, a, surface, residual })
    }

    /// `surface[k][j] = E_k[v_j]`: `v_j` for `j <= k`, else `(D_k^{-1} f^v_k)_{j-k}`.
    pub fn conditional_solution(&self, v: &[f64], path: &SignalPath) -> Result<DMatrix<f64>> {
        self.check_path(path)?;
        let n = self.n();
        let dt = self.problem.grid().dt();
        let kv = self.problem.k.values();
        let s = path.surface();
        let mut out = DMatrix::zeros(n, n);
        for k in 0..n {
            let fv = DVector::from_fn(n - k, |q, _| {
                let j = k + q;
                let past: f64 = (0..k).map(|r| kv[(j, r)] * v[r]).sum();
                s[(k, j)] - past * dt
            });
            let x = &self.inv[k] * fv;
            for j in 0..k {
                out[(k, j)] = v[j];
            }
            for q in 0..n - k {
                out[(k, k + q)] = x[q];
            }
        }
        Ok(out)
    }

    /// Max absolute residual of the discrete equation.
    pub fn residual(&self, v: &[f64], surface: &DMatrix<f64>, path: &SignalPath) -> Result<f64> {
        self.check_path(path)?;
        Ok(equation_residual(&self.problem, v, surface, path))
    }
}

pub fn equation_residual(problem: &FredholmProblem, v: &[f64], surface: &DMatrix<f64>, path: &SignalPath) -> f64 {
    let n = problem.n();
    let dt = problem.grid().dt();
    let (kv, lv) = (problem.k.values(), problem.l.values());
    (0..n)
        .map(|k| {
            let fwd: f64 = (0..=k).map(|r| kv[(k, r)] * v[r]).sum();
            let bwd: f64 = (k..n).map(|r| lv[(r, k)] * surface[(k, r)]).sum();
            (problem.lambda * v[k] - path.value(k) + (fwd + bwd) * dt).abs()
        })
        .fold(0.0, f64::max)
}

pub fn solve(problem: &FredholmProblem, path: &SignalPath) -> Result<FredholmSolution> {
    FredholmOperator::new(problem.clone())?.solve(path)
}

/// Monte Carlo estimate of `sup_k E[(v^N_k - v_k)^2]`; `drivers(p)` returns the
/// `(f^N, f)` pair of path `p`.
pub fn stability_gap<F>(op_n: &FredholmOperator, op_lim: &FredholmOperator, paths: usize, drivers: F) -> Result<f64>
where
    F: Fn(usize) -> Result<(SignalPath, SignalPath)> + Sync,
{
    let n = op_n.n();
    let per_path: Vec<Result<Vec<f64>>> = (0..paths)
        .into_par_iter()
        .map(|p| {
            let (f_n, f) = drivers(p)?;
            let vn = op_n.solve_values(&f_n)?;
            let v = op_lim.solve_values(&f)?;
            Ok(vn.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).collect())
        })
        .collect();
    let mut acc = vec![0.0; n];
    for sq in per_path {
        for (a, s) in acc.iter_mut().zip(sq?) {
            *a += s;
        }
    }
    Ok(acc.iter().map(|a| a / paths as f64).fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_ops::{discretize_kernel, KernelFamily, KernelSpec};
    use crate::signals::{NoiseBundle, NoiseKind, SignalFamily};

    fn kern(f: KernelFamily, g: &TimeGrid) -> GridKernel {
        discretize_kernel(&KernelSpec::new(f), g).unwrap()
    }

    fn ou_path(g: &TimeGrid, seed: u64) -> SignalPath {
        let b = NoiseBundle::new(seed, 1, g);
        crate::signals::simulate(
            &SignalFamily::Ou { kappa: 1.0, sigma: 0.8, x0: 0.5, noise: NoiseKind::Common },
            g,
            &b,
            0,
            None,
        )
        .unwrap()
    }

    #[test]
    fn zero_kernels_divide() {
        let g = TimeGrid::new(1.0, 8).unwrap();
        let z = GridKernel::zero(g);
        let op = FredholmOperator::new(FredholmProblem::symmetric(z, 2.0)).unwrap();
        for k in 0..8 {
            assert!((op.d_inverse(k) - DMatrix::identity(8 - k, 8 - k) * 0.5).amax() < 1e-15);
        }
        assert_eq!(op.b_kernel().max_abs(), 0.0);
        let p = ou_path(&g, 1);
        let sol = op.solve(&p).unwrap();
        for k in 0..8 {
            assert!((sol.v[k] - p.value(k) / 2.0).abs() < 1e-15);
            for j in 0..8 {
                assert!((sol.surface[(k, j)] - p.cond(k, j) / 2.0).abs() < 1e-15);
            }
        }
        assert_eq!(sol.residual, 0.0);
    }

    #[test]
    fn zero_l_gives_minus_k() {
        let g = TimeGrid::new(1.0, 8).unwrap();
        let k = kern(KernelFamily::ExponentialDecay { c: 1.3, rho: 0.5 }, &g);
        let pr = FredholmProblem::new(k.clone(), GridKernel::zero(g), 2.0).with_policy(SelfAdjointPolicy::Warn);
        let op = FredholmOperator::new(pr).unwrap();
        assert!(!op.warnings().is_empty());
        for i in 0..8 {
            for j in 0..i {
                assert!((op.b_kernel().get(i, j) + k.get(i, j) / 2.0).abs() < 1e-14);
            }
        }
        let p = ou_path(&g, 2);
        let a = op.assemble_a(&p).unwrap();
        for i in 0..8 {
            assert!((a[i] - p.value(i) / 2.0).abs() < 1e-14);
        }
    }

    #[test]
    fn strict_policy_rejects_asymmetry() {
        let g = TimeGrid::new(1.0, 8).unwrap();
        let k = kern(KernelFamily::ConstantLower { c: 1.0 }, &g);
        let pr = FredholmProblem::new(k, GridKernel::zero(g), 1.0);
        assert!(matches!(FredholmOperator::new(pr), Err(Error::NotSelfAdjoint(_))));
    }

    /// The double-sum formula for `B`, evaluated with plain loops.
    fn naive_b(k: &GridKernel, l: &GridKernel, lambda: f64) -> DMatrix<f64> {
        let n = k.n();
        let dt = k.grid().dt();
        let mut b = DMatrix::zeros(n, n);
        for t in 0..n {
            let m = n - t;
            let mut d = DMatrix::zeros(m, m);
            for x in 0..m {
                d[(x, x)] += lambda;
                for y in 0..m {
                    d[(x, y)] += dt * (k.get(t + x, t + y) + l.get(t + y, t + x));
                }
            }
            let d = d.lu();
            for j in 0..t {
                let rhs = DVector::from_fn(m, |x, _| k.get(t + x, j));
                let sol = d.solve(&rhs).unwrap();
                let mut inner = 0.0;
                for x in 0..m {
                    inner += l.get(t + x, t) * sol[x] * dt;
                }
                b[(t, j)] = (inner - k.get(t, j)) / lambda;
            }
        }
        b
    }

    #[test]
    fn b_matches_naive_formula() {
        let g = TimeGrid::new(1.0, 8).unwrap();
        let k = kern(KernelFamily::ConstantLower { c: 0.7 }, &g);
        let op = FredholmOperator::new(FredholmProblem::symmetric(k.clone(), 1.0)).unwrap();
        let naive = naive_b(&k, &k, 1.0);
        assert!((op.b_kernel().values() - naive).amax() < 1e-12);
    }

    #[test]
    fn a_matches_naive_loop() {
        let g = TimeGrid::new(1.0, 8).unwrap();
        let k = kern(KernelFamily::ExponentialDecay { c: 1.0, rho: 2.0 }, &g);
        let f: Vec<f64> = (0..8).map(|j| 1.0 + (j as f64).sin()).collect();
        let p = SignalPath::deterministic(f.clone());
        let op = FredholmOperator::new(FredholmProblem::symmetric(k.clone(), 1.5)).unwrap();
        let a = op.assemble_a(&p).unwrap();
        let dt = g.dt();
        for t in 0..8 {
            let m = 8 - t;
            let d = DMatrix::from_fn(m, m, |x, y| {
                (if x == y { 1.5 } else { 0.0 }) + dt * (k.get(t + x, t + y) + k.get(t + y, t + x))
            });
            let sol = d.lu().solve(&DVector::from_fn(m, |x, _| f[t + x])).unwrap();
            let inner: f64 = (0..m).map(|x| k.get(t + x, t) * sol[x] * dt).sum();
            assert!((a[t] - (f[t] - inner) / 1.5).abs() < 1e-12);
        }
        let zero = op.assemble_a(&SignalPath::deterministic(vec![0.0; 8])).unwrap();
        assert!(zero.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn exponential_limit_and_fixed_point() {
        let g = TimeGrid::new(1.0, 256).unwrap();
        let k = kern(KernelFamily::ConstantLower { c: 1.0 }, &g);
        let pr = FredholmProblem::new(k.clone(), GridKernel::zero(g), 1.0).with_policy(SelfAdjointPolicy::Warn);
        let sol = solve(&pr, &SignalPath::deterministic(vec![1.0; 256])).unwrap();
        let err = (0..256).map(|i| (sol.v[i] - (-g.time(i)).exp()).abs()).fold(0.0, f64::max);
        assert!(err <= 5e-2);
        let sol = solve(&FredholmProblem::symmetric(k, 1.0), &SignalPath::deterministic(vec![1.0; 256])).unwrap();
        let err = sol.v.iter().map(|v| (v - 0.5).abs()).fold(0.0, f64::max);
        assert!(err <= 5e-2, "err {err}");
    }

    #[test]
    fn deterministic_surface_is_flat() {
        let g = TimeGrid::new(1.0, 12).unwrap();
        let k = kern(KernelFamily::PowerLaw { c: 0.5, alpha: 0.3 }, &g);
        let p = SignalPath::deterministic((0..12).map(|j| (j as f64 * 0.3).cos()).collect());
        let sol = solve(&FredholmProblem::symmetric(k, 1.0), &p).unwrap();
        for i in 0..12 {
            for j in 0..12 {
                assert!((sol.surface[(i, j)] - sol.v[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn small_exact_case() {
        // n = 4, K = L = constant 1, dt = 1/4, lambda = 1, f = (1, 2, 3, 4):
        // the equation at every index is a linear system in v directly.
        let g = TimeGrid::new(1.0, 4).unwrap();
        let k = kern(KernelFamily::ConstantLower { c: 1.0 }, &g);
        let f = [1.0, 2.0, 3.0, 4.0];
        let sol = solve(&FredholmProblem::symmetric(k, 1.0), &SignalPath::deterministic(f.to_vec())).unwrap();
        let m = DMatrix::from_fn(4, 4, |i, j| {
            (if i == j { 1.0 } else { 0.0 }) + if i != j { 0.25 } else { 0.0 }
        });
        let direct = m.lu().solve(&DVector::from_column_slice(&f)).unwrap();
        for i in 0..4 {
            assert!((sol.v[i] - direct[i]).abs() < 1e-12);
        }
        assert!(sol.residual <= 1e-12);
    }

    #[test]
    fn random_problems_residual_and_linearity() {
        let g = TimeGrid::new(1.0, 64).unwrap();
        let k = kern(KernelFamily::ExponentialDecay { c: 0.8, rho: 1.5 }, &g).add(&kern(KernelFamily::PowerLaw { c: 0.3, alpha: 0.25 }, &g)).unwrap();
        let op = FredholmOperator::new(FredholmProblem::symmetric(k, 1.2)).unwrap();
        let p1 = ou_path(&g, 10);
        let p2 = ou_path(&g, 11);
        let s1 = op.solve(&p1).unwrap();
        let s2 = op.solve(&p2).unwrap();
        assert!(s1.residual <= 1e-9 && s2.residual <= 1e-9);
        let mix = crate::signals::combine(&[(2.0, &p1), (-0.5, &p2)]).unwrap();
        let sm = op.solve(&mix).unwrap();
        for k in 0..64 {
            assert!((sm.v[k] - (2.0 * s1.v[k] - 0.5 * s2.v[k])).abs() < 1e-10);
            assert!((sm.surface[(k, k)] - sm.v[k]).abs() < 1e-12);
        }
        assert_eq!(op.solve_values(&p1).unwrap(), s1.v);
    }

    #[test]
    fn identical_problems_have_zero_gap() {
        let g = TimeGrid::new(1.0, 16).unwrap();
        let k = kern(KernelFamily::ExponentialDecay { c: 1.0, rho: 1.0 }, &g);
        let op = FredholmOperator::new(FredholmProblem::symmetric(k, 1.0)).unwrap();
        let gap = stability_gap(&op, &op, 20, |p| {
            let path = ou_path(&g, p as u64);
            Ok((path.clone(), path))
        })
        .unwrap();
        assert!(gap <= 1e-20);
    }

    #[test]
    fn conditioning_of_masked_blocks() {
        let g = TimeGrid::new(1.0, 32).unwrap();
        for c in [0.5, 1.0, 3.0] {
            let k = kern(KernelFamily::ExponentialDecay { c, rho: 1.0 }, &g);
            let op = FredholmOperator::new(FredholmProblem::symmetric(k, 1.0)).unwrap();
            let c0 = op.condition_numbers()[0];
            assert!(op.condition_numbers().iter().all(|c| *c <= c0 + 1.0));
        }
    }
}
