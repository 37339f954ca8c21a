//! The N-player game
//!
//! `J^i = E[-<ubar, A1 ubar> - <u, (lambda id + A2hat) u> - <u, (A3 + A3*) ubar>
//!          + <b^i, u> + <b^{0,i}, ubar>] + c^i`
//!
//! solved as two Fredholm problems: first the population average, then each player
//! against the conditional average.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fredholm::{FredholmOperator, FredholmProblem, FredholmSolution};
use crate::grid_ops::{adjoint, min_symmetric_eigenvalue, GridKernel, TimeGrid};
use crate::signals::{LinearSignal, NoiseSource, SignalFamily, SignalPath};

pub const FOC_TOL: f64 = 1e-8;
pub const CONSISTENCY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GameSpec {
    pub n_players: usize,
    pub lambda: f64,
    pub a1: GridKernel,
    pub a2hat: GridKernel,
    pub a3: GridKernel,
    /// One signal per player.
    pub b: Vec<SignalFamily>,
    /// Either one signal shared by all players or one per player.
    pub b0: Vec<SignalFamily>,
    /// Expected constants `E[c^i]`: empty (zero), one shared value or one per player.
    pub c: Vec<f64>,
    pub grid: TimeGrid,
}

impl GameSpec {
    /// Game with no signals, no constants and zero kernels.
    pub fn zero(grid: TimeGrid, n_players: usize, lambda: f64) -> Self {
        GameSpec {
            n_players,
            lambda,
            a1: GridKernel::zero(grid),
            a2hat: GridKernel::zero(grid),
            a3: GridKernel::zero(grid),
            b: vec![SignalFamily::zero(); n_players],
            b0: vec![SignalFamily::zero()],
            c: Vec::new(),
            grid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_players == 0 {
            return Err(Error::InvalidParameter("at least one player required".into()));
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::InvalidParameter(format!("lambda must be positive, got {}", self.lambda)));
        }
        for (name, k) in [("A1", &self.a1), ("A2hat", &self.a2hat), ("A3", &self.a3)] {
            if !k.grid().same_as(&self.grid) {
                return Err(Error::ShapeError(format!("{name} is not on the game grid")));
            }
            if !k.is_lower_triangular() {
                return Err(Error::InadmissibleKernel(format!("{name} is not a Volterra kernel")));
            }
        }
        if self.b.len() != self.n_players {
            return Err(Error::ShapeError(format!("{} player signals for {} players", self.b.len(), self.n_players)));
        }
        if !(self.b0.len() == 1 || self.b0.len() == self.n_players) {
            return Err(Error::ShapeError(format!("{} common signals for {} players", self.b0.len(), self.n_players)));
        }
        if self.c.len() > 1 && self.c.len() != self.n_players {
            return Err(Error::ShapeError(format!("{} constants for {} players", self.c.len(), self.n_players)));
        }
        Ok(())
    }

    pub fn c_of(&self, i: usize) -> f64 {
        match self.c.len() {
            0 => 0.0,
            1 => self.c[0],
            _ => self.c[i],
        }
    }

    fn b0_family(&self, i: usize) -> &SignalFamily {
        if self.b0.len() == 1 {
            &self.b0[0]
        } else {
            &self.b0[i]
        }
    }
}

/// `G = A1/N^2 + 2 A3/N + A2hat`, `H = A1/N + A3`.
pub fn build_gh(spec: &GameSpec) -> Result<(GridKernel, GridKernel)> {
    let nf = spec.n_players as f64;
    let g = GridKernel::combination(&[(1.0 / (nf * nf), &spec.a1), (2.0 / nf, &spec.a3), (1.0, &spec.a2hat)])?;
    let h = GridKernel::combination(&[(1.0 / nf, &spec.a1), (1.0, &spec.a3)])?;
    Ok((g, h))
}

/// Mean driver `(1/N) sum_i b^i + (1/N^2) sum_i b^{0,i}`.
fn mean_driver(b: &[LinearSignal], b0: &[LinearSignal]) -> Result<LinearSignal> {
    let nf = b.len() as f64;
    let mut parts: Vec<(f64, &LinearSignal)> = b.iter().map(|s| (1.0 / nf, s)).collect();
    parts.extend(b0.iter().map(|s| (1.0 / (nf * nf), s)));
    LinearSignal::combination(&parts)
}

/// Equilibrium on one path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEquilibrium {
    pub mean: FredholmSolution,
    pub players: Vec<FredholmSolution>,
    /// `max_k |(1/N) sum_i u^i_k - ubar_k|`
    pub consistency_gap: f64,
    pub foc_residuals: Vec<f64>,
}

impl PathEquilibrium {
    pub fn ubar(&self) -> &[f64] {
        &self.mean.v
    }

    pub fn u(&self, i: usize) -> &[f64] {
        &self.players[i].v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NashDiagnostics {
    pub max_foc_residual: f64,
    pub max_fredholm_residual: f64,
    pub max_consistency_gap: f64,
    pub mean_condition: f64,
    pub player_condition: f64,
    /// Smallest eigenvalue of `(dt/2)(A + A^T)` for A1, A2hat, A3.
    pub kernel_min_eigenvalues: [f64; 3],
    /// Smallest eigenvalue of the player Hessian `lambda + dt sym(G)`.
    pub hessian_min_eigenvalue: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NashSolution {
    pub paths: Vec<PathEquilibrium>,
    pub diagnostics: NashDiagnostics,
}

/// Monte Carlo estimate with standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
}

impl McEstimate {
    pub fn from_samples(xs: &[f64]) -> McEstimate {
        let m = xs.len();
        let mean = xs.iter().sum::<f64>() / m as f64;
        let var = if m > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1) as f64 } else { 0.0 };
        McEstimate { mean, stderr: (var / m as f64).sqrt(), samples: m }
    }
}

/// Prepared solver: kernels, Fredholm operators and compiled signals.
#[derive(Debug, Clone)]
pub struct NashSolver {
    spec: GameSpec,
    g: GridKernel,
    h: GridKernel,
    k_hat: GridKernel,
    mean_op: FredholmOperator,
    player_op: FredholmOperator,
    b: Vec<LinearSignal>,
    b0: Vec<LinearSignal>,
    mean_signal: LinearSignal,
    consistency_tol: f64,
}

impl NashSolver {
    pub fn new(spec: GameSpec) -> Result<Self> {
        spec.validate()?;
        let nf = spec.n_players as f64;
        let (g, h) = build_gh(&spec)?;
        let k_bar = GridKernel::combination(&[((nf - 1.0) / nf, &h), (1.0, &g)])?;
        let k_hat = GridKernel::combination(&[(1.0, &g), (-1.0 / nf, &h)])?;
        let mean_op = FredholmOperator::new(FredholmProblem::symmetric(k_bar, 2.0 * spec.lambda))?;
        let player_op = FredholmOperator::new(FredholmProblem::symmetric(k_hat.clone(), 2.0 * spec.lambda))?;
        let b = (0..spec.n_players)
            .map(|i| Ok(spec.b[i].compile(&spec.grid, Some(i))?.adapted_projection()))
            .collect::<Result<Vec<_>>>()?;
        let b0 = (0..spec.n_players)
            .map(|i| Ok(spec.b0_family(i).compile(&spec.grid, Some(i))?.adapted_projection()))
            .collect::<Result<Vec<_>>>()?;
        let mean_signal = mean_driver(&b, &b0)?;
        Ok(NashSolver { spec, g, h, k_hat, mean_op, player_op, b, b0, mean_signal, consistency_tol: CONSISTENCY_TOL })
    }

    pub fn with_consistency_tol(mut self, tol: f64) -> Self {
        self.consistency_tol = tol;
        self
    }

    pub fn spec(&self) -> &GameSpec {
        &self.spec
    }

    pub fn g(&self) -> &GridKernel {
        &self.g
    }

    pub fn h(&self) -> &GridKernel {
        &self.h
    }

    pub fn k_hat(&self) -> &GridKernel {
        &self.k_hat
    }

    pub fn mean_operator(&self) -> &FredholmOperator {
        &self.mean_op
    }

    pub fn player_operator(&self) -> &FredholmOperator {
        &self.player_op
    }

    /// Player `i`'s signal `b^i` (optional projection).
    pub fn b_signal(&self, i: usize) -> &LinearSignal {
        &self.b[i]
    }

    pub fn b0_signal(&self, i: usize) -> &LinearSignal {
        &self.b0[i]
    }

    pub fn solve_mean(&self, noise: &dyn NoiseSource, path: usize) -> Result<FredholmSolution> {
        self.mean_op.solve(&self.mean_signal.realize(noise, path))
    }

    /// Driver of player `i`: `b^i + b^{0,i}/N - (H ubar)(k) - (H* E_k ubar)(k)`, with its
    /// conditional surface obtained through the tower property.
    pub fn mean_conditional_drive(
        &self,
        i: usize,
        mean: &FredholmSolution,
        noise: &dyn NoiseSource,
        path: usize,
    ) -> Result<SignalPath> {
        let n = self.spec.grid.n();
        let nf = self.spec.n_players as f64;
        let base = LinearSignal::combination(&[(1.0, &self.b[i]), (1.0 / nf, &self.b0[i])])?.realize(noise, path);
        drive_from_mean(&base, self.h.values(), &mean.surface, self.spec.grid.dt(), n)
    }

    pub fn solve_player(&self, drive: &SignalPath) -> Result<FredholmSolution> {
        self.player_op.solve(drive)
    }

    pub fn solve_path(&self, noise: &dyn NoiseSource, path: usize) -> Result<PathEquilibrium> {
        let mean = self.solve_mean(noise, path)?;
        let nplayers = self.spec.n_players;
        let mut players = Vec::with_capacity(nplayers);
        for i in 0..nplayers {
            let drive = self.mean_conditional_drive(i, &mean, noise, path)?;
            players.push(self.solve_player(&drive)?);
        }
        let n = self.spec.grid.n();
        let nf = nplayers as f64;
        let consistency_gap = (0..n)
            .map(|k| (players.iter().map(|p| p.v[k]).sum::<f64>() / nf - mean.v[k]).abs())
            .fold(0.0, f64::max);
        let mut eq = PathEquilibrium { mean, players, consistency_gap, foc_residuals: Vec::new() };
        eq.foc_residuals = (0..nplayers).map(|i| self.foc_residual(i, &eq, noise, path)).collect::<Result<_>>()?;
        if consistency_gap > self.consistency_tol {
            return Err(Error::ConsistencyViolation(consistency_gap));
        }
        Ok(eq)
    }

    pub fn solve_nash(&self, noise: &dyn NoiseSource, paths: usize) -> Result<NashSolution> {
        let results: Vec<Result<PathEquilibrium>> =
            (0..paths).into_par_iter().map(|p| self.solve_path(noise, p)).collect();
        let paths = results.into_iter().collect::<Result<Vec<_>>>()?;
        let mut d = self.static_diagnostics();
        for eq in &paths {
            d.max_consistency_gap = d.max_consistency_gap.max(eq.consistency_gap);
            d.max_foc_residual = eq.foc_residuals.iter().fold(d.max_foc_residual, |m, r| m.max(*r));
            d.max_fredholm_residual = eq
                .players
                .iter()
                .map(|p| p.residual)
                .fold(d.max_fredholm_residual.max(eq.mean.residual), f64::max);
        }
        Ok(NashSolution { paths, diagnostics: d })
    }

    pub fn static_diagnostics(&self) -> NashDiagnostics {
        let mut warnings: Vec<String> = self.mean_op.warnings().to_vec();
        warnings.extend(self.player_op.warnings().iter().cloned());
        NashDiagnostics {
            max_foc_residual: 0.0,
            max_fredholm_residual: 0.0,
            max_consistency_gap: 0.0,
            mean_condition: self.mean_op.max_condition(),
            player_condition: self.player_op.max_condition(),
            kernel_min_eigenvalues: [
                min_symmetric_eigenvalue(&self.spec.a1),
                min_symmetric_eigenvalue(&self.spec.a2hat),
                min_symmetric_eigenvalue(&self.spec.a3),
            ],
            hessian_min_eigenvalue: self.hessian_min_eigenvalue(),
            warnings,
        }
    }

    /// Smallest eigenvalue of `lambda I + (dt/2)(G + G^T)`; positive means every
    /// player's objective is strictly concave in their own control.
    pub fn hessian_min_eigenvalue(&self) -> f64 {
        self.spec.lambda + min_symmetric_eigenvalue(&self.g)
    }

    /// Max absolute residual of the player-`i` first-order condition
    /// `2 lambda u - b^i - b^{0,i}/N + (H + H*) E ubar + (G + G* - (H + H*)/N) E u^i = 0`.
    pub fn foc_residual(&self, i: usize, eq: &PathEquilibrium, noise: &dyn NoiseSource, path: usize) -> Result<f64> {
        let n = self.spec.grid.n();
        let dt = self.spec.grid.dt();
        let nf = self.spec.n_players as f64;
        let bi = self.b[i].realize(noise, path);
        let b0 = self.b0[i].realize(noise, path);
        let (g, h) = (self.g.values(), self.h.values());
        let ub = &eq.mean.surface;
        let ui = &eq.players[i].surface;
        let mut worst: f64 = 0.0;
        for k in 0..n {
            let mut acc = 2.0 * self.spec.lambda * ui[(k, k)] - bi.value(k) - b0.value(k) / nf;
            let mut integral = 0.0;
            for r in 0..n {
                // E_k of the forward (r <= k) and backward (r >= k) terms
                let hk = if r <= k { h[(k, r)] } else { 0.0 } + if r >= k { h[(r, k)] } else { 0.0 };
                let gk = if r <= k { g[(k, r)] } else { 0.0 } + if r >= k { g[(r, k)] } else { 0.0 };
                integral += hk * ub[(k, r)] + (gk - hk / nf) * ui[(k, r)];
            }
            acc += integral * dt;
            worst = worst.max(acc.abs());
        }
        Ok(worst)
    }

    /// Objective of player `i` on one path given their control `u` and the average `ubar`.
    pub fn objective_path(&self, i: usize, u: &[f64], ubar: &[f64], b: &[f64], b0: &[f64]) -> f64 {
        objective_value(&self.spec, u, ubar, b, b0) + self.spec.c_of(i)
    }

    /// Monte Carlo objective of player `i`; `strategies(p)` returns `(u^i, ubar)` on path `p`.
    pub fn objective<F>(&self, i: usize, noise: &dyn NoiseSource, paths: usize, strategies: F) -> Result<McEstimate>
    where
        F: Fn(usize) -> Result<(Vec<f64>, Vec<f64>)> + Sync,
    {
        let vals: Vec<Result<f64>> = (0..paths)
            .into_par_iter()
            .map(|p| {
                let (u, ubar) = strategies(p)?;
                let b = self.b[i].realize(noise, p);
                let b0 = self.b0[i].realize(noise, p);
                Ok(self.objective_path(i, &u, &ubar, b.values(), b0.values()))
            })
            .collect();
        let vals = vals.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(McEstimate::from_samples(&vals))
    }

    /// Second central difference of `eps -> J^i(u + eps h)` with the other players'
    /// contribution `w = (1/N) sum_{j != i} u^j` fixed.
    pub fn second_difference(&self, i: usize, u: &[f64], w: &[f64], h: &[f64], delta: f64, b: &[f64], b0: &[f64]) -> f64 {
        let nf = self.spec.n_players as f64;
        let eval = |eps: f64| {
            let ui: Vec<f64> = u.iter().zip(h).map(|(a, d)| a + eps * d).collect();
            let ubar: Vec<f64> = w.iter().zip(&ui).map(|(a, x)| a + x / nf).collect();
            self.objective_path(i, &ui, &ubar, b, b0)
        };
        eval(delta) + eval(-delta) - 2.0 * eval(0.0)
    }

    pub fn concavity_check(
        &self,
        i: usize,
        u: &[f64],
        w: &[f64],
        h: &[f64],
        b: &[f64],
        b0: &[f64],
        tol: f64,
    ) -> Result<bool> {
        if h.iter().all(|x| *x == 0.0) {
            return Err(Error::InvalidParameter("concavity direction must be nonzero".into()));
        }
        Ok(self.second_difference(i, u, w, h, 0.1, b, b0) <= tol)
    }
}

/// `d_j` with `E_k d_j = base(k, j) - sum_{r<=j} H[j][r] S[k][r] dt - sum_{r>=j} H[r][j] S[k][r] dt`
/// where `S` is the conditional surface of the mean control.
pub(crate) fn drive_from_mean(
    base: &SignalPath,
    h: &DMatrix<f64>,
    surface: &DMatrix<f64>,
    dt: f64,
    n: usize,
) -> Result<SignalPath> {
    let mut out = DMatrix::zeros(n, n);
    for k in 0..n {
        for j in k..n {
            let fwd: f64 = (0..=j).map(|r| h[(j, r)] * surface[(k, r)]).sum();
            let bwd: f64 = (j..n).map(|r| h[(r, j)] * surface[(k, r)]).sum();
            out[(k, j)] = base.cond(k, j) - (fwd + bwd) * dt;
        }
    }
    let values: Vec<f64> = (0..n).map(|j| out[(j, j)]).collect();
    for k in 0..n {
        for j in 0..k {
            out[(k, j)] = values[j];
        }
    }
    SignalPath::from_parts(values, out)
}

/// Objective without the constant: quadratic terms by grid quadrature.
pub fn objective_value(spec: &GameSpec, u: &[f64], ubar: &[f64], b: &[f64], b0: &[f64]) -> f64 {
    let dt = spec.grid.dt();
    let quad = |k: &GridKernel, x: &[f64], y: &[f64]| -> f64 {
        let n = x.len();
        let v = k.values();
        let mut acc = 0.0;
        for t in 0..n {
            let row: f64 = (0..n).map(|s| v[(t, s)] * y[s]).sum();
            acc += x[t] * row;
        }
        acc * dt * dt
    };
    let inner = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, c)| a * c).sum::<f64>() * dt;
    let a3s = adjoint(&spec.a3);
    -quad(&spec.a1, ubar, ubar) - spec.lambda * inner(u, u) - quad(&spec.a2hat, u, u) - quad(&spec.a3, u, ubar)
        - quad(&a3s, u, ubar)
        + inner(b, u)
        + inner(b0, ubar)
}

pub fn solve_nash(spec: &GameSpec, noise: &dyn NoiseSource, paths: usize) -> Result<NashSolution> {
    NashSolver::new(spec.clone())?.solve_nash(noise, paths)
}
