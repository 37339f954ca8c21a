//! Mean-field limits of the N-player game.
//!
//! Two solution maps built on Fredholm problems with identity scale `2 lambda`:
//! `F` with `K = L = A2hat` and `G` with `K = L = A2hat + A3`. The generic-player
//! equilibrium is `mu = G(E[beta] + beta0)`, `v = F(b - A3 mu - A3* E mu)`; the
//! infinite-player game replaces `E[beta] + beta0` by `b_inf`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fredholm::{FredholmOperator, FredholmProblem, FredholmSolution};
use crate::grid_ops::{GridKernel, TimeGrid};
use crate::nplayer::{drive_from_mean, objective_value, GameSpec, McEstimate, NashSolver};
use crate::signals::{LinearSignal, NoiseBundle, NoiseSource, SignalFamily, SignalPath};

/// Declared rate of `(1/N) sum b^i -> b_inf`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HModel {
    /// Exact averaging (deterministic offsets cancelling in pairs).
    Zero,
    /// i.i.d. idiosyncratic signals, `h(N) = sigma^2 / N`.
    InverseN,
}

impl HModel {
    /// Slope bracket for the log-log MSE fit.
    pub fn slope_bracket(&self) -> (f64, f64) {
        match self {
            HModel::Zero => (-2.5, -1.5),
            HModel::InverseN => (-1.4, -0.6),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfgSpec {
    pub lambda: f64,
    pub a1: GridKernel,
    pub a2hat: GridKernel,
    pub a3: GridKernel,
    /// Idiosyncratic part, compiled per player.
    pub beta: SignalFamily,
    /// Common part.
    pub beta0: SignalFamily,
    /// `b^0` of the finite games.
    pub b0: SignalFamily,
    /// Player `i` receives the constant offset `(-1)^i * offset` on top of `beta + beta0`.
    pub offset: f64,
    pub h_model: HModel,
    pub grid: TimeGrid,
}

impl MfgSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::InvalidParameter(format!("lambda must be positive, got {}", self.lambda)));
        }
        for k in [&self.a1, &self.a2hat, &self.a3] {
            if !k.grid().same_as(&self.grid) {
                return Err(Error::ShapeError("kernel is not on the game grid".into()));
            }
        }
        let beta = self.beta.compile(&self.grid, Some(0))?;
        let beta0 = self.beta0.compile(&self.grid, Some(0))?;
        let disjoint = beta.tags().iter().all(|t| !beta0.tags().contains(t));
        if !disjoint {
            return Err(Error::UnsupportedSignal("beta and beta0 must use disjoint noise".into()));
        }
        if beta0.tags().iter().any(|t| *t != crate::signals::NoiseTag::Common) {
            return Err(Error::UnsupportedSignal("beta0 must be driven by common noise only".into()));
        }
        Ok(())
    }

    fn offset_of(&self, i: usize) -> f64 {
        if i.is_multiple_of(2) {
            self.offset
        } else {
            -self.offset
        }
    }

    /// `b^i = beta(player i) + beta0 + offset_i`, projected to be adapted.
    pub fn player_signal(&self, i: usize) -> Result<LinearSignal> {
        let s = self.beta.compile(&self.grid, Some(i))?.add(&self.beta0.compile(&self.grid, Some(i))?)?;
        Ok(s.shifted(&[self.offset_of(i)])?.adapted_projection())
    }

    /// `b_inf = E[beta | common] + beta0`.
    pub fn limit_signal(&self) -> Result<LinearSignal> {
        let s = self.beta.compile(&self.grid, Some(0))?.common_part();
        Ok(s.add(&self.beta0.compile(&self.grid, Some(0))?)?.adapted_projection())
    }

    /// The finite game with `n_players` players.
    pub fn game(&self, n_players: usize) -> Result<GameSpec> {
        let b = (0..n_players).map(|i| Ok(SignalFamily::Linear(self.player_signal(i)?))).collect::<Result<_>>()?;
        Ok(GameSpec {
            n_players,
            lambda: self.lambda,
            a1: self.a1.clone(),
            a2hat: self.a2hat.clone(),
            a3: self.a3.clone(),
            b,
            b0: vec![self.b0.clone()],
            c: Vec::new(),
            grid: self.grid,
        })
    }
}

/// Generic-player or infinite-player equilibrium on one path.
#[derive(Debug, Clone, PartialEq)]
pub struct MfgPath {
    /// `mu` (generic) or `nu` (infinite), common-noise measurable.
    pub mean: FredholmSolution,
    pub v: FredholmSolution,
    pub foc_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfgSolution {
    pub paths: Vec<MfgPath>,
    pub max_foc_residual: f64,
}

/// Prepared solution maps.
#[derive(Debug, Clone)]
pub struct MeanFieldSolver {
    spec: MfgSpec,
    f_op: FredholmOperator,
    g_op: FredholmOperator,
    limit: LinearSignal,
}

impl MeanFieldSolver {
    pub fn new(spec: MfgSpec) -> Result<Self> {
        spec.validate()?;
        let lam = 2.0 * spec.lambda;
        let f_op = FredholmOperator::new(FredholmProblem::symmetric(spec.a2hat.clone(), lam))?;
        let g_op = FredholmOperator::new(FredholmProblem::symmetric(spec.a2hat.add(&spec.a3)?, lam))?;
        let limit = spec.limit_signal()?;
        Ok(MeanFieldSolver { spec, f_op, g_op, limit })
    }

    pub fn spec(&self) -> &MfgSpec {
        &self.spec
    }

    pub fn solve_map_f(&self, x: &SignalPath) -> Result<FredholmSolution> {
        self.f_op.solve(x)
    }

    pub fn solve_map_g(&self, x: &SignalPath) -> Result<FredholmSolution> {
        self.g_op.solve(x)
    }

    pub fn limit_signal(&self) -> &LinearSignal {
        &self.limit
    }

    /// `b - A3 m - A3* E m` with its conditional surface.
    fn shifted_drive(&self, b: &SignalPath, mean: &FredholmSolution) -> Result<SignalPath> {
        let n = self.spec.grid.n();
        drive_from_mean(b, self.spec.a3.values(), &mean.surface, self.spec.grid.dt(), n)
    }

    /// Residual of `2 lambda v + (A2hat + A2hat*) E v + (A3 + A3*) E m = b`.
    pub fn foc_residual(&self, v: &FredholmSolution, mean: &FredholmSolution, b: &SignalPath) -> f64 {
        let n = self.spec.grid.n();
        let dt = self.spec.grid.dt();
        let (a2, a3) = (self.spec.a2hat.values(), self.spec.a3.values());
        (0..n)
            .map(|k| {
                let mut acc = 2.0 * self.spec.lambda * v.v[k] - b.value(k);
                let mut integral = 0.0;
                for r in 0..n {
                    let c2 = if r <= k { a2[(k, r)] } else { 0.0 } + if r >= k { a2[(r, k)] } else { 0.0 };
                    let c3 = if r <= k { a3[(k, r)] } else { 0.0 } + if r >= k { a3[(r, k)] } else { 0.0 };
                    integral += c2 * v.surface[(k, r)] + c3 * mean.surface[(k, r)];
                }
                acc += integral * dt;
                acc.abs()
            })
            .fold(0.0, f64::max)
    }

    /// Mean-field strategy `G(b_inf)` on a path.
    pub fn solve_mean(&self, noise: &dyn NoiseSource, path: usize) -> Result<FredholmSolution> {
        self.g_op.solve(&self.limit.realize(noise, path))
    }

    /// Strategy of a player with signal `b` against the mean-field strategy `mean`.
    pub fn solve_player(&self, b: &SignalPath, mean: &FredholmSolution) -> Result<FredholmSolution> {
        self.f_op.solve(&self.shifted_drive(b, mean)?)
    }

    /// Generic player (player 0 without offset) on one path.
    pub fn solve_generic_path(&self, noise: &dyn NoiseSource, path: usize) -> Result<MfgPath> {
        let mean = self.solve_mean(noise, path)?;
        let b = self
            .spec
            .beta
            .compile(&self.spec.grid, Some(0))?
            .add(&self.spec.beta0.compile(&self.spec.grid, Some(0))?)?
            .adapted_projection()
            .realize(noise, path);
        let v = self.solve_player(&b, &mean)?;
        let foc_residual = self.foc_residual(&v, &mean, &b);
        Ok(MfgPath { mean, v, foc_residual })
    }

    /// Player `i` of the infinite-player game on one path.
    pub fn solve_infinite_path(&self, i: usize, noise: &dyn NoiseSource, path: usize) -> Result<MfgPath> {
        let mean = self.solve_mean(noise, path)?;
        let b = self.spec.player_signal(i)?.realize(noise, path);
        let v = self.solve_player(&b, &mean)?;
        let foc_residual = self.foc_residual(&v, &mean, &b);
        Ok(MfgPath { mean, v, foc_residual })
    }

    pub fn solve_generic(&self, noise: &dyn NoiseSource, paths: usize) -> Result<MfgSolution> {
        collect_paths((0..paths).into_par_iter().map(|p| self.solve_generic_path(noise, p)).collect())
    }

    pub fn solve_infinite(&self, i: usize, noise: &dyn NoiseSource, paths: usize) -> Result<MfgSolution> {
        collect_paths((0..paths).into_par_iter().map(|p| self.solve_infinite_path(i, noise, p)).collect())
    }

    /// Conditional Monte Carlo check of `E[v | common noise] = mu` on every common group.
    pub fn consistency_study(&self, bundle: &NoiseBundle) -> Result<ConsistencyReport> {
        let n = self.spec.grid.n();
        let groups = bundle.common_groups();
        let size = bundle.common_group_size();
        let per_path: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..bundle.paths())
            .into_par_iter()
            .map(|p| {
                let s = self.solve_generic_path(bundle, p)?;
                Ok((s.mean.v, s.v.v))
            })
            .collect();
        let per_path = per_path.into_iter().collect::<Result<Vec<_>>>()?;
        let mut rows = Vec::new();
        let mut common_measurable = true;
        for g in 0..groups {
            let members: Vec<usize> = (g * size..((g + 1) * size).min(bundle.paths())).collect();
            let mu = &per_path[members[0]].0;
            common_measurable &= members.iter().all(|&p| per_path[p].0 == *mu);
            for k in 0..n {
                let xs: Vec<f64> = members.iter().map(|&p| per_path[p].1[k]).collect();
                let est = McEstimate::from_samples(&xs);
                rows.push(ConsistencyRow { group: g, k, mu: mu[k], v_mean: est.mean, stderr: est.stderr });
            }
        }
        // Exact conditional mean through the linear representation.
        let exact_gap = self.exact_consistency_gap(bundle)?;
        Ok(ConsistencyReport { rows, common_measurable, exact_gap })
    }

    /// `max |F(E[b | common] - A3 mu - A3* E mu) - mu|` over the first path of every group.
    fn exact_consistency_gap(&self, bundle: &NoiseBundle) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for g in 0..bundle.common_groups() {
            let p = g * bundle.common_group_size();
            let mean = self.solve_mean(bundle, p)?;
            let eb = self
                .spec
                .beta
                .compile(&self.spec.grid, Some(0))?
                .common_part()
                .add(&self.spec.beta0.compile(&self.spec.grid, Some(0))?)?
                .adapted_projection()
                .realize(bundle, p);
            let v = self.solve_player(&eb, &mean)?;
            worst = v.v.iter().zip(&mean.v).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
        }
        Ok(worst)
    }
}

fn collect_paths(results: Vec<Result<MfgPath>>) -> Result<MfgSolution> {
    let paths = results.into_iter().collect::<Result<Vec<_>>>()?;
    let max_foc_residual = paths.iter().map(|p| p.foc_residual).fold(0.0, f64::max);
    Ok(MfgSolution { paths, max_foc_residual })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyRow {
    pub group: usize,
    pub k: usize,
    pub mu: f64,
    pub v_mean: f64,
    pub stderr: f64,
}

impl ConsistencyRow {
    /// Deviation beyond the rounding floor.
    fn excess(&self) -> f64 {
        ((self.v_mean - self.mu).abs() - 1e-12 * (1.0 + self.mu.abs())).max(0.0)
    }

    pub fn within(&self, bands: f64) -> bool {
        self.excess() <= bands * self.stderr
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    pub rows: Vec<ConsistencyRow>,
    /// Mean-field strategy identical on all paths of a common group.
    pub common_measurable: bool,
    pub exact_gap: f64,
}

impl ConsistencyReport {
    /// Largest deviation in standard errors, ignoring differences at rounding level.
    pub fn max_bands(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| match r.excess() {
                0.0 => 0.0,
                e if r.stderr > 0.0 => e / r.stderr,
                _ => f64::INFINITY,
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceRow {
    pub n_players: usize,
    pub mse_mean: f64,
    pub mse_player: f64,
    /// Slope of the fit over this and all previous rows; `None` for the first row.
    pub slope_mean: Option<f64>,
    pub slope_player: Option<f64>,
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() < 2 || ys.iter().any(|y| *y <= 0.0) {
        return None;
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let m = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / m, ly.iter().sum::<f64>() / m);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    Some(sxy / sxx)
}

/// For each `N`: the N-player mean and player-0 strategies against the infinite-player
/// ones on shared noise, `sup_k` of the path-averaged squared differences.
pub fn convergence_study(spec: &MfgSpec, ns: &[usize], noise: &NoiseBundle) -> Result<Vec<ConvergenceRow>> {
    let mf = MeanFieldSolver::new(spec.clone())?;
    let n = spec.grid.n();
    let limit: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..noise.paths())
        .into_par_iter()
        .map(|p| {
            let s = mf.solve_infinite_path(0, noise, p)?;
            Ok((s.mean.v, s.v.v))
        })
        .collect();
    let limit = limit.into_iter().collect::<Result<Vec<_>>>()?;
    let mut rows: Vec<ConvergenceRow> = Vec::new();
    for &np in ns {
        let solver = NashSolver::new(spec.game(np)?)?;
        let diffs: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..noise.paths())
            .into_par_iter()
            .map(|p| {
                let mean = solver.solve_mean(noise, p)?;
                let drive = solver.mean_conditional_drive(0, &mean, noise, p)?;
                let u = solver.player_operator().solve_values(&drive)?;
                let (nu, v) = &limit[p];
                Ok((
                    (0..n).map(|k| (mean.v[k] - nu[k]).powi(2)).collect(),
                    (0..n).map(|k| (u[k] - v[k]).powi(2)).collect(),
                ))
            })
            .collect();
        let mut acc_m = vec![0.0; n];
        let mut acc_p = vec![0.0; n];
        for d in diffs {
            let (dm, dp) = d?;
            for k in 0..n {
                acc_m[k] += dm[k];
                acc_p[k] += dp[k];
            }
        }
        let m = noise.paths() as f64;
        let mse_mean = acc_m.iter().map(|x| x / m).fold(0.0, f64::max);
        let mse_player = acc_p.iter().map(|x| x / m).fold(0.0, f64::max);
        let mut row = ConvergenceRow { n_players: np, mse_mean, mse_player, slope_mean: None, slope_player: None };
        let xs: Vec<f64> = rows.iter().map(|r| r.n_players as f64).chain([np as f64]).collect();
        let ym: Vec<f64> = rows.iter().map(|r| r.mse_mean).chain([mse_mean]).collect();
        let yp: Vec<f64> = rows.iter().map(|r| r.mse_player).chain([mse_player]).collect();
        row.slope_mean = loglog_slope(&xs, &ym);
        row.slope_player = loglog_slope(&xs, &yp);
        rows.push(row);
    }
    Ok(rows)
}

/// Deviation used by [`eps_nash_gap`].
#[derive(Debug, Clone, PartialEq)]
pub enum Deviation {
    /// The mean-field strategy itself (zero gain).
    MeanField,
    /// A deterministic control.
    Deterministic(Vec<f64>),
    /// Best response in the `n_ref`-player game when the other players' average is
    /// replaced by its mean-field limit `((n_ref - 1)/n_ref) nu`. Depends on the player's
    /// own and the common noise only, so it is the same strategy for every `N`.
    BestResponse { n_ref: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsNashRow {
    pub n_players: usize,
    /// `J(u; v^{-i}) - J(v^i; v^{-i})`
    pub gain: McEstimate,
    /// Gain of the exact best response in the N-player game.
    pub best_response_gain: McEstimate,
}

/// Measured deviation gain of player 0 when all players use infinite-player strategies.
pub fn eps_nash_gap(spec: &MfgSpec, n_players: usize, deviation: &Deviation, noise: &NoiseBundle) -> Result<EpsNashRow> {
    if n_players < 2 {
        return Err(Error::InvalidParameter("at least two players required".into()));
    }
    let mf = MeanFieldSolver::new(spec.clone())?;
    let game = spec.game(n_players)?;
    let solver = NashSolver::new(game.clone())?;
    let n = spec.grid.n();
    let dt = spec.grid.dt();
    let nf = n_players as f64;
    // others' average signal (1/N) sum_{j != 0} b^j
    let others: Vec<LinearSignal> = (1..n_players).map(|j| spec.player_signal(j)).collect::<Result<_>>()?;
    let parts: Vec<(f64, &LinearSignal)> = others.iter().map(|s| (1.0 / nf, s)).collect();
    let others_signal = LinearSignal::combination(&parts)?;
    let (_, h) = crate::nplayer::build_gh(&game)?;
    let full_g = FredholmOperator::new(FredholmProblem::symmetric(solver.g().clone(), 2.0 * spec.lambda))?;
    let ref_ops = match deviation {
        Deviation::BestResponse { n_ref } => {
            let g_ref = NashSolver::new(spec.game(*n_ref)?)?;
            let (gk, hk) = crate::nplayer::build_gh(g_ref.spec())?;
            Some((*n_ref as f64, FredholmOperator::new(FredholmProblem::symmetric(gk, 2.0 * spec.lambda))?, hk))
        }
        _ => None,
    };
    let b_i = spec.player_signal(0)?;
    let b0_sig = spec.b0.compile(&spec.grid, Some(0))?.adapted_projection();
    let base_drive = LinearSignal::combination(&[(1.0, &b_i), (1.0 / nf, &b0_sig)])?;
    let samples: Vec<Result<(f64, f64)>> = (0..noise.paths())
        .into_par_iter()
        .map(|p| {
            let nu = mf.solve_mean(noise, p)?;
            let bi = b_i.realize(noise, p);
            let v_i = mf.solve_player(&bi, &nu)?;
            // w = (1/N) sum_{j != 0} v^j = F((1/N) sum b^j - ((N-1)/N)(A3 nu + A3* E nu))
            let ob = others_signal.realize(noise, p);
            let w_drive = drive_from_mean(&ob, &(spec.a3.values() * ((nf - 1.0) / nf)), &nu.surface, dt, n)?;
            let w = mf.solve_map_f(&w_drive)?;
            let u = match deviation {
                Deviation::MeanField => v_i.v.clone(),
                Deviation::Deterministic(x) => {
                    if x.len() != n {
                        return Err(Error::ShapeError(format!("deviation of length {}", x.len())));
                    }
                    x.clone()
                }
                Deviation::BestResponse { .. } => {
                    let (nr, op, hk) = ref_ops.as_ref().expect("reference operators");
                    let base = LinearSignal::combination(&[(1.0, &b_i), (1.0 / nr, &b0_sig)])?.realize(noise, p);
                    let d = drive_from_mean(&base, &(hk.values() * ((nr - 1.0) / nr)), &nu.surface, dt, n)?;
                    op.solve_values(&d)?
                }
            };
            let br_drive = drive_from_mean(&base_drive.realize(noise, p), h.values(), &w.surface, dt, n)?;
            let br = full_g.solve_values(&br_drive)?;
            let b0 = b0_sig.realize(noise, p);
            let eval = |x: &[f64]| {
                let ubar: Vec<f64> = w.v.iter().zip(x).map(|(a, c)| a + c / nf).collect();
                objective_value(&game, x, &ubar, bi.values(), b0.values())
            };
            let at_eq = eval(&v_i.v);
            Ok((eval(&u) - at_eq, eval(&br) - at_eq))
        })
        .collect();
    let samples = samples.into_iter().collect::<Result<Vec<_>>>()?;
    let gains: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let brs: Vec<f64> = samples.iter().map(|s| s.1).collect();
    Ok(EpsNashRow {
        n_players,
        gain: McEstimate::from_samples(&gains),
        best_response_gain: McEstimate::from_samples(&brs),
    })
}
