//! Progressively measurable inputs as linear functionals of Gaussian increments.
//!
//! Every supported family compiles to a [`LinearSignal`]:
//! `f_j = g_j + sum_tag sum_r w_tag[j][r] xi_tag[r]`, where `xi[r]` is the increment over
//! `[t_r, t_{r+1}]`. Conditioning on `F_{t_i}` keeps the increments with `r < i`, so
//! conditional surfaces are exact. Index `n` of `g` and `w` is the horizon `T`.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grid_ops::TimeGrid;

pub const PRNG_NAME: &str = "ChaCha8";

/// Resolved noise source identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NoiseTag {
    Common,
    Player(usize),
}

/// Noise reference as written in a signal family; `Idiosyncratic` binds to the owning player.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    Common,
    Idiosyncratic,
    Player(usize),
}

impl NoiseKind {
    pub fn resolve(&self, player: Option<usize>) -> Result<NoiseTag> {
        match (self, player) {
            (NoiseKind::Common, _) => Ok(NoiseTag::Common),
            (NoiseKind::Player(j), _) => Ok(NoiseTag::Player(*j)),
            (NoiseKind::Idiosyncratic, Some(i)) => Ok(NoiseTag::Player(i)),
            (NoiseKind::Idiosyncratic, None) => Err(Error::UnsupportedSignal(
                "idiosyncratic noise used outside a player context".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SignalFamily {
    /// Grid values of length `n` (terminal value repeats the last) or `n + 1`.
    Deterministic(Vec<f64>),
    /// `x0 + sigma W_t`
    Martingale { sigma: f64, x0: f64, noise: NoiseKind },
    /// Exact discrete Ornstein-Uhlenbeck: `E_{t_i} f_j = f_i exp(-kappa (t_j - t_i))`.
    Ou { kappa: f64, sigma: f64, x0: f64, noise: NoiseKind },
    /// `g_j + sum_r w[j][r] xi_r`; rows of length `n`, `n` or `n + 1` rows.
    BrownianWeighted { g: Vec<f64>, w: Vec<Vec<f64>>, noise: NoiseKind },
    LinearCombination(Vec<(f64, SignalFamily)>),
    Linear(LinearSignal),
}

impl SignalFamily {
    pub fn constant(c: f64) -> Self {
        SignalFamily::Deterministic(vec![c])
    }

    pub fn zero() -> Self {
        SignalFamily::constant(0.0)
    }

    pub fn compile(&self, grid: &TimeGrid, player: Option<usize>) -> Result<LinearSignal> {
        let n = grid.n();
        let times: Vec<f64> = (0..=n).map(|k| grid.time(k)).collect();
        match self {
            SignalFamily::Deterministic(g) => Ok(LinearSignal::deterministic(extend_values(g, n)?)),
            SignalFamily::Martingale { sigma, x0, noise } => {
                check_finite(&[*sigma, *x0])?;
                let tag = noise.resolve(player)?;
                let w = DMatrix::from_fn(n + 1, n, |j, r| if r < j { *sigma } else { 0.0 });
                LinearSignal::new(n, vec![*x0; n + 1], vec![(tag, w)])
            }
            SignalFamily::Ou { kappa, sigma, x0, noise } => {
                check_finite(&[*kappa, *sigma, *x0])?;
                let tag = noise.resolve(player)?;
                let mean = times.iter().map(|t| x0 * (-kappa * t).exp()).collect();
                let w = DMatrix::from_fn(n + 1, n, |j, r| {
                    if r < j {
                        sigma * (-kappa * (times[j] - times[r + 1])).exp()
                    } else {
                        0.0
                    }
                });
                LinearSignal::new(n, mean, vec![(tag, w)])
            }
            SignalFamily::BrownianWeighted { g, w, noise } => {
                let tag = noise.resolve(player)?;
                let mean = extend_values(g, n)?;
                if !(w.len() == n || w.len() == n + 1) || w.iter().any(|row| row.len() != n) {
                    return Err(Error::ShapeError(format!("weights must be {n}x{n} or {}x{n}", n + 1)));
                }
                let w = DMatrix::from_fn(n + 1, n, |j, r| w[j.min(w.len() - 1)][r]);
                LinearSignal::new(n, mean, vec![(tag, w)])
            }
            SignalFamily::LinearCombination(parts) => {
                let mut acc = LinearSignal::deterministic(vec![0.0; n + 1]);
                for (c, fam) in parts {
                    acc = acc.add(&fam.compile(grid, player)?.scale(*c))?;
                }
                Ok(acc)
            }
            SignalFamily::Linear(s) => {
                if s.n() != n {
                    return Err(Error::ShapeError(format!("signal on {} points, grid has {n}", s.n())));
                }
                Ok(s.clone())
            }
        }
    }
}

fn check_finite(xs: &[f64]) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::UnsupportedSignal("non-finite signal parameter".into()))
    }
}

fn extend_values(g: &[f64], n: usize) -> Result<Vec<f64>> {
    check_finite(g)?;
    match g.len() {
        1 => Ok(vec![g[0]; n + 1]),
        l if l == n => {
            let mut v = g.to_vec();
            v.push(g[n - 1]);
            Ok(v)
        }
        l if l == n + 1 => Ok(g.to_vec()),
        l => Err(Error::ShapeError(format!("grid function has length {l}, expected {n} or {}", n + 1))),
    }
}

/// `f_j = mean[j] + sum_tag sum_r w_tag[j][r] xi_tag[r]` for `j = 0..=n`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSignal {
    n: usize,
    mean: Vec<f64>,
    terms: Vec<(NoiseTag, DMatrix<f64>)>,
}

impl LinearSignal {
    pub fn new(n: usize, mean: Vec<f64>, terms: Vec<(NoiseTag, DMatrix<f64>)>) -> Result<Self> {
        if mean.len() != n + 1 {
            return Err(Error::ShapeError(format!("mean has length {}, expected {}", mean.len(), n + 1)));
        }
        for (_, w) in &terms {
            if w.nrows() != n + 1 || w.ncols() != n {
                return Err(Error::ShapeError(format!("weights are {}x{}", w.nrows(), w.ncols())));
            }
        }
        let mut s = LinearSignal { n, mean, terms: Vec::new() };
        for (tag, w) in terms {
            s.push_term(tag, w);
        }
        Ok(s)
    }

    pub fn deterministic(mean: Vec<f64>) -> Self {
        let n = mean.len() - 1;
        LinearSignal { n, mean, terms: Vec::new() }
    }

    fn push_term(&mut self, tag: NoiseTag, w: DMatrix<f64>) {
        match self.terms.iter_mut().find(|(t, _)| *t == tag) {
            Some((_, acc)) => *acc += w,
            None => {
                self.terms.push((tag, w));
                self.terms.sort_by_key(|(t, _)| *t);
            }
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Analytic expectation `E f_j`, `j = 0..=n`.
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn terms(&self) -> &[(NoiseTag, DMatrix<f64>)] {
        &self.terms
    }

    pub fn tags(&self) -> Vec<NoiseTag> {
        self.terms.iter().map(|(t, _)| *t).collect()
    }

    pub fn is_deterministic(&self) -> bool {
        self.terms.iter().all(|(_, w)| w.iter().all(|x| *x == 0.0))
    }

    pub fn is_adapted(&self) -> bool {
        self.terms
            .iter()
            .all(|(_, w)| (0..=self.n).all(|j| (j..self.n).all(|r| w[(j, r)] == 0.0)))
    }

    pub fn add(&self, other: &LinearSignal) -> Result<LinearSignal> {
        if self.n != other.n {
            return Err(Error::ShapeError(format!("signals on {} and {} points", self.n, other.n)));
        }
        let mut out = self.clone();
        for (m, o) in out.mean.iter_mut().zip(&other.mean) {
            *m += o;
        }
        for (tag, w) in &other.terms {
            out.push_term(*tag, w.clone());
        }
        Ok(out)
    }

    pub fn scale(&self, c: f64) -> LinearSignal {
        LinearSignal {
            n: self.n,
            mean: self.mean.iter().map(|m| m * c).collect(),
            terms: self.terms.iter().map(|(t, w)| (*t, w * c)).collect(),
        }
    }

    pub fn combination(parts: &[(f64, &LinearSignal)]) -> Result<LinearSignal> {
        let first = parts.first().ok_or_else(|| Error::ShapeError("empty combination".into()))?;
        let mut acc = LinearSignal::deterministic(vec![0.0; first.1.n + 1]);
        for (c, s) in parts {
            acc = acc.add(&s.scale(*c))?;
        }
        Ok(acc)
    }

    /// Adds a deterministic grid function (length `n` or `n + 1`).
    pub fn shifted(&self, g: &[f64]) -> Result<LinearSignal> {
        self.add(&LinearSignal::deterministic(extend_values(g, self.n)?))
    }

    /// Keeps only the common-noise part, i.e. the expectation over idiosyncratic noise.
    pub fn common_part(&self) -> LinearSignal {
        LinearSignal {
            n: self.n,
            mean: self.mean.clone(),
            terms: self.terms.iter().filter(|(t, _)| *t == NoiseTag::Common).cloned().collect(),
        }
    }

    /// Optional projection `f_j -> E_{t_j} f_j`.
    pub fn adapted_projection(&self) -> LinearSignal {
        let mut out = self.clone();
        for (_, w) in out.terms.iter_mut() {
            for j in 0..=self.n {
                for r in j..self.n {
                    w[(j, r)] = 0.0;
                }
            }
        }
        out
    }

    /// `E[a_i b_j]` for increments of variance `dt` and independent tags.
    pub fn cross_moment(a: &LinearSignal, i: usize, b: &LinearSignal, j: usize, dt: f64) -> f64 {
        let mut acc = a.mean[i] * b.mean[j];
        for (ta, wa) in &a.terms {
            if let Some((_, wb)) = b.terms.iter().find(|(tb, _)| tb == ta) {
                acc += (0..a.n).map(|r| wa[(i, r)] * wb[(j, r)]).sum::<f64>() * dt;
            }
        }
        acc
    }

    /// Realizes values and the conditional surface on one path.
    pub fn realize(&self, noise: &dyn NoiseSource, path: usize) -> SignalPath {
        let incs: Vec<(usize, Vec<f64>)> =
            self.terms.iter().enumerate().map(|(q, (tag, _))| (q, noise.increments(path, *tag))).collect();
        self.realize_with(|q| &incs[q].1)
    }

    /// `incs(q)` returns the increments of the `q`-th term.
    fn realize_with<'a>(&self, incs: impl Fn(usize) -> &'a Vec<f64>) -> SignalPath {
        let n = self.n;
        // prefix[j][i] = sum_{r < i} w[j][r] xi_r
        let mut prefix = DMatrix::<f64>::zeros(n + 1, n + 1);
        for (q, (_, w)) in self.terms.iter().enumerate() {
            let xi = incs(q);
            for j in 0..=n {
                let mut acc = 0.0;
                for r in 0..n {
                    acc += w[(j, r)] * xi[r];
                    prefix[(j, r + 1)] += acc;
                }
            }
        }
        let values: Vec<f64> = (0..=n).map(|j| self.mean[j] + prefix[(j, n)]).collect();
        let surface = DMatrix::from_fn(n, n, |i, j| self.mean[j] + prefix[(j, i.min(j))]);
        let terminal_surface = (0..n).map(|i| self.mean[n] + prefix[(n, i)]).collect();
        SignalPath {
            values: values[..n].to_vec(),
            surface,
            terminal: Some((values[n], terminal_surface)),
        }
    }
}

/// Supplies `N(0, dt)` increments for a path and noise tag.
pub trait NoiseSource: Sync {
    fn increments(&self, path: usize, tag: NoiseTag) -> Vec<f64>;
}

/// Counter-based Gaussian increments: every `(path, tag)` pair owns a ChaCha8 stream.
///
/// Paths are grouped for common noise: paths `p` with equal `p / common_group_size`
/// share the common increments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseBundle {
    seed: u64,
    paths: usize,
    n: usize,
    dt: f64,
    common_group_size: usize,
}

impl NoiseBundle {
    pub fn new(seed: u64, paths: usize, grid: &TimeGrid) -> Self {
        NoiseBundle { seed, paths, n: grid.n(), dt: grid.dt(), common_group_size: 1 }
    }

    pub fn with_common_groups(mut self, group_size: usize) -> Self {
        self.common_group_size = group_size.max(1);
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn common_group_size(&self) -> usize {
        self.common_group_size
    }

    pub fn common_group(&self, path: usize) -> usize {
        path / self.common_group_size
    }

    pub fn common_groups(&self) -> usize {
        self.paths.div_ceil(self.common_group_size)
    }
}

impl NoiseSource for NoiseBundle {
    fn increments(&self, path: usize, tag: NoiseTag) -> Vec<f64> {
        let (key, code) = match tag {
            NoiseTag::Common => (self.common_group(path), 0u64),
            NoiseTag::Player(j) => (path, j as u64 + 1),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((key as u64) << 20) | code);
        let sd = self.dt.sqrt();
        (0..self.n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * sd
            })
            .collect()
    }
}

/// One realized scenario with its conditional surface `surface[i][j] = E_{t_i} f_{t_j}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalPath {
    values: Vec<f64>,
    surface: DMatrix<f64>,
    /// `(f_T, E_{t_i} f_T)` when the signal has a terminal value.
    terminal: Option<(f64, Vec<f64>)>,
}

impl SignalPath {
    pub fn from_parts(values: Vec<f64>, surface: DMatrix<f64>) -> Result<Self> {
        let n = values.len();
        if surface.nrows() != n || surface.ncols() != n {
            return Err(Error::ShapeError(format!(
                "surface is {}x{}, values have length {n}",
                surface.nrows(),
                surface.ncols()
            )));
        }
        Ok(SignalPath { values, surface, terminal: None })
    }

    pub fn deterministic(values: Vec<f64>) -> Self {
        let n = values.len();
        let surface = DMatrix::from_fn(n, n, |_, j| values[j]);
        SignalPath { values, surface, terminal: None }
    }

    pub fn n(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, j: usize) -> f64 {
        self.values[j]
    }

    pub fn surface(&self) -> &DMatrix<f64> {
        &self.surface
    }

    pub fn cond(&self, i: usize, j: usize) -> f64 {
        self.surface[(i, j)]
    }

    pub fn terminal(&self) -> Option<f64> {
        self.terminal.as_ref().map(|t| t.0)
    }

    pub fn terminal_cond(&self, i: usize) -> Option<f64> {
        self.terminal.as_ref().map(|t| t.1[i])
    }

    pub fn scale(&self, c: f64) -> SignalPath {
        SignalPath {
            values: self.values.iter().map(|v| v * c).collect(),
            surface: &self.surface * c,
            terminal: self.terminal.as_ref().map(|(v, s)| (v * c, s.iter().map(|x| x * c).collect())),
        }
    }

    /// Max violation of `surface[i][j] = f_j` for `j <= i`.
    pub fn adaptedness_gap(&self) -> f64 {
        let n = self.n();
        let mut gap: f64 = 0.0;
        for i in 0..n {
            for j in 0..=i {
                gap = gap.max((self.surface[(i, j)] - self.values[j]).abs());
            }
        }
        gap
    }
}

/// `sum_k c_k p_k`, linear in values and surfaces.
pub fn combine(paths: &[(f64, &SignalPath)]) -> Result<SignalPath> {
    let first = paths.first().ok_or_else(|| Error::ShapeError("empty combination".into()))?.1;
    let n = first.n();
    let mut values = vec![0.0; n];
    let mut surface = DMatrix::zeros(n, n);
    let mut terminal = Some((0.0, vec![0.0; n]));
    for (c, p) in paths {
        if p.n() != n {
            return Err(Error::ShapeError(format!("paths on {n} and {} points", p.n())));
        }
        for (v, x) in values.iter_mut().zip(&p.values) {
            *v += c * x;
        }
        surface += &p.surface * *c;
        terminal = match (terminal, &p.terminal) {
            (Some((v, mut s)), Some((pv, ps))) => {
                for (a, b) in s.iter_mut().zip(ps) {
                    *a += c * b;
                }
                Some((v + c * pv, s))
            }
            _ => None,
        };
    }
    Ok(SignalPath { values, surface, terminal })
}

pub fn simulate(
    family: &SignalFamily,
    grid: &TimeGrid,
    bundle: &NoiseBundle,
    path_index: usize,
    player: Option<usize>,
) -> Result<SignalPath> {
    if path_index >= bundle.paths() {
        return Err(Error::InvalidParameter(format!(
            "path {path_index} out of range for {} paths",
            bundle.paths()
        )));
    }
    Ok(family.compile(grid, player)?.realize(bundle, path_index))
}
