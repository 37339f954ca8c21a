//! Brute-force Nash equilibria on a finite scenario tree.
//!
//! A single increment per step drives every noise tag. Strategies are node values; the
//! expected objective of each player is a sum over leaves, and stationarity with respect
//! to every node variable of every player gives one dense linear system.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid_ops::TimeGrid;
use crate::nplayer::{objective_value, GameSpec, NashSolver, PathEquilibrium};
use crate::signals::{LinearSignal, NoiseSource, NoiseTag};

pub const MAX_GRID: usize = 10;
/// Dense elimination cap on the number of unknowns.
pub const MAX_UNKNOWNS: usize = 6000;
pub const HESSIAN_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioTree {
    grid: TimeGrid,
    branching: usize,
    /// Number of random increments; later increments are zero.
    depth: usize,
    increments: Vec<f64>,
    probabilities: Vec<f64>,
    offsets: Vec<usize>,
}

pub fn build_tree(grid: &TimeGrid, branching: usize, depth: usize) -> Result<ScenarioTree> {
    let n = grid.n();
    if n > MAX_GRID {
        return Err(Error::SizeExceeded(format!("grid of {n} points exceeds {MAX_GRID}")));
    }
    let sd = grid.dt().sqrt();
    let (increments, probabilities) = match branching {
        1 => (vec![0.0], vec![1.0]),
        2 => (vec![-sd, sd], vec![0.5, 0.5]),
        3 => (vec![-(3.0f64).sqrt() * sd, 0.0, (3.0f64).sqrt() * sd], vec![1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0]),
        b => return Err(Error::InvalidParameter(format!("branching must be 1, 2 or 3, got {b}"))),
    };
    let depth = if branching == 1 { 0 } else { depth.min(n - 1) };
    let mut offsets = Vec::with_capacity(n + 1);
    let mut total = 0usize;
    for k in 0..n {
        offsets.push(total);
        total = total
            .checked_add(branching.pow(k.min(depth) as u32))
            .ok_or_else(|| Error::SizeExceeded("node count overflow".into()))?;
    }
    offsets.push(total);
    if total > MAX_UNKNOWNS {
        return Err(Error::SizeExceeded(format!("{total} nodes")));
    }
    Ok(ScenarioTree { grid: *grid, branching, depth, increments, probabilities, offsets })
}

impl ScenarioTree {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn branching(&self) -> usize {
        self.branching
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn n_nodes(&self) -> usize {
        self.offsets[self.grid.n()]
    }

    pub fn level_size(&self, k: usize) -> usize {
        self.offsets[k + 1] - self.offsets[k]
    }

    pub fn n_leaves(&self) -> usize {
        self.level_size(self.grid.n() - 1)
    }

    fn digits(&self) -> usize {
        self.depth.min(self.grid.n() - 1)
    }

    fn digit(&self, leaf: usize, r: usize) -> usize {
        let l = self.digits();
        (leaf / self.branching.pow((l - 1 - r) as u32)) % self.branching
    }

    /// Global index of the level-`k` node on the way to `leaf`.
    pub fn node(&self, k: usize, leaf: usize) -> usize {
        let l = self.digits();
        let known = k.min(self.depth);
        self.offsets[k] + leaf / self.branching.pow((l - known) as u32)
    }

    pub fn level_of(&self, node: usize) -> usize {
        (0..self.grid.n()).find(|k| node < self.offsets[k + 1]).expect("node in range")
    }

    pub fn leaf_increments(&self, leaf: usize) -> Vec<f64> {
        let n = self.grid.n();
        (0..n).map(|r| if r < self.digits() { self.increments[self.digit(leaf, r)] } else { 0.0 }).collect()
    }

    pub fn leaf_probability(&self, leaf: usize) -> f64 {
        (0..self.digits()).map(|r| self.probabilities[self.digit(leaf, r)]).product()
    }

    pub fn node_probability(&self, node: usize) -> f64 {
        let k = self.level_of(node);
        let known = k.min(self.depth);
        let mut h = node - self.offsets[k];
        let mut p = 1.0;
        for _ in 0..known {
            p *= self.probabilities[h % self.branching];
            h /= self.branching;
        }
        p
    }

    /// Tree expectation of a linear signal at index `j` given the node.
    pub fn node_conditional(&self, signal: &LinearSignal, node: usize, j: usize) -> f64 {
        let k = self.level_of(node);
        let leaves: Vec<usize> = (0..self.n_leaves()).filter(|&w| self.node(k, w) == node).collect();
        let mass: f64 = leaves.iter().map(|&w| self.leaf_probability(w)).sum();
        leaves
            .iter()
            .map(|&w| self.leaf_probability(w) * signal.realize(&TreeNoise { tree: self }, w).value(j))
            .sum::<f64>()
            / mass
    }
}

/// Noise source whose paths are the tree's leaves; every tag sees the same increments.
#[derive(Debug, Clone, Copy)]
pub struct TreeNoise<'a> {
    pub tree: &'a ScenarioTree,
}

impl NoiseSource for TreeNoise<'_> {
    fn increments(&self, path: usize, _tag: NoiseTag) -> Vec<f64> {
        self.tree.leaf_increments(path)
    }
}

/// Node values of every player's equilibrium strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    /// `u[i][node]`
    pub u: Vec<Vec<f64>>,
    pub hessian_min_eigenvalues: Vec<f64>,
}

impl OracleSolution {
    /// Strategy of player `i` along the path to `leaf`.
    pub fn path(&self, tree: &ScenarioTree, i: usize, leaf: usize) -> Vec<f64> {
        (0..tree.grid().n()).map(|k| self.u[i][tree.node(k, leaf)]).collect()
    }

    pub fn mean_path(&self, tree: &ScenarioTree, leaf: usize) -> Vec<f64> {
        let nf = self.u.len() as f64;
        let mut out = vec![0.0; tree.grid().n()];
        for i in 0..self.u.len() {
            for (o, x) in out.iter_mut().zip(self.path(tree, i, leaf)) {
                *o += x / nf;
            }
        }
        out
    }
}

/// Quadratic part `Q_i` and linear part `l_i` of player `i`'s per-leaf objective in the
/// stacked controls `(u^1, ..., u^N)`.
fn leaf_quadratic(spec: &GameSpec, i: usize, b: &[f64], b0: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
    let n = spec.grid.n();
    let np = spec.n_players;
    let nf = np as f64;
    let dt = spec.grid.dt();
    let mut q = DMatrix::zeros(np * n, np * n);
    let mut l = DVector::zeros(np * n);
    for j in 0..np {
        for m in 0..np {
            for t in 0..n {
                for s in 0..n {
                    let mut v = spec.a1.get(t, s) / (nf * nf);
                    if j == i && m == i {
                        v += spec.a2hat.get(t, s) + if t == s { spec.lambda / dt } else { 0.0 };
                    }
                    if j == i {
                        v += (spec.a3.get(t, s) + spec.a3.get(s, t)) / nf;
                    }
                    q[(j * n + t, m * n + s)] = -dt * dt * v;
                }
            }
        }
        for t in 0..n {
            l[j * n + t] = dt * (if j == i { b[t] } else { 0.0 } + b0[t] / nf);
        }
    }
    (q, l)
}

/// Solves the stationarity conditions of all players on the tree.
pub fn discrete_nash_kkt(spec: &GameSpec, tree: &ScenarioTree) -> Result<OracleSolution> {
    spec.validate()?;
    if !spec.grid.same_as(tree.grid()) {
        return Err(Error::ShapeError("tree and game grids differ".into()));
    }
    let n = spec.grid.n();
    let np = spec.n_players;
    let nodes = tree.n_nodes();
    let unknowns = np * nodes;
    if unknowns > MAX_UNKNOWNS {
        return Err(Error::SizeExceeded(format!("{unknowns} unknowns exceed {MAX_UNKNOWNS}")));
    }
    let noise = TreeNoise { tree };
    let b: Vec<LinearSignal> =
        (0..np).map(|i| Ok(spec.b[i].compile(&spec.grid, Some(i))?.adapted_projection())).collect::<Result<_>>()?;
    let b0: Vec<LinearSignal> = (0..np)
        .map(|i| {
            let fam = if spec.b0.len() == 1 { &spec.b0[0] } else { &spec.b0[i] };
            Ok(fam.compile(&spec.grid, Some(i))?.adapted_projection())
        })
        .collect::<Result<_>>()?;

    let mut a = DMatrix::<f64>::zeros(unknowns, unknowns);
    let mut rhs = DVector::<f64>::zeros(unknowns);
    for leaf in 0..tree.n_leaves() {
        let p = tree.leaf_probability(leaf);
        let var = |j: usize, k: usize| j * nodes + tree.node(k, leaf);
        for i in 0..np {
            let bi = b[i].realize(&noise, leaf);
            let b0i = b0[i].realize(&noise, leaf);
            let (q, l) = leaf_quadratic(spec, i, bi.values(), b0i.values());
            let s = &q + q.transpose();
            for t in 0..n {
                let row = i * n + t;
                let r = var(i, t);
                for j in 0..np {
                    for u in 0..n {
                        a[(r, var(j, u))] += p * s[(row, j * n + u)];
                    }
                }
                rhs[r] -= p * l[row];
            }
        }
    }

    let hessian_min_eigenvalues = (0..np)
        .map(|i| {
            let block = a.view((i * nodes, i * nodes), (nodes, nodes));
            let scale: Vec<f64> =
                (0..nodes).map(|v| 1.0 / (tree.node_probability(v) * spec.grid.dt()).sqrt()).collect();
            let h = DMatrix::from_fn(nodes, nodes, |x, y| -block[(x, y)] * scale[x] * scale[y]);
            let h = (&h + h.transpose()) * 0.5;
            h.symmetric_eigen().eigenvalues.min()
        })
        .collect::<Vec<f64>>();
    if let Some((i, e)) = hessian_min_eigenvalues.iter().enumerate().find(|(_, e)| **e < HESSIAN_TOL) {
        return Err(Error::NonConcave(format!("player {i} Hessian eigenvalue {e:.3e}")));
    }

    let x = a
        .clone()
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::SingularSystem(format!("{unknowns} unknowns")))?;
    let res = (&a * &x - &rhs).amax();
    if !(res <= 1e-9 * (1.0 + rhs.amax())) {
        return Err(Error::SingularSystem(format!("elimination residual {res:.3e}")));
    }
    let u = (0..np).map(|i| x.rows(i * nodes, nodes).iter().copied().collect()).collect();
    Ok(OracleSolution { u, hessian_min_eigenvalues })
}

/// Tree-exact expected objective of player `i` for node strategies `u[j][node]`.
pub fn tree_objective(spec: &GameSpec, tree: &ScenarioTree, i: usize, u: &[Vec<f64>]) -> Result<f64> {
    let noise = TreeNoise { tree };
    let np = spec.n_players;
    let nf = np as f64;
    let bi = spec.b[i].compile(&spec.grid, Some(i))?.adapted_projection();
    let fam = if spec.b0.len() == 1 { &spec.b0[0] } else { &spec.b0[i] };
    let b0 = fam.compile(&spec.grid, Some(i))?.adapted_projection();
    let n = spec.grid.n();
    let mut acc = 0.0;
    for leaf in 0..tree.n_leaves() {
        let path = |j: usize| -> Vec<f64> { (0..n).map(|k| u[j][tree.node(k, leaf)]).collect() };
        let ui = path(i);
        let mut ubar = vec![0.0; n];
        for j in 0..np {
            for (o, x) in ubar.iter_mut().zip(path(j)) {
                *o += x / nf;
            }
        }
        let b = bi.realize(&noise, leaf);
        let c = b0.realize(&noise, leaf);
        acc += tree.leaf_probability(leaf) * objective_value(spec, &ui, &ubar, b.values(), c.values());
    }
    Ok(acc + spec.c_of(i))
}

/// Runs the Fredholm-route solver on every leaf of the tree.
pub fn solve_on_tree(solver: &NashSolver, tree: &ScenarioTree) -> Result<Vec<PathEquilibrium>> {
    let noise = TreeNoise { tree };
    (0..tree.n_leaves()).map(|leaf| solver.solve_path(&noise, leaf)).collect()
}

/// Max over leaves, players and times of the strategy difference.
pub fn compare(oracle: &OracleSolution, solver: &[PathEquilibrium], tree: &ScenarioTree) -> f64 {
    let mut worst: f64 = 0.0;
    for (leaf, eq) in solver.iter().enumerate() {
        for i in 0..oracle.u.len() {
            for (a, b) in oracle.path(tree, i, leaf).iter().zip(eq.u(i)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fredholm::{FredholmProblem, SelfAdjointPolicy};
    use crate::grid_ops::{discretize_kernel, GridKernel, KernelFamily, KernelSpec};
    use crate::signals::{NoiseKind, SignalFamily, SignalPath};

    fn kern(f: KernelFamily, g: &TimeGrid) -> GridKernel {
        discretize_kernel(&KernelSpec::new(f), g).unwrap()
    }

    fn small_game(np: usize, n: usize) -> GameSpec {
        let g = TimeGrid::new(1.0, n).unwrap();
        let mut spec = GameSpec::zero(g, np, 0.7);
        spec.a1 = kern(KernelFamily::ExponentialDecay { c: 1.0, rho: 1.0 }, &g);
        spec.a2hat = kern(KernelFamily::ExponentialDecay { c: 0.6, rho: 3.0 }, &g);
        spec.a3 = kern(KernelFamily::ExponentialDecay { c: 0.4, rho: 0.5 }, &g);
        spec.b = (0..np)
            .map(|i| SignalFamily::Ou { kappa: 0.5, sigma: 1.0, x0: 0.3 * i as f64, noise: NoiseKind::Idiosyncratic })
            .collect();
        spec.b0 = vec![SignalFamily::Martingale { sigma: 0.5, x0: 1.0, noise: NoiseKind::Common }];
        spec
    }

    #[test]
    fn tree_structure() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let t1 = build_tree(&g, 1, 3).unwrap();
        assert_eq!(t1.n_nodes(), 4);
        assert_eq!(t1.n_leaves(), 1);
        assert!(t1.leaf_increments(0).iter().all(|x| *x == 0.0));
        let t2 = build_tree(&g, 2, 3).unwrap();
        assert_eq!(t2.n_nodes(), 1 + 2 + 4 + 8);
        let total: f64 = (0..t2.n_leaves()).map(|w| t2.leaf_probability(w)).sum();
        assert!((total - 1.0).abs() < 1e-15);
        let third: f64 =
            (0..t2.n_leaves()).map(|w| t2.leaf_probability(w) * t2.leaf_increments(w)[2].powi(3)).sum();
        assert_eq!(third, 0.0);
        let t3 = build_tree(&g, 3, 2).unwrap();
        let m4: f64 = (0..t3.n_leaves()).map(|w| t3.leaf_probability(w) * t3.leaf_increments(w)[0].powi(4)).sum();
        assert!((m4 - 3.0 * g.dt() * g.dt()).abs() < 1e-15);
        assert!(build_tree(&TimeGrid::new(1.0, 11).unwrap(), 2, 3).is_err());
        assert!(build_tree(&g, 4, 3).is_err());
    }

    #[test]
    fn martingale_node_means() {
        let g = TimeGrid::new(1.0, 5).unwrap();
        let tree = build_tree(&g, 2, 4).unwrap();
        let lin = SignalFamily::Martingale { sigma: 1.0, x0: 0.0, noise: NoiseKind::Common }.compile(&g, None).unwrap();
        for node in 0..tree.n_nodes() {
            let k = tree.level_of(node);
            let leaf = (0..tree.n_leaves()).find(|&w| tree.node(k, w) == node).unwrap();
            let here = lin.realize(&TreeNoise { tree: &tree }, leaf).value(k);
            for j in k..5 {
                assert!((tree.node_conditional(&lin, node, j) - here).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_kernels() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let mut spec = small_game(2, 4);
        spec.a1 = GridKernel::zero(g);
        spec.a2hat = GridKernel::zero(g);
        spec.a3 = GridKernel::zero(g);
        let tree = build_tree(&g, 2, 3).unwrap();
        let sol = discrete_nash_kkt(&spec, &tree).unwrap();
        let noise = TreeNoise { tree: &tree };
        for i in 0..2 {
            let bi = spec.b[i].compile(&g, Some(i)).unwrap();
            let b0 = spec.b0[0].compile(&g, Some(i)).unwrap();
            for leaf in 0..tree.n_leaves() {
                let b = bi.realize(&noise, leaf);
                let c = b0.realize(&noise, leaf);
                let path = sol.path(&tree, i, leaf);
                for k in 0..4 {
                    assert!((path[k] - (b.value(k) + c.value(k) / 2.0) / 1.4).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_player_matches_fredholm() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let mut spec = GameSpec::zero(g, 1, 0.5);
        spec.a2hat = kern(KernelFamily::ConstantLower { c: 1.0 }, &g);
        spec.b = vec![SignalFamily::Deterministic(vec![1.0, 0.5, -0.2, 0.3])];
        let tree = build_tree(&g, 1, 0).unwrap();
        let sol = discrete_nash_kkt(&spec, &tree).unwrap();
        let pr = FredholmProblem::symmetric(spec.a2hat.clone(), 1.0).with_policy(SelfAdjointPolicy::Strict);
        let f = crate::fredholm::solve(&pr, &SignalPath::deterministic(vec![1.0, 0.5, -0.2, 0.3])).unwrap();
        for k in 0..4 {
            assert!((sol.u[0][k] - f.v[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn three_players_match_solver() {
        let spec = small_game(3, 7);
        let tree = build_tree(&spec.grid, 2, 6).unwrap();
        let oracle = discrete_nash_kkt(&spec, &tree).unwrap();
        let solver = NashSolver::new(spec).unwrap();
        let eqs = solve_on_tree(&solver, &tree).unwrap();
        let diff = compare(&oracle, &eqs, &tree);
        assert!(diff <= 1e-8, "diff {diff}");
        for leaf in 0..tree.n_leaves() {
            let m = oracle.mean_path(&tree, leaf);
            for k in 0..7 {
                assert!((m[k] - eqs[leaf].ubar()[k]).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn compare_detects_perturbation() {
        let spec = small_game(2, 4);
        let tree = build_tree(&spec.grid, 2, 3).unwrap();
        let oracle = discrete_nash_kkt(&spec, &tree).unwrap();
        let solver = NashSolver::new(spec).unwrap();
        let mut eqs = solve_on_tree(&solver, &tree).unwrap();
        assert!(compare(&oracle, &eqs, &tree) < 1e-10);
        eqs[0].players[1].v[2] += 1e-3;
        assert!((compare(&oracle, &eqs, &tree) - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn oracle_is_stationary_and_optimal() {
        let spec = small_game(2, 5);
        let tree = build_tree(&spec.grid, 2, 4).unwrap();
        let sol = discrete_nash_kkt(&spec, &tree).unwrap();
        for i in 0..2 {
            let base = tree_objective(&spec, &tree, i, &sol.u).unwrap();
            let h = 1e-4;
            for node in 0..tree.n_nodes() {
                let mut up = sol.u.clone();
                up[i][node] += h;
                let mut dn = sol.u.clone();
                dn[i][node] -= h;
                let grad = (tree_objective(&spec, &tree, i, &up).unwrap()
                    - tree_objective(&spec, &tree, i, &dn).unwrap())
                    / (2.0 * h * tree.node_probability(node) * spec.grid.dt());
                assert!(grad.abs() <= 1e-6, "grad {grad}");
            }
            for q in 0..20 {
                let mut dev = sol.u.clone();
                for node in 0..tree.n_nodes() {
                    dev[i][node] += 0.1 * ((node * 7 + q * 13) as f64).sin();
                }
                assert!(tree_objective(&spec, &tree, i, &dev).unwrap() <= base + 1e-9);
            }
        }
    }

    #[test]
    fn size_cap() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        assert!(matches!(build_tree(&g, 3, 9), Err(Error::SizeExceeded(_))));
        let tree = build_tree(&g, 2, 9).unwrap();
        let mut spec = small_game(2, 10);
        spec.n_players = 6;
        spec.b = vec![SignalFamily::zero(); 6];
        assert!(matches!(discrete_nash_kkt(&spec, &tree), Err(Error::SizeExceeded(_))));
    }
}
