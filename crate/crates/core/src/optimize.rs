//! Minimization over products of unitary groups.
//!
//! A point is a list of square unitaries (one per block). Descent moves
//! `V ← exp(−t S) V` along the skew-Hermitian Riemannian gradient `S` with an
//! Armijo backtracking line search; restarts run in parallel and the best one
//! wins, ties going to the lowest restart index.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{argument, Error, Result};
use crate::measurement::EntropyObjective;
use crate::numerics::{expm_skew, haar_unitary};
use crate::{CMat, C64};

const ARMIJO_C: f64 = 1e-4;
const MAX_EXPANSIONS: usize = 6;
const TIE_TOL: f64 = 1e-12;

/// Role of a unitary block; the optimizer treats all kinds alike.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    /// Basis of one party.
    Basis,
    /// Dilation of a rank-one POVM with the given input dimension.
    Povm { input: usize },
    /// One node of a one-way history tree.
    TreeNode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ManifoldBlock {
    pub dim: usize,
    pub kind: BlockKind,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifoldSpec {
    pub blocks: Vec<ManifoldBlock>,
}

impl ManifoldSpec {
    pub fn bases(dims: &[usize]) -> Self {
        Self { blocks: dims.iter().map(|&dim| ManifoldBlock { dim, kind: BlockKind::Basis }).collect() }
    }

    pub fn dims(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.dim).collect()
    }

    /// Real parameter count, `Σ dim²`.
    pub fn n_params(&self) -> usize {
        self.blocks.iter().map(|b| b.dim * b.dim).sum()
    }

    pub fn identity_point(&self) -> Vec<CMat> {
        self.blocks.iter().map(|b| CMat::identity(b.dim, b.dim)).collect()
    }

    fn check_point(&self, point: &[CMat]) -> Result<()> {
        if point.len() != self.blocks.len()
            || point.iter().zip(&self.blocks).any(|(u, b)| u.nrows() != b.dim || u.ncols() != b.dim)
        {
            return argument("point does not match the manifold");
        }
        Ok(())
    }
}

/// Objective on a manifold point. `value_and_gradient` returns the
/// skew-Hermitian `S` per block with `d/dt f(exp(tΩ)V) = 2 Re Tr(S† Ω)`.
pub trait Objective: Sync {
    fn value(&self, point: &[CMat]) -> f64;

    fn value_and_gradient(&self, _point: &[CMat]) -> Option<(f64, Vec<CMat>)> {
        None
    }
}

impl<F: Fn(&[CMat]) -> f64 + Sync> Objective for F {
    fn value(&self, point: &[CMat]) -> f64 {
        self(point)
    }
}

impl Objective for EntropyObjective {
    fn value(&self, point: &[CMat]) -> f64 {
        EntropyObjective::value(self, point)
    }

    fn value_and_gradient(&self, point: &[CMat]) -> Option<(f64, Vec<CMat>)> {
        Some(EntropyObjective::value_and_gradient(self, point))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GradientMode {
    /// Use the objective's gradient, falling back to central differences.
    Analytic,
    /// Central differences with the given step.
    FiniteDifference(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub restarts: usize,
    pub max_iter: usize,
    pub initial_step: f64,
    pub shrink: f64,
    pub min_step: f64,
    /// Stop when the gradient norm falls below this.
    pub tol: f64,
    pub gradient: GradientMode,
    pub seed: u64,
    /// Starting point of restart 1 (e.g. the previous sweep point's optimum).
    pub warm_start: Option<Vec<CMat>>,
    /// Best-two agreement threshold reported in the diagnostics.
    pub agreement_tol: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            restarts: 32,
            max_iter: 2000,
            initial_step: 0.5,
            shrink: 0.5,
            min_step: 1e-6,
            tol: 1e-8,
            gradient: GradientMode::Analytic,
            seed: 0x5eed,
            warm_start: None,
            agreement_tol: 1e-7,
        }
    }
}

impl OptimizerConfig {
    pub fn with_restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_warm_start(mut self, point: Option<Vec<CMat>>) -> Self {
        self.warm_start = point;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 {
            return argument("at least one restart is required");
        }
        if !(self.tol > 0.0) || !(self.min_step > 0.0) || !(self.shrink > 0.0 && self.shrink < 1.0) {
            return argument("tolerance, minimum step and shrink factor must be positive (shrink below 1)");
        }
        if let GradientMode::FiniteDifference(h) = self.gradient {
            if !(1e-7..=1e-3).contains(&h) {
                return argument("finite-difference step must lie in [1e-7, 1e-3]");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostics {
    pub restarts_run: usize,
    pub restarts_failed: usize,
    pub best_restart: usize,
    /// Iterations used by the best restart.
    pub iterations: usize,
    /// Whether the best restart met the gradient tolerance.
    pub converged: bool,
    /// Final value of every restart (`NaN` for abandoned ones).
    pub restart_values: Vec<f64>,
    /// Whether the two lowest restart values agree within `agreement_tol`.
    pub best_two_agree: bool,
}

impl Diagnostics {
    /// Diagnostics of a value that needed no search.
    pub fn trivial() -> Self {
        Self {
            restarts_run: 0,
            restarts_failed: 0,
            best_restart: 0,
            iterations: 0,
            converged: true,
            restart_values: Vec::new(),
            best_two_agree: true,
        }
    }

    /// Combines diagnostics of independent sub-searches.
    pub fn merge(parts: &[Diagnostics]) -> Self {
        let mut d = Self::trivial();
        for p in parts {
            d.restarts_run += p.restarts_run;
            d.restarts_failed += p.restarts_failed;
            d.iterations = d.iterations.max(p.iterations);
            d.converged &= p.converged;
            d.best_two_agree &= p.best_two_agree;
        }
        d
    }
}

#[derive(Clone, Debug)]
pub struct Optimum {
    pub value: f64,
    pub point: Vec<CMat>,
    pub diagnostics: Diagnostics,
}

struct RunResult {
    value: f64,
    point: Vec<CMat>,
    iterations: usize,
    converged: bool,
}

fn retract(point: &[CMat], dir: &[CMat], t: f64) -> Vec<CMat> {
    point
        .iter()
        .zip(dir)
        .map(|(v, s)| expm_skew(&(s * C64::new(-t, 0.0))) * v)
        .collect()
}

fn grad_of<O: Objective + ?Sized>(obj: &O, point: &[CMat], mode: GradientMode) -> (f64, Vec<CMat>) {
    match mode {
        GradientMode::Analytic => obj
            .value_and_gradient(point)
            .unwrap_or_else(|| (obj.value(point), finite_difference_gradient(obj, point, 1e-5))),
        GradientMode::FiniteDifference(h) => (obj.value(point), finite_difference_gradient(obj, point, h)),
    }
}

fn descend<O: Objective + ?Sized>(obj: &O, start: Vec<CMat>, cfg: &OptimizerConfig) -> Option<RunResult> {
    let mut point = start;
    let mut value = obj.value(&point);
    if !value.is_finite() {
        return None;
    }
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iter {
        let (v, grad) = grad_of(obj, &point, cfg.gradient);
        if !v.is_finite() {
            return None;
        }
        value = v;
        let g2: f64 = grad.iter().map(|s| s.norm_squared()).sum();
        if !g2.is_finite() {
            return None;
        }
        if g2.sqrt() < cfg.tol {
            converged = true;
            break;
        }
        iterations += 1;
        let decrease = |t: f64| value - ARMIJO_C * t * 2.0 * g2;
        let mut t = cfg.initial_step;
        let mut trial = retract(&point, &grad, t);
        let mut tv = obj.value(&trial);
        let mut accepted = tv.is_finite() && tv <= decrease(t);
        if accepted {
            for _ in 0..MAX_EXPANSIONS {
                let t2 = 2.0 * t;
                let p2 = retract(&point, &grad, t2);
                let v2 = obj.value(&p2);
                if !(v2.is_finite() && v2 <= decrease(t2) && v2 < tv) {
                    break;
                }
                t = t2;
                trial = p2;
                tv = v2;
            }
        } else {
            while t > cfg.min_step {
                t *= cfg.shrink;
                trial = retract(&point, &grad, t);
                tv = obj.value(&trial);
                if tv.is_finite() && tv <= decrease(t) {
                    accepted = true;
                    break;
                }
            }
        }
        if !accepted {
            // No step of admissible size decreases the objective: a cusp or a
            // gradient at rounding level.
            converged = g2.sqrt() < 1e3 * cfg.tol;
            break;
        }
        let gain = value - tv;
        point = trial;
        value = tv;
        if gain < 1e-15 * value.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    Some(RunResult { value, point, iterations, converged })
}

fn restart_rng(seed: u64, restart: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(restart as u64);
    rng
}

/// Seeded multi-restart descent. Restart 0 starts at the identity, restart 1
/// at `cfg.warm_start` when given, every other one at Haar-random unitaries.
pub fn minimize<O: Objective + ?Sized>(obj: &O, spec: &ManifoldSpec, cfg: &OptimizerConfig) -> Result<Optimum> {
    cfg.validate()?;
    if let Some(w) = &cfg.warm_start {
        spec.check_point(w)?;
    }
    if spec.blocks.is_empty() {
        let value = obj.value(&[]);
        if !value.is_finite() {
            return Err(Error::Optimizer("objective is not finite".into()));
        }
        return Ok(Optimum { value, point: Vec::new(), diagnostics: Diagnostics::trivial() });
    }
    let runs: Vec<Option<RunResult>> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let start = match (r, &cfg.warm_start) {
                (0, _) => spec.identity_point(),
                (1, Some(w)) => w.clone(),
                _ => {
                    let mut rng = restart_rng(cfg.seed, r);
                    spec.blocks.iter().map(|b| haar_unitary(b.dim, &mut rng)).collect()
                }
            };
            descend(obj, start, cfg)
        })
        .collect();
    let restart_values: Vec<f64> = runs.iter().map(|r| r.as_ref().map_or(f64::NAN, |r| r.value)).collect();
    let failed = runs.iter().filter(|r| r.is_none()).count();
    let lowest = restart_values.iter().copied().filter(|v| v.is_finite()).fold(f64::INFINITY, f64::min);
    if !lowest.is_finite() {
        return Err(Error::Optimizer(format!("all {} restarts diverged", cfg.restarts)));
    }
    // Values within TIE_TOL of the minimum count as ties; the lowest index wins.
    let (best_restart, best) = runs
        .iter()
        .enumerate()
        .find_map(|(i, r)| r.as_ref().filter(|r| r.value <= lowest + TIE_TOL).map(|r| (i, r)))
        .expect("a finite restart exists");
    let mut finite: Vec<f64> = restart_values.iter().copied().filter(|v| v.is_finite()).collect();
    finite.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let best_two_agree = finite.len() < 2 || finite[1] - finite[0] <= cfg.agreement_tol;
    Ok(Optimum {
        value: best.value,
        point: best.point.clone(),
        diagnostics: Diagnostics {
            restarts_run: cfg.restarts,
            restarts_failed: failed,
            best_restart,
            iterations: best.iterations,
            converged: best.converged,
            restart_values,
            best_two_agree,
        },
    })
}

/// Single descent from `start`, without restarts.
pub fn local_descent<O: Objective + ?Sized>(obj: &O, start: Vec<CMat>, cfg: &OptimizerConfig) -> Result<Optimum> {
    cfg.validate()?;
    let r = descend(obj, start, cfg).ok_or_else(|| Error::Optimizer("descent diverged".into()))?;
    Ok(Optimum {
        value: r.value,
        point: r.point,
        diagnostics: Diagnostics {
            restarts_run: 1,
            restarts_failed: 0,
            best_restart: 0,
            iterations: r.iterations,
            converged: r.converged,
            restart_values: vec![r.value],
            best_two_agree: true,
        },
    })
}

/// Orthogonal basis of the skew-Hermitian `n × n` matrices.
fn skew_basis(n: usize) -> Vec<CMat> {
    let mut out = Vec::with_capacity(n * n);
    for a in 0..n {
        let mut e = CMat::zeros(n, n);
        e[(a, a)] = C64::new(0.0, 1.0);
        out.push(e);
        for b in a + 1..n {
            let mut re = CMat::zeros(n, n);
            re[(a, b)] = C64::new(1.0, 0.0);
            re[(b, a)] = C64::new(-1.0, 0.0);
            out.push(re);
            let mut im = CMat::zeros(n, n);
            im[(a, b)] = C64::new(0.0, 1.0);
            im[(b, a)] = C64::new(0.0, 1.0);
            out.push(im);
        }
    }
    out
}

/// Central-difference Riemannian gradient, in the same form as
/// [`Objective::value_and_gradient`].
pub fn finite_difference_gradient<O: Objective + ?Sized>(obj: &O, point: &[CMat], h: f64) -> Vec<CMat> {
    let mut grads = Vec::with_capacity(point.len());
    for (bi, v) in point.iter().enumerate() {
        let n = v.nrows();
        let mut s = CMat::zeros(n, n);
        for e in skew_basis(n) {
            let mut plus = point.to_vec();
            let mut minus = point.to_vec();
            plus[bi] = expm_skew(&(&e * C64::new(h, 0.0))) * v;
            minus[bi] = expm_skew(&(&e * C64::new(-h, 0.0))) * v;
            let g = (obj.value(&plus) - obj.value(&minus)) / (2.0 * h);
            s += &e * C64::new(g / (2.0 * e.norm_squared()), 0.0);
        }
        grads.push(s);
    }
    grads
}

/// Qubit basis with Bloch angles `(θ, φ)` for its first vector.
pub fn qubit_basis(theta: f64, phi: f64) -> CMat {
    let (c, s) = ((theta / 2.0).cos(), (theta / 2.0).sin());
    let e = C64::from_polar(1.0, phi);
    CMat::from_row_slice(2, 2, &[C64::new(c, 0.0), -e.conj() * s, e * s, C64::new(c, 0.0)])
}

#[derive(Clone, Debug)]
pub struct GridResult {
    pub value: f64,
    /// Bloch angles `(θ, φ)` per party.
    pub angles: Vec<(f64, f64)>,
    pub bases: Vec<CMat>,
}

const GRID_BUDGET: f64 = 1e8;
const GRID_CANDIDATES: usize = 8;

/// Exhaustive search over qubit bases on a `(steps/2 + 1) × steps` grid of
/// Bloch hemisphere angles per party, then pattern-search refinement of the
/// best grid candidates.
pub fn grid_oracle_qubit_bases<F>(objective: F, parties: usize, steps: usize) -> Result<GridResult>
where
    F: Fn(&[CMat]) -> f64 + Sync,
{
    if parties == 0 || steps < 2 {
        return argument("grid oracle needs at least one party and two steps");
    }
    if (steps as f64).powi(2 * parties as i32) > GRID_BUDGET {
        return Err(Error::Resource(format!("grid of {steps}^{} points exceeds the 1e8 budget", 2 * parties)));
    }
    let n_theta = steps / 2 + 1;
    let angles: Vec<(f64, f64)> = (0..n_theta)
        .flat_map(|i| (0..steps).map(move |j| (PI * i as f64 / steps as f64, 2.0 * PI * j as f64 / steps as f64)))
        .collect();
    let per = angles.len();
    let total = per.pow(parties as u32);
    let table: Vec<CMat> = angles.iter().map(|&(t, p)| qubit_basis(t, p)).collect();
    let mut scored: Vec<(f64, usize)> = (0..total)
        .into_par_iter()
        .map(|mut idx| {
            let mut bases = Vec::with_capacity(parties);
            let flat = idx;
            for _ in 0..parties {
                bases.push(table[idx % per].clone());
                idx /= per;
            }
            (objective(&bases), flat)
        })
        .filter(|(v, _)| v.is_finite())
        .collect();
    if scored.is_empty() {
        return Err(Error::Optimizer("objective is not finite on the grid".into()));
    }
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite").then(a.1.cmp(&b.1)));
    let decode = |mut idx: usize| -> Vec<(f64, f64)> {
        (0..parties)
            .map(|_| {
                let a = angles[idx % per];
                idx /= per;
                a
            })
            .collect()
    };
    let h0 = PI / steps as f64;
    let refined: Vec<(f64, Vec<(f64, f64)>)> = scored
        .iter()
        .take(GRID_CANDIDATES)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|&(v, idx)| pattern_search(&objective, decode(idx), v, h0))
        .collect();
    let (value, best) = refined
        .into_iter()
        .fold(None::<(f64, Vec<(f64, f64)>)>, |acc, r| match acc {
            Some(a) if a.0 <= r.0 => Some(a),
            _ => Some(r),
        })
        .expect("at least one candidate");
    let bases = best.iter().map(|&(t, p)| qubit_basis(t, p)).collect();
    Ok(GridResult { value, angles: best, bases })
}

fn pattern_search<F>(objective: &F, mut x: Vec<(f64, f64)>, mut fx: f64, mut h: f64) -> (f64, Vec<(f64, f64)>)
where
    F: Fn(&[CMat]) -> f64,
{
    let eval = |x: &[(f64, f64)]| {
        let bases: Vec<CMat> = x.iter().map(|&(t, p)| qubit_basis(t, p)).collect();
        objective(&bases)
    };
    while h > 1e-9 {
        let mut improved = false;
        for k in 0..2 * x.len() {
            for sign in [1.0, -1.0] {
                let mut y = x.clone();
                if k % 2 == 0 {
                    y[k / 2].0 += sign * h;
                } else {
                    y[k / 2].1 += sign * h;
                }
                let fy = eval(&y);
                if fy < fx {
                    x = y;
                    fx = fy;
                    improved = true;
                }
            }
        }
        if !improved {
            h *= 0.5;
        }
    }
    (fx, x)
}
