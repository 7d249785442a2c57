//! Dense complex linear algebra and information-theoretic functions.
//!
//! Everything here is generic over the real scalar (`f32` or `f64`). The rest of
//! the crate instantiates it at `f64` through the aliases in the crate root.
//!
//! The Hermitian eigendecomposition is the only spectral primitive; matrix
//! logarithms, square roots and exponentials of generators are built on it.

use nalgebra::{DMatrix, DVector, RealField};
use num_complex::Complex;
use num_traits::{One, Zero};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::{CMat, CVec, C64};

/// Real scalar usable by the numerics layer.
pub trait Real: RealField + Copy {
    fn lit(x: f64) -> Self {
        nalgebra::convert(x)
    }

    fn as_f64(self) -> f64 {
        nalgebra::try_convert(self).unwrap_or(f64::NAN)
    }

    /// The tolerance `x`, widened to what the scalar can resolve.
    fn tol(x: f64) -> Self {
        let floor = Self::default_epsilon() * Self::lit(1e3);
        if Self::lit(x) > floor {
            Self::lit(x)
        } else {
            floor
        }
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub type Cplx<T> = Complex<T>;
pub type Mat<T> = DMatrix<Complex<T>>;

const HERMITICITY_TOL: f64 = 1e-10;
const NEGATIVE_EIGEN_TOL: f64 = 1e-10;
const EIGEN_FLOOR: f64 = 1e-12;
const TRACE_TOL: f64 = 1e-10;

/// A Hermitian matrix (density operators, POVM elements, projectors, fixed points).
#[derive(Clone, Debug, PartialEq)]
pub struct HermitianOperator<T: Real = f64> {
    entries: Mat<T>,
}

impl<T: Real> HermitianOperator<T> {
    pub fn new(entries: Mat<T>) -> Result<Self> {
        if entries.nrows() != entries.ncols() || entries.nrows() == 0 {
            return Err(Error::Argument(format!(
                "operator must be square and non-empty, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        let dev = max_abs(&(&entries - entries.adjoint()));
        if dev > T::tol(HERMITICITY_TOL) {
            return Err(Error::Domain(format!(
                "matrix is not Hermitian (deviation {:e})",
                dev.as_f64()
            )));
        }
        Ok(Self::symmetrized(entries))
    }

    /// Wraps a matrix known to be Hermitian up to rounding, removing the rounding.
    pub(crate) fn symmetrized(entries: Mat<T>) -> Self {
        let half = Complex::new(T::lit(0.5), T::zero());
        let sym = (&entries + entries.adjoint()) * half;
        Self { entries: sym }
    }

    pub fn identity(dim: usize) -> Self {
        Self { entries: DMatrix::identity(dim, dim) }
    }

    pub fn maximally_mixed(dim: usize) -> Self {
        let w = Complex::new(T::one() / T::lit(dim as f64), T::zero());
        Self { entries: DMatrix::identity(dim, dim) * w }
    }

    /// `|v><v|` for a (not necessarily normalized) vector.
    pub fn from_pure(v: &DVector<Complex<T>>) -> Self {
        Self::symmetrized(v * v.adjoint())
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn matrix(&self) -> &Mat<T> {
        &self.entries
    }

    pub fn into_matrix(self) -> Mat<T> {
        self.entries
    }

    pub fn trace(&self) -> T {
        self.entries.diagonal().iter().fold(T::zero(), |acc, z| acc + z.re)
    }

    /// Eigenvalues and eigenvectors (columns), in no particular order.
    pub fn eigh(&self) -> (DVector<T>, Mat<T>) {
        let eig = self.entries.clone().symmetric_eigen();
        if eig.eigenvalues.iter().all(|v| v.is_finite()) {
            return (eig.eigenvalues, eig.eigenvectors);
        }
        // The QR iteration can break down on exactly structured input; a
        // fixed unitary conjugation removes the structure.
        for salt in 1..=4 {
            let h = scrambler::<T>(self.dim(), salt);
            let eig = (&h * &self.entries * h.adjoint()).symmetric_eigen();
            if eig.eigenvalues.iter().all(|v| v.is_finite()) {
                return (eig.eigenvalues, h.adjoint() * eig.eigenvectors);
            }
        }
        (eig.eigenvalues, eig.eigenvectors)
    }

    pub fn eigenvalues(&self) -> DVector<T> {
        let vals = self.entries.clone().symmetric_eigenvalues();
        if vals.iter().all(|v| v.is_finite()) {
            vals
        } else {
            self.eigh().0
        }
    }

    /// `W f(Λ) W†`.
    pub fn map_spectrum(&self, f: impl Fn(T) -> T) -> Self {
        let (vals, vecs) = self.eigh();
        let fd = DVector::from_iterator(vals.len(), vals.iter().map(|&v| Complex::new(f(v), T::zero())));
        let scaled = DMatrix::from_fn(vecs.nrows(), vecs.ncols(), |i, j| vecs[(i, j)] * fd[j]);
        Self::symmetrized(&scaled * vecs.adjoint())
    }

    /// Square root with negative rounding noise clamped to zero.
    pub fn sqrt_psd(&self) -> Self {
        self.map_spectrum(|v| if v > T::zero() { v.sqrt() } else { T::zero() })
    }

    /// Checks positivity and unit trace within tolerance.
    pub fn check_state(&self) -> Result<()> {
        let tr = self.trace();
        if (tr - T::one()).abs() > T::tol(TRACE_TOL) {
            return Err(Error::Domain(format!("trace is {} instead of 1", tr.as_f64())));
        }
        clamp_spectrum(&self.eigenvalues()).map(|_| ())
    }
}

/// A classical distribution over a finite alphabet.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityVector<T: Real = f64> {
    weights: Vec<T>,
}

impl<T: Real> ProbabilityVector<T> {
    pub fn new(weights: Vec<T>) -> Result<Self> {
        let mut w = weights;
        for x in w.iter_mut() {
            if *x < -T::tol(EIGEN_FLOOR) {
                return Err(Error::Domain(format!("negative probability {}", x.as_f64())));
            }
            if *x < T::zero() {
                *x = T::zero();
            }
        }
        let total = w.iter().fold(T::zero(), |a, &b| a + b);
        if (total - T::one()).abs() > T::tol(TRACE_TOL) {
            return Err(Error::Domain(format!("probabilities sum to {}", total.as_f64())));
        }
        Ok(Self { weights: w })
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Joint probability table over labelled outcome variables, row-major with the
/// first variable most significant.
#[derive(Clone, Debug, PartialEq)]
pub struct OutcomeDistribution<T: Real = f64> {
    labels: Vec<String>,
    arities: Vec<usize>,
    probs: Vec<T>,
}

impl<T: Real> OutcomeDistribution<T> {
    pub fn new(labels: Vec<String>, arities: Vec<usize>, probs: Vec<T>) -> Result<Self> {
        if labels.len() != arities.len() {
            return Err(Error::Argument("one label per variable is required".into()));
        }
        let size: usize = arities.iter().product();
        if size != probs.len() {
            return Err(Error::Argument(format!(
                "table has {} entries but the arities need {}",
                probs.len(),
                size
            )));
        }
        let pv = ProbabilityVector::new(probs)?;
        Ok(Self { labels, arities, probs: pv.weights })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn arities(&self) -> &[usize] {
        &self.arities
    }

    pub fn probabilities(&self) -> &[T] {
        &self.probs
    }

    pub fn index_of(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::Argument(format!("unknown outcome variable '{label}'")))
    }

    /// Marginal over the listed variables (by position), in the listed order.
    pub fn marginal_by_index(&self, vars: &[usize]) -> Vec<T> {
        let map = marginal_map(&self.arities, vars);
        let size: usize = vars.iter().map(|&v| self.arities[v]).product();
        let mut out = vec![T::zero(); size];
        for (p, &m) in self.probs.iter().zip(map.iter()) {
            out[m] += *p;
        }
        out
    }

    pub fn marginal(&self, vars: &[&str]) -> Result<Self> {
        let idx = vars.iter().map(|v| self.index_of(v)).collect::<Result<Vec<_>>>()?;
        let probs = self.marginal_by_index(&idx);
        Ok(Self {
            labels: idx.iter().map(|&i| self.labels[i].clone()).collect(),
            arities: idx.iter().map(|&i| self.arities[i]).collect(),
            probs,
        })
    }

    pub fn entropy(&self) -> T {
        entropy_of_weights(&self.probs)
    }

    /// `H(target | conditioning)`; conditioning outcomes of probability at most
    /// 1e-12 are skipped.
    pub fn conditional_entropy(&self, target: &[&str], conditioning: &[&str]) -> Result<T> {
        conditional_shannon(self, target, conditioning)
    }
}

/// Maps every flat index of a table with `arities` to the flat index of its
/// marginal over `vars` (row-major, `vars` order).
pub(crate) fn marginal_map(arities: &[usize], vars: &[usize]) -> Vec<usize> {
    let size: usize = arities.iter().product();
    let n = arities.len();
    let mut weight = vec![0usize; n];
    let mut w = 1usize;
    for &v in vars.iter().rev() {
        weight[v] += w;
        w *= arities[v];
    }
    let mut out = Vec::with_capacity(size);
    let mut digits = vec![0usize; n];
    let mut acc = 0usize;
    for _ in 0..size {
        out.push(acc);
        for k in (0..n).rev() {
            digits[k] += 1;
            acc += weight[k];
            if digits[k] < arities[k] {
                break;
            }
            acc -= weight[k] * arities[k];
            digits[k] = 0;
        }
    }
    out
}

/// Row-major flat offsets of all joint values of `which` (first listed is most
/// significant) inside a register with party dimensions `dims`.
pub(crate) fn index_offsets(dims: &[usize], which: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * dims[i + 1];
    }
    let mut offs = vec![0usize];
    for &p in which {
        let mut next = Vec::with_capacity(offs.len() * dims[p]);
        for &o in &offs {
            for v in 0..dims[p] {
                next.push(o + v * strides[p]);
            }
        }
        offs = next;
    }
    offs
}

/// Product of two Householder reflections along deterministic generic vectors.
fn scrambler<T: Real>(n: usize, salt: usize) -> Mat<T> {
    let reflection = |a: f64, b: f64| {
        let v = DVector::from_fn(n, |k, _| {
            let k = (k + 1) as f64;
            Complex::new(T::lit((k * a).fract() - 0.5), T::lit((k * b).fract() - 0.5))
        });
        let scale = Complex::new(T::lit(2.0) / v.norm_squared(), T::zero());
        Mat::<T>::identity(n, n) - &v * v.adjoint() * scale
    };
    let s = salt as f64;
    reflection(0.754_877_666 + 0.1 * s, 0.569_840_291 + 0.07 * s) * reflection(0.618_033_988 + 0.03 * s, 0.414_213_562 + 0.05 * s)
}

fn max_abs<T: Real>(m: &Mat<T>) -> T {
    m.iter().fold(T::zero(), |acc, z| {
        let a = z.norm_sqr().sqrt();
        if a > acc {
            a
        } else {
            acc
        }
    })
}

fn clamp_spectrum<T: Real>(eigs: &DVector<T>) -> Result<Vec<T>> {
    eigs.iter()
        .map(|&v| {
            if v < -T::tol(NEGATIVE_EIGEN_TOL) {
                Err(Error::Domain(format!(
                    "operator is not positive semidefinite (eigenvalue {:e})",
                    v.as_f64()
                )))
            } else if v < T::zero() {
                Ok(T::zero())
            } else {
                Ok(v)
            }
        })
        .collect()
}

fn entropy_of_weights<T: Real>(w: &[T]) -> T {
    let floor = T::tol(EIGEN_FLOOR);
    w.iter()
        .filter(|&&p| p > floor)
        .fold(T::zero(), |acc, &p| acc - p * p.ln())
}

/// `S(ρ) = -Tr ρ ln ρ`.
pub fn von_neumann_entropy<T: Real>(rho: &HermitianOperator<T>) -> Result<T> {
    let tr = rho.trace();
    if (tr - T::one()).abs() > T::tol(TRACE_TOL) {
        return Err(Error::Domain(format!("trace is {} instead of 1", tr.as_f64())));
    }
    let spec = clamp_spectrum(&rho.eigenvalues())?;
    Ok(entropy_of_weights(&spec))
}

pub fn shannon_entropy<T: Real>(p: &ProbabilityVector<T>) -> T {
    entropy_of_weights(&p.weights)
}

pub fn conditional_shannon<T: Real>(
    joint: &OutcomeDistribution<T>,
    target: &[&str],
    conditioning: &[&str],
) -> Result<T> {
    let t = target.iter().map(|v| joint.index_of(v)).collect::<Result<Vec<_>>>()?;
    let c = conditioning.iter().map(|v| joint.index_of(v)).collect::<Result<Vec<_>>>()?;
    let mut both = c.clone();
    both.extend(t.iter().copied());
    let pc = joint.marginal_by_index(&c);
    let pb = joint.marginal_by_index(&both);
    let tsize: usize = t.iter().map(|&i| joint.arities[i]).product();
    let floor = T::tol(EIGEN_FLOOR);
    let mut h = T::zero();
    for (ci, &p_c) in pc.iter().enumerate() {
        if p_c <= floor {
            continue;
        }
        for ti in 0..tsize {
            let p = pb[ci * tsize + ti];
            if p > T::zero() {
                h -= p * (p / p_c).ln();
            }
        }
    }
    Ok(h)
}

/// `h(p) = -p ln p - (1-p) ln(1-p)`.
pub fn binary_entropy<T: Real>(p: T) -> Result<T> {
    let slack = T::tol(EIGEN_FLOOR);
    if p < -slack || p > T::one() + slack {
        return Err(Error::Domain(format!("binary entropy argument {} outside [0,1]", p.as_f64())));
    }
    let p = if p < T::zero() {
        T::zero()
    } else if p > T::one() {
        T::one()
    } else {
        p
    };
    Ok(entropy_of_weights(&[p, T::one() - p]))
}

/// Relative entropy with a flag raised when the support condition fails.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelativeEntropy<T> {
    /// `+inf` when `support_violation` is set.
    pub value: T,
    pub support_violation: bool,
}

/// `S(ρ‖σ) = Tr ρ (ln ρ - ln σ)`.
pub fn relative_entropy<T: Real>(
    rho: &HermitianOperator<T>,
    sigma: &HermitianOperator<T>,
) -> Result<RelativeEntropy<T>> {
    if rho.dim() != sigma.dim() {
        return Err(Error::Argument(format!("dimension mismatch {} vs {}", rho.dim(), sigma.dim())));
    }
    let s_rho = von_neumann_entropy(rho)?;
    let (mu, w) = sigma.eigh();
    let mu = clamp_spectrum(&mu)?;
    let floor = T::tol(EIGEN_FLOOR);
    let rw = rho.matrix() * &w;
    let mut cross = T::zero();
    let mut null_overlap = T::zero();
    for k in 0..mu.len() {
        let col = w.column(k);
        let overlap = col
            .iter()
            .zip(rw.column(k).iter())
            .fold(T::zero(), |acc, (a, b)| acc + (a.conj() * b).re);
        if mu[k] <= floor {
            null_overlap += overlap;
        } else {
            cross += overlap * mu[k].ln();
        }
    }
    if null_overlap > T::tol(1e-10) {
        return Ok(RelativeEntropy { value: T::lit(f64::INFINITY), support_violation: true });
    }
    Ok(RelativeEntropy { value: -s_rho - cross, support_violation: false })
}

/// `Tr|ρ - ρ'|`.
pub fn trace_distance<T: Real>(a: &HermitianOperator<T>, b: &HermitianOperator<T>) -> Result<T> {
    if a.dim() != b.dim() {
        return Err(Error::Argument(format!("dimension mismatch {} vs {}", a.dim(), b.dim())));
    }
    let diff = HermitianOperator::symmetrized(a.matrix() - b.matrix());
    Ok(diff.eigenvalues().iter().fold(T::zero(), |acc, v| acc + v.abs()))
}

/// Reduced operator on the parties in `keep` (kept in ascending order).
pub fn partial_trace<T: Real>(
    rho: &HermitianOperator<T>,
    dims: &[usize],
    keep: &[usize],
) -> Result<HermitianOperator<T>> {
    let total: usize = dims.iter().product();
    if total != rho.dim() {
        return Err(Error::Argument(format!(
            "party dimensions multiply to {} but the operator has dimension {}",
            total,
            rho.dim()
        )));
    }
    let mut keep: Vec<usize> = keep.to_vec();
    keep.sort_unstable();
    keep.dedup();
    if keep.iter().any(|&k| k >= dims.len()) {
        return Err(Error::Argument("kept party index out of range".into()));
    }
    let traced: Vec<usize> = (0..dims.len()).filter(|i| !keep.contains(i)).collect();
    let ok = index_offsets(dims, &keep);
    let ot = index_offsets(dims, &traced);
    let m = rho.matrix();
    let out = DMatrix::from_fn(ok.len(), ok.len(), |r, c| {
        ot.iter().fold(Complex::zero(), |acc, &t| acc + m[(ok[r] + t, ok[c] + t)])
    });
    Ok(HermitianOperator::symmetrized(out))
}

/// `exp(G)` for anti-Hermitian `G`, through the eigendecomposition of `-iG`.
pub fn unitary_from_generator<T: Real>(g: &Mat<T>) -> Result<Mat<T>> {
    if g.nrows() != g.ncols() {
        return Err(Error::Argument("generator must be square".into()));
    }
    let dev = max_abs(&(g + g.adjoint()));
    if dev > T::tol(HERMITICITY_TOL) {
        return Err(Error::Domain(format!("generator is not anti-Hermitian (deviation {:e})", dev.as_f64())));
    }
    Ok(expm_skew(g))
}

pub(crate) fn expm_skew<T: Real>(g: &Mat<T>) -> Mat<T> {
    let minus_i = Complex::new(T::zero(), -T::one());
    let h = HermitianOperator::symmetrized(g * minus_i);
    let (vals, vecs) = h.eigh();
    let phases: Vec<Complex<T>> = vals.iter().map(|&v| Complex::new(v.cos(), v.sin())).collect();
    let scaled = DMatrix::from_fn(vecs.nrows(), vecs.ncols(), |i, j| vecs[(i, j)] * phases[j]);
    &scaled * vecs.adjoint()
}

/// `max |U†U - I|` entrywise.
pub fn unitarity_defect<T: Real>(u: &Mat<T>) -> T {
    let n = u.ncols();
    let eye: Mat<T> = DMatrix::identity(n, n);
    max_abs(&(u.adjoint() * u - eye))
}

/// Haar-distributed unitary.
pub fn haar_unitary<R: Rng + ?Sized>(n: usize, rng: &mut R) -> CMat {
    let z = ginibre(n, n, rng);
    let qr = z.qr();
    let q = qr.q();
    let r = qr.r();
    let phases: Vec<C64> = (0..n)
        .map(|i| {
            let d = r[(i, i)];
            if d.norm() > 0.0 {
                d / d.norm()
            } else {
                C64::one()
            }
        })
        .collect();
    DMatrix::from_fn(n, n, |i, j| q[(i, j)] * phases[j])
}

/// Matrix of i.i.d. standard complex Gaussian entries.
pub fn ginibre<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> CMat {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    DMatrix::from_fn(rows, cols, |_, _| {
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        C64::new(a * s, b * s)
    })
}

/// Uniformly random unit vector.
pub fn random_unit_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> CVec {
    let g = ginibre(dim, 1, rng);
    let v = CVec::from_iterator(dim, g.iter().copied());
    let n = v.norm();
    v / C64::new(n, 0.0)
}

/// Random density matrix of the given rank (induced measure).
pub fn random_density<R: Rng + ?Sized>(dim: usize, rank: usize, rng: &mut R) -> CMat {
    let g = ginibre(dim, rank.max(1), rng);
    let m = &g * g.adjoint();
    let tr: f64 = m.diagonal().iter().map(|z| z.re).sum();
    HermitianOperator::symmetrized(m / C64::new(tr, 0.0)).into_matrix()
}
