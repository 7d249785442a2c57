//! Transfer matrices, fixed points, window states and blocking for
//! translation-invariant matrix product states.
//!
//! Index convention: the transfer matrix is `T = Σ_σ A^σ ⊗ conj(A^σ)` with row
//! index `α₁·D + β₁` and column index `α₂·D + β₂`, so that
//! `T[(α₁,β₁);(α₂,β₂)] = Σ_σ A^σ_{α₁α₂} conj(A^σ_{β₁β₂})`. Acting on a
//! row-major vectorized matrix it is the map `X ↦ Σ_σ A^σ X A^σ†`, whose fixed
//! point is the identity for right-canonical tensors. The left fixed point
//! `τ` obeys `Σ_σ A^σᵀ τ conj(A^σ) = τ`; the environment seen from the left of
//! a long chain is `conj(τ)`.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use nalgebra::DMatrix;
use num_traits::{One, Zero};

use crate::error::{argument, Error, Result};
use crate::numerics::HermitianOperator;
use crate::states::{Boundary, DensityState, MpsTensorSet};
use crate::{CMat, CVec, Operator, C64};

const NORMALITY_GAP: f64 = 1e-8;
const CANONICAL_TOL: f64 = 1e-10;

/// Leading part of the transfer-matrix spectrum.
#[derive(Clone, Debug)]
pub struct FixedPointData {
    /// Left fixed point, Hermitian, positive definite and of unit trace when normal.
    pub tau: Operator,
    pub lambda1: C64,
    pub lambda2: C64,
    /// Correlation length in sites, `-1/ln|λ₂|` (zero when `λ₂ = 0`).
    pub xi: f64,
    pub normal: bool,
    /// Full spectrum sorted by decreasing modulus.
    pub spectrum: Vec<C64>,
}

impl FixedPointData {
    /// `conj(τ)`, the left environment of a half-infinite chain.
    pub fn left_environment(&self) -> Operator {
        HermitianOperator::symmetrized(self.tau.matrix().map(|z| z.conj()))
    }

    /// Entanglement entropy of a long contiguous block, `2 S(τ)`.
    pub fn entanglement_entropy(&self) -> Result<f64> {
        Ok(2.0 * crate::numerics::von_neumann_entropy(&self.tau)?)
    }

    pub fn require_normal(&self) -> Result<()> {
        if self.normal {
            Ok(())
        } else {
            Err(Error::NotNormal(format!(
                "subleading eigenvalue has modulus {:.3e}",
                self.lambda2.norm()
            )))
        }
    }
}

pub fn transfer_matrix(t: &MpsTensorSet) -> CMat {
    let db = t.bond_dim();
    t.a.iter()
        .fold(CMat::zeros(db * db, db * db), |acc, a| acc + a.kronecker(&a.map(|z| z.conj())))
}

fn spectrum(m: &CMat) -> Vec<C64> {
    let mut ev: Vec<C64> = match m.clone().schur().eigenvalues() {
        Some(v) => v.iter().copied().collect(),
        None => m.diagonal().iter().copied().collect(),
    };
    ev.sort_by(|a, b| b.norm().partial_cmp(&a.norm()).unwrap_or(std::cmp::Ordering::Equal));
    ev
}

/// Null vector of `m` (right singular vector of the smallest singular value).
fn null_vector(m: &CMat) -> CVec {
    let svd = m.clone().svd(false, true);
    let vt = svd.v_t.expect("requested V^T");
    let k = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
        .map(|(i, _)| i)
        .unwrap_or(0);
    CVec::from_iterator(vt.ncols(), vt.row(k).iter().map(|z| z.conj()))
}

/// Reshapes a row-major vectorized matrix into a Hermitian operator of unit trace.
fn unvec_positive(v: &CVec, db: usize) -> CMat {
    let m = CMat::from_fn(db, db, |i, j| v[i * db + j]);
    let tr: C64 = m.trace();
    let phase = if tr.norm() > 0.0 { tr.conj() / tr.norm() } else { C64::one() };
    let m = m * phase;
    let m = (&m + m.adjoint()) * C64::new(0.5, 0.0);
    let tr = m.trace().re;
    m / C64::new(tr, 0.0)
}

fn cache_key(t: &MpsTensorSet) -> Vec<u64> {
    let mut key = vec![t.physical_dim() as u64, t.bond_dim() as u64];
    for a in &t.a {
        for z in a.iter() {
            key.push(z.re.to_bits());
            key.push(z.im.to_bits());
        }
    }
    key
}

fn fixed_point_cache() -> &'static Mutex<HashMap<Vec<u64>, FixedPointData>> {
    static CACHE: OnceLock<Mutex<HashMap<Vec<u64>, FixedPointData>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Fixed point of a right-canonical tensor. Results are memoized per tensor.
pub fn fixed_point(t: &MpsTensorSet) -> Result<FixedPointData> {
    if t.canonical_defect() > CANONICAL_TOL {
        return argument("fixed_point needs a right-canonical tensor; call right_canonicalize first");
    }
    let key = cache_key(t);
    if let Some(fp) = fixed_point_cache().lock().ok().and_then(|c| c.get(&key).cloned()) {
        return Ok(fp);
    }
    let fp = compute_fixed_point(t);
    if let Ok(mut c) = fixed_point_cache().lock() {
        if c.len() > 512 {
            c.clear();
        }
        c.insert(key, fp.clone());
    }
    Ok(fp)
}

fn compute_fixed_point(t: &MpsTensorSet) -> FixedPointData {
    let db = t.bond_dim();
    let tm = transfer_matrix(t);
    let spec = spectrum(&tm);
    let lambda1 = spec[0];
    let lambda2 = spec.get(1).copied().unwrap_or_else(C64::zero);
    let normal = (lambda1 - C64::one()).norm() < NORMALITY_GAP && lambda2.norm() < 1.0 - NORMALITY_GAP;
    let shifted = tm.transpose() - CMat::identity(db * db, db * db);
    let mut tau = unvec_positive(&null_vector(&shifted), db);
    let op = HermitianOperator::symmetrized(tau.clone());
    if op.eigenvalues().iter().any(|&v| v < -1e-10) {
        tau = CMat::identity(db, db) / C64::new(db as f64, 0.0);
    }
    let l2 = lambda2.norm();
    let xi = if l2 > 0.0 && l2 < 1.0 { -1.0 / l2.ln() } else if l2 >= 1.0 { f64::INFINITY } else { 0.0 };
    FixedPointData {
        tau: HermitianOperator::symmetrized(tau),
        lambda1,
        lambda2,
        xi,
        normal,
        spectrum: spec,
    }
}

/// Brings an arbitrary injective tensor to right-canonical form, rescaling so
/// that the leading transfer-matrix eigenvalue is one.
pub fn right_canonicalize(t: &MpsTensorSet) -> Result<MpsTensorSet> {
    let mut cur = t.clone();
    for _ in 0..4 {
        if cur.canonical_defect() <= 1e-13 {
            cur.right_canonical = true;
            return Ok(cur);
        }
        cur = canonical_pass(&cur)?;
    }
    if cur.canonical_defect() <= CANONICAL_TOL {
        cur.right_canonical = true;
        Ok(cur)
    } else {
        Err(Error::Optimizer(format!(
            "right canonicalization did not converge (defect {:.3e})",
            cur.canonical_defect()
        )))
    }
}

fn canonical_pass(t: &MpsTensorSet) -> Result<MpsTensorSet> {
    let db = t.bond_dim();
    let tm = transfer_matrix(t);
    let lambda = spectrum(&tm)[0];
    if lambda.norm() == 0.0 {
        return Err(Error::NotNormal("transfer matrix is nilpotent".into()));
    }
    let shifted = &tm - CMat::identity(db * db, db * db) * lambda;
    let r = HermitianOperator::symmetrized(unvec_positive(&null_vector(&shifted), db));
    let (vals, _) = r.eigh();
    let max = vals.iter().cloned().fold(0.0, f64::max);
    let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 1e-12 * max {
        return Err(Error::NotNormal("right fixed point is singular; tensor is not injective".into()));
    }
    let r_half = r.map_spectrum(f64::sqrt).into_matrix();
    let r_inv_half = r.map_spectrum(|v| 1.0 / v.sqrt()).into_matrix();
    let scale = C64::new(1.0 / lambda.norm().sqrt(), 0.0);
    let a = t.a.iter().map(|m| &r_inv_half * m * &r_half * scale).collect();
    let boundary = match &t.boundary {
        Boundary::Open { left, right } => Boundary::Open {
            left: r_half.transpose() * left,
            right: &r_inv_half * right,
        },
        Boundary::Periodic => Boundary::Periodic,
    };
    MpsTensorSet::new(a, boundary)
}

/// Amplitudes of the `n`-site chain as a normalized pure state.
pub fn to_dense(t: &MpsTensorSet, n: usize, cap: usize) -> Result<DensityState> {
    if n == 0 {
        return argument("chain needs at least one site");
    }
    let d = t.physical_dim();
    let dim = checked_pow(d, n, cap)?;
    let db = t.bond_dim();
    let psi = match &t.boundary {
        Boundary::Open { left, right } => {
            let mut rows: Vec<CVec> = vec![left.clone()];
            for _ in 0..n {
                let mut next = Vec::with_capacity(rows.len() * d);
                for row in &rows {
                    for a in &t.a {
                        next.push(a.tr_mul(row));
                    }
                }
                rows = next;
            }
            CVec::from_iterator(dim, rows.iter().map(|r| r.dot(right)))
        }
        Boundary::Periodic => {
            let mut mats: Vec<CMat> = vec![CMat::identity(db, db)];
            for _ in 0..n {
                let mut next = Vec::with_capacity(mats.len() * d);
                for m in &mats {
                    for a in &t.a {
                        next.push(m * a);
                    }
                }
                mats = next;
            }
            CVec::from_iterator(dim, mats.iter().map(|m| m.trace()))
        }
    };
    if psi.norm() < 1e-300 {
        return Err(Error::Domain(format!("the {n}-site chain has zero norm for this boundary")));
    }
    DensityState::pure(vec![d; n], psi)
}

pub(crate) fn checked_pow(base: usize, exp: usize, cap: usize) -> Result<usize> {
    let mut acc = 1usize;
    for _ in 0..exp {
        acc = acc.checked_mul(base).filter(|&v| v <= cap).ok_or_else(|| {
            Error::Resource(format!("dimension {base}^{exp} exceeds the dense cap {cap}"))
        })?;
    }
    Ok(acc)
}

/// Products `A^{s_1} ⋯ A^{s_l}` for every configuration, row-major in `s`.
pub(crate) fn segment_products(t: &MpsTensorSet, l: usize) -> Vec<CMat> {
    let db = t.bond_dim();
    let mut mats = vec![CMat::identity(db, db)];
    for _ in 0..l {
        let mut next = Vec::with_capacity(mats.len() * t.physical_dim());
        for m in &mats {
            for a in &t.a {
                next.push(m * a);
            }
        }
        mats = next;
    }
    mats
}

/// Pure state on `bond ⊗ phys^l ⊗ bond` whose physical marginal is the
/// thermodynamic-limit `l`-site reduced density operator.
#[derive(Clone, Debug)]
pub struct WindowState {
    pub bond: usize,
    pub phys: usize,
    pub l: usize,
    /// Amplitudes ordered `(σ₀, σ₁, …, σ_l, right bond)`, row-major.
    pub psi: CVec,
}

impl WindowState {
    /// Party dimensions `(bond, phys, …, phys, bond)`.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.bond];
        dims.extend(std::iter::repeat_n(self.phys, self.l));
        dims.push(self.bond);
        dims
    }

    pub fn as_state(&self) -> Result<DensityState> {
        DensityState::pure(self.dims(), self.psi.clone())
    }

    /// Reduced density operator of the `l` physical sites.
    pub fn physical_marginal(&self) -> Result<Operator> {
        let keep: Vec<usize> = (1..=self.l).collect();
        self.as_state()?.reduced(&keep)
    }
}

/// `Ψ[e, s, r] = Σ_α X_{eα} (A^{s_1} ⋯ A^{s_l})_{αr}` with `X = √conj(τ)`.
pub fn build_window(t: &MpsTensorSet, fp: &FixedPointData, l: usize, cap: usize) -> Result<WindowState> {
    fp.require_normal()?;
    let d = t.physical_dim();
    let db = t.bond_dim();
    checked_pow(d, l, cap)?;
    let x = fp.left_environment().sqrt_psd().into_matrix();
    let prods = segment_products(t, l);
    let np = prods.len();
    let mut psi = CVec::zeros(db * np * db);
    for (s, m) in prods.iter().enumerate() {
        let xm = &x * m;
        for e in 0..db {
            for r in 0..db {
                psi[(e * np + s) * db + r] = xm[(e, r)];
            }
        }
    }
    let n = psi.norm();
    Ok(WindowState { bond: db, phys: d, l, psi: psi / C64::new(n, 0.0) })
}

/// `m` sites blocked into one party.
#[derive(Clone, Debug)]
pub struct BlockedTensor {
    pub m: usize,
    /// Tensor with physical dimension `d^m`.
    pub tensor: MpsTensorSet,
    pub transfer: CMat,
}

impl BlockedTensor {
    /// Choi matrix `K[(α,β);(α',β')] = Σ_s B^s_{αβ} conj(B^s_{α'β'})`.
    pub fn choi(&self) -> Operator {
        let db = self.tensor.bond_dim();
        let mut k = CMat::zeros(db * db, db * db);
        for b in &self.tensor.a {
            let v = CVec::from_fn(db * db, |i, _| b[(i / db, i % db)]);
            k += &v * v.adjoint();
        }
        HermitianOperator::symmetrized(k)
    }

    /// Tensor with physical dimension `D²` and the same transfer matrix, given
    /// by the columns of `√K`. It differs from the blocked tensor by an
    /// isometry on the physical leg.
    pub fn effective(&self) -> Result<MpsTensorSet> {
        let db = self.tensor.bond_dim();
        let w = self.choi().sqrt_psd().into_matrix();
        let a = (0..db * db)
            .map(|k| CMat::from_fn(db, db, |i, j| w[(i * db + j, k)]))
            .collect();
        MpsTensorSet::new(a, self.tensor.boundary.clone())
    }
}

pub fn block_tensor(t: &MpsTensorSet, m: usize, cap: usize) -> Result<BlockedTensor> {
    if m == 0 {
        return argument("block size must be at least one");
    }
    checked_pow(t.physical_dim(), m, cap)?;
    let tensor = MpsTensorSet::new(segment_products(t, m), t.boundary.clone())?;
    let transfer = transfer_matrix(&tensor);
    Ok(BlockedTensor { m, tensor, transfer })
}

/// Reduced density operator of sites `range` of an `n`-site chain, contracted
/// through transfer matrices.
pub fn reduced_density(
    t: &MpsTensorSet,
    n: usize,
    range: std::ops::Range<usize>,
    cap: usize,
) -> Result<Operator> {
    if range.start >= range.end || range.end > n {
        return argument(format!("site range {range:?} invalid for a {n}-site chain"));
    }
    let l = range.len();
    let d = t.physical_dim();
    let dim = checked_pow(d, l, cap)?;
    let db = t.bond_dim();
    let tm = transfer_matrix(t);
    let pow = |k: usize| -> CMat {
        let mut acc = CMat::identity(db * db, db * db);
        for _ in 0..k {
            acc = &acc * &tm;
        }
        acc
    };
    let prods = segment_products(t, l);
    let (left, right): (DMatrix<C64>, DMatrix<C64>) = match &t.boundary {
        Boundary::Open { left, right } => {
            let lv = left.kronecker(&left.map(|z| z.conj()));
            let rv = right.kronecker(&right.map(|z| z.conj()));
            let lrow = CMat::from_row_slice(1, lv.len(), lv.as_slice()) * pow(range.start);
            let rcol = pow(n - range.end) * CMat::from_column_slice(rv.len(), 1, rv.as_slice());
            (lrow, rcol)
        }
        Boundary::Periodic => (CMat::zeros(0, 0), pow(n - l)),
    };
    let periodic = matches!(t.boundary, Boundary::Periodic);
    let mut rho = CMat::zeros(dim, dim);
    for (s, ms) in prods.iter().enumerate() {
        for (sp, msp) in prods.iter().enumerate().skip(s) {
            let seg = ms.kronecker(&msp.map(|z| z.conj()));
            let val = if periodic { (&seg * &right).trace() } else { (&left * &seg * &right)[(0, 0)] };
            rho[(s, sp)] = val;
            rho[(sp, s)] = val.conj();
        }
    }
    let tr = rho.trace().re;
    if tr.abs() < 1e-300 {
        return Err(Error::Domain("chain has zero norm for this boundary".into()));
    }
    let op = HermitianOperator::symmetrized(rho / C64::new(tr, 0.0));
    op.check_state()?;
    Ok(op)
}

/// Thermodynamic-limit reduced density operator of `l` consecutive sites.
pub fn reduced_density_tdl(t: &MpsTensorSet, l: usize, cap: usize) -> Result<Operator> {
    let fp = fixed_point(t)?;
    fp.require_normal()?;
    let d = t.physical_dim();
    let dim = checked_pow(d, l, cap)?;
    let g = fp.left_environment().into_matrix();
    let prods = segment_products(t, l);
    let rho = CMat::from_fn(dim, dim, |s, sp| (&g * &prods[s] * prods[sp].adjoint()).trace());
    Ok(HermitianOperator::symmetrized(rho))
}
