//! Reference states and matrix-product tensor sets.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use num_traits::One;
use rand::Rng;

use crate::error::{argument, Error, Result};
use crate::numerics::{self, index_offsets, HermitianOperator};
use crate::{CMat, CVec, Operator, C64};

/// A state on an ordered list of parties.
#[derive(Clone, Debug)]
pub struct DensityState {
    dims: Vec<usize>,
    repr: Repr,
}

#[derive(Clone, Debug)]
enum Repr {
    Pure(CVec),
    Mixed(Operator),
}

impl DensityState {
    /// Pure state; the vector is normalized.
    pub fn pure(dims: Vec<usize>, psi: CVec) -> Result<Self> {
        check_dims(&dims, psi.len())?;
        let n = psi.norm();
        if n == 0.0 {
            return argument("zero state vector");
        }
        Ok(Self { dims, repr: Repr::Pure(psi / C64::new(n, 0.0)) })
    }

    pub fn mixed(dims: Vec<usize>, rho: CMat) -> Result<Self> {
        check_dims(&dims, rho.nrows())?;
        let op = HermitianOperator::new(rho)?;
        op.check_state()?;
        Ok(Self { dims, repr: Repr::Mixed(op) })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn n_parties(&self) -> usize {
        self.dims.len()
    }

    pub fn dim(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_pure(&self) -> bool {
        matches!(self.repr, Repr::Pure(_))
    }

    pub fn vector(&self) -> Option<&CVec> {
        match &self.repr {
            Repr::Pure(v) => Some(v),
            Repr::Mixed(_) => None,
        }
    }

    /// The full density matrix.
    pub fn matrix(&self) -> Operator {
        match &self.repr {
            Repr::Pure(v) => HermitianOperator::from_pure(v),
            Repr::Mixed(m) => m.clone(),
        }
    }

    pub fn entropy(&self) -> Result<f64> {
        match &self.repr {
            Repr::Pure(_) => Ok(0.0),
            Repr::Mixed(m) => numerics::von_neumann_entropy(m),
        }
    }

    /// Reduced density operator of the listed parties (ascending order).
    pub fn reduced(&self, keep: &[usize]) -> Result<Operator> {
        match &self.repr {
            Repr::Pure(v) => {
                let mut keep = keep.to_vec();
                keep.sort_unstable();
                keep.dedup();
                if keep.iter().any(|&k| k >= self.dims.len()) {
                    return argument("kept party index out of range");
                }
                let traced: Vec<usize> = (0..self.dims.len()).filter(|i| !keep.contains(i)).collect();
                let ok = index_offsets(&self.dims, &keep);
                let ot = index_offsets(&self.dims, &traced);
                let m = DMatrix::from_fn(ok.len(), ot.len(), |r, c| v[ok[r] + ot[c]]);
                Ok(HermitianOperator::symmetrized(&m * m.adjoint()))
            }
            Repr::Mixed(m) => numerics::partial_trace(m, &self.dims, keep),
        }
    }

    /// Marginal state on the listed parties as a new `DensityState`.
    pub fn marginal(&self, keep: &[usize]) -> Result<DensityState> {
        let mut keep = keep.to_vec();
        keep.sort_unstable();
        keep.dedup();
        let rho = self.reduced(&keep)?;
        let dims = keep.iter().map(|&k| self.dims[k]).collect();
        Ok(DensityState { dims, repr: Repr::Mixed(rho) })
    }

    /// Single-party entropies `S(ρ_n)`.
    pub fn local_entropies(&self) -> Result<Vec<f64>> {
        (0..self.dims.len())
            .map(|n| numerics::von_neumann_entropy(&self.reduced(&[n])?))
            .collect()
    }

    /// Columns `√λ_r |v_r⟩` with `ρ = Σ_r` of their projectors; a single column
    /// for pure states.
    pub fn purification(&self) -> CMat {
        match &self.repr {
            Repr::Pure(v) => CMat::from_column_slice(v.len(), 1, v.as_slice()),
            Repr::Mixed(m) => purify(m),
        }
    }

    /// Merges consecutive parties: `groups` lists the sizes of the new parties.
    pub fn regroup(&self, groups: &[usize]) -> Result<DensityState> {
        if groups.iter().sum::<usize>() != self.dims.len() || groups.contains(&0) {
            return argument("groups must partition the parties into non-empty runs");
        }
        let mut dims = Vec::with_capacity(groups.len());
        let mut at = 0;
        for &g in groups {
            dims.push(self.dims[at..at + g].iter().product());
            at += g;
        }
        Ok(DensityState { dims, repr: self.repr.clone() })
    }

    /// `(⊗ U_n) ρ (⊗ U_n)†`.
    pub fn apply_local_unitaries(&self, us: &[CMat]) -> Result<DensityState> {
        if us.len() != self.dims.len() || us.iter().zip(&self.dims).any(|(u, &d)| u.nrows() != d) {
            return argument("one unitary per party with matching dimension is required");
        }
        let big = us.iter().skip(1).fold(us[0].clone(), |acc, u| acc.kronecker(u));
        Ok(match &self.repr {
            Repr::Pure(v) => DensityState { dims: self.dims.clone(), repr: Repr::Pure(&big * v) },
            Repr::Mixed(m) => DensityState {
                dims: self.dims.clone(),
                repr: Repr::Mixed(HermitianOperator::symmetrized(&big * m.matrix() * big.adjoint())),
            },
        })
    }

    /// `(1-p) ρ + p I/dim`.
    pub fn depolarize(&self, p: f64) -> Result<DensityState> {
        if !(0.0..=1.0).contains(&p) {
            return argument("depolarizing weight must lie in [0,1]");
        }
        let dim = self.dim();
        let m = self.matrix().into_matrix() * C64::new(1.0 - p, 0.0)
            + CMat::identity(dim, dim) * C64::new(p / dim as f64, 0.0);
        Ok(DensityState { dims: self.dims.clone(), repr: Repr::Mixed(HermitianOperator::symmetrized(m)) })
    }

    /// Convex mixture `(1-p) self + p other`.
    pub fn mix(&self, other: &DensityState, p: f64) -> Result<DensityState> {
        if self.dims != other.dims {
            return argument("states live on different partitions");
        }
        let m = self.matrix().into_matrix() * C64::new(1.0 - p, 0.0)
            + other.matrix().into_matrix() * C64::new(p, 0.0);
        Ok(DensityState { dims: self.dims.clone(), repr: Repr::Mixed(HermitianOperator::symmetrized(m)) })
    }

    /// Plain-text form: a header line with the party dimensions, then the
    /// density matrix row by row as `re,im` pairs.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let dims: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(s, "{}", dims.join(" "));
        let m = self.matrix();
        for r in 0..m.dim() {
            let row: Vec<String> = (0..m.dim())
                .map(|c| {
                    let z = m.matrix()[(r, c)];
                    format!("{:e},{:e}", z.re, z.im)
                })
                .collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    /// Parses the plain-text form. A body with `dim` entries is read as a state
    /// vector, one with `dim²` entries as a row-major density matrix. Lines
    /// starting with `#` are ignored.
    pub fn from_text(text: &str) -> Result<DensityState> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines.next().ok_or_else(|| Error::Parse("empty state file".into()))?;
        let dims = header
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|_| Error::Parse(format!("bad party dimension '{t}'"))))
            .collect::<Result<Vec<_>>>()?;
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::Parse("header must list positive party dimensions".into()));
        }
        let mut entries = Vec::new();
        for line in lines {
            for tok in line.split_whitespace() {
                let (re, im) = tok.split_once(',').unwrap_or((tok, "0"));
                let re: f64 = re.parse().map_err(|_| Error::Parse(format!("bad entry '{tok}'")))?;
                let im: f64 = im.parse().map_err(|_| Error::Parse(format!("bad entry '{tok}'")))?;
                entries.push(C64::new(re, im));
            }
        }
        let dim: usize = dims.iter().product();
        if entries.len() == dim {
            DensityState::pure(dims, CVec::from_vec(entries))
        } else if entries.len() == dim * dim {
            DensityState::mixed(dims, CMat::from_row_slice(dim, dim, &entries))
        } else {
            Err(Error::Parse(format!(
                "expected {} (vector) or {} (matrix) entries, found {}",
                dim,
                dim * dim,
                entries.len()
            )))
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<DensityState> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn check_dims(dims: &[usize], dim: usize) -> Result<()> {
    if dims.is_empty() || dims.contains(&0) {
        return argument("party dimensions must be positive");
    }
    let total: usize = dims.iter().product();
    if total != dim {
        return argument(format!("party dimensions multiply to {total}, state has dimension {dim}"));
    }
    Ok(())
}

/// Columns `√λ v` for the non-negligible eigenpairs of a density operator.
pub(crate) fn purify(rho: &Operator) -> CMat {
    let (vals, vecs) = rho.eigh();
    let keep: Vec<usize> = (0..vals.len()).filter(|&i| vals[i] > 1e-14).collect();
    let mut out = CMat::zeros(rho.dim(), keep.len().max(1));
    for (c, &i) in keep.iter().enumerate() {
        let s = C64::new(vals[i].sqrt(), 0.0);
        for r in 0..rho.dim() {
            out[(r, c)] = vecs[(r, i)] * s;
        }
    }
    out
}

fn basis_vector(dim: usize, idx: usize) -> CVec {
    let mut v = CVec::zeros(dim);
    v[idx] = C64::one();
    v
}

fn from_amplitudes(dims: Vec<usize>, amps: &[(usize, f64)]) -> Result<DensityState> {
    let dim: usize = dims.iter().product();
    let mut v = CVec::zeros(dim);
    for &(i, a) in amps {
        v[i] += C64::new(a, 0.0);
    }
    DensityState::pure(dims, v)
}

/// `(|0…0⟩ + |1…1⟩)/√2` on `n` qubits.
pub fn ghz(n: usize) -> Result<DensityState> {
    if n < 2 {
        return argument("GHZ state needs at least two parties");
    }
    let dim = 1usize << n;
    let a = std::f64::consts::FRAC_1_SQRT_2;
    from_amplitudes(vec![2; n], &[(0, a), (dim - 1, a)])
}

/// `(|001⟩ + |010⟩ + |100⟩)/√3`.
pub fn w_state() -> Result<DensityState> {
    let a = 1.0 / 3f64.sqrt();
    from_amplitudes(vec![2; 3], &[(1, a), (2, a), (4, a)])
}

/// `√(1-q)|001⟩ + √(q/2)(|010⟩ + |100⟩)`.
pub fn psi_q(q: f64) -> Result<DensityState> {
    if !(0.0..=1.0).contains(&q) {
        return argument(format!("q = {q} outside [0,1]"));
    }
    let b = (q / 2.0).sqrt();
    from_amplitudes(vec![2; 3], &[(1, (1.0 - q).sqrt()), (2, b), (4, b)])
}

/// Three parties of dimension 4 sharing three Bell pairs in a triangle.
pub fn bell_composite_tri() -> Result<DensityState> {
    let dims = vec![4, 4, 4];
    let a = 1.0 / 8f64.sqrt();
    let mut amps = Vec::new();
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                let p1 = 2 * i + j;
                let p2 = 2 * j + k;
                let p3 = 2 * k + i;
                amps.push((p1 * 16 + p2 * 4 + p3, a));
            }
        }
    }
    from_amplitudes(dims, &amps)
}

/// `N` parties on a line with a Bell pair across each neighbouring pair; party
/// dimensions `(2, 4, …, 4, 2)`.
pub fn bell_composite_chain(n: usize) -> Result<DensityState> {
    if n < 2 {
        return argument("Bell chain needs at least two parties");
    }
    let mut dims = vec![4; n];
    dims[0] = 2;
    dims[n - 1] = 2;
    let bonds = n - 1;
    let a = (0.5f64).powf(bonds as f64 / 2.0);
    let mut amps = Vec::with_capacity(1 << bonds);
    for bits in 0..(1usize << bonds) {
        let bit = |b: usize| (bits >> (bonds - 1 - b)) & 1;
        let mut idx = 0usize;
        for p in 0..n {
            let local = if p == 0 {
                bit(0)
            } else if p == n - 1 {
                bit(n - 2)
            } else {
                2 * bit(p - 1) + bit(p)
            };
            idx = idx * dims[p] + local;
        }
        amps.push((idx, a));
    }
    from_amplitudes(dims, &amps)
}

/// Product of the given local vectors.
pub fn product_state(locals: &[CVec]) -> Result<DensityState> {
    if locals.is_empty() {
        return argument("no parties given");
    }
    let dims: Vec<usize> = locals.iter().map(|v| v.len()).collect();
    let psi = locals.iter().skip(1).fold(locals[0].clone(), |acc, v| acc.kronecker(v));
    DensityState::pure(dims, psi)
}

/// Computational basis state `|i_1 … i_N⟩`.
pub fn basis_state(dims: &[usize], digits: &[usize]) -> Result<DensityState> {
    if dims.len() != digits.len() || dims.iter().zip(digits).any(|(d, i)| i >= d) {
        return argument("digits must match party dimensions");
    }
    product_state(&dims.iter().zip(digits).map(|(&d, &i)| basis_vector(d, i)).collect::<Vec<_>>())
}

pub fn random_pure<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<DensityState> {
    let dim = dims.iter().product();
    DensityState::pure(dims.to_vec(), numerics::random_unit_vector(dim, rng))
}

pub fn random_mixed<R: Rng + ?Sized>(dims: &[usize], rank: usize, rng: &mut R) -> Result<DensityState> {
    let dim = dims.iter().product();
    DensityState::mixed(dims.to_vec(), numerics::random_density(dim, rank, rng))
}

/// `Σ_Y q(Y) ⊗_n |u^n_{y_n}⟩⟨u^n_{y_n}|` for local bases given as unitaries
/// (columns are basis vectors) and a joint distribution `q` in row-major order.
pub fn classically_correlated(bases: &[CMat], q: &[f64]) -> Result<DensityState> {
    let dims: Vec<usize> = bases.iter().map(|u| u.nrows()).collect();
    let dim: usize = dims.iter().product();
    if q.len() != dim {
        return argument("one weight per joint outcome is required");
    }
    let big = bases.iter().skip(1).fold(bases[0].clone(), |acc, u| acc.kronecker(u));
    let diag = CMat::from_diagonal(&CVec::from_iterator(dim, q.iter().map(|&w| C64::new(w, 0.0))));
    DensityState::mixed(dims, &big * diag * big.adjoint())
}

/// Boundary condition of a finite chain.
#[derive(Clone, Debug, PartialEq)]
pub enum Boundary {
    /// `v_L^T A^{σ_1} ⋯ A^{σ_N} v_R`.
    Open { left: CVec, right: CVec },
    /// `Tr[A^{σ_1} ⋯ A^{σ_N}]`.
    Periodic,
}

/// Translation-invariant site tensor `A^σ` (one `D_B × D_B` matrix per
/// physical value) with its boundary descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct MpsTensorSet {
    pub a: Vec<CMat>,
    pub boundary: Boundary,
    pub right_canonical: bool,
}

impl MpsTensorSet {
    /// Checks shapes and sets the canonical flag from the data.
    pub fn new(a: Vec<CMat>, boundary: Boundary) -> Result<Self> {
        if a.is_empty() {
            return argument("tensor needs at least one physical value");
        }
        let d = a[0].nrows();
        if d == 0 || a.iter().any(|m| m.nrows() != d || m.ncols() != d) {
            return argument("all site matrices must be square with a common bond dimension");
        }
        if let Boundary::Open { left, right } = &boundary {
            if left.len() != d || right.len() != d {
                return argument("boundary vectors must match the bond dimension");
            }
        }
        let mut t = Self { a, boundary, right_canonical: false };
        t.right_canonical = t.canonical_defect() <= 1e-10;
        Ok(t)
    }

    pub fn physical_dim(&self) -> usize {
        self.a.len()
    }

    pub fn bond_dim(&self) -> usize {
        self.a[0].nrows()
    }

    /// `max |Σ_σ A^σ A^σ† - I|` entrywise.
    pub fn canonical_defect(&self) -> f64 {
        let db = self.bond_dim();
        let s = self.a.iter().fold(CMat::zeros(db, db), |acc, m| acc + m * m.adjoint());
        (s - CMat::identity(db, db)).iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn with_boundary(mut self, boundary: Boundary) -> Self {
        self.boundary = boundary;
        self
    }

    /// Plain-text form of a periodic tensor: header `d D`, then the `d` site
    /// matrices one after another, row by row as `re,im` pairs.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} {}", self.physical_dim(), self.bond_dim());
        for m in &self.a {
            for r in 0..m.nrows() {
                let row: Vec<String> = (0..m.ncols()).map(|c| format!("{:e},{:e}", m[(r, c)].re, m[(r, c)].im)).collect();
                let _ = writeln!(s, "{}", row.join(" "));
            }
        }
        s
    }

    /// Reads the form written by [`to_text`](Self::to_text); the boundary is periodic.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines.next().ok_or_else(|| Error::Parse("empty tensor file".into()))?;
        let dims = header
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|_| Error::Parse(format!("bad tensor dimension '{t}'"))))
            .collect::<Result<Vec<_>>>()?;
        let [d, db] = dims[..] else {
            return Err(Error::Parse("tensor header must be 'd D'".into()));
        };
        if d == 0 || db == 0 {
            return Err(Error::Parse("tensor dimensions must be positive".into()));
        }
        let mut entries = Vec::new();
        for line in lines {
            for tok in line.split_whitespace() {
                let (re, im) = tok.split_once(',').unwrap_or((tok, "0"));
                let re: f64 = re.parse().map_err(|_| Error::Parse(format!("bad entry '{tok}'")))?;
                let im: f64 = im.parse().map_err(|_| Error::Parse(format!("bad entry '{tok}'")))?;
                entries.push(C64::new(re, im));
            }
        }
        if entries.len() != d * db * db {
            return Err(Error::Parse(format!("expected {} tensor entries, found {}", d * db * db, entries.len())));
        }
        let a = entries.chunks(db * db).map(|c| CMat::from_row_slice(db, db, c)).collect();
        Self::new(a, Boundary::Periodic)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn mat2(entries: [[f64; 2]; 2]) -> CMat {
    CMat::from_fn(2, 2, |i, j| C64::new(entries[i][j], 0.0))
}

/// AKLT tensor in right-canonical normalization; physical order `↑, 0, ↓`.
pub fn aklt_tensors() -> MpsTensorSet {
    let a = (2.0f64 / 3.0).sqrt();
    let b = (1.0f64 / 3.0).sqrt();
    let up = mat2([[0.0, 0.0], [-a, 0.0]]);
    let zero = mat2([[b, 0.0], [0.0, -b]]);
    let down = mat2([[0.0, a], [0.0, 0.0]]);
    MpsTensorSet::new(vec![up, zero, down], Boundary::Periodic).expect("valid AKLT tensor")
}

/// AKLT matrices without the canonical prefactors.
pub fn aklt_tensors_unnormalized() -> MpsTensorSet {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let up = mat2([[0.0, 0.0], [-1.0, 0.0]]);
    let zero = mat2([[h, 0.0], [0.0, -h]]);
    let down = mat2([[0.0, 1.0], [0.0, 0.0]]);
    MpsTensorSet::new(vec![up, zero, down], Boundary::Periodic).expect("valid AKLT tensor")
}

/// 1D cluster state tensor in right-canonical normalization.
pub fn cluster_tensors() -> MpsTensorSet {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let a0 = mat2([[0.0, 0.0], [h, h]]);
    let a1 = mat2([[h, -h], [0.0, 0.0]]);
    MpsTensorSet::new(vec![a0, a1], Boundary::Periodic).expect("valid cluster tensor")
}

/// The one-parameter family interpolating between the cluster state (`g = -1`),
/// GHZ (`g = 0`, not normal) and `|+…+⟩` (`g = 1`), right-canonical.
pub fn mps_family_tensors(g: f64) -> Result<MpsTensorSet> {
    if !(-1.0..=1.0).contains(&g) {
        return argument(format!("g = {g} outside [-1,1]"));
    }
    if g == 0.0 {
        return Err(Error::NotNormal(
            "the family is not normal at g = 0; treat it as the GHZ state".into(),
        ));
    }
    let s = g.abs().sqrt();
    let n = 1.0 / (1.0 + g.abs()).sqrt();
    let sign = if g < 0.0 { -1.0 } else { 1.0 };
    let a0 = mat2([[0.0, 0.0], [s * n, n]]);
    let a1 = mat2([[n, sign * s * n], [0.0, 0.0]]);
    MpsTensorSet::new(vec![a0, a1], Boundary::Periodic)
}

/// The family matrices `A0 = [[0,0],[1,1]]`, `A1 = [[1,g],[0,0]]` before gauge fixing.
pub fn mps_family_unnormalized(g: f64) -> MpsTensorSet {
    let a0 = mat2([[0.0, 0.0], [1.0, 1.0]]);
    let a1 = mat2([[1.0, g], [0.0, 0.0]]);
    MpsTensorSet::new(vec![a0, a1], Boundary::Periodic).expect("valid family tensor")
}

/// GHZ as a (non-normal) bond-dimension-2 MPS.
pub fn ghz_tensors() -> MpsTensorSet {
    let a0 = mat2([[1.0, 0.0], [0.0, 0.0]]);
    let a1 = mat2([[0.0, 0.0], [0.0, 1.0]]);
    MpsTensorSet::new(vec![a0, a1], Boundary::Periodic).expect("valid GHZ tensor")
}

/// Bond-dimension-1 tensor of the product state `⊗ |v⟩`.
pub fn product_tensors(v: &CVec) -> MpsTensorSet {
    let n = v.norm();
    let a = v.iter().map(|&c| CMat::from_element(1, 1, c / C64::new(n, 0.0))).collect();
    MpsTensorSet::new(a, Boundary::Periodic).expect("valid product tensor")
}

/// Random tensor with the given dimensions (not canonical).
pub fn random_tensors<R: Rng + ?Sized>(d: usize, bond: usize, rng: &mut R) -> MpsTensorSet {
    let a = (0..d).map(|_| numerics::ginibre(bond, bond, rng)).collect();
    MpsTensorSet::new(a, Boundary::Periodic).expect("valid random tensor")
}

