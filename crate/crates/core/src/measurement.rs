//! Local measurement protocols and their outcome statistics.
//!
//! Every protocol is a sequence of measurement stages applied to a pure
//! register (a purification of the state). A stage with input dimension `x`
//! and `K ≥ x` outcomes is described by a `K × K` unitary `V`; its measurement
//! vectors are the columns of the first `x` rows of `V`. For `K = x` this is a
//! rank-one projective measurement in the basis given by the columns of `V`,
//! otherwise a rank-one POVM. A stage may carry one unitary for every history
//! of earlier outcomes (one-way trees), and several stages may share one
//! unitary (translation-replicated protocols).

use std::fmt::Write as _;

use num_traits::Zero;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{argument, Error, Result};
use crate::numerics::{self, marginal_map, HermitianOperator, OutcomeDistribution};
use crate::optimize::ManifoldSpec;
use crate::states::DensityState;
use crate::{CMat, CVec, Operator, C64};

const UNITARY_TOL: f64 = 1e-10;
const NULL_PROBABILITY: f64 = 1e-12;

/// Orthonormal basis of one party; column `y` of the unitary is `|u_y⟩`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectiveBasis {
    u: CMat,
}

impl ProjectiveBasis {
    pub fn new(u: CMat) -> Result<Self> {
        if u.nrows() != u.ncols() {
            return argument("basis matrix must be square");
        }
        let defect = numerics::unitarity_defect(&u);
        if defect > UNITARY_TOL {
            return Err(Error::Domain(format!("basis matrix is not unitary (defect {defect:.2e})")));
        }
        Ok(Self { u })
    }

    pub fn computational(d: usize) -> Self {
        Self { u: CMat::identity(d, d) }
    }

    /// Qubit basis `{|+⟩, |−⟩}`.
    pub fn plus_minus() -> Self {
        let h = C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        Self { u: CMat::from_row_slice(2, 2, &[h, h, h, -h]) }
    }

    pub fn dim(&self) -> usize {
        self.u.nrows()
    }

    pub fn unitary(&self) -> &CMat {
        &self.u
    }

    pub fn vector(&self, y: usize) -> CVec {
        self.u.column(y).into_owned()
    }

    pub fn projectors(&self) -> Vec<Operator> {
        (0..self.dim()).map(|y| HermitianOperator::from_pure(&self.vector(y))).collect()
    }

    /// Whether every vector is a computational basis vector up to a phase.
    pub fn is_computational(&self, tol: f64) -> bool {
        self.u.column_iter().all(|c| c.iter().any(|z| z.norm() >= 1.0 - tol))
    }
}

/// Rank-one POVM `E_z = m_z m_z†` on an `x`-dimensional space, with `m_z` the
/// columns of the first `x` rows of a `K × K` unitary.
#[derive(Clone, Debug, PartialEq)]
pub struct RankOnePovm {
    v: CMat,
    x: usize,
}

impl RankOnePovm {
    pub fn from_unitary(v: CMat, x: usize) -> Result<Self> {
        if v.nrows() != v.ncols() || x == 0 || x > v.nrows() {
            return argument("POVM needs a square unitary with at least as many outcomes as its input dimension");
        }
        let defect = numerics::unitarity_defect(&v);
        if defect > UNITARY_TOL {
            return Err(Error::Domain(format!("POVM dilation is not unitary (defect {defect:.2e})")));
        }
        Ok(Self { v, x })
    }

    pub fn input_dim(&self) -> usize {
        self.x
    }

    pub fn outcomes(&self) -> usize {
        self.v.ncols()
    }

    pub fn unitary(&self) -> &CMat {
        &self.v
    }

    pub fn vector(&self, z: usize) -> CVec {
        CVec::from_iterator(self.x, (0..self.x).map(|i| self.v[(i, z)]))
    }

    pub fn elements(&self) -> Vec<Operator> {
        (0..self.outcomes()).map(|z| HermitianOperator::from_pure(&self.vector(z))).collect()
    }

    /// `max |Σ_z E_z − I|` entrywise.
    pub fn completeness_defect(&self) -> f64 {
        let sum = self
            .elements()
            .iter()
            .fold(CMat::zeros(self.x, self.x), |acc, e| acc + e.matrix());
        (sum - CMat::identity(self.x, self.x)).iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProtocolKind {
    /// Non-adaptive rank-one projective measurements on the listed parties.
    Product,
    /// A rank-one POVM on the support of a group of parties, then product bases.
    PovmProduct,
    /// Each stage's basis depends on all earlier outcomes.
    OneWayTree,
    /// One basis set repeated over consecutive segments.
    Replicated,
}

impl ProtocolKind {
    fn name(self) -> &'static str {
        match self {
            ProtocolKind::Product => "product",
            ProtocolKind::PovmProduct => "povm_product",
            ProtocolKind::OneWayTree => "one_way_tree",
            ProtocolKind::Replicated => "replicated",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "product" => ProtocolKind::Product,
            "povm_product" => ProtocolKind::PovmProduct,
            "one_way_tree" => ProtocolKind::OneWayTree,
            "replicated" => ProtocolKind::Replicated,
            _ => return Err(Error::Parse(format!("unknown protocol kind '{s}'"))),
        })
    }
}

/// POVM stage: acts on the span of the columns of `support` inside the joint
/// space of `parties`.
#[derive(Clone, Debug, PartialEq)]
pub struct PovmStage {
    pub parties: Vec<usize>,
    /// Isometry from the POVM input space into the joint space of `parties`.
    pub support: CMat,
    pub block: usize,
}

/// Projective stage on one party; `blocks` holds one unitary index, or one per
/// history of earlier outcomes.
#[derive(Clone, Debug, PartialEq)]
pub struct PartyStage {
    pub party: usize,
    pub blocks: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementProtocol {
    pub kind: ProtocolKind,
    pub povm: Option<PovmStage>,
    pub stages: Vec<PartyStage>,
    pub unitaries: Vec<CMat>,
}

impl MeasurementProtocol {
    /// Checks block indices, history counts and unitarity.
    pub fn new(
        kind: ProtocolKind,
        povm: Option<PovmStage>,
        stages: Vec<PartyStage>,
        unitaries: Vec<CMat>,
    ) -> Result<Self> {
        let p = Self { kind, povm, stages, unitaries };
        p.check_structure()?;
        for u in &p.unitaries {
            let defect = numerics::unitarity_defect(u);
            if u.nrows() != u.ncols() || defect > UNITARY_TOL {
                return Err(Error::Domain(format!("protocol unitary has defect {defect:.2e}")));
            }
        }
        Ok(p)
    }

    fn check_structure(&self) -> Result<()> {
        let mut histories = 1usize;
        if let Some(pv) = &self.povm {
            let v = self
                .unitaries
                .get(pv.block)
                .ok_or_else(|| Error::Argument("POVM block index out of range".into()))?;
            if pv.support.ncols() > v.nrows() || pv.support.ncols() == 0 {
                return argument("POVM outcome count is below its input dimension");
            }
            histories *= v.nrows();
        }
        let mut seen: Vec<usize> = self.povm.iter().flat_map(|p| p.parties.iter().copied()).collect();
        for st in &self.stages {
            if seen.contains(&st.party) {
                return argument(format!("party {} is measured twice", st.party));
            }
            seen.push(st.party);
            if st.blocks.len() != 1 && st.blocks.len() != histories {
                return argument(format!(
                    "stage on party {} has {} blocks, expected 1 or {}",
                    st.party,
                    st.blocks.len(),
                    histories
                ));
            }
            let k = self.unitaries.get(st.blocks[0]).map(|u| u.nrows()).ok_or_else(|| {
                Error::Argument("block index out of range".into())
            })?;
            if st.blocks.iter().any(|&b| self.unitaries.get(b).map(|u| u.nrows()) != Some(k)) {
                return argument("all history blocks of a stage must have the same size");
            }
            histories *= k;
        }
        Ok(())
    }

    /// Product protocol with one basis per listed party.
    pub fn product(parties: &[usize], bases: Vec<CMat>) -> Result<Self> {
        if parties.len() != bases.len() {
            return argument("one basis per party is required");
        }
        let stages = parties.iter().enumerate().map(|(i, &p)| PartyStage { party: p, blocks: vec![i] }).collect();
        Self::new(ProtocolKind::Product, None, stages, bases)
    }

    /// Computational-basis product protocol on parties of the given dimensions.
    pub fn computational(dims: &[usize]) -> Self {
        let parties: Vec<usize> = (0..dims.len()).collect();
        Self::product(&parties, dims.iter().map(|&d| CMat::identity(d, d)).collect()).expect("valid protocol")
    }

    /// POVM (dilation `povm`, acting on `support`) followed by product bases.
    pub fn povm_product(
        povm_parties: &[usize],
        support: CMat,
        povm: CMat,
        parties: &[usize],
        bases: Vec<CMat>,
    ) -> Result<Self> {
        if parties.len() != bases.len() {
            return argument("one basis per party is required");
        }
        let mut unitaries = vec![povm];
        let stages = parties
            .iter()
            .zip(bases)
            .map(|(&p, b)| {
                unitaries.push(b);
                PartyStage { party: p, blocks: vec![unitaries.len() - 1] }
            })
            .collect();
        let stage = PovmStage { parties: povm_parties.to_vec(), support, block: 0 };
        Self::new(ProtocolKind::PovmProduct, Some(stage), stages, unitaries)
    }

    /// One-way tree; `levels[n]` lists one basis per history of all earlier
    /// outcomes (including the POVM outcome when present), row-major.
    pub fn one_way_tree(
        parties: &[usize],
        levels: Vec<Vec<CMat>>,
        povm: Option<(Vec<usize>, CMat, CMat)>,
    ) -> Result<Self> {
        if parties.len() != levels.len() {
            return argument("one level per party is required");
        }
        let mut unitaries = Vec::new();
        let povm_stage = povm.map(|(pp, support, v)| {
            unitaries.push(v);
            PovmStage { parties: pp, support, block: 0 }
        });
        let mut stages = Vec::new();
        for (&p, level) in parties.iter().zip(levels) {
            let start = unitaries.len();
            let n = level.len();
            unitaries.extend(level);
            stages.push(PartyStage { party: p, blocks: (start..start + n).collect() });
        }
        Self::new(ProtocolKind::OneWayTree, povm_stage, stages, unitaries)
    }

    /// The bases `period` applied to consecutive runs of parties.
    pub fn replicated(parties: &[usize], period: Vec<CMat>) -> Result<Self> {
        if period.is_empty() || parties.len() % period.len() != 0 {
            return argument("party count must be a multiple of the period");
        }
        let l = period.len();
        let stages = parties.iter().enumerate().map(|(i, &p)| PartyStage { party: p, blocks: vec![i % l] }).collect();
        Self::new(ProtocolKind::Replicated, None, stages, period)
    }

    pub fn parties(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.party).collect()
    }

    /// Outcome count of every variable, POVM first.
    pub fn arities(&self) -> Vec<usize> {
        let mut a: Vec<usize> = self.povm.iter().map(|p| self.unitaries[p.block].nrows()).collect();
        a.extend(self.stages.iter().map(|s| self.unitaries[s.blocks[0]].nrows()));
        a
    }

    /// Variable labels: `z` for the POVM, `y<party>` for the stages.
    pub fn labels(&self) -> Vec<String> {
        let mut l: Vec<String> = self.povm.iter().map(|_| "z".to_string()).collect();
        l.extend(self.stages.iter().map(|s| format!("y{}", s.party)));
        l
    }

    pub fn basis(&self, stage: usize, history: usize) -> Result<ProjectiveBasis> {
        let st = self.stages.get(stage).ok_or_else(|| Error::Argument("stage out of range".into()))?;
        let b = if st.blocks.len() == 1 { st.blocks[0] } else { st.blocks[history] };
        ProjectiveBasis::new(self.unitaries[b].clone())
    }

    pub fn povm_operator(&self) -> Option<RankOnePovm> {
        self.povm
            .as_ref()
            .and_then(|p| RankOnePovm::from_unitary(self.unitaries[p.block].clone(), p.support.ncols()).ok())
    }

    /// Same structure with new unitaries (as produced by the optimizer).
    pub fn with_unitaries(&self, unitaries: Vec<CMat>) -> Result<Self> {
        if unitaries.len() != self.unitaries.len()
            || unitaries.iter().zip(&self.unitaries).any(|(a, b)| a.shape() != b.shape())
        {
            return argument("unitary list does not match the protocol structure");
        }
        Ok(Self { unitaries, ..self.clone() })
    }

    pub fn block_dims(&self) -> Vec<usize> {
        self.unitaries.iter().map(|u| u.nrows()).collect()
    }

    /// Plain-text form that `from_text` reads back exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "kind {}", self.kind.name());
        if let Some(p) = &self.povm {
            let parties: Vec<String> = p.parties.iter().map(|x| x.to_string()).collect();
            let _ = writeln!(s, "povm {} block {}", parties.join(" "), p.block);
            write_matrix(&mut s, "support", &p.support);
        }
        for st in &self.stages {
            let blocks: Vec<String> = st.blocks.iter().map(|x| x.to_string()).collect();
            let _ = writeln!(s, "stage {} blocks {}", st.party, blocks.join(" "));
        }
        for u in &self.unitaries {
            write_matrix(&mut s, "unitary", u);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect();
        let mut kind = None;
        let mut povm: Option<(Vec<usize>, usize)> = None;
        let mut support = None;
        let mut stages = Vec::new();
        let mut unitaries = Vec::new();
        let mut i = 0;
        while i < lines.len() {
            let toks: Vec<&str> = lines[i].split_whitespace().collect();
            match toks[0] {
                "kind" => kind = Some(ProtocolKind::parse(toks.get(1).copied().unwrap_or(""))?),
                "povm" => {
                    let pos = toks.iter().position(|&t| t == "block").ok_or_else(|| Error::Parse("povm line needs 'block'".into()))?;
                    let parties = parse_usizes(&toks[1..pos])?;
                    let block = parse_usizes(&toks[pos + 1..])?.first().copied().ok_or_else(|| Error::Parse("missing block index".into()))?;
                    povm = Some((parties, block));
                }
                "stage" => {
                    let party = parse_usizes(&toks[1..2])?[0];
                    if toks.get(2) != Some(&"blocks") {
                        return Err(Error::Parse("stage line needs 'blocks'".into()));
                    }
                    stages.push(PartyStage { party, blocks: parse_usizes(&toks[3..])? });
                }
                "support" | "unitary" => {
                    let dims = parse_usizes(&toks[1..])?;
                    if dims.len() != 2 {
                        return Err(Error::Parse(format!("'{}' needs rows and columns", toks[0])));
                    }
                    let (m, used) = read_matrix(&lines[i + 1..], dims[0], dims[1])?;
                    i += used;
                    if toks[0] == "support" {
                        support = Some(m);
                    } else {
                        unitaries.push(m);
                    }
                }
                other => return Err(Error::Parse(format!("unknown protocol directive '{other}'"))),
            }
            i += 1;
        }
        let kind = kind.ok_or_else(|| Error::Parse("missing 'kind' line".into()))?;
        let povm = match (povm, support) {
            (Some((parties, block)), Some(support)) => Some(PovmStage { parties, support, block }),
            (None, None) => None,
            _ => return Err(Error::Parse("povm and support lines must appear together".into())),
        };
        Self::new(kind, povm, stages, unitaries)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn write_matrix(s: &mut String, tag: &str, m: &CMat) {
    let _ = writeln!(s, "{tag} {} {}", m.nrows(), m.ncols());
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| format!("{:e},{:e}", m[(r, c)].re, m[(r, c)].im)).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
}

fn read_matrix(lines: &[&str], rows: usize, cols: usize) -> Result<(CMat, usize)> {
    if lines.len() < rows {
        return Err(Error::Parse("matrix block is truncated".into()));
    }
    let mut m = CMat::zeros(rows, cols);
    for r in 0..rows {
        let toks: Vec<&str> = lines[r].split_whitespace().collect();
        if toks.len() != cols {
            return Err(Error::Parse(format!("expected {cols} entries in matrix row, found {}", toks.len())));
        }
        for (c, t) in toks.iter().enumerate() {
            let (re, im) = t.split_once(',').ok_or_else(|| Error::Parse(format!("bad entry '{t}'")))?;
            let re: f64 = re.parse().map_err(|_| Error::Parse(format!("bad entry '{t}'")))?;
            let im: f64 = im.parse().map_err(|_| Error::Parse(format!("bad entry '{t}'")))?;
            m[(r, c)] = C64::new(re, im);
        }
    }
    Ok((m, rows))
}

fn parse_usizes(toks: &[&str]) -> Result<Vec<usize>> {
    toks.iter()
        .map(|t| t.parse::<usize>().map_err(|_| Error::Parse(format!("expected an index, found '{t}'"))))
        .collect()
}

/// Pure register with amplitudes indexed `[leg_1, …, leg_L, r]` (row-major);
/// everything not exposed as a leg lives in the purifying index `r`.
#[derive(Clone, Debug)]
pub(crate) struct Register {
    pub dims: Vec<usize>,
    pub rank: usize,
    pub amps: Vec<C64>,
}

impl Register {
    pub fn from_state(state: &DensityState) -> Self {
        let p = state.purification();
        let rank = p.ncols();
        let mut amps = Vec::with_capacity(p.nrows() * rank);
        for i in 0..p.nrows() {
            for r in 0..rank {
                amps.push(p[(i, r)]);
            }
        }
        Self { dims: state.dims().to_vec(), rank, amps }
    }

    /// Exposes `legs` (in that order) and folds every other leg into `r`.
    pub fn select(&self, legs: &[usize]) -> Self {
        let n = self.dims.len();
        let mut perm: Vec<usize> = legs.to_vec();
        perm.extend((0..n).filter(|i| !legs.contains(i)));
        perm.push(n);
        let mut shape = self.dims.clone();
        shape.push(self.rank);
        let amps = permute_axes(&self.amps, &shape, &perm);
        let dims: Vec<usize> = legs.iter().map(|&l| self.dims[l]).collect();
        let exposed: usize = dims.iter().product();
        let rank = self.amps.len() / exposed.max(1);
        Self { dims, rank, amps }
    }

    pub fn merge_front(&self, n: usize) -> Self {
        if n <= 1 {
            return self.clone();
        }
        let mut dims = vec![self.dims[..n].iter().product()];
        dims.extend_from_slice(&self.dims[n..]);
        Self { dims, rank: self.rank, amps: self.amps.clone() }
    }

    /// Applies `m` (new_dim × old_dim) to the first leg.
    pub fn apply_front(&self, m: &CMat) -> Self {
        let x = self.dims[0];
        let rest = self.amps.len() / x;
        let r = m.nrows();
        let mut amps = vec![C64::zero(); r * rest];
        for a in 0..r {
            let dst = &mut amps[a * rest..(a + 1) * rest];
            for i in 0..x {
                let c = m[(a, i)];
                if c == C64::zero() {
                    continue;
                }
                let src = &self.amps[i * rest..(i + 1) * rest];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += c * s;
                }
            }
        }
        let mut dims = self.dims.clone();
        dims[0] = r;
        Self { dims, rank: self.rank, amps }
    }
}

impl Register {
    /// Replaces the purifying index by one no larger than the exposed dimension.
    pub fn compress(self) -> Self {
        let exposed = self.amps.len() / self.rank.max(1);
        if self.rank <= exposed {
            return self;
        }
        let phi = CMat::from_row_slice(exposed, self.rank, &self.amps);
        let rho = HermitianOperator::symmetrized(&phi * phi.adjoint());
        let (vals, vecs) = rho.eigh();
        let keep: Vec<usize> = (0..vals.len()).filter(|&k| vals[k] > 0.0).collect();
        let rank = keep.len().max(1);
        let mut amps = vec![C64::zero(); exposed * rank];
        for i in 0..exposed {
            for (c, &k) in keep.iter().enumerate() {
                amps[i * rank + c] = vecs[(i, k)] * vals[k].sqrt();
            }
        }
        Self { dims: self.dims, rank, amps }
    }
}

pub(crate) fn permute_axes(data: &[C64], shape: &[usize], perm: &[usize]) -> Vec<C64> {
    let n = shape.len();
    let mut strides = vec![1usize; n];
    for i in (0..n.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let new_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let new_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; n];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        for k in (0..n).rev() {
            idx[k] += 1;
            off += new_strides[k];
            if idx[k] < new_shape[k] {
                break;
            }
            off -= new_strides[k] * new_shape[k];
            idx[k] = 0;
        }
    }
    out
}

/// One measurement stage of the contraction engine.
#[derive(Clone, Debug)]
pub(crate) struct Leg {
    pub x: usize,
    pub k: usize,
    pub blocks: Vec<usize>,
}

impl Leg {
    fn block(&self, history: usize) -> usize {
        if self.blocks.len() == 1 {
            self.blocks[0]
        } else {
            self.blocks[history]
        }
    }
}

/// `coeff · H(marginal over legs)`.
#[derive(Clone, Debug)]
pub struct EntropyTerm {
    pub legs: Vec<usize>,
    pub coeff: f64,
}

/// A register, a leg layout and an objective `constant + Σ_t c_t H(Y_{S_t})`.
#[derive(Clone, Debug)]
pub struct EntropyObjective {
    reg: Register,
    legs: Vec<Leg>,
    block_dims: Vec<usize>,
    arities: Vec<usize>,
    terms: Vec<(Vec<usize>, usize, f64)>,
    constant: f64,
}

fn shannon(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
}

impl EntropyObjective {
    pub(crate) fn new(reg: Register, legs: Vec<Leg>, block_dims: Vec<usize>, terms: Vec<EntropyTerm>, constant: f64) -> Result<Self> {
        if reg.dims.len() != legs.len() {
            return argument("register legs and measurement stages disagree");
        }
        let mut histories = 1usize;
        for (leg, &x) in legs.iter().zip(&reg.dims) {
            if leg.x != x || leg.k < leg.x {
                return argument("stage dimension does not match the register");
            }
            if leg.blocks.len() != 1 && leg.blocks.len() != histories {
                return argument("history table has the wrong length");
            }
            if leg.blocks.iter().any(|&b| block_dims.get(b) != Some(&leg.k)) {
                return argument("stage block has the wrong size");
            }
            histories *= leg.k;
        }
        let arities: Vec<usize> = legs.iter().map(|l| l.k).collect();
        let terms = terms
            .into_iter()
            .map(|t| {
                let size = t.legs.iter().map(|&l| arities[l]).product();
                (marginal_map(&arities, &t.legs), size, t.coeff)
            })
            .collect();
        Ok(Self { reg, legs, block_dims, arities, terms, constant })
    }

    /// `constant + Σ_t coeff_t H(Y_{legs_t})` over outcomes of `template`'s
    /// structure; variables are numbered as in [`MeasurementProtocol::arities`].
    pub fn for_protocol(
        state: &DensityState,
        template: &MeasurementProtocol,
        terms: Vec<EntropyTerm>,
        constant: f64,
    ) -> Result<Self> {
        let n = template.arities().len();
        if terms.iter().any(|t| t.legs.iter().any(|&l| l >= n)) {
            return argument("entropy term refers to a missing outcome variable");
        }
        program_for(state, template, terms, constant)
    }

    pub fn block_dims(&self) -> &[usize] {
        &self.block_dims
    }

    pub fn spec(&self) -> ManifoldSpec {
        ManifoldSpec::bases(&self.block_dims)
    }

    pub fn arities(&self) -> &[usize] {
        &self.arities
    }

    fn forward(&self, us: &[CMat], keep: bool) -> (Vec<C64>, Vec<Vec<C64>>) {
        let mut cur = self.reg.amps.clone();
        let mut saved = Vec::new();
        let mut h_n = 1usize;
        let mut p_n = cur.len();
        for leg in &self.legs {
            p_n /= leg.x;
            let mut out = vec![C64::zero(); h_n * leg.k * p_n];
            for h in 0..h_n {
                let v = &us[leg.block(h)];
                for i in 0..leg.x {
                    let src = &cur[(h * leg.x + i) * p_n..(h * leg.x + i + 1) * p_n];
                    for z in 0..leg.k {
                        let c = v[(i, z)].conj();
                        if c == C64::zero() {
                            continue;
                        }
                        let dst = &mut out[(h * leg.k + z) * p_n..(h * leg.k + z + 1) * p_n];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += c * s;
                        }
                    }
                }
            }
            if keep {
                saved.push(std::mem::replace(&mut cur, out));
            } else {
                cur = out;
            }
            h_n *= leg.k;
        }
        (cur, saved)
    }

    pub fn probabilities(&self, us: &[CMat]) -> Vec<f64> {
        let (a, _) = self.forward(us, false);
        probs_of(&a, self.reg.rank)
    }

    fn value_of(&self, p: &[f64]) -> f64 {
        let mut v = self.constant;
        for (map, size, c) in &self.terms {
            let mut m = vec![0.0; *size];
            for (o, &q) in p.iter().enumerate() {
                m[map[o]] += q;
            }
            v += c * shannon(&m);
        }
        v
    }

    pub fn value(&self, us: &[CMat]) -> f64 {
        self.value_of(&self.probabilities(us))
    }

    /// Value and, per unitary block, the skew-Hermitian `S` such that the
    /// derivative along `V ← exp(tΩ) V` is `2 Re Tr(S† Ω)`.
    pub fn value_and_gradient(&self, us: &[CMat]) -> (f64, Vec<CMat>) {
        let (a, saved) = self.forward(us, true);
        let rank = self.reg.rank;
        let p = probs_of(&a, rank);
        let mut w = vec![0.0; p.len()];
        let mut value = self.constant;
        for (map, size, c) in &self.terms {
            let mut m = vec![0.0; *size];
            for (o, &q) in p.iter().enumerate() {
                m[map[o]] += q;
            }
            value += c * shannon(&m);
            for (o, wo) in w.iter_mut().enumerate() {
                *wo += c * (-(m[map[o]].max(1e-300)).ln() - 1.0);
            }
        }
        let mut cot: Vec<C64> = a.iter().enumerate().map(|(i, z)| z * w[i / rank]).collect();
        let mut grads: Vec<CMat> = self.block_dims.iter().map(|&k| CMat::zeros(k, k)).collect();
        let mut h_n: usize = self.arities.iter().product();
        let mut p_n = rank;
        for (li, leg) in self.legs.iter().enumerate().rev() {
            h_n /= leg.k;
            let t = &saved[li];
            let mut prev = if li > 0 { vec![C64::zero(); h_n * leg.x * p_n] } else { Vec::new() };
            for h in 0..h_n {
                let b = leg.block(h);
                let v = &us[b];
                let g = &mut grads[b];
                for i in 0..leg.x {
                    let src = &t[(h * leg.x + i) * p_n..(h * leg.x + i + 1) * p_n];
                    for z in 0..leg.k {
                        let c = &cot[(h * leg.k + z) * p_n..(h * leg.k + z + 1) * p_n];
                        let mut acc = C64::zero();
                        for (s, cc) in src.iter().zip(c) {
                            acc += s * cc.conj();
                        }
                        g[(i, z)] += acc;
                        if li > 0 {
                            let vz = v[(i, z)];
                            if vz != C64::zero() {
                                let dst = &mut prev[(h * leg.x + i) * p_n..(h * leg.x + i + 1) * p_n];
                                for (d, cc) in dst.iter_mut().zip(c) {
                                    *d += vz * cc;
                                }
                            }
                        }
                    }
                }
            }
            cot = prev;
            p_n *= leg.x;
        }
        let grads = grads
            .into_iter()
            .zip(us)
            .map(|(g, v)| {
                let a = g * v.adjoint();
                (&a - a.adjoint()) * C64::new(0.5, 0.0)
            })
            .collect();
        (value, grads)
    }
}

fn probs_of(a: &[C64], rank: usize) -> Vec<f64> {
    a.chunks(rank).map(|c| c.iter().map(|z| z.norm_sqr()).sum()).collect()
}

/// Isometry onto the eigenvectors of `rho` with eigenvalue above 1e-12,
/// ordered by decreasing eigenvalue.
pub fn support_isometry(rho: &Operator) -> CMat {
    let (vals, vecs) = rho.eigh();
    let mut idx: Vec<usize> = (0..vals.len()).filter(|&i| vals[i] > 1e-12).collect();
    idx.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap_or(std::cmp::Ordering::Equal));
    CMat::from_fn(rho.dim(), idx.len(), |i, k| vecs[(i, idx[k])])
}

/// Register and stage layout realizing `protocol` on `state`.
pub(crate) fn prepare(state: &DensityState, protocol: &MeasurementProtocol) -> Result<(Register, Vec<Leg>)> {
    let n = state.n_parties();
    let mut order: Vec<usize> = protocol.povm.iter().flat_map(|p| p.parties.iter().copied()).collect();
    let npovm = order.len();
    order.extend(protocol.stages.iter().map(|s| s.party));
    if order.iter().any(|&p| p >= n) {
        return argument("protocol addresses a party outside the state");
    }
    let mut reg = Register::from_state(state).select(&order);
    let mut legs = Vec::new();
    if let Some(pv) = &protocol.povm {
        if npovm == 0 {
            return argument("POVM stage must act on at least one party");
        }
        reg = reg.merge_front(npovm);
        if pv.support.nrows() != reg.dims[0] {
            return argument(format!(
                "POVM support has {} rows but the parties span dimension {}",
                pv.support.nrows(),
                reg.dims[0]
            ));
        }
        reg = reg.apply_front(&pv.support.adjoint());
        legs.push(Leg { x: pv.support.ncols(), k: protocol.unitaries[pv.block].nrows(), blocks: vec![pv.block] });
    }
    for (st, &d) in protocol.stages.iter().zip(&reg.dims[legs.len()..]) {
        let k = protocol.unitaries[st.blocks[0]].nrows();
        if k != d {
            return argument(format!("basis on party {} has dimension {k}, party has {d}", st.party));
        }
        legs.push(Leg { x: d, k, blocks: st.blocks.clone() });
    }
    Ok((reg.compress(), legs))
}

/// Engine program for `constant + Σ c_t H(...)` under `protocol`'s structure.
pub(crate) fn program_for(
    state: &DensityState,
    protocol: &MeasurementProtocol,
    terms: Vec<EntropyTerm>,
    constant: f64,
) -> Result<EntropyObjective> {
    let (reg, legs) = prepare(state, protocol)?;
    EntropyObjective::new(reg, legs, protocol.block_dims(), terms, constant)
}

/// Joint distribution of all outcomes of `protocol` on `state`.
pub fn evaluate_distribution(state: &DensityState, protocol: &MeasurementProtocol) -> Result<OutcomeDistribution> {
    let prog = program_for(state, protocol, Vec::new(), 0.0)?;
    let p = prog.probabilities(&protocol.unitaries);
    OutcomeDistribution::new(protocol.labels(), protocol.arities(), p)
}

/// `Σ_n ln d_n − H(Y)` for rank-one protocols without a POVM stage.
pub fn work_of_protocol(state: &DensityState, protocol: &MeasurementProtocol) -> Result<f64> {
    if protocol.povm.is_some() {
        return argument("extractable work is defined for local projective protocols");
    }
    let dist = evaluate_distribution(state, protocol)?;
    let max: f64 = protocol.stages.iter().map(|s| (state.dims()[s.party] as f64).ln()).sum();
    Ok(max - dist.entropy())
}

/// `H_Λ(Y) − S(ρ)` of a rank-one protocol.
pub fn deficit_of_protocol(state: &DensityState, protocol: &MeasurementProtocol) -> Result<f64> {
    Ok(evaluate_distribution(state, protocol)?.entropy() - state.entropy()?)
}

/// Outcome of a conditional-state computation.
#[derive(Clone, Debug)]
pub struct Conditional {
    pub probability: f64,
    /// `None` when the probability is at most 1e-12.
    pub state: Option<Operator>,
}

/// `P[Z] ρ^Z = Tr_on[(E ⊗ I) ρ]` restricted to the parties `keep`.
pub fn conditional_state(state: &DensityState, e: &Operator, on: &[usize], keep: &[usize]) -> Result<Conditional> {
    if on.iter().any(|p| keep.contains(p)) {
        return argument("measured and kept parties must be disjoint");
    }
    let mut order = on.to_vec();
    order.extend_from_slice(keep);
    if order.iter().any(|&p| p >= state.n_parties()) {
        return argument("party index out of range");
    }
    let reg = Register::from_state(state).select(&order).merge_front(on.len().max(1));
    let x = if on.is_empty() { 1 } else { reg.dims[0] };
    if on.is_empty() {
        if e.dim() != 1 {
            return argument("operator dimension must match the measured parties");
        }
    } else if e.dim() != x {
        return argument("operator dimension must match the measured parties");
    }
    let kdim: usize = keep.iter().map(|&p| state.dims()[p]).product();
    let rank = reg.rank;
    let reg = if on.is_empty() {
        Register { dims: vec![1], rank, amps: reg.amps.clone() }
    } else {
        reg
    };
    let em = e.matrix();
    let mut rho = CMat::zeros(kdim, kdim);
    for r in 0..rank {
        let m = CMat::from_fn(x, kdim, |i, k| reg.amps[(i * kdim + k) * rank + r]);
        rho += m.transpose() * em.transpose() * m.map(|z| z.conj());
    }
    let p = rho.trace().re;
    if p <= NULL_PROBABILITY {
        return Ok(Conditional { probability: p.max(0.0), state: None });
    }
    Ok(Conditional { probability: p, state: Some(HermitianOperator::symmetrized(rho / C64::new(p, 0.0))) })
}

/// Local projective measurements of arbitrary rank: for every party, the
/// projectors `Π_y = E_y E_y†` given by isometries with orthogonal ranges.
#[derive(Clone, Debug)]
pub struct LocalProjective {
    pub projectors: Vec<Vec<CMat>>,
}

impl LocalProjective {
    pub fn new(projectors: Vec<Vec<CMat>>) -> Result<Self> {
        for set in &projectors {
            let d = set.first().map(|e| e.nrows()).unwrap_or(0);
            let joined = join_columns(set)?;
            if joined.ncols() != d || numerics::unitarity_defect(&joined) > UNITARY_TOL {
                return Err(Error::Domain("projectors must be orthogonal and complete".into()));
            }
        }
        Ok(Self { projectors })
    }

    /// Groups the columns of one basis per party: `groups[n][y]` lists the
    /// columns spanning outcome `y`.
    pub fn from_groups(bases: &[CMat], groups: &[Vec<Vec<usize>>]) -> Result<Self> {
        let sets = bases
            .iter()
            .zip(groups)
            .map(|(b, g)| {
                g.iter()
                    .map(|cols| CMat::from_fn(b.nrows(), cols.len(), |i, j| b[(i, cols[j])]))
                    .collect()
            })
            .collect();
        Self::new(sets)
    }

    /// The trivial measurement `{I}` on every party.
    pub fn trivial(dims: &[usize]) -> Self {
        Self { projectors: dims.iter().map(|&d| vec![CMat::identity(d, d)]).collect() }
    }

    fn rank_one_refinement(&self) -> (MeasurementProtocol, Vec<Vec<usize>>) {
        let bases: Vec<CMat> = self.projectors.iter().map(|s| join_columns(s).expect("checked")).collect();
        let parties: Vec<usize> = (0..bases.len()).collect();
        let owner = self
            .projectors
            .iter()
            .map(|s| s.iter().enumerate().flat_map(|(y, e)| std::iter::repeat_n(y, e.ncols())).collect())
            .collect();
        (MeasurementProtocol::product(&parties, bases).expect("unitary bases"), owner)
    }

    /// Joint distribution of the coarse outcomes `Y`.
    pub fn distribution(&self, state: &DensityState) -> Result<Vec<f64>> {
        if self.projectors.len() != state.n_parties() {
            return argument("one projector set per party is required");
        }
        let (fine, owner) = self.rank_one_refinement();
        let p = evaluate_distribution(state, &fine)?;
        let arities: Vec<usize> = self.projectors.iter().map(|s| s.len()).collect();
        let size: usize = arities.iter().product();
        let fine_ar = fine.arities();
        let mut out = vec![0.0; size];
        let mut digits = vec![0usize; fine_ar.len()];
        for &q in p.probabilities() {
            let mut idx = 0;
            for (n, &dg) in digits.iter().enumerate() {
                idx = idx * arities[n] + owner[n][dg];
            }
            out[idx] += q;
            for k in (0..digits.len()).rev() {
                digits[k] += 1;
                if digits[k] < fine_ar[k] {
                    break;
                }
                digits[k] = 0;
            }
        }
        Ok(out)
    }

    /// `Σ_n {ln d_n − Σ_y p(y_n) S(ρ̃_n^{y_n})} − H(Y)` with
    /// `p(y_n) ρ̃_n^{y_n} = Π_{y_n} ρ_n Π_{y_n}`.
    pub fn work(&self, state: &DensityState) -> Result<f64> {
        let h = shannon(&self.distribution(state)?);
        let mut w = -h;
        for (n, set) in self.projectors.iter().enumerate() {
            let rho = state.reduced(&[n])?;
            w += (state.dims()[n] as f64).ln();
            for e in set {
                let block = HermitianOperator::symmetrized(e.adjoint() * rho.matrix() * e);
                let p = block.trace();
                if p > NULL_PROBABILITY {
                    let normed = HermitianOperator::symmetrized(block.into_matrix() / C64::new(p, 0.0));
                    w -= p * numerics::von_neumann_entropy(&normed)?;
                }
            }
        }
        Ok(w)
    }
}

fn join_columns(set: &[CMat]) -> Result<CMat> {
    let d = set.first().map(|e| e.nrows()).ok_or_else(|| Error::Argument("empty projector set".into()))?;
    let cols: usize = set.iter().map(|e| e.ncols()).sum();
    let mut out = CMat::zeros(d, cols);
    let mut at = 0;
    for e in set {
        if e.nrows() != d {
            return argument("projectors of one party must share a dimension");
        }
        out.view_mut((0, at), (d, e.ncols())).copy_from(e);
        at += e.ncols();
    }
    Ok(out)
}

/// Replaces every projector by rank-one projectors onto the eigenbasis of the
/// corresponding conditional local state; never decreases the extractable work.
pub fn fine_grain(lambda: &LocalProjective, state: &DensityState) -> Result<MeasurementProtocol> {
    if lambda.projectors.len() != state.n_parties() {
        return argument("one projector set per party is required");
    }
    let mut bases = Vec::new();
    for (n, set) in lambda.projectors.iter().enumerate() {
        let rho = state.reduced(&[n])?;
        let mut cols = Vec::new();
        for e in set {
            let block = HermitianOperator::symmetrized(e.adjoint() * rho.matrix() * e);
            let (vals, vecs) = block.eigh();
            let mut order: Vec<usize> = (0..vals.len()).collect();
            order.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap_or(std::cmp::Ordering::Equal));
            let rotated = e * vecs;
            for k in order {
                cols.push(rotated.column(k).into_owned());
            }
        }
        bases.push(CMat::from_columns(&cols));
    }
    let parties: Vec<usize> = (0..bases.len()).collect();
    MeasurementProtocol::product(&parties, bases)
}

/// Counts of sampled joint outcomes, indexed like the distribution table.
#[derive(Clone, Debug, PartialEq)]
pub struct OutcomeTally {
    pub labels: Vec<String>,
    pub arities: Vec<usize>,
    pub counts: Vec<u64>,
}

pub fn sample_outcomes(
    state: &DensityState,
    protocol: &MeasurementProtocol,
    n_samples: usize,
    seed: u64,
) -> Result<OutcomeTally> {
    if n_samples == 0 {
        return argument("at least one sample is required");
    }
    let dist = evaluate_distribution(state, protocol)?;
    let sampler = WeightedIndex::new(dist.probabilities()).map_err(|e| Error::Domain(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0u64; dist.probabilities().len()];
    for _ in 0..n_samples {
        counts[sampler.sample(&mut rng)] += 1;
    }
    Ok(OutcomeTally { labels: dist.labels().to_vec(), arities: dist.arities().to_vec(), counts })
}
