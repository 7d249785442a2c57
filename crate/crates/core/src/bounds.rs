//! Segment bounds on the deficit density, its one-way variant and global
//! quantum discord: dense states, finite chains and the thermodynamic limit
//! of translation-invariant MPS.
//!
//! Upper bounds minimize the measured entropy of each segment on its own;
//! lower bounds let each segment condition on a rank-one POVM outcome `Z`
//! on the support of everything to its left. Bound values are in nats per
//! party; segment term values are the raw optimized objectives in nats.

use std::collections::HashMap;
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{argument, Error, Result};
use crate::measurement::{support_isometry, EntropyObjective, EntropyTerm, MeasurementProtocol};
use crate::mps::{self, FixedPointData};
use crate::numerics::{self, binary_entropy, trace_distance, von_neumann_entropy, HermitianOperator};
use crate::optimize::{minimize, Diagnostics, OptimizerConfig};
use crate::states::{Boundary, DensityState, MpsTensorSet};
use crate::{CMat, CVec, C64, DEFAULT_DENSE_CAP};

/// Belief sets larger than this stop the ansatz recursion.
const MAX_BELIEFS: usize = 4096;
/// Default recursion depth of [`upper_bound_ansatz_tdl`].
pub const DEFAULT_ANSATZ_DEPTH: usize = 24;

#[derive(Clone, Debug)]
pub struct SegmentTerm {
    /// First party (or window site) of the segment.
    pub start: usize,
    pub len: usize,
    /// Optimized objective, nats.
    pub value: f64,
    pub protocol: MeasurementProtocol,
    pub diagnostics: Diagnostics,
}

#[derive(Clone, Debug)]
pub struct Bound {
    /// Nats per party.
    pub value: f64,
    pub terms: Vec<SegmentTerm>,
}

impl Bound {
    pub fn diagnostics(&self) -> Diagnostics {
        let parts: Vec<Diagnostics> = self.terms.iter().map(|t| t.diagnostics.clone()).collect();
        Diagnostics::merge(&parts)
    }
}

#[derive(Clone, Debug)]
pub struct BoundReport {
    pub l: usize,
    pub k: Option<usize>,
    pub m: Option<usize>,
    pub lower: Bound,
    pub upper: Bound,
}

impl BoundReport {
    pub fn width(&self) -> f64 {
        self.upper.value - self.lower.value
    }

    pub fn diagnostics(&self) -> Diagnostics {
        Diagnostics::merge(&[self.lower.diagnostics(), self.upper.diagnostics()])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Flavor {
    ZeroWay,
    OneWay,
    Global,
}

/// Segments `[0, l), [l, 2l), …` of `n` parties; the last one may be shorter.
pub fn segments(n: usize, l: usize) -> Result<Vec<(usize, usize)>> {
    if l == 0 || n == 0 {
        return argument("segment length and party count must be positive");
    }
    Ok((0..n).step_by(l).map(|s| (s, l.min(n - s))).collect())
}

fn check_dense(state: &DensityState) -> Result<()> {
    if state.dim() > DEFAULT_DENSE_CAP {
        return Err(Error::Resource(format!(
            "state dimension {} exceeds the dense cap {DEFAULT_DENSE_CAP}",
            state.dim()
        )));
    }
    Ok(())
}

fn ident(d: usize) -> CMat {
    CMat::identity(d, d)
}

/// Template and entropy terms for one segment measured on `host`.
///
/// With a POVM on `prefix`, the objective is `H(Z, Y) − H(Z)`; the global
/// flavor also subtracts every single-outcome entropy `H(y_i)`.
fn segment_problem(
    host: &DensityState,
    prefix: Option<(Vec<usize>, CMat)>,
    seg: &[usize],
    flavor: Flavor,
) -> Result<(MeasurementProtocol, Vec<EntropyTerm>)> {
    let dims: Vec<usize> = seg.iter().map(|&p| host.dims()[p]).collect();
    let povm = prefix.map(|(pp, support)| {
        let x = support.ncols();
        (pp, support, ident(x * x))
    });
    let offset = usize::from(povm.is_some());
    let template = if flavor == Flavor::OneWay {
        let mut histories = povm.as_ref().map_or(1, |p| p.2.nrows());
        let mut levels = Vec::with_capacity(dims.len());
        for &d in &dims {
            levels.push(vec![ident(d); histories]);
            histories *= d;
        }
        MeasurementProtocol::one_way_tree(seg, levels, povm)?
    } else {
        let bases = dims.iter().map(|&d| ident(d)).collect();
        match povm {
            Some((pp, s, v)) => MeasurementProtocol::povm_product(&pp, s, v, seg, bases)?,
            None => MeasurementProtocol::product(seg, bases)?,
        }
    };
    let mut terms = vec![EntropyTerm { legs: (0..seg.len() + offset).collect(), coeff: 1.0 }];
    if offset == 1 {
        terms.push(EntropyTerm { legs: vec![0], coeff: -1.0 });
    }
    if flavor == Flavor::Global {
        terms.extend((0..seg.len()).map(|i| EntropyTerm { legs: vec![offset + i], coeff: -1.0 }));
    }
    Ok((template, terms))
}

fn solve(
    host: &DensityState,
    template: &MeasurementProtocol,
    terms: Vec<EntropyTerm>,
    cfg: &OptimizerConfig,
    warm: Option<Vec<CMat>>,
    start: usize,
    len: usize,
) -> Result<SegmentTerm> {
    let obj = EntropyObjective::for_protocol(host, template, terms, 0.0)?;
    let cfg = cfg.clone().with_warm_start(warm);
    let opt = minimize(&obj, &obj.spec(), &cfg)?;
    Ok(SegmentTerm {
        start,
        len,
        value: opt.value,
        protocol: template.with_unitaries(opt.point)?,
        diagnostics: opt.diagnostics,
    })
}

/// Unitaries for `template` copied from `source` party by party. History
/// blocks are filled cyclically, which lifts a tree without a POVM stage to
/// the same tree behind one. `None` when a party or size does not match.
fn lift(template: &MeasurementProtocol, source: &MeasurementProtocol, povm: Option<CMat>) -> Option<Vec<CMat>> {
    let mut out = template.unitaries.clone();
    if let (Some(pv), Some(v)) = (&template.povm, povm) {
        if v.shape() != out[pv.block].shape() {
            return None;
        }
        out[pv.block] = v;
    }
    for st in &template.stages {
        let src = source.stages.iter().find(|s| s.party == st.party)?;
        for (h, &b) in st.blocks.iter().enumerate() {
            let u = &source.unitaries[src.blocks[h % src.blocks.len()]];
            if u.shape() != out[b].shape() {
                return None;
            }
            out[b] = u.clone();
        }
    }
    Some(out)
}

/// Completes orthonormal rows to a unitary with Gram-Schmidt on unit rows.
fn complete_rows(w: &CMat) -> CMat {
    let (x, k) = w.shape();
    let mut rows: Vec<CVec> = (0..x).map(|i| w.row(i).transpose()).collect();
    for j in 0..k {
        if rows.len() == k {
            break;
        }
        let mut v = CVec::zeros(k);
        v[j] = C64::new(1.0, 0.0);
        for _ in 0..2 {
            for r in &rows {
                let c = r.dotc(&v);
                v -= r * c;
            }
        }
        let n = v.norm();
        if n > 1e-8 {
            rows.push(v / C64::new(n, 0.0));
        }
    }
    CMat::from_fn(k, k, |i, j| rows[i][j])
}

/// POVM dilation reproducing the product measurement `bases` on parties
/// `0..bases.len()` inside `support`, when it has at most `x²` outcomes.
fn product_povm_dilation(bases: &[CMat], support: &CMat) -> Option<CMat> {
    let x = support.ncols();
    let k = x * x;
    let outcomes: usize = bases.iter().map(|b| b.ncols()).product();
    if outcomes > k {
        return None;
    }
    let joint = bases.iter().skip(1).fold(bases[0].clone(), |acc, b| acc.kronecker(b));
    let proj = support.adjoint() * joint;
    let mut w = CMat::zeros(x, k);
    w.view_mut((0, 0), (x, outcomes)).copy_from(&proj);
    Some(complete_rows(&w))
}

/// Bases of a non-adaptive protocol listed by party.
fn bases_by_party(p: &MeasurementProtocol, parties: &[usize]) -> Option<Vec<CMat>> {
    parties
        .iter()
        .map(|&q| {
            let st = p.stages.iter().find(|s| s.party == q)?;
            (st.blocks.len() == 1).then(|| p.unitaries[st.blocks[0]].clone())
        })
        .collect()
}

/// Isometry onto the support of the marginal of parties `0..n`.
fn prefix_support(state: &DensityState, n: usize) -> Result<CMat> {
    let Some(v) = state.vector() else {
        let keep: Vec<usize> = (0..n).collect();
        return Ok(support_isometry(&state.reduced(&keep)?));
    };
    let rows: usize = state.dims()[..n].iter().product();
    let cols = v.len() / rows;
    let psi = CMat::from_fn(rows, cols, |i, j| v[i * cols + j]);
    if rows <= cols {
        return Ok(support_isometry(&HermitianOperator::symmetrized(&psi * psi.adjoint())));
    }
    let gram = HermitianOperator::symmetrized(psi.adjoint() * &psi);
    let right = support_isometry(&gram);
    if right.ncols() == 0 {
        return Err(Error::Domain("state has no support".into()));
    }
    Ok((&psi * right).qr().q())
}

fn segment_entropy_constant(state: &DensityState, flavor: Flavor) -> Result<f64> {
    let s = state.entropy()?;
    Ok(match flavor {
        Flavor::Global => state.local_entropies()?.iter().sum::<f64>() - s,
        _ => -s,
    })
}

fn dense_upper_terms(
    state: &DensityState,
    segs: &[(usize, usize)],
    flavor: Flavor,
    cfg: &OptimizerConfig,
    hint: Option<&MeasurementProtocol>,
) -> Result<Vec<SegmentTerm>> {
    segs.par_iter()
        .map(|&(start, len)| {
            let seg: Vec<usize> = (start..start + len).collect();
            let (tpl, terms) = segment_problem(state, None, &seg, flavor)?;
            let warm = hint.and_then(|h| lift(&tpl, h, None));
            solve(state, &tpl, terms, cfg, warm, start, len)
        })
        .collect()
}

fn dense_lower_terms(
    state: &DensityState,
    segs: &[(usize, usize)],
    upper: &[SegmentTerm],
    flavor: Flavor,
    cfg: &OptimizerConfig,
    hint: Option<&MeasurementProtocol>,
) -> Result<Vec<SegmentTerm>> {
    segs.par_iter()
        .zip(upper.par_iter())
        .map(|(&(start, len), up)| {
            if start == 0 {
                return Ok(up.clone());
            }
            let seg: Vec<usize> = (start..start + len).collect();
            let prefix: Vec<usize> = (0..start).collect();
            let support = prefix_support(state, start)?;
            let (tpl, terms) = segment_problem(state, Some((prefix.clone(), support.clone())), &seg, flavor)?;
            let from_hint = hint.and_then(|h| {
                let v = product_povm_dilation(&bases_by_party(h, &prefix)?, &support)?;
                lift(&tpl, h, Some(v))
            });
            let warm = from_hint.or_else(|| lift(&tpl, &up.protocol, None));
            solve(state, &tpl, terms, cfg, warm, start, len)
        })
        .collect()
}

fn dense_report(
    state: &DensityState,
    l: usize,
    cfg: &OptimizerConfig,
    hint: Option<&MeasurementProtocol>,
    flavor: Flavor,
) -> Result<BoundReport> {
    check_dense(state)?;
    let n = state.n_parties();
    let segs = segments(n, l)?;
    let constant = segment_entropy_constant(state, flavor)?;
    let upper = dense_upper_terms(state, &segs, flavor, cfg, hint)?;
    let lower = dense_lower_terms(state, &segs, &upper, flavor, cfg, hint)?;
    let total = |ts: &[SegmentTerm]| (ts.iter().map(|t| t.value).sum::<f64>() + constant) / n as f64;
    Ok(BoundReport {
        l,
        k: None,
        m: None,
        lower: Bound { value: total(&lower), terms: lower },
        upper: Bound { value: total(&upper), terms: upper },
    })
}

/// `U_l = (1/N)(Σ_seg min H(Y_seg) − S(ρ))`.
pub fn upper_bound_ul(state: &DensityState, l: usize, cfg: &OptimizerConfig) -> Result<Bound> {
    check_dense(state)?;
    let segs = segments(state.n_parties(), l)?;
    let terms = dense_upper_terms(state, &segs, Flavor::ZeroWay, cfg, None)?;
    let value = (terms.iter().map(|t| t.value).sum::<f64>() - state.entropy()?) / state.n_parties() as f64;
    Ok(Bound { value, terms })
}

/// `L_l = (1/N)(Σ_seg min H(Y_seg | Z) − S(ρ))`, `Z` a rank-one POVM on the
/// support of the marginal of all earlier parties.
///
/// A product protocol passed as `hint` seeds every segment, so the result
/// never exceeds the hint's deficit density when its prefix outcomes fit
/// into the POVM.
pub fn lower_bound_ll(
    state: &DensityState,
    l: usize,
    cfg: &OptimizerConfig,
    hint: Option<&MeasurementProtocol>,
) -> Result<Bound> {
    Ok(dense_report(state, l, cfg, hint, Flavor::ZeroWay)?.lower)
}

/// Both `L_l` and `U_l` of a dense state.
pub fn dense_bounds(
    state: &DensityState,
    l: usize,
    cfg: &OptimizerConfig,
    hint: Option<&MeasurementProtocol>,
) -> Result<BoundReport> {
    dense_report(state, l, cfg, hint, Flavor::ZeroWay)
}

/// `L_l^→` and `U_l^→`: one-way trees inside each segment, the lower bound
/// adapting on `Z` as well.
pub fn one_way_bounds(
    state: &DensityState,
    l: usize,
    cfg: &OptimizerConfig,
    hint: Option<&MeasurementProtocol>,
) -> Result<BoundReport> {
    dense_report(state, l, cfg, hint, Flavor::OneWay)
}

/// Segment bounds on global quantum discord.
pub fn gqd_bounds(
    state: &DensityState,
    l: usize,
    cfg: &OptimizerConfig,
    hint: Option<&MeasurementProtocol>,
) -> Result<BoundReport> {
    dense_report(state, l, cfg, hint, Flavor::Global)
}

/// `(H_Λ(Y) − S(ρ)) / N` for a non-adaptive protocol on every party.
pub fn upper_bound_ansatz(state: &DensityState, protocol: &MeasurementProtocol) -> Result<f64> {
    let n = state.n_parties();
    let mut parties = protocol.parties();
    parties.sort_unstable();
    if protocol.povm.is_some()
        || protocol.stages.iter().any(|s| s.blocks.len() != 1)
        || parties != (0..n).collect::<Vec<_>>()
    {
        return argument("an ansatz must be a non-adaptive basis on every party");
    }
    Ok(crate::measurement::deficit_of_protocol(state, protocol)? / n as f64)
}

fn prepared(t: &MpsTensorSet) -> Result<(MpsTensorSet, FixedPointData)> {
    let t = if t.right_canonical { t.clone() } else { mps::right_canonicalize(t)? };
    let fp = mps::fixed_point(&t)?;
    fp.require_normal()?;
    Ok((t, fp))
}

/// Host state and party indices of `sites` consecutive sites: a window in the
/// thermodynamic limit, else the reduced density operator of the `n`-site chain.
fn chain_host(
    t: &MpsTensorSet,
    fp: Option<&FixedPointData>,
    n: Option<usize>,
    sites: usize,
) -> Result<(DensityState, Vec<usize>)> {
    match (n, fp) {
        (None, None) => argument("thermodynamic-limit host needs fixed-point data"),
        (None, Some(fp)) => {
            let w = mps::build_window(t, fp, sites, DEFAULT_DENSE_CAP)?;
            Ok((w.as_state()?, (1..=sites).collect()))
        }
        (Some(n), _) => {
            let rho = mps::reduced_density(t, n, 0..sites, DEFAULT_DENSE_CAP)?;
            let d = t.physical_dim();
            Ok((DensityState::mixed(vec![d; sites], rho.into_matrix())?, (0..sites).collect()))
        }
    }
}

fn tdl_upper_term(
    t: &MpsTensorSet,
    fp: &FixedPointData,
    l: usize,
    flavor: Flavor,
    cfg: &OptimizerConfig,
    warm: Option<&MeasurementProtocol>,
) -> Result<SegmentTerm> {
    let (host, seg) = chain_host(t, Some(fp), None, l)?;
    let (tpl, terms) = segment_problem(&host, None, &seg, flavor)?;
    let warm = warm.and_then(|w| lift(&tpl, w, None));
    solve(&host, &tpl, terms, cfg, warm, 1, l)
}

fn tdl_lower_term(
    t: &MpsTensorSet,
    fp: &FixedPointData,
    l: usize,
    flavor: Flavor,
    cfg: &OptimizerConfig,
    warm: Option<&MeasurementProtocol>,
) -> Result<SegmentTerm> {
    let (host, seg) = chain_host(t, Some(fp), None, l)?;
    let support = support_isometry(&host.reduced(&[0])?);
    let (tpl, terms) = segment_problem(&host, Some((vec![0], support)), &seg, flavor)?;
    let warm = warm.and_then(|w| {
        if w.povm.is_some() { (w.block_dims() == tpl.block_dims()).then(|| w.unitaries.clone()) } else { lift(&tpl, w, None) }
    });
    solve(&host, &tpl, terms, cfg, warm, 1, l)
}

fn site_entropy(t: &MpsTensorSet) -> Result<f64> {
    von_neumann_entropy(&mps::reduced_density_tdl(t, 1, DEFAULT_DENSE_CAP)?)
}

fn tdl_report(t: &MpsTensorSet, l: usize, cfg: &OptimizerConfig, flavor: Flavor) -> Result<BoundReport> {
    if l == 0 {
        return argument("segment length must be positive");
    }
    let (t, fp) = prepared(t)?;
    let upper = tdl_upper_term(&t, &fp, l, flavor, cfg, None)?;
    let lower = tdl_lower_term(&t, &fp, l, flavor, cfg, Some(&upper.protocol))?;
    let constant = if flavor == Flavor::Global { site_entropy(&t)? } else { 0.0 };
    let density = |v: f64| v / l as f64 + constant;
    Ok(BoundReport {
        l,
        k: None,
        m: None,
        lower: Bound { value: density(lower.value), terms: vec![lower] },
        upper: Bound { value: density(upper.value), terms: vec![upper] },
    })
}

/// Thermodynamic-limit `L̄_l` and `Ū_l` of a normal translation-invariant MPS.
///
/// `Ū_l = (1/l) min H(Y_l)` on `l` consecutive sites; `L̄_l = (1/l) min H(Y_l | Z)`
/// with `Z` measured on the bond that purifies the half-infinite left chain.
pub fn tdl_bounds(t: &MpsTensorSet, l: usize, cfg: &OptimizerConfig) -> Result<BoundReport> {
    tdl_report(t, l, cfg, Flavor::ZeroWay)
}

pub fn one_way_bounds_tdl(t: &MpsTensorSet, l: usize, cfg: &OptimizerConfig) -> Result<BoundReport> {
    tdl_report(t, l, cfg, Flavor::OneWay)
}

/// Global quantum discord density bounds; the single-site entropy `S(ρ_1)`
/// replaces the finite-size local entropy sum.
pub fn gqd_bounds_tdl(t: &MpsTensorSet, l: usize, cfg: &OptimizerConfig) -> Result<BoundReport> {
    tdl_report(t, l, cfg, Flavor::Global)
}

fn ulk_term(
    t: &MpsTensorSet,
    fp: Option<&FixedPointData>,
    n: Option<usize>,
    l: usize,
    k: usize,
    cfg: &OptimizerConfig,
    warm: &[CMat],
) -> Result<SegmentTerm> {
    let sites = (k + 1) * l;
    let (host, parties) = chain_host(t, fp, n, sites)?;
    let d = t.physical_dim();
    let tpl = MeasurementProtocol::replicated(&parties, vec![ident(d); l])?;
    let mut terms = vec![EntropyTerm { legs: (0..sites).collect(), coeff: 1.0 }];
    if k > 0 {
        terms.push(EntropyTerm { legs: (0..k * l).collect(), coeff: -1.0 });
    }
    solve(&host, &tpl, terms, cfg, Some(warm.to_vec()), 0, l)
}

fn ul_period(t: &MpsTensorSet, fp: Option<&FixedPointData>, n: Option<usize>, l: usize, cfg: &OptimizerConfig) -> Result<SegmentTerm> {
    let (host, seg) = chain_host(t, fp, n, l)?;
    let (tpl, terms) = segment_problem(&host, None, &seg, Flavor::ZeroWay)?;
    solve(&host, &tpl, terms, cfg, None, 0, l)
}

/// `U_{l,k}`: one basis set repeated over every segment, each segment charged
/// its entropy conditioned on the previous `k` segments. With `n` given the
/// chain must be periodic with `l | n` and the bound is
/// `(kl/N) ln d + (1/l) min H(Y_seg | previous k)`; in the thermodynamic limit
/// the first term vanishes. The search starts from the `U_l` optimum, so the
/// result never exceeds `U_l`.
pub fn upper_bound_ulk(
    t: &MpsTensorSet,
    n: Option<usize>,
    l: usize,
    k: usize,
    cfg: &OptimizerConfig,
) -> Result<Bound> {
    if l == 0 {
        return argument("segment length must be positive");
    }
    if let Some(n) = n {
        if !matches!(t.boundary, Boundary::Periodic) || n % l != 0 || n < (k + 1) * l {
            return argument("finite-size U_{l,k} needs a periodic chain with l | N and N ≥ (k+1)l");
        }
    }
    let (t, fp) = match n {
        Some(_) => (t.clone(), None),
        None => {
            let (t, fp) = prepared(t)?;
            (t, Some(fp))
        }
    };
    let base = ul_period(&t, fp.as_ref(), n, l, cfg)?;
    let term = ulk_term(&t, fp.as_ref(), n, l, k, cfg, &base.protocol.unitaries)?;
    let d = t.physical_dim() as f64;
    let head = n.map_or(0.0, |n| (k * l) as f64 / n as f64 * d.ln());
    Ok(Bound { value: head + term.value / l as f64, terms: vec![term] })
}

/// `U_l` of an `n`-site chain from reduced density operators, without the
/// dense state. Translation-invariant periodic chains reuse one optimization
/// per segment length.
pub fn upper_bound_ul_chain(t: &MpsTensorSet, n: usize, l: usize, cfg: &OptimizerConfig) -> Result<Bound> {
    let segs = segments(n, l)?;
    let d = t.physical_dim();
    let periodic = matches!(t.boundary, Boundary::Periodic);
    let solve_seg = |start: usize, len: usize| -> Result<SegmentTerm> {
        let rho = mps::reduced_density(t, n, start..start + len, DEFAULT_DENSE_CAP)?;
        let host = DensityState::mixed(vec![d; len], rho.into_matrix())?;
        let seg: Vec<usize> = (0..len).collect();
        let (tpl, terms) = segment_problem(&host, None, &seg, Flavor::ZeroWay)?;
        solve(&host, &tpl, terms, cfg, None, start, len)
    };
    let terms: Vec<SegmentTerm> = if periodic {
        let mut cache: HashMap<usize, SegmentTerm> = HashMap::new();
        let mut out = Vec::new();
        for &(start, len) in &segs {
            if !cache.contains_key(&len) {
                cache.insert(len, solve_seg(0, len)?);
            }
            out.push(SegmentTerm { start, ..cache[&len].clone() });
        }
        out
    } else {
        segs.par_iter().map(|&(s, len)| solve_seg(s, len)).collect::<Result<_>>()?
    };
    let value = terms.iter().map(|t| t.value).sum::<f64>() / n as f64;
    Ok(Bound { value, terms })
}

/// `L_l` and `U_l` of an `n`-site chain. The upper bound uses reduced density
/// operators; the lower bound needs the dense state.
pub fn chain_bounds(t: &MpsTensorSet, n: usize, l: usize, cfg: &OptimizerConfig) -> Result<BoundReport> {
    let dense = mps::to_dense(t, n, DEFAULT_DENSE_CAP)?;
    let upper = upper_bound_ul_chain(t, n, l, cfg)?;
    let lower = lower_bound_ll(&dense, l, cfg, None)?;
    Ok(BoundReport { l, k: None, m: None, lower, upper })
}

/// Entropy rate bound of a periodic product measurement on an infinite chain.
///
/// Site `j` is measured in `period[j mod p]`. Posterior left environments
/// (beliefs) are propagated exactly, merging equal ones, and the result is
/// `(1/p) H(Y over the last complete period | everything before)`, an upper
/// bound on the entropy rate at any depth. The recursion stops early when
/// more than 4096 distinct beliefs are alive.
pub fn upper_bound_ansatz_tdl(t: &MpsTensorSet, period: &[CMat], depth: usize) -> Result<f64> {
    let (t, fp) = prepared(t)?;
    let d = t.physical_dim();
    let p = period.len();
    if p == 0 || depth < p {
        return argument("ansatz needs a non-empty period and depth at least one period");
    }
    if period.iter().any(|u| u.shape() != (d, d) || numerics::unitarity_defect(u) > 1e-8) {
        return argument(format!("ansatz bases must be {d}×{d} unitaries"));
    }
    let kraus: Vec<Vec<CMat>> = period
        .iter()
        .map(|u| {
            (0..d)
                .map(|y| t.a.iter().enumerate().fold(CMat::zeros(t.bond_dim(), t.bond_dim()), |acc, (s, a)| acc + a * u[(s, y)].conj()))
                .collect()
        })
        .collect();
    let mut beliefs: Vec<(CMat, f64)> = vec![(fp.left_environment().into_matrix(), 1.0)];
    let mut rates = Vec::with_capacity(depth);
    for step in 0..depth {
        let mut h = 0.0;
        let mut next: Vec<(CMat, f64)> = Vec::new();
        let mut index: HashMap<Vec<i64>, usize> = HashMap::new();
        for (env, w) in &beliefs {
            let post: Vec<CMat> = kraus[step % p].iter().map(|b| b.adjoint() * env * b).collect();
            let q: Vec<f64> = post.iter().map(|m| m.trace().re.max(0.0)).collect();
            let total: f64 = q.iter().sum();
            for (m, &qy) in post.into_iter().zip(&q) {
                let py = qy / total;
                if py <= 0.0 {
                    continue;
                }
                h -= w * py * py.ln();
                if w * py < 1e-14 {
                    continue;
                }
                let m = m / C64::new(qy, 0.0);
                let key: Vec<i64> = m.iter().flat_map(|z| [(z.re * 1e10).round() as i64, (z.im * 1e10).round() as i64]).collect();
                match index.get(&key) {
                    Some(&i) => next[i].1 += w * py,
                    None => {
                        index.insert(key, next.len());
                        next.push((m, w * py));
                    }
                }
            }
        }
        rates.push(h);
        if next.len() > MAX_BELIEFS {
            break;
        }
        beliefs = next;
    }
    let full = rates.len() / p;
    if full == 0 {
        return Err(Error::Resource("belief set grew too fast to finish one period".into()));
    }
    let last = &rates[(full - 1) * p..full * p];
    Ok(last.iter().sum::<f64>() / p as f64)
}

/// Coarse-grained thermodynamic-limit bracket.
#[derive(Clone, Debug)]
pub struct CoarseReport {
    pub m: usize,
    pub l: usize,
    /// Lower bound on the coarse-grained deficit density (nats per block).
    pub lower: Bound,
    /// Best of the available upper bounds.
    pub upper: Bound,
    /// Which upper bound won: `"u_l"`, `"u_l1"`, `"u_l1_rate"` (entropy rate of
    /// the `Ū_{l,1}` bases), `"diag_ansatz"` or `"comp_ansatz"`.
    pub upper_source: &'static str,
    /// `S_EE / 2 = S(τ)`.
    pub half_entanglement: f64,
    /// `max(|lower − S_EE/2|, |upper − S_EE/2|)`, which bounds `|δ_m − S_EE/2|`.
    pub gap: f64,
    /// Correlation length in sites.
    pub xi: f64,
}

/// Blocks of `m` sites. Their effective tensor (physical dimension `D²`) only
/// stands in for the block when every effective basis lifts to a block basis,
/// i.e. `d^m ≥ D²`.
fn effective_blocks(t: &MpsTensorSet, m: usize) -> Result<mps::BlockedTensor> {
    let db = t.bond_dim();
    let blocked = mps::block_tensor(t, m, DEFAULT_DENSE_CAP)?;
    if blocked.tensor.physical_dim() < db * db {
        return argument(format!("block dimension {} is below D² = {}", blocked.tensor.physical_dim(), db * db));
    }
    Ok(blocked)
}

/// Basis of the effective index diagonalizing `Tr₁ K / D` on both factors.
fn diag_ansatz_basis(blocked: &mps::BlockedTensor) -> CMat {
    let db = blocked.tensor.bond_dim();
    let k = blocked.choi().into_matrix();
    let m = CMat::from_fn(db, db, |b, bp| (0..db).map(|a| k[(a * db + b, a * db + bp)]).sum::<C64>());
    let (_, u) = HermitianOperator::symmetrized(m).eigh();
    u.kronecker(&u.map(|z| z.conj()))
}

/// Bracket on the deficit density of `m`-site blocks measured as single parties.
///
/// Each block is replaced by the effective tensor with physical dimension `D²`
/// (same transfer matrix). The lower bound is the one-way bound with one
/// effective party conditioned on the bond; the upper bound is the best of
/// `Ū_l`, `Ū_{l,1}` and an ansatz measuring both bond factors in the eigenbasis
/// of the reduced Choi matrix.
pub fn coarse_bounds(t: &MpsTensorSet, m: usize, l: usize, cfg: &OptimizerConfig) -> Result<CoarseReport> {
    let (t, fp) = prepared(t)?;
    let blocked = effective_blocks(&t, m)?;
    let eff = blocked.effective()?;
    let (eff, efp) = prepared(&eff)?;
    let half = von_neumann_entropy(&fp.tau)?;

    let lower_term = tdl_lower_term(&eff, &efp, 1, Flavor::OneWay, cfg, None)?;
    let lower = Bound { value: lower_term.value, terms: vec![lower_term] };

    let basis = diag_ansatz_basis(&blocked);
    let diag = upper_bound_ansatz_tdl(&eff, std::slice::from_ref(&basis), DEFAULT_ANSATZ_DEPTH)?;
    let q = eff.physical_dim();
    let comp = upper_bound_ansatz_tdl(&eff, &[ident(q)], DEFAULT_ANSATZ_DEPTH)?;
    let (ansatz, basis, ansatz_name) = if comp < diag { (comp, ident(q), "comp_ansatz") } else { (diag, basis, "diag_ansatz") };
    let ul = tdl_upper_term(&eff, &efp, l, Flavor::ZeroWay, cfg, None)?;
    let warm: Vec<CMat> = if l == 1 { vec![basis.clone()] } else { ul.protocol.unitaries.clone() };
    let ul1 = ulk_term(&eff, Some(&efp), None, l, 1, cfg, &warm)?;
    let diag_protocol = MeasurementProtocol::product(&[1], vec![basis])?;
    let rate = upper_bound_ansatz_tdl(&eff, &ul1.protocol.unitaries, DEFAULT_ANSATZ_DEPTH)?;
    let rate_protocol = ul1.protocol.clone();
    let candidates = [
        ("u_l", ul.value / l as f64, ul),
        ("u_l1", ul1.value / l as f64, ul1),
        (
            "u_l1_rate",
            rate,
            SegmentTerm { start: 1, len: l, value: rate, protocol: rate_protocol, diagnostics: Diagnostics::trivial() },
        ),
        (
            ansatz_name,
            ansatz,
            SegmentTerm { start: 1, len: 1, value: ansatz, protocol: diag_protocol, diagnostics: Diagnostics::trivial() },
        ),
    ];
    let (source, value, term) = candidates
        .into_iter()
        .fold(None, |best: Option<(&'static str, f64, SegmentTerm)>, c| match best {
            Some(b) if b.1 <= c.1 => Some(b),
            _ => Some(c),
        })
        .expect("candidates");
    let upper = Bound { value, terms: vec![term] };
    let gap = (lower.value - half).abs().max((upper.value - half).abs());
    Ok(CoarseReport { m, l, lower, upper, upper_source: source, half_entanglement: half, gap, xi: fp.xi })
}

/// `H(y₁, y₂) − H(y₁)` for two neighbouring effective blocks of the one-parameter
/// family measured in the computational basis of the effective index; an
/// upper bound on the coarse-grained deficit density.
pub fn coarse_ansatz_upper_smallg(g: f64, m: usize) -> Result<f64> {
    let t = crate::states::mps_family_tensors(g)?;
    let (t, _) = prepared(&t)?;
    let eff = effective_blocks(&t, m)?.effective()?;
    let (eff, _) = prepared(&eff)?;
    let rho = mps::reduced_density_tdl(&eff, 2, DEFAULT_DENSE_CAP)?;
    let q = eff.physical_dim();
    let joint: Vec<f64> = rho.matrix().diagonal().iter().map(|z| z.re.max(0.0)).collect();
    let first: Vec<f64> = (0..q).map(|a| joint[a * q..(a + 1) * q].iter().sum()).collect();
    Ok(shannon(&joint) - shannon(&first))
}

fn shannon(p: &[f64]) -> f64 {
    let total: f64 = p.iter().sum();
    p.iter().filter(|&&x| x > 0.0).map(|&x| -(x / total) * (x / total).ln()).sum()
}

/// Both sides of the continuity estimate for one pair of states.
#[derive(Clone, Debug)]
pub struct ContinuityReport {
    /// Trace norm `‖ρ − ρ'‖₁`.
    pub nu: f64,
    pub l: usize,
    pub upper_diff: f64,
    /// `(ν/2) ln d + h(ν/2) / l`.
    pub upper_limit: f64,
    pub lower_diff: f64,
    /// `4ν ln d + 2 h(ν) / l`.
    pub lower_limit: f64,
}

impl ContinuityReport {
    pub fn upper_margin(&self) -> f64 {
        self.upper_limit - self.upper_diff
    }

    pub fn lower_margin(&self) -> f64 {
        self.lower_limit - self.lower_diff
    }

    pub fn holds(&self) -> bool {
        self.upper_margin() >= 0.0 && self.lower_margin() >= 0.0
    }
}

/// Compares `U_l` and `L_l` of two nearby states (`ν ≤ 1/2`) against their
/// continuity limits; `d` is the largest local dimension.
pub fn continuity_check(a: &DensityState, b: &DensityState, l: usize, cfg: &OptimizerConfig) -> Result<ContinuityReport> {
    if a.dims() != b.dims() {
        return argument("states must have the same party dimensions");
    }
    let nu = trace_distance(&a.matrix(), &b.matrix())?;
    if nu > 0.5 {
        return argument(format!("trace distance {nu:.3} exceeds 1/2"));
    }
    let ra = dense_bounds(a, l, cfg, None)?;
    let rb = dense_bounds(b, l, cfg, None)?;
    let d = *a.dims().iter().max().expect("non-empty") as f64;
    let lf = l.min(a.n_parties()) as f64;
    Ok(ContinuityReport {
        nu,
        l,
        upper_diff: (ra.upper.value - rb.upper.value).abs(),
        upper_limit: nu / 2.0 * d.ln() + binary_entropy(nu / 2.0)? / lf,
        lower_diff: (ra.lower.value - rb.lower.value).abs(),
        lower_limit: 4.0 * nu * d.ln() + 2.0 * binary_entropy(nu)? / lf,
    })
}

/// Shape of a measurement basis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BasisClass {
    /// Computational basis up to order and phases.
    Computational,
    /// Every vector unbiased with respect to the computational basis (`|±⟩`-like).
    Unbiased,
    Other,
}

impl BasisClass {
    pub fn of(u: &CMat) -> Self {
        let d = u.nrows() as f64;
        let tol = 1e-3;
        let mags: Vec<f64> = u.iter().map(|z| z.norm_sqr()).collect();
        if u.column_iter().all(|c| c.iter().any(|z| z.norm_sqr() > 1.0 - tol)) {
            BasisClass::Computational
        } else if mags.iter().all(|m| (m - 1.0 / d).abs() < tol) {
            BasisClass::Unbiased
        } else {
            BasisClass::Other
        }
    }

    /// Common class of every stage basis, `Other` when they differ.
    pub fn of_protocol(p: &MeasurementProtocol) -> Self {
        let mut classes = p.stages.iter().flat_map(|s| s.blocks.iter()).map(|&b| Self::of(&p.unitaries[b]));
        let first = classes.next().unwrap_or(BasisClass::Other);
        if classes.all(|c| c == first) { first } else { BasisClass::Other }
    }

    pub fn name(self) -> &'static str {
        match self {
            BasisClass::Computational => "computational",
            BasisClass::Unbiased => "unbiased",
            BasisClass::Other => "other",
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub g: f64,
    pub l: usize,
    pub k: usize,
    pub lower: f64,
    pub upper: f64,
    /// Basis class of the protocol achieving `upper`.
    pub upper_basis: BasisClass,
    pub optimizer_restarts: usize,
    pub converged: bool,
    /// Whether a bimodal restart set triggered the larger restart budget.
    pub escalated: bool,
    pub wall_ms: u128,
}

/// Restart count used when the two best restarts of a search disagree.
pub const ESCALATED_RESTARTS: usize = 128;

fn bimodal(d: &Diagnostics) -> bool {
    let mut v: Vec<f64> = d.restart_values.iter().copied().filter(|x| x.is_finite()).collect();
    v.sort_by(f64::total_cmp);
    v.len() >= 2 && v[1] - v[0] > 1e-6
}

/// Thermodynamic-limit bracket `[L̄_l, min(Ū_l, Ū_{l,k})]` along the
/// one-parameter family, each point warm-started from the previous one.
///
/// `g = 0` is the GHZ limit, where the density is exactly zero; it is
/// reported without a search.
pub fn family_sweep(gs: &[f64], l: usize, k: usize, cfg: &OptimizerConfig) -> Result<Vec<SweepPoint>> {
    let mut out = Vec::with_capacity(gs.len());
    let mut prev: Option<(SegmentTerm, SegmentTerm)> = None;
    for &g in gs {
        let clock = Instant::now();
        if g == 0.0 {
            out.push(SweepPoint {
                g,
                l,
                k,
                lower: 0.0,
                upper: 0.0,
                upper_basis: BasisClass::Computational,
                optimizer_restarts: 0,
                converged: true,
                escalated: false,
                wall_ms: clock.elapsed().as_millis(),
            });
            continue;
        }
        let (t, fp) = prepared(&crate::states::mps_family_tensors(g)?)?;
        let mut escalated = false;
        let mut run = |f: &dyn Fn(&OptimizerConfig) -> Result<SegmentTerm>| -> Result<SegmentTerm> {
            let first = f(cfg)?;
            if !bimodal(&first.diagnostics) || cfg.restarts >= ESCALATED_RESTARTS {
                return Ok(first);
            }
            escalated = true;
            let wide = f(&cfg.clone().with_restarts(ESCALATED_RESTARTS))?;
            let mut best = if wide.value <= first.value { wide } else { first.clone() };
            best.diagnostics.restarts_run = first.diagnostics.restarts_run + ESCALATED_RESTARTS;
            Ok(best)
        };
        let ul = run(&|c| tdl_upper_term(&t, &fp, l, Flavor::ZeroWay, c, prev.as_ref().map(|p| &p.0.protocol)))?;
        let ulk = if k > 0 {
            Some(run(&|c| ulk_term(&t, Some(&fp), None, l, k, c, &ul.protocol.unitaries))?)
        } else {
            None
        };
        let lower = run(&|c| tdl_lower_term(&t, &fp, l, Flavor::ZeroWay, c, Some(prev.as_ref().map_or(&ul.protocol, |p| &p.1.protocol))))?;
        let (upper_term, upper) = match &ulk {
            Some(u) if u.value < ul.value => (u.clone(), u.value / l as f64),
            _ => (ul.clone(), ul.value / l as f64),
        };
        let diag = Diagnostics::merge(&[
            ul.diagnostics.clone(),
            lower.diagnostics.clone(),
            ulk.as_ref().map_or_else(Diagnostics::trivial, |u| u.diagnostics.clone()),
        ]);
        out.push(SweepPoint {
            g,
            l,
            k,
            lower: lower.value / l as f64,
            upper,
            upper_basis: BasisClass::of_protocol(&upper_term.protocol),
            optimizer_restarts: diag.restarts_run,
            converged: diag.converged,
            escalated,
            wall_ms: clock.elapsed().as_millis(),
        });
        prev = Some((ul, lower));
    }
    Ok(out)
}
