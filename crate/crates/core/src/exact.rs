//! Optimizer-backed deficits and discords of few-body states held densely.

use crate::error::{argument, Error, Result};
use crate::measurement::{support_isometry, EntropyObjective, EntropyTerm, MeasurementProtocol};
use crate::numerics::{self, relative_entropy, HermitianOperator};
use crate::optimize::{minimize, Diagnostics, OptimizerConfig};
use crate::states::DensityState;
use crate::{CMat, DEFAULT_DENSE_CAP};

#[derive(Clone, Debug)]
pub struct DeficitResult {
    /// Nats.
    pub value: f64,
    /// Optimal protocol found.
    pub protocol: MeasurementProtocol,
    pub diagnostics: Diagnostics,
}

fn check_cap(state: &DensityState) -> Result<()> {
    if state.dim() > DEFAULT_DENSE_CAP {
        return Err(Error::Resource(format!(
            "state dimension {} exceeds the dense cap {DEFAULT_DENSE_CAP}",
            state.dim()
        )));
    }
    Ok(())
}

/// `W_g = Σ_n ln d_n − S(ρ)`.
pub fn work_global(state: &DensityState) -> Result<f64> {
    let max: f64 = state.dims().iter().map(|&d| (d as f64).ln()).sum();
    Ok(max - state.entropy()?)
}

fn optimize_protocol(
    state: &DensityState,
    template: &MeasurementProtocol,
    terms: Vec<EntropyTerm>,
    constant: f64,
    cfg: &OptimizerConfig,
) -> Result<DeficitResult> {
    let obj = EntropyObjective::for_protocol(state, template, terms, constant)?;
    let opt = minimize(&obj, &obj.spec(), cfg)?;
    Ok(DeficitResult { value: opt.value, protocol: template.with_unitaries(opt.point)?, diagnostics: opt.diagnostics })
}

fn all_parties(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Zero-way deficit: `min_Λ H_Λ(Y) − S(ρ)` over local rank-one projective
/// product measurements.
pub fn deficit_exact(state: &DensityState, cfg: &OptimizerConfig) -> Result<DeficitResult> {
    check_cap(state)?;
    let n = state.n_parties();
    let template = MeasurementProtocol::computational(state.dims());
    let terms = vec![EntropyTerm { legs: all_parties(n), coeff: 1.0 }];
    optimize_protocol(state, &template, terms, -state.entropy()?, cfg)
}

/// One-way deficit with communication order `0 → 1 → … → N−1`; every
/// history basis is optimized jointly. Restart 1 starts from the zero-way
/// optimum, so the result never exceeds [`deficit_exact`] by more than the
/// optimizer tolerance.
pub fn deficit_one_way_exact(state: &DensityState, cfg: &OptimizerConfig) -> Result<DeficitResult> {
    check_cap(state)?;
    let zero_way = deficit_exact(state, cfg)?;
    let dims = state.dims();
    let mut histories = 1usize;
    let mut levels = Vec::with_capacity(dims.len());
    let mut warm = Vec::new();
    for (i, &d) in dims.iter().enumerate() {
        levels.push(vec![CMat::identity(d, d); histories]);
        warm.extend(std::iter::repeat_n(zero_way.protocol.unitaries[i].clone(), histories));
        histories *= d;
    }
    let template = MeasurementProtocol::one_way_tree(&all_parties(dims.len()), levels, None)?;
    let terms = vec![EntropyTerm { legs: all_parties(dims.len()), coeff: 1.0 }];
    let cfg = cfg.clone().with_warm_start(Some(warm));
    optimize_protocol(state, &template, terms, -state.entropy()?, &cfg)
}

/// Discord `D_{A;B} = min Σ_y p(y) S(ρ_B^y) − S(ρ_AB) + S(ρ_A)` with the
/// measurement on the parties `a`.
///
/// The measured term is evaluated as `min H(Y_B | Z)` over a rank-one POVM
/// `Z` on the support of `ρ_A` (at most `min(d_A, r²)` outcomes, which covers
/// every projective measurement on `A`) followed by `Z`-dependent bases on `B`.
pub fn quantum_discord(state: &DensityState, a: &[usize], b: &[usize], cfg: &OptimizerConfig) -> Result<DeficitResult> {
    check_cap(state)?;
    let mut a = a.to_vec();
    a.sort_unstable();
    let mut b = b.to_vec();
    b.sort_unstable();
    if a.is_empty() || b.is_empty() || a.iter().any(|p| b.contains(p)) {
        return argument("discord needs two disjoint, non-empty groups of parties");
    }
    let mut ab = a.clone();
    ab.extend_from_slice(&b);
    ab.sort_unstable();
    let pair = state.marginal(&ab)?;
    let local = |p: &usize| ab.iter().position(|q| q == p).expect("present");
    let a_loc: Vec<usize> = a.iter().map(local).collect();
    let b_loc: Vec<usize> = b.iter().map(local).collect();
    let rho_a = pair.reduced(&a_loc)?;
    let s_ab = pair.entropy()?;
    let s_a = numerics::von_neumann_entropy(&rho_a)?;
    let support = support_isometry(&rho_a);
    let r = support.ncols();
    let d_a = rho_a.dim();
    let k = d_a.min(r * r);
    let b_dims: Vec<usize> = b_loc.iter().map(|&p| pair.dims()[p]).collect();
    let mut levels = Vec::new();
    let mut histories = k;
    for &d in &b_dims {
        levels.push(vec![CMat::identity(d, d); histories]);
        histories *= d;
    }
    let template = MeasurementProtocol::one_way_tree(&b_loc, levels, Some((a_loc, support, CMat::identity(k, k))))?;
    let nb = b_dims.len();
    let terms = vec![
        EntropyTerm { legs: (0..=nb).collect(), coeff: 1.0 },
        EntropyTerm { legs: vec![0], coeff: -1.0 },
    ];
    optimize_protocol(&pair, &template, terms, -(s_ab - s_a), cfg)
}

/// `Σ_{n=1}^{N−1} D_{(0..n−1);n}`, a lower bound on the deficit.
pub fn discord_chain_bound(state: &DensityState, cfg: &OptimizerConfig) -> Result<f64> {
    let n = state.n_parties();
    if n < 2 {
        return argument("the discord chain needs at least two parties");
    }
    let mut total = 0.0;
    for m in 1..n {
        let a: Vec<usize> = (0..m).collect();
        total += quantum_discord(state, &a, &[m], cfg)?.value;
    }
    Ok(total)
}

/// Global quantum discord
/// `min_Λ {H(Y) − S(ρ) − Σ_n (H(y_n) − S(ρ_n))}`.
pub fn gqd_exact(state: &DensityState, cfg: &OptimizerConfig) -> Result<DeficitResult> {
    check_cap(state)?;
    let n = state.n_parties();
    let template = MeasurementProtocol::computational(state.dims());
    let mut terms = vec![EntropyTerm { legs: all_parties(n), coeff: 1.0 }];
    terms.extend((0..n).map(|i| EntropyTerm { legs: vec![i], coeff: -1.0 }));
    let locals: f64 = state.local_entropies()?.iter().sum();
    optimize_protocol(state, &template, terms, locals - state.entropy()?, cfg)
}

/// `S(ρ ‖ D_Λ(ρ))` with `D_Λ` the dephasing in the product basis of `Λ`.
pub fn deficit_via_relative_entropy(state: &DensityState, protocol: &MeasurementProtocol) -> Result<f64> {
    check_cap(state)?;
    let n = state.n_parties();
    if protocol.povm.is_some() || protocol.stages.iter().any(|s| s.blocks.len() != 1) || protocol.stages.len() != n {
        return argument("relative-entropy form needs a product basis on every party");
    }
    let mut per_party: Vec<Option<CMat>> = vec![None; n];
    for st in &protocol.stages {
        per_party[st.party] = Some(protocol.unitaries[st.blocks[0]].clone());
    }
    let bases: Vec<CMat> = per_party.into_iter().map(|u| u.expect("every party measured")).collect();
    let u = bases.iter().skip(1).fold(bases[0].clone(), |acc, b| acc.kronecker(b));
    let rho = state.matrix();
    let rotated = u.adjoint() * rho.matrix() * &u;
    let diag = CMat::from_diagonal(&rotated.diagonal());
    let dephased = HermitianOperator::symmetrized(&u * diag * u.adjoint());
    let re = relative_entropy(&rho, &dephased)?;
    if re.support_violation {
        return Err(Error::Domain("dephased state does not contain the support of the state".into()));
    }
    Ok(re.value)
}

