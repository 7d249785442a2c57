//! The compute subcommands.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use wdeficit::bounds::{self, BasisClass, Bound, BoundReport};
use wdeficit::exact;
use wdeficit::measurement::{deficit_of_protocol, MeasurementProtocol};
use wdeficit::optimize::OptimizerConfig;
use wdeficit::states::{self, DensityState, MpsTensorSet};
use wdeficit::{mps, CMat, CVec, Error, C64};

use crate::config::{Measure, RunConfig, Source};
use crate::report::{emit_csv, sig9, Report};
use crate::CliError;

pub fn optimizer(cfg: &RunConfig) -> OptimizerConfig {
    OptimizerConfig::default().with_restarts(cfg.restarts).with_seed(cfg.seed)
}

fn plus(n: usize) -> Vec<CVec> {
    let h = C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
    vec![CVec::from_vec(vec![h, h]); n]
}

pub fn load_state(name: &str, cfg: &RunConfig) -> Result<DensityState, CliError> {
    let state = match name {
        "ghz" => states::ghz(cfg.parties.unwrap_or(3))?,
        "w" => states::w_state()?,
        "psi_q" => states::psi_q(cfg.q.ok_or_else(|| CliError::Usage("psi_q needs --q".into()))?)?,
        "bell_tri" => states::bell_composite_tri()?,
        "bell_chain" => states::bell_composite_chain(cfg.parties.unwrap_or(4))?,
        "product" => states::product_state(&plus(cfg.parties.unwrap_or(3)))?,
        path if Path::new(path).is_file() => DensityState::load(path)?,
        other => return Err(CliError::Usage(format!("'{other}' is neither a built-in state nor a readable file"))),
    };
    if state.dim() > cfg.cap {
        return Err(Error::Resource(format!("state dimension {} exceeds --cap {}", state.dim(), cfg.cap)).into());
    }
    Ok(state)
}

pub fn load_tensors(name: &str, cfg: &RunConfig) -> Result<MpsTensorSet, CliError> {
    Ok(match name {
        "aklt" => states::aklt_tensors(),
        "cluster" => states::cluster_tensors(),
        "family" => states::mps_family_tensors(cfg.g.expect("checked with the config"))?,
        "ghz" => states::ghz_tensors(),
        "product" => states::product_tensors(&plus(1)[0]),
        path if Path::new(path).is_file() => MpsTensorSet::load(path)?,
        other => return Err(CliError::Usage(format!("'{other}' is neither a built-in tensor nor a readable file"))),
    })
}

/// Dense state of `--state`, or the `--parties`-site chain of `--tensors`.
fn dense_source(cfg: &RunConfig) -> Result<(String, DensityState), CliError> {
    match &cfg.source {
        Source::State(s) => Ok((s.clone(), load_state(s, cfg)?)),
        Source::Tensors(t) => {
            let n = cfg.parties.expect("checked with the config");
            Ok((format!("{t} chain N={n}"), mps::to_dense(&load_tensors(t, cfg)?, n, cfg.cap)?))
        }
        Source::None => unreachable!("checked with the config"),
    }
}

fn tensor_source(cfg: &RunConfig) -> Result<(String, MpsTensorSet), CliError> {
    match &cfg.source {
        Source::Tensors(t) => Ok((t.clone(), load_tensors(t, cfg)?)),
        _ => unreachable!("checked with the config"),
    }
}

pub fn exact(cfg: &RunConfig) -> Result<(), CliError> {
    let start = Instant::now();
    let (label, state) = dense_source(cfg)?;
    let n = state.n_parties() as f64;
    let mut r = Report::new();
    r.line(format!("source {label}"));
    r.line(format!("dims {:?}", state.dims()));
    r.line(format!("measure {}", cfg.measure.name()));
    if let Some(path) = &cfg.protocol {
        if cfg.measure == Measure::Gqd {
            return Err(CliError::Usage("protocol replay evaluates the deficit or one-way deficit".into()));
        }
        let p = MeasurementProtocol::load(path)?;
        let value = deficit_of_protocol(&state, &p)?;
        r.line(format!("replay {}", path.display()));
        r.value("value", value);
        r.value("density", value / n);
        r.summary(format!("exact {} replay value={}", cfg.measure.name(), sig9(value)));
        return r.emit(cfg, start.elapsed());
    }
    let ocfg = optimizer(cfg);
    let res = match cfg.measure {
        Measure::Deficit => exact::deficit_exact(&state, &ocfg)?,
        Measure::OneWay => exact::deficit_one_way_exact(&state, &ocfg)?,
        Measure::Gqd => exact::gqd_exact(&state, &ocfg)?,
    };
    r.value("value", res.value);
    r.value("density", res.value / n);
    r.line(format!("basis {}", BasisClass::of_protocol(&res.protocol).name()));
    diagnostics(&mut r, &res.diagnostics);
    r.protocol("optimal".into(), &res.protocol);
    r.summary(format!("exact {} {label} value={}", cfg.measure.name(), sig9(res.value)));
    r.emit(cfg, start.elapsed())
}

fn diagnostics(r: &mut Report, d: &wdeficit::optimize::Diagnostics) {
    r.line(format!("restarts_run {}", d.restarts_run));
    r.line(format!("restarts_failed {}", d.restarts_failed));
    r.line(format!("converged {}", d.converged));
    r.line(format!("best_two_agree {}", d.best_two_agree));
}

fn bound_protocols(r: &mut Report, prefix: &str, b: &Bound) {
    for t in &b.terms {
        r.protocol(format!("{prefix}.seg{}", t.start), &t.protocol);
    }
}

fn bound_rows(r: &mut Report, rep: &BoundReport) {
    let d = rep.diagnostics();
    r.line(format!(
        "l {} lower {} upper {} width {} converged {} best_two_agree {}",
        rep.l,
        sig9(rep.lower.value),
        sig9(rep.upper.value),
        sig9(rep.width()),
        d.converged,
        d.best_two_agree
    ));
    bound_protocols(r, &format!("l{}.lower", rep.l), &rep.lower);
    bound_protocols(r, &format!("l{}.upper", rep.l), &rep.upper);
}

pub fn bounds(cfg: &RunConfig) -> Result<(), CliError> {
    let start = Instant::now();
    let ocfg = optimizer(cfg);
    let mut r = Report::new();
    r.line(format!("measure {}", cfg.measure.name()));
    let mut last = None;
    match &cfg.source {
        Source::Tensors(t) => {
            let n = cfg.parties.expect("checked with the config");
            if cfg.measure != Measure::Deficit {
                return Err(CliError::Usage("finite-chain bounds are only available for the deficit".into()));
            }
            let tensors = load_tensors(t, cfg)?;
            r.line(format!("source {t} chain N={n}"));
            for &l in &cfg.ls {
                let rep = bounds::chain_bounds(&tensors, n, l, &ocfg)?;
                bound_rows(&mut r, &rep);
                last = Some(rep);
            }
        }
        _ => {
            let (label, state) = dense_source(cfg)?;
            r.line(format!("source {label}"));
            r.line(format!("dims {:?}", state.dims()));
            for &l in &cfg.ls {
                let rep = match cfg.measure {
                    Measure::Deficit => bounds::dense_bounds(&state, l, &ocfg, None)?,
                    Measure::OneWay => bounds::one_way_bounds(&state, l, &ocfg, None)?,
                    Measure::Gqd => bounds::gqd_bounds(&state, l, &ocfg, None)?,
                };
                bound_rows(&mut r, &rep);
                last = Some(rep);
            }
        }
    }
    let rep = last.expect("at least one l");
    r.summary(format!(
        "bounds {} l={} [{}, {}]",
        cfg.measure.name(),
        rep.l,
        sig9(rep.lower.value),
        sig9(rep.upper.value)
    ));
    r.emit(cfg, start.elapsed())
}

pub fn tdl(cfg: &RunConfig) -> Result<(), CliError> {
    let start = Instant::now();
    let ocfg = optimizer(cfg);
    let (label, t) = tensor_source(cfg)?;
    let fp = mps::fixed_point(&mps::right_canonicalize(&t)?)?;
    let mut r = Report::new();
    r.line(format!("source {label}"));
    r.line(format!("measure {}", cfg.measure.name()));
    r.value("correlation_length", fp.xi);
    let mut summary = String::new();
    for &l in &cfg.ls {
        let rep = match cfg.measure {
            Measure::Deficit => bounds::tdl_bounds(&t, l, &ocfg)?,
            Measure::OneWay => bounds::one_way_bounds_tdl(&t, l, &ocfg)?,
            Measure::Gqd => bounds::gqd_bounds_tdl(&t, l, &ocfg)?,
        };
        bound_rows(&mut r, &rep);
        let mut best = rep.upper.value;
        let mut periods = Vec::new();
        if let Some(k) = cfg.k {
            if cfg.measure != Measure::Deficit {
                return Err(CliError::Usage("--k applies to the deficit".into()));
            }
            let ulk = bounds::upper_bound_ulk(&t, None, l, k, &ocfg)?;
            r.line(format!("l {l} k {k} upper_lk {}", sig9(ulk.value)));
            bound_protocols(&mut r, &format!("l{l}.k{k}.upper"), &ulk);
            best = best.min(ulk.value);
            periods.extend(ulk.terms.first().and_then(|term| product_bases(&term.protocol)));
        }
        if cfg.measure != Measure::Gqd {
            let d = t.physical_dim();
            periods.insert(0, vec![CMat::identity(d, d)]);
            periods.extend(rep.upper.terms.first().and_then(|term| product_bases(&term.protocol)));
            let mut seen = Vec::new();
            for period in periods {
                let key = period_key(&period);
                if seen.contains(&key) {
                    continue;
                }
                seen.push(key);
                let a = bounds::upper_bound_ansatz_tdl(&t, &period, bounds::DEFAULT_ANSATZ_DEPTH)?;
                r.line(format!("l {l} upper_ansatz {} period {}", sig9(a), period_label(&period)));
                best = best.min(a);
            }
        }
        r.value(&format!("l {l} best_upper"), best);
        summary = format!("tdl {} l={l} [{}, {}]", cfg.measure.name(), sig9(rep.lower.value), sig9(best));
    }
    r.summary(summary);
    r.emit(cfg, start.elapsed())
}

/// Per-site bases of a product protocol, in party order.
fn product_bases(p: &MeasurementProtocol) -> Option<Vec<CMat>> {
    if p.povm.is_some() || p.stages.iter().any(|st| st.blocks.len() != 1) {
        return None;
    }
    let mut stages: Vec<_> = p.stages.iter().collect();
    stages.sort_by_key(|st| st.party);
    Some(stages.iter().map(|st| p.unitaries[st.blocks[0]].clone()).collect())
}

/// Shortest repeating unit of the period; computational bases compare equal
/// regardless of ordering and phases.
fn period_key(period: &[CMat]) -> Vec<String> {
    let keys: Vec<String> = period
        .iter()
        .map(|u| match BasisClass::of(u) {
            BasisClass::Computational => "c".to_string(),
            _ => u.iter().map(|z| format!("{:.9},{:.9}", z.re, z.im)).collect::<Vec<_>>().join(" "),
        })
        .collect();
    let n = keys.len();
    let p = (1..=n).find(|&p| n % p == 0 && (0..n).all(|i| keys[i] == keys[i % p])).unwrap_or(n);
    keys[..p].to_vec()
}

fn period_label(period: &[CMat]) -> String {
    period.iter().map(|u| BasisClass::of(u).name()).collect::<Vec<_>>().join(",")
}

pub fn coarse(cfg: &RunConfig) -> Result<(), CliError> {
    let start = Instant::now();
    let ocfg = optimizer(cfg);
    let (label, t) = tensor_source(cfg)?;
    let mut r = Report::new();
    r.line(format!("source {label}"));
    let mut summary = String::new();
    for &m in &cfg.ms {
        for &l in &cfg.ls {
            let c = bounds::coarse_bounds(&t, m, l, &ocfg)?;
            r.line(format!(
                "m {m} l {l} lower {} upper {} upper_source {} half_entanglement {} gap {} xi {}",
                sig9(c.lower.value),
                sig9(c.upper.value),
                c.upper_source,
                sig9(c.half_entanglement),
                sig9(c.gap),
                sig9(c.xi)
            ));
            bound_protocols(&mut r, &format!("m{m}.l{l}.lower"), &c.lower);
            bound_protocols(&mut r, &format!("m{m}.l{l}.upper"), &c.upper);
            summary = format!("coarse m={m} l={l} [{}, {}]", sig9(c.lower.value), sig9(c.upper.value));
        }
    }
    r.summary(summary);
    r.emit(cfg, start.elapsed())
}

pub const SWEEP_COLUMNS: &str = "g,l,k,m,lower,upper,optimizer_restarts,converged,wall_ms,upper_basis,escalated";

pub fn sweep(cfg: &RunConfig) -> Result<(), CliError> {
    let start = Instant::now();
    let ocfg = optimizer(cfg);
    let gs = cfg.sweep_grid();
    let k = cfg.k.unwrap_or(1);
    let runs: Vec<Vec<bounds::SweepPoint>> = cfg
        .ls
        .par_iter()
        .map(|&l| bounds::family_sweep(&gs, l, k, &ocfg))
        .collect::<Result<_, _>>()?;
    let mut csv = format!("{SWEEP_COLUMNS}\n");
    for p in runs.iter().flatten() {
        let _ = writeln!(
            csv,
            "{},{},{},,{},{},{},{},{},{},{}",
            sig9(p.g),
            p.l,
            p.k,
            sig9(p.lower),
            sig9(p.upper),
            p.optimizer_restarts,
            p.converged,
            p.wall_ms,
            p.upper_basis.name(),
            p.escalated
        );
    }
    let summary = format!("sweep {} points x {} l values", gs.len(), cfg.ls.len());
    emit_csv(cfg, start.elapsed(), &csv, &summary)
}
