//! Invariant suites behind `wdeficit verify`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wdeficit::bounds::{self, BoundReport};
use wdeficit::exact;
use wdeficit::optimize::OptimizerConfig;
use wdeficit::states::{self, DensityState};

use crate::commands::optimizer;
use crate::config::RunConfig;
use crate::report::{sig9, Report};
use crate::CliError;

pub const SUITES: &[&str] = &["sandwich", "continuity", "refinement", "oneway", "discord-chain", "gqd"];

const TOL: f64 = 1e-7;

struct Check {
    name: String,
    margin: f64,
}

fn three_qubit(i: usize, rng: &mut ChaCha8Rng) -> Result<DensityState, CliError> {
    Ok(if i % 2 == 0 {
        states::random_pure(&[2, 2, 2], rng)?
    } else {
        states::random_mixed(&[2, 2, 2], rng.random_range(2..=8), rng)?
    })
}

fn fixtures(cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Result<Vec<(String, DensityState)>, CliError> {
    let mut out = vec![
        ("ghz3".to_string(), states::ghz(3)?),
        ("w".to_string(), states::w_state()?),
        ("product3".to_string(), states::basis_state(&[2, 2, 2], &[0, 1, 0])?),
    ];
    for i in 0..cfg.samples {
        out.push((format!("random{i}"), three_qubit(i, rng)?));
    }
    Ok(out)
}

fn sandwich(cfg: &RunConfig, ocfg: &OptimizerConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Check>, CliError> {
    let mut checks = Vec::new();
    for (name, s) in fixtures(cfg, rng)? {
        let ex = exact::deficit_exact(&s, ocfg)?;
        let delta = ex.value / s.n_parties() as f64;
        for l in 1..=s.n_parties() {
            let r = bounds::dense_bounds(&s, l, ocfg, Some(&ex.protocol))?;
            checks.push(Check { name: format!("{name} l={l} delta-L"), margin: delta - r.lower.value });
            checks.push(Check { name: format!("{name} l={l} U-delta"), margin: r.upper.value - delta });
        }
    }
    Ok(checks)
}

fn continuity(cfg: &RunConfig, ocfg: &OptimizerConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Check>, CliError> {
    let mut checks = Vec::new();
    for i in 0..cfg.samples.max(1) {
        let a = three_qubit(i, rng)?;
        let b = a.mix(&states::random_mixed(&[2, 2, 2], 8, rng)?, rng.random_range(0.005..0.05))?;
        let l = 1 + i % 3;
        let r = bounds::continuity_check(&a, &b, l, ocfg)?;
        checks.push(Check { name: format!("pair{i} l={l} nu={} upper", sig9(r.nu)), margin: r.upper_margin() });
        checks.push(Check { name: format!("pair{i} l={l} nu={} lower", sig9(r.nu)), margin: r.lower_margin() });
    }
    Ok(checks)
}

fn ordered(checks: &mut Vec<Check>, name: &str, reports: &[BoundReport]) {
    for w in reports.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        checks.push(Check { name: format!("{name} L{}<=L{}", a.l, b.l), margin: b.lower.value - a.lower.value });
        checks.push(Check { name: format!("{name} U{}<=U{}", b.l, a.l), margin: a.upper.value - b.upper.value });
    }
}

fn refinement(_cfg: &RunConfig, ocfg: &OptimizerConfig) -> Result<Vec<Check>, CliError> {
    let mut checks = Vec::new();
    let tensors = [
        ("aklt", states::aklt_tensors()),
        ("cluster", states::cluster_tensors()),
        ("family(-0.5)", states::mps_family_tensors(-0.5)?),
        ("family(0.5)", states::mps_family_tensors(0.5)?),
    ];
    for (name, t) in &tensors {
        let reports = [1, 2, 4].iter().map(|&l| bounds::tdl_bounds(t, l, ocfg)).collect::<Result<Vec<_>, _>>()?;
        ordered(&mut checks, name, &reports);
    }
    let ghz = states::ghz(4)?;
    let reports = [1, 2, 4].iter().map(|&l| bounds::dense_bounds(&ghz, l, ocfg, None)).collect::<Result<Vec<_>, _>>()?;
    ordered(&mut checks, "ghz4", &reports);
    Ok(checks)
}

fn oneway(cfg: &RunConfig, ocfg: &OptimizerConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Check>, CliError> {
    let mut checks = Vec::new();
    for (name, s) in fixtures(cfg, rng)? {
        let zero = exact::deficit_exact(&s, ocfg)?.value;
        let one = exact::deficit_one_way_exact(&s, ocfg)?.value;
        checks.push(Check { name: format!("{name} D-D1"), margin: zero - one });
    }
    Ok(checks)
}

fn discord_chain(cfg: &RunConfig, ocfg: &OptimizerConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Check>, CliError> {
    let mut checks = Vec::new();
    for (name, s) in fixtures(cfg, rng)? {
        let d = exact::deficit_exact(&s, ocfg)?.value;
        let chain = exact::discord_chain_bound(&s, ocfg)?;
        checks.push(Check { name: format!("{name} D-chain"), margin: d - chain });
    }
    Ok(checks)
}

fn gqd(cfg: &RunConfig, ocfg: &OptimizerConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Check>, CliError> {
    let mut checks = Vec::new();
    for (name, s) in fixtures(cfg, rng)? {
        let ex = exact::gqd_exact(&s, ocfg)?;
        let density = ex.value / s.n_parties() as f64;
        for l in 1..=s.n_parties() {
            let r = bounds::gqd_bounds(&s, l, ocfg, Some(&ex.protocol))?;
            checks.push(Check { name: format!("{name} l={l} G-L"), margin: density - r.lower.value });
            checks.push(Check { name: format!("{name} l={l} U-G"), margin: r.upper.value - density });
        }
    }
    Ok(checks)
}

pub fn run(cfg: &RunConfig) -> Result<(), CliError> {
    let start = Instant::now();
    let suite = cfg.suite.as_deref().expect("checked with the config");
    let names: Vec<&str> = if suite == "all" { SUITES.to_vec() } else { vec![suite] };
    if let Some(bad) = names.iter().find(|n| !SUITES.contains(n)) {
        return Err(CliError::Usage(format!("unknown suite '{bad}' (all, {})", SUITES.join(", "))));
    }
    let ocfg = optimizer(cfg);
    let mut r = Report::new();
    let mut failed = 0usize;
    let mut total = 0usize;
    for name in names {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let checks = match name {
            "sandwich" => sandwich(cfg, &ocfg, &mut rng)?,
            "continuity" => continuity(cfg, &ocfg, &mut rng)?,
            "refinement" => refinement(cfg, &ocfg)?,
            "oneway" => oneway(cfg, &ocfg, &mut rng)?,
            "discord-chain" => discord_chain(cfg, &ocfg, &mut rng)?,
            "gqd" => gqd(cfg, &ocfg, &mut rng)?,
            _ => unreachable!(),
        };
        for c in &checks {
            let ok = c.margin >= -TOL;
            failed += usize::from(!ok);
            r.line(format!("{name} {} margin {} {}", c.name, sig9(c.margin), if ok { "PASS" } else { "FAIL" }));
        }
        total += checks.len();
    }
    r.line(format!("checks {total} failed {failed}"));
    r.summary(format!("verify {suite}: {} of {total} checks passed", total - failed));
    r.emit(cfg, start.elapsed())?;
    if failed > 0 {
        return Err(CliError::Verification(format!("{failed} of {total} checks below -{TOL:e}")));
    }
    Ok(())
}
