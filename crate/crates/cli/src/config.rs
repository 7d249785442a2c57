//! Run configuration: command-line flags layered over an optional key=value file.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use clap::Args;

use crate::CliError;

/// Flags shared by every subcommand. Each one may also appear in the config
/// file under the same name without the leading dashes.
#[derive(Args, Debug, Default, Clone)]
pub struct Flags {
    /// key=value file; flags given on the command line win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in state (ghz, w, psi_q, bell_tri, bell_chain, product) or a state file.
    #[arg(long)]
    pub state: Option<String>,
    /// Built-in tensor (aklt, cluster, family, ghz) or a tensor file.
    #[arg(long)]
    pub tensors: Option<String>,
    /// Family parameter.
    #[arg(long, allow_hyphen_values = true)]
    pub g: Option<f64>,
    #[arg(long = "g-min", allow_hyphen_values = true)]
    pub g_min: Option<f64>,
    #[arg(long = "g-max", allow_hyphen_values = true)]
    pub g_max: Option<f64>,
    #[arg(long = "g-step")]
    pub g_step: Option<f64>,
    /// Parameter of psi_q.
    #[arg(long)]
    pub q: Option<f64>,
    /// Number of parties for ghz, bell_chain, product or a finite chain.
    #[arg(long)]
    pub parties: Option<usize>,
    /// Segment lengths, comma separated.
    #[arg(long)]
    pub l: Option<String>,
    /// Conditioning depth of U_{l,k}.
    #[arg(long)]
    pub k: Option<usize>,
    /// Coarse-graining block sizes, comma separated.
    #[arg(long)]
    pub m: Option<String>,
    /// deficit, oneway or gqd.
    #[arg(long)]
    pub measure: Option<String>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Report path; optimal protocols are written next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Largest dense dimension.
    #[arg(long)]
    pub cap: Option<usize>,
    /// Protocol file to replay (exact only).
    #[arg(long)]
    pub protocol: Option<PathBuf>,
    /// Verification suite.
    #[arg(long)]
    pub suite: Option<String>,
    /// Samples per verification suite.
    #[arg(long)]
    pub samples: Option<usize>,
}

impl Flags {
    fn provided(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                m.insert(k.to_string(), v);
            }
        };
        put("state", self.state.clone());
        put("tensors", self.tensors.clone());
        put("g", self.g.map(|x| x.to_string()));
        put("g-min", self.g_min.map(|x| x.to_string()));
        put("g-max", self.g_max.map(|x| x.to_string()));
        put("g-step", self.g_step.map(|x| x.to_string()));
        put("q", self.q.map(|x| x.to_string()));
        put("parties", self.parties.map(|x| x.to_string()));
        put("l", self.l.clone());
        put("k", self.k.map(|x| x.to_string()));
        put("m", self.m.clone());
        put("measure", self.measure.clone());
        put("restarts", self.restarts.map(|x| x.to_string()));
        put("seed", self.seed.map(|x| x.to_string()));
        put("threads", self.threads.map(|x| x.to_string()));
        put("out", self.out.as_ref().map(|p| p.display().to_string()));
        put("cap", self.cap.map(|x| x.to_string()));
        put("protocol", self.protocol.as_ref().map(|p| p.display().to_string()));
        put("suite", self.suite.clone());
        put("samples", self.samples.map(|x| x.to_string()));
        m
    }
}

const KEYS: &[&str] = &[
    "state", "tensors", "g", "g-min", "g-max", "g-step", "q", "parties", "l", "k", "m", "measure", "restarts", "seed",
    "threads", "out", "cap", "protocol", "suite", "samples",
];

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_file(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut m = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value", no + 1)))?;
        let k = k.trim().trim_start_matches("--").replace('_', "-");
        if !KEYS.contains(&k.as_str()) {
            return Err(CliError::Usage(format!("config line {}: unknown key '{k}'", no + 1)));
        }
        m.insert(k, v.trim().to_string());
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CommandKind {
    Exact,
    Bounds,
    Tdl,
    Coarse,
    Sweep,
    Verify,
}

impl CommandKind {
    pub fn name(self) -> &'static str {
        match self {
            CommandKind::Exact => "exact",
            CommandKind::Bounds => "bounds",
            CommandKind::Tdl => "tdl",
            CommandKind::Coarse => "coarse",
            CommandKind::Sweep => "sweep",
            CommandKind::Verify => "verify",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Measure {
    Deficit,
    OneWay,
    Gqd,
}

impl Measure {
    fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "deficit" => Ok(Measure::Deficit),
            "oneway" | "one-way" => Ok(Measure::OneWay),
            "gqd" => Ok(Measure::Gqd),
            _ => Err(CliError::Usage(format!("unknown measure '{s}' (deficit, oneway, gqd)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Measure::Deficit => "deficit",
            Measure::OneWay => "oneway",
            Measure::Gqd => "gqd",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    State(String),
    Tensors(String),
    None,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub command: CommandKind,
    pub source: Source,
    pub g: Option<f64>,
    pub q: Option<f64>,
    pub parties: Option<usize>,
    pub measure: Measure,
    pub ls: Vec<usize>,
    pub k: Option<usize>,
    pub ms: Vec<usize>,
    pub g_min: f64,
    pub g_max: f64,
    pub g_step: f64,
    pub restarts: usize,
    pub seed: u64,
    pub threads: usize,
    pub out: Option<PathBuf>,
    pub cap: usize,
    pub protocol: Option<PathBuf>,
    pub suite: Option<String>,
    pub samples: usize,
    /// Merged key=value pairs as resolved, for the report header.
    pub echo: BTreeMap<String, String>,
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse().map_err(|_| CliError::Usage(format!("invalid value '{v}' for {key}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>, CliError> {
    let out: Vec<usize> = v.split(',').map(|t| parse(key, t.trim())).collect::<Result<_, _>>()?;
    if out.is_empty() || out.contains(&0) {
        return Err(CliError::Usage(format!("{key} needs positive integers")));
    }
    Ok(out)
}

impl RunConfig {
    pub fn resolve(command: CommandKind, flags: &Flags) -> Result<Self, CliError> {
        let mut merged = match &flags.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
                parse_config_file(&text)?
            }
            None => BTreeMap::new(),
        };
        merged.extend(flags.provided());
        Self::from_map(command, merged)
    }

    pub fn from_map(command: CommandKind, map: BTreeMap<String, String>) -> Result<Self, CliError> {
        let get = |k: &str| map.get(k).map(String::as_str);
        let source = match (get("state"), get("tensors")) {
            (Some(_), Some(_)) => return Err(CliError::Usage("--state and --tensors are mutually exclusive".into())),
            (Some(s), None) => Source::State(s.to_string()),
            (None, Some(t)) => Source::Tensors(t.to_string()),
            (None, None) => Source::None,
        };
        let opt_f = |k: &str| get(k).map(|v| parse::<f64>(k, v)).transpose();
        let opt_u = |k: &str| get(k).map(|v| parse::<usize>(k, v)).transpose();
        let default_l = if command == CommandKind::Sweep { "2" } else { "1" };
        let threads = match opt_u("threads")? {
            Some(0) => return Err(CliError::Usage("--threads must be positive".into())),
            Some(t) => t,
            None => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        };
        let cfg = Self {
            command,
            source,
            g: opt_f("g")?,
            q: opt_f("q")?,
            parties: opt_u("parties")?,
            measure: Measure::parse(get("measure").unwrap_or("deficit"))?,
            ls: parse_list("l", get("l").unwrap_or(default_l))?,
            k: opt_u("k")?,
            ms: get("m").map(|v| parse_list("m", v)).transpose()?.unwrap_or_default(),
            g_min: opt_f("g-min")?.unwrap_or(-1.0),
            g_max: opt_f("g-max")?.unwrap_or(1.0),
            g_step: opt_f("g-step")?.unwrap_or(0.025),
            restarts: opt_u("restarts")?.unwrap_or(32),
            seed: get("seed").map(|v| parse::<u64>("seed", v)).transpose()?.unwrap_or(0x5eed),
            threads,
            out: get("out").map(PathBuf::from),
            cap: opt_u("cap")?.unwrap_or(wdeficit::DEFAULT_DENSE_CAP),
            protocol: get("protocol").map(PathBuf::from),
            suite: get("suite").map(str::to_string),
            samples: opt_u("samples")?.unwrap_or(10),
            echo: BTreeMap::new(),
        };
        cfg.check(&map)?;
        let mut echo = map;
        echo.insert("measure".into(), cfg.measure.name().into());
        echo.insert("l".into(), join(&cfg.ls));
        echo.insert("restarts".into(), cfg.restarts.to_string());
        echo.insert("seed".into(), cfg.seed.to_string());
        echo.insert("threads".into(), cfg.threads.to_string());
        echo.insert("cap".into(), cfg.cap.to_string());
        if command == CommandKind::Sweep {
            echo.insert("g-min".into(), cfg.g_min.to_string());
            echo.insert("g-max".into(), cfg.g_max.to_string());
            echo.insert("g-step".into(), cfg.g_step.to_string());
            echo.insert("k".into(), cfg.k.unwrap_or(1).to_string());
        }
        Ok(Self { echo, ..cfg })
    }

    fn check(&self, map: &BTreeMap<String, String>) -> Result<(), CliError> {
        let usage = |m: &str| Err(CliError::Usage(m.to_string()));
        let has = |k: &str| map.contains_key(k);
        if self.restarts == 0 {
            return usage("--restarts must be positive");
        }
        if has("m") && self.command != CommandKind::Coarse {
            return usage("--m only applies to coarse");
        }
        if has("protocol") && self.command != CommandKind::Exact {
            return usage("--protocol only applies to exact");
        }
        if has("suite") != (self.command == CommandKind::Verify) {
            return usage("--suite is required by verify and only applies there");
        }
        if has("k") && !matches!(self.command, CommandKind::Tdl | CommandKind::Sweep) {
            return usage("--k applies to tdl and sweep");
        }
        if (has("g-min") || has("g-max") || has("g-step")) && self.command != CommandKind::Sweep {
            return usage("--g-min/--g-max/--g-step only apply to sweep");
        }
        let family = matches!(&self.source, Source::Tensors(t) if t == "family");
        if has("g") && !family {
            return usage("--g needs --tensors family");
        }
        if family && self.g.is_none() {
            return usage("--tensors family needs --g");
        }
        match self.command {
            CommandKind::Exact | CommandKind::Bounds => match &self.source {
                Source::State(_) => {}
                Source::Tensors(_) if self.parties.is_some() => {}
                Source::Tensors(_) => return usage("a tensor source needs --parties for a finite chain"),
                Source::None => return usage("--state or --tensors is required"),
            },
            CommandKind::Tdl | CommandKind::Coarse => {
                if !matches!(self.source, Source::Tensors(_)) {
                    return usage("tdl and coarse need --tensors");
                }
                if self.parties.is_some() {
                    return usage("--parties does not apply in the thermodynamic limit");
                }
                if self.command == CommandKind::Coarse {
                    if self.ms.is_empty() {
                        return usage("coarse needs --m");
                    }
                    if self.measure != Measure::Deficit {
                        return usage("coarse bounds are only available for the deficit");
                    }
                }
            }
            CommandKind::Sweep => {
                if !matches!(&self.source, Source::None) && !matches!(&self.source, Source::Tensors(t) if t == "family") {
                    return usage("sweep runs over the family tensors only");
                }
                if has("g") {
                    return usage("sweep takes --g-min/--g-max/--g-step, not --g");
                }
                if !(self.g_step > 0.0) || self.g_min > self.g_max || self.g_min < -1.0 || self.g_max > 1.0 {
                    return usage("sweep grid must satisfy -1 <= g-min <= g-max <= 1 with g-step > 0");
                }
                if self.measure != Measure::Deficit {
                    return usage("sweep computes deficit bounds only");
                }
            }
            CommandKind::Verify => {
                if !matches!(self.source, Source::None) {
                    return usage("verify uses built-in fixtures");
                }
            }
        }
        Ok(())
    }

    /// Ascending sweep grid with extra points at `±0.025 · 2⁻ⁿ`, `n = 1..=5`.
    pub fn sweep_grid(&self) -> Vec<f64> {
        let n = ((self.g_max - self.g_min) / self.g_step + 1e-9).floor() as usize;
        let mut gs: Vec<f64> = (0..=n).map(|i| round12(self.g_min + i as f64 * self.g_step)).collect();
        for e in 1..=5 {
            let x = 0.025 * 0.5f64.powi(e);
            gs.extend([-x, x].into_iter().filter(|g| (self.g_min..=self.g_max).contains(g)));
        }
        gs.sort_by(f64::total_cmp);
        gs.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        gs
    }
}

fn round12(x: f64) -> f64 {
    (x * 1e12).round() / 1e12
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pairs: Vec<String> = self.echo.iter().map(|(k, v)| format!("{k}={v}")).collect();
        write!(f, "{} {}", self.command.name(), pairs.join(" "))
    }
}
