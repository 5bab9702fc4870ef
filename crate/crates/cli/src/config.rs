//! Flat `key = value` configuration.
//!
//! Layers, later wins: built-in defaults for the experiment, global keys of the config
//! file, the file's `[tag]` section, `QFPME_<KEY>` environment variables, command-line flags.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use qfpme_core::{bose_einstein, BangBang, Engine, Truncation};

use crate::error::{CliError, Result};

pub const ENV_PREFIX: &str = "QFPME_";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Experiment {
    Fig2,
    Fig3,
    Fig4,
    Fig5,
    Fig6,
    Steady,
    Grid,
    Traj,
    Ft,
}

impl Experiment {
    pub const ALL: [Experiment; 9] = [
        Experiment::Fig2,
        Experiment::Fig3,
        Experiment::Fig4,
        Experiment::Fig5,
        Experiment::Fig6,
        Experiment::Steady,
        Experiment::Grid,
        Experiment::Traj,
        Experiment::Ft,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Experiment::Fig2 => "fig2",
            Experiment::Fig3 => "fig3",
            Experiment::Fig4 => "fig4",
            Experiment::Fig5 => "fig5",
            Experiment::Fig6 => "fig6",
            Experiment::Steady => "steady",
            Experiment::Grid => "grid",
            Experiment::Traj => "traj",
            Experiment::Ft => "ft",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.tag() == tag)
            .ok_or_else(|| CliError::config("experiment", format!("unknown tag `{tag}`")))
    }

    pub fn is_figure(self) -> bool {
        matches!(self, Experiment::Fig2 | Experiment::Fig3 | Experiment::Fig4 | Experiment::Fig5 | Experiment::Fig6)
    }

    fn defaults(self) -> &'static str {
        match self {
            Experiment::Fig2 => FIG2_DEFAULTS,
            Experiment::Fig3 => FIG3_DEFAULTS,
            Experiment::Fig4 => FIG4_DEFAULTS,
            Experiment::Fig5 => FIG5_DEFAULTS,
            Experiment::Fig6 => FIG6_DEFAULTS,
            Experiment::Steady | Experiment::Grid => STEADY_DEFAULTS,
            Experiment::Traj => TRAJ_DEFAULTS,
            Experiment::Ft => FT_DEFAULTS,
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

const COMMON_DEFAULTS: &str = "
model = two_level_bangbang
omega = 1
temperature = 1
gamma = 1
kappa = 0.1
lambda = 0.5
g = 1
dt = 0.01
steps = 1000
burn_in = 0
n_traj = 100000
seed = 1
truncation = auto
cells = 2001
steady_tol = 1e-8
inset_kappa = 0.1
inset_lambda = 0.5
inset_n_traj = 100000
sampler = classical
min_count = 100
mark_stride = 100
out = out
threads = 0
";

const FIG2_DEFAULTS: &str = "
sweep = lambda_over_gamma: logspace(0.01, 5, 16)
families = gamma_over_kappa: 3, 10, 100
";

const FIG3_DEFAULTS: &str = "
model = engine
sweep = lambda_over_gamma: 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1, 2, 5, 10, 20
families = kappa_over_gamma: 0, 0.3333333333333333
inset_kappa = 0
inset_lambda = 1
";

const FIG4_DEFAULTS: &str = "
sweep = lambda_over_gamma: 0.1, 0.3, 1, 3, 10
";

const FIG5_DEFAULTS: &str = "
sweep = lambda_over_gamma: 0.1, 0.3, 1, 3, 10
inset_kappa = 0.01
";

const FIG6_DEFAULTS: &str = "
model = engine
kappa = 0.1
g = 0.2
lambda = 0.2
n_traj = 20000
cells = 401
";

const STEADY_DEFAULTS: &str = "";

const TRAJ_DEFAULTS: &str = "
n_traj = 100
";

const FT_DEFAULTS: &str = "
kappa = 0.01
lambda = 1
";

const KEYS: &[&str] = &[
    "experiment",
    "model",
    "omega",
    "temperature",
    "n_b",
    "kappa",
    "gamma",
    "lambda",
    "g",
    "dt",
    "steps",
    "burn_in",
    "n_traj",
    "seed",
    "truncation",
    "cells",
    "steady_tol",
    "sweep",
    "families",
    "inset_kappa",
    "inset_lambda",
    "inset_n_traj",
    "sampler",
    "min_count",
    "mark_stride",
    "out",
    "threads",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    TwoLevelBangBang,
    Engine,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::TwoLevelBangBang => "two_level_bangbang",
            ModelKind::Engine => "engine",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampler {
    Classical,
    Belavkin,
    Kraus,
}

impl Sampler {
    pub fn name(self) -> &'static str {
        match self {
            Sampler::Classical => "classical",
            Sampler::Belavkin => "belavkin",
            Sampler::Kraus => "kraus",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    LambdaOverGamma,
    GammaOverKappa,
    KappaOverGamma,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::LambdaOverGamma => "lambda_over_gamma",
            SweepParam::GammaOverKappa => "gamma_over_kappa",
            SweepParam::KappaOverGamma => "kappa_over_gamma",
        }
    }

    fn parse(s: &str, field: &str) -> Result<Self> {
        match s {
            "lambda_over_gamma" => Ok(SweepParam::LambdaOverGamma),
            "gamma_over_kappa" => Ok(SweepParam::GammaOverKappa),
            "kappa_over_gamma" => Ok(SweepParam::KappaOverGamma),
            other => Err(CliError::config(field, format!("unknown sweep parameter `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

impl Sweep {
    /// `name: v1, v2, ...`, `name: logspace(lo, hi, n)` or `name: linspace(lo, hi, n)`.
    pub fn parse(s: &str, field: &str) -> Result<Self> {
        let (name, rest) = s
            .split_once(':')
            .ok_or_else(|| CliError::config(field, "expected `parameter: values`"))?;
        let param = SweepParam::parse(name.trim(), field)?;
        let rest = rest.trim();
        let values = if let Some(args) = call_args(rest, "logspace") {
            let (lo, hi, n) = range_args(&args, field)?;
            if lo <= 0.0 || hi <= 0.0 {
                return Err(CliError::config(field, "logspace bounds must be > 0"));
            }
            spaced(lo.ln(), hi.ln(), n).into_iter().map(f64::exp).collect()
        } else if let Some(args) = call_args(rest, "linspace") {
            let (lo, hi, n) = range_args(&args, field)?;
            spaced(lo, hi, n)
        } else {
            rest.split(',').map(|v| parse_f64(v.trim(), field)).collect::<Result<Vec<_>>>()?
        };
        if values.is_empty() {
            return Err(CliError::config(field, "sweep list is empty"));
        }
        Ok(Sweep { param, values })
    }
}

impl fmt::Display for Sweep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let vals: Vec<String> = self.values.iter().map(|v| v.to_string()).collect();
        write!(f, "{}: {}", self.param.name(), vals.join(", "))
    }
}

fn call_args(s: &str, func: &str) -> Option<Vec<String>> {
    let inner = s.strip_prefix(func)?.trim().strip_prefix('(')?.strip_suffix(')')?;
    Some(inner.split(',').map(|a| a.trim().to_string()).collect())
}

fn range_args(args: &[String], field: &str) -> Result<(f64, f64, usize)> {
    if args.len() != 3 {
        return Err(CliError::config(field, "expected (lo, hi, count)"));
    }
    let count = parse_count(&args[2], field)? as usize;
    if count == 0 {
        return Err(CliError::config(field, "count must be ≥ 1"));
    }
    Ok((parse_f64(&args[0], field)?, parse_f64(&args[1], field)?, count))
}

fn spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn parse_f64(s: &str, field: &str) -> Result<f64> {
    s.parse::<f64>().map_err(|_| CliError::config(field, format!("`{s}` is not a number")))
}

/// Non-negative integer, also accepting exact float spellings such as `1e5`.
fn parse_count(s: &str, field: &str) -> Result<u64> {
    if let Ok(v) = s.parse::<u64>() {
        return Ok(v);
    }
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.fract() == 0.0 && v < 2f64.powi(63) => Ok(v as u64),
        _ => Err(CliError::config(field, format!("`{s}` is not a non-negative integer"))),
    }
}

/// Physical rates of one parameter point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub kappa: f64,
    pub lambda: f64,
}

impl Point {
    pub fn with(mut self, param: SweepParam, value: f64, gamma: f64) -> Self {
        match param {
            SweepParam::LambdaOverGamma => self.lambda = value * gamma,
            SweepParam::GammaOverKappa => self.kappa = gamma / value,
            SweepParam::KappaOverGamma => self.kappa = value * gamma,
        }
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub model: ModelKind,
    pub omega: f64,
    pub temperature: Option<f64>,
    pub n_b: Option<f64>,
    pub kappa: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub g: f64,
    pub dt: f64,
    pub steps: usize,
    pub burn_in: usize,
    pub n_traj: u64,
    pub master_seed: u64,
    pub truncation: Truncation,
    pub cells: usize,
    pub steady_tol: f64,
    pub sweep: Option<Sweep>,
    pub families: Option<Sweep>,
    pub inset_kappa: f64,
    pub inset_lambda: f64,
    pub inset_n_traj: u64,
    pub sampler: Sampler,
    pub min_count: u64,
    pub mark_stride: usize,
    pub out: PathBuf,
    /// 0 lets the runner pick.
    pub threads: usize,
}

/// Parsed `key = value` lines, split into global keys and per-section keys.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    pub global: BTreeMap<String, String>,
    pub sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut file = ConfigFile::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = format!("line {}", i + 1);
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| CliError::config(&at, "unterminated section header"))?
                    .trim();
                Experiment::from_tag(name).map_err(|_| CliError::config(&at, format!("unknown section `{name}`")))?;
                section = Some(name.to_string());
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| CliError::config(&at, format!("expected `key = value`, got `{line}`")))?;
            let key = key.trim().to_string();
            check_key(&key)?;
            let target = match &section {
                Some(s) => file.sections.entry(s.clone()).or_default(),
                None => &mut file.global,
            };
            if target.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(CliError::config(&key, format!("duplicate key ({at})")));
            }
        }
        Ok(file)
    }
}

fn check_key(key: &str) -> Result<()> {
    if KEYS.contains(&key) {
        Ok(())
    } else {
        Err(CliError::config(key, "unknown key"))
    }
}

fn parse_layer(text: &str) -> BTreeMap<String, String> {
    ConfigFile::parse(text).expect("built-in defaults parse").global
}

/// `QFPME_*` variables as lower-case keys.
pub fn env_overrides<I: IntoIterator<Item = (String, String)>>(vars: I) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (k, v) in vars {
        if let Some(rest) = k.strip_prefix(ENV_PREFIX) {
            let key = rest.to_ascii_lowercase();
            check_key(&key).map_err(|_| CliError::config(&k, "unknown key in environment override"))?;
            out.insert(key, v);
        }
    }
    Ok(out)
}

impl ExperimentConfig {
    /// Merges all layers and validates the result.
    pub fn resolve(
        experiment: Experiment,
        file: Option<&ConfigFile>,
        env: &BTreeMap<String, String>,
        flags: &BTreeMap<String, String>,
    ) -> Result<Self> {
        let mut user: BTreeMap<String, String> = BTreeMap::new();
        if let Some(f) = file {
            user.extend(f.global.clone());
            if let Some(s) = f.sections.get(experiment.tag()) {
                user.extend(s.clone());
            }
        }
        user.extend(env.clone());
        user.extend(flags.clone());
        if let Some(tag) = user.remove("experiment") {
            if tag != experiment.tag() {
                return Err(CliError::config("experiment", format!("config is for `{tag}`, running `{experiment}`")));
            }
        }
        let mut merged = parse_layer(COMMON_DEFAULTS);
        merged.extend(parse_layer(experiment.defaults()));
        if user.contains_key("n_b") && !user.contains_key("temperature") {
            merged.remove("temperature");
        }
        merged.extend(user);
        Self::from_map(experiment, &merged)
    }

    /// Defaults only; handy for tests and programmatic runs.
    pub fn defaults(experiment: Experiment) -> Result<Self> {
        Self::resolve(experiment, None, &BTreeMap::new(), &BTreeMap::new())
    }

    fn from_map(experiment: Experiment, m: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| m.get(k).map(String::as_str).ok_or_else(|| CliError::config(k, "missing"));
        let f = |k: &str| get(k).and_then(|v| parse_f64(v, k));
        let n = |k: &str| get(k).and_then(|v| parse_count(v, k));
        let opt_f = |k: &str| m.get(k).map(|v| parse_f64(v, k)).transpose();
        let opt_sweep = |k: &str| m.get(k).filter(|v| !v.is_empty()).map(|v| Sweep::parse(v, k)).transpose();
        let model = match get("model")? {
            "two_level_bangbang" => ModelKind::TwoLevelBangBang,
            "engine" => ModelKind::Engine,
            other => return Err(CliError::config("model", format!("expected two_level_bangbang or engine, got `{other}`"))),
        };
        let sampler = match get("sampler")? {
            "classical" => Sampler::Classical,
            "belavkin" => Sampler::Belavkin,
            "kraus" => Sampler::Kraus,
            other => return Err(CliError::config("sampler", format!("expected classical, belavkin or kraus, got `{other}`"))),
        };
        let truncation = match get("truncation")? {
            "auto" => Truncation::default(),
            v => Truncation::Fixed(parse_count(v, "truncation")? as usize),
        };
        let cfg = ExperimentConfig {
            experiment,
            model,
            omega: f("omega")?,
            temperature: opt_f("temperature")?,
            n_b: opt_f("n_b")?,
            kappa: f("kappa")?,
            gamma: f("gamma")?,
            lambda: f("lambda")?,
            g: f("g")?,
            dt: f("dt")?,
            steps: n("steps")? as usize,
            burn_in: n("burn_in")? as usize,
            n_traj: n("n_traj")?,
            master_seed: n("seed")?,
            truncation,
            cells: n("cells")? as usize,
            steady_tol: f("steady_tol")?,
            sweep: opt_sweep("sweep")?,
            families: opt_sweep("families")?,
            inset_kappa: f("inset_kappa")?,
            inset_lambda: f("inset_lambda")?,
            inset_n_traj: n("inset_n_traj")?,
            sampler,
            min_count: n("min_count")?,
            mark_stride: n("mark_stride")? as usize,
            out: PathBuf::from(get("out")?),
            threads: n("threads")? as usize,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(CliError::config(field, format!("must be finite and > 0, got {v}")))
            }
        };
        let non_negative = |field: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(CliError::config(field, format!("must be finite and ≥ 0, got {v}")))
            }
        };
        positive("omega", self.omega)?;
        positive("gamma", self.gamma)?;
        positive("lambda", self.lambda)?;
        positive("g", self.g)?;
        positive("dt", self.dt)?;
        positive("steady_tol", self.steady_tol)?;
        positive("inset_lambda", self.inset_lambda)?;
        match self.model {
            ModelKind::TwoLevelBangBang => {
                positive("kappa", self.kappa)?;
                positive("inset_kappa", self.inset_kappa)?;
            }
            ModelKind::Engine => {
                non_negative("kappa", self.kappa)?;
                non_negative("inset_kappa", self.inset_kappa)?;
            }
        }
        match (self.temperature, self.n_b) {
            (Some(t), None) => positive("temperature", t)?,
            (None, Some(nb)) => positive("n_b", nb)?,
            _ => return Err(CliError::config("temperature", "give exactly one of temperature or n_b")),
        }
        if self.steps == 0 {
            return Err(CliError::config("steps", "must be ≥ 1"));
        }
        if self.n_traj < 2 {
            return Err(CliError::config("n_traj", "must be ≥ 2"));
        }
        if self.cells < 3 {
            return Err(CliError::config("cells", "must be ≥ 3"));
        }
        for (field, sweep) in [("sweep", &self.sweep), ("families", &self.families)] {
            if let Some(s) = sweep {
                for &v in &s.values {
                    let ok = match s.param {
                        SweepParam::KappaOverGamma if self.model == ModelKind::Engine => v.is_finite() && v >= 0.0,
                        _ => v.is_finite() && v > 0.0,
                    };
                    if !ok {
                        return Err(CliError::config(field, format!("value {v} out of range for {}", s.param.name())));
                    }
                }
            }
        }
        let needs = match self.experiment {
            Experiment::Fig2 | Experiment::Fig4 | Experiment::Fig5 => Some(ModelKind::TwoLevelBangBang),
            Experiment::Fig3 | Experiment::Fig6 => Some(ModelKind::Engine),
            _ => None,
        };
        if let Some(kind) = needs {
            if self.model != kind {
                return Err(CliError::config("model", format!("{} needs model = {}", self.experiment, kind.name())));
            }
        }
        if matches!(self.experiment, Experiment::Fig2 | Experiment::Fig3 | Experiment::Fig4 | Experiment::Fig5) && self.sweep.is_none() {
            return Err(CliError::config("sweep", format!("{} needs a sweep", self.experiment)));
        }
        if matches!(self.experiment, Experiment::Fig2 | Experiment::Fig3) && self.families.is_none() {
            return Err(CliError::config("families", format!("{} needs families", self.experiment)));
        }
        if self.sampler == Sampler::Classical && self.experiment == Experiment::Traj && self.model != ModelKind::TwoLevelBangBang {
            return Err(CliError::config("sampler", "the classical sampler needs model = two_level_bangbang"));
        }
        Ok(())
    }

    pub fn n_b(&self) -> f64 {
        match (self.n_b, self.temperature) {
            (Some(nb), _) => nb,
            (None, Some(t)) => bose_einstein(self.omega, t),
            (None, None) => f64::NAN,
        }
    }

    /// k_B T = ω / ln(1 + 1/n_B)
    pub fn temperature(&self) -> f64 {
        self.temperature.unwrap_or_else(|| self.omega / qfpme_core::beta_omega(self.n_b()))
    }

    pub fn point(&self) -> Point {
        Point { kappa: self.kappa, lambda: self.lambda }
    }

    pub fn inset_point(&self) -> Point {
        Point { kappa: self.inset_kappa, lambda: self.inset_lambda }
    }

    pub fn bang_bang(&self, p: Point) -> Result<BangBang> {
        Ok(BangBang::new(self.omega, p.kappa, self.n_b(), p.lambda, self.gamma)?)
    }

    pub fn engine(&self, p: Point) -> Result<Engine> {
        Ok(Engine::new(self.omega, self.g, p.kappa, self.n_b(), p.lambda, self.gamma)?)
    }

    pub fn sweep(&self) -> Result<&Sweep> {
        self.sweep.as_ref().ok_or_else(|| CliError::config("sweep", "missing"))
    }

    pub fn families(&self) -> Result<&Sweep> {
        self.families.as_ref().ok_or_else(|| CliError::config("families", "missing"))
    }

    /// Canonical key/value echo; feeding it back as a config file reproduces the run.
    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("experiment", self.experiment.tag().into());
        put("model", self.model.name().into());
        put("omega", self.omega.to_string());
        if let Some(t) = self.temperature {
            put("temperature", t.to_string());
        }
        if let Some(nb) = self.n_b {
            put("n_b", nb.to_string());
        }
        put("kappa", self.kappa.to_string());
        put("gamma", self.gamma.to_string());
        put("lambda", self.lambda.to_string());
        put("g", self.g.to_string());
        put("dt", self.dt.to_string());
        put("steps", self.steps.to_string());
        put("burn_in", self.burn_in.to_string());
        put("n_traj", self.n_traj.to_string());
        put("seed", self.master_seed.to_string());
        put(
            "truncation",
            match self.truncation {
                Truncation::Fixed(l) => l.to_string(),
                Truncation::Auto { .. } => "auto".into(),
            },
        );
        put("cells", self.cells.to_string());
        put("steady_tol", self.steady_tol.to_string());
        put("sweep", self.sweep.as_ref().map(Sweep::to_string).unwrap_or_default());
        put("families", self.families.as_ref().map(Sweep::to_string).unwrap_or_default());
        put("inset_kappa", self.inset_kappa.to_string());
        put("inset_lambda", self.inset_lambda.to_string());
        put("inset_n_traj", self.inset_n_traj.to_string());
        put("sampler", self.sampler.name().into());
        put("min_count", self.min_count.to_string());
        put("mark_stride", self.mark_stride.to_string());
        put("out", self.out.display().to_string());
        put("threads", self.threads.to_string());
        m
    }

    /// The echo as config-file text.
    pub fn to_config_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
