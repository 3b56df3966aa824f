//! Configuration, experiment orchestration and persistence.
//!
//! Configs are flat INI files:
//!
//! ```text
//! [run]
//! kind = expand
//! seed = 7
//!
//! [field]
//! model = laminate
//! seed = 1
//!
//! [grid]
//! n = 8
//!
//! [experiment]
//! eps = 0.25 0.125 0.0625
//! probes = 0.25 : 0.5 1.25 ; 1 : 2.75 4.5
//! datum_period = 8
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::corrector::{CorrectorOptions, CorrectorSet};
use crate::diagnostics::{self, DecayCurve};
use crate::error::{Error, Result};
use crate::field::{CoefficientField, FieldSpec, ModelKind};
use crate::forward::{self, ExpansionOptions, InitialDatum, Probe};
use crate::io::{fmt17, write_atomic};
use crate::lattice::{Grid, Preconditioner};
use crate::walk::{self, Dynamics, Environment, Functional, MartingaleOptions};
use crate::{rng, stats};

/// Parsed INI text: section -> key -> value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Ini {
    pub sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl Ini {
    /// Parses `[section]` headers, `key = value` lines and `#`/`;` comments.
    pub fn parse(text: &str) -> Result<Self> {
        let mut ini = Ini::default();
        let mut current: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let lead = raw.len() - raw.trim_start().len();
            let s = raw.trim();
            if s.is_empty() || s.starts_with('#') || s.starts_with(';') {
                continue;
            }
            let err = |column: usize, message: String| Error::Parse { line, column, message };
            if let Some(rest) = s.strip_prefix('[') {
                let Some(name) = rest.strip_suffix(']') else {
                    return Err(err(lead + s.len() + 1, "expected `]` to close the section header".into()));
                };
                let name = name.trim();
                if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                    return Err(err(lead + 2, format!("invalid section name `{name}`")));
                }
                if ini.sections.contains_key(name) {
                    return Err(err(lead + 2, format!("duplicate section `{name}`")));
                }
                ini.sections.insert(name.to_string(), BTreeMap::new());
                current = Some(name.to_string());
                continue;
            }
            let Some(eq) = s.find('=') else {
                return Err(err(lead + 1, "expected `key = value`".into()));
            };
            let key = s[..eq].trim();
            if key.is_empty() {
                return Err(err(lead + 1, "empty key".into()));
            }
            let Some(sec) = &current else {
                return Err(err(lead + 1, format!("key `{key}` appears before any [section]")));
            };
            let value = s[eq + 1..].trim().to_string();
            let map = ini.sections.get_mut(sec).expect("section exists");
            if map.insert(key.to_string(), value).is_some() {
                return Err(err(lead + 1, format!("duplicate key `{sec}.{key}`")));
            }
        }
        Ok(ini)
    }

    /// Canonical text (sorted sections and keys), the input of the config hash.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        for (name, map) in &self.sections {
            s += &format!("[{name}]\n");
            for (k, v) in map {
                s += &format!("{k} = {v}\n");
            }
        }
        s
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section).and_then(|m| m.get(key)).map(String::as_str)
    }
}

/// Experiment families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Homogenize,
    Expand,
    Elliptic,
    Decay,
    Decorr,
    Clt,
    ConvLemma,
    PeriodicSuite,
}

impl Kind {
    pub const ALL: [&'static str; 8] = ["homogenize", "expand", "elliptic", "decay", "decorr", "clt", "conv-lemma", "periodic-suite"];

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "homogenize" => Kind::Homogenize,
            "expand" => Kind::Expand,
            "elliptic" => Kind::Elliptic,
            "decay" => Kind::Decay,
            "decorr" => Kind::Decorr,
            "clt" => Kind::Clt,
            "conv-lemma" => Kind::ConvLemma,
            "periodic-suite" => Kind::PeriodicSuite,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        Kind::ALL[self as usize]
    }

    fn needs_field(self) -> bool {
        self != Kind::ConvLemma
    }

    fn unknown(s: &str) -> String {
        format!("run.kind: unknown experiment kind `{s}` (allowed: {})", Kind::ALL.join(", "))
    }
}

/// Which lattice functional a walk or decorrelation experiment observes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FunctionalKind {
    Zero,
    Phi,
    Psi,
}

/// Parameters of the `[experiment]` section. Each kind reads a subset.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentParams {
    pub eps: Vec<f64>,
    pub probes: Vec<Probe>,
    pub n_envs: usize,
    pub n_paths: usize,
    pub dt: f64,
    pub t: f64,
    pub times: Vec<f64>,
    pub lags: Vec<f64>,
    pub xi: Vec<f64>,
    pub fit_window: Option<(f64, f64)>,
    pub functional: FunctionalKind,
    pub dynamics: Dynamics,
    pub datum_period: f64,
    pub datum_modes: Vec<i64>,
    pub datum_amplitude: f64,
    pub min_m: usize,
    pub windows: usize,
    pub distances: Vec<f64>,
    pub conv_d: usize,
    pub conv_p: usize,
    pub rho: f64,
    pub lambda: f64,
    pub preconditioner: Preconditioner,
}

impl Default for ExperimentParams {
    fn default() -> Self {
        ExperimentParams {
            eps: vec![0.25, 0.125, 0.0625],
            probes: Vec::new(),
            n_envs: 1,
            n_paths: 1000,
            dt: 0.01,
            t: 1.0,
            times: vec![1.0, 2.0, 4.0, 8.0],
            lags: Vec::new(),
            xi: Vec::new(),
            fit_window: None,
            functional: FunctionalKind::Phi,
            dynamics: Dynamics::Diffusion,
            datum_period: 8.0,
            datum_modes: Vec::new(),
            datum_amplitude: 1.0,
            min_m: 8,
            windows: 4,
            distances: vec![10.0, 15.0, 20.0, 30.0, 40.0, 50.0],
            conv_d: 3,
            conv_p: 2,
            rho: 8.0,
            lambda: 0.0,
            preconditioner: Preconditioner::Fourier,
        }
    }
}

impl ExperimentParams {
    pub const KEYS: [&'static str; 23] = [
        "eps",
        "probes",
        "n_envs",
        "n_paths",
        "dt",
        "t",
        "times",
        "lags",
        "xi",
        "fit_window",
        "functional",
        "dynamics",
        "datum_period",
        "datum_modes",
        "datum_amplitude",
        "min_m",
        "windows",
        "distances",
        "conv_d",
        "conv_p",
        "rho",
        "lambda",
        "preconditioner",
    ];
}

/// Typed, validated experiment description.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub kind: Kind,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub field: Option<FieldSpec>,
    /// Corrector lattice size per axis.
    pub n: usize,
    pub exp: ExperimentParams,
    /// Canonical INI text the run was built from.
    #[serde(skip)]
    pub canonical: String,
}

fn list<T: std::str::FromStr>(v: &str) -> std::result::Result<Vec<T>, ()> {
    v.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|_| ()))
        .collect()
}

fn probes(v: &str, problems: &mut Vec<String>) -> Vec<Probe> {
    let mut out = Vec::new();
    for (i, item) in v.split(';').enumerate() {
        let item = item.trim();
        if item.is_empty() {
            continue;
        }
        let parsed = item
            .split_once(':')
            .and_then(|(t, x)| Some((t.trim().parse::<f64>().ok()?, list::<f64>(x).ok()?)));
        match parsed {
            Some((t, x)) if !x.is_empty() => out.push(Probe { t, x }),
            _ => problems.push(format!("experiment.probes: entry {} `{item}` is not `t : x1 x2 ...`", i + 1)),
        }
    }
    out
}

/// Reads the `[experiment]` section, collecting every problem.
fn read_params(map: &BTreeMap<String, String>, problems: &mut Vec<String>) -> ExperimentParams {
    let mut p = ExperimentParams::default();
    macro_rules! scalar {
        ($key:literal, $slot:expr) => {
            if let Some(v) = map.get($key) {
                match v.trim().parse() {
                    Ok(x) => $slot = x,
                    Err(_) => problems.push(format!("experiment.{}: cannot parse `{v}`", $key)),
                }
            }
        };
    }
    macro_rules! vector {
        ($key:literal, $slot:expr) => {
            if let Some(v) = map.get($key) {
                match list(v) {
                    Ok(x) => $slot = x,
                    Err(_) => problems.push(format!("experiment.{}: cannot parse `{v}` as a list", $key)),
                }
            }
        };
    }
    vector!("eps", p.eps);
    scalar!("n_envs", p.n_envs);
    scalar!("n_paths", p.n_paths);
    scalar!("dt", p.dt);
    scalar!("t", p.t);
    vector!("times", p.times);
    vector!("lags", p.lags);
    vector!("xi", p.xi);
    scalar!("datum_period", p.datum_period);
    vector!("datum_modes", p.datum_modes);
    scalar!("datum_amplitude", p.datum_amplitude);
    scalar!("min_m", p.min_m);
    scalar!("windows", p.windows);
    vector!("distances", p.distances);
    scalar!("conv_d", p.conv_d);
    scalar!("conv_p", p.conv_p);
    scalar!("rho", p.rho);
    scalar!("lambda", p.lambda);
    if let Some(v) = map.get("probes") {
        p.probes = probes(v, problems);
    }
    if let Some(v) = map.get("fit_window") {
        match list::<f64>(v) {
            Ok(w) if w.len() == 2 && w[0] < w[1] => p.fit_window = Some((w[0], w[1])),
            _ => problems.push(format!("experiment.fit_window: `{v}` must be two increasing numbers")),
        }
    }
    if let Some(v) = map.get("functional") {
        p.functional = match v.trim() {
            "zero" => FunctionalKind::Zero,
            "phi" => FunctionalKind::Phi,
            "psi" => FunctionalKind::Psi,
            _ => {
                problems.push(format!("experiment.functional: unknown `{v}` (allowed: zero, phi, psi)"));
                p.functional
            }
        };
    }
    if let Some(v) = map.get("dynamics") {
        p.dynamics = match v.trim() {
            "diffusion" => Dynamics::Diffusion,
            "brownian" => Dynamics::Brownian,
            _ => {
                problems.push(format!("experiment.dynamics: unknown `{v}` (allowed: diffusion, brownian)"));
                p.dynamics
            }
        };
    }
    if let Some(v) = map.get("preconditioner") {
        p.preconditioner = match v.trim() {
            "jacobi" => Preconditioner::Jacobi,
            "fourier" => Preconditioner::Fourier,
            _ => {
                problems.push(format!("experiment.preconditioner: unknown `{v}` (allowed: jacobi, fourier)"));
                p.preconditioner
            }
        };
    }
    for k in map.keys() {
        if !ExperimentParams::KEYS.contains(&k.as_str()) {
            problems.push(format!("experiment.{k}: unknown key"));
        }
    }
    p
}

fn is_integer(x: f64) -> bool {
    (x - x.round()).abs() <= 1e-9 * x.abs().max(1.0)
}

/// Consistency checks that need more than one key.
fn check(cfg: &ExperimentConfig, problems: &mut Vec<String>) {
    let e = &cfg.exp;
    let k = cfg.kind;
    if k == Kind::ConvLemma {
        if e.conv_d < 3 {
            problems.push(format!("experiment.conv_d: {} must be at least 3", e.conv_d));
        } else if e.conv_p + 1 != e.conv_d && e.conv_p != e.conv_d {
            problems.push(format!("experiment.conv_p: {} must be conv_d - 1 or conv_d", e.conv_p));
        }
        if !(e.rho >= 6.0) {
            problems.push(format!("experiment.rho: {} must be at least 6", e.rho));
        }
        if e.distances.is_empty() || e.distances.iter().any(|x| !(*x >= 0.0)) {
            problems.push("experiment.distances: needs non-negative distances".into());
        }
        return;
    }
    let Some(f) = &cfg.field else { return };
    let (d, l) = (f.d, f.box_length);
    if cfg.n == 0 {
        problems.push("grid.n: must be positive".into());
        return;
    }
    let per_unit = cfg.n as f64 / l;
    if e.n_envs == 0 {
        problems.push("experiment.n_envs: must be positive".into());
    }
    if !(e.lambda >= 0.0) {
        problems.push(format!("experiment.lambda: {} must be non-negative", e.lambda));
    }
    if matches!(k, Kind::Expand | Kind::Elliptic) {
        if e.eps.is_empty() {
            problems.push("experiment.eps: the ladder is empty".into());
        }
        for &eps in &e.eps {
            if !(eps > 0.0 && eps <= 1.0) {
                problems.push(format!("experiment.eps: {eps} must lie in (0, 1]"));
            }
        }
        // the eps-scale lattice has spacing eps * L / n, so eps = (n / L) h
        if !is_integer(per_unit) || (per_unit.round() as usize) < e.min_m {
            problems.push(format!(
                "experiment.eps / grid.n: eps is not an integer multiple m >= {} of the grid spacing h = eps L / n (n / L = {per_unit})",
                e.min_m
            ));
        }
        if e.probes.is_empty() {
            problems.push("experiment.probes: at least one probe is required".into());
        }
        for (i, p) in e.probes.iter().enumerate() {
            if p.x.len() != d {
                problems.push(format!("experiment.probes: probe {} has {} coordinates, field.d = {d}", i + 1, p.x.len()));
            }
            if !(p.t >= 0.0) {
                problems.push(format!("experiment.probes: probe {} has negative time", i + 1));
            }
        }
        if !e.datum_modes.is_empty() && e.datum_modes.len() != d {
            problems.push(format!("experiment.datum_modes: needs {d} wavenumbers"));
        }
        if !(e.datum_period > 0.0) {
            problems.push(format!("experiment.datum_period: {} must be positive", e.datum_period));
        } else {
            for &eps in &e.eps {
                if eps > 0.0 && forward::common_period(eps * l, Some(e.datum_period)).is_err() {
                    problems.push(format!(
                        "experiment.datum_period / experiment.eps: period {} is not commensurate with eps L = {}",
                        e.datum_period,
                        eps * l
                    ));
                }
            }
        }
    }
    if matches!(k, Kind::Decay | Kind::Decorr | Kind::Clt) && e.xi.len() != d {
        problems.push(format!("experiment.xi: needs {d} components, got {}", e.xi.len()));
    }
    if matches!(k, Kind::Decay | Kind::Clt) {
        if e.n_paths < 2 {
            problems.push("experiment.n_paths: must be at least 2".into());
        }
        if !(e.dt > 0.0) {
            problems.push(format!("experiment.dt: {} must be positive", e.dt));
        }
    }
    if k == Kind::Decay {
        if e.times.is_empty() || e.times.windows(2).any(|w| w[1] <= w[0]) || e.times[0] < 0.0 {
            problems.push("experiment.times: must be non-negative and strictly increasing".into());
        }
        for &t in &e.times {
            if e.dt > 0.0 && !is_integer(t / e.dt) {
                problems.push(format!("experiment.times / experiment.dt: {t} is not a whole number of steps"));
            }
        }
    }
    if k == Kind::Decorr {
        let h = l / cfg.n as f64;
        if e.lags.is_empty() {
            problems.push("experiment.lags: at least one lag is required".into());
        }
        for &lag in &e.lags {
            if lag > l / 4.0 + 1e-12 {
                problems.push(format!("experiment.lags: {lag} exceeds L/4 = {}", l / 4.0));
            }
            if !is_integer(lag / h) {
                problems.push(format!("experiment.lags / grid.n: {lag} is not a multiple of h = {h}"));
            }
        }
    }
    if k == Kind::Clt {
        let eps = e.eps.first().copied().unwrap_or(f64::NAN);
        if e.eps.len() != 1 || !(eps > 0.0 && eps <= 1.0) {
            problems.push("experiment.eps: clt takes a single eps in (0, 1]".into());
        } else if e.dt > 0.0 {
            let steps = e.t / (eps * eps) / e.dt;
            if !is_integer(steps) {
                problems.push("experiment.t / experiment.dt: t / eps^2 is not a whole number of steps".into());
            } else if e.windows == 0 || steps.round() as usize % e.windows != 0 {
                problems.push("experiment.windows: must divide the number of steps".into());
            }
        }
    }
    if k == Kind::PeriodicSuite && matches!(f.model, ModelKind::PoissonBump | ModelKind::MollifiedCheckerboard) {
        problems.push(format!("field.model: periodic-suite needs a deterministic periodic model, got `{}`", f.model.name()));
    }
}

/// Builds a typed config, returning every problem found. Parse errors abort early.
pub fn load(text: &str) -> Result<std::result::Result<ExperimentConfig, Vec<String>>> {
    let ini = Ini::parse(text)?;
    let mut problems = Vec::new();
    for name in ini.sections.keys() {
        if !["run", "field", "grid", "experiment"].contains(&name.as_str()) {
            problems.push(format!("[{name}]: unknown section"));
        }
    }
    let run = ini.sections.get("run").cloned().unwrap_or_default();
    for k in run.keys() {
        if !["kind", "seed", "out"].contains(&k.as_str()) {
            problems.push(format!("run.{k}: unknown key"));
        }
    }
    let kind = match run.get("kind") {
        None => {
            problems.push("run.kind: missing".into());
            None
        }
        Some(s) => {
            let k = Kind::parse(s.trim());
            if k.is_none() {
                problems.push(Kind::unknown(s.trim()));
            }
            k
        }
    };
    let seed = match run.get("seed") {
        None => {
            problems.push("run.seed: missing (seeds must be explicit)".into());
            0
        }
        Some(s) => s.trim().parse().unwrap_or_else(|_| {
            problems.push(format!("run.seed: cannot parse `{s}`"));
            0
        }),
    };
    let needs_field = kind.is_none_or(|k| k.needs_field());
    let field = match ini.sections.get("field") {
        Some(map) => match FieldSpec::from_kv(map) {
            Ok(f) => Some(f),
            Err(p) => {
                problems.extend(p);
                None
            }
        },
        None if needs_field => {
            problems.push("[field]: missing section".into());
            None
        }
        None => None,
    };
    let grid = ini.sections.get("grid").cloned().unwrap_or_default();
    for k in grid.keys() {
        if k != "n" {
            problems.push(format!("grid.{k}: unknown key"));
        }
    }
    let n = match grid.get("n") {
        None if needs_field => {
            problems.push("grid.n: missing".into());
            0
        }
        None => 0,
        Some(s) => s.trim().parse().unwrap_or_else(|_| {
            problems.push(format!("grid.n: cannot parse `{s}`"));
            0
        }),
    };
    let exp = read_params(&ini.sections.get("experiment").cloned().unwrap_or_default(), &mut problems);
    let cfg = ExperimentConfig {
        kind: kind.unwrap_or(Kind::Homogenize),
        seed,
        out: run.get("out").map(PathBuf::from),
        field,
        n,
        exp,
        canonical: ini.canonical(),
    };
    if kind.is_some() {
        check(&cfg, &mut problems);
    }
    Ok(if problems.is_empty() { Ok(cfg) } else { Err(problems) })
}

/// Every problem in the config text; empty iff [`run`] would start.
pub fn validate(text: &str) -> Result<Vec<String>> {
    Ok(load(text)?.err().unwrap_or_default())
}

/// Exit status of the command-line tool for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Parse { .. } | Error::Validation(_) | Error::InvalidParameter { .. } => 2,
        _ => 3,
    }
}

/// Process-level options that do not change the config hash.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed_offset: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub kind: Kind,
    pub config_hash: String,
    pub version: &'static str,
    pub seed: u64,
    pub seed_offset: u64,
    pub wall_time_s: f64,
    pub config: BTreeMap<String, BTreeMap<String, String>>,
    pub artifacts: Vec<String>,
}

/// Outputs of one run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub out: PathBuf,
    pub manifest: Manifest,
}

struct Sink {
    dir: PathBuf,
    hash: String,
    written: Vec<String>,
}

impl Sink {
    /// CSV with a leading `config_hash` column.
    fn csv(&mut self, name: &str, body: &str) -> Result<()> {
        let mut s = String::with_capacity(body.len() + 80 * body.lines().count());
        for (i, line) in body.lines().enumerate() {
            if i == 0 {
                s += "config_hash,";
            } else {
                s += &self.hash;
                s.push(',');
            }
            s += line;
            s.push('\n');
        }
        self.raw(name, s.as_bytes())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        #[derive(Serialize)]
        struct Tagged<'a, T> {
            config_hash: &'a str,
            #[serde(flatten)]
            body: &'a T,
        }
        let text = serde_json::to_string_pretty(&Tagged {
            config_hash: &self.hash,
            body: value,
        })?;
        self.raw(name, text.as_bytes())
    }

    fn raw(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.dir.join(name), bytes)?;
        self.written.push(name.to_string());
        Ok(())
    }
}

fn csv_rows(header: &str, rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut s = format!("{header}\n");
    for r in rows {
        s += &r.join(",");
        s.push('\n');
    }
    s
}

fn curve_json(c: &DecayCurve) -> serde_json::Value {
    serde_json::json!({ "fit": c.fit, "reference": c.reference })
}

/// Environment `e` of the ensemble: random models draw a fresh seed per member.
pub fn member_spec(spec: &FieldSpec, e: usize, offset: u64) -> FieldSpec {
    let base = spec.seed.wrapping_add(offset);
    match spec.model {
        ModelKind::PoissonBump | ModelKind::MollifiedCheckerboard => spec.with_seed(rng::derive(base, e as u64)),
        _ => spec.with_seed(base),
    }
}

fn corrector_options(cfg: &ExperimentConfig, flux: bool) -> CorrectorOptions {
    let mut o = CorrectorOptions {
        lambda: cfg.exp.lambda,
        flux,
        ..Default::default()
    };
    o.solve.preconditioner = cfg.exp.preconditioner;
    o
}

/// Origin offset keeping probes off the lattice nodes.
pub const ORIGIN_OFFSET: [f64; 4] = [0.37, 0.61, 0.23, 0.71];

fn unit_grid(spec: &FieldSpec, n: usize, offset: bool) -> Result<Grid> {
    let g = Grid::new(spec.d, n, spec.box_length)?;
    if offset {
        let o: Vec<f64> = ORIGIN_OFFSET[..spec.d].iter().map(|v| v * g.h).collect();
        g.with_origin(&o)
    } else {
        Ok(g)
    }
}

/// Environment `e`: its field and correctors.
fn member(cfg: &ExperimentConfig, e: usize, offset: u64, flux: bool, origin: bool) -> Result<(CoefficientField, CorrectorSet)> {
    let spec = cfg.field.as_ref().expect("validated");
    let f = member_spec(spec, e, offset).build()?;
    let set = CorrectorSet::compute(&f, &unit_grid(spec, cfg.n, origin)?, &corrector_options(cfg, flux))?;
    Ok((f, set))
}

/// Whole ensemble in memory; only the path-based kinds need it.
fn ensemble(cfg: &ExperimentConfig, offset: u64) -> Result<(Vec<CoefficientField>, Vec<CorrectorSet>)> {
    let mut fields = Vec::with_capacity(cfg.exp.n_envs);
    let mut sets = Vec::with_capacity(cfg.exp.n_envs);
    for e in 0..cfg.exp.n_envs {
        let (f, s) = member(cfg, e, offset, false, false)?;
        fields.push(f);
        sets.push(s);
    }
    Ok((fields, sets))
}

fn datum(cfg: &ExperimentConfig) -> Result<InitialDatum> {
    let d = cfg.field.as_ref().map_or(0, |f| f.d);
    let modes = if cfg.exp.datum_modes.is_empty() {
        vec![1; d]
    } else {
        cfg.exp.datum_modes.clone()
    };
    InitialDatum::cosine_product(cfg.exp.datum_period, &modes, cfg.exp.datum_amplitude)
}

/// Uniform start points, one per environment.
fn starts(cfg: &ExperimentConfig, seed: u64) -> Vec<Vec<f64>> {
    let spec = cfg.field.as_ref().expect("validated");
    (0..cfg.exp.n_envs)
        .map(|e| {
            let mut r = rng::stream2(seed, 0x57A7, e as u64);
            (0..spec.d).map(|_| spec.box_length * r.random::<f64>()).collect()
        })
        .collect()
}

fn functional(cfg: &ExperimentConfig) -> Functional {
    match cfg.exp.functional {
        FunctionalKind::Zero => Functional::Zero,
        FunctionalKind::Phi => Functional::Phi(cfg.exp.xi.clone()),
        FunctionalKind::Psi => Functional::Psi(cfg.exp.xi.clone()),
    }
}

/// Runs a validated experiment and writes its artifacts plus `manifest.json`.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary> {
    let start = Instant::now();
    let hash = {
        let mut h = Sha256::new();
        h.update(cfg.canonical.as_bytes());
        h.update(format!("seed_offset={}", opts.seed_offset).as_bytes());
        hex::encode(h.finalize())
    };
    let dir = opts
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| Path::new("out").join(cfg.kind.name()));
    std::fs::create_dir_all(&dir)?;
    let mut sink = Sink {
        dir: dir.clone(),
        hash: hash.clone(),
        written: Vec::new(),
    };
    let seed = cfg.seed.wrapping_add(opts.seed_offset);
    let off = opts.seed_offset;
    let e = &cfg.exp;
    match cfg.kind {
        Kind::Homogenize => {
            let mut rows = Vec::new();
            let mut a_bars = Vec::new();
            let mut iters = Vec::new();
            for k in 0..e.n_envs {
                let s = member(cfg, k, off, false, false)?.1;
                let d = s.d();
                for i in 0..d {
                    for j in 0..d {
                        rows.push(vec![k.to_string(), i.to_string(), j.to_string(), fmt17(s.a_bar[i * d + j])]);
                    }
                }
                iters.extend(s.iterations);
                a_bars.push(s.a_bar);
            }
            sink.csv("a_bar.csv", &csv_rows("env,i,j,a_bar", rows))?;
            let mean: Vec<f64> = (0..a_bars[0].len()).map(|q| stats::mean(&a_bars.iter().map(|a| a[q]).collect::<Vec<_>>())).collect();
            sink.json("summary.json", &serde_json::json!({ "a_bar_mean": mean, "iterations": iters }))?;
        }
        Kind::Expand | Kind::Elliptic => {
            let f = datum(cfg)?;
            let spec = cfg.field.as_ref().expect("validated");
            let eo = ExpansionOptions {
                eps: e.eps.clone(),
                probes: e.probes.clone(),
                min_m: e.min_m,
                elliptic: cfg.kind == Kind::Elliptic,
                ..Default::default()
            };
            let unit = unit_grid(spec, cfg.n, true)?;
            let rep = forward::expansion_report_with(&unit, e.n_envs, |k| member(cfg, k, off, false, true).map(|m| m.1), &f, &eo)?;
            sink.csv("expansion.csv", &rep.to_csv())?;
            let stats_rows = rep.stats.iter().map(|s| {
                vec![fmt17(s.eps), s.probe.to_string(), s.n.to_string(), fmt17(s.mean_abs), fmt17(s.se_abs), fmt17(s.mean), fmt17(s.se)]
            });
            sink.csv("stats.csv", &csv_rows("eps,probe,n,mean_abs,se_abs,mean,se", stats_rows))?;
            let ladders: Vec<serde_json::Value> = (0..rep.probes.len())
                .map(|p| {
                    serde_json::json!({
                        "probe": p,
                        "ladder": rep.ladder(p),
                        "strictly_decreasing": rep.strictly_decreasing(p),
                        "ratio": rep.decay_ratio(p),
                        "paired_steps": rep.paired_steps(p),
                    })
                })
                .collect();
            let mut summary = serde_json::json!({ "probes": ladders });
            if cfg.kind == Kind::Elliptic {
                sink.csv("elliptic.csv", &rep.elliptic_csv())?;
                let el: Vec<Vec<f64>> = (0..rep.points.len()).map(|p| rep.elliptic_ladder(p)).collect();
                summary["elliptic_ladders"] = serde_json::json!(el);
                summary["path_gap"] = serde_json::json!(rep.elliptic_path_gap());
            }
            sink.json("summary.json", &summary)?;
        }
        Kind::Decay => {
            let x0 = starts(cfg, seed);
            let g = functional(cfg);
            let per_env = (0..e.n_envs)
                .map(|k| {
                    let (field, set) = member(cfg, k, off, false, false)?;
                    let env = Environment { field: &field, set: &set, x0: &x0[k] };
                    walk::env_decay_member(&env, k, &g, &e.times, e.n_paths, e.dt, seed, e.dynamics)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut curve = DecayCurve::from_members(e.times.clone(), &per_env)?;
            if let Some(w) = e.fit_window {
                curve = curve.with_fit(w, seed)?;
            }
            if cfg.field.as_ref().is_some_and(|f| f.d == 3) && e.functional == FunctionalKind::Phi {
                curve = curve.with_reference(-0.5);
            }
            sink.csv("decay.csv", &curve.to_csv())?;
            sink.json("summary.json", &curve_json(&curve))?;
        }
        Kind::Decorr => {
            let g = functional(cfg);
            let per_env = (0..e.n_envs)
                .map(|k| diagnostics::decorrelation_member(&member(cfg, k, off, false, false)?.1, &g, &e.lags))
                .collect::<Result<Vec<_>>>()?;
            let mut curve = DecayCurve::from_members(e.lags.clone(), &per_env)?;
            if let Some(w) = e.fit_window {
                curve = curve.with_fit(w, seed)?;
            }
            let d = cfg.field.as_ref().map_or(0, |f| f.d) as f64;
            curve = curve.with_reference(match e.functional {
                FunctionalKind::Psi => -d,
                _ => 2.0 - d,
            });
            sink.csv("decorrelation.csv", &curve.to_csv())?;
            sink.json("summary.json", &curve_json(&curve))?;
        }
        Kind::Clt => {
            let (fields, sets) = ensemble(cfg, off)?;
            let x0 = starts(cfg, seed);
            let envs: Vec<Environment> = (0..fields.len())
                .map(|k| Environment {
                    field: &fields[k],
                    set: &sets[k],
                    x0: &x0[k],
                })
                .collect();
            let mo = MartingaleOptions {
                xi: e.xi.clone(),
                eps: e.eps[0],
                t: e.t,
                dt: e.dt,
                n_paths: e.n_paths,
                windows: e.windows,
            };
            let samples = walk::martingale_samples(&envs, &mo, seed)?;
            let sigma2 = stats::mean(&sets.iter().map(|s| s.sigma2(&e.xi)).collect::<Vec<_>>());
            let fns = diagnostics::default_test_functions(sigma2 * e.t);
            let rows = diagnostics::clt_distance(&samples, e.t, &fns)?;
            let body = rows.iter().map(|r| {
                vec![
                    r.function.name().replace(',', ";"),
                    fmt17(r.lhs2),
                    fmt17(r.lhs2_se),
                    fmt17(r.bound2),
                    fmt17(r.bound2_se),
                    fmt17(r.lhs3),
                    fmt17(r.lhs3_se),
                    fmt17(r.bound3),
                    fmt17(r.bound3_se),
                ]
            });
            sink.csv("clt.csv", &csv_rows("function,lhs2,lhs2_se,bound2,bound2_se,lhs3,lhs3_se,bound3,bound3_se", body))?;
            let qv: Vec<f64> = samples.iter().map(|s| s.qv / e.t).collect();
            let (qm, qs) = stats::mean_se(&qv);
            let tel = samples.iter().map(|s| s.telescoping).fold(0.0, f64::max);
            let disp: Vec<f64> = samples.iter().map(|s| s.displacement / e.t.sqrt()).collect();
            let ks = stats::ks_normal(&disp, sigma2.sqrt());
            let ws = walk::window_stats(&samples);
            sink.json(
                "summary.json",
                &serde_json::json!({
                    "sigma2": sigma2,
                    "qv_over_t": qm,
                    "qv_over_t_se": qs,
                    "max_telescoping": tel,
                    "ks_distance": ks,
                    "ks_critical_01": stats::ks_critical_01(disp.len()),
                    "windows": ws,
                    "second_order_holds": rows.iter().all(|r| r.second_holds(3.0)),
                    "third_order_holds": rows.iter().all(|r| r.third_holds(3.0)),
                }),
            )?;
        }
        Kind::ConvLemma => {
            let c = diagnostics::convolution_power_sum(e.conv_d, e.conv_p, &e.distances, e.rho)?;
            let rows = (0..e.distances.len()).map(|i| {
                vec![fmt17(e.distances[i]), fmt17(c.curve.values[i]), fmt17(c.bound[i]), fmt17(c.ratio[i]), fmt17(c.truncation[i])]
            });
            sink.csv("convolution.csv", &csv_rows("distance,sum,bound,ratio,truncation", rows))?;
            sink.json("summary.json", &serde_json::json!({ "d": c.d, "p": c.p, "spread": c.spread() }))?;
        }
        Kind::PeriodicSuite => {
            let spec = cfg.field.as_ref().expect("validated");
            let field = member_spec(spec, 0, off).build()?;
            let mut rows = Vec::new();
            let mut levels = Vec::new();
            for n in [cfg.n, 2 * cfg.n] {
                let grid = unit_grid(spec, n, false)?;
                let set = CorrectorSet::compute(&field, &grid, &corrector_options(cfg, true))?;
                let norm = crate::corrector::frobenius(&set.a_bar);
                let d = set.d();
                for (q, c) in set.c.iter().enumerate() {
                    rows.push(vec![
                        n.to_string(),
                        (q / (d * d)).to_string(),
                        (q / d % d).to_string(),
                        (q % d).to_string(),
                        fmt17(*c),
                        fmt17(set.c_ibp[q]),
                    ]);
                }
                levels.push(serde_json::json!({ "n": n, "a_bar": set.a_bar, "max_c_rel": set.max_c() / norm }));
            }
            sink.csv("c_ijk.csv", &csv_rows("n,i,j,k,c,c_ibp", rows))?;
            let rel: Vec<f64> = levels.iter().map(|l| l["max_c_rel"].as_f64().unwrap_or(f64::NAN)).collect();
            sink.json("summary.json", &serde_json::json!({ "levels": levels, "decreasing": rel[1] < rel[0] }))?;
        }
    }
    let manifest = Manifest {
        kind: cfg.kind,
        config_hash: hash,
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        seed_offset: opts.seed_offset,
        wall_time_s: start.elapsed().as_secs_f64(),
        config: Ini::parse(&cfg.canonical)?.sections,
        artifacts: sink.written.clone(),
    };
    write_atomic(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(RunSummary { out: dir, manifest })
}

/// Loads, validates and runs a config file.
pub fn run_text(text: &str, opts: &RunOptions) -> Result<RunSummary> {
    match load(text)? {
        Ok(cfg) => run(&cfg, opts),
        Err(p) => Err(Error::Validation(p)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[run]\nkind = homogenize\nseed = 1\n[field]\nmodel = constant\nseed = 2\nvalue = 2.5\n[grid]\nn = 8\n";

    #[test]
    fn minimal_config_is_valid() {
        assert!(validate(MINIMAL).unwrap().is_empty());
    }

    #[test]
    fn parse_error_has_position() {
        let e = Ini::parse("[run]\nkind homogenize\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, column: 1, .. }));
        let e = Ini::parse("  [run\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, column: 7, .. }));
    }

    #[test]
    fn missing_seed_is_one_problem() {
        let text = MINIMAL.replace("seed = 1\n", "");
        let p = validate(&text).unwrap();
        assert_eq!(p.len(), 1, "{p:?}");
        assert!(p[0].contains("run.seed"));
    }

    #[test]
    fn unknown_kind_lists_allowed() {
        let p = validate(&MINIMAL.replace("homogenize", "bogus")).unwrap();
        assert_eq!(p.len(), 1);
        for k in Kind::ALL {
            assert!(p[0].contains(k));
        }
    }
}
