//! Reproducible verification runs: configuration files, result tables, run
//! manifests, the experiment registry and the `report` aggregator.
//!
//! A run writes its CSV tables, a `manifest.json` echoing the resolved
//! configuration, tolerances and checks, and a separate `timestamp.txt`, so
//! repeated runs with one seed produce byte-identical CSVs.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gibbs::{
    c_beta_candidates, gibbs_exact, gibbs_mcmc, hamiltonian, hamiltonian_w2_gap, partition_function,
    realizable_types, sanov_exact, zero_temp_mgf, Backend, GibbsEnsemble, HamiltonianKind, Proposal,
};
use crate::grid::{Grid, GridFunction};
use crate::legendre::legendre_transform;
use crate::measures::{entropy, log_mgf_weights, DiscreteMeasure, Domain, EmpiricalConfig, GridMeasure};
use crate::monge_ampere::{
    gprop_consistency, perturbation_probes, MasterParams, MongeAmpereProblem,
};
use crate::torus::{theta_rate_error, torus_sq_dist, TorusLattice, ThetaParams};
use crate::transport::{cost_matrix, kantorovich_lp, w2_semidiscrete, CostKind};

/// Name of the manifest file in every run directory.
pub const MANIFEST: &str = "manifest.json";
/// Name of the file holding the wall-clock time of a run.
pub const TIMESTAMP: &str = "timestamp.txt";

/// A resolved run request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub experiment: String,
    pub params: BTreeMap<String, String>,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn new(experiment: &str, seed: u64, out_dir: impl Into<PathBuf>) -> Self {
        Self { experiment: experiment.to_string(), params: BTreeMap::new(), seed, out_dir: out_dir.into() }
    }

    pub fn with(mut self, key: &str, value: impl fmt::Display) -> Self {
        self.params.insert(key.to_string(), value.to_string());
        self
    }

    /// Parses a `key = value` file. Keys in a `[run]` section (or before any
    /// section) set `experiment`, `seed` and `out`; keys in `[params]` or in a
    /// section named after the experiment are experiment parameters. `#` and
    /// `;` start comments.
    pub fn parse(text: &str) -> Result<Self> {
        let mut section = String::from("run");
        let mut run: BTreeMap<String, String> = BTreeMap::new();
        let mut params = BTreeMap::new();
        let mut param_sections = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            let target = if section == "run" {
                &mut run
            } else {
                param_sections.push(section.clone());
                &mut params
            };
            if target.insert(k.clone(), v).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", lineno + 1)));
            }
        }
        let experiment = run.remove("experiment").ok_or_else(|| Error::Config("missing `experiment` key".into()))?;
        for s in &param_sections {
            if s != "params" && s != &experiment {
                return Err(Error::Config(format!("unknown section `[{s}]`")));
            }
        }
        let seed = match run.remove("seed") {
            Some(s) => s.parse().map_err(|_| Error::Config(format!("seed `{s}` is not a 64-bit integer")))?,
            None => 0,
        };
        let out_dir = run.remove("out").map(PathBuf::from).unwrap_or_else(|| default_out_dir(&experiment, seed));
        if let Some(k) = run.keys().next() {
            return Err(Error::Config(format!("unknown key `{k}` in [run]")));
        }
        Ok(Self { experiment, params, seed, out_dir })
    }
}

/// `runs/<experiment>-seed<seed>`.
pub fn default_out_dir(experiment: &str, seed: u64) -> PathBuf {
    PathBuf::from("runs").join(format!("{experiment}-seed{seed}"))
}

/// One table cell.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(i64),
    Text(String),
    Bool(bool),
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Num(v) if v.is_infinite() => write!(f, "{}", if *v > 0.0 { "inf" } else { "-inf" }),
            Cell::Num(v) => write!(f, "{v:?}"),
            Cell::Int(v) => write!(f, "{v}"),
            Cell::Text(s) => write!(f, "{s}"),
            Cell::Bool(b) => write!(f, "{b}"),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

/// A CSV table whose last column names the result each row verifies.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    header: Vec<String>,
    rows: Vec<Vec<Cell>>,
}

impl ResultTable {
    /// `columns` excludes the trailing `provenance` column.
    pub fn new(columns: &[&str]) -> Self {
        let mut header: Vec<String> = columns.iter().map(|c| c.to_string()).collect();
        header.push("provenance".into());
        Self { header, rows: Vec::new() }
    }

    pub fn push(&mut self, cells: Vec<Cell>, provenance: &str) -> Result<()> {
        if cells.len() + 1 != self.header.len() {
            return Err(Error::Invalid(format!("row has {} cells, table has {} columns", cells.len() + 1, self.header.len())));
        }
        if cells.iter().any(|c| matches!(c, Cell::Num(v) if v.is_nan())) {
            return Err(Error::Invalid("NaN in result table".into()));
        }
        let mut row = cells;
        row.push(Cell::Text(provenance.to_string()));
        self.rows.push(row);
        Ok(())
    }

    pub fn header(&self) -> &[String] {
        &self.header
    }

    pub fn rows(&self) -> &[Vec<Cell>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|c| c.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A registered tolerance check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.to_string(), passed, detail: detail.into() }
    }

    /// `value <= bound`.
    pub fn at_most(name: &str, value: f64, bound: f64) -> Self {
        Self::new(name, value <= bound, format!("{value:e} <= {bound:e}"))
    }
}

/// What an experiment produced.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentOutput {
    /// `(file name, table)`; the first table is the one `report` aggregates.
    pub tables: Vec<(String, ResultTable)>,
    /// Extra files written verbatim.
    pub files: Vec<(String, Vec<u8>)>,
    pub checks: Vec<Check>,
}

/// Contents of `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: String,
    pub anchor: String,
    pub seed: u64,
    pub params: BTreeMap<String, String>,
    pub tolerances: BTreeMap<String, f64>,
    pub git_describe: String,
    pub version: String,
    pub outputs: Vec<String>,
    pub checks: Vec<Check>,
    pub passed: bool,
}

/// Outcome of [`run`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub manifest: Manifest,
    pub out_dir: PathBuf,
}

impl RunSummary {
    /// 0 when every check passed, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.manifest.passed { 0 } else { 1 }
    }
}

/// A registered experiment.
pub struct Experiment {
    pub name: &'static str,
    /// The result family the experiment verifies; used as default provenance.
    pub anchor: &'static str,
    /// `(key, default)`; an empty default means the key is optional.
    pub keys: &'static [(&'static str, &'static str)],
    pub tolerances: &'static [(&'static str, f64)],
    runner: fn(&Params, u64) -> Result<ExperimentOutput>,
}

/// Every experiment `run` accepts (`report` is separate, see [`report`]).
pub fn registry() -> &'static [Experiment] {
    &REGISTRY
}

/// Names accepted by `run`, including `report`.
pub fn experiment_names() -> Vec<&'static str> {
    let mut names: Vec<&str> = REGISTRY.iter().map(|e| e.name).collect();
    names.push("report");
    names
}

pub fn lookup(name: &str) -> Option<&'static Experiment> {
    REGISTRY.iter().find(|e| e.name == name)
}

static REGISTRY: [Experiment; 8] = [
    Experiment {
        name: "verify-theta",
        anchor: "theta-log-asymptotics",
        keys: &[("n", "8,16,32,64"), ("d", "1"), ("grid", "256"), ("radius", "2")],
        tolerances: &[("final_error_slack", 1e-6)],
        runner: run_verify_theta,
    },
    Experiment {
        name: "verify-hamiltonian",
        anchor: "hamiltonian-wasserstein",
        keys: &[("kind", "tropical"), ("n", "2,4,8"), ("d", "1"), ("trials", "100"), ("radius", "2"), ("grid", "64,256"), ("sandwich_n", "2,3,4,5,6,7"), ("sandwich_trials", "50")],
        tolerances: &[("sandwich_slack", 1e-12)],
        runner: run_verify_hamiltonian,
    },
    Experiment {
        name: "gibbs-ldp",
        anchor: "gibbs-concentration",
        keys: &[
            ("n", "2"),
            ("d", "1"),
            ("kind", "tropical"),
            ("refine", "4"),
            ("beta", "0,64,256,1024,2048,4096"),
            ("radius", "0.15"),
            ("mu0", "uniform"),
            ("k", "64"),
            ("backend", "exact"),
            ("steps", "200000"),
            ("burn_in", "1000"),
            ("min_mass", "0.9"),
        ],
        tolerances: &[("min_mass", 0.9)],
        runner: run_gibbs_ldp,
    },
    Experiment {
        name: "sanov-demo",
        anchor: "sanov-types",
        keys: &[("k", "2"), ("n", "4"), ("mu0", ""), ("nu", "")],
        tolerances: &[("types_bound_factor", 1.0)],
        runner: run_sanov,
    },
    Experiment {
        name: "cramer-demo",
        anchor: "cramer-legendre",
        keys: &[("values", "0,1"), ("weights", "0.5,0.5"), ("theta_max", "30"), ("theta_k", "6001"), ("k", "101")],
        tolerances: &[("zero_at_mean", 1e-9), ("nonnegative", 1e-12)],
        runner: run_cramer,
    },
    Experiment {
        name: "zero-temp-mgf",
        anchor: "zero-temperature-mgf",
        keys: &[("n", "8,16,32"), ("k", "512"), ("mu0", "bump"), ("theta", "well,wave,ramp"), ("shift", "0.7")],
        tolerances: &[("shift_identity", 1e-12)],
        runner: run_zero_temp,
    },
    Experiment {
        name: "solve-ma",
        anchor: "master-equation",
        keys: &[
            ("beta", "1"),
            ("mu0", "bump"),
            ("nu", "uniform"),
            ("k", "128"),
            ("damping", "1"),
            ("max_iter", "500"),
            ("tol", "1e-9"),
            ("probes", "50"),
            ("probe_scale", "0.05"),
        ],
        tolerances: &[("residual", 1e-6), ("certificate", 1e-4), ("rate_at_minimizer", 1e-4)],
        runner: run_solve_ma,
    },
    Experiment {
        name: "ot",
        anchor: "kantorovich-duality",
        keys: &[("mu", ""), ("nu", ""), ("cost", "sqdist_euclid"), ("domain", "euclidean"), ("d", "1")],
        tolerances: &[("marginal", 1e-10), ("duality", 1e-9)],
        runner: run_ot,
    },
];

/// Resolved experiment parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    values: BTreeMap<String, String>,
}

impl Params {
    /// Merges `given` over the experiment defaults; unknown keys are errors.
    pub fn resolve(exp: &Experiment, given: &BTreeMap<String, String>) -> Result<Self> {
        for k in given.keys() {
            if !exp.keys.iter().any(|(name, _)| name == k) {
                let known: Vec<&str> = exp.keys.iter().map(|(n, _)| *n).collect();
                return Err(Error::Config(format!("unknown key `{k}` for {} (known: {})", exp.name, known.join(", "))));
            }
        }
        let mut values = BTreeMap::new();
        for (k, d) in exp.keys {
            match given.get(*k) {
                Some(v) => {
                    values.insert(k.to_string(), v.clone());
                }
                None if !d.is_empty() => {
                    values.insert(k.to_string(), d.to_string());
                }
                None => {}
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn str(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, raw: &str) -> Result<T> {
        raw.trim().parse().map_err(|_| Error::Config(format!("cannot parse `{raw}` for key `{key}`")))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.parse(key, self.str(key)?)
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.parse(key, self.str(key)?)
    }

    pub fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.str(key)?.split(',').filter(|s| !s.trim().is_empty()).map(|s| self.parse(key, s)).collect()
    }
}

/// Independent generator for sub-task `stream` of a run.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn sub_seed(seed: u64, s: u64) -> u64 {
    stream(seed, s).next_u64()
}

/// Runs an experiment and writes its artifacts to `config.out_dir`.
pub fn run(config: &RunConfig) -> Result<RunSummary> {
    let exp = lookup(&config.experiment).ok_or_else(|| Error::UnknownExperiment {
        name: config.experiment.clone(),
        known: experiment_names().join(", "),
    })?;
    let params = Params::resolve(exp, &config.params)?;
    let output = (exp.runner)(&params, config.seed)?;
    fs::create_dir_all(&config.out_dir)?;
    let mut outputs = Vec::new();
    for (name, table) in &output.tables {
        let mut buf = Vec::new();
        table.write_csv(&mut buf)?;
        fs::write(config.out_dir.join(name), buf)?;
        outputs.push(name.clone());
    }
    for (name, bytes) in &output.files {
        fs::write(config.out_dir.join(name), bytes)?;
        outputs.push(name.clone());
    }
    let manifest = Manifest {
        experiment: exp.name.to_string(),
        anchor: exp.anchor.to_string(),
        seed: config.seed,
        params: params.values().clone(),
        tolerances: exp.tolerances.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        git_describe: git_describe(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        outputs,
        passed: output.checks.iter().all(|c| c.passed),
        checks: output.checks,
    };
    fs::write(config.out_dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    let now = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    fs::write(config.out_dir.join(TIMESTAMP), format!("{now}\n"))?;
    Ok(RunSummary { manifest, out_dir: config.out_dir.clone() })
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

/// Merges the first table of each run directory into one table with columns
/// `experiment, seed, point, anchor`, stably sorted by anchor. Directories
/// without a manifest are skipped with a warning on stderr.
pub fn report(dirs: &[PathBuf]) -> Result<ResultTable> {
    let mut rows: Vec<(String, Vec<Cell>)> = Vec::new();
    for dir in dirs {
        let path = dir.join(MANIFEST);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(_) => {
                eprintln!("warning: no manifest in {}, skipping", dir.display());
                continue;
            }
        };
        let manifest: Manifest = serde_json::from_str(&text)?;
        let Some(first) = manifest.outputs.iter().find(|o| o.ends_with(".csv")) else { continue };
        let mut reader = csv::Reader::from_path(dir.join(first))?;
        let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        let prov = header.iter().position(|h| h == "provenance");
        for rec in reader.records() {
            let rec = rec?;
            let point: Vec<String> = header
                .iter()
                .zip(rec.iter())
                .enumerate()
                .filter(|(i, _)| Some(*i) != prov)
                .map(|(_, (h, v))| format!("{h}={v}"))
                .collect();
            let anchor = prov.and_then(|i| rec.get(i)).unwrap_or(&manifest.anchor).to_string();
            rows.push((
                anchor,
                vec![Cell::from(manifest.experiment.clone()), Cell::Int(manifest.seed as i64), Cell::from(point.join(";"))],
            ));
        }
    }
    rows.sort_by(|a, b| a.0.cmp(&b.0));
    let mut table = ResultTable::new(&["experiment", "seed", "point"]);
    for (anchor, cells) in rows {
        table.push(cells, &anchor)?;
    }
    Ok(table)
}

fn is_strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

fn table(name: &str, t: ResultTable) -> (String, ResultTable) {
    (name.to_string(), t)
}

/// `uniform`, `bump` (density `1 + cos(2 pi x)/2`) or a CSV file of cells.
fn load_measure(spec: &str, grid: Grid) -> Result<GridMeasure> {
    match spec {
        "uniform" => Ok(GridMeasure::uniform(grid)),
        "bump" => GridMeasure::from_density_fn(grid, |x| 1.0 + 0.5 * (2.0 * std::f64::consts::PI * x[0]).cos()),
        path => {
            let m = GridMeasure::read_csv(grid, fs::File::open(path)?)?;
            m.check_probability()?;
            Ok(m)
        }
    }
}

fn run_verify_theta(p: &Params, _seed: u64) -> Result<ExperimentOutput> {
    let ns: Vec<usize> = p.list("n")?;
    let d = p.usize("d")?;
    let k = p.usize("grid")?;
    let radius = p.usize("radius")?;
    let slack = 1e-6;
    let mut t = ResultTable::new(&["n", "sup_error", "bracket_bound", "bracket_holds", "tail_bound"]);
    let mut errors = Vec::new();
    let mut checks = Vec::new();
    for &n in &ns {
        let params = ThetaParams::new(n, radius)?;
        let lattice = TorusLattice::new(n, d)?;
        let r = theta_rate_error(&params, &lattice, k)?;
        t.push(vec![n.into(), r.sup_error.into(), r.bracket_width.into(), r.bracket_holds.into(), r.tail_bound.into()], "theta-log-asymptotics")?;
        checks.push(Check::new(&format!("bracket n={n}"), r.bracket_holds, format!("sup error {:e}", r.sup_error)));
        errors.push((r.sup_error, r.bracket_width));
    }
    let sup: Vec<f64> = errors.iter().map(|e| e.0).collect();
    checks.push(Check::new("sup error strictly decreasing", is_strictly_decreasing(&sup), format!("{sup:?}")));
    if let Some(&(e, w)) = errors.last() {
        checks.push(Check::at_most("final error within bracket width", e, w + slack));
    }
    Ok(ExperimentOutput { tables: vec![table("theta.csv", t)], files: vec![], checks })
}

fn run_verify_hamiltonian(p: &Params, seed: u64) -> Result<ExperimentOutput> {
    let kinds: Vec<HamiltonianKind> = match p.str("kind")? {
        "both" => vec![HamiltonianKind::Tropical, HamiltonianKind::Permanental],
        other => vec![other.parse()?],
    };
    let ns: Vec<usize> = p.list("n")?;
    let d = p.usize("d")?;
    let trials = p.usize("trials")?;
    let radius = p.usize("radius")?;
    let grids: Vec<usize> = p.list("grid")?;
    let mut t = ResultTable::new(&["kind", "n", "grid", "max_gap", "bound", "uniform_gap", "uniform_bound"]);
    let mut checks = Vec::new();
    for (ki, &kind) in kinds.iter().enumerate() {
        let mut bounds = Vec::new();
        for (ni, &n) in ns.iter().enumerate() {
            for &k in &grids {
                let g = hamiltonian_w2_gap(kind, n, d, radius, trials, sub_seed(seed, (ki * 1000 + ni) as u64), Some(k))?;
                let (ug, ub) = (g.max_uniform_gap.unwrap_or(0.0), g.uniform_bound.unwrap_or(0.0));
                t.push(
                    vec![format!("{kind:?}").to_lowercase().into(), n.into(), k.into(), g.max_gap.into(), g.bound.into(), ug.into(), ub.into()],
                    "hamiltonian-wasserstein",
                )?;
                checks.push(Check::at_most(&format!("{kind:?} n={n} k={k} gap"), g.max_gap, g.bound));
                checks.push(Check::at_most(&format!("{kind:?} n={n} k={k} uniform gap"), ug, ub + 1e-12));
                if k == *grids.last().expect("nonempty grid list") {
                    bounds.push(ub);
                }
            }
        }
        checks.push(Check::new(&format!("{kind:?} uniform bound shrinks with n"), is_strictly_decreasing(&bounds), format!("{bounds:?}")));
    }
    let mut s = ResultTable::new(&["n", "particles", "max_abs_difference", "bound"]);
    let sandwich_trials = p.usize("sandwich_trials")?;
    for n in p.list::<usize>("sandwich_n")? {
        let lattice = TorusLattice::new(n, 1)?;
        let params = ThetaParams::new(n, radius)?;
        let mut rng = stream(seed, 10_000 + n as u64);
        let mut worst = 0.0_f64;
        for _ in 0..sandwich_trials {
            let xs: Vec<f64> = (0..lattice.len()).map(|_| (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64).collect();
            let c = EmpiricalConfig::torus_1d(&xs)?;
            let hp = hamiltonian(HamiltonianKind::Permanental, &lattice, &params, &c)?;
            let ht = hamiltonian(HamiltonianKind::Tropical, &lattice, &params, &c)?;
            worst = worst.max((hp - ht).abs());
        }
        let bound = (2..=lattice.len()).map(|i| (i as f64).ln()).sum::<f64>() / n as f64;
        s.push(vec![n.into(), lattice.len().into(), worst.into(), bound.into()], "sum-sup-sandwich")?;
        checks.push(Check::at_most(&format!("sandwich n={n}"), worst, bound + 1e-12));
    }
    Ok(ExperimentOutput { tables: vec![table("hamiltonian.csv", t), table("sandwich.csv", s)], files: vec![], checks })
}

fn run_gibbs_ldp(p: &Params, seed: u64) -> Result<ExperimentOutput> {
    let n = p.usize("n")?;
    let d = p.usize("d")?;
    let kind: HamiltonianKind = p.str("kind")?.parse()?;
    let refine = p.usize("refine")?;
    let betas: Vec<f64> = p.list("beta")?;
    let radius = p.f64("radius")?;
    let k = p.usize("k")?;
    let min_mass = p.f64("min_mass")?;
    let mu0 = load_measure(p.str("mu0")?, Grid::torus(d, k)?)?;
    let mcmc = match p.str("backend")? {
        "exact" => false,
        "mcmc" => true,
        other => return Err(Error::Config(format!("unknown backend `{other}`"))),
    };
    let candidates = c_beta_candidates(&mu0, 16, sub_seed(seed, 1))?;
    let uniform = GridMeasure::uniform(mu0.grid().clone());
    let energies: Vec<f64> = candidates.iter().map(|c| w2_semidiscrete(&uniform, &c.to_discrete()?)).collect::<Result<_>>()?;
    let ents: Vec<f64> = candidates.iter().map(|c| entropy(&mu0, c)).collect::<Result<_>>()?;
    // The MCMC backend has no partition function, so it reports the
    // acceptance rate in that column's place.
    let last = if mcmc { "acceptance_rate" } else { "log_partition" };
    let mut t = ResultTable::new(&["beta", "mass_in_ball", "c_beta", "minimizer_energy", last]);
    let mut masses = Vec::new();
    for (bi, &beta) in betas.iter().enumerate() {
        // Rate minimizer over the candidate sweep: argmin beta E + Ent.
        let (best, value) = energies
            .iter()
            .zip(&ents)
            .enumerate()
            .map(|(i, (e, h))| (i, beta * e + h))
            .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
        let center = &candidates[best];
        let backend = if mcmc {
            Backend::Mcmc {
                seed: sub_seed(seed, 100 + bi as u64),
                steps: p.usize("steps")?,
                burn_in: p.usize("burn_in")?,
                proposal: Proposal::Sites { refine },
            }
        } else {
            Backend::Exact { refine }
        };
        let ens = GibbsEnsemble::new(beta, n, d, mu0.clone(), kind, backend)?;
        let in_ball = |m: &DiscreteMeasure| -> Result<bool> { Ok(w2_semidiscrete(center, m)?.sqrt() < radius) };
        let (mass, extra) = if mcmc {
            let run = gibbs_mcmc(&ens)?;
            let mut cache: BTreeMap<Vec<u64>, bool> = BTreeMap::new();
            let mut hits = 0usize;
            for c in &run.samples {
                let mut key: Vec<u64> = c.points().iter().flatten().map(|v| v.to_bits()).collect();
                key.sort_unstable();
                let inside = match cache.get(&key) {
                    Some(&b) => b,
                    None => {
                        let b = in_ball(&DiscreteMeasure::uniform(Domain::Torus(d), c.points().to_vec())?)?;
                        cache.insert(key, b);
                        b
                    }
                };
                hits += inside as usize;
            }
            (hits as f64 / run.samples.len().max(1) as f64, run.acceptance_rate)
        } else {
            let table = gibbs_exact(&ens)?;
            let mass = table.probability_where(|m| in_ball(&table.empirical_measure(m)?))?;
            (mass, table.log_partition)
        };
        masses.push(mass);
        t.push(
            vec![beta.into(), mass.into(), (0.0 - value).into(), energies[best].into(), extra.into()],
            "gibbs-concentration",
        )?;
    }
    let increasing = masses.windows(2).all(|w| w[1] > w[0]);
    let mut checks = vec![Check::new("ball mass increasing in beta", increasing, format!("{masses:?}"))];
    if let Some(&last) = masses.last() {
        checks.push(Check::new("ball mass at largest beta", last >= min_mass, format!("{last} >= {min_mass}")));
    }
    Ok(ExperimentOutput { tables: vec![table("gibbs.csv", t)], files: vec![], checks })
}

fn run_sanov(p: &Params, _seed: u64) -> Result<ExperimentOutput> {
    let k = p.usize("k")?;
    let mu0: Vec<f64> = match p.get("mu0") {
        Some(_) => p.list("mu0")?,
        None => vec![1.0 / k as f64; k],
    };
    if mu0.len() != k {
        return Err(Error::Config(format!("mu0 has {} weights for k = {k}", mu0.len())));
    }
    let ns: Vec<usize> = p.list("n")?;
    let mut t = ResultTable::new(&["n", "type", "probability", "rate", "entropy", "bound"]);
    let mut checks = Vec::new();
    for &n in &ns {
        let types = match p.get("nu") {
            Some(_) => vec![p.list::<f64>("nu")?],
            None => realizable_types(k, n),
        };
        let mut worst = f64::NEG_INFINITY;
        for nu in types {
            let s = sanov_exact(&mu0, n, &nu)?;
            let label: Vec<String> = nu.iter().map(|v| v.to_string()).collect();
            t.push(
                vec![n.into(), label.join(" ").into(), s.probability.into(), s.rate.into(), s.entropy.into(), s.bound.into()],
                "sanov-types",
            )?;
            if s.rate.is_finite() {
                worst = worst.max((s.rate - s.entropy).abs() - s.bound);
            }
        }
        checks.push(Check::new(&format!("types bound n={n}"), worst <= 0.0, format!("max excess {worst:e}")));
    }
    Ok(ExperimentOutput { tables: vec![table("sanov.csv", t)], files: vec![], checks })
}

fn run_cramer(p: &Params, _seed: u64) -> Result<ExperimentOutput> {
    let values: Vec<f64> = p.list("values")?;
    let weights: Vec<f64> = p.list("weights")?;
    if values.len() != weights.len() || values.is_empty() {
        return Err(Error::Config("values and weights must have equal nonzero length".into()));
    }
    let mu = DiscreteMeasure::on_alphabet(&weights)?;
    let mean: f64 = values.iter().zip(&weights).map(|(a, w)| a * w).sum();
    let theta_max = p.f64("theta_max")?;
    let theta_k = p.usize("theta_k")?;
    if theta_k % 2 == 0 {
        return Err(Error::Config("theta_k must be odd so that theta = 0 is a node".into()));
    }
    // p(theta) = I_mu(theta a) on a symmetric theta grid; p* on the value range.
    let tgrid = Grid::nodes(1, theta_k, -theta_max, theta_max)?;
    let pvals: Vec<f64> = tgrid
        .axis_coords(0)
        .iter()
        .map(|th| log_mgf_weights(&mu.weights(), &values.iter().map(|a| th * a).collect::<Vec<_>>()))
        .collect::<Result<_>>()?;
    let pfun = GridFunction::new(tgrid, pvals)?;
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let xs = Grid::nodes(1, p.usize("k")?, lo, hi)?;
    let pstar = legendre_transform(&pfun, &xs)?;
    let at_mean = legendre_transform(&pfun, &Grid::nodes(1, 2, mean, mean + 1.0)?)?.value(0);
    let mut t = ResultTable::new(&["x", "p_star"]);
    for (x, v) in xs.axis_coords(0).iter().zip(pstar.values()) {
        t.push(vec![(*x).into(), (*v).into()], "cramer-legendre")?;
    }
    let min = pstar.values().iter().copied().fold(f64::INFINITY, f64::min);
    let checks = vec![
        Check::new("p* nonnegative", min >= -1e-12, format!("min {min:e}")),
        Check::at_most("p*(mean) = 0", at_mean.abs(), 1e-9),
    ];
    Ok(ExperimentOutput { tables: vec![table("cramer.csv", t)], files: vec![], checks })
}

fn run_zero_temp(p: &Params, _seed: u64) -> Result<ExperimentOutput> {
    let ns: Vec<usize> = p.list("n")?;
    let k = p.usize("k")?;
    let g = Grid::torus(1, k)?;
    let mu0 = load_measure(p.str("mu0")?, g.clone())?;
    let shift = p.f64("shift")?;
    let names: Vec<String> = p.list("theta")?;
    let mut t = ResultTable::new(&["theta", "n", "p_n", "target", "error", "shift_error"]);
    let mut checks = Vec::new();
    let tau = 2.0 * std::f64::consts::PI;
    for name in &names {
        let theta = match name.as_str() {
            "well" => GridFunction::from_fn(g.clone(), |x| -torus_sq_dist(x, &[0.5]).unwrap_or(0.0))?,
            "wave" => GridFunction::from_fn(g.clone(), |x| (tau * x[0]).sin())?,
            "ramp" => GridFunction::from_fn(g.clone(), |x| 0.5 * x[0])?,
            other => return Err(Error::Config(format!("unknown theta `{other}` (well, wave, ramp)"))),
        };
        let shifted = theta.add_constant(shift);
        let mut errs = Vec::new();
        for &n in &ns {
            let z = zero_temp_mgf(&theta, n, &mu0)?;
            let zs = zero_temp_mgf(&shifted, n, &mu0)?;
            let shift_err = (zs.p_n - z.p_n - shift).abs();
            let err = (z.p_n - z.target).abs();
            errs.push(err);
            t.push(
                vec![name.as_str().into(), n.into(), z.p_n.into(), z.target.into(), err.into(), shift_err.into()],
                "zero-temperature-mgf",
            )?;
            checks.push(Check::at_most(&format!("{name} n={n} shift identity"), shift_err, 1e-12));
        }
        checks.push(Check::new(&format!("{name} error decreasing"), is_strictly_decreasing(&errs), format!("{errs:?}")));
    }
    Ok(ExperimentOutput { tables: vec![table("zero_temp_mgf.csv", t)], files: vec![], checks })
}

fn run_solve_ma(p: &Params, seed: u64) -> Result<ExperimentOutput> {
    let k = p.usize("k")?;
    let g = Grid::cells(1, k, 0.0, 1.0)?;
    let mu0 = load_measure(p.str("mu0")?, g.clone())?;
    let nu = load_measure(p.str("nu")?, g.clone())?;
    let beta = p.f64("beta")?;
    let params = MasterParams::with_solver(beta, mu0, nu, p.f64("damping")?, p.usize("max_iter")?, p.f64("tol")?)?;
    let mut problem = MongeAmpereProblem::new(params);
    let sol = problem.solve()?.clone();
    let probes = perturbation_probes(&sol.pushforward, p.usize("probes")?, p.f64("probe_scale")?, sub_seed(seed, 1))?;
    let report = gprop_consistency(&problem, &probes)?;
    let c = sol.constant(beta);
    let mut t = ResultTable::new(&[
        "beta",
        "k",
        "iterations",
        "residual",
        "f_min",
        "c",
        "transport_certificate",
        "entropy_certificate",
        "rate_at_minimizer",
        "min_probe_rate",
    ]);
    t.push(
        vec![
            beta.into(),
            k.into(),
            (sol.trace.len() - 1).into(),
            sol.residual.into(),
            sol.f_min.into(),
            c.into(),
            report.transport_certificate.into(),
            report.entropy_certificate.into(),
            report.minimum.into(),
            report.min_probe.into(),
        ],
        "master-equation",
    )?;
    let mut trace = ResultTable::new(&["iteration", "f_value", "residual", "step"]);
    for r in &sol.trace {
        trace.push(vec![r.iteration.into(), r.f_value.into(), r.residual.into(), r.step.into()], "master-equation")?;
    }
    let mut potential = Vec::new();
    sol.potential.write_csv(&mut potential)?;
    let mut push = Vec::new();
    sol.pushforward.write_csv(&mut push)?;
    let checks = vec![
        Check::at_most("residual", report.tv_residual, 1e-6),
        Check::at_most("transport certificate", report.transport_certificate.abs(), 1e-4),
        Check::at_most("entropy certificate", report.entropy_certificate.abs(), 1e-4),
        Check::at_most("rate at minimizer", report.minimum.abs(), 1e-4),
        Check::new("probes positive", report.min_probe > 0.0, format!("min {:e}", report.min_probe)),
        Check::new("probes not below minimizer", report.minimal && report.unique, format!("{} probes", report.probes)),
    ];
    Ok(ExperimentOutput {
        tables: vec![table("solve_ma.csv", t), table("residual_trace.csv", trace)],
        files: vec![
            ("potential.csv".into(), potential),
            ("pushforward.csv".into(), push),
            ("constant.txt".into(), format!("{c}\n").into_bytes()),
        ],
        checks,
    })
}

fn run_ot(p: &Params, _seed: u64) -> Result<ExperimentOutput> {
    let d = p.usize("d")?;
    let domain = match p.str("domain")? {
        "torus" => Domain::Torus(d),
        "euclidean" => Domain::Euclidean(d),
        other => return Err(Error::Config(format!("unknown domain `{other}` (torus, euclidean)"))),
    };
    let cost: CostKind = p.str("cost")?.parse()?;
    let mu = DiscreteMeasure::read_csv(domain, fs::File::open(p.str("mu")?)?)?;
    let nu = DiscreteMeasure::read_csv(domain, fs::File::open(p.str("nu")?)?)?;
    let c = cost_matrix(&mu.points(), &nu.points(), cost)?;
    let plan = kantorovich_lp(&mu, &nu, &c)?;
    let gap = (plan.objective() - plan.dual_objective()).abs();
    let mut t = ResultTable::new(&["cost", "source_atoms", "target_atoms", "objective", "dual_objective", "marginal_error"]);
    t.push(
        vec![cost.name().into(), mu.len().into(), nu.len().into(), plan.objective().into(), plan.dual_objective().into(), plan.marginal_error().into()],
        "kantorovich-duality",
    )?;
    let mut buf = Vec::new();
    plan.write_csv(&mut buf)?;
    let checks = vec![Check::at_most("marginals", plan.marginal_error(), 1e-10), Check::at_most("duality gap", gap, 1e-9)];
    Ok(ExperimentOutput { tables: vec![table("ot.csv", t)], files: vec![("plan.csv".into(), buf)], checks })
}

/// Partition function values `(1/n^2) log Z_{n,n}` for the product-formula
/// path in one dimension, with the tensor-quadrature cross-check where
/// affordable.
pub fn znn_table(ns: &[usize], mu0: &GridMeasure, k: usize) -> Result<Vec<(usize, f64, Option<f64>)>> {
    ns.iter()
        .map(|&n| {
            let ens = GibbsEnsemble::new(n as f64, n, 1, mu0.clone(), HamiltonianKind::Permanental, Backend::Exact { refine: 1 })?;
            let z = partition_function(&ens, k)?;
            let product = z.log_product.ok_or_else(|| Error::Invalid("product formula unavailable".into()))?;
            Ok((n, product / (n * n) as f64, z.log_tensor.map(|t| t / (n * n) as f64)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_config_files() {
        let text = "# theta sweep\nexperiment = verify-theta\nseed = 7\nout = /tmp/x\n[params]\nn = 8,16 ; short\nd = 1\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.experiment, "verify-theta");
        assert_eq!(c.seed, 7);
        assert_eq!(c.params["n"], "8,16");
        let c2 = RunConfig::parse("experiment = sanov-demo\n[sanov-demo]\nk = 2\n").unwrap();
        assert_eq!(c2.params["k"], "2");
        assert_eq!(c2.out_dir, default_out_dir("sanov-demo", 0));
        assert!(RunConfig::parse("experiment = ot\nbogus = 1\n").is_err());
        assert!(RunConfig::parse("experiment = ot\n[other]\nk = 1\n").is_err());
        assert!(RunConfig::parse("[params]\nk = 1\n").is_err());
        assert!(RunConfig::parse("experiment = ot\nnot a pair\n").is_err());
    }

    #[test]
    fn unknown_keys_and_experiments() {
        let dir = tempfile::tempdir().unwrap();
        let bad = RunConfig::new("verify-theta", 0, dir.path()).with("nn", 3);
        assert!(matches!(run(&bad), Err(Error::Config(_))));
        let missing = RunConfig::new("no-such-thing", 0, dir.path());
        assert!(matches!(run(&missing), Err(Error::UnknownExperiment { .. })));
    }

    #[test]
    fn table_formats_inf_and_rejects_nan() {
        let mut t = ResultTable::new(&["a", "b"]);
        t.push(vec![f64::INFINITY.into(), 2usize.into()], "x").unwrap();
        assert!(t.push(vec![f64::NAN.into(), 1usize.into()], "x").is_err());
        assert!(t.push(vec![1.0.into()], "x").is_err());
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "a,b,provenance\ninf,2,x\n");
    }

    proptest::proptest! {
        #[test]
        fn numeric_cells_round_trip(v in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
            let text = Cell::Num(v).to_string();
            proptest::prop_assert_eq!(text.parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }

    #[test]
    fn sanov_run_reports_quarter() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::new("sanov-demo", 1, dir.path()).with("k", 2).with("n", 4).with("nu", "0.75,0.25");
        let s = run(&cfg).unwrap();
        assert_eq!(s.exit_code(), 0);
        let csv = fs::read_to_string(dir.path().join("sanov.csv")).unwrap();
        assert!(csv.lines().nth(1).unwrap().starts_with("4,0.75 0.25,0.25,"), "{csv}");
        assert!(dir.path().join(MANIFEST).exists() && dir.path().join(TIMESTAMP).exists());
    }

    #[test]
    fn verify_theta_run_passes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::new("verify-theta", 0, dir.path()).with("n", "8,16,32").with("grid", 128);
        assert_eq!(run(&cfg).unwrap().exit_code(), 0);
    }

    #[test]
    fn tolerance_failure_gives_exit_one() {
        let dir = tempfile::tempdir().unwrap();
        // An increasing n list cannot give a decreasing-error failure, so
        // reverse it.
        let cfg = RunConfig::new("verify-theta", 0, dir.path()).with("n", "32,16").with("grid", 64);
        let s = run(&cfg).unwrap();
        assert_eq!(s.exit_code(), 1);
        assert!(s.manifest.checks.iter().any(|c| !c.passed));
    }

    #[test]
    fn solve_ma_symmetric_run() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::new("solve-ma", 0, dir.path()).with("beta", 0).with("mu0", "uniform").with("k", 64);
        let s = run(&cfg).unwrap();
        assert_eq!(s.exit_code(), 0, "{:?}", s.manifest.checks);
        for f in ["potential.csv", "pushforward.csv", "residual_trace.csv", "constant.txt"] {
            assert!(dir.path().join(f).exists());
        }
        assert_eq!(fs::read_to_string(dir.path().join("constant.txt")).unwrap().trim(), "0");
    }

    #[test]
    fn ot_run_from_files() {
        let dir = tempfile::tempdir().unwrap();
        let mu = DiscreteMeasure::uniform(Domain::Euclidean(1), vec![vec![0.0], vec![1.0]]).unwrap();
        let nu = DiscreteMeasure::uniform(Domain::Euclidean(1), vec![vec![0.5], vec![2.0]]).unwrap();
        mu.write_csv(fs::File::create(dir.path().join("mu.csv")).unwrap()).unwrap();
        nu.write_csv(fs::File::create(dir.path().join("nu.csv")).unwrap()).unwrap();
        let out = dir.path().join("run");
        let cfg = RunConfig::new("ot", 0, &out)
            .with("mu", dir.path().join("mu.csv").display())
            .with("nu", dir.path().join("nu.csv").display());
        assert_eq!(run(&cfg).unwrap().exit_code(), 0);
        assert!(out.join("plan.csv").exists());
    }

    #[test]
    fn report_merges_and_sorts() {
        let root = tempfile::tempdir().unwrap();
        assert_eq!(report(&[]).unwrap().len(), 0);
        let a = root.path().join("a");
        let b = root.path().join("b");
        run(&RunConfig::new("sanov-demo", 1, &a).with("nu", "0.75,0.25")).unwrap();
        run(&RunConfig::new("sanov-demo", 2, &b).with("nu", "0.75,0.25")).unwrap();
        let t = report(&[a, root.path().join("missing"), b]).unwrap();
        assert_eq!(t.len(), 2);
        let seeds: Vec<String> = t.rows().iter().map(|r| r[1].to_string()).collect();
        assert_eq!(seeds, vec!["1", "2"]);
    }

    #[test]
    fn runs_are_byte_identical() {
        let root = tempfile::tempdir().unwrap();
        let go = |name: &str| {
            let dir = root.path().join(name);
            run(&RunConfig::new("verify-hamiltonian", 5, &dir).with("n", "2,4").with("trials", 10).with("grid", 32)).unwrap();
            fs::read(dir.join("hamiltonian.csv")).unwrap()
        };
        assert_eq!(go("x"), go("y"));
    }
}
