//! Subcommand bodies, artifact writing and exit-code mapping.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use bk_thermo::measures::{self, AtomicMeasure, MeasureHeader, Provenance};
use bk_thermo::pressure::{estimate_pressure, find_pressure_zero, pressure_curve};
use bk_thermo::verify::{preimage_oracle_check, run_all};
use bk_thermo::xfer::{cesaro_density, GridFunction};
use bk_thermo::{sample_julia, BkMapDescriptor, Error, JuliaCloud};
use num_complex::Complex64;
use serde::Serialize;
use serde_json::json;

use crate::config::{ConfigError, RunConfig};
use crate::manifest::{self, FileRecord, Manifest};

pub const ENV_OUT: &str = "BKTHERMO_OUT";
const DEFAULT_OUT: &str = "bkthermo-out";
/// Default gap between the admissibility floor and the lower bracket end; tree
/// cost grows steeply as `t` approaches the floor (about 230 s at a gap of 0.1).
const DIMENSION_FLOOR_GAP: f64 = 0.5;

#[derive(Debug, Clone)]
pub enum Command {
    SampleJulia,
    Pressure,
    PressureCurve,
    Density,
    Conformal,
    Gibbs { from: Option<PathBuf> },
    Verify,
    Dimension,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SampleJulia => "sample-julia",
            Command::Pressure => "pressure",
            Command::PressureCurve => "pressure-curve",
            Command::Density => "density",
            Command::Conformal => "conformal",
            Command::Gibbs { .. } => "gibbs",
            Command::Verify => "verify",
            Command::Dimension => "dimension",
        }
    }

    fn from_name(name: &str, input_dir: Option<PathBuf>) -> Option<Self> {
        Some(match name {
            "sample-julia" => Command::SampleJulia,
            "pressure" => Command::Pressure,
            "pressure-curve" => Command::PressureCurve,
            "density" => Command::Density,
            "conformal" => Command::Conformal,
            "gibbs" => Command::Gibbs { from: input_dir },
            "verify" => Command::Verify,
            "dimension" => Command::Dimension,
            _ => return None,
        })
    }
}

#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    MissingInput(PathBuf),
    Numeric(Error),
    Io(PathBuf, std::io::Error),
    ReplayMismatch(Vec<String>),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::MissingInput(_) => 2,
            CliError::Numeric(e) if is_non_convergence(e) => 3,
            CliError::Numeric(Error::InvalidParams(_)) => 2,
            _ => 1,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::MissingInput(_) => "missing_input",
            CliError::Numeric(e) if is_non_convergence(e) => "non_convergence",
            CliError::Numeric(_) => "numeric",
            CliError::Io(..) => "io",
            CliError::ReplayMismatch(_) => "replay_mismatch",
        }
    }

    fn record(&self) -> serde_json::Value {
        let mut v = json!({ "kind": self.kind(), "exit_code": self.exit_code(), "message": self.to_string() });
        match self {
            CliError::Config(c) => v["field"] = json!(c.field),
            CliError::MissingInput(p) | CliError::Io(p, _) => v["path"] = json!(p),
            CliError::ReplayMismatch(files) => v["files"] = json!(files),
            CliError::Numeric(_) => {}
        }
        v
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(c) => write!(f, "invalid config: {c}"),
            CliError::MissingInput(p) => write!(f, "missing input file {}", p.display()),
            CliError::Numeric(e) => write!(f, "{e}"),
            CliError::Io(p, e) => write!(f, "{}: {e}", p.display()),
            CliError::ReplayMismatch(files) => write!(f, "replay differs in {}", files.join(", ")),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Numeric(e)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

fn is_non_convergence(e: &Error) -> bool {
    matches!(
        e,
        Error::Convergence { .. }
            | Error::Disagreement(_)
            | Error::NodeBudget { .. }
            | Error::TruncationFailure { .. }
    )
}

/// Error together with the output directory it should be recorded in, if known.
pub type Failure = (CliError, Option<PathBuf>);

/// Prints the machine-readable error record and writes it (and diagnostics on exit 3) to `dir`.
pub fn report_error(err: &CliError, dir: Option<&Path>) {
    let record = err.record();
    eprintln!("{record}");
    let Some(dir) = dir else { return };
    if fs::create_dir_all(dir).is_err() {
        return;
    }
    let _ = fs::write(dir.join("error.json"), pretty(&record));
    if err.exit_code() == 3 {
        let mut diag = record.clone();
        if let CliError::Numeric(Error::Convergence { per_n, .. }) = err {
            diag["per_n"] = json!(per_n);
        }
        if let CliError::Numeric(Error::NodeBudget {
            budget,
            achieved_depth,
            nodes,
        }) = err
        {
            diag["node_budget"] =
                json!({ "budget": budget, "achieved_depth": achieved_depth, "nodes": nodes });
        }
        let _ = fs::write(dir.join("diagnostics.json"), pretty(&diag));
    }
}

fn pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn out_dir(cfg: &RunConfig, flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.output.directory.clone())
        .or_else(|| std::env::var_os(ENV_OUT).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

/// Artifact sink for one run.
struct Sink<'a> {
    dir: PathBuf,
    cfg: &'a RunConfig,
    written: Vec<String>,
}

impl Sink<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn create(&self, name: &str) -> Result<BufWriter<fs::File>, CliError> {
        let p = self.path(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::Io(parent.to_path_buf(), e))?;
        }
        fs::File::create(&p)
            .map(BufWriter::new)
            .map_err(|e| CliError::Io(p, e))
    }

    fn csv(
        &mut self,
        name: &str,
        write: impl FnOnce(BufWriter<fs::File>) -> bk_thermo::Result<()>,
    ) -> Result<(), CliError> {
        if !self.cfg.wants("csv") {
            return Ok(());
        }
        write(self.create(name)?)?;
        self.written.push(name.into());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        if !self.cfg.wants("json") {
            return Ok(());
        }
        let p = self.path(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::Io(parent.to_path_buf(), e))?;
        }
        fs::write(&p, pretty(value)).map_err(|e| CliError::Io(p, e))?;
        self.written.push(name.into());
        Ok(())
    }
}

fn thread_pool(threads: Option<usize>) -> Result<(rayon::ThreadPool, usize), CliError> {
    let n = threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if n == 0 {
        return Err(CliError::Config(ConfigError {
            field: "--threads".into(),
            message: "must be positive".into(),
        }));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .expect("thread pool builds");
    Ok((pool, n))
}

/// Runs one subcommand and writes its manifest.
pub fn execute(
    cmd: &Command,
    cfg: &RunConfig,
    out: Option<&Path>,
    threads: Option<usize>,
) -> Result<(), Failure> {
    let dir = out_dir(cfg, out);
    let result = run_in_pool(cmd, cfg, &dir, threads);
    result.map(|_| ()).map_err(|e| (e, Some(dir)))
}

fn run_in_pool(
    cmd: &Command,
    cfg: &RunConfig,
    dir: &Path,
    threads: Option<usize>,
) -> Result<Manifest, CliError> {
    let (pool, n) = thread_pool(threads)?;
    fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.to_path_buf(), e))?;
    let start = Instant::now();
    let mut sink = Sink {
        dir: dir.to_path_buf(),
        cfg,
        written: Vec::new(),
    };
    let inputs = pool.install(|| dispatch(cmd, cfg, &mut sink))?;
    let input_dir = match cmd {
        Command::Gibbs { from } => Some(from.clone().unwrap_or_else(|| dir.to_path_buf())),
        _ => None,
    };
    let outputs = sink
        .written
        .iter()
        .map(|f| FileRecord::of(dir, f).map_err(|e| CliError::Io(dir.join(f), e)))
        .collect::<Result<Vec<_>, _>>()?;
    let m = Manifest {
        subcommand: cmd.name().into(),
        version: env!("CARGO_PKG_VERSION").into(),
        core_version: bk_thermo::VERSION.into(),
        config: cfg.clone(),
        threads: n,
        rng_seed: cfg.sampling.rng_seed,
        output_dir: dir.to_path_buf(),
        input_dir,
        inputs,
        outputs,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    let p = dir.join(manifest::file_name(cmd.name()));
    fs::write(&p, pretty(&m)).map_err(|e| CliError::Io(p, e))?;
    Ok(m)
}

/// Reruns the manifest's subcommand and compares every output hash.
pub fn replay(path: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let text =
        fs::read_to_string(path).map_err(|_| (CliError::MissingInput(path.to_path_buf()), None))?;
    let old: Manifest = serde_json::from_str(&text).map_err(|e| {
        (
            CliError::Config(ConfigError {
                field: "manifest".into(),
                message: e.to_string(),
            }),
            None,
        )
    })?;
    let cmd = Command::from_name(&old.subcommand, old.input_dir.clone()).ok_or_else(|| {
        (
            CliError::Config(ConfigError {
                field: "manifest.subcommand".into(),
                message: format!("unknown subcommand {:?}", old.subcommand),
            }),
            None,
        )
    })?;
    old.config
        .validate()
        .map_err(|e| (CliError::Config(e), None))?;
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| old.output_dir.clone());
    let new = run_in_pool(&cmd, &old.config, &dir, Some(old.threads))
        .map_err(|e| (e, Some(dir.clone())))?;
    let mut differ: Vec<String> = Vec::new();
    for o in &old.outputs {
        match new.outputs.iter().find(|n| n.path == o.path) {
            Some(n) if n.sha256 == o.sha256 => {}
            _ => differ.push(o.path.clone()),
        }
    }
    differ.extend(
        new.outputs
            .iter()
            .filter(|n| !old.outputs.iter().any(|o| o.path == n.path))
            .map(|n| n.path.clone()),
    );
    if differ.is_empty() {
        println!(
            "replay of {} reproduced {} outputs",
            old.subcommand,
            new.outputs.len()
        );
        Ok(())
    } else {
        Err((CliError::ReplayMismatch(differ), Some(dir)))
    }
}

fn seed_point(m: &BkMapDescriptor, cfg: &RunConfig) -> Result<Complex64, CliError> {
    Ok(m.repelling_fixed_point(cfg.seed_hint())?)
}

fn cloud(m: &BkMapDescriptor, cfg: &RunConfig, seed: Complex64) -> Result<JuliaCloud, CliError> {
    Ok(sample_julia(m, seed, &cfg.sampling())?)
}

fn require(dir: &Path, name: &str) -> Result<(PathBuf, FileRecord), CliError> {
    let p = dir.join(name);
    if !p.is_file() {
        return Err(CliError::MissingInput(p));
    }
    let rec = FileRecord::of(dir, name).map_err(|e| CliError::Io(p.clone(), e))?;
    Ok((p, rec))
}

fn open(p: &Path) -> Result<fs::File, CliError> {
    fs::File::open(p).map_err(|e| CliError::Io(p.to_path_buf(), e))
}

/// Returns the records of the inputs that were read.
fn dispatch(cmd: &Command, cfg: &RunConfig, sink: &mut Sink) -> Result<Vec<FileRecord>, CliError> {
    let m = cfg.model()?;
    let p = cfg.params();
    let trunc = cfg.truncation();
    let n_max = cfg.truncation.n_max;
    match cmd {
        Command::SampleJulia => {
            let seed = seed_point(&m, cfg)?;
            let c = cloud(&m, cfg, seed)?;
            sink.csv("cloud.csv", |w| c.write_csv(w))?;
            sink.json(
                "cloud.json",
                &json!({
                    "points": c.len(),
                    "depth": c.depth,
                    "seed": [c.seed.re, c.seed.im],
                    "min_modulus": c.min_modulus,
                    "pairwise_resolution": c.pairwise_resolution,
                    "t_floor": m.t_floor,
                }),
            )?;
        }
        Command::Pressure => {
            let seed = seed_point(&m, cfg)?;
            let est = estimate_pressure(&m, &p, seed, n_max, &trunc)?;
            sink.csv("pressure.csv", |w| {
                let mut wr = csv::Writer::from_writer(w);
                wr.write_record(["n", "per_n", "log_ratio", "value"])?;
                for (i, &(n, a)) in est.per_n.iter().enumerate() {
                    let ratio = if i == 0 {
                        String::new()
                    } else {
                        fmt(est.log_ratios[i - 1])
                    };
                    wr.write_record([n.to_string(), fmt(a), ratio, fmt(est.values[i])])?;
                }
                wr.flush()?;
                Ok(())
            })?;
            sink.json("pressure.json", &est)?;
        }
        Command::PressureCurve => {
            let seed = seed_point(&m, cfg)?;
            let c = &cfg.curve;
            let grid: Vec<f64> = (0..c.steps)
                .map(|i| c.t_min + (c.t_max - c.t_min) * i as f64 / (c.steps - 1) as f64)
                .collect();
            let curve = pressure_curve(&m, p.tau, &grid, seed, n_max, &trunc)?;
            sink.csv("pressure_curve.csv", |w| curve.write_csv(w))?;
            sink.json(
                "pressure_curve.json",
                &json!({ "curve": curve, "strictly_decreasing": curve.is_strictly_decreasing() }),
            )?;
        }
        Command::Density => {
            let seed = seed_point(&m, cfg)?;
            let est = estimate_pressure(&m, &p, seed, n_max, &trunc)?;
            let c = Arc::new(cloud(&m, cfg, seed)?);
            let h = cesaro_density(&m, c.clone(), &p, &trunc, est.value, cfg.density.n_terms)?;
            sink.csv("cloud.csv", |w| c.write_csv(w))?;
            sink.csv("density.csv", |w| h.h.write_csv(w))?;
            sink.json(
                "density.json",
                &json!({ "pressure": est.value, "summary": h.summary(), "band_r5": h.band(5.0) }),
            )?;
        }
        Command::Conformal => {
            let seed = seed_point(&m, cfg)?;
            let (nu, adj) = measures::conformal_pair(&m, seed, &p, n_max, &trunc)?;
            let fns = measures::default_test_fns();
            let mut summary = Vec::new();
            for (name, est) in [("nu_s", &nu), ("adjoint", &adj)] {
                let header = MeasureHeader {
                    provenance: est.measure.provenance,
                    tau: p.tau,
                    t: p.t,
                    pressure: est.measure.log_eigenvalue,
                    truncation: trunc,
                    atoms: est.measure.len(),
                    total_mass: est.measure.total_mass,
                    tail_certificate: est.tail_certificate,
                    notes: if est.stable {
                        Vec::new()
                    } else {
                        vec!["epsilon schedule did not reach the stability threshold".into()]
                    },
                };
                sink.csv(&format!("conformal_{name}.csv"), |w| {
                    est.measure.write_csv(w)
                })?;
                sink.json(&format!("conformal_{name}.json"), &header)?;
                let residual = measures::eigen_residual(&m, &est.measure, &p, &fns, &trunc)?;
                summary.push(json!({
                    "construction": name,
                    "eigen_residual": residual,
                    "schedule": est.schedule,
                    "stable": est.stable,
                }));
            }
            let agreement = measures::cross_check(&nu.measure, &adj.measure, &fns, 0.02)?;
            sink.json(
                "conformal.json",
                &json!({
                    "pressure": adj.pressure,
                    "pressure_error": adj.pressure_error,
                    "n_max": n_max,
                    "constructions": summary,
                    "agreement": agreement,
                }),
            )?;
        }
        Command::Gibbs { from } => return gibbs(&m, cfg, sink, from.as_deref()),
        Command::Verify => {
            let seed = seed_point(&m, cfg)?;
            let c = cloud(&m, cfg, seed)?;
            let mut reports = vec![preimage_oracle_check(
                &m,
                &[
                    Complex64::new(0.2, 0.0),
                    Complex64::new(1.0, 0.0),
                    Complex64::new(-3.0, 0.0),
                ],
                20.0,
                400,
                6,
            )?];
            reports.extend(run_all(&m, &c, &p, &trunc)?);
            for (i, r) in reports.iter().enumerate() {
                sink.json(&format!("verify/{i:02}_{}.json", r.lemma_id), r)?;
            }
            let verdicts: Vec<_> = reports
                .iter()
                .map(|r| json!({ "lemma_id": r.lemma_id, "verdict": r.verdict }))
                .collect();
            sink.json("verify.json", &verdicts)?;
        }
        Command::Dimension => {
            let seed = seed_point(&m, cfg)?;
            let floor = m.order / (p.tau - 1.0);
            let bracket = cfg
                .dimension
                .bracket
                .map(|[lo, hi]| (lo, hi))
                .unwrap_or((floor + DIMENSION_FLOOR_GAP, (floor + 2.0).max(p.t)));
            let rep =
                find_pressure_zero(&m, p.tau, bracket, cfg.dimension.tol, seed, n_max, &trunc)?;
            sink.json("dimension.json", &rep)?;
        }
    }
    Ok(Vec::new())
}

fn gibbs(
    m: &BkMapDescriptor,
    cfg: &RunConfig,
    sink: &mut Sink,
    from: Option<&Path>,
) -> Result<Vec<FileRecord>, CliError> {
    let p = cfg.params();
    let trunc = cfg.truncation();
    let dir = from
        .map(Path::to_path_buf)
        .unwrap_or_else(|| sink.dir.clone());
    let (cloud_path, r1) = require(&dir, "cloud.csv")?;
    let (density_path, r2) = require(&dir, "density.csv")?;
    let (measure_path, r3) = require(&dir, "conformal_adjoint.csv")?;
    let (header_path, r4) = require(&dir, "conformal_adjoint.json")?;
    let header: MeasureHeader =
        serde_json::from_reader(open(&header_path)?).map_err(Error::from)?;
    let c = Arc::new(JuliaCloud::read_csv(open(&cloud_path)?)?);
    let h = GridFunction::read_csv(c.clone(), open(&density_path)?)?;
    let mt = AtomicMeasure::read_csv(
        open(&measure_path)?,
        Provenance::AdjointPower,
        header.pressure,
    )?;
    let pressure = header.pressure.ok_or_else(|| {
        CliError::Numeric(Error::InvalidParams(
            "conformal_adjoint.json carries no pressure".into(),
        ))
    })?;

    let mu = measures::gibbs_from_density(&mt, &h)?;
    let fns = measures::default_test_fns();
    let inv_mu = measures::invariance_residual(m, &mu, &fns)?;
    let inv_mt = measures::invariance_residual(m, &mt, &fns)?;
    let q = measures::quasi_invariance_check(m, &mt, &cfg.gibbs.radii, &p, &trunc)?;
    let r_t = measures::knee_radius(&q).unwrap_or(*cfg.gibbs.radii.last().expect("validated"));
    let seed = seed_point(m, cfg)?;
    let max_n = cfg.gibbs.n_range.iter().copied().max().unwrap_or(0);
    let samples = measures::recurrent_samples(m, &[seed], r_t, max_n.max(2));
    let ratios = measures::gibbs_ratio(m, &mu, &h, &samples, &cfg.gibbs.n_range, &p, pressure)?;
    let iterated =
        measures::iterated_mass(m, &mt, c.clone(), r_t, cfg.gibbs.iterated_steps, &p, &trunc)?;
    let escaping: Vec<_> = cfg
        .gibbs
        .radii
        .iter()
        .map(|&r| Ok(json!({ "radius": r, "fraction": measures::escaping_fraction(m, &mt, r, trunc_depth(cfg))? })))
        .collect::<Result<_, CliError>>()?;
    let band = measures::ratio_band(&mu, &mt, r_t)?;

    sink.csv("gibbs_measure.csv", |w| mu.write_csv(w))?;
    sink.json(
        "gibbs.json",
        &json!({
            "pressure": pressure,
            "invariance_residual": inv_mu,
            "conformal_invariance_residual": inv_mt,
            "r_t": r_t,
            "ratio_band": band,
            "gibbs_ratios": ratios,
            "quasi_invariance": q,
            "iterated_mass": iterated,
            "escaping_fraction": escaping,
        }),
    )?;
    Ok(vec![r1, r2, r3, r4])
}

fn trunc_depth(cfg: &RunConfig) -> usize {
    cfg.truncation.n_max
}

fn fmt(x: f64) -> String {
    bk_thermo::cloud::fmt_f64(x)
}
