//! Seeded sweeps over sample size and attribute strength.
//!
//! A job is one (grid point, seed index) pair. It samples a training set
//! under the behavior policy, fits the mean model and marginals, preprocesses,
//! trains every requested method and evaluates each one with a shared
//! evaluation stream. Jobs run in a worker pool, but rows reach
//! `results.csv` in canonical order (grid point, then seed, then method), so
//! the file's bytes do not depend on scheduling. Because the file is always a
//! canonical prefix, an interrupted sweep resumes by skipping the cells it
//! already holds.

use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cmdp::{sample_dataset, CmdpSpec, EnvKind};
use crate::error::{arg_err, Error, Result};
use crate::evaluation::{evaluate, EvalConfig};
use crate::policy::{train_baseline, FqiConfig, Method, TrainInputs};
use crate::preprocess::{estimate_marginals, fit_transition_mean, preprocess_with, MeanModelConfig};
use crate::rng::derive_seed;

pub const RESULTS_FILE: &str = "results.csv";
pub const ERRORS_FILE: &str = "errors.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
const RESULTS_HEADER: &str = "method,env,delta,n,seed,cf_metric,mean_return,stderr_return";
const ERRORS_HEADER: &str = "method,env,delta,n,seed,kind,message";
const TIMINGS_HEADER: &str = "method,env,delta,n,seed,wall_time_s";

/// Environment variable capping the worker pool.
pub const THREADS_VAR: &str = "CFRL_THREADS";

/// How `delta_grid` and `n_grid` combine into grid points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GridMode {
    /// Every `(delta, n)` pair.
    Product,
    /// An N-sweep at `delta` plus a delta-sweep at `n`.
    Sweeps { delta: f64, n: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvKind,
    pub delta_grid: Vec<f64>,
    pub n_grid: Vec<usize>,
    pub grid: GridMode,
    pub train_horizon: usize,
    pub methods: Vec<Method>,
    pub seeds: usize,
    pub eval: EvalConfig,
    pub mean_model: MeanModelConfig,
    pub fqi: FqiConfig,
    pub reward_noise_sd: f64,
    pub master_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: EnvKind::Linear,
            delta_grid: vec![0.0, 0.5, 1.0, 1.5, 2.0],
            n_grid: vec![100, 200, 500, 1000, 2000],
            grid: GridMode::Sweeps { delta: 1.0, n: 1000 },
            train_horizon: 10,
            methods: Method::ALL.to_vec(),
            seeds: 100,
            eval: EvalConfig::default(),
            mean_model: MeanModelConfig::default(),
            fqi: FqiConfig::default(),
            reward_noise_sd: 0.0,
            master_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub delta: f64,
    pub n: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delta_grid.is_empty() || self.n_grid.is_empty() {
            return arg_err("delta_grid and n_grid must be nonempty");
        }
        if self.seeds == 0 {
            return arg_err("seeds must be at least 1");
        }
        if self.methods.is_empty() {
            return arg_err("methods must be nonempty");
        }
        if self.train_horizon == 0 || self.n_grid.contains(&0) {
            return arg_err("train_horizon and every n must be positive");
        }
        if self.delta_grid.iter().any(|d| !d.is_finite()) {
            return arg_err("delta values must be finite");
        }
        Ok(())
    }

    /// Grid points in canonical order, duplicates removed.
    pub fn grid_points(&self) -> Vec<GridPoint> {
        let mut points = Vec::new();
        match self.grid {
            GridMode::Product => {
                for &delta in &self.delta_grid {
                    for &n in &self.n_grid {
                        points.push(GridPoint { delta, n });
                    }
                }
            }
            GridMode::Sweeps { delta, n } => {
                points.extend(self.n_grid.iter().map(|&n| GridPoint { delta, n }));
                points.extend(self.delta_grid.iter().map(|&delta| GridPoint { delta, n }));
            }
        }
        let mut seen = HashSet::new();
        points.retain(|p| seen.insert((p.delta.to_bits(), p.n)));
        points
    }

    fn methods_dedup(&self) -> Vec<Method> {
        let mut seen = HashSet::new();
        self.methods.iter().copied().filter(|m| seen.insert(*m)).collect()
    }
}

/// One evaluated (method, grid point, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: Method,
    pub env: EnvKind,
    pub delta: f64,
    pub n: usize,
    pub seed: usize,
    pub cf_metric: f64,
    pub mean_return: f64,
    pub stderr_return: f64,
}

impl ResultRow {
    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}\n",
            self.method, self.env, self.delta, self.n, self.seed, self.cf_metric, self.mean_return, self.stderr_return
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellFailure {
    pub method: Method,
    pub point: GridPoint,
    pub seed: usize,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
    pub failures: Vec<CellFailure>,
}

/// Stage tags for seed derivation.
mod stage {
    pub const SAMPLE: u64 = 11;
    pub const FIT: u64 = 12;
    pub const TRAIN: u64 = 13;
    pub const EVAL: u64 = 14;
}

fn env_code(kind: EnvKind) -> u64 {
    match kind {
        EnvKind::Linear => 0,
        EnvKind::Nonlinear => 1,
    }
}

/// Seed of stage `stage` for seed index `k` at the given grid point. Sample
/// and eval streams ignore `n`, so training sets are nested across sample
/// sizes and every method and sample size is scored on the same subjects.
fn stage_seed(config: &ExperimentConfig, point: GridPoint, k: usize, stage_tag: u64) -> u64 {
    let n = match stage_tag {
        stage::SAMPLE | stage::EVAL => u64::MAX,
        _ => point.n as u64,
    };
    derive_seed(&[config.master_seed, env_code(config.env), point.delta.to_bits(), n, k as u64, stage_tag])
}

/// Failure as (error kind, message); errors are not `Clone`, and one setup
/// failure may be reported for several cells.
type CellResult = std::result::Result<ResultRow, (String, String)>;

struct CellOutcome {
    method: Method,
    result: CellResult,
    wall_time: f64,
}

fn describe(e: &Error) -> (String, String) {
    (e.kind().to_string(), e.to_string())
}

fn run_job(config: &ExperimentConfig, point: GridPoint, k: usize, methods: &[Method]) -> Vec<CellOutcome> {
    let started = Instant::now();
    let env = CmdpSpec::new(config.env, point.delta).with_reward_noise(config.reward_noise_sd);
    let data = match sample_dataset(&env, point.n, config.train_horizon, stage_seed(config, point, k, stage::SAMPLE)) {
        Ok(data) => data,
        Err(e) => {
            let wall_time = started.elapsed().as_secs_f64();
            return methods.iter().map(|&method| CellOutcome { method, result: Err(describe(&e)), wall_time }).collect();
        }
    };
    // Only the proposed method needs the fitted mean model.
    let fitted = methods.contains(&Method::Ours).then(|| {
        let mut mm = config.mean_model.clone();
        if let MeanModelConfig::Mlp { train, .. } = &mut mm {
            train.seed = stage_seed(config, point, k, stage::FIT);
        }
        let mean_model = fit_transition_mean(&data, &mm)?;
        let marginals = estimate_marginals(&data)?;
        let pre = preprocess_with(&data, &mean_model, &marginals)?;
        Ok::<_, Error>((mean_model, pre))
    });
    let setup_time = started.elapsed().as_secs_f64();
    let eval = EvalConfig { seed: stage_seed(config, point, k, stage::EVAL), ..config.eval.clone() };
    methods
        .iter()
        .map(|&method| {
            let t0 = Instant::now();
            let result = (|| {
                let (mean_model, preprocessed) = match (&fitted, method) {
                    (Some(Err(e)), Method::Ours) => return Err(describe(e)),
                    (Some(Ok((mm, pre))), _) => (Some(mm), Some(pre)),
                    _ => (None, None),
                };
                let fqi = FqiConfig {
                    seed: derive_seed(&[stage_seed(config, point, k, stage::TRAIN), method as u64]),
                    ..config.fqi.clone()
                };
                let inputs = TrainInputs { env: Some(&env), preprocessed, mean_model };
                let policy = train_baseline(method, &data, inputs, &fqi).map_err(|e| describe(&e))?;
                let report = evaluate(&policy, &env, &eval).map_err(|e| describe(&e))?;
                Ok(ResultRow {
                    method,
                    env: config.env,
                    delta: point.delta,
                    n: point.n,
                    seed: k,
                    cf_metric: report.cf_metric,
                    mean_return: report.mean_return,
                    stderr_return: report.stderr_return,
                })
            })();
            CellOutcome { method, result, wall_time: t0.elapsed().as_secs_f64() + setup_time / methods.len() as f64 }
        })
        .collect()
}

/// Canonical cell key: (grid point index, seed index, method position).
type CellKey = (usize, usize, usize);

fn escape(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\"").replace('\n', " "))
    } else {
        field.to_string()
    }
}

/// Complete lines of `path` after the header, dropping a torn trailing line.
/// Rewrites the file without the torn line and returns the kept lines.
fn recover_lines(path: &Path, header: &str) -> Result<Vec<String>> {
    if !path.exists() {
        let mut f = File::create(path)?;
        writeln!(f, "{header}")?;
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path)?;
    let complete = match text.rfind('\n') {
        Some(end) => &text[..=end],
        None => "",
    };
    let mut lines = complete.lines();
    match lines.next() {
        Some(h) if h == header => {}
        None => {}
        Some(other) => return arg_err(format!("{} has unexpected header `{other}`", path.display())),
    }
    let kept: Vec<String> = lines.map(str::to_string).collect();
    if complete.len() != text.len() || complete.is_empty() {
        let mut f = File::create(path)?;
        writeln!(f, "{header}")?;
        for l in &kept {
            writeln!(f, "{l}")?;
        }
    }
    Ok(kept)
}

fn parse_row(line: &str) -> Result<ResultRow> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(line.as_bytes());
    let record = reader
        .records()
        .next()
        .ok_or_else(|| Error::Argument(format!("empty results line `{line}`")))??;
    let headers = csv::StringRecord::from(RESULTS_HEADER.split(',').collect::<Vec<_>>());
    Ok(record.deserialize(Some(&headers))?)
}

/// Reads a `results.csv` written by [`run_experiment`].
pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    for col in RESULTS_HEADER.split(',') {
        if !headers.iter().any(|h| h == col) {
            return arg_err(format!("results table is missing column `{col}`"));
        }
    }
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}

struct OrderedSink {
    next: usize,
    pending: BTreeMap<usize, Vec<CellOutcome>>,
    results: File,
    errors: File,
    timings: File,
    table: ResultTable,
}

fn open_append(path: &Path) -> Result<File> {
    Ok(OpenOptions::new().append(true).open(path)?)
}

/// Runs the sweep, writing `results.csv`, `errors.csv` and `timings.csv`
/// under `out_dir`. Completed cells found there are not recomputed; the
/// returned table holds every row in the final file.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<ResultTable> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let points = config.grid_points();
    let methods = config.methods_dedup();
    let key_of = |method: Method, delta: f64, n: usize, seed: usize| -> Option<CellKey> {
        let g = points.iter().position(|p| p.delta.to_bits() == delta.to_bits() && p.n == n)?;
        let m = methods.iter().position(|&x| x == method)?;
        (seed < config.seeds).then_some((g, seed, m))
    };

    let results_path: PathBuf = out_dir.join(RESULTS_FILE);
    let errors_path = out_dir.join(ERRORS_FILE);
    let timings_path = out_dir.join(TIMINGS_FILE);
    let mut done: HashSet<CellKey> = HashSet::new();
    let mut table = ResultTable::default();
    for line in recover_lines(&results_path, RESULTS_HEADER)? {
        let row = parse_row(&line)?;
        let key = key_of(row.method, row.delta, row.n, row.seed).ok_or_else(|| {
            Error::Argument(format!("{} holds a row outside this configuration: `{line}`", results_path.display()))
        })?;
        done.insert(key);
        table.rows.push(row);
    }
    for line in recover_lines(&errors_path, ERRORS_HEADER)? {
        let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(line.as_bytes());
        if let Some(Ok(rec)) = reader.records().next() {
            let parsed = (rec[0].parse::<Method>(), rec[2].parse::<f64>(), rec[3].parse::<usize>(), rec[4].parse::<usize>());
            if let (Ok(method), Ok(delta), Ok(n), Ok(seed)) = parsed {
                if let Some(key) = key_of(method, delta, n, seed) {
                    done.insert(key);
                    table.failures.push(CellFailure {
                        method,
                        point: GridPoint { delta, n },
                        seed,
                        kind: rec[5].to_string(),
                        message: rec[6].to_string(),
                    });
                }
            }
        }
    }
    recover_lines(&timings_path, TIMINGS_HEADER)?;

    let jobs: Vec<(usize, usize, Vec<Method>)> = (0..points.len())
        .flat_map(|g| (0..config.seeds).map(move |k| (g, k)))
        .filter_map(|(g, k)| {
            let todo: Vec<Method> =
                methods.iter().enumerate().filter(|(m, _)| !done.contains(&(g, k, *m))).map(|(_, &x)| x).collect();
            (!todo.is_empty()).then_some((g, k, todo))
        })
        .collect();
    if !done.is_empty() {
        info!("resuming: {} cells already present, {} jobs to run", done.len(), jobs.len());
    }

    let sink = Mutex::new(OrderedSink {
        next: 0,
        pending: BTreeMap::new(),
        results: open_append(&results_path)?,
        errors: open_append(&errors_path)?,
        timings: open_append(&timings_path)?,
        table,
    });
    let write_error: Mutex<Option<Error>> = Mutex::new(None);

    let work = || {
        jobs.par_iter().enumerate().for_each(|(idx, (g, k, todo))| {
            let outcomes = run_job(config, points[*g], *k, todo);
            let mut sink = sink.lock().expect("sink lock");
            sink.pending.insert(idx, outcomes);
            while let Some(ready) = {
                let next = sink.next;
                sink.pending.remove(&next)
            } {
                let (g, k) = (jobs[sink.next].0, jobs[sink.next].1);
                if let Err(e) = flush_job(&mut sink, config, points[g], k, ready) {
                    write_error.lock().expect("error lock").get_or_insert(e);
                }
                sink.next += 1;
            }
        })
    };
    match std::env::var(THREADS_VAR).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(threads) if threads > 0 => rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Argument(format!("cannot build a {threads}-thread pool: {e}")))?
            .install(work),
        _ => work(),
    }
    if let Some(e) = write_error.into_inner().expect("error lock") {
        return Err(e);
    }
    let mut table = sink.into_inner().expect("sink lock").table;
    let order = |method: Method, delta: f64, n: usize, seed: usize| key_of(method, delta, n, seed);
    table.rows.sort_by_key(|r| order(r.method, r.delta, r.n, r.seed));
    table.failures.sort_by_key(|f| order(f.method, f.point.delta, f.point.n, f.seed));
    Ok(table)
}

fn flush_job(sink: &mut OrderedSink, config: &ExperimentConfig, point: GridPoint, k: usize, outcomes: Vec<CellOutcome>) -> Result<()> {
    let mut rows = String::new();
    let mut errors = String::new();
    let mut timings = String::new();
    for cell in outcomes {
        let prefix = format!("{},{},{},{},{}", cell.method, config.env, point.delta, point.n, k);
        timings.push_str(&format!("{prefix},{:.6}\n", cell.wall_time));
        match cell.result {
            Ok(row) => {
                rows.push_str(&row.csv_line());
                sink.table.rows.push(row);
            }
            Err((kind, message)) => {
                warn!("cell {prefix} failed: {kind}: {message}");
                errors.push_str(&format!("{prefix},{},{}\n", escape(&kind), escape(&message)));
                sink.table.failures.push(CellFailure { method: cell.method, point, seed: k, kind, message });
            }
        }
    }
    sink.results.write_all(rows.as_bytes())?;
    sink.results.flush()?;
    sink.errors.write_all(errors.as_bytes())?;
    sink.errors.flush()?;
    sink.timings.write_all(timings.as_bytes())?;
    Ok(())
}
