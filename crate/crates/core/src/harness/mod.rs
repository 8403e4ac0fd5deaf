//! Experiment runner: builds or loads a stream, runs every (method, seed)
//! unit, and writes scores, decision logs, checkpoints and CSV reports.
//!
//! Results layout:
//!
//! ```text
//! <output_dir>/
//!   config.txt  units.txt  report.csv  per_task.csv  timing.csv  [errors.log]
//!   <method>_seed<seed>/
//!     unit.txt  scores.bin  decisions.log  [static_matrix.csv]
//!     checkpoints/stage_001/ ...
//! ```

pub mod checkpoint;
pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use crate::baselines::{run_pool, stage_shuffle_seed, static_per_task_models, train_ewc, train_joint, train_sequential};
use crate::error::{OdexError, Result};
use crate::learner::Learner;
use crate::metrics::{
    build_score_tensor, dice, per_task_csv, reports_to_csv, reports_to_table, seed_average, summaries_to_table,
    timing_csv, MethodReport, MethodRun, ScoreTensor, Segmenter,
};
use crate::pool::ModelPool;
use crate::stream::{read_stream, Stream};

pub use checkpoint::{load_pool, load_scores, save_learner, save_pool, save_scores};
pub use config::{ExperimentConfig, Method};

/// CPU seconds consumed by this process so far.
pub fn process_cpu_seconds() -> f64 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: `ts` is a valid, exclusively borrowed timespec for the call.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_PROCESS_CPUTIME_ID, &mut ts) };
    if rc != 0 {
        return 0.0;
    }
    ts.tv_sec as f64 + ts.tv_nsec as f64 * 1e-9
}

/// Worker pool sized by `ODEX_THREADS` (unset or 0: one per core).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let n = match std::env::var("ODEX_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| OdexError::InvalidConfig(format!("ODEX_THREADS: cannot parse {v:?}")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| OdexError::InvalidConfig(format!("thread pool: {e}")))
}

pub fn unit_dir_name(method: Method, seed: u64) -> String {
    format!("{}_seed{seed}", method.name())
}

fn stage_dir(unit: &Path, stage_index: usize) -> PathBuf {
    unit.join("checkpoints").join(format!("stage_{stage_index:03}"))
}

/// What one finished unit produced.
#[derive(Clone, Debug)]
pub struct UnitOutcome {
    pub run: MethodRun,
    /// Pool size after each stage (pool methods only).
    pub pool_trace: Option<Vec<usize>>,
    /// Final pool (pool methods only).
    pub pool: Option<ModelPool>,
    /// `matrix[i][j]` for the static method.
    pub static_matrix: Option<Vec<Vec<f64>>>,
}

fn tensor_from(f0: &Learner, snapshots: &[&dyn Segmenter], stream: &Stream) -> Result<ScoreTensor> {
    let mut all: Vec<&dyn Segmenter> = vec![f0];
    all.extend_from_slice(snapshots);
    build_score_tensor(&all, &stream.test_sets())
}

/// Runs one method on one stream without touching the filesystem unless
/// `unit_dir` is given (then checkpoints are written there).
pub fn run_unit(
    method: Method,
    stream: &Stream,
    cfg: &ExperimentConfig,
    seed: u64,
    unit_dir: Option<&Path>,
) -> Result<UnitOutcome> {
    let lc = cfg.learner_for(seed);
    let scenario = stream.scenario.name();
    let f0 = Learner::new(&lc, seed)?;
    let start = process_cpu_seconds();
    let checkpoints = unit_dir.filter(|_| cfg.save_checkpoints);
    let mut pool_trace = None;
    let mut final_pool = None;
    let mut static_matrix = None;

    let scores = match method.strategy() {
        Some(strategy) => {
            let mut pool = ModelPool::new(lc.clone(), strategy)?;
            pool.eps_scale = cfg.eps_scale;
            let run = run_pool(pool, &stream.stages)?;
            if let Some(dir) = checkpoints {
                for (stage, snap) in stream.stages.iter().zip(&run.snapshots) {
                    save_pool(snap.pool(), &stage_dir(dir, stage.spec.stage_index), scenario, stage.spec.stage_index)?;
                }
            }
            let snaps: Vec<&dyn Segmenter> = run.snapshots.iter().map(|s| s as &dyn Segmenter).collect();
            let t = tensor_from(&f0, &snaps, stream)?;
            pool_trace = Some(run.pool_sizes);
            final_pool = Some(run.pool);
            t
        }
        None => match method {
            Method::Seq | Method::Ewc => {
                let learners = if method == Method::Seq {
                    train_sequential(&stream.stages, &lc)?
                } else {
                    train_ewc(&stream.stages, &lc, cfg.ewc_lambda)?
                };
                if let Some(dir) = checkpoints {
                    for (stage, l) in stream.stages.iter().zip(&learners) {
                        save_learner(l, &stage_dir(dir, stage.spec.stage_index), scenario, stage.spec.stage_index)?;
                    }
                }
                let snaps: Vec<&dyn Segmenter> = learners.iter().map(|l| l as &dyn Segmenter).collect();
                tensor_from(&f0, &snaps, stream)?
            }
            Method::Joint => {
                let joint = train_joint(&stream.stages, &lc)?;
                if let Some(dir) = checkpoints {
                    save_learner(&joint, &dir.join("checkpoints").join("final"), scenario, stream.n_stages())?;
                }
                // No intermediate states exist, so every row is the final model.
                let snaps: Vec<&dyn Segmenter> = vec![&joint; stream.n_stages()];
                tensor_from(&f0, &snaps, stream)?
            }
            Method::Static => {
                let models = static_per_task_models(&stream.stages, &lc)?;
                if let Some(dir) = checkpoints {
                    for (stage, l) in stream.stages.iter().zip(&models) {
                        save_learner(l, &stage_dir(dir, stage.spec.stage_index), scenario, stage.spec.stage_index)?;
                    }
                }
                let (t, matrix) = static_tensor(&f0, &models, stream)?;
                static_matrix = Some(matrix);
                t
            }
            _ => unreachable!("pool methods handled above"),
        },
    };

    Ok(UnitOutcome {
        run: MethodRun {
            method: method.name().to_string(),
            scenario: scenario.to_string(),
            seed,
            scores,
            pool_size: pool_trace.as_ref().and_then(|t| t.last().copied()),
            cpu_seconds: process_cpu_seconds() - start,
        },
        pool_trace,
        pool: final_pool,
        static_matrix,
    })
}

/// Score tensor of the task-aware static ensemble: after stage `i`, task `j`
/// is served by the model trained on stage `min(i, j)`. Also returns the
/// cross-evaluation matrix.
fn static_tensor(f0: &Learner, models: &[Learner], stream: &Stream) -> Result<(ScoreTensor, Vec<Vec<f64>>)> {
    let tests = stream.test_sets();
    let snaps: Vec<&dyn Segmenter> = models.iter().map(|l| l as &dyn Segmenter).collect();
    // cross[m][j] holds per-sample Dice of model m on task j.
    let cross = build_score_tensor(&snaps, &tests)?;
    let n = models.len();
    let row0 = tests
        .iter()
        .map(|t| t.iter().map(|s| dice(&f0.segment(&s.image)?, &s.mask)).collect())
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let mut dice_rows = vec![row0];
    for i in 0..n {
        dice_rows.push((0..n).map(|j| cross.dice[i.min(j)][j].clone()).collect());
    }
    let matrix = cross
        .dice
        .iter()
        .map(|row| row.iter().map(|t| crate::metrics::mean(t)).collect())
        .collect();
    Ok((ScoreTensor { dice: dice_rows }, matrix))
}

fn load_or_build_stream(cfg: &ExperimentConfig, seed: u64) -> Result<Stream> {
    match &cfg.stream_dir {
        Some(dir) => read_stream(dir),
        None => Stream::build(
            cfg.scenario,
            cfg.n_stages,
            cfg.samples_per_stage,
            cfg.test_per_stage,
            cfg.image_size,
            seed,
        ),
    }
}

fn write_unit_files(dir: &Path, outcome: &UnitOutcome) -> Result<()> {
    let run = &outcome.run;
    save_scores(&run.scores, &dir.join("scores.bin"))?;
    let trace = outcome
        .pool_trace
        .as_ref()
        .map(|t| t.iter().map(usize::to_string).collect::<Vec<_>>().join(","))
        .unwrap_or_default();
    let mut log = format!("# method={} seed={} pool_trace={trace}\n", run.method, run.seed);
    if let Some(pool) = &outcome.pool {
        for d in &pool.decisions {
            log.push_str(&d.to_string());
            log.push('\n');
        }
    }
    fs::write(dir.join("decisions.log"), log)?;
    if let Some(m) = &outcome.static_matrix {
        let mut csv = String::from("trained_on");
        for j in 1..=m.len() {
            csv.push_str(&format!(",task_{j}"));
        }
        csv.push('\n');
        for (i, row) in m.iter().enumerate() {
            csv.push_str(&format!("stage_{}", i + 1));
            for v in row {
                csv.push_str(&format!(",{v:.6}"));
            }
            csv.push('\n');
        }
        fs::write(dir.join("static_matrix.csv"), csv)?;
    }
    let unit = format!(
        "method = {}\nscenario = {}\nseed = {}\nstatus = ok\npool_size = {}\npool_trace = {trace}\ncpu_seconds = {:?}\n",
        run.method,
        run.scenario,
        run.seed,
        run.pool_size.map(|p| p.to_string()).unwrap_or_default(),
        run.cpu_seconds
    );
    fs::write(dir.join("unit.txt"), unit)?;
    Ok(())
}

fn write_failed_unit(dir: &Path, method: Method, scenario: &str, seed: u64, err: &OdexError) -> Result<()> {
    fs::create_dir_all(dir)?;
    let unit = format!(
        "method = {}\nscenario = {scenario}\nseed = {seed}\nstatus = failed\nerror = {}\n",
        method.name(),
        err.to_string().replace('\n', " ")
    );
    fs::write(dir.join("unit.txt"), unit)?;
    Ok(())
}

/// Runs every (method, seed) unit and writes the results tree. A failing
/// unit is recorded in `errors.log` and as a NaN row; the others proceed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), cfg.to_kv_text())?;
    let workers = thread_pool()?;
    let mut units = Vec::new();
    let mut errors = String::new();
    for &seed in &cfg.seeds {
        let stream = match load_or_build_stream(cfg, seed) {
            Ok(s) => s,
            Err(e) => {
                errors.push_str(&format!("stream seed={seed}: {e}\n"));
                for &m in &cfg.methods {
                    let name = unit_dir_name(m, seed);
                    write_failed_unit(&out.join(&name), m, cfg.scenario.name(), seed, &e)?;
                    units.push(name);
                }
                continue;
            }
        };
        for &method in &cfg.methods {
            let name = unit_dir_name(method, seed);
            let dir = out.join(&name);
            if dir.exists() {
                fs::remove_dir_all(&dir)?;
            }
            fs::create_dir_all(&dir)?;
            let result = workers
                .install(|| run_unit(method, &stream, cfg, seed, Some(&dir)))
                .and_then(|o| write_unit_files(&dir, &o));
            if let Err(e) = result {
                errors.push_str(&format!("{name}: {e}\n"));
                write_failed_unit(&dir, method, stream.scenario.name(), seed, &e)?;
            }
            units.push(name);
        }
    }
    fs::write(out.join("units.txt"), units.join("\n") + "\n")?;
    let errors_path = out.join("errors.log");
    if errors.is_empty() {
        if errors_path.exists() {
            fs::remove_file(&errors_path)?;
        }
    } else {
        fs::write(&errors_path, errors)?;
    }
    report(out)
}

/// Reports rebuilt from a results directory.
#[derive(Clone, Debug)]
pub struct Report {
    pub reports: Vec<MethodReport>,
    /// Per-seed table followed by the seed-averaged table.
    pub table: String,
}

fn read_kv(path: &Path) -> Result<Vec<(String, String)>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .filter_map(|l| l.split_once('=').map(|(k, v)| (k.trim().to_string(), v.trim().to_string())))
        .collect())
}

fn unit_names(dir: &Path) -> Result<Vec<String>> {
    if let Ok(text) = fs::read_to_string(dir.join("units.txt")) {
        return Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect());
    }
    let mut names = Vec::new();
    if let Ok(read) = fs::read_dir(dir) {
        for e in read.flatten() {
            if e.path().join("unit.txt").is_file() {
                names.push(e.file_name().to_string_lossy().into_owned());
            }
        }
    }
    names.sort();
    Ok(names)
}

/// Rebuilds every unit's report from disk, rewrites `report.csv`,
/// `per_task.csv` and `timing.csv`, and returns the text tables.
pub fn report(dir: &Path) -> Result<Report> {
    let names = unit_names(dir)?;
    if names.is_empty() {
        return Err(OdexError::MissingResults(dir.to_path_buf()));
    }
    let mut reports = Vec::with_capacity(names.len());
    for name in names {
        let unit_dir = dir.join(&name);
        let kv = read_kv(&unit_dir.join("unit.txt"))?;
        let get = |k: &str| kv.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str()).unwrap_or("");
        let seed: u64 = get("seed").parse().map_err(|_| OdexError::CorruptCheckpoint {
            path: unit_dir.join("unit.txt"),
            message: "bad seed".into(),
        })?;
        if get("status") != "ok" {
            reports.push(MethodReport::failed(get("method"), get("scenario"), seed));
            continue;
        }
        let run = MethodRun {
            method: get("method").to_string(),
            scenario: get("scenario").to_string(),
            seed,
            scores: load_scores(&unit_dir.join("scores.bin"))?,
            pool_size: get("pool_size").parse().ok(),
            cpu_seconds: get("cpu_seconds").parse().unwrap_or(f64::NAN),
        };
        reports.push(MethodReport::from_run(&run)?);
    }
    fs::write(dir.join("report.csv"), reports_to_csv(&reports))?;
    fs::write(dir.join("per_task.csv"), per_task_csv(&reports))?;
    fs::write(dir.join("timing.csv"), timing_csv(&reports))?;
    let table = format!(
        "{}\n{}",
        reports_to_table(&reports),
        summaries_to_table(&seed_average(&reports))
    );
    Ok(Report { reports, table })
}

/// Human-readable summary of a checkpoint directory.
pub fn inspect_pool(dir: &Path) -> Result<String> {
    let manifest = checkpoint::read_manifest(dir)?;
    let pool = load_pool(dir)?;
    let mut out = format!(
        "strategy {}  stage {}  entries {}  channels {}\n",
        pool.strategy.name(),
        manifest.get("stage_reached").unwrap_or("?"),
        pool.len(),
        pool.config.channels
    );
    for e in &pool.entries {
        let stages: Vec<String> = e.stages_trained.iter().map(usize::to_string).collect();
        out.push_str(&format!(
            "model {}  parent {}  history {}  stages [{}]  xi {}  last train dice {:.4}\n",
            e.model_id,
            e.parent,
            e.history.len(),
            stages.join(","),
            e.calibration.map(|c| format!("{:.6}", c.xi)).unwrap_or_else(|| "-".into()),
            e.last_stage_train_dice
        ));
    }
    Ok(out)
}

/// Shuffle seed a single learner uses on `stage_index`.
pub fn learner_stage_seed(seed: u64, stage_index: usize) -> u64 {
    stage_shuffle_seed(seed, stage_index, 1)
}
