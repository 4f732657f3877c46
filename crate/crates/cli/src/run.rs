//! `run`: build the task stream, execute the selected mode and write the run
//! directory.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use grownet::data::{
    downsample, load_mnist, make_permuted_tasks, make_split_tasks, make_synthetic_tasks, split,
    HeadMode, TaskData,
};
use grownet::jointnet::Architecture;
use grownet::search::{
    mock_search, pareto_front, trial_seed, write_series_csv, write_trials_csv, Experiment,
    GrowSequence, TrialResult,
};
use grownet::TaskId;

use crate::config::{ArchPreset, BenchmarkKind, RunConfig, SearchMode};
use crate::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const RESULTS: &str = "results.json";
pub const TRIALS_CSV: &str = "trials.csv";
pub const PARETO_CSV: &str = "pareto.csv";
pub const SERIES_CSV: &str = "series.csv";
pub const TABULAR: &str = "jointnet.txt";
pub const EVENTS: &str = "events.log";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const CONFIG_COPY: &str = "config.toml";

const MNIST_SIDE: usize = 28;
const MNIST_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
}

/// Self-description of a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub seed: u64,
    /// SHA-256 of every data file read.
    pub data_files: BTreeMap<String, String>,
    pub started_unix_s: u64,
    pub finished_unix_s: Option<u64>,
    pub status: RunStatus,
    pub error: Option<String>,
    /// Trial whose network is stored in `jointnet.txt` and `checkpoint.bin`.
    pub representative_trial: Option<usize>,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| CliError::RunDir {
            dir: dir.to_path_buf(),
            reason: format!("cannot read {MANIFEST}: {e}"),
        })?;
        serde_json::from_str(&text).map_err(|e| CliError::RunDir {
            dir: dir.to_path_buf(),
            reason: format!("corrupt {MANIFEST}: {e}"),
        })
    }

    fn write(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join(MANIFEST);
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, json + "\n").map_err(|e| CliError::io(path, e))
    }
}

/// Everything a report needs besides the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResults {
    pub task_ids: Vec<TaskId>,
    pub trials: Vec<TrialResult>,
    /// Indices into `trials` of the non-dominated set.
    pub front: Vec<usize>,
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

/// Locate an IDX file, gzipped or not.
fn find_idx(dir: &Path, stem: &str) -> Result<PathBuf, CliError> {
    for name in [format!("{stem}.gz"), stem.to_string()] {
        let p = dir.join(name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(CliError::Run(format!(
        "{stem}[.gz] not found in {} (scripts/fetch_mnist.sh downloads it)",
        dir.display()
    )))
}

/// A benchmark ready for an [`Experiment`], with hashes of the files read.
pub struct Stream {
    pub tasks: Vec<TaskData>,
    pub arch: Architecture,
    pub head_mode: HeadMode,
    pub data_files: BTreeMap<String, String>,
}

pub fn build_stream(cfg: &RunConfig) -> Result<Stream, CliError> {
    let b = &cfg.benchmark;
    let mut data_files = BTreeMap::new();
    let (mut tasks, input_dim, side, classes, head_mode) = match b.kind {
        BenchmarkKind::Permuted | BenchmarkKind::Split => {
            let images = find_idx(&b.data_dir, "train-images-idx3-ubyte")?;
            let labels = find_idx(&b.data_dir, "train-labels-idx1-ubyte")?;
            for p in [&images, &labels] {
                let name = p
                    .file_name()
                    .map_or_else(String::new, |n| n.to_string_lossy().into_owned());
                data_files.insert(name, sha256_file(p)?);
            }
            let (ds, (rows, cols)) = load_mnist(&images, &labels)?;
            if (rows, cols) != (MNIST_SIDE, MNIST_SIDE) {
                return Err(CliError::Run(format!(
                    "expected 28x28 images, found {rows}x{cols}"
                )));
            }
            let ds = match b.pool {
                Some(n) => ds.truncate(n),
                None => ds,
            };
            let ds = downsample(&ds, rows, cols, b.downsample)?;
            let side = MNIST_SIDE / b.downsample;
            let splits = split(&ds, b.split, cfg.seed)?;
            if b.kind == BenchmarkKind::Permuted {
                let tasks = make_permuted_tasks(&splits, b.task_count, cfg.seed)?;
                (tasks, side * side, side, MNIST_CLASSES, HeadMode::Shared)
            } else {
                let tasks = make_split_tasks(&splits, b.task_count)?;
                let k = MNIST_CLASSES / b.task_count;
                (tasks, side * side, side, k, HeadMode::PerTask)
            }
        }
        BenchmarkKind::Synthetic => {
            let gen = b.synthetic.generator(cfg.seed, b.split);
            let tasks = make_synthetic_tasks(&gen)?;
            (tasks, gen.dim, 0, gen.clusters, HeadMode::PerTask)
        }
    };
    if let Some(order) = &cfg.search.task_order {
        let mut by_id: BTreeMap<TaskId, TaskData> =
            tasks.into_iter().map(|t| (t.id(), t)).collect();
        tasks = order
            .iter()
            .map(|id| by_id.remove(id).expect("order validated against task ids"))
            .collect();
    }
    let arch = match cfg.model.preset {
        ArchPreset::Mlp => Architecture::mlp(input_dim, &cfg.model.hidden, classes),
        ArchPreset::Convnet => Architecture::small_convnet(side, classes),
    };
    arch.validate()?;
    Ok(Stream {
        tasks,
        arch,
        head_mode,
        data_files,
    })
}

/// Train the independent baselines of a stream.
pub fn build_experiment(cfg: &RunConfig, stream: Stream) -> Result<Experiment, CliError> {
    Ok(Experiment::new(
        stream.arch,
        stream.head_mode,
        stream.tasks,
        cfg.step_options(),
        cfg.candidates(),
    )?)
}

/// Trials of the configured mode. `exp` is unused in mock mode.
pub fn run_mode(cfg: &RunConfig, exp: Option<&Experiment>) -> Result<RunResults, CliError> {
    let s = &cfg.search;
    if s.mode == SearchMode::Mock {
        let genome = if s.shared_delta {
            1
        } else {
            cfg.benchmark.task_count
        };
        let (trials, front) = mock_search(&cfg.nsga2(), genome)?;
        return Ok(RunResults {
            task_ids: Vec::new(),
            trials,
            front,
        });
    }
    let exp = exp.ok_or_else(|| CliError::Run("mode needs a trained experiment".into()))?;
    let order = exp.task_ids();
    let (trials, front) = match s.mode {
        SearchMode::Single => {
            let seq = match &s.deltas {
                Some(d) => GrowSequence::per_task(&order, d, s.bind, false),
                None => GrowSequence::shared(&order, s.delta, s.bind),
            };
            let t = exp.run_grow_sequence(&seq, 0, trial_seed(cfg.seed, 0))?;
            let trials = vec![t];
            let front = pareto_front(&trials);
            (trials, front)
        }
        SearchMode::Grid => {
            let trials = exp.grid_sweep(&s.grid, s.bind, cfg.seed)?;
            let front = pareto_front(&trials);
            (trials, front)
        }
        SearchMode::Random => {
            let trials = exp.random_growth_sweep(s.trials, cfg.seed);
            let front = pareto_front(&trials);
            (trials, front)
        }
        SearchMode::Nsga2 => exp.nsga2_search(&cfg.nsga2(), s.bind)?,
        SearchMode::Mock => unreachable!("handled above"),
    };
    let mut task_ids = order;
    task_ids.sort_unstable();
    Ok(RunResults {
        task_ids,
        trials,
        front,
    })
}

/// Front member with the highest signed gain (lowest trial id on ties);
/// any successful trial when the front is empty.
pub fn representative(results: &RunResults) -> Option<usize> {
    let pool: Vec<usize> = if results.front.is_empty() {
        (0..results.trials.len())
            .filter(|&i| results.trials[i].is_ok())
            .collect()
    } else {
        results.front.clone()
    };
    pool.into_iter().reduce(|best, i| {
        let (a, b) = (&results.trials[best], &results.trials[i]);
        if b.gain_signed > a.gain_signed
            || (b.gain_signed == a.gain_signed && b.trial_id < a.trial_id)
        {
            i
        } else {
            best
        }
    })
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    let path = dir.join(name);
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn finish(dir: &Path, name: &str, mut w: BufWriter<File>) -> Result<(), CliError> {
    w.flush().map_err(|e| CliError::io(dir.join(name), e))
}

fn write_outputs(
    cfg: &RunConfig,
    dir: &Path,
    results: &RunResults,
    rep: Option<usize>,
) -> Result<(), CliError> {
    let ids = &results.task_ids;
    let mut w = create(dir, TRIALS_CSV)?;
    write_trials_csv(&mut w, ids, &results.trials)?;
    finish(dir, TRIALS_CSV, w)?;

    if cfg.search.mode != SearchMode::Single {
        let mut w = create(dir, PARETO_CSV)?;
        write_trials_csv(
            &mut w,
            ids,
            results.front.iter().map(|&i| &results.trials[i]),
        )?;
        finish(dir, PARETO_CSV, w)?;
    }

    let mut w = create(dir, SERIES_CSV)?;
    write_series_csv(&mut w, &results.trials)?;
    finish(dir, SERIES_CSV, w)?;

    let mut w = create(dir, EVENTS)?;
    for t in &results.trials {
        let deltas: Vec<String> = t.deltas.iter().map(|d| d.to_string()).collect();
        writeln!(
            w,
            "trial {} kind={:?} seed={} deltas=[{}]",
            t.trial_id,
            t.kind,
            t.seed,
            deltas.join(",")
        )
        .and_then(|()| t.events.iter().try_for_each(|e| writeln!(w, "  {e}")))
        .map_err(|e| CliError::io(dir.join(EVENTS), e))?;
    }
    finish(dir, EVENTS, w)?;

    if let Some(i) = rep {
        let t = &results.trials[i];
        if let Some(net) = &t.net {
            fs::write(dir.join(TABULAR), &t.tabular)
                .map_err(|e| CliError::io(dir.join(TABULAR), e))?;
            let mut w = create(dir, CHECKPOINT)?;
            net.write_checkpoint(&mut w)?;
            finish(dir, CHECKPOINT, w)?;
        }
    }

    let json = serde_json::to_string(results).expect("results serialize");
    fs::write(dir.join(RESULTS), json).map_err(|e| CliError::io(dir.join(RESULTS), e))
}

/// Execute a validated config into `dir`. The manifest is written before
/// any data is read and finalized on success and on failure.
pub fn execute(cfg: &RunConfig, dir: &Path) -> Result<RunResults, CliError> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: cfg.hash(),
        config: cfg.clone(),
        seed: cfg.seed,
        data_files: BTreeMap::new(),
        started_unix_s: now_unix(),
        finished_unix_s: None,
        status: RunStatus::Running,
        error: None,
        representative_trial: None,
    };
    manifest.write(dir)?;
    fs::write(dir.join(CONFIG_COPY), cfg.to_toml())
        .map_err(|e| CliError::io(dir.join(CONFIG_COPY), e))?;

    let outcome = (|| -> Result<RunResults, CliError> {
        let exp = if cfg.search.mode == SearchMode::Mock {
            None
        } else {
            let stream = build_stream(cfg)?;
            manifest.data_files = stream.data_files.clone();
            manifest.write(dir)?;
            log::info!("training {} independent baselines", stream.tasks.len());
            Some(build_experiment(cfg, stream)?)
        };
        log::info!("running {:?} mode", cfg.search.mode);
        let results = run_mode(cfg, exp.as_ref())?;
        if !results.trials.iter().any(TrialResult::is_ok) {
            return Err(CliError::Run("every trial failed".into()));
        }
        let rep = representative(&results);
        manifest.representative_trial = rep.map(|i| results.trials[i].trial_id);
        write_outputs(cfg, dir, &results, rep)?;
        Ok(results)
    })();

    manifest.finished_unix_s = Some(now_unix());
    match &outcome {
        Ok(_) => manifest.status = RunStatus::Completed,
        Err(e) => {
            manifest.status = RunStatus::Failed;
            manifest.error = Some(e.to_string());
        }
    }
    manifest.write(dir)?;
    outcome
}
