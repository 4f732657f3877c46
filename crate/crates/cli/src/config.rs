//! Run configuration: a TOML file with one table per concern. Every table
//! rejects unknown keys and every field has a default, so an empty file is a
//! valid configuration (the permuted-MNIST grid at desk scale).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use grownet::bindgrow::{RetentionPolicy, StepOptions, TrainBudget};
use grownet::conflict::ConflictNorm;
use grownet::data::SyntheticConfig;
use grownet::rng::derive_seed;
use grownet::search::{BindRule, CandidateSet, Nsga2Config};
use grownet::TaskId;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkKind {
    /// Pixel-permuted MNIST, shared head.
    #[default]
    Permuted,
    /// MNIST classes split into disjoint groups, one head per task.
    Split,
    /// Gaussian clusters rotated per task, one head per task.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSection {
    pub kind: BenchmarkKind,
    pub task_count: usize,
    /// Directory holding the MNIST IDX files. Relative paths are taken from
    /// the directory of the config file.
    pub data_dir: PathBuf,
    /// Number of training-file images used (all when absent).
    pub pool: Option<usize>,
    /// Side reduction factor; 2 turns 28x28 into 14x14.
    pub downsample: usize,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub synthetic: SyntheticSection,
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        BenchmarkSection {
            kind: BenchmarkKind::Permuted,
            task_count: 3,
            data_dir: PathBuf::from("data/mnist"),
            pool: None,
            downsample: 2,
            split: [0.7, 0.15, 0.15],
            synthetic: SyntheticSection::default(),
        }
    }
}

/// Generator settings for the synthetic benchmark. Seeds left out are
/// derived from the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSection {
    pub clusters: usize,
    pub dim: usize,
    pub noise_std: f64,
    pub mean_scale: f64,
    pub angles_deg: Vec<f64>,
    pub samples_per_task: usize,
    pub cluster_seed: Option<u64>,
    pub sample_seed: Option<u64>,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        let d = SyntheticConfig::default();
        SyntheticSection {
            clusters: d.clusters,
            dim: d.dim,
            noise_std: d.noise_std,
            mean_scale: d.mean_scale,
            angles_deg: d.angles_deg,
            samples_per_task: d.samples_per_task,
            cluster_seed: None,
            sample_seed: None,
        }
    }
}

impl SyntheticSection {
    pub fn generator(&self, seed: u64, split: [f64; 3]) -> SyntheticConfig {
        SyntheticConfig {
            clusters: self.clusters,
            dim: self.dim,
            noise_std: self.noise_std,
            mean_scale: self.mean_scale,
            angles_deg: self.angles_deg.clone(),
            samples_per_task: self.samples_per_task,
            cluster_seed: self.cluster_seed.unwrap_or_else(|| derive_seed(seed, &[1])),
            sample_seed: self.sample_seed.unwrap_or_else(|| derive_seed(seed, &[2])),
            split,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchPreset {
    #[default]
    Mlp,
    /// Three convolutions and two dense layers; image benchmarks only.
    Convnet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub preset: ArchPreset,
    /// Hidden widths of the MLP preset.
    pub hidden: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: ArchPreset::Mlp,
            hidden: vec![64, 64],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let b = TrainBudget::default();
        TrainingSection {
            epochs: b.epochs,
            batch_size: b.batch_size,
            base_lr: b.base_lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConflictSection {
    pub norm: ConflictNorm,
    /// Validation samples of the new task fed to the conflict model.
    pub sample_cap: usize,
    /// Allowed bind targets; every prior task when absent.
    pub candidates: Option<Vec<TaskId>>,
}

impl Default for ConflictSection {
    fn default() -> Self {
        ConflictSection {
            norm: ConflictNorm::L2,
            sample_cap: StepOptions::default().rsa_samples,
            candidates: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    /// One grow sequence.
    Single,
    /// One trial per grid coefficient.
    #[default]
    Grid,
    Nsga2,
    /// Random bind targets and random expansion subsets.
    Random,
    /// NSGA-II on closed-form objectives, no data or training.
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    pub mode: SearchMode,
    pub bind: BindRule,
    /// Shared coefficient of single mode.
    pub delta: f64,
    /// Per-task coefficients of single mode, in arrival order; overrides `delta`.
    pub deltas: Option<Vec<f64>>,
    /// Coefficients of grid mode.
    pub grid: Vec<f64>,
    /// Number of random-growth trials.
    pub trials: usize,
    pub population: usize,
    /// Trial budget of NSGA-II.
    pub budget: usize,
    pub grid_step: f64,
    pub shared_delta: bool,
    /// Arrival order; ascending task ids when absent.
    pub task_order: Option<Vec<TaskId>>,
}

impl Default for SearchSection {
    fn default() -> Self {
        let n = Nsga2Config::default();
        SearchSection {
            mode: SearchMode::Grid,
            bind: BindRule::Auto,
            delta: 0.5,
            deltas: None,
            grid: default_grid(),
            trials: 11,
            population: n.population,
            budget: n.budget,
            grid_step: n.grid_step,
            shared_delta: n.shared_delta,
            task_order: None,
        }
    }
}

/// `0.0, 0.1, ..., 1.0`.
pub fn default_grid() -> Vec<f64> {
    (0..=10).map(|i| f64::from(i) / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub benchmark: BenchmarkSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub policy: RetentionPolicy,
    pub conflict: ConflictSection,
    pub search: SearchSection,
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse a file and anchor its relative data directory at the file's
    /// location.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = RunConfig::from_toml(&text)?;
        if cfg.benchmark.data_dir.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.benchmark.data_dir = base.join(&cfg.benchmark.data_dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn budget(&self) -> TrainBudget {
        TrainBudget {
            epochs: self.training.epochs,
            batch_size: self.training.batch_size,
            base_lr: self.training.base_lr,
            seed: self.seed,
        }
    }

    pub fn step_options(&self) -> StepOptions {
        StepOptions {
            policy: self.policy,
            budget: self.budget(),
            rsa_samples: self.conflict.sample_cap,
            norm: self.conflict.norm,
        }
    }

    pub fn candidates(&self) -> CandidateSet {
        match &self.conflict.candidates {
            None => CandidateSet::AllPrior,
            Some(c) => CandidateSet::Fixed(c.clone()),
        }
    }

    pub fn nsga2(&self) -> Nsga2Config {
        Nsga2Config {
            population: self.search.population,
            budget: self.search.budget,
            grid_step: self.search.grid_step,
            shared_delta: self.search.shared_delta,
            seed: self.seed,
        }
    }

    /// Hex SHA-256 of the canonical JSON of every field that can change
    /// results. Output and data locations are left out.
    pub fn hash(&self) -> String {
        let mut semantic = self.clone();
        semantic.output_dir = None;
        semantic.benchmark.data_dir = PathBuf::new();
        let json = serde_json::to_vec(&semantic).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let b = &self.benchmark;
        let s = &self.search;
        if b.task_count == 0 {
            return Err(invalid("benchmark.task_count must be positive"));
        }
        let sum: f64 = b.split.iter().sum();
        if b.split.iter().any(|f| !(*f > 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(invalid(
                "benchmark.split must be three positive fractions summing to 1",
            ));
        }
        match b.kind {
            BenchmarkKind::Permuted | BenchmarkKind::Split => {
                if b.downsample == 0 || 28 % b.downsample != 0 {
                    return Err(invalid("benchmark.downsample must divide 28"));
                }
                if b.pool == Some(0) {
                    return Err(invalid("benchmark.pool must be positive"));
                }
                if b.kind == BenchmarkKind::Split && 10 % b.task_count != 0 {
                    return Err(invalid(format!(
                        "split benchmark cannot divide 10 classes into {} tasks",
                        b.task_count
                    )));
                }
            }
            BenchmarkKind::Synthetic => {
                let g = &b.synthetic;
                if g.angles_deg.len() != b.task_count {
                    return Err(invalid(format!(
                        "benchmark.synthetic.angles_deg has {} entries for {} tasks",
                        g.angles_deg.len(),
                        b.task_count
                    )));
                }
                if g.clusters < 2 || g.dim < 2 || g.samples_per_task < 3 * g.clusters {
                    return Err(invalid(
                        "synthetic generator needs >= 2 clusters, >= 2 dims and >= 3 samples per cluster",
                    ));
                }
                if !(g.noise_std > 0.0) || !(g.mean_scale > 0.0) {
                    return Err(invalid(
                        "synthetic noise_std and mean_scale must be positive",
                    ));
                }
                if self.model.preset == ArchPreset::Convnet {
                    return Err(invalid("the convnet preset needs an image benchmark"));
                }
            }
        }
        if self.model.preset == ArchPreset::Mlp && self.model.hidden.contains(&0) {
            return Err(invalid("model.hidden widths must be positive"));
        }
        if self.model.preset == ArchPreset::Mlp && self.model.hidden.is_empty() {
            return Err(invalid("model.hidden needs at least one layer"));
        }
        if self.training.epochs == 0 {
            return Err(invalid("training.epochs must be positive"));
        }
        self.budget()
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        self.policy.validate().map_err(|e| invalid(e.to_string()))?;
        if self.conflict.sample_cap < 3 {
            return Err(invalid("conflict.sample_cap must be at least 3"));
        }
        let ids: Vec<TaskId> = (0..b.task_count).collect();
        if let Some(c) = &self.conflict.candidates {
            if c.is_empty() || c.iter().any(|t| !ids.contains(t)) {
                return Err(invalid("conflict.candidates must list known task ids"));
            }
        }
        if let Some(order) = &s.task_order {
            let mut sorted = order.clone();
            sorted.sort_unstable();
            if sorted != ids {
                return Err(invalid(
                    "search.task_order must be a permutation of the task ids",
                ));
            }
        }
        let unit = |d: &f64| (0.0..=1.0).contains(d);
        match s.mode {
            SearchMode::Single => {
                if !unit(&s.delta) {
                    return Err(invalid("search.delta must lie in [0, 1]"));
                }
                if let Some(d) = &s.deltas {
                    if d.len() != b.task_count || !d.iter().all(unit) {
                        return Err(invalid("search.deltas needs one value in [0, 1] per task"));
                    }
                }
            }
            SearchMode::Grid => {
                if s.grid.is_empty() || !s.grid.iter().all(unit) {
                    return Err(invalid("search.grid needs values in [0, 1]"));
                }
            }
            SearchMode::Random => {
                if s.trials == 0 {
                    return Err(invalid("search.trials must be positive"));
                }
            }
            SearchMode::Nsga2 | SearchMode::Mock => {
                self.nsga2().grid().map_err(|e| invalid(e.to_string()))?;
                if s.population < 2 || s.budget < s.population {
                    return Err(invalid(
                        "search.budget must be at least search.population >= 2",
                    ));
                }
            }
        }
        Ok(())
    }
}
