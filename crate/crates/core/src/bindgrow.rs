//! Incremental training: independent nets, the bind-grow step, retention
//! policies for shared weights, evaluation and the multi-task gain.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conflict::{
    collect_activations, profile_from_rdms, stack_rdms, ConflictNorm, ConflictProfile,
};
use crate::data::{HeadMode, LabeledDataset, TaskData};
use crate::error::{Error, Result};
use crate::jointnet::{Architecture, IndependentNet, JointNet};
use crate::nn::sgd_update;
use crate::rng::{derive_seed, rng_for};
use crate::tensor::Tensor;
use crate::TaskId;

/// Smallest baseline error used as a gain denominator.
pub const BASELINE_FLOOR: f64 = 1e-4;

/// Learning-rate treatment of parameters that earlier tasks already own.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyRepr", into = "PolicyRepr")]
pub enum RetentionPolicy {
    Freeze,
    SlowLr { factor: f64 },
    FineTune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum PolicyKind {
    Freeze,
    SlowLr,
    FineTune,
}

/// Flat `{ kind, factor }` form. serde's tagged enums accept stray keys on
/// unit variants, so the strictness lives here.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyRepr {
    kind: PolicyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    factor: Option<f64>,
}

impl TryFrom<PolicyRepr> for RetentionPolicy {
    type Error = String;

    fn try_from(r: PolicyRepr) -> std::result::Result<Self, String> {
        match (r.kind, r.factor) {
            (PolicyKind::SlowLr, Some(factor)) => Ok(RetentionPolicy::SlowLr { factor }),
            (PolicyKind::SlowLr, None) => Err("slow_lr needs a factor".into()),
            (PolicyKind::Freeze, None) => Ok(RetentionPolicy::Freeze),
            (PolicyKind::FineTune, None) => Ok(RetentionPolicy::FineTune),
            (_, Some(_)) => Err("only slow_lr takes a factor".into()),
        }
    }
}

impl From<RetentionPolicy> for PolicyRepr {
    fn from(p: RetentionPolicy) -> Self {
        let (kind, factor) = match p {
            RetentionPolicy::Freeze => (PolicyKind::Freeze, None),
            RetentionPolicy::SlowLr { factor } => (PolicyKind::SlowLr, Some(factor)),
            RetentionPolicy::FineTune => (PolicyKind::FineTune, None),
        };
        PolicyRepr { kind, factor }
    }
}

impl Default for RetentionPolicy {
    fn default() -> Self {
        RetentionPolicy::SlowLr { factor: 0.1 }
    }
}

impl RetentionPolicy {
    pub fn shared_lr_scale(&self) -> f64 {
        match *self {
            RetentionPolicy::Freeze => 0.0,
            RetentionPolicy::SlowLr { factor } => factor,
            RetentionPolicy::FineTune => 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let RetentionPolicy::SlowLr { factor } = *self {
            if !(factor > 0.0 && factor < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "slow-lr factor {factor} outside (0, 1)"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainBudget {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub seed: u64,
}

impl Default for TrainBudget {
    fn default() -> Self {
        TrainBudget {
            epochs: 3,
            batch_size: 32,
            base_lr: 0.1,
            seed: 0,
        }
    }
}

impl TrainBudget {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "base_lr {} must be positive",
                self.base_lr
            )));
        }
        Ok(())
    }
}

/// Shared settings of every step in a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOptions {
    pub policy: RetentionPolicy,
    pub budget: TrainBudget,
    /// Cap on validation samples fed to the conflict model.
    pub rsa_samples: usize,
    pub norm: ConflictNorm,
}

impl Default for StepOptions {
    fn default() -> Self {
        StepOptions {
            policy: RetentionPolicy::default(),
            budget: TrainBudget::default(),
            rsa_samples: 256,
            norm: ConflictNorm::L2,
        }
    }
}

/// Validation errors of a joint network next to the single-task baselines.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalRecord {
    pub errors: BTreeMap<TaskId, f64>,
    pub baselines: BTreeMap<TaskId, f64>,
}

impl EvalRecord {
    pub fn accuracy(&self, task: TaskId) -> Option<f64> {
        self.errors.get(&task).map(|e| 1.0 - e)
    }

    pub fn avg_accuracy(&self) -> f64 {
        1.0 - self.errors.values().sum::<f64>() / self.errors.len().max(1) as f64
    }

    pub fn gain(&self) -> Result<Gain> {
        avg_gain(&self.errors, &self.baselines)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gain {
    /// Mean relative error reduction; positive means the joint net is better.
    pub signed: f64,
    /// Sum of relative error increases, as the formula is usually written.
    pub paper_literal: f64,
}

pub fn avg_gain(errors: &BTreeMap<TaskId, f64>, baselines: &BTreeMap<TaskId, f64>) -> Result<Gain> {
    if errors.is_empty() {
        return Err(Error::InvalidArgument("gain over an empty task set".into()));
    }
    let mut signed = 0.0;
    let mut literal = 0.0;
    for (&t, &e) in errors {
        let base = baselines
            .get(&t)
            .ok_or_else(|| Error::InvalidArgument(format!("missing baseline for task {t}")))?
            .max(BASELINE_FLOOR);
        signed += (base - e) / base;
        literal += (e - base) / base;
    }
    Ok(Gain {
        signed: signed / errors.len() as f64,
        paper_literal: literal,
    })
}

/// Top-1 error of `task`'s task-net on `ds`. Ties in the logits go to the
/// lowest class index.
pub fn evaluate(net: &JointNet, task: TaskId, ds: &LabeledDataset) -> Result<f64> {
    const CHUNK: usize = 512;
    let mut wrong = 0usize;
    let n = ds.len();
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        let logits = net.forward_task(task, &ds.inputs.select_rows(&idx))?;
        for (r, &i) in idx.iter().enumerate() {
            if argmax(logits.row(r)) != ds.labels[i] {
                wrong += 1;
            }
        }
        start += CHUNK;
    }
    Ok(wrong as f64 / n as f64)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Validation error of every task present in `net`.
pub fn evaluate_all(net: &JointNet, tasks: &[TaskData]) -> Result<BTreeMap<TaskId, f64>> {
    let by_id: BTreeMap<TaskId, &TaskData> = tasks.iter().map(|t| (t.id(), t)).collect();
    net.tasks()
        .iter()
        .map(|&t| {
            let data = by_id.get(&t).ok_or(Error::UnknownTask(t))?;
            Ok((t, evaluate(net, t, &data.splits.val)?))
        })
        .collect()
}

/// SGD on one task-net. Nodes the task created train at `base_lr`; nodes
/// inherited from earlier tasks are scaled by the retention policy.
pub fn train_task_in_joint(
    net: &mut JointNet,
    task: TaskId,
    train: &LabeledDataset,
    policy: RetentionPolicy,
    budget: &TrainBudget,
) -> Result<()> {
    budget.validate()?;
    policy.validate()?;
    let shared_scale = policy.shared_lr_scale();
    let scales: BTreeMap<usize, f64> = net
        .task_nodes(task)?
        .into_iter()
        .map(|id| {
            let own = net.node(id).expect("task node").creator_task == task;
            (id, if own { 1.0 } else { shared_scale })
        })
        .collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..budget.epochs {
        order.shuffle(&mut rng_for(
            budget.seed,
            &[0x7a1, task as u64, epoch as u64],
        ));
        for batch in order.chunks(budget.batch_size) {
            let x = train.inputs.select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let (loss, grads) = net.loss_and_grads(task, &x, &y)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { task, epoch });
            }
            for (id, g) in grads {
                let lr = budget.base_lr * scales[&id];
                let node = net.node_mut(id).expect("task node");
                sgd_update(&mut node.layer.params, &g, lr)?;
            }
        }
    }
    Ok(())
}

/// Seed of a task's independent initialisation.
pub fn init_seed(budget: &TrainBudget, task: TaskId) -> u64 {
    derive_seed(budget.seed, &[0x1d, task as u64])
}

/// Train a standalone network for `task` and measure its validation error.
pub fn train_independent(
    task: &TaskData,
    arch: &Architecture,
    budget: &TrainBudget,
) -> Result<(IndependentNet, f64)> {
    if arch.classes() != task.spec.class_count {
        return Err(Error::InvalidArgument(format!(
            "architecture has {} classes, task {} has {}",
            arch.classes(),
            task.id(),
            task.spec.class_count
        )));
    }
    let layers = arch.init_params(init_seed(budget, task.id()));
    let mut ind = IndependentNet::new(arch, task.id(), layers)?;
    train_task_in_joint(
        &mut ind.net,
        task.id(),
        &task.splits.train,
        RetentionPolicy::FineTune,
        budget,
    )?;
    let err = evaluate(&ind.net, task.id(), &task.splits.val)?;
    Ok((ind, err))
}

/// Start a joint network from the first task's independent net.
pub fn start_joint(independent: &IndependentNet, head_mode: HeadMode) -> Result<JointNet> {
    let mut net = JointNet::new(independent.net.architecture().clone(), head_mode)?;
    net.add_first_task(independent.task, independent.layers())?;
    Ok(net)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BindChoice {
    /// Least conflicting candidate.
    Auto,
    Fixed(TaskId),
}

#[derive(Debug, Clone, PartialEq)]
pub enum GrowChoice {
    /// Nucleus of the conflict distribution under this grow coefficient.
    Nucleus(f64),
    /// Expand exactly these positions.
    Positions(BTreeSet<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub task: TaskId,
    pub bound_to: TaskId,
    pub profiles: Vec<ConflictProfile>,
    pub expanded: BTreeSet<usize>,
    pub errors: BTreeMap<TaskId, f64>,
}

impl StepReport {
    /// One structured event-log line.
    pub fn log_line(&self) -> String {
        let mut s = format!("step task={} bind={}", self.task, self.bound_to);
        let scores: Vec<String> = self
            .profiles
            .iter()
            .map(|p| format!("{}:{:.6}", p.candidate, p.task_score))
            .collect();
        let _ = write!(s, " conflicts=[{}]", scores.join(","));
        let pos: Vec<String> = self.expanded.iter().map(usize::to_string).collect();
        let _ = write!(s, " expanded=[{}]", pos.join(","));
        let errs: Vec<String> = self
            .errors
            .iter()
            .map(|(t, e)| format!("{t}:{e:.6}"))
            .collect();
        let _ = write!(s, " errors=[{}]", errs.join(","));
        s
    }
}

/// Deterministic subsample of the task's validation inputs for RSA.
pub fn rsa_batch(task: &TaskData, cap: usize, seed: u64) -> Tensor {
    let n = task.splits.val.len();
    let mut idx: Vec<usize> = if n <= cap {
        (0..n).collect()
    } else {
        rand::seq::index::sample(&mut rng_for(seed, &[0x25a, task.id() as u64]), n, cap).into_vec()
    };
    idx.sort_unstable();
    task.splits.val.inputs.select_rows(&idx)
}

/// Conflict profiles of `task` against each candidate's task-net.
pub fn conflict_profiles(
    net: &JointNet,
    task: &TaskData,
    independent: &IndependentNet,
    candidates: &[TaskId],
    opts: &StepOptions,
) -> Result<Vec<ConflictProfile>> {
    let samples = rsa_batch(task, opts.rsa_samples, opts.budget.seed);
    let own = stack_rdms(&collect_activations(
        &independent.net,
        independent.task,
        &samples,
    )?)?;
    candidates
        .par_iter()
        .map(|&b| {
            let other = stack_rdms(&collect_activations(net, b, &samples)?)?;
            profile_from_rdms(task.id(), b, &own, &other, opts.norm)
        })
        .collect()
}

/// Least conflicting profile; ties go to the lowest task id.
pub fn select_bind_target(profiles: &[ConflictProfile]) -> Result<TaskId> {
    profiles
        .iter()
        .min_by(|a, b| {
            a.task_score
                .total_cmp(&b.task_score)
                .then(a.candidate.cmp(&b.candidate))
        })
        .map(|p| p.candidate)
        .ok_or_else(|| Error::InvalidArgument("no bind candidates".into()))
}

/// Bind `task` into `net`, expand the chosen positions, train it and
/// evaluate every task present afterwards.
#[allow(clippy::too_many_arguments)]
pub fn bind_grow_step(
    net: &mut JointNet,
    task: &TaskData,
    independent: &IndependentNet,
    candidates: &[TaskId],
    bind: BindChoice,
    grow: &GrowChoice,
    all_tasks: &[TaskData],
    opts: &StepOptions,
) -> Result<StepReport> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("bind candidate set is empty".into()));
    }
    if let Some(&b) = candidates.iter().find(|&&b| !net.contains(b)) {
        return Err(Error::UnknownTask(b));
    }
    let scored: Vec<TaskId> = match (bind, grow) {
        (BindChoice::Auto, _) => candidates.to_vec(),
        (BindChoice::Fixed(b), GrowChoice::Nucleus(_)) => vec![b],
        (BindChoice::Fixed(_), GrowChoice::Positions(_)) => Vec::new(),
    };
    let profiles = if scored.is_empty() {
        Vec::new()
    } else {
        conflict_profiles(net, task, independent, &scored, opts)?
    };
    let bound_to = match bind {
        BindChoice::Auto => select_bind_target(&profiles)?,
        BindChoice::Fixed(b) => {
            if !candidates.contains(&b) {
                return Err(Error::InvalidArgument(format!(
                    "bind target {b} is not a candidate"
                )));
            }
            b
        }
    };
    let expanded = match grow {
        GrowChoice::Nucleus(delta) => {
            let p = profiles
                .iter()
                .find(|p| p.candidate == bound_to)
                .expect("bound candidate was scored");
            crate::conflict::nucleus(&p.distribution, *delta)?
        }
        GrowChoice::Positions(pos) => pos.clone(),
    };
    let head = match net.head_mode() {
        HeadMode::PerTask => Some(
            net.architecture()
                .init_head(derive_seed(opts.budget.seed, &[0x4e, task.id() as u64])),
        ),
        HeadMode::Shared => None,
    };
    net.bind_task(task.id(), bound_to, head)?;
    net.expand_layers(task.id(), &expanded)?;
    train_task_in_joint(
        net,
        task.id(),
        &task.splits.train,
        opts.policy,
        &opts.budget,
    )?;
    let errors = evaluate_all(net, all_tasks)?;
    Ok(StepReport {
        task: task.id(),
        bound_to,
        profiles,
        expanded,
        errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gain_examples() {
        let base = BTreeMap::from([(0, 0.10), (1, 0.20)]);
        let errs = BTreeMap::from([(0, 0.08), (1, 0.25)]);
        let g = avg_gain(&errs, &base).unwrap();
        assert!((g.signed + 0.025).abs() < 1e-12);
        assert!((g.paper_literal - 0.05).abs() < 1e-12);
        assert_eq!(avg_gain(&base, &base).unwrap().signed, 0.0);
        let better = BTreeMap::from([(0, 0.05), (1, 0.1)]);
        assert!(avg_gain(&better, &base).unwrap().signed > 0.0);
        assert!(avg_gain(&BTreeMap::from([(3, 0.1)]), &base).is_err());
        // floor keeps a perfect baseline finite
        let g = avg_gain(&BTreeMap::from([(0, 0.01)]), &BTreeMap::from([(0, 0.0)])).unwrap();
        assert!((g.signed + 99.0).abs() < 1e-9);
    }

    #[test]
    fn policy_scales() {
        assert_eq!(RetentionPolicy::Freeze.shared_lr_scale(), 0.0);
        assert_eq!(RetentionPolicy::FineTune.shared_lr_scale(), 1.0);
        let slow = RetentionPolicy::default();
        assert!((slow.shared_lr_scale() * 1e-2 - 1e-3).abs() < 1e-18);
        assert!(RetentionPolicy::SlowLr { factor: 1.5 }.validate().is_err());
    }

    #[test]
    fn argmax_prefers_first() {
        assert_eq!(argmax(&[0.1, 0.3, 0.3]), 1);
        assert_eq!(argmax(&[2.0, 1.0]), 0);
    }

    #[test]
    fn log_line_format() {
        let r = StepReport {
            task: 2,
            bound_to: 0,
            profiles: Vec::new(),
            expanded: BTreeSet::from([0, 2]),
            errors: BTreeMap::from([(0, 0.1), (2, 0.25)]),
        };
        assert_eq!(
            r.log_line(),
            "step task=2 bind=0 conflicts=[] expanded=[0,2] errors=[0:0.100000,2:0.250000]"
        );
    }
}
