//! Search over grow sequences: single trials, grid sweeps, the random-growth
//! ablation and NSGA-II over (negative gain, parameter count).

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bindgrow::{
    bind_grow_step, evaluate_all, start_joint, train_independent, BindChoice, EvalRecord,
    GrowChoice, RetentionPolicy, StepOptions,
};
use crate::data::{HeadMode, TaskData};
use crate::error::{Error, Result};
use crate::jointnet::{Architecture, IndependentNet, JointNet};
use crate::rng::{derive_seed, rng_for};
use crate::TaskId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowStep {
    pub task: TaskId,
    pub bind: BindChoice,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowSequence {
    pub steps: Vec<GrowStep>,
    pub shared_delta: bool,
}

/// How bind targets are chosen when a sequence is generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BindRule {
    /// Least conflicting prior task.
    #[default]
    Auto,
    /// Always the first task of the order.
    First,
    /// The task that arrived just before.
    Previous,
}

impl GrowSequence {
    /// Same grow coefficient for every task of `order`.
    pub fn shared(order: &[TaskId], delta: f64, rule: BindRule) -> Self {
        GrowSequence::per_task(order, &vec![delta; order.len()], rule, true)
    }

    pub fn per_task(order: &[TaskId], deltas: &[f64], rule: BindRule, shared_delta: bool) -> Self {
        let steps = order
            .iter()
            .zip(deltas)
            .enumerate()
            .map(|(i, (&task, &delta))| GrowStep {
                task,
                bind: match (rule, i) {
                    (_, 0) | (BindRule::Auto, _) => BindChoice::Auto,
                    (BindRule::First, _) => BindChoice::Fixed(order[0]),
                    (BindRule::Previous, _) => BindChoice::Fixed(order[i - 1]),
                },
                delta,
            })
            .collect();
        GrowSequence {
            steps,
            shared_delta,
        }
    }

    pub fn deltas(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.delta).collect()
    }

    /// Check against the ids of a task stream.
    pub fn validate(&self, stream: &[TaskId]) -> Result<()> {
        let order: BTreeSet<TaskId> = self.steps.iter().map(|s| s.task).collect();
        let want: BTreeSet<TaskId> = stream.iter().copied().collect();
        if order != want || self.steps.len() != stream.len() {
            return Err(Error::InvalidArgument(
                "grow sequence must visit every task exactly once".into(),
            ));
        }
        for s in &self.steps {
            if !(0.0..=1.0).contains(&s.delta) {
                return Err(Error::InvalidArgument(format!(
                    "grow coefficient {} outside [0, 1]",
                    s.delta
                )));
            }
        }
        if self.shared_delta && self.steps.windows(2).any(|w| w[0].delta != w[1].delta) {
            return Err(Error::InvalidArgument(
                "shared grow coefficient differs between steps".into(),
            ));
        }
        for (i, s) in self.steps.iter().enumerate() {
            if let BindChoice::Fixed(b) = s.bind {
                if i > 0 && !self.steps[..i].iter().any(|p| p.task == b) {
                    return Err(Error::InvalidArgument(format!(
                        "task {} binds to {b}, which has not arrived yet",
                        s.task
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Minimised objectives of one trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objectives {
    pub neg_gain: f64,
    pub params: f64,
}

impl Objectives {
    pub fn as_array(&self) -> [f64; 2] {
        [self.neg_gain, self.params]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialKind {
    Sequence,
    RandomGrowth,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Ok,
    Failed(String),
}

/// State after one task of a trial has been added.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub task: TaskId,
    pub bound_to: Option<TaskId>,
    pub expanded: BTreeSet<usize>,
    pub avg_accuracy: f64,
    pub gain_signed: f64,
    pub gain_paper_literal: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial_id: usize,
    pub seed: u64,
    pub kind: TrialKind,
    pub order: Vec<TaskId>,
    pub deltas: Vec<f64>,
    pub record: EvalRecord,
    pub steps: Vec<StepSummary>,
    pub gain_signed: f64,
    pub gain_paper_literal: f64,
    pub param_count: usize,
    pub wall_time_s: f64,
    pub tabular: String,
    pub events: Vec<String>,
    pub status: TrialStatus,
    #[serde(skip)]
    pub net: Option<JointNet>,
}

impl TrialResult {
    fn empty(
        trial_id: usize,
        seed: u64,
        kind: TrialKind,
        order: Vec<TaskId>,
        deltas: Vec<f64>,
    ) -> Self {
        TrialResult {
            trial_id,
            seed,
            kind,
            order,
            deltas,
            record: EvalRecord::default(),
            steps: Vec::new(),
            gain_signed: 0.0,
            gain_paper_literal: 0.0,
            param_count: 0,
            wall_time_s: 0.0,
            tabular: String::new(),
            events: Vec::new(),
            status: TrialStatus::Ok,
            net: None,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == TrialStatus::Ok
    }

    pub fn objectives(&self) -> Objectives {
        Objectives {
            neg_gain: -self.gain_signed,
            params: self.param_count as f64,
        }
    }

    pub fn avg_accuracy(&self) -> f64 {
        self.record.avg_accuracy()
    }

    /// Bind target per step, `None` for the first task.
    pub fn binds(&self) -> Vec<Option<TaskId>> {
        self.steps.iter().map(|s| s.bound_to).collect()
    }
}

/// Where bind targets may come from.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSet {
    /// Every task trained so far.
    #[default]
    AllPrior,
    /// Only these tasks, once they have arrived.
    Fixed(Vec<TaskId>),
}

/// A task stream with its independent baselines, ready for trials.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub arch: Architecture,
    pub head_mode: HeadMode,
    pub tasks: Vec<TaskData>,
    pub opts: StepOptions,
    pub candidates: CandidateSet,
    independent: BTreeMap<TaskId, (IndependentNet, f64)>,
}

impl Experiment {
    /// Train the independent net of every task (in parallel). Training uses
    /// `opts.budget.seed`, so every trial shares the same baselines.
    pub fn new(
        arch: Architecture,
        head_mode: HeadMode,
        tasks: Vec<TaskData>,
        opts: StepOptions,
        candidates: CandidateSet,
    ) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::InvalidArgument("task stream is empty".into()));
        }
        opts.budget.validate()?;
        opts.policy.validate()?;
        let independent = tasks
            .par_iter()
            .map(|t| Ok((t.id(), train_independent(t, &arch, &opts.budget)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(Experiment {
            arch,
            head_mode,
            tasks,
            opts,
            candidates,
            independent,
        })
    }

    /// Same stream and baselines under another retention policy.
    pub fn with_policy(&self, policy: RetentionPolicy) -> Result<Experiment> {
        policy.validate()?;
        let mut exp = self.clone();
        exp.opts.policy = policy;
        Ok(exp)
    }

    pub fn task_ids(&self) -> Vec<TaskId> {
        self.tasks.iter().map(TaskData::id).collect()
    }

    pub fn baselines(&self) -> BTreeMap<TaskId, f64> {
        self.independent
            .iter()
            .map(|(&t, (_, e))| (t, *e))
            .collect()
    }

    pub fn independent(&self, task: TaskId) -> Result<&IndependentNet> {
        self.independent
            .get(&task)
            .map(|(n, _)| n)
            .ok_or(Error::UnknownTask(task))
    }

    fn task(&self, id: TaskId) -> Result<&TaskData> {
        self.tasks
            .iter()
            .find(|t| t.id() == id)
            .ok_or(Error::UnknownTask(id))
    }

    fn candidates_for(&self, arrived: &[TaskId]) -> Vec<TaskId> {
        match &self.candidates {
            CandidateSet::AllPrior => arrived.to_vec(),
            CandidateSet::Fixed(set) => arrived
                .iter()
                .copied()
                .filter(|t| set.contains(t))
                .collect(),
        }
    }

    /// Run the steps of a sequence; `choose` decides bind and growth for
    /// every task after the first.
    fn run_trial(
        &self,
        mut result: TrialResult,
        mut choose: impl FnMut(usize, TaskId, &[TaskId]) -> Result<(BindChoice, GrowChoice)>,
    ) -> TrialResult {
        let start = Instant::now();
        let baselines = self.baselines();
        let outcome = (|| -> Result<JointNet> {
            let order = result.order.clone();
            let first = order[0];
            let mut net = start_joint(self.independent(first)?, self.head_mode)?;
            let mut arrived = vec![first];
            let summary = |net: &JointNet,
                           task,
                           bound_to,
                           expanded,
                           result: &mut TrialResult|
             -> Result<()> {
                let errors = evaluate_all(net, &self.tasks)?;
                let gain = crate::bindgrow::avg_gain(&errors, &baselines)?;
                result.steps.push(StepSummary {
                    task,
                    bound_to,
                    expanded,
                    avg_accuracy: 1.0 - errors.values().sum::<f64>() / errors.len() as f64,
                    gain_signed: gain.signed,
                    gain_paper_literal: gain.paper_literal,
                });
                result.record.errors = errors;
                Ok(())
            };
            summary(&net, first, None, BTreeSet::new(), &mut result)?;
            result.events.push(format!("start task={first}"));
            for (i, &t) in order.iter().enumerate().skip(1) {
                let candidates = self.candidates_for(&arrived);
                if candidates.is_empty() {
                    return Err(Error::InvalidArgument(format!(
                        "no bind candidates for task {t}"
                    )));
                }
                let (bind, grow) = choose(i, t, &candidates)?;
                let report = bind_grow_step(
                    &mut net,
                    self.task(t)?,
                    self.independent(t)?,
                    &candidates,
                    bind,
                    &grow,
                    &self.tasks,
                    &self.opts,
                )?;
                result.events.push(report.log_line());
                arrived.push(t);
                summary(&net, t, Some(report.bound_to), report.expanded, &mut result)?;
            }
            Ok(net)
        })();
        result.record.baselines = baselines;
        match outcome {
            Ok(net) => {
                let last = result.steps.last().expect("first step recorded");
                result.gain_signed = last.gain_signed;
                result.gain_paper_literal = last.gain_paper_literal;
                result.param_count = net.total_params();
                result.tabular = net.tabular_repr();
                result.net = Some(net);
            }
            Err(e) => {
                log::warn!("trial {} failed: {e}", result.trial_id);
                result.events.push(format!("failed: {e}"));
                result.status = TrialStatus::Failed(e.to_string());
            }
        }
        result.wall_time_s = start.elapsed().as_secs_f64();
        result
    }

    pub fn run_grow_sequence(
        &self,
        seq: &GrowSequence,
        trial_id: usize,
        seed: u64,
    ) -> Result<TrialResult> {
        seq.validate(&self.task_ids())?;
        let result = TrialResult::empty(
            trial_id,
            seed,
            TrialKind::Sequence,
            seq.steps.iter().map(|s| s.task).collect(),
            seq.deltas(),
        );
        Ok(self.run_trial(result, |i, _, _| {
            let s = &seq.steps[i];
            Ok((s.bind, GrowChoice::Nucleus(s.delta)))
        }))
    }

    /// Random bind target and a random subset of positions for every task.
    pub fn random_growth_trial(&self, trial_id: usize, seed: u64) -> TrialResult {
        let order = self.task_ids();
        let depth = self.arch.depth();
        let result = TrialResult::empty(trial_id, seed, TrialKind::RandomGrowth, order, Vec::new());
        self.run_trial(result, |_, t, candidates| {
            let mut rng = rng_for(seed, &[0x7a4d, t as u64]);
            let (b, subset) = random_growth_choice(&mut rng, candidates, depth);
            Ok((BindChoice::Fixed(b), GrowChoice::Positions(subset)))
        })
    }

    /// `count` random-growth trials in parallel, trial `i` seeded by
    /// `trial_seed(seed, i)`.
    pub fn random_growth_sweep(&self, count: usize, seed: u64) -> Vec<TrialResult> {
        (0..count)
            .into_par_iter()
            .map(|i| self.random_growth_trial(i, trial_seed(seed, i)))
            .collect()
    }

    /// One trial per grow coefficient, all sharing the training seed.
    pub fn grid_sweep(
        &self,
        deltas: &[f64],
        rule: BindRule,
        seed: u64,
    ) -> Result<Vec<TrialResult>> {
        if deltas.is_empty() {
            return Err(Error::InvalidArgument(
                "grid sweep needs at least one grow coefficient".into(),
            ));
        }
        let order = self.task_ids();
        let seqs: Vec<GrowSequence> = deltas
            .iter()
            .map(|&d| GrowSequence::shared(&order, d, rule))
            .collect();
        for s in &seqs {
            s.validate(&order)?;
        }
        Ok(seqs
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                self.run_grow_sequence(s, i, trial_seed(seed, i))
                    .expect("sequence validated")
            })
            .collect())
    }

    /// NSGA-II over grow coefficients with real trials.
    pub fn nsga2_search(
        &self,
        cfg: &Nsga2Config,
        rule: BindRule,
    ) -> Result<(Vec<TrialResult>, Vec<usize>)> {
        let order = self.task_ids();
        let genome_len = if cfg.shared_delta { 1 } else { order.len() };
        let outcome = nsga2(cfg, genome_len, |trial_id, deltas| {
            let per_task: Vec<f64> = if cfg.shared_delta {
                vec![deltas[0]; order.len()]
            } else {
                deltas.to_vec()
            };
            let seq = GrowSequence::per_task(&order, &per_task, rule, cfg.shared_delta);
            let r = self
                .run_grow_sequence(&seq, trial_id, trial_seed(cfg.seed, trial_id))
                .expect("grid values are valid coefficients");
            let obj = r.is_ok().then(|| r.objectives());
            (r, obj)
        })?;
        Ok((outcome.trials, outcome.front))
    }
}

/// Integer parameter count per unit of squared grow coefficient in mock trials.
pub const MOCK_PARAM_SCALE: f64 = 1e4;

/// A trial with closed-form outcomes and no training: the gain is the mean
/// coefficient and the parameter count grows with its square, so every grid
/// point trades one objective against the other.
pub fn mock_trial(trial_id: usize, seed: u64, deltas: &[f64]) -> TrialResult {
    let n = deltas.len().max(1) as f64;
    let gain = deltas.iter().sum::<f64>() / n;
    let square = deltas.iter().map(|d| d * d).sum::<f64>() / n;
    let mut r = TrialResult::empty(trial_id, seed, TrialKind::Mock, Vec::new(), deltas.to_vec());
    r.gain_signed = gain;
    r.gain_paper_literal = 0.0 - gain * n;
    r.param_count = (MOCK_PARAM_SCALE * square).round() as usize;
    r.events.push(format!(
        "mock trial={trial_id} deltas=[{}]",
        deltas
            .iter()
            .map(|&d| fmt_sig6(d))
            .collect::<Vec<_>>()
            .join(",")
    ));
    r
}

/// NSGA-II over [`mock_trial`] outcomes.
pub fn mock_search(cfg: &Nsga2Config, genome_len: usize) -> Result<(Vec<TrialResult>, Vec<usize>)> {
    let out = nsga2(cfg, genome_len, |trial_id, deltas| {
        let r = mock_trial(trial_id, trial_seed(cfg.seed, trial_id), deltas);
        let obj = r.objectives();
        (r, Some(obj))
    })?;
    Ok((out.trials, out.front))
}

/// Seed of trial `index` under a global seed.
pub fn trial_seed(global: u64, index: usize) -> u64 {
    derive_seed(global, &[0x7219, index as u64])
}

/// Bind target uniform over `candidates`, expansion size uniform over
/// `0..=depth`, then a uniform subset of that size.
pub fn random_growth_choice<R: Rng + ?Sized>(
    rng: &mut R,
    candidates: &[TaskId],
    depth: usize,
) -> (TaskId, BTreeSet<usize>) {
    let b = candidates[rng.random_range(0..candidates.len())];
    let k = rng.random_range(0..=depth);
    let subset = sample(rng, depth, k).into_iter().collect();
    (b, subset)
}

/// `a` dominates `b`: no worse everywhere and strictly better somewhere.
pub fn dominates(a: &Objectives, b: &Objectives) -> bool {
    let (a, b) = (a.as_array(), b.as_array());
    a.iter().zip(&b).all(|(x, y)| x <= y) && a.iter().zip(&b).any(|(x, y)| x < y)
}

/// Fronts of increasing rank; each front lists indices in ascending order.
pub fn non_dominated_sort(points: &[Objectives]) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut dominated_by_count = vec![0usize; n];
    let mut dominates_list: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in i + 1..n {
            if dominates(&points[i], &points[j]) {
                dominates_list[i].push(j);
                dominated_by_count[j] += 1;
            } else if dominates(&points[j], &points[i]) {
                dominates_list[j].push(i);
                dominated_by_count[i] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| dominated_by_count[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominates_list[i] {
                dominated_by_count[j] -= 1;
                if dominated_by_count[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(std::mem::replace(&mut current, next));
    }
    fronts
}

/// Crowding distance of each point within one front.
pub fn crowding_distance(front: &[Objectives]) -> Vec<f64> {
    let n = front.len();
    let mut dist = vec![0.0; n];
    if n <= 2 {
        return vec![f64::INFINITY; n];
    }
    for m in 0..2 {
        let val = |i: usize| front[i].as_array()[m];
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| val(a).total_cmp(&val(b)).then(a.cmp(&b)));
        let (lo, hi) = (val(order[0]), val(order[n - 1]));
        dist[order[0]] = f64::INFINITY;
        dist[order[n - 1]] = f64::INFINITY;
        if hi == lo {
            continue;
        }
        for w in order.windows(3) {
            dist[w[1]] += (val(w[2]) - val(w[0])) / (hi - lo);
        }
    }
    dist
}

/// Indices of the non-dominated successful trials.
pub fn pareto_front(trials: &[TrialResult]) -> Vec<usize> {
    let ok: Vec<usize> = (0..trials.len()).filter(|&i| trials[i].is_ok()).collect();
    let points: Vec<Objectives> = ok.iter().map(|&i| trials[i].objectives()).collect();
    non_dominated_sort(&points)
        .into_iter()
        .next()
        .map(|f| f.into_iter().map(|k| ok[k]).collect())
        .unwrap_or_default()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Nsga2Config {
    pub population: usize,
    pub budget: usize,
    pub grid_step: f64,
    pub shared_delta: bool,
    pub seed: u64,
}

impl Default for Nsga2Config {
    fn default() -> Self {
        Nsga2Config {
            population: 8,
            budget: 20,
            grid_step: 0.05,
            shared_delta: true,
            seed: 0,
        }
    }
}

impl Nsga2Config {
    /// Grid `0, step, 2 step, ..., 1`.
    pub fn grid(&self) -> Result<Vec<f64>> {
        let cells = (1.0 / self.grid_step).round();
        if !(self.grid_step > 0.0) || (cells * self.grid_step - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "grid step {} must divide 1",
                self.grid_step
            )));
        }
        let cells = cells as usize;
        Ok((0..=cells).map(|i| i as f64 / cells as f64).collect())
    }
}

pub struct Nsga2Outcome<T> {
    /// Every evaluated trial in evaluation order.
    pub trials: Vec<T>,
    /// Grow coefficients of each trial.
    pub genomes: Vec<Vec<f64>>,
    /// Objectives of each trial, `None` for failures.
    pub objectives: Vec<Option<Objectives>>,
    /// Indices of the final non-dominated set.
    pub front: Vec<usize>,
}

/// NSGA-II over genomes of grid points. `evaluate(trial_id, genome)` returns
/// the trial and its objectives (`None` marks a failed trial). Evaluations of
/// one generation run in parallel; all random decisions are sequential.
pub fn nsga2<T, F>(cfg: &Nsga2Config, genome_len: usize, evaluate: F) -> Result<Nsga2Outcome<T>>
where
    T: Send,
    F: Fn(usize, &[f64]) -> (T, Option<Objectives>) + Sync,
{
    if cfg.population < 2 {
        return Err(Error::InvalidArgument(
            "population must be at least 2".into(),
        ));
    }
    if cfg.budget < cfg.population {
        return Err(Error::InvalidArgument(format!(
            "trial budget {} is smaller than the population {}",
            cfg.budget, cfg.population
        )));
    }
    if genome_len == 0 {
        return Err(Error::InvalidArgument(
            "genome must have at least one gene".into(),
        ));
    }
    let grid = cfg.grid()?;
    let mut rng = rng_for(cfg.seed, &[0x5ea4]);
    let space = (grid.len() as f64).powi(genome_len as i32);
    let mut seen: BTreeSet<Vec<usize>> = BTreeSet::new();
    let mut archive: Vec<Vec<usize>> = Vec::new();
    let mut trials: Vec<T> = Vec::new();
    let mut objectives: Vec<Option<Objectives>> = Vec::new();

    let fresh =
        |rng: &mut rand_chacha::ChaCha8Rng, seen: &BTreeSet<Vec<usize>>, mut g: Vec<usize>| {
            // resample until unseen while the space still has room
            let mut tries = 0;
            while seen.contains(&g) && (seen.len() as f64) < space && tries < 1000 {
                g = (0..genome_len)
                    .map(|_| rng.random_range(0..grid.len()))
                    .collect();
                tries += 1;
            }
            g
        };

    let evaluate_batch = |batch: Vec<Vec<usize>>,
                          archive: &mut Vec<Vec<usize>>,
                          trials: &mut Vec<T>,
                          objectives: &mut Vec<Option<Objectives>>|
     -> Vec<usize> {
        let base = archive.len();
        let results: Vec<(T, Option<Objectives>)> = batch
            .par_iter()
            .enumerate()
            .map(|(k, g)| {
                let deltas: Vec<f64> = g.iter().map(|&i| grid[i]).collect();
                evaluate(base + k, &deltas)
            })
            .collect();
        for (g, (t, o)) in batch.into_iter().zip(results) {
            archive.push(g);
            trials.push(t);
            objectives.push(o);
        }
        (base..archive.len()).collect()
    };

    let mut initial = Vec::with_capacity(cfg.population);
    for _ in 0..cfg.population {
        let g: Vec<usize> = (0..genome_len)
            .map(|_| rng.random_range(0..grid.len()))
            .collect();
        let g = fresh(&mut rng, &seen, g);
        seen.insert(g.clone());
        initial.push(g);
    }
    let mut population = evaluate_batch(initial, &mut archive, &mut trials, &mut objectives);
    population.retain(|&i| objectives[i].is_some());

    while archive.len() < cfg.budget {
        let (rank, crowd) = rank_and_crowding(&population, &objectives);
        let n_off = cfg.population.min(cfg.budget - archive.len());
        let mut offspring = Vec::with_capacity(n_off);
        for _ in 0..n_off {
            let child = if population.len() < 2 {
                (0..genome_len)
                    .map(|_| rng.random_range(0..grid.len()))
                    .collect()
            } else {
                let p1 = tournament(&mut rng, &population, &rank, &crowd);
                let p2 = tournament(&mut rng, &population, &rank, &crowd);
                let mut child: Vec<usize> = (0..genome_len)
                    .map(|j| {
                        if rng.random_bool(0.5) {
                            archive[p1][j]
                        } else {
                            archive[p2][j]
                        }
                    })
                    .collect();
                let pm = 1.0 / genome_len as f64;
                for gene in child.iter_mut() {
                    if rng.random_bool(pm) {
                        *gene = rng.random_range(0..grid.len());
                    }
                }
                child
            };
            let child = fresh(&mut rng, &seen, child);
            seen.insert(child.clone());
            offspring.push(child);
        }
        let new = evaluate_batch(offspring, &mut archive, &mut trials, &mut objectives);
        let mut pool = population.clone();
        pool.extend(new.into_iter().filter(|&i| objectives[i].is_some()));
        population = environmental_selection(&pool, &objectives, cfg.population);
    }

    let ok: Vec<usize> = (0..archive.len())
        .filter(|&i| objectives[i].is_some())
        .collect();
    let points: Vec<Objectives> = ok
        .iter()
        .map(|&i| objectives[i].expect("filtered"))
        .collect();
    let front = non_dominated_sort(&points)
        .into_iter()
        .next()
        .map(|f| f.into_iter().map(|k| ok[k]).collect())
        .unwrap_or_default();
    Ok(Nsga2Outcome {
        trials,
        genomes: archive
            .iter()
            .map(|g| g.iter().map(|&i| grid[i]).collect())
            .collect(),
        objectives,
        front,
    })
}

/// Front rank and crowding distance of each population member, keyed by
/// archive index.
fn rank_and_crowding(
    population: &[usize],
    objectives: &[Option<Objectives>],
) -> (BTreeMap<usize, usize>, BTreeMap<usize, f64>) {
    let points: Vec<Objectives> = population
        .iter()
        .map(|&i| objectives[i].expect("successful"))
        .collect();
    let mut rank = BTreeMap::new();
    let mut crowd = BTreeMap::new();
    for (r, front) in non_dominated_sort(&points).into_iter().enumerate() {
        let pts: Vec<Objectives> = front.iter().map(|&k| points[k]).collect();
        for (k, d) in front.iter().zip(crowding_distance(&pts)) {
            rank.insert(population[*k], r);
            crowd.insert(population[*k], d);
        }
    }
    (rank, crowd)
}

/// Lower rank wins, then larger crowding distance, then lower index.
fn better(a: usize, b: usize, rank: &BTreeMap<usize, usize>, crowd: &BTreeMap<usize, f64>) -> bool {
    (rank[&a], std::cmp::Reverse(crowd[&a].to_bits_ordered()), a)
        < (rank[&b], std::cmp::Reverse(crowd[&b].to_bits_ordered()), b)
}

trait OrderedBits {
    fn to_bits_ordered(self) -> i64;
}

impl OrderedBits for f64 {
    /// Integer key with the same order as `total_cmp`.
    fn to_bits_ordered(self) -> i64 {
        let bits = self.to_bits() as i64;
        bits ^ ((((bits >> 63) as u64) >> 1) as i64)
    }
}

fn tournament<R: Rng + ?Sized>(
    rng: &mut R,
    population: &[usize],
    rank: &BTreeMap<usize, usize>,
    crowd: &BTreeMap<usize, f64>,
) -> usize {
    let a = population[rng.random_range(0..population.len())];
    let b = population[rng.random_range(0..population.len())];
    if better(a, b, rank, crowd) {
        a
    } else {
        b
    }
}

/// Keep `size` members: whole fronts first, the last one by crowding.
fn environmental_selection(
    pool: &[usize],
    objectives: &[Option<Objectives>],
    size: usize,
) -> Vec<usize> {
    let (rank, crowd) = rank_and_crowding(pool, objectives);
    let mut sorted = pool.to_vec();
    sorted.sort_by(|&a, &b| {
        if better(a, b, &rank, &crowd) {
            std::cmp::Ordering::Less
        } else if a == b {
            std::cmp::Ordering::Equal
        } else {
            std::cmp::Ordering::Greater
        }
    });
    sorted.truncate(size);
    sorted.sort_unstable();
    sorted
}

/// Shortest decimal that rounds to `x` at six significant digits.
pub fn fmt_sig6(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let rounded: f64 = format!("{x:.5e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

fn csv_header(tasks: &[TaskId]) -> String {
    let mut cols = vec!["trial_id", "seed", "kind", "deltas", "binds"]
        .into_iter()
        .map(str::to_string)
        .collect::<Vec<_>>();
    cols.extend(tasks.iter().map(|t| format!("acc_task_{t}")));
    cols.extend(
        [
            "avg_accuracy",
            "gain_paper_literal",
            "gain_signed",
            "param_count",
            "wall_time_s",
            "status",
        ]
        .into_iter()
        .map(str::to_string),
    );
    cols.join(",")
}

fn csv_row(r: &TrialResult, tasks: &[TaskId]) -> String {
    let kind = match r.kind {
        TrialKind::Sequence => "sequence",
        TrialKind::RandomGrowth => "random_growth",
        TrialKind::Mock => "mock",
    };
    let deltas: Vec<String> = r.deltas.iter().map(|&d| fmt_sig6(d)).collect();
    let binds: Vec<String> = r
        .steps
        .iter()
        .map(|s| {
            s.bound_to
                .map_or_else(|| "-".to_string(), |b| b.to_string())
        })
        .collect();
    let mut cells = vec![
        r.trial_id.to_string(),
        r.seed.to_string(),
        kind.to_string(),
        deltas.join(";"),
        binds.join(";"),
    ];
    let ok = r.is_ok();
    for t in tasks {
        cells.push(match (ok, r.record.accuracy(*t)) {
            (true, Some(a)) => fmt_sig6(a),
            _ => String::new(),
        });
    }
    if ok {
        cells.push(if r.record.errors.is_empty() {
            String::new()
        } else {
            fmt_sig6(r.avg_accuracy())
        });
        cells.push(fmt_sig6(r.gain_paper_literal));
        cells.push(fmt_sig6(r.gain_signed));
        cells.push(r.param_count.to_string());
    } else {
        cells.extend(std::iter::repeat_n(String::new(), 4));
    }
    cells.push(fmt_sig6(r.wall_time_s));
    cells.push(match &r.status {
        TrialStatus::Ok => "ok".to_string(),
        TrialStatus::Failed(_) => "failed".to_string(),
    });
    cells.join(",")
}

/// One row per trial (trials.csv and pareto.csv share this layout).
pub fn write_trials_csv<'a, W: Write>(
    mut w: W,
    tasks: &[TaskId],
    trials: impl IntoIterator<Item = &'a TrialResult>,
) -> Result<()> {
    writeln!(w, "{}", csv_header(tasks))?;
    for r in trials {
        writeln!(w, "{}", csv_row(r, tasks))?;
    }
    Ok(())
}

/// Average accuracy and gain after each task of every trial.
pub fn write_series_csv<'a, W: Write>(
    mut w: W,
    trials: impl IntoIterator<Item = &'a TrialResult>,
) -> Result<()> {
    writeln!(
        w,
        "trial_id,step,task,bind,expanded,avg_accuracy,gain_signed,gain_paper_literal"
    )?;
    for r in trials {
        for (i, s) in r.steps.iter().enumerate() {
            let expanded: Vec<String> = s.expanded.iter().map(usize::to_string).collect();
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.trial_id,
                i,
                s.task,
                s.bound_to
                    .map_or_else(|| "-".to_string(), |b| b.to_string()),
                expanded.join(";"),
                fmt_sig6(s.avg_accuracy),
                fmt_sig6(s.gain_signed),
                fmt_sig6(s.gain_paper_literal)
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(a: f64, b: f64) -> Objectives {
        Objectives {
            neg_gain: a,
            params: b,
        }
    }

    #[test]
    fn sort_examples() {
        assert_eq!(
            non_dominated_sort(&[obj(1.0, 1.0), obj(2.0, 2.0)]),
            vec![vec![0], vec![1]]
        );
        assert_eq!(
            non_dominated_sort(&[obj(1.0, 3.0), obj(3.0, 1.0), obj(2.0, 2.0)]),
            vec![vec![0, 1, 2]]
        );
        // duplicates share a front
        assert_eq!(
            non_dominated_sort(&[obj(1.0, 1.0), obj(1.0, 1.0)]),
            vec![vec![0, 1]]
        );
        assert!(non_dominated_sort(&[]).is_empty());
    }

    #[test]
    fn crowding_examples() {
        assert!(crowding_distance(&[obj(0.0, 1.0), obj(1.0, 0.0)])
            .iter()
            .all(|d| d.is_infinite()));
        let line: Vec<Objectives> = (0..4).map(|i| obj(i as f64, 3.0 - i as f64)).collect();
        let d = crowding_distance(&line);
        assert!(d[0].is_infinite() && d[3].is_infinite());
        assert!((d[1] - d[2]).abs() < 1e-15);
        assert!((d[1] - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn crowding_hand_computed() {
        // objective 0 sorted: 0,1,3,6,8,10 ; objective 1: 10,7,6,2,1,0
        let pts = [
            obj(0.0, 10.0),
            obj(1.0, 7.0),
            obj(3.0, 6.0),
            obj(6.0, 2.0),
            obj(8.0, 1.0),
            obj(10.0, 0.0),
        ];
        let d = crowding_distance(&pts);
        let want = [
            f64::INFINITY,
            3.0 / 10.0 + 4.0 / 10.0,
            5.0 / 10.0 + 5.0 / 10.0,
            5.0 / 10.0 + 5.0 / 10.0,
            4.0 / 10.0 + 2.0 / 10.0,
            f64::INFINITY,
        ];
        for (a, b) in d.iter().zip(want) {
            assert!(a == &b || (a - b).abs() < 1e-12, "{d:?}");
        }
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(fmt_sig6(0.9123456), "0.912346");
        assert_eq!(fmt_sig6(12608.0), "12608");
        assert_eq!(fmt_sig6(0.0), "0");
        assert_eq!(fmt_sig6(-0.025), "-0.025");
        assert_eq!(fmt_sig6(1234567.0), "1234570");
    }

    #[test]
    fn sequence_builders() {
        let s = GrowSequence::shared(&[0, 1, 2], 0.5, BindRule::Previous);
        assert_eq!(s.steps[2].bind, BindChoice::Fixed(1));
        assert_eq!(s.steps[0].bind, BindChoice::Auto);
        s.validate(&[0, 1, 2]).unwrap();
        assert!(s.validate(&[0, 1]).is_err());
        let bad = GrowSequence::per_task(&[0, 1], &[0.2, 0.3], BindRule::First, true);
        assert!(bad.validate(&[0, 1]).is_err());
        let out = GrowSequence::per_task(&[0, 1], &[0.2, 1.3], BindRule::Auto, false);
        assert!(out.validate(&[0, 1]).is_err());
        let mut early = GrowSequence::shared(&[0, 1, 2], 0.5, BindRule::Auto);
        early.steps[1].bind = BindChoice::Fixed(2);
        assert!(early.validate(&[0, 1, 2]).is_err());
    }

    #[test]
    fn grid_points() {
        let g = Nsga2Config::default().grid().unwrap();
        assert_eq!(g.len(), 21);
        assert_eq!(g[11], 0.55);
        let bad = Nsga2Config {
            grid_step: 0.3,
            ..Nsga2Config::default()
        };
        assert!(bad.grid().is_err());
    }

    #[test]
    fn ordered_bits_follow_total_cmp() {
        let xs = [f64::NEG_INFINITY, -2.0, -0.0, 0.0, 1.5, f64::INFINITY];
        for w in xs.windows(2) {
            assert!(w[0].to_bits_ordered() < w[1].to_bits_ordered());
        }
    }

    #[test]
    fn nsga2_rejects_small_budget() {
        let cfg = Nsga2Config {
            budget: 4,
            ..Nsga2Config::default()
        };
        assert!(nsga2(&cfg, 1, |_, d| ((), Some(obj(d[0], d[0])))).is_err());
    }

    #[test]
    fn mock_search_keeps_every_tradeoff_point() {
        let cfg = Nsga2Config::default();
        let (trials, front) = mock_search(&cfg, 1).unwrap();
        assert_eq!(trials.len(), 20);
        assert_eq!(front.len(), 20);
        let r = mock_trial(0, 0, &[0.15]);
        assert_eq!(r.param_count, 225);
        assert_eq!(r.gain_signed, 0.15);
    }

    #[test]
    fn correlated_objectives_give_one_point() {
        let cfg = Nsga2Config::default();
        let out = nsga2(&cfg, 1, |_, d| ((), Some(obj(d[0], d[0])))).unwrap();
        assert_eq!(out.front.len(), 1);
        let best = out
            .genomes
            .iter()
            .map(|g| g[0])
            .fold(f64::INFINITY, f64::min);
        assert_eq!(out.genomes[out.front[0]][0], best);
    }
}
