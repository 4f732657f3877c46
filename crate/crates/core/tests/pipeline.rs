use grownet::bindgrow::{
    argmax, evaluate, evaluate_all, start_joint, train_independent, train_task_in_joint,
    RetentionPolicy, StepOptions, TrainBudget,
};
use grownet::data::{make_synthetic_tasks, HeadMode, LabeledDataset, SyntheticConfig, TaskData};
use grownet::jointnet::{Architecture, JointNet};
use grownet::search::{
    write_trials_csv, BindRule, CandidateSet, Experiment, GrowSequence, TrialResult,
};
use grownet::{Error, Tensor};

fn stream(angles: &[f64]) -> Vec<TaskData> {
    make_synthetic_tasks(&SyntheticConfig {
        angles_deg: angles.to_vec(),
        samples_per_task: 600,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

fn arch() -> Architecture {
    Architecture::mlp(8, &[16, 16], 4)
}

fn experiment(angles: &[f64], mode: HeadMode, policy: RetentionPolicy) -> Experiment {
    let opts = StepOptions {
        policy,
        ..StepOptions::default()
    };
    Experiment::new(arch(), mode, stream(angles), opts, CandidateSet::AllPrior).unwrap()
}

fn run(exp: &Experiment, delta: f64, rule: BindRule) -> TrialResult {
    let seq = GrowSequence::shared(&exp.task_ids(), delta, rule);
    let r = exp.run_grow_sequence(&seq, 0, 0).unwrap();
    assert!(r.is_ok(), "{:?}", r.status);
    r
}

#[test]
fn single_task_has_zero_gain() {
    let exp = experiment(&[0.0], HeadMode::PerTask, RetentionPolicy::default());
    let r = run(&exp, 0.5, BindRule::Auto);
    assert_eq!(r.gain_signed, 0.0);
    assert_eq!(r.gain_paper_literal, 0.0);
    assert_eq!(r.param_count, arch().trunk_params() + arch().head_params());
}

#[test]
fn full_expansion_counts_every_trunk() {
    let a = arch();
    let per_task = experiment(
        &[0.0, 90.0, 0.0],
        HeadMode::PerTask,
        RetentionPolicy::default(),
    );
    let r = run(&per_task, 1.0, BindRule::Auto);
    assert_eq!(r.param_count, 3 * (a.trunk_params() + a.head_params()));
    for row in r.tabular.lines().skip(2) {
        let cells = row.split(':').nth(1).unwrap();
        assert!(
            cells.split(',').all(|c| matches!(c.trim(), "*" | "")),
            "{row}"
        );
    }

    let shared = experiment(
        &[0.0, 90.0, 0.0],
        HeadMode::Shared,
        RetentionPolicy::default(),
    );
    let r = run(&shared, 1.0, BindRule::Auto);
    assert_eq!(r.param_count, 3 * a.trunk_params() + a.head_params());
}

#[test]
fn no_expansion_of_identical_tasks_shares_the_trunk() {
    let a = arch();
    let exp = experiment(&[0.0, 0.0], HeadMode::PerTask, RetentionPolicy::default());
    let r = run(&exp, 0.0, BindRule::Auto);
    assert_eq!(r.param_count, a.trunk_params() + 2 * a.head_params());
    let second = r.tabular.lines().nth(2).unwrap();
    assert_eq!(second, "task_1:  0, 0,");
}

#[test]
fn freeze_keeps_earlier_tasks_bit_stable() {
    let exp = experiment(
        &[0.0, 90.0, 0.0],
        HeadMode::PerTask,
        RetentionPolicy::Freeze,
    );
    let full = run(&exp, 0.5, BindRule::Auto);
    let baselines = exp.baselines();
    assert_eq!(full.record.errors[&0].to_bits(), baselines[&0].to_bits());

    // task 1's error right after its own step equals its final error
    let two = Experiment::new(
        arch(),
        HeadMode::PerTask,
        exp.tasks[..2].to_vec(),
        exp.opts,
        CandidateSet::AllPrior,
    )
    .unwrap();
    let prefix = run(&two, 0.5, BindRule::Auto);
    assert_eq!(
        prefix.record.errors[&1].to_bits(),
        full.record.errors[&1].to_bits()
    );

    let net = full.net.as_ref().unwrap();
    let original = exp.independent(0).unwrap().layers();
    for (pos, id) in net.task_net(0).unwrap().iter().enumerate() {
        assert_eq!(net.node(*id).unwrap().layer, original.trunk[pos]);
    }
}

#[test]
fn slow_lr_moves_shared_trunk_when_sharing_everything() {
    let exp = experiment(&[0.0, 90.0], HeadMode::PerTask, RetentionPolicy::default());
    let r = run(&exp, 0.0, BindRule::Auto);
    let net = r.net.as_ref().unwrap();
    let original = exp.independent(0).unwrap().layers();
    let id = net.task_net(0).unwrap()[0];
    assert_ne!(net.node(id).unwrap().layer, original.trunk[0]);
}

#[test]
fn slow_lr_scales_the_shared_step() {
    let tasks = stream(&[0.0, 90.0]);
    let a = arch();
    let mut net = JointNet::new(a.clone(), HeadMode::PerTask).unwrap();
    net.add_first_task(0, a.init_params(1)).unwrap();
    net.bind_task(1, 0, Some(a.init_head(2))).unwrap();
    let train = tasks[1].splits.train.clone();
    let (_, grads) = net.loss_and_grads(1, &train.inputs, &train.labels).unwrap();
    let before = net.clone();
    let budget = TrainBudget {
        epochs: 1,
        batch_size: train.len(),
        base_lr: 1e-2,
        seed: 0,
    };
    train_task_in_joint(
        &mut net,
        1,
        &train,
        RetentionPolicy::SlowLr { factor: 0.1 },
        &budget,
    )
    .unwrap();
    let head = net.head(1).unwrap();
    for (id, g) in grads {
        let lr = if id == head { 1e-2 } else { 1e-3 };
        let (old, new) = (
            &before.node(id).unwrap().layer,
            &net.node(id).unwrap().layer,
        );
        for (p, gp) in g.iter().enumerate() {
            for i in 0..gp.len() {
                let step = old.params[p].data()[i] - new.params[p].data()[i];
                let want = lr * gp.data()[i];
                let slack = 1e-12 * want.abs() + 4.0 * f64::EPSILON * old.params[p].data()[i].abs();
                assert!(
                    (step - want).abs() <= slack,
                    "node {id} param {p}[{i}]: {step} vs {want}"
                );
            }
        }
    }
}

#[test]
fn evaluate_matches_a_per_sample_count() {
    let a = arch();
    let task = &stream(&[0.0])[0];
    let mut net = JointNet::new(a.clone(), HeadMode::PerTask).unwrap();
    net.add_first_task(0, a.init_params(5)).unwrap();
    let ds = task.splits.val.subset(&(0..20).collect::<Vec<_>>());
    let logits = net.forward_task(0, &ds.inputs).unwrap();
    let wrong = (0..20)
        .filter(|&i| argmax(logits.row(i)) != ds.labels[i])
        .count();
    assert_eq!(evaluate(&net, 0, &ds).unwrap(), wrong as f64 / 20.0);
}

#[test]
fn constant_head_errs_on_every_other_class() {
    let a = arch();
    let task = &stream(&[0.0])[0];
    let mut net = JointNet::new(a.clone(), HeadMode::PerTask).unwrap();
    net.add_first_task(0, a.init_params(5)).unwrap();
    let head = net.head(0).unwrap();
    let layer = &mut net.node_mut(head).unwrap().layer;
    for p in &mut layer.params {
        p.data_mut().fill(0.0);
    }
    layer.params[1].data_mut()[2] = 1.0;
    let ds = &task.splits.val;
    let freq = ds.labels.iter().filter(|&&l| l == 2).count() as f64 / ds.len() as f64;
    assert!((evaluate(&net, 0, ds).unwrap() - (1.0 - freq)).abs() < 1e-15);
}

#[test]
fn evaluate_all_covers_arrived_tasks() {
    let exp = experiment(&[0.0, 90.0], HeadMode::PerTask, RetentionPolicy::default());
    let net = start_joint(exp.independent(0).unwrap(), HeadMode::PerTask).unwrap();
    let errors = evaluate_all(&net, &exp.tasks).unwrap();
    assert_eq!(errors.keys().copied().collect::<Vec<_>>(), vec![0]);
    assert_eq!(errors[&0], exp.baselines()[&0]);
}

#[test]
fn fixed_binding_grid_grows_monotonically() {
    let exp = experiment(
        &[0.0, 90.0, 45.0],
        HeadMode::PerTask,
        RetentionPolicy::default(),
    );
    let grid: Vec<f64> = (0..=10).map(|i| f64::from(i) / 10.0).collect();
    let trials = exp.grid_sweep(&grid, BindRule::First, 3).unwrap();
    assert_eq!(trials.len(), 11);
    for w in trials.windows(2) {
        assert!(w[0].param_count <= w[1].param_count);
    }
    let mut csv = Vec::new();
    write_trials_csv(&mut csv, &exp.task_ids(), &trials).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 12);
}

#[test]
fn trials_are_reproducible() {
    let a = experiment(
        &[0.0, 90.0, 0.0],
        HeadMode::PerTask,
        RetentionPolicy::default(),
    );
    let b = experiment(
        &[0.0, 90.0, 0.0],
        HeadMode::PerTask,
        RetentionPolicy::default(),
    );
    let (x, y) = (run(&a, 0.4, BindRule::Auto), run(&b, 0.4, BindRule::Auto));
    assert_eq!(x.tabular, y.tabular);
    assert_eq!(x.events, y.events);
    let bits = |r: &TrialResult| {
        r.record
            .errors
            .values()
            .map(|e| e.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&x), bits(&y));
    let r1 = a.random_growth_trial(0, 17);
    let r2 = b.random_growth_trial(0, 17);
    assert_eq!(r1.tabular, r2.tabular);
}

#[test]
fn non_finite_loss_is_reported_as_divergence() {
    let mut task = stream(&[0.0])[0].clone();
    task.splits.train.inputs.data_mut()[0] = f64::NAN;
    match train_independent(&task, &arch(), &TrainBudget::default()) {
        Err(Error::Diverged { task: 0, .. }) => {}
        other => panic!("expected divergence, got {:?}", other.map(|(_, e)| e)),
    }
}

#[test]
fn random_growth_expands_the_drawn_subsets() {
    let exp = experiment(
        &[0.0, 90.0, 0.0],
        HeadMode::PerTask,
        RetentionPolicy::default(),
    );
    let r = exp.random_growth_trial(0, 99);
    assert!(r.is_ok());
    let expanded: usize = r.steps.iter().map(|s| s.expanded.len()).sum();
    let a = arch();
    let widths: Vec<usize> = a.trunk.iter().map(|b| b.kind.param_count()).collect();
    let trunk_extra: usize = r
        .steps
        .iter()
        .flat_map(|s| s.expanded.iter().map(|&p| widths[p]))
        .sum();
    assert_eq!(
        r.param_count,
        a.trunk_params() + 3 * a.head_params() + trunk_extra
    );
    assert!(expanded <= 2 * a.depth());
}

#[test]
fn datasets_reject_mismatched_labels() {
    let inputs = Tensor::zeros(&[3, 2]);
    assert!(LabeledDataset::new(inputs, vec![0, 1], 2).is_err());
}
