//! Reference implementations written from the definitions, plus the quick
//! checks the command-line `selfcheck` runs against them.
//!
//! Everything here is deliberately naive: quadratic loops, no shared code
//! with the production paths it is compared against.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::conflict::{nucleus, rdm, spearman};
use crate::error::Result;
use crate::nn::{softmax_cross_entropy, Layer, LayerKind};
use crate::rng::rng_for;
use crate::search::{non_dominated_sort, nsga2, Nsga2Config, Objectives};
use crate::tensor::Tensor;

/// Pearson correlation from the textbook formula.
pub fn oracle_pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// `1 - pearson` for every pair of rows.
pub fn oracle_rdm(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                out[i][j] = oracle_pearson(&rows[i], &rows[j]).map_or(1.0, |r| 1.0 - r);
            }
        }
    }
    out
}

/// Average ranks by counting: `1 + #smaller + (#equal - 1) / 2`.
pub fn oracle_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let smaller = x.iter().filter(|&&w| w < v).count() as f64;
            let equal = x.iter().filter(|&&w| w == v).count() as f64;
            1.0 + smaller + (equal - 1.0) / 2.0
        })
        .collect()
}

pub fn oracle_spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    oracle_pearson(&oracle_ranks(x), &oracle_ranks(y))
}

fn oracle_dominates(p: [f64; 2], q: [f64; 2]) -> bool {
    let mut strictly = false;
    for k in 0..2 {
        if p[k] > q[k] {
            return false;
        }
        if p[k] < q[k] {
            strictly = true;
        }
    }
    strictly
}

/// Peel off non-dominated layers one at a time.
pub fn oracle_fronts(points: &[[f64; 2]]) -> Vec<Vec<usize>> {
    let mut left: Vec<usize> = (0..points.len()).collect();
    let mut fronts = Vec::new();
    while !left.is_empty() {
        let front: Vec<usize> = left
            .iter()
            .copied()
            .filter(|&i| !left.iter().any(|&j| oracle_dominates(points[j], points[i])))
            .collect();
        left.retain(|i| !front.contains(i));
        fronts.push(front);
    }
    fronts
}

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Check {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.sample(StandardNormal)).collect(),
    )
    .expect("valid shape")
}

/// Gaussian values kept at least `gap` away from zero so ReLU kinks are
/// not straddled by the finite difference.
fn away_from_zero<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], gap: f64) -> Tensor {
    gaussian(rng, shape).map(|v| {
        if v.abs() < gap {
            v.signum() * gap + v
        } else {
            v
        }
    })
}

/// Random layer configuration of the given kind with a matching input.
pub fn random_instance<R: Rng + ?Sized>(rng: &mut R, kind_name: &str) -> (Layer, Tensor) {
    let n = rng.random_range(1..=3);
    let (kind, input_shape) = match kind_name {
        "dense" => {
            let (i, o) = (rng.random_range(1..=6), rng.random_range(1..=6));
            (
                LayerKind::Dense {
                    in_dim: i,
                    out_dim: o,
                },
                vec![n, i],
            )
        }
        "conv2d" => {
            let kernel = rng.random_range(1..=3);
            let stride = rng.random_range(1..=2);
            let (ci, co) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let h = kernel + rng.random_range(0..=4);
            let w = kernel + rng.random_range(0..=4);
            (
                LayerKind::Conv2d {
                    in_ch: ci,
                    out_ch: co,
                    kernel,
                    stride,
                },
                vec![n, ci, h, w],
            )
        }
        "relu" => (LayerKind::Relu, vec![n, rng.random_range(1..=8)]),
        "max_pool2d" => {
            let kernel = rng.random_range(1..=3);
            let c = rng.random_range(1..=2);
            let h = kernel * rng.random_range(1..=3) + rng.random_range(0..kernel);
            let w = kernel * rng.random_range(1..=3) + rng.random_range(0..kernel);
            (LayerKind::MaxPool2d { kernel }, vec![n, c, h, w])
        }
        "flatten" => (
            LayerKind::Flatten,
            vec![
                n,
                rng.random_range(1..=3),
                rng.random_range(1..=3),
                rng.random_range(1..=3),
            ],
        ),
        "head" => {
            let (i, c) = (rng.random_range(1..=6), rng.random_range(2..=5));
            (
                LayerKind::SoftmaxCrossEntropyHead {
                    in_dim: i,
                    classes: c,
                },
                vec![n, i],
            )
        }
        other => panic!("unknown layer kind {other}"),
    };
    let params = kind
        .param_shapes()
        .iter()
        .map(|s| gaussian(rng, s))
        .collect();
    let layer = Layer::new(kind, params).expect("shapes from param_shapes");
    let x = match kind {
        LayerKind::MaxPool2d { .. } => {
            // distinct values so the arg-max is stable under the probe
            let total: usize = input_shape.iter().product();
            let mut vals: Vec<f64> = (0..total).map(|i| i as f64 * 0.01).collect();
            for i in (1..total).rev() {
                vals.swap(i, rng.random_range(0..=i));
            }
            Tensor::new(input_shape, vals).expect("valid shape")
        }
        _ => away_from_zero(rng, &input_shape, 1e-3),
    };
    (layer, x)
}

pub const LAYER_KIND_NAMES: [&str; 6] =
    ["dense", "conv2d", "relu", "max_pool2d", "flatten", "head"];

/// Largest relative error between analytic and central-difference
/// gradients of a scalar loss, over inputs and parameters.
pub fn gradient_check<R: Rng + ?Sized>(
    rng: &mut R,
    layer: &Layer,
    x: &Tensor,
    h: f64,
) -> Result<f64> {
    let out = layer.forward(x)?;
    let is_head = matches!(layer.kind, LayerKind::SoftmaxCrossEntropyHead { .. });
    let labels: Vec<usize> = match layer.kind {
        LayerKind::SoftmaxCrossEntropyHead { classes, .. } => (0..out.rows())
            .map(|_| rng.random_range(0..classes))
            .collect(),
        _ => Vec::new(),
    };
    let weights = gaussian(rng, out.shape());
    let loss = |l: &Layer, x: &Tensor| -> Result<f64> {
        let y = l.forward(x)?;
        if is_head {
            Ok(softmax_cross_entropy(&y, &labels)?.0)
        } else {
            Ok(y.data()
                .iter()
                .zip(weights.data())
                .map(|(a, b)| a * b)
                .sum())
        }
    };
    let grad_out = if is_head {
        softmax_cross_entropy(&out, &labels)?.1
    } else {
        weights.clone()
    };
    let (dx, dparams) = layer.backward(x, &grad_out)?;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-4);
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let num = (loss(layer, &xp)? - loss(layer, &xm)?) / (2.0 * h);
        worst = worst.max(rel(dx.data()[i], num));
    }
    for (p, g) in dparams.iter().enumerate() {
        for i in 0..g.len() {
            let mut lp = layer.clone();
            lp.params[p].data_mut()[i] += h;
            let mut lm = layer.clone();
            lm.params[p].data_mut()[i] -= h;
            let num = (loss(&lp, x)? - loss(&lm, x)?) / (2.0 * h);
            worst = worst.max(rel(g.data()[i], num));
        }
    }
    Ok(worst)
}

/// Finite-difference check of every layer kind on `instances` random cases.
pub fn check_gradients(seed: u64, instances: usize) -> Result<Check> {
    let mut worst: f64 = 0.0;
    let mut worst_kind = "";
    for (k, name) in LAYER_KIND_NAMES.iter().enumerate() {
        for i in 0..instances {
            let mut rng = rng_for(seed, &[0x6c, k as u64, i as u64]);
            let (layer, x) = random_instance(&mut rng, name);
            let err = gradient_check(&mut rng, &layer, &x, 1e-5)?;
            if err > worst {
                worst = err;
                worst_kind = name;
            }
        }
    }
    Ok(Check::new(
        "gradients",
        worst < 1e-4,
        format!(
            "{} kinds x {instances} instances, max rel err {worst:.2e} ({worst_kind})",
            LAYER_KIND_NAMES.len()
        ),
    ))
}

/// RDM and Spearman against the naive definitions.
pub fn check_rsa_oracles(seed: u64, cases: usize) -> Result<Check> {
    let mut worst: f64 = 0.0;
    for c in 0..cases {
        let mut rng = rng_for(seed, &[0x25a, c as u64]);
        let n = rng.random_range(3..=12);
        let d = rng.random_range(2..=8);
        let mut rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        if c % 5 == 0 {
            // coarse values create tied ranks
            for r in rows.iter_mut() {
                for v in r.iter_mut() {
                    *v = (*v * 2.0).round();
                }
            }
        }
        let got = rdm(&Tensor::from_rows(&rows)?)?;
        let want = oracle_rdm(&rows);
        for i in 0..n {
            for j in 0..n {
                worst = worst.max((got.matrix.data()[i * n + j] - want[i][j]).abs());
            }
        }
        let m = rng.random_range(3..=40);
        let x: Vec<f64> = (0..m)
            .map(|_| (rng.sample::<f64, _>(StandardNormal) * 3.0).round())
            .collect();
        let y: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        match (spearman(&x, &y), oracle_spearman(&x, &y)) {
            (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
            (None, None) => {}
            _ => worst = f64::INFINITY,
        }
    }
    Ok(Check::new(
        "rsa_oracles",
        worst <= 1e-12,
        format!("{cases} cases, max abs diff {worst:.2e}"),
    ))
}

/// Random point sets with many ties on a coarse lattice.
pub fn random_points<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<Objectives> {
    (0..n)
        .map(|_| Objectives {
            neg_gain: rng.random_range(0..10) as f64,
            params: rng.random_range(0..10) as f64,
        })
        .collect()
}

pub fn check_sort_oracle(seed: u64, sets: usize, size: usize) -> Check {
    let mut mismatches = 0;
    for s in 0..sets {
        let mut rng = rng_for(seed, &[0x50f7, s as u64]);
        let pts = random_points(&mut rng, size);
        let arr: Vec<[f64; 2]> = pts.iter().map(Objectives::as_array).collect();
        if non_dominated_sort(&pts) != oracle_fronts(&arr) {
            mismatches += 1;
        }
    }
    Check::new(
        "sort_oracle",
        mismatches == 0,
        format!("{sets} sets of {size} points, {mismatches} mismatches"),
    )
}

/// Monotonicity, minimality and the boundary cases of the nucleus rule.
pub fn check_nucleus_law(seed: u64, cases: usize) -> Result<Check> {
    let mut failures = Vec::new();
    for c in 0..cases {
        let mut rng = rng_for(seed, &[0x1c, c as u64]);
        let l = rng.random_range(1..=8);
        let raw: Vec<f64> = (0..l)
            .map(|_| {
                // occasional exact ties
                if rng.random_bool(0.2) {
                    0.25
                } else {
                    rng.random_range(1e-6..1.0)
                }
            })
            .collect();
        let total: f64 = raw.iter().sum();
        let d: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let mut deltas = [rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0)];
        deltas.sort_by(f64::total_cmp);
        let a = nucleus(&d, deltas[0])?;
        let b = nucleus(&d, deltas[1])?;
        if !a.is_subset(&b) {
            failures.push(format!("case {c}: not monotone"));
        }
        for (delta, set) in [(deltas[0], &a), (deltas[1], &b)] {
            if let Some(msg) = minimal_prefix_violation(&d, delta, set) {
                failures.push(format!("case {c}: {msg}"));
            }
        }
        if !nucleus(&d, 0.0)?.is_empty() || nucleus(&d, 1.0)? != (0..l).collect::<BTreeSet<_>>() {
            failures.push(format!("case {c}: boundary"));
        }
    }
    Ok(Check::new(
        "nucleus_law",
        failures.is_empty(),
        format!(
            "{cases} cases, {} failures {:?}",
            failures.len(),
            failures.iter().take(3).collect::<Vec<_>>()
        ),
    ))
}

/// `None` when `set` reaches `delta`, dropping its lowest-mass member does
/// not, and no outside position carries more mass than a member.
pub fn minimal_prefix_violation(d: &[f64], delta: f64, set: &BTreeSet<usize>) -> Option<String> {
    if delta == 0.0 {
        return (!set.is_empty()).then(|| "nonempty at 0".to_string());
    }
    let mass: f64 = set.iter().map(|&i| d[i]).sum();
    if mass + 1e-9 < delta {
        return Some(format!("mass {mass} below {delta}"));
    }
    let lowest = set.iter().map(|&i| d[i]).fold(f64::INFINITY, f64::min);
    if delta < 1.0 && mass - lowest >= delta {
        return Some(format!(
            "not minimal: {mass} - {lowest} still reaches {delta}"
        ));
    }
    let outside_max = (0..d.len())
        .filter(|i| !set.contains(i))
        .map(|i| d[i])
        .fold(0.0, f64::max);
    if outside_max > lowest {
        return Some("not a prefix of the descending order".to_string());
    }
    None
}

/// Mock objectives `(-delta, delta^2)`: every grid point is Pareto optimal.
pub fn mock_tradeoff(delta: f64) -> Objectives {
    Objectives {
        neg_gain: -delta,
        params: delta * delta,
    }
}

/// NSGA-II on the mock trade-off versus exhaustive evaluation.
pub fn check_nsga2_mock(seed: u64) -> Result<Check> {
    let cfg = Nsga2Config {
        seed,
        ..Nsga2Config::default()
    };
    let out = nsga2(&cfg, 1, |_, d| ((), Some(mock_tradeoff(d[0]))))?;
    let grid = cfg.grid()?;
    let all: Vec<[f64; 2]> = grid.iter().map(|&d| mock_tradeoff(d).as_array()).collect();
    let brute: BTreeSet<u64> = oracle_fronts(&all)[0]
        .iter()
        .map(|&i| grid[i].to_bits())
        .collect();
    let evaluated: Vec<[f64; 2]> = out
        .objectives
        .iter()
        .map(|o| o.expect("mock never fails").as_array())
        .collect();
    let archive_front: BTreeSet<usize> = oracle_fronts(&evaluated)[0].iter().copied().collect();
    let returned: BTreeSet<usize> = out.front.iter().copied().collect();
    let on_grid = out.genomes.iter().all(|g| grid.iter().any(|&v| v == g[0]));
    let in_true_front = out
        .front
        .iter()
        .all(|&i| brute.contains(&out.genomes[i][0].to_bits()));
    let distinct: BTreeSet<u64> = out.genomes.iter().map(|g| g[0].to_bits()).collect();
    let passed = out.trials.len() == cfg.budget
        && on_grid
        && returned == archive_front
        && in_true_front
        && distinct.len() == cfg.budget
        && returned.len() == cfg.budget;
    Ok(Check::new(
        "nsga2_mock",
        passed,
        format!(
            "{} trials on a {}-point grid, {} distinct, front {} of {} brute-force optimal points",
            out.trials.len(),
            grid.len(),
            distinct.len(),
            returned.len(),
            brute.len()
        ),
    ))
}

/// The fast checks, in a fixed order.
pub fn run_all(seed: u64) -> Result<Vec<Check>> {
    Ok(vec![
        check_gradients(seed, 20)?,
        check_rsa_oracles(seed, 100)?,
        check_sort_oracle(seed, 100, 50),
        check_nucleus_law(seed, 1000)?,
        check_nsga2_mock(seed)?,
    ])
}
