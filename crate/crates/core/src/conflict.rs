//! Representational conflict between a new task and prior task-nets.
//!
//! Both networks see the same samples of the new task. Each trunk position
//! yields a representational dissimilarity matrix (RDM) per network, and the
//! rank correlation of the two RDMs becomes a per-layer conflict score.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jointnet::JointNet;
use crate::tensor::{dot, Tensor};
use crate::TaskId;

/// Lower and upper clamp margin for per-layer scores.
pub const SCORE_EPS: f64 = 1e-6;

/// Slack when comparing cumulative mass against the grow coefficient.
const MASS_TOL: f64 = 1e-12;

/// Post-activations of one network, one `[N, features]` matrix per trunk
/// position, all over the same N samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStack {
    layers: Vec<Tensor>,
}

impl ActivationStack {
    pub fn new(layers: Vec<Tensor>) -> Result<Self> {
        let n = layers
            .first()
            .ok_or_else(|| {
                Error::InvalidArgument("activation stack needs at least one layer".into())
            })?
            .rows();
        if n < 3 {
            return Err(Error::InvalidArgument(format!(
                "RSA needs at least 3 samples, got {n}"
            )));
        }
        let mut flat = Vec::with_capacity(layers.len());
        for (l, t) in layers.into_iter().enumerate() {
            if t.rows() != n {
                return Err(Error::InvalidArgument(format!(
                    "layer {l} has {} samples, expected {n}",
                    t.rows()
                )));
            }
            let w = t.row_len();
            flat.push(t.reshape(&[n, w])?);
        }
        Ok(ActivationStack { layers: flat })
    }

    pub fn samples(&self) -> usize {
        self.layers[0].rows()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }
}

/// Run `samples` through a task-net and keep every trunk post-activation.
pub fn collect_activations(
    net: &JointNet,
    task: TaskId,
    samples: &Tensor,
) -> Result<ActivationStack> {
    if samples.rows() < 3 {
        return Err(Error::InvalidArgument(format!(
            "RSA needs at least 3 samples, got {}",
            samples.rows()
        )));
    }
    ActivationStack::new(net.trunk_activations(task, samples)?)
}

/// Pearson correlation, `None` when either input has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let zx = standardize(x)?;
    let zy = standardize(y)?;
    Some(dot(&zx, &zy).clamp(-1.0, 1.0))
}

/// Center and scale to unit Euclidean norm.
fn standardize(x: &[f64]) -> Option<Vec<f64>> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let centered: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let ss = dot(&centered, &centered);
    let scale = x.iter().map(|v| v * v).sum::<f64>();
    if ss <= 1e-300 || ss <= 1e-24 * scale {
        return None;
    }
    let inv = 1.0 / ss.sqrt();
    Some(centered.into_iter().map(|v| v * inv).collect())
}

/// Ranks starting at 1, ties receive the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && x[order[j]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

/// Spearman rank correlation, `None` when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Dissimilarity matrix `1 - pearson(row i, row j)` over samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Rdm {
    pub matrix: Tensor,
    /// Rows whose correlation is undefined; their entries are set to 1.
    pub zero_variance_rows: usize,
}

impl Rdm {
    pub fn upper_triangle(&self) -> Vec<f64> {
        let n = self.matrix.rows();
        let d = self.matrix.data();
        let mut out = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            out.extend_from_slice(&d[i * n + i + 1..(i + 1) * n]);
        }
        out
    }
}

pub fn rdm(acts: &Tensor) -> Result<Rdm> {
    let n = acts.rows();
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "RDM needs at least 3 rows, got {n}"
        )));
    }
    let z: Vec<Option<Vec<f64>>> = (0..n).map(|i| standardize(acts.row(i))).collect();
    let zero_variance_rows = z.iter().filter(|r| r.is_none()).count();
    if zero_variance_rows > 0 {
        log::warn!("{zero_variance_rows} of {n} activation rows have zero variance");
    }
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = match (&z[i], &z[j]) {
                (Some(a), Some(b)) => 1.0 - dot(a, b).clamp(-1.0, 1.0),
                _ => 1.0,
            };
            m[i * n + j] = v;
            m[j * n + i] = v;
        }
    }
    Ok(Rdm {
        matrix: Tensor::new(vec![n, n], m)?,
        zero_variance_rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RsaScore {
    /// Negated Spearman correlation of the two RDMs, in `[-1, 1]`.
    pub rho: f64,
    /// True when a triangle was constant and `rho` fell back to 0.
    pub degenerate: bool,
}

pub fn rsa_dissimilarity(a: &Rdm, b: &Rdm) -> Result<RsaScore> {
    if a.matrix.shape() != b.matrix.shape() {
        return Err(Error::shape(
            "rsa",
            format!("{:?}", a.matrix.shape()),
            b.matrix.shape(),
        ));
    }
    Ok(match spearman(&a.upper_triangle(), &b.upper_triangle()) {
        Some(s) => RsaScore {
            rho: -s,
            degenerate: false,
        },
        None => {
            log::warn!("constant RDM triangle, using neutral dissimilarity");
            RsaScore {
                rho: 0.0,
                degenerate: true,
            }
        }
    })
}

/// How per-layer scores are collapsed into one task score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConflictNorm {
    /// Euclidean norm divided by sqrt(L).
    #[default]
    L2,
    /// Sum divided by L.
    L1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictProfile {
    pub task: TaskId,
    pub candidate: TaskId,
    pub raw: Vec<f64>,
    pub scores: Vec<f64>,
    pub distribution: Vec<f64>,
    pub task_score: f64,
    /// Degenerate RDMs or rank comparisons met while computing the profile.
    pub warnings: usize,
}

pub fn score_from_rho(rho: f64) -> f64 {
    ((rho + 1.0) / 2.0).clamp(SCORE_EPS, 1.0 - SCORE_EPS)
}

pub fn task_conflict(scores: &[f64], norm: ConflictNorm) -> f64 {
    let l = scores.len() as f64;
    match norm {
        ConflictNorm::L2 => scores.iter().map(|s| s * s).sum::<f64>().sqrt() / l.sqrt(),
        ConflictNorm::L1 => scores.iter().map(|s| s.abs()).sum::<f64>() / l,
    }
}

pub fn conflict_distribution(scores: &[f64]) -> Vec<f64> {
    let total: f64 = scores.iter().sum();
    scores.iter().map(|s| s / total).collect()
}

/// Profile from precomputed RDMs of the new task's independent net and a
/// candidate's task-net.
pub fn profile_from_rdms(
    task: TaskId,
    candidate: TaskId,
    own: &[Rdm],
    other: &[Rdm],
    norm: ConflictNorm,
) -> Result<ConflictProfile> {
    if own.len() != other.len() {
        return Err(Error::InvalidArgument(format!(
            "depth mismatch: {} vs {} positions",
            own.len(),
            other.len()
        )));
    }
    let mut raw = Vec::with_capacity(own.len());
    let mut warnings = 0;
    for (a, b) in own.iter().zip(other) {
        let r = rsa_dissimilarity(a, b)?;
        warnings += usize::from(r.degenerate) + usize::from(a.zero_variance_rows > 0);
        warnings += usize::from(b.zero_variance_rows > 0);
        raw.push(r.rho);
    }
    let scores: Vec<f64> = raw.iter().map(|&r| score_from_rho(r)).collect();
    Ok(ConflictProfile {
        task,
        candidate,
        distribution: conflict_distribution(&scores),
        task_score: task_conflict(&scores, norm),
        raw,
        scores,
        warnings,
    })
}

pub fn stack_rdms(stack: &ActivationStack) -> Result<Vec<Rdm>> {
    stack.layers().iter().map(rdm).collect()
}

pub fn layer_conflicts(
    task: TaskId,
    candidate: TaskId,
    own: &ActivationStack,
    other: &ActivationStack,
    norm: ConflictNorm,
) -> Result<ConflictProfile> {
    if own.samples() != other.samples() {
        return Err(Error::InvalidArgument(
            "activation stacks use different sample counts".into(),
        ));
    }
    profile_from_rdms(
        task,
        candidate,
        &stack_rdms(own)?,
        &stack_rdms(other)?,
        norm,
    )
}

/// Smallest set of positions, taken in order of decreasing mass (ties to
/// the lower position), whose cumulative mass reaches `delta`.
pub fn nucleus(distribution: &[f64], delta: f64) -> Result<BTreeSet<usize>> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::InvalidArgument(format!(
            "grow coefficient {delta} outside [0, 1]"
        )));
    }
    if delta == 0.0 {
        return Ok(BTreeSet::new());
    }
    if delta == 1.0 {
        return Ok((0..distribution.len()).collect());
    }
    let mut order: Vec<usize> = (0..distribution.len()).collect();
    order.sort_by(|&a, &b| distribution[b].total_cmp(&distribution[a]).then(a.cmp(&b)));
    let mut out = BTreeSet::new();
    let mut mass = 0.0;
    for pos in order {
        out.insert(pos);
        mass += distribution[pos];
        if mass + MASS_TOL >= delta {
            break;
        }
    }
    Ok(out)
}

/// Debug dump with one row per (candidate, layer).
pub fn write_profiles_csv<W: Write>(mut w: W, profiles: &[ConflictProfile]) -> Result<()> {
    writeln!(w, "task,candidate,layer,rho,score,prob")?;
    for p in profiles {
        for l in 0..p.raw.len() {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                p.task, p.candidate, l, p.raw[l], p.scores[l], p.distribution[l]
            )?;
        }
    }
    Ok(())
}
