//! `report`: summaries of one or more completed run directories. Several
//! directories (usually the same config under different seeds) are averaged
//! trial by trial.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use grownet::search::{fmt_sig6, non_dominated_sort, Objectives, TrialKind, TrialResult};
use grownet::TaskId;

use crate::run::{RunManifest, RunResults, RunStatus, RESULTS, TABULAR};
use crate::CliError;

pub struct LoadedRun {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub results: RunResults,
    pub tabular: Option<String>,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun, CliError> {
    let manifest = RunManifest::read(dir)?;
    let bad = |reason: String| CliError::RunDir {
        dir: dir.to_path_buf(),
        reason,
    };
    if manifest.status != RunStatus::Completed {
        return Err(bad(format!(
            "run is not complete (status {:?}{})",
            manifest.status,
            manifest
                .error
                .as_ref()
                .map_or_else(String::new, |e| format!(": {e}"))
        )));
    }
    let text = fs::read_to_string(dir.join(RESULTS))
        .map_err(|e| bad(format!("cannot read {RESULTS}: {e}")))?;
    let results: RunResults =
        serde_json::from_str(&text).map_err(|e| bad(format!("corrupt {RESULTS}: {e}")))?;
    let tabular = fs::read_to_string(dir.join(TABULAR)).ok();
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        manifest,
        results,
        tabular,
    })
}

/// Trials of different runs that describe the same experiment cell: same
/// kind and coefficients, or same index for random growth.
fn group_key(t: &TrialResult) -> String {
    match t.kind {
        TrialKind::RandomGrowth => format!("random#{:08}", t.trial_id),
        _ => {
            let d: Vec<String> = t.deltas.iter().map(|&x| fmt_sig6(x)).collect();
            format!("{:?}[{}]", t.kind, d.join(";"))
        }
    }
}

fn kind_name(k: TrialKind) -> &'static str {
    match k {
        TrialKind::Sequence => "sequence",
        TrialKind::RandomGrowth => "random_growth",
        TrialKind::Mock => "mock",
    }
}

/// Mean over runs of one experiment cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub trial_id: usize,
    pub kind: TrialKind,
    pub deltas: Vec<f64>,
    /// Successful trials averaged.
    pub runs: usize,
    pub avg_accuracy: f64,
    pub gain_signed: f64,
    pub gain_paper_literal: f64,
    pub param_count: f64,
    /// Per step: (average accuracy, signed gain, literal gain).
    pub series: Vec<(f64, f64, f64)>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Average every cell over the runs where it succeeded.
pub fn summarize(runs: &[LoadedRun]) -> Result<Vec<CellSummary>, CliError> {
    let mut cells: BTreeMap<String, Vec<&TrialResult>> = BTreeMap::new();
    let mut first_seen: Vec<String> = Vec::new();
    for run in runs {
        for t in run.results.trials.iter().filter(|t| t.is_ok()) {
            let key = group_key(t);
            if !cells.contains_key(&key) {
                first_seen.push(key.clone());
            }
            cells.entry(key).or_default().push(t);
        }
    }
    first_seen
        .into_iter()
        .map(|key| {
            let ts = &cells[&key];
            let steps = ts[0].steps.len();
            if ts.iter().any(|t| t.steps.len() != steps) {
                return Err(CliError::Run(format!(
                    "trials of cell {key} have different step counts"
                )));
            }
            let series = (0..steps)
                .map(|i| {
                    (
                        mean(ts.iter().map(|t| t.steps[i].avg_accuracy)),
                        mean(ts.iter().map(|t| t.steps[i].gain_signed)),
                        mean(ts.iter().map(|t| t.steps[i].gain_paper_literal)),
                    )
                })
                .collect();
            Ok(CellSummary {
                trial_id: ts[0].trial_id,
                kind: ts[0].kind,
                deltas: ts[0].deltas.clone(),
                runs: ts.len(),
                avg_accuracy: mean(ts.iter().map(|t| t.avg_accuracy())),
                gain_signed: mean(ts.iter().map(|t| t.gain_signed)),
                gain_paper_literal: mean(ts.iter().map(|t| t.gain_paper_literal)),
                param_count: mean(ts.iter().map(|t| t.param_count as f64)),
                series,
            })
        })
        .collect()
}

/// Indices of the non-dominated cells under (-gain, params).
pub fn cell_front(cells: &[CellSummary]) -> Vec<usize> {
    let points: Vec<Objectives> = cells
        .iter()
        .map(|c| Objectives {
            neg_gain: -c.gain_signed,
            params: c.param_count,
        })
        .collect();
    let mut front = non_dominated_sort(&points)
        .into_iter()
        .next()
        .unwrap_or_default();
    front.sort_by_key(|&i| cells[i].trial_id);
    front
}

fn deltas_text(d: &[f64]) -> String {
    if d.is_empty() {
        "-".to_string()
    } else {
        d.iter().map(|&x| fmt_sig6(x)).collect::<Vec<_>>().join(";")
    }
}

fn series_table(
    out: &mut String,
    title: &str,
    cells: &[CellSummary],
    pick: fn(&(f64, f64, f64)) -> f64,
) {
    let steps = cells.iter().map(|c| c.series.len()).max().unwrap_or(0);
    let _ = writeln!(out, "{title}");
    let mut header = format!(
        "{:<7} {:<14} {:<16} {:>4}",
        "trial", "kind", "deltas", "runs"
    );
    for i in 0..steps {
        let _ = write!(header, " {:>10}", format!("step_{i}"));
    }
    let _ = writeln!(out, "{header}");
    for c in cells {
        let mut line = format!(
            "{:<7} {:<14} {:<16} {:>4}",
            c.trial_id,
            kind_name(c.kind),
            deltas_text(&c.deltas),
            c.runs
        );
        for s in &c.series {
            let _ = write!(line, " {:>10}", fmt_sig6(pick(s)));
        }
        let _ = writeln!(out, "{line}");
    }
    let _ = writeln!(out);
}

/// Text report over one or more run directories.
pub fn report(dirs: &[PathBuf]) -> Result<String, CliError> {
    if dirs.is_empty() {
        return Err(CliError::Run(
            "report needs at least one run directory".into(),
        ));
    }
    let runs = dirs
        .iter()
        .map(|d| load_run(d))
        .collect::<Result<Vec<_>, _>>()?;
    let ids: &Vec<TaskId> = &runs[0].results.task_ids;
    if let Some(other) = runs.iter().find(|r| &r.results.task_ids != ids) {
        return Err(CliError::RunDir {
            dir: other.dir.clone(),
            reason: "task stream differs from the first run".into(),
        });
    }
    let cfg = &runs[0].manifest.config;
    let mut out = String::new();
    let seeds: Vec<String> = runs.iter().map(|r| r.manifest.seed.to_string()).collect();
    let _ = writeln!(
        out,
        "runs: {} (seeds {})\nbenchmark: {:?}, mode: {:?}, tasks: {}\n",
        runs.len(),
        seeds.join(", "),
        cfg.benchmark.kind,
        cfg.search.mode,
        ids.iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(" ")
    );
    for r in &runs {
        if let (Some(tab), Some(t)) = (&r.tabular, r.manifest.representative_trial) {
            let _ = writeln!(out, "tabular network of trial {t} in {}", r.dir.display());
            let _ = writeln!(out, "{}", tab.trim_end());
            let _ = writeln!(out);
        }
    }
    let cells = summarize(&runs)?;
    series_table(&mut out, "average accuracy after each task", &cells, |s| {
        s.0
    });
    series_table(&mut out, "signed gain after each task", &cells, |s| s.1);
    series_table(
        &mut out,
        "literal gain after each task",
        &cells,
        |s| s.2,
    );

    let front = cell_front(&cells);
    if cfg.search.mode != crate::config::SearchMode::Single {
        let _ = writeln!(out, "pareto front");
        let _ = writeln!(
            out,
            "{:<7} {:<16} {:>4} {:>12} {:>12} {:>18} {:>12}",
            "trial",
            "deltas",
            "runs",
            "avg_accuracy",
            "gain_signed",
            "gain_paper_literal",
            "param_count"
        );
        for &i in &front {
            let c = &cells[i];
            let _ = writeln!(
                out,
                "{:<7} {:<16} {:>4} {:>12} {:>12} {:>18} {:>12}",
                c.trial_id,
                deltas_text(&c.deltas),
                c.runs,
                fmt_sig6(c.avg_accuracy),
                fmt_sig6(c.gain_signed),
                fmt_sig6(c.gain_paper_literal),
                fmt_sig6(c.param_count)
            );
        }
    }
    Ok(out)
}
