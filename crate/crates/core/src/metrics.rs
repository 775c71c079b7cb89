//! Run reports, speedup ratios and report emission.
//!
//! A [`RunReport`] aggregates one mode's batch: per-query token counts and
//! latencies plus the batch makespan. [`speedup_ratio`] compares token
//! generation rates between modes, [`latency_report`] tabulates makespans,
//! and [`emit_reports`] writes the whole thing as plot-ready artifacts:
//! one summary CSV, one timeline JSONL per mode, and per-query answer
//! files. Emission is idempotent — identical inputs produce identical
//! bytes, so reruns are diffable.

use crate::engine::Mode;
use crate::exec::{ResourceClass, TimelineEvent};
use crate::num::Scalar;
use crate::pipeline::BatchResult;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("baseline run has no positive token rate")]
    DivisionByZeroBaseline,
    #[error("no runs to report")]
    EmptyRunSet,
    #[error("failed writing {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

/// Per-query facts inside a [`RunReport`].
#[derive(Debug, Clone)]
pub struct QueryStat<S: Scalar> {
    pub query_id: String,
    /// Output tokens generated for this query, as counted by the backend.
    pub tokens: usize,
    /// Submission-to-finish latency of this query.
    pub elapsed: S,
    pub answer: String,
}

impl<S: Scalar> QueryStat<S> {
    pub fn answer_bytes(&self) -> usize {
        self.answer.len()
    }
}

/// Aggregated outcome of running one mode over a batch of queries.
#[derive(Debug, Clone)]
pub struct RunReport<S: Scalar> {
    pub mode: Mode,
    pub queries: Vec<QueryStat<S>>,
    /// Batch start to last completion.
    pub makespan: S,
    /// Same span restricted to generation units (search excluded).
    pub generation_elapsed: S,
    /// Token rate relative to the Normal mode; exactly 1.0 for Normal
    /// itself. Filled in by [`apply_speedups`].
    pub speedup_vs_normal: S,
    pub timeline: Vec<TimelineEvent<S>>,
}

impl<S: Scalar> RunReport<S> {
    /// Folds a finished batch into a report. Failed queries contribute an
    /// error note as their answer so artifacts stay honest.
    pub fn from_batch(mode: Mode, batch: &BatchResult<S>) -> Self {
        let queries = batch
            .jobs
            .iter()
            .map(|j| QueryStat {
                query_id: j.query_id.clone(),
                tokens: j.output_tokens,
                elapsed: j.elapsed,
                answer: match &j.answer {
                    Ok(a) => a.clone(),
                    Err(e) => format!("ERROR: {e}"),
                },
            })
            .collect();
        RunReport {
            mode,
            queries,
            makespan: batch.makespan,
            generation_elapsed: generation_span(&batch.timeline),
            speedup_vs_normal: S::one(),
            timeline: batch.timeline.clone(),
        }
    }

    pub fn total_tokens(&self) -> usize {
        self.queries.iter().map(|q| q.tokens).sum()
    }

    /// Tokens generated per time unit over the whole batch.
    pub fn token_rate(&self) -> S {
        if self.makespan <= S::zero() {
            return S::zero();
        }
        S::from_usize_lossy(self.total_tokens()) / self.makespan
    }
}

/// Width of the window holding all non-search units.
fn generation_span<S: Scalar>(timeline: &[TimelineEvent<S>]) -> S {
    let gen: Vec<&TimelineEvent<S>> = timeline
        .iter()
        .filter(|e| e.class != ResourceClass::Search)
        .collect();
    let Some(first) = gen.first() else {
        return S::zero();
    };
    let (mut lo, mut hi) = (first.start, first.end);
    for e in &gen {
        if e.start < lo {
            lo = e.start;
        }
        if e.end > hi {
            hi = e.end;
        }
    }
    hi - lo
}

/// Token generation rate of `run` relative to `baseline`: how many times
/// more tokens per time unit the run produced.
pub fn speedup_ratio<S: Scalar>(
    run: &RunReport<S>,
    baseline: &RunReport<S>,
) -> Result<S, MetricsError> {
    let base = baseline.token_rate();
    if base <= S::zero() {
        return Err(MetricsError::DivisionByZeroBaseline);
    }
    Ok(run.token_rate() / base)
}

/// Fills `speedup_vs_normal` on every report, measured against the Normal
/// run when present (the first report otherwise). The baseline's own entry
/// is set to exactly 1.0, not computed.
pub fn apply_speedups<S: Scalar>(reports: &mut [RunReport<S>]) -> Result<(), MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::EmptyRunSet);
    }
    let base_idx = reports
        .iter()
        .position(|r| r.mode == Mode::Normal)
        .unwrap_or(0);
    let baseline = reports[base_idx].clone();
    for (i, report) in reports.iter_mut().enumerate() {
        report.speedup_vs_normal = if i == base_idx {
            S::one()
        } else {
            speedup_ratio(report, &baseline)?
        };
    }
    Ok(())
}

/// One row of the latency table.
#[derive(Debug, Clone)]
pub struct LatencyRow<S: Scalar> {
    pub mode: Mode,
    pub makespan: S,
    pub generation_elapsed: S,
    /// Baseline makespan divided by this mode's makespan: how many times
    /// faster the batch finished.
    pub latency_ratio: S,
}

/// Per-mode makespans and how they compare to the Normal baseline (or the
/// first run when Normal is absent). A single run compares to itself, so
/// its ratio is 1.0.
pub fn latency_report<S: Scalar>(
    reports: &[RunReport<S>],
) -> Result<Vec<LatencyRow<S>>, MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::EmptyRunSet);
    }
    let base_idx = reports
        .iter()
        .position(|r| r.mode == Mode::Normal)
        .unwrap_or(0);
    let base = reports[base_idx].makespan;
    Ok(reports
        .iter()
        .enumerate()
        .map(|(i, r)| LatencyRow {
            mode: r.mode,
            makespan: r.makespan,
            generation_elapsed: r.generation_elapsed,
            latency_ratio: if i == base_idx || r.makespan <= S::zero() {
                S::one()
            } else {
                base / r.makespan
            },
        })
        .collect())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MetricsError + '_ {
    move |source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes all artifacts for a set of mode runs under `dir`:
///
/// * `summary.csv` — columns `mode,query_id,tokens,elapsed,makespan,speedup`,
///   one row per (mode, query); `makespan` and `speedup` are mode-level.
/// * `latency.csv` — per-mode makespan, generation-only elapsed and ratio.
/// * `timeline_<mode>.jsonl` — one unit event per line.
/// * `answers/<mode>/<query_id>.txt` — the merged answer text.
///
/// Overwrites in place; same reports produce byte-identical files. Returns
/// the written paths.
pub fn emit_reports<S: Scalar>(
    reports: &[RunReport<S>],
    dir: &Path,
) -> Result<Vec<PathBuf>, MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::EmptyRunSet);
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();

    let summary_path = dir.join("summary.csv");
    {
        let mut w = csv::Writer::from_path(&summary_path).map_err(|e| MetricsError::Csv {
            path: summary_path.clone(),
            source: e,
        })?;
        let csv_fail = |e: csv::Error| MetricsError::Csv {
            path: summary_path.clone(),
            source: e,
        };
        w.write_record(["mode", "query_id", "tokens", "elapsed", "makespan", "speedup"])
            .map_err(csv_fail)?;
        for r in reports {
            for q in &r.queries {
                w.write_record([
                    r.mode.as_str().to_string(),
                    q.query_id.clone(),
                    q.tokens.to_string(),
                    q.elapsed.to_string(),
                    r.makespan.to_string(),
                    r.speedup_vs_normal.to_string(),
                ])
                .map_err(csv_fail)?;
            }
        }
        w.flush().map_err(io_err(&summary_path))?;
    }
    written.push(summary_path);

    let latency_path = dir.join("latency.csv");
    {
        let rows = latency_report(reports)?;
        let mut w = csv::Writer::from_path(&latency_path).map_err(|e| MetricsError::Csv {
            path: latency_path.clone(),
            source: e,
        })?;
        let csv_fail = |e: csv::Error| MetricsError::Csv {
            path: latency_path.clone(),
            source: e,
        };
        w.write_record(["mode", "makespan", "generation_elapsed", "latency_ratio"])
            .map_err(csv_fail)?;
        for row in rows {
            w.write_record([
                row.mode.as_str().to_string(),
                row.makespan.to_string(),
                row.generation_elapsed.to_string(),
                row.latency_ratio.to_string(),
            ])
            .map_err(csv_fail)?;
        }
        w.flush().map_err(io_err(&latency_path))?;
    }
    written.push(latency_path);

    for r in reports {
        let path = dir.join(format!("timeline_{}.jsonl", r.mode));
        let mut lines = String::new();
        for ev in &r.timeline {
            lines.push_str(&serde_json::to_string(ev).expect("timeline events serialize"));
            lines.push('\n');
        }
        fs::write(&path, lines).map_err(io_err(&path))?;
        written.push(path);
    }

    for r in reports {
        let mode_dir = dir.join("answers").join(r.mode.as_str());
        fs::create_dir_all(&mode_dir).map_err(io_err(&mode_dir))?;
        for q in &r.queries {
            let path = mode_dir.join(format!("{}.txt", q.query_id));
            fs::write(&path, &q.answer).map_err(io_err(&path))?;
            written.push(path);
        }
    }

    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn stat(id: &str, tokens: usize, elapsed: f64) -> QueryStat<f64> {
        QueryStat {
            query_id: id.to_string(),
            tokens,
            elapsed,
            answer: format!("answer for {id}"),
        }
    }

    fn report(mode: Mode, tokens_per_query: usize, makespan: f64) -> RunReport<f64> {
        RunReport {
            mode,
            queries: vec![
                stat("q1", tokens_per_query, makespan),
                stat("q2", tokens_per_query, makespan),
            ],
            makespan,
            generation_elapsed: makespan,
            speedup_vs_normal: 1.0,
            timeline: vec![TimelineEvent {
                job: Some(1),
                stage: "Dec:1".to_string(),
                start: 0.0,
                end: makespan,
                class: ResourceClass::MemoryBandwidth,
            }],
        }
    }

    #[test]
    fn identical_runs_have_unit_speedup() {
        let a = report(Mode::Normal, 100, 10.0);
        assert_eq!(speedup_ratio(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn double_rate_doubles_the_ratio() {
        let base = report(Mode::Normal, 100, 10.0);
        let fast = report(Mode::DepExp, 100, 5.0);
        assert!((speedup_ratio(&fast, &base).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_rate_baseline_is_rejected() {
        let silent = report(Mode::Normal, 0, 10.0);
        let run = report(Mode::DepExp, 100, 5.0);
        assert!(matches!(
            speedup_ratio(&run, &silent),
            Err(MetricsError::DivisionByZeroBaseline)
        ));
        let instant = report(Mode::Normal, 100, 0.0);
        assert!(matches!(
            speedup_ratio(&run, &instant),
            Err(MetricsError::DivisionByZeroBaseline)
        ));
    }

    #[test]
    fn normal_speedup_is_exactly_one() {
        let mut reports = vec![
            report(Mode::DepExp, 100, 4.0),
            report(Mode::Normal, 100, 12.0),
        ];
        apply_speedups(&mut reports).unwrap();
        assert_eq!(reports[1].speedup_vs_normal, 1.0);
        assert!((reports[0].speedup_vs_normal - 3.0).abs() < 1e-12);
    }

    #[test]
    fn latency_table_ratios() {
        let reports = vec![
            report(Mode::Normal, 100, 12.0),
            report(Mode::PipSch, 100, 4.0),
        ];
        let rows = latency_report(&reports).unwrap();
        assert_eq!(rows[0].latency_ratio, 1.0);
        assert!((rows[1].latency_ratio - 3.0).abs() < 1e-12);

        let single = latency_report(&reports[1..]).unwrap();
        assert_eq!(single[0].latency_ratio, 1.0, "lone mode is its own baseline");
        assert!(matches!(
            latency_report::<f64>(&[]),
            Err(MetricsError::EmptyRunSet)
        ));
    }

    #[test]
    fn generation_span_ignores_search_units() {
        let timeline = vec![
            TimelineEvent {
                job: None,
                stage: "Search".to_string(),
                start: 0.0,
                end: 5.0,
                class: ResourceClass::Search,
            },
            TimelineEvent {
                job: None,
                stage: "Pre:1".to_string(),
                start: 5.0,
                end: 7.0,
                class: ResourceClass::Compute,
            },
            TimelineEvent {
                job: None,
                stage: "Dec:1".to_string(),
                start: 7.0,
                end: 15.0,
                class: ResourceClass::MemoryBandwidth,
            },
        ];
        assert_eq!(generation_span(&timeline), 10.0);
    }

    #[test]
    fn emit_writes_every_artifact_and_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let mut reports = vec![
            report(Mode::Normal, 100, 12.0),
            report(Mode::DepExp, 100, 4.0),
        ];
        apply_speedups(&mut reports).unwrap();

        let written = emit_reports(&reports, dir.path()).unwrap();
        // 1 summary + 1 latency + 2 timelines + 2 modes × 2 answers.
        assert_eq!(written.len(), 2 + 2 + 4);
        let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(summary.lines().count(), 1 + 2 * 2, "header + modes × queries");
        assert!(summary.starts_with("mode,query_id,tokens,elapsed,makespan,speedup"));
        assert!(dir.path().join("timeline_normal.jsonl").exists());
        assert!(dir.path().join("timeline_depexp.jsonl").exists());
        let answer = fs::read_to_string(dir.path().join("answers/depexp/q2.txt")).unwrap();
        assert_eq!(answer, "answer for q2");

        let before: BTreeMap<PathBuf, Vec<u8>> = written
            .iter()
            .map(|p| (p.clone(), fs::read(p).unwrap()))
            .collect();
        emit_reports(&reports, dir.path()).unwrap();
        for (path, bytes) in before {
            assert_eq!(fs::read(&path).unwrap(), bytes, "rerun changed {path:?}");
        }
    }

    #[test]
    fn csv_speedup_matches_memory_within_tolerance() {
        let dir = tempfile::tempdir().unwrap();
        let mut reports = vec![
            report(Mode::Normal, 137, 11.73),
            report(Mode::DepExp, 137, 3.21),
            report(Mode::PipSch, 411, 7.9),
        ];
        apply_speedups(&mut reports).unwrap();
        emit_reports(&reports, dir.path()).unwrap();

        let mut rdr = csv::Reader::from_path(dir.path().join("summary.csv")).unwrap();
        let mut seen = 0usize;
        for row in rdr.records() {
            let row = row.unwrap();
            let mode: Mode = row[0].parse().unwrap();
            let report = reports.iter().find(|r| r.mode == mode).unwrap();
            let speedup: f64 = row[5].parse().unwrap();
            assert!((speedup - report.speedup_vs_normal).abs() < 1e-9);
            let makespan: f64 = row[4].parse().unwrap();
            assert!((makespan - report.makespan).abs() < 1e-9);
            seen += 1;
        }
        assert_eq!(seen, 3 * 2);
    }
}
