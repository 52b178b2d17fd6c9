use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use super::{run_cascade, CascadeConfig, CascadeModels, CascadeOutcome, Verdict};
use crate::error::{Error, Result};
use crate::preprocess::dataset::Manifest;
use crate::preprocess::{load_rgb, LeafImage};

/// Per-stage accounting over a labeled set.
///
/// Counts are reals so that reports from repeated runs can be averaged.
/// Stage 3 holds everything not decided earlier; a plausible list counts as
/// correct when its first entry is the true class.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub total: f64,
    pub processed: [f64; 3],
    pub correct: [f64; 3],
    /// Inputs that ended with a plausible list.
    pub plausible: f64,
    /// Of those, how many lists contain the true class.
    pub plausible_covered: f64,
}

impl EvalReport {
    /// Builds a report from per-stage tallies; processed counts must add up
    /// to `total` and no stage may have more correct than processed.
    pub fn from_counts(total: f64, processed: [f64; 3], correct: [f64; 3]) -> Result<Self> {
        let sum: f64 = processed.iter().sum();
        if (sum - total).abs() > 1e-9 * total.max(1.0) {
            return Err(Error::invalid(format!("stage counts sum to {sum}, not {total}")));
        }
        if processed.iter().zip(&correct).any(|(p, c)| c > p || *c < 0.0) {
            return Err(Error::invalid("correct count outside [0, processed]"));
        }
        Ok(EvalReport { total, processed, correct, ..Default::default() })
    }

    pub fn record(&mut self, outcome: &CascadeOutcome, label: usize) {
        let s = usize::from(outcome.final_stage() - 1);
        self.total += 1.0;
        self.processed[s] += 1.0;
        if outcome.verdict.first_class() == label {
            self.correct[s] += 1.0;
        }
        if let Verdict::Plausible { ranked, .. } = &outcome.verdict {
            self.plausible += 1.0;
            if ranked.iter().any(|&(c, _)| c == label) {
                self.plausible_covered += 1.0;
            }
        }
    }

    /// Elementwise mean of several reports.
    pub fn average(reports: &[EvalReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::invalid("nothing to average"));
        }
        let n = reports.len() as f64;
        let mut out = EvalReport::default();
        for r in reports {
            out.total += r.total / n;
            out.plausible += r.plausible / n;
            out.plausible_covered += r.plausible_covered / n;
            for s in 0..3 {
                out.processed[s] += r.processed[s] / n;
                out.correct[s] += r.correct[s] / n;
            }
        }
        Ok(out)
    }

    pub fn total_correct(&self) -> f64 {
        self.correct.iter().sum()
    }

    pub fn overall_accuracy(&self) -> f64 {
        self.total_correct() / self.total
    }

    /// Fraction of all inputs that ended at `stage` (1-based).
    pub fn share(&self, stage: usize) -> f64 {
        self.processed[stage - 1] / self.total
    }

    /// Correct at `stage` over all inputs.
    pub fn accuracy_on_entire(&self, stage: usize) -> f64 {
        self.correct[stage - 1] / self.total
    }

    /// Correct at `stage` over the inputs that stage handled.
    pub fn accuracy_on_processed(&self, stage: usize) -> Option<f64> {
        let p = self.processed[stage - 1];
        (p > 0.0).then(|| self.correct[stage - 1] / p)
    }

    pub fn plausible_coverage(&self) -> Option<f64> {
        (self.plausible > 0.0).then(|| self.plausible_covered / self.plausible)
    }

    /// Fixed-width table; the parenthesized figure is accuracy on the
    /// inputs the stage processed.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<8} {:>10} {:>8} {:>10} {:>24}", "stage", "processed", "share", "correct", "accuracy");
        for stage in 1..=3 {
            let processed = self.accuracy_on_processed(stage).map_or("-".to_string(), |a| format!("{:.2}%", 100.0 * a));
            let _ = writeln!(
                s,
                "{:<8} {:>10} {:>7.2}% {:>10} {:>24}",
                stage,
                fmt_count(self.processed[stage - 1]),
                100.0 * self.share(stage),
                fmt_count(self.correct[stage - 1]),
                format!("{:.2}% ({processed})", 100.0 * self.accuracy_on_entire(stage)),
            );
        }
        let _ = writeln!(
            s,
            "{:<8} {:>10} {:>7.2}% {:>10} {:>24}",
            "overall",
            fmt_count(self.total),
            100.0,
            fmt_count(self.total_correct()),
            format!("{:.2}%", 100.0 * self.overall_accuracy()),
        );
        if let Some(c) = self.plausible_coverage() {
            let _ = writeln!(s, "plausible lists: {} (true class listed in {:.2}%)", fmt_count(self.plausible), 100.0 * c);
        }
        s
    }
}

fn fmt_count(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.1}")
    }
}

fn in_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if jobs == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Runs the cascade over in-memory samples. `jobs` = 0 uses the global pool.
pub fn evaluate_samples(
    samples: &[(LeafImage, usize)],
    models: &CascadeModels<'_>,
    cfg: &CascadeConfig,
    jobs: usize,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let outcomes: Vec<Result<CascadeOutcome>> =
        in_pool(jobs, || samples.par_iter().map(|(leaf, _)| run_cascade(leaf, models, cfg)).collect())?;
    let mut report = EvalReport::default();
    for (outcome, (_, label)) in outcomes.into_iter().zip(samples) {
        report.record(&outcome?, *label);
    }
    Ok(report)
}

/// Loads, binarizes and classifies every manifest entry.
pub fn evaluate(manifest: &Manifest, models: &CascadeModels<'_>, cfg: &CascadeConfig, jobs: usize) -> Result<EvalReport> {
    if manifest.is_empty() {
        return Err(Error::invalid("empty manifest"));
    }
    let outcomes: Vec<Result<CascadeOutcome>> = in_pool(jobs, || {
        manifest
            .entries
            .par_iter()
            .map(|e| {
                let path = manifest.resolve(e);
                let leaf = load_rgb(&path).and_then(LeafImage::from_rgb).map_err(|err| match err {
                    Error::NoForeground => Error::invalid(format!("{}: no foreground found", path.display())),
                    other => other,
                })?;
                run_cascade(&leaf, models, cfg)
            })
            .collect()
    })?;
    let mut report = EvalReport::default();
    for (outcome, e) in outcomes.into_iter().zip(&manifest.entries) {
        report.record(&outcome?, e.class_id);
    }
    Ok(report)
}
