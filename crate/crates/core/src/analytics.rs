//! Recording duty cycle, trial accuracy with exact binomial significance, and
//! cross-session performance series.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archive::{self, ArchiveError, SessionIndex};
use crate::schema::{self, SchemaError, TrialResult};

pub const CHANCE: f64 = 1.0 / 3.0;
pub const SERIES_CSV_HEADER: &str = "session,overall_acc,b0_acc,b1_acc,b2_acc,overall_p";

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("{0} must be positive")]
    ZeroDenominator(&'static str),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("summary line disagrees with the rows: {0}")]
    SummaryMismatch(String),
    #[error("result file has no summary line")]
    MissingSummary,
    #[error("results: {0}")]
    Results(#[from] SchemaError),
    #[error("session {0} not found in archive")]
    MissingSession(String),
    #[error("{0}")]
    Archive(#[from] ArchiveError),
}

pub fn duty_cycle(recorded_s: f64, observed_s: f64) -> Result<f64, AnalyticsError> {
    if !(observed_s > 0.0) {
        return Err(AnalyticsError::ZeroDenominator("observed_s"));
    }
    if !(recorded_s >= 0.0) || recorded_s > observed_s {
        return Err(AnalyticsError::Invalid(format!(
            "recorded_s {recorded_s} outside [0, {observed_s}]"
        )));
    }
    Ok(recorded_s / observed_s)
}

pub fn frames_to_seconds(frame_count: u64, fps: f64) -> Result<f64, AnalyticsError> {
    if !(fps > 0.0) {
        return Err(AnalyticsError::ZeroDenominator("fps"));
    }
    Ok(frame_count as f64 / fps)
}

/// One-sided exact tail `P[X >= k]` for `X ~ Binomial(n, p0)`.
///
/// Terms are summed in log space (log-sum-exp), so tails far below the
/// smallest normal double still come out as accurate small numbers. Below
/// the mean the lower tail is summed instead and complemented, which keeps
/// the result monotone in `k` near 1.
pub fn binomial_pvalue(n: u64, k: u64, p0: f64) -> Result<f64, AnalyticsError> {
    if k > n {
        return Err(AnalyticsError::Invalid(format!("k = {k} exceeds n = {n}")));
    }
    if !(p0 > 0.0 && p0 < 1.0) {
        return Err(AnalyticsError::Invalid(format!("p0 = {p0} not in (0, 1)")));
    }
    if k == 0 {
        return Ok(1.0);
    }
    if (k as f64) <= n as f64 * p0 {
        return Ok((1.0 - log_sum_terms(n, 0, k - 1, p0).exp()).max(0.0));
    }
    Ok(log_sum_terms(n, k, n, p0).exp().min(1.0))
}

/// `ln sum_{i=lo..=hi} C(n,i) p^i (1-p)^(n-i)`.
fn log_sum_terms(n: u64, lo: u64, hi: u64, p0: f64) -> f64 {
    let (lp, lq) = (p0.ln(), (-p0).ln_1p());
    let ln_fact = |m: u64| -> f64 { (2..=m).map(|j| (j as f64).ln()).sum() };
    let mut ln_c = ln_fact(n) - ln_fact(lo) - ln_fact(n - lo);
    let mut terms = Vec::with_capacity((hi - lo + 1) as usize);
    for i in lo..=hi {
        terms.push(ln_c + i as f64 * lp + (n - i) as f64 * lq);
        if i < n {
            ln_c += ((n - i) as f64).ln() - ((i + 1) as f64).ln();
        }
    }
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
    max + sum.ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ButtonStats {
    pub button: u8,
    /// Trials whose stimulus maps to this button, timeouts included.
    pub n: u32,
    pub n_correct: u32,
    pub accuracy: Option<f64>,
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStats {
    pub session_id: String,
    pub observed_s: f64,
    pub recorded_s: f64,
    pub duty_cycle: f64,
    pub n_trials: u32,
    pub n_correct: u32,
    pub per_button: [ButtonStats; 3],
    pub overall_accuracy: Option<f64>,
    pub overall_p_value: Option<f64>,
}

/// Trial part of [`SessionStats`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialStats {
    pub n_trials: u32,
    pub n_correct: u32,
    pub per_button: [ButtonStats; 3],
    pub overall_accuracy: Option<f64>,
    pub overall_p_value: Option<f64>,
}

fn accuracy_and_p(n: u32, k: u32) -> (Option<f64>, Option<f64>) {
    if n == 0 {
        return (None, None);
    }
    let p = binomial_pvalue(n as u64, k as u64, CHANCE).expect("k <= n and p0 in range");
    (Some(k as f64 / n as f64), Some(p))
}

/// Counts straight from in-memory results.
pub fn stats_from_results(results: &[TrialResult], stimulus_to_button: [u8; 3]) -> TrialStats {
    let mut n = [0u32; 3];
    let mut c = [0u32; 3];
    for r in results {
        let b = stimulus_to_button[r.stimulus_id as usize] as usize;
        n[b] += 1;
        c[b] += r.correct as u32;
    }
    let per_button = [0u8, 1, 2].map(|b| {
        let (accuracy, p_value) = accuracy_and_p(n[b as usize], c[b as usize]);
        ButtonStats {
            button: b,
            n: n[b as usize],
            n_correct: c[b as usize],
            accuracy,
            p_value,
        }
    });
    let n_trials = results.len() as u32;
    let n_correct = c.iter().sum();
    let (overall_accuracy, overall_p_value) = accuracy_and_p(n_trials, n_correct);
    TrialStats {
        n_trials,
        n_correct,
        per_button,
        overall_accuracy,
        overall_p_value,
    }
}

/// Parses a result CSV, checks its summary line against a recount of the
/// body, and computes accuracies.
pub fn trial_stats(result_csv: &str, stimulus_to_button: [u8; 3]) -> Result<TrialStats, AnalyticsError> {
    let file = schema::parse_results_csv(result_csv)?;
    let summary = file.summary.ok_or(AnalyticsError::MissingSummary)?;
    let recount = schema::SessionSummary::from_results(&file.results);
    if recount != summary {
        return Err(AnalyticsError::SummaryMismatch(format!(
            "summary says {}, rows give {}",
            summary.to_csv_line(),
            recount.to_csv_line()
        )));
    }
    Ok(stats_from_results(&file.results, stimulus_to_button))
}

/// Full statistics for one archived session directory.
pub fn session_stats(session_dir: &Path) -> Result<SessionStats, AnalyticsError> {
    let index = archive::read_index(session_dir)?;
    let csv = std::fs::read_to_string(session_dir.join(&index.results_file))
        .map_err(|e| ArchiveError::io(session_dir.join(&index.results_file), e))?;
    let t = trial_stats(&csv, index.stimulus_to_button)?;
    Ok(combine(&index, t))
}

fn combine(index: &SessionIndex, t: TrialStats) -> SessionStats {
    SessionStats {
        session_id: index.session_id.clone(),
        observed_s: index.stats.observed_s,
        recorded_s: index.stats.recorded_s,
        duty_cycle: index.stats.duty_cycle,
        n_trials: t.n_trials,
        n_correct: t.n_correct,
        per_button: t.per_button,
        overall_accuracy: t.overall_accuracy,
        overall_p_value: t.overall_p_value,
    }
}

/// Stats for each requested session, ordered by session timestamp.
pub fn performance_series(
    archive_root: &Path,
    session_ids: &[String],
) -> Result<Vec<SessionStats>, AnalyticsError> {
    let mut ids: Vec<&String> = session_ids.iter().collect();
    ids.sort();
    ids.dedup();
    ids.into_iter()
        .map(|id| {
            let dir = archive_root.join(id);
            if !archive::is_session_id(id) || !dir.join(archive::INDEX_FILE).is_file() {
                return Err(AnalyticsError::MissingSession(id.clone()));
            }
            session_stats(&dir)
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

fn opt_p(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6e}"))
}

/// Plot-friendly CSV of a series.
pub fn series_csv(series: &[SessionStats]) -> String {
    let mut out = String::from(SERIES_CSV_HEADER);
    out.push('\n');
    for s in series {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.session_id,
            opt(s.overall_accuracy),
            opt(s.per_button[0].accuracy),
            opt(s.per_button[1].accuracy),
            opt(s.per_button[2].accuracy),
            opt_p(s.overall_p_value),
        ));
    }
    out
}
