use serde::{Deserialize, Serialize};

use crate::search::SearchTrace;
use crate::tuning::TuneLog;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    /// Greedy search seconds; `None` when no timed trace was given.
    pub search_s: Option<f64>,
    pub search_steps: usize,
    /// Prefix tuning seconds; `None` when no timed log was given.
    pub tune_s: Option<f64>,
    pub tune_steps: usize,
    pub hardware: String,
    /// Some timing was missing.
    pub partial: bool,
}

pub fn hardware_note() -> String {
    format!(
        "{} {}, {} worker threads",
        std::env::consts::OS,
        std::env::consts::ARCH,
        rayon::current_num_threads()
    )
}

/// Sums the recorded durations. Search time is the sum of per-step times
/// when every step is timed, else the trace total.
pub fn cost_report(traces: &[&SearchTrace], tune_log: Option<&TuneLog>) -> CostReport {
    let mut partial = false;
    let mut search = 0.0;
    let mut steps = 0;
    for t in traces {
        steps += t.steps.len();
        let per_step: Option<f64> = t.steps.iter().map(|s| s.wall_clock_s).sum();
        match per_step.filter(|_| !t.steps.is_empty()).or(t.wall_clock_s) {
            Some(s) => search += s,
            None => partial = true,
        }
    }
    let search_s = (!traces.is_empty() && !partial).then_some(search);
    let tune_s = tune_log.and_then(|l| l.wall_clock_s);
    if tune_s.is_none() || traces.is_empty() {
        partial = true;
    }
    CostReport {
        search_s,
        search_steps: steps,
        tune_s,
        tune_steps: tune_log.map_or(0, |l| l.losses.len()),
        hardware: hardware_note(),
        partial,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search::{SearchStep, StopReason};

    fn trace(times: &[f64]) -> SearchTrace {
        SearchTrace {
            seeds: vec![256],
            prompt: vec![256],
            steps: times
                .iter()
                .enumerate()
                .map(|(i, &t)| SearchStep {
                    step: i,
                    text_index: i as u64,
                    chosen: 0,
                    lq_before: 1.0,
                    lq_after: 0.5,
                    accepted: true,
                    wall_clock_s: Some(t),
                })
                .collect(),
            stop_reason: StopReason::MaxLength,
            tau: 0.5,
            wall_clock_s: Some(times.iter().sum()),
        }
    }

    #[test]
    fn exact_sums() {
        let log = TuneLog {
            losses: vec![1.0; 4],
            wall_clock_s: Some(2.5),
            ..TuneLog::default()
        };
        let r = cost_report(&[&trace(&[0.5, 0.25]), &trace(&[1.0])], Some(&log));
        assert_eq!(r.search_s, Some(1.75));
        assert_eq!(r.search_steps, 3);
        assert_eq!(r.tune_s, Some(2.5));
        assert_eq!(r.tune_steps, 4);
        assert!(!r.partial);
    }

    #[test]
    fn missing_tune_log() {
        let r = cost_report(&[&trace(&[1.0])], None);
        assert_eq!(r.tune_s, None);
        assert!(r.partial);
        let stripped = trace(&[1.0]).without_timing();
        let r = cost_report(&[&stripped], None);
        assert_eq!(r.search_s, None);
    }
}
