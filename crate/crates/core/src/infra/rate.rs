use std::collections::VecDeque;

use crate::time::SimTime;

const MAX_OBSERVATIONS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Observation {
    at: SimTime,
    /// Wall time the task held a core.
    duration: SimTime,
    /// Reference length of the task.
    length: SimTime,
}

/// Sliding window of recent completions on one resource.
#[derive(Clone, Debug)]
pub struct CompletionWindow {
    span: SimTime,
    prior: f64,
    observing_since: Option<SimTime>,
    history: VecDeque<Observation>,
}

impl CompletionWindow {
    /// `prior` is the static tasks-per-second estimate used before any
    /// completion has been observed.
    pub fn new(span: SimTime, prior: f64) -> Self {
        Self {
            span: SimTime(span.as_millis().max(1)),
            prior,
            observing_since: None,
            history: VecDeque::new(),
        }
    }

    /// Marks the start of the observation period (first dispatch).
    pub fn note_busy(&mut self, now: SimTime) {
        self.observing_since.get_or_insert(now);
    }

    pub fn record(&mut self, at: SimTime, duration: SimTime, length: SimTime) {
        if self.history.len() == MAX_OBSERVATIONS {
            self.history.pop_front();
        }
        self.history.push_back(Observation {
            at,
            duration,
            length,
        });
    }

    /// Drops all observations so the estimate falls back to the prior.
    pub fn reset(&mut self) {
        self.history.clear();
        self.observing_since = None;
    }

    pub fn completions(&self) -> usize {
        self.history.len()
    }

    /// Tasks per second: completions inside `(now - span, now]` divided by
    /// the observed part of the window; the static prior before any
    /// completion.
    pub fn completion_rate(&self, now: SimTime) -> f64 {
        if self.history.is_empty() {
            return self.prior;
        }
        let window_start = now.saturating_sub(self.span);
        let count = self
            .history
            .iter()
            .filter(|o| o.at > window_start && o.at <= now)
            .count();
        let since = self.observing_since.unwrap_or(SimTime::ZERO);
        let span = self.span.min(now.saturating_sub(since));
        if span == SimTime::ZERO {
            return self.prior;
        }
        count as f64 / span.as_secs_f64()
    }

    /// Expected wall time for a task of `length`, from observed
    /// duration/length ratios; `None` without observations.
    pub fn estimate_exec(&self, length: SimTime) -> Option<SimTime> {
        if self.history.is_empty() {
            return None;
        }
        let dur: u128 = self
            .history
            .iter()
            .map(|o| o.duration.as_millis() as u128)
            .sum();
        let len: u128 = self
            .history
            .iter()
            .map(|o| o.length.as_millis() as u128)
            .sum();
        if len == 0 {
            return None;
        }
        Some(SimTime(
            (length.as_millis() as u128 * dur).div_ceil(len) as u64
        ))
    }
}
