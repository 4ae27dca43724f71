//! Bag-of-tasks applications and timed request streams.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::infra::Millicents;
use crate::rng::{sample_task_length, RngError, SeededRng};
use crate::time::SimTime;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WorkloadError {
    #[error("a bag needs at least one task")]
    EmptyBag,
    #[error(transparent)]
    Rng(#[from] RngError),
    #[error("deadline {0} must be after the first arrival")]
    DeadlineTooEarly(SimTime),
    #[error("illegal task transition {from:?} -> {to:?}")]
    IllegalTransition { from: TaskState, to: TaskState },
    #[error("request counts must be positive")]
    InvalidCount,
    #[error("request {0} has no completion record")]
    IncompleteLog(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub u32);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Pending,
    Dispatched,
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaskSpec {
    pub id: TaskId,
    /// Run time on a speed-1 reference core.
    pub length: SimTime,
    pub arrival: SimTime,
    pub state: TaskState,
    pub failures: u32,
}

impl TaskSpec {
    pub fn new(id: TaskId, length: SimTime, arrival: SimTime) -> Self {
        Self {
            id,
            length,
            arrival,
            state: TaskState::Pending,
            failures: 0,
        }
    }

    /// Pending -> Dispatched -> Running -> Done | Failed; Failed -> Pending.
    pub fn transition(&mut self, to: TaskState) -> Result<(), WorkloadError> {
        use TaskState::*;
        let ok = matches!(
            (self.state, to),
            (Pending, Dispatched)
                | (Dispatched, Running)
                | (Running, Done)
                | (Running, Failed)
                | (Failed, Pending)
        );
        if !ok {
            return Err(WorkloadError::IllegalTransition {
                from: self.state,
                to,
            });
        }
        if to == Failed {
            self.failures += 1;
        }
        self.state = to;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[serde(alias = "time-opt")]
    TimeOpt,
    #[serde(alias = "cost-opt")]
    CostOpt,
    #[serde(alias = "provision")]
    DeadlineProvisioning,
}

impl Strategy {
    pub fn label(self) -> &'static str {
        match self {
            Strategy::TimeOpt => "time-opt",
            Strategy::CostOpt => "cost-opt",
            Strategy::DeadlineProvisioning => "provision",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Application {
    pub id: String,
    pub tasks: Vec<TaskSpec>,
    /// Absolute deadline.
    pub deadline: SimTime,
    pub budget: Millicents,
    pub strategy: Strategy,
}

impl Application {
    pub fn task(&self, id: TaskId) -> Option<&TaskSpec> {
        self.tasks.get(id.0 as usize)
    }

    pub fn task_mut(&mut self, id: TaskId) -> Option<&mut TaskSpec> {
        self.tasks.get_mut(id.0 as usize)
    }

    pub fn count(&self, state: TaskState) -> usize {
        self.tasks.iter().filter(|t| t.state == state).count()
    }
}

#[derive(Clone, Debug)]
pub struct BagParams {
    pub tasks: u32,
    pub mean: SimTime,
    pub jitter: SimTime,
    pub deadline: SimTime,
    pub budget: Millicents,
    pub strategy: Strategy,
}

/// A parameter sweep: `n` independent tasks, all submitted at t=0.
pub fn make_bag(
    app_id: impl Into<String>,
    p: &BagParams,
    rng: &mut SeededRng,
) -> Result<Application, WorkloadError> {
    if p.tasks == 0 {
        return Err(WorkloadError::EmptyBag);
    }
    if p.deadline == SimTime::ZERO {
        return Err(WorkloadError::DeadlineTooEarly(p.deadline));
    }
    let tasks = (0..p.tasks)
        .map(|i| {
            let length = sample_task_length(rng, p.mean, p.jitter)?;
            Ok(TaskSpec::new(TaskId(i), length, SimTime::ZERO))
        })
        .collect::<Result<Vec<_>, WorkloadError>>()?;
    Ok(Application {
        id: app_id.into(),
        tasks,
        deadline: p.deadline,
        budget: p.budget,
        strategy: p.strategy,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RequestStream {
    pub stream_id: String,
    pub arrivals: Vec<SimTime>,
    /// Service demand of each request on a reference core.
    pub service_lengths: Vec<SimTime>,
    pub service_length: SimTime,
    pub resource_cap: u32,
}

#[derive(Clone, Debug)]
pub struct StreamParams {
    pub request_counts: Vec<u32>,
    pub horizon: SimTime,
    pub service_length: SimTime,
    pub service_jitter: SimTime,
    pub caps: Vec<u32>,
}

/// One stream per (load level, cap). Arrivals of level `n` sit at
/// `i * horizon / n`; streams sharing a load level are identical apart from
/// their cap.
pub fn make_stream(p: &StreamParams, rng: &SeededRng) -> Result<Vec<RequestStream>, WorkloadError> {
    if p.request_counts.contains(&0) || p.caps.contains(&0) {
        return Err(WorkloadError::InvalidCount);
    }
    let mut out = Vec::with_capacity(p.request_counts.len() * p.caps.len());
    for (level, &n) in p.request_counts.iter().enumerate() {
        let arrivals: Vec<SimTime> = (0..n as u64)
            .map(|i| SimTime(i * p.horizon.as_millis() / n as u64))
            .collect();
        let mut level_rng = rng.fork(level as u64);
        let service_lengths = (0..n)
            .map(|_| sample_task_length(&mut level_rng, p.service_length, p.service_jitter))
            .collect::<Result<Vec<_>, _>>()?;
        for &cap in &p.caps {
            out.push(RequestStream {
                stream_id: format!("n{n}-cap{cap}"),
                arrivals: arrivals.clone(),
                service_lengths: service_lengths.clone(),
                service_length: p.service_length,
                resource_cap: cap,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ResponseStats {
    pub requests: usize,
    pub total: SimTime,
    pub mean_ms: f64,
    pub max: SimTime,
}

/// Response = completion − arrival per request. `completions[i]` belongs to
/// `stream.arrivals[i]`.
pub fn response_time(
    stream: &RequestStream,
    completions: &[Option<SimTime>],
) -> Result<ResponseStats, WorkloadError> {
    let mut total = 0u64;
    let mut max = SimTime::ZERO;
    for (i, arrival) in stream.arrivals.iter().enumerate() {
        let done = completions
            .get(i)
            .copied()
            .flatten()
            .ok_or(WorkloadError::IncompleteLog(i))?;
        let r = done.saturating_sub(*arrival);
        total += r.as_millis();
        max = max.max(r);
    }
    let n = stream.arrivals.len();
    Ok(ResponseStats {
        requests: n,
        total: SimTime(total),
        mean_ms: if n == 0 { 0.0 } else { total as f64 / n as f64 },
        max,
    })
}
