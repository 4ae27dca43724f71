//! Deadline-and-budget constrained brokering and deadline-driven provisioning.
//!
//! The broker is a pure state machine. The run loop feeds it completions and
//! failures and asks for a [`DispatchRound`] whenever something changed;
//! the broker never touches the event queue itself.

mod dbc;
mod plan;
mod provisioning;

use std::collections::{BTreeMap, VecDeque};

use serde::Serialize;
use thiserror::Error;

pub use dbc::{schedule_cost_opt, schedule_fill, schedule_time_opt};
pub use plan::Plan;
pub use provisioning::{
    estimate_local_makespan, provisioning_decision, ProvisioningDecision, ProvisioningInput,
};

use crate::infra::{CompletionWindow, Millicents, ResourceId, Tariff};
use crate::time::SimTime;
use crate::workload::{Application, TaskId, TaskState};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BrokerError {
    #[error("budget cannot cover any pending task")]
    BudgetExhausted,
    #[error("no usable resources")]
    NoResources,
    #[error("task {0} is not running on the reported resource")]
    UnknownTask(TaskId),
}

/// How the broker sees one resource when planning a round.
#[derive(Clone, Debug, PartialEq)]
pub struct ResourceView {
    pub id: ResourceId,
    pub cores: u32,
    pub tariff: Tariff,
    /// Earliest time each core can take a new task, ascending.
    pub core_free_at: Vec<SimTime>,
    /// Cores that can start a task right now.
    pub free_now: u32,
    pub lease: LeaseView,
    /// Expected wall time of one task of the planning length.
    pub exec_estimate: SimTime,
    pub completion_rate: f64,
    /// One core-slot's share of the lease for a planning-length task.
    pub per_job_cost: Millicents,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeaseView {
    /// A lease requested now would be usable at `ready_at` and billed from `bill_from`.
    Unleased {
        ready_at: SimTime,
        bill_from: SimTime,
    },
    /// Billed from `bill_from`; without further work it closes at `committed_end`.
    Open {
        bill_from: SimTime,
        committed_end: SimTime,
    },
}

impl ResourceView {
    /// Charge already locked in by an open lease.
    pub fn committed_cost(&self) -> Millicents {
        match self.lease {
            LeaseView::Unleased { .. } => Millicents::ZERO,
            LeaseView::Open {
                bill_from,
                committed_end,
            } => self.tariff.charge(committed_end.saturating_sub(bill_from)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Assignment {
    pub task: TaskId,
    pub resource: ResourceId,
    pub dispatched_at: SimTime,
    pub projected_completion: SimTime,
    /// This task's share of the round's projected plan cost.
    pub projected_cost_mc: Millicents,
    /// Remaining budget per planned job when the task was dispatched.
    pub budget_per_job_mc: Millicents,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct DispatchRound {
    pub assignments: Vec<Assignment>,
    /// Resources to lease now; tasks follow once the lease is ready.
    pub lease_requests: Vec<ResourceId>,
    pub plan_cost: Millicents,
    pub planned_tasks: u32,
    pub deadline_infeasible: bool,
    pub budget_limited: bool,
}

impl DispatchRound {
    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty() && self.lease_requests.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct BrokerState {
    pub budget: Millicents,
    /// Charges already booked in the ledger for this application.
    pub spent: Millicents,
    pub deadline: SimTime,
    pub retry_cap: u32,
    pub rounds: u64,
    pending: VecDeque<TaskId>,
    running: BTreeMap<TaskId, ResourceId>,
    windows: BTreeMap<ResourceId, CompletionWindow>,
    window_span: SimTime,
    pub completed: u32,
    pub permanently_failed: u32,
    pub degraded: bool,
    pub makespan: Option<SimTime>,
    pub deadline_infeasible: bool,
    pub budget_exhausted: bool,
}

impl BrokerState {
    pub fn new(app: &Application, retry_cap: u32, window_span: SimTime) -> Self {
        Self {
            budget: app.budget,
            spent: Millicents::ZERO,
            deadline: app.deadline,
            retry_cap,
            rounds: 0,
            pending: app
                .tasks
                .iter()
                .filter(|t| t.state == TaskState::Pending)
                .map(|t| t.id)
                .collect(),
            running: BTreeMap::new(),
            windows: BTreeMap::new(),
            window_span,
            completed: 0,
            permanently_failed: 0,
            degraded: false,
            makespan: None,
            deadline_infeasible: false,
            budget_exhausted: false,
        }
    }

    pub fn remaining_budget(&self) -> Millicents {
        self.budget.saturating_sub(self.spent)
    }

    pub fn pending(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.pending.iter().copied()
    }

    pub fn pending_count(&self) -> usize {
        self.pending.len()
    }

    pub fn running_count(&self) -> usize {
        self.running.len()
    }

    pub fn running_on(&self, task: TaskId) -> Option<ResourceId> {
        self.running.get(&task).copied()
    }

    pub fn is_finished(&self) -> bool {
        self.pending.is_empty() && self.running.is_empty()
    }

    /// Registers a resource with its static tasks-per-second prior.
    pub fn track_resource(&mut self, id: ResourceId, prior: f64) {
        let span = self.window_span;
        self.windows
            .entry(id)
            .or_insert_with(|| CompletionWindow::new(span, prior));
    }

    pub fn window(&self, id: ResourceId) -> Option<&CompletionWindow> {
        self.windows.get(&id)
    }

    pub fn completion_rate(&self, id: ResourceId, now: SimTime) -> Option<f64> {
        self.windows.get(&id).map(|w| w.completion_rate(now))
    }

    /// Applies a round's assignments to the broker's bookkeeping.
    pub fn commit(&mut self, app: &mut Application, round: &DispatchRound, now: SimTime) {
        self.rounds += 1;
        self.deadline_infeasible |= round.deadline_infeasible;
        for a in &round.assignments {
            if let Some(pos) = self.pending.iter().position(|t| *t == a.task) {
                self.pending.remove(pos);
            }
            self.running.insert(a.task, a.resource);
            if let Some(w) = self.windows.get_mut(&a.resource) {
                w.note_busy(now);
            }
            if let Some(t) = app.task_mut(a.task) {
                // tasks start on a free core immediately
                let _ = t.transition(TaskState::Dispatched);
                let _ = t.transition(TaskState::Running);
            }
        }
    }

    fn take_running(&mut self, task: TaskId, resource: ResourceId) -> Result<(), BrokerError> {
        match self.running.get(&task) {
            Some(r) if *r == resource => {
                self.running.remove(&task);
                Ok(())
            }
            _ => Err(BrokerError::UnknownTask(task)),
        }
    }

    fn note_terminal(&mut self, now: SimTime) {
        if self.is_finished() {
            self.makespan = Some(now);
        }
    }
}

/// Records a successful completion. The caller should run a dispatch round next.
pub fn on_task_complete(
    state: &mut BrokerState,
    app: &mut Application,
    task: TaskId,
    resource: ResourceId,
    started: SimTime,
    now: SimTime,
) -> Result<(), BrokerError> {
    state.take_running(task, resource)?;
    let spec = app.task_mut(task).ok_or(BrokerError::UnknownTask(task))?;
    let _ = spec.transition(TaskState::Done);
    let length = spec.length;
    if let Some(w) = state.windows.get_mut(&resource) {
        w.record(now, now.saturating_sub(started), length);
    }
    state.completed += 1;
    state.note_terminal(now);
    Ok(())
}

/// Records a failed execution: the task is re-queued unless it has used up
/// its retries, and the resource's estimate falls back to its prior.
/// Money already spent stays spent.
pub fn on_task_failure(
    state: &mut BrokerState,
    app: &mut Application,
    task: TaskId,
    resource: ResourceId,
    now: SimTime,
) -> Result<(), BrokerError> {
    state.take_running(task, resource)?;
    let spec = app.task_mut(task).ok_or(BrokerError::UnknownTask(task))?;
    let _ = spec.transition(TaskState::Failed);
    if spec.failures > state.retry_cap {
        state.permanently_failed += 1;
        state.degraded = true;
    } else {
        let _ = spec.transition(TaskState::Pending);
        state.pending.push_back(task);
    }
    if let Some(w) = state.windows.get_mut(&resource) {
        w.reset();
    }
    state.note_terminal(now);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::workload::{make_bag, BagParams, Strategy};

    fn app(n: u32) -> Application {
        make_bag(
            "a",
            &BagParams {
                tasks: n,
                mean: SimTime::from_secs(10),
                jitter: SimTime::ZERO,
                deadline: SimTime::from_secs(1000),
                budget: Millicents(1_000_000),
                strategy: Strategy::TimeOpt,
            },
            &mut SeededRng::new(0),
        )
        .unwrap()
    }

    fn dispatch(state: &mut BrokerState, app: &mut Application, task: u32, r: u32) {
        let round = DispatchRound {
            assignments: vec![Assignment {
                task: TaskId(task),
                resource: ResourceId(r),
                dispatched_at: SimTime::ZERO,
                projected_completion: SimTime::from_secs(10),
                projected_cost_mc: Millicents::ZERO,
                budget_per_job_mc: Millicents::ZERO,
            }],
            ..Default::default()
        };
        state.commit(app, &round, SimTime::ZERO);
    }

    #[test]
    fn completion_updates_window_and_counts() {
        let mut a = app(2);
        let mut s = BrokerState::new(&a, 3, SimTime::from_secs(100));
        s.track_resource(ResourceId(0), 0.1);
        dispatch(&mut s, &mut a, 0, 0);
        on_task_complete(
            &mut s,
            &mut a,
            TaskId(0),
            ResourceId(0),
            SimTime::ZERO,
            SimTime::from_secs(10),
        )
        .unwrap();
        assert_eq!(s.window(ResourceId(0)).unwrap().completions(), 1);
        assert_eq!(s.completed, 1);
        assert_eq!(s.makespan, None);
        assert_eq!(a.tasks[0].state, TaskState::Done);
    }

    #[test]
    fn last_completion_records_makespan() {
        let mut a = app(1);
        let mut s = BrokerState::new(&a, 3, SimTime::from_secs(100));
        dispatch(&mut s, &mut a, 0, 0);
        on_task_complete(
            &mut s,
            &mut a,
            TaskId(0),
            ResourceId(0),
            SimTime::ZERO,
            SimTime::from_secs(10),
        )
        .unwrap();
        assert!(s.is_finished());
        assert_eq!(s.makespan, Some(SimTime::from_secs(10)));
    }

    #[test]
    fn unknown_task_rejected() {
        let mut a = app(1);
        let mut s = BrokerState::new(&a, 3, SimTime::from_secs(100));
        assert_eq!(
            on_task_complete(
                &mut s,
                &mut a,
                TaskId(0),
                ResourceId(0),
                SimTime::ZERO,
                SimTime(1)
            ),
            Err(BrokerError::UnknownTask(TaskId(0)))
        );
        dispatch(&mut s, &mut a, 0, 0);
        assert_eq!(
            on_task_complete(
                &mut s,
                &mut a,
                TaskId(0),
                ResourceId(1),
                SimTime::ZERO,
                SimTime(1)
            ),
            Err(BrokerError::UnknownTask(TaskId(0)))
        );
    }

    #[test]
    fn failure_requeues_until_cap() {
        let mut a = app(1);
        let mut s = BrokerState::new(&a, 2, SimTime::from_secs(100));
        s.track_resource(ResourceId(0), 0.1);
        for attempt in 1..=3 {
            dispatch(&mut s, &mut a, 0, 0);
            on_task_failure(&mut s, &mut a, TaskId(0), ResourceId(0), SimTime(attempt)).unwrap();
            if attempt <= 2 {
                assert_eq!(a.tasks[0].state, TaskState::Pending);
                assert_eq!(s.pending_count(), 1);
            }
        }
        assert_eq!(a.tasks[0].state, TaskState::Failed);
        assert!(s.degraded);
        assert_eq!(s.permanently_failed, 1);
        assert!(s.is_finished());
    }

    #[test]
    fn failure_resets_estimate_to_prior() {
        let mut a = app(2);
        let mut s = BrokerState::new(&a, 3, SimTime::from_secs(100));
        s.track_resource(ResourceId(0), 0.5);
        dispatch(&mut s, &mut a, 0, 0);
        on_task_complete(
            &mut s,
            &mut a,
            TaskId(0),
            ResourceId(0),
            SimTime::ZERO,
            SimTime::from_secs(10),
        )
        .unwrap();
        assert!(
            s.completion_rate(ResourceId(0), SimTime::from_secs(10))
                .unwrap()
                != 0.5
        );
        dispatch(&mut s, &mut a, 1, 0);
        on_task_failure(
            &mut s,
            &mut a,
            TaskId(1),
            ResourceId(0),
            SimTime::from_secs(20),
        )
        .unwrap();
        assert_eq!(
            s.completion_rate(ResourceId(0), SimTime::from_secs(20)),
            Some(0.5)
        );
    }
}
