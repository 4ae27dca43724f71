//! Dispatch rounds for the time- and cost-optimising strategies, and the
//! plain slot filler used once deadline-driven provisioning has sized the pool.

use std::cmp::Ordering;

use super::plan::{cheapest_by, fastest_within, CostCurve, Plan};
use super::{Assignment, BrokerError, BrokerState, DispatchRound, LeaseView, ResourceView};
use crate::infra::Millicents;
use crate::time::SimTime;
use crate::workload::{Strategy, TaskId};

/// Earliest completion within the remaining budget, fastest resources first.
pub fn schedule_time_opt(
    state: &BrokerState,
    views: &[ResourceView],
    now: SimTime,
) -> Result<DispatchRound, BrokerError> {
    plan_round(state, views, now, Strategy::TimeOpt)
}

/// Cheapest placement that still meets the deadline; falls back to the
/// time-optimising plan (and flags the round) when no placement does.
pub fn schedule_cost_opt(
    state: &BrokerState,
    views: &[ResourceView],
    now: SimTime,
) -> Result<DispatchRound, BrokerError> {
    plan_round(state, views, now, Strategy::CostOpt)
}

/// Budget left after closed leases and the committed part of open ones.
fn available_budget(state: &BrokerState, views: &[ResourceView]) -> Millicents {
    let committed: Millicents = views.iter().map(ResourceView::committed_cost).sum();
    state.remaining_budget().saturating_sub(committed)
}

/// Resource indices, best first.
fn rank(views: &[ResourceView], strategy: Strategy) -> Vec<usize> {
    let mut order: Vec<usize> = (0..views.len()).collect();
    order.sort_by(|&a, &b| {
        let (va, vb) = (&views[a], &views[b]);
        let primary = match strategy {
            Strategy::CostOpt | Strategy::DeadlineProvisioning => {
                va.per_job_cost.cmp(&vb.per_job_cost)
            }
            Strategy::TimeOpt => vb
                .completion_rate
                .partial_cmp(&va.completion_rate)
                .unwrap_or(Ordering::Equal),
        };
        primary.then(va.id.cmp(&vb.id))
    });
    order
}

fn plan_round(
    state: &BrokerState,
    views: &[ResourceView],
    now: SimTime,
    strategy: Strategy,
) -> Result<DispatchRound, BrokerError> {
    let n = state.pending_count();
    if n == 0 {
        return Ok(DispatchRound::default());
    }
    if views.is_empty() {
        return Err(BrokerError::NoResources);
    }
    let available = available_budget(state, views);
    let order = rank(views, strategy);
    // the planner breaks ties toward later curves, so feed it worst first
    let curves: Vec<CostCurve> = order
        .iter()
        .rev()
        .map(|&i| CostCurve::build(&views[i], n))
        .collect();

    let mut deadline_infeasible = false;
    let plan = match strategy {
        Strategy::CostOpt => match cheapest_by(&curves, n, state.deadline) {
            Some(p) if p.cost <= available => Some(p),
            other => {
                deadline_infeasible = other.is_none();
                fastest_within(&curves, n, available)
            }
        },
        _ => fastest_within(&curves, n, available),
    };
    let plan = match plan {
        Some(p) if p.tasks > 0 => p,
        _ => return Err(BrokerError::BudgetExhausted),
    };

    let mut round = dispatch_plan(state, views, &order, &plan, available, now);
    round.deadline_infeasible = deadline_infeasible;
    round.budget_limited = (plan.tasks as usize) < n;
    Ok(round)
}

fn dispatch_plan(
    state: &BrokerState,
    views: &[ResourceView],
    order: &[usize],
    plan: &Plan,
    available: Millicents,
    now: SimTime,
) -> DispatchRound {
    let tasks = plan.tasks.max(1) as u64;
    let per_job = Millicents(plan.cost.0 / tasks);
    let budget_per_job = Millicents(available.0 / tasks);
    let mut queue = state.pending();
    let mut round = DispatchRound {
        plan_cost: plan.cost,
        planned_tasks: plan.tasks,
        ..DispatchRound::default()
    };
    for &i in order {
        let v = &views[i];
        let quota = plan.quota_for(v.id);
        if quota == 0 {
            continue;
        }
        if let LeaseView::Unleased { ready_at, .. } = v.lease {
            round.lease_requests.push(v.id);
            if ready_at > now {
                continue;
            }
        }
        for _ in 0..quota.min(v.free_now) {
            let Some(task) = queue.next() else { break };
            round
                .assignments
                .push(assign(task, v, now, per_job, budget_per_job));
        }
    }
    round
}

fn assign(
    task: TaskId,
    v: &ResourceView,
    now: SimTime,
    projected_cost: Millicents,
    budget_per_job: Millicents,
) -> Assignment {
    Assignment {
        task,
        resource: v.id,
        dispatched_at: now,
        projected_completion: now + v.exec_estimate,
        projected_cost_mc: projected_cost,
        budget_per_job_mc: budget_per_job,
    }
}

/// Fills free cores in ascending per-job cost order as long as the lease
/// extension each task causes still fits the budget.
pub fn schedule_fill(
    state: &BrokerState,
    views: &[ResourceView],
    now: SimTime,
) -> Result<DispatchRound, BrokerError> {
    let n = state.pending_count();
    if n == 0 {
        return Ok(DispatchRound::default());
    }
    if views.is_empty() {
        return Err(BrokerError::NoResources);
    }
    let mut left = available_budget(state, views);
    let mut queue = state.pending().peekable();
    let mut round = DispatchRound::default();
    let mut placed = 0usize;
    for i in rank(views, Strategy::DeadlineProvisioning) {
        let v = &views[i];
        if queue.peek().is_none() {
            break;
        }
        if let LeaseView::Unleased { ready_at, .. } = v.lease {
            if ready_at > now {
                continue;
            }
        }
        let want = (v.free_now as usize).min(n - placed);
        if want == 0 {
            continue;
        }
        let curve = CostCurve::build(v, want);
        let take = (0..=want)
            .rev()
            .find(|&k| curve.cost[k] <= left)
            .unwrap_or(0);
        if take == 0 {
            continue;
        }
        left = left.saturating_sub(curve.cost[take]);
        round.plan_cost += curve.cost[take];
        if matches!(v.lease, LeaseView::Unleased { .. }) {
            round.lease_requests.push(v.id);
        }
        for _ in 0..take {
            let Some(task) = queue.next() else { break };
            let cost = Millicents(curve.cost[take].0 / take as u64);
            round.assignments.push(assign(task, v, now, cost, cost));
            placed += 1;
        }
    }
    round.planned_tasks = placed as u32;
    round.budget_limited = placed < n && views.iter().any(|v| v.free_now > 0);
    if placed == 0 && round.budget_limited && state.running_count() == 0 {
        return Err(BrokerError::BudgetExhausted);
    }
    Ok(round)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infra::{ResourceId, Tariff};
    use crate::rng::SeededRng;
    use crate::workload::{make_bag, Application, BagParams};

    fn view(id: u32, rate: u64, exec: u64) -> ResourceView {
        ResourceView {
            id: ResourceId(id),
            cores: 1,
            tariff: Tariff::PerSecond { rate_mcps: rate },
            core_free_at: vec![SimTime::ZERO],
            free_now: 1,
            lease: LeaseView::Unleased {
                ready_at: SimTime::ZERO,
                bill_from: SimTime::ZERO,
            },
            exec_estimate: SimTime::from_secs(exec),
            completion_rate: 1.0 / exec as f64,
            per_job_cost: Millicents(rate * exec),
        }
    }

    fn state(n: u32, deadline: u64, budget: u64) -> BrokerState {
        let app: Application = make_bag(
            "a",
            &BagParams {
                tasks: n,
                mean: SimTime::from_secs(10),
                jitter: SimTime::ZERO,
                deadline: SimTime::from_secs(deadline),
                budget: Millicents(budget),
                strategy: Strategy::TimeOpt,
            },
            &mut SeededRng::new(1),
        )
        .unwrap();
        BrokerState::new(&app, 3, SimTime::from_secs(300))
    }

    fn per_resource(round: &DispatchRound, id: u32) -> usize {
        round
            .assignments
            .iter()
            .filter(|a| a.resource == ResourceId(id))
            .count()
    }

    #[test]
    fn single_resource_gets_everything() {
        let mut v = view(0, 2, 10);
        v.cores = 10;
        v.free_now = 10;
        v.core_free_at = vec![SimTime::ZERO; 10];
        let round = schedule_time_opt(&state(10, 1000, 1_000_000), &[v], SimTime::ZERO).unwrap();
        assert_eq!(round.assignments.len(), 10);
    }

    #[test]
    fn time_opt_uses_costly_resources() {
        let views = [view(0, 2, 10), view(1, 90, 10)];
        let round = schedule_time_opt(&state(2, 1000, 1_000_000), &views, SimTime::ZERO).unwrap();
        assert_eq!(per_resource(&round, 0), 1);
        assert_eq!(per_resource(&round, 1), 1);
    }

    #[test]
    fn cost_opt_prefers_cheap_when_deadline_loose() {
        let views = [view(0, 2, 10), view(1, 90, 10)];
        let round = schedule_cost_opt(&state(2, 1000, 1_000_000), &views, SimTime::ZERO).unwrap();
        assert_eq!(per_resource(&round, 0), 1);
        assert_eq!(per_resource(&round, 1), 0);
        assert!(!round.deadline_infeasible);
    }

    #[test]
    fn cost_opt_escalates_for_deadline() {
        let views = [view(0, 2, 10), view(1, 90, 10)];
        let round = schedule_cost_opt(&state(2, 10, 1_000_000), &views, SimTime::ZERO).unwrap();
        assert_eq!(per_resource(&round, 1), 1);
    }

    #[test]
    fn cost_opt_flags_impossible_deadline() {
        let views = [view(0, 2, 10)];
        let round = schedule_cost_opt(&state(2, 5, 1_000_000), &views, SimTime::ZERO).unwrap();
        assert!(round.deadline_infeasible);
        assert_eq!(round.assignments.len(), 1);
    }

    #[test]
    fn exhausted_budget_is_an_error() {
        let views = [view(0, 90, 10)];
        assert_eq!(
            schedule_time_opt(&state(2, 1000, 100), &views, SimTime::ZERO),
            Err(BrokerError::BudgetExhausted)
        );
    }

    #[test]
    fn delayed_resource_is_leased_before_use() {
        let mut v = view(0, 2, 10);
        v.lease = LeaseView::Unleased {
            ready_at: SimTime::from_secs(60),
            bill_from: SimTime::ZERO,
        };
        let round = schedule_time_opt(&state(1, 1000, 1_000_000), &[v], SimTime::ZERO).unwrap();
        assert_eq!(round.lease_requests, vec![ResourceId(0)]);
        assert!(round.assignments.is_empty());
    }

    #[test]
    fn projected_cost_within_per_job_budget() {
        let views = [view(0, 2, 10), view(1, 90, 10), view(2, 30, 5)];
        let s = state(5, 40, 3000);
        for round in [
            schedule_time_opt(&s, &views, SimTime::ZERO).unwrap(),
            schedule_cost_opt(&s, &views, SimTime::ZERO).unwrap(),
        ] {
            assert!(round.plan_cost.0 <= 3000);
            for a in &round.assignments {
                assert!(a.projected_cost_mc <= a.budget_per_job_mc);
            }
        }
    }

    #[test]
    fn fill_respects_budget() {
        let views = [view(0, 0, 10), view(1, 10, 10), view(2, 10, 10)];
        let round = schedule_fill(&state(5, 1000, 150), &views, SimTime::ZERO).unwrap();
        assert_eq!(per_resource(&round, 0), 1);
        assert_eq!(per_resource(&round, 1), 1);
        assert_eq!(per_resource(&round, 2), 0);
        assert!(round.budget_limited);
    }
}
