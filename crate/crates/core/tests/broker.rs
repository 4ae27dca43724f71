use marketsim::broker::{
    on_task_complete, on_task_failure, schedule_cost_opt, schedule_time_opt, BrokerError,
    BrokerState, LeaseView, ResourceView,
};
use marketsim::infra::{Millicents, ResourceId, Tariff};
use marketsim::rng::SeededRng;
use marketsim::workload::{make_bag, Application, BagParams, Strategy, TaskState};
use marketsim::SimTime;

fn bag(n: u32, deadline_s: u64, budget: u64) -> Application {
    make_bag(
        "app",
        &BagParams {
            tasks: n,
            mean: SimTime::from_secs(10),
            jitter: SimTime::ZERO,
            deadline: SimTime::from_secs(deadline_s),
            budget: Millicents(budget),
            strategy: Strategy::TimeOpt,
        },
        &mut SeededRng::new(1),
    )
    .unwrap()
}

/// An idle, unleased resource usable immediately.
fn view(id: u32, cores: u32, exec_s: u64, rate: u64) -> ResourceView {
    let tariff = Tariff::PerSecond { rate_mcps: rate };
    ResourceView {
        id: ResourceId(id),
        cores,
        tariff,
        core_free_at: vec![SimTime::ZERO; cores as usize],
        free_now: cores,
        lease: LeaseView::Unleased {
            ready_at: SimTime::ZERO,
            bill_from: SimTime::ZERO,
        },
        exec_estimate: SimTime::from_secs(exec_s),
        completion_rate: cores as f64 / exec_s as f64,
        per_job_cost: Millicents(rate * exec_s / cores as u64),
    }
}

#[test]
fn time_opt_spreads_and_cost_opt_packs() {
    let app = bag(4, 100, 1_000_000);
    let state = BrokerState::new(&app, 3, SimTime::from_secs(10));
    let views = [view(0, 2, 10, 1), view(1, 2, 10, 50)];

    let fast = schedule_time_opt(&state, &views, SimTime::ZERO).unwrap();
    assert_eq!(fast.assignments.len(), 4);
    assert!(fast.assignments.iter().any(|a| a.resource == ResourceId(1)));
    assert_eq!(fast.lease_requests.len(), 2);

    // the cheap pair of cores finishes four tasks in 20 s, inside the deadline
    let cheap = schedule_cost_opt(&state, &views, SimTime::ZERO).unwrap();
    assert!(cheap
        .assignments
        .iter()
        .all(|a| a.resource == ResourceId(0)));
    assert_eq!(cheap.assignments.len(), 2);
    assert_eq!(cheap.plan_cost.0, 20);
    assert!(!cheap.deadline_infeasible);
}

#[test]
fn cost_opt_buys_speed_only_when_the_deadline_needs_it() {
    let app = bag(4, 10, 1_000_000);
    let state = BrokerState::new(&app, 3, SimTime::from_secs(10));
    let views = [view(0, 2, 10, 1), view(1, 2, 10, 50)];
    let round = schedule_cost_opt(&state, &views, SimTime::ZERO).unwrap();
    assert_eq!(round.assignments.len(), 4);
    assert_eq!(round.plan_cost.0, 10 + 500);
}

#[test]
fn nothing_affordable_is_an_error() {
    let app = bag(2, 100, 5);
    let state = BrokerState::new(&app, 3, SimTime::from_secs(10));
    let err = schedule_time_opt(&state, &[view(0, 1, 10, 100)], SimTime::ZERO).unwrap_err();
    assert!(matches!(err, BrokerError::BudgetExhausted));
    let err = schedule_time_opt(&state, &[], SimTime::ZERO).unwrap_err();
    assert!(matches!(err, BrokerError::NoResources));
}

#[test]
fn completions_and_failures_update_state() {
    let mut app = bag(2, 100, 1_000_000);
    let mut state = BrokerState::new(&app, 1, SimTime::from_secs(10));
    state.track_resource(ResourceId(0), 0.1);
    let round = schedule_time_opt(&state, &[view(0, 2, 10, 1)], SimTime::ZERO).unwrap();
    state.commit(&mut app, &round, SimTime::ZERO);
    assert_eq!((state.pending_count(), state.running_count()), (0, 2));
    let (a, b) = (round.assignments[0].task, round.assignments[1].task);

    on_task_complete(
        &mut state,
        &mut app,
        a,
        ResourceId(0),
        SimTime::ZERO,
        SimTime::from_secs(10),
    )
    .unwrap();
    assert_eq!(app.task(a).unwrap().state, TaskState::Done);
    assert!(matches!(
        on_task_complete(
            &mut state,
            &mut app,
            a,
            ResourceId(0),
            SimTime::ZERO,
            SimTime::from_secs(10)
        ),
        Err(BrokerError::UnknownTask(_))
    ));

    // first failure requeues, the second exceeds the retry cap of one
    on_task_failure(
        &mut state,
        &mut app,
        b,
        ResourceId(0),
        SimTime::from_secs(10),
    )
    .unwrap();
    assert_eq!(state.pending().collect::<Vec<_>>(), vec![b]);
    let again = schedule_time_opt(&state, &[view(0, 2, 10, 1)], SimTime::from_secs(10)).unwrap();
    state.commit(&mut app, &again, SimTime::from_secs(10));
    on_task_failure(
        &mut state,
        &mut app,
        b,
        ResourceId(0),
        SimTime::from_secs(20),
    )
    .unwrap();
    assert_eq!(state.permanently_failed, 1);
    assert!(state.degraded);
    assert!(state.is_finished());
    assert_eq!(state.makespan, Some(SimTime::from_secs(20)));
}
