//! Drives a scenario to quiescence and assembles its report.
//!
//! A scenario may carry a bag of tasks (brokered or burst-provisioned), a
//! set of request streams, and an exchange. Each part runs on its own event
//! queue; all processed events feed one hashed event log.

use std::collections::{BTreeMap, BTreeSet};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::broker::{
    on_task_complete, on_task_failure, provisioning_decision, schedule_cost_opt, schedule_fill,
    schedule_time_opt, BrokerError, BrokerState, DispatchRound, LeaseView, ProvisioningInput,
    ResourceView,
};
use crate::engine::{EngineError, Event, EventKind, EventQueue};
use crate::infra::{CoreAllocator, InfraError, Infrastructure, LeaseId, Millicents, ResourceId};
use crate::market::{
    Exchange, MarketError, Offer, Requirement, ReservationId, ReservationState, SlaTerms, Window,
};
use crate::report::{LeaseRow, ResourceRow, SettlementRow, SimReport, StreamRow};
use crate::rng::SeededRng;
use crate::scenario::{BagSpec, ExchangeSpec, Scenario, ScenarioError, StreamSpec, WorkloadSpec};
use crate::time::SimTime;
use crate::workload::{
    make_bag, make_stream, response_time, Application, BagParams, RequestStream, Strategy,
    StreamParams, WorkloadError,
};

/// Hard stop for runaway runs.
const EVENT_LIMIT: u64 = 20_000_000;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Infra(#[from] InfraError),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("broker: {0}")]
    Broker(#[from] BrokerError),
    #[error("run exceeded {0} events")]
    EventLimit(u64),
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub strategy: Option<Strategy>,
    /// Keep every processed event as a text line.
    pub keep_event_log: bool,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: SimReport,
    pub event_log: Vec<String>,
}

struct EventLog {
    hasher: Sha256,
    count: u64,
    lines: Option<Vec<String>>,
}

impl EventLog {
    fn new(keep: bool) -> Self {
        Self {
            hasher: Sha256::new(),
            count: 0,
            lines: keep.then(Vec::new),
        }
    }

    fn record(&mut self, part: &str, e: &Event) -> Result<(), RunError> {
        self.count += 1;
        if self.count > EVENT_LIMIT {
            return Err(RunError::EventLimit(EVENT_LIMIT));
        }
        let kind = serde_json::to_string(&e.kind).expect("event kinds serialize");
        let line = format!("{part} {} {} {kind}", e.fire_at.as_millis(), e.seq);
        self.hasher.update(line.as_bytes());
        self.hasher.update(b"\n");
        if let Some(lines) = &mut self.lines {
            lines.push(line);
        }
        Ok(())
    }

    fn digest(self) -> (String, u64, Vec<String>) {
        let hex = self
            .hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        (hex, self.count, self.lines.unwrap_or_default())
    }
}

pub fn run(scenario: &Scenario, opts: &RunOptions) -> Result<SimReport, RunError> {
    run_logged(scenario, opts).map(|o| o.report)
}

pub fn run_logged(scenario: &Scenario, opts: &RunOptions) -> Result<RunOutput, RunError> {
    scenario.validate()?;
    let seed = opts.seed.unwrap_or(scenario.seed);
    let rng = SeededRng::new(seed);
    let strategy = opts.strategy.or(scenario.strategy());
    let mut log = EventLog::new(opts.keep_event_log);

    let mut report = SimReport {
        scenario: scenario.name.clone(),
        seed,
        strategy: strategy.map(|s| s.label().to_string()),
        makespan_ms: 0,
        deadline_ms: None,
        deadline_met: true,
        total_tasks: 0,
        completed_tasks: 0,
        failed_tasks: 0,
        unfinished_tasks: 0,
        tasks_local: 0,
        tasks_cloud: 0,
        nodes_provisioned: 0,
        budget_mc: None,
        spent_mc: Millicents::ZERO,
        spent_usd: String::new(),
        flags: Vec::new(),
        resources: Vec::new(),
        streams: Vec::new(),
        settlements: Vec::new(),
        unmatched_requirements: Vec::new(),
        leases: Vec::new(),
        events_processed: 0,
        event_log_sha256: String::new(),
    };
    let mut flags = BTreeSet::new();

    match &scenario.workload {
        WorkloadSpec::Empty => {}
        WorkloadSpec::Bag(bag) => {
            let strategy = strategy.expect("validated bag scenarios have a broker");
            let mut sim = BagSim::new(scenario, bag, strategy, &rng)?;
            if strategy == Strategy::DeadlineProvisioning {
                sim.provision_burst(scenario)?;
            }
            sim.drive(&mut log)?;
            sim.finish(&mut report, &mut flags);
        }
        WorkloadSpec::Stream(spec) => run_streams(scenario, spec, &rng, &mut log, &mut report)?,
    }
    if let Some(ex) = &scenario.exchange {
        run_exchange(ex, &mut log, &mut report, &mut flags)?;
    }

    report.spent_usd = report.spent_mc.to_usd_string();
    if !report.deadline_met {
        flags.insert("deadline_not_met".into());
    }
    report.flags = flags.into_iter().collect();
    let (digest, count, lines) = log.digest();
    report.event_log_sha256 = digest;
    report.events_processed = count;
    Ok(RunOutput {
        report,
        event_log: lines,
    })
}

fn lease_rows(infra: &Infrastructure, stream: &str) -> Vec<LeaseRow> {
    infra
        .leases()
        .iter()
        .filter_map(|l| {
            let tariff = infra.resource(l.resource).ok()?.tariff;
            Some(LeaseRow {
                lease: l.id,
                stream: stream.to_string(),
                resource: l.resource,
                tariff,
                start_ms: l.start.as_millis(),
                end_ms: l.end?.as_millis(),
                billed_mc: l.billed?,
            })
        })
        .collect()
}

struct BagSim {
    queue: EventQueue,
    infra: Infrastructure,
    allocs: Vec<Option<CoreAllocator>>,
    epochs: Vec<u64>,
    jobs: Vec<u32>,
    app: Application,
    broker: BrokerState,
    strategy: Strategy,
    failures: SeededRng,
    tick: SimTime,
    ref_length: SimTime,
    stalled: bool,
    nodes_provisioned: u32,
    flags: BTreeSet<String>,
}

impl BagSim {
    fn new(
        scenario: &Scenario,
        bag: &BagSpec,
        strategy: Strategy,
        rng: &SeededRng,
    ) -> Result<BagSim, RunError> {
        let b = scenario
            .broker
            .as_ref()
            .expect("validated bag scenarios have a broker");
        let mut infra = Infrastructure::new(scenario.billing_start);
        for (i, r) in scenario.resources.iter().enumerate() {
            infra.add_resource(r.to_resource(i)?);
        }
        for (i, c) in scenario.catalog.iter().enumerate() {
            infra.add_instance_type(c.to_instance_type(i)?);
        }
        let app = make_bag(
            scenario.name.clone(),
            &BagParams {
                tasks: bag.tasks,
                mean: SimTime(bag.mean_ms),
                jitter: SimTime(bag.jitter_ms),
                deadline: SimTime(b.deadline_ms),
                budget: Millicents(b.budget_mc),
                strategy,
            },
            &mut rng.fork(0),
        )?;
        let ref_length = SimTime(bag.mean_ms);
        let span = SimTime(b.rate_window_ms.unwrap_or(bag.mean_ms));
        let mut broker = BrokerState::new(&app, b.retry_cap, span);
        for r in infra.resources() {
            broker.track_resource(r.id, r.static_rate(ref_length));
        }
        let n = infra.resources().len();
        Ok(BagSim {
            queue: EventQueue::new(),
            infra,
            allocs: vec![None; n],
            epochs: vec![0; n],
            jobs: vec![0; n],
            app,
            broker,
            strategy,
            failures: rng.fork(1),
            tick: SimTime(b.tick_ms),
            ref_length,
            stalled: false,
            nodes_provisioned: 0,
            flags: BTreeSet::new(),
        })
    }

    fn grow(&mut self) {
        let n = self.infra.resources().len();
        self.allocs.resize(n, None);
        self.epochs.resize(n, 0);
        self.jobs.resize(n, 0);
    }

    fn ensure_alloc(&mut self, id: ResourceId) {
        self.grow();
        let slot = &mut self.allocs[id.0 as usize];
        if slot.is_none() {
            let r = &self.infra.resources()[id.0 as usize];
            *slot = Some(CoreAllocator::new(r.policy, r.cores, r.speed));
        }
    }

    fn reschedule(&mut self, id: ResourceId) -> Result<(), RunError> {
        let i = id.0 as usize;
        self.epochs[i] += 1;
        if let Some(at) = self.allocs[i]
            .as_ref()
            .and_then(CoreAllocator::next_completion)
        {
            let at = at.max(self.queue.now());
            self.queue.push(
                at,
                EventKind::TaskCompletion {
                    resource: id,
                    epoch: self.epochs[i],
                },
            )?;
        }
        Ok(())
    }

    fn plan_length(&self) -> SimTime {
        self.broker
            .pending()
            .filter_map(|t| self.app.task(t).map(|t| t.length))
            .max()
            .unwrap_or(self.ref_length)
    }

    /// Sizes and requests the cloud burst at submission time.
    fn provision_burst(&mut self, scenario: &Scenario) -> Result<(), RunError> {
        let Some(spec) = scenario.burst_type() else {
            return Ok(());
        };
        let Some(kind) = self.infra.instance_type(&spec.name).cloned() else {
            return Ok(());
        };
        let now = self.queue.now();
        let length = self.plan_length();
        let local: Vec<_> = self
            .infra
            .resources()
            .iter()
            .filter(|r| !r.kind.is_cloud())
            .cloned()
            .collect();
        let pending = self.broker.pending_count() as u32;
        let task_time = local
            .iter()
            .map(|r| r.exec_time(length))
            .chain([kind.speed.exec_time(length)])
            .max()
            .unwrap_or(length);
        let input = ProvisioningInput {
            pending,
            local_slots: local.iter().map(|r| r.cores).sum(),
            task_time,
            deadline_remaining: self.app.deadline.saturating_sub(now),
            provisioning_delay: kind.provisioning_delay,
            cores_per_node: kind.cores,
        };
        let decision = provisioning_decision(&input);
        if decision.deadline_infeasible {
            self.flags.insert("deadline_infeasible".into());
        }
        let mut nodes = decision.nodes;
        if let Some(cap) = kind.cap {
            let room = cap.saturating_sub(self.infra.active_instances(&kind.name));
            if nodes > room {
                nodes = room;
                self.flags.insert("provider_cap_reached".into());
            }
        }
        let billed_delay = match scenario.billing_start {
            crate::infra::BillingStart::Request => kind.provisioning_delay,
            crate::infra::BillingStart::Ready => SimTime::ZERO,
        };
        let budget = self.broker.remaining_budget();
        while nodes > 0 {
            let finish = input.projected_finish(nodes).unwrap_or(SimTime::ZERO);
            let busy = finish.saturating_sub(kind.provisioning_delay) + billed_delay;
            let cost = Millicents(kind.tariff.charge(busy).0 * nodes as u64);
            if cost <= budget {
                break;
            }
            nodes -= 1;
            self.flags.insert("budget_limited".into());
        }
        if nodes == 0 {
            return Ok(());
        }
        let leases = self.infra.provision(&kind.name, nodes, now)?;
        self.grow();
        for l in &leases {
            let rate = self
                .infra
                .resource(l.resource)?
                .static_rate(self.ref_length);
            self.broker.track_resource(l.resource, rate);
            self.queue
                .push(l.ready_at, EventKind::LeaseReady { lease: l.id })?;
        }
        self.nodes_provisioned = nodes;
        Ok(())
    }

    fn views(&self, now: SimTime) -> Vec<ResourceView> {
        let length = self.plan_length();
        let mut out = Vec::new();
        for r in self.infra.resources() {
            if self.infra.is_retired(r.id) {
                continue;
            }
            let window = self.broker.window(r.id);
            let exec = window
                .and_then(|w| w.estimate_exec(length))
                .unwrap_or_else(|| r.exec_time(length));
            let (lease, core_free_at, free_now) = match self.infra.open_lease(r.id) {
                Some(l) => {
                    let base = l.ready_at.max(now);
                    let ready = l.ready_at <= now;
                    let alloc = self.allocs.get(r.id.0 as usize).and_then(Option::as_ref);
                    let (frees, free_now) = match alloc {
                        Some(a) if ready => (
                            a.core_free_times(now)
                                .into_iter()
                                .map(|t| t.max(base))
                                .collect::<Vec<_>>(),
                            a.free_cores(),
                        ),
                        _ => (vec![base; r.cores as usize], 0),
                    };
                    let committed_end = frees.iter().copied().max().unwrap_or(base).max(base);
                    (
                        LeaseView::Open {
                            bill_from: l.start,
                            committed_end,
                        },
                        frees,
                        free_now,
                    )
                }
                None => {
                    let ready_at = now + r.provisioning_delay;
                    (
                        LeaseView::Unleased {
                            ready_at,
                            bill_from: self.infra.billing_start_for(r, now),
                        },
                        vec![ready_at; r.cores as usize],
                        r.cores,
                    )
                }
            };
            out.push(ResourceView {
                id: r.id,
                cores: r.cores,
                tariff: r.tariff,
                core_free_at,
                free_now,
                lease,
                exec_estimate: exec,
                completion_rate: self
                    .broker
                    .completion_rate(r.id, now)
                    .unwrap_or_else(|| r.static_rate(self.ref_length)),
                per_job_cost: r.per_job_cost(length),
            });
        }
        out
    }

    fn leases_pending(&self, now: SimTime) -> bool {
        self.infra
            .leases()
            .iter()
            .any(|l| l.is_open() && l.ready_at > now)
    }

    fn apply(&mut self, round: DispatchRound, now: SimTime) -> Result<(), RunError> {
        if round.deadline_infeasible {
            self.flags.insert("deadline_infeasible".into());
        }
        if round.budget_limited {
            self.flags.insert("budget_limited".into());
        }
        for &id in &round.lease_requests {
            let lease = self.infra.lease_resource(id, now)?;
            if lease.ready_at > now {
                self.queue
                    .push(lease.ready_at, EventKind::LeaseReady { lease: lease.id })?;
            } else {
                self.ensure_alloc(id);
            }
        }
        let mut touched = BTreeSet::new();
        for a in &round.assignments {
            self.ensure_alloc(a.resource);
            let length = self.app.task(a.task).map(|t| t.length).unwrap_or_default();
            let alloc = self.allocs[a.resource.0 as usize]
                .as_mut()
                .expect("allocator exists");
            alloc.allocate_task(a.task, length, now);
            touched.insert(a.resource);
        }
        self.broker.commit(&mut self.app, &round, now);
        for id in touched {
            self.reschedule(id)?;
        }
        Ok(())
    }

    fn round(&mut self, now: SimTime) -> Result<(), RunError> {
        self.broker.spent = self.infra.ledger().total();
        if !self.stalled && self.broker.pending_count() > 0 {
            let views = self.views(now);
            let result = match self.strategy {
                Strategy::TimeOpt => schedule_time_opt(&self.broker, &views, now),
                Strategy::CostOpt => schedule_cost_opt(&self.broker, &views, now),
                Strategy::DeadlineProvisioning => schedule_fill(&self.broker, &views, now),
            };
            match result {
                Ok(round) => self.apply(round, now)?,
                Err(BrokerError::BudgetExhausted) => {
                    self.broker.budget_exhausted = true;
                    self.flags.insert("budget_exhausted".into());
                }
                Err(BrokerError::NoResources) => {
                    self.flags.insert("no_resources".into());
                }
                Err(e) => return Err(e.into()),
            }
            if self.broker.running_count() == 0
                && self.broker.pending_count() > 0
                && !self.leases_pending(now)
            {
                self.stalled = true;
                self.flags.insert("stalled".into());
            }
        }
        self.release_idle(now)
    }

    /// Closes every ready lease whose resource has nothing to do.
    fn release_idle(&mut self, now: SimTime) -> Result<(), RunError> {
        let idle: Vec<LeaseId> = self
            .infra
            .leases()
            .iter()
            .filter(|l| l.is_open() && l.ready_at <= now)
            .filter(|l| {
                self.allocs
                    .get(l.resource.0 as usize)
                    .and_then(Option::as_ref)
                    .is_none_or(CoreAllocator::is_idle)
            })
            .map(|l| l.id)
            .collect();
        for id in idle {
            self.infra.release(id, now)?;
        }
        if self.infra.ledger().total() > self.app.budget {
            self.flags.insert("budget_overrun".into());
        }
        Ok(())
    }

    fn handle(&mut self, e: Event) -> Result<bool, RunError> {
        let now = e.fire_at;
        match e.kind {
            EventKind::DispatchTick => {
                if !self.broker.is_finished() && !self.stalled {
                    self.queue.push(now + self.tick, EventKind::DispatchTick)?;
                }
                Ok(true)
            }
            EventKind::LeaseReady { lease } => {
                let l = self.infra.lease(lease)?;
                if l.is_open() {
                    let id = l.resource;
                    self.ensure_alloc(id);
                }
                Ok(true)
            }
            EventKind::TaskCompletion { resource, epoch } => {
                let i = resource.0 as usize;
                if self.epochs.get(i) != Some(&epoch) {
                    return Ok(false);
                }
                let done = match self.allocs[i].as_mut() {
                    Some(a) => a.complete_until(now),
                    None => Vec::new(),
                };
                let failure_prob = self.infra.resource(resource)?.failure_prob;
                for c in done {
                    if self.failures.chance(failure_prob) {
                        on_task_failure(&mut self.broker, &mut self.app, c.task, resource, c.at)?;
                    } else {
                        on_task_complete(
                            &mut self.broker,
                            &mut self.app,
                            c.task,
                            resource,
                            c.started,
                            c.at,
                        )?;
                        self.jobs[i] += 1;
                    }
                }
                self.reschedule(resource)?;
                Ok(true)
            }
            _ => Ok(false),
        }
    }

    fn drive(&mut self, log: &mut EventLog) -> Result<(), RunError> {
        self.queue.push(SimTime::ZERO, EventKind::DispatchTick)?;
        let mut dirty = false;
        loop {
            let now = self.queue.now();
            let next = self.queue.peek_time();
            if dirty && next.is_none_or(|t| t > now) {
                self.round(now)?;
                dirty = false;
                continue;
            }
            if next.is_none() {
                break;
            }
            let e = self.queue.advance()?;
            log.record("bag", &e)?;
            dirty |= self.handle(e)?;
        }
        // anything still open is closed at the final clock
        let now = self.queue.now();
        let open: Vec<LeaseId> = self
            .infra
            .leases()
            .iter()
            .filter(|l| l.is_open())
            .map(|l| l.id)
            .collect();
        for id in open {
            let start = self.infra.lease(id)?.start;
            self.infra.release(id, now.max(start))?;
        }
        Ok(())
    }

    fn finish(self, report: &mut SimReport, flags: &mut BTreeSet<String>) {
        let completed = self.broker.completed;
        let total = self.app.tasks.len() as u32;
        let failed = self.broker.permanently_failed;
        let makespan = self.broker.makespan.unwrap_or(self.queue.now());
        report.makespan_ms = makespan.as_millis();
        report.deadline_ms = Some(self.app.deadline.as_millis());
        report.total_tasks = total;
        report.completed_tasks = completed;
        report.failed_tasks = failed;
        report.unfinished_tasks = total - completed - failed;
        report.deadline_met = completed == total && makespan <= self.app.deadline;
        report.budget_mc = Some(self.app.budget);
        report.nodes_provisioned = self.nodes_provisioned;
        for r in self.infra.resources() {
            let jobs = self.jobs.get(r.id.0 as usize).copied().unwrap_or(0);
            if r.kind.is_cloud() {
                report.tasks_cloud += jobs;
            } else {
                report.tasks_local += jobs;
            }
            report.resources.push(ResourceRow {
                id: r.id,
                org: r.org.clone(),
                kind: r.kind,
                cores: r.cores,
                rate_mcps: r.tariff.rate_mcps(),
                jobs,
            });
        }
        report.spent_mc += self.infra.ledger().total();
        report.leases.extend(lease_rows(&self.infra, ""));
        if self.broker.degraded {
            flags.insert("degraded".into());
        }
        flags.extend(self.flags);
    }
}

fn run_streams(
    scenario: &Scenario,
    spec: &StreamSpec,
    rng: &SeededRng,
    log: &mut EventLog,
    report: &mut SimReport,
) -> Result<(), RunError> {
    let index = scenario
        .catalog
        .iter()
        .position(|c| c.name == spec.instance_type)
        .expect("validated stream instance type");
    let kind = scenario.catalog[index].to_instance_type(index)?;
    let streams = make_stream(
        &StreamParams {
            request_counts: spec.request_counts.clone(),
            horizon: SimTime(spec.horizon_ms),
            service_length: SimTime(spec.service_ms),
            service_jitter: SimTime(spec.service_jitter_ms),
            caps: spec.caps.clone(),
        },
        &rng.fork(2),
    )?;
    for stream in &streams {
        let mut t = kind.clone();
        t.cap = Some(
            t.cap
                .map_or(stream.resource_cap, |c| c.min(stream.resource_cap)),
        );
        let mut infra = Infrastructure::new(scenario.billing_start);
        infra.add_instance_type(t.clone());
        let done = serve_stream(stream, &t.name, &mut infra, log)?;
        let stats = response_time(stream, &done)?;
        let makespan = done
            .iter()
            .flatten()
            .max()
            .copied()
            .unwrap_or(SimTime::ZERO);
        report.makespan_ms = report.makespan_ms.max(makespan.as_millis());
        report.total_tasks += stream.arrivals.len() as u32;
        report.completed_tasks += stream.arrivals.len() as u32;
        report.tasks_cloud += stream.arrivals.len() as u32;
        report.spent_mc += infra.ledger().total();
        report.streams.push(StreamRow {
            stream_id: stream.stream_id.clone(),
            requests: stream.arrivals.len() as u32,
            cap: stream.resource_cap,
            instances: infra.resources().len() as u32,
            mean_response_ms: stats.mean_ms,
            max_response_ms: stats.max.as_millis(),
            spent_mc: infra.ledger().total(),
        });
        report.leases.extend(lease_rows(&infra, &stream.stream_id));
    }
    Ok(())
}

struct Instance {
    resource: ResourceId,
    lease: LeaseId,
    /// When each core next becomes free.
    cores: Vec<SimTime>,
    released: bool,
}

/// Serves each request at arrival on whichever core can start it first,
/// counting a freshly provisioned instance as an option while below the cap.
/// Instances are released once idle after the final arrival.
fn serve_stream(
    stream: &RequestStream,
    kind: &str,
    infra: &mut Infrastructure,
    log: &mut EventLog,
) -> Result<Vec<Option<SimTime>>, RunError> {
    let t = infra
        .instance_type(kind)
        .cloned()
        .expect("instance type registered");
    let cap = t.cap.unwrap_or(u32::MAX);
    let mut queue: EventQueue = EventQueue::new();
    for (i, at) in stream.arrivals.iter().enumerate() {
        queue.push(*at, EventKind::RequestArrival { request: i as u32 })?;
    }
    let mut instances: Vec<Instance> = Vec::new();
    let mut done = vec![None; stream.arrivals.len()];
    let mut arrived = 0usize;
    while !queue.is_empty() {
        let e = queue.advance()?;
        log.record(&stream.stream_id, &e)?;
        let now = e.fire_at;
        match e.kind {
            EventKind::RequestArrival { request } => {
                arrived += 1;
                let best = instances
                    .iter()
                    .enumerate()
                    .filter(|(_, inst)| !inst.released)
                    .flat_map(|(i, inst)| {
                        inst.cores
                            .iter()
                            .enumerate()
                            .map(move |(c, free)| ((*free).max(now), i, c))
                    })
                    .min();
                let active = instances.iter().filter(|i| !i.released).count() as u32;
                let fresh_start = now + t.provisioning_delay;
                let (start, i, c) = match best {
                    Some(b) if b.0 <= fresh_start || active >= cap => b,
                    _ => {
                        let lease = infra.provision(kind, 1, now)?.remove(0);
                        instances.push(Instance {
                            resource: lease.resource,
                            lease: lease.id,
                            cores: vec![lease.ready_at; t.cores as usize],
                            released: false,
                        });
                        (lease.ready_at.max(now), instances.len() - 1, 0)
                    }
                };
                let length = stream.service_lengths[request as usize];
                let end = start + t.speed.exec_time(length);
                instances[i].cores[c] = end;
                done[request as usize] = Some(end);
                queue.push(end, EventKind::RequestCompletion { request })?;
            }
            EventKind::RequestCompletion { .. } => {
                if arrived < stream.arrivals.len() {
                    continue;
                }
                for inst in instances.iter_mut().filter(|i| !i.released) {
                    if inst.cores.iter().all(|f| *f <= now) {
                        infra.release(inst.lease, now)?;
                        inst.released = true;
                    }
                }
            }
            _ => {}
        }
    }
    debug_assert!(instances
        .iter()
        .all(|i| i.released || infra.open_lease(i.resource).is_none()));
    Ok(done)
}

fn run_exchange(
    spec: &ExchangeSpec,
    log: &mut EventLog,
    report: &mut SimReport,
    flags: &mut BTreeSet<String>,
) -> Result<(), RunError> {
    let mut ex = Exchange::new();
    for (i, o) in spec.offers.iter().enumerate() {
        ex.publish_offer(Offer {
            offer_id: o.offer_id.clone(),
            provider_id: o.provider_id.clone(),
            instance_type: o.instance_type.clone(),
            rate_mcps: o.rate_mcps,
            capacity: o.capacity,
            speed: crate::infra::Speed::from_f64(o.speed).ok_or_else(|| {
                ScenarioError::Validation {
                    field: format!("exchange.offers[{i}].speed"),
                    message: "must be positive".into(),
                }
            })?,
            window: Window::new(SimTime(o.start_ms), SimTime(o.end_ms)),
        })?;
    }
    let requirements: Vec<Requirement> = spec
        .requirements
        .iter()
        .map(|r| Requirement {
            req_id: r.req_id.clone(),
            consumer: r.consumer.clone(),
            slots: r.slots,
            max_rate_mcps: r.max_rate_mcps,
            min_speed: crate::infra::Speed::from_f64(r.min_speed)
                .unwrap_or(crate::infra::Speed::UNIT),
            window: Window::new(SimTime(r.start_ms), SimTime(r.end_ms)),
            budget_mc: Millicents(r.budget_mc),
        })
        .collect();
    let terms = SlaTerms {
        penalty_mc_per_violation: Millicents(spec.penalty_mc_per_violation),
    };

    let mut queue: EventQueue = EventQueue::new();
    for (i, r) in spec.requirements.iter().enumerate() {
        queue.push(
            SimTime(r.submit_ms),
            EventKind::RequirementSubmitted { index: i as u32 },
        )?;
    }
    for (i, o) in spec.outages.iter().enumerate() {
        queue.push(
            SimTime(o.start_ms),
            EventKind::OutageStart { index: i as u32 },
        )?;
        queue.push(SimTime(o.end_ms), EventKind::OutageEnd { index: i as u32 })?;
    }

    let mut down: Vec<bool> = vec![false; spec.outages.len()];
    let mut unavailable: BTreeMap<ReservationId, u32> = BTreeMap::new();
    let mut lost_ms: BTreeMap<ReservationId, u64> = BTreeMap::new();
    let mut last = SimTime::ZERO;
    while let Some(t) = queue.peek_time() {
        // unavailability is constant between event timestamps
        for (id, slots) in &unavailable {
            *lost_ms.entry(*id).or_default() += *slots as u64 * (t - last).as_millis();
        }
        last = t;
        while queue.peek_time() == Some(t) {
            let e = queue.advance()?;
            log.record("exchange", &e)?;
            match e.kind {
                EventKind::RequirementSubmitted { index } => {
                    let req = &requirements[index as usize];
                    let held = ex
                        .match_requirement(req, t)
                        .and_then(|m| ex.reserve(&m, terms));
                    match held {
                        Ok(held) => {
                            for (r, _) in held {
                                queue.push(
                                    r.window.start,
                                    EventKind::ReservationStart {
                                        reservation: r.reservation_id,
                                    },
                                )?;
                                queue.push(
                                    r.window.end,
                                    EventKind::ReservationEnd {
                                        reservation: r.reservation_id,
                                    },
                                )?;
                            }
                        }
                        Err(MarketError::NoMatch(id)) => {
                            report.unmatched_requirements.push(id);
                            flags.insert("unmatched_requirement".into());
                        }
                        Err(other) => return Err(other.into()),
                    }
                }
                EventKind::ReservationStart { reservation } => ex.activate(reservation, t)?,
                EventKind::ReservationEnd { reservation } => ex.complete(reservation, t)?,
                EventKind::OutageStart { index } => down[index as usize] = true,
                EventKind::OutageEnd { index } => down[index as usize] = false,
                _ => {}
            }
        }
        unavailable = shortfall(&ex, spec, &down, t);
        for (id, slots) in &unavailable {
            let sla = ex.reservation(*id)?.sla_id;
            ex.record_violations(sla, *slots as u64)?;
        }
    }

    for r in ex.reservations() {
        let sla = ex.sla(r.sla_id)?;
        let reserved = r.slots as u64 * r.window.len().as_millis();
        let delivered =
            reserved.saturating_sub(lost_ms.get(&r.reservation_id).copied().unwrap_or(0));
        let s = ex.settle(r.sla_id, delivered)?;
        if sla.violations > 0 {
            flags.insert("sla_violated".into());
        }
        report.settlements.push(SettlementRow {
            sla_id: r.sla_id.0,
            req_id: sla.req_id.clone(),
            offer_id: r.offer_id.clone(),
            slots: r.slots,
            price_mc: sla.price_mc,
            delivered_slot_ms: delivered,
            violations: sla.violations,
            price_due_mc: s.price_due_mc,
            penalty_mc: s.penalty_mc,
            net_mc: s.net_mc,
            excess_penalty_mc: s.excess_penalty_mc,
        });
    }
    Ok(())
}

/// Reserved slots each active reservation is missing at `t`. When an offer
/// is short, the most recent reservations lose their slots first.
fn shortfall(
    ex: &Exchange,
    spec: &ExchangeSpec,
    down: &[bool],
    t: SimTime,
) -> BTreeMap<ReservationId, u32> {
    let mut out = BTreeMap::new();
    for offer in ex.offers() {
        let lost: u32 = spec
            .outages
            .iter()
            .zip(down)
            .filter(|(o, d)| **d && o.offer_id == offer.offer_id)
            .map(|(o, _)| o.slots_down)
            .sum();
        let available = offer.capacity.saturating_sub(lost);
        let mut active: Vec<_> = ex
            .reservations()
            .iter()
            .filter(|r| {
                r.offer_id == offer.offer_id
                    && r.state == ReservationState::Active
                    && r.window.contains(t)
            })
            .collect();
        let reserved: u32 = active.iter().map(|r| r.slots).sum();
        let mut missing = reserved.saturating_sub(available);
        active.sort_by_key(|r| std::cmp::Reverse(r.reservation_id));
        for r in active {
            if missing == 0 {
                break;
            }
            let take = missing.min(r.slots);
            out.insert(r.reservation_id, take);
            missing -= take;
        }
    }
    out
}
