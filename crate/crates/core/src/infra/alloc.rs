//! Core allocation on a single resource.
//!
//! Space-shared: a task holds one core exclusively; excess tasks wait in a
//! FIFO queue. Time-shared: every resident task progresses at
//! `speed * min(1, cores / residents)`, and completion times are recomputed
//! whenever the resident set changes. The time-shared model integrates the
//! fluid rates in `f64` milliseconds and reports each completion at the
//! first whole millisecond at or after its exact fluid finish.

use std::collections::VecDeque;

use super::resource::{AllocationPolicy, Speed};
use crate::time::SimTime;
use crate::workload::TaskId;

const FLUID_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Completion {
    pub task: TaskId,
    pub at: SimTime,
    /// When the task first received CPU.
    pub started: SimTime,
}

#[derive(Clone, Debug)]
pub struct CoreAllocator {
    cores: u32,
    speed: Speed,
    state: PolicyState,
    finished: Vec<Completion>,
}

#[derive(Clone, Debug)]
enum PolicyState {
    Space(SpaceShared),
    Time(TimeShared),
}

#[derive(Clone, Debug)]
struct Running {
    task: TaskId,
    started: SimTime,
    end: SimTime,
}

#[derive(Clone, Debug)]
struct SpaceShared {
    slots: Vec<Option<Running>>,
    queue: VecDeque<(TaskId, SimTime)>,
}

#[derive(Clone, Debug)]
struct Resident {
    task: TaskId,
    started: SimTime,
    /// Reference work left, in ms on a speed-1 core.
    remaining: f64,
}

#[derive(Clone, Debug)]
struct TimeShared {
    clock: f64,
    residents: Vec<Resident>,
}

impl CoreAllocator {
    pub fn new(policy: AllocationPolicy, cores: u32, speed: Speed) -> Self {
        assert!(cores >= 1, "a resource needs at least one core");
        let state = match policy {
            AllocationPolicy::SpaceShared => PolicyState::Space(SpaceShared {
                slots: vec![None; cores as usize],
                queue: VecDeque::new(),
            }),
            AllocationPolicy::TimeShared => PolicyState::Time(TimeShared {
                clock: 0.0,
                residents: Vec::new(),
            }),
        };
        Self {
            cores,
            speed,
            state,
            finished: Vec::new(),
        }
    }

    pub fn policy(&self) -> AllocationPolicy {
        match self.state {
            PolicyState::Space(_) => AllocationPolicy::SpaceShared,
            PolicyState::Time(_) => AllocationPolicy::TimeShared,
        }
    }

    pub fn cores(&self) -> u32 {
        self.cores
    }

    /// Admits `task` at `now` and returns its projected completion assuming
    /// no further arrivals.
    pub fn allocate_task(&mut self, task: TaskId, length: SimTime, now: SimTime) -> SimTime {
        self.advance(now);
        let speed = self.speed;
        match &mut self.state {
            PolicyState::Space(s) => {
                if let Some(slot) = s.slots.iter_mut().find(|c| c.is_none()) {
                    let end = now + speed.exec_time(length);
                    *slot = Some(Running {
                        task,
                        started: now,
                        end,
                    });
                    return end;
                }
                s.queue.push_back((task, length));
            }
            PolicyState::Time(t) => {
                t.residents.push(Resident {
                    task,
                    started: now,
                    remaining: length.as_millis() as f64,
                });
            }
        }
        self.projected_completion(task)
            .expect("admitted task must complete")
    }

    /// Advances to `now` and drains every completion at or before it.
    pub fn complete_until(&mut self, now: SimTime) -> Vec<Completion> {
        self.advance(now);
        std::mem::take(&mut self.finished)
    }

    pub fn next_completion(&self) -> Option<SimTime> {
        if let Some(c) = self.finished.first() {
            return Some(c.at);
        }
        match &self.state {
            PolicyState::Space(s) => s.slots.iter().flatten().map(|r| r.end).min(),
            PolicyState::Time(t) => {
                let rate = t.rate(self.cores, self.speed);
                t.residents
                    .iter()
                    .map(|r| r.remaining)
                    .min_by(f64::total_cmp)
                    .map(|rem| fluid_to_ms(t.clock + rem / rate))
            }
        }
    }

    /// Tasks holding CPU right now.
    pub fn running(&self) -> usize {
        match &self.state {
            PolicyState::Space(s) => s.slots.iter().flatten().count(),
            PolicyState::Time(t) => t.residents.len(),
        }
    }

    /// Running plus queued.
    pub fn resident(&self) -> usize {
        match &self.state {
            PolicyState::Space(s) => s.slots.iter().flatten().count() + s.queue.len(),
            PolicyState::Time(t) => t.residents.len(),
        }
    }

    pub fn is_idle(&self) -> bool {
        self.resident() == 0 && self.finished.is_empty()
    }

    /// Cores not claimed by any resident task.
    pub fn free_cores(&self) -> u32 {
        (self.cores as usize).saturating_sub(self.resident()) as u32
    }

    /// Instantaneous progress rate of every running task, in reference ms per ms.
    pub fn progress_rates(&self) -> Vec<(TaskId, f64)> {
        match &self.state {
            PolicyState::Space(s) => s
                .slots
                .iter()
                .flatten()
                .map(|r| (r.task, self.speed.as_f64()))
                .collect(),
            PolicyState::Time(t) => {
                let rate = t.rate(self.cores, self.speed);
                t.residents.iter().map(|r| (r.task, rate)).collect()
            }
        }
    }

    /// When each core becomes free if nothing else arrives, sorted ascending.
    pub fn core_free_times(&self, now: SimTime) -> Vec<SimTime> {
        let mut probe = self.clone();
        probe.finished.clear();
        match &mut probe.state {
            PolicyState::Space(s) => {
                let mut per_core: Vec<SimTime> = s
                    .slots
                    .iter()
                    .map(|slot| slot.as_ref().map_or(now, |r| r.end.max(now)))
                    .collect();
                for (_, length) in s.queue.drain(..) {
                    let (idx, _) = per_core
                        .iter()
                        .enumerate()
                        .min_by_key(|(i, t)| (**t, *i))
                        .expect("at least one core");
                    per_core[idx] = per_core[idx] + self.speed.exec_time(length);
                }
                per_core.sort();
                per_core
            }
            PolicyState::Time(_) => {
                probe.advance(SimTime(u64::MAX / 4));
                let mut ends: Vec<SimTime> = probe.finished.iter().map(|c| c.at).collect();
                ends.sort();
                let busy = ends.len().min(self.cores as usize);
                let mut out = vec![now; self.cores as usize - busy];
                out.extend(ends[ends.len() - busy..].iter().map(|t| (*t).max(now)));
                out
            }
        }
    }

    fn projected_completion(&self, task: TaskId) -> Option<SimTime> {
        let mut probe = self.clone();
        probe.advance(SimTime(u64::MAX / 4));
        probe.finished.iter().find(|c| c.task == task).map(|c| c.at)
    }

    fn advance(&mut self, to: SimTime) {
        let speed = self.speed;
        let cores = self.cores;
        match &mut self.state {
            PolicyState::Space(s) => loop {
                let next = s
                    .slots
                    .iter()
                    .enumerate()
                    .filter_map(|(i, slot)| slot.as_ref().map(|r| (r.end, i)))
                    .filter(|(end, _)| *end <= to)
                    .min();
                let Some((end, idx)) = next else { break };
                let done = s.slots[idx].take().expect("slot occupied");
                self.finished.push(Completion {
                    task: done.task,
                    at: done.end,
                    started: done.started,
                });
                if let Some((task, length)) = s.queue.pop_front() {
                    s.slots[idx] = Some(Running {
                        task,
                        started: end,
                        end: end + speed.exec_time(length),
                    });
                }
            },
            PolicyState::Time(t) => {
                let target = to.as_millis() as f64;
                while !t.residents.is_empty() {
                    let rate = t.rate(cores, speed);
                    let min_rem = t
                        .residents
                        .iter()
                        .map(|r| r.remaining)
                        .min_by(f64::total_cmp)
                        .expect("non-empty");
                    let finish = t.clock + min_rem / rate;
                    if fluid_to_ms(finish).as_millis() as f64 > target {
                        break;
                    }
                    let dt = (finish - t.clock).max(0.0);
                    for r in &mut t.residents {
                        r.remaining -= rate * dt;
                    }
                    t.clock = finish;
                    let at = fluid_to_ms(finish);
                    let mut i = 0;
                    while i < t.residents.len() {
                        if t.residents[i].remaining <= FLUID_EPS {
                            let r = t.residents.remove(i);
                            self.finished.push(Completion {
                                task: r.task,
                                at,
                                started: r.started,
                            });
                        } else {
                            i += 1;
                        }
                    }
                }
                if target > t.clock {
                    if !t.residents.is_empty() {
                        let rate = t.rate(cores, speed);
                        let dt = target - t.clock;
                        for r in &mut t.residents {
                            r.remaining -= rate * dt;
                        }
                    }
                    t.clock = target;
                }
            }
        }
    }
}

impl TimeShared {
    fn rate(&self, cores: u32, speed: Speed) -> f64 {
        let n = self.residents.len().max(1) as f64;
        speed.as_f64() * (cores as f64 / n).min(1.0)
    }
}

fn fluid_to_ms(t: f64) -> SimTime {
    SimTime((t - FLUID_EPS).ceil().max(0.0) as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(id: u32) -> TaskId {
        TaskId(id)
    }

    #[test]
    fn space_shared_fifo_on_cores() {
        let mut a = CoreAllocator::new(AllocationPolicy::SpaceShared, 2, Speed::UNIT);
        let len = SimTime::from_secs(10);
        assert_eq!(
            a.allocate_task(t(0), len, SimTime::ZERO),
            SimTime::from_secs(10)
        );
        assert_eq!(
            a.allocate_task(t(1), len, SimTime::ZERO),
            SimTime::from_secs(10)
        );
        assert_eq!(
            a.allocate_task(t(2), len, SimTime::ZERO),
            SimTime::from_secs(20)
        );
        assert_eq!(a.running(), 2);
        assert_eq!(a.resident(), 3);
        let done = a.complete_until(SimTime::from_secs(10));
        assert_eq!(done.len(), 2);
        assert_eq!(a.running(), 1);
        let done = a.complete_until(SimTime::from_secs(20));
        assert_eq!(
            done,
            vec![Completion {
                task: t(2),
                at: SimTime::from_secs(20),
                started: SimTime::from_secs(10)
            }]
        );
        assert!(a.is_idle());
    }

    #[test]
    fn time_shared_fair_sharing() {
        let mut a = CoreAllocator::new(AllocationPolicy::TimeShared, 1, Speed::UNIT);
        let len = SimTime::from_secs(10);
        a.allocate_task(t(0), len, SimTime::ZERO);
        let p = a.allocate_task(t(1), len, SimTime::ZERO);
        assert_eq!(p, SimTime::from_secs(20));
        assert_eq!(a.next_completion(), Some(SimTime::from_secs(20)));
        assert!(a.complete_until(SimTime::from_secs(19)).is_empty());
        let done = a.complete_until(SimTime::from_secs(20));
        assert_eq!(done.len(), 2);
        assert!(done.iter().all(|c| c.at == SimTime::from_secs(20)));
    }

    #[test]
    fn time_shared_below_core_count_runs_full_speed() {
        let mut a = CoreAllocator::new(AllocationPolicy::TimeShared, 4, Speed::UNIT);
        a.allocate_task(t(0), SimTime(1000), SimTime::ZERO);
        assert_eq!(
            a.allocate_task(t(1), SimTime(1000), SimTime::ZERO),
            SimTime(1000)
        );
        let total: f64 = a.progress_rates().iter().map(|(_, r)| r).sum();
        assert!((total - 2.0).abs() < 1e-12);
    }

    #[test]
    fn time_shared_staggered() {
        // 1 core: A(10s)@0, B(10s)@5s. A alone for 5s -> 5s left; both share
        // at 1/2 -> A done at 15s; B has 5s left at full speed -> 20s.
        let mut a = CoreAllocator::new(AllocationPolicy::TimeShared, 1, Speed::UNIT);
        a.allocate_task(t(0), SimTime::from_secs(10), SimTime::ZERO);
        assert!(a.complete_until(SimTime::from_secs(5)).is_empty());
        a.allocate_task(t(1), SimTime::from_secs(10), SimTime::from_secs(5));
        assert_eq!(a.next_completion(), Some(SimTime::from_secs(15)));
        let d = a.complete_until(SimTime::from_secs(15));
        assert_eq!(d[0].task, t(0));
        assert_eq!(a.next_completion(), Some(SimTime::from_secs(20)));
        let d = a.complete_until(SimTime::from_secs(30));
        assert_eq!(d[0].at, SimTime::from_secs(20));
    }

    #[test]
    fn core_free_times_include_queue() {
        let mut a = CoreAllocator::new(AllocationPolicy::SpaceShared, 2, Speed::UNIT);
        for i in 0..3 {
            a.allocate_task(t(i), SimTime(100), SimTime::ZERO);
        }
        assert_eq!(
            a.core_free_times(SimTime::ZERO),
            vec![SimTime(100), SimTime(200)]
        );
        let idle = CoreAllocator::new(AllocationPolicy::SpaceShared, 2, Speed::UNIT);
        assert_eq!(
            idle.core_free_times(SimTime(7)),
            vec![SimTime(7), SimTime(7)]
        );
    }

    #[test]
    fn speed_scales_exec() {
        let mut a = CoreAllocator::new(
            AllocationPolicy::SpaceShared,
            1,
            Speed::from_f64(2.0).unwrap(),
        );
        assert_eq!(
            a.allocate_task(t(0), SimTime(1000), SimTime::ZERO),
            SimTime(500)
        );
    }
}
