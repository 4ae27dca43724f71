//! Lease-aware dispatch planning shared by both DBC strategies.
//!
//! For every resource the planner builds a cost curve: the completion time
//! of the k-th additional task when tasks go to the earliest free core, and
//! the extra lease charge incurred by stretching the lease to cover them.
//! A dynamic program over resources then finds, for a completion horizon,
//! the cheapest way to place `n` tasks; the time-optimising strategy
//! searches for the earliest horizon whose cheapest placement fits the
//! remaining budget.

use std::cmp::Ordering;
use std::cmp::Reverse;
use std::collections::BinaryHeap;

use super::{LeaseView, ResourceView};
use crate::infra::{Millicents, ResourceId};
use crate::time::SimTime;

/// Completion times and marginal lease costs of 1..=n extra tasks on one resource.
#[derive(Clone, Debug)]
pub(crate) struct CostCurve {
    pub id: ResourceId,
    /// `finish[k-1]`: completion of the k-th extra task.
    pub finish: Vec<SimTime>,
    /// `cost[k]`: extra charge for k tasks; `cost[0] == 0`.
    pub cost: Vec<Millicents>,
}

impl CostCurve {
    pub fn build(view: &ResourceView, n: usize) -> CostCurve {
        let mut cores: BinaryHeap<Reverse<SimTime>> =
            view.core_free_at.iter().copied().map(Reverse).collect();
        let mut finish = Vec::with_capacity(n);
        let mut cost = Vec::with_capacity(n + 1);
        cost.push(Millicents::ZERO);
        if cores.is_empty() {
            return CostCurve {
                id: view.id,
                finish,
                cost,
            };
        }
        let mut latest = SimTime::ZERO;
        for _ in 0..n {
            let Reverse(free) = cores.pop().expect("non-empty");
            let done = free + view.exec_estimate;
            cores.push(Reverse(done));
            latest = latest.max(done);
            finish.push(done);
            let extra = match view.lease {
                LeaseView::Unleased { bill_from, .. } => {
                    view.tariff.charge(latest.saturating_sub(bill_from))
                }
                LeaseView::Open {
                    bill_from,
                    committed_end,
                } => {
                    let before = view.tariff.charge(committed_end.saturating_sub(bill_from));
                    let after = view
                        .tariff
                        .charge(latest.max(committed_end).saturating_sub(bill_from));
                    after - before
                }
            };
            cost.push(extra);
        }
        CostCurve {
            id: view.id,
            finish,
            cost,
        }
    }

    /// Tasks that finish no later than `horizon`.
    fn capacity(&self, horizon: SimTime) -> usize {
        self.finish.partition_point(|f| *f <= horizon)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Cell {
    cost: Millicents,
    finish: SimTime,
}

impl Cell {
    fn key(&self) -> (Millicents, SimTime) {
        (self.cost, self.finish)
    }
}

/// Placement of some tasks across resources.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Plan {
    pub quota: Vec<(ResourceId, u32)>,
    pub tasks: u32,
    pub cost: Millicents,
    /// Latest completion among the planned tasks.
    pub finish: SimTime,
}

impl Plan {
    pub fn quota_for(&self, id: ResourceId) -> u32 {
        self.quota
            .iter()
            .find(|(r, _)| *r == id)
            .map_or(0, |(_, q)| *q)
    }
}

/// Cheapest placement of up to `n` tasks finishing by `horizon`, for every
/// task count `0..=n` at once. Curves must be ordered worst-ranked first;
/// ties go to the better-ranked resource.
pub(crate) struct Table {
    cells: Vec<Option<Cell>>,
    choice: Vec<Vec<usize>>,
}

impl Table {
    pub fn solve(curves: &[CostCurve], n: usize, horizon: SimTime) -> Table {
        let mut cells: Vec<Option<Cell>> = vec![None; n + 1];
        cells[0] = Some(Cell {
            cost: Millicents::ZERO,
            finish: SimTime::ZERO,
        });
        let mut choice = Vec::with_capacity(curves.len());
        for curve in curves {
            let cap = curve.capacity(horizon).min(n);
            let mut next: Vec<Option<Cell>> = vec![None; n + 1];
            let mut pick = vec![0usize; n + 1];
            for m in 0..=n {
                let Some(base) = cells[m] else { continue };
                for k in 0..=cap.min(n - m) {
                    let cand = Cell {
                        cost: base.cost + curve.cost[k],
                        finish: if k == 0 {
                            base.finish
                        } else {
                            base.finish.max(curve.finish[k - 1])
                        },
                    };
                    let slot = &mut next[m + k];
                    let better = match slot {
                        None => true,
                        Some(cur) => match cand.key().cmp(&cur.key()) {
                            Ordering::Less => true,
                            Ordering::Equal => k > pick[m + k],
                            Ordering::Greater => false,
                        },
                    };
                    if better {
                        *slot = Some(cand);
                        pick[m + k] = k;
                    }
                }
            }
            cells = next;
            choice.push(pick);
        }
        Table { cells, choice }
    }

    pub fn cost(&self, tasks: usize) -> Option<Millicents> {
        self.cells.get(tasks).copied().flatten().map(|c| c.cost)
    }

    pub fn plan(&self, curves: &[CostCurve], tasks: usize) -> Option<Plan> {
        let cell = self.cells.get(tasks).copied().flatten()?;
        let mut quota = vec![(ResourceId(0), 0u32); curves.len()];
        let mut left = tasks;
        for i in (0..curves.len()).rev() {
            let k = self.choice[i][left];
            quota[i] = (curves[i].id, k as u32);
            left -= k;
        }
        debug_assert_eq!(left, 0);
        quota.retain(|(_, q)| *q > 0);
        quota.sort_by_key(|(id, _)| *id);
        Some(Plan {
            quota,
            tasks: tasks as u32,
            cost: cell.cost,
            finish: cell.finish,
        })
    }
}

/// Cheapest placement of all `n` tasks by `horizon`.
pub(crate) fn cheapest_by(curves: &[CostCurve], n: usize, horizon: SimTime) -> Option<Plan> {
    Table::solve(curves, n, horizon).plan(curves, n)
}

/// Earliest-finishing placement of as many of the `n` tasks as `budget`
/// allows (all of them when affordable), cheapest among equals.
pub(crate) fn fastest_within(curves: &[CostCurve], n: usize, budget: Millicents) -> Option<Plan> {
    let unbounded = Table::solve(curves, n, SimTime(u64::MAX));
    let tasks = (0..=n)
        .rev()
        .find(|&k| unbounded.cost(k).is_some_and(|c| c <= budget))?;
    if tasks == 0 {
        return unbounded.plan(curves, 0);
    }
    let mut horizons: Vec<SimTime> = curves
        .iter()
        .flat_map(|c| c.finish.iter().take(tasks).copied())
        .collect();
    horizons.sort();
    horizons.dedup();
    let fits = |h: SimTime| {
        Table::solve(curves, tasks, h)
            .cost(tasks)
            .is_some_and(|c| c <= budget)
    };
    // feasibility is monotone in the horizon
    let idx = horizons.partition_point(|h| !fits(*h));
    let horizon = *horizons.get(idx)?;
    cheapest_by(curves, tasks, horizon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infra::Tariff;

    fn view(id: u32, cores: usize, exec: u64, rate: u64) -> ResourceView {
        ResourceView {
            id: ResourceId(id),
            cores: cores as u32,
            tariff: Tariff::PerSecond { rate_mcps: rate },
            core_free_at: vec![SimTime::ZERO; cores],
            free_now: cores as u32,
            lease: LeaseView::Unleased {
                ready_at: SimTime::ZERO,
                bill_from: SimTime::ZERO,
            },
            exec_estimate: SimTime::from_secs(exec),
            completion_rate: cores as f64 / exec as f64,
            per_job_cost: Millicents(rate * exec / cores as u64),
        }
    }

    #[test]
    fn curve_tracks_rounds() {
        let c = CostCurve::build(&view(0, 2, 10, 3), 3);
        assert_eq!(
            c.finish,
            vec![
                SimTime::from_secs(10),
                SimTime::from_secs(10),
                SimTime::from_secs(20)
            ]
        );
        assert_eq!(
            c.cost,
            vec![
                Millicents(0),
                Millicents(30),
                Millicents(30),
                Millicents(60)
            ]
        );
    }

    #[test]
    fn open_lease_charges_only_extension() {
        let mut v = view(0, 2, 10, 3);
        v.core_free_at = vec![SimTime::ZERO, SimTime::from_secs(10)];
        v.lease = LeaseView::Open {
            bill_from: SimTime::ZERO,
            committed_end: SimTime::from_secs(10),
        };
        let c = CostCurve::build(&v, 2);
        // first task fits inside the committed window
        assert_eq!(c.cost, vec![Millicents(0), Millicents(0), Millicents(30)]);
    }

    #[test]
    fn cheapest_prefers_cheap_resource() {
        let curves = vec![
            CostCurve::build(&view(1, 1, 10, 90), 4),
            CostCurve::build(&view(0, 1, 10, 2), 4),
        ];
        let p = cheapest_by(&curves, 4, SimTime::from_secs(1000)).unwrap();
        assert_eq!(p.quota, vec![(ResourceId(0), 4)]);
        let p = cheapest_by(&curves, 4, SimTime::from_secs(30)).unwrap();
        assert_eq!(p.quota, vec![(ResourceId(0), 3), (ResourceId(1), 1)]);
        assert!(cheapest_by(&curves, 4, SimTime::from_secs(19)).is_none());
    }

    #[test]
    fn fastest_uses_both_when_affordable() {
        let curves = vec![
            CostCurve::build(&view(1, 1, 10, 90), 10),
            CostCurve::build(&view(0, 1, 10, 2), 10),
        ];
        let p = fastest_within(&curves, 10, Millicents(1_000_000)).unwrap();
        assert_eq!(p.quota, vec![(ResourceId(0), 5), (ResourceId(1), 5)]);
        assert_eq!(p.finish, SimTime::from_secs(50));
    }

    #[test]
    fn fastest_partial_when_budget_short() {
        let curves = vec![CostCurve::build(&view(0, 1, 10, 10), 5)];
        let p = fastest_within(&curves, 5, Millicents(250)).unwrap();
        assert_eq!(p.tasks, 2);
        assert_eq!(p.cost, Millicents(200));
        assert_eq!(fastest_within(&curves, 5, Millicents(50)).unwrap().tasks, 0);
    }
}
