//! Sizing a cloud burst so a bag finishes by its deadline.

use crate::infra::ComputeResource;
use crate::time::SimTime;

/// `ceil(pending / slots) * exec`, where slots are the local cores and exec
/// is the slowest local run time of a `ref_length` task.
pub fn estimate_local_makespan(
    local: &[ComputeResource],
    pending: u32,
    ref_length: SimTime,
) -> SimTime {
    if pending == 0 {
        return SimTime::ZERO;
    }
    let slots: u32 = local.iter().map(|r| r.cores).sum();
    if slots == 0 {
        return SimTime(u64::MAX);
    }
    let exec = local
        .iter()
        .map(|r| r.exec_time(ref_length))
        .max()
        .unwrap_or(ref_length);
    SimTime(pending.div_ceil(slots) as u64 * exec.as_millis())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProvisioningInput {
    pub pending: u32,
    pub local_slots: u32,
    /// Run time of one task on any slot.
    pub task_time: SimTime,
    pub deadline_remaining: SimTime,
    pub provisioning_delay: SimTime,
    pub cores_per_node: u32,
}

impl ProvisioningInput {
    /// Projected finish with `nodes` extra nodes, all requested now.
    pub fn projected_finish(&self, nodes: u32) -> Option<SimTime> {
        if self.pending == 0 {
            return Some(SimTime::ZERO);
        }
        let slots = self.local_slots as u64 + nodes as u64 * self.cores_per_node as u64;
        if slots == 0 {
            return None;
        }
        let rounds = (self.pending as u64).div_ceil(slots);
        let delay = if nodes == 0 {
            SimTime::ZERO
        } else {
            self.provisioning_delay
        };
        Some(SimTime(rounds * self.task_time.as_millis()) + delay)
    }

    /// Beyond this many nodes every task already has its own slot.
    pub fn node_bound(&self) -> u32 {
        self.pending.div_ceil(self.cores_per_node.max(1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProvisioningDecision {
    pub nodes: u32,
    /// No node count meets the deadline; `nodes` minimises the projected finish.
    pub deadline_infeasible: bool,
}

/// Fewest extra nodes whose projected finish meets the deadline; when none
/// does, the fewest nodes reaching the earliest projected finish.
pub fn provisioning_decision(input: &ProvisioningInput) -> ProvisioningDecision {
    let d = input.deadline_remaining;
    let fits = |n: u32| input.projected_finish(n).is_some_and(|f| f <= d);
    if input.pending == 0 || fits(0) {
        return ProvisioningDecision {
            nodes: 0,
            deadline_infeasible: false,
        };
    }
    let k = input.cores_per_node.max(1) as u64;
    let len = input.task_time.as_millis().max(1);
    let rounds = d
        .as_millis()
        .saturating_sub(input.provisioning_delay.as_millis())
        / len;
    if d >= input.provisioning_delay && rounds >= 1 {
        // enough slots to finish the bag in `rounds` rounds
        let need = (input.pending as u64).div_ceil(rounds);
        let extra = need
            .saturating_sub(input.local_slots as u64)
            .div_ceil(k)
            .max(1);
        return ProvisioningDecision {
            nodes: extra as u32,
            deadline_infeasible: false,
        };
    }
    // every task in its own slot gives the earliest finish, unless local
    // capacity alone is already at least as quick
    let saturating = (input.pending as u64)
        .saturating_sub(input.local_slots as u64)
        .div_ceil(k)
        .max(1) as u32;
    let nodes = match (
        input.projected_finish(0),
        input.projected_finish(saturating),
    ) {
        (Some(local), Some(burst)) if local <= burst => 0,
        _ => saturating,
    };
    ProvisioningDecision {
        nodes,
        deadline_infeasible: true,
    }
}
