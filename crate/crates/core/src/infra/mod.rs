//! Priced compute resources, leases, and the billing ledger.

mod alloc;
mod billing;
mod rate;
mod resource;

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

pub use alloc::{Completion, CoreAllocator};
pub use billing::{BillingStart, CostLedger, LeaseId, LedgerRecord, Millicents, ResourceLease};
pub use rate::CompletionWindow;
pub use resource::{AllocationPolicy, ComputeResource, ResourceId, ResourceKind, Speed, Tariff};

use crate::time::SimTime;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum InfraError {
    #[error("unknown resource {0}")]
    UnknownResource(ResourceId),
    #[error("unknown lease {0}")]
    UnknownLease(LeaseId),
    #[error("unknown instance type `{0}`")]
    UnknownInstanceType(String),
    #[error("provision count must be at least 1")]
    InvalidCount,
    #[error("instance type `{kind}` is capped at {cap}; {active} active, {requested} requested")]
    CapacityExceeded {
        kind: String,
        cap: u32,
        active: u32,
        requested: u32,
    },
    #[error("{0} already has an open lease")]
    AlreadyLeased(ResourceId),
    #[error("{0} was released and cannot be leased again")]
    Retired(ResourceId),
    #[error("{0} is already closed")]
    AlreadyClosed(LeaseId),
    #[error("{lease} released at {now}, before billing start {start}")]
    ReleaseBeforeStart {
        lease: LeaseId,
        now: SimTime,
        start: SimTime,
    },
}

/// A catalog entry that can be provisioned on demand.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InstanceType {
    pub name: String,
    pub provider: String,
    pub cores: u32,
    pub speed: Speed,
    pub tariff: Tariff,
    pub provisioning_delay: SimTime,
    pub policy: AllocationPolicy,
    /// Maximum simultaneously active instances; `None` is unlimited.
    pub cap: Option<u32>,
}

/// Resources, catalog, leases and ledger of one simulation run.
#[derive(Clone, Debug, Default)]
pub struct Infrastructure {
    resources: Vec<ComputeResource>,
    retired: Vec<bool>,
    catalog: Vec<InstanceType>,
    active_by_type: BTreeMap<String, u32>,
    leases: Vec<ResourceLease>,
    open_by_resource: BTreeMap<ResourceId, LeaseId>,
    ledger: CostLedger,
    billing_start: BillingStart,
}

impl Infrastructure {
    pub fn new(billing_start: BillingStart) -> Self {
        Self {
            billing_start,
            ..Self::default()
        }
    }

    pub fn billing_start(&self) -> BillingStart {
        self.billing_start
    }

    /// Registers a resource; its `id` is reassigned to the next free index.
    pub fn add_resource(&mut self, mut resource: ComputeResource) -> ResourceId {
        let id = ResourceId(self.resources.len() as u32);
        resource.id = id;
        self.resources.push(resource);
        self.retired.push(false);
        id
    }

    pub fn add_instance_type(&mut self, t: InstanceType) {
        self.catalog.push(t);
    }

    pub fn instance_type(&self, name: &str) -> Option<&InstanceType> {
        self.catalog.iter().find(|t| t.name == name)
    }

    pub fn resource(&self, id: ResourceId) -> Result<&ComputeResource, InfraError> {
        self.resources
            .get(id.0 as usize)
            .ok_or(InfraError::UnknownResource(id))
    }

    pub fn resources(&self) -> &[ComputeResource] {
        &self.resources
    }

    pub fn is_retired(&self, id: ResourceId) -> bool {
        self.retired.get(id.0 as usize).copied().unwrap_or(true)
    }

    pub fn lease(&self, id: LeaseId) -> Result<&ResourceLease, InfraError> {
        self.leases
            .get(id.0 as usize)
            .ok_or(InfraError::UnknownLease(id))
    }

    pub fn leases(&self) -> &[ResourceLease] {
        &self.leases
    }

    pub fn open_lease(&self, resource: ResourceId) -> Option<&ResourceLease> {
        self.open_by_resource
            .get(&resource)
            .map(|l| &self.leases[l.0 as usize])
    }

    pub fn ledger(&self) -> &CostLedger {
        &self.ledger
    }

    pub fn active_instances(&self, kind: &str) -> u32 {
        self.active_by_type.get(kind).copied().unwrap_or(0)
    }

    /// Billing start a lease requested at `now` on `resource` would get.
    pub fn billing_start_for(&self, resource: &ComputeResource, now: SimTime) -> SimTime {
        match self.billing_start {
            BillingStart::Request => now,
            BillingStart::Ready => now + resource.provisioning_delay,
        }
    }

    /// Opens a lease on an existing resource.
    pub fn lease_resource(
        &mut self,
        id: ResourceId,
        now: SimTime,
    ) -> Result<ResourceLease, InfraError> {
        let resource = self.resource(id)?;
        if self.is_retired(id) {
            return Err(InfraError::Retired(id));
        }
        if self.open_by_resource.contains_key(&id) {
            return Err(InfraError::AlreadyLeased(id));
        }
        let lease = ResourceLease {
            id: LeaseId(self.leases.len() as u32),
            resource: id,
            requested_at: now,
            ready_at: now + resource.provisioning_delay,
            start: self.billing_start_for(resource, now),
            end: None,
            billed: None,
        };
        self.open_by_resource.insert(id, lease.id);
        self.leases.push(lease.clone());
        Ok(lease)
    }

    /// Creates `count` fresh nodes of catalog type `kind`, each with an open lease.
    pub fn provision(
        &mut self,
        kind: &str,
        count: u32,
        now: SimTime,
    ) -> Result<Vec<ResourceLease>, InfraError> {
        if count == 0 {
            return Err(InfraError::InvalidCount);
        }
        let t = self
            .instance_type(kind)
            .ok_or_else(|| InfraError::UnknownInstanceType(kind.to_string()))?
            .clone();
        let active = self.active_instances(kind);
        if let Some(cap) = t.cap {
            if active + count > cap {
                return Err(InfraError::CapacityExceeded {
                    kind: kind.to_string(),
                    cap,
                    active,
                    requested: count,
                });
            }
        }
        let mut out = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let id = self.add_resource(ComputeResource {
                id: ResourceId(0),
                org: t.provider.clone(),
                kind: ResourceKind::CloudOnDemand,
                cores: t.cores,
                speed: t.speed,
                tariff: t.tariff,
                provisioning_delay: t.provisioning_delay,
                policy: t.policy,
                failure_prob: 0.0,
                instance_type: Some(t.name.clone()),
            });
            out.push(self.lease_resource(id, now)?);
        }
        *self.active_by_type.entry(kind.to_string()).or_default() += count;
        Ok(out)
    }

    /// Closes `lease` at `now`, bills it, and returns the amount.
    pub fn release(&mut self, lease: LeaseId, now: SimTime) -> Result<Millicents, InfraError> {
        let l = self
            .leases
            .get(lease.0 as usize)
            .ok_or(InfraError::UnknownLease(lease))?;
        if !l.is_open() {
            return Err(InfraError::AlreadyClosed(lease));
        }
        if now < l.start {
            return Err(InfraError::ReleaseBeforeStart {
                lease,
                now,
                start: l.start,
            });
        }
        let resource = &self.resources[l.resource.0 as usize];
        let amount = resource.tariff.charge(now - l.start);
        let reason = format!("{} {}", resource.org, resource.id);
        let rid = l.resource;
        let instance_type = resource.instance_type.clone();

        let l = &mut self.leases[lease.0 as usize];
        l.end = Some(now);
        l.billed = Some(amount);
        self.open_by_resource.remove(&rid);
        if let Some(kind) = instance_type {
            if let Some(n) = self.active_by_type.get_mut(&kind) {
                *n = n.saturating_sub(1);
            }
            self.retired[rid.0 as usize] = true;
        }
        self.ledger.record(lease, amount, reason);
        Ok(amount)
    }
}
