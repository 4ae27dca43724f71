//! Scenario files: JSON with integer `_ms` times and `_mc` money.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::infra::{
    AllocationPolicy, BillingStart, ComputeResource, InstanceType, ResourceId, ResourceKind, Speed,
    Tariff,
};
use crate::time::SimTime;
use crate::workload::Strategy;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid field `{field}`: {message}")]
    Validation { field: String, message: String },
}

impl ScenarioError {
    fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        ScenarioError::Validation {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub description: Option<String>,
    #[serde(default)]
    pub billing_start: BillingStart,
    #[serde(default)]
    pub resources: Vec<ResourceSpec>,
    #[serde(default)]
    pub catalog: Vec<InstanceTypeSpec>,
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub broker: Option<BrokerSpec>,
    #[serde(default)]
    pub exchange: Option<ExchangeSpec>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceSpec {
    pub org: String,
    #[serde(default)]
    pub name: Option<String>,
    pub kind: ResourceKind,
    pub cores: u32,
    #[serde(default = "unit_speed")]
    pub speed: f64,
    #[serde(default)]
    pub rate_mcps: Option<u64>,
    #[serde(default)]
    pub rate_mc_per_hour: Option<u64>,
    #[serde(default)]
    pub provisioning_delay_ms: u64,
    #[serde(default)]
    pub policy: AllocationPolicy,
    #[serde(default)]
    pub failure_prob: f64,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceTypeSpec {
    pub name: String,
    pub provider: String,
    #[serde(default = "one")]
    pub cores: u32,
    #[serde(default = "unit_speed")]
    pub speed: f64,
    #[serde(default)]
    pub rate_mcps: Option<u64>,
    #[serde(default)]
    pub rate_mc_per_hour: Option<u64>,
    #[serde(default = "default_delay_ms")]
    pub provisioning_delay_ms: u64,
    #[serde(default)]
    pub policy: AllocationPolicy,
    #[serde(default)]
    pub cap: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum WorkloadSpec {
    Empty,
    Bag(BagSpec),
    Stream(StreamSpec),
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BagSpec {
    pub tasks: u32,
    pub mean_ms: u64,
    #[serde(default)]
    pub jitter_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub request_counts: Vec<u32>,
    pub horizon_ms: u64,
    pub service_ms: u64,
    #[serde(default)]
    pub service_jitter_ms: u64,
    pub caps: Vec<u32>,
    /// Catalog entry each request is served on.
    pub instance_type: String,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrokerSpec {
    pub strategy: Strategy,
    pub deadline_ms: u64,
    pub budget_mc: u64,
    #[serde(default = "default_retry_cap")]
    pub retry_cap: u32,
    #[serde(default = "default_tick_ms")]
    pub tick_ms: u64,
    /// Span of the completion-rate window; defaults to the mean task length.
    #[serde(default)]
    pub rate_window_ms: Option<u64>,
    /// Catalog entry used for cloud bursts; defaults to the first entry.
    #[serde(default)]
    pub instance_type: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExchangeSpec {
    #[serde(default)]
    pub offers: Vec<OfferSpec>,
    #[serde(default)]
    pub requirements: Vec<RequirementSpec>,
    #[serde(default)]
    pub outages: Vec<OutageSpec>,
    #[serde(default)]
    pub penalty_mc_per_violation: u64,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfferSpec {
    pub offer_id: String,
    pub provider_id: String,
    pub instance_type: String,
    pub rate_mcps: u64,
    pub capacity: u32,
    #[serde(default = "unit_speed")]
    pub speed: f64,
    pub start_ms: u64,
    pub end_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequirementSpec {
    pub req_id: String,
    #[serde(default = "default_consumer")]
    pub consumer: String,
    #[serde(default)]
    pub submit_ms: u64,
    pub slots: u32,
    pub max_rate_mcps: u64,
    #[serde(default = "min_speed")]
    pub min_speed: f64,
    pub start_ms: u64,
    pub end_ms: u64,
    pub budget_mc: u64,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutageSpec {
    pub offer_id: String,
    pub start_ms: u64,
    pub end_ms: u64,
    pub slots_down: u32,
}

fn unit_speed() -> f64 {
    1.0
}

fn min_speed() -> f64 {
    0.001
}

fn one() -> u32 {
    1
}

fn default_delay_ms() -> u64 {
    60_000
}

fn default_retry_cap() -> u32 {
    3
}

fn default_tick_ms() -> u64 {
    10_000
}

fn default_consumer() -> String {
    "broker".into()
}

fn tariff(field: &str, mcps: Option<u64>, hourly: Option<u64>) -> Result<Tariff, ScenarioError> {
    match (mcps, hourly) {
        (Some(_), Some(_)) => Err(ScenarioError::invalid(
            field,
            "give either rate_mcps or rate_mc_per_hour, not both",
        )),
        (None, Some(h)) => Ok(Tariff::PerHour {
            rate_mc_per_hour: h,
        }),
        (m, None) => Ok(Tariff::PerSecond {
            rate_mcps: m.unwrap_or(0),
        }),
    }
}

fn speed(field: String, factor: f64) -> Result<Speed, ScenarioError> {
    Speed::from_f64(factor)
        .ok_or_else(|| ScenarioError::invalid(field, "speed must be a positive number"))
}

impl ResourceSpec {
    pub fn to_resource(&self, index: usize) -> Result<ComputeResource, ScenarioError> {
        let at = |f: &str| format!("resources[{index}].{f}");
        Ok(ComputeResource {
            id: ResourceId(index as u32),
            org: self.org.clone(),
            kind: self.kind,
            cores: self.cores,
            speed: speed(at("speed"), self.speed)?,
            tariff: tariff(&at("rate_mcps"), self.rate_mcps, self.rate_mc_per_hour)?,
            provisioning_delay: SimTime(self.provisioning_delay_ms),
            policy: self.policy,
            failure_prob: self.failure_prob,
            instance_type: None,
        })
    }
}

impl InstanceTypeSpec {
    pub fn to_instance_type(&self, index: usize) -> Result<InstanceType, ScenarioError> {
        let at = |f: &str| format!("catalog[{index}].{f}");
        Ok(InstanceType {
            name: self.name.clone(),
            provider: self.provider.clone(),
            cores: self.cores,
            speed: speed(at("speed"), self.speed)?,
            tariff: tariff(&at("rate_mcps"), self.rate_mcps, self.rate_mc_per_hour)?,
            provisioning_delay: SimTime(self.provisioning_delay_ms),
            policy: self.policy,
            cap: self.cap,
        })
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Scenario, ScenarioError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            })?;
        let scenario: Scenario = serde_path_to_error::deserialize(value).map_err(|e| {
            let field = e.path().to_string();
            ScenarioError::Validation {
                field,
                message: e.into_inner().to_string(),
            }
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn strategy(&self) -> Option<Strategy> {
        self.broker.as_ref().map(|b| b.strategy)
    }

    /// Catalog entry used for cloud bursts.
    pub fn burst_type(&self) -> Option<&InstanceTypeSpec> {
        let b = self.broker.as_ref()?;
        match &b.instance_type {
            Some(name) => self.catalog.iter().find(|c| &c.name == name),
            None => self.catalog.first(),
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.name.trim().is_empty() {
            return Err(ScenarioError::invalid("name", "must not be empty"));
        }
        for (i, r) in self.resources.iter().enumerate() {
            let at = |f: &str| format!("resources[{i}].{f}");
            if r.cores == 0 {
                return Err(ScenarioError::invalid(at("cores"), "must be at least 1"));
            }
            if !r.kind.is_cloud() && r.provisioning_delay_ms != 0 {
                return Err(ScenarioError::invalid(
                    at("provisioning_delay_ms"),
                    "only cloud resources have a provisioning delay",
                ));
            }
            if !(0.0..=1.0).contains(&r.failure_prob) {
                return Err(ScenarioError::invalid(
                    at("failure_prob"),
                    "must lie in [0, 1]",
                ));
            }
            r.to_resource(i)?;
        }
        let mut names = BTreeSet::new();
        for (i, c) in self.catalog.iter().enumerate() {
            if !names.insert(c.name.as_str()) {
                return Err(ScenarioError::invalid(
                    format!("catalog[{i}].name"),
                    format!("duplicate instance type `{}`", c.name),
                ));
            }
            if c.cores == 0 {
                return Err(ScenarioError::invalid(
                    format!("catalog[{i}].cores"),
                    "must be at least 1",
                ));
            }
            if c.cap == Some(0) {
                return Err(ScenarioError::invalid(
                    format!("catalog[{i}].cap"),
                    "must be at least 1",
                ));
            }
            c.to_instance_type(i)?;
        }
        match &self.workload {
            WorkloadSpec::Empty => {}
            WorkloadSpec::Bag(bag) => self.validate_bag(bag)?,
            WorkloadSpec::Stream(s) => self.validate_stream(s)?,
        }
        if let Some(ex) = &self.exchange {
            validate_exchange(ex)?;
        }
        Ok(())
    }

    fn validate_bag(&self, bag: &BagSpec) -> Result<(), ScenarioError> {
        if bag.tasks == 0 {
            return Err(ScenarioError::invalid(
                "workload.bag.tasks",
                "must be at least 1",
            ));
        }
        if bag.mean_ms == 0 {
            return Err(ScenarioError::invalid(
                "workload.bag.mean_ms",
                "must be positive",
            ));
        }
        if bag.jitter_ms >= bag.mean_ms {
            return Err(ScenarioError::invalid(
                "workload.bag.jitter_ms",
                "must be smaller than mean_ms so every task has positive length",
            ));
        }
        let Some(b) = &self.broker else {
            return Err(ScenarioError::invalid(
                "broker",
                "a bag workload needs a broker section",
            ));
        };
        if b.deadline_ms == 0 {
            return Err(ScenarioError::invalid(
                "broker.deadline_ms",
                "must be positive",
            ));
        }
        if b.tick_ms == 0 {
            return Err(ScenarioError::invalid("broker.tick_ms", "must be positive"));
        }
        if b.rate_window_ms == Some(0) {
            return Err(ScenarioError::invalid(
                "broker.rate_window_ms",
                "must be positive",
            ));
        }
        if let Some(name) = &b.instance_type {
            if !self.catalog.iter().any(|c| &c.name == name) {
                return Err(ScenarioError::invalid(
                    "broker.instance_type",
                    format!("`{name}` is not in the catalog"),
                ));
            }
        }
        match b.strategy {
            Strategy::DeadlineProvisioning => {
                if self.resources.is_empty() && self.catalog.is_empty() {
                    return Err(ScenarioError::invalid(
                        "resources",
                        "provisioning needs local resources or a catalog",
                    ));
                }
            }
            _ => {
                if self.resources.is_empty() {
                    return Err(ScenarioError::invalid(
                        "resources",
                        "the broker needs at least one resource",
                    ));
                }
            }
        }
        Ok(())
    }

    fn validate_stream(&self, s: &StreamSpec) -> Result<(), ScenarioError> {
        if s.request_counts.is_empty() || s.request_counts.contains(&0) {
            return Err(ScenarioError::invalid(
                "workload.stream.request_counts",
                "needs at least one positive count",
            ));
        }
        if s.caps.is_empty() || s.caps.contains(&0) {
            return Err(ScenarioError::invalid(
                "workload.stream.caps",
                "needs at least one positive cap",
            ));
        }
        if s.service_ms == 0 {
            return Err(ScenarioError::invalid(
                "workload.stream.service_ms",
                "must be positive",
            ));
        }
        if s.service_jitter_ms >= s.service_ms {
            return Err(ScenarioError::invalid(
                "workload.stream.service_jitter_ms",
                "must be smaller than service_ms",
            ));
        }
        if !self.catalog.iter().any(|c| c.name == s.instance_type) {
            return Err(ScenarioError::invalid(
                "workload.stream.instance_type",
                format!("`{}` is not in the catalog", s.instance_type),
            ));
        }
        Ok(())
    }
}

fn validate_exchange(ex: &ExchangeSpec) -> Result<(), ScenarioError> {
    let mut ids = BTreeSet::new();
    for (i, o) in ex.offers.iter().enumerate() {
        let at = |f: &str| format!("exchange.offers[{i}].{f}");
        if !ids.insert(o.offer_id.as_str()) {
            return Err(ScenarioError::invalid(
                at("offer_id"),
                format!("duplicate offer `{}`", o.offer_id),
            ));
        }
        if o.capacity == 0 {
            return Err(ScenarioError::invalid(at("capacity"), "must be at least 1"));
        }
        if o.end_ms <= o.start_ms {
            return Err(ScenarioError::invalid(
                at("end_ms"),
                "window must be non-empty",
            ));
        }
        speed(at("speed"), o.speed)?;
    }
    for (i, r) in ex.requirements.iter().enumerate() {
        let at = |f: &str| format!("exchange.requirements[{i}].{f}");
        if r.slots == 0 {
            return Err(ScenarioError::invalid(at("slots"), "must be at least 1"));
        }
        if r.end_ms <= r.start_ms {
            return Err(ScenarioError::invalid(
                at("end_ms"),
                "window must be non-empty",
            ));
        }
        if r.submit_ms > r.start_ms {
            return Err(ScenarioError::invalid(
                at("submit_ms"),
                "must not be after start_ms",
            ));
        }
        speed(at("min_speed"), r.min_speed)?;
    }
    for (i, o) in ex.outages.iter().enumerate() {
        let at = |f: &str| format!("exchange.outages[{i}].{f}");
        if !ids.contains(o.offer_id.as_str()) {
            return Err(ScenarioError::invalid(
                at("offer_id"),
                format!("unknown offer `{}`", o.offer_id),
            ));
        }
        if o.end_ms <= o.start_ms {
            return Err(ScenarioError::invalid(
                at("end_ms"),
                "outage must be non-empty",
            ));
        }
    }
    Ok(())
}

/// Reads and validates a scenario file.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Scenario::from_json(&text)
}
