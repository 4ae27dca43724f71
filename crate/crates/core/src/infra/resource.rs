use std::fmt;

use serde::{Deserialize, Serialize};

use super::billing::Millicents;
use crate::time::SimTime;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ResourceId(pub u32);

impl fmt::Display for ResourceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceKind {
    Local,
    Grid,
    CloudOnDemand,
}

impl ResourceKind {
    pub fn is_cloud(self) -> bool {
        matches!(self, ResourceKind::CloudOnDemand)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationPolicy {
    #[default]
    SpaceShared,
    TimeShared,
}

/// Per-core throughput relative to the reference core, in thousandths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Speed(u32);

impl Speed {
    pub const UNIT: Speed = Speed(1000);

    pub fn from_milli(milli: u32) -> Option<Speed> {
        (milli > 0).then_some(Speed(milli))
    }

    /// Rounds to the nearest thousandth; rejects non-positive or non-finite input.
    pub fn from_f64(factor: f64) -> Option<Speed> {
        if !factor.is_finite() || factor <= 0.0 || factor > 1.0e6 {
            return None;
        }
        Speed::from_milli((factor * 1000.0).round() as u32)
    }

    pub fn milli(self) -> u32 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 1000.0
    }

    /// Wall time to run `length` of reference work on one core, rounded up to the ms.
    pub fn exec_time(self, length: SimTime) -> SimTime {
        let num = length.as_millis() as u128 * 1000;
        SimTime(num.div_ceil(self.0 as u128) as u64)
    }
}

impl Default for Speed {
    fn default() -> Self {
        Speed::UNIT
    }
}

/// How a lease is charged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Tariff {
    /// Millicents per started second.
    PerSecond { rate_mcps: u64 },
    /// Millicents per started hour.
    PerHour { rate_mc_per_hour: u64 },
}

impl Tariff {
    pub fn charge(&self, duration: SimTime) -> Millicents {
        match *self {
            Tariff::PerSecond { rate_mcps } => Millicents(rate_mcps * duration.ceil_secs()),
            Tariff::PerHour { rate_mc_per_hour } => {
                Millicents(rate_mc_per_hour * duration.as_millis().div_ceil(3_600_000))
            }
        }
    }

    /// Per-second equivalent used for ranking and display.
    pub fn rate_mcps(&self) -> u64 {
        match *self {
            Tariff::PerSecond { rate_mcps } => rate_mcps,
            Tariff::PerHour { rate_mc_per_hour } => rate_mc_per_hour.div_ceil(3600),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComputeResource {
    pub id: ResourceId,
    pub org: String,
    pub kind: ResourceKind,
    pub cores: u32,
    pub speed: Speed,
    pub tariff: Tariff,
    pub provisioning_delay: SimTime,
    pub policy: AllocationPolicy,
    /// Probability that a finished task turns out to have failed.
    pub failure_prob: f64,
    /// Catalog instance type when the node was provisioned dynamically.
    pub instance_type: Option<String>,
}

impl ComputeResource {
    pub fn exec_time(&self, length: SimTime) -> SimTime {
        self.speed.exec_time(length)
    }

    /// Static throughput estimate in tasks per second.
    pub fn static_rate(&self, ref_length: SimTime) -> f64 {
        if ref_length == SimTime::ZERO {
            return 0.0;
        }
        self.cores as f64 * self.speed.as_f64() / ref_length.as_secs_f64()
    }

    /// One core-slot's share of the lease for a task of `length`.
    pub fn per_job_cost(&self, length: SimTime) -> Millicents {
        let exec = self.exec_time(length);
        Millicents(
            self.tariff
                .charge(exec)
                .0
                .div_ceil(self.cores.max(1) as u64),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exec_time_rounds_up() {
        assert_eq!(Speed::UNIT.exec_time(SimTime(300_000)), SimTime(300_000));
        assert_eq!(
            Speed::from_f64(2.0).unwrap().exec_time(SimTime(5)),
            SimTime(3)
        );
        assert_eq!(
            Speed::from_f64(0.5).unwrap().exec_time(SimTime(10)),
            SimTime(20)
        );
    }

    #[test]
    fn speed_rejects_nonpositive() {
        assert!(Speed::from_f64(0.0).is_none());
        assert!(Speed::from_f64(-1.0).is_none());
        assert!(Speed::from_f64(f64::NAN).is_none());
        assert!(Speed::from_f64(0.0001).is_none());
    }

    #[test]
    fn per_second_tariff() {
        let t = Tariff::PerSecond { rate_mcps: 90 };
        assert_eq!(t.charge(SimTime::from_secs(1200)), Millicents(108_000));
        assert_eq!(t.charge(SimTime::ZERO), Millicents(0));
        assert_eq!(t.charge(SimTime(1)), Millicents(90));
    }

    #[test]
    fn per_hour_tariff_ceils() {
        let t = Tariff::PerHour {
            rate_mc_per_hour: 8500,
        };
        assert_eq!(t.charge(SimTime::from_secs(3601)), Millicents(17_000));
        assert_eq!(t.charge(SimTime::from_secs(3600)), Millicents(8500));
        assert_eq!(t.charge(SimTime::ZERO), Millicents(0));
    }
}
