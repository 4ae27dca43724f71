use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Sub};

use serde::{Deserialize, Serialize};

use super::resource::ResourceId;
use crate::time::SimTime;

/// Integer money: 1 dollar = 100 cents = 100_000 millicents.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Millicents(pub u64);

impl Millicents {
    pub const ZERO: Millicents = Millicents(0);

    pub fn saturating_sub(self, rhs: Millicents) -> Millicents {
        Millicents(self.0.saturating_sub(rhs.0))
    }

    /// Dollars with three decimals, rounded half up.
    pub fn to_usd_string(self) -> String {
        let tenths_of_cent = (self.0 + 50) / 100;
        format!("{}.{:03}", tenths_of_cent / 1000, tenths_of_cent % 1000)
    }
}

impl Add for Millicents {
    type Output = Millicents;
    fn add(self, rhs: Millicents) -> Millicents {
        Millicents(self.0 + rhs.0)
    }
}

impl AddAssign for Millicents {
    fn add_assign(&mut self, rhs: Millicents) {
        self.0 += rhs.0;
    }
}

impl Sub for Millicents {
    type Output = Millicents;
    fn sub(self, rhs: Millicents) -> Millicents {
        Millicents(self.0 - rhs.0)
    }
}

impl Sum for Millicents {
    fn sum<I: Iterator<Item = Millicents>>(iter: I) -> Millicents {
        iter.fold(Millicents::ZERO, Add::add)
    }
}

impl fmt::Display for Millicents {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} mc", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LeaseId(pub u32);

impl fmt::Display for LeaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "lease-{}", self.0)
    }
}

/// When billing of a fresh lease starts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BillingStart {
    #[default]
    Request,
    Ready,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResourceLease {
    pub id: LeaseId,
    pub resource: ResourceId,
    pub requested_at: SimTime,
    pub ready_at: SimTime,
    /// Billing start.
    pub start: SimTime,
    pub end: Option<SimTime>,
    pub billed: Option<Millicents>,
}

impl ResourceLease {
    pub fn is_open(&self) -> bool {
        self.end.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LedgerRecord {
    pub lease: LeaseId,
    pub amount: Millicents,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CostLedger {
    records: Vec<LedgerRecord>,
    total: Millicents,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, lease: LeaseId, amount: Millicents, reason: impl Into<String>) {
        self.total += amount;
        self.records.push(LedgerRecord {
            lease,
            amount,
            reason: reason.into(),
        });
    }

    pub fn records(&self) -> &[LedgerRecord] {
        &self.records
    }

    pub fn total(&self) -> Millicents {
        self.total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usd_formatting() {
        assert_eq!(Millicents(108_000).to_usd_string(), "1.080");
        assert_eq!(Millicents(76_500).to_usd_string(), "0.765");
        assert_eq!(Millicents(0).to_usd_string(), "0.000");
        assert_eq!(Millicents(50).to_usd_string(), "0.001");
        assert_eq!(Millicents(49).to_usd_string(), "0.000");
        assert_eq!(Millicents(599_999).to_usd_string(), "6.000");
    }

    #[test]
    fn ledger_total_is_sum() {
        let mut l = CostLedger::new();
        l.record(LeaseId(0), Millicents(5), "a");
        l.record(LeaseId(1), Millicents(7), "b");
        assert_eq!(l.total(), Millicents(12));
        assert_eq!(
            l.records().iter().map(|r| r.amount).sum::<Millicents>(),
            l.total()
        );
    }
}
