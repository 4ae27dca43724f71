//! Posted-price exchange: providers publish offers, consumers submit
//! requirements, matched capacity is reserved under an SLA and settled
//! with linear penalties.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::infra::{Millicents, Speed};
use crate::time::SimTime;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MarketError {
    #[error("offer `{0}` is already published")]
    DuplicateOfferId(String),
    #[error("offer `{0}` needs capacity >= 1 and a non-empty window")]
    InvalidOffer(String),
    #[error("no feasible offers for requirement `{0}`")]
    NoMatch(String),
    #[error("offer `{offer}` no longer has {slots} free slots")]
    CapacityRaced { offer: String, slots: u32 },
    #[error("unknown offer `{0}`")]
    UnknownOffer(String),
    #[error("unknown reservation {0}")]
    UnknownReservation(ReservationId),
    #[error("unknown sla {0}")]
    UnknownSla(SlaId),
    #[error("{0} is still open and cannot be settled")]
    NotSettleable(SlaId),
    #[error("reservation {id} cannot go from {from:?} to {to:?} at {at}")]
    InvalidTransition {
        id: ReservationId,
        from: ReservationState,
        to: ReservationState,
        at: SimTime,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReservationId(pub u32);

impl fmt::Display for ReservationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "res-{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SlaId(pub u32);

impl fmt::Display for SlaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sla-{}", self.0)
    }
}

/// Half-open interval `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: SimTime,
    pub end: SimTime,
}

impl Window {
    pub fn new(start: SimTime, end: SimTime) -> Self {
        Self { start, end }
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn len(&self) -> SimTime {
        self.end.saturating_sub(self.start)
    }

    pub fn covers(&self, other: &Window) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    pub fn overlaps(&self, other: &Window) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn contains(&self, t: SimTime) -> bool {
        self.start <= t && t < self.end
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Offer {
    pub offer_id: String,
    pub provider_id: String,
    pub instance_type: String,
    pub rate_mcps: u64,
    /// Maximum concurrently reserved slots.
    pub capacity: u32,
    pub speed: Speed,
    pub window: Window,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Requirement {
    pub req_id: String,
    pub consumer: String,
    pub slots: u32,
    pub max_rate_mcps: u64,
    pub min_speed: Speed,
    pub window: Window,
    pub budget_mc: Millicents,
}

/// Price of `slots` slots at `rate_mcps` for the whole of `window`.
pub fn slot_price(rate_mcps: u64, slots: u32, window: &Window) -> Millicents {
    Millicents(rate_mcps * slots as u64 * window.len().ceil_secs())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatchLeg {
    pub offer_id: String,
    pub slots: u32,
    pub rate_mcps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatchResult {
    pub req_id: String,
    pub consumer: String,
    pub window: Window,
    /// Legs in rank order.
    pub legs: Vec<MatchLeg>,
    pub total_price: Millicents,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReservationState {
    Held,
    Active,
    Completed,
    Cancelled,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Reservation {
    pub reservation_id: ReservationId,
    pub sla_id: SlaId,
    pub offer_id: String,
    pub slots: u32,
    pub window: Window,
    pub state: ReservationState,
}

impl Reservation {
    /// Whether the reservation still claims capacity.
    pub fn holds_capacity(&self) -> bool {
        matches!(
            self.state,
            ReservationState::Held | ReservationState::Active
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Sla {
    pub sla_id: SlaId,
    pub req_id: String,
    pub consumer: String,
    pub provider: String,
    pub offer_id: String,
    pub rate_mcps: u64,
    pub slots: u32,
    pub window: Window,
    pub price_mc: Millicents,
    pub penalty_mc_per_violation: Millicents,
    pub violations: u64,
}

impl Sla {
    pub fn penalty_owed(&self) -> Millicents {
        Millicents(self.violations * self.penalty_mc_per_violation.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlaTerms {
    pub penalty_mc_per_violation: Millicents,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Settlement {
    pub sla_id: SlaId,
    pub price_due_mc: Millicents,
    pub penalty_mc: Millicents,
    /// `price_due - penalty`, floored at zero.
    pub net_mc: Millicents,
    /// Penalty beyond the price due; reported, never charged.
    pub excess_penalty_mc: Millicents,
}

/// Settles an SLA given the slot-milliseconds actually delivered.
pub fn settle(sla: &Sla, delivered_slot_ms: u64) -> Settlement {
    let reserved = sla.slots as u128 * sla.window.len().as_millis() as u128;
    let delivered = (delivered_slot_ms as u128).min(reserved);
    let price_due = (sla.price_mc.0 as u128 * delivered)
        .checked_div(reserved)
        .map_or(sla.price_mc, |due| Millicents(due as u64));
    let penalty = sla.penalty_owed();
    Settlement {
        sla_id: sla.sla_id,
        price_due_mc: price_due,
        penalty_mc: penalty,
        net_mc: price_due.saturating_sub(penalty),
        excess_penalty_mc: penalty.saturating_sub(price_due),
    }
}

#[derive(Clone, Debug, Default)]
pub struct Exchange {
    offers: Vec<Offer>,
    reservations: Vec<Reservation>,
    slas: Vec<Sla>,
}

impl Exchange {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn publish_offer(&mut self, offer: Offer) -> Result<(), MarketError> {
        if self.offers.iter().any(|o| o.offer_id == offer.offer_id) {
            return Err(MarketError::DuplicateOfferId(offer.offer_id));
        }
        if offer.capacity == 0 || offer.window.is_empty() {
            return Err(MarketError::InvalidOffer(offer.offer_id));
        }
        self.offers.push(offer);
        Ok(())
    }

    pub fn offers(&self) -> &[Offer] {
        &self.offers
    }

    pub fn offer(&self, id: &str) -> Option<&Offer> {
        self.offers.iter().find(|o| o.offer_id == id)
    }

    pub fn reservations(&self) -> &[Reservation] {
        &self.reservations
    }

    pub fn reservation(&self, id: ReservationId) -> Result<&Reservation, MarketError> {
        self.reservations
            .get(id.0 as usize)
            .ok_or(MarketError::UnknownReservation(id))
    }

    pub fn slas(&self) -> &[Sla] {
        &self.slas
    }

    pub fn sla(&self, id: SlaId) -> Result<&Sla, MarketError> {
        self.slas
            .get(id.0 as usize)
            .ok_or(MarketError::UnknownSla(id))
    }

    /// Peak slots claimed on `offer_id` at any instant of `window`.
    pub fn reserved_peak(&self, offer_id: &str, window: &Window) -> u32 {
        let mut edges: Vec<(SimTime, i64)> = Vec::new();
        for r in &self.reservations {
            if r.offer_id != offer_id || !r.holds_capacity() || !r.window.overlaps(window) {
                continue;
            }
            edges.push((r.window.start.max(window.start), r.slots as i64));
            edges.push((r.window.end.min(window.end), -(r.slots as i64)));
        }
        // releases sort before claims at the same instant
        edges.sort();
        let (mut level, mut peak) = (0i64, 0i64);
        for (_, delta) in edges {
            level += delta;
            peak = peak.max(level);
        }
        peak as u32
    }

    /// Slots of `offer` still free throughout `window`.
    pub fn free_capacity(&self, offer: &Offer, window: &Window) -> u32 {
        offer
            .capacity
            .saturating_sub(self.reserved_peak(&offer.offer_id, window))
    }

    /// Feasible offers for `req` with their free slots, in rank order:
    /// ascending rate, then descending speed, then offer id.
    pub fn candidates(&self, req: &Requirement, now: SimTime) -> Vec<(&Offer, u32)> {
        let mut out: Vec<(&Offer, u32)> = self
            .offers
            .iter()
            .filter(|o| {
                o.window.end > now
                    && o.rate_mcps <= req.max_rate_mcps
                    && o.speed >= req.min_speed
                    && o.window.covers(&req.window)
            })
            .map(|o| (o, self.free_capacity(o, &req.window)))
            .filter(|(_, free)| *free >= 1)
            .collect();
        out.sort_by(|(a, _), (b, _)| {
            a.rate_mcps
                .cmp(&b.rate_mcps)
                .then(b.speed.cmp(&a.speed))
                .then(a.offer_id.cmp(&b.offer_id))
        });
        out
    }

    /// Cheapest set of slots covering `req`, filled greedily in rank order.
    pub fn match_requirement(
        &self,
        req: &Requirement,
        now: SimTime,
    ) -> Result<MatchResult, MarketError> {
        let no_match = || MarketError::NoMatch(req.req_id.clone());
        if req.slots == 0 || req.window.is_empty() {
            return Err(no_match());
        }
        let mut left = req.slots;
        let mut legs = Vec::new();
        let mut total = Millicents::ZERO;
        for (offer, free) in self.candidates(req, now) {
            if left == 0 {
                break;
            }
            let take = free.min(left);
            left -= take;
            total += slot_price(offer.rate_mcps, take, &req.window);
            legs.push(MatchLeg {
                offer_id: offer.offer_id.clone(),
                slots: take,
                rate_mcps: offer.rate_mcps,
            });
        }
        if left > 0 || total > req.budget_mc {
            return Err(no_match());
        }
        Ok(MatchResult {
            req_id: req.req_id.clone(),
            consumer: req.consumer.clone(),
            window: req.window,
            legs,
            total_price: total,
        })
    }

    /// Holds every leg of `m`, one reservation and SLA per leg. Nothing is
    /// held unless all legs still fit.
    pub fn reserve(
        &mut self,
        m: &MatchResult,
        terms: SlaTerms,
    ) -> Result<Vec<(Reservation, Sla)>, MarketError> {
        for leg in &m.legs {
            let offer = self
                .offer(&leg.offer_id)
                .ok_or_else(|| MarketError::UnknownOffer(leg.offer_id.clone()))?;
            if self.free_capacity(offer, &m.window) < leg.slots {
                return Err(MarketError::CapacityRaced {
                    offer: leg.offer_id.clone(),
                    slots: leg.slots,
                });
            }
        }
        let mut out = Vec::with_capacity(m.legs.len());
        for leg in &m.legs {
            let provider = self
                .offer(&leg.offer_id)
                .map(|o| o.provider_id.clone())
                .unwrap_or_default();
            let sla = Sla {
                sla_id: SlaId(self.slas.len() as u32),
                req_id: m.req_id.clone(),
                consumer: m.consumer.clone(),
                provider,
                offer_id: leg.offer_id.clone(),
                rate_mcps: leg.rate_mcps,
                slots: leg.slots,
                window: m.window,
                price_mc: slot_price(leg.rate_mcps, leg.slots, &m.window),
                penalty_mc_per_violation: terms.penalty_mc_per_violation,
                violations: 0,
            };
            let reservation = Reservation {
                reservation_id: ReservationId(self.reservations.len() as u32),
                sla_id: sla.sla_id,
                offer_id: leg.offer_id.clone(),
                slots: leg.slots,
                window: m.window,
                state: ReservationState::Held,
            };
            self.slas.push(sla.clone());
            self.reservations.push(reservation.clone());
            out.push((reservation, sla));
        }
        Ok(out)
    }

    fn transition(
        &mut self,
        id: ReservationId,
        to: ReservationState,
        at: SimTime,
    ) -> Result<(), MarketError> {
        use ReservationState::*;
        let r = self
            .reservations
            .get_mut(id.0 as usize)
            .ok_or(MarketError::UnknownReservation(id))?;
        let ok = match (r.state, to) {
            (Held, Active) => at == r.window.start,
            (Active, Completed) => at >= r.window.end,
            (Held | Active, Cancelled) => true,
            _ => false,
        };
        if !ok {
            return Err(MarketError::InvalidTransition {
                id,
                from: r.state,
                to,
                at,
            });
        }
        r.state = to;
        Ok(())
    }

    /// Held -> Active, only at the window start.
    pub fn activate(&mut self, id: ReservationId, now: SimTime) -> Result<(), MarketError> {
        self.transition(id, ReservationState::Active, now)
    }

    pub fn complete(&mut self, id: ReservationId, now: SimTime) -> Result<(), MarketError> {
        self.transition(id, ReservationState::Completed, now)
    }

    /// Cancels a reservation; its capacity becomes free again.
    pub fn cancel(&mut self, id: ReservationId, now: SimTime) -> Result<(), MarketError> {
        self.transition(id, ReservationState::Cancelled, now)
    }

    /// Settles `id` once its reservation has completed or been cancelled.
    pub fn settle(&self, id: SlaId, delivered_slot_ms: u64) -> Result<Settlement, MarketError> {
        let sla = self.sla(id)?;
        let closed = self
            .reservations
            .iter()
            .filter(|r| r.sla_id == id)
            .all(|r| !r.holds_capacity());
        if !closed {
            return Err(MarketError::NotSettleable(id));
        }
        Ok(settle(sla, delivered_slot_ms))
    }

    pub fn record_violations(&mut self, id: SlaId, count: u64) -> Result<(), MarketError> {
        let sla = self
            .slas
            .get_mut(id.0 as usize)
            .ok_or(MarketError::UnknownSla(id))?;
        sla.violations += count;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn offer(id: &str, rate: u64, cap: u32) -> Offer {
        Offer {
            offer_id: id.into(),
            provider_id: "p".into(),
            instance_type: "small".into(),
            rate_mcps: rate,
            capacity: cap,
            speed: Speed::UNIT,
            window: Window::new(SimTime::ZERO, SimTime::from_secs(1000)),
        }
    }

    fn req(slots: u32) -> Requirement {
        Requirement {
            req_id: "q".into(),
            consumer: "c".into(),
            slots,
            max_rate_mcps: 100,
            min_speed: Speed::UNIT,
            window: Window::new(SimTime::from_secs(10), SimTime::from_secs(110)),
            budget_mc: Millicents(1_000_000),
        }
    }

    const TERMS: SlaTerms = SlaTerms {
        penalty_mc_per_violation: Millicents(500),
    };

    #[test]
    fn zero_offers_no_match() {
        let ex = Exchange::new();
        assert_eq!(
            ex.match_requirement(&req(1), SimTime::ZERO),
            Err(MarketError::NoMatch("q".into()))
        );
    }

    #[test]
    fn single_offer_suffices() {
        let mut ex = Exchange::new();
        ex.publish_offer(offer("a", 5, 4)).unwrap();
        let m = ex.match_requirement(&req(3), SimTime::ZERO).unwrap();
        assert_eq!(m.legs.len(), 1);
        assert_eq!(m.legs[0].slots, 3);
        assert_eq!(m.total_price, Millicents(5 * 3 * 100));
    }

    #[test]
    fn duplicate_offer_rejected() {
        let mut ex = Exchange::new();
        ex.publish_offer(offer("a", 5, 4)).unwrap();
        assert_eq!(
            ex.publish_offer(offer("a", 6, 4)),
            Err(MarketError::DuplicateOfferId("a".into()))
        );
    }

    #[test]
    fn expired_offer_never_matches() {
        let mut ex = Exchange::new();
        let mut o = offer("old", 1, 4);
        o.window = Window::new(SimTime::ZERO, SimTime::from_secs(5));
        ex.publish_offer(o).unwrap();
        assert!(ex
            .match_requirement(&req(1), SimTime::from_secs(6))
            .is_err());
    }

    #[test]
    fn cheapest_first_across_offers() {
        let mut ex = Exchange::new();
        ex.publish_offer(offer("dear", 9, 4)).unwrap();
        ex.publish_offer(offer("cheap", 2, 2)).unwrap();
        let m = ex.match_requirement(&req(3), SimTime::ZERO).unwrap();
        assert_eq!(m.legs[0].offer_id, "cheap");
        assert_eq!(m.legs[0].slots, 2);
        assert_eq!(m.legs[1].offer_id, "dear");
        assert_eq!(m.legs[1].slots, 1);
    }

    #[test]
    fn over_budget_is_no_match() {
        let mut ex = Exchange::new();
        ex.publish_offer(offer("a", 50, 4)).unwrap();
        let mut r = req(4);
        r.budget_mc = Millicents(100);
        assert!(ex.match_requirement(&r, SimTime::ZERO).is_err());
    }

    #[test]
    fn second_reservation_races() {
        let mut ex = Exchange::new();
        ex.publish_offer(offer("a", 5, 2)).unwrap();
        let m1 = ex.match_requirement(&req(2), SimTime::ZERO).unwrap();
        let m2 = ex.match_requirement(&req(2), SimTime::ZERO).unwrap();
        let held = ex.reserve(&m1, TERMS).unwrap();
        assert_eq!(held[0].0.state, ReservationState::Held);
        assert_eq!(
            ex.reserve(&m2, TERMS),
            Err(MarketError::CapacityRaced {
                offer: "a".into(),
                slots: 2
            })
        );
        ex.cancel(held[0].0.reservation_id, SimTime::ZERO).unwrap();
        assert!(ex.reserve(&m2, TERMS).is_ok());
    }

    #[test]
    fn disjoint_windows_share_capacity() {
        let mut ex = Exchange::new();
        ex.publish_offer(offer("a", 5, 1)).unwrap();
        let mut r1 = req(1);
        r1.window = Window::new(SimTime::ZERO, SimTime::from_secs(10));
        let mut r2 = req(1);
        r2.window = Window::new(SimTime::from_secs(10), SimTime::from_secs(20));
        let m1 = ex.match_requirement(&r1, SimTime::ZERO).unwrap();
        ex.reserve(&m1, TERMS).unwrap();
        let m2 = ex.match_requirement(&r2, SimTime::ZERO).unwrap();
        ex.reserve(&m2, TERMS).unwrap();
    }

    #[test]
    fn activation_only_at_window_start() {
        let mut ex = Exchange::new();
        ex.publish_offer(offer("a", 5, 2)).unwrap();
        let m = ex.match_requirement(&req(1), SimTime::ZERO).unwrap();
        let id = ex.reserve(&m, TERMS).unwrap()[0].0.reservation_id;
        assert!(ex.activate(id, SimTime::from_secs(9)).is_err());
        ex.activate(id, SimTime::from_secs(10)).unwrap();
        assert!(ex.complete(id, SimTime::from_secs(100)).is_err());
        ex.complete(id, SimTime::from_secs(110)).unwrap();
    }

    fn sla(price: u64, violations: u64) -> Sla {
        Sla {
            sla_id: SlaId(0),
            req_id: "q".into(),
            consumer: "c".into(),
            provider: "p".into(),
            offer_id: "a".into(),
            rate_mcps: 1,
            slots: 1,
            window: Window::new(SimTime::ZERO, SimTime::from_secs(10)),
            price_mc: Millicents(price),
            penalty_mc_per_violation: Millicents(500),
            violations,
        }
    }

    #[test]
    fn settle_full_delivery() {
        let s = settle(&sla(10_000, 0), 10_000);
        assert_eq!(s.price_due_mc, Millicents(10_000));
        assert_eq!(s.penalty_mc, Millicents(0));
        assert_eq!(s.net_mc, Millicents(10_000));
    }

    #[test]
    fn settle_linear_penalty() {
        let s = settle(&sla(10_000, 2), 10_000);
        assert_eq!(s.penalty_mc, Millicents(1000));
        assert_eq!(s.net_mc, Millicents(9000));
    }

    #[test]
    fn settle_floors_at_zero() {
        let s = settle(&sla(800, 2), 5_000);
        assert_eq!(s.price_due_mc, Millicents(400));
        assert_eq!(s.net_mc, Millicents(0));
        assert_eq!(s.excess_penalty_mc, Millicents(600));
    }
}
