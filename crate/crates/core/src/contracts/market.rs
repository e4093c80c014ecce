//! Flexibility marketplace contract.
//!
//! Request lifecycle: `open → closed → assigned → settled`, or `open → expired`
//! when an auction closes without offers. Winner selection, assignment,
//! metered delivery and the settlement outcome are all decided here so that
//! they can be recomputed from the market ledger alone.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::{
    fail, unknown_method, Args, ArgsExt, CallContext, Contract, ContractError, ErrorKind,
    WorldState,
};
use crate::hash::{sha256, Digest};
use crate::identity::Address;
use crate::{canonical_enum, canonical_struct};

pub const NAME: &str = "market";
pub const DAY_MS: u64 = 86_400_000;
pub const METER_METRIC: &str = "meter_power";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestScenario {
    DayAhead,
    Intraday,
}

canonical_enum!(RequestScenario { DayAhead = 0, Intraday = 1 });

impl RequestScenario {
    pub fn as_str(&self) -> &'static str {
        match self {
            RequestScenario::DayAhead => "day_ahead",
            RequestScenario::Intraday => "intraday",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "day_ahead" => Some(RequestScenario::DayAhead),
            "intraday" => Some(RequestScenario::Intraday),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestStatus {
    Open,
    Closed,
    Assigned,
    Settled,
    Expired,
}

canonical_enum!(RequestStatus { Open = 0, Closed = 1, Assigned = 2, Settled = 3, Expired = 4 });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Dso,
    FleetManager,
    EvUser,
}

canonical_enum!(Role { Dso = 0, FleetManager = 1, EvUser = 2 });

impl Role {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dso" => Some(Role::Dso),
            "fleet_manager" => Some(Role::FleetManager),
            "ev_user" => Some(Role::EvUser),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OfferRecord {
    pub fleet_manager: Address,
    pub price_tokens: u64,
    pub committed_wh: u64,
    pub submitted_at: u64,
}

canonical_struct!(OfferRecord {
    fleet_manager,
    price_tokens,
    committed_wh,
    submitted_at
});

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AssignmentRecord {
    pub ev: String,
    pub station: String,
    pub owner: Address,
    pub accepted_at: u64,
}

canonical_struct!(AssignmentRecord {
    ev,
    station,
    owner,
    accepted_at
});

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EscrowRefs {
    pub hashlock: Digest,
    pub payment_ledger: String,
    pub price_escrow: String,
    pub reward_escrow: String,
    pub reward_tokens: u64,
}

canonical_struct!(EscrowRefs {
    hashlock,
    payment_ledger,
    price_escrow,
    reward_escrow,
    reward_tokens
});

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DeliveryRecord {
    pub delivered_wh: u64,
    pub meter_txs: Vec<Digest>,
    pub recorded_at: u64,
}

canonical_struct!(DeliveryRecord {
    delivered_wh,
    meter_txs,
    recorded_at
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SettlementOutcome {
    Paid,
    Refunded,
}

canonical_enum!(SettlementOutcome { Paid = 0, Refunded = 1 });

impl SettlementOutcome {
    pub fn as_str(&self) -> &'static str {
        match self {
            SettlementOutcome::Paid => "paid",
            SettlementOutcome::Refunded => "refunded",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SettlementRecord {
    pub outcome: SettlementOutcome,
    pub delivered_wh: u64,
    pub committed_wh: u64,
    pub floor_wh: u64,
    pub settled_at: u64,
}

canonical_struct!(SettlementRecord {
    outcome,
    delivered_wh,
    committed_wh,
    floor_wh,
    settled_at
});

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RequestRecord {
    pub id: String,
    pub scenario: RequestScenario,
    pub energy_wh: u64,
    pub start: u64,
    pub end: u64,
    pub lat: i64,
    pub lon: i64,
    pub radius_m: u64,
    pub incentive_tokens: u64,
    pub status: RequestStatus,
    pub issuer: Address,
    pub created_at: u64,
    pub offers: Vec<OfferRecord>,
    pub winner: Option<OfferRecord>,
    pub candidates: Vec<String>,
    pub assignment: Option<AssignmentRecord>,
    pub escrow: Option<EscrowRefs>,
    pub delivery: Option<DeliveryRecord>,
    pub settlement: Option<SettlementRecord>,
    pub preimage: Option<Digest>,
}

canonical_struct!(RequestRecord {
    id,
    scenario,
    energy_wh,
    start,
    end,
    lat,
    lon,
    radius_m,
    incentive_tokens,
    status,
    issuer,
    created_at,
    offers,
    winner,
    candidates,
    assignment,
    escrow,
    delivery,
    settlement,
    preimage,
});

impl RequestRecord {
    pub fn bidding_deadline(&self, params: &MarketParams) -> u64 {
        self.start.saturating_sub(params.lead_ms)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MarketParams {
    /// delivery tolerance in basis points
    pub tolerance_bps: u64,
    /// EV user reward as a percentage of the request incentive
    pub reward_pct: u64,
    /// bidding closes this long before the timeslot starts
    pub lead_ms: u64,
}

canonical_struct!(MarketParams {
    tolerance_bps,
    reward_pct,
    lead_ms
});

impl Default for MarketParams {
    fn default() -> Self {
        Self {
            tolerance_bps: 500,
            reward_pct: 10,
            lead_ms: 30 * 60 * 1000,
        }
    }
}

impl MarketParams {
    pub fn delivery_sufficient(&self, delivered_wh: u64, committed_wh: u64) -> bool {
        delivered_wh as u128 * 10_000
            >= committed_wh as u128 * (10_000 - self.tolerance_bps.min(10_000)) as u128
    }

    /// Smallest delivery that still counts as sufficient.
    pub fn delivery_floor(&self, committed_wh: u64) -> u64 {
        let num = committed_wh as u128 * (10_000 - self.tolerance_bps.min(10_000)) as u128;
        num.div_ceil(10_000) as u64
    }

    pub fn reward_for(&self, incentive_tokens: u64) -> u64 {
        incentive_tokens * self.reward_pct / 100
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EvRecord {
    pub owner: Address,
    pub fleet_manager: Address,
}

canonical_struct!(EvRecord {
    owner,
    fleet_manager
});

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MeterReading {
    pub device: String,
    /// Wh × 1000 delivered since the previous reading
    pub value: i64,
    pub ts: u64,
    pub tx_id: Digest,
}

canonical_struct!(MeterReading {
    device,
    value,
    ts,
    tx_id
});

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct MarketState {
    pub params: MarketParams,
    pub roles: BTreeMap<Address, Role>,
    pub requests: BTreeMap<String, RequestRecord>,
    pub next_request: u64,
    pub evs: BTreeMap<String, EvRecord>,
    pub meters: BTreeMap<String, Vec<MeterReading>>,
    pub meter_keys: BTreeSet<Digest>,
}

canonical_struct!(MarketState {
    params,
    roles,
    requests,
    next_request,
    evs,
    meters,
    meter_keys
});

/// Lowest price wins; ties go to the earliest submission, then the smallest
/// fleet-manager address.
pub fn select_winner(offers: &[OfferRecord]) -> Option<&OfferRecord> {
    offers.iter().min_by(|a, b| {
        (a.price_tokens, a.submitted_at, a.fleet_manager).cmp(&(
            b.price_tokens,
            b.submitted_at,
            b.fleet_manager,
        ))
    })
}

fn require_role(m: &MarketState, who: &Address, role: Role) -> Result<(), ContractError> {
    if m.roles.get(who) == Some(&role) {
        return Ok(());
    }
    match role {
        Role::Dso => fail(ErrorKind::NotDso, who.to_hex()),
        _ => fail(
            ErrorKind::Unauthorized,
            format!("{} lacks role {:?}", who.to_hex(), role),
        ),
    }
}

fn request<'a>(m: &'a MarketState, id: &str) -> Result<&'a RequestRecord, ContractError> {
    m.requests
        .get(id)
        .ok_or_else(|| ContractError::new(ErrorKind::UnknownRequest, id))
}

fn positive(args: &Args, key: &str) -> Result<u64, ContractError> {
    let v = args.int(key)?;
    if v <= 0 {
        return fail(ErrorKind::NonPositive, format!("{key}={v}"));
    }
    Ok(v as u64)
}

pub struct Market;

impl Contract for Market {
    fn name(&self) -> &'static str {
        NAME
    }

    fn call(
        &self,
        state: &mut WorldState,
        method: &str,
        args: &Args,
        ctx: &CallContext,
    ) -> Result<String, ContractError> {
        match method {
            "set_role" => {
                if state.authority != Some(ctx.submitter) {
                    return fail(ErrorKind::NotAuthority, ctx.submitter.to_hex());
                }
                let who = args.address("who")?;
                let role = args.string("role")?;
                let role =
                    Role::parse(role).ok_or_else(|| ContractError::new(ErrorKind::BadArg, role))?;
                state.market.roles.insert(who, role);
                Ok(who.to_hex())
            }
            "configure" => {
                if state.authority != Some(ctx.submitter) {
                    return fail(ErrorKind::NotAuthority, ctx.submitter.to_hex());
                }
                let tolerance_bps = args.amount("tolerance_bps")?;
                let reward_pct = args.amount("reward_pct")?;
                let lead_ms = args.amount("lead_ms")?;
                if tolerance_bps > 10_000 || reward_pct > 100 {
                    return fail(
                        ErrorKind::BadArg,
                        "tolerance_bps <= 10000 and reward_pct <= 100",
                    );
                }
                state.market.params = MarketParams {
                    tolerance_bps,
                    reward_pct,
                    lead_ms,
                };
                Ok(String::new())
            }
            "post_request" => post_request(&mut state.market, args, ctx),
            "post_offer" => post_offer(&mut state.market, args, ctx),
            "close" => close(&mut state.market, args, ctx),
            "register_ev" => {
                require_role(&state.market, &ctx.submitter, Role::FleetManager)?;
                let ev = args.string("ev")?;
                let owner = args.address("owner")?;
                if let Some(existing) = state.market.evs.get(ev) {
                    if existing.fleet_manager != ctx.submitter {
                        return fail(
                            ErrorKind::Unauthorized,
                            format!("{ev} belongs to another fleet"),
                        );
                    }
                }
                state.market.evs.insert(
                    ev.to_string(),
                    EvRecord {
                        owner,
                        fleet_manager: ctx.submitter,
                    },
                );
                Ok(ev.to_string())
            }
            "offer_candidates" => offer_candidates(&mut state.market, args, ctx),
            "accept" => accept(&mut state.market, args, ctx),
            "set_escrow" => set_escrow(&mut state.market, args, ctx),
            "meter" => {
                let metric = args.string("metric")?;
                if metric != METER_METRIC {
                    return fail(
                        ErrorKind::BadArg,
                        format!("metric {metric} is not {METER_METRIC}"),
                    );
                }
                let key = args.digest("key")?;
                if state.market.meter_keys.contains(&key) {
                    return fail(ErrorKind::DuplicateEvent, key.to_hex());
                }
                let reading = MeterReading {
                    device: args.string("device")?.to_string(),
                    value: args.int("value")?,
                    ts: args.amount("ts")?,
                    tx_id: ctx.tx_id,
                };
                if reading.value < 0 {
                    return fail(
                        ErrorKind::NegativeAmount,
                        "meter increments are non-negative",
                    );
                }
                state.market.meter_keys.insert(key);
                state
                    .market
                    .meters
                    .entry(reading.device.clone())
                    .or_default()
                    .push(reading);
                Ok(ctx.tx_id.to_hex())
            }
            "record_delivery" => record_delivery(&mut state.market, args, ctx),
            "settle" => settle(&mut state.market, args, ctx),
            "reveal" => {
                let id = args.string("request")?;
                let preimage = args.digest("preimage")?;
                let r = request(&state.market, id)?;
                if r.issuer != ctx.submitter {
                    return fail(ErrorKind::NotDso, ctx.submitter.to_hex());
                }
                if r.settlement.as_ref().map(|s| s.outcome) != Some(SettlementOutcome::Paid) {
                    return fail(ErrorKind::NotPaid, id);
                }
                let Some(escrow) = &r.escrow else {
                    return fail(ErrorKind::NotPaid, format!("{id} has no escrow"));
                };
                if sha256(&preimage.0) != escrow.hashlock {
                    return fail(ErrorKind::WrongPreimage, id);
                }
                state.market.requests.get_mut(id).unwrap().preimage = Some(preimage);
                Ok(id.to_string())
            }
            other => unknown_method(NAME, other),
        }
    }
}

fn post_request(
    m: &mut MarketState,
    args: &Args,
    ctx: &CallContext,
) -> Result<String, ContractError> {
    require_role(m, &ctx.submitter, Role::Dso)?;
    let scenario_s = args.string("scenario")?;
    let scenario = RequestScenario::parse(scenario_s)
        .ok_or_else(|| ContractError::new(ErrorKind::BadArg, scenario_s))?;
    let energy_wh = positive(args, "energy_wh")?;
    let incentive_tokens = positive(args, "incentive_tokens")?;
    let start = args.amount("start")?;
    let end = args.amount("end")?;
    let lat = args.int("lat")?;
    let lon = args.int("lon")?;
    let radius_m = args.amount("radius_m")?;
    if start >= end {
        return fail(
            ErrorKind::BadTimeslot,
            format!("start {start} >= end {end}"),
        );
    }
    let next_midnight = (ctx.now / DAY_MS + 1) * DAY_MS;
    match scenario {
        RequestScenario::DayAhead if start < next_midnight => {
            return fail(
                ErrorKind::BadTimeslot,
                format!("day-ahead slot starts before {next_midnight}"),
            );
        }
        RequestScenario::Intraday if start <= ctx.now || end > next_midnight => {
            return fail(
                ErrorKind::BadTimeslot,
                "intraday slot must lie in the rest of the current day",
            );
        }
        _ => {}
    }
    let id = format!("R{:04}", m.next_request);
    m.next_request += 1;
    m.requests.insert(
        id.clone(),
        RequestRecord {
            id: id.clone(),
            scenario,
            energy_wh,
            start,
            end,
            lat,
            lon,
            radius_m,
            incentive_tokens,
            status: RequestStatus::Open,
            issuer: ctx.submitter,
            created_at: ctx.now,
            offers: Vec::new(),
            winner: None,
            candidates: Vec::new(),
            assignment: None,
            escrow: None,
            delivery: None,
            settlement: None,
            preimage: None,
        },
    );
    Ok(id)
}

fn post_offer(
    m: &mut MarketState,
    args: &Args,
    ctx: &CallContext,
) -> Result<String, ContractError> {
    require_role(m, &ctx.submitter, Role::FleetManager)?;
    let id = args.string("request")?;
    let price_tokens = args.amount("price_tokens")?;
    let committed_wh = args.amount("committed_wh")?;
    let r = request(m, id)?;
    if r.status != RequestStatus::Open {
        return fail(ErrorKind::RequestNotOpen, format!("{id} is {:?}", r.status));
    }
    if price_tokens > r.incentive_tokens {
        return fail(
            ErrorKind::OverAsk,
            format!("price {price_tokens} > incentive {}", r.incentive_tokens),
        );
    }
    if committed_wh < r.energy_wh {
        return fail(
            ErrorKind::UnderCommit,
            format!("committed {committed_wh} < requested {}", r.energy_wh),
        );
    }
    let r = m.requests.get_mut(id).unwrap();
    r.offers.push(OfferRecord {
        fleet_manager: ctx.submitter,
        price_tokens,
        committed_wh,
        submitted_at: ctx.now,
    });
    Ok((r.offers.len() - 1).to_string())
}

fn close(m: &mut MarketState, args: &Args, ctx: &CallContext) -> Result<String, ContractError> {
    let id = args.string("request")?;
    let r = request(m, id)?;
    if r.issuer != ctx.submitter {
        return fail(ErrorKind::NotDso, ctx.submitter.to_hex());
    }
    if r.status != RequestStatus::Open {
        return fail(ErrorKind::RequestNotOpen, format!("{id} is {:?}", r.status));
    }
    let deadline = r.bidding_deadline(&m.params);
    if ctx.now < deadline {
        return fail(
            ErrorKind::BiddingOpen,
            format!("bidding open until {deadline}"),
        );
    }
    let winner = select_winner(&r.offers).cloned();
    let r = m.requests.get_mut(id).unwrap();
    match winner {
        None => {
            r.status = RequestStatus::Expired;
            Ok("no_award".to_string())
        }
        Some(w) => {
            let out = format!("{}:{}", w.fleet_manager.to_hex(), w.price_tokens);
            r.status = RequestStatus::Closed;
            r.winner = Some(w);
            Ok(out)
        }
    }
}

fn offer_candidates(
    m: &mut MarketState,
    args: &Args,
    ctx: &CallContext,
) -> Result<String, ContractError> {
    let id = args.string("request")?;
    let list = args.string("evs")?;
    let evs: Vec<String> = list
        .split(',')
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();
    let r = request(m, id)?;
    if r.status != RequestStatus::Closed {
        return fail(ErrorKind::NotClosed, format!("{id} is {:?}", r.status));
    }
    if r.winner.as_ref().map(|w| w.fleet_manager) != Some(ctx.submitter) {
        return fail(
            ErrorKind::Unauthorized,
            "only the winning fleet manager proposes candidates",
        );
    }
    for ev in &evs {
        match m.evs.get(ev) {
            Some(rec) if rec.fleet_manager == ctx.submitter => {}
            _ => return fail(ErrorKind::UnknownEv, ev.clone()),
        }
    }
    let n = evs.len();
    m.requests.get_mut(id).unwrap().candidates = evs;
    Ok(n.to_string())
}

fn accept(m: &mut MarketState, args: &Args, ctx: &CallContext) -> Result<String, ContractError> {
    let id = args.string("request")?;
    let ev = args.string("ev")?;
    let station = args.string("station")?;
    let r = request(m, id)?;
    match r.status {
        RequestStatus::Closed => {}
        RequestStatus::Assigned | RequestStatus::Settled => {
            return fail(ErrorKind::AlreadyAssigned, format!("{id} already assigned"));
        }
        s => return fail(ErrorKind::NotClosed, format!("{id} is {s:?}")),
    }
    if !r.candidates.iter().any(|c| c == ev) {
        return fail(ErrorKind::NotACandidate, ev);
    }
    if m.evs.get(ev).map(|e| e.owner) != Some(ctx.submitter) {
        return fail(
            ErrorKind::NotACandidate,
            format!("{} does not own {ev}", ctx.submitter.to_hex()),
        );
    }
    let r = m.requests.get_mut(id).unwrap();
    r.assignment = Some(AssignmentRecord {
        ev: ev.to_string(),
        station: station.to_string(),
        owner: ctx.submitter,
        accepted_at: ctx.now,
    });
    r.status = RequestStatus::Assigned;
    Ok(ev.to_string())
}

fn set_escrow(
    m: &mut MarketState,
    args: &Args,
    ctx: &CallContext,
) -> Result<String, ContractError> {
    let id = args.string("request")?;
    let r = request(m, id)?;
    if r.issuer != ctx.submitter {
        return fail(ErrorKind::NotDso, ctx.submitter.to_hex());
    }
    if r.status != RequestStatus::Assigned {
        return fail(ErrorKind::NotAssigned, format!("{id} is {:?}", r.status));
    }
    if r.escrow.is_some() {
        return fail(ErrorKind::EscrowAlreadySet, id);
    }
    let refs = EscrowRefs {
        hashlock: args.digest("hashlock")?,
        payment_ledger: args.string("payment_ledger")?.to_string(),
        price_escrow: args.string("price_escrow")?.to_string(),
        reward_escrow: args.string("reward_escrow")?.to_string(),
        reward_tokens: m.params.reward_for(r.incentive_tokens),
    };
    m.requests.get_mut(id).unwrap().escrow = Some(refs);
    Ok(id.to_string())
}

/// Sum of in-slot meter increments at the assigned station, in Wh.
pub fn in_slot_delivery(m: &MarketState, r: &RequestRecord) -> Option<(u64, Vec<Digest>)> {
    let station = &r.assignment.as_ref()?.station;
    let in_slot: Vec<&MeterReading> = m
        .meters
        .get(station)?
        .iter()
        .filter(|mr| mr.ts >= r.start && mr.ts < r.end)
        .collect();
    if in_slot.is_empty() {
        return None;
    }
    let milli: i64 = in_slot.iter().map(|mr| mr.value).sum();
    Some((
        (milli / 1000) as u64,
        in_slot.iter().map(|mr| mr.tx_id).collect(),
    ))
}

fn record_delivery(
    m: &mut MarketState,
    args: &Args,
    ctx: &CallContext,
) -> Result<String, ContractError> {
    let id = args.string("request")?;
    let r = request(m, id)?;
    if r.status != RequestStatus::Assigned {
        return fail(ErrorKind::NotAssigned, format!("{id} is {:?}", r.status));
    }
    let Some((delivered_wh, meter_txs)) = in_slot_delivery(m, r) else {
        let station = &r
            .assignment
            .as_ref()
            .expect("assigned request has an assignment")
            .station;
        return fail(
            ErrorKind::NoMeterData,
            format!("no readings for {station} in [{}, {})", r.start, r.end),
        );
    };
    m.requests.get_mut(id).unwrap().delivery = Some(DeliveryRecord {
        delivered_wh,
        meter_txs,
        recorded_at: ctx.now,
    });
    Ok(delivered_wh.to_string())
}

fn settle(m: &mut MarketState, args: &Args, ctx: &CallContext) -> Result<String, ContractError> {
    let id = args.string("request")?;
    let r = request(m, id)?;
    match r.status {
        RequestStatus::Assigned => {}
        RequestStatus::Settled => return fail(ErrorKind::AlreadySettled, id),
        s => return fail(ErrorKind::NotAssigned, format!("{id} is {s:?}")),
    }
    if ctx.now < r.end {
        return fail(ErrorKind::NotEnded, format!("slot ends at {}", r.end));
    }
    let committed_wh = r
        .winner
        .as_ref()
        .expect("assigned request has a winner")
        .committed_wh;
    // without an explicit record, the delivery is taken from the meters now
    let delivery = match &r.delivery {
        Some(d) => Some(d.clone()),
        None => in_slot_delivery(m, r).map(|(delivered_wh, meter_txs)| DeliveryRecord {
            delivered_wh,
            meter_txs,
            recorded_at: ctx.now,
        }),
    };
    let delivered_wh = delivery.as_ref().map_or(0, |d| d.delivered_wh);
    let outcome = if m.params.delivery_sufficient(delivered_wh, committed_wh) {
        SettlementOutcome::Paid
    } else {
        SettlementOutcome::Refunded
    };
    let floor_wh = m.params.delivery_floor(committed_wh);
    let r = m.requests.get_mut(id).unwrap();
    r.delivery = delivery;
    r.settlement = Some(SettlementRecord {
        outcome,
        delivered_wh,
        committed_wh,
        floor_wh,
        settled_at: ctx.now,
    });
    r.status = RequestStatus::Settled;
    Ok(outcome.as_str().to_string())
}
