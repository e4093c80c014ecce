//! Sensor readings, lot registry, consortium digest events and the custody log.
//!
//! Segment ledgers hold full readings (`record`). The consortium ledger holds
//! the lot registry, compact digests pointing at segment transactions, and the
//! custody log. Custody entries are appended by the HTLC contract when a
//! `custody:<lot>` escrow is claimed, so a handover and its log entry commit in
//! the same transaction.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::{
    fail, unknown_method, Args, ArgsExt, CallContext, Contract, ContractError, ErrorKind, Value,
    WorldState,
};
use crate::canonical_struct;
use crate::hash::Digest;
use crate::identity::Address;

pub const NAME: &str = "provenance";
pub const CUSTODY_PREFIX: &str = "custody:";

pub fn custody_asset(lot: &str) -> String {
    format!("{CUSTODY_PREFIX}{lot}")
}

pub fn custody_lot(asset: &str) -> Option<&str> {
    asset.strip_prefix(CUSTODY_PREFIX)
}

/// A full sensor reading as stored on a segment (or market) ledger.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Reading {
    pub platform: String,
    pub device: String,
    pub metric: String,
    pub unit: String,
    pub value: Option<i64>,
    pub lat: Option<i64>,
    pub lon: Option<i64>,
    pub ts: u64,
    pub lot: Option<String>,
    pub key: Digest,
    pub submitter: Address,
}

canonical_struct!(Reading {
    platform,
    device,
    metric,
    unit,
    value,
    lat,
    lon,
    ts,
    lot,
    key,
    submitter
});

impl Reading {
    pub(crate) fn from_args(args: &Args, ctx: &CallContext) -> Result<Self, ContractError> {
        let opt_int = |k: &str| -> Result<Option<i64>, ContractError> {
            match args.get(k) {
                None => Ok(None),
                Some(Value::Int(v)) => Ok(Some(*v)),
                Some(Value::Str(_)) => fail(ErrorKind::BadArg, format!("{k} must be an integer")),
            }
        };
        let value = opt_int("value")?;
        let lat = opt_int("lat")?;
        let lon = opt_int("lon")?;
        if value.is_none() && (lat.is_none() || lon.is_none()) {
            return fail(ErrorKind::MissingArg, "value or lat/lon");
        }
        Ok(Reading {
            platform: args.string("platform")?.to_string(),
            device: args.string("device")?.to_string(),
            metric: args.string("metric")?.to_string(),
            unit: args.string("unit")?.to_string(),
            value,
            lat,
            lon,
            ts: args.amount("ts")?,
            lot: args.opt_string("lot")?.map(str::to_string),
            key: args.digest("key")?,
            submitter: ctx.submitter,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LotInfo {
    pub origin: String,
    pub registered_at: u64,
}

canonical_struct!(LotInfo {
    origin,
    registered_at
});

/// Consortium-side pointer to a reading sealed on a segment ledger.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DigestEvent {
    pub segment: String,
    pub ledger: String,
    pub tx_id: Digest,
    pub metric: String,
    pub ts: u64,
}

canonical_struct!(DigestEvent {
    segment,
    ledger,
    tx_id,
    metric,
    ts
});

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CustodyEvent {
    pub from: Address,
    pub to: Address,
    pub escrow_id: String,
    pub ts: u64,
}

canonical_struct!(CustodyEvent {
    from,
    to,
    escrow_id,
    ts
});

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct ProvenanceState {
    /// tx id of the `record` call → reading
    pub readings: BTreeMap<Digest, Reading>,
    pub seen_keys: BTreeSet<Digest>,
    pub lots: BTreeMap<String, LotInfo>,
    /// lot id (empty string for farm-wide readings) → digest events
    pub digests: BTreeMap<String, Vec<DigestEvent>>,
    pub custody: BTreeMap<String, Vec<CustodyEvent>>,
}

canonical_struct!(ProvenanceState {
    readings,
    seen_keys,
    lots,
    digests,
    custody
});

pub struct Provenance;

impl Contract for Provenance {
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
        let p = &mut state.provenance;
        match method {
            "record" => {
                let reading = Reading::from_args(args, ctx)?;
                if p.seen_keys.contains(&reading.key) {
                    return fail(ErrorKind::DuplicateEvent, reading.key.to_hex());
                }
                p.seen_keys.insert(reading.key);
                p.readings.insert(ctx.tx_id, reading);
                Ok(ctx.tx_id.to_hex())
            }
            "register_lot" => {
                let lot = args.string("lot")?;
                let origin = args.string("origin")?;
                if p.lots.contains_key(lot) {
                    return fail(ErrorKind::LotExists, lot);
                }
                p.lots.insert(
                    lot.to_string(),
                    LotInfo {
                        origin: origin.to_string(),
                        registered_at: ctx.now,
                    },
                );
                Ok(lot.to_string())
            }
            "digest" => {
                let lot = args.opt_string("lot")?.unwrap_or("");
                if !lot.is_empty() && !p.lots.contains_key(lot) {
                    return fail(ErrorKind::UnknownLot, lot);
                }
                let ev = DigestEvent {
                    segment: args.string("segment")?.to_string(),
                    ledger: args.string("ledger")?.to_string(),
                    tx_id: args.digest("tx_id")?,
                    metric: args.string("metric")?.to_string(),
                    ts: args.amount("ts")?,
                };
                p.digests.entry(lot.to_string()).or_default().push(ev);
                Ok(lot.to_string())
            }
            other => unknown_method(NAME, other),
        }
    }
}
