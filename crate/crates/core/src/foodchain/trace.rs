//! Lot traces, cold-chain conditions and QR resolution.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{FoodchainConfig, Segment};
use crate::adapter::Metric;
use crate::hash::Digest;
use crate::identity::{Address, Keyring};
use crate::ledger::{verify_inclusion, LedgerError, Network};

pub const QR_PREFIX: &str = "sofie://trace/";
const TIP_PIN_HEX: usize = 16;

/// Acceptable closed range `[min, max]` for a metric, optionally limited to
/// some segments (empty = all).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionRule {
    pub name: String,
    pub metric: Metric,
    pub min: i64,
    pub max: i64,
    #[serde(default)]
    pub segments: Vec<Segment>,
}

impl ConditionRule {
    pub fn applies(&self, segment: Segment, metric: Metric) -> bool {
        self.metric == metric && (self.segments.is_empty() || self.segments.contains(&segment))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ObservedReading {
    pub segment: Segment,
    pub metric: Metric,
    pub value: i64,
    pub ts: u64,
    pub tx_id: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub rule: String,
    pub segment: Segment,
    pub metric: Metric,
    pub value: i64,
    pub min: i64,
    pub max: i64,
    pub ts: u64,
    pub tx_id: Digest,
}

/// Every (reading, rule) pair where the reading falls outside the rule's
/// closed range. Bounds themselves are acceptable.
pub fn evaluate_conditions(
    readings: &[ObservedReading],
    rules: &[ConditionRule],
) -> Vec<Violation> {
    let mut out = Vec::new();
    for r in readings {
        for rule in rules.iter().filter(|x| x.applies(r.segment, r.metric)) {
            if r.value < rule.min || r.value > rule.max {
                out.push(Violation {
                    rule: rule.name.clone(),
                    segment: r.segment,
                    metric: r.metric,
                    value: r.value,
                    min: rule.min,
                    max: rule.max,
                    ts: r.ts,
                    tx_id: r.tx_id,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TracedReading {
    pub segment: String,
    pub ledger: String,
    pub tx_id: Digest,
    pub metric: String,
    pub ts: u64,
    pub value: Option<i64>,
    pub lat: Option<i64>,
    pub lon: Option<i64>,
    pub height: Option<u64>,
    pub proof_ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unverifiable: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CustodyHop {
    pub from: Option<Segment>,
    pub to: Option<Segment>,
    pub from_address: Address,
    pub to_address: Address,
    pub escrow_id: String,
    pub ts: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MetricSummary {
    pub count: usize,
    /// None for position readings
    pub min: Option<i64>,
    pub max: Option<i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Clean,
    Violations,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceReport {
    pub lot: String,
    pub origin: String,
    pub registered_at: u64,
    pub custody_chain: Vec<Segment>,
    pub custody: Vec<CustodyHop>,
    /// custody follows the canonical order with strictly increasing times
    pub custody_order_ok: bool,
    pub readings: Vec<TracedReading>,
    pub unverifiable: Vec<TracedReading>,
    /// segment → metric → summary, over verified readings only
    pub summary: BTreeMap<String, BTreeMap<String, MetricSummary>>,
    pub violations: Vec<Violation>,
    pub verdict: Verdict,
    pub consortium_ledger: String,
    pub consortium_height: u64,
    pub consortium_tip: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceError {
    #[error("unknown lot {0}")]
    LotNotFound(String),
    #[error("malformed QR payload: {0}")]
    BadPayload(String),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

fn check_reading(
    net: &Network,
    cfg: &FoodchainConfig,
    lot: &str,
    d: &crate::contracts::provenance::DigestEvent,
) -> TracedReading {
    let mut out = TracedReading {
        segment: d.segment.clone(),
        ledger: d.ledger.clone(),
        tx_id: d.tx_id,
        metric: d.metric.clone(),
        ts: d.ts,
        value: None,
        lat: None,
        lon: None,
        height: None,
        proof_ok: false,
        unverifiable: None,
    };
    let fail = |mut o: TracedReading, why: &str| {
        o.unverifiable = Some(why.to_string());
        o
    };
    if Segment::parse(&d.segment).is_none()
        || cfg.segment_of_ledger(&d.ledger) != Segment::parse(&d.segment)
    {
        return fail(out, "segment does not own ledger");
    }
    let Ok(ledger) = net.ledger(&d.ledger) else {
        return fail(out, "unknown ledger");
    };
    let proof = match ledger.inclusion_proof(&d.tx_id) {
        Ok(p) => p,
        Err(e) => return fail(out, e.code()),
    };
    out.height = Some(proof.height);
    let block = ledger.block(proof.height).expect("proof height exists");
    if !verify_inclusion(&proof, block) {
        return fail(out, "inclusion proof does not verify");
    }
    out.proof_ok = true;
    let Some(r) = ledger.state().provenance.readings.get(&d.tx_id) else {
        return fail(out, "transaction is not a reading");
    };
    (out.value, out.lat, out.lon) = (r.value, r.lat, r.lon);
    if r.lot.as_deref() != Some(lot) || r.metric != d.metric || r.ts != d.ts {
        return fail(out, "reading does not match digest");
    }
    out
}

/// Assembles a lot's history from consortium events, checking every
/// referenced segment reading with an inclusion proof.
pub fn trace_lot(
    net: &Network,
    keys: &Keyring,
    cfg: &FoodchainConfig,
    lot: &str,
    rules: &[ConditionRule],
) -> Result<TraceReport, TraceError> {
    let cons = net.ledger(&cfg.consortium)?;
    let prov = &cons.state().provenance;
    let info = prov
        .lots
        .get(lot)
        .ok_or_else(|| TraceError::LotNotFound(lot.to_string()))?;

    let custody: Vec<CustodyHop> = prov
        .custody
        .get(lot)
        .into_iter()
        .flatten()
        .map(|c| CustodyHop {
            from: cfg.segment_of_operator(keys, &c.from),
            to: cfg.segment_of_operator(keys, &c.to),
            from_address: c.from,
            to_address: c.to,
            escrow_id: c.escrow_id.clone(),
            ts: c.ts,
        })
        .collect();
    let origin = Segment::parse(&info.origin);
    let mut chain: Vec<Segment> = origin.into_iter().collect();
    let mut order_ok = origin.is_some();
    let mut last_ts = None;
    for hop in &custody {
        let follows = hop.from.is_some()
            && hop.from == chain.last().copied()
            && hop.to == hop.from.and_then(|s| s.next());
        let later = last_ts.is_none_or(|t| hop.ts > t);
        order_ok &= follows && later;
        last_ts = Some(hop.ts);
        if let Some(to) = hop.to {
            chain.push(to);
        }
    }

    let mut readings = Vec::new();
    let mut unverifiable = Vec::new();
    for d in prov.digests.get(lot).into_iter().flatten() {
        let r = check_reading(net, cfg, lot, d);
        if r.unverifiable.is_some() {
            unverifiable.push(r);
        } else {
            readings.push(r);
        }
    }

    let mut summary: BTreeMap<String, BTreeMap<String, MetricSummary>> = BTreeMap::new();
    let mut observed = Vec::new();
    for r in &readings {
        let s = summary
            .entry(r.segment.clone())
            .or_default()
            .entry(r.metric.clone())
            .or_insert(MetricSummary {
                count: 0,
                min: None,
                max: None,
            });
        s.count += 1;
        if let Some(v) = r.value {
            s.min = Some(s.min.map_or(v, |m| m.min(v)));
            s.max = Some(s.max.map_or(v, |m| m.max(v)));
            if let (Some(segment), Some(metric)) =
                (Segment::parse(&r.segment), Metric::parse(&r.metric))
            {
                observed.push(ObservedReading {
                    segment,
                    metric,
                    value: v,
                    ts: r.ts,
                    tx_id: r.tx_id,
                });
            }
        }
    }
    let violations = evaluate_conditions(&observed, rules);
    Ok(TraceReport {
        lot: lot.to_string(),
        origin: info.origin.clone(),
        registered_at: info.registered_at,
        custody_chain: chain,
        custody,
        custody_order_ok: order_ok,
        readings,
        unverifiable,
        summary,
        verdict: if violations.is_empty() {
            Verdict::Clean
        } else {
            Verdict::Violations
        },
        violations,
        consortium_ledger: cfg.consortium.clone(),
        consortium_height: cons.height(),
        consortium_tip: cons.tip_hash(),
    })
}

impl TraceReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let chain: Vec<&str> = self.custody_chain.iter().map(|x| x.as_str()).collect();
        let _ = writeln!(
            s,
            "lot {} (origin {}, registered at {})",
            self.lot, self.origin, self.registered_at
        );
        let _ = writeln!(
            s,
            "custody: {}{}",
            chain.join(" -> "),
            if self.custody_order_ok {
                ""
            } else {
                "  [order gap]"
            }
        );
        for h in &self.custody {
            let seg = |x: Option<Segment>| x.map_or("?".to_string(), |s| s.to_string());
            let _ = writeln!(
                s,
                "  {} -> {} at {} ({})",
                seg(h.from),
                seg(h.to),
                h.ts,
                h.escrow_id
            );
        }
        let _ = writeln!(
            s,
            "readings: {} verified, {} unverifiable",
            self.readings.len(),
            self.unverifiable.len()
        );
        for (seg, metrics) in &self.summary {
            for (m, x) in metrics {
                match (x.min, x.max) {
                    (Some(lo), Some(hi)) => {
                        let _ =
                            writeln!(s, "  {seg:<4} {m:<14} n={:<3} min={lo} max={hi}", x.count);
                    }
                    _ => {
                        let _ = writeln!(s, "  {seg:<4} {m:<14} n={}", x.count);
                    }
                }
            }
        }
        for u in &self.unverifiable {
            let _ = writeln!(
                s,
                "  unverifiable {} {} {}: {}",
                u.segment,
                u.metric,
                u.tx_id.short_hex(16),
                u.unverifiable.as_deref().unwrap_or("")
            );
        }
        for v in &self.violations {
            let _ = writeln!(
                s,
                "  violation {} at {} {}: {} outside [{}, {}] at {}",
                v.rule, v.segment, v.metric, v.value, v.min, v.max, v.ts
            );
        }
        let verdict = match self.verdict {
            Verdict::Clean => "clean",
            Verdict::Violations => "violations",
        };
        let _ = writeln!(s, "verdict: {verdict}");
        let _ = writeln!(
            s,
            "consortium {} height {} tip {}",
            self.consortium_ledger, self.consortium_height, self.consortium_tip
        );
        s
    }
}

/// `sofie://trace/<lot>?tip=<first 16 hex of the consortium tip hash>`
pub fn generate_qr_payload(
    net: &Network,
    cfg: &FoodchainConfig,
    lot: &str,
) -> Result<String, TraceError> {
    let cons = net.ledger(&cfg.consortium)?;
    if !cons.state().provenance.lots.contains_key(lot) {
        return Err(TraceError::LotNotFound(lot.to_string()));
    }
    Ok(format!(
        "{QR_PREFIX}{lot}?tip={}",
        cons.tip_hash().short_hex(TIP_PIN_HEX)
    ))
}

pub fn parse_qr_payload(payload: &str) -> Result<(String, String), TraceError> {
    let bad = || TraceError::BadPayload(payload.to_string());
    let rest = payload.strip_prefix(QR_PREFIX).ok_or_else(bad)?;
    let (lot, tip) = rest.split_once("?tip=").ok_or_else(bad)?;
    if lot.is_empty() || tip.len() != TIP_PIN_HEX || !tip.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(bad());
    }
    Ok((lot.to_string(), tip.to_ascii_lowercase()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TipStatus {
    Current,
    /// Pinned tip is an earlier block of the current chain.
    Ancestor {
        height: u64,
    },
    /// Pinned tip is not on the current chain.
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct QrResolution {
    pub lot: String,
    pub pinned_tip: String,
    pub tip: TipStatus,
    pub history_diverged: bool,
    pub report: TraceReport,
}

/// Resolves a QR payload to the current trace. A pinned tip that is an
/// ancestor of the current tip is informational; one that is not on the chain
/// at all flags diverged history.
pub fn resolve_qr(
    net: &Network,
    keys: &Keyring,
    cfg: &FoodchainConfig,
    payload: &str,
    rules: &[ConditionRule],
) -> Result<QrResolution, TraceError> {
    let (lot, pin) = parse_qr_payload(payload)?;
    let report = trace_lot(net, keys, cfg, &lot, rules)?;
    let cons = net.ledger(&cfg.consortium)?;
    let tip = if cons.tip_hash().short_hex(TIP_PIN_HEX) == pin {
        TipStatus::Current
    } else {
        cons.blocks()
            .iter()
            .rev()
            .find(|b| b.hash().short_hex(TIP_PIN_HEX) == pin)
            .map_or(TipStatus::Diverged, |b| TipStatus::Ancestor {
                height: b.height,
            })
    };
    Ok(QrResolution {
        lot,
        pinned_tip: pin,
        history_diverged: tip == TipStatus::Diverged,
        tip,
        report,
    })
}
