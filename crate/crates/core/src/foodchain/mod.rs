//! Farm-to-fork provenance pilot.
//!
//! Segment ledgers hold full readings; the consortium ledger holds the lot
//! registry, digests of segment readings and the custody log. Custody of a lot
//! is a one-unit token on the consortium ledger. A handover swaps that token
//! against a handover receipt on the receiving segment's ledger, so both
//! records commit together or not at all.

mod trace;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use trace::{
    evaluate_conditions, generate_qr_payload, parse_qr_payload, resolve_qr, trace_lot,
    ConditionRule, CustodyHop, MetricSummary, ObservedReading, QrResolution, TipStatus, TraceError,
    TraceReport, TracedReading, Verdict, Violation, QR_PREFIX,
};

use crate::adapter::{
    map_event, Adapter, AdapterError, AdapterRule, SensorEvent, SubmissionReport,
};
use crate::contracts::provenance::{self, custody_asset};
use crate::contracts::{ContractCall, ContractError};
use crate::identity::{Address, Keyring};
use crate::interledger::{
    derive_secret, run_swap_with_faults, FaultSchedule, SwapError, SwapLeg, SwapPlan, SwapStatus,
};
use crate::ledger::{LedgerError, Network, TxStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Segment {
    SF,
    TRA,
    SDC,
    TRB,
    SM,
}

impl Segment {
    /// Canonical farm-to-fork order.
    pub const ORDER: [Segment; 5] = [
        Segment::SF,
        Segment::TRA,
        Segment::SDC,
        Segment::TRB,
        Segment::SM,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Segment::SF => "SF",
            Segment::TRA => "TRA",
            Segment::SDC => "SDC",
            Segment::TRB => "TRB",
            Segment::SM => "SM",
        }
    }

    pub fn parse(s: &str) -> Option<Segment> {
        Segment::ORDER.into_iter().find(|x| x.as_str() == s)
    }

    pub fn index(&self) -> usize {
        Segment::ORDER
            .iter()
            .position(|s| s == self)
            .expect("listed")
    }

    pub fn next(&self) -> Option<Segment> {
        Segment::ORDER.get(self.index() + 1).copied()
    }

    /// SDC and SM run permissioned platforms; the rest are open.
    pub fn permissioned(&self) -> bool {
        matches!(self, Segment::SDC | Segment::SM)
    }
}

impl std::fmt::Display for Segment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Wiring of the pilot onto concrete ledgers and actors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoodchainConfig {
    pub consortium: String,
    /// segment → ledger id
    pub ledgers: BTreeMap<Segment, String>,
    /// segment → operator actor label
    pub operators: BTreeMap<Segment, String>,
    /// consortium token authority; mints custody tokens
    pub registrar: String,
    /// posts digest events on the consortium ledger
    pub digest_signer: String,
    pub delta: u64,
}

impl FoodchainConfig {
    pub fn ledger(&self, s: Segment) -> &str {
        &self.ledgers[&s]
    }

    pub fn segment_of_ledger(&self, ledger: &str) -> Option<Segment> {
        self.ledgers
            .iter()
            .find(|(_, l)| *l == ledger)
            .map(|(s, _)| *s)
    }

    pub fn operator(&self, keys: &Keyring, s: Segment) -> Option<Address> {
        keys.address_of(self.operators.get(&s)?)
    }

    pub fn segment_of_operator(&self, keys: &Keyring, who: &Address) -> Option<Segment> {
        self.operators
            .iter()
            .find(|(_, l)| keys.address_of(l) == Some(*who))
            .map(|(s, _)| *s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FoodError {
    #[error("{from} -> {to} skips the canonical order")]
    WrongSequence { from: Segment, to: Segment },
    #[error("lot {lot} is not held by {segment}")]
    NotCurrentHolder { lot: String, segment: Segment },
    #[error("unknown lot {0}")]
    LotNotFound(String),
    #[error("lot {0} already exists")]
    LotExists(String),
    #[error("custody swap did not complete: {0:?}")]
    SwapTimeout(Box<SwapStatus>),
    #[error("unknown actor {0}")]
    UnknownActor(String),
    #[error("call failed: {0}")]
    CallFailed(ContractError),
    #[error(transparent)]
    Swap(#[from] SwapError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

impl FoodError {
    /// Stable error code: the variant name, or the inner contract/ledger code.
    pub fn code(&self) -> &'static str {
        match self {
            FoodError::WrongSequence { .. } => "WrongSequence",
            FoodError::NotCurrentHolder { .. } => "NotCurrentHolder",
            FoodError::LotNotFound(_) => "LotNotFound",
            FoodError::LotExists(_) => "LotExists",
            FoodError::SwapTimeout(_) => "SwapTimeout",
            FoodError::UnknownActor(_) => "UnknownActor",
            FoodError::CallFailed(e) => e.kind.as_str(),
            FoodError::Swap(_) => "SwapError",
            FoodError::Adapter(_) => "AdapterError",
            FoodError::Ledger(e) => e.code(),
        }
    }
}

fn transact(
    net: &mut Network,
    keys: &Keyring,
    ledger: &str,
    label: &str,
    call: ContractCall,
) -> Result<String, FoodError> {
    let key = keys
        .by_label(label)
        .ok_or_else(|| FoodError::UnknownActor(label.to_string()))?;
    net.transact(ledger, key, call)?
        .map_err(FoodError::CallFailed)
}

/// Current holder of a lot's custody token, if the lot exists.
pub fn custody_holder(
    net: &Network,
    cfg: &FoodchainConfig,
    lot: &str,
) -> Result<Option<Address>, FoodError> {
    let cons = net.ledger(&cfg.consortium)?;
    if !cons.state().provenance.lots.contains_key(lot) {
        return Err(FoodError::LotNotFound(lot.to_string()));
    }
    Ok(cons.state().tokens.sole_holder(&custody_asset(lot)))
}

/// Registers a lot on the consortium ledger and gives its custody token to
/// the farm operator.
pub fn create_lot(
    net: &mut Network,
    keys: &Keyring,
    cfg: &FoodchainConfig,
    lot: &str,
) -> Result<(), FoodError> {
    if net
        .ledger(&cfg.consortium)?
        .state()
        .provenance
        .lots
        .contains_key(lot)
    {
        return Err(FoodError::LotExists(lot.to_string()));
    }
    let farm = cfg
        .operator(keys, Segment::SF)
        .ok_or_else(|| FoodError::UnknownActor("SF operator".into()))?;
    let register = ContractCall::new(provenance::NAME, "register_lot")
        .arg("lot", lot)
        .arg("origin", "SF");
    transact(net, keys, &cfg.consortium, &cfg.registrar, register)?;
    let mint = ContractCall::new("token", "mint")
        .arg("to", farm)
        .arg("amount", 1i64)
        .arg("asset", custody_asset(lot));
    transact(net, keys, &cfg.consortium, &cfg.registrar, mint)?;
    Ok(())
}

pub fn handover_asset(lot: &str) -> String {
    format!("handover:{lot}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HandoverRecord {
    pub lot: String,
    pub from: Segment,
    pub to: Segment,
    pub swap_id: String,
    pub status: SwapStatus,
}

/// Moves custody of `lot` from `from` to its successor `to` as an atomic
/// swap: custody token on the consortium ledger against a handover receipt on
/// the receiving segment's ledger.
#[allow(clippy::too_many_arguments)]
pub fn transfer_custody(
    net: &mut Network,
    keys: &Keyring,
    cfg: &FoodchainConfig,
    lot: &str,
    from: Segment,
    to: Segment,
    seed: u64,
    schedule: FaultSchedule,
) -> Result<HandoverRecord, FoodError> {
    if from.next() != Some(to) {
        return Err(FoodError::WrongSequence { from, to });
    }
    let sender = cfg
        .operator(keys, from)
        .ok_or_else(|| FoodError::UnknownActor(from.to_string()))?;
    let receiver = cfg
        .operator(keys, to)
        .ok_or_else(|| FoodError::UnknownActor(to.to_string()))?;
    if custody_holder(net, cfg, lot)? != Some(sender) {
        return Err(FoodError::NotCurrentHolder {
            lot: lot.to_string(),
            segment: from,
        });
    }
    let to_ledger = cfg.ledger(to).to_string();
    let prefix = format!("{lot}/{from}-{to}/");
    let attempt = net
        .ledger(&cfg.consortium)?
        .state()
        .escrows
        .keys()
        .filter(|k| k.starts_with(&prefix))
        .count();
    let swap_id = format!("{prefix}{attempt}");
    let receipt = handover_asset(lot);
    if net
        .ledger(&to_ledger)?
        .state()
        .tokens
        .balance(&receipt, &receiver)
        == 0
    {
        let mint = ContractCall::new("token", "mint")
            .arg("to", receiver)
            .arg("amount", 1i64)
            .arg("asset", receipt.as_str());
        transact(net, keys, &to_ledger, &cfg.operators[&to], mint)?;
    }
    let plan = SwapPlan::new(
        &swap_id,
        SwapLeg::new(&cfg.consortium, sender, receiver, 1).with_asset(&custody_asset(lot)),
        SwapLeg::new(&to_ledger, receiver, sender, 1).with_asset(&receipt),
        derive_secret(seed, &swap_id),
        net.now(),
        cfg.delta,
    );
    let status = run_swap_with_faults(net, keys, &plan, schedule)?;
    if status.phase != crate::interledger::SwapPhase::Complete {
        return Err(FoodError::SwapTimeout(Box::new(status)));
    }
    Ok(HandoverRecord {
        lot: lot.to_string(),
        from,
        to,
        swap_id,
        status,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ObservationReport {
    pub submission: SubmissionReport,
    pub unmapped: Vec<(SensorEvent, String)>,
    /// readings that sealed but failed on-chain (e.g. duplicates)
    pub failed: Vec<(String, String)>,
    pub digests: usize,
}

/// Full readings go to segment ledgers through the adapter; each reading that
/// seals successfully gets a digest event on the consortium ledger.
pub fn record_observations(
    net: &mut Network,
    keys: &Keyring,
    cfg: &FoodchainConfig,
    adapter: &mut Adapter,
    rules: &[AdapterRule],
    events: &[SensorEvent],
) -> Result<ObservationReport, FoodError> {
    let mut report = ObservationReport::default();
    let mut batch = Vec::new();
    for ev in events {
        match map_event(ev, rules) {
            Ok(m) => batch.push(m),
            Err(e) => report.unmapped.push((ev.clone(), e.to_string())),
        }
    }
    report.submission = adapter.flush_batch(net, batch)?;
    let touched: Vec<String> = report
        .submission
        .per_ledger
        .keys()
        .filter(|l| !net.ledger(l).map_or(true, |x| x.pending().is_empty()))
        .cloned()
        .collect();
    for l in &touched {
        net.seal(l)?;
    }
    let signer = keys
        .by_label(&cfg.digest_signer)
        .ok_or_else(|| FoodError::UnknownActor(cfg.digest_signer.clone()))?;
    for s in &report.submission.submitted {
        let Some(segment) = cfg.segment_of_ledger(&s.ledger) else {
            continue;
        };
        let (_, st) = net
            .ledger(&s.ledger)?
            .find_sealed(&s.tx_id)
            .expect("sealed above");
        if let TxStatus::Failed { error } = &st.status {
            report.failed.push((s.tx_id.to_hex(), error.to_string()));
            continue;
        }
        let call = ContractCall::new(provenance::NAME, "digest")
            .arg("lot", s.event.lot.as_deref().unwrap_or(""))
            .arg("segment", segment.as_str())
            .arg("ledger", s.ledger.as_str())
            .arg("tx_id", s.tx_id)
            .arg("metric", s.event.metric.as_str())
            .arg("ts", s.event.ts);
        net.submit_call(&cfg.consortium, signer, call)?;
        report.digests += 1;
    }
    if report.digests > 0 {
        net.seal(&cfg.consortium)?;
    }
    Ok(report)
}

#[cfg(test)]
pub(crate) mod fixture {
    use super::*;
    use crate::adapter::Metric;
    use crate::ledger::LedgerConfig;

    pub fn deploy() -> (Network, Keyring, FoodchainConfig, Vec<AdapterRule>) {
        let mut keys = Keyring::new();
        let sup = keys.add_label("supervisor");
        let registrar = keys.add_label("registrar");
        let digester = keys.add_label("digester");
        let mut ledgers = BTreeMap::new();
        let mut operators = BTreeMap::new();
        let mut ops = Vec::new();
        let mut rules = Vec::new();
        for s in Segment::ORDER {
            ops.push(keys.add_label(&format!("op-{s}")));
            keys.add_label(&format!("adapter-{s}"));
            ledgers.insert(s, s.to_string());
            operators.insert(s, format!("op-{s}"));
            rules.push(AdapterRule::new(
                s.as_str(),
                &[],
                s.as_str(),
                "provenance",
                "record",
                &format!("adapter-{s}"),
            ));
        }
        let mut net = Network::new();
        for (i, s) in Segment::ORDER.into_iter().enumerate() {
            let op = ops[i];
            let cfg = if s.permissioned() {
                let mut members: Vec<Address> = ops.clone();
                members.push(keys.address_of(&format!("adapter-{s}")).unwrap());
                LedgerConfig::permissioned(s.as_str(), sup, members)
            } else {
                LedgerConfig::open(s.as_str())
            };
            net.add_ledger(cfg.with_token_authority(op)).unwrap();
        }
        let mut members = ops.clone();
        members.extend([registrar, digester]);
        net.add_ledger(
            LedgerConfig::permissioned("CONS", sup, members).with_token_authority(registrar),
        )
        .unwrap();
        let cfg = FoodchainConfig {
            consortium: "CONS".into(),
            ledgers,
            operators,
            registrar: "registrar".into(),
            digest_signer: "digester".into(),
            delta: 2000,
        };
        let _ = Metric::Temperature;
        (net, keys, cfg, rules)
    }
}

#[cfg(test)]
mod tests {
    use super::fixture::deploy;
    use super::*;
    use crate::adapter::Metric;

    #[test]
    fn order_and_successors() {
        assert_eq!(Segment::SF.next(), Some(Segment::TRA));
        assert_eq!(Segment::SM.next(), None);
        assert_eq!(Segment::parse("SDC"), Some(Segment::SDC));
    }

    #[test]
    fn custody_moves_one_hop_at_a_time() {
        let (mut net, keys, cfg, _) = deploy();
        create_lot(&mut net, &keys, &cfg, "LOT-001").unwrap();
        assert!(matches!(
            create_lot(&mut net, &keys, &cfg, "LOT-001"),
            Err(FoodError::LotExists(_))
        ));
        let skip = transfer_custody(
            &mut net,
            &keys,
            &cfg,
            "LOT-001",
            Segment::SF,
            Segment::SDC,
            1,
            FaultSchedule::NONE,
        );
        assert!(matches!(skip, Err(FoodError::WrongSequence { .. })));
        let h = transfer_custody(
            &mut net,
            &keys,
            &cfg,
            "LOT-001",
            Segment::SF,
            Segment::TRA,
            1,
            FaultSchedule::NONE,
        )
        .unwrap();
        assert_eq!(h.to, Segment::TRA);
        assert_eq!(
            custody_holder(&net, &cfg, "LOT-001").unwrap(),
            cfg.operator(&keys, Segment::TRA)
        );
        let again = transfer_custody(
            &mut net,
            &keys,
            &cfg,
            "LOT-001",
            Segment::SF,
            Segment::TRA,
            1,
            FaultSchedule::NONE,
        );
        assert!(matches!(again, Err(FoodError::NotCurrentHolder { .. })));
        let receipt = net.ledger("TRA").unwrap().state().tokens.balance(
            &handover_asset("LOT-001"),
            &cfg.operator(&keys, Segment::SF).unwrap(),
        );
        assert_eq!(receipt, 1);
    }

    #[test]
    fn crashed_handover_leaves_no_records_and_can_retry() {
        let (mut net, keys, cfg, _) = deploy();
        create_lot(&mut net, &keys, &cfg, "L").unwrap();
        let mut from = Segment::SF;
        while from != Segment::SDC {
            transfer_custody(
                &mut net,
                &keys,
                &cfg,
                "L",
                from,
                from.next().unwrap(),
                1,
                FaultSchedule::NONE,
            )
            .unwrap();
            from = from.next().unwrap();
        }
        let custody_before = net.ledger("CONS").unwrap().state().provenance.custody["L"].len();
        let err = transfer_custody(
            &mut net,
            &keys,
            &cfg,
            "L",
            Segment::SDC,
            Segment::TRB,
            1,
            FaultSchedule::crash_at(2),
        );
        assert!(matches!(err, Err(FoodError::SwapTimeout(_))));
        assert_eq!(
            custody_holder(&net, &cfg, "L").unwrap(),
            cfg.operator(&keys, Segment::SDC)
        );
        assert_eq!(
            net.ledger("CONS").unwrap().state().provenance.custody["L"].len(),
            custody_before
        );
        let trb = net.ledger("TRB").unwrap().state();
        assert!(trb
            .escrows
            .values()
            .all(|e| e.status != crate::contracts::EscrowStatus::Claimed));
        let ok = transfer_custody(
            &mut net,
            &keys,
            &cfg,
            "L",
            Segment::SDC,
            Segment::TRB,
            1,
            FaultSchedule::NONE,
        )
        .unwrap();
        assert!(ok.swap_id.ends_with("/1"));
    }

    #[test]
    fn observations_land_on_segment_and_consortium() {
        let (mut net, keys, cfg, rules) = deploy();
        create_lot(&mut net, &keys, &cfg, "LOT-001").unwrap();
        let mut adapter = Adapter::new(keys.clone());
        let evs = vec![
            SensorEvent::scalar("SF", "sf-01", Metric::SoilMoisture, 312, 1000).with_lot("LOT-001"),
            SensorEvent::position("TRA", "truck", 42_560_000, 12_646_000, 1100).with_lot("LOT-001"),
            SensorEvent::scalar("XX", "x", Metric::Rainfall, 1, 1200),
        ];
        let r = record_observations(&mut net, &keys, &cfg, &mut adapter, &rules, &evs).unwrap();
        assert_eq!(r.digests, 2);
        assert_eq!(r.unmapped.len(), 1);
        let cons = net.ledger("CONS").unwrap().state();
        let segs: Vec<&str> = cons.provenance.digests["LOT-001"]
            .iter()
            .map(|d| d.segment.as_str())
            .collect();
        assert_eq!(segs, vec!["SF", "TRA"]);
        assert_eq!(
            net.ledger("SF").unwrap().state().provenance.readings.len(),
            1
        );
    }
}
