//! Scenario files: deployment, actors and a time-ordered action script.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{AdapterRule, SensorEvent};
use crate::energy::{BudgetRate, EvStatus, PowerForecast, RequestSpec, UserType, Zone};
use crate::foodchain::{ConditionRule, Segment};
use crate::interledger::DEFAULT_DELTA_MS;
use crate::ledger::LedgerKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApiRole {
    Dso,
    FleetManager,
    EvUser,
    Auditor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApiToken {
    pub actor: String,
    pub role: ApiRole,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerSpec {
    pub id: String,
    pub kind: LedgerKind,
    #[serde(default)]
    pub members: Vec<String>,
    #[serde(default)]
    pub authority: Option<String>,
    #[serde(default)]
    pub token_authority: Option<String>,
    #[serde(default)]
    pub restricted_read: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mint {
    pub ledger: String,
    pub to: String,
    pub amount: u64,
    #[serde(default)]
    pub asset: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoodchainSpec {
    pub consortium: String,
    pub ledgers: BTreeMap<Segment, String>,
    pub operators: BTreeMap<Segment, String>,
    pub registrar: String,
    pub digest_signer: String,
    pub lots: Vec<String>,
    #[serde(default)]
    pub conditions: Vec<ConditionRule>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsSpec {
    pub tolerance_bps: u64,
    pub reward_pct: u64,
    pub lead_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetEv {
    pub ev: String,
    pub fleet_manager: String,
    pub owner: String,
    pub user_type: UserType,
    pub lat: i64,
    pub lon: i64,
    pub residual_autonomy_m: u64,
    pub status: EvStatus,
    pub battery_capacity_wh: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSpec {
    pub market: String,
    pub payment_ledger: String,
    pub reward_ledger: String,
    pub dso: String,
    pub settle_grace_ms: u64,
    /// actor → role on the market contract
    #[serde(default)]
    pub roles: BTreeMap<String, String>,
    #[serde(default)]
    pub params: Option<ParamsSpec>,
    #[serde(default)]
    pub fleet: Vec<FleetEv>,
}

/// Periodic anchoring of `source` onto `public` every `every_k` source blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorSpec {
    pub source: String,
    pub public: String,
    pub signer: String,
    pub every_k: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Fault {
    /// Crash the swap coordinator before step `step` (0..4) of the next custody handover.
    CrashCoordinatorAtStep { step: usize },
    /// Delay step `step` of the next custody handover by `ms`.
    DelayMessage { step: usize, ms: u64 },
    /// Drop `percent` of later events from `platform`, chosen by the seeded RNG.
    DropEvents { platform: String, percent: u8 },
    /// Flip one byte of block `height` in the persisted copy of `ledger`.
    TamperBlock {
        ledger: String,
        height: u64,
        #[serde(default)]
        offset: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case", deny_unknown_fields)]
pub enum Check {
    TraceVerdict {
        lot: String,
        verdict: String,
        #[serde(default)]
        violations: Option<usize>,
        #[serde(default)]
        chain: Option<Vec<Segment>>,
        #[serde(default)]
        min_readings: Option<usize>,
    },
    CustodyHolder {
        lot: String,
        segment: Segment,
    },
    SettlementOutcome {
        request: String,
        outcome: String,
    },
    Balance {
        ledger: String,
        who: String,
        amount: u64,
        #[serde(default)]
        asset: Option<String>,
    },
    ChainValid {
        ledger: String,
    },
    AnchorsValid {
        source: String,
        ok: bool,
    },
    TamperDetected {
        ledger: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    Ingest {
        #[serde(default)]
        events: Vec<SensorEvent>,
        /// raw NDJSON, parsed with the same rules as `events`
        #[serde(default)]
        ndjson: Option<String>,
    },
    CreateLot {
        lot: String,
    },
    TransferCustody {
        lot: String,
        from: Segment,
        to: Segment,
    },
    Seal {
        #[serde(default)]
        ledger: Option<String>,
    },
    Anchor {
        source: String,
    },
    PostRequest {
        actor: String,
        request: RequestSpec,
    },
    PlanDayAhead {
        actor: String,
        forecast: PowerForecast,
        zone: Zone,
        rate: BudgetRate,
    },
    PostOffer {
        actor: String,
        request: String,
        price_tokens: u64,
        committed_wh: u64,
    },
    Close {
        actor: String,
        request: String,
    },
    RegisterFleet {
        actor: String,
    },
    ProposeCandidates {
        actor: String,
        request: String,
    },
    Accept {
        actor: String,
        request: String,
        ev: String,
        station: String,
    },
    RecordDelivery {
        actor: String,
        request: String,
    },
    Settle {
        actor: String,
        request: String,
    },
    InjectFault {
        fault: Fault,
    },
    Assert {
        check: Check,
    },
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::Ingest { .. } => "ingest",
            Action::CreateLot { .. } => "create_lot",
            Action::TransferCustody { .. } => "transfer_custody",
            Action::Seal { .. } => "seal",
            Action::Anchor { .. } => "anchor",
            Action::PostRequest { .. } => "post_request",
            Action::PlanDayAhead { .. } => "plan_day_ahead",
            Action::PostOffer { .. } => "post_offer",
            Action::Close { .. } => "close",
            Action::RegisterFleet { .. } => "register_fleet",
            Action::ProposeCandidates { .. } => "propose_candidates",
            Action::Accept { .. } => "accept",
            Action::RecordDelivery { .. } => "record_delivery",
            Action::Settle { .. } => "settle",
            Action::InjectFault { .. } => "inject_fault",
            Action::Assert { .. } => "assert",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub at: u64,
    #[serde(flatten)]
    pub action: Action,
    /// Error code the action is expected to fail with.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect_error: Option<String>,
}

fn default_delta() -> u64 {
    DEFAULT_DELTA_MS
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    #[serde(default = "default_delta")]
    pub delta_ms: u64,
    pub actors: Vec<String>,
    /// bearer token → actor and API role
    #[serde(default)]
    pub tokens: BTreeMap<String, ApiToken>,
    pub ledgers: Vec<LedgerSpec>,
    #[serde(default)]
    pub adapter_rules: Vec<AdapterRule>,
    #[serde(default)]
    pub genesis: Vec<Mint>,
    #[serde(default)]
    pub foodchain: Option<FoodchainSpec>,
    #[serde(default)]
    pub market: Option<MarketSpec>,
    #[serde(default)]
    pub anchoring: Vec<AnchorSpec>,
    pub script: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{}{path}: {message}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
pub struct SchemaError {
    pub line: Option<usize>,
    pub path: String,
    pub message: String,
}

impl SchemaError {
    fn at(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            line: None,
            path: path.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Schema(#[from] SchemaError),
}

pub fn load_scenario(path: &Path) -> Result<Scenario, LoadError> {
    let text = std::fs::read_to_string(path).map_err(|source| LoadError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(parse_scenario(&text)?)
}

/// 1-based line of the `index`-th script entry, found by its `"action"` key.
fn script_line(text: &str, index: usize) -> Option<usize> {
    let start = text.find("\"script\"")?;
    let first = text[..start].matches('\n').count() + 1;
    text[start..]
        .lines()
        .enumerate()
        .flat_map(|(i, line)| std::iter::repeat_n(first + i, line.matches("\"action\"").count()))
        .nth(index)
}

pub fn parse_scenario(text: &str) -> Result<Scenario, SchemaError> {
    let s: Scenario = serde_json::from_str(text).map_err(|e| SchemaError {
        line: Some(e.line()),
        path: format!("column {}", e.column()),
        message: e.to_string(),
    })?;
    s.validate().map_err(|mut e| {
        if let Some(i) = e
            .path
            .strip_prefix("script[")
            .and_then(|r| r.split(']').next())
            .and_then(|n| n.parse().ok())
        {
            e.line = script_line(text, i);
        }
        e
    })?;
    Ok(s)
}

impl Scenario {
    pub fn validate(&self) -> Result<(), SchemaError> {
        let actors: BTreeSet<&str> = self.actors.iter().map(String::as_str).collect();
        if actors.len() != self.actors.len() {
            return Err(SchemaError::at("actors", "duplicate actor"));
        }
        let actor = |path: &str, a: &str| -> Result<(), SchemaError> {
            if actors.contains(a) {
                Ok(())
            } else {
                Err(SchemaError::at(path, format!("undeclared actor {a}")))
            }
        };
        let mut ledgers = BTreeSet::new();
        for (i, l) in self.ledgers.iter().enumerate() {
            let p = format!("ledgers[{i}]");
            if !ledgers.insert(l.id.as_str()) {
                return Err(SchemaError::at(p, format!("duplicate ledger {}", l.id)));
            }
            for m in &l.members {
                actor(&p, m)?;
            }
            for a in l.authority.iter().chain(&l.token_authority) {
                actor(&p, a)?;
            }
            if l.kind == LedgerKind::Permissioned && (l.members.is_empty() || l.authority.is_none())
            {
                return Err(SchemaError::at(
                    p,
                    "permissioned ledger needs members and an authority",
                ));
            }
        }
        let ledger = |path: &str, id: &str| -> Result<(), SchemaError> {
            if ledgers.contains(id) {
                Ok(())
            } else {
                Err(SchemaError::at(path, format!("undeclared ledger {id}")))
            }
        };
        for (t, tok) in &self.tokens {
            actor(&format!("tokens.{t}"), &tok.actor)?;
        }
        for (i, r) in self.adapter_rules.iter().enumerate() {
            let p = format!("adapter_rules[{i}]");
            ledger(&p, &r.ledger)?;
            actor(&p, &r.signer)?;
        }
        for (i, m) in self.genesis.iter().enumerate() {
            let p = format!("genesis[{i}]");
            ledger(&p, &m.ledger)?;
            actor(&p, &m.to)?;
            let spec = self
                .ledgers
                .iter()
                .find(|l| l.id == m.ledger)
                .expect("checked");
            if spec.token_authority.is_none() {
                return Err(SchemaError::at(
                    p,
                    format!("{} has no token authority", m.ledger),
                ));
            }
        }
        let mut lots = BTreeSet::new();
        if let Some(f) = &self.foodchain {
            ledger("foodchain", &f.consortium)?;
            for s in Segment::ORDER {
                let l = f
                    .ledgers
                    .get(&s)
                    .ok_or_else(|| SchemaError::at("foodchain.ledgers", format!("missing {s}")))?;
                ledger("foodchain.ledgers", l)?;
                let o = f.operators.get(&s).ok_or_else(|| {
                    SchemaError::at("foodchain.operators", format!("missing {s}"))
                })?;
                actor("foodchain.operators", o)?;
            }
            actor("foodchain", &f.registrar)?;
            actor("foodchain", &f.digest_signer)?;
            lots.extend(f.lots.iter().map(String::as_str));
        }
        let mut evs = BTreeSet::new();
        if let Some(m) = &self.market {
            for l in [&m.market, &m.payment_ledger, &m.reward_ledger] {
                ledger("market", l)?;
            }
            actor("market", &m.dso)?;
            for (a, role) in &m.roles {
                actor("market.roles", a)?;
                if crate::contracts::market::Role::parse(role).is_none() {
                    return Err(SchemaError::at(
                        "market.roles",
                        format!("unknown role {role}"),
                    ));
                }
            }
            for (i, e) in m.fleet.iter().enumerate() {
                let p = format!("market.fleet[{i}]");
                actor(&p, &e.fleet_manager)?;
                actor(&p, &e.owner)?;
                evs.insert(e.ev.as_str());
            }
        }
        for (i, a) in self.anchoring.iter().enumerate() {
            let p = format!("anchoring[{i}]");
            ledger(&p, &a.source)?;
            ledger(&p, &a.public)?;
            actor(&p, &a.signer)?;
            if a.every_k == 0 {
                return Err(SchemaError::at(p, "every_k must be positive"));
            }
        }
        let mut last = 0;
        for (i, step) in self.script.iter().enumerate() {
            let p = format!("script[{i}]");
            if step.at < last {
                return Err(SchemaError::at(
                    p,
                    format!("time {} before previous {last}", step.at),
                ));
            }
            last = step.at;
            let lot = |l: &str| -> Result<(), SchemaError> {
                if lots.contains(l) {
                    Ok(())
                } else {
                    Err(SchemaError::at(&p, format!("undeclared lot {l}")))
                }
            };
            let need_food = || {
                self.foodchain
                    .as_ref()
                    .map(|_| ())
                    .ok_or_else(|| SchemaError::at(&p, "no foodchain deployment"))
            };
            let need_market = || {
                self.market
                    .as_ref()
                    .map(|_| ())
                    .ok_or_else(|| SchemaError::at(&p, "no market deployment"))
            };
            match &step.action {
                Action::Ingest { events, ndjson } => {
                    if events.is_empty() && ndjson.is_none() {
                        return Err(SchemaError::at(&p, "ingest needs events or ndjson"));
                    }
                    for ev in events {
                        if let Some(l) = &ev.lot {
                            lot(l)?;
                        }
                    }
                }
                Action::CreateLot { lot: l } | Action::TransferCustody { lot: l, .. } => {
                    need_food()?;
                    lot(l)?;
                }
                Action::Seal { ledger: Some(l) } => ledger(&p, l)?,
                Action::Seal { ledger: None } => {}
                Action::Anchor { source } => {
                    if !self.anchoring.iter().any(|a| &a.source == source) {
                        return Err(SchemaError::at(
                            &p,
                            format!("no anchoring configured for {source}"),
                        ));
                    }
                }
                Action::PostRequest { actor: a, .. }
                | Action::PlanDayAhead { actor: a, .. }
                | Action::PostOffer { actor: a, .. }
                | Action::Close { actor: a, .. }
                | Action::RegisterFleet { actor: a }
                | Action::ProposeCandidates { actor: a, .. }
                | Action::RecordDelivery { actor: a, .. }
                | Action::Settle { actor: a, .. } => {
                    need_market()?;
                    actor(&p, a)?;
                }
                Action::Accept { actor: a, ev, .. } => {
                    need_market()?;
                    actor(&p, a)?;
                    if !evs.contains(ev.as_str()) {
                        return Err(SchemaError::at(&p, format!("undeclared ev {ev}")));
                    }
                }
                Action::InjectFault { fault } => match fault {
                    Fault::CrashCoordinatorAtStep { step } | Fault::DelayMessage { step, .. }
                        if *step >= 4 =>
                    {
                        return Err(SchemaError::at(
                            &p,
                            format!("swap step {step} out of range 0..4"),
                        ));
                    }
                    Fault::DropEvents { percent, .. } if *percent > 100 => {
                        return Err(SchemaError::at(&p, "percent above 100"));
                    }
                    Fault::TamperBlock { ledger: l, .. } => ledger(&p, l)?,
                    _ => {}
                },
                Action::Assert { check } => match check {
                    Check::TraceVerdict {
                        lot: l, verdict, ..
                    } => {
                        lot(l)?;
                        if verdict != "clean" && verdict != "violations" {
                            return Err(SchemaError::at(&p, format!("unknown verdict {verdict}")));
                        }
                    }
                    Check::CustodyHolder { lot: l, .. } => lot(l)?,
                    Check::Balance { ledger: l, who, .. } => {
                        ledger(&p, l)?;
                        actor(&p, who)?;
                    }
                    Check::ChainValid { ledger: l } | Check::TamperDetected { ledger: l } => {
                        ledger(&p, l)?
                    }
                    Check::AnchorsValid { source, .. } => ledger(&p, source)?,
                    Check::SettlementOutcome { outcome, .. } => {
                        if outcome != "paid" && outcome != "refunded" {
                            return Err(SchemaError::at(&p, format!("unknown outcome {outcome}")));
                        }
                    }
                },
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("bad fault target: {0}")]
pub struct BadTarget(pub String);

/// Inserts a fault into the script at logical time `at`, after any steps
/// already scheduled for that time.
pub fn inject_fault(s: &Scenario, at: u64, fault: Fault) -> Result<Scenario, BadTarget> {
    let known = |l: &str| s.ledgers.iter().any(|x| x.id == l);
    match &fault {
        Fault::TamperBlock { ledger, .. } if !known(ledger) => {
            return Err(BadTarget(ledger.clone()))
        }
        Fault::CrashCoordinatorAtStep { step } | Fault::DelayMessage { step, .. } if *step >= 4 => {
            return Err(BadTarget(format!("swap step {step}")));
        }
        Fault::DropEvents { percent, .. } if *percent > 100 => {
            return Err(BadTarget(format!("{percent}%")))
        }
        _ => {}
    }
    let mut out = s.clone();
    let pos = out
        .script
        .iter()
        .position(|st| st.at > at)
        .unwrap_or(out.script.len());
    out.script.insert(
        pos,
        Step {
            at,
            action: Action::InjectFault { fault },
            expect_error: None,
        },
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
  "name": "t",
  "seed": 1,
  "actors": ["a"],
  "ledgers": [{"id": "L", "kind": "open", "token_authority": "a"}],
  "genesis": [{"ledger": "L", "to": "a", "amount": 5}],
  "script": [
    {"at": 0, "action": "seal", "ledger": "L"},
    {"at": 10, "action": "assert", "check": {"check": "balance", "ledger": "L", "who": "a", "amount": 5}}
  ]
}"#;

    #[test]
    fn parses_minimal() {
        let s = parse_scenario(MINIMAL).unwrap();
        assert_eq!(s.delta_ms, DEFAULT_DELTA_MS);
        assert_eq!(s.script.len(), 2);
        let back = parse_scenario(&serde_json::to_string_pretty(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn syntax_error_has_line() {
        let broken = MINIMAL.replace("\"seed\": 1,", "\"seed\": ,");
        let e = parse_scenario(&broken).unwrap_err();
        assert_eq!(e.line, Some(3));
    }

    #[test]
    fn semantic_errors_point_at_script_line() {
        let bad = MINIMAL.replace("\"ledger\": \"L\"}", "\"ledger\": \"Q\"}");
        let e = parse_scenario(&bad).unwrap_err();
        assert_eq!(e.path, "script[0]");
        assert_eq!(e.line, Some(8));
        assert!(e.message.contains("undeclared ledger Q"));
        let backwards = MINIMAL.replace("\"at\": 10", "\"at\": 0").replace(
            "\"at\": 0, \"action\": \"seal\"",
            "\"at\": 5, \"action\": \"seal\"",
        );
        let e = parse_scenario(&backwards).unwrap_err();
        assert_eq!((e.path.as_str(), e.line), ("script[1]", Some(9)));
    }

    #[test]
    fn unknown_fields_and_actions_are_schema_errors() {
        assert!(parse_scenario(&MINIMAL.replace("\"seed\"", "\"sed\"")).is_err());
        assert!(
            parse_scenario(&MINIMAL.replace("\"action\": \"seal\"", "\"action\": \"melt\""))
                .is_err()
        );
    }

    #[test]
    fn undeclared_lot_is_rejected() {
        let s = parse_scenario(MINIMAL).unwrap();
        let mut s2 = s.clone();
        s2.script.push(Step {
            at: 20,
            action: Action::CreateLot {
                lot: "LOT-9".into(),
            },
            expect_error: None,
        });
        assert!(s2.validate().is_err());
    }

    #[test]
    fn fault_injection_keeps_order() {
        let s = parse_scenario(MINIMAL).unwrap();
        let f = inject_fault(
            &s,
            5,
            Fault::DropEvents {
                platform: "SF".into(),
                percent: 50,
            },
        )
        .unwrap();
        assert_eq!(f.script[1].action.name(), "inject_fault");
        f.validate().unwrap();
        let bad = inject_fault(
            &s,
            5,
            Fault::TamperBlock {
                ledger: "nope".into(),
                height: 0,
                offset: None,
            },
        );
        assert_eq!(bad, Err(BadTarget("nope".into())));
    }
}
