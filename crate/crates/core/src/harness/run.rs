//! Deterministic scenario execution and the run report.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use super::scenario::{Action, Check, Fault, Scenario, Step};
use crate::adapter::{
    map_event, Adapter, IngestResult, Ingestor, RejectReason, SensorEvent, SubmissionReport,
};
use crate::contracts::provenance::custody_asset;
use crate::contracts::ContractCall;
use crate::energy::market::{
    self as mkt, AgentAction, MarketDeployment, MarketError, SettlementReport,
};
use crate::energy::{plan_day_ahead, EvProfile};
use crate::foodchain::{
    self, custody_holder, generate_qr_payload, trace_lot, ConditionRule, FoodError,
    FoodchainConfig, Segment, TraceReport,
};
use crate::hash::Digest;
use crate::identity::{Address, Keyring};
use crate::interledger::{
    anchor_checkpoint, checkpoints, verify_anchors_blocks, AnchorReport, FaultSchedule, StepFault,
    SwapStatus,
};
use crate::ledger::store::{self, block_offsets, decode_chain, encode_chain, verify_chain_bytes};
use crate::ledger::{Block, Ledger, LedgerConfig, LedgerError, LedgerKind, Network};

pub const DEFAULT_ASSET: &str = "TOK";

#[derive(Debug, Error)]
pub enum SetupError {
    #[error("ledger setup failed: {0}")]
    Ledger(#[from] LedgerError),
    #[error("{what} failed: {detail}")]
    Genesis { what: String, detail: String },
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Setup(#[from] SetupError),
    #[error(transparent)]
    Store(#[from] store::StoreError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Results of the checks run after every seal.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct InvariantLog {
    pub seals_checked: u64,
    pub violations: Vec<String>,
}

/// Per-seal checks: conservation, tip linkage, transaction root, custody
/// tokens never minted twice.
pub fn check_sealed(ledger: &Ledger) -> Vec<String> {
    let mut out = Vec::new();
    let tip = ledger.tip();
    let id = ledger.id();
    for v in ledger.state().conservation_violations() {
        out.push(format!("{id}@{}: conservation: {v}", tip.height));
    }
    if tip.height > 0 && ledger.block_hash(tip.height - 1) != Some(tip.prev_hash) {
        out.push(format!("{id}@{}: prev_hash does not link", tip.height));
    }
    let ids: Vec<Digest> = tip.transactions.iter().map(|s| s.tx.tx_id).collect();
    if crate::merkle::root(&ids) != tip.tx_root {
        out.push(format!("{id}@{}: tx_root mismatch", tip.height));
    }
    if tip.state_root != ledger.state().root() {
        out.push(format!("{id}@{}: state_root mismatch", tip.height));
    }
    for asset in ledger
        .state()
        .tokens
        .balances
        .keys()
        .filter(|a| a.starts_with("custody:"))
    {
        if ledger.state().tokens.total_minted(asset) > 1 {
            out.push(format!(
                "{id}@{}: {asset} minted more than once",
                tip.height
            ));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StepRecord {
    pub index: usize,
    pub at: u64,
    pub action: String,
    pub ok: bool,
    /// error code when the action failed
    #[serde(skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expected_error: Option<String>,
    /// the action's outcome matched the script's expectation
    pub as_expected: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AssertionResult {
    pub index: usize,
    pub at: u64,
    pub check: Value,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HandoverSummary {
    pub at: u64,
    pub lot: String,
    pub from: Segment,
    pub to: Segment,
    pub completed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub swap: Option<SwapStatus>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TamperRecord {
    pub at: u64,
    pub ledger: String,
    pub height: u64,
    /// absolute byte offset in the encoded chain
    pub byte: usize,
    pub detected: bool,
    pub first_bad_height: Option<u64>,
    pub reason: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anchors: Option<AnchorReport>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestionSummary {
    pub lines: usize,
    pub accepted: usize,
    pub rejected: BTreeMap<String, usize>,
    pub dropped: usize,
    pub unmapped: usize,
    pub submitted: usize,
    pub submit_failures: usize,
    pub failed_on_chain: usize,
    pub digests: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LedgerSummary {
    pub kind: LedgerKind,
    pub height: u64,
    pub tip: Digest,
    pub state_root: Digest,
    pub transactions: usize,
    pub failed_transactions: usize,
    pub chain_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AnchorSummary {
    pub public: String,
    pub checkpoints: usize,
    pub last_height: Option<u64>,
    pub report: Option<AnchorReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub ok: bool,
    pub final_time: u64,
    pub ledgers: BTreeMap<String, LedgerSummary>,
    /// ledger → asset → holder label → amount
    pub balances: BTreeMap<String, BTreeMap<String, BTreeMap<String, u64>>>,
    pub traces: BTreeMap<String, TraceReport>,
    pub qr: BTreeMap<String, String>,
    pub handovers: Vec<HandoverSummary>,
    pub settlements: BTreeMap<String, SettlementReport>,
    pub anchors: BTreeMap<String, AnchorSummary>,
    pub tamper: Vec<TamperRecord>,
    pub ingestion: IngestionSummary,
    pub invariants: InvariantLog,
    pub assertions: Vec<AssertionResult>,
    pub steps: Vec<StepRecord>,
    pub agent_actions: Vec<AgentAction>,
}

impl RunReport {
    /// Canonical JSON: object keys sorted, two-space indent, trailing newline.
    pub fn to_json(&self) -> String {
        let v = serde_json::to_value(self).expect("report serializes");
        let mut s = serde_json::to_string_pretty(&v).expect("value serializes");
        s.push('\n');
        s
    }

    pub fn failed_assertions(&self) -> impl Iterator<Item = &AssertionResult> {
        self.assertions.iter().filter(|a| !a.passed)
    }

    pub fn summary(&self) -> String {
        let mut out = format!(
            "scenario {} seed {}: {}\n",
            self.scenario,
            self.seed,
            if self.ok { "OK" } else { "FAILED" }
        );
        out += &format!(
            "  logical time {} ms, {} steps\n",
            self.final_time,
            self.steps.len()
        );
        for (id, l) in &self.ledgers {
            out += &format!(
                "  ledger {id:<8} {:?} height {} txs {} (failed {}) chain {}\n",
                l.kind,
                l.height,
                l.transactions,
                l.failed_transactions,
                if l.chain_ok { "ok" } else { "BROKEN" }
            );
        }
        for (lot, t) in &self.traces {
            out +=
                &format!(
                "  trace {lot}: {:?}, custody {}, {} readings, {} violations, {} unverifiable\n",
                t.verdict,
                t.custody_chain.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(">"),
                t.readings.len(),
                t.violations.len(),
                t.unverifiable.len()
            );
        }
        for h in &self.handovers {
            out += &format!(
                "  handover {} {}>{} at {}: {}\n",
                h.lot,
                h.from,
                h.to,
                h.at,
                if h.completed {
                    "complete".to_string()
                } else {
                    h.error.clone().unwrap_or_default()
                }
            );
        }
        for (id, s) in &self.settlements {
            out += &format!(
                "  settlement {id}: {} delivered {} / committed {} Wh\n",
                s.outcome.map_or("unsettled", |o| o.as_str()),
                s.delivered_wh,
                s.committed_wh
            );
        }
        for (src, a) in &self.anchors {
            out += &format!(
                "  anchors {src} -> {}: {} checkpoints, {}\n",
                a.public,
                a.checkpoints,
                a.report
                    .as_ref()
                    .map_or("unchecked", |r| if r.ok { "valid" } else { "DIVERGED" })
            );
        }
        for t in &self.tamper {
            out += &format!(
                "  tamper {}@{} byte {}: {}\n",
                t.ledger,
                t.height,
                t.byte,
                if t.detected { "detected" } else { "UNDETECTED" }
            );
        }
        out += &format!(
            "  invariants: {} seals checked, {} violations\n",
            self.invariants.seals_checked,
            self.invariants.violations.len()
        );
        let failed = self.failed_assertions().count();
        out += &format!(
            "  assertions: {} passed, {failed} failed\n",
            self.assertions.len() - failed
        );
        for a in self.failed_assertions() {
            out += &format!("    FAIL step {} at {}: {}\n", a.index, a.at, a.detail);
        }
        for s in self.steps.iter().filter(|s| !s.as_expected) {
            out += &format!(
                "    UNEXPECTED step {} {}: {}\n",
                s.index, s.action, s.detail
            );
        }
        out
    }
}

/// Writes `<path>` (canonical JSON) and `<path>.txt` (summary).
pub fn emit_report(report: &RunReport, path: &Path) -> Result<(), HarnessError> {
    let io = |p: &Path| {
        let path = p.display().to_string();
        move |source| HarnessError::Io { path, source }
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io(dir))?;
    }
    std::fs::write(path, report.to_json()).map_err(io(path))?;
    let txt = path.with_extension("txt");
    std::fs::write(&txt, report.summary()).map_err(io(&txt))?;
    Ok(())
}

/// An action's failure: a stable code plus a readable detail.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepError {
    pub code: String,
    pub detail: String,
}

impl StepError {
    pub fn new(code: impl Into<String>, detail: impl std::fmt::Display) -> Self {
        Self {
            code: code.into(),
            detail: detail.to_string(),
        }
    }
}

impl From<FoodError> for StepError {
    fn from(e: FoodError) -> Self {
        Self::new(e.code(), &e)
    }
}

impl From<MarketError> for StepError {
    fn from(e: MarketError) -> Self {
        Self::new(e.code(), &e)
    }
}

impl From<LedgerError> for StepError {
    fn from(e: LedgerError) -> Self {
        Self::new(e.code(), &e)
    }
}

pub type StepResult = Result<String, StepError>;

/// A scenario in progress: the federation, its actors and the run's records.
pub struct World {
    pub scenario: Scenario,
    pub net: Network,
    pub keys: Keyring,
    pub adapter: Adapter,
    pub ingestor: Ingestor,
    pub food: Option<FoodchainConfig>,
    pub conditions: Vec<ConditionRule>,
    pub market: Option<MarketDeployment>,
    pub fleet: Vec<EvProfile>,
    rng: ChaCha8Rng,
    next_swap: FaultSchedule,
    drops: BTreeMap<String, u8>,
    /// tampered persisted copies, by ledger
    pub tampered: BTreeMap<String, Vec<u8>>,
    invariants: Arc<Mutex<InvariantLog>>,
    pub steps: Vec<StepRecord>,
    pub assertions: Vec<AssertionResult>,
    pub handovers: Vec<HandoverSummary>,
    pub tamper: Vec<TamperRecord>,
    pub ingestion: IngestionSummary,
    pub agent_log: Vec<AgentAction>,
}

impl std::fmt::Debug for World {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("World")
            .field("scenario", &self.scenario.name)
            .field("net", &self.net)
            .finish()
    }
}

fn label_addr(keys: &Keyring, label: &str) -> Address {
    keys.address_of(label).expect("validated actor")
}

fn ledger_config(keys: &Keyring, spec: &super::scenario::LedgerSpec) -> LedgerConfig {
    LedgerConfig {
        ledger_id: spec.id.clone(),
        kind: spec.kind,
        members: spec.members.iter().map(|m| label_addr(keys, m)).collect(),
        authority: spec.authority.as_deref().map(|a| label_addr(keys, a)),
        token_authority: spec.token_authority.as_deref().map(|a| label_addr(keys, a)),
        restricted_read: spec.restricted_read,
    }
}

impl World {
    /// Builds the ledgers, mints genesis balances and configures the market.
    pub fn new(scenario: Scenario) -> Result<Self, SetupError> {
        let mut keys = Keyring::new();
        for a in &scenario.actors {
            keys.add_label(a);
        }
        let mut net = Network::new();
        for spec in &scenario.ledgers {
            net.add_ledger(ledger_config(&keys, spec))?;
        }
        let invariants = Arc::new(Mutex::new(InvariantLog::default()));
        let sink = Arc::clone(&invariants);
        net.set_seal_observer(Box::new(move |l: &Ledger| {
            let found = check_sealed(l);
            let mut log = sink.lock().expect("invariant log");
            log.seals_checked += 1;
            log.violations.extend(found);
        }));
        let genesis_err = |what: String, detail: String| SetupError::Genesis { what, detail };
        for m in &scenario.genesis {
            let spec = scenario
                .ledgers
                .iter()
                .find(|l| l.id == m.ledger)
                .expect("validated");
            let auth = keys
                .by_label(spec.token_authority.as_deref().expect("validated"))
                .expect("actor");
            let mut call = ContractCall::new("token", "mint")
                .arg("to", label_addr(&keys, &m.to))
                .arg("amount", m.amount);
            if let Some(a) = &m.asset {
                call = call.arg("asset", a.as_str());
            }
            net.transact(&m.ledger, auth, call)?
                .map_err(|e| genesis_err(format!("mint on {}", m.ledger), e.to_string()))?;
        }
        let food = scenario.foodchain.as_ref().map(|f| FoodchainConfig {
            consortium: f.consortium.clone(),
            ledgers: f.ledgers.clone(),
            operators: f.operators.clone(),
            registrar: f.registrar.clone(),
            digest_signer: f.digest_signer.clone(),
            delta: scenario.delta_ms,
        });
        let conditions = scenario
            .foodchain
            .as_ref()
            .map(|f| f.conditions.clone())
            .unwrap_or_default();
        let mut fleet = Vec::new();
        let market = match &scenario.market {
            None => None,
            Some(m) => {
                let spec = scenario
                    .ledgers
                    .iter()
                    .find(|l| l.id == m.market)
                    .expect("validated");
                let auth_label = spec.authority.as_deref().unwrap_or(&m.dso);
                let auth = keys.by_label(auth_label).expect("actor").clone();
                for (who, role) in &m.roles {
                    let call = ContractCall::new("market", "set_role")
                        .arg("who", label_addr(&keys, who))
                        .arg("role", role.as_str());
                    net.transact(&m.market, &auth, call)?
                        .map_err(|e| genesis_err(format!("role for {who}"), e.to_string()))?;
                }
                if let Some(p) = m.params {
                    let call = ContractCall::new("market", "configure")
                        .arg("tolerance_bps", p.tolerance_bps)
                        .arg("reward_pct", p.reward_pct)
                        .arg("lead_ms", p.lead_ms);
                    net.transact(&m.market, &auth, call)?
                        .map_err(|e| genesis_err("market parameters".into(), e.to_string()))?;
                }
                fleet = m
                    .fleet
                    .iter()
                    .map(|e| EvProfile {
                        ev: e.ev.clone(),
                        user_type: e.user_type,
                        lat: e.lat,
                        lon: e.lon,
                        residual_autonomy_m: e.residual_autonomy_m,
                        status: e.status,
                        battery_capacity_wh: e.battery_capacity_wh,
                        owner: label_addr(&keys, &e.owner),
                    })
                    .collect();
                Some(MarketDeployment {
                    market: m.market.clone(),
                    payment_ledger: m.payment_ledger.clone(),
                    reward_ledger: m.reward_ledger.clone(),
                    dso: m.dso.clone(),
                    settle_grace_ms: m.settle_grace_ms,
                    secret_seed: scenario.seed,
                })
            }
        };
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(scenario.seed),
            adapter: Adapter::new(keys.clone()),
            ingestor: Ingestor::new(),
            food,
            conditions,
            market,
            fleet,
            next_swap: FaultSchedule::NONE,
            drops: BTreeMap::new(),
            tampered: BTreeMap::new(),
            invariants,
            steps: Vec::new(),
            assertions: Vec::new(),
            handovers: Vec::new(),
            tamper: Vec::new(),
            ingestion: IngestionSummary::default(),
            agent_log: Vec::new(),
            scenario,
            net,
            keys,
        })
    }

    pub fn invariants(&self) -> InvariantLog {
        self.invariants.lock().expect("invariant log").clone()
    }

    /// Executes one scripted step at its logical time, then lets the
    /// background agents (anchoring cadence, market settlement) react.
    pub fn execute(&mut self, index: usize, step: &Step) -> &StepRecord {
        self.net.advance_to(step.at);
        let result = self.apply(index, step);
        let (ok, code, detail) = match result {
            Ok(d) => (true, None, d),
            Err(e) => (false, Some(e.code), e.detail),
        };
        let as_expected = match &step.expect_error {
            None => ok,
            Some(want) => code.as_deref() == Some(want.as_str()),
        };
        self.steps.push(StepRecord {
            index,
            at: step.at,
            action: step.action.name().to_string(),
            ok,
            code,
            expected_error: step.expect_error.clone(),
            as_expected,
            detail,
        });
        self.background();
        self.steps.last().expect("just pushed")
    }

    /// Anchors every source that has grown by its cadence and runs one pass of
    /// the market agents.
    pub fn background(&mut self) {
        for a in self.scenario.anchoring.clone() {
            let Ok(src) = self.net.ledger(&a.source) else {
                continue;
            };
            let last = self
                .net
                .ledger(&a.public)
                .map(|p| checkpoints(p, &a.source).last().map_or(0, |c| c.height));
            if let Ok(last) = last {
                if src.height() >= last + a.every_k {
                    let signer = self.keys.by_label(&a.signer).expect("actor").clone();
                    if let Err(e) = anchor_checkpoint(&mut self.net, &a.source, &a.public, &signer)
                    {
                        self.invariants
                            .lock()
                            .expect("log")
                            .violations
                            .push(format!("anchoring {}: {e}", a.source));
                    }
                }
            }
        }
        if let Some(dep) = self.market.clone() {
            match mkt::run_agents(&mut self.net, &self.keys, &dep) {
                Ok(log) => self.agent_log.extend(log),
                Err(e) => self
                    .invariants
                    .lock()
                    .expect("log")
                    .violations
                    .push(format!("market agents: {e}")),
            }
        }
    }

    fn food(&self) -> Result<&FoodchainConfig, StepError> {
        self.food
            .as_ref()
            .ok_or_else(|| StepError::new("NoDeployment", "no foodchain deployment"))
    }

    fn dep(&self) -> Result<MarketDeployment, StepError> {
        self.market
            .clone()
            .ok_or_else(|| StepError::new("NoDeployment", "no market deployment"))
    }

    /// Applies one action at the current clock without recording a step.
    pub fn apply(&mut self, index: usize, step: &Step) -> StepResult {
        match &step.action {
            Action::Ingest { events, ndjson } => {
                let mut text: String = events.iter().map(|e| e.to_line() + "\n").collect();
                if let Some(raw) = ndjson {
                    text.push_str(raw);
                }
                self.ingest_text(&text).map(|r| {
                    format!(
                        "{} accepted, {} rejected",
                        r.accepted.len(),
                        r.rejected.len()
                    )
                })
            }
            Action::CreateLot { lot } => {
                let cfg = self.food()?.clone();
                foodchain::create_lot(&mut self.net, &self.keys, &cfg, lot)?;
                Ok(format!("{lot} registered"))
            }
            Action::TransferCustody { lot, from, to } => {
                let cfg = self.food()?.clone();
                let schedule = std::mem::replace(&mut self.next_swap, FaultSchedule::NONE);
                let at = self.net.now();
                let r = foodchain::transfer_custody(
                    &mut self.net,
                    &self.keys,
                    &cfg,
                    lot,
                    *from,
                    *to,
                    self.scenario.seed,
                    schedule,
                );
                let mut h = HandoverSummary {
                    at,
                    lot: lot.clone(),
                    from: *from,
                    to: *to,
                    completed: false,
                    error: None,
                    swap: None,
                };
                let out = match r {
                    Ok(rec) => {
                        h.completed = true;
                        h.swap = Some(rec.status);
                        Ok(format!("custody of {lot} moved {from}>{to}"))
                    }
                    Err(FoodError::SwapTimeout(status)) => {
                        h.error = Some("SwapTimeout".into());
                        let detail = format!(
                            "swap ended {:?} ({:?}/{:?})",
                            status.phase, status.leg_a, status.leg_b
                        );
                        h.swap = Some(*status);
                        Err(StepError::new("SwapTimeout", detail))
                    }
                    Err(e) => {
                        h.error = Some(e.code().into());
                        Err(e.into())
                    }
                };
                self.handovers.push(h);
                out
            }
            Action::Seal { ledger: Some(l) } => {
                let h = self.net.seal(l)?.height;
                Ok(format!("{l} sealed at {h}"))
            }
            Action::Seal { ledger: None } => Ok(format!("sealed {:?}", self.net.seal_pending())),
            Action::Anchor { source } => {
                let a = self
                    .scenario
                    .anchoring
                    .iter()
                    .find(|a| &a.source == source)
                    .expect("validated")
                    .clone();
                let signer = self.keys.by_label(&a.signer).expect("actor").clone();
                let cp = anchor_checkpoint(&mut self.net, source, &a.public, &signer)
                    .map_err(|e| StepError::new(anchor_code(&e), &e))?;
                Ok(format!("{source}@{} anchored in {}", cp.height, a.public))
            }
            Action::PostRequest { actor, request } => {
                let dep = self.dep()?;
                Ok(mkt::post_request(
                    &mut self.net,
                    &self.keys,
                    &dep,
                    actor,
                    request,
                )?)
            }
            Action::PlanDayAhead {
                actor,
                forecast,
                zone,
                rate,
            } => {
                let dep = self.dep()?;
                let specs = plan_day_ahead(forecast, *zone, *rate)
                    .map_err(|e| StepError::new("BadForecast", &e))?;
                let mut ids = Vec::new();
                for s in &specs {
                    ids.push(mkt::post_request(
                        &mut self.net,
                        &self.keys,
                        &dep,
                        actor,
                        s,
                    )?);
                }
                Ok(format!("posted {}", ids.join(",")))
            }
            Action::PostOffer {
                actor,
                request,
                price_tokens,
                committed_wh,
            } => {
                let dep = self.dep()?;
                let i = mkt::post_offer(
                    &mut self.net,
                    &self.keys,
                    &dep,
                    actor,
                    request,
                    *price_tokens,
                    *committed_wh,
                )?;
                Ok(format!("offer {i} on {request}"))
            }
            Action::Close { actor, request } => {
                let dep = self.dep()?;
                Ok(
                    match mkt::close_auction(&mut self.net, &self.keys, &dep, actor, request)? {
                        Some(w) => format!(
                            "{request} won by {} at {}",
                            self.label(&w.fleet_manager),
                            w.price_tokens
                        ),
                        None => format!("{request} expired without offers"),
                    },
                )
            }
            Action::RegisterFleet { actor } => {
                let dep = self.dep()?;
                let spec = self.scenario.market.as_ref().expect("validated");
                let mine: Vec<(String, String)> = spec
                    .fleet
                    .iter()
                    .filter(|e| &e.fleet_manager == actor)
                    .map(|e| (e.ev.clone(), e.owner.clone()))
                    .collect();
                for (ev, owner) in &mine {
                    mkt::register_ev(
                        &mut self.net,
                        &self.keys,
                        &dep,
                        actor,
                        ev,
                        label_addr(&self.keys, owner),
                    )?;
                }
                Ok(format!("{} EVs registered", mine.len()))
            }
            Action::ProposeCandidates { actor, request } => {
                let dep = self.dep()?;
                let fleet = self.fleet.clone();
                let c = mkt::propose_candidates(
                    &mut self.net,
                    &self.keys,
                    &dep,
                    actor,
                    request,
                    &fleet,
                )?;
                Ok(c.iter()
                    .map(|c| c.ev.as_str())
                    .collect::<Vec<_>>()
                    .join(","))
            }
            Action::Accept {
                actor,
                request,
                ev,
                station,
            } => {
                let dep = self.dep()?;
                mkt::accept_assignment(
                    &mut self.net,
                    &self.keys,
                    &dep,
                    actor,
                    request,
                    ev,
                    station,
                )?;
                Ok(format!("{ev} assigned to {request} at {station}"))
            }
            Action::RecordDelivery { actor, request } => {
                let dep = self.dep()?;
                Ok(format!(
                    "{} Wh",
                    mkt::record_delivery(&mut self.net, &self.keys, &dep, actor, request)?
                ))
            }
            Action::Settle { actor, request } => {
                let dep = self.dep()?;
                Ok(
                    mkt::settle_request(&mut self.net, &self.keys, &dep, actor, request)?
                        .as_str()
                        .to_string(),
                )
            }
            Action::InjectFault { fault } => self.inject(step.at, fault),
            Action::Assert { check } => {
                let (passed, detail) = self.evaluate(check);
                self.assertions.push(AssertionResult {
                    index,
                    at: step.at,
                    check: serde_json::to_value(check).expect("check serializes"),
                    passed,
                    detail: detail.clone(),
                });
                if passed {
                    Ok(detail)
                } else {
                    Err(StepError::new("AssertionFailed", detail))
                }
            }
        }
    }

    pub fn label(&self, who: &Address) -> String {
        self.keys
            .label_of(who)
            .map_or_else(|| who.to_hex(), str::to_string)
    }

    /// Parses, deduplicates, drops (if a drop fault is active), maps and
    /// submits a batch of platform lines, then seals the touched ledgers.
    pub fn ingest_text(&mut self, text: &str) -> Result<IngestResult, StepError> {
        let mut parsed = self.ingestor.ingest(text);
        self.ingestion.lines += text.lines().filter(|l| !l.trim().is_empty()).count();
        self.ingestion.accepted += parsed.accepted.len();
        for r in &parsed.rejected {
            *self
                .ingestion
                .rejected
                .entry(reject_name(r.reason).into())
                .or_default() += 1;
        }
        let mut kept = Vec::with_capacity(parsed.accepted.len());
        for ev in std::mem::take(&mut parsed.accepted) {
            let drop = self
                .drops
                .get(&ev.platform)
                .is_some_and(|&pct| self.rng.random_range(0..100u8) < pct);
            if drop {
                self.ingestion.dropped += 1;
            } else {
                kept.push(ev);
            }
        }
        let rules = self.scenario.adapter_rules.clone();
        let report = match self.food.clone() {
            Some(cfg) => {
                let r = foodchain::record_observations(
                    &mut self.net,
                    &self.keys,
                    &cfg,
                    &mut self.adapter,
                    &rules,
                    &kept,
                )?;
                self.ingestion.unmapped += r.unmapped.len();
                self.ingestion.failed_on_chain += r.failed.len();
                self.ingestion.digests += r.digests;
                r.submission
            }
            None => self.submit_plain(&kept)?,
        };
        self.ingestion.submitted += report.submitted.len();
        self.ingestion.submit_failures += report.failures.len();
        parsed.accepted = kept;
        Ok(parsed)
    }

    fn submit_plain(&mut self, events: &[SensorEvent]) -> Result<SubmissionReport, StepError> {
        let mut batch = Vec::new();
        for ev in events {
            match map_event(ev, &self.scenario.adapter_rules) {
                Ok(m) => batch.push(m),
                Err(_) => self.ingestion.unmapped += 1,
            }
        }
        let report = self
            .adapter
            .flush_batch(&mut self.net, batch)
            .map_err(|e| StepError::new("AdapterError", &e))?;
        for l in report.per_ledger.keys() {
            if !self.net.ledger(l)?.pending().is_empty() {
                self.net.seal(l)?;
            }
        }
        for s in &report.submitted {
            let (_, st) = self
                .net
                .ledger(&s.ledger)?
                .find_sealed(&s.tx_id)
                .expect("sealed above");
            if matches!(st.status, crate::ledger::TxStatus::Failed { .. }) {
                self.ingestion.failed_on_chain += 1;
            }
        }
        Ok(report)
    }

    fn inject(&mut self, at: u64, fault: &Fault) -> StepResult {
        match fault {
            Fault::CrashCoordinatorAtStep { step } => {
                self.next_swap.0[*step] = StepFault::Crash;
                Ok(format!(
                    "next swap crashes before {}",
                    crate::interledger::swap::STEPS[*step]
                ))
            }
            Fault::DelayMessage { step, ms } => {
                if let StepFault::Delay(d) = &mut self.next_swap.0[*step] {
                    *d += ms;
                }
                Ok(format!(
                    "next swap delays {} by {ms} ms",
                    crate::interledger::swap::STEPS[*step]
                ))
            }
            Fault::DropEvents { platform, percent } => {
                self.drops.insert(platform.clone(), *percent);
                Ok(format!("dropping {percent}% of {platform}"))
            }
            Fault::TamperBlock {
                ledger,
                height,
                offset,
            } => {
                let rec = self.tamper_block(at, ledger, *height, *offset)?;
                Ok(format!(
                    "{}@{} byte {} flipped, detected: {}",
                    rec.ledger, rec.height, rec.byte, rec.detected
                ))
            }
        }
    }

    /// Flips one byte of block `height` in the persisted copy of `ledger` and
    /// verifies the copy from the file bytes alone.
    fn tamper_block(
        &mut self,
        at: u64,
        ledger: &str,
        height: u64,
        offset: Option<usize>,
    ) -> Result<TamperRecord, StepError> {
        let live = self.net.ledger(ledger)?;
        let mut bytes = match self.tampered.get(ledger) {
            Some(b) => b.clone(),
            None => encode_chain(live.blocks()),
        };
        let ranges = block_offsets(&bytes);
        let range = ranges.get(height as usize).cloned().ok_or_else(|| {
            StepError::new("BadTarget", format!("{ledger} has no block {height}"))
        })?;
        let rel = offset.unwrap_or(range.len() / 2);
        if rel >= range.len() {
            return Err(StepError::new(
                "BadTarget",
                format!("offset {rel} beyond block of {} bytes", range.len()),
            ));
        }
        let byte = range.start + rel;
        bytes[byte] ^= 0xFF;
        let report = verify_chain_bytes(live.config(), live.tip_hash(), &bytes);
        let anchors = self
            .scenario
            .anchoring
            .iter()
            .find(|a| a.source == ledger)
            .and_then(|a| {
                let blocks = blocks_of(&bytes);
                verify_anchors_blocks(live.config(), &blocks, self.net.ledger(&a.public).ok()?).ok()
            });
        let rec = TamperRecord {
            at,
            ledger: ledger.to_string(),
            height,
            byte,
            detected: !report.ok || anchors.as_ref().is_some_and(|a| !a.ok),
            first_bad_height: report.first_bad_height,
            reason: report.reason.clone(),
            anchors,
        };
        self.tampered.insert(ledger.to_string(), bytes);
        self.tamper.push(rec.clone());
        Ok(rec)
    }

    /// The blocks a verifier would see for `ledger`: the tampered copy if one
    /// exists, otherwise the live chain.
    fn visible_blocks(&self, ledger: &Ledger) -> Vec<Block> {
        match self.tampered.get(ledger.id()) {
            Some(bytes) => blocks_of(bytes),
            None => ledger.blocks().to_vec(),
        }
    }

    fn evaluate(&self, check: &Check) -> (bool, String) {
        match self.evaluate_inner(check) {
            Ok(r) => r,
            Err(e) => (false, format!("{}: {}", e.code, e.detail)),
        }
    }

    fn evaluate_inner(&self, check: &Check) -> Result<(bool, String), StepError> {
        Ok(match check {
            Check::TraceVerdict {
                lot,
                verdict,
                violations,
                chain,
                min_readings,
            } => {
                let cfg = self.food()?;
                let t = trace_lot(&self.net, &self.keys, cfg, lot, &self.conditions)
                    .map_err(|e| StepError::new("TraceFailed", &e))?;
                let got = serde_json::to_value(t.verdict).expect("verdict");
                let mut fails = Vec::new();
                if got != Value::String(verdict.clone()) {
                    fails.push(format!("verdict {got} != {verdict}"));
                }
                if let Some(n) = violations {
                    if t.violations.len() != *n {
                        fails.push(format!("{} violations, expected {n}", t.violations.len()));
                    }
                }
                if let Some(c) = chain {
                    if &t.custody_chain != c {
                        fails.push(format!(
                            "custody chain {:?}, expected {c:?}",
                            t.custody_chain
                        ));
                    }
                }
                if let Some(n) = min_readings {
                    if t.readings.len() < *n {
                        fails.push(format!(
                            "{} readings, expected at least {n}",
                            t.readings.len()
                        ));
                    }
                }
                if !t.unverifiable.is_empty() {
                    fails.push(format!("{} unverifiable readings", t.unverifiable.len()));
                }
                let ok = fails.is_empty();
                let detail = if ok {
                    format!(
                        "{lot}: {verdict}, {} readings, {} violations",
                        t.readings.len(),
                        t.violations.len()
                    )
                } else {
                    format!("{lot}: {}", fails.join("; "))
                };
                (ok, detail)
            }
            Check::CustodyHolder { lot, segment } => {
                let cfg = self.food()?;
                let holder = custody_holder(&self.net, cfg, lot)?;
                let want = cfg.operator(&self.keys, *segment);
                let name = holder.map_or("nobody".to_string(), |h| self.label(&h));
                (
                    holder.is_some() && holder == want,
                    format!("{lot} held by {name}, expected {segment}"),
                )
            }
            Check::SettlementOutcome { request, outcome } => {
                let dep = self.dep()?;
                let r = mkt::request(&self.net, &dep, request)?;
                let got = r
                    .settlement
                    .as_ref()
                    .map_or("unsettled", |s| s.outcome.as_str());
                (
                    got == outcome,
                    format!("{request} {got}, expected {outcome}"),
                )
            }
            Check::Balance {
                ledger,
                who,
                amount,
                asset,
            } => {
                let asset = asset.as_deref().unwrap_or(DEFAULT_ASSET);
                let got = self
                    .net
                    .ledger(ledger)?
                    .state()
                    .tokens
                    .balance(asset, &label_addr(&self.keys, who));
                (
                    got == *amount,
                    format!("{who} holds {got} {asset} on {ledger}, expected {amount}"),
                )
            }
            Check::ChainValid { ledger } => {
                let r = self.net.verify_chain(ledger)?;
                (
                    r.ok,
                    format!("{ledger} chain {}", if r.ok { "valid" } else { "invalid" }),
                )
            }
            Check::AnchorsValid { source, ok } => {
                let a = self
                    .scenario
                    .anchoring
                    .iter()
                    .find(|a| &a.source == source)
                    .ok_or_else(|| {
                        StepError::new("BadTarget", format!("{source} is not anchored"))
                    })?;
                let src = self.net.ledger(source)?;
                let r = verify_anchors_blocks(
                    src.config(),
                    &self.visible_blocks(src),
                    self.net.ledger(&a.public)?,
                )
                .map_err(|e| StepError::new(anchor_code(&e), &e))?;
                let at = r
                    .first_divergent_checkpoint
                    .as_ref()
                    .map(|d| format!(" at height {}", d.height));
                (
                    r.ok == *ok,
                    format!(
                        "{source} anchors ok={}{}, expected ok={ok}",
                        r.ok,
                        at.unwrap_or_default()
                    ),
                )
            }
            Check::TamperDetected { ledger } => {
                match self.tamper.iter().rev().find(|t| &t.ledger == ledger) {
                    None => (false, format!("{ledger} was never tampered")),
                    Some(t) => (
                        t.detected,
                        format!("{ledger}@{} tamper detected: {}", t.height, t.detected),
                    ),
                }
            }
        })
    }

    /// Finishes outstanding settlements and assembles the report.
    pub fn finish(&mut self) -> RunReport {
        self.background();
        let mut settlements = BTreeMap::new();
        if let Some(dep) = self.market.clone() {
            let ids: Vec<String> = self
                .net
                .ledger(&dep.market)
                .map(|l| l.state().market.requests.keys().cloned().collect())
                .unwrap_or_default();
            for id in ids {
                let settled =
                    mkt::request(&self.net, &dep, &id).is_ok_and(|r| r.settlement.is_some());
                let r = if settled {
                    mkt::finish_settlement(&mut self.net, &self.keys, &dep, &id).map(|(r, log)| {
                        self.agent_log.extend(log);
                        r
                    })
                } else {
                    mkt::settlement_report(&self.net, &dep, &id)
                };
                if let Ok(r) = r {
                    settlements.insert(id, r);
                }
            }
        }
        self.report(settlements)
    }

    fn report(&self, settlements: BTreeMap<String, SettlementReport>) -> RunReport {
        let mut traces = BTreeMap::new();
        let mut qr = BTreeMap::new();
        if let (Some(cfg), Some(spec)) = (&self.food, &self.scenario.foodchain) {
            for lot in &spec.lots {
                if let Ok(t) = trace_lot(&self.net, &self.keys, cfg, lot, &self.conditions) {
                    traces.insert(lot.clone(), t);
                    if let Ok(p) = generate_qr_payload(&self.net, cfg, lot) {
                        qr.insert(lot.clone(), p);
                    }
                }
            }
        }
        let mut ledgers = BTreeMap::new();
        let mut balances: BTreeMap<String, BTreeMap<String, BTreeMap<String, u64>>> =
            BTreeMap::new();
        for l in self.net.ledgers() {
            let txs: Vec<_> = l.blocks().iter().flat_map(|b| &b.transactions).collect();
            ledgers.insert(
                l.id().to_string(),
                LedgerSummary {
                    kind: l.kind(),
                    height: l.height(),
                    tip: l.tip_hash(),
                    state_root: l.tip().state_root,
                    transactions: txs.len(),
                    failed_transactions: txs
                        .iter()
                        .filter(|s| matches!(s.status, crate::ledger::TxStatus::Failed { .. }))
                        .count(),
                    chain_ok: l.verify_chain().ok,
                },
            );
            for (asset, holders) in &l.state().tokens.balances {
                let row: BTreeMap<String, u64> = holders
                    .iter()
                    .filter(|(_, v)| **v > 0)
                    .map(|(a, v)| (self.label(a), *v))
                    .collect();
                if !row.is_empty() {
                    balances
                        .entry(l.id().to_string())
                        .or_default()
                        .insert(asset.clone(), row);
                }
            }
        }
        let mut anchors = BTreeMap::new();
        for a in &self.scenario.anchoring {
            let (Ok(src), Ok(public)) = (self.net.ledger(&a.source), self.net.ledger(&a.public))
            else {
                continue;
            };
            let cps = checkpoints(public, &a.source);
            let report =
                verify_anchors_blocks(src.config(), &self.visible_blocks(src), public).ok();
            anchors.insert(
                a.source.clone(),
                AnchorSummary {
                    public: a.public.clone(),
                    checkpoints: cps.len(),
                    last_height: cps.last().map(|c| c.height),
                    report,
                },
            );
        }
        let invariants = self.invariants();
        let ok = invariants.violations.is_empty()
            && self.assertions.iter().all(|a| a.passed)
            && self.steps.iter().all(|s| s.as_expected);
        RunReport {
            scenario: self.scenario.name.clone(),
            seed: self.scenario.seed,
            ok,
            final_time: self.net.now(),
            ledgers,
            balances,
            traces,
            qr,
            handovers: self.handovers.clone(),
            settlements,
            anchors,
            tamper: self.tamper.clone(),
            ingestion: self.ingestion.clone(),
            invariants,
            assertions: self.assertions.clone(),
            steps: self.steps.clone(),
            agent_actions: self.agent_log.clone(),
        }
    }

    /// Persists every ledger; tampered ledgers get their tampered bytes while
    /// the sidecar keeps the true head.
    pub fn write_chains(&self, dir: &Path) -> Result<(), HarnessError> {
        for l in self.net.ledgers() {
            store::save_ledger(dir, l)?;
            if let Some(bytes) = self.tampered.get(l.id()) {
                let p = store::chain_path(dir, l.id());
                std::fs::write(&p, bytes).map_err(|source| HarnessError::Io {
                    path: p.display().to_string(),
                    source,
                })?;
            }
        }
        Ok(())
    }

    /// Lots whose custody token exists on the consortium ledger.
    pub fn lots(&self) -> Vec<String> {
        let Some(cfg) = &self.food else {
            return Vec::new();
        };
        self.net
            .ledger(&cfg.consortium)
            .map(|l| {
                l.state()
                    .provenance
                    .lots
                    .keys()
                    .filter(|lot| l.state().tokens.total_minted(&custody_asset(lot)) > 0)
                    .cloned()
                    .collect()
            })
            .unwrap_or_default()
    }
}

fn blocks_of(bytes: &[u8]) -> Vec<Block> {
    decode_chain(bytes).unwrap_or_else(|p| p.blocks)
}

fn anchor_code(e: &crate::interledger::AnchorError) -> &'static str {
    use crate::interledger::AnchorError;
    match e {
        AnchorError::NothingNew { .. } => "NothingNew",
        AnchorError::PublicLedgerRejected(_) => "PublicLedgerRejected",
        AnchorError::NoCheckpoints(_) => "NoCheckpoints",
        AnchorError::Ledger(l) => l.code(),
    }
}

fn reject_name(r: RejectReason) -> &'static str {
    match r {
        RejectReason::ParseError => "ParseError",
        RejectReason::UnknownMetric => "UnknownMetric",
        RejectReason::BadUnit => "BadUnit",
        RejectReason::BadValue => "BadValue",
        RejectReason::DuplicateEvent => "DuplicateEvent",
    }
}

/// Runs a validated scenario to completion. Assertion failures are recorded
/// in the report, never raised.
pub fn run(s: &Scenario) -> Result<(RunReport, World), SetupError> {
    let mut w = World::new(s.clone())?;
    for (i, step) in s.script.iter().enumerate() {
        w.execute(i, step);
    }
    let report = w.finish();
    Ok((report, w))
}
