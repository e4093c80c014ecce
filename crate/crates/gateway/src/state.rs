use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex, MutexGuard};

use fedchain_core::harness::{ApiRole, ApiToken, World};
use fedchain_core::hash::Digest;
use fedchain_core::identity::Address;
use serde::Serialize;
use serde_json::{json, Value};
use tokio::sync::broadcast;

use crate::error::ApiError;

/// One server-sent event. `seq` starts at 1 and never repeats.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Envelope {
    pub seq: u64,
    pub kind: String,
    pub payload: Value,
    /// Ledger whose read restriction applies to this event.
    #[serde(skip)]
    pub ledger: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CallKind {
    /// A state-changing API endpoint.
    Api,
    /// Simulation control: scripted steps and seals.
    Sim,
    /// Agents and anchoring reacting after a call.
    Background,
}

/// Audit record of one mutation and the transactions it put on a ledger.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ApiCall {
    pub kind: CallKind,
    pub endpoint: String,
    pub actor: String,
    pub status: u16,
    pub tx_ids: Vec<Digest>,
}

#[derive(Debug, Clone)]
pub struct Caller {
    pub actor: String,
    pub role: ApiRole,
    pub address: Address,
}

pub struct Inner {
    pub world: World,
    tokens: BTreeMap<String, ApiToken>,
    events: Vec<Envelope>,
    seals_seen: usize,
    requests: BTreeMap<String, Value>,
    pub api_log: Vec<ApiCall>,
    next_script_step: usize,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Mutex<Inner>>,
    tx: broadcast::Sender<Envelope>,
}

fn all_tx_ids(world: &World) -> BTreeSet<Digest> {
    world
        .net
        .ledgers()
        .flat_map(|l| {
            l.blocks()
                .iter()
                .flat_map(|b| b.transactions.iter().map(|s| s.tx.tx_id))
                .chain(l.pending().iter().map(|t| t.tx_id))
                .collect::<Vec<_>>()
        })
        .collect()
}

impl AppState {
    pub fn new(world: World) -> Self {
        let tokens = world.scenario.tokens.clone();
        let mut inner = Inner {
            seals_seen: world.net.seal_log().len(),
            world,
            tokens,
            events: Vec::new(),
            requests: BTreeMap::new(),
            api_log: Vec::new(),
            next_script_step: 0,
        };
        inner.requests = inner.request_snapshot();
        let (tx, _) = broadcast::channel(1024);
        Self {
            inner: Arc::new(Mutex::new(inner)),
            tx,
        }
    }

    pub fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Envelope> {
        self.tx.subscribe()
    }

    /// Runs a mutation, logs its transactions, lets the background react and
    /// publishes the resulting events.
    pub fn mutate<T>(
        &self,
        kind: CallKind,
        endpoint: &str,
        caller: &Caller,
        f: impl FnOnce(&mut Inner) -> Result<T, ApiError>,
    ) -> Result<T, ApiError> {
        let mut g = self.lock();
        let before = all_tx_ids(&g.world);
        let out = f(&mut g);
        let mid = all_tx_ids(&g.world);
        let status = match &out {
            Ok(_) => 200,
            Err(e) => e.status.as_u16(),
        };
        g.api_log.push(ApiCall {
            kind,
            endpoint: endpoint.to_string(),
            actor: caller.actor.clone(),
            status,
            tx_ids: mid.difference(&before).copied().collect(),
        });
        g.world.background();
        let after = all_tx_ids(&g.world);
        let bg: Vec<Digest> = after.difference(&mid).copied().collect();
        if !bg.is_empty() {
            g.api_log.push(ApiCall {
                kind: CallKind::Background,
                endpoint: endpoint.to_string(),
                actor: String::new(),
                status: 200,
                tx_ids: bg,
            });
        }
        for e in g.publish() {
            let _ = self.tx.send(e);
        }
        out
    }
}

impl Inner {
    pub fn caller(&self, token: &str) -> Result<Caller, ApiError> {
        let t = self
            .tokens
            .get(token)
            .ok_or_else(ApiError::unauthenticated)?;
        let address = self
            .world
            .keys
            .address_of(&t.actor)
            .ok_or_else(ApiError::unauthenticated)?;
        Ok(Caller {
            actor: t.actor.clone(),
            role: t.role,
            address,
        })
    }

    /// `Ok` if the caller may read the ledger.
    pub fn check_read(&self, caller: &Caller, ledger: &str) -> Result<(), ApiError> {
        let l = self
            .world
            .net
            .ledger(ledger)
            .map_err(|e| ApiError::not_found(e.code(), e.to_string()))?;
        if l.config().restricted_read && !l.members().contains(&caller.address) {
            return Err(ApiError::forbidden(
                "ReadRestricted",
                format!("{ledger} is readable by members only"),
            ));
        }
        Ok(())
    }

    pub fn can_read(&self, address: &Address, ledger: &str) -> bool {
        self.world
            .net
            .ledger(ledger)
            .map(|l| !l.config().restricted_read || l.members().contains(address))
            .unwrap_or(false)
    }

    pub fn events_after(&self, since: u64) -> Vec<Envelope> {
        let start = usize::try_from(since)
            .unwrap_or(usize::MAX)
            .min(self.events.len());
        self.events[start..].to_vec()
    }

    pub fn head(&self) -> u64 {
        self.events.len() as u64
    }

    /// Advances the clock one tick at a time, running due script steps and
    /// sealing pending transactions after each tick.
    pub fn tick(&mut self, ticks: u64) -> Vec<usize> {
        let delta = self.world.scenario.delta_ms.max(1);
        let mut ran = Vec::new();
        for _ in 0..ticks {
            self.world.net.advance(delta);
            let now = self.world.net.now();
            while let Some(step) = self
                .world
                .scenario
                .script
                .get(self.next_script_step)
                .cloned()
            {
                if step.at > now {
                    break;
                }
                self.world.execute(self.next_script_step, &step);
                ran.push(self.next_script_step);
                self.next_script_step += 1;
            }
            self.world.net.seal_pending();
            self.world.background();
        }
        ran
    }

    pub fn request_snapshot(&self) -> BTreeMap<String, Value> {
        let Some(dep) = &self.world.market else {
            return BTreeMap::new();
        };
        self.world
            .net
            .ledger(&dep.market)
            .map(|l| {
                l.state()
                    .market
                    .requests
                    .iter()
                    .map(|(id, r)| {
                        (
                            id.clone(),
                            serde_json::to_value(r).expect("request serializes"),
                        )
                    })
                    .collect()
            })
            .unwrap_or_default()
    }

    fn push(&mut self, kind: &str, payload: Value, ledger: Option<String>) -> Envelope {
        let e = Envelope {
            seq: self.head() + 1,
            kind: kind.to_string(),
            payload,
            ledger,
        };
        self.events.push(e.clone());
        e
    }

    /// Turns new seals and changed requests into events.
    fn publish(&mut self) -> Vec<Envelope> {
        let mut out = Vec::new();
        let seals: Vec<_> = self.world.net.seal_log()[self.seals_seen..].to_vec();
        self.seals_seen += seals.len();
        for s in seals {
            let Ok(l) = self.world.net.ledger(&s.ledger) else {
                continue;
            };
            let Some(b) = l.block(s.height) else { continue };
            let payload = json!({
                "ledger": s.ledger,
                "height": s.height,
                "at": s.at,
                "hash": b.hash().to_hex(),
                "txs": b.transactions.len(),
            });
            out.push(self.push("block", payload, Some(s.ledger.clone())));
        }
        let now = self.request_snapshot();
        let market = self.world.market.as_ref().map(|d| d.market.clone());
        for (id, v) in &now {
            if self.requests.get(id) != Some(v) {
                out.push(self.push("request_updated", v.clone(), market.clone()));
            }
        }
        self.requests = now;
        out
    }
}
