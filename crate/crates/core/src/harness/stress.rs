//! Stress mode: the scenario's ingest stream submitted by concurrent threads.
//!
//! Submissions are serialized by a lock around the federation; interleaving
//! is up to the scheduler, so only invariants are checked, never equality
//! with a deterministic run.

use std::sync::Mutex;

use serde::Serialize;

use super::run::{check_sealed, SetupError, World};
use super::scenario::{Action, Scenario};
use crate::adapter::{map_event, Adapter, Ingestor, SensorEvent};
use crate::hash::Digest;
use crate::ledger::Network;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StressReport {
    pub threads: usize,
    pub events: usize,
    pub submitted: usize,
    pub rejected: usize,
    pub sealed_txs: usize,
    /// accepted submissions missing from every chain
    pub lost: usize,
    pub chains_valid: bool,
    pub violations: Vec<String>,
}

impl StressReport {
    pub fn ok(&self) -> bool {
        self.lost == 0 && self.chains_valid && self.violations.is_empty()
    }
}

/// Every event the script would ingest, deduplicated as the ingestor would.
pub fn script_events(s: &Scenario) -> Vec<SensorEvent> {
    let mut ing = Ingestor::new();
    let mut out = Vec::new();
    for step in &s.script {
        if let Action::Ingest { events, ndjson } = &step.action {
            let mut text: String = events.iter().map(|e| e.to_line() + "\n").collect();
            text.push_str(ndjson.as_deref().unwrap_or(""));
            out.extend(ing.ingest(&text).accepted);
        }
    }
    out
}

/// Seals whichever ledger a thread last wrote to every `seal_every` submissions.
pub fn stress(s: &Scenario, threads: usize, seal_every: usize) -> Result<StressReport, SetupError> {
    let threads = threads.max(1);
    let world = World::new(s.clone())?;
    let events = script_events(s);
    let rules = s.adapter_rules.clone();
    let shared: Mutex<(Network, Adapter)> = Mutex::new((world.net, world.adapter));
    let accepted: Mutex<Vec<(String, Digest)>> = Mutex::new(Vec::new());
    let rejected = Mutex::new(0usize);
    std::thread::scope(|scope| {
        for t in 0..threads {
            let mine: Vec<&SensorEvent> = events.iter().skip(t).step_by(threads).collect();
            let (shared, accepted, rejected, rules) = (&shared, &accepted, &rejected, &rules);
            scope.spawn(move || {
                for (i, ev) in mine.into_iter().enumerate() {
                    let Ok(m) = map_event(ev, rules) else {
                        continue;
                    };
                    let ledger = m.ledger.clone();
                    let mut guard = shared.lock().expect("federation lock");
                    let (net, adapter) = &mut *guard;
                    let r = adapter
                        .flush_batch(net, vec![m])
                        .expect("rule signers are declared actors");
                    accepted
                        .lock()
                        .expect("lock")
                        .extend(r.submitted.iter().map(|x| (x.ledger.clone(), x.tx_id)));
                    *rejected.lock().expect("lock") += r.failures.len();
                    if (i + 1) % seal_every.max(1) == 0 {
                        net.seal(&ledger).expect("known ledger");
                    }
                }
            });
        }
    });
    let (mut net, _) = shared.into_inner().expect("threads joined");
    net.seal_pending();
    let accepted = accepted.into_inner().expect("threads joined");
    let lost = accepted
        .iter()
        .filter(|(l, id)| net.ledger(l).map_or(true, |x| x.find_sealed(id).is_none()))
        .count();
    let mut violations: Vec<String> = Vec::new();
    let mut chains_valid = true;
    let mut sealed_txs = 0;
    for l in net.ledgers() {
        chains_valid &= l.verify_chain().ok;
        violations.extend(check_sealed(l));
        sealed_txs += l
            .blocks()
            .iter()
            .map(|b| b.transactions.len())
            .sum::<usize>();
    }
    Ok(StressReport {
        threads,
        events: events.len(),
        submitted: accepted.len(),
        rejected: rejected.into_inner().expect("threads joined"),
        sealed_txs,
        lost,
        chains_valid,
        violations,
    })
}
