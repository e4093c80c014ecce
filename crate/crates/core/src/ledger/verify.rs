use std::collections::BTreeMap;

use serde::Serialize;

use super::{admission_check, Block, LedgerConfig, Transaction, TxStatus};
use crate::contracts::{execute_call, CallContext, WorldState};
use crate::hash::Digest;
use crate::identity::Address;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChainReport {
    pub ok: bool,
    pub first_bad_height: Option<u64>,
    pub reason: Option<String>,
    pub height: u64,
}

impl ChainReport {
    fn good(height: u64) -> Self {
        Self {
            ok: true,
            first_bad_height: None,
            reason: None,
            height,
        }
    }

    pub(crate) fn bad(at: u64, reason: impl Into<String>, height: u64) -> Self {
        Self {
            ok: false,
            first_bad_height: Some(at),
            reason: Some(reason.into()),
            height,
        }
    }
}

/// Re-executes transactions from genesis, enforcing admission rules as of each
/// transaction's position in the chain.
pub(crate) struct Replayer<'a> {
    config: &'a LedgerConfig,
    pub state: WorldState,
    pub nonces: BTreeMap<Address, u64>,
}

impl<'a> Replayer<'a> {
    pub fn new(config: &'a LedgerConfig) -> Self {
        Self {
            config,
            state: config.genesis_state(),
            nonces: BTreeMap::new(),
        }
    }

    pub fn apply(&mut self, tx: &Transaction, now: u64) -> Result<TxStatus, String> {
        if tx.ledger_id != self.config.ledger_id {
            return Err(format!("tx {} addressed to {}", tx.tx_id, tx.ledger_id));
        }
        if !tx.id_matches() {
            return Err(format!("tx id {} does not match contents", tx.tx_id));
        }
        if !tx.signature_valid() {
            return Err(format!("bad signature on {}", tx.tx_id));
        }
        if tx.timestamp > now {
            return Err(format!("tx {} timestamped after its block", tx.tx_id));
        }
        let who = tx.submitter();
        if self.nonces.get(&who).is_some_and(|l| tx.nonce <= *l) {
            return Err(format!("non-increasing nonce {} for {}", tx.nonce, who));
        }
        admission_check(self.config, self.state.authority, &self.state.members, tx)
            .map_err(|e| e.to_string())?;
        self.nonces.insert(who, tx.nonce);
        let ctx = CallContext {
            submitter: who,
            now,
            tx_id: tx.tx_id,
        };
        Ok(match execute_call(&mut self.state, &tx.payload, &ctx) {
            Ok(ret) => TxStatus::Applied { ret },
            Err(error) => TxStatus::Failed { error },
        })
    }
}

/// Checks links, roots, signatures, admission and replayed execution of every
/// block. A broken link between `h-1` and `h` is reported at `h-1`, the block
/// whose committed hash no longer matches. `head`, when given, pins the hash of
/// the last block.
pub fn verify_blocks(config: &LedgerConfig, blocks: &[Block], head: Option<Digest>) -> ChainReport {
    let tip = blocks.len().saturating_sub(1) as u64;
    if blocks.is_empty() {
        return ChainReport::bad(0, "no genesis block", 0);
    }
    let mut replay = Replayer::new(config);
    let mut prev: Option<(Digest, u64)> = None;
    for (i, b) in blocks.iter().enumerate() {
        let h = i as u64;
        if b.height != h {
            return ChainReport::bad(h, format!("height field {} at position {h}", b.height), tip);
        }
        match prev {
            None => {
                if b.prev_hash != Digest::ZERO || !b.transactions.is_empty() {
                    return ChainReport::bad(0, "malformed genesis", tip);
                }
            }
            Some((prev_hash, prev_time)) => {
                if b.prev_hash != prev_hash {
                    return ChainReport::bad(
                        h - 1,
                        format!("block {h} does not link to block {}", h - 1),
                        tip,
                    );
                }
                if b.sealed_at < prev_time {
                    return ChainReport::bad(h, "sealing time went backwards", tip);
                }
            }
        }
        for st in &b.transactions {
            match replay.apply(&st.tx, b.sealed_at) {
                Err(why) => return ChainReport::bad(h, why, tip),
                Ok(status) if status != st.status => {
                    return ChainReport::bad(
                        h,
                        format!("recorded status of {} differs on replay", st.tx.tx_id),
                        tip,
                    )
                }
                Ok(_) => {}
            }
        }
        if b.compute_tx_root() != b.tx_root {
            return ChainReport::bad(h, "tx_root mismatch", tip);
        }
        if replay.state.root() != b.state_root {
            return ChainReport::bad(h, "state_root mismatch", tip);
        }
        prev = Some((b.hash(), b.sealed_at));
    }
    if let (Some(expected), Some((actual, _))) = (head, prev) {
        if expected != actual {
            return ChainReport::bad(tip, "tip hash differs from recorded head", tip);
        }
    }
    ChainReport::good(tip)
}

/// State root after each block, recomputed by replay regardless of what the
/// blocks claim. Stops at the first transaction that fails admission.
pub fn replay_state_roots(config: &LedgerConfig, blocks: &[Block]) -> Vec<Digest> {
    let mut replay = Replayer::new(config);
    let mut roots = Vec::with_capacity(blocks.len());
    for (i, b) in blocks.iter().enumerate() {
        if i > 0 {
            for st in &b.transactions {
                if replay.apply(&st.tx, b.sealed_at).is_err() {
                    return roots;
                }
            }
        }
        roots.push(replay.state.root());
    }
    roots
}
