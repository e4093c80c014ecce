//! A set of ledgers sharing one logical clock.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::{Block, ChainReport, Ledger, LedgerConfig, LedgerError, Transaction, TxStatus};
use crate::contracts::membership::MembershipAction;
use crate::contracts::{ContractCall, ContractError};
use crate::hash::Digest;
use crate::identity::{Address, Keypair};
use crate::merkle::InclusionProof;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Receipt {
    pub accepted: bool,
    pub position: usize,
    pub tx_id: Digest,
}

/// The only write path adapters get: submit a transaction, read the clock.
pub trait TxSink {
    fn submit_tx(&mut self, ledger_id: &str, tx: Transaction) -> Result<Receipt, LedgerError>;
    fn now(&self) -> u64;
}

/// Called with the ledger right after each block is sealed.
pub type SealObserver = Box<dyn FnMut(&Ledger) + Send>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SealEvent {
    pub ledger: String,
    pub height: u64,
    pub at: u64,
}

#[derive(Default)]
pub struct Network {
    ledgers: BTreeMap<String, Ledger>,
    now: u64,
    seal_log: Vec<SealEvent>,
    observer: Option<SealObserver>,
}

impl std::fmt::Debug for Network {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network")
            .field("now", &self.now)
            .field("ledgers", &self.ledgers.keys())
            .finish()
    }
}

impl Network {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn advance(&mut self, ms: u64) {
        self.now += ms;
    }

    /// Moves the clock forward to `t`; never backwards.
    pub fn advance_to(&mut self, t: u64) {
        self.now = self.now.max(t);
    }

    pub fn set_seal_observer(&mut self, observer: SealObserver) {
        self.observer = Some(observer);
    }

    pub fn add_ledger(&mut self, config: LedgerConfig) -> Result<(), LedgerError> {
        if self.ledgers.contains_key(&config.ledger_id) {
            return Err(LedgerError::DuplicateLedger(config.ledger_id));
        }
        let ledger = Ledger::new(config, self.now)?;
        self.ledgers.insert(ledger.id().to_string(), ledger);
        Ok(())
    }

    pub fn insert_ledger(&mut self, ledger: Ledger) -> Result<(), LedgerError> {
        if self.ledgers.contains_key(ledger.id()) {
            return Err(LedgerError::DuplicateLedger(ledger.id().to_string()));
        }
        self.ledgers.insert(ledger.id().to_string(), ledger);
        Ok(())
    }

    pub fn ledger(&self, id: &str) -> Result<&Ledger, LedgerError> {
        self.ledgers
            .get(id)
            .ok_or_else(|| LedgerError::UnknownLedger(id.to_string()))
    }

    fn ledger_mut(&mut self, id: &str) -> Result<&mut Ledger, LedgerError> {
        self.ledgers
            .get_mut(id)
            .ok_or_else(|| LedgerError::UnknownLedger(id.to_string()))
    }

    pub fn ledgers(&self) -> impl Iterator<Item = &Ledger> {
        self.ledgers.values()
    }

    pub fn ledger_ids(&self) -> Vec<String> {
        self.ledgers.keys().cloned().collect()
    }

    pub fn seal_log(&self) -> &[SealEvent] {
        &self.seal_log
    }

    pub fn submit(&mut self, ledger_id: &str, tx: Transaction) -> Result<Receipt, LedgerError> {
        self.ledger_mut(ledger_id)?.submit(tx)
    }

    /// Signs `call` with the next nonce for `key` and submits it.
    pub fn submit_call(
        &mut self,
        ledger_id: &str,
        key: &Keypair,
        call: ContractCall,
    ) -> Result<Digest, LedgerError> {
        let now = self.now;
        let ledger = self.ledger_mut(ledger_id)?;
        let nonce = ledger.next_nonce(&key.address());
        let tx = Transaction::signed(key, ledger_id, nonce, call, now);
        Ok(ledger.submit(tx)?.tx_id)
    }

    pub fn seal(&mut self, ledger_id: &str) -> Result<&Block, LedgerError> {
        let now = self.now;
        let ledger = self
            .ledgers
            .get_mut(ledger_id)
            .ok_or_else(|| LedgerError::UnknownLedger(ledger_id.into()))?;
        let height = ledger.seal(now).height;
        self.seal_log.push(SealEvent {
            ledger: ledger_id.to_string(),
            height,
            at: now,
        });
        if let Some(obs) = self.observer.as_mut() {
            obs(ledger);
        }
        Ok(ledger.tip())
    }

    /// Seals every ledger that has pending transactions, in id order.
    pub fn seal_pending(&mut self) -> Vec<String> {
        let ids: Vec<String> = self
            .ledgers
            .iter()
            .filter(|(_, l)| !l.pending().is_empty())
            .map(|(id, _)| id.clone())
            .collect();
        for id in &ids {
            self.seal(id).expect("id taken from registry");
        }
        ids
    }

    /// Submits, seals, and returns the call's on-chain result.
    pub fn transact(
        &mut self,
        ledger_id: &str,
        key: &Keypair,
        call: ContractCall,
    ) -> Result<Result<String, ContractError>, LedgerError> {
        let tx_id = self.submit_call(ledger_id, key, call)?;
        self.seal(ledger_id)?;
        let (_, st) = self
            .ledger(ledger_id)?
            .find_sealed(&tx_id)
            .expect("just sealed");
        Ok(match &st.status {
            TxStatus::Applied { ret } => Ok(ret.clone()),
            TxStatus::Failed { error } => Err(error.clone()),
        })
    }

    pub fn update_membership(
        &mut self,
        ledger_id: &str,
        authority: &Keypair,
        action: MembershipAction,
        member: Address,
    ) -> Result<BTreeSet<Address>, LedgerError> {
        let now = self.now;
        self.ledger_mut(ledger_id)?
            .update_membership(authority, action, member, now)
    }

    pub fn verify_chain(&self, ledger_id: &str) -> Result<ChainReport, LedgerError> {
        Ok(self.ledger(ledger_id)?.verify_chain())
    }

    pub fn inclusion_proof(
        &self,
        ledger_id: &str,
        tx_id: &Digest,
    ) -> Result<InclusionProof, LedgerError> {
        self.ledger(ledger_id)?.inclusion_proof(tx_id)
    }
}

impl TxSink for Network {
    fn submit_tx(&mut self, ledger_id: &str, tx: Transaction) -> Result<Receipt, LedgerError> {
        self.submit(ledger_id, tx)
    }

    fn now(&self) -> u64 {
        self.now
    }
}
