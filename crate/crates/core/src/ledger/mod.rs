//! Emulated append-only ledgers.
//!
//! Each ledger has a single deterministic sequencer: transactions are admitted
//! into a pending queue in arrival order and executed against the contract
//! runtime when the ledger is sealed. Three kinds exist: open (any signer),
//! permissioned (members only, membership controlled by one authority) and
//! anchor-only (accepts nothing but anchor commitments).

mod block;
pub mod network;
pub mod store;
mod tx;
mod verify;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use block::Block;
pub use network::{Network, Receipt, SealObserver, TxSink};
pub use tx::{SealedTx, Transaction, TxStatus};
pub use verify::{replay_state_roots, verify_blocks, ChainReport};

use crate::contracts::membership::MembershipAction;
use crate::contracts::{execute_call, ArgsExt, CallContext, ContractCall, WorldState};
use crate::hash::Digest;
use crate::identity::Address;
use crate::merkle::{self, InclusionProof};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LedgerKind {
    Open,
    Permissioned,
    AnchorOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerConfig {
    pub ledger_id: String,
    pub kind: LedgerKind,
    /// Genesis member set; required for permissioned ledgers.
    #[serde(default)]
    pub members: BTreeSet<Address>,
    /// Membership controller; required for permissioned ledgers.
    #[serde(default)]
    pub authority: Option<Address>,
    #[serde(default)]
    pub token_authority: Option<Address>,
    /// Reads restricted to members. Enforced by the gateway only.
    #[serde(default)]
    pub restricted_read: bool,
}

impl LedgerConfig {
    pub fn open(id: &str) -> Self {
        Self {
            ledger_id: id.to_string(),
            kind: LedgerKind::Open,
            members: BTreeSet::new(),
            authority: None,
            token_authority: None,
            restricted_read: false,
        }
    }

    pub fn permissioned(
        id: &str,
        authority: Address,
        members: impl IntoIterator<Item = Address>,
    ) -> Self {
        Self {
            kind: LedgerKind::Permissioned,
            members: members.into_iter().collect(),
            authority: Some(authority),
            ..Self::open(id)
        }
    }

    pub fn anchor_only(id: &str) -> Self {
        Self {
            kind: LedgerKind::AnchorOnly,
            ..Self::open(id)
        }
    }

    pub fn with_token_authority(mut self, who: Address) -> Self {
        self.token_authority = Some(who);
        self
    }

    pub fn validate(&self) -> Result<(), LedgerError> {
        let id_ok = !self.ledger_id.is_empty()
            && self
                .ledger_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        if !id_ok {
            return Err(LedgerError::InvalidConfig(format!(
                "bad ledger id {:?}",
                self.ledger_id
            )));
        }
        if self.kind == LedgerKind::Permissioned
            && (self.members.is_empty() || self.authority.is_none())
        {
            return Err(LedgerError::InvalidConfig(format!(
                "permissioned ledger {} needs members and an authority",
                self.ledger_id
            )));
        }
        Ok(())
    }

    pub fn genesis_state(&self) -> WorldState {
        WorldState {
            authority: self.authority,
            token_authority: self.token_authority,
            members: if self.kind == LedgerKind::Permissioned {
                self.members.clone()
            } else {
                BTreeSet::new()
            },
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("unknown ledger {0}")]
    UnknownLedger(String),
    #[error("ledger {0} already exists")]
    DuplicateLedger(String),
    #[error("transaction addressed to {got}, submitted to {expected}")]
    WrongLedger { expected: String, got: String },
    #[error("bad signature or transaction id")]
    BadSignature,
    #[error("stale nonce {got} (last accepted {last:?})")]
    StaleNonce { last: Option<u64>, got: u64 },
    #[error("submitter {0} is not a member")]
    NotMember(Address),
    #[error("ledger {0} accepts only anchor payloads")]
    WrongPayloadKind(String),
    #[error("signer is not the membership authority")]
    NotAuthority,
    #[error("ledger {0} is not permissioned")]
    NotPermissioned(String),
    #[error("{0} is already a member")]
    AlreadyMember(Address),
    #[error("{0} is not a member")]
    NotAMember(Address),
    #[error("transaction {0} not found")]
    TxNotFound(Digest),
    #[error("transaction {0} is pending, not sealed")]
    TxPendingNotSealed(Digest),
    #[error("invalid ledger config: {0}")]
    InvalidConfig(String),
    #[error("chain rejected: {0}")]
    Corrupt(String),
    #[error("io: {0}")]
    Io(String),
}

impl LedgerError {
    /// Short stable name, used in submission reports.
    pub fn code(&self) -> &'static str {
        match self {
            LedgerError::UnknownLedger(_) => "UnknownLedger",
            LedgerError::DuplicateLedger(_) => "DuplicateLedger",
            LedgerError::WrongLedger { .. } => "WrongLedger",
            LedgerError::BadSignature => "BadSignature",
            LedgerError::StaleNonce { .. } => "StaleNonce",
            LedgerError::NotMember(_) => "NotMember",
            LedgerError::WrongPayloadKind(_) => "WrongPayloadKind",
            LedgerError::NotAuthority => "NotAuthority",
            LedgerError::NotPermissioned(_) => "NotPermissioned",
            LedgerError::AlreadyMember(_) => "AlreadyMember",
            LedgerError::NotAMember(_) => "NotAMember",
            LedgerError::TxNotFound(_) => "TxNotFound",
            LedgerError::TxPendingNotSealed(_) => "TxPendingNotSealed",
            LedgerError::InvalidConfig(_) => "InvalidConfig",
            LedgerError::Corrupt(_) => "Corrupt",
            LedgerError::Io(_) => "Io",
        }
    }
}

/// Write gating shared by live admission and chain replay.
pub(crate) fn admission_check(
    config: &LedgerConfig,
    authority: Option<Address>,
    members: &BTreeSet<Address>,
    tx: &Transaction,
) -> Result<(), LedgerError> {
    let submitter = tx.submitter();
    let call = &tx.payload;
    match config.kind {
        LedgerKind::AnchorOnly if !call.is_anchor() => {
            Err(LedgerError::WrongPayloadKind(config.ledger_id.clone()))
        }
        LedgerKind::Open | LedgerKind::AnchorOnly if call.is_membership() => {
            Err(LedgerError::NotPermissioned(config.ledger_id.clone()))
        }
        LedgerKind::Permissioned if call.is_membership() => {
            if authority != Some(submitter) {
                return Err(LedgerError::NotAuthority);
            }
            let member = call
                .args
                .address("member")
                .map_err(|e| LedgerError::Corrupt(e.to_string()))?;
            match call.method.as_str() {
                "add" if members.contains(&member) => Err(LedgerError::AlreadyMember(member)),
                "revoke" if !members.contains(&member) => Err(LedgerError::NotAMember(member)),
                "add" | "revoke" => Ok(()),
                other => Err(LedgerError::Corrupt(format!(
                    "unknown membership action {other}"
                ))),
            }
        }
        LedgerKind::Permissioned if !members.contains(&submitter) => {
            Err(LedgerError::NotMember(submitter))
        }
        _ => Ok(()),
    }
}

#[derive(Debug, Clone)]
pub struct Ledger {
    config: LedgerConfig,
    blocks: Vec<Block>,
    hashes: Vec<Digest>,
    pending: Vec<Transaction>,
    state: WorldState,
    /// live member set; membership changes apply at submission
    members: BTreeSet<Address>,
    last_nonce: BTreeMap<Address, u64>,
    sealed_index: HashMap<Digest, (u64, usize)>,
}

impl Ledger {
    pub fn new(config: LedgerConfig, genesis_time: u64) -> Result<Self, LedgerError> {
        config.validate()?;
        let state = config.genesis_state();
        let genesis = Block {
            height: 0,
            prev_hash: Digest::ZERO,
            tx_root: merkle::empty_root(),
            state_root: state.root(),
            sealed_at: genesis_time,
            transactions: Vec::new(),
        };
        Ok(Self {
            members: state.members.clone(),
            hashes: vec![genesis.hash()],
            blocks: vec![genesis],
            pending: Vec::new(),
            state,
            config,
            last_nonce: BTreeMap::new(),
            sealed_index: HashMap::new(),
        })
    }

    /// Rebuilds a ledger from persisted blocks, rejecting any inconsistency.
    pub fn from_blocks(config: LedgerConfig, blocks: Vec<Block>) -> Result<Self, LedgerError> {
        config.validate()?;
        let report = verify_blocks(&config, &blocks, None);
        if !report.ok {
            return Err(LedgerError::Corrupt(report.reason.unwrap_or_default()));
        }
        let mut replay = verify::Replayer::new(&config);
        for b in blocks.iter().skip(1) {
            for st in &b.transactions {
                replay
                    .apply(&st.tx, b.sealed_at)
                    .map_err(LedgerError::Corrupt)?;
            }
        }
        let mut sealed_index = HashMap::new();
        for b in &blocks {
            for (i, st) in b.transactions.iter().enumerate() {
                sealed_index.insert(st.tx.tx_id, (b.height, i));
            }
        }
        let state = replay.state;
        Ok(Self {
            members: state.members.clone(),
            last_nonce: replay.nonces,
            hashes: blocks.iter().map(Block::hash).collect(),
            blocks,
            pending: Vec::new(),
            state,
            config,
            sealed_index,
        })
    }

    pub fn id(&self) -> &str {
        &self.config.ledger_id
    }

    pub fn config(&self) -> &LedgerConfig {
        &self.config
    }

    pub fn kind(&self) -> LedgerKind {
        self.config.kind
    }

    pub fn height(&self) -> u64 {
        self.blocks.len() as u64 - 1
    }

    pub fn tip(&self) -> &Block {
        self.blocks.last().expect("genesis always present")
    }

    pub fn tip_hash(&self) -> Digest {
        *self.hashes.last().expect("genesis always present")
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block(&self, height: u64) -> Option<&Block> {
        self.blocks.get(height as usize)
    }

    pub fn block_hash(&self, height: u64) -> Option<Digest> {
        self.hashes.get(height as usize).copied()
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    pub fn members(&self) -> &BTreeSet<Address> {
        &self.members
    }

    pub fn pending(&self) -> &[Transaction] {
        &self.pending
    }

    pub fn next_nonce(&self, who: &Address) -> u64 {
        self.last_nonce.get(who).map_or(0, |n| n + 1)
    }

    /// Admits a transaction into the pending queue. Rejections leave no trace.
    pub fn submit(&mut self, tx: Transaction) -> Result<Receipt, LedgerError> {
        if tx.ledger_id != self.config.ledger_id {
            return Err(LedgerError::WrongLedger {
                expected: self.config.ledger_id.clone(),
                got: tx.ledger_id,
            });
        }
        if !tx.id_matches() || !tx.signature_valid() {
            return Err(LedgerError::BadSignature);
        }
        let submitter = tx.submitter();
        let last = self.last_nonce.get(&submitter).copied();
        if last.is_some_and(|l| tx.nonce <= l) {
            return Err(LedgerError::StaleNonce {
                last,
                got: tx.nonce,
            });
        }
        admission_check(&self.config, self.config.authority, &self.members, &tx)?;
        if tx.payload.is_membership() {
            let member = tx
                .payload
                .args
                .address("member")
                .expect("checked by admission");
            match tx.payload.method.as_str() {
                "add" => self.members.insert(member),
                _ => self.members.remove(&member),
            };
        }
        self.last_nonce.insert(submitter, tx.nonce);
        let receipt = Receipt {
            accepted: true,
            position: self.pending.len(),
            tx_id: tx.tx_id,
        };
        self.pending.push(tx);
        Ok(receipt)
    }

    /// Applies a membership change signed by the authority; the change takes
    /// effect immediately and is recorded in the next block.
    pub fn update_membership(
        &mut self,
        authority: &crate::identity::Keypair,
        action: MembershipAction,
        member: Address,
        now: u64,
    ) -> Result<BTreeSet<Address>, LedgerError> {
        if self.config.kind != LedgerKind::Permissioned {
            return Err(LedgerError::NotPermissioned(self.config.ledger_id.clone()));
        }
        let call = ContractCall::new(crate::contracts::membership::NAME, action.method())
            .arg("member", member);
        let nonce = self.next_nonce(&authority.address());
        let tx = Transaction::signed(authority, &self.config.ledger_id, nonce, call, now);
        self.submit(tx)?;
        Ok(self.members.clone())
    }

    /// Executes the pending queue in order and appends a block.
    pub fn seal(&mut self, now: u64) -> &Block {
        let sealed_at = now.max(self.tip().sealed_at);
        let height = self.height() + 1;
        let pending = std::mem::take(&mut self.pending);
        let mut transactions = Vec::with_capacity(pending.len());
        for (i, tx) in pending.into_iter().enumerate() {
            let ctx = CallContext {
                submitter: tx.submitter(),
                now: sealed_at,
                tx_id: tx.tx_id,
            };
            let status = match execute_call(&mut self.state, &tx.payload, &ctx) {
                Ok(ret) => TxStatus::Applied { ret },
                Err(error) => TxStatus::Failed { error },
            };
            self.sealed_index.insert(tx.tx_id, (height, i));
            transactions.push(SealedTx { tx, status });
        }
        let block = Block {
            height,
            prev_hash: self.tip_hash(),
            tx_root: merkle::root(&transactions.iter().map(|s| s.tx.tx_id).collect::<Vec<_>>()),
            state_root: self.state.root(),
            sealed_at,
            transactions,
        };
        self.hashes.push(block.hash());
        self.blocks.push(block);
        self.tip()
    }

    pub fn verify_chain(&self) -> ChainReport {
        verify_blocks(&self.config, &self.blocks, Some(self.tip_hash()))
    }

    pub fn find_sealed(&self, tx_id: &Digest) -> Option<(&Block, &SealedTx)> {
        let (h, i) = self.sealed_index.get(tx_id)?;
        let b = &self.blocks[*h as usize];
        Some((b, &b.transactions[*i]))
    }

    pub fn inclusion_proof(&self, tx_id: &Digest) -> Result<InclusionProof, LedgerError> {
        let Some(&(height, index)) = self.sealed_index.get(tx_id) else {
            if self.pending.iter().any(|t| t.tx_id == *tx_id) {
                return Err(LedgerError::TxPendingNotSealed(*tx_id));
            }
            return Err(LedgerError::TxNotFound(*tx_id));
        };
        let block = &self.blocks[height as usize];
        let siblings = merkle::path(&block.tx_ids(), index).expect("index within block");
        Ok(InclusionProof {
            tx_id: *tx_id,
            leaf_index: index as u64,
            siblings,
            height,
            ledger_id: self.config.ledger_id.clone(),
        })
    }
}

/// True iff the proof folds to `block.tx_root` and names the same height and
/// ledger as the block's transactions.
pub fn verify_inclusion(proof: &InclusionProof, block: &Block) -> bool {
    if proof.height != block.height {
        return false;
    }
    if block
        .transactions
        .iter()
        .any(|s| s.tx.ledger_id != proof.ledger_id)
    {
        return false;
    }
    merkle::fold(proof.tx_id, proof.leaf_index as usize, &proof.siblings) == block.tx_root
}
