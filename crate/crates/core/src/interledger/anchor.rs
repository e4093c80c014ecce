//! Checkpoint anchoring of a private ledger's state root onto a public ledger.

use serde::Serialize;
use thiserror::Error;

use crate::contracts::anchor::{self, CheckpointRecord};
use crate::contracts::ContractCall;
use crate::hash::Digest;
use crate::identity::Keypair;
use crate::ledger::{replay_state_roots, Block, Ledger, LedgerConfig, LedgerError, Network};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AnchoredIn {
    pub ledger: String,
    pub tx_id: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AnchorCheckpoint {
    pub source_ledger: String,
    pub height: u64,
    pub state_root: Digest,
    pub anchored_in: AnchoredIn,
    pub anchored_at: u64,
}

impl AnchorCheckpoint {
    fn from_record(source: &str, public: &str, r: &CheckpointRecord) -> Self {
        Self {
            source_ledger: source.to_string(),
            height: r.height,
            state_root: r.state_root,
            anchored_in: AnchoredIn {
                ledger: public.to_string(),
                tx_id: r.tx_id,
            },
            anchored_at: r.anchored_at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnchorError {
    #[error("no new blocks on {source_ledger} since height {height}")]
    NothingNew { source_ledger: String, height: u64 },
    #[error("public ledger rejected the checkpoint: {0}")]
    PublicLedgerRejected(String),
    #[error("no checkpoints of {0}")]
    NoCheckpoints(String),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

/// Checkpoints of `source` recorded in the public ledger's state, oldest first.
pub fn checkpoints(public: &Ledger, source: &str) -> Vec<AnchorCheckpoint> {
    public
        .state()
        .anchors
        .checkpoints
        .get(source)
        .map(|v| {
            v.iter()
                .map(|r| AnchorCheckpoint::from_record(source, public.id(), r))
                .collect()
        })
        .unwrap_or_default()
}

/// Commits the source tip's state root onto the public ledger and seals it.
pub fn anchor_checkpoint(
    net: &mut Network,
    source: &str,
    public: &str,
    signer: &Keypair,
) -> Result<AnchorCheckpoint, AnchorError> {
    let src = net.ledger(source)?;
    let (height, state_root) = (src.height(), src.tip().state_root);
    let last = checkpoints(net.ledger(public)?, source)
        .last()
        .map(|c| c.height);
    if last.is_some_and(|h| h >= height) || (last.is_none() && height == 0) {
        return Err(AnchorError::NothingNew {
            source_ledger: source.to_string(),
            height,
        });
    }
    let call = ContractCall::new(anchor::NAME, "commit")
        .arg("source", source)
        .arg("height", height)
        .arg("state_root", state_root);
    match net.transact(public, signer, call) {
        Ok(Ok(_)) => {}
        Ok(Err(e)) => return Err(AnchorError::PublicLedgerRejected(e.to_string())),
        Err(e @ LedgerError::UnknownLedger(_)) => return Err(e.into()),
        Err(e) => return Err(AnchorError::PublicLedgerRejected(e.to_string())),
    }
    Ok(checkpoints(net.ledger(public)?, source)
        .pop()
        .expect("just anchored"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DivergentCheckpoint {
    pub index: usize,
    pub height: u64,
    pub anchored_root: Digest,
    /// None when replay could not reach this height.
    pub recomputed_root: Option<Digest>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AnchorReport {
    pub ok: bool,
    pub source_ledger: String,
    pub checked: usize,
    pub first_divergent_checkpoint: Option<DivergentCheckpoint>,
}

/// Recomputes the source chain's state roots by replay and compares them to
/// the anchored ones. Read-only.
pub fn verify_anchors_blocks(
    config: &LedgerConfig,
    blocks: &[Block],
    public: &Ledger,
) -> Result<AnchorReport, AnchorError> {
    let source = config.ledger_id.as_str();
    let cps = checkpoints(public, source);
    if cps.is_empty() {
        return Err(AnchorError::NoCheckpoints(source.to_string()));
    }
    let roots = replay_state_roots(config, blocks);
    let first = cps.iter().enumerate().find_map(|(index, cp)| {
        let recomputed = roots.get(cp.height as usize).copied();
        (recomputed != Some(cp.state_root)).then_some(DivergentCheckpoint {
            index,
            height: cp.height,
            anchored_root: cp.state_root,
            recomputed_root: recomputed,
        })
    });
    Ok(AnchorReport {
        ok: first.is_none(),
        source_ledger: source.to_string(),
        checked: cps.len(),
        first_divergent_checkpoint: first,
    })
}

pub fn verify_anchors(
    net: &Network,
    source: &str,
    public: &str,
) -> Result<AnchorReport, AnchorError> {
    let src = net.ledger(source)?;
    verify_anchors_blocks(src.config(), src.blocks(), net.ledger(public)?)
}
