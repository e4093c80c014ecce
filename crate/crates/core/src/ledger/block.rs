use serde::Serialize;

use super::tx::SealedTx;
use crate::canonical_struct;
use crate::codec::Canonical;
use crate::hash::Digest;
use crate::merkle;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Block {
    pub height: u64,
    /// all-zero for genesis
    pub prev_hash: Digest,
    pub tx_root: Digest,
    pub state_root: Digest,
    pub sealed_at: u64,
    pub transactions: Vec<SealedTx>,
}

canonical_struct!(Block {
    height,
    prev_hash,
    tx_root,
    state_root,
    sealed_at,
    transactions
});

impl Block {
    pub fn hash(&self) -> Digest {
        self.canonical_digest()
    }

    pub fn tx_ids(&self) -> Vec<Digest> {
        self.transactions.iter().map(|s| s.tx.tx_id).collect()
    }

    pub fn compute_tx_root(&self) -> Digest {
        merkle::root(&self.tx_ids())
    }
}
