//! Binary Merkle tree over transaction ids.
//!
//! Leaves are the tx ids themselves. Interior nodes hash `0x01 || left || right`.
//! An odd level is padded by duplicating its last node. The root of the empty
//! tree is `sha256("")`.

use serde::{Deserialize, Serialize};

use crate::hash::{sha256, sha256_concat, Digest};

const NODE_PREFIX: u8 = 0x01;

pub fn empty_root() -> Digest {
    sha256(b"")
}

fn node(left: &Digest, right: &Digest) -> Digest {
    sha256_concat(&[&[NODE_PREFIX], &left.0, &right.0])
}

fn next_level(level: &[Digest]) -> Vec<Digest> {
    level
        .chunks(2)
        .map(|pair| match pair {
            [l, r] => node(l, r),
            [l] => node(l, l),
            _ => unreachable!(),
        })
        .collect()
}

pub fn root(leaves: &[Digest]) -> Digest {
    if leaves.is_empty() {
        return empty_root();
    }
    let mut level = leaves.to_vec();
    while level.len() > 1 {
        level = next_level(&level);
    }
    level[0]
}

/// Sibling path for the leaf at `index`, ordered leaf to root.
pub fn path(leaves: &[Digest], index: usize) -> Option<Vec<Digest>> {
    if index >= leaves.len() {
        return None;
    }
    let mut siblings = Vec::new();
    let mut level = leaves.to_vec();
    let mut idx = index;
    while level.len() > 1 {
        let sib = if idx.is_multiple_of(2) {
            *level.get(idx + 1).unwrap_or(&level[idx])
        } else {
            level[idx - 1]
        };
        siblings.push(sib);
        level = next_level(&level);
        idx /= 2;
    }
    Some(siblings)
}

/// Folds a leaf with its sibling path back up to a root.
pub fn fold(leaf: Digest, index: usize, siblings: &[Digest]) -> Digest {
    let mut acc = leaf;
    let mut idx = index;
    for sib in siblings {
        acc = if idx.is_multiple_of(2) {
            node(&acc, sib)
        } else {
            node(sib, &acc)
        };
        idx /= 2;
    }
    acc
}

/// Proof that a transaction is included in a sealed block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InclusionProof {
    pub tx_id: Digest,
    pub leaf_index: u64,
    pub siblings: Vec<Digest>,
    pub height: u64,
    pub ledger_id: String,
}
