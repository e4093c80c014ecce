//! Deterministic simulator of a federation of emulated ledgers.
//!
//! Layers, bottom-up: canonical encoding and hashing, ledgers with Merkle
//! proofs, native contracts, interledger swaps and anchoring, the federation
//! adapter, the two pilot applications and a scenario harness.

pub mod adapter;
pub mod codec;
pub mod contracts;
pub mod energy;
pub mod foodchain;
pub mod harness;
pub mod hash;
pub mod identity;
pub mod interledger;
pub mod ledger;
pub mod merkle;
pub mod par;

pub use hash::{sha256, Digest};
pub use identity::{Address, Keypair};
