use serde::Serialize;

use crate::canonical_struct;
use crate::codec::{Canonical, DecodeError, Decoder, Encoder};
use crate::contracts::{ContractCall, ContractError};
use crate::hash::Digest;
use crate::identity::{Address, Keypair, PublicKey, Signature};

/// A signed contract call addressed to one ledger.
///
/// `tx_id` is the digest of the canonical encoding of every field except
/// `tx_id` and `signature`; the signature is over the `tx_id` bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Transaction {
    pub tx_id: Digest,
    pub ledger_id: String,
    pub public_key: PublicKey,
    pub nonce: u64,
    pub payload: ContractCall,
    pub timestamp: u64,
    pub signature: Signature,
}

canonical_struct!(Transaction {
    tx_id,
    ledger_id,
    public_key,
    nonce,
    payload,
    timestamp,
    signature
});

impl Transaction {
    pub fn signed(
        key: &Keypair,
        ledger_id: &str,
        nonce: u64,
        payload: ContractCall,
        timestamp: u64,
    ) -> Self {
        let public_key = key.public_key();
        let tx_id = body_digest(ledger_id, &public_key, nonce, &payload, timestamp);
        let signature = key.sign(&tx_id.0);
        Self {
            tx_id,
            ledger_id: ledger_id.to_string(),
            public_key,
            nonce,
            payload,
            timestamp,
            signature,
        }
    }

    pub fn submitter(&self) -> Address {
        Address::from_public_key(&self.public_key)
    }

    pub fn compute_id(&self) -> Digest {
        body_digest(
            &self.ledger_id,
            &self.public_key,
            self.nonce,
            &self.payload,
            self.timestamp,
        )
    }

    pub fn id_matches(&self) -> bool {
        self.compute_id() == self.tx_id
    }

    pub fn signature_valid(&self) -> bool {
        self.public_key.verify(&self.tx_id.0, &self.signature)
    }
}

fn body_digest(
    ledger_id: &str,
    pk: &PublicKey,
    nonce: u64,
    payload: &ContractCall,
    ts: u64,
) -> Digest {
    let mut enc = Encoder::new();
    enc.put_str(ledger_id);
    pk.encode(&mut enc);
    enc.put_u64(nonce);
    payload.encode(&mut enc);
    enc.put_u64(ts);
    crate::hash::sha256(&enc.into_bytes())
}

/// Execution result recorded next to each sealed transaction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TxStatus {
    Applied { ret: String },
    Failed { error: ContractError },
}

impl TxStatus {
    pub fn is_applied(&self) -> bool {
        matches!(self, TxStatus::Applied { .. })
    }
}

impl Canonical for TxStatus {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            TxStatus::Applied { ret } => {
                enc.put_u8(0);
                enc.put_str(ret);
            }
            TxStatus::Failed { error } => {
                enc.put_u8(1);
                error.encode(enc);
            }
        }
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let at = dec.position();
        match dec.get_u8()? {
            0 => Ok(TxStatus::Applied {
                ret: dec.get_str()?,
            }),
            1 => Ok(TxStatus::Failed {
                error: ContractError::decode(dec)?,
            }),
            tag => Err(DecodeError::BadTag {
                what: "tx status",
                tag,
                at,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SealedTx {
    pub tx: Transaction,
    pub status: TxStatus,
}

canonical_struct!(SealedTx { tx, status });
