//! Signing identities. An [`Address`] is the SHA-256 digest of an Ed25519
//! verifying key.

use std::fmt;
use std::str::FromStr;

use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::codec::{Canonical, DecodeError, Decoder, Encoder};
use crate::hash::{sha256, sha256_concat, Digest};

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Address(pub [u8; 32]);

impl Address {
    pub fn from_public_key(pk: &PublicKey) -> Self {
        Address(sha256(&pk.0).0)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, hex::FromHexError> {
        Ok(Address(Digest::from_hex(s)?.0))
    }
}

impl fmt::Debug for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Address({})", &self.to_hex()[..12])
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl FromStr for Address {
    type Err = hex::FromHexError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Address::from_hex(s)
    }
}

impl Serialize for Address {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Address {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Address::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

impl Canonical for Address {
    fn encode(&self, enc: &mut Encoder) {
        enc.put_fixed(&self.0)
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Address(dec.get_fixed()?))
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct PublicKey(pub [u8; 32]);

impl Canonical for PublicKey {
    fn encode(&self, enc: &mut Encoder) {
        enc.put_fixed(&self.0)
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(PublicKey(dec.get_fixed()?))
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Signature(pub [u8; 64]);

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({}..)", hex::encode(&self.0[..6]))
    }
}

impl Canonical for Signature {
    fn encode(&self, enc: &mut Encoder) {
        enc.put_fixed(&self.0)
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Signature(dec.get_fixed()?))
    }
}

impl Serialize for PublicKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl Serialize for Signature {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl PublicKey {
    pub fn verify(&self, msg: &[u8], sig: &Signature) -> bool {
        let Ok(vk) = VerifyingKey::from_bytes(&self.0) else {
            return false;
        };
        let sig = ed25519_dalek::Signature::from_bytes(&sig.0);
        vk.verify(msg, &sig).is_ok()
    }
}

/// An Ed25519 signing keypair.
#[derive(Clone)]
pub struct Keypair {
    signing: SigningKey,
}

impl fmt::Debug for Keypair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Keypair")
            .field("address", &self.address())
            .finish()
    }
}

impl Keypair {
    pub fn from_seed(seed: [u8; 32]) -> Self {
        Self {
            signing: SigningKey::from_bytes(&seed),
        }
    }

    /// Deterministic key for a named actor. Scenario files refer to actors by
    /// label, so every run derives the same identities.
    pub fn from_label(label: &str) -> Self {
        Self::from_seed(sha256_concat(&[b"fedchain/key/", label.as_bytes()]).0)
    }

    pub fn public_key(&self) -> PublicKey {
        PublicKey(self.signing.verifying_key().to_bytes())
    }

    pub fn address(&self) -> Address {
        Address::from_public_key(&self.public_key())
    }

    pub fn sign(&self, msg: &[u8]) -> Signature {
        Signature(self.signing.sign(msg).to_bytes())
    }
}

/// Keys of the actors a driver may act for, by address and by label.
#[derive(Debug, Clone, Default)]
pub struct Keyring {
    by_address: std::collections::BTreeMap<Address, Keypair>,
    labels: std::collections::BTreeMap<String, Address>,
}

impl Keyring {
    pub fn new() -> Self {
        Self::default()
    }

    /// Derives and registers the key for `label`; returns its address.
    pub fn add_label(&mut self, label: &str) -> Address {
        let k = Keypair::from_label(label);
        let a = k.address();
        self.by_address.insert(a, k);
        self.labels.insert(label.to_string(), a);
        a
    }

    pub fn get(&self, who: &Address) -> Option<&Keypair> {
        self.by_address.get(who)
    }

    pub fn by_label(&self, label: &str) -> Option<&Keypair> {
        self.labels.get(label).and_then(|a| self.by_address.get(a))
    }

    pub fn address_of(&self, label: &str) -> Option<Address> {
        self.labels.get(label).copied()
    }

    pub fn label_of(&self, who: &Address) -> Option<&str> {
        self.labels
            .iter()
            .find(|(_, a)| *a == who)
            .map(|(l, _)| l.as_str())
    }

    pub fn labels(&self) -> impl Iterator<Item = (&str, Address)> {
        self.labels.iter().map(|(l, a)| (l.as_str(), *a))
    }
}
