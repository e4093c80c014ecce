//! Deterministic native contracts executed by ledgers while sealing.
//!
//! Execution is a pure function of `(state, call, ctx)`. A failing call leaves
//! the state untouched: every handler validates completely before its first
//! write.

pub mod anchor;
pub mod htlc;
pub mod market;
pub mod membership;
pub mod provenance;
pub mod token;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::canonical_struct;
use crate::codec::{Canonical, DecodeError, Decoder, Encoder};
use crate::hash::Digest;
use crate::identity::Address;

pub use anchor::{AnchorState, CheckpointRecord};
pub use htlc::{EscrowStatus, HtlcEscrow};
pub use market::MarketState;
pub use membership::MembershipChange;
pub use provenance::ProvenanceState;
pub use token::TokenState;

/// A contract argument value. Arguments travel through the JSON API as-is.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Int(i64),
    Str(String),
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int(v)
    }
}

impl From<u64> for Value {
    fn from(v: u64) -> Self {
        Value::Int(i64::try_from(v).expect("value exceeds i64::MAX"))
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Str(v.to_string())
    }
}

impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::Str(v)
    }
}

impl From<Address> for Value {
    fn from(v: Address) -> Self {
        Value::Str(v.to_hex())
    }
}

impl From<Digest> for Value {
    fn from(v: Digest) -> Self {
        Value::Str(v.to_hex())
    }
}

impl Canonical for Value {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            Value::Int(v) => {
                enc.put_u8(0);
                enc.put_i64(*v);
            }
            Value::Str(s) => {
                enc.put_u8(1);
                enc.put_str(s);
            }
        }
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let at = dec.position();
        match dec.get_u8()? {
            0 => Ok(Value::Int(dec.get_i64()?)),
            1 => Ok(Value::Str(dec.get_str()?)),
            tag => Err(DecodeError::BadTag {
                what: "value",
                tag,
                at,
            }),
        }
    }
}

pub type Args = BTreeMap<String, Value>;

/// A call to a named contract method.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContractCall {
    pub contract: String,
    pub method: String,
    #[serde(default)]
    pub args: Args,
}

canonical_struct!(ContractCall {
    contract,
    method,
    args
});

impl ContractCall {
    pub fn new(contract: &str, method: &str) -> Self {
        Self {
            contract: contract.to_string(),
            method: method.to_string(),
            args: Args::new(),
        }
    }

    pub fn arg(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.args.insert(key.to_string(), value.into());
        self
    }

    pub fn is_anchor(&self) -> bool {
        self.contract == anchor::NAME
    }

    pub fn is_membership(&self) -> bool {
        self.contract == membership::NAME
    }
}

macro_rules! error_kinds {
    ($($kind:ident),* $(,)?) => {
        /// Stable failure codes recorded on-chain for failed transactions.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        pub enum ErrorKind { $($kind),* }

        impl ErrorKind {
            pub fn as_str(&self) -> &'static str {
                match self { $(ErrorKind::$kind => stringify!($kind)),* }
            }

            pub fn parse(s: &str) -> Option<Self> {
                match s { $(stringify!($kind) => Some(ErrorKind::$kind),)* _ => None }
            }
        }
    };
}

error_kinds!(
    UnknownContract,
    UnknownMethod,
    MissingArg,
    BadArg,
    NegativeAmount,
    NonPositive,
    Overflow,
    InsufficientBalance,
    NotTokenAuthority,
    EscrowExists,
    UnknownEscrow,
    TimelockInPast,
    WrongPreimage,
    Expired,
    NotLocked,
    NotYetExpired,
    NotAuthority,
    AlreadyMember,
    NotAMember,
    StaleCheckpoint,
    DuplicateEvent,
    UnknownLot,
    LotExists,
    Unauthorized,
    NotDso,
    BadTimeslot,
    UnknownRequest,
    RequestNotOpen,
    OverAsk,
    UnderCommit,
    BiddingOpen,
    NotClosed,
    UnknownEv,
    NotACandidate,
    AlreadyAssigned,
    NotAssigned,
    NoMeterData,
    NotEnded,
    AlreadySettled,
    NotPaid,
    EscrowAlreadySet,
);

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Canonical for ErrorKind {
    fn encode(&self, enc: &mut Encoder) {
        enc.put_str(self.as_str())
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let s = dec.get_str()?;
        ErrorKind::parse(&s).ok_or(DecodeError::Invalid(format!("error kind {s}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{kind}: {detail}")]
pub struct ContractError {
    pub kind: ErrorKind,
    pub detail: String,
}

canonical_struct!(ContractError { kind, detail });

impl ContractError {
    pub fn new(kind: ErrorKind, detail: impl Into<String>) -> Self {
        Self {
            kind,
            detail: detail.into(),
        }
    }
}

pub(crate) fn fail<T>(kind: ErrorKind, detail: impl Into<String>) -> Result<T, ContractError> {
    Err(ContractError::new(kind, detail))
}

/// Execution context supplied by the sealing ledger.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallContext {
    pub submitter: Address,
    pub now: u64,
    pub tx_id: Digest,
}

/// Typed accessors over call arguments.
pub(crate) trait ArgsExt {
    fn value(&self, key: &str) -> Result<&Value, ContractError>;
    fn int(&self, key: &str) -> Result<i64, ContractError>;
    fn amount(&self, key: &str) -> Result<u64, ContractError>;
    fn string(&self, key: &str) -> Result<&str, ContractError>;
    fn opt_string(&self, key: &str) -> Result<Option<&str>, ContractError>;
    fn address(&self, key: &str) -> Result<Address, ContractError>;
    fn digest(&self, key: &str) -> Result<Digest, ContractError>;
}

impl ArgsExt for Args {
    fn value(&self, key: &str) -> Result<&Value, ContractError> {
        self.get(key)
            .ok_or_else(|| ContractError::new(ErrorKind::MissingArg, key))
    }

    fn int(&self, key: &str) -> Result<i64, ContractError> {
        match self.value(key)? {
            Value::Int(v) => Ok(*v),
            Value::Str(_) => fail(ErrorKind::BadArg, format!("{key} must be an integer")),
        }
    }

    fn amount(&self, key: &str) -> Result<u64, ContractError> {
        let v = self.int(key)?;
        u64::try_from(v).or_else(|_| fail(ErrorKind::NegativeAmount, format!("{key}={v}")))
    }

    fn string(&self, key: &str) -> Result<&str, ContractError> {
        match self.value(key)? {
            Value::Str(s) => Ok(s),
            Value::Int(_) => fail(ErrorKind::BadArg, format!("{key} must be a string")),
        }
    }

    fn opt_string(&self, key: &str) -> Result<Option<&str>, ContractError> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Str(s)) => Ok(Some(s)),
            Some(Value::Int(_)) => fail(ErrorKind::BadArg, format!("{key} must be a string")),
        }
    }

    fn address(&self, key: &str) -> Result<Address, ContractError> {
        let s = self.string(key)?;
        Address::from_hex(s)
            .or_else(|_| fail(ErrorKind::BadArg, format!("{key} is not an address")))
    }

    fn digest(&self, key: &str) -> Result<Digest, ContractError> {
        let s = self.string(key)?;
        Digest::from_hex(s).or_else(|_| {
            fail(
                ErrorKind::BadArg,
                format!("{key} is not a 32-byte hex digest"),
            )
        })
    }
}

/// The full contract state of one ledger. Its canonical digest is the block
/// `state_root`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct WorldState {
    pub authority: Option<Address>,
    pub token_authority: Option<Address>,
    pub members: BTreeSet<Address>,
    pub membership_log: Vec<MembershipChange>,
    pub tokens: TokenState,
    pub escrows: BTreeMap<String, HtlcEscrow>,
    pub provenance: ProvenanceState,
    pub market: MarketState,
    pub anchors: AnchorState,
}

canonical_struct!(WorldState {
    authority,
    token_authority,
    members,
    membership_log,
    tokens,
    escrows,
    provenance,
    market,
    anchors,
});

impl WorldState {
    pub fn root(&self) -> Digest {
        self.canonical_digest()
    }

    /// Σ balances + Σ locked escrow amounts = minted, for every asset.
    pub fn conservation_holds(&self) -> bool {
        self.conservation_violations().is_empty()
    }

    pub fn conservation_violations(&self) -> Vec<String> {
        let mut held: BTreeMap<&str, u128> = BTreeMap::new();
        for (asset, balances) in &self.tokens.balances {
            *held.entry(asset).or_default() += balances.values().map(|v| *v as u128).sum::<u128>();
        }
        for e in self
            .escrows
            .values()
            .filter(|e| e.status == EscrowStatus::Locked)
        {
            *held.entry(&e.asset).or_default() += e.amount as u128;
        }
        let mut out = Vec::new();
        let assets: BTreeSet<&str> = held
            .keys()
            .copied()
            .chain(self.tokens.minted.keys().map(String::as_str))
            .collect();
        for asset in assets {
            let h = held.get(asset).copied().unwrap_or(0);
            let m = self.tokens.minted.get(asset).copied().unwrap_or(0) as u128;
            if h != m {
                out.push(format!("asset {asset}: held {h} != minted {m}"));
            }
        }
        out
    }
}

/// A native contract registered in the runtime.
pub trait Contract: Sync {
    fn name(&self) -> &'static str;
    fn call(
        &self,
        state: &mut WorldState,
        method: &str,
        args: &Args,
        ctx: &CallContext,
    ) -> Result<String, ContractError>;
}

static REGISTRY: &[&dyn Contract] = &[
    &token::Token,
    &htlc::Htlc,
    &provenance::Provenance,
    &market::Market,
    &anchor::Anchor,
    &membership::Membership,
];

pub fn registered_contracts() -> impl Iterator<Item = &'static str> {
    REGISTRY.iter().map(|c| c.name())
}

/// Executes one call. On error the state is unchanged.
pub fn execute_call(
    state: &mut WorldState,
    call: &ContractCall,
    ctx: &CallContext,
) -> Result<String, ContractError> {
    let contract = REGISTRY
        .iter()
        .find(|c| c.name() == call.contract)
        .ok_or_else(|| ContractError::new(ErrorKind::UnknownContract, call.contract.clone()))?;
    contract.call(state, &call.method, &call.args, ctx)
}

pub(crate) fn unknown_method<T>(contract: &str, method: &str) -> Result<T, ContractError> {
    fail(ErrorKind::UnknownMethod, format!("{contract}.{method}"))
}
