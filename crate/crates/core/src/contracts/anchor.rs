//! Checkpoints of other ledgers' state roots, committed on a public ledger.

use std::collections::BTreeMap;

use serde::Serialize;

use super::{
    fail, unknown_method, Args, ArgsExt, CallContext, Contract, ContractError, ErrorKind,
    WorldState,
};
use crate::canonical_struct;
use crate::hash::Digest;
use crate::identity::Address;

pub const NAME: &str = "anchor";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CheckpointRecord {
    pub height: u64,
    pub state_root: Digest,
    pub anchored_at: u64,
    pub tx_id: Digest,
    pub submitter: Address,
}

canonical_struct!(CheckpointRecord {
    height,
    state_root,
    anchored_at,
    tx_id,
    submitter
});

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct AnchorState {
    /// source ledger id → checkpoints in ascending height order
    pub checkpoints: BTreeMap<String, Vec<CheckpointRecord>>,
}

canonical_struct!(AnchorState { checkpoints });

pub struct Anchor;

impl Contract for Anchor {
    fn name(&self) -> &'static str {
        NAME
    }

    fn call(
        &self,
        state: &mut WorldState,
        method: &str,
        args: &Args,
        ctx: &CallContext,
    ) -> Result<String, ContractError> {
        match method {
            "commit" => {
                let source = args.string("source")?;
                let height = args.amount("height")?;
                let state_root = args.digest("state_root")?;
                let list = state.anchors.checkpoints.get(source);
                if let Some(last) = list.and_then(|l| l.last()) {
                    if height <= last.height {
                        return fail(
                            ErrorKind::StaleCheckpoint,
                            format!("height {height} <= last anchored {}", last.height),
                        );
                    }
                }
                state
                    .anchors
                    .checkpoints
                    .entry(source.to_string())
                    .or_default()
                    .push(CheckpointRecord {
                        height,
                        state_root,
                        anchored_at: ctx.now,
                        tx_id: ctx.tx_id,
                        submitter: ctx.submitter,
                    });
                Ok(height.to_string())
            }
            other => unknown_method(NAME, other),
        }
    }
}
