//! Hash time-locked escrows.
//!
//! The claim window is half-open: `[locked_at, timelock)`. At `now == timelock`
//! a claim fails with `Expired` and a refund succeeds. Preimages are exactly
//! 32 bytes. A successful claim publishes the preimage in contract state.

use serde::Serialize;

use super::provenance::{custody_lot, CustodyEvent};
use super::token::asset_arg;
use super::{
    fail, unknown_method, Args, ArgsExt, CallContext, Contract, ContractError, ErrorKind,
    WorldState,
};
use crate::hash::{sha256, Digest};
use crate::identity::Address;
use crate::{canonical_enum, canonical_struct};

pub const NAME: &str = "htlc";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EscrowStatus {
    Locked,
    Claimed,
    Refunded,
}

canonical_enum!(EscrowStatus { Locked = 0, Claimed = 1, Refunded = 2 });

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HtlcEscrow {
    pub escrow_id: String,
    pub payer: Address,
    pub payee: Address,
    pub asset: String,
    pub amount: u64,
    pub hashlock: Digest,
    pub timelock: u64,
    pub locked_at: u64,
    pub status: EscrowStatus,
    pub preimage: Option<Digest>,
    pub settled_at: Option<u64>,
}

canonical_struct!(HtlcEscrow {
    escrow_id,
    payer,
    payee,
    asset,
    amount,
    hashlock,
    timelock,
    locked_at,
    status,
    preimage,
    settled_at,
});

fn escrow<'a>(state: &'a WorldState, id: &str) -> Result<&'a HtlcEscrow, ContractError> {
    state
        .escrows
        .get(id)
        .ok_or_else(|| ContractError::new(ErrorKind::UnknownEscrow, id))
}

fn require_locked(e: &HtlcEscrow) -> Result<(), ContractError> {
    if e.status != EscrowStatus::Locked {
        return fail(
            ErrorKind::NotLocked,
            format!("{} is {:?}", e.escrow_id, e.status),
        );
    }
    Ok(())
}

pub struct Htlc;

impl Contract for Htlc {
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
            "lock" => {
                let id = args.string("escrow_id")?.to_string();
                let payee = args.address("payee")?;
                let amount = args.amount("amount")?;
                let asset = asset_arg(args)?;
                let hashlock = args.digest("hashlock")?;
                let timelock = args.amount("timelock")?;
                if state.escrows.contains_key(&id) {
                    return fail(ErrorKind::EscrowExists, id);
                }
                if amount == 0 {
                    return fail(ErrorKind::NonPositive, "escrow amount must be positive");
                }
                if timelock <= ctx.now {
                    return fail(
                        ErrorKind::TimelockInPast,
                        format!("timelock {timelock} <= now {}", ctx.now),
                    );
                }
                state.tokens.require(&asset, &ctx.submitter, amount)?;
                state.tokens.debit(&asset, ctx.submitter, amount);
                state.escrows.insert(
                    id.clone(),
                    HtlcEscrow {
                        escrow_id: id.clone(),
                        payer: ctx.submitter,
                        payee,
                        asset,
                        amount,
                        hashlock,
                        timelock,
                        locked_at: ctx.now,
                        status: EscrowStatus::Locked,
                        preimage: None,
                        settled_at: None,
                    },
                );
                Ok(id)
            }
            "claim" => {
                let id = args.string("escrow_id")?;
                let raw = args.string("preimage")?;
                let e = escrow(state, id)?;
                require_locked(e)?;
                if ctx.now >= e.timelock {
                    return fail(
                        ErrorKind::Expired,
                        format!("now {} >= timelock {}", ctx.now, e.timelock),
                    );
                }
                let preimage = match hex::decode(raw) {
                    Ok(b) if b.len() == 32 => Digest(b.try_into().unwrap()),
                    _ => return fail(ErrorKind::WrongPreimage, "preimage must be 32 bytes of hex"),
                };
                if sha256(&preimage.0) != e.hashlock {
                    return fail(ErrorKind::WrongPreimage, id.to_string());
                }
                let (payer, payee, amount, asset) = (e.payer, e.payee, e.amount, e.asset.clone());
                state.tokens.credit(&asset, payee, amount);
                let e = state.escrows.get_mut(id).unwrap();
                e.status = EscrowStatus::Claimed;
                e.preimage = Some(preimage);
                e.settled_at = Some(ctx.now);
                if let Some(lot) = custody_lot(&asset) {
                    state
                        .provenance
                        .custody
                        .entry(lot.to_string())
                        .or_default()
                        .push(CustodyEvent {
                            from: payer,
                            to: payee,
                            escrow_id: id.to_string(),
                            ts: ctx.now,
                        });
                }
                Ok(amount.to_string())
            }
            "refund" => {
                let id = args.string("escrow_id")?;
                let e = escrow(state, id)?;
                require_locked(e)?;
                if ctx.now < e.timelock {
                    return fail(
                        ErrorKind::NotYetExpired,
                        format!("now {} < timelock {}", ctx.now, e.timelock),
                    );
                }
                let (payer, amount, asset) = (e.payer, e.amount, e.asset.clone());
                state.tokens.credit(&asset, payer, amount);
                let e = state.escrows.get_mut(id).unwrap();
                e.status = EscrowStatus::Refunded;
                e.settled_at = Some(ctx.now);
                Ok(amount.to_string())
            }
            other => unknown_method(NAME, other),
        }
    }
}
