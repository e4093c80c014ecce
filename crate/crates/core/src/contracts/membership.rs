//! Membership changes on permissioned ledgers. Recording them as transactions
//! keeps the membership history replayable from the chain.

use serde::Serialize;

use super::{
    fail, unknown_method, Args, ArgsExt, CallContext, Contract, ContractError, ErrorKind,
    WorldState,
};
use crate::identity::Address;
use crate::{canonical_enum, canonical_struct};

pub const NAME: &str = "membership";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MembershipAction {
    Add,
    Revoke,
}

canonical_enum!(MembershipAction { Add = 0, Revoke = 1 });

impl MembershipAction {
    pub fn method(&self) -> &'static str {
        match self {
            MembershipAction::Add => "add",
            MembershipAction::Revoke => "revoke",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MembershipChange {
    pub action: MembershipAction,
    pub member: Address,
    pub at: u64,
}

canonical_struct!(MembershipChange { action, member, at });

pub struct Membership;

impl Contract for Membership {
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
        let action = match method {
            "add" => MembershipAction::Add,
            "revoke" => MembershipAction::Revoke,
            other => return unknown_method(NAME, other),
        };
        if state.authority != Some(ctx.submitter) {
            return fail(ErrorKind::NotAuthority, ctx.submitter.to_hex());
        }
        let member = args.address("member")?;
        match action {
            MembershipAction::Add if state.members.contains(&member) => {
                return fail(ErrorKind::AlreadyMember, member.to_hex())
            }
            MembershipAction::Revoke if !state.members.contains(&member) => {
                return fail(ErrorKind::NotAMember, member.to_hex())
            }
            MembershipAction::Add => state.members.insert(member),
            MembershipAction::Revoke => state.members.remove(&member),
        };
        state.membership_log.push(MembershipChange {
            action,
            member,
            at: ctx.now,
        });
        Ok(state.members.len().to_string())
    }
}
