//! Fungible, ledger-local integer tokens. Each ledger may carry several assets;
//! the default asset is [`DEFAULT_ASSET`]. Only the ledger's token authority
//! can mint.

use std::collections::BTreeMap;

use serde::Serialize;

use super::{
    fail, unknown_method, Args, ArgsExt, CallContext, Contract, ContractError, ErrorKind,
    WorldState,
};
use crate::canonical_struct;
use crate::identity::Address;

pub const NAME: &str = "token";
pub const DEFAULT_ASSET: &str = "TOK";

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct TokenState {
    /// asset → holder → units. Zero balances are never stored.
    pub balances: BTreeMap<String, BTreeMap<Address, u64>>,
    pub minted: BTreeMap<String, u64>,
}

canonical_struct!(TokenState { balances, minted });

impl TokenState {
    pub fn balance(&self, asset: &str, who: &Address) -> u64 {
        self.balances
            .get(asset)
            .and_then(|b| b.get(who))
            .copied()
            .unwrap_or(0)
    }

    pub fn total_minted(&self, asset: &str) -> u64 {
        self.minted.get(asset).copied().unwrap_or(0)
    }

    /// The single holder of an asset with exactly one unit outstanding outside
    /// escrow, if any.
    pub fn sole_holder(&self, asset: &str) -> Option<Address> {
        let holders = self.balances.get(asset)?;
        match holders.iter().collect::<Vec<_>>().as_slice() {
            [(who, _)] => Some(**who),
            _ => None,
        }
    }

    pub(crate) fn credit(&mut self, asset: &str, who: Address, amount: u64) {
        if amount == 0 {
            return;
        }
        let slot = self
            .balances
            .entry(asset.to_string())
            .or_default()
            .entry(who)
            .or_insert(0);
        // balances never exceed minted supply, which is overflow-checked at mint
        *slot += amount;
    }

    /// Caller must have checked `balance(asset, who) >= amount`.
    pub(crate) fn debit(&mut self, asset: &str, who: Address, amount: u64) {
        if amount == 0 {
            return;
        }
        let holders = self
            .balances
            .get_mut(asset)
            .expect("debit of unknown asset");
        let slot = holders.get_mut(&who).expect("debit without balance");
        *slot -= amount;
        if *slot == 0 {
            holders.remove(&who);
            if holders.is_empty() {
                self.balances.remove(asset);
            }
        }
    }

    pub(crate) fn require(
        &self,
        asset: &str,
        who: &Address,
        amount: u64,
    ) -> Result<(), ContractError> {
        let have = self.balance(asset, who);
        if have < amount {
            return fail(
                ErrorKind::InsufficientBalance,
                format!("{asset}: have {have}, need {amount}"),
            );
        }
        Ok(())
    }
}

pub(crate) fn asset_arg(args: &Args) -> Result<String, ContractError> {
    Ok(args
        .opt_string("asset")?
        .unwrap_or(DEFAULT_ASSET)
        .to_string())
}

pub struct Token;

impl Contract for Token {
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
            "mint" => {
                if state.token_authority != Some(ctx.submitter) {
                    return fail(ErrorKind::NotTokenAuthority, ctx.submitter.to_hex());
                }
                let to = args.address("to")?;
                let amount = args.amount("amount")?;
                let asset = asset_arg(args)?;
                let minted = state.tokens.total_minted(&asset);
                let Some(total) = minted.checked_add(amount) else {
                    return fail(ErrorKind::Overflow, "mint exceeds u64 supply");
                };
                state.tokens.minted.insert(asset.clone(), total);
                state.tokens.credit(&asset, to, amount);
                Ok(total.to_string())
            }
            "transfer" => {
                let to = args.address("to")?;
                let amount = args.amount("amount")?;
                let asset = asset_arg(args)?;
                state.tokens.require(&asset, &ctx.submitter, amount)?;
                state.tokens.debit(&asset, ctx.submitter, amount);
                state.tokens.credit(&asset, to, amount);
                Ok(state.tokens.balance(&asset, &ctx.submitter).to_string())
            }
            "balance_of" => {
                let who = args.address("who")?;
                let asset = asset_arg(args)?;
                Ok(state.tokens.balance(&asset, &who).to_string())
            }
            other => unknown_method(NAME, other),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contracts::{execute_call, ContractCall};
    use crate::hash::Digest;
    use crate::identity::Keypair;

    fn ctx(who: &Address) -> CallContext {
        CallContext {
            submitter: *who,
            now: 0,
            tx_id: Digest::ZERO,
        }
    }

    struct Fixture {
        state: WorldState,
        dso: Address,
        fleet: Address,
    }

    fn fixture() -> Fixture {
        let auth = Keypair::from_label("auth").address();
        let dso = Keypair::from_label("dso").address();
        let fleet = Keypair::from_label("fleet").address();
        let mut state = WorldState {
            token_authority: Some(auth),
            ..Default::default()
        };
        execute_call(
            &mut state,
            &ContractCall::new(NAME, "mint")
                .arg("to", dso)
                .arg("amount", 1000i64),
            &ctx(&auth),
        )
        .unwrap();
        Fixture { state, dso, fleet }
    }

    fn transfer(f: &mut Fixture, amount: i64) -> Result<String, ContractError> {
        let call = ContractCall::new(NAME, "transfer")
            .arg("to", f.fleet)
            .arg("amount", amount);
        execute_call(&mut f.state, &call, &ctx(&f.dso))
    }

    #[test]
    fn mint_then_transfer() {
        let mut f = fixture();
        transfer(&mut f, 100).unwrap();
        assert_eq!(f.state.tokens.balance(DEFAULT_ASSET, &f.dso), 900);
        assert_eq!(f.state.tokens.balance(DEFAULT_ASSET, &f.fleet), 100);
        assert!(f.state.conservation_holds());
    }

    #[test]
    fn zero_transfer_is_a_noop() {
        let mut f = fixture();
        let before = f.state.root();
        transfer(&mut f, 0).unwrap();
        assert_eq!(f.state.root(), before);
    }

    #[test]
    fn overdraft_and_negative_amounts_fail() {
        let mut f = fixture();
        transfer(&mut f, 900).unwrap();
        let before = f.state.root();
        assert_eq!(
            transfer(&mut f, 101).unwrap_err().kind,
            ErrorKind::InsufficientBalance
        );
        assert_eq!(
            transfer(&mut f, -1).unwrap_err().kind,
            ErrorKind::NegativeAmount
        );
        assert_eq!(f.state.root(), before);
    }

    #[test]
    fn only_authority_mints() {
        let mut f = fixture();
        let call = ContractCall::new(NAME, "mint")
            .arg("to", f.fleet)
            .arg("amount", 5i64);
        let err = execute_call(&mut f.state, &call, &ctx(&f.fleet)).unwrap_err();
        assert_eq!(err.kind, ErrorKind::NotTokenAuthority);
    }

    #[test]
    fn balance_of_is_read_only() {
        let mut f = fixture();
        let before = f.state.root();
        let call = ContractCall::new(NAME, "balance_of").arg("who", f.dso);
        assert_eq!(
            execute_call(&mut f.state, &call, &ctx(&f.fleet)).unwrap(),
            "1000"
        );
        assert_eq!(f.state.root(), before);
    }
}
