//! Two-leg atomic swaps over hash time-locked escrows.
//!
//! The secret holder pays on leg A and is paid on leg B. Protocol steps:
//! lock A, lock B, claim B (publishes the secret on ledger B), claim A.
//! A coordinator drives the parties; it may be delayed or crash at any step.
//! Safety rests on timelocks and two independent watchers:
//!
//! * the leg A payee claims A within `delta` of the secret appearing on B;
//! * each payer refunds its own escrow once its timelock has passed.
//!
//! The secret holder only claims B while `now < timelock_b - delta`, so a
//! claim on A that follows within `3 * delta` still lands before
//! `timelock_a = timelock_b + 2 * delta`.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::Serialize;
use thiserror::Error;

use crate::contracts::htlc::{self, EscrowStatus, HtlcEscrow};
use crate::contracts::token::DEFAULT_ASSET;
use crate::contracts::ContractCall;
use crate::hash::{sha256, Digest};
use crate::identity::{Address, Keyring};
use crate::ledger::{LedgerError, Network};

pub const DEFAULT_DELTA_MS: u64 = 2_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SwapLeg {
    pub ledger: String,
    pub payer: Address,
    pub payee: Address,
    pub asset: String,
    pub amount: u64,
}

impl SwapLeg {
    pub fn new(ledger: &str, payer: Address, payee: Address, amount: u64) -> Self {
        Self {
            ledger: ledger.to_string(),
            payer,
            payee,
            asset: DEFAULT_ASSET.to_string(),
            amount,
        }
    }

    pub fn with_asset(mut self, asset: &str) -> Self {
        self.asset = asset.to_string();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SwapPlan {
    pub swap_id: String,
    pub leg_a: SwapLeg,
    pub leg_b: SwapLeg,
    pub secret_holder: Address,
    pub hashlock: Digest,
    #[serde(skip)]
    secret: Digest,
    pub start: u64,
    pub delta: u64,
    pub timelock_a: u64,
    pub timelock_b: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SwapError {
    #[error("both legs are on ledger {0}")]
    SameLedger(String),
    #[error("the secret holder must pay leg A and be paid on leg B")]
    BadRoles,
    #[error("timelock_a {a} < timelock_b {b} + 2*delta")]
    BadTimelocks { a: u64, b: u64 },
    #[error("insufficient funds on {ledger}: have {have}, need {need}")]
    InsufficientFunds {
        ledger: String,
        have: u64,
        need: u64,
    },
    #[error("no key for {0}")]
    UnknownKey(Address),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

impl SwapPlan {
    /// Default timing: `timelock_b = start + 6Δ`, `timelock_a = timelock_b + 2Δ`.
    pub fn new(
        swap_id: &str,
        leg_a: SwapLeg,
        leg_b: SwapLeg,
        secret: Digest,
        start: u64,
        delta: u64,
    ) -> Self {
        let timelock_b = start + 6 * delta;
        Self {
            swap_id: swap_id.to_string(),
            secret_holder: leg_a.payer,
            leg_a,
            leg_b,
            hashlock: sha256(&secret.0),
            secret,
            start,
            delta,
            timelock_a: timelock_b + 2 * delta,
            timelock_b,
        }
    }

    pub fn with_timelocks(mut self, timelock_a: u64, timelock_b: u64) -> Self {
        self.timelock_a = timelock_a;
        self.timelock_b = timelock_b;
        self
    }

    pub fn escrow_id(&self, leg: Leg) -> String {
        match leg {
            Leg::A => format!("{}/a", self.swap_id),
            Leg::B => format!("{}/b", self.swap_id),
        }
    }

    pub fn leg(&self, leg: Leg) -> &SwapLeg {
        match leg {
            Leg::A => &self.leg_a,
            Leg::B => &self.leg_b,
        }
    }

    pub fn validate(&self) -> Result<(), SwapError> {
        if self.leg_a.ledger == self.leg_b.ledger {
            return Err(SwapError::SameLedger(self.leg_a.ledger.clone()));
        }
        if self.secret_holder != self.leg_a.payer || self.secret_holder != self.leg_b.payee {
            return Err(SwapError::BadRoles);
        }
        if self.timelock_a < self.timelock_b + 2 * self.delta {
            return Err(SwapError::BadTimelocks {
                a: self.timelock_a,
                b: self.timelock_b,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Leg {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SwapPhase {
    Init,
    ALocked,
    BLocked,
    BClaimed,
    Complete,
    Refunding,
    Refunded,
    /// One leg claimed, the other not. Never produced by a correct run.
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LegOutcome {
    Claimed,
    Refunded,
    /// Never locked; the payer kept the funds.
    NotLocked,
    /// Still locked. Only possible if the run was cut short.
    Locked,
}

impl LegOutcome {
    fn of(e: Option<&HtlcEscrow>) -> Self {
        match e.map(|e| e.status) {
            None => LegOutcome::NotLocked,
            Some(EscrowStatus::Locked) => LegOutcome::Locked,
            Some(EscrowStatus::Claimed) => LegOutcome::Claimed,
            Some(EscrowStatus::Refunded) => LegOutcome::Refunded,
        }
    }

    /// The payer ended with its funds back (or never gave them up).
    pub fn is_unwound(&self) -> bool {
        matches!(self, LegOutcome::Refunded | LegOutcome::NotLocked)
    }
}

/// Injected behavior for one coordinator step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StepFault {
    Delay(u64),
    Crash,
}

pub const STEPS: [&str; 4] = ["lock_a", "lock_b", "claim_b", "claim_a"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FaultSchedule(pub [StepFault; 4]);

impl FaultSchedule {
    pub const NONE: FaultSchedule = FaultSchedule([StepFault::Delay(0); 4]);

    pub fn crash_at(step: usize) -> Self {
        let mut s = Self::NONE;
        s.0[step] = StepFault::Crash;
        s
    }
}

/// Every schedule with each step drawn from `{0, Δ, 2Δ, 3Δ, crash}`.
pub fn all_fault_schedules(delta: u64) -> Vec<FaultSchedule> {
    let choices = [
        StepFault::Delay(0),
        StepFault::Delay(delta),
        StepFault::Delay(2 * delta),
        StepFault::Delay(3 * delta),
        StepFault::Crash,
    ];
    let mut out = Vec::with_capacity(625);
    for a in choices {
        for b in choices {
            for c in choices {
                for d in choices {
                    out.push(FaultSchedule([a, b, c, d]));
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SwapAction {
    pub at: u64,
    pub actor: Address,
    pub action: String,
    pub ledger: String,
    pub tx_id: Option<Digest>,
    pub ok: bool,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SwapStatus {
    pub swap_id: String,
    pub phase: SwapPhase,
    pub history: Vec<SwapPhase>,
    pub leg_a: LegOutcome,
    pub leg_b: LegOutcome,
    pub revealed_preimage: Option<Digest>,
    pub coordinator_crashed_at: Option<usize>,
    pub finished_at: u64,
    pub actions: Vec<SwapAction>,
}

impl SwapStatus {
    pub fn is_atomic(&self) -> bool {
        (self.leg_a == LegOutcome::Claimed && self.leg_b == LegOutcome::Claimed)
            || (self.leg_a.is_unwound() && self.leg_b.is_unwound())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Action {
    Step(usize),
    WatchClaimA,
    RefundB,
    RefundA,
}

struct Run<'a> {
    net: &'a mut Network,
    plan: &'a SwapPlan,
    keys: &'a Keyring,
    schedule: FaultSchedule,
    queue: BinaryHeap<Reverse<(u64, u64, Action)>>,
    seq: u64,
    history: Vec<SwapPhase>,
    actions: Vec<SwapAction>,
    crashed_at: Option<usize>,
}

impl Run<'_> {
    fn push(&mut self, at: u64, action: Action) {
        self.seq += 1;
        self.queue.push(Reverse((at, self.seq, action)));
    }

    fn escrow(&self, leg: Leg) -> Option<HtlcEscrow> {
        let l = self.net.ledger(&self.plan.leg(leg).ledger).ok()?;
        l.state().escrows.get(&self.plan.escrow_id(leg)).cloned()
    }

    fn phase(&mut self, p: SwapPhase) {
        if self.history.last() != Some(&p) {
            self.history.push(p);
        }
    }

    fn act(
        &mut self,
        actor: Address,
        leg: Leg,
        name: &str,
        call: ContractCall,
    ) -> Result<bool, SwapError> {
        let key = self.keys.get(&actor).ok_or(SwapError::UnknownKey(actor))?;
        let ledger = self.plan.leg(leg).ledger.clone();
        let at = self.net.now();
        let (tx_id, ok, note) = match self.net.submit_call(&ledger, key, call) {
            Ok(tx_id) => {
                self.net.seal(&ledger)?;
                let (_, st) = self
                    .net
                    .ledger(&ledger)?
                    .find_sealed(&tx_id)
                    .expect("sealed");
                let note = match &st.status {
                    crate::ledger::TxStatus::Applied { ret } => ret.clone(),
                    crate::ledger::TxStatus::Failed { error } => error.to_string(),
                };
                (Some(tx_id), st.status.is_applied(), note)
            }
            Err(e @ (LedgerError::UnknownLedger(_) | LedgerError::BadSignature)) => {
                return Err(e.into())
            }
            Err(e) => (None, false, e.to_string()),
        };
        self.actions.push(SwapAction {
            at,
            actor,
            action: name.to_string(),
            ledger,
            tx_id,
            ok,
            note,
        });
        Ok(ok)
    }

    fn lock(&mut self, leg: Leg, timelock: u64) -> Result<bool, SwapError> {
        let l = self.plan.leg(leg).clone();
        let call = ContractCall::new(htlc::NAME, "lock")
            .arg("escrow_id", self.plan.escrow_id(leg))
            .arg("payee", l.payee)
            .arg("amount", l.amount)
            .arg("asset", l.asset.as_str())
            .arg("hashlock", self.plan.hashlock)
            .arg("timelock", timelock);
        self.act(
            l.payer,
            leg,
            if leg == Leg::A { "lock_a" } else { "lock_b" },
            call,
        )
    }

    fn claim(&mut self, leg: Leg, preimage: Digest, name: &str) -> Result<bool, SwapError> {
        let call = ContractCall::new(htlc::NAME, "claim")
            .arg("escrow_id", self.plan.escrow_id(leg))
            .arg("preimage", preimage.to_hex());
        self.act(self.plan.leg(leg).payee, leg, name, call)
    }

    fn refund(&mut self, leg: Leg) -> Result<bool, SwapError> {
        let call =
            ContractCall::new(htlc::NAME, "refund").arg("escrow_id", self.plan.escrow_id(leg));
        let name = if leg == Leg::A {
            "refund_a"
        } else {
            "refund_b"
        };
        self.act(self.plan.leg(leg).payer, leg, name, call)
    }

    /// An escrow matching this plan's terms for `leg`, still locked.
    fn locked_as_agreed(&self, leg: Leg, timelock: u64) -> bool {
        let l = self.plan.leg(leg);
        self.escrow(leg).is_some_and(|e| {
            e.status == EscrowStatus::Locked
                && e.payer == l.payer
                && e.payee == l.payee
                && e.amount == l.amount
                && e.asset == l.asset
                && e.hashlock == self.plan.hashlock
                && e.timelock == timelock
        })
    }

    fn schedule_next(&mut self, step: usize) {
        if step >= 4 {
            return;
        }
        match self.schedule.0[step] {
            StepFault::Crash => self.crashed_at = Some(step),
            StepFault::Delay(d) => {
                let at = self.net.now() + d;
                self.push(at, Action::Step(step));
            }
        }
    }

    fn step(&mut self, step: usize) -> Result<(), SwapError> {
        let p = self.plan;
        let now = self.net.now();
        let proceed = match step {
            0 => now < p.timelock_b && self.lock(Leg::A, p.timelock_a)?,
            1 => {
                // payer B locks only against a correctly formed leg A
                self.locked_as_agreed(Leg::A, p.timelock_a)
                    && p.timelock_a >= p.timelock_b + 2 * p.delta
                    && now < p.timelock_b
                    && self.lock(Leg::B, p.timelock_b)?
            }
            2 => {
                now + p.delta < p.timelock_b
                    && self.locked_as_agreed(Leg::B, p.timelock_b)
                    && self.claim(Leg::B, p.secret, "claim_b")?
            }
            3 => match self.revealed() {
                Some(s)
                    if self
                        .escrow(Leg::A)
                        .is_some_and(|e| e.status == EscrowStatus::Locked) =>
                {
                    self.claim(Leg::A, s, "claim_a")?
                }
                _ => false,
            },
            _ => unreachable!(),
        };
        if proceed {
            self.phase(
                [
                    SwapPhase::ALocked,
                    SwapPhase::BLocked,
                    SwapPhase::BClaimed,
                    SwapPhase::Complete,
                ][step],
            );
            if step == 2 {
                let at = now + p.delta;
                self.push(at, Action::WatchClaimA);
            }
            self.schedule_next(step + 1);
        }
        Ok(())
    }

    fn revealed(&self) -> Option<Digest> {
        self.escrow(Leg::B)
            .filter(|e| e.status == EscrowStatus::Claimed)
            .and_then(|e| e.preimage)
    }

    fn drive(mut self) -> Result<SwapStatus, SwapError> {
        let p = self.plan;
        self.net.advance_to(p.start);
        self.history.push(SwapPhase::Init);
        self.push(p.timelock_b, Action::RefundB);
        self.push(p.timelock_a, Action::RefundA);
        self.schedule_next(0);
        while let Some(Reverse((at, _, action))) = self.queue.pop() {
            self.net.advance_to(at);
            match action {
                Action::Step(k) => self.step(k)?,
                Action::WatchClaimA => {
                    if let Some(s) = self.revealed() {
                        if self
                            .escrow(Leg::A)
                            .is_some_and(|e| e.status == EscrowStatus::Locked)
                            && self.claim(Leg::A, s, "watch_claim_a")?
                        {
                            self.phase(SwapPhase::Complete);
                        }
                    }
                }
                Action::RefundB | Action::RefundA => {
                    let leg = if action == Action::RefundA {
                        Leg::A
                    } else {
                        Leg::B
                    };
                    if self
                        .escrow(leg)
                        .is_some_and(|e| e.status == EscrowStatus::Locked)
                    {
                        self.phase(SwapPhase::Refunding);
                        self.refund(leg)?;
                    }
                }
            }
        }
        let (a, b) = (
            LegOutcome::of(self.escrow(Leg::A).as_ref()),
            LegOutcome::of(self.escrow(Leg::B).as_ref()),
        );
        let phase = match (a, b) {
            (LegOutcome::Claimed, LegOutcome::Claimed) => SwapPhase::Complete,
            (x, y) if x.is_unwound() && y.is_unwound() => SwapPhase::Refunded,
            _ => SwapPhase::Mixed,
        };
        self.phase(phase);
        let revealed_preimage = self.escrow(Leg::B).and_then(|e| e.preimage);
        Ok(SwapStatus {
            swap_id: p.swap_id.clone(),
            phase,
            history: self.history,
            leg_a: a,
            leg_b: b,
            revealed_preimage,
            coordinator_crashed_at: self.crashed_at,
            finished_at: self.net.now(),
            actions: self.actions,
        })
    }
}

/// Runs the swap to a terminal state under `schedule`. Fails before locking
/// anything if a payer is short of funds.
pub fn run_swap_with_faults(
    net: &mut Network,
    keys: &Keyring,
    plan: &SwapPlan,
    schedule: FaultSchedule,
) -> Result<SwapStatus, SwapError> {
    plan.validate()?;
    for leg in [&plan.leg_a, &plan.leg_b] {
        let have = net
            .ledger(&leg.ledger)?
            .state()
            .tokens
            .balance(&leg.asset, &leg.payer);
        if have < leg.amount {
            return Err(SwapError::InsufficientFunds {
                ledger: leg.ledger.clone(),
                have,
                need: leg.amount,
            });
        }
        for who in [leg.payer, leg.payee] {
            keys.get(&who).ok_or(SwapError::UnknownKey(who))?;
        }
    }
    Run {
        net,
        plan,
        keys,
        schedule,
        queue: BinaryHeap::new(),
        seq: 0,
        history: Vec::new(),
        actions: Vec::new(),
        crashed_at: None,
    }
    .drive()
}

pub fn run_swap(
    net: &mut Network,
    keys: &Keyring,
    plan: &SwapPlan,
) -> Result<SwapStatus, SwapError> {
    run_swap_with_faults(net, keys, plan, FaultSchedule::NONE)
}

/// Secret for a swap, derived from a run seed so runs are reproducible.
pub fn derive_secret(seed: u64, swap_id: &str) -> Digest {
    crate::hash::sha256_concat(&[
        b"fedchain/swap-secret/",
        &seed.to_be_bytes(),
        swap_id.as_bytes(),
    ])
}
