//! Exhaustive fault-schedule sweep over a two-ledger swap fixture.

use serde::Serialize;

use super::swap::{
    all_fault_schedules, derive_secret, run_swap_with_faults, FaultSchedule, SwapLeg, SwapPlan,
    SwapStatus,
};
use crate::contracts::ContractCall;
use crate::identity::{Address, Keyring};
use crate::ledger::{LedgerConfig, Network};
use crate::par::{par_map, ExecMode};

/// Which of the two parties holds the secret.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SecretHolder {
    First,
    Second,
}

/// Two open ledgers, two funded parties and a plan between them.
#[derive(Debug, Clone)]
pub struct SwapFixture {
    pub delta: u64,
    pub amount_a: u64,
    pub amount_b: u64,
    pub funding: u64,
}

impl Default for SwapFixture {
    fn default() -> Self {
        Self {
            delta: super::DEFAULT_DELTA_MS,
            amount_a: 40,
            amount_b: 30,
            funding: 100,
        }
    }
}

pub struct Prepared {
    pub net: Network,
    pub keys: Keyring,
    pub plan: SwapPlan,
    pub parties: [Address; 2],
}

impl SwapFixture {
    pub fn prepare(&self, holder: SecretHolder) -> Prepared {
        let mut keys = Keyring::new();
        let p1 = keys.add_label("party-1");
        let p2 = keys.add_label("party-2");
        let mint = keys.add_label("mint");
        let mut net = Network::new();
        let m = keys.get(&mint).expect("registered").clone();
        for (id, who) in [("X", p1), ("Y", p2)] {
            net.add_ledger(LedgerConfig::open(id).with_token_authority(mint))
                .expect("fresh network");
            let call = ContractCall::new("token", "mint")
                .arg("to", who)
                .arg("amount", self.funding);
            net.transact(id, &m, call)
                .expect("ledger exists")
                .expect("mint succeeds");
        }
        // party 1 pays on X, party 2 on Y; the holder's payment is leg A
        let x = SwapLeg::new("X", p1, p2, self.amount_a);
        let y = SwapLeg::new("Y", p2, p1, self.amount_b);
        let (leg_a, leg_b) = match holder {
            SecretHolder::First => (x, y),
            SecretHolder::Second => (y, x),
        };
        let plan = SwapPlan::new(
            "swap",
            leg_a,
            leg_b,
            derive_secret(7, "swap"),
            net.now(),
            self.delta,
        );
        Prepared {
            net,
            keys,
            plan,
            parties: [p1, p2],
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepCase {
    pub holder: SecretHolder,
    pub schedule: FaultSchedule,
    pub status: SwapStatus,
    /// Final (ledger, party) balances.
    pub balances: Vec<(String, Address, u64)>,
    pub minted: Vec<(String, u64)>,
    pub conservation_ok: bool,
}

/// Runs every fault schedule for both secret holders.
pub fn sweep(fixture: &SwapFixture, mode: ExecMode) -> Vec<SweepCase> {
    let cases: Vec<(SecretHolder, FaultSchedule)> = [SecretHolder::First, SecretHolder::Second]
        .into_iter()
        .flat_map(|h| {
            all_fault_schedules(fixture.delta)
                .into_iter()
                .map(move |s| (h, s))
        })
        .collect();
    par_map(mode, &cases, |(holder, schedule)| {
        let Prepared {
            mut net,
            keys,
            plan,
            parties,
        } = fixture.prepare(*holder);
        let status =
            run_swap_with_faults(&mut net, &keys, &plan, *schedule).expect("fixture is funded");
        let mut balances = Vec::new();
        let mut minted = Vec::new();
        let mut conservation_ok = true;
        for l in net.ledgers() {
            let t = &l.state().tokens;
            for p in parties {
                balances.push((l.id().to_string(), p, t.balance("TOK", &p)));
            }
            minted.push((l.id().to_string(), t.total_minted("TOK")));
            conservation_ok &= l.state().conservation_holds() && l.verify_chain().ok;
        }
        SweepCase {
            holder: *holder,
            schedule: *schedule,
            status,
            balances,
            minted,
            conservation_ok,
        }
    })
}
