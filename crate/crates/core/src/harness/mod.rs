//! Scripted, seeded runs of the federation with fault injection.

mod run;
mod scenario;
mod stress;

pub use run::{
    check_sealed, emit_report, run, AnchorSummary, AssertionResult, HandoverSummary, HarnessError,
    IngestionSummary, InvariantLog, LedgerSummary, RunReport, SetupError, StepError, StepRecord,
    StepResult, TamperRecord, World, DEFAULT_ASSET,
};
pub use scenario::{
    inject_fault, load_scenario, parse_scenario, Action, AnchorSpec, ApiRole, ApiToken, BadTarget,
    Check, Fault, FleetEv, FoodchainSpec, LedgerSpec, LoadError, MarketSpec, Mint, ParamsSpec,
    Scenario, SchemaError, Step,
};
pub use stress::{script_events, stress, StressReport};
