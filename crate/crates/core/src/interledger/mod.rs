//! Cross-ledger coordination: atomic swaps and checkpoint anchoring.

pub mod anchor;
pub mod swap;
pub mod sweep;

pub use anchor::{
    anchor_checkpoint, checkpoints, verify_anchors, verify_anchors_blocks, AnchorCheckpoint,
    AnchorError, AnchorReport,
};
pub use swap::{
    all_fault_schedules, derive_secret, run_swap, run_swap_with_faults, FaultSchedule, LegOutcome,
    StepFault, SwapError, SwapLeg, SwapPhase, SwapPlan, SwapStatus, DEFAULT_DELTA_MS,
};
