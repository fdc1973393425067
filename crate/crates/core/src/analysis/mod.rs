//! FLOPs accounting, shared-cell overlap and load-balance statistics over
//! routing traces, and the published reference numbers.

mod flops;
mod overlap;
mod reference;
mod trace;

pub use flops::{
    gate_flops, layer_macs, model_flops, FlopsReport, LayerMacs, CONVENTION_FACTOR, REFERENCE_BATCH_TOKENS,
    REFERENCE_TRAIN_TOKENS,
};
pub use overlap::{expected_overlap_analytical, expected_overlap_closed_form, expected_overlap_empirical, OverlapEstimate};
pub use reference::{lookup, reference_tables, ReferenceRecord, GATE_TFLOPS_TABLE};
pub use trace::{block_usage_counts, load_balance_histogram, RoutingEvent, RoutingTrace, TRACE_HEADER};
