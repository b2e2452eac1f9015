//! Adaptive per-head KV-cache compression for autoregressive attention.
//!
//! Each attention head is profiled once on the prompt, assigned the cheapest
//! compression policy that keeps enough of its attention mass, and decoded
//! with that policy held fixed.

pub mod attention;
pub mod engine;
pub mod error;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod policy;
pub mod profiler;
pub mod reference;
pub mod synth;
pub mod tokens;
pub mod trace;

pub use attention::{attend, causal_attention, AttentionMap};
pub use engine::{
    encode_prompt, generate, generate_fixed_baseline, generate_step, CompressedCache,
    GenerationConfig, Generation, Sampling, StepRecord,
};
pub use error::{Error, Result};
pub use matrix::{softmax_rows, DenseMatrix};
pub use model::{Model, ModelConfig, Projection};
pub use policy::{
    apply_policy, cache_memory_cost, feasible_set, retained_indices, update_cumulative_scores,
    Atom, CompressionPolicy, FeasibleSpec, PolicyContext, PolicyParams, RetainedSet,
};
pub use profiler::{
    profile_model, recovery_ratio, select_policy, select_policy_by_similarity, tv_distance_row,
    Criterion, HeadProfile, ProfilerConfig, RowScope,
};
pub use synth::{synth_model, Archetype, ArchetypePlan, SynthModel, SynthOptions};
pub use reference::generate_reference;
pub use tokens::{classify_tokens, TokenAnnotation, TokenClass, VocabMetadata};
pub use trace::{read_trace, record_trace, write_trace, AttentionTrace, TraceModel};
pub use metrics::{
    full_cache_bytes, layer_distribution_report, pruned_ratio, sidecar_overhead_fraction,
    MemoryModel, RunSummary, TradeoffPoint,
};
