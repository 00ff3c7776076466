//! Static memory analysis for a microcontroller-class target.
//!
//! Every activation tensor gets a lifetime over execution steps (step 0 is
//! the graph input, node `i` runs at step `i + 1`); the arena planner packs
//! tensors whose lifetimes overlap into disjoint byte ranges. FLASH is the
//! serialized weight payload plus the container header.

mod arena;
mod report;

pub use arena::{lower_bound, plan_arena, tensor_lifetimes, ArenaPlan, Lifetime, ALIGNMENT};
pub use report::{
    analyze_report, analyze_report_with_frame, frame_buffer_bytes, AnalyzeReport, Budgets, NodeRow,
    Verdict, DEFAULT_FLASH_BUDGET, DEFAULT_RAM_BUDGET, TIGHT_FRACTION,
};

use crate::ir::{container, Graph, QuantParams};

/// Bytes the model occupies in FLASH: weights at their stored width,
/// per-channel scales as f32, and the container header.
pub fn estimate_flash(g: &Graph) -> usize {
    let weights: usize = g
        .nodes
        .iter()
        .flat_map(|n| n.weights.values())
        .map(|w| {
            let scales = w
                .quant
                .as_ref()
                .and_then(QuantParams::channel_scales)
                .map_or(0, |s| s.len() * 4);
            w.size_bytes() + scales
        })
        .sum();
    weights + container::header_size(g)
}
