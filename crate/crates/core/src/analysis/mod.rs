//! Cost model, counter reconciliation, attention diagnostics and
//! representation alignment.

mod align;
mod flops;
mod report;
mod trace;

pub use align::{alignment_grid, knn_indices, layer_features, mutual_knn_alignment};
pub use flops::{
    flops_deepinsert, flops_per_layer, flops_piecewise, flops_split_sum_form, flops_subtraction_form,
    reconcile_counts, reconcile_pruned, FlopsQuery, FlopsReport, LayerFlops, Reconciliation,
};
pub use report::{csv_table, svg_heatmap, svg_lines, trace_rows_from_jsonl, traces_to_jsonl, TraceRow, TRACE_SCHEMA_VERSION};
pub use trace::{
    mean_var_per_layer, token_contribution_map, trace_first_answer_token, trace_last_prompt_token, var_per_layer,
    AttentionTrace, ContributionMap, LayerTrace,
};
