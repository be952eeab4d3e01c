//! Routing diagnostics: per-frame assignment dumps, contingency tables and
//! Cramér's V between adjacent layers, label alignment for visualization,
//! per-token routing entropy, and the expert-permutation probe.

mod io;
mod permute;
mod stats;

pub use io::{
    read_frame_tokens, read_routes, usage_maps, write_frame_tokens, write_probs, write_routes,
    UsageMap,
};
pub use permute::{permutation_experiment, PermutationReport, PermutationRow};
pub use stats::{
    align_labels, best_matching, chi_square, contingency, cramers_v, cramers_v_by_layer,
    routing_entropy, ContingencyTable, EntropyRow, EntropyTable,
};

use serde::Serialize;

use crate::ctc;
use crate::data::{pack_batches, Batch, Tokenizer, Utterance};
use crate::encoder::{ForwardOptions, Model};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape};

/// Routing decision for one stacked frame at one MoE layer.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoutingRecord {
    pub utterance_id: String,
    pub layer: usize,
    pub frame: usize,
    pub expert: usize,
    pub gate: f64,
    /// Router probabilities; empty when read from a dump without sidecar.
    pub probs: Vec<f64>,
}

/// Frame-level greedy symbol (per-frame argmax before collapsing).
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FrameToken {
    pub utterance_id: String,
    pub frame: usize,
    pub symbol: usize,
}

/// Everything one evaluation pass records about routing.
#[derive(Clone, Debug, PartialEq)]
pub struct RouteDump {
    pub layers: usize,
    pub experts: usize,
    /// Ordered by utterance, then layer, then frame.
    pub records: Vec<RoutingRecord>,
    pub frame_tokens: Vec<FrameToken>,
}

/// Runs the model over `utterances` without augmentation and records every
/// routing decision on real frames.
pub fn dump_routes<S: Real>(
    model: &Model<S>,
    utterances: &[Utterance],
    tokenizer: &Tokenizer,
    batch_max_frames: usize,
) -> Result<RouteDump> {
    if !model.config.variant.is_moe() {
        return Err(Error::Contract(format!(
            "routing analysis needs an MoE model, got {}",
            model.config.variant
        )));
    }
    let frames: Vec<usize> = utterances.iter().map(|u| u.frames).collect();
    let order: Vec<usize> = (0..utterances.len()).collect();
    let mut records = Vec::new();
    let mut frame_tokens = Vec::new();
    for idx in pack_batches(&frames, &order, batch_max_frames) {
        let utts: Vec<&Utterance> = idx.iter().map(|&i| &utterances[i]).collect();
        let batch = Batch::new(&utts, tokenizer)?;
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &batch, ForwardOptions::default())?;
        let logits = tape.value(out.logits);
        for (b, &(start, len)) in out.segments.iter().enumerate() {
            let id = &batch.ids[b];
            for (layer, d) in out.dispatches.iter().enumerate() {
                for t in 0..len {
                    let row = start + t;
                    records.push(RoutingRecord {
                        utterance_id: id.clone(),
                        layer,
                        frame: t,
                        expert: d.assignment[row],
                        gate: d.gate[row],
                        probs: d.probs.row(row).iter().map(|p| p.as_f64()).collect(),
                    });
                }
            }
            let symbols = ctc::frame_argmax(&logits.slice_rows(start, len));
            for (t, symbol) in symbols.into_iter().enumerate() {
                frame_tokens.push(FrameToken {
                    utterance_id: id.clone(),
                    frame: t,
                    symbol,
                });
            }
        }
    }
    Ok(RouteDump {
        layers: model.config.num_moe_layers(),
        experts: model.config.experts,
        records,
        frame_tokens,
    })
}
