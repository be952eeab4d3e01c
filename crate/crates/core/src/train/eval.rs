use serde::Serialize;

use crate::ctc::{self, WerTally};
use crate::data::{pack_batches, Batch, Tokenizer, Utterance};
use crate::encoder::{ForwardOptions, Model};
use crate::error::{Error, Result};
use crate::moe::Perturbation;
use crate::tensor::{Real, Tape};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UtteranceResult {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
    pub edits: usize,
    pub words: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    /// Corpus WER: total word edits over total reference words.
    pub wer: f64,
    pub edits: usize,
    pub words: usize,
    pub utterances: Vec<UtteranceResult>,
}

/// Greedy-decoding WER in corpus order. With `perturb`, routed experts are
/// randomly reassigned as the forward pass proceeds.
pub fn evaluate<S: Real>(
    model: &Model<S>,
    utterances: &[Utterance],
    tokenizer: &Tokenizer,
    batch_max_frames: usize,
    mut perturb: Option<&mut Perturbation>,
) -> Result<EvalResult> {
    if utterances.is_empty() {
        return Err(Error::Contract("evaluation corpus is empty".into()));
    }
    let frames: Vec<usize> = utterances.iter().map(|u| u.frames).collect();
    let order: Vec<usize> = (0..utterances.len()).collect();
    let mut tally = WerTally::default();
    let mut results = Vec::with_capacity(utterances.len());
    for idx in pack_batches(&frames, &order, batch_max_frames) {
        let utts: Vec<&Utterance> = idx.iter().map(|&i| &utterances[i]).collect();
        let batch = Batch::new(&utts, tokenizer)?;
        let mut tape = Tape::new();
        let opts = ForwardOptions {
            perturb: perturb.as_deref_mut(),
            detach_gate: false,
        };
        let out = model.forward(&mut tape, &batch, opts)?;
        let logits = tape.value(out.logits);
        for (b, &(start, len)) in out.segments.iter().enumerate() {
            let ids = ctc::greedy_decode(&logits.slice_rows(start, len));
            let hypothesis = tokenizer.decode(&ids)?;
            let reference = batch.transcripts[b].clone();
            let before = tally.words;
            let edits = tally.add(&reference, &hypothesis);
            results.push(UtteranceResult {
                id: batch.ids[b].clone(),
                reference,
                hypothesis,
                edits,
                words: tally.words - before,
            });
        }
    }
    Ok(EvalResult {
        wer: tally.rate()?,
        edits: tally.edits,
        words: tally.words,
        utterances: results,
    })
}
