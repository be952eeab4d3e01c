use serde::Serialize;

use crate::data::{Tokenizer, Utterance};
use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::moe::Perturbation;
use crate::rng;
use crate::tensor::Real;
use crate::train::evaluate;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PermutationRow {
    pub p: f64,
    /// WER of each trial.
    pub trial_wer: Vec<f64>,
    pub mean_wer: f64,
    /// Mean over trials of `100 (WER_p - WER_0) / WER_0`, or of
    /// `100 (WER_p - WER_0)` percentage points when `absolute` is set.
    pub mean_change: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PermutationReport {
    pub baseline_wer: f64,
    /// The baseline WER is zero, so changes are absolute, not relative.
    pub absolute: bool,
    pub exclude_original: bool,
    pub rows: Vec<PermutationRow>,
}

/// Re-evaluates the model while each token's routed expert is replaced, with
/// probability `p`, by a uniform draw over the experts. The gate becomes the
/// router probability of the substituted expert. Trial `i` draws from the
/// `permute` stream indexed by `i` for every `p`, so the trials at different
/// `p` share their random numbers.
pub fn permutation_experiment<S: Real>(
    model: &Model<S>,
    utterances: &[Utterance],
    tokenizer: &Tokenizer,
    batch_max_frames: usize,
    p_values: &[f64],
    trials: usize,
    seed: u64,
    exclude_original: bool,
) -> Result<PermutationReport> {
    if !model.config.variant.is_moe() {
        return Err(Error::Contract(format!(
            "the permutation probe needs an MoE model, got {}",
            model.config.variant
        )));
    }
    if let Some(&p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::config("p", format!("{p} is not a probability")));
    }
    if trials == 0 {
        return Err(Error::config("trials", "must be positive"));
    }
    let baseline = evaluate(model, utterances, tokenizer, batch_max_frames, None)?.wer;
    let absolute = baseline == 0.0;
    let change = |w: f64| {
        if absolute {
            100.0 * (w - baseline)
        } else {
            100.0 * (w - baseline) / baseline
        }
    };
    let mut rows = Vec::with_capacity(p_values.len());
    for &p in p_values {
        let mut trial_wer = Vec::with_capacity(trials);
        for trial in 0..trials {
            let mut perturb = Perturbation {
                p,
                exclude_original,
                rng: rng::substream(seed, "permute", trial as u64),
            };
            let r = evaluate(
                model,
                utterances,
                tokenizer,
                batch_max_frames,
                Some(&mut perturb),
            )?;
            trial_wer.push(r.wer);
        }
        let n = trials as f64;
        rows.push(PermutationRow {
            p,
            mean_wer: trial_wer.iter().sum::<f64>() / n,
            mean_change: trial_wer.iter().map(|&w| change(w)).sum::<f64>() / n,
            trial_wer,
        });
    }
    Ok(PermutationReport {
        baseline_wer: baseline,
        absolute,
        exclude_original,
        rows,
    })
}
