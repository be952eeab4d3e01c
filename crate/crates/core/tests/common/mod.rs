#![allow(dead_code)]

use omni_moe::ctc::ctc_loss_packed;
use omni_moe::data::{Batch, Tokenizer, Utterance};
use omni_moe::encoder::{ForwardOptions, Model, ModelConfig, Variant};
use omni_moe::moe::load_balance_loss;
use omni_moe::tensor::{Real, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Two blocks, width 4, two experts, three-dimensional features stacked in pairs.
pub fn tiny_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        layers: 2,
        embed_dim: 4,
        ffn_dim: 6,
        heads: 2,
        experts: if variant.is_moe() { 2 } else { 1 },
        vocab_size: 5,
        frame_stack: 2,
        feat_dim: 3,
    }
}

pub fn tiny_tokenizer() -> Tokenizer {
    Tokenizer::for_vocab_size(5).unwrap()
}

pub fn utterance(
    id: &str,
    frames: usize,
    feat_dim: usize,
    transcript: &str,
    seed: u64,
) -> Utterance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Utterance {
        id: id.into(),
        features: (0..frames * feat_dim)
            .map(|_| rng.random_range(-1.0f32..1.0))
            .collect(),
        frames,
        feat_dim,
        transcript: transcript.into(),
    }
}

pub fn tiny_batch(seed: u64) -> Batch {
    let a = utterance("a", 10, 3, "ab", seed);
    let b = utterance("b", 7, 3, "c a", seed + 1);
    Batch::new(&[&a, &b], &tiny_tokenizer()).unwrap()
}

/// Training objective on a fresh tape: mean CTC plus `aux_weight` times the
/// load-balancing loss. Returns the tape, the loss var and every layer's
/// assignment.
pub fn objective<S: Real>(
    model: &Model<S>,
    batch: &Batch,
    aux_weight: f64,
) -> (Tape<S>, omni_moe::tensor::Var, Vec<Vec<usize>>) {
    let mut tape = Tape::new();
    let out = model
        .forward(&mut tape, batch, ForwardOptions::default())
        .unwrap();
    let lp = tape.log_softmax(out.logits).unwrap();
    let (ctc, _) = ctc_loss_packed(&mut tape, lp, &out.segments, &batch.targets).unwrap();
    let assignments = out
        .dispatches
        .iter()
        .map(|d| d.assignment.clone())
        .collect();
    let loss = if model.config.variant.is_moe() && aux_weight != 0.0 {
        let lb = load_balance_loss(&mut tape, &out.dispatches, model.config.experts).unwrap();
        let lb = tape.scale(lb, S::from_f64(aux_weight));
        tape.add(ctc, lb).unwrap()
    } else {
        ctc
    };
    (tape, loss, assignments)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}
