//! Trains one desk-scale variant on a synthetic corpus and prints progress.
//!
//! `cargo run --release -p omni-moe --example desk_run -- omni 1000 0`

use std::time::Instant;

use omni_moe::data::synth::{self, SynthSpec};
use omni_moe::encoder::{Model, ModelConfig, Variant};
use omni_moe::train::{self, evaluate, TrainConfig};

fn main() -> omni_moe::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let variant: Variant = args.get(1).map_or("omni", String::as_str).parse()?;
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0);

    let spec = SynthSpec::default();
    let tokenizer = spec.tokenizer()?;
    let corpus = synth::generate(&spec, 2000)?;
    let (train_set, heldout) = corpus.split_at(1800);
    let experts = if variant.is_moe() { 2 } else { 1 };
    let mc = ModelConfig::desk(variant, experts, tokenizer.vocab_size());
    let tc = TrainConfig {
        max_steps: steps,
        seed,
        ..TrainConfig::desk()
    };
    let start = Instant::now();
    let model = Model::build(mc, seed)?;
    let (model, log) = train::train(model, &tc, train_set, &tokenizer, |_, r| {
        if r.step % 50 == 0 {
            eprintln!(
                "step {:5} lr {:.5} ctc {:.4} lb {:.4} |g| {:.3} usage {:?} ({:.1}s)",
                r.step,
                r.lr,
                r.ctc_loss,
                r.load_balance_loss,
                r.grad_norm,
                r.usage,
                start.elapsed().as_secs_f64()
            );
        }
        Ok(())
    })?;
    let eval = evaluate(&model, heldout, &tokenizer, tc.batch_max_frames, None)?;
    println!(
        "{variant} seed {seed}: heldout WER {:.4}, final smoothed ctc {:.4}, {:.1}s",
        eval.wer,
        log.final_smoothed_ctc(50).unwrap_or(f64::NAN),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
