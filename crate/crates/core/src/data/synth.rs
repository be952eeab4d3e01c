//! Synthetic speech-like corpus with known structure.
//!
//! Each alphabet symbol owns a fixed random unit-norm feature template. An
//! utterance is a random symbol string rendered as one block of frames per
//! symbol, each frame being the (per-utterance perturbed) template plus white
//! noise. Symbol 0 is the word separator, so transcripts contain words.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Tokenizer, Utterance};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub alphabet_size: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub min_frames_per_token: usize,
    pub max_frames_per_token: usize,
    pub feat_dim: usize,
    /// Frame stacking of the consuming model; generation guarantees
    /// `frames / frame_stack >= 2 * tokens + 1`.
    pub frame_stack: usize,
    pub template_noise_sigma: f64,
    pub channel_noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            alphabet_size: 16,
            min_tokens: 4,
            max_tokens: 8,
            min_frames_per_token: 10,
            max_frames_per_token: 16,
            feat_dim: 80,
            frame_stack: 4,
            template_noise_sigma: 0.05,
            channel_noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        Tokenizer::synthetic(self.alphabet_size)?;
        if self.alphabet_size < 3 {
            return Err(Error::config(
                "alphabet_size",
                "need a separator and two letters",
            ));
        }
        if self.min_tokens == 0 || self.max_tokens < self.min_tokens {
            return Err(Error::config(
                "min_tokens",
                "need 0 < min_tokens <= max_tokens",
            ));
        }
        if self.min_frames_per_token == 0 || self.max_frames_per_token < self.min_frames_per_token {
            return Err(Error::config(
                "min_frames_per_token",
                "need 0 < min_frames_per_token <= max_frames_per_token",
            ));
        }
        if self.feat_dim == 0 || self.frame_stack == 0 {
            return Err(Error::config(
                "feat_dim",
                "feat_dim and frame_stack must be positive",
            ));
        }
        if !(self.template_noise_sigma >= 0.0 && self.channel_noise_sigma >= 0.0) {
            return Err(Error::config(
                "channel_noise_sigma",
                "noise levels must be >= 0",
            ));
        }
        // The shortest utterance must be able to reach the CTC length bound.
        let u = self.min_tokens;
        if self.max_frames_per_token * u < self.frame_stack * (2 * u + 1) {
            return Err(Error::config(
                "max_frames_per_token",
                format!(
                    "{} frames per token cannot give {} stacked frames for {u} tokens",
                    self.max_frames_per_token,
                    2 * u + 1
                ),
            ));
        }
        Ok(())
    }

    pub fn tokenizer(&self) -> Result<Tokenizer> {
        Tokenizer::synthetic(self.alphabet_size)
    }
}

/// Generated corpus plus the ground truth used by oracle checks.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub utterances: Vec<Utterance>,
    /// Unit-norm template per alphabet symbol.
    pub templates: Vec<Vec<f32>>,
    /// Symbol index (into the alphabet) of every frame of every utterance.
    pub frame_symbols: Vec<Vec<usize>>,
}

fn gaussian(rng: &mut rng::StreamRng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn templates(spec: &SynthSpec) -> Vec<Vec<f32>> {
    let mut r = rng::stream(spec.seed, "synth/templates");
    (0..spec.alphabet_size)
        .map(|_| {
            let v: Vec<f64> = (0..spec.feat_dim).map(|_| gaussian(&mut r)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| (x / norm) as f32).collect()
        })
        .collect()
}

/// Deterministic in `(spec, count)`; utterance `i` depends only on
/// `(spec.seed, i)`.
pub fn generate(spec: &SynthSpec, count: usize) -> Result<Vec<Utterance>> {
    Ok(generate_detailed(spec, count)?.utterances)
}

pub fn generate_detailed(spec: &SynthSpec, count: usize) -> Result<SynthCorpus> {
    spec.validate()?;
    let tokenizer = spec.tokenizer()?;
    let alphabet = tokenizer.alphabet();
    let templates = templates(spec);
    let mut utterances = Vec::with_capacity(count);
    let mut frame_symbols = Vec::with_capacity(count);
    for i in 0..count {
        let mut r = rng::substream(spec.seed, "synth/utterance", i as u64);
        let n = r.random_range(spec.min_tokens..=spec.max_tokens);
        let mut symbols: Vec<usize> = Vec::with_capacity(n);
        for pos in 0..n {
            let edge = pos == 0 || pos + 1 == n;
            loop {
                let s = r.random_range(0..spec.alphabet_size);
                if (edge && s == 0) || symbols.last() == Some(&s) {
                    continue;
                }
                symbols.push(s);
                break;
            }
        }
        let durations = loop {
            let d: Vec<usize> = (0..n)
                .map(|_| r.random_range(spec.min_frames_per_token..=spec.max_frames_per_token))
                .collect();
            if d.iter().sum::<usize>() / spec.frame_stack > 2 * n {
                break d;
            }
        };
        let perturbed: Vec<Vec<f64>> = templates
            .iter()
            .map(|t| {
                t.iter()
                    .map(|&x| f64::from(x) + spec.template_noise_sigma * gaussian(&mut r))
                    .collect()
            })
            .collect();
        let frames: usize = durations.iter().sum();
        let mut features = Vec::with_capacity(frames * spec.feat_dim);
        let mut labels = Vec::with_capacity(frames);
        for (&s, &d) in symbols.iter().zip(&durations) {
            for _ in 0..d {
                for &x in &perturbed[s] {
                    features.push((x + spec.channel_noise_sigma * gaussian(&mut r)) as f32);
                }
                labels.push(s);
            }
        }
        let transcript: String = symbols.iter().map(|&s| alphabet[s]).collect();
        utterances.push(Utterance {
            id: format!("utt{i:06}"),
            features,
            frames,
            feat_dim: spec.feat_dim,
            transcript,
        });
        frame_symbols.push(labels);
    }
    Ok(SynthCorpus {
        utterances,
        templates,
        frame_symbols,
    })
}
