//! Utterances, batching, the synthetic corpus, and on-disk formats.

mod io;
pub mod synth;
mod tokenizer;

pub use io::{
    load_corpus, read_feat, save_corpus, write_feat, FEAT_MAGIC, FEAT_VERSION, MANIFEST_NAME,
};
pub use synth::{generate, generate_detailed, SynthCorpus, SynthSpec};
pub use tokenizer::Tokenizer;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// Row-major `[frames x feat_dim]`.
    pub features: Vec<f32>,
    pub frames: usize,
    pub feat_dim: usize,
    pub transcript: String,
}

impl Utterance {
    pub fn frame(&self, t: usize) -> &[f32] {
        &self.features[t * self.feat_dim..(t + 1) * self.feat_dim]
    }
}

/// Zero-padded features of several utterances plus their targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[batch x max_frames x feat_dim]`, zero beyond each length.
    pub features: Vec<f32>,
    pub max_frames: usize,
    pub feat_dim: usize,
    pub lengths: Vec<usize>,
    pub targets: Vec<Vec<usize>>,
    pub transcripts: Vec<String>,
    pub ids: Vec<String>,
}

impl Batch {
    pub fn new(utterances: &[&Utterance], tokenizer: &Tokenizer) -> Result<Self> {
        let feat_dim = utterances.first().map_or(0, |u| u.feat_dim);
        if let Some(u) = utterances.iter().find(|u| u.feat_dim != feat_dim) {
            return Err(Error::Integrity {
                id: u.id.clone(),
                reason: format!(
                    "feat_dim {} differs from batch feat_dim {feat_dim}",
                    u.feat_dim
                ),
            });
        }
        let max_frames = utterances.iter().map(|u| u.frames).max().unwrap_or(0);
        let mut features = vec![0.0f32; utterances.len() * max_frames * feat_dim];
        for (b, u) in utterances.iter().enumerate() {
            let off = b * max_frames * feat_dim;
            features[off..off + u.frames * feat_dim].copy_from_slice(&u.features);
        }
        Ok(Batch {
            features,
            max_frames,
            feat_dim,
            lengths: utterances.iter().map(|u| u.frames).collect(),
            targets: utterances
                .iter()
                .map(|u| tokenizer.encode(&u.transcript))
                .collect::<Result<_>>()?,
            transcripts: utterances.iter().map(|u| u.transcript.clone()).collect(),
            ids: utterances.iter().map(|u| u.id.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    /// The real (unpadded) frames of utterance `b`.
    pub fn utterance_features(&self, b: usize) -> &[f32] {
        let off = b * self.max_frames * self.feat_dim;
        &self.features[off..off + self.lengths[b] * self.feat_dim]
    }

    pub fn utterance_features_mut(&mut self, b: usize) -> &mut [f32] {
        let off = b * self.max_frames * self.feat_dim;
        &mut self.features[off..off + self.lengths[b] * self.feat_dim]
    }

    pub fn total_frames(&self) -> usize {
        self.lengths.iter().sum()
    }
}

/// Greedy packing in the given order: utterances are appended to the current
/// batch while its total frame count stays within `max_frames`. An utterance
/// longer than the budget gets a batch of its own.
pub fn pack_batches(frames: &[usize], order: &[usize], max_frames: usize) -> Vec<Vec<usize>> {
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut used = 0;
    for &i in order {
        if !current.is_empty() && used + frames[i] > max_frames {
            batches.push(std::mem::take(&mut current));
            used = 0;
        }
        current.push(i);
        used += frames[i];
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packing_respects_budget() {
        let frames = [50, 30, 40, 100, 10];
        let batches = pack_batches(&frames, &[0, 1, 2, 3, 4], 90);
        assert_eq!(batches, vec![vec![0, 1], vec![2], vec![3], vec![4]]);
    }

    #[test]
    fn batch_pads_with_zeros() {
        let t = Tokenizer::synthetic(4).unwrap();
        let a = Utterance {
            id: "a".into(),
            features: vec![1.0; 6],
            frames: 3,
            feat_dim: 2,
            transcript: "ab".into(),
        };
        let b = Utterance {
            id: "b".into(),
            features: vec![2.0; 2],
            frames: 1,
            feat_dim: 2,
            transcript: "c".into(),
        };
        let batch = Batch::new(&[&a, &b], &t).unwrap();
        assert_eq!(batch.max_frames, 3);
        assert_eq!(batch.utterance_features(1), &[2.0, 2.0]);
        assert_eq!(&batch.features[6..], &[2.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(batch.targets, vec![vec![2, 3], vec![4]]);
    }
}
