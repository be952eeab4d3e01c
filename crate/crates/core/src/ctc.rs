//! CTC loss over the extended blank-interleaved label lattice, greedy
//! decoding, and word error rate.

use crate::error::{Error, Result};
use crate::tensor::{argmax, Real, Tape, Tensor, Var};

pub const BLANK: usize = 0;

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Minimum frames needed to emit `target`: one per label plus one blank
/// between each pair of equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Negative log-likelihood of `target` and its gradient w.r.t. `log_probs`
/// (`[T x V]`, treated as free per-frame log scores).
pub fn ctc_nll<S: Real>(log_probs: &Tensor<S>, target: &[usize]) -> Result<(f64, Tensor<S>)> {
    if log_probs.shape().len() != 2 {
        return Err(Error::shape("ctc_loss", log_probs.shape(), &[0, 0]));
    }
    let (t_len, vocab) = (log_probs.rows(), log_probs.cols());
    if let Some(&bad) = target.iter().find(|&&k| k == BLANK || k >= vocab) {
        return Err(Error::Index {
            op: "ctc_loss target",
            index: bad,
            bound: vocab,
        });
    }
    let required = min_frames(target);
    if t_len < required || t_len == 0 {
        return Err(Error::InfeasibleTarget {
            frames: t_len,
            target_len: target.len(),
            required: required.max(1),
        });
    }

    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &k in target {
        ext.push(k);
        ext.push(BLANK);
    }
    let s_len = ext.len();
    let lp = |t: usize, k: usize| log_probs.at(t, k).as_f64();
    // skip transition s-2 -> s allowed for a label differing from label s-2
    let can_skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    let ninf = f64::NEG_INFINITY;
    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if can_skip(s) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf { ninf } else { a + lp(t, ext[s]) };
        }
    }
    let last = (t_len - 1) * s_len;
    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[last + s_len - 2]);
    }
    if !log_p.is_finite() {
        return Err(Error::NonFinite("ctc total probability".into()));
    }

    let mut beta = vec![ninf; t_len * s_len];
    beta[last + s_len - 1] = lp(t_len - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(t_len - 1, ext[s_len - 2]);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut b = next[s];
            if s + 1 < s_len {
                b = log_add(b, next[s + 1]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = log_add(b, next[s + 2]);
            }
            beta[t * s_len + s] = if b == ninf { ninf } else { b + lp(t, ext[s]) };
        }
    }

    let mut grad = Tensor::zeros(&[t_len, vocab]);
    let mut occupancy = vec![ninf; vocab];
    for t in 0..t_len {
        occupancy.iter_mut().for_each(|o| *o = ninf);
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            occupancy[ext[s]] = log_add(occupancy[ext[s]], ab);
        }
        let row = &mut grad.data_mut()[t * vocab..(t + 1) * vocab];
        for k in 0..vocab {
            if occupancy[k] > ninf {
                row[k] = S::from_f64(-(occupancy[k] - lp(t, k) - log_p).exp());
            }
        }
    }
    Ok((-log_p, grad))
}

/// Differentiable CTC loss of one utterance.
pub fn ctc_loss<S: Real>(tape: &mut Tape<S>, log_probs: Var, target: &[usize]) -> Result<Var> {
    let (loss, grad) = ctc_nll(tape.value(log_probs), target)?;
    Ok(tape.precomputed(log_probs, S::from_f64(loss), grad))
}

/// Mean CTC loss over the utterances of a packed `[sum T x V]` matrix, one
/// `(start, len)` segment per target. Also returns the per-utterance losses.
pub fn ctc_loss_packed<S: Real>(
    tape: &mut Tape<S>,
    log_probs: Var,
    segments: &[(usize, usize)],
    targets: &[Vec<usize>],
) -> Result<(Var, Vec<f64>)> {
    if segments.len() != targets.len() || segments.is_empty() {
        return Err(Error::shape(
            "ctc_loss_packed",
            &[segments.len()],
            &[targets.len()],
        ));
    }
    let lp = tape.value(log_probs);
    let mut grad = Tensor::zeros(lp.shape());
    let vocab = lp.cols();
    let inv = 1.0 / segments.len() as f64;
    let mut losses = Vec::with_capacity(segments.len());
    for (&(start, len), target) in segments.iter().zip(targets) {
        let (loss, g) = ctc_nll(&lp.slice_rows(start, len), target)?;
        let dst = &mut grad.data_mut()[start * vocab..(start + len) * vocab];
        for (o, &x) in dst.iter_mut().zip(g.data()) {
            *o = S::from_f64(x.as_f64() * inv);
        }
        losses.push(loss);
    }
    let mean = losses.iter().sum::<f64>() * inv;
    Ok((tape.precomputed(log_probs, S::from_f64(mean), grad), losses))
}

/// Collapses a frame-level label path: merge repeats, then drop blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Per-frame argmax labels (lowest index on ties).
pub fn frame_argmax<S: Real>(scores: &Tensor<S>) -> Vec<usize> {
    (0..scores.rows()).map(|t| argmax(scores.row(t))).collect()
}

pub fn greedy_decode<S: Real>(log_probs: &Tensor<S>) -> Vec<usize> {
    collapse(&frame_argmax(log_probs))
}

/// Unit-cost Levenshtein distance.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Lowercase and split on whitespace.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Word error rate of one hypothesis.
pub fn wer<T: AsRef<str>>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Contract("WER needs a non-empty reference".into()));
    }
    let r: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    let h: Vec<&str> = hypothesis.iter().map(AsRef::as_ref).collect();
    Ok(edit_distance(&r, &h) as f64 / r.len() as f64)
}

/// Corpus-level WER: total edits over total reference words.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WerTally {
    pub edits: usize,
    pub words: usize,
}

impl WerTally {
    pub fn add(&mut self, reference: &str, hypothesis: &str) -> usize {
        let r = normalize_words(reference);
        let h = normalize_words(hypothesis);
        let e = edit_distance(&r, &h);
        self.edits += e;
        self.words += r.len();
        e
    }

    pub fn rate(&self) -> Result<f64> {
        if self.words == 0 {
            return Err(Error::Contract("WER needs a non-empty reference".into()));
        }
        Ok(self.edits as f64 / self.words as f64)
    }
}
