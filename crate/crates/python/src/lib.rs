//! Python bindings: routing statistics, CTC, WER, parameter accounting and
//! checkpoint evaluation.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use omni_moe::analytics::{self, ContingencyTable};
use omni_moe::data::{load_corpus, Tokenizer};
use omni_moe::encoder::{load_checkpoint, Model, ModelConfig, ParamCounts, Variant};
use omni_moe::tensor::Tensor;
use omni_moe::train;
use omni_moe::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn table(counts: Vec<Vec<u64>>, pair: (usize, usize)) -> PyResult<ContingencyTable> {
    ContingencyTable::new(counts, pair).map_err(py_err)
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor<f64>> {
    Tensor::from_rows(rows).map_err(py_err)
}

fn counts_dict(c: ParamCounts) -> HashMap<&'static str, usize> {
    HashMap::from([
        ("frontend", c.frontend),
        ("attention", c.attention),
        ("layer_norm", c.layer_norm),
        ("ffn", c.ffn),
        ("routers", c.routers),
        ("head", c.head),
        ("total", c.total),
    ])
}

fn load(path: PathBuf) -> PyResult<Model<f32>> {
    load_checkpoint(path).map_err(py_err)
}

/// Cramér's V of a contingency table given as a list of rows.
#[pyfunction]
fn cramers_v(counts: Vec<Vec<u64>>) -> PyResult<f64> {
    analytics::cramers_v(&table(counts, (0, 1))?).map_err(py_err)
}

/// Per-layer expert permutations for tables between consecutive layers;
/// `result[l][raw]` is the aligned label of expert `raw` in layer `l`.
#[pyfunction]
fn align_labels(tables: Vec<Vec<Vec<u64>>>) -> PyResult<Vec<Vec<usize>>> {
    let tables = tables
        .into_iter()
        .enumerate()
        .map(|(l, c)| table(c, (l, l + 1)))
        .collect::<PyResult<Vec<_>>>()?;
    analytics::align_labels(&tables).map_err(py_err)
}

/// CTC negative log-likelihood of `target` and its gradient with respect to
/// the `[T x V]` log-probabilities. Label 0 is the blank.
#[pyfunction]
fn ctc_loss(log_probs: Vec<Vec<f64>>, target: Vec<usize>) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let lp = matrix(&log_probs)?;
    let (loss, grad) = omni_moe::ctc::ctc_nll(&lp, &target).map_err(py_err)?;
    let v = lp.cols();
    Ok((loss, grad.data().chunks(v).map(<[f64]>::to_vec).collect()))
}

/// Per-frame argmax, repeats merged, blanks dropped.
#[pyfunction]
fn greedy_decode(log_probs: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
    Ok(omni_moe::ctc::greedy_decode(&matrix(&log_probs)?))
}

/// Word error rate of one hypothesis against one reference.
#[pyfunction]
fn wer(reference: &str, hypothesis: &str) -> PyResult<f64> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    omni_moe::ctc::wer(&r, &h).map_err(py_err)
}

/// Parameter counts of an architecture, by component.
#[pyfunction]
#[pyo3(signature = (variant, embed_dim, experts, layers=16, ffn_dim=4096, heads=8, vocab_size=8000, frame_stack=4, feat_dim=80))]
#[allow(clippy::too_many_arguments)]
fn param_counts(
    variant: &str,
    embed_dim: usize,
    experts: usize,
    layers: usize,
    ffn_dim: usize,
    heads: usize,
    vocab_size: usize,
    frame_stack: usize,
    feat_dim: usize,
) -> PyResult<HashMap<&'static str, usize>> {
    let variant: Variant = variant.parse().map_err(py_err)?;
    let config = ModelConfig {
        variant,
        layers,
        embed_dim,
        ffn_dim,
        heads,
        experts: if variant.is_moe() { experts } else { 1 },
        vocab_size,
        frame_stack,
        feat_dim,
    };
    config.validate().map_err(py_err)?;
    Ok(counts_dict(config.symbolic_param_count()))
}

/// Variant name and parameter counts stored in a checkpoint.
#[pyfunction]
fn inspect_checkpoint(path: PathBuf) -> PyResult<(String, HashMap<&'static str, usize>)> {
    let model = load(path)?;
    Ok((
        model.config.variant.to_string(),
        counts_dict(model.param_counts()),
    ))
}

/// Greedy-decoding WER of a checkpoint on a corpus directory.
#[pyfunction]
#[pyo3(signature = (checkpoint, data, batch_max_frames=1600))]
fn evaluate(checkpoint: PathBuf, data: PathBuf, batch_max_frames: usize) -> PyResult<f64> {
    let model = load(checkpoint)?;
    let tokenizer = Tokenizer::for_vocab_size(model.config.vocab_size).map_err(py_err)?;
    let utts = load_corpus(data).map_err(py_err)?;
    let result =
        train::evaluate(&model, &utts, &tokenizer, batch_max_frames, None).map_err(py_err)?;
    Ok(result.wer)
}

/// Cramér's V between every pair of adjacent MoE layers of a checkpoint.
#[pyfunction]
#[pyo3(signature = (checkpoint, data, batch_max_frames=1600))]
fn adjacent_cramers_v(
    checkpoint: PathBuf,
    data: PathBuf,
    batch_max_frames: usize,
) -> PyResult<Vec<f64>> {
    let model = load(checkpoint)?;
    let tokenizer = Tokenizer::for_vocab_size(model.config.vocab_size).map_err(py_err)?;
    let utts = load_corpus(data).map_err(py_err)?;
    let dump =
        analytics::dump_routes(&model, &utts, &tokenizer, batch_max_frames).map_err(py_err)?;
    analytics::cramers_v_by_layer(&dump.records, dump.layers, dump.experts).map_err(py_err)
}

#[pymodule]
fn omni_moe_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(cramers_v, m)?)?;
    m.add_function(wrap_pyfunction!(align_labels, m)?)?;
    m.add_function(wrap_pyfunction!(ctc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(greedy_decode, m)?)?;
    m.add_function(wrap_pyfunction!(wer, m)?)?;
    m.add_function(wrap_pyfunction!(param_counts, m)?)?;
    m.add_function(wrap_pyfunction!(inspect_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(adjacent_cramers_v, m)?)?;
    Ok(())
}
