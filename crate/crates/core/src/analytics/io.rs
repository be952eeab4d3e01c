//! CSV route dumps and JSON usage maps.
//!
//! `routes.csv`: `utterance_id,layer,frame,expert,gate`.
//! Probability sidecar: `utterance_id,layer,frame,p0,...,p{N-1}`, rows in the
//! same order as `routes.csv`.
//! `frame_tokens.csv`: `utterance_id,frame,symbol`.
//! Reals are written in shortest round-trip form, so reading a dump back
//! reproduces the in-memory values exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::Serialize;

use super::{FrameToken, RoutingRecord};
use crate::error::{Error, Result};

fn parse<T: std::str::FromStr>(field: &str, what: &str, line: usize) -> Result<T> {
    field.parse().map_err(|_| Error::Manifest {
        line,
        reason: format!("{what} `{field}` does not parse"),
    })
}

fn field(rec: &csv::StringRecord, i: usize, line: usize) -> Result<&str> {
    rec.get(i).ok_or_else(|| Error::Manifest {
        line,
        reason: format!("missing column {i}"),
    })
}

pub fn write_routes<W: Write>(out: W, records: &[RoutingRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["utterance_id", "layer", "frame", "expert", "gate"])?;
    for r in records {
        w.write_record([
            r.utterance_id.clone(),
            r.layer.to_string(),
            r.frame.to_string(),
            r.expert.to_string(),
            r.gate.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_probs<W: Write>(out: W, records: &[RoutingRecord]) -> Result<()> {
    let n = records.first().map_or(0, |r| r.probs.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["utterance_id".to_string(), "layer".into(), "frame".into()];
    header.extend((0..n).map(|j| format!("p{j}")));
    w.write_record(&header)?;
    for r in records {
        if r.probs.len() != n {
            return Err(Error::Contract(
                "records carry differing expert counts".into(),
            ));
        }
        let mut row = vec![
            r.utterance_id.clone(),
            r.layer.to_string(),
            r.frame.to_string(),
        ];
        row.extend(r.probs.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `routes.csv`, attaching probabilities from the sidecar when given.
pub fn read_routes<R: Read, P: Read>(routes: R, probs: Option<P>) -> Result<Vec<RoutingRecord>> {
    let mut out = Vec::new();
    for (i, rec) in csv::Reader::from_reader(routes).records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        out.push(RoutingRecord {
            utterance_id: field(&rec, 0, line)?.to_string(),
            layer: parse(field(&rec, 1, line)?, "layer", line)?,
            frame: parse(field(&rec, 2, line)?, "frame", line)?,
            expert: parse(field(&rec, 3, line)?, "expert", line)?,
            gate: parse(field(&rec, 4, line)?, "gate", line)?,
            probs: Vec::new(),
        });
    }
    if let Some(p) = probs {
        let mut reader = csv::Reader::from_reader(p);
        let mut n = 0;
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let r = out.get_mut(i).ok_or_else(|| Error::Manifest {
                line,
                reason: "probability sidecar has more rows than the route dump".into(),
            })?;
            let (id, layer, frame) = (
                field(&rec, 0, line)?,
                parse::<usize>(field(&rec, 1, line)?, "layer", line)?,
                parse::<usize>(field(&rec, 2, line)?, "frame", line)?,
            );
            if id != r.utterance_id || layer != r.layer || frame != r.frame {
                return Err(Error::Manifest {
                    line,
                    reason: "probability sidecar row does not match the route dump".into(),
                });
            }
            r.probs = (3..rec.len())
                .map(|j| parse(&rec[j], "probability", line))
                .collect::<Result<_>>()?;
            n = i + 1;
        }
        if n != out.len() {
            return Err(Error::Manifest {
                line: n + 2,
                reason: "probability sidecar has fewer rows than the route dump".into(),
            });
        }
    }
    Ok(out)
}

pub fn write_frame_tokens<W: Write>(out: W, tokens: &[FrameToken]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["utterance_id", "frame", "symbol"])?;
    for t in tokens {
        w.write_record([
            t.utterance_id.clone(),
            t.frame.to_string(),
            t.symbol.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_frame_tokens<R: Read>(input: R) -> Result<Vec<FrameToken>> {
    let mut out = Vec::new();
    for (i, rec) in csv::Reader::from_reader(input).records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        out.push(FrameToken {
            utterance_id: field(&rec, 0, line)?.to_string(),
            frame: parse(field(&rec, 1, line)?, "frame", line)?,
            symbol: parse(field(&rec, 2, line)?, "symbol", line)?,
        });
    }
    Ok(out)
}

/// Aligned expert label of every frame at every layer of one utterance.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UsageMap {
    pub utterance_id: String,
    /// `grid[layer][frame]`.
    pub grid: Vec<Vec<usize>>,
}

/// Per-utterance `[L x T']` label grids, relabeled with `perms` from
/// [`super::align_labels`] (identity when `perms` is empty).
pub fn usage_maps(
    records: &[RoutingRecord],
    layers: usize,
    perms: &[Vec<usize>],
) -> Result<Vec<UsageMap>> {
    let mut by_utt: BTreeMap<&str, Vec<&RoutingRecord>> = BTreeMap::new();
    for r in records {
        by_utt.entry(r.utterance_id.as_str()).or_default().push(r);
    }
    by_utt
        .into_iter()
        .map(|(id, rs)| {
            let frames = rs.iter().map(|r| r.frame + 1).max().unwrap_or(0);
            let mut grid = vec![vec![0usize; frames]; layers];
            for r in rs {
                if r.layer >= layers {
                    return Err(Error::Index {
                        op: "usage_maps",
                        index: r.layer,
                        bound: layers,
                    });
                }
                let label = match perms.get(r.layer) {
                    Some(p) => *p.get(r.expert).ok_or(Error::Index {
                        op: "usage_maps",
                        index: r.expert,
                        bound: p.len(),
                    })?,
                    None => r.expert,
                };
                grid[r.layer][r.frame] = label;
            }
            Ok(UsageMap {
                utterance_id: id.to_string(),
                grid,
            })
        })
        .collect()
}
