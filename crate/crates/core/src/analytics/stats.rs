use std::collections::HashMap;

use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use serde::Serialize;

use super::{FrameToken, RoutingRecord};
use crate::error::{Error, Result};

/// Joint counts of the expert chosen at layer `l` (rows) and at layer `l + 1`
/// (columns) for the same frames.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<u64>>,
    pub layer_pair: (usize, usize),
    pub total: u64,
}

impl ContingencyTable {
    pub fn new(counts: Vec<Vec<u64>>, layer_pair: (usize, usize)) -> Result<Self> {
        let cols = counts.first().map_or(0, Vec::len);
        if let Some(r) = counts.iter().find(|r| r.len() != cols) {
            return Err(Error::shape("contingency", &[cols], &[r.len()]));
        }
        let total = counts.iter().flatten().sum();
        Ok(ContingencyTable {
            counts,
            layer_pair,
            total,
        })
    }

    pub fn rows(&self) -> usize {
        self.counts.len()
    }

    pub fn cols(&self) -> usize {
        self.counts.first().map_or(0, Vec::len)
    }

    fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    fn col_sums(&self) -> Vec<u64> {
        (0..self.cols())
            .map(|j| self.counts.iter().map(|r| r[j]).sum())
            .collect()
    }
}

type FrameKey<'a> = (&'a str, usize);

/// Table between `layer` and `layer + 1`.
pub fn contingency(
    records: &[RoutingRecord],
    layer: usize,
    experts: usize,
) -> Result<ContingencyTable> {
    let mut next: HashMap<FrameKey, usize> = HashMap::new();
    for r in records.iter().filter(|r| r.layer == layer + 1) {
        next.insert((r.utterance_id.as_str(), r.frame), r.expert);
    }
    let mut counts = vec![vec![0u64; experts]; experts];
    let mut seen = 0usize;
    for r in records.iter().filter(|r| r.layer == layer) {
        let b = *next
            .get(&(r.utterance_id.as_str(), r.frame))
            .ok_or_else(|| {
                Error::Contract(format!(
                    "frame {} of {} has no routing record at layer {}",
                    r.frame,
                    r.utterance_id,
                    layer + 1
                ))
            })?;
        for e in [r.expert, b] {
            if e >= experts {
                return Err(Error::Index {
                    op: "contingency",
                    index: e,
                    bound: experts,
                });
            }
        }
        counts[r.expert][b] += 1;
        seen += 1;
    }
    if seen == 0 {
        return Err(Error::Contract(format!(
            "no routing records for layer {layer}"
        )));
    }
    if seen != next.len() {
        return Err(Error::Contract(format!(
            "layers {layer} and {} cover different frames",
            layer + 1
        )));
    }
    ContingencyTable::new(counts, (layer, layer + 1))
}

/// Pearson statistic against the independence model of the margins, summed
/// over cells with a non-zero expected count.
pub fn chi_square(table: &ContingencyTable) -> f64 {
    let n = table.total as f64;
    if n == 0.0 {
        return 0.0;
    }
    let rows = table.row_sums();
    let cols = table.col_sums();
    let mut chi2 = 0.0;
    for (i, &ri) in rows.iter().enumerate() {
        for (j, &cj) in cols.iter().enumerate() {
            if ri == 0 || cj == 0 {
                continue;
            }
            let expected = ri as f64 * cj as f64 / n;
            let d = table.counts[i][j] as f64 - expected;
            chi2 += d * d / expected;
        }
    }
    chi2
}

/// `sqrt(chi2 / (n (k - 1)))` with `k` the smaller number of non-empty rows
/// or columns; 0 when `k == 1`.
pub fn cramers_v(table: &ContingencyTable) -> Result<f64> {
    if table.total == 0 {
        return Err(Error::Contract("Cramér's V of an empty table".into()));
    }
    let k = table
        .row_sums()
        .iter()
        .filter(|&&s| s > 0)
        .count()
        .min(table.col_sums().iter().filter(|&&s| s > 0).count());
    if k <= 1 {
        return Ok(0.0);
    }
    let v = (chi_square(table) / (table.total as f64 * (k - 1) as f64)).sqrt();
    Ok(v.min(1.0))
}

/// Cramér's V for every adjacent layer pair.
pub fn cramers_v_by_layer(
    records: &[RoutingRecord],
    layers: usize,
    experts: usize,
) -> Result<Vec<f64>> {
    (0..layers.saturating_sub(1))
        .map(|l| cramers_v(&contingency(records, l, experts)?))
        .collect()
}

/// Permutation `pi` of column labels maximizing `sum_a counts[a][pi[a]]`.
pub fn best_matching(table: &ContingencyTable) -> Result<Vec<usize>> {
    let n = table.rows();
    if n != table.cols() {
        return Err(Error::shape("align_labels", &[n, n], &[n, table.cols()]));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let weights = table
        .counts
        .iter()
        .map(|r| r.iter().map(|&c| i64::try_from(c).unwrap_or(i64::MAX)))
        .collect::<Vec<_>>();
    let m = Matrix::from_rows(weights).map_err(|e| Error::Contract(e.to_string()))?;
    Ok(kuhn_munkres(&m).1)
}

/// Relabeling of every layer so that each adjacent pair agrees as much as
/// possible with the previous, aligned layer. `perms[l][raw] = aligned`;
/// layer 0 keeps its labels.
pub fn align_labels(tables: &[ContingencyTable]) -> Result<Vec<Vec<usize>>> {
    let n = tables.first().map_or(0, ContingencyTable::rows);
    let mut perms = vec![(0..n).collect::<Vec<usize>>()];
    for t in tables {
        if t.rows() != n {
            return Err(Error::shape("align_labels", &[n, n], &[t.rows(), t.cols()]));
        }
        let pi = best_matching(t)?;
        let prev = perms.last().expect("starts non-empty");
        let mut next = vec![0; n];
        for (a, &b) in pi.iter().enumerate() {
            next[b] = prev[a];
        }
        perms.push(next);
    }
    Ok(perms)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EntropyRow {
    pub symbol: usize,
    pub frames: usize,
    /// Bits per layer; `None` when the group has no frames at that layer.
    pub entropy: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EntropyTable {
    pub use_probs: bool,
    pub rows: Vec<EntropyRow>,
    /// (group, layer) cells without frames.
    pub skipped: usize,
}

fn entropy_bits(q: &[f64]) -> f64 {
    let mut h = 0.0;
    for &x in q.iter().filter(|&&x| x > 0.0) {
        h -= x * x.log2();
    }
    h.max(0.0)
}

/// Expert entropy of the `top_k` most frequent frame symbols at every layer.
/// Groups are ranked by frame count (lower symbol first on ties). The
/// distribution is the empirical assignment frequency, or the mean router
/// probability row with `use_probs`.
pub fn routing_entropy(
    records: &[RoutingRecord],
    tokens: &[FrameToken],
    top_k: usize,
    layers: usize,
    experts: usize,
    use_probs: bool,
) -> Result<EntropyTable> {
    let mut symbol_of: HashMap<FrameKey, usize> = HashMap::new();
    let mut freq: HashMap<usize, usize> = HashMap::new();
    for t in tokens {
        symbol_of.insert((t.utterance_id.as_str(), t.frame), t.symbol);
        *freq.entry(t.symbol).or_default() += 1;
    }
    let mut ranked: Vec<(usize, usize)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(top_k);
    let slot: HashMap<usize, usize> = ranked
        .iter()
        .enumerate()
        .map(|(i, &(s, _))| (s, i))
        .collect();

    // mass[group][layer][expert], frames[group][layer]
    let mut mass = vec![vec![vec![0.0f64; experts]; layers]; ranked.len()];
    let mut frames = vec![vec![0usize; layers]; ranked.len()];
    for r in records {
        let symbol = symbol_of
            .get(&(r.utterance_id.as_str(), r.frame))
            .ok_or_else(|| {
                Error::Contract(format!(
                    "no frame symbol for {} frame {}",
                    r.utterance_id, r.frame
                ))
            })?;
        let Some(&g) = slot.get(symbol) else { continue };
        if r.layer >= layers || r.expert >= experts {
            return Err(Error::Index {
                op: "routing_entropy",
                index: r.layer.max(r.expert),
                bound: layers.min(experts),
            });
        }
        if use_probs {
            if r.probs.len() != experts {
                return Err(Error::Contract(
                    "probability-averaged entropy needs router probabilities".into(),
                ));
            }
            for (m, &p) in mass[g][r.layer].iter_mut().zip(&r.probs) {
                *m += p;
            }
        } else {
            mass[g][r.layer][r.expert] += 1.0;
        }
        frames[g][r.layer] += 1;
    }

    let mut skipped = 0;
    let rows = ranked
        .iter()
        .enumerate()
        .map(|(g, &(symbol, count))| {
            let entropy = (0..layers)
                .map(|l| {
                    let n = frames[g][l];
                    if n == 0 {
                        skipped += 1;
                        return None;
                    }
                    let q: Vec<f64> = mass[g][l].iter().map(|m| m / n as f64).collect();
                    Some(entropy_bits(&q))
                })
                .collect();
            EntropyRow {
                symbol,
                frames: count,
                entropy,
            }
        })
        .collect();
    if skipped > 0 {
        log::warn!("routing entropy: {skipped} empty (group, layer) cells skipped");
    }
    Ok(EntropyTable {
        use_probs,
        rows,
        skipped,
    })
}
