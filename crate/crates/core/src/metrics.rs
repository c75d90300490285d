//! External clustering metrics: normalized mutual information, adjusted Rand
//! index and Hungarian-matched accuracy.
//!
//! Labels are arbitrary integers; only the induced partitions matter.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Largest number of distinct labels on either side accepted by [`acc`].
pub const ACC_MAX_CLUSTERS: usize = 2048;

/// Co-occurrence counts of two labelings, with compacted label ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContingencyTable {
    rows: usize,
    cols: usize,
    /// `rows x cols`, row-major; rows are true classes.
    counts: Vec<u64>,
    row_sums: Vec<u64>,
    col_sums: Vec<u64>,
    total: u64,
}

/// Maps labels to `0..K` in increasing label order.
fn compact(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut ids = BTreeMap::new();
    for &l in labels {
        ids.entry(l).or_insert(0usize);
    }
    for (i, v) in ids.values_mut().enumerate() {
        *v = i;
    }
    (labels.iter().map(|l| ids[l]).collect(), ids.len())
}

impl ContingencyTable {
    pub fn new(truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::invalid(format!(
                "label vectors differ in length: {} vs {}",
                truth.len(),
                pred.len()
            )));
        }
        if truth.is_empty() {
            return Err(Error::invalid("metrics need at least one sample"));
        }
        let (t, rows) = compact(truth);
        let (p, cols) = compact(pred);
        let mut counts = vec![0u64; rows * cols];
        let mut row_sums = vec![0u64; rows];
        let mut col_sums = vec![0u64; cols];
        for (&a, &b) in t.iter().zip(&p) {
            counts[a * cols + b] += 1;
            row_sums[a] += 1;
            col_sums[b] += 1;
        }
        Ok(Self {
            rows,
            cols,
            counts,
            row_sums,
            col_sums,
            total: truth.len() as u64,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.cols + j]
    }

    pub fn row_sums(&self) -> &[u64] {
        &self.row_sums
    }

    pub fn col_sums(&self) -> &[u64] {
        &self.col_sums
    }

    pub fn total(&self) -> u64 {
        self.total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NmiNorm {
    /// `I / sqrt(H(U) H(V))`
    #[default]
    Sqrt,
    /// `I / ((H(U) + H(V)) / 2)`
    Arithmetic,
}

/// NMI with the default geometric-mean normalization.
pub fn nmi(truth: &[usize], pred: &[usize]) -> Result<f64> {
    nmi_with(truth, pred, NmiNorm::Sqrt)
}

/// Returns 1 when both labelings are a single identical cluster and 0 when
/// exactly one of them has zero entropy.
pub fn nmi_with(truth: &[usize], pred: &[usize], norm: NmiNorm) -> Result<f64> {
    let t = ContingencyTable::new(truth, pred)?;
    if t.rows == 1 && t.cols == 1 {
        return Ok(1.0);
    }
    if t.rows == 1 || t.cols == 1 {
        return Ok(0.0);
    }
    let n = t.total as f64;
    let ln_n = n.ln();
    // entropies and MI share the (ln N - ln a) + (ln n_ij - ln b) grouping so
    // that identical partitions give I == H(U) == H(V) exactly
    let entropy = |sums: &[u64]| -> f64 {
        sums.iter()
            .filter(|&&c| c > 0)
            .map(|&c| c as f64 / n * (ln_n - (c as f64).ln()))
            .sum()
    };
    let hu = entropy(&t.row_sums);
    let hv = entropy(&t.col_sums);
    let mut mi = 0.0;
    for i in 0..t.rows {
        let a = t.row_sums[i] as f64;
        for j in 0..t.cols {
            let c = t.get(i, j);
            if c == 0 {
                continue;
            }
            let b = t.col_sums[j] as f64;
            let c = c as f64;
            mi += c / n * ((ln_n - a.ln()) + (c.ln() - b.ln()));
        }
    }
    let denom = match norm {
        NmiNorm::Sqrt => (hu * hv).sqrt(),
        NmiNorm::Arithmetic => 0.5 * (hu + hv),
    };
    Ok((mi / denom).clamp(0.0, 1.0))
}

fn pairs(c: u64) -> f64 {
    (c as f64) * (c.saturating_sub(1) as f64) / 2.0
}

/// Adjusted Rand index by pair counting. A zero denominator (both labelings
/// trivial in the same way) yields 1.
pub fn ari(truth: &[usize], pred: &[usize]) -> Result<f64> {
    if truth.len() < 2 {
        return Err(Error::invalid("ARI needs at least two samples"));
    }
    let t = ContingencyTable::new(truth, pred)?;
    let index: f64 = t.counts.iter().map(|&c| pairs(c)).sum();
    let a: f64 = t.row_sums.iter().map(|&c| pairs(c)).sum();
    let b: f64 = t.col_sums.iter().map(|&c| pairs(c)).sum();
    let expected = a * b / pairs(t.total);
    let max = 0.5 * (a + b);
    let denom = max - expected;
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok((index - expected) / denom)
}

/// Best agreement fraction over one-to-one matchings of predicted clusters to
/// true classes.
pub fn acc(truth: &[usize], pred: &[usize]) -> Result<f64> {
    let t = ContingencyTable::new(truth, pred)?;
    let size = t.rows.max(t.cols);
    if size > ACC_MAX_CLUSTERS {
        return Err(Error::invalid(format!(
            "ACC supports at most {ACC_MAX_CLUSTERS} clusters per side, got {size}"
        )));
    }
    let mut cost = vec![0i64; size * size];
    for i in 0..t.rows {
        for j in 0..t.cols {
            cost[i * size + j] = -(t.get(i, j) as i64);
        }
    }
    let matching = hungarian(&cost, size);
    let matched: i64 = matching.iter().enumerate().map(|(i, &j)| -cost[i * size + j]).sum();
    Ok(matched as f64 / t.total as f64)
}

/// Minimum-cost perfect matching of a square `n x n` cost matrix; returns the
/// column assigned to every row. Shortest augmenting paths with potentials,
/// `O(n^3)`, exact on integer costs.
pub fn hungarian(cost: &[i64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n, "cost matrix must be n x n");
    const INF: i64 = i64::MAX / 4;
    // 1-based internally; index 0 is a virtual column
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut col_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        col_row[0] = i;
        let mut j0 = 0;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_row[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_row[j0] = col_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_col = vec![0usize; n];
    for j in 1..=n {
        if col_row[j] > 0 {
            row_col[col_row[j] - 1] = j - 1;
        }
    }
    row_col
}

/// All three metrics at once.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub nmi: f64,
    pub ari: f64,
    pub acc: f64,
}

pub fn score(truth: &[usize], pred: &[usize]) -> Result<Scores> {
    score_with(truth, pred, NmiNorm::default())
}

pub fn score_with(truth: &[usize], pred: &[usize], norm: NmiNorm) -> Result<Scores> {
    Ok(Scores {
        nmi: nmi_with(truth, pred, norm)?,
        ari: ari(truth, pred)?,
        acc: acc(truth, pred)?,
    })
}
