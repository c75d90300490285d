//! K-means: batch Lloyd iterations, nearest-centroid assignment and the
//! count-weighted online centroid update used during joint training.
//!
//! The cost of a partition is `sum_i ||h_i - m_{s_i}||^2`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{sq_dist, Matrix};
use crate::seed::{self, Stream};

/// Centroids `m_k`, per-sample assignments `s_i` and per-cluster counts `c_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    /// `K x R`
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    pub counts: Vec<u64>,
}

impl ClusterState {
    pub fn new(centroids: Matrix, assignments: Vec<usize>, counts: Vec<u64>) -> Result<Self> {
        let k = centroids.rows();
        if k == 0 {
            return Err(Error::invalid("a cluster state needs at least one centroid"));
        }
        if counts.len() != k {
            return Err(Error::invalid(format!("{} counts for {k} centroids", counts.len())));
        }
        if counts.contains(&0) {
            return Err(Error::invalid("cluster counts must be >= 1"));
        }
        if let Some(bad) = assignments.iter().find(|&&a| a >= k) {
            return Err(Error::invalid(format!("assignment {bad} out of range for K={k}")));
        }
        if !centroids.is_finite() {
            return Err(Error::NonFinite("centroids".into()));
        }
        Ok(Self {
            centroids,
            assignments,
            counts,
        })
    }

    /// State whose counts are the member counts of `assignments`, with empty
    /// clusters counted as 1.
    pub fn from_assignments(centroids: Matrix, assignments: Vec<usize>) -> Result<Self> {
        let counts = member_counts(&assignments, centroids.rows());
        Self::new(centroids, assignments, counts)
    }

    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    /// Rows of `m` selected by the assignments, i.e. `M s_i` for every sample.
    pub fn assigned_centroids(&self) -> Matrix {
        self.centroids.select_rows(&self.assignments)
    }

    /// Cost of the stored assignments against the stored centroids.
    pub fn cost(&self, h: &Matrix) -> Result<f64> {
        partition_cost(h, &self.centroids, &self.assignments)
    }
}

fn member_counts(assignments: &[usize], k: usize) -> Vec<u64> {
    let mut counts = vec![0u64; k];
    for &a in assignments {
        if a < k {
            counts[a] += 1;
        }
    }
    counts.iter_mut().for_each(|c| *c = (*c).max(1));
    counts
}

pub fn partition_cost(h: &Matrix, m: &Matrix, assignments: &[usize]) -> Result<f64> {
    if h.rows() != assignments.len() || h.cols() != m.cols() {
        return Err(Error::invalid(format!(
            "cost of {} assignments for {:?} points against {:?} centroids",
            assignments.len(),
            h.shape(),
            m.shape()
        )));
    }
    let mut cost = 0.0;
    for (row, &a) in h.row_iter().zip(assignments) {
        if a >= m.rows() {
            return Err(Error::invalid(format!("assignment {a} out of range")));
        }
        cost += sq_dist(row, m.row(a));
    }
    Ok(cost)
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn assign_one(h: &[f64], m: &Matrix) -> Result<usize> {
    if m.rows() == 0 {
        return Err(Error::invalid("cannot assign against an empty centroid set"));
    }
    if h.len() != m.cols() {
        return Err(Error::Shape {
            op: "assign_one",
            left: (1, h.len()),
            right: m.shape(),
        });
    }
    Ok(nearest(h, m).0)
}

fn nearest(h: &[f64], m: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in m.row_iter().enumerate() {
        let d = sq_dist(h, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn check_assign_shapes(h: &Matrix, m: &Matrix) -> Result<()> {
    if m.rows() == 0 {
        return Err(Error::invalid("cannot assign against an empty centroid set"));
    }
    if h.cols() != m.cols() {
        return Err(Error::Shape {
            op: "assign_all",
            left: h.shape(),
            right: m.shape(),
        });
    }
    Ok(())
}

/// Nearest centroid for every row, in parallel when the `parallel` feature
/// is enabled. Identical to [`assign_all_sequential`].
pub fn assign_all(h: &Matrix, m: &Matrix) -> Result<Vec<usize>> {
    Ok(nearest_all(h, m)?.into_iter().map(|(k, _)| k).collect())
}

pub fn assign_all_sequential(h: &Matrix, m: &Matrix) -> Result<Vec<usize>> {
    check_assign_shapes(h, m)?;
    Ok(h.row_iter().map(|r| nearest(r, m).0).collect())
}

fn nearest_all(h: &Matrix, m: &Matrix) -> Result<Vec<(usize, f64)>> {
    check_assign_shapes(h, m)?;
    #[cfg(feature = "parallel")]
    {
        let cols = h.cols().max(1);
        Ok(h.as_slice()
            .par_chunks(cols)
            .map(|r| nearest(r, m))
            .collect())
    }
    #[cfg(not(feature = "parallel"))]
    {
        Ok(h.row_iter().map(|r| nearest(r, m)).collect())
    }
}

/// When the count of the target cluster is incremented relative to its
/// centroid step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CountOrder {
    /// `c_k += 1`, then `m_k -= (m_k - h) / c_k`: the centroid stays the exact
    /// running mean of the samples it has absorbed.
    #[default]
    IncrementFirst,
    /// `m_k -= (m_k - h) / c_k` with the count from before the sample, then
    /// `c_k += 1`.
    StaleCount,
}

/// Online centroid step for one sample `h` assigned to cluster `k`. Only
/// centroid `k` and its count change.
pub fn centroid_sgd_update(state: &mut ClusterState, h: &[f64], k: usize, order: CountOrder) -> Result<()> {
    if k >= state.k() {
        return Err(Error::invalid(format!("cluster {k} out of range for K={}", state.k())));
    }
    if h.len() != state.centroids.cols() {
        return Err(Error::Shape {
            op: "centroid_sgd_update",
            left: (1, h.len()),
            right: state.centroids.shape(),
        });
    }
    if state.counts[k] == 0 {
        return Err(Error::invalid("cluster counts must be >= 1"));
    }
    if order == CountOrder::IncrementFirst {
        state.counts[k] += 1;
    }
    let rate = 1.0 / state.counts[k] as f64;
    for (c, x) in state.centroids.row_mut(k).iter_mut().zip(h) {
        *c -= rate * (*c - x);
    }
    if order == CountOrder::StaleCount {
        state.counts[k] += 1;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    /// D^2-weighted seeding.
    KmeansPlusPlus,
    /// K distinct rows chosen uniformly.
    RandomRows,
    /// Explicit `K x R` starting centroids.
    Given(Matrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LloydConfig {
    pub k: usize,
    pub init: Init,
    /// Maximum number of centroid updates.
    pub max_iter: usize,
    /// Stop once the relative cost decrease of an iteration falls below this.
    pub tol: f64,
    pub seed: u64,
    /// Independent runs (different seeding draws); the lowest final cost wins.
    pub restarts: usize,
}

impl LloydConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            init: Init::KmeansPlusPlus,
            max_iter: 300,
            tol: 1e-10,
            seed,
            restarts: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Fixpoint,
    Tolerance,
    MaxIter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LloydResult {
    pub state: ClusterState,
    pub cost: f64,
    /// Cost after every assignment step, starting with the initial centroids.
    pub history: Vec<f64>,
    pub iterations: usize,
    pub stop: StopReason,
}

pub fn lloyd(h: &Matrix, cfg: &LloydConfig) -> Result<LloydResult> {
    let n = h.rows();
    if cfg.k < 1 {
        return Err(Error::invalid("K-means needs k >= 1"));
    }
    if cfg.k > n {
        return Err(Error::invalid(format!("k = {} exceeds the {n} available points", cfg.k)));
    }
    if cfg.max_iter < 1 {
        return Err(Error::invalid("max_iter must be >= 1"));
    }
    if !(cfg.tol >= 0.0) {
        return Err(Error::invalid("tol must be >= 0"));
    }
    if !h.is_finite() {
        return Err(Error::NonFinite("K-means input".into()));
    }
    let restarts = cfg.restarts.max(1);
    let mut best: Option<LloydResult> = None;
    for r in 0..restarts {
        let mut rng = seed::rng(cfg.seed, Stream::Lloyd, r as u64);
        let init = match &cfg.init {
            Init::Given(m) => {
                if m.shape() != (cfg.k, h.cols()) {
                    return Err(Error::invalid(format!(
                        "initial centroids {:?} do not match k={} and dimension {}",
                        m.shape(),
                        cfg.k,
                        h.cols()
                    )));
                }
                m.clone()
            }
            Init::RandomRows => {
                let idx = rand::seq::index::sample(&mut rng, n, cfg.k).into_vec();
                h.select_rows(&idx)
            }
            Init::KmeansPlusPlus => kmeans_pp(h, cfg.k, &mut rng),
        };
        let run = lloyd_from(h, init, cfg.max_iter, cfg.tol)?;
        log::debug!("lloyd restart {r}: cost {} after {} iterations", run.cost, run.iterations);
        if best.as_ref().is_none_or(|b| run.cost < b.cost) {
            best = Some(run);
        }
        if matches!(cfg.init, Init::Given(_)) {
            break;
        }
    }
    Ok(best.expect("at least one restart"))
}

fn kmeans_pp(h: &Matrix, k: usize, rng: &mut impl Rng) -> Matrix {
    let n = h.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = h.row_iter().map(|r| sq_dist(r, h.row(chosen[0]))).collect();
    while chosen.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            // every point coincides with a chosen center
            Err(_) => rng.random_range(0..n),
        };
        chosen.push(next);
        for (d, r) in d2.iter_mut().zip(h.row_iter()) {
            *d = d.min(sq_dist(r, h.row(next)));
        }
    }
    h.select_rows(&chosen)
}

fn lloyd_from(h: &Matrix, mut m: Matrix, max_iter: usize, tol: f64) -> Result<LloydResult> {
    let mut nearest = nearest_all(h, &m)?;
    let mut assign: Vec<usize> = nearest.iter().map(|p| p.0).collect();
    let mut cost: f64 = nearest.iter().map(|p| p.1).sum();
    let mut history = vec![cost];
    let mut stop = StopReason::MaxIter;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        m = update_centroids(h, &m, &assign);
        nearest = nearest_all(h, &m)?;
        let next: Vec<usize> = nearest.iter().map(|p| p.0).collect();
        let next_cost: f64 = nearest.iter().map(|p| p.1).sum();
        history.push(next_cost);
        let fixpoint = next == assign;
        let small = cost - next_cost <= tol * cost.abs();
        assign = next;
        cost = next_cost;
        if fixpoint {
            stop = StopReason::Fixpoint;
            break;
        }
        if small {
            stop = StopReason::Tolerance;
            break;
        }
    }
    for w in history.windows(2) {
        debug_assert!(w[1] <= w[0], "Lloyd cost increased: {} -> {}", w[0], w[1]);
    }
    let state = ClusterState::from_assignments(m, assign)?;
    Ok(LloydResult {
        state,
        cost,
        history,
        iterations,
        stop,
    })
}

/// Cluster means of `assign`; an empty cluster is moved onto the point
/// farthest from its own (new) centroid.
fn update_centroids(h: &Matrix, old: &Matrix, assign: &[usize]) -> Matrix {
    let (k, dim) = old.shape();
    let mut sums = Matrix::zeros(k, dim);
    let mut counts = vec![0usize; k];
    for (r, &a) in h.row_iter().zip(assign) {
        counts[a] += 1;
        for (s, v) in sums.row_mut(a).iter_mut().zip(r) {
            *s += v;
        }
    }
    for (c, &count) in counts.iter().enumerate() {
        if count > 0 {
            let inv = 1.0 / count as f64;
            sums.row_mut(c).iter_mut().for_each(|v| *v *= inv);
        }
    }
    let empty: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
    if !empty.is_empty() {
        let mut dist: Vec<f64> = h
            .row_iter()
            .zip(assign)
            .map(|(r, &a)| if counts[a] > 0 { sq_dist(r, sums.row(a)) } else { 0.0 })
            .collect();
        for c in empty {
            let (far, _) = dist
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &d)| if d > b.1 { (i, d) } else { b });
            sums.row_mut(c).copy_from_slice(h.row(far));
            dist[far] = f64::NEG_INFINITY;
            log::debug!("reseeded empty cluster {c} at point {far}");
        }
    }
    sums
}

/// One centroid per line, comma separated, in shortest round-trip form.
pub fn write_centroids_csv(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for r in m.row_iter() {
        let line: Vec<String> = r.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// One integer per line.
pub fn write_assignments(path: impl AsRef<Path>, assignments: &[usize]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::with_capacity(assignments.len() * 3);
    for a in assignments {
        let _ = writeln!(out, "{a}");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
