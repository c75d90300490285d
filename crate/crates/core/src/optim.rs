//! Momentum SGD, learning-rate schedules and seeded mini-batch plans.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Anything that exposes its trainable state as a fixed, ordered list of flat
/// arrays. Parameters and their gradients must list arrays in the same order
/// with the same lengths.
pub trait ParamArrays {
    fn arrays(&self) -> Vec<&[f64]>;
    fn arrays_mut(&mut self) -> Vec<&mut [f64]>;

    /// Human-readable name of each array, used in error messages.
    fn array_names(&self) -> Vec<String> {
        (0..self.arrays().len()).map(|i| format!("array[{i}]")).collect()
    }
}

impl ParamArrays for Vec<f64> {
    fn arrays(&self) -> Vec<&[f64]> {
        vec![self.as_slice()]
    }

    fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.as_mut_slice()]
    }
}

impl ParamArrays for Vec<Vec<f64>> {
    fn arrays(&self) -> Vec<&[f64]> {
        self.iter().map(Vec::as_slice).collect()
    }

    fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        self.iter_mut().map(Vec::as_mut_slice).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Constant,
    /// `base / (1 + gamma * epoch)`
    InverseTime(f64),
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Schedule::InverseTime(g) if !(g >= 0.0 && g.is_finite()) => Err(Error::invalid(
                format!("inverse_time decay must be a finite value >= 0, got {g}"),
            )),
            _ => Ok(()),
        }
    }
}

pub fn schedule_rate(schedule: Schedule, base: f64, epoch: usize) -> Result<f64> {
    if !(base > 0.0 && base.is_finite()) {
        return Err(Error::invalid(format!("base rate must be positive, got {base}")));
    }
    schedule.validate()?;
    Ok(match schedule {
        Schedule::Constant => base,
        Schedule::InverseTime(gamma) => base / (1.0 + gamma * epoch as f64),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub base_rate: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub schedule: Schedule,
}

impl SgdConfig {
    pub fn plain(rate: f64) -> Self {
        Self {
            base_rate: rate,
            momentum: 0.0,
            nesterov: false,
            schedule: Schedule::Constant,
        }
    }
}

/// Velocity buffers and step bookkeeping for one parameter set.
#[derive(Debug, Clone)]
pub struct SgdState {
    config: SgdConfig,
    velocity: Vec<Vec<f64>>,
    steps: u64,
    epoch: usize,
}

impl SgdState {
    pub fn new<P: ParamArrays + ?Sized>(params: &P, config: SgdConfig) -> Result<Self> {
        schedule_rate(config.schedule, config.base_rate, 0)?;
        if !(0.0..1.0).contains(&config.momentum) {
            return Err(Error::invalid(format!(
                "momentum must lie in [0, 1), got {}",
                config.momentum
            )));
        }
        Ok(Self {
            config,
            velocity: params.arrays().iter().map(|a| vec![0.0; a.len()]).collect(),
            steps: 0,
            epoch: 0,
        })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    pub fn rate(&self) -> f64 {
        // validated at construction
        schedule_rate(self.config.schedule, self.config.base_rate, self.epoch)
            .unwrap_or(self.config.base_rate)
    }

    /// One update `v <- beta v - rate g`, then `theta <- theta + v`
    /// (classical) or `theta <- theta + beta v - rate g` (Nesterov).
    ///
    /// Nothing is modified when any gradient entry is non-finite.
    pub fn step<P, G>(&mut self, params: &mut P, grads: &G) -> Result<()>
    where
        P: ParamArrays + ?Sized,
        G: ParamArrays + ?Sized,
    {
        let g = grads.arrays();
        if g.len() != self.velocity.len() {
            return Err(Error::invalid(format!(
                "gradient set has {} arrays, optimizer tracks {}",
                g.len(),
                self.velocity.len()
            )));
        }
        for (i, (ga, va)) in g.iter().zip(&self.velocity).enumerate() {
            if ga.len() != va.len() {
                return Err(Error::invalid(format!(
                    "gradient array {i} has length {}, expected {}",
                    ga.len(),
                    va.len()
                )));
            }
            if ga.iter().any(|v| !v.is_finite()) {
                let name = grads
                    .array_names()
                    .into_iter()
                    .nth(i)
                    .unwrap_or_else(|| format!("array[{i}]"));
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        let rate = self.rate();
        let beta = self.config.momentum;
        let nesterov = self.config.nesterov;
        let mut p = params.arrays_mut();
        if p.len() != g.len() {
            return Err(Error::invalid("parameter and gradient sets differ".to_string()));
        }
        for ((pa, ga), va) in p.iter_mut().zip(&g).zip(&mut self.velocity) {
            if pa.len() != ga.len() {
                return Err(Error::invalid("parameter and gradient sets differ".to_string()));
            }
            for ((theta, &grad), v) in pa.iter_mut().zip(ga.iter()).zip(va.iter_mut()) {
                *v = beta * *v - rate * grad;
                if nesterov {
                    *theta += beta * *v - rate * grad;
                } else {
                    *theta += *v;
                }
            }
        }
        self.steps += 1;
        Ok(())
    }
}

/// A seeded permutation of `0..n` cut into consecutive batches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    permutation: Vec<usize>,
    batch_size: usize,
    seed: u64,
}

pub fn make_batches(n: usize, batch_size: usize, seed: u64) -> Result<BatchPlan> {
    if batch_size == 0 || batch_size > n {
        return Err(Error::invalid(format!(
            "batch size must lie in 1..={n}, got {batch_size}"
        )));
    }
    let mut permutation: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    permutation.shuffle(&mut rng);
    Ok(BatchPlan {
        permutation,
        batch_size,
        seed,
    })
}

impl BatchPlan {
    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Consecutive batches; the last one may be short.
    pub fn batches(&self) -> impl Iterator<Item = &[usize]> + '_ {
        self.permutation.chunks(self.batch_size)
    }

    /// Like [`batches`](Self::batches), but a trailing batch shorter than
    /// `min_len` is folded into its predecessor.
    pub fn batches_at_least(&self, min_len: usize) -> Vec<&[usize]> {
        let mut out: Vec<&[usize]> = self.batches().collect();
        if out.len() >= 2 && out.last().is_some_and(|b| b.len() < min_len) {
            out.pop();
            let start = (out.len() - 1) * self.batch_size;
            *out.last_mut().expect("at least one batch") = &self.permutation[start..];
        }
        out
    }
}

/// `max(2, round(0.01 n))`, capped at `n`.
pub fn default_batch_size(n: usize) -> usize {
    ((n as f64 * 0.01).round() as usize).max(2).min(n.max(1))
}
