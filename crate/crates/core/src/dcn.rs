//! The joint training loop.
//!
//! A run pretrains the autoencoder layer by layer, clusters the pretrained
//! latent codes with Lloyd's algorithm, and then performs `t_l` epochs of
//! alternating updates. Each mini-batch gets
//!
//! 1. one SGD step on the network with the centroids `M s_i` from the
//!    previous assignments held fixed,
//! 2. for every sample of the batch, in batch order, a nearest-centroid
//!    assignment of its fresh latent code followed by the count-weighted
//!    update of that centroid.
//!
//! Fresh codes are computed with the batch's own normalization statistics,
//! i.e. exactly what the network step sees.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::autoenc::{
    network_specs, pretrain_layerwise, ArchOptions, AutoencoderParams, LossParts, Objective,
    PretrainConfig,
};
use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kmeans::{assign_one, centroid_sgd_update, lloyd, ClusterState, Init, LloydConfig};
use crate::linalg::{sq_dist, Matrix};
use crate::metrics::{score_with, Scores};
use crate::optim::{default_batch_size, make_batches, SgdConfig, SgdState};
use crate::seed::{self, Stream};

/// Losses above this abort training.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrainMode {
    /// Reconstruction plus clustering loss.
    #[default]
    Joint,
    /// Autoencoder training alone, then K-means on the final embedding.
    TwoStage,
    /// Clustering loss alone; the decoder is never trained.
    NoReconstruction,
}

impl TrainMode {
    pub const ALL: [TrainMode; 3] = [TrainMode::Joint, TrainMode::TwoStage, TrainMode::NoReconstruction];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Joint => "joint",
            TrainMode::TwoStage => "two_stage",
            TrainMode::NoReconstruction => "no_reconstruction",
        }
    }

    /// Network objective used during the joint epochs.
    pub fn objective(self, lambda: f64) -> Result<Objective> {
        match self {
            TrainMode::Joint => Objective::joint(lambda),
            TrainMode::TwoStage => Ok(Objective::reconstruction_only()),
            TrainMode::NoReconstruction => Objective::clustering_only(lambda),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown mode {s:?}; expected joint, two_stage or no_reconstruction"
                ))
            })
    }
}

/// State after one epoch. Epoch 0 is the state after pretraining and the
/// initial K-means.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    /// Objective of the active mode over the whole dataset, with running
    /// normalization statistics.
    pub total_loss: f64,
    pub recon_loss: f64,
    /// Raw K-means term `sum ||f(x_i) - m_{s_i}||^2`.
    pub clust_loss: f64,
    /// Agreement of the stored assignments with the labels, when known.
    pub scores: Option<Scores>,
    pub seconds: f64,
}

/// Snapshot kept for recovery from divergence.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Last completed epoch (0 = initialization).
    pub epoch: usize,
    pub params: AutoencoderParams,
    pub state: ClusterState,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: AutoencoderParams,
    pub state: ClusterState,
    /// Epoch 0 followed by one report per training epoch.
    pub reports: Vec<EpochReport>,
    /// Clustering right after pretraining.
    pub initial_state: ClusterState,
    /// Scores of the final `state` (after the closing K-means in two-stage
    /// mode).
    pub final_scores: Option<Scores>,
}

/// Hooks into the training loop, called in execution order.
pub trait Observer {
    fn network_step(&mut self, _epoch: usize, _batch: &[usize], _loss: &LossParts) {}
    /// `latent` is the code the assignment was computed from, `centroids`
    /// the centroids it was compared against.
    fn assigned(&mut self, _sample: usize, _cluster: usize, _latent: &[f64], _centroids: &Matrix) {}
    fn centroid_updated(&mut self, _sample: usize, _cluster: usize, _centroids: &Matrix) {}
    fn epoch_end(&mut self, _report: &EpochReport) {}
}

impl Observer for () {}

/// Seed of the batch permutation of training epoch `epoch` (0-based).
pub fn epoch_batch_seed(seed: u64, epoch: usize) -> u64 {
    seed::derive(seed, Stream::Train, epoch as u64)
}

/// Batch size used for a dataset of `n` samples.
pub fn batch_size(cfg: &ExperimentConfig, n: usize) -> usize {
    cfg.batch_size.unwrap_or_else(|| default_batch_size(n)).min(n)
}

pub fn pretrain_config(cfg: &ExperimentConfig, n: usize) -> PretrainConfig {
    PretrainConfig {
        epochs: cfg.t_p,
        sgd: SgdConfig {
            base_rate: cfg.alpha_p,
            momentum: cfg.momentum,
            nesterov: cfg.nesterov,
            schedule: cfg.schedule,
        },
        batch_size: batch_size(cfg, n),
        seed: cfg.seed,
    }
}

pub fn learn_sgd_config(cfg: &ExperimentConfig) -> SgdConfig {
    SgdConfig {
        base_rate: cfg.alpha_l,
        momentum: cfg.momentum,
        nesterov: cfg.nesterov,
        schedule: cfg.schedule,
    }
}

fn check_inputs(dataset: &Dataset, cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    if cfg.k > dataset.len() {
        return Err(Error::invalid(format!(
            "k = {} exceeds the {} samples",
            cfg.k,
            dataset.len()
        )));
    }
    if dataset.len() < 2 {
        return Err(Error::invalid("training needs at least 2 samples"));
    }
    if !dataset.features.is_finite() {
        return Err(Error::invalid("dataset features contain non-finite values"));
    }
    Ok(())
}

/// Initializes and pretrains the autoencoder described by `cfg`.
pub fn pretrain(dataset: &Dataset, cfg: &ExperimentConfig) -> Result<AutoencoderParams> {
    check_inputs(dataset, cfg)?;
    let opts = ArchOptions {
        linear_bottleneck: cfg.linear_bottleneck,
        relu_output: cfg.relu_output,
    };
    let (enc, dec) = network_specs(dataset.dim(), &cfg.widths, opts)?;
    pretrain_layerwise(&dataset.features, &enc, &dec, &pretrain_config(cfg, dataset.len()))
}

fn cluster(h: &Matrix, cfg: &ExperimentConfig, seed: u64) -> Result<ClusterState> {
    let lc = LloydConfig {
        k: cfg.k,
        init: Init::KmeansPlusPlus,
        max_iter: cfg.lloyd_max_iter,
        tol: 1e-10,
        seed,
        restarts: cfg.lloyd_restarts,
    };
    Ok(lloyd(h, &lc)?.state)
}

/// K-means on the embedding of `dataset` under `params`.
pub fn initial_clustering(
    params: &AutoencoderParams,
    dataset: &Dataset,
    cfg: &ExperimentConfig,
) -> Result<ClusterState> {
    let h = embed(params, dataset)?;
    cluster(&h, cfg, cfg.seed)
}

/// Infer-mode latent codes, one row per sample.
pub fn embed(params: &AutoencoderParams, dataset: &Dataset) -> Result<Matrix> {
    params.encode_infer(&dataset.features)
}

/// Mean squared distance of the codes to their assigned centroids divided by
/// their mean squared distance to the overall mean. Small values mean tight
/// clusters relative to the spread of the embedding, the signature of a
/// collapsed representation.
pub fn collapse_indicator(h: &Matrix, state: &ClusterState) -> Result<f64> {
    if h.rows() == 0 {
        return Err(Error::invalid("collapse indicator of an empty embedding"));
    }
    if state.assignments.len() != h.rows() {
        return Err(Error::invalid(format!(
            "{} assignments for {} latent codes",
            state.assignments.len(),
            h.rows()
        )));
    }
    let within = state.cost(h)?;
    let mean = h.column_means();
    let total: f64 = h.row_iter().map(|r| sq_dist(r, &mean)).sum();
    if total == 0.0 {
        log::warn!("collapse indicator: all latent codes coincide");
        return Ok(0.0);
    }
    Ok(within / total)
}

fn report(
    epoch: usize,
    params: &AutoencoderParams,
    dataset: &Dataset,
    state: &ClusterState,
    objective: Objective,
    cfg: &ExperimentConfig,
    started: Instant,
) -> Result<EpochReport> {
    let loss = params.dataset_loss(&dataset.features, Some(&state.assigned_centroids()), objective)?;
    if !loss.is_finite() || loss.total > DIVERGENCE_THRESHOLD {
        return Err(Error::NonFinite(format!("dataset loss after epoch {epoch}")));
    }
    let scores = match &dataset.labels {
        Some(y) => Some(score_with(y, &state.assignments, cfg.nmi_norm)?),
        None => None,
    };
    Ok(EpochReport {
        epoch,
        total_loss: loss.total,
        recon_loss: loss.recon,
        clust_loss: loss.clust,
        scores,
        seconds: if cfg.record_timing {
            started.elapsed().as_secs_f64()
        } else {
            0.0
        },
    })
}

fn diverged(reason: String, last: &Checkpoint) -> Error {
    Error::Diverged {
        reason,
        checkpoint: Some(Box::new(last.clone())),
    }
}

pub fn train(dataset: &Dataset, cfg: &ExperimentConfig) -> Result<TrainOutput> {
    train_observed(dataset, cfg, &mut ())
}

/// [`train`] with hooks.
pub fn train_observed(
    dataset: &Dataset,
    cfg: &ExperimentConfig,
    observer: &mut dyn Observer,
) -> Result<TrainOutput> {
    check_inputs(dataset, cfg)?;
    let n = dataset.len();
    let started = Instant::now();
    let mut params = pretrain(dataset, cfg).map_err(|e| match e {
        Error::NonFinite(what) => Error::Diverged {
            reason: format!("during pretraining: {what}"),
            checkpoint: None,
        },
        other => other,
    })?;
    let mut state = initial_clustering(&params, dataset, cfg)?;
    let initial_state = state.clone();
    let objective = cfg.mode.objective(cfg.lambda)?;

    let mut last = Checkpoint {
        epoch: 0,
        params: params.clone(),
        state: state.clone(),
    };
    let first = report(0, &params, dataset, &state, objective, cfg, started)
        .map_err(|e| diverged(e.to_string(), &last))?;
    observer.epoch_end(&first);
    let mut reports = vec![first];

    let batch = batch_size(cfg, n);
    let mut sgd = SgdState::new(&params, learn_sgd_config(cfg))?;
    for epoch in 1..=cfg.t_l {
        let epoch_start = Instant::now();
        sgd.set_epoch(epoch - 1);
        let plan = make_batches(n, batch, epoch_batch_seed(cfg.seed, epoch - 1))?;
        for idx in plan.batches_at_least(2) {
            let xb = dataset.features.select_rows(idx);
            let mb = state.centroids.select_rows(&idx.iter().map(|&i| state.assignments[i]).collect::<Vec<_>>());
            let loss = params.train_step(&mut sgd, &xb, Some(&mb), objective)?;
            if !loss.is_finite() || loss.total > DIVERGENCE_THRESHOLD {
                return Err(diverged(
                    format!("batch loss {} in epoch {epoch}", loss.total),
                    &last,
                ));
            }
            observer.network_step(epoch, idx, &loss);

            let hb = params.encode_batch(&xb).map_err(|e| diverged(e.to_string(), &last))?;
            if !hb.is_finite() {
                return Err(diverged(format!("non-finite latent codes in epoch {epoch}"), &last));
            }
            for (pos, &i) in idx.iter().enumerate() {
                let h = hb.row(pos);
                let k = assign_one(h, &state.centroids)?;
                observer.assigned(i, k, h, &state.centroids);
                state.assignments[i] = k;
                centroid_sgd_update(&mut state, h, k, cfg.count_order)?;
                observer.centroid_updated(i, k, &state.centroids);
            }
        }
        let rep = report(epoch, &params, dataset, &state, objective, cfg, epoch_start)
            .map_err(|e| diverged(e.to_string(), &last))?;
        log::info!(
            "epoch {epoch}: total {:.6} recon {:.6} clust {:.6}{}",
            rep.total_loss,
            rep.recon_loss,
            rep.clust_loss,
            rep.scores
                .map(|s| format!(" nmi {:.4} ari {:.4} acc {:.4}", s.nmi, s.ari, s.acc))
                .unwrap_or_default()
        );
        observer.epoch_end(&rep);
        reports.push(rep);
        last = Checkpoint {
            epoch,
            params: params.clone(),
            state: state.clone(),
        };
    }

    if cfg.mode == TrainMode::TwoStage && cfg.t_l > 0 {
        let h = embed(&params, dataset)?;
        state = cluster(&h, cfg, seed::derive(cfg.seed, Stream::FinalLloyd, 0))?;
    }
    let final_scores = match &dataset.labels {
        Some(y) => Some(score_with(y, &state.assignments, cfg.nmi_norm)?),
        None => None,
    };
    Ok(TrainOutput {
        params,
        state,
        reports,
        initial_state,
        final_scores,
    })
}

/// Independent runs of `cfg` with each seed in `seeds`, in parallel when the
/// `parallel` feature is enabled. Results are in the order of `seeds`.
pub fn train_seeds(dataset: &Dataset, cfg: &ExperimentConfig, seeds: &[u64]) -> Vec<Result<TrainOutput>> {
    let run = |&s: &u64| {
        let cfg = ExperimentConfig {
            seed: s,
            ..cfg.clone()
        };
        train(dataset, &cfg)
    };
    #[cfg(feature = "parallel")]
    {
        seeds.par_iter().map(run).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        seeds.iter().map(run).collect()
    }
}

#[cfg(test)]
mod tests;
