//! Greedy layer-wise pretraining.
//!
//! Encoder layer `l` and its mirror decoder layer are trained together as a
//! shallow autoencoder on the outputs of the already trained (and frozen)
//! encoder layers `0..l`, with the reconstruction loss only.

use super::{AutoencoderParams, LayerSpec, Objective};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::optim::{make_batches, SgdConfig, SgdState};
use crate::seed::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    /// Epochs per layer pair.
    pub epochs: usize,
    pub sgd: SgdConfig,
    pub batch_size: usize,
    pub seed: u64,
}

/// Initializes a network from `seed` and pretrains it on `data`.
pub fn pretrain_layerwise(
    data: &Matrix,
    encoder: &[LayerSpec],
    decoder: &[LayerSpec],
    cfg: &PretrainConfig,
) -> Result<AutoencoderParams> {
    let mut rng = seed::rng(cfg.seed, Stream::Init, 0);
    let params = AutoencoderParams::init(encoder, decoder, &mut rng)?;
    pretrain_stack(params, data, cfg, |_, _| {})
}

/// Pretrains an existing network in place, layer pair by layer pair.
/// `on_layer_input(l, inputs)` sees the training inputs of pair `l`.
pub fn pretrain_stack(
    mut params: AutoencoderParams,
    data: &Matrix,
    cfg: &PretrainConfig,
    mut on_layer_input: impl FnMut(usize, &Matrix),
) -> Result<AutoencoderParams> {
    if data.rows() == 0 {
        return Err(Error::invalid("cannot pretrain on an empty dataset"));
    }
    let n = data.rows();
    let batch = cfg.batch_size.clamp(1, n);
    let depth = params.depth();
    let mut input = data.clone();
    for l in 0..depth {
        on_layer_input(l, &input);
        let mirror = depth - 1 - l;
        let mut pair = AutoencoderParams::new(
            vec![params.encoder[l].clone()],
            vec![params.decoder[mirror].clone()],
        )?;
        if cfg.epochs > 0 {
            let mut sgd = SgdState::new(&pair, cfg.sgd)?;
            for epoch in 0..cfg.epochs {
                sgd.set_epoch(epoch);
                let stream = (l as u64) << 32 | epoch as u64;
                let plan = make_batches(n, batch, seed::derive(cfg.seed, Stream::Pretrain, stream))?;
                let mut epoch_loss = 0.0;
                for idx in plan.batches_at_least(2) {
                    let xb = input.select_rows(idx);
                    let loss = pair.train_step(&mut sgd, &xb, None, Objective::reconstruction_only())?;
                    epoch_loss += loss.recon;
                }
                if !epoch_loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "pretraining loss of layer pair {l} at epoch {epoch}"
                    )));
                }
                log::debug!("pretrain layer {l} epoch {epoch}: recon {epoch_loss:.6}");
            }
        }
        let next = pair.encode_infer(&input).map_err(|e| match e {
            Error::NonFinite(_) => Error::NonFinite(format!("outputs of pretrained layer {l}")),
            other => other,
        })?;
        let mut layers = pair.encoder.drain(..).chain(pair.decoder.drain(..));
        params.encoder[l] = layers.next().expect("pair encoder");
        params.decoder[mirror] = layers.next().expect("pair decoder");
        input = next;
    }
    AutoencoderParams::new(params.encoder, params.decoder)
}
