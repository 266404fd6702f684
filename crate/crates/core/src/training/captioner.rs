use rand::Rng;

use super::{cross_entropy_with_grad, Optimizer, TrainConfig};
use crate::data::{build_length_histogram, make_batch, sample_train_indices, PreprocessConfig, TokenizedDataset};
use crate::error::{Error, Result};
use crate::models::Captioner;
use crate::nn::Parameterized;

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub perplexity: f64,
}

#[derive(Debug, Clone)]
pub struct CaptionOutcome {
    pub history: Vec<CaptionEpoch>,
    pub optimizer: Optimizer,
    pub steps: u64,
}

/// End-to-end captioner training with teacher forcing. Each epoch runs
/// `ceil(N / batch_size)` steps; every step draws one caption length and a
/// same-length batch via [`sample_train_indices`]. Encoder parameters are
/// held fixed for the first `cfg.freeze_encoder_epochs` epochs; its running
/// feature statistics keep updating throughout.
pub fn train_captioner<R: Rng + ?Sized>(
    model: &mut Captioner,
    data: &TokenizedDataset,
    pre: &PreprocessConfig,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<CaptionOutcome> {
    cfg.validate()?;
    let hist = build_length_histogram(&data.lengths())?;
    let index = data.index_by_length();
    let train_pre = pre.train();
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let mut optimizer = Optimizer::new(cfg.optimizer);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut steps = 0u64;

    for epoch in 0..cfg.epochs {
        let lr = cfg.epoch_learning_rate(epoch);
        let train_encoder = epoch >= cfg.freeze_encoder_epochs;
        let mut loss_sum = 0.0;
        for step in 0..steps_per_epoch {
            let indices = sample_train_indices(&hist, &index, cfg.batch_size, rng)?;
            let batch = make_batch(&indices, data, &train_pre, rng)?;
            model.zero_grad();
            let (features, enc_cache) = model.encoder.encode_train(&batch.images)?;
            let (logits, dec_cache) = model.decoder.decode_train(&features, &batch.captions)?;
            let targets: Vec<usize> = batch.captions.iter().flatten().copied().collect();
            let (loss, dlogits) = cross_entropy_with_grad(&logits, &targets).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("{m} at epoch {epoch} step {step}")),
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("caption loss {loss} at epoch {epoch} step {step}")));
            }
            let dfeat = model.decoder.backward(&dec_cache, &dlogits)?;
            if train_encoder {
                model.encoder.backward(&enc_cache, &dfeat);
                optimizer.step(model.named_params_mut(), cfg, lr)?;
            } else {
                let params = model
                    .named_params_mut()
                    .into_iter()
                    .filter(|(name, _)| name.starts_with("decoder."))
                    .collect();
                optimizer.step(params, cfg, lr)?;
            }
            loss_sum += loss;
            steps += 1;
        }
        let loss = loss_sum / steps_per_epoch as f64;
        history.push(CaptionEpoch {
            epoch,
            loss,
            perplexity: loss.exp(),
        });
    }
    Ok(CaptionOutcome {
        history,
        optimizer,
        steps,
    })
}
