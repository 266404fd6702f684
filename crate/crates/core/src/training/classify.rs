//! Supervised classification on encoder features: the shared optimizer step
//! used by the rotation pretext loop, and the optional label-fraction
//! fine-tuning stage.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{cross_entropy_with_grad, subset_labels, Optimizer, TrainConfig};
use crate::data::{preprocess, stack_images, ImageTensor, PreprocessConfig, RawImage};
use crate::error::{Error, Result};
use crate::models::{argmax, ClassifierHead, Encoder};
use crate::nn::{Param, Parameterized};
use crate::tensor::Tensor;

/// Encoder + head viewed as one parameter set, named like [`crate::models::RotationNet`].
pub(crate) struct Classifier<'a> {
    pub encoder: &'a mut Encoder,
    pub head: &'a mut ClassifierHead,
}

impl Parameterized for Classifier<'_> {
    fn visit_params<'b>(&'b self, prefix: &str, f: &mut dyn FnMut(String, &'b Param)) {
        self.encoder.visit_params(&crate::nn::join(prefix, "encoder"), f);
        self.head.visit_params(&crate::nn::join(prefix, "head"), f);
    }

    fn visit_params_mut<'b>(&'b mut self, prefix: &str, f: &mut dyn FnMut(String, &'b mut Param)) {
        self.encoder.visit_params_mut(&crate::nn::join(prefix, "encoder"), f);
        self.head.visit_params_mut(&crate::nn::join(prefix, "head"), f);
    }

    fn visit_buffers<'b>(&'b self, prefix: &str, f: &mut dyn FnMut(String, &'b Tensor)) {
        self.encoder.visit_buffers(&crate::nn::join(prefix, "encoder"), f);
    }

    fn visit_buffers_mut<'b>(&'b mut self, prefix: &str, f: &mut dyn FnMut(String, &'b mut Tensor)) {
        self.encoder.visit_buffers_mut(&crate::nn::join(prefix, "encoder"), f);
    }
}

/// One forward/backward/update on a batch. Returns the mean loss and the
/// number of correct argmax predictions.
pub(crate) fn train_step(
    model: &mut Classifier<'_>,
    optimizer: &mut Optimizer,
    images: &[ImageTensor],
    labels: &[usize],
    cfg: &TrainConfig,
    learning_rate: f64,
    where_: (usize, usize),
) -> Result<(f64, usize)> {
    let (epoch, step) = where_;
    let x = stack_images(images)?;
    model.zero_grad();
    let (features, cache) = model.encoder.encode_train(&x)?;
    let logits = model.head.linear.forward(&features)?;
    let (loss, dlogits) = cross_entropy_with_grad(&logits, labels).map_err(|e| match e {
        Error::Numeric(m) => Error::Numeric(format!("{m} at epoch {epoch} step {step}")),
        other => other,
    })?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss {loss} at epoch {epoch} step {step}")));
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(i, &l)| argmax(logits.row(*i)) == l)
        .count();
    let dfeat = model.head.linear.backward(&features, &dlogits);
    model.encoder.backward(&cache, &dfeat);
    optimizer.step(model.named_params_mut(), cfg, learning_rate)?;
    Ok((loss, correct))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Supervised fine-tuning of `encoder` with a fresh `head` on a seeded,
/// class-stratified `cfg.label_fraction` share of the labeled images.
pub fn finetune_classifier<R: Rng + ?Sized>(
    encoder: &mut Encoder,
    head: &mut ClassifierHead,
    images: &[RawImage],
    labels: &[usize],
    pre: &PreprocessConfig,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<ClassifierEpoch>> {
    cfg.validate()?;
    if images.len() != labels.len() {
        return Err(Error::InvalidArgument(format!("{} images but {} labels", images.len(), labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= head.classes()) {
        return Err(Error::InvalidArgument(format!("label {l} exceeds head width {}", head.classes())));
    }
    let chosen = subset_labels(images.len(), Some(labels), cfg.label_fraction, cfg.seed)?;
    let train_pre = pre.train();
    let mut optimizer = Optimizer::new(cfg.optimizer);
    let mut model = Classifier { encoder, head };
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order = chosen.clone();
        order.shuffle(rng);
        let lr = cfg.epoch_learning_rate(epoch);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = chunk
                .iter()
                .map(|&i| preprocess(&images[i], &train_pre, rng))
                .collect::<Result<Vec<_>>>()?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, c) = train_step(&mut model, &mut optimizer, &batch, &y, cfg, lr, (epoch, step))?;
            loss_sum += loss * chunk.len() as f64;
            correct += c;
        }
        history.push(ClassifierEpoch {
            epoch,
            loss: loss_sum / order.len() as f64,
            accuracy: correct as f64 / order.len() as f64,
        });
    }
    Ok(history)
}
