//! Rotation-prediction pretext task.
//!
//! Each image is rotated counterclockwise by 0°, 90°, 180° or 270° using only
//! transposes and flips (no resampling), and the network learns to recover
//! the rotation index as a 4-way classification.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{preprocess, stack_images, ImageTensor, PreprocessConfig, RawImage};
use crate::error::{Error, Result};
use crate::models::{argmax, RotationNet};
use crate::training::classify::{train_step, Classifier};
use crate::training::{Optimizer, RotationMode, TrainConfig};

/// Pseudo-label `k` stands for a counterclockwise rotation by `90° * k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RotationLabel(u8);

impl RotationLabel {
    pub const ALL: [RotationLabel; 4] = [RotationLabel(0), RotationLabel(1), RotationLabel(2), RotationLabel(3)];

    pub fn new(index: usize) -> Result<Self> {
        if index < 4 {
            Ok(Self(index as u8))
        } else {
            Err(Error::InvalidArgument(format!("rotation label {index} outside 0..4")))
        }
    }

    pub fn from_degrees(degrees: u32) -> Result<Self> {
        if !degrees.is_multiple_of(90) || degrees >= 360 {
            return Err(Error::InvalidArgument(format!("{degrees}° is not one of 0/90/180/270")));
        }
        Ok(Self((degrees / 90) as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn degrees(self) -> u32 {
        self.0 as u32 * 90
    }

    /// Rotation equivalent to applying `self` then `other`.
    pub fn then(self, other: RotationLabel) -> RotationLabel {
        RotationLabel((self.0 + other.0) % 4)
    }
}

fn map_pixels(img: &ImageTensor, src_of: impl Fn(usize, usize) -> (usize, usize)) -> ImageTensor {
    let s = img.height;
    let mut data = vec![0.0; img.data.len()];
    for c in 0..img.channels {
        for y in 0..s {
            for x in 0..s {
                let (sy, sx) = src_of(y, x);
                data[(c * s + y) * s + x] = img.data[(c * s + sy) * s + sx];
            }
        }
    }
    ImageTensor { data, ..img.clone() }
}

fn transpose(img: &ImageTensor) -> ImageTensor {
    map_pixels(img, |y, x| (x, y))
}

/// Reverses row order (upside down).
fn flip_vertical(img: &ImageTensor) -> ImageTensor {
    let s = img.height;
    map_pixels(img, |y, x| (s - 1 - y, x))
}

fn flip_horizontal(img: &ImageTensor) -> ImageTensor {
    let s = img.width;
    map_pixels(img, |y, x| (y, s - 1 - x))
}

/// Counterclockwise rotation by `90° * label` of a square image.
pub fn rotate(img: &ImageTensor, label: RotationLabel) -> Result<ImageTensor> {
    if img.height != img.width {
        return Err(Error::Shape(format!(
            "rotation needs a square image, got {}x{}",
            img.height, img.width
        )));
    }
    Ok(match label.0 {
        0 => img.clone(),
        1 => flip_vertical(&transpose(img)),
        2 => flip_vertical(&flip_horizontal(img)),
        _ => transpose(&flip_vertical(img)),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RotatedSample {
    pub image: ImageTensor,
    pub label: RotationLabel,
}

/// The four rotations of `img`, labels in order 0, 1, 2, 3.
pub fn expand_with_rotations(img: &ImageTensor) -> Result<Vec<RotatedSample>> {
    RotationLabel::ALL
        .iter()
        .map(|&label| {
            Ok(RotatedSample {
                image: rotate(img, label)?,
                label,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretextEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub rotation_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct PretextOutcome {
    pub history: Vec<PretextEpoch>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub optimizer: Optimizer,
}

/// Number of optimizer steps one epoch takes.
pub fn steps_per_epoch(images: usize, cfg: &TrainConfig) -> usize {
    let samples = match cfg.rotation_mode {
        RotationMode::AllFour => 4 * images,
        RotationMode::RandomSingle => images,
    };
    samples.div_ceil(cfg.batch_size)
}

/// Trains `net` (encoder + 4-way head) to predict rotations of `images`.
/// Images are re-augmented with `pre` in train mode each epoch.
pub fn pretext_train<R: Rng + ?Sized>(
    net: &mut RotationNet,
    images: &[RawImage],
    pre: &PreprocessConfig,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<PretextOutcome> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::InvalidArgument("pretext training needs at least one image".into()));
    }
    if net.head.classes() != 4 {
        return Err(Error::Topology(format!("rotation head must have 4 outputs, has {}", net.head.classes())));
    }
    let train_pre = pre.train();
    let mut optimizer = Optimizer::new(cfg.optimizer);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::new();

    for epoch in 0..cfg.epochs {
        let mut samples = Vec::with_capacity(4 * images.len());
        for img in images {
            let t = preprocess(img, &train_pre, rng)?;
            match cfg.rotation_mode {
                RotationMode::AllFour => samples.extend(expand_with_rotations(&t)?),
                RotationMode::RandomSingle => {
                    let label = RotationLabel::new(rng.gen_range(0..4))?;
                    samples.push(RotatedSample {
                        image: rotate(&t, label)?,
                        label,
                    });
                }
            }
        }
        samples.shuffle(rng);

        let lr = cfg.epoch_learning_rate(epoch);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        let mut model = Classifier {
            encoder: &mut net.encoder,
            head: &mut net.head,
        };
        for (step, chunk) in samples.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<ImageTensor> = chunk.iter().map(|s| s.image.clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|s| s.label.index()).collect();
            let (loss, c) = train_step(&mut model, &mut optimizer, &batch, &labels, cfg, lr, (epoch, step))?;
            loss_sum += loss * chunk.len() as f64;
            correct += c;
            step_losses.push(loss);
        }
        history.push(PretextEpoch {
            epoch,
            loss: loss_sum / samples.len() as f64,
            rotation_accuracy: correct as f64 / samples.len() as f64,
        });
    }
    Ok(PretextOutcome {
        history,
        step_losses,
        optimizer,
    })
}

/// Anything that maps a batch of images to rotation predictions.
pub trait RotationPredictor {
    fn predict_rotations(&self, images: &[ImageTensor]) -> Result<Vec<usize>>;
}

impl RotationPredictor for RotationNet {
    fn predict_rotations(&self, images: &[ImageTensor]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let logits = self.logits(&stack_images(chunk)?)?;
            out.extend((0..logits.dim(0)).map(|i| argmax(logits.row(i))));
        }
        Ok(out)
    }
}

/// Fraction of the `4 * images.len()` rotated copies whose rotation is
/// predicted correctly. `images` should be eval-mode preprocessed.
pub fn pretext_eval<P: RotationPredictor + ?Sized>(predictor: &P, images: &[ImageTensor]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("rotation accuracy of an empty image set".into()));
    }
    let mut correct = 0usize;
    for chunk in images.chunks(16) {
        let mut batch = Vec::with_capacity(4 * chunk.len());
        let mut labels = Vec::with_capacity(4 * chunk.len());
        for img in chunk {
            for s in expand_with_rotations(img)? {
                batch.push(s.image);
                labels.push(s.label.index());
            }
        }
        let pred = predictor.predict_rotations(&batch)?;
        correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / (4 * images.len()) as f64)
}

/// Eval-mode preprocessing of every image.
pub fn preprocess_eval(images: &[RawImage], pre: &PreprocessConfig) -> Result<Vec<ImageTensor>> {
    let eval = pre.eval();
    let mut unused = rand::rngs::mock::StepRng::new(0, 0);
    images.iter().map(|img| preprocess(img, &eval, &mut unused)).collect()
}
