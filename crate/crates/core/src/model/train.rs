//! Mini-batch softmax cross-entropy training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Architecture, Gradients, Layer, Model};
use crate::dataset::LabeledImage;
use crate::error::{Error, Result};

/// Samples per parallel work unit. Fixed so that the summation order, and
/// therefore the trained weights, do not depend on the thread count.
const CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub classes: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    /// Multiplicative learning-rate decay applied after every epoch.
    pub lr_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            epochs: 30,
            lr: 0.02,
            batch_size: 32,
            momentum: 0.9,
            lr_decay: 0.93,
            seed: 7,
        }
    }
}

impl TrainConfig {
    /// Gentler schedule for continuing from trained weights.
    pub fn fine_tune() -> Self {
        Self {
            epochs: 10,
            lr: 0.005,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// Mean cross-entropy seen during each epoch.
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
}

fn validate(data: &[LabeledImage], classes: usize) -> Result<(usize, usize)> {
    let first = data.first().ok_or(Error::EmptyDataset)?;
    let dims = first.image.dims();
    for item in data {
        if item.label >= classes {
            return Err(Error::LabelOutOfRange {
                label: item.label,
                classes,
            });
        }
        if item.image.dims() != dims {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{} image", dims.0, dims.1),
                got: format!("{}x{} image ({})", item.image.width(), item.image.height(), item.id),
            });
        }
    }
    Ok(dims)
}

/// Train a fresh model. Deterministic for a given seed.
pub fn train_model(arch: Architecture, data: &[LabeledImage], config: &TrainConfig) -> Result<TrainOutcome> {
    let (w, h) = validate(data, config.classes)?;
    let model = Model::new(arch, w, h, config.classes, config.seed)?;
    fit(model, data, config)
}

/// Continue training existing weights on `data` (typically a clean and
/// adversarial mix carrying clean labels).
pub fn fine_tune(model: &Model, data: &[LabeledImage], config: &TrainConfig) -> Result<TrainOutcome> {
    validate(data, model.classes())?;
    if data[0].image.dims() != model.input_dims() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", model.input_dims()),
            got: format!("{:?}", data[0].image.dims()),
        });
    }
    let config = TrainConfig {
        classes: model.classes(),
        ..config.clone()
    };
    fit(model.clone(), data, &config)
}

fn fit(mut model: Model, data: &[LabeledImage], config: &TrainConfig) -> Result<TrainOutcome> {
    if config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(Error::InvalidConfig("batch size and learning rate must be positive".into()));
    }
    let inputs: Vec<Vec<f64>> = data.iter().map(|d| d.image.to_unit()).collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_7a1d);
    let mut velocity = model.zero_gradients();
    let mut lr = config.lr;
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let partials: Vec<(f64, Gradients)> = batch
                .par_chunks(CHUNK)
                .map(|chunk| {
                    let mut g = model.zero_gradients();
                    let loss: f64 = chunk
                        .iter()
                        .map(|&i| model.accumulate_cross_entropy(&inputs[i], data[i].label, &mut g))
                        .sum();
                    (loss, g)
                })
                .collect();
            let mut grads = model.zero_gradients();
            for (loss, g) in &partials {
                epoch_loss += loss;
                grads.add_assign(g);
            }
            let scale = 1.0 / batch.len() as f64;
            step(&mut model, &mut velocity, &grads, lr * scale, config.momentum);
        }
        epoch_losses.push(epoch_loss / data.len() as f64);
        lr *= config.lr_decay;
    }

    let train_accuracy = accuracy(&model, data)?;
    Ok(TrainOutcome {
        model,
        epoch_losses,
        train_accuracy,
    })
}

fn step(model: &mut Model, velocity: &mut Gradients, grads: &Gradients, lr: f64, momentum: f64) {
    for ((layer, (vw, vb)), (gw, gb)) in model
        .layers_mut()
        .iter_mut()
        .zip(velocity.layers.iter_mut())
        .zip(&grads.layers)
    {
        let (w, b) = match layer {
            Layer::Conv(c) => (&mut c.weight, &mut c.bias),
            Layer::Dense(d) => (&mut d.weight, &mut d.bias),
        };
        for ((p, v), g) in w.iter_mut().zip(vw.iter_mut()).zip(gw) {
            *v = momentum * *v + g;
            *p -= lr * *v;
        }
        for ((p, v), g) in b.iter_mut().zip(vb.iter_mut()).zip(gb) {
            *v = momentum * *v + g;
            *p -= lr * *v;
        }
    }
}

/// Fraction of `data` the model labels correctly.
pub fn accuracy(model: &Model, data: &[LabeledImage]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let correct: Result<Vec<bool>> = data
        .par_iter()
        .map(|d| Ok(model.predict(&d.image)? == d.label))
        .collect();
    Ok(correct?.iter().filter(|&&c| c).count() as f64 / data.len() as f64)
}
