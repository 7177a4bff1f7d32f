//! Minibatch SGD with momentum, weight decay and step learning-rate decay.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Model;
use crate::data::{batch_iter, Dataset};
use crate::error::{Error, Result};
use crate::losses::{LossKind, LossSpec, Reduction};
use crate::tensor::{argmax, Graph, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    /// Epochs (0-based) at whose start the learning rate is multiplied by
    /// `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Random horizontal flips of training images.
    pub flip: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            learning_rate: 0.05,
            decay_epochs: vec![20, 25],
            decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            flip: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::usage("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::usage("batch size must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::usage("learning rate must be positive and finite"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::usage("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::usage("weight decay must be >= 0"));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f32 {
        let decays = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.learning_rate * self.decay_factor.powi(decays as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub learning_rate: f32,
    pub train_loss: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainMetrics {
    pub epochs: Vec<EpochMetrics>,
    pub test_accuracy: f64,
}

/// Train `model` and report per-epoch and final test metrics.
pub fn train(
    mut model: Model,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Model, TrainMetrics)> {
    cfg.validate()?;
    check_dataset(&model, train_set)?;
    check_dataset(&model, test_set)?;
    if train_set.is_empty() {
        return Err(Error::usage("training set is empty"));
    }

    let names: Vec<String> = model.params().keys().cloned().collect();
    let mut velocity: Vec<Vec<f32>> = model.params().values().map(|t| vec![0.0; t.len()]).collect();
    let ce = LossSpec::new(LossKind::Ce);
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        let epoch_seed = cfg.seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut flip_rng = ChaCha8Rng::seed_from_u64(epoch_seed.rotate_left(17));
        let (mut loss_sum, mut correct, mut seen) = (0.0f64, 0usize, 0usize);

        for (mut images, labels) in batch_iter(train_set, cfg.batch_size, epoch_seed, true)? {
            if cfg.flip {
                for b in 0..labels.len() {
                    if flip_rng.random_bool(0.5) {
                        flip_horizontal(&mut images, b);
                    }
                }
            }
            let grads = {
                let mut graph = Graph::new();
                let x = graph.leaf(images, false);
                let (logits, leaves) = model.forward(&mut graph, x, true)?;
                let out = ce.apply(&mut graph, logits, &labels, &[], Reduction::Mean)?;
                let batch_loss: f64 = out.per_sample.iter().map(|&v| v as f64).sum();
                if !batch_loss.is_finite() {
                    return Err(Error::Training {
                        epoch,
                        message: "loss became non-finite".into(),
                    });
                }
                loss_sum += batch_loss;
                let k = model.num_classes();
                correct += graph
                    .value(logits)
                    .data()
                    .chunks(k)
                    .zip(&labels)
                    .filter(|(row, &y)| argmax(row) == y)
                    .count();
                seen += labels.len();
                let mut grads = graph.backward(out.node)?;
                leaves
                    .into_iter()
                    .map(|(name, id)| (name, grads.take(id).unwrap_or_default()))
                    .collect::<Vec<_>>()
            };
            let params = model.params_mut();
            for (name, grad) in grads {
                let i = names.iter().position(|n| *n == name).expect("known parameter");
                let w = params[i].data_mut();
                let v = &mut velocity[i];
                for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(grad) {
                    let g = g + cfg.weight_decay * *w;
                    *v = cfg.momentum * *v + g;
                    *w -= lr * *v;
                }
            }
        }

        if model.params().values().any(|t| !t.is_finite()) {
            return Err(Error::Training {
                epoch,
                message: "weights became non-finite".into(),
            });
        }
        let m = EpochMetrics {
            epoch,
            learning_rate: lr,
            train_loss: loss_sum / seen as f64,
            train_accuracy: correct as f64 / seen as f64,
        };
        log::info!(
            "{} epoch {epoch}: lr {lr:.4} loss {:.4} train acc {:.3}",
            model.arch(),
            m.train_loss,
            m.train_accuracy
        );
        epochs.push(m);
    }

    let test_accuracy = accuracy(&model, test_set, 256)?;
    log::info!("{} test accuracy {test_accuracy:.4}", model.arch());
    Ok((model, TrainMetrics { epochs, test_accuracy }))
}

/// Top-1 accuracy of `model` over `ds`.
pub fn accuracy(model: &Model, ds: &Dataset, batch_size: usize) -> Result<f64> {
    check_dataset(model, ds)?;
    if ds.is_empty() {
        return Err(Error::usage("cannot measure accuracy on an empty dataset"));
    }
    let mut correct = 0;
    for (images, labels) in batch_iter(ds, batch_size, 0, false)? {
        let logits = model.predict_logits(&images)?;
        correct += logits
            .data()
            .chunks(model.num_classes())
            .zip(&labels)
            .filter(|(row, &y)| argmax(row) == y)
            .count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

fn check_dataset(model: &Model, ds: &Dataset) -> Result<()> {
    if ds.image_shape()[0] != model.in_channels() || ds.num_classes() != model.num_classes() {
        return Err(Error::usage(format!(
            "{} built for {} channels / {} classes, dataset has {} / {}",
            model.arch(),
            model.in_channels(),
            model.num_classes(),
            ds.image_shape()[0],
            ds.num_classes()
        )));
    }
    Ok(())
}

fn flip_horizontal(batch: &mut Tensor, index: usize) {
    let shape = batch.shape().to_vec();
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let image = &mut batch.data_mut()[index * c * h * w..(index + 1) * c * h * w];
    for row in image.chunks_mut(w) {
        row.reverse();
    }
    debug_assert_eq!(image.len(), c * h * w);
}
