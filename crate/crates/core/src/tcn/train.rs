use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::conv::{backward, forward_cached};
use super::{DropoutMasks, TcnConfig, TcnModel, WindowDataset};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Mean squared error and its gradient with respect to every parameter.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub loss: f64,
    pub grads: Vec<f64>,
}

fn batch_gradients(
    model: &TcnModel,
    inputs: &[&Matrix],
    targets: &[f64],
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<Gradients> {
    if inputs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if inputs.len() != targets.len() {
        return Err(Error::LengthMismatch {
            left: inputs.len(),
            right: targets.len(),
        });
    }
    let scale = 1.0 / inputs.len() as f64;
    let mut grads = vec![0.0; model.num_params()];
    let mut loss = 0.0;
    for (x, &target) in inputs.iter().zip(targets) {
        model.check_window(x)?;
        let masks = dropout.as_deref_mut().map(|rng| sample_masks(model, x.rows(), rng));
        let (y, caches) = forward_cached(model, x, masks.as_deref());
        let err = y - target;
        loss += err * err * scale;
        backward(model, x.rows(), &caches, 2.0 * err * scale, &mut grads);
    }
    Ok(Gradients { loss, grads })
}

/// Exact MSE gradients in evaluation mode (no dropout).
pub fn compute_gradients(model: &TcnModel, inputs: &[&Matrix], targets: &[f64]) -> Result<Gradients> {
    batch_gradients(model, inputs, targets, None)
}

fn sample_masks(model: &TcnModel, steps: usize, rng: &mut ChaCha8Rng) -> Vec<DropoutMasks> {
    let p = model.config.dropout;
    let keep = 1.0 / (1.0 - p);
    let mut draw = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect()
    };
    model
        .layout
        .levels
        .iter()
        .map(|l| DropoutMasks {
            first: draw(steps * l.out_channels),
            second: draw(steps * l.out_channels),
        })
        .collect()
}

fn mean_loss(model: &TcnModel, data: &WindowDataset) -> f64 {
    let n = data.len() as f64;
    data.inputs
        .iter()
        .zip(&data.targets)
        .map(|(x, t)| {
            let (y, _) = forward_cached(model, x, None);
            (y - t).powi(2) / n
        })
        .sum()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch, as seen by the optimizer.
    pub train_loss: Vec<f64>,
    /// Validation loss per epoch (evaluation mode); empty without validation data.
    pub val_loss: Vec<f64>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
}

/// Epoch losses this many times above the loss at the initial parameters
/// count as divergence.
const EXPLOSION_FACTOR: f64 = 1e12;

/// Adam on shuffled mini-batches. Returns the snapshot with the lowest
/// validation loss (training loss when `val` is empty).
pub fn train(
    model: TcnModel,
    data: &WindowDataset,
    val: &WindowDataset,
    config: &TcnConfig,
) -> Result<(TcnModel, TrainReport)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut model = model;
    let arch = |c: &TcnConfig| (c.kernel_size, c.hidden_sizes.clone(), c.window);
    if arch(&model.config) != arch(config) {
        return Err(Error::ShapeMismatch(
            "training config architecture differs from the model".into(),
        ));
    }
    model.config = config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);

    let n_params = model.num_params();
    let mut m = vec![0.0; n_params];
    let mut v = vec![0.0; n_params];
    let mut step = 0i32;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport::default();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let baseline = mean_loss(&model, data).max(1e-8);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let inputs: Vec<&Matrix> = batch.iter().map(|&i| &data.inputs[i]).collect();
            let targets: Vec<f64> = batch.iter().map(|&i| data.targets[i]).collect();
            let dropout = (config.dropout > 0.0).then_some(&mut rng);
            let g = batch_gradients(&model, &inputs, &targets, dropout)?;
            if !g.loss.is_finite() || g.grads.iter().any(|x| !x.is_finite()) {
                return Err(Error::DivergedLoss { epoch });
            }
            epoch_loss += g.loss * batch.len() as f64 / data.len() as f64;

            step += 1;
            let c1 = 1.0 - BETA1.powi(step);
            let c2 = 1.0 - BETA2.powi(step);
            for (((p, gi), mi), vi) in model.params.iter_mut().zip(&g.grads).zip(&mut m).zip(&mut v) {
                *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
                *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
                *p -= config.learning_rate * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
            }
        }
        if !epoch_loss.is_finite() || epoch_loss > EXPLOSION_FACTOR * baseline {
            return Err(Error::DivergedLoss { epoch });
        }
        report.train_loss.push(epoch_loss);

        let score = if val.is_empty() {
            mean_loss(&model, data)
        } else {
            let l = mean_loss(&model, val);
            report.val_loss.push(l);
            l
        };
        if !score.is_finite() {
            return Err(Error::DivergedLoss { epoch });
        }
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, model.params.clone()));
            report.best_epoch = epoch;
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok((model, report))
}
