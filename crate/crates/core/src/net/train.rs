//! Mini-batch Adam training with categorical cross-entropy.

use serde::{Deserialize, Serialize};

use super::exec::{argmax, backward, cross_entropy, forward, params_from_model, Mode, Params, Plan};
use super::model::{ModelGraph, ParamTensor};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub seed: u64,
    pub test_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 20,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 42,
            test_fraction: 0.25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate {}", self.learning_rate)));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::invalid(format!("test fraction {}", self.test_fraction)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return Err(Error::invalid("Adam betas must lie in [0, 1) and epsilon be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f32,
    pub train_accuracy: f64,
    /// `None` when the dataset has no test frames.
    pub test_loss: Option<f32>,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }
}

/// Adam with bias correction over flat parameter slices.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    /// `sizes` lists the length of every parameter slice that will be updated.
    pub fn new(sizes: &[usize], learning_rate: f32, beta1: f32, beta2: f32, epsilon: f32) -> Self {
        Adam {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// One update; `params` and `grads` are in the order given to [`Adam::new`].
    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[&[f32]]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

/// Frames `indices` of `dataset` scaled to [0, 1].
pub(crate) fn batch_input(dataset: &Dataset, indices: &[usize]) -> Vec<f32> {
    let mut out = Vec::with_capacity(indices.len() * dataset.frame_len());
    for &i in indices {
        out.extend(dataset.frame(i).iter().map(|&v| v as f32 / 255.0));
    }
    out
}

/// Inference-mode class probabilities for `indices`, `classes` per frame.
pub(crate) fn predict(plan: &Plan, params: &Params<f32>, dataset: &Dataset, indices: &[usize]) -> Result<Vec<f32>> {
    const CHUNK: usize = 64;
    let mut probs = Vec::with_capacity(indices.len() * plan.classes());
    for chunk in indices.chunks(CHUNK) {
        let t = forward(plan, params, batch_input(dataset, chunk), chunk.len(), Mode::Infer)?;
        probs.extend(t.probs);
    }
    Ok(probs)
}

fn accuracy(probs: &[f32], labels: &[usize], classes: usize) -> f64 {
    let hits = probs
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(p, &l)| argmax(p) == l)
        .count();
    hits as f64 / labels.len() as f64
}

fn ensure_shape(model: &ModelGraph, dataset: &Dataset) -> Result<()> {
    let [h, w, c] = model.input_shape;
    if dataset.height != h || dataset.width != w || c != 1 {
        return Err(Error::shape(format!(
            "model expects {h}x{w}x{c} frames, dataset has {}x{}x1",
            dataset.height, dataset.width
        )));
    }
    Ok(())
}

/// Trains a copy of `model` on the train split of `dataset`.
///
/// Each epoch visits the train frames in the order of a shuffle seeded by
/// `(config.seed, 1000 + epoch)`; the last batch may be short. After every
/// epoch the test split is evaluated in inference mode.
pub fn train(model: &ModelGraph, dataset: &Dataset, config: &TrainConfig) -> Result<(ModelGraph, TrainHistory)> {
    config.validate()?;
    model.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    ensure_shape(model, dataset)?;
    let train_idx = dataset.indices(Split::Train);
    let test_idx = dataset.indices(Split::Test);
    if config.batch_size > train_idx.len() {
        return Err(Error::invalid(format!(
            "batch size {} exceeds the {} training frames",
            config.batch_size,
            train_idx.len()
        )));
    }

    let plan = Plan::new(model)?;
    let classes = plan.classes();
    let mut params = params_from_model(model)?;
    let slots: Vec<(usize, usize)> = model
        .layers
        .iter()
        .enumerate()
        .flat_map(|(i, l)| l.spec.learnable_params().iter().map(move |&r| (i, r)))
        .collect();
    let sizes: Vec<usize> = slots.iter().map(|&(i, r)| params[i][r].len()).collect();
    let mut adam = Adam::new(&sizes, config.learning_rate, config.beta1, config.beta2, config.epsilon);

    let test_labels: Vec<usize> = test_idx.iter().map(|&i| dataset.label(i).index()).collect();
    let mut history = TrainHistory::default();
    for epoch in 0..config.epochs {
        let mut order = train_idx.clone();
        SeededRng::stream(config.seed, 1000 + epoch as u64).shuffle(&mut order);

        let (mut loss_sum, mut hits) = (0f64, 0usize);
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            if let Some(&leak) = batch.iter().find(|&&i| dataset.split_of(i) != Split::Train) {
                return Err(Error::Training {
                    epoch,
                    batch: b,
                    reason: format!("frame {leak} is not in the train split"),
                });
            }
            let labels: Vec<usize> = batch.iter().map(|&i| dataset.label(i).index()).collect();
            let trace = forward(&plan, &params, batch_input(dataset, batch), batch.len(), Mode::Train)?;
            let loss = cross_entropy(&trace.probs, &labels, classes);
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    batch: b,
                    reason: format!("loss is {loss}"),
                });
            }
            loss_sum += loss as f64 * batch.len() as f64;
            hits += trace
                .probs
                .chunks_exact(classes)
                .zip(&labels)
                .filter(|(p, &l)| argmax(p) == l)
                .count();

            let grads = backward(&plan, &params, &trace, &labels)?;
            for (i, running) in trace.running.into_iter().enumerate() {
                if let Some((mean, var)) = running {
                    params[i][2] = mean;
                    params[i][3] = var;
                }
            }
            let grad_refs: Vec<&[f32]> = slots.iter().map(|&(i, r)| grads[i][r].as_slice()).collect();
            let mut param_refs: Vec<&mut [f32]> = Vec::with_capacity(slots.len());
            for (i, layer) in params.iter_mut().enumerate() {
                for (r, rec) in layer.iter_mut().enumerate() {
                    if slots.contains(&(i, r)) {
                        param_refs.push(rec);
                    }
                }
            }
            adam.step(&mut param_refs, &grad_refs);
        }

        let (test_loss, test_accuracy) = if test_idx.is_empty() {
            (None, None)
        } else {
            let probs = predict(&plan, &params, dataset, &test_idx)?;
            (
                Some(cross_entropy(&probs, &test_labels, classes)),
                Some(accuracy(&probs, &test_labels, classes)),
            )
        };
        history.epochs.push(EpochStats {
            epoch: epoch + 1,
            train_loss: (loss_sum / train_idx.len() as f64) as f32,
            train_accuracy: hits as f64 / train_idx.len() as f64,
            test_loss,
            test_accuracy,
        });
    }

    let mut trained = model.clone();
    for (layer, values) in trained.layers.iter_mut().zip(params) {
        for (p, v) in layer.params.iter_mut().zip(values) {
            *p = ParamTensor::f32(v);
        }
    }
    trained.epochs_trained = model.epochs_trained + config.epochs as u32;
    Ok((trained, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step() {
        let mut adam = Adam::new(&[1], 1e-3, 0.9, 0.999, 1e-8);
        let mut w = [1.0f32];
        adam.step(&mut [&mut w[..]], &[&[1.0][..]]);
        assert!((w[0] - 0.999).abs() < 1e-6, "{}", w[0]);
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut adam = Adam::new(&[3], 1e-3, 0.9, 0.999, 1e-8);
        let mut w = [0.5f32, -2.0, 7.0];
        let before = w;
        for _ in 0..5 {
            adam.step(&mut [&mut w[..]], &[&[0.0; 3][..]]);
        }
        assert_eq!(w, before);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { test_fraction: 1.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
    }
}
