//! Training loop (Adam with stepped learning-rate decay), evaluation metrics,
//! and the per-sample gradient plumbing.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DinError, Result};
use crate::grid::FeatureGrid;
use crate::model::{forward, DinConfig, ModelParams};
use crate::scalar::Scalar;
use crate::synth::Dataset;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// Learning rate is multiplied by `decay` every `decay_every` epochs
    /// (0 disables decay).
    pub decay_every: usize,
    pub decay: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-4,
            decay_every: 10,
            decay: 1.0 / 3.0,
            epochs: 30,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr < 0.0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(DinError::InvalidConfig(
                "learning rate must be >= 0, epochs and batch size positive".into(),
            ));
        }
        Ok(())
    }
}

/// `lr0 * decay^(epoch / decay_every)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    if cfg.decay_every == 0 {
        return cfg.base_lr;
    }
    cfg.base_lr * cfg.decay.powi((epoch / cfg.decay_every) as i32)
}

/// Bias-corrected first/second-moment state, one slot per parameter tensor in
/// visit order.
#[derive(Clone, Debug)]
pub struct AdamState<S: Scalar> {
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &ModelParams<S>) -> Self {
        let sizes: Vec<usize> = params.visit().iter().map(|(_, t)| t.numel()).collect();
        AdamState {
            m: sizes.iter().map(|&n| vec![S::ZERO; n]).collect(),
            v: sizes.iter().map(|&n| vec![S::ZERO; n]).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One Adam update over all parameters.
pub fn adam_step<S: Scalar>(
    params: &mut ModelParams<S>,
    grads: &[Vec<S>],
    state: &mut AdamState<S>,
    tc: &TrainConfig,
    lr: f64,
) -> Result<()> {
    let mut tensors = params.visit_mut();
    if tensors.len() != grads.len() || tensors.len() != state.m.len() {
        return Err(DinError::ConfigMismatch(format!(
            "adam: {} tensors, {} gradients, {} state slots",
            tensors.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let beta1 = S::from_f64(tc.beta1);
    let beta2 = S::from_f64(tc.beta2);
    let eps = S::from_f64(tc.epsilon);
    let one = S::ONE;
    let corr1 = S::from_f64(1.0 - tc.beta1.powi(t));
    let corr2 = S::from_f64(1.0 - tc.beta2.powi(t));
    let lr_s = S::from_f64(lr);
    for (slot, (name, tensor)) in tensors.iter_mut().enumerate() {
        let g = &grads[slot];
        if g.len() != tensor.numel() {
            return Err(DinError::BadShape {
                op: "adam_step",
                expected: format!("{} gradient values for {name}", tensor.numel()),
                found: format!("{}", g.len()),
            });
        }
        let m = &mut state.m[slot];
        let v = &mut state.v[slot];
        for (i, p) in tensor.values_mut().iter_mut().enumerate() {
            let gi = g[i];
            m[i] = beta1 * m[i] + (one - beta1) * gi;
            v[i] = beta2 * v[i] + (one - beta2) * gi * gi;
            let m_hat = m[i] / corr1;
            let v_hat = v[i] / corr2;
            *p -= lr_s * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Cross-entropy loss and parameter gradients (visit order) for one sample.
pub fn sample_loss_and_grads<S: Scalar>(
    cfg: &DinConfig,
    params: &ModelParams<S>,
    grid: &FeatureGrid<S>,
    label: usize,
) -> Result<(f64, Vec<Vec<S>>)> {
    let mut tape = Tape::new();
    let grid_id = tape.constant(grid.tensor().clone());
    let pass = forward(&mut tape, cfg, params, grid_id, grid.presence(), true)?;
    let loss = tape.cross_entropy(pass.logits, label)?;
    tape.backward(loss)?;
    let loss_value = tape.value(loss).values()[0].to_f64();
    let grads = pass
        .params
        .iter()
        .map(|(_, id)| tape.grad(*id).expect("parameter gradient").to_vec())
        .collect();
    Ok((loss_value, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Multi-class classification accuracy, percent.
    pub mca: f64,
    /// Mean per-class accuracy (macro recall), percent.
    pub mpca: f64,
    /// confusion[true][predicted] counts.
    pub confusion: Vec<Vec<u64>>,
}

impl EvalReport {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Self {
        let total: u64 = confusion.iter().flatten().sum();
        let diag: u64 = confusion
            .iter()
            .enumerate()
            .map(|(i, row)| row[i])
            .sum();
        let mca = if total == 0 {
            0.0
        } else {
            100.0 * diag as f64 / total as f64
        };
        let mut recalls = Vec::new();
        for (i, row) in confusion.iter().enumerate() {
            let row_sum: u64 = row.iter().sum();
            if row_sum > 0 {
                recalls.push(row[i] as f64 / row_sum as f64);
            }
        }
        let mpca = if recalls.is_empty() {
            0.0
        } else {
            100.0 * recalls.iter().sum::<f64>() / recalls.len() as f64
        };
        EvalReport {
            mca,
            mpca,
            confusion,
        }
    }

    pub fn from_predictions(truths: &[usize], preds: &[usize], classes: usize) -> Result<Self> {
        if truths.len() != preds.len() {
            return Err(DinError::BadShape {
                op: "eval",
                expected: format!("{} predictions", truths.len()),
                found: format!("{}", preds.len()),
            });
        }
        let mut confusion = vec![vec![0u64; classes]; classes];
        for (&t, &p) in truths.iter().zip(preds) {
            if t >= classes || p >= classes {
                return Err(DinError::LabelOutOfRange {
                    label: t.max(p),
                    classes,
                });
            }
            confusion[t][p] += 1;
        }
        Ok(Self::from_confusion(confusion))
    }
}

/// Predicted class: argmax of the logits, ties to the lowest index.
pub fn predict<S: Scalar>(logits: &Tensor<S>) -> usize {
    let v = logits.values();
    let mut best = 0usize;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate<S: Scalar>(
    cfg: &DinConfig,
    params: &ModelParams<S>,
    dataset: &Dataset<S>,
) -> Result<EvalReport> {
    let mut truths = Vec::with_capacity(dataset.len());
    let mut preds = Vec::with_capacity(dataset.len());
    for (grid, &label) in dataset.grids.iter().zip(&dataset.labels) {
        let logits = crate::model::forward_logits(cfg, params, grid)?;
        truths.push(label);
        preds.push(predict(&logits));
    }
    EvalReport::from_predictions(&truths, &preds, cfg.classes)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub eval: Option<EvalReport>,
}

/// Deterministic full training run: seeded init, seeded shuffle, fixed-order
/// gradient reduction, one Adam step per batch on batch-mean gradients.
pub fn train<S: Scalar>(
    cfg: &DinConfig,
    tc: &TrainConfig,
    train_set: &Dataset<S>,
    eval_set: Option<&Dataset<S>>,
) -> Result<(ModelParams<S>, Vec<EpochStats>)> {
    cfg.validate()?;
    tc.validate()?;
    if train_set.is_empty() {
        return Err(DinError::InvalidConfig("empty training set".into()));
    }
    for &label in &train_set.labels {
        if label >= cfg.classes {
            return Err(DinError::LabelOutOfRange {
                label,
                classes: cfg.classes,
            });
        }
    }

    let mut params = ModelParams::init(cfg, tc.seed)?;
    let mut state = AdamState::new(&params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5357_4d5f_5348_464c);
    let mut history = Vec::with_capacity(tc.epochs);
    let mut indices: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..tc.epochs {
        let lr = lr_at(epoch, tc);
        indices.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0f64;
        for (batch_no, batch) in indices.chunks(tc.batch_size).enumerate() {
            let mut batch_grads: Option<Vec<Vec<S>>> = None;
            let mut batch_loss = 0.0f64;
            for &sample in batch {
                let (loss, grads) = sample_loss_and_grads(
                    cfg,
                    &params,
                    &train_set.grids[sample],
                    train_set.labels[sample],
                )?;
                batch_loss += loss;
                match &mut batch_grads {
                    None => batch_grads = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            for (av, &gv) in a.iter_mut().zip(g) {
                                *av += gv;
                            }
                        }
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(DinError::Diverged {
                    epoch,
                    batch: batch_no,
                });
            }
            let mut grads = batch_grads.expect("non-empty batch");
            let inv = S::from_f64(1.0 / batch.len() as f64);
            for g in grads.iter_mut() {
                for v in g.iter_mut() {
                    *v = *v * inv;
                }
            }
            adam_step(&mut params, &grads, &mut state, tc, lr)?;
            epoch_loss += batch_loss;
        }
        let eval = match eval_set {
            Some(ds) => Some(evaluate(cfg, &params, ds)?),
            None => None,
        };
        history.push(EpochStats {
            epoch,
            lr,
            train_loss: epoch_loss / train_set.len() as f64,
            eval,
        });
    }
    Ok((params, history))
}
