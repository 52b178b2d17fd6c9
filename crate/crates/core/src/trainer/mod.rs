//! Mini-batch training with Adam, a cyclical learning rate and
//! best-on-validation checkpointing.

mod optim;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use optim::{
    adam_step, batch_cross_entropy, cross_entropy, l2_penalty, xavier_init, AdamConfig, AdamState, Clr, LOG_FLOOR,
};

use crate::error::{Error, Result};
use crate::netdef::{NetworkDef, ParamKind};
use crate::network::{backward, forward, forward_trace, GradSeed, Weights};
use crate::ops::Mode;
use crate::preprocess::{augment, AugmentPolicy, LeafImage};
use crate::tensor::Tensor;
use crate::weights_io;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub clr: Clr,
    pub l2_lambda: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stops mid-epoch once this many optimizer steps have run.
    pub max_steps: Option<u64>,
    pub adam: AdamConfig,
    pub augment: AugmentPolicy,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            clr: Clr::default(),
            l2_lambda: 0.001,
            batch_size: 256,
            max_epochs: 10_000,
            max_steps: None,
            adam: AdamConfig::default(),
            augment: AugmentPolicy::LEAF,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults with the batch size used for stage 1, 2 or 3.
    pub fn for_stage(stage: u8) -> Result<Self> {
        let batch_size = match stage {
            1 => 256,
            2 => 128,
            3 => 512,
            s => return Err(Error::invalid(format!("no stage {s}"))),
        };
        Ok(TrainConfig { batch_size, ..Default::default() })
    }

    pub fn validate(&self) -> Result<()> {
        self.clr.validate()?;
        if self.l2_lambda < 0.0 {
            return Err(Error::invalid("l2_lambda must be >= 0"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::invalid("batch size and epoch count must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    /// Mean cross-entropy of the batch plus the L2 penalty.
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps completed at the end of the epoch.
    pub step: u64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub train_loss: f64,
    /// Inference-mode accuracy on the un-augmented training set.
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best_weights: Weights,
    pub best_val_acc: f64,
    pub best_epoch: usize,
    pub final_weights: Weights,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

pub fn history_csv(epochs: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,step,lr,train_loss,train_acc,val_acc\n");
    for e in epochs {
        let _ = writeln!(s, "{},{},{},{},{},{}", e.epoch, e.step, e.lr, e.train_loss, e.train_acc, e.val_acc);
    }
    s
}

/// Inference-mode accuracy over prepared `(1, C, H, W)` inputs.
pub fn accuracy(def: &NetworkDef, weights: &Weights, inputs: &[Tensor], labels: &[usize], batch: usize) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let mut hits = 0usize;
    for (xs, ys) in inputs.chunks(batch.max(1)).zip(labels.chunks(batch.max(1))) {
        let probs = forward(def, weights, &Tensor::stack(xs)?, Mode::Infer)?;
        let k = def.class_count;
        for (b, &y) in ys.iter().enumerate() {
            let row = &probs.data()[b * k..(b + 1) * k];
            let pred = row
                .iter()
                .enumerate()
                .fold(0, |best, (c, &p)| if p > row[best] { c } else { best });
            hits += usize::from(pred == y);
        }
    }
    Ok(hits as f64 / inputs.len() as f64)
}

fn prepare(def: &NetworkDef, set: &[(LeafImage, usize)]) -> Result<(Vec<Tensor>, Vec<usize>)> {
    let xs = set.iter().map(|(leaf, _)| leaf.input_for(def.input_dims)).collect::<Result<_>>()?;
    Ok((xs, set.iter().map(|&(_, y)| y).collect()))
}

/// Trains from `init` (or a seeded Xavier start). When `checkpoint` is set,
/// the weights are saved there each time validation accuracy strictly
/// improves.
pub fn train(
    def: &NetworkDef,
    train_set: &[(LeafImage, usize)],
    val_set: &[(LeafImage, usize)],
    cfg: &TrainConfig,
    init: Option<Weights>,
    checkpoint: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    if let Some(&(_, y)) = train_set.iter().chain(val_set).find(|(_, y)| *y >= def.class_count) {
        return Err(Error::invalid(format!("label {y} out of range for {} classes", def.class_count)));
    }
    let mut weights = match init {
        Some(w) => {
            w.check_against(def)?;
            w
        }
        None => xavier_init(def, cfg.seed)?,
    };
    let (train_x, train_y) = prepare(def, train_set)?;
    let (val_x, val_y) = prepare(def, val_set)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_7a1e);
    let mut adam = AdamState::new(&weights);
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut best = (weights.clone(), f64::NEG_INFINITY, 0usize);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let augmenting = cfg.augment != AugmentPolicy::NONE;

    'epochs: for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| adam.step >= m) {
                break;
            }
            let mut xs = Vec::with_capacity(chunk.len());
            for &i in chunk {
                if augmenting {
                    let (leaf, _) = &train_set[i];
                    let (rgb, mask) = augment(&leaf.rgb, &leaf.mask, rng.gen(), &cfg.augment)?;
                    xs.push(LeafImage::new(rgb, mask)?.input_for(def.input_dims)?);
                } else {
                    xs.push(train_x[i].clone());
                }
            }
            let labels: Vec<usize> = chunk.iter().map(|&i| train_y[i]).collect();
            let x = Tensor::stack(&xs)?;

            let lr = cfg.clr.rate(adam.step);
            let trace = forward_trace(def, &weights, &x, Mode::Train, &mut rng)?;
            let (ce, seed) = batch_cross_entropy(&trace.output, &labels)?;
            let loss = ce + l2_penalty(&weights, cfg.l2_lambda);
            let grads = backward(def, &weights, &trace, GradSeed::Logits(seed))?;
            adam_step(&mut weights, &grads.params, &mut adam, &cfg.adam, lr, cfg.l2_lambda)?;
            for (layer, mean, var) in trace.moving {
                weights.insert(def.param_name(layer, ParamKind::MovingMean), mean);
                weights.insert(def.param_name(layer, ParamKind::MovingVar), var);
            }
            steps.push(StepRecord { step: adam.step - 1, lr, loss });
            epoch_loss += loss;
            epoch_batches += 1;
        }
        if epoch_batches == 0 {
            break 'epochs;
        }
        let batch = cfg.batch_size.max(64);
        let val_acc = accuracy(def, &weights, &val_x, &val_y, batch)?;
        let record = EpochRecord {
            epoch,
            step: adam.step,
            lr: steps.last().map_or(0.0, |s| s.lr),
            train_loss: epoch_loss / epoch_batches as f64,
            train_acc: accuracy(def, &weights, &train_x, &train_y, batch)?,
            val_acc,
        };
        epochs.push(record);
        if val_acc > best.1 {
            best = (weights.clone(), val_acc, epoch);
            if let Some(path) = checkpoint {
                weights_io::save(&weights, path)?;
            }
        }
    }

    let (best_weights, best_val_acc, best_epoch) = best;
    Ok(TrainOutcome { best_weights, best_val_acc, best_epoch, final_weights: weights, epochs, steps })
}

pub fn write_history(path: &Path, epochs: &[EpochRecord]) -> Result<()> {
    fs::write(path, history_csv(epochs))?;
    Ok(())
}
