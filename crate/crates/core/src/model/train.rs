use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::Batch;
use super::{save_checkpoint, LossBreakdown, LossConfig, NetworkModel};
use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    pub total: f64,
    pub am: f64,
    pub mse: f64,
    pub lin_ind: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Epoch at which the intermediate snapshot was taken.
    pub checkpoint_epoch: usize,
    pub checkpoint_paths: Vec<PathBuf>,
}

impl TrainReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("epochs: {}\n", self.epochs.len()));
        s.push_str(&format!("checkpoint_epoch: {}\n", self.checkpoint_epoch));
        if let Some(last) = self.epochs.last() {
            s.push_str(&format!("final_loss: {:.8e}\n", last.total));
            s.push_str(&format!("final_accuracy: {:.8e}\n", last.accuracy));
        }
        for p in &self.checkpoint_paths {
            s.push_str(&format!(
                "checkpoint: {}\n",
                p.file_name().map(|f| f.to_string_lossy()).unwrap_or_default()
            ));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,learning_rate,total,am,mse,lin_ind,accuracy\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e}\n",
                e.epoch, e.learning_rate, e.total, e.am, e.mse, e.lin_ind, e.accuracy
            ));
        }
        s
    }
}

pub struct TrainOutcome {
    pub report: TrainReport,
    /// Model as it was after `round(checkpoint_fraction * epochs)` epochs.
    pub snapshot: NetworkModel,
}

/// Step schedule: the initial rate times `lr_decay` for every decay fraction
/// already passed (epochs are 0-based).
pub fn lr_at_epoch(initial: f64, decay: f64, fractions: &[f64], epochs: usize, epoch: usize) -> f64 {
    let passed = fractions
        .iter()
        .filter(|&&f| epoch >= (f * epochs as f64).round() as usize)
        .count();
    initial * decay.powi(passed as i32)
}

/// SGD with momentum and weight decay on mini-batches of a fixed per-epoch
/// shuffle. Deterministic for a given config seed.
pub fn train(
    model: &mut NetworkModel,
    data: &Dataset,
    loss: &LossConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    loss.validate()?;
    let cfg = model.config().clone();
    let labels = data
        .labels
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter(format!("dataset {} has no labels", data.name)))?;
    let classes = model.centroids().class_count();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidParameter(format!("label {bad} outside [0, {classes})")));
    }
    if data.shape != model.input_shape() {
        return Err(Error::ShapeMismatch(format!(
            "dataset shape {:?} does not match model input {:?}",
            data.shape,
            model.input_shape()
        )));
    }
    if data.is_empty() {
        return Err(Error::EmptyInput(format!("dataset {} is empty", data.name)));
    }

    let n = data.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5348_5546_464c_4521);
    let mut velocity: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
    let checkpoint_epoch = ((cfg.checkpoint_fraction * cfg.epochs as f64).round() as usize).clamp(1, cfg.epochs.max(1));
    let mut snapshot = model.clone();
    let mut report = TrainReport {
        checkpoint_epoch,
        ..TrainReport::default()
    };
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg.learning_rate, cfg.lr_decay, &cfg.decay_fractions, cfg.epochs, epoch);
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        for chunk in order.chunks(cfg.batch_size) {
            let mut inputs = Vec::with_capacity(chunk.len() * data.shape.size());
            let mut batch_labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                inputs.extend_from_slice(data.sample(i));
                batch_labels.push(labels[i]);
            }
            let x = Batch::new(chunk.len(), data.shape, inputs)?;
            let (b, grads, norm_caches) = model.loss_and_gradients(&x, &batch_labels, loss, true)?;
            if !b.total.is_finite() {
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    reason: format!("loss became {} (am {}, mse {}, lin_ind {})", b.total, b.am, b.mse, b.lin_ind),
                });
            }
            let w = chunk.len() as f64;
            sums.total += b.total * w;
            sums.am += b.am * w;
            sums.mse += b.mse * w;
            sums.lin_ind += b.lin_ind * w;
            sums.correct += b.correct;

            for ((param, grad), vel) in model.params_mut().into_iter().zip(&grads.0).zip(&mut velocity) {
                for k in 0..param.len() {
                    let g = grad[k] + cfg.weight_decay * param[k];
                    vel[k] = cfg.momentum * vel[k] + g;
                    param[k] -= lr * vel[k];
                }
            }
            model.update_running_stats(&norm_caches);
        }
        if model.params().iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence {
                epoch: epoch + 1,
                reason: "parameters became non-finite".into(),
            });
        }
        let stats = EpochStats {
            epoch: epoch + 1,
            learning_rate: lr,
            total: sums.total / n as f64,
            am: sums.am / n as f64,
            mse: sums.mse / n as f64,
            lin_ind: sums.lin_ind / n as f64,
            accuracy: sums.correct as f64 / n as f64,
        };
        log::debug!(
            "epoch {} lr {:.3e} loss {:.5} acc {:.4}",
            stats.epoch,
            lr,
            stats.total,
            stats.accuracy
        );
        report.epochs.push(stats);
        if epoch + 1 == checkpoint_epoch {
            snapshot = model.clone();
            if let Some(dir) = checkpoint_dir {
                let p = dir.join(format!("checkpoint_epoch{checkpoint_epoch}.bin"));
                save_checkpoint(model, &p)?;
                report.checkpoint_paths.push(p);
            }
        }
    }
    if let Some(dir) = checkpoint_dir {
        let p = dir.join("checkpoint_final.bin");
        save_checkpoint(model, &p)?;
        report.checkpoint_paths.push(p);
    }
    Ok(TrainOutcome { report, snapshot })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_steps_at_fractions() {
        let lr = |e| lr_at_epoch(0.1, 0.1, &[0.3, 0.6], 100, e);
        assert_eq!(lr(0), 0.1);
        assert_eq!(lr(29), 0.1);
        assert!((lr(30) - 0.01).abs() < 1e-15);
        assert!((lr(59) - 0.01).abs() < 1e-15);
        assert!((lr(60) - 0.001).abs() < 1e-15);
        assert!((lr(99) - 0.001).abs() < 1e-15);
    }
}
