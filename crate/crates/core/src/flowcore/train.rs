use flowlab_tensor::{clip_grad_norm, Adam};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::arch::FlowArch;
use super::model::FlowModel;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Adam step size.
    pub lr: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    /// Fraction of all steps over which the KL weight ramps linearly to 1.
    pub kl_warmup_frac: f64,
    pub seed: u64,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            grad_clip: 100.0,
            kl_warmup_frac: 0.1,
            seed: 0,
        }
    }
}

impl FlowTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("flow training needs positive epochs and batch size".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("flow learning rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.kl_warmup_frac) || self.grad_clip < 0.0 {
            return Err(Error::Config("bad KL warm-up fraction or gradient clip".into()));
        }
        Ok(())
    }

    /// KL weight at 0-based `step` of `total` steps.
    pub fn kl_weight(&self, step: usize, total: usize) -> f64 {
        let warm = (self.kl_warmup_frac * total as f64).ceil();
        if warm < 1.0 {
            1.0
        } else {
            ((step + 1) as f64 / warm).min(1.0)
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowTrainLog {
    /// Mean training bits/dim (full bound) of each epoch.
    pub epoch_bpd: Vec<f64>,
}

/// Maximum-likelihood training with Adam on the variational bound.
pub fn train_flow(images: &[&Image], arch: FlowArch, cfg: &FlowTrainConfig) -> Result<(FlowModel, FlowTrainLog)> {
    train_flow_with(images, arch, cfg, |_, _| {})
}

/// [`train_flow`] with a callback receiving `(epoch, mean bpd)` after each epoch.
pub fn train_flow_with(
    images: &[&Image],
    arch: FlowArch,
    cfg: &FlowTrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(FlowModel, FlowTrainLog)> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::invalid("flow training needs a non-empty dataset"));
    }
    let mut model = FlowModel::<f32>::new(arch, cfg.seed)?;
    let mut opt = Adam::new(cfg.lr);
    let steps_per_epoch = images.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut log = FlowTrainLog::default();
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seed::stream(cfg.seed, "flow-epoch", epoch as u64));
        let mut sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&Image> = idx.iter().map(|&i| images[i]).collect();
            let mut rngs: Vec<_> = idx
                .iter()
                .map(|&i| seed::stream(cfg.seed, "flow-noise", (step * images.len() + i) as u64))
                .collect();
            let beta = cfg.kl_weight(step, total);
            let (loss, bpd, mut grads) = model
                .loss_and_grads(&batch, &mut rngs, beta)
                .map_err(|e| match e {
                    Error::NumericFailure { .. } => Error::Diverged { epoch, what: "bpd" },
                    other => other,
                })?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, what: "bpd" });
            }
            if cfg.grad_clip > 0.0 {
                clip_grad_norm(&mut grads, cfg.grad_clip);
            }
            opt.step(model.params_mut(), &grads);
            if !model.params().all_finite() {
                return Err(Error::Diverged { epoch, what: "parameters" });
            }
            sum += bpd.iter().sum::<f64>();
            step += 1;
        }
        let mean = sum / images.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged { epoch, what: "bpd" });
        }
        log.epoch_bpd.push(mean);
        on_epoch(epoch, mean);
    }
    model.train_echo = Some(serde_json::to_value(cfg)?);
    Ok((model, log))
}
