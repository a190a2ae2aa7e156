use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::objective::{sample_batch, total_loss};
use super::TrainConfig;
use crate::data::{Dataset, SegmentSampler};
use crate::error::{Error, Result};
use crate::model::{Gradients, ModelConfig, ParameterStore, WorldModel};

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    pub fn new(params: &ParameterStore, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ParameterStore, grads: &Gradients) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let tensors = params.tensors_mut();
        let moments = self.m.data.iter_mut().zip(self.v.data.iter_mut());
        for ((tensor, (m, v)), g) in tensors.zip(moments).zip(grads.tensors()) {
            for (((p, m), v), g) in tensor.data.iter_mut().zip(m).zip(v).zip(g) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Per-epoch means of the loss components and gradient norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_mh: f64,
    pub loss_reach_enc: f64,
    pub loss_reach_pred: f64,
    pub loss_reg: f64,
    pub grad_norm: f64,
    pub loss_cov: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsLog {
    pub rows: Vec<EpochMetrics>,
}

impl MetricsLog {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "epoch",
            "loss_total",
            "loss_mh",
            "loss_reach_enc",
            "loss_reach_pred",
            "loss_reg",
            "grad_norm",
            "loss_cov",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.epoch.to_string(),
                r.loss_total.to_string(),
                r.loss_mh.to_string(),
                r.loss_reach_enc.to_string(),
                r.loss_reach_pred.to_string(),
                r.loss_reg.to_string(),
                r.grad_norm.to_string(),
                r.loss_cov.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub model: WorldModel,
    pub metrics: MetricsLog,
}

/// Seeded training run. `model_config` must agree with `cfg` on the context
/// length and with the pair config on `h_max`.
pub fn fit(ds: &Dataset, cfg: &TrainConfig, model_config: ModelConfig) -> Result<FitOutput> {
    cfg.validate()?;
    if model_config.context_len != cfg.context_len {
        return Err(Error::Config(format!(
            "model context length {} but training context length {}",
            model_config.context_len, cfg.context_len
        )));
    }
    if model_config.h_max != cfg.pairs.h_max as usize {
        return Err(Error::Config(format!(
            "model h_max {} but pair h_max {}",
            model_config.h_max, cfg.pairs.h_max
        )));
    }
    let mut model = WorldModel::new(model_config, cfg.seed)?;
    let mut sampler = SegmentSampler::new(ds, cfg.context_len, cfg.horizon, cfg.seed ^ 0x5e6)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9a1));
    let mut adam = Adam::new(&model.params, cfg.learning_rate);
    let mut metrics = MetricsLog::default();
    for epoch in 0..cfg.epochs {
        let mut acc = EpochMetrics {
            epoch,
            loss_total: 0.0,
            loss_mh: 0.0,
            loss_reach_enc: 0.0,
            loss_reach_pred: 0.0,
            loss_reg: 0.0,
            grad_norm: 0.0,
            loss_cov: 0.0,
        };
        for step in 0..cfg.steps_per_epoch {
            let batch = sample_batch(ds, &mut sampler, cfg, &mut rng)?;
            let (b, grads) = total_loss(&model, ds, &batch, &cfg.weights)?;
            let norm = grads.norm();
            if !b.total.is_finite() || !norm.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!(
                        "loss {} (mh {}, reach_enc {}, reach_pred {}, reg {}, cov {}), grad norm {norm}",
                        b.total, b.mh, b.reach_enc, b.reach_pred, b.reg, b.cov
                    ),
                });
            }
            adam.step(&mut model.params, &grads);
            acc.loss_total += b.total;
            acc.loss_mh += b.mh;
            acc.loss_reach_enc += b.reach_enc;
            acc.loss_reach_pred += b.reach_pred;
            acc.loss_reg += b.reg;
            acc.grad_norm += norm;
            acc.loss_cov += b.cov;
        }
        let n = cfg.steps_per_epoch.max(1) as f64;
        acc.loss_total /= n;
        acc.loss_mh /= n;
        acc.loss_reach_enc /= n;
        acc.loss_reach_pred /= n;
        acc.loss_reg /= n;
        acc.grad_norm /= n;
        acc.loss_cov /= n;
        metrics.rows.push(acc);
    }
    Ok(FitOutput { model, metrics })
}
