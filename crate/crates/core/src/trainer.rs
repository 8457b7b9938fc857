//! Reconstruction training.
//!
//! Each training pair is pre-fused into two blended images; both go through
//! encoder and decoder without the fusion layer and are scored against
//! themselves with the composite loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::data::{ImagePair, PairDataset};
use crate::error::{Error, Result};
use crate::losses::{composite_loss, LossConfig};
use crate::network::{
    self, init_params, FeedbackConfig, ModelParams, ParamVars, PreFusionConfig, FUSION_LABEL,
};
use crate::optim::{Optimizer, OptimizerKind};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Pairs per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps, whatever the epoch count.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub pre_fusion: PreFusionConfig,
    pub loss: LossConfig,
    pub feedback: FeedbackConfig,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 200,
            max_steps: None,
            seed: 0,
            pre_fusion: PreFusionConfig::default(),
            loss: LossConfig::default(),
            feedback: FeedbackConfig::default(),
            optimizer: OptimizerKind::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::contract("learning_rate must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::contract("epochs must be at least 1"));
        }
        self.loss.validate()
    }
}

/// Loss values of one optimizer step, averaged over its samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub total: f64,
    pub pixel: f64,
    pub ssim: f64,
    pub ag: f64,
}

/// Per-epoch means of the step records.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub pixel: f64,
    pub ssim: f64,
    pub ag: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Times the fusion layer appeared on a training tape. Always zero for
    /// reconstruction training.
    pub fusion_invocations: usize,
}

impl TrainingLog {
    pub const HEADER: &'static str = "epoch,step,L,L_p,L_ssim,L_ag";

    pub fn step_line(r: &StepRecord) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            r.epoch, r.step, r.total, r.pixel, r.ssim, r.ag
        )
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.steps {
            out.push_str(&Self::step_line(r));
            out.push('\n');
        }
        out
    }
}

/// Loss values and parameter gradients of one pair.
#[derive(Debug, Clone)]
pub struct SampleGradients {
    pub total: f64,
    pub pixel: f64,
    pub ssim: f64,
    pub ag: f64,
    pub grads: Vec<Tensor<f32>>,
    pub fusion_nodes: usize,
}

/// Forward and backward for one pair: both pre-fused images form a batch
/// of two.
pub fn pair_gradients(
    pair: &ImagePair,
    params: &ModelParams<f32>,
    cfg: &TrainConfig,
) -> Result<SampleGradients> {
    let (a, b) = network::pre_fuse(&pair.infrared, &pair.visible, cfg.pre_fusion)?;
    let (w, h) = a.dims();
    let data: Vec<f32> = a
        .pixels()
        .iter()
        .chain(b.pixels())
        .map(|&v| v as f32)
        .collect();
    let input = Tensor::new(vec![2, 1, h, w], data)?;

    let mut tape = Tape::<f32>::new();
    let pv = ParamVars::register(&mut tape, params);
    let x = tape.leaf(input);
    let features = network::encode(&mut tape, x, &pv)?;
    let out = network::decode(&mut tape, features, &pv, cfg.feedback)?;
    let terms = composite_loss(&mut tape, out, x, &cfg.loss)?;
    let grads = tape.backward(terms.total)?;
    let scalar = |v| tape.value(v).item().map(f64::from);
    Ok(SampleGradients {
        total: scalar(terms.total)?,
        pixel: scalar(terms.pixel)?,
        ssim: scalar(terms.ssim)?,
        ag: scalar(terms.ag)?,
        grads: pv.all().iter().map(|&v| grads.get(&tape, v)).collect(),
        fusion_nodes: tape.count_label(FUSION_LABEL),
    })
}

/// Train from a fresh initialization seeded by `cfg.seed`.
pub fn train(dataset: &PairDataset, cfg: &TrainConfig) -> Result<(ModelParams<f32>, TrainingLog)> {
    train_from(init_params(cfg.seed), dataset, cfg, |_| {})
}

/// Train starting from `params`, calling `on_step` after every step.
pub fn train_from(
    mut params: ModelParams<f32>,
    dataset: &PairDataset,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<(ModelParams<f32>, TrainingLog)> {
    cfg.validate()?;
    params.validate()?;
    let train = dataset.train();
    if train.is_empty() {
        return Err(Error::contract("training split is empty"));
    }
    let mut opt = Optimizer::<f32>::new(cfg.optimizer, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainingLog::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;

    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let first_step = log.steps.len();
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let mut sum: Option<Vec<Tensor<f32>>> = None;
            let mut rec = [0.0f64; 4];
            for &i in batch {
                let s = pair_gradients(train[i], &params, cfg)?;
                log.fusion_invocations += s.fusion_nodes;
                rec[0] += s.total;
                rec[1] += s.pixel;
                rec[2] += s.ssim;
                rec[3] += s.ag;
                match sum.as_mut() {
                    None => sum = Some(s.grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&s.grads) {
                            for (x, &y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let n = batch.len() as f64;
            let mut grads = sum.expect("batches are nonempty");
            let inv = (1.0 / n) as f32;
            for g in grads.iter_mut() {
                for x in g.data_mut() {
                    *x *= inv;
                }
            }
            let record = StepRecord {
                epoch,
                step: step + 1,
                total: rec[0] / n,
                pixel: rec[1] / n,
                ssim: rec[2] / n,
                ag: rec[3] / n,
            };
            if !record.total.is_finite() || !grads.iter().all(Tensor::all_finite) {
                return Err(Error::Divergence {
                    epoch,
                    batch: batch_idx + 1,
                    detail: format!("loss {}", record.total),
                });
            }
            opt.step(&mut params.tensors_mut(), &grads)?;
            step += 1;
            on_step(&record);
            log.steps.push(record);
        }
        let done = &log.steps[first_step..];
        if !done.is_empty() {
            let k = done.len() as f64;
            let mean = |f: fn(&StepRecord) -> f64| done.iter().map(f).sum::<f64>() / k;
            log.epochs.push(EpochRecord {
                epoch,
                total: mean(|r| r.total),
                pixel: mean(|r| r.pixel),
                ssim: mean(|r| r.ssim),
                ag: mean(|r| r.ag),
            });
        }
    }
    Ok((params, log))
}
