use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{adamw_step, clip_grad_norm, cosine_lr, AdamW, OptimizerState};
use crate::data::{Augmentation, Dataset};
use crate::model::{
    classify_on_tape, init_model, mask_positions, prepare, pretrain_on_tape, ModelConfig, Stage,
    DECODER, ENCODER, INDICATOR, POS_EMBED, TOKENIZER,
};
use crate::numerics::{Binder, ParamStore};
use crate::{Error, GradTape, Result};

/// Optimisation settings shared by pretraining and fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub augmentation: Augmentation,
    pub seed: u64,
    /// Train only the head (linear probe).
    pub freeze_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::pretrain_full()
    }
}

impl TrainConfig {
    pub fn pretrain_full() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 128,
            lr: 1e-3,
            min_lr: 1e-6,
            warmup_epochs: 10,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 10.0,
            augmentation: Augmentation::ScaleTranslate,
            seed: 0,
            freeze_encoder: false,
        }
    }

    pub fn classify_full() -> Self {
        TrainConfig {
            batch_size: 32,
            lr: 5e-4,
            augmentation: Augmentation::Rotate,
            ..TrainConfig::pretrain_full()
        }
    }

    pub fn pretrain_desk() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            warmup_epochs: 2,
            ..TrainConfig::pretrain_full()
        }
    }

    pub fn classify_desk() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            warmup_epochs: 2,
            ..TrainConfig::classify_full()
        }
    }

    pub fn adamw(&self) -> AdamW {
        AdamW {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> core::result::Result<(), Vec<String>> {
        let mut errs = Vec::new();
        let mut need = |ok: bool, msg: &str| {
            if !ok {
                errs.push(msg.to_string());
            }
        };
        need(self.epochs >= 1, "epochs must be positive");
        need(self.batch_size >= 1, "batch_size must be positive");
        need(self.lr > 0.0, "lr must be positive");
        need(
            self.min_lr >= 0.0 && self.min_lr <= self.lr,
            "min_lr must lie in [0, lr]",
        );
        need(
            self.warmup_epochs < self.epochs,
            "warmup_epochs must be less than epochs",
        );
        need(
            self.weight_decay >= 0.0,
            "weight_decay must be non-negative",
        );
        need(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            "betas must lie in [0, 1)",
        );
        need(self.eps > 0.0, "eps must be positive");
        need(self.grad_clip >= 0.0, "grad_clip must be non-negative");
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }

    fn check(&self) -> Result<()> {
        self.validate()
            .map_err(|e| Error::invalid("train config", e.join("; ")))
    }
}

/// One `epoch,split,metric,value` record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

impl MetricRow {
    pub fn new(epoch: usize, split: &str, metric: &str, value: f64) -> Self {
        MetricRow {
            epoch,
            split: split.to_string(),
            metric: metric.to_string(),
            value,
        }
    }
}

/// Per-epoch progress callback.
pub type EpochHook<'a> = &'a mut dyn FnMut(&[MetricRow]);

fn rngs(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let init = ChaCha8Rng::seed_from_u64(seed);
    let mut train = ChaCha8Rng::seed_from_u64(seed);
    train.set_stream(1);
    (init, train)
}

fn accumulate(total: &mut BTreeMap<String, Vec<f64>>, grads: BTreeMap<String, Vec<f64>>, w: f64) {
    for (name, g) in grads {
        match total.get_mut(&name) {
            Some(t) => t.iter_mut().zip(&g).for_each(|(a, b)| *a += w * b),
            None => {
                total.insert(name, g.into_iter().map(|v| v * w).collect());
            }
        }
    }
}

struct Schedule<'a> {
    cfg: &'a TrainConfig,
    steps_per_epoch: usize,
    step: usize,
}

impl Schedule<'_> {
    fn next_lr(&mut self) -> f64 {
        let total = self.cfg.epochs * self.steps_per_epoch;
        let warm = self.cfg.warmup_epochs * self.steps_per_epoch;
        // step counts from 1 so the first update has a non-zero rate
        self.step += 1;
        cosine_lr(self.step, total, warm, self.cfg.lr, self.cfg.min_lr)
    }
}

/// Parameters and optimiser state after a run, with per-epoch metrics.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub optimizer: OptimizerState,
    pub history: Vec<MetricRow>,
}

impl TrainOutcome {
    /// Values of one `(split, metric)` series in epoch order.
    pub fn series(&self, split: &str, metric: &str) -> Vec<f64> {
        series(&self.history, split, metric)
    }
}

pub fn series(rows: &[MetricRow], split: &str, metric: &str) -> Vec<f64> {
    rows.iter()
        .filter(|r| r.split == split && r.metric == metric)
        .map(|r| r.value)
        .collect()
}

/// Masked-reconstruction pretraining. Each sample of each step is
/// augmented, re-sampled, serialized along one curve drawn uniformly from
/// the configured bank and masked with a fresh seed.
pub fn pretrain(
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    data: &Dataset,
    hook: Option<EpochHook<'_>>,
) -> Result<TrainOutcome> {
    cfg.check()?;
    tcfg.check()?;
    if data.is_empty() {
        return Err(Error::Empty("pretraining dataset"));
    }
    let (mut init_rng, mut rng) = rngs(tcfg.seed);
    let mut params = init_model(cfg, Stage::Pretrain, &mut init_rng)?;
    let mut opt = OptimizerState::new(tcfg.adamw());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let steps_per_epoch = data.len().div_ceil(tcfg.batch_size);
    let mut sched = Schedule {
        cfg: tcfg,
        steps_per_epoch,
        step: 0,
    };
    let mut history = Vec::new();
    let mut hook = hook;
    for epoch in 1..=tcfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(tcfg.batch_size) {
            let mut grads = BTreeMap::new();
            let w = 1.0 / batch.len() as f64;
            for &i in batch {
                let cloud = tcfg.augmentation.apply(&data.samples[i].cloud, &mut rng)?;
                let prep = prepare(&cloud, cfg, Some(&mut rng as &mut dyn RngCore))?;
                let slot = rng.random_range(0..cfg.curves.len());
                let split = mask_positions(cfg.num_patches, cfg.mask_ratio, rng.next_u64())?;
                let mut tape = GradTape::new();
                let mut bind = Binder::new(&params);
                let fwd = pretrain_on_tape(&mut tape, &mut bind, cfg, &prep, slot, &split)?;
                let loss = tape.value(fwd.loss).data()[0];
                if !loss.is_finite() {
                    return Err(Error::NonFinite {
                        op: "pretrain loss",
                    });
                }
                loss_sum += loss;
                let g = tape.backward(fwd.loss)?;
                accumulate(&mut grads, bind.gradients(&g), w);
            }
            clip_grad_norm(&mut grads, tcfg.grad_clip);
            lr = sched.next_lr();
            adamw_step(&mut params, &grads, &mut opt, lr)?;
        }
        let rows = [
            MetricRow::new(epoch, "train", "chamfer", loss_sum / data.len() as f64),
            MetricRow::new(epoch, "train", "lr", lr),
        ];
        if let Some(h) = hook.as_deref_mut() {
            h(&rows);
        }
        history.extend(rows);
    }
    Ok(TrainOutcome {
        params,
        optimizer: opt,
        history,
    })
}

/// Names copied, dropped and left fresh by [`transfer_weights`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TransferReport {
    pub copied: Vec<String>,
    /// Source tensors with no counterpart in the target (e.g. the decoder).
    pub dropped: Vec<String>,
    /// Target tensors the source did not provide (e.g. the head).
    pub fresh: Vec<String>,
}

/// Copies every same-named tensor of `src` into `dst`. Shape mismatches are
/// errors; with `strict`, so are source tensors outside the encoder-side
/// groups and the decoder.
pub fn transfer_weights(
    src: &ParamStore,
    dst: &mut ParamStore,
    strict: bool,
) -> Result<TransferReport> {
    let mut rep = TransferReport::default();
    for (name, t) in src.iter() {
        match dst.get_mut(name) {
            Ok(d) => {
                if d.shape() != t.shape() {
                    return Err(Error::shape(
                        "transfer_weights",
                        format!(
                            "`{name}`: checkpoint {:?}, model {:?}",
                            t.shape(),
                            d.shape()
                        ),
                    ));
                }
                *d = t.clone();
                rep.copied.push(name.to_string());
            }
            Err(_) => {
                if strict && !name.starts_with(DECODER) {
                    return Err(Error::UnknownParam(name.to_string()));
                }
                rep.dropped.push(name.to_string());
            }
        }
    }
    rep.fresh = dst
        .names()
        .filter(|n| !src.contains(n))
        .map(|n| n.to_string())
        .collect();
    Ok(rep)
}

/// Result of [`evaluate`].
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub overall: f64,
    pub per_class: Vec<f64>,
    pub predictions: Vec<usize>,
}

/// Index of the largest logit; the first one on ties.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Overall and per-class accuracy of argmax predictions. Classes with no
/// samples report NaN.
pub fn accuracy(logits: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<Evaluation> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::invalid(
            "accuracy",
            format!("{} predictions for {} labels", logits.len(), labels.len()),
        ));
    }
    let predictions: Vec<usize> = logits.iter().map(|l| argmax(l)).collect();
    let mut hit = alloc::vec![0usize; num_classes];
    let mut tot = alloc::vec![0usize; num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if y >= num_classes {
            return Err(Error::invalid(
                "accuracy",
                format!("label {y} with {num_classes} classes"),
            ));
        }
        tot[y] += 1;
        hit[y] += usize::from(p == y);
    }
    let correct: usize = hit.iter().sum();
    Ok(Evaluation {
        overall: correct as f64 / labels.len() as f64,
        per_class: hit
            .iter()
            .zip(&tot)
            .map(|(&h, &t)| {
                if t == 0 {
                    f64::NAN
                } else {
                    h as f64 / t as f64
                }
            })
            .collect(),
        predictions,
    })
}

/// Argmax accuracy without augmentation, dropout or voting.
pub fn evaluate(cfg: &ModelConfig, params: &ParamStore, data: &Dataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    let mut logits = Vec::with_capacity(data.len());
    for s in &data.samples {
        let prep = prepare(&s.cloud, cfg, None)?;
        let mut tape = GradTape::new();
        let mut bind = Binder::new(params);
        let l = classify_on_tape(&mut tape, &mut bind, cfg, &prep, None)?;
        logits.push(tape.value(l).data().to_vec());
    }
    let labels: Vec<usize> = data.samples.iter().map(|s| s.label).collect();
    accuracy(&logits, &labels, cfg.num_classes)
}

/// Outcome of [`finetune`].
#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub run: TrainOutcome,
    pub transfer: Option<TransferReport>,
}

/// Cross-entropy classification training, optionally starting from
/// pretrained weights, with test accuracy recorded after every epoch.
pub fn finetune(
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    pretrained: Option<&ParamStore>,
    train: &Dataset,
    test: &Dataset,
    hook: Option<EpochHook<'_>>,
) -> Result<FinetuneOutcome> {
    cfg.check()?;
    tcfg.check()?;
    if train.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    if train.num_classes() != cfg.num_classes {
        return Err(Error::invalid(
            "finetune",
            format!(
                "dataset has {} classes, model {}",
                train.num_classes(),
                cfg.num_classes
            ),
        ));
    }
    let (mut init_rng, mut rng) = rngs(tcfg.seed);
    let mut params = init_model(cfg, Stage::Classify, &mut init_rng)?;
    let transfer = match pretrained {
        Some(src) => Some(transfer_weights(src, &mut params, false)?),
        None => None,
    };
    let frozen: &[&str] = if tcfg.freeze_encoder {
        &[TOKENIZER, POS_EMBED, INDICATOR, ENCODER]
    } else {
        &[]
    };
    let mut opt = OptimizerState::new(tcfg.adamw());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut sched = Schedule {
        cfg: tcfg,
        steps_per_epoch: train.len().div_ceil(tcfg.batch_size),
        step: 0,
    };
    let mut history = Vec::new();
    let mut hook = hook;
    for epoch in 1..=tcfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(tcfg.batch_size) {
            let mut grads = BTreeMap::new();
            let w = 1.0 / batch.len() as f64;
            for &i in batch {
                let s = &train.samples[i];
                let cloud = tcfg.augmentation.apply(&s.cloud, &mut rng)?;
                let prep = prepare(&cloud, cfg, Some(&mut rng as &mut dyn RngCore))?;
                let mut tape = GradTape::new();
                let mut bind = Binder::new(&params).freeze(frozen);
                let logits = classify_on_tape(
                    &mut tape,
                    &mut bind,
                    cfg,
                    &prep,
                    Some(&mut rng as &mut dyn RngCore),
                )?;
                correct += usize::from(argmax(tape.value(logits).data()) == s.label);
                let loss = tape.cross_entropy(logits, &[s.label])?;
                let lv = tape.value(loss).data()[0];
                if !lv.is_finite() {
                    return Err(Error::NonFinite {
                        op: "classification loss",
                    });
                }
                loss_sum += lv;
                let g = tape.backward(loss)?;
                accumulate(&mut grads, bind.gradients(&g), w);
            }
            clip_grad_norm(&mut grads, tcfg.grad_clip);
            let lr = sched.next_lr();
            adamw_step(&mut params, &grads, &mut opt, lr)?;
        }
        let mut rows = alloc::vec![
            MetricRow::new(epoch, "train", "loss", loss_sum / train.len() as f64),
            MetricRow::new(
                epoch,
                "train",
                "accuracy",
                correct as f64 / train.len() as f64
            ),
        ];
        if !test.is_empty() {
            rows.push(MetricRow::new(
                epoch,
                "test",
                "accuracy",
                evaluate(cfg, &params, test)?.overall,
            ));
        }
        if let Some(h) = hook.as_deref_mut() {
            h(&rows);
        }
        history.extend(rows);
    }
    Ok(FinetuneOutcome {
        run: TrainOutcome {
            params,
            optimizer: opt,
            history,
        },
        transfer,
    })
}
