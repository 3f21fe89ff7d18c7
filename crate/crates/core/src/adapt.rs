//! Source training and teacher/student target adaptation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sfda_tensor::{sgd_step, Real, SgdMomentumState, Tape, Tensor};

use crate::data::{sample_seed, Dataset};
use crate::error::{Result, SfdaError};
use crate::eval::{argmax, evaluate, MetricsRecord};
use crate::losses::{ce_smooth, im_loss, kd_loss, sl_loss, total_target_loss, LossConfig};
use crate::model::{ema_update, Mode, Model, GROUP_BACKBONE, GROUP_BOTTLENECK, GROUP_CLASSIFIER, GROUP_TRANSFORMER};
use crate::pseudo::{pseudo_labels, PseudoLabels};

/// Rows per chunk in inference passes. Results do not depend on it.
pub const INFERENCE_CHUNK: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub lr_backbone_transformer: f64,
    pub lr_bottleneck_classifier: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub source_epochs: usize,
    pub target_epochs: usize,
    pub ema_momentum: f64,
    pub tau: f64,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            lr_backbone_transformer: 1e-3,
            lr_bottleneck_classifier: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-3,
            batch_size: 32,
            source_epochs: 10,
            target_epochs: 15,
            ema_momentum: 0.99,
            tau: 0.1,
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SfdaError::Config(msg));
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return bad(format!("ema_momentum {} outside [0, 1]", self.ema_momentum));
        }
        if self.source_epochs == 0 || self.target_epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!(
                "batch_size {} is below 2 (batch norm needs two rows)",
                self.batch_size
            ));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.lr_backbone_transformer >= 0.0) || !(self.lr_bottleneck_classifier >= 0.0) {
            return bad("learning rates must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must lie in [0, 1) and weight_decay be non-negative".into());
        }
        self.loss.validate()
    }

    pub fn optimizer<T: Real>(&self) -> SgdMomentumState<T> {
        let mut lr = BTreeMap::new();
        lr.insert(GROUP_BACKBONE.to_string(), self.lr_backbone_transformer);
        lr.insert(GROUP_TRANSFORMER.to_string(), self.lr_backbone_transformer);
        lr.insert(GROUP_BOTTLENECK.to_string(), self.lr_bottleneck_classifier);
        lr.insert(GROUP_CLASSIFIER.to_string(), self.lr_bottleneck_classifier);
        SgdMomentumState::new(self.momentum, self.weight_decay, lr)
    }
}

/// Shuffled mini-batches; a trailing partial batch is dropped so every batch
/// has exactly `batch_size` rows.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, stream: &str, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, stream, epoch));
    order.shuffle(&mut rng);
    order.chunks_exact(batch_size).map(|c| c.to_vec()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceEpochLog {
    pub epoch: usize,
    pub loss: f64,
    /// Accuracy of train-mode predictions on the batches seen this epoch.
    pub train_accuracy: f64,
}

/// Minimizes label-smoothed cross-entropy on labeled source data.
pub fn train_source<T: Real>(
    mut model: Model<T>,
    data: &Dataset,
    cfg: &AdaptConfig,
) -> Result<(Model<T>, Vec<SourceEpochLog>)> {
    cfg.validate()?;
    let k = model.config().head.num_classes;
    if data.len() < cfg.batch_size {
        return Err(SfdaError::Contract(format!(
            "source set has {} samples, fewer than one batch of {}",
            data.len(),
            cfg.batch_size
        )));
    }
    if let Some(s) = data.samples.iter().find(|s| s.label >= k) {
        return Err(SfdaError::Contract(format!(
            "source label {} outside [0, {})",
            s.label, k
        )));
    }
    let mut seen = vec![false; k];
    data.samples.iter().for_each(|s| seen[s.label] = true);
    for (c, _) in seen.iter().enumerate().filter(|(_, &s)| !s) {
        log::warn!("class {c} has no source samples; its classifier row stays untrained");
    }
    for g in model.params.frozen_groups().map(str::to_string).collect::<Vec<_>>() {
        model.params.unfreeze(&g);
    }
    let mut opt = cfg.optimizer::<T>();
    let mut logs = Vec::with_capacity(cfg.source_epochs);
    for epoch in 0..cfg.source_epochs {
        let (mut loss_sum, mut correct, mut seen_rows) = (0.0, 0usize, 0usize);
        let batches = epoch_batches(data.len(), cfg.batch_size, cfg.seed, "source-batches", epoch);
        for idx in &batches {
            let labels: Vec<usize> = idx.iter().map(|&i| data.samples[i].label).collect();
            let mut tape = Tape::new();
            let b = model.bind(&mut tape);
            let x = tape.constant(data.batch_images(idx));
            let out = model.forward(&mut tape, &b, x, Mode::Train)?;
            let loss = ce_smooth(&mut tape, out.logits, &labels, cfg.loss.smoothing)?;
            loss_sum += tape.value(loss).item()?.as_f64();
            let logits = tape.value(out.logits).to_f64_vec();
            for (r, &y) in labels.iter().enumerate() {
                correct += usize::from(argmax(&logits[r * k..(r + 1) * k]) == y);
            }
            seen_rows += labels.len();
            let stats = out.bn_stats;
            let mut grads = tape.backward(loss)?;
            model.params.store_grads(&mut grads, &b)?;
            sgd_step(&mut model.params, &mut opt)?;
            model.update_running_stats(&stats)?;
        }
        let log = SourceEpochLog {
            epoch,
            loss: loss_sum / batches.len() as f64,
            train_accuracy: correct as f64 / seen_rows as f64,
        };
        log::info!(
            "source epoch {}: loss {:.4}, train accuracy {:.4}",
            epoch,
            log.loss,
            log.train_accuracy
        );
        logs.push(log);
    }
    Ok((model, logs))
}

/// Teacher outputs over a whole dataset in eval mode.
pub struct LabelingPass {
    /// `N×d` bottleneck features.
    pub features: Tensor<f64>,
    /// `N×K` softmax outputs.
    pub probs: Tensor<f64>,
}

pub fn labeling_pass<T: Real>(model: &Model<T>, data: &Dataset) -> Result<LabelingPass> {
    let n = data.len();
    let d = model.config().head.bottleneck_dim;
    let k = model.config().head.num_classes;
    let mut feats = Vec::with_capacity(n * d);
    let mut probs = Vec::with_capacity(n * k);
    let all: Vec<usize> = (0..n).collect();
    for idx in all.chunks(INFERENCE_CHUNK) {
        let out = model.extract_features(&data.batch_images::<T>(idx), Mode::Eval)?;
        feats.extend(out.features.data().iter().map(|v| v.as_f64()));
        for r in 0..idx.len() {
            let row: Vec<f64> = out.logits.row(r).iter().map(|v| v.as_f64()).collect();
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = e.iter().sum();
            probs.extend(e.iter().map(|v| v / z));
        }
    }
    Ok(LabelingPass {
        features: Tensor::new(vec![n, d], feats)?,
        probs: Tensor::new(vec![n, k], probs)?,
    })
}

pub struct TrainState<T> {
    pub student: Model<T>,
    pub teacher: Model<T>,
    pub optimizer: SgdMomentumState<T>,
    pub epoch: usize,
    pub metrics_log: Vec<MetricsRecord>,
}

/// Extra inputs to [`adapt_target`].
#[derive(Default)]
pub struct AdaptHooks<'a, T> {
    /// Labeled target data scored after every epoch.
    pub eval: Option<&'a Dataset>,
    /// Called after every optimizer step and EMA update with `(student, teacher)`.
    pub on_step: Option<&'a mut dyn FnMut(&Model<T>, &Model<T>)>,
    /// Called with each epoch's pseudo-labels.
    pub on_labels: Option<&'a mut dyn FnMut(usize, &PseudoLabels)>,
}

/// Self-training on unlabeled target data with a frozen classifier and an EMA teacher.
pub fn adapt_target<T: Real>(
    source: &Model<T>,
    target: &Dataset,
    cfg: &AdaptConfig,
    mut hooks: AdaptHooks<'_, T>,
) -> Result<TrainState<T>> {
    cfg.validate()?;
    if target.num_classes != source.config().head.num_classes {
        return Err(SfdaError::Manifest(format!(
            "source model predicts {} classes, target data expects {}",
            source.config().head.num_classes,
            target.num_classes
        )));
    }
    if target.image_side != source.config().backbone.image_side
        || target.channels != source.config().backbone.in_channels
    {
        return Err(SfdaError::Manifest(format!(
            "source model expects {}×{}×{} images, target data has {}×{}×{}",
            source.config().backbone.in_channels,
            source.config().backbone.image_side,
            source.config().backbone.image_side,
            target.channels,
            target.image_side,
            target.image_side
        )));
    }
    if target.len() < cfg.batch_size {
        return Err(SfdaError::Contract(format!(
            "target set has {} samples, fewer than one batch of {}",
            target.len(),
            cfg.batch_size
        )));
    }
    let mut student = source.clone();
    student.params.freeze(GROUP_CLASSIFIER);
    let mut teacher = student.clone();
    let classifier_before: Vec<Vec<T>> = classifier_tensors(&student);
    let mut opt = cfg.optimizer::<T>();
    let mut log = Vec::with_capacity(cfg.target_epochs);

    for epoch in 0..cfg.target_epochs {
        let pass = labeling_pass(&teacher, target)?;
        let (labels, _) = pseudo_labels(&pass.features, &pass.probs, cfg.tau)?;
        if let Some(f) = hooks.on_labels.as_mut() {
            f(epoch, &labels);
        }
        let pseudo_acc = labels
            .hard
            .iter()
            .zip(&target.samples)
            .filter(|(&h, s)| h == s.label)
            .count() as f64
            / target.len() as f64;
        let soft = labels.soft.cast::<T>();
        let k = soft.shape()[1];

        let (mut s_im, mut s_sl, mut s_kd, mut s_tgt) = (0.0, 0.0, 0.0, 0.0);
        let batches = epoch_batches(target.len(), cfg.batch_size, cfg.seed, "target-batches", epoch);
        for idx in &batches {
            let hard: Vec<usize> = idx.iter().map(|&i| labels.hard[i]).collect();
            let mut soft_rows = Vec::with_capacity(idx.len() * k);
            idx.iter().for_each(|&i| soft_rows.extend_from_slice(soft.row(i)));
            let soft_batch = Tensor::new(vec![idx.len(), k], soft_rows)?;

            let mut tape = Tape::new();
            let b = student.bind(&mut tape);
            let x = tape.constant(target.batch_images(idx));
            let out = student.forward(&mut tape, &b, x, Mode::Train)?;
            let im = im_loss(&mut tape, out.logits)?;
            let sl = sl_loss(&mut tape, out.logits, &hard)?;
            let kd = kd_loss(&mut tape, out.logits, &soft_batch)?;
            let total = total_target_loss(&mut tape, im, sl, kd, &cfg.loss)?;
            s_im += tape.value(im).item()?.as_f64();
            s_sl += tape.value(sl).item()?.as_f64();
            s_kd += tape.value(kd).item()?.as_f64();
            s_tgt += tape.value(total).item()?.as_f64();
            let stats = out.bn_stats;
            let mut grads = tape.backward(total)?;
            // errors if any gradient reached a frozen (classifier) tensor
            student.params.store_grads(&mut grads, &b)?;
            sgd_step(&mut student.params, &mut opt)?;
            student.update_running_stats(&stats)?;
            ema_update(&mut teacher, &student, cfg.ema_momentum)?;
            if let Some(f) = hooks.on_step.as_mut() {
                f(&student, &teacher);
            }
        }
        let nb = batches.len() as f64;
        let mut record = match hooks.eval {
            Some(ds) => evaluate(&student, ds)?.record,
            None => MetricsRecord::default(),
        };
        record.epoch = epoch;
        record.l_im = Some(s_im / nb);
        record.l_sl = Some(s_sl / nb);
        record.l_kd = Some(s_kd / nb);
        record.l_tgt = Some(s_tgt / nb);
        record.pseudo_label_accuracy = Some(pseudo_acc);
        log::info!(
            "target epoch {}: L_tgt {:.4}, pseudo-label accuracy {:.4}, accuracy {:.4}",
            epoch,
            s_tgt / nb,
            pseudo_acc,
            record.accuracy
        );
        log.push(record);
    }
    if classifier_tensors(&student) != classifier_before || classifier_tensors(&teacher) != classifier_before {
        return Err(SfdaError::Contract("classifier changed during adaptation".into()));
    }
    Ok(TrainState {
        student,
        teacher,
        optimizer: opt,
        epoch: cfg.target_epochs,
        metrics_log: log,
    })
}

fn classifier_tensors<T: Real>(m: &Model<T>) -> Vec<Vec<T>> {
    m.params
        .entries()
        .iter()
        .filter(|e| e.group == GROUP_CLASSIFIER)
        .map(|e| e.tensor.data().to_vec())
        .collect()
}
