//! Adam, step-decay scheduling, and the epoch training loop.
//!
//! Shuffling, augmentation and dropout all draw from purpose-keyed streams
//! derived from the run seed, so a `(seed, config, data)` triple fully
//! determines every logged value. The last incomplete batch is kept.

use std::time::Instant;

use crate::augment::{eval_transform, train_transform, AugmentConfig};
use crate::dataset::{to_grayscale, DatasetSplit, ImageRecord, Label};
use crate::error::{Error, Result};
use crate::models::{LossKind, Model};
use crate::rng::RngStream;
use crate::tensor::{Element, Mode, Tape, Tensor};

/// Adam moment estimates for an ordered parameter list.
#[derive(Debug)]
pub struct AdamState<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    /// Completed steps.
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![T::ZERO; p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::ZERO; p.numel()]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update over `params` from their accumulated gradients.
/// Gradients are cleared afterwards.
pub fn adam_step<T: Element>(
    params: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::State(format!(
            "optimizer state tracks {} parameters, got {}",
            state.m.len(),
            params.len()
        )));
    }
    let mut grads = Vec::with_capacity(params.len());
    for (i, p) in params.iter().enumerate() {
        let g = p.grad().ok_or_else(|| {
            Error::State(format!("parameter {i} has no gradient; run backward first"))
        })?;
        if g.len() != state.m[i].len() {
            return Err(Error::State(format!(
                "parameter {i} gradient length changed under the optimizer"
            )));
        }
        grads.push(g);
    }
    state.t += 1;
    let b1 = T::from_f64(state.beta1);
    let b2 = T::from_f64(state.beta2);
    let one_minus_b1 = T::from_f64(1.0 - state.beta1);
    let one_minus_b2 = T::from_f64(1.0 - state.beta2);
    let corr1 = T::from_f64(1.0 - state.beta1.powi(state.t as i32));
    let corr2 = T::from_f64(1.0 - state.beta2.powi(state.t as i32));
    let eps = T::from_f64(state.eps);
    let step = T::from_f64(lr);
    for ((p, g), (m, v)) in params
        .iter()
        .zip(&grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        p.update_data(|i, value| {
            let gi = g[i];
            m[i] = b1 * m[i] + one_minus_b1 * gi;
            v[i] = b2 * v[i] + one_minus_b2 * gi * gi;
            let m_hat = m[i] / corr1;
            let v_hat = v[i] / corr2;
            *value = *value - step * m_hat / (v_hat.sqrt() + eps);
        });
        p.zero_grad();
    }
    Ok(())
}

/// Multiplies the base rate by `gamma` every `step_size` epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLrSchedule {
    pub base_lr: f64,
    pub step_size: usize,
    pub gamma: f64,
}

impl StepLrSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 {
            return Err(Error::Argument("base_lr must be positive".into()));
        }
        if !(0.0 < self.gamma && self.gamma <= 1.0) {
            return Err(Error::Argument("gamma must be in (0, 1]".into()));
        }
        if self.step_size == 0 {
            return Err(Error::Argument("step_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// `base_lr * gamma^floor(epoch / step_size)`.
pub fn step_lr(schedule: &StepLrSchedule, epoch: usize) -> f64 {
    schedule.base_lr * schedule.gamma.powi((epoch / schedule.step_size) as i32)
}

/// Epochs, batching, learning rate and seed for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: Option<StepLrSchedule>,
    pub seed: u64,
    /// Test accuracy is measured every this many epochs (and at the end).
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Argument("train.epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Argument("train.batch_size must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Argument("train.lr must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Argument("train.eval_every must be >= 1".into()));
        }
        if let Some(s) = &self.schedule {
            s.validate()?;
        }
        Ok(())
    }

    /// Learning rate in effect at `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match &self.schedule {
            Some(s) => step_lr(s, epoch),
            None => self.lr,
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub seconds: f64,
}

/// Per-epoch records, one per epoch, in order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// `epoch,lr,train_loss,train_acc,test_acc,seconds` rows. All columns
    /// except `seconds` are pure functions of `(seed, config, data)`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,train_acc,test_acc,seconds\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{:.3}\n",
                r.epoch, r.lr, r.train_loss, r.train_acc, r.test_acc, r.seconds
            ));
        }
        out
    }
}

/// How a training run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStatus {
    Completed,
    /// A non-finite loss appeared; the log covers completed epochs only.
    Diverged,
}

/// Training output: the log plus the step counter for audit.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: TrainLog,
    pub status: TrainStatus,
    pub steps: u64,
}

/// Maps records onto model inputs. Train-time views may be stochastic but
/// must be pure in `(seed, epoch, index)`; eval views are deterministic.
pub trait SampleTransform<T: Element> {
    fn input_shape(&self) -> [usize; 3];
    fn train_input(&self, rec: &ImageRecord, seed: u64, epoch: u64, index: u64)
        -> Result<Vec<T>>;
    fn eval_input(&self, rec: &ImageRecord) -> Result<Vec<T>>;
}

/// Grayscale 32x32 pixels scaled to [0, 1]; the sigmoid-head CNN's diet.
/// Identical at train and eval time.
pub struct GrayscalePipeline;

impl GrayscalePipeline {
    fn view<T: Element>(rec: &ImageRecord) -> Result<Vec<T>> {
        let gray = to_grayscale(rec);
        let gray = if gray.height != 32 || gray.width != 32 {
            crate::dataset::resize_bilinear(&gray, 32, 32)?
        } else {
            gray
        };
        Ok(gray
            .pixels
            .iter()
            .map(|p| T::from_f64(f64::from(*p) / 255.0))
            .collect())
    }
}

impl<T: Element> SampleTransform<T> for GrayscalePipeline {
    fn input_shape(&self) -> [usize; 3] {
        [1, 32, 32]
    }

    fn train_input(&self, rec: &ImageRecord, _: u64, _: u64, _: u64) -> Result<Vec<T>> {
        Self::view(rec)
    }

    fn eval_input(&self, rec: &ImageRecord) -> Result<Vec<T>> {
        Self::view(rec)
    }
}

/// Random-resized-crop / flip / normalize at train time, resize / center
/// crop / normalize at eval time; the deep models' diet.
pub struct AugmentPipeline {
    pub cfg: AugmentConfig,
}

impl AugmentPipeline {
    pub fn new(cfg: AugmentConfig) -> Self {
        AugmentPipeline { cfg }
    }
}

impl<T: Element> SampleTransform<T> for AugmentPipeline {
    fn input_shape(&self) -> [usize; 3] {
        [3, self.cfg.crop_size, self.cfg.crop_size]
    }

    fn train_input(
        &self,
        rec: &ImageRecord,
        seed: u64,
        epoch: u64,
        index: u64,
    ) -> Result<Vec<T>> {
        train_transform(rec, &self.cfg, seed, epoch, index)
    }

    fn eval_input(&self, rec: &ImageRecord) -> Result<Vec<T>> {
        eval_transform(rec, &self.cfg)
    }
}

fn batch_tensor<T: Element>(views: &[Vec<T>], shape: [usize; 3]) -> Tensor<T> {
    let per = shape[0] * shape[1] * shape[2];
    let mut data = Vec::with_capacity(views.len() * per);
    for v in views {
        debug_assert_eq!(v.len(), per);
        data.extend_from_slice(v);
    }
    Tensor::new(&[views.len(), shape[0], shape[1], shape[2]], data)
        .expect("batch assembly shapes are consistent")
}

/// P(FAKE) for every record under the model's eval view, in input order.
pub fn score_records<T: Element>(
    model: &Model<T>,
    records: &[ImageRecord],
    transform: &dyn SampleTransform<T>,
    batch_size: usize,
) -> Result<Vec<f64>> {
    let shape = transform.input_shape();
    let mut scores = Vec::with_capacity(records.len());
    for chunk in records.chunks(batch_size.max(1)) {
        let views: Vec<Vec<T>> = chunk
            .iter()
            .map(|r| transform.eval_input(r))
            .collect::<Result<_>>()?;
        let x = batch_tensor(&views, shape);
        let tape = Tape::inference();
        let out = model.forward(&tape, &x)?;
        scores.extend(model.positive_scores(&out));
    }
    Ok(scores)
}

/// Fraction of records whose thresholded score matches the label.
pub fn accuracy_from_scores(scores: &[f64], labels: &[Label]) -> f64 {
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(s, l)| (**s >= 0.5) == (**l == Label::Fake))
        .count();
    hits as f64 / scores.len().max(1) as f64
}

/// Runs the epoch loop: seeded shuffle, fixed-size batches (last partial
/// batch kept), forward, loss, backward, Adam. Returns the per-epoch log;
/// the model ends in EVAL mode. A non-finite loss aborts with
/// [`TrainStatus::Diverged`] and the log of completed epochs.
pub fn train<T: Element>(
    model: &mut Model<T>,
    split: &DatasetSplit,
    transform: &dyn SampleTransform<T>,
    cfg: &TrainConfig,
    loss_kind: LossKind,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    let shape = transform.input_shape();
    let params: Vec<Tensor<T>> = model.parameters().into_iter().map(|(_, t)| t).collect();
    let mut state = AdamState::new(&params);
    let mut log = TrainLog::default();
    let n = split.train.len();

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr_at(epoch);
        model.set_mode(Mode::Train);

        let mut order: Vec<usize> = (0..n).collect();
        RngStream::derive(cfg.seed, "shuffle", epoch as u64, 0).shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut hits = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut views = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            for &idx in batch {
                let rec = &split.train[idx];
                views.push(transform.train_input(rec, cfg.seed, epoch as u64, idx as u64)?);
                labels.push(rec.label);
            }
            let x = batch_tensor(&views, shape);
            let tape = Tape::new();
            let out = model.forward(&tape, &x)?;
            let loss = match loss_kind {
                LossKind::BinaryCrossEntropy => {
                    let targets: Vec<T> =
                        labels.iter().map(|l| T::from_f64(l.target())).collect();
                    tape.binary_cross_entropy(&out, &targets)?
                }
                LossKind::SoftmaxCrossEntropy => {
                    let classes: Vec<usize> = labels.iter().map(|l| l.class_index()).collect();
                    tape.softmax_cross_entropy(&out, &classes)?
                }
            };
            let loss_value = loss.item().to_f64();
            if !loss_value.is_finite() {
                model.set_mode(Mode::Eval);
                return Ok(TrainOutcome {
                    log,
                    status: TrainStatus::Diverged,
                    steps: state.t,
                });
            }
            for p in &params {
                p.zero_grad();
            }
            tape.backward(&loss)?;
            adam_step(&params, &mut state, lr)?;

            loss_sum += loss_value * batch.len() as f64;
            let scores = model.positive_scores(&out);
            hits += scores
                .iter()
                .zip(&labels)
                .filter(|(s, l)| (**s >= 0.5) == (**l == Label::Fake))
                .count();
        }

        let evaluate_now =
            (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs;
        let test_acc = if evaluate_now && !split.test.is_empty() {
            model.set_mode(Mode::Eval);
            let scores = score_records(model, &split.test, transform, cfg.batch_size)?;
            let labels: Vec<Label> = split.test.iter().map(|r| r.label).collect();
            accuracy_from_scores(&scores, &labels)
        } else {
            log.records.last().map(|r| r.test_acc).unwrap_or(f64::NAN)
        };

        log.records.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / n as f64,
            train_acc: hits as f64 / n as f64,
            test_acc,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    model.set_mode(Mode::Eval);
    Ok(TrainOutcome {
        log,
        status: TrainStatus::Completed,
        steps: state.t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthetic_split;
    use crate::models::{ModelKind, ModelSpec};

    #[test]
    fn adam_zero_gradient_leaves_params_and_increments_t() {
        let p = Tensor::<f64>::new(&[2], vec![1.5, -2.5]).unwrap();
        p.set_requires_grad(true);
        p.accumulate_grad(&[0.0, 0.0]);
        let params = vec![p.clone()];
        let mut state = AdamState::new(&params);
        adam_step(&params, &mut state, 0.1).unwrap();
        assert_eq!(p.to_vec(), vec![1.5, -2.5]);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_first_step_is_sign_normalized() {
        let p = Tensor::<f64>::new(&[1], vec![0.0]).unwrap();
        p.set_requires_grad(true);
        p.accumulate_grad(&[2.0]);
        let params = vec![p.clone()];
        let mut state = AdamState::new(&params);
        adam_step(&params, &mut state, 0.1).unwrap();
        let got = p.to_vec()[0];
        assert!((got + 0.1).abs() < 1e-7, "update {got}");
    }

    #[test]
    fn adam_descends_a_parabola() {
        let w = Tensor::<f64>::new(&[1], vec![1.0]).unwrap();
        w.set_requires_grad(true);
        let params = vec![w.clone()];
        let mut state = AdamState::new(&params);
        for _ in 0..200 {
            let grad = 2.0 * w.to_vec()[0];
            w.zero_grad();
            w.accumulate_grad(&[grad]);
            adam_step(&params, &mut state, 0.1).unwrap();
        }
        assert!(w.to_vec()[0].abs() < 0.05, "w = {}", w.to_vec()[0]);
    }

    #[test]
    fn adam_missing_grad_is_state_error() {
        let p = Tensor::<f64>::new(&[1], vec![0.0]).unwrap();
        let params = vec![p];
        let mut state = AdamState::new(&params);
        assert!(matches!(
            adam_step(&params, &mut state, 0.1),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn step_lr_matches_hand_values() {
        let s = StepLrSchedule {
            base_lr: 0.001,
            step_size: 10,
            gamma: 0.1,
        };
        for e in 0..10 {
            assert_eq!(step_lr(&s, e), 0.001);
        }
        assert_eq!(step_lr(&s, 10), 0.001 * 0.1);
        assert_eq!(step_lr(&s, 19), 0.001 * 0.1);
        assert_eq!(step_lr(&s, 20), 0.001 * 0.1f64.powi(2));
        let flat = StepLrSchedule {
            base_lr: 0.02,
            step_size: 3,
            gamma: 1.0,
        };
        for e in 0..50 {
            assert_eq!(step_lr(&flat, e), 0.02);
        }
    }

    #[test]
    fn logistic_head_fits_separable_toy_set() {
        // Affine + sigmoid on raw 2-d features, full-batch Adam: the
        // optimizer/loss plumbing must drive it to 100% within 50 epochs.
        let mut rng = RngStream::derive(77, "toy", 0, 0);
        let n = 200;
        let mut xs = Vec::with_capacity(n * 2);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = if i % 2 == 0 { Label::Fake } else { Label::Real };
            xs.push(rng.normal(2.0 * label.sign(), 0.5));
            xs.push(rng.normal(-1.0 * label.sign(), 0.5));
            labels.push(label);
        }
        let x = Tensor::<f64>::new(&[n, 2], xs).unwrap();
        let w = Tensor::<f64>::zeros(&[2, 1]);
        w.set_requires_grad(true);
        let b = Tensor::<f64>::zeros(&[1]);
        b.set_requires_grad(true);
        let params = vec![w.clone(), b.clone()];
        let mut state = AdamState::new(&params);
        let targets: Vec<f64> = labels.iter().map(|l| l.target()).collect();

        let mut losses = Vec::new();
        let mut final_acc = 0.0;
        for _ in 0..50 {
            let tape = Tape::new();
            let logits = tape.affine(&x, &w, &b).unwrap();
            let probs = tape.sigmoid(&logits);
            let loss = tape.binary_cross_entropy(&probs, &targets).unwrap();
            losses.push(loss.item());
            for p in &params {
                p.zero_grad();
            }
            tape.backward(&loss).unwrap();
            adam_step(&params, &mut state, 0.05).unwrap();

            let probs = probs.to_vec();
            final_acc = probs
                .iter()
                .zip(&labels)
                .filter(|(p, l)| (**p >= 0.5) == (**l == Label::Fake))
                .count() as f64
                / n as f64;
            if final_acc == 1.0 {
                break;
            }
        }
        assert_eq!(final_acc, 1.0, "losses: {losses:?}");

        // Smoothed loss is non-increasing.
        let smooth: Vec<f64> = losses
            .windows(5)
            .map(|w| w.iter().sum::<f64>() / w.len() as f64)
            .collect();
        for pair in smooth.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9, "smoothed loss rose: {smooth:?}");
        }
    }

    #[test]
    fn single_small_batch_takes_exactly_one_step() {
        let split = synthetic_split(5, 2, 3);
        let mut model: Model<f32> =
            Model::build(&ModelSpec::for_kind(ModelKind::CustomCnn), 1).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 64,
            lr: 0.01,
            schedule: None,
            seed: 3,
            eval_every: 1,
        };
        let outcome = train(
            &mut model,
            &split,
            &GrayscalePipeline,
            &cfg,
            LossKind::BinaryCrossEntropy,
        )
        .unwrap();
        assert_eq!(outcome.steps, 1);
        assert_eq!(outcome.log.records.len(), 1);
        assert_eq!(outcome.status, TrainStatus::Completed);
    }

    #[test]
    fn training_twice_is_bitwise_identical() {
        let split = synthetic_split(12, 6, 5);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            lr: 0.01,
            schedule: None,
            seed: 11,
            eval_every: 1,
        };
        let run = || {
            let mut model: Model<f32> =
                Model::build(&ModelSpec::for_kind(ModelKind::CustomCnn), 7).unwrap();
            train(
                &mut model,
                &split,
                &GrayscalePipeline,
                &cfg,
                LossKind::BinaryCrossEntropy,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        let strip = |log: &TrainLog| {
            log.records
                .iter()
                .map(|r| (r.epoch, r.lr, r.train_loss, r.train_acc, r.test_acc))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a.log), strip(&b.log));
    }

    #[test]
    fn empty_training_set_is_an_argument_error() {
        let split = DatasetSplit::default();
        let mut model: Model<f32> =
            Model::build(&ModelSpec::for_kind(ModelKind::CustomCnn), 1).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            lr: 0.01,
            schedule: None,
            seed: 0,
            eval_every: 1,
        };
        assert!(matches!(
            train(
                &mut model,
                &split,
                &GrayscalePipeline,
                &cfg,
                LossKind::BinaryCrossEntropy
            ),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn logged_lr_follows_schedule_exactly() {
        let split = synthetic_split(4, 2, 9);
        let mut model: Model<f32> =
            Model::build(&ModelSpec::for_kind(ModelKind::TinyResNet), 2).unwrap();
        let schedule = StepLrSchedule {
            base_lr: 0.001,
            step_size: 10,
            gamma: 0.1,
        };
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 16,
            lr: 0.001,
            schedule: Some(schedule),
            seed: 4,
            eval_every: 20,
        };
        let outcome = train(
            &mut model,
            &split,
            &AugmentPipeline::new(AugmentConfig::default()),
            &cfg,
            LossKind::SoftmaxCrossEntropy,
        )
        .unwrap();
        assert_eq!(outcome.log.records.len(), 20);
        for (e, rec) in outcome.log.records.iter().enumerate() {
            assert_eq!(rec.lr, step_lr(&schedule, e), "epoch {e}");
            assert_eq!(rec.lr, 0.001 * 0.1f64.powi((e / 10) as i32));
        }
    }

    #[test]
    fn csv_roundtrips_field_order() {
        let log = TrainLog {
            records: vec![EpochRecord {
                epoch: 0,
                lr: 0.01,
                train_loss: 0.5,
                train_acc: 0.75,
                test_acc: 0.7,
                seconds: 1.25,
            }],
        };
        let csv = log.to_csv();
        assert!(csv.starts_with("epoch,lr,train_loss,train_acc,test_acc,seconds\n"));
        assert!(csv.contains("0,0.01,0.5,0.75,0.7,1.250"));
    }
}
