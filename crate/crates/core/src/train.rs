//! Optimizer, epoch loop, evaluation and multi-trial statistics.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::TsvitConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{cross_entropy_loss, init_model, model_backward, model_forward, TsvitModel, TsvitParams};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub trials: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Fixed gradient reduction order. The loop is sequential, so runs are
    /// reproducible either way; the flag is kept for config compatibility.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 200,
            seed: 0,
            trials: 10,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.trials == 0 {
            return Err(Error::Config("batch_size, epochs and trials must be >= 1".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.adam_eps <= 0.0 {
            return Err(Error::Config("adam_eps must be > 0".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// One Adam update of a single array with bias-corrected moments; `step`
/// counts from 1.
pub fn adam_update<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    m: &mut Tensor<T>,
    v: &mut Tensor<T>,
    step: u64,
    cfg: &TrainConfig,
) -> Result<()> {
    if step == 0 {
        return Err(Error::Contract("adam steps count from 1".into()));
    }
    for other in [grad.shape(), m.shape(), v.shape()] {
        if other != param.shape() {
            return Err(Error::Contract(format!(
                "adam state shape {other:?} does not match parameter {:?}",
                param.shape()
            )));
        }
    }
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one, lr, eps) = (T::one(), T::of(cfg.learning_rate), T::of(cfg.adam_eps));
    let c1 = one - T::of(cfg.beta1.powi(step as i32));
    let c2 = one - T::of(cfg.beta2.powi(step as i32));
    for (((p, &g), mi), vi) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(m.data_mut())
        .zip(v.data_mut())
    {
        *mi = b1 * *mi + (one - b1) * g;
        *vi = b2 * *vi + (one - b2) * g * g;
        let m_hat = *mi / c1;
        let v_hat = *vi / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// First and second moments for every model array.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    m: TsvitParams<T>,
    v: TsvitParams<T>,
    step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: &TsvitConfig) -> Result<Self> {
        Ok(Self {
            m: TsvitParams::zeros(config)?,
            v: TsvitParams::zeros(config)?,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies the model's accumulated gradients.
    pub fn step(&mut self, model: &mut TsvitModel<T>, cfg: &TrainConfig) -> Result<()> {
        if self.m.element_count() != model.param_count() {
            return Err(Error::Contract("optimizer state belongs to a different model".into()));
        }
        self.step += 1;
        let (params, grads) = model.params_and_grads_mut();
        let moments = self.m.tensors_mut().into_iter().zip(self.v.tensors_mut());
        for ((p, g), (m, v)) in params.tensors_mut().into_iter().zip(grads.tensors()).zip(moments) {
            adam_update(p, g, m, v, self.step, cfg)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Epochs and evaluation
// ---------------------------------------------------------------------------

/// Stacks the selected signals into `[batch, L, C]`.
pub fn batch_tensor<T: Scalar>(data: &Dataset, indices: &[usize]) -> Tensor<T> {
    let (l, c) = (data.signal_len(), data.channels());
    let mut values = Vec::with_capacity(indices.len() * l * c);
    for &i in indices {
        values.extend(data.samples()[i].signal.data().iter().map(|&v| T::of(v as f64)));
    }
    Tensor::new(&[indices.len(), l, c], values).expect("batch of whole samples")
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
}

/// One shuffled pass over `data`: forward, backward and an optimizer step
/// per batch, the final partial batch included. Loss and accuracy are
/// sample-weighted means of the training-mode predictions.
pub fn train_epoch<T: Scalar>(
    model: &mut TsvitModel<T>,
    adam: &mut Adam<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<EpochStats> {
    let mc = model.config();
    mc.ensure_data_matches(data.signal_len(), data.channels(), data.num_classes())?;
    if data.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    rng.shuffle(&mut order);
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for chunk in order.chunks(cfg.batch_size) {
        let x = batch_tensor::<T>(data, chunk);
        let labels: Vec<usize> = chunk.iter().map(|&i| data.samples()[i].label).collect();
        let (logits, cache) = model_forward(model, &x, rng, true)?;
        let (loss, d_logits) = cross_entropy_loss(&logits, &labels)?;
        loss_sum += loss * chunk.len() as f64;
        correct += labels
            .iter()
            .enumerate()
            .filter(|(r, &y)| argmax(logits.row(*r)) == y)
            .count();
        model.zero_grads();
        model_backward(model, &cache, &d_logits)?;
        adam.step(model, cfg)?;
    }
    Ok(EpochStats {
        loss: loss_sum / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
    })
}

/// Square count table indexed `[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.classes + predicted] += 1;
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.chunks(self.classes).map(|r| r.iter().sum()).collect()
    }

    /// Trace over total; 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let trace: u64 = (0..self.classes).map(|i| self.get(i, i)).sum();
        trace as f64 / total as f64
    }

    /// Header row of class names, then one row of integer counts per true class.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut s = class_names.join(",");
        s.push('\n');
        for row in self.counts.chunks(self.classes) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

/// Inference-mode loss, accuracy and confusion matrix (dropout off).
pub fn evaluate<T: Scalar>(model: &TsvitModel<T>, data: &Dataset, batch_size: usize) -> Result<Evaluation> {
    let mc = model.config();
    mc.ensure_data_matches(data.signal_len(), data.channels(), data.num_classes())?;
    let mut confusion = ConfusionMatrix::new(data.num_classes());
    let mut loss_sum = 0.0;
    let mut rng = Rng::new(0);
    let order: Vec<usize> = (0..data.len()).collect();
    for chunk in order.chunks(batch_size.max(1)) {
        let x = batch_tensor::<T>(data, chunk);
        let labels: Vec<usize> = chunk.iter().map(|&i| data.samples()[i].label).collect();
        let (logits, _) = model_forward(model, &x, &mut rng, false)?;
        loss_sum += cross_entropy_loss(&logits, &labels)?.0 * chunk.len() as f64;
        for (r, &y) in labels.iter().enumerate() {
            confusion.record(y, argmax(logits.row(r)));
        }
    }
    let n = data.len().max(1) as f64;
    Ok(Evaluation {
        loss: loss_sum / n,
        accuracy: confusion.accuracy(),
        confusion,
    })
}

// ---------------------------------------------------------------------------
// Trials
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub trial: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialReport {
    pub trial: usize,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    /// Highest test accuracy over all epochs (first epoch reaching it wins).
    pub best_test_accuracy: f64,
    pub best_epoch: usize,
    /// Confusion matrix of the best model on the test set.
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepReport {
    pub max_acc: f64,
    pub min_acc: f64,
    pub avg_acc: f64,
}

impl SweepReport {
    /// Order-independent: the mean is taken over the sorted values.
    pub fn from_accuracies(accs: &[f64]) -> Result<Self> {
        if accs.is_empty() {
            return Err(Error::Data("no trial accuracies to summarize".into()));
        }
        let mut sorted = accs.to_vec();
        sorted.sort_by(f64::total_cmp);
        let max_acc = sorted[sorted.len() - 1];
        let min_acc = sorted[0];
        let avg_acc = (sorted.iter().sum::<f64>() / sorted.len() as f64).clamp(min_acc, max_acc);
        Ok(Self {
            max_acc,
            min_acc,
            avg_acc,
        })
    }

    /// `MaxAcc MinAcc AvgAcc` as fractions with six decimals.
    pub fn summary_line(&self) -> String {
        format!("{:.6} {:.6} {:.6}", self.max_acc, self.min_acc, self.avg_acc)
    }
}

#[derive(Debug, Clone)]
pub struct TrialOutcome<T> {
    pub report: TrialReport,
    pub best_model: TsvitModel<T>,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome<T> {
    pub sweep: SweepReport,
    pub trials: Vec<TrialOutcome<T>>,
}

/// Trains `train_cfg.trials` independently initialized models (trial `i`
/// seeded with `seed + i`) and keeps each trial's best-test-accuracy model.
/// `on_epoch` sees every epoch record as it is produced.
pub fn run_trials<T: Scalar>(
    train: &Dataset,
    test: &Dataset,
    model_cfg: &TsvitConfig,
    train_cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<SweepOutcome<T>> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    for d in [train, test] {
        model_cfg.ensure_data_matches(d.signal_len(), d.channels(), d.num_classes())?;
    }
    let mut trials = Vec::with_capacity(train_cfg.trials);
    for trial in 0..train_cfg.trials {
        let seed = train_cfg.seed.wrapping_add(trial as u64);
        let mut rng = Rng::new(seed);
        let mut model = init_model::<T>(model_cfg, &mut rng)?;
        let mut adam = Adam::new(model_cfg)?;
        let mut epochs = Vec::with_capacity(train_cfg.epochs);
        let mut best: Option<(f64, usize, ConfusionMatrix, TsvitModel<T>)> = None;
        for epoch in 1..=train_cfg.epochs {
            let stats = train_epoch(&mut model, &mut adam, train, train_cfg, &mut rng)?;
            let eval = evaluate(&model, test, train_cfg.batch_size)?;
            let record = EpochRecord {
                trial,
                epoch,
                train_loss: stats.loss,
                train_acc: stats.accuracy,
                test_loss: eval.loss,
                test_acc: eval.accuracy,
            };
            on_epoch(&record);
            epochs.push(record);
            if best.as_ref().is_none_or(|b| eval.accuracy > b.0) {
                best = Some((eval.accuracy, epoch, eval.confusion, model.clone()));
            }
        }
        let (best_test_accuracy, best_epoch, confusion, best_model) = best.expect("epochs >= 1");
        trials.push(TrialOutcome {
            report: TrialReport {
                trial,
                seed,
                epochs,
                best_test_accuracy,
                best_epoch,
                confusion,
            },
            best_model,
        });
    }
    let accs: Vec<f64> = trials.iter().map(|t| t.report.best_test_accuracy).collect();
    Ok(SweepOutcome {
        sweep: SweepReport::from_accuracies(&accs)?,
        trials,
    })
}

pub const METRICS_HEADER: &str = "trial,epoch,train_loss,train_acc,test_loss,test_acc";

/// Metrics CSV text: header plus one row per epoch.
pub fn metrics_csv<'a>(records: impl IntoIterator<Item = &'a EpochRecord>) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in records {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            r.trial, r.epoch, r.train_loss, r.train_acc, r.test_loss, r.test_acc
        )
        .expect("writing to a String cannot fail");
    }
    s
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
