//! End-to-end training with Adam, evaluation and metrics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::Mode;
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{self, Dataset, Split};
use crate::error::{Error, Result};
use crate::model::Dcnfis;
use crate::optim::{clip_global_norm, AdamState};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::util::argmax;

/// Stream of the seeded generator used for shuffling and augmentation,
/// kept apart from the one that initializes parameters.
const DATA_STREAM: u64 = 1;
const EVAL_BATCH: usize = 500;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: u32,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub negative_beta: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
    pub predictions: Vec<usize>,
}

impl Evaluation {
    pub fn confusion_csv(&self) -> String {
        let n = self.confusion.len();
        let mut out = String::from("true\\pred");
        for j in 0..n {
            out.push_str(&format!(",{j}"));
        }
        out.push('\n');
        for (i, row) in self.confusion.iter().enumerate() {
            out.push_str(&i.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    pub checkpoint: Checkpoint,
}

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,train_acc,test_loss,test_acc";

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for m in history {
        out.push_str(&format!(
            "{},{:e},{:.6},{:.6},{:.6},{:.6}\n",
            m.epoch, m.lr, m.train_loss, m.train_acc, m.test_loss, m.test_acc
        ));
    }
    out
}

/// Applies the configured sample limits and, when requested, train-mean
/// subtraction.
pub fn prepare_dataset(ds: &Dataset, cfg: &TrainConfig) -> Result<Dataset> {
    let mut ds = ds.clone();
    if let Some(n) = cfg.train_limit {
        ds.train.truncate(n);
    }
    if let Some(n) = cfg.test_limit {
        ds.test.truncate(n);
    }
    if cfg.mean_subtract && ds.mean.is_none() {
        ds = data::apply_mean_subtraction(ds, true)?;
    }
    Ok(ds)
}

/// One optimizer step on a batch. Returns the mean loss and the number of
/// correct predictions.
pub fn train_step(
    model: &mut Dcnfis,
    state: &mut AdamState,
    batch: Tensor,
    labels: &[usize],
    lr: f64,
    clip_norm: Option<f64>,
) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let x = tape.constant(batch);
    let fwd = model.forward(&mut tape, x, Mode::Train, true)?;
    let loss = tape.softmax_cross_entropy(fwd.logits, labels)?;
    let loss_value = tape.value(loss).data()[0] as f64;
    if !loss_value.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let n_classes = model.n_classes();
    let correct = tape
        .value(fwd.logits)
        .data()
        .chunks_exact(n_classes)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    tape.backward(loss)?;
    let mut grads: Vec<Vec<f32>> = fwd
        .params
        .iter()
        .map(|(_, v)| match tape.grad_data(*v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tape.value(*v).len()],
        })
        .collect();
    if let Some(c) = clip_norm {
        clip_global_norm(&mut grads, c);
    }
    model.backbone.update_running_stats(&fwd.norm_stats);
    let grad_refs: Vec<&[f32]> = grads.iter().map(|g| g.as_slice()).collect();
    let mut params = model.params_mut();
    state.step(&mut params, &grad_refs, lr)?;
    Ok((loss_value, correct))
}

/// Accuracy, mean cross-entropy and confusion matrix over a split.
pub fn evaluate(model: &Dcnfis, split: &Split) -> Result<Evaluation> {
    if split.is_empty() {
        return Err(Error::Invalid("cannot evaluate an empty split".into()));
    }
    let c = model.n_classes();
    let mut confusion = vec![vec![0u64; c]; c];
    let mut predictions = Vec::with_capacity(split.len());
    let mut loss = 0.0f64;
    let indices: Vec<usize> = (0..split.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (_, logits) = model.infer(&split.batch(chunk)?)?;
        for (row, &i) in logits.data().chunks_exact(c).zip(chunk) {
            let label = split.labels[i] as usize;
            if label >= c {
                return Err(Error::Invalid(format!("label {label} out of range for {c} classes")));
            }
            let p = argmax(row);
            loss += (crate::fuzzy::log_sum_exp(row) - row[label]) as f64;
            confusion[label][p] += 1;
            predictions.push(p);
        }
    }
    let correct: u64 = (0..c).map(|i| confusion[i][i]).sum();
    Ok(Evaluation {
        accuracy: correct as f64 / split.len() as f64,
        loss: loss / split.len() as f64,
        confusion,
        predictions,
    })
}

pub fn train(model: Dcnfis, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, dataset, cfg, |_, _| Ok(()))
}

/// Trains for `cfg.epochs`, calling `on_epoch` after each epoch with its
/// metrics and a snapshot. On a non-finite loss or gradient the run stops
/// with [`Error::Diverged`], which carries the last completed snapshot.
pub fn train_with<F>(mut model: Dcnfis, dataset: &Dataset, cfg: &TrainConfig, mut on_epoch: F) -> Result<TrainOutcome>
where
    F: FnMut(&EpochMetrics, &Checkpoint) -> Result<()>,
{
    cfg.validate().map_err(|message| Error::Config { line: 0, message })?;
    if model.backbone.config() != &cfg.backbone {
        return Err(Error::Invalid("model backbone differs from the configured one".into()));
    }
    let ds = prepare_dataset(dataset, cfg)?;
    if ds.train.is_empty() {
        return Err(Error::Invalid("training split is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(DATA_STREAM);
    let mut state = AdamState::new(cfg.adam, &model.param_sizes());
    let mut history = Vec::with_capacity(cfg.epochs as usize);
    let snapshot = |model: &Dcnfis, epoch: u32| Checkpoint {
        model: model.clone(),
        mean: ds.mean.clone(),
        seed: cfg.seed,
        epoch,
    };
    let mut last_good = snapshot(&model, 0);
    let mut order: Vec<usize> = (0..ds.train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = ds.train.batch(chunk)?;
            if cfg.augment {
                data::augment(&mut batch, &mut rng)?;
            }
            let labels: Vec<usize> = chunk.iter().map(|&i| ds.train.labels[i] as usize).collect();
            match train_step(&mut model, &mut state, batch, &labels, lr, cfg.clip_norm) {
                Ok((l, c)) => {
                    loss_sum += l * chunk.len() as f64;
                    correct += c;
                }
                Err(Error::NonFinite(what)) => {
                    return Err(Error::Diverged {
                        epoch,
                        message: format!("non-finite value in {what}"),
                        last_good: Box::new(last_good),
                    })
                }
                Err(e) => return Err(e),
            }
        }
        let n = ds.train.len() as f64;
        let test = if ds.test.is_empty() { None } else { Some(evaluate(&model, &ds.test)?) };
        let metrics = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            test_loss: test.as_ref().map_or(f64::NAN, |t| t.loss),
            test_acc: test.as_ref().map_or(f64::NAN, |t| t.accuracy),
            negative_beta: model.head.negative_beta_count(),
        };
        log::info!(
            "epoch {epoch}: lr {lr:e} train loss {:.4} acc {:.4} test loss {:.4} acc {:.4} negative beta {}",
            metrics.train_loss,
            metrics.train_acc,
            metrics.test_loss,
            metrics.test_acc,
            metrics.negative_beta
        );
        last_good = snapshot(&model, epoch);
        on_epoch(&metrics, &last_good)?;
        history.push(metrics);
    }
    Ok(TrainOutcome { history, checkpoint: last_good })
}
