use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Dataset, Splits};
use crate::error::{Error, Result};
use crate::masks::BinaryMask;
use crate::metrics::EvalResult;
use crate::models::Model;
use crate::numerics::{Scalar, Tape, Tensor};

use super::config::{SearchConfig, SoConfig};
use super::optim::Adam;
use super::stopping::{EarlyStopper, Progress};

/// Independent random streams derived from one run seed.
pub(crate) mod streams {
    pub const INIT: u64 = 0;
    pub const PRETRAIN: u64 = 1;
    pub const SEARCH_TRAIN: u64 = 2;
    pub const SEARCH_VAL: u64 = 3;
    pub const MASK_NOISE: u64 = 4;
    pub const RETRAIN: u64 = 5;
}

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Row indices `0..n` shuffled and cut into batches; the last may be short.
pub fn shuffled_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Endless stream of batches that reshuffles after every pass.
#[derive(Clone, Debug)]
pub struct BatchCycler {
    batches: Vec<Vec<usize>>,
    next: usize,
    n: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BatchCycler {
    pub fn new(n: usize, batch_size: usize, rng: ChaCha8Rng) -> Self {
        BatchCycler {
            batches: Vec::new(),
            next: 0,
            n,
            batch_size,
            rng,
        }
    }

    pub fn next_rows(&mut self) -> &[usize] {
        if self.next == self.batches.len() {
            self.batches = shuffled_batches(self.n, self.batch_size, &mut self.rng);
            self.next = 0;
        }
        self.next += 1;
        &self.batches[self.next - 1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean data loss over the epoch's training batches.
    pub train_loss: f64,
    pub val: EvalResult,
    /// Columns switched on by the current mask, when a mask is being searched.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mask_size: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were kept, for stages that keep the best epoch.
    pub best_epoch: Option<usize>,
    pub steps: usize,
    pub seconds: f64,
}

impl StageReport {
    pub(crate) fn new(stage: &str) -> Self {
        StageReport {
            stage: stage.to_string(),
            epochs: Vec::new(),
            best_epoch: None,
            steps: 0,
            seconds: 0.0,
        }
    }
}

/// Logloss and AUC of `model` on all rows of `data`.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset, mask: Option<&BinaryMask>) -> Result<EvalResult> {
    let values = mask.map(BinaryMask::values);
    evaluate_with(model, data, values.as_deref())
}

/// As [`evaluate`] under real-valued mask values.
pub fn evaluate_with<T: Scalar>(model: &Model<T>, data: &Dataset, mask: Option<&[f64]>) -> Result<EvalResult> {
    let batch = data.full_batch();
    let p = model.predict_with(&batch, mask)?;
    EvalResult::compute(&p, &batch.labels)
}

/// One Adam step on `batch` and the data loss before the step.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut Adam<T>,
    batch: &Batch,
    mask: Option<&[f64]>,
    so: Option<SoConfig>,
    finite_check: bool,
) -> Result<f64> {
    let (loss, grads) = {
        let m: &Model<T> = model;
        let mask_row = mask.map(|v| Tensor::row(v.iter().map(|&x| T::of(x)).collect()));
        let mut tape = Tape::new().with_finite_check(finite_check);
        let vars = m.bind(&mut tape);
        let mv = mask_row.as_ref().map(|r| tape.constant_ref(r));
        let data_loss = m.loss(&mut tape, &vars, batch, mv)?;
        let mut total = data_loss;
        if let Some(so) = so.filter(|s| s.weight > 0.0) {
            let pen = m.embeddings().so_penalty(&mut tape, &vars.embeddings, so.normalized)?;
            let scaled = tape.scale(pen, T::of(so.weight))?;
            total = tape.add(total, scaled)?;
        }
        let loss = tape.scalar(data_loss).as_f64();
        if !tape.scalar(total).is_finite() {
            return Err(Error::NonFinite(format!("training loss {}", tape.scalar(total))));
        }
        let mut g = tape.backward(total)?;
        let grads: Vec<Tensor<T>> = vars
            .all()
            .into_iter()
            .zip(m.params())
            .map(|(v, p)| g.take_or_zeros(v, p.shape()))
            .collect();
        (loss, grads)
    };
    opt.step(model.params_mut(), &grads)?;
    Ok(loss)
}

/// Adam on the training split with early stopping on validation AUC.
/// Returns the weights of the best validation epoch.
#[allow(clippy::too_many_arguments)]
pub(crate) fn fit<T: Scalar>(
    mut model: Model<T>,
    splits: &Splits,
    cfg: &SearchConfig,
    stage: &str,
    epochs: usize,
    stream: u64,
    mask: Option<&BinaryMask>,
    so: Option<SoConfig>,
) -> Result<(Model<T>, StageReport)> {
    let start = Instant::now();
    let mut report = StageReport::new(stage);
    let mut opt = Adam::new(cfg.adam, &model.params());
    let mut rng = stream_rng(cfg.seed, stream);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mask_values = mask.map(BinaryMask::values);
    let mut best = None;
    for epoch in 0..epochs {
        let mut total = 0.0;
        let batches = shuffled_batches(splits.train.len(), cfg.batch_size, &mut rng);
        for (step, rows) in batches.iter().enumerate() {
            let batch = splits.train.batch(rows);
            let loss = train_step(&mut model, &mut opt, &batch, mask_values.as_deref(), so, cfg.finite_check)
                .map_err(|e| diverged(e, stage, epoch, step))?;
            total += loss * rows.len() as f64;
            report.steps += 1;
        }
        let val = evaluate(&model, &splits.val, mask)?;
        log::debug!("{stage} epoch {epoch}: val auc {:.5} logloss {:.5}", val.auc, val.logloss);
        report.epochs.push(EpochRecord {
            epoch,
            train_loss: total / splits.train.len().max(1) as f64,
            val,
            mask_size: None,
        });
        match stopper.observe(val.auc) {
            Progress::Improved => {
                best = Some(model.clone());
                report.best_epoch = Some(epoch);
            }
            Progress::Stop => break,
            Progress::Stalled => {}
        }
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok((best.unwrap_or(model), report))
}

pub(crate) fn diverged(e: Error, stage: &str, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{stage} diverged at epoch {epoch}, step {step}: {what}")),
        other => other,
    }
}

/// Trains the supernet on the training split with the SO penalty, keeping
/// the weights of the best validation epoch.
pub fn pretrain<T: Scalar>(model: Model<T>, splits: &Splits, cfg: &SearchConfig) -> Result<(Model<T>, StageReport)> {
    fit(
        model,
        splits,
        cfg,
        "pretrain",
        cfg.pretrain_epochs,
        streams::PRETRAIN,
        None,
        Some(cfg.so),
    )
}

/// Result of retraining under a frozen mask.
#[derive(Clone, Debug)]
pub struct Retrained<T: Scalar = f64> {
    /// Supernet weights of the best validation epoch, evaluated under the mask.
    pub supernet: Model<T>,
    /// The same model with masked columns deleted.
    pub pruned: Model<T>,
    pub report: StageReport,
    pub val: EvalResult,
    pub test: EvalResult,
    /// Test metrics of the masked supernet; equal to `test` by construction.
    pub test_supernet: EvalResult,
}

/// Continues training under a frozen binary mask, then physically prunes
/// the masked columns and evaluates on the test split.
pub fn retrain<T: Scalar>(
    model: Model<T>,
    mask: &BinaryMask,
    splits: &Splits,
    cfg: &SearchConfig,
) -> Result<Retrained<T>> {
    if mask.len() != model.num_columns() {
        return Err(Error::Shape {
            op: "retrain",
            lhs: vec![model.num_columns()],
            rhs: vec![mask.len()],
        });
    }
    let so = cfg.so.all_stages.then_some(cfg.so);
    let (supernet, report) = fit(
        model,
        splits,
        cfg,
        "retrain",
        cfg.retrain_epochs,
        streams::RETRAIN,
        Some(mask),
        so,
    )?;
    let pruned = supernet.materialize_pruned(mask)?;
    let val = evaluate(&pruned, &splits.val, None)?;
    let test = evaluate(&pruned, &splits.test, None)?;
    let test_supernet = evaluate(&supernet, &splits.test, Some(mask))?;
    Ok(Retrained {
        supernet,
        pruned,
        report,
        val,
        test,
        test_supernet,
    })
}
