use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Splits;
use crate::embeddings::ColumnLayout;
use crate::error::{Error, Result};
use crate::masks::{top_s, BinaryMask, MaskState};
use crate::metrics::EvalResult;
use crate::models::{Model, ModelConfig, ParamCounts};
use crate::numerics::Scalar;

use super::config::{SearchConfig, Strategy};
use super::stage::{search_stage, Searched};
use super::train::{pretrain, retrain, stream_rng, streams, Retrained, StageReport};

pub const REPORT_VERSION: u32 = 1;

/// Equal share of `s` columns per field: `⌊s/K⌋` each, capped at the
/// field's base dim, with leftovers going one at a time to the fields of
/// largest cardinality. Each field keeps its leading columns.
pub fn uniform_mask(dims: &[usize], cardinalities: &[usize], s: usize) -> Result<BinaryMask> {
    let layout = ColumnLayout::new(dims);
    if s > layout.total() {
        return Err(Error::invalid(format!("cannot keep {s} of {} columns", layout.total())));
    }
    if dims.len() != cardinalities.len() || dims.is_empty() {
        return Err(Error::invalid("one cardinality per field required"));
    }
    let k = dims.len();
    let mut share: Vec<usize> = dims.iter().map(|&d| (s / k).min(d)).collect();
    let mut left = s - share.iter().sum::<usize>();
    let mut by_card: Vec<usize> = (0..k).collect();
    by_card.sort_by(|&a, &b| cardinalities[b].cmp(&cardinalities[a]).then(a.cmp(&b)));
    while left > 0 {
        for &j in &by_card {
            if left > 0 && share[j] < dims[j] {
                share[j] += 1;
                left -= 1;
            }
        }
    }
    let mut mask = BinaryMask::zeros(layout.total());
    for (j, &n) in share.iter().enumerate() {
        for slot in layout.field_range(j).take(n) {
            mask.set(slot, true);
        }
    }
    Ok(mask)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub fields: Vec<String>,
    pub cardinalities: Vec<usize>,
    pub schema_fingerprint: String,
    pub train_rows: usize,
    pub val_rows: usize,
    pub test_rows: usize,
}

impl DatasetSummary {
    pub fn of(splits: &Splits) -> Self {
        DatasetSummary {
            fields: splits.schema.names(),
            cardinalities: splits.schema.cardinalities(),
            schema_fingerprint: splits.schema.fingerprint(),
            train_rows: splits.train.len(),
            val_rows: splits.val.len(),
            test_rows: splits.test.len(),
        }
    }
}

/// Everything a run produced, minus the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub strategy: Strategy,
    pub seed: u64,
    pub model: ModelConfig,
    pub search: SearchConfig,
    pub dataset: DatasetSummary,
    pub base_dims: Vec<usize>,
    pub stages: Vec<StageReport>,
    /// Retraining mask as a `0`/`1` string over the flat column layout.
    pub mask: String,
    pub selected_dims: Vec<usize>,
    pub mask_size: usize,
    pub target_size: usize,
    /// Exactly `s` columns chosen by largest `α`, for size-matched comparison.
    pub size_matched_mask: Option<String>,
    pub alpha: Option<Vec<f64>>,
    pub search_stopped_early: Option<bool>,
    pub params: ParamCounts,
    pub supernet_params: ParamCounts,
    pub val: EvalResult,
    pub test: EvalResult,
    pub test_supernet: EvalResult,
    pub seconds: f64,
}

impl RunReport {
    /// Report of a run that has not finished any stage yet. `supernet` is the
    /// freshly initialized model.
    pub fn begin<T: Scalar>(
        strategy: Strategy,
        model_cfg: &ModelConfig,
        cfg: &SearchConfig,
        splits: &Splits,
        supernet: &Model<T>,
    ) -> Result<Self> {
        let empty = EvalResult {
            logloss: f64::NAN,
            auc: f64::NAN,
            n_samples: 0,
        };
        let params = supernet.param_counts(None)?;
        Ok(RunReport {
            version: REPORT_VERSION,
            strategy,
            seed: cfg.seed,
            model: model_cfg.clone(),
            search: cfg.clone(),
            dataset: DatasetSummary::of(splits),
            base_dims: supernet.embeddings().dims(),
            stages: Vec::new(),
            mask: String::new(),
            selected_dims: Vec::new(),
            mask_size: 0,
            target_size: cfg.target_size,
            size_matched_mask: None,
            alpha: None,
            search_stopped_early: None,
            params,
            supernet_params: params,
            val: empty,
            test: empty,
            test_supernet: empty,
            seconds: 0.0,
        })
    }

    /// Stores the search outcome: final `α`, whether the stopper fired and
    /// the exactly-`s` mask for size-matched comparison.
    pub fn record_search(&mut self, state: &MaskState, stopped_early: bool) -> Result<()> {
        self.size_matched_mask = Some(top_s(state.alpha(), self.target_size)?.bit_string());
        self.alpha = Some(state.alpha().to_vec());
        self.search_stopped_early = Some(stopped_early);
        Ok(())
    }

    /// Stores the retraining mask and the final metrics.
    pub fn record_retrain<T: Scalar>(&mut self, mask: &BinaryMask, retrained: &Retrained<T>) -> Result<()> {
        self.mask = mask.bit_string();
        self.selected_dims = ColumnLayout::new(&self.base_dims).per_field(mask);
        self.mask_size = mask.count();
        self.params = retrained.pruned.param_counts(None)?;
        self.val = retrained.val;
        self.test = retrained.test;
        self.test_supernet = retrained.test_supernet;
        Ok(())
    }

    /// The report with every wall-clock field zeroed, for comparing runs.
    pub fn without_timing(&self) -> RunReport {
        let mut r = self.clone();
        r.seconds = 0.0;
        for s in &mut r.stages {
            s.seconds = 0.0;
        }
        r
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Weights and report of a full run.
#[derive(Clone, Debug)]
pub struct RunOutcome<T: Scalar = f64> {
    pub report: RunReport,
    pub pretrained: Model<T>,
    pub searched: Option<Searched<T>>,
    pub retrained: Retrained<T>,
}

/// The supernet a run with `cfg` starts from. Initialization draws from its
/// own random stream, so it depends on the seed alone.
pub fn init_supernet<T: Scalar>(model_cfg: &ModelConfig, cardinalities: &[usize], cfg: &SearchConfig) -> Result<Model<T>> {
    let model = Model::init(model_cfg, cardinalities, &mut stream_rng(cfg.seed, streams::INIT))?;
    cfg.validate(model.num_columns())?;
    Ok(model)
}

/// Pretrain, search (skipped for uniform sizing) and retrain.
pub fn run_pipeline<T: Scalar>(
    splits: &Splits,
    model_cfg: &ModelConfig,
    cfg: &SearchConfig,
    strategy: Strategy,
) -> Result<RunOutcome<T>> {
    let start = Instant::now();
    let cards = splits.schema.cardinalities();
    let model: Model<T> = init_supernet(model_cfg, &cards, cfg)?;
    let base_dims = model.embeddings().dims();
    let mut report = RunReport::begin(strategy, model_cfg, cfg, splits, &model)?;
    log::info!("{strategy} seed {}: pretraining {} columns", cfg.seed, model.num_columns());

    let (pretrained, pre_report) = pretrain(model, splits, cfg)?;
    report.stages.push(pre_report);

    let (warm, mask, searched) = match strategy {
        Strategy::Uniform => {
            let mask = uniform_mask(&base_dims, &cards, cfg.target_size)?;
            (pretrained.clone(), mask, None)
        }
        _ => {
            let found = search_stage(pretrained.clone(), splits, cfg, strategy)?;
            report.stages.push(found.report.clone());
            report.record_search(&found.state, found.stopped_early)?;
            (found.model.clone(), found.mask.clone(), Some(found))
        }
    };
    log::info!("{strategy} seed {}: retraining with {} columns", cfg.seed, mask.count());

    let retrained = retrain(warm, &mask, splits, cfg)?;
    report.stages.push(retrained.report.clone());
    report.record_retrain(&mask, &retrained)?;
    report.seconds = start.elapsed().as_secs_f64();
    Ok(RunOutcome {
        report,
        pretrained,
        searched,
        retrained,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_shares() {
        let m = uniform_mask(&[4, 4, 4], &[10, 50, 20], 7).unwrap();
        // 2 each, one extra to the largest field.
        assert_eq!(ColumnLayout::new(&[4, 4, 4]).per_field(&m), vec![2, 3, 2]);
        assert_eq!(m.count(), 7);

        // Capped fields pass their share on.
        let m = uniform_mask(&[1, 4, 4], &[2, 50, 20], 8).unwrap();
        assert_eq!(ColumnLayout::new(&[1, 4, 4]).per_field(&m), vec![1, 4, 3]);

        let full = uniform_mask(&[3, 2], &[5, 5], 5).unwrap();
        assert_eq!(full, BinaryMask::ones(5));
        assert!(uniform_mask(&[3, 2], &[5, 5], 6).is_err());
    }
}
