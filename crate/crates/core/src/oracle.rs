//! Exhaustive mask enumeration for tiny supernets.
//!
//! Every candidate mask starts from the same checkpoint, is fine-tuned for a
//! fixed number of mini-batches (the same batches for every mask) and is
//! scored by validation logloss. The ranking is a total order: equal losses
//! fall back to the mask's bit pattern read as an integer.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Splits;
use crate::error::{Error, Result};
use crate::masks::BinaryMask;
use crate::models::Model;
use crate::numerics::Scalar;
use crate::search::{evaluate, train_step, Adam, BatchCycler, SearchConfig};

/// Largest supernet the oracle will enumerate.
pub const MAX_ORACLE_COLUMNS: usize = 20;
pub const DEFAULT_RETRAIN_STEPS: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskScore {
    pub mask: BinaryMask,
    pub val_loss: f64,
    pub val_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskEnumeration {
    pub columns: usize,
    /// Mask size enumerated, or `None` for every size.
    pub size: Option<usize>,
    pub retrain_steps: usize,
    /// Best first.
    pub ranked: Vec<MaskScore>,
}

impl MaskEnumeration {
    pub fn best(&self) -> &MaskScore {
        &self.ranked[0]
    }

    /// 1-based position of `mask` in the ranking.
    pub fn rank_of(&self, mask: &BinaryMask) -> Option<usize> {
        self.ranked.iter().position(|m| &m.mask == mask).map(|p| p + 1)
    }

    /// Writes `rank,mask,val_loss,val_auc` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::file(path, io),
            other => Error::Data(format!("{other:?}")),
        })?;
        w.write_record(["rank", "mask", "val_loss", "val_auc"])?;
        for (i, m) in self.ranked.iter().enumerate() {
            w.write_record([
                (i + 1).to_string(),
                m.mask.bit_string(),
                m.val_loss.to_string(),
                m.val_auc.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// All masks over `columns` slots with exactly `size` ones (every mask when
/// `size` is `None`), in increasing bit-pattern order.
pub fn candidate_masks(columns: usize, size: Option<usize>) -> Result<Vec<BinaryMask>> {
    if columns > MAX_ORACLE_COLUMNS {
        return Err(Error::invalid(format!(
            "exhaustive enumeration is capped at {MAX_ORACLE_COLUMNS} columns, got {columns}"
        )));
    }
    if let Some(s) = size.filter(|&s| s > columns) {
        return Err(Error::invalid(format!("cannot keep {s} of {columns} columns")));
    }
    Ok((0u64..1 << columns)
        .filter(|p| size.is_none_or(|s| p.count_ones() as usize == s))
        .map(|p| BinaryMask::from_pattern(p, columns))
        .collect())
}

/// Scores every candidate mask from `checkpoint` and ranks them.
pub fn enumerate_best_mask<T: Scalar>(
    checkpoint: &Model<T>,
    splits: &Splits,
    size: Option<usize>,
    retrain_steps: usize,
    cfg: &SearchConfig,
) -> Result<MaskEnumeration> {
    let columns = checkpoint.num_columns();
    let candidates = candidate_masks(columns, size)?;
    let mut ranked = candidates
        .into_par_iter()
        .map(|mask| score_mask(checkpoint, splits, mask, retrain_steps, cfg))
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| {
        a.val_loss
            .total_cmp(&b.val_loss)
            .then(a.mask.pattern().cmp(&b.mask.pattern()))
    });
    Ok(MaskEnumeration {
        columns,
        size,
        retrain_steps,
        ranked,
    })
}

fn score_mask<T: Scalar>(
    checkpoint: &Model<T>,
    splits: &Splits,
    mask: BinaryMask,
    steps: usize,
    cfg: &SearchConfig,
) -> Result<MaskScore> {
    let mut model = checkpoint.clone();
    let mut opt = Adam::new(cfg.adam, &model.params());
    let mut rows = BatchCycler::new(splits.train.len(), cfg.batch_size, oracle_rng(cfg.seed));
    let values = mask.values();
    for _ in 0..steps {
        let batch = splits.train.batch(rows.next_rows());
        train_step(&mut model, &mut opt, &batch, Some(&values), None, cfg.finite_check)?;
    }
    let val = evaluate(&model, &splits.val, Some(&mask))?;
    Ok(MaskScore {
        mask,
        val_loss: val.logloss,
        val_auc: val.auc,
    })
}

fn oracle_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x6f72);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split, synthesize, SyntheticSpec};
    use crate::models::{ModelConfig, ModelKind};
    use rand::SeedableRng;

    fn tiny(dims: Vec<usize>) -> (Model, Splits) {
        let k = dims.len();
        let spec = SyntheticSpec::new(&vec![(6, 2); k]);
        let data = synthesize(&spec, 400, 1).unwrap();
        let splits = split(&data, [0.6, 0.2, 0.2], 0).unwrap();
        let cfg = ModelConfig::new(ModelKind::Fm).with_dims(dims);
        let model = Model::init(&cfg, &splits.schema.cardinalities(), &mut rand_chacha::ChaCha8Rng::seed_from_u64(0)).unwrap();
        (model, splits)
    }

    #[test]
    fn candidate_counts() {
        assert_eq!(candidate_masks(2, Some(2)).unwrap(), vec![BinaryMask::ones(2)]);
        assert_eq!(candidate_masks(4, Some(2)).unwrap().len(), 6);
        assert_eq!(candidate_masks(6, Some(3)).unwrap().len(), 20);
        assert_eq!(candidate_masks(8, Some(4)).unwrap().len(), 70);
        assert_eq!(candidate_masks(5, None).unwrap().len(), 32);
        assert!(candidate_masks(21, Some(1)).is_err());
        assert!(candidate_masks(3, Some(4)).is_err());
    }

    #[test]
    fn enumeration_is_ranked_and_deterministic() {
        let (model, splits) = tiny(vec![2, 2]);
        let cfg = SearchConfig {
            batch_size: 32,
            ..SearchConfig::default()
        };
        let a = enumerate_best_mask(&model, &splits, Some(2), 5, &cfg).unwrap();
        let b = enumerate_best_mask(&model, &splits, Some(2), 5, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.ranked.len(), 6);
        assert!(a.ranked.windows(2).all(|w| w[0].val_loss <= w[1].val_loss));
        for (i, m) in a.ranked.iter().enumerate() {
            assert_eq!(a.rank_of(&m.mask), Some(i + 1));
        }
        let single = enumerate_best_mask(&model, &splits, Some(4), 5, &cfg).unwrap();
        assert_eq!(single.ranked.len(), 1);
        assert_eq!(single.best().mask, BinaryMask::ones(4));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rank.csv");
        a.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert!(text.starts_with("rank,mask,val_loss,val_auc"));
    }
}
