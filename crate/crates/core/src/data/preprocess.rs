//! Raw click-log ingestion: infrequent-value thresholding, numeric binning,
//! CSV parsing and random splitting.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::dataset::{Dataset, SplitTag, Splits};
use super::schema::{FeatureSchema, Field, FieldKind, Vocabulary};

/// Suggested thresholds for Criteo-like and Avazu-like logs.
pub const CRITEO_THRESHOLD: usize = 10;
pub const AVAZU_THRESHOLD: usize = 4;

/// Builds a vocabulary keeping values seen at least `threshold` times.
///
/// Kept values are indexed by first appearance; everything else shares the
/// trailing unknown slot.
pub fn threshold_infrequent<S: AsRef<str>>(column: &[S], threshold: usize) -> Result<Vocabulary> {
    if column.is_empty() {
        return Err(Error::Data("cannot threshold an empty column".into()));
    }
    Ok(fit_vocabulary(column.iter().map(AsRef::as_ref), threshold))
}

fn fit_vocabulary<'a>(tokens: impl Iterator<Item = &'a str> + Clone, threshold: usize) -> Vocabulary {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in tokens.clone() {
        *counts.entry(t).or_default() += 1;
    }
    let mut kept = Vec::new();
    for t in tokens {
        if let Some(c) = counts.get_mut(t) {
            if *c >= threshold {
                kept.push(t);
            }
            // Mark as visited so later occurrences are skipped.
            counts.remove(t);
        }
    }
    Vocabulary::new(kept, true)
}

/// Bins a numeric token: `⌊ln²(n)⌋` when `n = trunc(z) > 2`, else `n − 2`.
/// Missing or non-numeric tokens yield `None` (the unknown slot).
pub fn discretize_numeric(token: &str) -> Option<String> {
    let z: f64 = token.trim().parse().ok()?;
    if !z.is_finite() {
        return None;
    }
    let n = z.trunc();
    if n > 2.0 {
        let l = n.ln();
        Some(format!("{}", (l * l).floor() as i64))
    } else {
        Some(format!("{}", n as i64 - 2))
    }
}

/// Row indices for a random `(train, val, test)` partition.
///
/// Train and validation sizes are rounded to the nearest row; test takes the
/// remainder.
pub fn split_indices(n: usize, ratios: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    if ratios.iter().any(|&r| r.is_nan() || r < 0.0) {
        return Err(Error::invalid(format!("split ratios must be non-negative: {ratios:?}")));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split ratios must sum to 1, got {total}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64) * ratios[0]).round() as usize;
    let n_val = (((n as f64) * ratios[1]).round() as usize).min(n - n_train);
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    Ok([order, val, test])
}

pub fn split(dataset: &Dataset, ratios: [f64; 3], seed: u64) -> Result<Splits> {
    let [tr, va, te] = split_indices(dataset.len(), ratios, seed)?;
    Ok(Splits {
        schema: dataset.schema().clone(),
        train: dataset.subset(&tr, SplitTag::Train),
        val: dataset.subset(&va, SplitTag::Val),
        test: dataset.subset(&te, SplitTag::Test),
    })
}

/// Parsed but not yet indexed table. Numeric columns are already binned;
/// `None` marks a missing value.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTable {
    pub names: Vec<String>,
    pub kinds: Vec<FieldKind>,
    pub columns: Vec<Vec<Option<String>>>,
    pub labels: Vec<u8>,
}

impl RawTable {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Reads a headered CSV with a `label` column of 0/1 values. Columns listed in
/// `numeric` are binned with [`discretize_numeric`]; every other non-label
/// column is categorical.
pub fn read_csv(path: &Path, numeric: &[String]) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::file(path, io),
            other => Error::Data(format!("{}: {other:?}", path.display())),
        })?;
    let headers = rdr.headers()?.clone();
    let label_col = headers
        .iter()
        .position(|h| h == "label")
        .ok_or_else(|| Error::Data(format!("{}: no `label` column", path.display())))?;
    for n in numeric {
        if !headers.iter().any(|h| h == n) {
            return Err(Error::Data(format!("numeric field {n} not in CSV header")));
        }
    }
    let feature_cols: Vec<usize> = (0..headers.len()).filter(|&i| i != label_col).collect();
    let names: Vec<String> = feature_cols.iter().map(|&i| headers[i].to_string()).collect();
    let kinds: Vec<FieldKind> = names
        .iter()
        .map(|n| {
            if numeric.contains(n) {
                FieldKind::Numeric
            } else {
                FieldKind::Categorical
            }
        })
        .collect();
    let mut columns = vec![Vec::new(); names.len()];
    let mut labels = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let label = match rec.get(label_col).map(str::trim) {
            Some("0") => 0,
            Some("1") => 1,
            other => {
                return Err(Error::Data(format!(
                    "{} row {}: label {other:?} is not 0 or 1",
                    path.display(),
                    line + 1
                )))
            }
        };
        labels.push(label);
        for (j, &c) in feature_cols.iter().enumerate() {
            let raw = rec.get(c).unwrap_or("");
            let token = match kinds[j] {
                FieldKind::Numeric => discretize_numeric(raw),
                FieldKind::Categorical => Some(raw.to_string()),
            };
            columns[j].push(token);
        }
    }
    Ok(RawTable {
        names,
        kinds,
        columns,
        labels,
    })
}

/// Which rows feed the frequency counts behind thresholding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdScope {
    #[default]
    Full,
    Train,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestOptions {
    pub threshold: usize,
    pub threshold_scope: ThresholdScope,
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            threshold: CRITEO_THRESHOLD,
            threshold_scope: ThresholdScope::Full,
            ratios: [0.8, 0.1, 0.1],
            seed: 0,
        }
    }
}

/// Thresholds, indexes and splits a raw table.
pub fn ingest(raw: &RawTable, opts: &IngestOptions) -> Result<Splits> {
    if raw.is_empty() {
        return Err(Error::Data("no rows to ingest".into()));
    }
    let [tr, va, te] = split_indices(raw.len(), opts.ratios, opts.seed)?;
    let fields = raw
        .names
        .iter()
        .zip(&raw.kinds)
        .zip(&raw.columns)
        .map(|((name, &kind), col)| {
            let present = |rows: &[usize]| -> Vec<&str> { rows.iter().filter_map(|&r| col[r].as_deref()).collect() };
            let tokens: Vec<&str> = match opts.threshold_scope {
                ThresholdScope::Full => col.iter().filter_map(|t| t.as_deref()).collect(),
                // Count in training order so first appearance follows the training stream.
                ThresholdScope::Train => present(&tr),
            };
            Field {
                name: name.clone(),
                kind,
                vocab: fit_vocabulary(tokens.iter().copied(), opts.threshold),
            }
        })
        .collect();
    let schema = FeatureSchema::new(fields)?;
    let columns = schema
        .fields
        .iter()
        .zip(&raw.columns)
        .map(|(f, col)| col.iter().map(|t| f.vocab.encode(t.as_deref())).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let full = Dataset::new(schema.clone(), columns, raw.labels.clone(), SplitTag::Full)?;
    Ok(Splits {
        schema,
        train: full.subset(&tr, SplitTag::Train),
        val: full.subset(&va, SplitTag::Val),
        test: full.subset(&te, SplitTag::Test),
    })
}

/// Decodes `dataset` back to tokens and encodes again with the same schema.
pub fn reencode(dataset: &Dataset) -> Result<Dataset> {
    let schema = dataset.schema().clone();
    let columns = schema
        .fields
        .iter()
        .enumerate()
        .map(|(j, f)| {
            dataset
                .column(j)
                .iter()
                .map(|&i| f.vocab.encode(f.vocab.decode(i)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(schema, columns, dataset.labels().to_vec(), dataset.split())
}
