use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::schema::FeatureSchema;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Full,
    Train,
    Val,
    Test,
}

/// Indexed categorical rows with binary labels, stored column-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    schema: Arc<FeatureSchema>,
    columns: Vec<Vec<u32>>,
    labels: Vec<u8>,
    split: SplitTag,
}

/// Field indices and labels of a mini-batch, ready for a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub fields: Vec<Vec<usize>>,
    pub labels: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl Dataset {
    pub fn new(schema: Arc<FeatureSchema>, columns: Vec<Vec<u32>>, labels: Vec<u8>, split: SplitTag) -> Result<Self> {
        if columns.len() != schema.num_fields() {
            return Err(Error::Data(format!(
                "{} columns for a schema with {} fields",
                columns.len(),
                schema.num_fields()
            )));
        }
        for (col, field) in columns.iter().zip(&schema.fields) {
            if col.len() != labels.len() {
                return Err(Error::Data(format!(
                    "field {} has {} rows, labels have {}",
                    field.name,
                    col.len(),
                    labels.len()
                )));
            }
            let card = field.cardinality();
            if let Some(&bad) = col.iter().find(|&&i| i as usize >= card) {
                return Err(Error::IndexOutOfRange {
                    what: format!("field {}", field.name),
                    index: bad as usize,
                    size: card,
                });
            }
        }
        if let Some(&bad) = labels.iter().find(|&&y| y > 1) {
            return Err(Error::Data(format!("label {bad} is not 0 or 1")));
        }
        Ok(Dataset {
            schema,
            columns,
            labels,
            split,
        })
    }

    pub fn schema(&self) -> &Arc<FeatureSchema> {
        &self.schema
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_fields(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, field: usize) -> &[u32] {
        &self.columns[field]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> Vec<u32> {
        self.columns.iter().map(|c| c[i]).collect()
    }

    pub fn positive_rate(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.labels.iter().map(|&y| y as f64).sum::<f64>() / self.len() as f64
    }

    /// Rows `rows` in the given order, tagged `split`.
    pub fn subset(&self, rows: &[usize], split: SplitTag) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            columns: self
                .columns
                .iter()
                .map(|c| rows.iter().map(|&r| c[r]).collect())
                .collect(),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            split,
        }
    }

    pub fn batch(&self, rows: &[usize]) -> Batch {
        Batch {
            fields: self
                .columns
                .iter()
                .map(|c| rows.iter().map(|&r| c[r] as usize).collect())
                .collect(),
            labels: rows.iter().map(|&r| self.labels[r] as f64).collect(),
        }
    }

    pub fn full_batch(&self) -> Batch {
        let rows: Vec<usize> = (0..self.len()).collect();
        self.batch(&rows)
    }

    /// Same rows and labels under another split tag.
    pub fn with_split(mut self, split: SplitTag) -> Self {
        self.split = split;
        self
    }

    /// Replaces one field's column; used by permutation probes.
    pub fn with_column(&self, field: usize, column: Vec<u32>) -> Result<Dataset> {
        let mut columns = self.columns.clone();
        columns[field] = column;
        Dataset::new(self.schema.clone(), columns, self.labels.clone(), self.split)
    }
}

/// Train/validation/test partition sharing one schema.
#[derive(Clone, Debug)]
pub struct Splits {
    pub schema: Arc<FeatureSchema>,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}
