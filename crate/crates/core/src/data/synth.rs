//! Planted-signal click logs for desk-scale verification.
//!
//! Every informative field `j` owns hidden latent vectors `u_j(v) ∈ R^R`
//! confined to an `r_j`-dimensional subspace, where `r_j` is the field's
//! rank. Labels follow a logistic model on the pairwise inner products
//! `Σ_{a<b} ⟨u_a(x_a), u_b(x_b)⟩`, the same interaction form a factorization
//! machine fits, so a field of rank `r` needs `r` embedding columns to be
//! represented exactly. Rank-0 fields have no latent vectors and therefore no
//! influence on labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::sigmoid;

use super::dataset::{Dataset, SplitTag};
use super::schema::{FeatureSchema, Field, FieldKind, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticField {
    #[serde(default)]
    pub name: Option<String>,
    pub cardinality: usize,
    /// Latent rank; 0 makes a pure-noise field.
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub fields: Vec<SyntheticField>,
    /// Standard deviation of the interaction logit over the generated rows.
    #[serde(default = "default_logit_scale")]
    pub logit_scale: f64,
    #[serde(default)]
    pub bias: f64,
    /// Per-value first-order effects on informative fields.
    #[serde(default)]
    pub first_order_scale: f64,
}

fn default_logit_scale() -> f64 {
    3.0
}

impl SyntheticSpec {
    /// Fields `(cardinality, rank)` with default scales.
    pub fn new(fields: &[(usize, usize)]) -> Self {
        SyntheticSpec {
            fields: fields
                .iter()
                .map(|&(cardinality, rank)| SyntheticField {
                    name: None,
                    cardinality,
                    rank,
                })
                .collect(),
            logit_scale: default_logit_scale(),
            bias: 0.0,
            first_order_scale: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.fields.is_empty() {
            return Err(Error::invalid("synthetic spec needs at least one field"));
        }
        for (j, f) in self.fields.iter().enumerate() {
            if f.cardinality == 0 {
                return Err(Error::invalid(format!("synthetic field {j} has cardinality 0")));
            }
            if f.rank > f.cardinality {
                return Err(Error::invalid(format!(
                    "synthetic field {j}: rank {} exceeds cardinality {}",
                    f.rank, f.cardinality
                )));
            }
        }
        let bad = |x: f64| !x.is_finite() || x < 0.0;
        if bad(self.logit_scale) || !self.bias.is_finite() || bad(self.first_order_scale) {
            return Err(Error::invalid("synthetic scales must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Hidden generator of a synthetic dataset.
#[derive(Clone, Debug)]
pub struct PlantedTruth {
    /// Per field, `C_j × R` latent vectors (all zero for rank-0 fields).
    pub latents: Vec<Vec<Vec<f64>>>,
    pub first_order: Vec<Vec<f64>>,
    pub ranks: Vec<usize>,
    pub scale: f64,
    pub bias: f64,
}

impl PlantedTruth {
    fn interaction(&self, row: &[u32]) -> f64 {
        let dim = self.latents.iter().find_map(|l| l.first().map(Vec::len)).unwrap_or(0);
        let mut total = vec![0.0; dim];
        let mut self_sq = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let u = &self.latents[j][v as usize];
            for (t, x) in total.iter_mut().zip(u) {
                *t += x;
            }
            self_sq += u.iter().map(|x| x * x).sum::<f64>();
        }
        0.5 * (total.iter().map(|x| x * x).sum::<f64>() - self_sq)
    }

    /// Logit of the label-generating model for one row.
    pub fn logit(&self, row: &[u32]) -> f64 {
        let first: f64 = row.iter().enumerate().map(|(j, &v)| self.first_order[j][v as usize]).sum();
        self.scale * self.interaction(row) + first + self.bias
    }

    pub fn probability(&self, row: &[u32]) -> f64 {
        sigmoid(self.logit(row))
    }
}

pub fn synthesize(spec: &SyntheticSpec, n_rows: usize, seed: u64) -> Result<Dataset> {
    synthesize_with_truth(spec, n_rows, seed).map(|(d, _)| d)
}

/// Generates `n_rows` rows and returns the planted generator alongside.
pub fn synthesize_with_truth(spec: &SyntheticSpec, n_rows: usize, seed: u64) -> Result<(Dataset, PlantedTruth)> {
    spec.validate()?;
    if n_rows == 0 {
        return Err(Error::invalid("synthetic dataset needs at least one row"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = spec.fields.iter().map(|f| f.rank).max().unwrap_or(0).max(1);

    let mut latents = Vec::with_capacity(spec.fields.len());
    let mut first_order = Vec::with_capacity(spec.fields.len());
    for f in &spec.fields {
        let mut normal = || rng.sample::<f64, _>(StandardNormal);
        let basis: Vec<Vec<f64>> = (0..f.rank)
            .map(|_| (0..dim).map(|_| normal() / (f.rank as f64).sqrt()).collect())
            .collect();
        let table: Vec<Vec<f64>> = (0..f.cardinality)
            .map(|_| {
                let z: Vec<f64> = (0..f.rank).map(|_| normal()).collect();
                (0..dim)
                    .map(|d| z.iter().zip(&basis).map(|(zk, b)| zk * b[d]).sum())
                    .collect()
            })
            .collect();
        let w: Vec<f64> = (0..f.cardinality)
            .map(|_| {
                let x = normal();
                if f.rank > 0 {
                    spec.first_order_scale * x
                } else {
                    0.0
                }
            })
            .collect();
        latents.push(table);
        first_order.push(w);
    }

    let columns: Vec<Vec<u32>> = spec
        .fields
        .iter()
        .map(|f| (0..n_rows).map(|_| rng.random_range(0..f.cardinality) as u32).collect())
        .collect();

    let mut truth = PlantedTruth {
        latents,
        first_order,
        ranks: spec.fields.iter().map(|f| f.rank).collect(),
        scale: 1.0,
        bias: spec.bias,
    };
    let raw: Vec<f64> = (0..n_rows)
        .map(|i| {
            let row: Vec<u32> = columns.iter().map(|c| c[i]).collect();
            truth.interaction(&row)
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / n_rows as f64;
    let sd = (raw.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n_rows as f64).sqrt();
    truth.scale = if sd > 0.0 { spec.logit_scale / sd } else { 0.0 };

    let labels: Vec<u8> = (0..n_rows)
        .map(|i| {
            let row: Vec<u32> = columns.iter().map(|c| c[i]).collect();
            let p = truth.probability(&row);
            u8::from(rng.random::<f64>() < p)
        })
        .collect();

    let fields = spec
        .fields
        .iter()
        .enumerate()
        .map(|(j, f)| Field {
            name: f.name.clone().unwrap_or_else(|| format!("f{j}")),
            kind: FieldKind::Categorical,
            vocab: Vocabulary::new((0..f.cardinality).map(|v| v.to_string()), false),
        })
        .collect();
    let schema = FeatureSchema::new(fields)?;
    Ok((Dataset::new(schema, columns, labels, SplitTag::Full)?, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let spec = SyntheticSpec::new(&[(10, 2), (8, 1), (5, 0)]);
        let a = synthesize(&spec, 300, 9).unwrap();
        let b = synthesize(&spec, 300, 9).unwrap();
        let c = synthesize(&spec, 300, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn noise_field_has_no_influence() {
        let spec = SyntheticSpec::new(&[(10, 3), (10, 3), (7, 0)]);
        let (d, truth) = synthesize_with_truth(&spec, 500, 1).unwrap();
        let n = d.len();
        for i in 0..n {
            let mut row = d.row(i);
            let before = truth.logit(&row);
            // Permute the noise field's value.
            row[2] = (row[2] + 1 + i as u32) % 7;
            assert_eq!(truth.logit(&row).to_bits(), before.to_bits());
        }
    }

    #[test]
    fn logit_scale_is_met() {
        let spec = SyntheticSpec::new(&[(20, 4), (20, 4)]);
        let (d, truth) = synthesize_with_truth(&spec, 2000, 2).unwrap();
        let logits: Vec<f64> = (0..d.len()).map(|i| truth.logit(&d.row(i))).collect();
        let mean = logits.iter().sum::<f64>() / logits.len() as f64;
        let sd = (logits.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / logits.len() as f64).sqrt();
        assert!((sd - 3.0).abs() < 1e-9);
    }

    #[test]
    fn invalid_specs() {
        assert!(synthesize(&SyntheticSpec::new(&[]), 10, 0).is_err());
        assert!(synthesize(&SyntheticSpec::new(&[(0, 0)]), 10, 0).is_err());
        assert!(synthesize(&SyntheticSpec::new(&[(3, 4)]), 10, 0).is_err());
        assert!(synthesize(&SyntheticSpec::new(&[(3, 1)]), 0, 0).is_err());
    }

    #[test]
    fn latent_rank_is_planted() {
        let spec = SyntheticSpec::new(&[(12, 3), (12, 5)]);
        let (_, truth) = synthesize_with_truth(&spec, 10, 4).unwrap();
        for (j, &r) in truth.ranks.iter().enumerate() {
            assert_eq!(numeric_rank(&truth.latents[j]), r);
        }
    }

    #[allow(clippy::needless_range_loop)]
    fn numeric_rank(rows: &[Vec<f64>]) -> usize {
        // Gaussian elimination with partial pivoting.
        let mut m: Vec<Vec<f64>> = rows.to_vec();
        let cols = m[0].len();
        let mut rank = 0;
        for c in 0..cols {
            let Some(p) = (rank..m.len()).max_by(|&a, &b| m[a][c].abs().total_cmp(&m[b][c].abs())) else {
                break;
            };
            if m[p][c].abs() < 1e-9 {
                continue;
            }
            m.swap(rank, p);
            for r in 0..m.len() {
                if r != rank {
                    let f = m[r][c] / m[rank][c];
                    for k in 0..cols {
                        m[r][k] -= f * m[rank][k];
                    }
                }
            }
            rank += 1;
        }
        rank
    }
}
