//! Mixed-dimension embedding tables, column masking and the soft-orthogonality
//! penalty.
//!
//! Field `j` owns a table `V_j ∈ R^{C_j × d_j}`. Every column of every table
//! is one slot of a flat [`ColumnLayout`]; masks act on that flat space. For
//! models that need a common width, each field also owns a bias-free
//! projection `P_j ∈ R^{d_j × d_base}`.
//!
//! The orthogonality penalty is
//!
//! ```text
//! R(V) = Σ_j ‖V_jᵀ V_j − I‖_F² / d_j²
//! ```
//!
//! and its cosine variant applies the same formula to column-normalized
//! tables, so that only pairwise column cosines are penalized.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::masks::BinaryMask;
use crate::numerics::{Scalar, Tape, Tensor, Var};

/// Default cap on base embedding dimensions: `d_j = min(16, C_j)`.
pub const DEFAULT_BASE_DIM_CAP: usize = 16;
/// Width of projected embeddings for vector-wise crossing models.
pub const DEFAULT_PROJECTION_DIM: usize = 16;

pub fn default_dims(cardinalities: &[usize], cap: usize) -> Vec<usize> {
    cardinalities.iter().map(|&c| c.min(cap)).collect()
}

/// Bijection between `(field, column)` pairs and flat mask slots.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnLayout {
    dims: Vec<usize>,
    offsets: Vec<usize>,
}

impl ColumnLayout {
    pub fn new(dims: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(dims.len());
        let mut acc = 0;
        for &d in dims {
            offsets.push(acc);
            acc += d;
        }
        ColumnLayout {
            dims: dims.to_vec(),
            offsets,
        }
    }

    /// `S = Σ_j d_j`.
    pub fn total(&self) -> usize {
        self.dims.iter().sum()
    }

    pub fn num_fields(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn field_range(&self, field: usize) -> Range<usize> {
        self.offsets[field]..self.offsets[field] + self.dims[field]
    }

    pub fn slot(&self, field: usize, column: usize) -> Result<usize> {
        if field >= self.dims.len() || column >= self.dims[field] {
            return Err(Error::IndexOutOfRange {
                what: format!("column of field {field}"),
                index: column,
                size: self.dims.get(field).copied().unwrap_or(0),
            });
        }
        Ok(self.offsets[field] + column)
    }

    pub fn locate(&self, slot: usize) -> Result<(usize, usize)> {
        (0..self.dims.len())
            .find(|&j| self.field_range(j).contains(&slot))
            .map(|j| (j, slot - self.offsets[j]))
            .ok_or(Error::IndexOutOfRange {
                what: "mask slot".into(),
                index: slot,
                size: self.total(),
            })
    }

    /// Surviving columns per field under `mask`.
    pub fn per_field(&self, mask: &BinaryMask) -> Vec<usize> {
        (0..self.dims.len())
            .map(|j| self.field_range(j).filter(|&s| mask.get(s)).count())
            .collect()
    }
}

/// Tape handles of a bound [`EmbeddingLayer`].
#[derive(Clone, Debug)]
pub struct EmbeddingVars {
    pub tables: Vec<Var>,
    pub projections: Option<Vec<Var>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct EmbeddingLayer<T: Scalar = f64> {
    tables: Vec<Tensor<T>>,
    projections: Option<Vec<Tensor<T>>>,
}

impl<T: Scalar> EmbeddingLayer<T> {
    /// Uniform `±sqrt(6 / (fan_in + fan_out))` initialization.
    pub fn init<R: Rng + ?Sized>(
        cardinalities: &[usize],
        dims: &[usize],
        projection_dim: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        if cardinalities.len() != dims.len() || dims.is_empty() {
            return Err(Error::invalid(format!(
                "{} cardinalities for {} embedding dims",
                cardinalities.len(),
                dims.len()
            )));
        }
        for (j, (&c, &d)) in cardinalities.iter().zip(dims).enumerate() {
            if d > c {
                return Err(Error::invalid(format!(
                    "field {j}: embedding dim {d} exceeds cardinality {c}"
                )));
            }
        }
        let tables = cardinalities
            .iter()
            .zip(dims)
            .map(|(&c, &d)| Tensor::uniform(&[c, d], glorot(c, d), rng))
            .collect();
        let projections = projection_dim.map(|p| {
            dims.iter()
                .map(|&d| Tensor::uniform(&[d, p], glorot(d, p), rng))
                .collect()
        });
        Ok(EmbeddingLayer { tables, projections })
    }

    pub fn from_parts(tables: Vec<Tensor<T>>, projections: Option<Vec<Tensor<T>>>) -> Result<Self> {
        if let Some(p) = &projections {
            if p.len() != tables.len() {
                return Err(Error::invalid("one projection per table required"));
            }
            let width = p.first().map(Tensor::cols);
            for (t, pj) in tables.iter().zip(p) {
                if pj.rows() != t.cols() || Some(pj.cols()) != width {
                    return Err(Error::Shape {
                        op: "EmbeddingLayer::from_parts",
                        lhs: t.shape().to_vec(),
                        rhs: pj.shape().to_vec(),
                    });
                }
            }
        }
        Ok(EmbeddingLayer { tables, projections })
    }

    pub fn num_fields(&self) -> usize {
        self.tables.len()
    }

    pub fn tables(&self) -> &[Tensor<T>] {
        &self.tables
    }

    pub fn tables_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tables
    }

    pub fn projections(&self) -> Option<&[Tensor<T>]> {
        self.projections.as_deref()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.tables.iter().map(Tensor::cols).collect()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.tables.iter().map(Tensor::rows).collect()
    }

    pub fn layout(&self) -> ColumnLayout {
        ColumnLayout::new(&self.dims())
    }

    /// Output width per field: the projection width, or `d_j` without one.
    pub fn output_dims(&self) -> Vec<usize> {
        match &self.projections {
            Some(p) => p.iter().map(Tensor::cols).collect(),
            None => self.dims(),
        }
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out: Vec<&Tensor<T>> = self.tables.iter().collect();
        if let Some(p) = &self.projections {
            out.extend(p.iter());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = self.tables.iter_mut().collect();
        if let Some(p) = &mut self.projections {
            out.extend(p.iter_mut());
        }
        out
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>) -> EmbeddingVars {
        self.bind_as(tape, true)
    }

    /// Binds the tensors as differentiable leaves or, with `trainable`
    /// false, as constants.
    pub fn bind_as<'a>(&'a self, tape: &mut Tape<'a, T>, trainable: bool) -> EmbeddingVars {
        let mut put = |t: &'a Tensor<T>| if trainable { tape.leaf_ref(t) } else { tape.constant_ref(t) };
        EmbeddingVars {
            tables: self.tables.iter().map(&mut put).collect(),
            projections: self.projections.as_ref().map(|p| p.iter().map(&mut put).collect()),
        }
    }

    /// Per-field embeddings of `batch`: row lookup, column mask, projection.
    ///
    /// `mask` is a `1 × S` node over the flat column layout; `None` means the
    /// unmasked supernet.
    pub fn lookup_fields(
        &self,
        tape: &mut Tape<'_, T>,
        vars: &EmbeddingVars,
        batch: &Batch,
        mask: Option<Var>,
    ) -> Result<Vec<Var>> {
        if batch.fields.len() != self.tables.len() {
            return Err(Error::invalid(format!(
                "batch has {} fields, layer has {}",
                batch.fields.len(),
                self.tables.len()
            )));
        }
        let layout = self.layout();
        if let Some(m) = mask {
            let got = tape.value(m).len();
            if got != layout.total() {
                return Err(Error::Shape {
                    op: "lookup",
                    lhs: vec![1, layout.total()],
                    rhs: tape.value(m).shape().to_vec(),
                });
            }
        }
        let mut out = Vec::with_capacity(self.tables.len());
        for (j, idx) in batch.fields.iter().enumerate() {
            let mut e = tape.gather_rows(vars.tables[j], idx.clone())?;
            if let Some(m) = mask {
                let r = layout.field_range(j);
                let mj = tape.slice_cols(m, r.start, r.end)?;
                e = tape.mul_row(e, mj)?;
            }
            if let Some(p) = &vars.projections {
                e = tape.matmul(e, p[j])?;
            }
            out.push(e);
        }
        Ok(out)
    }

    /// Field embeddings concatenated in field order.
    pub fn lookup(&self, tape: &mut Tape<'_, T>, vars: &EmbeddingVars, batch: &Batch, mask: Option<Var>) -> Result<Var> {
        let parts = self.lookup_fields(tape, vars, batch, mask)?;
        tape.concat_cols(&parts)
    }

    /// Orthogonality penalty as a differentiable `1 × 1` node.
    pub fn so_penalty(&self, tape: &mut Tape<'_, T>, vars: &EmbeddingVars, normalized: bool) -> Result<Var> {
        let mut total: Option<Var> = None;
        for (j, &table) in vars.tables.iter().enumerate() {
            let d = self.tables[j].cols();
            if d == 0 {
                continue;
            }
            let v = if normalized { tape.normalize_cols(table)? } else { table };
            let vt = tape.transpose(v)?;
            let gram = tape.matmul(vt, v)?;
            let eye = tape.constant(Tensor::identity(d));
            let diff = tape.sub(gram, eye)?;
            let sq = tape.square(diff)?;
            let s = tape.sum(sq)?;
            let term = tape.scale(s, T::one() / T::of((d * d) as f64))?;
            total = Some(match total {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
        match total {
            Some(t) => Ok(t),
            None => Ok(tape.constant(Tensor::scalar(T::zero()))),
        }
    }

    /// Value of [`Self::so_penalty`] without recording gradients.
    pub fn so_penalty_value(&self, normalized: bool) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let p = self.so_penalty(&mut tape, &vars, normalized)?;
        Ok(tape.scalar(p).as_f64())
    }

    /// A layer with masked columns physically removed. Projections lose the
    /// matching input rows.
    pub fn materialize_pruned(&self, mask: &BinaryMask) -> Result<EmbeddingLayer<T>> {
        let layout = self.layout();
        if mask.len() != layout.total() {
            return Err(Error::Shape {
                op: "materialize_pruned",
                lhs: vec![layout.total()],
                rhs: vec![mask.len()],
            });
        }
        let mut tables = Vec::with_capacity(self.tables.len());
        let mut projections = self.projections.as_ref().map(|_| Vec::new());
        for (j, t) in self.tables.iter().enumerate() {
            let keep: Vec<usize> = layout
                .field_range(j)
                .enumerate()
                .filter(|&(_, s)| mask.get(s))
                .map(|(c, _)| c)
                .collect();
            tables.push(t.select_cols(&keep)?);
            if let (Some(out), Some(p)) = (&mut projections, &self.projections) {
                out.push(p[j].select_rows(&keep)?);
            }
        }
        Ok(EmbeddingLayer { tables, projections })
    }

    /// Embedding parameters `Σ_j C_j · (surviving columns of j)`.
    pub fn count_params(&self, mask: Option<&BinaryMask>) -> usize {
        let layout = self.layout();
        let live = match mask {
            Some(m) => layout.per_field(m),
            None => self.dims(),
        };
        self.tables.iter().zip(live).map(|(t, k)| t.rows() * k).sum()
    }

    /// Projection parameters that survive `mask`.
    pub fn count_projection_params(&self, mask: Option<&BinaryMask>) -> usize {
        let Some(p) = &self.projections else { return 0 };
        let layout = self.layout();
        let live = match mask {
            Some(m) => layout.per_field(m),
            None => self.dims(),
        };
        p.iter().zip(live).map(|(pj, k)| pj.cols() * k).sum()
    }

    /// Mean absolute cosine over distinct column pairs of one table; zero
    /// columns are skipped.
    pub fn mean_abs_column_cosine(&self, field: usize) -> f64 {
        let t = &self.tables[field];
        let (c, d) = (t.rows(), t.cols());
        let col = |k: usize| (0..c).map(move |i| t.at(i, k).as_f64());
        let norms: Vec<f64> = (0..d).map(|k| col(k).map(|x| x * x).sum::<f64>().sqrt()).collect();
        let mut total = 0.0;
        let mut pairs = 0usize;
        for a in 0..d {
            for b in a + 1..d {
                if norms[a] == 0.0 || norms[b] == 0.0 {
                    continue;
                }
                let dot: f64 = col(a).zip(col(b)).map(|(x, y)| x * y).sum();
                total += (dot / (norms[a] * norms[b])).abs();
                pairs += 1;
            }
        }
        if pairs == 0 {
            0.0
        } else {
            total / pairs as f64
        }
    }
}

fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out).max(1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn batch(rows: &[[usize; 2]]) -> Batch {
        Batch {
            fields: vec![rows.iter().map(|r| r[0]).collect(), rows.iter().map(|r| r[1]).collect()],
            labels: vec![0.0; rows.len()],
        }
    }

    #[test]
    fn layout_is_bijective() {
        let l = ColumnLayout::new(&[3, 0, 2]);
        assert_eq!(l.total(), 5);
        for s in 0..5 {
            let (f, c) = l.locate(s).unwrap();
            assert_eq!(l.slot(f, c).unwrap(), s);
        }
        assert!(l.locate(5).is_err());
        assert!(l.slot(1, 0).is_err());
    }

    #[test]
    fn dims_cannot_exceed_cardinality() {
        assert!(EmbeddingLayer::<f64>::init(&[3], &[4], None, &mut rng(0)).is_err());
        assert_eq!(default_dims(&[3, 40], 16), vec![3, 16]);
    }

    #[test]
    fn identity_and_zero_masks() {
        let layer = EmbeddingLayer::<f64>::init(&[5, 4], &[3, 2], None, &mut rng(1)).unwrap();
        let b = batch(&[[0, 1], [4, 3]]);
        let mut tape = Tape::new();
        let vars = layer.bind(&mut tape);
        let plain = layer.lookup(&mut tape, &vars, &b, None).unwrap();
        let ones = tape.constant(Tensor::ones(&[1, 5]));
        let masked = layer.lookup(&mut tape, &vars, &b, Some(ones)).unwrap();
        assert_eq!(tape.value(plain), tape.value(masked));

        let zero_f0 = tape.constant(Tensor::row(vec![0., 0., 0., 1., 1.]));
        let parts = layer.lookup_fields(&mut tape, &vars, &b, Some(zero_f0)).unwrap();
        assert!(tape.value(parts[0]).data().iter().all(|&x| x == 0.0));
        assert!(tape.value(parts[1]).data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn lookup_rejects_bad_index() {
        let layer = EmbeddingLayer::<f64>::init(&[2, 2], &[1, 1], None, &mut rng(1)).unwrap();
        let mut tape = Tape::new();
        let vars = layer.bind(&mut tape);
        assert!(layer.lookup(&mut tape, &vars, &batch(&[[2, 0]]), None).is_err());
    }

    #[test]
    fn lookup_gradients_match_finite_differences() {
        let layer = EmbeddingLayer::<f64>::init(&[4, 3], &[3, 2], Some(4), &mut rng(2)).unwrap();
        let b = batch(&[[0, 1], [3, 2], [0, 0]]);
        let mut inputs: Vec<Tensor> = layer.params().into_iter().cloned().collect();
        inputs.push(Tensor::row(vec![1.0, 0.3, 0.0, 1.0, 0.7]));
        let check = check_gradients(&inputs, 1e-5, |tape, v| {
            let l = EmbeddingLayer::from_parts(
                vec![tape.value(v[0]).clone(), tape.value(v[1]).clone()],
                Some(vec![tape.value(v[2]).clone(), tape.value(v[3]).clone()]),
            )?;
            let vars = EmbeddingVars {
                tables: vec![v[0], v[1]],
                projections: Some(vec![v[2], v[3]]),
            };
            l.lookup(tape, &vars, &b, Some(v[4]))
        })
        .unwrap();
        assert!(check.max_rel_error() < 1e-5, "{:?}", check.rel_errors);
    }

    #[test]
    fn so_penalty_examples() {
        let orth = Tensor::matrix(3, 2, vec![1., 0., 0., 1., 0., 0.]).unwrap();
        let layer = EmbeddingLayer::from_parts(vec![orth], None).unwrap();
        assert_eq!(layer.so_penalty_value(false).unwrap(), 0.0);

        let dup = Tensor::matrix(2, 2, vec![1., 1., 0., 0.]).unwrap();
        let layer = EmbeddingLayer::from_parts(vec![dup], None).unwrap();
        assert!((layer.so_penalty_value(false).unwrap() - 0.5).abs() < 1e-15);
        assert!((layer.so_penalty_value(true).unwrap() - 0.5).abs() < 1e-15);

        let zero_col = Tensor::matrix(2, 2, vec![1., 0., 1., 0.]).unwrap();
        let layer = EmbeddingLayer::from_parts(vec![zero_col], None).unwrap();
        assert!(layer.so_penalty_value(true).is_err());
    }

    #[test]
    fn so_penalty_gradients_match_finite_differences() {
        for normalized in [false, true] {
            for seed in 0..5 {
                let layer = EmbeddingLayer::<f64>::init(&[6, 4], &[3, 2], None, &mut rng(seed)).unwrap();
                let inputs: Vec<Tensor> = layer.params().into_iter().cloned().collect();
                let check = check_gradients(&inputs, 1e-5, |tape, v| {
                    let l = EmbeddingLayer::from_parts(vec![tape.value(v[0]).clone(), tape.value(v[1]).clone()], None)?;
                    let vars = EmbeddingVars {
                        tables: v.to_vec(),
                        projections: None,
                    };
                    l.so_penalty(tape, &vars, normalized)
                })
                .unwrap();
                assert!(check.max_rel_error() < 1e-4, "normalized={normalized}: {:?}", check.rel_errors);
            }
        }
    }

    #[test]
    fn param_counts() {
        let layer = EmbeddingLayer::<f64>::init(&[10, 5], &[4, 2], None, &mut rng(0)).unwrap();
        assert_eq!(layer.count_params(None), 50);
        let mut m = BinaryMask::ones(6);
        m.set(0, false);
        assert_eq!(layer.count_params(Some(&m)), 40);
        assert_eq!(layer.count_params(Some(&BinaryMask::zeros(6))), 0);
    }

    #[test]
    fn pruning_removes_columns_and_projection_rows() {
        let layer = EmbeddingLayer::<f64>::init(&[6, 5], &[3, 2], Some(4), &mut rng(3)).unwrap();
        let same = layer.materialize_pruned(&BinaryMask::ones(5)).unwrap();
        assert_eq!(same, layer);
        let mask = BinaryMask::from_bools(&[true, false, true, false, false]);
        let pruned = layer.materialize_pruned(&mask).unwrap();
        assert_eq!(pruned.dims(), vec![2, 0]);
        assert_eq!(pruned.projections().unwrap()[0].shape(), &[2, 4]);
        assert!(pruned.count_params(None) < layer.count_params(None));

        let b = batch(&[[5, 4], [1, 0]]);
        let mut tape = Tape::new();
        let vars = layer.bind(&mut tape);
        let m = tape.constant(Tensor::row(mask.values()));
        let full = layer.lookup(&mut tape, &vars, &b, Some(m)).unwrap();
        let pvars = pruned.bind(&mut tape);
        let small = pruned.lookup(&mut tape, &pvars, &b, None).unwrap();
        for (x, y) in tape.value(full).data().iter().zip(tape.value(small).data()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn lookup_is_linear_in_table_rows() {
        let layer = EmbeddingLayer::<f64>::init(&[4], &[3], None, &mut rng(5)).unwrap();
        let doubled = EmbeddingLayer::from_parts(vec![layer.tables()[0].map(|x| 2.0 * x)], None).unwrap();
        let b = Batch {
            fields: vec![vec![0, 3, 2]],
            labels: vec![0.0; 3],
        };
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::row(vec![1.0, 0.0, 1.0]));
        let v1 = layer.bind(&mut tape);
        let a = layer.lookup(&mut tape, &v1, &b, Some(m)).unwrap();
        let v2 = doubled.bind(&mut tape);
        let c = doubled.lookup(&mut tape, &v2, &b, Some(m)).unwrap();
        for (x, y) in tape.value(a).data().iter().zip(tape.value(c).data()) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn cosine_of_orthogonal_columns_is_zero() {
        let t = Tensor::matrix(3, 2, vec![1., 0., 0., 2., 0., 0.]).unwrap();
        let layer = EmbeddingLayer::from_parts(vec![t], None).unwrap();
        assert_eq!(layer.mean_abs_column_cosine(0), 0.0);
        let t = Tensor::matrix(2, 2, vec![1., -1., 1., -1.]).unwrap();
        let layer = EmbeddingLayer::from_parts(vec![t], None).unwrap();
        assert!((layer.mean_abs_column_cosine(0) - 1.0).abs() < 1e-12);
    }
}
