//! CTR prediction functions on top of (masked) embeddings.
//!
//! * **FM**: `w₀ + Σ_i w_{x_i} + Σ_{i<j} ⟨e_i, e_j⟩`, with the pairwise sum
//!   computed as `½(‖Σ e_i‖² − Σ ‖e_i‖²)`.
//! * **DeepFM**: the FM logit plus an MLP over the concatenated field
//!   embeddings.
//! * **DCN-V2**: cross layers `x_{l+1} = x₀ ⊙ (x_l W_l + b_l) + x_l` over the
//!   raw mixed-width concatenation `x₀`, then a dense head.
//!
//! Embeddings are row vectors throughout, so `x_l W_l` is the row form of
//! `W_lᵀ x_l`.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, FeatureSchema};
use crate::embeddings::{default_dims, EmbeddingLayer, EmbeddingVars, DEFAULT_BASE_DIM_CAP, DEFAULT_PROJECTION_DIM};
use crate::error::{Error, Result};
use crate::masks::BinaryMask;
use crate::numerics::{sigmoid, Scalar, Tape, Tensor, Var};

/// Rows per forward pass in [`Model::predict`].
const PREDICT_CHUNK: usize = 8192;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Fm,
    DeepFm,
    DcnV2,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Fm => "fm",
            ModelKind::DeepFm => "deep-fm",
            ModelKind::DcnV2 => "dcn-v2",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Per-field base dims; `min(base_dim_cap, C_j)` when absent.
    pub dims: Option<Vec<usize>>,
    pub base_dim_cap: usize,
    /// Common width of projected embeddings. FM and DeepFM only.
    pub projection_dim: usize,
    /// Hidden widths of the DeepFM MLP.
    pub hidden: Vec<usize>,
    pub cross_layers: usize,
    /// Hidden widths of the DCN-V2 head; empty means a linear head.
    pub head: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::new(ModelKind::Fm)
    }
}

impl ModelConfig {
    pub fn new(kind: ModelKind) -> Self {
        ModelConfig {
            kind,
            dims: None,
            base_dim_cap: DEFAULT_BASE_DIM_CAP,
            projection_dim: DEFAULT_PROJECTION_DIM,
            hidden: vec![64, 64],
            cross_layers: 2,
            head: Vec::new(),
        }
    }

    pub fn with_dims(mut self, dims: Vec<usize>) -> Self {
        self.dims = Some(dims);
        self
    }

    pub fn resolved_dims(&self, cardinalities: &[usize]) -> Vec<usize> {
        self.dims
            .clone()
            .unwrap_or_else(|| default_dims(cardinalities, self.base_dim_cap))
    }
}

/// Affine layer `x W + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Dense<T: Scalar = f64> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
        Dense {
            w: Tensor::uniform(&[fan_in, fan_out], bound, rng),
            b: Tensor::zeros(&[1, fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            w: Tensor::zeros(&[fan_in, fan_out]),
            b: Tensor::zeros(&[1, fan_out]),
        }
    }

    fn forward(tape: &mut Tape<'_, T>, w: Var, b: Var, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, w)?;
        tape.add_row(xw, b)
    }
}

fn mlp<T: Scalar, R: Rng + ?Sized>(input: usize, hidden: &[usize], rng: &mut R) -> Vec<Dense<T>> {
    let mut layers = Vec::with_capacity(hidden.len() + 1);
    let mut width = input;
    for &h in hidden {
        layers.push(Dense::init(width, h, rng));
        width = h;
    }
    layers.push(Dense::init(width, 1, rng));
    layers
}

/// Tape handles of a bound [`Model`], in [`Model::params`] order.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub embeddings: EmbeddingVars,
    pub bias: Option<Var>,
    pub first_order: Vec<Var>,
    pub cross: Vec<(Var, Var)>,
    pub dense: Vec<(Var, Var)>,
}

impl ModelVars {
    pub fn all(&self) -> Vec<Var> {
        let mut out = self.embeddings.tables.clone();
        if let Some(p) = &self.embeddings.projections {
            out.extend(p);
        }
        out.extend(self.bias);
        out.extend(&self.first_order);
        for &(w, b) in self.cross.iter().chain(&self.dense) {
            out.push(w);
            out.push(b);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub embedding: usize,
    pub projection: usize,
    pub first_order: usize,
    pub network: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Model<T: Scalar = f64> {
    config: ModelConfig,
    embeddings: EmbeddingLayer<T>,
    /// `w₀` as a `1 × 1` tensor (FM, DeepFM).
    bias: Option<Tensor<T>>,
    /// Per-field `C_j × 1` first-order weights (FM, DeepFM).
    first_order: Vec<Tensor<T>>,
    /// DCN-V2 cross layers.
    cross: Vec<Dense<T>>,
    /// DeepFM MLP or DCN-V2 head; the last layer has width 1.
    dense: Vec<Dense<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, cardinalities: &[usize], rng: &mut R) -> Result<Self> {
        let dims = config.resolved_dims(cardinalities);
        let projected = matches!(config.kind, ModelKind::Fm | ModelKind::DeepFm);
        let embeddings =
            EmbeddingLayer::init(cardinalities, &dims, projected.then_some(config.projection_dim), rng)?;
        let k = cardinalities.len();
        let (bias, first_order, cross, dense) = match config.kind {
            ModelKind::Fm => (
                Some(Tensor::zeros(&[1, 1])),
                cardinalities.iter().map(|&c| Tensor::zeros(&[c, 1])).collect(),
                Vec::new(),
                Vec::new(),
            ),
            ModelKind::DeepFm => (
                Some(Tensor::zeros(&[1, 1])),
                cardinalities.iter().map(|&c| Tensor::zeros(&[c, 1])).collect(),
                Vec::new(),
                mlp(k * config.projection_dim, &config.hidden, rng),
            ),
            ModelKind::DcnV2 => {
                let n: usize = dims.iter().sum();
                let cross = (0..config.cross_layers).map(|_| Dense::init(n, n, rng)).collect();
                (None, Vec::new(), cross, mlp(n, &config.head, rng))
            }
        };
        Ok(Model {
            config: config.clone(),
            embeddings,
            bias,
            first_order,
            cross,
            dense,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn embeddings(&self) -> &EmbeddingLayer<T> {
        &self.embeddings
    }

    pub fn embeddings_mut(&mut self) -> &mut EmbeddingLayer<T> {
        &mut self.embeddings
    }

    pub fn dense_mut(&mut self) -> &mut [Dense<T>] {
        &mut self.dense
    }

    pub fn cross_mut(&mut self) -> &mut [Dense<T>] {
        &mut self.cross
    }

    pub fn first_order_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.first_order
    }

    /// Width of the flat mask space.
    pub fn num_columns(&self) -> usize {
        self.embeddings.dims().iter().sum()
    }

    /// All trainable tensors in a fixed order: tables, projections, bias,
    /// first-order weights, cross layers, dense layers.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = self.embeddings.params();
        out.extend(self.bias.as_ref());
        out.extend(&self.first_order);
        for l in self.cross.iter().chain(&self.dense) {
            out.push(&l.w);
            out.push(&l.b);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.embeddings.params_mut();
        out.extend(self.bias.as_mut());
        out.extend(self.first_order.iter_mut());
        for l in self.cross.iter_mut().chain(self.dense.iter_mut()) {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>) -> ModelVars {
        self.bind_as(tape, true)
    }

    /// Binds all parameters as differentiable leaves or, with `trainable`
    /// false, as constants.
    pub fn bind_as<'a>(&'a self, tape: &mut Tape<'a, T>, trainable: bool) -> ModelVars {
        let embeddings = self.embeddings.bind_as(tape, trainable);
        let mut put = |t: &'a Tensor<T>| if trainable { tape.leaf_ref(t) } else { tape.constant_ref(t) };
        let bias = self.bias.as_ref().map(&mut put);
        let first_order = self.first_order.iter().map(&mut put).collect();
        let mut pair = |l: &'a Dense<T>| (put(&l.w), put(&l.b));
        let cross = self.cross.iter().map(&mut pair).collect();
        let dense = self.dense.iter().map(&mut pair).collect();
        ModelVars {
            embeddings,
            bias,
            first_order,
            cross,
            dense,
        }
    }

    /// Handles for parameters already on a tape, given in [`Self::params`]
    /// order. The tape values must have this model's shapes.
    pub fn vars_from(&self, vars: &[Var]) -> Result<ModelVars> {
        if vars.len() != self.params().len() {
            return Err(Error::invalid(format!(
                "{} handles for {} parameters",
                vars.len(),
                self.params().len()
            )));
        }
        let mut it = vars.iter().copied();
        let mut take = |n: usize| -> Vec<Var> { it.by_ref().take(n).collect() };
        let k = self.embeddings.num_fields();
        let tables = take(k);
        let projections = self.embeddings.projections().map(|_| take(k));
        let bias = self.bias.as_ref().map(|_| take(1)[0]);
        let first_order = take(self.first_order.len());
        let mut pairs = |n: usize| -> Vec<(Var, Var)> { take(2 * n).chunks(2).map(|c| (c[0], c[1])).collect() };
        let cross = pairs(self.cross.len());
        let dense = pairs(self.dense.len());
        Ok(ModelVars {
            embeddings: EmbeddingVars { tables, projections },
            bias,
            first_order,
            cross,
            dense,
        })
    }

    /// `B × 1` logits for `batch`. `mask` is a `1 × S` node or `None`.
    pub fn logits(&self, tape: &mut Tape<'_, T>, vars: &ModelVars, batch: &Batch, mask: Option<Var>) -> Result<Var> {
        match self.config.kind {
            ModelKind::Fm => {
                let fields = self.embeddings.lookup_fields(tape, &vars.embeddings, batch, mask)?;
                self.fm_logit(tape, vars, batch, &fields)
            }
            ModelKind::DeepFm => {
                let fields = self.embeddings.lookup_fields(tape, &vars.embeddings, batch, mask)?;
                let fm = self.fm_logit(tape, vars, batch, &fields)?;
                let x = tape.concat_cols(&fields)?;
                let deep = self.run_dense(tape, vars, x)?;
                tape.add(fm, deep)
            }
            ModelKind::DcnV2 => {
                let x0 = self.embeddings.lookup(tape, &vars.embeddings, batch, mask)?;
                let mut x = x0;
                for &(w, b) in &vars.cross {
                    let lin = Dense::forward(tape, w, b, x)?;
                    let crossed = tape.hadamard(x0, lin)?;
                    x = tape.add(crossed, x)?;
                }
                self.run_dense(tape, vars, x)
            }
        }
    }

    fn fm_logit(&self, tape: &mut Tape<'_, T>, vars: &ModelVars, batch: &Batch, fields: &[Var]) -> Result<Var> {
        let width = tape.value(fields[0]).cols();
        for &f in fields {
            if tape.value(f).cols() != width {
                return Err(Error::Shape {
                    op: "fm",
                    lhs: tape.value(fields[0]).shape().to_vec(),
                    rhs: tape.value(f).shape().to_vec(),
                });
            }
        }
        let inter = fm_interaction(tape, fields)?;
        let mut logit = inter;
        for (j, &w) in vars.first_order.iter().enumerate() {
            let wj = tape.gather_rows(w, batch.fields[j].clone())?;
            logit = tape.add(logit, wj)?;
        }
        match vars.bias {
            Some(b) => tape.add_row(logit, b),
            None => Ok(logit),
        }
    }

    fn run_dense(&self, tape: &mut Tape<'_, T>, vars: &ModelVars, mut x: Var) -> Result<Var> {
        let last = vars.dense.len() - 1;
        for (i, &(w, b)) in vars.dense.iter().enumerate() {
            x = Dense::forward(tape, w, b, x)?;
            if i < last {
                x = tape.relu(x)?;
            }
        }
        Ok(x)
    }

    /// Mean logloss node of `batch` under `mask`.
    pub fn loss(&self, tape: &mut Tape<'_, T>, vars: &ModelVars, batch: &Batch, mask: Option<Var>) -> Result<Var> {
        let z = self.logits(tape, vars, batch, mask)?;
        tape.logloss_with_logits(z, batch.labels.iter().map(|&y| T::of(y)).collect())
    }

    /// Click probabilities for every row of `batch`.
    pub fn predict(&self, batch: &Batch, mask: Option<&BinaryMask>) -> Result<Vec<f64>> {
        let values = mask.map(BinaryMask::values);
        self.predict_with(batch, values.as_deref())
    }

    /// Click probabilities under real-valued mask values.
    pub fn predict_with(&self, batch: &Batch, mask: Option<&[f64]>) -> Result<Vec<f64>> {
        let n = batch.len();
        let mut out = Vec::with_capacity(n);
        let mask_row = mask.map(|m| Tensor::row(m.iter().map(|&x| T::of(x)).collect()));
        let mut start = 0;
        while start < n {
            let end = (start + PREDICT_CHUNK).min(n);
            let chunk = Batch {
                fields: batch.fields.iter().map(|c| c[start..end].to_vec()).collect(),
                labels: batch.labels[start..end].to_vec(),
            };
            let mut tape = Tape::new();
            let vars = self.bind_as(&mut tape, false);
            let m = mask_row.as_ref().map(|r| tape.constant_ref(r));
            let z = self.logits(&mut tape, &vars, &chunk, m)?;
            out.extend(tape.value(z).data().iter().map(|&x| sigmoid(x).as_f64()));
            start = end;
        }
        Ok(out)
    }

    /// A smaller model whose forward pass equals this model's forward pass
    /// under `mask`: masked columns, the matching projection rows and, for
    /// DCN-V2, the matching cross-layer rows/columns and head inputs are
    /// deleted.
    pub fn materialize_pruned(&self, mask: &BinaryMask) -> Result<Model<T>> {
        let embeddings = self.embeddings.materialize_pruned(mask)?;
        let keep: Vec<usize> = (0..mask.len()).filter(|&i| mask.get(i)).collect();
        let mut cross = Vec::with_capacity(self.cross.len());
        for l in &self.cross {
            cross.push(Dense {
                w: l.w.select_rows(&keep)?.select_cols(&keep)?,
                b: l.b.select_cols(&keep)?,
            });
        }
        let mut dense = self.dense.clone();
        if self.config.kind == ModelKind::DcnV2 {
            dense[0].w = dense[0].w.select_rows(&keep)?;
        }
        let mut config = self.config.clone();
        config.dims = Some(embeddings.dims());
        Ok(Model {
            config,
            embeddings,
            bias: self.bias.clone(),
            first_order: self.first_order.clone(),
            cross,
            dense,
        })
    }

    /// Parameter counts of the model as it would be stored after pruning
    /// by `mask`.
    pub fn param_counts(&self, mask: Option<&BinaryMask>) -> Result<ParamCounts> {
        let pruned;
        let m = match mask {
            Some(mask) => {
                pruned = self.materialize_pruned(mask)?;
                &pruned
            }
            None => self,
        };
        let embedding = m.embeddings.count_params(None);
        let projection = m.embeddings.count_projection_params(None);
        let first_order = m.first_order.iter().map(Tensor::len).sum::<usize>();
        let network = m.bias.as_ref().map_or(0, Tensor::len)
            + m.cross.iter().chain(&m.dense).map(|l| l.w.len() + l.b.len()).sum::<usize>();
        Ok(ParamCounts {
            embedding,
            projection,
            first_order,
            network,
            total: embedding + projection + first_order + network,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|t| t.is_finite())
    }
}

/// `Σ_{i<j} ⟨e_i, e_j⟩` per row via `½(‖Σ e_i‖² − Σ ‖e_i‖²)`.
pub fn fm_interaction<T: Scalar>(tape: &mut Tape<'_, T>, fields: &[Var]) -> Result<Var> {
    let mut total = fields[0];
    let sq0 = tape.square(fields[0])?;
    let mut self_sq = tape.row_sum(sq0)?;
    for &f in &fields[1..] {
        total = tape.add(total, f)?;
        let sq = tape.square(f)?;
        let rs = tape.row_sum(sq)?;
        self_sq = tape.add(self_sq, rs)?;
    }
    let tsq = tape.square(total)?;
    let sum_sq = tape.row_sum(tsq)?;
    let diff = tape.sub(sum_sq, self_sq)?;
    tape.scale(diff, T::of(0.5))
}

const CHECKPOINT_VERSION: u32 = 1;

/// Model weights tied to the schema they were trained on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Checkpoint<T: Scalar = f64> {
    pub version: u32,
    pub schema_fingerprint: String,
    pub model: Model<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(model: Model<T>, schema: &FeatureSchema) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            schema_fingerprint: schema.fingerprint(),
            model,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    /// Loads a checkpoint and checks it against `schema`.
    pub fn load(path: &Path, schema: &FeatureSchema) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
        let ckpt: Checkpoint<T> = serde_json::from_reader(std::io::BufReader::new(file))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {}", ckpt.version)));
        }
        if ckpt.schema_fingerprint != schema.fingerprint() {
            return Err(Error::Data("checkpoint was trained on a different schema".into()));
        }
        Ok(ckpt)
    }
}
