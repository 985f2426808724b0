use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::numerics::Scalar;

use super::stage::{mask_gradient, masked_loss};

/// First-order importance of one embedding column next to its exact value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaylorProbe {
    /// `∂L/∂m_c` at the all-ones mask: what the straight-through estimator
    /// hands to `α_c`.
    pub ste_grad: f64,
    /// `L(m = 1) − L(m_c = 0)`: the loss change from keeping the column.
    pub loss_delta: f64,
}

/// STE gradient and exact keep-versus-drop loss difference of `column` on
/// `batch`.
pub fn taylor_diagnostic<T: Scalar>(model: &Model<T>, column: usize, batch: &Batch) -> Result<TaylorProbe> {
    let s = model.num_columns();
    if column >= s {
        return Err(Error::IndexOutOfRange {
            what: "embedding column".into(),
            index: column,
            size: s,
        });
    }
    let ones = vec![1.0; s];
    let (on, g) = mask_gradient(model, batch, &ones, false)?;
    Ok(TaylorProbe {
        ste_grad: g[column],
        loss_delta: on - loss_without(model, batch, column)?,
    })
}

/// [`taylor_diagnostic`] for every column, sharing one gradient pass.
pub fn taylor_all<T: Scalar>(model: &Model<T>, batch: &Batch) -> Result<Vec<TaylorProbe>> {
    let s = model.num_columns();
    let (on, g) = mask_gradient(model, batch, &vec![1.0; s], false)?;
    (0..s)
        .map(|c| {
            Ok(TaylorProbe {
                ste_grad: g[c],
                loss_delta: on - loss_without(model, batch, c)?,
            })
        })
        .collect()
}

fn loss_without<T: Scalar>(model: &Model<T>, batch: &Batch, column: usize) -> Result<f64> {
    let mut mask = vec![1.0; model.num_columns()];
    mask[column] = 0.0;
    masked_loss(model, batch, &mask)
}
