//! Central finite-difference oracle for tape gradients.
//!
//! The numeric side only ever runs forward passes, so it stays independent
//! of the backward rules it is checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Outcome of [`check_gradients`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Norm-wise relative error `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` per input.
    pub rel_errors: Vec<f64>,
    pub analytic: Vec<Tensor<f64>>,
    pub numeric: Vec<Tensor<f64>>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares reverse-mode gradients of `f` against central differences with
/// step `h`. A non-scalar output is scalarized with fixed weights in
/// `[0.5, 1.5]` so that every output entry is probed; a `1 × 1` output is
/// used as is.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let objective = |values: &[Tensor<f64>], want_grads: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let shape = tape.value(out).shape().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let n: usize = shape.iter().product();
        let w: Vec<f64> = if n == 1 {
            vec![1.0]
        } else {
            (0..n).map(|_| rng.random_range(0.5..1.5)).collect()
        };
        let w = tape.constant(Tensor::new(shape, w)?);
        let weighted = tape.hadamard(out, w)?;
        let root = tape.sum(weighted)?;
        let value = tape.scalar(root);
        if !want_grads {
            return Ok((value, Vec::new()));
        }
        let mut grads = tape.backward(root)?;
        let g = vars
            .iter()
            .zip(values)
            .map(|(&v, t)| grads.take_or_zeros(v, t.shape()))
            .collect();
        Ok((value, g))
    };

    let (_, analytic) = objective(inputs, true)?;
    let mut numeric = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for k in 0..inputs[i].len() {
            let orig = inputs[i].data()[k];
            probe[i].data_mut()[k] = orig + h;
            let (up, _) = objective(&probe, false)?;
            probe[i].data_mut()[k] = orig - h;
            let (down, _) = objective(&probe, false)?;
            probe[i].data_mut()[k] = orig;
            g.data_mut()[k] = (up - down) / (2.0 * h);
        }
        numeric.push(g);
    }

    let rel_errors = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a.data(), n.data()))
        .collect();
    Ok(GradCheck {
        rel_errors,
        analytic,
        numeric,
    })
}

/// Norm-wise relative difference; zero when both vectors vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}
