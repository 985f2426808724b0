use std::cmp::Ordering;
use std::time::Instant;

use rand::Rng;

use crate::data::{Batch, Splits};
use crate::error::{Error, Result};
use crate::masks::{BinaryMask, MaskState, MaskStrategy};
use crate::models::Model;
use crate::numerics::{Scalar, Tape, Tensor};

use super::config::{SearchConfig, Strategy};
use super::optim::{Adam, Sgd};
use super::stopping::SearchStopper;
use super::train::{diverged, evaluate, shuffled_batches, stream_rng, streams, train_step, BatchCycler, EpochRecord, StageReport};

/// Initial auxiliary value of the soft and stochastic strategies.
pub const SOFT_ALPHA_INIT: f64 = 1.0;
pub const STOCHASTIC_ALPHA_INIT: f64 = 0.5;
/// SAM-GS parameters are kept inside `[c, 1 − c]` so the logit stays finite.
pub const SAM_GS_CLIP: f64 = 1e-4;

/// The penalized hard-mask update
///
/// ```text
/// α ← α − η·g − μ·sign(‖𝟙[α > 0]‖₁ − s)
/// ```
///
/// with `sign(0) = 0`, applied in place.
pub fn alpha_step(alpha: &mut [f64], grads: &[f64], lr: f64, mu: f64, target: usize) -> Result<()> {
    if alpha.len() != grads.len() {
        return Err(Error::Shape {
            op: "alpha_step",
            lhs: vec![alpha.len()],
            rhs: vec![grads.len()],
        });
    }
    let count = alpha.iter().filter(|&&a| a > 0.0).count();
    let sign = match count.cmp(&target) {
        Ordering::Greater => 1.0,
        Ordering::Less => -1.0,
        Ordering::Equal => 0.0,
    };
    for (a, g) in alpha.iter_mut().zip(grads) {
        *a = *a - lr * g - mu * sign;
    }
    Ok(())
}

/// [`alpha_step`] on the parameters of a hard-mask state.
pub fn ham_alpha_step(state: &mut MaskState, grads: &[f64], cfg: &SearchConfig) -> Result<()> {
    let mut alpha = state.alpha().to_vec();
    alpha_step(&mut alpha, grads, cfg.alpha_lr, cfg.mu, cfg.target_size)?;
    state.set_alpha(alpha)
}

/// Loss of `batch` under mask values `mask` and its gradient with respect to
/// those values. Model weights are held fixed.
pub fn mask_gradient<T: Scalar>(model: &Model<T>, batch: &Batch, mask: &[f64], finite_check: bool) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new().with_finite_check(finite_check);
    let vars = model.bind_as(&mut tape, false);
    let m = tape.leaf(Tensor::row(mask.iter().map(|&x| T::of(x)).collect()));
    let loss = model.loss(&mut tape, &vars, batch, Some(m))?;
    let value = tape.scalar(loss).as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("validation loss {value}")));
    }
    let mut grads = tape.backward(loss)?;
    let g = grads.take_or_zeros(m, &[1, mask.len()]);
    Ok((value, g.data().iter().map(|x| x.as_f64()).collect()))
}

/// Mean logloss of `batch` under mask values `mask`, computed exactly as the
/// training objective.
pub fn masked_loss<T: Scalar>(model: &Model<T>, batch: &Batch, mask: &[f64]) -> Result<f64> {
    let row = Tensor::row(mask.iter().map(|&x| T::of(x)).collect());
    let mut tape = Tape::new();
    let vars = model.bind_as(&mut tape, false);
    let m = tape.constant_ref(&row);
    let loss = model.loss(&mut tape, &vars, batch, Some(m))?;
    Ok(tape.scalar(loss).as_f64())
}

/// Mask strategy and initial state for a searched strategy.
pub fn initial_mask_state(strategy: Strategy, columns: usize, cfg: &SearchConfig) -> Result<MaskState> {
    let seed = stream_rng(cfg.seed, streams::MASK_NOISE).random::<u64>();
    let (kind, init) = match strategy {
        Strategy::Ham => (MaskStrategy::Ham, cfg.epsilon),
        Strategy::Sam => (MaskStrategy::Sam, SOFT_ALPHA_INIT),
        Strategy::SamGs => (
            MaskStrategy::SamGs {
                temperature: cfg.gs_temperature,
            },
            STOCHASTIC_ALPHA_INIT,
        ),
        Strategy::HamP => (
            MaskStrategy::HamP {
                estimator: cfg.hamp_estimator,
                p_min: cfg.p_min,
                temperature: cfg.gs_temperature,
            },
            STOCHASTIC_ALPHA_INIT,
        ),
        Strategy::Uniform => return Err(Error::invalid("uniform sizing has no search stage")),
    };
    MaskState::new(kind, columns, init, seed)
}

/// Binary mask a strategy would hand to retraining right now: the sign of
/// `α` for the hard mask, the top-`s` parameters otherwise.
pub fn selected_mask(state: &MaskState, target: usize) -> Result<BinaryMask> {
    match state.strategy() {
        MaskStrategy::Ham => state.sign_mask(),
        _ => state.select_top_s(target),
    }
}

/// Outcome of the search stage.
#[derive(Clone, Debug)]
pub struct Searched<T: Scalar = f64> {
    /// Weights after the last search iteration.
    pub model: Model<T>,
    pub state: MaskState,
    /// Mask for retraining.
    pub mask: BinaryMask,
    pub report: StageReport,
    /// The stopper fired before the epoch budget ran out.
    pub stopped_early: bool,
}

/// Alternating search: each iteration updates `α` on one validation batch,
/// then the model weights on one training batch under the updated mask.
pub fn search_stage<T: Scalar>(model: Model<T>, splits: &Splits, cfg: &SearchConfig, strategy: Strategy) -> Result<Searched<T>> {
    let state = initial_mask_state(strategy, model.num_columns(), cfg)?;
    search_from(model, state, splits, cfg)
}

/// [`search_stage`] from an explicit starting mask state.
pub fn search_from<T: Scalar>(mut model: Model<T>, mut state: MaskState, splits: &Splits, cfg: &SearchConfig) -> Result<Searched<T>> {
    let columns = model.num_columns();
    cfg.validate(columns)?;
    if state.len() != columns {
        return Err(Error::Shape {
            op: "search",
            lhs: vec![columns],
            rhs: vec![state.len()],
        });
    }
    let start = Instant::now();
    let mut report = StageReport::new("search");
    let mut opt = Adam::new(cfg.adam, &model.params());
    let mut train_rng = stream_rng(cfg.seed, streams::SEARCH_TRAIN);
    let mut val_rows = BatchCycler::new(splits.val.len(), cfg.batch_size, stream_rng(cfg.seed, streams::SEARCH_VAL));
    let mut stopper = SearchStopper::new(cfg.search_window, cfg.search_auc_tol, cfg.search_auc_evals);
    let so = cfg.so.all_stages.then_some(cfg.so);
    let hard = state.strategy() == MaskStrategy::Ham;
    let sgd = Sgd {
        lr: cfg.baseline_alpha_lr,
    };
    let mut stopped_early = false;

    'epochs: for epoch in 0..cfg.search_epochs {
        let batches = shuffled_batches(splits.train.len(), cfg.batch_size, &mut train_rng);
        let eval_at = eval_points(batches.len(), cfg.search_evals_per_epoch);
        let (mut loss_sum, mut rows_seen) = (0.0, 0usize);
        for (step, rows) in batches.iter().enumerate() {
            let at = |e: Error| diverged(e, "search", epoch, step);

            let vbatch = splits.val.batch(val_rows.next_rows());
            let m = state.forward_mask().map_err(at)?;
            let (_, g) = mask_gradient(&model, &vbatch, &m, cfg.finite_check).map_err(at)?;
            let ga = state.backward_mask(&g)?;
            if hard {
                ham_alpha_step(&mut state, &ga, cfg).map_err(at)?;
            } else {
                let mut alpha = state.alpha().to_vec();
                sgd.step(&mut alpha, &ga).map_err(at)?;
                if matches!(state.strategy(), MaskStrategy::SamGs { .. }) {
                    alpha.iter_mut().for_each(|a| *a = a.clamp(SAM_GS_CLIP, 1.0 - SAM_GS_CLIP));
                }
                state.set_alpha(alpha)?;
            }

            let m = state.forward_mask().map_err(at)?;
            let batch = splits.train.batch(rows);
            let loss = train_step(&mut model, &mut opt, &batch, Some(&m), so, cfg.finite_check).map_err(at)?;
            loss_sum += loss * rows.len() as f64;
            rows_seen += rows.len();
            report.steps += 1;

            if eval_at.contains(&step) {
                let selection = selected_mask(&state, cfg.target_size)?;
                let val = evaluate(&model, &splits.val, Some(&selection))?;
                let count = state.positive_count();
                log::debug!("search epoch {epoch} step {step}: {count} positive, val auc {:.5}", val.auc);
                report.epochs.push(EpochRecord {
                    epoch,
                    train_loss: loss_sum / rows_seen.max(1) as f64,
                    val,
                    mask_size: Some(if hard { count } else { selection.count() }),
                });
                (loss_sum, rows_seen) = (0.0, 0);
                if hard && stopper.observe(count, cfg.target_size, val.auc) {
                    stopped_early = true;
                    break 'epochs;
                }
            }
        }
    }
    report.seconds = start.elapsed().as_secs_f64();
    let mask = selected_mask(&state, cfg.target_size)?;
    Ok(Searched {
        model,
        state,
        mask,
        report,
        stopped_early,
    })
}

/// Steps after which to evaluate so that `per_epoch` evaluations spread
/// evenly over `n` steps, the last one at the end of the epoch.
fn eval_points(n: usize, per_epoch: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (1..=per_epoch)
        .map(|k| (k * n).div_ceil(per_epoch))
        .filter(|&p| p > 0)
        .map(|p| p - 1)
        .collect();
    out.dedup();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_step_examples() {
        let mut a = [0.01, 0.01];
        alpha_step(&mut a, &[0.5, -0.2], 1e-3, 5e-5, 1).unwrap();
        assert!((a[0] - 0.00945).abs() < 1e-17 && (a[1] - 0.01015).abs() < 1e-17, "{a:?}");

        // Count equals target: plain gradient step.
        let mut a = [0.3, -0.1];
        alpha_step(&mut a, &[1.0, 2.0], 0.1, 5e-5, 1).unwrap();
        assert_eq!(a, [0.3 - 0.1, -0.1 - 0.1 * 2.0]);

        // Zero gradient above target: uniform drift by μ.
        let mut a = [0.3, 0.2, -0.5];
        alpha_step(&mut a, &[0.0; 3], 1e-3, 5e-5, 1).unwrap();
        assert_eq!(a, [0.3 - 5e-5, 0.2 - 5e-5, -0.5 - 5e-5]);

        // Below target: drift up.
        let mut a = [-0.3];
        alpha_step(&mut a, &[0.0], 1e-3, 0.1, 1).unwrap();
        assert_eq!(a, [-0.3 + 0.1]);
        assert!(alpha_step(&mut a, &[0.0, 1.0], 1e-3, 0.1, 1).is_err());
    }

    #[test]
    fn eval_points_spread() {
        assert_eq!(eval_points(10, 1), vec![9]);
        assert_eq!(eval_points(10, 2), vec![4, 9]);
        assert_eq!(eval_points(3, 5), vec![0, 1, 2]);
        assert_eq!(eval_points(0, 2), Vec::<usize>::new());
    }

    #[test]
    fn masked_columns_can_return() {
        // One column is pushed below zero by its gradient, then brought
        // back by the drift once the count falls below target.
        let mut alpha = vec![0.01, 0.01, 0.01];
        let lr = 1e-3;
        alpha_step(&mut alpha, &[20.0, 0.0, 0.0], lr, 1e-3, 3).unwrap();
        assert!(alpha[0] < 0.0);
        let mut t = 0;
        while alpha[0] <= 0.0 {
            alpha_step(&mut alpha, &[0.0; 3], lr, 1e-3, 3).unwrap();
            t += 1;
            assert!(t < 100);
        }
        assert_eq!(alpha.iter().filter(|&&a| a > 0.0).count(), 3);
    }

    proptest::proptest! {
        #[test]
        fn drift_moves_count_toward_target(
            alpha in proptest::collection::vec(-0.05f64..0.05, 1..24),
            target in 0usize..24,
            steps in 1usize..50,
        ) {
            let target = target.min(alpha.len());
            let mut a = alpha;
            let zeros = vec![0.0; a.len()];
            let mut count = a.iter().filter(|&&x| x > 0.0).count();
            for _ in 0..steps {
                alpha_step(&mut a, &zeros, 1e-3, 5e-4, target).unwrap();
                let next = a.iter().filter(|&&x| x > 0.0).count();
                if count > target { proptest::prop_assert!(next <= count); }
                if count < target { proptest::prop_assert!(next >= count); }
                count = next;
            }
        }
    }
}
