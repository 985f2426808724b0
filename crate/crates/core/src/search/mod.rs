//! Training stages and the embedding-size search.
//!
//! A run has three stages:
//!
//! 1. **pretrain** the supernet (all base columns) with Adam on the training
//!    split, regularized by the soft-orthogonality penalty;
//! 2. **search**: alternate an `α` update on a validation batch with an Adam
//!    step on a training batch under the current mask;
//! 3. **retrain** under the frozen binary mask, then delete the masked
//!    columns and evaluate on the test split.
//!
//! For the hard mask the `α` update is
//!
//! ```text
//! α ← α − η·∂L/∂m − μ·sign(‖𝟙[α > 0]‖₁ − s)
//! ```
//!
//! where the straight-through estimator makes `∂L/∂m` the gradient with
//! respect to the mask values themselves. The last term pulls the number of
//! positive parameters toward the target `s` and can bring a pruned column
//! back when too few survive.

mod config;
mod optim;
mod pipeline;
mod stage;
mod stopping;
mod taylor;
mod train;

pub use config::{AdamConfig, SearchConfig, SoConfig, Strategy};
pub use optim::{Adam, Sgd};
pub use pipeline::{init_supernet, run_pipeline, uniform_mask, DatasetSummary, RunOutcome, RunReport, REPORT_VERSION};
pub use stage::{
    alpha_step, ham_alpha_step, initial_mask_state, mask_gradient, masked_loss, search_from, search_stage, selected_mask,
    Searched, SAM_GS_CLIP, SOFT_ALPHA_INIT, STOCHASTIC_ALPHA_INIT,
};
pub use stopping::{EarlyStopper, Progress, SearchStopper};
pub use taylor::{taylor_all, taylor_diagnostic, TaylorProbe};
pub use train::{
    evaluate, evaluate_with, pretrain, retrain, shuffled_batches, train_step, BatchCycler, EpochRecord, Retrained,
    StageReport,
};
