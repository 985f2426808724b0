//! Extended suite on MovieLens-1M, off by default.
//!
//! ```text
//! HAMPRUNE_ML1M_DIR=/data/ml-1m cargo test --release -p hamprune --test extended -- --ignored --nocapture
//! ```
//!
//! Runs HAM with FM at `s = 28` over five seeds with and without the
//! soft-orthogonality penalty and checks that the penalty does not lower the
//! mean test AUC. The reference gain at full scale is +0.0018.

use std::path::PathBuf;

use hamprune::data::{ingest, load_movielens, IngestOptions};
use hamprune::models::{ModelConfig, ModelKind};
use hamprune::search::{run_pipeline, SearchConfig, SoConfig, Strategy};

const REFERENCE_GAIN: f64 = 0.0018;

#[test]
#[ignore = "needs MovieLens-1M and hours of CPU time"]
fn orthogonality_gain_on_movielens() {
    let dir = PathBuf::from(std::env::var("HAMPRUNE_ML1M_DIR").expect("set HAMPRUNE_ML1M_DIR to the ml-1m folder"));
    let raw = load_movielens(&dir).unwrap();
    let splits = ingest(
        &raw,
        &IngestOptions {
            threshold: 0,
            ..IngestOptions::default()
        },
    )
    .unwrap();
    let model = ModelConfig::new(ModelKind::Fm);
    let mean_auc = |so: SoConfig| -> f64 {
        let aucs: Vec<f64> = (0..5u64)
            .map(|seed| {
                let cfg = SearchConfig {
                    target_size: 28,
                    seed,
                    so,
                    ..SearchConfig::default()
                };
                run_pipeline::<f64>(&splits, &model, &cfg, Strategy::Ham).unwrap().report.test.auc
            })
            .collect();
        aucs.iter().sum::<f64>() / aucs.len() as f64
    };
    let with_so = mean_auc(SoConfig::default());
    let without = mean_auc(SoConfig::off());
    let gain = with_so - without;
    println!("SO gain {gain:+.4} (reference {REFERENCE_GAIN:+.4}); with {with_so:.4}, without {without:.4}");
    assert!(gain >= 0.0, "SO lowered mean test AUC by {:.4}", -gain);
}
