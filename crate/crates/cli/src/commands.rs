use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use hamprune::data::{write_splits, Splits};
use hamprune::masks::{top_s, BinaryMask, MaskState};
use hamprune::models::{Checkpoint, Model};
use hamprune::numerics::Scalar;
use hamprune::oracle::{enumerate_best_mask, MAX_ORACLE_COLUMNS};
use hamprune::search::{
    init_supernet, pretrain, retrain, run_pipeline, search_stage, uniform_mask, RunReport, SearchConfig, StageReport,
    Strategy,
};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Precision};
use crate::error::CliError;

/// Which part of a run to execute. Partial stages hand over through files
/// in the output directory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Stage {
    Pretrain,
    Search,
    Retrain,
    All,
}

/// Output file names of one `(strategy, s, seed)` run.
pub struct Artifacts {
    stem: PathBuf,
}

impl Artifacts {
    pub fn new(out_dir: &Path, strategy: Strategy, target: usize, seed: u64) -> Self {
        Artifacts {
            stem: out_dir.join(format!("{strategy}-s{target}-seed{seed}")),
        }
    }

    fn with(&self, suffix: &str) -> PathBuf {
        let mut name = self.stem.clone().into_os_string();
        name.push(suffix);
        PathBuf::from(name)
    }

    pub fn report(&self) -> PathBuf {
        self.with(".report.json")
    }

    pub fn metrics(&self) -> PathBuf {
        self.with(".metrics.csv")
    }

    pub fn pretrained(&self) -> PathBuf {
        self.with(".pretrained.ckpt.json")
    }

    pub fn searched(&self) -> PathBuf {
        self.with(".searched.ckpt.json")
    }

    pub fn pruned(&self) -> PathBuf {
        self.with(".pruned.ckpt.json")
    }

    /// Hand-over record between staged invocations.
    pub fn stages(&self) -> PathBuf {
        self.with(".stages.json")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct StageLog {
    stages: Vec<StageReport>,
    search: Option<SearchLog>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SearchLog {
    state: MaskState,
    stopped_early: bool,
    mask: String,
}

fn read_json<D: serde::de::DeserializeOwned>(path: &Path, hint: &str) -> Result<D, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e} ({hint})", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), CliError> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), value)?;
    Ok(())
}

fn seed_config(cfg: &ExperimentConfig, seed: u64) -> SearchConfig {
    SearchConfig {
        seed,
        ..cfg.search.clone()
    }
}

/// Rejects search settings that cannot fit the model before any work starts.
fn check_sizes(cfg: &ExperimentConfig, splits: &Splits) -> Result<usize, CliError> {
    let columns: usize = cfg.model.resolved_dims(&splits.schema.cardinalities()).iter().sum();
    cfg.search.validate(columns).map_err(CliError::config_from)?;
    Ok(columns)
}

/// Executes `stage` for every configured seed and returns the reports written.
pub fn run(cfg: &ExperimentConfig, stage: Stage) -> Result<Vec<PathBuf>, CliError> {
    let splits = cfg.data.load()?;
    check_sizes(cfg, &splits)?;
    if stage == Stage::Search && cfg.strategy == Strategy::Uniform {
        return Err(CliError::Config("uniform sizing has no search stage".into()));
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut written = Vec::new();
    for &seed in &cfg.seeds {
        let path = match cfg.precision {
            Precision::F64 => run_seed::<f64>(cfg, &splits, seed, stage)?,
            Precision::F32 => run_seed::<f32>(cfg, &splits, seed, stage)?,
        };
        written.extend(path);
    }
    Ok(written)
}

fn run_seed<T: Scalar>(cfg: &ExperimentConfig, splits: &Splits, seed: u64, stage: Stage) -> Result<Option<PathBuf>, CliError> {
    let sc = seed_config(cfg, seed);
    let files = Artifacts::new(&cfg.out_dir, cfg.strategy, sc.target_size, seed);
    let schema = &splits.schema;
    match stage {
        Stage::All => {
            let out = run_pipeline::<T>(splits, &cfg.model, &sc, cfg.strategy)?;
            Checkpoint::new(out.pretrained, schema).save(&files.pretrained())?;
            if let Some(found) = out.searched {
                Checkpoint::new(found.model, schema).save(&files.searched())?;
            }
            Checkpoint::new(out.retrained.pruned, schema).save(&files.pruned())?;
            finish(&files, &out.report)
        }
        Stage::Pretrain => {
            let model: Model<T> = init_supernet(&cfg.model, &schema.cardinalities(), &sc)?;
            let (pretrained, report) = pretrain(model, splits, &sc)?;
            Checkpoint::new(pretrained, schema).save(&files.pretrained())?;
            let log = StageLog {
                stages: vec![report],
                search: None,
            };
            write_json(&files.stages(), &log)?;
            log::info!("seed {seed}: pretrained checkpoint at {}", files.pretrained().display());
            Ok(None)
        }
        Stage::Search => {
            let mut log: StageLog = read_json(&files.stages(), "run --stage pretrain first")?;
            log.stages.retain(|s| s.stage == "pretrain");
            let pretrained = Checkpoint::<T>::load(&files.pretrained(), schema)?.model;
            let found = search_stage(pretrained, splits, &sc, cfg.strategy)?;
            Checkpoint::new(found.model, schema).save(&files.searched())?;
            log.stages.push(found.report);
            log.search = Some(SearchLog {
                state: found.state,
                stopped_early: found.stopped_early,
                mask: found.mask.bit_string(),
            });
            write_json(&files.stages(), &log)?;
            log::info!("seed {seed}: searched mask {}", found.mask.bit_string());
            Ok(None)
        }
        Stage::Retrain => {
            let mut log: StageLog = read_json(&files.stages(), "run the earlier stages first")?;
            let (warm, mask) = match (&log.search, cfg.strategy) {
                (_, Strategy::Uniform) => {
                    log.stages.retain(|s| s.stage == "pretrain");
                    let model = Checkpoint::<T>::load(&files.pretrained(), schema)?.model;
                    let mask = uniform_mask(&model.embeddings().dims(), &schema.cardinalities(), sc.target_size)?;
                    (model, mask)
                }
                (Some(search), _) => {
                    log.stages.retain(|s| s.stage != "retrain");
                    let model = Checkpoint::<T>::load(&files.searched(), schema)?.model;
                    (model, BinaryMask::parse_bits(&search.mask)?)
                }
                (None, _) => return Err(CliError::Config("run --stage search before retraining".into())),
            };
            let mut report = RunReport::begin(cfg.strategy, &cfg.model, &sc, splits, &warm)?;
            let retrained = retrain(warm, &mask, splits, &sc)?;
            report.stages = log.stages;
            report.stages.push(retrained.report.clone());
            if let (Some(search), false) = (&log.search, cfg.strategy == Strategy::Uniform) {
                report.record_search(&search.state, search.stopped_early)?;
            }
            report.record_retrain(&mask, &retrained)?;
            report.seconds = report.stages.iter().map(|s| s.seconds).sum();
            Checkpoint::new(retrained.pruned, schema).save(&files.pruned())?;
            finish(&files, &report)
        }
    }
}

fn finish(files: &Artifacts, report: &RunReport) -> Result<Option<PathBuf>, CliError> {
    report.save(&files.report())?;
    write_metrics(&files.metrics(), report)?;
    println!(
        "{} seed {}: {} of {} columns, test AUC {:.4}, logloss {:.4}, embedding params {} -> {}",
        report.strategy,
        report.seed,
        report.mask_size,
        report.base_dims.iter().sum::<usize>(),
        report.test.auc,
        report.test.logloss,
        report.supernet_params.embedding,
        report.params.embedding,
    );
    Ok(Some(files.report()))
}

/// One row per epoch of every stage.
pub fn write_metrics(path: &Path, report: &RunReport) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["stage", "epoch", "train_loss", "val_logloss", "val_auc", "mask_size"])?;
    for stage in &report.stages {
        for e in &stage.epochs {
            w.write_record([
                stage.stage.clone(),
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.val.logloss.to_string(),
                e.val.auc.to_string(),
                e.mask_size.map(|n| n.to_string()).unwrap_or_default(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Aggregate of the runs sharing a strategy and a target size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub strategy: Strategy,
    pub s: usize,
    pub runs: usize,
    pub mean_test_auc: f64,
    pub best_test_auc: f64,
    /// Mean over runs; hard-mask runs can end with different sizes.
    pub embedding_params: f64,
    pub total_params: f64,
}

pub fn curve_rows(reports: &[RunReport]) -> Vec<CurveRow> {
    let mut groups: BTreeMap<(Strategy, usize), Vec<&RunReport>> = BTreeMap::new();
    for r in reports {
        groups.entry((r.strategy, r.target_size)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((strategy, s), rs)| {
            let n = rs.len() as f64;
            let mean = |f: &dyn Fn(&RunReport) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            CurveRow {
                strategy,
                s,
                runs: rs.len(),
                mean_test_auc: mean(&|r| r.test.auc),
                best_test_auc: rs.iter().map(|r| r.test.auc).fold(f64::NEG_INFINITY, f64::max),
                embedding_params: mean(&|r| r.params.embedding as f64),
                total_params: mean(&|r| r.params.total as f64),
            }
        })
        .collect()
}

/// Loads every report matching `pattern` and writes the aggregated curve as
/// CSV to `out`, or to stdout.
pub fn curve(pattern: &str, out: Option<&Path>) -> Result<Vec<CurveRow>, CliError> {
    let paths = glob::glob(pattern).map_err(|e| CliError::Config(format!("bad pattern {pattern:?}: {e}")))?;
    let mut reports = Vec::new();
    for p in paths {
        let p = p.map_err(|e| CliError::Runtime(hamprune::Error::Io(e.into())))?;
        reports.push(RunReport::load(&p)?);
    }
    if reports.is_empty() {
        return Err(CliError::Config(format!("no reports match {pattern:?}")));
    }
    let rows = curve_rows(&reports);
    let sink: Box<dyn Write> = match out {
        Some(path) => Box::new(std::fs::File::create(path)?),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(rows)
}

/// Ranks the configured strategy's mask among all masks of its size, per
/// seed, and writes each ranking as CSV.
pub fn oracle(cfg: &ExperimentConfig) -> Result<Vec<usize>, CliError> {
    let splits = cfg.data.load()?;
    let columns = check_sizes(cfg, &splits)?;
    let size = cfg.oracle.size.unwrap_or(cfg.search.target_size);
    if columns > MAX_ORACLE_COLUMNS {
        return Err(CliError::Config(format!(
            "the oracle enumerates at most {MAX_ORACLE_COLUMNS} columns, this model has {columns}"
        )));
    }
    if size > columns {
        return Err(CliError::Config(format!("cannot keep {size} of {columns} columns")));
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    let cards = splits.schema.cardinalities();
    let mut ranks = Vec::new();
    for &seed in &cfg.seeds {
        let sc = SearchConfig {
            target_size: size,
            ..seed_config(cfg, seed)
        };
        let model: Model = init_supernet(&cfg.model, &cards, &sc)?;
        let (pretrained, _) = pretrain(model, &splits, &sc)?;
        let mask = match cfg.strategy {
            Strategy::Uniform => uniform_mask(&pretrained.embeddings().dims(), &cards, size)?,
            s => top_s(search_stage(pretrained.clone(), &splits, &sc, s)?.state.alpha(), size)?,
        };
        let enumeration = enumerate_best_mask(&pretrained, &splits, Some(size), cfg.oracle.retrain_steps, &sc)?;
        let csv = cfg.out_dir.join(format!("oracle-{}-s{size}-seed{seed}.csv", cfg.strategy));
        enumeration.write_csv(&csv)?;
        let rank = enumeration.rank_of(&mask).ok_or_else(|| {
            CliError::Runtime(hamprune::Error::Data("selected mask missing from the enumeration".into()))
        })?;
        println!(
            "{} seed {seed}: mask {} ranks {rank} of {} (best {}, val logloss {:.5})",
            cfg.strategy,
            mask.bit_string(),
            enumeration.ranked.len(),
            enumeration.best().mask.bit_string(),
            enumeration.best().val_loss,
        );
        ranks.push(rank);
    }
    Ok(ranks)
}

/// Loads the configured data source and stores the splits as a binary cache.
pub fn preprocess(cfg: &ExperimentConfig, out: &Path) -> Result<Splits, CliError> {
    let splits = cfg.data.load()?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_splits(out, &splits)?;
    println!(
        "{} rows ({} train / {} val / {} test), cardinalities {:?} -> {}",
        splits.train.len() + splits.val.len() + splits.test.len(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        splits.schema.cardinalities(),
        out.display()
    );
    Ok(splits)
}
