//! Experiment configuration, orchestration over strategies × seeds, and the
//! error report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{save_checkpoint, save_pretrained};
use crate::classifier::Network;
use crate::dbn::PretrainOutcome;
use crate::data::{
    load_delimited, load_idx, split, split_counts, stratified_subsample, DelimitedSchema,
    FeatureRange, Normalization, RawDataset,
};
use crate::error::{Error, Result};
use crate::history::RunHistory;
use crate::hyper::Hyper;
use crate::numerics::{Matrix, RngStream};
use crate::strategies::{pretrain_reference, train, References, Splits, StrategyId};

const DATA_STREAM: u64 = 0xda7a;
const TRAIN_STREAM: u64 = 0x7a1e;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    /// `paths = [images, labels]`.
    Idx,
    /// `paths` are delimited files read with `schema` and concatenated.
    Delimited,
}

/// Exactly one of `ratios` or `counts`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub ratios: Option<[f64; 3]>,
    pub counts: Option<[usize; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub format: DataFormat,
    pub paths: Vec<PathBuf>,
    /// Optional separate test source in the same format. When given, the
    /// test part of `split` must be empty.
    #[serde(default)]
    pub test_paths: Vec<PathBuf>,
    #[serde(default)]
    pub schema: Option<DelimitedSchema>,
    #[serde(default)]
    pub normalization: Normalization,
    /// Threshold for turning features into {0,1}.
    #[serde(default)]
    pub binarize: Option<f64>,
    /// Stratified fraction of the training pool kept before splitting.
    #[serde(default)]
    pub subsample: Option<f64>,
    pub split: SplitSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    /// Input width followed by the hidden layer sizes; the class count comes
    /// from the data.
    pub architecture: Vec<usize>,
    #[serde(default)]
    pub hyper: Hyper,
    pub strategies: Vec<StrategyId>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative data and output paths are taken
    /// relative to the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::from_toml(&fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.dataset.paths.iter_mut().for_each(rebase);
        cfg.dataset.test_paths.iter_mut().for_each(rebase);
        rebase(&mut cfg.output_dir);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.architecture.len() < 2 || self.architecture.contains(&0) {
            return Err(Error::Config(
                "architecture needs an input width and at least one non-empty hidden layer".into(),
            ));
        }
        if self.strategies.is_empty() {
            return Err(Error::Config("strategy list is empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        self.hyper.validate()?;
        let d = &self.dataset;
        match d.format {
            DataFormat::Idx if d.paths.len() != 2 => {
                return Err(Error::Config("idx data needs paths = [images, labels]".into()))
            }
            DataFormat::Idx if !d.test_paths.is_empty() && d.test_paths.len() != 2 => {
                return Err(Error::Config("idx test data needs test_paths = [images, labels]".into()))
            }
            DataFormat::Delimited if d.paths.is_empty() => {
                return Err(Error::Config("delimited data needs at least one path".into()))
            }
            _ => {}
        }
        match (&d.split.ratios, &d.split.counts) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => return Err(Error::Config("split needs exactly one of ratios or counts".into())),
        }
        if !d.test_paths.is_empty() {
            let test_share = d.split.ratios.map(|r| r[2] != 0.0).unwrap_or(false)
                || d.split.counts.map(|c| c[2] != 0).unwrap_or(false);
            if test_share {
                return Err(Error::Config(
                    "with test_paths the split's test part must be 0".into(),
                ));
            }
        }
        if let Some(f) = d.subsample {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("subsample {f} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

fn load_source(spec: &DatasetSpec, paths: &[PathBuf]) -> Result<RawDataset> {
    match spec.format {
        DataFormat::Idx => load_idx(&paths[0], &paths[1]),
        DataFormat::Delimited => {
            let schema = spec.schema.clone().unwrap_or_default();
            let parts = paths
                .iter()
                .map(|p| load_delimited(p, &schema))
                .collect::<Result<Vec<_>>>()?;
            concat(&parts)
        }
    }
}

fn concat(parts: &[RawDataset]) -> Result<RawDataset> {
    let width = parts[0].width();
    let classes = parts.iter().map(|p| p.classes()).max().unwrap_or(0);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for p in parts {
        crate::error::check_len("concatenated file width", width, p.width())?;
        data.extend_from_slice(p.features().as_slice());
        labels.extend_from_slice(p.labels());
    }
    RawDataset::new(Matrix::new(labels.len(), width, data)?, labels, classes)
}

/// Loads and prepares the splits for one seed: subsample, stratified split,
/// min/max statistics from the training part, optional binarization.
pub fn prepare_splits(spec: &DatasetSpec, seed: u64) -> Result<Splits> {
    let rng = RngStream::new(seed, DATA_STREAM);
    let mut pool = load_source(spec, &spec.paths)?;
    let held_out = if spec.test_paths.is_empty() {
        None
    } else {
        Some(load_source(spec, &spec.test_paths)?)
    };
    if let Some(f) = spec.subsample {
        pool = stratified_subsample(&pool, f, &rng.derive(&[1]))?;
    }
    let parts = match (&spec.split.ratios, &spec.split.counts) {
        (Some(r), _) => split(&pool, *r, &rng.derive(&[2]))?,
        (_, Some(c)) => split_counts(&pool, *c, &rng.derive(&[2]))?,
        _ => return Err(Error::Config("split needs ratios or counts".into())),
    };
    let mut sets = [parts.train, parts.valid, held_out.unwrap_or(parts.test)];
    if spec.normalization == Normalization::Minmax {
        let range = FeatureRange::fit(&sets[0])?;
        for s in sets.iter_mut() {
            *s = range.apply(s)?;
        }
    }
    if let Some(t) = spec.binarize {
        for s in sets.iter_mut() {
            *s = s.binarize(t);
        }
    }
    let classes = sets.iter().map(|s| s.classes()).max().unwrap_or(0);
    let labeled = |s: &RawDataset| -> Result<_> {
        let mut l = s.to_labeled()?;
        l.classes = classes;
        Ok(l)
    };
    Ok(Splits {
        train: labeled(&sets[0])?,
        valid: labeled(&sets[1])?,
        test: labeled(&sets[2])?,
    })
}

/// SHA-256 over the parameters in checkpoint order, little-endian.
pub fn network_digest(net: &Network) -> String {
    let mut h = Sha256::new();
    for v in net.flatten() {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// File-name form of a strategy name.
pub fn strategy_slug(s: StrategyId) -> String {
    s.name().to_ascii_lowercase().replace('+', "-plus-")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub seed: u64,
    /// Test error of the network selected on validation error.
    pub test_error: Option<f64>,
    /// Epoch of that network; 0 is the starting point.
    pub selected_epoch: Option<usize>,
    /// `category: message` when the cell failed.
    pub error: Option<String>,
    /// SHA-256 of the two-phase reference for the *OPT variants, or of the
    /// selected network for DBN-FFN.
    pub reference_digest: Option<String>,
    pub history: Option<RunHistory>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub strategy: StrategyId,
    /// Over all configured seeds; `None` if any cell failed.
    pub mean_error: Option<f64>,
    /// Sample standard deviation; `None` with fewer than two seeds.
    pub sd_error: Option<f64>,
    pub runs: Vec<RunEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub seeds: Vec<u64>,
    pub strategies: Vec<StrategyReport>,
}

/// Mean and sample standard deviation (`n − 1` denominator).
pub fn mean_sd(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (Some(mean), None);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (Some(mean), Some((ss / (n - 1.0)).sqrt()))
}

fn describe(e: &Error) -> String {
    format!("{}: {e}", e.category())
}

/// Trains and evaluates every (strategy, seed) cell, resolving shared
/// prerequisites once per seed. A failing cell is recorded and the rest
/// continue. Checkpoints go to `output_dir/seed-<s>/`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    run_experiment_with(cfg, &mut |_, _| {})
}

/// [`run_experiment`] with a progress callback `(seed, strategy)` invoked
/// before each cell.
pub fn run_experiment_with(
    cfg: &ExperimentConfig,
    progress: &mut dyn FnMut(u64, StrategyId),
) -> Result<Report> {
    cfg.validate()?;
    let mut strategies = cfg.strategies.clone();
    strategies.dedup();
    let mut cells: BTreeMap<StrategyId, Vec<RunEntry>> = BTreeMap::new();

    for &seed in &cfg.seeds {
        let dir = cfg.output_dir.join(format!("seed-{seed}"));
        fs::create_dir_all(&dir)?;
        let results = run_seed(cfg, &strategies, seed, &dir, progress);
        for (s, entry) in results {
            cells.entry(s).or_default().push(entry);
        }
    }

    let reports = strategies
        .iter()
        .map(|&s| {
            let runs = cells.remove(&s).unwrap_or_default();
            let errors: Option<Vec<f64>> = runs.iter().map(|r| r.test_error).collect();
            let (mean_error, sd_error) = errors.map_or((None, None), |e| mean_sd(&e));
            StrategyReport {
                strategy: s,
                mean_error,
                sd_error,
                runs,
            }
        })
        .collect();
    Ok(Report {
        seeds: cfg.seeds.clone(),
        strategies: reports,
    })
}

fn failed(seed: u64, e: &Error) -> RunEntry {
    failed_with(seed, describe(e))
}

fn failed_with(seed: u64, message: String) -> RunEntry {
    RunEntry {
        seed,
        test_error: None,
        selected_epoch: None,
        error: Some(message),
        reference_digest: None,
        history: None,
    }
}

fn run_seed(
    cfg: &ExperimentConfig,
    strategies: &[StrategyId],
    seed: u64,
    dir: &Path,
    progress: &mut dyn FnMut(u64, StrategyId),
) -> Vec<(StrategyId, RunEntry)> {
    let splits = match prepare_splits(&cfg.dataset, seed) {
        Ok(s) => s,
        Err(e) => return strategies.iter().map(|&s| (s, failed(seed, &e))).collect(),
    };
    let rng = RngStream::new(seed, TRAIN_STREAM);
    let arch = &cfg.architecture;

    let needs_pretrain = strategies
        .iter()
        .any(|s| s.needs_pretraining() || s.needs_two_phase());
    let pretrained = needs_pretrain.then(|| {
        let p = pretrain_reference(arch, &splits.train, &cfg.hyper, &rng)?;
        save_pretrained(&p.params, &cfg.hyper, &p.reconstruction, dir.join("pretrain.ckpt"))?;
        Ok::<_, Error>(p)
    });
    let pretrained = match pretrained {
        Some(Ok(p)) => Some(p),
        Some(Err(e)) => {
            return strategies
                .iter()
                .map(|&s| {
                    let entry = if s.needs_pretraining() || s.needs_two_phase() {
                        failed(seed, &e)
                    } else {
                        failed_with(seed, "prerequisite: skipped after pretraining failed".into())
                    };
                    (s, entry)
                })
                .collect();
        }
        None => None,
    };
    let mut refs = References {
        pretrained,
        two_phase: None,
    };

    let mut out: Vec<(StrategyId, RunEntry)> = Vec::new();
    let mut two_phase_error = None;
    let needs_two_phase = strategies.iter().any(|s| s.needs_two_phase());
    // The two-phase model is trained first so its snapshot can be shared.
    let mut order: Vec<StrategyId> = strategies.to_vec();
    order.sort_by_key(|&s| s != StrategyId::DbnFfn);
    if needs_two_phase && !order.contains(&StrategyId::DbnFfn) {
        order.insert(0, StrategyId::DbnFfn);
    }

    for s in order {
        let reported = strategies.contains(&s);
        if reported {
            progress(seed, s);
        }
        if s.needs_two_phase() && refs.two_phase.is_none() {
            let message = two_phase_error.clone().unwrap_or_else(|| {
                describe(&Error::MissingReference {
                    strategy: s.name(),
                    what: "two-phase",
                })
            });
            out.push((s, failed_with(seed, message)));
            continue;
        }
        let result = train(s, arch, &splits, &cfg.hyper, &rng, &refs).and_then(|o| {
            let net = &o.best.network;
            let test_error = net.error_rate(&splits.test)?;
            let mut model = o.model.clone();
            model.network = net.clone();
            if reported {
                save_checkpoint(&model, dir.join(format!("{}.ckpt", strategy_slug(s))))?;
            }
            Ok((o, test_error))
        });
        match result {
            Ok((o, test_error)) => {
                let digest = match s {
                    StrategyId::DbnFfn => Some(network_digest(&o.best.network)),
                    _ if s.needs_two_phase() => refs.two_phase.as_ref().map(network_digest),
                    _ => None,
                };
                if s == StrategyId::DbnFfn {
                    refs.two_phase = Some(o.best.network.clone());
                }
                if reported {
                    out.push((
                        s,
                        RunEntry {
                            seed,
                            test_error,
                            selected_epoch: Some(o.best.epoch),
                            error: None,
                            reference_digest: digest,
                            history: Some(o.model.history),
                        },
                    ));
                }
            }
            Err(e) => {
                if s == StrategyId::DbnFfn {
                    two_phase_error = Some(format!("prerequisite: two-phase training failed: {}", describe(&e)));
                }
                if reported {
                    out.push((s, failed(seed, &e)));
                }
            }
        }
    }
    out
}

/// The seed's pretrained stack, exactly as [`run_experiment`] builds it.
pub fn pretrain_cell(cfg: &ExperimentConfig, seed: u64) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let splits = prepare_splits(&cfg.dataset, seed)?;
    pretrain_reference(&cfg.architecture, &splits.train, &cfg.hyper, &RngStream::new(seed, TRAIN_STREAM))
}

/// One trained cell: the validation-selected model and its test error.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub model: crate::strategies::TrainedModel,
    pub selected_epoch: usize,
    pub test_error: Option<f64>,
}

/// Trains a single (strategy, seed) cell, building only the prerequisites it
/// needs. Unlike [`run_experiment`], failures are returned.
pub fn train_cell(cfg: &ExperimentConfig, strategy: StrategyId, seed: u64) -> Result<Cell> {
    cfg.validate()?;
    let splits = prepare_splits(&cfg.dataset, seed)?;
    let rng = RngStream::new(seed, TRAIN_STREAM);
    let arch = &cfg.architecture;
    let mut refs = References::default();
    if strategy.needs_pretraining() || strategy.needs_two_phase() {
        refs.pretrained = Some(pretrain_reference(arch, &splits.train, &cfg.hyper, &rng)?);
    }
    if strategy.needs_two_phase() {
        let two_phase = train(StrategyId::DbnFfn, arch, &splits, &cfg.hyper, &rng, &refs)?;
        refs.two_phase = Some(two_phase.best.network);
    }
    let out = train(strategy, arch, &splits, &cfg.hyper, &rng, &refs)?;
    let test_error = out.best.network.error_rate(&splits.test)?;
    let mut model = out.model;
    model.network = out.best.network;
    Ok(Cell {
        model,
        selected_epoch: out.best.epoch,
        test_error,
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{:.2}", 100.0 * v))
}

/// Tab-separated table: strategy, mean error %, sd %, then one column per
/// seed. Failed cells show `ERR`, undefined statistics `NA`.
pub fn render_table(report: &Report) -> String {
    let mut s = String::from("strategy\tmean_error_pct\tsd_pct");
    for seed in &report.seeds {
        let _ = write!(s, "\tseed_{seed}");
    }
    s.push('\n');
    for r in &report.strategies {
        let _ = write!(s, "{}\t{}\t{}", r.strategy, pct(r.mean_error), pct(r.sd_error));
        for run in &r.runs {
            s.push('\t');
            if run.error.is_some() {
                s.push_str("ERR");
            } else {
                s.push_str(&pct(run.test_error));
            }
        }
        s.push('\n');
    }
    s
}

/// Writes the table to `path` and the full report (with histories) as JSON
/// next to it.
pub fn emit_report(report: &Report, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, render_table(report))?;
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    fs::write(path.with_extension("json"), json)?;
    Ok(())
}
