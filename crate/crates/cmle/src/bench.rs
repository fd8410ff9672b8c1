//! Benchmark orchestration: the (method × seed) grid behind the headline
//! table.
//!
//! A bench run trains every requested method on every seed, reusing one
//! dataset bundle per seed and one pretrained classifier per (seed,
//! phi-source), then aggregates per-run MSE into a long-format table with
//! one row per (test set, method) cell. Failed cells are recorded with
//! their error message and surface as missing values in the table rather
//! than aborting the rest of the grid.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::objectives::{ObjectiveConfig, ObjectiveKind, PhiSource};
use crate::parallel;
use crate::trainer::{
    method_label, pretrain_classifier, train_run_on, Metrics, PretrainedClassifier, RunData,
    TrainConfig,
};

// ── Errors ──────────────────────────────────────────────────────────────

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid bench config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

// ── Methods ─────────────────────────────────────────────────────────────

/// The four benchmark columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Mle,
    Implicit,
    Explicit,
    ExplicitStar,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Mle,
        Method::Implicit,
        Method::Explicit,
        Method::ExplicitStar,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Mle => "mle",
            Method::Implicit => "implicit",
            Method::Explicit => "explicit",
            Method::ExplicitStar => "explicit-star",
        }
    }

    /// The training objective this column runs, with the bench-level alpha
    /// applied.
    pub fn objective(&self, bench: &BenchConfig) -> ObjectiveConfig {
        let mut obj = ObjectiveConfig::default();
        match self {
            Method::Mle => {}
            Method::Implicit => {
                obj.kind = ObjectiveKind::Implicit;
                obj.alpha = bench.alpha_implicit;
            }
            Method::Explicit => {
                obj.kind = ObjectiveKind::Explicit;
                obj.alpha = bench.alpha_explicit;
                obj.phi_source = PhiSource::Observational;
            }
            Method::ExplicitStar => {
                obj.kind = ObjectiveKind::Explicit;
                obj.alpha = bench.alpha_explicit;
                obj.phi_source = PhiSource::Interventional;
            }
        }
        obj
    }

    fn phi_source(&self) -> Option<PhiSource> {
        match self {
            Method::Explicit => Some(PhiSource::Observational),
            Method::ExplicitStar => Some(PhiSource::Interventional),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .iter()
            .find(|m| m.as_str() == s)
            .copied()
            .ok_or_else(|| format!("unknown method `{s}`, expected mle|implicit|explicit|explicit-star"))
    }
}

// ── Config ──────────────────────────────────────────────────────────────

/// Ten fixed seeds so the shipped benchmark is reproducible run to run.
pub const DEFAULT_SEEDS: [u64; 10] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10];

/// Grid definition for a bench run.
///
/// `train` is the per-run template; each cell copies it and overwrites the
/// objective (per method), seed, and dataset sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub alpha_implicit: f64,
    pub alpha_explicit: f64,
    pub output_dir: Option<PathBuf>,
    pub train: TrainConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seeds: DEFAULT_SEEDS.to_vec(),
            methods: Method::ALL.to_vec(),
            n_train: 10_000,
            n_val: 5_000,
            n_test: 5_000,
            alpha_implicit: 0.01,
            alpha_explicit: 0.1,
            output_dir: None,
            train: TrainConfig::default(),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.seeds.is_empty() {
            return Err(BenchError::Config("seed list is empty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(BenchError::Config("seed list contains duplicates".into()));
        }
        if self.methods.is_empty() {
            return Err(BenchError::Config("method list is empty".into()));
        }
        let mut methods = self.methods.clone();
        methods.sort_by_key(|m| m.as_str());
        methods.dedup();
        if methods.len() != self.methods.len() {
            return Err(BenchError::Config("method list contains duplicates".into()));
        }
        if !(self.alpha_implicit.is_finite() && self.alpha_implicit >= 0.0) {
            return Err(BenchError::Config(format!(
                "alpha_implicit must be finite and non-negative, got {}",
                self.alpha_implicit
            )));
        }
        if !(self.alpha_explicit.is_finite() && self.alpha_explicit >= 0.0) {
            return Err(BenchError::Config(format!(
                "alpha_explicit must be finite and non-negative, got {}",
                self.alpha_explicit
            )));
        }
        for method in &self.methods {
            self.train_config(*method, self.seeds[0])
                .validate()
                .map_err(|e| BenchError::Config(format!("cell config for {method}: {e}")))?;
        }
        Ok(())
    }

    /// The full training config for one (method, seed) cell.
    pub fn train_config(&self, method: Method, seed: u64) -> TrainConfig {
        TrainConfig {
            objective: method.objective(self),
            seed,
            n_train: self.n_train,
            n_val: self.n_val,
            n_test: self.n_test,
            ..self.train.clone()
        }
    }
}

// ── Per-cell results ────────────────────────────────────────────────────

/// Outcome of one (method, seed) training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchCell {
    pub method: Method,
    pub seed: u64,
    pub metrics: Option<Metrics>,
    pub error: Option<String>,
}

impl BenchCell {
    fn ok(method: Method, seed: u64, metrics: Metrics) -> Self {
        Self {
            method,
            seed,
            metrics: Some(metrics),
            error: None,
        }
    }

    fn failed(method: Method, seed: u64, error: String) -> Self {
        Self {
            method,
            seed,
            metrics: None,
            error: Some(error),
        }
    }
}

// ── Aggregation ─────────────────────────────────────────────────────────

/// The five benchmark rows, in presentation order.
pub const TEST_SETS: [&str; 5] = ["observational", "counterfactual", "ood1", "ood2", "ood3"];

/// One aggregated (test set, method) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableCell {
    pub testset: String,
    pub method: Method,
    /// Mean MSE over completed runs; `None` when every run failed.
    pub mean_mse: Option<f64>,
    /// Sample standard deviation over completed runs; `None` below two runs.
    pub std_mse: Option<f64>,
    pub runs: usize,
}

/// Long-format aggregate: one cell per (test set, method), test sets in
/// [`TEST_SETS`] order, methods in configured order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchTable {
    pub cells: Vec<TableCell>,
}

impl BenchTable {
    /// Renders the table as CSV with `NA` marking missing aggregates.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("testset,method,mean_mse,std_mse,runs\n");
        let render = |v: &Option<f64>| match v {
            Some(x) => format!("{x}"),
            None => "NA".to_string(),
        };
        for cell in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                cell.testset,
                cell.method,
                render(&cell.mean_mse),
                render(&cell.std_mse),
                cell.runs
            ));
        }
        out
    }

    /// The aggregated mean for one (test set, method) cell, if present.
    pub fn mean(&self, testset: &str, method: Method) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.testset == testset && c.method == method)
            .and_then(|c| c.mean_mse)
    }
}

fn mean_and_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (Some(mean), None);
    }
    let ss = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    (Some(mean), Some((ss / (n - 1.0)).sqrt()))
}

/// Builds the table from per-run cells. Only the (method, seed) identity of
/// each cell matters, never its position, so any completion order aggregates
/// to the same table.
pub fn aggregate(methods: &[Method], cells: &[BenchCell]) -> BenchTable {
    // Keyed collection first, so duplicate-free deterministic iteration
    // below is independent of input order.
    let mut by_method: BTreeMap<&'static str, Vec<&BenchCell>> = BTreeMap::new();
    for cell in cells {
        by_method.entry(cell.method.as_str()).or_default().push(cell);
    }
    for group in by_method.values_mut() {
        group.sort_by_key(|c| c.seed);
    }

    let mut out = Vec::with_capacity(TEST_SETS.len() * methods.len());
    for testset in TEST_SETS {
        for &method in methods {
            let group = by_method.get(method.as_str()).map(Vec::as_slice).unwrap_or(&[]);
            let values: Vec<f64> = group
                .iter()
                .filter_map(|c| c.metrics.as_ref())
                .filter_map(|m| {
                    m.mse
                        .rows()
                        .iter()
                        .find(|(name, _)| *name == testset)
                        .map(|(_, v)| *v)
                })
                .collect();
            let (mean_mse, std_mse) = mean_and_std(&values);
            out.push(TableCell {
                testset: testset.to_string(),
                method,
                mean_mse,
                std_mse,
                runs: values.len(),
            });
        }
    }
    BenchTable { cells: out }
}

// ── The grid ────────────────────────────────────────────────────────────

/// Full bench output: the config that produced it, every per-run cell, and
/// the aggregated table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub cells: Vec<BenchCell>,
    pub table: BenchTable,
}

impl BenchReport {
    pub fn all_ok(&self) -> bool {
        self.cells.iter().all(|c| c.error.is_none())
    }

    pub fn save(&self, path: &Path) -> Result<(), BenchError> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Runs every method for one seed, sharing the seed's datasets and reusing
/// one classifier per phi-source.
fn run_seed(config: &BenchConfig, seed: u64) -> Vec<BenchCell> {
    let base = config.train_config(config.methods[0], seed);
    let data = match RunData::for_config(&base) {
        Ok(data) => data,
        Err(e) => {
            return config
                .methods
                .iter()
                .map(|&m| BenchCell::failed(m, seed, format!("dataset generation: {e}")))
                .collect();
        }
    };

    let mut classifiers: BTreeMap<&'static str, Result<PretrainedClassifier, String>> =
        BTreeMap::new();
    let mut cells = Vec::with_capacity(config.methods.len());

    for &method in &config.methods {
        let train_config = config.train_config(method, seed);
        let classifier = match method.phi_source() {
            Some(source) => {
                let key = match source {
                    PhiSource::Observational => "observational",
                    PhiSource::Interventional => "interventional",
                };
                if !classifiers.contains_key(key) {
                    let trained = pretrain_classifier(&train_config, source, &data)
                        .map_err(|e| format!("classifier pretraining: {e}"));
                    classifiers.insert(key, trained);
                }
                match classifiers.get(key).expect("inserted above") {
                    Ok(clf) => Some(clf),
                    Err(e) => {
                        cells.push(BenchCell::failed(method, seed, e.clone()));
                        continue;
                    }
                }
            }
            None => None,
        };
        match train_run_on(&train_config, &data, classifier) {
            Ok(run) => cells.push(BenchCell::ok(method, seed, run.metrics())),
            Err(e) => cells.push(BenchCell::failed(method, seed, e.to_string())),
        }
    }
    cells
}

/// Runs the whole (method × seed) grid and aggregates the table.
///
/// Seeds fan out over the parallel helper; each seed's methods run
/// sequentially so they can share datasets and classifiers. Cells are
/// collected in (seed, method) order regardless of scheduling, so the
/// report is deterministic.
pub fn run_bench(config: &BenchConfig) -> Result<BenchReport, BenchError> {
    config.validate()?;
    let per_seed: Vec<Vec<BenchCell>> =
        parallel::map_indexed(config.seeds.len(), |i| run_seed(config, config.seeds[i]));
    let cells: Vec<BenchCell> = per_seed.into_iter().flatten().collect();
    let table = aggregate(&config.methods, &cells);
    Ok(BenchReport {
        config: config.clone(),
        cells,
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelConfig;
    use crate::scm::{self, N_TREATMENTS};

    fn tiny_bench_config() -> BenchConfig {
        BenchConfig {
            seeds: vec![1, 2],
            methods: vec![Method::Mle],
            n_train: 160,
            n_val: 80,
            n_test: 80,
            train: TrainConfig {
                epochs: 1,
                pretrain_epochs: 1,
                model: ModelConfig {
                    encoder_widths: vec![scm::X_DIM, 8, 6],
                    head_widths: vec![6 + N_TREATMENTS, 6, scm::Y_DIM],
                    classifier_widths: vec![scm::X_DIM + scm::Y_DIM, 8, N_TREATMENTS],
                },
                ..TrainConfig::default()
            },
            ..BenchConfig::default()
        }
    }

    #[test]
    fn method_labels_round_trip_and_match_the_trainer() {
        let bench = BenchConfig::default();
        for method in Method::ALL {
            assert_eq!(method.as_str().parse::<Method>().unwrap(), method);
            assert_eq!(method_label(&method.objective(&bench)), method.as_str());
        }
        assert!("sgd".parse::<Method>().is_err());
    }

    #[test]
    fn objectives_wire_the_bench_alphas() {
        let bench = BenchConfig {
            alpha_implicit: 0.25,
            alpha_explicit: 0.75,
            ..BenchConfig::default()
        };
        let implicit = Method::Implicit.objective(&bench);
        assert_eq!(implicit.kind, ObjectiveKind::Implicit);
        assert_eq!(implicit.alpha, 0.25);
        let explicit = Method::Explicit.objective(&bench);
        assert_eq!(explicit.kind, ObjectiveKind::Explicit);
        assert_eq!(explicit.alpha, 0.75);
        assert_eq!(explicit.phi_source, PhiSource::Observational);
        let star = Method::ExplicitStar.objective(&bench);
        assert_eq!(star.phi_source, PhiSource::Interventional);
        let mle = Method::Mle.objective(&bench);
        assert_eq!(mle.kind, ObjectiveKind::Mle);
        assert_eq!(mle.alpha, 0.0);
    }

    #[test]
    fn config_validation_rejects_degenerate_grids() {
        let mut config = BenchConfig::default();
        config.seeds.clear();
        assert!(config.validate().is_err());

        let config = BenchConfig {
            seeds: vec![3, 3],
            ..BenchConfig::default()
        };
        assert!(config.validate().is_err());

        let config = BenchConfig {
            methods: vec![],
            ..BenchConfig::default()
        };
        assert!(config.validate().is_err());

        let config = BenchConfig {
            methods: vec![Method::Mle, Method::Mle],
            ..BenchConfig::default()
        };
        assert!(config.validate().is_err());

        let config = BenchConfig {
            alpha_explicit: f64::NAN,
            ..BenchConfig::default()
        };
        assert!(config.validate().is_err());

        assert!(BenchConfig::default().validate().is_ok());
    }

    #[test]
    fn aggregation_matches_hand_computed_mean_and_std() {
        let report = run_bench(&tiny_bench_config()).unwrap();
        assert!(report.all_ok());
        assert_eq!(report.cells.len(), 2);
        assert_eq!(report.table.cells.len(), TEST_SETS.len());

        // Every aggregate equals the hand-computed mean/std of its two runs.
        for testset in TEST_SETS {
            let values: Vec<f64> = report
                .cells
                .iter()
                .map(|c| {
                    let mse = &c.metrics.as_ref().unwrap().mse;
                    mse.rows().iter().find(|(n, _)| *n == testset).unwrap().1
                })
                .collect();
            let mean = (values[0] + values[1]) / 2.0;
            let std = (((values[0] - mean).powi(2) + (values[1] - mean).powi(2)) / 1.0).sqrt();
            let cell = report
                .table
                .cells
                .iter()
                .find(|c| c.testset == testset)
                .unwrap();
            assert_eq!(cell.runs, 2);
            assert!((cell.mean_mse.unwrap() - mean).abs() < 1e-12);
            assert!((cell.std_mse.unwrap() - std).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregation_is_order_independent() {
        let report = run_bench(&tiny_bench_config()).unwrap();
        let mut reversed = report.cells.clone();
        reversed.reverse();
        let methods = vec![Method::Mle];
        assert_eq!(aggregate(&methods, &report.cells), aggregate(&methods, &reversed));
    }

    #[test]
    fn failed_cells_surface_as_missing_markers() {
        let ok = BenchCell {
            method: Method::Mle,
            seed: 1,
            metrics: Some(Metrics {
                method: "mle".into(),
                seed: 1,
                mse: crate::trainer::MseReport {
                    observational: 3.0,
                    counterfactual: 5.0,
                    ood1: 7.0,
                    ood2: 9.0,
                    ood3: 11.0,
                },
                best_epoch: 0,
                classifier_accuracy: None,
                loss_trace: vec![],
                val_trace: vec![],
                config: TrainConfig::default(),
            }),
            error: None,
        };
        let failed = BenchCell::failed(Method::Mle, 2, "diverged".into());
        let table = aggregate(&[Method::Mle, Method::Implicit], &[ok, failed]);

        // The mle cell aggregates the single surviving run: mean present,
        // std undefined below two runs.
        let obs = table
            .cells
            .iter()
            .find(|c| c.testset == "observational" && c.method == Method::Mle)
            .unwrap();
        assert_eq!(obs.runs, 1);
        assert_eq!(obs.mean_mse, Some(3.0));
        assert_eq!(obs.std_mse, None);

        // A method with no runs at all renders as NA with zero runs.
        let missing = table
            .cells
            .iter()
            .find(|c| c.testset == "observational" && c.method == Method::Implicit)
            .unwrap();
        assert_eq!(missing.runs, 0);
        assert_eq!(missing.mean_mse, None);

        let csv = table.to_csv();
        assert!(csv.starts_with("testset,method,mean_mse,std_mse,runs\n"));
        assert!(csv.contains("observational,mle,3,NA,1"));
        assert!(csv.contains("observational,implicit,NA,NA,0"));
        assert_eq!(csv.lines().count(), 1 + TEST_SETS.len() * 2);
    }

    #[test]
    fn bench_runs_are_deterministic() {
        let config = tiny_bench_config();
        let a = run_bench(&config).unwrap();
        let b = run_bench(&config).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn classifier_reuse_matches_a_fresh_pretraining() {
        // An explicit cell inside the grid must equal a standalone run fed
        // its own freshly pretrained classifier.
        let mut config = tiny_bench_config();
        config.seeds = vec![5];
        config.methods = vec![Method::Explicit, Method::ExplicitStar];
        let report = run_bench(&config).unwrap();
        assert!(report.all_ok(), "cells failed: {:?}", report.cells);

        let train_config = config.train_config(Method::Explicit, 5);
        let data = RunData::for_config(&train_config).unwrap();
        let classifier =
            pretrain_classifier(&train_config, PhiSource::Observational, &data).unwrap();
        let standalone = train_run_on(&train_config, &data, Some(&classifier)).unwrap();
        let cell = &report.cells[0];
        assert_eq!(cell.method, Method::Explicit);
        assert_eq!(
            serde_json::to_string(cell.metrics.as_ref().unwrap()).unwrap(),
            serde_json::to_string(&standalone.metrics()).unwrap()
        );
    }
}
