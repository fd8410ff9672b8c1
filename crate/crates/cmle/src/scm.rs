//! Synthetic structural-causal-model benchmark data.
//!
//! Covariates are 100 i.i.d. standard normals. Treatment is a deterministic
//! threshold function of a nonlinear score over the first five covariates, so
//! the observational data carry strong treatment-assignment bias: which arm an
//! example lands in is fully predictable from `x`. Outcomes are bivariate
//! normal around means that combine covariate terms with treatment
//! interactions. Six dataset variants share the same outcome mechanism and
//! differ only in how treatment is assigned:
//!
//! * `observational` - score over `x1..x5`, thresholds at 4 and 5;
//! * `counterfactual` - observational assignment, but every record stores
//!   outcomes under all three treatments;
//! * `interventional` / `ood1` - treatment uniform on `{1, 2, 3}`;
//! * `ood2` - the observational score evaluated on `x6..x10`;
//! * `ood3` - a score built from the outcome-side functions of `x1..x5`.
//!
//! A seventh variant, `discrete-toy`, is a small categorical-outcome problem
//! used to exercise the discrete counterfactual estimators.
//!
//! Random draws per record happen in a fixed order (covariates, then
//! treatment if it is random, then outcome noise), so generation is
//! reproducible for a given seed.

use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::rng::{stream_rng, Prng};

/// Covariate dimension of the continuous benchmark.
pub const X_DIM: usize = 100;
/// Number of treatment arms in the continuous benchmark.
pub const N_TREATMENTS: usize = 3;
/// Outcome dimension of the continuous benchmark.
pub const Y_DIM: usize = 2;
/// Covariate dimension of the discrete toy.
pub const DISCRETE_X_DIM: usize = 10;
/// Number of outcome categories in the discrete toy.
pub const DISCRETE_CLASSES: usize = 8;

/// Score thresholds separating the three treatment arms.
pub const SCORE_THRESHOLDS: [f64; 2] = [4.0, 5.0];

/// Fixed seed for the discrete toy's data-generating logits.
const DISCRETE_PARAM_SEED: u64 = 0x0dd_7095;

/// Errors from dataset generation, parsing, or serialization.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("header mismatch for variant {variant}: expected starts with `{expected}`, found `{got}`")]
    HeaderMismatch {
        variant: Variant,
        expected: String,
        got: String,
    },
    #[error("line {line}: expected {expected} columns, found {got}")]
    ColumnCount {
        line: u64,
        expected: usize,
        got: usize,
    },
    #[error("line {line}, field {field}: cannot parse `{value}`")]
    Parse {
        line: u64,
        field: usize,
        value: String,
    },
    #[error("line {line}: treatment {value} outside 1..={max}")]
    TreatmentRange { line: u64, value: i64, max: usize },
    #[error("line {line}: outcome class {value} outside 0..{max}")]
    OutcomeClassRange { line: u64, value: i64, max: usize },
    #[error("variant {0} is not generated by this entry point")]
    WrongVariant(Variant),
    #[error("unknown variant `{0}`")]
    UnknownVariant(String),
}

/// Dataset variant tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Observational,
    Counterfactual,
    Interventional,
    Ood1,
    Ood2,
    Ood3,
    DiscreteToy,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Observational,
        Variant::Counterfactual,
        Variant::Interventional,
        Variant::Ood1,
        Variant::Ood2,
        Variant::Ood3,
        Variant::DiscreteToy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Observational => "observational",
            Variant::Counterfactual => "counterfactual",
            Variant::Interventional => "interventional",
            Variant::Ood1 => "ood1",
            Variant::Ood2 => "ood2",
            Variant::Ood3 => "ood3",
            Variant::DiscreteToy => "discrete-toy",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| DataError::UnknownVariant(s.to_string()))
    }
}

/// One example with a single (factual) outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct FactualRecord {
    pub x: Vec<f64>,
    /// Treatment arm, 1-based.
    pub t: u8,
    pub y: [f64; 2],
}

/// One example carrying outcomes under every treatment arm.
#[derive(Clone, Debug, PartialEq)]
pub struct CounterfactualRecord {
    pub x: Vec<f64>,
    /// The arm the observational mechanism would have assigned.
    pub factual_t: u8,
    /// `y[t - 1]` is the outcome under arm `t`, each with independent noise.
    pub y: [[f64; 2]; 3],
}

/// One example of the discrete toy.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteRecord {
    pub x: Vec<f64>,
    /// Treatment arm, 1-based, in `{1, 2}`.
    pub t: u8,
    /// Outcome category in `0..DISCRETE_CLASSES`.
    pub y: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FactualDataset {
    pub variant: Variant,
    pub records: Vec<FactualRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CounterfactualDataset {
    pub records: Vec<CounterfactualRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteDataset {
    pub records: Vec<DiscreteRecord>,
}

/// A generated dataset of any variant.
#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Factual(FactualDataset),
    Counterfactual(CounterfactualDataset),
    Discrete(DiscreteDataset),
}

impl Dataset {
    pub fn variant(&self) -> Variant {
        match self {
            Dataset::Factual(d) => d.variant,
            Dataset::Counterfactual(_) => Variant::Counterfactual,
            Dataset::Discrete(_) => Variant::DiscreteToy,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::Factual(d) => d.records.len(),
            Dataset::Counterfactual(d) => d.records.len(),
            Dataset::Discrete(d) => d.records.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// ── Structural functions ────────────────────────────────────────────────────

pub fn g1(x: f64) -> f64 {
    x - 0.5
}

pub fn g2(x: f64) -> f64 {
    (x - 0.5) * (x - 0.5) + 2.0
}

pub fn g3(x: f64) -> f64 {
    x * x - 1.0 / 3.0
}

pub fn g4(x: f64) -> f64 {
    -2.0 * (2.0 * x).sin()
}

pub fn g5(x: f64) -> f64 {
    (-x).exp() - (-1.0f64).exp() - 1.0
}

pub fn g6(x: f64) -> f64 {
    (-x).exp()
}

pub fn g7(x: f64) -> f64 {
    x * x
}

pub fn g8(x: f64) -> f64 {
    x
}

pub fn g9(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn g10(x: f64) -> f64 {
    x.cos()
}

pub fn g11(x: f64, t: f64) -> f64 {
    (t + x * x).ln()
}

pub fn g12(x: f64, t: f64) -> f64 {
    (t + x).exp()
}

pub fn g13(x: f64, t: f64) -> f64 {
    (t + x).sin()
}

/// The observational treatment score `s = g1(x1) + g2(x2) + g3(x3) + g4(x4) + g5(x5)`.
pub fn treatment_score(x: &[f64]) -> f64 {
    g1(x[0]) + g2(x[1]) + g3(x[2]) + g4(x[3]) + g5(x[4])
}

/// The `ood2` score: the observational score functions applied to `x6..x10`.
fn treatment_score_ood2(x: &[f64]) -> f64 {
    g1(x[5]) + g2(x[6]) + g3(x[7]) + g4(x[8]) + g5(x[9])
}

/// The `ood3` score: outcome-side functions applied to `x1..x5`.
fn treatment_score_ood3(x: &[f64]) -> f64 {
    g6(x[0]) + g7(x[1]) + g8(x[2]) + g9(x[3]) + g10(x[4])
}

/// Maps a score to a treatment arm: `s <= 4 -> 1`, `4 < s <= 5 -> 2`, `s > 5 -> 3`.
pub fn assign_treatment(s: f64) -> u8 {
    if s <= SCORE_THRESHOLDS[0] {
        1
    } else if s <= SCORE_THRESHOLDS[1] {
        2
    } else {
        3
    }
}

/// Mean of the bivariate outcome under arm `t`.
///
/// `mu1 = g6(x1) + g7(x2) + g8(x3) + g11(x6, t) + g12(x7, t)` and
/// `mu2 = g9(x4) + g10(x5) + g11(x8, t) + g13(x9, t)`.
pub fn outcome_mean(x: &[f64], t: u8) -> [f64; 2] {
    let tf = f64::from(t);
    let mu1 = g6(x[0]) + g7(x[1]) + g8(x[2]) + g11(x[5], tf) + g12(x[6], tf);
    let mu2 = g9(x[3]) + g10(x[4]) + g11(x[7], tf) + g13(x[8], tf);
    [mu1, mu2]
}

// ── Generation ──────────────────────────────────────────────────────────────

fn sample_x(rng: &mut Prng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn sample_outcome(x: &[f64], t: u8, rng: &mut Prng) -> [f64; 2] {
    let mu = outcome_mean(x, t);
    [
        mu[0] + rng.sample::<f64, _>(StandardNormal),
        mu[1] + rng.sample::<f64, _>(StandardNormal),
    ]
}

/// Generates a dataset of any variant with its own seeded generator.
pub fn generate(variant: Variant, n: usize, seed: u64) -> Dataset {
    match variant {
        Variant::Counterfactual => Dataset::Counterfactual(generate_counterfactual(n, seed)),
        Variant::DiscreteToy => Dataset::Discrete(generate_discrete(n, seed)),
        _ => Dataset::Factual(
            generate_factual(variant, n, seed).expect("variant handled above"),
        ),
    }
}

/// Generates a single-outcome dataset (any variant except `counterfactual`
/// and `discrete-toy`).
pub fn generate_factual(variant: Variant, n: usize, seed: u64) -> Result<FactualDataset, DataError> {
    let mut rng = stream_rng(seed, 0);
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let x = sample_x(&mut rng, X_DIM);
        let t = match variant {
            Variant::Observational => assign_treatment(treatment_score(&x)),
            Variant::Ood2 => assign_treatment(treatment_score_ood2(&x)),
            Variant::Ood3 => assign_treatment(treatment_score_ood3(&x)),
            Variant::Interventional | Variant::Ood1 => rng.random_range(1..=N_TREATMENTS as u8),
            Variant::Counterfactual | Variant::DiscreteToy => {
                return Err(DataError::WrongVariant(variant))
            }
        };
        let y = sample_outcome(&x, t, &mut rng);
        records.push(FactualRecord { x, t, y });
    }
    Ok(FactualDataset { variant, records })
}

/// Generates records carrying outcomes under all three arms, with the factual
/// arm chosen by the observational mechanism.
pub fn generate_counterfactual(n: usize, seed: u64) -> CounterfactualDataset {
    let mut rng = stream_rng(seed, 0);
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let x = sample_x(&mut rng, X_DIM);
        let factual_t = assign_treatment(treatment_score(&x));
        let y = [
            sample_outcome(&x, 1, &mut rng),
            sample_outcome(&x, 2, &mut rng),
            sample_outcome(&x, 3, &mut rng),
        ];
        records.push(CounterfactualRecord { x, factual_t, y });
    }
    CounterfactualDataset { records }
}

/// Logit weights of the discrete toy's data-generating mechanism: one
/// `[DISCRETE_CLASSES x DISCRETE_X_DIM]` weight block and one bias vector per
/// arm, drawn once from a fixed internal seed.
pub struct DiscreteToyParams {
    pub w: [Vec<f64>; 2],
    pub b: [Vec<f64>; 2],
}

pub fn discrete_toy_params() -> DiscreteToyParams {
    let mut rng = stream_rng(DISCRETE_PARAM_SEED, 0);
    let mut draw_block = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let w1 = draw_block(DISCRETE_CLASSES * DISCRETE_X_DIM);
    let b1 = draw_block(DISCRETE_CLASSES);
    let w2 = draw_block(DISCRETE_CLASSES * DISCRETE_X_DIM);
    let b2 = draw_block(DISCRETE_CLASSES);
    DiscreteToyParams {
        w: [w1, w2],
        b: [b1, b2],
    }
}

/// Outcome-category logits of the discrete toy under arm `t`.
pub fn discrete_toy_logits(params: &DiscreteToyParams, x: &[f64], t: u8) -> Vec<f64> {
    let idx = usize::from(t - 1);
    let w = &params.w[idx];
    let b = &params.b[idx];
    (0..DISCRETE_CLASSES)
        .map(|c| {
            let row = &w[c * DISCRETE_X_DIM..(c + 1) * DISCRETE_X_DIM];
            row.iter().zip(x).map(|(wv, xv)| wv * xv).sum::<f64>() + b[c]
        })
        .collect()
}

/// Generates the discrete toy: `x` is 10 standard normals, `t = 1` when
/// `x1 + x2 + x3 > 0` and `2` otherwise, and `y` is drawn from a softmax over
/// fixed per-arm logits.
pub fn generate_discrete(n: usize, seed: u64) -> DiscreteDataset {
    let params = discrete_toy_params();
    let mut rng = stream_rng(seed, 0);
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let x = sample_x(&mut rng, DISCRETE_X_DIM);
        let t = if x[0] + x[1] + x[2] > 0.0 { 1 } else { 2 };
        let logits = discrete_toy_logits(&params, &x, t);
        let probs = softmax(&logits);
        let u: f64 = rng.random();
        let y = categorical_from_uniform(&probs, u);
        records.push(DiscreteRecord { x, t, y });
    }
    DiscreteDataset { records }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|v| v / sum).collect()
}

pub(crate) fn categorical_from_uniform(probs: &[f64], u: f64) -> u8 {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as u8;
        }
    }
    (probs.len() - 1) as u8
}

// ── CSV serialization ───────────────────────────────────────────────────────

/// Formats an `f64` with 17 significant digits, enough to round-trip exactly.
fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn factual_header() -> Vec<String> {
    let mut h: Vec<String> = (0..X_DIM).map(|i| format!("x{i}")).collect();
    h.push("t".into());
    h.push("y0".into());
    h.push("y1".into());
    h
}

fn counterfactual_header() -> Vec<String> {
    let mut h: Vec<String> = (0..X_DIM).map(|i| format!("x{i}")).collect();
    h.push("factual_t".into());
    for t in 1..=N_TREATMENTS {
        for dim in 0..2 {
            h.push(format!("y{t}_{dim}"));
        }
    }
    h
}

fn discrete_header() -> Vec<String> {
    let mut h: Vec<String> = (0..DISCRETE_X_DIM).map(|i| format!("x{i}")).collect();
    h.push("t".into());
    h.push("y".into());
    h
}

/// Writes a dataset as CSV with a header row.
pub fn write_csv<W: Write>(dataset: &Dataset, writer: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    match dataset {
        Dataset::Factual(d) => {
            w.write_record(factual_header())?;
            for r in &d.records {
                let mut row: Vec<String> = r.x.iter().map(|&v| fmt_f64(v)).collect();
                row.push(r.t.to_string());
                row.push(fmt_f64(r.y[0]));
                row.push(fmt_f64(r.y[1]));
                w.write_record(row)?;
            }
        }
        Dataset::Counterfactual(d) => {
            w.write_record(counterfactual_header())?;
            for r in &d.records {
                let mut row: Vec<String> = r.x.iter().map(|&v| fmt_f64(v)).collect();
                row.push(r.factual_t.to_string());
                for t in 0..N_TREATMENTS {
                    row.push(fmt_f64(r.y[t][0]));
                    row.push(fmt_f64(r.y[t][1]));
                }
                w.write_record(row)?;
            }
        }
        Dataset::Discrete(d) => {
            w.write_record(discrete_header())?;
            for r in &d.records {
                let mut row: Vec<String> = r.x.iter().map(|&v| fmt_f64(v)).collect();
                row.push(r.t.to_string());
                row.push(r.y.to_string());
                w.write_record(row)?;
            }
        }
    }
    w.flush().map_err(std::io::Error::from)?;
    Ok(())
}

/// Writes a dataset to a CSV file.
pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let file = File::create(path)?;
    write_csv(dataset, file)
}

struct RowReader {
    line: u64,
}

impl RowReader {
    fn parse_f64(&self, record: &csv::StringRecord, field: usize) -> Result<f64, DataError> {
        let raw = &record[field];
        raw.parse().map_err(|_| DataError::Parse {
            line: self.line,
            field,
            value: raw.to_string(),
        })
    }

    fn parse_int(&self, record: &csv::StringRecord, field: usize) -> Result<i64, DataError> {
        let raw = &record[field];
        raw.parse().map_err(|_| DataError::Parse {
            line: self.line,
            field,
            value: raw.to_string(),
        })
    }

    fn parse_treatment(&self, record: &csv::StringRecord, field: usize, max: usize) -> Result<u8, DataError> {
        let value = self.parse_int(record, field)?;
        if value < 1 || value > max as i64 {
            return Err(DataError::TreatmentRange {
                line: self.line,
                value,
                max,
            });
        }
        Ok(value as u8)
    }
}

/// Reads a dataset of the given variant from CSV.
pub fn read_csv<R: Read>(reader: R, variant: Variant) -> Result<Dataset, DataError> {
    let expected_header = match variant {
        Variant::Counterfactual => counterfactual_header(),
        Variant::DiscreteToy => discrete_header(),
        _ => factual_header(),
    };
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    {
        let got = r.headers()?;
        let got_vec: Vec<&str> = got.iter().collect();
        if got_vec != expected_header.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(DataError::HeaderMismatch {
                variant,
                expected: expected_header[..3.min(expected_header.len())].join(","),
                got: got_vec[..3.min(got_vec.len())].join(","),
            });
        }
    }
    let expected_cols = expected_header.len();

    let mut factual = Vec::new();
    let mut counterfactual = Vec::new();
    let mut discrete = Vec::new();
    for result in r.records() {
        let record = result?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != expected_cols {
            return Err(DataError::ColumnCount {
                line,
                expected: expected_cols,
                got: record.len(),
            });
        }
        let row = RowReader { line };
        match variant {
            Variant::Counterfactual => {
                let x = (0..X_DIM)
                    .map(|i| row.parse_f64(&record, i))
                    .collect::<Result<Vec<f64>, _>>()?;
                let factual_t = row.parse_treatment(&record, X_DIM, N_TREATMENTS)?;
                let mut y = [[0.0; 2]; 3];
                for t in 0..N_TREATMENTS {
                    y[t][0] = row.parse_f64(&record, X_DIM + 1 + 2 * t)?;
                    y[t][1] = row.parse_f64(&record, X_DIM + 2 + 2 * t)?;
                }
                counterfactual.push(CounterfactualRecord { x, factual_t, y });
            }
            Variant::DiscreteToy => {
                let x = (0..DISCRETE_X_DIM)
                    .map(|i| row.parse_f64(&record, i))
                    .collect::<Result<Vec<f64>, _>>()?;
                let t = row.parse_treatment(&record, DISCRETE_X_DIM, 2)?;
                let y = row.parse_int(&record, DISCRETE_X_DIM + 1)?;
                if y < 0 || y >= DISCRETE_CLASSES as i64 {
                    return Err(DataError::OutcomeClassRange {
                        line,
                        value: y,
                        max: DISCRETE_CLASSES,
                    });
                }
                discrete.push(DiscreteRecord { x, t, y: y as u8 });
            }
            _ => {
                let x = (0..X_DIM)
                    .map(|i| row.parse_f64(&record, i))
                    .collect::<Result<Vec<f64>, _>>()?;
                let t = row.parse_treatment(&record, X_DIM, N_TREATMENTS)?;
                let y = [
                    row.parse_f64(&record, X_DIM + 1)?,
                    row.parse_f64(&record, X_DIM + 2)?,
                ];
                factual.push(FactualRecord { x, t, y });
            }
        }
    }

    Ok(match variant {
        Variant::Counterfactual => Dataset::Counterfactual(CounterfactualDataset {
            records: counterfactual,
        }),
        Variant::DiscreteToy => Dataset::Discrete(DiscreteDataset { records: discrete }),
        _ => Dataset::Factual(FactualDataset {
            variant,
            records: factual,
        }),
    })
}

/// Reads a dataset of the given variant from a CSV file.
pub fn load_csv(path: &Path, variant: Variant) -> Result<Dataset, DataError> {
    let file = File::open(path)?;
    read_csv(file, variant)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{E, LN_2};

    #[test]
    fn structural_functions_match_hand_values() {
        assert_eq!(g1(0.5), 0.0);
        assert_eq!(g2(0.5), 2.0);
        assert_eq!(g2(0.0), 2.25);
        assert!((g5(0.0) - (-(-1.0f64).exp())).abs() < 1e-15);
        assert!((g5(0.0) + 0.367_879_441_171_442_33).abs() < 1e-15);
        assert_eq!(g9(0.0), 0.0);
        assert_eq!(g9(0.1), 1.0);
        assert_eq!(g11(0.0, 1.0), 0.0);
        assert!((g11(0.0, 2.0) - LN_2).abs() < 1e-15);
    }

    #[test]
    fn treatment_score_and_assignment_hand_values() {
        // At x = 0: -0.5 + 2.25 - 1/3 + 0 - e^{-1} = 1.0487872254952244.
        let x = vec![0.0; X_DIM];
        let s = treatment_score(&x);
        assert!((s - 1.048_787_225_495_224_4).abs() < 1e-12, "s = {s}");
        assert_eq!(assign_treatment(s), 1);

        // Raising x2 to 2.5 lifts g2 from 2.25 to 6: s = 4.798787225495224.
        let mut x2 = x.clone();
        x2[1] = 2.5;
        let s2 = treatment_score(&x2);
        assert!((s2 - 4.798_787_225_495_224).abs() < 1e-12, "s = {s2}");
        assert_eq!(assign_treatment(s2), 2);

        // x2 = 3.0 lifts g2 to 8.25: s = 7.048787225495224.
        let mut x3 = x;
        x3[1] = 3.0;
        let s3 = treatment_score(&x3);
        assert!((s3 - 7.048_787_225_495_224).abs() < 1e-12, "s = {s3}");
        assert_eq!(assign_treatment(s3), 3);
    }

    #[test]
    fn threshold_boundaries_are_inclusive_on_the_left_arm() {
        assert_eq!(assign_treatment(4.0), 1);
        assert_eq!(assign_treatment(4.0 + 1e-12), 2);
        assert_eq!(assign_treatment(5.0), 2);
        assert_eq!(assign_treatment(5.0 + 1e-12), 3);
    }

    #[test]
    fn outcome_mean_hand_values_at_zero() {
        let x = vec![0.0; X_DIM];
        let mu1 = outcome_mean(&x, 1);
        assert!((mu1[0] - (1.0 + E)).abs() < 1e-12, "mu1 = {:?}", mu1);
        assert!((mu1[1] - (1.0 + 1.0f64.sin())).abs() < 1e-12);

        let mu2 = outcome_mean(&x, 2);
        assert!((mu2[0] - (1.0 + LN_2 + E * E)).abs() < 1e-12, "mu2 = {:?}", mu2);
        assert!((mu2[1] - (1.0 + LN_2 + 2.0f64.sin())).abs() < 1e-12);
    }

    #[test]
    fn observational_class_shares_are_interior() {
        let ds = generate_factual(Variant::Observational, 10_000, 1).unwrap();
        let mut counts = [0usize; 3];
        for r in &ds.records {
            counts[usize::from(r.t) - 1] += 1;
        }
        let n = ds.records.len();
        for (arm, &c) in counts.iter().enumerate() {
            assert!(c > 0 && c < n, "arm {} share degenerate: {c}/{n}", arm + 1);
            assert!(c >= n / 40, "arm {} unexpectedly rare: {c}/{n}", arm + 1);
        }
    }

    #[test]
    fn uniform_variants_pass_chi_square_at_point_01() {
        // Critical value for chi-square with 2 degrees of freedom at p = 0.01.
        const CRIT: f64 = 9.21034;
        for variant in [Variant::Interventional, Variant::Ood1] {
            let ds = generate_factual(variant, 10_000, 5).unwrap();
            let mut counts = [0f64; 3];
            for r in &ds.records {
                counts[usize::from(r.t) - 1] += 1.0;
            }
            let expected = ds.records.len() as f64 / 3.0;
            let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
            assert!(chi2 < CRIT, "{variant}: chi2 = {chi2}");
        }
    }

    #[test]
    fn shifted_scores_drive_ood_assignment() {
        let ds2 = generate_factual(Variant::Ood2, 200, 9).unwrap();
        for r in &ds2.records {
            assert_eq!(r.t, assign_treatment(treatment_score_ood2(&r.x)));
        }
        let ds3 = generate_factual(Variant::Ood3, 200, 9).unwrap();
        for r in &ds3.records {
            assert_eq!(r.t, assign_treatment(treatment_score_ood3(&r.x)));
        }
        // The two mechanisms disagree with the observational one somewhere.
        let obs = generate_factual(Variant::Observational, 200, 9).unwrap();
        assert_ne!(
            obs.records.iter().map(|r| r.t).collect::<Vec<_>>(),
            ds3.records.iter().map(|r| r.t).collect::<Vec<_>>()
        );
    }

    #[test]
    fn counterfactual_factual_arm_follows_the_observational_mechanism() {
        let ds = generate_counterfactual(300, 3);
        for r in &ds.records {
            assert_eq!(r.factual_t, assign_treatment(treatment_score(&r.x)));
            for t in 0..N_TREATMENTS {
                assert!(r.y[t][0].is_finite() && r.y[t][1].is_finite());
            }
        }
    }

    #[test]
    fn discrete_toy_assignment_and_classes() {
        let ds = generate_discrete(500, 2);
        let mut seen = [false; DISCRETE_CLASSES];
        for r in &ds.records {
            let expect = if r.x[0] + r.x[1] + r.x[2] > 0.0 { 1 } else { 2 };
            assert_eq!(r.t, expect);
            assert!((r.y as usize) < DISCRETE_CLASSES);
            seen[r.y as usize] = true;
        }
        assert!(seen.iter().filter(|&&s| s).count() >= 6, "outcome support too narrow");
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        for variant in Variant::ALL {
            let a = generate(variant, 50, 77);
            let b = generate(variant, 50, 77);
            let c = generate(variant, 50, 78);
            assert_eq!(a, b, "{variant}");
            assert_ne!(a, c, "{variant}");
        }
    }

    fn roundtrip(ds: &Dataset) -> Dataset {
        let mut buf = Vec::new();
        write_csv(ds, &mut buf).unwrap();
        read_csv(buf.as_slice(), ds.variant()).unwrap()
    }

    #[test]
    fn csv_roundtrip_is_bit_exact_for_every_variant() {
        for variant in Variant::ALL {
            let ds = generate(variant, 25, 13);
            let back = roundtrip(&ds);
            assert_eq!(ds, back, "{variant}");
        }
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let ds = generate(Variant::DiscreteToy, 3, 1);
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();

        // Drop a column from the second data row (line 3 of the file).
        let mut lines: Vec<&str> = text.lines().collect();
        let truncated = lines[2].rsplit_once(',').unwrap().0.to_string();
        lines[2] = &truncated;
        let mangled = lines.join("\n");
        match read_csv(mangled.as_bytes(), Variant::DiscreteToy) {
            Err(DataError::ColumnCount { line: 3, expected, got }) => {
                assert_eq!(expected, DISCRETE_X_DIM + 2);
                assert_eq!(got, DISCRETE_X_DIM + 1);
            }
            other => panic!("expected column-count error, got {other:?}"),
        }

        // Corrupt a float on the first data row.
        let mut lines: Vec<&str> = text.lines().collect();
        let bad = lines[1].replacen(char::is_numeric, "z", 1);
        lines[1] = &bad;
        let mangled = lines.join("\n");
        match read_csv(mangled.as_bytes(), Variant::DiscreteToy) {
            Err(DataError::Parse { line: 2, .. }) => {}
            other => panic!("expected parse error on line 2, got {other:?}"),
        }

        // Header from the wrong schema.
        match read_csv(text.as_bytes(), Variant::Observational) {
            Err(DataError::HeaderMismatch { .. }) => {}
            other => panic!("expected header mismatch, got {other:?}"),
        }

        // Out-of-range treatment.
        let mut lines: Vec<&str> = text.lines().collect();
        let fields: Vec<&str> = lines[1].split(',').collect();
        let mut patched: Vec<String> = fields.iter().map(|s| s.to_string()).collect();
        patched[DISCRETE_X_DIM] = "7".into();
        let joined = patched.join(",");
        lines[1] = &joined;
        let mangled = lines.join("\n");
        match read_csv(mangled.as_bytes(), Variant::DiscreteToy) {
            Err(DataError::TreatmentRange { line: 2, value: 7, .. }) => {}
            other => panic!("expected treatment-range error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn every_finite_score_lands_in_exactly_one_arm(s in -1e12f64..1e12) {
            let t = assign_treatment(s);
            prop_assert!((1..=3).contains(&t));
            let by_hand = if s <= 4.0 { 1 } else if s <= 5.0 { 2 } else { 3 };
            prop_assert_eq!(t, by_hand);
        }

        #[test]
        fn formatted_floats_roundtrip_exactly(v in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
            let s = fmt_f64(v);
            let back: f64 = s.parse().unwrap();
            prop_assert_eq!(v.to_bits(), back.to_bits());
        }
    }
}
