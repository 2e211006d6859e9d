//! Train-and-evaluate harnesses: method comparison, the CCSP stability sweep,
//! the loss ablation grid and one-parameter hyperparameter sweeps.

use serde::{Deserialize, Serialize};

use super::{evaluate_model, EvalReport, Protocol};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::sampling::{build_sct_split, CameraIndexedDataset};
use crate::synthdata::{generate, GeneratorConfig};
use crate::training::{train, Method, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub protocol: Protocol,
    /// Every cell is trained once per seed; the seed drives both data and training.
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            generator: GeneratorConfig::default(),
            train: TrainConfig::desk(),
            protocol: Protocol::default(),
            seeds: (0..5).collect(),
        }
    }
}

/// One trained-and-evaluated run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub label: String,
    pub method: Method,
    pub rho: f64,
    pub seed: u64,
    pub report: EvalReport,
}

/// Medians over seeds of one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub label: String,
    pub method: Method,
    pub rho: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map_score: f64,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub rows: Vec<Row>,
    pub cells: Vec<Cell>,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len().is_multiple_of(2) {
        0.5 * (v[mid - 1] + v[mid])
    } else {
        v[mid]
    }
}

/// Generate data for `seed`, train, and evaluate on the held-out identities.
///
/// With `ccsp_fraction == 0` the training data goes through the
/// single-camera split; otherwise it is used as generated.
pub fn run_cell(
    generator: &GeneratorConfig,
    train_config: &TrainConfig,
    protocol: &Protocol,
    seed: u64,
) -> Result<EvalReport> {
    let generator = GeneratorConfig {
        seed,
        ..generator.clone()
    };
    let config = TrainConfig {
        seed,
        ..train_config.clone()
    };
    let data = generate(&generator)?;
    let split = if generator.ccsp_fraction == 0.0 {
        build_sct_split(&data.train, config.k, seed)?.split
    } else {
        CameraIndexedDataset::new(data.train.clone())
    };
    let outcome = train(&config, &split, None, &mut ())?;
    evaluate_model(&outcome.checkpoint.state, &data.test, protocol)
}

fn run_row(
    cfg: &ExperimentConfig,
    label: &str,
    generator: &GeneratorConfig,
    train_config: &TrainConfig,
    cells: &mut Vec<Cell>,
) -> Result<Row> {
    if cfg.seeds.is_empty() {
        return Err(Error::contract("an experiment needs at least one seed"));
    }
    let mut reports = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let report = run_cell(generator, train_config, &cfg.protocol, seed)?;
        log::info!(
            "{label} rho={} seed={seed}: rank-1 {:.3} mAP {:.3}",
            generator.ccsp_fraction,
            report.rank(1),
            report.map_score
        );
        cells.push(Cell {
            label: label.to_string(),
            method: train_config.method,
            rho: generator.ccsp_fraction,
            seed,
            report: report.clone(),
        });
        reports.push(report);
    }
    let med = |f: &dyn Fn(&EvalReport) -> f64| median(&reports.iter().map(f).collect::<Vec<_>>());
    Ok(Row {
        label: label.to_string(),
        method: train_config.method,
        rho: generator.ccsp_fraction,
        rank1: med(&|r| r.rank(1)),
        rank5: med(&|r| r.rank(5)),
        rank10: med(&|r| r.rank(10)),
        map_score: med(&|r| r.map_score),
        seeds: reports.len(),
    })
}

fn with_method(cfg: &TrainConfig, method: Method) -> TrainConfig {
    TrainConfig {
        method,
        ..cfg.clone()
    }
}

/// CIMN against the triplet-only baseline on the single-camera split, with
/// identical data, seeds and step budget.
pub fn method_comparison(cfg: &ExperimentConfig) -> Result<Table> {
    let generator = GeneratorConfig {
        ccsp_fraction: 0.0,
        ..cfg.generator.clone()
    };
    let mut cells = Vec::new();
    let rows = [Method::Cimn, Method::Triplet]
        .into_iter()
        .map(|m| {
            run_row(
                cfg,
                method_name(m),
                &generator,
                &with_method(&cfg.train, m),
                &mut cells,
            )
        })
        .collect::<Result<_>>()?;
    Ok(Table { rows, cells })
}

pub fn method_name(m: Method) -> &'static str {
    match m {
        Method::Cimn => "cimn",
        Method::Triplet => "triplet",
    }
}

/// The CCSP fractions of the stability sweep: 0, 0.2, ..., 1.
pub fn default_rhos() -> Vec<f64> {
    (0..=5).map(|i| i as f64 / 5.0).collect()
}

/// Train both methods at every CCSP fraction; rows sorted by fraction.
pub fn stability_sweep(cfg: &ExperimentConfig, rhos: &[f64]) -> Result<Table> {
    let mut rhos = rhos.to_vec();
    rhos.sort_by(f64::total_cmp);
    let mut cells = Vec::new();
    let mut rows = Vec::new();
    for rho in rhos {
        let generator = GeneratorConfig {
            ccsp_fraction: rho,
            ..cfg.generator.clone()
        };
        for m in [Method::Cimn, Method::Triplet] {
            rows.push(run_row(
                cfg,
                method_name(m),
                &generator,
                &with_method(&cfg.train, m),
                &mut cells,
            )?);
        }
    }
    Ok(Table { rows, cells })
}

/// Per-seed max-minus-min Rank-1 across CCSP fractions, then the median
/// over seeds.
pub fn rank1_spread(table: &Table, method: Method) -> f64 {
    let mut seeds: Vec<u64> = table.cells.iter().map(|c| c.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let spreads: Vec<f64> = seeds
        .iter()
        .map(|&s| {
            let v: Vec<f64> = table
                .cells
                .iter()
                .filter(|c| c.seed == s && c.method == method)
                .map(|c| c.report.rank(1))
                .collect();
            v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                - v.iter().copied().fold(f64::INFINITY, f64::min)
        })
        .collect();
    median(&spreads)
}

/// The four loss configurations of the ablation, from simulation only to
/// the full objective; the last row uses the configured weights.
pub fn ablation_configs(weights: &LossWeights) -> Vec<(&'static str, LossWeights)> {
    let set = |g1, g2, g3| LossWeights {
        gamma1: g1,
        gamma2: g2,
        gamma3: g3,
        ..*weights
    };
    vec![
        ("ccs", set(0.0, 0.0, 0.0)),
        ("ccs+mtri", set(weights.gamma1, 0.0, 0.0)),
        ("ccs+mtri+mcl", set(weights.gamma1, weights.gamma2, 0.0)),
        ("full", *weights),
    ]
}

pub fn ablation_grid(cfg: &ExperimentConfig) -> Result<Table> {
    let generator = GeneratorConfig {
        ccsp_fraction: 0.0,
        ..cfg.generator.clone()
    };
    let mut cells = Vec::new();
    let rows = ablation_configs(&cfg.train.weights)
        .into_iter()
        .map(|(label, weights)| {
            let t = TrainConfig {
                method: Method::Cimn,
                weights,
                ..cfg.train.clone()
            };
            run_row(cfg, label, &generator, &t, &mut cells)
        })
        .collect::<Result<_>>()?;
    Ok(Table { rows, cells })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hyperparameter {
    Lambda,
    Gamma1,
    Gamma2,
    Gamma3,
}

impl std::str::FromStr for Hyperparameter {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(Hyperparameter::Lambda),
            "gamma1" => Ok(Hyperparameter::Gamma1),
            "gamma2" => Ok(Hyperparameter::Gamma2),
            "gamma3" => Ok(Hyperparameter::Gamma3),
            other => Err(Error::contract(format!("unknown hyperparameter `{other}`"))),
        }
    }
}

impl Hyperparameter {
    pub fn name(self) -> &'static str {
        match self {
            Hyperparameter::Lambda => "lambda",
            Hyperparameter::Gamma1 => "gamma1",
            Hyperparameter::Gamma2 => "gamma2",
            Hyperparameter::Gamma3 => "gamma3",
        }
    }

    pub fn apply(self, weights: &LossWeights, value: f64) -> LossWeights {
        let mut w = *weights;
        match self {
            Hyperparameter::Lambda => w.lambda = value,
            Hyperparameter::Gamma1 => w.gamma1 = value,
            Hyperparameter::Gamma2 => w.gamma2 = value,
            Hyperparameter::Gamma3 => w.gamma3 = value,
        }
        w
    }

    /// Grid used when none is given: 0.1..0.9 for the trade-off, a
    /// log-spaced range for the weights.
    pub fn default_grid(self) -> Vec<f64> {
        match self {
            Hyperparameter::Lambda => (1..=9).map(|i| i as f64 / 10.0).collect(),
            Hyperparameter::Gamma3 => vec![0.0, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2],
            _ => vec![0.0, 0.25, 0.5, 1.0, 2.0, 4.0],
        }
    }
}

/// Vary one weight of the objective with everything else fixed.
pub fn hyperparameter_sweep(
    cfg: &ExperimentConfig,
    param: Hyperparameter,
    values: &[f64],
) -> Result<Table> {
    let generator = GeneratorConfig {
        ccsp_fraction: 0.0,
        ..cfg.generator.clone()
    };
    let mut cells = Vec::new();
    let rows = values
        .iter()
        .map(|&v| {
            let t = TrainConfig {
                method: Method::Cimn,
                weights: param.apply(&cfg.train.weights, v),
                ..cfg.train.clone()
            };
            run_row(
                cfg,
                &format!("{}={v}", param.name()),
                &generator,
                &t,
                &mut cells,
            )
        })
        .collect::<Result<_>>()?;
    Ok(Table { rows, cells })
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,method,rho,rank1,rank5,rank10,map,seeds\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.label,
                method_name(r.method),
                r.rho,
                r.rank1,
                r.rank5,
                r.rank10,
                r.map_score,
                r.seeds
            ));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<16} {:<8} {:>5} {:>8} {:>8} {:>8} {:>8}\n",
            "label", "method", "rho", "rank-1", "rank-5", "rank-10", "mAP"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<16} {:<8} {:>5.2} {:>7.2}% {:>7.2}% {:>7.2}% {:>7.2}%\n",
                r.label,
                method_name(r.method),
                r.rho,
                100.0 * r.rank1,
                100.0 * r.rank5,
                100.0 * r.rank10,
                100.0 * r.map_score
            ));
        }
        out
    }

    pub fn row(&self, label: &str, rho: f64) -> Option<&Row> {
        self.rows.iter().find(|r| r.label == label && r.rho == rho)
    }
}
