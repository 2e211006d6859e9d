use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use cimn_core::eval::evaluate_model;
use cimn_core::eval::experiments::{
    ablation_grid, hyperparameter_sweep, method_comparison, rank1_spread, stability_sweep,
    ExperimentConfig, Hyperparameter, Table,
};
use cimn_core::gradcheck;
use cimn_core::model::Checkpoint;
use cimn_core::sampling::{
    build_cg_split, build_sct_split, CameraIndexedDataset, Dataset, SplitFile, SplitMode,
};
use cimn_core::synthdata::{generate as generate_data, ground_truth_separability};
use cimn_core::training::{self, DirObserver, Method};

use crate::config::{ensure_file, env_out_root, output_dir, RunConfig};
use crate::{Common, MethodArg, Mode, ParamArg, SweepKind};

pub const TRAIN_MANIFEST: &str = "train.jsonl";
pub const TEST_MANIFEST: &str = "test.jsonl";
pub const SPLIT_FILE: &str = "split.json";
pub const REPORT_FILE: &str = "report.json";

/// Resolved config and output directory of one invocation.
struct Run {
    config: RunConfig,
    dir: PathBuf,
}

fn prepare(common: &Common, default_dir: &str) -> Result<Run> {
    if let Some(path) = &common.config {
        ensure_file(path, "config")?;
    }
    let mut config = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        config.override_seed(seed);
    }
    let root = common.out_root.clone().or_else(env_out_root);
    let dir = output_dir(common.out.as_deref(), default_dir, root.as_deref());
    Ok(Run { config, dir })
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    ensure_file(path, "manifest")?;
    Dataset::load(path).with_context(|| format!("cannot load manifest {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

pub fn generate(common: &Common) -> Result<ExitCode> {
    let run = prepare(common, "runs/data")?;
    let data = generate_data(&run.config.generator)?;
    run.config.write_resolved(&run.dir)?;
    data.train.save(&run.dir.join(TRAIN_MANIFEST))?;
    data.test.save(&run.dir.join(TEST_MANIFEST))?;
    let sep = ground_truth_separability(&data, &data.test)?;
    println!(
        "train: {} samples, {} identities, {} cameras",
        data.train.len(),
        data.train.identities().len(),
        data.train.cameras().len()
    );
    println!(
        "test: {} samples, {} identities",
        data.test.len(),
        data.test.identities().len()
    );
    println!(
        "ground-truth nearest-centroid accuracy on test: {:.3}",
        sep.accuracy
    );
    println!("wrote {}", run.dir.display());
    Ok(ExitCode::SUCCESS)
}

/// Apply the configured split to `dataset`.
fn build_split(config: &RunConfig, dataset: &Dataset) -> Result<(CameraIndexedDataset, usize)> {
    let s = &config.split;
    let sct = build_sct_split(dataset, s.min_images, s.seed)?;
    Ok(match s.mode {
        SplitMode::Sct => (sct.split, sct.dropped_identities),
        SplitMode::Cg => {
            let size = if s.size == 0 { sct.split.len() } else { s.size };
            (
                CameraIndexedDataset::new(build_cg_split(dataset, size, s.seed)?),
                0,
            )
        }
    })
}

pub fn split(
    common: &Common,
    manifest: &Path,
    mode: Option<Mode>,
    size: Option<usize>,
) -> Result<ExitCode> {
    let mut run = prepare(common, "runs/split")?;
    if let Some(mode) = mode {
        run.config.split.mode = match mode {
            Mode::Sct => SplitMode::Sct,
            Mode::Cg => SplitMode::Cg,
        };
    }
    if let Some(size) = size {
        run.config.split.size = size;
    }
    let dataset = load_dataset(manifest)?;
    let (split, dropped) = build_split(&run.config, &dataset)?;
    run.config.write_resolved(&run.dir)?;
    let file = SplitFile::new(
        run.config.split.mode,
        run.config.split.seed,
        dropped,
        &split.to_dataset(),
    );
    file.save(&run.dir.join(SPLIT_FILE))?;
    println!(
        "retained {} of {} samples, {} identities; dropped {} identities",
        split.len(),
        dataset.len(),
        split.identities().len(),
        dropped
    );
    println!(
        "single camera per identity: {}",
        split.is_single_camera_per_identity()
    );
    println!("wrote {}", run.dir.join(SPLIT_FILE).display());
    Ok(ExitCode::SUCCESS)
}

pub fn train(
    common: &Common,
    manifest: Option<&Path>,
    split_file: Option<&Path>,
    method: Option<MethodArg>,
    resume: Option<&Path>,
) -> Result<ExitCode> {
    let mut run = prepare(common, "runs/train")?;
    if let Some(m) = method {
        run.config.train.method = match m {
            MethodArg::Cimn => Method::Cimn,
            MethodArg::Triplet => Method::Triplet,
        };
    }
    let split = match (manifest, split_file) {
        (Some(m), Some(s)) => {
            ensure_file(s, "split file")?;
            let file = SplitFile::load(s)?;
            CameraIndexedDataset::new(load_dataset(m)?.subset_by_ids(&file.sample_ids)?)
        }
        (Some(m), None) => build_split(&run.config, &load_dataset(m)?)?.0,
        (None, _) => build_split(&run.config, &generate_data(&run.config.generator)?.train)?.0,
    };
    let resume = match resume {
        Some(path) => {
            ensure_file(path, "checkpoint")?;
            Some(Checkpoint::load(path)?)
        }
        None => None,
    };
    run.config.write_resolved(&run.dir)?;
    let cfg = &run.config.train;
    log::info!(
        "training {:?} on {} samples for {} epochs",
        cfg.method,
        split.len(),
        cfg.max_epoch
    );
    let mut observer = DirObserver::new(
        &run.dir,
        cfg.checkpoint_every,
        resume.as_ref().map(|c| c.epoch),
    )?;
    let outcome = training::train(cfg, &split, resume, &mut observer)?;
    if let Some(last) = outcome.log.last() {
        println!(
            "epoch {} step {}: total loss {:.6}",
            last.epoch + 1,
            last.step,
            last.losses.total
        );
    }
    println!(
        "wrote {}",
        run.dir.join(training::LATEST_CHECKPOINT).display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn eval(common: &Common, checkpoint: &Path, manifest: Option<&Path>) -> Result<ExitCode> {
    let run = prepare(common, "runs/eval")?;
    ensure_file(checkpoint, "checkpoint")?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let dataset = match manifest {
        Some(m) => load_dataset(m)?,
        None => generate_data(&run.config.generator)?.test,
    };
    let report = evaluate_model(&ckpt.state, &dataset, &run.config.protocol)?;
    run.config.write_resolved(&run.dir)?;
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    write_text(&run.dir.join(REPORT_FILE), &text)?;
    print!("{}", report.to_table());
    Ok(ExitCode::SUCCESS)
}

fn write_table(dir: &Path, table: &Table) -> Result<()> {
    write_text(&dir.join("table.csv"), &table.to_csv())?;
    write_text(&dir.join("table.txt"), &table.to_text())?;
    let path = dir.join("cells.jsonl");
    let mut f =
        fs::File::create(&path).with_context(|| format!("cannot write {}", path.display()))?;
    for cell in &table.cells {
        writeln!(f, "{}", serde_json::to_string(cell)?)?;
    }
    Ok(())
}

pub fn sweep(common: &Common, kind: SweepKind, param: Option<ParamArg>) -> Result<ExitCode> {
    let mut run = prepare(common, "runs/sweep")?;
    if let Some(p) = param {
        run.config.sweep.param = match p {
            ParamArg::Lambda => Hyperparameter::Lambda,
            ParamArg::Gamma1 => Hyperparameter::Gamma1,
            ParamArg::Gamma2 => Hyperparameter::Gamma2,
            ParamArg::Gamma3 => Hyperparameter::Gamma3,
        };
    }
    run.config.write_resolved(&run.dir)?;
    let c = &run.config;
    let exp = ExperimentConfig {
        generator: c.generator.clone(),
        train: c.train.clone(),
        protocol: c.protocol.clone(),
        seeds: c.sweep.seeds.clone(),
    };
    let table = match kind {
        SweepKind::Comparison => method_comparison(&exp)?,
        SweepKind::Stability => stability_sweep(&exp, &c.sweep.rhos)?,
        SweepKind::Ablation => ablation_grid(&exp)?,
        SweepKind::Hyperparam => {
            let values = if c.sweep.values.is_empty() {
                c.sweep.param.default_grid()
            } else {
                c.sweep.values.clone()
            };
            hyperparameter_sweep(&exp, c.sweep.param, &values)?
        }
    };
    write_table(&run.dir, &table)?;
    print!("{}", table.to_text());
    if kind == SweepKind::Stability {
        println!(
            "rank-1 spread over rho: cimn {:.3}, triplet {:.3}",
            rank1_spread(&table, Method::Cimn),
            rank1_spread(&table, Method::Triplet)
        );
    }
    println!("wrote {}", run.dir.display());
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(common: &Common) -> Result<ExitCode> {
    let seed = common.seed.unwrap_or(0);
    let seeds = gradcheck::default_seeds(seed);
    let report = gradcheck::run_suite(&seeds)?;
    print!("{}", report.to_table());
    for f in report.failures() {
        eprintln!(
            "failed: {} seed {} relative error {:.3e} > {:.0e}",
            f.name, f.seed, f.relative_error, f.bound
        );
    }
    if report.passed() {
        println!(
            "all {} checks passed on seeds {}..{}",
            report.checks.len(),
            seed,
            seed + seeds.len() as u64
        );
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::FAILURE)
    }
}
