//! The meta-learning training loop and the triplet-only baseline.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{collect_gradients, inner_step, param_leaves, Graph, ParamSet, Var};
use crate::error::{Error, Result};
use crate::losses::{self, LossComponents, LossWeights, Reduction};
use crate::model::{forward, Checkpoint, Mode, ModelConfig, ModelState};
use crate::rng::{derive_seed, rng_for};
use crate::sampling::{
    camera_pair_schedule, sample_meta_batch, sample_pk_batch, BatchShape, CameraIndexedDataset,
    MetaBatch,
};

/// Breakpoints of the reference 240-epoch schedule: end of warmup, first
/// and second decay, end.
pub const SCHEDULE_BREAKPOINTS: [f64; 4] = [30.0, 120.0, 180.0, 240.0];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Cross-camera simulation with the meta losses.
    #[default]
    Cimn,
    /// Batch-hard triplet loss on mixed-camera P x K batches.
    Triplet,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cimn" => Ok(Method::Cimn),
            "triplet" => Ok(Method::Triplet),
            other => Err(Error::contract(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub seed: u64,
    pub max_epoch: usize,
    /// 0 selects floor(meta-train images / (P * K)) for every epoch.
    pub batches_per_epoch: usize,
    pub base_lr: f64,
    /// Scale the schedule breakpoints by `max_epoch / 240`.
    pub compress_schedule: bool,
    /// Inner step size relative to the outer one.
    pub inner_lr_scale: f64,
    pub first_order: bool,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub p: usize,
    pub k: usize,
    pub r: usize,
    pub weights: LossWeights,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Cimn,
            seed: 0,
            max_epoch: 240,
            batches_per_epoch: 0,
            base_lr: 3.5e-4,
            compress_schedule: false,
            inner_lr_scale: 1.0,
            first_order: false,
            checkpoint_every: 0,
            p: 8,
            k: 2,
            r: 1,
            weights: LossWeights::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Short-budget preset for the synthetic benchmark: 60 compressed epochs
    /// of 8 batches, per-sample mean reduction and a larger step size.
    pub fn desk() -> Self {
        let weights = LossWeights {
            reduction: Reduction::Mean,
            ..LossWeights::default()
        };
        TrainConfig {
            max_epoch: 60,
            batches_per_epoch: 8,
            base_lr: 0.2,
            compress_schedule: true,
            weights,
            ..TrainConfig::default()
        }
    }

    pub fn shape(&self) -> BatchShape {
        BatchShape {
            p: self.p,
            k: self.k,
            r: self.r,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.model.validate()?;
        if self.max_epoch == 0 {
            return Err(Error::contract("max_epoch must be >= 1"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::contract(format!(
                "base_lr must be > 0, got {}",
                self.base_lr
            )));
        }
        if !(self.inner_lr_scale >= 0.0 && self.inner_lr_scale.is_finite()) {
            return Err(Error::contract("inner_lr_scale must be finite and >= 0"));
        }
        if self.p == 0 || self.k < 2 || self.r == 0 {
            return Err(Error::contract(format!(
                "need P >= 1, K >= 2, r >= 1; got P={}, K={}, r={}",
                self.p, self.k, self.r
            )));
        }
        Ok(())
    }

    /// Step size for the 1-based epoch `t`.
    pub fn lr(&self, t: usize) -> Result<f64> {
        lr_schedule(t, self.max_epoch, self.base_lr, self.compress_schedule)
    }
}

/// Warmup then two tenfold decays.
///
/// Without compression the breakpoints are epochs 30, 120, 180 and the
/// schedule ends at 240; with compression they scale by `max_epoch / 240`.
pub fn lr_schedule(t: usize, max_epoch: usize, base_lr: f64, compress: bool) -> Result<f64> {
    if t == 0 || t > max_epoch {
        return Err(Error::contract(format!(
            "epoch {t} outside 1..={max_epoch}"
        )));
    }
    let scale = if compress {
        max_epoch as f64 / SCHEDULE_BREAKPOINTS[3]
    } else {
        1.0
    };
    let [warmup, first, second, _] = SCHEDULE_BREAKPOINTS.map(|b| b * scale);
    let t = t as f64;
    Ok(if t <= warmup {
        base_lr * t / warmup
    } else if t <= first {
        base_lr
    } else if t <= second {
        base_lr * 0.1
    } else {
        base_lr * 0.01
    })
}

/// Loss terms of one step, evaluated before the update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub meta_train: f64,
    pub meta_test: f64,
    pub simulation: f64,
    pub meta_triplet: f64,
    pub meta_classification: f64,
    pub alignment: f64,
    pub total: f64,
}

/// Maps identity labels onto classifier rows.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap(BTreeMap<u32, u32>);

impl LabelMap {
    pub fn new(split: &CameraIndexedDataset) -> Self {
        LabelMap(
            split
                .identities()
                .into_iter()
                .enumerate()
                .map(|(i, id)| (id, i as u32))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn classes(&self, identities: &[u32]) -> Result<Vec<u32>> {
        identities
            .iter()
            .map(|id| {
                self.0
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::contract(format!("identity {id} has no class")))
            })
            .collect()
    }
}

fn check_terms(terms: &[(&str, Var<'_>)]) -> Result<()> {
    for (name, v) in terms {
        if !v.item().is_finite() {
            return Err(Error::NumericFailure {
                node: v.id(),
                op: v.graph().op_name(v.id()),
                context: format!("loss term `{name}`"),
            });
        }
    }
    Ok(())
}

fn sgd(state: &mut ModelState, grads: &ParamSet, lr: f64) -> Result<()> {
    let mut next = state.params.clone();
    next.axpy(-lr, grads)?;
    if !next.is_finite() {
        return Err(Error::NumericFailure {
            node: 0,
            op: "update",
            context: "parameter update".into(),
        });
    }
    state.params = next;
    Ok(())
}

/// One meta-optimization step: simulate on the meta-train set, adapt, score
/// the adapted parameters on the meta-test set, add the meta losses and
/// update `state` in place. Only the original parameters are updated.
pub fn meta_step(
    state: &mut ModelState,
    split: &CameraIndexedDataset,
    labels: &LabelMap,
    batch: &MetaBatch,
    config: &TrainConfig,
    lr: f64,
) -> Result<LossBreakdown> {
    let w = &config.weights;
    let (x_tr, x_te) = (split.features(&batch.mtr), split.features(&batch.mte));
    let (id_tr, id_te) = (split.labels(&batch.mtr), split.labels(&batch.mte));
    let (cls_tr, cls_te) = (labels.classes(&id_tr)?, labels.classes(&id_te)?);

    let g = Graph::new();
    let theta = param_leaves(&g, &state.params);
    let mut running = state.running.clone();
    let tr = forward(
        &state.config,
        &g,
        &theta,
        &x_tr,
        Mode::Train(Some(&mut running)),
    )?;
    let l_tr = losses::batch_hard_triplet(tr.embedding, &id_tr, w.margin, w.reduction)?;
    check_terms(&[("meta-train triplet", l_tr)])?;

    let mut inner = g.grad(l_tr, &theta);
    if config.first_order {
        for slot in inner.iter_mut() {
            *slot = slot.map(Var::detach);
        }
    }
    let adapted = inner_step(&theta, &inner, lr * config.inner_lr_scale)?;
    let te = forward(&state.config, &g, &adapted, &x_te, Mode::Train(None))?;
    let l_te = losses::batch_hard_triplet(te.embedding, &id_te, w.margin, w.reduction)?;

    let tap = state.config.alignment_tap;
    let (f_tr, f_te) = if w.standardize_alignment {
        losses::standardize_pair(tr.alignment(tap), te.alignment(tap))?
    } else {
        (tr.alignment(tap), te.alignment(tap))
    };
    let sigma = w.resolve_bandwidth(&f_tr.value(), &f_te.value());
    let components = LossComponents {
        simulation: losses::simulation_combine(l_tr, l_te, w.lambda),
        meta_triplet: losses::meta_triplet(
            tr.embedding,
            &id_tr,
            te.embedding,
            &id_te,
            w.margin,
            w.reduction,
        )?,
        meta_classification: losses::cross_entropy(tr.logits, &cls_tr, w.reduction)?
            + losses::cross_entropy(te.logits, &cls_te, w.reduction)?,
        alignment: losses::meta_camera_alignment(f_tr, f_te, sigma, w.mmd_cross_coefficient())?,
    };
    let total = losses::total_loss(&components, w);
    check_terms(&[
        ("meta-test triplet", l_te),
        ("meta triplet", components.meta_triplet),
        ("meta classification", components.meta_classification),
        ("camera alignment", components.alignment),
        ("total", total),
    ])?;

    let grads = g.grad(total, &theta);
    g.check_finite()
        .map_err(|e| e.in_context("meta-gradient"))?;
    let grads = collect_gradients(&state.params, &grads)?;
    let breakdown = LossBreakdown {
        meta_train: l_tr.item(),
        meta_test: l_te.item(),
        simulation: components.simulation.item(),
        meta_triplet: components.meta_triplet.item(),
        meta_classification: components.meta_classification.item(),
        alignment: components.alignment.item(),
        total: total.item(),
    };
    sgd(state, &grads, lr)?;
    state.running = running;
    Ok(breakdown)
}

/// One SGD step of batch-hard triplet loss on `indices`.
pub fn triplet_step(
    state: &mut ModelState,
    split: &CameraIndexedDataset,
    indices: &[usize],
    config: &TrainConfig,
    lr: f64,
) -> Result<LossBreakdown> {
    let w = &config.weights;
    let x = split.features(indices);
    let ids = split.labels(indices);
    let g = Graph::new();
    let theta = param_leaves(&g, &state.params);
    let mut running = state.running.clone();
    let taps = forward(
        &state.config,
        &g,
        &theta,
        &x,
        Mode::Train(Some(&mut running)),
    )?;
    let loss = losses::batch_hard_triplet(taps.embedding, &ids, w.margin, w.reduction)?;
    check_terms(&[("triplet", loss)])?;
    let grads = g.grad(loss, &theta);
    g.check_finite()
        .map_err(|e| e.in_context("triplet gradient"))?;
    let grads = collect_gradients(&state.params, &grads)?;
    let value = loss.item();
    sgd(state, &grads, lr)?;
    state.running = running;
    Ok(LossBreakdown {
        meta_train: value,
        simulation: value,
        total: value,
        ..LossBreakdown::default()
    })
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Zero-based epoch.
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub mtr_cameras: Vec<u32>,
    pub mte_cameras: Vec<u32>,
    #[serde(flatten)]
    pub losses: LossBreakdown,
}

/// Receives progress from [`train`].
pub trait Observer {
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    /// Called after every epoch with the number of completed epochs.
    fn on_epoch(&mut self, _checkpoint: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

impl Observer for () {}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepRecord>,
}

/// Model configuration adjusted to the data: input width and class count.
pub fn fit_model_config(config: &TrainConfig, split: &CameraIndexedDataset) -> Result<ModelConfig> {
    let input_dim = split.to_dataset().feature_dim()?;
    Ok(ModelConfig {
        input_dim,
        num_classes: LabelMap::new(split).len(),
        ..config.model.clone()
    })
}

/// Initial state for a run of `config` on `split`.
pub fn initial_state(config: &TrainConfig, split: &CameraIndexedDataset) -> Result<ModelState> {
    ModelState::new(
        fit_model_config(config, split)?,
        derive_seed(config.seed, &[0x1417]),
    )
}

fn batches_for(
    config: &TrainConfig,
    split: &CameraIndexedDataset,
    mtr_camera: Option<u32>,
) -> usize {
    if config.batches_per_epoch > 0 {
        return config.batches_per_epoch;
    }
    let per_batch = config.p * config.k;
    let images = match mtr_camera {
        Some(c) => split.camera_samples(c).len(),
        None => split.len() / 2,
    };
    (images / per_batch).max(1)
}

/// Train from scratch, or continue from `resume` (a checkpoint of an earlier
/// run of the same config). A resumed run reproduces the uninterrupted one.
pub fn train(
    config: &TrainConfig,
    split: &CameraIndexedDataset,
    resume: Option<Checkpoint>,
    observer: &mut dyn Observer,
) -> Result<TrainOutcome> {
    train_until(config, split, resume, config.max_epoch, observer)
}

/// As [`train`], but stop once `stop_epoch` epochs have completed.
pub fn train_until(
    config: &TrainConfig,
    split: &CameraIndexedDataset,
    resume: Option<Checkpoint>,
    stop_epoch: usize,
    observer: &mut dyn Observer,
) -> Result<TrainOutcome> {
    config.validate()?;
    if stop_epoch > config.max_epoch {
        return Err(Error::contract(format!(
            "stop epoch {stop_epoch} exceeds max_epoch {}",
            config.max_epoch
        )));
    }
    let labels = LabelMap::new(split);
    let cameras = split.cameras();
    let mut checkpoint = match resume {
        Some(c) => {
            if c.state.config != fit_model_config(config, split)? {
                return Err(Error::contract(
                    "checkpoint model does not match the run config",
                ));
            }
            if c.epoch > config.max_epoch {
                return Err(Error::contract(format!(
                    "checkpoint epoch {} exceeds max_epoch {}",
                    c.epoch, config.max_epoch
                )));
            }
            c
        }
        None => Checkpoint {
            epoch: 0,
            state: initial_state(config, split)?,
        },
    };
    let mut log = Vec::new();
    for epoch in checkpoint.epoch..stop_epoch {
        let lr = config.lr(epoch + 1)?;
        let pair = match config.method {
            Method::Cimn => Some(camera_pair_schedule(epoch, cameras.len(), config.seed)?),
            Method::Triplet => None,
        };
        let n_batches = batches_for(config, split, pair.map(|p| cameras[p.0]));
        for step in 0..n_batches {
            let mut rng = rng_for(config.seed, &[0xba7c, epoch as u64, step as u64]);
            let state = &mut checkpoint.state;
            let (losses, mtr_cameras, mte_cameras) = match pair {
                Some(pair) => {
                    let batch = sample_meta_batch(split, pair, config.shape(), &mut rng)?;
                    let l = meta_step(state, split, &labels, &batch, config, lr)
                        .map_err(|e| e.in_context(&format!("epoch {epoch} step {step}")))?;
                    (l, batch.mtr_cameras, batch.mte_cameras)
                }
                None => {
                    let idx = sample_pk_batch(split, 2 * config.p, config.k, &mut rng)?;
                    let l = triplet_step(state, split, &idx, config, lr)?;
                    (l, cameras.clone(), Vec::new())
                }
            };
            let record = StepRecord {
                epoch,
                step,
                lr,
                mtr_cameras,
                mte_cameras,
                losses,
            };
            observer.on_step(&record)?;
            log.push(record);
        }
        checkpoint.epoch = epoch + 1;
        observer.on_epoch(&checkpoint)?;
    }
    Ok(TrainOutcome { checkpoint, log })
}

/// Writes `metrics.jsonl`, a wall-clock `timing.jsonl` and checkpoints into
/// a run directory.
///
/// Wall time lives in its own file so the metrics log is identical across
/// reruns of the same config.
pub struct DirObserver {
    dir: PathBuf,
    checkpoint_every: usize,
    metrics: fs::File,
    timing: fs::File,
    started: std::time::Instant,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const LATEST_CHECKPOINT: &str = "checkpoint-latest.json";

impl DirObserver {
    /// Start a fresh run directory, or continue one after `resume_epoch`
    /// completed epochs (later log lines are discarded).
    pub fn new(dir: &Path, checkpoint_every: usize, resume_epoch: Option<usize>) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let keep = |name: &str| -> Result<String> {
            let path = dir.join(name);
            let Some(from) = resume_epoch else {
                return Ok(String::new());
            };
            if !path.exists() {
                return Ok(String::new());
            }
            let mut kept = String::new();
            for line in fs::read_to_string(&path)?.lines() {
                let v: serde_json::Value = serde_json::from_str(line)?;
                if v["epoch"].as_u64().is_some_and(|e| (e as usize) < from) {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
            Ok(kept)
        };
        let metrics_kept = keep(METRICS_FILE)?;
        let timing_kept = keep(TIMING_FILE)?;
        fs::write(dir.join(METRICS_FILE), metrics_kept)?;
        fs::write(dir.join(TIMING_FILE), timing_kept)?;
        let open = |name: &str| fs::OpenOptions::new().append(true).open(dir.join(name));
        Ok(DirObserver {
            dir: dir.to_path_buf(),
            checkpoint_every,
            metrics: open(METRICS_FILE)?,
            timing: open(TIMING_FILE)?,
            started: std::time::Instant::now(),
        })
    }

    pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
        dir.join(format!("checkpoint-epoch{epoch:04}.json"))
    }
}

impl Observer for DirObserver {
    fn on_step(&mut self, record: &StepRecord) -> Result<()> {
        writeln!(self.metrics, "{}", serde_json::to_string(record)?)?;
        let timing = serde_json::json!({
            "epoch": record.epoch,
            "step": record.step,
            "wall_seconds": self.started.elapsed().as_secs_f64(),
        });
        writeln!(self.timing, "{timing}")?;
        Ok(())
    }

    fn on_epoch(&mut self, checkpoint: &Checkpoint) -> Result<()> {
        if self.checkpoint_every > 0 && checkpoint.epoch.is_multiple_of(self.checkpoint_every) {
            checkpoint.save(&Self::checkpoint_path(&self.dir, checkpoint.epoch))?;
        }
        checkpoint.save(&self.dir.join(LATEST_CHECKPOINT))?;
        self.metrics.flush()?;
        Ok(())
    }
}
