//! Four-stage feedforward extractor with a batch-normalization neck and a
//! linear classifier head.
//!
//! Each stage is `affine -> relu -> layer norm`. The stage-4 output is
//! projected to the embedding (pooling is the identity for vector inputs),
//! the embedding passes through the neck and then the classifier. Triplet
//! losses read the pre-neck embedding, classification reads the logits, and
//! camera alignment reads the configured stage output.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamSet, Var};
use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-5;
pub const NECK_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignmentTap {
    #[default]
    Stage2,
    Stage3,
    Stage4,
}

impl AlignmentTap {
    /// Zero-based index into [`ForwardTaps::stages`].
    pub fn stage_index(self) -> usize {
        match self {
            AlignmentTap::Stage2 => 1,
            AlignmentTap::Stage3 => 2,
            AlignmentTap::Stage4 => 3,
        }
    }
}

impl std::str::FromStr for AlignmentTap {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stage2" => Ok(AlignmentTap::Stage2),
            "stage3" => Ok(AlignmentTap::Stage3),
            "stage4" => Ok(AlignmentTap::Stage4),
            other => Err(Error::contract(format!("unknown alignment tap `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub stage_dims: [usize; 4],
    pub embedding_dim: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub alignment_tap: AlignmentTap,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 16,
            stage_dims: [32, 32, 32, 32],
            embedding_dim: 16,
            num_classes: 100,
            alignment_tap: AlignmentTap::Stage2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims_ok = self.input_dim >= 1
            && self.stage_dims.iter().all(|&d| d >= 1)
            && self.embedding_dim >= 1
            && self.num_classes >= 1;
        if dims_ok {
            Ok(())
        } else {
            Err(Error::contract(format!(
                "all model dimensions must be >= 1: {self:?}"
            )))
        }
    }

    fn stage_input(&self, stage: usize) -> usize {
        if stage == 0 {
            self.input_dim
        } else {
            self.stage_dims[stage - 1]
        }
    }
}

/// Positions of the parameters in the canonical layout.
pub mod layout {
    pub const PER_STAGE: usize = 4;
    pub const EMBED_WEIGHT: usize = 16;
    pub const EMBED_BIAS: usize = 17;
    pub const NECK_SCALE: usize = 18;
    pub const NECK_SHIFT: usize = 19;
    pub const CLASSIFIER: usize = 20;
    pub const LEN: usize = 21;

    /// `(weight, bias, norm scale, norm shift)` of a zero-based stage.
    pub fn stage(stage: usize) -> [usize; 4] {
        let base = stage * PER_STAGE;
        [base, base + 1, base + 2, base + 3]
    }
}

/// Deterministic fan-in scaled initialization.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weight = |fan_in: usize, fan_out: usize, gain: f64| {
        let std = (gain / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        Array2::from_shape_fn((fan_in, fan_out), |_| normal.sample(&mut rng))
    };
    let mut p = ParamSet::new();
    for s in 0..4 {
        let (fan_in, width) = (config.stage_input(s), config.stage_dims[s]);
        let n = s + 1;
        p.insert(format!("stage{n}.weight"), weight(fan_in, width, 2.0))?;
        p.insert(format!("stage{n}.bias"), Array2::zeros((1, width)))?;
        p.insert(format!("stage{n}.norm_scale"), Array2::ones((1, width)))?;
        p.insert(format!("stage{n}.norm_shift"), Array2::zeros((1, width)))?;
    }
    let d = config.embedding_dim;
    p.insert("embed.weight", weight(config.stage_dims[3], d, 1.0))?;
    p.insert("embed.bias", Array2::zeros((1, d)))?;
    p.insert("neck.scale", Array2::ones((1, d)))?;
    p.insert("neck.shift", Array2::zeros((1, d)))?;
    p.insert("classifier.weight", weight(d, config.num_classes, 1.0))?;
    debug_assert_eq!(p.len(), layout::LEN);
    Ok(p)
}

/// Running statistics of the neck, used in eval mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(dim: usize) -> Self {
        RunningStats {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }

    /// Exponential update with momentum [`NECK_MOMENTUM`]; the variance uses
    /// the unbiased batch estimate.
    fn update(&mut self, batch: &Array2<f64>) {
        let n = batch.nrows() as f64;
        let mean = batch.mean_axis(Axis(0)).expect("non-empty batch");
        for (j, col) in batch.axis_iter(Axis(1)).enumerate() {
            let ss: f64 = col.iter().map(|x| (x - mean[j]).powi(2)).sum();
            let unbiased = if n > 1.0 { ss / (n - 1.0) } else { 0.0 };
            self.mean[j] = (1.0 - NECK_MOMENTUM) * self.mean[j] + NECK_MOMENTUM * mean[j];
            self.var[j] = (1.0 - NECK_MOMENTUM) * self.var[j] + NECK_MOMENTUM * unbiased;
        }
    }
}

pub enum Mode<'a> {
    /// Batch statistics in the neck; running statistics are updated when given.
    Train(Option<&'a mut RunningStats>),
    Eval(&'a RunningStats),
}

pub struct ForwardTaps<'g> {
    /// Output of each of the four stages.
    pub stages: [Var<'g>; 4],
    /// Pre-neck embedding.
    pub embedding: Var<'g>,
    /// Post-neck classifier scores.
    pub logits: Var<'g>,
}

impl<'g> ForwardTaps<'g> {
    pub fn alignment(&self, tap: AlignmentTap) -> Var<'g> {
        self.stages[tap.stage_index()]
    }
}

fn layer_norm<'g>(h: Var<'g>, scale: Var<'g>, shift: Var<'g>) -> Var<'g> {
    let m = h.cols();
    let centered = h - h.mean_cols().broadcast_cols(m);
    let inv_std = centered
        .square()
        .mean_cols()
        .add_scalar(NORM_EPS)
        .sqrt()
        .recip();
    (centered * inv_std.broadcast_cols(m))
        .mul_row(scale)
        .add_row(shift)
}

/// Run the network on the rows of `x`.
pub fn forward<'g>(
    config: &ModelConfig,
    graph: &'g Graph,
    params: &[Var<'g>],
    x: &Array2<f64>,
    mode: Mode<'_>,
) -> Result<ForwardTaps<'g>> {
    if params.len() != layout::LEN {
        return Err(Error::contract(format!(
            "model expects {} parameter arrays, got {}",
            layout::LEN,
            params.len()
        )));
    }
    if x.nrows() == 0 {
        return Err(Error::contract("forward needs a non-empty batch"));
    }
    if x.ncols() != config.input_dim {
        return Err(Error::contract(format!(
            "input has {} features, model expects {}",
            x.ncols(),
            config.input_dim
        )));
    }
    let mut h = graph.leaf(x.clone());
    let mut stages = Vec::with_capacity(4);
    for s in 0..4 {
        let [w, b, scale, shift] = layout::stage(s).map(|i| params[i]);
        let act = h.matmul(w).add_row(b).relu();
        h = layer_norm(act, scale, shift);
        stages.push(h);
    }
    let embedding = h
        .matmul(params[layout::EMBED_WEIGHT])
        .add_row(params[layout::EMBED_BIAS]);

    let n = embedding.rows();
    let d = embedding.cols();
    let normalized = match mode {
        Mode::Train(running) => {
            let centered = embedding - embedding.mean_rows().broadcast_rows(n);
            let inv_std = centered
                .square()
                .mean_rows()
                .add_scalar(NORM_EPS)
                .sqrt()
                .recip();
            if let Some(stats) = running {
                stats.update(&embedding.value());
            }
            centered * inv_std.broadcast_rows(n)
        }
        Mode::Eval(stats) => {
            if stats.mean.len() != d {
                return Err(Error::contract(
                    "running statistics do not match embedding size",
                ));
            }
            let mean = graph.leaf(Array2::from_shape_vec((1, d), stats.mean.clone()).unwrap());
            let inv_std =
                Array2::from_shape_fn((1, d), |(_, j)| 1.0 / (stats.var[j] + NORM_EPS).sqrt());
            (embedding - mean.broadcast_rows(n)).mul_row(graph.leaf(inv_std))
        }
    };
    let neck = normalized
        .mul_row(params[layout::NECK_SCALE])
        .add_row(params[layout::NECK_SHIFT]);
    let logits = neck.matmul(params[layout::CLASSIFIER]);
    Ok(ForwardTaps {
        stages: [stages[0], stages[1], stages[2], stages[3]],
        embedding,
        logits,
    })
}

/// Everything needed to run the network: configuration, parameters and
/// neck statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub running: RunningStats,
}

impl ModelState {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        let running = RunningStats::new(config.embedding_dim);
        Ok(ModelState {
            config,
            params,
            running,
        })
    }

    /// Eval-mode pre-neck embeddings of the rows of `x`.
    pub fn embed(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let g = Graph::new();
        let vars = crate::autodiff::param_leaves(&g, &self.params);
        let taps = forward(&self.config, &g, &vars, x, Mode::Eval(&self.running))?;
        g.check_finite()?;
        let out = (*taps.embedding.value()).clone();
        Ok(out)
    }
}

pub const CHECKPOINT_FORMAT: &str = "cimn-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StoredParam {
    name: String,
    shape: [usize; 2],
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct StoredCheckpoint {
    format: String,
    version: u32,
    epoch: usize,
    model: ModelConfig,
    params: Vec<StoredParam>,
    running: RunningStats,
}

/// Model state at the end of an epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Number of completed epochs.
    pub epoch: usize,
    pub state: ModelState,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let stored = StoredCheckpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            epoch: self.epoch,
            model: self.state.config.clone(),
            params: self
                .state
                .params
                .iter()
                .map(|(name, v)| StoredParam {
                    name: name.to_string(),
                    shape: [v.nrows(), v.ncols()],
                    values: v.iter().copied().collect(),
                })
                .collect(),
            running: self.state.running.clone(),
        };
        let mut s = serde_json::to_string(&stored)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let stored: StoredCheckpoint = serde_json::from_str(text)?;
        if stored.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!(
                "not a checkpoint: `{}`",
                stored.format
            )));
        }
        if stored.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                stored.version
            )));
        }
        stored.model.validate()?;
        let mut params = ParamSet::new();
        for p in stored.params {
            let arr = Array2::from_shape_vec((p.shape[0], p.shape[1]), p.values)
                .map_err(|e| Error::Format(format!("parameter `{}`: {e}", p.name)))?;
            params.insert(p.name, arr)?;
        }
        let expected = init_params(&stored.model, 0)?;
        if !params.same_layout(&expected) {
            return Err(Error::Format(
                "parameter layout does not match model config".into(),
            ));
        }
        if stored.running.mean.len() != stored.model.embedding_dim
            || stored.running.var.len() != stored.model.embedding_dim
        {
            return Err(Error::Format(
                "running statistics have the wrong size".into(),
            ));
        }
        Ok(Checkpoint {
            epoch: stored.epoch,
            state: ModelState {
                config: stored.model,
                params,
                running: stored.running,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
