//! Synthetic multi-camera identity data.
//!
//! Identity `i` has a latent unit vector `u_i`. Camera `c` applies a fixed
//! invertible map `A_c = I + s * a * G_c / sqrt(d)` and an offset `b_c = s * g_c`
//! (with `G_c`, `g_c` standard normal, `s` the shift strength and `a` the
//! linear ratio). An observation is `A_c u_i + b_c + eps`.

use ndarray::{Array1, Array2};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::sampling::{Dataset, Sample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Training identities.
    pub num_identities: usize,
    pub num_cameras: usize,
    pub obs_dim: usize,
    /// Training images per identity.
    pub images_per_identity: usize,
    pub camera_shift_strength: f64,
    /// Scale of the linear part of the camera shift relative to the offset.
    pub linear_shift_ratio: f64,
    pub within_identity_noise: f64,
    /// Fraction of training identities observed by two cameras.
    pub ccsp_fraction: f64,
    /// Fresh identities for the test split, observed on every camera.
    pub test_identities: usize,
    pub test_images_per_camera: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            num_identities: 100,
            num_cameras: 4,
            obs_dim: 16,
            images_per_identity: 8,
            camera_shift_strength: 0.5,
            linear_shift_ratio: 0.3,
            within_identity_noise: 0.1,
            ccsp_fraction: 0.0,
            test_identities: 50,
            test_images_per_camera: 2,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self, min_images: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Contract(msg));
        if self.num_cameras < 2 {
            return bad(format!("need at least 2 cameras, got {}", self.num_cameras));
        }
        if self.num_identities == 0 || self.obs_dim == 0 {
            return bad("identity count and observation width must be >= 1".into());
        }
        if self.images_per_identity < min_images {
            return bad(format!(
                "images_per_identity {} is below K = {min_images}",
                self.images_per_identity
            ));
        }
        if !(0.0..=1.0).contains(&self.ccsp_fraction) {
            return bad(format!(
                "ccsp_fraction must be in [0, 1], got {}",
                self.ccsp_fraction
            ));
        }
        for (name, v) in [
            ("camera_shift_strength", self.camera_shift_strength),
            ("linear_shift_ratio", self.linear_shift_ratio),
            ("within_identity_noise", self.within_identity_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }

    pub fn ccsp_identities(&self) -> usize {
        (self.ccsp_fraction * self.num_identities as f64).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    pub map: Array2<f64>,
    pub offset: Array1<f64>,
}

impl CameraModel {
    pub fn observe(&self, latent: &Array1<f64>) -> Array1<f64> {
        self.map.dot(latent) + &self.offset
    }
}

/// Generated data plus the ground truth behind it.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub config: GeneratorConfig,
    pub train: Dataset,
    pub test: Dataset,
    pub cameras: Vec<CameraModel>,
    /// Latent vectors of training identities followed by test identities.
    pub latents: Vec<Array1<f64>>,
}

fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

fn normal_vector(rng: &mut impl Rng, n: usize) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || StandardNormal.sample(rng))
}

/// Cheap near-singularity screen: every basis vector and 32 random unit
/// probes must keep a norm above 0.2 under the map.
fn well_conditioned(map: &Array2<f64>, rng: &mut impl Rng) -> bool {
    let d = map.nrows();
    (0..d + 32).all(|k| {
        let v = if k < d {
            Array1::from_shape_fn(d, |j| if j == k { 1.0 } else { 0.0 })
        } else {
            let v = normal_vector(rng, d);
            let n = v.dot(&v).sqrt();
            v / n
        };
        map.dot(&v).dot(&map.dot(&v)).sqrt() > 0.2
    })
}

fn camera_models(config: &GeneratorConfig) -> Vec<CameraModel> {
    let d = config.obs_dim;
    let s = config.camera_shift_strength;
    let scale = s * config.linear_shift_ratio / (d as f64).sqrt();
    (0..config.num_cameras)
        .map(|c| {
            let mut rng = rng_for(config.seed, &[0xca3, c as u64]);
            let map = loop {
                let m = Array2::eye(d) + normal_matrix(&mut rng, d, d) * scale;
                if well_conditioned(&m, &mut rng) {
                    break m;
                }
            };
            let offset = normal_vector(&mut rng, d) * s;
            CameraModel { map, offset }
        })
        .collect()
}

fn unit_latent(rng: &mut impl Rng, d: usize) -> Array1<f64> {
    loop {
        let v = normal_vector(rng, d);
        let n = v.dot(&v).sqrt();
        if n > 1e-8 {
            return v / n;
        }
    }
}

/// Generate training and test splits.
///
/// Camera models and latents are drawn from streams that do not depend on
/// `ccsp_fraction`, so a sweep over it changes only camera assignment.
pub fn generate(config: &GeneratorConfig) -> Result<SyntheticData> {
    config.validate(2)?;
    let cameras = camera_models(config);
    let total = config.num_identities + config.test_identities;
    let latents: Vec<Array1<f64>> = (0..total)
        .map(|i| {
            unit_latent(
                &mut rng_for(config.seed, &[0x1a7, i as u64]),
                config.obs_dim,
            )
        })
        .collect();

    let mut assign_rng = rng_for(config.seed, &[0xa551]);
    let mut order: Vec<usize> = (0..config.num_identities).collect();
    order.shuffle(&mut assign_rng);
    let mut is_ccsp = vec![false; config.num_identities];
    for &i in order.iter().take(config.ccsp_identities()) {
        is_ccsp[i] = true;
    }
    let cam_ids: Vec<usize> = (0..config.num_cameras).collect();

    let noise = config.within_identity_noise;
    let mut next_id = 0u64;
    let mut observe =
        |identity: usize, camera: usize, n: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            let clean = cameras[camera].observe(&latents[identity]);
            (0..n)
                .map(|_| {
                    let x = &clean + &(normal_vector(rng, config.obs_dim) * noise);
                    let s = Sample {
                        id: next_id,
                        identity: identity as u32,
                        camera: camera as u32,
                        features: x.to_vec(),
                    };
                    next_id += 1;
                    s
                })
                .collect::<Vec<_>>()
        };

    let mut train = Vec::with_capacity(config.num_identities * config.images_per_identity);
    for (i, &ccsp) in is_ccsp.iter().enumerate() {
        let primary = *cam_ids.choose(&mut assign_rng).expect("cameras");
        let secondary =
            (primary + assign_rng.random_range(1..config.num_cameras)) % config.num_cameras;
        let mut rng = rng_for(config.seed, &[0x0b5, i as u64]);
        let n = config.images_per_identity;
        if ccsp {
            let first = n.div_ceil(2);
            train.extend(observe(i, primary, first, &mut rng));
            train.extend(observe(i, secondary, n - first, &mut rng));
        } else {
            train.extend(observe(i, primary, n, &mut rng));
        }
    }
    let mut test = Vec::new();
    for i in config.num_identities..total {
        let mut rng = rng_for(config.seed, &[0x0b5, i as u64]);
        for c in 0..config.num_cameras {
            test.extend(observe(i, c, config.test_images_per_camera, &mut rng));
        }
    }
    Ok(SyntheticData {
        config: config.clone(),
        train: Dataset::new(train),
        test: Dataset::new(test),
        cameras,
        latents,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityReport {
    /// Fraction of samples whose nearest clean observation (under their own
    /// camera) belongs to their identity.
    pub accuracy: f64,
    pub num_samples: usize,
    pub num_identities: usize,
}

/// Nearest-latent identification with the true camera models, over every
/// identity present in `dataset`.
pub fn ground_truth_separability(
    data: &SyntheticData,
    dataset: &Dataset,
) -> Result<SeparabilityReport> {
    let identities = dataset.identities();
    if identities.is_empty() {
        return Err(Error::contract("separability needs a non-empty dataset"));
    }
    let mut correct = 0usize;
    for s in &dataset.samples {
        let cam = data
            .cameras
            .get(s.camera as usize)
            .ok_or_else(|| Error::contract(format!("unknown camera {}", s.camera)))?;
        let x = Array1::from(s.features.clone());
        let mut best = (f64::INFINITY, u32::MAX);
        for &i in &identities {
            let latent = data
                .latents
                .get(i as usize)
                .ok_or_else(|| Error::contract(format!("unknown identity {i}")))?;
            let r = &x - &cam.observe(latent);
            let d = r.dot(&r);
            if d < best.0 {
                best = (d, i);
            }
        }
        correct += usize::from(best.1 == s.identity);
    }
    Ok(SeparabilityReport {
        accuracy: correct as f64 / dataset.len() as f64,
        num_samples: dataset.len(),
        num_identities: identities.len(),
    })
}
