//! Camera-indexed datasets, single-camera and control-group splits, the
//! camera-pair schedule and P x K meta-batch assembly.

mod manifest;

pub use manifest::{Dataset, Sample, SplitFile, SplitMode, SPLIT_FORMAT};

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::rng_for;

/// A dataset with per-camera and per-(camera, identity) indexes.
#[derive(Clone, Debug)]
pub struct CameraIndexedDataset {
    samples: Vec<Sample>,
    by_camera: BTreeMap<u32, Vec<usize>>,
    by_camera_identity: BTreeMap<u32, BTreeMap<u32, Vec<usize>>>,
}

impl CameraIndexedDataset {
    pub fn new(dataset: Dataset) -> Self {
        let mut by_camera: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        let mut by_camera_identity: BTreeMap<u32, BTreeMap<u32, Vec<usize>>> = BTreeMap::new();
        for (i, s) in dataset.samples.iter().enumerate() {
            by_camera.entry(s.camera).or_default().push(i);
            by_camera_identity
                .entry(s.camera)
                .or_default()
                .entry(s.identity)
                .or_default()
                .push(i);
        }
        CameraIndexedDataset {
            samples: dataset.samples,
            by_camera,
            by_camera_identity,
        }
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sorted camera ids.
    pub fn cameras(&self) -> Vec<u32> {
        self.by_camera.keys().copied().collect()
    }

    pub fn camera_samples(&self, camera: u32) -> &[usize] {
        self.by_camera.get(&camera).map_or(&[], Vec::as_slice)
    }

    /// Identity -> sample indexes for one camera.
    pub fn identities_on(&self, camera: u32) -> Option<&BTreeMap<u32, Vec<usize>>> {
        self.by_camera_identity.get(&camera)
    }

    pub fn identities(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.samples.iter().map(|s| s.identity).collect();
        set.into_iter().collect()
    }

    /// True when every identity's samples share a single camera.
    pub fn is_single_camera_per_identity(&self) -> bool {
        let mut seen: BTreeMap<u32, u32> = BTreeMap::new();
        self.samples
            .iter()
            .all(|s| *seen.entry(s.identity).or_insert(s.camera) == s.camera)
    }

    pub fn features(&self, indices: &[usize]) -> Array2<f64> {
        manifest::stack_features(indices.iter().map(|&i| &self.samples[i]))
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<u32> {
        indices.iter().map(|&i| self.samples[i].identity).collect()
    }

    pub fn to_dataset(&self) -> Dataset {
        Dataset::new(self.samples.clone())
    }
}

#[derive(Clone, Debug)]
pub struct SctSplit {
    pub split: CameraIndexedDataset,
    /// Identities without `min_images` images under any single camera.
    pub dropped_identities: usize,
}

/// Keep, for every identity, the images of one randomly chosen camera among
/// those where it has at least `min_images` images.
pub fn build_sct_split(dataset: &Dataset, min_images: usize, seed: u64) -> Result<SctSplit> {
    let mut per_identity: BTreeMap<u32, BTreeMap<u32, usize>> = BTreeMap::new();
    for s in &dataset.samples {
        *per_identity
            .entry(s.identity)
            .or_default()
            .entry(s.camera)
            .or_default() += 1;
    }
    let mut rng = rng_for(seed, &[0x5c7]);
    let mut chosen: BTreeMap<u32, u32> = BTreeMap::new();
    let mut dropped = 0;
    for (&identity, cams) in &per_identity {
        let eligible: Vec<u32> = cams
            .iter()
            .filter(|&(_, &n)| n >= min_images)
            .map(|(&c, _)| c)
            .collect();
        match eligible.choose(&mut rng) {
            Some(&c) => {
                chosen.insert(identity, c);
            }
            None => dropped += 1,
        }
    }
    if dropped > 0 {
        log::warn!("single-camera split dropped {dropped} identities with < {min_images} images per camera");
    }
    let samples: Vec<Sample> = dataset
        .samples
        .iter()
        .filter(|s| chosen.get(&s.identity) == Some(&s.camera))
        .cloned()
        .collect();
    if samples.is_empty() {
        return Err(Error::contract("single-camera split retained no samples"));
    }
    Ok(SctSplit {
        split: CameraIndexedDataset::new(Dataset::new(samples)),
        dropped_identities: dropped,
    })
}

/// Uniform random subset of exactly `target_size` samples, in manifest order.
pub fn build_cg_split(dataset: &Dataset, target_size: usize, seed: u64) -> Result<Dataset> {
    if target_size > dataset.len() {
        return Err(Error::contract(format!(
            "control-group size {target_size} exceeds dataset size {}",
            dataset.len()
        )));
    }
    let mut rng = rng_for(seed, &[0xc6]);
    let mut keep = rand::seq::index::sample(&mut rng, dataset.len(), target_size).into_vec();
    keep.sort_unstable();
    Ok(Dataset::new(
        keep.into_iter()
            .map(|i| dataset.samples[i].clone())
            .collect(),
    ))
}

/// Camera positions (indexes into the sorted camera list) for one epoch:
/// the meta-train camera rotates with the epoch, the meta-test camera is
/// drawn uniformly from the others.
pub fn camera_pair_schedule(epoch: usize, num_cameras: usize, seed: u64) -> Result<(usize, usize)> {
    if num_cameras < 2 {
        return Err(Error::contract(format!(
            "camera pairs need at least 2 cameras, got {num_cameras}"
        )));
    }
    let mtr = epoch % num_cameras;
    let mut rng = rng_for(seed, &[0xca, epoch as u64]);
    let offset = rng.random_range(1..num_cameras);
    Ok((mtr, (mtr + offset) % num_cameras))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaBatch {
    /// Sample indexes of the meta-train set.
    pub mtr: Vec<usize>,
    /// Sample indexes of the meta-test set.
    pub mte: Vec<usize>,
    pub mtr_cameras: Vec<u32>,
    pub mte_cameras: Vec<u32>,
    pub p: usize,
    pub k: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchShape {
    /// Identities per set.
    pub p: usize,
    /// Images per identity.
    pub k: usize,
    /// Cameras per set.
    pub r: usize,
}

impl Default for BatchShape {
    fn default() -> Self {
        BatchShape { p: 8, k: 2, r: 1 }
    }
}

/// Camera sets for the two sides of a meta-batch.
///
/// With `r <= N/2` the sides are disjoint; otherwise they overlap in exactly
/// `2r - N` cameras.
pub fn side_cameras(
    cameras: &[u32],
    pair: (usize, usize),
    r: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<u32>, Vec<u32>)> {
    let n = cameras.len();
    if r == 0 || r > n {
        return Err(Error::contract(format!("r must be in 1..={n}, got {r}")));
    }
    if pair.0 >= n || pair.1 >= n || pair.0 == pair.1 {
        return Err(Error::contract(format!("invalid camera pair {pair:?}")));
    }
    if r == 1 {
        return Ok((vec![cameras[pair.0]], vec![cameras[pair.1]]));
    }
    let disjoint = 2 * r <= n;
    let mut extra: Vec<usize> = (0..n)
        .filter(|&i| i != pair.0 && (!disjoint || i != pair.1))
        .collect();
    extra.shuffle(rng);
    let mut mtr: Vec<usize> = std::iter::once(pair.0)
        .chain(extra.into_iter().take(r - 1))
        .collect();
    let mte: Vec<usize> = if disjoint {
        let mut rest: Vec<usize> = (0..n)
            .filter(|&i| i != pair.1 && !mtr.contains(&i))
            .collect();
        rest.shuffle(rng);
        std::iter::once(pair.1)
            .chain(rest.into_iter().take(r - 1))
            .collect()
    } else {
        let mut side: Vec<usize> = (0..n).filter(|i| !mtr.contains(i)).collect();
        let mut shared = mtr.clone();
        shared.shuffle(rng);
        side.extend(shared.into_iter().take(2 * r - n));
        side
    };
    mtr.sort_unstable();
    let mut mte = mte;
    mte.sort_unstable();
    Ok((
        mtr.into_iter().map(|i| cameras[i]).collect(),
        mte.into_iter().map(|i| cameras[i]).collect(),
    ))
}

/// Identity -> sample indexes pooled over `cameras`, keeping identities with
/// at least `k` images and not in `exclude`.
fn identity_pool(
    split: &CameraIndexedDataset,
    cameras: &[u32],
    k: usize,
    exclude: &BTreeSet<u32>,
) -> BTreeMap<u32, Vec<usize>> {
    let mut pool: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for c in cameras {
        if let Some(ids) = split.identities_on(*c) {
            for (&identity, idx) in ids {
                if !exclude.contains(&identity) {
                    pool.entry(identity).or_default().extend_from_slice(idx);
                }
            }
        }
    }
    pool.retain(|_, idx| idx.len() >= k);
    pool
}

fn draw_pk(
    pool: &BTreeMap<u32, Vec<usize>>,
    p: usize,
    k: usize,
    cameras: &[u32],
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if pool.len() < p {
        return Err(Error::Infeasible {
            cameras: cameras.to_vec(),
            reason: format!(
                "{} identities with >= {k} images available, {p} needed",
                pool.len()
            ),
        });
    }
    let ids: Vec<&u32> = pool.keys().collect();
    let chosen = rand::seq::index::sample(rng, ids.len(), p);
    let mut out = Vec::with_capacity(p * k);
    for i in chosen.iter() {
        let images = &pool[ids[i]];
        out.extend(images.choose_multiple(rng, k).copied());
    }
    Ok(out)
}

/// Draw P identities with K images each for both sides of a meta-batch.
///
/// No identity appears on both sides.
pub fn sample_meta_batch(
    split: &CameraIndexedDataset,
    pair: (usize, usize),
    shape: BatchShape,
    rng: &mut impl Rng,
) -> Result<MetaBatch> {
    let BatchShape { p, k, r } = shape;
    if p == 0 || k < 2 {
        return Err(Error::contract(format!(
            "need P >= 1 and K >= 2, got P={p}, K={k}"
        )));
    }
    let cameras = split.cameras();
    let (mtr_cameras, mte_cameras) = side_cameras(&cameras, pair, r, rng)?;
    let mtr_pool = identity_pool(split, &mtr_cameras, k, &BTreeSet::new());
    let mtr = draw_pk(&mtr_pool, p, k, &mtr_cameras, rng)?;
    let taken: BTreeSet<u32> = mtr.iter().map(|&i| split.samples[i].identity).collect();
    let mte_pool = identity_pool(split, &mte_cameras, k, &taken);
    let mte = draw_pk(&mte_pool, p, k, &mte_cameras, rng)?;
    Ok(MetaBatch {
        mtr,
        mte,
        mtr_cameras,
        mte_cameras,
        p,
        k,
    })
}

/// Plain P x K batch over every camera, used by the triplet-only baseline.
pub fn sample_pk_batch(
    split: &CameraIndexedDataset,
    p: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if p < 2 || k < 2 {
        return Err(Error::contract(format!(
            "need P >= 2 and K >= 2, got P={p}, K={k}"
        )));
    }
    let cameras = split.cameras();
    let pool = identity_pool(split, &cameras, k, &BTreeSet::new());
    draw_pk(&pool, p, k, &cameras, rng)
}
