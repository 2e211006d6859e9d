//! Samples, datasets and their on-disk forms.
//!
//! A manifest is line-delimited JSON with one sample per line:
//! `{"id":..,"identity":..,"camera":..,"features":[..]}`. Floats are written
//! in shortest round-trip form, so write -> read -> write is byte-exact.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: u64,
    pub identity: u32,
    pub camera: u32,
    pub features: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Dataset { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn cameras(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.samples.iter().map(|s| s.camera).collect();
        set.into_iter().collect()
    }

    pub fn identities(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.samples.iter().map(|s| s.identity).collect();
        set.into_iter().collect()
    }

    /// Feature width, checked to be uniform.
    pub fn feature_dim(&self) -> Result<usize> {
        let dim = self
            .samples
            .first()
            .map(|s| s.features.len())
            .ok_or_else(|| Error::contract("empty dataset"))?;
        if self.samples.iter().any(|s| s.features.len() != dim) {
            return Err(Error::Format(
                "samples have differing feature widths".into(),
            ));
        }
        Ok(dim)
    }

    /// Stack the features of the selected samples into rows.
    pub fn features(&self, indices: &[usize]) -> Array2<f64> {
        stack_features(indices.iter().map(|&i| &self.samples[i]))
    }

    pub fn all_features(&self) -> Array2<f64> {
        stack_features(self.samples.iter())
    }

    pub fn to_manifest(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        Self::read_manifest(text.as_bytes())
    }

    fn read_manifest(reader: impl BufRead) -> Result<Self> {
        let mut samples = Vec::new();
        let mut ids = BTreeSet::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let s: Sample = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("manifest line {}: {e}", n + 1)))?;
            if !ids.insert(s.id) {
                return Err(Error::Format(format!("duplicate sample id {}", s.id)));
            }
            samples.push(s);
        }
        Ok(Dataset { samples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        f.write_all(self.to_manifest()?.as_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_manifest(BufReader::new(fs::File::open(path)?))
    }

    /// Keep the samples whose ids are listed, in manifest order.
    pub fn subset_by_ids(&self, ids: &[u64]) -> Result<Dataset> {
        let wanted: BTreeSet<u64> = ids.iter().copied().collect();
        let samples: Vec<Sample> = self
            .samples
            .iter()
            .filter(|s| wanted.contains(&s.id))
            .cloned()
            .collect();
        if samples.len() != wanted.len() {
            return Err(Error::Format(format!(
                "split lists {} ids but only {} exist in the manifest",
                wanted.len(),
                samples.len()
            )));
        }
        Ok(Dataset { samples })
    }
}

pub(crate) fn stack_features<'a>(samples: impl Iterator<Item = &'a Sample>) -> Array2<f64> {
    let rows: Vec<&Sample> = samples.collect();
    let dim = rows.first().map_or(0, |s| s.features.len());
    let mut flat = Vec::with_capacity(rows.len() * dim);
    for s in &rows {
        flat.extend_from_slice(&s.features);
    }
    Array2::from_shape_vec((rows.len(), dim), flat).expect("uniform feature width")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Each identity keeps the images of one camera only.
    Sct,
    /// Uniform subset of the full training set.
    Cg,
}

impl std::str::FromStr for SplitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sct" => Ok(SplitMode::Sct),
            "cg" => Ok(SplitMode::Cg),
            other => Err(Error::contract(format!("unknown split mode `{other}`"))),
        }
    }
}

pub const SPLIT_FORMAT: &str = "cimn-split";

/// Retained sample ids plus how they were chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFile {
    pub format: String,
    pub mode: SplitMode,
    pub seed: u64,
    pub dropped_identities: usize,
    pub sample_ids: Vec<u64>,
}

impl SplitFile {
    pub fn new(mode: SplitMode, seed: u64, dropped_identities: usize, dataset: &Dataset) -> Self {
        SplitFile {
            format: SPLIT_FORMAT.to_string(),
            mode,
            seed,
            dropped_identities,
            sample_ids: dataset.samples.iter().map(|s| s.id).collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let split: SplitFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        if split.format != SPLIT_FORMAT {
            return Err(Error::Format(format!(
                "not a split file: `{}`",
                split.format
            )));
        }
        Ok(split)
    }
}
