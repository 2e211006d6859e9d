//! Cross-camera retrieval scoring (CMC and mAP) and the experiment
//! harnesses built on it.

pub mod experiments;

use std::cmp::Ordering;
use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::sampling::Dataset;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Euclidean,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Protocol {
    /// Camera whose images form the queries; the gallery is every other camera.
    pub query_camera: u32,
    pub ranks: Vec<usize>,
    pub metric: Metric,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            query_camera: 0,
            ranks: vec![1, 5, 10],
            metric: Metric::Euclidean,
        }
    }
}

impl Protocol {
    pub fn descriptor(&self) -> String {
        format!(
            "queries=camera {}; gallery=other cameras; drop same identity+camera; metric={}; \
             ties by sample id; AP non-interpolated",
            self.query_camera,
            match self.metric {
                Metric::Euclidean => "euclidean",
                Metric::Cosine => "cosine",
            }
        )
    }
}

/// Embeddings with the metadata needed for ranking.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedded {
    pub ids: Vec<u64>,
    pub identities: Vec<u32>,
    pub cameras: Vec<u32>,
    pub features: Array2<f64>,
}

impl Embedded {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn select(&self, keep: impl Fn(usize) -> bool) -> Embedded {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        Embedded {
            ids: rows.iter().map(|&i| self.ids[i]).collect(),
            identities: rows.iter().map(|&i| self.identities[i]).collect(),
            cameras: rows.iter().map(|&i| self.cameras[i]).collect(),
            features: self.features.select(ndarray::Axis(0), &rows),
        }
    }
}

/// Eval-mode embeddings of every sample in `dataset`.
pub fn extract_embeddings(state: &ModelState, dataset: &Dataset) -> Result<Embedded> {
    if dataset.is_empty() {
        return Err(Error::contract("nothing to embed"));
    }
    let width = dataset.feature_dim()?;
    if width != state.config.input_dim {
        return Err(Error::contract(format!(
            "samples have {width} features, checkpoint expects {}",
            state.config.input_dim
        )));
    }
    Ok(Embedded {
        ids: dataset.samples.iter().map(|s| s.id).collect(),
        identities: dataset.samples.iter().map(|s| s.identity).collect(),
        cameras: dataset.samples.iter().map(|s| s.camera).collect(),
        features: state.embed(&dataset.all_features())?,
    })
}

/// Split embeddings into queries (the protocol's query camera) and gallery.
pub fn query_gallery(all: &Embedded, protocol: &Protocol) -> (Embedded, Embedded) {
    let q = protocol.query_camera;
    (
        all.select(|i| all.cameras[i] == q),
        all.select(|i| all.cameras[i] != q),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Rank -> fraction of scored queries with a correct match in the top rank.
    pub cmc: BTreeMap<usize, f64>,
    pub map_score: f64,
    pub num_queries: usize,
    /// Queries without any valid positive in the gallery.
    pub excluded_queries: usize,
    pub protocol: String,
}

impl EvalReport {
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("protocol: {}\n", self.protocol);
        out.push_str(&format!(
            "queries: {} scored, {} excluded\n",
            self.num_queries, self.excluded_queries
        ));
        for (k, v) in &self.cmc {
            out.push_str(&format!("rank-{k:<3} {:6.2}%\n", 100.0 * v));
        }
        out.push_str(&format!("mAP      {:6.2}%\n", 100.0 * self.map_score));
        out
    }
}

fn distance(metric: Metric, a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    match metric {
        Metric::Euclidean => a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt(),
        Metric::Cosine => {
            let na = a.dot(&a).sqrt();
            let nb = b.dot(&b).sqrt();
            if na == 0.0 || nb == 0.0 {
                1.0
            } else {
                1.0 - a.dot(&b) / (na * nb)
            }
        }
    }
}

/// Rank the gallery for every query and score CMC and mAP.
pub fn rank_and_score(
    queries: &Embedded,
    gallery: &Embedded,
    protocol: &Protocol,
) -> Result<EvalReport> {
    if queries.features.ncols() != gallery.features.ncols() {
        return Err(Error::contract(
            "query and gallery embeddings differ in width",
        ));
    }
    if protocol.ranks.is_empty() || protocol.ranks.contains(&0) {
        return Err(Error::contract("CMC ranks must be non-empty and >= 1"));
    }
    let mut hits_at: BTreeMap<usize, usize> = protocol.ranks.iter().map(|&k| (k, 0)).collect();
    let mut ap_sum = 0.0;
    let mut scored = 0usize;
    let mut excluded = 0usize;
    for q in 0..queries.len() {
        let qf = queries.features.row(q);
        let mut ranked: Vec<(f64, u64, bool)> = (0..gallery.len())
            .filter(|&g| {
                !(gallery.identities[g] == queries.identities[q]
                    && gallery.cameras[g] == queries.cameras[q])
            })
            .map(|g| {
                (
                    distance(protocol.metric, qf, gallery.features.row(g)),
                    gallery.ids[g],
                    gallery.identities[g] == queries.identities[q],
                )
            })
            .collect();
        ranked.sort_by(|a, b| match a.0.total_cmp(&b.0) {
            Ordering::Equal => a.1.cmp(&b.1),
            o => o,
        });
        let Some(first) = ranked.iter().position(|r| r.2) else {
            excluded += 1;
            continue;
        };
        scored += 1;
        for (&k, count) in hits_at.iter_mut() {
            if first < k {
                *count += 1;
            }
        }
        let mut found = 0usize;
        let mut precision_sum = 0.0;
        for (pos, r) in ranked.iter().enumerate() {
            if r.2 {
                found += 1;
                precision_sum += found as f64 / (pos + 1) as f64;
            }
        }
        ap_sum += precision_sum / found as f64;
    }
    let denom = scored.max(1) as f64;
    Ok(EvalReport {
        cmc: hits_at
            .into_iter()
            .map(|(k, c)| (k, c as f64 / denom))
            .collect(),
        map_score: ap_sum / denom,
        num_queries: scored,
        excluded_queries: excluded,
        protocol: protocol.descriptor(),
    })
}

/// Embed `dataset` with `state` and score it under `protocol`.
pub fn evaluate_model(
    state: &ModelState,
    dataset: &Dataset,
    protocol: &Protocol,
) -> Result<EvalReport> {
    let all = extract_embeddings(state, dataset)?;
    let (q, g) = query_gallery(&all, protocol);
    rank_and_score(&q, &g, protocol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn items(ids: &[u64], identities: &[u32], cameras: &[u32], features: Array2<f64>) -> Embedded {
        Embedded {
            ids: ids.to_vec(),
            identities: identities.to_vec(),
            cameras: cameras.to_vec(),
            features,
        }
    }

    #[test]
    fn single_correct_nearest_neighbour() {
        let q = items(&[0], &[1], &[0], array![[0.0]]);
        let g = items(&[1, 2], &[1, 2], &[1, 1], array![[0.1], [5.0]]);
        let r = rank_and_score(&q, &g, &Protocol::default()).unwrap();
        assert_eq!(r.rank(1), 1.0);
        assert_eq!(r.map_score, 1.0);
    }

    #[test]
    fn hits_at_ranks_one_and_three() {
        let q = items(&[0], &[7], &[0], array![[0.0]]);
        let g = items(
            &[1, 2, 3, 4, 5],
            &[7, 1, 7, 2, 3],
            &[1; 5],
            array![[1.0], [2.0], [3.0], [4.0], [5.0]],
        );
        let r = rank_and_score(&q, &g, &Protocol::default()).unwrap();
        assert!((r.map_score - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn same_identity_same_camera_is_dropped_and_empty_queries_excluded() {
        let q = items(&[0, 1], &[1, 2], &[0, 0], array![[0.0], [9.0]]);
        let g = items(&[2, 3], &[1, 1], &[0, 1], array![[0.0], [1.0]]);
        let r = rank_and_score(&q, &g, &Protocol::default()).unwrap();
        assert_eq!(r.num_queries, 1);
        assert_eq!(r.excluded_queries, 1);
        assert_eq!(r.rank(1), 1.0);
        assert_eq!(r.map_score, 1.0);
    }

    #[test]
    fn gallery_order_does_not_matter() {
        let q = items(&[0], &[1], &[0], array![[0.0]]);
        let a = items(
            &[5, 6, 7],
            &[2, 1, 3],
            &[1, 1, 1],
            array![[1.0], [1.0], [1.0]],
        );
        let b = items(
            &[7, 6, 5],
            &[3, 1, 2],
            &[1, 1, 1],
            array![[1.0], [1.0], [1.0]],
        );
        let p = Protocol::default();
        assert_eq!(
            rank_and_score(&q, &a, &p).unwrap(),
            rank_and_score(&q, &b, &p).unwrap()
        );
        assert_eq!(rank_and_score(&q, &a, &p).unwrap().rank(1), 0.0);
    }
}
