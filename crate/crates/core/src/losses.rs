//! Triplet, classification and distribution-alignment losses as graph
//! computations.
//!
//! Distances are Euclidean (not squared). Hardest positives and negatives are
//! selected from the current values and the selected pairs are then recomputed
//! on the graph, so gradients flow only through the chosen branch.

use std::rc::Rc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Indices, Var};
use crate::error::{Error, Result};

/// Added under the square root of every distance so that coincident
/// embeddings have a finite derivative.
pub const DISTANCE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

impl Reduction {
    fn apply(self, per_sample: Var<'_>) -> Var<'_> {
        match self {
            Reduction::Sum => per_sample.sum(),
            Reduction::Mean => per_sample.sum().scale(1.0 / per_sample.rows() as f64),
        }
    }
}

/// Gaussian kernel width for the alignment loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Median pairwise distance of the pooled features, recomputed per batch.
    #[default]
    Median,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the meta-train term in the simulation loss.
    pub lambda: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub margin: f64,
    #[serde(default)]
    pub bandwidth: Bandwidth,
    /// Use a cross-term coefficient of 1 instead of 2 in the kernel statistic.
    #[serde(default)]
    pub unit_cross_term: bool,
    #[serde(default)]
    pub reduction: Reduction,
    /// Standardize the alignment features by their pooled mean and RMS
    /// before the kernel and center terms.
    #[serde(default = "default_true")]
    pub standardize_alignment: bool,
}

fn default_true() -> bool {
    true
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 0.6,
            gamma1: 1.0,
            gamma2: 1.0,
            gamma3: 0.02,
            margin: 0.3,
            bandwidth: Bandwidth::Median,
            unit_cross_term: false,
            reduction: Reduction::Sum,
            standardize_alignment: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.lambda)
            && [self.gamma1, self.gamma2, self.gamma3, self.margin]
                .iter()
                .all(|&x| x >= 0.0 && x.is_finite())
            && match self.bandwidth {
                Bandwidth::Median => true,
                Bandwidth::Fixed(s) => s > 0.0 && s.is_finite(),
            };
        if ok {
            Ok(())
        } else {
            Err(Error::contract(format!("invalid loss weights: {self:?}")))
        }
    }
}

/// Euclidean distance matrix between the rows of `a` and `b`.
pub fn pairwise_distances(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.nrows(), b.nrows()), |(i, j)| {
        let sq: f64 = a
            .row(i)
            .iter()
            .zip(b.row(j))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        (sq + DISTANCE_EPS).sqrt()
    })
}

/// Row-wise distance `|a_i - b_i|` as an `[n, 1]` column.
pub fn row_distance<'g>(a: Var<'g>, b: Var<'g>) -> Var<'g> {
    (a - b).square().sum_cols().add_scalar(DISTANCE_EPS).sqrt()
}

/// Hardest-pair choice for every anchor of one set.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletSelection {
    /// Farthest same-label sample, indexing the anchor's own set.
    pub positive: Vec<usize>,
    /// Nearest different-label sample, indexing the negative set.
    pub negative: Vec<usize>,
    /// `d(anchor, positive) - d(anchor, negative) + margin` per anchor.
    pub hinge: Vec<f64>,
    /// Smallest distance gap between the chosen sample and the runner-up,
    /// over all anchors. Small gaps mean the selection is close to switching.
    pub min_gap: f64,
}

fn check_positives(labels: &[u32], what: &str) -> Result<()> {
    for (i, &y) in labels.iter().enumerate() {
        if !labels.iter().enumerate().any(|(j, &z)| j != i && z == y) {
            return Err(Error::contract(format!(
                "{what}: identity {y} has a single sample, no positive exists"
            )));
        }
    }
    Ok(())
}

/// Select hardest positives in `own` and hardest negatives in `other`.
///
/// `own_dist[i][j]` is the distance from anchor `i` to sample `j` of its own
/// set; `other_dist[i][j]` to sample `j` of the negative set (which may be
/// the same set). Ties go to the lowest index.
pub fn select_hardest(
    own_dist: &Array2<f64>,
    own_labels: &[u32],
    other_dist: &Array2<f64>,
    other_labels: &[u32],
    margin: f64,
) -> Result<TripletSelection> {
    let n = own_labels.len();
    let mut sel = TripletSelection {
        positive: Vec::with_capacity(n),
        negative: Vec::with_capacity(n),
        hinge: Vec::with_capacity(n),
        min_gap: f64::INFINITY,
    };
    for i in 0..n {
        let y = own_labels[i];
        let mut best: Option<(usize, f64)> = None;
        let mut runner_up = f64::NEG_INFINITY;
        for j in (0..n).filter(|&j| j != i && own_labels[j] == y) {
            let d = own_dist[[i, j]];
            match best {
                Some((_, b)) if d <= b => runner_up = runner_up.max(d),
                Some((_, b)) => {
                    runner_up = b;
                    best = Some((j, d));
                }
                None => best = Some((j, d)),
            }
        }
        let (pos, dp) = best.ok_or_else(|| {
            Error::contract(format!(
                "identity {y} has a single sample, no positive exists"
            ))
        })?;
        if runner_up.is_finite() {
            sel.min_gap = sel.min_gap.min(dp - runner_up);
        }

        let mut best: Option<(usize, f64)> = None;
        let mut runner_up = f64::INFINITY;
        for (j, &z) in other_labels.iter().enumerate() {
            if z == y {
                continue;
            }
            let d = other_dist[[i, j]];
            match best {
                Some((_, b)) if d >= b => runner_up = runner_up.min(d),
                Some((_, b)) => {
                    runner_up = b;
                    best = Some((j, d));
                }
                None => best = Some((j, d)),
            }
        }
        let (neg, dn) =
            best.ok_or_else(|| Error::contract(format!("no negative exists for identity {y}")))?;
        if runner_up.is_finite() {
            sel.min_gap = sel.min_gap.min(runner_up - dn);
        }
        sel.positive.push(pos);
        sel.negative.push(neg);
        sel.hinge.push(dp - dn + margin);
    }
    Ok(sel)
}

fn hinge_from_selection<'g>(
    anchors: Var<'g>,
    negatives: Var<'g>,
    sel: &TripletSelection,
    margin: f64,
) -> Var<'g> {
    let pos: Indices = Rc::from(sel.positive.as_slice());
    let neg: Indices = Rc::from(sel.negative.as_slice());
    let dp = row_distance(anchors, anchors.gather_rows(pos));
    let dn = row_distance(anchors, negatives.gather_rows(neg));
    (dp - dn).add_scalar(margin).relu()
}

/// Batch-hard triplet loss over one set of embeddings.
pub fn batch_hard_triplet<'g>(
    embeddings: Var<'g>,
    labels: &[u32],
    margin: f64,
    reduction: Reduction,
) -> Result<Var<'g>> {
    if labels.len() != embeddings.rows() {
        return Err(Error::contract("one label per embedding row is required"));
    }
    check_positives(labels, "batch_hard_triplet")?;
    let dist = pairwise_distances(&embeddings.value(), &embeddings.value());
    let sel = select_hardest(&dist, labels, &dist, labels, margin)?;
    Ok(reduction.apply(hinge_from_selection(embeddings, embeddings, &sel, margin)))
}

/// Triplet loss across two sets: positives from the anchor's own set,
/// negatives from the other set. Both directions are summed.
pub fn meta_triplet<'g>(
    mtr: Var<'g>,
    mtr_labels: &[u32],
    mte: Var<'g>,
    mte_labels: &[u32],
    margin: f64,
    reduction: Reduction,
) -> Result<Var<'g>> {
    if mtr_labels.len() != mtr.rows() || mte_labels.len() != mte.rows() {
        return Err(Error::contract("one label per embedding row is required"));
    }
    check_positives(mtr_labels, "meta_triplet (meta-train set)")?;
    check_positives(mte_labels, "meta_triplet (meta-test set)")?;
    let (a, b) = (mtr.value(), mte.value());
    let (aa, ab, bb) = (
        pairwise_distances(&a, &a),
        pairwise_distances(&a, &b),
        pairwise_distances(&b, &b),
    );
    let sel_a = select_hardest(&aa, mtr_labels, &ab, mte_labels, margin)?;
    let sel_b = select_hardest(&bb, mte_labels, &ab.t().to_owned(), mtr_labels, margin)?;
    let ha = hinge_from_selection(mtr, mte, &sel_a, margin);
    let hb = hinge_from_selection(mte, mtr, &sel_b, margin);
    let total = ha.sum() + hb.sum();
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => total.scale(1.0 / (mtr.rows() + mte.rows()) as f64),
    })
}

/// Softmax cross-entropy, shifted by the row maximum for stability.
pub fn cross_entropy<'g>(logits: Var<'g>, labels: &[u32], reduction: Reduction) -> Result<Var<'g>> {
    let (n, classes) = logits.shape();
    if labels.len() != n {
        return Err(Error::contract("one label per logit row is required"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y as usize >= classes) {
        return Err(Error::contract(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let g = logits.graph();
    let values = logits.value();
    let row_max = Array2::from_shape_fn((n, 1), |(r, _)| {
        values
            .row(r)
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    });
    let shifted = logits - g.leaf(row_max).broadcast_cols(classes);
    let log_sum_exp = shifted.exp().sum_cols().ln();
    let idx: Indices = labels.iter().map(|&y| y as usize).collect();
    let picked = shifted.gather_elems(idx);
    Ok(reduction.apply(log_sum_exp - picked))
}

fn kernel_sum<'g>(a: Var<'g>, b: Var<'g>, sigma: f64) -> Var<'g> {
    let (n, m) = (a.rows(), b.rows());
    let sq_a = a.square().sum_cols().broadcast_cols(m);
    let sq_b = b.square().sum_cols().t().broadcast_rows(n);
    let d2 = sq_a + sq_b - a.matmul(b.t()).scale(2.0);
    d2.scale(-1.0 / (2.0 * sigma * sigma)).exp().sum()
}

fn check_same_size(a: Var<'_>, b: Var<'_>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!(
            "{what}: feature sets differ in shape, {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.rows() == 0 {
        return Err(Error::contract(format!("{what}: empty feature set")));
    }
    Ok(())
}

/// Biased Gaussian-kernel discrepancy between two equally sized feature sets.
///
/// `cross_coefficient` multiplies the cross-set kernel sum; 2 gives the
/// standard statistic that vanishes for identical sets.
pub fn mmd<'g>(fa: Var<'g>, fb: Var<'g>, sigma: f64, cross_coefficient: f64) -> Result<Var<'g>> {
    check_same_size(fa, fb, "mmd")?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::contract(format!(
            "kernel bandwidth must be > 0, got {sigma}"
        )));
    }
    let n = fa.rows() as f64;
    let within = kernel_sum(fa, fa, sigma) + kernel_sum(fb, fb, sigma);
    let cross = kernel_sum(fa, fb, sigma).scale(cross_coefficient);
    Ok((within - cross).scale(1.0 / (n * n)))
}

/// Median pairwise distance of the pooled rows of `a` and `b`; 1 if that is 0.
pub fn median_bandwidth(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let pooled = ndarray::concatenate(ndarray::Axis(0), &[a.view(), b.view()]).expect("same width");
    let n = pooled.nrows();
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let sq: f64 = pooled
                .row(i)
                .iter()
                .zip(pooled.row(j))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            d.push(sq.sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    let median = if d.len() % 2 == 0 {
        0.5 * (d[mid - 1] + d[mid])
    } else {
        d[mid]
    };
    if median > 0.0 {
        median
    } else {
        1.0
    }
}

/// Squared distance between the two set means.
pub fn center_distance<'g>(fa: Var<'g>, fb: Var<'g>) -> Result<Var<'g>> {
    check_same_size(fa, fb, "center_distance")?;
    Ok((fa.mean_rows() - fb.mean_rows()).square().sum())
}

/// Shift both sets by their pooled mean and divide by the pooled RMS.
///
/// The alignment terms become invariant to the scale and offset of the tap
/// features, so they cannot be lowered by shrinking the features when a
/// later normalization restores their scale.
pub fn standardize_pair<'g>(fa: Var<'g>, fb: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
    check_same_size(fa, fb, "standardize_pair")?;
    let (n, d) = fa.shape();
    let mean = (fa.mean_rows() + fb.mean_rows()).scale(0.5);
    let ca = fa - mean.broadcast_rows(n);
    let cb = fb - mean.broadcast_rows(n);
    let var = (ca.square().sum() + cb.square().sum()).scale(1.0 / (2 * n * d) as f64);
    let inv = var.add_scalar(STANDARDIZE_EPS).sqrt().recip();
    Ok((ca * inv.expand((n, d)), cb * inv.expand((n, d))))
}

/// Added to the pooled variance in [`standardize_pair`].
pub const STANDARDIZE_EPS: f64 = 1e-8;

/// Kernel discrepancy plus center distance.
pub fn meta_camera_alignment<'g>(
    fa: Var<'g>,
    fb: Var<'g>,
    sigma: f64,
    cross_coefficient: f64,
) -> Result<Var<'g>> {
    Ok(mmd(fa, fb, sigma, cross_coefficient)? + center_distance(fa, fb)?)
}

impl LossWeights {
    pub fn mmd_cross_coefficient(&self) -> f64 {
        if self.unit_cross_term {
            1.0
        } else {
            2.0
        }
    }

    pub fn resolve_bandwidth(&self, a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        match self.bandwidth {
            Bandwidth::Median => median_bandwidth(a, b),
            Bandwidth::Fixed(s) => s,
        }
    }
}

/// The four terms of the meta objective.
#[derive(Clone, Copy, Debug)]
pub struct LossComponents<'g> {
    pub simulation: Var<'g>,
    pub meta_triplet: Var<'g>,
    pub meta_classification: Var<'g>,
    pub alignment: Var<'g>,
}

/// `simulation + gamma1 * meta_triplet + gamma2 * meta_classification + gamma3 * alignment`.
pub fn total_loss<'g>(c: &LossComponents<'g>, w: &LossWeights) -> Var<'g> {
    c.simulation
        + c.meta_triplet.scale(w.gamma1)
        + c.meta_classification.scale(w.gamma2)
        + c.alignment.scale(w.gamma3)
}

/// `lambda * meta_train + (1 - lambda) * meta_test`.
pub fn simulation_combine<'g>(meta_train: Var<'g>, meta_test: Var<'g>, lambda: f64) -> Var<'g> {
    meta_train.scale(lambda) + meta_test.scale(1.0 - lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use ndarray::array;

    #[test]
    fn identical_embeddings_give_n_times_margin() {
        let g = Graph::new();
        let e = g.leaf(Array2::from_elem((6, 3), 0.7));
        let labels = [0, 0, 1, 1, 2, 2];
        let loss = batch_hard_triplet(e, &labels, 0.3, Reduction::Sum).unwrap();
        assert!((loss.item() - 6.0 * 0.3).abs() < 1e-15);
    }

    #[test]
    fn satisfied_margin_gives_zero() {
        let g = Graph::new();
        let e = g.leaf(array![[0.0, 0.0], [0.1, 0.0], [5.0, 0.0], [5.1, 0.0]]);
        let loss = batch_hard_triplet(e, &[0, 0, 1, 1], 0.3, Reduction::Sum).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn singleton_identity_is_a_contract_violation() {
        let g = Graph::new();
        let e = g.leaf(Array2::zeros((3, 2)));
        assert!(matches!(
            batch_hard_triplet(e, &[0, 0, 1], 0.3, Reduction::Sum),
            Err(Error::Contract(_))
        ));
        let e = g.leaf(Array2::zeros((2, 2)));
        assert!(matches!(
            batch_hard_triplet(e, &[4, 4], 0.3, Reduction::Sum),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn mean_reduction_divides_by_anchor_count() {
        let g = Graph::new();
        let e = g.leaf(Array2::from_elem((4, 2), 1.0));
        let mean = batch_hard_triplet(e, &[0, 0, 1, 1], 0.3, Reduction::Mean).unwrap();
        assert!((mean.item() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn meta_triplet_identical_clouds_disjoint_labels() {
        let g = Graph::new();
        let pts = array![[0.0, 1.0], [0.0, 1.0], [2.0, 0.0], [2.0, 0.0]];
        let a = g.leaf(pts.clone());
        let b = g.leaf(pts);
        let loss = meta_triplet(a, &[0, 0, 1, 1], b, &[2, 2, 3, 3], 0.3, Reduction::Sum).unwrap();
        // P = 2, K = 2: 2PK anchors, each with zero positive and negative distance.
        assert!((loss.item() - 8.0 * 0.3).abs() < 1e-15);
    }

    #[test]
    fn meta_triplet_far_apart_sets_give_zero() {
        let g = Graph::new();
        let a = g.leaf(array![[0.0, 0.0], [0.01, 0.0], [0.0, 1.0], [0.0, 1.01]]);
        let b = g.leaf(array![[50.0, 0.0], [50.01, 0.0], [50.0, 1.0], [50.0, 1.01]]);
        let loss = meta_triplet(a, &[0, 0, 1, 1], b, &[2, 2, 3, 3], 0.3, Reduction::Sum).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let g = Graph::new();
        let logits = g.leaf(Array2::from_elem((5, 7), 0.25));
        let loss = cross_entropy(logits, &[0, 1, 2, 3, 6], Reduction::Sum).unwrap();
        assert!((loss.item() - 5.0 * 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_favoring_logits_are_below_uniform() {
        let g = Graph::new();
        let logits = g.leaf(array![[3.0, 0.0, 0.0], [0.0, 0.0, 2.0]]);
        let loss = cross_entropy(logits, &[0, 2], Reduction::Sum).unwrap();
        assert!(loss.item() < 2.0 * 3f64.ln());
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let g = Graph::new();
        let logits = g.leaf(Array2::zeros((2, 3)));
        assert!(matches!(
            cross_entropy(logits, &[0, 3], Reduction::Sum),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn mmd_basic_properties() {
        let g = Graph::new();
        let a = g.leaf(array![[0.0, 0.0], [1.0, 0.5]]);
        let b = g.leaf(array![[0.3, -1.0], [2.0, 0.0]]);
        let same = mmd(a, g.leaf((*a.value()).clone()), 1.0, 2.0).unwrap();
        assert_eq!(same.item(), 0.0);
        let ab = mmd(a, b, 1.0, 2.0).unwrap().item();
        let ba = mmd(b, a, 1.0, 2.0).unwrap().item();
        assert!((ab - ba).abs() < 1e-15);
        assert!(ab > 0.0);
        let literal = mmd(a, a, 1.0, 1.0).unwrap().item();
        assert!(
            literal > 0.0,
            "the coefficient-1 form does not vanish on identical sets"
        );
    }

    #[test]
    fn mmd_rejects_size_mismatch_and_bad_bandwidth() {
        let g = Graph::new();
        let a = g.leaf(Array2::zeros((2, 2)));
        let b = g.leaf(Array2::zeros((3, 2)));
        assert!(mmd(a, b, 1.0, 2.0).is_err());
        assert!(mmd(a, a, 0.0, 2.0).is_err());
        assert!(center_distance(a, b).is_err());
    }

    #[test]
    fn center_distance_examples() {
        let g = Graph::new();
        let a = g.leaf(array![[0.0, 0.0]]);
        let b = g.leaf(array![[1.0, 0.0]]);
        assert_eq!(center_distance(a, b).unwrap().item(), 1.0);
        let c = g.leaf(array![[1.0, 2.0], [3.0, 0.0]]);
        let d = g.leaf(array![[2.0, 0.0], [2.0, 2.0]]);
        assert_eq!(center_distance(c, d).unwrap().item(), 0.0);
    }

    #[test]
    fn standardized_alignment_ignores_scale_and_offset() {
        let g = Graph::new();
        let a = array![[0.0, 1.0], [2.0, -1.0], [0.5, 0.5]];
        let b = array![[1.0, 1.0], [3.0, 0.0], [-1.0, 2.0]];
        let value = |s: f64, t: f64| {
            let (fa, fb) =
                standardize_pair(g.leaf(a.mapv(|x| s * x + t)), g.leaf(b.mapv(|x| s * x + t)))
                    .unwrap();
            meta_camera_alignment(fa, fb, 1.0, 2.0).unwrap().item()
        };
        let base = value(1.0, 0.0);
        assert!(base > 0.0);
        assert!((value(0.05, 0.0) - base).abs() < 1e-4);
        assert!((value(7.0, -3.0) - base).abs() < 1e-7);
        let (fa, fb) = standardize_pair(g.leaf(a.clone()), g.leaf(b.clone())).unwrap();
        let pooled: f64 = fa
            .value()
            .iter()
            .chain(fb.value().iter())
            .map(|x| x * x)
            .sum();
        assert!((pooled / 12.0 - 1.0).abs() < 1e-6);
        assert!(standardize_pair(g.leaf(a), g.leaf(array![[1.0, 1.0]])).is_err());
    }

    #[test]
    fn alignment_is_sum_of_parts() {
        let g = Graph::new();
        let a = g.leaf(array![[0.0, 1.0], [1.0, 0.5], [0.2, 0.2]]);
        let b = g.leaf(array![[0.5, -1.0], [1.5, 0.0], [0.0, 0.0]]);
        let total = meta_camera_alignment(a, b, 0.8, 2.0).unwrap().item();
        let parts = mmd(a, b, 0.8, 2.0).unwrap().item() + center_distance(a, b).unwrap().item();
        assert_eq!(total, parts);
        let same = meta_camera_alignment(a, a, 0.8, 2.0).unwrap().item();
        assert_eq!(same, 0.0);
    }

    #[test]
    fn median_bandwidth_of_collinear_points() {
        let a = array![[0.0], [1.0]];
        let b = array![[3.0], [6.0]];
        // distances: 1, 3, 6, 2, 5, 3 -> sorted 1 2 3 3 5 6 -> median 3
        assert_eq!(median_bandwidth(&a, &b), 3.0);
        let z = Array2::zeros((2, 2));
        assert_eq!(median_bandwidth(&z, &z), 1.0);
    }

    #[test]
    fn total_loss_with_zero_gammas_is_simulation() {
        let g = Graph::new();
        let c = LossComponents {
            simulation: g.scalar(1.5),
            meta_triplet: g.scalar(2.0),
            meta_classification: g.scalar(3.0),
            alignment: g.scalar(4.0),
        };
        let w = LossWeights {
            gamma1: 0.0,
            gamma2: 0.0,
            gamma3: 0.0,
            ..LossWeights::default()
        };
        assert_eq!(total_loss(&c, &w).item(), 1.5);
        let d = LossWeights::default();
        assert_eq!((d.gamma1, d.gamma2, d.gamma3), (1.0, 1.0, 0.02));
        assert_eq!((d.lambda, d.margin), (0.6, 0.3));
        assert!((total_loss(&c, &d).item() - (1.5 + 2.0 + 3.0 + 0.08)).abs() < 1e-15);
    }

    #[test]
    fn invalid_weights_are_rejected() {
        let w = LossWeights {
            lambda: 1.5,
            ..LossWeights::default()
        };
        assert!(w.validate().is_err());
        let w = LossWeights {
            bandwidth: Bandwidth::Fixed(0.0),
            ..LossWeights::default()
        };
        assert!(w.validate().is_err());
        LossWeights::default().validate().unwrap();
    }
}
