//! Finite-difference checks of every loss gradient and of the meta-gradient.
//!
//! Each check builds a small random problem, differentiates it with the tape
//! and with central differences, and reports the norm-wise relative error.
//! Piecewise-linear losses are resampled until no hinge or hardest-pair
//! choice sits within [`KINK_TOL`] of switching.

use std::fmt::Write as _;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    evaluate, finite_diff_gradient, meta_gradient, relative_error, Graph, ParamSet, Var,
};
use crate::error::{Error, Result};
use crate::losses::{self, Reduction};
use crate::rng::rng_for;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Bound for plain loss gradients.
pub const LOSS_BOUND: f64 = 1e-5;
/// Bound for the composed inner/outer objective.
pub const META_BOUND: f64 = 1e-4;
/// Bound for the quadratic case against its closed form.
pub const QUADRATIC_BOUND: f64 = 1e-10;
/// Minimum distance of a hinge or a hardest-pair choice from its switch point.
pub const KINK_TOL: f64 = 1e-4;
const MAX_RESAMPLES: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub seed: u64,
    pub relative_error: f64,
    pub bound: f64,
    /// Draws rejected for sitting next to a kink.
    pub resamples: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.relative_error <= self.bound
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed())
    }

    /// Worst relative error per check name, in first-seen order.
    pub fn worst_by_name(&self) -> Vec<(String, f64, f64)> {
        let mut out: Vec<(String, f64, f64)> = Vec::new();
        for c in &self.checks {
            match out.iter_mut().find(|(n, _, _)| *n == c.name) {
                Some(entry) => entry.1 = entry.1.max(c.relative_error),
                None => out.push((c.name.clone(), c.relative_error, c.bound)),
            }
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<24} {:>12} {:>10}  status\n",
            "check", "worst error", "bound"
        );
        for (name, worst, bound) in self.worst_by_name() {
            let status = if worst <= bound { "ok" } else { "FAIL" };
            let _ = writeln!(s, "{name:<24} {worst:>12.3e} {bound:>10.0e}  {status}");
        }
        s
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: (usize, usize), scale: f64) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| scale * rng.sample::<f64, _>(StandardNormal))
}

fn params(entries: Vec<(&str, Array2<f64>)>) -> Result<ParamSet> {
    let mut p = ParamSet::new();
    for (name, v) in entries {
        p.insert(name, v)?;
    }
    Ok(p)
}

fn compare<F>(
    name: &str,
    seed: u64,
    p: &ParamSet,
    resamples: usize,
    build: F,
) -> Result<CheckResult>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let analytic = evaluate(p, &build)?.gradient()?;
    let numeric = finite_diff_gradient(|q| Ok(evaluate(q, &build)?.loss()), p, FD_STEP)?;
    Ok(CheckResult {
        name: name.to_string(),
        seed,
        relative_error: relative_error(&analytic, &numeric),
        bound: LOSS_BOUND,
        resamples,
    })
}

/// Labels `0,0,1,1,...` for `ids` identities with `k` samples each.
fn pk_labels(ids: usize, k: usize, offset: u32) -> Vec<u32> {
    (0..ids * k).map(|i| offset + (i / k) as u32).collect()
}

fn clear_of_kinks(sel: &losses::TripletSelection) -> bool {
    sel.min_gap > KINK_TOL && sel.hinge.iter().all(|h| h.abs() > KINK_TOL)
}

fn draw_until<T>(
    rng: &mut ChaCha8Rng,
    what: &str,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> Result<Option<T>>,
) -> Result<(T, usize)> {
    for attempt in 0..MAX_RESAMPLES {
        if let Some(v) = draw(rng)? {
            return Ok((v, attempt));
        }
    }
    Err(Error::contract(format!(
        "{what}: no kink-free draw in {MAX_RESAMPLES} attempts"
    )))
}

const MARGIN: f64 = 0.3;

fn check_batch_hard(seed: u64) -> Result<CheckResult> {
    let mut rng = rng_for(seed, &[0x9c, 1]);
    let labels = pk_labels(4, 3, 0);
    let (emb, resamples) = draw_until(&mut rng, "batch_hard_triplet", |rng| {
        let e = normal(rng, (labels.len(), 5), 1.0);
        let d = losses::pairwise_distances(&e, &e);
        let sel = losses::select_hardest(&d, &labels, &d, &labels, MARGIN)?;
        Ok(clear_of_kinks(&sel).then_some(e))
    })?;
    let p = params(vec![("embeddings", emb)])?;
    compare("batch_hard_triplet", seed, &p, resamples, |_, v| {
        losses::batch_hard_triplet(v[0], &labels, MARGIN, Reduction::Sum)
    })
}

fn check_meta_triplet(seed: u64) -> Result<CheckResult> {
    let mut rng = rng_for(seed, &[0x9c, 2]);
    let la = pk_labels(3, 2, 0);
    let lb = pk_labels(3, 2, 10);
    let (pair, resamples) = draw_until(&mut rng, "meta_triplet", |rng| {
        let a = normal(rng, (la.len(), 4), 1.0);
        let b = normal(rng, (lb.len(), 4), 1.0);
        let ab = losses::pairwise_distances(&a, &b);
        let sa =
            losses::select_hardest(&losses::pairwise_distances(&a, &a), &la, &ab, &lb, MARGIN)?;
        let sb = losses::select_hardest(
            &losses::pairwise_distances(&b, &b),
            &lb,
            &ab.t().to_owned(),
            &la,
            MARGIN,
        )?;
        Ok((clear_of_kinks(&sa) && clear_of_kinks(&sb)).then_some((a, b)))
    })?;
    let p = params(vec![("mtr", pair.0), ("mte", pair.1)])?;
    compare("meta_triplet", seed, &p, resamples, |_, v| {
        losses::meta_triplet(v[0], &la, v[1], &lb, MARGIN, Reduction::Sum)
    })
}

fn check_classification(seed: u64) -> Result<CheckResult> {
    let mut rng = rng_for(seed, &[0x9c, 3]);
    let labels: Vec<u32> = (0..8).map(|_| rng.random_range(0..5)).collect();
    let p = params(vec![
        ("features", normal(&mut rng, (8, 6), 1.0)),
        ("classifier", normal(&mut rng, (6, 5), 0.5)),
    ])?;
    compare("cross_entropy", seed, &p, 0, |_, v| {
        losses::cross_entropy(v[0].matmul(v[1]), &labels, Reduction::Sum)
    })
}

fn alignment_params(seed: u64, tag: u64) -> Result<(ParamSet, f64)> {
    let mut rng = rng_for(seed, &[0x9c, tag]);
    let a = normal(&mut rng, (6, 4), 1.0);
    let b = normal(&mut rng, (6, 4), 1.0) + 0.5;
    let sigma = losses::median_bandwidth(&a, &b);
    Ok((params(vec![("fa", a), ("fb", b)])?, sigma))
}

fn check_mmd(seed: u64) -> Result<CheckResult> {
    let (p, sigma) = alignment_params(seed, 4)?;
    compare("mmd", seed, &p, 0, |_, v| {
        losses::mmd(v[0], v[1], sigma, 2.0)
    })
}

fn check_center(seed: u64) -> Result<CheckResult> {
    let (p, _) = alignment_params(seed, 5)?;
    compare("center_distance", seed, &p, 0, |_, v| {
        losses::center_distance(v[0], v[1])
    })
}

fn check_alignment(seed: u64) -> Result<CheckResult> {
    let (p, sigma) = alignment_params(seed, 6)?;
    compare("camera_alignment", seed, &p, 0, |_, v| {
        losses::meta_camera_alignment(v[0], v[1], sigma, 2.0)
    })
}

fn check_standardized_alignment(seed: u64) -> Result<CheckResult> {
    let (p, _) = alignment_params(seed, 7)?;
    compare("standardized_alignment", seed, &p, 0, |_, v| {
        let (a, b) = losses::standardize_pair(v[0], v[1])?;
        losses::meta_camera_alignment(a, b, 1.5, 2.0)
    })
}

/// Gradient checks of every loss term on one seed.
pub fn loss_checks(seed: u64) -> Result<Vec<CheckResult>> {
    Ok(vec![
        check_batch_hard(seed)?,
        check_meta_triplet(seed)?,
        check_classification(seed)?,
        check_mmd(seed)?,
        check_center(seed)?,
        check_alignment(seed)?,
        check_standardized_alignment(seed)?,
    ])
}

/// Pins a closure to the higher-ranked signature `meta_gradient` expects.
fn objective<F>(f: F) -> F
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    f
}

/// `t M t^T / 2 + t lin^T` for a row vector `t`.
fn quadratic<'g>(g: &'g Graph, t: Var<'g>, m: &Array2<f64>, lin: &Array2<f64>) -> Var<'g> {
    let m = g.leaf(m.clone());
    let lin = g.leaf(lin.clone());
    t.matmul(m).matmul(t.t()).scale(0.5) + t.matmul(lin.t())
}

fn softplus(x: Var<'_>) -> Var<'_> {
    x.exp().add_scalar(1.0).ln()
}

/// Two-layer softplus network: `softplus(x W1 + b1) W2`, plus the hidden layer.
fn small_net<'g>(g: &'g Graph, x: &Array2<f64>, p: &[Var<'g>]) -> (Var<'g>, Var<'g>) {
    let x = g.leaf(x.clone());
    let hidden = softplus(x.matmul(p[0]).add_row(p[1]));
    (hidden.matmul(p[2]), hidden)
}

/// Exact meta-gradient of `outer(theta - eta * grad inner(theta))` on a random
/// small network against central differences of the composed objective.
pub fn check_meta_gradient(seed: u64) -> Result<CheckResult> {
    let mut rng = rng_for(seed, &[0x9c, 8]);
    let (d, h, c, n) = (5, 6, 4, 8);
    let theta = params(vec![
        ("w1", normal(&mut rng, (d, h), 0.5)),
        ("b1", normal(&mut rng, (1, h), 0.1)),
        ("w2", normal(&mut rng, (h, c), 0.5)),
    ])?;
    let x_tr = normal(&mut rng, (n, d), 1.0);
    let x_te = normal(&mut rng, (n, d), 1.0);
    let y_tr: Vec<u32> = (0..n).map(|_| rng.random_range(0..c as u32)).collect();
    let y_te: Vec<u32> = (0..n).map(|_| rng.random_range(0..c as u32)).collect();
    let eta = 0.5;

    let inner = objective(|g, p| {
        let (logits, _) = small_net(g, &x_tr, p);
        losses::cross_entropy(logits, &y_tr, Reduction::Mean)
    });
    let outer = objective(|g, p| {
        let (logits, hidden_te) = small_net(g, &x_te, p);
        let (_, hidden_tr) = small_net(g, &x_tr, p);
        let ce = losses::cross_entropy(logits, &y_te, Reduction::Mean)?;
        Ok(ce + losses::meta_camera_alignment(hidden_tr, hidden_te, 2.0, 2.0)?.scale(0.5))
    });

    let analytic = meta_gradient(outer, inner, &theta, eta, false)?.grads;
    let numeric = finite_diff_gradient(
        |q| Ok(meta_gradient(outer, inner, q, eta, false)?.loss),
        &theta,
        FD_STEP,
    )?;
    Ok(CheckResult {
        name: "meta_gradient".into(),
        seed,
        relative_error: relative_error(&analytic, &numeric),
        bound: META_BOUND,
        resamples: 0,
    })
}

/// Quadratic inner and outer losses, where the meta-gradient has the closed
/// form `(I - eta A)(C theta' + d)` with `theta' = theta - eta (A theta + b)`.
pub fn check_quadratic(seed: u64) -> Result<CheckResult> {
    let mut rng = rng_for(seed, &[0x9c, 9]);
    let n = 6;
    let spd = |rng: &mut ChaCha8Rng| {
        let m = normal(rng, (n, n), 1.0);
        m.t().dot(&m) / n as f64 + Array2::<f64>::eye(n)
    };
    let a = spd(&mut rng);
    let c = spd(&mut rng);
    let b = normal(&mut rng, (1, n), 1.0);
    let dv = normal(&mut rng, (1, n), 1.0);
    let theta0 = normal(&mut rng, (1, n), 1.0);
    let eta = 0.1;

    let inner = objective(|g, p| Ok(quadratic(g, p[0], &a, &b)));
    let outer = objective(|g, p| Ok(quadratic(g, p[0], &c, &dv)));
    let theta = params(vec![("theta", theta0.clone())])?;
    let got = meta_gradient(outer, inner, &theta, eta, false)?.grads;

    let adapted = &theta0 - &((theta0.dot(&a) + &b) * eta);
    let outer_grad = adapted.dot(&c) + &dv;
    let expected = outer_grad.dot(&(Array2::<f64>::eye(n) - &a * eta));
    let expected = params(vec![("theta", expected)])?;
    Ok(CheckResult {
        name: "meta_gradient_quadratic".into(),
        seed,
        relative_error: relative_error(&got, &expected),
        bound: QUADRATIC_BOUND,
        resamples: 0,
    })
}

/// Every loss check plus both meta-gradient checks on each seed.
pub fn run_suite(seeds: &[u64]) -> Result<GradcheckReport> {
    let mut report = GradcheckReport::default();
    for &seed in seeds {
        report.checks.extend(loss_checks(seed)?);
        report.checks.push(check_meta_gradient(seed)?);
        report.checks.push(check_quadratic(seed)?);
    }
    Ok(report)
}

/// Ten consecutive seeds starting at `seed`.
pub fn default_seeds(seed: u64) -> Vec<u64> {
    (seed..seed + 10).collect()
}
