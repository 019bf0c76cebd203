//! Linear soft-margin SVM and the nested leave-one-out evaluation harness.
//!
//! The SVM dual is solved on a precomputed linear kernel by an
//! interior-point method followed by SMO with second-order working-set
//! selection. The bias is unregularized.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// KKT violation (maximal violating pair gap) at which SMO stops.
pub const KKT_TOLERANCE: f64 = 1e-6;
const TAU: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    features: Array2<f64>,
    /// Class index per video, 0 or 1.
    labels: Vec<usize>,
    class_names: [String; 2],
    video_ids: Vec<String>,
}

impl LabeledDataset {
    /// Classes are the two distinct label strings in sorted order; the
    /// second one is the positive class.
    pub fn new(features: Array2<f64>, labels: &[String], video_ids: Vec<String>) -> Result<Self> {
        let mut names: Vec<&String> = labels.iter().collect();
        names.sort();
        names.dedup();
        if names.len() != 2 {
            return Err(Error::input(format!(
                "labels must contain exactly two classes, found {}",
                names.len()
            )));
        }
        let class_names = [names[0].clone(), names[1].clone()];
        let idx = labels.iter().map(|l| usize::from(*l == class_names[1])).collect();
        Self::from_indices(features, idx, class_names, video_ids)
    }

    pub fn from_indices(
        features: Array2<f64>,
        labels: Vec<usize>,
        class_names: [String; 2],
        video_ids: Vec<String>,
    ) -> Result<Self> {
        if features.nrows() != labels.len() || labels.len() != video_ids.len() {
            return Err(Error::input(format!(
                "{} feature rows, {} labels, {} video ids",
                features.nrows(),
                labels.len(),
                video_ids.len()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(dup) = video_ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::input(format!("duplicate video id {dup:?}")));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::input("class indices must be 0 or 1"));
        }
        if !labels.contains(&0) || !labels.contains(&1) {
            return Err(Error::input("both classes must be present"));
        }
        if !features.iter().all(|v| v.is_finite()) {
            return Err(Error::input("features contain non-finite values"));
        }
        Ok(LabeledDataset {
            features,
            labels,
            class_names,
            video_ids,
        })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String; 2] {
        &self.class_names
    }

    pub fn video_ids(&self) -> &[String] {
        &self.video_ids
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Same data with every video relabeled as the other class.
    pub fn swapped_labels(&self) -> Self {
        LabeledDataset {
            features: self.features.clone(),
            labels: self.labels.iter().map(|&l| 1 - l).collect(),
            class_names: self.class_names.clone(),
            video_ids: self.video_ids.clone(),
        }
    }

    fn signs(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().map(|&i| if self.labels[i] == 1 { 1.0 } else { -1.0 }).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub c_grid: Vec<f64>,
    pub inner_folds: usize,
    pub seed: u64,
    pub standardize: bool,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            c_grid: vec![0.01, 0.1, 1.0, 10.0, 100.0],
            inner_folds: 5,
            seed: 0,
            standardize: true,
        }
    }
}

impl CvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c_grid.is_empty() {
            return Err(Error::config("C grid must not be empty"));
        }
        if !self.c_grid.iter().all(|&c| c > 0.0 && c.is_finite()) {
            return Err(Error::config("C values must be positive"));
        }
        if !self.c_grid.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config("C grid must be sorted ascending without repeats"));
        }
        if self.inner_folds < 2 {
            return Err(Error::config("at least two inner folds are required"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSvm {
    pub weights: Array1<f64>,
    pub bias: f64,
}

impl LinearSvm {
    pub fn decision(&self, x: ArrayView1<'_, f64>) -> f64 {
        self.weights.dot(&x) + self.bias
    }

    /// True for the positive class.
    pub fn predict(&self, x: ArrayView1<'_, f64>) -> bool {
        self.decision(x) > 0.0
    }
}

/// Solves the dual `min 0.5 a'Qa - 1'a, 0 <= a_i <= C_i, y'a = 0`.
///
/// An interior-point method gets close to the optimum in a few dozen
/// Newton steps whatever the conditioning; variables near a bound are then
/// snapped to it and SMO finishes to [`KKT_TOLERANCE`]. Plain SMO from zero
/// needs millions of steps at large C on nearly separable data.
fn solve_dual(kernel: &Array2<f64>, y: &[f64], c: &[f64]) -> Result<(Vec<f64>, f64)> {
    let l = y.len();
    let q = |i: usize, j: usize| y[i] * y[j] * kernel[[i, j]];
    let alpha = interior_point(kernel, y, c)
        .and_then(|a| snap_to_bounds(a, y, c))
        .unwrap_or_else(|| vec![0.0; l]);
    let grad: Vec<f64> = (0..l)
        .map(|i| (0..l).map(|j| q(i, j) * alpha[j]).sum::<f64>() - 1.0)
        .collect();
    smo(kernel, y, c, alpha, grad)
}

/// Mehrotra predictor-corrector on the dual. Returns `None` if the Newton
/// system becomes singular before the duality measure is small.
fn interior_point(kernel: &Array2<f64>, y: &[f64], c: &[f64]) -> Option<Vec<f64>> {
    const MAX_STEPS: usize = 200;
    let l = y.len();
    let qm = DMatrix::from_fn(l, l, |i, j| y[i] * y[j] * kernel[[i, j]]);
    let yv = DVector::from_column_slice(y);
    let cv = DVector::from_column_slice(c);
    let c_scale = c.iter().fold(1.0f64, |m, &v| m.max(v));
    let mut a = &cv / 2.0;
    let mut z0 = DVector::from_element(l, 1.0);
    let mut z1 = DVector::from_element(l, 1.0);
    let mut nu = 0.0;
    let scale = 1.0 + qm.amax();
    for _ in 0..MAX_STEPS {
        let s = &cv - &a;
        let mu = (a.dot(&z0) + s.dot(&z1)) / (2 * l) as f64;
        let r_d = &qm * &a - DVector::from_element(l, 1.0) + &yv * nu - &z0 + &z1;
        let r_p = yv.dot(&a);
        if mu < 1e-13 * c_scale && r_d.amax() < 1e-11 * scale && r_p.abs() < 1e-11 * c_scale {
            break;
        }
        let mut h = qm.clone();
        for i in 0..l {
            h[(i, i)] += z0[i] / a[i] + z1[i] / s[i];
        }
        let chol = h.cholesky()?;
        let v = chol.solve(&yv);
        let yv_v = yv.dot(&v);
        let newton = |rc0: &DVector<f64>, rc1: &DVector<f64>| {
            let rhs = -&r_d + rc0.component_div(&a) - rc1.component_div(&s);
            let u = chol.solve(&rhs);
            let dnu = (yv.dot(&u) + r_p) / yv_v;
            let da = u - &v * dnu;
            let dz0 = (rc0 - z0.component_mul(&da)).component_div(&a);
            let dz1 = (rc1 + z1.component_mul(&da)).component_div(&s);
            (da, dnu, dz0, dz1)
        };
        let step_len = |da: &DVector<f64>, dz0: &DVector<f64>, dz1: &DVector<f64>| {
            let mut t = 1.0f64;
            for i in 0..l {
                for (x, dx) in [(a[i], da[i]), (s[i], -da[i]), (z0[i], dz0[i]), (z1[i], dz1[i])] {
                    if dx < 0.0 {
                        t = t.min(-x / dx);
                    }
                }
            }
            t
        };

        let (da, _, dz0, dz1) = newton(&-a.component_mul(&z0), &-s.component_mul(&z1));
        let t_aff = step_len(&da, &dz0, &dz1);
        let a_aff = &a + &da * t_aff;
        let mu_aff = (a_aff.dot(&(&z0 + &dz0 * t_aff)) + (&cv - &a_aff).dot(&(&z1 + &dz1 * t_aff))) / (2 * l) as f64;
        let sigma = (mu_aff / mu).powi(3).min(1.0);
        let rc0 = DVector::from_fn(l, |i, _| sigma * mu - a[i] * z0[i] - da[i] * dz0[i]);
        let rc1 = DVector::from_fn(l, |i, _| sigma * mu - s[i] * z1[i] + da[i] * dz1[i]);
        let (da, dnu, dz0, dz1) = newton(&rc0, &rc1);
        let t = (0.995 * step_len(&da, &dz0, &dz1)).min(1.0);
        if !(t > 0.0 && t.is_finite()) {
            return None;
        }
        a += &da * t;
        nu += dnu * t;
        z0 += &dz0 * t;
        z1 += &dz1 * t;
    }
    Some(a.iter().copied().collect())
}

/// Moves variables within a relative 1e-8 of a bound onto it and restores
/// `y'a = 0` using the free variables. `None` if that is not possible
/// without leaving the box.
fn snap_to_bounds(mut alpha: Vec<f64>, y: &[f64], c: &[f64]) -> Option<Vec<f64>> {
    for (a, &ct) in alpha.iter_mut().zip(c) {
        if *a < 1e-8 * ct {
            *a = 0.0;
        } else if *a > ct - 1e-8 * ct {
            *a = ct;
        }
    }
    let free: Vec<usize> = (0..alpha.len()).filter(|&t| alpha[t] > 0.0 && alpha[t] < c[t]).collect();
    let residual: f64 = alpha.iter().zip(y).map(|(a, y)| a * y).sum();
    if residual == 0.0 {
        return Some(alpha);
    }
    if free.is_empty() {
        return None;
    }
    let shift = residual / free.len() as f64;
    for &t in &free {
        alpha[t] -= y[t] * shift;
        if !(0.0..=c[t]).contains(&alpha[t]) {
            return None;
        }
    }
    Some(alpha)
}

/// SMO with second-order working-set selection, started from a feasible
/// `alpha` with matching gradient `Qa - 1`.
fn smo(kernel: &Array2<f64>, y: &[f64], c: &[f64], mut alpha: Vec<f64>, mut grad: Vec<f64>) -> Result<(Vec<f64>, f64)> {
    let l = y.len();
    let max_iter = (100 * l).max(10_000_000);
    let q = |i: usize, j: usize| y[i] * y[j] * kernel[[i, j]];

    let mut iter = 0;
    loop {
        // Working-set selection, second order.
        let mut gmax = f64::NEG_INFINITY;
        let mut i_sel = None;
        for t in 0..l {
            let up = if y[t] > 0.0 { alpha[t] < c[t] } else { alpha[t] > 0.0 };
            if up && -y[t] * grad[t] >= gmax {
                gmax = -y[t] * grad[t];
                i_sel = Some(t);
            }
        }
        let mut gmax2 = f64::NEG_INFINITY;
        let mut j_sel = None;
        let mut obj_min = f64::INFINITY;
        if let Some(i) = i_sel {
            for t in 0..l {
                let low = if y[t] > 0.0 { alpha[t] > 0.0 } else { alpha[t] < c[t] };
                if !low {
                    continue;
                }
                let v = y[t] * grad[t];
                gmax2 = gmax2.max(v);
                let diff = gmax + v;
                if diff > 0.0 {
                    let mut quad = kernel[[i, i]] + kernel[[t, t]] - 2.0 * kernel[[i, t]];
                    if quad <= 0.0 {
                        quad = TAU;
                    }
                    let obj = -(diff * diff) / quad;
                    if obj <= obj_min {
                        obj_min = obj;
                        j_sel = Some(t);
                    }
                }
            }
        }
        let (i, j) = match (i_sel, j_sel) {
            (Some(i), Some(j)) if gmax + gmax2 >= KKT_TOLERANCE => (i, j),
            _ => break,
        };
        iter += 1;
        if iter > max_iter {
            return Err(Error::Convergence {
                iterations: max_iter,
                last_update: gmax + gmax2,
            });
        }

        let (old_i, old_j) = (alpha[i], alpha[j]);
        let (mut ai, mut aj) = (old_i, old_j);
        if y[i] != y[j] {
            let mut quad = kernel[[i, i]] + kernel[[j, j]] + 2.0 * q(i, j);
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = ai - aj;
            ai += delta;
            aj += delta;
            if diff > 0.0 {
                if aj < 0.0 {
                    aj = 0.0;
                    ai = diff;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = -diff;
            }
            if diff > c[i] - c[j] {
                if ai > c[i] {
                    ai = c[i];
                    aj = c[i] - diff;
                }
            } else if aj > c[j] {
                aj = c[j];
                ai = c[j] + diff;
            }
        } else {
            let mut quad = kernel[[i, i]] + kernel[[j, j]] - 2.0 * q(i, j);
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (grad[i] - grad[j]) / quad;
            let sum = ai + aj;
            ai -= delta;
            aj += delta;
            if sum > c[i] {
                if ai > c[i] {
                    ai = c[i];
                    aj = sum - c[i];
                }
            } else if aj < 0.0 {
                aj = 0.0;
                ai = sum;
            }
            if sum > c[j] {
                if aj > c[j] {
                    aj = c[j];
                    ai = sum - c[j];
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = sum;
            }
        }
        alpha[i] = ai;
        alpha[j] = aj;
        let (di, dj) = (ai - old_i, aj - old_j);
        for (t, g) in grad.iter_mut().enumerate() {
            *g += q(t, i) * di + q(t, j) * dj;
        }
    }

    // Bias from free support vectors, else the midpoint of the feasible range.
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut free, mut sum) = (0usize, 0.0);
    for t in 0..l {
        let yg = y[t] * grad[t];
        if alpha[t] >= c[t] {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            sum += yg;
        }
    }
    let rho = if free > 0 { sum / free as f64 } else { (ub + lb) / 2.0 };
    Ok((alpha, -rho))
}

/// Soft-margin linear SVM; `labels` are +1 / -1.
pub fn train_linear_svm(features: ArrayView2<'_, f64>, labels: &[f64], c: f64) -> Result<LinearSvm> {
    train_weighted_svm(features, labels, c, c)
}

/// Soft-margin linear SVM with the hinge loss of positive examples weighted
/// by `c_pos` and of negative ones by `c_neg`.
pub fn train_weighted_svm(features: ArrayView2<'_, f64>, labels: &[f64], c_pos: f64, c_neg: f64) -> Result<LinearSvm> {
    if features.nrows() != labels.len() {
        return Err(Error::input("feature rows and labels differ in length"));
    }
    for c in [c_pos, c_neg] {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::input(format!("C must be positive, got {c}")));
        }
    }
    if labels.iter().any(|&y| y != 1.0 && y != -1.0) {
        return Err(Error::input("labels must be +1 or -1"));
    }
    if !labels.contains(&1.0) || !labels.contains(&-1.0) {
        return Err(Error::input("training data must contain both classes"));
    }
    // Solve in the orientation where the first label is +1 so that swapping
    // the classes negates the model exactly.
    let flip = labels[0] < 0.0;
    let y: Vec<f64> = labels.iter().map(|&v| if flip { -v } else { v }).collect();
    let c: Vec<f64> = labels.iter().map(|&v| if v > 0.0 { c_pos } else { c_neg }).collect();
    let kernel = features.dot(&features.t());
    let (alpha, bias) = solve_dual(&kernel, &y, &c)?;
    let mut weights = Array1::zeros(features.ncols());
    for (t, row) in features.axis_iter(Axis(0)).enumerate() {
        if alpha[t] != 0.0 {
            weights.scaled_add(alpha[t] * y[t], &row);
        }
    }
    let sign = if flip { -1.0 } else { 1.0 };
    Ok(LinearSvm {
        weights: weights * sign,
        bias: bias * sign,
    })
}

/// Per-feature z-scoring fitted on a training subset.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    mean: Array1<f64>,
    scale: Array1<f64>,
}

impl Standardizer {
    pub fn fit(x: ArrayView2<'_, f64>) -> Self {
        let n = x.nrows() as f64;
        let mean = x.sum_axis(Axis(0)) / n;
        let mut var = Array1::<f64>::zeros(x.ncols());
        for row in x.axis_iter(Axis(0)) {
            for ((v, &a), &m) in var.iter_mut().zip(row.iter()).zip(mean.iter()) {
                *v += (a - m) * (a - m);
            }
        }
        let scale = var.mapv(|v| {
            let sd = (v / n).sqrt();
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        });
        Standardizer { mean, scale }
    }

    pub fn transform(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        (&x - &self.mean) / &self.scale
    }
}

/// Fits the optional standardizer and the SVM on the `train` rows. Each
/// class's C is scaled by `n / (2 n_class)` so both classes carry equal total
/// hinge weight. Without this, a leave-one-out training fold is always one
/// video short in the held-out class, and a model with near-zero weights
/// votes for the other class every time.
fn fit_on(data: &LabeledDataset, train: &[usize], c: f64, standardize: bool) -> Result<(Option<Standardizer>, LinearSvm)> {
    let x = data.features.select(Axis(0), train);
    let y = data.signs(train);
    let counts = class_counts(&data.labels, train);
    let n = train.len() as f64;
    let c_pos = c * n / (2.0 * counts[1] as f64);
    let c_neg = c * n / (2.0 * counts[0] as f64);
    if standardize {
        let s = Standardizer::fit(x.view());
        let svm = train_weighted_svm(s.transform(x.view()).view(), &y, c_pos, c_neg)?;
        Ok((Some(s), svm))
    } else {
        Ok((None, train_weighted_svm(x.view(), &y, c_pos, c_neg)?))
    }
}

fn decisions(data: &LabeledDataset, rows: &[usize], model: &(Option<Standardizer>, LinearSvm)) -> Vec<f64> {
    let x = data.features.select(Axis(0), rows);
    let x = match &model.0 {
        Some(s) => s.transform(x.view()),
        None => x,
    };
    x.axis_iter(Axis(0)).map(|r| model.1.decision(r)).collect()
}

/// Stratified fold index per element of `members`: each element's fold is its
/// rank among same-class members in a seeded shuffle, modulo `folds`. The
/// assignment does not depend on which class is called positive.
pub fn stratified_folds(labels: &[usize], members: &[usize], folds: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..members.len()).collect();
    order.shuffle(rng);
    let mut counters = [0usize; 2];
    let mut assignment = vec![0; members.len()];
    for pos in order {
        let class = labels[members[pos]];
        assignment[pos] = counters[class] % folds;
        counters[class] += 1;
    }
    assignment
}

fn class_counts(labels: &[usize], rows: &[usize]) -> [usize; 2] {
    let mut counts = [0; 2];
    for &r in rows {
        counts[labels[r]] += 1;
    }
    counts
}

/// Inner-CV accuracy per C on the `train` rows; picks the best, smaller C on ties.
fn select_c(data: &LabeledDataset, train: &[usize], cfg: &CvConfig, rng: &mut ChaCha8Rng) -> Result<(f64, Vec<f64>)> {
    let folds = stratified_folds(&data.labels, train, cfg.inner_folds, rng);
    let mut splits = Vec::with_capacity(cfg.inner_folds);
    for f in 0..cfg.inner_folds {
        let fit: Vec<usize> = train.iter().zip(&folds).filter(|(_, &g)| g != f).map(|(&i, _)| i).collect();
        let held: Vec<usize> = train.iter().zip(&folds).filter(|(_, &g)| g == f).map(|(&i, _)| i).collect();
        let counts = class_counts(&data.labels, &fit);
        if counts[0] == 0 || counts[1] == 0 {
            return Err(Error::Stratification(format!(
                "inner fold {f} training split has class counts {counts:?}"
            )));
        }
        if !held.is_empty() {
            splits.push((fit, held));
        }
    }
    let mut accuracies = Vec::with_capacity(cfg.c_grid.len());
    for &c in &cfg.c_grid {
        let mut correct = 0usize;
        for (fit, held) in &splits {
            let model = fit_on(data, fit, c, cfg.standardize)?;
            for (&row, d) in held.iter().zip(decisions(data, held, &model)) {
                if usize::from(d > 0.0) == data.labels[row] {
                    correct += 1;
                }
            }
        }
        accuracies.push(correct as f64 / train.len() as f64);
    }
    let mut best = 0;
    for (i, &a) in accuracies.iter().enumerate() {
        if a > accuracies[best] {
            best = i;
        }
    }
    Ok((cfg.c_grid[best], accuracies))
}

fn fold_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub video_id: String,
    pub label: String,
    pub predicted: String,
    pub correct: bool,
    pub decision_value: f64,
    pub chosen_c: f64,
    pub inner_accuracies: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub accuracy: f64,
    pub per_class_accuracy: BTreeMap<String, f64>,
    pub folds: Vec<FoldOutcome>,
    pub c_grid: Vec<f64>,
    pub inner_folds: usize,
    pub stratified_inner_folds: bool,
    pub balanced_class_weights: bool,
    pub standardize: bool,
    pub seed: u64,
}

/// Leave-one-out outer loop; C picked per fold by stratified inner CV.
pub fn nested_loo_evaluate(data: &LabeledDataset, cfg: &CvConfig) -> Result<EvaluationReport> {
    cfg.validate()?;
    let v = data.len();
    if v < cfg.inner_folds + 1 {
        return Err(Error::input(format!(
            "{v} videos cannot support leave-one-out with {} inner folds (need at least {})",
            cfg.inner_folds,
            cfg.inner_folds + 1
        )));
    }
    let counts = class_counts(&data.labels, &(0..v).collect::<Vec<_>>());
    if counts.iter().any(|&c| c < 2) {
        return Err(Error::Stratification(format!(
            "class counts {counts:?}: holding out a video would leave a training fold with one class"
        )));
    }
    let outcomes: Vec<Result<FoldOutcome>> = (0..v)
        .into_par_iter()
        .map(|held| {
            let train: Vec<usize> = (0..v).filter(|&i| i != held).collect();
            let mut rng = fold_rng(cfg.seed, held as u64);
            let (c, inner) = select_c(data, &train, cfg, &mut rng).map_err(|e| match e {
                Error::Stratification(m) => {
                    Error::Stratification(format!("outer fold {:?}: {m}", data.video_ids[held]))
                }
                other => other,
            })?;
            let model = fit_on(data, &train, c, cfg.standardize)?;
            let d = decisions(data, &[held], &model)[0];
            let predicted = usize::from(d > 0.0);
            Ok(FoldOutcome {
                video_id: data.video_ids[held].clone(),
                label: data.class_names[data.labels[held]].clone(),
                predicted: data.class_names[predicted].clone(),
                correct: predicted == data.labels[held],
                decision_value: d,
                chosen_c: c,
                inner_accuracies: inner,
            })
        })
        .collect();
    let folds = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    let correct = folds.iter().filter(|f| f.correct).count();
    let mut per_class = BTreeMap::new();
    for (ci, name) in data.class_names.iter().enumerate() {
        let members: Vec<&FoldOutcome> = folds.iter().filter(|f| &f.label == name).collect();
        let acc = members.iter().filter(|f| f.correct).count() as f64 / counts[ci] as f64;
        per_class.insert(name.clone(), acc);
    }
    Ok(EvaluationReport {
        accuracy: correct as f64 / v as f64,
        per_class_accuracy: per_class,
        folds,
        c_grid: cfg.c_grid.clone(),
        inner_folds: cfg.inner_folds,
        stratified_inner_folds: true,
        balanced_class_weights: true,
        standardize: cfg.standardize,
        seed: cfg.seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsampleWeights {
    pub chosen_c: f64,
    pub fraction: f64,
    pub weights: Vec<Array1<f64>>,
}

/// Retrains on `count` seeded random subsets (each holding `fraction` of the
/// videos and both classes) with C chosen once by inner CV on all videos.
pub fn subsample_weights(data: &LabeledDataset, cfg: &CvConfig, count: usize, fraction: f64) -> Result<SubsampleWeights> {
    cfg.validate()?;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config("subsample fraction must be in (0, 1]"));
    }
    let v = data.len();
    let all: Vec<usize> = (0..v).collect();
    let mut rng = fold_rng(cfg.seed, u64::MAX);
    let (c, _) = select_c(data, &all, cfg, &mut rng)?;
    let size = ((fraction * v as f64).round() as usize).clamp(2, v);
    let weights: Vec<Result<Array1<f64>>> = (0..count)
        .into_par_iter()
        .map(|s| {
            let mut rng = fold_rng(cfg.seed ^ 0x5eed_5eed, s as u64);
            for _ in 0..1000 {
                let mut idx = all.clone();
                idx.shuffle(&mut rng);
                idx.truncate(size);
                idx.sort_unstable();
                let counts = class_counts(&data.labels, &idx);
                if counts[0] > 0 && counts[1] > 0 {
                    return Ok(fit_on(data, &idx, c, cfg.standardize)?.1.weights);
                }
            }
            Err(Error::Stratification(format!("subsample {s} never contained both classes")))
        })
        .collect();
    Ok(SubsampleWeights {
        chosen_c: c,
        fraction,
        weights: weights.into_iter().collect::<Result<Vec<_>>>()?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentWeights {
    pub component: String,
    pub channel_index: usize,
    /// One aggregated value per weight vector.
    pub values: Vec<f64>,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// For each channel, the mean |weight| over the `2Q - 1` pair features that
/// involve it, one value per weight vector; sorted by descending median.
pub fn component_weight_summary(weights: &[Array1<f64>], channel_names: &[String]) -> Result<Vec<ComponentWeights>> {
    let q = channel_names.len();
    if q == 0 || weights.is_empty() {
        return Err(Error::input("weight summary needs channels and at least one weight vector"));
    }
    if let Some(bad) = weights.iter().position(|w| w.len() != q * q) {
        return Err(Error::input(format!(
            "weight vector {bad} has length {}, expected {} for {q} channels",
            weights[bad].len(),
            q * q
        )));
    }
    let mut out: Vec<ComponentWeights> = (0..q)
        .map(|c| {
            let values: Vec<f64> = weights
                .iter()
                .map(|w| {
                    let mut acc = 0.0;
                    for k in 0..q {
                        acc += w[c * q + k].abs();
                        if k != c {
                            acc += w[k * q + c].abs();
                        }
                    }
                    acc / (2 * q - 1) as f64
                })
                .collect();
            let mut sorted = values.clone();
            sorted.sort_by(f64::total_cmp);
            ComponentWeights {
                component: channel_names[c].clone(),
                channel_index: c,
                median: quantile(&sorted, 0.5),
                q1: quantile(&sorted, 0.25),
                q3: quantile(&sorted, 0.75),
                min: sorted[0],
                max: sorted[sorted.len() - 1],
                mean: values.iter().sum::<f64>() / values.len() as f64,
                values,
            }
        })
        .collect();
    out.sort_by(|a, b| b.median.total_cmp(&a.median).then(a.channel_index.cmp(&b.channel_index)));
    Ok(out)
}
