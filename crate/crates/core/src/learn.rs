//! Learning a localized basis by batch alternating minimization.
//!
//! Each outer iteration codes the whole corpus against the current atoms
//! (warm-started from the previous codes), then runs one pass of block
//! coordinate descent over the atoms. Every atom is restricted to the rows of
//! its facial-feature group and kept inside the unit l2 ball. Both half-steps
//! are descent steps, so the logged objective is non-increasing.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::coding::{objective_from_atoms, CodingConfig, SparseCoder};
use crate::error::{Error, Result};
use crate::model::{bu_names, BasisDictionary, CoefficientSeries, GroupCode, LandmarkTopology};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    MaskedGaussian,
    MaskedDataSamples,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnConfig {
    pub atom_count: usize,
    pub lambda: f64,
    /// Atoms per group. `None` allocates proportionally to landmark counts.
    pub group_allocation: Option<BTreeMap<GroupCode, usize>>,
    pub outer_iterations: usize,
    pub seed: u64,
    pub init: InitStrategy,
    /// Relative objective change below which learning stops.
    pub convergence_tol: f64,
    pub coding_max_iterations: usize,
    pub coding_tolerance: f64,
}

impl Default for LearnConfig {
    fn default() -> Self {
        LearnConfig {
            atom_count: 50,
            lambda: 0.2,
            group_allocation: None,
            outer_iterations: 100,
            seed: 0,
            init: InitStrategy::MaskedDataSamples,
            convergence_tol: 1e-5,
            coding_max_iterations: CodingConfig::default().max_iterations,
            coding_tolerance: CodingConfig::default().tolerance,
        }
    }
}

impl LearnConfig {
    pub fn coding(&self) -> CodingConfig {
        CodingConfig {
            lambda: self.lambda,
            max_iterations: self.coding_max_iterations,
            tolerance: self.coding_tolerance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.coding().validate()?;
        if self.atom_count == 0 {
            return Err(Error::config("atom_count must be positive"));
        }
        if self.outer_iterations == 0 {
            return Err(Error::config("outer_iterations must be positive"));
        }
        if !(self.convergence_tol > 0.0 && self.convergence_tol.is_finite()) {
            return Err(Error::config("convergence_tol must be positive"));
        }
        Ok(())
    }

    /// Atom count per group in `GroupCode::ALL` order.
    pub fn resolved_allocation(&self, topology: &LandmarkTopology) -> Result<Vec<(GroupCode, usize)>> {
        let alloc = match &self.group_allocation {
            Some(map) => {
                if let Some(extra) = map.keys().find(|g| !GroupCode::ALL.contains(g)) {
                    return Err(Error::config(format!("unknown group {extra} in allocation")));
                }
                GroupCode::ALL
                    .iter()
                    .map(|&g| (g, map.get(&g).copied().unwrap_or(0)))
                    .collect()
            }
            None => default_allocation(topology, self.atom_count)?,
        };
        let total: usize = alloc.iter().map(|&(_, n)| n).sum();
        if total != self.atom_count {
            return Err(Error::config(format!(
                "group allocation sums to {total}, atom_count is {}",
                self.atom_count
            )));
        }
        if let Some((g, _)) = alloc.iter().find(|&&(_, n)| n == 0) {
            return Err(Error::config(format!("group {g} has no atoms allocated")));
        }
        Ok(alloc)
    }
}

/// Each group receives `round(K * L_g / L)` atoms (at least one); whatever
/// is left over, positive or negative, goes to the mouth.
pub fn default_allocation(topology: &LandmarkTopology, atom_count: usize) -> Result<Vec<(GroupCode, usize)>> {
    let l = topology.landmark_count() as f64;
    let mut alloc: Vec<(GroupCode, usize)> = GroupCode::ALL
        .iter()
        .map(|&g| {
            let share = atom_count as f64 * topology.landmarks(g).len() as f64 / l;
            (g, (share.round() as usize).max(1))
        })
        .collect();
    let others: usize = alloc.iter().filter(|(g, _)| *g != GroupCode::MO).map(|&(_, n)| n).sum();
    if others >= atom_count {
        return Err(Error::config(format!(
            "{atom_count} atoms cannot cover all six facial-feature groups"
        )));
    }
    let mouth = alloc.iter_mut().find(|(g, _)| *g == GroupCode::MO).unwrap();
    mouth.1 = atom_count - others;
    Ok(alloc)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIterations,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub iteration: usize,
    pub objective: f64,
    /// Fraction of nonzero code entries.
    pub mean_sparsity: f64,
    pub max_atom_norm: f64,
    pub reinitialized_atoms: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<TrainingRecord>,
    pub stop_reason: StopReason,
}

impl TrainingLog {
    pub fn initial_objective(&self) -> f64 {
        self.records[0].objective
    }

    pub fn final_objective(&self) -> f64 {
        self.records.last().unwrap().objective
    }
}

#[derive(Clone, Debug)]
pub struct LearnOutcome {
    pub dictionary: BasisDictionary,
    pub log: TrainingLog,
    /// Codes of the training corpus against the returned dictionary.
    pub codes: Array2<f64>,
}

fn max_atom_norm(atoms: &Array2<f64>) -> f64 {
    atoms
        .axis_iter(Axis(1))
        .map(|a| a.dot(&a).sqrt())
        .fold(0.0, f64::max)
}

fn sparsity(codes: &Array2<f64>) -> f64 {
    if codes.is_empty() {
        return 0.0;
    }
    codes.iter().filter(|&&v| v != 0.0).count() as f64 / codes.len() as f64
}

fn normalize_into(atoms: &mut Array2<f64>, k: usize, values: &Array1<f64>) -> bool {
    let norm = values.dot(values).sqrt();
    if norm > 0.0 && norm.is_finite() {
        atoms.column_mut(k).assign(&(values / norm));
        true
    } else {
        false
    }
}

fn masked(values: ndarray::ArrayView1<'_, f64>, rows: &[usize], dim: usize) -> Array1<f64> {
    let mut out = Array1::zeros(dim);
    for &r in rows {
        out[r] = values[r];
    }
    out
}

fn gaussian_atom(rng: &mut ChaCha8Rng, rows: &[usize], dim: usize) -> Array1<f64> {
    let mut out = Array1::zeros(dim);
    for &r in rows {
        out[r] = rng.sample::<f64, _>(StandardNormal);
    }
    out
}

fn initialize(
    samples: ArrayView2<'_, f64>,
    topology: &LandmarkTopology,
    groups: &[GroupCode],
    init: InitStrategy,
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    let dim = topology.dim();
    let mut atoms = Array2::zeros((dim, groups.len()));
    let mut start = 0;
    for &g in &GroupCode::ALL {
        let count = groups.iter().filter(|&&a| a == g).count();
        let rows = topology.rows(g);
        let cols = start..start + count;
        start += count;
        let candidates: Vec<usize> = match init {
            InitStrategy::MaskedGaussian => Vec::new(),
            InitStrategy::MaskedDataSamples => (0..samples.nrows())
                .filter(|&n| rows.iter().any(|&r| samples[[n, r]] != 0.0))
                .collect(),
        };
        let picks: Vec<usize> = if candidates.is_empty() {
            Vec::new()
        } else if candidates.len() >= count {
            index::sample(rng, candidates.len(), count).into_vec()
        } else {
            (0..count).map(|_| rng.gen_range(0..candidates.len())).collect()
        };
        for (i, k) in cols.enumerate() {
            let init_values = match picks.get(i) {
                Some(&p) => masked(samples.row(candidates[p]), &rows, dim),
                None => gaussian_atom(rng, &rows, dim),
            };
            if !normalize_into(&mut atoms, k, &init_values) {
                let fallback = gaussian_atom(rng, &rows, dim);
                normalize_into(&mut atoms, k, &fallback);
            }
        }
    }
    atoms
}

/// One pass of block coordinate descent over the atoms with the codes fixed.
///
/// Atom `k` is replaced by the minimizer of the data term over vectors
/// supported on its group rows, then projected onto the unit ball. Atoms whose
/// code column is entirely zero are left untouched. Rows outside each mask are
/// never written.
pub fn update_dictionary_step(
    atoms: &Array2<f64>,
    samples: ArrayView2<'_, f64>,
    codes: ArrayView2<'_, f64>,
    topology: &LandmarkTopology,
    assignments: &[GroupCode],
) -> Result<Array2<f64>> {
    let k_total = atoms.ncols();
    if atoms.nrows() != topology.dim()
        || assignments.len() != k_total
        || samples.ncols() != topology.dim()
        || codes.ncols() != k_total
        || codes.nrows() != samples.nrows()
    {
        return Err(Error::input(format!(
            "dictionary update dimensions disagree: atoms {:?}, samples {:?}, codes {:?}, {} assignments",
            atoms.dim(),
            samples.dim(),
            codes.dim(),
            assignments.len()
        )));
    }
    // Sufficient statistics: A = Z^T Z (K x K), B = X^T Z (3L x K).
    let a = codes.t().dot(&codes);
    let b = samples.t().dot(&codes);
    let mut w = atoms.clone();
    let group_rows: BTreeMap<GroupCode, Vec<usize>> =
        GroupCode::ALL.iter().map(|&g| (g, topology.rows(g))).collect();
    for k in 0..k_total {
        let akk = a[[k, k]];
        if akk <= 0.0 {
            continue;
        }
        let rows = &group_rows[&assignments[k]];
        let mut update = Vec::with_capacity(rows.len());
        for &r in rows {
            let mut acc = b[[r, k]];
            for j in 0..k_total {
                if j != k {
                    acc -= w[[r, j]] * a[[j, k]];
                }
            }
            update.push(acc / akk);
        }
        let norm = update.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = if norm > 1.0 { 1.0 / norm } else { 1.0 };
        for (&r, &v) in rows.iter().zip(&update) {
            w[[r, k]] = v * scale;
        }
    }
    Ok(w)
}

/// Re-seeds atoms with an all-zero code column from the masked residual of
/// the worst-reconstructed sample within the atom's group. Returns how many
/// atoms were replaced. Unused atoms do not affect the objective, so this
/// leaves it unchanged at the current codes.
fn reinitialize_unused(
    atoms: &mut Array2<f64>,
    samples: ArrayView2<'_, f64>,
    codes: &Array2<f64>,
    topology: &LandmarkTopology,
    assignments: &[GroupCode],
) -> usize {
    let unused: Vec<usize> = (0..atoms.ncols())
        .filter(|&k| codes.column(k).iter().all(|&v| v == 0.0))
        .collect();
    if unused.is_empty() {
        return 0;
    }
    let residual = &samples - &codes.dot(&atoms.t());
    let dim = topology.dim();
    let mut taken: Vec<usize> = Vec::new();
    let mut replaced = 0;
    for k in unused {
        let rows = topology.rows(assignments[k]);
        let worst = (0..residual.nrows())
            .filter(|n| !taken.contains(n))
            .map(|n| {
                let e: f64 = rows.iter().map(|&r| residual[[n, r]] * residual[[n, r]]).sum();
                (n, e)
            })
            .fold(None, |best: Option<(usize, f64)>, (n, e)| match best {
                Some((_, be)) if be >= e => best,
                _ => Some((n, e)),
            });
        if let Some((n, e)) = worst {
            if e > 0.0 && normalize_into(atoms, k, &masked(residual.row(n), &rows, dim)) {
                taken.push(n);
                replaced += 1;
            }
        }
    }
    replaced
}

/// Learns a localized basis from `samples` (N x 3L).
pub fn learn(samples: ArrayView2<'_, f64>, topology: &LandmarkTopology, cfg: &LearnConfig) -> Result<LearnOutcome> {
    cfg.validate()?;
    let alloc = cfg.resolved_allocation(topology)?;
    let k_total = cfg.atom_count;
    if samples.ncols() != topology.dim() {
        return Err(Error::input(format!(
            "samples have {} columns, topology expects {}",
            samples.ncols(),
            topology.dim()
        )));
    }
    if samples.nrows() < k_total {
        return Err(Error::input(format!(
            "{} samples is fewer than the {k_total} requested atoms",
            samples.nrows()
        )));
    }
    if !samples.iter().all(|v| v.is_finite()) {
        return Err(Error::input("samples contain non-finite values"));
    }
    if samples.iter().all(|&v| v == 0.0) {
        return Err(Error::Degenerate("every sample is zero".into()));
    }

    let assignments: Vec<GroupCode> = alloc
        .iter()
        .flat_map(|&(g, n)| std::iter::repeat_n(g, n))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut atoms = initialize(samples, topology, &assignments, cfg.init, &mut rng);
    let coding = cfg.coding();

    let code = |atoms: &Array2<f64>, warm: Option<&Array2<f64>>, iteration: usize| -> Result<Array2<f64>> {
        let (codes, unconverged) = SparseCoder::from_atoms(atoms.view(), coding)?
            .encode_rows(samples, warm, false)
            .map_err(|e| match e {
                Error::Frame { source, .. } if matches!(*source, Error::Numerical { .. }) => Error::Numerical {
                    iteration,
                    detail: source.to_string(),
                },
                other => other,
            })?;
        if unconverged > 0 {
            log::warn!("iteration {iteration}: coding stopped at max_iterations for {unconverged} samples");
        }
        Ok(codes)
    };
    let record = |iteration: usize, atoms: &Array2<f64>, codes: &Array2<f64>, reinit: usize| -> Result<TrainingRecord> {
        let objective = objective_from_atoms(atoms.view(), samples, codes.view(), cfg.lambda)?;
        if !objective.is_finite() {
            return Err(Error::Numerical {
                iteration,
                detail: "objective is not finite".into(),
            });
        }
        Ok(TrainingRecord {
            iteration,
            objective,
            mean_sparsity: sparsity(codes),
            max_atom_norm: max_atom_norm(atoms),
            reinitialized_atoms: reinit,
        })
    };

    let mut codes = code(&atoms, None, 0)?;
    let mut records = vec![record(0, &atoms, &codes, 0)?];
    let mut stop_reason = StopReason::MaxIterations;
    for iteration in 1..=cfg.outer_iterations {
        atoms = update_dictionary_step(&atoms, samples, codes.view(), topology, &assignments)?;
        let reinit = reinitialize_unused(&mut atoms, samples, &codes, topology, &assignments);
        if !atoms.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical {
                iteration,
                detail: "dictionary update produced non-finite atoms".into(),
            });
        }
        codes = code(&atoms, Some(&codes), iteration)?;
        let rec = record(iteration, &atoms, &codes, reinit)?;
        let prev = records.last().unwrap().objective;
        let change = (prev - rec.objective).abs() / prev.abs().max(f64::MIN_POSITIVE);
        log::debug!(
            "iteration {iteration}: objective {:.6e}, sparsity {:.4}, reinit {reinit}",
            rec.objective,
            rec.mean_sparsity
        );
        records.push(rec);
        if change < cfg.convergence_tol && reinit == 0 {
            stop_reason = StopReason::Converged;
            break;
        }
    }
    log::info!(
        "learning stopped after {} iterations ({:?})",
        records.len() - 1,
        stop_reason
    );

    let dictionary = BasisDictionary::new(topology.clone(), atoms, assignments, cfg.lambda)?;
    Ok(LearnOutcome {
        dictionary,
        log: TrainingLog { records, stop_reason },
        codes,
    })
}

/// Sets the activation rank: atoms by descending mean |z| pooled over every
/// frame of every series, ties by ascending atom index.
pub fn rank_by_activation(dict: &BasisDictionary, series: &[CoefficientSeries]) -> Result<BasisDictionary> {
    if series.is_empty() {
        return Err(Error::input("ranking needs at least one coefficient series"));
    }
    let k = dict.atom_count();
    let mut sums = vec![0.0f64; k];
    let mut frames = 0usize;
    for (i, s) in series.iter().enumerate() {
        if s.bu_coefficients().ncols() != k {
            return Err(Error::input(format!(
                "series {i} has {} BU channels, dictionary has {k} atoms",
                s.bu_coefficients().ncols()
            )));
        }
        for row in s.bu_coefficients().rows() {
            for (acc, v) in sums.iter_mut().zip(row.iter()) {
                *acc += v.abs();
            }
        }
        frames += s.frame_count();
    }
    let means: Vec<f64> = sums.iter().map(|s| s / frames as f64).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| means[b].total_cmp(&means[a]).then(a.cmp(&b)));
    dict.clone().with_activation_rank(order)
}

/// Mean |z| per atom, the statistic `rank_by_activation` sorts by.
pub fn mean_abs_activation(series: &[CoefficientSeries]) -> Vec<f64> {
    let k = series.first().map_or(0, |s| s.bu_coefficients().ncols());
    let frames: usize = series.iter().map(|s| s.frame_count()).sum();
    let mut sums = vec![0.0; k];
    for s in series {
        for row in s.bu_coefficients().rows() {
            for (acc, v) in sums.iter_mut().zip(row.iter()) {
                *acc += v.abs();
            }
        }
    }
    sums.into_iter().map(|s| s / frames.max(1) as f64).collect()
}

pub fn assign_names(dict: &BasisDictionary) -> BasisDictionary {
    dict.clone()
        .with_names(bu_names(dict.atom_groups()))
        .expect("one name per atom")
}
