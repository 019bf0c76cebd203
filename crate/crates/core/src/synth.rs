//! Seeded synthetic data with known ground truth: planted localized
//! dictionaries and their corpora, dictionary matching, and labeled behavioral
//! series with an embedded lagged coupling.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::assignment::max_weight_assignment;
use crate::error::{Error, Result};
use crate::model::{BasisDictionary, CoefficientSeries, GroupCode, LandmarkTopology};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignPolicy {
    Positive,
    Symmetric,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientDistribution {
    pub min_magnitude: f64,
    pub max_magnitude: f64,
    pub sign: SignPolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub topology: LandmarkTopology,
    pub per_group_allocation: BTreeMap<GroupCode, usize>,
    pub samples: usize,
    pub active_atoms_per_sample: usize,
    pub coefficients: CoefficientDistribution,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Largest allowed |cos| between planted atoms of one group.
    pub max_coherence: f64,
    pub max_attempts: usize,
}

impl SynthSpec {
    /// iBUG-51, twelve atoms (two per group), three active per sample,
    /// magnitudes in [0.5, 1.5] with random sign, noise 0.01, 2000 samples.
    pub fn planted_benchmark(seed: u64) -> Self {
        SynthSpec {
            topology: LandmarkTopology::ibug51(),
            per_group_allocation: GroupCode::ALL.iter().map(|&g| (g, 2)).collect(),
            samples: 2000,
            active_atoms_per_sample: 3,
            coefficients: CoefficientDistribution {
                min_magnitude: 0.5,
                max_magnitude: 1.5,
                sign: SignPolicy::Symmetric,
            },
            noise_sigma: 0.01,
            seed,
            max_coherence: 0.6,
            max_attempts: 10_000,
        }
    }

    pub fn planted_atom_count(&self) -> usize {
        self.per_group_allocation.values().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.planted_atom_count();
        if k == 0 {
            return Err(Error::config("at least one planted atom is required"));
        }
        if self.active_atoms_per_sample == 0 || self.active_atoms_per_sample > k {
            return Err(Error::config(format!(
                "active atoms per sample must be in [1, {k}], got {}",
                self.active_atoms_per_sample
            )));
        }
        let c = &self.coefficients;
        if !(c.min_magnitude > 0.0 && c.max_magnitude >= c.min_magnitude && c.max_magnitude.is_finite()) {
            return Err(Error::config("coefficient magnitudes must satisfy 0 < min <= max"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise sigma must be non-negative"));
        }
        if !(self.max_coherence > 0.0 && self.max_coherence <= 1.0) {
            return Err(Error::config("max coherence must be in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PlantedCorpus {
    /// N x 3L.
    pub samples: Array2<f64>,
    pub truth: BasisDictionary,
    /// N x K.
    pub codes: Array2<f64>,
}

fn abs_cos(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (a.dot(&b) / (na * nb)).abs()
    }
}

pub fn generate_planted_corpus(spec: &SynthSpec) -> Result<PlantedCorpus> {
    spec.validate()?;
    let topology = &spec.topology;
    let dim = topology.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut groups = Vec::new();
    let mut atoms: Vec<Array1<f64>> = Vec::new();
    for &g in &GroupCode::ALL {
        let count = spec.per_group_allocation.get(&g).copied().unwrap_or(0);
        let rows = topology.rows(g);
        let first = atoms.len();
        for _ in 0..count {
            let mut attempts = 0;
            let atom = loop {
                if attempts == spec.max_attempts {
                    return Err(Error::input(format!(
                        "could not place {count} atoms in group {g} ({} rows) with |cos| <= {} after {} attempts",
                        rows.len(),
                        spec.max_coherence,
                        spec.max_attempts
                    )));
                }
                attempts += 1;
                let mut v = Array1::zeros(dim);
                for &r in &rows {
                    v[r] = rng.sample::<f64, _>(StandardNormal);
                }
                let norm = v.dot(&v).sqrt();
                if norm == 0.0 {
                    continue;
                }
                v /= norm;
                if atoms[first..].iter().all(|a| abs_cos(a.view(), v.view()) <= spec.max_coherence) {
                    break v;
                }
            };
            atoms.push(atom);
            groups.push(g);
        }
    }
    let k = atoms.len();
    let mut w = Array2::zeros((dim, k));
    for (c, a) in atoms.iter().enumerate() {
        w.column_mut(c).assign(a);
    }
    let truth = BasisDictionary::new(topology.clone(), w, groups, 0.2)?;

    let mut codes = Array2::zeros((spec.samples, k));
    let mut samples = Array2::zeros((spec.samples, dim));
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::config(e.to_string()))?;
    let dist = spec.coefficients;
    for n in 0..spec.samples {
        let mut active = index::sample(&mut rng, k, spec.active_atoms_per_sample).into_vec();
        active.sort_unstable();
        let mut row = Array1::<f64>::zeros(dim);
        for a in active {
            let mag = if dist.max_magnitude > dist.min_magnitude {
                rng.gen_range(dist.min_magnitude..=dist.max_magnitude)
            } else {
                dist.min_magnitude
            };
            let coef = match dist.sign {
                SignPolicy::Positive => mag,
                SignPolicy::Symmetric if rng.gen::<bool>() => -mag,
                SignPolicy::Symmetric => mag,
            };
            codes[[n, a]] = coef;
            row.scaled_add(coef, &truth.atom(a));
        }
        if spec.noise_sigma > 0.0 {
            for v in row.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }
        samples.row_mut(n).assign(&row);
    }
    Ok(PlantedCorpus { samples, truth, codes })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AtomMatch {
    pub group: GroupCode,
    pub truth_atom: usize,
    pub learned_atom: usize,
    pub abs_cos: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupCountMismatch {
    pub group: GroupCode,
    pub truth_atoms: usize,
    pub learned_atoms: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatchReport {
    pub matches: Vec<AtomMatch>,
    /// Learned atom matched to each truth atom, if any.
    pub permutation: Vec<Option<usize>>,
    pub min_abs_cos: f64,
    pub mean_abs_cos: f64,
    pub count_mismatches: Vec<GroupCountMismatch>,
}

/// Group-wise maximum-total-|cos| matching of learned atoms to truth atoms.
pub fn match_dictionaries(learned: &BasisDictionary, truth: &BasisDictionary) -> Result<MatchReport> {
    if learned.topology() != truth.topology() {
        return Err(Error::input("dictionaries use different landmark topologies"));
    }
    let mut matches = Vec::new();
    let mut mismatches = Vec::new();
    let mut permutation = vec![None; truth.atom_count()];
    for &g in &GroupCode::ALL {
        let t_idx: Vec<usize> = (0..truth.atom_count()).filter(|&k| truth.atom_groups()[k] == g).collect();
        let l_idx: Vec<usize> = (0..learned.atom_count()).filter(|&k| learned.atom_groups()[k] == g).collect();
        if t_idx.len() != l_idx.len() {
            mismatches.push(GroupCountMismatch {
                group: g,
                truth_atoms: t_idx.len(),
                learned_atoms: l_idx.len(),
            });
        }
        let sims: Vec<Vec<f64>> = t_idx
            .iter()
            .map(|&t| l_idx.iter().map(|&l| abs_cos(truth.atom(t), learned.atom(l))).collect())
            .collect();
        for (r, c) in max_weight_assignment(&sims) {
            permutation[t_idx[r]] = Some(l_idx[c]);
            matches.push(AtomMatch {
                group: g,
                truth_atom: t_idx[r],
                learned_atom: l_idx[c],
                abs_cos: sims[r][c],
            });
        }
    }
    let min = matches.iter().map(|m| m.abs_cos).fold(f64::INFINITY, f64::min);
    let mean = if matches.is_empty() {
        0.0
    } else {
        matches.iter().map(|m| m.abs_cos).sum::<f64>() / matches.len() as f64
    };
    Ok(MatchReport {
        matches,
        permutation,
        min_abs_cos: if min.is_finite() { min } else { 0.0 },
        mean_abs_cos: mean,
        count_mismatches: mismatches,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabeledSeriesSpec {
    pub videos_per_class: usize,
    pub frames: usize,
    pub frame_rate: f64,
    pub bu_channels: usize,
    /// `(leader, follower)` channel indices coupled in class A.
    pub coupled_pair: (usize, usize),
    pub lag_frames: usize,
    /// Weight of the delayed leader in the class-A follower.
    pub coupling: f64,
    /// Weight of the follower's own independent signal in class A.
    pub noise_sigma: f64,
    /// AR(1) coefficient of every independent signal.
    pub smoothness: f64,
    pub include_pose: bool,
    pub seed: u64,
}

impl Default for LabeledSeriesSpec {
    fn default() -> Self {
        LabeledSeriesSpec {
            videos_per_class: 30,
            frames: 300,
            frame_rate: 30.0,
            bu_channels: 4,
            coupled_pair: (0, 1),
            lag_frames: 3,
            coupling: 1.0,
            noise_sigma: 0.3,
            smoothness: 0.8,
            include_pose: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSeries {
    pub video_id: String,
    pub label: String,
    pub series: CoefficientSeries,
}

pub const CLASS_A: &str = "A";
pub const CLASS_B: &str = "B";

fn ar_signal(rng: &mut ChaCha8Rng, len: usize, phi: f64) -> Vec<f64> {
    let innovation = (1.0 - phi * phi).max(1e-12).sqrt();
    let mut x = Vec::with_capacity(len);
    let mut prev: f64 = rng.sample(StandardNormal);
    for _ in 0..len {
        let e: f64 = rng.sample(StandardNormal);
        prev = phi * prev + innovation * e;
        x.push(prev);
    }
    x
}

/// Class A videos: the follower channel is the leader delayed by
/// `lag_frames` (times `coupling`) plus `noise_sigma` times an independent
/// signal. Class B videos: all channels independent.
pub fn generate_labeled_series(spec: &LabeledSeriesSpec) -> Result<Vec<LabeledSeries>> {
    let (lead, follow) = spec.coupled_pair;
    if spec.videos_per_class == 0 || spec.frames == 0 || spec.bu_channels == 0 {
        return Err(Error::config("video, frame and channel counts must be positive"));
    }
    if lead >= spec.bu_channels || follow >= spec.bu_channels || lead == follow {
        return Err(Error::config("coupled pair must name two distinct BU channels"));
    }
    if !(spec.frame_rate > 0.0 && spec.frame_rate.is_finite()) {
        return Err(Error::config("frame rate must be positive"));
    }
    let mut out = Vec::with_capacity(2 * spec.videos_per_class);
    for (class_idx, class) in [CLASS_A, CLASS_B].into_iter().enumerate() {
        for v in 0..spec.videos_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream((class_idx * spec.videos_per_class + v) as u64);
            let t = spec.frames;
            let mut bu = Array2::zeros((t, spec.bu_channels));
            let leader = ar_signal(&mut rng, t + spec.lag_frames, spec.smoothness);
            for c in 0..spec.bu_channels {
                let own = ar_signal(&mut rng, t, spec.smoothness);
                for f in 0..t {
                    bu[[f, c]] = if c == lead {
                        leader[f + spec.lag_frames]
                    } else if c == follow && class == CLASS_A {
                        spec.coupling * leader[f] + spec.noise_sigma * own[f]
                    } else {
                        own[f]
                    };
                }
            }
            let pose = if spec.include_pose {
                let mut p = Array2::zeros((t, 3));
                for c in 0..3 {
                    for (f, val) in ar_signal(&mut rng, t, spec.smoothness).into_iter().enumerate() {
                        p[[f, c]] = 0.1 * val;
                    }
                }
                Some(p)
            } else {
                None
            };
            out.push(LabeledSeries {
                video_id: format!("{class}-{v:03}"),
                label: class.to_string(),
                series: CoefficientSeries::new(spec.frame_rate, bu, pose)?,
            });
        }
    }
    Ok(out)
}
