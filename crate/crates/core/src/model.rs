//! Domain types shared by every pipeline stage: the landmark topology and its
//! facial-feature partition, the landmark-restricted expression model, learned
//! basis dictionaries and per-video coefficient series.
//!
//! Deformation vectors are landmark-major: entry `3 * j + c` holds coordinate
//! `c` (0 = x, 1 = y, 2 = z) of landmark `j`.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Names of the three head-rotation channels, in storage order.
pub const POSE_CHANNELS: [&str; 3] = ["pitch", "yaw", "roll"];

/// Slack allowed on the unit-norm atom constraint.
pub const NORM_TOLERANCE: f64 = 1e-9;

/// Facial feature a landmark (and hence an atom) belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GroupCode {
    LB,
    RB,
    LE,
    RE,
    NO,
    MO,
}

impl GroupCode {
    pub const ALL: [GroupCode; 6] = [
        GroupCode::LB,
        GroupCode::RB,
        GroupCode::LE,
        GroupCode::RE,
        GroupCode::NO,
        GroupCode::MO,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GroupCode::LB => "LB",
            GroupCode::RB => "RB",
            GroupCode::LE => "LE",
            GroupCode::RE => "RE",
            GroupCode::NO => "NO",
            GroupCode::MO => "MO",
        }
    }
}

impl fmt::Display for GroupCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GroupCode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GroupCode::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::input(format!("unknown group code {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LandmarkGroup {
    pub code: GroupCode,
    pub landmarks: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct TopologyRepr {
    landmark_count: usize,
    groups: Vec<LandmarkGroup>,
}

/// `L` landmarks partitioned into the six facial-feature groups.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TopologyRepr", into = "TopologyRepr")]
pub struct LandmarkTopology {
    landmark_count: usize,
    groups: Vec<LandmarkGroup>,
    landmark_group: Vec<GroupCode>,
}

impl TryFrom<TopologyRepr> for LandmarkTopology {
    type Error = Error;

    fn try_from(repr: TopologyRepr) -> Result<Self> {
        LandmarkTopology::new(repr.landmark_count, repr.groups)
    }
}

impl From<LandmarkTopology> for TopologyRepr {
    fn from(t: LandmarkTopology) -> Self {
        TopologyRepr {
            landmark_count: t.landmark_count,
            groups: t.groups,
        }
    }
}

impl LandmarkTopology {
    pub fn new(landmark_count: usize, groups: Vec<LandmarkGroup>) -> Result<Self> {
        if landmark_count == 0 {
            return Err(Error::input("topology must have at least one landmark"));
        }
        let codes: BTreeSet<GroupCode> = groups.iter().map(|g| g.code).collect();
        if groups.len() != GroupCode::ALL.len() || codes.len() != GroupCode::ALL.len() {
            return Err(Error::input(
                "topology must list each of LB, RB, LE, RE, NO, MO exactly once",
            ));
        }
        let mut owner: Vec<Option<GroupCode>> = vec![None; landmark_count];
        for group in &groups {
            if group.landmarks.is_empty() {
                return Err(Error::input(format!("group {} has no landmarks", group.code)));
            }
            for &j in &group.landmarks {
                let slot = owner.get_mut(j).ok_or_else(|| {
                    Error::input(format!(
                        "group {} references landmark {j} outside [0, {landmark_count})",
                        group.code
                    ))
                })?;
                if let Some(prev) = slot {
                    return Err(Error::input(format!(
                        "landmark {j} assigned to both {prev} and {}",
                        group.code
                    )));
                }
                *slot = Some(group.code);
            }
        }
        let landmark_group = owner
            .into_iter()
            .enumerate()
            .map(|(j, g)| g.ok_or_else(|| Error::input(format!("landmark {j} is in no group"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(LandmarkTopology {
            landmark_count,
            groups,
            landmark_group,
        })
    }

    /// The 51-landmark iBUG template (68-point scheme without the jaw line):
    /// brows 0-9, nose 10-18, eyes 19-30, mouth 31-50.
    pub fn ibug51() -> Self {
        let span = |a: usize, b: usize| (a..b).collect::<Vec<_>>();
        let groups = vec![
            LandmarkGroup { code: GroupCode::LB, landmarks: span(5, 10) },
            LandmarkGroup { code: GroupCode::RB, landmarks: span(0, 5) },
            LandmarkGroup { code: GroupCode::LE, landmarks: span(25, 31) },
            LandmarkGroup { code: GroupCode::RE, landmarks: span(19, 25) },
            LandmarkGroup { code: GroupCode::NO, landmarks: span(10, 19) },
            LandmarkGroup { code: GroupCode::MO, landmarks: span(31, 51) },
        ];
        LandmarkTopology::new(51, groups).expect("built-in topology is valid")
    }

    pub fn landmark_count(&self) -> usize {
        self.landmark_count
    }

    /// Length of a deformation vector, `3L`.
    pub fn dim(&self) -> usize {
        3 * self.landmark_count
    }

    pub fn groups(&self) -> &[LandmarkGroup] {
        &self.groups
    }

    pub fn landmarks(&self, code: GroupCode) -> &[usize] {
        self.groups
            .iter()
            .find(|g| g.code == code)
            .map(|g| g.landmarks.as_slice())
            .expect("every topology contains all six groups")
    }

    pub fn group_of_landmark(&self, landmark: usize) -> GroupCode {
        self.landmark_group[landmark]
    }

    pub fn group_of_row(&self, row: usize) -> GroupCode {
        self.landmark_group[row / 3]
    }

    /// Rows of a deformation vector owned by `code`, ascending.
    pub fn rows(&self, code: GroupCode) -> Vec<usize> {
        let mut rows: Vec<usize> = self
            .landmarks(code)
            .iter()
            .flat_map(|&j| [3 * j, 3 * j + 1, 3 * j + 2])
            .collect();
        rows.sort_unstable();
        rows
    }

    pub fn mask(&self, code: GroupCode) -> Vec<bool> {
        (0..self.dim()).map(|r| self.group_of_row(r) == code).collect()
    }
}

/// Landmark restriction of a 3DMM expression model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpressionModel {
    mean_landmarks: Array2<f64>,
    basis: Array2<f64>,
}

impl ExpressionModel {
    /// `mean_landmarks` is `L x 3`, `basis` is `3L x M`.
    pub fn new(mean_landmarks: Array2<f64>, basis: Array2<f64>) -> Result<Self> {
        let l = mean_landmarks.nrows();
        if l == 0 || mean_landmarks.ncols() != 3 {
            return Err(Error::input(format!(
                "mean landmarks must be L x 3 with L > 0, got {:?}",
                mean_landmarks.dim()
            )));
        }
        if basis.nrows() != 3 * l || basis.ncols() == 0 {
            return Err(Error::input(format!(
                "expression basis must be {} x M with M >= 1, got {:?}",
                3 * l,
                basis.dim()
            )));
        }
        if !mean_landmarks.iter().chain(basis.iter()).all(|v| v.is_finite()) {
            return Err(Error::input("expression model contains non-finite entries"));
        }
        Ok(ExpressionModel {
            mean_landmarks,
            basis,
        })
    }

    pub fn landmark_count(&self) -> usize {
        self.mean_landmarks.nrows()
    }

    pub fn component_count(&self) -> usize {
        self.basis.ncols()
    }

    pub fn mean_landmarks(&self) -> &Array2<f64> {
        &self.mean_landmarks
    }

    pub fn basis(&self) -> &Array2<f64> {
        &self.basis
    }
}

/// Per-landmark displacement from the neutral face, landmark-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationSample(Array1<f64>);

impl DeformationSample {
    pub fn new(values: Array1<f64>, landmark_count: usize) -> Result<Self> {
        if values.len() != 3 * landmark_count {
            return Err(Error::input(format!(
                "deformation has length {}, expected {}",
                values.len(),
                3 * landmark_count
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::input("deformation contains non-finite entries"));
        }
        Ok(DeformationSample(values))
    }

    pub fn values(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array1<f64> {
        self.0
    }

    pub fn landmark(&self, j: usize) -> [f64; 3] {
        [self.0[3 * j], self.0[3 * j + 1], self.0[3 * j + 2]]
    }
}

/// Names atoms `<group>-<ordinal>` where the ordinal counts atoms of the same
/// group in storage order, starting at 1.
pub fn bu_names(groups: &[GroupCode]) -> Vec<String> {
    let mut seen = [0usize; 6];
    groups
        .iter()
        .map(|&g| {
            let slot = GroupCode::ALL.iter().position(|&c| c == g).unwrap();
            seen[slot] += 1;
            format!("{}-{}", g, seen[slot])
        })
        .collect()
}

/// A learned localized basis: `3L x K` atoms, each confined to the rows of
/// one facial-feature group.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisDictionary {
    atoms: Array2<f64>,
    atom_groups: Vec<GroupCode>,
    atom_names: Vec<String>,
    activation_rank: Option<Vec<usize>>,
    lambda_used: f64,
    topology: LandmarkTopology,
}

impl BasisDictionary {
    /// Builds a dictionary with default names. Only shapes are checked here;
    /// use [`validate_dictionary`] for the content invariants.
    pub fn new(
        topology: LandmarkTopology,
        atoms: Array2<f64>,
        atom_groups: Vec<GroupCode>,
        lambda_used: f64,
    ) -> Result<Self> {
        let names = bu_names(&atom_groups);
        Self::from_parts(topology, atoms, atom_groups, names, None, lambda_used)
    }

    pub fn from_parts(
        topology: LandmarkTopology,
        atoms: Array2<f64>,
        atom_groups: Vec<GroupCode>,
        atom_names: Vec<String>,
        activation_rank: Option<Vec<usize>>,
        lambda_used: f64,
    ) -> Result<Self> {
        let k = atom_groups.len();
        if k == 0 {
            return Err(Error::input("dictionary must have at least one atom"));
        }
        if atoms.dim() != (topology.dim(), k) {
            return Err(Error::input(format!(
                "atom matrix is {:?}, expected ({}, {k})",
                atoms.dim(),
                topology.dim()
            )));
        }
        if atom_names.len() != k {
            return Err(Error::input(format!("{} atom names for {k} atoms", atom_names.len())));
        }
        if !(lambda_used > 0.0 && lambda_used.is_finite()) {
            return Err(Error::input(format!("lambda must be positive, got {lambda_used}")));
        }
        if let Some(rank) = &activation_rank {
            check_permutation(rank, k)?;
        }
        Ok(BasisDictionary {
            atoms,
            atom_groups,
            atom_names,
            activation_rank,
            lambda_used,
            topology,
        })
    }

    pub fn atoms(&self) -> &Array2<f64> {
        &self.atoms
    }

    pub fn atom(&self, k: usize) -> ArrayView1<'_, f64> {
        self.atoms.column(k)
    }

    pub fn atom_count(&self) -> usize {
        self.atom_groups.len()
    }

    pub fn atom_groups(&self) -> &[GroupCode] {
        &self.atom_groups
    }

    pub fn atom_names(&self) -> &[String] {
        &self.atom_names
    }

    pub fn activation_rank(&self) -> Option<&[usize]> {
        self.activation_rank.as_deref()
    }

    pub fn lambda_used(&self) -> f64 {
        self.lambda_used
    }

    pub fn topology(&self) -> &LandmarkTopology {
        &self.topology
    }

    /// Number of atoms allocated to each group, in `GroupCode::ALL` order.
    pub fn allocation(&self) -> Vec<(GroupCode, usize)> {
        GroupCode::ALL
            .iter()
            .map(|&g| (g, self.atom_groups.iter().filter(|&&a| a == g).count()))
            .collect()
    }

    pub fn with_activation_rank(mut self, rank: Vec<usize>) -> Result<Self> {
        check_permutation(&rank, self.atom_count())?;
        self.activation_rank = Some(rank);
        Ok(self)
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.atom_count() {
            return Err(Error::input("name count does not match atom count"));
        }
        self.atom_names = names;
        Ok(self)
    }
}

fn check_permutation(rank: &[usize], k: usize) -> Result<()> {
    let mut seen = vec![false; k];
    if rank.len() != k {
        return Err(Error::input(format!("activation rank has length {}, expected {k}", rank.len())));
    }
    for &r in rank {
        if r >= k || std::mem::replace(&mut seen[r], true) {
            return Err(Error::input("activation rank is not a permutation of the atoms"));
        }
    }
    Ok(())
}

/// Per-frame BU activations plus optional head rotation (pitch, yaw, roll in
/// radians) for one video.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientSeries {
    frame_rate: f64,
    bu_coefficients: Array2<f64>,
    head_rotation: Option<Array2<f64>>,
    bu_names: Vec<String>,
}

impl CoefficientSeries {
    pub fn new(
        frame_rate: f64,
        bu_coefficients: Array2<f64>,
        head_rotation: Option<Array2<f64>>,
    ) -> Result<Self> {
        let names = (1..=bu_coefficients.ncols()).map(|k| format!("BU-{k}")).collect();
        Self::with_names(frame_rate, bu_coefficients, head_rotation, names)
    }

    pub fn with_names(
        frame_rate: f64,
        bu_coefficients: Array2<f64>,
        head_rotation: Option<Array2<f64>>,
        bu_names: Vec<String>,
    ) -> Result<Self> {
        if !(frame_rate > 0.0 && frame_rate.is_finite()) {
            return Err(Error::input(format!("frame rate must be positive, got {frame_rate}")));
        }
        let t = bu_coefficients.nrows();
        if t == 0 {
            return Err(Error::input("coefficient series must have at least one frame"));
        }
        if bu_names.len() != bu_coefficients.ncols() {
            return Err(Error::input("BU name count does not match coefficient columns"));
        }
        if let Some(pose) = &head_rotation {
            if pose.dim() != (t, 3) {
                return Err(Error::input(format!(
                    "head rotation must be {t} x 3, got {:?}",
                    pose.dim()
                )));
            }
        }
        let finite = bu_coefficients
            .iter()
            .chain(head_rotation.iter().flat_map(|p| p.iter()))
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::input("coefficient series contains non-finite entries"));
        }
        Ok(CoefficientSeries {
            frame_rate,
            bu_coefficients,
            head_rotation,
            bu_names,
        })
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn frame_count(&self) -> usize {
        self.bu_coefficients.nrows()
    }

    pub fn bu_coefficients(&self) -> &Array2<f64> {
        &self.bu_coefficients
    }

    pub fn head_rotation(&self) -> Option<&Array2<f64>> {
        self.head_rotation.as_ref()
    }

    pub fn bu_names(&self) -> &[String] {
        &self.bu_names
    }

    /// `Q = K + 3` with pose, `K` without.
    pub fn channel_count(&self) -> usize {
        self.bu_coefficients.ncols() + if self.head_rotation.is_some() { 3 } else { 0 }
    }

    pub fn channel_names(&self) -> Vec<String> {
        let mut names = self.bu_names.clone();
        if self.head_rotation.is_some() {
            names.extend(POSE_CHANNELS.iter().map(|s| s.to_string()));
        }
        names
    }

    /// All channels as a `T x Q` matrix: BU columns, then pitch, yaw, roll.
    pub fn channels(&self) -> Array2<f64> {
        match &self.head_rotation {
            Some(pose) => ndarray::concatenate(
                Axis(1),
                &[self.bu_coefficients.view(), pose.view()],
            )
            .expect("row counts checked at construction"),
            None => self.bu_coefficients.clone(),
        }
    }
}

/// `E * epsilon` restricted to the landmarks.
pub fn synthesize_deformation(model: &ExpressionModel, epsilon: &[f64]) -> Result<DeformationSample> {
    if epsilon.len() != model.component_count() {
        return Err(Error::input(format!(
            "expression coefficient vector has length {}, model has {} components",
            epsilon.len(),
            model.component_count()
        )));
    }
    if !epsilon.iter().all(|v| v.is_finite()) {
        return Err(Error::input("expression coefficients contain non-finite entries"));
    }
    let eps = ArrayView1::from(epsilon);
    DeformationSample::new(model.basis.dot(&eps), model.landmark_count())
}

/// `W * z`. Accumulates atom by atom onto `+0.0`, so rows no active atom
/// touches stay bit-exact zero.
pub fn synthesize_from_dictionary(dict: &BasisDictionary, z: &[f64]) -> Result<DeformationSample> {
    if z.len() != dict.atom_count() {
        return Err(Error::input(format!(
            "code vector has length {}, dictionary has {} atoms",
            z.len(),
            dict.atom_count()
        )));
    }
    if !z.iter().all(|v| v.is_finite()) {
        return Err(Error::input("code vector contains non-finite entries"));
    }
    let mut out = Array1::<f64>::zeros(dict.topology.dim());
    for (k, &zk) in z.iter().enumerate() {
        if zk != 0.0 {
            out.scaled_add(zk, &dict.atoms.column(k));
        }
    }
    DeformationSample::new(out, dict.topology.landmark_count())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    Locality { atom: usize, row: usize, value: f64 },
    Norm { atom: usize, norm: f64 },
    Name { atom: usize, expected: String, found: String },
    NonFinite { atom: usize, row: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Locality { atom, row, value } => {
                write!(f, "atom {atom}: nonzero entry {value:e} at row {row} outside its group")
            }
            Violation::Norm { atom, norm } => write!(f, "atom {atom}: l2 norm {norm} exceeds 1"),
            Violation::Name { atom, expected, found } => {
                write!(f, "atom {atom}: name {found:?}, expected {expected:?}")
            }
            Violation::NonFinite { atom, row } => write!(f, "atom {atom}: non-finite entry at row {row}"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Lists every broken dictionary invariant; never fails.
pub fn validate_dictionary(dict: &BasisDictionary) -> ValidationReport {
    let mut violations = Vec::new();
    let expected_names = bu_names(&dict.atom_groups);
    for (k, &group) in dict.atom_groups.iter().enumerate() {
        let atom = dict.atoms.column(k);
        for (row, &v) in atom.iter().enumerate() {
            if !v.is_finite() {
                violations.push(Violation::NonFinite { atom: k, row });
            } else if v.to_bits() != 0 && dict.topology.group_of_row(row) != group {
                violations.push(Violation::Locality { atom: k, row, value: v });
            }
        }
        let norm = atom.dot(&atom).sqrt();
        if norm > 1.0 + NORM_TOLERANCE && norm.is_finite() {
            violations.push(Violation::Norm { atom: k, norm });
        }
        if dict.atom_names[k] != expected_names[k] {
            violations.push(Violation::Name {
                atom: k,
                expected: expected_names[k].clone(),
                found: dict.atom_names[k].clone(),
            });
        }
    }
    ValidationReport { violations }
}
