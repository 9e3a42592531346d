//! Synchromaterials: per-unit and network-wide material masses computed from
//! synchronized detection reports and a per-class bill of materials.
//!
//! All masses are integer milligrams, so the additive identities between
//! per-unit, per-material and network totals hold exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tmn::{CompartmentId, StockState, TmnNetwork};

/// Object class index `q`, as emitted by the detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

/// Material index `psi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MaterialId(pub u32);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for MaterialId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Multiset of detected classes: class -> number of instances.
pub type Counts = BTreeMap<ClassId, u32>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RegistryError {
    #[error("ids must be positive")]
    ZeroId,
    #[error("duplicate material id {0}")]
    DuplicateMaterial(MaterialId),
    #[error("duplicate class id {0}")]
    DuplicateClass(ClassId),
    #[error("class {class} lists unknown material {material}")]
    UnknownMaterial { class: ClassId, material: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistrySpec {
    pub materials: Vec<MaterialSpec>,
    pub classes: Vec<ClassSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialSpec {
    pub id: u32,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub id: u32,
    pub name: String,
    /// material id (as a string key) -> milligrams per instance
    pub composition: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassEntry {
    pub name: String,
    pub composition: BTreeMap<MaterialId, u64>,
}

impl ClassEntry {
    /// Mass of one instance: the sum of its constituent material masses.
    pub fn total_mass(&self) -> u64 {
        self.composition.values().sum()
    }
}

/// Per-class constituent-material masses `f^psi_q`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompositionRegistry {
    materials: BTreeMap<MaterialId, String>,
    classes: BTreeMap<ClassId, ClassEntry>,
}

impl CompositionRegistry {
    pub fn from_spec(spec: &RegistrySpec) -> Result<Self, RegistryError> {
        let mut materials = BTreeMap::new();
        for m in &spec.materials {
            if m.id == 0 {
                return Err(RegistryError::ZeroId);
            }
            if materials.insert(MaterialId(m.id), m.name.clone()).is_some() {
                return Err(RegistryError::DuplicateMaterial(MaterialId(m.id)));
            }
        }
        let mut classes = BTreeMap::new();
        for c in &spec.classes {
            if c.id == 0 {
                return Err(RegistryError::ZeroId);
            }
            let mut composition = BTreeMap::new();
            for (key, &mg) in &c.composition {
                let material = key
                    .parse::<u32>()
                    .ok()
                    .map(MaterialId)
                    .filter(|m| materials.contains_key(m))
                    .ok_or_else(|| RegistryError::UnknownMaterial {
                        class: ClassId(c.id),
                        material: key.clone(),
                    })?;
                composition.insert(material, mg);
            }
            let entry = ClassEntry {
                name: c.name.clone(),
                composition,
            };
            if classes.insert(ClassId(c.id), entry).is_some() {
                return Err(RegistryError::DuplicateClass(ClassId(c.id)));
            }
        }
        Ok(CompositionRegistry { materials, classes })
    }

    pub fn from_json(text: &str) -> Result<Self, crate::Error> {
        let spec: RegistrySpec = serde_json::from_str(text)?;
        Ok(Self::from_spec(&spec)?)
    }

    pub fn to_spec(&self) -> RegistrySpec {
        RegistrySpec {
            materials: self
                .materials
                .iter()
                .map(|(id, name)| MaterialSpec {
                    id: id.0,
                    name: name.clone(),
                })
                .collect(),
            classes: self
                .classes
                .iter()
                .map(|(id, c)| ClassSpec {
                    id: id.0,
                    name: c.name.clone(),
                    composition: c.composition.iter().map(|(m, &mg)| (m.0.to_string(), mg)).collect(),
                })
                .collect(),
        }
    }

    /// SHA-256 over the canonical (sorted-key, compact) JSON form. Two files
    /// that differ only in whitespace or ordering hash the same.
    pub fn content_hash(&self) -> String {
        let value = serde_json::to_value(self.to_spec()).expect("registry serializes");
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }

    pub fn materials(&self) -> &BTreeMap<MaterialId, String> {
        &self.materials
    }

    pub fn classes(&self) -> &BTreeMap<ClassId, ClassEntry> {
        &self.classes
    }

    pub fn class(&self, q: ClassId) -> Option<&ClassEntry> {
        self.classes.get(&q)
    }

    pub fn material_by_name(&self, name: &str) -> Option<MaterialId> {
        self.materials
            .iter()
            .find(|(_, n)| n.as_str() == name)
            .map(|(&id, _)| id)
    }

    /// Mass of material `psi` in one instance of class `q`; zero when absent.
    pub fn fraction(&self, q: ClassId, psi: MaterialId) -> Option<u64> {
        self.classes
            .get(&q)
            .map(|c| c.composition.get(&psi).copied().unwrap_or(0))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SynchroError {
    #[error("UnknownClass: class {class} reported by unit {unit} is not in the registry")]
    UnknownClass { unit: CompartmentId, class: ClassId },
    #[error("DuplicateUnitReport: unit {0} reported twice for one epoch")]
    DuplicateUnitReport(CompartmentId),
    #[error("UnitNotInNetwork: {0} carries no measurement unit in this network")]
    UnitNotInNetwork(CompartmentId),
    #[error("EpochMismatch: ground truth at epoch {truth}, snapshot at epoch {snapshot}")]
    EpochMismatch { truth: u64, snapshot: u64 },
}

/// One unit's detections at one epoch: the multiset `C_k(n)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectionReport {
    pub unit: CompartmentId,
    pub epoch: u64,
    pub counts: Counts,
    pub timestamp_ms: u64,
}

impl DetectionReport {
    pub fn new(unit: CompartmentId, epoch: u64, counts: Counts) -> Self {
        DetectionReport {
            unit,
            epoch,
            counts,
            timestamp_ms: 0,
        }
    }

    /// `Q_k(n)`, counting multiplicity.
    pub fn cardinality(&self) -> u64 {
        self.counts.values().map(|&c| c as u64).sum()
    }

    /// `M_k(n)`: union of the constituent materials of the detected classes.
    pub fn materials(&self, reg: &CompositionRegistry) -> Result<BTreeSet<MaterialId>, SynchroError> {
        let mut set = BTreeSet::new();
        for &q in self.counts.keys() {
            let class = self.class_entry(reg, q)?;
            set.extend(class.composition.keys().copied());
        }
        Ok(set)
    }

    fn class_entry<'r>(&self, reg: &'r CompositionRegistry, q: ClassId) -> Result<&'r ClassEntry, SynchroError> {
        reg.class(q).ok_or(SynchroError::UnknownClass {
            unit: self.unit,
            class: q,
        })
    }
}

/// `m_hat_k(n)`: sum over detected instances of each class's material masses.
pub fn unit_mass_estimate(report: &DetectionReport, reg: &CompositionRegistry) -> Result<u64, SynchroError> {
    report.counts.iter().try_fold(0u64, |acc, (&q, &count)| {
        let class = report.class_entry(reg, q)?;
        Ok(acc + count as u64 * class.total_mass())
    })
}

/// `F_hat^psi_k(n)`: mass of material `psi` over the detected instances.
pub fn unit_material_mass(
    report: &DetectionReport,
    reg: &CompositionRegistry,
    psi: MaterialId,
) -> Result<u64, SynchroError> {
    report.counts.iter().try_fold(0u64, |acc, (&q, &count)| {
        let class = report.class_entry(reg, q)?;
        let f = class.composition.get(&psi).copied().unwrap_or(0);
        Ok(acc + count as u64 * f)
    })
}

fn check_unique_units(reports: &[DetectionReport]) -> Result<(), SynchroError> {
    let mut seen = BTreeSet::new();
    for r in reports {
        if !seen.insert(r.unit) {
            return Err(SynchroError::DuplicateUnitReport(r.unit));
        }
    }
    Ok(())
}

/// `l_hat(n)`: total mass measured by all reporting units.
pub fn total_mass(reports: &[DetectionReport], reg: &CompositionRegistry) -> Result<u64, SynchroError> {
    check_unique_units(reports)?;
    reports
        .iter()
        .try_fold(0, |acc, r| Ok(acc + unit_mass_estimate(r, reg)?))
}

/// `F_hat^psi(n)`: total mass of material `psi` measured by all reporting units.
pub fn total_material_mass(
    reports: &[DetectionReport],
    reg: &CompositionRegistry,
    psi: MaterialId,
) -> Result<u64, SynchroError> {
    check_unique_units(reports)?;
    reports
        .iter()
        .try_fold(0, |acc, r| Ok(acc + unit_material_mass(r, reg, psi)?))
}

/// Dense `n_v x n_v` matrix of milligrams, rows and columns ordered by node id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaterialMatrix {
    dim: usize,
    data: Vec<u64>,
}

impl MaterialMatrix {
    pub fn zeros(dim: usize) -> Self {
        MaterialMatrix {
            dim,
            data: vec![0; dim * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, row: usize, col: usize) -> u64 {
        self.data[row * self.dim + col]
    }

    fn add(&mut self, row: usize, col: usize, v: u64) {
        self.data[row * self.dim + col] += v;
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u64]> {
        self.data.chunks(self.dim.max(1)).take(self.dim)
    }

    /// `1^T F 1`.
    pub fn sum(&self) -> u64 {
        self.data.iter().sum()
    }

    pub fn nonzero_positions(&self) -> Vec<(usize, usize)> {
        (0..self.dim)
            .flat_map(|r| (0..self.dim).map(move |c| (r, c)))
            .filter(|&(r, c)| self.get(r, c) != 0)
            .collect()
    }

    pub fn from_rows(rows: Vec<Vec<u64>>) -> Option<Self> {
        let dim = rows.len();
        if rows.iter().any(|r| r.len() != dim) {
            return None;
        }
        Some(MaterialMatrix {
            dim,
            data: rows.into_iter().flatten().collect(),
        })
    }
}

impl Serialize for MaterialMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(self.rows())
    }
}

impl<'de> Deserialize<'de> for MaterialMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rows = Vec::<Vec<u64>>::deserialize(d)?;
        MaterialMatrix::from_rows(rows).ok_or_else(|| serde::de::Error::custom("matrix not square"))
    }
}

/// `F_hat^psi(n)`: diagonal entries for node units, `(i, j)` entries for a unit
/// on arc `c^k_{i,j}`, zero wherever no unit is placed.
pub fn assemble_material_matrix(
    net: &TmnNetwork,
    reports: &[DetectionReport],
    reg: &CompositionRegistry,
    psi: MaterialId,
) -> Result<MaterialMatrix, SynchroError> {
    check_unique_units(reports)?;
    let mut m = MaterialMatrix::zeros(net.node_count());
    for r in reports {
        if !net.mmus().contains(&r.unit) {
            return Err(SynchroError::UnitNotInNetwork(r.unit));
        }
        let (row, col) = net
            .matrix_position(r.unit)
            .ok_or(SynchroError::UnitNotInNetwork(r.unit))?;
        m.add(row, col, unit_material_mass(r, reg, psi)?);
    }
    Ok(m)
}

/// Data-quality flag for one unit's contribution to a snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum UnitStatus {
    Fresh,
    /// Held over from a report this many epochs old.
    Stale(u64),
    Absent,
    /// The report named a class missing from the registry and was dropped.
    Quarantined,
}

impl UnitStatus {
    pub fn is_fresh(&self) -> bool {
        matches!(self, UnitStatus::Fresh)
    }
}

impl fmt::Display for UnitStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UnitStatus::Fresh => f.write_str("fresh"),
            UnitStatus::Stale(age) => write!(f, "stale({age})"),
            UnitStatus::Absent => f.write_str("absent"),
            UnitStatus::Quarantined => f.write_str("quarantined"),
        }
    }
}

impl FromStr for UnitStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fresh" => Ok(UnitStatus::Fresh),
            "absent" => Ok(UnitStatus::Absent),
            "quarantined" => Ok(UnitStatus::Quarantined),
            _ => s
                .strip_prefix("stale(")
                .and_then(|r| r.strip_suffix(')'))
                .and_then(|n| n.parse().ok())
                .map(UnitStatus::Stale)
                .ok_or_else(|| format!("unknown unit status {s:?}")),
        }
    }
}

impl Serialize for UnitStatus {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for UnitStatus {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Everything the network knows at epoch `n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynchroSnapshot {
    pub epoch: u64,
    /// `m_hat_k(n)` for every `k` in `U`.
    pub per_unit_mass: BTreeMap<CompartmentId, u64>,
    /// `F_hat^psi_k(n)` for every `k` in `U` and every registry material.
    pub per_unit_material: BTreeMap<CompartmentId, BTreeMap<MaterialId, u64>>,
    /// `F_hat^psi(n)`.
    pub total_material: BTreeMap<MaterialId, u64>,
    /// `l_hat(n)`.
    pub total_mass: u64,
    pub material_matrices: BTreeMap<MaterialId, MaterialMatrix>,
    pub status: BTreeMap<CompartmentId, UnitStatus>,
}

impl SynchroSnapshot {
    /// Computes a snapshot from the reports of one epoch. Units of `U` with no
    /// report contribute zero and are flagged absent.
    pub fn compute(
        net: &TmnNetwork,
        reg: &CompositionRegistry,
        epoch: u64,
        reports: &[DetectionReport],
    ) -> Result<Self, SynchroError> {
        check_unique_units(reports)?;
        let mut status: BTreeMap<CompartmentId, UnitStatus> =
            net.mmus().iter().map(|&k| (k, UnitStatus::Absent)).collect();
        for r in reports {
            match status.get_mut(&r.unit) {
                Some(s) => *s = UnitStatus::Fresh,
                None => return Err(SynchroError::UnitNotInNetwork(r.unit)),
            }
        }

        let mut per_unit_mass: BTreeMap<CompartmentId, u64> = net.mmus().iter().map(|&k| (k, 0)).collect();
        let mut per_unit_material: BTreeMap<CompartmentId, BTreeMap<MaterialId, u64>> = net
            .mmus()
            .iter()
            .map(|&k| (k, reg.materials().keys().map(|&m| (m, 0)).collect()))
            .collect();
        for r in reports {
            per_unit_mass.insert(r.unit, unit_mass_estimate(r, reg)?);
            let row = per_unit_material.get_mut(&r.unit).expect("unit in U");
            for (&psi, value) in row.iter_mut() {
                *value = unit_material_mass(r, reg, psi)?;
            }
        }

        let mut total_material = BTreeMap::new();
        let mut material_matrices = BTreeMap::new();
        for &psi in reg.materials().keys() {
            total_material.insert(psi, total_material_mass(reports, reg, psi)?);
            material_matrices.insert(psi, assemble_material_matrix(net, reports, reg, psi)?);
        }

        Ok(SynchroSnapshot {
            epoch,
            per_unit_mass,
            per_unit_material,
            total_material,
            total_mass: total_mass(reports, reg)?,
            material_matrices,
            status,
        })
    }

    /// Verifies the three additive identities exactly; returns a description
    /// of the first one that fails.
    pub fn check_identities(&self) -> Result<(), String> {
        let sum_units: u64 = self.per_unit_mass.values().sum();
        if sum_units != self.total_mass {
            return Err(format!(
                "epoch {}: l_hat {} != sum of m_hat {}",
                self.epoch, self.total_mass, sum_units
            ));
        }
        for (k, m_hat) in &self.per_unit_mass {
            let by_material: u64 = self.per_unit_material.get(k).map(|row| row.values().sum()).unwrap_or(0);
            if by_material != *m_hat {
                return Err(format!(
                    "epoch {}: m_hat_{k} {m_hat} != sum over materials {by_material}",
                    self.epoch
                ));
            }
        }
        for (psi, total) in &self.total_material {
            let by_unit: u64 = self
                .per_unit_material
                .values()
                .map(|row| row.get(psi).copied().unwrap_or(0))
                .sum();
            let by_matrix = self.material_matrices.get(psi).map(|m| m.sum()).unwrap_or(0);
            if by_unit != *total || by_matrix != *total {
                return Err(format!(
                    "epoch {}: F_hat^{psi} {total} != unit sum {by_unit} / matrix sum {by_matrix}",
                    self.epoch
                ));
            }
        }
        Ok(())
    }

    pub fn unit_material(&self, k: CompartmentId, psi: MaterialId) -> Option<u64> {
        self.per_unit_material.get(&k)?.get(&psi).copied()
    }
}

/// `e_k(n) = m_k(n) - m_hat_k(n)`.
pub fn measurement_error(
    truth: &StockState,
    snapshot: &SynchroSnapshot,
    k: CompartmentId,
) -> Result<i64, SynchroError> {
    if truth.epoch() != snapshot.epoch {
        return Err(SynchroError::EpochMismatch {
            truth: truth.epoch(),
            snapshot: snapshot.epoch,
        });
    }
    let estimate = snapshot
        .per_unit_mass
        .get(&k)
        .ok_or(SynchroError::UnitNotInNetwork(k))?;
    let actual = truth.mass_of(k).ok_or(SynchroError::UnitNotInNetwork(k))?;
    Ok(actual as i64 - *estimate as i64)
}
