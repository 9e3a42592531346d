//! Thermodynamical material networks: node and arc compartments arranged as a
//! weighted mass-flow digraph, plus the placement set of measurement units.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier `k` of a compartment. Node and arc compartments share one id space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CompartmentId(pub u32);

impl fmt::Display for CompartmentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Latitude/longitude in decimal degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl From<[f64; 2]> for GeoPoint {
    fn from([lat, lon]: [f64; 2]) -> Self {
        GeoPoint { lat, lon }
    }
}

impl From<GeoPoint> for [f64; 2] {
    fn from(p: GeoPoint) -> Self {
        [p.lat, p.lon]
    }
}

impl GeoPoint {
    fn is_valid(&self) -> bool {
        (-90.0..=90.0).contains(&self.lat) && (-180.0..=180.0).contains(&self.lon)
    }
}

/// A compartment that stores, transforms or uses material (`i = j = k`).
#[derive(Debug, Clone, PartialEq)]
pub struct NodeCompartment {
    pub id: CompartmentId,
    pub label: String,
    pub location: Option<GeoPoint>,
}

/// A compartment that moves material from node `from` to node `to`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArcCompartment {
    pub id: CompartmentId,
    pub from: CompartmentId,
    pub to: CompartmentId,
    pub label: String,
    pub location: Option<GeoPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Compartment<'a> {
    Node(&'a NodeCompartment),
    Arc(&'a ArcCompartment),
}

impl Compartment<'_> {
    pub fn id(&self) -> CompartmentId {
        match self {
            Compartment::Node(n) => n.id,
            Compartment::Arc(a) => a.id,
        }
    }

    pub fn location(&self) -> Option<GeoPoint> {
        match self {
            Compartment::Node(n) => n.location,
            Compartment::Arc(a) => a.location,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetworkError {
    #[error("DuplicateId: compartment id {0} is used more than once")]
    DuplicateId(CompartmentId),
    #[error("ZeroId: compartment ids must be positive")]
    ZeroId,
    #[error("DanglingArc: arc {arc} references {missing}, which is not a node compartment")]
    DanglingArc { arc: CompartmentId, missing: CompartmentId },
    #[error("SelfLoopArc: arc {0} starts and ends at the same node")]
    SelfLoopArc(CompartmentId),
    #[error("UnknownMmuLocation: unit placed at {0}, which is not a compartment of the network")]
    UnknownMmuLocation(CompartmentId),
    #[error("DuplicateMmu: more than one unit placed at {0}")]
    DuplicateMmu(CompartmentId),
    #[error("InvalidLocation: compartment {0} has a coordinate outside [-90,90]x[-180,180]")]
    InvalidLocation(CompartmentId),
}

impl NetworkError {
    /// Short machine-friendly name of the violation.
    pub fn kind(&self) -> &'static str {
        match self {
            NetworkError::DuplicateId(_) => "DuplicateId",
            NetworkError::ZeroId => "ZeroId",
            NetworkError::DanglingArc { .. } => "DanglingArc",
            NetworkError::SelfLoopArc(_) => "SelfLoopArc",
            NetworkError::UnknownMmuLocation(_) => "UnknownMmuLocation",
            NetworkError::DuplicateMmu(_) => "DuplicateMmu",
            NetworkError::InvalidLocation(_) => "InvalidLocation",
        }
    }
}

/// On-disk description of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub arcs: Vec<ArcSpec>,
    #[serde(default)]
    pub mmus: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: u32,
    #[serde(default)]
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<GeoPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArcSpec {
    pub id: u32,
    pub from: u32,
    pub to: u32,
    #[serde(default)]
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<GeoPoint>,
}

/// A validated material network. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct TmnNetwork {
    nodes: Vec<NodeCompartment>,
    arcs: Vec<ArcCompartment>,
    mmus: BTreeSet<CompartmentId>,
}

/// Lists every invariant violation in `spec`, in a fixed order.
pub fn network_violations(spec: &NetworkSpec) -> Vec<NetworkError> {
    let mut errors = Vec::new();
    let mut seen = BTreeSet::new();
    let ids = spec.nodes.iter().map(|n| n.id).chain(spec.arcs.iter().map(|a| a.id));
    for id in ids {
        if id == 0 {
            if !errors.contains(&NetworkError::ZeroId) {
                errors.push(NetworkError::ZeroId);
            }
        } else if !seen.insert(id) {
            errors.push(NetworkError::DuplicateId(CompartmentId(id)));
        }
    }

    let node_ids: BTreeSet<u32> = spec.nodes.iter().map(|n| n.id).collect();
    for arc in &spec.arcs {
        if arc.from == arc.to {
            errors.push(NetworkError::SelfLoopArc(CompartmentId(arc.id)));
        }
        for end in [arc.from, arc.to] {
            if !node_ids.contains(&end) {
                errors.push(NetworkError::DanglingArc {
                    arc: CompartmentId(arc.id),
                    missing: CompartmentId(end),
                });
            }
        }
    }

    let mut placed = BTreeSet::new();
    for &k in &spec.mmus {
        if !seen.contains(&k) {
            errors.push(NetworkError::UnknownMmuLocation(CompartmentId(k)));
        } else if !placed.insert(k) {
            errors.push(NetworkError::DuplicateMmu(CompartmentId(k)));
        }
    }

    let located = spec
        .nodes
        .iter()
        .map(|n| (n.id, n.location))
        .chain(spec.arcs.iter().map(|a| (a.id, a.location)));
    for (id, loc) in located {
        if matches!(loc, Some(p) if !p.is_valid()) {
            errors.push(NetworkError::InvalidLocation(CompartmentId(id)));
        }
    }
    errors
}

/// Validates `spec` and builds the network, failing on the first violation.
pub fn build_network(spec: &NetworkSpec) -> Result<TmnNetwork, NetworkError> {
    if let Some(err) = network_violations(spec).into_iter().next() {
        return Err(err);
    }
    let mut nodes: Vec<NodeCompartment> = spec
        .nodes
        .iter()
        .map(|n| NodeCompartment {
            id: CompartmentId(n.id),
            label: n.label.clone(),
            location: n.location,
        })
        .collect();
    nodes.sort_by_key(|n| n.id);
    let mut arcs: Vec<ArcCompartment> = spec
        .arcs
        .iter()
        .map(|a| ArcCompartment {
            id: CompartmentId(a.id),
            from: CompartmentId(a.from),
            to: CompartmentId(a.to),
            label: a.label.clone(),
            location: a.location,
        })
        .collect();
    arcs.sort_by_key(|a| a.id);
    let mmus = spec.mmus.iter().map(|&k| CompartmentId(k)).collect();
    Ok(TmnNetwork { nodes, arcs, mmus })
}

impl TmnNetwork {
    pub fn from_json(text: &str) -> Result<TmnNetwork, crate::Error> {
        let spec: NetworkSpec = serde_json::from_str(text)?;
        Ok(build_network(&spec)?)
    }

    pub fn to_spec(&self) -> NetworkSpec {
        NetworkSpec {
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeSpec {
                    id: n.id.0,
                    label: n.label.clone(),
                    location: n.location,
                })
                .collect(),
            arcs: self
                .arcs
                .iter()
                .map(|a| ArcSpec {
                    id: a.id.0,
                    from: a.from.0,
                    to: a.to.0,
                    label: a.label.clone(),
                    location: a.location,
                })
                .collect(),
            mmus: self.mmus.iter().map(|k| k.0).collect(),
        }
    }

    /// Node compartments ordered by id.
    pub fn nodes(&self) -> &[NodeCompartment] {
        &self.nodes
    }

    /// Arc compartments ordered by id.
    pub fn arcs(&self) -> &[ArcCompartment] {
        &self.arcs
    }

    /// The placement set `U`.
    pub fn mmus(&self) -> &BTreeSet<CompartmentId> {
        &self.mmus
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn arc_count(&self) -> usize {
        self.arcs.len()
    }

    /// `n_c = n_v + n_a`.
    pub fn compartment_count(&self) -> usize {
        self.nodes.len() + self.arcs.len()
    }

    pub fn unit_count(&self) -> usize {
        self.mmus.len()
    }

    pub fn compartment(&self, id: CompartmentId) -> Option<Compartment<'_>> {
        if let Ok(i) = self.nodes.binary_search_by_key(&id, |n| n.id) {
            return Some(Compartment::Node(&self.nodes[i]));
        }
        self.arcs
            .binary_search_by_key(&id, |a| a.id)
            .ok()
            .map(|i| Compartment::Arc(&self.arcs[i]))
    }

    pub fn is_node(&self, id: CompartmentId) -> bool {
        matches!(self.compartment(id), Some(Compartment::Node(_)))
    }

    pub fn arc(&self, id: CompartmentId) -> Option<&ArcCompartment> {
        match self.compartment(id) {
            Some(Compartment::Arc(a)) => Some(a),
            _ => None,
        }
    }

    /// Row/column position of a node in `n_v x n_v` matrices.
    pub fn node_index(&self, id: CompartmentId) -> Option<usize> {
        self.nodes.binary_search_by_key(&id, |n| n.id).ok()
    }

    /// Matrix position carrying the measurement of compartment `k`: `(k, k)`
    /// for nodes, `(i, j)` for an arc `c^k_{i,j}`.
    pub fn matrix_position(&self, k: CompartmentId) -> Option<(usize, usize)> {
        match self.compartment(k)? {
            Compartment::Node(_) => {
                let i = self.node_index(k)?;
                Some((i, i))
            }
            Compartment::Arc(a) => Some((self.node_index(a.from)?, self.node_index(a.to)?)),
        }
    }

    pub fn location_of(&self, k: CompartmentId) -> Option<GeoPoint> {
        self.compartment(k).and_then(|c| c.location())
    }
}

/// Weighted mass-flow digraph `M(N)` without weights: node ids and one edge per arc.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MassFlowDigraph {
    pub nodes: Vec<CompartmentId>,
    pub edges: Vec<FlowEdge>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlowEdge {
    pub arc: CompartmentId,
    pub from: CompartmentId,
    pub to: CompartmentId,
}

impl MassFlowDigraph {
    pub fn edge_pairs(&self) -> Vec<(u32, u32)> {
        self.edges.iter().map(|e| (e.from.0, e.to.0)).collect()
    }
}

pub fn mass_flow_digraph(net: &TmnNetwork) -> MassFlowDigraph {
    MassFlowDigraph {
        nodes: net.nodes.iter().map(|n| n.id).collect(),
        edges: net
            .arcs
            .iter()
            .map(|a| FlowEdge {
                arc: a.id,
                from: a.from,
                to: a.to,
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StockError {
    #[error("stock keys do not match the network's {0} compartments")]
    KeyMismatch(&'static str),
}

/// Ground-truth stocks at epoch `n`, in milligrams.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StockState {
    epoch: u64,
    node_mass: BTreeMap<CompartmentId, u64>,
    arc_mass: BTreeMap<CompartmentId, u64>,
}

impl StockState {
    pub fn new(
        net: &TmnNetwork,
        epoch: u64,
        node_mass: BTreeMap<CompartmentId, u64>,
        arc_mass: BTreeMap<CompartmentId, u64>,
    ) -> Result<StockState, StockError> {
        if !node_mass.keys().copied().eq(net.nodes.iter().map(|n| n.id)) {
            return Err(StockError::KeyMismatch("node"));
        }
        if !arc_mass.keys().copied().eq(net.arcs.iter().map(|a| a.id)) {
            return Err(StockError::KeyMismatch("arc"));
        }
        Ok(StockState {
            epoch,
            node_mass,
            arc_mass,
        })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn node_mass(&self) -> &BTreeMap<CompartmentId, u64> {
        &self.node_mass
    }

    pub fn arc_mass(&self) -> &BTreeMap<CompartmentId, u64> {
        &self.arc_mass
    }

    /// Mass in compartment `k`, node or arc.
    pub fn mass_of(&self, k: CompartmentId) -> Option<u64> {
        self.node_mass.get(&k).or_else(|| self.arc_mass.get(&k)).copied()
    }

    /// Sum over all compartments.
    pub fn total(&self) -> u64 {
        self.node_mass.values().chain(self.arc_mass.values()).sum()
    }
}
