//! Ground-truth simulation of stocks moving through a network by impulsive
//! transfers, and generation of per-unit detection streams with optional
//! detection noise.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synchro::{ClassId, CompositionRegistry, Counts, DetectionReport, RegistrySpec};
use crate::tmn::{build_network, CompartmentId, NetworkSpec, StockState, TmnNetwork};

/// Slack used when quantizing event times onto the sampling grid, as a
/// fraction of one sample. Keeps `10.0 / 0.1` landing on epoch 100.
const GRID_SLACK: f64 = 1e-9;

/// Rectangular function: 1 inside `|x| < 1/2`, 1/2 on the edge, 0 outside.
pub fn rect(sigma: f64) -> f64 {
    let a = sigma.abs();
    if a < 0.5 {
        1.0
    } else if a == 0.5 {
        0.5
    } else {
        0.0
    }
}

/// Rectangular pulse of width `width` centred on `center`, evaluated at `t`.
pub fn pulse(t: f64, center: f64, width: f64) -> f64 {
    rect((t - center) / width)
}

/// One physical object, identified by class and a 1-based per-class instance
/// number. Instances are numbered in ascending node-id order of the initial
/// placement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ObjectInstance {
    pub class: ClassId,
    pub instance: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportEvent {
    pub object: ObjectInstance,
    pub via_arc: CompartmentId,
    pub depart_h: f64,
    pub arrive_h: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NoiseModel {
    pub miss_probability: f64,
    /// true class -> reported class -> probability; the remainder of each row
    /// is the probability of a correct report.
    pub confusion: BTreeMap<ClassId, BTreeMap<ClassId, f64>>,
    pub seed: u64,
}

impl NoiseModel {
    pub fn is_identity(&self) -> bool {
        self.miss_probability == 0.0 && self.confusion.values().all(|row| row.values().all(|&p| p == 0.0))
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Network(#[from] crate::tmn::NetworkError),
    #[error(transparent)]
    Registry(#[from] crate::synchro::RegistryError),
    #[error("InvalidTiming: {0}")]
    InvalidTiming(String),
    #[error("InvalidPlacement: {0}")]
    InvalidPlacement(String),
    #[error("InvalidNoise: {0}")]
    InvalidNoise(String),
    #[error("InconsistentItinerary: {0}")]
    InconsistentItinerary(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub network: NetworkSpec,
    pub registry: RegistrySpec,
    #[serde(default)]
    pub initial: BTreeMap<String, BTreeMap<String, u32>>,
    #[serde(default)]
    pub itinerary: Vec<EventSpec>,
    #[serde(rename = "T_h")]
    pub t_h: f64,
    pub horizon_h: f64,
    pub epsilon_h: f64,
    #[serde(default)]
    pub noise: NoiseSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventSpec {
    pub class: u32,
    pub instance: u32,
    pub arc: u32,
    pub depart_h: f64,
    pub arrive_h: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    #[serde(default)]
    pub miss_p: f64,
    #[serde(default)]
    pub confusion: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(default)]
    pub seed: u64,
}

/// A validated ground-truth world.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub net: TmnNetwork,
    pub reg: CompositionRegistry,
    pub initial: BTreeMap<CompartmentId, Counts>,
    pub itinerary: Vec<TransportEvent>,
    pub sample_time_h: f64,
    pub horizon_h: f64,
    pub pulse_width_h: f64,
    pub noise: NoiseModel,
}

fn parse_key(key: &str, what: &str) -> Result<u32, ScenarioError> {
    key.parse()
        .map_err(|_| ScenarioError::InvalidPlacement(format!("{what} key {key:?} is not an integer")))
}

impl Scenario {
    pub fn from_spec(spec: &ScenarioSpec) -> Result<Scenario, ScenarioError> {
        let net = build_network(&spec.network)?;
        let reg = CompositionRegistry::from_spec(&spec.registry)?;

        let mut initial = BTreeMap::new();
        for (node, classes) in &spec.initial {
            let node = CompartmentId(parse_key(node, "node")?);
            let mut counts = Counts::new();
            for (class, &count) in classes {
                let class = ClassId(parse_key(class, "class")?);
                if count > 0 {
                    counts.insert(class, count);
                }
            }
            initial.insert(node, counts);
        }

        let itinerary = spec
            .itinerary
            .iter()
            .map(|e| TransportEvent {
                object: ObjectInstance {
                    class: ClassId(e.class),
                    instance: e.instance,
                },
                via_arc: CompartmentId(e.arc),
                depart_h: e.depart_h,
                arrive_h: e.arrive_h,
            })
            .collect();

        let mut confusion = BTreeMap::new();
        for (from, row) in &spec.noise.confusion {
            let from = ClassId(parse_key(from, "confusion")?);
            let mut parsed = BTreeMap::new();
            for (to, &p) in row {
                parsed.insert(ClassId(parse_key(to, "confusion")?), p);
            }
            confusion.insert(from, parsed);
        }

        let sc = Scenario {
            net,
            reg,
            initial,
            itinerary,
            sample_time_h: spec.t_h,
            horizon_h: spec.horizon_h,
            pulse_width_h: spec.epsilon_h,
            noise: NoiseModel {
                miss_probability: spec.noise.miss_p,
                confusion,
                seed: spec.noise.seed,
            },
        };
        sc.validate()?;
        Ok(sc)
    }

    pub fn from_json(text: &str) -> Result<Scenario, crate::Error> {
        let spec: ScenarioSpec = serde_json::from_str(text)?;
        Ok(Scenario::from_spec(&spec)?)
    }

    pub fn with_seed(mut self, seed: u64) -> Scenario {
        self.noise.seed = seed;
        self
    }

    /// Checks timing, placement, noise and itinerary consistency.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let t = self.sample_time_h;
        if !(t.is_finite() && t > 0.0) {
            return Err(ScenarioError::InvalidTiming(format!("sample time T={t} must be > 0")));
        }
        if !(self.horizon_h.is_finite() && self.horizon_h > 0.0) {
            return Err(ScenarioError::InvalidTiming(format!(
                "horizon {} must be > 0",
                self.horizon_h
            )));
        }
        let eps = self.pulse_width_h;
        if !(eps > 0.0 && eps < t) {
            return Err(ScenarioError::InvalidTiming(format!(
                "pulse width {eps} must satisfy 0 < epsilon < T={t}"
            )));
        }

        for (node, counts) in &self.initial {
            if !self.net.is_node(*node) {
                return Err(ScenarioError::InvalidPlacement(format!(
                    "initial objects placed in {node}, which is not a node compartment"
                )));
            }
            if let Some(q) = counts.keys().find(|q| self.reg.class(**q).is_none()) {
                return Err(ScenarioError::InvalidPlacement(format!(
                    "initial objects of class {q} missing from the registry"
                )));
            }
        }

        self.validate_noise()?;

        let mut times = Vec::new();
        for ev in &self.itinerary {
            if ev.arrive_h.partial_cmp(&ev.depart_h) != Some(Ordering::Greater) {
                return Err(ScenarioError::InvalidTiming(format!(
                    "arrival {} h not after departure {} h",
                    ev.arrive_h, ev.depart_h
                )));
            }
            for time in [ev.depart_h, ev.arrive_h] {
                if !(0.0..=self.horizon_h).contains(&time) {
                    return Err(ScenarioError::InvalidTiming(format!(
                        "event time {time} h outside [0, {}]",
                        self.horizon_h
                    )));
                }
                times.push(time);
            }
        }
        times.sort_by(f64::total_cmp);
        times.dedup();
        if let Some(gap) = times.windows(2).map(|w| w[1] - w[0]).min_by(f64::total_cmp) {
            if t.partial_cmp(&gap) != Some(Ordering::Less) {
                return Err(ScenarioError::InvalidTiming(format!(
                    "T={t} h does not resolve the smallest inter-event gap {gap} h"
                )));
            }
        }

        self.object_timelines().map(|_| ())
    }

    fn validate_noise(&self) -> Result<(), ScenarioError> {
        let p = self.noise.miss_probability;
        if !(0.0..=1.0).contains(&p) {
            return Err(ScenarioError::InvalidNoise(format!(
                "miss probability {p} outside [0,1]"
            )));
        }
        for (from, row) in &self.noise.confusion {
            let mut total = 0.0;
            for (to, &p) in row {
                if !(0.0..=1.0).contains(&p) {
                    return Err(ScenarioError::InvalidNoise(format!(
                        "confusion {from}->{to} probability {p} outside [0,1]"
                    )));
                }
                if self.reg.class(*to).is_none() || self.reg.class(*from).is_none() {
                    return Err(ScenarioError::InvalidNoise(format!(
                        "confusion {from}->{to} names a class missing from the registry"
                    )));
                }
                total += p;
            }
            if total > 1.0 + 1e-12 {
                return Err(ScenarioError::InvalidNoise(format!(
                    "confusion row for class {from} sums to {total} > 1"
                )));
            }
        }
        Ok(())
    }

    /// Objects and their starting node, instances numbered per class in
    /// ascending node order.
    pub fn initial_objects(&self) -> BTreeMap<ObjectInstance, CompartmentId> {
        let mut next: BTreeMap<ClassId, u32> = BTreeMap::new();
        let mut objects = BTreeMap::new();
        for (&node, counts) in &self.initial {
            for (&class, &count) in counts {
                let n = next.entry(class).or_insert(0);
                for _ in 0..count {
                    *n += 1;
                    objects.insert(ObjectInstance { class, instance: *n }, node);
                }
            }
        }
        objects
    }

    /// Index of the last sample, `floor(horizon / T)`.
    pub fn last_epoch(&self) -> u64 {
        (self.horizon_h / self.sample_time_h + GRID_SLACK).floor() as u64
    }

    pub fn epoch_count(&self) -> u64 {
        self.last_epoch() + 1
    }

    pub fn time_of(&self, epoch: u64) -> f64 {
        epoch as f64 * self.sample_time_h
    }

    /// First sample `n` with `n T >= t`; the impulse at `t` fires there and
    /// shows up in the stock at `n + 1`.
    pub fn firing_epoch(&self, t_h: f64) -> u64 {
        (t_h / self.sample_time_h - GRID_SLACK).ceil().max(0.0) as u64
    }

    /// Per object, the epochs at which its location changes, starting with
    /// `(0, initial node)`. Checks that every leg departs from the node the
    /// object is in.
    fn object_timelines(&self) -> Result<BTreeMap<ObjectInstance, Vec<(u64, CompartmentId)>>, ScenarioError> {
        let objects = self.initial_objects();
        let mut legs: BTreeMap<ObjectInstance, Vec<&TransportEvent>> = BTreeMap::new();
        for ev in &self.itinerary {
            if !objects.contains_key(&ev.object) {
                return Err(ScenarioError::InconsistentItinerary(format!(
                    "object class {} instance {} does not exist",
                    ev.object.class, ev.object.instance
                )));
            }
            legs.entry(ev.object).or_default().push(ev);
        }

        let mut timelines = BTreeMap::new();
        for (&obj, &start) in &objects {
            let mut timeline = vec![(0, start)];
            let mut here = start;
            let mut free_from = f64::NEG_INFINITY;
            let mut trips = legs.remove(&obj).unwrap_or_default();
            trips.sort_by(|a, b| a.depart_h.total_cmp(&b.depart_h));
            for ev in trips {
                let arc = self.net.arc(ev.via_arc).ok_or_else(|| {
                    ScenarioError::InconsistentItinerary(format!("{} is not an arc compartment", ev.via_arc))
                })?;
                if arc.from != here || ev.depart_h.partial_cmp(&free_from) != Some(Ordering::Greater) {
                    return Err(ScenarioError::InconsistentItinerary(format!(
                        "class {} instance {} departs node {} at {} h via arc {} but is in {} until {} h",
                        obj.class,
                        obj.instance,
                        arc.from,
                        ev.depart_h,
                        arc.id,
                        here,
                        free_from.max(0.0)
                    )));
                }
                timeline.push((self.firing_epoch(ev.depart_h) + 1, arc.id));
                timeline.push((self.firing_epoch(ev.arrive_h) + 1, arc.to));
                here = arc.to;
                free_from = ev.arrive_h;
            }
            timelines.insert(obj, timeline);
        }
        Ok(timelines)
    }
}

/// Ground-truth stocks and object positions for `n = 0..=floor(horizon/T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthTrace {
    pub sample_time_h: f64,
    pub states: Vec<StockState>,
    pub object_positions: Vec<BTreeMap<ObjectInstance, CompartmentId>>,
}

/// Runs the impulse-update recursion: an object leaves its node one sample
/// after the first sample at or past its departure time, rides the arc, and
/// joins the destination one sample after the first sample at or past its
/// arrival time.
pub fn simulate(sc: &Scenario) -> Result<GroundTruthTrace, ScenarioError> {
    let timelines = sc.object_timelines()?;
    let masses: BTreeMap<ObjectInstance, u64> = timelines
        .keys()
        .map(|o| (*o, sc.reg.class(o.class).map(|c| c.total_mass()).unwrap_or(0)))
        .collect();

    let epochs = sc.epoch_count();
    let mut cursor: BTreeMap<ObjectInstance, usize> = timelines.keys().map(|o| (*o, 0)).collect();
    let mut states = Vec::with_capacity(epochs as usize);
    let mut positions = Vec::with_capacity(epochs as usize);
    for n in 0..epochs {
        let mut node_mass: BTreeMap<CompartmentId, u64> = sc.net.nodes().iter().map(|c| (c.id, 0)).collect();
        let mut arc_mass: BTreeMap<CompartmentId, u64> = sc.net.arcs().iter().map(|c| (c.id, 0)).collect();
        let mut here = BTreeMap::new();
        for (obj, timeline) in &timelines {
            let i = cursor.get_mut(obj).expect("cursor per object");
            while *i + 1 < timeline.len() && timeline[*i + 1].0 <= n {
                *i += 1;
            }
            let at = timeline[*i].1;
            let slot = node_mass
                .get_mut(&at)
                .or_else(|| arc_mass.get_mut(&at))
                .expect("object inside a network compartment");
            *slot += masses[obj];
            here.insert(*obj, at);
        }
        states.push(StockState::new(&sc.net, n, node_mass, arc_mass).expect("keys from network"));
        positions.push(here);
    }
    Ok(GroundTruthTrace {
        sample_time_h: sc.sample_time_h,
        states,
        object_positions: positions,
    })
}

/// Per-unit detection streams, one report per epoch per unit in `U`. Each
/// object instance inside the unit's compartment is independently dropped
/// with the miss probability and otherwise possibly reported as a confused
/// class. Identity noise draws nothing from the generator.
pub fn generate_detections(trace: &GroundTruthTrace, sc: &Scenario) -> BTreeMap<CompartmentId, Vec<DetectionReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(sc.noise.seed);
    let mut out: BTreeMap<CompartmentId, Vec<DetectionReport>> =
        sc.net.mmus().iter().map(|&k| (k, Vec::new())).collect();
    for (n, positions) in trace.object_positions.iter().enumerate() {
        let n = n as u64;
        let timestamp_ms = (sc.time_of(n) * 3_600_000.0).round() as u64;
        for (&unit, reports) in out.iter_mut() {
            let mut counts = Counts::new();
            for (obj, _) in positions.iter().filter(|(_, &at)| at == unit) {
                if let Some(class) = observe(obj.class, &sc.noise, &mut rng) {
                    *counts.entry(class).or_insert(0) += 1;
                }
            }
            reports.push(DetectionReport {
                unit,
                epoch: n,
                counts,
                timestamp_ms,
            });
        }
    }
    out
}

fn observe(class: ClassId, noise: &NoiseModel, rng: &mut ChaCha8Rng) -> Option<ClassId> {
    if noise.miss_probability > 0.0 && rng.gen::<f64>() < noise.miss_probability {
        return None;
    }
    match noise.confusion.get(&class) {
        Some(row) if !row.is_empty() => {
            let draw: f64 = rng.gen();
            let mut acc = 0.0;
            for (&to, &p) in row {
                acc += p;
                if draw < acc {
                    return Some(to);
                }
            }
            Some(class)
        }
        _ => Some(class),
    }
}
