#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use synchromat::scenario::{EventSpec, NoiseSpec, Scenario, ScenarioSpec};
use synchromat::synchro::{ClassSpec, MaterialSpec, RegistrySpec};
use synchromat::tmn::{ArcSpec, NetworkSpec, NodeSpec};

pub fn example(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("examples").join(name)
}

pub fn fig5() -> Scenario {
    Scenario::from_json(&std::fs::read_to_string(example("paper_fig5.json")).unwrap()).unwrap()
}

/// Random network with ids shuffled over `1..=n_c`; every arc joins two
/// distinct nodes and each compartment carries a unit with probability 1/2.
pub fn random_network(rng: &mut ChaCha8Rng) -> NetworkSpec {
    let n_v = rng.gen_range(1..=6usize);
    let n_a = if n_v < 2 { 0 } else { rng.gen_range(0..=8usize) };
    let mut ids: Vec<u32> = (1..=(n_v + n_a) as u32).collect();
    ids.shuffle(rng);
    let node_ids = &ids[..n_v];
    let nodes = node_ids
        .iter()
        .map(|&id| NodeSpec {
            id,
            label: String::new(),
            location: None,
        })
        .collect();
    let arcs = ids[n_v..]
        .iter()
        .map(|&id| {
            let from = *node_ids.choose(rng).unwrap();
            let to = loop {
                let t = *node_ids.choose(rng).unwrap();
                if t != from {
                    break t;
                }
            };
            ArcSpec {
                id,
                from,
                to,
                label: String::new(),
                location: None,
            }
        })
        .collect();
    let mmus = ids.iter().copied().filter(|_| rng.gen_bool(0.5)).collect();
    NetworkSpec { nodes, arcs, mmus }
}

/// Up to 4 materials and 5 classes; every class has at least one
/// constituent, masses up to 100 g per material.
pub fn random_registry(rng: &mut ChaCha8Rng) -> RegistrySpec {
    let n_m = rng.gen_range(1..=4u32);
    let materials: Vec<MaterialSpec> = (1..=n_m)
        .map(|id| MaterialSpec {
            id: id * 3,
            name: format!("material {id}"),
        })
        .collect();
    let classes = (1..=rng.gen_range(1..=5u32))
        .map(|id| {
            let mut composition = BTreeMap::new();
            for m in &materials {
                if composition.is_empty() || rng.gen_bool(0.6) {
                    composition.insert(m.id.to_string(), rng.gen_range(1..=100_000u64));
                }
            }
            ClassSpec {
                id: id + 10,
                name: format!("class {id}"),
                composition,
            }
        })
        .collect();
    RegistrySpec { materials, classes }
}

/// A closed scenario: objects start at nodes and travel along arcs that
/// leave their current node. Event times sit on a half-hour grid and
/// `T = 0.1 h`.
pub fn random_scenario(seed: u64) -> ScenarioSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let network = random_network(&mut rng);
    let registry = random_registry(&mut rng);
    let class_ids: Vec<u32> = registry.classes.iter().map(|c| c.id).collect();

    let mut initial: BTreeMap<String, BTreeMap<String, u32>> = BTreeMap::new();
    let mut positions: Vec<(u32, u32, u32)> = Vec::new();
    let mut instances: BTreeMap<u32, u32> = BTreeMap::new();
    let mut node_order: Vec<u32> = network.nodes.iter().map(|n| n.id).collect();
    node_order.sort();
    for &node in &node_order {
        for &q in &class_ids {
            let c = rng.gen_range(0..=2u32);
            if c > 0 {
                initial.entry(node.to_string()).or_default().insert(q.to_string(), c);
            }
        }
    }
    // instance numbering: per class, ascending node id
    for &q in &class_ids {
        for &node in &node_order {
            let c = initial
                .get(&node.to_string())
                .and_then(|m| m.get(&q.to_string()))
                .copied()
                .unwrap_or(0);
            for _ in 0..c {
                let i = instances.entry(q).or_insert(0);
                *i += 1;
                positions.push((q, *i, node));
            }
        }
    }

    let mut itinerary = Vec::new();
    let mut horizon = 2.0f64;
    let movers: BTreeSet<usize> = (0..positions.len()).filter(|_| rng.gen_bool(0.5)).collect();
    for idx in movers {
        let (q, instance, mut at) = positions[idx];
        let mut cursor = rng.gen_range(1..=4u32) as f64 * 0.5;
        for _ in 0..rng.gen_range(1..=3) {
            let out: Vec<&ArcSpec> = network.arcs.iter().filter(|a| a.from == at).collect();
            let Some(arc) = out.choose(&mut rng) else {
                break;
            };
            let depart = cursor;
            let arrive = depart + rng.gen_range(1..=6u32) as f64 * 0.5;
            itinerary.push(EventSpec {
                class: q,
                instance,
                arc: arc.id,
                depart_h: depart,
                arrive_h: arrive,
            });
            at = arc.to;
            cursor = arrive + rng.gen_range(1..=3u32) as f64 * 0.5;
            horizon = horizon.max(arrive + 1.0);
        }
    }

    ScenarioSpec {
        network,
        registry,
        initial,
        itinerary,
        t_h: 0.1,
        horizon_h: horizon,
        epsilon_h: 0.01,
        noise: NoiseSpec::default(),
    }
}
