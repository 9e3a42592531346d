mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use synchromat::scenario::{generate_detections, simulate, Scenario};
use synchromat::synchro::{measurement_error, unit_mass_estimate, unit_material_mass};
use synchromat::tmn::{build_network, network_violations, NetworkError};
use synchromat::{ClassId, CompartmentId, CompositionRegistry, Counts, DetectionReport, SynchroSnapshot};

/// Random world plus one random report for a random subset of its units.
fn random_epoch(seed: u64) -> (synchromat::TmnNetwork, CompositionRegistry, Vec<DetectionReport>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = build_network(&common::random_network(&mut rng)).unwrap();
    let reg = CompositionRegistry::from_spec(&common::random_registry(&mut rng)).unwrap();
    let classes: Vec<ClassId> = reg.classes().keys().copied().collect();
    let mut reports = Vec::new();
    for &k in net.mmus() {
        if rng.gen_bool(0.2) {
            continue;
        }
        let mut counts = Counts::new();
        for &q in &classes {
            let c = rng.gen_range(0..4u32);
            if c > 0 {
                counts.insert(q, c);
            }
        }
        reports.push(DetectionReport::new(k, 7, counts));
    }
    (net, reg, reports)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn snapshot_identities_and_sparsity(seed in any::<u64>()) {
        let (net, reg, reports) = random_epoch(seed);
        let s = SynchroSnapshot::compute(&net, &reg, 7, &reports).unwrap();

        // brute force from the registry, independent of the library sums
        let mut unit_mass: BTreeMap<CompartmentId, u64> = net.mmus().iter().map(|&k| (k, 0)).collect();
        let mut unit_mat: BTreeMap<(CompartmentId, u32), u64> = BTreeMap::new();
        for r in &reports {
            for (q, &c) in &r.counts {
                for (psi, &f) in &reg.class(*q).unwrap().composition {
                    *unit_mass.get_mut(&r.unit).unwrap() += c as u64 * f;
                    *unit_mat.entry((r.unit, psi.0)).or_insert(0) += c as u64 * f;
                }
            }
        }
        prop_assert_eq!(&s.per_unit_mass, &unit_mass);
        prop_assert_eq!(s.total_mass, unit_mass.values().sum::<u64>());
        for (&k, row) in &s.per_unit_material {
            prop_assert_eq!(row.values().sum::<u64>(), s.per_unit_mass[&k]);
            for (psi, &v) in row {
                prop_assert_eq!(v, unit_mat.get(&(k, psi.0)).copied().unwrap_or(0));
            }
        }
        let node_ids: Vec<CompartmentId> = net.nodes().iter().map(|n| n.id).collect();
        let pos = |id: CompartmentId| node_ids.iter().position(|&n| n == id).unwrap();
        for (psi, m) in &s.material_matrices {
            let expected_total: u64 = s.per_unit_material.values().map(|row| row[psi]).sum();
            prop_assert_eq!(s.total_material[psi], expected_total);
            prop_assert_eq!(m.sum(), expected_total);
            prop_assert_eq!(m.dim(), net.node_count());

            let mut expected = vec![vec![0u64; node_ids.len()]; node_ids.len()];
            for &k in net.mmus() {
                let (i, j) = if net.is_node(k) {
                    (pos(k), pos(k))
                } else {
                    let a = net.arc(k).unwrap();
                    (pos(a.from), pos(a.to))
                };
                expected[i][j] += s.per_unit_material[&k][psi];
            }
            for (i, row) in expected.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    prop_assert_eq!(m.get(i, j), v, "entry ({}, {})", i, j);
                }
            }
        }
        prop_assert_eq!(s.check_identities(), Ok(()));
    }

    #[test]
    fn mass_estimate_is_linear_in_the_multiset(seed in any::<u64>()) {
        let (_, reg, _) = random_epoch(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let classes: Vec<ClassId> = reg.classes().keys().copied().collect();
        let draw = |rng: &mut ChaCha8Rng| -> Counts {
            classes.iter().filter_map(|&q| {
                let c = rng.gen_range(0..5u32);
                (c > 0).then_some((q, c))
            }).collect()
        };
        let a = draw(&mut rng);
        let b = draw(&mut rng);
        let mut union = a.clone();
        for (q, c) in &b {
            *union.entry(*q).or_insert(0) += c;
        }
        let k = CompartmentId(1);
        let m = |c: &Counts| unit_mass_estimate(&DetectionReport::new(k, 0, c.clone()), &reg).unwrap();
        prop_assert_eq!(m(&union), m(&a) + m(&b));
        for psi in reg.materials().keys() {
            let f = |c: &Counts| unit_material_mass(&DetectionReport::new(k, 0, c.clone()), &reg, *psi).unwrap();
            prop_assert_eq!(f(&union), f(&a) + f(&b));
        }
    }

    #[test]
    fn dangling_endpoint_is_reported(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut spec = common::random_network(&mut rng);
        prop_assume!(!spec.arcs.is_empty());
        prop_assert!(network_violations(&spec).is_empty());
        let i = rng.gen_range(0..spec.arcs.len());
        let missing = 1000 + rng.gen_range(0..1000u32);
        if rng.gen_bool(0.5) {
            spec.arcs[i].from = missing;
        } else {
            spec.arcs[i].to = missing;
        }
        let arc = spec.arcs[i].id;
        let found = network_violations(&spec).into_iter().any(|e| matches!(
            e,
            NetworkError::DanglingArc { arc: a, missing: m } if a.0 == arc && m.0 == missing
        ));
        prop_assert!(found);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn random_closed_scenarios_conserve_mass(seed in any::<u64>()) {
        let sc = Scenario::from_spec(&common::random_scenario(seed)).unwrap();
        let trace = simulate(&sc).unwrap();
        let expected: u64 = sc.initial.values()
            .flat_map(|counts| counts.iter())
            .map(|(q, &c)| c as u64 * sc.reg.class(*q).unwrap().composition.values().sum::<u64>())
            .sum();
        for st in &trace.states {
            prop_assert_eq!(st.total(), expected, "epoch {}", st.epoch());
        }
        let detections = generate_detections(&trace, &sc);
        for (n, st) in trace.states.iter().enumerate() {
            let reports: Vec<DetectionReport> = detections.values().map(|r| r[n].clone()).collect();
            let snap = SynchroSnapshot::compute(&sc.net, &sc.reg, n as u64, &reports).unwrap();
            for &k in sc.net.mmus() {
                prop_assert_eq!(measurement_error(st, &snap, k).unwrap(), 0);
            }
        }
    }

    #[test]
    fn missed_detections_only_lower_estimates(seed in any::<u64>(), miss in 0.05f64..0.95) {
        let mut spec = common::random_scenario(seed);
        spec.noise.miss_p = miss;
        spec.noise.seed = seed;
        let sc = Scenario::from_spec(&spec).unwrap();
        let trace = simulate(&sc).unwrap();
        let detections = generate_detections(&trace, &sc);
        for (n, st) in trace.states.iter().enumerate() {
            let reports: Vec<DetectionReport> = detections.values().map(|r| r[n].clone()).collect();
            let snap = SynchroSnapshot::compute(&sc.net, &sc.reg, n as u64, &reports).unwrap();
            for &k in sc.net.mmus() {
                prop_assert!(measurement_error(st, &snap, k).unwrap() >= 0);
            }
        }
    }
}

#[test]
fn certain_miss_blanks_every_unit() {
    let mut sc = common::fig5();
    sc.noise.miss_probability = 1.0;
    let trace = simulate(&sc).unwrap();
    let detections = generate_detections(&trace, &sc);
    assert!(detections.values().flatten().all(|r| r.counts.is_empty()));
}

#[test]
fn identity_noise_ignores_the_seed() {
    let a = common::fig5();
    let b = common::fig5().with_seed(987_654);
    let da = generate_detections(&simulate(&a).unwrap(), &a);
    let db = generate_detections(&simulate(&b).unwrap(), &b);
    assert_eq!(da, db);
}

#[test]
fn more_misses_lose_more_mass_on_average() {
    let sc = common::fig5();
    let trace = simulate(&sc).unwrap();
    let lost = |p: f64| -> i64 {
        let mut noisy = sc.clone().with_seed(11);
        noisy.noise.miss_probability = p;
        let det = generate_detections(&trace, &noisy);
        det.values()
            .flatten()
            .map(|r| {
                let truth = trace.states[r.epoch as usize].mass_of(r.unit).unwrap() as i64;
                truth - unit_mass_estimate(r, &sc.reg).unwrap() as i64
            })
            .sum()
    };
    let (low, mid, high) = (lost(0.05), lost(0.3), lost(0.8));
    assert!(0 < low && low < mid && mid < high, "{low} {mid} {high}");
}

#[test]
fn random_scenarios_actually_move_objects() {
    let moving = (0..100u64)
        .filter(|&s| !common::random_scenario(s).itinerary.is_empty())
        .count();
    assert!(moving >= 50, "only {moving} of 100 scenarios have transport");
}
