use std::path::Path;

use cyclespace::case::{parse_json_case, read_case_file, write_json_case, GridCase, LoadProfile};
use cyclespace::graph::{
    build_graph, fundamental_cycle_basis, minimum_cycle_basis, random_fundamental_basis, topology_null_space,
};
use cyclespace::rng::substream;
use cyclespace::sim::{build_h, generate_measurements, simulate_states, NoiseModel};

fn case(name: &str) -> GridCase {
    read_case_file(&Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("fixtures/{name}.m"))).unwrap()
}

#[test]
fn sizes_and_cycle_counts() {
    for (name, buses, branches) in [("case14", 14, 20), ("case30", 30, 41), ("case57", 57, 80), ("case118", 118, 186)] {
        let c = case(name);
        assert_eq!((c.n_buses(), c.n_branches(), c.n_states()), (buses, branches, buses - 1), "{name}");
        let h = build_h(&c);
        assert_eq!(h.nullity(), branches - buses + 1);
        let basis = minimum_cycle_basis(&build_graph(&c), None).unwrap();
        assert_eq!(basis.len(), branches - buses + 1, "{name}");
        assert_eq!(basis.gf2_rank(branches), basis.len(), "{name}");
    }
}

#[test]
fn fourteen_bus_mcb() {
    let c = case("case14");
    let g = build_graph(&c);
    let basis = minimum_cycle_basis(&g, None).unwrap();
    assert!(basis.total_length() <= fundamental_cycle_basis(&g).total_length());
    let mut rng = substream(5, 0);
    for _ in 0..100 {
        assert!(basis.total_length() <= random_fundamental_basis(&g, &mut rng).total_length());
    }
    let records: serde_json::Value = serde_json::from_str(&basis.to_json()).unwrap();
    assert_eq!(records.as_array().unwrap().len(), 7);
    assert_eq!(records[0]["length"], records[0]["edge_ids"].as_array().unwrap().len());
}

#[test]
fn mcb_length_profiles_match_networkx() {
    // networkx.minimum_cycle_basis on the simple graphs; parallel branch
    // pairs add one 2-cycle each
    for (name, expected) in [
        ("case14", vec![3, 3, 3, 3, 3, 6, 6]),
        ("case30", vec![3, 3, 3, 3, 3, 3, 4, 4, 6, 7, 8, 8]),
        (
            "case57",
            vec![2, 2, 3, 3, 3, 3, 3, 3, 3, 3, 3, 4, 4, 5, 6, 6, 6, 6, 7, 8, 9, 11, 12, 13],
        ),
    ] {
        let mut lengths = minimum_cycle_basis(&build_graph(&case(name)), None).unwrap().lengths();
        lengths.sort_unstable();
        assert_eq!(lengths, expected, "{name}");
    }
}

#[test]
fn kvl_holds_on_noise_free_flows() {
    for name in ["case14", "case30", "case57", "case118"] {
        let c = case(name);
        let h = build_h(&c);
        let states = simulate_states(&c, &LoadProfile::synthetic(50, 1), 50, 0.1, 2).unwrap();
        let clean = generate_measurements(&h, &states, &NoiseModel::homoscedastic(h.m(), 0.0).unwrap(), 3)
            .unwrap()
            .z;
        let basis = minimum_cycle_basis(&build_graph(&c), None).unwrap();
        let kvl = topology_null_space(&c, &basis);
        assert!((clean.transpose() * &kvl).amax() <= 1e-10, "{name}");
        assert!((h.matrix.transpose() * &kvl).amax() <= 1e-10 * h.matrix.amax(), "{name}");
    }
}

#[test]
fn json_round_trip_of_fixtures() {
    for name in ["case14", "case30", "case57", "case118"] {
        let c = case(name);
        assert_eq!(parse_json_case(&write_json_case(&c)).unwrap(), c);
    }
}
