// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use super::*;

fn proc(id: &str) -> ProcessorSpec {
    ProcessorSpec {
        id: id.into(),
        kind: "builtin:annotate".into(),
        input_model: DataModelKind::Microbatch,
        output_model: DataModelKind::Microbatch,
        config: BTreeMap::new(),
        demands: ResourceDemand::default(),
        constraints: Vec::new(),
    }
}

fn flow(ids: &[&str], edges: &[(&str, &str)]) -> DataflowSpec {
    DataflowSpec {
        name: "test".into(),
        processors: ids.iter().map(|id| proc(id)).collect(),
        edges: edges
            .iter()
            .map(|(f, t)| EdgeSpec::new(*f, *t))
            .collect(),
        qos: BTreeMap::new(),
    }
}

fn mapping(pairs: &[(&str, &str)]) -> PlacementMapping {
    PlacementMapping::new(
        pairs
            .iter()
            .map(|(p, r)| (p.to_string(), r.to_string()))
            .collect(),
    )
}

const ETL_JSON: &str = r#"{
  "name": "etl",
  "processors": [
    {"id": "source", "kind": "builtin:source_replay", "input_model": "microbatch", "output_model": "microbatch",
     "config": {"file": "taxi.senml", "rate": 100.0, "raw": true}, "demands": {"cpu_millis": 500, "mem_mb": 64}},
    {"id": "parse", "kind": "builtin:parse_senml", "input_model": "microbatch", "output_model": "stream",
     "config": {}, "demands": {"cpu_millis": 500, "mem_mb": 64}},
    {"id": "clean", "kind": "cep", "input_model": "stream", "output_model": "stream",
     "config": {"stages": [{"kind": "filter", "field": "v", "op": ">=", "const": 0.0}]},
     "demands": {"cpu_millis": 500, "mem_mb": 64}},
    {"id": "annotate", "kind": "builtin:annotate", "input_model": "microbatch", "output_model": "microbatch",
     "config": {"key": "stage", "val": "clean"}, "demands": {"cpu_millis": 500, "mem_mb": 64}},
    {"id": "sink", "kind": "builtin:sink_count", "input_model": "microbatch", "output_model": "microbatch",
     "config": {}, "demands": {"cpu_millis": 500, "mem_mb": 64}}
  ],
  "edges": [
    {"from": "source", "to": "parse"},
    {"from": "parse", "to": "clean"},
    {"from": "clean", "to": "annotate"},
    {"from": "annotate", "to": "sink"}
  ],
  "qos": {}
}"#;

#[test]
fn etl_shaped_json_is_valid() {
    let (spec, warnings) = parse_and_validate(ETL_JSON.as_bytes()).unwrap();
    assert_eq!(spec.processors.len(), 5);
    assert_eq!(spec.edges.len(), 4);
    assert!(warnings.is_empty());
    assert_eq!(spec.sources().len(), 1);
    assert_eq!(spec.sources()[0].id, "source");
}

#[test]
fn dangling_edge_names_the_ghost() {
    let spec = flow(&["a"], &[("a", "ghost")]);
    let err = validate(&spec).unwrap_err();
    match err {
        FlowError::Invalid(v) => {
            assert!(v.iter().any(|x| x.message.contains("unknown processor ghost")), "{v:?}");
        }
        other => panic!("expected Invalid, got {other}"),
    }
}

#[test]
fn duplicate_id_reported() {
    let mut spec = flow(&["a", "b"], &[("a", "b")]);
    spec.processors[1].id = "a".into();
    let err = validate(&spec).unwrap_err();
    match err {
        FlowError::Invalid(v) => {
            assert!(v.iter().any(|x| x.message.contains("duplicate id a")), "{v:?}");
        }
        other => panic!("expected Invalid, got {other}"),
    }
}

#[test]
fn pure_cycle_rejected_but_cycle_with_source_warned() {
    let pure = flow(&["a", "b"], &[("a", "b"), ("b", "a")]);
    assert!(matches!(validate(&pure), Err(FlowError::Invalid(_))));

    let with_source = flow(&["s", "a", "b"], &[("s", "a"), ("a", "b"), ("b", "a")]);
    let warnings = validate(&with_source).unwrap();
    assert_eq!(warnings.len(), 1, "cycle should warn: {warnings:?}");
}

#[test]
fn self_loop_permitted_with_source() {
    let spec = flow(&["s", "a"], &[("s", "a"), ("a", "a")]);
    let warnings = validate(&spec).unwrap();
    assert!(!warnings.is_empty());
}

#[test]
fn spec_json_roundtrip() {
    let (spec, _) = parse_and_validate(ETL_JSON.as_bytes()).unwrap();
    let json = serde_json::to_vec(&spec).unwrap();
    let (back, _) = parse_and_validate(&json).unwrap();
    assert_eq!(spec, back);
}

#[test]
fn edge_cut_basic_example() {
    // A,B on r1; C on r2; edges A->B->C; all reachable: one push cut at B->C.
    let spec = flow(&["A", "B", "C"], &[("A", "B"), ("B", "C")]);
    let map = mapping(&[("A", "r1"), ("B", "r1"), ("C", "r2")]);
    let reach = ReachabilityMatrix::full(["r1".into(), "r2".into()]);
    let plan = edge_cut(&spec, &map, &reach, "flow1").unwrap();

    assert_eq!(plan.fragments.len(), 2);
    let cuts = plan.cut_edges();
    assert_eq!(cuts.len(), 1);
    assert_eq!(cuts[0].from, "B");
    assert_eq!(cuts[0].to, "C");
    assert_eq!(cuts[0].direction, LinkDirection::Push);
    assert_eq!(cuts[0].link_id, "flow1-B-C");
    let r1 = &plan.fragments["r1"];
    assert_eq!(r1.processors, ["A", "B"].iter().map(|s| s.to_string()).collect());
    assert_eq!(r1.internal_edges, vec![EdgeSpec::new("A", "B")]);
    let r2 = &plan.fragments["r2"];
    assert_eq!(r2.processors, ["C"].iter().map(|s| s.to_string()).collect());
    assert!(r2.internal_edges.is_empty());
    assert_eq!(r2.cut_edges.len(), 1);
}

#[test]
fn edge_cut_single_resource_has_no_cuts() {
    let spec = flow(&["A", "B", "C"], &[("A", "B"), ("B", "C")]);
    let map = mapping(&[("A", "r1"), ("B", "r1"), ("C", "r1")]);
    let reach = ReachabilityMatrix::full(["r1".into()]);
    let plan = edge_cut(&spec, &map, &reach, "flow1").unwrap();
    assert_eq!(plan.fragments.len(), 1);
    assert!(plan.cut_edges().is_empty());
    assert_eq!(plan.fragments["r1"].internal_edges.len(), 2);
}

#[test]
fn edge_cut_falls_back_to_pull_when_downstream_unreachable() {
    // r2 cannot be reached from r1, but r1 is reachable from r2: pull.
    let spec = flow(&["B", "C"], &[("B", "C")]);
    let map = mapping(&[("B", "r1"), ("C", "r2")]);
    let mut reach = ReachabilityMatrix::new();
    reach.allow("r2", "r1");
    let plan = edge_cut(&spec, &map, &reach, "f").unwrap();
    assert_eq!(plan.cut_edges()[0].direction, LinkDirection::Pull);
}

#[test]
fn edge_cut_errors_when_neither_direction_reachable() {
    let spec = flow(&["B", "C"], &[("B", "C")]);
    let map = mapping(&[("B", "r1"), ("C", "r2")]);
    let reach = ReachabilityMatrix::new();
    match edge_cut(&spec, &map, &reach, "f") {
        Err(FlowError::UnschedulableLink { from, to }) => {
            assert_eq!((from.as_str(), to.as_str()), ("B", "C"));
        }
        other => panic!("expected unschedulable link, got {other:?}"),
    }
}

#[test]
fn graph_diff_moved_and_adjacent() {
    let spec = flow(&["A", "B", "C"], &[("A", "B"), ("B", "C")]);
    let old = mapping(&[("A", "r1"), ("B", "r1"), ("C", "r1")]);
    let new = mapping(&[("A", "r1"), ("B", "r2"), ("C", "r1")]);
    let ms = graph_diff(&spec, &old, &new).unwrap();
    assert_eq!(ms.moved, ["B"].iter().map(|s| s.to_string()).collect::<BTreeSet<_>>());
    assert_eq!(
        ms.affected,
        ["A", "B", "C"].iter().map(|s| s.to_string()).collect::<BTreeSet<_>>()
    );
}

#[test]
fn graph_diff_identity_is_empty() {
    let spec = flow(&["A", "B"], &[("A", "B")]);
    let m = mapping(&[("A", "r1"), ("B", "r2")]);
    let ms = graph_diff(&spec, &m, &m).unwrap();
    assert!(ms.moved.is_empty());
    assert!(ms.affected.is_empty());
}

#[test]
fn graph_diff_rejects_mismatched_processor_sets() {
    let spec = flow(&["A", "B"], &[("A", "B")]);
    let old = mapping(&[("A", "r1"), ("B", "r1")]);
    let mut extra = old.clone();
    extra.assignments.insert("Z".into(), "r1".into());
    assert!(matches!(
        graph_diff(&spec, &old, &extra),
        Err(FlowError::MappingMismatch)
    ));
}

// --- randomized properties against reference oracles ---

#[derive(Debug, Clone)]
struct RandomPlaced {
    spec: DataflowSpec,
    old: PlacementMapping,
    new: PlacementMapping,
}

fn arb_placed(max_nodes: usize, max_resources: usize) -> impl Strategy<Value = RandomPlaced> {
    (2usize..=max_nodes, 1usize..=max_resources).prop_flat_map(move |(n, r)| {
        let ids: Vec<String> = (0..n).map(|i| format!("p{i}")).collect();
        // Always keep p0 edge-free as the ingestion point so validation holds.
        let edges = proptest::collection::vec((1usize..n, 0usize..n), 0..n * 2).prop_map({
            let ids = ids.clone();
            move |pairs| {
                pairs
                    .into_iter()
                    .map(|(t, f)| EdgeSpec::new(ids[f].clone(), ids[t].clone()))
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect::<Vec<_>>()
            }
        });
        let placement = proptest::collection::vec(0usize..r, n);
        (edges, placement.clone(), placement).prop_map({
            let ids = ids.clone();
            move |(edges, old_idx, new_idx)| {
                let spec = DataflowSpec {
                    name: "rand".into(),
                    processors: ids.iter().map(|id| proc(id)).collect(),
                    edges,
                    qos: BTreeMap::new(),
                };
                let to_map = |idx: &[usize]| {
                    PlacementMapping::new(
                        ids.iter()
                            .zip(idx)
                            .map(|(id, ri)| (id.clone(), format!("r{ri}")))
                            .collect(),
                    )
                };
                RandomPlaced {
                    spec,
                    old: to_map(&old_idx),
                    new: to_map(&new_idx),
                }
            }
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    // Cut edges are exactly the edges whose endpoints land on different
    // resources (reference filter), and the fragment union reconstructs the
    // graph's node and edge multisets.
    #[test]
    fn edge_cut_matches_reference_filter(rp in arb_placed(50, 6)) {
        let resources: Vec<String> = rp.old.resources().into_iter().collect();
        let reach = ReachabilityMatrix::full(resources);
        let plan = edge_cut(&rp.spec, &rp.old, &reach, "f").unwrap();

        let expected_cut: BTreeSet<(String, String)> = rp
            .spec
            .edges
            .iter()
            .filter(|e| rp.old.assignments[&e.from] != rp.old.assignments[&e.to])
            .map(|e| (e.from.clone(), e.to.clone()))
            .collect();
        let actual_cut: BTreeSet<(String, String)> = plan
            .cut_edges()
            .iter()
            .map(|c| (c.from.clone(), c.to.clone()))
            .collect();
        prop_assert_eq!(&actual_cut, &expected_cut);

        // Union of fragments gives back every node exactly once.
        let mut nodes = BTreeSet::new();
        let mut node_total = 0usize;
        for f in plan.fragments.values() {
            node_total += f.processors.len();
            nodes.extend(f.processors.iter().cloned());
        }
        prop_assert_eq!(node_total, rp.spec.processors.len());
        prop_assert_eq!(nodes, rp.spec.processor_ids());

        // Internal edges + cut edges = all edges.
        let mut edges: Vec<(String, String)> = plan
            .fragments
            .values()
            .flat_map(|f| f.internal_edges.iter().map(|e| (e.from.clone(), e.to.clone())))
            .chain(actual_cut.iter().cloned())
            .collect();
        edges.sort();
        let mut all: Vec<(String, String)> = rp
            .spec
            .edges
            .iter()
            .map(|e| (e.from.clone(), e.to.clone()))
            .collect();
        all.sort();
        prop_assert_eq!(edges, all);

        // Each cut edge appears in exactly the two fragments it joins.
        for ce in plan.cut_edges() {
            let holders: Vec<&String> = plan
                .fragments
                .iter()
                .filter(|(_, f)| f.cut_edges.iter().any(|c| c.link_id == ce.link_id))
                .map(|(r, _)| r)
                .collect();
            prop_assert_eq!(holders.len(), 2);
        }
    }

    // graph_diff against a reference set comprehension.
    #[test]
    fn graph_diff_matches_reference(rp in arb_placed(8, 4)) {
        let ms = graph_diff(&rp.spec, &rp.old, &rp.new).unwrap();

        let moved_ref: BTreeSet<String> = rp
            .spec
            .processors
            .iter()
            .filter(|p| rp.old.assignments[&p.id] != rp.new.assignments[&p.id])
            .map(|p| p.id.clone())
            .collect();
        let mut affected_ref = moved_ref.clone();
        for e in &rp.spec.edges {
            if moved_ref.contains(&e.from) && e.from != e.to {
                affected_ref.insert(e.to.clone());
            }
            if moved_ref.contains(&e.to) && e.from != e.to {
                affected_ref.insert(e.from.clone());
            }
        }
        prop_assert_eq!(&ms.moved, &moved_ref);
        prop_assert_eq!(&ms.affected, &affected_ref);

        // Swapping old/new leaves the moved set unchanged.
        let swapped = graph_diff(&rp.spec, &rp.new, &rp.old).unwrap();
        prop_assert_eq!(ms.moved, swapped.moved);

        // Identity diff is empty.
        let same = graph_diff(&rp.spec, &rp.old, &rp.old).unwrap();
        prop_assert!(same.moved.is_empty() && same.affected.is_empty());
    }
}

#[test]
fn topo_order_linear_and_cyclic() {
    let spec = flow(&["c", "a", "b"], &[("a", "b"), ("b", "c")]);
    assert_eq!(spec.topo_order(), vec!["a", "b", "c"]);

    // Cycle broken lexicographically after the source.
    let cyc = flow(&["s", "y", "x"], &[("s", "x"), ("x", "y"), ("y", "x")]);
    let order = cyc.topo_order();
    assert_eq!(order[0], "s");
    assert_eq!(order.len(), 3);
}
