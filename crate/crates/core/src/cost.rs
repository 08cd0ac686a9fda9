//! Relative-arrangement dissimilarity between demonstrator and imitator
//! graphs, its smoothed differentiable variant, and the per-timestep
//! sequence cost.

use crate::graph::{
    build_graph, build_graph_filtered, select_anchor, CostConfig, GraphError, VisualEntityGraph,
};
use crate::trace::{EntityId, EntityTrace};
use nalgebra::Vector3;
use std::collections::BTreeMap;

fn check_same_structure(
    g_demo: &VisualEntityGraph,
    g_imit: &VisualEntityGraph,
) -> Result<(), GraphError> {
    if g_demo.nodes.len() != g_imit.nodes.len()
        || !g_demo.nodes.keys().eq(g_imit.nodes.keys())
    {
        return Err(GraphError::GraphMismatch("node id sets differ".into()));
    }
    if g_demo.edges.len() != g_imit.edges.len() {
        return Err(GraphError::GraphMismatch("edge counts differ".into()));
    }
    for (a, b) in g_demo.edges.iter().zip(&g_imit.edges) {
        if a.key() != b.key() || a.attended != b.attended || a.weight != b.weight {
            return Err(GraphError::GraphMismatch(format!(
                "edge {}-{} differs between graphs",
                a.a, a.b
            )));
        }
    }
    Ok(())
}

/// Sum over attended edges of w * ||(x_Di - x_Dj) - (x_Ii - x_Ij)||.
pub fn graph_cost(
    g_demo: &VisualEntityGraph,
    g_imit: &VisualEntityGraph,
) -> Result<f64, GraphError> {
    check_same_structure(g_demo, g_imit)?;
    let mut total = 0.0;
    for edge in g_demo.attended_edges() {
        let da = &g_demo.nodes[&edge.a].position;
        let db = &g_demo.nodes[&edge.b].position;
        let ia = &g_imit.nodes[&edge.a].position;
        let ib = &g_imit.nodes[&edge.b].position;
        total += edge.weight * ((da - db) - (ia - ib)).norm();
    }
    Ok(total)
}

/// Smoothed cost sum w * sqrt(gamma + ||r||^2) and its gradient with respect
/// to the imitator node positions.
pub fn smoothed_graph_cost(
    g_demo: &VisualEntityGraph,
    g_imit: &VisualEntityGraph,
    cfg: &CostConfig,
) -> Result<(f64, BTreeMap<EntityId, Vector3<f64>>), GraphError> {
    cfg.validate()?;
    check_same_structure(g_demo, g_imit)?;
    let gamma = cfg.smoothing_gamma;
    let mut total = 0.0;
    let mut grad: BTreeMap<EntityId, Vector3<f64>> = g_imit
        .nodes
        .keys()
        .map(|id| (id.clone(), Vector3::zeros()))
        .collect();
    for edge in g_demo.attended_edges() {
        let da = &g_demo.nodes[&edge.a].position;
        let db = &g_demo.nodes[&edge.b].position;
        let ia = &g_imit.nodes[&edge.a].position;
        let ib = &g_imit.nodes[&edge.b].position;
        let r = (da - db) - (ia - ib);
        let s = (gamma + r.norm_squared()).sqrt();
        total += edge.weight * s;
        // d r / d ia = -I, d r / d ib = +I
        let g = edge.weight / s * r;
        *grad.get_mut(&edge.a).unwrap() -= g;
        *grad.get_mut(&edge.b).unwrap() += g;
    }
    Ok((total, grad))
}

/// Per-timestep Eq.-style cost of an imitation trace against a demo trace.
///
/// The anchor is selected on the demonstrator timeline and mapped to the
/// imitator by id; imitator entities without a demo correspondent are
/// excluded as clutter.
pub fn sequence_cost(
    demo: &EntityTrace,
    imit: &EntityTrace,
    cfg: &CostConfig,
) -> Result<Vec<f64>, GraphError> {
    if demo.len() != imit.len() {
        return Err(GraphError::LengthMismatch(demo.len(), imit.len()));
    }
    let demo_ids = demo.entity_ids();
    let mut costs = Vec::with_capacity(demo.len());
    for t in 0..demo.len() {
        let anchor = select_anchor(demo, t, cfg)?;
        let g_demo = build_graph(demo, t, &anchor, cfg)?;
        let g_imit = build_graph_filtered(imit, t, &anchor, cfg, Some(&demo_ids))?;
        costs.push(graph_cost(&g_demo, &g_imit)?);
    }
    Ok(costs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Edge, EdgeKind, Node};
    use crate::trace::{ActorKind, EntityKind, EntityRecord, TraceFrame, TraceMeta};
    use approx::assert_relative_eq;

    fn node(id: &str, kind: EntityKind, p: [f64; 3], parent: Option<&str>) -> Node {
        Node {
            id: id.into(),
            kind,
            position: Vector3::new(p[0], p[1], p[2]),
            parent: parent.map(EntityId::from),
        }
    }

    fn graph(nodes: Vec<Node>, edges: Vec<Edge>) -> VisualEntityGraph {
        let mut edges = edges;
        edges.sort_by_key(|e| e.key());
        VisualEntityGraph {
            timestep: 0,
            nodes: nodes.into_iter().map(|n| (n.id.clone(), n)).collect(),
            edges,
        }
    }

    fn edge(a: &str, b: &str, kind: EdgeKind, w: f64) -> Edge {
        Edge { a: a.into(), b: b.into(), kind, weight: w, attended: true }
    }

    #[test]
    fn identical_graphs_cost_zero() {
        let g = graph(
            vec![
                node("a", EntityKind::Object, [0.3, -0.2, 0.9], None),
                node("hand", EntityKind::Hand, [0.1, 0.4, 0.0], None),
            ],
            vec![edge("a", "hand", EdgeKind::ObjectHand, 1.0)],
        );
        assert_eq!(graph_cost(&g, &g).unwrap(), 0.0);
    }

    #[test]
    fn single_edge_hand_value() {
        // demo nodes (0,0,0),(1,0,0); imit nodes (5,5,5),(5,2,5)
        // residual (-1,-3,0), cost sqrt(10)
        let demo = graph(
            vec![
                node("a", EntityKind::Object, [0.0, 0.0, 0.0], None),
                node("b", EntityKind::Object, [1.0, 0.0, 0.0], None),
            ],
            vec![edge("a", "b", EdgeKind::ObjectObject, 1.0)],
        );
        let imit = graph(
            vec![
                node("a", EntityKind::Object, [5.0, 5.0, 5.0], None),
                node("b", EntityKind::Object, [5.0, 2.0, 5.0], None),
            ],
            vec![edge("a", "b", EdgeKind::ObjectObject, 1.0)],
        );
        assert_relative_eq!(
            graph_cost(&demo, &imit).unwrap(),
            10f64.sqrt(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn two_edge_direction_change_weights() {
        // residual norms 1 (hand edge, w=50) and 2 (object edge, w=1) -> 52
        let demo = graph(
            vec![
                node("a", EntityKind::Object, [0.0, 0.0, 0.0], None),
                node("b", EntityKind::Object, [0.0, 0.0, 0.0], None),
                node("hand", EntityKind::Hand, [0.0, 0.0, 0.0], None),
            ],
            vec![
                edge("a", "hand", EdgeKind::ObjectHand, 50.0),
                edge("a", "b", EdgeKind::ObjectObject, 1.0),
            ],
        );
        let imit = graph(
            vec![
                node("a", EntityKind::Object, [0.0, 0.0, 0.0], None),
                node("b", EntityKind::Object, [0.0, 2.0, 0.0], None),
                node("hand", EntityKind::Hand, [1.0, 0.0, 0.0], None),
            ],
            vec![
                edge("a", "hand", EdgeKind::ObjectHand, 50.0),
                edge("a", "b", EdgeKind::ObjectObject, 1.0),
            ],
        );
        assert_relative_eq!(graph_cost(&demo, &imit).unwrap(), 52.0, epsilon = 1e-12);
    }

    #[test]
    fn mismatched_structure_is_an_error() {
        let g1 = graph(
            vec![node("a", EntityKind::Object, [0.0; 3], None)],
            vec![],
        );
        let g2 = graph(
            vec![node("b", EntityKind::Object, [0.0; 3], None)],
            vec![],
        );
        assert!(matches!(
            graph_cost(&g1, &g2),
            Err(GraphError::GraphMismatch(_))
        ));
    }

    #[test]
    fn smoothed_cost_values() {
        let cfg = CostConfig::default();
        let demo = graph(
            vec![
                node("a", EntityKind::Object, [0.0, 0.0, 0.0], None),
                node("b", EntityKind::Object, [1.0, 0.0, 0.0], None),
            ],
            vec![edge("a", "b", EdgeKind::ObjectObject, 1.0)],
        );
        // zero residual: sqrt(gamma)
        let (c0, _) = smoothed_graph_cost(&demo, &demo, &cfg).unwrap();
        assert_relative_eq!(c0, 1e-5f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(c0, 3.1623e-3, epsilon = 1e-7);

        // residual (-1,-3,0): sqrt(10 + gamma)
        let imit = graph(
            vec![
                node("a", EntityKind::Object, [5.0, 5.0, 5.0], None),
                node("b", EntityKind::Object, [5.0, 2.0, 5.0], None),
            ],
            vec![edge("a", "b", EdgeKind::ObjectObject, 1.0)],
        );
        let (c, _) = smoothed_graph_cost(&demo, &imit, &cfg).unwrap();
        assert_relative_eq!(c, 3.162280, epsilon = 1e-6);
        assert!(c >= graph_cost(&demo, &imit).unwrap());
    }

    #[test]
    fn smoothed_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let cfg = CostConfig {
            w_object_point: 1.0,
            ..CostConfig::default()
        };
        for _ in 0..20 {
            let mut rand_pos = || {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            };
            let nodes = |p: &mut dyn FnMut() -> [f64; 3]| {
                vec![
                    node("a", EntityKind::Object, p(), None),
                    node("b", EntityKind::Object, p(), None),
                    node("hand", EntityKind::Hand, p(), None),
                    node("a.p0", EntityKind::Point, p(), Some("a")),
                ]
            };
            let edges = vec![
                edge("a", "b", EdgeKind::ObjectObject, 1.0),
                edge("a", "hand", EdgeKind::ObjectHand, 1.0),
                edge("a", "a.p0", EdgeKind::ObjectPoint, 1.0),
            ];
            let demo = graph(nodes(&mut rand_pos), edges.clone());
            let imit = graph(nodes(&mut rand_pos), edges.clone());
            let (_, grad) = smoothed_graph_cost(&demo, &imit, &cfg).unwrap();
            let h = 1e-6;
            for id in imit.nodes.keys() {
                for axis in 0..3 {
                    let mut plus = imit.clone();
                    plus.nodes.get_mut(id).unwrap().position[axis] += h;
                    let mut minus = imit.clone();
                    minus.nodes.get_mut(id).unwrap().position[axis] -= h;
                    let (cp, _) = smoothed_graph_cost(&demo, &plus, &cfg).unwrap();
                    let (cm, _) = smoothed_graph_cost(&demo, &minus, &cfg).unwrap();
                    let fd = (cp - cm) / (2.0 * h);
                    let an = grad[id][axis];
                    let denom = fd.abs().max(an.abs()).max(1e-8);
                    assert!(
                        ((fd - an) / denom).abs() < 1e-4,
                        "gradient mismatch for {id} axis {axis}: fd={fd} an={an}"
                    );
                }
            }
        }
    }

    fn push_trace(offset: [f64; 3]) -> EntityTrace {
        let frames = (0..10)
            .map(|t| TraceFrame {
                t,
                entities: vec![
                    EntityRecord {
                        id: "block".into(),
                        kind: EntityKind::Object,
                        position: [
                            0.1 + 0.01 * t as f64 + offset[0],
                            0.2 + offset[1],
                            0.02 + offset[2],
                        ],
                        parent: None,
                        finger_gap: None,
                        occluded: false,
                    },
                    EntityRecord {
                        id: "hand".into(),
                        kind: EntityKind::Hand,
                        position: [
                            0.05 + 0.01 * t as f64 + offset[0],
                            0.2 + offset[1],
                            0.02 + offset[2],
                        ],
                        parent: None,
                        finger_gap: Some(0.08),
                        occluded: false,
                    },
                ],
            })
            .collect();
        EntityTrace::new(
            TraceMeta {
                length: 10,
                dt: 0.4,
                actor: ActorKind::Demonstrator,
                task: "test".into(),
            },
            frames,
        )
        .unwrap()
    }

    #[test]
    fn sequence_cost_identity_and_translation() {
        let cfg = CostConfig::default();
        let demo = push_trace([0.0; 3]);
        let zero = sequence_cost(&demo, &demo, &cfg).unwrap();
        assert!(zero.iter().all(|&c| c == 0.0));
        // a global shift of the imitation leaves relative arrangements intact
        let shifted = push_trace([0.3, -0.1, 0.05]);
        let costs = sequence_cost(&demo, &shifted, &cfg).unwrap();
        assert!(costs.iter().all(|&c| c.abs() < 1e-9));
    }

    #[test]
    fn sequence_cost_constant_offset_of_anchor() {
        let cfg = CostConfig::default();
        let demo = push_trace([0.0; 3]);
        let mut imit = demo.clone();
        for f in &mut imit.frames {
            for e in &mut f.entities {
                if e.id.as_str() == "block" {
                    e.position[1] += 0.1;
                }
            }
        }
        // single attended edge (block-hand, w=1) with a 0.1 m residual
        let costs = sequence_cost(&demo, &imit, &cfg).unwrap();
        for c in costs {
            assert_relative_eq!(c, 0.1, epsilon = 1e-12);
        }
    }

    #[test]
    fn sequence_cost_length_mismatch() {
        let cfg = CostConfig::default();
        let demo = push_trace([0.0; 3]);
        let mut imit = demo.clone();
        imit.frames.pop();
        imit.meta.length -= 1;
        assert!(matches!(
            sequence_cost(&demo, &imit, &cfg),
            Err(GraphError::LengthMismatch(10, 9))
        ));
    }
}
