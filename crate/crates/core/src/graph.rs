//! Visual entity graphs: typed nodes with 3D positions and the attended,
//! motion-saliency-driven edge set rooted at an anchor object.

use crate::trace::{EntityId, EntityKind, EntityTrace};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: EntityId,
    pub kind: EntityKind,
    pub position: Vector3<f64>,
    /// Owning object; required for point nodes, forbidden otherwise.
    pub parent: Option<EntityId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EdgeKind {
    ObjectObject,
    ObjectHand,
    ObjectPoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub a: EntityId,
    pub b: EntityId,
    pub kind: EdgeKind,
    /// Tied per-kind weight.
    pub weight: f64,
    pub attended: bool,
}

impl Edge {
    /// Canonical undirected key: sorted endpoint pair plus kind.
    pub fn key(&self) -> (EntityId, EntityId, EdgeKind) {
        let (x, y) = if self.a <= self.b {
            (self.a.clone(), self.b.clone())
        } else {
            (self.b.clone(), self.a.clone())
        };
        (x, y, self.kind)
    }
}

/// One timestep of the hierarchical scene graph: G^t = {V^t, E^t}.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualEntityGraph {
    pub timestep: usize,
    pub nodes: BTreeMap<EntityId, Node>,
    pub edges: Vec<Edge>,
}

impl VisualEntityGraph {
    pub fn attended_edges(&self) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(|e| e.attended)
    }
}

/// Tied per-edge-type weights plus the smoothing and motion-saliency knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    pub w_object_hand: f64,
    pub w_object_object: f64,
    pub w_object_point: f64,
    pub smoothing_gamma: f64,
    /// Displacement (meters) over the motion window that counts as motion.
    pub motion_threshold: f64,
    /// Trailing window length in frames.
    pub motion_window: usize,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            w_object_hand: 1.0,
            w_object_object: 1.0,
            w_object_point: 0.0,
            smoothing_gamma: 1e-5,
            motion_threshold: 0.005,
            motion_window: 3,
        }
    }
}

impl CostConfig {
    pub fn weight_for(&self, kind: EdgeKind) -> f64 {
        match kind {
            EdgeKind::ObjectObject => self.w_object_object,
            EdgeKind::ObjectHand => self.w_object_hand,
            EdgeKind::ObjectPoint => self.w_object_point,
        }
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        let ok = self.w_object_hand >= 0.0
            && self.w_object_object >= 0.0
            && self.w_object_point >= 0.0
            && self.smoothing_gamma > 0.0
            && self.motion_threshold > 0.0
            && self.motion_window >= 1;
        if ok {
            Ok(())
        } else {
            Err(GraphError::InvalidConfig)
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("trace has no object entities")]
    NoObjects,
    #[error("entity {0} missing at timestep {1}")]
    MissingEntity(EntityId, usize),
    #[error("graph mismatch: {0}")]
    GraphMismatch(String),
    #[error("trace length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid cost config")]
    InvalidConfig,
}

fn pos(e: &crate::trace::EntityRecord) -> Vector3<f64> {
    Vector3::new(e.position[0], e.position[1], e.position[2])
}

/// Displacement of an object over the trailing motion window ending at `t`.
fn trailing_displacement(trace: &EntityTrace, id: &EntityId, t: usize, window: usize) -> f64 {
    let start = t.saturating_sub(window);
    match (trace.frame(start).entity(id), trace.frame(t).entity(id)) {
        (Some(a), Some(b)) => (pos(b) - pos(a)).norm(),
        _ => 0.0,
    }
}

/// Picks the anchor object at timestep `t` by motion saliency: the object in
/// motion at `t`, else the first object to move in the future, else the
/// object nearest the hand. Ties break on lexicographically smallest id.
pub fn select_anchor(
    trace: &EntityTrace,
    t: usize,
    cfg: &CostConfig,
) -> Result<EntityId, GraphError> {
    cfg.validate()?;
    let objects: BTreeSet<EntityId> = trace.object_ids();
    if objects.is_empty() {
        return Err(GraphError::NoObjects);
    }
    // moving now, then the closest-in-the-future mover
    for t_probe in t..trace.len() {
        for id in &objects {
            if trailing_displacement(trace, id, t_probe, cfg.motion_window) > cfg.motion_threshold
            {
                return Ok(id.clone());
            }
        }
    }
    // all static: nearest to the hand at t, falling back to smallest id
    let frame = trace.frame(t);
    if let Some(hand) = frame.hand() {
        let hand_pos = pos(hand);
        let mut best: Option<(f64, &EntityId)> = None;
        for id in &objects {
            if let Some(obj) = frame.entity(id) {
                let d = (pos(obj) - hand_pos).norm();
                if best.map_or(true, |(bd, bid)| d < bd || (d == bd && id < bid)) {
                    best = Some((d, id));
                }
            }
        }
        if let Some((_, id)) = best {
            return Ok(id.clone());
        }
    }
    Ok(objects.iter().next().unwrap().clone())
}

/// Builds the VEG at timestep `t` rooted at `anchor`. When `allowed` is
/// given, entities outside it (clutter without a demo correspondent) are
/// excluded entirely.
pub fn build_graph_filtered(
    trace: &EntityTrace,
    t: usize,
    anchor: &EntityId,
    cfg: &CostConfig,
    allowed: Option<&BTreeSet<EntityId>>,
) -> Result<VisualEntityGraph, GraphError> {
    cfg.validate()?;
    let frame = trace.frame(t);
    let keep = |id: &EntityId| allowed.map_or(true, |set| set.contains(id));
    match frame.entity(anchor) {
        Some(e) if e.kind == EntityKind::Object && keep(anchor) => {}
        _ => return Err(GraphError::MissingEntity(anchor.clone(), t)),
    }

    let mut nodes = BTreeMap::new();
    for e in &frame.entities {
        if !keep(&e.id) {
            continue;
        }
        // a point whose parent is clutter goes with it
        if let Some(parent) = &e.parent {
            if !keep(parent) {
                continue;
            }
        }
        nodes.insert(
            e.id.clone(),
            Node {
                id: e.id.clone(),
                kind: e.kind,
                position: pos(e),
                parent: e.parent.clone(),
            },
        );
    }

    let mut edges = Vec::new();
    for node in nodes.values() {
        if node.id == *anchor {
            continue;
        }
        let kind = match node.kind {
            EntityKind::Object => EdgeKind::ObjectObject,
            EntityKind::Hand => EdgeKind::ObjectHand,
            EntityKind::Point => {
                if node.parent.as_ref() != Some(anchor) {
                    continue;
                }
                EdgeKind::ObjectPoint
            }
        };
        edges.push(Edge {
            a: anchor.clone(),
            b: node.id.clone(),
            kind,
            weight: cfg.weight_for(kind),
            attended: true,
        });
    }
    edges.sort_by_key(|e| e.key());
    Ok(VisualEntityGraph { timestep: t, nodes, edges })
}

pub fn build_graph(
    trace: &EntityTrace,
    t: usize,
    anchor: &EntityId,
    cfg: &CostConfig,
) -> Result<VisualEntityGraph, GraphError> {
    build_graph_filtered(trace, t, anchor, cfg, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{ActorKind, EntityRecord, TraceFrame, TraceMeta};

    fn rec(id: &str, kind: EntityKind, pos: [f64; 3], parent: Option<&str>) -> EntityRecord {
        EntityRecord {
            id: id.into(),
            kind,
            position: pos,
            parent: parent.map(EntityId::from),
            finger_gap: (kind == EntityKind::Hand).then_some(0.08),
            occluded: false,
        }
    }

    fn trace_from(frames: Vec<TraceFrame>) -> EntityTrace {
        let meta = TraceMeta {
            length: frames.len(),
            dt: 0.4,
            actor: ActorKind::Demonstrator,
            task: "test".into(),
        };
        EntityTrace::new(meta, frames).unwrap()
    }

    fn frame(t: usize, a: [f64; 3], b: [f64; 3], hand: [f64; 3]) -> TraceFrame {
        TraceFrame {
            t,
            entities: vec![
                rec("a", EntityKind::Object, a, None),
                rec("b", EntityKind::Object, b, None),
                rec("hand", EntityKind::Hand, hand, None),
            ],
        }
    }

    #[test]
    fn moving_object_is_anchor() {
        let frames = (0..6)
            .map(|t| {
                frame(
                    t,
                    [0.1 + 0.01 * t as f64, 0.0, 0.0],
                    [0.4, 0.0, 0.0],
                    [0.0, 0.0, 0.0],
                )
            })
            .collect();
        let trace = trace_from(frames);
        let cfg = CostConfig::default();
        assert_eq!(select_anchor(&trace, 4, &cfg).unwrap(), EntityId::new("a"));
    }

    #[test]
    fn future_mover_is_anchor_while_all_static() {
        // static until t=5, then "a" moves
        let frames = (0..12)
            .map(|t| {
                let x = if t > 5 { 0.1 + 0.02 * (t - 5) as f64 } else { 0.1 };
                frame(t, [x, 0.0, 0.0], [0.4, 0.0, 0.0], [0.0, 0.0, 0.0])
            })
            .collect();
        let trace = trace_from(frames);
        let cfg = CostConfig::default();
        assert_eq!(select_anchor(&trace, 0, &cfg).unwrap(), EntityId::new("a"));
    }

    #[test]
    fn fallback_anchor_is_nearest_to_hand() {
        // everything static the whole trace; "b" sits next to the hand
        let frames = (0..5)
            .map(|t| frame(t, [0.5, 0.0, 0.0], [0.1, 0.0, 0.0], [0.08, 0.0, 0.0]))
            .collect();
        let trace = trace_from(frames);
        let cfg = CostConfig::default();
        let anchor = select_anchor(&trace, 2, &cfg).unwrap();
        // brute-force distance scan oracle
        let f = trace.frame(2);
        let hand = f.hand().unwrap().position;
        let mut best: Option<(f64, EntityId)> = None;
        for o in f.objects() {
            let d = (Vector3::from(o.position) - Vector3::from(hand)).norm();
            if best.as_ref().map_or(true, |(bd, _)| d < *bd) {
                best = Some((d, o.id.clone()));
            }
        }
        assert_eq!(anchor, best.unwrap().1);
        assert_eq!(anchor, EntityId::new("b"));
    }

    #[test]
    fn no_objects_is_an_error() {
        let frames = vec![TraceFrame {
            t: 0,
            entities: vec![rec("hand", EntityKind::Hand, [0.0; 3], None)],
        }];
        let trace = trace_from(frames);
        assert_eq!(
            select_anchor(&trace, 0, &CostConfig::default()),
            Err(GraphError::NoObjects)
        );
    }

    #[test]
    fn attended_edge_count_follows_the_rule() {
        // 3 objects, 1 hand, 8 anchor points -> (3-1) + 1 + 8 = 11 edges
        let mut entities = vec![
            rec("a", EntityKind::Object, [0.1, 0.0, 0.0], None),
            rec("b", EntityKind::Object, [0.2, 0.0, 0.0], None),
            rec("c", EntityKind::Object, [0.3, 0.0, 0.0], None),
            rec("hand", EntityKind::Hand, [0.0, 0.0, 0.0], None),
        ];
        for k in 0..8 {
            entities.push(rec(
                &format!("a.p{k}"),
                EntityKind::Point,
                [0.1, 0.01 * k as f64, 0.0],
                Some("a"),
            ));
        }
        // points of a non-anchor object get nodes but no edges
        entities.push(rec("b.p0", EntityKind::Point, [0.2, 0.01, 0.0], Some("b")));
        let trace = trace_from(vec![TraceFrame { t: 0, entities }]);
        let g = build_graph(&trace, 0, &EntityId::new("a"), &CostConfig::default()).unwrap();
        assert_eq!(g.attended_edges().count(), 11);
        assert!(g.nodes.contains_key(&EntityId::new("b.p0")));
    }

    #[test]
    fn clutter_is_excluded_by_the_filter() {
        let entities = vec![
            rec("a", EntityKind::Object, [0.1, 0.0, 0.0], None),
            rec("b", EntityKind::Object, [0.2, 0.0, 0.0], None),
            rec("distractor", EntityKind::Object, [0.9, 0.9, 0.0], None),
            rec("hand", EntityKind::Hand, [0.0, 0.0, 0.0], None),
        ];
        let trace = trace_from(vec![TraceFrame { t: 0, entities }]);
        let allowed: BTreeSet<EntityId> =
            ["a", "b", "hand"].iter().map(|s| EntityId::from(*s)).collect();
        let cfg = CostConfig::default();
        let g = build_graph_filtered(&trace, 0, &EntityId::new("a"), &cfg, Some(&allowed)).unwrap();
        assert!(!g.nodes.contains_key(&EntityId::new("distractor")));
        assert_eq!(g.attended_edges().count(), 2);
    }

    #[test]
    fn single_object_graph_has_no_edges() {
        let entities = vec![rec("a", EntityKind::Object, [0.1, 0.0, 0.0], None)];
        let trace = trace_from(vec![TraceFrame { t: 0, entities }]);
        let g = build_graph(&trace, 0, &EntityId::new("a"), &CostConfig::default()).unwrap();
        assert!(g.edges.is_empty());
    }

    #[test]
    fn missing_anchor_is_an_error() {
        let entities = vec![rec("a", EntityKind::Object, [0.1, 0.0, 0.0], None)];
        let trace = trace_from(vec![TraceFrame { t: 0, entities }]);
        assert!(matches!(
            build_graph(&trace, 0, &EntityId::new("z"), &CostConfig::default()),
            Err(GraphError::MissingEntity(_, 0))
        ));
    }
}
