//! Deterministic kinematic tabletop world with a configurable noisy
//! detector, standing in for the perception stack: gain-scaled effector
//! motion, grasp/release with rigid attachment, quasi-static disk pushing,
//! and per-frame entity detection with Gaussian noise and occlusion holds.

use crate::cost::sequence_cost;
use crate::demo::{clone_gripper, GripperCloneConfig};
use crate::graph::{select_anchor, CostConfig, GraphError};
use crate::policy::{featurize, FeatureSpec, LinearGaussianPolicy, PolicyError};
use crate::trace::{
    ActorKind, EntityId, EntityKind, EntityRecord, EntityTrace, TraceError, TraceFrame, TraceMeta,
};
use nalgebra::{DVector, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("demo trace has no hand entity")]
    MissingHand,
    #[error("scene error: {0}")]
    Scene(String),
}

/// Scales raw policy actions into world displacements and bounds per-step
/// motion and grasping geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerGains {
    /// Meters of displacement per raw action unit.
    pub xyz: f64,
    /// Radians per raw action unit.
    pub rot: f64,
    /// Per-axis displacement clip per step, meters.
    pub step_clip_xyz: f64,
    pub step_clip_yaw: f64,
    pub effector_radius: f64,
    pub grasp_radius: f64,
    /// Vertical alignment tolerance for grasping, meters.
    pub vertical_tol: f64,
    pub gap_open: f64,
    pub gap_closed: f64,
    pub gap_max: f64,
}

impl Default for ControllerGains {
    fn default() -> Self {
        ControllerGains {
            xyz: 0.001,
            rot: 0.02,
            step_clip_xyz: 0.05,
            step_clip_yaw: 0.3,
            effector_radius: 0.02,
            grasp_radius: 0.02,
            vertical_tol: 0.015,
            gap_open: 0.08,
            gap_closed: 0.01,
            gap_max: 0.10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action {
    /// Raw [dx, dy, dz, dyaw]; scaled by gains and clipped before applying.
    pub du: [f64; 4],
    pub grip_close: bool,
}

impl Action {
    pub const ZERO: Action = Action { du: [0.0; 4], grip_close: false };

    pub fn from_vector(u: &DVector<f64>, grip_close: bool) -> Self {
        Action { du: [u[0], u[1], u[2], u[3]], grip_close }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Effector {
    pub position: Vector3<f64>,
    pub yaw: f64,
    pub gripper_gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimObject {
    pub id: EntityId,
    pub position: Vector3<f64>,
    pub yaw: f64,
    pub radius: f64,
    pub height: f64,
    /// Fixed scenery (e.g. a target ring): never moves, never collides.
    pub fixed: bool,
    pub attached: bool,
    /// Rigid offset to the effector while attached: translation in the
    /// effector's yaw frame plus a yaw offset.
    pub attach_offset: (Vector3<f64>, f64),
}

impl SimObject {
    pub fn top(&self) -> f64 {
        self.position.z + self.height / 2.0
    }

    pub fn xy(&self) -> Vector2<f64> {
        self.position.xy()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub effector: Effector,
    pub objects: Vec<SimObject>,
    pub table_height: f64,
}

impl WorldState {
    pub fn object(&self, id: &EntityId) -> Option<&SimObject> {
        self.objects.iter().find(|o| &o.id == id)
    }

    pub fn from_scene(scene: &Scene) -> Result<Self, SimError> {
        let effector = Effector {
            position: Vector3::from(scene.effector.position),
            yaw: scene.effector.yaw,
            gripper_gap: scene.effector.gripper_gap,
        };
        let mut objects = Vec::new();
        for o in &scene.objects {
            let mut obj = SimObject {
                id: EntityId::new(&o.id),
                position: Vector3::from(o.position),
                yaw: o.yaw,
                radius: o.radius,
                height: o.height,
                fixed: o.fixed,
                attached: o.attached,
                attach_offset: (Vector3::zeros(), 0.0),
            };
            if o.attached {
                obj.attach_offset = attachment_offset(&effector, &obj);
            }
            objects.push(obj);
        }
        Ok(WorldState { effector, objects, table_height: scene.table_height })
    }
}

fn rot_z(yaw: f64, v: &Vector3<f64>) -> Vector3<f64> {
    let (s, c) = yaw.sin_cos();
    Vector3::new(c * v.x - s * v.y, s * v.x + c * v.y, v.z)
}

fn attachment_offset(effector: &Effector, obj: &SimObject) -> (Vector3<f64>, f64) {
    let delta = obj.position - effector.position;
    (rot_z(-effector.yaw, &delta), obj.yaw - effector.yaw)
}

/// Resting height for an object: table or the top of the highest object
/// whose footprint contains its center.
fn support_height(objects: &[SimObject], idx: usize, table: f64) -> f64 {
    let me = &objects[idx];
    let mut base = table;
    for (j, o) in objects.iter().enumerate() {
        if j == idx {
            continue;
        }
        if (o.xy() - me.xy()).norm() < o.radius && o.top() <= me.position.z + me.height {
            base = base.max(o.top());
        }
    }
    base + me.height / 2.0
}

/// Advances the world by one control step.
pub fn step(state: &WorldState, action: &Action, gains: &ControllerGains) -> WorldState {
    let mut next = state.clone();
    let clip = |v: f64, lim: f64| v.clamp(-lim, lim);
    let d = Vector3::new(
        clip(action.du[0] * gains.xyz, gains.step_clip_xyz),
        clip(action.du[1] * gains.xyz, gains.step_clip_xyz),
        clip(action.du[2] * gains.xyz, gains.step_clip_xyz),
    );
    let dyaw = clip(action.du[3] * gains.rot, gains.step_clip_yaw);
    next.effector.position += d;
    next.effector.position.z = next.effector.position.z.max(next.table_height);
    next.effector.yaw += dyaw;
    next.effector.gripper_gap = if action.grip_close {
        gains.gap_closed
    } else {
        gains.gap_open
    };

    // release before grasp so a single step cannot re-grab
    if !action.grip_close {
        for i in 0..next.objects.len() {
            if next.objects[i].attached {
                next.objects[i].attached = false;
                let z = support_height(&next.objects, i, next.table_height);
                next.objects[i].position.z = z;
            }
        }
    } else if !next.objects.iter().any(|o| o.attached) {
        // grasp the nearest centered, vertically aligned free object
        let eff = next.effector.clone();
        let mut best: Option<(f64, usize)> = None;
        for (i, o) in next.objects.iter().enumerate() {
            if o.fixed {
                continue;
            }
            let dist = (o.xy() - eff.position.xy()).norm();
            if dist < gains.grasp_radius && (eff.position.z - o.position.z).abs() <= gains.vertical_tol
            {
                if best.map_or(true, |(bd, _)| dist < bd) {
                    best = Some((dist, i));
                }
            }
        }
        if let Some((_, i)) = best {
            next.objects[i].attached = true;
            let off = attachment_offset(&eff, &next.objects[i]);
            next.objects[i].attach_offset = off;
        }
    }

    // attached objects follow the effector rigidly
    let eff = next.effector.clone();
    for o in &mut next.objects {
        if o.attached {
            o.position = eff.position + rot_z(eff.yaw, &o.attach_offset.0);
            o.yaw = eff.yaw + o.attach_offset.1;
        }
    }

    // quasi-static disk pushing by the effector
    for i in 0..next.objects.len() {
        let o = &next.objects[i];
        if o.fixed || o.attached {
            continue;
        }
        let delta = o.xy() - eff.position.xy();
        let dist = delta.norm();
        let contact = gains.effector_radius + o.radius;
        let vertical_overlap = (eff.position.z - o.position.z).abs() <= o.height / 2.0;
        // inside the straddle zone the fingers surround the object
        if vertical_overlap && dist < contact && dist >= gains.grasp_radius {
            let normal = delta / dist;
            let push = contact - dist;
            next.objects[i].position.x += normal.x * push;
            next.objects[i].position.y += normal.y * push;
            let z = support_height(&next.objects, i, next.table_height);
            next.objects[i].position.z = z;
        }
    }

    // resolve object-object footprint overlaps
    for _ in 0..8 {
        let mut moved = false;
        for i in 0..next.objects.len() {
            for j in (i + 1)..next.objects.len() {
                let (a, b) = (&next.objects[i], &next.objects[j]);
                if a.fixed || b.fixed {
                    continue;
                }
                let band = (a.height + b.height) / 2.0;
                if (a.position.z - b.position.z).abs() >= band {
                    continue;
                }
                let delta = b.xy() - a.xy();
                let dist = delta.norm();
                let contact = a.radius + b.radius;
                if dist >= contact {
                    continue;
                }
                let normal = if dist > 1e-12 {
                    delta / dist
                } else {
                    Vector2::new(1.0, 0.0)
                };
                let depth = contact - dist;
                // attached objects are rigid; shift the free one
                let (wa, wb) = match (a.attached, b.attached) {
                    (true, true) => continue,
                    (true, false) => (0.0, 1.0),
                    (false, true) => (1.0, 0.0),
                    (false, false) => (0.5, 0.5),
                };
                next.objects[i].position.x -= normal.x * depth * wa;
                next.objects[i].position.y -= normal.y * depth * wa;
                next.objects[j].position.x += normal.x * depth * wb;
                next.objects[j].position.y += normal.y * depth * wb;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }

    next
}

/// Simulated perception noise model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Gaussian position noise std, meters.
    pub sigma: f64,
    /// Per-entity-frame occlusion probability.
    pub p_occlusion: f64,
    pub points_per_object: usize,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig { sigma: 0.002, p_occlusion: 0.0, points_per_object: 8, seed: 0 }
    }
}

/// Emits trace frames from world states. Body-frame point samples are fixed
/// for the lifetime of the detector so demonstrator and imitator share the
/// same point correspondence.
#[derive(Debug, Clone)]
pub struct Detector {
    pub cfg: DetectorConfig,
    body_points: BTreeMap<EntityId, Vec<Vector3<f64>>>,
    last_seen: HashMap<EntityId, [f64; 3]>,
    rng: ChaCha8Rng,
}

impl Detector {
    /// Samples fresh body-frame points uniformly from each object footprint.
    pub fn new(state: &WorldState, cfg: DetectorConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut body_points = BTreeMap::new();
        for o in &state.objects {
            let mut pts = Vec::with_capacity(cfg.points_per_object);
            for _ in 0..cfg.points_per_object {
                // uniform in the disk, on the top face
                let r = o.radius * rng.gen::<f64>().sqrt();
                let theta = rng.gen::<f64>() * std::f64::consts::TAU;
                pts.push(Vector3::new(r * theta.cos(), r * theta.sin(), o.height / 2.0));
            }
            body_points.insert(o.id.clone(), pts);
        }
        Detector { cfg, body_points, last_seen: HashMap::new(), rng }
    }

    pub fn with_body_points(
        cfg: DetectorConfig,
        body_points: BTreeMap<EntityId, Vec<Vector3<f64>>>,
    ) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Detector { cfg, body_points, last_seen: HashMap::new(), rng }
    }

    pub fn body_points(&self) -> &BTreeMap<EntityId, Vec<Vector3<f64>>> {
        &self.body_points
    }

    /// Recovers shared body-frame point samples from a demo trace, assuming
    /// the demo objects start at yaw zero in their first frame.
    pub fn body_points_from_trace(demo: &EntityTrace) -> BTreeMap<EntityId, Vec<Vector3<f64>>> {
        let mut map: BTreeMap<EntityId, Vec<Vector3<f64>>> = BTreeMap::new();
        let frame = demo.frame(0);
        for o in frame.objects() {
            let center = Vector3::from(o.position);
            let pts = frame
                .points_of(&o.id)
                .map(|p| Vector3::from(p.position) - center)
                .collect();
            map.insert(o.id.clone(), pts);
        }
        map
    }

    fn report(&mut self, id: &EntityId, true_pos: Vector3<f64>) -> ([f64; 3], bool) {
        let noise = Normal::new(0.0, self.cfg.sigma.max(0.0)).unwrap();
        let noisy = [
            true_pos.x + noise.sample(&mut self.rng),
            true_pos.y + noise.sample(&mut self.rng),
            true_pos.z + noise.sample(&mut self.rng),
        ];
        let occluded = self.rng.gen::<f64>() < self.cfg.p_occlusion;
        if occluded {
            if let Some(&held) = self.last_seen.get(id) {
                return (held, true);
            }
            // no history yet: report the detection but mark it occluded
            self.last_seen.insert(id.clone(), noisy);
            return (noisy, true);
        }
        self.last_seen.insert(id.clone(), noisy);
        (noisy, false)
    }

    /// Detects all entities in the state: hand, objects, and per-object
    /// points obtained by transforming the fixed body-frame samples through
    /// the current pose.
    pub fn detect(&mut self, state: &WorldState, t: usize) -> TraceFrame {
        let mut entities = Vec::new();
        let hand_id = EntityId::new("hand");
        let (pos, occluded) = self.report(&hand_id, state.effector.position);
        entities.push(EntityRecord {
            id: hand_id,
            kind: EntityKind::Hand,
            position: pos,
            parent: None,
            finger_gap: Some(state.effector.gripper_gap),
            occluded,
        });
        for o in &state.objects {
            let (pos, occluded) = self.report(&o.id, o.position);
            entities.push(EntityRecord {
                id: o.id.clone(),
                kind: EntityKind::Object,
                position: pos,
                parent: None,
                finger_gap: None,
                occluded,
            });
            if let Some(pts) = self.body_points.get(&o.id).cloned() {
                for (k, body) in pts.iter().enumerate() {
                    let world = o.position + rot_z(o.yaw, body);
                    let pid = EntityId::new(format!("{}.p{}", o.id, k));
                    let (pos, occluded) = self.report(&pid, world);
                    entities.push(EntityRecord {
                        id: pid,
                        kind: EntityKind::Point,
                        position: pos,
                        parent: Some(o.id.clone()),
                        finger_gap: None,
                        occluded,
                    });
                }
            }
        }
        TraceFrame { t, entities }
    }
}

/// JSON scene description: initial layout plus task target poses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub table_height: f64,
    pub effector: SceneEffector,
    pub objects: Vec<SceneObject>,
    /// Goal pose per task object, expressed relative to a reference object
    /// so start perturbations move the goal consistently.
    #[serde(default)]
    pub targets: BTreeMap<String, TargetPose>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneEffector {
    pub position: [f64; 3],
    #[serde(default)]
    pub yaw: f64,
    pub gripper_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneObject {
    pub id: String,
    pub position: [f64; 3],
    #[serde(default)]
    pub yaw: f64,
    pub radius: f64,
    pub height: f64,
    #[serde(default)]
    pub fixed: bool,
    #[serde(default)]
    pub attached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetPose {
    pub relative_to: String,
    pub offset: [f64; 3],
    #[serde(default)]
    pub yaw: Option<f64>,
}

/// Everything a rollout needs besides the policy: demo-derived anchors and
/// body points plus the config bundle.
#[derive(Debug, Clone)]
pub struct RolloutContext {
    pub gains: ControllerGains,
    pub detector: DetectorConfig,
    pub cost: CostConfig,
    pub feature: FeatureSpec,
    pub gripper: GripperCloneConfig,
    pub anchors: Vec<EntityId>,
    pub body_points: BTreeMap<EntityId, Vec<Vector3<f64>>>,
    pub task: String,
}

impl RolloutContext {
    pub fn new(
        demo: &EntityTrace,
        gains: ControllerGains,
        detector: DetectorConfig,
        cost: CostConfig,
        gripper: GripperCloneConfig,
    ) -> Result<Self, SimError> {
        let anchors = (0..demo.len())
            .map(|t| select_anchor(demo, t, &cost))
            .collect::<Result<Vec<_>, _>>()?;
        let n_total = demo.object_ids().len();
        Ok(RolloutContext {
            gains,
            detector,
            cost,
            feature: FeatureSpec::new(n_total),
            gripper,
            anchors,
            body_points: Detector::body_points_from_trace(demo),
            task: demo.meta.task.clone(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub trace: EntityTrace,
    /// Pre-episode observation (not part of the trace).
    pub initial_frame: TraceFrame,
    /// Per-timestep exact relative-arrangement cost against the demo.
    pub costs: Vec<f64>,
    /// Featurized states, length T+1 (terminal state reuses the last demo
    /// frame as its reference).
    pub states: Vec<DVector<f64>>,
    /// Raw sampled actions, length T.
    pub actions: Vec<DVector<f64>>,
    pub commanded_grip: Vec<bool>,
    pub final_state: WorldState,
}

impl Rollout {
    pub fn total_cost(&self) -> f64 {
        self.costs.iter().sum()
    }
}

/// Runs the policy for the demo's horizon: featurize, act, clone the demo
/// gripper command, step, detect. With `deterministic` the policy mean is
/// used instead of sampling.
pub fn rollout(
    initial: &WorldState,
    policy: &LinearGaussianPolicy,
    demo: &EntityTrace,
    ctx: &RolloutContext,
    seed: u64,
    deterministic: bool,
) -> Result<Rollout, SimError> {
    let horizon = demo.len();
    if policy.horizon() != horizon {
        return Err(PolicyError::DimensionMismatch(format!(
            "policy horizon {} != demo length {}",
            policy.horizon(),
            horizon
        ))
        .into());
    }
    let grip = clone_gripper(demo, &ctx.gripper).map_err(|_| SimError::MissingHand)?;

    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let det_cfg = DetectorConfig { seed: master.gen(), ..ctx.detector.clone() };
    let mut policy_rng = ChaCha8Rng::seed_from_u64(master.gen());
    let mut detector = Detector::with_body_points(det_cfg, ctx.body_points.clone());

    let mut state = initial.clone();
    let mut obs = detector.detect(&state, 0);
    let initial_frame = obs.clone();
    let mut frames = Vec::with_capacity(horizon);
    let mut states = Vec::with_capacity(horizon + 1);
    let mut actions = Vec::with_capacity(horizon);


    for t in 0..horizon {
        let x = featurize(
            &obs,
            demo.frame(t),
            std::slice::from_ref(&ctx.anchors[t]),
            &[state.effector.yaw],
            &ctx.feature,
        )?;
        let mut u = if deterministic {
            policy.mean(t, &x)
        } else {
            policy.sample(t, &x, &mut policy_rng)
        };
        // record the executed (clipped) action so the fitted dynamics and
        // the path-integral update see what actually moved the world
        let clip_xyz = ctx.gains.step_clip_xyz / ctx.gains.xyz;
        let clip_yaw = ctx.gains.step_clip_yaw / ctx.gains.rot;
        for i in 0..3 {
            u[i] = u[i].clamp(-clip_xyz, clip_xyz);
        }
        u[3] = u[3].clamp(-clip_yaw, clip_yaw);
        states.push(x);
        let action = Action::from_vector(&u, grip[t]);
        actions.push(u);
        state = step(&state, &action, &ctx.gains);
        obs = detector.detect(&state, t);
        frames.push(obs.clone());
    }
    let x_final = featurize(
        &obs,
        demo.frame(horizon - 1),
        std::slice::from_ref(&ctx.anchors[horizon - 1]),
        &[state.effector.yaw],
        &ctx.feature,
    )?;
    states.push(x_final);

    let meta = TraceMeta {
        length: horizon,
        dt: demo.meta.dt,
        actor: ActorKind::Imitator,
        task: ctx.task.clone(),
    };
    let trace = EntityTrace::new(meta, frames)?;
    let costs = sequence_cost(demo, &trace, &ctx.cost)?;
    Ok(Rollout {
        trace,
        initial_frame,
        costs,
        states,
        actions,
        commanded_grip: grip,
        final_state: state,
    })
}
