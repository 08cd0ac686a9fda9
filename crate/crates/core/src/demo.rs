//! Scripted demonstrators: one hand-scripted, noiseless demonstration per
//! task, plus the gripper behavioral-cloning threshold rule and the task
//! success metrics.

use crate::graph::CostConfig;
use crate::sim::{
    step, Action, ControllerGains, Detector, DetectorConfig, Scene, SimError, WorldState,
};
use crate::trace::{ActorKind, EntityId, EntityTrace, TraceError, TraceFrame, TraceMeta};
use nalgebra::{DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("demo script for `{task}` missed its own tolerance (error {error})")]
    DemoFailed { task: String, error: f64 },
    #[error("demo trace has a frame without a hand finger gap")]
    MissingHand,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

/// Finger-gap threshold for commanding the imitator gripper.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GripperCloneConfig {
    pub theta: f64,
}

impl Default for GripperCloneConfig {
    fn default() -> Self {
        GripperCloneConfig { theta: 0.03 }
    }
}

/// Element t is true (commanded closed) iff the demo finger gap at t is
/// below the threshold.
pub fn clone_gripper(demo: &EntityTrace, cfg: &GripperCloneConfig) -> Result<Vec<bool>, DemoError> {
    demo.frames
        .iter()
        .map(|f| {
            f.hand()
                .and_then(|h| h.finger_gap)
                .map(|gap| gap < cfg.theta)
                .ok_or(DemoError::MissingHand)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Push,
    Stack,
    Pour,
}

/// One straight-line leg of a demo script: an absolute effector target pose
/// reached over `steps` steps with a trapezoidal displacement profile.
#[derive(Debug, Clone)]
pub struct Segment {
    pub position: [f64; 3],
    pub yaw: f64,
    pub grip_close: bool,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub scene: Scene,
    pub horizon: usize,
    pub dt: f64,
    pub gains: ControllerGains,
    pub cost: CostConfig,
    pub gripper: GripperCloneConfig,
    pub script: Vec<Segment>,
    /// Meters: push target distance / stack xy radius / pour xy tolerance.
    pub pos_tol: f64,
    /// Radians, pour only.
    pub yaw_tol: Option<f64>,
}

pub const TASK_CATALOG: [&str; 6] = [
    "push-straight",
    "push-straight-grasped",
    "push-direction-change",
    "stack",
    "simple-stack",
    "pour",
];

fn scene_json(name: &str) -> &'static str {
    match name {
        "push-straight" => include_str!("../scenes/push_straight.json"),
        "push-straight-grasped" => include_str!("../scenes/push_straight_grasped.json"),
        "push-direction-change" => include_str!("../scenes/push_direction_change.json"),
        "stack" => include_str!("../scenes/stack.json"),
        "simple-stack" => include_str!("../scenes/simple_stack.json"),
        "pour" => include_str!("../scenes/pour.json"),
        _ => unreachable!(),
    }
}

fn seg(position: [f64; 3], yaw: f64, grip_close: bool, steps: usize) -> Segment {
    Segment { position, yaw, grip_close, steps }
}

impl TaskSpec {
    pub fn builtin(name: &str) -> Result<TaskSpec, DemoError> {
        if !TASK_CATALOG.contains(&name) {
            return Err(DemoError::UnknownTask(name.to_string()));
        }
        let scene: Scene = serde_json::from_str(scene_json(name)).expect("builtin scene parses");
        let mut gains = ControllerGains::default();
        let mut cost = CostConfig::default();
        let mut yaw_tol = None;
        let mut pos_tol = 0.01;
        let (kind, horizon, script) = match name {
            "push-straight" => (
                TaskKind::Push,
                30,
                // block 0.28 -> 0.40; effector stops one contact distance
                // short, then dwells at the end so the arrangement goal
                // gets sustained terminal emphasis
                vec![
                    seg([0.35, 0.25, 0.02], 0.0, false, 24),
                    seg([0.35, 0.25, 0.02], 0.0, false, 6),
                ],
            ),
            "push-straight-grasped" => (
                TaskKind::Push,
                30,
                vec![seg([0.40, 0.25, 0.02], 0.0, true, 30)],
            ),
            "push-direction-change" => {
                cost.w_object_hand = 50.0;
                (
                    TaskKind::Push,
                    30,
                    vec![
                        // push +x: block (0.15,0.15) -> (0.30,0.15)
                        seg([0.25, 0.15, 0.02], 0.0, false, 12),
                        // detour around the block to its -y side
                        seg([0.25, 0.085, 0.02], 0.0, false, 3),
                        seg([0.30, 0.085, 0.02], 0.0, false, 3),
                        // push +y: block -> (0.30,0.35)
                        seg([0.30, 0.30, 0.02], 0.0, false, 12),
                    ],
                )
            }
            "stack" => {
                pos_tol = 0.045;
                (
                    TaskKind::Stack,
                    30,
                    vec![
                        seg([0.15, 0.25, 0.02], 0.0, false, 6),
                        seg([0.15, 0.25, 0.02], 0.0, true, 2),
                        seg([0.15, 0.25, 0.10], 0.0, true, 5),
                        seg([0.35, 0.25, 0.10], 0.0, true, 8),
                        seg([0.35, 0.25, 0.03], 0.0, true, 5),
                        seg([0.35, 0.25, 0.03], 0.0, false, 2),
                        seg([0.35, 0.25, 0.10], 0.0, false, 2),
                    ],
                )
            }
            "simple-stack" => {
                pos_tol = 0.045;
                (
                    TaskKind::Stack,
                    30,
                    vec![
                        seg([0.15, 0.25, 0.10], 0.0, true, 6),
                        seg([0.35, 0.25, 0.10], 0.0, true, 10),
                        seg([0.35, 0.25, 0.03], 0.0, true, 8),
                        seg([0.35, 0.25, 0.03], 0.0, false, 2),
                        seg([0.35, 0.25, 0.10], 0.0, false, 4),
                    ],
                )
            }
            "pour" => {
                gains.xyz = 0.00125;
                cost.w_object_point = 1.0;
                pos_tol = 0.03;
                yaw_tol = Some(0.15);
                (
                    TaskKind::Pour,
                    20,
                    vec![
                        seg([0.15, 0.25, 0.15], 0.0, true, 5),
                        seg([0.35, 0.25, 0.15], 0.0, true, 8),
                        seg([0.35, 0.25, 0.15], 1.2, true, 7),
                    ],
                )
            }
            _ => unreachable!(),
        };
        Ok(TaskSpec {
            name: name.to_string(),
            kind,
            scene,
            horizon,
            dt: 0.4,
            gains,
            cost,
            gripper: GripperCloneConfig::default(),
            script,
            pos_tol,
            yaw_tol,
        })
    }

    /// Initial world with movable free objects (or the effector with its
    /// attached cargo) displaced uniformly in a horizontal disk of the
    /// given diameter.
    pub fn perturbed_world(&self, diameter: f64, seed: u64) -> Result<WorldState, SimError> {
        let mut world = WorldState::from_scene(&self.scene)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || {
            let r = diameter / 2.0 * rng.gen::<f64>().sqrt();
            let theta = rng.gen::<f64>() * std::f64::consts::TAU;
            Vector3::new(r * theta.cos(), r * theta.sin(), 0.0)
        };
        // Perturb the effector and every movable object independently;
        // objects attached to the gripper move with the effector so the
        // grasp stays intact. Fixed reference objects stay put.
        let d_eff = draw();
        world.effector.position += d_eff;
        for o in &mut world.objects {
            if o.attached {
                o.position += d_eff;
            } else if !o.fixed {
                o.position += draw();
            }
        }
        Ok(world)
    }

    /// Goal position for the task object in the given world, resolved
    /// through the reference object.
    pub fn target_pose(&self, world: &WorldState) -> Option<(EntityId, Vector3<f64>, Option<f64>)> {
        let (obj, tgt) = self.scene.targets.iter().next()?;
        let reference = world.object(&EntityId::new(&tgt.relative_to))?;
        Some((
            EntityId::new(obj),
            reference.position + Vector3::from(tgt.offset),
            tgt.yaw,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuccessReport {
    pub success: bool,
    /// Horizontal distance to the goal, meters.
    pub position_error: f64,
    /// Absolute yaw error, radians (pour only).
    pub yaw_error: Option<f64>,
}

/// Task success metric on a final world state.
pub fn success(task: &TaskSpec, final_state: &WorldState) -> SuccessReport {
    let Some((obj_id, target, target_yaw)) = task.target_pose(final_state) else {
        return SuccessReport { success: false, position_error: f64::INFINITY, yaw_error: None };
    };
    let Some(obj) = final_state.object(&obj_id) else {
        return SuccessReport { success: false, position_error: f64::INFINITY, yaw_error: None };
    };
    let xy_err = (obj.xy() - target.xy()).norm();
    match task.kind {
        TaskKind::Push => SuccessReport {
            success: xy_err <= task.pos_tol,
            position_error: xy_err,
            yaw_error: None,
        },
        TaskKind::Stack => {
            let z_err = (obj.position.z - target.z).abs();
            SuccessReport {
                success: xy_err <= task.pos_tol && z_err <= 0.005,
                position_error: xy_err.max(z_err),
                yaw_error: None,
            }
        }
        TaskKind::Pour => {
            let yaw_err = (obj.yaw - target_yaw.unwrap_or(0.0)).abs();
            SuccessReport {
                success: xy_err <= task.pos_tol
                    && yaw_err <= task.yaw_tol.unwrap_or(f64::INFINITY),
                position_error: xy_err,
                yaw_error: Some(yaw_err),
            }
        }
    }
}

/// A generated demonstration with everything needed to replay it.
#[derive(Debug, Clone)]
pub struct Demo {
    pub trace: EntityTrace,
    /// Raw (pre-gain) actions, length T.
    pub actions: Vec<DVector<f64>>,
    pub grip: Vec<bool>,
    pub initial: WorldState,
    pub final_state: WorldState,
}

/// Per-step displacement fractions with a trapezoidal speed profile
/// (ramp up, cruise, ramp down), summing to 1.
fn trapezoid(n: usize) -> Vec<f64> {
    let ramp = (n as f64 / 3.0).ceil().max(1.0);
    let raw: Vec<f64> = (0..n)
        .map(|i| ((i + 1) as f64).min((n - i) as f64).min(ramp))
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / sum).collect()
}

/// Runs the task's hand script in the simulator with a noiseless detector
/// and returns the demonstration. The seed only affects the body-frame
/// point samples.
pub fn generate_demo_full(task: &TaskSpec, seed: u64) -> Result<Demo, DemoError> {
    let demo = execute_script(task, seed, ActorKind::Demonstrator)?;
    let report = success(task, &demo.final_state);
    if !report.success {
        return Err(DemoError::DemoFailed { task: task.name.clone(), error: report.position_error });
    }
    Ok(demo)
}

/// Executes the task's waypoint script with a noiseless detector and returns
/// the resulting trace and artifacts. Unlike demo generation this does not
/// require the task's success condition to hold, so deliberately flawed
/// executions can be produced for cost-shaping comparisons.
pub fn execute_script(task: &TaskSpec, seed: u64, actor: ActorKind) -> Result<Demo, DemoError> {
    let initial = WorldState::from_scene(&task.scene)?;
    let det_cfg = DetectorConfig { sigma: 0.0, p_occlusion: 0.0, seed, ..Default::default() };
    let mut detector = Detector::new(&initial, det_cfg);

    let mut state = initial.clone();
    let mut frames: Vec<TraceFrame> = Vec::with_capacity(task.horizon);
    let mut actions = Vec::with_capacity(task.horizon);
    let mut grip = Vec::with_capacity(task.horizon);

    for segment in &task.script {
        let start = state.effector.position;
        let start_yaw = state.effector.yaw;
        let delta = Vector3::from(segment.position) - start;
        let dyaw = segment.yaw - start_yaw;
        for w in trapezoid(segment.steps) {
            let du = [
                delta.x * w / task.gains.xyz,
                delta.y * w / task.gains.xyz,
                delta.z * w / task.gains.xyz,
                dyaw * w / task.gains.rot,
            ];
            let action = Action { du, grip_close: segment.grip_close };
            state = step(&state, &action, &task.gains);
            frames.push(detector.detect(&state, frames.len()));
            actions.push(DVector::from_row_slice(&du));
            grip.push(segment.grip_close);
        }
    }
    let meta = TraceMeta {
        length: frames.len(),
        dt: task.dt,
        actor,
        task: task.name.clone(),
    };
    let trace = EntityTrace::new(meta, frames)?;
    Ok(Demo { trace, actions, grip, initial, final_state: state })
}

pub fn generate_demo(task: &TaskSpec, seed: u64) -> Result<EntityTrace, DemoError> {
    Ok(generate_demo_full(task, seed)?.trace)
}
