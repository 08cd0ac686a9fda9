//! Cost-shaping comparison: five scripted imitation variants of the
//! stacking task, each scored per timestep against the demonstration and
//! normalized jointly so the curves are directly comparable on one plot.

use crate::cost::sequence_cost;
use crate::demo::{execute_script, generate_demo, DemoError, Segment, TaskSpec};
use crate::graph::GraphError;
use crate::trace::{ActorKind, EntityKind, EntityRecord, EntityTrace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ShapeError {
    #[error(transparent)]
    Demo(#[from] DemoError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("shape comparison requires the stack task, got {0}")]
    UnsupportedTask(String),
}

/// One imitation variant and its cost curve against the demonstration.
#[derive(Debug, Clone)]
pub struct VariantCurve {
    pub name: &'static str,
    pub trace: EntityTrace,
    pub raw: Vec<f64>,
    /// raw divided by the maximum absolute raw cost across all variants.
    pub normalized: Vec<f64>,
}

fn seg(position: [f64; 3], yaw: f64, grip_close: bool, steps: usize) -> Segment {
    Segment { position, yaw, grip_close, steps }
}

fn with_script(task: &TaskSpec, script: Vec<Segment>) -> TaskSpec {
    let mut t = task.clone();
    t.script = script;
    t
}

/// Jitters every waypoint by a small deterministic offset, emulating an
/// independent correct execution rather than a frame-exact replay.
fn jittered(script: &[Segment], rng: &mut ChaCha8Rng, amplitude: f64) -> Vec<Segment> {
    script
        .iter()
        .map(|s| {
            let mut p = s.position;
            for c in &mut p {
                *c += amplitude * (2.0 * rng.gen::<f64>() - 1.0);
            }
            seg(p, s.yaw, s.grip_close, s.steps)
        })
        .collect()
}

/// Appends static distractor objects to every frame of a trace. The cost
/// must ignore entities without a demo correspondent, so curves computed
/// from the cluttered trace must match the clean ones exactly.
fn cluttered(trace: &EntityTrace, distractors: &[( &str, [f64; 3])]) -> EntityTrace {
    let mut frames = trace.frames.clone();
    for frame in &mut frames {
        for (id, pos) in distractors {
            frame.entities.push(EntityRecord {
                id: (*id).into(),
                kind: EntityKind::Object,
                position: *pos,
                parent: None,
                finger_gap: None,
                occluded: false,
            });
        }
    }
    EntityTrace::new(trace.meta.clone(), frames).expect("cluttered trace stays valid")
}

/// Truncates an execution after `keep` frames and repeats the final kept
/// frame out to `len` frames ("finish early, then hold still").
fn repeat_tail(trace: &EntityTrace, keep: usize, len: usize) -> EntityTrace {
    let mut frames: Vec<_> = trace.frames[..keep].to_vec();
    let last = frames.last().expect("non-empty trace").clone();
    while frames.len() < len {
        let mut f = last.clone();
        f.t = frames.len();
        frames.push(f);
    }
    let mut meta = trace.meta.clone();
    meta.length = frames.len();
    EntityTrace::new(meta, frames).expect("padded trace stays valid")
}

/// Builds the five stacking imitation variants (correct, wrong-target,
/// partially-wrong, cluttered-correct, correct_end) and their cost curves
/// against the scripted demonstration, normalized by the maximum absolute
/// cost across all variants.
pub fn shape_bundle(task: &TaskSpec, seed: u64) -> Result<Vec<VariantCurve>, ShapeError> {
    if task.name != "stack" {
        return Err(ShapeError::UnsupportedTask(task.name.clone()));
    }
    let demo = generate_demo(task, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a5a_5a5a);

    // an independent correct execution: same waypoints up to a few mm
    let correct_task = with_script(task, jittered(&task.script, &mut rng, 0.002));
    let correct = execute_script(&correct_task, seed, ActorKind::Imitator)?.trace;

    // carries the block away from the demonstrated target
    let wrong_task = with_script(
        task,
        vec![
            seg([0.15, 0.25, 0.02], 0.0, false, 6),
            seg([0.15, 0.25, 0.02], 0.0, true, 2),
            seg([0.15, 0.25, 0.10], 0.0, true, 5),
            seg([0.45, 0.08, 0.10], 0.0, true, 8),
            seg([0.45, 0.08, 0.03], 0.0, true, 5),
            seg([0.45, 0.08, 0.03], 0.0, false, 2),
            seg([0.45, 0.08, 0.10], 0.0, false, 2),
        ],
    );
    let wrong = execute_script(&wrong_task, seed, ActorKind::Imitator)?.trace;

    // right neighborhood, wrong placement: released well off the target
    let partial_task = with_script(
        task,
        vec![
            seg([0.15, 0.25, 0.02], 0.0, false, 6),
            seg([0.15, 0.25, 0.02], 0.0, true, 2),
            seg([0.15, 0.25, 0.10], 0.0, true, 5),
            seg([0.35, 0.33, 0.10], 0.0, true, 8),
            seg([0.35, 0.33, 0.03], 0.0, true, 5),
            seg([0.35, 0.33, 0.03], 0.0, false, 2),
            seg([0.35, 0.33, 0.10], 0.0, false, 2),
        ],
    );
    let partial = execute_script(&partial_task, seed, ActorKind::Imitator)?.trace;

    let clutter = cluttered(
        &correct,
        &[("mug", [0.48, 0.42, 0.03]), ("bottle", [0.06, 0.07, 0.06])],
    );

    // the same correct execution compressed to finish early, then holding
    // the final frame for the rest of the horizon
    let fast_script: Vec<Segment> = {
        let s = &correct_task.script;
        vec![
            seg(s[0].position, s[0].yaw, s[0].grip_close, 5),
            seg(s[1].position, s[1].yaw, s[1].grip_close, 2),
            seg(s[2].position, s[2].yaw, s[2].grip_close, 4),
            seg(s[3].position, s[3].yaw, s[3].grip_close, 6),
            seg(s[4].position, s[4].yaw, s[4].grip_close, 4),
            seg(s[5].position, s[5].yaw, s[5].grip_close, 1),
            seg(s[6].position, s[6].yaw, s[6].grip_close, 2),
        ]
    };
    let fast_task = with_script(task, fast_script);
    let fast = execute_script(&fast_task, seed, ActorKind::Imitator)?.trace;
    let keep: usize = fast_task.script.iter().map(|s| s.steps).sum();
    let correct_end = repeat_tail(&fast, keep.min(fast.frames.len()), task.horizon);

    let variants: Vec<(&'static str, EntityTrace)> = vec![
        ("correct", correct),
        ("wrong-target", wrong),
        ("partially-wrong", partial),
        ("cluttered-correct", clutter),
        ("correct_end", correct_end),
    ];

    let mut raws = Vec::with_capacity(variants.len());
    for (_, trace) in &variants {
        raws.push(sequence_cost(&demo, trace, &task.cost)?);
    }
    let max_abs = raws
        .iter()
        .flatten()
        .fold(0.0f64, |m, c| m.max(c.abs()));
    Ok(variants
        .into_iter()
        .zip(raws)
        .map(|((name, trace), raw)| {
            let normalized = raw
                .iter()
                .map(|c| if max_abs > 0.0 { c / max_abs } else { 0.0 })
                .collect();
            VariantCurve { name, trace, raw, normalized }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle() -> Vec<VariantCurve> {
        let task = TaskSpec::builtin("stack").unwrap();
        shape_bundle(&task, 7).unwrap()
    }

    #[test]
    fn correct_variant_stays_near_zero() {
        let b = bundle();
        let correct = b.iter().find(|v| v.name == "correct").unwrap();
        for (t, c) in correct.normalized.iter().enumerate() {
            assert!(*c <= 0.05, "correct variant normalized cost {c} at t={t}");
        }
    }

    #[test]
    fn wrong_target_ends_high() {
        let b = bundle();
        let wrong = b.iter().find(|v| v.name == "wrong-target").unwrap();
        assert!(*wrong.normalized.last().unwrap() >= 0.5);
    }

    #[test]
    fn clutter_does_not_change_costs() {
        let b = bundle();
        let correct = b.iter().find(|v| v.name == "correct").unwrap();
        let clutter = b.iter().find(|v| v.name == "cluttered-correct").unwrap();
        assert_eq!(correct.raw, clutter.raw);
    }

    #[test]
    fn early_finish_cost_stays_low_after_success() {
        let b = bundle();
        let end = b.iter().find(|v| v.name == "correct_end").unwrap();
        // after the early finish the cost must never rise above its value
        // at the moment of success
        let keep = 24;
        let at_success = end.normalized[keep - 1];
        for t in keep..end.normalized.len() {
            assert!(
                end.normalized[t] <= at_success + 1e-12,
                "cost rose after success: {} -> {} at t={t}",
                at_success,
                end.normalized[t]
            );
        }
    }

    #[test]
    fn partially_wrong_lands_between() {
        let b = bundle();
        let wrong = *b.iter().find(|v| v.name == "wrong-target").unwrap().normalized.last().unwrap();
        let partial = *b.iter().find(|v| v.name == "partially-wrong").unwrap().normalized.last().unwrap();
        let correct = *b.iter().find(|v| v.name == "correct").unwrap().normalized.last().unwrap();
        assert!(correct < partial && partial < wrong);
    }
}
