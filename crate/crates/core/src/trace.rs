//! On-disk entity-trajectory format (JSONL) and validation.
//!
//! A trace file is a header line holding the [`TraceMeta`] followed by one
//! JSON object per frame. The writer materializes the occlusion hold rule
//! (occluded entities repeat their last known position) so downstream cost
//! code never special-cases occlusion.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use thiserror::Error;

/// Opaque identifier shared between demonstrator and imitator traces.
/// Correspondence between the two actors is by equal ids.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub String);

impl EntityId {
    pub fn new(id: impl Into<String>) -> Self {
        EntityId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for EntityId {
    fn from(s: &str) -> Self {
        EntityId(s.to_owned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Object,
    Point,
    Hand,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActorKind {
    Demonstrator,
    Imitator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    /// Episode length T (number of frames).
    pub length: usize,
    /// Seconds between frames.
    #[serde(default = "default_dt")]
    pub dt: f64,
    pub actor: ActorKind,
    pub task: String,
}

fn default_dt() -> f64 {
    0.4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub id: EntityId,
    pub kind: EntityKind,
    /// World position in meters.
    pub position: [f64; 3],
    /// Owning object; required for point entities, forbidden otherwise.
    #[serde(default)]
    pub parent: Option<EntityId>,
    /// Distance between finger tips in meters; hand entities only.
    #[serde(default)]
    pub finger_gap: Option<f64>,
    #[serde(default)]
    pub occluded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFrame {
    pub t: usize,
    pub entities: Vec<EntityRecord>,
}

impl TraceFrame {
    pub fn entity(&self, id: &EntityId) -> Option<&EntityRecord> {
        self.entities.iter().find(|e| &e.id == id)
    }

    pub fn hand(&self) -> Option<&EntityRecord> {
        self.entities.iter().find(|e| e.kind == EntityKind::Hand)
    }

    pub fn objects(&self) -> impl Iterator<Item = &EntityRecord> {
        self.entities.iter().filter(|e| e.kind == EntityKind::Object)
    }

    pub fn points_of<'a>(&'a self, parent: &'a EntityId) -> impl Iterator<Item = &'a EntityRecord> + 'a {
        self.entities
            .iter()
            .filter(move |e| e.kind == EntityKind::Point && e.parent.as_ref() == Some(parent))
    }
}

/// A time-indexed log of detected entities for one actor.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityTrace {
    pub meta: TraceMeta,
    pub frames: Vec<TraceFrame>,
}

impl EntityTrace {
    pub fn new(meta: TraceMeta, frames: Vec<TraceFrame>) -> Result<Self, TraceError> {
        validate(&meta, &frames)?;
        Ok(EntityTrace { meta, frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, t: usize) -> &TraceFrame {
        &self.frames[t]
    }

    /// Union of all entity ids that ever appear in the trace.
    pub fn entity_ids(&self) -> BTreeSet<EntityId> {
        self.frames
            .iter()
            .flat_map(|f| f.entities.iter().map(|e| e.id.clone()))
            .collect()
    }

    /// Ids of all object entities that ever appear.
    pub fn object_ids(&self) -> BTreeSet<EntityId> {
        self.frames
            .iter()
            .flat_map(|f| f.objects().map(|e| e.id.clone()))
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid meta: {0}")]
    InvalidMeta(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("validation error: {0}")]
    Validation(String),
}

/// Rounds to 9 significant digits, the on-disk number precision.
pub(crate) fn sig9(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().unwrap()
}

fn quantize_record(e: &mut EntityRecord) {
    for c in &mut e.position {
        *c = sig9(*c);
    }
    if let Some(g) = &mut e.finger_gap {
        *g = sig9(*g);
    }
}

/// Validates a (meta, frames) pair against all trace invariants.
pub fn validate(meta: &TraceMeta, frames: &[TraceFrame]) -> Result<(), TraceError> {
    if meta.length < 1 {
        return Err(TraceError::InvalidMeta("length must be >= 1".into()));
    }
    if !(meta.dt > 0.0) {
        return Err(TraceError::InvalidMeta("dt must be > 0".into()));
    }
    if frames.len() != meta.length {
        return Err(TraceError::Validation(format!(
            "frame count {} does not match meta length {}",
            frames.len(),
            meta.length
        )));
    }
    let mut prev_t: Option<usize> = None;
    // first-seen (kind, parent) per id, checked for consistency across frames
    let mut decl: BTreeMap<EntityId, (EntityKind, Option<EntityId>)> = BTreeMap::new();
    for frame in frames {
        if let Some(p) = prev_t {
            if frame.t <= p {
                return Err(TraceError::Validation(format!(
                    "frame t={} not strictly increasing after t={}",
                    frame.t, p
                )));
            }
        }
        prev_t = Some(frame.t);
        let mut seen: BTreeSet<&EntityId> = BTreeSet::new();
        for e in &frame.entities {
            if !seen.insert(&e.id) {
                return Err(TraceError::Validation(format!(
                    "duplicate entity id {} in frame t={}",
                    e.id, frame.t
                )));
            }
            if e.position.iter().any(|c| !c.is_finite()) {
                return Err(TraceError::Validation(format!(
                    "non-finite position for {} in frame t={}",
                    e.id, frame.t
                )));
            }
            match e.kind {
                EntityKind::Point => {
                    let parent = e.parent.as_ref().ok_or_else(|| {
                        TraceError::Validation(format!(
                            "point {} lacks a parent in frame t={}",
                            e.id, frame.t
                        ))
                    })?;
                    match frame.entity(parent) {
                        Some(p) if p.kind == EntityKind::Object => {}
                        _ => {
                            return Err(TraceError::Validation(format!(
                                "point {} parent {} is not an object in frame t={}",
                                e.id, parent, frame.t
                            )))
                        }
                    }
                }
                EntityKind::Object | EntityKind::Hand => {
                    if e.parent.is_some() {
                        return Err(TraceError::Validation(format!(
                            "non-point entity {} has a parent in frame t={}",
                            e.id, frame.t
                        )));
                    }
                }
            }
            if let Some(g) = e.finger_gap {
                if e.kind != EntityKind::Hand {
                    return Err(TraceError::Validation(format!(
                        "finger_gap on non-hand entity {} in frame t={}",
                        e.id, frame.t
                    )));
                }
                if !(g >= 0.0) || !g.is_finite() {
                    return Err(TraceError::Validation(format!(
                        "finger_gap of {} must be finite and >= 0 in frame t={}",
                        e.id, frame.t
                    )));
                }
            }
            match decl.get(&e.id) {
                None => {
                    decl.insert(e.id.clone(), (e.kind, e.parent.clone()));
                }
                Some((kind, parent)) => {
                    if *kind != e.kind || parent != &e.parent {
                        return Err(TraceError::Validation(format!(
                            "entity {} changes kind or parent at frame t={}",
                            e.id, frame.t
                        )));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Writes a trace as a JSONL stream; returns the number of bytes written.
///
/// Positions and finger gaps are quantized to 9 significant digits and the
/// occlusion hold rule is materialized before serialization.
pub fn write_trace(
    meta: &TraceMeta,
    frames: &[TraceFrame],
    sink: &mut impl Write,
) -> Result<u64, TraceError> {
    validate(meta, frames)?;
    let mut frames = frames.to_vec();
    let mut last_seen: BTreeMap<EntityId, [f64; 3]> = BTreeMap::new();
    for frame in &mut frames {
        for e in &mut frame.entities {
            if e.occluded {
                if let Some(p) = last_seen.get(&e.id) {
                    e.position = *p;
                }
            } else {
                last_seen.insert(e.id.clone(), e.position);
            }
            quantize_record(e);
        }
    }
    let mut meta = meta.clone();
    meta.dt = sig9(meta.dt);

    let mut bytes: u64 = 0;
    let mut line = serde_json::to_vec(&meta).map_err(|e| TraceError::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    line.push(b'\n');
    sink.write_all(&line)?;
    bytes += line.len() as u64;
    for frame in &frames {
        let mut line = serde_json::to_vec(frame).map_err(|e| TraceError::Parse {
            line: 0,
            msg: e.to_string(),
        })?;
        line.push(b'\n');
        sink.write_all(&line)?;
        bytes += line.len() as u64;
    }
    Ok(bytes)
}

/// Reads and validates a JSONL trace stream.
pub fn read_trace(source: impl BufRead) -> Result<EntityTrace, TraceError> {
    let mut lines = source.lines();
    let header = match lines.next() {
        Some(l) => l?,
        None => {
            return Err(TraceError::Parse {
                line: 1,
                msg: "empty stream, expected meta header".into(),
            })
        }
    };
    let meta: TraceMeta = serde_json::from_str(&header).map_err(|e| TraceError::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    let mut frames = Vec::with_capacity(meta.length);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let frame: TraceFrame = serde_json::from_str(&line).map_err(|e| TraceError::Parse {
            line: i + 2,
            msg: e.to_string(),
        })?;
        frames.push(frame);
    }
    EntityTrace::new(meta, frames)
}

/// Correspondence check between a demonstrator and an imitator trace.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CorrespondenceReport {
    /// Demo entities with no imitator counterpart (errors).
    pub missing_in_imitation: Vec<EntityId>,
    /// Imitator entities with no demo counterpart (allowed clutter, notes).
    pub clutter_in_imitation: Vec<EntityId>,
    /// (demo length, imitation length) when they differ.
    pub length_mismatch: Option<(usize, usize)>,
}

impl CorrespondenceReport {
    pub fn is_ok(&self) -> bool {
        self.missing_in_imitation.is_empty() && self.length_mismatch.is_none()
    }
}

pub fn check_correspondence(demo: &EntityTrace, imit: &EntityTrace) -> CorrespondenceReport {
    let demo_ids = demo.entity_ids();
    let imit_ids = imit.entity_ids();
    CorrespondenceReport {
        missing_in_imitation: demo_ids.difference(&imit_ids).cloned().collect(),
        clutter_in_imitation: imit_ids.difference(&demo_ids).cloned().collect(),
        length_mismatch: (demo.len() != imit.len()).then_some((demo.len(), imit.len())),
    }
}
