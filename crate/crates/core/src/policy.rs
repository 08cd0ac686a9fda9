//! Time-varying linear-Gaussian policies and the state featurization used
//! for dynamics fitting and trajectory optimization.

use crate::trace::{EntityId, TraceFrame};
use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("entity {0} missing from frame")]
    MissingEntity(EntityId),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("insufficient data: needed {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("matrix not positive definite: {0}")]
    NonPsd(String),
    #[error("serialization: {0}")]
    Serialization(String),
}

/// Layout of the featurized state vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    /// Joint-angle proxy count; the tabletop tasks use 1 (effector yaw).
    pub n_joints: usize,
    /// Number of corresponded objects in the scene.
    pub n_total: usize,
    pub n_anchors: usize,
    /// Size of the point-feature block per anchor; always 1 here.
    pub dim_phi: usize,
}

impl FeatureSpec {
    pub fn new(n_total: usize) -> Self {
        FeatureSpec { n_joints: 1, n_total, n_anchors: 1, dim_phi: 1 }
    }

    pub fn state_dim(&self) -> usize {
        3 + self.n_joints
            + self.n_anchors * (self.n_total - 1) * 3
            + self.n_anchors * self.dim_phi
    }

    /// Index of the first relative-vector block.
    pub fn rel_offset(&self) -> usize {
        3 + self.n_joints
    }
}

fn vec3(p: [f64; 3]) -> Vector3<f64> {
    Vector3::new(p[0], p[1], p[2])
}

/// Builds the state vector: effector position, joint proxies, per-anchor
/// relative vectors to every other corresponded object, and the per-anchor
/// averaged point-pair distance across demonstration and imitation.
pub fn featurize(
    frame: &TraceFrame,
    demo_frame: &TraceFrame,
    anchors: &[EntityId],
    joints: &[f64],
    spec: &FeatureSpec,
) -> Result<DVector<f64>, PolicyError> {
    if joints.len() != spec.n_joints {
        return Err(PolicyError::DimensionMismatch(format!(
            "expected {} joint values, got {}",
            spec.n_joints,
            joints.len()
        )));
    }
    if anchors.len() != spec.n_anchors {
        return Err(PolicyError::DimensionMismatch(format!(
            "expected {} anchors, got {}",
            spec.n_anchors,
            anchors.len()
        )));
    }
    if spec.dim_phi != 1 {
        return Err(PolicyError::DimensionMismatch(
            "dim_phi must be 1".into(),
        ));
    }
    let hand = frame
        .hand()
        .ok_or_else(|| PolicyError::MissingEntity(EntityId::new("hand")))?;

    // corresponded objects only, in id order
    let demo_objects: BTreeSet<EntityId> = demo_frame.objects().map(|e| e.id.clone()).collect();
    let objects: Vec<EntityId> = frame
        .objects()
        .map(|e| e.id.clone())
        .filter(|id| demo_objects.contains(id))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if objects.len() != spec.n_total {
        return Err(PolicyError::DimensionMismatch(format!(
            "expected {} corresponded objects, found {}",
            spec.n_total,
            objects.len()
        )));
    }

    let mut x = DVector::zeros(spec.state_dim());
    x.fixed_rows_mut::<3>(0).copy_from(&vec3(hand.position));
    for (i, j) in joints.iter().enumerate() {
        x[3 + i] = *j;
    }

    let mut idx = spec.rel_offset();
    for anchor in anchors {
        let a = frame
            .entity(anchor)
            .ok_or_else(|| PolicyError::MissingEntity(anchor.clone()))?;
        let a_pos = vec3(a.position);
        for id in &objects {
            if id == anchor {
                continue;
            }
            let o = frame
                .entity(id)
                .ok_or_else(|| PolicyError::MissingEntity(id.clone()))?;
            let rel = a_pos - vec3(o.position);
            x.fixed_rows_mut::<3>(idx).copy_from(&rel);
            idx += 3;
        }
    }
    for anchor in anchors {
        x[idx] = point_feature(frame, demo_frame, anchor)?;
        idx += 1;
    }
    debug_assert_eq!(idx, spec.state_dim());
    Ok(x)
}

/// phi: mean over corresponded anchor points of the norm difference between
/// the imitator's and demonstrator's anchor-to-point vectors.
pub fn point_feature(
    frame: &TraceFrame,
    demo_frame: &TraceFrame,
    anchor: &EntityId,
) -> Result<f64, PolicyError> {
    let a = frame
        .entity(anchor)
        .ok_or_else(|| PolicyError::MissingEntity(anchor.clone()))?;
    let da = demo_frame
        .entity(anchor)
        .ok_or_else(|| PolicyError::MissingEntity(anchor.clone()))?;
    let a_pos = vec3(a.position);
    let da_pos = vec3(da.position);
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in frame.points_of(anchor) {
        if let Some(dp) = demo_frame.entity(&p.id) {
            let rel_imit = a_pos - vec3(p.position);
            let rel_demo = da_pos - vec3(dp.position);
            sum += (rel_imit - rel_demo).norm();
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Per-timestep affine feedback controller with Gaussian exploration:
/// u_t ~ N(K_t x_t + k_t, Sigma_t).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianPolicy {
    pub gains: Vec<DMatrix<f64>>,
    pub offsets: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
}

impl LinearGaussianPolicy {
    /// Zero-gain initial policy with diagonal exploration covariance.
    pub fn init(
        state_dim: usize,
        action_dim: usize,
        horizon: usize,
        exploration_std: &[f64],
    ) -> Self {
        assert_eq!(exploration_std.len(), action_dim);
        let sigma = DMatrix::from_diagonal(&DVector::from_iterator(
            action_dim,
            exploration_std.iter().map(|s| s * s),
        ));
        LinearGaussianPolicy {
            gains: vec![DMatrix::zeros(action_dim, state_dim); horizon],
            offsets: vec![DVector::zeros(action_dim); horizon],
            covariances: vec![sigma; horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.gains.len()
    }

    pub fn state_dim(&self) -> usize {
        self.gains[0].ncols()
    }

    pub fn action_dim(&self) -> usize {
        self.gains[0].nrows()
    }

    pub fn mean(&self, t: usize, x: &DVector<f64>) -> DVector<f64> {
        &self.gains[t] * x + &self.offsets[t]
    }

    pub fn sample(&self, t: usize, x: &DVector<f64>, rng: &mut impl Rng) -> DVector<f64> {
        let chol = self.covariances[t]
            .clone()
            .cholesky()
            .expect("policy covariance must be positive definite");
        let z = DVector::from_iterator(
            self.action_dim(),
            (0..self.action_dim()).map(|_| rng.sample::<f64, _>(StandardNormal)),
        );
        self.mean(t, x) + chol.l() * z
    }

    /// Smallest eigenvalue across all step covariances.
    pub fn min_covariance_eigenvalue(&self) -> f64 {
        self.covariances
            .iter()
            .flat_map(|s| s.clone().symmetric_eigen().eigenvalues.iter().copied().collect::<Vec<_>>())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn to_json(&self) -> String {
        let file = PolicyFile {
            horizon: self.horizon(),
            state_dim: self.state_dim(),
            action_dim: self.action_dim(),
            steps: (0..self.horizon())
                .map(|t| PolicyStep {
                    gain: self.gains[t].transpose().as_slice().to_vec(),
                    offset: self.offsets[t].as_slice().to_vec(),
                    sigma: self.covariances[t].transpose().as_slice().to_vec(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("policy serialization cannot fail")
    }

    pub fn from_json(json: &str) -> Result<Self, PolicyError> {
        let file: PolicyFile =
            serde_json::from_str(json).map_err(|e| PolicyError::Serialization(e.to_string()))?;
        let (n, m) = (file.state_dim, file.action_dim);
        if file.steps.len() != file.horizon {
            return Err(PolicyError::Serialization("step count != horizon".into()));
        }
        let mut gains = Vec::new();
        let mut offsets = Vec::new();
        let mut covariances = Vec::new();
        for s in &file.steps {
            if s.gain.len() != m * n || s.offset.len() != m || s.sigma.len() != m * m {
                return Err(PolicyError::Serialization("bad matrix shape".into()));
            }
            gains.push(DMatrix::from_row_slice(m, n, &s.gain));
            offsets.push(DVector::from_column_slice(&s.offset));
            covariances.push(DMatrix::from_row_slice(m, m, &s.sigma));
        }
        Ok(LinearGaussianPolicy { gains, offsets, covariances })
    }
}

/// On-disk policy document; matrices are row-major.
#[derive(Serialize, Deserialize)]
struct PolicyFile {
    horizon: usize,
    state_dim: usize,
    action_dim: usize,
    steps: Vec<PolicyStep>,
}

#[derive(Serialize, Deserialize)]
struct PolicyStep {
    gain: Vec<f64>,
    offset: Vec<f64>,
    sigma: Vec<f64>,
}

/// Knobs for the alternating model-based / model-free policy updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub rollouts_per_iter: usize,
    pub iterations: usize,
    /// KL trust region per trajectory, in nats; adapted during training.
    pub kl_epsilon: f64,
    pub ridge_lambda: f64,
    pub action_cost_lambda: f64,
    pub pi2_temperature: f64,
    pub pi2_blend: f64,
    /// Dynamics fitting pools samples from timesteps within +-fit_window.
    pub fit_window: usize,
    /// Initial exploration std per action axis, in raw action units.
    pub exploration_std: [f64; 4],
    /// Lower bound for the adapted KL bound.
    pub kl_floor: f64,
    /// Multiplier applied to the KL bound after an accepted step.
    pub kl_grow: f64,
    /// Multiplier applied to the KL bound after a rejected step.
    pub kl_shrink: f64,
    /// Trust-region steps attempted per dynamics fit.
    pub trust_region_rounds: usize,
    /// Consecutive rejected steps before the round loop stops early.
    pub max_round_failures: usize,
    /// Per-axis std floor kept in the policy covariance, as a fraction of
    /// the initial exploration std.
    pub covariance_floor_scale: f64,
    /// Scale of the sustained offset-shift probes along the demonstrated
    /// hand velocity (0 disables them).
    pub nudge_scale: f64,
    /// Detector-noise draws averaged per candidate evaluation.
    pub eval_noise_draws: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            rollouts_per_iter: 8,
            iterations: 10,
            kl_epsilon: 10.0,
            ridge_lambda: 1e-6,
            action_cost_lambda: 1e-5,
            pi2_temperature: 1.0,
            pi2_blend: 0.5,
            fit_window: 4,
            exploration_std: [40.0, 40.0, 40.0, 40.0 / 3.0],
            kl_floor: 1e-3,
            kl_grow: 2.0,
            kl_shrink: 0.5,
            trust_region_rounds: 60,
            max_round_failures: 8,
            covariance_floor_scale: 0.1,
            nudge_scale: 1.0,
            eval_noise_draws: 3,
        }
    }
}
