//! Stage costs over the featurized state and their local quadratic
//! expansions, as consumed by the LQR backward pass. The imitation stage
//! cost is the smoothed relative-arrangement dissimilarity expressed in
//! feature coordinates, plus an action regularizer.

use crate::graph::CostConfig;
use crate::policy::FeatureSpec;
use crate::sim::{Rollout, RolloutContext};
use crate::trace::{EntityId, EntityTrace, TraceFrame};
use nalgebra::{DMatrix, DVector, Vector3};
use std::collections::BTreeSet;

/// Quadratic stage cost in absolute coordinates:
/// q(x,u) = 1/2 x'Cxx x + u'Cux x + 1/2 u'Cuu u + cx'x + cu'u + c0.
#[derive(Debug, Clone)]
pub struct QuadCost {
    pub cxx: DMatrix<f64>,
    pub cuu: DMatrix<f64>,
    pub cux: DMatrix<f64>,
    pub cx: DVector<f64>,
    pub cu: DVector<f64>,
    pub c0: f64,
}

impl QuadCost {
    pub fn zeros(n: usize, m: usize) -> Self {
        QuadCost {
            cxx: DMatrix::zeros(n, n),
            cuu: DMatrix::zeros(m, m),
            cux: DMatrix::zeros(m, n),
            cx: DVector::zeros(n),
            cu: DVector::zeros(m),
            c0: 0.0,
        }
    }

    pub fn evaluate(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        0.5 * (x.dot(&(&self.cxx * x)) + u.dot(&(&self.cuu * u)))
            + u.dot(&(&self.cux * x))
            + self.cx.dot(x)
            + self.cu.dot(u)
            + self.c0
    }
}

/// A per-timestep cost that can report its value and a PSD local quadratic
/// expansion. Stage index T is the terminal cost (u ignored there).
pub trait StageCost {
    fn horizon(&self) -> usize;
    fn value(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64;
    fn quadratize(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> QuadCost;
}

/// Floors the eigenvalues of a symmetric matrix so the result is PD.
pub fn clamp_psd(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Per-timestep targets for the feature-space imitation cost.
#[derive(Debug, Clone)]
struct StageTargets {
    /// Constant part of the anchor-hand residual. With a reference block
    /// available the residual is hand_const - rel_ref + x_hand, expressing
    /// the anchor through the most nearly static other object (whose
    /// nominal position is frozen); otherwise the anchor itself is frozen
    /// and the residual is hand_const + x_hand.
    hand_const: Vector3<f64>,
    /// Index of the reference object's relative-vector block, if any.
    ref_block: Option<usize>,
    /// Demo relative vectors x_anchor - x_k, in feature block order.
    rel_targets: Vec<Vector3<f64>>,
    /// Number of corresponded anchor points behind the phi feature.
    point_count: f64,
}

/// The imitation stage cost: for each attended edge class, a smoothed norm
/// of the arrangement residual written in terms of the feature vector, plus
/// lambda * |u|^2.
#[derive(Debug, Clone)]
pub struct ImitationStageCost {
    stages: Vec<StageTargets>,
    spec: FeatureSpec,
    w_hand: f64,
    w_object: f64,
    w_point: f64,
    gamma: f64,
    pub action_lambda: f64,
    psd_floor: f64,
}

fn vec3(p: [f64; 3]) -> Vector3<f64> {
    Vector3::new(p[0], p[1], p[2])
}

impl ImitationStageCost {
    /// Builds per-timestep targets from the demo and a nominal rollout.
    /// Stage t pairs the observation available when choosing u_t (the
    /// nominal frame t-1; the pre-episode frame for t = 0) with demo
    /// frame t; stage T is terminal against the last demo frame.
    pub fn new(
        demo: &EntityTrace,
        nominal: &Rollout,
        ctx: &RolloutContext,
        action_lambda: f64,
    ) -> Self {
        let horizon = demo.len();
        let cfg: &CostConfig = &ctx.cost;
        // total displacement of each object over the nominal rollout, used to
        // pick the most nearly static reference object per stage
        let last = nominal.trace.frame(nominal.trace.len() - 1);
        let movement: std::collections::HashMap<EntityId, f64> = nominal
            .initial_frame
            .objects()
            .filter_map(|e| {
                last.entity(&e.id)
                    .map(|f| (e.id.clone(), (vec3(f.position) - vec3(e.position)).norm()))
            })
            .collect();
        let mut stages = Vec::with_capacity(horizon + 1);
        for t in 0..=horizon {
            let demo_t = t.min(horizon - 1);
            let demo_frame = demo.frame(demo_t);
            let anchor = &ctx.anchors[demo_t];
            let obs: &TraceFrame = if t == 0 {
                &nominal.initial_frame
            } else {
                nominal.trace.frame(t - 1)
            };
            stages.push(stage_targets(demo_frame, obs, anchor, &movement));
        }
        ImitationStageCost {
            stages,
            spec: ctx.feature.clone(),
            w_hand: cfg.w_object_hand,
            w_object: cfg.w_object_object,
            w_point: cfg.w_object_point,
            gamma: cfg.smoothing_gamma,
            action_lambda,
            psd_floor: 1e-8,
        }
    }

    fn blocks(&self) -> (usize, usize, usize) {
        // (hand offset, rel offset, phi index)
        (0, self.spec.rel_offset(), self.spec.state_dim() - 1)
    }
}

fn stage_targets(
    demo_frame: &TraceFrame,
    obs: &TraceFrame,
    anchor: &EntityId,
    movement: &std::collections::HashMap<EntityId, f64>,
) -> StageTargets {
    let d_anchor = vec3(demo_frame.entity(anchor).expect("demo anchor").position);
    let d_hand = vec3(demo_frame.hand().expect("demo hand").position);

    // mirror featurize: corresponded objects in id order, excluding anchor
    let demo_ids: BTreeSet<EntityId> = demo_frame.objects().map(|e| e.id.clone()).collect();
    let obs_ids: BTreeSet<EntityId> = obs.objects().map(|e| e.id.clone()).collect();
    let rel_ids: Vec<&EntityId> = demo_ids
        .intersection(&obs_ids)
        .filter(|id| *id != anchor)
        .collect();
    let rel_targets = rel_ids
        .iter()
        .map(|id| d_anchor - vec3(demo_frame.entity(id).expect("demo object").position))
        .collect();

    // Express the anchor through the most nearly static other object, so the
    // expansion stays faithful when the anchor itself moves: the residual
    // hand - rel_ref - x_ref tracks the true anchor, with only x_ref frozen.
    let ref_block = rel_ids
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            let ma = movement.get(**a).copied().unwrap_or(f64::INFINITY);
            let mb = movement.get(**b).copied().unwrap_or(f64::INFINITY);
            ma.partial_cmp(&mb).unwrap()
        })
        .map(|(k, _)| k);
    let hand_const = match ref_block {
        Some(k) => {
            let x_ref = vec3(obs.entity(rel_ids[k]).expect("ref object").position);
            d_anchor - d_hand - x_ref
        }
        None => {
            let n_anchor = obs
                .entity(anchor)
                .map(|e| vec3(e.position))
                .unwrap_or(d_anchor);
            d_anchor - d_hand - n_anchor
        }
    };

    let point_count = demo_frame
        .points_of(anchor)
        .filter(|p| obs.entity(&p.id).is_some())
        .count() as f64;
    StageTargets { hand_const, ref_block, rel_targets, point_count }
}

impl StageCost for ImitationStageCost {
    fn horizon(&self) -> usize {
        self.stages.len() - 1
    }

    fn value(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let stage = &self.stages[t];
        let (hand_off, rel_off, phi_idx) = self.blocks();
        let mut total = 0.0;
        let hand = x.fixed_rows::<3>(hand_off).into_owned();
        let mut hand_res = hand + stage.hand_const;
        if let Some(k) = stage.ref_block {
            hand_res -= x.fixed_rows::<3>(rel_off + 3 * k).into_owned();
        }
        total += self.w_hand * (self.gamma + hand_res.norm_squared()).sqrt();
        for (k, d) in stage.rel_targets.iter().enumerate() {
            let rel = x.fixed_rows::<3>(rel_off + 3 * k).into_owned();
            total += self.w_object * (self.gamma + (rel - d).norm_squared()).sqrt();
        }
        let phi = x[phi_idx];
        total += self.w_point * stage.point_count * (self.gamma + phi * phi).sqrt();
        if t < self.horizon() {
            total += self.action_lambda * u.norm_squared();
        }
        total
    }

    fn quadratize(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> QuadCost {
        let n = x.len();
        let m = u.len();
        let stage = &self.stages[t];
        let (hand_off, rel_off, phi_idx) = self.blocks();

        let mut hess = DMatrix::zeros(n, n);
        let mut grad = DVector::zeros(n);
        let mut f0 = 0.0;

        // smoothed-norm terms: f = w sqrt(gamma + |r|^2) where r is a signed
        // sum over 3-vector feature blocks plus a constant. Gradient w J'r/s,
        // Hessian J' (w/s)(I - r r'/s^2) J for the block-sparse Jacobian J.
        let mut add_residual_term = |blocks: &[(usize, f64)], r: Vector3<f64>, w: f64| {
            let s = (self.gamma + r.norm_squared()).sqrt();
            f0 += w * s;
            let g = r * (w / s);
            let h = (nalgebra::Matrix3::identity() - &r * r.transpose() / (s * s)) * (w / s);
            for &(oa, sa) in blocks {
                for i in 0..3 {
                    grad[oa + i] += sa * g[i];
                }
                for &(ob, sb) in blocks {
                    for i in 0..3 {
                        for j in 0..3 {
                            hess[(oa + i, ob + j)] += sa * sb * h[(i, j)];
                        }
                    }
                }
            }
        };

        let hand = x.fixed_rows::<3>(hand_off).into_owned();
        let mut hand_res = hand + stage.hand_const;
        let mut hand_blocks = vec![(hand_off, 1.0)];
        if let Some(k) = stage.ref_block {
            hand_res -= x.fixed_rows::<3>(rel_off + 3 * k).into_owned();
            hand_blocks.push((rel_off + 3 * k, -1.0));
        }
        add_residual_term(&hand_blocks, hand_res, self.w_hand);
        for (k, d) in stage.rel_targets.iter().enumerate() {
            let rel = x.fixed_rows::<3>(rel_off + 3 * k).into_owned();
            add_residual_term(&[(rel_off + 3 * k, 1.0)], rel - d, self.w_object);
        }

        // phi term: f = w K sqrt(gamma + phi^2)
        let w_phi = self.w_point * stage.point_count;
        if w_phi > 0.0 {
            let phi = x[phi_idx];
            let s = (self.gamma + phi * phi).sqrt();
            f0 += w_phi * s;
            grad[phi_idx] += w_phi * phi / s;
            hess[(phi_idx, phi_idx)] += w_phi * self.gamma / (s * s * s);
        }

        let cxx = clamp_psd(&hess, self.psd_floor);
        let cx = &grad - &cxx * x;
        let c0 = f0 - grad.dot(x) + 0.5 * x.dot(&(&cxx * x));

        let terminal = t >= self.horizon();
        let lambda = if terminal { 0.0 } else { self.action_lambda };
        QuadCost {
            cxx,
            cuu: DMatrix::from_diagonal_element(m, m, (2.0 * lambda).max(self.psd_floor)),
            cux: DMatrix::zeros(m, n),
            cx,
            cu: DVector::zeros(m),
            c0,
        }
    }
}

/// A stage cost that already is quadratic; its expansion is exact. Used by
/// tests and the synthetic optimizer benchmarks.
#[derive(Debug, Clone)]
pub struct QuadraticStageCost {
    pub stages: Vec<QuadCost>,
}

impl StageCost for QuadraticStageCost {
    fn horizon(&self) -> usize {
        self.stages.len() - 1
    }

    fn value(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.stages[t].evaluate(x, u)
    }

    fn quadratize(&self, t: usize, _x: &DVector<f64>, _u: &DVector<f64>) -> QuadCost {
        self.stages[t].clone()
    }
}
