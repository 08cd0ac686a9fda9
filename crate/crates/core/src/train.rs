//! Alternating model-based / model-free policy search: sample rollouts,
//! fit linear dynamics, run the KL-constrained LQR backward pass on the
//! quadratized cost, blend offsets with the path-integral update, and
//! adapt the trust region from a deterministic evaluation rollout.

use crate::demo::{success, Demo, DemoError, SuccessReport, TaskSpec};
use crate::dynamics::fit_dynamics;
use crate::lqr::lqr_backward;
use crate::pi2::pi2_update;
use crate::policy::{LinearGaussianPolicy, OptimizerConfig, PolicyError};
use crate::quadcost::{ImitationStageCost, StageCost};
use crate::sim::{rollout, DetectorConfig, RolloutContext, SimError, WorldState};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Demo(#[from] DemoError),
}

/// One executed trajectory in featurized form.
#[derive(Debug, Clone)]
pub struct EnvRollout {
    /// Length T+1.
    pub states: Vec<DVector<f64>>,
    /// Length T.
    pub actions: Vec<DVector<f64>>,
    /// Per-step reported cost, length T.
    pub costs: Vec<f64>,
    pub success: bool,
}

impl EnvRollout {
    pub fn total_cost(&self) -> f64 {
        self.costs.iter().sum()
    }
}

/// Anything the optimizer can practice on: the simulated tasks, or
/// synthetic systems in tests.
pub trait Environment {
    /// (state_dim, action_dim, horizon)
    fn dims(&self) -> (usize, usize, usize);
    fn rollout(
        &self,
        policy: &LinearGaussianPolicy,
        seed: u64,
        deterministic: bool,
    ) -> Result<EnvRollout, TrainError>;
    /// Stage cost built around the deterministic nominal rollout of the
    /// given policy; also returns that nominal.
    fn stage_cost(
        &self,
        policy: &LinearGaussianPolicy,
        seed: u64,
    ) -> Result<(Box<dyn StageCost + '_>, EnvRollout), TrainError>;

    /// Per-step action that would reproduce the demonstrated hand velocity,
    /// when the environment has such a notion. Used as a search direction
    /// for sustained offset shifts, never as an initialization.
    fn demo_action_hint(&self) -> Option<Vec<DVector<f64>>> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationStats {
    pub iteration: usize,
    /// Mean total cost of the sampled rollouts this iteration.
    pub mean_cost: f64,
    pub kl_epsilon: f64,
    pub success_rate: f64,
    /// Total cost of the deterministic evaluation rollout after the update.
    pub eval_cost: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub policy: LinearGaussianPolicy,
    pub curve: Vec<IterationStats>,
}

/// Trains a time-varying linear-Gaussian policy on the environment.
/// Updates are accepted only when the deterministic evaluation cost does
/// not increase; the KL trust region grows 1.2x on improvement and shrinks
/// 0.5x otherwise. `iterations = 0` returns the initial policy.
pub fn train(
    env: &dyn Environment,
    cfg: &OptimizerConfig,
    seed: u64,
) -> Result<TrainResult, TrainError> {
    let (n, m, horizon) = env.dims();
    let mut policy = LinearGaussianPolicy::init(n, m, horizon, &cfg.exploration_std);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval_seed: u64 = rng.gen();
    let mut kl = cfg.kl_epsilon;
    let covf = cfg.covariance_floor_scale;
    let covariance_floor = nalgebra::DMatrix::from_diagonal(&DVector::from_iterator(
        m,
        cfg.exploration_std.iter().take(m).map(|s| (covf * s) * (covf * s)),
    ));
    // Guard evaluations average several detector-noise draws so candidate
    // selection at the sub-centimeter scale does not overfit one noise
    // sequence.
    let eval_reps = cfg.eval_noise_draws.max(1);
    let evaluate = |p: &LinearGaussianPolicy| -> Result<f64, TrainError> {
        let mut total = 0.0;
        for k in 0..eval_reps {
            total += env.rollout(p, eval_seed.wrapping_add(k), true)?.total_cost();
        }
        Ok(total / eval_reps as f64)
    };
    let mut eval_cost = evaluate(&policy)?;
    let mut replay_states: Vec<Vec<DVector<f64>>> = Vec::new();
    let mut replay_actions: Vec<Vec<DVector<f64>>> = Vec::new();
    let mut curve = Vec::with_capacity(cfg.iterations);

    for iteration in 0..cfg.iterations {
        let samples: Vec<EnvRollout> = (0..cfg.rollouts_per_iter)
            .map(|_| env.rollout(&policy, rng.gen(), false))
            .collect::<Result<_, _>>()?;
        let mean_cost =
            samples.iter().map(EnvRollout::total_cost).sum::<f64>() / samples.len() as f64;
        let success_rate =
            samples.iter().filter(|r| r.success).count() as f64 / samples.len() as f64;

        let states: Vec<_> = samples.iter().map(|r| r.states.clone()).collect();
        let actions: Vec<_> = samples.iter().map(|r| r.actions.clone()).collect();
        let costs: Vec<_> = samples.iter().map(|r| r.costs.clone()).collect();
        // pool the previous iteration's samples into the regression: twice
        // the data stabilizes the fitted contact couplings considerably,
        // and the policy moves little enough per iteration that the stale
        // half is still informative
        replay_states.extend(states.iter().cloned());
        replay_actions.extend(actions.iter().cloned());
        let keep = 2 * cfg.rollouts_per_iter;
        if replay_states.len() > keep {
            let drop = replay_states.len() - keep;
            replay_states.drain(..drop);
            replay_actions.drain(..drop);
        }
        let dynamics =
            fit_dynamics(&replay_states, &replay_actions, cfg.fit_window, cfg.ridge_lambda)?;

        // Model-free escape hatch: replay the best sampled rollout through
        // the current gains (offsets chosen to reproduce its actions along
        // its states). This is the path-integral update in the
        // zero-temperature limit and lets lucky exploration pull the
        // policy out of flat regions the local model cannot see across.
        if let Some(best) = samples
            .iter()
            .min_by(|a, b| a.total_cost().partial_cmp(&b.total_cost()).unwrap())
        {
            if best.total_cost() < eval_cost {
                let mut candidate = policy.clone();
                for t in 0..horizon {
                    let offset = &best.actions[t] - &candidate.gains[t] * &best.states[t];
                    candidate.offsets[t] = offset;
                }
                let candidate_eval = evaluate(&candidate)?;
                if candidate_eval < eval_cost {
                    policy = candidate;
                    eval_cost = candidate_eval;
                }
            }
        }

        // Several trust-region steps per dynamics fit: each round
        // re-quadratizes around the current deterministic nominal and
        // proposes one candidate at the current KL bound; the bound grows
        // 1.2x when the deterministic evaluation improves and shrinks 0.5x
        // when it does not. The evaluation rollout guards against the
        // fitted model being extrapolated too far. The path-integral
        // offset blend rides along until a candidate carrying it is
        // accepted; its rejection alone never ends the iteration.
        let rounds = cfg.trust_region_rounds;
        let max_fails = cfg.max_round_failures;
        let mut used_pi2 = false;
        let mut consecutive_failures = 0;
        for _round in 0..rounds {
            let (stage, nominal) = env.stage_cost(&policy, eval_seed)?;
            let quads: Vec<_> = (0..=horizon)
                .map(|t| {
                    let u = &nominal.actions[t.min(horizon - 1)];
                    stage.quadratize(t, &nominal.states[t], u)
                })
                .collect();
            // a backward pass can fail outright when the fitted model is
            // degenerate (e.g. ill-conditioned regression after aggressive
            // weighting); treat that like a rejected candidate
            let mut candidate =
                match lqr_backward(&dynamics, &quads, &policy, kl, &nominal.states[0]) {
                    Ok(c) => c,
                    Err(crate::policy::PolicyError::NonPsd(_)) => {
                        kl = (kl * cfg.kl_shrink).max(cfg.kl_floor);
                        consecutive_failures += 1;
                        if consecutive_failures >= max_fails {
                            break;
                        }
                        continue;
                    }
                    Err(e) => return Err(e.into()),
                };
            // keep sampling exploration alive: the backward pass shrinks
            // covariances as the trust region tightens, which would starve
            // the dynamics fit and the path-integral update of off-nominal
            // data, and make the KL bound binding in ever smaller raw units
            for sigma in &mut candidate.covariances {
                *sigma += &covariance_floor;
            }
            if !used_pi2 {
                candidate = pi2_update(
                    &candidate,
                    &states,
                    &actions,
                    &costs,
                    cfg.pi2_temperature,
                    cfg.pi2_blend,
                );
            }
            let candidate_eval = evaluate(&candidate)?;
            if std::env::var("TRAIN_DEBUG").is_ok() {
                eprintln!("  it {iteration} pi2 {used_pi2} kl {kl:.3e}: cand {candidate_eval:.4} vs {eval_cost:.4}");
            }
            let threshold = if used_pi2 { eval_cost - 1e-9 } else { eval_cost };
            if candidate_eval <= threshold {
                policy = candidate;
                eval_cost = candidate_eval;
                kl *= cfg.kl_grow;
                consecutive_failures = 0;
                used_pi2 = true;
            } else if !used_pi2 {
                // retry without the path-integral offsets before shrinking
                used_pi2 = true;
            } else {
                kl = (kl * cfg.kl_shrink).max(cfg.kl_floor);
                consecutive_failures += 1;
                if consecutive_failures >= max_fails {
                    break;
                }
            }
        }
        // Sustained pattern search: local exploration noise is independent
        // per step, so a deviation held over many consecutive steps is
        // essentially never sampled and the fitted model is unreliable that
        // far off-nominal. Probe a constant offset shift along the
        // demonstrated hand velocity over each third of the horizon and
        // keep the best shift only if the deterministic evaluation improves.
        let nudge = cfg.nudge_scale;
        if nudge > 0.0 {
            if let Some(hint) = env.demo_action_hint() {
                // probe along the demo translation and rotation separately
                // (so neither rides along on the other's improvement), and
                // sideways in the plane to correct lateral drift the demo
                // never demonstrates fixing
                let translation: Vec<DVector<f64>> = hint
                    .iter()
                    .map(|h| {
                        let mut v = h.clone();
                        if v.len() > 3 {
                            v[3] = 0.0;
                        }
                        v
                    })
                    .collect();
                let rotation: Vec<DVector<f64>> = hint
                    .iter()
                    .map(|h| {
                        let mut v = DVector::zeros(h.len());
                        if h.len() > 3 {
                            v[3] = h[3];
                        }
                        v
                    })
                    .collect();
                let perp: Vec<DVector<f64>> = hint
                    .iter()
                    .map(|h| {
                        let mut p = DVector::zeros(h.len());
                        p[0] = -h[1];
                        p[1] = h[0];
                        p
                    })
                    .collect();
                let mut dirs: Vec<Vec<DVector<f64>>> = vec![translation];
                if rotation.iter().any(|v| v.amax() > 0.0) {
                    dirs.push(rotation);
                }
                dirs.push(perp.iter().map(|p| -p).collect());
                dirs.push(perp);
                let third = horizon.div_ceil(3);
                let mut best: Option<(f64, LinearGaussianPolicy)> = None;
                for dir in &dirs {
                    for w in 0..3 {
                        let lo = w * third;
                        let hi = ((w + 1) * third).min(horizon);
                        if lo >= hi {
                            continue;
                        }
                        let mut cand = policy.clone();
                        for t in lo..hi {
                            cand.offsets[t] += &dir[t] * nudge;
                        }
                        let e = evaluate(&cand)?;
                        if e < eval_cost && best.as_ref().map_or(true, |(b, _)| e < *b) {
                            best = Some((e, cand));
                        }
                    }
                }
                if let Some((e, cand)) = best {
                    policy = cand;
                    eval_cost = e;
                }
            }
        }

        log::debug!(
            "iter {iteration}: mean {mean_cost:.4} eval {eval_cost:.4} kl {kl:.3} success {success_rate:.2}"
        );
        curve.push(IterationStats {
            iteration,
            mean_cost,
            kl_epsilon: kl,
            success_rate,
            eval_cost,
        });
    }
    Ok(TrainResult { policy, curve })
}

/// A simulated task wired up as a training environment: rollouts execute
/// in the tabletop world against the task's demonstration.
pub struct SimEnvironment {
    pub task: TaskSpec,
    pub demo: Demo,
    pub ctx: RolloutContext,
    pub initial: WorldState,
    action_lambda: f64,
}

impl SimEnvironment {
    pub fn new(
        task: TaskSpec,
        demo: Demo,
        detector: DetectorConfig,
        initial: WorldState,
        cfg: &OptimizerConfig,
    ) -> Result<Self, TrainError> {
        let ctx = RolloutContext::new(
            &demo.trace,
            task.gains.clone(),
            detector,
            task.cost.clone(),
            task.gripper.clone(),
        )?;
        Ok(SimEnvironment {
            task,
            demo,
            ctx,
            initial,
            action_lambda: cfg.action_cost_lambda,
        })
    }

    fn run(&self, policy: &LinearGaussianPolicy, seed: u64, deterministic: bool) -> Result<crate::sim::Rollout, TrainError> {
        Ok(rollout(&self.initial, policy, &self.demo.trace, &self.ctx, seed, deterministic)?)
    }

    pub fn evaluate(&self, policy: &LinearGaussianPolicy, seed: u64) -> Result<SuccessReport, TrainError> {
        let r = self.run(policy, seed, true)?;
        Ok(success(&self.task, &r.final_state))
    }
}

impl Environment for SimEnvironment {
    fn dims(&self) -> (usize, usize, usize) {
        (self.ctx.feature.state_dim(), 4, self.demo.trace.len())
    }

    fn rollout(
        &self,
        policy: &LinearGaussianPolicy,
        seed: u64,
        deterministic: bool,
    ) -> Result<EnvRollout, TrainError> {
        let r = self.run(policy, seed, deterministic)?;
        let succeeded = success(&self.task, &r.final_state).success;
        Ok(EnvRollout {
            states: r.states,
            actions: r.actions,
            costs: r.costs,
            success: succeeded,
        })
    }

    fn demo_action_hint(&self) -> Option<Vec<DVector<f64>>> {
        // the actions the scripted demonstrator executed, in raw units;
        // includes the yaw rate, which hand positions alone would not carry
        Some(self.demo.actions.clone())
    }

    fn stage_cost(
        &self,
        policy: &LinearGaussianPolicy,
        seed: u64,
    ) -> Result<(Box<dyn StageCost + '_>, EnvRollout), TrainError> {
        let r = self.run(policy, seed, true)?;
        let stage = ImitationStageCost::new(&self.demo.trace, &r, &self.ctx, self.action_lambda);
        let succeeded = success(&self.task, &r.final_state).success;
        let env_rollout = EnvRollout {
            states: r.states,
            actions: r.actions,
            costs: r.costs,
            success: succeeded,
        };
        Ok((Box::new(stage), env_rollout))
    }
}

/// Builds the standard training environment for a task: scripted demo,
/// default detector, start state perturbed in a disk of `perturbation`
/// meters diameter.
pub fn sim_environment(
    task_name: &str,
    cfg: &OptimizerConfig,
    detector: DetectorConfig,
    perturbation: f64,
    seed: u64,
) -> Result<SimEnvironment, TrainError> {
    let task = TaskSpec::builtin(task_name)?;
    let demo = crate::demo::generate_demo_full(&task, seed)?;
    let initial = if perturbation > 0.0 {
        task.perturbed_world(perturbation, seed)?
    } else {
        WorldState::from_scene(&task.scene)?
    };
    SimEnvironment::new(task, demo, detector, initial, cfg)
}
