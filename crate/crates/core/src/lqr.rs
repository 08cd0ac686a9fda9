//! KL-constrained LQR backward pass on fitted time-varying linear dynamics
//! and quadratized stage costs, producing a time-varying linear-Gaussian
//! policy whose expected divergence from the previous policy is bounded.

use crate::dynamics::LinearDynamics;
use crate::policy::{LinearGaussianPolicy, PolicyError};
use crate::quadcost::QuadCost;
use nalgebra::{DMatrix, DVector};

/// Solves the backward recursion for the stage costs augmented with
/// eta * KL(pi || prev) quadratics. Returns the policy with
/// Sigma_t = Quu_t^{-1}.
fn backward_pass(
    dynamics: &LinearDynamics,
    costs: &[QuadCost],
    prev: &LinearGaussianPolicy,
    eta: f64,
) -> Result<LinearGaussianPolicy, PolicyError> {
    let horizon = dynamics.horizon();
    let n = dynamics.state_dim();
    let m = dynamics.action_dim();
    assert_eq!(costs.len(), horizon + 1);
    assert_eq!(prev.horizon(), horizon);

    let mut gains = vec![DMatrix::zeros(m, n); horizon];
    let mut offsets = vec![DVector::zeros(m); horizon];
    let mut covariances = vec![DMatrix::zeros(m, m); horizon];

    // terminal value function
    let mut v_mat = costs[horizon].cxx.clone();
    let mut v_vec = costs[horizon].cx.clone();

    for t in (0..horizon).rev() {
        let c = &costs[t];
        let mut cxx = c.cxx.clone();
        let mut cuu = c.cuu.clone();
        let mut cux = c.cux.clone();
        let mut cx = c.cx.clone();
        let mut cu = c.cu.clone();

        if eta > 0.0 {
            // quadratic expansion of eta * KL(N(Kx+k, .) || N(K^x+k^, S^)):
            // 1/2 (u - K^x - k^)' S^-1 (u - K^x - k^) in (x, u)
            let prev_prec = prev.covariances[t]
                .clone()
                .cholesky()
                .ok_or_else(|| PolicyError::NonPsd(format!("prev policy covariance at t={t}")))?
                .inverse();
            let khat = &prev.gains[t];
            let kvec = &prev.offsets[t];
            cuu += &prev_prec * eta;
            cux += -(&prev_prec * khat) * eta;
            cxx += (khat.transpose() * &prev_prec * khat) * eta;
            cu += -(&prev_prec * kvec) * eta;
            cx += (khat.transpose() * (&prev_prec * kvec)) * eta;
        }

        let a = &dynamics.a[t];
        let b = &dynamics.b[t];
        let cc = &dynamics.c[t];

        let va = &v_mat * a;
        let vb = &v_mat * b;
        let qxx = cxx + a.transpose() * &va;
        let quu = cuu + b.transpose() * &vb;
        let qux = cux + b.transpose() * &va;
        let vc_plus = &v_mat * cc + &v_vec;
        let qx = cx + a.transpose() * &vc_plus;
        let qu = cu + b.transpose() * &vc_plus;

        let quu_sym = (&quu + quu.transpose()) * 0.5;
        let chol = quu_sym
            .clone()
            .cholesky()
            .ok_or_else(|| PolicyError::NonPsd(format!("action Hessian at t={t}")))?;
        let gain = -chol.solve(&qux);
        let offset = -chol.solve(&qu);
        let sigma = chol.inverse();

        v_mat = &qxx + qux.transpose() * &gain;
        v_mat = (&v_mat + v_mat.transpose()) * 0.5;
        v_vec = &qx + qux.transpose() * &offset;

        gains[t] = gain;
        offsets[t] = offset;
        covariances[t] = (&sigma + sigma.transpose()) * 0.5;
    }

    Ok(LinearGaussianPolicy { gains, offsets, covariances })
}

/// Expected per-trajectory divergence of the new policy mean from the
/// previous policy, measured in the previous policy's action metric: the
/// mean-difference terms of the Gaussian KL, with the state marginal
/// propagated from `x0` forward under the new policy. Entropy terms are
/// deliberately excluded: the backward pass shrinks covariances toward the
/// action Hessian, and penalizing that would lock the trust region shut
/// whenever the exploration covariance is wide.
pub fn expected_kl(
    dynamics: &LinearDynamics,
    new: &LinearGaussianPolicy,
    prev: &LinearGaussianPolicy,
    x0: &DVector<f64>,
) -> Result<f64, PolicyError> {
    let horizon = dynamics.horizon();
    let n = dynamics.state_dim();
    let mut mu = x0.clone();
    let mut s = DMatrix::<f64>::zeros(n, n);
    let mut total = 0.0;
    for t in 0..horizon {
        let prev_chol = prev.covariances[t]
            .clone()
            .cholesky()
            .ok_or_else(|| PolicyError::NonPsd(format!("prev covariance at t={t}")))?;
        let prev_prec = prev_chol.inverse();

        let dk = &new.gains[t] - &prev.gains[t];
        let delta = &dk * &mu + &new.offsets[t] - &prev.offsets[t];
        let mean_term = delta.dot(&(&prev_prec * &delta))
            + (&prev_prec * (&dk * &s * dk.transpose())).trace();
        total += 0.5 * mean_term;

        // propagate the marginal under the new policy
        let a = &dynamics.a[t];
        let b = &dynamics.b[t];
        let k = &new.gains[t];
        let closed = a + b * k;
        mu = a * &mu + b * (k * &mu + &new.offsets[t]) + &dynamics.c[t];
        s = &closed * &s * closed.transpose()
            + b * &new.covariances[t] * b.transpose()
            + &dynamics.w[t];
        s = (&s + s.transpose()) * 0.5;
    }
    Ok(total)
}

/// LQR update with a KL trust region: finds the smallest dual variable eta
/// (by log-space bisection) whose backward-pass policy satisfies
/// expected KL(new || prev) <= kl_epsilon, starting the rollout at x0.
pub fn lqr_backward(
    dynamics: &LinearDynamics,
    costs: &[QuadCost],
    prev: &LinearGaussianPolicy,
    kl_epsilon: f64,
    x0: &DVector<f64>,
) -> Result<LinearGaussianPolicy, PolicyError> {
    // an indefinite action Hessian at small eta is not fatal: the KL term
    // adds prev-precision curvature, so treat it as "eta too small"
    match backward_pass(dynamics, costs, prev, 0.0) {
        Ok(unconstrained) => {
            if expected_kl(dynamics, &unconstrained, prev, x0)? <= kl_epsilon {
                return Ok(unconstrained);
            }
        }
        Err(PolicyError::NonPsd(_)) => {}
        Err(e) => return Err(e),
    }
    let (mut lo, mut hi) = (1e-6f64, 1e16f64);
    let mut best: Option<LinearGaussianPolicy> = None;
    for _ in 0..60 {
        let eta = (lo * hi).sqrt();
        match backward_pass(dynamics, costs, prev, eta) {
            Ok(candidate) => {
                let kl = expected_kl(dynamics, &candidate, prev, x0)?;
                if kl <= kl_epsilon {
                    best = Some(candidate);
                    hi = eta;
                } else {
                    lo = eta;
                }
            }
            Err(PolicyError::NonPsd(_)) => lo = eta,
            Err(e) => return Err(e),
        }
        if hi / lo < 1.0 + 1e-3 {
            break;
        }
    }
    match best {
        Some(p) => Ok(p),
        // constraint unreachable: return the most conservative candidate
        None => backward_pass(dynamics, costs, prev, hi),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::LinearDynamics;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_lq(
        rng: &mut ChaCha8Rng,
        n: usize,
        m: usize,
        horizon: usize,
    ) -> (LinearDynamics, Vec<QuadCost>) {
        let a = DMatrix::from_fn(n, n, |_, _| 0.3 * rng.sample::<f64, _>(StandardNormal))
            + DMatrix::identity(n, n) * 0.8;
        let b = DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let c = DVector::from_fn(n, |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal));
        let dynamics = LinearDynamics {
            a: vec![a; horizon],
            b: vec![b; horizon],
            c: vec![c; horizon],
            w: vec![DMatrix::identity(n, n) * 1e-6; horizon],
        };
        let qx = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let cxx = &qx * qx.transpose() + DMatrix::identity(n, n);
        let cuu = DMatrix::identity(m, m) * (0.5 + rng.gen::<f64>());
        let cx = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut costs = Vec::new();
        for _ in 0..=horizon {
            costs.push(QuadCost {
                cxx: cxx.clone(),
                cuu: cuu.clone(),
                cux: DMatrix::zeros(m, n),
                cx: cx.clone(),
                cu: DVector::zeros(m),
                c0: 0.0,
            });
        }
        (dynamics, costs)
    }

    /// Independent oracle: finite-horizon Riccati recursion on the
    /// homogeneous system z = [x; 1], solved with explicit inverses.
    fn riccati_oracle(
        dynamics: &LinearDynamics,
        costs: &[QuadCost],
    ) -> (Vec<DMatrix<f64>>, Vec<DVector<f64>>) {
        let horizon = dynamics.horizon();
        let n = dynamics.state_dim();
        let m = dynamics.action_dim();
        // augmented transition: z' = F z + G u with z = [x; 1]
        let mut p = DMatrix::zeros(n + 1, n + 1);
        p.view_mut((0, 0), (n, n)).copy_from(&costs[horizon].cxx);
        p.view_mut((0, n), (n, 1)).copy_from(&costs[horizon].cx);
        p.view_mut((n, 0), (1, n)).copy_from(&costs[horizon].cx.transpose());
        p[(n, n)] = 2.0 * costs[horizon].c0;

        let mut gains = vec![DMatrix::zeros(m, n); horizon];
        let mut offsets = vec![DVector::zeros(m); horizon];
        for t in (0..horizon).rev() {
            let mut f = DMatrix::zeros(n + 1, n + 1);
            f.view_mut((0, 0), (n, n)).copy_from(&dynamics.a[t]);
            f.view_mut((0, n), (n, 1)).copy_from(&dynamics.c[t]);
            f[(n, n)] = 1.0;
            let mut g = DMatrix::zeros(n + 1, m);
            g.view_mut((0, 0), (n, m)).copy_from(&dynamics.b[t]);

            let mut q = DMatrix::zeros(n + 1, n + 1);
            q.view_mut((0, 0), (n, n)).copy_from(&costs[t].cxx);
            q.view_mut((0, n), (n, 1)).copy_from(&costs[t].cx);
            q.view_mut((n, 0), (1, n)).copy_from(&costs[t].cx.transpose());
            q[(n, n)] = 2.0 * costs[t].c0;
            let r = &costs[t].cuu;
            let mut nmat = DMatrix::zeros(m, n + 1); // u-z cross term
            nmat.view_mut((0, 0), (m, n)).copy_from(&costs[t].cux);
            nmat.view_mut((0, n), (m, 1)).copy_from(&costs[t].cu);

            let h = r + g.transpose() * &p * &g;
            let l = nmat + g.transpose() * &p * &f;
            let h_inv = h.try_inverse().expect("oracle action Hessian invertible");
            let kz = -&h_inv * &l; // m x (n+1)
            p = q + f.transpose() * &p * &f - l.transpose() * &h_inv * &l;
            p = (&p + p.transpose()) * 0.5;
            gains[t] = kz.columns(0, n).into_owned();
            offsets[t] = kz.column(n).into_owned();
        }
        (gains, offsets)
    }

    #[test]
    fn unconstrained_solution_matches_riccati_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let n = rng.gen_range(2..5);
            let m = rng.gen_range(1..4);
            let horizon = rng.gen_range(3..12);
            let (dynamics, costs) = random_lq(&mut rng, n, m, horizon);
            let prev = LinearGaussianPolicy::init(n, m, horizon, &vec![1.0; m]);
            let x0 = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let policy = lqr_backward(&dynamics, &costs, &prev, f64::INFINITY, &x0).unwrap();
            let (ok, oo) = riccati_oracle(&dynamics, &costs);
            for t in 0..horizon {
                assert!(
                    (&policy.gains[t] - &ok[t]).amax() <= 1e-6,
                    "trial {trial} gain mismatch at t={t}"
                );
                assert!(
                    (&policy.offsets[t] - &oo[t]).amax() <= 1e-6,
                    "trial {trial} offset mismatch at t={t}"
                );
            }
        }
    }

    #[test]
    fn scalar_double_integrator_matches_oracle() {
        // position/velocity chain with force input
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.005, 0.1]);
        let horizon = 20;
        let dynamics = LinearDynamics {
            a: vec![a; horizon],
            b: vec![b; horizon],
            c: vec![DVector::zeros(2); horizon],
            w: vec![DMatrix::identity(2, 2) * 1e-8; horizon],
        };
        let costs: Vec<QuadCost> = (0..=horizon)
            .map(|_| QuadCost {
                cxx: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.1])),
                cuu: DMatrix::from_element(1, 1, 0.01),
                cux: DMatrix::zeros(1, 2),
                cx: DVector::zeros(2),
                cu: DVector::zeros(1),
                c0: 0.0,
            })
            .collect();
        let prev = LinearGaussianPolicy::init(2, 1, horizon, &[1.0]);
        let x0 = DVector::from_vec(vec![1.0, 0.0]);
        let policy = lqr_backward(&dynamics, &costs, &prev, f64::INFINITY, &x0).unwrap();
        let (ok, _) = riccati_oracle(&dynamics, &costs);
        for t in 0..horizon {
            assert!((&policy.gains[t] - &ok[t]).amax() <= 1e-6, "t={t}");
        }
    }

    #[test]
    fn tiny_trust_region_stays_at_previous_gains() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (dynamics, costs) = random_lq(&mut rng, 3, 2, 8);
        let mut prev = LinearGaussianPolicy::init(3, 2, 8, &[1.0, 1.0]);
        for t in 0..8 {
            prev.gains[t] = DMatrix::from_fn(2, 3, |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal));
            prev.offsets[t] = DVector::from_fn(2, |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal));
        }
        let x0 = DVector::from_vec(vec![1.0, -1.0, 0.5]);
        let tight = lqr_backward(&dynamics, &costs, &prev, 1e-6, &x0).unwrap();
        let loose = lqr_backward(&dynamics, &costs, &prev, 1e-1, &x0).unwrap();
        let dev = |p: &LinearGaussianPolicy| {
            (0..8)
                .map(|t| (&p.gains[t] - &prev.gains[t]).amax())
                .fold(0.0f64, f64::max)
        };
        assert!(dev(&tight) < dev(&loose));
        assert!(dev(&tight) < 1e-2, "tight deviation {}", dev(&tight));
    }

    #[test]
    fn trust_region_bounds_expected_kl() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (dynamics, costs) = random_lq(&mut rng, 3, 2, 8);
        let prev = LinearGaussianPolicy::init(3, 2, 8, &[1.0, 1.0]);
        let x0 = DVector::from_vec(vec![1.0, -1.0, 0.5]);
        for eps in [0.5, 2.0, 10.0] {
            let policy = lqr_backward(&dynamics, &costs, &prev, eps, &x0).unwrap();
            let kl = expected_kl(&dynamics, &policy, &prev, &x0).unwrap();
            assert!(kl <= eps * 1.001, "eps={eps} kl={kl}");
        }
    }

    #[test]
    fn identical_policies_have_zero_kl() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (dynamics, _) = random_lq(&mut rng, 3, 2, 6);
        let prev = LinearGaussianPolicy::init(3, 2, 6, &[0.7, 0.7]);
        let x0 = DVector::from_vec(vec![0.2, 0.0, -0.4]);
        let kl = expected_kl(&dynamics, &prev, &prev, &x0).unwrap();
        assert!(kl.abs() < 1e-10);
    }
}
