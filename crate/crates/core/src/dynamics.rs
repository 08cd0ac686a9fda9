//! Time-varying linear dynamics fitted to rollout data by ridge
//! regression, pooling samples from a window of neighboring timesteps.

use crate::policy::PolicyError;
use nalgebra::{DMatrix, DVector};

/// x_{t+1} ≈ A_t x_t + B_t u_t + c_t, with Gaussian residual covariance W_t.
#[derive(Debug, Clone)]
pub struct LinearDynamics {
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
    pub c: Vec<DVector<f64>>,
    pub w: Vec<DMatrix<f64>>,
}

impl LinearDynamics {
    pub fn horizon(&self) -> usize {
        self.a.len()
    }

    pub fn state_dim(&self) -> usize {
        self.a[0].nrows()
    }

    pub fn action_dim(&self) -> usize {
        self.b[0].ncols()
    }

    pub fn predict(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a[t] * x + &self.b[t] * u + &self.c[t]
    }
}

/// Fits per-timestep affine dynamics to trajectories. `states[k]` has
/// length T+1 and `actions[k]` length T. Samples from timesteps within
/// `window` of t are pooled into t's regression.
pub fn fit_dynamics(
    states: &[Vec<DVector<f64>>],
    actions: &[Vec<DVector<f64>>],
    window: usize,
    lambda: f64,
) -> Result<LinearDynamics, PolicyError> {
    if states.is_empty() || states[0].len() < 2 {
        return Err(PolicyError::InsufficientData { needed: 1, got: 0 });
    }
    let horizon = states[0].len() - 1;
    let n = states[0][0].len();
    let m = actions[0][0].len();
    let d = n + m + 1;

    let mut out = LinearDynamics {
        a: Vec::with_capacity(horizon),
        b: Vec::with_capacity(horizon),
        c: Vec::with_capacity(horizon),
        w: Vec::with_capacity(horizon),
    };

    for t in 0..horizon {
        let lo = t.saturating_sub(window);
        let hi = (t + window).min(horizon - 1);
        let mut zs: Vec<DVector<f64>> = Vec::new();
        let mut ys: Vec<DVector<f64>> = Vec::new();
        for (traj_x, traj_u) in states.iter().zip(actions) {
            for s in lo..=hi {
                let mut z = DVector::zeros(d);
                z.rows_mut(0, n).copy_from(&traj_x[s]);
                z.rows_mut(n, m).copy_from(&traj_u[s]);
                z[d - 1] = 1.0;
                zs.push(z);
                ys.push(traj_x[s + 1].clone());
            }
        }
        if zs.len() < d {
            return Err(PolicyError::InsufficientData { needed: d, got: zs.len() });
        }
        let mut gram = DMatrix::from_diagonal_element(d, d, lambda);
        let mut zty = DMatrix::zeros(d, n);
        for (z, y) in zs.iter().zip(&ys) {
            gram += z * z.transpose();
            zty += z * y.transpose();
        }
        let chol = gram
            .cholesky()
            .ok_or_else(|| PolicyError::NonPsd("dynamics regression gram matrix".into()))?;
        // theta is d x n; column j solves for state coordinate j
        let theta = chol.solve(&zty);

        let theta_t = theta.transpose();
        let a = theta_t.columns(0, n).into_owned();
        let b = theta_t.columns(n, m).into_owned();
        let c = theta_t.column(d - 1).into_owned();

        let mut w = DMatrix::zeros(n, n);
        for (z, y) in zs.iter().zip(&ys) {
            let r = y - theta_t.clone() * z;
            w += &r * r.transpose();
        }
        w /= zs.len() as f64;
        // keep the noise model invertible for KL computations
        for i in 0..n {
            w[(i, i)] += 1e-10;
        }

        out.a.push(a);
        out.b.push(b);
        out.c.push(c);
        out.w.push(w);
    }
    Ok(out)
}
