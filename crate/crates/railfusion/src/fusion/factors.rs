//! Concrete factors assembled into the sliding-window problem.
//!
//! Every factor hands the solver whitened residuals and Jacobians; noise
//! models live here, geometry lives in the front-end modules.

use super::graph::{Factor, FactorEval, Variable, VarKey};
use crate::geom::{skew, Calibration, Mat3, State, Vec3, STATE_DIM};
use crate::preint::{preint_residual, PreintegratedDelta, PREINT_DIM};
use nalgebra::{DMatrix, DVector};

/// Rows of the preintegration residual kept when the odometer is disabled:
/// everything except the displacement block (the scale random walk stays so
/// the scale chain remains anchored).
const NO_ODO_ROWS: [usize; 16] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 18];

/// Plain linear factor `r = sum_i A_i x_i - b` over vector variables; the
/// workhorse of the solver and marginalization oracles.
pub struct LinearFactor {
    keys: Vec<VarKey>,
    jacs: Vec<DMatrix<f64>>,
    b: DVector<f64>,
}

impl LinearFactor {
    pub fn new(keys: Vec<VarKey>, jacs: Vec<DMatrix<f64>>, b: DVector<f64>) -> Self {
        LinearFactor { keys, jacs, b }
    }

    /// Unary prior `w * (x - target)`.
    pub fn prior(key: VarKey, target: &[f64], weight: f64) -> Self {
        let d = target.len();
        LinearFactor {
            keys: vec![key],
            jacs: vec![DMatrix::identity(d, d) * weight],
            b: DVector::from_row_slice(target) * weight,
        }
    }
}

impl Factor for LinearFactor {
    fn keys(&self) -> &[VarKey] {
        &self.keys
    }

    fn dim(&self) -> usize {
        self.b.len()
    }

    fn linearize(&self, vars: &[Variable]) -> FactorEval {
        let mut r = -self.b.clone();
        for (jac, &k) in self.jacs.iter().zip(&self.keys) {
            let x = match &vars[k] {
                Variable::Vector(v) => v,
                _ => panic!("LinearFactor needs vector variables"),
            };
            r += jac * x;
        }
        FactorEval {
            residual: r,
            jacobians: self.jacs.clone(),
        }
    }
}

/// Diagonal Gaussian prior on a full state, used to anchor the first
/// keyframe (gauge) and to seed biases/scale.
pub struct StatePriorFactor {
    key: [VarKey; 1],
    target: State,
    /// Inverse sigmas per tangent coordinate.
    weights: [f64; STATE_DIM],
}

impl StatePriorFactor {
    pub fn new(key: VarKey, target: State, sigmas: [f64; STATE_DIM]) -> Self {
        let mut weights = [0.0; STATE_DIM];
        for (w, s) in weights.iter_mut().zip(sigmas) {
            *w = 1.0 / s;
        }
        StatePriorFactor {
            key: [key],
            target,
            weights,
        }
    }
}

impl Factor for StatePriorFactor {
    fn keys(&self) -> &[VarKey] {
        &self.key
    }

    fn dim(&self) -> usize {
        STATE_DIM
    }

    fn linearize(&self, vars: &[Variable]) -> FactorEval {
        let x = vars[self.key[0]].as_state();
        let lin = Variable::State(self.target);
        let cur = Variable::State(*x);
        let local = lin.local(&cur);
        let mut r = DVector::zeros(STATE_DIM);
        let mut j = lin.local_jacobian(&cur);
        for i in 0..STATE_DIM {
            r[i] = self.weights[i] * local[i];
            for c in 0..STATE_DIM {
                j[(i, c)] *= self.weights[i];
            }
        }
        FactorEval {
            residual: r,
            jacobians: vec![j],
        }
    }
}

/// IMU/odometer preintegration factor between consecutive keyframes,
/// whitened by the propagated error-state covariance.
pub struct PreintFactor {
    keys: [VarKey; 2],
    delta: PreintegratedDelta,
    calib: Calibration,
    gravity: Vec3,
    use_odometer: bool,
    /// Cached inverse square-root information (rows x rows).
    sqrt_info: DMatrix<f64>,
    rows: Vec<usize>,
}

impl PreintFactor {
    pub fn new(
        k0: VarKey,
        k1: VarKey,
        delta: PreintegratedDelta,
        calib: Calibration,
        gravity: Vec3,
        use_odometer: bool,
    ) -> Self {
        let rows: Vec<usize> = if use_odometer {
            (0..PREINT_DIM).collect()
        } else {
            NO_ODO_ROWS.to_vec()
        };
        let n = rows.len();
        let mut cov = DMatrix::zeros(n, n);
        for (i, &ri) in rows.iter().enumerate() {
            for (j, &rj) in rows.iter().enumerate() {
                cov[(i, j)] = delta.covariance[(ri, rj)];
            }
        }
        let jitter = 1e-14 * cov.diagonal().amax().max(1e-8);
        for i in 0..n {
            cov[(i, i)] += jitter;
        }
        let chol = cov.cholesky().expect("preint covariance not PD");
        let sqrt_info = chol
            .l()
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .expect("triangular solve");
        PreintFactor {
            keys: [k0, k1],
            delta,
            calib,
            gravity,
            use_odometer,
            sqrt_info,
            rows,
        }
    }

    pub fn delta(&self) -> &PreintegratedDelta {
        &self.delta
    }
}

impl Factor for PreintFactor {
    fn keys(&self) -> &[VarKey] {
        &self.keys
    }

    fn dim(&self) -> usize {
        self.rows.len()
    }

    fn linearize(&self, vars: &[Variable]) -> FactorEval {
        let xk = vars[self.keys[0]].as_state();
        let xk1 = vars[self.keys[1]].as_state();
        let (r, jk, jk1) = preint_residual(&self.delta, xk, xk1, &self.calib, &self.gravity);
        let n = self.rows.len();
        let mut r_sel = DVector::zeros(n);
        let mut jk_sel = DMatrix::zeros(n, STATE_DIM);
        let mut jk1_sel = DMatrix::zeros(n, STATE_DIM);
        for (i, &ri) in self.rows.iter().enumerate() {
            r_sel[i] = r[ri];
            for c in 0..STATE_DIM {
                jk_sel[(i, c)] = jk[(ri, c)];
                jk1_sel[(i, c)] = jk1[(ri, c)];
            }
        }
        let _ = self.use_odometer;
        FactorEval {
            residual: &self.sqrt_info * r_sel,
            jacobians: vec![&self.sqrt_info * jk_sel, &self.sqrt_info * jk1_sel],
        }
    }
}

/// Global position factor tying a keyframe to a GNSS fix a little later in
/// time, with the between-keyframe-and-fix motion preintegrated and the
/// antenna lever arm mapped to the fix epoch.
pub struct GnssFactor {
    key: [VarKey; 1],
    /// Fix position in local ENU.
    pub position: Vec3,
    /// Preintegrated motion from the keyframe to the fix time.
    delta: PreintegratedDelta,
    lever: Vec3,
    gravity: Vec3,
    sqrt_info: Mat3,
}

impl GnssFactor {
    pub fn new(
        key: VarKey,
        position: Vec3,
        covariance: Mat3,
        delta: PreintegratedDelta,
        calib: &Calibration,
        gravity: Vec3,
    ) -> Self {
        let chol = covariance
            .cholesky()
            .expect("GNSS covariance not positive definite");
        let sqrt_info = chol
            .l()
            .solve_lower_triangular(&Mat3::identity())
            .expect("triangular solve");
        GnssFactor {
            key: [key],
            position,
            delta,
            lever: calib.antenna_lever(),
            gravity,
            sqrt_info,
        }
    }

    /// Unwhitened residual at a state, also used by the innovation gate.
    pub fn raw_residual(&self, xk: &State) -> Vec3 {
        let dt = self.delta.dt_total;
        let corr = self
            .delta
            .correct_for_bias(&xk.ba, &xk.bg, xk.c);
        let rk_t = xk.q.to_rotation_matrix().into_inner().transpose();
        let s0 = self.position - xk.p + 0.5 * self.gravity * dt * dt - xk.v * dt;
        rk_t * s0 - corr.gamma * self.lever - corr.alpha
    }
}

impl Factor for GnssFactor {
    fn keys(&self) -> &[VarKey] {
        &self.key
    }

    fn dim(&self) -> usize {
        3
    }

    fn linearize(&self, vars: &[Variable]) -> FactorEval {
        let xk = vars[self.key[0]].as_state();
        let dt = self.delta.dt_total;
        let corr = self.delta.correct_for_bias(&xk.ba, &xk.bg, xk.c);
        let rk_t = xk.q.to_rotation_matrix().into_inner().transpose();
        let s0 = self.position - xk.p + 0.5 * self.gravity * dt * dt - xk.v * dt;
        let r = rk_t * s0 - corr.gamma * self.lever - corr.alpha;

        let r_gamma = corr.gamma.to_rotation_matrix().into_inner();
        let mut j = DMatrix::zeros(3, STATE_DIM);
        j.view_mut((0, 0), (3, 3)).copy_from(&(-rk_t));
        j.view_mut((0, 3), (3, 3)).copy_from(&(-rk_t * dt));
        j.view_mut((0, 6), (3, 3)).copy_from(&skew(&(rk_t * s0)));
        j.view_mut((0, 9), (3, 3)).copy_from(&(-self.delta.j_alpha_ba));
        j.view_mut((0, 12), (3, 3)).copy_from(
            &(r_gamma * skew(&self.lever) * self.delta.j_theta_bg - self.delta.j_alpha_bg),
        );
        let si = DMatrix::from_fn(3, 3, |a, b| self.sqrt_info[(a, b)]);
        FactorEval {
            residual: DVector::from_fn(3, |i, _| (self.sqrt_info * r)[i]),
            jacobians: vec![&si * j],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::graph::FactorGraph;
    use crate::geom::so3_exp;
    use crate::preint::{ImuSample, PreintNoise, Preintegrator};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rand_state(rng: &mut impl Rng) -> State {
        State {
            p: Vec3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)),
            v: Vec3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)),
            q: so3_exp(&Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))),
            ba: Vec3::new(rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)),
            bg: Vec3::new(rng.gen_range(-0.005..0.005), rng.gen_range(-0.005..0.005), rng.gen_range(-0.005..0.005)),
            c: rng.gen_range(0.95..1.05),
        }
    }

    /// Finite-difference check helper shared by the factor tests.
    pub(crate) fn check_factor_jacobians(
        factor: &dyn Factor,
        vars: &mut [Variable],
        tol: f64,
    ) {
        let eval = factor.linearize(vars);
        let eps = 1e-6;
        for (i, &k) in factor.keys().iter().enumerate() {
            let dim = vars[k].dim();
            for c in 0..dim {
                let mut dp = vec![0.0; dim];
                dp[c] = eps;
                let saved = vars[k].clone();
                vars[k] = saved.retract(&dp);
                let rp = factor.linearize(vars).residual;
                dp[c] = -eps;
                vars[k] = saved.retract(&dp);
                let rm = factor.linearize(vars).residual;
                vars[k] = saved;
                let fd = (rp - rm) / (2.0 * eps);
                let col = eval.jacobians[i].column(c).into_owned();
                let denom = col.norm().max(1.0);
                assert!(
                    (fd.clone() - col.clone()).norm() <= tol * denom,
                    "factor jac key {i} col {c}: fd {fd:?} vs analytic {col:?}"
                );
            }
        }
    }

    #[test]
    fn state_prior_pulls_to_target() {
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let target = rand_state(&mut rng);
        let mut g = FactorGraph::new();
        let k = g.add_variable(Variable::State(target.retract(&[0.1; STATE_DIM])));
        g.add_factor(Box::new(StatePriorFactor::new(
            k,
            target,
            [0.01; STATE_DIM],
        )));
        g.solve(&Default::default()).unwrap();
        let got = g.vars[k].as_state();
        assert!((got.p - target.p).norm() < 1e-8);
        assert!(got.q.angle_to(&target.q) < 1e-8);
    }

    #[test]
    fn state_prior_jacobian_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let target = rand_state(&mut rng);
        let f = StatePriorFactor::new(0, target, [0.2; STATE_DIM]);
        let mut vars = vec![Variable::State(target.retract(&[0.05; STATE_DIM]))];
        check_factor_jacobians(&f, &mut vars, 1e-5);
    }

    #[test]
    fn gnss_factor_cases_and_jacobian() {
        let mut rng = ChaCha12Rng::seed_from_u64(43);
        let calib = Calibration::default();
        let gravity = Vec3::new(0.0, 0.0, 9.81);
        let zero_delta = PreintegratedDelta::new(Vec3::zeros(), Vec3::zeros(), 1.0);

        // dt = 0, zero lever, fix at the state position: residual 0.
        let mut calib0 = calib.clone();
        calib0.p_antenna_in_body = [0.0, 0.0, 0.0];
        let x = rand_state(&mut rng);
        let f = GnssFactor::new(
            0,
            x.p,
            Mat3::identity(),
            zero_delta.clone(),
            &calib0,
            gravity,
        );
        assert!(f.raw_residual(&x).norm() < 1e-12);

        // dt = 0, identity orientation, 1 m offset: residual is the offset.
        let mut x2 = x;
        x2.q = crate::geom::Quat::identity();
        let f2 = GnssFactor::new(
            0,
            x2.p + Vec3::new(1.0, 0.0, 0.0),
            Mat3::identity(),
            zero_delta.clone(),
            &calib0,
            gravity,
        );
        assert!((f2.raw_residual(&x2) - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-12);

        // Jacobian vs finite differences with a non-trivial mid-interval delta.
        for _ in 0..20 {
            let xk = rand_state(&mut rng);
            let mut pre = Preintegrator::new(
                0.0,
                xk.ba,
                xk.bg,
                xk.c,
                PreintNoise {
                    sigma_a: 0.0,
                    sigma_g: 0.0,
                    sigma_ba: 0.0,
                    sigma_bg: 0.0,
                    sigma_odo_vel: 0.0,
                    sigma_odo_scale: 0.0,
                },
                calib.r_odo(),
            );
            for i in 0..40 {
                pre.integrate_step(
                    &ImuSample {
                        t: (i + 1) as f64 / 200.0,
                        accel: Vec3::new(
                            rng.gen_range(-2.0..2.0),
                            rng.gen_range(-2.0..2.0),
                            rng.gen_range(-2.0..2.0),
                        ),
                        gyro: Vec3::new(
                            rng.gen_range(-0.5..0.5),
                            rng.gen_range(-0.5..0.5),
                            rng.gen_range(-0.5..0.5),
                        ),
                    },
                    rng.gen_range(-2.0..2.0),
                    1.0 / 200.0,
                )
                .unwrap();
            }
            let f = GnssFactor::new(
                0,
                Vec3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)),
                Mat3::identity() * rng.gen_range(0.5..2.0),
                pre.delta.clone(),
                &calib,
                gravity,
            );
            let mut vars = vec![Variable::State(xk)];
            check_factor_jacobians(&f, &mut vars, 1e-5);
        }
    }

    #[test]
    fn preint_factor_whitens_and_matches_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(44);
        let calib = Calibration::default();
        let gravity = Vec3::new(0.0, 0.0, 9.81);
        let noise = PreintNoise {
            sigma_a: 0.05,
            sigma_g: 0.002,
            sigma_ba: 1e-4,
            sigma_bg: 1e-5,
            sigma_odo_vel: 0.05,
            sigma_odo_scale: 1e-4,
        };
        for use_odo in [true, false] {
            let xk = rand_state(&mut rng);
            let xk1 = rand_state(&mut rng);
            let mut pre = Preintegrator::new(0.0, xk.ba, xk.bg, xk.c, noise, calib.r_odo());
            for i in 0..60 {
                pre.integrate_step(
                    &ImuSample {
                        t: (i + 1) as f64 / 200.0,
                        accel: Vec3::new(
                            rng.gen_range(-2.0..2.0),
                            rng.gen_range(-2.0..2.0),
                            rng.gen_range(-2.0..2.0),
                        ),
                        gyro: Vec3::new(
                            rng.gen_range(-0.4..0.4),
                            rng.gen_range(-0.4..0.4),
                            rng.gen_range(-0.4..0.4),
                        ),
                    },
                    rng.gen_range(-2.0..2.0),
                    1.0 / 200.0,
                )
                .unwrap();
            }
            let f = PreintFactor::new(
                0,
                1,
                pre.delta.clone(),
                calib.clone(),
                gravity,
                use_odo,
            );
            assert_eq!(f.dim(), if use_odo { 19 } else { 16 });
            let mut vars = vec![Variable::State(xk), Variable::State(xk1)];
            check_factor_jacobians(&f, &mut vars, 2e-5);
        }
    }
}
