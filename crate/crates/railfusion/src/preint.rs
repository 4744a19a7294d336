//! IMU/odometer preintegration between consecutive keyframes.
//!
//! Raw accelerometer, gyroscope and wheel-odometer samples are folded into a
//! relative-motion pseudo-measurement (alpha, beta, gamma, phi) with a
//! first-order error-state covariance and bias/scale Jacobians, so the graph
//! never has to re-integrate raw data when the linearization point moves.
//!
//! Inputs are treated as zero-order-hold over each sample interval and each
//! interval is integrated in closed form (exact rotation exponential and its
//! first/second integrals), so the accumulated delta matches an arbitrarily
//! fine integration of the same held samples to rounding accuracy.

use crate::geom::{
    skew, so3_double_integral, so3_exp, so3_left_jacobian, so3_right_jacobian, Calibration, Mat3,
    Quat, State, Vec3,
};
use nalgebra::{SMatrix, SVector};
use thiserror::Error;

/// Residual/error-state dimension: [da, db, dth, dba, dbg, dphi, dc].
pub const PREINT_DIM: usize = 19;
/// Noise input dimension: [na, ng, nba, nbg, nv, nc].
const NOISE_DIM: usize = 14;

pub type PreintCov = SMatrix<f64, 19, 19>;
pub type PreintVec = SVector<f64, 19>;
pub type PreintJac = SMatrix<f64, 19, 16>;

// Block offsets inside the error state.
const A: usize = 0;
const B: usize = 3;
const TH: usize = 6;
const BA: usize = 9;
const BG: usize = 12;
const PH: usize = 15;
const C: usize = 18;

#[derive(Debug, Clone, Copy)]
pub struct ImuSample {
    pub t: f64,
    /// Specific force, m/s^2.
    pub accel: Vec3,
    /// Angular rate, rad/s.
    pub gyro: Vec3,
}

#[derive(Debug, Clone, Copy)]
pub struct OdomSample {
    pub t: f64,
    /// Signed speed along the odometer forward axis, m/s.
    pub speed: f64,
}

#[derive(Debug, Error)]
pub enum PreintError {
    #[error("non-monotonic IMU timestamp {t} after {last}")]
    NonMonotonicTimestamp { t: f64, last: f64 },
    #[error("integration step dt must be > 0, got {0}")]
    NonPositiveDt(f64),
}

/// Per-sample noise intensities driving the error-state propagation.
///
/// `sigma_a`/`sigma_g` are continuous white-noise densities, the bias and
/// scale walks are random-walk densities, `sigma_odo_vel` is the per-sample
/// speed noise in m/s.
#[derive(Debug, Clone, Copy)]
pub struct PreintNoise {
    pub sigma_a: f64,
    pub sigma_g: f64,
    pub sigma_ba: f64,
    pub sigma_bg: f64,
    pub sigma_odo_vel: f64,
    pub sigma_odo_scale: f64,
}

impl From<&crate::geom::NoiseConfig> for PreintNoise {
    fn from(n: &crate::geom::NoiseConfig) -> Self {
        PreintNoise {
            sigma_a: n.sigma_a,
            sigma_g: n.sigma_g,
            sigma_ba: n.sigma_ba,
            sigma_bg: n.sigma_bg,
            sigma_odo_vel: n.sigma_odo_vel,
            sigma_odo_scale: n.sigma_odo_scale,
        }
    }
}

/// Accumulated relative-motion increments between two keyframes.
#[derive(Debug, Clone)]
pub struct PreintegratedDelta {
    /// Position increment in the start body frame, m.
    pub alpha: Vec3,
    /// Velocity increment in the start body frame, m/s.
    pub beta: Vec3,
    /// Rotation increment (start body frame to end body frame).
    pub gamma: Quat,
    /// Odometer displacement in the start body frame, m.
    pub phi: Vec3,
    pub dt_total: f64,
    pub linearization_bias_a: Vec3,
    pub linearization_bias_g: Vec3,
    pub linearization_scale: f64,
    pub covariance: PreintCov,
    pub j_alpha_ba: Mat3,
    pub j_alpha_bg: Mat3,
    pub j_beta_ba: Mat3,
    pub j_beta_bg: Mat3,
    /// d(log gamma)/d(bg).
    pub j_theta_bg: Mat3,
    pub j_phi_bg: Mat3,
    pub j_phi_c: Vec3,
}

impl PreintegratedDelta {
    pub fn new(bias_a: Vec3, bias_g: Vec3, scale: f64) -> Self {
        PreintegratedDelta {
            alpha: Vec3::zeros(),
            beta: Vec3::zeros(),
            gamma: Quat::identity(),
            phi: Vec3::zeros(),
            dt_total: 0.0,
            linearization_bias_a: bias_a,
            linearization_bias_g: bias_g,
            linearization_scale: scale,
            covariance: PreintCov::zeros(),
            j_alpha_ba: Mat3::zeros(),
            j_alpha_bg: Mat3::zeros(),
            j_beta_ba: Mat3::zeros(),
            j_beta_bg: Mat3::zeros(),
            j_theta_bg: Mat3::zeros(),
            j_phi_bg: Mat3::zeros(),
            j_phi_c: Vec3::zeros(),
        }
    }

    /// First-order correction of the accumulated increments to a nearby
    /// bias/scale point, without re-integrating. The returned delta carries
    /// the new linearization point; covariance and Jacobians are kept.
    pub fn correct_for_bias(&self, new_ba: &Vec3, new_bg: &Vec3, new_c: f64) -> Self {
        let dba = new_ba - self.linearization_bias_a;
        let dbg = new_bg - self.linearization_bias_g;
        let dc = new_c - self.linearization_scale;
        let mut out = self.clone();
        out.alpha += self.j_alpha_ba * dba + self.j_alpha_bg * dbg;
        out.beta += self.j_beta_ba * dba + self.j_beta_bg * dbg;
        out.gamma = self.gamma * so3_exp(&(self.j_theta_bg * dbg));
        out.phi += self.j_phi_bg * dbg + self.j_phi_c * dc;
        out.linearization_bias_a = *new_ba;
        out.linearization_bias_g = *new_bg;
        out.linearization_scale = new_c;
        out
    }

    /// Forward prediction of the end-of-interval state from the start state.
    pub fn predict(&self, xk: &State, gravity: &Vec3) -> State {
        let dt = self.dt_total;
        let corr = self.correct_for_bias(&xk.ba, &xk.bg, xk.c);
        let rk = xk.q;
        State {
            p: xk.p + xk.v * dt - 0.5 * gravity * dt * dt + rk * corr.alpha,
            v: xk.v - gravity * dt + rk * corr.beta,
            q: rk * corr.gamma,
            ba: xk.ba,
            bg: xk.bg,
            c: xk.c,
        }
    }
}

/// Streaming accumulator; exclusively owned by one producer, the finished
/// delta is immutable.
#[derive(Debug, Clone)]
pub struct Preintegrator {
    pub delta: PreintegratedDelta,
    noise: PreintNoise,
    /// Odometer frame orientation in body.
    r_odo: Quat,
    last_t: Option<f64>,
    pub t_start: f64,
}

impl Preintegrator {
    pub fn new(
        t_start: f64,
        bias_a: Vec3,
        bias_g: Vec3,
        scale: f64,
        noise: PreintNoise,
        r_odo: Quat,
    ) -> Self {
        Preintegrator {
            delta: PreintegratedDelta::new(bias_a, bias_g, scale),
            noise,
            r_odo,
            last_t: None,
            t_start,
        }
    }

    /// Integrate one IMU sample with the odometer speed held over the same
    /// interval `[imu.t - dt, imu.t]`.
    pub fn integrate_step(
        &mut self,
        imu: &ImuSample,
        odo_speed: f64,
        dt: f64,
    ) -> Result<(), PreintError> {
        if dt <= 0.0 {
            return Err(PreintError::NonPositiveDt(dt));
        }
        if let Some(last) = self.last_t {
            if imu.t <= last {
                return Err(PreintError::NonMonotonicTimestamp { t: imu.t, last });
            }
        }
        self.last_t = Some(imu.t);

        let d = &mut self.delta;
        let a = imu.accel - d.linearization_bias_a;
        let w = imu.gyro - d.linearization_bias_g;
        let c_hat = d.linearization_scale;
        let v_odo_body = self.r_odo * Vec3::new(odo_speed, 0.0, 0.0);

        let phi_step = w * dt;
        let ri = d.gamma.to_rotation_matrix().into_inner();
        let step_rot = so3_exp(&phi_step);
        let jl = so3_left_jacobian(&phi_step);
        let jr = so3_right_jacobian(&phi_step);
        let kk = so3_double_integral(&phi_step);

        // Exact increments for constant inputs over the step.
        let u_a = jl * a * dt;
        let w_a = kk * a * (dt * dt);
        let u_o = jl * (v_odo_body * c_hat) * dt;

        // Error-state transition and noise injection.
        let step_rot_t = step_rot.to_rotation_matrix().into_inner().transpose();
        let mut f = PreintCov::identity();
        f.fixed_view_mut::<3, 3>(A, B).copy_from(&(Mat3::identity() * dt));
        f.fixed_view_mut::<3, 3>(A, TH).copy_from(&(-ri * skew(&w_a)));
        f.fixed_view_mut::<3, 3>(A, BA).copy_from(&(-ri * kk * (dt * dt)));
        f.fixed_view_mut::<3, 3>(B, TH).copy_from(&(-ri * skew(&u_a)));
        f.fixed_view_mut::<3, 3>(B, BA).copy_from(&(-ri * jl * dt));
        f.fixed_view_mut::<3, 3>(TH, TH).copy_from(&step_rot_t);
        f.fixed_view_mut::<3, 3>(TH, BG).copy_from(&(-jr * dt));
        f.fixed_view_mut::<3, 3>(PH, TH).copy_from(&(-ri * skew(&u_o)));
        f.fixed_view_mut::<3, 1>(PH, C)
            .copy_from(&(ri * jl * v_odo_body * dt));

        let mut g = SMatrix::<f64, PREINT_DIM, NOISE_DIM>::zeros();
        g.fixed_view_mut::<3, 3>(A, 0).copy_from(&(ri * kk * (dt * dt)));
        g.fixed_view_mut::<3, 3>(B, 0).copy_from(&(ri * jl * dt));
        g.fixed_view_mut::<3, 3>(TH, 3).copy_from(&(jr * dt));
        g.fixed_view_mut::<3, 3>(BA, 6).copy_from(&Mat3::identity());
        g.fixed_view_mut::<3, 3>(BG, 9).copy_from(&Mat3::identity());
        g.fixed_view_mut::<3, 1>(PH, 12)
            .copy_from(&(ri * jl * (self.r_odo * Vec3::new(1.0, 0.0, 0.0)) * dt));
        g[(C, 13)] = 1.0;

        let n = &self.noise;
        let mut q = SMatrix::<f64, NOISE_DIM, NOISE_DIM>::zeros();
        for i in 0..3 {
            q[(i, i)] = n.sigma_a * n.sigma_a / dt;
            q[(3 + i, 3 + i)] = n.sigma_g * n.sigma_g / dt;
            q[(6 + i, 6 + i)] = n.sigma_ba * n.sigma_ba * dt;
            q[(9 + i, 9 + i)] = n.sigma_bg * n.sigma_bg * dt;
        }
        q[(12, 12)] = n.sigma_odo_vel * n.sigma_odo_vel;
        q[(13, 13)] = n.sigma_odo_scale * n.sigma_odo_scale * dt;

        d.covariance = f * d.covariance * f.transpose() + g * q * g.transpose();
        // Keep exactly symmetric under accumulation.
        d.covariance = (d.covariance + d.covariance.transpose()) * 0.5;

        // Chain bias/scale Jacobians (old values on the right-hand sides).
        let j_theta_old = d.j_theta_bg;
        let j_beta_ba_old = d.j_beta_ba;
        let j_beta_bg_old = d.j_beta_bg;
        d.j_alpha_ba += j_beta_ba_old * dt - ri * kk * (dt * dt);
        d.j_alpha_bg += j_beta_bg_old * dt - ri * skew(&w_a) * j_theta_old;
        d.j_beta_ba -= ri * jl * dt;
        d.j_beta_bg -= ri * skew(&u_a) * j_theta_old;
        d.j_phi_bg -= ri * skew(&u_o) * j_theta_old;
        d.j_phi_c += ri * jl * v_odo_body * dt;
        d.j_theta_bg = step_rot_t * j_theta_old - jr * dt;

        // Nominal increments.
        d.alpha += d.beta * dt + ri * w_a;
        d.beta += ri * u_a;
        d.phi += ri * u_o;
        d.gamma = d.gamma * step_rot;
        d.dt_total += dt;
        Ok(())
    }
}

/// Zero-order-hold interpolator mapping odometer samples onto IMU timestamps
/// so a single integration loop runs at IMU rate.
#[derive(Debug, Clone)]
pub struct OdoInterp<'a> {
    samples: &'a [OdomSample],
    cursor: usize,
}

impl<'a> OdoInterp<'a> {
    pub fn new(samples: &'a [OdomSample]) -> Self {
        OdoInterp { samples, cursor: 0 }
    }

    /// Speed of the latest sample at or before `t` (first sample before any
    /// data, 0 for an empty stream). `t` must be non-decreasing across calls.
    pub fn speed_at(&mut self, t: f64) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        while self.cursor + 1 < self.samples.len() && self.samples[self.cursor + 1].t <= t {
            self.cursor += 1;
        }
        self.samples[self.cursor].speed
    }
}

/// Evaluate the preintegration residual
/// `[da, db, dth, dba, dbg, dphi, dc]` between two keyframe states, plus
/// analytic Jacobians with respect to both state tangents.
pub fn preint_residual(
    delta: &PreintegratedDelta,
    xk: &State,
    xk1: &State,
    calib: &Calibration,
    gravity: &Vec3,
) -> (PreintVec, PreintJac, PreintJac) {
    let dt = delta.dt_total;
    let corr = delta.correct_for_bias(&xk.ba, &xk.bg, xk.c);

    let rk = xk.q.to_rotation_matrix().into_inner();
    let rk_t = rk.transpose();
    let rk1 = xk1.q.to_rotation_matrix().into_inner();
    let lever = calib.odo_lever();

    let s = xk1.p - xk.p + 0.5 * gravity * dt * dt - xk.v * dt;
    let u = xk1.v + gravity * dt - xk.v;
    let w0 = xk1.p + rk1 * lever - xk.p;

    let r_alpha = rk_t * s - corr.alpha;
    let r_beta = rk_t * u - corr.beta;

    // dq = qk^-1 * qk1 * gamma^-1, canonicalized to the w >= 0 sheet.
    let mut dq = xk.q.inverse() * xk1.q * corr.gamma.inverse();
    if dq.w < 0.0 {
        dq = Quat::from_quaternion(nalgebra::Quaternion::new(-dq.w, -dq.i, -dq.j, -dq.k));
    }
    let aw = dq.w;
    let av = Vec3::new(dq.i, dq.j, dq.k);
    let r_theta = 2.0 * av;

    let r_phi = rk_t * w0 - lever - corr.phi;

    let mut r = PreintVec::zeros();
    r.fixed_view_mut::<3, 1>(A, 0).copy_from(&r_alpha);
    r.fixed_view_mut::<3, 1>(B, 0).copy_from(&r_beta);
    r.fixed_view_mut::<3, 1>(TH, 0).copy_from(&r_theta);
    r.fixed_view_mut::<3, 1>(BA, 0).copy_from(&(xk1.ba - xk.ba));
    r.fixed_view_mut::<3, 1>(BG, 0).copy_from(&(xk1.bg - xk.bg));
    r.fixed_view_mut::<3, 1>(PH, 0).copy_from(&r_phi);
    r[C] = xk1.c - xk.c;

    // State tangent column offsets.
    const P: usize = 0;
    const V: usize = 3;
    const THC: usize = 6;
    const BAC: usize = 9;
    const BGC: usize = 12;
    const CC: usize = 15;

    let theta_gain = aw * Mat3::identity() + skew(&av);
    let r_gamma = corr.gamma.to_rotation_matrix().into_inner();

    let mut jk = PreintJac::zeros();
    jk.fixed_view_mut::<3, 3>(A, P).copy_from(&(-rk_t));
    jk.fixed_view_mut::<3, 3>(A, V).copy_from(&(-rk_t * dt));
    jk.fixed_view_mut::<3, 3>(A, THC).copy_from(&skew(&(rk_t * s)));
    jk.fixed_view_mut::<3, 3>(A, BAC).copy_from(&(-delta.j_alpha_ba));
    jk.fixed_view_mut::<3, 3>(A, BGC).copy_from(&(-delta.j_alpha_bg));
    jk.fixed_view_mut::<3, 3>(B, V).copy_from(&(-rk_t));
    jk.fixed_view_mut::<3, 3>(B, THC).copy_from(&skew(&(rk_t * u)));
    jk.fixed_view_mut::<3, 3>(B, BAC).copy_from(&(-delta.j_beta_ba));
    jk.fixed_view_mut::<3, 3>(B, BGC).copy_from(&(-delta.j_beta_bg));
    jk.fixed_view_mut::<3, 3>(TH, THC)
        .copy_from(&(-aw * Mat3::identity() + skew(&av)));
    jk.fixed_view_mut::<3, 3>(TH, BGC)
        .copy_from(&(-(theta_gain * r_gamma * delta.j_theta_bg)));
    jk.fixed_view_mut::<3, 3>(BA, BAC).copy_from(&(-Mat3::identity()));
    jk.fixed_view_mut::<3, 3>(BG, BGC).copy_from(&(-Mat3::identity()));
    jk.fixed_view_mut::<3, 3>(PH, P).copy_from(&(-rk_t));
    jk.fixed_view_mut::<3, 3>(PH, THC).copy_from(&skew(&(rk_t * w0)));
    jk.fixed_view_mut::<3, 3>(PH, BGC).copy_from(&(-delta.j_phi_bg));
    jk.fixed_view_mut::<3, 1>(PH, CC).copy_from(&(-delta.j_phi_c));
    jk[(C, CC)] = -1.0;

    let mut jk1 = PreintJac::zeros();
    jk1.fixed_view_mut::<3, 3>(A, P).copy_from(&rk_t);
    jk1.fixed_view_mut::<3, 3>(B, V).copy_from(&rk_t);
    jk1.fixed_view_mut::<3, 3>(TH, THC).copy_from(&(theta_gain * r_gamma));
    jk1.fixed_view_mut::<3, 3>(BA, BAC).copy_from(&Mat3::identity());
    jk1.fixed_view_mut::<3, 3>(BG, BGC).copy_from(&Mat3::identity());
    jk1.fixed_view_mut::<3, 3>(PH, P).copy_from(&rk_t);
    jk1.fixed_view_mut::<3, 3>(PH, THC)
        .copy_from(&(-rk_t * rk1 * skew(&lever)));
    jk1[(C, CC)] = 1.0;

    (r, jk, jk1)
}

/// Brute-force oracle: world-frame propagation of the same held samples at a
/// finer substep, re-expressed in the start frame. Gravity-free start at the
/// origin, so the final world state equals (alpha, beta, gamma, phi) directly.
#[doc(hidden)]
pub fn zoh_oracle(
    samples: &[(ImuSample, f64)],
    bias_a: &Vec3,
    bias_g: &Vec3,
    scale: f64,
    r_odo: &Quat,
    dt_coarse: f64,
    substeps: usize,
) -> (Vec3, Vec3, Quat, Vec3) {
    let mut p = Vec3::zeros();
    let mut v = Vec3::zeros();
    let mut q = Quat::identity();
    let mut po = Vec3::zeros();
    let h = dt_coarse / substeps as f64;
    for (imu, speed) in samples {
        let a = imu.accel - bias_a;
        let w = imu.gyro - bias_g;
        let vo = *r_odo * Vec3::new(scale * speed, 0.0, 0.0);
        for _ in 0..substeps {
            let r = q.to_rotation_matrix().into_inner();
            let jl = so3_left_jacobian(&(w * h));
            let kk = so3_double_integral(&(w * h));
            p += v * h + r * kk * a * (h * h);
            v += r * jl * a * h;
            po += r * jl * vo * h;
            q = q * so3_exp(&(w * h));
        }
    }
    (p, v, q, po)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{so3_log, NoiseConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use std::f64::consts::FRAC_PI_2;

    fn quiet_noise() -> PreintNoise {
        PreintNoise {
            sigma_a: 0.0,
            sigma_g: 0.0,
            sigma_ba: 0.0,
            sigma_bg: 0.0,
            sigma_odo_vel: 0.0,
            sigma_odo_scale: 0.0,
        }
    }

    fn integrate_constant(
        accel: Vec3,
        gyro: Vec3,
        speed: f64,
        rate: f64,
        duration: f64,
        noise: PreintNoise,
    ) -> Preintegrator {
        let mut pre = Preintegrator::new(
            0.0,
            Vec3::zeros(),
            Vec3::zeros(),
            1.0,
            noise,
            Quat::identity(),
        );
        let dt = 1.0 / rate;
        let n = (duration * rate).round() as usize;
        for i in 0..n {
            let imu = ImuSample {
                t: (i + 1) as f64 * dt,
                accel,
                gyro,
            };
            pre.integrate_step(&imu, speed, dt).unwrap();
        }
        pre
    }

    #[test]
    fn zero_input_stays_at_identity() {
        let pre = integrate_constant(
            Vec3::zeros(),
            Vec3::zeros(),
            0.0,
            200.0,
            1.0,
            quiet_noise(),
        );
        let d = &pre.delta;
        assert!(d.alpha.norm() < 1e-15);
        assert!(d.beta.norm() < 1e-15);
        assert!(d.phi.norm() < 1e-15);
        assert!(d.gamma.angle() < 1e-15);
        assert!((d.dt_total - 1.0).abs() < 1e-12);
        assert!(d.covariance.norm() == 0.0);
    }

    #[test]
    fn constant_acceleration_closed_form() {
        let pre = integrate_constant(
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::zeros(),
            0.0,
            200.0,
            1.0,
            quiet_noise(),
        );
        assert!((pre.delta.alpha - Vec3::new(0.5, 0.0, 0.0)).norm() < 1e-12);
        assert!((pre.delta.beta - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn constant_rate_rotation() {
        let pre = integrate_constant(
            Vec3::zeros(),
            Vec3::new(0.0, 0.0, FRAC_PI_2),
            0.0,
            200.0,
            1.0,
            quiet_noise(),
        );
        let expect = so3_exp(&Vec3::new(0.0, 0.0, FRAC_PI_2));
        assert!(pre.delta.gamma.angle_to(&expect) < 1e-4);
    }

    #[test]
    fn constant_odometer_displacement() {
        let pre = integrate_constant(
            Vec3::zeros(),
            Vec3::zeros(),
            2.0,
            200.0,
            1.0,
            quiet_noise(),
        );
        assert!((pre.delta.phi - Vec3::new(2.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn rejects_non_monotonic_and_bad_dt() {
        let mut pre = Preintegrator::new(
            0.0,
            Vec3::zeros(),
            Vec3::zeros(),
            1.0,
            quiet_noise(),
            Quat::identity(),
        );
        let imu = ImuSample {
            t: 0.01,
            accel: Vec3::zeros(),
            gyro: Vec3::zeros(),
        };
        pre.integrate_step(&imu, 0.0, 0.01).unwrap();
        assert!(pre.integrate_step(&imu, 0.0, 0.01).is_err());
        let imu2 = ImuSample { t: 0.02, ..imu };
        assert!(pre.integrate_step(&imu2, 0.0, 0.0).is_err());
    }

    fn random_stream(rng: &mut impl Rng, rate: f64, duration: f64) -> Vec<(ImuSample, f64)> {
        let dt = 1.0 / rate;
        let n = (duration * rate).round() as usize;
        (0..n)
            .map(|i| {
                (
                    ImuSample {
                        t: (i + 1) as f64 * dt,
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
                    rng.gen_range(-3.0..3.0),
                )
            })
            .collect()
    }

    #[test]
    fn matches_fine_integration_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let r_odo = so3_exp(&Vec3::new(0.01, -0.02, 0.03));
        for _ in 0..5 {
            let ba = Vec3::new(0.05, -0.02, 0.01);
            let bg = Vec3::new(0.001, 0.002, -0.001);
            let scale = 1.02;
            let stream = random_stream(&mut rng, 200.0, 1.0);
            let mut pre = Preintegrator::new(0.0, ba, bg, scale, quiet_noise(), r_odo);
            for (imu, speed) in &stream {
                pre.integrate_step(imu, *speed, 1.0 / 200.0).unwrap();
            }
            let (p, v, q, po) = zoh_oracle(&stream, &ba, &bg, scale, &r_odo, 1.0 / 200.0, 50);
            let d = &pre.delta;
            assert!((d.alpha - p).norm() / p.norm().max(1.0) < 1e-6, "alpha");
            assert!((d.beta - v).norm() / v.norm().max(1.0) < 1e-6, "beta");
            assert!((d.phi - po).norm() / po.norm().max(1.0) < 1e-6, "phi");
            assert!(so3_log(&(q.inverse() * d.gamma)).norm() < 1e-6, "gamma");
        }
    }

    #[test]
    fn covariance_trace_monotone_and_zero_noise_zero() {
        let noise = PreintNoise::from(&NoiseConfig::default());
        let mut pre = Preintegrator::new(
            0.0,
            Vec3::zeros(),
            Vec3::zeros(),
            1.0,
            noise,
            Quat::identity(),
        );
        let mut last = 0.0;
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for (imu, speed) in random_stream(&mut rng, 200.0, 0.5) {
            pre.integrate_step(&imu, speed, 1.0 / 200.0).unwrap();
            let tr = pre.delta.covariance.trace();
            assert!(tr >= last - 1e-18);
            last = tr;
        }
        assert!(last > 0.0);
        // Symmetric PSD.
        let eig = pre.delta.covariance.symmetric_eigenvalues();
        assert!(eig.min() > -1e-15);
    }

    #[test]
    fn bias_correction_identity_and_reintegration() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let r_odo = Quat::identity();
        let ba = Vec3::new(0.02, -0.01, 0.03);
        let bg = Vec3::new(0.002, 0.001, -0.002);
        let stream = random_stream(&mut rng, 200.0, 1.0);

        let mut pre = Preintegrator::new(0.0, ba, bg, 1.0, quiet_noise(), r_odo);
        for (imu, speed) in &stream {
            pre.integrate_step(imu, *speed, 1.0 / 200.0).unwrap();
        }
        let d = &pre.delta;

        // Same point: unchanged.
        let same = d.correct_for_bias(&ba, &bg, 1.0);
        assert!((same.alpha - d.alpha).norm() < 1e-15);
        assert!(same.gamma.angle_to(&d.gamma) < 1e-15);

        // Small perturbation: first-order correction tracks re-integration.
        let dba = Vec3::new(1.0, -1.0, 0.5).normalize() * 1e-3;
        let dbg = Vec3::new(0.5, 1.0, -1.0).normalize() * 1e-3;
        let corrected = d.correct_for_bias(&(ba + dba), &(bg + dbg), 1.0);
        let mut re = Preintegrator::new(0.0, ba + dba, bg + dbg, 1.0, quiet_noise(), r_odo);
        for (imu, speed) in &stream {
            re.integrate_step(imu, *speed, 1.0 / 200.0).unwrap();
        }
        assert!(
            (corrected.alpha - re.delta.alpha).norm() < 1e-6,
            "alpha gap {:.3e}",
            (corrected.alpha - re.delta.alpha).norm()
        );
        assert!(
            (corrected.beta - re.delta.beta).norm() < 1e-6,
            "beta gap {:.3e}",
            (corrected.beta - re.delta.beta).norm()
        );
        assert!(
            (corrected.phi - re.delta.phi).norm() < 1e-6,
            "phi gap {:.3e}",
            (corrected.phi - re.delta.phi).norm()
        );
        assert!(corrected.gamma.angle_to(&re.delta.gamma) < 1e-6);
    }

    #[test]
    fn scale_correction_is_exactly_linear() {
        let pre = integrate_constant(
            Vec3::zeros(),
            Vec3::zeros(),
            2.0,
            200.0,
            1.0,
            quiet_noise(),
        );
        let corr = pre
            .delta
            .correct_for_bias(&Vec3::zeros(), &Vec3::zeros(), 1.0 + 1e-3);
        assert!((corr.phi - pre.delta.phi - Vec3::new(2e-3, 0.0, 0.0)).norm() < 1e-9);
    }

    fn random_state(rng: &mut impl Rng) -> State {
        State {
            p: Vec3::new(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)),
            v: Vec3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)),
            q: so3_exp(&Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))),
            ba: Vec3::new(rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)),
            bg: Vec3::new(rng.gen_range(-0.005..0.005), rng.gen_range(-0.005..0.005), rng.gen_range(-0.005..0.005)),
            c: rng.gen_range(0.95..1.05),
        }
    }

    #[test]
    fn residual_zero_on_consistent_states() {
        // Noiseless forward simulation of a vehicle on flat curves: yaw-only
        // rotation, constant forward speed, odometer at the body origin. The
        // accelerometer sees the centripetal term plus the rotated gravity
        // offset; the resulting sample stream is exactly consistent with
        // every residual row including the odometer displacement.
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let mut calib = Calibration::default();
        calib.p_odo_in_body = [0.0, 0.0, 0.0];
        calib.r_odo_in_body = [1.0, 0.0, 0.0, 0.0];
        let gravity = Vec3::new(0.0, 0.0, 9.81);

        let speed = 8.0;
        let ba = Vec3::new(0.01, -0.02, 0.015);
        let bg = Vec3::new(0.001, -0.001, 0.002);
        let c_true = 1.02;
        let xk = State {
            p: Vec3::new(3.0, -2.0, 1.0),
            v: so3_exp(&Vec3::new(0.0, 0.0, 0.7)) * Vec3::new(speed, 0.0, 0.0),
            q: so3_exp(&Vec3::new(0.0, 0.0, 0.7)),
            ba,
            bg,
            c: c_true,
        };

        let dt = 1.0 / 200.0;
        let mut pre = Preintegrator::new(0.0, ba, bg, c_true, quiet_noise(), calib.r_odo());
        let mut q_body = xk.q;
        for i in 0..160 {
            let _ = i;
            let omega = Vec3::new(0.0, 0.0, rng.gen_range(-0.4..0.4));
            let a_body = omega.cross(&Vec3::new(speed, 0.0, 0.0));
            let accel = a_body + q_body.inverse() * gravity + ba;
            let imu = ImuSample {
                t: (i + 1) as f64 * dt,
                accel,
                gyro: omega + bg,
            };
            pre.integrate_step(&imu, speed / c_true, dt).unwrap();
            q_body = xk.q * pre.delta.gamma;
        }

        let mut xk1 = pre.delta.predict(&xk, &gravity);
        let (r, _, _) = preint_residual(&pre.delta, &xk, &xk1, &calib, &gravity);
        assert!(r.norm() < 1e-8, "full residual {:.3e}", r.norm());

        // Perturbing the end position moves the alpha row by R_k^T dp.
        let eps = Vec3::new(1e-3, 0.0, 0.0);
        xk1.p += eps;
        let (r2, _, _) = preint_residual(&pre.delta, &xk, &xk1, &calib, &gravity);
        let expect = xk.q.to_rotation_matrix().into_inner().transpose() * eps;
        let got = r2.fixed_view::<3, 1>(A, 0) - r.fixed_view::<3, 1>(A, 0);
        assert!((got - expect).norm() < 1e-9);
    }

    #[test]
    fn residual_jacobians_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let calib = Calibration::default();
        let gravity = Vec3::new(0.0, 0.0, 9.81);
        for _ in 0..20 {
            let xk = random_state(&mut rng);
            let xk1 = random_state(&mut rng);
            let stream = random_stream(&mut rng, 200.0, 0.3);
            let mut pre =
                Preintegrator::new(0.0, xk.ba, xk.bg, xk.c, quiet_noise(), calib.r_odo());
            for (imu, speed) in &stream {
                pre.integrate_step(imu, *speed, 1.0 / 200.0).unwrap();
            }
            let (_, jk, jk1) = preint_residual(&pre.delta, &xk, &xk1, &calib, &gravity);
            let eps = 1e-6;
            for col in 0..16 {
                let mut dp = [0.0; 16];
                dp[col] = eps;
                let mut dm = [0.0; 16];
                dm[col] = -eps;
                // Perturb xk.
                let (rp, _, _) =
                    preint_residual(&pre.delta, &xk.retract(&dp), &xk1, &calib, &gravity);
                let (rm, _, _) =
                    preint_residual(&pre.delta, &xk.retract(&dm), &xk1, &calib, &gravity);
                let fd = (rp - rm) / (2.0 * eps);
                let col_j = jk.column(col);
                assert!(
                    (fd - col_j).norm() <= 1e-5 * col_j.norm().max(1.0),
                    "J_k col {col}: fd {fd:?} vs {col_j:?}"
                );
                // Perturb xk1.
                let (rp, _, _) =
                    preint_residual(&pre.delta, &xk, &xk1.retract(&dp), &calib, &gravity);
                let (rm, _, _) =
                    preint_residual(&pre.delta, &xk, &xk1.retract(&dm), &calib, &gravity);
                let fd = (rp - rm) / (2.0 * eps);
                let col_j = jk1.column(col);
                assert!(
                    (fd - col_j).norm() <= 1e-5 * col_j.norm().max(1.0),
                    "J_k1 col {col}"
                );
            }
        }
    }
}
