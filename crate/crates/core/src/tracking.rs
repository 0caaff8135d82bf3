//! Constant-velocity tracking: motion and measurement models, the posterior
//! information recursion and the extended Kalman filter step.
//!
//! State is `(x, y, z, ẋ, ẏ, ż)`; a measurement is
//! `(range, radial velocity, azimuth, pitch)`.

use std::f64::consts::PI;

use nalgebra::{
    Cholesky, Matrix2, Matrix4, Matrix4x6, Matrix6, Matrix6x4, Vector3, Vector4, Vector6,
};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};

pub type StateVec = Vector6<f64>;
pub type MeasVec = Vector4<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrackState {
    pub estimate: StateVec,
    pub covariance: Matrix6<f64>,
    pub information: Matrix6<f64>,
}

impl TrackState {
    /// Start with `M₀ = diag(10 m², 10 m², 10 m², 1, 1, 1 (m/s)²)` and `J₀ = M₀⁻¹`.
    pub fn initial(estimate: StateVec) -> Self {
        let covariance = Matrix6::from_diagonal(&Vector6::new(10.0, 10.0, 10.0, 1.0, 1.0, 1.0));
        let information = Matrix6::from_diagonal(&Vector6::new(0.1, 0.1, 0.1, 1.0, 1.0, 1.0));
        Self {
            estimate,
            covariance,
            information,
        }
    }

    pub fn with_covariance(estimate: StateVec, covariance: Matrix6<f64>) -> Result<Self> {
        let information = covariance
            .try_inverse()
            .ok_or(Error::Singular("initial covariance"))?;
        Ok(Self {
            estimate,
            covariance,
            information: symmetric(&information),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackModel {
    pub transition: Matrix6<f64>,
    pub process: Matrix6<f64>,
    pub sample_time: f64,
    pub process_intensity: f64,
    /// Measurement covariance over `(range, radial velocity, azimuth, pitch)`.
    pub measurement: Matrix4<f64>,
}

impl TrackModel {
    pub fn new(
        sample_time: f64,
        process_intensity: f64,
        measurement: Matrix4<f64>,
    ) -> Result<Self> {
        let (transition, process) = transition_and_process(sample_time, process_intensity)?;
        Ok(Self {
            transition,
            process,
            sample_time,
            process_intensity,
            measurement,
        })
    }

    pub fn with_measurement_variances(mut self, variances: [f64; 4]) -> Self {
        self.measurement = Matrix4::from_diagonal(&Vector4::from(variances));
        self
    }
}

fn kron_i3(k: &Matrix2<f64>) -> Matrix6<f64> {
    let mut out = Matrix6::zeros();
    for (bi, bj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        for d in 0..3 {
            out[(3 * bi + d, 3 * bj + d)] = k[(bi, bj)];
        }
    }
    out
}

fn symmetric<const D: usize>(m: &nalgebra::SMatrix<f64, D, D>) -> nalgebra::SMatrix<f64, D, D> {
    (m + m.transpose()) * 0.5
}

/// Constant-velocity transition and white-acceleration process covariance.
pub fn transition_and_process(
    sample_time: f64,
    intensity: f64,
) -> Result<(Matrix6<f64>, Matrix6<f64>)> {
    if !(sample_time > 0.0) || !sample_time.is_finite() {
        return Err(invalid("sample time must be positive"));
    }
    if !(intensity >= 0.0) {
        return Err(invalid("process-noise intensity must be non-negative"));
    }
    let t = sample_time;
    let f = kron_i3(&Matrix2::new(1.0, t, 0.0, 1.0));
    let kernel = Matrix2::new(t.powi(3) / 3.0, t * t / 2.0, t * t / 2.0, t);
    Ok((f, kron_i3(&(kernel * intensity))))
}

/// Wrap to `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}

/// Measurement map and its analytic Jacobian at `e`.
pub fn measure_and_jacobian(e: &StateVec) -> Result<(MeasVec, Matrix4x6<f64>)> {
    let p = Vector3::new(e[0], e[1], e[2]);
    let v = Vector3::new(e[3], e[4], e[5]);
    let d2 = p.norm_squared();
    if !(d2 > 0.0) {
        return Err(invalid("position must be nonzero"));
    }
    let rho2 = p.x * p.x + p.y * p.y;
    if !(rho2 > 0.0) {
        return Err(Error::Singular("azimuth undefined on the vertical axis"));
    }
    let d = d2.sqrt();
    let rho = rho2.sqrt();
    let vr = p.dot(&v) / d;
    let q = MeasVec::new(d, vr, p.y.atan2(p.x), p.z.atan2(rho));

    let mut h = Matrix4x6::zeros();
    for i in 0..3 {
        h[(0, i)] = p[i] / d;
        h[(1, i)] = v[i] / d - vr * p[i] / d2;
        h[(1, 3 + i)] = p[i] / d;
    }
    h[(2, 0)] = -p.y / rho2;
    h[(2, 1)] = p.x / rho2;
    h[(3, 0)] = -p.z * p.x / (d2 * rho);
    h[(3, 1)] = -p.z * p.y / (d2 * rho);
    h[(3, 2)] = rho / d2;
    Ok((q, h))
}

fn measurement_information(psi: &Matrix4<f64>) -> Result<Matrix4<f64>> {
    Cholesky::new(symmetric(psi))
        .map(|c| c.inverse())
        .ok_or(Error::Singular("measurement covariance"))
}

/// Posterior information `(Δ + F J⁻¹ Fᵀ)⁻¹ + Hᵀ Ψ⁻¹ H`.
pub fn posterior_fim(
    prev: &Matrix6<f64>,
    transition: &Matrix6<f64>,
    process: &Matrix6<f64>,
    jacobian: &Matrix4x6<f64>,
    measurement: &Matrix4<f64>,
) -> Result<Matrix6<f64>> {
    let info = measurement_information(measurement)?;
    posterior_fim_with_information(prev, transition, process, jacobian, &info)
}

/// As [`posterior_fim`] with the measurement information `Ψ⁻¹` given directly,
/// which may be zero.
pub fn posterior_fim_with_information(
    prev: &Matrix6<f64>,
    transition: &Matrix6<f64>,
    process: &Matrix6<f64>,
    jacobian: &Matrix4x6<f64>,
    measurement_info: &Matrix4<f64>,
) -> Result<Matrix6<f64>> {
    let prev_inv = Cholesky::new(symmetric(prev))
        .ok_or(Error::Singular("previous information"))?
        .inverse();
    let predicted = symmetric(&(process + transition * prev_inv * transition.transpose()));
    let prior = Cholesky::new(predicted)
        .ok_or(Error::Singular("predicted covariance"))?
        .inverse();
    let data: Matrix6<f64> = jacobian.transpose() * measurement_info * jacobian;
    Ok(symmetric(&(prior + data)))
}

/// Tracking quality measure: trace of the posterior information.
pub fn tracking_qos(information: &Matrix6<f64>) -> f64 {
    information.trace()
}

fn innovation(measured: &MeasVec, predicted: &MeasVec) -> MeasVec {
    let mut r = measured - predicted;
    r[2] = wrap_angle(r[2]);
    r[3] = wrap_angle(r[3]);
    r
}

/// One predict/update cycle. The information matrix of the returned state is
/// propagated with [`posterior_fim`] using the Jacobian at the prediction.
pub fn ekf_step(state: &TrackState, model: &TrackModel, measured: &MeasVec) -> Result<TrackState> {
    let f = &model.transition;
    let e_pred = f * state.estimate;
    let m_pred = symmetric(&(f * state.covariance * f.transpose() + model.process));
    let (q_pred, h) = measure_and_jacobian(&e_pred)?;
    let s = symmetric(&(model.measurement + h * m_pred * h.transpose()));
    let s_inv = Cholesky::new(s)
        .ok_or(Error::Singular("innovation covariance"))?
        .inverse();
    let gain: Matrix6x4<f64> = m_pred * h.transpose() * s_inv;
    let estimate = e_pred + gain * innovation(measured, &q_pred);
    let covariance = symmetric(&((Matrix6::identity() - gain * h) * m_pred));
    let information = match measurement_information(&model.measurement) {
        Ok(info) => {
            posterior_fim_with_information(&state.information, f, &model.process, &h, &info)?
        }
        Err(_) => return Err(Error::Singular("measurement covariance")),
    };
    Ok(TrackState {
        estimate,
        covariance,
        information,
    })
}

/// Draw a zero-mean Gaussian vector with covariance `cov` (PSD, possibly singular).
pub fn gaussian_with_covariance<R: Rng + ?Sized, const D: usize>(
    rng: &mut R,
    cov: &nalgebra::SMatrix<f64, D, D>,
) -> nalgebra::SVector<f64, D> {
    let eig = nalgebra::DMatrix::from_fn(D, D, |i, j| 0.5 * (cov[(i, j)] + cov[(j, i)]))
        .symmetric_eigen();
    let z = nalgebra::DVector::from_fn(D, |i, _| {
        let z: f64 = StandardNormal.sample(rng);
        eig.eigenvalues[i].max(0.0).sqrt() * z
    });
    let out = eig.eigenvectors * z;
    nalgebra::SVector::<f64, D>::from_fn(|i, _| out[i])
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackRun {
    pub truth: Vec<StateVec>,
    pub estimates: Vec<StateVec>,
    /// Posterior information along the true trajectory.
    pub bound_information: Vec<Matrix6<f64>>,
}

/// Simulate a noisy constant-velocity trajectory, its measurements and the
/// filter output over `steps` cycles. The filter starts from a draw of its own
/// initial covariance around `start`.
pub fn simulate_track<R: Rng + ?Sized>(
    rng: &mut R,
    model: &TrackModel,
    start: &StateVec,
    steps: usize,
) -> Result<TrackRun> {
    simulate_track_varying(rng, model, start, &vec![model.measurement; steps])
}

/// As [`simulate_track`] with a measurement covariance per step; the run
/// lasts `measurements.len()` steps and `model.measurement` is ignored.
pub fn simulate_track_varying<R: Rng + ?Sized>(
    rng: &mut R,
    model: &TrackModel,
    start: &StateVec,
    measurements: &[Matrix4<f64>],
) -> Result<TrackRun> {
    let steps = measurements.len();
    let mut model = model.clone();
    let init = TrackState::initial(*start);
    let mut filter = TrackState {
        estimate: start + gaussian_with_covariance(rng, &init.covariance),
        ..init.clone()
    };
    let mut bound = init.information;
    let mut x = *start;
    let mut run = TrackRun {
        truth: Vec::with_capacity(steps),
        estimates: Vec::with_capacity(steps),
        bound_information: Vec::with_capacity(steps),
    };
    for psi in measurements {
        model.measurement = *psi;
        x = model.transition * x + gaussian_with_covariance(rng, &model.process);
        let (q_true, h_true) = measure_and_jacobian(&x)?;
        let measured = q_true + gaussian_with_covariance(rng, &model.measurement);
        filter = ekf_step(&filter, &model, &measured)?;
        bound = posterior_fim(
            &bound,
            &model.transition,
            &model.process,
            &h_true,
            &model.measurement,
        )?;
        run.truth.push(x);
        run.estimates.push(filter.estimate);
        run.bound_information.push(bound);
    }
    Ok(run)
}

/// Bound on the range error implied by a state information matrix at `x`.
pub fn range_bound(information: &Matrix6<f64>, x: &StateVec) -> Result<f64> {
    let (_, h) = measure_and_jacobian(x)?;
    let cov = Cholesky::new(symmetric(information))
        .ok_or(Error::Singular("posterior information"))?
        .inverse();
    let g = h.row(0).transpose();
    Ok((g.transpose() * cov * g)[(0, 0)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn transition_blocks() {
        let (f, d) = transition_and_process(0.02, 0.0).unwrap();
        assert_eq!(f[(0, 3)], 0.02);
        assert_eq!(f[(2, 5)], 0.02);
        assert_eq!(f[(3, 0)], 0.0);
        assert_eq!(d, Matrix6::zeros());
        let x = StateVec::new(1.0, 2.0, 3.0, 4.0, -5.0, 6.0);
        let y = f * x;
        assert_eq!(
            y.fixed_rows::<3>(0),
            (x.fixed_rows::<3>(0) + x.fixed_rows::<3>(3) * 0.02)
        );
        assert!(transition_and_process(0.0, 1.0).is_err());
    }

    #[test]
    fn measurement_of_345() {
        let (q, h) = measure_and_jacobian(&StateVec::new(3.0, 4.0, 0.0, 0.0, 0.0, 0.0)).unwrap();
        assert!((q[0] - 5.0).abs() < 1e-15);
        assert_eq!(q[1], 0.0);
        assert!((q[2].to_degrees() - 53.130102354).abs() < 1e-8);
        assert_eq!(q[3], 0.0);
        assert_eq!(
            h.row(0).iter().copied().collect::<Vec<_>>(),
            vec![0.6, 0.8, 0.0, 0.0, 0.0, 0.0]
        );
        assert!(measure_and_jacobian(&StateVec::zeros()).is_err());
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let e = StateVec::new(-70.0, -50.0, 25.0, 0.0, 10.0, 0.0);
        let (_, h) = measure_and_jacobian(&e).unwrap();
        for j in 0..6 {
            let step = 1e-5 * e[j].abs().max(1.0);
            let mut up = e;
            let mut dn = e;
            up[j] += step;
            dn[j] -= step;
            let diff = (measure_and_jacobian(&up).unwrap().0
                - measure_and_jacobian(&dn).unwrap().0)
                / (2.0 * step);
            for i in 0..4 {
                let scale = h.row(i).norm();
                assert!((diff[i] - h[(i, j)]).abs() <= 1e-6 * scale, "({i},{j})");
            }
        }
    }

    #[test]
    fn wrap_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-15);
        assert!((wrap_angle(0.1) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn information_without_measurement_is_prior_only() {
        let e = StateVec::new(50.0, 55.0, 50.0, 5.0, 5.0, 0.0);
        let (f, d) = transition_and_process(0.02, 0.5).unwrap();
        let (_, h) = measure_and_jacobian(&e).unwrap();
        let j0 = TrackState::initial(e).information;
        let j = posterior_fim_with_information(&j0, &f, &d, &h, &Matrix4::zeros()).unwrap();
        let prior = (d + f * j0.try_inverse().unwrap() * f.transpose())
            .try_inverse()
            .unwrap();
        assert!((j - prior).norm() <= 1e-12 * prior.norm());

        let psi = Matrix4::from_diagonal(&Vector4::new(0.1, 0.01, 1e-4, 1e-4));
        let j = posterior_fim(&j0, &Matrix6::identity(), &Matrix6::zeros(), &h, &psi).unwrap();
        let expect = j0 + h.transpose() * psi.try_inverse().unwrap() * h;
        assert!((j - expect).norm() <= 1e-10 * expect.norm());
        assert_eq!(tracking_qos(&j), j.trace());
    }

    #[test]
    fn noiseless_track_is_exact() {
        let truth0 = StateVec::new(50.0, 100.0, 50.0, -10.0, 0.0, 0.0);
        let model =
            TrackModel::new(0.02, 0.0, Matrix4::from_diagonal(&Vector4::repeat(1e-12))).unwrap();
        let mut state = TrackState::initial(truth0);
        let mut x = truth0;
        for _ in 0..100 {
            x = model.transition * x;
            let (q, _) = measure_and_jacobian(&x).unwrap();
            state = ekf_step(&state, &model, &q).unwrap();
            assert!((state.estimate - x).norm() < 1e-9);
        }
    }

    #[test]
    fn uninformative_measurement_keeps_prior() {
        let e = StateVec::new(50.0, 55.0, 50.0, 5.0, 5.0, 0.0);
        let model =
            TrackModel::new(0.02, 0.1, Matrix4::from_diagonal(&Vector4::repeat(1e30))).unwrap();
        let state = TrackState::initial(e);
        let next = ekf_step(&state, &model, &MeasVec::new(1e3, 5.0, 1.0, -1.0)).unwrap();
        let pred = model.transition * e;
        assert!((next.estimate - pred).norm() < 1e-20_f64.max(1e-12 * pred.norm()));
        let m_pred =
            model.transition * state.covariance * model.transition.transpose() + model.process;
        assert!((next.covariance - m_pred).norm() < 1e-9 * m_pred.norm());
    }

    #[test]
    fn information_is_inverse_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = StateVec::new(-70.0, -50.0, 25.0, 0.0, 10.0, 0.0);
        let model = TrackModel::new(
            0.02,
            0.3,
            Matrix4::from_diagonal(&Vector4::new(0.05, 0.02, 1e-4, 2e-4)),
        )
        .unwrap();
        let mut state = TrackState::initial(e);
        let mut x = e;
        for _ in 0..20 {
            x = model.transition * x;
            let (q, _) = measure_and_jacobian(&x).unwrap();
            let noisy = q + gaussian_with_covariance(&mut rng, &model.measurement);
            state = ekf_step(&state, &model, &noisy).unwrap();
            let prod = state.information * state.covariance;
            assert!((prod - Matrix6::identity()).norm() < 1e-6);
            assert!(state.covariance.symmetric_eigenvalues().min() >= -1e-10);
        }
    }
}
