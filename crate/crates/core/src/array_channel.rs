//! Uniform planar array steering vectors, geometry-derived channel parameters
//! and synthesized communication / sensing channels.
//!
//! Angles follow the coordinate convention `azimuth = atan2(y, x)` and
//! `pitch = atan(z / sqrt(x² + y²))`. Element `(n_r, n_c)` sits at flat index
//! `n_r * n_cols + n_c` and carries phase
//! `exp(−j2π(δ_r n_r + δ_c n_c))` with `δ_r = s·sinθ·cosφ`, `δ_c = s·sinθ·sinφ`
//! where `s` is the element spacing in wavelengths.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{invalid, Result};
use crate::linalg::{complex_normal, CVec, C64, J};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub n_rows: usize,
    pub n_cols: usize,
    /// Element spacing in wavelengths.
    pub element_spacing: f64,
    pub carrier_frequency: f64,
    pub bandwidth: f64,
    pub symbol_time: f64,
}

impl Default for ArrayGeometry {
    fn default() -> Self {
        Self {
            n_rows: 4,
            n_cols: 4,
            element_spacing: 0.5,
            carrier_frequency: 30e9,
            bandwidth: 20e6,
            symbol_time: 1.0 / 20e6,
        }
    }
}

impl ArrayGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.n_rows == 0 || self.n_cols == 0 {
            return Err(invalid("array needs at least one row and one column"));
        }
        for (name, v) in [
            ("element_spacing", self.element_spacing),
            ("carrier_frequency", self.carrier_frequency),
            ("bandwidth", self.bandwidth),
            ("symbol_time", self.symbol_time),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Same geometry with a square `side × side` layout.
    pub fn with_square(mut self, side: usize) -> Self {
        self.n_rows = side;
        self.n_cols = side;
        self
    }

    pub fn elements(&self) -> usize {
        self.n_rows * self.n_cols
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_frequency
    }

    fn index_pairs(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        (0..self.n_rows).flat_map(move |r| (0..self.n_cols).map(move |c| (r as f64, c as f64)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TerminalKinematics {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
}

impl TerminalKinematics {
    pub fn new(position: [f64; 3], velocity: [f64; 3]) -> Self {
        Self {
            position: Vector3::from(position),
            velocity: Vector3::from(velocity),
        }
    }

    /// Constant-velocity motion over `dt` seconds.
    pub fn advanced(&self, dt: f64) -> Self {
        Self {
            position: self.position + self.velocity * dt,
            velocity: self.velocity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelParams {
    pub range: f64,
    pub radial_velocity: f64,
    pub azimuth: f64,
    pub pitch: f64,
    pub one_way_delay: f64,
    pub one_way_doppler: f64,
    pub round_trip_delay: f64,
    pub round_trip_doppler: f64,
    pub path_loss: f64,
    pub rcs_variance: f64,
    /// Reflection coefficient used for design. `geometry_to_params` sets the
    /// RMS value `σ_α`; `build_channels` draws a random realization.
    pub reflection: C64,
}

/// Phase slopes `(δ_r, δ_c)` of the steering vector.
fn phase_slopes(geom: &ArrayGeometry, azimuth: f64, pitch: f64) -> (f64, f64) {
    let s = geom.element_spacing * azimuth.sin();
    (s * pitch.cos(), s * pitch.sin())
}

pub fn steering_vector(geom: &ArrayGeometry, azimuth: f64, pitch: f64) -> CVec {
    let (dr, dc) = phase_slopes(geom, azimuth, pitch);
    CVec::from_iterator(
        geom.elements(),
        geom.index_pairs()
            .map(|(r, c)| C64::from_polar(1.0, -2.0 * PI * (dr * r + dc * c))),
    )
}

/// `(∂a/∂θ, ∂a/∂φ)` evaluated analytically.
pub fn steering_derivatives(geom: &ArrayGeometry, azimuth: f64, pitch: f64) -> (CVec, CVec) {
    let a = steering_vector(geom, azimuth, pitch);
    let k = -2.0 * PI * geom.element_spacing;
    let (st, ct) = azimuth.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let mut d_az = CVec::zeros(a.len());
    let mut d_pitch = CVec::zeros(a.len());
    for (i, (r, c)) in geom.index_pairs().enumerate() {
        d_az[i] = a[i] * J * (k * ct * (cp * r + sp * c));
        d_pitch[i] = a[i] * J * (k * st * (-sp * r + cp * c));
    }
    (d_az, d_pitch)
}

/// Receive-side scalar `b(θ, φ)` of the single-antenna echo path.
pub fn rx_scalar(geom: &ArrayGeometry, azimuth: f64, pitch: f64) -> C64 {
    let (dr, dc) = phase_slopes(geom, azimuth, pitch);
    C64::from_polar(1.0, -2.0 * PI * (dr + dc))
}

pub fn rx_scalar_derivatives(geom: &ArrayGeometry, azimuth: f64, pitch: f64) -> (C64, C64) {
    let b = rx_scalar(geom, azimuth, pitch);
    let k = -2.0 * PI * geom.element_spacing;
    let (st, ct) = azimuth.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    (b * J * (k * ct * (cp + sp)), b * J * (k * st * (cp - sp)))
}

/// Entries of the sensing row `c = b·aᴴ`, stored as a column vector.
pub fn sense_row(geom: &ArrayGeometry, azimuth: f64, pitch: f64) -> CVec {
    let b = rx_scalar(geom, azimuth, pitch);
    steering_vector(geom, azimuth, pitch).map(|x| b * x.conj())
}

/// Sensing row together with its angle derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct SensingSteering {
    pub row: CVec,
    pub d_azimuth: CVec,
    pub d_pitch: CVec,
}

impl SensingSteering {
    pub fn new(geom: &ArrayGeometry, azimuth: f64, pitch: f64) -> Self {
        let a = steering_vector(geom, azimuth, pitch);
        let (da_t, da_p) = steering_derivatives(geom, azimuth, pitch);
        let b = rx_scalar(geom, azimuth, pitch);
        let (db_t, db_p) = rx_scalar_derivatives(geom, azimuth, pitch);
        let row = a.map(|x| b * x.conj());
        let d_azimuth = CVec::from_fn(a.len(), |i, _| db_t * a[i].conj() + b * da_t[i].conj());
        let d_pitch = CVec::from_fn(a.len(), |i, _| db_p * a[i].conj() + b * da_p[i].conj());
        Self {
            row,
            d_azimuth,
            d_pitch,
        }
    }
}

pub fn path_loss(wavelength: f64, range: f64) -> f64 {
    wavelength / (4.0 * PI * range)
}

/// Radar-cross-section variance `S λ² / ((4π)³ d⁴)`.
pub fn rcs_variance(s_rcs: f64, wavelength: f64, range: f64) -> Result<f64> {
    if !(s_rcs > 0.0 && wavelength > 0.0 && range > 0.0) {
        return Err(invalid("rcs, wavelength and range must be positive"));
    }
    Ok(s_rcs * wavelength.powi(2) / ((4.0 * PI).powi(3) * range.powi(4)))
}

pub fn geometry_to_params(
    kin: &TerminalKinematics,
    geom: &ArrayGeometry,
    s_rcs: f64,
) -> Result<ChannelParams> {
    let p = kin.position;
    let range = p.norm();
    if !(range > 0.0) || !range.is_finite() {
        return Err(invalid("terminal position must be nonzero and finite"));
    }
    let radial_velocity = p.dot(&kin.velocity) / range;
    let azimuth = p.y.atan2(p.x);
    let pitch = p.z.atan2(p.x.hypot(p.y));
    let one_way_delay = range / SPEED_OF_LIGHT;
    let one_way_doppler = radial_velocity * geom.carrier_frequency / SPEED_OF_LIGHT;
    let wavelength = geom.wavelength();
    let rcs = rcs_variance(s_rcs, wavelength, range)?;
    Ok(ChannelParams {
        range,
        radial_velocity,
        azimuth,
        pitch,
        one_way_delay,
        one_way_doppler,
        round_trip_delay: 2.0 * one_way_delay,
        round_trip_doppler: 2.0 * one_way_doppler,
        path_loss: path_loss(wavelength, range),
        rcs_variance: rcs,
        reflection: C64::new(rcs.sqrt(), 0.0),
    })
}

/// Azimuth magnitude folded into `[0°, 90°]` through `asin(|sin θ|)`.
///
/// The steering vector depends on the azimuth only through `sin θ`, so the
/// folded value points at the same array response up to the sign carried by
/// the pitch plane.
pub fn folded_azimuth_deg(azimuth: f64) -> f64 {
    azimuth.sin().abs().asin().to_degrees()
}

/// Azimuth in `[−90°, 90°]` producing the same steering vector.
pub fn steering_equivalent_azimuth(azimuth: f64) -> f64 {
    azimuth.sin().asin()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSet {
    pub comm: CVec,
    pub sense_tx_steer: CVec,
    pub rx_scalar: C64,
    pub sense_matrix: CVec,
    pub sense_channel: CVec,
    pub reflection: C64,
    pub one_way_doppler: f64,
    pub round_trip_doppler: f64,
    pub symbol_time: f64,
}

impl ChannelSet {
    /// Communication channel at sample index `l`.
    pub fn comm_at(&self, l: usize) -> CVec {
        let ph = C64::from_polar(
            1.0,
            2.0 * PI * self.one_way_doppler * l as f64 * self.symbol_time,
        );
        self.comm.map(|x| x * ph)
    }

    /// Echo channel at sample index `l`.
    pub fn sense_at(&self, l: usize) -> CVec {
        let ph = C64::from_polar(
            1.0,
            2.0 * PI * self.round_trip_doppler * l as f64 * self.symbol_time,
        );
        self.sense_channel.map(|x| x * ph)
    }

    /// Communication covariance `h hᴴ`.
    pub fn comm_gram(&self) -> crate::linalg::CMat {
        crate::linalg::outer(&self.comm, &self.comm)
    }

    /// Echo covariance `g gᴴ`.
    pub fn sense_gram(&self) -> crate::linalg::CMat {
        crate::linalg::outer(&self.sense_channel, &self.sense_channel)
    }
}

/// Channels at sample index zero. The reflection coefficient is drawn
/// `CN(0, σ²_α)` from `rng_seed`.
pub fn build_channels(params: &ChannelParams, geom: &ArrayGeometry, rng_seed: u64) -> ChannelSet {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let alpha = complex_normal(&mut rng, params.rcs_variance);
    build_channels_with_reflection(params, geom, alpha)
}

pub fn build_channels_with_reflection(
    params: &ChannelParams,
    geom: &ArrayGeometry,
    alpha: C64,
) -> ChannelSet {
    let a = steering_vector(geom, params.azimuth, params.pitch);
    let b = rx_scalar(geom, params.azimuth, params.pitch);
    let comm = a.map(|x| x * params.path_loss);
    let sense_matrix = a.map(|x| b * x.conj());
    let sense_channel = a.map(|x| alpha * b.conj() * x);
    ChannelSet {
        comm,
        sense_tx_steer: a,
        rx_scalar: b,
        sense_matrix,
        sense_channel,
        reflection: alpha,
        one_way_doppler: params.one_way_doppler,
        round_trip_doppler: params.round_trip_doppler,
        symbol_time: geom.symbol_time,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom4() -> ArrayGeometry {
        ArrayGeometry::default()
    }

    #[test]
    fn broadside_is_all_ones() {
        let a = steering_vector(&geom4(), 0.0, 1.234);
        assert_eq!(a.len(), 16);
        for x in a.iter() {
            assert!((x - C64::new(1.0, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn broadside_derivatives() {
        let g = geom4();
        let phi = 0.7_f64;
        let (d_az, d_pitch) = steering_derivatives(&g, 0.0, phi);
        for r in 0..4 {
            for c in 0..4 {
                let expect = -J * 2.0 * PI * 0.5 * (phi.cos() * r as f64 + phi.sin() * c as f64);
                assert!((d_az[r * 4 + c] - expect).norm() < 1e-12);
            }
        }
        assert!(d_pitch.norm() < 1e-15);
    }

    #[test]
    fn terminal_one_geometry() {
        let kin = TerminalKinematics::new([50.0, 55.0, 50.0], [5.0, 5.0, 0.0]);
        let p = geometry_to_params(&kin, &geom4(), 1.0).unwrap();
        assert!((p.range - 8025f64.sqrt()).abs() < 1e-12);
        assert!((p.range - 89.582).abs() < 1e-3);
        assert!((p.azimuth.to_degrees() - 47.73).abs() < 5e-3);
        assert!((p.pitch.to_degrees() - 33.92).abs() < 1e-2);
        assert_eq!(p.round_trip_delay, 2.0 * p.one_way_delay);
        assert_eq!(p.round_trip_doppler, 2.0 * p.one_way_doppler);
    }

    #[test]
    fn third_quadrant_fold() {
        let kin = TerminalKinematics::new([-70.0, -50.0, 25.0], [0.0, 10.0, 0.0]);
        let p = geometry_to_params(&kin, &geom4(), 1.0).unwrap();
        assert!(p.azimuth < -PI / 2.0);
        assert!((folded_azimuth_deg(p.azimuth) - 35.54).abs() < 5e-3);
        assert!((p.pitch.to_degrees() - 16.20).abs() < 1e-2);
        let a = steering_vector(&geom4(), p.azimuth, p.pitch);
        let b = steering_vector(&geom4(), steering_equivalent_azimuth(p.azimuth), p.pitch);
        assert!((a - b).norm() < 1e-12);
    }

    #[test]
    fn collinear_radial_velocity() {
        let kin = TerminalKinematics::new([7.0, 0.0, 0.0], [3.25, 0.0, 0.0]);
        let p = geometry_to_params(&kin, &geom4(), 1.0).unwrap();
        assert_eq!(p.radial_velocity, 3.25);
    }

    #[test]
    fn zero_position_rejected() {
        let kin = TerminalKinematics::new([0.0; 3], [1.0, 0.0, 0.0]);
        assert!(geometry_to_params(&kin, &geom4(), 1.0).is_err());
    }

    #[test]
    fn rcs_values_and_scaling() {
        let v = rcs_variance(1.0, 0.01, 89.582).unwrap();
        assert!((v / 7.83e-16 - 1.0).abs() < 1e-3);
        let v2 = rcs_variance(1.0, 0.01, 2.0 * 89.582).unwrap();
        assert!((v / v2 - 16.0).abs() < 1e-12);
        let v3 = rcs_variance(1.0, 0.02, 89.582).unwrap();
        assert!((v3 / v - 4.0).abs() < 1e-12);
        assert!(rcs_variance(0.0, 0.01, 1.0).is_err());
    }

    #[test]
    fn unit_gain_channel_is_steering_vector() {
        let g = geom4();
        let kin = TerminalKinematics::new([50.0, 55.0, 50.0], [5.0, 5.0, 0.0]);
        let mut p = geometry_to_params(&kin, &g, 1.0).unwrap();
        p.path_loss = 1.0;
        let ch = build_channels(&p, &g, 9);
        assert_eq!(ch.comm_at(0), steering_vector(&g, p.azimuth, p.pitch));
        let again = build_channels(&p, &g, 9);
        assert_eq!(ch.sense_channel, again.sense_channel);
        let ratio = ch.sense_channel.norm_squared() / ch.reflection.norm_sqr();
        assert!((ratio - 16.0).abs() < 1e-10);
        assert!((ch.sense_matrix.norm_squared() - 16.0).abs() < 1e-10);
    }
}
