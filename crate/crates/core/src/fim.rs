//! Fisher information over `(τ_d, f_d, θ, φ)` for the echo of the sensing
//! stream, the matching CRB and the localization QoS (smallest FIM
//! eigenvalue), plus a finite-difference oracle for the differentiable block.
//!
//! Every entry is linear in the sensing covariance through six scalar terms
//! `A = Re{c R cᴴ}`, `B = Re{−j ∂_θc R cᴴ}`, `C = Re{−j ∂_φc R cᴴ}`,
//! `D = Re{∂_θc R ∂_θcᴴ}`, `E = Re{∂_θc R ∂_φcᴴ}`, `F = Re{∂_φc R ∂_φcᴴ}`
//! with `R = Q_c R_τ`.

use nalgebra::{Matrix3, Matrix4, SymmetricEigen};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::array_channel::{ArrayGeometry, SensingSteering, SPEED_OF_LIGHT};
use crate::error::{check_len, invalid, Result};
use crate::linalg::{hermitian_eigen, hermitian_part, re_trace_product, CMat, CVec, C64, J};

pub const TAU: usize = 0;
pub const DOPPLER: usize = 1;
pub const AZIMUTH: usize = 2;
pub const PITCH: usize = 3;

/// Weight of the Doppler row (`I_ff`, `I_fθ`, `I_fφ`).
///
/// `Full` is what the sample-domain information sum produces for a
/// unit-modulus waveform; `Half` is the closed form at half that value.
/// Combined with the closed-form delay row, `Full` is not PSD for single-beam
/// covariances once the Doppler shift exceeds roughly 1 kHz, so `Half` is the
/// default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DopplerRowWeight {
    Full,
    #[default]
    Half,
}

/// Treatment of the Doppler-dependent part of `I_ττ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayDopplerTerm {
    /// `8 W T³ (π f_d)²` added to `ε F̄²`.
    #[default]
    Cubic,
    Omitted,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FimOptions {
    pub doppler_row: DopplerRowWeight,
    pub delay_doppler: DelayDopplerTerm,
}

/// Everything the FIM needs besides the covariance and the steering data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FimParams {
    pub doppler: f64,
    pub reflection: C64,
    pub bandwidth: f64,
    pub symbol_time: f64,
    pub cpi_len: usize,
    pub processing_noise: f64,
    pub pulse_energy: f64,
    pub mean_square_bandwidth: f64,
    pub options: FimOptions,
}

impl FimParams {
    pub fn validate(&self) -> Result<()> {
        if self.cpi_len < 1 {
            return Err(invalid("CPI length must be at least 1"));
        }
        if !(self.processing_noise > 0.0) {
            return Err(invalid("processing noise must be positive"));
        }
        if !(self.pulse_energy > 0.0 && self.mean_square_bandwidth > 0.0) {
            return Err(invalid(
                "pulse energy and mean-square bandwidth must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FimInputs {
    pub covariance: CMat,
    pub steering: SensingSteering,
    pub params: FimParams,
    /// Defaults to the identity when `None`.
    pub delay_correlation: Option<CMat>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SubstitutionTerms {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
    pub f: f64,
}

impl SubstitutionTerms {
    fn as_array(&self) -> [f64; 6] {
        [self.a, self.b, self.c, self.d, self.e, self.f]
    }
}

/// `Re{u R vᴴ}` for row vectors stored as columns.
fn re_form(u: &CVec, r: &CMat, v: &CVec) -> f64 {
    let mut acc = C64::new(0.0, 0.0);
    for i in 0..u.len() {
        for j in 0..v.len() {
            acc += u[i] * r[(i, j)] * v[j].conj();
        }
    }
    acc.re
}

pub fn substitution_terms(
    row: &CVec,
    d_azimuth: &CVec,
    d_pitch: &CVec,
    r: &CMat,
) -> Result<SubstitutionTerms> {
    check_len(row.len(), r.nrows())?;
    check_len(row.len(), d_azimuth.len())?;
    check_len(row.len(), d_pitch.len())?;
    let mj = -J;
    Ok(SubstitutionTerms {
        a: re_form(row, r, row),
        b: re_form(&d_azimuth.map(|x| mj * x), r, row),
        c: re_form(&d_pitch.map(|x| mj * x), r, row),
        d: re_form(d_azimuth, r, d_azimuth),
        e: re_form(d_azimuth, r, d_pitch),
        f: re_form(d_pitch, r, d_pitch),
    })
}

/// Hermitian matrices `M_t` with `term_t(Q) = Re tr(M_t Q)`.
pub fn term_matrices(steer: &SensingSteering, delay_correlation: Option<&CMat>) -> [CMat; 6] {
    // Re{u Q R_τ vᴴ} = Re tr(Q · R_τ vᴴ u).
    let form = |u: &CVec, v: &CVec| {
        let m = v.map(|x| x.conj()) * u.transpose();
        let m = match delay_correlation {
            Some(rt) => rt * m,
            None => m,
        };
        hermitian_part(&m)
    };
    let mj = -J;
    let da_j = steer.d_azimuth.map(|x| mj * x);
    let dp_j = steer.d_pitch.map(|x| mj * x);
    [
        form(&steer.row, &steer.row),
        form(&da_j, &steer.row),
        form(&dp_j, &steer.row),
        form(&steer.d_azimuth, &steer.d_azimuth),
        form(&steer.d_azimuth, &steer.d_pitch),
        form(&steer.d_pitch, &steer.d_pitch),
    ]
}

/// Coefficients `K[i][j][t]` with `I_ij = Σ_t K[i][j][t]·term_t` (upper triangle).
pub fn fim_coefficients(p: &FimParams) -> [[[f64; 6]; 4]; 4] {
    let mut k = [[[0.0; 6]; 4]; 4];
    let g = p.reflection.norm_sqr() / p.processing_noise;
    let (w, t, f) = (p.bandwidth, p.symbol_time, p.doppler);
    let l = p.cpi_len as f64;
    let row_weight = match p.options.doppler_row {
        DopplerRowWeight::Full => 2.0,
        DopplerRowWeight::Half => 1.0,
    };
    let cubic = match p.options.delay_doppler {
        DelayDopplerTerm::Cubic => 8.0 * w * t.powi(3) * (PI * f).powi(2),
        DelayDopplerTerm::Omitted => 0.0,
    };
    const A: usize = 0;
    const B: usize = 1;
    const C: usize = 2;
    const D: usize = 3;
    const E: usize = 4;
    const F: usize = 5;
    k[TAU][TAU][A] = 4.0 * w * g * (p.pulse_energy * p.mean_square_bandwidth + cubic);
    k[TAU][DOPPLER][A] = 16.0 * f * t * t * PI * PI * w * w * g;
    k[TAU][AZIMUTH][B] = 8.0 * PI * f * w * t * t * g;
    k[TAU][PITCH][C] = 8.0 * PI * f * w * t * t * g;
    k[DOPPLER][DOPPLER][A] =
        row_weight * 2.0 * l * (l + 1.0) * (2.0 * l + 1.0) * PI * PI * t * t * g / 3.0;
    k[DOPPLER][AZIMUTH][B] = row_weight * PI * t * l * (l + 1.0) * g;
    k[DOPPLER][PITCH][C] = row_weight * PI * t * l * (l + 1.0) * g;
    k[AZIMUTH][AZIMUTH][D] = 2.0 * l * g;
    k[AZIMUTH][PITCH][E] = 2.0 * l * g;
    k[PITCH][PITCH][F] = 2.0 * l * g;
    k
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FimMatrix(pub Matrix4<f64>);

impl FimMatrix {
    pub fn entries(&self) -> &Matrix4<f64> {
        &self.0
    }
}

fn assemble(coef: &[[[f64; 6]; 4]; 4], terms: &[f64; 6]) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    for i in 0..4 {
        for j in i..4 {
            let v: f64 = (0..6).map(|t| coef[i][j][t] * terms[t]).sum();
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

pub fn fim(inputs: &FimInputs) -> Result<FimMatrix> {
    inputs.params.validate()?;
    let r = match &inputs.delay_correlation {
        Some(rt) => &inputs.covariance * rt,
        None => inputs.covariance.clone(),
    };
    let s = &inputs.steering;
    let terms = substitution_terms(&s.row, &s.d_azimuth, &s.d_pitch, &r)?;
    Ok(FimMatrix(assemble(
        &fim_coefficients(&inputs.params),
        &terms.as_array(),
    )))
}

/// Linear map `Q ↦ I(Q)` as one Hermitian coefficient matrix per entry.
#[derive(Debug, Clone)]
pub struct FimMap {
    entries: Vec<CMat>,
}

impl FimMap {
    pub fn new(
        steer: &SensingSteering,
        params: &FimParams,
        delay_correlation: Option<&CMat>,
    ) -> Self {
        let terms = term_matrices(steer, delay_correlation);
        let coef = fim_coefficients(params);
        let n = steer.row.len();
        let mut entries = Vec::with_capacity(16);
        for i in 0..4 {
            for j in 0..4 {
                let (a, b) = if i <= j { (i, j) } else { (j, i) };
                let mut m = CMat::zeros(n, n);
                for (t, tm) in terms.iter().enumerate() {
                    if coef[a][b][t] != 0.0 {
                        m += tm.scale(coef[a][b][t]);
                    }
                }
                entries.push(m);
            }
        }
        Self { entries }
    }

    /// Map from 16 coefficient matrices in row-major order.
    pub fn from_entries(entries: Vec<CMat>) -> Result<Self> {
        check_len(16, entries.len())?;
        let n = entries[0].nrows();
        if entries.iter().any(|m| m.nrows() != n || m.ncols() != n) {
            return Err(invalid(
                "coefficient matrices must be square and of equal size",
            ));
        }
        Ok(Self { entries })
    }

    /// Coefficient matrix of entry `(i, j)`.
    pub fn entry(&self, i: usize, j: usize) -> &CMat {
        &self.entries[4 * i + j]
    }

    pub fn apply(&self, q: &CMat) -> Matrix4<f64> {
        Matrix4::from_fn(|i, j| re_trace_product(self.entry(i, j), q))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrbReport {
    pub crb: Matrix4<f64>,
    /// Smallest FIM eigenvalue.
    pub min_eigenvalue: f64,
    pub singular: bool,
    /// Condition number of the diagonally equilibrated FIM.
    pub condition: f64,
}

/// CRB and the smallest FIM eigenvalue. The FIM diagonal spans many orders of
/// magnitude in SI units, so both are computed through the equilibrated matrix
/// `D I D` with `D = diag(I_ii^{-1/2})`.
pub fn crb_and_qos(fim: &FimMatrix) -> CrbReport {
    let m = (fim.0 + fim.0.transpose()) * 0.5;
    let peak = (0..4).map(|i| m[(i, i)].abs()).fold(0.0, f64::max);
    let d = nalgebra::Vector4::from_fn(|i, _| {
        let v = m[(i, i)];
        if v > 1e-300 && v > peak * 1e-300 {
            1.0 / v.sqrt()
        } else {
            0.0
        }
    });
    let dm = Matrix4::from_diagonal(&d);
    let s = dm * m * dm;
    let eig = SymmetricEigen::new(s);
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let full_rank = d.iter().all(|&x| x > 0.0) && lo > 1e-12 * hi;
    if full_rank {
        let s_inv = eig.eigenvectors
            * Matrix4::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v))
            * eig.eigenvectors.transpose();
        let crb = dm * s_inv * dm;
        let crb = (crb + crb.transpose()) * 0.5;
        let top = SymmetricEigen::new(crb).eigenvalues.max();
        return CrbReport {
            crb,
            min_eigenvalue: 1.0 / top,
            singular: false,
            condition: hi / lo,
        };
    }
    let eig = SymmetricEigen::new(m);
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let cut = top * 1e-12;
    let inv = eig.eigenvalues.map(|v| if v > cut { 1.0 / v } else { 0.0 });
    let crb = eig.eigenvectors * Matrix4::from_diagonal(&inv) * eig.eigenvectors.transpose();
    let min_eigenvalue = eig.eigenvalues.min().max(0.0);
    CrbReport {
        crb,
        min_eigenvalue,
        singular: true,
        condition: f64::INFINITY,
    }
}

/// Smallest eigenvalue of a real symmetric matrix by power iteration on
/// `λ_max I − M`. Used as an independent cross-check of `crb_and_qos`.
pub fn min_eigenvalue_power_iteration(m: &Matrix4<f64>, iterations: usize) -> f64 {
    let lmax = {
        let mut v = nalgebra::Vector4::new(1.0, 0.7, 0.3, 0.1).normalize();
        let mut lam = 0.0;
        for _ in 0..iterations {
            let w = m * v;
            lam = v.dot(&w);
            v = w.normalize();
        }
        lam
    };
    let shifted = Matrix4::identity() * lmax - m;
    let mut v = nalgebra::Vector4::new(0.2, -0.5, 0.9, 0.4).normalize();
    let mut lam = 0.0;
    for _ in 0..iterations {
        let w = shifted * v;
        lam = v.dot(&w);
        if w.norm() == 0.0 {
            break;
        }
        v = w.normalize();
    }
    lmax - lam
}

/// Finite-difference evaluation of the information sum
/// `(2/σ_r²) Re Σ_l ∂L*[l]/∂ξ_i · ∂L[l]/∂ξ_j` over `ξ = (f_d, θ, φ)` for the
/// noiseless echo `L[l] = α·c(θ,φ)·p·s[l]·e^{j2π f_d l T}`, `l = 1..=len`.
///
/// The covariance enters through its eigen-decomposition; the delay
/// correlation is taken as the identity.
pub fn numeric_fim_oracle(
    geom: &ArrayGeometry,
    azimuth: f64,
    pitch: f64,
    q: &CMat,
    params: &FimParams,
    signal: &[C64],
) -> Matrix3<f64> {
    let (values, vectors) = hermitian_eigen(q);
    let components: Vec<CVec> = values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0)
        .map(|(i, &v)| vectors.column(i).into_owned().scale(v.sqrt()))
        .collect();
    let t = params.symbol_time;
    let echo = |f: f64, th: f64, ph: f64, p: &CVec| -> Vec<C64> {
        let row = crate::array_channel::sense_row(geom, th, ph);
        let cp: C64 = row.iter().zip(p.iter()).map(|(c, x)| c * x).sum();
        signal
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let l = (i + 1) as f64;
                params.reflection * cp * s * C64::from_polar(1.0, 2.0 * PI * f * l * t)
            })
            .collect()
    };
    let hf = 1e-3 * (1.0 / (signal.len().max(1) as f64 * t)).min(1e3);
    let ha = 1e-6;
    let steps = [hf, ha, ha];
    let base = [params.doppler, azimuth, pitch];
    let mut out = Matrix3::zeros();
    for p in &components {
        let grads: Vec<Vec<C64>> = (0..3)
            .map(|k| {
                let mut up = base;
                let mut dn = base;
                up[k] += steps[k];
                dn[k] -= steps[k];
                let a = echo(up[0], up[1], up[2], p);
                let b = echo(dn[0], dn[1], dn[2], p);
                a.iter()
                    .zip(b.iter())
                    .map(|(x, y)| (x - y) / (2.0 * steps[k]))
                    .collect()
            })
            .collect();
        for i in 0..3 {
            for j in 0..3 {
                let s: C64 = grads[i]
                    .iter()
                    .zip(grads[j].iter())
                    .map(|(x, y)| x.conj() * y)
                    .sum();
                out[(i, j)] += 2.0 / params.processing_noise * s.re;
            }
        }
    }
    (out + out.transpose()) * 0.5
}

/// Gaussian pulse `exp(−σ_F² (t − T/2)² / 2)` supported on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPulse {
    pub sigma_f: f64,
    pub duration: f64,
}

impl GaussianPulse {
    pub fn value(&self, t: f64) -> f64 {
        let x = t - self.duration / 2.0;
        (-0.5 * self.sigma_f * self.sigma_f * x * x).exp()
    }

    pub fn derivative(&self, t: f64) -> f64 {
        let x = t - self.duration / 2.0;
        -self.sigma_f * self.sigma_f * x * self.value(t)
    }

    fn simpson(&self, f: impl Fn(f64) -> f64) -> f64 {
        let n = 4096;
        let h = self.duration / n as f64;
        let mut acc = f(0.0) + f(self.duration);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(i as f64 * h);
        }
        acc * h / 3.0
    }

    /// `ε = ∫ s²(t) dt` by Simpson quadrature.
    pub fn energy(&self) -> f64 {
        self.simpson(|t| self.value(t).powi(2))
    }

    /// `F̄² = σ_F² / 2`.
    pub fn mean_square_bandwidth(&self) -> f64 {
        self.sigma_f * self.sigma_f / 2.0
    }

    /// `∫ s(t) s'(t) dt`, zero when the pulse vanishes equally at both ends.
    pub fn boundary_integral(&self) -> f64 {
        self.simpson(|t| self.value(t) * self.derivative(t))
    }
}

/// Range and radial-velocity variances from a CRB: `d = cτ_d/2`,
/// `v = c f_d / (2 f_c)`.
pub fn measurement_variances(crb: &Matrix4<f64>, carrier_frequency: f64) -> [f64; 4] {
    let kd = SPEED_OF_LIGHT / 2.0;
    let kv = SPEED_OF_LIGHT / (2.0 * carrier_frequency);
    [
        kd * kd * crb[(TAU, TAU)],
        kv * kv * crb[(DOPPLER, DOPPLER)],
        crb[(AZIMUTH, AZIMUTH)],
        crb[(PITCH, PITCH)],
    ]
}

/// Measurement information proxy `diag(I_ττ (2/c)², I_ff (2f_c/c)², I_θθ, I_φφ)`,
/// linear in the covariance.
pub fn information_proxy_scales(carrier_frequency: f64) -> [(usize, f64); 4] {
    let kd = 2.0 / SPEED_OF_LIGHT;
    let kv = 2.0 * carrier_frequency / SPEED_OF_LIGHT;
    [
        (TAU, kd * kd),
        (DOPPLER, kv * kv),
        (AZIMUTH, 1.0),
        (PITCH, 1.0),
    ]
}
