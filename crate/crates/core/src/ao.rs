//! Alternating precoder design.
//!
//! Each iteration solves a sensing-stream SDP with the private covariances
//! fixed, then one program per private stream (a power-minimizing SDR
//! followed by rank-reducing DC steps), then the common-rate split. The
//! final covariances are turned into precoders by eigen-decomposition or
//! Gaussian randomization.

use std::f64::consts::LN_2;

use nalgebra::{DMatrix, Matrix4, Matrix6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::array_channel::{
    build_channels_with_reflection, geometry_to_params, steering_vector, ArrayGeometry,
    ChannelParams, SensingSteering, TerminalKinematics,
};
use crate::conic::{
    BlockId, BlockValue, ConicBackend, ConicProblem, ConicSolution, LinearForm, Lmi, Sense,
    SolveStatus,
};
use crate::detection::sensing_gain;
use crate::error::{check_len, invalid, Error, Result};
use crate::fim::{
    crb_and_qos, information_proxy_scales, measurement_variances, FimMap, FimMatrix, FimOptions,
    FimParams, GaussianPulse,
};
use crate::linalg::{
    complex_normal_vector, dbm_to_watts, hermitian_eigen, hermitian_part, min_eigenvalue, outer,
    principal_component, psd_projection, rank_one_gap, re_trace_product, trace_re, CMat, CVec, C64,
};
use crate::rsma::{
    per_element_power, rates_from_powers, LiftedCovariances, PrecodingSet, RateReport,
};
use crate::tracking::{
    ekf_step, gaussian_with_covariance, measure_and_jacobian, posterior_fim_with_information,
    transition_and_process, StateVec, TrackModel, TrackState,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Service {
    Detect,
    Localize,
    Track,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessMode {
    #[default]
    Rsma,
    /// Common stream switched off. The private streams are the only radiated
    /// signal, so sensing is evaluated on their sum.
    Sdma,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PowerConstraint {
    /// `[Σ Q]_nn ≤ P_t` on every element inside the subproblems.
    #[default]
    PerElement,
    /// Only `Σ tr Q ≤ N·P_t`; the final precoders are rescaled if an element exceeds `P_t`.
    Trace,
}

/// Link budget, thresholds and radar constants shared by every subproblem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemSettings {
    pub power_per_element: f64,
    pub noise: f64,
    pub rate_threshold: f64,
    pub echo_threshold: f64,
    pub processing_noise: f64,
    pub rcs: f64,
    pub cpi_len: usize,
    pub pulse_energy: f64,
    pub mean_square_bandwidth: f64,
    pub fim_options: FimOptions,
    pub mode: AccessMode,
    pub power_constraint: PowerConstraint,
}

impl Default for SystemSettings {
    fn default() -> Self {
        let geom = ArrayGeometry::default();
        let pulse = GaussianPulse {
            sigma_f: 2.0 * std::f64::consts::PI * geom.bandwidth / 4.0,
            duration: geom.symbol_time,
        };
        Self {
            power_per_element: 1e-3,
            noise: dbm_to_watts(-90.0),
            rate_threshold: 1e6,
            echo_threshold: dbm_to_watts(-60.0),
            processing_noise: dbm_to_watts(-125.0),
            rcs: 1.0,
            cpi_len: 1024,
            pulse_energy: pulse.energy(),
            mean_square_bandwidth: pulse.mean_square_bandwidth(),
            fim_options: FimOptions::default(),
            mode: AccessMode::Rsma,
            power_constraint: PowerConstraint::PerElement,
        }
    }
}

impl SystemSettings {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("power_per_element", self.power_per_element),
            ("noise", self.noise),
            ("echo_threshold", self.echo_threshold),
            ("processing_noise", self.processing_noise),
            ("rcs", self.rcs),
            ("pulse_energy", self.pulse_energy),
            ("mean_square_bandwidth", self.mean_square_bandwidth),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.rate_threshold.is_finite() && self.rate_threshold >= 0.0) {
            return Err(invalid(format!(
                "rate_threshold must be nonnegative, got {}",
                self.rate_threshold
            )));
        }
        if self.cpi_len == 0 {
            return Err(invalid("cpi_len must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TerminalSpec {
    pub kinematics: TerminalKinematics,
    pub service: Option<Service>,
}

/// Predicted state and prior information of a tracked terminal.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackPrior {
    pub information: Matrix6<f64>,
    pub predicted: StateVec,
}

pub fn state_of(kin: &TerminalKinematics) -> StateVec {
    StateVec::new(
        kin.position.x,
        kin.position.y,
        kin.position.z,
        kin.velocity.x,
        kin.velocity.y,
        kin.velocity.z,
    )
}

#[derive(Debug, Clone)]
pub struct UserLink {
    pub channel: CVec,
    /// `h hᴴ`
    pub gram: CMat,
    /// `g gᴴ` at the nominal reflection amplitude.
    pub echo_gram: CMat,
}

#[derive(Debug, Clone)]
pub struct SensingTarget {
    pub terminal: usize,
    pub service: Service,
    pub azimuth: f64,
    pub pitch: f64,
    pub map: FimMap,
    /// Detection gain per unit common-stream power.
    pub gain: f64,
    pub prior_trace: f64,
    /// `‖H_q‖²·κ_q` weights of the diagonal information entries.
    pub proxy_weights: [f64; 4],
}

impl SensingTarget {
    pub fn fim(&self, common: &CMat) -> FimMatrix {
        FimMatrix(self.map.apply(common))
    }

    /// Linear part of the tracking measure, `Σ_q ‖H_q‖² κ_q I_qq(Q)`.
    pub fn tracking_proxy(&self, common: &CMat) -> f64 {
        information_proxy_scales(1.0)
            .iter()
            .zip(&self.proxy_weights)
            .map(|((idx, _), w)| w * re_trace_product(self.map.entry(*idx, *idx), common))
            .sum()
    }

    fn proxy_matrix(&self) -> CMat {
        let n = self.map.entry(0, 0).nrows();
        let mut m = CMat::zeros(n, n);
        for ((idx, _), w) in information_proxy_scales(1.0)
            .iter()
            .zip(&self.proxy_weights)
        {
            m += hermitian_part(self.map.entry(*idx, *idx)).scale(*w);
        }
        m
    }
}

/// Everything the subproblems need, derived once from geometry.
#[derive(Debug, Clone)]
pub struct DesignProblem {
    pub geom: ArrayGeometry,
    pub settings: SystemSettings,
    pub params: Vec<ChannelParams>,
    pub users: Vec<UserLink>,
    pub targets: Vec<SensingTarget>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObjectiveParts {
    pub detection: f64,
    pub localization: f64,
    pub tracking: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveWeights {
    pub detection: f64,
    pub localization: f64,
    pub tracking: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self {
            detection: 1.0,
            localization: 1.0,
            tracking: 1.0,
        }
    }
}

/// Per-term divisors. The tracking divisor applies to the part that depends
/// on the sensing covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub detection: f64,
    pub localization: f64,
    pub tracking: f64,
}

impl Normalization {
    pub const UNIT: Self = Self {
        detection: 1.0,
        localization: 1.0,
        tracking: 1.0,
    };

    /// Term values at `common`, with 1 for terms that vanish there.
    pub fn at(problem: &DesignProblem, common: &CMat) -> Self {
        let v = problem.normalizable_parts(common);
        let pick = |a: f64| if a.is_finite() && a > 0.0 { a } else { 1.0 };
        Self {
            detection: pick(v.detection),
            localization: pick(v.localization),
            tracking: pick(v.tracking),
        }
    }

    /// Term values at the isotropic covariance `P_t·I`. A single beam, such
    /// as the initial point, carries almost no localization information, so
    /// it makes a poor reference.
    pub fn isotropic(problem: &DesignProblem) -> Self {
        let n = problem.elements();
        Self::at(
            problem,
            &CMat::identity(n, n).scale(problem.settings.power_per_element),
        )
    }
}

impl ObjectiveParts {
    pub fn weighted(&self, w: &ObjectiveWeights, norm: &Normalization) -> f64 {
        w.detection * self.detection / norm.detection
            + w.localization * self.localization / norm.localization
            + w.tracking * self.tracking / norm.tracking
    }
}

/// Constraint violations, each relative to its own scale and `≥ 0`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Feasibility {
    pub budget: f64,
    pub echo: f64,
    pub rate: f64,
    pub common: f64,
    pub element: f64,
    pub psd: f64,
}

impl Feasibility {
    pub fn worst(&self) -> f64 {
        [
            self.budget,
            self.echo,
            self.rate,
            self.common,
            self.element,
            self.psd,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    pub fn describe(&self, tol: f64) -> Option<&'static str> {
        [
            (self.budget, "power budget"),
            (self.echo, "echo interference"),
            (self.rate, "sum-rate threshold"),
            (self.common, "common-rate cap"),
            (self.element, "per-element power"),
            (self.psd, "covariance not PSD"),
        ]
        .into_iter()
        .filter(|(v, _)| *v > tol)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, s)| s)
    }
}

impl DesignProblem {
    /// Channels and sensing maps for every terminal. Terminals with a
    /// service become sensing targets; all terminals are communication users.
    pub fn from_terminals(
        geom: &ArrayGeometry,
        terminals: &[TerminalSpec],
        settings: &SystemSettings,
        priors: &[Option<TrackPrior>],
    ) -> Result<Self> {
        geom.validate()?;
        settings.validate()?;
        if !priors.is_empty() {
            check_len(terminals.len(), priors.len())?;
        }
        let mut params = Vec::with_capacity(terminals.len());
        let mut users = Vec::with_capacity(terminals.len());
        let mut targets = Vec::new();
        for (i, t) in terminals.iter().enumerate() {
            let p = geometry_to_params(&t.kinematics, geom, settings.rcs)?;
            let alpha = C64::new(p.rcs_variance.sqrt(), 0.0);
            let ch = build_channels_with_reflection(&p, geom, alpha);
            users.push(UserLink {
                gram: ch.comm_gram(),
                echo_gram: ch.sense_gram(),
                channel: ch.comm.clone(),
            });
            if let Some(service) = t.service {
                let steer = SensingSteering::new(geom, p.azimuth, p.pitch);
                let fp = FimParams {
                    doppler: p.round_trip_doppler,
                    reflection: alpha,
                    bandwidth: geom.bandwidth,
                    symbol_time: geom.symbol_time,
                    cpi_len: settings.cpi_len,
                    processing_noise: settings.processing_noise,
                    pulse_energy: settings.pulse_energy,
                    mean_square_bandwidth: settings.mean_square_bandwidth,
                    options: settings.fim_options,
                };
                fp.validate()?;
                let map = FimMap::new(&steer, &fp, None);
                let gain = sensing_gain(p.rcs_variance, &steer.row, settings.processing_noise)?;
                let (prior_trace, proxy_weights) = if service == Service::Track {
                    let prior = priors.get(i).cloned().flatten().unwrap_or_else(|| {
                        let truth = state_of(&t.kinematics);
                        TrackPrior {
                            information: TrackState::initial(truth).information,
                            predicted: truth,
                        }
                    });
                    let (_, h) = measure_and_jacobian(&prior.predicted)?;
                    let scales = information_proxy_scales(geom.carrier_frequency);
                    let w = [0, 1, 2, 3].map(|q| h.row(q).norm_squared() * scales[q].1);
                    (prior.information.trace(), w)
                } else {
                    (0.0, [0.0; 4])
                };
                targets.push(SensingTarget {
                    terminal: i,
                    service,
                    azimuth: p.azimuth,
                    pitch: p.pitch,
                    map,
                    gain,
                    prior_trace,
                    proxy_weights,
                });
            }
            params.push(p);
        }
        Ok(Self {
            geom: *geom,
            settings: *settings,
            params,
            users,
            targets,
        })
    }

    pub fn elements(&self) -> usize {
        self.geom.elements()
    }

    /// Total trace budget `N·P_t`.
    pub fn budget(&self) -> f64 {
        self.elements() as f64 * self.settings.power_per_element
    }

    pub fn parts(&self, common: &CMat) -> ObjectiveParts {
        let tr = trace_re(common);
        let mut out = ObjectiveParts::default();
        let mut loc = f64::INFINITY;
        for t in &self.targets {
            match t.service {
                Service::Detect => out.detection += t.gain * tr,
                Service::Localize => loc = loc.min(crb_and_qos(&t.fim(common)).min_eigenvalue),
                Service::Track => out.tracking += t.prior_trace + t.tracking_proxy(common),
            }
        }
        out.localization = if loc.is_finite() { loc } else { 0.0 };
        out
    }

    fn normalizable_parts(&self, common: &CMat) -> ObjectiveParts {
        let mut p = self.parts(common);
        p.tracking -= self.targets.iter().map(|t| t.prior_trace).sum::<f64>();
        p
    }

    /// Rates of the lifted covariances under the configured access mode.
    pub fn rates(&self, common: &CMat, privates: &[CMat]) -> Result<RateReport> {
        check_len(self.users.len(), privates.len())?;
        let s = &self.settings;
        let cp: Vec<f64> = self
            .users
            .iter()
            .map(|u| re_trace_product(&u.gram, common).max(0.0))
            .collect();
        let pp: Vec<Vec<f64>> = self
            .users
            .iter()
            .map(|u| {
                privates
                    .iter()
                    .map(|q| re_trace_product(&u.gram, q).max(0.0))
                    .collect()
            })
            .collect();
        let cp = if s.mode == AccessMode::Sdma {
            vec![0.0; cp.len()]
        } else {
            cp
        };
        rates_from_powers(&cp, &pp, s.noise, self.geom.bandwidth)
    }

    /// Covariance the sensing metrics see: the common stream, or the sum of
    /// the private streams when the common stream is off.
    pub fn sensing_covariance(&self, common: &CMat, privates: &[CMat]) -> CMat {
        match self.settings.mode {
            AccessMode::Rsma => common.clone(),
            AccessMode::Sdma => privates
                .iter()
                .fold(CMat::zeros(self.elements(), self.elements()), |acc, q| {
                    acc + q
                }),
        }
    }

    pub fn sensed_parts(&self, common: &CMat, privates: &[CMat]) -> ObjectiveParts {
        self.parts(&self.sensing_covariance(common, privates))
    }

    pub fn feasibility(
        &self,
        common: &CMat,
        privates: &[CMat],
        allocation: &[f64],
    ) -> Result<Feasibility> {
        check_len(self.users.len(), allocation.len())?;
        let s = &self.settings;
        let budget = self.budget();
        let used = trace_re(common) + privates.iter().map(trace_re).sum::<f64>();
        let echo = self
            .users
            .iter()
            .map(|u| {
                privates
                    .iter()
                    .map(|q| re_trace_product(&u.echo_gram, q))
                    .sum::<f64>()
            })
            .map(|e| (e - s.echo_threshold) / s.echo_threshold)
            .fold(0.0, f64::max);
        let rates = self.rates(common, privates)?;
        let scale = s.rate_threshold.max(1e-6 * self.geom.bandwidth);
        let sum_c: f64 = allocation.iter().sum();
        let negative = allocation.iter().map(|c| -c / scale).fold(0.0, f64::max);
        let psd = std::iter::once(common)
            .chain(privates.iter())
            .map(|q| -min_eigenvalue(q) / budget)
            .fold(0.0, f64::max);
        let element = match s.power_constraint {
            PowerConstraint::Trace => 0.0,
            PowerConstraint::PerElement => {
                let pt = s.power_per_element;
                (0..self.elements())
                    .map(|n| common[(n, n)].re + privates.iter().map(|q| q[(n, n)].re).sum::<f64>())
                    .map(|d| (d - pt) / pt)
                    .fold(0.0, f64::max)
            }
        };
        Ok(Feasibility {
            budget: ((used - budget) / budget).max(0.0),
            element,
            echo,
            rate: ((s.rate_threshold - sum_c - rates.private_sum()) / scale).max(0.0),
            common: ((sum_c - rates.common_cap) / scale).max(negative).max(0.0),
            psd: psd.max(0.0),
        })
    }

    /// Common covariance toward the first terminal plus matched-filter private
    /// covariances, each with an equal share of the budget, halved until all
    /// constraints hold.
    pub fn initial_point(&self) -> Result<(CMat, Vec<CMat>, Vec<f64>)> {
        let n = self.elements();
        let share = self.budget() / (self.users.len() + 1) as f64;
        let a = match self.params.first() {
            Some(p) => steering_vector(&self.geom, p.azimuth, p.pitch),
            None => CVec::from_element(n, C64::new(1.0, 0.0)),
        };
        let common = match self.settings.mode {
            AccessMode::Rsma => outer(&a, &a).scale(share / n as f64),
            AccessMode::Sdma => CMat::zeros(n, n),
        };
        let privates: Vec<CMat> = self
            .users
            .iter()
            .map(|u| outer(&u.channel, &u.channel).scale(share / u.channel.norm_squared()))
            .collect();
        let mut scale = 1.0;
        let mut last = None;
        for _ in 0..60 {
            let qc = common.scale(scale);
            let qs: Vec<CMat> = privates.iter().map(|q| q.scale(scale)).collect();
            let split = split_common_rate(&self.rates(&qc, &qs)?, self.settings.rate_threshold);
            let f = self.feasibility(&qc, &qs, &split.allocation)?;
            if split.feasible && f.worst() <= 1e-9 {
                return Ok((qc, qs, split.allocation));
            }
            last = f.describe(1e-9).or(Some("common-rate cap"));
            scale *= 0.5;
        }
        Err(Error::Infeasible(format!(
            "no feasible scaling of the initial precoders ({})",
            last.unwrap_or("unknown")
        )))
    }
}

// common-rate split

#[derive(Debug, Clone, PartialEq)]
pub struct CommonRateSplit {
    pub allocation: Vec<f64>,
    pub feasible: bool,
}

/// Smallest total common rate that meets the threshold, split evenly.
pub fn split_common_rate(report: &RateReport, rate_threshold: f64) -> CommonRateSplit {
    let k = report.rate_private.len();
    if k == 0 {
        return CommonRateSplit {
            allocation: Vec::new(),
            feasible: rate_threshold <= 0.0,
        };
    }
    let need = rate_threshold - report.private_sum();
    let share = need.max(0.0) / k as f64;
    let feasible = need <= report.common_cap + 1e-12 * rate_threshold.abs().max(1.0);
    CommonRateSplit {
        allocation: vec![share; k],
        feasible,
    }
}

/// Common-stream SINR needed to carry a total common rate, `2^{ΣC/W} − 1`.
pub fn common_sinr_target(allocation: &[f64], bandwidth: f64) -> f64 {
    (allocation.iter().sum::<f64>() / bandwidth * LN_2).exp_m1()
}

// private-rate linearization

/// Linearization of the private rates at an anchor. Rates are
/// `W log₂(x_k/y_k)` with `x_k` the total received power and `y_k` the
/// interference plus noise; `log₂ y_k` is replaced by its tangent.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivateRateSurrogate {
    pub noise: f64,
    pub bandwidth: f64,
    pub anchor_total: Vec<f64>,
    pub anchor_interference: Vec<f64>,
}

fn received(grams: &[CMat], privates: &[CMat], extra: &[f64], noise: f64) -> (Vec<f64>, Vec<f64>) {
    let mut total = Vec::with_capacity(grams.len());
    let mut interference = Vec::with_capacity(grams.len());
    for (k, f) in grams.iter().enumerate() {
        let p: Vec<f64> = privates
            .iter()
            .map(|q| re_trace_product(f, q).max(0.0))
            .collect();
        let all: f64 = p.iter().sum::<f64>() + extra[k] + noise;
        total.push(all);
        interference.push(all - p[k]);
    }
    (total, interference)
}

/// `extra[k]` is interference beyond the private streams.
pub fn linearize_private_rate(
    anchor: &[CMat],
    grams: &[CMat],
    extra: &[f64],
    noise: f64,
    bandwidth: f64,
) -> Result<PrivateRateSurrogate> {
    check_len(grams.len(), anchor.len())?;
    check_len(grams.len(), extra.len())?;
    if !(noise > 0.0) {
        return Err(invalid("noise power must be positive"));
    }
    let (anchor_total, anchor_interference) = received(grams, anchor, extra, noise);
    Ok(PrivateRateSurrogate {
        noise,
        bandwidth,
        anchor_total,
        anchor_interference,
    })
}

impl PrivateRateSurrogate {
    pub fn true_rates(&self, grams: &[CMat], privates: &[CMat], extra: &[f64]) -> Vec<f64> {
        let (x, y) = received(grams, privates, extra, self.noise);
        x.iter()
            .zip(&y)
            .map(|(x, y)| self.bandwidth * (x / y).log2())
            .collect()
    }

    /// `f_k(Q) − v_k^ub(Q)`: exact concave part minus the tangent of the
    /// convex part.
    pub fn surrogate_rates(&self, grams: &[CMat], privates: &[CMat], extra: &[f64]) -> Vec<f64> {
        let (x, y) = received(grams, privates, extra, self.noise);
        (0..x.len())
            .map(|k| {
                let y0 = self.anchor_interference[k];
                self.bandwidth / LN_2 * (x[k].ln() - y0.ln() - (y[k] - y0) / y0)
            })
            .collect()
    }

    /// The form used inside conic programs, where `ln x` is further bounded
    /// below by `ln x₀ + 1 − x₀/x`.
    pub fn conic_rates(&self, grams: &[CMat], privates: &[CMat], extra: &[f64]) -> Vec<f64> {
        let (x, y) = received(grams, privates, extra, self.noise);
        (0..x.len())
            .map(|k| {
                let (x0, y0) = (self.anchor_total[k], self.anchor_interference[k]);
                self.bandwidth / LN_2 * (x0.ln() + 1.0 - x0 / x[k] - y0.ln() - (y[k] - y0) / y0)
            })
            .collect()
    }
}

/// `Σ_j [ln(x0_j/y0_j) + 2 − s_j − y_j/y0_j] ≥ target` with
/// `[[s_j, 1], [1, x_j/x0_j]] ⪰ 0`, i.e. `s_j ≥ x0_j/x_j`.
#[allow(clippy::too_many_arguments)]
fn add_log_surrogate(
    cp: &mut ConicProblem,
    label: &str,
    xs: &[LinearForm],
    ys: &[LinearForm],
    x0: &[f64],
    y0: &[f64],
    block: BlockId,
    offset: usize,
    target_nats: f64,
) {
    let mut sum = LinearForm::new();
    for j in 0..xs.len() {
        let lmi = Lmi::new(
            format!("{label} minorant {j}"),
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
        )
        .entry(0, 0, LinearForm::new().scalar(block, offset + j, 1.0))
        .entry(1, 1, xs[j].scaled(1.0 / x0[j]));
        cp.add_lmi(lmi);
        sum = sum
            .scalar(block, offset + j, -1.0)
            .plus(&ys[j].scaled(-1.0 / y0[j]))
            .add_constant((x0[j] / y0[j]).ln() + 2.0);
    }
    cp.constrain(label, sum, Sense::Ge, target_nats);
}

/// `[X]_nn ≤ headroom_n` for every element, or one trace row.
fn add_power_rows(
    cp: &mut ConicProblem,
    x: BlockId,
    n: usize,
    mode: PowerConstraint,
    headroom: &[f64],
) {
    match mode {
        PowerConstraint::Trace => {
            cp.constrain(
                "power budget",
                LinearForm::new().matrix(x, CMat::identity(n, n)),
                Sense::Le,
                headroom.iter().sum::<f64>(),
            );
        }
        PowerConstraint::PerElement => {
            for (i, h) in headroom.iter().enumerate() {
                let mut e = CMat::zeros(n, n);
                e[(i, i)] = C64::new(1.0, 0.0);
                cp.constrain(
                    format!("element power {i}"),
                    LinearForm::new().matrix(x, e),
                    Sense::Le,
                    *h,
                );
            }
        }
    }
}

/// Per-element power left over after `used`, in units of `P_t`.
fn headroom(pt: f64, n: usize, used: &[&CMat]) -> Vec<f64> {
    (0..n)
        .map(|i| (pt - used.iter().map(|q| q[(i, i)].re).sum::<f64>()) / pt)
        .collect()
}

fn hermitian_value(sol: &ConicSolution, block: BlockId, scale: f64) -> CMat {
    match &sol.values[block.0] {
        BlockValue::Hermitian(x) => psd_projection(&hermitian_part(x)).scale(scale),
        BlockValue::Nonneg(_) => unreachable!("block {} is Hermitian", block.0),
    }
}

fn scalar_value(sol: &ConicSolution, block: BlockId, index: usize) -> f64 {
    match &sol.values[block.0] {
        BlockValue::Nonneg(v) => v[index],
        BlockValue::Hermitian(_) => unreachable!("block {} is scalar", block.0),
    }
}

// sensing-stream subproblem

#[derive(Debug, Clone, PartialEq)]
pub struct SensingSolution {
    pub common: CMat,
    /// Achieved bound on the smallest FIM eigenvalue, 0 without localization targets.
    pub localization: f64,
    pub status: SolveStatus,
    pub violation: Option<String>,
    pub iterations: usize,
}

/// Sensing covariance maximizing the weighted objective with the private
/// covariances and the common-rate split held fixed. `anchor` is returned
/// when the program fails.
#[allow(clippy::too_many_arguments)]
pub fn solve_sensing_stream(
    problem: &DesignProblem,
    anchor: &CMat,
    privates: &[CMat],
    allocation: &[f64],
    weights: &ObjectiveWeights,
    norm: &Normalization,
    backend: &mut dyn ConicBackend,
) -> Result<SensingSolution> {
    check_len(problem.users.len(), privates.len())?;
    check_len(problem.users.len(), allocation.len())?;
    let s = &problem.settings;
    if s.mode == AccessMode::Sdma {
        return Err(invalid(
            "no sensing stream to design with the common stream off",
        ));
    }
    let n = problem.elements();
    let pt = s.power_per_element;
    let sigma2 = s.noise;
    let w = problem.geom.bandwidth;
    let eye = CMat::identity(n, n);

    let mut cp = ConicProblem::new();
    let x = cp.add_hermitian(n);
    let localize: Vec<&SensingTarget> = problem
        .targets
        .iter()
        .filter(|t| t.service == Service::Localize)
        .collect();
    let aux = (!localize.is_empty()).then(|| cp.add_nonneg(1));

    let used: Vec<&CMat> = privates.iter().collect();
    add_power_rows(&mut cp, x, n, s.power_constraint, &headroom(pt, n, &used));

    if s.mode == AccessMode::Rsma {
        let gamma = common_sinr_target(allocation, w);
        if gamma > 0.0 {
            for (j, u) in problem.users.iter().enumerate() {
                let interference: f64 = privates
                    .iter()
                    .map(|q| re_trace_product(&u.gram, q))
                    .sum::<f64>()
                    / sigma2;
                cp.constrain(
                    format!("common sinr {j}"),
                    LinearForm::new().matrix(x, u.gram.scale(pt / sigma2)),
                    Sense::Ge,
                    gamma * (interference + 1.0),
                );
            }
        }
    }

    let mut t_ref = 1.0;
    if let Some(block) = aux.filter(|_| !localize.is_empty()) {
        let iso = eye.scale(pt);
        let iso_mu = localize
            .iter()
            .map(|t| crb_and_qos(&t.fim(&iso)).min_eigenvalue)
            .fold(f64::INFINITY, f64::min);
        if iso_mu > 0.0 && iso_mu.is_finite() {
            t_ref = iso_mu;
        }
        for tg in &localize {
            let iso_fim: Matrix4<f64> = tg.map.apply(&iso);
            let mut d = [0.0; 4];
            for i in 0..4 {
                let v = iso_fim[(i, i)];
                if !(v > 0.0) {
                    return Err(invalid(format!(
                        "terminal {} carries no information on parameter {i}",
                        tg.terminal
                    )));
                }
                d[i] = 1.0 / v.sqrt();
            }
            let mut lmi = Lmi::new(
                format!("localization {}", tg.terminal),
                DMatrix::zeros(4, 4),
            );
            for i in 0..4 {
                for j in i..4 {
                    let mut f = LinearForm::new().matrix(
                        x,
                        hermitian_part(tg.map.entry(i, j)).scale(pt * d[i] * d[j]),
                    );
                    if i == j {
                        f = f.scalar(block, 0, -t_ref * d[i] * d[i]);
                    }
                    lmi = lmi.entry(i, j, f);
                }
            }
            cp.add_lmi(lmi);
        }
    }

    let mut obj_mat = CMat::zeros(n, n);
    for tg in &problem.targets {
        match tg.service {
            Service::Detect => {
                obj_mat += eye.scale(weights.detection * tg.gain * pt / norm.detection)
            }
            Service::Track => {
                obj_mat += tg
                    .proxy_matrix()
                    .scale(weights.tracking * pt / norm.tracking)
            }
            Service::Localize => {}
        }
    }
    let mut obj = LinearForm::new().matrix(x, obj_mat);
    if let Some(block) = aux.filter(|_| !localize.is_empty()) {
        obj = obj.scalar(block, 0, weights.localization * t_ref / norm.localization);
    }
    cp.maximize(obj);

    let sol = backend.solve(&cp)?;
    if !sol.status.is_solved() {
        return Ok(SensingSolution {
            common: anchor.clone(),
            localization: 0.0,
            status: sol.status,
            violation: Some(format!("sensing-stream program: {:?}", sol.status)),
            iterations: sol.iterations,
        });
    }
    let violation = cp
        .residuals(&sol.values)
        .worst(&cp, 1e-6)
        .map(str::to_owned);
    let common = hermitian_value(&sol, x, pt);
    let localization = match aux.filter(|_| !localize.is_empty()) {
        Some(block) => scalar_value(&sol, block, 0) * t_ref,
        None => 0.0,
    };
    Ok(SensingSolution {
        common,
        localization,
        status: sol.status,
        violation,
        iterations: sol.iterations,
    })
}

// private-stream subproblems

#[derive(Debug, Clone)]
enum Stage {
    Power,
    Rank(CVec),
}

/// Program over `X = Q_k/P_t` with every other covariance fixed.
fn private_program(
    problem: &DesignProblem,
    common: &CMat,
    privates: &[CMat],
    k: usize,
    allocation: &[f64],
    stage: &Stage,
) -> (ConicProblem, BlockId) {
    let s = &problem.settings;
    let n = problem.elements();
    let pt = s.power_per_element;
    let sigma2 = s.noise;
    let w = problem.geom.bandwidth;
    let kk = problem.users.len();
    let eye = CMat::identity(n, n);
    let mut cp = ConicProblem::new();
    let x = cp.add_hermitian(n);

    let used: Vec<&CMat> = std::iter::once(common)
        .chain(
            privates
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != k)
                .map(|(_, q)| q),
        )
        .collect();
    add_power_rows(&mut cp, x, n, s.power_constraint, &headroom(pt, n, &used));

    let i1 = s.echo_threshold;
    for (j, u) in problem.users.iter().enumerate() {
        if trace_re(&u.echo_gram) * problem.budget() <= i1 {
            continue;
        }
        let rest: f64 = privates
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != k)
            .map(|(_, q)| re_trace_product(&u.echo_gram, q))
            .sum();
        cp.constrain(
            format!("echo {j}"),
            LinearForm::new().matrix(x, u.echo_gram.scale(pt / i1)),
            Sense::Le,
            1.0 - rest / i1,
        );
    }

    let sum_c: f64 = allocation.iter().sum();
    let need = s.rate_threshold - sum_c;
    if need > 0.0 && kk > 0 {
        let block = cp.add_nonneg(kk);
        let mut xs = Vec::with_capacity(kk);
        let mut ys = Vec::with_capacity(kk);
        let mut x0 = Vec::with_capacity(kk);
        let mut y0 = Vec::with_capacity(kk);
        for (j, u) in problem.users.iter().enumerate() {
            let f = u.gram.scale(pt / sigma2);
            let rest = |skip_j: bool| -> f64 {
                privates
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != k && !(skip_j && *i == j))
                    .map(|(_, q)| re_trace_product(&u.gram, q))
                    .sum()
            };
            let base_x = (rest(false) + sigma2) / sigma2;
            let base_y = (rest(true) + sigma2) / sigma2;
            let at_anchor = re_trace_product(&u.gram, &privates[k]).max(0.0) / sigma2;
            xs.push(LinearForm::constant(base_x).matrix(x, f.clone()));
            x0.push(base_x + at_anchor);
            if j == k {
                ys.push(LinearForm::constant(base_y));
                y0.push(base_y);
            } else {
                ys.push(LinearForm::constant(base_y).matrix(x, f));
                y0.push(base_y + at_anchor);
            }
        }
        add_log_surrogate(
            &mut cp,
            "private rate",
            &xs,
            &ys,
            &x0,
            &y0,
            block,
            0,
            need * LN_2 / w,
        );
    }

    if s.mode == AccessMode::Rsma {
        let gamma = common_sinr_target(allocation, w);
        if gamma > 0.0 {
            for (j, u) in problem.users.iter().enumerate() {
                let rest: f64 = privates
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != k)
                    .map(|(_, q)| re_trace_product(&u.gram, q))
                    .sum();
                cp.constrain(
                    format!("common sinr {j}"),
                    LinearForm::new().matrix(x, u.gram.scale(-gamma * pt / sigma2)),
                    Sense::Ge,
                    gamma * (rest / sigma2 + 1.0) - re_trace_product(&u.gram, common) / sigma2,
                );
            }
        }
    }

    match stage {
        Stage::Power => cp.minimize(LinearForm::new().matrix(x, eye)),
        Stage::Rank(u) => cp.minimize(LinearForm::new().matrix(x, eye - outer(u, u))),
    }
    (cp, x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DcOutcome {
    pub covariance: CMat,
    /// Rank-one gap `tr(Q) − λ_max(Q)` after each accepted step, starting at the input.
    pub gaps: Vec<f64>,
    pub stalled: bool,
    pub status: SolveStatus,
}

/// DC iterations on the rank-one gap of private covariance `k`, each
/// minimizing `tr(Q) − u uᴴ Q` with `u` the current principal eigenvector.
#[allow(clippy::too_many_arguments)]
pub fn dc_refine(
    problem: &DesignProblem,
    common: &CMat,
    privates: &[CMat],
    k: usize,
    allocation: &[f64],
    config: &AoConfig,
    backend: &mut dyn ConicBackend,
) -> Result<DcOutcome> {
    let pt = problem.settings.power_per_element;
    let mut current = privates.to_vec();
    let mut q = privates[k].clone();
    let mut gaps = vec![rank_one_gap(&q)];
    let mut status = SolveStatus::Optimal;
    let mut stalled = false;
    for _ in 0..config.dc_iterations {
        let last = *gaps.last().expect("nonempty");
        if last <= config.dc_tolerance * trace_re(&q) {
            break;
        }
        let (_, u) = principal_component(&q);
        current[k] = q.clone();
        let (cp, x) = private_program(problem, common, &current, k, allocation, &Stage::Rank(u));
        let sol = backend.solve(&cp)?;
        status = sol.status;
        if !sol.status.is_solved() {
            stalled = true;
            break;
        }
        let next = hermitian_value(&sol, x, pt);
        let g = rank_one_gap(&next);
        if g > last * (1.0 + 1e-6) + 1e-15 * problem.budget() {
            stalled = true;
            break;
        }
        q = next;
        gaps.push(g);
    }
    Ok(DcOutcome {
        covariance: q,
        gaps,
        stalled,
        status,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrivateSolution {
    pub privates: Vec<CMat>,
    pub statuses: Vec<SolveStatus>,
    pub gaps: Vec<Vec<f64>>,
    pub stalled: Vec<bool>,
}

/// Updates the private covariances one terminal at a time.
pub fn solve_private_streams(
    problem: &DesignProblem,
    common: &CMat,
    anchor: &[CMat],
    allocation: &[f64],
    config: &AoConfig,
    backend: &mut dyn ConicBackend,
) -> Result<PrivateSolution> {
    let kk = problem.users.len();
    check_len(kk, anchor.len())?;
    let pt = problem.settings.power_per_element;
    let n = problem.elements();
    let threshold = problem.settings.rate_threshold;
    let sum_c: f64 = allocation.iter().sum();
    let acceptable = |privates: &[CMat]| -> Result<bool> {
        let rates = problem.rates(common, privates)?;
        let f = problem.feasibility(common, privates, allocation)?;
        Ok(sum_c + rates.private_sum() >= threshold * (1.0 - 1e-9)
            && [f.budget, f.echo, f.common, f.element]
                .iter()
                .all(|v| *v <= 1e-9))
    };
    let mut current = anchor.to_vec();
    let mut out = PrivateSolution {
        privates: Vec::new(),
        statuses: Vec::new(),
        gaps: Vec::new(),
        stalled: Vec::new(),
    };
    for k in 0..kk {
        let (cp, x) = private_program(problem, common, &current, k, allocation, &Stage::Power);
        let sol = backend.solve(&cp)?;
        if !sol.status.is_solved() {
            // the anchor is feasible, so keep it
            out.statuses.push(sol.status);
            out.gaps.push(vec![rank_one_gap(&current[k])]);
            out.stalled.push(false);
            continue;
        }
        let previous = std::mem::replace(&mut current[k], CMat::zeros(n, n));
        if acceptable(&current)? {
            out.statuses.push(sol.status);
            out.gaps.push(vec![0.0]);
            out.stalled.push(false);
            continue;
        }
        current[k] = hermitian_value(&sol, x, pt);
        let dc = dc_refine(problem, common, &current, k, allocation, config, backend)?;
        let mut q = dc.covariance;
        let tr = trace_re(&q);
        if tr > 0.0 && rank_one_gap(&q) > 0.0 {
            let (lam, u) = principal_component(&q);
            let uu = outer(&u, &u);
            for cand in [uu.scale(lam), uu.scale(tr)] {
                current[k] = cand.clone();
                if acceptable(&current)? {
                    q = cand;
                    break;
                }
            }
        }
        current[k] = q;
        if !acceptable(&current)?
            && acceptable(&{
                let mut c = current.clone();
                c[k] = previous.clone();
                c
            })?
        {
            current[k] = previous;
        }
        out.statuses
            .push(if dc.stalled { dc.status } else { sol.status });
        out.gaps.push(dc.gaps);
        out.stalled.push(dc.stalled);
    }
    out.privates = current;
    Ok(out)
}

// rank-one extraction

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankOneReport {
    /// `λ_max / tr`.
    pub ratio: f64,
    pub randomized: bool,
    pub candidates: usize,
    pub feasible: bool,
    pub score: f64,
}

/// Rank-one vector from a PSD matrix. `score` rescales a candidate to a
/// feasible one and returns it with its objective, or `None`.
pub fn rank_one_extract<R: Rng + ?Sized>(
    q: &CMat,
    count: usize,
    tol: f64,
    rng: &mut R,
    mut score: impl FnMut(&CVec) -> Option<(CVec, f64)>,
) -> (CVec, RankOneReport) {
    let n = q.nrows();
    let (values, vectors) = hermitian_eigen(q);
    let tr: f64 = values.iter().map(|v| v.max(0.0)).sum();
    let lam = values.last().copied().unwrap_or(0.0).max(0.0);
    let principal = vectors.column(n - 1).scale(lam.sqrt());
    let ratio = if tr > 0.0 { lam / tr } else { 1.0 };
    let mut best = score(&principal);
    let mut candidates = 1;
    let randomized = ratio < 1.0 - tol;
    if randomized {
        let root = &vectors
            * DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
                n,
                values.iter().map(|v| C64::new(v.max(0.0).sqrt(), 0.0)),
            ));
        for _ in 0..count {
            let z = complex_normal_vector(rng, n, 1.0);
            let p = &root * z;
            candidates += 1;
            if let Some((c, s)) = score(&p) {
                if best.as_ref().is_none_or(|(_, b)| s > *b) {
                    best = Some((c, s));
                }
            }
        }
    }
    match best {
        Some((p, s)) => (
            p,
            RankOneReport {
                ratio,
                randomized,
                candidates,
                feasible: true,
                score: s,
            },
        ),
        None => (
            principal,
            RankOneReport {
                ratio,
                randomized,
                candidates,
                feasible: false,
                score: f64::NAN,
            },
        ),
    }
}

// alternating loop

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AoConfig {
    /// Relative objective change that ends the loop.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub dc_iterations: usize,
    /// DC steps stop once `tr(Q) − λ_max(Q) ≤ dc_tolerance·tr(Q)`.
    pub dc_tolerance: f64,
    pub weights: ObjectiveWeights,
    pub normalize: bool,
    pub randomizations: usize,
    /// Covariances with `λ_max/tr ≥ 1 − rank_tolerance` skip randomization.
    pub rank_tolerance: f64,
    pub seed: u64,
}

impl Default for AoConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-3,
            max_iterations: 10,
            dc_iterations: 20,
            dc_tolerance: 1e-7,
            weights: ObjectiveWeights::default(),
            normalize: true,
            randomizations: 200,
            rank_tolerance: 1e-6,
            seed: 7,
        }
    }
}

impl AoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(invalid("convergence tolerance must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(invalid("max_iterations must be at least 1"));
        }
        let w = &self.weights;
        if [w.detection, w.localization, w.tracking]
            .iter()
            .any(|v| !(*v >= 0.0 && v.is_finite()))
        {
            return Err(invalid("objective weights must be nonnegative"));
        }
        if !(self.dc_tolerance >= 0.0 && self.rank_tolerance >= 0.0) {
            return Err(invalid("rank tolerances must be nonnegative"));
        }
        Ok(())
    }
}

/// Slack allowed when comparing consecutive objective values.
pub fn monotone_slack(previous: f64) -> f64 {
    1e-8 * previous.abs().max(1.0)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AoTrace {
    /// Weighted objective; entry 0 is the initial point.
    pub objective: Vec<f64>,
    pub parts: Vec<ObjectiveParts>,
    pub sensing_status: Vec<SolveStatus>,
    pub sensing_rejected: Vec<bool>,
    pub private_status: Vec<Vec<SolveStatus>>,
    pub dc_gaps: Vec<Vec<Vec<f64>>>,
    /// `(tr − λ_max)/tr` of each private covariance after each iteration.
    pub rank_gaps: Vec<Vec<f64>>,
    pub residuals: Vec<f64>,
    pub converged: bool,
    pub diagnosis: Option<String>,
}

impl AoTrace {
    pub fn iterations(&self) -> usize {
        self.objective.len().saturating_sub(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AoOutcome {
    pub precoders: PrecodingSet,
    pub allocation: Vec<f64>,
    pub rates: RateReport,
    pub feasible: bool,
    pub common: CMat,
    pub privates: Vec<CMat>,
    pub normalization: Normalization,
    pub relaxed_objective: f64,
    pub extracted_objective: f64,
    pub extracted_parts: ObjectiveParts,
    pub extraction: RankOneReport,
    /// Uniform factor applied to meet the per-element limit, 1 when none was needed.
    pub power_rescale: f64,
    pub trace: AoTrace,
}

fn relative_gap(q: &CMat) -> f64 {
    let tr = trace_re(q);
    if tr > 0.0 {
        rank_one_gap(q) / tr
    } else {
        0.0
    }
}

pub fn ao_loop(
    problem: &DesignProblem,
    config: &AoConfig,
    backend: &mut dyn ConicBackend,
) -> Result<AoOutcome> {
    config.validate()?;
    let s = problem.settings;
    let (mut qc, mut qs, mut alloc) = problem.initial_point()?;
    let norm = if config.normalize {
        Normalization::isotropic(problem)
    } else {
        Normalization::UNIT
    };
    let value = |p: &ObjectiveParts| p.weighted(&config.weights, &norm);

    let mut trace = AoTrace::default();
    let parts0 = problem.sensed_parts(&qc, &qs);
    trace.objective.push(value(&parts0));
    trace.parts.push(parts0);
    trace
        .residuals
        .push(problem.feasibility(&qc, &qs, &alloc)?.worst());
    trace.rank_gaps.push(qs.iter().map(relative_gap).collect());

    let mut prev = value(&parts0);
    let sensing_stream = s.mode == AccessMode::Rsma;
    for _ in 0..config.max_iterations {
        if sensing_stream {
            let sensing =
                solve_sensing_stream(problem, &qc, &qs, &alloc, &config.weights, &norm, backend)?;
            trace.sensing_status.push(sensing.status);
            let mut rejected = true;
            if sensing.status.is_solved() {
                let cand = value(&problem.parts(&sensing.common));
                let feas = problem.feasibility(&sensing.common, &qs, &alloc)?.worst();
                if cand >= prev - monotone_slack(prev) && feas <= 1e-6 {
                    qc = sensing.common;
                    rejected = false;
                }
            } else if sensing.status == SolveStatus::PrimalInfeasible {
                trace.sensing_rejected.push(true);
                trace.diagnosis = Some("sensing-stream program infeasible".into());
                break;
            }
            trace.sensing_rejected.push(rejected);
        }

        let update = solve_private_streams(problem, &qc, &qs, &alloc, config, backend)?;
        trace.private_status.push(update.statuses.clone());
        trace.dc_gaps.push(update.gaps.clone());
        let split = split_common_rate(&problem.rates(&qc, &update.privates)?, s.rate_threshold);
        let feas = problem.feasibility(&qc, &update.privates, &split.allocation)?;
        if split.feasible && feas.worst() <= 1e-6 {
            qs = update.privates;
            alloc = split.allocation;
        } else if trace.diagnosis.is_none() {
            trace.diagnosis = Some(format!(
                "private update rejected: {}",
                feas.describe(1e-6).unwrap_or("common-rate cap")
            ));
        }

        let parts = problem.sensed_parts(&qc, &qs);
        let cur = value(&parts);
        trace.objective.push(cur);
        trace.parts.push(parts);
        trace
            .residuals
            .push(problem.feasibility(&qc, &qs, &alloc)?.worst());
        trace.rank_gaps.push(qs.iter().map(relative_gap).collect());
        let change = (cur - prev).abs() / prev.abs().max(f64::MIN_POSITIVE);
        prev = cur;
        if trace
            .diagnosis
            .as_deref()
            .is_some_and(|d| d.contains("infeasible"))
        {
            break;
        }
        if change < config.tolerance {
            trace.converged = true;
            break;
        }
    }

    // closing sensing solve at the final private covariances, so the
    // relaxation bounds every rank-one candidate built on them
    if sensing_stream && trace.diagnosis.is_none() {
        let sensing =
            solve_sensing_stream(problem, &qc, &qs, &alloc, &config.weights, &norm, backend)?;
        if sensing.status.is_solved()
            && value(&problem.parts(&sensing.common)) >= prev - monotone_slack(prev)
            && problem.feasibility(&sensing.common, &qs, &alloc)?.worst() <= 1e-6
        {
            qc = sensing.common;
        }
    }

    // rank-one extraction of the sensing stream
    let relaxed_objective = value(&problem.sensed_parts(&qc, &qs));
    let power_c = trace_re(&qc);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let feasible_at = |p: &CVec| -> bool {
        let q = outer(p, p);
        let Ok(rates) = problem.rates(&q, &qs) else {
            return false;
        };
        let split = split_common_rate(&rates, s.rate_threshold);
        split.feasible
            && problem
                .feasibility(&q, &qs, &split.allocation)
                .map(|f| f.worst() <= 1e-6)
                .unwrap_or(false)
    };
    let headroom: Vec<f64> = (0..problem.elements())
        .map(|n| (s.power_per_element - qs.iter().map(|q| q[(n, n)].re).sum::<f64>()).max(0.0))
        .collect();
    let score = |p: &CVec| -> Option<(CVec, f64)> {
        let pw = p.norm_squared();
        if !(pw > 0.0) {
            return None;
        }
        let bases = match s.power_constraint {
            PowerConstraint::Trace => vec![p.scale((power_c / pw).sqrt())],
            PowerConstraint::PerElement => {
                let uniform = p
                    .iter()
                    .zip(&headroom)
                    .filter(|(v, _)| v.norm_sqr() > 0.0)
                    .map(|(v, h)| (h / v.norm_sqr()).sqrt())
                    .fold(f64::INFINITY, f64::min);
                let phases = CVec::from_iterator(
                    p.len(),
                    p.iter()
                        .zip(&headroom)
                        .map(|(v, h)| C64::from_polar(h.sqrt(), v.arg())),
                );
                vec![p.scale(uniform), phases]
            }
        };
        bases
            .iter()
            .filter(|b| feasible_at(b))
            .cloned()
            .map(|c| {
                let v = value(&problem.parts(&outer(&c, &c)));
                (c, v)
            })
            .max_by(|x, y| x.1.total_cmp(&y.1))
    };
    let (pc, extraction) = if power_c > 0.0 {
        rank_one_extract(
            &qc,
            config.randomizations,
            config.rank_tolerance,
            &mut rng,
            score,
        )
    } else {
        (
            CVec::zeros(problem.elements()),
            RankOneReport {
                ratio: 1.0,
                randomized: false,
                candidates: 0,
                feasible: true,
                score: 0.0,
            },
        )
    };
    let privates: Vec<CVec> = qs
        .iter()
        .map(|q| {
            let (lam, u) = principal_component(q);
            u.scale(lam.max(0.0).sqrt())
        })
        .collect();
    let mut precoders = PrecodingSet::new(pc, privates);
    precoders.lifted = Some(LiftedCovariances {
        common: qc.clone(),
        privates: qs.clone(),
    });
    let power = per_element_power(&precoders, s.power_per_element);
    let power_rescale = if power.pass {
        1.0
    } else {
        (s.power_per_element / power.peak()).sqrt()
    };
    if power_rescale != 1.0 {
        precoders = precoders.scaled(power_rescale);
    }
    let final_common = outer(&precoders.common, &precoders.common);
    let final_privates: Vec<CMat> = precoders.privates.iter().map(|p| outer(p, p)).collect();
    let rates = problem.rates(&final_common, &final_privates)?;
    let split = split_common_rate(&rates, s.rate_threshold);
    let feasible = split.feasible
        && problem
            .feasibility(&final_common, &final_privates, &split.allocation)?
            .worst()
            <= 1e-6;
    let extracted_parts = problem.sensed_parts(&final_common, &final_privates);
    Ok(AoOutcome {
        rates: rates.with_allocation(split.allocation.clone()),
        allocation: split.allocation,
        precoders,
        feasible,
        common: qc,
        privates: qs,
        normalization: norm,
        relaxed_objective,
        extracted_objective: value(&extracted_parts),
        extracted_parts,
        extraction,
        power_rescale,
        trace,
    })
}

// design-and-track rounds

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JointConfig {
    pub rounds: usize,
    pub sample_time: f64,
    pub process_intensity: f64,
    /// Draw measurement noise from the CRB-derived covariance.
    pub measurement_noise: bool,
    pub seed: u64,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            rounds: 100,
            sample_time: 0.02,
            process_intensity: 1.0,
            measurement_noise: true,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackRecord {
    pub terminal: usize,
    pub truth: StateVec,
    pub prior: StateVec,
    pub posterior: StateVec,
    pub covariance: Matrix6<f64>,
    pub information: Matrix6<f64>,
    pub measurement_variances: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub objective: f64,
    pub parts: ObjectiveParts,
    pub iterations: usize,
    pub converged: bool,
    pub precoders: PrecodingSet,
    pub rates: RateReport,
    pub tracks: Vec<TrackRecord>,
}

/// Design precoders, measure and filter, move the terminals; `rounds` times.
/// Channels follow the true geometry; tracked terminals enter the design
/// through their predicted state.
pub fn joint_design_loop(
    geom: &ArrayGeometry,
    terminals: &[TerminalSpec],
    settings: &SystemSettings,
    ao: &AoConfig,
    joint: &JointConfig,
    backend: &mut dyn ConicBackend,
) -> Result<Vec<RoundRecord>> {
    let (f, delta) = transition_and_process(joint.sample_time, joint.process_intensity)?;
    let mut rng = ChaCha8Rng::seed_from_u64(joint.seed);
    let mut specs = terminals.to_vec();
    let mut states: Vec<Option<TrackState>> = terminals
        .iter()
        .map(|t| {
            (t.service == Some(Service::Track))
                .then(|| TrackState::initial(state_of(&t.kinematics)))
        })
        .collect();
    let mut records = Vec::with_capacity(joint.rounds);
    for round in 1..=joint.rounds {
        for t in specs.iter_mut() {
            t.kinematics = t.kinematics.advanced(joint.sample_time);
        }
        let mut priors = Vec::with_capacity(specs.len());
        for st in &states {
            priors.push(match st {
                Some(st) => {
                    let predicted = f * st.estimate;
                    let (_, h) = measure_and_jacobian(&predicted)?;
                    let information = posterior_fim_with_information(
                        &st.information,
                        &f,
                        &delta,
                        &h,
                        &Matrix4::zeros(),
                    )?;
                    Some(TrackPrior {
                        information,
                        predicted,
                    })
                }
                None => None,
            });
        }
        let problem = DesignProblem::from_terminals(geom, &specs, settings, &priors)?;
        let out = ao_loop(&problem, ao, backend)?;
        if !out.feasible
            && out
                .trace
                .diagnosis
                .as_deref()
                .is_some_and(|d| d.contains("infeasible"))
        {
            return Err(Error::Infeasible(format!(
                "round {round}: {}",
                out.trace.diagnosis.unwrap_or_default()
            )));
        }
        let lifted: Vec<CMat> = out.precoders.privates.iter().map(|p| outer(p, p)).collect();
        let q_c = problem.sensing_covariance(
            &outer(&out.precoders.common, &out.precoders.common),
            &lifted,
        );
        let mut tracks = Vec::new();
        for tg in problem
            .targets
            .iter()
            .filter(|t| t.service == Service::Track)
        {
            let i = tg.terminal;
            let st = states[i].as_ref().expect("tracked terminal has a state");
            let crb = crb_and_qos(&tg.fim(&q_c));
            if crb.singular {
                return Err(Error::Singular("tracked-terminal FIM"));
            }
            let variances = measurement_variances(&crb.crb, geom.carrier_frequency);
            let model = TrackModel::new(
                joint.sample_time,
                joint.process_intensity,
                Matrix4::from_diagonal(&variances.into()),
            )?;
            let truth = state_of(&specs[i].kinematics);
            let (clean, _) = measure_and_jacobian(&truth)?;
            let measured = if joint.measurement_noise {
                clean + gaussian_with_covariance(&mut rng, &model.measurement)
            } else {
                clean
            };
            let prior = f * st.estimate;
            let next = ekf_step(st, &model, &measured)?;
            tracks.push(TrackRecord {
                terminal: i,
                truth,
                prior,
                posterior: next.estimate,
                covariance: next.covariance,
                information: next.information,
                measurement_variances: variances,
            });
            states[i] = Some(next);
        }
        records.push(RoundRecord {
            round,
            objective: out.trace.objective.last().copied().unwrap_or(f64::NAN),
            parts: out.trace.parts.last().copied().unwrap_or_default(),
            iterations: out.trace.iterations(),
            converged: out.trace.converged,
            precoders: out.precoders,
            rates: out.rates,
            tracks,
        });
    }
    Ok(records)
}
