//! Correlator detector for the common-stream echo: threshold from the false
//! alarm rate, closed-form detection probability, detection QoS and a Monte
//! Carlo verifier that synthesizes echoes sample by sample.
//!
//! Under H₀ the statistic is `(σ_r²/2)·χ²(2)`, under H₁ it is scaled by
//! `(σ_r² + σ²_α|c p_c|²)/2`. Both use the closed-form two-degree chi-square
//! distribution `F(x) = 1 − exp(−x/2)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::f64::consts::PI;

use crate::error::{invalid, Result};
use crate::linalg::{complex_normal, CVec, C64};
use crate::seeds::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionConfig {
    pub processing_noise: f64,
    pub false_alarm: f64,
    pub sensing_gain: f64,
    pub detection_qos: f64,
}

impl DetectionConfig {
    /// `β₁ = ‖p_c‖²·ς₁`.
    pub fn new(
        processing_noise: f64,
        false_alarm: f64,
        sensing_gain: f64,
        common_power: f64,
    ) -> Result<Self> {
        if !(processing_noise > 0.0) {
            return Err(invalid("processing noise must be positive"));
        }
        if !(false_alarm > 0.0 && false_alarm < 1.0) {
            return Err(invalid("false alarm probability must lie in (0, 1)"));
        }
        if !(sensing_gain >= 0.0 && common_power >= 0.0) {
            return Err(invalid("sensing gain and power must be nonnegative"));
        }
        Ok(Self {
            processing_noise,
            false_alarm,
            sensing_gain,
            detection_qos: common_power * sensing_gain,
        })
    }

    pub fn threshold(&self) -> f64 {
        -self.processing_noise * self.false_alarm.ln()
    }

    pub fn detection_probability(&self) -> f64 {
        detection_probability(self.threshold(), self.processing_noise, self.detection_qos)
    }
}

pub fn chi2_2dof_cdf(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        -(-x / 2.0).exp_m1()
    }
}

pub fn chi2_2dof_inverse(p: f64) -> f64 {
    -2.0 * (-p).ln_1p()
}

/// Normalized sensing gain `ς₁ = σ²_α ‖c‖⁴ / σ_r²`.
pub fn sensing_gain(rcs_variance: f64, sense_row: &CVec, processing_noise: f64) -> Result<f64> {
    if !(processing_noise > 0.0) {
        return Err(invalid("processing noise must be positive"));
    }
    Ok(rcs_variance * sense_row.norm_squared().powi(2) / processing_noise)
}

/// Threshold `δ = (σ_r²/2)·F⁻¹(1 − P_FA)`.
pub fn threshold_from_pfa(processing_noise: f64, false_alarm: f64) -> Result<f64> {
    if !(false_alarm > 0.0 && false_alarm < 1.0) {
        return Err(invalid("false alarm probability must lie in (0, 1)"));
    }
    Ok(processing_noise / 2.0 * chi2_2dof_inverse(1.0 - false_alarm))
}

pub fn detection_probability(threshold: f64, processing_noise: f64, detection_qos: f64) -> f64 {
    1.0 - chi2_2dof_cdf((2.0 * threshold / processing_noise) / (1.0 + detection_qos))
}

/// `P_FA^{1/(1+β₁)}`.
pub fn closed_form_detection(false_alarm: f64, detection_qos: f64) -> f64 {
    false_alarm.powf(1.0 / (1.0 + detection_qos))
}

/// Correlator statistic `|x̂|²` with `x̂ = Σ_l r[l+τ]·s*[l]·e^{−j2π f (l+τ) T}`.
pub fn lrt_statistic(
    echo: &[C64],
    waveform: &[C64],
    delay_samples: usize,
    doppler: f64,
    sample_time: f64,
) -> Result<f64> {
    if echo.len() < delay_samples + waveform.len() {
        return Err(invalid(format!(
            "echo of {} samples cannot hold a {}-sample waveform delayed by {}",
            echo.len(),
            waveform.len(),
            delay_samples
        )));
    }
    let mut acc = C64::new(0.0, 0.0);
    for (l, s) in waveform.iter().enumerate() {
        let n = l + delay_samples;
        let rot = C64::from_polar(1.0, -2.0 * PI * doppler * n as f64 * sample_time);
        acc += echo[n] * s.conj() * rot;
    }
    Ok(acc.norm_sqr())
}

/// Unit-energy QPSK sequence.
pub fn unit_energy_waveform(len: usize, seed: u64) -> Vec<C64> {
    use rand::RngExt;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amp = 1.0 / (len as f64).sqrt();
    (0..len)
        .map(|_| {
            let k: u8 = rng.random_range(0..4);
            C64::from_polar(amp, PI / 4.0 + PI / 2.0 * k as f64)
        })
        .collect()
}

/// Echo geometry for the Monte Carlo verifier.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionScenario {
    pub sense_row: CVec,
    pub common_precoder: CVec,
    pub rcs_variance: f64,
    pub delay_samples: usize,
    pub doppler: f64,
    pub sample_time: f64,
    pub waveform_len: usize,
}

impl DetectionScenario {
    /// Single-element scenario whose echo SNR equals `snr`.
    pub fn scalar_with_snr(snr: f64, processing_noise: f64) -> Self {
        Self {
            sense_row: CVec::from_element(1, C64::new(1.0, 0.0)),
            common_precoder: CVec::from_element(1, C64::new(1.0, 0.0)),
            rcs_variance: snr * processing_noise,
            delay_samples: 5,
            doppler: 1.2e3,
            sample_time: 1.0 / 20e6,
            waveform_len: 64,
        }
    }

    /// Echo amplitude `c·p_c` before the reflection coefficient.
    pub fn echo_gain(&self) -> C64 {
        self.sense_row
            .iter()
            .zip(self.common_precoder.iter())
            .map(|(c, p)| c * p)
            .sum()
    }

    pub fn echo_snr(&self, processing_noise: f64) -> f64 {
        self.rcs_variance * self.echo_gain().norm_sqr() / processing_noise
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionEstimate {
    pub trials: usize,
    pub false_alarms: usize,
    pub detections: usize,
    pub false_alarm_rate: f64,
    pub detection_rate: f64,
    pub false_alarm_se: f64,
    pub detection_se: f64,
}

fn binomial_se(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

/// One echo realization; `present` selects H₁.
fn synthesize_echo(
    scn: &DetectionScenario,
    waveform: &[C64],
    noise: f64,
    present: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<C64> {
    let len = scn.delay_samples + waveform.len();
    let mut echo: Vec<C64> = (0..len).map(|_| complex_normal(rng, noise)).collect();
    if present {
        let amp = complex_normal(rng, scn.rcs_variance) * scn.echo_gain();
        for (l, s) in waveform.iter().enumerate() {
            let n = l + scn.delay_samples;
            let rot = C64::from_polar(1.0, 2.0 * PI * scn.doppler * n as f64 * scn.sample_time);
            echo[n] += amp * s * rot;
        }
    }
    echo
}

/// Statistic samples under one hypothesis.
pub fn simulate_statistics(
    scn: &DetectionScenario,
    noise: f64,
    present: bool,
    trials: usize,
    seed: u64,
) -> Vec<f64> {
    let waveform = unit_energy_waveform(scn.waveform_len, derive_seed(seed, 0));
    let tag = if present { 2 } else { 1 };
    (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(seed, tag), i as u64));
            let echo = synthesize_echo(scn, &waveform, noise, present, &mut rng);
            lrt_statistic(
                &echo,
                &waveform,
                scn.delay_samples,
                scn.doppler,
                scn.sample_time,
            )
            .expect("lengths match by construction")
        })
        .collect()
}

pub fn simulate_detection(
    config: &DetectionConfig,
    scn: &DetectionScenario,
    trials: usize,
    seed: u64,
) -> DetectionEstimate {
    let delta = config.threshold();
    let noise = config.processing_noise;
    let count = |present| {
        simulate_statistics(scn, noise, present, trials, seed)
            .into_iter()
            .filter(|&t| t > delta)
            .count()
    };
    let false_alarms = count(false);
    let detections = count(true);
    let pfa = false_alarms as f64 / trials as f64;
    let pd = detections as f64 / trials as f64;
    DetectionEstimate {
        trials,
        false_alarms,
        detections,
        false_alarm_rate: pfa,
        detection_rate: pd,
        false_alarm_se: binomial_se(config.false_alarm, trials),
        detection_se: binomial_se(
            closed_form_detection(config.false_alarm, scn.echo_snr(noise)),
            trials,
        ),
    }
}
