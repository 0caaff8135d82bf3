//! Rate-splitting rate model: SINRs, achievable rates, common-rate cap,
//! echo interference at the base station and the per-element power limit.
//!
//! The common stream is decoded first by every terminal and removed; each
//! private stream is then decoded treating the other privates as noise.

use crate::error::{check_len, invalid, Result};
use crate::linalg::{re_trace_product, CMat, CVec};

#[derive(Debug, Clone, PartialEq)]
pub struct LiftedCovariances {
    pub common: CMat,
    pub privates: Vec<CMat>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrecodingSet {
    pub common: CVec,
    pub privates: Vec<CVec>,
    pub lifted: Option<LiftedCovariances>,
}

impl PrecodingSet {
    pub fn new(common: CVec, privates: Vec<CVec>) -> Self {
        Self {
            common,
            privates,
            lifted: None,
        }
    }

    pub fn elements(&self) -> usize {
        self.common.len()
    }

    /// All streams as columns `[p_c, p_1, …, p_K]`.
    pub fn columns(&self) -> impl Iterator<Item = &CVec> {
        std::iter::once(&self.common).chain(self.privates.iter())
    }

    pub fn total_power(&self) -> f64 {
        self.columns().map(|p| p.norm_squared()).sum()
    }

    pub fn scaled(&self, s: f64) -> Self {
        let lifted = self.lifted.as_ref().map(|l| LiftedCovariances {
            common: l.common.scale(s * s),
            privates: l.privates.iter().map(|q| q.scale(s * s)).collect(),
        });
        Self {
            common: self.common.scale(s),
            privates: self.privates.iter().map(|p| p.scale(s)).collect(),
            lifted,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    pub sinr_common: Vec<f64>,
    pub sinr_private: Vec<f64>,
    pub rate_common: Vec<f64>,
    pub rate_private: Vec<f64>,
    pub common_cap: f64,
    pub allocation: Vec<f64>,
    pub sum_rate: f64,
}

impl RateReport {
    /// Report with the common-rate split `allocation` applied.
    pub fn with_allocation(mut self, allocation: Vec<f64>) -> Self {
        assert_eq!(
            allocation.len(),
            self.rate_private.len(),
            "allocation length"
        );
        self.sum_rate = allocation.iter().sum::<f64>() + self.rate_private.iter().sum::<f64>();
        self.allocation = allocation;
        self
    }

    pub fn private_sum(&self) -> f64 {
        self.rate_private.iter().sum()
    }
}

/// Rates from received powers. `common_power[k] = |h_kᴴp_c|²`,
/// `private_power[k][i] = |h_kᴴp_i|²`.
pub fn rates_from_powers(
    common_power: &[f64],
    private_power: &[Vec<f64>],
    noise: f64,
    bandwidth: f64,
) -> Result<RateReport> {
    rates_with_noise(
        common_power,
        private_power,
        &vec![noise; common_power.len()],
        bandwidth,
    )
}

/// As [`rates_from_powers`] with a separate noise-plus-interference floor
/// per terminal.
pub fn rates_with_noise(
    common_power: &[f64],
    private_power: &[Vec<f64>],
    noise: &[f64],
    bandwidth: f64,
) -> Result<RateReport> {
    let k = common_power.len();
    check_len(k, private_power.len())?;
    check_len(k, noise.len())?;
    if noise.iter().any(|&n| !(n > 0.0)) {
        return Err(invalid("noise power must be positive"));
    }
    let mut sinr_common = Vec::with_capacity(k);
    let mut sinr_private = Vec::with_capacity(k);
    for t in 0..k {
        check_len(k, private_power[t].len())?;
        let total: f64 = private_power[t].iter().sum();
        let own = private_power[t][t];
        sinr_common.push(common_power[t] / (total + noise[t]));
        sinr_private.push(own / ((total - own).max(0.0) + noise[t]));
    }
    let rate = |g: &f64| bandwidth * (1.0 + g).log2();
    let rate_common: Vec<f64> = sinr_common.iter().map(rate).collect();
    let rate_private: Vec<f64> = sinr_private.iter().map(rate).collect();
    let common_cap = rate_common.iter().copied().fold(f64::INFINITY, f64::min);
    let common_cap = if k == 0 { 0.0 } else { common_cap };
    let sum_rate = rate_private.iter().sum();
    Ok(RateReport {
        sinr_common,
        sinr_private,
        rate_common,
        rate_private,
        common_cap,
        allocation: vec![0.0; k],
        sum_rate,
    })
}

pub fn rates_report(
    channels: &[CVec],
    prec: &PrecodingSet,
    noise: f64,
    bandwidth: f64,
) -> Result<RateReport> {
    check_len(channels.len(), prec.privates.len())?;
    let gain = |h: &CVec, p: &CVec| h.dotc(p).norm_sqr();
    let common: Vec<f64> = channels.iter().map(|h| gain(h, &prec.common)).collect();
    let private: Vec<Vec<f64>> = channels
        .iter()
        .map(|h| prec.privates.iter().map(|p| gain(h, p)).collect())
        .collect();
    rates_from_powers(&common, &private, noise, bandwidth)
}

/// Rates of lifted covariances: `|h_kᴴp|²` becomes `tr(h_k h_kᴴ Q)`.
pub fn rates_from_covariances(
    grams: &[CMat],
    q_common: &CMat,
    q_privates: &[CMat],
    noise: f64,
    bandwidth: f64,
) -> Result<RateReport> {
    check_len(grams.len(), q_privates.len())?;
    let common: Vec<f64> = grams
        .iter()
        .map(|f| re_trace_product(f, q_common).max(0.0))
        .collect();
    let private: Vec<Vec<f64>> = grams
        .iter()
        .map(|f| {
            q_privates
                .iter()
                .map(|q| re_trace_product(f, q).max(0.0))
                .collect()
        })
        .collect();
    rates_from_powers(&common, &private, noise, bandwidth)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EchoReport {
    pub per_terminal: Vec<f64>,
    pub threshold: f64,
    pub pass: bool,
}

/// Private-stream echo power `Σ_i |g_kᴴp_i|²` for each terminal.
pub fn echo_interference(sense_channels: &[CVec], privates: &[CVec], threshold: f64) -> EchoReport {
    let per_terminal: Vec<f64> = sense_channels
        .iter()
        .map(|g| privates.iter().map(|p| g.dotc(p).norm_sqr()).sum())
        .collect();
    let pass = per_terminal.iter().all(|&v| v <= threshold);
    EchoReport {
        per_terminal,
        threshold,
        pass,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerReport {
    pub per_element: Vec<f64>,
    pub limit: f64,
    pub pass: bool,
}

impl PowerReport {
    pub fn peak(&self) -> f64 {
        self.per_element.iter().copied().fold(0.0, f64::max)
    }
}

/// Diagonal of `P Pᴴ` against the per-element limit.
pub fn per_element_power(prec: &PrecodingSet, limit: f64) -> PowerReport {
    let n = prec.elements();
    let mut per_element = vec![0.0; n];
    for p in prec.columns() {
        for (acc, x) in per_element.iter_mut().zip(p.iter()) {
            *acc += x.norm_sqr();
        }
    }
    let pass = per_element.iter().all(|&v| v <= limit * (1.0 + 1e-12));
    PowerReport {
        per_element,
        limit,
        pass,
    }
}

pub fn allocation_feasible(report: &RateReport, rate_threshold: f64) -> bool {
    allocation_feasible_within(report, rate_threshold, 0.0)
}

/// Feasibility check with a relative slack `tol` on the two rate inequalities.
pub fn allocation_feasible_within(report: &RateReport, rate_threshold: f64, tol: f64) -> bool {
    let total: f64 = report.allocation.iter().sum();
    let scale = report.common_cap.abs().max(rate_threshold.abs()).max(1.0);
    report.allocation.iter().all(|&c| c >= -tol * scale)
        && total <= report.common_cap + tol * scale
        && report.sum_rate >= rate_threshold - tol * scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::C64;

    fn cv(v: &[f64]) -> CVec {
        CVec::from_iterator(v.len(), v.iter().map(|&x| C64::new(x, 0.0)))
    }

    #[test]
    fn orthogonal_channels() {
        let h = vec![cv(&[1.0, 0.0, 0.0]), cv(&[0.0, 1.0, 0.0])];
        let prec = PrecodingSet::new(
            cv(&[0.0, 0.0, 1.0]),
            vec![cv(&[2.0, 0.0, 0.0]), cv(&[0.0, 3.0, 0.0])],
        );
        let r = rates_report(&h, &prec, 0.5, 1.0).unwrap();
        assert_eq!(r.sinr_private, vec![8.0, 18.0]);
        assert_eq!(r.sinr_common, vec![0.0, 0.0]);
    }

    #[test]
    fn single_terminal_half_sinr() {
        let h = vec![cv(&[1.0])];
        let prec = PrecodingSet::new(cv(&[1.0]), vec![cv(&[1.0])]);
        let w = 20e6;
        let r = rates_report(&h, &prec, 1.0, w).unwrap();
        assert!((r.sinr_common[0] - 0.5).abs() < 1e-15);
        assert!((r.sinr_private[0] - 1.0).abs() < 1e-15);
        assert!((r.common_cap - w * 1.5f64.log2()).abs() < 1e-6);
        assert!(rates_report(&h, &prec, 0.0, w).is_err());
    }

    #[test]
    fn allocation_examples() {
        let base = RateReport {
            sinr_common: vec![0.0; 3],
            sinr_private: vec![0.0; 3],
            rate_common: vec![3.0; 3],
            rate_private: vec![1.0; 3],
            common_cap: 3.0,
            allocation: vec![0.0; 3],
            sum_rate: 3.0,
        };
        assert!(allocation_feasible(
            &base.clone().with_allocation(vec![0.0; 3]),
            3.0
        ));
        assert!(allocation_feasible(
            &base.clone().with_allocation(vec![1.0, 0.0, 0.0]),
            4.0
        ));
        assert!(!allocation_feasible(
            &base.clone().with_allocation(vec![1.0, 1.0, 1.0 + 1e-9]),
            4.0
        ));
    }

    #[test]
    fn echo_matched_private() {
        let g = cv(&[1.0, 2.0, 2.0]);
        let p_total: f64 = 0.25;
        let p = g.scale(p_total.sqrt() / g.norm());
        let rep = echo_interference(std::slice::from_ref(&g), &[p], 1.0);
        assert!((rep.per_terminal[0] - p_total * g.norm_squared()).abs() < 1e-12);
        assert!(!rep.pass);
        let none = echo_interference(&[g], &[CVec::zeros(3)], 1e-30);
        assert!(none.pass && none.per_terminal[0] == 0.0);
    }

    #[test]
    fn element_power_boundary() {
        let pt: f64 = 1e-3;
        let col = CVec::from_fn(4, |i, _| C64::from_polar(pt.sqrt(), i as f64));
        let prec = PrecodingSet::new(col, vec![]);
        let rep = per_element_power(&prec, pt);
        assert!(rep.per_element.iter().all(|&v| (v - pt).abs() < 1e-18));
        assert!(rep.pass);
        let zero = per_element_power(&PrecodingSet::new(CVec::zeros(4), vec![CVec::zeros(4)]), pt);
        assert!(zero.pass && zero.peak() == 0.0);
    }
}
