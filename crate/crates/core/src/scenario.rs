//! Scenario files, experiment pipelines and result CSVs.
//!
//! A scenario is a TOML document; every key is optional and falls back to
//! the default three-terminal setup. The grammar is documented in
//! `docs/scenario.md`.

use std::fmt;
use std::path::Path;

use nalgebra::{Matrix4, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ao::{
    ao_loop, joint_design_loop, state_of, AccessMode, AoConfig, AoOutcome, DesignProblem,
    JointConfig, Normalization, PowerConstraint, Service, SystemSettings, TerminalSpec,
};
use crate::array_channel::{
    folded_azimuth_deg, geometry_to_params, steering_vector, ArrayGeometry, TerminalKinematics,
};
use crate::conic::InteriorPoint;
use crate::detection::DetectionConfig;
use crate::error::Error;
use crate::estimation::{
    angle_grid, capon_spectrum, doppler_fft, nearest_index, synthesize_snapshots, tone_mixture,
    DiagonalLoading, DopplerOptions, Source,
};
use crate::fim::{crb_and_qos, DelayDopplerTerm, DopplerRowWeight, FimOptions, GaussianPulse};
use crate::linalg::{dbm_to_watts, outer, trace_re, CMat, CVec};
use crate::seeds::derive_seed;
use crate::tracking::{range_bound, simulate_track_varying, TrackModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArraySection {
    pub rows: usize,
    pub cols: usize,
    /// Element spacing in wavelengths.
    pub element_spacing: f64,
    pub carrier_frequency_hz: f64,
    pub bandwidth_hz: f64,
}

impl Default for ArraySection {
    fn default() -> Self {
        Self {
            rows: 4,
            cols: 4,
            element_spacing: 0.5,
            carrier_frequency_hz: 30e9,
            bandwidth_hz: 20e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkSection {
    pub power_per_element_w: f64,
    pub noise_dbm: f64,
    pub rate_threshold_bps: f64,
    pub echo_threshold_dbm: f64,
    pub access: AccessMode,
    pub power_constraint: PowerConstraint,
}

impl Default for LinkSection {
    fn default() -> Self {
        Self {
            power_per_element_w: 1e-3,
            noise_dbm: -90.0,
            rate_threshold_bps: 1e6,
            echo_threshold_dbm: -60.0,
            access: AccessMode::Rsma,
            power_constraint: PowerConstraint::PerElement,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadarSection {
    pub processing_noise_dbm: f64,
    pub rcs_m2: f64,
    pub cpi_len: usize,
    pub doppler_row: DopplerRowWeight,
    pub delay_doppler: DelayDopplerTerm,
}

impl Default for RadarSection {
    fn default() -> Self {
        Self {
            processing_noise_dbm: -125.0,
            rcs_m2: 1.0,
            cpi_len: 1024,
            doppler_row: DopplerRowWeight::default(),
            delay_doppler: DelayDopplerTerm::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingSection {
    pub sample_time_s: f64,
    pub process_intensity: f64,
    pub rounds: usize,
    pub monte_carlo: usize,
}

impl Default for TrackingSection {
    fn default() -> Self {
        Self {
            sample_time_s: 0.02,
            process_intensity: 1.0,
            rounds: 100,
            monte_carlo: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub rate_thresholds_bps: Vec<f64>,
    pub false_alarms: Vec<f64>,
    /// Square layouts `side × side` for the convergence, detection and
    /// beampattern sweeps.
    pub sides: Vec<usize>,
    pub angle_step_deg: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            rate_thresholds_bps: vec![0.5e6, 1e6, 2e6, 4e6, 6e6, 8e6, 10e6],
            false_alarms: vec![1e-4, 1e-3, 1e-2, 1e-1],
            sides: vec![3, 4, 5],
            angle_step_deg: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationSection {
    pub snapshots: usize,
    /// Per-element source-to-noise ratio of the synthetic echoes.
    pub snr_db: f64,
    pub sample_rate_hz: f64,
    pub doppler_samples: usize,
    pub zero_pad: usize,
}

impl Default for EstimationSection {
    fn default() -> Self {
        Self {
            snapshots: 1024,
            snr_db: 30.0,
            sample_rate_hz: 10e3,
            doppler_samples: 1024,
            zero_pad: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalEntry {
    pub position: [f64; 3],
    #[serde(default)]
    pub velocity: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub service: Option<Service>,
}

pub fn default_terminals() -> Vec<TerminalEntry> {
    vec![
        TerminalEntry {
            position: [50.0, 55.0, 50.0],
            velocity: [5.0, 5.0, 0.0],
            service: Some(Service::Detect),
        },
        TerminalEntry {
            position: [-70.0, -50.0, 25.0],
            velocity: [0.0, 10.0, 0.0],
            service: Some(Service::Localize),
        },
        TerminalEntry {
            position: [50.0, 100.0, 50.0],
            velocity: [-10.0, 0.0, 0.0],
            service: Some(Service::Track),
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    /// Require exactly one terminal per service.
    pub replication: bool,
    pub array: ArraySection,
    pub link: LinkSection,
    pub radar: RadarSection,
    pub tracking: TrackingSection,
    pub sweep: SweepSection,
    pub estimation: EstimationSection,
    /// `ao.seed` is replaced by a value derived from `seed` when running.
    pub ao: AoConfig,
    pub terminals: Vec<TerminalEntry>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            seed: 1,
            replication: true,
            array: ArraySection::default(),
            link: LinkSection::default(),
            radar: RadarSection::default(),
            tracking: TrackingSection::default(),
            sweep: SweepSection::default(),
            estimation: EstimationSection::default(),
            ao: AoConfig::default(),
            terminals: default_terminals(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScenarioError {
    Config {
        line: Option<usize>,
        message: String,
    },
    Io(String),
    Compute(Error),
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScenarioError::Config {
                line: Some(l),
                message,
            } => write!(f, "line {l}: {message}"),
            ScenarioError::Config {
                line: None,
                message,
            } => write!(f, "{message}"),
            ScenarioError::Io(m) => write!(f, "i/o: {m}"),
            ScenarioError::Compute(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ScenarioError {}

impl From<Error> for ScenarioError {
    fn from(e: Error) -> Self {
        ScenarioError::Compute(e)
    }
}

impl ScenarioError {
    /// Process exit status: 2 configuration, 3 solver or infeasibility, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            ScenarioError::Config { .. } | ScenarioError::Compute(Error::InvalidInput(_)) => 2,
            ScenarioError::Compute(_) => 3,
            ScenarioError::Io(_) => 4,
        }
    }
}

fn config(line: Option<usize>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Config {
        line,
        message: message.into(),
    }
}

fn line_of_offset(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())]
        .bytes()
        .filter(|&b| b == b'\n')
        .count()
        + 1
}

/// Line of `key` inside `[section]` (or the `index`-th `[[section]]`), or of
/// the section header when the key is absent.
fn locate(src: &str, section: Option<(&str, Option<usize>)>, key: &str) -> Option<usize> {
    let mut inside = section.is_none();
    let mut header_line = None;
    let mut seen = 0usize;
    for (i, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('[') {
            inside = false;
            if let Some((name, index)) = section {
                let name_of = line.trim_start_matches('[').trim_end_matches(']').trim();
                if name_of == name {
                    match index {
                        Some(k) => {
                            inside = seen == k;
                            seen += 1;
                        }
                        None => inside = true,
                    }
                    if inside {
                        header_line = Some(i + 1);
                    }
                }
            }
            continue;
        }
        if inside {
            if let Some((lhs, _)) = line.split_once('=') {
                if lhs.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    header_line
}

struct Violation {
    section: Option<(&'static str, Option<usize>)>,
    key: &'static str,
    message: String,
}

impl Violation {
    fn describe(&self) -> String {
        match (self.section, self.key) {
            (Some((s, _)), "") => format!("{s}: {}", self.message),
            (Some((s, Some(i))), k) => format!("{s}[{i}].{k}: {}", self.message),
            (Some((s, None)), k) => format!("{s}.{k}: {}", self.message),
            (None, k) => format!("{k}: {}", self.message),
        }
    }
}

fn check(
    ok: bool,
    section: Option<(&'static str, Option<usize>)>,
    key: &'static str,
    message: impl FnOnce() -> String,
) -> Result<(), Violation> {
    if ok {
        Ok(())
    } else {
        Err(Violation {
            section,
            key,
            message: message(),
        })
    }
}

fn positive(v: f64) -> bool {
    v.is_finite() && v > 0.0
}

impl Scenario {
    pub fn from_toml(src: &str) -> Result<Self, ScenarioError> {
        let sc: Scenario = toml::from_str(src).map_err(|e| {
            config(
                e.span().map(|s| line_of_offset(src, s.start)),
                e.message().to_string(),
            )
        })?;
        sc.check()
            .map_err(|v| config(locate(src, v.section, v.key), v.describe()))?;
        Ok(sc)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let src = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&src)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.check().map_err(|v| config(None, v.describe()))
    }

    fn check(&self) -> Result<(), Violation> {
        let arr = Some(("array", None));
        let a = &self.array;
        check(a.rows > 0, arr, "rows", || "must be at least 1".into())?;
        check(a.cols > 0, arr, "cols", || "must be at least 1".into())?;
        check(positive(a.element_spacing), arr, "element_spacing", || {
            format!("must be positive, got {}", a.element_spacing)
        })?;
        check(
            positive(a.carrier_frequency_hz),
            arr,
            "carrier_frequency_hz",
            || "must be positive".into(),
        )?;
        check(positive(a.bandwidth_hz), arr, "bandwidth_hz", || {
            "must be positive".into()
        })?;

        let link = Some(("link", None));
        let l = &self.link;
        check(
            positive(l.power_per_element_w),
            link,
            "power_per_element_w",
            || format!("must be positive, got {}", l.power_per_element_w),
        )?;
        check(l.noise_dbm.is_finite(), link, "noise_dbm", || {
            "must be finite".into()
        })?;
        check(
            l.echo_threshold_dbm.is_finite(),
            link,
            "echo_threshold_dbm",
            || "must be finite".into(),
        )?;
        check(
            l.rate_threshold_bps.is_finite() && l.rate_threshold_bps >= 0.0,
            link,
            "rate_threshold_bps",
            || format!("must be nonnegative, got {}", l.rate_threshold_bps),
        )?;

        let radar = Some(("radar", None));
        let r = &self.radar;
        check(
            r.processing_noise_dbm.is_finite(),
            radar,
            "processing_noise_dbm",
            || "must be finite".into(),
        )?;
        check(positive(r.rcs_m2), radar, "rcs_m2", || {
            "must be positive".into()
        })?;
        check(r.cpi_len > 0, radar, "cpi_len", || {
            "must be at least 1".into()
        })?;

        let tr = Some(("tracking", None));
        let t = &self.tracking;
        check(positive(t.sample_time_s), tr, "sample_time_s", || {
            "must be positive".into()
        })?;
        check(
            t.process_intensity.is_finite() && t.process_intensity >= 0.0,
            tr,
            "process_intensity",
            || "must be nonnegative".into(),
        )?;
        check(t.rounds > 0, tr, "rounds", || "must be at least 1".into())?;
        check(t.monte_carlo > 0, tr, "monte_carlo", || {
            "must be at least 1".into()
        })?;

        let sw = Some(("sweep", None));
        let s = &self.sweep;
        check(
            !s.rate_thresholds_bps.is_empty()
                && s.rate_thresholds_bps
                    .iter()
                    .all(|v| v.is_finite() && *v >= 0.0),
            sw,
            "rate_thresholds_bps",
            || "needs nonnegative entries".into(),
        )?;
        check(
            !s.false_alarms.is_empty() && s.false_alarms.iter().all(|v| *v > 0.0 && *v < 1.0),
            sw,
            "false_alarms",
            || "entries must lie in (0, 1)".into(),
        )?;
        check(
            !s.sides.is_empty() && s.sides.iter().all(|v| *v > 0),
            sw,
            "sides",
            || "needs positive entries".into(),
        )?;
        check(
            positive(s.angle_step_deg) && s.angle_step_deg <= 90.0,
            sw,
            "angle_step_deg",
            || "must lie in (0, 90]".into(),
        )?;

        let es = Some(("estimation", None));
        let e = &self.estimation;
        check(e.snapshots > 0, es, "snapshots", || {
            "must be at least 1".into()
        })?;
        check(e.snr_db.is_finite(), es, "snr_db", || {
            "must be finite".into()
        })?;
        check(positive(e.sample_rate_hz), es, "sample_rate_hz", || {
            "must be positive".into()
        })?;
        check(e.doppler_samples > 0, es, "doppler_samples", || {
            "must be at least 1".into()
        })?;
        check(e.zero_pad > 0, es, "zero_pad", || {
            "must be at least 1".into()
        })?;

        self.ao.validate().map_err(|err| Violation {
            section: Some(("ao", None)),
            key: "",
            message: err.to_string(),
        })?;

        check(!self.terminals.is_empty(), None, "terminals", || {
            "at least one terminal is required".into()
        })?;
        for (i, t) in self.terminals.iter().enumerate() {
            let sec = Some(("terminals", Some(i)));
            check(
                t.position.iter().chain(&t.velocity).all(|v| v.is_finite()),
                sec,
                "position",
                || "coordinates must be finite".into(),
            )?;
            let rho = (t.position[0].powi(2) + t.position[1].powi(2)).sqrt();
            check(rho > 0.0, sec, "position", || {
                "terminal must be off the array axis".into()
            })?;
        }
        if self.replication {
            for service in [Service::Detect, Service::Localize, Service::Track] {
                let count = self
                    .terminals
                    .iter()
                    .filter(|t| t.service == Some(service))
                    .count();
                check(count == 1, None, "replication", || {
                    format!("needs exactly one {service:?} terminal, found {count}").to_lowercase()
                })?;
            }
        }
        Ok(())
    }

    pub fn geometry(&self) -> ArrayGeometry {
        ArrayGeometry {
            n_rows: self.array.rows,
            n_cols: self.array.cols,
            element_spacing: self.array.element_spacing,
            carrier_frequency: self.array.carrier_frequency_hz,
            bandwidth: self.array.bandwidth_hz,
            symbol_time: 1.0 / self.array.bandwidth_hz,
        }
    }

    pub fn settings(&self) -> SystemSettings {
        let w = self.array.bandwidth_hz;
        let pulse = GaussianPulse {
            sigma_f: 2.0 * std::f64::consts::PI * w / 4.0,
            duration: 1.0 / w,
        };
        SystemSettings {
            power_per_element: self.link.power_per_element_w,
            noise: dbm_to_watts(self.link.noise_dbm),
            rate_threshold: self.link.rate_threshold_bps,
            echo_threshold: dbm_to_watts(self.link.echo_threshold_dbm),
            processing_noise: dbm_to_watts(self.radar.processing_noise_dbm),
            rcs: self.radar.rcs_m2,
            cpi_len: self.radar.cpi_len,
            pulse_energy: pulse.energy(),
            mean_square_bandwidth: pulse.mean_square_bandwidth(),
            fim_options: FimOptions {
                doppler_row: self.radar.doppler_row,
                delay_doppler: self.radar.delay_doppler,
            },
            mode: self.link.access,
            power_constraint: self.link.power_constraint,
        }
    }

    pub fn terminal_specs(&self) -> Vec<TerminalSpec> {
        self.terminals
            .iter()
            .map(|t| TerminalSpec {
                kinematics: TerminalKinematics::new(t.position, t.velocity),
                service: t.service,
            })
            .collect()
    }

    pub fn ao_config(&self) -> AoConfig {
        AoConfig {
            seed: derive_seed(self.seed, 0xA0),
            ..self.ao
        }
    }

    pub fn joint_config(&self) -> JointConfig {
        JointConfig {
            rounds: self.tracking.rounds,
            sample_time: self.tracking.sample_time_s,
            process_intensity: self.tracking.process_intensity,
            measurement_noise: true,
            seed: derive_seed(self.seed, 0x7A),
        }
    }

    /// Same scenario with an `n × n` layout.
    pub fn with_side(&self, side: usize) -> Self {
        let mut s = self.clone();
        s.array.rows = side;
        s.array.cols = side;
        s
    }

    /// SHA-256 of the canonical serialization.
    pub fn digest(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// result rows

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub round: u64,
    pub metric: String,
    pub value: f64,
    pub units: String,
    pub seed: u64,
}

pub const CSV_HEADER: [&str; 6] = ["experiment", "round", "metric", "value", "units", "seed"];

/// Stable sort by `(experiment, round, metric)`.
pub fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| {
        (a.experiment.as_str(), a.round, a.metric.as_str()).cmp(&(
            b.experiment.as_str(),
            b.round,
            b.metric.as_str(),
        ))
    });
}

pub fn write_results_to<W: std::io::Write>(
    rows: &[ResultRow],
    out: W,
) -> Result<(), ScenarioError> {
    let io = |e: csv::Error| ScenarioError::Io(e.to_string());
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(CSV_HEADER).map_err(io)?;
    for r in rows {
        w.write_record([
            r.experiment.as_str(),
            &r.round.to_string(),
            &r.metric,
            &format!("{:e}", r.value),
            &r.units,
            &r.seed.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| ScenarioError::Io(e.to_string()))
}

pub fn write_results(rows: &[ResultRow], path: &Path) -> Result<(), ScenarioError> {
    let file = std::fs::File::create(path)
        .map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))?;
    write_results_to(rows, std::io::BufWriter::new(file))
}

pub fn read_results_from<R: std::io::Read>(input: R) -> Result<Vec<ResultRow>, ScenarioError> {
    let mut rd = csv::ReaderBuilder::new().from_reader(input);
    let header = rd.headers().map_err(|e| ScenarioError::Io(e.to_string()))?;
    if header.iter().ne(CSV_HEADER) {
        return Err(ScenarioError::Io(format!("unexpected header {header:?}")));
    }
    rd.deserialize()
        .map(|r| r.map_err(|e: csv::Error| ScenarioError::Io(e.to_string())))
        .collect()
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>, ScenarioError> {
    let file = std::fs::File::open(path)
        .map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))?;
    read_results_from(std::io::BufReader::new(file))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: String,
    pub seed: u64,
    pub config_sha256: String,
    pub results_sha256: String,
    pub rows: usize,
    pub version: String,
}

// experiments

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Experiment {
    Convergence,
    Detection,
    CrbSweep,
    Tracking,
    Beampattern,
    Estimation,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Experiment::Convergence,
        Experiment::Detection,
        Experiment::CrbSweep,
        Experiment::Tracking,
        Experiment::Beampattern,
        Experiment::Estimation,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Convergence => "convergence",
            Experiment::Detection => "detection",
            Experiment::CrbSweep => "crb_sweep",
            Experiment::Tracking => "tracking",
            Experiment::Beampattern => "beampattern",
            Experiment::Estimation => "estimation",
        }
    }
}

impl std::str::FromStr for Experiment {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Experiment::ALL
            .iter()
            .copied()
            .find(|e| e.name() == s)
            .ok_or_else(|| format!("unknown experiment {s}"))
    }
}

struct Rows {
    experiment: &'static str,
    seed: u64,
    rows: Vec<ResultRow>,
}

impl Rows {
    fn new(experiment: &'static str, seed: u64) -> Self {
        Self {
            experiment,
            seed,
            rows: Vec::new(),
        }
    }

    fn push(&mut self, round: usize, metric: impl Into<String>, value: f64, units: &str) {
        self.rows.push(ResultRow {
            experiment: self.experiment.into(),
            round: round as u64,
            metric: metric.into(),
            value,
            units: units.into(),
            seed: self.seed,
        });
    }

    fn failure(&mut self, round: usize, tag: &str, err: &Error) {
        self.rows.push(ResultRow {
            experiment: self.experiment.into(),
            round: round as u64,
            metric: format!("error/{tag}"),
            value: f64::NAN,
            units: err.to_string(),
            seed: self.seed,
        });
    }
}

fn design(sc: &Scenario) -> crate::Result<(DesignProblem, AoOutcome)> {
    let problem =
        DesignProblem::from_terminals(&sc.geometry(), &sc.terminal_specs(), &sc.settings(), &[])?;
    let out = ao_loop(&problem, &sc.ao_config(), &mut InteriorPoint::default())?;
    Ok((problem, out))
}

fn lifted(out: &AoOutcome) -> (CMat, Vec<CMat>) {
    let p = &out.precoders;
    (
        outer(&p.common, &p.common),
        p.privates.iter().map(|v| outer(v, v)).collect(),
    )
}

/// Sensing covariance of the transmitted (rank-one) design.
pub fn transmitted_sensing(problem: &DesignProblem, out: &AoOutcome) -> CMat {
    let (c, p) = lifted(out);
    problem.sensing_covariance(&c, &p)
}

pub fn run_experiment(exp: Experiment, sc: &Scenario) -> Result<Vec<ResultRow>, ScenarioError> {
    sc.validate()?;
    let mut rows = match exp {
        Experiment::Convergence => convergence(sc),
        Experiment::Detection => detection(sc),
        Experiment::CrbSweep => crb_sweep(sc),
        Experiment::Tracking => tracking(sc)?,
        Experiment::Beampattern => beampattern_sweep(sc),
        Experiment::Estimation => estimation(sc)?,
    };
    sort_rows(&mut rows);
    Ok(rows)
}

/// Run, then write `<name>.csv` and `<name>.manifest.json` into `out_dir`.
pub fn run_and_write(
    exp: Experiment,
    sc: &Scenario,
    out_dir: &Path,
) -> Result<Manifest, ScenarioError> {
    let rows = run_experiment(exp, sc)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| ScenarioError::Io(format!("{}: {e}", out_dir.display())))?;
    let mut buf = Vec::new();
    write_results_to(&rows, &mut buf)?;
    let csv_path = out_dir.join(format!("{}.csv", exp.name()));
    std::fs::write(&csv_path, &buf)
        .map_err(|e| ScenarioError::Io(format!("{}: {e}", csv_path.display())))?;
    let manifest = Manifest {
        experiment: exp.name().into(),
        seed: sc.seed,
        config_sha256: sc.digest(),
        results_sha256: hex(&Sha256::digest(&buf)),
        rows: rows.len(),
        version: env!("CARGO_PKG_VERSION").into(),
    };
    let man_path = out_dir.join(format!("{}.manifest.json", exp.name()));
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    std::fs::write(&man_path, text)
        .map_err(|e| ScenarioError::Io(format!("{}: {e}", man_path.display())))?;
    Ok(manifest)
}

fn convergence(sc: &Scenario) -> Vec<ResultRow> {
    let per_side: Vec<Vec<ResultRow>> = sc
        .sweep
        .sides
        .par_iter()
        .map(|&side| {
            let mut out = Rows::new("convergence", sc.seed);
            let n = side * side;
            match design(&sc.with_side(side)) {
                Ok((_, o)) => {
                    let w = &sc.ao.weights;
                    for (it, (obj, parts)) in
                        o.trace.objective.iter().zip(&o.trace.parts).enumerate()
                    {
                        out.push(it, format!("objective/n={n}"), *obj, "1");
                        out.push(
                            it,
                            format!("objective_raw/n={n}"),
                            parts.weighted(w, &Normalization::UNIT),
                            "1",
                        );
                        out.push(it, format!("detection/n={n}"), parts.detection, "1");
                        out.push(it, format!("localization/n={n}"), parts.localization, "1");
                        out.push(it, format!("tracking/n={n}"), parts.tracking, "1");
                        out.push(it, format!("residual/n={n}"), o.trace.residuals[it], "1");
                        let gap = o.trace.rank_gaps[it].iter().copied().fold(0.0, f64::max);
                        out.push(it, format!("rank_gap/n={n}"), gap, "1");
                    }
                    let last = o.trace.iterations();
                    out.push(
                        last,
                        format!("converged/n={n}"),
                        f64::from(u8::from(o.trace.converged)),
                        "1",
                    );
                    out.push(
                        last,
                        format!("feasible/n={n}"),
                        f64::from(u8::from(o.feasible)),
                        "1",
                    );
                    out.push(
                        last,
                        format!("relaxed_objective/n={n}"),
                        o.relaxed_objective,
                        "1",
                    );
                    out.push(
                        last,
                        format!("extracted_objective/n={n}"),
                        o.extracted_objective,
                        "1",
                    );
                    let final_gap = o
                        .privates
                        .iter()
                        .map(|q| {
                            crate::linalg::rank_one_gap(q) / trace_re(q).max(f64::MIN_POSITIVE)
                        })
                        .fold(0.0, f64::max);
                    out.push(last, format!("final_rank_gap/n={n}"), final_gap, "1");
                }
                Err(e) => out.failure(0, &format!("n={n}"), &e),
            }
            out.rows
        })
        .collect();
    per_side.into_iter().flatten().collect()
}

fn detection_probabilities(
    problem: &DesignProblem,
    out: &AoOutcome,
    pfa: f64,
) -> crate::Result<Vec<(usize, f64, f64)>> {
    let sensing = transmitted_sensing(problem, out);
    let power = trace_re(&sensing);
    problem
        .targets
        .iter()
        .filter(|t| t.service == Service::Detect)
        .map(|t| {
            let cfg = DetectionConfig::new(problem.settings.processing_noise, pfa, t.gain, power)?;
            Ok((t.terminal, cfg.detection_qos, cfg.detection_probability()))
        })
        .collect()
}

fn detection(sc: &Scenario) -> Vec<ResultRow> {
    let points: Vec<(usize, usize, f64)> = sc
        .sweep
        .sides
        .iter()
        .flat_map(|&side| {
            sc.sweep
                .rate_thresholds_bps
                .iter()
                .enumerate()
                .map(move |(i, &r)| (side, i, r))
        })
        .collect();
    let chunks: Vec<Vec<ResultRow>> = points
        .par_iter()
        .map(|&(side, i, rth)| {
            let mut out = Rows::new("detection", sc.seed);
            let n = side * side;
            let mut s = sc.with_side(side);
            s.link.rate_threshold_bps = rth;
            out.push(i, format!("rate_threshold/n={n}"), rth, "bps");
            match design(&s) {
                Ok((problem, o)) => {
                    out.push(i, format!("sum_rate/n={n}"), o.rates.sum_rate, "bps");
                    out.push(
                        i,
                        format!("feasible/n={n}"),
                        f64::from(u8::from(o.feasible)),
                        "1",
                    );
                    for &pfa in &sc.sweep.false_alarms {
                        match detection_probabilities(&problem, &o, pfa) {
                            Ok(list) => {
                                for (term, qos, pd) in list {
                                    out.push(
                                        i,
                                        format!("pd/n={n}/pfa={pfa:e}/terminal={term}"),
                                        pd,
                                        "1",
                                    );
                                    if pfa == sc.sweep.false_alarms[0] {
                                        out.push(
                                            i,
                                            format!("detection_qos/n={n}/terminal={term}"),
                                            qos,
                                            "1",
                                        );
                                    }
                                }
                            }
                            Err(e) => out.failure(i, &format!("n={n}/pfa={pfa:e}"), &e),
                        }
                    }
                }
                Err(e) => out.failure(i, &format!("n={n}"), &e),
            }
            out.rows
        })
        .collect();
    chunks.into_iter().flatten().collect()
}

pub const CRB_NAMES: [(&str, &str); 4] = [
    ("crb_delay", "s^2"),
    ("crb_doppler", "Hz^2"),
    ("crb_azimuth", "rad^2"),
    ("crb_pitch", "rad^2"),
];

/// CRB diagonal of each localization target, `+∞` where the FIM is singular.
pub fn localization_crbs(problem: &DesignProblem, sensing: &CMat) -> Vec<(usize, [f64; 4])> {
    problem
        .targets
        .iter()
        .filter(|t| t.service == Service::Localize)
        .map(|t| {
            let rep = crb_and_qos(&t.fim(sensing));
            let diag = if rep.singular {
                [f64::INFINITY; 4]
            } else {
                [0, 1, 2, 3].map(|i| rep.crb[(i, i)])
            };
            (t.terminal, diag)
        })
        .collect()
}

fn crb_sweep(sc: &Scenario) -> Vec<ResultRow> {
    let points: Vec<(AccessMode, usize, f64)> = [AccessMode::Rsma, AccessMode::Sdma]
        .iter()
        .flat_map(|&m| {
            sc.sweep
                .rate_thresholds_bps
                .iter()
                .enumerate()
                .map(move |(i, &r)| (m, i, r))
        })
        .collect();
    let chunks: Vec<Vec<ResultRow>> = points
        .par_iter()
        .map(|&(mode, i, rth)| {
            let mut out = Rows::new("crb_sweep", sc.seed);
            let tag = match mode {
                AccessMode::Rsma => "rsma",
                AccessMode::Sdma => "sdma",
            };
            let mut s = sc.clone();
            s.link.access = mode;
            s.link.rate_threshold_bps = rth;
            out.push(i, format!("rate_threshold/{tag}"), rth, "bps");
            match design(&s) {
                Ok((problem, o)) => {
                    out.push(
                        i,
                        format!("feasible/{tag}"),
                        f64::from(u8::from(o.feasible)),
                        "1",
                    );
                    out.push(i, format!("sum_rate/{tag}"), o.rates.sum_rate, "bps");
                    let relaxed = problem.sensing_covariance(&o.common, &o.privates);
                    for (label, cov) in [
                        ("", transmitted_sensing(&problem, &o)),
                        ("_relaxed", relaxed),
                    ] {
                        for (term, diag) in localization_crbs(&problem, &cov) {
                            for ((name, units), v) in CRB_NAMES.iter().zip(diag) {
                                out.push(
                                    i,
                                    format!("{name}{label}/{tag}/terminal={term}"),
                                    v,
                                    units,
                                );
                            }
                        }
                    }
                }
                Err(e) => out.failure(i, tag, &e),
            }
            out.rows
        })
        .collect();
    chunks.into_iter().flatten().collect()
}

fn tracking(sc: &Scenario) -> Result<Vec<ResultRow>, ScenarioError> {
    let mut out = Rows::new("tracking", sc.seed);
    let specs = sc.terminal_specs();
    let Some(tracked) = specs.iter().position(|t| t.service == Some(Service::Track)) else {
        return Err(config(
            None,
            "tracking needs a terminal with service = \"track\"",
        ));
    };
    let joint = sc.joint_config();
    let rounds = match joint_design_loop(
        &sc.geometry(),
        &specs,
        &sc.settings(),
        &sc.ao_config(),
        &joint,
        &mut InteriorPoint::default(),
    ) {
        Ok(r) => r,
        Err(e) => {
            out.failure(0, "design", &e);
            return Ok(out.rows);
        }
    };
    let psi: Vec<Matrix4<f64>> = rounds
        .iter()
        .map(|r| {
            let t = r
                .tracks
                .iter()
                .find(|t| t.terminal == tracked)
                .expect("tracked terminal reported");
            Matrix4::from_diagonal(&t.measurement_variances.into())
        })
        .collect();
    for r in &rounds {
        out.push(r.round, "design_objective", r.objective, "1");
        out.push(r.round, "design_iterations", r.iterations as f64, "1");
        let t = r
            .tracks
            .iter()
            .find(|t| t.terminal == tracked)
            .expect("tracked terminal reported");
        for (name, units, v) in [
            ("measurement_var_range", "m^2", t.measurement_variances[0]),
            (
                "measurement_var_radial_velocity",
                "m^2/s^2",
                t.measurement_variances[1],
            ),
            (
                "measurement_var_azimuth",
                "rad^2",
                t.measurement_variances[2],
            ),
            ("measurement_var_pitch", "rad^2", t.measurement_variances[3]),
        ] {
            out.push(r.round, name, v, units);
        }
        out.push(
            r.round,
            "design_position_error",
            (t.posterior - t.truth).fixed_rows::<3>(0).norm(),
            "m",
        );
    }

    let model = TrackModel::new(joint.sample_time, joint.process_intensity, psi[0])?;
    let start = state_of(&specs[tracked].kinematics);
    let runs: Vec<crate::Result<crate::tracking::TrackRun>> = (0..sc.tracking.monte_carlo)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(sc.seed, 0x10_000 + k as u64));
            simulate_track_varying(&mut rng, &model, &start, &psi)
        })
        .collect();
    let mut ok = Vec::with_capacity(runs.len());
    for (k, r) in runs.into_iter().enumerate() {
        match r {
            Ok(run) => ok.push(run),
            Err(e) => out.failure(0, &format!("run={k}"), &e),
        }
    }
    if ok.is_empty() {
        return Ok(out.rows);
    }
    let m = ok.len() as f64;
    for step in 0..psi.len() {
        let mut range_se = 0.0;
        let mut pos_se = 0.0;
        let mut range_pcrb = 0.0;
        let mut pos_pcrb = 0.0;
        for run in &ok {
            let (x, e) = (&run.truth[step], &run.estimates[step]);
            let (px, pe): (Vector3<f64>, Vector3<f64>) =
                (x.fixed_rows::<3>(0).into(), e.fixed_rows::<3>(0).into());
            range_se += (pe.norm() - px.norm()).powi(2);
            pos_se += (pe - px).norm_squared();
            range_pcrb += range_bound(&run.bound_information[step], x)?;
            let cov = run.bound_information[step]
                .try_inverse()
                .ok_or(Error::Singular("posterior information"))?;
            pos_pcrb += cov[(0, 0)] + cov[(1, 1)] + cov[(2, 2)];
        }
        let round = step + 1;
        out.push(round, "range_mse", range_se / m, "m^2");
        out.push(round, "range_pcrb", range_pcrb / m, "m^2");
        out.push(round, "position_mse", pos_se / m, "m^2");
        out.push(round, "position_pcrb", pos_pcrb / m, "m^2");
    }
    Ok(out.rows)
}

/// `|a(θ, φ)ᴴ p|²` on the grid, row-major in azimuth.
pub fn beampattern(
    p: &CVec,
    geom: &ArrayGeometry,
    azimuths: &[f64],
    pitches: &[f64],
) -> crate::estimation::AngleMap {
    let values = azimuths
        .par_iter()
        .flat_map_iter(|&az| {
            pitches
                .iter()
                .map(move |&pi| steering_vector(geom, az, pi).dotc(p).norm_sqr())
        })
        .collect();
    crate::estimation::AngleMap {
        azimuths: azimuths.to_vec(),
        pitches: pitches.to_vec(),
        values,
    }
}

/// Width in grid units between the half-power points around the local
/// maximum reached by climbing from `start`. `None` if a side runs off the grid.
pub fn half_power_width(cut: &[f64], start: usize) -> Option<f64> {
    let mut k = start.min(cut.len().checked_sub(1)?);
    loop {
        let left = k.checked_sub(1).filter(|&j| cut[j] > cut[k]);
        let right = (k + 1 < cut.len())
            .then_some(k + 1)
            .filter(|&j| cut[j] > cut[k]);
        match (left, right) {
            (Some(l), Some(r)) => k = if cut[l] >= cut[r] { l } else { r },
            (Some(l), None) => k = l,
            (None, Some(r)) => k = r,
            (None, None) => break,
        }
    }
    let half = cut[k] / 2.0;
    if !(half > 0.0) {
        return None;
    }
    let cross = |from: usize, step: isize| -> Option<f64> {
        let mut j = from as isize;
        loop {
            let next = j + step;
            if next < 0 || next >= cut.len() as isize {
                return None;
            }
            let (a, b) = (cut[j as usize], cut[next as usize]);
            if b < half {
                return Some(j as f64 + step as f64 * (a - half) / (a - b));
            }
            j = next;
        }
    };
    Some(cross(k, 1)? - cross(k, -1)?)
}

fn beampattern_sweep(sc: &Scenario) -> Vec<ResultRow> {
    let step = sc.sweep.angle_step_deg;
    let grid = angle_grid(0.0, 90.0, step).expect("validated step");
    let specs = sc.terminal_specs();
    let chunks: Vec<Vec<ResultRow>> = sc
        .sweep
        .sides
        .par_iter()
        .map(|&side| {
            let mut out = Rows::new("beampattern", sc.seed);
            let n = side * side;
            let s = sc.with_side(side);
            let geom = s.geometry();
            match design(&s) {
                Ok((problem, o)) => {
                    let map = beampattern(&o.precoders.common, &geom, &grid, &grid);
                    for k in 0..specs.len() {
                        let p = &problem.params[k];
                        let (az, pi) = (folded_azimuth_deg(p.azimuth), p.pitch.to_degrees());
                        let (ia, ip) = (
                            nearest_index(&grid, az.to_radians()),
                            nearest_index(&grid, pi.to_radians()),
                        );
                        let az_cut = map.azimuth_cut(ip);
                        let pi_cut = map.pitch_cut(ia);
                        for (j, v) in az_cut.iter().enumerate() {
                            out.push(j, format!("azimuth_cut/n={n}/terminal={k}"), *v, "W");
                        }
                        for (j, v) in pi_cut.iter().enumerate() {
                            out.push(j, format!("pitch_cut/n={n}/terminal={k}"), *v, "W");
                        }
                        let argmax = |c: &[f64]| {
                            c.iter()
                                .enumerate()
                                .fold(
                                    (0, f64::NEG_INFINITY),
                                    |a, (j, &v)| if v > a.1 { (j, v) } else { a },
                                )
                                .0
                        };
                        out.push(
                            0,
                            format!("azimuth_peak_deg/n={n}/terminal={k}"),
                            grid[argmax(&az_cut)].to_degrees(),
                            "deg",
                        );
                        out.push(
                            0,
                            format!("pitch_peak_deg/n={n}/terminal={k}"),
                            grid[argmax(&pi_cut)].to_degrees(),
                            "deg",
                        );
                        out.push(
                            0,
                            format!("terminal_azimuth_deg/n={n}/terminal={k}"),
                            az,
                            "deg",
                        );
                        out.push(
                            0,
                            format!("terminal_pitch_deg/n={n}/terminal={k}"),
                            pi,
                            "deg",
                        );
                        let width = half_power_width(&az_cut, ia).map_or(f64::NAN, |w| w * step);
                        out.push(
                            0,
                            format!("azimuth_beamwidth_deg/n={n}/terminal={k}"),
                            width,
                            "deg",
                        );
                    }
                }
                Err(e) => out.failure(0, &format!("n={n}"), &e),
            }
            out.rows
        })
        .collect();
    chunks.into_iter().flatten().collect()
}

fn estimation(sc: &Scenario) -> Result<Vec<ResultRow>, ScenarioError> {
    let mut out = Rows::new("estimation", sc.seed);
    let geom = sc.geometry();
    let step = sc.sweep.angle_step_deg;
    let grid = angle_grid(0.0, 90.0, step)?;
    let mut sources = Vec::new();
    let mut dopplers = Vec::new();
    for (k, t) in sc.terminal_specs().iter().enumerate() {
        let p = geometry_to_params(&t.kinematics, &geom, sc.radar.rcs_m2)?;
        let az = folded_azimuth_deg(p.azimuth).to_radians();
        sources.push(Source {
            azimuth: az,
            pitch: p.pitch,
            power: 1.0,
        });
        dopplers.push(p.round_trip_doppler);
        out.push(k, "true_azimuth_deg", az.to_degrees(), "deg");
        out.push(k, "true_pitch_deg", p.pitch.to_degrees(), "deg");
        out.push(k, "true_doppler_hz", p.round_trip_doppler, "Hz");
    }
    let e = &sc.estimation;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(sc.seed, 0xCA));
    let noise = 10f64.powf(-e.snr_db / 10.0);
    let snaps = synthesize_snapshots(&mut rng, &geom, &sources, noise, e.snapshots)?;
    let map = capon_spectrum(&snaps, &geom, &grid, &grid, DiagonalLoading::default())?;
    for (j, p) in map.peaks(sources.len()).iter().enumerate() {
        out.push(j, "capon_peak_azimuth_deg", p.azimuth.to_degrees(), "deg");
        out.push(j, "capon_peak_pitch_deg", p.pitch.to_degrees(), "deg");
        out.push(j, "capon_peak_value", p.value, "1");
    }
    let samples = tone_mixture(
        &dopplers,
        &vec![1.0; dopplers.len()],
        e.sample_rate_hz,
        e.doppler_samples,
    );
    let spec = doppler_fft(
        &samples,
        e.sample_rate_hz,
        DopplerOptions {
            zero_pad: e.zero_pad,
            ..DopplerOptions::default()
        },
    )?;
    let mut peaks = spec.peaks(dopplers.len());
    peaks.sort_by(|a, b| a.frequency.total_cmp(&b.frequency));
    for (j, p) in peaks.iter().enumerate() {
        out.push(j, "doppler_peak_hz", p.frequency, "Hz");
        out.push(j, "doppler_peak_magnitude", p.magnitude, "1");
    }
    out.push(0, "doppler_bin_hz", spec.bin_width, "Hz");
    out.push(0, "doppler_resolution_hz", spec.resolution, "Hz");
    Ok(out.rows)
}
