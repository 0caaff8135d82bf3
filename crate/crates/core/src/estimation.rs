//! Angle and Doppler estimation from echo samples: a two-dimensional Capon
//! spectrum over azimuth × pitch and an FFT Doppler spectrum with
//! quadratic peak refinement.

use rand::Rng;
use rayon::prelude::*;
use rustfft::FftPlanner;
use std::f64::consts::PI;

use crate::array_channel::{steering_vector, ArrayGeometry};
use crate::error::{check_len, invalid, Error, Result};
use crate::linalg::{complex_normal, trace_re, CMat, CVec, C64};

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    pub snapshots: Vec<CVec>,
    pub covariance: CMat,
}

impl SnapshotSet {
    pub fn new(snapshots: Vec<CVec>) -> Result<Self> {
        let n = snapshots
            .first()
            .map(|s| s.len())
            .ok_or_else(|| invalid("no snapshots"))?;
        let mut covariance = CMat::zeros(n, n);
        for y in &snapshots {
            check_len(n, y.len())?;
            covariance.ger(C64::new(1.0, 0.0), y, &y.conjugate(), C64::new(1.0, 0.0));
        }
        covariance.unscale_mut(snapshots.len() as f64);
        Ok(Self {
            snapshots,
            covariance,
        })
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn elements(&self) -> usize {
        self.covariance.nrows()
    }
}

/// A plane-wave source for snapshot synthesis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Source {
    pub azimuth: f64,
    pub pitch: f64,
    pub power: f64,
}

/// `L` snapshots `y = Σ s_k a(θ_k, φ_k) + n` with independent `CN(0, power)`
/// source symbols and `CN(0, noise)` element noise.
pub fn synthesize_snapshots<R: Rng + ?Sized>(
    rng: &mut R,
    geom: &ArrayGeometry,
    sources: &[Source],
    noise: f64,
    len: usize,
) -> Result<SnapshotSet> {
    geom.validate()?;
    if len == 0 {
        return Err(invalid("snapshot count must be positive"));
    }
    let steer: Vec<CVec> = sources
        .iter()
        .map(|s| steering_vector(geom, s.azimuth, s.pitch))
        .collect();
    let n = geom.elements();
    let snapshots = (0..len)
        .map(|_| {
            let mut y = if noise > 0.0 {
                CVec::from_fn(n, |_, _| complex_normal(rng, noise))
            } else {
                CVec::zeros(n)
            };
            for (s, a) in sources.iter().zip(&steer) {
                y.axpy(complex_normal(rng, s.power), a, C64::new(1.0, 0.0));
            }
            y
        })
        .collect();
    SnapshotSet::new(snapshots)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DiagonalLoading {
    /// `factor · tr(R) / N`.
    Relative(f64),
    Absolute(f64),
}

impl Default for DiagonalLoading {
    fn default() -> Self {
        DiagonalLoading::Relative(1e-3)
    }
}

impl DiagonalLoading {
    pub fn amount(&self, covariance: &CMat) -> f64 {
        match *self {
            DiagonalLoading::Relative(f) => {
                f * trace_re(covariance) / covariance.nrows().max(1) as f64
            }
            DiagonalLoading::Absolute(v) => v,
        }
    }
}

/// Uniform angle grid in radians, endpoints included.
pub fn angle_grid(start_deg: f64, stop_deg: f64, step_deg: f64) -> Result<Vec<f64>> {
    if !(step_deg > 0.0) || !(stop_deg >= start_deg) {
        return Err(invalid(format!(
            "bad grid [{start_deg}, {stop_deg}] step {step_deg}"
        )));
    }
    let count = ((stop_deg - start_deg) / step_deg + 1e-9).floor() as usize + 1;
    Ok((0..count)
        .map(|i| (start_deg + i as f64 * step_deg).to_radians())
        .collect())
}

/// Values on an azimuth × pitch grid, row-major in azimuth.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleMap {
    pub azimuths: Vec<f64>,
    pub pitches: Vec<f64>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnglePeak {
    pub azimuth: f64,
    pub pitch: f64,
    pub value: f64,
}

impl AngleMap {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.pitches.len() + j]
    }

    pub fn argmax(&self) -> (usize, usize) {
        let best = self
            .values
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc },
            )
            .0;
        (best / self.pitches.len(), best % self.pitches.len())
    }

    /// Strict local maxima over the 8-neighbourhood, largest first.
    pub fn peaks(&self, count: usize) -> Vec<AnglePeak> {
        let (na, np) = (self.azimuths.len(), self.pitches.len());
        let mut out = Vec::new();
        for i in 0..na {
            for j in 0..np {
                let v = self.at(i, j);
                let mut is_peak = true;
                'nb: for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        if di == 0 && dj == 0 {
                            continue;
                        }
                        let (a, b) = (i as i64 + di, j as i64 + dj);
                        if a < 0 || b < 0 || a >= na as i64 || b >= np as i64 {
                            continue;
                        }
                        let w = self.at(a as usize, b as usize);
                        // ties broken toward the lower index so plateaus give one peak
                        if w > v || (w == v && (a, b) < (i as i64, j as i64)) {
                            is_peak = false;
                            break 'nb;
                        }
                    }
                }
                if is_peak {
                    out.push(AnglePeak {
                        azimuth: self.azimuths[i],
                        pitch: self.pitches[j],
                        value: v,
                    });
                }
            }
        }
        out.sort_by(|a, b| b.value.total_cmp(&a.value));
        out.truncate(count);
        out
    }

    /// Values along the azimuth axis at pitch index `j`.
    pub fn azimuth_cut(&self, j: usize) -> Vec<f64> {
        (0..self.azimuths.len()).map(|i| self.at(i, j)).collect()
    }

    /// Values along the pitch axis at azimuth index `i`.
    pub fn pitch_cut(&self, i: usize) -> Vec<f64> {
        (0..self.pitches.len()).map(|j| self.at(i, j)).collect()
    }
}

/// Index of the grid value closest to `x`.
pub fn nearest_index(grid: &[f64], x: f64) -> usize {
    grid.iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (k, &g)| {
            if (g - x).abs() < acc.1 {
                (k, (g - x).abs())
            } else {
                acc
            }
        })
        .0
}

/// Capon spectrum `1 / (aᴴ R⁻¹ a)` with `R` the loaded sample covariance.
pub fn capon_spectrum(
    snapshots: &SnapshotSet,
    geom: &ArrayGeometry,
    azimuths: &[f64],
    pitches: &[f64],
    loading: DiagonalLoading,
) -> Result<AngleMap> {
    geom.validate()?;
    check_len(geom.elements(), snapshots.elements())?;
    if azimuths.is_empty() || pitches.is_empty() {
        return Err(invalid("empty angle grid"));
    }
    let n = snapshots.elements();
    let delta = loading.amount(&snapshots.covariance);
    if !(delta >= 0.0) {
        return Err(invalid(format!(
            "diagonal loading must be nonnegative, got {delta}"
        )));
    }
    if delta == 0.0 && snapshots.len() < n {
        return Err(Error::Singular(
            "sample covariance with fewer snapshots than elements",
        ));
    }
    let mut r = snapshots.covariance.clone();
    for i in 0..n {
        r[(i, i)] += delta;
    }
    let chol = r.cholesky().ok_or(Error::Singular("sample covariance"))?;
    let values = azimuths
        .par_iter()
        .flat_map_iter(|&az| {
            let chol = &chol;
            pitches.iter().map(move |&pi| {
                let a = steering_vector(geom, az, pi);
                // aᴴR⁻¹a = ‖L⁻¹a‖²
                let w = chol
                    .l()
                    .solve_lower_triangular(&a)
                    .expect("cholesky factor is nonsingular");
                1.0 / w.norm_squared()
            })
        })
        .collect();
    Ok(AngleMap {
        azimuths: azimuths.to_vec(),
        pitches: pitches.to_vec(),
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Window {
    Rectangular,
    Hann,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DopplerOptions {
    /// FFT length as a multiple of the sample count.
    pub zero_pad: usize,
    pub window: Window,
}

impl Default for DopplerOptions {
    fn default() -> Self {
        Self {
            zero_pad: 4,
            window: Window::Hann,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralPeak {
    pub frequency: f64,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DopplerSpectrum {
    /// Bin frequencies in ascending order, `[−f_s/2, f_s/2)`.
    pub frequencies: Vec<f64>,
    pub magnitude: Vec<f64>,
    /// Spacing of the unpadded transform, `f_s / L`.
    pub resolution: f64,
    pub bin_width: f64,
}

impl DopplerSpectrum {
    /// Local maxima refined by a parabola through the peak and its
    /// neighbours, largest first.
    pub fn peaks(&self, count: usize) -> Vec<SpectralPeak> {
        let m = self.magnitude.len();
        let mut out = Vec::new();
        for k in 0..m {
            let prev = self.magnitude[(k + m - 1) % m];
            let next = self.magnitude[(k + 1) % m];
            let v = self.magnitude[k];
            if m >= 3 && !(v > prev && v >= next) {
                continue;
            }
            let denom = prev - 2.0 * v + next;
            let shift = if m >= 3 && denom < 0.0 {
                (0.5 * (prev - next) / denom).clamp(-0.5, 0.5)
            } else {
                0.0
            };
            out.push(SpectralPeak {
                frequency: self.frequencies[k] + shift * self.bin_width,
                magnitude: v - 0.25 * (prev - next) * shift,
            });
        }
        out.sort_by(|a, b| b.magnitude.total_cmp(&a.magnitude));
        out.truncate(count);
        out
    }
}

pub fn doppler_fft(
    samples: &[C64],
    sample_rate: f64,
    options: DopplerOptions,
) -> Result<DopplerSpectrum> {
    if samples.is_empty() {
        return Err(invalid("no samples"));
    }
    if !(sample_rate > 0.0) || options.zero_pad == 0 {
        return Err(invalid("sample rate and zero padding must be positive"));
    }
    let len = samples.len();
    let m = len * options.zero_pad;
    let mut buf = vec![C64::new(0.0, 0.0); m];
    for (k, (dst, &x)) in buf.iter_mut().zip(samples).enumerate() {
        let w = match options.window {
            Window::Rectangular => 1.0,
            Window::Hann => 0.5 - 0.5 * (2.0 * PI * (k as f64 + 0.5) / len as f64).cos(),
        };
        *dst = x * w;
    }
    FftPlanner::new().plan_fft_forward(m).process(&mut buf);
    let bin_width = sample_rate / m as f64;
    let half = m / 2;
    // shift so that frequencies ascend from −f_s/2
    let order: Vec<usize> = (half..m).chain(0..half).collect();
    let frequencies = order
        .iter()
        .map(|&k| (k as f64 - if k >= half { m as f64 } else { 0.0 }) * bin_width)
        .collect();
    let magnitude = order.iter().map(|&k| buf[k].norm()).collect();
    Ok(DopplerSpectrum {
        frequencies,
        magnitude,
        resolution: sample_rate / len as f64,
        bin_width,
    })
}

/// Sum of unit tones `exp(j2πf t)` sampled at `f_s`.
pub fn tone_mixture(
    frequencies: &[f64],
    amplitudes: &[f64],
    sample_rate: f64,
    len: usize,
) -> Vec<C64> {
    (0..len)
        .map(|l| {
            let t = l as f64 / sample_rate;
            frequencies
                .iter()
                .zip(amplitudes)
                .map(|(&f, &a)| C64::from_polar(a, 2.0 * PI * f * t))
                .sum()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn geom(n: usize) -> ArrayGeometry {
        ArrayGeometry::default().with_square(n)
    }

    #[test]
    fn noiseless_source_peaks_at_its_grid_point() {
        let g = geom(3);
        let az = angle_grid(0.0, 90.0, 1.0).unwrap();
        let pi = angle_grid(0.0, 90.0, 1.0).unwrap();
        let src = Source {
            azimuth: az[40],
            pitch: pi[25],
            power: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let snaps = synthesize_snapshots(&mut rng, &g, &[src], 0.0, 50).unwrap();
        let map = capon_spectrum(&snaps, &g, &az, &pi, DiagonalLoading::default()).unwrap();
        assert_eq!(map.argmax(), (40, 25));
    }

    #[test]
    fn singular_without_loading_is_an_error() {
        let g = geom(3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let snaps = synthesize_snapshots(&mut rng, &g, &[], 1.0, 4).unwrap();
        let grid = angle_grid(0.0, 10.0, 5.0).unwrap();
        assert!(matches!(
            capon_spectrum(&snaps, &g, &grid, &grid, DiagonalLoading::Absolute(0.0)),
            Err(Error::Singular(_))
        ));
        assert!(capon_spectrum(&snaps, &g, &grid, &grid, DiagonalLoading::default()).is_ok());
    }

    #[test]
    fn on_bin_tone_is_exact() {
        let fs = 1000.0;
        let len = 200;
        let f0 = 5.0 * fs / len as f64;
        for window in [Window::Rectangular, Window::Hann] {
            let spec = doppler_fft(
                &tone_mixture(&[f0], &[1.0], fs, len),
                fs,
                DopplerOptions {
                    zero_pad: 1,
                    window,
                },
            )
            .unwrap();
            let p = spec.peaks(1)[0];
            assert!(
                (p.frequency - f0).abs() < 1e-9 * spec.resolution,
                "{window:?} {}",
                p.frequency
            );
        }
    }

    #[test]
    fn off_bin_tone_within_a_tenth_bin() {
        let fs = 1000.0;
        let len = 256;
        let bin = fs / len as f64;
        for frac in [0.1, 0.25, 0.37, 0.5, 0.81] {
            let f0 = (17.0 + frac) * bin;
            let spec = doppler_fft(
                &tone_mixture(&[f0], &[1.0], fs, len),
                fs,
                DopplerOptions::default(),
            )
            .unwrap();
            let p = spec.peaks(1)[0];
            assert!(
                (p.frequency - f0).abs() <= bin / 10.0,
                "frac {frac}: {} vs {f0}",
                p.frequency
            );
        }
    }

    #[test]
    fn real_tone_peaks_are_mirrored() {
        let fs = 800.0;
        let samples: Vec<C64> = (0..300)
            .map(|l| C64::new((2.0 * PI * 123.4 * l as f64 / fs).cos(), 0.0))
            .collect();
        let spec = doppler_fft(&samples, fs, DopplerOptions::default()).unwrap();
        let p = spec.peaks(2);
        assert!((p[0].frequency + p[1].frequency).abs() < 1e-9);
        assert!((p[0].magnitude - p[1].magnitude).abs() < 1e-9 * p[0].magnitude);
    }
}
