//! Band-limited differential-entropy features from raw multichannel windows.
//!
//! Each channel is split into non-overlapping one-second segments. Every
//! segment is mean-removed, Hann-windowed and transformed; the one-sided
//! power spectra are averaged over segments and scaled so that summing all
//! bins gives the signal variance. A band's variance is the sum over bins
//! whose centre frequency lies in `[lo_hz, hi_hz)`, and its feature is the
//! Gaussian differential entropy `0.5 * ln(2 pi e var)`.

use std::f64::consts::{E, PI};
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest variance passed to the logarithm when flooring is enabled.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// One multichannel time segment, `channels x samples`.
#[derive(Debug, Clone)]
pub struct RawWindow {
    samples: Array2<f64>,
    fs: f64,
}

impl RawWindow {
    pub fn new(samples: Array2<f64>, fs: f64) -> Result<Self> {
        if !(fs > 0.0 && fs.is_finite()) {
            return Err(Error::OutOfRange {
                key: "fs".into(),
                message: format!("sampling rate must be finite and > 0, got {fs}"),
            });
        }
        if samples.nrows() == 0 {
            return Err(Error::Empty("window has no channels".into()));
        }
        if (samples.ncols() as f64) < fs {
            return Err(Error::InsufficientData(format!(
                "window of {} samples is shorter than one second at {fs} Hz",
                samples.ncols()
            )));
        }
        if !samples.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("raw window".into()));
        }
        Ok(Self { samples, fs })
    }

    pub fn n_channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.samples.ncols()
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.samples
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    pub name: String,
    pub lo_hz: f64,
    pub hi_hz: f64,
}

impl BandSpec {
    pub fn new(name: impl Into<String>, lo_hz: f64, hi_hz: f64) -> Self {
        Self {
            name: name.into(),
            lo_hz,
            hi_hz,
        }
    }

    pub fn validate(&self, fs: f64) -> Result<()> {
        let nyquist = fs / 2.0;
        if !(self.lo_hz > 0.0 && self.lo_hz < self.hi_hz && self.hi_hz <= nyquist) {
            return Err(Error::InvalidBand {
                name: self.name.clone(),
                lo_hz: self.lo_hz,
                hi_hz: self.hi_hz,
                nyquist,
            });
        }
        Ok(())
    }
}

/// Delta, theta, alpha, beta and gamma bands.
pub fn default_bands() -> Vec<BandSpec> {
    vec![
        BandSpec::new("delta", 1.0, 4.0),
        BandSpec::new("theta", 4.0, 8.0),
        BandSpec::new("alpha", 8.0, 14.0),
        BandSpec::new("beta", 14.0, 31.0),
        BandSpec::new("gamma", 31.0, 50.0),
    ]
}

fn validate_bands(bands: &[BandSpec], fs: f64) -> Result<()> {
    if bands.is_empty() {
        return Err(Error::Empty("no frequency bands".into()));
    }
    for b in bands {
        b.validate(fs)?;
    }
    for pair in bands.windows(2) {
        if pair[1].lo_hz < pair[0].hi_hz {
            return Err(Error::InvalidBand {
                name: pair[1].name.clone(),
                lo_hz: pair[1].lo_hz,
                hi_hz: pair[1].hi_hz,
                nyquist: fs / 2.0,
            });
        }
    }
    Ok(())
}

/// Averaged one-sided power spectrum of one channel, variance-normalised.
struct Spectrum {
    power: Vec<f64>,
    bin_hz: f64,
}

impl Spectrum {
    fn band_sum(&self, band: &BandSpec) -> f64 {
        self.power
            .iter()
            .enumerate()
            .filter(|(k, _)| {
                let f = *k as f64 * self.bin_hz;
                f >= band.lo_hz && f < band.hi_hz
            })
            .map(|(_, p)| p)
            .sum()
    }
}

struct Stft {
    len: usize,
    window: Vec<f64>,
    window_energy: f64,
    fft: Arc<dyn Fft<f64>>,
}

impl Stft {
    fn for_rate(fs: f64) -> Self {
        let len = fs.round().max(1.0) as usize;
        // periodic Hann
        let window: Vec<f64> = (0..len)
            .map(|n| 0.5 * (1.0 - (2.0 * PI * n as f64 / len as f64).cos()))
            .collect();
        let window_energy = window.iter().map(|w| w * w).sum();
        let fft = FftPlanner::new().plan_fft_forward(len);
        Self {
            len,
            window,
            window_energy,
            fft,
        }
    }

    fn spectrum(
        &self,
        signal: impl Iterator<Item = f64> + Clone,
        n_samples: usize,
        fs: f64,
    ) -> Result<Spectrum> {
        let segments = n_samples / self.len;
        if segments == 0 || self.len < 2 {
            return Err(Error::InsufficientData(format!(
                "{n_samples} samples do not fill one {}-sample STFT segment",
                self.len
            )));
        }
        let half = self.len / 2;
        let mut power = vec![0.0; half + 1];
        let mut buf = vec![Complex::new(0.0, 0.0); self.len];
        let samples: Vec<f64> = signal.take(segments * self.len).collect();
        for seg in samples.chunks_exact(self.len) {
            let mean = seg.iter().sum::<f64>() / self.len as f64;
            for ((dst, &x), &w) in buf.iter_mut().zip(seg).zip(&self.window) {
                *dst = Complex::new((x - mean) * w, 0.0);
            }
            self.fft.process(&mut buf);
            for (k, p) in power.iter_mut().enumerate() {
                let one_sided = if k == 0 || (self.len.is_multiple_of(2) && k == half) {
                    1.0
                } else {
                    2.0
                };
                *p += one_sided * buf[k].norm_sqr();
            }
        }
        let norm = 1.0 / (segments as f64 * self.len as f64 * self.window_energy);
        power.iter_mut().for_each(|p| *p *= norm);
        Ok(Spectrum {
            power,
            bin_hz: fs / self.len as f64,
        })
    }
}

fn channel_spectrum(stft: &Stft, window: &RawWindow, channel: usize) -> Result<Spectrum> {
    if channel >= window.n_channels() {
        return Err(Error::OutOfRange {
            key: "channel".into(),
            message: format!("{channel} >= {} channels", window.n_channels()),
        });
    }
    let row = window.samples.row(channel);
    stft.spectrum(row.iter().copied(), window.n_samples(), window.fs)
}

/// Variance of one channel restricted to one band.
pub fn band_variance(window: &RawWindow, band: &BandSpec, channel: usize) -> Result<f64> {
    band.validate(window.fs)?;
    let stft = Stft::for_rate(window.fs);
    Ok(channel_spectrum(&stft, window, channel)?.band_sum(band))
}

/// Gaussian differential entropy `0.5 * ln(2 pi e variance)` in nats.
pub fn differential_entropy(variance: f64) -> Result<f64> {
    if !(variance > 0.0) || !variance.is_finite() {
        return Err(Error::Domain(format!(
            "differential entropy needs a finite positive variance, got {variance}"
        )));
    }
    Ok(0.5 * (2.0 * PI * E * variance).ln())
}

/// Channel-major feature vector: all bands of channel 0, then channel 1, ...
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub n_channels: usize,
    pub n_bands: usize,
    /// `(channel, band)` entries whose variance was raised to the floor.
    pub floored: Vec<(usize, usize)>,
}

impl FeatureVector {
    pub fn get(&self, channel: usize, band: usize) -> f64 {
        self.values[channel * self.n_bands + band]
    }
}

#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub bands: Vec<BandSpec>,
    /// With `None`, a silent band is a domain error instead of being floored.
    pub variance_floor: Option<f64>,
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self {
            bands: default_bands(),
            variance_floor: Some(VARIANCE_FLOOR),
        }
    }
}

impl FeatureExtractor {
    pub fn new(bands: Vec<BandSpec>) -> Self {
        Self {
            bands,
            ..Default::default()
        }
    }

    pub fn extract(&self, window: &RawWindow) -> Result<FeatureVector> {
        validate_bands(&self.bands, window.fs)?;
        let stft = Stft::for_rate(window.fs);
        let n_bands = self.bands.len();
        let mut values = Vec::with_capacity(window.n_channels() * n_bands);
        let mut floored = Vec::new();
        for ch in 0..window.n_channels() {
            let spec = channel_spectrum(&stft, window, ch)?;
            for (bi, band) in self.bands.iter().enumerate() {
                let mut var = spec.band_sum(band);
                if let Some(floor) = self.variance_floor {
                    if var < floor {
                        var = floor;
                        floored.push((ch, bi));
                    }
                }
                let de = differential_entropy(var).map_err(|e| {
                    Error::Domain(format!("channel {ch}, band `{}`: {e}", band.name))
                })?;
                values.push(de);
            }
        }
        Ok(FeatureVector {
            values,
            n_channels: window.n_channels(),
            n_bands,
            floored,
        })
    }
}

/// Feature vector with the default variance floor.
pub fn build_feature_vector(window: &RawWindow, bands: &[BandSpec]) -> Result<FeatureVector> {
    FeatureExtractor::new(bands.to_vec()).extract(window)
}

/// A full recording as read from disk.
#[derive(Debug, Clone)]
pub struct Recording {
    pub samples: Array2<f64>,
    pub fs: f64,
}

impl Recording {
    /// Non-overlapping windows of `seconds` each; a trailing partial window is dropped.
    pub fn windows(&self, seconds: f64) -> Result<Vec<RawWindow>> {
        let len = (seconds * self.fs).round() as usize;
        if len == 0 || seconds <= 0.0 {
            return Err(Error::OutOfRange {
                key: "window_secs".into(),
                message: format!("must be > 0, got {seconds}"),
            });
        }
        let count = self.samples.ncols() / len;
        if count == 0 {
            return Err(Error::InsufficientData(format!(
                "recording of {} samples is shorter than one {len}-sample window",
                self.samples.ncols()
            )));
        }
        (0..count)
            .map(|w| {
                let part = self
                    .samples
                    .slice(ndarray::s![.., w * len..(w + 1) * len])
                    .to_owned();
                RawWindow::new(part, self.fs)
            })
            .collect()
    }
}

/// Reads a recording in CSV form: a first line `n_channels,fs,n_samples`
/// followed by one line of `n_samples` comma-separated amplitudes per channel.
pub fn read_recording(path: &Path) -> Result<Recording> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    let header = lines
        .next()
        .ok_or_else(|| Error::format(path, "missing header line"))?;
    let fields: Vec<&str> = header.split(',').map(str::trim).collect();
    if fields.len() != 3 {
        return Err(Error::format(
            path,
            "header must be `n_channels,fs,n_samples`",
        ));
    }
    let n_channels: usize = fields[0]
        .parse()
        .map_err(|_| Error::format(path, format!("bad n_channels `{}`", fields[0])))?;
    let fs: f64 = fields[1]
        .parse()
        .map_err(|_| Error::format(path, format!("bad fs `{}`", fields[1])))?;
    let n_samples: usize = fields[2]
        .parse()
        .map_err(|_| Error::format(path, format!("bad n_samples `{}`", fields[2])))?;
    let mut samples = Array2::zeros((n_channels, n_samples));
    for ch in 0..n_channels {
        let line = lines
            .next()
            .ok_or_else(|| Error::format(path, format!("missing row for channel {ch}")))?;
        let mut count = 0;
        for (j, tok) in line.split(',').enumerate() {
            if j >= n_samples {
                return Err(Error::format(
                    path,
                    format!("channel {ch} has more than {n_samples} samples"),
                ));
            }
            samples[[ch, j]] = tok
                .trim()
                .parse()
                .map_err(|_| Error::format(path, format!("channel {ch}: bad sample `{tok}`")))?;
            count += 1;
        }
        if count != n_samples {
            return Err(Error::format(
                path,
                format!("channel {ch} has {count} samples, header says {n_samples}"),
            ));
        }
    }
    if lines.next().is_some() {
        return Err(Error::format(
            path,
            format!("more than {n_channels} channel rows"),
        ));
    }
    if !(fs > 0.0) {
        return Err(Error::format(path, format!("fs must be > 0, got {fs}")));
    }
    Ok(Recording { samples, fs })
}
