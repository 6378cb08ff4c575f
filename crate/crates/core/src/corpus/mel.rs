//! Log-mel analysis: centered (reflect-padded) Hann STFT, Slaney-normalized
//! mel filterbank, natural log with a floor clamp.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_io;

pub const N_MELS: usize = 80;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub hop_ms: f64,
    pub win_ms: f64,
    pub fmin: f64,
    /// Upper filterbank edge; Nyquist when absent.
    pub fmax: Option<f64>,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            n_mels: N_MELS,
            hop_ms: 12.5,
            win_ms: 50.0,
            fmin: 0.0,
            fmax: None,
            log_floor: 1e-5,
        }
    }
}

fn ms_to_samples(ms: f64, sample_rate: u32, what: &str) -> Result<usize> {
    let exact = ms * sample_rate as f64 / 1000.0;
    let rounded = exact.round();
    if (exact - rounded).abs() > 1e-9 || rounded < 1.0 {
        return Err(Error::Config(format!(
            "{what} of {ms} ms is {exact} samples at {sample_rate} Hz; must be a positive integer"
        )));
    }
    Ok(rounded as usize)
}

impl MelConfig {
    pub fn hop_samples(&self) -> Result<usize> {
        ms_to_samples(self.hop_ms, self.sample_rate, "hop")
    }

    pub fn win_samples(&self) -> Result<usize> {
        ms_to_samples(self.win_ms, self.sample_rate, "window")
    }

    pub fn n_fft(&self) -> Result<usize> {
        Ok(self.win_samples()?.next_power_of_two())
    }

    pub fn fmax(&self) -> f64 {
        self.fmax.unwrap_or(self.sample_rate as f64 / 2.0)
    }

    pub fn floor_value(&self) -> f64 {
        self.log_floor.ln()
    }

    /// Frames produced for `n` samples with centered framing.
    pub fn frame_count(&self, n: usize) -> Result<usize> {
        Ok(1 + n / self.hop_samples()?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    /// `n_frames × n_mels` log-mel energies.
    pub frames: Array2<f64>,
    pub hop_ms: f64,
    pub win_ms: f64,
    pub sample_rate: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelSidecar {
    pub n_frames: usize,
    pub n_mels: usize,
    pub hop_ms: f64,
    pub win_ms: f64,
    pub sample_rate: u32,
}

impl MelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn save(&self, payload: &Path) -> Result<()> {
        let sidecar = MelSidecar {
            n_frames: self.frames.nrows(),
            n_mels: self.frames.ncols(),
            hop_ms: self.hop_ms,
            win_ms: self.win_ms,
            sample_rate: self.sample_rate,
        };
        tensor_io::write_matrix_with(payload, &self.frames, &sidecar)
    }

    pub fn load(payload: &Path) -> Result<Self> {
        let (frames, s) = tensor_io::read_matrix_as::<MelSidecar>(payload, |s| (s.n_frames, s.n_mels))?;
        Ok(Self {
            frames,
            hop_ms: s.hop_ms,
            win_ms: s.win_ms,
            sample_rate: s.sample_rate,
        })
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = 6.4f64.ln() / 27.0;
    if hz >= min_log_hz {
        min_log_mel + (hz / min_log_hz).ln() / logstep
    } else {
        hz / f_sp
    }
}

fn mel_to_hz(mel: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = 6.4f64.ln() / 27.0;
    if mel >= min_log_mel {
        min_log_hz * (logstep * (mel - min_log_mel)).exp()
    } else {
        f_sp * mel
    }
}

/// Slaney-style triangular filters with area normalization, `n_mels × (n_fft/2 + 1)`.
pub fn mel_filterbank(sample_rate: u32, n_fft: usize, n_mels: usize, fmin: f64, fmax: f64) -> Array2<f64> {
    let n_bins = n_fft / 2 + 1;
    let bin_hz: Vec<f64> = (0..n_bins)
        .map(|k| k as f64 * sample_rate as f64 / n_fft as f64)
        .collect();
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = Array2::zeros((n_mels, n_bins));
    for m in 0..n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let norm = 2.0 / (right - left);
        for (k, &f) in bin_hz.iter().enumerate() {
            let rising = (f - left) / (center - left);
            let falling = (right - f) / (right - center);
            fb[[m, k]] = rising.min(falling).max(0.0) * norm;
        }
    }
    fb
}

/// Periodic Hann window of `win` samples, zero-padded and centered in `n_fft`.
fn padded_hann(win: usize, n_fft: usize) -> Vec<f64> {
    let mut w = vec![0.0; n_fft];
    let offset = (n_fft - win) / 2;
    for i in 0..win {
        w[offset + i] = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos();
    }
    w
}

fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Centered short-time Fourier transform and its overlap-add inverse.
#[derive(Clone)]
pub struct Stft {
    pub n_fft: usize,
    pub hop: usize,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(n_fft: usize, win: usize, hop: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n_fft,
            hop,
            window: padded_hann(win, n_fft),
            forward: planner.plan_fft_forward(n_fft),
            inverse: planner.plan_fft_inverse(n_fft),
        }
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// One-sided spectra, `n_frames × n_bins`, with `n_frames = 1 + N / hop`.
    pub fn forward(&self, signal: &[f64]) -> Vec<Vec<Complex64>> {
        let n = signal.len();
        let pad = (self.n_fft / 2) as isize;
        let n_frames = 1 + n / self.hop;
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        let mut out = Vec::with_capacity(n_frames);
        for f in 0..n_frames {
            let start = (f * self.hop) as isize - pad;
            for (j, slot) in buf.iter_mut().enumerate() {
                let x = signal[reflect_index(start + j as isize, n)];
                *slot = Complex64::new(x * self.window[j], 0.0);
            }
            self.forward.process(&mut buf);
            out.push(buf[..self.n_bins()].to_vec());
        }
        out
    }

    /// Windowed overlap-add inverse, normalized by the summed squared window
    /// and trimmed to `(n_frames - 1) · hop` samples.
    pub fn inverse(&self, spectra: &[Vec<Complex64>]) -> Vec<f64> {
        let n_frames = spectra.len();
        if n_frames == 0 {
            return Vec::new();
        }
        let pad = self.n_fft / 2;
        let total = self.n_fft + self.hop * (n_frames - 1);
        let mut acc = vec![0.0; total];
        let mut wsum = vec![0.0; total];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        let n_bins = self.n_bins();
        for (f, spec) in spectra.iter().enumerate() {
            buf[..n_bins].copy_from_slice(spec);
            for k in n_bins..self.n_fft {
                buf[k] = buf[self.n_fft - k].conj();
            }
            self.inverse.process(&mut buf);
            let start = f * self.hop;
            for j in 0..self.n_fft {
                let w = self.window[j];
                acc[start + j] += buf[j].re / self.n_fft as f64 * w;
                wsum[start + j] += w * w;
            }
        }
        let len = (n_frames - 1) * self.hop;
        (0..len)
            .map(|i| {
                let w = wsum[pad + i];
                if w > 1e-10 {
                    acc[pad + i] / w
                } else {
                    acc[pad + i]
                }
            })
            .collect()
    }
}

/// Reusable mel analyzer (filterbank and FFT plans computed once).
#[derive(Clone)]
pub struct MelExtractor {
    pub config: MelConfig,
    pub stft: Stft,
    pub filterbank: Array2<f64>,
}

impl MelExtractor {
    pub fn new(config: MelConfig) -> Result<Self> {
        let hop = config.hop_samples()?;
        let win = config.win_samples()?;
        let n_fft = config.n_fft()?;
        if config.n_mels == 0 {
            return Err(Error::Config("n_mels must be positive".into()));
        }
        if config.log_floor.is_nan() || config.log_floor <= 0.0 {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        let filterbank = mel_filterbank(config.sample_rate, n_fft, config.n_mels, config.fmin, config.fmax());
        Ok(Self {
            stft: Stft::new(n_fft, win, hop),
            filterbank,
            config,
        })
    }

    /// Mel energies (linear magnitude, before the log) of a signal.
    pub fn mel_magnitudes(&self, samples: &[f64]) -> Array2<f64> {
        let spectra = self.stft.forward(samples);
        let mags = Array2::from_shape_fn((spectra.len(), self.stft.n_bins()), |(f, k)| spectra[f][k].norm());
        mags.dot(&self.filterbank.t())
    }

    pub fn log_compress(&self, mel: &Array2<f64>) -> Array2<f64> {
        let floor = self.config.log_floor;
        mel.mapv(|v| v.max(floor).ln())
    }

    pub fn extract(&self, samples: &[f64], sample_rate: u32) -> Result<MelSpectrogram> {
        if samples.is_empty() {
            return Err(Error::Input("cannot extract mel from an empty waveform".into()));
        }
        if sample_rate != self.config.sample_rate {
            return Err(Error::Config(format!(
                "waveform is {sample_rate} Hz but the mel config expects {} Hz",
                self.config.sample_rate
            )));
        }
        Ok(MelSpectrogram {
            frames: self.log_compress(&self.mel_magnitudes(samples)),
            hop_ms: self.config.hop_ms,
            win_ms: self.config.win_ms,
            sample_rate,
        })
    }

    /// Sum of per-frame band energies, for diagnostics.
    pub fn energy(&self, mel: &Array2<f64>) -> Array1<f64> {
        mel.mapv(f64::exp).sum_axis(ndarray::Axis(1))
    }
}

pub fn extract_mel(samples: &[f64], sample_rate: u32, config: &MelConfig) -> Result<MelSpectrogram> {
    MelExtractor::new(config.clone())?.extract(samples, sample_rate)
}
