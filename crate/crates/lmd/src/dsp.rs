//! STFT analysis/synthesis, spectrogram masking, SNR computation, and
//! calibrated white-noise injection.
//!
//! The forward transform uses reflect center padding and records the source
//! length so inversion returns exactly the original number of samples.
//! Inversion is weighted overlap-add with squared-window normalization, which
//! is an exact inverse for COLA-compatible window/hop pairs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Waveform, AMP_MAX, AMP_MIN};

#[derive(Debug, Error)]
pub enum DspError {
    #[error("input of {got} samples shorter than required {need}")]
    TooShort { got: usize, need: usize },
    #[error("waveform length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("reference waveform is all zero")]
    ZeroReference,
    #[error("overlap-add normalization denominator below 1e-10 at sample {0} (non-COLA config)")]
    NonCola(usize),
    #[error("mask shape {mask:?} incompatible with spectrogram {spec:?}")]
    ShapeMismatch { mask: (usize, usize, usize), spec: (usize, usize) },
    #[error("mask entry {0} outside [0, 1]")]
    MaskOutOfRange(f64),
    #[error("invalid stft config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WindowKind {
    Hann,
    Hamming,
}

/// Framing parameters: 25 ms window, 10 ms hop, FFT 512 at 16 kHz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub win_length: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub window: WindowKind,
    pub center_padding: bool,
}

impl StftConfig {
    /// Hamming flavor used for ASV features.
    pub fn asv() -> Self {
        StftConfig { win_length: 400, hop: 160, fft_size: 512, window: WindowKind::Hamming, center_padding: true }
    }

    /// Hann flavor used by the detector transform.
    pub fn detector() -> Self {
        StftConfig { win_length: 400, hop: 160, fft_size: 512, window: WindowKind::Hann, center_padding: true }
    }

    pub fn validate(&self) -> Result<(), DspError> {
        if !(self.hop <= self.win_length && self.win_length <= self.fft_size) {
            return Err(DspError::BadConfig(format!(
                "need hop <= win <= fft, got {}/{}/{}",
                self.hop, self.win_length, self.fft_size
            )));
        }
        Ok(())
    }

    /// One-sided bin count F = fft/2 + 1.
    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn pad(&self) -> usize {
        if self.center_padding {
            self.win_length / 2
        } else {
            0
        }
    }

    pub fn n_frames(&self, source_length: usize) -> usize {
        let padded = source_length + 2 * self.pad();
        1 + (padded - self.win_length) / self.hop
    }

    /// Periodic analysis window.
    pub fn window_values(&self) -> Vec<f64> {
        let n = self.win_length as f64;
        (0..self.win_length)
            .map(|i| {
                let c = (std::f64::consts::TAU * i as f64 / n).cos();
                match self.window {
                    WindowKind::Hann => 0.5 - 0.5 * c,
                    WindowKind::Hamming => 0.54 - 0.46 * c,
                }
            })
            .collect()
    }
}

/// F×T grid of complex STFT coefficients stored as separate planes.
/// Index layout is row-major over frequency: `real[f * t_len + t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub real: Vec<f64>,
    pub imag: Vec<f64>,
    pub n_bins: usize,
    pub n_frames: usize,
    pub config: StftConfig,
    pub source_length: usize,
}

impl ComplexSpectrogram {
    pub fn magnitude(&self) -> Vec<f64> {
        self.real
            .iter()
            .zip(&self.imag)
            .map(|(r, i)| (r * r + i * i).sqrt())
            .collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.real
            .iter()
            .zip(&self.imag)
            .map(|(r, i)| r * r + i * i)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskKind {
    Binary,
    Ratio,
}

/// F×T (single-plane) or F×T×2 (per real/imag plane) mask with entries in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMatrix {
    pub values: Vec<f64>,
    pub n_bins: usize,
    pub n_frames: usize,
    pub planes: usize,
    pub kind: MaskKind,
}

impl MaskMatrix {
    pub fn new(
        values: Vec<f64>,
        n_bins: usize,
        n_frames: usize,
        planes: usize,
        kind: MaskKind,
    ) -> Result<Self, DspError> {
        assert!(planes == 1 || planes == 2);
        assert_eq!(values.len(), n_bins * n_frames * planes);
        for &v in &values {
            if !(0.0..=1.0).contains(&v) {
                return Err(DspError::MaskOutOfRange(v));
            }
            if kind == MaskKind::Binary && v != 0.0 && v != 1.0 {
                return Err(DspError::MaskOutOfRange(v));
            }
        }
        Ok(MaskMatrix { values, n_bins, n_frames, planes, kind })
    }

    pub fn ones(n_bins: usize, n_frames: usize) -> Self {
        MaskMatrix {
            values: vec![1.0; n_bins * n_frames],
            n_bins,
            n_frames,
            planes: 1,
            kind: MaskKind::Binary,
        }
    }
}

/// Reflect-padded view of a waveform (no edge repetition).
fn reflect_index(p: isize, len: usize) -> usize {
    let len = len as isize;
    let mut p = p;
    // One bounce suffices for pad < len.
    if p < 0 {
        p = -p;
    }
    if p >= len {
        p = 2 * len - 2 - p;
    }
    p as usize
}

/// Forward STFT. Uses a modular twiddle table for the one-sided DFT.
pub fn stft(wave: &Waveform, cfg: &StftConfig) -> Result<ComplexSpectrogram, DspError> {
    cfg.validate()?;
    let len = wave.len();
    let need = if cfg.center_padding { cfg.pad() + 1 } else { cfg.win_length };
    if len < need.max(cfg.win_length) {
        return Err(DspError::TooShort { got: len, need: need.max(cfg.win_length) });
    }
    let n = cfg.fft_size;
    let f_bins = cfg.n_bins();
    let t_frames = cfg.n_frames(len);
    let pad = cfg.pad() as isize;
    let window = cfg.window_values();

    // tw[(k*n) mod N] tables.
    let tw_cos: Vec<f64> =
        (0..n).map(|i| (std::f64::consts::TAU * i as f64 / n as f64).cos()).collect();
    let tw_sin: Vec<f64> =
        (0..n).map(|i| (std::f64::consts::TAU * i as f64 / n as f64).sin()).collect();

    let mut real = vec![0.0; f_bins * t_frames];
    let mut imag = vec![0.0; f_bins * t_frames];
    let mut frame = vec![0.0; cfg.win_length];
    for t in 0..t_frames {
        let start = t as isize * cfg.hop as isize - pad;
        for (i, w) in window.iter().enumerate() {
            frame[i] = w * wave.samples[reflect_index(start + i as isize, len)];
        }
        for k in 0..f_bins {
            let mut re = 0.0;
            let mut im = 0.0;
            let mut idx = 0usize;
            for &x in &frame {
                re += x * tw_cos[idx];
                im -= x * tw_sin[idx];
                idx += k;
                if idx >= n {
                    idx -= n;
                }
            }
            real[k * t_frames + t] = re;
            imag[k * t_frames + t] = im;
        }
    }
    Ok(ComplexSpectrogram {
        real,
        imag,
        n_bins: f_bins,
        n_frames: t_frames,
        config: *cfg,
        source_length: len,
    })
}

/// Inverse STFT by weighted overlap-add with squared-window normalization,
/// trimmed to `target_length`.
pub fn istft(spec: &ComplexSpectrogram, target_length: usize) -> Result<Waveform, DspError> {
    let cfg = &spec.config;
    cfg.validate()?;
    let n = cfg.fft_size;
    let f_bins = spec.n_bins;
    let t_frames = spec.n_frames;
    let pad = cfg.pad();
    let window = cfg.window_values();

    let tw_cos: Vec<f64> =
        (0..n).map(|i| (std::f64::consts::TAU * i as f64 / n as f64).cos()).collect();
    let tw_sin: Vec<f64> =
        (0..n).map(|i| (std::f64::consts::TAU * i as f64 / n as f64).sin()).collect();

    let padded = (t_frames - 1) * cfg.hop + cfg.win_length;
    let mut acc = vec![0.0; padded];
    let mut den = vec![0.0; padded];
    let mut time = vec![0.0; cfg.win_length];
    let inv_n = 1.0 / n as f64;
    for t in 0..t_frames {
        // Real IDFT from the one-sided spectrum. Bins 0 and N/2 are their own
        // conjugates, interior bins count twice.
        for (i, v) in time.iter_mut().enumerate() {
            let mut s = spec.real[t]; // k = 0, cos = 1
            let mut idx = 0usize;
            for k in 1..f_bins - 1 {
                idx += i;
                if idx >= n {
                    idx -= n;
                }
                s += 2.0 * (spec.real[k * t_frames + t] * tw_cos[idx]
                    - spec.imag[k * t_frames + t] * tw_sin[idx]);
            }
            // Nyquist bin: cos(pi*i) alternates, sin is identically zero.
            let nyq = spec.real[(f_bins - 1) * t_frames + t];
            s += if i % 2 == 0 { nyq } else { -nyq };
            *v = s * inv_n;
        }
        let start = t * cfg.hop;
        for (i, w) in window.iter().enumerate() {
            acc[start + i] += w * time[i];
            den[start + i] += w * w;
        }
    }
    let mut out = vec![0.0; target_length];
    for (i, o) in out.iter_mut().enumerate() {
        let p = i + pad;
        if p >= padded {
            return Err(DspError::TooShort { got: padded, need: p + 1 });
        }
        if den[p] < 1e-10 {
            return Err(DspError::NonCola(i));
        }
        *o = acc[p] / den[p];
    }
    Ok(Waveform { samples: out, sample_rate: crate::corpus::SAMPLE_RATE })
}

/// Elementwise mask product. A single-plane mask applies identically to the
/// real and imaginary parts; a two-plane mask applies plane 0 to real and
/// plane 1 to imaginary.
pub fn apply_mask(
    spec: &ComplexSpectrogram,
    mask: &MaskMatrix,
) -> Result<ComplexSpectrogram, DspError> {
    if mask.n_bins != spec.n_bins || mask.n_frames != spec.n_frames {
        return Err(DspError::ShapeMismatch {
            mask: (mask.n_bins, mask.n_frames, mask.planes),
            spec: (spec.n_bins, spec.n_frames),
        });
    }
    let plane = spec.n_bins * spec.n_frames;
    let mut out = spec.clone();
    for i in 0..plane {
        let (mr, mi) = if mask.planes == 1 {
            (mask.values[i], mask.values[i])
        } else {
            (mask.values[i], mask.values[plane + i])
        };
        out.real[i] *= mr;
        out.imag[i] *= mi;
    }
    Ok(out)
}

/// SNR cap standing in for +∞ so budget sorting stays total-ordered.
pub const SNR_CAP_DB: f64 = 200.0;

/// 10·log10(signal power / perturbation power), capped at 200 dB.
pub fn snr_db(reference: &Waveform, perturbed: &Waveform) -> Result<f64, DspError> {
    if reference.len() != perturbed.len() {
        return Err(DspError::LengthMismatch(reference.len(), perturbed.len()));
    }
    let sig: f64 = reference.samples.iter().map(|s| s * s).sum();
    if sig == 0.0 {
        return Err(DspError::ZeroReference);
    }
    let noise: f64 = reference
        .samples
        .iter()
        .zip(&perturbed.samples)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    if noise == 0.0 {
        return Ok(SNR_CAP_DB);
    }
    Ok((10.0 * (sig / noise).log10()).min(SNR_CAP_DB))
}

/// Add seeded Gaussian white noise scaled so the measured SNR hits the target
/// within 0.1 dB (exactly, before amplitude clamping).
pub fn add_white_noise_at_snr(wave: &Waveform, target_snr_db: f64, seed: u64) -> Waveform {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..wave.len())
        .map(|_| {
            // Box-Muller.
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect();
    let sig: f64 = wave.samples.iter().map(|s| s * s).sum();
    let npow: f64 = noise.iter().map(|s| s * s).sum();
    let scale = if npow > 0.0 {
        (sig / (10f64.powf(target_snr_db / 10.0) * npow)).sqrt()
    } else {
        0.0
    };
    let mut out = wave.clone();
    for (o, n) in out.samples.iter_mut().zip(&noise) {
        *o = (*o + scale * n).clamp(AMP_MIN, AMP_MAX);
    }
    out
}
