//! Precomputed one-sided DFT basis for the differentiable STFT/iSTFT ops.
//!
//! The forward transforms are linear maps; their backward passes apply the
//! adjoint (transposed framing plus window multiply) rather than per-bin
//! derivative formulas.

use crate::dsp::{DspError, StftConfig};

/// Cos/sin basis rows per one-sided bin, plus the analysis window.
#[derive(Debug)]
pub struct StftBasis {
    pub cfg: StftConfig,
    window: Vec<f64>,
    /// `cos[k * win + n] = cos(2π k n / fft)`
    cos: Vec<f64>,
    /// `sin[k * win + n] = sin(2π k n / fft)`
    sin: Vec<f64>,
}

fn reflect_index(p: isize, len: usize) -> usize {
    let len = len as isize;
    let mut p = p;
    if p < 0 {
        p = -p;
    }
    if p >= len {
        p = 2 * len - 2 - p;
    }
    p as usize
}

impl StftBasis {
    pub fn new(cfg: StftConfig) -> Result<Self, DspError> {
        cfg.validate()?;
        let f_bins = cfg.n_bins();
        let win = cfg.win_length;
        let n = cfg.fft_size as f64;
        let mut cos = vec![0.0; f_bins * win];
        let mut sin = vec![0.0; f_bins * win];
        for k in 0..f_bins {
            for i in 0..win {
                let ang = std::f64::consts::TAU * k as f64 * i as f64 / n;
                cos[k * win + i] = ang.cos();
                sin[k * win + i] = ang.sin();
            }
        }
        Ok(StftBasis { window: cfg.window_values(), cfg, cos, sin })
    }

    pub fn n_bins(&self) -> usize {
        self.cfg.n_bins()
    }

    pub fn n_frames(&self, source_length: usize) -> usize {
        self.cfg.n_frames(source_length)
    }

    fn frame_start(&self, t: usize) -> isize {
        t as isize * self.cfg.hop as isize - self.cfg.pad() as isize
    }

    /// Forward STFT. Returns (real, imag), each `[f * t_frames + t]`.
    pub fn forward_stft(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>), DspError> {
        let win = self.cfg.win_length;
        let need = if self.cfg.center_padding { self.cfg.pad() + 1 } else { win };
        if x.len() < need.max(win) {
            return Err(DspError::TooShort { got: x.len(), need: need.max(win) });
        }
        let f_bins = self.n_bins();
        let t_frames = self.n_frames(x.len());
        let mut real = vec![0.0; f_bins * t_frames];
        let mut imag = vec![0.0; f_bins * t_frames];
        let mut frame = vec![0.0; win];
        for t in 0..t_frames {
            let start = self.frame_start(t);
            for (i, w) in self.window.iter().enumerate() {
                frame[i] = w * x[reflect_index(start + i as isize, x.len())];
            }
            for k in 0..f_bins {
                let crow = &self.cos[k * win..(k + 1) * win];
                let srow = &self.sin[k * win..(k + 1) * win];
                let mut re = 0.0;
                let mut im = 0.0;
                for i in 0..win {
                    re += frame[i] * crow[i];
                    im -= frame[i] * srow[i];
                }
                real[k * t_frames + t] = re;
                imag[k * t_frames + t] = im;
            }
        }
        Ok((real, imag))
    }

    /// Adjoint of `forward_stft` for an input of `source_length` samples.
    pub fn adjoint_stft(&self, g_real: &[f64], g_imag: &[f64], source_length: usize) -> Vec<f64> {
        let win = self.cfg.win_length;
        let f_bins = self.n_bins();
        let t_frames = self.n_frames(source_length);
        let mut gx = vec![0.0; source_length];
        let mut acc = vec![0.0; win];
        for t in 0..t_frames {
            acc.fill(0.0);
            for k in 0..f_bins {
                let gr = g_real[k * t_frames + t];
                let gi = g_imag[k * t_frames + t];
                if gr == 0.0 && gi == 0.0 {
                    continue;
                }
                let crow = &self.cos[k * win..(k + 1) * win];
                let srow = &self.sin[k * win..(k + 1) * win];
                for i in 0..win {
                    acc[i] += gr * crow[i] - gi * srow[i];
                }
            }
            let start = self.frame_start(t);
            for (i, w) in self.window.iter().enumerate() {
                gx[reflect_index(start + i as isize, source_length)] += w * acc[i];
            }
        }
        gx
    }

    /// Squared-window overlap-add denominator over padded sample positions.
    fn ola_denominator(&self, t_frames: usize) -> Vec<f64> {
        let win = self.cfg.win_length;
        let padded = (t_frames - 1) * self.cfg.hop + win;
        let mut den = vec![0.0; padded];
        for t in 0..t_frames {
            let start = t * self.cfg.hop;
            for (i, w) in self.window.iter().enumerate() {
                den[start + i] += w * w;
            }
        }
        den
    }

    /// Inverse STFT by weighted overlap-add, trimmed to `target_len`.
    pub fn forward_istft(
        &self,
        real: &[f64],
        imag: &[f64],
        t_frames: usize,
        target_len: usize,
    ) -> Result<Vec<f64>, DspError> {
        let win = self.cfg.win_length;
        let f_bins = self.n_bins();
        let inv_n = 1.0 / self.cfg.fft_size as f64;
        let pad = self.cfg.pad();
        let padded = (t_frames - 1) * self.cfg.hop + win;
        let den = self.ola_denominator(t_frames);
        let mut acc = vec![0.0; padded];
        let mut time = vec![0.0; win];
        for t in 0..t_frames {
            time.fill(0.0);
            for k in 0..f_bins {
                let coef = if k == 0 || k == f_bins - 1 { 1.0 } else { 2.0 };
                let re = coef * real[k * t_frames + t];
                let im = coef * imag[k * t_frames + t];
                let crow = &self.cos[k * win..(k + 1) * win];
                let srow = &self.sin[k * win..(k + 1) * win];
                for i in 0..win {
                    time[i] += re * crow[i] - im * srow[i];
                }
            }
            let start = t * self.cfg.hop;
            for (i, w) in self.window.iter().enumerate() {
                acc[start + i] += w * time[i] * inv_n;
            }
        }
        let mut out = vec![0.0; target_len];
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
        Ok(out)
    }

    /// Adjoint of `forward_istft`.
    pub fn adjoint_istft(
        &self,
        g_out: &[f64],
        t_frames: usize,
    ) -> (Vec<f64>, Vec<f64>) {
        let win = self.cfg.win_length;
        let f_bins = self.n_bins();
        let inv_n = 1.0 / self.cfg.fft_size as f64;
        let pad = self.cfg.pad();
        let padded = (t_frames - 1) * self.cfg.hop + win;
        let den = self.ola_denominator(t_frames);
        let mut g_acc = vec![0.0; padded];
        for (i, &g) in g_out.iter().enumerate() {
            let p = i + pad;
            if p < padded && den[p] >= 1e-10 {
                g_acc[p] = g / den[p];
            }
        }
        let mut g_real = vec![0.0; f_bins * t_frames];
        let mut g_imag = vec![0.0; f_bins * t_frames];
        let mut g_time = vec![0.0; win];
        for t in 0..t_frames {
            let start = t * self.cfg.hop;
            for (i, w) in self.window.iter().enumerate() {
                g_time[i] = w * g_acc[start + i] * inv_n;
            }
            for k in 0..f_bins {
                let coef = if k == 0 || k == f_bins - 1 { 1.0 } else { 2.0 };
                let crow = &self.cos[k * win..(k + 1) * win];
                let srow = &self.sin[k * win..(k + 1) * win];
                let mut gr = 0.0;
                let mut gi = 0.0;
                for i in 0..win {
                    gr += g_time[i] * crow[i];
                    gi -= g_time[i] * srow[i];
                }
                g_real[k * t_frames + t] = coef * gr;
                g_imag[k * t_frames + t] = coef * gi;
            }
        }
        (g_real, g_imag)
    }
}
