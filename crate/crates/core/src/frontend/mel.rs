use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{Spectrogram, WavClip};
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrontendConfig {
    pub win_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub fmin: f64,
    /// `None` means the Nyquist frequency of the clip.
    pub fmax: Option<f64>,
    pub log_floor: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            win_ms: 25.0,
            hop_ms: 10.0,
            n_mels: 128,
            fmin: 0.0,
            fmax: None,
            log_floor: 1e-10,
        }
    }
}

/// Concrete sample-domain framing derived from a config and sample rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Framing {
    pub win: usize,
    pub hop: usize,
    pub n_fft: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl FrontendConfig {
    pub fn framing(&self, sample_rate: u32) -> Result<Framing> {
        let sr = sample_rate as f64;
        let fmax = self.fmax.unwrap_or(sr / 2.0);
        if !(0.0 <= self.fmin && self.fmin < fmax && fmax <= sr / 2.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 <= fmin < fmax <= sr/2, got fmin={} fmax={fmax} sr={sr}",
                self.fmin
            )));
        }
        if self.n_mels == 0 || !(self.log_floor > 0.0) {
            return Err(Error::InvalidArgument("n_mels must be >= 1 and log_floor > 0".into()));
        }
        let win = (sr * self.win_ms / 1000.0).round() as usize;
        let hop = (sr * self.hop_ms / 1000.0).round() as usize;
        if win == 0 || hop == 0 {
            return Err(Error::InvalidArgument("window and hop must span at least one sample".into()));
        }
        // Grow the FFT until every triangular filter spans more than one bin
        // spacing, so no mel row is empty.
        let points = mel_points(self.n_mels, self.fmin, fmax);
        let narrowest = points.windows(3).map(|w| w[2] - w[0]).fold(f64::INFINITY, f64::min);
        let mut n_fft = win.next_power_of_two();
        while sr / n_fft as f64 >= narrowest {
            n_fft *= 2;
            if n_fft > 1 << 20 {
                return Err(Error::InvalidArgument("mel filters too narrow for this sample rate".into()));
            }
        }
        Ok(Framing {
            win,
            hop,
            n_fft,
            fmin: self.fmin,
            fmax,
        })
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// `n_mels + 2` filter edge frequencies in Hz, evenly spaced on the mel scale.
fn mel_points(n_mels: usize, fmin: f64, fmax: f64) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Triangular filters over the `n_fft/2 + 1` FFT bins, one row per mel band.
pub fn mel_filterbank(sample_rate: u32, n_fft: usize, n_mels: usize, fmin: f64, fmax: f64) -> Vec<Vec<f64>> {
    let edges = mel_points(n_mels, fmin, fmax);
    let bins = n_fft / 2 + 1;
    let bin_hz = sample_rate as f64 / n_fft as f64;
    (0..n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    let up = (f - lo) / (mid - lo);
                    let down = (hi - f) / (hi - mid);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Index into `0..len` after reflecting about the ends (no edge repeat).
fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut k = i.rem_euclid(period);
    if k >= len as isize {
        k = period - k;
    }
    k as usize
}

/// Periodic Hamming window.
fn hamming(win: usize) -> Vec<f64> {
    (0..win)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / win as f64).cos())
        .collect()
}

/// Number of frames produced for `n_samples` under centred framing.
pub fn frame_count(n_samples: usize, hop: usize) -> usize {
    n_samples / hop + 1
}

/// Log-mel spectrogram `[n_mels x frames]` with reflect-padded centred
/// frames, a Hamming window, power spectrum and HTK mel filters.
pub fn log_mel(clip: &WavClip, cfg: &FrontendConfig) -> Result<Spectrogram> {
    let fr = cfg.framing(clip.sample_rate)?;
    let n = clip.samples.len();
    if n < fr.hop {
        return Err(Error::InvalidArgument(format!(
            "clip has {n} samples, fewer than one hop ({})",
            fr.hop
        )));
    }
    let frames = frame_count(n, fr.hop);
    let pad = (fr.n_fft / 2) as isize;
    let window = hamming(fr.win);
    let win_off = (fr.n_fft - fr.win) / 2;
    let bank = mel_filterbank(clip.sample_rate, fr.n_fft, cfg.n_mels, fr.fmin, fr.fmax);
    let bins = fr.n_fft / 2 + 1;

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(fr.n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); fr.n_fft];
    let mut power = vec![0.0; bins];
    let mut out = vec![0.0; cfg.n_mels * frames];
    for f in 0..frames {
        let start = (f * fr.hop) as isize - pad;
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (w, &wv) in window.iter().enumerate() {
            let idx = reflect(start + (win_off + w) as isize, n);
            buf[win_off + w] = Complex::new(clip.samples[idx] * wv, 0.0);
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for (m, filt) in bank.iter().enumerate() {
            let e: f64 = filt.iter().zip(&power).map(|(a, b)| a * b).sum();
            out[m * frames + f] = e.max(cfg.log_floor).ln();
        }
    }
    Spectrogram::new(Tensor::with_dtype(&[cfg.n_mels, frames], out, DType::F64)?)
}
