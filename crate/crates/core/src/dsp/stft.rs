use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Complex time-frequency block laid out `[channel][bin][frame]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub channels: usize,
    pub bins: usize,
    pub frames: usize,
    pub data: Vec<Complex64>,
    pub sample_rate: u32,
    pub fft: usize,
    pub hop: usize,
}

impl Spectrogram {
    pub fn zeros(
        channels: usize,
        bins: usize,
        frames: usize,
        sample_rate: u32,
        fft: usize,
        hop: usize,
    ) -> Self {
        Self {
            channels,
            bins,
            frames,
            data: vec![Complex64::new(0.0, 0.0); channels * bins * frames],
            sample_rate,
            fft,
            hop,
        }
    }

    /// An empty block with the same framing parameters as `self`.
    pub fn zeros_like(&self, channels: usize) -> Self {
        Self::zeros(
            channels,
            self.bins,
            self.frames,
            self.sample_rate,
            self.fft,
            self.hop,
        )
    }

    #[inline]
    pub fn index(&self, c: usize, f: usize, t: usize) -> usize {
        (c * self.bins + f) * self.frames + t
    }

    #[inline]
    pub fn get(&self, c: usize, f: usize, t: usize) -> Complex64 {
        self.data[self.index(c, f, t)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, f: usize, t: usize, v: Complex64) {
        let i = self.index(c, f, t);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[Complex64] {
        let n = self.bins * self.frames;
        &self.data[c * n..(c + 1) * n]
    }

    /// Centre frequency of bin `k` in Hz.
    pub fn bin_hz(&self, k: usize) -> f64 {
        k as f64 * self.sample_rate as f64 / self.fft as f64
    }

    pub fn bin_frequencies(&self) -> Vec<f64> {
        (0..self.bins).map(|k| self.bin_hz(k)).collect()
    }

    pub fn same_shape(&self, other: &Spectrogram) -> bool {
        self.channels == other.channels && self.bins == other.bins && self.frames == other.frames
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// Hann-windowed STFT with centred framing.
pub struct Stft {
    fft_len: usize,
    hop: usize,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft")
            .field("fft_len", &self.fft_len)
            .field("hop", &self.hop)
            .finish()
    }
}

impl Stft {
    pub fn new(fft_len: usize, hop: usize) -> Result<Self> {
        if fft_len < 2 || fft_len % 2 != 0 {
            return Err(Error::Config(format!("fft length must be even, got {fft_len}")));
        }
        if hop == 0 || fft_len % hop != 0 || hop > fft_len / 2 {
            return Err(Error::Config(format!(
                "hop {hop} must divide fft length {fft_len} with at least 50% overlap"
            )));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            fft_len,
            hop,
            window: hann(fft_len),
            forward: planner.plan_fft_forward(fft_len),
            inverse: planner.plan_fft_inverse(fft_len),
        })
    }

    pub fn fft_len(&self) -> usize {
        self.fft_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn bins(&self) -> usize {
        self.fft_len / 2 + 1
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        len.div_ceil(self.hop)
    }

    fn padded(&self, signal: &[f64]) -> Vec<f64> {
        let pad = self.fft_len / 2;
        let n = signal.len();
        let reflect = n > pad;
        let at = |i: isize| -> f64 {
            if i >= 0 && (i as usize) < n {
                signal[i as usize]
            } else if reflect {
                let j = if i < 0 { -i } else { 2 * (n as isize - 1) - i };
                if j >= 0 && (j as usize) < n {
                    signal[j as usize]
                } else {
                    0.0
                }
            } else {
                0.0
            }
        };
        let total = self.frame_count(n) * self.hop + self.fft_len;
        (0..total).map(|i| at(i as isize - pad as isize)).collect()
    }

    /// Analyzes each channel. All channels must have equal length.
    pub fn analyze(&self, channels: &[Vec<f64>], sample_rate: u32) -> Result<Spectrogram> {
        let len = channels.first().map(|c| c.len()).unwrap_or(0);
        if len == 0 {
            return Err(Error::Input("cannot analyze an empty signal".into()));
        }
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::Format("channels differ in length".into()));
        }
        let frames = self.frame_count(len);
        let bins = self.bins();
        let mut out = Spectrogram::zeros(
            channels.len(),
            bins,
            frames,
            sample_rate,
            self.fft_len,
            self.hop,
        );
        let mut buf = vec![Complex64::new(0.0, 0.0); self.fft_len];
        let mut scratch =
            vec![Complex64::new(0.0, 0.0); self.forward.get_inplace_scratch_len()];
        for (c, signal) in channels.iter().enumerate() {
            let padded = self.padded(signal);
            for t in 0..frames {
                let start = t * self.hop;
                for (n, b) in buf.iter_mut().enumerate() {
                    *b = Complex64::new(padded[start + n] * self.window[n], 0.0);
                }
                self.forward.process_with_scratch(&mut buf, &mut scratch);
                for (f, v) in buf.iter().take(bins).enumerate() {
                    out.set(c, f, t, *v);
                }
            }
        }
        Ok(out)
    }

    /// Weighted overlap-add inverse; returns `len` samples per channel.
    pub fn synthesize(&self, spec: &Spectrogram, len: usize) -> Result<Vec<Vec<f64>>> {
        if spec.bins != self.bins() || spec.fft != self.fft_len || spec.hop != self.hop {
            return Err(Error::Format(format!(
                "spectrogram framing ({}, {}) does not match transform ({}, {})",
                spec.fft, spec.hop, self.fft_len, self.hop
            )));
        }
        let pad = self.fft_len / 2;
        let total = spec.frames * self.hop + self.fft_len;
        let mut norm = vec![0.0; total];
        for t in 0..spec.frames {
            for n in 0..self.fft_len {
                norm[t * self.hop + n] += self.window[n] * self.window[n];
            }
        }
        let scale = 1.0 / self.fft_len as f64;
        let mut buf = vec![Complex64::new(0.0, 0.0); self.fft_len];
        let mut scratch =
            vec![Complex64::new(0.0, 0.0); self.inverse.get_inplace_scratch_len()];
        let mut out = Vec::with_capacity(spec.channels);
        for c in 0..spec.channels {
            let mut acc = vec![0.0; total];
            for t in 0..spec.frames {
                let bins = spec.bins;
                for f in 0..bins {
                    buf[f] = spec.get(c, f, t);
                }
                // Hermitian completion
                for f in bins..self.fft_len {
                    buf[f] = spec.get(c, self.fft_len - f, t).conj();
                }
                buf[0].im = 0.0;
                buf[bins - 1].im = 0.0;
                self.inverse.process_with_scratch(&mut buf, &mut scratch);
                for n in 0..self.fft_len {
                    acc[t * self.hop + n] += buf[n].re * scale * self.window[n];
                }
            }
            let signal = (0..len)
                .map(|i| {
                    let j = i + pad;
                    if j < total && norm[j] > 1e-10 {
                        acc[j] / norm[j]
                    } else {
                        0.0
                    }
                })
                .collect();
            out.push(signal);
        }
        Ok(out)
    }
}
