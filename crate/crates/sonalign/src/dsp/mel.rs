//! STFT and HTK-mel filterbank extraction.

use super::Waveform;
use crate::error::{Error, Result};
use rustfft::{num_complex::Complex, FftPlanner};

pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct MelConfig {
    pub n_fft: usize,
    pub hop: usize,
    /// Number of mel bins (the spectrogram's F).
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            n_fft: 1024,
            hop: 320,
            n_mels: 64,
            fmin: 50.0,
            fmax: 14000.0,
        }
    }
}

/// Log-mel energy grid, `values[f * frames + t]` row-major over F x T.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub bins: usize,
    pub frames: usize,
    pub values: Vec<f64>,
}

impl MelSpectrogram {
    pub fn get(&self, f: usize, t: usize) -> f64 {
        self.values[f * self.frames + t]
    }
}

/// Force the frame count to `frames`: center-crop if longer, right-pad
/// with the log floor if shorter. Lets variable-length clips feed a
/// fixed patch grid.
pub fn fit_frames(m: &MelSpectrogram, frames: usize) -> MelSpectrogram {
    if m.frames == frames {
        return m.clone();
    }
    let pad = LOG_FLOOR.ln();
    let mut values = vec![pad; m.bins * frames];
    let offset = m.frames.saturating_sub(frames) / 2;
    for f in 0..m.bins {
        for t in 0..frames.min(m.frames) {
            values[f * frames + t] = m.get(f, t + offset);
        }
    }
    MelSpectrogram {
        bins: m.bins,
        frames,
        values,
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-mel filterbank, `n_mels` rows of `n_fft/2 + 1` weights.
pub fn mel_filterbank(cfg: &MelConfig, sample_rate: u32) -> Vec<Vec<f64>> {
    let n_bins = cfg.n_fft / 2 + 1;
    let fmax = cfg.fmax.min(sample_rate as f64 / 2.0);
    let mel_lo = hz_to_mel(cfg.fmin);
    let mel_hi = hz_to_mel(fmax);
    let centers: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / cfg.n_fft as f64;
    let mut bank = vec![vec![0.0; n_bins]; cfg.n_mels];
    for (m, row) in bank.iter_mut().enumerate() {
        let (lo, mid, hi) = (centers[m], centers[m + 1], centers[m + 2]);
        for (b, w) in row.iter_mut().enumerate() {
            let f = b as f64 * bin_hz;
            if f > lo && f < mid {
                *w = (f - lo) / (mid - lo);
            } else if (f - mid).abs() < 1e-12 {
                *w = 1.0;
            } else if f > mid && f < hi {
                *w = (hi - f) / (hi - mid);
            }
        }
        // Guarantee nonempty support even when the triangle falls between
        // FFT bins (possible for narrow filters at low sample rates).
        if row.iter().all(|&v| v == 0.0) {
            let b = (mid / bin_hz).round() as usize;
            row[b.min(n_bins - 1)] = 1.0;
        }
    }
    bank
}

fn reflect_pad(samples: &[f64], pad: usize) -> Vec<f64> {
    let n = samples.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        out.push(samples[i % n.max(1)]);
    }
    out.extend_from_slice(samples);
    for i in 0..pad {
        out.push(samples[n - 2 - (i % (n - 1).max(1))]);
    }
    out
}

/// Hann-windowed magnitude STFT -> triangular mel filterbank ->
/// `log(1e-10 + energy)`. Frames are centered by reflection padding;
/// `T = 1 + floor(len / hop)`.
pub fn mel_spectrogram(w: &Waveform, cfg: &MelConfig) -> Result<MelSpectrogram> {
    if cfg.n_fft < cfg.hop {
        return Err(Error::Config(format!(
            "n_fft {} must be >= hop {}",
            cfg.n_fft, cfg.hop
        )));
    }
    if w.samples.len() < (cfg.n_fft / 2).max(2) {
        return Err(Error::Config(format!(
            "clip of {} samples too short for n_fft {}",
            w.samples.len(),
            cfg.n_fft
        )));
    }
    let pad = cfg.n_fft / 2;
    let padded = reflect_pad(&w.samples, pad);
    let frames = 1 + (padded.len() - cfg.n_fft) / cfg.hop;

    let hann: Vec<f64> = (0..cfg.n_fft)
        .map(|i| {
            0.5 * (1.0
                - (2.0 * std::f64::consts::PI * i as f64 / cfg.n_fft as f64).cos())
        })
        .collect();
    let bank = mel_filterbank(cfg, w.sample_rate);
    let n_bins = cfg.n_fft / 2 + 1;

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(cfg.n_fft);
    let mut values = vec![0.0; cfg.n_mels * frames];
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    let mut power = vec![0.0; n_bins];
    for t in 0..frames {
        let start = t * cfg.hop;
        for i in 0..cfg.n_fft {
            buf[i] = Complex::new(padded[start + i] * hann[i], 0.0);
        }
        fft.process(&mut buf);
        for (b, p) in power.iter_mut().enumerate() {
            *p = buf[b].norm_sqr();
        }
        for (m, row) in bank.iter().enumerate() {
            let energy: f64 = row.iter().zip(&power).map(|(&w, &p)| w * p).sum();
            values[m * frames + t] = (LOG_FLOOR + energy).ln();
        }
    }
    Ok(MelSpectrogram {
        bins: cfg.n_mels,
        frames,
        values,
    })
}

/// Frequency (Hz) of the dominant FFT bin; shared oracle for tests and the
/// synthetic dataset.
pub fn fft_peak_frequency(samples: &[f64], sample_rate: u32) -> f64 {
    let n = samples.len();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let mut buf: Vec<Complex<f64>> = samples.iter().map(|&s| Complex::new(s, 0.0)).collect();
    fft.process(&mut buf);
    let half = n / 2;
    let peak = (1..half)
        .max_by(|&a, &b| {
            buf[a]
                .norm_sqr()
                .partial_cmp(&buf[b].norm_sqr())
                .unwrap()
        })
        .unwrap_or(0);
    peak as f64 * sample_rate as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_waveform_gives_log_floor() {
        let w = Waveform::new(vec![0.0; 4000], 8000);
        let cfg = MelConfig {
            n_fft: 256,
            hop: 128,
            n_mels: 32,
            fmin: 50.0,
            fmax: 3800.0,
        };
        let m = mel_spectrogram(&w, &cfg).unwrap();
        let expect = LOG_FLOOR.ln();
        assert!(m.values.iter().all(|&v| (v - expect).abs() < 1e-12));
    }

    #[test]
    fn frame_count_formula() {
        let cfg = MelConfig {
            n_fft: 256,
            hop: 128,
            n_mels: 32,
            fmin: 50.0,
            fmax: 3800.0,
        };
        for len in [256usize, 1000, 4000, 4095] {
            let w = Waveform::new(vec![0.1; len], 8000);
            let m = mel_spectrogram(&w, &cfg).unwrap();
            assert_eq!(m.frames, 1 + len / cfg.hop, "len {}", len);
            assert_eq!(m.bins, cfg.n_mels);
        }
    }

    #[test]
    fn pure_tone_peak_bin_is_stable_across_frames() {
        let rate = 8000;
        let samples: Vec<f64> = (0..8000)
            .map(|i| (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / rate as f64).sin())
            .collect();
        let w = Waveform::new(samples, rate);
        let cfg = MelConfig {
            n_fft: 512,
            hop: 256,
            n_mels: 40,
            fmin: 50.0,
            fmax: 3800.0,
        };
        let m = mel_spectrogram(&w, &cfg).unwrap();
        let argmax_at = |t: usize| {
            (0..m.bins)
                .max_by(|&a, &b| m.get(a, t).partial_cmp(&m.get(b, t)).unwrap())
                .unwrap()
        };
        let first = argmax_at(1);
        for t in 1..m.frames - 1 {
            assert_eq!(argmax_at(t), first, "frame {}", t);
        }
        // the winning filter's center frequency should straddle 1 kHz
        let bank = mel_filterbank(&cfg, rate);
        let bin_hz = rate as f64 / cfg.n_fft as f64;
        let center: f64 = {
            let row = &bank[first];
            let total: f64 = row.iter().sum();
            row.iter()
                .enumerate()
                .map(|(b, &w)| w * b as f64 * bin_hz)
                .sum::<f64>()
                / total
        };
        assert!((center - 1000.0).abs() < 200.0, "center {}", center);
    }

    #[test]
    fn filterbank_rows_nonnegative_with_contiguous_support() {
        let cfg = MelConfig::default();
        let bank = mel_filterbank(&cfg, 44100);
        for row in &bank {
            assert!(row.iter().all(|&w| w >= 0.0));
            assert!(row.iter().sum::<f64>() > 0.0);
            let first = row.iter().position(|&w| w > 0.0).unwrap();
            let last = row.iter().rposition(|&w| w > 0.0).unwrap();
            assert!(row[first..=last].iter().all(|&w| w > 0.0));
        }
    }

    #[test]
    fn too_short_clip_errors() {
        let w = Waveform::new(vec![0.0; 10], 8000);
        assert!(mel_spectrogram(&w, &MelConfig::default()).is_err());
    }
}
