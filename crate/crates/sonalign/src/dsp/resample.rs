//! Band-limited resampling with a 64-tap Kaiser-windowed sinc kernel.

use super::Waveform;

const TAPS: usize = 64;
const KAISER_BETA: f64 = 8.6;

/// Zeroth-order modified Bessel function of the first kind (series
/// expansion, converges quickly for the beta values used here).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half_x = x / 2.0;
    for k in 1..=30 {
        term *= (half_x / k as f64) * (half_x / k as f64);
        sum += term;
        if term < 1e-16 * sum {
            break;
        }
    }
    sum
}

fn kaiser(offset: f64, half_width: f64) -> f64 {
    let r = offset / half_width;
    if r.abs() > 1.0 {
        return 0.0;
    }
    bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / bessel_i0(KAISER_BETA)
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Resample to `target_rate`. Identity when the rates already match.
/// Output length is `round(len * target / source)`, preserving duration
/// within one sample.
pub fn resample(w: &Waveform, target_rate: u32) -> Waveform {
    assert!(target_rate > 0);
    if target_rate == w.sample_rate {
        return w.clone();
    }
    let ratio = target_rate as f64 / w.sample_rate as f64;
    let out_len = (w.samples.len() as f64 * ratio).round() as usize;
    // When downsampling, lower the cutoff to the new Nyquist.
    let cutoff = ratio.min(1.0);
    let half_width = TAPS as f64 / 2.0;
    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len {
        let center = n as f64 / ratio;
        let lo = (center - half_width / cutoff).floor().max(0.0) as usize;
        let hi = ((center + half_width / cutoff).ceil() as usize).min(w.samples.len());
        let mut acc = 0.0;
        for k in lo..hi {
            let d = (k as f64 - center) * cutoff;
            acc += w.samples[k] * sinc(d) * kaiser(d, half_width);
        }
        out.push(acc * cutoff);
    }
    Waveform::new(out, target_rate)
}
