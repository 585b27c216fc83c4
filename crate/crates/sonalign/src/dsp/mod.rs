//! Signal frontend: WAV decoding, resampling, mel-spectrogram extraction,
//! and training-time augmentation.

mod augment;
mod cache;
mod mel;
mod resample;
mod wav;

pub use augment::{augment, AugmentConfig};
pub use cache::{load_spectrogram, save_spectrogram};
pub use mel::{
    fft_peak_frequency, fit_frames, mel_filterbank, mel_spectrogram, MelConfig, MelSpectrogram,
    LOG_FLOOR,
};
pub use resample::resample;
pub use wav::{load_wav, write_wav_pcm16};

/// Mono audio signal with its sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        debug_assert!(sample_rate > 0);
        Waveform {
            samples,
            sample_rate,
        }
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}
