//! Splitting a mel-spectrogram into flattened non-overlapping patches.

use crate::dsp::MelSpectrogram;
use crate::tensor::Tensor;

/// Flattened patches plus the grid they came from.
#[derive(Clone, Debug)]
pub struct PatchSequence {
    /// `[rows * cols, patch_h * patch_w]`.
    pub tokens: Tensor,
    /// (rows, cols) of the patch grid: rows index frequency, cols time.
    pub grid: (usize, usize),
}

/// Cut the spectrogram into `ph x pw` patches, edge-padding with the log
/// floor so any input size works. Patches are ordered frequency-major
/// (all patches of the lowest band first), each flattened row-major.
pub fn patchify(mel: &MelSpectrogram, patch: (usize, usize)) -> PatchSequence {
    let (ph, pw) = patch;
    assert!(ph > 0 && pw > 0);
    let pad_value = crate::dsp::LOG_FLOOR.ln();
    let rows = mel.bins.div_ceil(ph);
    let cols = mel.frames.div_ceil(pw);
    let dim = ph * pw;
    let mut data = vec![0.0; rows * cols * dim];
    for r in 0..rows {
        for c in 0..cols {
            let token = r * cols + c;
            for i in 0..ph {
                for j in 0..pw {
                    let f = r * ph + i;
                    let t = c * pw + j;
                    let v = if f < mel.bins && t < mel.frames {
                        mel.get(f, t)
                    } else {
                        pad_value
                    };
                    data[token * dim + i * pw + j] = v;
                }
            }
        }
    }
    PatchSequence {
        tokens: Tensor::new(vec![rows * cols, dim], data).expect("patch shape"),
        grid: (rows, cols),
    }
}
