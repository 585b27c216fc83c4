//! On-disk spectrogram cache, one file per clip.
//!
//! Layout: magic "SACS", version u32, F u32, T u32, then F*T little-endian
//! 32-bit floats row-major.

use super::mel::MelSpectrogram;
use crate::error::{Error, Result};
use std::io::Read;
use std::path::Path;

const MAGIC: &[u8; 4] = b"SACS";
const VERSION: u32 = 1;

pub fn save_spectrogram(path: impl AsRef<Path>, m: &MelSpectrogram) -> Result<()> {
    let mut out = Vec::with_capacity(16 + m.values.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(m.bins as u32).to_le_bytes());
    out.extend_from_slice(&(m.frames as u32).to_le_bytes());
    for &v in &m.values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_spectrogram(path: impl AsRef<Path>) -> Result<MelSpectrogram> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let fail = |msg: &str| Error::Dataset(format!("{}: {}", path.display(), msg));
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(fail("not a spectrogram cache file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(fail(&format!(
            "cache version {} (this build reads {})",
            version, VERSION
        )));
    }
    let bins = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let frames = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expect = 16 + bins * frames * 4;
    if bytes.len() != expect {
        return Err(fail(&format!(
            "payload is {} bytes, expected {}",
            bytes.len(),
            expect
        )));
    }
    let values = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok(MelSpectrogram {
        bins,
        frames,
        values,
    })
}
