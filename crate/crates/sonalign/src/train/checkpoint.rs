//! Checkpoint persistence. Layout (all little-endian):
//! magic "SACK", format version u32, CRC-32 of the payload, then the
//! payload: config text block, epoch, rng state, per-epoch loss log, and
//! a tensor table of (name, dtype tag, rank, extents, f64 values).

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Tensor;
use crate::train::TrainConfig;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"SACK";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

/// Serializable ChaCha8 state: a run can resume mid-stream.
#[derive(Clone, Debug, PartialEq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: u64,
    pub rng: RngState,
    /// Mean contrastive loss per completed epoch.
    pub loss_log: Vec<f64>,
    pub params: ParamStore,
}

/// CRC-32 (IEEE, reflected) over a byte stream.
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = !0u32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes_with_len(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated payload".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes_with_len(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

fn encode_payload(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.bytes_with_len(ckpt.config.serialize().as_bytes());
    w.u64(ckpt.epoch);
    w.0.extend_from_slice(&ckpt.rng.seed);
    w.0.extend_from_slice(&ckpt.rng.word_pos.to_le_bytes());
    w.u64(ckpt.rng.stream);
    w.u32(ckpt.loss_log.len() as u32);
    for &v in &ckpt.loss_log {
        w.0.extend_from_slice(&v.to_le_bytes());
    }
    w.u32(ckpt.params.len() as u32);
    for (name, tensor) in ckpt.params.iter() {
        w.bytes_with_len(name.as_bytes());
        w.0.push(DTYPE_F64);
        w.u32(tensor.rank() as u32);
        for &e in tensor.shape() {
            w.u32(e as u32);
        }
        for &v in tensor.data() {
            w.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.0
}

fn decode_payload(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    let config_text = std::str::from_utf8(r.bytes_with_len()?)
        .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
    let config = TrainConfig::parse(config_text)
        .map_err(|e| Error::Checkpoint(format!("embedded config: {}", e)))?;
    let epoch = r.u64()?;
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
    let stream = r.u64()?;
    let n_losses = r.u32()? as usize;
    let mut loss_log = Vec::with_capacity(n_losses);
    for _ in 0..n_losses {
        loss_log.push(r.f64()?);
    }
    let n_tensors = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..n_tensors {
        let name = std::str::from_utf8(r.bytes_with_len()?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F64 {
            return Err(Error::Checkpoint(format!(
                "tensor {}: unsupported dtype tag {}",
                name, dtype
            )));
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f64()?);
        }
        params.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after payload",
            buf.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        config,
        epoch,
        rng: RngState {
            seed,
            word_pos,
            stream,
        },
        loss_log,
        params,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let payload = encode_payload(ckpt);
    let mut out = Vec::with_capacity(payload.len() + 12);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&crc32(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path.as_ref())?;
    if bytes.len() < 12 || bytes[..4] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint (bad magic)",
            path.as_ref().display()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} but this build reads version {}",
            version, VERSION
        )));
    }
    let stored_crc = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let payload = &bytes[12..];
    let actual = crc32(payload);
    if actual != stored_crc {
        return Err(Error::Checkpoint(format!(
            "checksum mismatch: stored {:08x}, computed {:08x}",
            stored_crc, actual
        )));
    }
    decode_payload(payload)
}
