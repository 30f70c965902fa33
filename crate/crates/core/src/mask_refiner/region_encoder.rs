//! Frozen region encoders.
//!
//! Embeddings are plain tensors: nothing downstream can propagate gradients
//! into an encoder. Two implementations exist: a deterministic hash-seeded
//! random projection used in tests and desk-scale runs, and an adapter that
//! pipes patches through an external process.
//!
//! External protocol (little-endian):
//!
//! ```text
//! request:  "PDRE" | version u32 | n u32 | channels u32 | height u32 | width u32 | n*c*h*w f32
//! response: "PDRE" | version u32 | n u32 | dim u32 | n*dim f32
//! ```

use std::io::Write;
use std::process::{Command, Stdio};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::regions::{resize_patch, RegionPatch};

pub const PROTOCOL_MAGIC: &[u8; 4] = b"PDRE";
pub const PROTOCOL_VERSION: u32 = 1;

pub trait RegionEncoder {
    /// Side length patches are resampled to before encoding.
    fn input_size(&self) -> usize;
    fn embed_dim(&self) -> usize;
    /// Embed `(3, s, s)` patches into an `(n, embed_dim)` matrix.
    fn encode_batch(&self, patches: &[Tensor]) -> Result<Tensor>;
}

/// Resize every crop to the encoder's input size and embed it.
pub fn region_encode(encoder: &dyn RegionEncoder, patches: &[RegionPatch]) -> Result<Tensor> {
    if patches.is_empty() {
        return Ok(Tensor::zeros(&[0, encoder.embed_dim()]));
    }
    let resized: Vec<Tensor> = patches
        .iter()
        .map(|p| resize_patch(&p.pixels, encoder.input_size()))
        .collect();
    let out = encoder.encode_batch(&resized)?;
    if out.shape() != [patches.len(), encoder.embed_dim()] {
        return Err(Error::RegionEncoder(format!(
            "encoder returned {:?}, expected [{}, {}]",
            out.shape(),
            patches.len(),
            encoder.embed_dim()
        )));
    }
    Ok(out)
}

/// Random-projection stub: `tanh(W x)` followed by the patch RMS, so any
/// non-zero patch has a non-zero embedding.
#[derive(Clone, Debug)]
pub struct StubRegionEncoder {
    size: usize,
    dim: usize,
    projection: Tensor,
}

impl StubRegionEncoder {
    pub fn new(seed: u64, size: usize, dim: usize) -> Self {
        assert!(size > 0 && dim >= 2, "stub encoder needs size > 0 and dim >= 2");
        let mut h = Sha256::new();
        h.update(b"stub-region-encoder");
        h.update(seed.to_le_bytes());
        h.update((size as u64).to_le_bytes());
        h.update((dim as u64).to_le_bytes());
        let digest = h.finalize();
        let mut rng = ChaCha8Rng::from_seed(digest.into());
        let fan_in = 3 * size * size;
        let projection = Tensor::randn(&[dim - 1, fan_in], &mut rng).map(|v| v / (fan_in as f64).sqrt() * 4.0);
        Self { size, dim, projection }
    }
}

impl RegionEncoder for StubRegionEncoder {
    fn input_size(&self) -> usize {
        self.size
    }

    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn encode_batch(&self, patches: &[Tensor]) -> Result<Tensor> {
        let fan_in = 3 * self.size * self.size;
        let mut out = Vec::with_capacity(patches.len() * self.dim);
        for p in patches {
            if p.len() != fan_in {
                return Err(Error::RegionEncoder(format!(
                    "patch {:?} is not (3, {s}, {s})",
                    p.shape(),
                    s = self.size
                )));
            }
            let x = p.data();
            for j in 0..self.dim - 1 {
                let dot: f64 = self.projection.row(j).iter().zip(x).map(|(a, b)| a * b).sum();
                out.push(dot.tanh());
            }
            out.push((x.iter().map(|v| v * v).sum::<f64>() / fan_in as f64).sqrt());
        }
        Ok(Tensor::new(vec![patches.len(), self.dim], out))
    }
}

fn check_magic(buf: &[u8]) -> Result<()> {
    if buf.len() < 8 || &buf[..4] != PROTOCOL_MAGIC {
        return Err(Error::RegionEncoder("bad magic in region encoder message".into()));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != PROTOCOL_VERSION {
        return Err(Error::RegionEncoder(format!(
            "protocol version {version} unsupported (expected {PROTOCOL_VERSION})"
        )));
    }
    Ok(())
}

fn read_u32s(buf: &[u8], n: usize) -> Result<Vec<usize>> {
    if buf.len() < 8 + 4 * n {
        return Err(Error::RegionEncoder("truncated region encoder header".into()));
    }
    Ok((0..n)
        .map(|i| u32::from_le_bytes(buf[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize)
        .collect())
}

fn read_f32s(buf: &[u8], count: usize) -> Result<Vec<f64>> {
    if buf.len() != count * 4 {
        return Err(Error::RegionEncoder(format!(
            "payload has {} bytes, expected {}",
            buf.len(),
            count * 4
        )));
    }
    Ok(buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect())
}

pub fn encode_request(patches: &[Tensor], size: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + patches.len() * 3 * size * size * 4);
    out.extend_from_slice(PROTOCOL_MAGIC);
    out.extend_from_slice(&PROTOCOL_VERSION.to_le_bytes());
    for v in [patches.len(), 3, size, size] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for p in patches {
        for &v in p.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Decode a request into `(3, h, w)` patches.
pub fn decode_request(buf: &[u8]) -> Result<Vec<Tensor>> {
    check_magic(buf)?;
    let hdr = read_u32s(buf, 4)?;
    let (n, c, h, w) = (hdr[0], hdr[1], hdr[2], hdr[3]);
    let vals = read_f32s(&buf[24..], n * c * h * w)?;
    Ok(vals
        .chunks(c * h * w)
        .take(n)
        .map(|chunk| Tensor::new(vec![c, h, w], chunk.to_vec()))
        .collect())
}

pub fn encode_response(embeddings: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + embeddings.len() * 4);
    out.extend_from_slice(PROTOCOL_MAGIC);
    out.extend_from_slice(&PROTOCOL_VERSION.to_le_bytes());
    out.extend_from_slice(&(embeddings.dim(0) as u32).to_le_bytes());
    out.extend_from_slice(&(embeddings.dim(1) as u32).to_le_bytes());
    for &v in embeddings.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_response(buf: &[u8]) -> Result<Tensor> {
    check_magic(buf)?;
    let hdr = read_u32s(buf, 2)?;
    let (n, d) = (hdr[0], hdr[1]);
    Ok(Tensor::new(vec![n, d], read_f32s(&buf[16..], n * d)?))
}

/// Runs an external command per batch, speaking the framed protocol over stdin/stdout.
#[derive(Clone, Debug)]
pub struct SubprocessRegionEncoder {
    pub command: Vec<String>,
    pub size: usize,
    pub dim: usize,
}

impl RegionEncoder for SubprocessRegionEncoder {
    fn input_size(&self) -> usize {
        self.size
    }

    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn encode_batch(&self, patches: &[Tensor]) -> Result<Tensor> {
        let (prog, args) = self
            .command
            .split_first()
            .ok_or_else(|| Error::RegionEncoder("empty region encoder command".into()))?;
        let mut child = Command::new(prog)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::RegionEncoder(format!("cannot start `{prog}`: {e}")))?;
        let request = encode_request(patches, self.size);
        {
            let mut stdin = child.stdin.take().expect("piped stdin");
            // A child that exits early closes the pipe; its status is reported below.
            let _ = stdin.write_all(&request);
        }
        let out = child
            .wait_with_output()
            .map_err(|e| Error::RegionEncoder(format!("`{prog}` failed: {e}")))?;
        if !out.status.success() {
            return Err(Error::RegionEncoder(format!(
                "`{prog}` exited with {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let emb = decode_response(&out.stdout)?;
        if emb.shape() != [patches.len(), self.dim] {
            return Err(Error::RegionEncoder(format!(
                "`{prog}` returned {:?}, expected [{}, {}]",
                emb.shape(),
                patches.len(),
                self.dim
            )));
        }
        Ok(emb)
    }
}
