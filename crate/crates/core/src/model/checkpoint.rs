//! Binary checkpoint container: 4 magic bytes, u32 format version, a mode
//! byte, then a sequence of length-prefixed little-endian 32-bit tensors.
//! Integer metadata travels as raw u32 words in the same framing.

use std::io::{Read, Write};
use std::path::Path;

use super::network::{Geometry, SkeletonParams};
use super::optim::AdamMoments;
use super::train::{RngState, TrainState};
use super::{Mode, ModelBundle};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"M2MX";
pub const VERSION: u32 = 1;

/// Framed word-tensor writer shared with the GMM checkpoint.
#[derive(Default)]
pub struct Container {
    pub tensors: Vec<Vec<u32>>,
}

impl Container {
    pub fn push_f32(&mut self, t: &[f32]) {
        self.tensors.push(t.iter().map(|x| x.to_bits()).collect());
    }

    pub fn push_words(&mut self, w: Vec<u32>) {
        self.tensors.push(w);
    }

    pub fn to_bytes(&self, magic: [u8; 4], version: u32, tag: u8) -> Vec<u8> {
        let total: usize = self.tensors.iter().map(|t| 4 + 4 * t.len()).sum();
        let mut out = Vec::with_capacity(9 + total);
        out.extend_from_slice(&magic);
        out.extend_from_slice(&version.to_le_bytes());
        out.push(tag);
        for t in &self.tensors {
            out.extend_from_slice(&(t.len() as u32).to_le_bytes());
            for w in t {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
        out
    }

    /// Returns the tag byte and the container.
    pub fn from_bytes(bytes: &[u8], magic: [u8; 4], version: u32) -> Result<(u8, Self)> {
        if bytes.len() < 4 {
            return Err(Error::Truncated("missing magic bytes".into()));
        }
        let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if found != magic {
            return Err(Error::BadMagic {
                expected: magic,
                found,
            });
        }
        if bytes.len() < 9 {
            return Err(Error::Truncated("incomplete header".into()));
        }
        let v = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if v != version {
            return Err(Error::VersionMismatch {
                expected: version,
                found: v,
            });
        }
        let tag = bytes[8];
        let mut pos = 9;
        let mut tensors = Vec::new();
        let word = |pos: usize| -> Result<u32> {
            bytes
                .get(pos..pos + 4)
                .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
                .ok_or_else(|| Error::Truncated(format!("file ends at byte {}", bytes.len())))
        };
        while pos < bytes.len() {
            let n = word(pos)? as usize;
            pos += 4;
            if bytes.len() - pos < n * 4 {
                return Err(Error::Truncated(format!(
                    "tensor {} declares {n} values but the file ends first",
                    tensors.len()
                )));
            }
            let t: Vec<u32> = (0..n).map(|i| word(pos + 4 * i)).collect::<Result<_>>()?;
            pos += 4 * n;
            tensors.push(t);
        }
        Ok((tag, Container { tensors }))
    }
}

/// Sequential reader over a parsed container.
pub struct Cursor {
    tensors: std::vec::IntoIter<Vec<u32>>,
    index: usize,
}

impl Cursor {
    pub fn new(c: Container) -> Self {
        Cursor {
            tensors: c.tensors.into_iter(),
            index: 0,
        }
    }

    pub fn words(&mut self, expected: Option<usize>) -> Result<Vec<u32>> {
        let t = self
            .tensors
            .next()
            .ok_or_else(|| Error::Truncated(format!("missing tensor {}", self.index)))?;
        if let Some(n) = expected {
            if t.len() != n {
                return Err(Error::Truncated(format!(
                    "tensor {} has {} values, expected {n}",
                    self.index,
                    t.len()
                )));
            }
        }
        self.index += 1;
        Ok(t)
    }

    pub fn f32s(&mut self, expected: usize) -> Result<Vec<f32>> {
        Ok(self
            .words(Some(expected))?
            .into_iter()
            .map(f32::from_bits)
            .collect())
    }

    pub fn finish(mut self) -> Result<()> {
        if self.tensors.next().is_some() {
            return Err(Error::Truncated("trailing tensors after the last field".into()));
        }
        Ok(())
    }
}

fn split_u64(x: u64) -> [u32; 2] {
    [x as u32, (x >> 32) as u32]
}

fn join_u64(w: &[u32]) -> u64 {
    w[0] as u64 | (w[1] as u64) << 32
}

fn geometry_words(g: &Geometry) -> Vec<u32> {
    let mut w: Vec<u32> = [
        g.input_frames,
        g.in_channels,
        g.hidden,
        g.embed_dim,
        g.kernel,
        g.pool,
        g.n_blocks,
    ]
    .iter()
    .map(|&x| x as u32)
    .collect();
    w.extend(split_u64(g.dropout.to_bits()));
    w
}

fn geometry_from(w: &[u32]) -> Result<Geometry> {
    let g = Geometry {
        input_frames: w[0] as usize,
        in_channels: w[1] as usize,
        hidden: w[2] as usize,
        embed_dim: w[3] as usize,
        kernel: w[4] as usize,
        pool: w[5] as usize,
        n_blocks: w[6] as usize,
        dropout: f64::from_bits(join_u64(&w[7..9])),
    };
    g.validate()
        .map_err(|e| Error::Truncated(format!("corrupt geometry: {e}")))?;
    Ok(g)
}

fn rng_words(r: &RngState) -> Vec<u32> {
    let mut w: Vec<u32> = r
        .seed
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    w.extend(split_u64(r.stream));
    w.extend(split_u64(r.word_pos as u64));
    w.extend(split_u64((r.word_pos >> 64) as u64));
    w
}

fn rng_from(w: &[u32]) -> RngState {
    let mut seed = [0u8; 32];
    for (i, x) in w[..8].iter().enumerate() {
        seed[4 * i..4 * i + 4].copy_from_slice(&x.to_le_bytes());
    }
    RngState {
        seed,
        stream: join_u64(&w[8..10]),
        word_pos: join_u64(&w[10..12]) as u128 | (join_u64(&w[12..14]) as u128) << 64,
    }
}

pub fn encode(bundle: &ModelBundle<f32>, state: &TrainState) -> Result<Vec<u8>> {
    bundle.validate()?;
    if !state.congruent_with(bundle) {
        return Err(Error::Config("optimizer state does not match the model".into()));
    }
    let mut c = Container::default();
    c.push_words(geometry_words(bundle.geometry()));
    let nets = bundle.nets();
    for net in &nets {
        for t in net.all_tensors() {
            c.push_f32(t);
        }
    }
    let mut meta = Vec::new();
    meta.extend(split_u64(state.step));
    meta.extend(split_u64(state.epoch));
    c.push_words(meta);
    c.push_words(rng_words(&state.rng));
    for m in &state.moments {
        for t in m.m.iter().chain(&m.v) {
            c.push_f32(t);
        }
    }
    Ok(c.to_bytes(MAGIC, VERSION, bundle.mode.tag()))
}

pub fn decode(bytes: &[u8]) -> Result<(ModelBundle<f32>, TrainState)> {
    let (tag, c) = Container::from_bytes(bytes, MAGIC, VERSION)?;
    let mode = Mode::from_tag(tag)?;
    let mut cur = Cursor::new(c);
    let geometry = geometry_from(&cur.words(Some(9))?)?;
    let n_nets = if mode == Mode::Cross { 2 } else { 1 };
    let mut nets = Vec::with_capacity(n_nets);
    for _ in 0..n_nets {
        let mut net = SkeletonParams::<f32>::zeros(&geometry);
        for t in net.all_tensors_mut() {
            let n = t.len();
            *t = cur.f32s(n)?;
        }
        nets.push(net);
    }
    let meta = cur.words(Some(4))?;
    let rng = rng_from(&cur.words(Some(14))?);
    let mut moments = Vec::with_capacity(n_nets);
    for net in &nets {
        let lens: Vec<usize> = net.trainable().iter().map(|t| t.len()).collect();
        let m = lens.iter().map(|&n| cur.f32s(n)).collect::<Result<_>>()?;
        let v = lens.iter().map(|&n| cur.f32s(n)).collect::<Result<_>>()?;
        moments.push(AdamMoments { m, v });
    }
    cur.finish()?;
    let mut it = nets.into_iter();
    let anchor_net = it.next().expect("at least one net");
    let bundle = ModelBundle {
        mode,
        anchor_net,
        other_net: it.next(),
    };
    let state = TrainState {
        step: join_u64(&meta[0..2]),
        epoch: join_u64(&meta[2..4]),
        moments,
        rng,
    };
    Ok((bundle, state))
}

pub fn save_checkpoint(bundle: &ModelBundle<f32>, state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode(bundle, state)?;
    write_atomically(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelBundle<f32>, TrainState)> {
    decode(&read_all(path)?)
}

pub(crate) fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

/// Writes to a sibling temporary file and renames it into place, so an
/// interrupted write never clobbers the previous checkpoint.
pub(crate) fn write_atomically(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
