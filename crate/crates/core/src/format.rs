//! Binary file formats. All integers and floats are little-endian.
//!
//! `.fgt` holds a dense `f32` array:
//!
//! ```text
//! "FGT1" | dtype u8 (0 = binary32) | kind u8 | ndim u8 | pad u8 (0)
//!        | dims: ndim x u64 | payload: product(dims) x f32, row-major
//! ```
//!
//! `kind` is 0 for a tensor, 1 for per-element Fisher, 2 for per-channel
//! Fisher and 3 for channel magnitudes.
//!
//! `.fgq` holds a [`QuantizedTensor`]:
//!
//! ```text
//! "FGQ1" | block size u16 (16) | rows u64 | cols u64 | fp8 tensor scale f32
//!        | metadata bitmap, ceil(nblocks / 8) bytes, bit i = block i, LSB first
//!        | blocks in order: NVFP4 = 8 bytes of nibbles (low nibble = even
//!          element) + 1 scale byte; FP8 = 16 code bytes
//! ```
//!
//! Both parsers reject trailing bytes and nonzero padding, so a file that
//! parses re-encodes to the same bytes.

use std::fs;
use std::path::Path;

use crate::blockquant::{Fp8Block, NvFp4Block, QuantBlock, QuantizedTensor};
use crate::numerics::{Fp4Code, Fp8Code};
use crate::sensitivity::{ChannelMagnitudeMap, FisherKind, FisherMap};
use crate::{Error, Result, Tensor, BLOCK_SIZE};

pub const FGT_MAGIC: &[u8; 4] = b"FGT1";
pub const FGQ_MAGIC: &[u8; 4] = b"FGQ1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TensorKind {
    Tensor = 0,
    ElementFisher = 1,
    ChannelFisher = 2,
    ChannelMagnitudes = 3,
}

impl TensorKind {
    fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            0 => TensorKind::Tensor,
            1 => TensorKind::ElementFisher,
            2 => TensorKind::ChannelFisher,
            3 => TensorKind::ChannelMagnitudes,
            other => return Err(Error::Format(format!("unknown tensor kind {other}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            TensorKind::Tensor => "tensor",
            TensorKind::ElementFisher => "per-element fisher",
            TensorKind::ChannelFisher => "per-channel fisher",
            TensorKind::ChannelMagnitudes => "channel magnitudes",
        }
    }
}

/// Contents of an `.fgt` file.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub kind: TensorKind,
    pub dims: Vec<u64>,
    pub data: Vec<f32>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format(format!(
                "truncated: needed {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn finish(&self) -> Result<()> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(Error::Format(format!("{n} trailing bytes"))),
        }
    }
}

impl TensorFile {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(FGT_MAGIC);
        out.push(0);
        out.push(self.kind as u8);
        out.push(self.dims.len() as u8);
        out.push(0);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != FGT_MAGIC {
            return Err(Error::Format("bad magic, expected FGT1".into()));
        }
        let dtype = r.u8()?;
        if dtype != 0 {
            return Err(Error::Format(format!("unsupported dtype code {dtype}")));
        }
        let kind = TensorKind::from_byte(r.u8()?)?;
        let ndim = r.u8()? as usize;
        if r.u8()? != 0 {
            return Err(Error::Format("nonzero header padding".into()));
        }
        let dims = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1u64, |acc, d| acc.checked_mul(*d))
            .and_then(|n| n.checked_mul(4))
            .filter(|bytes| *bytes == r.remaining() as u64)
            .ok_or_else(|| {
                Error::Format(format!(
                    "payload of {} bytes does not match dims {dims:?}",
                    r.remaining()
                ))
            })?;
        let data = r
            .take(count as usize)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        r.finish()?;
        Ok(TensorFile { kind, dims, data })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        TensorFile {
            kind: TensorKind::Tensor,
            dims: vec![t.rows() as u64, t.cols() as u64],
            data: t.data().to_vec(),
        }
    }

    pub fn from_fisher(f: &FisherMap) -> Self {
        let (kind, dims) = match f.kind() {
            FisherKind::PerElement { rows, cols } => {
                (TensorKind::ElementFisher, vec![rows as u64, cols as u64])
            }
            FisherKind::PerChannel => (TensorKind::ChannelFisher, vec![f.values().len() as u64]),
        };
        TensorFile {
            kind,
            dims,
            data: f.values().to_vec(),
        }
    }

    pub fn from_magnitudes(m: &ChannelMagnitudeMap) -> Self {
        TensorFile {
            kind: TensorKind::ChannelMagnitudes,
            dims: vec![m.values().len() as u64],
            data: m.values().to_vec(),
        }
    }

    fn expect_kind(&self, kind: TensorKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!(
                "expected {}, file holds {}",
                kind.name(),
                self.kind.name()
            )));
        }
        Ok(())
    }

    fn matrix_dims(&self) -> Result<(usize, usize)> {
        match self.dims[..] {
            [rows, cols] => Ok((rows as usize, cols as usize)),
            _ => Err(Error::Format(format!(
                "expected 2 dims, got {:?}",
                self.dims
            ))),
        }
    }

    fn vector_len(&self) -> Result<usize> {
        match self.dims[..] {
            [n] => Ok(n as usize),
            _ => Err(Error::Format(format!(
                "expected 1 dim, got {:?}",
                self.dims
            ))),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        self.expect_kind(TensorKind::Tensor)?;
        let (rows, cols) = self.matrix_dims()?;
        Tensor::new(rows, cols, self.data.clone())
    }

    /// Either Fisher kind.
    pub fn to_fisher(&self) -> Result<FisherMap> {
        match self.kind {
            TensorKind::ElementFisher => {
                let (rows, cols) = self.matrix_dims()?;
                FisherMap::per_element(rows, cols, self.data.clone())
            }
            TensorKind::ChannelFisher => {
                self.vector_len()?;
                FisherMap::per_channel(self.data.clone())
            }
            other => Err(Error::Format(format!(
                "expected a fisher map, file holds {}",
                other.name()
            ))),
        }
    }

    pub fn to_magnitudes(&self) -> Result<ChannelMagnitudeMap> {
        self.expect_kind(TensorKind::ChannelMagnitudes)?;
        self.vector_len()?;
        ChannelMagnitudeMap::new(self.data.clone())
    }
}

const FGQ_HEADER: usize = 4 + 2 + 8 + 8 + 4;
const NVFP4_BYTES: usize = BLOCK_SIZE / 2 + 1;
const FP8_BYTES: usize = BLOCK_SIZE;

pub fn encode_fgq(qt: &QuantizedTensor) -> Vec<u8> {
    let n = qt.blocks().len();
    let mut out = Vec::with_capacity(FGQ_HEADER + n.div_ceil(8) + n * FP8_BYTES);
    out.extend_from_slice(FGQ_MAGIC);
    out.extend_from_slice(&(BLOCK_SIZE as u16).to_le_bytes());
    out.extend_from_slice(&(qt.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(qt.cols() as u64).to_le_bytes());
    out.extend_from_slice(&qt.fp8_scale().to_le_bytes());
    let mut bitmap = vec![0u8; n.div_ceil(8)];
    for (i, fp8) in qt.meta().into_iter().enumerate() {
        if fp8 {
            bitmap[i / 8] |= 1 << (i % 8);
        }
    }
    out.extend_from_slice(&bitmap);
    for b in qt.blocks() {
        match b {
            QuantBlock::Nvfp4(b) => {
                for pair in b.codes.chunks_exact(2) {
                    out.push(pair[0].bits() | (pair[1].bits() << 4));
                }
                out.push(b.scale.bits());
            }
            QuantBlock::Fp8(b) => out.extend(b.codes.iter().map(|c| c.bits())),
        }
    }
    out
}

pub fn decode_fgq(bytes: &[u8]) -> Result<QuantizedTensor> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != FGQ_MAGIC {
        return Err(Error::Format("bad magic, expected FGQ1".into()));
    }
    let bs = r.u16()?;
    if bs as usize != BLOCK_SIZE {
        return Err(Error::Format(format!(
            "block size {bs}, only 16 is supported"
        )));
    }
    let rows = r.u64()?;
    let cols = r.u64()?;
    let scale = r.f32()?;
    if cols % BLOCK_SIZE as u64 != 0 {
        return Err(Error::Format(format!("cols {cols} not a multiple of 16")));
    }
    let n = rows
        .checked_mul(cols / BLOCK_SIZE as u64)
        .filter(|n| n.saturating_mul(NVFP4_BYTES as u64) <= r.remaining() as u64)
        .ok_or_else(|| {
            Error::Format(format!(
                "{rows}x{cols} does not fit in {} bytes",
                r.remaining()
            ))
        })? as usize;
    let bitmap = r.take(n.div_ceil(8))?;
    if !n.is_multiple_of(8) && bitmap[n / 8] >> (n % 8) != 0 {
        return Err(Error::Format("nonzero bitmap padding".into()));
    }
    let mut blocks = Vec::with_capacity(n);
    for i in 0..n {
        let fp8 = bitmap[i / 8] >> (i % 8) & 1 == 1;
        if fp8 {
            let raw = r.take(FP8_BYTES)?;
            let codes = std::array::from_fn(|j| Fp8Code::from_bits(raw[j]));
            blocks.push(QuantBlock::Fp8(Fp8Block { codes }));
        } else {
            let raw = r.take(NVFP4_BYTES)?;
            let codes = std::array::from_fn(|j| {
                let byte = raw[j / 2];
                let nibble = if j % 2 == 0 { byte & 0xF } else { byte >> 4 };
                Fp4Code::from_bits(nibble).expect("nibble")
            });
            let scale = Fp8Code::from_bits(raw[BLOCK_SIZE / 2]);
            blocks.push(QuantBlock::Nvfp4(NvFp4Block { codes, scale }));
        }
    }
    r.finish()?;
    QuantizedTensor::new(rows as usize, cols as usize, scale, blocks)
        .map_err(|e| Error::Format(e.to_string()))
}

pub fn read_fgq(path: impl AsRef<Path>) -> Result<QuantizedTensor> {
    decode_fgq(&fs::read(path)?)
}

pub fn write_fgq(qt: &QuantizedTensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_fgq(qt))?;
    Ok(())
}
