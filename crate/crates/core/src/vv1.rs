//! `VV1` binary tensor files.
//!
//! Layout (little-endian): magic `VVOL`, `u32` version (1), `u8` dtype
//! (0 = f32, 1 = u8), `u8` rank, `rank` x `u32` dims (channel first when
//! present, then H, W, D), 3 x `f32` spacing in mm, raw data.

use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{Dims, FeatureMap, Field, Mask3D, ProbMap, Volume3D};

pub const MAGIC: &[u8; 4] = b"VVOL";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Vv1Data {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl Vv1Data {
    fn len(&self) -> usize {
        match self {
            Vv1Data::F32(v) => v.len(),
            Vv1Data::U8(v) => v.len(),
        }
    }

    fn code(&self) -> u8 {
        match self {
            Vv1Data::F32(_) => 0,
            Vv1Data::U8(_) => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vv1Tensor {
    pub dims: Vec<u32>,
    pub spacing: [f32; 3],
    pub data: Vv1Data,
}

fn spatial(dims: Dims) -> [u32; 3] {
    [dims[0] as u32, dims[1] as u32, dims[2] as u32]
}

impl Vv1Tensor {
    pub fn new(dims: Vec<u32>, spacing: [f32; 3], data: Vv1Data) -> Result<Self> {
        let n: usize = dims.iter().map(|&d| d as usize).product();
        if dims.len() > u8::MAX as usize || n != data.len() {
            return Err(Error::shape(format!(
                "VV1 dims {dims:?} do not match {} values",
                data.len()
            )));
        }
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    pub fn from_volume(v: &Volume3D) -> Self {
        Self {
            dims: spatial(v.dims()).to_vec(),
            spacing: v.spacing(),
            data: Vv1Data::F32(v.data().to_vec()),
        }
    }

    pub fn from_mask(m: &Mask3D, spacing: [f32; 3]) -> Self {
        Self {
            dims: spatial(m.dims()).to_vec(),
            spacing,
            data: Vv1Data::U8(m.data().to_vec()),
        }
    }

    pub fn from_features(f: &FeatureMap<f32>, spacing: [f32; 3]) -> Self {
        let mut dims = vec![f.channels() as u32];
        dims.extend(spatial(f.dims()));
        Self {
            dims,
            spacing,
            data: Vv1Data::F32(f.data().to_vec()),
        }
    }

    pub fn from_probs(p: &ProbMap<f32>, spacing: [f32; 3]) -> Self {
        let mut dims = vec![2];
        dims.extend(spatial(p.dims()));
        Self {
            dims,
            spacing,
            data: Vv1Data::F32(p.data().to_vec()),
        }
    }

    pub fn from_field(f: &Field<f32>, spacing: [f32; 3]) -> Self {
        Self {
            dims: spatial(f.dims()).to_vec(),
            spacing,
            data: Vv1Data::F32(f.data().to_vec()),
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            dims: vec![1],
            spacing: [1.0; 3],
            data: Vv1Data::F32(vec![value]),
        }
    }

    fn spatial_dims(&self, what: &str) -> Result<Dims> {
        let d = &self.dims;
        let s = match d.len() {
            3 => [d[0], d[1], d[2]],
            4 => [d[1], d[2], d[3]],
            r => {
                return Err(Error::format(
                    "VV1 tensor",
                    format!("{what} needs rank 3 or 4, got {r}"),
                ))
            }
        };
        Ok([s[0] as usize, s[1] as usize, s[2] as usize])
    }

    pub fn into_volume(self) -> Result<Volume3D> {
        if self.dims.len() != 3 {
            return Err(Error::format("VV1 tensor", "volume must have rank 3"));
        }
        let dims = self.spatial_dims("volume")?;
        match self.data {
            Vv1Data::F32(v) => Volume3D::new(dims, self.spacing, v),
            Vv1Data::U8(_) => Err(Error::format("VV1 tensor", "volume must have dtype f32")),
        }
    }

    pub fn into_mask(self) -> Result<Mask3D> {
        if self.dims.len() != 3 {
            return Err(Error::format("VV1 tensor", "mask must have rank 3"));
        }
        let dims = self.spatial_dims("mask")?;
        match self.data {
            Vv1Data::U8(v) => Mask3D::new(dims, v),
            Vv1Data::F32(_) => Err(Error::format("VV1 tensor", "mask must have dtype u8")),
        }
    }

    pub fn into_features(self) -> Result<FeatureMap<f32>> {
        if self.dims.len() != 4 {
            return Err(Error::format("VV1 tensor", "feature map must have rank 4"));
        }
        let dims = self.spatial_dims("feature map")?;
        let c = self.dims[0] as usize;
        match self.data {
            Vv1Data::F32(v) => FeatureMap::new(c, dims, v),
            Vv1Data::U8(_) => Err(Error::format(
                "VV1 tensor",
                "feature map must have dtype f32",
            )),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.data.code());
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for s in &self.spacing {
            out.extend_from_slice(&s.to_le_bytes());
        }
        match &self.data {
            Vv1Data::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Vv1Data::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: &str| Error::format("VV1 tensor", reason.to_string());
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4).ok_or_else(|| bad("truncated header"))? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32().ok_or_else(|| bad("truncated header"))?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let dtype = r.u8().ok_or_else(|| bad("truncated header"))?;
        let rank = r.u8().ok_or_else(|| bad("truncated header"))? as usize;
        let dims: Vec<u32> = (0..rank)
            .map(|_| r.u32())
            .collect::<Option<_>>()
            .ok_or_else(|| bad("truncated dims"))?;
        let mut spacing = [0f32; 3];
        for s in &mut spacing {
            *s = f32::from_bits(r.u32().ok_or_else(|| bad("truncated spacing"))?);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .ok_or_else(|| bad("dims overflow"))?;
        let data = match dtype {
            0 => {
                let raw = r
                    .take(n.checked_mul(4).ok_or_else(|| bad("dims overflow"))?)
                    .ok_or_else(|| bad("truncated data"))?;
                Vv1Data::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                )
            }
            1 => Vv1Data::U8(r.take(n).ok_or_else(|| bad("truncated data"))?.to_vec()),
            other => return Err(bad(&format!("unknown dtype code {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Format { reason, .. } => {
                Error::format(path.as_ref().display().to_string(), reason)
            }
            other => other,
        })
    }
}

pub(crate) struct Reader<'a> {
    pub(crate) buf: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    pub(crate) fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    pub(crate) fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    pub(crate) fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
