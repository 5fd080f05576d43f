//! The VOL1 binary container.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "VOL1"
//! 4       1     dtype: 0 = f32, 1 = f64, 2 = u16, 3 = u8
//! 5       3     reserved, zero
//! 8       4×4   D, H, W, C as u32
//! 24      3×8   spacing (z, y, x) as f64
//! 48      4     attribute count n
//! 52      ...   n × (u32 key length, key bytes, u32 value length, value bytes)
//! ...           payload: C·D·H·W values, channel-major then z, y, x
//! ```
//!
//! All integers and floats are little-endian. Keys and values are UTF-8;
//! attributes are written sorted by key, which makes the header canonical.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::coarse::CoarseDisplacementField;
use crate::error::{Error, Result};
use crate::grid::{FeatureMap, GridShape, LabelVolume, ScalarVolume, VectorField};

pub const MAGIC: &[u8; 4] = b"VOL1";
const FIXED_HEADER: usize = 52;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    U16 = 2,
    U8 = 3,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U16 => 2,
            DType::U8 => 1,
        }
    }

    fn from_code(code: u8) -> Option<DType> {
        Some(match code {
            0 => DType::F32,
            1 => DType::F64,
            2 => DType::U16,
            3 => DType::U8,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U16(Vec<u16>),
    U8(Vec<u8>),
}

impl Payload {
    pub fn dtype(&self) -> DType {
        match self {
            Payload::F32(_) => DType::F32,
            Payload::F64(_) => DType::F64,
            Payload::U16(_) => DType::U16,
            Payload::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::U16(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values widened to f64.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            Payload::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Payload::F64(v) => v.clone(),
            Payload::U16(v) => v.iter().map(|&x| x as f64).collect(),
            Payload::U8(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U8(v) => out.extend_from_slice(v),
        }
    }

    fn read_le(dtype: DType, bytes: &[u8]) -> Payload {
        match dtype {
            DType::F32 => Payload::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => Payload::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U16 => Payload::U16(
                bytes
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U8 => Payload::U8(bytes.to_vec()),
        }
    }
}

/// An in-memory VOL1 container.
#[derive(Clone, Debug, PartialEq)]
pub struct Vol1 {
    pub shape: GridShape,
    pub channels: usize,
    pub attributes: BTreeMap<String, String>,
    pub payload: Payload,
}

impl Vol1 {
    pub fn new(shape: GridShape, channels: usize, payload: Payload) -> Result<Self> {
        if channels == 0 {
            return Err(Error::CorruptContainer("channel count must be >= 1".into()));
        }
        if payload.len() != shape.len() * channels {
            return Err(Error::ShapeMismatch(format!(
                "payload of {} values for {} voxels x {channels} channels",
                payload.len(),
                shape.len()
            )));
        }
        Ok(Vol1 {
            shape,
            channels,
            attributes: BTreeMap::new(),
            payload,
        })
    }

    pub fn with_attribute(mut self, key: &str, value: impl ToString) -> Self {
        self.attributes.insert(key.to_string(), value.to_string());
        self
    }

    pub fn attribute(&self, key: &str) -> Option<&str> {
        self.attributes.get(key).map(String::as_str)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(FIXED_HEADER + self.payload.len() * self.payload.dtype().size());
        out.extend_from_slice(MAGIC);
        out.push(self.payload.dtype() as u8);
        out.extend_from_slice(&[0; 3]);
        for n in self.shape.dims.iter().chain([&self.channels]) {
            out.extend_from_slice(&to_u32(*n, "dimension")?.to_le_bytes());
        }
        for s in self.shape.spacing {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out.extend_from_slice(&to_u32(self.attributes.len(), "attribute count")?.to_le_bytes());
        for (k, v) in &self.attributes {
            for s in [k, v] {
                out.extend_from_slice(&to_u32(s.len(), "attribute length")?.to_le_bytes());
                out.extend_from_slice(s.as_bytes());
            }
        }
        self.payload.write_le(&mut out);
        Ok(out)
    }

    /// Parses a container. `origin` names the source in errors.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::NotVol1(origin.to_path_buf()));
        }
        let mut r = Reader { bytes, pos: 4 };
        let code = r.take(1)?[0];
        let dtype = DType::from_code(code).ok_or_else(|| corrupt(format!("unknown dtype code {code}")))?;
        if r.take(3)? != [0, 0, 0] {
            return Err(corrupt("reserved header bytes are not zero"));
        }
        let mut n = [0usize; 4];
        for v in &mut n {
            *v = r.u32()? as usize;
        }
        let mut spacing = [0.0; 3];
        for s in &mut spacing {
            *s = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        }
        let shape = GridShape::with_spacing([n[0], n[1], n[2]], spacing)
            .map_err(|e| corrupt(format!("bad grid in header: {e}")))?;
        let channels = n[3];
        if channels == 0 {
            return Err(corrupt("channel count is zero"));
        }
        let count = r.u32()?;
        let mut attributes = BTreeMap::new();
        for _ in 0..count {
            let key = r.string()?;
            let value = r.string()?;
            if attributes.insert(key.clone(), value).is_some() {
                return Err(corrupt(format!("duplicate attribute `{key}`")));
            }
        }
        let values = shape
            .len()
            .checked_mul(channels)
            .and_then(|v| v.checked_mul(dtype.size()))
            .ok_or_else(|| corrupt("payload size overflows"))?;
        let rest = &bytes[r.pos..];
        if rest.len() != values {
            return Err(corrupt(format!(
                "payload has {} bytes, header implies {values}",
                rest.len()
            )));
        }
        Ok(Vol1 {
            shape,
            channels,
            attributes,
            payload: Payload::read_le(dtype, rest),
        })
    }

    /// Payload widened to f64, still channel-major.
    fn channel_major(&self) -> Vec<f64> {
        self.payload.to_f64()
    }

    fn expect_channels(&self, want: usize, what: &str) -> Result<()> {
        if self.channels != want {
            return Err(Error::ShapeMismatch(format!(
                "{what} needs {want} channel(s), container has {}",
                self.channels
            )));
        }
        Ok(())
    }
}

fn to_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| corrupt(format!("{what} {n} does not fit in u32")))
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptContainer(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| corrupt(format!("truncated header at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("attribute is not UTF-8"))
    }
}

pub fn read_vol1(path: impl AsRef<Path>) -> Result<Vol1> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| with_path(e, path))?;
    Vol1::from_bytes(&bytes, path)
}

pub fn write_vol1(path: impl AsRef<Path>, vol: &Vol1) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, vol.to_bytes()?).map_err(|e| with_path(e, path))?;
    Ok(())
}

pub(crate) fn with_path(e: std::io::Error, path: &Path) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

/// Conversion between engine types and containers.
pub trait VolData: Sized {
    fn to_vol1(&self) -> Result<Vol1>;
    fn from_vol1(vol: &Vol1) -> Result<Self>;

    fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_vol1(&read_vol1(path)?)
    }

    fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_vol1(path, &self.to_vol1()?)
    }
}

impl VolData for ScalarVolume {
    fn to_vol1(&self) -> Result<Vol1> {
        Vol1::new(self.shape, 1, Payload::F64(self.values.clone()))
    }

    fn from_vol1(vol: &Vol1) -> Result<Self> {
        vol.expect_channels(1, "scalar volume")?;
        ScalarVolume::new(vol.shape, vol.channel_major())
    }
}

impl VolData for LabelVolume {
    fn to_vol1(&self) -> Result<Vol1> {
        let labels = self
            .labels
            .iter()
            .map(|&l| u16::try_from(l).map_err(|_| corrupt(format!("label {l} exceeds u16"))))
            .collect::<Result<Vec<_>>>()?;
        Vol1::new(self.shape, 1, Payload::U16(labels))
    }

    fn from_vol1(vol: &Vol1) -> Result<Self> {
        vol.expect_channels(1, "label volume")?;
        let labels = match &vol.payload {
            Payload::U16(v) => v.iter().map(|&l| l as u32).collect(),
            Payload::U8(v) => v.iter().map(|&l| l as u32).collect(),
            _ => return Err(corrupt("label volumes must be u8 or u16")),
        };
        LabelVolume::new(vol.shape, labels)
    }
}

impl VolData for FeatureMap {
    fn to_vol1(&self) -> Result<Vol1> {
        let c = self.channels();
        let n = self.shape.len();
        let mut out = vec![0.0; n * c];
        for (i, v) in self.data().chunks_exact(c).enumerate() {
            for (ch, &x) in v.iter().enumerate() {
                out[ch * n + i] = x;
            }
        }
        Vol1::new(self.shape, c, Payload::F64(out))
    }

    /// Vectors are re-normalized on load, so f32 containers are accepted.
    fn from_vol1(vol: &Vol1) -> Result<Self> {
        if matches!(vol.payload, Payload::U16(_) | Payload::U8(_)) {
            return Err(corrupt("feature maps must be f32 or f64"));
        }
        let c = vol.channels;
        let n = vol.shape.len();
        let src = vol.channel_major();
        let mut data = vec![0.0; n * c];
        for ch in 0..c {
            for i in 0..n {
                data[i * c + ch] = src[ch * n + i];
            }
        }
        FeatureMap::normalized(vol.shape, c, data)
    }
}

impl<K> VolData for VectorField<K> {
    fn to_vol1(&self) -> Result<Vol1> {
        let n = self.shape.len();
        let mut out = vec![0.0; 3 * n];
        for (i, v) in self.data.iter().enumerate() {
            for a in 0..3 {
                out[a * n + i] = v[a];
            }
        }
        Vol1::new(self.shape, 3, Payload::F64(out))
    }

    fn from_vol1(vol: &Vol1) -> Result<Self> {
        vol.expect_channels(3, "vector field")?;
        let n = vol.shape.len();
        let src = vol.channel_major();
        VectorField::new(vol.shape, (0..n).map(|i| [src[i], src[n + i], src[2 * n + i]]).collect())
    }
}

impl VolData for CoarseDisplacementField {
    fn to_vol1(&self) -> Result<Vol1> {
        Ok(self.lattice.to_vol1()?.with_attribute("stride", self.stride))
    }

    fn from_vol1(vol: &Vol1) -> Result<Self> {
        let stride = vol
            .attribute("stride")
            .ok_or_else(|| corrupt("coarse field without `stride` attribute"))?
            .parse()
            .map_err(|_| corrupt("`stride` attribute is not an integer"))?;
        CoarseDisplacementField::new(stride, VectorField::from_vol1(vol)?)
    }
}

pub(crate) fn sibling(base: &Path, name: &str) -> PathBuf {
    base.parent().unwrap_or(Path::new("")).join(name)
}
