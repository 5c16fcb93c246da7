//! The `.dqb` tensor container.
//!
//! Layout:
//!
//! ```text
//! [u64 LE header length N][N bytes JSON header][zero pad to 8][payloads...]
//! ```
//!
//! The header maps each tensor name to `{"dtype", "shape", "offset", "nbytes"}`.
//! Offsets are relative to the start of the payload region, which begins at the
//! first 8-byte boundary after the header. Payloads are little-endian, row-major,
//! laid out in name order, each starting on an 8-byte boundary with zero padding
//! in between. Names are kept sorted so that serialization is deterministic.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ALIGNMENT: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
    U8,
    I64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
            DType::I64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
            DType::U8 => "u8",
            DType::I64 => "i64",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            "u8" => Ok(DType::U8),
            "i64" => Ok(DType::I64),
            other => Err(Error::UnknownDtype(other.to_string())),
        }
    }
}

#[derive(Debug, Clone)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    I64(Vec<i64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U8(_) => DType::U8,
            TensorData::I64(_) => DType::I64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
            TensorData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn from_le(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(bytes.to_vec()),
            DType::I64 => TensorData::I64(
                bytes
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        }
    }

    fn all_finite(&self) -> bool {
        match self {
            TensorData::F32(v) => v.iter().all(|x| x.is_finite()),
            TensorData::F64(v) => v.iter().all(|x| x.is_finite()),
            TensorData::U8(_) | TensorData::I64(_) => true,
        }
    }
}

/// A dense row-major tensor.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

fn numel(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let n = numel(&shape).ok_or_else(|| Error::Shape(format!("shape {shape:?} overflows")))?;
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(shape, TensorData::F64(data))
    }

    pub fn u8(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Self::new(shape, TensorData::U8(data))
    }

    pub fn i64(shape: Vec<usize>, data: Vec<i64>) -> Result<Self> {
        Self::new(shape, TensorData::I64(data))
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn nbytes(&self) -> usize {
        self.numel() * self.dtype().size()
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.nbytes());
        self.data.write_le(&mut out);
        out
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<&[f64]> {
        match &self.data {
            TensorData::F64(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<&[i64]> {
        match &self.data {
            TensorData::I64(v) => Some(v),
            _ => None,
        }
    }
}

/// Bit-level equality: NaN payloads compare equal to themselves.
impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.dtype() == other.dtype()
            && self.shape == other.shape
            && self.to_le_bytes() == other.to_le_bytes()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WriteOptions {
    /// Reject NaN and infinities in floating-point tensors.
    pub strict_finite: bool,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<u64>,
    offset: u64,
    nbytes: u64,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGNMENT) * ALIGNMENT
}

/// Named tensors, serialized in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorBundle {
    entries: BTreeMap<String, Tensor>,
}

impl TensorBundle {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a tensor, returning the previous one.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.entries.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Invalid(format!("bundle has no tensor `{name}`")))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Names starting with `prefix`, in sorted order.
    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries
            .range(prefix.to_string()..)
            .map(|(k, _)| k.as_str())
            .take_while(move |k| k.starts_with(prefix))
    }

    pub fn merge(&mut self, other: TensorBundle) {
        self.entries.extend(other.entries);
    }

    pub fn to_bytes(&self, opts: WriteOptions) -> Result<Vec<u8>> {
        let mut header = BTreeMap::new();
        let mut offset = 0usize;
        for (name, tensor) in &self.entries {
            if opts.strict_finite && !tensor.data.all_finite() {
                return Err(Error::NonFinite(format!("tensor `{name}`")));
            }
            offset = align_up(offset);
            header.insert(
                name.clone(),
                HeaderEntry {
                    dtype: tensor.dtype().as_str().to_string(),
                    shape: tensor.shape.iter().map(|&d| d as u64).collect(),
                    offset: offset as u64,
                    nbytes: tensor.nbytes() as u64,
                },
            );
            offset += tensor.nbytes();
        }
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;

        let payload_start = align_up(8 + json.len());
        let mut out = Vec::with_capacity(payload_start + offset);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.resize(payload_start, 0);
        for tensor in self.entries.values() {
            out.resize(payload_start + align_up(out.len() - payload_start), 0);
            tensor.data.write_le(&mut out);
        }
        Ok(out)
    }

    pub fn write_to<W: Write>(&self, mut writer: W, opts: WriteOptions) -> Result<()> {
        writer.write_all(&self.to_bytes(opts)?)?;
        writer.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.save_with(path, WriteOptions::default())
    }

    pub fn save_with(&self, path: impl AsRef<Path>, opts: WriteOptions) -> Result<()> {
        let file = File::create(path)?;
        self.write_to(BufWriter::new(file), opts)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Truncated(format!(
                "{} bytes is shorter than the 8-byte length prefix",
                bytes.len()
            )));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|n| n.checked_add(8))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| {
                Error::Truncated(format!(
                    "header length {header_len} exceeds file size {}",
                    bytes.len()
                ))
            })?;
        let header: BTreeMap<String, HeaderEntry> = serde_json::from_slice(&bytes[8..header_end])
            .map_err(|e| Error::Format(format!("header is not valid JSON: {e}")))?;

        let payload = bytes.get(align_up(header_end)..).unwrap_or(&[]);
        let mut entries = BTreeMap::new();
        for (name, entry) in header {
            let dtype = DType::parse(&entry.dtype)?;
            let shape: Vec<usize> = entry
                .shape
                .iter()
                .map(|&d| usize::try_from(d))
                .collect::<Result<_, _>>()
                .map_err(|_| Error::Format(format!("tensor `{name}`: extent too large")))?;
            let expected = numel(&shape)
                .and_then(|n| n.checked_mul(dtype.size()))
                .ok_or_else(|| Error::Format(format!("tensor `{name}`: shape overflows")))?;
            if entry.nbytes != expected as u64 {
                return Err(Error::Format(format!(
                    "tensor `{name}`: nbytes {} does not match shape {:?} of {}",
                    entry.nbytes,
                    shape,
                    dtype.as_str()
                )));
            }
            let start = usize::try_from(entry.offset).ok();
            let range = start
                .and_then(|s| s.checked_add(expected).map(|e| s..e))
                .filter(|r| r.end <= payload.len())
                .ok_or_else(|| {
                    Error::Truncated(format!(
                        "tensor `{name}` spans bytes {}..{} but payload holds {}",
                        entry.offset,
                        entry.offset.saturating_add(entry.nbytes),
                        payload.len()
                    ))
                })?;
            let data = TensorData::from_le(dtype, &payload[range]);
            entries.insert(name, Tensor { shape, data });
        }
        Ok(Self { entries })
    }

    pub fn read_from<R: Read>(mut reader: R) -> Result<Self> {
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_bundle_layout() {
        let bytes = TensorBundle::new().to_bytes(WriteOptions::default()).unwrap();
        assert_eq!(&bytes[..8], &2u64.to_le_bytes());
        assert_eq!(&bytes[8..10], b"{}");
        assert_eq!(bytes.len(), 16);
        assert!(bytes[10..].iter().all(|&b| b == 0));
        assert!(TensorBundle::from_bytes(&bytes).unwrap().is_empty());
    }

    #[test]
    fn header_records_nbytes() {
        let mut b = TensorBundle::new();
        b.insert("w", Tensor::f32(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let bytes = b.to_bytes(WriteOptions::default()).unwrap();
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + n]).unwrap();
        assert_eq!(header["w"]["nbytes"], 16);
        assert_eq!(header["w"]["dtype"], "f32");
        assert_eq!(header["w"]["shape"], serde_json::json!([2, 2]));
    }

    #[test]
    fn reads_hand_built_file() {
        let json = br#"{"name":{"dtype":"u8","shape":[3],"offset":0,"nbytes":3}}"#;
        let mut bytes = (json.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(json);
        while bytes.len() % 8 != 0 {
            bytes.push(0);
        }
        bytes.extend_from_slice(&[1, 2, 3]);
        let b = TensorBundle::from_bytes(&bytes).unwrap();
        let t = b.get("name").unwrap();
        assert_eq!(t.shape(), &[3]);
        assert_eq!(t.as_u8().unwrap(), &[1, 2, 3]);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut b = TensorBundle::new();
        b.insert("x", Tensor::f64(vec![4], vec![1.0; 4]).unwrap());
        let bytes = b.to_bytes(WriteOptions::default()).unwrap();
        let err = TensorBundle::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::Truncated(_)), "{err}");

        let err = TensorBundle::from_bytes(&bytes[..5]).unwrap_err();
        assert!(matches!(err, Error::Truncated(_)));
    }

    #[test]
    fn nbytes_mismatch_and_unknown_dtype() {
        let build = |json: &[u8]| {
            let mut bytes = (json.len() as u64).to_le_bytes().to_vec();
            bytes.extend_from_slice(json);
            bytes.resize(align_up(bytes.len()) + 16, 0);
            bytes
        };
        let err = TensorBundle::from_bytes(&build(
            br#"{"a":{"dtype":"f32","shape":[2],"offset":0,"nbytes":4}}"#,
        ))
        .unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        let err = TensorBundle::from_bytes(&build(
            br#"{"a":{"dtype":"bf16","shape":[2],"offset":0,"nbytes":4}}"#,
        ))
        .unwrap_err();
        assert!(matches!(err, Error::UnknownDtype(ref d) if d == "bf16"));
    }

    #[test]
    fn strict_mode_rejects_nan() {
        let mut b = TensorBundle::new();
        b.insert("x", Tensor::f32(vec![2], vec![1.0, f32::NAN]).unwrap());
        assert!(b.to_bytes(WriteOptions::default()).is_ok());
        let err = b.to_bytes(WriteOptions { strict_finite: true }).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn payloads_are_aligned() {
        let mut b = TensorBundle::new();
        b.insert("a", Tensor::u8(vec![3], vec![9, 9, 9]).unwrap());
        b.insert("b", Tensor::f64(vec![1], vec![2.5]).unwrap());
        let bytes = b.to_bytes(WriteOptions::default()).unwrap();
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + n]).unwrap();
        assert_eq!(header["a"]["offset"], 0);
        assert_eq!(header["b"]["offset"], 8);
        let start = align_up(8 + n);
        assert_eq!(&bytes[start + 3..start + 8], &[0; 5]);
        assert_eq!(TensorBundle::from_bytes(&bytes).unwrap(), b);
    }

    fn arb_tensor() -> impl Strategy<Value = Tensor> {
        prop::collection::vec(0usize..4, 0..3).prop_flat_map(|shape| {
            let n: usize = shape.iter().product();
            let s1 = shape.clone();
            let s2 = shape.clone();
            let s3 = shape.clone();
            prop_oneof![
                prop::collection::vec(any::<f32>(), n).prop_map(move |v| Tensor::f32(s1.clone(), v).unwrap()),
                prop::collection::vec(any::<f64>(), n).prop_map(move |v| Tensor::f64(s2.clone(), v).unwrap()),
                prop::collection::vec(any::<u8>(), n).prop_map(move |v| Tensor::u8(s3.clone(), v).unwrap()),
                prop::collection::vec(any::<i64>(), n).prop_map(move |v| Tensor::i64(shape.clone(), v).unwrap()),
            ]
        })
    }

    proptest! {
        #[test]
        fn write_read_write_is_a_fixed_point(
            tensors in prop::collection::btree_map("[a-z/0-9é]{1,12}", arb_tensor(), 0..6)
        ) {
            let mut b = TensorBundle::new();
            for (k, v) in tensors {
                b.insert(k, v);
            }
            let bytes = b.to_bytes(WriteOptions::default()).unwrap();
            let back = TensorBundle::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &b);
            prop_assert_eq!(back.to_bytes(WriteOptions::default()).unwrap(), bytes);
        }
    }
}
