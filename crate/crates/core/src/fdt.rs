//! `.fdt` binary tensor container.
//!
//! Layout: the 8-byte magic `FDRLST01`, a little-endian `u32` header length,
//! a JSON header describing every tensor (name, shape, element type, byte
//! offset relative to the payload start, byte length, optional scale record),
//! then the raw little-endian payloads in header order.

use std::path::Path;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::error::{FairError, Result};
use crate::grid::{GridSpec, STTensor, ScaleRecord};
use crate::raster::{Feature, FeatureStack, Origin};

pub const MAGIC: &[u8; 8] = b"FDRLST01";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(dtype: Dtype, bytes: &[u8]) -> Self {
        match dtype {
            Dtype::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                    .collect(),
            ),
            Dtype::F64 => TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                    .collect(),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
    pub scale_record: Option<ScaleRecord>,
}

impl NamedTensor {
    pub fn f64(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            name: name.into(),
            shape,
            data: TensorData::F64(data),
            scale_record: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: Dtype,
    offset: usize,
    nbytes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scale_record: Option<ScaleRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    tensors: Vec<Entry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grid: Option<GridSpec>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FdtContainer {
    pub tensors: Vec<NamedTensor>,
    pub grid: Option<GridSpec>,
    pub meta: serde_json::Value,
}

impl FdtContainer {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|t| {
                if t.shape.iter().product::<usize>() != t.data.len() {
                    return Err(FairError::Shape {
                        expected: format!("{:?}", t.shape),
                        got: format!("{} elements in '{}'", t.data.len(), t.name),
                    });
                }
                let nbytes = t.data.len() * t.data.dtype().size();
                let e = Entry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    dtype: t.data.dtype(),
                    offset,
                    nbytes,
                    scale_record: t.scale_record.clone(),
                };
                offset += nbytes;
                Ok(e)
            })
            .collect::<Result<Vec<_>>>()?;
        let header = Header {
            tensors: entries,
            grid: self.grid.clone(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|source| FairError::Json {
            context: "fdt header".into(),
            source,
        })?;
        let mut out = Vec::with_capacity(12 + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            t.data.write_le(&mut out);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: String| FairError::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing FDRLST01 magic".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = 12usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt(format!("header length {hlen} exceeds file size")))?;
        let header: Header =
            serde_json::from_slice(&bytes[12..body]).map_err(|e| corrupt(format!("bad header: {e}")))?;
        let payload = &bytes[body..];
        let mut expected_offset = 0;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let count: usize = e.shape.iter().product();
            if e.nbytes != count * e.dtype.size() {
                return Err(corrupt(format!("'{}' declares {} bytes for shape {:?}", e.name, e.nbytes, e.shape)));
            }
            if e.offset != expected_offset {
                return Err(corrupt(format!("'{}' offset {} overlaps or leaves a gap", e.name, e.offset)));
            }
            let end = e.offset + e.nbytes;
            if end > payload.len() {
                return Err(corrupt(format!("'{}' payload truncated", e.name)));
            }
            tensors.push(NamedTensor {
                name: e.name,
                shape: e.shape,
                data: TensorData::read_le(e.dtype, &payload[e.offset..end]),
                scale_record: e.scale_record,
            });
            expected_offset = end;
        }
        if expected_offset != payload.len() {
            return Err(corrupt(format!(
                "{} trailing bytes after last tensor",
                payload.len() - expected_offset
            )));
        }
        Ok(Self {
            tensors,
            grid: header.grid,
            meta: header.meta,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| FairError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| FairError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[derive(Serialize, Deserialize)]
struct StackMeta {
    kind: String,
    t: usize,
    start_time: NaiveDateTime,
    origins: Vec<Origin>,
}

/// Packs a feature stack: one `[H, W, T, 1]` f64 tensor per feature.
pub fn stack_to_container(stack: &FeatureStack, extra_meta: serde_json::Value) -> FdtContainer {
    let start_time = stack
        .features
        .first()
        .map(|f| f.tensor.start_time)
        .unwrap_or_default();
    let meta = StackMeta {
        kind: "feature_stack".into(),
        t: stack.t,
        start_time,
        origins: stack.origins(),
    };
    let mut meta = serde_json::to_value(meta).expect("stack meta serializes");
    if let (Some(obj), serde_json::Value::Object(extra)) = (meta.as_object_mut(), extra_meta) {
        obj.extend(extra);
    }
    FdtContainer {
        tensors: stack
            .features
            .iter()
            .map(|f| NamedTensor {
                name: f.name.clone(),
                shape: vec![stack.grid.height, stack.grid.width, stack.t, 1],
                data: TensorData::F64(f.tensor.values.clone()),
                scale_record: f.tensor.scale_record.clone(),
            })
            .collect(),
        grid: Some(stack.grid.clone()),
        meta,
    }
}

pub fn container_to_stack(c: &FdtContainer, path: &Path) -> Result<FeatureStack> {
    let corrupt = |reason: &str| FairError::Corrupt {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    let grid = c.grid.clone().ok_or_else(|| corrupt("feature stack without grid"))?;
    let meta: StackMeta =
        serde_json::from_value(c.meta.clone()).map_err(|_| corrupt("feature stack metadata missing"))?;
    if meta.origins.len() != c.tensors.len() {
        return Err(corrupt("origin list does not match tensor count"));
    }
    let features = c
        .tensors
        .iter()
        .zip(meta.origins)
        .map(|(t, origin)| {
            if t.shape != [grid.height, grid.width, meta.t, 1] {
                return Err(corrupt(&format!("feature '{}' has shape {:?}", t.name, t.shape)));
            }
            let mut tensor = STTensor::new(grid.clone(), meta.t, 1, t.data.to_f64(), meta.start_time)?;
            tensor.scale_record = t.scale_record.clone();
            Ok(Feature {
                name: t.name.clone(),
                origin,
                tensor,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureStack {
        grid,
        t: meta.t,
        features,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> FdtContainer {
        FdtContainer {
            tensors: vec![
                NamedTensor::f64("a", vec![2, 3], vec![1.5, -0.0, f64::MIN_POSITIVE, 3.0, 1e300, -7.25]),
                NamedTensor {
                    name: "b".into(),
                    shape: vec![3],
                    data: TensorData::F32(vec![1.0, f32::EPSILON, -2.5]),
                    scale_record: Some(ScaleRecord {
                        max: vec![4.0],
                        shift: vec![0.0],
                    }),
                },
                NamedTensor::f64("empty", vec![0, 4], vec![]),
            ],
            grid: Some(GridSpec::new(2, 3).unwrap()),
            meta: serde_json::json!({"config_hash": "abc"}),
        }
    }

    #[test]
    fn write_read_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.fdt");
        let c = sample();
        c.write(&path).unwrap();
        let back = FdtContainer::read(&path).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"FDRLST01");
    }

    #[test]
    fn truncated_or_garbled_files_are_rejected() {
        let path = Path::new("mem");
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 5, 11, 20, bytes.len() - 1] {
            assert!(matches!(
                FdtContainer::from_bytes(&bytes[..cut], path),
                Err(FairError::Corrupt { .. })
            ));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(FdtContainer::from_bytes(&bad, path).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_payloads_round_trip(
            a in prop::collection::vec(any::<f64>(), 0..50),
            b in prop::collection::vec(any::<f32>(), 0..50),
        ) {
            let c = FdtContainer {
                tensors: vec![
                    NamedTensor::f64("a", vec![a.len()], a.clone()),
                    NamedTensor { name: "b".into(), shape: vec![b.len()], data: TensorData::F32(b.clone()), scale_record: None },
                ],
                grid: None,
                meta: serde_json::Value::Null,
            };
            let bytes = c.to_bytes().unwrap();
            let back = FdtContainer::from_bytes(&bytes, Path::new("mem")).unwrap();
            let bits = |t: &NamedTensor| match &t.data {
                TensorData::F64(v) => v.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                TensorData::F32(v) => v.iter().map(|x| x.to_bits() as u64).collect(),
            };
            for (x, y) in c.tensors.iter().zip(&back.tensors) {
                prop_assert_eq!(bits(x), bits(y));
            }
        }
    }
}
