//! Tensor container: one JSON header line followed by raw little-endian
//! `f32` values in row-major order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use irgrid_core::featurize::{FeatureStack, CHANNEL_NAMES, CHANNEL_UNITS};
use irgrid_core::grid::{DropSource, Grid, IrDropMap};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const MAGIC: &str = "IRGT1";

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad header: {0}")]
    Header(String),
    #[error("payload holds {found} bytes, header implies {expected}")]
    Payload { expected: usize, found: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Meta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub units: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scales: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_dims: Option<[usize; 2]>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct Header {
    magic: String,
    dtype: String,
    order: String,
    byte_order: String,
    shape: Vec<usize>,
    #[serde(default)]
    meta: Meta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorContainer {
    pub shape: Vec<usize>,
    pub meta: Meta,
    pub data: Vec<f32>,
}

impl TensorContainer {
    pub fn new(shape: Vec<usize>, data: Vec<f32>, meta: Meta) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "container shape");
        Self { shape, meta, data }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), FormatError> {
        let header = Header {
            magic: MAGIC.into(),
            dtype: "f32".into(),
            order: "row-major".into(),
            byte_order: "LE".into(),
            shape: self.shape.clone(),
            meta: self.meta.clone(),
        };
        let line = serde_json::to_string(&header).map_err(|e| FormatError::Header(e.to_string()))?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
        let mut buf = Vec::with_capacity(4 * self.data.len());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Reads one container; the reader is left just past its payload.
    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self, FormatError> {
        let mut line = Vec::new();
        r.read_until(b'\n', &mut line)?;
        if line.last() != Some(&b'\n') {
            return Err(FormatError::Header("missing header line".into()));
        }
        let header: Header =
            serde_json::from_slice(&line[..line.len() - 1]).map_err(|e| FormatError::Header(e.to_string()))?;
        if header.magic != MAGIC {
            return Err(FormatError::Header(format!("magic {:?}", header.magic)));
        }
        if header.dtype != "f32" || header.order != "row-major" || header.byte_order != "LE" {
            return Err(FormatError::Header(format!(
                "unsupported layout {}/{}/{}",
                header.dtype, header.order, header.byte_order
            )));
        }
        let count = header
            .shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| FormatError::Header("shape overflows".into()))?;
        let expected = 4 * count;
        let mut bytes = Vec::with_capacity(expected);
        r.by_ref().take(expected as u64).read_to_end(&mut bytes)?;
        if bytes.len() != expected {
            return Err(FormatError::Payload {
                expected,
                found: bytes.len(),
            });
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Self {
            shape: header.shape,
            meta: header.meta,
            data,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Loads a file holding exactly one container.
    pub fn load(path: &Path) -> Result<Self, FormatError> {
        let mut r = BufReader::new(File::open(path)?);
        let c = Self::read_from(&mut r)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(FormatError::Payload {
                expected: 4 * c.data.len(),
                found: 4 * c.data.len() + 1,
            });
        }
        Ok(c)
    }

    pub fn from_features(f: &FeatureStack) -> Self {
        let meta = Meta {
            units: Some(CHANNEL_UNITS.iter().map(|s| s.to_string()).collect()),
            channel_names: Some(CHANNEL_NAMES.iter().map(|s| s.to_string()).collect()),
            scales: Some(f.scales.clone()),
            original_dims: Some([f.original_dims.0, f.original_dims.1]),
            extra: BTreeMap::new(),
        };
        Self::new(vec![f.scales.len(), f.height, f.width], f.data.clone(), meta)
    }

    pub fn to_features(&self) -> Result<FeatureStack, FormatError> {
        let [c, h, w] = self.shape[..] else {
            return Err(FormatError::Header(format!("feature stack needs 3 dims, got {:?}", self.shape)));
        };
        let scales = self.meta.scales.clone().unwrap_or_else(|| vec![1.0; c]);
        if scales.len() != c {
            return Err(FormatError::Header("one scale per channel required".into()));
        }
        let od = self.meta.original_dims.unwrap_or([h, w]);
        Ok(FeatureStack {
            height: h,
            width: w,
            data: self.data.clone(),
            scales,
            original_dims: (od[0], od[1]),
        })
    }

    pub fn from_drop(map: &IrDropMap) -> Self {
        let mut extra = BTreeMap::new();
        let source = match map.source {
            DropSource::Oracle => "oracle",
            DropSource::Predicted => "predicted",
        };
        extra.insert("source".into(), Value::from(source));
        let g = &map.drop;
        Self::new(
            vec![g.height, g.width],
            g.data.iter().map(|&v| v as f32).collect(),
            Meta {
                units: Some(vec!["V".into()]),
                extra,
                ..Meta::default()
            },
        )
    }

    pub fn to_drop(&self) -> Result<IrDropMap, FormatError> {
        let [h, w] = self.shape[..] else {
            return Err(FormatError::Header(format!("drop map needs 2 dims, got {:?}", self.shape)));
        };
        let source = match self.meta.extra.get("source").and_then(Value::as_str) {
            Some("predicted") => DropSource::Predicted,
            _ => DropSource::Oracle,
        };
        Ok(IrDropMap {
            drop: Grid::from_vec(h, w, self.data.iter().map(|&v| v as f64).collect()),
            source,
        })
    }
}
