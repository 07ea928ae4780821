//! `SPDQ` model container.
//!
//! Little-endian layout:
//!
//! ```text
//! magic        4 bytes  "SPDQ"
//! version      u32
//! count        u32
//! table        count entries:
//!   name_len u16, name (UTF-8)
//!   ndim u8, dims u32 * ndim
//!   kind u8                    0 = f32, 1 = packed
//!   [packed only] bits u8, group_size u32, scale_bits u8, scale_group_size u32,
//!                 rounding u8, zero_point_bits u8      (0 means "unset")
//!   offset u64, length u64     relative to the payload start
//! payload_len  u64
//! payload      payload_len bytes
//! crc32        u32 over the payload
//! ```

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::model::{LayerQuant, ModelConfig, ModelError, ToyVlm, LAYER_NAMES};
use crate::quant::{PackedTensor, QuantError, QuantSpec, Rounding};

pub const MAGIC: [u8; 4] = *b"SPDQ";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("bad magic {found:?}; not an SPDQ container")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported container version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("payload checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },
    #[error("container truncated at byte {offset}: need {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("malformed container: {0}")]
    Malformed(String),
    #[error("container is missing tensor {0:?}")]
    MissingTensor(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Tensor),
    Packed(PackedTensor),
}

impl TensorData {
    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::Packed(p) => &p.shape,
        }
    }

    fn payload(&self) -> Vec<u8> {
        match self {
            TensorData::F32(t) => t.data().iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::Packed(p) => p.payload.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub data: TensorData,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub entries: Vec<Entry>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        if self.bytes.len() - self.pos < n {
            return Err(ContainerError::Truncated {
                offset: self.pos,
                needed: n - (self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ContainerError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ContainerError> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

fn opt_u8(v: u8) -> Option<u8> {
    (v != 0).then_some(v)
}

fn write_spec(out: &mut Vec<u8>, s: &QuantSpec) {
    out.push(s.bits);
    out.extend_from_slice(&(s.group_size as u32).to_le_bytes());
    out.push(s.scale_bits.unwrap_or(0));
    out.extend_from_slice(&(s.scale_group_size.unwrap_or(0) as u32).to_le_bytes());
    out.push(match s.rounding {
        Rounding::NearestEven => 0,
        Rounding::Floor => 1,
    });
    out.push(s.zero_point_bits.unwrap_or(0));
}

fn read_spec(r: &mut Reader) -> Result<QuantSpec, ContainerError> {
    let bits = r.u8()?;
    let group_size = r.u32()? as usize;
    let scale_bits = opt_u8(r.u8()?);
    let sg = r.u32()? as usize;
    let rounding = match r.u8()? {
        0 => Rounding::NearestEven,
        1 => Rounding::Floor,
        other => {
            return Err(ContainerError::Malformed(format!(
                "unknown rounding tag {other}"
            )))
        }
    };
    let zero_point_bits = opt_u8(r.u8()?);
    let spec = QuantSpec {
        bits,
        group_size,
        scale_bits,
        scale_group_size: (sg != 0).then_some(sg),
        rounding,
        zero_point_bits,
    };
    spec.validate()?;
    Ok(spec)
}

/// Byte accounting of one stored tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorSize {
    pub name: String,
    pub shape: Vec<usize>,
    /// `"f32"` or the spec's display name.
    pub format: String,
    pub elements: usize,
    pub bytes: usize,
    pub bits_per_weight: f64,
    /// Average bitwidth predicted by the spec, for packed tensors.
    pub spec_bits_per_weight: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub tensors: Vec<TensorSize>,
    pub payload_bytes: usize,
    /// Magic, version, table, length prefix and CRC.
    pub overhead_bytes: usize,
    pub file_bytes: usize,
}

impl Container {
    pub fn push(&mut self, name: impl Into<String>, data: TensorData) {
        self.entries.push(Entry {
            name: name.into(),
            data,
        });
    }

    pub fn get(&self, name: &str) -> Option<&TensorData> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &e.data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payloads: Vec<Vec<u8>> = self.entries.iter().map(|e| e.data.payload()).collect();
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (e, p) in self.entries.iter().zip(&payloads) {
            let name = e.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            let shape = e.data.shape();
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match &e.data {
                TensorData::F32(_) => out.push(0),
                TensorData::Packed(pk) => {
                    out.push(1);
                    write_spec(&mut out, &pk.spec);
                }
            }
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(p.len() as u64).to_le_bytes());
            offset += p.len() as u64;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        let mut crc = crc32fast::Hasher::new();
        for p in &payloads {
            out.extend_from_slice(p);
            crc.update(p);
        }
        out.extend_from_slice(&crc.finalize().to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        Ok(parse(bytes)?.0)
    }

    /// Writes to a temporary file next to `path`, then renames it into place.
    pub fn save(&self, path: &Path) -> Result<(), ContainerError> {
        write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ContainerError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Quantized layers are stored packed; everything else as f32.
    pub fn from_model(model: &ToyVlm) -> Self {
        let mut c = Container::default();
        for l in model.layers() {
            let data = match &l.quant {
                LayerQuant::Fixed(q) => TensorData::Packed(q.pack(l.weight.name.clone())),
                _ => TensorData::F32(l.weight.tensor.clone()),
            };
            c.push(l.weight.name.clone(), data);
            c.push(l.bias.name.clone(), TensorData::F32(l.bias.tensor.clone()));
        }
        c.push(
            model.embed.name.clone(),
            TensorData::F32(model.embed.tensor.clone()),
        );
        c
    }

    /// Rebuilds the model; dimensions are read from the stored shapes.
    pub fn to_model(&self) -> Result<ToyVlm, ContainerError> {
        let shape = |name: &str| -> Result<Vec<usize>, ContainerError> {
            self.get(name)
                .map(|d| d.shape().to_vec())
                .ok_or_else(|| ContainerError::MissingTensor(name.to_string()))
        };
        let bad = |name: &str, s: &[usize]| {
            ContainerError::Malformed(format!("tensor {name} has shape {s:?}"))
        };
        let dims = |name: &str| -> Result<(usize, usize), ContainerError> {
            let s = shape(name)?;
            match s[..] {
                [a, b] => Ok((a, b)),
                _ => Err(bad(name, &s)),
            }
        };
        let (vision_hidden, image_dim) = dims("vision.fc1.weight")?;
        let (vision_out, _) = dims("vision.fc2.weight")?;
        let (projector_out, _) = dims("projector.weight")?;
        let (tokens, token_dim) = dims("language.embed")?;
        let (language_hidden, _) = dims("language.fc1.weight")?;
        let (classes, _) = dims("language.fc2.weight")?;
        let cfg = ModelConfig {
            image_dim,
            vision_hidden,
            vision_out,
            projector_out,
            tokens,
            token_dim,
            language_hidden,
            classes,
        };
        let mut model = ToyVlm::new(cfg, 0);
        let f32_tensor = |name: &str, expect: &[usize]| -> Result<Tensor, ContainerError> {
            match self.get(name) {
                Some(TensorData::F32(t)) if t.shape() == expect => Ok(t.clone()),
                Some(d) => Err(bad(name, d.shape())),
                None => Err(ContainerError::MissingTensor(name.to_string())),
            }
        };
        for layer in LAYER_NAMES {
            let (wname, bname) = (format!("{layer}.weight"), format!("{layer}.bias"));
            let l = model.layer(layer)?;
            let (wshape, bshape) = (
                l.weight.tensor.shape().to_vec(),
                l.bias.tensor.shape().to_vec(),
            );
            let bias = f32_tensor(&bname, &bshape)?;
            match self.get(&wname) {
                Some(TensorData::Packed(p)) => {
                    if p.shape != wshape {
                        return Err(bad(&wname, &p.shape));
                    }
                    let q = p.unpack()?;
                    model.fix_layer(layer, q)?;
                }
                _ => {
                    let w = f32_tensor(&wname, &wshape)?;
                    model.layer_mut(layer)?.weight.tensor = w;
                }
            }
            model.layer_mut(layer)?.bias.tensor = bias;
        }
        model.embed.tensor = f32_tensor("language.embed", &[tokens, token_dim])?;
        Ok(model)
    }
}

/// Parses `bytes`, returning the container and the payload length.
fn parse(bytes: &[u8]) -> Result<(Container, usize), ContainerError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4).map_err(|_| ContainerError::BadMagic {
        found: bytes[..bytes.len().min(4)].to_vec(),
    })?;
    if magic != MAGIC {
        return Err(ContainerError::BadMagic {
            found: magic.to_vec(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ContainerError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let count = r.u32()? as usize;
    struct Row {
        name: String,
        shape: Vec<usize>,
        spec: Option<QuantSpec>,
        offset: u64,
        length: u64,
    }
    let mut rows = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = r.u16()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| ContainerError::Malformed("tensor name is not UTF-8".into()))?;
        let ndim = r.u8()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let spec = match r.u8()? {
            0 => None,
            1 => Some(read_spec(&mut r)?),
            k => {
                return Err(ContainerError::Malformed(format!(
                    "tensor {name}: unknown kind {k}"
                )))
            }
        };
        let offset = r.u64()?;
        let length = r.u64()?;
        rows.push(Row {
            name,
            shape,
            spec,
            offset,
            length,
        });
    }
    let payload_len = r.u64()? as usize;
    let payload = r.take(payload_len)?;
    let stored = r.u32()?;
    if r.pos != bytes.len() {
        return Err(ContainerError::Malformed(format!(
            "{} trailing bytes after checksum",
            bytes.len() - r.pos
        )));
    }
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(ContainerError::Crc { stored, computed });
    }

    let mut end = 0u64;
    let mut entries = Vec::with_capacity(rows.len());
    for row in rows {
        if row.offset != end
            || row
                .offset
                .checked_add(row.length)
                .is_none_or(|e| e > payload_len as u64)
        {
            return Err(ContainerError::Malformed(format!(
                "tensor {} at [{}, +{}) overlaps or leaves the {payload_len}-byte payload",
                row.name, row.offset, row.length
            )));
        }
        end = row.offset + row.length;
        let slice = &payload[row.offset as usize..end as usize];
        let data =
            match row.spec {
                None => {
                    if slice.len() % 4 != 0 {
                        return Err(ContainerError::Malformed(format!(
                            "tensor {}: f32 payload length",
                            row.name
                        )));
                    }
                    let values = slice
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect();
                    TensorData::F32(Tensor::new(row.shape.clone(), values).map_err(|e| {
                        ContainerError::Malformed(format!("tensor {}: {e}", row.name))
                    })?)
                }
                Some(spec) => {
                    let p = PackedTensor {
                        name: row.name.clone(),
                        shape: row.shape.clone(),
                        spec,
                        payload: slice.to_vec(),
                    };
                    p.unpack()?;
                    TensorData::Packed(p)
                }
            };
        entries.push(Entry {
            name: row.name,
            data,
        });
    }
    if end != payload_len as u64 {
        return Err(ContainerError::Malformed(
            "payload has unreferenced bytes".into(),
        ));
    }
    Ok((Container { entries }, payload_len))
}

/// Per-tensor and total byte sizes of the container at `path`.
pub fn size_report(path: &Path) -> Result<SizeReport, ContainerError> {
    let bytes = std::fs::read(path)?;
    let (c, payload_bytes) = parse(&bytes)?;
    let tensors = c
        .entries
        .iter()
        .map(|e| {
            let elements: usize = e.data.shape().iter().product();
            let bytes = e.data.payload().len();
            let (format, spec_bpw) = match &e.data {
                TensorData::F32(_) => ("f32".to_string(), None),
                TensorData::Packed(p) => (p.spec.to_string(), Some(p.spec.average_bitwidth())),
            };
            TensorSize {
                name: e.name.clone(),
                shape: e.data.shape().to_vec(),
                format,
                elements,
                bytes,
                bits_per_weight: if elements == 0 {
                    0.0
                } else {
                    bytes as f64 * 8.0 / elements as f64
                },
                spec_bits_per_weight: spec_bpw,
            }
        })
        .collect();
    Ok(SizeReport {
        tensors,
        payload_bytes,
        overhead_bytes: bytes.len() - payload_bytes,
        file_bytes: bytes.len(),
    })
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
