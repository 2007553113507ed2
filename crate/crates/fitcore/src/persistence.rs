//! Bit-exact checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic          4 bytes  "FTBC"
//! format_version u32      currently 1
//! epoch_counter  u64
//! section_count  u32
//! sections, each:
//!   kind         u8       1 model parameter | 2 optimizer scalar
//!                         | 3 optimizer buffer | 4 callback payload
//!   name         u32 length + UTF-8 bytes
//!   rank         u32
//!   dims         rank x u64
//!   payload      element-count x f64 bit patterns (kinds 1-3), or
//!                u64 length + raw bytes (kind 4)
//! ```
//!
//! Sections are written sorted by kind then name, so identical records
//! serialize to identical bytes. Float payloads round-trip every bit
//! pattern, NaNs included. Writes go to a sibling temporary file that is
//! renamed into place, so a crash never leaves a truncated checkpoint at
//! the target path.

use std::fs;
use std::path::Path;

use crate::autodiff::Shape;
use crate::error::{Error, Result};
use crate::optim::SgdState;
use crate::trial::TrialStateRecord;

pub const MAGIC: [u8; 4] = *b"FTBC";
pub const FORMAT_VERSION: u32 = 1;

const KIND_PARAMETER: u8 = 1;
const KIND_OPTIMIZER_SCALAR: u8 = 2;
const KIND_OPTIMIZER_BUFFER: u8 = 3;
const KIND_CALLBACK_PAYLOAD: u8 = 4;

enum SectionPayload {
    Floats(Vec<f64>),
    Bytes(Vec<u8>),
}

struct Section {
    kind: u8,
    name: String,
    dims: Vec<u64>,
    payload: SectionPayload,
}

/// Serializes a record to the checkpoint byte layout.
pub fn to_bytes(record: &TrialStateRecord) -> Vec<u8> {
    let mut sections: Vec<Section> = Vec::new();
    for (name, shape, values) in &record.parameters {
        sections.push(Section {
            kind: KIND_PARAMETER,
            name: name.clone(),
            dims: shape.dims().iter().map(|&d| d as u64).collect(),
            payload: SectionPayload::Floats(values.clone()),
        });
    }
    for (name, value) in [
        ("learning_rate", record.optimizer.learning_rate),
        ("momentum", record.optimizer.momentum),
    ] {
        sections.push(Section {
            kind: KIND_OPTIMIZER_SCALAR,
            name: name.to_string(),
            dims: Vec::new(),
            payload: SectionPayload::Floats(vec![value]),
        });
    }
    for (name, shape, buffer) in &record.optimizer.velocity {
        sections.push(Section {
            kind: KIND_OPTIMIZER_BUFFER,
            name: name.clone(),
            dims: shape.dims().iter().map(|&d| d as u64).collect(),
            payload: SectionPayload::Floats(buffer.clone()),
        });
    }
    for (kind, payload) in &record.callbacks {
        // First byte flags whether the callback carried a payload, so a
        // payload-less callback still occupies a section and the loaded
        // record reproduces the callback roster exactly.
        let mut bytes = Vec::new();
        match payload {
            Some(p) => {
                bytes.push(1);
                bytes.extend_from_slice(p);
            }
            None => bytes.push(0),
        }
        sections.push(Section {
            kind: KIND_CALLBACK_PAYLOAD,
            name: kind.clone(),
            dims: Vec::new(),
            payload: SectionPayload::Bytes(bytes),
        });
    }
    sections.sort_by(|a, b| (a.kind, a.name.as_str()).cmp(&(b.kind, b.name.as_str())));

    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&record.completed_epochs.to_le_bytes());
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for s in &sections {
        out.push(s.kind);
        out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
        out.extend_from_slice(s.name.as_bytes());
        out.extend_from_slice(&(s.dims.len() as u32).to_le_bytes());
        for d in &s.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &s.payload {
            SectionPayload::Floats(values) => {
                for v in values {
                    out.extend_from_slice(&v.to_bits().to_le_bytes());
                }
            }
            SectionPayload::Bytes(bytes) => {
                out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
                out.extend_from_slice(bytes);
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn corrupt<T>(&self) -> Result<T> {
        Err(Error::Corrupt {
            offset: self.offset as u64,
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return self.corrupt();
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let at = self.offset;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Corrupt { offset: at as u64 })
    }
}

/// Parses checkpoint bytes back into a record.
pub fn from_bytes(bytes: &[u8]) -> Result<TrialStateRecord> {
    let mut r = Reader { bytes, offset: 0 };
    if r.take(4).map(|m| m != MAGIC).unwrap_or(true) {
        return Err(Error::NotACheckpoint);
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let completed_epochs = r.u64()?;
    let section_count = r.u32()?;

    let mut parameters = Vec::new();
    let mut learning_rate = None;
    let mut momentum = None;
    let mut velocity = Vec::new();
    let mut callbacks = Vec::new();

    for _ in 0..section_count {
        let kind_at = r.offset;
        let kind = r.u8()?;
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64()? as usize);
        }
        match kind {
            KIND_PARAMETER | KIND_OPTIMIZER_SCALAR | KIND_OPTIMIZER_BUFFER => {
                let shape = Shape::new(dims);
                let count = shape.element_count();
                let mut values = Vec::with_capacity(count);
                for _ in 0..count {
                    values.push(r.f64()?);
                }
                match kind {
                    KIND_PARAMETER => parameters.push((name, shape, values)),
                    KIND_OPTIMIZER_BUFFER => velocity.push((name, shape, values)),
                    _ => match name.as_str() {
                        "learning_rate" => learning_rate = Some(values[0]),
                        "momentum" => momentum = Some(values[0]),
                        other => {
                            return Err(Error::LoadMismatch(format!(
                                "unknown optimizer scalar '{other}'"
                            )))
                        }
                    },
                }
            }
            KIND_CALLBACK_PAYLOAD => {
                let len = r.u64()? as usize;
                let at = r.offset;
                let raw = r.take(len)?;
                let payload = match raw.first() {
                    Some(0) => None,
                    Some(1) => Some(raw[1..].to_vec()),
                    _ => return Err(Error::Corrupt { offset: at as u64 }),
                };
                callbacks.push((name, payload));
            }
            _ => {
                return Err(Error::Corrupt {
                    offset: kind_at as u64,
                })
            }
        }
    }
    if r.offset != bytes.len() {
        return r.corrupt();
    }
    let learning_rate = learning_rate
        .ok_or_else(|| Error::LoadMismatch("missing learning_rate scalar".into()))?;
    let momentum =
        momentum.ok_or_else(|| Error::LoadMismatch("missing momentum scalar".into()))?;
    Ok(TrialStateRecord {
        completed_epochs,
        parameters,
        optimizer: SgdState {
            learning_rate,
            momentum,
            velocity,
        },
        callbacks,
    })
}

/// Writes a record to `path` via a temporary sibling file and rename.
pub fn save(record: &TrialStateRecord, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(record);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, &bytes).map_err(|source| Error::Io {
        path: tmp.clone(),
        source,
    })?;
    fs::rename(&tmp, path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a record from `path`, validating magic, version, and structure.
pub fn load(path: impl AsRef<Path>) -> Result<TrialStateRecord> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes)
}
