//! On-disk formats: the `T6D1` tensor container, flat key-value text and
//! CSV tables.
//!
//! Container layout, all integers little-endian:
//!
//! ```text
//! b"T6D1" | u64 B | u64 C | u64 Lx | u64 Ly | u64 Lz | u64 T | u8 dtype (0x01 = f32) | payload
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{ComplexVolume, Tensor6D};

pub const MAGIC: &[u8; 4] = b"T6D1";
pub const DTYPE_F32: u8 = 0x01;
const HEADER_LEN: usize = 4 + 6 * 8 + 1;

pub fn encode_t6d(t: &Tensor6D) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.len());
    out.extend_from_slice(MAGIC);
    for e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    out.push(DTYPE_F32);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_t6d(bytes: &[u8]) -> Result<Tensor6D> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format("T6D header", format!("{} bytes is too short", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format("T6D header", "bad magic"));
    }
    let mut shape = [0usize; 6];
    let mut count: u64 = 1;
    for (i, s) in shape.iter_mut().enumerate() {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[4 + 8 * i..12 + 8 * i]);
        let e = u64::from_le_bytes(b);
        count = count
            .checked_mul(e)
            .ok_or_else(|| Error::format("T6D header", "extent product overflows"))?;
        *s = usize::try_from(e).map_err(|_| Error::format("T6D header", "extent too large"))?;
    }
    let dtype = bytes[HEADER_LEN - 1];
    if dtype != DTYPE_F32 {
        return Err(Error::format("T6D header", format!("unknown dtype tag {dtype:#04x}")));
    }
    let payload = &bytes[HEADER_LEN..];
    if (payload.len() as u64) != count * 4 {
        return Err(Error::format(
            "T6D payload",
            format!("expected {} bytes, found {}", count * 4, payload.len()),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor6D::from_vec(shape, data)
}

pub fn write_t6d(path: impl AsRef<Path>, t: &Tensor6D) -> Result<()> {
    let mut f = fs::File::create(path.as_ref())?;
    f.write_all(&encode_t6d(t))?;
    Ok(())
}

pub fn read_t6d(path: impl AsRef<Path>) -> Result<Tensor6D> {
    let mut bytes = Vec::new();
    fs::File::open(path.as_ref())?.read_to_end(&mut bytes)?;
    decode_t6d(&bytes)
}

fn suffixed(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes `<base>.re` and `<base>.im`.
pub fn write_complex(base: impl AsRef<Path>, v: &ComplexVolume) -> Result<()> {
    write_t6d(suffixed(base.as_ref(), ".re"), &v.re_tensor())?;
    write_t6d(suffixed(base.as_ref(), ".im"), &v.im_tensor())
}

pub fn read_complex(base: impl AsRef<Path>) -> Result<ComplexVolume> {
    let re = read_t6d(suffixed(base.as_ref(), ".re"))?;
    let im = read_t6d(suffixed(base.as_ref(), ".im"))?;
    ComplexVolume::from_tensors(&re, &im)
}

fn csv_error(e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::format("CSV file", format!("{other:?}")),
        }
    } else {
        Error::format("CSV file", e.to_string())
    }
}

/// Writes one CSV row per record with a header taken from the field names.
pub fn write_csv<R: Serialize>(path: impl AsRef<Path>, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(csv_error)?;
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<R>> {
    let mut r = csv::Reader::from_path(path.as_ref()).map_err(csv_error)?;
    r.deserialize().map(|row| row.map_err(csv_error)).collect()
}

/// Flat `key = value` text, one pair per line, `#` starts a comment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues(pub BTreeMap<String, String>);

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = match line.find('#') {
                Some(i) => &line[..i],
                None => line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::format("key-value file", format!("line {}: missing '='", n + 1))
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self(map))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_string())?;
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.0.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::format("key-value file", format!("missing key `{key}`")))
    }

    pub fn parse_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::format("key-value file", format!("bad value `{raw}` for `{key}`")))
    }
}

impl std::fmt::Display for KeyValues {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (k, v) in &self.0 {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}
