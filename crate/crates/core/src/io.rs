//! On-disk formats.
//!
//! Volumes, projections and square matrices share one container: an ASCII
//! header of `key=value` lines between a magic line and `end`, followed by
//! the samples as raw little-endian `float32`, x (or column) fastest.
//!
//! ```text
//! EPVSVOL1
//! dtype=float32-le
//! kind=volume
//! shape=64 64 64
//! pitch=1
//! creator=epvs 0.1.0
//! end
//! <64·64·64·4 bytes>
//! ```
//!
//! Projections carry `shape=rows cols` and an `angle=` line. Every write goes
//! to a temporary file in the destination directory and is renamed into
//! place.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::scoring::DistanceMatrix;
use crate::volume::{Projection, Shape3, Volume};

pub const MAGIC: &str = "EPVSVOL1";
const DTYPE: &str = "float32-le";
const MAX_HEADER: usize = 4096;

pub fn creator() -> String {
    format!("epvs {}", env!("CARGO_PKG_VERSION"))
}

/// Writes `bytes` to `path` through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

fn encode(kind: &str, shape: &[usize], extra: &[(&str, String)], data: &[f64]) -> Vec<u8> {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    let mut header = format!("{MAGIC}\ndtype={DTYPE}\nkind={kind}\nshape={}\n", dims.join(" "));
    for (k, v) in extra {
        header.push_str(&format!("{k}={v}\n"));
    }
    header.push_str(&format!("creator={}\nend\n", creator()));
    let mut out = header.into_bytes();
    out.reserve(data.len() * 4);
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

struct Decoded {
    header: BTreeMap<String, String>,
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn fmt_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn decode(path: &Path, bytes: &[u8], kind: &str) -> Result<Decoded> {
    let mut header = BTreeMap::new();
    let mut pos = 0;
    let mut first = true;
    loop {
        let rest = &bytes[pos..];
        let Some(nl) = rest.iter().take(MAX_HEADER).position(|&b| b == b'\n') else {
            return Err(fmt_err(path, "unterminated header"));
        };
        let line = std::str::from_utf8(&rest[..nl]).map_err(|_| fmt_err(path, "header is not ASCII"))?;
        pos += nl + 1;
        if first {
            if line != MAGIC {
                return Err(fmt_err(path, format!("bad magic '{line}', expected {MAGIC}")));
            }
            first = false;
            continue;
        }
        if line == "end" {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| fmt_err(path, format!("bad header line '{line}'")))?;
        header.insert(k.to_string(), v.to_string());
        if pos > MAX_HEADER {
            return Err(fmt_err(path, "header too long"));
        }
    }
    match header.get("dtype").map(String::as_str) {
        Some(DTYPE) => {}
        other => return Err(fmt_err(path, format!("unsupported dtype {other:?}"))),
    }
    match header.get("kind") {
        Some(k) if k == kind => {}
        other => return Err(fmt_err(path, format!("expected kind={kind}, found {other:?}"))),
    }
    let shape: Vec<usize> = header
        .get("shape")
        .ok_or_else(|| fmt_err(path, "missing shape"))?
        .split_whitespace()
        .map(|d| d.parse().map_err(|_| fmt_err(path, format!("bad shape entry '{d}'"))))
        .collect::<Result<_>>()?;
    let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let payload = &bytes[pos..];
    match count {
        Some(c) if c.checked_mul(4) == Some(payload.len()) => {}
        _ => {
            return Err(fmt_err(
                path,
                format!("payload of {} bytes does not match shape {shape:?}", payload.len()),
            ))
        }
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Decoded { header, shape, data })
}

fn number(path: &Path, header: &BTreeMap<String, String>, key: &str) -> Result<f64> {
    header
        .get(key)
        .ok_or_else(|| fmt_err(path, format!("missing {key}")))?
        .parse()
        .map_err(|_| fmt_err(path, format!("bad {key}")))
}

pub fn volume_bytes(vol: &Volume) -> Vec<u8> {
    let s = vol.shape();
    encode("volume", &[s.nx, s.ny, s.nz], &[("pitch", vol.voxel_pitch().to_string())], vol.data())
}

pub fn write_volume(path: &Path, vol: &Volume) -> Result<()> {
    write_atomic(path, &volume_bytes(vol))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path)?;
    let d = decode(path, &bytes, "volume")?;
    let [nx, ny, nz] = <[usize; 3]>::try_from(d.shape.as_slice())
        .map_err(|_| fmt_err(path, "volume shape needs three entries"))?;
    let pitch = number(path, &d.header, "pitch")?;
    Volume::from_vec(Shape3::new(nx, ny, nz), pitch, d.data).map_err(|e| fmt_err(path, e.to_string()))
}

pub fn projection_bytes(p: &Projection, det_pitch: f64) -> Vec<u8> {
    encode(
        "projection",
        &[p.rows(), p.cols()],
        &[("pitch", det_pitch.to_string()), ("angle", p.angle().to_string())],
        p.data(),
    )
}

pub fn write_projection(path: &Path, p: &Projection, det_pitch: f64) -> Result<()> {
    write_atomic(path, &projection_bytes(p, det_pitch))
}

/// Returns the projection and the detector pitch stored with it.
pub fn read_projection(path: &Path) -> Result<(Projection, f64)> {
    let bytes = fs::read(path)?;
    let d = decode(path, &bytes, "projection")?;
    let [rows, cols] = <[usize; 2]>::try_from(d.shape.as_slice())
        .map_err(|_| fmt_err(path, "projection shape needs two entries"))?;
    let angle = number(path, &d.header, "angle")?;
    let pitch = number(path, &d.header, "pitch")?;
    let p = Projection::from_vec(rows, cols, angle, d.data).map_err(|e| fmt_err(path, e.to_string()))?;
    Ok((p, pitch))
}

pub fn write_matrix(path: &Path, m: &DistanceMatrix) -> Result<()> {
    write_atomic(path, &encode("matrix", &[m.len(), m.len()], &[], m.values()))
}

pub fn read_matrix(path: &Path) -> Result<DistanceMatrix> {
    let bytes = fs::read(path)?;
    let d = decode(path, &bytes, "matrix")?;
    match d.shape.as_slice() {
        &[a, b] if a == b => DistanceMatrix::from_values(a, d.data).map_err(|e| fmt_err(path, e.to_string())),
        _ => Err(fmt_err(path, "matrix must be square")),
    }
}
