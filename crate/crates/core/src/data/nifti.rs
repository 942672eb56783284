//! Minimal NIfTI-1 single-file reader and writer.
//!
//! Only what volume ingestion needs: 3-D (or 4-D with a singleton fourth
//! axis) images, the common integer and float datatypes, intensity scaling,
//! either byte order, optional gzip. Data is returned in file order, i.e.
//! x fastest, which is `[z, y, x]` row-major.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;

#[derive(Debug)]
pub struct RawVolume {
    /// `[z, y, x]`
    pub dims: [usize; 3],
    /// pixdim along (x, y, z)
    pub spacing: [f64; 3],
    pub data: Vec<f32>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn raw<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut b = [0u8; N];
        b.copy_from_slice(&self.bytes[at..at + N]);
        if self.big_endian {
            b.reverse();
        }
        b
    }

    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes(self.raw(at))
    }

    fn i32(&self, at: usize) -> i32 {
        i32::from_le_bytes(self.raw(at))
    }

    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.raw(at))
    }

    fn f64(&self, at: usize) -> f64 {
        f64::from_le_bytes(self.raw(at))
    }
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Volume { path: path.to_path_buf(), reason: reason.into() }
}

pub fn read(path: &Path) -> Result<RawVolume> {
    let file = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bytes = if file.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&file[..]).read_to_end(&mut out).map_err(|e| Error::io(path, e))?;
        out
    } else {
        file
    };
    parse(path, &bytes)
}

fn parse(path: &Path, bytes: &[u8]) -> Result<RawVolume> {
    if bytes.len() < HEADER_SIZE {
        return Err(bad(path, format!("{} bytes is shorter than a NIfTI-1 header", bytes.len())));
    }
    let size_le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let size_be = i32::from_be_bytes(bytes[0..4].try_into().unwrap());
    let big_endian = match (size_le, size_be) {
        (348, _) => false,
        (_, 348) => true,
        _ => return Err(bad(path, "sizeof_hdr is not 348")),
    };
    let magic = &bytes[344..348];
    if magic != b"n+1\0" {
        return Err(bad(path, format!("unsupported magic {:?} (only single-file n+1)", String::from_utf8_lossy(magic))));
    }
    let r = Reader { bytes, big_endian };
    let ndim = r.i16(40);
    let dim: Vec<i64> = (1..=7).map(|i| r.i16(40 + 2 * i) as i64).collect();
    let extra_ok = (3..ndim.clamp(3, 7) as usize).all(|i| dim[i] == 1);
    if !(ndim == 3 || (ndim > 3 && ndim <= 7 && extra_ok)) {
        return Err(bad(path, format!("expected a 3-D volume, header declares {ndim} dimension(s)")));
    }
    if dim[..3].iter().any(|&d| d < 1) {
        return Err(bad(path, format!("non-positive dimension in {:?}", &dim[..3])));
    }
    let (nx, ny, nz) = (dim[0] as usize, dim[1] as usize, dim[2] as usize);
    let spacing = [r.f32(80), r.f32(84), r.f32(88)].map(widen).map(f64::abs);
    let datatype = r.i16(70);
    let offset = r.f32(108) as usize;
    let slope = r.f32(112);
    let inter = r.f32(116);
    let count = nx * ny * nz;
    let width = match datatype {
        2 | 256 => 1,
        4 | 512 => 2,
        8 | 768 | 16 => 4,
        64 => 8,
        other => return Err(bad(path, format!("unsupported datatype code {other}"))),
    };
    let start = offset.max(HEADER_SIZE);
    let end = start + count * width;
    if bytes.len() < end {
        return Err(bad(path, format!("truncated data: need {end} bytes, have {}", bytes.len())));
    }
    let raw = Reader { bytes: &bytes[start..end], big_endian };
    let mut data: Vec<f32> = (0..count)
        .map(|i| {
            let at = i * width;
            match datatype {
                2 => raw.bytes[at] as f32,
                256 => raw.bytes[at] as i8 as f32,
                4 => raw.i16(at) as f32,
                512 => raw.i16(at) as u16 as f32,
                8 => raw.i32(at) as f32,
                768 => raw.i32(at) as u32 as f32,
                16 => raw.f32(at),
                64 => raw.f64(at) as f32,
                _ => unreachable!(),
            }
        })
        .collect();
    if slope != 0.0 && slope.is_finite() && (slope != 1.0 || inter != 0.0) {
        data.iter_mut().for_each(|v| *v = *v * slope + inter);
    }
    Ok(RawVolume { dims: [nz, ny, nx], spacing, data })
}

// pixdim is float32 on disk; widen via the shortest decimal so 0.98 stays 0.98.
fn widen(v: f32) -> f64 {
    v.to_string().parse().unwrap_or(v as f64)
}

/// Serialises a float32 volume; `dims` is `[z, y, x]`, `spacing` is (x, y, z).
pub fn encode(dims: [usize; 3], spacing: [f64; 3], data: &[f32]) -> Vec<u8> {
    let mut h = vec![0u8; DATA_OFFSET];
    let put_i16 = |h: &mut [u8], at: usize, v: i16| h[at..at + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], at: usize, v: f32| h[at..at + 4].copy_from_slice(&v.to_le_bytes());
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    let [nz, ny, nx] = dims;
    for (i, d) in [3, nx, ny, nz, 1, 1, 1, 1].into_iter().enumerate() {
        put_i16(&mut h, 40 + 2 * i, d as i16);
    }
    put_i16(&mut h, 70, 16);
    put_i16(&mut h, 72, 32);
    put_f32(&mut h, 76, 1.0);
    for (i, s) in spacing.iter().enumerate() {
        put_f32(&mut h, 80 + 4 * i, *s as f32);
    }
    put_f32(&mut h, 108, DATA_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    h[123] = 10 | 8; // xyzt_units: mm, s
    put_i16(&mut h, 254, 1); // sform_code: scanner
    for (row, s) in spacing.iter().enumerate() {
        put_f32(&mut h, 280 + 16 * row + 4 * row, *s as f32);
    }
    h[344..348].copy_from_slice(b"n+1\0");
    h.reserve(data.len() * 4);
    for v in data {
        h.extend_from_slice(&v.to_le_bytes());
    }
    h
}

pub fn write(path: &Path, dims: [usize; 3], spacing: [f64; 3], data: &[f32]) -> Result<()> {
    let bytes = encode(dims, spacing, data);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let gz = path.extension().is_some_and(|e| e == "gz");
    let out = if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
        enc.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        bytes
    };
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
