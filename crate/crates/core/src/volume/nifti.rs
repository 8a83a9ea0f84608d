//! Minimal single-file NIfTI-1 codec (`.nii`, `.nii.gz`).
//!
//! Only 3D scalar images of type uint8, int16 or float32 are handled.
//! Orientation matrices are written as identity-with-spacing and ignored on read.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use thiserror::Error;

use super::{Volume, VolumeError, VolumeKind};

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const DESCRIP: usize = 148;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const SROW_X: usize = 280;
    pub const SROW_Y: usize = 296;
    pub const SROW_Z: usize = 312;
    pub const MAGIC: usize = 344;
}

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("not a NIfTI-1 file: {0}")]
    NotNifti(String),
    #[error("unsupported NIfTI feature: {field} = {value}")]
    Unsupported { field: &'static str, value: String },
    #[error("value {value} cannot be stored losslessly as {datatype:?}")]
    Unrepresentable { value: f32, datatype: NiftiDatatype },
}

fn unsupported(field: &'static str, value: impl ToString) -> NiftiError {
    NiftiError::Unsupported {
        field,
        value: value.to_string(),
    }
}

fn truncated(what: &str) -> NiftiError {
    NiftiError::Io(io::Error::new(
        io::ErrorKind::UnexpectedEof,
        format!("truncated NIfTI file: {what}"),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NiftiDatatype {
    Uint8,
    Int16,
    Float32,
}

impl NiftiDatatype {
    fn code(self) -> i16 {
        match self {
            NiftiDatatype::Uint8 => 2,
            NiftiDatatype::Int16 => 4,
            NiftiDatatype::Float32 => 16,
        }
    }

    fn from_code(code: i16) -> Option<Self> {
        match code {
            2 => Some(NiftiDatatype::Uint8),
            4 => Some(NiftiDatatype::Int16),
            16 => Some(NiftiDatatype::Float32),
            _ => None,
        }
    }

    fn bytes(self) -> usize {
        match self {
            NiftiDatatype::Uint8 => 1,
            NiftiDatatype::Int16 => 2,
            NiftiDatatype::Float32 => 4,
        }
    }

    /// Narrowest type that stores every value of `data` exactly.
    pub fn smallest_lossless(data: &[f32]) -> Self {
        let integral = data.iter().all(|v| v.fract() == 0.0);
        if integral && data.iter().all(|&v| (0.0..=255.0).contains(&v)) {
            NiftiDatatype::Uint8
        } else if integral && data.iter().all(|&v| (-32768.0..=32767.0).contains(&v)) {
            NiftiDatatype::Int16
        } else {
            NiftiDatatype::Float32
        }
    }
}

#[derive(Clone, Copy)]
enum Endian {
    Little,
    Big,
}

struct Reader<'a> {
    buf: &'a [u8],
    endian: Endian,
}

impl Reader<'_> {
    fn i16(&self, at: usize) -> i16 {
        let b = [self.buf[at], self.buf[at + 1]];
        match self.endian {
            Endian::Little => i16::from_le_bytes(b),
            Endian::Big => i16::from_be_bytes(b),
        }
    }

    fn f32(&self, at: usize) -> f32 {
        let b = [
            self.buf[at],
            self.buf[at + 1],
            self.buf[at + 2],
            self.buf[at + 3],
        ];
        match self.endian {
            Endian::Little => f32::from_le_bytes(b),
            Endian::Big => f32::from_be_bytes(b),
        }
    }
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

/// Reads a NIfTI-1 volume from a file path.
pub fn load_volume(path: impl AsRef<Path>, kind: VolumeKind) -> Result<Volume, VolumeError> {
    let bytes = fs::read(path.as_ref()).map_err(NiftiError::from)?;
    decode_volume(&bytes, kind)
}

/// Decodes a NIfTI-1 volume from raw (optionally gzip-compressed) bytes.
pub fn decode_volume(bytes: &[u8], kind: VolumeKind) -> Result<Volume, VolumeError> {
    let owned;
    let raw: &[u8] = if is_gzip(bytes) {
        let mut out = Vec::new();
        MultiGzDecoder::new(bytes)
            .read_to_end(&mut out)
            .map_err(NiftiError::from)?;
        owned = out;
        &owned
    } else {
        bytes
    };
    let (dims, spacing, data) = decode_raw(raw)?;
    Volume::new(dims, spacing, data, kind)
}

type RawVolume = ([usize; 3], [f64; 3], Vec<f32>);

fn decode_raw(raw: &[u8]) -> Result<RawVolume, NiftiError> {
    if raw.len() < HEADER_SIZE {
        return Err(truncated("header shorter than 348 bytes"));
    }
    let endian = if i32::from_le_bytes(raw[0..4].try_into().unwrap()) == HEADER_SIZE as i32 {
        Endian::Little
    } else if i32::from_be_bytes(raw[0..4].try_into().unwrap()) == HEADER_SIZE as i32 {
        Endian::Big
    } else {
        return Err(NiftiError::NotNifti("sizeof_hdr is not 348".into()));
    };
    let r = Reader { buf: raw, endian };

    let magic = &raw[offsets::MAGIC..offsets::MAGIC + 4];
    match magic {
        b"n+1\0" => {}
        b"ni1\0" => return Err(unsupported("magic", "ni1 (separate header/image pair)")),
        other => {
            return Err(NiftiError::NotNifti(format!(
                "bad magic {:?}",
                String::from_utf8_lossy(other)
            )))
        }
    }

    let ndim = r.i16(offsets::DIM);
    if !(3..=7).contains(&ndim) {
        return Err(unsupported("dim[0]", ndim));
    }
    let mut dims = [0usize; 3];
    for (a, d) in dims.iter_mut().enumerate() {
        let v = r.i16(offsets::DIM + 2 * (a + 1));
        if v < 1 {
            return Err(unsupported("dim", format!("dim[{}] = {v}", a + 1)));
        }
        *d = v as usize;
    }
    for a in 4..=ndim as usize {
        let v = r.i16(offsets::DIM + 2 * a);
        if v > 1 {
            return Err(unsupported(
                "dim",
                format!("dim[{a}] = {v} (non-spatial extent)"),
            ));
        }
    }

    let code = r.i16(offsets::DATATYPE);
    let datatype = NiftiDatatype::from_code(code).ok_or_else(|| unsupported("datatype", code))?;

    let mut spacing = [0f64; 3];
    for (a, s) in spacing.iter_mut().enumerate() {
        let v = r.f32(offsets::PIXDIM + 4 * (a + 1)).abs();
        if !(v.is_finite() && v > 0.0) {
            return Err(unsupported("pixdim", format!("pixdim[{}] = {v}", a + 1)));
        }
        *s = f64::from(v);
    }

    let vox_offset = r.f32(offsets::VOX_OFFSET);
    if !(vox_offset >= HEADER_SIZE as f32) || vox_offset.fract() != 0.0 {
        return Err(unsupported("vox_offset", vox_offset));
    }
    let start = vox_offset as usize;
    let count = dims[0] * dims[1] * dims[2];
    let end = start + count * datatype.bytes();
    if raw.len() < end {
        return Err(truncated(&format!(
            "expected {} data bytes, found {}",
            end - start,
            raw.len().saturating_sub(start)
        )));
    }
    let body = &raw[start..end];

    let mut data: Vec<f32> = match datatype {
        NiftiDatatype::Uint8 => body.iter().map(|&b| f32::from(b)).collect(),
        NiftiDatatype::Int16 => body
            .chunks_exact(2)
            .map(|c| {
                let b = [c[0], c[1]];
                f32::from(match endian {
                    Endian::Little => i16::from_le_bytes(b),
                    Endian::Big => i16::from_be_bytes(b),
                })
            })
            .collect(),
        NiftiDatatype::Float32 => body
            .chunks_exact(4)
            .map(|c| {
                let b = [c[0], c[1], c[2], c[3]];
                match endian {
                    Endian::Little => f32::from_le_bytes(b),
                    Endian::Big => f32::from_be_bytes(b),
                }
            })
            .collect(),
    };

    let slope = r.f32(offsets::SCL_SLOPE);
    let inter = r.f32(offsets::SCL_INTER);
    if slope != 0.0 && slope.is_finite() && (slope != 1.0 || inter != 0.0) {
        for v in &mut data {
            *v = *v * slope + inter;
        }
    }
    Ok((dims, spacing, data))
}

/// Encodes a volume as uncompressed NIfTI-1 bytes.
pub fn encode_volume(v: &Volume, datatype: NiftiDatatype) -> Result<Vec<u8>, NiftiError> {
    let dims = v.dims();
    for &d in &dims {
        if d > i16::MAX as usize {
            return Err(unsupported("dim", d));
        }
    }
    let spacing = v.spacing();
    let mut h = vec![0u8; DATA_OFFSET];
    let put_i16 = |h: &mut [u8], at: usize, x: i16| h[at..at + 2].copy_from_slice(&x.to_le_bytes());
    let put_f32 = |h: &mut [u8], at: usize, x: f32| h[at..at + 4].copy_from_slice(&x.to_le_bytes());

    h[offsets::SIZEOF_HDR..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    put_i16(&mut h, offsets::DIM, 3);
    for (a, &d) in dims.iter().enumerate() {
        put_i16(&mut h, offsets::DIM + 2 * (a + 1), d as i16);
    }
    for a in 4..8 {
        put_i16(&mut h, offsets::DIM + 2 * a, 1);
    }
    put_i16(&mut h, offsets::DATATYPE, datatype.code());
    put_i16(&mut h, offsets::BITPIX, (datatype.bytes() * 8) as i16);
    put_f32(&mut h, offsets::PIXDIM, 1.0);
    for (a, &s) in spacing.iter().enumerate() {
        put_f32(&mut h, offsets::PIXDIM + 4 * (a + 1), s as f32);
    }
    put_f32(&mut h, offsets::VOX_OFFSET, DATA_OFFSET as f32);
    put_f32(&mut h, offsets::SCL_SLOPE, 1.0);
    put_f32(&mut h, offsets::SCL_INTER, 0.0);
    h[offsets::XYZT_UNITS] = 2; // millimetres
    let descrip = b"promptseg";
    h[offsets::DESCRIP..offsets::DESCRIP + descrip.len()].copy_from_slice(descrip);
    put_i16(&mut h, offsets::QFORM_CODE, 0);
    put_i16(&mut h, offsets::SFORM_CODE, 1);
    put_f32(&mut h, offsets::SROW_X, spacing[0] as f32);
    put_f32(&mut h, offsets::SROW_Y + 4, spacing[1] as f32);
    put_f32(&mut h, offsets::SROW_Z + 8, spacing[2] as f32);
    h[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(b"n+1\0");

    h.reserve(v.len() * datatype.bytes());
    for &x in v.data() {
        let bad = || NiftiError::Unrepresentable { value: x, datatype };
        match datatype {
            NiftiDatatype::Uint8 => {
                if x.fract() != 0.0 || !(0.0..=255.0).contains(&x) {
                    return Err(bad());
                }
                h.push(x as u8);
            }
            NiftiDatatype::Int16 => {
                if x.fract() != 0.0 || !(-32768.0..=32767.0).contains(&x) {
                    return Err(bad());
                }
                h.extend_from_slice(&(x as i16).to_le_bytes());
            }
            NiftiDatatype::Float32 => h.extend_from_slice(&x.to_le_bytes()),
        }
    }
    Ok(h)
}

/// Writes `v` with the narrowest lossless datatype; gzip-compresses when the
/// path ends in `.gz`.
pub fn write_volume(path: impl AsRef<Path>, v: &Volume) -> Result<(), VolumeError> {
    let path = path.as_ref();
    let bytes = encode_volume(v, NiftiDatatype::smallest_lossless(v.data()))?;
    let gz = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("gz"));
    let out = if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&bytes).map_err(NiftiError::from)?;
        enc.finish().map_err(NiftiError::from)?
    } else {
        bytes
    };
    fs::write(path, out).map_err(NiftiError::from)?;
    Ok(())
}
