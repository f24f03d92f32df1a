//! Minimal NIfTI-1 support: uncompressed single-file `.nii`, 3D images with
//! uint8, int16 or float32 voxels. Geometry is taken from `pixdim` only;
//! qform/sform orientation is ignored.

use std::fs;
use std::path::Path;

use ndarray::{Array3, ShapeBuilder};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::volume::Volume;

pub const HEADER_SIZE: usize = 348;
/// Header plus the 4-byte extension flag of single-file images.
pub const DATA_OFFSET: usize = 352;
pub const MAGIC: &[u8; 4] = b"n+1\0";

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;

const NIFTI_UNITS_MM: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Endian {
    Little,
    Big,
}

/// The subset of header fields this reader interprets.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
}

struct Cursor<'a> {
    buf: &'a [u8],
    endian: Endian,
}

impl Cursor<'_> {
    fn bytes<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut b = [0u8; N];
        b.copy_from_slice(&self.buf[at..at + N]);
        b
    }

    fn i16(&self, at: usize) -> i16 {
        match self.endian {
            Endian::Little => i16::from_le_bytes(self.bytes(at)),
            Endian::Big => i16::from_be_bytes(self.bytes(at)),
        }
    }

    fn f32(&self, at: usize) -> f32 {
        match self.endian {
            Endian::Little => f32::from_le_bytes(self.bytes(at)),
            Endian::Big => f32::from_be_bytes(self.bytes(at)),
        }
    }
}

fn parse_header(buf: &[u8]) -> Result<(NiftiHeader, Endian)> {
    if buf.len() < HEADER_SIZE {
        return Err(Error::MalformedHeader(format!(
            "file is {} bytes, shorter than the {HEADER_SIZE}-byte header",
            buf.len()
        )));
    }
    let endian = match (
        i32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]),
        i32::from_be_bytes([buf[0], buf[1], buf[2], buf[3]]),
    ) {
        (348, _) => Endian::Little,
        (_, 348) => Endian::Big,
        (other, _) => return Err(Error::MalformedHeader(format!("sizeof_hdr is {other}, expected 348"))),
    };
    if &buf[344..348] != MAGIC {
        return Err(Error::MalformedHeader(format!(
            "magic {:?} is not single-file NIfTI-1 (\"n+1\\0\")",
            &buf[344..348]
        )));
    }
    let c = Cursor { buf, endian };
    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = c.i16(40 + 2 * i);
    }
    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = c.f32(76 + 4 * i);
    }
    Ok((
        NiftiHeader {
            dim,
            datatype: c.i16(70),
            bitpix: c.i16(72),
            pixdim,
            vox_offset: c.f32(108),
            scl_slope: c.f32(112),
            scl_inter: c.f32(116),
        },
        endian,
    ))
}

fn spatial_shape(h: &NiftiHeader) -> Result<[usize; 3]> {
    let ndim = h.dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(Error::MalformedHeader(format!("dim[0] = {ndim} is out of range")));
    }
    let ndim = ndim as usize;
    if ndim < 3 {
        return Err(Error::Shape(format!("image is {ndim}D, expected 3D")));
    }
    // Trailing singleton dimensions are tolerated.
    if h.dim[4..=ndim].iter().any(|&d| d != 1) {
        return Err(Error::Shape(format!("image dims {:?} are not 3D", &h.dim[1..=ndim])));
    }
    let mut shape = [0usize; 3];
    for axis in 0..3 {
        let d = h.dim[axis + 1];
        if d < 1 {
            return Err(Error::Shape(format!("dim[{}] = {d} must be positive", axis + 1)));
        }
        shape[axis] = d as usize;
    }
    Ok(shape)
}

pub fn read(path: &Path) -> Result<Volume> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf)
}

/// Decode an in-memory `.nii` image.
pub fn decode(buf: &[u8]) -> Result<Volume> {
    let (header, endian) = parse_header(buf)?;
    let (bytes_per_voxel, expected_bitpix) = match header.datatype {
        DT_UINT8 => (1, 8),
        DT_INT16 => (2, 16),
        DT_FLOAT32 => (4, 32),
        other => return Err(Error::MalformedHeader(format!("unsupported datatype code {other}"))),
    };
    if header.bitpix != expected_bitpix {
        return Err(Error::MalformedHeader(format!(
            "bitpix {} does not match datatype {}",
            header.bitpix, header.datatype
        )));
    }
    let shape = spatial_shape(&header)?;
    if !(header.vox_offset.is_finite() && header.vox_offset >= HEADER_SIZE as f32) {
        return Err(Error::MalformedHeader(format!("vox_offset {} is invalid", header.vox_offset)));
    }
    let offset = header.vox_offset as usize;
    let n = shape.iter().product::<usize>();
    let end = offset + n * bytes_per_voxel;
    if buf.len() < end {
        return Err(Error::Shape(format!(
            "payload holds {} bytes, expected {} for dims {:?}",
            buf.len().saturating_sub(offset),
            n * bytes_per_voxel,
            shape
        )));
    }
    let payload = &buf[offset..end];
    let c = Cursor { buf: payload, endian };
    let mut values: Vec<f32> = match header.datatype {
        DT_UINT8 => payload.iter().map(|&b| b as f32).collect(),
        DT_INT16 => (0..n).map(|i| c.i16(2 * i) as f32).collect(),
        _ => (0..n).map(|i| c.f32(4 * i)).collect(),
    };
    if header.scl_slope != 0.0 && header.scl_slope.is_finite() {
        let (m, b) = (header.scl_slope, header.scl_inter);
        for v in &mut values {
            *v = *v * m + b;
        }
    }
    // dim[1] varies fastest on disk, so the file is Fortran order over (d, h, w).
    let data = Array3::from_shape_vec((shape[0], shape[1], shape[2]).f(), values)
        .map_err(|e| Error::Shape(e.to_string()))?;
    let spacing = [header.pixdim[1], header.pixdim[2], header.pixdim[3]];
    let spacing = spacing.map(|p| if p.is_finite() && p > 0.0 { p } else { 1.0 });
    Volume::new(data.as_standard_layout().into_owned(), spacing)
}

/// Encode as a little-endian float32 single-file image.
pub fn encode(v: &Volume) -> Vec<u8> {
    let (d, h, w) = v.shape();
    let mut buf = vec![0u8; DATA_OFFSET + v.len() * 4];
    let put_i16 = |buf: &mut [u8], at: usize, x: i16| buf[at..at + 2].copy_from_slice(&x.to_le_bytes());
    let put_f32 = |buf: &mut [u8], at: usize, x: f32| buf[at..at + 4].copy_from_slice(&x.to_le_bytes());

    buf[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    buf[38] = b'r';
    let dim = [3, d as i16, h as i16, w as i16, 1, 1, 1, 1];
    for (i, x) in dim.iter().enumerate() {
        put_i16(&mut buf, 40 + 2 * i, *x);
    }
    put_i16(&mut buf, 70, DT_FLOAT32);
    put_i16(&mut buf, 72, 32);
    let s = v.voxel_size_mm();
    let pixdim = [1.0, s[0], s[1], s[2], 0.0, 0.0, 0.0, 0.0];
    for (i, x) in pixdim.iter().enumerate() {
        put_f32(&mut buf, 76 + 4 * i, *x);
    }
    put_f32(&mut buf, 108, DATA_OFFSET as f32);
    // scl_slope = 0 means "no scaling", which keeps the payload bit-exact.
    put_f32(&mut buf, 112, 0.0);
    put_f32(&mut buf, 116, 0.0);
    buf[123] = NIFTI_UNITS_MM;
    let (lo, hi) = v.intensity_range();
    put_f32(&mut buf, 124, hi);
    put_f32(&mut buf, 128, lo);
    buf[344..348].copy_from_slice(MAGIC);

    let data = v.data();
    let mut at = DATA_OFFSET;
    for k in 0..w {
        for j in 0..h {
            for i in 0..d {
                buf[at..at + 4].copy_from_slice(&data[(i, j, k)].to_le_bytes());
                at += 4;
            }
        }
    }
    buf
}

pub fn write(v: &Volume, path: &Path) -> Result<()> {
    let (d, h, w) = v.shape();
    if [d, h, w].iter().any(|&x| x > i16::MAX as usize) {
        return Err(Error::Shape(format!("shape {:?} exceeds NIfTI-1 dimension limits", (d, h, w))));
    }
    fsutil::write_atomic(path, &encode(v))
}
