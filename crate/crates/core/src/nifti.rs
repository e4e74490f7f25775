//! Single-file NIfTI-1 (`.nii`, optionally gzipped) reader and writer.
//!
//! Scalar volumes use `dim[0] = 3`. Two extra layouts are understood for
//! multi-channel data:
//!
//! * channel stacks: `dim[0] = 4`, `dim[4]` channels;
//! * displacement fields: `dim[0] = 5`, `dim[4] = 1`, `dim[5] = 3`,
//!   `intent_code = 1007` (vector), components in world mm.
//!
//! Geometry comes from the sform rows; qform is ignored. The writer always
//! emits little-endian data at offset 352.

use std::borrow::Cow;
use std::io::{Read, Write};

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use nalgebra::{Matrix4, Vector4};

use crate::error::{Error, Result};
use crate::volume::{Geometry, LabelMap, Volume, VolumeStack};

pub const HEADER_SIZE: usize = 348;
pub const DATA_OFFSET: usize = 352;
pub const MAGIC: [u8; 4] = *b"n+1\0";
pub const INTENT_VECTOR: i16 = 1007;

const XYZT_MM: u8 = 2;

/// Supported voxel datatypes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Datatype {
    Uint8,
    Int16,
    Float32,
}

impl Datatype {
    pub fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(Self::Uint8),
            4 => Ok(Self::Int16),
            16 => Ok(Self::Float32),
            other => Err(Error::UnsupportedDatatype(other)),
        }
    }

    pub fn code(self) -> i16 {
        match self {
            Self::Uint8 => 2,
            Self::Int16 => 4,
            Self::Float32 => 16,
        }
    }

    pub fn bitpix(self) -> i16 {
        match self {
            Self::Uint8 => 8,
            Self::Int16 => 16,
            Self::Float32 => 32,
        }
    }

    fn bytes(self) -> usize {
        self.bitpix() as usize / 8
    }

    pub fn is_integer(self) -> bool {
        !matches!(self, Self::Float32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Endian {
    Little,
    Big,
}

/// The NIfTI-1 header fields this crate reads or writes.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiHeader {
    pub sizeof_hdr: i32,
    pub dim_info: u8,
    pub dim: [i16; 8],
    pub intent_p: [f32; 3],
    pub intent_code: i16,
    pub datatype: i16,
    pub bitpix: i16,
    pub slice_start: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub slice_end: i16,
    pub slice_code: u8,
    pub xyzt_units: u8,
    pub cal_max: f32,
    pub cal_min: f32,
    pub slice_duration: f32,
    pub toffset: f32,
    pub descrip: [u8; 80],
    pub aux_file: [u8; 24],
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow_x: [f32; 4],
    pub srow_y: [f32; 4],
    pub srow_z: [f32; 4],
    pub intent_name: [u8; 16],
    pub magic: [u8; 4],
}

impl Default for NiftiHeader {
    fn default() -> Self {
        Self {
            sizeof_hdr: HEADER_SIZE as i32,
            dim_info: 0,
            dim: [3, 1, 1, 1, 1, 1, 1, 1],
            intent_p: [0.0; 3],
            intent_code: 0,
            datatype: Datatype::Float32.code(),
            bitpix: Datatype::Float32.bitpix(),
            slice_start: 0,
            pixdim: [1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            vox_offset: DATA_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            slice_end: 0,
            slice_code: 0,
            xyzt_units: XYZT_MM,
            cal_max: 0.0,
            cal_min: 0.0,
            slice_duration: 0.0,
            toffset: 0.0,
            descrip: [0; 80],
            aux_file: [0; 24],
            qform_code: 0,
            sform_code: 1,
            quatern: [0.0; 3],
            qoffset: [0.0; 3],
            srow_x: [1.0, 0.0, 0.0, 0.0],
            srow_y: [0.0, 1.0, 0.0, 0.0],
            srow_z: [0.0, 0.0, 1.0, 0.0],
            intent_name: [0; 16],
            magic: MAGIC,
        }
    }
}

struct Fields<'a, B> {
    buf: &'a [u8],
    _order: std::marker::PhantomData<B>,
}

impl<'a, B: ByteOrder> Fields<'a, B> {
    fn i16(&self, at: usize) -> i16 {
        B::read_i16(&self.buf[at..])
    }
    fn i32(&self, at: usize) -> i32 {
        B::read_i32(&self.buf[at..])
    }
    fn f32(&self, at: usize) -> f32 {
        B::read_f32(&self.buf[at..])
    }
    fn f32s<const N: usize>(&self, at: usize) -> [f32; N] {
        std::array::from_fn(|i| self.f32(at + 4 * i))
    }
    fn bytes<const N: usize>(&self, at: usize) -> [u8; N] {
        std::array::from_fn(|i| self.buf[at + i])
    }

    fn header(&self) -> NiftiHeader {
        NiftiHeader {
            sizeof_hdr: self.i32(0),
            dim_info: self.buf[39],
            dim: std::array::from_fn(|i| self.i16(40 + 2 * i)),
            intent_p: self.f32s(56),
            intent_code: self.i16(68),
            datatype: self.i16(70),
            bitpix: self.i16(72),
            slice_start: self.i16(74),
            pixdim: self.f32s(76),
            vox_offset: self.f32(108),
            scl_slope: self.f32(112),
            scl_inter: self.f32(116),
            slice_end: self.i16(120),
            slice_code: self.buf[122],
            xyzt_units: self.buf[123],
            cal_max: self.f32(124),
            cal_min: self.f32(128),
            slice_duration: self.f32(132),
            toffset: self.f32(136),
            descrip: self.bytes(148),
            aux_file: self.bytes(228),
            qform_code: self.i16(252),
            sform_code: self.i16(254),
            quatern: self.f32s(256),
            qoffset: self.f32s(268),
            srow_x: self.f32s(280),
            srow_y: self.f32s(296),
            srow_z: self.f32s(312),
            intent_name: self.bytes(328),
            magic: self.bytes(344),
        }
    }
}

impl NiftiHeader {
    /// Parses the first 348 bytes; byte order is detected from `sizeof_hdr`.
    pub fn parse(bytes: &[u8]) -> Result<(Self, Endian)> {
        if bytes.len() < HEADER_SIZE {
            return Err(Error::TruncatedData {
                field: "header",
                needed: HEADER_SIZE,
                available: bytes.len(),
            });
        }
        let le = LittleEndian::read_i32(&bytes[0..4]);
        let be = BigEndian::read_i32(&bytes[0..4]);
        let (header, endian) = if le == HEADER_SIZE as i32 {
            let f = Fields::<LittleEndian> { buf: bytes, _order: Default::default() };
            (f.header(), Endian::Little)
        } else if be == HEADER_SIZE as i32 {
            let f = Fields::<BigEndian> { buf: bytes, _order: Default::default() };
            (f.header(), Endian::Big)
        } else {
            return Err(Error::BadHeaderSize(le));
        };
        if header.magic != MAGIC {
            return Err(Error::BadMagic { found: header.magic });
        }
        let dt = Datatype::from_code(header.datatype)?;
        if header.bitpix != dt.bitpix() {
            return Err(Error::UnsupportedLayout {
                field: "bitpix",
                value: header.bitpix as i64,
            });
        }
        if !(header.vox_offset >= DATA_OFFSET as f32) {
            return Err(Error::UnsupportedLayout {
                field: "vox_offset",
                value: header.vox_offset as i64,
            });
        }
        Ok((header, endian))
    }

    /// Serialises to 348 little-endian bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = vec![0u8; HEADER_SIZE];
        type E = LittleEndian;
        E::write_i32(&mut b[0..], self.sizeof_hdr);
        b[38] = b'r';
        b[39] = self.dim_info;
        for (i, d) in self.dim.iter().enumerate() {
            E::write_i16(&mut b[40 + 2 * i..], *d);
        }
        for (i, p) in self.intent_p.iter().enumerate() {
            E::write_f32(&mut b[56 + 4 * i..], *p);
        }
        E::write_i16(&mut b[68..], self.intent_code);
        E::write_i16(&mut b[70..], self.datatype);
        E::write_i16(&mut b[72..], self.bitpix);
        E::write_i16(&mut b[74..], self.slice_start);
        for (i, p) in self.pixdim.iter().enumerate() {
            E::write_f32(&mut b[76 + 4 * i..], *p);
        }
        E::write_f32(&mut b[108..], self.vox_offset);
        E::write_f32(&mut b[112..], self.scl_slope);
        E::write_f32(&mut b[116..], self.scl_inter);
        E::write_i16(&mut b[120..], self.slice_end);
        b[122] = self.slice_code;
        b[123] = self.xyzt_units;
        E::write_f32(&mut b[124..], self.cal_max);
        E::write_f32(&mut b[128..], self.cal_min);
        E::write_f32(&mut b[132..], self.slice_duration);
        E::write_f32(&mut b[136..], self.toffset);
        b[148..228].copy_from_slice(&self.descrip);
        b[228..252].copy_from_slice(&self.aux_file);
        E::write_i16(&mut b[252..], self.qform_code);
        E::write_i16(&mut b[254..], self.sform_code);
        for (i, q) in self.quatern.iter().chain(self.qoffset.iter()).enumerate() {
            E::write_f32(&mut b[256 + 4 * i..], *q);
        }
        for (r, row) in [self.srow_x, self.srow_y, self.srow_z].iter().enumerate() {
            for (i, v) in row.iter().enumerate() {
                E::write_f32(&mut b[280 + 16 * r + 4 * i..], *v);
            }
        }
        b[328..344].copy_from_slice(&self.intent_name);
        b[344..348].copy_from_slice(&self.magic);
        b
    }

    pub fn datatype(&self) -> Result<Datatype> {
        Datatype::from_code(self.datatype)
    }

    fn spatial_dims(&self) -> Result<[usize; 3]> {
        let mut dims = [0usize; 3];
        for a in 0..3 {
            let d = self.dim[a + 1];
            if d < 1 {
                return Err(Error::UnsupportedLayout { field: "dim", value: d as i64 });
            }
            dims[a] = d as usize;
        }
        Ok(dims)
    }

    /// Spacing from `pixdim[1..=3]` and grid-to-world from the sform rows,
    /// falling back to a diagonal pixdim matrix when `sform_code == 0`.
    pub fn geometry(&self) -> Result<Geometry> {
        let dims = self.spatial_dims()?;
        let mut spacing = [0.0; 3];
        for a in 0..3 {
            let p = self.pixdim[a + 1];
            if !(p > 0.0) {
                return Err(Error::NonPositivePixdim { index: a + 1, value: p });
            }
            spacing[a] = p as f64;
        }
        let affine = if self.sform_code > 0 {
            let mut m = Matrix4::identity();
            for (r, row) in [self.srow_x, self.srow_y, self.srow_z].iter().enumerate() {
                for c in 0..4 {
                    m[(r, c)] = row[c] as f64;
                }
            }
            m
        } else {
            Matrix4::from_diagonal(&Vector4::new(spacing[0], spacing[1], spacing[2], 1.0))
        };
        Geometry::new(dims, spacing, affine)
    }

    fn for_geometry(geometry: &Geometry, datatype: Datatype) -> Self {
        let mut h = NiftiHeader {
            datatype: datatype.code(),
            bitpix: datatype.bitpix(),
            ..Default::default()
        };
        let dims = geometry.dims();
        let sp = geometry.spacing();
        h.dim = [3, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1];
        h.pixdim = [1.0, sp[0] as f32, sp[1] as f32, sp[2] as f32, 0.0, 0.0, 0.0, 0.0];
        let m = geometry.grid_to_world();
        let row = |r: usize| [m[(r, 0)] as f32, m[(r, 1)] as f32, m[(r, 2)] as f32, m[(r, 3)] as f32];
        h.srow_x = row(0);
        h.srow_y = row(1);
        h.srow_z = row(2);
        let desc = b"anatsynth";
        h.descrip[..desc.len()].copy_from_slice(desc);
        h
    }
}

/// A decoded image: header, spatial geometry, and scaled voxel values for
/// every element (`dim[1] * ... * dim[dim[0]]`, x-fastest).
#[derive(Clone, Debug)]
pub struct NiftiImage {
    pub header: NiftiHeader,
    pub endian: Endian,
    pub geometry: Geometry,
    pub data: Vec<f64>,
}

impl NiftiImage {
    fn element_count(header: &NiftiHeader) -> Result<usize> {
        let rank = header.dim[0];
        if !(1..=7).contains(&rank) {
            return Err(Error::UnsupportedLayout { field: "dim[0]", value: rank as i64 });
        }
        let mut n = 1usize;
        for a in 1..=rank as usize {
            let d = header.dim[a];
            if d < 1 {
                return Err(Error::UnsupportedLayout { field: "dim", value: d as i64 });
            }
            n *= d as usize;
        }
        Ok(n)
    }

    /// Decodes any rank; the layout-specific readers check `dim[0]`.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bytes = maybe_decompress(bytes)?;
        let (header, endian) = NiftiHeader::parse(&bytes)?;
        let geometry = header.geometry()?;
        let dt = header.datatype()?;
        let count = Self::element_count(&header)?;
        let start = header.vox_offset as usize;
        let needed = start + count * dt.bytes();
        if bytes.len() < needed {
            return Err(Error::TruncatedData { field: "data", needed, available: bytes.len() });
        }
        let raw = &bytes[start..needed];
        let mut data = match endian {
            Endian::Little => decode_raw::<LittleEndian>(raw, dt, count),
            Endian::Big => decode_raw::<BigEndian>(raw, dt, count),
        };
        let slope = if header.scl_slope == 0.0 || !header.scl_slope.is_finite() {
            1.0
        } else {
            header.scl_slope as f64
        };
        let inter = if header.scl_inter.is_finite() { header.scl_inter as f64 } else { 0.0 };
        if slope != 1.0 || inter != 0.0 {
            data.iter_mut().for_each(|v| *v = *v * slope + inter);
        }
        Ok(Self { header, endian, geometry, data })
    }

    fn is_unscaled(&self) -> bool {
        let s = self.header.scl_slope;
        (s == 0.0 || s == 1.0 || !s.is_finite()) && (self.header.scl_inter == 0.0 || !self.header.scl_inter.is_finite())
    }
}

fn decode_raw<B: ByteOrder>(raw: &[u8], dt: Datatype, count: usize) -> Vec<f64> {
    match dt {
        Datatype::Uint8 => raw.iter().map(|&b| b as f64).collect(),
        Datatype::Int16 => (0..count).map(|i| B::read_i16(&raw[2 * i..]) as f64).collect(),
        Datatype::Float32 => (0..count).map(|i| B::read_f32(&raw[4 * i..]) as f64).collect(),
    }
}

fn encode_raw(values: impl Iterator<Item = f64>, dt: Datatype, out: &mut Vec<u8>) {
    for v in values {
        match dt {
            Datatype::Uint8 => out.push(v.round().clamp(0.0, 255.0) as u8),
            Datatype::Int16 => {
                let q = v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
                out.extend_from_slice(&q.to_le_bytes());
            }
            Datatype::Float32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
        }
    }
}

/// Strips a gzip container when the stream starts with the gzip magic.
pub fn maybe_decompress(bytes: &[u8]) -> Result<Cow<'_, [u8]>> {
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(bytes).read_to_end(&mut out)?;
        Ok(Cow::Owned(out))
    } else {
        Ok(Cow::Borrowed(bytes))
    }
}

pub fn gzip(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut enc = GzEncoder::new(Vec::new(), Compression::default());
    enc.write_all(bytes)?;
    Ok(enc.finish()?)
}

/// Result of [`read_nifti`]: unscaled integer data is treated as labels.
#[derive(Clone, Debug)]
pub enum Decoded {
    Intensity(Volume),
    Labels(LabelMap),
}

fn require_rank3(img: &NiftiImage) -> Result<()> {
    let d = &img.header.dim;
    let extra_ok = (4..=7).all(|a| a > d[0] as usize || d[a] == 1);
    if d[0] == 3 || (d[0] > 3 && extra_ok) {
        Ok(())
    } else {
        Err(Error::UnsupportedLayout { field: "dim[0]", value: d[0] as i64 })
    }
}

fn labels_from(img: NiftiImage) -> Result<LabelMap> {
    let data = img
        .data
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                Ok(v as u32)
            } else {
                Err(Error::InvalidVolume(format!("label value {v} is not a non-negative integer")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    LabelMap::new(img.geometry, data)
}

/// Reads a 3D scalar image. Integer datatypes without intensity scaling
/// decode as a [`LabelMap`], everything else as a [`Volume`].
pub fn read_nifti(bytes: &[u8]) -> Result<Decoded> {
    let img = NiftiImage::decode(bytes)?;
    require_rank3(&img)?;
    let dt = img.header.datatype()?;
    if dt.is_integer() && img.is_unscaled() && img.data.iter().all(|&v| v >= 0.0) {
        Ok(Decoded::Labels(labels_from(img)?))
    } else {
        Ok(Decoded::Intensity(Volume::new(img.geometry, img.data)?))
    }
}

pub fn read_volume(bytes: &[u8]) -> Result<Volume> {
    let img = NiftiImage::decode(bytes)?;
    require_rank3(&img)?;
    Volume::new(img.geometry, img.data)
}

pub fn read_labels(bytes: &[u8]) -> Result<LabelMap> {
    let img = NiftiImage::decode(bytes)?;
    require_rank3(&img)?;
    labels_from(img)
}

/// Writes a 3D volume. Integer datatypes round to nearest and clamp to the
/// representable range (`[0, 255]` or `[-32768, 32767]`).
pub fn write_nifti(v: &Volume, datatype: Datatype) -> Vec<u8> {
    let header = NiftiHeader::for_geometry(v.geometry(), datatype);
    assemble(&header, v.data().iter().copied())
}

pub fn write_labels(lm: &LabelMap, datatype: Datatype) -> Vec<u8> {
    let header = NiftiHeader::for_geometry(lm.geometry(), datatype);
    assemble(&header, lm.data().iter().map(|&l| l as f64))
}

fn assemble(header: &NiftiHeader, values: impl Iterator<Item = f64>) -> Vec<u8> {
    let dt = header.datatype().expect("writer only uses supported datatypes");
    let count = NiftiImage::element_count(header).expect("writer headers are valid");
    let mut out = header.to_bytes();
    out.extend_from_slice(&[0u8; DATA_OFFSET - HEADER_SIZE]);
    out.reserve(count * dt.bytes());
    encode_raw(values, dt, &mut out);
    out
}

/// Reads a channel stack: a 3D image (one channel) or `dim[0] = 4`.
pub fn read_stack(bytes: &[u8]) -> Result<VolumeStack> {
    let img = NiftiImage::decode(bytes)?;
    let d = img.header.dim;
    let channels = match d[0] {
        3 => 1,
        4 => d[4] as usize,
        other => return Err(Error::UnsupportedLayout { field: "dim[0]", value: other as i64 }),
    };
    let n = img.geometry.voxel_count();
    let vols = (0..channels)
        .map(|c| Volume::new(img.geometry.clone(), img.data[c * n..(c + 1) * n].to_vec()))
        .collect::<Result<Vec<_>>>()?;
    VolumeStack::new(vols)
}

pub fn write_stack(stack: &VolumeStack, datatype: Datatype) -> Vec<u8> {
    let mut header = NiftiHeader::for_geometry(stack.geometry(), datatype);
    if stack.channel_count() > 1 {
        header.dim[0] = 4;
        header.dim[4] = stack.channel_count() as i16;
        header.pixdim[4] = 1.0;
    }
    assemble(&header, stack.channels().iter().flat_map(|c| c.data().iter().copied()))
}

/// Reads a displacement field stored with the vector layout.
pub fn read_vector_field(bytes: &[u8]) -> Result<(Geometry, [Vec<f64>; 3])> {
    let img = NiftiImage::decode(bytes)?;
    let d = img.header.dim;
    if d[0] != 5 {
        return Err(Error::UnsupportedLayout { field: "dim[0]", value: d[0] as i64 });
    }
    if d[4] != 1 {
        return Err(Error::UnsupportedLayout { field: "dim[4]", value: d[4] as i64 });
    }
    if d[5] != 3 {
        return Err(Error::UnsupportedLayout { field: "dim[5]", value: d[5] as i64 });
    }
    let n = img.geometry.voxel_count();
    let comps = std::array::from_fn(|c| img.data[c * n..(c + 1) * n].to_vec());
    Ok((img.geometry, comps))
}

pub fn write_vector_field(geometry: &Geometry, components: [&[f64]; 3]) -> Vec<u8> {
    let mut header = NiftiHeader::for_geometry(geometry, Datatype::Float32);
    header.dim[0] = 5;
    header.dim[4] = 1;
    header.dim[5] = 3;
    header.intent_code = INTENT_VECTOR;
    let name = b"displacement";
    header.intent_name[..name.len()].copy_from_slice(name);
    assemble(&header, components.iter().flat_map(|c| c.iter().copied()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_volume() -> Volume {
        let g = Geometry::with_spacing([3, 4, 5], [1.0, 1.0, 3.0]).unwrap();
        Volume::from_fn(g, |i, j, k| (i as f64) * 0.5 - (j as f64) + (k as f64) * 1.25)
    }

    #[test]
    fn written_size_is_header_plus_data() {
        let v = Volume::filled(Geometry::unit([2, 2, 2]), 1.5);
        assert_eq!(write_nifti(&v, Datatype::Float32).len(), 352 + 32);
        assert_eq!(write_nifti(&v, Datatype::Int16).len(), 352 + 16);
        assert_eq!(write_nifti(&v, Datatype::Uint8).len(), 352 + 8);
    }

    #[test]
    fn float_round_trip_is_exact() {
        let v = sample_volume();
        let back = read_volume(&write_nifti(&v, Datatype::Float32)).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.geometry().spacing(), [1.0, 1.0, 3.0]);
    }

    #[test]
    fn header_fields_at_fixed_offsets() {
        let v = sample_volume();
        let b = write_nifti(&v, Datatype::Float32);
        assert_eq!(LittleEndian::read_i32(&b[0..]), 348);
        assert_eq!(LittleEndian::read_i16(&b[40..]), 3);
        assert_eq!(LittleEndian::read_i16(&b[42..]), 3);
        assert_eq!(LittleEndian::read_i16(&b[70..]), 16);
        assert_eq!(LittleEndian::read_i16(&b[72..]), 32);
        assert_eq!(LittleEndian::read_f32(&b[108..]), 352.0);
        assert_eq!(LittleEndian::read_f32(&b[112..]), 1.0);
        assert_eq!(LittleEndian::read_i16(&b[254..]), 1);
        assert_eq!(LittleEndian::read_f32(&b[320..]), 3.0);
        assert_eq!(&b[344..348], b"n+1\0");
        assert_eq!(&b[348..352], &[0, 0, 0, 0]);
    }

    #[test]
    fn rejects_two_file_magic() {
        let mut b = write_nifti(&sample_volume(), Datatype::Float32);
        b[344..348].copy_from_slice(b"ni1\0");
        assert!(matches!(read_volume(&b), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn only_three_datatypes_are_supported() {
        let supported: Vec<i16> = (i16::MIN..=i16::MAX)
            .filter(|&c| Datatype::from_code(c).is_ok())
            .collect();
        assert_eq!(supported, vec![2, 4, 16]);

        let mut b = write_nifti(&sample_volume(), Datatype::Float32);
        LittleEndian::write_i16(&mut b[70..], 64);
        LittleEndian::write_i16(&mut b[72..], 64);
        assert!(matches!(read_volume(&b), Err(Error::UnsupportedDatatype(64))));
    }

    #[test]
    fn truncated_streams_are_reported() {
        let b = write_nifti(&sample_volume(), Datatype::Float32);
        assert!(matches!(read_volume(&b[..200]), Err(Error::TruncatedData { field: "header", .. })));
        assert!(matches!(
            read_volume(&b[..b.len() - 1]),
            Err(Error::TruncatedData { field: "data", .. })
        ));
    }

    #[test]
    fn non_positive_pixdim_names_the_index() {
        let mut b = write_nifti(&sample_volume(), Datatype::Float32);
        LittleEndian::write_f32(&mut b[76 + 8..], -1.0);
        assert!(matches!(
            read_volume(&b),
            Err(Error::NonPositivePixdim { index: 2, .. })
        ));
    }

    #[test]
    fn int16_write_clamps() {
        let g = Geometry::unit([4, 1, 1]);
        let v = Volume::new(g, vec![-40000.0, -1.4, 12.6, 1e9]).unwrap();
        let back = read_volume(&write_nifti(&v, Datatype::Int16)).unwrap();
        assert_eq!(back.data(), &[-32768.0, -1.0, 13.0, 32767.0]);
    }

    #[test]
    fn scaling_applied_and_zero_slope_ignored() {
        let g = Geometry::unit([2, 1, 1]);
        let v = Volume::new(g, vec![10.0, 20.0]).unwrap();
        let mut b = write_nifti(&v, Datatype::Int16);
        LittleEndian::write_f32(&mut b[112..], 0.5);
        LittleEndian::write_f32(&mut b[116..], -1.0);
        assert_eq!(read_volume(&b).unwrap().data(), &[4.0, 9.0]);
        LittleEndian::write_f32(&mut b[112..], 0.0);
        LittleEndian::write_f32(&mut b[116..], 0.0);
        assert_eq!(read_volume(&b).unwrap().data(), &[10.0, 20.0]);
    }

    fn to_big_endian(le: &[u8]) -> Vec<u8> {
        // Swap every header field, then the float32 payload.
        let mut b = le.to_vec();
        let swap = |b: &mut Vec<u8>, at: usize, width: usize| b[at..at + width].reverse();
        swap(&mut b, 0, 4);
        for at in (40..56).step_by(2) {
            swap(&mut b, at, 2);
        }
        for at in (56..68).step_by(4) {
            swap(&mut b, at, 4);
        }
        for at in [68, 70, 72, 74, 120, 252, 254] {
            swap(&mut b, at, 2);
        }
        for at in (76..120).step_by(4).chain((124..148).step_by(4)).chain((256..328).step_by(4)) {
            swap(&mut b, at, 4);
        }
        for at in (352..b.len()).step_by(4) {
            swap(&mut b, at, 4);
        }
        b
    }

    #[test]
    fn reads_big_endian() {
        let v = sample_volume();
        let be = to_big_endian(&write_nifti(&v, Datatype::Float32));
        let (_, endian) = NiftiHeader::parse(&be).unwrap();
        assert_eq!(endian, Endian::Big);
        assert_eq!(read_volume(&be).unwrap(), v);
    }

    #[test]
    fn sform_zero_falls_back_to_pixdim() {
        let g = Geometry::new(
            [2, 2, 2],
            [2.0, 2.0, 2.0],
            Matrix4::new(
                2.0, 0.0, 0.0, 10.0, 0.0, 2.0, 0.0, -5.0, 0.0, 0.0, 2.0, 3.0, 0.0, 0.0, 0.0, 1.0,
            ),
        )
        .unwrap();
        let v = Volume::filled(g, 1.0);
        let mut b = write_nifti(&v, Datatype::Float32);
        assert_eq!(read_volume(&b).unwrap().geometry().grid_to_world()[(0, 3)], 10.0);
        LittleEndian::write_i16(&mut b[254..], 0);
        let back = read_volume(&b).unwrap();
        assert_eq!(back.geometry().grid_to_world()[(0, 3)], 0.0);
        assert_eq!(back.geometry().grid_to_world()[(1, 1)], 2.0);
    }

    #[test]
    fn gzip_is_transparent() {
        let v = sample_volume();
        let gz = gzip(&write_nifti(&v, Datatype::Float32)).unwrap();
        assert_eq!(gz[0], 0x1f);
        assert_eq!(read_volume(&gz).unwrap(), v);
    }

    #[test]
    fn labels_and_dispatch() {
        let g = Geometry::unit([3, 1, 1]);
        let lm = LabelMap::new(g.clone(), vec![0, 2, 300]).unwrap();
        let b = write_labels(&lm, Datatype::Int16);
        match read_nifti(&b).unwrap() {
            Decoded::Labels(back) => assert_eq!(back, lm),
            Decoded::Intensity(_) => panic!("int16 without scaling should decode as labels"),
        }
        let v = Volume::new(g, vec![0.0, 2.0, 300.0]).unwrap();
        assert!(matches!(read_nifti(&write_nifti(&v, Datatype::Float32)).unwrap(), Decoded::Intensity(_)));
    }

    #[test]
    fn stack_and_vector_layouts() {
        let g = Geometry::unit([2, 3, 2]);
        let a = Volume::from_fn(g.clone(), |i, j, k| (i + j + k) as f64);
        let b = a.map(|x| -x);
        let stack = VolumeStack::new(vec![a.clone(), b.clone()]).unwrap();
        let back = read_stack(&write_stack(&stack, Datatype::Float32)).unwrap();
        assert_eq!(back, stack);

        let bytes = write_vector_field(&g, [a.data(), b.data(), a.data()]);
        assert_eq!(LittleEndian::read_i16(&bytes[40..]), 5);
        assert_eq!(LittleEndian::read_i16(&bytes[68..]), INTENT_VECTOR);
        let (geom, comps) = read_vector_field(&bytes).unwrap();
        assert!(geom.matches(&g));
        assert_eq!(comps[1], b.data());
        assert!(read_volume(&bytes).is_err());
    }
}
