//! Volume data model plus the two on-disk containers: NIfTI-1 single file
//! (`.nii`) and the raw `MGV1` format (16-byte header, little-endian f32 payload).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MGV1_MAGIC: &[u8; 4] = b"MGV1";
const NIFTI_HEADER_LEN: usize = 348;
const NIFTI_VOX_OFFSET: usize = 352;

pub const META_NORM_MIN: &str = "norm_min";
pub const META_NORM_MAX: &str = "norm_max";

/// Single-channel intensity field stored row-major as `[D, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    data: Vec<f32>,
    pub spacing: [f32; 3],
    mask: Option<Vec<bool>>,
    pub meta: BTreeMap<String, String>,
}

impl Volume {
    pub fn new(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n == 0 || data.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "dims {dims:?} need {n} voxels, got {}",
                data.len()
            )));
        }
        Ok(Self {
            dims,
            data,
            spacing: [1.0; 3],
            mask: None,
            meta: BTreeMap::new(),
        })
    }

    pub fn filled(dims: [usize; 3], value: f32) -> Self {
        let n = dims.iter().product();
        Self::new(dims, vec![value; n]).expect("non-empty dims")
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "mask has {} voxels, volume has {}",
                mask.len(),
                self.data.len()
            )));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn without_mask(mut self) -> Self {
        self.mask = None;
        self
    }

    /// Foreground = voxels whose value is not exactly zero.
    pub fn with_nonzero_mask(self) -> Self {
        let mask = self.data.iter().map(|&v| v != 0.0).collect();
        self.with_mask(mask).expect("same length")
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    /// Same geometry and mask, new voxel values.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        if data.len() != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "replacement data has {} voxels, volume has {}",
                data.len(),
                self.data.len()
            )));
        }
        Ok(Self {
            dims: self.dims,
            data,
            spacing: self.spacing,
            mask: self.mask.clone(),
            meta: self.meta.clone(),
        })
    }

    /// View as a single-channel `[1, D, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let [d, h, w] = self.dims;
        Tensor::from_vec(&[1, d, h, w], self.data.clone()).expect("consistent dims")
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        match t.shape() {
            [1, d, h, w] | [d, h, w] => Self::new([*d, *h, *w], t.data().to_vec()),
            s => Err(Error::ShapeMismatch(format!("expected one channel, got {s:?}"))),
        }
    }

    fn check_finite(&self) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFiniteVolume)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    U8,
    I16,
    F32,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::I16 => 2,
            Dtype::F32 => 4,
        }
    }

    fn nifti_code(self) -> i16 {
        match self {
            Dtype::U8 => 2,
            Dtype::I16 => 4,
            Dtype::F32 => 16,
        }
    }

    fn from_nifti(code: i16) -> Result<Self> {
        match code {
            2 => Ok(Dtype::U8),
            4 => Ok(Dtype::I16),
            16 => Ok(Dtype::F32),
            other => Err(Error::UnsupportedDtype(other)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeHeader {
    /// `[D, H, W]`
    pub dims: [usize; 3],
    pub dtype: Dtype,
    pub spacing: [f32; 3],
    /// Voxel-to-world transform, row-major (NIfTI x/y/z world axes).
    pub affine: [[f32; 4]; 4],
    pub payload_offset: usize,
    pub scale: Option<(f32, f32)>,
}

impl VolumeHeader {
    pub fn payload_len(&self) -> usize {
        self.dims.iter().product::<usize>() * self.dtype.size()
    }
}

fn diag_affine(spacing: [f32; 3]) -> [[f32; 4]; 4] {
    // world x ↔ W, y ↔ H, z ↔ D
    [
        [spacing[2], 0.0, 0.0, 0.0],
        [0.0, spacing[1], 0.0, 0.0],
        [0.0, 0.0, spacing[0], 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

fn le_i16(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn le_i32(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn le_f32(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn parse_header(bytes: &[u8]) -> Result<VolumeHeader> {
    if bytes.len() >= 16 && &bytes[..4] == MGV1_MAGIC {
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let dims = [dim(0) as usize, dim(1) as usize, dim(2) as usize];
        if dims.contains(&0) {
            return Err(Error::MalformedHeader(format!("zero dimension in {dims:?}")));
        }
        return Ok(VolumeHeader {
            dims,
            dtype: Dtype::F32,
            spacing: [1.0; 3],
            affine: diag_affine([1.0; 3]),
            payload_offset: 16,
            scale: None,
        });
    }
    if bytes.len() < NIFTI_HEADER_LEN {
        return Err(Error::MalformedHeader(format!(
            "{} bytes is too short for any supported header",
            bytes.len()
        )));
    }
    if le_i32(bytes, 0) != NIFTI_HEADER_LEN as i32 {
        return Err(Error::MalformedHeader(
            "neither MGV1 magic nor little-endian NIfTI-1 sizeof_hdr".into(),
        ));
    }
    if &bytes[344..348] != b"n+1\0" {
        return Err(Error::MalformedHeader("NIfTI magic is not \"n+1\"".into()));
    }
    let ndim = le_i16(bytes, 40);
    let d: Vec<i16> = (1..=7).map(|i| le_i16(bytes, 40 + 2 * i)).collect();
    if !(1..=7).contains(&ndim) || d[..ndim as usize].iter().any(|&v| v < 1) {
        return Err(Error::MalformedHeader(format!("bad dim field {ndim} {d:?}")));
    }
    if ndim > 3 && d[3..ndim as usize].iter().any(|&v| v != 1) {
        return Err(Error::MalformedHeader("only 3D volumes are supported".into()));
    }
    let get = |i: usize| if i < ndim as usize { d[i] as usize } else { 1 };
    let (nx, ny, nz) = (get(0), get(1), get(2));
    let dtype = Dtype::from_nifti(le_i16(bytes, 70))?;
    let pix = |i: usize| le_f32(bytes, 76 + 4 * i).abs();
    let fix = |v: f32| if v > 0.0 && v.is_finite() { v } else { 1.0 };
    let spacing = [fix(pix(3)), fix(pix(2)), fix(pix(1))];
    let vox_offset = le_f32(bytes, 108);
    if !(vox_offset >= NIFTI_HEADER_LEN as f32) {
        return Err(Error::MalformedHeader(format!("vox_offset {vox_offset}")));
    }
    let slope = le_f32(bytes, 112);
    let inter = le_f32(bytes, 116);
    let scale = (slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0))
        .then_some((slope, inter));
    let sform_code = le_i16(bytes, 254);
    let affine = if sform_code > 0 {
        let row = |off: usize| {
            [
                le_f32(bytes, off),
                le_f32(bytes, off + 4),
                le_f32(bytes, off + 8),
                le_f32(bytes, off + 12),
            ]
        };
        [row(280), row(296), row(312), [0.0, 0.0, 0.0, 1.0]]
    } else {
        diag_affine(spacing)
    };
    Ok(VolumeHeader {
        dims: [nz, ny, nx],
        dtype,
        spacing,
        affine,
        payload_offset: vox_offset as usize,
        scale,
    })
}

pub fn read_header(path: &Path) -> Result<VolumeHeader> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_header(&bytes)
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let header = parse_header(bytes)?;
    let payload = bytes.get(header.payload_offset..).unwrap_or(&[]);
    let expected = header.payload_len();
    if payload.len() != expected {
        return Err(Error::PayloadSizeMismatch {
            expected,
            found: payload.len(),
        });
    }
    let mut data: Vec<f32> = match header.dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::I16 => payload
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32)
            .collect(),
        Dtype::U8 => payload.iter().map(|&b| b as f32).collect(),
    };
    if let Some((slope, inter)) = header.scale {
        for v in &mut data {
            *v = *v * slope + inter;
        }
    }
    let mut v = Volume::new(header.dims, data)?;
    v.spacing = header.spacing;
    v.check_finite()?;
    Ok(v)
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes)
}

pub fn encode_mgv1(v: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * v.len());
    out.extend_from_slice(MGV1_MAGIC);
    for &d in &v.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in &v.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn encode_nifti(v: &Volume) -> Vec<u8> {
    let mut h = vec![0u8; NIFTI_VOX_OFFSET];
    let put_i16 = |h: &mut [u8], off: usize, val: i16| h[off..off + 2].copy_from_slice(&val.to_le_bytes());
    let put_i32 = |h: &mut [u8], off: usize, val: i32| h[off..off + 4].copy_from_slice(&val.to_le_bytes());
    let put_f32 = |h: &mut [u8], off: usize, val: f32| h[off..off + 4].copy_from_slice(&val.to_le_bytes());
    let [d, hh, w] = v.dims;
    put_i32(&mut h, 0, NIFTI_HEADER_LEN as i32);
    h[38] = b'r'; // regular
    let dim = [3i16, w as i16, hh as i16, d as i16, 1, 1, 1, 1];
    for (i, &x) in dim.iter().enumerate() {
        put_i16(&mut h, 40 + 2 * i, x);
    }
    put_i16(&mut h, 70, Dtype::F32.nifti_code());
    put_i16(&mut h, 72, 32);
    let pixdim = [1.0f32, v.spacing[2], v.spacing[1], v.spacing[0], 0.0, 0.0, 0.0, 0.0];
    for (i, &x) in pixdim.iter().enumerate() {
        put_f32(&mut h, 76 + 4 * i, x);
    }
    put_f32(&mut h, 108, NIFTI_VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    h[123] = 10 | 8; // xyzt_units: mm, s
    put_i16(&mut h, 252, 0);
    put_i16(&mut h, 254, 1);
    let aff = diag_affine(v.spacing);
    for (r, off) in [280usize, 296, 312].into_iter().enumerate() {
        for c in 0..4 {
            put_f32(&mut h, off + 4 * c, aff[r][c]);
        }
    }
    h[344..348].copy_from_slice(b"n+1\0");
    let mut out = h;
    out.reserve(4 * v.len());
    for &x in &v.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

fn is_nifti_path(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("nii"))
}

/// Writes NIfTI-1 for `.nii` paths and MGV1 otherwise.
pub fn write_volume(v: &Volume, path: &Path) -> Result<()> {
    let bytes = if is_nifti_path(path) {
        encode_nifti(v)
    } else {
        encode_mgv1(v)
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn intensity_range(v: &Volume) -> Option<(f32, f32)> {
    let mut it = v
        .data
        .iter()
        .enumerate()
        .filter(|(i, _)| v.mask.as_ref().is_none_or(|m| m[*i]))
        .map(|(_, &x)| x);
    let first = it.next()?;
    Some(it.fold((first, first), |(lo, hi), x| (lo.min(x), hi.max(x))))
}

/// Affinely maps the in-mask range onto `[-1, 1]`; out-of-mask voxels become −1.
pub fn normalize_intensity(v: &Volume) -> Result<Volume> {
    let (lo, hi) = intensity_range(v).ok_or(Error::ConstantVolume(0.0))?;
    if hi <= lo {
        return Err(Error::ConstantVolume(lo));
    }
    let (lo64, span) = (lo as f64, hi as f64 - lo as f64);
    let data = v
        .data
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            if v.mask.as_ref().is_some_and(|m| !m[i]) {
                -1.0
            } else {
                ((x as f64 - lo64) / span * 2.0 - 1.0) as f32
            }
        })
        .collect();
    let mut out = v.with_data(data)?;
    out.meta.insert(META_NORM_MIN.into(), lo.to_string());
    out.meta.insert(META_NORM_MAX.into(), hi.to_string());
    Ok(out)
}

/// Inverse of [`normalize_intensity`] using the recorded range.
pub fn denormalize_intensity(v: &Volume) -> Result<Volume> {
    let get = |k: &str| -> Result<f64> {
        v.meta
            .get(k)
            .and_then(|s| s.parse::<f32>().ok())
            .map(|x| x as f64)
            .ok_or_else(|| Error::InvalidConfig(format!("volume lacks {k} metadata")))
    };
    let (lo, hi) = (get(META_NORM_MIN)?, get(META_NORM_MAX)?);
    let data = v
        .data
        .iter()
        .map(|&x| ((x as f64 + 1.0) * 0.5 * (hi - lo) + lo) as f32)
        .collect();
    let mut out = v.with_data(data)?;
    out.meta.remove(META_NORM_MIN);
    out.meta.remove(META_NORM_MAX);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(dims: [usize; 3], seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        Volume::new(dims, (0..n).map(|_| rng.random_range(-50.0..50.0)).collect()).unwrap()
    }

    #[test]
    fn zero_raw_file_reads_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.mgv");
        let mut bytes = Vec::from(*MGV1_MAGIC);
        for _ in 0..3 {
            bytes.extend_from_slice(&4u32.to_le_bytes());
        }
        bytes.extend(std::iter::repeat_n(0u8, 64 * 4));
        fs::write(&p, bytes).unwrap();
        let v = read_volume(&p).unwrap();
        assert_eq!(v.dims(), [4, 4, 4]);
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn round_trip_is_byte_exact_for_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let mut v = random_volume([8, 8, 8], 1);
        for name in ["a.mgv", "a.nii"] {
            let p = dir.path().join(name);
            if name.ends_with(".nii") {
                v.spacing = [1.5, 0.75, 2.0];
            }
            write_volume(&v, &p).unwrap();
            let r = read_volume(&p).unwrap();
            assert_eq!(r.dims(), v.dims());
            assert_eq!(r.spacing, v.spacing);
            let a: Vec<u32> = v.data().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u32> = r.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn single_voxel_payload_is_four_bytes() {
        let v = Volume::filled([1, 1, 1], 3.5);
        assert_eq!(encode_mgv1(&v).len(), 16 + 4);
        assert_eq!(encode_nifti(&v).len(), NIFTI_VOX_OFFSET + 4);
    }

    #[test]
    fn truncated_file_is_payload_mismatch() {
        let v = random_volume([4, 4, 4], 2);
        for bytes in [encode_mgv1(&v), encode_nifti(&v)] {
            let cut = &bytes[..bytes.len() - 1];
            assert!(matches!(
                decode_volume(cut),
                Err(Error::PayloadSizeMismatch { expected: 256, found: 255 })
            ));
        }
    }

    #[test]
    fn bad_magic_is_malformed() {
        let mut bytes = encode_mgv1(&random_volume([2, 2, 2], 3));
        bytes[0] = b'X';
        assert!(matches!(decode_volume(&bytes), Err(Error::MalformedHeader(_))));
        let mut nii = encode_nifti(&random_volume([2, 2, 2], 3));
        nii[345] = b'x';
        assert!(matches!(decode_volume(&nii), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn nifti_integer_dtypes_are_converted() {
        let v = Volume::new([1, 1, 3], vec![1.0, -2.0, 300.0]).unwrap();
        let mut bytes = encode_nifti(&v);
        bytes.truncate(NIFTI_VOX_OFFSET);
        bytes[70..72].copy_from_slice(&4i16.to_le_bytes());
        bytes[72..74].copy_from_slice(&16i16.to_le_bytes());
        for x in [1i16, -2, 300] {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        let r = decode_volume(&bytes).unwrap();
        assert_eq!(r.data(), &[1.0, -2.0, 300.0]);
        bytes[70..72].copy_from_slice(&64i16.to_le_bytes());
        assert!(matches!(decode_volume(&bytes), Err(Error::UnsupportedDtype(64))));
    }

    #[test]
    fn nan_payload_rejected() {
        let v = Volume::new([1, 1, 2], vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(decode_volume(&encode_mgv1(&v)), Err(Error::NonFiniteVolume)));
    }

    #[test]
    fn unwritable_target_is_io_failure() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("missing-dir").join("v.mgv");
        let err = write_volume(&Volume::filled([1, 1, 1], 0.0), &p).unwrap_err();
        assert!(matches!(err, Error::IoFailure { .. }));
    }

    #[test]
    fn normalize_endpoints_and_midpoint() {
        let v = Volume::new([1, 1, 3], vec![0.0, 5.0, 10.0]).unwrap();
        let n = normalize_intensity(&v).unwrap();
        assert_eq!(n.data(), &[-1.0, 0.0, 1.0]);
        let again = normalize_intensity(&n).unwrap();
        assert_eq!(again.data(), n.data());
        assert!(matches!(
            normalize_intensity(&Volume::filled([2, 2, 2], 4.0)),
            Err(Error::ConstantVolume(_))
        ));
    }

    #[test]
    fn normalize_respects_mask() {
        let v = Volume::new([1, 1, 4], vec![100.0, 2.0, 4.0, 3.0])
            .unwrap()
            .with_mask(vec![false, true, true, true])
            .unwrap();
        let n = normalize_intensity(&v).unwrap();
        assert_eq!(n.data(), &[-1.0, -1.0, 1.0, 0.0]);
    }

    proptest! {
        #[test]
        fn denormalize_inverts_normalize(seed in 0u64..1000) {
            let v = random_volume([3, 4, 5], seed);
            let n = normalize_intensity(&v).unwrap();
            prop_assert!(n.data().iter().all(|x| (-1.0..=1.0).contains(x)));
            let back = denormalize_intensity(&n).unwrap();
            let scale = v.data().iter().fold(0.0f32, |m, x| m.max(x.abs()));
            for (a, b) in v.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= 1e-6 * scale);
            }
        }
    }
}
