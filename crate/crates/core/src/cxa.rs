//! CXA portable array format.
//!
//! Layout: 16-byte header (`b"CXARRAY\0"` + version u32 LE + 4 reserved zero
//! bytes), then rank (u32 LE), `rank` dimension sizes (u32 LE each), a dtype
//! tag (u32 LE) and the raw little-endian payload. Complex samples are stored
//! as interleaved `(re, im)` double pairs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::{ComplexGrid, DisplacementField, LabelGrid, MultiCoilKSpace, RealGrid};

const MAGIC: &[u8; 8] = b"CXARRAY\0";
const VERSION: u32 = 1;
const MAX_RANK: usize = 8;

const DTYPE_F64: u32 = 1;
const DTYPE_C128: u32 = 2;
const DTYPE_U8: u32 = 3;

/// An n-dimensional array as stored in a `.cxa` file.
#[derive(Debug, Clone, PartialEq)]
pub enum CxaArray {
    F64 { dims: Vec<usize>, data: Vec<f64> },
    C128 { dims: Vec<usize>, data: Vec<Complex64> },
    U8 { dims: Vec<usize>, data: Vec<u8> },
}

impl CxaArray {
    pub fn dims(&self) -> &[usize] {
        match self {
            CxaArray::F64 { dims, .. } | CxaArray::C128 { dims, .. } | CxaArray::U8 { dims, .. } => {
                dims
            }
        }
    }

    pub fn len(&self) -> usize {
        match self {
            CxaArray::F64 { data, .. } => data.len(),
            CxaArray::C128 { data, .. } => data.len(),
            CxaArray::U8 { data, .. } => data.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<()> {
        let n: usize = self.dims().iter().product();
        if self.dims().len() > MAX_RANK {
            return Err(Error::Format(format!("rank {} exceeds {MAX_RANK}", self.dims().len())));
        }
        if n != self.len() {
            return Err(Error::Format(format!(
                "dims {:?} imply {n} elements, payload has {}",
                self.dims(),
                self.len()
            )));
        }
        Ok(())
    }
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Serialize an array to any byte sink.
pub fn write_to<W: Write>(w: &mut W, arr: &CxaArray) -> Result<()> {
    arr.validate()?;
    w.write_all(MAGIC)?;
    write_u32(w, VERSION)?;
    w.write_all(&[0u8; 4])?;
    write_u32(w, arr.dims().len() as u32)?;
    for &d in arr.dims() {
        if d > u32::MAX as usize {
            return Err(Error::Format(format!("dimension {d} too large")));
        }
        write_u32(w, d as u32)?;
    }
    match arr {
        CxaArray::F64 { data, .. } => {
            write_u32(w, DTYPE_F64)?;
            for &v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        CxaArray::C128 { data, .. } => {
            write_u32(w, DTYPE_C128)?;
            for c in data {
                w.write_all(&c.re.to_le_bytes())?;
                w.write_all(&c.im.to_le_bytes())?;
            }
        }
        CxaArray::U8 { data, .. } => {
            write_u32(w, DTYPE_U8)?;
            w.write_all(data)?;
        }
    }
    Ok(())
}

/// Deserialize an array from any byte source.
pub fn read_from<R: Read>(r: &mut R) -> Result<CxaArray> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a CXA file (bad magic)".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported CXA version {version}")));
    }
    let mut reserved = [0u8; 4];
    r.read_exact(&mut reserved)?;
    let rank = read_u32(r)? as usize;
    if rank > MAX_RANK {
        return Err(Error::Format(format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut n: usize = 1;
    for _ in 0..rank {
        let d = read_u32(r)? as usize;
        n = n
            .checked_mul(d)
            .ok_or_else(|| Error::Format("dimension product overflows".into()))?;
        dims.push(d);
    }
    let dtype = read_u32(r)?;
    match dtype {
        DTYPE_F64 => {
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(read_f64(r)?);
            }
            Ok(CxaArray::F64 { dims, data })
        }
        DTYPE_C128 => {
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let re = read_f64(r)?;
                let im = read_f64(r)?;
                data.push(Complex64::new(re, im));
            }
            Ok(CxaArray::C128 { dims, data })
        }
        DTYPE_U8 => {
            let mut data = vec![0u8; n];
            r.read_exact(&mut data)?;
            Ok(CxaArray::U8 { dims, data })
        }
        other => Err(Error::Format(format!("unknown CXA dtype tag {other}"))),
    }
}

pub fn write_file<P: AsRef<Path>>(path: P, arr: &CxaArray) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_to(&mut w, arr)?;
    w.flush()?;
    Ok(())
}

pub fn read_file<P: AsRef<Path>>(path: P) -> Result<CxaArray> {
    let mut r = BufReader::new(File::open(path)?);
    read_from(&mut r)
}

// Grid conversions. Grids are rank-2 [h, w]; stacks are rank-3 [n, h, w];
// displacement fields are rank-3 [2, h, w] with ux first.

impl From<&RealGrid> for CxaArray {
    fn from(g: &RealGrid) -> Self {
        CxaArray::F64 { dims: vec![g.h, g.w], data: g.data.clone() }
    }
}

impl From<&ComplexGrid> for CxaArray {
    fn from(g: &ComplexGrid) -> Self {
        CxaArray::C128 { dims: vec![g.h, g.w], data: g.data.clone() }
    }
}

impl From<&LabelGrid> for CxaArray {
    fn from(g: &LabelGrid) -> Self {
        CxaArray::U8 { dims: vec![g.h, g.w], data: g.data.clone() }
    }
}

impl From<&MultiCoilKSpace> for CxaArray {
    fn from(k: &MultiCoilKSpace) -> Self {
        let (n, h, w) = (k.n_coils(), k.h(), k.w());
        let mut data = Vec::with_capacity(n * h * w);
        for c in &k.coils {
            data.extend_from_slice(&c.data);
        }
        CxaArray::C128 { dims: vec![n, h, w], data }
    }
}

impl From<&DisplacementField> for CxaArray {
    fn from(f: &DisplacementField) -> Self {
        let (h, w) = (f.h(), f.w());
        let mut data = Vec::with_capacity(2 * h * w);
        data.extend_from_slice(&f.ux.data);
        data.extend_from_slice(&f.uy.data);
        CxaArray::F64 { dims: vec![2, h, w], data }
    }
}

pub fn to_real_grid(arr: &CxaArray) -> Result<RealGrid> {
    match arr {
        CxaArray::F64 { dims, data } if dims.len() == 2 => {
            Ok(RealGrid { h: dims[0], w: dims[1], data: data.clone() })
        }
        _ => Err(Error::Format(format!(
            "expected rank-2 f64 array, got {:?}",
            arr.dims()
        ))),
    }
}

pub fn to_complex_grid(arr: &CxaArray) -> Result<ComplexGrid> {
    match arr {
        CxaArray::C128 { dims, data } if dims.len() == 2 => {
            Ok(ComplexGrid { h: dims[0], w: dims[1], data: data.clone() })
        }
        _ => Err(Error::Format(format!(
            "expected rank-2 complex array, got {:?}",
            arr.dims()
        ))),
    }
}

pub fn to_label_grid(arr: &CxaArray) -> Result<LabelGrid> {
    match arr {
        CxaArray::U8 { dims, data } if dims.len() == 2 => {
            Ok(LabelGrid { h: dims[0], w: dims[1], data: data.clone() })
        }
        _ => Err(Error::Format(format!(
            "expected rank-2 u8 array, got {:?}",
            arr.dims()
        ))),
    }
}

pub fn to_multicoil(arr: &CxaArray) -> Result<MultiCoilKSpace> {
    match arr {
        CxaArray::C128 { dims, data } if dims.len() == 3 => {
            let (n, h, w) = (dims[0], dims[1], dims[2]);
            let coils = (0..n)
                .map(|i| ComplexGrid {
                    h,
                    w,
                    data: data[i * h * w..(i + 1) * h * w].to_vec(),
                })
                .collect();
            MultiCoilKSpace::new(coils)
        }
        _ => Err(Error::Format(format!(
            "expected rank-3 complex array, got {:?}",
            arr.dims()
        ))),
    }
}

pub fn to_displacement_field(arr: &CxaArray) -> Result<DisplacementField> {
    match arr {
        CxaArray::F64 { dims, data } if dims.len() == 3 && dims[0] == 2 => {
            let (h, w) = (dims[1], dims[2]);
            Ok(DisplacementField {
                ux: RealGrid { h, w, data: data[..h * w].to_vec() },
                uy: RealGrid { h, w, data: data[h * w..].to_vec() },
            })
        }
        _ => Err(Error::Format(format!(
            "expected [2, h, w] f64 array, got {:?}",
            arr.dims()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip(arr: CxaArray) -> CxaArray {
        let mut buf = Vec::new();
        write_to(&mut buf, &arr).unwrap();
        read_from(&mut &buf[..]).unwrap()
    }

    #[test]
    fn roundtrip_f64() {
        let arr = CxaArray::F64 {
            dims: vec![2, 3],
            data: vec![0.0, -1.5, 2.25, f64::MIN_POSITIVE, 1e300, -0.0],
        };
        assert_eq!(roundtrip(arr.clone()), arr);
    }

    #[test]
    fn roundtrip_c128() {
        let arr = CxaArray::C128 {
            dims: vec![4],
            data: vec![
                Complex64::new(1.0, -2.0),
                Complex64::new(0.0, 0.0),
                Complex64::new(-3.5, 4.5),
                Complex64::new(1e-12, -1e12),
            ],
        };
        assert_eq!(roundtrip(arr.clone()), arr);
    }

    #[test]
    fn roundtrip_u8() {
        let arr = CxaArray::U8 { dims: vec![2, 2, 2], data: vec![0, 1, 2, 3, 250, 251, 252, 255] };
        assert_eq!(roundtrip(arr.clone()), arr);
    }

    #[test]
    fn header_is_16_bytes_then_dims() {
        let arr = CxaArray::U8 { dims: vec![3], data: vec![7, 8, 9] };
        let mut buf = Vec::new();
        write_to(&mut buf, &arr).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), VERSION);
        assert_eq!(&buf[12..16], &[0u8; 4]);
        assert_eq!(u32::from_le_bytes(buf[16..20].try_into().unwrap()), 1); // rank
        assert_eq!(u32::from_le_bytes(buf[20..24].try_into().unwrap()), 3); // dim
        assert_eq!(u32::from_le_bytes(buf[24..28].try_into().unwrap()), DTYPE_U8);
        assert_eq!(&buf[28..], &[7, 8, 9]);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut buf = Vec::new();
        write_to(&mut buf, &CxaArray::U8 { dims: vec![1], data: vec![0] }).unwrap();
        buf[0] = b'X';
        assert!(read_from(&mut &buf[..]).is_err());
    }

    #[test]
    fn rejects_truncated_payload() {
        let mut buf = Vec::new();
        write_to(&mut buf, &CxaArray::F64 { dims: vec![4], data: vec![1.0; 4] }).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_from(&mut &buf[..]).is_err());
    }

    #[test]
    fn rejects_dim_payload_mismatch() {
        let arr = CxaArray::F64 { dims: vec![5], data: vec![1.0; 4] };
        let mut buf = Vec::new();
        assert!(write_to(&mut buf, &arr).is_err());
    }

    #[test]
    fn file_roundtrip_and_grid_conversions() {
        let dir = tempfile::tempdir().unwrap();
        let field = DisplacementField {
            ux: RealGrid::from_fn(3, 4, |y, x| (y * 4 + x) as f64),
            uy: RealGrid::from_fn(3, 4, |y, x| -((y + x) as f64)),
        };
        let p = dir.path().join("f.cxa");
        write_file(&p, &CxaArray::from(&field)).unwrap();
        let back = to_displacement_field(&read_file(&p).unwrap()).unwrap();
        assert_eq!(back, field);

        let k = MultiCoilKSpace::new(vec![
            ComplexGrid::from_fn(2, 2, |y, x| Complex64::new(y as f64, x as f64)),
            ComplexGrid::from_fn(2, 2, |y, x| Complex64::new(x as f64, -(y as f64))),
        ])
        .unwrap();
        let p2 = dir.path().join("k.cxa");
        write_file(&p2, &CxaArray::from(&k)).unwrap();
        let back = to_multicoil(&read_file(&p2).unwrap()).unwrap();
        assert_eq!(back, k);
    }
}
