//! IDX containers: two zero bytes, a type code, the rank, `rank` big-endian
//! u32 dimension sizes, then the big-endian payload.

use std::fs;
use std::path::Path;

use super::DataError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdxType {
    U8,
    I8,
    I16,
    I32,
    F32,
    F64,
}

impl IdxType {
    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0x08 => Self::U8,
            0x09 => Self::I8,
            0x0B => Self::I16,
            0x0C => Self::I32,
            0x0D => Self::F32,
            0x0E => Self::F64,
            _ => return None,
        })
    }

    pub fn code(self) -> u8 {
        match self {
            Self::U8 => 0x08,
            Self::I8 => 0x09,
            Self::I16 => 0x0B,
            Self::I32 => 0x0C,
            Self::F32 => 0x0D,
            Self::F64 => 0x0E,
        }
    }

    pub fn width(self) -> usize {
        match self {
            Self::U8 | Self::I8 => 1,
            Self::I16 => 2,
            Self::I32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub dtype: IdxType,
    pub dims: Vec<usize>,
    /// Payload converted to f64, row-major.
    pub data: Vec<f64>,
}

impl IdxArray {
    /// Unsigned-byte images scaled to [0, 1], one row per leading index.
    pub fn as_unit_images(&self) -> Result<(Vec<f64>, usize), DataError> {
        if self.dtype != IdxType::U8 || self.dims.is_empty() {
            return Err(DataError::Format("expected an unsigned-byte image array".into()));
        }
        let per: usize = self.dims[1..].iter().product();
        Ok((self.data.iter().map(|v| v / 255.0).collect(), per))
    }

    pub fn as_labels(&self) -> Result<Vec<usize>, DataError> {
        if self.dims.len() != 1 || !matches!(self.dtype, IdxType::U8 | IdxType::I32 | IdxType::I16) {
            return Err(DataError::Format("expected a rank-1 integer label array".into()));
        }
        self.data
            .iter()
            .map(|&v| {
                if v < 0.0 {
                    Err(DataError::Format(format!("negative label {v}")))
                } else {
                    Ok(v as usize)
                }
            })
            .collect()
    }
}

fn parse_err(offset: usize, msg: impl Into<String>) -> DataError {
    DataError::Parse {
        offset,
        msg: msg.into(),
    }
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray, DataError> {
    if bytes.len() < 4 {
        return Err(parse_err(bytes.len(), "truncated header"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(parse_err(0, "magic must start with two zero bytes"));
    }
    let dtype = IdxType::from_code(bytes[2])
        .ok_or_else(|| parse_err(2, format!("unknown data type code 0x{:02x}", bytes[2])))?;
    let rank = bytes[3] as usize;
    let mut offset = 4;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let Some(b) = bytes.get(offset..offset + 4) else {
            return Err(parse_err(offset, "truncated dimension sizes"));
        };
        dims.push(u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as usize);
        offset += 4;
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, d| acc.checked_mul(*d))
        .ok_or_else(|| parse_err(4, "dimension product overflows"))?;
    let need = count
        .checked_mul(dtype.width())
        .ok_or_else(|| parse_err(4, "payload size overflows"))?;
    let have = bytes.len() - offset;
    if have < need {
        return Err(parse_err(
            bytes.len(),
            format!("truncated payload: {have} of {need} bytes"),
        ));
    }
    if have > need {
        return Err(parse_err(offset + need, format!("{} trailing bytes", have - need)));
    }
    let payload = &bytes[offset..];
    let w = dtype.width();
    let data = payload
        .chunks_exact(w)
        .map(|c| match dtype {
            IdxType::U8 => c[0] as f64,
            IdxType::I8 => c[0] as i8 as f64,
            IdxType::I16 => i16::from_be_bytes([c[0], c[1]]) as f64,
            IdxType::I32 => i32::from_be_bytes([c[0], c[1], c[2], c[3]]) as f64,
            IdxType::F32 => f32::from_be_bytes([c[0], c[1], c[2], c[3]]) as f64,
            IdxType::F64 => f64::from_be_bytes(c.try_into().unwrap()),
        })
        .collect();
    Ok(IdxArray { dtype, dims, data })
}

/// Encodes an array; values are cast to the element type.
pub fn encode_idx(arr: &IdxArray) -> Vec<u8> {
    let mut out = vec![0, 0, arr.dtype.code(), arr.dims.len() as u8];
    for d in &arr.dims {
        out.extend_from_slice(&(*d as u32).to_be_bytes());
    }
    for &v in &arr.data {
        match arr.dtype {
            IdxType::U8 => out.push(v as u8),
            IdxType::I8 => out.push(v as i8 as u8),
            IdxType::I16 => out.extend_from_slice(&(v as i16).to_be_bytes()),
            IdxType::I32 => out.extend_from_slice(&(v as i32).to_be_bytes()),
            IdxType::F32 => out.extend_from_slice(&(v as f32).to_be_bytes()),
            IdxType::F64 => out.extend_from_slice(&v.to_be_bytes()),
        }
    }
    out
}

pub fn read_idx(path: &Path) -> Result<IdxArray, DataError> {
    parse_idx(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_small_file() {
        let bytes = [0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 255, 51, 102];
        let arr = parse_idx(&bytes).unwrap();
        assert_eq!(arr.dtype, IdxType::U8);
        assert_eq!(arr.dims, vec![1, 2, 2]);
        assert_eq!(arr.data, vec![0.0, 255.0, 51.0, 102.0]);
        assert_eq!(encode_idx(&arr), bytes);
        let (img, per) = arr.as_unit_images().unwrap();
        assert_eq!(per, 4);
        assert_eq!(img, vec![0.0, 1.0, 0.2, 0.4]);
        match parse_idx(&bytes[..bytes.len() - 1]) {
            Err(DataError::Parse { offset, .. }) => assert_eq!(offset, 19),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn wide_types_are_big_endian() {
        let arr = IdxArray {
            dtype: IdxType::I32,
            dims: vec![3],
            data: vec![-1.0, 70000.0, 5.0],
        };
        let bytes = encode_idx(&arr);
        assert_eq!(&bytes[8..12], &(-1i32).to_be_bytes());
        assert_eq!(parse_idx(&bytes).unwrap(), arr);
        assert_eq!(parse_idx(&bytes).unwrap().as_labels().unwrap_err().to_string(), "negative label -1");
        let f = IdxArray {
            dtype: IdxType::F64,
            dims: vec![2, 1],
            data: vec![0.125, -3.5],
        };
        assert_eq!(parse_idx(&encode_idx(&f)).unwrap(), f);
    }

    #[test]
    fn rejects_bad_magic() {
        assert!(parse_idx(&[1, 0, 8, 1, 0, 0, 0, 0]).is_err());
        assert!(parse_idx(&[0, 0, 0x42, 1, 0, 0, 0, 0]).is_err());
        assert!(parse_idx(&[0, 0, 8]).is_err());
        // four zero dims worth of header but only part of the sizes
        assert!(parse_idx(&[0, 0, 8, 2, 0, 0, 0, 1, 0, 0]).is_err());
        // rank 0 holds a single element
        assert_eq!(parse_idx(&[0, 0, 8, 0, 7]).unwrap().data, vec![7.0]);
    }
}
