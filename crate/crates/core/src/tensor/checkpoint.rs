//! Flat binary parameter files.
//!
//! Layout: the 8-byte magic `MEMVAE01`, then one record per parameter until
//! end of file. A record is `name_len: u32`, the UTF-8 name, `rank: u32`,
//! `rank` dimensions as `u64`, and the values as `f64`. All integers and
//! floats are little-endian.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MEMVAE01";

pub fn write_checkpoint<'a, W: Write>(
    mut w: W,
    params: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    for (name, t) in params {
        let name_len = u32::try_from(name.len()).map_err(|_| invalid("parameter name too long"))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for d in t.shape() {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in t.values() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn read_checkpoint<R: Read>(mut r: R) -> io::Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(invalid("bad checkpoint magic"));
    }
    let mut out = Vec::new();
    loop {
        let mut len = [0u8; 4];
        if !read_exact_or_eof(&mut r, &mut len)? {
            break;
        }
        let name_len = u32::from_le_bytes(len) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| invalid("parameter name is not UTF-8"))?;
        let rank = read_u32(&mut r)? as usize;
        let mut dims = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            let d = read_u64(&mut r)?;
            dims.push(usize::try_from(d).map_err(|_| invalid("dimension too large"))?);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, d| acc.checked_mul(*d))
            .ok_or_else(|| invalid("dimension product overflows"))?;
        let mut values = Vec::with_capacity(n.min(1 << 20));
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        let t = Tensor::new(dims, values).map_err(|e| invalid(&e.to_string()))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn save_checkpoint<'a>(
    path: &Path,
    params: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> io::Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), params)
}

pub fn load_checkpoint(path: &Path) -> io::Result<Vec<(String, Tensor)>> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

fn invalid(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.to_string())
}

/// Fills `buf`, returning `false` on a clean end of stream before any byte.
fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<bool> {
    let mut read = 0;
    while read < buf.len() {
        match r.read(&mut buf[read..]) {
            Ok(0) if read == 0 => return Ok(false),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => read += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(true)
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
