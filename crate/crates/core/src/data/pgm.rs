//! Netpbm greyscale images (binary P5 and ASCII P2).

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use super::DataError;

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// Intensities in [0, 1], row-major.
    pub pixels: Vec<f64>,
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.pixels.iter().map(|v| to_byte(*v)));
    out
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> io::Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_pgm(img))
}

/// Lays `tiles` (each `side.0 × side.1`) out on a grid with one-pixel
/// mid-grey separators.
pub fn tile_grid(tiles: &[Vec<f64>], side: (usize, usize), cols: usize) -> GrayImage {
    let (w, h) = side;
    let cols = cols.max(1).min(tiles.len().max(1));
    let rows = tiles.len().div_ceil(cols).max(1);
    let width = cols * (w + 1) - 1;
    let height = rows * (h + 1) - 1;
    let mut pixels = vec![0.5; width * height];
    for (t, tile) in tiles.iter().enumerate() {
        let (r, c) = (t / cols, t % cols);
        for y in 0..h {
            for x in 0..w {
                let v = tile.get(y * w + x).copied().unwrap_or(0.0);
                pixels[(r * (h + 1) + y) * width + c * (w + 1) + x] = v;
            }
        }
    }
    GrayImage {
        width,
        height,
        pixels,
    }
}

pub fn write_grid(path: &Path, tiles: &[Vec<f64>], side: (usize, usize), cols: usize) -> io::Result<()> {
    write_pgm(path, &tile_grid(tiles, side, cols))
}

struct Tokens<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Tokens<'_> {
    fn next(&mut self) -> Result<usize, DataError> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|b| *b != b'\n') {
                        self.pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| b.is_ascii_digit()) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or(DataError::Parse {
                offset: start,
                msg: "expected an unsigned integer".into(),
            })
    }
}

pub fn parse_pgm(bytes: &[u8]) -> Result<GrayImage, DataError> {
    let binary = match bytes.get(..2) {
        Some(b"P5") => true,
        Some(b"P2") => false,
        _ => {
            return Err(DataError::Parse {
                offset: 0,
                msg: "not a P2/P5 greymap".into(),
            })
        }
    };
    let mut tok = Tokens { bytes, pos: 2 };
    let width = tok.next()?;
    let height = tok.next()?;
    let maxval = tok.next()?;
    if maxval == 0 || maxval > 65535 {
        return Err(DataError::Parse {
            offset: tok.pos,
            msg: format!("bad maxval {maxval}"),
        });
    }
    let n = width.checked_mul(height).ok_or(DataError::Parse {
        offset: tok.pos,
        msg: "image size overflows".into(),
    })?;
    let scale = maxval as f64;
    let pixels = if binary {
        let start = tok.pos + 1;
        let w = if maxval < 256 { 1 } else { 2 };
        let body = bytes.get(start..).unwrap_or(&[]);
        if body.len() < n * w {
            return Err(DataError::Parse {
                offset: bytes.len(),
                msg: format!("truncated raster: {} of {} bytes", body.len(), n * w),
            });
        }
        body[..n * w]
            .chunks_exact(w)
            .map(|c| {
                let v = if w == 1 { c[0] as f64 } else { u16::from_be_bytes([c[0], c[1]]) as f64 };
                v / scale
            })
            .collect()
    } else {
        (0..n).map(|_| tok.next().map(|v| v as f64 / scale)).collect::<Result<Vec<_>, _>>()?
    };
    Ok(GrayImage {
        width,
        height,
        pixels,
    })
}

pub fn read_pgm(path: &Path) -> Result<GrayImage, DataError> {
    parse_pgm(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_round_trip() {
        let img = GrayImage {
            width: 3,
            height: 2,
            pixels: vec![0.0, 1.0, 0.0, 1.0, 1.0, 0.0],
        };
        assert_eq!(parse_pgm(&encode_pgm(&img)).unwrap(), img);
    }

    #[test]
    fn ascii_with_comments() {
        let src = b"P2\n# a comment\n2 2\n4\n0 4\n2 4\n";
        let img = parse_pgm(src).unwrap();
        assert_eq!(img.pixels, vec![0.0, 1.0, 0.5, 1.0]);
        assert!(parse_pgm(b"P5\n2 2\n255\n\x00\x01\x02").is_err());
        assert!(parse_pgm(b"P6\n1 1\n255\n\x00").is_err());
    }

    #[test]
    fn grid_layout() {
        let g = tile_grid(&[vec![1.0; 4], vec![0.0; 4], vec![1.0; 4]], (2, 2), 2);
        assert_eq!((g.width, g.height), (5, 5));
        assert_eq!(g.pixels[0], 1.0);
        assert_eq!(g.pixels[2], 0.5);
        assert_eq!(g.pixels[3], 0.0);
        assert_eq!(g.pixels[3 * 5], 1.0);
    }
}
