//! Binary PGM (P5) reading and writing. The only image format the engine
//! touches; bit-exact and dependency-free.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::data::DataError;

#[derive(Debug)]
pub struct PgmImage {
    pub width: usize,
    pub height: usize,
    /// Row-major, one byte per pixel.
    pub data: Vec<u8>,
    pub maxval: u16,
}

fn malformed(path: &Path, reason: &str) -> DataError {
    DataError::MalformedPgm {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Header token scanner: whitespace-separated tokens, `#` comments to EOL.
struct TokenScanner<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> TokenScanner<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        TokenScanner { bytes, pos: 0 }
    }

    fn skip_filler(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Option<&'a [u8]> {
        self.skip_filler();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        (self.pos > start).then(|| &self.bytes[start..self.pos])
    }
}

pub fn read_pgm(path: &Path) -> Result<PgmImage, DataError> {
    if !path.exists() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| DataError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut scan = TokenScanner::new(&bytes);
    match scan.token() {
        Some(b"P5") => {}
        _ => return Err(malformed(path, "missing P5 magic")),
    }
    let mut field = |name: &str| -> Result<usize, DataError> {
        scan.token()
            .and_then(|t| std::str::from_utf8(t).ok())
            .and_then(|t| t.parse::<usize>().ok())
            .ok_or_else(|| malformed(path, &format!("bad {name} field")))
    };
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    if width == 0 || height == 0 {
        return Err(malformed(path, "zero image extent"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(malformed(path, "maxval must be in 1..=255"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let data_start = scan.pos + 1;
    let expected = width * height;
    if bytes.len() < data_start + expected {
        return Err(malformed(path, "truncated pixel data"));
    }
    Ok(PgmImage {
        width,
        height,
        data: bytes[data_start..data_start + expected].to_vec(),
        maxval: maxval as u16,
    })
}

pub fn write_pgm(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<(), DataError> {
    assert_eq!(data.len(), width * height, "pixel buffer/extent mismatch");
    let mut out = Vec::with_capacity(data.len() + 32);
    write!(out, "P5\n{width} {height}\n255\n").expect("vec write");
    out.extend_from_slice(data);
    fs::write(path, out).map_err(|e| DataError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let data: Vec<u8> = (0..16).map(|i| (i * 16) as u8).collect();
        write_pgm(&path, 4, 4, &data).unwrap();
        let first = std::fs::read(&path).unwrap();
        let img = read_pgm(&path).unwrap();
        assert_eq!((img.width, img.height, img.maxval), (4, 4, 255));
        assert_eq!(img.data, data);
        write_pgm(&path, img.width, img.height, &img.data).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[7, 9]);
        std::fs::write(&path, bytes).unwrap();
        let img = read_pgm(&path).unwrap();
        assert_eq!(img.data, vec![7, 9]);
    }

    #[test]
    fn missing_file_error_names_the_path() {
        let err = read_pgm(Path::new("/nonexistent/ghost.pgm")).unwrap_err();
        assert!(err.to_string().contains("ghost.pgm"));
    }

    #[test]
    fn malformed_headers_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p2 = dir.path().join("ascii.pgm");
        std::fs::write(&p2, b"P2\n2 2\n255\n0 1 2 3\n").unwrap();
        assert!(matches!(read_pgm(&p2), Err(DataError::MalformedPgm { .. })));

        let trunc = dir.path().join("trunc.pgm");
        std::fs::write(&trunc, b"P5\n4 4\n255\nab").unwrap();
        assert!(matches!(
            read_pgm(&trunc),
            Err(DataError::MalformedPgm { .. })
        ));
    }
}
