//! Binary PPM (P6) frames.

use std::fs;
use std::path::{Path, PathBuf};

use stome_core::vision::Frame;

use crate::error::CliError;

/// A parse failure at a byte offset.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("byte {offset}: {message}")]
pub struct PpmError {
    pub offset: usize,
    pub message: String,
}

fn err(offset: usize, message: impl Into<String>) -> PpmError {
    PpmError {
        offset,
        message: message.into(),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    /// Skips whitespace and `#` comments between header fields.
    fn skip_space(&mut self) {
        while let Some(&c) = self.bytes.get(self.at) {
            if c == b'#' {
                while self.bytes.get(self.at).is_some_and(|&c| c != b'\n') {
                    self.at += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.at += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, PpmError> {
        self.skip_space();
        let start = self.at;
        while self.bytes.get(self.at).is_some_and(u8::is_ascii_digit) {
            self.at += 1;
        }
        if start == self.at {
            return Err(err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.at])
            .expect("ascii digits")
            .parse()
            .map_err(|_| err(start, format!("{what} out of range")))
    }
}

/// Parses one P6 image with maxval 255.
pub fn parse_ppm(bytes: &[u8], timestamp_index: usize) -> Result<Frame, PpmError> {
    if !bytes.starts_with(b"P6") {
        return Err(err(0, "missing P6 magic"));
    }
    let mut c = Cursor { bytes, at: 2 };
    if !bytes.get(2).is_some_and(u8::is_ascii_whitespace) {
        return Err(err(2, "expected whitespace after magic"));
    }
    let width = c.number("width")?;
    let height = c.number("height")?;
    let max_at = {
        c.skip_space();
        c.at
    };
    let maxval = c.number("maxval")?;
    if maxval != 255 {
        return Err(err(max_at, format!("maxval {maxval} is not 255")));
    }
    if !bytes.get(c.at).is_some_and(u8::is_ascii_whitespace) {
        return Err(err(c.at, "expected single whitespace before pixel data"));
    }
    let start = c.at + 1;
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| err(0, "image dimensions overflow"))?;
    let have = bytes.len() - start;
    if have < need {
        return Err(err(bytes.len(), format!("truncated payload: {have} of {need} bytes")));
    }
    if width == 0 || height == 0 {
        return Err(err(0, "empty image"));
    }
    Frame::new(width, height, bytes[start..start + need].to_vec(), timestamp_index).map_err(|e| err(start, e.to_string()))
}

pub fn encode_ppm(frame: &Frame) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    out.extend_from_slice(&frame.pixels);
    out
}

/// Every regular file in `dir`, lexicographic by name.
pub fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Config(format!("no frames in {}", dir.display())));
    }
    Ok(paths)
}

/// Loads a directory of P6 frames; timestamps follow the sorted order.
pub fn load_frames(dir: &Path) -> Result<Vec<Frame>, CliError> {
    let paths = frame_paths(dir)?;
    let mut frames: Vec<Frame> = Vec::with_capacity(paths.len());
    for (i, p) in paths.iter().enumerate() {
        let bytes = fs::read(p).map_err(|e| CliError::io(p, e))?;
        let f = parse_ppm(&bytes, i).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
        if let Some(first) = frames.first() {
            if (f.width, f.height) != (first.width, first.height) {
                return Err(CliError::Config(format!(
                    "mixed frame sizes: {} is {}x{} but {} is {}x{}",
                    paths[0].display(),
                    first.width,
                    first.height,
                    p.display(),
                    f.width,
                    f.height
                )));
            }
        }
        frames.push(f);
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_pixel_image() {
        let mut bytes = b"P6\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0xFF, 0, 0, 0, 0xFF, 0]);
        let f = parse_ppm(&bytes, 0).unwrap();
        assert_eq!((f.pixel(0, 0), f.pixel(1, 0)), ([255, 0, 0], [0, 255, 0]));
        assert_eq!(encode_ppm(&f), bytes);
    }

    #[test]
    fn comments_in_header() {
        let mut bytes = b"P6 # made by hand\n1 1 255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        assert_eq!(parse_ppm(&bytes, 0).unwrap().pixels, [1, 2, 3]);
    }

    #[test]
    fn errors_carry_offsets() {
        assert_eq!(parse_ppm(b"P5\n1 1\n255\n", 0).unwrap_err().offset, 0);
        assert_eq!(parse_ppm(b"P6\n1 1\n65535\n", 0).unwrap_err().offset, 7);
        let e = parse_ppm(b"P6\n2 2\n255\n\x01\x02", 0).unwrap_err();
        assert_eq!(e.offset, 13);
        assert!(e.message.contains("truncated"));
        assert_eq!(parse_ppm(b"P6\nx 1\n255\n", 0).unwrap_err().offset, 3);
    }
}
