//! PNG, binary PPM (P6) and binary PGM (P5) reading and writing.

use std::cell::Cell;
use std::fs;
use std::io::{self, BufRead, Cursor, Read, Seek, SeekFrom};
use std::path::Path;

use thiserror::Error;

use super::{GrayImage, ImageRGB};
use crate::{Error, Result};

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', b'\r', b'\n', 0x1a, b'\n'];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{reason} at byte {offset}")]
pub struct FormatError {
    pub offset: u64,
    pub reason: String,
}

impl FormatError {
    fn new(offset: u64, reason: impl Into<String>) -> Self {
        FormatError {
            offset,
            reason: reason.into(),
        }
    }
}

/// Decoded pixels before conversion to a concrete image type.
enum Raw {
    Gray { width: u32, height: u32, pixels: Vec<u8> },
    Rgb { width: u32, height: u32, pixels: Vec<u8> },
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn decode_image(path: impl AsRef<Path>) -> Result<ImageRGB> {
    let bytes = read_file(path.as_ref())?;
    decode_image_bytes(&bytes)
}

pub fn decode_gray(path: impl AsRef<Path>) -> Result<GrayImage> {
    let bytes = read_file(path.as_ref())?;
    decode_gray_bytes(&bytes)
}

pub fn decode_image_bytes(bytes: &[u8]) -> Result<ImageRGB> {
    match decode_raw(bytes)? {
        Raw::Rgb { width, height, pixels } => ImageRGB::new(width as usize, height as usize, pixels),
        Raw::Gray { width, height, pixels } => ImageRGB::new(
            width as usize,
            height as usize,
            pixels.iter().flat_map(|&v| [v, v, v]).collect(),
        ),
    }
}

/// Grayscale view of a file. Colour inputs are reduced to the rounded mean
/// of their channels.
pub fn decode_gray_bytes(bytes: &[u8]) -> Result<GrayImage> {
    match decode_raw(bytes)? {
        Raw::Gray { width, height, pixels } => GrayImage::new(width as usize, height as usize, pixels),
        Raw::Rgb { width, height, pixels } => GrayImage::new(
            width as usize,
            height as usize,
            pixels
                .chunks_exact(3)
                .map(|p| ((p[0] as u16 + p[1] as u16 + p[2] as u16 + 1) / 3) as u8)
                .collect(),
        ),
    }
}

fn decode_raw(bytes: &[u8]) -> Result<Raw> {
    if bytes.is_empty() {
        return Err(FormatError::new(0, "empty file").into());
    }
    if bytes.starts_with(&PNG_SIGNATURE) {
        return decode_png(bytes);
    }
    match bytes.get(..2) {
        Some(b"P6") => decode_pnm(bytes, 3),
        Some(b"P5") => decode_pnm(bytes, 1),
        _ => Err(FormatError::new(0, "unrecognized image signature (expected PNG, P6 or P5)").into()),
    }
}

/// Cursor that publishes its position, so errors raised inside the PNG
/// decoder can still be located.
struct Tracked<'a> {
    inner: Cursor<&'a [u8]>,
    pos: &'a Cell<u64>,
}

impl Read for Tracked<'_> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.pos.set(self.inner.position());
        Ok(n)
    }
}

impl BufRead for Tracked<'_> {
    fn fill_buf(&mut self) -> io::Result<&[u8]> {
        self.inner.fill_buf()
    }

    fn consume(&mut self, amt: usize) {
        self.inner.consume(amt);
        self.pos.set(self.inner.position());
    }
}

impl Seek for Tracked<'_> {
    fn seek(&mut self, to: SeekFrom) -> io::Result<u64> {
        let p = self.inner.seek(to)?;
        self.pos.set(p);
        Ok(p)
    }
}

fn decode_png(bytes: &[u8]) -> Result<Raw> {
    let pos = Cell::new(0);
    let fail = |e: png::DecodingError| -> Error {
        let reason = match e {
            png::DecodingError::IoError(ref io) if io.kind() == io::ErrorKind::UnexpectedEof => {
                "truncated PNG stream".to_string()
            }
            other => format!("invalid PNG: {other}"),
        };
        FormatError::new(pos.get(), reason).into()
    };
    let mut decoder = png::Decoder::new(Tracked {
        inner: Cursor::new(bytes),
        pos: &pos,
    });
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(fail)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| FormatError::new(pos.get(), "PNG dimensions overflow"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(fail)?;
    buf.truncate(info.buffer_size());
    let (width, height) = (info.width, info.height);
    let rows = |channels: usize| -> Vec<u8> {
        let row = info.line_size;
        let mut out = Vec::with_capacity(width as usize * height as usize * channels);
        for r in buf.chunks(row).take(height as usize) {
            out.extend_from_slice(&r[..width as usize * channels]);
        }
        out
    };
    Ok(match info.color_type {
        png::ColorType::Grayscale => Raw::Gray {
            width,
            height,
            pixels: rows(1),
        },
        png::ColorType::GrayscaleAlpha => Raw::Gray {
            width,
            height,
            pixels: rows(2).chunks_exact(2).map(|p| p[0]).collect(),
        },
        png::ColorType::Rgb => Raw::Rgb {
            width,
            height,
            pixels: rows(3),
        },
        png::ColorType::Rgba => Raw::Rgb {
            width,
            height,
            pixels: rows(4).chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        },
        png::ColorType::Indexed => return Err(FormatError::new(pos.get(), "indexed PNG was not expanded").into()),
    })
}

/// Reads the whitespace/comment separated header fields of a P5/P6 file.
struct Header<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.at) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.at) {
                    self.at += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.at += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> std::result::Result<u32, FormatError> {
        self.skip_space();
        let start = self.at;
        while self.bytes.get(self.at).is_some_and(|b| b.is_ascii_digit()) {
            self.at += 1;
        }
        if start == self.at {
            return Err(if self.at >= self.bytes.len() {
                FormatError::new(self.at as u64, format!("truncated header, missing {what}"))
            } else {
                FormatError::new(self.at as u64, format!("expected {what}"))
            });
        }
        std::str::from_utf8(&self.bytes[start..self.at])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| FormatError::new(start as u64, format!("{what} out of range")))
    }
}

fn decode_pnm(bytes: &[u8], channels: usize) -> Result<Raw> {
    let mut h = Header { bytes, at: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maximum value")?;
    if width == 0 || height == 0 {
        return Err(FormatError::new(h.at as u64, "zero image dimension").into());
    }
    if maxval == 0 || maxval > 255 {
        return Err(FormatError::new(h.at as u64, format!("unsupported maximum value {maxval}")).into());
    }
    match bytes.get(h.at) {
        Some(b) if b.is_ascii_whitespace() => h.at += 1,
        Some(_) => return Err(FormatError::new(h.at as u64, "expected whitespace after header").into()),
        None => return Err(FormatError::new(h.at as u64, "truncated header").into()),
    }
    let need = width as usize * height as usize * channels;
    let data = &bytes[h.at..];
    if data.len() < need {
        return Err(FormatError::new(
            bytes.len() as u64,
            format!("truncated pixel data: {} of {need} bytes", data.len()),
        )
        .into());
    }
    let mut pixels = data[..need].to_vec();
    if maxval != 255 {
        for p in &mut pixels {
            if *p as u32 > maxval {
                return Err(FormatError::new(0, format!("sample {p} exceeds maximum value {maxval}")).into());
            }
            *p = ((*p as u32 * 255 + maxval / 2) / maxval) as u8;
        }
    }
    Ok(if channels == 3 {
        Raw::Rgb { width, height, pixels }
    } else {
        Raw::Gray { width, height, pixels }
    })
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn encode_png(width: u32, height: u32, color: png::ColorType, pixels: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut encoder = png::Encoder::new(&mut out, width, height);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Internal(format!("PNG encoding failed: {e}")))?;
    writer
        .write_image_data(pixels)
        .map_err(|e| Error::Internal(format!("PNG encoding failed: {e}")))?;
    writer
        .finish()
        .map_err(|e| Error::Internal(format!("PNG encoding failed: {e}")))?;
    Ok(out)
}

/// Writes PNG for `.png` paths and P6 for `.ppm`.
pub fn encode_image(image: &ImageRGB, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = match extension(path).as_str() {
        "png" => encode_png(
            image.width() as u32,
            image.height() as u32,
            png::ColorType::Rgb,
            image.pixels(),
        )?,
        "ppm" => {
            let mut b = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
            b.extend_from_slice(image.pixels());
            b
        }
        other => return Err(Error::arg(format!("cannot write colour images as '.{other}'"))),
    };
    write_file(path, &bytes)
}

/// Writes PNG for `.png` paths and P5 for `.pgm`.
pub fn encode_gray(image: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = match extension(path).as_str() {
        "png" => encode_png(
            image.width() as u32,
            image.height() as u32,
            png::ColorType::Grayscale,
            image.pixels(),
        )?,
        "pgm" => {
            let mut b = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
            b.extend_from_slice(image.pixels());
            b
        }
        other => return Err(Error::arg(format!("cannot write grayscale images as '.{other}'"))),
    };
    write_file(path, &bytes)
}
