//! Image loading and saving.
//!
//! Supported formats, chosen by file extension:
//!
//! * binary Netpbm: `.pgm` (P5, gray) and `.ppm` (P6, RGB), any maxval up to
//!   65535; `.pnm` accepts either,
//! * `.png`: 8/16-bit gray or RGB (alpha is dropped, palettes expanded),
//! * `.txt`: a whitespace-separated grid of reals, read and written verbatim
//!   with no scaling or clamping.
//!
//! Quantized formats are scaled to `[0, 1]` on load by dividing by the
//! format's maximum value; on save pixels are clamped to `[0, 1]` and rounded.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::kernel::ImageShape;
use crate::spectral::Image;

/// BT.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Pgm,
    Ppm,
    Pnm,
    Png,
    Text,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .unwrap_or_default();
        match ext.as_str() {
            "pgm" => Ok(Self::Pgm),
            "ppm" => Ok(Self::Ppm),
            "pnm" => Ok(Self::Pnm),
            "png" => Ok(Self::Png),
            "txt" => Ok(Self::Text),
            other => Err(Error::UnsupportedFormat(format!(
                "unrecognized extension {other:?} for {}",
                path.display()
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    pub fn max_value(self) -> f64 {
        match self {
            BitDepth::Eight => 255.0,
            BitDepth::Sixteen => 65535.0,
        }
    }
}

/// Three color planes with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub r: Image,
    pub g: Image,
    pub b: Image,
}

impl RgbImage {
    pub fn new(r: Image, g: Image, b: Image) -> Result<Self> {
        g.check_shape(r.shape())?;
        b.check_shape(r.shape())?;
        for plane in [&r, &g, &b] {
            if let Some(((row, col), v)) = plane
                .as_array()
                .indexed_iter()
                .find(|(_, v)| !(0.0..=1.0).contains(*v))
            {
                return Err(Error::InvalidParameter(format!(
                    "rgb value {v} at ({row}, {col}) outside [0, 1]"
                )));
            }
        }
        Ok(Self { r, g, b })
    }

    pub fn shape(&self) -> ImageShape {
        self.r.shape()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Pixels {
    Gray(Image),
    Rgb(RgbImage),
}

#[derive(Debug, Clone)]
pub struct Loaded {
    pub pixels: Pixels,
    pub format: ImageFormat,
    /// Sample depth of the source file; `None` for text grids.
    pub bit_depth: Option<BitDepth>,
}

impl Loaded {
    /// The gray plane, or the luminance of an RGB image.
    pub fn to_gray(&self) -> Image {
        match &self.pixels {
            Pixels::Gray(img) => img.clone(),
            Pixels::Rgb(rgb) => luminance(rgb),
        }
    }
}

/// `Y = 0.299 R + 0.587 G + 0.114 B`.
pub fn luminance(rgb: &RgbImage) -> Image {
    let [wr, wg, wb] = LUMA_WEIGHTS;
    let y = rgb.r.as_array() * wr + rgb.g.as_array() * wg + rgb.b.as_array() * wb;
    Image::new(y).expect("convex combination of finite planes")
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptFile {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn load(path: impl AsRef<Path>) -> Result<Loaded> {
    let path = path.as_ref();
    match ImageFormat::from_path(path)? {
        ImageFormat::Text => {
            let text = std::fs::read_to_string(path)?;
            let grid = parse_text_grid(&text).map_err(|e| corrupt(path, e.to_string()))?;
            Ok(Loaded {
                pixels: Pixels::Gray(grid),
                format: ImageFormat::Text,
                bit_depth: None,
            })
        }
        ImageFormat::Png => load_png(path),
        format => {
            let mut bytes = Vec::new();
            File::open(path)?.read_to_end(&mut bytes)?;
            let (pixels, depth) = decode_pnm(&bytes, path)?;
            Ok(Loaded {
                pixels,
                format,
                bit_depth: Some(depth),
            })
        }
    }
}

/// Saves `pixels` in the format implied by `path`. `depth` is ignored for
/// text grids.
pub fn save(path: impl AsRef<Path>, pixels: &Pixels, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    let format = ImageFormat::from_path(path)?;
    match (format, pixels) {
        (ImageFormat::Text, Pixels::Gray(img)) => {
            let mut w = BufWriter::new(File::create(path)?);
            w.write_all(format_text_grid(img).as_bytes())?;
            w.flush()?;
            Ok(())
        }
        (ImageFormat::Text, Pixels::Rgb(_)) => Err(Error::UnsupportedFormat(
            "text grids hold a single channel".into(),
        )),
        (ImageFormat::Pgm, Pixels::Rgb(_)) => Err(Error::UnsupportedFormat(
            "PGM holds a single channel; use .ppm".into(),
        )),
        (ImageFormat::Ppm, Pixels::Gray(_)) => Err(Error::UnsupportedFormat(
            "PPM holds RGB; use .pgm".into(),
        )),
        (ImageFormat::Png, _) => save_png(path, pixels, depth),
        (_, _) => {
            let bytes = encode_pnm(pixels, depth);
            let mut f = BufWriter::new(File::create(path)?);
            f.write_all(&bytes)?;
            f.flush()?;
            Ok(())
        }
    }
}

pub fn save_gray(path: impl AsRef<Path>, img: &Image, depth: BitDepth) -> Result<()> {
    save(path, &Pixels::Gray(img.clone()), depth)
}

pub fn quantize(v: f64, depth: BitDepth) -> u16 {
    (v.clamp(0.0, 1.0) * depth.max_value()).round() as u16
}

/// Parses rows of whitespace-separated reals. Blank lines and lines starting
/// with `#` are skipped.
pub fn parse_text_grid(text: &str) -> Result<Image> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|_| {
                    Error::InvalidParameter(format!("line {}: not a number: {tok:?}", lineno + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::EmptyGrid(0, 0));
    }
    Image::from_rows(&rows)
}

pub fn format_text_grid(img: &Image) -> String {
    let mut out = String::new();
    for row in img.as_array().rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

struct PnmHeader {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: u32,
    data_offset: usize,
}

fn parse_pnm_header(bytes: &[u8], path: &Path) -> Result<PnmHeader> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(corrupt(path, "missing Netpbm magic number"));
    }
    let magic = [bytes[0], bytes[1]];
    if !matches!(magic[1], b'5' | b'6') {
        return Err(Error::UnsupportedFormat(format!(
            "Netpbm type P{} (only binary P5/P6 are supported)",
            magic[1] as char
        )));
    }
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(corrupt(path, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(corrupt(path, "malformed header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| corrupt(path, "header value out of range"))?;
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(corrupt(path, "missing separator after header")),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(corrupt(path, "zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(corrupt(path, format!("invalid maxval {maxval}")));
    }
    Ok(PnmHeader {
        magic,
        width: width as usize,
        height: height as usize,
        maxval: maxval as u32,
        data_offset: pos,
    })
}

fn decode_pnm(bytes: &[u8], path: &Path) -> Result<(Pixels, BitDepth)> {
    let h = parse_pnm_header(bytes, path)?;
    let channels = if h.magic[1] == b'6' { 3 } else { 1 };
    let sample_bytes = if h.maxval < 256 { 1 } else { 2 };
    let needed = h.width * h.height * channels * sample_bytes;
    let raster = &bytes[h.data_offset..];
    if raster.len() < needed {
        return Err(corrupt(
            path,
            format!("raster has {} bytes, expected {needed}", raster.len()),
        ));
    }
    let maxval = h.maxval as f64;
    let mut planes = vec![Array2::<f64>::zeros((h.height, h.width)); channels];
    for idx in 0..h.width * h.height {
        for (c, plane) in planes.iter_mut().enumerate() {
            let s = idx * channels + c;
            let v = if sample_bytes == 1 {
                raster[s] as u32
            } else {
                u16::from_be_bytes([raster[2 * s], raster[2 * s + 1]]) as u32
            };
            if v > h.maxval {
                return Err(corrupt(path, format!("sample {v} exceeds maxval {}", h.maxval)));
            }
            plane[[idx / h.width, idx % h.width]] = v as f64 / maxval;
        }
    }
    let depth = if sample_bytes == 1 {
        BitDepth::Eight
    } else {
        BitDepth::Sixteen
    };
    Ok((planes_to_pixels(planes)?, depth))
}

fn planes_to_pixels(mut planes: Vec<Array2<f64>>) -> Result<Pixels> {
    if planes.len() == 1 {
        return Ok(Pixels::Gray(Image::new(planes.remove(0))?));
    }
    let b = Image::new(planes.pop().expect("three planes"))?;
    let g = Image::new(planes.pop().expect("three planes"))?;
    let r = Image::new(planes.pop().expect("three planes"))?;
    Ok(Pixels::Rgb(RgbImage::new(r, g, b)?))
}

fn pixel_planes(pixels: &Pixels) -> Vec<&Image> {
    match pixels {
        Pixels::Gray(img) => vec![img],
        Pixels::Rgb(rgb) => vec![&rgb.r, &rgb.g, &rgb.b],
    }
}

/// Interleaved samples, big-endian for 16-bit.
fn interleaved_samples(pixels: &Pixels, depth: BitDepth) -> Vec<u8> {
    let planes = pixel_planes(pixels);
    let (p, q) = planes[0].shape().dims();
    let mut out = Vec::with_capacity(p * q * planes.len() * 2);
    for i in 0..p {
        for j in 0..q {
            for plane in &planes {
                let v = quantize(plane.as_array()[[i, j]], depth);
                match depth {
                    BitDepth::Eight => out.push(v as u8),
                    BitDepth::Sixteen => out.extend_from_slice(&v.to_be_bytes()),
                }
            }
        }
    }
    out
}

fn encode_pnm(pixels: &Pixels, depth: BitDepth) -> Vec<u8> {
    let (magic, shape) = match pixels {
        Pixels::Gray(img) => ("P5", img.shape()),
        Pixels::Rgb(rgb) => ("P6", rgb.shape()),
    };
    let mut out = format!(
        "{magic}\n{} {}\n{}\n",
        shape.cols,
        shape.rows,
        depth.max_value() as u32
    )
    .into_bytes();
    out.extend(interleaved_samples(pixels, depth));
    out
}

fn load_png(path: &Path) -> Result<Loaded> {
    let to_err = |e: png::DecodingError| match e {
        png::DecodingError::IoError(io) => Error::Io(io),
        other => corrupt(path, other.to_string()),
    };
    let mut decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(to_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| corrupt(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(to_err)?;
    let (width, height) = (info.width as usize, info.height as usize);
    let (channels, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => {
            return Err(corrupt(path, "palette was not expanded"));
        }
    };
    let depth = match info.bit_depth {
        png::BitDepth::Sixteen => BitDepth::Sixteen,
        _ => BitDepth::Eight,
    };
    let sample_bytes = if depth == BitDepth::Sixteen { 2 } else { 1 };
    let line = info.line_size;
    let maxval = depth.max_value();
    let mut planes = vec![Array2::<f64>::zeros((height, width)); keep];
    for i in 0..height {
        let row = &buf[i * line..(i + 1) * line];
        for j in 0..width {
            for (c, plane) in planes.iter_mut().enumerate() {
                let s = (j * channels + c) * sample_bytes;
                let v = if sample_bytes == 1 {
                    row[s] as f64
                } else {
                    u16::from_be_bytes([row[s], row[s + 1]]) as f64
                };
                plane[[i, j]] = v / maxval;
            }
        }
    }
    Ok(Loaded {
        pixels: planes_to_pixels(planes)?,
        format: ImageFormat::Png,
        bit_depth: Some(depth),
    })
}

fn save_png(path: &Path, pixels: &Pixels, depth: BitDepth) -> Result<()> {
    let (color, shape) = match pixels {
        Pixels::Gray(img) => (png::ColorType::Grayscale, img.shape()),
        Pixels::Rgb(rgb) => (png::ColorType::Rgb, rgb.shape()),
    };
    let to_err = |e: png::EncodingError| match e {
        png::EncodingError::IoError(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(other.to_string())),
    };
    let file = BufWriter::new(File::create(path)?);
    let mut encoder = png::Encoder::new(file, shape.cols as u32, shape.rows as u32);
    encoder.set_color(color);
    encoder.set_depth(match depth {
        BitDepth::Eight => png::BitDepth::Eight,
        BitDepth::Sixteen => png::BitDepth::Sixteen,
    });
    let mut writer = encoder.write_header().map_err(to_err)?;
    writer
        .write_image_data(&interleaved_samples(pixels, depth))
        .map_err(to_err)?;
    writer.finish().map_err(to_err)?;
    Ok(())
}
