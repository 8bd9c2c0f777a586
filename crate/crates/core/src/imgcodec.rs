//! Byteplot conversion: raw file bytes become an 8-bit grayscale image, which is
//! then box-filtered down to the network's input resolution and normalised.

use std::io::{self, Read, Write};

use thiserror::Error;

/// Side length of the square input image fed to the default network (64×64 = 4096 inputs).
pub const DEFAULT_INPUT_SIDE: usize = 64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ImageError {
    #[error("cannot build an image from an empty byte sequence")]
    EmptyInput,
    #[error("image is {actual_w}x{actual_h}, expected {expected_w}x{expected_h}")]
    ShapeMismatch {
        expected_w: usize,
        expected_h: usize,
        actual_w: usize,
        actual_h: usize,
    },
    #[error("invalid dimensions {0}x{1}")]
    InvalidDimensions(usize, usize),
    #[error("malformed PGM: {0}")]
    BadPgm(String),
}

/// Row-major 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(ImageError::InvalidDimensions(width, height));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self, ImageError> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Writes the image as a binary PGM (P5, maxval 255).
    pub fn write_pgm<W: Write>(&self, mut out: W) -> io::Result<()> {
        write!(out, "P5\n{} {}\n255\n", self.width, self.height)?;
        out.write_all(&self.pixels)
    }

    pub fn read_pgm<R: Read>(mut input: R) -> Result<Self, ImageError> {
        let mut buf = Vec::new();
        input
            .read_to_end(&mut buf)
            .map_err(|e| ImageError::BadPgm(e.to_string()))?;
        parse_pgm(&buf)
    }
}

fn parse_pgm(buf: &[u8]) -> Result<GrayImage, ImageError> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // whitespace and comments between header tokens
        while pos < buf.len() {
            if buf[pos].is_ascii_whitespace() {
                pos += 1;
            } else if buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(ImageError::BadPgm("truncated header".into()));
        }
        fields.push(String::from_utf8_lossy(&buf[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(ImageError::BadPgm(format!("unsupported magic {:?}", fields[0])));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| ImageError::BadPgm(format!("bad header field {s:?}")))
    };
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(ImageError::BadPgm(format!("maxval {maxval} unsupported")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let raster = buf
        .get(pos..)
        .ok_or_else(|| ImageError::BadPgm("missing raster".into()))?;
    if raster.len() != width * height {
        return Err(ImageError::BadPgm(format!(
            "raster has {} bytes, expected {}",
            raster.len(),
            width * height
        )));
    }
    GrayImage::new(width, height, raster.to_vec())
}

/// Network input: intensities scaled into [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct InputVector(Vec<f64>);

impl InputVector {
    /// Wraps raw values, rejecting anything outside [0, 1].
    pub fn new(values: Vec<f64>) -> Option<Self> {
        values
            .iter()
            .all(|v| (0.0..=1.0).contains(v))
            .then_some(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Byteplot row width for a file of `len` bytes (MALIMG size buckets).
pub fn byteplot_width(len: usize) -> usize {
    const KB: usize = 1024;
    match len {
        n if n < 10 * KB => 32,
        n if n < 30 * KB => 64,
        n if n < 60 * KB => 128,
        n if n < 100 * KB => 256,
        n if n < 200 * KB => 384,
        n if n < 500 * KB => 512,
        n if n < 1000 * KB => 768,
        _ => 1024,
    }
}

/// One pixel per byte in reading order; the last row is zero-padded.
pub fn bytes_to_image(data: &[u8]) -> Result<GrayImage, ImageError> {
    if data.is_empty() {
        return Err(ImageError::EmptyInput);
    }
    let width = byteplot_width(data.len());
    let height = data.len().div_ceil(width);
    let mut pixels = data.to_vec();
    pixels.resize(width * height, 0);
    GrayImage::new(width, height, pixels)
}

/// Area-averaging resample to `target_w × target_h`.
///
/// Each output pixel is the overlap-weighted mean of the source pixels under
/// its footprint, rounded half-up. Coordinates are scaled by the target size
/// so every overlap is an integer and the result is exact.
pub fn downscale(img: &GrayImage, target_w: usize, target_h: usize) -> Result<GrayImage, ImageError> {
    if target_w == 0 || target_h == 0 {
        return Err(ImageError::InvalidDimensions(target_w, target_h));
    }
    let (src_w, src_h) = (img.width, img.height);
    let x_spans = footprints(src_w, target_w);
    let y_spans = footprints(src_h, target_h);
    // every output footprint covers src_w × src_h scaled units
    let area = (src_w as u128) * (src_h as u128);

    let mut out = Vec::with_capacity(target_w * target_h);
    for ys in &y_spans {
        for xs in &x_spans {
            let mut acc: u128 = 0;
            for &(sy, wy) in ys {
                let row = &img.pixels[sy * src_w..(sy + 1) * src_w];
                let mut row_acc: u128 = 0;
                for &(sx, wx) in xs {
                    row_acc += row[sx] as u128 * wx as u128;
                }
                acc += row_acc * wy as u128;
            }
            out.push(((2 * acc + area) / (2 * area)) as u8);
        }
    }
    GrayImage::new(target_w, target_h, out)
}

/// For each target index, the source indices it overlaps and the overlap length,
/// measured in units of 1/target source pixels.
fn footprints(src: usize, target: usize) -> Vec<Vec<(usize, usize)>> {
    (0..target)
        .map(|t| {
            let lo = t * src;
            let hi = (t + 1) * src;
            let first = lo / target;
            let last = (hi - 1) / target;
            (first..=last)
                .filter_map(|s| {
                    let s_lo = s * target;
                    let s_hi = (s + 1) * target;
                    let overlap = hi.min(s_hi).saturating_sub(lo.max(s_lo));
                    (overlap > 0).then_some((s, overlap))
                })
                .collect()
        })
        .collect()
}

/// Normalises a `width × height` image into network input values `pixel / 255`.
pub fn to_input_vector(img: &GrayImage, width: usize, height: usize) -> Result<InputVector, ImageError> {
    if img.width != width || img.height != height {
        return Err(ImageError::ShapeMismatch {
            expected_w: width,
            expected_h: height,
            actual_w: img.width,
            actual_h: img.height,
        });
    }
    Ok(InputVector(img.pixels.iter().map(|&p| p as f64 / 255.0).collect()))
}

/// Full pipeline used by every detection engine: byteplot, square downscale, normalise.
pub fn file_to_input(data: &[u8], side: usize) -> Result<InputVector, ImageError> {
    let img = bytes_to_image(data)?;
    let small = downscale(&img, side, side)?;
    to_input_vector(&small, side, side)
}
