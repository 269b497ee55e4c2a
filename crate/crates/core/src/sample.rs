//! Image and caption samples, binary masks, and portable-pixmap storage.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest side length accepted for an image.
pub const MIN_SIDE: usize = 8;

/// An RGB image with values in `[0, 1]`, stored row-major as `H × W × 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
    id: String,
}

impl ImageSample {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>, id: impl Into<String>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::InvalidImage(format!(
                "{height}x{width} is below the {MIN_SIDE}x{MIN_SIDE} minimum"
            )));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::InvalidImage(format!(
                "expected {} values, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidImage(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            pixels,
            id: id.into(),
        })
    }

    /// Like [`ImageSample::new`] but clips values into `[0, 1]` first.
    pub fn clipped(height: usize, width: usize, mut pixels: Vec<f64>, id: impl Into<String>) -> Result<Self> {
        for v in &mut pixels {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, pixels, id)
    }

    pub fn filled(height: usize, width: usize, value: f64, id: impl Into<String>) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * 3], id)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, channel: usize) -> usize {
        (row * self.width + col) * 3 + channel
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.pixels[self.index(row, col, channel)]
    }

    pub(crate) fn check_same_shape(&self, other: &ImageSample) -> Result<()> {
        if self.size() != other.size() {
            return Err(Error::ShapeMismatch {
                left: self.size(),
                right: other.size(),
            });
        }
        Ok(())
    }

    /// `‖self − other‖₂` over all values on the `[0, 1]` scale.
    pub fn l2_distance(&self, other: &ImageSample) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    /// Writes a binary 8-bit portable pixmap (`P6`).
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(self.pixels.len() + 32);
        write!(buf, "P6\n{} {}\n255\n", self.width, self.height).expect("write to vec");
        buf.extend(self.pixels.iter().map(|v| to_u8(*v)));
        crate::error::write_file(path, buf)
    }

    pub fn read_ppm(path: &Path, id: impl Into<String>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (width, height, maxval, offset) =
            parse_ppm_header(&bytes).ok_or_else(|| Error::format(path, "bad P6 header"))?;
        if maxval != 255 {
            return Err(Error::format(path, format!("unsupported maxval {maxval}")));
        }
        let data = &bytes[offset..];
        if data.len() != width * height * 3 {
            return Err(Error::format(path, "truncated pixel data"));
        }
        let pixels = data.iter().map(|&b| b as f64 / 255.0).collect();
        Self::new(height, width, pixels, id)
    }
}

/// Rounds a `[0, 1]` value to the nearest 8-bit level.
pub fn quantize(v: f64) -> f64 {
    to_u8(v) as f64 / 255.0
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn parse_ppm_header(bytes: &[u8]) -> Option<(usize, usize, usize, usize)> {
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return None;
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).ok()?);
    }
    if fields[0] != "P6" {
        return None;
    }
    // exactly one whitespace byte separates the header from the raster
    Some((fields[1].parse().ok()?, fields[2].parse().ok()?, fields[3].parse().ok()?, i + 1))
}

/// A caption as a token sequence over some vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSample {
    pub tokens: Vec<usize>,
    pub raw: String,
    pub id: String,
}

impl TextSample {
    pub fn new(tokens: Vec<usize>, raw: impl Into<String>, id: impl Into<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidText("empty token sequence".into()));
        }
        Ok(Self {
            tokens,
            raw: raw.into(),
            id: id.into(),
        })
    }

    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        match self.tokens.iter().find(|&&t| t >= vocab_size) {
            Some(t) => Err(Error::InvalidText(format!(
                "token {t} out of range for vocabulary of {vocab_size}"
            ))),
            None => Ok(()),
        }
    }
}

/// An `H × W` binary mask; `true` marks pixels that take patch content.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.bits[row * self.width + col] = on;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Mask value for a flat `H × W × 3` pixel index.
    #[inline]
    pub fn covers_value(&self, value_index: usize) -> bool {
        self.bits[value_index / 3]
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Renders as rows of `0`/`1` characters, one line per row.
    pub fn to_rows(&self) -> Vec<String> {
        self.bits
            .chunks(self.width)
            .map(|row| row.iter().map(|&b| if b { '1' } else { '0' }).collect())
            .collect()
    }

    pub fn from_rows(rows: &[String]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        let mut bits = Vec::with_capacity(height * width);
        for row in rows {
            if row.len() != width {
                return Err(Error::InvalidConfig("ragged mask rows".into()));
            }
            for ch in row.chars() {
                match ch {
                    '0' => bits.push(false),
                    '1' => bits.push(true),
                    other => return Err(Error::InvalidConfig(format!("bad mask character {other:?}"))),
                }
            }
        }
        Ok(Self { height, width, bits })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_and_small_images() {
        assert!(ImageSample::new(8, 8, vec![1.5; 192], "x").is_err());
        assert!(ImageSample::new(4, 8, vec![0.5; 96], "x").is_err());
        assert!(ImageSample::new(8, 8, vec![0.5; 10], "x").is_err());
        let clipped = ImageSample::clipped(8, 8, vec![1.5; 192], "x").unwrap();
        assert!(clipped.pixels().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ppm_round_trip_is_lossless_on_8bit_levels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        let pixels: Vec<f64> = (0..9 * 10 * 3).map(|i| quantize((i % 256) as f64 / 255.0)).collect();
        let img = ImageSample::new(9, 10, pixels, "a").unwrap();
        img.write_ppm(&path).unwrap();
        let back = ImageSample::read_ppm(&path, "a").unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn missing_ppm_names_the_path() {
        let err = ImageSample::read_ppm(Path::new("/nonexistent/x.ppm"), "x").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.ppm"));
    }

    #[test]
    fn mask_rows_round_trip() {
        let mut m = Mask::empty(3, 4);
        m.set(1, 2, true);
        let back = Mask::from_rows(&m.to_rows()).unwrap();
        assert_eq!(m, back);
        assert_eq!(back.count(), 1);
    }

    #[test]
    fn empty_text_is_rejected() {
        assert!(TextSample::new(vec![], "", "t").is_err());
        let t = TextSample::new(vec![0, 5], "a b", "t").unwrap();
        assert!(t.check_vocab(5).is_err());
        assert!(t.check_vocab(6).is_ok());
    }
}
