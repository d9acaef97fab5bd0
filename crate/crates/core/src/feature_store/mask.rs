//! MSK1 pixel masks: `"MSK1" | H u32 | W u32 | H*W bytes`, 1 = background.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io_util::{checked_product, write_atomic, ByteReader, ByteWriter};

const MAGIC: &[u8; 4] = b"MSK1";

/// Binary pixel mask, `true` marking background pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    height: usize,
    width: usize,
    background: Vec<bool>,
}

impl PixelMask {
    pub fn new(height: usize, width: usize, background: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::validation("mask dimensions must be positive"));
        }
        if background.len() != height * width {
            return Err(Error::dims(format!(
                "mask {height}x{width} needs {} pixels, got {}",
                height * width,
                background.len()
            )));
        }
        Ok(Self { height, width, background })
    }

    pub fn from_fn(height: usize, width: usize, mut is_background: impl FnMut(usize, usize) -> bool) -> Self {
        assert!(height > 0 && width > 0, "mask dimensions must be positive");
        let background = (0..height * width).map(|k| is_background(k / width, k % width)).collect();
        Self { height, width, background }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn is_background(&self, i: usize, j: usize) -> bool {
        self.background[i * self.width + j]
    }

    pub fn set_background(&mut self, i: usize, j: usize, value: bool) {
        self.background[i * self.width + j] = value;
    }

    /// Row-major background flags.
    pub fn pixels(&self) -> &[bool] {
        &self.background
    }

    pub fn background_count(&self) -> usize {
        self.background.iter().filter(|&&b| b).count()
    }
}

pub fn encode_mask(mask: &PixelMask) -> Result<Vec<u8>> {
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.len_u32(mask.height, "mask height")?;
    w.len_u32(mask.width, "mask width")?;
    w.bytes(&mask.background.iter().map(|&b| u8::from(b)).collect::<Vec<_>>());
    Ok(w.finish())
}

pub fn decode_mask(bytes: &[u8]) -> Result<PixelMask> {
    let mut r = ByteReader::new(bytes);
    r.magic(MAGIC)?;
    let h = r.usize()?;
    let w = r.usize()?;
    let n = checked_product(&[h, w])?;
    let raw = r.take(n)?;
    r.expect_end()?;
    let background = raw
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::format(format!("mask byte {other} is neither 0 nor 1"))),
        })
        .collect::<Result<Vec<_>>>()?;
    PixelMask::new(h, w, background)
}

pub fn write_mask(mask: &PixelMask, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_mask(mask)?)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<PixelMask> {
    decode_mask(&fs::read(path)?)
}
