use crate::error::{Error, Result};

/// A binary raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitMask {
    h: usize,
    w: usize,
    bits: Vec<bool>,
}

impl BitMask {
    pub fn new(h: usize, w: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), h * w);
        Self { h, w, bits }
    }

    pub fn empty(h: usize, w: usize) -> Self {
        Self::new(h, w, vec![false; h * w])
    }

    /// Pixels with value `>= threshold` are foreground.
    pub fn from_threshold(h: usize, w: usize, values: &[f64], threshold: f64) -> Self {
        Self::new(h, w, values.iter().map(|&v| v >= threshold).collect())
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.w + c]
    }

    /// Out-of-range coordinates read as background.
    #[inline]
    pub fn get_signed(&self, r: isize, c: isize) -> bool {
        r >= 0
            && c >= 0
            && (r as usize) < self.h
            && (c as usize) < self.w
            && self.get(r as usize, c as usize)
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.bits[r * self.w + c] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// `|a & b| / |a | b|`, zero when both are empty.
pub fn mask_iou(a: &BitMask, b: &BitMask) -> Result<f64> {
    if a.h != b.h || a.w != b.w {
        return Err(Error::invalid(format!(
            "mask shapes differ: {}x{} vs {}x{}",
            a.h, a.w, b.h, b.w
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}
