//! Boxes and binary masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::invalid(format!("invalid box {:?}", b.to_array())))
        }
    }

    pub fn is_valid(&self) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        [self.x1, self.y1, self.x2, self.y2].into_iter().all(unit)
            && self.x1 <= self.x2
            && self.y1 <= self.y2
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self> {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

/// Row-major binary mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if height * width != bits.len() || height == 0 || width == 0 {
            return Err(Error::ShapeMismatch {
                op: "mask",
                lhs: vec![height, width],
                rhs: vec![bits.len()],
            });
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![false; height * width]).expect("positive mask shape")
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height * width)
            .map(|i| f(i / width, i % width))
            .collect();
        Self::new(height, width, bits).expect("positive mask shape")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.bits[row * self.width + col] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| f64::from(u8::from(b))).collect()
    }

    /// Row-major bits, MSB first, each row padded to a byte boundary.
    pub fn pack(&self) -> Vec<u8> {
        let row_bytes = self.width.div_ceil(8);
        let mut out = vec![0u8; row_bytes * self.height];
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    out[r * row_bytes + c / 8] |= 0x80 >> (c % 8);
                }
            }
        }
        out
    }

    pub fn unpack(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        let row_bytes = width.div_ceil(8);
        if bytes.len() != row_bytes * height {
            return Err(Error::invalid(format!(
                "packed mask has {} bytes, expected {} for {height}x{width}",
                bytes.len(),
                row_bytes * height
            )));
        }
        Ok(Self::from_fn(height, width, |r, c| {
            bytes[r * row_bytes + c / 8] & (0x80 >> (c % 8)) != 0
        }))
    }
}
