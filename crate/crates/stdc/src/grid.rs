//! Shapes and packed binary masks.
//!
//! Cubes are stored flat in C order. `Dims` covers the 4-d (V,T,Lat,Lon)
//! layout, `Dims3` the 3-d (T,Lat,Lon) layout used by single masks. Binary
//! masks at full scale (hundreds of millions of voxels) are kept bit-packed.

use serde::{Deserialize, Serialize};

/// (V, T, Lat, Lon) extents of a datacube.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub vars: usize,
    pub t: usize,
    pub lat: usize,
    pub lon: usize,
}

impl Dims {
    pub fn plane(&self) -> usize {
        self.lat * self.lon
    }

    pub fn per_var(&self) -> usize {
        self.t * self.plane()
    }

    pub fn len(&self) -> usize {
        self.vars * self.per_var()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, v: usize, t: usize, y: usize, x: usize) -> usize {
        ((v * self.t + t) * self.lat + y) * self.lon + x
    }

    pub fn spatial(&self) -> Dims3 {
        Dims3 { t: self.t, lat: self.lat, lon: self.lon }
    }
}

/// (T, Lat, Lon) extents of a single-variable field or mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims3 {
    pub t: usize,
    pub lat: usize,
    pub lon: usize,
}

impl Dims3 {
    pub fn plane(&self) -> usize {
        self.lat * self.lon
    }

    pub fn len(&self) -> usize {
        self.t * self.plane()
    }

    #[inline]
    pub fn idx(&self, t: usize, y: usize, x: usize) -> usize {
        (t * self.lat + y) * self.lon + x
    }
}

/// Bit-packed binary mask over a flat index space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitGrid {
    words: Vec<u64>,
    len: usize,
}

impl BitGrid {
    pub fn zeros(len: usize) -> Self {
        BitGrid { words: vec![0u64; len.div_ceil(64)], len }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        (self.words[i >> 6] >> (i & 63)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize) {
        debug_assert!(i < self.len);
        self.words[i >> 6] |= 1u64 << (i & 63);
    }

    #[inline]
    pub fn assign(&mut self, i: usize, on: bool) {
        let word = &mut self.words[i >> 6];
        let bit = 1u64 << (i & 63);
        if on {
            *word |= bit;
        } else {
            *word &= !bit;
        }
    }

    pub fn count_ones(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    pub fn or_assign(&mut self, other: &BitGrid) {
        assert_eq!(self.len, other.len, "BitGrid length mismatch");
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
    }

    /// Expands a range of bits into 0/1 bytes (used when serializing masks).
    pub fn expand_range(&self, start: usize, out: &mut [u8]) {
        for (k, byte) in out.iter_mut().enumerate() {
            *byte = self.get(start + k) as u8;
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        let mut g = BitGrid::zeros(bytes.len());
        for (i, &b) in bytes.iter().enumerate() {
            if b != 0 {
                g.set(i);
            }
        }
        g
    }
}
