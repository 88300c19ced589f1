//! Row-major 2-D rasters and the dihedral transforms used for augmentation.

use alloc::vec;
use alloc::vec::Vec;

/// Row-major `height × width` raster. Row index is the y coordinate.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width, "grid data length");
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.width + col] = v;
    }

    #[inline]
    pub fn add(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.width + col] += v;
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn transformed(&self, t: Transform) -> Grid {
        let (data, h, w) = t.apply(&self.data, self.height, self.width);
        Grid::from_vec(h, w, data)
    }
}

/// Where a drop map came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum DropSource {
    Oracle,
    Predicted,
}

/// Per-pixel static voltage drop in volts.
#[derive(Debug, Clone, PartialEq)]
pub struct IrDropMap {
    pub drop: Grid,
    pub source: DropSource,
}

/// The six members of the augmentation set: identity, two flips and three
/// counter-clockwise quarter turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Transform {
    Identity,
    /// Mirror columns.
    FlipH,
    /// Mirror rows.
    FlipV,
    Rot90,
    Rot180,
    Rot270,
}

impl Transform {
    pub const ALL: [Transform; 6] = [
        Transform::Identity,
        Transform::FlipH,
        Transform::FlipV,
        Transform::Rot90,
        Transform::Rot180,
        Transform::Rot270,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Transform::Identity => "identity",
            Transform::FlipH => "fliph",
            Transform::FlipV => "flipv",
            Transform::Rot90 => "rot90",
            Transform::Rot180 => "rot180",
            Transform::Rot270 => "rot270",
        }
    }

    /// Output dimensions for an `h × w` input.
    pub fn dims(self, h: usize, w: usize) -> (usize, usize) {
        match self {
            Transform::Rot90 | Transform::Rot270 => (w, h),
            _ => (h, w),
        }
    }

    /// Where input cell `(row, col)` lands in the output.
    ///
    /// Quarter turns follow the usual array convention with row 0 on top:
    /// `Rot90` moves the last column to the first row.
    #[inline]
    pub fn map(self, row: usize, col: usize, h: usize, w: usize) -> (usize, usize) {
        match self {
            Transform::Identity => (row, col),
            Transform::FlipH => (row, w - 1 - col),
            Transform::FlipV => (h - 1 - row, col),
            Transform::Rot90 => (w - 1 - col, row),
            Transform::Rot180 => (h - 1 - row, w - 1 - col),
            Transform::Rot270 => (col, h - 1 - row),
        }
    }

    /// Applies the transform to one row-major `h × w` plane.
    pub fn apply<T: Copy>(self, data: &[T], h: usize, w: usize) -> (Vec<T>, usize, usize) {
        assert_eq!(data.len(), h * w);
        let (oh, ow) = self.dims(h, w);
        if self == Transform::Identity {
            return (data.to_vec(), oh, ow);
        }
        let mut out = data.to_vec();
        for r in 0..h {
            for c in 0..w {
                let (orow, ocol) = self.map(r, c, h, w);
                out[orow * ow + ocol] = data[r * w + c];
            }
        }
        (out, oh, ow)
    }

    /// Applies the transform to every plane of a `channels × h × w` stack.
    pub fn apply_planes<T: Copy>(self, data: &[T], h: usize, w: usize) -> (Vec<T>, usize, usize) {
        let plane = h * w;
        assert_eq!(data.len() % plane.max(1), 0);
        let (oh, ow) = self.dims(h, w);
        let mut out = Vec::with_capacity(data.len());
        for p in data.chunks(plane) {
            out.extend(self.apply(p, h, w).0);
        }
        (out, oh, ow)
    }
}
