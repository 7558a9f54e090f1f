//! Dense 3D volumes and the elementary geometric transforms the pipeline
//! needs: windowed crops and the eight in-plane dihedral transforms used for
//! data augmentation.
//!
//! Storage order is x-fastest, then y, then z. Every file format and every
//! oracle in the test suite shares this layout.

use crate::{Error, Result};

/// Grid extents `(nx, ny, nz)`.
pub type Dims = [usize; 3];

pub fn dims_len(d: Dims) -> usize {
    d[0] * d[1] * d[2]
}

/// A dense 3D grid of `f32` values in x-fastest order.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Dims,
    values: Vec<f32>,
    /// Physical voxel size in nanometers, when known.
    pub voxel_size_nm: Option<[f32; 3]>,
}

impl Volume {
    pub fn new(dims: Dims, values: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("volume dims must be >= 1, got {dims:?}")));
        }
        if values.len() != dims_len(dims) {
            return Err(Error::Shape(format!(
                "volume of dims {dims:?} needs {} values, got {}",
                dims_len(dims),
                values.len()
            )));
        }
        Ok(Volume { dims, values, voxel_size_nm: None })
    }

    pub fn filled(dims: Dims, value: f32) -> Self {
        Volume { dims, values: vec![value; dims_len(dims)], voxel_size_nm: None }
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.values[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f32) {
        let i = self.index(x, y, z);
        self.values[i] = v;
    }

    /// Largest absolute difference against another volume of the same dims.
    pub fn max_abs_diff(&self, other: &Volume) -> Result<f32> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!(
                "dims mismatch: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    pub fn max_abs(&self) -> f32 {
        self.values.iter().map(|v| v.abs()).fold(0.0, f32::max)
    }
}

/// A rectangular region inside an enclosing volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub offset: Dims,
    pub shape: Dims,
}

impl Window {
    pub fn new(offset: Dims, shape: Dims) -> Result<Self> {
        if shape.iter().any(|&s| s == 0) {
            return Err(Error::Shape(format!("window shape must be >= 1, got {shape:?}")));
        }
        Ok(Window { offset, shape })
    }

    /// Composition of nested windows: `inner` expressed in the coordinates of
    /// the volume `self` was cut from.
    pub fn compose(&self, inner: &Window) -> Result<Window> {
        for a in 0..3 {
            if inner.offset[a] + inner.shape[a] > self.shape[a] {
                return Err(Error::Bounds(format!(
                    "inner window {inner:?} exceeds outer shape {:?}",
                    self.shape
                )));
            }
        }
        Window::new(
            [
                self.offset[0] + inner.offset[0],
                self.offset[1] + inner.offset[1],
                self.offset[2] + inner.offset[2],
            ],
            inner.shape,
        )
    }
}

/// Copy of the windowed region of `v`. The window must fit inside `v`.
pub fn crop(v: &Volume, w: &Window) -> Result<Volume> {
    let dims = v.dims();
    for a in 0..3 {
        if w.offset[a] + w.shape[a] > dims[a] {
            return Err(Error::Bounds(format!(
                "window offset {:?} shape {:?} exceeds volume dims {:?} on axis {a}",
                w.offset, w.shape, dims
            )));
        }
    }
    let [wx, wy, wz] = w.shape;
    let mut out = Vec::with_capacity(dims_len(w.shape));
    for z in 0..wz {
        for y in 0..wy {
            let src = v.index(w.offset[0], w.offset[1] + y, w.offset[2] + z);
            out.extend_from_slice(&v.values[src..src + wx]);
        }
    }
    let mut cropped = Volume::new(w.shape, out)?;
    cropped.voxel_size_nm = v.voxel_size_nm;
    Ok(cropped)
}

/// One of the eight dihedral transforms of the xy plane, applied identically
/// to every z slice: `t & 3` quarter-turns counterclockwise, after an x-flip
/// when `t >= 4`.
pub fn dihedral_xy(v: &Volume, t: u8) -> Result<Volume> {
    if t > 7 {
        return Err(Error::Config(format!("dihedral transform index {t} outside 0..8")));
    }
    let [nx, ny, nz] = v.dims();
    let rot = t & 3;
    let flip = t >= 4;
    let out_dims = if rot % 2 == 1 { [ny, nx, nz] } else { [nx, ny, nz] };
    let mut out = Volume::zeros(out_dims);
    out.voxel_size_nm = v.voxel_size_nm;
    for z in 0..nz {
        for oy in 0..out_dims[1] {
            for ox in 0..out_dims[0] {
                // invert the rotation to find the source pixel
                let (mut sx, sy) = match rot {
                    0 => (ox, oy),
                    1 => (oy, ny - 1 - ox),
                    2 => (nx - 1 - ox, ny - 1 - oy),
                    3 => (nx - 1 - oy, ox),
                    _ => unreachable!(),
                };
                if flip {
                    sx = nx - 1 - sx;
                }
                out.set(ox, oy, z, v.at(sx, sy, z));
            }
        }
    }
    Ok(out)
}

/// Transform index that undoes `dihedral_xy(_, t)`.
pub fn dihedral_inverse(t: u8) -> u8 {
    // flip-first convention: (r, f)^-1 = (-r, f) when f is off, (r, f) is an
    // involution composed with rotation inverse otherwise
    let rot = t & 3;
    let flip = t >= 4;
    if flip {
        // x-flip then rot r; inverse is x-flip then rot (4 - r) mirrored: the
        // element equals its own inverse exactly when r is 0 or 2
        match rot {
            0 => 4,
            1 => 5,
            2 => 6,
            3 => 7,
            _ => unreachable!(),
        }
    } else {
        match rot {
            0 => 0,
            1 => 3,
            2 => 2,
            3 => 1,
            _ => unreachable!(),
        }
    }
}
