//! Volumes, displacement fields and label maps.
//!
//! Every grid in the engine is stored x-fastest, then y, then z, then
//! channel. This is the same memory order as a row-major `[c, z, y, x]`
//! tensor, so volumes move in and out of the autodiff tape without copies
//! of index logic.

mod io;
mod sample;

pub use io::{
    decode_lab3, decode_vol3, encode_lab3, encode_vol3, read_lab3, read_vol3, write_lab3, write_vol3,
};
pub use sample::{
    sample_trilinear, sample_trilinear_with_grad, warp, warp_labels_nearest, Stencil,
};

use crate::error::{Error, Result};

/// Spatial extent `[nx, ny, nz]`.
pub type Dims = [usize; 3];

pub(crate) fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

/// Linear spatial index of voxel `(x, y, z)`.
#[inline]
pub fn spatial_index(dims: Dims, x: usize, y: usize, z: usize) -> usize {
    (z * dims[1] + y) * dims[0] + x
}

/// Inverse of [`spatial_index`].
#[inline]
pub fn spatial_coords(dims: Dims, idx: usize) -> [usize; 3] {
    let x = idx % dims[0];
    let y = (idx / dims[0]) % dims[1];
    let z = idx / (dims[0] * dims[1]);
    [x, y, z]
}

fn check_dims(dims: Dims, channels: usize) -> Result<()> {
    if dims.contains(&0) || channels == 0 {
        return Err(Error::InvalidArgument(format!(
            "volume extents must be positive, got {dims:?} x {channels}"
        )));
    }
    Ok(())
}

/// Dense scalar or multi-channel 3D grid of finite reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    channels: usize,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: Dims, channels: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(dims, channels)?;
        let expected = voxel_count(dims) * channels;
        if data.len() != expected {
            return Err(Error::SizeMismatch {
                declared: expected,
                actual: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            dims,
            channels,
            data,
        })
    }

    pub fn zeros(dims: Dims, channels: usize) -> Self {
        Self::filled(dims, channels, 0.0)
    }

    pub fn filled(dims: Dims, channels: usize, value: f64) -> Self {
        assert!(dims.iter().all(|&n| n > 0) && channels > 0);
        assert!(value.is_finite());
        Self {
            dims,
            channels,
            data: vec![value; voxel_count(dims) * channels],
        }
    }

    /// Builds a volume by evaluating `f(x, y, z, c)` at every voxel.
    pub fn from_fn(
        dims: Dims,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Result<Self> {
        check_dims(dims, channels)?;
        let mut data = Vec::with_capacity(voxel_count(dims) * channels);
        for c in 0..channels {
            for z in 0..dims[2] {
                for y in 0..dims[1] {
                    for x in 0..dims[0] {
                        data.push(f(x, y, z, c));
                    }
                }
            }
        }
        Self::new(dims, channels, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn voxel_count(&self) -> usize {
        voxel_count(self.dims)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Data of a single channel.
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.voxel_count();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize, c: usize) -> usize {
        c * self.voxel_count() + spatial_index(self.dims, x, y, z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize, c: usize) -> f64 {
        self.data[self.index(x, y, z, c)]
    }

    /// Sets a voxel value. Panics on non-finite input.
    pub fn set(&mut self, x: usize, y: usize, z: usize, c: usize, value: f64) {
        assert!(value.is_finite(), "volume values must be finite");
        let i = self.index(x, y, z, c);
        self.data[i] = value;
    }

    /// Shape as a row-major tensor shape `[c, nz, ny, nx]`.
    pub fn tensor_shape(&self) -> Vec<usize> {
        vec![self.channels, self.dims[2], self.dims[1], self.dims[0]]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Applies `f` to every value; the result must stay finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.dims, self.channels, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn same_shape(&self, other: &Volume) -> bool {
        self.dims == other.dims && self.channels == other.channels
    }
}

/// Displacement field ψ in voxel units: a three-channel volume whose
/// channels hold the x, y and z components.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField(Volume);

impl DisplacementField {
    pub fn new(volume: Volume) -> Result<Self> {
        if volume.channels() != 3 {
            return Err(Error::InvalidArgument(format!(
                "displacement field needs 3 channels, got {}",
                volume.channels()
            )));
        }
        Ok(Self(volume))
    }

    pub fn zeros(dims: Dims) -> Self {
        Self(Volume::zeros(dims, 3))
    }

    /// Field with the same displacement at every voxel.
    pub fn constant(dims: Dims, d: [f64; 3]) -> Self {
        Self(Volume::from_fn(dims, 3, |_, _, _, c| d[c]).expect("finite constant"))
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> [f64; 3]) -> Result<Self> {
        let n = voxel_count(dims);
        let mut data = vec![0.0; 3 * n];
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let d = f(x, y, z);
                    let i = spatial_index(dims, x, y, z);
                    for c in 0..3 {
                        data[c * n + i] = d[c];
                    }
                }
            }
        }
        Ok(Self(Volume::new(dims, 3, data)?))
    }

    pub fn dims(&self) -> Dims {
        self.0.dims()
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        let n = self.0.voxel_count();
        let i = spatial_index(self.dims(), x, y, z);
        let d = self.0.data();
        [d[i], d[n + i], d[2 * n + i]]
    }

    pub fn volume(&self) -> &Volume {
        &self.0
    }

    pub fn into_volume(self) -> Volume {
        self.0
    }

    /// Largest absolute component over the whole field.
    pub fn max_abs(&self) -> f64 {
        self.0.data().iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Categorical label map; label 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    dims: Dims,
    data: Vec<u16>,
}

impl LabelVolume {
    pub fn new(dims: Dims, data: Vec<u16>) -> Result<Self> {
        check_dims(dims, 1)?;
        if data.len() != voxel_count(dims) {
            return Err(Error::SizeMismatch {
                declared: voxel_count(dims),
                actual: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            data: vec![0; voxel_count(dims)],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u16 {
        self.data[spatial_index(self.dims, x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, label: u16) {
        let i = spatial_index(self.dims, x, y, z);
        self.data[i] = label;
    }

    /// Sorted non-background labels present in the map.
    pub fn labels(&self) -> Vec<u16> {
        let mut seen: Vec<u16> = self.data.iter().copied().filter(|&l| l != 0).collect();
        seen.sort_unstable();
        seen.dedup();
        seen
    }
}
