//! Trilinear sampling with border replication.

use super::{spatial_index, voxel_count, Dims, DisplacementField, LabelVolume, Volume};
use crate::error::{Error, Result};

/// Interpolation footprint of one query point: the eight corner voxels,
/// their weights, and the derivative of each weight with respect to the
/// three query coordinates.
#[derive(Debug, Clone, Copy)]
pub struct Stencil {
    pub index: [usize; 8],
    pub weight: [f64; 8],
    pub dweight: [[f64; 8]; 3],
}

#[derive(Clone, Copy)]
struct Axis {
    lo: usize,
    hi: usize,
    frac: f64,
    // zero where the coordinate is clamped
    slope: f64,
}

#[inline]
fn axis(n: usize, x: f64) -> Axis {
    if n == 1 {
        return Axis {
            lo: 0,
            hi: 0,
            frac: 0.0,
            slope: 0.0,
        };
    }
    let max = (n - 1) as f64;
    let inside = (0.0..=max).contains(&x);
    let c = x.clamp(0.0, max);
    let lo = (c.floor() as usize).min(n - 2);
    Axis {
        lo,
        hi: lo + 1,
        frac: c - lo as f64,
        slope: if inside { 1.0 } else { 0.0 },
    }
}

impl Stencil {
    #[inline]
    pub fn new(dims: Dims, p: [f64; 3]) -> Self {
        let ax = [axis(dims[0], p[0]), axis(dims[1], p[1]), axis(dims[2], p[2])];
        let mut index = [0usize; 8];
        let mut weight = [0.0; 8];
        let mut dweight = [[0.0; 8]; 3];
        for k in 0..8 {
            let bits = [k & 1, (k >> 1) & 1, (k >> 2) & 1];
            let mut w = [0.0; 3];
            let mut dw = [0.0; 3];
            let mut at = [0usize; 3];
            for a in 0..3 {
                if bits[a] == 1 {
                    w[a] = ax[a].frac;
                    dw[a] = ax[a].slope;
                    at[a] = ax[a].hi;
                } else {
                    w[a] = 1.0 - ax[a].frac;
                    dw[a] = -ax[a].slope;
                    at[a] = ax[a].lo;
                }
            }
            index[k] = spatial_index(dims, at[0], at[1], at[2]);
            weight[k] = w[0] * w[1] * w[2];
            dweight[0][k] = dw[0] * w[1] * w[2];
            dweight[1][k] = w[0] * dw[1] * w[2];
            dweight[2][k] = w[0] * w[1] * dw[2];
        }
        Self {
            index,
            weight,
            dweight,
        }
    }

    /// Interpolated value of one channel slice.
    #[inline]
    pub fn apply(&self, channel: &[f64]) -> f64 {
        let mut acc = 0.0;
        for k in 0..8 {
            acc += self.weight[k] * channel[self.index[k]];
        }
        acc
    }

    /// Derivative of the interpolated value with respect to the query point.
    #[inline]
    pub fn gradient(&self, channel: &[f64]) -> [f64; 3] {
        let mut g = [0.0; 3];
        for k in 0..8 {
            let v = channel[self.index[k]];
            g[0] += self.dweight[0][k] * v;
            g[1] += self.dweight[1][k] * v;
            g[2] += self.dweight[2][k] * v;
        }
        g
    }
}

/// Samples every channel of `vol` at each query point (voxel coordinates).
/// Out-of-range coordinates are clamped to the volume.
pub fn sample_trilinear(vol: &Volume, points: &[[f64; 3]]) -> Vec<Vec<f64>> {
    let n = vol.voxel_count();
    points
        .iter()
        .map(|&p| {
            let s = Stencil::new(vol.dims(), p);
            (0..vol.channels())
                .map(|c| s.apply(&vol.data()[c * n..(c + 1) * n]))
                .collect()
        })
        .collect()
}

/// Like [`sample_trilinear`], also returning `d value / d point` per channel.
pub fn sample_trilinear_with_grad(
    vol: &Volume,
    points: &[[f64; 3]],
) -> Vec<(Vec<f64>, Vec<[f64; 3]>)> {
    let n = vol.voxel_count();
    points
        .iter()
        .map(|&p| {
            let s = Stencil::new(vol.dims(), p);
            (0..vol.channels())
                .map(|c| {
                    let ch = &vol.data()[c * n..(c + 1) * n];
                    (s.apply(ch), s.gradient(ch))
                })
                .unzip()
        })
        .collect()
}

/// Resamples `moving` at `p + ψ(p)` for every voxel `p`.
pub fn warp(moving: &Volume, field: &DisplacementField) -> Result<Volume> {
    let dims = moving.dims();
    if field.dims() != dims {
        return Err(Error::shape(
            "warp",
            &moving.tensor_shape(),
            &field.volume().tensor_shape(),
        ));
    }
    let n = voxel_count(dims);
    let c = moving.channels();
    let mut out = vec![0.0; n * c];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let d = field.at(x, y, z);
                let p = [x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]];
                let s = Stencil::new(dims, p);
                let i = spatial_index(dims, x, y, z);
                for ch in 0..c {
                    out[ch * n + i] = s.apply(&moving.data()[ch * n..(ch + 1) * n]);
                }
            }
        }
    }
    Volume::new(dims, c, out)
}

/// Nearest-neighbour resampling of a label map at `p + ψ(p)`.
pub fn warp_labels_nearest(labels: &LabelVolume, field: &DisplacementField) -> Result<LabelVolume> {
    let dims = labels.dims();
    if field.dims() != dims {
        return Err(Error::shape(
            "warp_labels_nearest",
            &[dims[2], dims[1], dims[0]],
            &field.volume().tensor_shape(),
        ));
    }
    let mut out = LabelVolume::zeros(dims);
    let round = |v: f64, n: usize| -> usize { v.round().clamp(0.0, (n - 1) as f64) as usize };
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let d = field.at(x, y, z);
                let sx = round(x as f64 + d[0], dims[0]);
                let sy = round(y as f64 + d[1], dims[1]);
                let sz = round(z as f64 + d[2], dims[2]);
                out.set(x, y, z, labels.get(sx, sy, sz));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(dims: Dims, channels: usize, seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::from_fn(dims, channels, |_, _, _, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    // Independent eight-corner oracle, no clamping (queries kept interior).
    fn corner_oracle(v: &Volume, p: [f64; 3], c: usize) -> f64 {
        let (x0, y0, z0) = (p[0].floor(), p[1].floor(), p[2].floor());
        let (fx, fy, fz) = (p[0] - x0, p[1] - y0, p[2] - z0);
        let mut acc = 0.0;
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let w = (if dx == 1 { fx } else { 1.0 - fx })
                        * (if dy == 1 { fy } else { 1.0 - fy })
                        * (if dz == 1 { fz } else { 1.0 - fz });
                    acc += w * v.get(
                        x0 as usize + dx,
                        y0 as usize + dy,
                        z0 as usize + dz,
                        c,
                    );
                }
            }
        }
        acc
    }

    #[test]
    fn integer_coordinates_are_exact() {
        let mut v = Volume::zeros([3, 4, 5], 1);
        v.set(1, 2, 3, 0, 5.0);
        assert_eq!(sample_trilinear(&v, &[[1.0, 2.0, 3.0]])[0][0], 5.0);
    }

    #[test]
    fn midpoint_is_average() {
        let mut v = Volume::zeros([2, 1, 1], 1);
        v.set(1, 0, 0, 0, 2.0);
        assert_eq!(sample_trilinear(&v, &[[0.5, 0.0, 0.0]])[0][0], 1.0);
    }

    #[test]
    fn matches_corner_oracle() {
        let v = random_volume([4, 4, 4], 2, 7);
        let p = [0.3, 1.7, 2.2];
        let got = &sample_trilinear(&v, &[p])[0];
        for c in 0..2 {
            assert!((got[c] - corner_oracle(&v, p, c)).abs() < 1e-14);
        }
    }

    #[test]
    fn empty_query_gives_empty_result() {
        let v = random_volume([2, 2, 2], 1, 0);
        assert!(sample_trilinear(&v, &[]).is_empty());
    }

    #[test]
    fn clamps_out_of_bounds() {
        let v = random_volume([3, 3, 3], 1, 3);
        let inside = sample_trilinear(&v, &[[2.0, 0.0, 1.5]])[0][0];
        let outside = sample_trilinear(&v, &[[7.0, -3.0, 1.5]])[0][0];
        assert_eq!(inside, outside);
    }

    #[test]
    fn coordinate_gradient_matches_central_differences() {
        let v = random_volume([5, 5, 5], 1, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let p = [
                rng.random_range(0.1..3.9),
                rng.random_range(0.1..3.9),
                rng.random_range(0.1..3.9),
            ];
            // keep away from lattice kinks
            if p.iter().any(|c: &f64| (c - c.round()).abs() < 1e-3) {
                continue;
            }
            let (_, g) = &sample_trilinear_with_grad(&v, &[p])[0];
            for a in 0..3 {
                let h = 1e-6;
                let mut pp = p;
                let mut pm = p;
                pp[a] += h;
                pm[a] -= h;
                let fd = (sample_trilinear(&v, &[pp])[0][0] - sample_trilinear(&v, &[pm])[0][0])
                    / (2.0 * h);
                let rel = (g[0][a] - fd).abs() / fd.abs().max(g[0][a].abs()).max(1e-12);
                assert!(rel < 1e-6, "axis {a}: {} vs {fd}", g[0][a]);
            }
        }
    }

    #[test]
    fn zero_warp_is_identity() {
        let v = random_volume([4, 5, 6], 2, 1);
        let out = warp(&v, &DisplacementField::zeros([4, 5, 6])).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn integer_shift_warp() {
        let v = random_volume([5, 5, 5], 1, 2);
        let out = warp(&v, &DisplacementField::constant([5, 5, 5], [1.0, 0.0, 0.0])).unwrap();
        for z in 0..5 {
            for y in 0..5 {
                for x in 0..4 {
                    assert_eq!(out.get(x, y, z, 0), v.get(x + 1, y, z, 0));
                }
            }
        }
    }

    #[test]
    fn warp_matches_per_voxel_sampling() {
        let dims = [4, 5, 3];
        let v = random_volume(dims, 1, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let field = DisplacementField::from_fn(dims, |_, _, _| {
            [
                rng.random_range(-0.8..0.8),
                rng.random_range(-0.8..0.8),
                rng.random_range(-0.8..0.8),
            ]
        })
        .unwrap();
        let out = warp(&v, &field).unwrap();
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let d = field.at(x, y, z);
                    let p = [x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]];
                    assert_eq!(out.get(x, y, z, 0), sample_trilinear(&v, &[p])[0][0]);
                }
            }
        }
    }

    #[test]
    fn warp_rejects_mismatched_dims() {
        let v = random_volume([4, 4, 4], 1, 0);
        let err = warp(&v, &DisplacementField::zeros([4, 4, 5])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 4, 4, 4]") && msg.contains("[3, 5, 4, 4]"), "{msg}");
    }

    #[test]
    fn nearest_label_warp_shifts() {
        let mut l = LabelVolume::zeros([4, 1, 1]);
        l.set(2, 0, 0, 7);
        let out =
            warp_labels_nearest(&l, &DisplacementField::constant([4, 1, 1], [1.2, 0.0, 0.0])).unwrap();
        assert_eq!(out.data(), &[0, 7, 0, 0]);
    }
}
