//! Synthetic phantom pairs with known smooth deformations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::jacobian_determinants;
use crate::points::{gaussian_kernel, smooth};
use crate::volume::{spatial_index, warp, warp_labels_nearest, DisplacementField, Dims, LabelVolume, Volume};

pub const MAX_REJECTIONS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub dims: Dims,
    /// Number of labelled ellipsoids inside the body.
    pub organs: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Gaussian smoothing of the white-noise displacement, in voxels.
    pub smoothness: f64,
    /// Largest displacement vector norm, in voxels.
    pub magnitude: f64,
    /// Standard deviation of the intensity texture.
    pub noise: f64,
    /// Gaussian smoothing of the texture, in voxels.
    pub texture_scale: f64,
    /// Gaussian blur of the final image, in voxels.
    pub blur: f64,
    /// Consecutive pairs sharing one fixed anatomy.
    pub movings_per_fixed: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            dims: [32, 32, 32],
            organs: 4,
            radius_min: 3.0,
            radius_max: 6.0,
            smoothness: 5.0,
            magnitude: 3.0,
            noise: 0.08,
            texture_scale: 0.7,
            blur: 0.6,
            movings_per_fixed: 4,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.dims.iter().all(|&n| n >= 4)
            && self.organs >= 1
            && self.organs < u16::MAX as usize
            && self.radius_min > 0.0
            && self.radius_max >= self.radius_min
            && self.smoothness > 0.0
            && self.magnitude >= 0.0
            && self.magnitude.is_finite()
            && self.noise >= 0.0
            && self.texture_scale > 0.0
            && self.blur > 0.0
            && self.movings_per_fixed >= 1;
        if !ok {
            return Err(Error::Config(format!("invalid synthetic spec {self:?}")));
        }
        Ok(())
    }
}

/// One generated registration problem. `moving(p) = fixed(p + gt(p))`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub fixed: Volume,
    pub moving: Volume,
    pub fixed_labels: LabelVolume,
    pub moving_labels: LabelVolume,
    pub gt_field: DisplacementField,
}

/// Gaussian-smoothed white noise. Drawn on a domain padded by the kernel
/// radius and cropped, so the variance is uniform up to the border.
fn smooth_noise(dims: Dims, sigma: f64, rng: &mut impl Rng) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let pad = kernel.len() / 2;
    let big = dims.map(|n| n + 2 * pad);
    let noise: Vec<f64> = (0..big.iter().product()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let smoothed = smooth(&noise, big, &kernel);
    let mut out = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                out.push(smoothed[spatial_index(big, x + pad, y + pad, z + pad)]);
            }
        }
    }
    out
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Body ellipsoid with randomly placed labelled organ ellipsoids, blurred,
/// plus smooth texture.
pub fn phantom(spec: &SyntheticSpec, rng: &mut impl Rng) -> Result<(Volume, LabelVolume)> {
    let dims = spec.dims;
    let centre = dims.map(|n| (n as f64 - 1.0) / 2.0);
    let body: [f64; 3] = [0, 1, 2].map(|a| dims[a] as f64 * rng.random_range(0.38..0.46));
    let mut labels = LabelVolume::zeros(dims);
    let mut intensity = vec![0.0; dims.iter().product()];
    let inside = |p: [f64; 3], c: [f64; 3], r: [f64; 3]| (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum::<f64>() <= 1.0;
    let mut organs = Vec::new();
    for k in 0..spec.organs {
        let c: [f64; 3] = [0, 1, 2].map(|a| centre[a] + body[a] * rng.random_range(-0.45..0.45));
        let r: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(spec.radius_min..=spec.radius_max));
        let level = 0.45 + 0.55 * (k as f64 + rng.random_range(0.0..0.6)) / spec.organs as f64;
        organs.push((c, r, level));
    }
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = [x as f64, y as f64, z as f64];
                let i = spatial_index(dims, x, y, z);
                if inside(p, centre, body) {
                    intensity[i] = 0.2;
                }
                for (k, (c, r, level)) in organs.iter().enumerate() {
                    if inside(p, *c, *r) {
                        intensity[i] = *level;
                        labels.set(x, y, z, k as u16 + 1);
                    }
                }
            }
        }
    }
    if spec.noise > 0.0 {
        let tex = smooth_noise(dims, spec.texture_scale, rng);
        let sd = (tex.iter().map(|v| v * v).sum::<f64>() / tex.len() as f64).sqrt().max(f64::MIN_POSITIVE);
        for (v, t) in intensity.iter_mut().zip(&tex) {
            *v += spec.noise * t / sd;
        }
    }
    let blurred = smooth(&intensity, dims, &gaussian_kernel(spec.blur));
    Ok((Volume::new(dims, 1, blurred)?, labels))
}

/// Smoothed white noise scaled so the largest vector has norm `magnitude`;
/// resampled until every interior Jacobian determinant is positive.
pub fn random_field(spec: &SyntheticSpec, rng: &mut impl Rng) -> Result<DisplacementField> {
    let dims = spec.dims;
    if spec.magnitude == 0.0 {
        return Ok(DisplacementField::zeros(dims));
    }
    let n: usize = dims.iter().product();
    for _ in 0..MAX_REJECTIONS {
        let mut data = Vec::with_capacity(3 * n);
        for _ in 0..3 {
            data.extend(smooth_noise(dims, spec.smoothness, rng));
        }
        let peak = (0..n)
            .map(|i| (data[i].powi(2) + data[n + i].powi(2) + data[2 * n + i].powi(2)).sqrt())
            .fold(0.0, f64::max);
        if peak == 0.0 {
            continue;
        }
        let s = spec.magnitude / peak;
        data.iter_mut().for_each(|v| *v *= s);
        let field = DisplacementField::new(Volume::new(dims, 3, data)?)?;
        if jacobian_determinants(&field).iter().all(|&d| d > 0.0) {
            return Ok(field);
        }
    }
    Err(Error::Rejection { attempts: MAX_REJECTIONS })
}

/// `count` pairs; pair `i` uses anatomy `i / movings_per_fixed`.
pub fn synth_generate(spec: &SyntheticSpec, count: usize) -> Result<Vec<SyntheticPair>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(count);
    let mut current: Option<(usize, Volume, LabelVolume)> = None;
    for i in 0..count {
        let anatomy = i / spec.movings_per_fixed;
        if current.as_ref().is_none_or(|c| c.0 != anatomy) {
            let (img, lab) = phantom(spec, &mut rng_for(spec.seed, 2 * anatomy as u64))?;
            current = Some((anatomy, img, lab));
        }
        let (_, fixed, fixed_labels) = current.as_ref().expect("anatomy generated");
        let gt_field = random_field(spec, &mut rng_for(spec.seed, 2 * i as u64 + 1))?;
        out.push(SyntheticPair {
            moving: warp(fixed, &gt_field)?,
            moving_labels: warp_labels_nearest(fixed_labels, &gt_field)?,
            fixed: fixed.clone(),
            fixed_labels: fixed_labels.clone(),
            gt_field,
        });
    }
    Ok(out)
}
