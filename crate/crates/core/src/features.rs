//! Dense feature extraction: normalized intensity, MIND self-similarity
//! descriptors, and a small trainable convolutional extractor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundParams, ParameterSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::volume::{spatial_index, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Intensity,
    Mind,
    Learned,
}

impl FeatureKind {
    /// Descriptor dimension produced by this extractor.
    pub fn dim(self) -> usize {
        match self {
            FeatureKind::Intensity => 1,
            FeatureKind::Mind => MIND_CHANNELS,
            FeatureKind::Learned => LEARNED_CHANNELS,
        }
    }
}

/// Per-voxel descriptor volume (`channels` = descriptor dimension).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub volume: Volume,
    pub kind: FeatureKind,
}

impl FeatureMap {
    pub fn dim(&self) -> usize {
        self.volume.channels()
    }
}

fn single_channel(img: &Volume, op: &str) -> Result<()> {
    if img.channels() != 1 {
        return Err(Error::InvalidArgument(format!(
            "{op} expects a single-channel image, got {} channels",
            img.channels()
        )));
    }
    Ok(())
}

/// Rescales an image to [0, 1] with `(x - min) / (max - min)`. A constant
/// image maps to zeros.
pub fn normalize_intensity(img: &Volume) -> Result<Volume> {
    let (lo, hi) = img.min_max();
    let range = hi - lo;
    if range <= 0.0 {
        return Ok(Volume::zeros(img.dims(), img.channels()));
    }
    img.map(|v| (v - lo) / range)
}

pub fn intensity_features(img: &Volume) -> Result<FeatureMap> {
    single_channel(img, "intensity_features")?;
    Ok(FeatureMap {
        volume: normalize_intensity(img)?,
        kind: FeatureKind::Intensity,
    })
}

pub const MIND_CHANNELS: usize = 6;

/// Face-neighbour offsets, in channel order.
pub const MIND_OFFSETS: [[isize; 3]; MIND_CHANNELS] = [
    [1, 0, 0],
    [-1, 0, 0],
    [0, 1, 0],
    [0, -1, 0],
    [0, 0, 1],
    [0, 0, -1],
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MindConfig {
    pub patch_radius: usize,
    pub sigma: f64,
    /// Lower bound on the local variance, as a fraction of its spatial mean.
    pub variance_floor: f64,
}

impl Default for MindConfig {
    fn default() -> Self {
        Self {
            patch_radius: 1,
            sigma: 0.8,
            variance_floor: 1e-3,
        }
    }
}

impl MindConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_radius < 1 || !(self.variance_floor > 0.0 && self.variance_floor < 1.0) || self.sigma <= 0.0 {
            return Err(Error::Config(format!("invalid MIND configuration {self:?}")));
        }
        Ok(())
    }
}

#[inline]
fn clamped(v: isize, n: usize) -> usize {
    v.clamp(0, n as isize - 1) as usize
}

/// MIND descriptors over the six face neighbours.
///
/// Channel `k` at `p` is `exp(-D_k(p) / V(p))`, where `D_k` is the
/// Gaussian-weighted patch SSD between the patches at `p` and `p + o_k`
/// and `V` is the mean of the six distances, floored at
/// `variance_floor` times its spatial mean. Each descriptor is then scaled
/// so its largest channel is exactly 1. Borders replicate.
pub fn mind_features(img: &Volume, cfg: &MindConfig) -> Result<FeatureMap> {
    single_channel(img, "mind_features")?;
    cfg.validate()?;
    let dims = img.dims();
    let min_extent = 2 * cfg.patch_radius + 3;
    if dims.iter().any(|&n| n < min_extent) {
        return Err(Error::InvalidArgument(format!(
            "mind_features needs at least {min_extent} voxels per axis, got {dims:?}"
        )));
    }
    let r = cfg.patch_radius as isize;
    let mut taps = Vec::new();
    for vz in -r..=r {
        for vy in -r..=r {
            for vx in -r..=r {
                let d2 = (vx * vx + vy * vy + vz * vz) as f64;
                taps.push(([vx, vy, vz], (-d2 / (2.0 * cfg.sigma * cfg.sigma)).exp()));
            }
        }
    }
    let data = img.data();
    let n = img.voxel_count();
    let at = |p: [isize; 3]| {
        data[spatial_index(dims, clamped(p[0], dims[0]), clamped(p[1], dims[1]), clamped(p[2], dims[2]))]
    };

    let mut dist = vec![0.0; MIND_CHANNELS * n];
    let mut var = vec![0.0; n];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = [x as isize, y as isize, z as isize];
                let i = spatial_index(dims, x, y, z);
                let mut sum = 0.0;
                for (k, o) in MIND_OFFSETS.iter().enumerate() {
                    let mut d = 0.0;
                    for (v, w) in &taps {
                        let a = at([p[0] + v[0], p[1] + v[1], p[2] + v[2]]);
                        let b = at([p[0] + o[0] + v[0], p[1] + o[1] + v[1], p[2] + o[2] + v[2]]);
                        d += w * (a - b) * (a - b);
                    }
                    dist[k * n + i] = d;
                    sum += d;
                }
                var[i] = sum / MIND_CHANNELS as f64;
            }
        }
    }
    let mean_var = var.iter().sum::<f64>() / n as f64;
    let floor = (cfg.variance_floor * mean_var).max(f64::MIN_POSITIVE);

    let mut out = vec![0.0; MIND_CHANNELS * n];
    for i in 0..n {
        let v = var[i].max(floor);
        let mut top = 0.0f64;
        for k in 0..MIND_CHANNELS {
            let e = (-dist[k * n + i] / v).exp();
            out[k * n + i] = e;
            top = top.max(e);
        }
        for k in 0..MIND_CHANNELS {
            out[k * n + i] /= top;
        }
    }
    Ok(FeatureMap {
        volume: Volume::new(dims, MIND_CHANNELS, out)?,
        kind: FeatureKind::Mind,
    })
}

pub const LEARNED_CHANNELS: usize = 8;
const LEARNED_HIDDEN: usize = 8;
const LEARNED_SLOPE: f64 = 0.1;

/// `(name prefix, in channels, out channels)` for each 3³ layer.
fn learned_layers() -> [(&'static str, usize, usize); 3] {
    [
        ("features.conv0", 1, LEARNED_HIDDEN),
        ("features.conv1", LEARNED_HIDDEN, LEARNED_HIDDEN),
        ("features.conv2", LEARNED_HIDDEN, LEARNED_CHANNELS),
    ]
}

/// Adds freshly initialized extractor weights to `params`.
pub fn init_learned_params(params: &mut ParameterSet, rng: &mut impl Rng) -> Result<()> {
    for (name, cin, cout) in learned_layers() {
        let fan_in = cin * 27;
        params.init_uniform(format!("{name}.weight"), &[cout, cin, 3, 3, 3], fan_in, rng)?;
        params.init_uniform(format!("{name}.bias"), &[cout], fan_in, rng)?;
    }
    Ok(())
}

fn check_learned_params(params: &ParameterSet) -> Result<()> {
    for (name, cin, cout) in learned_layers() {
        let w = params.require(&format!("{name}.weight"))?;
        let b = params.require(&format!("{name}.bias"))?;
        if w.shape() != [cout, cin, 3, 3, 3] || b.shape() != [cout] {
            return Err(Error::shape("learned_features", w.shape(), &[cout, cin, 3, 3, 3]));
        }
    }
    Ok(())
}

/// Three-layer CNN (1→8→8→8, 3³ kernels, zero padding, leaky ReLU 0.1
/// between layers) on a `[1, z, y, x]` image node. Output `[8, z, y, x]`.
pub fn learned_features_on_tape(tape: &mut Tape, img: Var, params: &BoundParams) -> Result<Var> {
    let layers = learned_layers();
    let mut h = img;
    for (i, (name, _, _)) in layers.iter().enumerate() {
        let w = params.var(&format!("{name}.weight"))?;
        let b = params.var(&format!("{name}.bias"))?;
        h = tape.conv3d(h, w, b, 1, 1)?;
        if i + 1 < layers.len() {
            h = tape.leaky_relu(h, LEARNED_SLOPE);
        }
    }
    Ok(h)
}

/// Inference-only learned features of a single-channel image.
pub fn learned_features(img: &Volume, params: &ParameterSet) -> Result<FeatureMap> {
    single_channel(img, "learned_features")?;
    check_learned_params(params)?;
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let x = tape.constant(Tensor::from_volume(img));
    let y = learned_features_on_tape(&mut tape, x, &bound)?;
    Ok(FeatureMap {
        volume: tape.value(y).to_volume()?,
        kind: FeatureKind::Learned,
    })
}
