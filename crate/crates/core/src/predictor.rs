//! Driving-points predictor: a strided convolutional encoder that reads the
//! image pair and its feature maps and deforms a low-resolution rest grid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{conv_out_extent, BoundParams, ParameterSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::points::{DrivingPointSet, Provenance, RestGrid};
use crate::volume::{Dims, Volume};

const SLOPE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    /// Displacement cap as a fraction of the image extent per axis.
    pub cap: f64,
    /// Number of predicted displacement fields.
    pub heads: usize,
    /// Encoder widths; the last entry repeats when there are more stages.
    pub channels: Vec<usize>,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            cap: 0.2,
            heads: 1,
            channels: vec![16, 16, 16],
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cap > 0.0 && self.cap < 0.5) || self.heads == 0 || self.channels.is_empty() || self.channels.contains(&0)
        {
            return Err(Error::Config(format!("invalid predictor configuration {self:?}")));
        }
        Ok(())
    }

    fn width(&self, stage: usize) -> usize {
        self.channels[stage.min(self.channels.len() - 1)]
    }
}

/// Number of stride-2 stages for grid spacing `s` (which must be a power of two).
pub fn encoder_stages(spacing: f64) -> Result<usize> {
    let s = spacing as usize;
    if spacing != s as f64 || s == 0 || !s.is_power_of_two() {
        return Err(Error::Config(format!(
            "predictor needs a power-of-two grid spacing, got {spacing}"
        )));
    }
    Ok(s.trailing_zeros() as usize)
}

/// Checks the encoder maps `dims` onto the rest grid.
pub fn check_geometry(dims: Dims, grid: &RestGrid) -> Result<usize> {
    let stages = encoder_stages(grid.spacing)?;
    let mut d = dims;
    for _ in 0..stages {
        for n in d.iter_mut() {
            *n = conv_out_extent(*n, 3, 2, 1).ok_or_else(|| Error::Config("volume too small for encoder".into()))?;
        }
    }
    if d != grid.dims {
        return Err(Error::Config(format!(
            "encoder reduces {dims:?} to {d:?} but the rest grid is {:?}; choose a spacing and margin whose grid matches",
            grid.dims
        )));
    }
    Ok(stages)
}

/// Adds encoder and head weights. The head starts at zero so an untrained
/// predictor returns the rest grid.
pub fn init_predictor_params(
    params: &mut ParameterSet,
    feature_dim: usize,
    stages: usize,
    cfg: &PredictorConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    cfg.validate()?;
    let mut cin = 2 + 2 * feature_dim;
    for s in 0..stages {
        let cout = cfg.width(s);
        params.init_uniform(format!("predictor.enc{s}.weight"), &[cout, cin, 3, 3, 3], cin * 27, rng)?;
        params.init_uniform(format!("predictor.enc{s}.bias"), &[cout], cin * 27, rng)?;
        cin = cout;
    }
    params.insert("predictor.head.weight", Tensor::zeros(&[3 * cfg.heads, cin, 3, 3, 3]))?;
    params.insert("predictor.head.bias", Tensor::zeros(&[3 * cfg.heads]))?;
    Ok(())
}

/// Network input: normalized fixed and moving images and both feature maps,
/// concatenated along channels.
pub fn predictor_input(tape: &mut Tape, fixed: Var, moving: Var, feat_fixed: Var, feat_moving: Var) -> Result<Var> {
    tape.concat(&[fixed, moving, feat_fixed, feat_moving], 0)
}

/// Raw head output `[3 D, gz, gy, gx]`.
pub fn predictor_raw(tape: &mut Tape, input: Var, params: &BoundParams, stages: usize) -> Result<Var> {
    let mut h = input;
    for s in 0..stages {
        let w = params.var(&format!("predictor.enc{s}.weight"))?;
        let b = params.var(&format!("predictor.enc{s}.bias"))?;
        h = tape.conv3d(h, w, b, 2, 1)?;
        h = tape.leaky_relu(h, SLOPE);
    }
    let w = params.var("predictor.head.weight")?;
    let b = params.var("predictor.head.bias")?;
    tape.conv3d(h, w, b, 1, 1)
}

/// Maps raw head output to capped, clamped points `[D G, 3]`, head-major
/// then lexicographic rest-grid order.
///
/// `u = c n_a tanh(raw / (c n_a))`, `p = clamp(g + u, 0, n_a - 1)`.
pub fn capped_points_on_tape(tape: &mut Tape, raw: Var, grid: &RestGrid, dims: Dims, cap: f64) -> Result<Var> {
    let rs = tape.shape(raw).to_vec();
    let [gx, gy, gz] = grid.dims;
    if rs.len() != 4 || !rs[0].is_multiple_of(3) || rs[0] == 0 || rs[1..] != [gz, gy, gx] {
        return Err(Error::shape("capped_points", &rs, &[3, gz, gy, gx]));
    }
    let heads = rs[0] / 3;
    let gcount = grid.count();
    let verts = grid.vertices();
    let scale: [f64; 3] = [0, 1, 2].map(|a| cap * dims[a] as f64);
    let rd = tape.value(raw).data();
    let mut out = Vec::with_capacity(heads * gcount * 3);
    // (raw index, d p / d raw) per output coordinate.
    let mut jac = Vec::with_capacity(heads * gcount * 3);
    for h in 0..heads {
        for i in 0..gx {
            for j in 0..gy {
                for k in 0..gz {
                    let v = verts[(i * gy + j) * gz + k];
                    for a in 0..3 {
                        let ri = ((h * 3 + a) * gz + k) * gy * gx + j * gx + i;
                        let t = (rd[ri] / scale[a]).tanh();
                        let p = v[a] + scale[a] * t;
                        let hi = (dims[a] - 1) as f64;
                        let inside = (0.0..=hi).contains(&p);
                        out.push(p.clamp(0.0, hi));
                        jac.push((ri, if inside { 1.0 - t * t } else { 0.0 }));
                    }
                }
            }
        }
    }
    let nraw = rd.len();
    let value = Tensor::from_parts(vec![heads * gcount, 3], out);
    Ok(tape.record(&[raw], value, move |_, _, g| {
        let mut gr = vec![0.0; nraw];
        for (o, &(ri, d)) in jac.iter().enumerate() {
            gr[ri] += g[o] * d;
        }
        vec![Some(gr)]
    }))
}

/// Full predictor forward on the tape; returns points `[D G, 3]`.
pub fn predict_points_on_tape(
    tape: &mut Tape,
    input: Var,
    params: &BoundParams,
    grid: &RestGrid,
    cfg: &PredictorConfig,
) -> Result<Var> {
    cfg.validate()?;
    let s = tape.shape(input);
    if s.len() != 4 {
        return Err(Error::shape("predict_points", s, &[0, 0, 0, 0]));
    }
    let dims = [s[3], s[2], s[1]];
    let stages = check_geometry(dims, grid)?;
    let raw = predictor_raw(tape, input, params, stages)?;
    if tape.shape(raw)[0] != 3 * cfg.heads {
        return Err(Error::shape("predict_points", tape.shape(raw), &[3 * cfg.heads]));
    }
    capped_points_on_tape(tape, raw, grid, dims, cfg.cap)
}

/// Inference-only prediction from normalized images and feature maps.
pub fn predict_points(
    fixed: &Volume,
    moving: &Volume,
    feat_fixed: &FeatureMap,
    feat_moving: &FeatureMap,
    params: &ParameterSet,
    grid: &RestGrid,
    cfg: &PredictorConfig,
) -> Result<DrivingPointSet> {
    let dims = fixed.dims();
    for v in [moving, &feat_fixed.volume, &feat_moving.volume] {
        if v.dims() != dims {
            return Err(Error::shape("predict_points", &fixed.tensor_shape(), &v.tensor_shape()));
        }
    }
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let vars: Vec<Var> = [fixed, moving, &feat_fixed.volume, &feat_moving.volume]
        .iter()
        .map(|v| tape.constant(Tensor::from_volume(v)))
        .collect();
    let input = predictor_input(&mut tape, vars[0], vars[1], vars[2], vars[3])?;
    let pts = predict_points_on_tape(&mut tape, input, &bound, grid, cfg)?;
    let points = tape.value(pts).data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    DrivingPointSet::new(points, Provenance::Predicted, Some(*grid))
}

/// Descriptors `[n, d]` of `feat: [d, z, y, x]` at `points: [n, 3]`.
pub fn sample_driving_features(tape: &mut Tape, feat: Var, points: Var) -> Result<Var> {
    tape.grid_sample(feat, points)
}
