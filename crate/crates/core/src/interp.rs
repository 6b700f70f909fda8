//! Dense displacement fields from sparse driving-point displacements by
//! normalized Gaussian kernel interpolation.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::volume::{spatial_index, voxel_count, DisplacementField, Dims};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpConfig {
    /// Kernel bandwidth in voxels; half the grid spacing when absent.
    pub sigma: Option<f64>,
    /// Kernel support radius in multiples of `sigma`.
    pub truncation: f64,
    pub epsilon: f64,
}

impl Default for InterpConfig {
    fn default() -> Self {
        Self {
            sigma: None,
            truncation: 3.0,
            epsilon: 1e-12,
        }
    }
}

/// Voxel box `[lo, hi]` per axis covered by a kernel of radius `r` at `p`.
fn support(p: &[f64], r: f64, dims: Dims) -> Option<[(usize, usize); 3]> {
    let mut out = [(0, 0); 3];
    for a in 0..3 {
        let lo = (p[a] - r).ceil().max(0.0);
        let hi = (p[a] + r).floor().min((dims[a] - 1) as f64);
        if lo > hi {
            return None;
        }
        out[a] = (lo as usize, hi as usize);
    }
    Some(out)
}

/// `points: [n, 3]`, `disp: [n, 3]` to a dense `[3, z, y, x]` field.
///
/// `psi(x) = sum_p K(x, p) psi_p / (sum_p K(x, p) + eps)` with
/// `K = exp(-|x - p|^2 / (2 sigma^2))` cut off beyond `truncation * sigma`.
/// Voxels outside every kernel take the nearest point's displacement.
pub fn densify_on_tape(
    tape: &mut Tape,
    points: Var,
    disp: Var,
    dims: Dims,
    sigma: f64,
    cfg: &InterpConfig,
) -> Result<Var> {
    let (ps, ds) = (tape.shape(points), tape.shape(disp));
    if ps.len() != 2 || ps[1] != 3 || ps != ds {
        return Err(Error::shape("densify", ps, ds));
    }
    let n = ps[0];
    if n == 0 {
        return Err(Error::InvalidArgument("densify needs at least one driving point".into()));
    }
    if sigma <= 0.0 || cfg.truncation <= 0.0 || cfg.epsilon < 0.0 {
        return Err(Error::Config(format!("invalid interpolation settings sigma={sigma} {cfg:?}")));
    }
    let nvox = voxel_count(dims);
    let radius = cfg.truncation * sigma;
    let (r2, inv2s2, eps) = (radius * radius, 1.0 / (2.0 * sigma * sigma), cfg.epsilon);
    let pd = tape.value(points).data().to_vec();
    let dd = tape.value(disp).data();

    let mut z = vec![0.0; nvox];
    let mut num = vec![0.0; 3 * nvox];
    let visit = move |p: &[f64], f: &mut dyn FnMut(usize, [f64; 3], f64)| {
        let Some(b) = support(p, radius, dims) else { return };
        for vz in b[2].0..=b[2].1 {
            for vy in b[1].0..=b[1].1 {
                for vx in b[0].0..=b[0].1 {
                    let d = [vx as f64 - p[0], vy as f64 - p[1], vz as f64 - p[2]];
                    let d2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                    if d2 <= r2 {
                        f(spatial_index(dims, vx, vy, vz), d, (-d2 * inv2s2).exp());
                    }
                }
            }
        }
    };
    for i in 0..n {
        let psi = [dd[i * 3], dd[i * 3 + 1], dd[i * 3 + 2]];
        visit(&pd[i * 3..i * 3 + 3], &mut |v, _, k| {
            z[v] += k;
            for c in 0..3 {
                num[c * nvox + v] += k * psi[c];
            }
        });
    }
    // Fallback to the nearest point where no kernel reaches.
    let mut nearest = Vec::new();
    let mut out = vec![0.0; 3 * nvox];
    for v in 0..nvox {
        if z[v] > 0.0 {
            for c in 0..3 {
                out[c * nvox + v] = num[c * nvox + v] / (z[v] + eps);
            }
        } else {
            let x = crate::volume::spatial_coords(dims, v);
            let x = [x[0] as f64, x[1] as f64, x[2] as f64];
            let best = (0..n)
                .min_by(|&a, &b| {
                    let da: f64 = (0..3).map(|k| (x[k] - pd[a * 3 + k]).powi(2)).sum();
                    let db: f64 = (0..3).map(|k| (x[k] - pd[b * 3 + k]).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap_or(0);
            for c in 0..3 {
                out[c * nvox + v] = dd[best * 3 + c];
            }
            nearest.push((v, best));
        }
    }
    let value = Tensor::from_parts(vec![3, dims[2], dims[1], dims[0]], out);
    Ok(tape.record(&[points, disp], value, move |inp, out, g| {
        let dd = inp[1].data();
        let od = out.data();
        let mut gp = vec![0.0; n * 3];
        let mut gd = vec![0.0; n * 3];
        for i in 0..n {
            let psi = [dd[i * 3], dd[i * 3 + 1], dd[i * 3 + 2]];
            let mut acc_d = [0.0; 3];
            let mut acc_p = [0.0; 3];
            visit(&pd[i * 3..i * 3 + 3], &mut |v, d, k| {
                let inv = 1.0 / (z[v] + eps);
                let mut gk = 0.0;
                for c in 0..3 {
                    let gv = g[c * nvox + v];
                    acc_d[c] += gv * k * inv;
                    gk += gv * (psi[c] - od[c * nvox + v]) * inv;
                }
                // dK/dp = K (x - p) / sigma^2
                let s = gk * k * 2.0 * inv2s2;
                for a in 0..3 {
                    acc_p[a] += s * d[a];
                }
            });
            for a in 0..3 {
                gd[i * 3 + a] += acc_d[a];
                gp[i * 3 + a] += acc_p[a];
            }
        }
        for &(v, best) in &nearest {
            for c in 0..3 {
                gd[best * 3 + c] += g[c * nvox + v];
            }
        }
        vec![Some(gp), Some(gd)]
    }))
}

/// Inference-only interpolation.
pub fn densify(
    points: &[[f64; 3]],
    disp: &[[f64; 3]],
    dims: Dims,
    sigma: f64,
    cfg: &InterpConfig,
) -> Result<DisplacementField> {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::new(vec![points.len(), 3], points.iter().flatten().copied().collect())?);
    let d = tape.constant(Tensor::new(vec![disp.len(), 3], disp.iter().flatten().copied().collect())?);
    let f = densify_on_tape(&mut tape, p, d, dims, sigma, cfg)?;
    DisplacementField::new(tape.value(f).to_volume()?)
}
