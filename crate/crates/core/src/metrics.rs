//! Similarity and regularity losses (LNCC, bending energy) and evaluation
//! metrics (Dice, Hessian norm, log-Jacobian spread, point-set W2).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::points::DrivingPointSet;
use crate::volume::{spatial_index, DisplacementField, Dims, LabelVolume, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LnccConfig {
    pub radius: usize,
    pub epsilon: f64,
}

impl Default for LnccConfig {
    fn default() -> Self {
        Self {
            radius: 1,
            epsilon: 1e-8,
        }
    }
}

/// Interior sites whose full `(2r+1)^3` neighbourhood fits in the volume.
pub fn lncc_interior_count(dims: Dims, radius: usize) -> usize {
    dims.iter().map(|&n| n.saturating_sub(2 * radius)).product()
}

fn interior_sites(dims: Dims, r: usize) -> impl Iterator<Item = [usize; 3]> {
    let hi = dims.map(|n| n.saturating_sub(r));
    (r..hi[2]).flat_map(move |z| (r..hi[1]).flat_map(move |y| (r..hi[0]).map(move |x| [x, y, z])))
}

struct Neighbourhood {
    offsets: Vec<isize>,
    count: f64,
}

impl Neighbourhood {
    /// Local means and centred second moments `(mx, my, Sxx, Syy, Sxy)`.
    fn stats(&self, x: &[f64], y: &[f64], s: usize) -> (f64, f64, f64, f64, f64) {
        let (mut sx, mut sy) = (0.0, 0.0);
        for &o in &self.offsets {
            let v = (s as isize + o) as usize;
            sx += x[v];
            sy += y[v];
        }
        let (mx, my) = (sx / self.count, sy / self.count);
        let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
        for &o in &self.offsets {
            let v = (s as isize + o) as usize;
            let (dx, dy) = (x[v] - mx, y[v] - my);
            sxx += dx * dx;
            syy += dy * dy;
            sxy += dx * dy;
        }
        (mx, my, sxx, syy, sxy)
    }
}

/// Local normalized cross correlation summed over interior sites.
///
/// `a`, `b`: `[1, z, y, x]`. Per site the correlation is
/// `Sxy / sqrt(max(Sxx, eps) max(Syy, eps))` with the local means removed.
pub fn lncc_on_tape(tape: &mut Tape, a: Var, b: Var, cfg: &LnccConfig) -> Result<Var> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb || sa.len() != 4 || sa[0] != 1 {
        return Err(Error::shape("lncc", sa, sb));
    }
    if cfg.radius < 1 || cfg.epsilon <= 0.0 {
        return Err(Error::Config(format!("invalid LNCC configuration {cfg:?}")));
    }
    let dims = [sa[3], sa[2], sa[1]];
    let r = cfg.radius as isize;
    let eps = cfg.epsilon;
    let mut offsets = Vec::new();
    for z in -r..=r {
        for y in -r..=r {
            for x in -r..=r {
                offsets.push((z * dims[1] as isize + y) * dims[0] as isize + x);
            }
        }
    }
    let count = offsets.len() as f64;
    let sites: Vec<usize> = interior_sites(dims, cfg.radius)
        .map(|p| spatial_index(dims, p[0], p[1], p[2]))
        .collect();

    let geom = Neighbourhood { offsets, count };
    let (xd, yd) = (tape.value(a).data(), tape.value(b).data());
    let total: f64 = sites
        .iter()
        .map(|&s| {
            let (_, _, sxx, syy, sxy) = geom.stats(xd, yd, s);
            sxy / (sxx.max(eps) * syy.max(eps)).sqrt()
        })
        .sum();
    Ok(tape.record(&[a, b], Tensor::scalar(total), move |inp, _, g| {
        let (xd, yd) = (inp[0].data(), inp[1].data());
        let mut gx = vec![0.0; xd.len()];
        let mut gy = vec![0.0; yd.len()];
        let g = g[0];
        for &s in &sites {
            let (mx, my, sxx, syy, sxy) = geom.stats(xd, yd, s);
            let (fx, fy) = (sxx.max(eps), syy.max(eps));
            let den = (fx * fy).sqrt();
            let cc = sxy / den;
            let kx = if sxx > eps { cc / sxx } else { 0.0 };
            let ky = if syy > eps { cc / syy } else { 0.0 };
            for &o in &geom.offsets {
                let v = (s as isize + o) as usize;
                let (dx, dy) = (xd[v] - mx, yd[v] - my);
                gx[v] += g * (dy / den - kx * dx);
                gy[v] += g * (dx / den - ky * dy);
            }
        }
        vec![Some(gx), Some(gy)]
    }))
}

pub fn lncc(a: &Volume, b: &Volume, cfg: &LnccConfig) -> Result<f64> {
    if a.channels() != 1 || b.channels() != 1 || a.dims() != b.dims() {
        return Err(Error::shape("lncc", &a.tensor_shape(), &b.tensor_shape()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_volume(a));
    let y = tape.constant(Tensor::from_volume(b));
    let v = lncc_on_tape(&mut tape, x, y, cfg)?;
    Ok(tape.value(v).item())
}

/// Sites where every second difference of the bending energy fits:
/// `p_a + 2 <= n_a - 1` on each axis.
pub fn bending_site_count(dims: Dims) -> usize {
    dims.iter().map(|&n| n.saturating_sub(2)).product()
}

// Second-difference stencils (linear offsets and coefficients) for the 9
// ordered axis pairs.
fn second_difference_stencils(dims: Dims) -> Vec<Vec<(usize, f64)>> {
    let step = [1, dims[0], dims[0] * dims[1]];
    let mut out = Vec::with_capacity(9);
    for i in 0..3 {
        for j in 0..3 {
            out.push(if i == j {
                vec![(0, 1.0), (step[i], -2.0), (2 * step[i], 1.0)]
            } else {
                vec![(0, 1.0), (step[i], -1.0), (step[j], -1.0), (step[i] + step[j], 1.0)]
            });
        }
    }
    out
}

/// Sum over valid sites and all 9 axis pairs of squared second-difference
/// vectors of the field `[3, z, y, x]`.
pub fn bending_energy_on_tape(tape: &mut Tape, field: Var) -> Result<Var> {
    let s = tape.shape(field);
    if s.len() != 4 || s[0] != 3 {
        return Err(Error::shape("bending_energy", s, &[3, 0, 0, 0]));
    }
    let dims = [s[3], s[2], s[1]];
    let nvox = dims[0] * dims[1] * dims[2];
    let sites: Vec<usize> = (0..dims[2].saturating_sub(2))
        .flat_map(|z| (0..dims[1].saturating_sub(2)).flat_map(move |y| (0..dims[0].saturating_sub(2)).map(move |x| [x, y, z])))
        .map(|p| spatial_index(dims, p[0], p[1], p[2]))
        .collect();
    let stencils = second_difference_stencils(dims);
    let d = tape.value(field).data();
    let mut total = 0.0;
    for c in 0..3 {
        let ch = &d[c * nvox..(c + 1) * nvox];
        for &p in &sites {
            for st in &stencils {
                let v: f64 = st.iter().map(|&(o, w)| w * ch[p + o]).sum();
                total += v * v;
            }
        }
    }
    Ok(tape.record(&[field], Tensor::scalar(total), move |inp, _, g| {
        let d = inp[0].data();
        let mut gf = vec![0.0; d.len()];
        for c in 0..3 {
            let off = c * nvox;
            for &p in &sites {
                for st in &stencils {
                    let v: f64 = st.iter().map(|&(o, w)| w * d[off + p + o]).sum();
                    for &(o, w) in st {
                        gf[off + p + o] += 2.0 * g[0] * v * w;
                    }
                }
            }
        }
        vec![Some(gf)]
    }))
}

pub fn bending_energy(field: &DisplacementField) -> f64 {
    let mut tape = Tape::new();
    let f = tape.constant(Tensor::from_volume(field.volume()));
    let e = bending_energy_on_tape(&mut tape, f).expect("three-channel field");
    tape.value(e).item()
}

/// Bending energy per contributing site; 0 when no site fits.
pub fn hessian_norm_mean(field: &DisplacementField) -> f64 {
    let n = bending_site_count(field.dims());
    if n == 0 {
        return 0.0;
    }
    bending_energy(field) / n as f64
}

pub fn dice(a: &LabelVolume, b: &LabelVolume, label: u16) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::shape("dice", &a.dims(), &b.dims()));
    }
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (ia, ib) = (x == label, y == label);
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JacobianStats {
    pub std_log_jacobian: f64,
    pub nonpositive_fraction: f64,
}

/// Determinant of `I + grad psi` by central differences at interior voxels.
pub fn jacobian_determinants(field: &DisplacementField) -> Vec<f64> {
    let dims = field.dims();
    let mut out = Vec::new();
    if dims.iter().any(|&n| n < 3) {
        return out;
    }
    for z in 1..dims[2] - 1 {
        for y in 1..dims[1] - 1 {
            for x in 1..dims[0] - 1 {
                let fwd = [field.at(x + 1, y, z), field.at(x, y + 1, z), field.at(x, y, z + 1)];
                let bwd = [field.at(x - 1, y, z), field.at(x, y - 1, z), field.at(x, y, z - 1)];
                // j[c][a] = d phi_c / d x_a
                let mut j = [[0.0; 3]; 3];
                for a in 0..3 {
                    for c in 0..3 {
                        j[c][a] = (fwd[a][c] - bwd[a][c]) / 2.0 + if a == c { 1.0 } else { 0.0 };
                    }
                }
                out.push(
                    j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1]) - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                        + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]),
                );
            }
        }
    }
    out
}

/// Population standard deviation of `log det` over positive-determinant
/// interior sites, plus the fraction of non-positive sites.
pub fn std_log_jacobian(field: &DisplacementField) -> Result<JacobianStats> {
    let dets = jacobian_determinants(field);
    if dets.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "field {:?} has no interior voxels for a Jacobian",
            field.dims()
        )));
    }
    let logs: Vec<f64> = dets.iter().filter(|&&d| d > 0.0).map(|d| d.ln()).collect();
    if logs.is_empty() {
        return Err(Error::Numeric("every Jacobian determinant is non-positive".into()));
    }
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    let var = logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / logs.len() as f64;
    Ok(JacobianStats {
        std_log_jacobian: var.sqrt(),
        nonpositive_fraction: (dets.len() - logs.len()) as f64 / dets.len() as f64,
    })
}

/// Minimum-cost perfect assignment of a square cost matrix (row-major)
/// by shortest augmenting paths. Returns `col_of_row`.
pub fn min_cost_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    // Potentials u (rows) and v (columns), 1-based with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0; n];
    for j in 1..=n {
        if row_of[j] > 0 {
            col_of[row_of[j] - 1] = j - 1;
        }
    }
    col_of
}

/// Wasserstein-2 distance between equal-size point multisets.
pub fn w2_points(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("w2_pointsets", &[a.len(), 3], &[b.len(), 3]));
    }
    let n = a.len();
    if n == 0 {
        return Ok(0.0);
    }
    let cost: Vec<f64> = a
        .iter()
        .flat_map(|p| b.iter().map(move |q| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>()))
        .collect();
    let col = min_cost_assignment(&cost, n);
    let total: f64 = (0..n).map(|i| cost[i * n + col[i]]).sum();
    Ok((total / n as f64).max(0.0).sqrt())
}

pub fn w2_pointsets(a: &DrivingPointSet, b: &DrivingPointSet) -> Result<f64> {
    w2_points(a.points(), b.points())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelDice {
    pub label: u16,
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dice_per_label: Vec<LabelDice>,
    pub dice_mean: f64,
    pub hessian_mean: f64,
    pub std_log_jacobian: f64,
    pub nonpositive_jacobian_fraction: f64,
    pub w2: Option<f64>,
}

impl MetricsReport {
    /// Dice per label present in either map, and regularity of `field`.
    pub fn compute(fixed: &LabelVolume, warped: &LabelVolume, field: &DisplacementField) -> Result<Self> {
        let mut labels = fixed.labels();
        labels.extend(warped.labels());
        labels.sort_unstable();
        labels.dedup();
        let dice_per_label = labels
            .iter()
            .map(|&l| Ok(LabelDice { label: l, dice: dice(fixed, warped, l)? }))
            .collect::<Result<Vec<_>>>()?;
        let dice_mean = if dice_per_label.is_empty() {
            1.0
        } else {
            dice_per_label.iter().map(|d| d.dice).sum::<f64>() / dice_per_label.len() as f64
        };
        let jac = std_log_jacobian(field)?;
        Ok(Self {
            dice_per_label,
            dice_mean,
            hessian_mean: hessian_norm_mean(field),
            std_log_jacobian: jac.std_log_jacobian,
            nonpositive_jacobian_fraction: jac.nonpositive_fraction,
            w2: None,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
