//! Matching potentials: cosine similarity between each driving point's
//! descriptor and moving-image descriptors over a discrete search region.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::points::DrivingPointSet;
use crate::volume::Stencil;

/// Cosine similarities with `|f| |g|` at or below this are taken as 0.
pub const COSINE_EPS: f64 = 1e-12;

/// Displacements `{-r, -r+t, ..., r}` on each axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchRegion {
    pub radius: usize,
    pub stride: usize,
}

impl Default for SearchRegion {
    fn default() -> Self {
        Self { radius: 3, stride: 1 }
    }
}

impl SearchRegion {
    pub fn new(radius: usize, stride: usize) -> Result<Self> {
        let r = Self { radius, stride };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || !self.radius.is_multiple_of(self.stride) {
            return Err(Error::Config(format!(
                "search stride {} must be positive and divide radius {}",
                self.stride, self.radius
            )));
        }
        Ok(())
    }

    pub fn per_axis(&self) -> usize {
        2 * self.radius / self.stride + 1
    }

    pub fn len(&self) -> usize {
        self.per_axis().pow(3)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Candidates in lexicographic `(dx, dy, dz)` order, `dz` fastest.
    pub fn displacements(&self) -> Vec<[f64; 3]> {
        let steps: Vec<f64> = (0..self.per_axis())
            .map(|i| (i * self.stride) as f64 - self.radius as f64)
            .collect();
        let mut out = Vec::with_capacity(self.len());
        for &dx in &steps {
            for &dy in &steps {
                for &dz in &steps {
                    out.push([dx, dy, dz]);
                }
            }
        }
        out
    }

    /// Index of displacement zero.
    pub fn zero_index(&self) -> usize {
        (self.len() - 1) / 2
    }
}

/// Potentials `mu[p * |D| + k]` for each driving point and candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementDistribution {
    pub points: Vec<[f64; 3]>,
    pub region: SearchRegion,
    pub potentials: Vec<f64>,
}

impl DisplacementDistribution {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn row(&self, p: usize) -> &[f64] {
        let k = self.region.len();
        &self.potentials[p * k..(p + 1) * k]
    }

    /// Index of the best candidate of point `p` (first on ties).
    pub fn argmax(&self, p: usize) -> usize {
        let row = self.row(p);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        best
    }
}

/// Cosine potentials on the tape.
///
/// `desc: [n, d]`, `feat_moving: [d, z, y, x]`, `points: [n, 3]`; output
/// `[n, |D|]`. Candidates are sampled trilinearly at `p + delta` with
/// clamping. Gradients flow to all three inputs.
pub fn potentials_on_tape(
    tape: &mut Tape,
    desc: Var,
    feat_moving: Var,
    points: Var,
    region: &SearchRegion,
) -> Result<Var> {
    region.validate()?;
    let (ds, fs, ps) = (tape.shape(desc), tape.shape(feat_moving), tape.shape(points));
    if ds.len() != 2 || fs.len() != 4 || ps.len() != 2 || ps[1] != 3 || ds[0] != ps[0] {
        return Err(Error::shape("compute_potentials", ds, ps));
    }
    if ds[1] != fs[0] {
        return Err(Error::shape("compute_potentials", ds, fs));
    }
    let (n, d) = (ds[0], ds[1]);
    let dims = [fs[3], fs[2], fs[1]];
    let nvox = dims[0] * dims[1] * dims[2];
    let deltas = region.displacements();
    let nd = deltas.len();

    let pd = tape.value(points).data().to_vec();
    let mut stencils = Vec::with_capacity(n * nd);
    for i in 0..n {
        let p = &pd[i * 3..i * 3 + 3];
        for dl in &deltas {
            stencils.push(Stencil::new(dims, [p[0] + dl[0], p[1] + dl[1], p[2] + dl[2]]));
        }
    }
    let fd = tape.value(feat_moving).data();
    let dd = tape.value(desc).data();
    let mut out = vec![0.0; n * nd];
    let mut g = vec![0.0; d];
    for i in 0..n {
        let f = &dd[i * d..(i + 1) * d];
        let ff: f64 = f.iter().map(|v| v * v).sum();
        for k in 0..nd {
            let s = &stencils[i * nd + k];
            for (c, gc) in g.iter_mut().enumerate() {
                *gc = s.apply(&fd[c * nvox..(c + 1) * nvox]);
            }
            let fg: f64 = f.iter().zip(&g).map(|(a, b)| a * b).sum();
            let gg: f64 = g.iter().map(|v| v * v).sum();
            let den = (ff * gg).sqrt();
            out[i * nd + k] = if den > COSINE_EPS { fg / den } else { 0.0 };
        }
    }
    let value = Tensor::from_parts(vec![n, nd], out);
    Ok(tape.record(&[desc, feat_moving, points], value, move |inp, _, grad| {
        let dd = inp[0].data();
        let fd = inp[1].data();
        let mut gdesc = vec![0.0; n * d];
        let mut gfeat = vec![0.0; fd.len()];
        let mut gpts = vec![0.0; n * 3];
        let mut g = vec![0.0; d];
        let mut gg_vec = vec![0.0; d];
        for i in 0..n {
            let f = &dd[i * d..(i + 1) * d];
            let ff: f64 = f.iter().map(|v| v * v).sum();
            for k in 0..nd {
                let go = grad[i * nd + k];
                if go == 0.0 {
                    continue;
                }
                let s = &stencils[i * nd + k];
                for (c, gc) in g.iter_mut().enumerate() {
                    *gc = s.apply(&fd[c * nvox..(c + 1) * nvox]);
                }
                let fg: f64 = f.iter().zip(&g).map(|(a, b)| a * b).sum();
                let gg: f64 = g.iter().map(|v| v * v).sum();
                let den = (ff * gg).sqrt();
                if den <= COSINE_EPS {
                    continue;
                }
                let den3 = den * den * den;
                for c in 0..d {
                    gdesc[i * d + c] += go * (g[c] / den - fg * gg * f[c] / den3);
                    gg_vec[c] = go * (f[c] / den - fg * ff * g[c] / den3);
                }
                for c in 0..d {
                    let off = c * nvox;
                    for t in 0..8 {
                        gfeat[off + s.index[t]] += gg_vec[c] * s.weight[t];
                    }
                    let sg = s.gradient(&fd[off..off + nvox]);
                    for a in 0..3 {
                        gpts[i * 3 + a] += gg_vec[c] * sg[a];
                    }
                }
            }
        }
        vec![Some(gdesc), Some(gfeat), Some(gpts)]
    }))
}

/// Per-point descriptors sampled from a feature map, `[n, d]` row-major.
pub fn sample_descriptors(feat: &FeatureMap, pts: &DrivingPointSet) -> Vec<f64> {
    crate::volume::sample_trilinear(&feat.volume, pts.points())
        .into_iter()
        .flatten()
        .collect()
}

/// Inference-only potentials for descriptors `desc` (`[n, d]` row-major).
pub fn compute_potentials(
    desc: &[f64],
    feat_moving: &FeatureMap,
    pts: &DrivingPointSet,
    region: &SearchRegion,
) -> Result<DisplacementDistribution> {
    let n = pts.len();
    let d = feat_moving.dim();
    if desc.len() != n * d {
        return Err(Error::shape("compute_potentials", &[desc.len()], &[n, d]));
    }
    let mut tape = Tape::new();
    let dv = tape.constant(Tensor::new(vec![n, d], desc.to_vec())?);
    let fv = tape.constant(Tensor::from_volume(&feat_moving.volume));
    let pv = tape.constant(pts.to_tensor());
    let mu = potentials_on_tape(&mut tape, dv, fv, pv, region)?;
    Ok(DisplacementDistribution {
        points: pts.points().to_vec(),
        region: *region,
        potentials: tape.value(mu).data().to_vec(),
    })
}
