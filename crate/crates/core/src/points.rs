//! Driving point sets and the baseline selectors (regular grid, Foerstner
//! key-points), plus the points CSV format.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::volume::{spatial_index, voxel_count, Dims, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Grid,
    Foerstner,
    Predicted,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Grid => "grid",
            Provenance::Foerstner => "foerstner",
            Provenance::Predicted => "predicted",
        })
    }
}

impl FromStr for Provenance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grid" => Ok(Provenance::Grid),
            "foerstner" => Ok(Provenance::Foerstner),
            "predicted" => Ok(Provenance::Predicted),
            other => Err(Error::Parse(format!("unknown provenance {other:?}"))),
        }
    }
}

/// The undeformed regular grid a point set was generated from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RestGrid {
    pub origin: [f64; 3],
    pub spacing: f64,
    /// Vertices per axis.
    pub dims: [usize; 3],
}

impl RestGrid {
    pub fn count(&self) -> usize {
        self.dims.iter().product()
    }

    /// Vertices in lexicographic (x slowest, z fastest) order.
    pub fn vertices(&self) -> Vec<[f64; 3]> {
        let mut out = Vec::with_capacity(self.count());
        for i in 0..self.dims[0] {
            for j in 0..self.dims[1] {
                for k in 0..self.dims[2] {
                    out.push([
                        self.origin[0] + i as f64 * self.spacing,
                        self.origin[1] + j as f64 * self.spacing,
                        self.origin[2] + k as f64 * self.spacing,
                    ]);
                }
            }
        }
        out
    }
}

/// Ordered sub-voxel locations in fixed-image voxel space.
#[derive(Debug, Clone, PartialEq)]
pub struct DrivingPointSet {
    points: Vec<[f64; 3]>,
    provenance: Provenance,
    rest_grid: Option<RestGrid>,
}

impl DrivingPointSet {
    pub fn new(points: Vec<[f64; 3]>, provenance: Provenance, rest_grid: Option<RestGrid>) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("driving points must be finite".into()));
        }
        if let Some(g) = &rest_grid {
            if !points.len().is_multiple_of(g.count()) || points.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "{} points do not tile a rest grid of {} vertices",
                    points.len(),
                    g.count()
                )));
            }
        }
        Ok(Self {
            points,
            provenance,
            rest_grid,
        })
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn rest_grid(&self) -> Option<&RestGrid> {
        self.rest_grid.as_ref()
    }

    /// Checks every coordinate lies in `[0, n-1]` on its axis.
    pub fn check_bounds(&self, dims: Dims) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            for a in 0..3 {
                if !(0.0..=(dims[a] - 1) as f64).contains(&p[a]) {
                    return Err(Error::InvalidArgument(format!(
                        "driving point {i} at {p:?} outside volume {dims:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// `[n, 3]` coordinate tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.len(), 3], self.points.iter().flatten().copied().collect())
    }
}

fn axis_vertices(n: usize, spacing: usize, margin: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut v = margin;
    while v + margin <= n && v < n {
        out.push(v);
        v += spacing;
    }
    out
}

/// Regular grid with vertices at `margin + k * spacing` per axis, keeping
/// vertices with `v + margin <= n` that lie inside the volume.
pub fn grid_points(dims: Dims, spacing: usize, margin: usize) -> Result<DrivingPointSet> {
    if spacing == 0 {
        return Err(Error::Config("grid spacing must be at least 1".into()));
    }
    let axes: Vec<Vec<usize>> = dims.iter().map(|&n| axis_vertices(n, spacing, margin)).collect();
    if axes.iter().any(Vec::is_empty) {
        return Err(Error::Config(format!(
            "no grid vertex fits volume {dims:?} with spacing {spacing} and margin {margin}"
        )));
    }
    let grid = RestGrid {
        origin: [margin as f64; 3],
        spacing: spacing as f64,
        dims: [axes[0].len(), axes[1].len(), axes[2].len()],
    };
    DrivingPointSet::new(grid.vertices(), Provenance::Grid, Some(grid))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FoerstnerConfig {
    /// Structure tensor smoothing.
    pub sigma: f64,
    /// Minimum distance between selected key-points; defaults to the grid
    /// spacing when absent.
    pub nms_radius: Option<f64>,
    /// Number of points; defaults to the grid vertex count when absent.
    pub count: Option<usize>,
}

impl Default for FoerstnerConfig {
    fn default() -> Self {
        Self {
            sigma: 1.5,
            nms_radius: None,
            count: None,
        }
    }
}

pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable smoothing of one scalar field with border replication.
pub(crate) fn smooth(data: &[f64], dims: Dims, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut cur = data.to_vec();
    for axis in 0..3 {
        let mut next = vec![0.0; cur.len()];
        let n = dims[axis] as isize;
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let p = [x, y, z];
                    let mut acc = 0.0;
                    for (t, w) in kernel.iter().enumerate() {
                        let mut q = p;
                        q[axis] = (p[axis] as isize + t as isize - r).clamp(0, n - 1) as usize;
                        acc += w * cur[spatial_index(dims, q[0], q[1], q[2])];
                    }
                    next[spatial_index(dims, x, y, z)] = acc;
                }
            }
        }
        cur = next;
    }
    cur
}

/// Foerstner interest score `det(S) / trace(S)` of the smoothed structure
/// tensor of central-difference gradients; 0 where the trace is below 1e-12.
pub fn foerstner_score(img: &Volume, sigma: f64) -> Result<Volume> {
    if img.channels() != 1 {
        return Err(Error::InvalidArgument("foerstner_score expects a single-channel image".into()));
    }
    if sigma <= 0.0 {
        return Err(Error::Config("Foerstner sigma must be positive".into()));
    }
    let dims = img.dims();
    let n = img.voxel_count();
    let d = img.data();
    let at = |x: isize, y: isize, z: isize| {
        let c = |v: isize, a: usize| v.clamp(0, dims[a] as isize - 1) as usize;
        d[spatial_index(dims, c(x, 0), c(y, 1), c(z, 2))]
    };
    let mut g = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for z in 0..dims[2] as isize {
        for y in 0..dims[1] as isize {
            for x in 0..dims[0] as isize {
                let i = spatial_index(dims, x as usize, y as usize, z as usize);
                g[0][i] = (at(x + 1, y, z) - at(x - 1, y, z)) / 2.0;
                g[1][i] = (at(x, y + 1, z) - at(x, y - 1, z)) / 2.0;
                g[2][i] = (at(x, y, z + 1) - at(x, y, z - 1)) / 2.0;
            }
        }
    }
    let kernel = gaussian_kernel(sigma);
    let prod = |a: usize, b: usize| -> Vec<f64> {
        let raw: Vec<f64> = g[a].iter().zip(&g[b]).map(|(u, v)| u * v).collect();
        smooth(&raw, dims, &kernel)
    };
    let (sxx, syy, szz) = (prod(0, 0), prod(1, 1), prod(2, 2));
    let (sxy, sxz, syz) = (prod(0, 1), prod(0, 2), prod(1, 2));
    let score = (0..n)
        .map(|i| {
            let tr = sxx[i] + syy[i] + szz[i];
            if tr < 1e-12 {
                return 0.0;
            }
            let det = sxx[i] * (syy[i] * szz[i] - syz[i] * syz[i]) - sxy[i] * (sxy[i] * szz[i] - syz[i] * sxz[i])
                + sxz[i] * (sxy[i] * syz[i] - syy[i] * sxz[i]);
            det / tr
        })
        .collect();
    Volume::new(dims, 1, score)
}

/// Positive-score voxels that are not exceeded by any of their 26 neighbours.
fn local_maxima(score: &Volume) -> Vec<(f64, usize)> {
    let dims = score.dims();
    let s = score.data();
    let mut out = Vec::new();
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let i = spatial_index(dims, x, y, z);
                if s[i] <= 0.0 {
                    continue;
                }
                let mut is_max = true;
                'scan: for dz in -1isize..=1 {
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            let q = [x as isize + dx, y as isize + dy, z as isize + dz];
                            if (0..3).any(|a| q[a] < 0 || q[a] >= dims[a] as isize) {
                                continue;
                            }
                            if s[spatial_index(dims, q[0] as usize, q[1] as usize, q[2] as usize)] > s[i] {
                                is_max = false;
                                break 'scan;
                            }
                        }
                    }
                }
                if is_max {
                    out.push((s[i], i));
                }
            }
        }
    }
    out
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

/// The `count` highest-scoring Foerstner maxima after greedy non-maximum
/// suppression, ignoring maxima closer than `margin` to the border.
/// Shortfalls are padded with vertices of the regular grid
/// `(spacing, margin)`, then with remaining voxels in lexicographic order.
pub fn foerstner_points(
    img: &Volume,
    sigma: f64,
    nms_radius: f64,
    count: usize,
    spacing: usize,
    margin: usize,
) -> Result<DrivingPointSet> {
    let dims = img.dims();
    if count == 0 || count > voxel_count(dims) {
        return Err(Error::InvalidArgument(format!(
            "key-point count {count} must be in 1..={}",
            voxel_count(dims)
        )));
    }
    let score = foerstner_score(img, sigma)?;
    let mut cand = local_maxima(&score);
    cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let r2 = nms_radius * nms_radius;
    let mut chosen: Vec<[f64; 3]> = Vec::with_capacity(count);
    for (_, i) in cand {
        if chosen.len() == count {
            break;
        }
        let c = crate::volume::spatial_coords(dims, i);
        if (0..3).any(|a| c[a] < margin || c[a] + margin >= dims[a]) {
            continue;
        }
        let p = [c[0] as f64, c[1] as f64, c[2] as f64];
        if chosen.iter().all(|q| dist2(q, &p) >= r2) {
            chosen.push(p);
        }
    }
    if chosen.len() < count {
        let mut pads = grid_points(dims, spacing, margin).map(|g| g.points).unwrap_or_default();
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                for z in 0..dims[2] {
                    pads.push([x as f64, y as f64, z as f64]);
                }
            }
        }
        for p in pads {
            if chosen.len() == count {
                break;
            }
            if !chosen.contains(&p) {
                chosen.push(p);
            }
        }
    }
    DrivingPointSet::new(chosen, Provenance::Foerstner, None)
}

/// Serializes a point set as CSV: `#` metadata lines, header `x,y,z`,
/// then one point per line with 6 decimals.
pub fn encode_points_csv(set: &DrivingPointSet) -> String {
    let mut s = format!("# provenance={}\n", set.provenance);
    if let Some(g) = &set.rest_grid {
        s += &format!(
            "# rest_grid=origin:{},{},{};spacing:{};dims:{},{},{}\n",
            g.origin[0], g.origin[1], g.origin[2], g.spacing, g.dims[0], g.dims[1], g.dims[2]
        );
    }
    s += "x,y,z\n";
    for p in &set.points {
        s += &format!("{:.6},{:.6},{:.6}\n", p[0], p[1], p[2]);
    }
    s
}

fn parse_triple<T: FromStr>(s: &str, what: &str) -> Result<[T; 3]> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::Parse(format!("{what}: expected 3 comma-separated values, got {s:?}")));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(p.trim().parse::<T>().map_err(|_| Error::Parse(format!("{what}: bad value {p:?}")))?);
    }
    out.try_into().map_err(|_| Error::Parse(what.into()))
}

fn parse_rest_grid(s: &str) -> Result<RestGrid> {
    let mut origin = None;
    let mut spacing = None;
    let mut dims = None;
    for field in s.split(';') {
        let (k, v) = field
            .split_once(':')
            .ok_or_else(|| Error::Parse(format!("rest_grid field {field:?}")))?;
        match k {
            "origin" => origin = Some(parse_triple::<f64>(v, "rest_grid origin")?),
            "spacing" => spacing = Some(v.parse::<f64>().map_err(|_| Error::Parse(format!("rest_grid spacing {v:?}")))?),
            "dims" => dims = Some(parse_triple::<usize>(v, "rest_grid dims")?),
            other => return Err(Error::Parse(format!("unknown rest_grid field {other:?}"))),
        }
    }
    match (origin, spacing, dims) {
        (Some(origin), Some(spacing), Some(dims)) => Ok(RestGrid { origin, spacing, dims }),
        _ => Err(Error::Parse("incomplete rest_grid line".into())),
    }
}

pub fn decode_points_csv(text: &str) -> Result<DrivingPointSet> {
    let mut provenance = None;
    let mut rest_grid = None;
    let mut header = false;
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(meta) = line.strip_prefix('#') {
            if let Some((k, v)) = meta.trim().split_once('=') {
                match k {
                    "provenance" => provenance = Some(v.parse()?),
                    "rest_grid" => rest_grid = Some(parse_rest_grid(v)?),
                    _ => {}
                }
            }
            continue;
        }
        if !header {
            if line != "x,y,z" {
                return Err(Error::Parse(format!("line {}: expected header x,y,z", lineno + 1)));
            }
            header = true;
            continue;
        }
        points.push(parse_triple::<f64>(line, &format!("line {}", lineno + 1))?);
    }
    if !header {
        return Err(Error::Parse("missing x,y,z header".into()));
    }
    DrivingPointSet::new(points, provenance.unwrap_or(Provenance::Grid), rest_grid)
}

pub fn write_points_csv(set: &DrivingPointSet, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_points_csv(set))?;
    Ok(())
}

pub fn read_points_csv(path: impl AsRef<Path>) -> Result<DrivingPointSet> {
    decode_points_csv(&std::fs::read_to_string(path)?)
}
