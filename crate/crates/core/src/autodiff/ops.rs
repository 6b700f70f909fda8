//! Differentiable tensor operations recorded on a [`Tape`].

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::volume::Stencil;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// Output extent of a strided, zero-padded convolution along one axis.
pub fn conv_out_extent(n: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

// Output positions `o` in [lo, hi) whose input index `o*stride + k - pad` lies in [0, n).
#[inline]
fn valid_range(n: usize, out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let top = n as isize - 1 + pad as isize - k as isize;
    if top < 0 {
        return (0, 0);
    }
    let hi = (top as usize / stride + 1).min(out);
    (lo.min(hi), hi)
}

#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    inp: [usize; 3], // z, y, x
    out: [usize; 3],
}

impl ConvGeom {
    /// Visits every (input index, weight index, output index) triple in a
    /// cache-friendly order: contiguous runs along the output x axis.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let [iz_n, iy_n, ix_n] = self.inp;
        let [oz_n, oy_n, ox_n] = self.out;
        let (k, s, p) = (self.k, self.stride, self.pad);
        for co in 0..self.cout {
            for ci in 0..self.cin {
                for kz in 0..k {
                    let (z0, z1) = valid_range(iz_n, oz_n, kz, s, p);
                    for ky in 0..k {
                        let (y0, y1) = valid_range(iy_n, oy_n, ky, s, p);
                        for kx in 0..k {
                            let (x0, x1) = valid_range(ix_n, ox_n, kx, s, p);
                            if x0 >= x1 {
                                continue;
                            }
                            let wi = (((co * self.cin + ci) * k + kz) * k + ky) * k + kx;
                            for oz in z0..z1 {
                                let iz = oz * s + kz - p;
                                for oy in y0..y1 {
                                    let iy = oy * s + ky - p;
                                    let obase = ((co * oz_n + oz) * oy_n + oy) * ox_n;
                                    let ibase = ((ci * iz_n + iz) * iy_n + iy) * ix_n;
                                    // (input start, weight, output start, run length, input stride)
                                    f(ibase + x0 * s + kx - p, wi, obase + x0, x1 - x0, s);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("add", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.record(&[a, b], out, |_, _, g| vec![Some(g.to_vec()), Some(g.to_vec())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("sub", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.record(&[a, b], out, |_, _, g| {
            vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]
        }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("mul", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.record(&[a, b], out, |inp, _, g| {
            let ga = g.iter().zip(inp[1].data()).map(|(g, y)| g * y).collect();
            let gb = g.iter().zip(inp[0].data()).map(|(g, x)| g * x).collect();
            vec![Some(ga), Some(gb)]
        }))
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Var {
        let va = self.value(a);
        let out = Tensor::from_parts(va.shape().to_vec(), va.data().iter().map(|x| x * s).collect());
        self.record(&[a], out, move |_, _, g| vec![Some(g.iter().map(|v| v * s).collect())])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let va = self.value(a);
        let out = Tensor::from_parts(va.shape().to_vec(), va.data().iter().map(|x| x + s).collect());
        self.record(&[a], out, |_, _, g| vec![Some(g.to_vec())])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.numel();
        let out = Tensor::scalar(va.data().iter().sum());
        self.record(&[a], out, move |_, _, g| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.numel();
        let out = Tensor::scalar(va.data().iter().sum::<f64>() / n as f64);
        self.record(&[a], out, move |_, _, g| vec![Some(vec![g[0] / n as f64; n])])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Tensor::from_parts(va.shape().to_vec(), va.data().iter().map(|x| x.tanh()).collect());
        self.record(&[a], out, |_, y, g| {
            vec![Some(g.iter().zip(y.data()).map(|(g, y)| g * (1.0 - y * y)).collect())]
        })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let va = self.value(a);
        let f = move |x: f64| if x > 0.0 { x } else { slope * x };
        let out = Tensor::from_parts(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect());
        self.record(&[a], out, move |inp, _, g| {
            vec![Some(
                g.iter()
                    .zip(inp[0].data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { slope * g })
                    .collect(),
            )]
        })
    }

    /// Softmax of `a / temperature` along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize, temperature: f64) -> Result<Var> {
        let va = self.value(a);
        if axis >= va.rank() || temperature <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "softmax: axis {axis} / temperature {temperature} invalid for shape {:?}",
                va.shape()
            )));
        }
        let len = va.shape()[axis];
        let inner: usize = va.shape()[axis + 1..].iter().product();
        let outer: usize = va.shape()[..axis].iter().product();
        let x = va.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let m = (0..len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = ((x[at(k)] - m) / temperature).exp();
                    y[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    y[at(k)] /= z;
                }
            }
        }
        let out = Tensor::from_parts(va.shape().to_vec(), y);
        Ok(self.record(&[a], out, move |_, y, g| {
            let y = y.data();
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * len + k) * inner + i;
                    let dot: f64 = (0..len).map(|k| y[at(k)] * g[at(k)]).sum();
                    for k in 0..len {
                        gx[at(k)] = y[at(k)] * (g[at(k)] - dot) / temperature;
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Concatenates tensors of equal rank along `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidArgument(format!("concat axis {axis} for shape {base:?}")));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            lens.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&lens) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::from_parts(shape, data);
        Ok(self.record(parts, out, move |_, _, g| {
            let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gi, &len) in grads.iter_mut().zip(&lens) {
                    gi.extend_from_slice(&g[off..off + len * inner]);
                    off += len * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        }))
    }

    /// 3D convolution (cross-correlation) of `x: [cin, z, y, x]` with
    /// `w: [cout, cin, k, k, k]` and bias `b: [cout]`, zero padding `pad`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let xs = vx.shape();
        let ws = vw.shape();
        if xs.len() != 4 || ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] || ws[1] != xs[0] {
            return Err(Error::shape("conv3d", xs, ws));
        }
        if vb.shape() != [ws[0]] {
            return Err(Error::shape("conv3d bias", vb.shape(), &ws[..1]));
        }
        let k = ws[2];
        let inp = [xs[1], xs[2], xs[3]];
        let mut out = [0usize; 3];
        for a in 0..3 {
            out[a] = conv_out_extent(inp[a], k, stride, pad)
                .ok_or_else(|| Error::shape("conv3d extent", xs, ws))?;
        }
        let geom = ConvGeom {
            cin: xs[0],
            cout: ws[0],
            k,
            stride,
            pad,
            inp,
            out,
        };
        let ovox = out[0] * out[1] * out[2];
        let mut y = vec![0.0; geom.cout * ovox];
        for co in 0..geom.cout {
            y[co * ovox..(co + 1) * ovox].fill(vb.data()[co]);
        }
        {
            let (xd, wd) = (vx.data(), vw.data());
            geom.for_each(|xi, wi, yi, len, s| {
                let wv = wd[wi];
                if wv == 0.0 {
                    return;
                }
                let dst = &mut y[yi..yi + len];
                if s == 1 {
                    for (d, v) in dst.iter_mut().zip(&xd[xi..xi + len]) {
                        *d += wv * v;
                    }
                } else {
                    for (j, d) in dst.iter_mut().enumerate() {
                        *d += wv * xd[xi + j * s];
                    }
                }
            });
        }
        let shape = vec![geom.cout, out[0], out[1], out[2]];
        Ok(self.record(&[x, w, b], Tensor::from_parts(shape, y), move |inp, _, g| {
            let (xd, wd) = (inp[0].data(), inp[1].data());
            let mut gx = vec![0.0; xd.len()];
            let mut gw = vec![0.0; wd.len()];
            geom.for_each(|xi, wi, yi, len, s| {
                let gy = &g[yi..yi + len];
                let wv = wd[wi];
                let mut acc = 0.0;
                if s == 1 {
                    let xs = &xd[xi..xi + len];
                    let gxs = &mut gx[xi..xi + len];
                    for j in 0..len {
                        acc += gy[j] * xs[j];
                        gxs[j] += wv * gy[j];
                    }
                } else {
                    for j in 0..len {
                        acc += gy[j] * xd[xi + j * s];
                        gx[xi + j * s] += wv * gy[j];
                    }
                }
                gw[wi] += acc;
            });
            let gb = (0..geom.cout)
                .map(|co| g[co * ovox..(co + 1) * ovox].iter().sum())
                .collect();
            vec![Some(gx), Some(gw), Some(gb)]
        }))
    }

    /// Non-overlapping 2×2×2 average pooling of `[c, z, y, x]`.
    pub fn avg_pool3d(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() != 4 || s[1] < 2 || s[2] < 2 || s[3] < 2 {
            return Err(Error::shape("avg_pool3d", s, &[0, 2, 2, 2]));
        }
        let (c, iz, iy, ix) = (s[0], s[1], s[2], s[3]);
        let (oz, oy, ox) = (iz / 2, iy / 2, ix / 2);
        let src = move |ch: usize, z: usize, y: usize, x: usize| ((ch * iz + z) * iy + y) * ix + x;
        let dst = move |ch: usize, z: usize, y: usize, x: usize| ((ch * oz + z) * oy + y) * ox + x;
        let xd = vx.data();
        let mut out = vec![0.0; c * oz * oy * ox];
        for ch in 0..c {
            for z in 0..oz {
                for y in 0..oy {
                    for xx in 0..ox {
                        let mut acc = 0.0;
                        for d in 0..8 {
                            acc += xd[src(ch, 2 * z + (d >> 2), 2 * y + ((d >> 1) & 1), 2 * xx + (d & 1))];
                        }
                        out[dst(ch, z, y, xx)] = acc / 8.0;
                    }
                }
            }
        }
        let len = xd.len();
        Ok(self.record(&[x], Tensor::from_parts(vec![c, oz, oy, ox], out), move |_, _, g| {
            let mut gx = vec![0.0; len];
            for ch in 0..c {
                for z in 0..oz {
                    for y in 0..oy {
                        for xx in 0..ox {
                            let v = g[dst(ch, z, y, xx)] / 8.0;
                            for d in 0..8 {
                                gx[src(ch, 2 * z + (d >> 2), 2 * y + ((d >> 1) & 1), 2 * xx + (d & 1))] += v;
                            }
                        }
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Trilinear sampling of `vol: [c, z, y, x]` at `points: [n, 3]` (x, y, z
    /// voxel coordinates, clamped to the volume). Output `[n, c]`.
    /// Differentiable with respect to both the volume and the coordinates.
    pub fn grid_sample(&mut self, vol: Var, points: Var) -> Result<Var> {
        let (vv, vp) = (self.value(vol), self.value(points));
        let vs = vv.shape();
        let ps = vp.shape();
        if vs.len() != 4 || ps.len() != 2 || ps[1] != 3 {
            return Err(Error::shape("grid_sample", vs, ps));
        }
        let c = vs[0];
        let dims = [vs[3], vs[2], vs[1]];
        let nvox = dims[0] * dims[1] * dims[2];
        let n = ps[0];
        let stencils: Vec<Stencil> = vp
            .data()
            .chunks_exact(3)
            .map(|p| Stencil::new(dims, [p[0], p[1], p[2]]))
            .collect();
        let vd = vv.data();
        let mut out = vec![0.0; n * c];
        for (i, s) in stencils.iter().enumerate() {
            for ch in 0..c {
                out[i * c + ch] = s.apply(&vd[ch * nvox..(ch + 1) * nvox]);
            }
        }
        Ok(self.record(&[vol, points], Tensor::from_parts(vec![n, c], out), move |inp, _, g| {
            let vd = inp[0].data();
            let mut gv = vec![0.0; vd.len()];
            let mut gp = vec![0.0; n * 3];
            for (i, s) in stencils.iter().enumerate() {
                for ch in 0..c {
                    let go = g[i * c + ch];
                    if go == 0.0 {
                        continue;
                    }
                    let off = ch * nvox;
                    for k in 0..8 {
                        gv[off + s.index[k]] += go * s.weight[k];
                    }
                    let d = s.gradient(&vd[off..off + nvox]);
                    for a in 0..3 {
                        gp[i * 3 + a] += go * d[a];
                    }
                }
            }
            vec![Some(gv), Some(gp)]
        }))
    }

    /// Resamples `vol: [c, z, y, x]` at `p + field(p)` for every voxel `p`,
    /// with `field: [3, z, y, x]` in voxel units. Differentiable with respect
    /// to both inputs.
    pub fn warp(&mut self, vol: Var, field: Var) -> Result<Var> {
        let (vs, fs) = (self.shape(vol).to_vec(), self.shape(field).to_vec());
        if vs.len() != 4 || fs.len() != 4 || fs[0] != 3 || vs[1..] != fs[1..] {
            return Err(Error::shape("warp", &vs, &fs));
        }
        let c = vs[0];
        let dims = [vs[3], vs[2], vs[1]];
        let nvox = dims[0] * dims[1] * dims[2];
        let fd = self.value(field).data();
        let mut stencils = Vec::with_capacity(nvox);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let i = (z * dims[1] + y) * dims[0] + x;
                    let p = [x as f64 + fd[i], y as f64 + fd[nvox + i], z as f64 + fd[2 * nvox + i]];
                    stencils.push(Stencil::new(dims, p));
                }
            }
        }
        let vd = self.value(vol).data();
        let mut out = vec![0.0; c * nvox];
        for ch in 0..c {
            let src = &vd[ch * nvox..(ch + 1) * nvox];
            for (i, s) in stencils.iter().enumerate() {
                out[ch * nvox + i] = s.apply(src);
            }
        }
        Ok(self.record(&[vol, field], Tensor::from_parts(vs, out), move |inp, _, g| {
            let vd = inp[0].data();
            let mut gv = vec![0.0; vd.len()];
            let mut gf = vec![0.0; 3 * nvox];
            for ch in 0..c {
                let off = ch * nvox;
                let src = &vd[off..off + nvox];
                for (i, s) in stencils.iter().enumerate() {
                    let go = g[off + i];
                    if go == 0.0 {
                        continue;
                    }
                    for k in 0..8 {
                        gv[off + s.index[k]] += go * s.weight[k];
                    }
                    let d = s.gradient(src);
                    for a in 0..3 {
                        gf[a * nvox + i] += go * d[a];
                    }
                }
            }
            vec![Some(gv), Some(gf)]
        }))
    }
}
