//! Pairwise MRF over driving points: neighbour graph, mean-field inference
//! of the displacement marginals, and the soft-argmax mean estimate.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::matching::{DisplacementDistribution, SearchRegion};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MrfConfig {
    /// Pairwise weight.
    pub lambda: f64,
    /// Spatial bandwidth of the edge kernel; the grid spacing when absent.
    pub sigma_p: Option<f64>,
    /// Temperature applied to the potentials.
    pub alpha: f64,
    pub iterations: usize,
    pub neighbors: usize,
}

impl Default for MrfConfig {
    fn default() -> Self {
        Self {
            lambda: 15.0,
            sigma_p: None,
            alpha: 1000.0,
            iterations: 5,
            neighbors: 6,
        }
    }
}

impl MrfConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda >= 0.0
            && self.lambda.is_finite()
            && self.alpha > 0.0
            && self.sigma_p.is_none_or(|s| s > 0.0);
        if !ok {
            return Err(Error::Config(format!("invalid MRF configuration {self:?}")));
        }
        Ok(())
    }
}

/// Symmetric k-nearest-neighbour graph with kernel edge weights.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    /// Sorted neighbour indices per point.
    pub neighbors: Vec<Vec<usize>>,
    /// `weights[p][j]` belongs to edge `(p, neighbors[p][j])`.
    pub weights: Vec<Vec<f64>>,
}

impl NeighborGraph {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    /// Number of directed edges (twice the undirected count).
    pub fn directed_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }

    pub fn flat_weights(&self) -> Vec<f64> {
        self.weights.iter().flatten().copied().collect()
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

/// k nearest neighbours of every point (ties broken by index), symmetrized
/// by union. `k` is clamped to `n - 1`.
pub fn knn_adjacency(points: &[[f64; 3]], k: usize) -> Vec<Vec<usize>> {
    let n = points.len();
    let k = k.min(n.saturating_sub(1));
    let mut adj = vec![Vec::new(); n];
    for i in 0..n {
        let mut others: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (dist2(&points[i], &points[j]), j))
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in others.iter().take(k) {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    adj
}

/// Edge kernel `exp(-|p - q|^2 / (2 sigma_p))`.
pub fn edge_weight(p: &[f64; 3], q: &[f64; 3], sigma_p: f64) -> f64 {
    (-dist2(p, q) / (2.0 * sigma_p)).exp()
}

pub fn build_graph(points: &[[f64; 3]], k: usize, sigma_p: f64) -> Result<NeighborGraph> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("neighbour graph needs at least one point".into()));
    }
    if sigma_p <= 0.0 {
        return Err(Error::Config("sigma_p must be positive".into()));
    }
    let neighbors = knn_adjacency(points, k);
    let weights = neighbors
        .iter()
        .enumerate()
        .map(|(i, ns)| ns.iter().map(|&j| edge_weight(&points[i], &points[j], sigma_p)).collect())
        .collect();
    Ok(NeighborGraph { neighbors, weights })
}

/// Edge weights as a function of the point coordinates `[n, 3]`, flattened
/// in adjacency order. The adjacency itself is treated as fixed.
pub fn edge_weights_on_tape(tape: &mut Tape, points: Var, adjacency: &[Vec<usize>], sigma_p: f64) -> Result<Var> {
    let ps = tape.shape(points);
    if ps.len() != 2 || ps[1] != 3 || ps[0] != adjacency.len() {
        return Err(Error::shape("edge_weights", ps, &[adjacency.len(), 3]));
    }
    let pd = tape.value(points).data();
    let mut w = Vec::new();
    for (i, ns) in adjacency.iter().enumerate() {
        for &j in ns {
            w.push((-dist2(&pd[i * 3..], &pd[j * 3..]) / (2.0 * sigma_p)).exp());
        }
    }
    let e = w.len();
    let adj = adjacency.to_vec();
    let n = adj.len();
    Ok(tape.record(&[points], Tensor::from_parts(vec![e], w), move |inp, out, g| {
        let pd = inp[0].data();
        let wd = out.data();
        let mut gp = vec![0.0; n * 3];
        let mut e = 0;
        for (i, ns) in adj.iter().enumerate() {
            for &j in ns {
                let c = g[e] * wd[e] / sigma_p;
                for a in 0..3 {
                    let d = pd[i * 3 + a] - pd[j * 3 + a];
                    gp[i * 3 + a] -= c * d;
                    gp[j * 3 + a] += c * d;
                }
                e += 1;
            }
        }
        vec![Some(gp)]
    }))
}

fn softmax_row(logits: &[f64], out: &mut [f64]) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - m).exp();
        s += *o;
    }
    out.iter_mut().for_each(|o| *o /= s);
}

fn means(q: &[f64], deltas: &[[f64; 3]], n: usize) -> Vec<[f64; 3]> {
    let nd = deltas.len();
    (0..n)
        .map(|p| {
            let mut m = [0.0; 3];
            for (k, d) in deltas.iter().enumerate() {
                let w = q[p * nd + k];
                for a in 0..3 {
                    m[a] += w * d[a];
                }
            }
            m
        })
        .collect()
}

/// Synchronous mean-field inference.
///
/// `potentials: [n, |D|]`, `weights: [E]` in adjacency order; output the
/// marginals `[n, |D|]`. Starts from `softmax(alpha * mu)` and performs
/// `iterations` updates of
/// `log q_p(d) = alpha mu_p(d) - 2 lambda sum_n w_pn (|d|^2 - 2 d.m_n) + const`.
pub fn mean_field_on_tape(
    tape: &mut Tape,
    potentials: Var,
    weights: Var,
    adjacency: &[Vec<usize>],
    region: &SearchRegion,
    cfg: &MrfConfig,
) -> Result<Var> {
    cfg.validate()?;
    let deltas = region.displacements();
    let nd = deltas.len();
    let n = adjacency.len();
    let e: usize = adjacency.iter().map(Vec::len).sum();
    if tape.shape(potentials) != [n, nd] {
        return Err(Error::shape("mean_field", tape.shape(potentials), &[n, nd]));
    }
    if tape.shape(weights) != [e] {
        return Err(Error::shape("mean_field", tape.shape(weights), &[e]));
    }
    let (alpha, lambda, iters) = (cfg.alpha, cfg.lambda, cfg.iterations);
    let sq: Vec<f64> = deltas.iter().map(|d| d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).collect();
    let mu = tape.value(potentials).data();
    let w = tape.value(weights).data();

    // history[t] holds q^t; backward replays through every iterate.
    let mut history = Vec::with_capacity(iters + 1);
    let mut logits: Vec<f64> = mu.iter().map(|v| alpha * v).collect();
    let mut q = vec![0.0; n * nd];
    for p in 0..n {
        softmax_row(&logits[p * nd..(p + 1) * nd], &mut q[p * nd..(p + 1) * nd]);
    }
    for _ in 0..iters {
        let m = means(&q, &deltas, n);
        history.push(q.clone());
        let mut eidx = 0;
        for (p, ns) in adjacency.iter().enumerate() {
            let row = &mut logits[p * nd..(p + 1) * nd];
            for (k, l) in row.iter_mut().enumerate() {
                *l = alpha * mu[p * nd + k];
            }
            for &j in ns {
                let c = 2.0 * lambda * w[eidx];
                eidx += 1;
                if c == 0.0 {
                    continue;
                }
                for (k, d) in deltas.iter().enumerate() {
                    let dm = d[0] * m[j][0] + d[1] * m[j][1] + d[2] * m[j][2];
                    row[k] -= c * (sq[k] - 2.0 * dm);
                }
            }
            softmax_row(row, &mut q[p * nd..(p + 1) * nd]);
        }
    }
    let adj = adjacency.to_vec();
    let value = Tensor::from_parts(vec![n, nd], q);
    Ok(tape.record(&[potentials, weights], value, move |inp, out, g| {
        let w = inp[1].data();
        let mut gmu = vec![0.0; n * nd];
        let mut gw = vec![0.0; e];
        let mut gq = g.to_vec();
        let mut gl = vec![0.0; n * nd];
        for t in (0..=iters).rev() {
            let qt: &[f64] = if t == iters { out.data() } else { &history[t] };
            for p in 0..n {
                let r = p * nd..(p + 1) * nd;
                let dot: f64 = qt[r.clone()].iter().zip(&gq[r.clone()]).map(|(a, b)| a * b).sum();
                for k in r {
                    gl[k] = qt[k] * (gq[k] - dot);
                    gmu[k] += alpha * gl[k];
                }
            }
            if t == 0 {
                break;
            }
            // Logits at step t depend on the means of q^{t-1}.
            let prev = &history[t - 1];
            let m = means(prev, &deltas, n);
            let mut gm = vec![[0.0; 3]; n];
            let mut eidx = 0;
            for (p, ns) in adj.iter().enumerate() {
                let glp = &gl[p * nd..(p + 1) * nd];
                let s_sq: f64 = glp.iter().zip(&sq).map(|(a, b)| a * b).sum();
                let mut s_d = [0.0; 3];
                for (k, d) in deltas.iter().enumerate() {
                    for a in 0..3 {
                        s_d[a] += glp[k] * d[a];
                    }
                }
                for &j in ns {
                    let dm = s_d[0] * m[j][0] + s_d[1] * m[j][1] + s_d[2] * m[j][2];
                    gw[eidx] += -2.0 * lambda * (s_sq - 2.0 * dm);
                    let c = 4.0 * lambda * w[eidx];
                    for a in 0..3 {
                        gm[j][a] += c * s_d[a];
                    }
                    eidx += 1;
                }
            }
            for p in 0..n {
                for (k, d) in deltas.iter().enumerate() {
                    gq[p * nd + k] = gm[p][0] * d[0] + gm[p][1] * d[1] + gm[p][2] * d[2];
                }
            }
        }
        vec![Some(gmu), Some(gw)]
    }))
}

/// Soft-argmax `psi(p) = sum_d q_p(d) d`; `[n, |D|] -> [n, 3]`.
pub fn mean_estimate_on_tape(tape: &mut Tape, q: Var, region: &SearchRegion) -> Result<Var> {
    let deltas = region.displacements();
    let nd = deltas.len();
    let qs = tape.shape(q);
    if qs.len() != 2 || qs[1] != nd {
        return Err(Error::shape("mean_estimate", qs, &[qs.first().copied().unwrap_or(0), nd]));
    }
    let n = qs[0];
    let m = means(tape.value(q).data(), &deltas, n);
    let value = Tensor::from_parts(vec![n, 3], m.into_iter().flatten().collect());
    Ok(tape.record(&[q], value, move |_, _, g| {
        let mut gq = vec![0.0; n * nd];
        for p in 0..n {
            for (k, d) in deltas.iter().enumerate() {
                gq[p * nd + k] = g[p * 3] * d[0] + g[p * 3 + 1] * d[1] + g[p * 3 + 2] * d[2];
            }
        }
        vec![Some(gq)]
    }))
}

/// Per-point probability vectors over the search region.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalSet {
    pub region: SearchRegion,
    /// `[n * |D|]`, row per point.
    pub q: Vec<f64>,
}

impl MarginalSet {
    pub fn len(&self) -> usize {
        self.q.len() / self.region.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn row(&self, p: usize) -> &[f64] {
        let k = self.region.len();
        &self.q[p * k..(p + 1) * k]
    }
}

/// Inference-only mean-field on a fixed graph.
pub fn mean_field(dist: &DisplacementDistribution, graph: &NeighborGraph, cfg: &MrfConfig) -> Result<MarginalSet> {
    if graph.len() != dist.len() {
        return Err(Error::shape("mean_field", &[graph.len()], &[dist.len()]));
    }
    let mut tape = Tape::new();
    let mu = tape.constant(Tensor::new(vec![dist.len(), dist.region.len()], dist.potentials.clone())?);
    let w = tape.constant(Tensor::new(vec![graph.directed_edges()], graph.flat_weights())?);
    let q = mean_field_on_tape(&mut tape, mu, w, &graph.neighbors, &dist.region, cfg)?;
    Ok(MarginalSet {
        region: dist.region,
        q: tape.value(q).data().to_vec(),
    })
}

pub fn mean_estimate(q: &MarginalSet) -> Vec<[f64; 3]> {
    means(&q.q, &q.region.displacements(), q.len())
}

/// Energy (to be minimized) of a labelling under the MRF:
/// `-alpha sum_p mu_p(l_p) + lambda sum_p sum_{n in N_p} w_pn |d_{l_p} - d_{l_n}|^2`.
pub fn labelling_energy(dist: &DisplacementDistribution, graph: &NeighborGraph, cfg: &MrfConfig, labels: &[usize]) -> f64 {
    let deltas = dist.region.displacements();
    let mut e = 0.0;
    for (p, &l) in labels.iter().enumerate() {
        e -= cfg.alpha * dist.row(p)[l];
        for (j, &nb) in graph.neighbors[p].iter().enumerate() {
            let (a, b) = (deltas[l], deltas[labels[nb]]);
            e += cfg.lambda * graph.weights[p][j] * dist2(&a, &b);
        }
    }
    e
}
