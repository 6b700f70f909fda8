//! Finite-difference checks for every tape operation and every
//! differentiable pipeline stage.

use dpreg::autodiff::{check_gradients, BoundParams, GradCheckOptions, GradCheckReport, Tape, Tensor, Var};
use dpreg::interp::{densify_on_tape, InterpConfig};
use dpreg::matching::{potentials_on_tape, SearchRegion};
use dpreg::metrics::{bending_energy_on_tape, lncc_on_tape, LnccConfig};
use dpreg::mrf::{edge_weights_on_tape, knn_adjacency, mean_estimate_on_tape, mean_field_on_tape, MrfConfig};
use dpreg::pipeline::{forward, init_params, loss_on_tape, prepare, synth_generate, GridConfig, RegistrationConfig, Selector, SyntheticSpec};
use dpreg::points::grid_points;
use dpreg::predictor::{predict_points_on_tape, PredictorConfig};
use dpreg::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Build,
    /// Composite stages get a looser threshold.
    pub composite: bool,
    /// Central-difference step.
    pub step: f64,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Points away from lattice planes so the probe never crosses a cell face.
fn off_lattice(rng: &mut ChaCha8Rng, n: usize, extent: [f64; 3]) -> Tensor {
    let mut data = Vec::with_capacity(3 * n);
    for _ in 0..n {
        for e in extent {
            let cell = rng.random_range(0..(e as usize - 1)) as f64;
            data.push(cell + rng.random_range(0.1..0.9));
        }
    }
    Tensor::new(vec![n, 3], data).unwrap()
}

/// Contracts any node to a scalar with fixed random weights.
fn contract(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = uniform(&mut rng, tape.shape(v), -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

fn case(name: &'static str, inputs: Vec<Tensor>, composite: bool, build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Case {
    Case { name, inputs, build: Box::new(build), composite, step: 1e-5 }
}

/// All cases for one seed. Volumes are at most 16 voxels per axis.
pub fn cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = seed;
    let mut out = Vec::new();

    let a = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let b = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    out.push(case("add", vec![a.clone(), b.clone()], false, move |t, v| {
        let y = t.add(v[0], v[1])?;
        contract(t, y, s)
    }));
    out.push(case("sub", vec![a.clone(), b.clone()], false, move |t, v| {
        let y = t.sub(v[0], v[1])?;
        contract(t, y, s)
    }));
    out.push(case("mul", vec![a.clone(), b.clone()], false, move |t, v| {
        let y = t.mul(v[0], v[1])?;
        contract(t, y, s)
    }));
    out.push(case("scalar_mul+add_scalar", vec![a.clone()], false, move |t, v| {
        let y = t.scalar_mul(v[0], -1.7);
        let y = t.add_scalar(y, 0.3);
        contract(t, y, s)
    }));
    out.push(case("mean", vec![a.clone()], false, |t, v| {
        let m = t.mean(v[0]);
        Ok(t.mul(m, m).expect("scalar shapes agree"))
    }));
    out.push(case("tanh", vec![uniform(&mut rng, &[10], -2.0, 2.0)], false, move |t, v| {
        let y = t.tanh(v[0]);
        contract(t, y, s)
    }));
    let mut lr = uniform(&mut rng, &[12], 0.05, 1.0);
    lr.data_mut().iter_mut().enumerate().for_each(|(i, x)| if i % 2 == 0 { *x = -*x });
    out.push(case("leaky_relu", vec![lr], false, move |t, v| {
        let y = t.leaky_relu(v[0], 0.1);
        contract(t, y, s)
    }));
    for axis in 0..2 {
        out.push(case(
            if axis == 0 { "softmax(axis 0)" } else { "softmax(axis 1)" },
            vec![uniform(&mut rng, &[4, 5], -2.0, 2.0)],
            false,
            move |t, v| {
                let y = t.softmax(v[0], axis, 3.0)?;
                contract(t, y, s)
            },
        ));
    }
    out.push(case(
        "concat",
        vec![uniform(&mut rng, &[2, 3, 3, 3], -1.0, 1.0), uniform(&mut rng, &[1, 3, 3, 3], -1.0, 1.0)],
        false,
        move |t, v| {
            let y = t.concat(&[v[0], v[1]], 0)?;
            contract(t, y, s)
        },
    ));
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        out.push(case(
            "conv3d",
            vec![
                uniform(&mut rng, &[2, 6, 5, 6], -1.0, 1.0),
                uniform(&mut rng, &[3, 2, 3, 3, 3], -0.5, 0.5),
                uniform(&mut rng, &[3], -0.5, 0.5),
            ],
            false,
            move |t, v| {
                let y = t.conv3d(v[0], v[1], v[2], stride, pad)?;
                contract(t, y, s)
            },
        ));
    }
    out.push(case("avg_pool3d", vec![uniform(&mut rng, &[2, 4, 6, 4], -1.0, 1.0)], false, move |t, v| {
        let y = t.avg_pool3d(v[0])?;
        contract(t, y, s)
    }));
    out.push(case(
        "grid_sample",
        vec![uniform(&mut rng, &[2, 6, 7, 8], -1.0, 1.0), off_lattice(&mut rng, 9, [8.0, 7.0, 6.0])],
        false,
        move |t, v| {
            let y = t.grid_sample(v[0], v[1])?;
            contract(t, y, s)
        },
    ));
    out.push(case(
        "warp",
        vec![uniform(&mut rng, &[2, 6, 6, 6], -1.0, 1.0), uniform(&mut rng, &[3, 6, 6, 6], 0.1, 0.9)],
        false,
        move |t, v| {
            let y = t.warp(v[0], v[1])?;
            contract(t, y, s)
        },
    ));

    let region = SearchRegion::new(2, 1).unwrap();
    out.push(case(
        "potentials",
        vec![
            uniform(&mut rng, &[5, 4], -1.0, 1.0),
            uniform(&mut rng, &[4, 8, 8, 8], -1.0, 1.0),
            {
                let mut p = off_lattice(&mut rng, 5, [4.0, 4.0, 4.0]);
                p.data_mut().iter_mut().for_each(|x| *x += 2.0);
                p
            },
        ],
        false,
        move |t, v| {
            let y = potentials_on_tape(t, v[0], v[1], v[2], &region)?;
            contract(t, y, s)
        },
    ));

    let pts = uniform(&mut rng, &[6, 3], 0.0, 10.0);
    let coords: Vec<[f64; 3]> = pts.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let adjacency = knn_adjacency(&coords, 3);
    let adj = adjacency.clone();
    out.push(case("edge_weights", vec![pts.clone()], false, move |t, v| {
        let y = edge_weights_on_tape(t, v[0], &adj, 6.0)?;
        contract(t, y, s)
    }));
    let small = SearchRegion::new(2, 2).unwrap();
    let edges: usize = adjacency.iter().map(Vec::len).sum();
    let adj = adjacency.clone();
    let cfg = MrfConfig { lambda: 0.3, alpha: 2.0, iterations: 4, ..MrfConfig::default() };
    out.push(case(
        "mean_field",
        vec![uniform(&mut rng, &[6, small.len()], -1.0, 1.0), uniform(&mut rng, &[edges], 0.1, 1.0)],
        false,
        move |t, v| {
            let y = mean_field_on_tape(t, v[0], v[1], &adj, &small, &cfg)?;
            contract(t, y, s)
        },
    ));
    out.push(case("mean_estimate", vec![uniform(&mut rng, &[6, small.len()], 0.0, 1.0)], false, move |t, v| {
        let y = mean_estimate_on_tape(t, v[0], &small)?;
        contract(t, y, s)
    }));
    out.push(case(
        "densify",
        vec![uniform(&mut rng, &[5, 3], 1.0, 9.0), uniform(&mut rng, &[5, 3], -2.0, 2.0)],
        false,
        move |t, v| {
            let cfg = InterpConfig { truncation: 100.0, ..InterpConfig::default() };
            let y = densify_on_tape(t, v[0], v[1], [10, 9, 8], 2.5, &cfg)?;
            contract(t, y, s)
        },
    ));
    out.push(case(
        "lncc",
        vec![uniform(&mut rng, &[1, 7, 6, 8], 0.0, 1.0), uniform(&mut rng, &[1, 7, 6, 8], 0.0, 1.0)],
        false,
        |t, v| lncc_on_tape(t, v[0], v[1], &LnccConfig::default()),
    ));
    out.push(case("bending_energy", vec![uniform(&mut rng, &[3, 6, 5, 7], -1.0, 1.0)], false, |t, v| {
        bending_energy_on_tape(t, v[0])
    }));

    // predictor forward: one stride-2 stage on a 16^3 input, spacing 2
    let dims = [16, 16, 16];
    let grid = *grid_points(dims, 2, 1).unwrap().rest_grid().unwrap();
    let pcfg = PredictorConfig { channels: vec![4], ..PredictorConfig::default() };
    let mut predictor = case(
        "predictor",
        vec![
            uniform(&mut rng, &[3, 16, 16, 16], 0.0, 1.0),
            uniform(&mut rng, &[4, 3, 3, 3, 3], -0.3, 0.3),
            uniform(&mut rng, &[4], -0.1, 0.1),
            uniform(&mut rng, &[3, 4, 3, 3, 3], -0.3, 0.3),
            uniform(&mut rng, &[3], -0.1, 0.1),
        ],
        false,
        move |t, v| {
            let p = BoundParams::from_vars([
                ("predictor.enc0.weight", v[1]),
                ("predictor.enc0.bias", v[2]),
                ("predictor.head.weight", v[3]),
                ("predictor.head.bias", v[4]),
            ]);
            let y = predict_points_on_tape(t, v[0], &p, &grid, &pcfg)?;
            contract(t, y, s)
        },
    );
    // Thousands of leaky-ReLU pre-activations shift with each weight; at 1e-5
    // one of them lands inside the probe often enough to matter.
    predictor.step = 1e-6;
    out.push(predictor);
    out.push(end_to_end(seed));
    out
}

/// Full training loss on a 16^3 synthetic pair, differentiated with respect
/// to the predictor head. Interpolation is untruncated and the graph complete
/// so the loss is smooth.
fn end_to_end(seed: u64) -> Case {
    let spec = SyntheticSpec {
        dims: [16, 16, 16],
        radius_min: 2.0,
        radius_max: 4.0,
        smoothness: 3.0,
        magnitude: 1.5,
        seed,
        ..SyntheticSpec::default()
    };
    let pair = synth_generate(&spec, 1).unwrap().remove(0);
    let mut cfg = RegistrationConfig {
        selector: Selector::Predicted,
        grid: GridConfig { spacing: 4, margin: 2 },
        search: SearchRegion::new(2, 1).unwrap(),
        ..RegistrationConfig::default()
    };
    cfg.interp.truncation = 100.0;
    cfg.mrf.lambda = 0.5;
    // kNN adjacency is piecewise constant in the point positions; a complete
    // graph keeps the loss smooth under the probe.
    cfg.mrf.neighbors = 63;
    let prepared = prepare(&pair.fixed, &pair.moving, &cfg).unwrap();
    let mut params = init_params(&cfg, spec.dims, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for name in ["predictor.head.weight", "predictor.head.bias"] {
        let t = params.get_mut(name).unwrap();
        t.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-0.05..0.05));
    }
    let frozen: Vec<(String, Tensor)> = params
        .iter()
        .filter(|(k, _)| !k.starts_with("predictor.head"))
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect();
    let inputs = vec![
        params.require("predictor.head.weight").unwrap().clone(),
        params.require("predictor.head.bias").unwrap().clone(),
    ];
    let mut c = case("end_to_end", inputs, true, move |t, v| {
        let mut vars: Vec<(String, Var)> = frozen.iter().map(|(k, x)| (k.clone(), t.constant(x.clone()))).collect();
        vars.push(("predictor.head.weight".into(), v[0]));
        vars.push(("predictor.head.bias".into(), v[1]));
        let bound = BoundParams::from_vars(vars);
        let fwd = forward(t, &prepared, &cfg, Some(&bound))?;
        loss_on_tape(t, &fwd, prepared.dims, &cfg)
    });
    // Every warped voxel samples trilinearly, so some sample crosses a cell
    // face within a 1e-5 probe of the shared bias; the smaller step keeps the
    // probe inside one cell.
    c.step = 1e-6;
    c
}

pub fn run(case: &Case, seed: u64) -> GradCheckReport {
    let opts = GradCheckOptions { seed, step: case.step, ..GradCheckOptions::default() };
    check_gradients(&case.inputs, &case.build, opts).unwrap_or_else(|e| panic!("{}: {e}", case.name))
}

pub fn tolerance(case: &Case) -> f64 {
    if case.composite {
        1e-3
    } else {
        1e-4
    }
}
