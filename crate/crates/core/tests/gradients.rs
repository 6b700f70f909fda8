mod common;

use common::gradsuite::{cases, run, tolerance};

fn check_named(name: &str) {
    let mut seen = false;
    for seed in 0..3 {
        for case in cases(seed).iter().filter(|c| c.name == name) {
            seen = true;
            let r = run(case, seed);
            assert!(r.checked > 0, "{name}: nothing probed");
            assert!(
                r.max_rel_error < tolerance(case),
                "{name} seed {seed}: rel. error {:.3e} at {:?}",
                r.max_rel_error,
                r.worst
            );
        }
    }
    assert!(seen, "no case named {name}");
}

macro_rules! grad_tests {
    ($($fn_name:ident => $case:literal),* $(,)?) => {
        $(#[test] fn $fn_name() { check_named($case); })*
    };
}

grad_tests! {
    add => "add",
    sub => "sub",
    mul => "mul",
    affine_scalars => "scalar_mul+add_scalar",
    mean => "mean",
    tanh => "tanh",
    leaky_relu => "leaky_relu",
    softmax_rows => "softmax(axis 1)",
    softmax_columns => "softmax(axis 0)",
    concat => "concat",
    conv3d => "conv3d",
    avg_pool3d => "avg_pool3d",
    grid_sample => "grid_sample",
    warp => "warp",
    potentials => "potentials",
    edge_weights => "edge_weights",
    mean_field => "mean_field",
    mean_estimate => "mean_estimate",
    densify => "densify",
    lncc => "lncc",
    bending_energy => "bending_energy",
    predictor => "predictor",
    end_to_end => "end_to_end",
}
