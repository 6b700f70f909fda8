//! Central finite-difference gradient checking.
//!
//! The error of one entry is `|analytic - numeric| / max(|analytic|,
//! |numeric|, floor)`, where `floor` is `floor_fraction` times the largest
//! analytic magnitude of that input. Entries orders of magnitude below the
//! gradient's scale are thus judged on absolute error at that scale.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Entries probed per input; `None` probes all of them.
    pub max_entries: Option<usize>,
    pub floor_fraction: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_entries: Some(24),
            floor_fraction: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// (input, entry, analytic, numeric) of the worst entry.
    pub worst: (usize, usize, f64, f64),
}

/// Compares the tape gradient of `build(inputs)` against central differences.
/// `build` must return a scalar node and must be deterministic.
pub fn check_gradients<F>(inputs: &[Tensor], build: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: (0, 0, 0.0, 0.0),
    };
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let entries: Vec<usize> = match opts.max_entries {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        let scale = analytic[i].data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let floor = (opts.floor_fraction * scale).max(1e-12);
        for j in entries {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + opts.step;
            let fp = eval(&probe)?;
            probe[i].data_mut()[j] = orig - opts.step;
            let fm = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * opts.step);
            let a = analytic[i].data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, j, a, numeric);
            }
        }
    }
    Ok(report)
}
