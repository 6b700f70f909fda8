//! Batch evaluation and the point-set specificity study.

use std::thread;

use serde::{Deserialize, Serialize};

use super::{prepare, register_prepared, NamedPair, PreparedPair, RegistrationConfig, Selector};
use crate::autodiff::{ParameterSet, Tape, Tensor};
use crate::error::{Error, Result};
use crate::features::learned_features_on_tape;
use crate::metrics::{w2_points, MetricsReport};
use crate::predictor::{predict_points_on_tape, predictor_input};
use crate::volume::{warp_labels_nearest, DisplacementField};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub name: String,
    pub metrics: MetricsReport,
    /// Mean Dice of the fixed and moving labels before registration.
    pub unregistered_dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pairs: Vec<PairReport>,
    pub dice_mean: Summary,
    pub unregistered_dice: Summary,
    pub hessian_mean: Summary,
    pub std_log_jacobian: Summary,
    pub nonpositive_jacobian_fraction: Summary,
}

impl EvalReport {
    pub fn from_pairs(pairs: Vec<PairReport>) -> Self {
        let col = |f: &dyn Fn(&PairReport) -> f64| Summary::of(&pairs.iter().map(f).collect::<Vec<_>>());
        Self {
            dice_mean: col(&|p| p.metrics.dice_mean),
            unregistered_dice: col(&|p| p.unregistered_dice),
            hessian_mean: col(&|p| p.metrics.hessian_mean),
            std_log_jacobian: col(&|p| p.metrics.std_log_jacobian),
            nonpositive_jacobian_fraction: col(&|p| p.metrics.nonpositive_jacobian_fraction),
            pairs,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn evaluate_one(p: &NamedPair, cfg: &RegistrationConfig, params: Option<&ParameterSet>) -> Result<PairReport> {
    let reg = register_prepared(&prepare(&p.pair.fixed, &p.pair.moving, cfg)?, cfg, params)?;
    let warped = warp_labels_nearest(&p.pair.moving_labels, &reg.field)?;
    let metrics = MetricsReport::compute(&p.pair.fixed_labels, &warped, &reg.field)?;
    let before = MetricsReport::compute(
        &p.pair.fixed_labels,
        &p.pair.moving_labels,
        &DisplacementField::zeros(p.pair.fixed.dims()),
    )?;
    Ok(PairReport { name: p.name.clone(), metrics, unregistered_dice: before.dice_mean })
}

/// Registers every pair, spreading pairs over the available cores.
pub fn evaluate(pairs: &[NamedPair], cfg: &RegistrationConfig, params: Option<&ParameterSet>) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    cfg.validate()?;
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(pairs.len());
    let mut slots: Vec<Option<Result<PairReport>>> = (0..pairs.len()).map(|_| None).collect();
    thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                s.spawn(move || {
                    (w..pairs.len())
                        .step_by(workers)
                        .map(|i| (i, evaluate_one(&pairs[i], cfg, params)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("evaluation worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    let reports = slots
        .into_iter()
        .map(|r| r.expect("every pair evaluated"))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_pairs(reports))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct W2Entry {
    pub a: String,
    pub b: String,
    pub shared_fixed: bool,
    pub w2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct W2Report {
    pub entries: Vec<W2Entry>,
    /// Mean over pairs of point sets whose inputs share the fixed image.
    pub shared_fixed_mean: Option<f64>,
    pub all_pairs_mean: f64,
    /// `all_pairs_mean / shared_fixed_mean`; absent when the shared mean is
    /// zero or undefined.
    pub ratio: Option<f64>,
}

impl W2Report {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Predicted driving points of one prepared pair.
pub fn predicted_points(pair: &PreparedPair, cfg: &RegistrationConfig, params: &ParameterSet) -> Result<Vec<[f64; 3]>> {
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let fixed = tape.constant(Tensor::from_volume(&pair.fixed));
    let moving = tape.constant(Tensor::from_volume(&pair.moving));
    let (ff, fm) = match &pair.features {
        Some((a, b)) => (tape.constant(Tensor::from_volume(&a.volume)), tape.constant(Tensor::from_volume(&b.volume))),
        None => (
            learned_features_on_tape(&mut tape, fixed, &bound)?,
            learned_features_on_tape(&mut tape, moving, &bound)?,
        ),
    };
    let input = predictor_input(&mut tape, fixed, moving, ff, fm)?;
    let pts = predict_points_on_tape(&mut tape, input, &bound, &pair.rest_grid, &cfg.predictor)?;
    Ok(tape.value(pts).data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

/// Compares W2 distances between predicted point sets whose pairs share a
/// fixed image with W2 over all pairs of point sets.
pub fn w2_specificity_study(params: &ParameterSet, pairs: &[NamedPair], cfg: &RegistrationConfig) -> Result<W2Report> {
    if pairs.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "the specificity study needs at least 3 pairs, got {}",
            pairs.len()
        )));
    }
    let cfg = RegistrationConfig { selector: Selector::Predicted, ..cfg.clone() };
    let sets = pairs
        .iter()
        .map(|p| predicted_points(&prepare(&p.pair.fixed, &p.pair.moving, &cfg)?, &cfg, params))
        .collect::<Result<Vec<_>>>()?;
    let mut entries = Vec::new();
    for i in 0..pairs.len() {
        for j in i + 1..pairs.len() {
            entries.push(W2Entry {
                a: pairs[i].name.clone(),
                b: pairs[j].name.clone(),
                shared_fixed: pairs[i].pair.fixed == pairs[j].pair.fixed,
                w2: w2_points(&sets[i], &sets[j])?,
            });
        }
    }
    let all: Vec<f64> = entries.iter().map(|e| e.w2).collect();
    let shared: Vec<f64> = entries.iter().filter(|e| e.shared_fixed).map(|e| e.w2).collect();
    let all_pairs_mean = Summary::of(&all).mean;
    let shared_fixed_mean = (!shared.is_empty()).then(|| Summary::of(&shared).mean);
    let ratio = shared_fixed_mean.filter(|&s| s > 0.0).map(|s| all_pairs_mean / s);
    Ok(W2Report { entries, shared_fixed_mean, all_pairs_mean, ratio })
}
