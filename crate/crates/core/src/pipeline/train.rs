//! End-to-end training of the learnable stages.

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{forward, loss_on_tape, PreparedPair, RegistrationConfig, Selector};
use crate::autodiff::{adam_step, AdamConfig, AdamState, ParameterSet, Tape, Tensor};
use crate::error::{Error, Result};
use crate::features::{init_learned_params, FeatureKind};
use crate::predictor::{check_geometry, init_predictor_params};
use crate::points::grid_points;
use crate::volume::Dims;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { epochs: 10, lr: 3e-4, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ParameterSet,
    /// Loss of every step, before that step's update.
    pub trace: Vec<f64>,
}

/// Fresh weights for every learnable stage `cfg` selects.
pub fn init_params(cfg: &RegistrationConfig, dims: Dims, seed: u64) -> Result<ParameterSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParameterSet::new();
    if cfg.features == FeatureKind::Learned {
        init_learned_params(&mut params, &mut rng)?;
    }
    if cfg.selector == Selector::Predicted {
        let grid = grid_points(dims, cfg.grid.spacing, cfg.grid.margin)?;
        let stages = check_geometry(dims, grid.rest_grid().expect("grid points carry their grid"))?;
        init_predictor_params(&mut params, cfg.features.dim(), stages, &cfg.predictor, &mut rng)?;
    }
    Ok(params)
}

/// Training loss of one pair and its gradient for every parameter.
pub fn pair_loss(
    pair: &PreparedPair,
    cfg: &RegistrationConfig,
    params: &ParameterSet,
) -> Result<(f64, IndexMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let fwd = forward(&mut tape, pair, cfg, Some(&bound))?;
    let loss = loss_on_tape(&mut tape, &fwd, pair.dims, cfg)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("training loss is {value}")));
    }
    let grads = tape.backward(loss)?;
    Ok((value, bound.gradients(&grads)))
}

/// Adam over `pairs`, one pair per step, reshuffled every epoch.
pub fn train(
    pairs: &[PreparedPair],
    cfg: &RegistrationConfig,
    opts: TrainOptions,
    init: Option<ParameterSet>,
) -> Result<TrainOutput> {
    if !cfg.is_learnable() {
        return Err(Error::Config(
            "training needs learned features or the predicted selector".into(),
        ));
    }
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if !(opts.lr >= 0.0 && opts.lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be non-negative, got {}", opts.lr)));
    }
    let mut params = match init {
        Some(p) => p,
        None => init_params(cfg, pairs[0].dims, opts.seed)?,
    };
    let adam = AdamConfig { lr: opts.lr, ..AdamConfig::default() };
    let mut state = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut trace = Vec::with_capacity(opts.epochs * pairs.len());
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let (loss, grads) = pair_loss(&pairs[i], cfg, &params)?;
            trace.push(loss);
            adam_step(&mut params, &grads, &mut state, &adam)?;
        }
    }
    Ok(TrainOutput { params, trace })
}
