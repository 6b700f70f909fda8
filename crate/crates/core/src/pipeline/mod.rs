//! The five-stage registration pipeline, its training loop, and the
//! synthetic benchmark around it.

mod dataset;
mod study;
mod synth;
mod train;

pub use dataset::{read_dataset, read_pair, write_dataset, write_pair, NamedPair};
pub use study::{evaluate, predicted_points, w2_specificity_study, EvalReport, PairReport, Summary, W2Entry, W2Report};
pub use synth::{phantom, random_field, synth_generate, SyntheticPair, SyntheticSpec, MAX_REJECTIONS};
pub use train::{init_params, pair_loss, train, TrainOptions, TrainOutput};

use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundParams, ParameterSet, Tape, Tensor, Var};
use crate::error::{Error, Result, Stage, StageExt};
use crate::features::{
    intensity_features, learned_features_on_tape, mind_features, normalize_intensity, FeatureKind, FeatureMap,
    MindConfig,
};
use crate::interp::{densify_on_tape, InterpConfig};
use crate::matching::{potentials_on_tape, DisplacementDistribution, SearchRegion};
use crate::metrics::{bending_energy_on_tape, bending_site_count, lncc_interior_count, lncc_on_tape, LnccConfig};
use crate::mrf::{edge_weights_on_tape, knn_adjacency, mean_estimate_on_tape, mean_field_on_tape, MarginalSet, MrfConfig};
use crate::points::{foerstner_points, grid_points, DrivingPointSet, FoerstnerConfig, Provenance, RestGrid};
use crate::predictor::{check_geometry, predict_points_on_tape, predictor_input, sample_driving_features, PredictorConfig};
use crate::volume::{DisplacementField, Dims, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selector {
    Grid,
    Foerstner,
    Predicted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub spacing: usize,
    pub margin: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { spacing: 8, margin: 4 }
    }
}

/// Every knob of the pipeline. Serialized as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub features: FeatureKind,
    pub selector: Selector,
    pub mind: MindConfig,
    pub grid: GridConfig,
    pub foerstner: FoerstnerConfig,
    pub search: SearchRegion,
    pub mrf: MrfConfig,
    pub interp: InterpConfig,
    pub predictor: PredictorConfig,
    pub lncc: LnccConfig,
    pub lambda_reg: f64,
    pub seed: u64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            features: FeatureKind::Mind,
            selector: Selector::Grid,
            mind: MindConfig::default(),
            grid: GridConfig::default(),
            foerstner: FoerstnerConfig::default(),
            search: SearchRegion::default(),
            mrf: MrfConfig::default(),
            interp: InterpConfig::default(),
            predictor: PredictorConfig::default(),
            lncc: LnccConfig::default(),
            lambda_reg: 0.1,
            seed: 0,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        self.mind.validate()?;
        self.search.validate()?;
        self.mrf.validate()?;
        self.predictor.validate()?;
        if self.grid.spacing == 0 {
            return Err(Error::Config("grid spacing must be at least 1".into()));
        }
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return Err(Error::Config(format!("lambda_reg must be non-negative, got {}", self.lambda_reg)));
        }
        if self.interp.sigma.is_some_and(|s| s <= 0.0) || self.interp.truncation <= 0.0 || self.interp.epsilon < 0.0 {
            return Err(Error::Config(format!("invalid interpolation settings {:?}", self.interp)));
        }
        if self.foerstner.sigma <= 0.0 || self.foerstner.count == Some(0) {
            return Err(Error::Config(format!("invalid Foerstner settings {:?}", self.foerstner)));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Edge kernel bandwidth: configured, else the grid spacing.
    pub fn sigma_p(&self) -> f64 {
        self.mrf.sigma_p.unwrap_or(self.grid.spacing as f64)
    }

    /// Interpolation bandwidth: configured, else half the grid spacing.
    pub fn interp_sigma(&self) -> f64 {
        self.interp.sigma.unwrap_or(self.grid.spacing as f64 / 2.0)
    }

    /// True when some stage has trainable weights.
    pub fn is_learnable(&self) -> bool {
        self.features == FeatureKind::Learned || self.selector == Selector::Predicted
    }
}

/// Per-pair inputs that do not depend on trainable weights.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    pub dims: Dims,
    pub fixed: Volume,
    pub moving: Volume,
    /// Fixed and moving feature maps unless features are learned.
    pub features: Option<(FeatureMap, FeatureMap)>,
    /// Driving points unless they are predicted.
    pub points: Option<DrivingPointSet>,
    pub rest_grid: RestGrid,
}

fn fixed_features(img: &Volume, cfg: &RegistrationConfig) -> Result<Option<FeatureMap>> {
    Ok(match cfg.features {
        FeatureKind::Intensity => Some(intensity_features(img)?),
        FeatureKind::Mind => Some(mind_features(img, &cfg.mind)?),
        FeatureKind::Learned => None,
    })
}

/// Normalizes intensities, extracts fixed features and baseline points.
pub fn prepare(fixed: &Volume, moving: &Volume, cfg: &RegistrationConfig) -> Result<PreparedPair> {
    cfg.validate()?;
    if !fixed.same_shape(moving) || fixed.channels() != 1 {
        return Err(Error::shape("register", &fixed.tensor_shape(), &moving.tensor_shape()));
    }
    let dims = fixed.dims();
    let fixed = normalize_intensity(fixed)?;
    let moving = normalize_intensity(moving)?;
    let features = match (fixed_features(&fixed, cfg), fixed_features(&moving, cfg)) {
        (Ok(Some(a)), Ok(Some(b))) => Some((a, b)),
        (Ok(None), Ok(None)) => None,
        (Err(e), _) | (_, Err(e)) => return Err(e).stage(Stage::Features),
        _ => unreachable!("feature kind is shared"),
    };
    let grid = grid_points(dims, cfg.grid.spacing, cfg.grid.margin).stage(Stage::Points)?;
    let rest_grid = *grid.rest_grid().expect("grid points carry their grid");
    let points = match cfg.selector {
        Selector::Grid => Some(grid),
        Selector::Foerstner => Some(
            foerstner_points(
                &fixed,
                cfg.foerstner.sigma,
                cfg.foerstner.nms_radius.unwrap_or(cfg.grid.spacing as f64),
                cfg.foerstner.count.unwrap_or(rest_grid.count()),
                cfg.grid.spacing,
                cfg.grid.margin,
            )
            .stage(Stage::Points)?,
        ),
        Selector::Predicted => {
            check_geometry(dims, &rest_grid).stage(Stage::Points)?;
            None
        }
    };
    Ok(PreparedPair {
        dims,
        fixed,
        moving,
        features,
        points,
        rest_grid,
    })
}

/// Tape handles of every stage output of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub feat_fixed: Var,
    pub feat_moving: Var,
    pub points: Var,
    pub potentials: Var,
    pub marginals: Var,
    pub sparse: Var,
    pub field: Var,
    pub fixed: Var,
    pub moving: Var,
    pub provenance: Provenance,
    pub rest_grid: Option<RestGrid>,
}

/// Runs the five stages on the tape. `params` must hold every weight the
/// configuration needs.
pub fn forward(tape: &mut Tape, pair: &PreparedPair, cfg: &RegistrationConfig, params: Option<&BoundParams>) -> Result<Forward> {
    let need = |what: &str| {
        Error::Config(format!("the {what} stage needs trained parameters; pass a checkpoint or train first"))
    };
    let fixed = tape.constant(Tensor::from_volume(&pair.fixed));
    let moving = tape.constant(Tensor::from_volume(&pair.moving));

    let (feat_fixed, feat_moving) = match &pair.features {
        Some((a, b)) => (tape.constant(Tensor::from_volume(&a.volume)), tape.constant(Tensor::from_volume(&b.volume))),
        None => {
            let p = params.ok_or_else(|| need("learned feature"))?;
            let a = learned_features_on_tape(tape, fixed, p).stage(Stage::Features)?;
            let b = learned_features_on_tape(tape, moving, p).stage(Stage::Features)?;
            (a, b)
        }
    };

    let (points, provenance, rest_grid) = match &pair.points {
        Some(set) => (tape.constant(set.to_tensor()), set.provenance(), set.rest_grid().copied()),
        None => {
            let p = params.ok_or_else(|| need("predicted points"))?;
            let input = predictor_input(tape, fixed, moving, feat_fixed, feat_moving).stage(Stage::Points)?;
            let pts = predict_points_on_tape(tape, input, p, &pair.rest_grid, &cfg.predictor).stage(Stage::Points)?;
            (pts, Provenance::Predicted, Some(pair.rest_grid))
        }
    };

    let desc = sample_driving_features(tape, feat_fixed, points).stage(Stage::Matching)?;
    let potentials = potentials_on_tape(tape, desc, feat_moving, points, &cfg.search).stage(Stage::Matching)?;

    let coords = graph_sites(tape.value(points), rest_grid.as_ref());
    let adjacency = knn_adjacency(&coords, cfg.mrf.neighbors);
    let weights = edge_weights_on_tape(tape, points, &adjacency, cfg.sigma_p()).stage(Stage::Regularization)?;
    let marginals =
        mean_field_on_tape(tape, potentials, weights, &adjacency, &cfg.search, &cfg.mrf).stage(Stage::Regularization)?;
    let sparse = mean_estimate_on_tape(tape, marginals, &cfg.search).stage(Stage::Regularization)?;

    let field = densify_on_tape(tape, points, sparse, pair.dims, cfg.interp_sigma(), &cfg.interp)
        .stage(Stage::Interpolation)?;
    Ok(Forward {
        feat_fixed,
        feat_moving,
        points,
        potentials,
        marginals,
        sparse,
        field,
        fixed,
        moving,
        provenance,
        rest_grid,
    })
}

/// Positions the neighbour graph is built on: the rest vertices when the
/// points carry a rest grid (one copy per head), else the points themselves.
/// Only the edge weights then follow the points, so the graph topology does
/// not jump as predicted points move.
fn graph_sites(points: &Tensor, rest_grid: Option<&RestGrid>) -> Vec<[f64; 3]> {
    let coords: Vec<[f64; 3]> = points.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    match rest_grid {
        Some(g) if g.count() > 0 && coords.len().is_multiple_of(g.count()) => {
            let v = g.vertices();
            (0..coords.len() / g.count()).flat_map(|_| v.iter().copied()).collect()
        }
        _ => coords,
    }
}

/// Training objective `-LNCC / interior + lambda_reg * bending / sites` of
/// the moving image warped by the forward field.
pub fn loss_on_tape(tape: &mut Tape, fwd: &Forward, dims: Dims, cfg: &RegistrationConfig) -> Result<Var> {
    let interior = lncc_interior_count(dims, cfg.lncc.radius);
    let sites = bending_site_count(dims);
    if interior == 0 || sites == 0 {
        return Err(Error::InvalidArgument(format!("volume {dims:?} too small for the training loss"))).stage(Stage::Loss);
    }
    let warped = tape.warp(fwd.moving, fwd.field).stage(Stage::Loss)?;
    let sim = lncc_on_tape(tape, fwd.fixed, warped, &cfg.lncc).stage(Stage::Loss)?;
    let bend = bending_energy_on_tape(tape, fwd.field).stage(Stage::Loss)?;
    let a = tape.scalar_mul(sim, -1.0 / interior as f64);
    let b = tape.scalar_mul(bend, cfg.lambda_reg / sites as f64);
    tape.add(a, b).stage(Stage::Loss)
}

/// Every stage output of a registration, for inspection or export.
#[derive(Debug, Clone)]
pub struct Registration {
    pub field: DisplacementField,
    pub points: DrivingPointSet,
    pub marginals: MarginalSet,
    pub potentials: DisplacementDistribution,
    pub sparse: Vec<[f64; 3]>,
    pub feat_fixed: FeatureMap,
    pub feat_moving: FeatureMap,
}

fn rows3(t: &Tensor) -> Vec<[f64; 3]> {
    t.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

/// Registers `moving` onto `fixed`: the returned field maps fixed-image
/// voxels into the moving image.
pub fn register(
    fixed: &Volume,
    moving: &Volume,
    cfg: &RegistrationConfig,
    params: Option<&ParameterSet>,
) -> Result<Registration> {
    let pair = prepare(fixed, moving, cfg)?;
    register_prepared(&pair, cfg, params)
}

pub fn register_prepared(pair: &PreparedPair, cfg: &RegistrationConfig, params: Option<&ParameterSet>) -> Result<Registration> {
    let mut tape = Tape::new();
    let bound = params.map(|p| p.bind_frozen(&mut tape));
    let fwd = forward(&mut tape, pair, cfg, bound.as_ref())?;
    let points = rows3(tape.value(fwd.points));
    let kind = cfg.features;
    let feature = |v: Var| -> Result<FeatureMap> { Ok(FeatureMap { volume: tape.value(v).to_volume()?, kind }) };
    Ok(Registration {
        field: DisplacementField::new(tape.value(fwd.field).to_volume()?)?,
        marginals: MarginalSet { region: cfg.search, q: tape.value(fwd.marginals).data().to_vec() },
        potentials: DisplacementDistribution {
            points: points.clone(),
            region: cfg.search,
            potentials: tape.value(fwd.potentials).data().to_vec(),
        },
        sparse: rows3(tape.value(fwd.sparse)),
        feat_fixed: feature(fwd.feat_fixed)?,
        feat_moving: feature(fwd.feat_moving)?,
        points: DrivingPointSet::new(points, fwd.provenance, fwd.rest_grid)?,
    })
}
