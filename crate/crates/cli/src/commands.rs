use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use dpreg::autodiff::{read_prm1, write_prm1, ParameterSet};
use dpreg::matching::SearchRegion;
use dpreg::metrics::MetricsReport;
use dpreg::pipeline::{
    evaluate, prepare, read_dataset, register, synth_generate, train, w2_specificity_study, write_dataset, NamedPair,
    Registration, RegistrationConfig, SyntheticSpec, TrainOptions,
};
use dpreg::points::write_points_csv;
use dpreg::volume::{decode_vol3, encode_vol3, read_lab3, read_vol3, warp_labels_nearest, write_vol3, DisplacementField};

use crate::args::{Command, ConfigArgs, EvalArgs, RegisterArgs, SynthArgs, TrainArgs, W2Args};
use crate::failure::{Classify, Failure};

type Outcome = Result<(), Failure>;

pub fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Register(a) => register_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::W2Study(a) => w2_study(a),
    }
}

fn shown(p: &Path) -> String {
    p.display().to_string()
}

fn write_text(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).data_ctx(format!("writing {}", shown(path)))
}

fn load_config(a: &ConfigArgs) -> Result<RegistrationConfig, Failure> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).usage_ctx(format!("reading {}", shown(p)))?;
            RegistrationConfig::from_json(&text).usage_ctx(format!("parsing {}", shown(p)))?
        }
        None => RegistrationConfig::default(),
    };
    if let Some(f) = a.features {
        cfg.features = f.into();
    }
    if let Some(s) = a.selector {
        cfg.selector = s.into();
    }
    if let Some(l) = a.lambda {
        cfg.mrf.lambda = l;
    }
    if let Some(l) = a.lambda_reg {
        cfg.lambda_reg = l;
    }
    cfg.validate().usage_ctx("invalid configuration")?;
    Ok(cfg)
}

fn load_params(path: Option<&Path>, cfg: &RegistrationConfig) -> Result<Option<ParameterSet>, Failure> {
    match path {
        Some(p) => Ok(Some(read_prm1(p).data_ctx(format!("reading {}", shown(p)))?)),
        None if cfg.is_learnable() => Err(Failure::usage(
            "learned features and predicted points need a trained checkpoint: pass --params",
        )),
        None => Ok(None),
    }
}

/// Non-empty dataset whose pairs all share one grid.
fn load_dataset(dir: &Path) -> Result<Vec<NamedPair>, Failure> {
    let pairs = read_dataset(dir).data_ctx(format!("reading dataset {}", shown(dir)))?;
    let Some(first) = pairs.first() else {
        return Err(Failure::data(format!("dataset {} holds no pairNNN directories", shown(dir))));
    };
    let dims = first.pair.fixed.dims();
    if let Some(p) = pairs.iter().find(|p| p.pair.fixed.dims() != dims) {
        return Err(Failure::data(format!("{} is {:?}, expected {:?}", p.name, p.pair.fixed.dims(), dims)));
    }
    Ok(pairs)
}

fn synth(a: SynthArgs) -> Outcome {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).usage_ctx(format!("reading {}", shown(p)))?;
            serde_json::from_str::<SyntheticSpec>(&text).usage_ctx(format!("parsing {}", shown(p)))?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate().usage_ctx("invalid synthetic spec")?;
    let pairs = synth_generate(&spec, a.count)?;
    write_dataset(&a.out, &pairs).data_ctx(format!("writing dataset {}", shown(&a.out)))?;
    eprintln!("wrote {} pairs to {}", pairs.len(), shown(&a.out));
    Ok(())
}

/// The field exactly as stored in VOL3, so reported metrics describe the
/// written artifact.
fn as_written(field: &DisplacementField) -> Result<DisplacementField, Failure> {
    let vol = decode_vol3(&encode_vol3(field.volume()))?;
    Ok(DisplacementField::new(vol)?)
}

fn rows_csv(header: &str, region: &SearchRegion, n: usize, row: impl Fn(usize) -> Vec<f64>) -> String {
    let d = region.displacements();
    let mut s = format!("point,dx,dy,dz,{header}\n");
    for p in 0..n {
        for (k, v) in row(p).iter().enumerate() {
            let _ = writeln!(s, "{p},{},{},{},{v}", d[k][0], d[k][1], d[k][2]);
        }
    }
    s
}

fn dump_stages(dir: &Path, reg: &Registration, cfg: &RegistrationConfig) -> Outcome {
    let ctx = || format!("writing stage dumps to {}", shown(dir));
    fs::create_dir_all(dir).data_ctx(ctx())?;
    write_text(&dir.join("config.json"), &cfg.to_json()?)?;
    write_vol3(&reg.feat_fixed.volume, dir.join("features_fixed.vol3")).data_ctx(ctx())?;
    write_vol3(&reg.feat_moving.volume, dir.join("features_moving.vol3")).data_ctx(ctx())?;
    write_points_csv(&reg.points, dir.join("points.csv")).data_ctx(ctx())?;
    let pot = &reg.potentials;
    write_text(&dir.join("potentials.csv"), &rows_csv("potential", &pot.region, pot.len(), |p| pot.row(p).to_vec()))?;
    let q = &reg.marginals;
    write_text(&dir.join("marginals.csv"), &rows_csv("q", &q.region, q.len(), |p| q.row(p).to_vec()))?;
    let mut sparse = String::from("x,y,z,dx,dy,dz\n");
    for (p, d) in reg.points.points().iter().zip(&reg.sparse) {
        let _ = writeln!(sparse, "{},{},{},{},{},{}", p[0], p[1], p[2], d[0], d[1], d[2]);
    }
    write_text(&dir.join("sparse.csv"), &sparse)?;
    write_vol3(reg.field.volume(), dir.join("field.vol3")).data_ctx(ctx())
}

fn register_cmd(a: RegisterArgs) -> Outcome {
    let cfg = load_config(&a.config)?;
    let fixed = read_vol3(&a.fixed).data_ctx(format!("reading {}", shown(&a.fixed)))?;
    let moving = read_vol3(&a.moving).data_ctx(format!("reading {}", shown(&a.moving)))?;
    let params = load_params(a.params.as_deref(), &cfg)?;
    let reg = register(&fixed, &moving, &cfg, params.as_ref())?;
    if let Some(p) = &a.out_field {
        write_vol3(reg.field.volume(), p).data_ctx(format!("writing {}", shown(p)))?;
    }
    if let Some(p) = &a.out_points {
        write_points_csv(&reg.points, p).data_ctx(format!("writing {}", shown(p)))?;
    }
    if let Some(dir) = &a.dump_dir {
        dump_stages(dir, &reg, &cfg)?;
    }
    if let (Some(fl), Some(ml)) = (&a.fixed_labels, &a.moving_labels) {
        let fixed_labels = read_lab3(fl).data_ctx(format!("reading {}", shown(fl)))?;
        let moving_labels = read_lab3(ml).data_ctx(format!("reading {}", shown(ml)))?;
        let field = as_written(&reg.field)?;
        let warped = warp_labels_nearest(&moving_labels, &field)?;
        let report = MetricsReport::compute(&fixed_labels, &warped, &field)?;
        if let Some(p) = &a.out_metrics {
            write_text(p, &report.to_json()?)?;
        }
        eprintln!("dice_mean {:.4}", report.dice_mean);
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Outcome {
    let mut cfg = load_config(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if !cfg.is_learnable() {
        return Err(Failure::usage("nothing to train: select --features learned and/or --selector predicted"));
    }
    let data = load_dataset(&a.data)?;
    let prepared = data
        .iter()
        .map(|p| prepare(&p.pair.fixed, &p.pair.moving, &cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let opts = TrainOptions { epochs: a.epochs, lr: a.lr, seed: cfg.seed };
    let out = train(&prepared, &cfg, opts, None)?;
    write_prm1(&out.params, &a.out).data_ctx(format!("writing {}", shown(&a.out)))?;
    if let Some(p) = &a.loss_trace {
        let mut s = String::from("step,loss\n");
        for (i, l) in out.trace.iter().enumerate() {
            let _ = writeln!(s, "{i},{l}");
        }
        write_text(p, &s)?;
    }
    if let (Some(first), Some(last)) = (out.trace.first(), out.trace.last()) {
        eprintln!("{} steps, loss {first:.5} -> {last:.5}", out.trace.len());
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Outcome {
    let cfg = load_config(&a.config)?;
    let data = load_dataset(&a.data)?;
    let params = load_params(a.params.as_deref(), &cfg)?;
    let report = evaluate(&data, &cfg, params.as_ref())?;
    write_text(&a.out, &report.to_json()?)?;
    eprintln!(
        "{} pairs: dice {:.4} +- {:.4} (unregistered {:.4})",
        report.pairs.len(),
        report.dice_mean.mean,
        report.dice_mean.std,
        report.unregistered_dice.mean
    );
    Ok(())
}

fn w2_study(a: W2Args) -> Outcome {
    let cfg = load_config(&a.config)?;
    let data = load_dataset(&a.data)?;
    if data.len() < 3 {
        return Err(Failure::data(format!("the study needs at least 3 pairs, {} holds {}", shown(&a.data), data.len())));
    }
    let params = read_prm1(&a.params).data_ctx(format!("reading {}", shown(&a.params)))?;
    let report = w2_specificity_study(&params, &data, &cfg)?;
    write_text(&a.out, &report.to_json()?)?;
    match report.shared_fixed_mean {
        Some(s) => eprintln!("shared-fixed W2 {s:.5}, all pairs {:.5}", report.all_pairs_mean),
        None => eprintln!("no pairs share a fixed image; all pairs {:.5}", report.all_pairs_mean),
    }
    Ok(())
}
