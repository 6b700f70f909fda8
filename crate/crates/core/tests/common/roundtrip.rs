//! Strategies shared by the format round-trip properties.

use dpreg::autodiff::{ParameterSet, Tensor};
use dpreg::metrics::{LabelDice, MetricsReport};
use dpreg::points::{DrivingPointSet, Provenance, RestGrid};
use dpreg::volume::{LabelVolume, Volume};
use proptest::prelude::*;

pub fn dims() -> impl Strategy<Value = [usize; 3]> {
    [1usize..6, 1usize..6, 1usize..6]
}

pub fn volume() -> impl Strategy<Value = Volume> {
    (dims(), 1usize..4).prop_flat_map(|(d, c)| {
        prop::collection::vec(-1e6f64..1e6, d.iter().product::<usize>() * c)
            .prop_map(move |data| Volume::new(d, c, data).unwrap())
    })
}

pub fn labels() -> impl Strategy<Value = LabelVolume> {
    dims().prop_flat_map(|d| {
        prop::collection::vec(any::<u16>(), d.iter().product::<usize>())
            .prop_map(move |data| LabelVolume::new(d, data).unwrap())
    })
}

pub fn tensor() -> impl Strategy<Value = Tensor> {
    prop::collection::vec(1usize..4, 0..4).prop_flat_map(|shape| {
        let n = shape.iter().product::<usize>();
        prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), n)
            .prop_map(move |data| Tensor::new(shape.clone(), data).unwrap())
    })
}

pub fn provenance() -> impl Strategy<Value = Provenance> {
    prop_oneof![Just(Provenance::Grid), Just(Provenance::Foerstner), Just(Provenance::Predicted)]
}

/// Coordinates with at most six decimals, which the CSV writer keeps exactly.
pub fn coordinate() -> impl Strategy<Value = f64> {
    (-100_000_000i64..100_000_000).prop_map(|k| k as f64 / 1e6)
}

pub fn report() -> impl Strategy<Value = MetricsReport> {
    let unit = 0.0f64..=1.0;
    (
        prop::collection::vec((any::<u16>(), unit.clone()), 0..6),
        unit.clone(),
        0.0f64..1e3,
        0.0f64..10.0,
        unit,
        prop::option::of(0.0f64..100.0),
    )
        .prop_map(|(d, dice_mean, hessian_mean, std_log_jacobian, nonpositive_jacobian_fraction, w2)| MetricsReport {
            dice_per_label: d.into_iter().map(|(label, dice)| LabelDice { label, dice }).collect(),
            dice_mean,
            hessian_mean,
            std_log_jacobian,
            nonpositive_jacobian_fraction,
            w2,
        })
}

pub fn parameter_set() -> impl Strategy<Value = ParameterSet> {
    prop::collection::vec(tensor(), 0..5).prop_map(|ts| {
        let mut p = ParameterSet::new();
        for (i, t) in ts.into_iter().enumerate() {
            p.insert(format!("layer{i}.weight"), t).unwrap();
        }
        p
    })
}

pub fn point_set() -> impl Strategy<Value = DrivingPointSet> {
    (prop::collection::vec([coordinate(), coordinate(), coordinate()], 0..20), provenance())
        .prop_map(|(pts, prov)| DrivingPointSet::new(pts, prov, None).unwrap())
}

/// Point sets tiling a rest grid one or more times.
pub fn gridded_point_set() -> impl Strategy<Value = DrivingPointSet> {
    (prop::array::uniform3(-50.0f64..50.0), 0.5f64..10.0, prop::array::uniform3(1usize..4), 1usize..3).prop_flat_map(
        |(origin, spacing, dims, heads)| {
            let n = heads * dims.iter().product::<usize>();
            prop::collection::vec([coordinate(), coordinate(), coordinate()], n).prop_map(move |pts| {
                DrivingPointSet::new(pts, Provenance::Predicted, Some(RestGrid { origin, spacing, dims })).unwrap()
            })
        },
    )
}

pub fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}
