//! Central-difference gradient oracle over small random networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refproto::model::{grad_total, loss_total, AdapterParams, AnchorSet, BackboneParams, LabeledBatch, Matrix, NetworkShape};

/// A random instance whose ReLU pre-activations all stay at least 1e-3
/// away from the kink, so central differences never straddle it.
pub struct Instance {
    pub shape: NetworkShape,
    pub backbone: BackboneParams,
    pub adapter: AdapterParams,
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub anchors: AnchorSet,
}

pub fn random_instance(seed: u64, with_anchors: bool) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let shape = NetworkShape::new(
            rng.random_range(1..5),
            rng.random_range(1..6),
            rng.random_range(1..4),
            rng.random_range(2..5),
        )
        .unwrap();
        let backbone = BackboneParams::init(&shape, &mut rng);
        let adapter = AdapterParams::init(&shape, &mut rng);
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..shape.input_dim).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..shape.num_classes)).collect();
        let near_kink = rows.iter().any(|x| {
            backbone.layer.bias.iter().enumerate().any(|(j, b)| {
                let z: f64 = b + x.iter().enumerate().map(|(i, xi)| xi * backbone.layer.weight.get(i, j)).sum::<f64>();
                z.abs() < 1e-3
            })
        });
        if near_kink {
            continue;
        }
        let anchors = if with_anchors {
            let mut anchors = AnchorSet::new();
            for c in 0..shape.num_classes {
                if rng.random_bool(0.7) {
                    anchors.insert(c, (0..shape.embed_dim).map(|_| rng.random_range(-1.0..1.0)).collect());
                }
            }
            anchors
        } else {
            AnchorSet::new()
        };
        return Instance {
            shape,
            backbone,
            adapter,
            inputs: Matrix::from_rows(&rows).unwrap(),
            labels,
            anchors,
        };
    }
}

/// Worst relative error of the analytic gradient against central differences.
pub fn worst_gradient_error(inst: &Instance, lambda: f64) -> f64 {
    let h = 1e-5;
    let idx = [0, 1, 2];
    let batch = LabeledBatch::new(&inst.inputs, &inst.labels, &idx, inst.shape.num_classes).unwrap();
    let loss = |b: &[f64], a: &[f64]| {
        let b = BackboneParams::unflatten(&inst.shape, b).unwrap();
        let a = AdapterParams::unflatten(&inst.shape, a).unwrap();
        loss_total(&batch, &b, &a, &inst.anchors, lambda).unwrap()
    };
    let (gb, ga) = grad_total(&batch, &inst.backbone, &inst.adapter, &inst.anchors, lambda).unwrap();
    let (b0, a0) = (inst.backbone.flatten(), inst.adapter.flatten());
    let mut worst: f64 = 0.0;
    let mut check = |analytic: f64, numeric: f64| {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
        worst = worst.max(rel);
    };
    for (i, g) in gb.flatten().iter().enumerate() {
        let (mut plus, mut minus) = (b0.clone(), b0.clone());
        plus[i] += h;
        minus[i] -= h;
        check(*g, (loss(&plus, &a0) - loss(&minus, &a0)) / (2.0 * h));
    }
    for (i, g) in ga.flatten().iter().enumerate() {
        let (mut plus, mut minus) = (a0.clone(), a0.clone());
        plus[i] += h;
        minus[i] -= h;
        check(*g, (loss(&b0, &plus) - loss(&b0, &minus)) / (2.0 * h));
    }
    worst
}

