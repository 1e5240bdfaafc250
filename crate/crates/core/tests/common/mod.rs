//! Central finite-difference gradient checks shared by the test targets.

#![allow(dead_code)]

use membrane_twin::geometry::Point3;
use membrane_twin::model::{Autoencoder, AutoencoderArch, Regressor, RegressorArch};
use membrane_twin::tensor::{Activation, GradSet, Graph, NodeId, ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-4;

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Builds a scalar from the output of `build` with fixed random weights so
/// every output element contributes.
fn weighted_loss(g: &mut Graph, out: NodeId, seed: u64) -> NodeId {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = (0..g.value(out).len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    g.weighted_sum(out, w).unwrap()
}

/// Checks the gradient with respect to every leaf. `build` maps leaf nodes
/// to an output node. Returns the worst relative error over the leaves.
pub fn check_leaves(inputs: &[Tensor], build: impl Fn(&mut Graph, &[NodeId]) -> NodeId) -> f64 {
    let eval = |vals: &[Tensor]| {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = vals.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &ids);
        let loss = weighted_loss(&mut g, out, 77);
        (g, ids, loss)
    };
    let (g, ids, loss) = eval(inputs);
    let grads = g.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads
            .get(*id)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let mut numeric = vec![0.0; inputs[k].len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let at = |d: f64| {
                let mut vals = inputs.to_vec();
                vals[k].data_mut()[i] += d;
                let (g, _, loss) = eval(&vals);
                g.value(loss).item()
            };
            *slot = (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Checks parameter gradients of a model whose forward pass is `forward`.
pub fn check_params<M>(
    model: &mut M,
    params: impl Fn(&M) -> &ParamSet,
    params_mut: impl Fn(&mut M) -> &mut ParamSet,
    forward: impl Fn(&M, &mut Graph) -> NodeId,
) -> f64 {
    let loss_of = |m: &M| {
        let mut g = Graph::new();
        let out = forward(m, &mut g);
        let loss = weighted_loss(&mut g, out, 91);
        (g, loss)
    };
    let (g, loss) = loss_of(model);
    let mut gs: GradSet = params(model).zero_grads();
    g.backward(loss).unwrap().accumulate(&mut gs);
    let ids: Vec<_> = params(model).ids().collect();
    let mut worst = 0.0f64;
    for id in ids {
        let n = params(model).value(id).len();
        let mut numeric = vec![0.0; n];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let base = params(model).value(id).data()[i];
            let mut at = |v: f64| {
                params_mut(model).value_mut(id).data_mut()[i] = v;
                let (g, loss) = loss_of(model);
                g.value(loss).item()
            };
            let (up, down) = (at(base + FD_STEP), at(base - FD_STEP));
            params_mut(model).value_mut(id).data_mut()[i] = base;
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        let err = rel_err(gs.get(id), &numeric);
        assert!(err.is_finite(), "non-finite error for {}", params(model).name(id));
        worst = worst.max(err);
    }
    worst
}

// ---------------------------------------------------------------------------
// Cases: each returns the worst relative error over its checks.

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn linear_layer() -> f64 {
    let mut r = rng(1);
    let inputs = [
        random_tensor(&[5, 4], &mut r),
        random_tensor(&[4, 3], &mut r),
        random_tensor(&[3], &mut r),
    ];
    let mut worst = 0.0f64;
    for act in [Activation::Identity, Activation::Relu] {
        worst = worst.max(check_leaves(&inputs, |g, ids| {
            g.linear(ids[0], ids[1], Some(ids[2]), act).unwrap()
        }));
    }
    worst.max(check_leaves(&inputs[..2], |g, ids| {
        g.linear(ids[0], ids[1], None, Activation::Identity).unwrap()
    }))
}

pub fn relu_and_scale() -> f64 {
    let inputs = [random_tensor(&[4, 6], &mut rng(2))];
    check_leaves(&inputs, |g, ids| {
        let r = g.relu(ids[0]);
        g.scale(r, -1.7)
    })
}

pub fn segment_max() -> f64 {
    let inputs = [random_tensor(&[12, 5], &mut rng(3))];
    check_leaves(&inputs, |g, ids| g.segment_max(ids[0], 3).unwrap())
}

pub fn conv_transpose() -> f64 {
    let mut r = rng(4);
    let inputs = [
        random_tensor(&[2, 3, 3, 3], &mut r),
        random_tensor(&[3, 2, 4, 4], &mut r),
        random_tensor(&[2], &mut r),
    ];
    let strided = check_leaves(&inputs, |g, ids| {
        g.conv_transpose2d(ids[0], ids[1], Some(ids[2]), 2, 1).unwrap()
    });
    let inputs = [
        random_tensor(&[1, 4, 3, 2], &mut r),
        random_tensor(&[4, 3, 1, 1], &mut r),
    ];
    let pointwise = check_leaves(&inputs, |g, ids| {
        g.conv_transpose2d(ids[0], ids[1], None, 1, 0).unwrap()
    });
    let inputs = [
        random_tensor(&[1, 2, 2, 3], &mut r),
        random_tensor(&[2, 2, 3, 3], &mut r),
    ];
    let k3 = check_leaves(&inputs, |g, ids| {
        g.conv_transpose2d(ids[0], ids[1], None, 1, 0).unwrap()
    });
    strided.max(pointwise).max(k3)
}

pub fn reshape_channels_last_affine() -> f64 {
    let mut r = rng(5);
    let inputs = [random_tensor(&[2, 3, 2, 2], &mut r), random_tensor(&[4, 3], &mut r)];
    check_leaves(&inputs, |g, ids| {
        let cl = g.channels_last(ids[0]).unwrap();
        let b = g.broadcast_add(cl, ids[1]).unwrap();
        let a = g.affine(b, &[2.0, -0.5, 70.0], &[70.0, 70.0, 0.0]).unwrap();
        g.reshape(a, &[8, 3]).unwrap()
    })
}

pub fn add_sum_external_loss() -> f64 {
    let mut r = rng(6);
    let inputs = [random_tensor(&[3, 4], &mut r), random_tensor(&[3, 4], &mut r)];
    check_leaves(&inputs, |g, ids| {
        let s = g.add(ids[0], ids[1]).unwrap();
        // external loss Σ v² supplied with its own gradient
        let v = g.value(s).data().to_vec();
        let value = v.iter().map(|x| x * x).sum();
        let ext = g.external_loss(s, value, v.iter().map(|x| 2.0 * x).collect()).unwrap();
        let total = g.sum(s);
        let both = g.add(ext, total).unwrap();
        g.reshape(both, &[1]).unwrap()
    })
}

pub fn toy_arch(points: usize) -> AutoencoderArch {
    AutoencoderArch {
        encoder_widths: vec![8, 12],
        decoder_channels: vec![6, 5, 4],
        dense_hidden: 10,
        ..AutoencoderArch::new(4, points)
    }
}

pub fn random_clouds(n: usize, size: usize, seed: u64) -> Vec<Vec<Point3>> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            (0..size)
                .map(|_| {
                    [
                        r.gen_range(0.0..140.0),
                        r.gen_range(0.0..140.0),
                        r.gen_range(-25.0..0.0),
                    ]
                })
                .collect()
        })
        .collect()
}

/// Full toy autoencoder; `points` picks the conv (square) or dense decoder.
pub fn toy_autoencoder(points: usize) -> f64 {
    let arch = toy_arch(points);
    let mut ae = Autoencoder::new(&arch, 11).unwrap();
    let views: Vec<Vec<Point3>> = random_clouds(2, 20, 12).iter().map(|c| ae.encoder_view(c)).collect();
    check_params(&mut ae, Autoencoder::params, Autoencoder::params_mut, |ae, g| {
        let z = ae.encode_graph(g, &views).unwrap();
        ae.decode_graph(g, z).unwrap()
    })
}

pub fn regressor() -> f64 {
    let arch = RegressorArch {
        hidden: vec![7, 5],
        ..RegressorArch::new(6, 3)
    };
    let mut reg = Regressor::new(&arch, 13).unwrap();
    let x = random_tensor(&[4, 6], &mut rng(14));
    check_params(&mut reg, Regressor::params, Regressor::params_mut, |reg, g| {
        let xi = g.input(x.clone());
        reg.forward_graph(g, xi).unwrap()
    })
}

pub type Case = (&'static str, fn() -> f64);

/// Every finite-difference case by name.
pub fn all_cases() -> Vec<Case> {
    vec![
        ("linear", linear_layer),
        ("relu+scale", relu_and_scale),
        ("segment_max", segment_max),
        ("conv_transpose2d", conv_transpose),
        (
            "channels_last+broadcast_add+affine+reshape",
            reshape_channels_last_affine,
        ),
        ("add+sum+external_loss", add_sum_external_loss),
        ("toy autoencoder, conv decoder", || toy_autoencoder(16)),
        ("toy autoencoder, dense decoder", || toy_autoencoder(12)),
        ("regressor", regressor),
    ]
}
