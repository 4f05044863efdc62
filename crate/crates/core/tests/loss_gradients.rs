//! Finite-difference verification of every composite loss, in f64.

use eadnet::losses::{
    adv_d_loss, adv_g_loss, cbce, edge_loss_phase1, edge_loss_phase2, perceptual_loss, pixel_loss,
    to_unit_range, total_phase1, total_phase2, DEFAULT_ALPHA, DEFAULT_EPS,
};
use eadnet::models::{
    ConvFeatures, DeblurNet, DeblurNetConfig, EdgeNet, EdgeNetVariant, IdentityFeatures,
};
use eadnet::tensor::gradcheck::DEFAULT_STEP;
use eadnet::tensor::{finite_diff_check_refined, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 100;
const TOLERANCE: f64 = 1e-4;
/// Coordinates whose stencil straddles a ReLU or max-pool switch are
/// retried with smaller steps.
const STEPS: [f64; 3] = [DEFAULT_STEP, DEFAULT_STEP * 1e-1, DEFAULT_STEP * 1e-2];

type Loss = Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

fn binary(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(
        shape.to_vec(),
        |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 },
    )
}

fn image_shape(rng: &mut ChaCha8Rng, channels: usize) -> Vec<usize> {
    vec![
        rng.random_range(1..=2),
        channels,
        rng.random_range(2..=8),
        rng.random_range(2..=8),
    ]
}

fn check_seeds(name: &str, seeds: u64, build: impl Fn(&mut ChaCha8Rng) -> (Tensor<f64>, Loss)) {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, f) = build(&mut rng);
        worst = worst.max(finite_diff_check_refined(f, &x, &STEPS, TOLERANCE).unwrap());
    }
    assert!(worst <= TOLERANCE, "{name}: max relative error {worst:e}");
}

fn check(name: &str, build: impl Fn(&mut ChaCha8Rng) -> (Tensor<f64>, Loss)) {
    check_seeds(name, SEEDS, build)
}

/// Logits are the checked input; probabilities stay away from the clamp.
#[test]
fn cbce_wrt_logits() {
    check("cbce", |rng| {
        let shape = image_shape(rng, 1);
        let logits = uniform(rng, &shape, -3.0, 3.0);
        let target = binary(rng, &shape);
        (
            logits,
            Box::new(move |t, v| {
                let p = t.sigmoid(v);
                Ok(cbce(t, p, &target, DEFAULT_EPS).unwrap())
            }),
        )
    });
}

#[test]
fn edge_loss_phase1_over_several_maps() {
    check("edge_loss_phase1", |rng| {
        let shape = image_shape(rng, 1);
        let maps: Vec<(f64, f64)> = (0..rng.random_range(1..=6))
            .map(|_| (rng.random_range(0.5..2.0), rng.random_range(-1.0..1.0)))
            .collect();
        let logits = uniform(rng, &shape, -2.0, 2.0);
        let target = binary(rng, &shape);
        (
            logits,
            Box::new(move |t, v| {
                // Every side output is a different squashing of the same logits.
                let outs: Vec<Var> = maps
                    .iter()
                    .map(|&(a, b)| {
                        let z = t.affine(v, a, b);
                        t.sigmoid(z)
                    })
                    .collect();
                Ok(edge_loss_phase1(t, &outs, &target, DEFAULT_EPS).unwrap())
            }),
        )
    });
}

#[test]
fn adversarial_losses() {
    check("adv_g_loss", |rng| {
        let shape = image_shape(rng, 1);
        let logits = uniform(rng, &shape, -3.0, 3.0);
        (
            logits,
            Box::new(|t, v| {
                let d = t.sigmoid(v);
                Ok(adv_g_loss(t, d, DEFAULT_EPS).unwrap())
            }),
        )
    });
    check("adv_d_loss", |rng| {
        let shape = image_shape(rng, 1);
        let logits = uniform(rng, &shape, -3.0, 3.0);
        let real_logits = uniform(rng, &shape, -3.0, 3.0);
        (
            logits,
            Box::new(move |t, v| {
                // The input feeds both branches, real through a fixed shift.
                let fake = t.sigmoid(v);
                let shift = t.constant(real_logits.clone());
                let r = t.add(v, shift)?;
                let real = t.sigmoid(r);
                Ok(adv_d_loss(t, real, fake, DEFAULT_EPS).unwrap())
            }),
        )
    });
}

#[test]
fn pixel_and_perceptual() {
    check("pixel_loss", |rng| {
        let shape = image_shape(rng, 3);
        let x = uniform(rng, &shape, -1.0, 1.0);
        let target = uniform(rng, &shape, -1.0, 1.0);
        (
            x,
            Box::new(move |t, v| {
                let y = t.constant(target.clone());
                Ok(pixel_loss(t, v, y).unwrap())
            }),
        )
    });
    for layer in 1..=3 {
        check("perceptual_loss", move |rng| {
            let shape = vec![rng.random_range(1..=2), 3, 8, rng.random_range(4..=8)];
            let x = uniform(rng, &shape, -1.0, 1.0);
            let target = uniform(rng, &shape, -1.0, 1.0);
            let phi = ConvFeatures::<f64>::build(layer, rng.random()).unwrap();
            (
                x,
                Box::new(move |t, v| {
                    let y = t.constant(target.clone());
                    Ok(perceptual_loss(t, &phi, v, y).unwrap())
                }),
            )
        });
    }
}

#[test]
fn edge_loss_phase2_through_frozen_edgenet() {
    // The third side output sits behind two pooling stages and is much more
    // expensive to difference, so it gets fewer seeds.
    for (k, seeds) in [(1, SEEDS), (3, 20)] {
        check_seeds("edge_loss_phase2", seeds, move |rng| {
            let side = if k == 1 {
                rng.random_range(2..=8)
            } else {
                [4, 8][rng.random_range(0..2)]
            };
            let shape = vec![1, 3, side, side];
            let x = uniform(rng, &shape, -1.0, 1.0);
            let target_img = uniform(rng, &shape, 0.0, 1.0);
            let net = EdgeNet::<f64>::build(EdgeNetVariant::Reduced(k), rng.random()).unwrap();
            (
                x,
                Box::new(move |t, v| {
                    let bound = net.params().bind(t, false);
                    let unit = to_unit_range(t, v);
                    Ok(edge_loss_phase2(
                        t,
                        &net,
                        &bound,
                        &target_img,
                        unit,
                        &DEFAULT_ALPHA,
                        0.5,
                        DEFAULT_EPS,
                    )
                    .unwrap())
                }),
            )
        });
    }
}

#[test]
fn phase_totals() {
    check("total_phase1", |rng| {
        let shape = image_shape(rng, 1);
        let logits = uniform(rng, &shape, -3.0, 3.0);
        let target = binary(rng, &shape);
        let lambda = rng.random_range(0.0..1.0);
        (
            logits,
            Box::new(move |t, v| {
                let p = t.sigmoid(v);
                let e = edge_loss_phase1(t, &[p], &target, DEFAULT_EPS).unwrap();
                let a = adv_g_loss(t, p, DEFAULT_EPS).unwrap();
                Ok(total_phase1(t, e, a, lambda).unwrap())
            }),
        )
    });
    check("total_phase2", |rng| {
        let shape = vec![1, 3, 4, 4];
        let x = uniform(rng, &shape, -1.0, 1.0);
        let target = uniform(rng, &shape, -1.0, 1.0);
        let edge_target = uniform(rng, &shape, 0.0, 1.0);
        let lambdas = [
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
        ];
        let net = EdgeNet::<f64>::build(EdgeNetVariant::Reduced(1), rng.random()).unwrap();
        (
            x,
            Box::new(move |t, v| {
                let y = t.constant(target.clone());
                let p = pixel_loss(t, v, y).unwrap();
                let q = perceptual_loss(t, &IdentityFeatures, v, y).unwrap();
                let bound = net.params().bind(t, false);
                let unit = to_unit_range(t, v);
                let e = edge_loss_phase2(
                    t,
                    &net,
                    &bound,
                    &edge_target,
                    unit,
                    &DEFAULT_ALPHA,
                    0.5,
                    DEFAULT_EPS,
                )
                .unwrap();
                Ok(total_phase2(t, p, q, e, lambdas).unwrap())
            }),
        )
    });
}

fn small_deblur() -> DeblurNetConfig {
    DeblurNetConfig {
        base_channels: 4,
        down_channels: [4, 6],
        n_res_blocks: 2,
        expand_ratio: 2,
        lowrank_channels: 3,
        head_kernel: 3,
        ..DeblurNetConfig::default()
    }
}

fn deblur_pixel(net: DeblurNet<f64>, target: Tensor<f64>) -> Loss {
    Box::new(move |t, v| {
        let bound = net.params().bind(t, false);
        let y = net.forward(t, &bound, v).unwrap();
        let c = t.constant(target.clone());
        Ok(pixel_loss(t, y, c).unwrap())
    })
}

#[test]
fn deblurnet_pixel_loss_wrt_input() {
    check("deblurnet pixel loss", |rng| {
        let (h, w) = (4 * rng.random_range(1..=2), 4 * rng.random_range(1..=2));
        let x = uniform(rng, &[1, 4, h, w], -1.0, 1.0);
        let target = uniform(rng, &[1, 3, h, w], -1.0, 1.0);
        let net = DeblurNet::<f64>::build(small_deblur(), rng.random()).unwrap();
        (x, deblur_pixel(net, target))
    });
}

#[test]
fn default_deblurnet_pixel_loss_on_8x8() {
    // The full-width network is expensive to difference; one seed suffices
    // on top of the 100-seed run of the small configuration.
    check_seeds("default deblurnet pixel loss", 1, |rng| {
        let x = uniform(rng, &[1, 4, 8, 8], -1.0, 1.0);
        let target = uniform(rng, &[1, 3, 8, 8], -1.0, 1.0);
        let net = DeblurNet::<f64>::build(DeblurNetConfig::default(), rng.random()).unwrap();
        (x, deblur_pixel(net, target))
    });
}

/// Gradients with respect to a weight-normalized layer's `v` and `g`, taken
/// through the model's own parameter binding.
#[test]
fn deblurnet_pixel_loss_wrt_parameters() {
    for name in [
        "head.weight_v",
        "res1.conv.weight_g",
        "up2.bias",
        "out_high.weight_v",
    ] {
        check_seeds(name, 20, move |rng| {
            let x = uniform(rng, &[1, 4, 8, 8], -1.0, 1.0);
            let target = uniform(rng, &[1, 3, 8, 8], -1.0, 1.0);
            let net = DeblurNet::<f64>::build(small_deblur(), rng.random()).unwrap();
            let p0 = net.params().get(name).unwrap().clone();
            (
                p0,
                Box::new(move |t, v| {
                    let bound = net.params().bind_with(t, false, &[(name, v)]);
                    let xin = t.constant(x.clone());
                    let y = net.forward(t, &bound, xin).unwrap();
                    let c = t.constant(target.clone());
                    Ok(pixel_loss(t, y, c).unwrap())
                }),
            )
        });
    }
}
