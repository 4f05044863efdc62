//! Finite-difference verification of every differentiable tape operation.

use eadnet_tensor::gradcheck::DEFAULT_STEP;
use eadnet_tensor::{finite_diff_check, Activation, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 100;
const TOLERANCE: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Fixed random projection so the checked scalar depends on every output.
fn project(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = random(&mut rng, t.value(y).shape());
    let c = t.constant(w);
    let p = t.mul(y, c)?;
    Ok(t.sum(p))
}

fn check(
    name: &str,
    build: impl Fn(
        u64,
        &mut ChaCha8Rng,
    ) -> (Tensor<f64>, Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>),
) {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, f) = build(seed, &mut rng);
        let err = finite_diff_check(f, &x, DEFAULT_STEP).unwrap();
        worst = worst.max(err);
    }
    assert!(worst <= TOLERANCE, "{name}: max relative error {worst:e}");
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
    (
        rng.random_range(1..=2),
        rng.random_range(1..=3),
        rng.random_range(3..=8),
        rng.random_range(3..=8),
    )
}

#[test]
fn conv2d_input_weight_bias() {
    for part in 0..3 {
        check("conv2d", move |seed, rng| {
            let (n, cin, h, w) = dims(rng);
            let cout = rng.random_range(1..=3);
            let k = [1, 3][rng.random_range(0..2)];
            let stride = rng.random_range(1..=2);
            let pad = rng.random_range(0..=k / 2 + 1);
            let x = random(rng, &[n, cin, h, w]);
            let wt = random(rng, &[cout, cin, k, k]);
            let b = random(rng, &[cout]);
            let f: Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>> = match part {
                0 => Box::new(move |t, v| {
                    let (wv, bv) = (t.constant(wt.clone()), t.constant(b.clone()));
                    let y = t.conv2d(v, wv, Some(bv), stride, pad)?;
                    project(t, y, seed)
                }),
                1 => Box::new(move |t, v| {
                    let (xv, bv) = (t.constant(x.clone()), t.constant(b.clone()));
                    let y = t.conv2d(xv, v, Some(bv), stride, pad)?;
                    project(t, y, seed)
                }),
                _ => Box::new(move |t, v| {
                    let (xv, wv) = (t.constant(x.clone()), t.constant(wt.clone()));
                    let y = t.conv2d(xv, wv, Some(v), stride, pad)?;
                    project(t, y, seed)
                }),
            };
            let point = match part {
                0 => random(&mut ChaCha8Rng::seed_from_u64(seed + 1000), &[n, cin, h, w]),
                1 => random(
                    &mut ChaCha8Rng::seed_from_u64(seed + 2000),
                    &[cout, cin, k, k],
                ),
                _ => random(&mut ChaCha8Rng::seed_from_u64(seed + 3000), &[cout]),
            };
            (point, f)
        });
    }
}

#[test]
fn maxpool2() {
    check("maxpool2", |seed, rng| {
        let (n, c, h, w) = dims(rng);
        let x = random(rng, &[n, c, 2 * (h / 2), 2 * (w / 2)]);
        (
            x,
            Box::new(move |t, v| {
                let y = t.maxpool2(v)?;
                project(t, y, seed)
            }),
        )
    });
}

#[test]
fn pixel_shuffle() {
    check("pixel_shuffle", |seed, rng| {
        let (n, c, h, w) = dims(rng);
        let r = rng.random_range(1..=3);
        let x = random(rng, &[n, c * r * r, h.min(4), w.min(4)]);
        (
            x,
            Box::new(move |t, v| {
                let y = t.pixel_shuffle(v, r)?;
                project(t, y, seed)
            }),
        )
    });
}

#[test]
fn activations() {
    for kind in [
        Activation::Relu,
        Activation::LeakyRelu(0.2),
        Activation::Sigmoid,
        Activation::Tanh,
    ] {
        check("activation", move |seed, rng| {
            let (n, c, h, w) = dims(rng);
            let x = random(rng, &[n, c, h, w]);
            (
                x,
                Box::new(move |t, v| {
                    let y = t.activation(kind, v);
                    project(t, y, seed)
                }),
            )
        });
    }
}

#[test]
fn upsample_bilinear() {
    check("upsample_bilinear", |seed, rng| {
        let (n, c, h, w) = dims(rng);
        let (oh, ow) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let x = random(rng, &[n, c, h, w]);
        (
            x,
            Box::new(move |t, v| {
                let y = t.upsample_bilinear(v, oh, ow)?;
                project(t, y, seed)
            }),
        )
    });
}

#[test]
fn weight_norm_direction_and_magnitude() {
    for wrt_v in [true, false] {
        check("weight_norm", move |seed, rng| {
            let cout = rng.random_range(1..=4);
            let shape = [cout, rng.random_range(1..=3), 3, 3];
            let v = random(rng, &shape);
            let g = Tensor::from_fn(vec![cout], |_| rng.random_range(0.2..2.0));
            if wrt_v {
                (
                    v,
                    Box::new(move |t, x| {
                        let gv = t.constant(g.clone());
                        let w = t.weight_norm(x, gv)?;
                        project(t, w, seed)
                    }),
                )
            } else {
                (
                    g,
                    Box::new(move |t, x| {
                        let vv = t.constant(v.clone());
                        let w = t.weight_norm(vv, x)?;
                        project(t, w, seed)
                    }),
                )
            }
        });
    }
}

#[test]
fn spectral_normalize() {
    check("spectral_norm", |seed, rng| {
        let cout = rng.random_range(2..=5);
        let w = random(rng, &[cout, 2, 2, 2]);
        let u: Vec<f64> = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();
        (
            w,
            Box::new(move |t, x| {
                let y = t.spectral_normalize(x, &u)?;
                project(t, y, seed)
            }),
        )
    });
}

#[test]
fn elementwise_and_reductions() {
    check("add/sub/mul/affine/mean", |seed, rng| {
        let (n, c, h, w) = dims(rng);
        let x = random(rng, &[n, c, h, w]);
        let other = random(rng, &[n, c, h, w]);
        (
            x,
            Box::new(move |t, v| {
                let o = t.constant(other.clone());
                let a = t.add(v, o)?;
                let b = t.sub(a, v)?;
                let m = t.mul(b, v)?;
                let m = t.mul(m, v)?;
                let s = t.affine(m, -1.5, 0.25);
                let p = project(t, s, seed)?;
                let mean = t.mean(v);
                t.add(p, mean)
            }),
        )
    });
}

#[test]
fn concat_channels() {
    check("concat_channels", |seed, rng| {
        let (n, c, h, w) = dims(rng);
        let other = random(rng, &[n, 2, h, w]);
        let x = random(rng, &[n, c, h, w]);
        (
            x,
            Box::new(move |t, v| {
                let o = t.constant(other.clone());
                let y = t.concat_channels(&[o, v, v])?;
                project(t, y, seed)
            }),
        )
    });
}

#[test]
fn mse_both_arguments() {
    check("mse", |_, rng| {
        let (n, c, h, w) = dims(rng);
        let x = random(rng, &[n, c, h, w]);
        let other = random(rng, &[n, c, h, w]);
        (
            x,
            Box::new(move |t, v| {
                let o = t.constant(other.clone());
                let a = t.mse(v, o)?;
                let b = t.mse(o, v)?;
                t.add(a, b)
            }),
        )
    });
}

#[test]
fn weighted_bce() {
    check("bce", |_, rng| {
        let (n, c, h, w) = dims(rng);
        let p = Tensor::from_fn(vec![n, c, h, w], |_| rng.random_range(0.05..0.95));
        let target = Tensor::from_fn(vec![n, c, h, w], |_| {
            if rng.random_bool(0.3) {
                1.0
            } else {
                0.0
            }
        });
        let beta = rng.random_range(0.1..0.9);
        let pos = target.map(|y| beta * y);
        let neg = target.map(|y| (1.0 - beta) * (1.0 - y));
        (p, Box::new(move |t, v| t.bce(v, &pos, &neg, 1e-8)))
    });
}

#[test]
fn conv_relu_mean_chain() {
    check("conv->relu->mean", |_, rng| {
        let (n, cin, h, w) = dims(rng);
        let wt = random(rng, &[4, cin, 3, 3]);
        let b = random(rng, &[4]);
        let x = random(rng, &[n, cin, h, w]);
        (
            x,
            Box::new(move |t, v| {
                let (wv, bv) = (t.constant(wt.clone()), t.constant(b.clone()));
                let y = t.conv2d(v, wv, Some(bv), 1, 1)?;
                let r = t.relu(y);
                Ok(t.mean(r))
            }),
        )
    });
}
