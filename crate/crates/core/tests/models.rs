//! Structural properties of the networks: parameter counts, identities that
//! hold for particular weights, spectral normalization and variant slicing.

use eadnet::io::Checkpoint;
use eadnet::models::{DeblurNet, DeblurNetConfig, Discriminator, EdgeNet, EdgeNetVariant};
use eadnet::tensor::{Tape, Tensor};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EDGENET_FULL_PARAMS: usize = 14_716_171;
const EDGENET_REDUCED1_PARAMS: usize = 38_785;
const DEBLURNET_DEFAULT_PARAMS: usize = 8_115_980;

fn random_image(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(0.0..1.0))
}

#[test]
fn edgenet_parameter_counts() {
    let full = EdgeNet::<f32>::build(EdgeNetVariant::Full, 0).unwrap();
    assert_eq!(full.param_count(), EDGENET_FULL_PARAMS);
    let r1 = EdgeNet::<f32>::build(EdgeNetVariant::Reduced(1), 0).unwrap();
    assert_eq!(r1.param_count(), EDGENET_REDUCED1_PARAMS);
    // The deepest reduced variant lacks the other four sides and the fuse.
    let r5 = EdgeNet::<f32>::build(EdgeNetVariant::Reduced(5), 0).unwrap();
    let other_sides = [128, 256, 512].iter().map(|c| c + 1).sum::<usize>() + 65;
    assert_eq!(r5.param_count() + other_sides + 6, EDGENET_FULL_PARAMS);
    assert_eq!(format!("{:.2}", EDGENET_FULL_PARAMS as f64 / 1e6), "14.72");
    assert_eq!(
        format!("{:.2}", EDGENET_REDUCED1_PARAMS as f64 / 1e6),
        "0.04"
    );
}

#[test]
fn deblurnet_default_parameter_count() {
    let net = DeblurNet::<f32>::build(DeblurNetConfig::default(), 0).unwrap();
    assert_eq!(net.param_count(), DEBLURNET_DEFAULT_PARAMS);
    assert!((7_000_000..=10_000_000).contains(&net.param_count()));
}

#[test]
fn discriminator_parameter_count() {
    let d = Discriminator::<f32>::build(0).unwrap();
    let expected: usize = [(1, 64), (64, 128), (128, 256), (256, 512), (512, 1)]
        .iter()
        .map(|&(i, o)| i * o * 16 + o)
        .sum();
    assert_eq!(d.param_count(), expected);
}

fn tiny_deblur(blocks: usize) -> DeblurNetConfig {
    DeblurNetConfig {
        base_channels: 8,
        down_channels: [8, 12],
        n_res_blocks: blocks,
        expand_ratio: 2,
        lowrank_channels: 6,
        head_kernel: 5,
        ..DeblurNetConfig::default()
    }
}

fn zero_layer(net: &mut DeblurNet<f64>, layer: &str) {
    for suffix in ["weight_g", "bias"] {
        let name = format!("{layer}.{suffix}");
        let shape = net.params().get(&name).unwrap().shape().to_vec();
        net.params_mut().set(&name, Tensor::zeros(shape)).unwrap();
    }
}

#[test]
fn zeroed_residual_blocks_are_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut deep = DeblurNet::<f64>::build(tiny_deblur(4), 11).unwrap();
    for i in 0..4 {
        zero_layer(&mut deep, &format!("res{i}.conv"));
    }
    // The same weights without any residual block.
    let mut shallow = DeblurNet::<f64>::build(tiny_deblur(0), 99).unwrap();
    shallow
        .params_mut()
        .load_from(&deep.params().named_tensors())
        .unwrap();
    let x = Tensor::from_fn(vec![2, 4, 12, 16], |_| rng.random_range(-1.0..1.0));
    assert_eq!(deep.predict(&x).unwrap(), shallow.predict(&x).unwrap());
}

#[test]
fn zeroed_high_branch_leaves_the_low_branch() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut net = DeblurNet::<f64>::build(tiny_deblur(2), 5).unwrap();
    zero_layer(&mut net, "out_high");
    let x = Tensor::from_fn(vec![1, 4, 8, 8], |_| rng.random_range(-1.0..1.0));
    let mut tape = Tape::new();
    let bound = net.params().bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let head = net
        .params()
        .apply_conv(&mut tape, &bound, "head", xv)
        .unwrap();
    let head = tape.relu(head);
    let low = net
        .params()
        .apply_conv(&mut tape, &bound, "out_low", head)
        .unwrap();
    let want = tape.tanh(low);
    assert_eq!(&net.predict(&x).unwrap(), tape.value(want));
}

#[test]
fn discriminator_layers_have_unit_spectral_norm() {
    let d = Discriminator::<f64>::build(17).unwrap();
    for name in d.layer_names() {
        let w = d.params().effective_weight(&name).unwrap();
        let rows = w.shape()[0];
        let cols = w.len() / rows;
        let m = DMatrix::from_row_slice(rows, cols, w.data());
        let sigma = m.singular_values().max();
        assert!(sigma <= 1.05, "{name}: largest singular value {sigma}");
        assert!(sigma >= 0.9, "{name}: largest singular value {sigma}");
    }
}

#[test]
fn full_checkpoint_sliced_into_reduced_variants_is_bit_exact() {
    let full = EdgeNet::<f32>::build(EdgeNetVariant::Full, 21).unwrap();
    let ckpt = Checkpoint::from_bytes(&Checkpoint::from_params(full.params()).to_bytes()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for k in [1, 3, 5] {
        // A different seed, so agreement comes from the loaded weights.
        let mut reduced = EdgeNet::<f32>::build(EdgeNetVariant::Reduced(k), 1234).unwrap();
        ckpt.load_into(reduced.params_mut()).unwrap();
        for _ in 0..if k == 1 { 10 } else { 2 } {
            let x = random_image(&mut rng, &[1, 3, 32, 48]);
            let (full_sides, _) = full.predict(&x).unwrap();
            let (sides, fuse) = reduced.predict(&x).unwrap();
            assert!(fuse.is_none());
            assert_eq!(sides.len(), 1);
            assert_eq!(sides[0], full_sides[k - 1], "side {k}");
        }
    }
}

#[test]
fn edgenet_outputs_are_probability_maps() {
    let net = EdgeNet::<f32>::build(EdgeNetVariant::Full, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_image(&mut rng, &[2, 3, 32, 32]);
    let (sides, fuse) = net.predict(&x).unwrap();
    assert_eq!(sides.len(), 5);
    for m in sides.iter().chain(fuse.iter()) {
        assert_eq!(m.shape(), &[2, 1, 32, 32]);
        assert!(m.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }
    assert!(net
        .predict(&random_image(&mut rng, &[1, 3, 24, 32]))
        .is_err());
}

#[test]
fn same_seed_same_network() {
    let a = DeblurNet::<f32>::build(tiny_deblur(2), 7).unwrap();
    let b = DeblurNet::<f32>::build(tiny_deblur(2), 7).unwrap();
    let c = DeblurNet::<f32>::build(tiny_deblur(2), 8).unwrap();
    assert_eq!(a.params().named_tensors(), b.params().named_tensors());
    assert_ne!(a.params().named_tensors(), c.params().named_tensors());
}
