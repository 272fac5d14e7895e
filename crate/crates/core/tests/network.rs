mod common;

use common::*;
use evmamba_core::autograd::gradcheck::GradCheck;
use evmamba_core::events::VoxelGrid;
use evmamba_core::network::*;
use evmamba_core::optim::{Adam, AdamConfig, CosineSchedule};
use evmamba_core::params::{Conv, ParamStore};
use evmamba_core::{Tape, Tensor};
use proptest::prelude::*;

fn small(levels: usize, w0: usize) -> ModelConfig {
    let widths: Vec<usize> = (0..levels).map(|l| w0 << l).collect();
    ModelConfig { levels, widths, k: vec![3; levels], heads: vec![2; levels], state: 3, bins: 2, ..ModelConfig::default() }
}

fn relu_oracle(t: &Tensor) -> Tensor {
    t.map(|v| v.max(0.0))
}

fn rlfb_oracle(store: &ParamStore, prefix: &str, depth: usize, x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for i in 0..depth {
        y = relu_oracle(&conv_layer_oracle(store, &format!("{prefix}.conv{i}"), &y, 1, 1, 1));
    }
    add_oracle(&y, x)
}

fn conv_count(cin: usize, cout: usize, k: usize) -> usize {
    cin * cout * k * k + cout
}

fn depthwise_count(c: usize, k: usize) -> usize {
    c * k * k + c
}

/// Parameter count summed block by block from the architecture.
fn count_oracle(cfg: &ModelConfig) -> usize {
    let (ci, w) = (cfg.image_channels, &cfg.widths);
    let mut total = conv_count(ci, w[0], 3) + conv_count(cfg.bins, w[0], 3) + conv_count(w[0], ci, 3);
    for lvl in 0..cfg.levels {
        let (c, h, n) = (w[lvl], cfg.heads[lvl], cfg.state);
        let tsam = 2 * conv_count(c, c, 1) + depthwise_count(c, 3) + conv_count(c, 2 * c, 1) + depthwise_count(2 * c, 3) + h;
        let ms = depthwise_count(c, 3) + depthwise_count(c, 5) + depthwise_count(c, 7) + conv_count(c, c, 1);
        let ssm = c * c + c + 3 * c * n + c;
        let gssm = ms + conv_count(c, c, 1) + 2 * c + ssm + conv_count(c, 2 * c, 1) + conv_count(c, c, 1);
        let rlfb = cfg.rlfb_depth * conv_count(c, c, 3);
        total += cfg.blocks_per_level * (tsam + gssm + rlfb);
        if lvl + 1 < cfg.levels {
            let next = w[lvl + 1];
            total += 2 * conv_count(c, next, 3) + conv_count(next, c, 3) + conv_count(2 * c, c, 1) + rlfb;
        }
    }
    total
}

fn inputs(cfg: &ModelConfig, h: usize, w: usize, seed: u64) -> (Tensor, VoxelGrid) {
    let img = rand_t(&[cfg.image_channels, h, w], seed).map(|v| 0.5 + 0.5 * v);
    let vox = VoxelGrid::from_tensor(rand_t(&[cfg.bins, h, w], seed + 1)).unwrap();
    (img, vox)
}

#[test]
fn rlfb_matches_three_block_oracle() {
    for seed in 0..5 {
        let r = Rlfb::new("r", 3, 3);
        let mut store = ParamStore::new();
        r.init(&mut evmamba_core::params::Initializer::new(seed), &mut store).unwrap();
        randomize(&mut store, seed + 10, 0.4);
        let x = rand_t(&[1, 3, 5, 6], seed + 20);
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let y = r.forward(&mut tape, &p, xv).unwrap();
        assert_eq!(tape.value(y).shape(), x.shape());
        assert!(max_abs_diff(tape.value(y).data(), rlfb_oracle(&store, "r", 3, &x).data()) < 1e-12);
    }
}

#[test]
fn unet_shapes_errors_and_determinism() {
    let cfg = small(3, 4);
    let net = Unet::new(cfg.clone()).unwrap();
    let mut params = net.init(5).unwrap();
    randomize(&mut params, 6, 0.3);
    let (img, vox) = inputs(&cfg, 8, 12, 7);
    let a = net.restore(&params, &img, &vox).unwrap();
    let b = net.restore(&params, &img, &vox).unwrap();
    assert_eq!(a.shape(), img.shape());
    assert!(a.bit_eq(&b));
    assert!(!a.bit_eq(&img));

    let (img30, vox30) = inputs(&cfg, 30, 32, 8);
    assert!(net.restore(&params, &img30, &vox30).is_err());
    let (_, vox_other) = inputs(&cfg, 8, 8, 9);
    assert!(net.restore(&params, &img, &vox_other).is_err());

    let colour = ModelConfig { image_channels: 3, ..small(2, 4) };
    let net3 = Unet::new(colour.clone()).unwrap();
    let (img3, vox3) = inputs(&colour, 4, 4, 10);
    assert_eq!(net3.restore(&net3.init(1).unwrap(), &img3, &vox3).unwrap().shape(), &[3, 4, 4]);
}

#[test]
fn same_seed_gives_identical_parameters() {
    let net = Unet::new(small(2, 4)).unwrap();
    assert_eq!(net.init(11).unwrap(), net.init(11).unwrap());
    assert_ne!(net.init(11).unwrap(), net.init(12).unwrap());
}

#[test]
fn all_zero_weights_make_the_network_the_identity() {
    let cfg = small(2, 4);
    let net = Unet::new(cfg.clone()).unwrap();
    let mut params = net.init(13).unwrap();
    params.tensors_mut().values_mut().for_each(|t| *t = Tensor::zeros(t.shape()));
    let (img, vox) = inputs(&cfg, 8, 8, 14);
    assert!(net.restore(&params, &img, &vox).unwrap().bit_eq(&img));
}

#[test]
fn l1_loss_examples_and_oracle() {
    let mut tape = Tape::new();
    let a = rand_t(&[3, 4, 5], 15);
    let b = rand_t(&[3, 4, 5], 16);
    let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let same = l1_loss(&mut tape, av, av).unwrap();
    assert_eq!(tape.value(same).item().unwrap(), 0.0);
    let l = l1_loss(&mut tape, av, bv).unwrap();
    let expect = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.numel() as f64;
    assert!((tape.value(l).item().unwrap() - expect).abs() < 1e-12);
}

#[test]
fn param_count_examples() {
    let mut store = ParamStore::new();
    Conv::new("c", 2, 4, 3).init(&mut evmamba_core::params::Initializer::new(0), &mut store).unwrap();
    assert_eq!(param_count(&store), 76);

    for cfg in [small(1, 4), small(2, 4), small(3, 8), ModelConfig::default()] {
        let net = Unet::new(cfg.clone()).unwrap();
        let params = net.init(0).unwrap();
        let summed: usize = params.tensors().values().map(|t| t.numel()).sum();
        assert_eq!(param_count(&params), summed);
        assert_eq!(param_count(&params), count_oracle(&cfg));
    }
}

#[test]
fn per_channel_parameters_double_with_width() {
    // Depthwise filters, norms and biases grow linearly in width; channel
    // mixing weights grow quadratically.
    for c in [2usize, 4, 8] {
        let count = |c: usize| {
            let mut s = ParamStore::new();
            Conv::depthwise("d", c, 5).init(&mut evmamba_core::params::Initializer::new(0), &mut s).unwrap();
            param_count(&s)
        };
        assert_eq!(count(2 * c), 2 * count(c));
        assert_eq!(count(c), depthwise_count(c, 5));
    }
}

#[test]
fn checkpoint_roundtrip_is_exact() {
    let cfg = small(2, 4);
    let net = Unet::new(cfg.clone()).unwrap();
    let mut params = net.init(17).unwrap();
    randomize(&mut params, 18, 1.0);
    let mut optimizer = Adam::new(AdamConfig::default(), CosineSchedule { initial: 1e-3, minimum: 1e-6, total_steps: 10 });
    let grads = params.tensors().iter().map(|(n, t)| (n.clone(), t.map(|v| v * 0.1 + 0.01))).collect();
    optimizer.step(params.tensors_mut(), &grads).unwrap();
    let ck = Checkpoint { config: cfg, params, optimizer, seed: 17, run_config: Some("steps = 3\n".into()) };
    ck.check_compatible(&net).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.step(), 1);
    assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());

    let mut bytes = ck.to_bytes().unwrap();
    bytes[0] = b'X';
    assert!(Checkpoint::from_bytes(&bytes).is_err());
    let bytes = ck.to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let other = Unet::new(small(1, 4)).unwrap();
    assert!(ck.check_compatible(&other).is_err());
}

#[test]
fn end_to_end_gradient_check() {
    let cfg = ModelConfig { state: 2, ..ModelConfig::single_level(4) };
    let net = Unet::new(cfg.clone()).unwrap();
    let mut params = net.init(19).unwrap();
    randomize(&mut params, 20, 0.3);
    let (img, vox) = inputs(&cfg, 8, 8, 21);
    let img = img.reshape(&[1, 1, 8, 8]).unwrap();
    let vox = vox.data.reshape(&[1, cfg.bins, 8, 8]).unwrap();
    let target = rand_t(&[1, 1, 8, 8], 22);
    // Piecewise smooth through top-k and ReLU: small step, floor for its rounding noise.
    let opts = GradCheck { eps: 1e-6, floor: 1e-4, ..GradCheck::default() };
    let report = check_module(&params, &[img, vox], opts, |tape, p, v| {
        let y = net.forward(tape, p, v[0], v[1])?;
        let t = tape.constant(target.clone());
        let d = tape.sub(y, t)?;
        let sq = tape.mul(d, d)?;
        Ok(tape.sum(sq))
    });
    assert!(report.max_rel_err < 1e-3, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn param_count_is_invariant_under_k(levels in 1usize..4, k in proptest::collection::vec(1usize..64, 3)) {
        let cfg = small(levels, 4);
        let base = param_count(&Unet::new(cfg.clone()).unwrap().init(0).unwrap());
        let varied = ModelConfig { k: k[..levels].to_vec(), ..cfg };
        prop_assert_eq!(param_count(&Unet::new(varied).unwrap().init(0).unwrap()), base);
    }
}
