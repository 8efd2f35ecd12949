mod common;

use common::rng;
use hvmunet::autograd::{ForwardHooks, Param};
use hvmunet::selective_scan::{
    h_ss2d, local_ss2d, local_ss2d_with_hooks, scan_expand, scan_merge, HSs2d, HSs2dConfig, LocalSs2d, S6Params,
};
use hvmunet::Error;
use ndarray::{s, Array2, Array3, IxDyn};
use proptest::prelude::*;
use rand::Rng;

fn map_strategy() -> impl Strategy<Value = Array3<f64>> {
    (1usize..=16, 1usize..=16, 1usize..=8, any::<u64>()).prop_map(|(h, w, c, seed)| {
        let mut r = rng(seed);
        Array3::from_shape_fn((h, w, c), |_| r.gen_range(-1e3..1e3))
    })
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn merge_of_expand_is_bitwise_identity(x in map_strategy()) {
        let back = scan_merge(&scan_expand(x.view()).unwrap()).unwrap();
        prop_assert_eq!(bits(back.as_slice().unwrap()), bits(x.as_slice().unwrap()));
    }

    #[test]
    fn every_sequence_permutes_the_pixels(x in map_strategy()) {
        let (h, w, c) = x.dim();
        let mut pixels: Vec<Vec<u64>> = (0..h * w)
            .map(|p| bits(x.slice(s![p / w, p % w, ..]).to_vec().as_slice()))
            .collect();
        pixels.sort();
        for seq in scan_expand(x.view()).unwrap() {
            prop_assert_eq!(seq.len(), h * w);
            prop_assert_eq!(seq.channels(), c);
            let mut rows: Vec<Vec<u64>> = seq.values.rows().into_iter().map(|r| bits(&r.to_vec())).collect();
            rows.sort();
            prop_assert_eq!(&rows, &pixels);
        }
    }

    #[test]
    fn s6_is_causal(seed in any::<u64>(), t in 0usize..8, bump in -5.0f64..5.0) {
        let mut r = rng(seed);
        let p = S6Params::init("s6", 3, 4, &mut r);
        let x = Array2::from_shape_fn((8, 3), |_| r.gen_range(-2.0..2.0));
        let mut x2 = x.clone();
        x2[[t, r.gen_range(0..3)]] += bump;
        let (y, _) = p.forward(x.view()).unwrap();
        let (y2, _) = p.forward(x2.view()).unwrap();
        for s in 0..t {
            prop_assert_eq!(bits(&y.row(s).to_vec()), bits(&y2.row(s).to_vec()));
        }
    }

    #[test]
    fn discretized_decay_is_contractive(
        a_log in prop::collection::vec(-5.0f64..5.0, 1..8),
        delta in 1e-3f64..10.0,
    ) {
        let mut r = rng(0);
        let mut p = S6Params::init("s6", 2, a_log.len(), &mut r);
        p.a_log = Param::new("s6.a_log", ndarray::Array1::from(a_log).into_dyn());
        for a in p.a() {
            prop_assert!(a < 0.0);
            let a_bar = (delta * a).exp();
            prop_assert!((0.0..1.0).contains(&a_bar), "exp({delta} * {a}) = {a_bar}");
        }
    }
}

fn random_map(h: usize, w: usize, c: usize, seed: u64) -> Array3<f64> {
    let mut r = rng(seed);
    Array3::from_shape_fn((h, w, c), |_| r.gen_range(-1.0..1.0))
}

fn identity_kernel(m: &mut LocalSs2d) {
    let k = m.kernel();
    m.conv_weight.value.fill(0.0);
    for c in 0..m.channels() / 2 {
        m.conv_weight.value[IxDyn(&[c, 0, k / 2, k / 2])] = 1.0;
    }
    m.conv_bias.value.fill(0.0);
}

#[test]
fn local_ss2d_identity_composition() {
    let cfg = HSs2dConfig::new(1, 4);
    let mut m = LocalSs2d::init("loc", 4, 3, 8, &mut rng(1)).unwrap();
    identity_kernel(&mut m);
    let x = random_map(5, 7, 4, 2);
    let hooks = ForwardHooks {
        s6_passthrough: true,
        ..Default::default()
    };
    let y = local_ss2d_with_hooks(x.view(), &cfg, &m, hooks).unwrap();
    assert_eq!(y, x);
}

#[test]
fn local_ss2d_shape_and_split_independence() {
    let cfg = HSs2dConfig::new(1, 4);
    let m = LocalSs2d::init("loc", 4, 3, 8, &mut rng(3)).unwrap();
    let x = random_map(8, 8, 4, 4);
    let y = local_ss2d(x.view(), &cfg, &m).unwrap();
    assert_eq!(y.dim(), (8, 8, 4));
    let mut x2 = x.clone();
    x2.slice_mut(s![.., .., 2..]).fill(0.0);
    let y2 = local_ss2d(x2.view(), &cfg, &m).unwrap();
    assert_eq!(y.slice(s![.., .., ..2]), y2.slice(s![.., .., ..2]));
    assert_ne!(y.slice(s![.., .., 2..]), y2.slice(s![.., .., 2..]));
}

#[test]
fn local_ss2d_rejects_odd_channels() {
    let cfg = HSs2dConfig::new(1, 3);
    let m = LocalSs2d::init("loc", 4, 3, 8, &mut rng(3)).unwrap();
    let x = random_map(4, 4, 3, 5);
    assert!(matches!(local_ss2d(x.view(), &cfg, &m), Err(Error::OddChannelSplit(3))));
    assert!(matches!(LocalSs2d::init("loc", 5, 3, 8, &mut rng(3)), Err(Error::OddChannelSplit(5))));
}

#[test]
fn order_one_is_local_ss2d() {
    let cfg = HSs2dConfig::new(1, 4);
    let h = HSs2d::init("hss", cfg.clone(), &mut rng(6)).unwrap();
    let x = random_map(6, 5, 4, 7);
    assert_eq!(h_ss2d(x.view(), &cfg, &h).unwrap(), local_ss2d(x.view(), &cfg, &h.base).unwrap());
}

#[test]
fn unit_gate_and_identity_body_reduce_to_projection() {
    let cfg = HSs2dConfig::new(2, 4);
    let mut h = HSs2d::init("hss", cfg.clone(), &mut rng(8)).unwrap();
    let top = &mut h.levels[0];
    top.gate_w.value.fill(0.0);
    top.gate_b.value.fill(1.0);
    top.body_w.value.fill(0.0);
    for c in 0..4 {
        top.body_w.value[IxDyn(&[c, c, 0, 0])] = 1.0;
    }
    top.body_b.value.fill(0.0);
    top.out_b.value = ndarray::Array1::from(vec![0.1, -0.2, 0.3, 0.0]).into_dyn();

    let x = random_map(4, 6, 4, 9);
    let y = h_ss2d(x.view(), &cfg, &h).unwrap();
    let base = local_ss2d(x.view(), &HSs2dConfig::new(1, 4), &h.base).unwrap();
    let top = &h.levels[0];
    for ((r, q, c), &v) in y.indexed_iter() {
        let mut want = top.out_b.value[IxDyn(&[c])];
        for k in 0..4 {
            want += top.out_w.value[IxDyn(&[c, k, 0, 0])] * base[[r, q, k]];
        }
        assert!((v - want).abs() < 1e-12, "({r},{q},{c}): {v} vs {want}");
    }
}

#[test]
fn order_five_preserves_shape_and_range_is_checked() {
    let cfg = HSs2dConfig::new(5, 8);
    let h = HSs2d::init("hss", cfg.clone(), &mut rng(10)).unwrap();
    assert_eq!(h.order(), 5);
    let y = h_ss2d(random_map(8, 8, 8, 11).view(), &cfg, &h).unwrap();
    assert_eq!(y.dim(), (8, 8, 8));
    assert!(y.iter().all(|v| v.is_finite()));
    for bad in [0, 6] {
        assert!(matches!(
            HSs2d::init("hss", HSs2dConfig::new(bad, 8), &mut rng(0)),
            Err(Error::OrderOutOfRange(o)) if o == bad
        ));
    }
}
