mod common;

use common::{checks, rng, CheckReport, STEP};
use hvmunet::autograd::Parameterized;
use hvmunet::training::LossSpec;
use ndarray::{Array3, Array4};
use rand::Rng;

#[test]
fn s6_sum_gradient_matches_differences() {
    checks::s6().assert_ok("s6");
}

#[test]
fn local_ss2d_gradient_matches_differences() {
    checks::local_ss2d().assert_ok("local_ss2d");
}

#[test]
fn h_ss2d_orders_one_to_three() {
    for order in 1..=3 {
        checks::h_ss2d(order).assert_ok(&format!("h_ss2d order {order}"));
    }
}

#[test]
fn h_vss_block_gradient_on_1x4x4x4() {
    for order in 1..=3 {
        checks::h_vss_block(order).assert_ok(&format!("h_vss_block order {order}"));
    }
}

#[test]
fn group_norm_gradient() {
    for (channels, seed) in [(4, 40), (8, 41), (6, 42)] {
        checks::group_norm(channels, seed).assert_ok(&format!("group_norm C={channels}"));
    }
}

#[test]
fn loss_gradient_on_1x4x8x8() {
    for (ce, dice) in checks::LOSS_WEIGHTS {
        checks::loss(ce, dice).assert_ok(&format!("loss ({ce}, {dice})"));
    }
}

#[test]
fn whole_model_loss_gradient_on_sampled_entries() {
    // pooling, upsampling, bridges and the head are only exercised here
    let mut model = hvmunet::model::build_model(hvmunet::model::ModelConfig::reduced(), 3).unwrap();
    let mut r = rng(31);
    let x = Array4::from_shape_fn((1, 3, 32, 32), |_| r.gen_range(0.0..1.0));
    let t = Array3::from_shape_fn((1, 32, 32), |_| r.gen_range(0..4u8));
    let spec = LossSpec {
        ce_weight: 1.0,
        dice_weight: 1.0,
        class_weights: vec![0.5, 1.5, 1.0, 1.0],
        dice_channels: vec![0, 1, 2, 3],
    };
    let loss = |m: &hvmunet::model::Model| {
        let mut g = hvmunet::autograd::Graph::inference();
        let xv = g.constant(x.clone().into_dyn());
        let out = m.forward_graph(&mut g, xv).unwrap();
        hvmunet::training::loss_op(&mut g, out.logits, &t, &spec).unwrap().1.total
    };
    let (_, grads) = hvmunet::training::loss_and_param_grads(&model, x.clone(), &t, &spec).unwrap();

    let mut names = Vec::new();
    model.visit_params(&mut |p| names.push((p.name.clone(), p.numel())));
    let mut report = CheckReport::default();
    for (name, numel) in names {
        for _ in 0..numel.min(2) {
            let i = r.gen_range(0..numel);
            let orig = common::get(&model, &name, i);
            common::set(&mut model, &name, i, orig + STEP);
            let up = loss(&model);
            common::set(&mut model, &name, i, orig - STEP);
            let down = loss(&model);
            common::set(&mut model, &name, i, orig);
            let a = grads.get(&name).map_or(0.0, |g| g.as_slice().unwrap()[i]);
            report.record(format!("{name}[{i}]"), a, (up - down) / (2.0 * STEP));
        }
    }
    report.assert_ok("model");
}
