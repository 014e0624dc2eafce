//! Training through the simulator on synthetic data.

use ldp_core::autodiff::{Tape, Var};
use ldp_core::controllers::{RodNet, ROD_STEP_UNIT};
use ldp_core::ipm::{GeneralizedForce, IpmState, IpmVelocity};
use ldp_core::models::{Models, ParamGroup};
use ldp_core::training::{single_agent_templates, synth_dataset, train, train_staged, TrainConfig};

/// A rod net computing exactly `Δl = −0.001·θ̇` while `θ̇ > −10` rad/s.
fn rod_oracle() -> Models {
    let mut m = Models::new(0).with_mu(1.0).unwrap();
    let layers = &mut m.rod_net.mlp.layers;
    for layer in layers.iter_mut() {
        layer.weight.values_mut().fill(0.0);
        layer.bias.values_mut().fill(0.0);
    }
    let inputs = layers[0].weight.shape()[1];
    // h₁[0] = ELU(θ̇ + 10) = θ̇ + 10, h₂[0] = ELU(h₁[0]) = θ̇ + 10.
    layers[0].weight.values_mut()[4] = 1.0;
    layers[0].bias.values_mut()[0] = 10.0;
    layers[1].weight.values_mut()[0] = 1.0;
    // out = −(θ̇ + 10) + 10 = −θ̇, in units of ROD_STEP_UNIT.
    let k = -0.001 / ROD_STEP_UNIT;
    layers[2].weight.values_mut()[0] = k;
    layers[2].bias.values_mut()[0] = -10.0 * k;
    assert_eq!(inputs, 12);
    m
}

fn predicted_dl(net: &RodNet, theta_dot: f64) -> f64 {
    let tape = Tape::inert();
    let state = IpmState::default().lift();
    let vel = IpmVelocity {
        theta: theta_dot,
        ..Default::default()
    }
    .lift();
    let feats = RodNet::features(
        &state,
        &vel,
        &GeneralizedForce::zero(),
        Var::constant(70.0),
        Var::constant(0.9),
    );
    net.mlp.forward(&tape, &feats).unwrap()[0].value() * ROD_STEP_UNIT
}

#[test]
fn rod_oracle_is_exact() {
    let oracle = rod_oracle();
    for td in [-2.0, -0.3, 0.0, 0.7, 3.0] {
        let dl = predicted_dl(&oracle.rod_net, td);
        assert!((dl + 0.001 * td).abs() < 1e-15, "{td}: {dl}");
    }
}

/// Learning only the rod net on data whose rod length follows
/// `Δl* = −0.001·θ̇` recovers a negative correlation with θ̇.
#[test]
fn rod_net_recovers_sign_of_length_correlation() {
    let ds = synth_dataset(&rod_oracle(), &single_agent_templates(6, 60, 4), 4).unwrap();
    assert_eq!(ds.len(), 6);
    let config = TrainConfig {
        lr: 3e-3,
        epochs: 20,
        lambda: 0.0,
        frozen: [
            ParamGroup::Friction,
            ParamGroup::SelfNet,
            ParamGroup::InteractionNet,
        ]
        .into(),
        ..Default::default()
    };
    let report = train(&ds, Models::new(0), &config, &mut |_| {}).unwrap();
    let first = report.steps[0].loss;
    let last = report.steps.last().unwrap().loss;
    assert!(last < first, "loss {first} -> {last}");
    let net = &report.models.rod_net;
    let xs = [-1.5, -1.0, -0.5, 0.5, 1.0, 1.5];
    let ys: Vec<f64> = xs.iter().map(|&x| predicted_dl(net, x)).collect();
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| x * (y - mean)).sum();
    assert!(cov < 0.0, "Δl vs θ̇: {ys:?}");
}

#[test]
fn identical_seeds_give_identical_loss_curves() {
    let oracle = Models::new(0).with_mu(1.6).unwrap();
    let ds = synth_dataset(&oracle, &single_agent_templates(4, 30, 8), 8).unwrap();
    let config = TrainConfig {
        lr: 0.01,
        epochs: 2,
        seed: 5,
        ..Default::default()
    };
    let run = || train(&ds, Models::new(5), &config, &mut |_| {}).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.steps, b.steps);
    assert_eq!(a.models.weights_hash(), b.models.weights_hash());
}

#[test]
fn staged_training_keeps_first_stage_frozen() {
    let oracle = Models::new(0).with_mu(1.5).unwrap();
    let single = synth_dataset(&oracle, &single_agent_templates(2, 20, 1), 1).unwrap();
    let mut pair = ldp_core::gradcheck::end_to_end_scene();
    pair.horizon = 20;
    let multi = synth_dataset(&oracle, &[pair], 1).unwrap();
    let config = TrainConfig {
        lr: 0.01,
        ..Default::default()
    };
    let (s1, s2) = train_staged(
        &single,
        &multi,
        Models::new(0),
        &config,
        true,
        &mut |_, _| {},
    )
    .unwrap();
    for g in [
        ParamGroup::Friction,
        ParamGroup::SelfNet,
        ParamGroup::RodNet,
    ] {
        let a: Vec<_> = s1
            .models
            .group_params(g)
            .iter()
            .map(|p| p.values().to_vec())
            .collect();
        let b: Vec<_> = s2
            .models
            .group_params(g)
            .iter()
            .map(|p| p.values().to_vec())
            .collect();
        assert_eq!(a, b, "{g:?} changed in stage 2");
    }
    let before = Models::new(0);
    let moved = s2
        .models
        .group_params(ParamGroup::InteractionNet)
        .iter()
        .zip(before.group_params(ParamGroup::InteractionNet))
        .any(|(a, b)| a.values() != b.values());
    assert!(moved, "interaction net did not train");
    assert!(s1.models.mu() != 1.0);
}
