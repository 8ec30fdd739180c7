use super::*;
use crate::data::{filter_by_group, ClassSplit};
use crate::model::{Component, ExpertArch, Gate, GateArch, GateKind, MoeModel, StemArch, Topology};
use crate::tensor::{Param, Rng};

/// Easy synthetic task on 28×28 images: class `c` lights up a bar of rows
/// starting at `2c`, on top of uniform noise.
pub(crate) fn toy_dataset(n: usize, classes: usize, seed: u64) -> Dataset {
    let mut rng = Rng::new(seed);
    let mut data = Vec::with_capacity(n * 784);
    let mut labels = Vec::with_capacity(n);
    for s in 0..n {
        let c = s % classes;
        for r in 0..28 {
            for _ in 0..28 {
                let bar = (2 * c..2 * c + 3).contains(&r);
                let base = if bar { 0.7 } else { 0.0 };
                data.push(base + rng.uniform(0.0, 0.3));
            }
        }
        labels.push(c);
    }
    let names = (0..classes).map(|c| c.to_string()).collect();
    Dataset::new(Tensor::new(vec![n, 1, 28, 28], data).unwrap(), labels, names).unwrap()
}

fn tiny_topology(experts: usize, classes: usize, gate: GateKind) -> Topology {
    let stem = StemArch {
        height: 10,
        width: 10,
        kernel: 3,
    };
    Topology {
        experts,
        gate,
        expert: ExpertArch {
            stem,
            hidden1: 4,
            hidden2: 6,
            classes,
            output_relu: true,
        },
        gate_arch: GateArch {
            stem,
            hidden1: 8,
            hidden2: 6,
            output_relu: true,
        },
    }
}

fn cfg(epochs: usize, batch: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: batch,
        lr: 1e-2,
        seed,
        reg: RegConfig::none(),
    }
}

fn snapshot(params: Vec<&Param>) -> Vec<u64> {
    params
        .iter()
        .flat_map(|p| p.value().data().iter().map(|v| v.to_bits()))
        .collect()
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    }
    .validate()
    .is_err());
    assert!(TrainConfig {
        batch_size: 0,
        ..TrainConfig::default()
    }
    .validate()
    .is_err());
    let sim = TrainConfig {
        batch_size: 1,
        reg: RegConfig::similarity(1e-5, 1e-3),
        ..TrainConfig::default()
    };
    assert!(matches!(sim.validate(), Err(Error::Contract(_))));
    assert!(TrainConfig {
        lr: -1.0,
        ..TrainConfig::default()
    }
    .validate()
    .is_err());
    let d = TrainConfig::default();
    assert_eq!((d.epochs, d.batch_size, d.lr), (20, 128, 1e-3));
}

#[test]
fn training_reduces_loss_on_toy_data() {
    let ds = toy_dataset(64, 4, 1);
    for seed in 0..5 {
        let mut net = Network::Moe(MoeModel::new(Topology::mnist(3, 4, GateKind::Softmax), seed).unwrap());
        let before = evaluate(&net, &ds).unwrap().loss;
        let curve = fit(&mut net, &ds, &cfg(5, 16, seed)).unwrap();
        assert!(curve[4] < curve[0], "seed {seed}: {curve:?}");
        assert!(evaluate(&net, &ds).unwrap().loss < before);
    }
}

#[test]
fn short_run_descends_after_two_epochs() {
    let ds = toy_dataset(64, 4, 2);
    let mut net = Network::Moe(MoeModel::new(Topology::mnist(2, 4, GateKind::Attentive), 3).unwrap());
    let before = evaluate(&net, &ds).unwrap().loss;
    let report = train(&mut net, &ds, &ds, &cfg(2, 16, 3)).unwrap();
    assert!(report.final_train_loss < before);
}

#[test]
fn identical_config_and_seed_give_identical_reports() {
    let ds = toy_dataset(48, 3, 4);
    let c = cfg(2, 16, 9).with_reg(RegConfig::similarity(1e-3, 1e-2));
    let run = || {
        let mut net = Network::Moe(MoeModel::new(Topology::mnist(3, 3, GateKind::Softmax), 9).unwrap());
        train(&mut net, &ds, &ds, &c).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.numerics_json(), b.numerics_json());
    let other = {
        let mut net = Network::Moe(MoeModel::new(Topology::mnist(3, 3, GateKind::Softmax), 9).unwrap());
        train(&mut net, &ds, &ds, &c.with_seed(10)).unwrap()
    };
    assert_ne!(a.numerics_json(), other.numerics_json());
    let back = RunReport::from_json(&a.to_json()).unwrap();
    assert_eq!(back, a);
}

#[test]
fn frozen_components_stay_bit_identical() {
    let ds = toy_dataset(32, 2, 5);
    let base = MoeModel::new(Topology::mnist(2, 2, GateKind::Softmax), 1).unwrap();

    let mut m = base.clone();
    m.freeze(Component::Experts).unwrap();
    let experts_before = snapshot(m.experts.iter().flat_map(|e| e.params()).collect());
    let gate_before = snapshot(m.gate.params());
    let mut net = Network::Moe(m);
    fit(&mut net, &ds, &cfg(1, 8, 0)).unwrap();
    let m = net.as_moe().unwrap();
    assert_eq!(
        snapshot(m.experts.iter().flat_map(|e| e.params()).collect()),
        experts_before
    );
    assert_ne!(snapshot(m.gate.params()), gate_before);

    let mut m = base.clone();
    m.freeze(Component::Gate).unwrap();
    let mut net = Network::Moe(m);
    fit(&mut net, &ds, &cfg(1, 8, 0)).unwrap();
    let m = net.as_moe().unwrap();
    assert_eq!(snapshot(m.gate.params()), gate_before);
    assert_ne!(
        snapshot(m.experts.iter().flat_map(|e| e.params()).collect()),
        experts_before
    );

    let mut m = base.clone();
    m.freeze(Component::Gate).unwrap();
    m.unfreeze(Component::Gate).unwrap();
    let mut net = Network::Moe(m);
    fit(&mut net, &ds, &cfg(1, 8, 0)).unwrap();
    assert_ne!(snapshot(net.as_moe().unwrap().gate.params()), gate_before);
}

/// Tiny mixture with parameters uniform on ±0.7. At the training
/// initialization the experts are nearly interchangeable, gate gradients
/// shrink to ~1e-8 and central differences drown in round-off.
fn gradient_instance(gate: GateKind, seed: u64) -> (Network, Tensor, Vec<usize>) {
    let mut rng = Rng::new(100 + seed);
    let data = (0..800).map(|_| rng.uniform(0.0, 1.0)).collect();
    let images = Tensor::new(vec![8, 1, 10, 10], data).unwrap();
    let labels = (0..8).map(|i| i % 3).collect();
    let mut m = MoeModel::new(tiny_topology(2, 3, gate), seed).unwrap();
    for p in m.params_mut() {
        for v in p.value_mut().data_mut() {
            *v = rng.uniform(-0.7, 0.7);
        }
    }
    (Network::Moe(m), images, labels)
}

#[test]
fn regularized_objective_gradients_match_finite_differences() {
    for gate in [GateKind::Softmax, GateKind::Attentive] {
        for reg in [
            RegConfig::none(),
            RegConfig::importance(0.5),
            RegConfig::similarity(0.3, 0.7),
            RegConfig::similarity(1e-3, 1e-2),
        ] {
            for seed in 0..3 {
                let (net, images, labels) = gradient_instance(gate, seed);
                let err = check_model_gradients(&net, &images, &labels, &reg, 1e-5).unwrap();
                assert!(err < 1e-4, "{gate:?} {reg:?} seed {seed}: relative error {err}");
            }
        }
    }
}

#[test]
fn non_finite_loss_names_epoch_and_batch() {
    let ds = toy_dataset(16, 2, 0);
    let mut m = MoeModel::new(Topology::mnist(2, 2, GateKind::Softmax), 0).unwrap();
    m.experts[0].fc1.bias.value_mut().data_mut()[0] = f64::NAN;
    let mut net = Network::Moe(m);
    match fit(&mut net, &ds, &cfg(1, 8, 0)) {
        Err(Error::NonFinite {
            epoch: 0,
            batch: 0,
            value,
        }) => assert!(value.is_nan()),
        other => panic!("expected non-finite error, got {other:?}"),
    }
}

#[test]
fn pretraining_fits_each_expert_on_its_group_only() {
    let ds = toy_dataset(60, 6, 3);
    let split = ClassSplit::new(vec![vec![0, 3], vec![1, 4], vec![2, 5]]).unwrap();
    let original = MoeModel::new(Topology::mnist(3, 6, GateKind::Softmax), 2).unwrap();
    let c = cfg(3, 8, 1);
    let mut model = original.clone();
    pretrain_experts(&mut model, &ds, &split, &c).unwrap();

    // same result as fitting each expert by hand on its filtered subset
    let mut seeds = Rng::stream(c.seed, crate::tensor::streams::PRETRAIN);
    for (i, group) in split.groups().iter().enumerate() {
        let sub = filter_by_group(&ds, group).unwrap();
        let mut net = Network::Single(original.experts[i].clone());
        let before = evaluate(&net, &sub).unwrap().loss;
        fit(
            &mut net,
            &sub,
            &TrainConfig {
                seed: seeds.next_u64(),
                ..c
            },
        )
        .unwrap();
        let trained = Network::Single(model.experts[i].clone());
        assert_eq!(snapshot(net.params()), snapshot(trained.params()), "expert {i}");
        let after = evaluate(&trained, &sub).unwrap().loss;
        assert!(after < before, "expert {i}: loss {before} -> {after}");
    }

    let bad = ClassSplit::new(vec![vec![0, 3], vec![1, 4]]).unwrap();
    assert!(matches!(
        pretrain_experts(&mut model, &ds, &bad, &c),
        Err(Error::Contract(_))
    ));
    let mut five = MoeModel::new(Topology::mnist(5, 10, GateKind::Softmax), 0).unwrap();
    let ten = toy_dataset(20, 10, 0);
    pretrain_experts(&mut five, &ten, &ClassSplit::mnist_pairs(), &cfg(1, 8, 0)).unwrap();
}

#[test]
fn pretraining_leaves_the_gate_alone() {
    let ds = toy_dataset(40, 4, 3);
    let split = ClassSplit::new(vec![vec![0, 1], vec![2, 3]]).unwrap();
    let mut model = MoeModel::new(Topology::mnist(2, 4, GateKind::Softmax), 2).unwrap();
    let gate = snapshot(model.gate.params());
    pretrain_experts(&mut model, &ds, &split, &cfg(1, 8, 1)).unwrap();
    assert_eq!(snapshot(model.gate.params()), gate);
}

#[test]
fn pretrained_expert_protocol_runs_both_branches() {
    let ds = toy_dataset(60, 4, 8);
    let split = ClassSplit::new(vec![vec![0, 1], vec![2, 3]]).unwrap();
    let out = run_fig3_protocol(
        &ds,
        &ds,
        Topology::mnist(2, 4, GateKind::Softmax),
        &split,
        &cfg(2, 10, 0),
    )
    .unwrap();
    for r in [&out.a, &out.b] {
        r.validate().unwrap();
        assert_eq!(r.epoch_losses.len(), 2);
    }
    // the gate is frozen in the last stage, so its routing cannot change
    assert_eq!(out.a.test.table, out.a_gate_routing);
    assert_eq!(out.b.test.table, out.b_gate_routing);
}

#[test]
fn distillation_copies_and_freezes_the_right_parts() {
    let source = MoeModel::new(Topology::mnist(3, 4, GateKind::Attentive), 6).unwrap();
    let init = distill_init(&source, 1).unwrap();
    assert_eq!(init.topology().gate, GateKind::Softmax);
    let (Gate::Attentive(att), Gate::Softmax(sm)) = (&source.gate, &init.gate) else {
        panic!("unexpected gate kinds")
    };
    assert_eq!(
        snapshot(att.conv.params().to_vec()),
        snapshot(sm.conv.params().to_vec())
    );
    assert_eq!(snapshot(att.fc1.params().to_vec()), snapshot(sm.fc1.params().to_vec()));
    assert_eq!(snapshot(att.fc2.params().to_vec()), snapshot(sm.fc2.params().to_vec()));
    assert_eq!(sm.out.weight.shape(), &[32, 3]);

    let ds = toy_dataset(32, 4, 1);
    let distilled = distill(&source, &ds, &cfg(1, 8, 0)).unwrap();
    let src_bits = snapshot(source.experts.iter().flat_map(|e| e.params()).collect());
    assert_eq!(
        snapshot(distilled.experts.iter().flat_map(|e| e.params()).collect()),
        src_bits
    );
    let Gate::Softmax(trained) = &distilled.gate else {
        unreachable!()
    };
    assert_ne!(
        snapshot(trained.conv.params().to_vec()),
        snapshot(att.conv.params().to_vec())
    );

    let soft = MoeModel::new(Topology::mnist(3, 4, GateKind::Softmax), 6).unwrap();
    assert!(matches!(distill_init(&soft, 0), Err(Error::Contract(_))));
}

#[test]
fn single_network_reports_trivial_routing() {
    let ds = toy_dataset(32, 4, 1);
    let arch = Topology::mnist(1, 4, GateKind::Softmax).expert;
    let mut net = Network::Single(crate::model::ExpertNet::new(arch, &mut Rng::new(0)));
    let r = train(&mut net, &ds, &ds, &cfg(1, 8, 0)).unwrap();
    assert!(r.topology.is_none());
    assert_eq!((r.test.h_s, r.test.h_u, r.test.i_ey), (0.0, 0.0, 0.0));
    r.validate().unwrap();
}
