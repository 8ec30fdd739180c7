use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{filter_by_group, ClassSplit, Dataset};
use crate::error::{Error, Result};
use crate::metrics::SelectionTable;
use crate::model::{Component, Gate, GateKind, Linear, MoeModel, Network, SoftmaxGate, Topology};
use crate::regularizers::RegConfig;
use crate::tensor::{streams, Rng};
use crate::train::{evaluate, fit, RunReport, TrainConfig};

/// Train expert `i` on its own (cross-entropy on its softmax output over
/// all classes) using only samples whose label is in `split` group `i`.
pub fn pretrain_experts(model: &mut MoeModel, ds: &Dataset, split: &ClassSplit, cfg: &TrainConfig) -> Result<()> {
    if split.len() != model.num_experts() {
        return Err(Error::contract(format!(
            "split has {} groups but the model has {} experts",
            split.len(),
            model.num_experts()
        )));
    }
    let mut seeds = Rng::stream(cfg.seed, streams::PRETRAIN);
    for (i, group) in split.groups().iter().enumerate() {
        let subset = filter_by_group(ds, group)?;
        let stage = TrainConfig {
            seed: seeds.next_u64(),
            reg: RegConfig::none(),
            ..*cfg
        };
        let mut net = Network::Single(model.experts[i].clone());
        fit(&mut net, &subset, &stage)?;
        let Network::Single(trained) = net else { unreachable!() };
        model.experts[i] = trained;
    }
    Ok(())
}

/// Both branches of the freeze-and-retrain experiment.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Fig3Outcome {
    /// Branch (a): end-to-end mixture, gate frozen, fresh experts retrained.
    pub a: RunReport,
    /// Branch (b): experts pre-trained on the split and frozen, gate
    /// trained and frozen, fresh experts retrained.
    pub b: RunReport,
    /// Test-set routing of each branch's frozen gate before the final
    /// stage.
    pub a_gate_routing: SelectionTable,
    pub b_gate_routing: SelectionTable,
}

fn swap_in_fresh_experts(model: &mut MoeModel, seed: u64) {
    let mut rng = Rng::stream(seed, streams::FRESH_EXPERTS);
    model.experts = MoeModel::fresh_experts(model.topology(), &mut rng);
}

/// Run both branches with the same initial model seed, stage length and
/// batch schedule. The final stage of each branch trains fresh experts
/// under the frozen gate; its reports describe that final model.
pub fn run_fig3_protocol(
    train_ds: &Dataset,
    test_ds: &Dataset,
    topology: Topology,
    split: &ClassSplit,
    cfg: &TrainConfig,
) -> Result<Fig3Outcome> {
    cfg.validate()?;
    if split.len() != topology.experts {
        return Err(Error::contract("split size must equal the number of experts"));
    }

    let started = Instant::now();
    let mut net = Network::Moe(MoeModel::new(topology, cfg.seed)?);
    fit(&mut net, train_ds, cfg)?;
    let Network::Moe(model) = &mut net else { unreachable!() };
    model.freeze(Component::Gate)?;
    let a_gate_routing = evaluate(&net, test_ds)?.metrics.table;
    let Network::Moe(model) = &mut net else { unreachable!() };
    swap_in_fresh_experts(model, cfg.seed);
    let curve = fit(&mut net, train_ds, cfg)?;
    let a = RunReport::new(&net, train_ds, test_ds, cfg, curve, started)?;

    let started = Instant::now();
    let mut model = MoeModel::new(topology, cfg.seed)?;
    pretrain_experts(&mut model, train_ds, split, cfg)?;
    model.freeze(Component::Experts)?;
    let mut net = Network::Moe(model);
    fit(&mut net, train_ds, cfg)?;
    let Network::Moe(model) = &mut net else { unreachable!() };
    model.freeze(Component::Gate)?;
    let b_gate_routing = evaluate(&net, test_ds)?.metrics.table;
    let Network::Moe(model) = &mut net else { unreachable!() };
    swap_in_fresh_experts(model, cfg.seed);
    let curve = fit(&mut net, train_ds, cfg)?;
    let b = RunReport::new(&net, train_ds, test_ds, cfg, curve, started)?;

    Ok(Fig3Outcome {
        a,
        b,
        a_gate_routing,
        b_gate_routing,
    })
}

/// Softmax-gated mixture built from an attentive-gated one: experts copied
/// and frozen, gate stem and hidden layers copied, and a freshly
/// initialized output layer (one unit per expert) added.
pub fn distill_init(source: &MoeModel, seed: u64) -> Result<MoeModel> {
    let Gate::Attentive(att) = &source.gate else {
        return Err(Error::contract("distillation needs an attentive-gated source"));
    };
    let topology = Topology {
        gate: GateKind::Softmax,
        ..*source.topology()
    };
    let mut experts = source.experts.clone();
    for e in &mut experts {
        e.set_frozen(true);
    }
    let mut rng = Rng::stream(seed, streams::DISTILL_HEAD);
    let mut gate = SoftmaxGate {
        conv: att.conv.clone(),
        fc1: att.fc1.clone(),
        fc2: att.fc2.clone(),
        out: Linear::new(topology.gate_arch.hidden2, topology.experts, &mut rng),
        output_relu: topology.gate_arch.output_relu,
    };
    for p in gate.params_mut() {
        p.set_frozen(false);
    }
    MoeModel::from_parts(topology, experts, Gate::Softmax(gate))
}

/// [`distill_init`] followed by gate-only training on `ds`.
pub fn distill(source: &MoeModel, ds: &Dataset, cfg: &TrainConfig) -> Result<MoeModel> {
    let mut net = Network::Moe(distill_init(source, cfg.seed)?);
    fit(&mut net, ds, cfg)?;
    Ok(net.into_moe().expect("mixture network"))
}
