//! Expert networks, the softmax and attentive gates, and the output
//! mixture that combines them.

mod checkpoint;
mod expert;
mod gate;
mod layers;
mod moe;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use expert::{ExpertNet, ExpertOutput};
pub use gate::{attentive_scores, AttentiveGate, Gate, SoftmaxGate};
pub use layers::{Conv, Linear};
pub use moe::{
    floored_nll, mixture, mixture_nll, ConditionalMode, ConditionalOutput, MixtureOutput, MoeModel, Network,
    NetworkOutput, NLL_FLOOR,
};

/// Shape of the convolutional stem shared by experts and gates:
/// conv (1→1, `kernel`×`kernel`) → relu → 2×2 max-pool → flatten.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemArch {
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl StemArch {
    #[allow(clippy::manual_div_ceil)]
    pub fn flat_dim(&self) -> usize {
        ((self.height - self.kernel + 1) / 2) * ((self.width - self.kernel + 1) / 2)
    }
}

fn yes() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertArch {
    pub stem: StemArch,
    pub hidden1: usize,
    pub hidden2: usize,
    pub classes: usize,
    /// Relu on the output logits before the softmax. On in the reference
    /// architecture; turning it off is an ablation.
    #[serde(default = "yes")]
    pub output_relu: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateArch {
    pub stem: StemArch,
    pub hidden1: usize,
    pub hidden2: usize,
    /// As [`ExpertArch::output_relu`], for the softmax gate. The attentive
    /// gate has no output layer and ignores it.
    #[serde(default = "yes")]
    pub output_relu: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    Softmax,
    Attentive,
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub experts: usize,
    pub gate: GateKind,
    pub expert: ExpertArch,
    pub gate_arch: GateArch,
}

impl Topology {
    /// MNIST-sized model: 28×28 inputs, 3×3 stems, expert hidden 5→32,
    /// gate hidden 128→32.
    pub fn mnist(experts: usize, classes: usize, gate: GateKind) -> Self {
        let stem = StemArch {
            height: 28,
            width: 28,
            kernel: 3,
        };
        Topology {
            experts,
            gate,
            expert: ExpertArch {
                stem,
                hidden1: 5,
                hidden2: 32,
                classes,
                output_relu: true,
            },
            gate_arch: GateArch {
                stem,
                hidden1: 128,
                hidden2: 32,
                output_relu: true,
            },
        }
    }

    /// Combined FMNIST+MNIST model: as [`Topology::mnist`] but the gate stem
    /// uses a 5×5 kernel (12×12 after pooling).
    pub fn combined(experts: usize, gate: GateKind) -> Self {
        let mut t = Self::mnist(experts, 12, gate);
        t.gate_arch.stem.kernel = 5;
        t
    }

    /// Same topology with the relu before the expert and gate softmax
    /// switched on or off.
    pub fn with_output_relu(mut self, on: bool) -> Self {
        self.expert.output_relu = on;
        self.gate_arch.output_relu = on;
        self
    }

    pub fn classes(&self) -> usize {
        self.expert.classes
    }

    /// Width of the expert hidden output used as attention keys.
    pub fn hidden(&self) -> usize {
        self.expert.hidden2
    }

    pub fn validate(&self) -> Result<()> {
        if self.experts == 0 {
            return Err(Error::contract("a mixture needs at least one expert"));
        }
        if self.gate == GateKind::Attentive && self.gate_arch.hidden2 != self.expert.hidden2 {
            return Err(Error::contract(format!(
                "attentive gate width {} must equal expert hidden width {}",
                self.gate_arch.hidden2, self.expert.hidden2
            )));
        }
        for stem in [self.expert.stem, self.gate_arch.stem] {
            if stem.kernel > stem.height || stem.kernel > stem.width {
                return Err(Error::contract("stem kernel larger than the input"));
            }
        }
        Ok(())
    }
}

/// Freezable part of a mixture.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Gate,
    Experts,
    Expert(usize),
}

impl std::str::FromStr for Component {
    type Err = Error;

    /// `gate`, `experts` or `expert:<index>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gate" => Ok(Component::Gate),
            "experts" => Ok(Component::Experts),
            _ => s
                .strip_prefix("expert:")
                .and_then(|i| i.parse().ok())
                .map(Component::Expert)
                .ok_or_else(|| Error::contract(format!("unknown component '{s}'"))),
        }
    }
}
