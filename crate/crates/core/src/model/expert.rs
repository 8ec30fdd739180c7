use crate::error::Result;
use crate::model::{Conv, ExpertArch, Linear};
use crate::tensor::{Graph, Param, Rng, Var};

/// Small convolutional classifier. Its second hidden layer doubles as the
/// key source for attentive gating.
#[derive(Clone, Debug)]
pub struct ExpertNet {
    pub conv: Conv,
    pub fc1: Linear,
    pub fc2: Linear,
    pub out: Linear,
    arch: ExpertArch,
}

#[derive(Clone, Copy, Debug)]
pub struct ExpertOutput {
    /// `N×hidden2`, after relu.
    pub hidden: Var,
    /// `N×classes`, rows sum to one.
    pub probs: Var,
}

impl ExpertNet {
    pub fn new(arch: ExpertArch, rng: &mut Rng) -> Self {
        ExpertNet {
            conv: Conv::new(arch.stem, rng),
            fc1: Linear::new(arch.stem.flat_dim(), arch.hidden1, rng),
            fc2: Linear::new(arch.hidden1, arch.hidden2, rng),
            out: Linear::new(arch.hidden2, arch.classes, rng),
            arch,
        }
    }

    pub fn arch(&self) -> ExpertArch {
        self.arch
    }

    /// conv→relu→pool→fc1→relu→fc2→relu gives `hidden`;
    /// out→relu→softmax gives `probs` (out→softmax without `output_relu`).
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<ExpertOutput> {
        let h = self.conv.forward(g, x)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.relu(h)?;
        let h = self.fc2.forward(g, h)?;
        let hidden = g.relu(h)?;
        let logits = self.out.forward(g, hidden)?;
        let logits = if self.arch.output_relu { g.relu(logits)? } else { logits };
        let probs = g.row_softmax(logits)?;
        Ok(ExpertOutput { hidden, probs })
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = Vec::with_capacity(8);
        v.extend(self.conv.params());
        v.extend(self.fc1.params());
        v.extend(self.fc2.params());
        v.extend(self.out.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::with_capacity(8);
        v.extend(self.conv.params_mut());
        v.extend(self.fc1.params_mut());
        v.extend(self.fc2.params_mut());
        v.extend(self.out.params_mut());
        v
    }

    pub(crate) fn param_names() -> [&'static str; 8] {
        [
            "conv.kernel",
            "conv.bias",
            "fc1.weight",
            "fc1.bias",
            "fc2.weight",
            "fc2.bias",
            "out.weight",
            "out.bias",
        ]
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for p in self.params_mut() {
            p.set_frozen(frozen);
        }
    }
}
