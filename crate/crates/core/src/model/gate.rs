use crate::error::{Error, Result};
use crate::model::{Conv, GateArch, Linear};
use crate::tensor::{dot, CustomOp, Graph, Param, Rng, Tensor, Var};

/// Conventional gate: the stem and two hidden layers followed by an output
/// layer with one unit per expert, relu and softmax.
#[derive(Clone, Debug)]
pub struct SoftmaxGate {
    pub conv: Conv,
    pub fc1: Linear,
    pub fc2: Linear,
    pub out: Linear,
    pub output_relu: bool,
}

impl SoftmaxGate {
    pub fn new(arch: GateArch, experts: usize, rng: &mut Rng) -> Self {
        SoftmaxGate {
            conv: Conv::new(arch.stem, rng),
            fc1: Linear::new(arch.stem.flat_dim(), arch.hidden1, rng),
            fc2: Linear::new(arch.hidden1, arch.hidden2, rng),
            out: Linear::new(arch.hidden2, experts, rng),
            output_relu: arch.output_relu,
        }
    }

    /// `N×M` gate probabilities.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.conv.forward(g, x)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.relu(h)?;
        let h = self.fc2.forward(g, h)?;
        let h = g.relu(h)?;
        let logits = self.out.forward(g, h)?;
        let logits = if self.output_relu { g.relu(logits)? } else { logits };
        g.row_softmax(logits)
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

    pub(crate) fn param_names() -> Vec<&'static str> {
        vec![
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
}

/// Gate whose probabilities are attention scores between its own hidden
/// output (the query) and the experts' hidden outputs (the keys).
///
/// There is no output layer: `fc2` has no activation and its width must
/// match the expert hidden width.
#[derive(Clone, Debug)]
pub struct AttentiveGate {
    pub conv: Conv,
    pub fc1: Linear,
    pub fc2: Linear,
    pub w_q: Param,
    pub w_k: Param,
}

impl AttentiveGate {
    pub fn new(arch: GateArch, rng: &mut Rng) -> Self {
        let h = arch.hidden2;
        let bound = 1.0 / (h as f64).sqrt();
        AttentiveGate {
            conv: Conv::new(arch.stem, rng),
            fc1: Linear::new(arch.stem.flat_dim(), arch.hidden1, rng),
            fc2: Linear::new(arch.hidden1, h, rng),
            w_q: Param::new(Tensor::uniform(&[h, h], bound, rng)),
            w_k: Param::new(Tensor::uniform(&[h, h], bound, rng)),
        }
    }

    /// The query source `G`, `N×h`.
    pub fn hidden(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.conv.forward(g, x)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.relu(h)?;
        self.fc2.forward(g, h)
    }

    /// Gate probabilities given the experts' hidden outputs for the same
    /// batch.
    pub fn forward(&self, g: &mut Graph, x: Var, expert_hidden: &[Var]) -> Result<Var> {
        let query_src = self.hidden(g, x)?;
        let w_q = g.param(&self.w_q);
        let w_k = g.param(&self.w_k);
        attentive_scores(g, query_src, expert_hidden, w_q, w_k)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = Vec::with_capacity(8);
        v.extend(self.conv.params());
        v.extend(self.fc1.params());
        v.extend(self.fc2.params());
        v.push(&self.w_q);
        v.push(&self.w_k);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::with_capacity(8);
        v.extend(self.conv.params_mut());
        v.extend(self.fc1.params_mut());
        v.extend(self.fc2.params_mut());
        v.push(&mut self.w_q);
        v.push(&mut self.w_k);
        v
    }

    pub(crate) fn param_names() -> Vec<&'static str> {
        vec![
            "conv.kernel",
            "conv.bias",
            "fc1.weight",
            "fc1.bias",
            "fc2.weight",
            "fc2.bias",
            "w_q",
            "w_k",
        ]
    }
}

#[derive(Clone, Debug)]
pub enum Gate {
    Softmax(SoftmaxGate),
    Attentive(AttentiveGate),
}

impl Gate {
    pub fn params(&self) -> Vec<&Param> {
        match self {
            Gate::Softmax(s) => s.params(),
            Gate::Attentive(a) => a.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Gate::Softmax(s) => s.params_mut(),
            Gate::Attentive(a) => a.params_mut(),
        }
    }

    pub(crate) fn param_names(&self) -> Vec<&'static str> {
        match self {
            Gate::Softmax(_) => SoftmaxGate::param_names(),
            Gate::Attentive(_) => AttentiveGate::param_names(),
        }
    }
}

/// Per-sample scaled dot products between a query row and each key
/// matrix's matching row: `out[n, i] = scale · q[n]·k_i[n]`.
struct RowDots {
    scale: f64,
}

impl CustomOp for RowDots {
    fn name(&self) -> &'static str {
        "row_dots"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let q = inputs[0];
        let keys = &inputs[1..];
        let (n, h) = (q.shape()[0], q.shape()[1]);
        let m = keys.len();
        let mut dq = vec![0.0; n * h];
        let mut out = Vec::with_capacity(m + 1);
        let mut dks = vec![vec![0.0; n * h]; m];
        for s in 0..n {
            let qs = q.row(s);
            for (i, k) in keys.iter().enumerate() {
                let gi = grad[s * m + i] * self.scale;
                let ks = k.row(s);
                for c in 0..h {
                    dq[s * h + c] += gi * ks[c];
                    dks[i][s * h + c] = gi * qs[c];
                }
            }
        }
        out.push(Some(dq));
        out.extend(dks.into_iter().map(Some));
        out
    }
}

/// Attention-score gating. With `G` the gate hidden output (`N×h`), `E_i`
/// the expert hidden outputs (`N×h` each) and `W_q`, `W_k` (`h×h`):
///
/// `Q = G·W_q`, `K_i = E_i·W_k`, `P[n, i] = softmax_i(Q[n]·K_i[n] / √h)`.
pub fn attentive_scores(g: &mut Graph, query_src: Var, expert_hidden: &[Var], w_q: Var, w_k: Var) -> Result<Var> {
    if expert_hidden.is_empty() {
        return Err(Error::contract("attention needs at least one expert"));
    }
    let q = g.matmul(query_src, w_q)?;
    let (n, h) = g.value(q).dims2("attentive_scores")?;
    let mut keys = Vec::with_capacity(expert_hidden.len());
    for &e in expert_hidden {
        let k = g.matmul(e, w_k)?;
        if g.value(k).shape() != [n, h] {
            return Err(Error::shape("attentive_scores", &[n, h], g.value(k).shape()));
        }
        keys.push(k);
    }
    let scale = 1.0 / (h as f64).sqrt();
    let m = keys.len();
    let mut logits = vec![0.0; n * m];
    for s in 0..n {
        let qs = g.value(q).row(s);
        for (i, &k) in keys.iter().enumerate() {
            logits[s * m + i] = scale * dot(qs, g.value(k).row(s));
        }
    }
    let mut inputs = vec![q];
    inputs.extend(&keys);
    let logits = g.custom(&inputs, Tensor::new(vec![n, m], logits)?, Box::new(RowDots { scale }))?;
    g.row_softmax(logits)
}
