use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentiveGate, Component, ExpertNet, ExpertOutput, Gate, GateKind, SoftmaxGate, Topology};
use crate::tensor::{streams, CustomOp, Graph, Param, Rng, Tensor, Var};

/// Samples per forward pass when evaluating a whole dataset.
const INFERENCE_CHUNK: usize = 512;

/// Probability floor inside the log of the mixture likelihood.
pub const NLL_FLOOR: f64 = 1e-12;

/// `-ln max(p, NLL_FLOOR)`, except that NaN stays NaN (`f64::max` would
/// silently pick the floor).
pub fn floored_nll(p: f64) -> f64 {
    if p.is_nan() {
        p
    } else {
        -p.max(NLL_FLOOR).ln()
    }
}

/// `ŷ[n] = Σ_i P[n, i] · o_i[n]`.
struct Mix;

impl CustomOp for Mix {
    fn name(&self) -> &'static str {
        "mixture"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let p = inputs[0];
        let outs = &inputs[1..];
        let (n, m) = (p.shape()[0], p.shape()[1]);
        let k = outs[0].shape()[1];
        let mut dp = vec![0.0; n * m];
        let mut douts = vec![vec![0.0; n * k]; m];
        for s in 0..n {
            let gs = &grad[s * k..(s + 1) * k];
            for i in 0..m {
                let os = outs[i].row(s);
                dp[s * m + i] = gs.iter().zip(os).map(|(a, b)| a * b).sum();
                let w = p.at2(s, i);
                for (d, gv) in douts[i][s * k..(s + 1) * k].iter_mut().zip(gs) {
                    *d = w * gv;
                }
            }
        }
        let mut out = vec![Some(dp)];
        out.extend(douts.into_iter().map(Some));
        out
    }
}

/// Weighted sum of expert distributions by gate probabilities.
pub fn mixture(g: &mut Graph, gate: Var, outputs: &[Var]) -> Result<Var> {
    let (n, m) = g.value(gate).dims2("mixture")?;
    if outputs.len() != m {
        return Err(Error::shape("mixture", &[n, m], &[outputs.len()]));
    }
    let k = g.value(outputs[0]).dims2("mixture")?.1;
    for &o in outputs {
        if g.value(o).shape() != [n, k] {
            return Err(Error::shape("mixture", &[n, k], g.value(o).shape()));
        }
    }
    let mut y = vec![0.0; n * k];
    {
        let p = g.value(gate);
        for (i, &o) in outputs.iter().enumerate() {
            let ov = g.value(o);
            for s in 0..n {
                let w = p.at2(s, i);
                for (yv, ovv) in y[s * k..(s + 1) * k].iter_mut().zip(ov.row(s)) {
                    *yv += w * ovv;
                }
            }
        }
    }
    let mut inputs = vec![gate];
    inputs.extend(outputs);
    g.custom(&inputs, Tensor::new(vec![n, k], y)?, Box::new(Mix))
}

struct Nll {
    labels: Vec<usize>,
}

impl CustomOp for Nll {
    fn name(&self) -> &'static str {
        "mixture_nll"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let y = inputs[0];
        let (n, k) = (y.shape()[0], y.shape()[1]);
        let mut d = vec![0.0; n * k];
        for (s, &l) in self.labels.iter().enumerate() {
            let p = y.at2(s, l);
            if p > NLL_FLOOR {
                d[s * k + l] = -grad[0] / (n as f64 * p);
            }
        }
        vec![Some(d)]
    }
}

/// Mean negative natural-log likelihood of the labels under `y`, with
/// probabilities floored at [`NLL_FLOOR`].
pub fn mixture_nll(g: &mut Graph, y: Var, labels: &[usize]) -> Result<Var> {
    let (n, k) = g.value(y).dims2("mixture_nll")?;
    if labels.len() != n {
        return Err(Error::shape("mixture_nll", &[n, k], &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::contract(format!("label {bad} out of range for {k} classes")));
    }
    let yv = g.value(y);
    let loss = labels
        .iter()
        .enumerate()
        .map(|(s, &l)| floored_nll(yv.at2(s, l)))
        .sum::<f64>()
        / n as f64;
    g.custom(
        &[y],
        Tensor::scalar(loss),
        Box::new(Nll {
            labels: labels.to_vec(),
        }),
    )
}

#[derive(Clone, Debug)]
pub struct MixtureOutput {
    /// `N×K` mixture distribution.
    pub y: Var,
    /// `N×M` gate probabilities.
    pub gate: Var,
    pub experts: Vec<ExpertOutput>,
}

/// Expert-skipping inference policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionalMode {
    /// Keep the `k` most probable experts (ties: lower index first).
    TopK(usize),
    /// Keep experts with probability at least τ; when none qualifies the
    /// argmax expert is kept.
    Threshold(f64),
}

#[derive(Clone, Debug)]
pub struct ConditionalOutput {
    pub y: Tensor,
    pub gate: Tensor,
    /// Total number of (sample, expert) forward evaluations.
    pub evaluations: usize,
    /// Retained `(expert, renormalized weight)` pairs per sample.
    pub selections: Vec<Vec<(usize, f64)>>,
}

#[derive(Clone, Debug)]
pub struct MoeModel {
    topology: Topology,
    pub experts: Vec<ExpertNet>,
    pub gate: Gate,
}

impl MoeModel {
    /// Freshly initialized model; all randomness comes from `seed`.
    pub fn new(topology: Topology, seed: u64) -> Result<Self> {
        topology.validate()?;
        let mut rng = Rng::stream(seed, streams::INIT);
        let experts = Self::fresh_experts(&topology, &mut rng);
        let gate = match topology.gate {
            GateKind::Softmax => Gate::Softmax(SoftmaxGate::new(topology.gate_arch, topology.experts, &mut rng)),
            GateKind::Attentive => Gate::Attentive(AttentiveGate::new(topology.gate_arch, &mut rng)),
        };
        Ok(MoeModel {
            topology,
            experts,
            gate,
        })
    }

    pub fn fresh_experts(topology: &Topology, rng: &mut Rng) -> Vec<ExpertNet> {
        (0..topology.experts)
            .map(|_| ExpertNet::new(topology.expert, rng))
            .collect()
    }

    pub fn from_parts(topology: Topology, experts: Vec<ExpertNet>, gate: Gate) -> Result<Self> {
        topology.validate()?;
        if experts.len() != topology.experts {
            return Err(Error::contract(format!(
                "topology expects {} experts, got {}",
                topology.experts,
                experts.len()
            )));
        }
        if experts.iter().any(|e| e.arch() != topology.expert) {
            return Err(Error::contract("all experts must share the topology's architecture"));
        }
        let kind = match gate {
            Gate::Softmax(_) => GateKind::Softmax,
            Gate::Attentive(_) => GateKind::Attentive,
        };
        if kind != topology.gate {
            return Err(Error::contract("gate kind does not match topology"));
        }
        if let Gate::Softmax(sg) = &gate {
            if sg.output_relu != topology.gate_arch.output_relu {
                return Err(Error::contract("gate output relu does not match topology"));
            }
        }
        Ok(MoeModel {
            topology,
            experts,
            gate,
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<MixtureOutput> {
        let experts = self
            .experts
            .iter()
            .map(|e| e.forward(g, x))
            .collect::<Result<Vec<_>>>()?;
        let gate = match &self.gate {
            Gate::Softmax(s) => s.forward(g, x)?,
            Gate::Attentive(a) => {
                let hidden: Vec<Var> = experts.iter().map(|e| e.hidden).collect();
                a.forward(g, x, &hidden)?
            }
        };
        let probs: Vec<Var> = experts.iter().map(|e| e.probs).collect();
        let y = mixture(g, gate, &probs)?;
        Ok(MixtureOutput { y, gate, experts })
    }

    /// Mixture output and gate probabilities for a whole image tensor.
    pub fn predict(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut ys = Vec::new();
        let mut ps = Vec::new();
        for chunk in chunks(images) {
            let mut g = Graph::new();
            let x = g.constant(chunk);
            let out = self.forward(&mut g, x)?;
            ys.extend_from_slice(g.value(out.y).data());
            ps.extend_from_slice(g.value(out.gate).data());
        }
        let n = images.shape()[0];
        Ok((
            Tensor::new(vec![n, self.topology.classes()], ys)?,
            Tensor::new(vec![n, self.num_experts()], ps)?,
        ))
    }

    /// Inference that evaluates only the experts selected by `mode` and
    /// mixes them with renormalized gate weights. Softmax gate only: the
    /// attentive gate needs every expert's hidden output to route.
    pub fn conditional_forward(&self, images: &Tensor, mode: ConditionalMode) -> Result<ConditionalOutput> {
        let Gate::Softmax(gate) = &self.gate else {
            return Err(Error::Unsupported(
                "conditional computation requires a softmax gate".into(),
            ));
        };
        let m = self.num_experts();
        match mode {
            ConditionalMode::TopK(k) if k == 0 || k > m => {
                return Err(Error::contract(format!("top-k needs 1 <= k <= {m}, got {k}")));
            }
            ConditionalMode::Threshold(t) if !(t > 0.0 && t < 1.0) => {
                return Err(Error::contract(format!("threshold must lie in (0, 1), got {t}")));
            }
            _ => {}
        }

        let mut pdata = Vec::with_capacity(images.shape()[0] * m);
        for chunk in chunks(images) {
            let mut g = Graph::new();
            let x = g.constant(chunk);
            let p = gate.forward(&mut g, x)?;
            pdata.extend_from_slice(g.value(p).data());
        }
        let n = images.shape()[0];
        let gate_probs = Tensor::new(vec![n, m], pdata)?;

        let selections: Vec<Vec<(usize, f64)>> = gate_probs.rows().map(|row| select_experts(row, mode)).collect();

        let k = self.topology.classes();
        let mut y = vec![0.0; n * k];
        let mut evaluations = 0;
        for (e, expert) in self.experts.iter().enumerate() {
            let (idx, weights): (Vec<usize>, Vec<f64>) = selections
                .iter()
                .enumerate()
                .filter_map(|(s, sel)| sel.iter().find(|(i, _)| *i == e).map(|&(_, w)| (s, w)))
                .unzip();
            if idx.is_empty() {
                continue;
            }
            evaluations += idx.len();
            let mut g = Graph::new();
            let x = g.constant(images.gather_rows(&idx));
            let out = expert.forward(&mut g, x)?;
            let probs = g.value(out.probs);
            for (row, (&s, &w)) in idx.iter().zip(&weights).enumerate() {
                for (yv, pv) in y[s * k..(s + 1) * k].iter_mut().zip(probs.row(row)) {
                    *yv += w * pv;
                }
            }
        }
        Ok(ConditionalOutput {
            y: Tensor::new(vec![n, k], y)?,
            gate: gate_probs,
            evaluations,
            selections,
        })
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = self.experts.iter().flat_map(ExpertNet::params).collect();
        v.extend(self.gate.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = self.experts.iter_mut().flat_map(ExpertNet::params_mut).collect();
        v.extend(self.gate.params_mut());
        v
    }

    /// Parameters with stable names, e.g. `expert2.fc1.weight`, `gate.w_q`.
    pub fn named_params(&self) -> Vec<(String, &Param)> {
        let mut v = Vec::new();
        for (i, e) in self.experts.iter().enumerate() {
            for (name, p) in ExpertNet::param_names().iter().zip(e.params()) {
                v.push((format!("expert{i}.{name}"), p));
            }
        }
        for (name, p) in self.gate.param_names().iter().zip(self.gate.params()) {
            v.push((format!("gate.{name}"), p));
        }
        v
    }

    fn component_params(&mut self, c: Component) -> Result<Vec<&mut Param>> {
        match c {
            Component::Gate => Ok(self.gate.params_mut()),
            Component::Experts => Ok(self.experts.iter_mut().flat_map(ExpertNet::params_mut).collect()),
            Component::Expert(i) => {
                let m = self.experts.len();
                self.experts
                    .get_mut(i)
                    .map(ExpertNet::params_mut)
                    .ok_or_else(|| Error::contract(format!("expert {i} does not exist (M = {m})")))
            }
        }
    }

    /// Stop optimizer updates for a component.
    pub fn freeze(&mut self, c: Component) -> Result<()> {
        for p in self.component_params(c)? {
            p.set_frozen(true);
        }
        Ok(())
    }

    pub fn unfreeze(&mut self, c: Component) -> Result<()> {
        for p in self.component_params(c)? {
            p.set_frozen(false);
        }
        Ok(())
    }

    pub fn is_frozen(&mut self, c: Component) -> Result<bool> {
        Ok(self.component_params(c)?.iter().all(|p| p.is_frozen()))
    }
}

/// Ordered expert choice for one row of gate probabilities, weights
/// renormalized to sum to one.
fn select_experts(row: &[f64], mode: ConditionalMode) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    // stable sort keeps lower indices first among ties
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    let kept: Vec<usize> = match mode {
        ConditionalMode::TopK(k) => order[..k].to_vec(),
        ConditionalMode::Threshold(t) => {
            let v: Vec<usize> = order.iter().copied().filter(|&i| row[i] >= t).collect();
            if v.is_empty() {
                vec![order[0]]
            } else {
                v
            }
        }
    };
    let total: f64 = kept.iter().map(|&i| row[i]).sum();
    let mut sel: Vec<(usize, f64)> = kept.into_iter().map(|i| (i, row[i] / total)).collect();
    sel.sort_by_key(|&(i, _)| i);
    sel
}

fn chunks(images: &Tensor) -> impl Iterator<Item = Tensor> + '_ {
    let n = images.shape()[0];
    (0..n).step_by(INFERENCE_CHUNK).map(move |start| {
        let idx: Vec<usize> = (start..(start + INFERENCE_CHUNK).min(n)).collect();
        images.gather_rows(&idx)
    })
}

/// Anything the trainer can optimize: a standalone expert-architecture
/// classifier or a gated mixture.
#[derive(Clone, Debug)]
pub enum Network {
    Single(ExpertNet),
    Moe(MoeModel),
}

#[derive(Clone, Copy, Debug)]
pub struct NetworkOutput {
    pub y: Var,
    pub gate: Option<Var>,
}

impl Network {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<NetworkOutput> {
        match self {
            Network::Single(e) => Ok(NetworkOutput {
                y: e.forward(g, x)?.probs,
                gate: None,
            }),
            Network::Moe(m) => {
                let out = m.forward(g, x)?;
                Ok(NetworkOutput {
                    y: out.y,
                    gate: Some(out.gate),
                })
            }
        }
    }

    pub fn predict(&self, images: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        match self {
            Network::Moe(m) => m.predict(images).map(|(y, p)| (y, Some(p))),
            Network::Single(e) => {
                let mut ys = Vec::new();
                for chunk in chunks(images) {
                    let mut g = Graph::new();
                    let x = g.constant(chunk);
                    let out = e.forward(&mut g, x)?;
                    ys.extend_from_slice(g.value(out.probs).data());
                }
                let n = images.shape()[0];
                Ok((Tensor::new(vec![n, e.arch().classes], ys)?, None))
            }
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            Network::Single(e) => e.params(),
            Network::Moe(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Network::Single(e) => e.params_mut(),
            Network::Moe(m) => m.params_mut(),
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Param)> {
        match self {
            Network::Single(e) => ExpertNet::param_names()
                .iter()
                .zip(e.params())
                .map(|(n, p)| (format!("expert0.{n}"), p))
                .collect(),
            Network::Moe(m) => m.named_params(),
        }
    }

    pub fn as_moe(&self) -> Option<&MoeModel> {
        match self {
            Network::Moe(m) => Some(m),
            Network::Single(_) => None,
        }
    }

    pub fn into_moe(self) -> Option<MoeModel> {
        match self {
            Network::Moe(m) => Some(m),
            Network::Single(_) => None,
        }
    }
}
