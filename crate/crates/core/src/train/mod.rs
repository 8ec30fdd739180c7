//! Optimization: Adam, the end-to-end training loop, run reports and the
//! multi-stage protocols (expert pre-training, freeze-and-retrain,
//! distillation of attentive-gated models).

mod adam;
mod protocol;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use adam::{AdamConfig, AdamState};
pub use protocol::{distill, distill_init, pretrain_experts, run_fig3_protocol, Fig3Outcome};

use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{floored_nll, mixture_nll, Network, Topology};
use crate::regularizers::{total_loss, RegConfig, RegKind};
use crate::tensor::{grad_check, Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub reg: RegConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 128,
            lr: 1e-3,
            seed: 0,
            reg: RegConfig::none(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::contract("epochs must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::contract("batch_size must be at least 1"));
        }
        if self.reg.kind == RegKind::Similarity && self.batch_size < 2 {
            return Err(Error::contract("the similarity loss needs batch_size >= 2"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::contract(format!("lr must be positive, got {}", self.lr)));
        }
        self.reg.validate()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_reg(mut self, reg: RegConfig) -> Self {
        self.reg = reg;
        self
    }
}

/// Loss values of one optimizer step.
#[derive(Clone, Copy, Debug)]
pub struct StepLoss {
    pub task: f64,
    pub reg: f64,
}

/// Forward, backward and one Adam update on a single batch.
pub fn train_step(
    net: &mut Network,
    adam: &mut AdamState,
    images: &Tensor,
    labels: &[usize],
    reg: &RegConfig,
) -> Result<StepLoss> {
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let out = net.forward(&mut g, x)?;
    let nll = mixture_nll(&mut g, out.y, labels)?;
    let penalty = match out.gate {
        Some(p) => reg.apply(&mut g, images, p)?,
        None => None,
    };
    let total = total_loss(&mut g, nll, penalty)?;
    let loss = StepLoss {
        task: g.value(nll).item(),
        reg: penalty.map_or(0.0, |r| g.value(r).item()),
    };
    if !g.value(total).item().is_finite() {
        return Err(Error::NonFinite {
            epoch: 0,
            batch: 0,
            value: g.value(total).item(),
        });
    }
    g.backward(total)?;
    let mut params = net.params_mut();
    for p in params.iter_mut() {
        if let Some(grad) = g.param_grad(p) {
            p.accumulate_grad(grad);
        }
    }
    adam.step(&mut params)?;
    for p in params.iter_mut() {
        p.zero_grad();
    }
    Ok(loss)
}

/// Train `net` in place. Returns the sample-weighted mean task loss of
/// every epoch.
pub fn fit(net: &mut Network, ds: &Dataset, cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut adam = AdamState::new(
        net.params(),
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        for (batch, (images, labels)) in batches(ds, cfg.batch_size, cfg.seed, epoch)?.enumerate() {
            let loss = train_step(net, &mut adam, &images, &labels, &cfg.reg).map_err(|e| match e {
                Error::NonFinite { value, .. } => Error::NonFinite { epoch, batch, value },
                other => other,
            })?;
            sum += loss.task * labels.len() as f64;
        }
        curve.push(sum / ds.len() as f64);
    }
    Ok(curve)
}

/// Metrics and mean likelihood loss of a trained network on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub metrics: MetricsReport,
}

/// Evaluate on the whole dataset. A single network is treated as a
/// one-expert mixture, so its routing metrics are all zero.
pub fn evaluate(net: &Network, ds: &Dataset) -> Result<Evaluation> {
    let (y, gate) = net.predict(&ds.images)?;
    let gate = gate.unwrap_or_else(|| Tensor::full(&[ds.len(), 1], 1.0));
    let loss = ds
        .labels
        .iter()
        .enumerate()
        .map(|(s, &l)| floored_nll(y.at2(s, l)))
        .sum::<f64>()
        / ds.len() as f64;
    Ok(Evaluation {
        loss,
        metrics: MetricsReport::compute(&y, &gate, &ds.labels, &ds.class_names)?,
    })
}

/// Outcome of one training run. Routing metrics in `train` and `test` are
/// computed on the full respective sets after training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub seed: u64,
    /// `None` for a single (non-mixture) network.
    pub topology: Option<Topology>,
    pub epoch_losses: Vec<f64>,
    pub final_train_loss: f64,
    pub train: MetricsReport,
    pub test: MetricsReport,
    pub wall_time_secs: f64,
}

impl RunReport {
    pub fn new(
        net: &Network,
        train_ds: &Dataset,
        test_ds: &Dataset,
        config: &TrainConfig,
        epoch_losses: Vec<f64>,
        started: Instant,
    ) -> Result<Self> {
        let tr = evaluate(net, train_ds)?;
        let te = evaluate(net, test_ds)?;
        Ok(RunReport {
            config: *config,
            seed: config.seed,
            topology: net.as_moe().map(|m| *m.topology()),
            epoch_losses,
            final_train_loss: tr.loss,
            train: tr.metrics,
            test: te.metrics,
            wall_time_secs: started.elapsed().as_secs_f64(),
        })
    }

    pub fn train_error(&self) -> f64 {
        self.train.error
    }

    pub fn test_error(&self) -> f64 {
        self.test.error
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Parse and check the internal consistency of a stored report.
    pub fn from_json(s: &str) -> Result<Self> {
        let r: RunReport = serde_json::from_str(s).map_err(|e| Error::contract(format!("malformed report: {e}")))?;
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.seed != self.config.seed {
            return Err(Error::contract("report seed differs from its config echo"));
        }
        if self.epoch_losses.len() != self.config.epochs {
            return Err(Error::contract("epoch curve length differs from configured epochs"));
        }
        for m in [&self.train, &self.test] {
            if m.table.total() != m.n as u64 {
                return Err(Error::contract("selection table total differs from sample count"));
            }
            if let Some(t) = &self.topology {
                if m.table.experts() != t.experts || m.table.classes() != t.classes() {
                    return Err(Error::contract("selection table shape differs from topology"));
                }
            }
        }
        Ok(())
    }

    /// The report without wall-clock time: identical for identical
    /// `(config, seed)` on one platform.
    pub fn numerics_json(&self) -> String {
        let mut r = self.clone();
        r.wall_time_secs = 0.0;
        serde_json::to_string(&r).expect("report serializes")
    }
}

/// Fit and report in one call.
pub fn train(net: &mut Network, train_ds: &Dataset, test_ds: &Dataset, cfg: &TrainConfig) -> Result<RunReport> {
    let started = Instant::now();
    let curve = fit(net, train_ds, cfg)?;
    RunReport::new(net, train_ds, test_ds, cfg, curve, started)
}

/// Largest relative error between reverse-mode and central-difference
/// gradients of the full training objective (task loss plus regularizer)
/// over every parameter of `net`, frozen or not.
pub fn check_model_gradients(
    net: &Network,
    images: &Tensor,
    labels: &[usize],
    reg: &RegConfig,
    step: f64,
) -> Result<f64> {
    let values: Vec<Tensor> = net.params().iter().map(|p| p.value().clone()).collect();
    grad_check(&values, step, |g, vars| {
        for (p, &v) in net.params().into_iter().zip(vars) {
            g.bind(p, v);
        }
        let x = g.constant(images.clone());
        let out = net.forward(g, x)?;
        let nll = mixture_nll(g, out.y, labels)?;
        let penalty = match out.gate {
            Some(p) => reg.apply(g, images, p)?,
            None => None,
        };
        total_loss(g, nll, penalty)
    })
}

#[cfg(test)]
mod tests;
