//! Experiment configuration: one JSON file describes one sweep and owns one
//! output directory.

use std::fmt;
use std::path::{Path, PathBuf};

use moe_core::model::GateKind;
use moe_core::regularizers::{RegConfig, RegKind};
use moe_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// The nine training regimes. Each maps to one gate kind and one
/// regularizer, or to distillation from a stored attentive model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "single_model")]
    SingleModel,
    #[serde(rename = "vanilla")]
    Vanilla,
    #[serde(rename = "vanilla+importance")]
    VanillaImportance,
    #[serde(rename = "vanilla+Ls")]
    VanillaSimilarity,
    #[serde(rename = "attentive")]
    Attentive,
    #[serde(rename = "attentive+importance")]
    AttentiveImportance,
    #[serde(rename = "attentive+Ls")]
    AttentiveSimilarity,
    #[serde(rename = "distill_from_importance")]
    DistillFromImportance,
    #[serde(rename = "distill_from_Ls")]
    DistillFromSimilarity,
}

impl Regime {
    pub const ALL: [Regime; 9] = [
        Regime::SingleModel,
        Regime::Vanilla,
        Regime::VanillaImportance,
        Regime::VanillaSimilarity,
        Regime::Attentive,
        Regime::AttentiveImportance,
        Regime::AttentiveSimilarity,
        Regime::DistillFromImportance,
        Regime::DistillFromSimilarity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regime::SingleModel => "single_model",
            Regime::Vanilla => "vanilla",
            Regime::VanillaImportance => "vanilla+importance",
            Regime::VanillaSimilarity => "vanilla+Ls",
            Regime::Attentive => "attentive",
            Regime::AttentiveImportance => "attentive+importance",
            Regime::AttentiveSimilarity => "attentive+Ls",
            Regime::DistillFromImportance => "distill_from_importance",
            Regime::DistillFromSimilarity => "distill_from_Ls",
        }
    }

    /// Gate of the trained model; `None` for the single network.
    /// Distilled models always end up softmax-gated.
    pub fn gate(self) -> Option<GateKind> {
        match self {
            Regime::SingleModel => None,
            Regime::Attentive | Regime::AttentiveImportance | Regime::AttentiveSimilarity => Some(GateKind::Attentive),
            _ => Some(GateKind::Softmax),
        }
    }

    pub fn reg_kind(self) -> RegKind {
        match self {
            Regime::VanillaImportance | Regime::AttentiveImportance => RegKind::Importance,
            Regime::VanillaSimilarity | Regime::AttentiveSimilarity => RegKind::Similarity,
            _ => RegKind::None,
        }
    }

    pub fn is_distill(self) -> bool {
        matches!(self, Regime::DistillFromImportance | Regime::DistillFromSimilarity)
    }

    /// Best-effort regime of a bare report. Distilled models are
    /// indistinguishable from vanilla ones without the sweep summary.
    pub fn infer(gate: Option<GateKind>, reg: RegKind) -> Regime {
        match (gate, reg) {
            (None, _) => Regime::SingleModel,
            (Some(GateKind::Softmax), RegKind::None) => Regime::Vanilla,
            (Some(GateKind::Softmax), RegKind::Importance) => Regime::VanillaImportance,
            (Some(GateKind::Softmax), RegKind::Similarity) => Regime::VanillaSimilarity,
            (Some(GateKind::Attentive), RegKind::None) => Regime::Attentive,
            (Some(GateKind::Attentive), RegKind::Importance) => Regime::AttentiveImportance,
            (Some(GateKind::Attentive), RegKind::Similarity) => Regime::AttentiveSimilarity,
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    Mnist,
    Fmnist,
    /// 12 classes: six FMNIST garments followed by MNIST digits 4–9.
    Combined,
}

/// Regularizer hyperparameters to sweep. Similarity points are the cartesian
/// product of `beta_s` and `beta_d`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    pub w_importance: Vec<f64>,
    pub beta_s: Vec<f64>,
    pub beta_d: Vec<f64>,
}

/// Optimizer settings shared by every run of the sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFields {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TrainFields {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainFields {
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.lr,
        }
    }
}

fn default_train_size() -> Option<usize> {
    Some(10_000)
}

fn default_test_size() -> Option<usize> {
    Some(2_000)
}

fn default_experts() -> usize {
    5
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub kind: Regime,
    #[serde(default)]
    pub dataset: DatasetKind,
    /// Dataset root holding `mnist/` and `fmnist/`. Falls back to
    /// `$MOE_LAB_DATA_DIR`, then `./data`.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    /// Class-balanced training subsample size; `null` keeps the full split.
    #[serde(default = "default_train_size")]
    pub train_size: Option<usize>,
    #[serde(default = "default_test_size")]
    pub test_size: Option<usize>,
    /// Seed of the subsample draw. Kept apart from the training seeds so
    /// that every run of a sweep sees the same data.
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default = "default_experts")]
    pub experts: usize,
    /// Relu before the expert and gate softmax. `false` runs the ablation
    /// without it.
    #[serde(default = "yes")]
    pub output_relu: bool,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub grid: Grid,
    #[serde(default)]
    pub train: TrainFields,
    /// Attentive-gated checkpoint to distill from.
    #[serde(default)]
    pub source_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

/// One hyperparameter setting of the sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub label: String,
    pub reg: RegConfig,
}

fn invalid(field: &str, msg: impl fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {msg}"))
}

fn check_positive(field: &str, values: &[f64]) -> Result<(), CliError> {
    for (i, v) in values.iter().enumerate() {
        if !(v.is_finite() && *v > 0.0) {
            return Err(invalid(
                &format!("grid.{field}[{i}]"),
                format!("must be positive, got {v}"),
            ));
        }
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.name.trim().is_empty() {
            return Err(invalid("name", "must not be empty"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "at least one seed is required"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(invalid("seeds", "seeds must be distinct"));
        }
        if self.experts == 0 {
            return Err(invalid("experts", "must be at least 1"));
        }
        for (field, size) in [("train_size", self.train_size), ("test_size", self.test_size)] {
            if size == Some(0) {
                return Err(invalid(field, "must be positive or null"));
            }
        }
        let t = self.train;
        if t.epochs == 0 {
            return Err(invalid("train.epochs", "must be at least 1"));
        }
        if t.batch_size == 0 {
            return Err(invalid("train.batch_size", "must be at least 1"));
        }
        if !(t.lr.is_finite() && t.lr > 0.0) {
            return Err(invalid("train.lr", format!("must be positive, got {}", t.lr)));
        }

        let g = &self.grid;
        check_positive("w_importance", &g.w_importance)?;
        check_positive("beta_s", &g.beta_s)?;
        check_positive("beta_d", &g.beta_d)?;
        let kind = self.kind;
        let (want_w, want_beta) = match kind.reg_kind() {
            RegKind::Importance => (true, false),
            RegKind::Similarity => (false, true),
            RegKind::None => (false, false),
        };
        if want_w && g.w_importance.is_empty() {
            return Err(invalid("grid.w_importance", format!("required for {kind}")));
        }
        if !want_w && !g.w_importance.is_empty() {
            return Err(invalid("grid.w_importance", format!("not used by {kind}")));
        }
        for (field, values) in [("beta_s", &g.beta_s), ("beta_d", &g.beta_d)] {
            if want_beta && values.is_empty() {
                return Err(invalid(&format!("grid.{field}"), format!("required for {kind}")));
            }
            if !want_beta && !values.is_empty() {
                return Err(invalid(&format!("grid.{field}"), format!("not used by {kind}")));
            }
        }
        if want_beta && t.batch_size < 2 {
            return Err(invalid("train.batch_size", "the similarity loss needs at least 2"));
        }

        match (kind.is_distill(), &self.source_checkpoint) {
            (true, None) => return Err(invalid("source_checkpoint", format!("required for {kind}"))),
            (false, Some(_)) => return Err(invalid("source_checkpoint", format!("not used by {kind}"))),
            _ => {}
        }
        Ok(())
    }

    /// Grid points in a fixed order: `w_importance` as listed, or
    /// `beta_s`-major over `beta_d`.
    pub fn grid_points(&self) -> Vec<GridPoint> {
        match self.kind.reg_kind() {
            RegKind::None => vec![GridPoint {
                label: "default".into(),
                reg: RegConfig::none(),
            }],
            RegKind::Importance => self
                .grid
                .w_importance
                .iter()
                .map(|&w| GridPoint {
                    label: format!("w_importance={w:e}"),
                    reg: RegConfig::importance(w),
                })
                .collect(),
            RegKind::Similarity => self
                .grid
                .beta_s
                .iter()
                .flat_map(|&bs| {
                    self.grid.beta_d.iter().map(move |&bd| GridPoint {
                        label: format!("beta_s={bs:e},beta_d={bd:e}"),
                        reg: RegConfig::similarity(bs, bd),
                    })
                })
                .collect(),
        }
    }

    /// Training settings of one run.
    pub fn train_config(&self, point: &GridPoint, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            seed,
            reg: point.reg,
        }
    }

    /// Dataset root: the config's `data_dir`, else `$MOE_LAB_DATA_DIR`,
    /// else `./data`.
    pub fn data_root(&self) -> PathBuf {
        if let Some(d) = &self.data_dir {
            return d.clone();
        }
        std::env::var_os("MOE_LAB_DATA_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("data"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(kind: &str) -> String {
        format!(r#"{{"name": "t", "kind": "{kind}"}}"#)
    }

    #[test]
    fn every_regime_name_round_trips() {
        for r in Regime::ALL {
            let s = serde_json::to_string(&r).unwrap();
            assert_eq!(s, format!("\"{}\"", r.name()));
            assert_eq!(serde_json::from_str::<Regime>(&s).unwrap(), r);
        }
    }

    #[test]
    fn defaults_fill_a_minimal_config() {
        let c = ExperimentConfig::from_json(&base("vanilla")).unwrap();
        assert_eq!(c.dataset, DatasetKind::Mnist);
        assert_eq!((c.train_size, c.test_size, c.experts), (Some(10_000), Some(2_000), 5));
        assert!(c.output_relu);
        assert_eq!(c.seeds, vec![0]);
        assert_eq!(c.train, TrainFields::default());
        assert_eq!(c.grid_points().len(), 1);
    }

    #[test]
    fn similarity_grid_is_a_product() {
        let c = ExperimentConfig::from_json(
            r#"{"name": "g", "kind": "attentive+Ls", "seeds": [0, 1, 2],
                "grid": {"beta_s": [1e-6, 1e-5], "beta_d": [1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6]}}"#,
        )
        .unwrap();
        let pts = c.grid_points();
        assert_eq!(pts.len(), 12);
        assert_eq!(pts[0].label, "beta_s=1e-6,beta_d=1e-1");
        assert_eq!(pts[11].reg, RegConfig::similarity(1e-5, 1e-6));
    }

    #[test]
    fn invalid_fields_are_named() {
        let cases = [
            (
                r#"{"name": "t", "kind": "vanilla+Ls", "grid": {"beta_s": [-1e-6], "beta_d": [1e-3]}}"#,
                "beta_s",
            ),
            (r#"{"name": "t", "kind": "vanilla+importance"}"#, "w_importance"),
            (
                r#"{"name": "t", "kind": "vanilla", "grid": {"beta_d": [0.1]}}"#,
                "beta_d",
            ),
            (r#"{"name": "t", "kind": "distill_from_Ls"}"#, "source_checkpoint"),
            (r#"{"name": "t", "kind": "vanilla", "train": {"lr": 0}}"#, "train.lr"),
            (r#"{"name": "t", "kind": "vanilla", "seeds": []}"#, "seeds"),
            (r#"{"name": "t", "kind": "vanilla", "epochz": 3}"#, "epochz"),
            (r#"{"name": "t", "kind": "sparse"}"#, "sparse"),
        ];
        for (json, field) in cases {
            match ExperimentConfig::from_json(json) {
                Err(CliError::Config(msg)) => assert!(msg.contains(field), "{msg} should name {field}"),
                other => panic!("{json}: expected a config error, got {other:?}"),
            }
        }
    }
}
