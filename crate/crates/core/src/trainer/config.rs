use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{BinaryLoss, BinaryLossKind, Loss, LossKind};
use crate::model::ModelKind;
use crate::optim::OptimizerKind;
use crate::risk::PriorMode;

/// Training objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Descend on the unbiased estimator.
    Free,
    /// Descend on the clamped class terms of each minibatch.
    Maxop,
    /// Descend while every class term is at least `-β`, otherwise ascend the squashed terms.
    #[default]
    GradientAscent,
    /// Pairwise-comparison baseline through the constant-sum identity.
    PcBaseline,
    /// Forward loss correction baseline.
    ForwardBaseline,
}

/// Every training knob. Deserializes from a flat key/value document; absent keys take defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub estimator: Estimator,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub decoupled_weight_decay: bool,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta: f64,
    pub gamma: f64,
    pub seed: u64,
    /// Halve the learning rate every this many epochs.
    pub lr_halving: Option<usize>,
    pub model: ModelKind,
    pub hidden: usize,
    /// Ordinary loss for the free, maxop and gradient-ascent estimators.
    pub loss: LossKind,
    /// Binary loss of the pairwise-comparison baseline.
    pub pc_binary: BinaryLossKind,
    pub priors: PriorMode,
    /// Stop once validation free-risk has not improved for this many epochs.
    pub patience: Option<usize>,
    /// Record elapsed seconds in epoch metrics (makes the stream non-reproducible).
    pub record_wall_clock: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            estimator: Estimator::GradientAscent,
            optimizer: OptimizerKind::Adam,
            lr: 5e-5,
            weight_decay: 1e-4,
            decoupled_weight_decay: false,
            momentum: 0.9,
            batch_size: 256,
            epochs: 300,
            beta: 0.0,
            gamma: 1.0,
            seed: 0,
            lr_halving: None,
            model: ModelKind::Mlp,
            hidden: 500,
            loss: LossKind::SoftmaxCe,
            pc_binary: BinaryLossKind::Ramp,
            priors: PriorMode::Empirical,
            patience: None,
            record_wall_clock: false,
        }
    }
}

pub const FIELDS: &[&str] = &[
    "estimator",
    "optimizer",
    "lr",
    "weight_decay",
    "decoupled_weight_decay",
    "momentum",
    "batch_size",
    "epochs",
    "beta",
    "gamma",
    "seed",
    "lr_halving",
    "model",
    "hidden",
    "loss",
    "pc_binary",
    "priors",
    "patience",
    "record_wall_clock",
];

impl TrainerConfig {
    /// Range checks; returns one message per offending field.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.lr.is_finite() && self.lr > 0.0) {
            out.push(format!("lr: must be positive, got {}", self.lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            out.push(format!("weight_decay: must be non-negative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            out.push(format!("momentum: must be in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            out.push("batch_size: must be positive".into());
        }
        if self.epochs == 0 {
            out.push("epochs: must be positive".into());
        }
        if !self.beta.is_finite() {
            out.push(format!("beta: must be finite, got {}", self.beta));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            out.push(format!("gamma: must be in (0, 1], got {}", self.gamma));
        }
        if self.lr_halving == Some(0) {
            out.push("lr_halving: period must be positive".into());
        }
        if self.model == ModelKind::Mlp && self.hidden == 0 {
            out.push("hidden: an MLP needs at least one hidden unit".into());
        }
        if self.patience == Some(0) {
            out.push("patience: must be positive".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigFields(p))
        }
    }

    /// Parses a flat TOML document, reporting every unknown key, type error and
    /// range violation together.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        Self::from_table(&table)
    }

    pub fn from_table(table: &toml::Table) -> Result<Self> {
        let mut problems = Vec::new();
        let mut merged = toml::Table::try_from(Self::default()).expect("defaults serialize");
        for (key, value) in table {
            if !FIELDS.contains(&key.as_str()) {
                problems.push(format!("{key}: unknown field"));
                continue;
            }
            let mut single = toml::Table::try_from(Self::default()).expect("defaults serialize");
            single.insert(key.clone(), value.clone());
            match single.try_into::<Self>() {
                Ok(_) => {
                    merged.insert(key.clone(), value.clone());
                }
                Err(e) => problems.push(format!("{key}: {}", e.message())),
            }
        }
        let cfg: Self = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        problems.extend(cfg.problems());
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::ConfigFields(problems))
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Loss whose free risk scores this run: the trained loss for the
    /// complementary estimators, the matching ordinary loss for the baselines.
    pub fn evaluation_loss(&self) -> Loss {
        match self.estimator {
            Estimator::PcBaseline => Loss::PairwiseComparison(BinaryLoss::new(self.pc_binary)),
            Estimator::ForwardBaseline => Loss::SoftmaxCrossEntropy,
            _ => Loss::from(self.loss),
        }
    }
}
