//! Experiment configuration, read from a JSON document.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::WorldConfig;
use crate::error::{Error, Result};
use crate::moe::{ExpertGroupLayout, MoeConfig};
use crate::routing::{BalanceMode, TailSelector};

/// Ablation arm. Each arm fixes the balancing scope and whether vision tail
/// tokens get the enlarged expert budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    /// Balancing over all tokens, `k` experts for every token.
    Baseline,
    /// Language-only balancing.
    Dar,
    /// All-token balancing plus enlarged activation for tail tokens.
    Eea,
    /// Language-only balancing plus enlarged activation.
    Ltdr,
    /// Vision-only balancing.
    MinusLlb,
    /// No balancing.
    MinusAlb,
    /// Disjoint vision/language expert groups with all-token balancing.
    ModalityGrouped,
}

impl Arm {
    pub const ALL: [Arm; 7] = [
        Arm::Baseline,
        Arm::Dar,
        Arm::Eea,
        Arm::Ltdr,
        Arm::MinusLlb,
        Arm::MinusAlb,
        Arm::ModalityGrouped,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Dar => "dar",
            Arm::Eea => "eea",
            Arm::Ltdr => "ltdr",
            Arm::MinusLlb => "minus-llb",
            Arm::MinusAlb => "minus-alb",
            Arm::ModalityGrouped => "modality-grouped",
        }
    }

    pub fn balance(self) -> BalanceMode {
        match self {
            Arm::Baseline | Arm::Eea | Arm::ModalityGrouped => BalanceMode::All,
            Arm::Dar | Arm::Ltdr => BalanceMode::LanguageOnly,
            Arm::MinusLlb => BalanceMode::VisionOnly,
            Arm::MinusAlb => BalanceMode::Off,
        }
    }

    /// Whether tail tokens are dispatched to `a` experts.
    pub fn enhances_activation(self) -> bool {
        matches!(self, Arm::Eea | Arm::Ltdr)
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::invalid("arm", format!("unknown arm `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Arms and seeds swept by `ablate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrid {
    pub arms: Vec<Arm>,
    pub seeds: Vec<u64>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self {
            arms: vec![
                Arm::Baseline,
                Arm::Dar,
                Arm::Eea,
                Arm::Ltdr,
                Arm::MinusLlb,
                Arm::MinusAlb,
            ],
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub arm: Arm,
    #[serde(rename = "K")]
    pub num_experts: usize,
    #[serde(rename = "k")]
    pub top_k: usize,
    #[serde(rename = "a")]
    pub tail_k: usize,
    pub alpha: f64,
    pub layers: usize,
    /// Expert hidden width; `4·d` when absent.
    pub hidden: Option<usize>,
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Tail selector for activation-enhancing arms; derived from the arm
    /// when absent.
    pub selector: Option<TailSelector>,
    pub renormalize_topk: bool,
    pub literal_eq10: bool,
    /// Held-out batches used for the final statistics.
    pub eval_batches: usize,
    /// Emit measured wall-clock in CSV outputs instead of zeros.
    pub record_timing: bool,
    /// Specialization entropy over all selected slots instead of top-1.
    pub specialization_all_slots: bool,
    pub world: WorldConfig,
    pub ablation: AblationGrid,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            arm: Arm::Ltdr,
            num_experts: 4,
            top_k: 2,
            tail_k: 4,
            alpha: 0.01,
            layers: 2,
            hidden: None,
            steps: 2000,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            selector: None,
            renormalize_topk: false,
            literal_eq10: false,
            eval_batches: 8,
            record_timing: false,
            specialization_all_slots: false,
            world: WorldConfig::default(),
            ablation: AblationGrid::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn hidden_width(&self) -> usize {
        self.hidden.unwrap_or(4 * self.world.d)
    }

    pub fn with_arm(&self, arm: Arm) -> Self {
        let mut c = self.clone();
        c.arm = arm;
        if !arm.enhances_activation() {
            c.selector = None;
        }
        c
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn effective_selector(&self) -> TailSelector {
        match (self.arm.enhances_activation(), self.selector) {
            (true, Some(s)) => s,
            (true, None) => TailSelector::Vtt,
            (false, _) => TailSelector::None,
        }
    }

    pub fn moe_config(&self) -> MoeConfig {
        let layout = if self.arm == Arm::ModalityGrouped {
            ExpertGroupLayout::split_halves(self.num_experts, self.top_k)
        } else {
            ExpertGroupLayout::Unified
        };
        MoeConfig {
            num_experts: self.num_experts,
            top_k: self.top_k,
            tail_k: self.tail_k,
            alpha: self.alpha,
            balance: self.arm.balance(),
            selector: self.effective_selector(),
            layout,
            renormalize_topk: self.renormalize_topk,
            literal_eq10: self.literal_eq10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        if self.layers == 0 {
            return Err(Error::invalid("layers", "need at least one MoE layer"));
        }
        if self.hidden == Some(0) {
            return Err(Error::invalid("hidden", "must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate", "must be finite and >= 0"));
        }
        if self.eval_batches == 0 {
            return Err(Error::invalid("eval_batches", "need at least one evaluation batch"));
        }
        match (self.arm.enhances_activation(), self.selector) {
            (false, Some(TailSelector::Vtt | TailSelector::Vht)) => {
                return Err(Error::invalid(
                    "selector",
                    format!(
                        "arm `{}` does not enhance expert activation, so selector must be none",
                        self.arm
                    ),
                ))
            }
            (true, Some(TailSelector::None)) => {
                return Err(Error::invalid(
                    "selector",
                    format!("arm `{}` requires a vtt or vht selector", self.arm),
                ))
            }
            _ => {}
        }
        if self.arm == Arm::ModalityGrouped && self.num_experts < 2 * (self.top_k / 2).max(1) {
            return Err(Error::invalid(
                "K",
                "modality-grouped arm needs at least k/2 experts per group",
            ));
        }
        if self.ablation.seeds.is_empty() {
            return Err(Error::invalid("ablation.seeds", "need at least one seed"));
        }
        if self.ablation.arms.is_empty() {
            return Err(Error::invalid("ablation.arms", "need at least one arm"));
        }
        self.moe_config().validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Reads, applies defaults to, and validates a JSON config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    ExperimentConfig::from_json(&text)
}
