//! Three-stage training schedule expressed as freeze plans.
//!
//! Stage 1 aligns the projector alone; stage 2 extends tuning to the
//! language model; stage 3 trains only the dual-channel additions inside
//! the vision encoder (plus the projector) while the language model and
//! the base encoder weights stay frozen. The base encoder weights are
//! never trainable in any stage.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StageError {
    #[error("stage must be 1, 2 or 3, got {0}")]
    InvalidStage(u8),
}

/// The four parameter groups the schedule is defined over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    VisionEncoderBase,
    DualChannelPlus,
    Projector,
    Llm,
}

impl Component {
    pub const ALL: [Component; 4] = [
        Component::VisionEncoderBase,
        Component::DualChannelPlus,
        Component::Projector,
        Component::Llm,
    ];
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Component::VisionEncoderBase => "vision_encoder_base",
            Component::DualChannelPlus => "dual_channel_plus",
            Component::Projector => "projector",
            Component::Llm => "llm",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
    Three,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::One, Stage::Two, Stage::Three];

    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
            Stage::Three => 3,
        }
    }
}

impl TryFrom<u8> for Stage {
    type Error = StageError;

    fn try_from(value: u8) -> Result<Self, StageError> {
        match value {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            3 => Ok(Stage::Three),
            other => Err(StageError::InvalidStage(other)),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

/// Which components a stage may update; everything else is frozen.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezePlan {
    pub stage: Stage,
    pub trainable: BTreeSet<Component>,
}

impl FreezePlan {
    pub fn frozen(&self) -> BTreeSet<Component> {
        Component::ALL.iter().copied().filter(|c| !self.trainable.contains(c)).collect()
    }
}

/// The trainable set for a stage.
pub fn plan(stage: Stage) -> FreezePlan {
    let trainable = match stage {
        Stage::One => BTreeSet::from([Component::Projector]),
        Stage::Two => BTreeSet::from([Component::Projector, Component::Llm]),
        Stage::Three => BTreeSet::from([Component::Projector, Component::DualChannelPlus]),
    };
    FreezePlan { stage, trainable }
}

/// Every touched component outside the plan's trainable set, ascending;
/// empty means the update is valid.
pub fn validate_updates(plan: &FreezePlan, touched: &BTreeSet<Component>) -> Vec<Component> {
    touched.iter().copied().filter(|c| !plan.trainable.contains(c)).collect()
}
