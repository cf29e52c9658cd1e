use std::fmt;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use crate::ams::TrainState;
use crate::error::Result;
use crate::model::{CtrModel, ModelConfig, ParamGroup};
use crate::numerics::AdamConfig;

/// Named warm-up strategies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Warmup {
    /// Start from scratch.
    Non,
    /// Restore everything except the ID embeddings.
    Partial,
    /// Restore everything.
    Full,
}

impl Warmup {
    pub const ALL: [Warmup; 3] = [Warmup::Non, Warmup::Partial, Warmup::Full];

    pub fn name(self) -> &'static str {
        match self {
            Warmup::Non => "non",
            Warmup::Partial => "partial",
            Warmup::Full => "full",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|w| w.name() == s)
    }

    pub fn mask(self) -> WarmupMask {
        match self {
            Warmup::Non => WarmupMask::new(&[]),
            Warmup::Partial => WarmupMask::new(&[
                ParamGroup::ImageModel,
                ParamGroup::Mlp,
                ParamGroup::Attention,
            ]),
            Warmup::Full => WarmupMask::new(&ParamGroup::ALL),
        }
    }
}

impl fmt::Display for Warmup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which parameter groups come from the checkpoint; the rest are freshly initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WarmupMask {
    restore: [bool; 4],
}

impl WarmupMask {
    pub fn new(restore: &[ParamGroup]) -> Self {
        let mut r = [false; 4];
        for (i, g) in ParamGroup::ALL.iter().enumerate() {
            r[i] = restore.contains(g);
        }
        Self { restore: r }
    }

    pub fn restores(&self, group: ParamGroup) -> bool {
        let i = ParamGroup::ALL
            .iter()
            .position(|&g| g == group)
            .expect("group is listed");
        self.restore[i]
    }

    pub fn restores_any(&self) -> bool {
        self.restore.iter().any(|&r| r)
    }
}

/// Fresh model from `config` and `seed`, with the masked groups (values and
/// optimizer state) taken from `checkpoint`.
pub fn load_warmup(
    checkpoint: &Checkpoint,
    config: &ModelConfig,
    mask: WarmupMask,
    seed: u64,
    adam: AdamConfig,
) -> Result<TrainState> {
    let mut state = TrainState::new(CtrModel::new(config.clone(), seed)?, adam);
    for group in ParamGroup::ALL {
        if mask.restores(group) {
            checkpoint.restore_group(&mut state, group)?;
        } else {
            checkpoint.group(group)?;
        }
    }
    if mask.restores_any() {
        state.iteration = checkpoint.iteration;
    }
    Ok(state)
}
