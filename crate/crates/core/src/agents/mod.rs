//! Training loops: TD3 with C51 critics, PPO, and the label-shuffling
//! supervised trainer.

mod nonstat;
mod ppo;
mod replay;
mod td3;

pub use nonstat::{nonstationary_train, NonstatConfig, NonstatRun};
pub use ppo::{evaluate_ppo, ppo_gae, ppo_train, ppo_update, PpoAgent, PpoConfig, PpoLosses, PpoRun, Rollout};
pub use replay::{Batch, ReplayBuffer, Transition};
pub use td3::{
    actor_loss, cdq_target, critic_loss, evaluate_policy, explore_action, q_values, scalar_backup, target_action,
    td3_diagnostics, td3_train, CriticStats, CriticTarget, Td3Agent, Td3Config, Td3Run,
};

use serde::{Deserialize, Serialize};

use crate::diagnostics::MetricsRow;
use crate::error::{Error, Result};
use crate::heads::HeadKind;
use crate::networks::Checkpoint;

/// Receives evaluation rows and periodic checkpoints from a training loop.
pub trait MetricsSink {
    fn record(&mut self, row: &MetricsRow) -> Result<()>;

    fn checkpoint(&mut self, _ckpt: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

impl MetricsSink for Vec<MetricsRow> {
    fn record(&mut self, row: &MetricsRow) -> Result<()> {
        self.push(row.clone());
        Ok(())
    }
}

/// Which networks receive the configured head; the others use the baseline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadPlacement {
    #[default]
    Actor,
    Critic,
    Both,
}

impl HeadPlacement {
    /// `(actor head, critic head)`.
    pub fn split(self, head: &HeadKind) -> (HeadKind, HeadKind) {
        match self {
            HeadPlacement::Actor => (head.clone(), HeadKind::Baseline),
            HeadPlacement::Critic => (HeadKind::Baseline, head.clone()),
            HeadPlacement::Both => (head.clone(), head.clone()),
        }
    }
}

pub(crate) fn finite_or_abort(value: f64, step: u64, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Aborted {
            step,
            reason: format!("{what} became {value}"),
        })
    }
}
