//! Consistent-subject generation at desk scale.
//!
//! A miniature rectified-flow diffusion transformer whose target sample attends
//! over image tokens of clean reference samples (group-shared attention),
//! trained through LoRA adapters in two stages: flow matching with asymmetric
//! timesteps, then flow-matching DPO on a separate zero-initialized adapter.

pub mod tensor;
pub mod model;
pub mod flow;
pub mod dpo;
pub mod data;
pub mod optim;
pub mod train;
pub mod config;
pub mod checkpoint;
pub mod eval;
pub mod check;
