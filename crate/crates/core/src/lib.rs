// SPDX-License-Identifier: MIT OR Apache-2.0

#![no_std]

extern crate alloc;

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod intervene;
pub mod localize;
pub mod model;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use intervene::{ContrastVector, InterventionSet, LabeledPair, OffsetParams, ScalingParams};
pub use localize::{HeadScoreTable, SelectionConfig, SelectionMethod};
pub use model::{ForwardTrace, HeadId, HookSource, Hooks, Model, ModelConfig, NoHooks};
pub use rng::Rng;
pub use tasks::{EvalReport, PreferencePair, TaskData, TaskExample, TaskKind};
pub use tensor::Tensor;
pub use train::{OptimizerState, StepRecord, TrainConfig};
