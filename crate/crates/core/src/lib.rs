//! Frequency-band swap attacks as a regularizer for unsupervised domain adaptation.
//!
//! Images are decomposed into annular frequency bands; a learnable gate picks
//! bands to replace with those of a target-domain reference image, producing
//! large-magnitude but semantics-preserving adversarial samples. Training
//! alternates a defend step on the task model with an attack step on the gate.

pub mod attacker;
pub mod data;
pub mod error;
pub mod gate;
pub mod image;
pub mod io;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod plot;
pub mod seed;
pub mod spectral;
pub mod trainer;
pub mod uda;

pub use attacker::{AdversarialSample, Attacker, AttackerParams, ReferencePool};
pub use error::{Error, Result};
pub use gate::{GateParams, GateSample};
pub use image::Image;
pub use model::{ModelKind, Prediction, TaskModel};
pub use spectral::{BandPartition, BandStack, Spectrum};
pub use trainer::{train, TrainConfig, TrainOutput, Trainer};
pub use uda::{LossConfig, Mode, UnsupKind};
