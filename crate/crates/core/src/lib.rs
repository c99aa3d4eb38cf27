//! Compute core for signature forgery synthesis: a small reverse-mode tensor
//! engine, the inception/attention networks built on it, cycle-consistent
//! adversarial training, the generated quality metric and a spoofing
//! benchmark. Works under `no_std` with `alloc`; the `std` feature adds
//! per-sample parallelism.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod error;
pub mod gqm;
pub mod graph;
pub mod kernels;
pub mod linalg;
pub mod models;
pub mod nnblocks;
pub mod params;
pub mod sigdata;
pub mod spoofbench;
pub mod stats;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use models::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, ModelCheckpoint};
pub use sigdata::{Corpus, DomainBundle, DomainMode, Label, SignatureImage, SignatureSample};
pub use tensor::{Real, Tensor};
pub use training::{LossRecord, TrainConfig};
