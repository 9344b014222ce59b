//! Chaotic-map data augmentation, contrastive (NT-Xent) pretraining and
//! squeeze-and-excitation feature fusion for texture classification.
//!
//! The crate is organised bottom-up:
//!
//! - [`dynamics`]: the Logistic, Tent and Sine maps and orbit statistics.
//! - [`imaging`]: images, the pixel-wise chaotic operator and view pairs.
//! - [`autograd`]: a small tape-based reverse-mode differentiation kernel.
//! - [`network`]: encoder, projector, SE fusion and classifier head.
//! - [`training`]: NT-Xent, AdamW, cosine annealing, pretraining and fine-tuning.
//! - [`data`]: procedural texture corpus, image folders and stratified folds.
//! - [`evaluation`]: confusion matrices, accuracy/F1, linear probe and map ablation.

pub mod autograd;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod evaluation;
pub mod imaging;
pub mod network;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
