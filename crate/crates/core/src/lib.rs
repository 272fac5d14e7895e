//! Event-guided image restoration at desk scale.
//!
//! The crate bundles a small reverse-mode tensor engine ([`autograd`]), an
//! event-camera pipeline ([`events`]), the two fusion blocks of the network
//! ([`tsam`] for top-k sparse cross-modal attention and [`gssm`] for the gated
//! state-space block), the UNet that assembles them ([`network`]), and the
//! training/evaluation harness ([`harness`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod error;
pub mod etsr;
pub mod events;
pub mod gssm;
pub mod harness;
pub mod network;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod tsam;

pub use autograd::{Mask, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
