//! Mesh-free operator learning with modulated neural fields.
//!
//! The crate is organised around an encode-process-decode pipeline over
//! function spaces: fields observed on arbitrary point sets are compressed
//! into latent codes by auto-decoding against a shared modulated SIREN
//! ([`inr`], [`codec`]), the shared network is meta-trained with a
//! second-order outer loop ([`train`]), and latent codes are mapped forward
//! by an MLP or a neural-ODE processor ([`processor`]). Everything is built
//! on a small reverse-mode autodiff engine ([`autodiff`]) that supports
//! nested differentiation, which is what makes the second-order outer loop
//! expressible.
//!
//! The crate is `no_std`-compatible (with `alloc`); file formats, the CLI
//! and task orchestration live in the companion `coral-cli` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod codec;
pub mod data;
mod error;
mod flt;
pub mod inr;
pub mod processor;
pub mod tensor;
pub mod train;

pub use error::{CoreError, Result};
pub use tensor::Tensor;
