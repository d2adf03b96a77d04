//! Jaccard similarity losses (JVS, JCC, JFIP) and the comparison losses they
//! are measured against, embedded in a small from-scratch training stack for
//! early action prediction and action anticipation on synthetic
//! feature sequences.

pub mod audit;
pub mod autodiff;
mod binio;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod objective;
pub mod par;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod trainer;

pub use autodiff::{grad_check, GradCheck, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
