//! Evolution strategies combined with soft actor-critic, plus automatic
//! tuning of the ES mutation scale.

pub mod amt;
pub mod config;
pub mod envs;
pub mod error;
pub mod es_core;
pub mod esac;
pub mod harness;
pub mod nnet;
pub mod parallel;
pub mod rng;
pub mod sac_core;

pub use error::{Error, Result};
