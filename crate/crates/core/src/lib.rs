//! Joint invariant and equivariant self-supervised learning with projection
//! experts that are softly routed between the two tasks.
//!
//! The crate is organized bottom up:
//!
//! - [`autodiff`]: tensors, a reverse-mode tape, SGD and gradient checks.
//! - [`data`]: procedural shape images and the 12-parameter augmentation
//!   pipeline.
//! - [`models`]: encoder, expert bank, routers and equivariant predictor.
//! - [`objectives`]: the two InfoNCE losses.
//! - [`trainer`]: batches, steps and full runs.
//! - [`eval`]: probes, retrieval, CCA, routing, equivariance and gradient
//!   alignment.
//! - [`io`]: configuration files, checkpoints, embedding dumps and reports.
//!
//! ```
//! use star::eval::{EvalSession, Tap};
//! use star::trainer::{train_run, TrainConfig};
//!
//! let mut cfg = TrainConfig::default();
//! cfg.epochs = 1;
//! cfg.batch_size = 16;
//! cfg.dataset.n_images = 48;
//! let run = train_run(&cfg, None)?;
//! let session = EvalSession::from_run(&cfg, run)?;
//! let acc = session.knn(Tap::Repr, 5)?;
//! assert!((0.0..=1.0).contains(&acc));
//! # Ok::<(), star::Error>(())
//! ```

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod io;
pub mod models;
pub mod objectives;
pub mod trainer;

pub use error::{Error, Result};

// The guide's code blocks run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/objectives.md")]
    mod objectives {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
