pub mod archive;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod factorization;
pub mod fnm;
pub mod fsutil;
pub mod knn;
pub mod model;
pub mod rng;

pub use error::{Error, Result};
pub use model::{Learner, Predictor};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/weights.md")]
    mod weights {}
    #[doc = include_str!("../../../book/src/learners.md")]
    mod learners {}
    #[doc = include_str!("../../../book/src/ensembles.md")]
    mod ensembles {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/config.md")]
    mod config {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/archive.md")]
    mod archive {}
}
