pub mod config;
pub mod contagion;
pub mod diff;
pub mod env;
pub mod episode;
pub mod error;
pub mod eval;
pub mod failure;
pub mod policyprov;
pub mod stage1;
pub mod stage2;

pub use error::{Error, Result};

// The guide's snippets run as doc-tests, one module per chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/curvature.md")]
    mod curvature {}
    #[doc = include_str!("../../../book/src/environments.md")]
    mod environments {}
    #[doc = include_str!("../../../book/src/detection.md")]
    mod detection {}
    #[doc = include_str!("../../../book/src/traceback.md")]
    mod traceback {}
    #[doc = include_str!("../../../book/src/interventions.md")]
    mod interventions {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
