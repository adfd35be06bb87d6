pub mod attention;
pub mod cache_sharing;
pub mod costmodel;
mod error;
pub mod model;
pub mod numerics;
pub mod rope;
pub mod verify;

pub use error::{Error, Result};

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/plans.md")]
    mod plans {}
    #[doc = include_str!("../../../book/src/rope.md")]
    mod rope {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/cost.md")]
    mod cost {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
