pub mod audio;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod seeds;
pub mod tensorcore;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensorcore.md")]
    mod tensorcore {}
    #[doc = include_str!("../../../book/src/audio.md")]
    mod audio {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
