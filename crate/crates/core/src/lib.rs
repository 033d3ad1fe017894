//! Generative-to-retrieval distillation at desk scale.
//!
//! A trigram teacher ([`teacher`]) augments a dialogue corpus ([`corpus`])
//! with sampled responses and scores every response ([`augment`]). A dual
//! encoder ([`biencoder`]) is trained on the augmented data with
//! cross-entropy plus a distillation term over the teacher scores
//! ([`train`]), and responses are served by maximum inner product search
//! ([`mips`], [`serve`]).
//!
//! The guide in `book/` walks through each stage; its code listings are
//! compiled and run as doctests of this crate.

pub mod augment;
mod binio;
pub mod biencoder;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod mips;
pub mod pipeline;
pub mod rng;
pub mod serve;
pub mod teacher;
pub mod train;

pub use error::{G2rError, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/corpus.md")]
    mod corpus {}
    #[doc = include_str!("../../../book/src/teacher.md")]
    mod teacher {}
    #[doc = include_str!("../../../book/src/augmentation.md")]
    mod augmentation {}
    #[doc = include_str!("../../../book/src/retriever.md")]
    mod retriever {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/search.md")]
    mod search {}
    #[doc = include_str!("../../../book/src/serving.md")]
    mod serving {}
}
