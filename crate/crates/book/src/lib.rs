//! Every chapter of the guide becomes the doc comment of a module here, so
//! `cargo test` runs each code block in the book as a doctest.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/schedules.md")]
pub mod schedules {}
#[doc = include_str!("../../../book/src/identities.md")]
pub mod identities {}
#[doc = include_str!("../../../book/src/dsm.md")]
pub mod dsm {}
#[doc = include_str!("../../../book/src/network.md")]
pub mod network {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
