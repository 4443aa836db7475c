//! The book chapters, pulled in as doc comments so that `cargo test` runs
//! every snippet against the current library.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}
#[doc = include_str!("../../../book/src/ssm.md")]
pub mod ssm {}
#[doc = include_str!("../../../book/src/gis.md")]
pub mod gis {}
#[doc = include_str!("../../../book/src/pose.md")]
pub mod pose {}
#[doc = include_str!("../../../book/src/distillation.md")]
pub mod distillation {}
#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
