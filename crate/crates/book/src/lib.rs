//! Runs the code in the guide under `book/src` as doc tests, one module per
//! chapter so a failure names the chapter it came from.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/formats.md")]
pub mod formats {}
#[doc = include_str!("../../../book/src/blocks.md")]
pub mod blocks {}
#[doc = include_str!("../../../book/src/sensitivity.md")]
pub mod sensitivity {}
#[doc = include_str!("../../../book/src/thresholds.md")]
pub mod thresholds {}
#[doc = include_str!("../../../book/src/clipping.md")]
pub mod clipping {}
#[doc = include_str!("../../../book/src/datapath.md")]
pub mod datapath {}
#[doc = include_str!("../../../book/src/cost.md")]
pub mod cost {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
#[doc = include_str!("../../../README.md")]
pub mod readme {}
