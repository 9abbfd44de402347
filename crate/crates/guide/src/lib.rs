//! The chapters of `book/src`, one module each. Building the docs here runs every
//! snippet in the guide as a doc test.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/point-clouds.md")]
pub mod point_clouds {}

#[doc = include_str!("../../../book/src/granularity.md")]
pub mod granularity {}

#[doc = include_str!("../../../book/src/blinding.md")]
pub mod blinding {}

#[doc = include_str!("../../../book/src/rope.md")]
pub mod rope {}

#[doc = include_str!("../../../book/src/serialization.md")]
pub mod serialization {}

#[doc = include_str!("../../../book/src/encoder.md")]
pub mod encoder {}

#[doc = include_str!("../../../book/src/distillation.md")]
pub mod distillation {}

#[doc = include_str!("../../../book/src/synthbench.md")]
pub mod synthbench {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
