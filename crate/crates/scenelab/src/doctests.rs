//! Compiles the guide chapters' code blocks as doc-tests so the book can
//! never drift from the library.

#![allow(unused)]

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/scene-plans.md")]
mod scene_plans {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cameras-and-masks.md")]
mod cameras_and_masks {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/depth-rendering.md")]
mod depth_rendering {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/attention-masks.md")]
mod attention_masks {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/box-fitting.md")]
mod box_fitting {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/refinement-loop.md")]
mod refinement_loop {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/relation-scoring.md")]
mod relation_scoring {}
