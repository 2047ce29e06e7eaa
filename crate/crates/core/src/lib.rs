//! Numerical weak KAM theory on flat tori and the Heisenberg nilmanifold.
//!
//! The pipeline: a Tonelli [`geometry::Lagrangian`] on a [`geometry::ModelSpace`],
//! short-time minimal actions on a [`grid::Grid`] ([`tonelli`]), the discrete
//! Lax–Oleinik semigroup and its fixed points ([`semigroup`]), barriers and
//! Aubry sets ([`aubry`]), and Mather measures, the `β` function and
//! homogenization ([`mather`], [`homogenize`]).

pub mod aubry;
pub mod config;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod homogenize;
pub mod mather;
pub mod semigroup;
pub mod simplex;
pub mod tonelli;

pub use error::{Error, Result};
