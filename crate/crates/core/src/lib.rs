//! Planning toolkit for CT-guided robotic needle insertion.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod collision;
pub mod geometry;
pub mod kinematics;
pub mod mesh;
pub mod phantom;
pub mod planner;
pub mod raycast;
pub mod registration;
pub mod segmentation;
pub mod volume;
pub mod pipeline;
pub mod service;
pub mod synth;
pub mod cli;
