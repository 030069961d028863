//! Detects tampered object-detection outputs by checking whether each
//! detected object is consistent with the scene context predicted by a
//! masked-token transformer trained on benign scenes.
//!
//! Detections are written as SCENE-Lang sentences ([`scene_lang`]), a small
//! bidirectional encoder learns which objects belong together ([`model`]),
//! and [`scorer`] reduces an image to the minimum per-object confidence.
//! [`attacks`], [`baselines`] and [`eval`] provide the evaluation harness.

pub mod attacks;
pub mod baselines;
pub mod corpus;
pub mod eval;
pub mod model;
pub mod scene_lang;
pub mod scorer;
