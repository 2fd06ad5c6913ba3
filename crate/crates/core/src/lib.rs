//! Neural mutual information estimators and cooperative capacity learning
//! for additive-noise channels.
//!
//! The crate is layered: [`autodiff`] is a small reverse-mode tape over
//! dense `f64` tensors, [`nn`] builds the MLPs and Adam on top of it,
//! [`channel`] supplies sources and closed-form references, [`estimators`]
//! holds the value functions and critic training, and [`cortical`] trains a
//! generator against a d-DIME critic to learn capacity-approaching inputs.

pub mod autodiff;
pub mod channel;
pub mod cortical;
pub mod estimators;
pub mod nn;
