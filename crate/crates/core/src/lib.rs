//! Human-to-robot hand retargeting at desk scale.
//!
//! The crate covers the full pipeline: procedural demo generation in a
//! deterministic quasi-static grasp world, IK baselines, a scratch-built
//! reverse-mode autodiff engine with the conv/attention layers the models
//! need, joint motion-manifold autoencoders over (object, hand, robot)
//! trajectory channels, latent-code inference, pseudo-ground-truth triplet
//! synthesis, evaluation metrics, and the text file formats plus stage
//! driver the CLI exposes.

pub mod autodiff;
pub mod geom;
pub mod ik;
pub mod io;
pub mod kinematics;
pub mod latent;
pub mod manifold;
pub mod metrics;
pub mod pipeline;
pub mod sim;
pub mod synthesis;
