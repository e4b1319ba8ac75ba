//! Markerless visual servoing on superquadric-modelled objects.
//!
//! The crate is `no_std` (with `alloc`) and holds the whole numerical
//! pipeline:
//!
//! 1. [`superquadric`] – inside-outside function, synthetic surface sampling
//!    and least-squares model recovery from partial point clouds.
//! 2. [`grasp`] – hand-ellipsoid grasp pose by constrained optimization
//!    above a table plane.
//! 3. [`filter`] – sequential importance sampling particle filter that
//!    corrects a biased end-effector pose from stereo landmark observations,
//!    with moving-average state extraction.
//! 4. [`servo`] – stereo point features, the 16×6 image Jacobian and the
//!    decoupled translation/orientation control law with gain scheduling.
//! 5. [`sim`] – a kinematic test bed with injected proprioception bias that
//!    chains all of the above.
//!
//! File formats, experiments and the command-line front end live in the
//! `sqservo` companion crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod filter;
pub mod geometry;
pub mod grasp;
pub mod optim;
pub mod servo;
pub mod sim;
pub mod superquadric;

pub use geometry::{CameraModel, Pose7, RpyPose, StereoRig, Twist};
pub use superquadric::{PointCloud, Superquadric};

