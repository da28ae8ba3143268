pub mod dynamics;
pub mod enkf;
pub mod experiments;
pub mod error;
pub mod linalg;
pub mod meanfield;
pub mod nn;
pub mod observe;
pub mod ridge;
pub mod rng;
pub mod surrogate;
