//! Regular norms: smooth squared-norm surrogates with certified constants.

pub mod aggregation;
pub mod catalog;
pub mod certify;
pub mod descriptor;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod norm;
pub mod prox;
pub mod quotient;
pub mod theta;

pub use error::{Error, Result};
pub use norm::{
    BlockLayout, BlockVector, Derivation, GradientSource, RegularityCertificate, SmoothSquaredNorm,
    SquaredNorm,
};
pub use theta::{bar_augment, theta_lq, unit_scale, ThetaAggregator, ThetaForm};
