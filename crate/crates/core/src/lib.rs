//! Simulation, training and evaluation library for learned lens active alignment.

pub mod aligner;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod nn;
pub mod optics;
pub mod seed;
pub mod transform;

pub use dataset::{Dataset, GridSpec, Role, Sampling};
pub use error::{Error, Result};
pub use optics::{
    DomainConfig, DomainLabel, FieldPoint, FovImageSet, Image, IspConfig, LensInstance, MisalignmentOffset, PsfFamily,
    PsfKernel, ToleranceModel,
};
