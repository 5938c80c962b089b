//! On-disk binary formats: AFIM raw images and AFCK checkpoints.

pub mod afck;
pub mod afim;

pub use afim::RawImage;
