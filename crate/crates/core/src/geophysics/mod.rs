//! Forward models from a property grid to seismic observations.

pub mod rock_physics;
pub mod seismic;

pub use rock_physics::{rock_physics, Dual, Elastic, Mineral, Real, RockPhysicsParams};
pub use seismic::{
    build_psf, reflectivity, ricker, BurdenConfig, ElasticCube, PsfConfig, SeismicCube, SeismicModel,
};
