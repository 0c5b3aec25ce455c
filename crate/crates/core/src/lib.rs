//! Lane-level road network synthesis from street-view lane observations.

mod atomic;
pub mod basemap;
pub mod fixture;
pub mod geodesy;
pub mod laneio;
pub mod lanegeom;
pub mod matching;
pub mod netgen;
pub mod svcrawl;

pub use atomic::atomic_write;
