pub mod autodiff;
pub mod dataset;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod persistence;
pub mod renderer;
pub mod spectral;
pub mod spherical;
pub mod trainer;
