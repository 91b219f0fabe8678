pub mod raster;
pub mod camera;
pub mod compositor;
pub mod seed;
pub mod adapters;
pub mod optimizer;
pub mod evalsim;
pub mod report;
