pub mod prior;
pub mod raster_file;
pub mod scene;
pub mod trajectory;
