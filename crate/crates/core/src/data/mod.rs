//! Images, class rasters, PNM file I/O and the synthetic paired dataset.

mod manifest;
pub mod pnm;
mod raster;
mod synth;

pub use manifest::{DatasetManifest, Pair};
pub use raster::{ImageBuffer, MapRaster};
pub use synth::{gen_data, render_scene, SyntheticSceneSpec, BACKGROUND, BUILDING, PALETTE, ROAD, WATER};
