//! gigaslide-core: the compute side of a collaborative whole-slide image
//! annotation platform.
//!
//! The pipeline stages are:
//!
//! 1. **Pyramid** – Deep Zoom tiling, working-resolution downsampling, tissue
//!    masks (Otsu over the magenta channel) and patch grids.
//! 2. **Semisup** – teacher/student softmax classifier trained with a
//!    confidence-weighted cross-entropy.
//! 3. **Heatmap** – patch probabilities → dense map → filtered mask →
//!    smoothed region polygons.
//! 4. **Metrics** – region recalls, classification scores, confusion
//!    matrices, label overlap, batch comparison and timing aggregates.
//!
//! Nothing in this crate touches the database or the network.

pub mod config;
pub mod heatmap;
pub mod metrics;
pub mod pyramid;
pub mod raster;
pub mod semisup;

pub use config::Config;
pub use heatmap::{HeatmapGrid, PatchPrediction, RegionPolygon};
pub use pyramid::{PatchGrid, TilePyramidDescriptor, TissueMask};
pub use raster::BinaryMask;
