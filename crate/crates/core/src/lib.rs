//! Foreground segmentation from background feature densities.
//!
//! Encoder feature vectors of background pixels are modelled with a density
//! estimator, either a Real NVP normalizing [`flow`] or a cosine
//! [`knn_density`] baseline. Image regions whose features are unlikely under
//! that density are segmented as foreground. Per-layer NLL grids are made
//! comparable and fused in [`ensemble`], brought to pixel resolution in
//! [`segmentation`], and scored with threshold-free [`metrics`].
//!
//! The guide in `book/` walks through each stage; its code samples are
//! compiled and run as doc-tests of this crate.

pub mod ensemble;
pub mod error;
pub mod feature_store;
pub mod flow;
pub mod grid;
mod io_util;
pub mod knn_density;
pub mod metrics;
pub mod segmentation;
pub mod synthetic;

pub use error::{Error, Result};
pub use grid::Grid;
pub use io_util::write_atomic;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
    #[doc = include_str!("../../../book/src/labels.md")]
    mod labels {}
    #[doc = include_str!("../../../book/src/flow.md")]
    mod flow {}
    #[doc = include_str!("../../../book/src/knn.md")]
    mod knn {}
    #[doc = include_str!("../../../book/src/ensemble.md")]
    mod ensemble {}
    #[doc = include_str!("../../../book/src/segmentation.md")]
    mod segmentation {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
}
