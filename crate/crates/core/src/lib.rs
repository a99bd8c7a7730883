//! Probabilistic geocoding as regression of coordinates on text.
//!
//! A small feed-forward head maps a text feature vector to the parameters of
//! a mixture of von Mises–Fisher distributions on the unit sphere. The crate
//! covers the distribution itself, the losses and their gradients, training,
//! corpus handling, Table-style evaluation in kilometres, and density contours
//! exported as GeoJSON.

pub mod checkpoint;
pub mod density;
pub mod error;
pub mod eval;
pub mod features;
pub mod fetch;
pub mod head;
pub mod ingest;
pub mod mixture;
pub mod sphere;
pub mod stats;
pub mod toy;
pub mod train;
pub mod vmf;

pub use error::{Error, ErrorClass, Result};
pub use mixture::{LossKind, PointRule, VmfMixture};
pub use sphere::{GeoPoint, UnitVec3};
pub use vmf::VmfComponent;
