//! Query localization against a reference map: global retrieval, local feature
//! matching lifted to 2D-3D, P3P inside RANSAC, and nonlinear refinement.

pub mod evaluate;
pub mod p3p;
pub mod query;
pub mod ransac;
pub mod refine;
pub mod retrieval;

use serde::{Deserialize, Serialize};

use crate::geometry::{Pixel, Point3};

pub use evaluate::{evaluate, Evaluation, ThresholdError, ThresholdSet};
pub use p3p::{solve_p3p, P3pError};
pub use query::{localize_all, localize_query, LocalizationResult, LocalizeConfig, Query, QueryTimings};
pub use ransac::{ransac_pnp, PnpError, PnpEstimate, RansacConfig};
pub use refine::{refine_pose, RefineConfig};
pub use retrieval::{global_descriptor, RetrievalIndex};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub pixel: Pixel,
    pub world: Point3,
}
