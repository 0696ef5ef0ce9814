//! Structure-frame mapping and map-aided localization.
//!
//! The pipeline has two phases. The mapping phase fuses dense-bundle-adjustment
//! constraints with IMU and GNSS measurements in a sliding-window factor graph,
//! smooths the archived factors globally, and distills the result into a map of
//! independent geo-tagged structure frames (pose + depth grid + descriptor)
//! kept sparse by a co-visibility gate. The localization phase retrieves map
//! frames with a multi-frame similarity score over odometry-propagated particle
//! trajectories, then refines the query pose by fusing query-to-map
//! correspondences from several frames in a robust factor graph.

pub mod cli;
pub mod dba;
pub mod fgraph;
pub mod fineloc;
pub mod geom;
pub mod mapstore;
pub mod sasloc;
pub mod simworld;


