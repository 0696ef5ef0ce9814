//! Factor-graph state estimation: keyed manifold values, measurement factors
//! (inertial, global position, pose priors, distilled dense-BA constraints),
//! and a Levenberg-Marquardt solver with marginalization support.

pub mod factors;
pub mod noise;
pub mod preintegration;
pub mod sliding;
pub mod solver;
pub mod values;

pub use factors::{
    BetweenPoseFactor, DbaPoseFactor, Factor, GnssFactor, ImuFactor, Linearization, MarginalPrior,
    NavPriorFactor, PosePriorFactor, ScalarPriorFactor, GRAVITY,
};
pub use noise::{NoiseModel, RobustLoss};
pub use sliding::{write_trajectory_csv, FactorId, SlidingWindow, SlidingWindowConfig};
pub use preintegration::{preintegrate, ImuNoise, ImuSample, PreintegratedImu};
pub use solver::{marginalize, optimize, LinearStrategy, OptimizeReport, SolverOptions};
pub use values::{GraphError, Key, NavState, Values, Variable};
