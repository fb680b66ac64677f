//! Shared domain types: time grids, piecewise-constant profiles, trajectories,
//! measurement datasets and the model-structure contract.

mod dataset;
mod grid;
mod profile;
mod structure;
mod trajectory;

pub use dataset::{MeasurementDataset, WeightFactor, WeightMatrix, WeightModel};
pub use grid::{grid_refine, TimeGrid, TimeUnit};
pub use profile::{profile_eval, PiecewiseConstantProfile};
pub(crate) use structure::check_dims;
pub use structure::{
    Closed, ClosedModel, ConstantFluxes, Flux, FluxMap, ModelStructure, VarInfo, VarNames, VarRef,
};
pub use trajectory::Trajectory;
