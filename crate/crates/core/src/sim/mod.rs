//! Fixed-step integration, the built-in ground-truth models and pseudo-data.

pub mod cstr;
mod integrator;
mod pseudo;
pub mod tank;

pub use cstr::{cstr_truth_rhs, CstrParams, CstrStructure, CstrTruthFluxes};
pub(crate) use integrator::{integrate_plan, FluxValues, SimPlan};
pub use integrator::{simulate, IntegratorConfig, Method};
pub use pseudo::{
    generate_pseudo_data, interval_mean_fluxes, stream_rng, CstrScenarioDesign, Noise, Scenario, TankScenarioDesign,
};
pub use tank::{tank_truth_rhs, TankParams, TankStructure, TankTruthFluxes};

use crate::model::{ClosedModel, FluxMap, ModelStructure};

/// A structure paired with its ground-truth flux law.
pub struct TruthModel<S, F> {
    pub structure: S,
    pub fluxes: F,
}

impl<S: ModelStructure, F: FluxMap> ClosedModel for TruthModel<S, F> {
    fn structure(&self) -> &dyn ModelStructure {
        &self.structure
    }
    fn fluxes(&self) -> &dyn FluxMap {
        &self.fluxes
    }
}

pub type CstrTruth = TruthModel<CstrStructure, CstrTruthFluxes>;
pub type TankTruth = TruthModel<TankStructure, TankTruthFluxes>;

impl CstrTruth {
    pub fn new(params: CstrParams) -> Self {
        Self {
            structure: CstrStructure::new(params.clone()),
            fluxes: CstrTruthFluxes { params },
        }
    }
}

impl TankTruth {
    pub fn new(params: TankParams) -> Self {
        Self {
            structure: TankStructure::default(),
            fluxes: TankTruthFluxes { params },
        }
    }
}
