//! Hybrid models: the mechanistic structure with each flux replaced by a
//! trained network or a constant, plus simulation and scoring.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analyze::CorrelationReport;
use crate::error::{Error, Result};
use crate::estimate::{fit_value, EstimateResult};
use crate::mlp::Mlp;
use crate::model::{
    ClosedModel, Flux, FluxMap, MeasurementDataset, ModelStructure, PiecewiseConstantProfile, TimeGrid, Trajectory,
    VarNames, VarRef,
};
use crate::sim::{simulate, IntegratorConfig};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// How one flux is computed inside the hybrid right-hand side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FluxBinding {
    Constant {
        value: f64,
    },
    Mlp {
        /// State or MV names feeding the network, in network input order.
        inputs: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        output_bounds: Option<(f64, f64)>,
        model: Box<Mlp>,
    },
}

const MAX_INPUTS: usize = 32;

#[derive(Debug, Clone)]
enum Resolved {
    Constant(f64),
    Mlp {
        refs: Vec<VarRef>,
        bounds: Option<(f64, f64)>,
        net: Box<Mlp>,
    },
}

/// Flux law `p = φ(x, u)` built from the bindings.
#[derive(Debug, Clone)]
pub struct HybridFluxes {
    resolved: Vec<Resolved>,
}

impl FluxMap for HybridFluxes {
    fn n_p(&self) -> usize {
        self.resolved.len()
    }

    fn eval(&self, t: f64, x: &[f64], u: &[f64], p: &mut [f64]) -> Result<()> {
        let mut input = [0.0; MAX_INPUTS];
        let mut y = [0.0];
        for (pi, r) in p.iter_mut().zip(&self.resolved) {
            *pi = match r {
                Resolved::Constant(v) => *v,
                Resolved::Mlp { refs, bounds, net } => {
                    for (slot, v) in input.iter_mut().zip(refs) {
                        *slot = match *v {
                            VarRef::State(i) => x[i],
                            VarRef::Input(i) => u[i],
                        };
                    }
                    net.forward_into(&input[..refs.len()], &mut y).map_err(|e| Error::Domain {
                        t,
                        reason: format!("flux network input: {e}"),
                    })?;
                    let y = y[0];
                    match bounds {
                        Some((lo, hi)) => y.clamp(*lo, *hi),
                        None => y,
                    }
                }
            };
        }
        Ok(())
    }
}

/// A structure with every flux bound exactly once.
#[derive(Clone)]
pub struct HybridModel {
    base: Arc<dyn ModelStructure>,
    bindings: Vec<FluxBinding>,
    fluxes: HybridFluxes,
}

impl std::fmt::Debug for HybridModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HybridModel")
            .field("base", &self.base.id())
            .field("bindings", &self.bindings)
            .finish()
    }
}

fn resolve(names: &VarNames, flux: &str, b: &FluxBinding) -> Result<Resolved> {
    match b {
        FluxBinding::Constant { value } => {
            if !value.is_finite() {
                return Err(Error::Config(format!("constant for {flux} is not finite")));
            }
            Ok(Resolved::Constant(*value))
        }
        FluxBinding::Mlp {
            inputs,
            output_bounds,
            model,
        } => {
            if model.n_in() != inputs.len() || model.n_out() != 1 {
                return Err(Error::Config(format!(
                    "network for {flux} maps {} -> {}, bound to {} inputs and one flux",
                    model.n_in(),
                    model.n_out(),
                    inputs.len()
                )));
            }
            if inputs.len() > MAX_INPUTS {
                return Err(Error::Config(format!("{flux} has more than {MAX_INPUTS} inputs")));
            }
            if let Some((lo, hi)) = output_bounds {
                if !(lo <= hi) {
                    return Err(Error::Config(format!("output bounds of {flux} need lo <= hi")));
                }
            }
            let refs = inputs
                .iter()
                .map(|n| {
                    names
                        .resolve(n)
                        .ok_or_else(|| Error::Config(format!("input {n} of {flux} is neither a state nor an MV")))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Resolved::Mlp {
                refs,
                bounds: *output_bounds,
                net: model.clone(),
            })
        }
    }
}

impl HybridModel {
    /// `bindings` are given in flux order of `base`.
    pub fn new(base: Arc<dyn ModelStructure>, bindings: Vec<FluxBinding>) -> Result<Self> {
        let names = base.names();
        if bindings.len() != base.n_p() {
            return Err(Error::dimension("flux bindings", base.n_p(), bindings.len()));
        }
        let resolved = names
            .fluxes
            .iter()
            .zip(&bindings)
            .map(|(f, b)| resolve(names, &f.name, b))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            base,
            bindings,
            fluxes: HybridFluxes { resolved },
        })
    }

    pub fn base(&self) -> &Arc<dyn ModelStructure> {
        &self.base
    }

    pub fn bindings(&self) -> &[FluxBinding] {
        &self.bindings
    }

    pub fn flux_map(&self) -> &HybridFluxes {
        &self.fluxes
    }

    /// Flux values at `(x, u)`.
    pub fn fluxes_at(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let mut p = vec![0.0; self.base.n_p()];
        self.fluxes.eval(0.0, x, u, &mut p)?;
        Ok(p)
    }

    pub fn manifest(&self) -> HybridManifest {
        HybridManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            base_model: self.base.id().to_string(),
            fluxes: self
                .base
                .names()
                .fluxes
                .iter()
                .zip(&self.bindings)
                .map(|(f, b)| FluxEntry {
                    flux: f.name.clone(),
                    binding: b.clone(),
                })
                .collect(),
        }
    }
}

impl ClosedModel for HybridModel {
    fn structure(&self) -> &dyn ModelStructure {
        self.base.as_ref()
    }
    fn fluxes(&self) -> &dyn FluxMap {
        &self.fluxes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluxEntry {
    pub flux: String,
    pub binding: FluxBinding,
}

/// File form of a hybrid model: base model id plus the binding table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HybridManifest {
    pub schema_version: u32,
    pub base_model: String,
    pub fluxes: Vec<FluxEntry>,
}

impl HybridManifest {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s).map_err(|e| Error::parse("<manifest>", e.to_string()))?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::parse(
                "<manifest>",
                format!("unsupported schema version {}", m.schema_version),
            ));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s).map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(path, message),
            other => other,
        })
    }

    /// Rebinds the table to `base`, which must carry the recorded id.
    pub fn into_model(self, base: Arc<dyn ModelStructure>) -> Result<HybridModel> {
        if base.id() != self.base_model {
            return Err(Error::Config(format!(
                "manifest is for model {}, got {}",
                self.base_model,
                base.id()
            )));
        }
        let mut by_name: BTreeMap<String, FluxBinding> = BTreeMap::new();
        for e in self.fluxes {
            if by_name.insert(e.flux.clone(), e.binding).is_some() {
                return Err(Error::Config(format!("flux {} is bound twice", e.flux)));
            }
        }
        let mut bindings = Vec::with_capacity(base.n_p());
        for f in &base.names().fluxes {
            bindings.push(
                by_name
                    .remove(&f.name)
                    .ok_or_else(|| Error::Config(format!("flux {} is unbound", f.name)))?,
            );
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Config(format!("{extra} is not a flux of {}", base.id())));
        }
        HybridModel::new(base, bindings)
    }
}

/// Binds every flux of `model` to a trained network or a constant. Networks
/// must use exactly the inputs selected in `report`.
pub fn assemble_hybrid(
    model: Arc<dyn ModelStructure>,
    report: &CorrelationReport,
    trained: &BTreeMap<String, Mlp>,
    constants: &BTreeMap<String, f64>,
) -> Result<HybridModel> {
    let names = model.names();
    for k in trained.keys().chain(constants.keys()) {
        if names.flux_index(k).is_none() {
            return Err(Error::Config(format!("{k} is not a flux of {}", model.id())));
        }
    }
    let mut bindings = Vec::with_capacity(model.n_p());
    for f in &names.fluxes {
        let b = match (trained.get(&f.name), constants.get(&f.name)) {
            (Some(_), Some(_)) => return Err(Error::Config(format!("flux {} is bound twice", f.name))),
            (None, None) => return Err(Error::Config(format!("flux {} is unbound", f.name))),
            (None, Some(v)) => FluxBinding::Constant { value: *v },
            (Some(net), None) => {
                if let Some(sel) = report.selection(&f.name) {
                    if sel.inputs != net.input_names {
                        return Err(Error::Config(format!(
                            "network for {} uses inputs {:?}, screening selected {:?}",
                            f.name, net.input_names, sel.inputs
                        )));
                    }
                }
                FluxBinding::Mlp {
                    inputs: net.input_names.clone(),
                    output_bounds: None,
                    model: Box::new(net.clone()),
                }
            }
        };
        bindings.push(b);
    }
    HybridModel::new(model, bindings)
}

/// Forward simulation with fluxes evaluated from the bindings at every RHS call.
pub fn simulate_hybrid(
    hm: &HybridModel,
    x0: &[f64],
    mv: &PiecewiseConstantProfile,
    out_grid: &TimeGrid,
    integrator: &IntegratorConfig,
) -> Result<Trajectory> {
    simulate(hm.base.as_ref(), x0, mv, Flux::Map(&hm.fluxes), out_grid, integrator)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetScore {
    pub dataset: String,
    /// Weighted output deviation of the hybrid simulation.
    pub fit: Option<f64>,
    pub step1_fit: Option<f64>,
    /// `fit − step1_fit`.
    pub delta: Option<f64>,
    pub n_points: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridEvaluation {
    pub scores: Vec<DatasetScore>,
}

impl HybridEvaluation {
    pub fn total_fit(&self) -> f64 {
        self.scores.iter().filter_map(|s| s.fit).sum()
    }

    pub fn n_failed(&self) -> usize {
        self.scores.iter().filter(|s| s.fit.is_none()).count()
    }
}

/// Initial state for a re-simulation: the Step-1 estimate when present, else
/// the inverted first measurement, else the dataset's guess.
pub fn initial_state(model: &dyn ModelStructure, ds: &MeasurementDataset, step1: Option<&EstimateResult>) -> Vec<f64> {
    step1
        .map(|r| r.x0_star.clone())
        .or_else(|| model.output_inverse(&ds.z_meas[0]))
        .unwrap_or_else(|| ds.x0_guess.clone())
}

/// Simulates every dataset with the hybrid model and scores it with the
/// dataset weights. Failures are recorded per dataset.
pub fn evaluate_hybrid(
    hm: &HybridModel,
    datasets: &[MeasurementDataset],
    step1: &[EstimateResult],
    integrator: &IntegratorConfig,
) -> HybridEvaluation {
    let scores = datasets
        .par_iter()
        .map(|ds| {
            let prior = step1.iter().find(|r| r.dataset == ds.name);
            let x0 = initial_state(hm.base.as_ref(), ds, prior);
            let step1_fit = prior.map(|r| r.fit_cost);
            let fit = simulate_hybrid(hm, &x0, &ds.mv, &ds.meas_grid, integrator).and_then(|tr| fit_value(&tr, ds));
            match fit {
                Ok(f) => DatasetScore {
                    dataset: ds.name.clone(),
                    fit: Some(f),
                    step1_fit,
                    delta: step1_fit.map(|s| f - s),
                    n_points: ds.n_meas(),
                    error: None,
                },
                Err(e) => DatasetScore {
                    dataset: ds.name.clone(),
                    fit: None,
                    step1_fit,
                    delta: None,
                    n_points: ds.n_meas(),
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    HybridEvaluation { scores }
}
