use serde::{Deserialize, Serialize};

use super::grid::TimeUnit;
use super::profile::PiecewiseConstantProfile;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VarInfo {
    pub name: String,
    pub unit: String,
}

impl VarInfo {
    pub fn new(name: &str, unit: &str) -> Self {
        Self {
            name: name.into(),
            unit: unit.into(),
        }
    }

    /// Column header, e.g. `T[K]`.
    pub fn header(&self) -> String {
        format!("{}[{}]", self.name, self.unit)
    }
}

/// Names and units of every variable class of a model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VarNames {
    pub states: Vec<VarInfo>,
    pub inputs: Vec<VarInfo>,
    pub fluxes: Vec<VarInfo>,
    pub outputs: Vec<VarInfo>,
}

/// Where a named variable lives in the `(x, u)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "lowercase")]
pub enum VarRef {
    State(usize),
    Input(usize),
}

impl VarNames {
    pub fn resolve(&self, name: &str) -> Option<VarRef> {
        if let Some(i) = self.states.iter().position(|v| v.name == name) {
            return Some(VarRef::State(i));
        }
        self.inputs
            .iter()
            .position(|v| v.name == name)
            .map(VarRef::Input)
    }

    pub fn flux_index(&self, name: &str) -> Option<usize> {
        self.fluxes.iter().position(|v| v.name == name)
    }
}

/// Known mechanistic part of a model: `ẋ = f(x, u, p, t)`, `z = h(x)`.
///
/// `p` are the flux slots whose time profiles (or data-driven maps) are
/// supplied from outside. Implementations must report domain violations as
/// errors instead of producing non-finite values.
pub trait ModelStructure: Send + Sync {
    fn id(&self) -> &str;
    fn names(&self) -> &VarNames;
    fn time_unit(&self) -> TimeUnit;

    fn n_x(&self) -> usize {
        self.names().states.len()
    }
    fn n_u(&self) -> usize {
        self.names().inputs.len()
    }
    fn n_p(&self) -> usize {
        self.names().fluxes.len()
    }
    fn n_z(&self) -> usize {
        self.names().outputs.len()
    }

    fn rhs(&self, t: f64, x: &[f64], u: &[f64], p: &[f64], dx: &mut [f64]) -> Result<()>;

    fn output(&self, x: &[f64], z: &mut [f64]);

    /// Inverse of the output map when it is a state selector.
    fn output_inverse(&self, _z: &[f64]) -> Option<Vec<f64>> {
        None
    }

    /// Simple lower/upper bounds per flux.
    fn flux_bounds(&self) -> Option<Vec<(f64, f64)>> {
        None
    }

    /// Admissible range per state, used as bounds on estimated initial states.
    fn state_bounds(&self) -> Option<Vec<(f64, f64)>> {
        None
    }
}

/// State-feedback flux law `p = φ(t, x, u)`.
pub trait FluxMap: Send + Sync {
    fn n_p(&self) -> usize;
    fn eval(&self, t: f64, x: &[f64], u: &[f64], p: &mut [f64]) -> Result<()>;
}

/// The three ways flux values reach the integrator.
#[derive(Clone, Copy)]
pub enum Flux<'a> {
    Profile(&'a PiecewiseConstantProfile),
    Constant(&'a [f64]),
    Map(&'a dyn FluxMap),
}

impl Flux<'_> {
    pub fn dim(&self) -> usize {
        match self {
            Flux::Profile(p) => p.dim(),
            Flux::Constant(c) => c.len(),
            Flux::Map(m) => m.n_p(),
        }
    }
}

/// A structure together with a flux law: a fully specified ODE model.
pub trait ClosedModel: Send + Sync {
    fn structure(&self) -> &dyn ModelStructure;
    fn fluxes(&self) -> &dyn FluxMap;
}

/// Borrowed pairing of a structure with a flux law.
#[derive(Clone, Copy)]
pub struct Closed<'a> {
    pub structure: &'a dyn ModelStructure,
    pub fluxes: &'a dyn FluxMap,
}

impl ClosedModel for Closed<'_> {
    fn structure(&self) -> &dyn ModelStructure {
        self.structure
    }
    fn fluxes(&self) -> &dyn FluxMap {
        self.fluxes
    }
}

/// Fixed flux vector, independent of state.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantFluxes(pub Vec<f64>);

impl FluxMap for ConstantFluxes {
    fn n_p(&self) -> usize {
        self.0.len()
    }
    fn eval(&self, _t: f64, _x: &[f64], _u: &[f64], p: &mut [f64]) -> Result<()> {
        p.copy_from_slice(&self.0);
        Ok(())
    }
}

pub(crate) fn check_dims(model: &dyn ModelStructure, x0: &[f64], n_u: usize, n_p: usize) -> Result<()> {
    if x0.len() != model.n_x() {
        return Err(Error::dimension("initial state", model.n_x(), x0.len()));
    }
    if n_u != model.n_u() {
        return Err(Error::dimension("MV profile", model.n_u(), n_u));
    }
    if n_p != model.n_p() {
        return Err(Error::dimension("flux vector", model.n_p(), n_p));
    }
    Ok(())
}
