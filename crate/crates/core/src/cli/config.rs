use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analyze::AnalysisConfig;
use crate::error::{Error, Result};
use crate::estimate::EstimationConfig;
use crate::hybrid::HybridManifest;
use crate::mlp::{Activation, MlpSpec, TrainConfig};
use crate::model::{ClosedModel, ModelStructure};
use crate::mpc::{MeasurementNoise, MpcConfig, Setpoints};
use crate::sim::{
    CstrParams, CstrScenarioDesign, CstrStructure, CstrTruth, IntegratorConfig, Noise, Scenario, TankParams,
    TankScenarioDesign, TankStructure, TankTruth,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Case {
    Cstr,
    ThreeTank,
    UserModelManifest,
}

impl Case {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cstr" => Ok(Case::Cstr),
            "three-tank" => Ok(Case::ThreeTank),
            "user-model-manifest" => Ok(Case::UserModelManifest),
            other => Err(Error::Config(format!(
                "unknown case `{other}` (expected cstr, three-tank or user-model-manifest)"
            ))),
        }
    }
}

/// Built-in structure a run is based on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Base {
    Cstr,
    Tank,
}

impl Base {
    fn from_id(id: &str) -> Result<Self> {
        match id {
            "cstr" => Ok(Base::Cstr),
            "three-tank" => Ok(Base::Tank),
            other => Err(Error::Config(format!("unknown base model `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PlantConfig {
    pub cstr: CstrParams,
    pub tank: TankParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub scenarios: usize,
    /// Default: 1 min (CSTR), 5 s (tank).
    pub meas_period: Option<f64>,
    pub noise: Noise,
    /// Truth integration step. Default: 0.01 min (CSTR), 0.5 s (tank).
    pub truth_step: Option<f64>,
    pub cstr_design: CstrScenarioDesign,
    pub tank_design: TankScenarioDesign,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scenarios: 8,
            meas_period: None,
            noise: Noise::relative(0.02),
            truth_step: None,
            cstr_design: CstrScenarioDesign::default(),
            tank_design: TankScenarioDesign::default(),
        }
    }
}

/// Network shape without the input width, which follows from the screening.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub hidden: Vec<usize>,
    /// One per hidden layer plus one for the output layer.
    pub activations: Vec<Activation>,
    #[serde(default)]
    pub dropout_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ArchConfig {
    pub fn tanh_linear() -> Self {
        let s = MlpSpec::tanh_linear(1, 1);
        Self::from_spec(&s)
    }

    pub fn leaky_wide() -> Self {
        let s = MlpSpec::leaky_wide(1, 1);
        Self::from_spec(&s)
    }

    fn from_spec(s: &MlpSpec) -> Self {
        Self {
            hidden: s.layer_sizes[1..s.layer_sizes.len() - 1].to_vec(),
            activations: s.activations.clone(),
            dropout_rate: s.dropout_rate,
            seed: s.seed,
        }
    }

    pub fn spec(&self, n_in: usize) -> Result<MlpSpec> {
        let mut layer_sizes = vec![n_in];
        layer_sizes.extend(&self.hidden);
        layer_sizes.push(1);
        let spec = MlpSpec {
            layer_sizes,
            activations: self.activations.clone(),
            dropout_rate: self.dropout_rate,
            seed: self.seed,
        };
        spec.validate().map_err(|e| Error::Config(format!("training.arch: {e}")))?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    /// Default: tanh 4-4 (CSTR), leaky-ReLU 10-10 with dropout 0.1 (tank).
    pub arch: Option<ArchConfig>,
    pub train: TrainConfig,
    /// Per-flux architecture overrides.
    pub per_flux: BTreeMap<String, ArchConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    /// Number of held-out MV profiles.
    pub heldout: usize,
    /// Held-out scenarios use RNG streams from this offset on.
    pub stream_offset: u64,
    /// Default: 120 min (CSTR), 600 s (tank).
    pub window: Option<f64>,
    /// Output sampling of simulated trajectories. Default: the data sampling.
    pub out_period: Option<f64>,
    /// Hybrid and truth integration. Default: the data truth step.
    pub integrator: Option<IntegratorConfig>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            heldout: 3,
            stream_offset: 1000,
            window: None,
            out_period: None,
            integrator: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcRunConfig {
    pub controller: MpcConfig,
    pub duration: f64,
    pub plant_step: f64,
    /// Reservoir holdup of the initial steady state.
    pub h_res0: f64,
    pub noise: Option<MeasurementNoise>,
    /// Also run the loop with the truth model as controller.
    pub perfect_model: bool,
}

impl Default for MpcRunConfig {
    fn default() -> Self {
        let mut controller = MpcConfig::three_tank(1.0);
        controller.setpoints = Setpoints::step(vec![1.0], vec![1.5], 16.0);
        Self {
            controller,
            duration: 1200.0,
            plant_step: 0.5,
            h_res0: 20.0,
            noise: None,
            perfect_model: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub case: Case,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Output directory; `--out` takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Ground-truth hybrid manifest for `case = "user-model-manifest"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_manifest: Option<PathBuf>,
    #[serde(default)]
    pub plant: PlantConfig,
    #[serde(default)]
    pub data: DataConfig,
    /// Default: library defaults, with 2 measurement intervals per flux interval for the tank.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimation: Option<EstimationConfig>,
    /// Default: tau = 0.5 (CSTR), 0.2 (tank).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analysis: Option<AnalysisConfig>,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mpc: Option<MpcRunConfig>,
}

fn default_seed() -> u64 {
    7
}

/// A ground-truth simulator together with the structure identified against it.
pub struct CaseModels {
    pub base: Base,
    pub structure: Arc<dyn ModelStructure>,
    pub truth: Box<dyn ClosedModel>,
}

impl PipelineConfig {
    pub fn defaults(case: Case) -> Self {
        Self {
            case,
            seed: default_seed(),
            out: None,
            truth_manifest: None,
            plant: PlantConfig::default(),
            data: DataConfig::default(),
            estimation: None,
            analysis: None,
            training: TrainingConfig::default(),
            simulate: SimulateConfig::default(),
            mpc: None,
        }
    }

    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Config(format!("config file {} not found", path.display())),
            _ => Error::io(path, e),
        })?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    /// SHA-256 of the canonical JSON form, output directory excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn base(&self) -> Result<Base> {
        match self.case {
            Case::Cstr => Ok(Base::Cstr),
            Case::ThreeTank => Ok(Base::Tank),
            Case::UserModelManifest => {
                let m = self.load_truth_manifest()?;
                Base::from_id(&m.base_model)
            }
        }
    }

    fn load_truth_manifest(&self) -> Result<HybridManifest> {
        let path = self
            .truth_manifest
            .as_ref()
            .ok_or_else(|| Error::Config("truth_manifest is required for case user-model-manifest".into()))?;
        if !path.exists() {
            return Err(Error::Config(format!("truth_manifest {} does not exist", path.display())));
        }
        super::stages::read_manifest(path, "assemble")
    }

    pub fn structure_for(&self, base: Base) -> Arc<dyn ModelStructure> {
        match base {
            Base::Cstr => Arc::new(CstrStructure::new(self.plant.cstr.clone())),
            Base::Tank => Arc::new(TankStructure::default()),
        }
    }

    pub fn models(&self) -> Result<CaseModels> {
        let base = self.base()?;
        let structure = self.structure_for(base);
        let truth: Box<dyn ClosedModel> = match self.case {
            Case::Cstr => Box::new(CstrTruth::new(self.plant.cstr.clone())),
            Case::ThreeTank => Box::new(TankTruth::new(self.plant.tank.clone())),
            Case::UserModelManifest => Box::new(self.load_truth_manifest()?.into_model(structure.clone())?),
        };
        Ok(CaseModels {
            base,
            structure,
            truth,
        })
    }

    pub fn meas_period(&self, base: Base) -> f64 {
        self.data.meas_period.unwrap_or(match base {
            Base::Cstr => 1.0,
            Base::Tank => 5.0,
        })
    }

    pub fn truth_integrator(&self, base: Base) -> IntegratorConfig {
        IntegratorConfig::rk4(self.data.truth_step.unwrap_or(match base {
            Base::Cstr => 0.01,
            Base::Tank => 0.5,
        }))
    }

    pub fn estimation_for(&self, base: Base) -> EstimationConfig {
        self.estimation.clone().unwrap_or_else(|| match base {
            Base::Cstr => EstimationConfig::default(),
            Base::Tank => EstimationConfig {
                disc_factor: 2,
                ..EstimationConfig::default()
            },
        })
    }

    pub fn analysis_for(&self, base: Base) -> AnalysisConfig {
        self.analysis.clone().unwrap_or(match base {
            Base::Cstr => AnalysisConfig::default(),
            Base::Tank => AnalysisConfig {
                tau: 0.2,
                ..AnalysisConfig::default()
            },
        })
    }

    pub fn arch_for(&self, base: Base, flux: &str) -> ArchConfig {
        if let Some(a) = self.training.per_flux.get(flux) {
            return a.clone();
        }
        self.training.arch.clone().unwrap_or_else(|| match base {
            Base::Cstr => ArchConfig::tanh_linear(),
            Base::Tank => ArchConfig::leaky_wide(),
        })
    }

    pub fn sim_window(&self, base: Base) -> f64 {
        self.simulate.window.unwrap_or(match base {
            Base::Cstr => 120.0,
            Base::Tank => 600.0,
        })
    }

    pub fn sim_integrator(&self, base: Base) -> IntegratorConfig {
        self.simulate
            .integrator
            .clone()
            .unwrap_or_else(|| self.truth_integrator(base))
    }

    pub fn scenarios(&self, base: Base, n: usize, stream_offset: u64, span: Option<f64>) -> Result<Vec<Scenario>> {
        (0..n as u64)
            .map(|i| match base {
                Base::Cstr => {
                    let mut d = self.data.cstr_design.clone();
                    d.span = span.unwrap_or(d.span);
                    d.scenario(&self.plant.cstr, self.seed, stream_offset + i)
                }
                Base::Tank => {
                    let mut d = self.data.tank_design.clone();
                    d.span = span.unwrap_or(d.span);
                    d.scenario(&self.plant.tank, self.seed, stream_offset + i)
                }
            })
            .collect()
    }

    /// Fills every case-dependent default so that the stored config is explicit.
    pub fn resolve(&mut self) -> Result<Base> {
        let base = self.base()?;
        self.data.meas_period = Some(self.meas_period(base));
        self.data.truth_step = Some(self.truth_integrator(base).max_step);
        self.estimation = Some(self.estimation_for(base));
        self.analysis = Some(self.analysis_for(base));
        if self.training.arch.is_none() {
            self.training.arch = Some(self.arch_for(base, ""));
        }
        self.simulate.window = Some(self.sim_window(base));
        self.simulate.out_period = Some(self.sim_out_period(base));
        self.simulate.integrator = Some(self.sim_integrator(base));
        if base == Base::Tank && self.mpc.is_none() {
            self.mpc = Some(MpcRunConfig::default());
        }
        Ok(base)
    }

    pub fn sim_out_period(&self, base: Base) -> f64 {
        self.simulate.out_period.unwrap_or_else(|| self.meas_period(base))
    }

    pub fn mpc_run(&self) -> MpcRunConfig {
        self.mpc.clone().unwrap_or_default()
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.scenarios == 0 {
            return Err(Error::Config("data.scenarios: must be >= 1".into()));
        }
        if let Some(p) = self.data.meas_period {
            if !(p > 0.0) {
                return Err(Error::Config("data.meas_period: must be > 0".into()));
            }
        }
        if let Some(s) = self.data.truth_step {
            if !(s > 0.0) {
                return Err(Error::Config("data.truth_step: must be > 0".into()));
            }
        }
        let tau = self.analysis.as_ref().map(|a| a.tau).unwrap_or(0.5);
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::Config("analysis.tau: must lie in [0, 1]".into()));
        }
        self.training
            .train
            .validate()
            .map_err(|e| Error::Config(format!("training.train: {e}")))?;
        if self.mpc.is_some() && self.base()? != Base::Tank {
            return Err(Error::Config("mpc: the mpc block applies to three-tank runs only".into()));
        }
        Ok(())
    }
}
