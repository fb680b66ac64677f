use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cstr::CstrParams;
use super::integrator::{simulate, IntegratorConfig};
use super::tank::TankParams;
use crate::error::{Error, Result};
use crate::model::{
    ClosedModel, Flux, MeasurementDataset, PiecewiseConstantProfile, TimeGrid, TimeUnit, WeightModel,
};

/// Deterministic RNG for one `(seed, stream)` pair.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Initial state and MV profile of one simulated experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub x0: Vec<f64>,
    pub mv: PiecewiseConstantProfile,
}

/// Measurement noise added to simulated outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Noise {
    /// `z̃ = z·(1 + frac·ξ)`.
    Relative { frac: f64 },
    /// `z̃ = z + σ_i·ξ`.
    Absolute { sigma: Vec<f64> },
}

impl Noise {
    pub fn relative(frac: f64) -> Self {
        Noise::Relative { frac }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Noise::Relative { frac } => *frac >= 0.0,
            Noise::Absolute { sigma } => sigma.iter().all(|s| *s >= 0.0),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("noise", "levels must be >= 0"))
        }
    }

    /// Weight model matching this noise; noise-free data gets 1 % relative weights.
    pub fn weight_model(&self) -> WeightModel {
        match self {
            Noise::Relative { frac } if *frac > 0.0 => WeightModel::relative(*frac),
            Noise::Relative { .. } => WeightModel::relative(0.01),
            Noise::Absolute { sigma } if sigma.iter().all(|s| *s > 0.0) => WeightModel::Absolute { sigma: sigma.clone() },
            Noise::Absolute { .. } => WeightModel::Identity,
        }
    }
}

/// Simulates every scenario with the truth model and samples noisy outputs
/// every `meas_period`. The noise stream of scenario `i` depends only on
/// `(seed, i)` and is consumed in (sample, channel) order.
pub fn generate_pseudo_data(
    truth: &dyn ClosedModel,
    scenarios: &[Scenario],
    meas_period: f64,
    noise: &Noise,
    seed: u64,
    integrator: &IntegratorConfig,
) -> Result<Vec<MeasurementDataset>> {
    if scenarios.is_empty() {
        return Err(Error::invalid("scenarios", "at least one scenario is required"));
    }
    noise.validate()?;
    let structure = truth.structure();
    let names = structure.names();
    scenarios
        .par_iter()
        .enumerate()
        .map(|(i, sc)| {
            let wrap = |e: Error| Error::Scenario {
                index: i,
                source: Box::new(e),
            };
            let g = sc.mv.grid();
            let meas = TimeGrid::with_step(g.first(), g.last(), meas_period, g.unit()).map_err(wrap)?;
            let tr = simulate(structure, &sc.x0, &sc.mv, Flux::Map(truth.fluxes()), &meas, integrator)
                .map_err(wrap)?;
            let mut rng = stream_rng(seed, i as u64);
            let z_meas: Vec<Vec<f64>> = tr
                .outputs
                .expect("simulate fills outputs")
                .into_iter()
                .map(|z| {
                    z.into_iter()
                        .enumerate()
                        .map(|(ch, v)| {
                            let xi: f64 = StandardNormal.sample(&mut rng);
                            match noise {
                                Noise::Relative { frac } => v * (1.0 + frac * xi),
                                Noise::Absolute { sigma } => v + sigma[ch] * xi,
                            }
                        })
                        .collect()
                })
                .collect();
            MeasurementDataset::new(
                format!("dataset_{i:02}"),
                meas,
                z_meas,
                noise.weight_model(),
                sc.mv.clone(),
                sc.x0.clone(),
                names.outputs.iter().map(|v| v.name.clone()).collect(),
                names.inputs.iter().map(|v| v.name.clone()).collect(),
            )
            .map_err(wrap)
        })
        .collect()
}

/// Randomized CSTR experiments.
///
/// Every segment draws a new coolant temperature and a new level target; the
/// outlet flow is chosen so that the level moves linearly to its target over
/// the segment. With a feed of 0.1 m³/min the level is a pure integrator, so a
/// freely drawn outlet flow would empty or flood the vessel within minutes.
///
/// The default ranges keep the reactor on its low-temperature branch. Above a
/// coolant temperature of roughly 303 K the reactor ignites within a minute or
/// two and the hot branch oscillates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CstrScenarioDesign {
    pub span: f64,
    pub segment: f64,
    pub h_range: (f64, f64),
    pub c_range: (f64, f64),
    pub t_range: (f64, f64),
    pub tc_range: (f64, f64),
}

impl Default for CstrScenarioDesign {
    fn default() -> Self {
        Self {
            span: 1200.0,
            segment: 120.0,
            h_range: (0.5, 0.8),
            c_range: (0.8, 0.95),
            t_range: (315.0, 330.0),
            tc_range: (290.0, 300.0),
        }
    }
}

impl CstrScenarioDesign {
    pub fn scenario(&self, params: &CstrParams, seed: u64, stream: u64) -> Result<Scenario> {
        let mut rng = stream_rng(seed, stream);
        let draw = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| lo + (hi - lo) * rng.random::<f64>();
        let h0 = draw(&mut rng, self.h_range);
        let x0 = vec![h0, draw(&mut rng, self.c_range), draw(&mut rng, self.t_range)];
        let grid = TimeGrid::with_step(0.0, self.span, self.segment, TimeUnit::Minutes)?;
        let area = params.area();
        let mut h = h0;
        let mut values = Vec::with_capacity(grid.n_intervals());
        for _ in 0..grid.n_intervals() {
            let t_c = draw(&mut rng, self.tc_range);
            let target = draw(&mut rng, self.h_range);
            let f_out = params.f0 + area * (h - target) / self.segment;
            h = target;
            values.push(vec![f_out, t_c]);
        }
        Ok(Scenario {
            x0,
            mv: PiecewiseConstantProfile::new(grid, values)?,
        })
    }

    pub fn scenarios(&self, params: &CstrParams, n: usize, seed: u64) -> Result<Vec<Scenario>> {
        (0..n).map(|i| self.scenario(params, seed, i as u64)).collect()
    }
}

/// Randomized three-tank experiments: independent inflow steps per segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TankScenarioDesign {
    pub span: f64,
    pub segment: f64,
    pub h_range: (f64, f64),
    pub h_res0: f64,
    pub f1_range: (f64, f64),
    pub f3_range: (f64, f64),
}

impl Default for TankScenarioDesign {
    fn default() -> Self {
        Self {
            span: 1800.0,
            segment: 120.0,
            h_range: (0.3, 2.5),
            h_res0: 20.0,
            f1_range: (0.0, 0.1),
            f3_range: (0.0, 0.06),
        }
    }
}

impl TankScenarioDesign {
    pub fn scenario(&self, _params: &TankParams, seed: u64, stream: u64) -> Result<Scenario> {
        let mut rng = stream_rng(seed, stream);
        let draw = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| lo + (hi - lo) * rng.random::<f64>();
        let x0 = vec![
            draw(&mut rng, self.h_range),
            draw(&mut rng, self.h_range),
            draw(&mut rng, self.h_range),
            self.h_res0,
        ];
        let grid = TimeGrid::with_step(0.0, self.span, self.segment, TimeUnit::Seconds)?;
        let values = (0..grid.n_intervals())
            .map(|_| vec![draw(&mut rng, self.f1_range), draw(&mut rng, self.f3_range)])
            .collect();
        Ok(Scenario {
            x0,
            mv: PiecewiseConstantProfile::new(grid, values)?,
        })
    }

    pub fn scenarios(&self, params: &TankParams, n: usize, seed: u64) -> Result<Vec<Scenario>> {
        (0..n).map(|i| self.scenario(params, seed, i as u64)).collect()
    }
}

/// Time averages of the truth fluxes over each interval of `grid` along the
/// truth trajectory (trapezoidal rule on `max_step` substeps).
pub fn interval_mean_fluxes(
    truth: &dyn ClosedModel,
    x0: &[f64],
    mv: &PiecewiseConstantProfile,
    grid: &TimeGrid,
    integrator: &IntegratorConfig,
) -> Result<PiecewiseConstantProfile> {
    let structure = truth.structure();
    let fluxes = truth.fluxes();
    let fine = grid.refine(integrator.max_step)?;
    let fine = TimeGrid::union(&[&fine, mv.grid()], grid.first(), grid.last())?;
    let tr = simulate(structure, x0, mv, Flux::Map(fluxes), &fine, integrator)?;
    let n_p = fluxes.n_p();
    let mut sums = vec![vec![0.0; n_p]; grid.n_intervals()];
    let (mut pa, mut pb) = (vec![0.0; n_p], vec![0.0; n_p]);
    let pts = fine.points();
    for i in 0..pts.len() - 1 {
        let (ta, tb) = (pts[i], pts[i + 1]);
        let mid = 0.5 * (ta + tb);
        let u = mv.eval(mid)?;
        fluxes.eval(ta, &tr.states[i], u, &mut pa)?;
        fluxes.eval(tb, &tr.states[i + 1], u, &mut pb)?;
        let k = grid.interval_of(mid)?;
        for j in 0..n_p {
            sums[k][j] += 0.5 * (tb - ta) * (pa[j] + pb[j]);
        }
    }
    let values = sums
        .into_iter()
        .zip(grid.points().windows(2))
        .map(|(s, w)| s.into_iter().map(|v| v / (w[1] - w[0])).collect())
        .collect();
    PiecewiseConstantProfile::new(grid.clone(), values)
}
