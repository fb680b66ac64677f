//! Step 1: piecewise-constant flux profiles fitted to one noisy reactor run,
//! with and without the smoothness penalty.

use hybrid_ident::estimate::{estimate_fluxes, EstimationConfig, RegWeights};
use hybrid_ident::sim::{generate_pseudo_data, CstrParams, CstrScenarioDesign, CstrStructure, CstrTruth, IntegratorConfig, Noise};

fn main() -> hybrid_ident::Result<()> {
    let params = CstrParams::default();
    let design = CstrScenarioDesign {
        span: 600.0,
        ..CstrScenarioDesign::default()
    };
    let scenarios = design.scenarios(&params, 1, 3)?;
    let truth = CstrTruth::new(params);
    let data = generate_pseudo_data(&truth, &scenarios, 1.0, &Noise::relative(0.02), 3, &IntegratorConfig::rk4(0.01))?;
    let model = CstrStructure::default();

    for w in [0.0, 1e-2, 1.0] {
        let cfg = EstimationConfig {
            w_reg: RegWeights::Scalar(w),
            ..EstimationConfig::default()
        };
        let r = estimate_fluxes(&model, &data[0], &cfg)?;
        println!(
            "w_reg {w:<6} fit {:10.3} reg {:8.3} chi2/point {:.3} total variation {:8.3} ({} LM iterations)",
            r.fit_cost,
            r.reg_cost,
            r.chi2_per_point(),
            r.p_star.total_variation(),
            r.lm_report.iterations
        );
    }

    let r = estimate_fluxes(&model, &data[0], &EstimationConfig::default())?;
    let pts = r.p_star.grid().points();
    println!("\ninterval [min]       p1          p2          p3");
    for (k, p) in r.p_star.values().iter().enumerate().take(8) {
        println!("{:5}-{:<5} {:11.3e} {:11.5} {:11.5}", pts[k], pts[k + 1], p[0], p[1], p[2]);
    }
    Ok(())
}
