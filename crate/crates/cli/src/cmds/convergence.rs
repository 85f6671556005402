//! `convergence-check`: concentration rate of the conditional covariance,
//! characteristic-function lower-bound gaps, and width invariance of the
//! additive limit.

use serde_json::json;

use deepgp_core::analysis::{self, jackknife_mean_se, PathSampler};
use deepgp_core::deepgp::{self, two_layer_add_rbf, DeepGpArchitecture, LayerSpec};
use deepgp_core::{KernelSpec, Result};

use crate::config::ConvergenceConfig;
use crate::output::OutputWriter;

pub fn run(config: &ConvergenceConfig) -> Result<()> {
    let writer = OutputWriter::new(&config.out, "convergence-check", config, config.seed)?;
    let x1 = [config.x1];
    let x2 = [config.x2];

    // Concentration of the conditional covariance (strong-law rate).
    let conc = analysis::cond_cov_concentration(
        &KernelSpec::unit_rbf(),
        &KernelSpec::unit_additive_rbf(),
        &x1,
        &x2,
        &config.widths,
        config.concentration_samples,
        deepgp_core::seed::derive(config.seed, 1),
    )?;
    let slope = analysis::log_log_slope(&conc);
    let monotone = conc.windows(2).all(|w| w[1].variance < w[0].variance);

    // Characteristic-function gaps: width-1 model strictly above the bound,
    // single-layer control on it.
    let points = vec![x1.to_vec(), x2.to_vec()];
    let narrow = two_layer_add_rbf(1, 1, 1.0, 1.0, 1.0, 1.0, 1.0)?;
    let control = DeepGpArchitecture::new(
        1,
        1.0,
        vec![LayerSpec {
            width: 1,
            kernel: KernelSpec::unit_rbf(),
        }],
    )?;
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mut cf_rows = Vec::new();
    let mut narrow_all_positive = true;
    let mut control_all_zero = true;
    for (si, &scale) in config.cf_scales.iter().enumerate() {
        let t = [scale * s, -scale * s];
        let g_narrow = analysis::cf_bound_check(
            &narrow,
            &points,
            &t,
            config.cf_samples,
            deepgp_core::seed::derive(config.seed, 10 + si as u64),
        )?;
        let g_control = analysis::cf_bound_check(
            &control,
            &points,
            &t,
            config.cf_samples,
            deepgp_core::seed::derive(config.seed, 50 + si as u64),
        )?;
        narrow_all_positive &= g_narrow.gap > 3.0 * g_narrow.se;
        control_all_zero &= g_control.gap.abs() <= 3.0 * g_control.se;
        cf_rows.push(json!({
            "scale": scale,
            "narrow_gap": g_narrow.gap,
            "narrow_se": g_narrow.se,
            "control_gap": g_control.gap,
            "control_se": g_control.se,
        }));
    }

    // Width invariance of the additive limit.
    let exact = deepgp::limiting_covariance(&narrow, &x1, &x2)?;
    let mut invariance_rows = Vec::new();
    let mut invariance_ok = true;
    for (wi, &width) in config.invariance_widths.iter().enumerate() {
        let arch = two_layer_add_rbf(1, width, 1.0, 1.0, 1.0, 1.0, 1.0)?;
        let mut sampler = PathSampler::new(&arch, &points)?;
        let mut rng = deepgp_core::seed::rng(deepgp_core::seed::derive(
            config.seed,
            100 + wi as u64,
        ));
        let vals: Vec<f64> = (0..config.invariance_samples)
            .map(|_| {
                let f = sampler.draw_final(&mut rng).unwrap();
                f[0] * f[1]
            })
            .collect();
        let (mean, se) = jackknife_mean_se(&vals, 20);
        let ok = (mean - exact).abs() <= 3.0 * se;
        invariance_ok &= ok;
        invariance_rows.push(json!({
            "width": width,
            "mc_covariance": mean,
            "se": se,
            "within_3se": ok,
        }));
    }

    writer.write_json(
        "verdicts.json",
        &json!({
            "concentration": {
                "per_width": conc,
                "log_log_slope": slope,
                "slope_in_range": (-1.15..=-0.85).contains(&slope),
                "monotone_decreasing": monotone,
            },
            "cf_bound": {
                "per_scale": cf_rows,
                "narrow_gap_positive_at_3se": narrow_all_positive,
                "control_gap_zero_within_3se": control_all_zero,
            },
            "width_invariance": {
                "exact_limit": exact,
                "per_width": invariance_rows,
                "all_within_3se": invariance_ok,
            },
        }),
    )?;
    Ok(())
}
