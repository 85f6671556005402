//! `control`: generate data from deep GPs of several widths, fit deep GPs of
//! several widths to each, and tabulate test log likelihood.

use serde_json::json;

use deepgp_core::data;
use deepgp_core::deepgp::two_layer_add_rbf;
use deepgp_core::{KernelSpec, Result};

use crate::config::ControlConfig;
use crate::output::{fmt_f64, LongCsv, OutputWriter};
use crate::runner;

pub fn run(config: &ControlConfig) -> Result<()> {
    let writer = OutputWriter::new(&config.out, "control", config, config.seed)?;
    let mut csv = LongCsv::new(&[
        "gen_width",
        "fit_width",
        "pred_ll",
        "pred_ll_se",
        "rmse",
        "mean_accept",
        "divergences",
        "unreliable",
    ]);
    let mut spread_verdicts = Vec::new();

    for (gi, &gen_width) in config.gen_widths.iter().enumerate() {
        let gen_arch = two_layer_add_rbf(
            config.input_dim,
            gen_width,
            1.0,
            1.0,
            1.0,
            1.0,
            config.gen_noise,
        )?;
        let dataset = data::synth_dgp(
            &gen_arch,
            config.n,
            config.input_dim,
            deepgp_core::seed::derive(config.seed, gi as u64),
        )?;
        let (x_train, y_train) = dataset.train_xy();

        // Shared hyperparameters from the limiting GP of this dataset.
        let template = KernelSpec::LimitAddRbf {
            o1: 1.0,
            ell1: 1.0,
            o2: 1.0,
            ell2: 1.0,
        };
        let opt = runner::optimize_limit_hypers(
            &template,
            &x_train,
            &y_train,
            config.hyper_steps,
            config.hyper_lr,
        )?;
        let hypers = opt.kernel.hypers();

        let mut row_ll = Vec::new();
        for (fi, &fit_width) in config.fit_widths.iter().enumerate() {
            let arch = two_layer_add_rbf(
                dataset.dim(),
                fit_width,
                hypers[0],
                hypers[1],
                hypers[2],
                hypers[3],
                opt.noise,
            )?;
            let fit = runner::fit_deep_gp(
                &format!("g{gen_width}_f{fit_width}"),
                &arch,
                &dataset,
                &config.hmc,
                config.map_steps,
                config.map_lr,
                deepgp_core::seed::derive(config.seed, 1000 + 10 * gi as u64 + fi as u64),
            )?;
            let m = &fit.metrics;
            csv.push(&[
                gen_width.to_string(),
                fit_width.to_string(),
                fmt_f64(m.pred_ll),
                fmt_f64(m.pred_ll_se),
                fmt_f64(m.rmse),
                fmt_f64(m.mean_accept),
                m.divergences.to_string(),
                (m.unreliable as u8).to_string(),
            ]);
            row_ll.push((fit_width, m.pred_ll, m.pred_ll_se));
        }

        // Spread verdict across the wider fits (width 1 reported, not gated).
        let wide: Vec<&(usize, f64, f64)> =
            row_ll.iter().filter(|(w, _, _)| *w >= 2).collect();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut lo_se, mut hi_se) = (0.0, 0.0);
        for (_, ll, se) in &wide {
            if *ll < lo {
                lo = *ll;
                lo_se = *se;
            }
            if *ll > hi {
                hi = *ll;
                hi_se = *se;
            }
        }
        let combined = (lo_se * lo_se + hi_se * hi_se).sqrt();
        spread_verdicts.push(json!({
            "gen_width": gen_width,
            "ll": row_ll.iter().map(|(w, ll, se)| json!({
                "fit_width": w, "pred_ll": ll, "se": se
            })).collect::<Vec<_>>(),
            "spread": hi - lo,
            "combined_se": combined,
            "within_3_combined_se": hi - lo < 3.0 * combined,
        }));
    }
    writer.write("control_matrix.csv", &csv.finish())?;
    writer.write_json("verdicts.json", &json!({ "datasets": spread_verdicts }))?;
    Ok(())
}
