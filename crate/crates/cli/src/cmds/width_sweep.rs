//! `width-sweep`: test log likelihood and posterior kernel fit of 2-layer
//! deep GPs as a function of width, against the limiting-GP baseline.

use deepgp_core::deepgp::two_layer_add_rbf;
use deepgp_core::{KernelSpec, Result};

use crate::config::WidthSweepConfig;
use crate::output::{fmt_f64, LongCsv, OutputWriter};
use crate::runner::{self, ModelMetrics};

pub fn metrics_rows(csv: &mut LongCsv, m: &ModelMetrics) {
    let mut push = |metric: &str, value: f64, se: f64| {
        csv.push(&[
            m.model.clone(),
            metric.to_string(),
            fmt_f64(value),
            fmt_f64(se),
        ]);
    };
    push("pred_ll", m.pred_ll, m.pred_ll_se);
    push("kernel_fit", m.kernel_fit, m.kernel_fit_se);
    push("rmse", m.rmse, 0.0);
    push("mean_accept", m.mean_accept, 0.0);
    push("step_size", m.step_size, 0.0);
    push("divergences", m.divergences as f64, 0.0);
    push("unreliable", if m.unreliable { 1.0 } else { 0.0 }, 0.0);
}

pub fn run(config: &WidthSweepConfig) -> Result<()> {
    let writer = OutputWriter::new(&config.out, "width-sweep", config, config.seed)?;
    let dataset = config.dataset.load(deepgp_core::seed::derive(config.seed, 1))?;
    let (x_train, y_train) = dataset.train_xy();

    // Hyperparameters maximize the limiting-GP marginal likelihood.
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
    let noise = opt.noise;

    let mut csv = LongCsv::new(&["model", "metric", "value", "se"]);
    let baseline = runner::fit_limit_gp("limit", &opt.kernel, noise, &dataset)?;
    metrics_rows(&mut csv, &baseline);

    for (wi, &width) in config.widths.iter().enumerate() {
        let arch = two_layer_add_rbf(
            dataset.dim(),
            width,
            hypers[0],
            hypers[1],
            hypers[2],
            hypers[3],
            noise,
        )?;
        let fit = runner::fit_deep_gp(
            &format!("width_{width}"),
            &arch,
            &dataset,
            &config.hmc,
            config.map_steps,
            config.map_lr,
            deepgp_core::seed::derive(config.seed, 100 + wi as u64),
        )?;
        metrics_rows(&mut csv, &fit.metrics);
    }
    writer.write("width_sweep.csv", &csv.finish())?;

    let mut hy = LongCsv::new(&["name", "value"]);
    for (name, v) in ["o1", "ell1", "o2", "ell2"].iter().zip(&hypers) {
        hy.push(&[name.to_string(), fmt_f64(*v)]);
    }
    hy.push(&["noise".to_string(), fmt_f64(noise)]);
    hy.push(&["limit_lml".to_string(), fmt_f64(baseline.kernel_fit)]);
    writer.write("hyperparameters.csv", &hy.finish())?;
    Ok(())
}
