//! Shared experiment pipeline: hyperparameters from the limiting GP, MAP
//! initialization, HMC, and the predictive / kernel-fit metrics.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use deepgp_core::analysis::{self, KernelFit, PredictiveLl};
use deepgp_core::data::Dataset;
use deepgp_core::deepgp::DeepGpArchitecture;
use deepgp_core::gp;
use deepgp_core::inference::{self};
use deepgp_core::{KernelSpec, Result};

use crate::config::HmcSettings;

/// Per-model metrics emitted by the sweep commands.
#[derive(Debug, Clone, Serialize)]
pub struct ModelMetrics {
    pub model: String,
    pub pred_ll: f64,
    pub pred_ll_se: f64,
    pub kernel_fit: f64,
    pub kernel_fit_se: f64,
    pub rmse: f64,
    pub mean_accept: f64,
    pub step_size: f64,
    pub divergences: usize,
    pub unreliable: bool,
}

pub struct DeepFit {
    pub metrics: ModelMetrics,
    #[allow(dead_code)]
    pub pred: PredictiveLl,
    #[allow(dead_code)]
    pub fit: KernelFit,
}

/// Optimize the limiting-GP hyperparameters from the paper-default
/// initialization (all scales 1, noise 0.2).
pub fn optimize_limit_hypers(
    template: &KernelSpec,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    steps: usize,
    lr: f64,
) -> Result<gp::HyperOptResult> {
    let ones = vec![1.0; template.hypers().len()];
    let init = template.with_hypers(&ones)?;
    gp::optimize_hypers(&init, x, y, steps, lr, 0.2, deepgp_core::kernels::DEFAULT_JITTER)
}

/// MAP-initialize and sample one deep GP, then score it on the test split.
///
/// Width-1 chains get four times the MAP budget; their posteriors are the
/// hardest to initialize well.
#[allow(clippy::too_many_arguments)]
pub fn fit_deep_gp(
    name: &str,
    arch: &DeepGpArchitecture,
    dataset: &Dataset,
    hmc: &HmcSettings,
    map_steps: usize,
    map_lr: f64,
    chain_seed: u64,
) -> Result<DeepFit> {
    let (x_train, y_train) = dataset.train_xy();
    let (x_test, y_test) = dataset.test_xy();
    let narrow = arch.layers()[..arch.depth() - 1]
        .iter()
        .any(|l| l.width == 1)
        || arch.depth() == 1;
    let steps = if narrow { 4 * map_steps } else { map_steps };
    let init = inference::map_init(arch, &x_train, &y_train, steps, map_lr)?;
    let chain = inference::run_chain(arch, &x_train, &y_train, &hmc.to_config(chain_seed), &init)?;
    let pred = analysis::predictive_ll(
        arch,
        &chain,
        &x_train,
        &x_test,
        &y_test,
        deepgp_core::seed::derive(chain_seed, 0xA11),
    )?;
    let fit = analysis::kernel_fit(arch, &chain, &x_train, &y_train)?;
    let metrics = ModelMetrics {
        model: name.to_string(),
        pred_ll: pred.mean,
        pred_ll_se: pred.se,
        kernel_fit: fit.mean,
        kernel_fit_se: fit.se,
        rmse: pred.rmse(&y_test),
        mean_accept: chain.mean_accept(),
        step_size: chain.step_size,
        divergences: chain.divergences,
        unreliable: chain.unreliable,
    };
    Ok(DeepFit { metrics, pred, fit })
}

/// Exact limiting-GP row: kernel fit is the log marginal likelihood itself.
pub fn fit_limit_gp(
    name: &str,
    kernel: &KernelSpec,
    noise: f64,
    dataset: &Dataset,
) -> Result<ModelMetrics> {
    let (x_train, y_train) = dataset.train_xy();
    let (x_test, y_test) = dataset.test_xy();
    let fit = gp::fit(kernel, &x_train, &y_train, noise, deepgp_core::kernels::DEFAULT_JITTER)?;
    let lls = fit.test_log_likelihood(&x_test, &y_test)?;
    let m = lls.len() as f64;
    let mean = lls.iter().sum::<f64>() / m;
    let var = lls.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0).max(1.0);
    let mut sq = 0.0;
    for (i, row) in deepgp_core::kernels::matrix_rows(&x_test).iter().enumerate() {
        let p = fit.predictive(row)?;
        sq += (p.mean - y_test[i]) * (p.mean - y_test[i]);
    }
    Ok(ModelMetrics {
        model: name.to_string(),
        pred_ll: mean,
        pred_ll_se: (var / m).sqrt(),
        kernel_fit: fit.lml(),
        kernel_fit_se: 0.0,
        rmse: (sq / m).sqrt(),
        mean_accept: f64::NAN,
        step_size: f64::NAN,
        divergences: 0,
        unreliable: false,
    })
}
