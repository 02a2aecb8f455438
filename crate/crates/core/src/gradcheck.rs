//! Central finite differences for checking analytic gradients.

use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::layers::{softmax_cross_entropy, Mode};
use crate::net::{Network, NetworkConfig, NUM_CLASSES};
use crate::seed::{self, Stream};
use crate::tensor::{Scalar, Tensor};

/// Denominator floor for [`relative_error`]; below it errors are effectively
/// absolute, so rounding noise on near-zero gradients is not amplified.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// `(f(x + ε·e_i) − f(x − ε·e_i)) / 2ε` for element `index` of `x`.
pub fn central_difference<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> T,
    x: &Tensor<T>,
    index: usize,
    eps: f64,
) -> f64 {
    let mut probe = x.clone();
    let base = probe.data()[index];
    let step = T::from_f64_lossy(eps);
    probe.data_mut()[index] = base + step;
    let plus = f(&probe).as_f64();
    probe.data_mut()[index] = base - step;
    let minus = f(&probe).as_f64();
    (plus - minus) / (2.0 * eps)
}

/// `|a − n| / max(|a|, |n|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(analytic: impl Scalar, numeric: f64) -> f64 {
    let a = analytic.as_f64();
    (a - numeric).abs() / a.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Outcome of [`check_network`].
#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    pub max_relative_error: f64,
    /// `(name, index, analytic, numeric)` of the worst element.
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
    /// Probes skipped because a ReLU or pooling kink lies within ε.
    pub skipped: usize,
}

/// One-sided differences disagreeing by more than this (relative) mark a
/// probe that straddles a non-differentiable point.
const KINK_TOLERANCE: f64 = 1e-3;

/// Checks the loss gradient of a whole `f64` network, dropout disabled,
/// against central differences on `per_tensor` random elements of every
/// parameter tensor and of the input batch.
pub fn check_network(
    mut config: NetworkConfig,
    seed: u64,
    batch: usize,
    per_tensor: usize,
    eps: f64,
) -> Result<GradReport> {
    config.dropout = 0.0;
    let side = config.window;
    let mut rng = seed::rng(seed, Stream::Init);
    let mut net = Network::<f64>::build(config, &mut rng)?;
    let x = Tensor::from_vec(
        &[batch, 1, side, side],
        (0..batch * side * side).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    let labels: Vec<usize> = (0..batch).map(|i| i % NUM_CLASSES).collect();
    let loss = |net: &Network<f64>, x: &Tensor<f64>| -> f64 {
        softmax_cross_entropy(&net.infer(x).expect("shapes checked").logits, &labels)
            .expect("labels in range")
            .loss
    };

    net.zero_grad();
    let out = net.forward(&x, Mode::Eval, &mut rng)?;
    let grad_input = net.backward(&softmax_cross_entropy(&out.logits, &labels)?.grad_logits)?;
    let mut report = GradReport {
        max_relative_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    let record = |report: &mut GradReport, name: String, at: usize, analytic: f64, f0: f64, fp: f64, fm: f64| {
        let (up, down) = ((fp - f0) / eps, (f0 - fm) / eps);
        if (up - down).abs() > KINK_TOLERANCE * up.abs().max(down.abs()).max(RELATIVE_ERROR_FLOOR) {
            report.skipped += 1;
            return;
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if err >= report.max_relative_error {
            report.max_relative_error = err;
            report.worst = Some((name, at, analytic, numeric));
        }
    };

    let f0 = loss(&net, &x);
    let params: Vec<(Tensor<f64>, Tensor<f64>)> =
        net.params().iter().map(|p| (p.value.clone(), p.grad.clone())).collect();
    for (t, (value, grad)) in params.iter().enumerate() {
        for _ in 0..per_tensor.min(value.len()) {
            let at = rng.gen_range(0..value.len());
            let mut probe = net.clone();
            let base = value.data()[at];
            probe.params_mut()[t].value.data_mut()[at] = base + eps;
            let fp = loss(&probe, &x);
            probe.params_mut()[t].value.data_mut()[at] = base - eps;
            let fm = loss(&probe, &x);
            record(&mut report, format!("param {t}"), at, grad.data()[at], f0, fp, fm);
        }
    }
    for _ in 0..per_tensor {
        let at = rng.gen_range(0..x.len());
        let mut probe = x.clone();
        probe.data_mut()[at] += eps;
        let fp = loss(&net, &probe);
        probe.data_mut()[at] = x.data()[at] - eps;
        let fm = loss(&net, &probe);
        record(&mut report, "input".into(), at, grad_input.data()[at], f0, fp, fm);
    }
    Ok(report)
}
