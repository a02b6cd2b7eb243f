//! Central finite-difference checks for the autodiff graph.

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Below this magnitude on both sides a coordinate is compared absolutely.
const ABS_FLOOR: f64 = 1e-7;

/// Per-coordinate relative errors of one check.
#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    pub rel_errors: Vec<f64>,
}

impl GradCheck {
    pub fn coordinates(&self) -> usize {
        self.rel_errors.len()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }

    pub fn fraction_within(&self, tol: f64) -> f64 {
        if self.rel_errors.is_empty() {
            return 1.0;
        }
        self.rel_errors.iter().filter(|&&e| e < tol).count() as f64 / self.rel_errors.len() as f64
    }

    pub fn passes(&self, tol: f64, fraction: f64) -> bool {
        self.fraction_within(tol) >= fraction
    }

    /// Fold another check into this one.
    pub fn merge(&mut self, other: GradCheck) {
        self.rel_errors.extend(other.rel_errors);
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        let scale = analytic.abs().max(numeric.abs());
        let diff = (analytic - numeric).abs();
        let rel = if scale < ABS_FLOOR { 0.0 } else { diff / scale };
        self.rel_errors.push(rel);
    }
}

/// Compare autodiff gradients of a scalar function of `inputs` against central
/// differences with step `h`. `build` receives the inputs as parameters and must
/// return a scalar node.
pub fn check_gradients(
    inputs: &[Tensor<f64>],
    h: f64,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> GradCheck {
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).data()[0]
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out).expect("scalar output");

    let mut report = GradCheck::default();
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[i].shape());
        let analytic = grads.get(*v).unwrap_or(&zeros).clone();
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work);
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work);
            work[i].data_mut()[j] = orig;
            report.record(analytic.data()[j], (up - down) / (2.0 * h));
        }
    }
    report
}
