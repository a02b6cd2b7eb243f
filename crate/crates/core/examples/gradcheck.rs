//! Reverse-mode autodiff checked against central differences on a small
//! attention-style block in f64.

use salad::gradcheck::check_gradients;
use salad::{NoiseRng, Tensor};

fn main() {
    let mut rng = NoiseRng::new(3);
    let inputs: Vec<Tensor<f64>> = vec![
        rng.normal_tensor(&[5, 4]),
        rng.normal_tensor(&[4, 4]),
        rng.normal_tensor(&[4]),
        rng.normal_tensor(&[5, 4]),
    ];
    let report = check_gradients(&inputs, 1e-5, |g, v| {
        let h = g.matmul(v[0], v[1]).unwrap();
        let h = g.add_row(h, v[2]).unwrap();
        let h = g.layernorm(h).unwrap();
        let ht = g.transpose(h).unwrap();
        let scores = g.matmul(h, ht).unwrap();
        let attn = g.softmax(scores).unwrap();
        let mixed = g.matmul(attn, h).unwrap();
        let act = g.silu(mixed).unwrap();
        g.mse(act, v[3]).unwrap()
    });
    println!(
        "{} coordinates, max relative error {:.2e}, {:.1}% within 1e-4",
        report.coordinates(),
        report.max_rel_error(),
        100.0 * report.fraction_within(1e-4)
    );
}
