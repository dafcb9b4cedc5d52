// SPDX-License-Identifier: MIT OR Apache-2.0

use featrace_core::crosscoder::{gradient_check, CrosscoderModel, LossConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_case(rng: &mut ChaCha8Rng) -> (CrosscoderModel<f64>, Vec<Array2<f64>>, LossConfig) {
    let f = rng.random_range(1..=16);
    let d = rng.random_range(1..=8);
    let n = rng.random_range(1..=4);
    let rows = rng.random_range(2..=12);
    let mut m = CrosscoderModel::<f64>::random_init(f, d, (0..n as u64).collect(), 0.0, rng);
    // High thresholds on some models push the kernels onto the sparse path.
    let t_scale = if rng.random_bool(0.5) { 0.3 } else { 2.5 };
    for t in 0..n {
        m.w_enc[t].mapv_inplace(|_| rng.random_range(-1.0..1.0));
        m.w_dec[t].mapv_inplace(|_| rng.random_range(-1.0..1.0));
        m.b_dec[t].mapv_inplace(|_| rng.random_range(-0.2..0.2));
    }
    m.b_enc.mapv_inplace(|_| rng.random_range(-0.2..0.2));
    m.threshold.mapv_inplace(|_| rng.random_range(0.0..t_scale));
    let batch = (0..n)
        .map(|_| Array2::from_shape_fn((rows, d), |_| rng.random_range(-1.5..1.5)))
        .collect();
    let cfg = LossConfig {
        lambda: rng.random_range(0.0..1.0),
        omega0: rng.random_range(0.01..1.0),
        ste_bandwidth: 1e-3,
    };
    (m, batch, cfg)
}

#[test]
fn analytic_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0;
    for case in 0..120 {
        let (m, batch, cfg) = random_case(&mut rng);
        let views: Vec<_> = batch.iter().map(|a| a.view()).collect();
        let r = gradient_check(&m, &views, &cfg, 1e-5, 1e-8).unwrap();
        assert!(r.max_rel_error < 1e-4, "case {case}: {r:?}");
        checked += r.checked;
    }
    assert!(checked > 10_000, "only {checked} parameters checked");
}
